"""Command-line entry point.

Each verb runs one or more recipe stages inside ``--out``. Step verbs never
rebuild upstream stages; they fail with ``missing artifact: <stage>`` when an
input is absent or stale. ``run-recipe`` runs (or resumes) the whole chain.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .lexicon import (
    LexiconError,
    P2VMap,
    derive_viseme_lexicon,
    homophone_histogram,
    load_dictionary,
    neti_map,
    vocabulary_stats,
)
from .recipe import STAGES, ConfigError, MissingArtifact, Recipe, RecipeConfig, RecipeError

log = logging.getLogger("lipread")

GMM_STAGES = ("ci", "cd", "lda_mllt", "sat")
VERB_STAGES = {
    "gen-corpus": ("corpus",),
    "feats": ("feats",),
    "train-gmm": GMM_STAGES,
    "train-dnn": ("dnn",),
    "mkgraph": ("graph",),
    "decode": ("decode", "rescore"),
    "score": ("score",),
}


class UsageError(Exception):
    pass


def _load_config(args) -> RecipeConfig:
    if args.config:
        cfg = RecipeConfig.from_file(args.config)
    elif (Path(args.out) / "config.ini").exists():
        cfg = RecipeConfig.from_file(Path(args.out) / "config.ini")
    elif args.desk:
        cfg = RecipeConfig.desk()
    else:
        cfg = RecipeConfig()
    cfg.validate()
    return cfg


def _recipe(args) -> Recipe:
    return Recipe(_load_config(args), args.out, seed=args.seed)


def cmd_stages(args) -> int:
    stages = VERB_STAGES[args.verb]
    if args.stage:
        if args.stage not in stages:
            raise UsageError(f"--stage for {args.verb} must be one of: {' '.join(stages)}")
        stages = (args.stage,)
    rec = _recipe(args)
    for s in stages:
        rec.run_stage(s, force=args.force)
    return 0


def cmd_run_recipe(args) -> int:
    if args.stage and args.stage not in STAGES:
        raise UsageError(f"--stage must be one of: {' '.join(STAGES)}")
    res = _recipe(args).run(force_from=args.stage)
    for c in res["cells"]:
        print(f"{c['scenario']} {c['features']} {c['model']} {c['units']}: "
              f"unit {c['unit_acc']:.2f} word {c['word_acc']:.2f}")
    return 0


def _read_input(path, what: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"missing artifact: {what} ({p})")
    return p.read_text()


def cmd_dict_analyze(args) -> int:
    p2v = P2VMap.parse(_read_input(args.map, "map")) if args.map else neti_map()
    phon = load_dictionary(_read_input(args.dict, "dictionary"))
    vis = derive_viseme_lexicon(phon, p2v)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = ["units\tgroup_size\titems"]
    for kind, lex in (("phoneme", phon), ("viseme", vis)):
        rows += [f"{kind}\t{k}\t{n}" for k, n in homophone_histogram(lex).items()]
    (out / "histogram.tsv").write_text("\n".join(rows) + "\n")
    stats = vocabulary_stats(phon, vis)
    rows = ["units\twords\tpronunciations"]
    rows += [f"{k}\t{v['words']}\t{v['pronunciations']}" for k, v in stats.items()]
    (out / "vocab_stats.tsv").write_text("\n".join(rows) + "\n")
    (out / "lexicon_viseme.txt").write_text(vis.to_text())

    files = ["histogram.tsv", "vocab_stats.tsv", "lexicon_viseme.txt"]
    inputs = {"dict": str(args.dict), "map": str(args.map) if args.map else "builtin"}
    manifest = {
        "verb": "dict-analyze", "inputs": inputs,
        "outputs": {f: hashlib.sha256((out / f).read_bytes()).hexdigest() for f in files},
        "versions": {"lipread": __version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    sys.stdout.write((out / "histogram.tsv").read_text() + (out / "vocab_stats.tsv").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipread", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="experiment directory")
        sp.add_argument("--config", help="INI config (default: <out>/config.ini, else built-in defaults)")
        sp.add_argument("--seed", type=int, help="master seed, overrides the config")
        sp.add_argument("--desk", action="store_true", help="desk-scale sizes when no config exists")
        sp.add_argument("-v", "--verbose", action="store_true")

    for verb, stages in VERB_STAGES.items():
        sp = sub.add_parser(verb, help="stages: " + " ".join(stages))
        common(sp)
        sp.add_argument("--stage", help="run only this stage" if len(stages) > 1 else argparse.SUPPRESS)
        sp.add_argument("--force", action="store_true", help="rerun even when up to date")
        sp.set_defaults(func=cmd_stages)

    sp = sub.add_parser("run-recipe", help="run or resume the full pipeline")
    common(sp)
    sp.add_argument("--stage", help="recompute from this stage on")
    sp.set_defaults(func=cmd_run_recipe)

    sp = sub.add_parser("dict-analyze", help="homophone histogram and vocabulary stats")
    sp.add_argument("--dict", required=True, help="phoneme dictionary, one '<WORD> <phones>' per line")
    sp.add_argument("--map", help="phoneme-to-viseme map (default: built-in Neti classes)")
    sp.add_argument("--out", required=True)
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_dict_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, MissingArtifact, ConfigError, LexiconError) as e:
        print(f"lipread: error: {e}", file=sys.stderr)
        return 2
    except RecipeError as e:
        print(f"lipread: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:   # noqa: BLE001
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"lipread: error: internal: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
