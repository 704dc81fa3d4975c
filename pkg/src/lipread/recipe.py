"""Experiment configuration and the staged recipe runner.

Every stage writes its outputs plus a ``manifest.json`` under
``<out>/<stage>/``. The manifest key hashes the stage's config sections,
its seed and the keys of the stages it reads, so a rerun with unchanged
inputs reuses the stage and any upstream change invalidates it.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import logging
import shutil
import traceback
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__, archive
from .corpus import (
    SD,
    SI,
    TEST,
    TRAIN,
    Corpus,
    generate_synthetic_corpus,
    load_corpus,
    p2v_from_groups,
    save_corpus,
    split_corpus,
)
from .decoder.decode import Decoder, GmmScorer, Lattice, best_path, path_alignment, rescore
from .decoder.graph import DecodingGraph, build_graph
from .dnn import DnnAcousticModel, HybridScorer, Mlp
from .frontend import extract_features, pca_fit, sample_pca_training_images
from .gmmhmm import train as gt
from .gmmhmm.model import AcousticModel, read_alignments, write_alignments
from .lexicon import (
    PHONEME,
    VISEME,
    Lexicon,
    P2VMap,
    UnitSet,
    derive_viseme_lexicon,
    neti_map,
    phoneme_units,
    train_bigram_lm,
    viseme_units,
)
from .scoring import (
    RunResult,
    align_sequences,
    confusion_matrix,
    map_hyp_to_visemes,
    report_text,
    report_tsv,
    select_scale,
    summarize,
)
from .transforms import (
    FeatureMap,
    LinearTransform,
    apply_speaker_transforms,
    apply_transform,
    cmvn,
    load_speaker_transforms,
    map_deltas,
    map_splice,
    save_speaker_transforms,
    speaker_mean_normalize,
)

log = logging.getLogger(__name__)


class RecipeError(RuntimeError):
    pass


class MissingArtifact(RecipeError):
    """An input a stage needs has not been produced."""


class ConfigError(RecipeError):
    pass


# -- configuration ------------------------------------------------------------

def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _frac(x):
    return 0 < x < 1


def _choice(*opts):
    return lambda x: x in opts


def _words_in(*opts):
    return lambda x: all(w in opts for w in x.split()) and bool(x.split())


# section -> key -> (default, check); the type follows the default
SCHEMA: dict[str, dict[str, tuple[Any, Callable | None]]] = {
    "experiment": {
        "seed": (0, _nonneg),
        "scenario": (SD, _choice(SD, SI)),
        "units": (PHONEME, _choice(PHONEME, VISEME)),
        "features": ("dct", _choice("dct", "eigenlips")),
        "train_fraction": (0.7, _frac),
        "models": ("gmm dnn", _words_in("gmm", "dnn")),
    },
    "corpus": {
        "path": ("", None),
        "p2v": ("", None),
        "units": ("p b t d k g f v s z m n", None),
        "silence": ("sil", None),
        "groups": ("", None),
        "contrast": (0.0, _nonneg),
        "n_speakers": (6, _pos),
        "utts_per_speaker": (20, _pos),
        "words_per_utt": (5, _pos),
        "n_words": (30, _pos),
        "image_size": (32, _pos),
        "noise_sigma": (0.05, _nonneg),
        "duration_min": (4, _pos),
        "duration_max": (12, _pos),
        "silence_min": (2, _nonneg),
        "silence_max": (6, _nonneg),
        "coarticulation": (0.3, _nonneg),
        "speaker_variation": (0.1, _nonneg),
        "grammar_strength": (0.7, _nonneg),
    },
    "features": {
        "dct_coeffs": (44, _pos),
        "pca_components": (30, _pos),
        "pca_images_per_utt": (25, _pos),
        "delta_window": (2, _pos),
    },
    "ci": {
        "n_iters": (40, _pos),
        "max_gauss": (1000, _pos),
    },
    "cd": {
        "n_iters": (35, _pos),
        "max_gauss": (10_000, _pos),
        "max_leaves": (2000, _pos),
        "realign_every": (10, _pos),
        "converge_tol": (1e-4, _pos),
    },
    "lda_mllt": {
        "n_iters": (35, _pos),
        "max_gauss": (15_000, _pos),
        "max_leaves": (2500, _pos),
        "realign_every": (10, _pos),
        "converge_tol": (1e-4, _pos),
        "dim": (40, _pos),
        "context": (7, _nonneg),
        "mllt_iters": (10, _pos),
        "refine_iters": (4, _nonneg),
    },
    "sat": {
        "n_iters": (35, _pos),
        "realign_every": (10, _pos),
        "converge_tol": (1e-4, _pos),
        "fmllr_iters": ("1 3 5 10", None),
        "fmllr_inner": (5, _pos),
    },
    "dnn": {
        "hidden_layers": (6, _nonneg),
        "hidden_dim": (2048, _pos),
        "context": (5, _nonneg),
        "pretrain": (True, None),
        "lr0": (0.008, _pos),
        "dropout": (0.1, lambda x: 0 <= x < 1),
        "minibatch": (256, _pos),
        "cv_fraction": (0.1, _frac),
        "stop_delta": (0.001, _pos),
        "rbm_lr": (0.4, _pos),
        "rbm_lr_gaussian": (0.01, _pos),
        "rbm_l2": (0.0002, _nonneg),
        "rbm_epochs": (3, _nonneg),
        "rbm_momentum": (0.9, lambda x: 0 <= x < 1),
        "rbm_init_std": (0.1, _pos),
        "lr_retry_factor": (0.5, _frac),
        "max_epochs": (20, _pos),
        "max_retries": (4, _nonneg),
    },
    "decode": {
        "beam": (13.0, _pos),
        "lattice_beam": (8.0, _pos),
        "model_scale": (0.1, _pos),
        "prune_interval": (25, _pos),
        "max_active": (7000, _pos),
        "lm_scale_min": (5, _pos),
        "lm_scale_max": (15, _pos),
        "lm_k": (0.5, _pos),
        "optional_silence": (True, None),
        "fmllr_iters": (10, _pos),
    },
}

# sizes that make the full pipeline run in minutes on a laptop
DESK_OVERRIDES = {
    "ci": {"n_iters": 20, "max_gauss": 4},
    "cd": {"n_iters": 15, "max_gauss": 400, "max_leaves": 120, "realign_every": 5},
    "lda_mllt": {"n_iters": 15, "max_gauss": 500, "max_leaves": 150, "realign_every": 5, "dim": 24},
    "sat": {"n_iters": 10, "realign_every": 5, "fmllr_iters": "1 3 5"},
    "dnn": {"hidden_layers": 2, "hidden_dim": 256, "minibatch": 128},
}


def _parse(value: str, default):
    if isinstance(default, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return type(default)(value.strip())


class RecipeConfig:
    """Typed, validated view of an INI file whose sections and keys follow
    :data:`SCHEMA`. Unknown sections or keys are rejected."""

    def __init__(self, values: dict[str, dict[str, Any]] | None = None):
        self.values = {s: {k: d for k, (d, _) in keys.items()} for s, keys in SCHEMA.items()}
        for s, kv in (values or {}).items():
            for k, v in kv.items():
                self.set(s, k, v)

    def set(self, section: str, key: str, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        default, check = SCHEMA[section][key]
        try:
            v = _parse(value, default) if isinstance(value, str) else type(default)(value)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}") from None
        if check is not None and not check(v):
            raise ConfigError(f"[{section}] {key} = {v!r} is out of range")
        self.values[section][key] = v

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @classmethod
    def from_text(cls, text: str) -> "RecipeConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e).splitlines()[0]) from None
        cfg = cls()
        for s in cp.sections():
            for k, v in cp.items(s):
                cfg.set(s, k, v)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RecipeConfig":
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"missing artifact: config ({p})")
        return cls.from_text(p.read_text())

    @classmethod
    def desk(cls, **sections) -> "RecipeConfig":
        cfg = cls(DESK_OVERRIDES)
        for s, kv in sections.items():
            for k, v in kv.items():
                cfg.set(s, k, v)
        cfg.validate()
        return cfg

    def validate(self):
        c = self.values["corpus"]
        if c["duration_min"] > c["duration_max"] or c["silence_min"] > c["silence_max"]:
            raise ConfigError("[corpus] range minimum exceeds maximum")
        if c["path"] and not Path(c["path"]).is_dir():
            raise MissingArtifact(f"missing artifact: corpus ({c['path']})")
        d = self.values["decode"]
        if d["lm_scale_min"] > d["lm_scale_max"]:
            raise ConfigError("[decode] lm_scale_min exceeds lm_scale_max")
        try:
            [int(x) for x in self.values["sat"]["fmllr_iters"].split()]
        except ValueError:
            raise ConfigError("[sat] fmllr_iters must be integers") from None

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for s, kv in self.values.items():
            cp[s] = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in kv.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self, sections) -> str:
        blob = json.dumps({s: self.values[s] for s in sections}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


# -- stages -------------------------------------------------------------------

STAGES = ("corpus", "feats", "ci", "cd", "lda_mllt", "sat", "dnn", "graph", "decode", "rescore", "score")

DEPS = {
    "corpus": (),
    "feats": ("corpus",),
    "ci": ("corpus", "feats"),
    "cd": ("corpus", "feats", "ci"),
    "lda_mllt": ("corpus", "feats", "cd"),
    "sat": ("corpus", "feats", "lda_mllt"),
    "dnn": ("corpus", "feats", "lda_mllt", "sat"),
    "graph": ("corpus", "sat"),
    "decode": ("corpus", "feats", "lda_mllt", "sat", "dnn", "graph"),
    "rescore": ("corpus", "graph", "decode"),
    "score": ("corpus", "graph", "rescore"),
}

SECTIONS = {
    "corpus": ("corpus",),
    "feats": ("features",),
    "ci": ("ci",),
    "cd": ("cd",),
    "lda_mllt": ("lda_mllt",),
    "sat": ("sat",),
    "dnn": ("dnn",),
    "graph": ("decode",),
    "decode": ("decode",),
    "rescore": ("decode",),
    "score": (),
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(type(o).__name__)


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _write_hyps(hyps: dict[str, list[str]], path: Path):
    path.write_text("".join(f"{k} {' '.join(v)}".rstrip() + "\n" for k, v in sorted(hyps.items())))


def _read_hyps(path: Path) -> dict[str, list[str]]:
    out = {}
    for ln in path.read_text().splitlines():
        if ln.strip():
            k, *w = ln.split()
            out[k] = w
    return out


def _write_lattices(lats: dict[str, Lattice], path: Path):
    with open(path, "w") as fh:
        for k in sorted(lats):
            fh.write(f"utt {k}\n{lats[k].to_text()}\n")


def _read_lattices(path: Path, words) -> dict[str, Lattice]:
    out: dict[str, Lattice] = {}
    key, buf = None, []
    for ln in path.read_text().splitlines() + ["utt"]:
        if ln.startswith("utt"):
            if key is not None:
                out[key] = Lattice.from_text("\n".join(buf), words)
            key, buf = ln[4:], []
        elif ln.strip():
            buf.append(ln)
    return out


class Recipe:
    """Runs and resumes the staged pipeline in ``out_dir``."""

    def __init__(self, config: RecipeConfig, out_dir, seed: int | None = None):
        self.cfg = config
        if seed is not None:
            self.cfg.set("experiment", "seed", seed)
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.ini").write_text(self.cfg.to_text())
        self._cache: dict[str, Any] = {}
        self._keys: dict[str, str] = {}

    # bookkeeping

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def stage_seed(self, stage: str) -> int:
        ss = np.random.SeedSequence(self.cfg["experiment"]["seed"], spawn_key=(STAGES.index(stage),))
        return int(ss.generate_state(1)[0])

    def stage_key(self, stage: str) -> str:
        if stage not in self._keys:
            blob = json.dumps({
                "stage": stage, "seed": self.stage_seed(stage),
                "experiment": self.cfg.digest(("experiment",)),
                "config": self.cfg.digest(SECTIONS[stage]),
                "inputs": [self.stage_key(d) for d in DEPS[stage]],
            }, sort_keys=True)
            self._keys[stage] = hashlib.sha256(blob.encode()).hexdigest()
        return self._keys[stage]

    def is_complete(self, stage: str) -> bool:
        mf = self.stage_dir(stage) / "manifest.json"
        if not mf.exists():
            return False
        m = json.loads(mf.read_text())
        if m.get("key") != self.stage_key(stage):
            return False
        d = self.stage_dir(stage)
        return all((d / f).exists() and _sha256(d / f) == h for f, h in m["outputs"].items())

    def require(self, stage: str):
        if not self.is_complete(stage):
            raise MissingArtifact(f"missing artifact: {stage} ({self.stage_dir(stage)})")

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run one stage if needed; returns whether it ran."""
        if not force and self.is_complete(stage):
            log.info("stage %s: up to date", stage)
            return False
        for d in reversed(DEPS[stage]):   # name the nearest missing input
            self.require(d)
        d = self.stage_dir(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        for k in [k for k in self._cache if k.startswith(stage + ":")]:
            del self._cache[k]
        log.info("stage %s: running", stage)
        try:
            getattr(self, "_stage_" + stage)(d)
        except MissingArtifact:
            raise
        except Exception as e:
            (d / "error.log").write_text(traceback.format_exc())
            raise RecipeError(f"stage {stage} failed: {e} (log: {d / 'error.log'})") from e
        outputs = {str(p.relative_to(d)): _sha256(p) for p in sorted(d.rglob("*")) if p.is_file()}
        _dump({
            "stage": stage, "key": self.stage_key(stage), "seed": self.stage_seed(stage),
            "config": {s: self.cfg[s] for s in ("experiment",) + SECTIONS[stage]},
            "inputs": {dep: self.stage_key(dep) for dep in DEPS[stage]},
            "outputs": outputs,
            "versions": {"lipread": __version__, "numpy": np.__version__},
        }, d / "manifest.json")
        return True

    def run(self, stages=STAGES, force_from: str | None = None) -> dict | None:
        """Run ``stages`` in pipeline order; stages from ``force_from`` on are
        recomputed even when up to date."""
        forced = False
        for s in STAGES:
            if s not in stages:
                continue
            forced = forced or s == force_from
            self.run_stage(s, force=forced)
        if "score" in stages:
            return json.loads((self.stage_dir("score") / "results.json").read_text())
        return None

    def _cached(self, key: str, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # shared artifacts

    def corpus(self) -> Corpus:
        return self._cached("corpus:corpus", lambda: load_corpus(self.stage_dir("corpus"),
                                                                   self.cfg["experiment"]["scenario"]))

    def p2v(self) -> P2VMap:
        return self._cached("corpus:p2v", lambda: P2VMap.parse((self.stage_dir("corpus") / "p2v.txt").read_text()))

    def phone_units(self) -> UnitSet:
        c = self.cfg["corpus"]
        if c["path"]:
            return phoneme_units(self.p2v())
        sil = tuple(c["silence"].split())
        return UnitSet(tuple(c["units"].split()) + sil, PHONEME, frozenset(sil))

    def units_and_lexicon(self) -> tuple[UnitSet, Lexicon]:
        lex = self.corpus().lexicon
        if self.cfg["experiment"]["units"] == PHONEME:
            return self.phone_units(), lex
        return viseme_units(self.p2v()), derive_viseme_lexicon(lex, self.p2v())

    def ids(self, part: str) -> list[str]:
        return sorted(u.id for u in self.corpus().subset(part))

    def raw_features(self) -> FeatureMap:
        return self._cached("feats:raw", lambda: FeatureMap(
            archive.read_feature_archive(self.stage_dir("feats") / "raw.ark")))

    def meannorm(self) -> FeatureMap:
        return self._cached("feats:meannorm", lambda: speaker_mean_normalize(
            self.raw_features(), self.corpus().utt2spk))

    def deltas(self) -> FeatureMap:
        return self._cached("feats:deltas", lambda: map_deltas(
            self.meannorm(), self.cfg["features"]["delta_window"]))

    def lda_features(self) -> FeatureMap:
        def make():
            ctx = self.cfg["lda_mllt"]["context"]
            lt = LinearTransform.load(self.stage_dir("lda_mllt") / "lda_mllt.mat")
            return apply_transform(map_splice(self.meannorm(), ctx, ctx), lt, "mllt")
        return self._cached("lda_mllt:feats", make)

    def model(self, stage: str) -> AcousticModel:
        return self._cached(stage + ":model", lambda: AcousticModel.load(self.stage_dir(stage) / "final.mdl"))

    def alignments(self, stage: str):
        return self._cached(stage + ":ali", lambda: read_alignments(self.stage_dir(stage) / "ali.ark"))

    def graph(self) -> DecodingGraph:
        return self._cached("graph:graph", lambda: DecodingGraph.load(self.stage_dir("graph")))

    def _subset(self, feats, part):
        ids = set(self.ids(part))
        out = FeatureMap(stage=feats.stage)
        out.update({k: v for k, v in feats.items() if k in ids})
        return out

    def _dnn_input(self, feats: FeatureMap, stats_dir: Path) -> FeatureMap:
        st = archive.read_feature_archive(stats_dir / "cmvn.ark")
        normed, _, _ = cmvn(feats, st["mean"][0], st["std"][0])
        ctx = self.cfg["dnn"]["context"]
        return map_splice(normed, ctx, ctx, stage="context")

    def _save_gmm_stage(self, d: Path, model, alis, slog):
        model.save(d / "final.mdl")
        write_alignments(alis, d / "ali.ark")
        _dump({**slog.to_dict(), "monotone_violations": len(slog.check_monotone())}, d / "log.json")

    # stage bodies

    def _stage_corpus(self, d: Path):
        c = self.cfg["corpus"]
        e = self.cfg["experiment"]
        seed = self.stage_seed("corpus")
        if c["path"]:
            corpus = load_corpus(c["path"])
            p2v = P2VMap.parse(Path(c["p2v"]).read_text()) if c["p2v"] else neti_map()
            if corpus.lexicon is None:
                raise MissingArtifact(f"missing artifact: lexicon ({c['path']}/lexicon.txt)")
        else:
            units = self.phone_units()
            groups = dict(g.split(":") for g in c["groups"].split())
            corpus = generate_synthetic_corpus(
                units, c["n_speakers"], c["utts_per_speaker"], c["words_per_utt"],
                (c["image_size"], c["image_size"]), c["noise_sigma"], seed, n_words=c["n_words"],
                groups=groups or None, contrast=c["contrast"],
                duration_range=(c["duration_min"], c["duration_max"]),
                silence_frames=(c["silence_min"], c["silence_max"]),
                coarticulation=c["coarticulation"], speaker_variation=c["speaker_variation"],
                grammar_strength=c["grammar_strength"])
            p2v = p2v_from_groups(units, groups)
        corpus = split_corpus(corpus, e["scenario"], e["train_fraction"], seed=seed + 1)
        save_corpus(corpus, d)
        (d / "p2v.txt").write_text(p2v.to_text())

    def _stage_feats(self, d: Path):
        f = self.cfg["features"]
        utts = list(self.corpus())
        if self.cfg["experiment"]["features"] == "dct":
            raw = extract_features(utts, "dct", n_coeffs=f["dct_coeffs"])
        else:
            train = [u for u in utts if u.id in set(self.ids(TRAIN))]
            imgs = sample_pca_training_images(train, f["pca_images_per_utt"], self.stage_seed("feats"))
            basis = pca_fit(imgs, f["pca_components"])
            basis.save(d / "eigenlips.npz")
            raw = extract_features(utts, "eigenlips", basis)
        archive.write_feature_archive(raw, d / "raw.ark")

    def _train_data(self, feats):
        units, lex = self.units_and_lexicon()
        return self._subset(feats, TRAIN), self.corpus().transcripts, lex, units

    def _stage_ci(self, d: Path):
        c = self.cfg["ci"]
        feats, trans, lex, units = self._train_data(self.deltas())
        model, alis = gt.flat_start(feats, trans, lex, units)
        model, alis, slog = gt.em_train_ci(model, feats, trans, lex, alis,
                                           gt.ci_config(c["n_iters"], c["max_gauss"]),
                                           self.cfg["decode"]["optional_silence"])
        self._save_gmm_stage(d, model, alis, slog)

    def _stage_cd(self, d: Path):
        c = self.cfg["cd"]
        feats, trans, lex, _ = self._train_data(self.deltas())
        cfg = gt.cd_config(c["n_iters"], c["max_gauss"], c["max_leaves"], c["realign_every"], c["converge_tol"])
        model, alis, slog = gt.train_cd(self.model("ci"), feats, trans, lex, self.alignments("ci"), cfg,
                                        optional_silence=self.cfg["decode"]["optional_silence"])
        self._save_gmm_stage(d, model, alis, slog)

    def _stage_lda_mllt(self, d: Path):
        c = self.cfg["lda_mllt"]
        feats, trans, lex, _ = self._train_data(self.meannorm())
        cfg = gt.cd_config(c["n_iters"], c["max_gauss"], c["max_leaves"], c["realign_every"], c["converge_tol"])
        model, alis, lt, slog = gt.train_lda_mllt(
            self.model("cd"), feats, trans, lex, self.alignments("cd"), cfg, c["dim"], c["context"],
            c["mllt_iters"], c["refine_iters"], self.cfg["decode"]["optional_silence"])
        lt.save(d / "lda_mllt.mat")
        _dump(lt.trace, d / "transform_log.json")
        self._save_gmm_stage(d, model, alis, slog)

    def _stage_sat(self, d: Path):
        c = self.cfg["sat"]
        feats, trans, lex, _ = self._train_data(self.lda_features())
        prev = self.model("lda_mllt")
        realign = frozenset(range(c["realign_every"], c["n_iters"] + 1, c["realign_every"]))
        cfg = gt.StageConfig(c["n_iters"], realign, prev.gmms.n_components, converge_tol=c["converge_tol"])
        model, alis, xf, slog = gt.train_sat(
            prev, feats, trans, lex, self.alignments("lda_mllt"), self.corpus().utt2spk, cfg,
            tuple(int(x) for x in c["fmllr_iters"].split()), c["fmllr_inner"],
            self.cfg["decode"]["optional_silence"])
        save_speaker_transforms(xf, d / "fmllr.ark")
        self._save_gmm_stage(d, model, alis, slog)

    def _sat_features(self) -> FeatureMap:
        xf = load_speaker_transforms(self.stage_dir("sat") / "fmllr.ark")
        return apply_speaker_transforms(self._subset(self.lda_features(), TRAIN), xf, self.corpus().utt2spk)

    def _stage_dnn(self, d: Path):
        c = self.cfg["dnn"]
        feats = self._sat_features()
        _, mean, std = cmvn(feats)
        archive.write_feature_archive({"mean": mean[None], "std": std[None]}, d / "cmvn.ark")
        inp = self._dnn_input(feats, d)
        alis = self.alignments("sat")
        keys = sorted(k for k in inp if k in alis)
        X = np.concatenate([inp[k] for k in keys])
        y = np.concatenate([alis[k].pdf for k in keys])
        est = DnnAcousticModel(n_outputs=self.model("sat").n_pdfs, random_state=self.stage_seed("dnn"),
                               **{k: v for k, v in c.items() if k != "context"})
        est.fit(X, y)
        est.net_.save(d / "final.nnet")
        _dump({"pretrain": est.pretrain_log_, "finetune": vars(est.finetune_log_)}, d / "log.json")

    def _stage_graph(self, d: Path):
        _, lex = self.units_and_lexicon()
        trans = self.corpus().transcripts
        lm = train_bigram_lm([trans[k] for k in self.ids(TRAIN)], k=self.cfg["decode"]["lm_k"],
                             vocab=lex.words)
        graph = build_graph(lex, lm, self.model("sat"), self.cfg["decode"]["optional_silence"])
        graph.save(d)
        (d / "lm.arpa").write_text(lm.to_arpa())
        (d / "lexicon.txt").write_text(lex.to_text())

    def _decode_all(self, dec: Decoder, loglik_fn, feats) -> dict[str, Lattice]:
        p = self.cfg["decode"]
        out = {}
        for k in sorted(feats):
            lat = dec.decode(loglik_fn(feats[k]), p["beam"], p["lattice_beam"], p["model_scale"],
                             p["prune_interval"], p["max_active"])
            if lat.diagnostic:
                log.warning("decode %s: %s", k, lat.diagnostic)
            out[k] = lat
        return out

    def _stage_decode(self, d: Path):
        graph = self.graph()
        dec = Decoder(graph)
        utt2spk = self.corpus().utt2spk
        test = self._subset(self.lda_features(), TEST)
        first = self._decode_all(dec, GmmScorer(self.model("lda_mllt")), test)
        alis = {k: path_alignment(graph, best_path(lat).tids) for k, lat in first.items() if not lat.empty}
        sat = self.model("sat")
        xf = gt.estimate_speaker_transforms(sat, test, alis, utt2spk, self.cfg["decode"]["fmllr_iters"])
        save_speaker_transforms(xf, d / "fmllr_test.ark")
        adapted = apply_speaker_transforms(test, xf, utt2spk)
        models = self.cfg["experiment"]["models"].split()
        if "gmm" in models:
            _write_lattices(self._decode_all(dec, GmmScorer(sat), adapted), d / "gmm.lat")
        if "dnn" in models:
            net = Mlp.load(self.stage_dir("dnn") / "final.nnet")
            inp = self._dnn_input(adapted, self.stage_dir("dnn"))
            _write_lattices(self._decode_all(dec, HybridScorer(net), inp), d / "dnn.lat")

    def lm_scales(self) -> list[int]:
        p = self.cfg["decode"]
        return list(range(p["lm_scale_min"], p["lm_scale_max"] + 1))

    def _unit_hyp(self, graph, tids) -> list[str]:
        units = self.units_and_lexicon()[0]
        seq = path_alignment(graph, tids).unit_sequence()
        return [units.units[u] for u in seq if units.units[u] not in units.silence]

    def _stage_rescore(self, d: Path):
        graph = self.graph()
        for m in self.cfg["experiment"]["models"].split():
            lats = _read_lattices(self.stage_dir("decode") / f"{m}.lat", graph.words)
            words = {s: {} for s in self.lm_scales()}
            units = {s: {} for s in self.lm_scales()}
            for k, lat in lats.items():
                paths = rescore(lat, self.lm_scales()) if not lat.empty else {}
                for s in self.lm_scales():
                    bp = paths.get(s)
                    words[s][k] = bp.words if bp else []
                    units[s][k] = self._unit_hyp(graph, bp.tids) if bp else []
            (d / m / "units").mkdir(parents=True)
            for s in self.lm_scales():
                _write_hyps(words[s], d / m / f"hyp_{s}.txt")
                _write_hyps(units[s], d / m / "units" / f"hyp_{s}.txt")

    def unit_refs(self, ids) -> dict[str, list[str]]:
        units, lex = self.units_and_lexicon()
        trans = self.corpus().transcripts
        return {k: [u for w in trans[k] for u in lex[w][0] if u not in units.silence] for k in ids}

    def _stage_score(self, d: Path):
        e = self.cfg["experiment"]
        ids = self.ids(TEST)
        trans = self.corpus().transcripts
        refs = {k: trans[k] for k in ids}
        urefs = self.unit_refs(ids)
        runs, scales = [], {}
        for m in e["models"].split():
            r = self.stage_dir("rescore") / m
            hyps = {s: _read_hyps(r / f"hyp_{s}.txt") for s in self.lm_scales()}
            best, _, accs = select_scale(refs, hyps)
            uhyps = _read_hyps(r / "units" / f"hyp_{best}.txt")
            scales[m] = {"best": best, "word_acc": accs}
            runs.append(RunResult(e["scenario"], e["features"], m, e["units"], refs, hyps[best], urefs, uhyps))
            alis = [align_sequences(urefs[k], uhyps[k]) for k in ids]
            (d / f"confusion_{m}.tsv").write_text(confusion_matrix(alis).to_tsv())
            if e["units"] == PHONEME:
                p2v = self.p2v()
                valis = [align_sequences(map_hyp_to_visemes(urefs[k], p2v), map_hyp_to_visemes(uhyps[k], p2v))
                         for k in ids]
                (d / f"confusion_{m}_visemes.tsv").write_text(confusion_matrix(valis).to_tsv())
        summary = summarize(runs)
        (d / "report.txt").write_text(report_text(summary))
        (d / "report.tsv").write_text(report_tsv(summary))
        cells = [{"scenario": k[0], "features": k[1], "model": k[2], "units": k[3], **v}
                 for k, v in sorted(summary["cells"].items())]
        _dump({"cells": cells, "lm_scales": scales}, d / "results.json")
