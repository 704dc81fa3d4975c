import json

import pytest

from lipread.recipe import STAGES, ConfigError, MissingArtifact, Recipe, RecipeConfig

from conftest import TINY


@pytest.fixture(scope="module")
def done(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    res = Recipe(RecipeConfig.desk(**TINY), out).run()
    return out, res


def _files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _mtimes(root):
    return {str(p.relative_to(root)): p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file()}


def test_all_stages_have_manifests(done):
    out, res = done
    for s in STAGES:
        m = json.loads((out / s / "manifest.json").read_text())
        assert m["stage"] == s and m["outputs"]
        assert set(m["inputs"]) <= set(STAGES)
    assert {c["model"] for c in res["cells"]} == {"gmm", "dnn"}


def test_eleven_hypothesis_files_per_model(done):
    out, _ = done
    for m in ("gmm", "dnn"):
        hyps = sorted((out / "rescore" / m).glob("hyp_*.txt"))
        assert [h.name for h in hyps] == sorted(f"hyp_{s}.txt" for s in range(5, 16))
        assert len(list((out / "rescore" / m / "units").glob("hyp_*.txt"))) == 11


def test_report_contents(done):
    out, res = done
    txt = (out / "score" / "report.txt").read_text()
    assert "[SD dct dnn phoneme]" in txt and "unit_accuracy" in txt and "word_accuracy" in txt
    assert (out / "score" / "confusion_dnn_visemes.tsv").exists()
    for c in res["cells"]:
        assert 5 <= res["lm_scales"][c["model"]]["best"] <= 15


def test_resume_does_not_recompute(done):
    out, _ = done
    before = _mtimes(out)
    rec = Recipe(RecipeConfig.desk(**TINY), out)
    assert not any(rec.run_stage(s) for s in STAGES)
    after = _mtimes(out)
    before.pop("config.ini"), after.pop("config.ini")
    assert before == after


def test_interrupted_stage_reruns_alone(tmp_path, done):
    src, _ = done
    out = tmp_path / "exp"
    Recipe(RecipeConfig.desk(**TINY), out).run()
    (out / "dnn" / "manifest.json").unlink()   # as if killed before the manifest was written
    ran = []
    rec = Recipe(RecipeConfig.desk(**TINY), out)
    orig = rec.run_stage
    rec.run_stage = lambda s, force=False: ran.append(s) if orig(s, force) else None
    rec.run()
    assert ran == ["dnn"]
    assert _files(out) == _files(src)


def test_config_change_invalidates_downstream_only(tmp_path):
    out = tmp_path / "exp"
    Recipe(RecipeConfig.desk(**TINY), out).run()
    changed = {**TINY, "dnn": {**TINY["dnn"], "hidden_dim": 24}}
    rec = Recipe(RecipeConfig.desk(**changed), out)
    assert [s for s in STAGES if not rec.is_complete(s)] == ["dnn", "decode", "rescore", "score"]


def test_same_seed_is_byte_identical(tmp_path, done):
    src, _ = done
    Recipe(RecipeConfig.desk(**TINY), tmp_path).run()
    assert _files(tmp_path) == _files(src)


def test_other_seed_differs(tmp_path, done):
    src, _ = done
    Recipe(RecipeConfig.desk(**TINY), tmp_path, seed=7).run(stages=("corpus",))
    assert _files(tmp_path / "corpus") != _files(src / "corpus")


def test_viseme_units_run(tmp_path):
    cfg = RecipeConfig.desk(**TINY, experiment={"units": "viseme", "models": "gmm"})
    res = Recipe(cfg, tmp_path).run()
    (cell,) = res["cells"]
    assert cell["units"] == "viseme" and "unit_acc" in cell and "word_acc" in cell
    assert "[SD dct gmm viseme]" in (tmp_path / "score" / "report.txt").read_text()


def test_missing_input_is_named(tmp_path, tiny_config):
    rec = Recipe(tiny_config, tmp_path)
    with pytest.raises(MissingArtifact, match="missing artifact: graph"):
        rec.run_stage("decode")
    with pytest.raises(MissingArtifact, match="missing artifact: corpus"):
        rec.run_stage("feats")


@pytest.mark.parametrize("text, msg", [
    ("[dnn]\nbogus = 1\n", "unknown config key"),
    ("[dnn]\ndropout = 1.5\n", "out of range"),
    ("[ci]\nn_iters = many\n", "n_iters"),
    ("[corpus]\nduration_min = 9\nduration_max = 3\n", "exceeds"),
    ("[decode]\nlm_scale_min = 16\n", "lm_scale_min"),
    ("[sat]\nfmllr_iters = 1 x\n", "fmllr_iters"),
    ("not an ini", "section"),
])
def test_config_validation(text, msg):
    with pytest.raises(ConfigError, match=msg):
        RecipeConfig.from_text(text)


def test_config_round_trip(tiny_config):
    back = RecipeConfig.from_text(tiny_config.to_text())
    assert back.values == tiny_config.values
