import numpy as np
import pytest

from lipread.lexicon import Lexicon, UnitSet, load_dictionary

EXAMPLE_LEXICON = """\
TALK t ao k
TONGUE t ah ng
DOG d ao g
DUG d ah g
CARE k eh r
WELL w eh l
WHERE w eh r
WEAR w eh r
WHILE w ay l
"""

SYNTH_UNITS = tuple("p b t d k g f v s z m n".split())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def example_lexicon() -> Lexicon:
    return load_dictionary(EXAMPLE_LEXICON)


@pytest.fixture
def synth_units() -> UnitSet:
    return UnitSet(SYNTH_UNITS + ("sil",), "phoneme", frozenset({"sil"}))


# pipeline sizes small enough to run every stage in a couple of seconds
TINY = {
    "corpus": {"n_speakers": 2, "utts_per_speaker": 8, "n_words": 8, "words_per_utt": 3, "image_size": 16},
    "features": {"dct_coeffs": 20},
    "ci": {"n_iters": 4},
    "cd": {"n_iters": 4, "max_gauss": 60, "max_leaves": 30, "realign_every": 2},
    "lda_mllt": {"n_iters": 3, "max_gauss": 60, "max_leaves": 30, "realign_every": 2, "dim": 12,
                 "context": 2, "mllt_iters": 2, "refine_iters": 1},
    "sat": {"n_iters": 3, "realign_every": 2, "fmllr_iters": "1 2"},
    "dnn": {"hidden_layers": 1, "hidden_dim": 32, "rbm_epochs": 1, "max_epochs": 2, "context": 2},
}


@pytest.fixture
def tiny_config():
    from lipread.recipe import RecipeConfig

    return RecipeConfig.desk(**TINY)


# criterion number -> one-line verdict, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
