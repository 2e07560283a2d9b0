import numpy as np
import pytest

from affect_model import AffectModelConfig, build_corpus, generate_synthetic_corpus
from env_pirates import parse_level

# 右に走るだけでコイン→パワーアップ→ゴールに届く一本道
CORRIDOR_LEVEL = """
............
S.o.P.....X.
############
"""

# コインとチェックポイントの先に穴がある
PIT_LEVEL = """
.........X
SoC.......
####..####
"""


@pytest.fixture(scope="session")
def solid_corpus():
    sessions = generate_synthetic_corpus("solid", seed=7, n_sessions=20)
    return build_corpus(sessions, AffectModelConfig(), game="solid")


@pytest.fixture(scope="session")
def pirates_corpus():
    sessions = generate_synthetic_corpus("pirates", seed=7, n_sessions=20)
    return build_corpus(sessions, AffectModelConfig(), game="pirates")


@pytest.fixture
def corridor_level():
    return parse_level(CORRIDOR_LEVEL)


@pytest.fixture
def pit_level():
    return parse_level(PIT_LEVEL)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
