import numpy as np
import pytest

from multishot.config import RunConfig, SceneSamplerConfig, WorldConfig
from multishot.embed import Embedder
from multishot.promptlang import (
    COLORS,
    FRAMINGS,
    MOVES,
    PATTERNS,
    SHAPES,
    SIZES,
    SPEEDS,
    ActionSpec,
    AttributeSet,
    BackgroundSpec,
    CharacterSpec,
)


def random_attrs(rng: np.random.Generator, full: bool = True,
                 max_chars: int = 3) -> AttributeSet:
    """Random valid AttributeSet; full=False leaves some fields unspecified."""
    def maybe(value):
        return value if full or rng.random() < 0.7 else None

    n = int(rng.integers(0, max_chars + 1))
    ids = ["a", "b", "c"][:n]
    chars = tuple(
        CharacterSpec(id=i, shape=maybe(str(rng.choice(SHAPES))),
                      color=maybe(str(rng.choice(COLORS))),
                      size=maybe(str(rng.choice(SIZES))))
        for i in ids)
    bg = BackgroundSpec(pattern=maybe(str(rng.choice(PATTERNS))),
                        color=maybe(str(rng.choice(COLORS))))
    action = None
    if n and rng.random() < 0.6:
        action = ActionSpec(subject=str(rng.choice(ids)),
                            move=str(rng.choice(MOVES)),
                            speed=str(rng.choice(SPEEDS)))
    return AttributeSet(characters=chars, background=bg, action=action,
                        framing=str(rng.choice(FRAMINGS)))


@pytest.fixture(scope="session")
def embedder():
    return Embedder()


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def sampler_cfg():
    return SceneSamplerConfig()


@pytest.fixture(scope="session")
def run_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory, world, sampler_cfg):
    """25-scene rendered corpus shared by curation/metrics tests."""
    from multishot.toyworld import build_corpus

    out = tmp_path_factory.mktemp("corpus")
    manifest = build_corpus(str(out), 25, seed=123, world=world, sampler=sampler_cfg)
    return str(out), manifest
