import numpy as np
import pytest

from cotpilot.backends import synthetic_top_k
from cotpilot.config import FsmConfig, SamplingConfig
from cotpilot.embeddings import HashedProjectionProvider
from cotpilot.segmenter import TokenMeta


def mk_token(text: str, logprob: float = -0.5, k: int = 10, rank: int = 1) -> TokenMeta:
    """A TokenMeta with a plausible synthetic candidate list."""
    return TokenMeta(text=text, logprob=min(logprob, -1e-9), rank=rank,
                     top_k=synthetic_top_k(text, logprob, k))


def mk_token_topk(text: str, pairs, rank: int = 1) -> TokenMeta:
    """A TokenMeta with an explicit (token, logprob) candidate list."""
    return TokenMeta(text=text, logprob=pairs[rank - 1][1], rank=rank,
                     top_k=tuple(pairs))


@pytest.fixture
def fsm_cfg() -> FsmConfig:
    return FsmConfig()


@pytest.fixture
def sampling_cfg() -> SamplingConfig:
    return SamplingConfig()


@pytest.fixture
def provider() -> HashedProjectionProvider:
    return HashedProjectionProvider(seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
