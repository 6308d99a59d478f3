"""
Per-token uncertainty metrics, step-level mean pooling and fusion with a
semantic embedding into the step feature vector consumed by the difficulty
estimator.

Eleven uncertainty metrics are computed per token, in this fixed order:

    logprob, selected_rank, entropy, logit_gap, margin,
    topk_mass_5, topk_mass_10, d_logp, d_entropy, d_margin, z_logp

Entropy is taken over the raw truncated top-K probabilities without
renormalization, so low total top-K mass keeps its signal. The z-score of
the log-probability is computed against a sliding window of the previous
token log-probabilities; the window is token-level and crosses step
boundaries within a session.

Token-level math is plain Python on purpose: at K around 20 candidates it
is faster than spinning up numpy arrays per token, which matters for the
per-step controller overhead budget.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .segmenter import TokenMeta

UNC_DIM = 11     # number of uncertainty metrics per token
SEM_DIM = 384    # embedding width expected from providers
Z_DIM = UNC_DIM + SEM_DIM
Z_WINDOW = 20    # sliding window length for the logprob z-score

FEATURE_NAMES = (
    "logprob",
    "selected_rank",
    "entropy",
    "logit_gap",
    "margin",
    "topk_mass_5",
    "topk_mass_10",
    "d_logp",
    "d_entropy",
    "d_margin",
    "z_logp",
)

__all__ = [
    "UncertaintyFeatures",
    "StepFeatureVector",
    "TokenFeatureTracker",
    "token_features",
    "pool_step",
    "fuse",
    "EmptyTopK",
    "EmptyStep",
    "ProviderDimensionMismatch",
    "UNC_DIM",
    "SEM_DIM",
    "Z_DIM",
    "Z_WINDOW",
    "FEATURE_NAMES",
]


class EmptyTopK(ValueError):
    pass


class EmptyStep(ValueError):
    pass


class ProviderDimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class UncertaintyFeatures:
    logprob: float
    selected_rank: float
    entropy: float
    logit_gap: float
    margin: float
    topk_mass_5: float
    topk_mass_10: float
    d_logp: float
    d_entropy: float
    d_margin: float
    z_logp: float

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.logprob, self.selected_rank, self.entropy, self.logit_gap,
            self.margin, self.topk_mass_5, self.topk_mass_10,
            self.d_logp, self.d_entropy, self.d_margin, self.z_logp,
        )

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)


def token_features(
    tok: TokenMeta,
    prev: UncertaintyFeatures | None,
    logp_window: "deque[float] | list[float]",
) -> UncertaintyFeatures:
    """Compute the per-token metrics.

    prev carries the previous token's features for the first-order
    differences, which are 0 at the first token of a session. logp_window
    holds the log-probabilities of up to Z_WINDOW previous tokens, not
    including the current one.
    """
    if not tok.top_k:
        raise EmptyTopK("token carries no top-k candidates")

    logps = [lp for _, lp in tok.top_k]
    probs = [math.exp(lp) for lp in logps]

    entropy = -sum(p * lp for p, lp in zip(probs, logps) if p > 0.0)
    if len(logps) >= 2:
        logit_gap = logps[0] - logps[1]   # softmax shift cancels, logit gap == logprob gap
        margin = probs[0] - probs[1]
    else:
        logit_gap = 0.0                   # no second candidate, no gap information
        margin = 0.0
    mass_5 = sum(probs[:5])
    mass_10 = sum(probs[:10])

    if prev is None:
        d_logp = d_entropy = d_margin = 0.0
    else:
        d_logp = tok.logprob - prev.logprob
        d_entropy = entropy - prev.entropy
        d_margin = margin - prev.margin

    n = len(logp_window)
    if n < 2:
        z_logp = 0.0
    else:
        mean = sum(logp_window) / n
        var = sum((lp - mean) ** 2 for lp in logp_window) / n
        std = math.sqrt(var)
        z_logp = 0.0 if std < 1e-9 else (tok.logprob - mean) / std

    return UncertaintyFeatures(
        logprob=tok.logprob,
        selected_rank=float(tok.rank),
        entropy=entropy,
        logit_gap=logit_gap,
        margin=margin,
        topk_mass_5=mass_5,
        topk_mass_10=mass_10,
        d_logp=d_logp,
        d_entropy=d_entropy,
        d_margin=d_margin,
        z_logp=z_logp,
    )


class TokenFeatureTracker:
    """Session-scoped feature state: previous-token metrics plus the
    logprob window for the z-score. Feed tokens in generation order."""

    def __init__(self, window: int = Z_WINDOW):
        self._prev: UncertaintyFeatures | None = None
        self._logps: deque[float] = deque(maxlen=window)

    def push(self, tok: TokenMeta) -> UncertaintyFeatures:
        feats = token_features(tok, self._prev, self._logps)
        self._prev = feats
        self._logps.append(tok.logprob)
        return feats


def pool_step(features: list[UncertaintyFeatures]) -> np.ndarray:
    """Element-wise mean of the per-token metrics across one step."""
    if not features:
        raise EmptyStep("cannot pool an empty step")
    mat = np.array([f.as_tuple() for f in features], dtype=np.float64)
    return mat.mean(axis=0)


@dataclass
class StepFeatureVector:
    """Pooled uncertainty metrics fused with the step text embedding."""

    h_unc: np.ndarray   # (UNC_DIM,)
    h_sem: np.ndarray   # (SEM_DIM,)
    z: np.ndarray       # (Z_DIM,) concatenation [h_unc; h_sem] in that order

    def to_dict(self) -> dict:
        return {"h_unc": self.h_unc.tolist(), "h_sem": self.h_sem.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StepFeatureVector":
        return from_parts(np.asarray(d["h_unc"], dtype=np.float64),
                          np.asarray(d["h_sem"], dtype=np.float64))


def from_parts(h_unc: np.ndarray, h_sem: np.ndarray) -> StepFeatureVector:
    h_unc = np.asarray(h_unc, dtype=np.float64)
    h_sem = np.asarray(h_sem, dtype=np.float64)
    if h_unc.shape != (UNC_DIM,):
        raise ValueError(f"h_unc must have shape ({UNC_DIM},), got {h_unc.shape}")
    if h_sem.shape != (SEM_DIM,):
        raise ProviderDimensionMismatch(
            f"embedding must have {SEM_DIM} dims, got {h_sem.shape}")
    if not np.all(np.isfinite(h_sem)):
        raise ProviderDimensionMismatch("embedding contains non-finite values")
    return StepFeatureVector(h_unc=h_unc, h_sem=h_sem,
                             z=np.concatenate([h_unc, h_sem]))


def fuse(h_unc: np.ndarray, provider, step_text: str) -> StepFeatureVector:
    """Embed step_text through the provider and concatenate with h_unc."""
    return from_parts(h_unc, provider.embed(step_text))
