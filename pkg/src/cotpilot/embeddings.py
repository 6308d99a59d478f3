"""
Embedding providers for step text.

Any object with an embed(text) method returning a 384-dim float vector,
deterministic for identical input, satisfies the provider contract. Two
implementations ship here: a seeded hashing provider that needs no model
or network and stands in for a frozen sentence encoder at desk scale, and
a client for an HTTP embedding service.
"""

from __future__ import annotations

import hashlib
import os
from typing import Protocol, runtime_checkable

import numpy as np

from .features import SEM_DIM

EMBED_TOKEN_ENV = "COTPILOT_EMBED_TOKEN"

__all__ = [
    "EmbeddingProvider",
    "HashedProjectionProvider",
    "HttpEmbeddingProvider",
    "EMBED_TOKEN_ENV",
]


@runtime_checkable
class EmbeddingProvider(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


class HashedProjectionProvider:
    """Deterministic pseudo-random projection of the text bytes onto
    SEM_DIM dims, unit-normalized. Distinct texts get (almost surely)
    distinct directions; identical text always maps to the same vector.

    Safe for concurrent calls: embed() holds no mutable state.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.blake2b(
            text.encode("utf-8"),
            key=str(self.seed).encode("ascii")[:64],
            digest_size=16,
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "big"))
        vec = rng.standard_normal(SEM_DIM)
        norm = np.linalg.norm(vec)
        if norm == 0.0:  # unreachable in practice, keeps the contract total
            vec[0] = 1.0
            norm = 1.0
        return vec / norm


class HttpEmbeddingProvider:
    """Client for a service accepting POST {"text": ...} and answering
    {"embedding": [384 floats]}. A bearer token is read from the
    COTPILOT_EMBED_TOKEN environment variable when present.
    """

    def __init__(self, url: str, timeout_s: float = 30.0):
        self.url = url
        self.timeout_s = timeout_s

    def embed(self, text: str) -> np.ndarray:
        import requests

        headers = {}
        token = os.environ.get(EMBED_TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        resp = requests.post(self.url, json={"text": text},
                             headers=headers, timeout=self.timeout_s)
        resp.raise_for_status()
        body = resp.json()
        vec = np.asarray(body["embedding"], dtype=np.float64)
        if vec.shape != (SEM_DIM,):
            raise ValueError(
                f"embedding service returned {vec.shape}, expected ({SEM_DIM},)")
        return vec
