"""Embedding anonymization pipelines.

Four methods:

  identity            pass-through (the "original" condition)
  baseline_farthest   replace the embedding by the mean of the top_k pool
                      vectors farthest from it in cosine distance
  aan1                reconstruct the embedding through a trained AAN
  aan2                baseline_farthest first, then aan1 on the result

All methods map utterances independently and preserve ids and labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aan import AanModel, aan_forward
from .dataset import Corpus
from .neural import DivergenceError

METHOD_KINDS = ("identity", "baseline_farthest", "aan1", "aan2")


@dataclass
class PseudoPool:
    """Candidate vectors for pseudo-embedding construction."""

    vectors: np.ndarray  # (n, dim)
    source: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"pool must be a nonempty (n, dim) array, got shape "
                             f"{self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("pool contains non-finite vectors")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def pool_from_corpus(corpus: Corpus, source: str | None = None) -> PseudoPool:
    return PseudoPool(corpus.matrix(),
                      source if source is not None else f"corpus:{corpus.split_tag}")


def baseline_anonymize(pool: PseudoPool, x: np.ndarray, top_k: int) -> np.ndarray:
    """Mean of the ``top_k`` pool vectors farthest from ``x`` (cosine).

    Ranking is by ascending cosine similarity, ties broken by pool index;
    scaling x by any c > 0 leaves the selection and the output unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != pool.dim:
        raise ValueError(f"x has shape {x.shape}, pool dim is {pool.dim}")
    if not 1 <= top_k <= len(pool):
        raise ValueError(f"top_k must be in [1, {len(pool)}], got {top_k}")
    x_norm = np.linalg.norm(x)
    pool_norms = np.linalg.norm(pool.vectors, axis=1)
    if x_norm == 0.0 or np.any(pool_norms == 0.0):
        raise ValueError("degenerate vector: zero norm, cosine distance undefined")
    sims = (pool.vectors @ x) / (pool_norms * x_norm)
    # averaging in pool index order keeps the output independent of the
    # rank order within the selected set
    farthest = np.sort(np.argsort(sims, kind="stable")[:top_k])
    return pool.vectors[farthest].mean(axis=0)


def anonymize_aan1(model: AanModel, x: np.ndarray) -> np.ndarray:
    """The model's reconstruction of ``x`` (batch of one)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {x.shape}")
    out = aan_forward(model, x[None, :]).reconstruction[0]
    if not np.all(np.isfinite(out)):
        raise DivergenceError("divergence detected: non-finite reconstruction")
    return out


def anonymize_aan2(model: AanModel, pool: PseudoPool, x: np.ndarray,
                   top_k: int) -> np.ndarray:
    """Reconstruct the baseline pseudo-embedding: aan1 after baseline_farthest."""
    return anonymize_aan1(model, baseline_anonymize(pool, x, top_k))


@dataclass
class AnonymizationMethod:
    """A method kind plus whatever parameters that kind needs."""

    kind: str
    model: AanModel | None = None
    pool: PseudoPool | None = None
    top_k: int = 10

    def validate(self) -> None:
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"kind must be one of {METHOD_KINDS}, got {self.kind!r}")
        if self.kind in ("aan1", "aan2") and self.model is None:
            raise ValueError(f"method {self.kind!r} requires a model")
        if self.kind in ("baseline_farthest", "aan2") and self.pool is None:
            raise ValueError(f"method {self.kind!r} requires a pool")

    def apply(self, x: np.ndarray) -> np.ndarray:
        self.validate()
        if self.kind == "identity":
            return np.asarray(x, dtype=np.float64)
        if self.kind == "baseline_farthest":
            return baseline_anonymize(self.pool, x, self.top_k)
        if self.kind == "aan1":
            return anonymize_aan1(self.model, x)
        return anonymize_aan2(self.model, self.pool, x, self.top_k)


def anonymize_corpus(corpus: Corpus, method: AnonymizationMethod) -> Corpus:
    """Map every embedding through the method; ids, labels, order preserved.

    The identity method returns the corpus unchanged.
    """
    method.validate()
    if method.kind == "identity":
        return corpus
    vectors = np.stack([method.apply(e.vector) for e in corpus.embeddings])
    return corpus.with_vectors(vectors)
