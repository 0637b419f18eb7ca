"""Codebook storage, initialization and usage accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import ContractViolation, Tensor

INIT_SCHEMES = ("gaussian", "uniform", "kmeans_on_sample")
KMEANS_ITERS = 10


@dataclass
class Codebook:
    embeddings: Tensor

    def __post_init__(self):
        if self.embeddings.data.ndim != 2:
            raise ContractViolation("codebook embeddings must be n x d")
        n, d = self.embeddings.shape
        if n < 2 or d < 1:
            raise ContractViolation(f"codebook needs n >= 2 and d >= 1, got {n} x {d}")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]


def _exact_sqdist(x: np.ndarray, codes: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - codes[None, :, :]) ** 2).sum(-1)


def nearest_codes(x: np.ndarray, codes: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest row of ``codes`` for each
    row of ``x``; ties go to the lowest index.

    Candidates come from the BLAS expansion |x|^2 - 2 x.c + |c|^2; any code
    within rounding distance of the minimum is re-scored with exact
    differences, so near-ties resolve exactly as a direct scan would.
    """
    x = np.asarray(x, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    idx = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x), dtype=np.float64)
    c2 = (codes * codes).sum(1)
    for start in range(0, len(x), chunk):
        block = x[start:start + chunk]
        x2 = (block * block).sum(1)
        d2 = x2[:, None] - 2.0 * (block @ codes.T) + c2[None, :]
        best = d2.min(axis=1)
        tol = 1e-9 * (x2 + c2.max()) + 1e-12
        near = d2 <= (best + tol)[:, None]
        k = near.argmax(axis=1)
        ambiguous = np.flatnonzero(near.sum(axis=1) > 1)
        for r in ambiguous:
            cand = np.flatnonzero(near[r])
            dd = _exact_sqdist(block[r:r + 1], codes[cand])[0]
            k[r] = cand[dd.argmin()]
        idx[start:start + chunk] = k
        dist[start:start + chunk] = ((block - codes[k]) ** 2).sum(1)
    return idx, dist


def lloyd(sample: np.ndarray, centers: np.ndarray, iters: int) -> np.ndarray:
    """Plain Lloyd iterations; empty clusters keep their previous center."""
    centers = centers.astype(np.float64).copy()
    for _ in range(iters):
        assign, _ = nearest_codes(sample, centers)
        for k in range(centers.shape[0]):
            members = sample[assign == k]
            if len(members):
                centers[k] = members.mean(axis=0)
    return centers


def init_codebook(n: int, d: int, scheme: str = "gaussian", seed: int = 0,
                  sample: Tensor | np.ndarray | None = None,
                  requires_grad: bool = True) -> Codebook:
    if n < 2 or d < 1:
        raise ContractViolation(f"codebook needs n >= 2 and d >= 1, got {n} x {d}")
    rng = np.random.default_rng(seed)
    if scheme == "gaussian":
        emb = rng.normal(0.0, 1.0 / math.sqrt(d), size=(n, d))
    elif scheme == "uniform":
        bound = 1.0 / math.sqrt(d)
        emb = rng.uniform(-bound, bound, size=(n, d))
    elif scheme == "kmeans_on_sample":
        if sample is None:
            raise ContractViolation("kmeans_on_sample needs a sample")
        pts = np.asarray(sample.data if isinstance(sample, Tensor) else sample, dtype=np.float64)
        pts = pts.reshape(len(pts), -1)
        if pts.shape[1] != d:
            raise ContractViolation(f"sample has {pts.shape[1]} columns, codebook d={d}")
        if len(pts) < n:
            raise ContractViolation(f"kmeans_on_sample needs >= {n} rows, got {len(pts)}")
        # seed from distinct rows when possible so duplicate starts do not waste centers
        uniq = np.unique(pts, axis=0)
        pool = uniq if len(uniq) >= n else pts
        start = pool[rng.choice(len(pool), size=n, replace=False)]
        emb = lloyd(pts, start, KMEANS_ITERS)
    else:
        raise ContractViolation(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    return Codebook(Tensor(emb, requires_grad=requires_grad, name="codebook"))


@dataclass
class UsageHistogram:
    counts: np.ndarray
    total: int = 0

    @classmethod
    def empty(cls, n: int) -> "UsageHistogram":
        return cls(np.zeros(n, dtype=np.int64), 0)

    @property
    def n(self) -> int:
        return len(self.counts)

    def merge(self, other: "UsageHistogram") -> "UsageHistogram":
        if other.n != self.n:
            raise ContractViolation("histograms of different codebook sizes")
        return UsageHistogram(self.counts + other.counts, self.total + other.total)

    def to_csv(self, path: str | Path) -> None:
        lines = ["index,count"] + [f"{i},{c}" for i, c in enumerate(self.counts)]
        Path(path).write_text("\n".join(lines) + "\n")


def record_usage(hist: UsageHistogram, indices) -> UsageHistogram:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return UsageHistogram(hist.counts.copy(), hist.total)
    if idx.min() < 0 or idx.max() >= hist.n:
        raise ContractViolation(f"code index out of range [0, {hist.n})")
    counts = hist.counts + np.bincount(idx, minlength=hist.n)
    return UsageHistogram(counts, hist.total + int(idx.size))


def utilization(hist: UsageHistogram) -> float:
    if hist.total == 0:
        raise ContractViolation("utilization of an empty histogram")
    return float(np.count_nonzero(hist.counts)) / hist.n
