"""Vector, attention-based and residual quantization.

Gradient routing follows one fixed convention:

* ``z_hard`` reaches downstream consumers through ``straight_through``, so
  the continuous feature receives the downstream gradient unchanged.
* ``z_hard`` itself is a row selection of the (value-projected) codebook, so
  the commitment term of the quantization loss updates the selected rows.
* The soft assignment ``A @ (C W_v)`` is the only path by which the query
  and key projections receive gradient.
* Residuals are chained as ``eps_{l+1} = eps_l - sg[z_l]``; each level's
  codes learn from that level's losses only.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .codebook import Codebook, init_codebook, nearest_codes
from .numkit import ContractViolation, Tensor

NORM_KINDS = ("rms", "layer", "none")


def normalize(x: Tensor, kind: str) -> Tensor:
    if kind == "rms":
        return nk.rowwise_rms_normalize(x)
    if kind == "layer":
        return nk.rowwise_layer_normalize(x)
    if kind == "none":
        return x
    raise ContractViolation(f"unknown norm kind {kind!r}")


@dataclass
class AttentionQuantizer:
    w_q: Tensor  # d_in x d_att
    w_k: Tensor  # d_code x d_att
    w_v: Tensor  # d_code x d_in
    norm_kind: str = "rms"

    def __post_init__(self):
        if self.norm_kind not in NORM_KINDS:
            raise ContractViolation(f"norm_kind must be one of {NORM_KINDS}")
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise ContractViolation("W_q and W_k must share the attention dimension")
        if self.w_v.shape[1] != self.w_q.shape[0]:
            raise ContractViolation("W_v must map codes back into the feature space (d_out == d_in)")
        if self.w_v.shape[0] != self.w_k.shape[0]:
            raise ContractViolation("W_k and W_v must share the code dimension")

    @classmethod
    def create(cls, d_in: int, d_code: int | None = None, d_att: int | None = None,
               norm_kind: str = "rms", seed: int = 0) -> "AttentionQuantizer":
        d_code = d_code or d_in
        d_att = d_att or d_in
        rng = np.random.default_rng(seed)
        std = 1.0 / math.sqrt(d_in)
        return cls(
            Tensor(rng.normal(0, std, (d_in, d_att)), requires_grad=True, name="w_q"),
            Tensor(rng.normal(0, std, (d_code, d_att)), requires_grad=True, name="w_k"),
            Tensor(rng.normal(0, std, (d_code, d_in)), requires_grad=True, name="w_v"),
            norm_kind,
        )

    @property
    def d_in(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_att(self) -> int:
        return self.w_q.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v]


@dataclass
class AssignmentRecord:
    hard_indices: np.ndarray
    z_hard: Tensor
    attention: Tensor | None = None
    z_soft: Tensor | None = None


@dataclass
class ResidualQuantizer:
    levels: int
    codebooks: list[Codebook]
    inner: AttentionQuantizer | None = None  # None selects plain nearest-neighbour VQ

    def __post_init__(self):
        if self.levels < 1:
            raise ContractViolation("residual quantizer needs levels >= 1")
        if len(self.codebooks) not in (1, self.levels):
            raise ContractViolation("need one shared codebook or one per level")

    @classmethod
    def create(cls, levels: int, n: int, d: int, kind: str = "attn", norm_kind: str = "rms",
               d_att: int | None = None, shared_codebook: bool = True,
               init: str = "gaussian", seed: int = 0, sample=None) -> "ResidualQuantizer":
        count = 1 if shared_codebook else levels
        books = [init_codebook(n, d, init, seed=seed + i, sample=sample) for i in range(count)]
        inner = None
        if kind == "attn":
            inner = AttentionQuantizer.create(d, d, d_att, norm_kind, seed=seed + 1000)
        elif kind != "vq":
            raise ContractViolation(f"unknown inner quantizer {kind!r}")
        return cls(levels, books, inner)

    @property
    def codebook(self) -> Codebook:
        return self.codebooks[0]

    @property
    def n(self) -> int:
        return self.codebook.n

    def codebook_for(self, level: int) -> Codebook:
        return self.codebooks[level if len(self.codebooks) > 1 else 0]

    def parameters(self) -> list[Tensor]:
        params = [cb.embeddings for cb in self.codebooks]
        if self.inner is not None:
            params += self.inner.parameters()
        return params

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"quantizer.codebook.{i}": cb.embeddings for i, cb in enumerate(self.codebooks)}
        if self.inner is not None:
            out["quantizer.w_q"] = self.inner.w_q
            out["quantizer.w_k"] = self.inner.w_k
            out["quantizer.w_v"] = self.inner.w_v
        return out

    def effective_codes(self, level: int = 0) -> np.ndarray:
        """Positions in feature space that level ``level`` can emit."""
        c = self.codebook_for(level).embeddings.data
        if self.inner is None:
            return c.copy()
        return c @ self.inner.w_v.data


def vq_assign(f: Tensor, codebook: Codebook) -> tuple[np.ndarray, Tensor]:
    if f.data.ndim != 2 or f.shape[1] != codebook.d:
        raise ContractViolation(f"features {f.shape} do not match codebook dim {codebook.d}")
    idx, _ = nearest_codes(f.data, codebook.embeddings.data)
    return idx, nk.gather_rows(codebook.embeddings, idx)


def straight_through(f: Tensor, z: Tensor) -> Tensor:
    """Forward value of ``z``; backward passes the gradient to ``f`` unchanged."""
    if f.shape != z.shape:
        raise ContractViolation(f"straight_through: shapes {f.shape} and {z.shape} differ")
    return nk.record("straight_through", z.data.copy(), (f,), lambda g: (g,))


def attention_scores(F: Tensor, codebook: Codebook, q: AttentionQuantizer) -> Tensor:
    """Q K^T on the normalized projections (before temperature scaling)."""
    Q = normalize(nk.matmul(F, q.w_q), q.norm_kind)
    K = normalize(nk.matmul(codebook.embeddings, q.w_k), q.norm_kind)
    return nk.matmul(Q, nk.transpose(K))


def attn_assign(F: Tensor, codebook: Codebook, q: AttentionQuantizer,
                temperature: float = 1.0) -> AssignmentRecord:
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    if F.data.ndim != 2 or F.shape[1] != q.d_in:
        raise ContractViolation(f"features {F.shape} do not match quantizer d_in {q.d_in}")
    if codebook.d != q.w_k.shape[0]:
        raise ContractViolation("codebook dim does not match W_k")
    scores = attention_scores(F, codebook, q)
    # argmax on the unscaled scores makes the choice independent of temperature
    hard = np.argmax(scores.data, axis=1)
    A = nk.softmax_rows(nk.scale(scores, 1.0 / (temperature * math.sqrt(q.d_att))))
    V = nk.matmul(codebook.embeddings, q.w_v)
    z_hard = nk.gather_rows(V, hard)
    z_soft = nk.matmul(A, V)
    return AssignmentRecord(hard, z_hard, A, z_soft)


def assign(f: Tensor, codebook: Codebook, inner: AttentionQuantizer | None,
           temperature: float = 1.0) -> AssignmentRecord:
    if inner is None:
        idx, z = vq_assign(f, codebook)
        return AssignmentRecord(idx, z)
    return attn_assign(f, codebook, inner, temperature)


@dataclass
class RQResult:
    codes: np.ndarray  # L x m
    z: list[Tensor]
    residual: Tensor  # eps_{L+1}
    records: list[AssignmentRecord]
    residuals: list[Tensor] = field(default_factory=list)  # eps_1 .. eps_L


def rq_encode(f: Tensor, rq: ResidualQuantizer, temperature: float = 1.0,
              levels: int | None = None) -> RQResult:
    levels = rq.levels if levels is None else levels
    if levels < 1:
        raise ContractViolation("levels must be >= 1")
    eps = f
    codes, zs, records, residuals = [], [], [], []
    for level in range(levels):
        rec = assign(eps, rq.codebook_for(level), rq.inner, temperature)
        residuals.append(eps)
        codes.append(rec.hard_indices)
        zs.append(rec.z_hard)
        records.append(rec)
        eps = nk.subtract(eps, nk.stop_gradient(rec.z_hard))
    return RQResult(np.stack(codes).astype(np.int64), zs, eps, records, residuals)


def rq_decode(z_levels: Sequence[Tensor] | np.ndarray) -> Tensor:
    levels = [z if isinstance(z, Tensor) else Tensor(z) for z in z_levels]
    if not levels:
        raise ContractViolation("rq_decode needs at least one level")
    out = levels[0]
    for z in levels[1:]:
        out = nk.add(out, z)
    return out


def decode_codes(codes: np.ndarray, rq: ResidualQuantizer) -> np.ndarray:
    """Feature vectors for an L x m index array (no tape)."""
    codes = np.asarray(codes, dtype=np.int64)
    total = 0.0
    for level in range(codes.shape[0]):
        total = total + rq.effective_codes(level)[codes[level]]
    return np.asarray(total, dtype=np.float32)


def quantization_error(f, f_hat) -> float:
    a = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    b = np.asarray(f_hat.data if isinstance(f_hat, Tensor) else f_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"quantization_error: shapes {a.shape} and {b.shape} differ")
    return float(np.mean((a - b) ** 2))


# --------------------------------------------------------------------------
# code grids
# --------------------------------------------------------------------------


@dataclass
class CodeGrid:
    indices: np.ndarray  # L x h x w
    n: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 3:
            raise ContractViolation("code grid must be L x h x w")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n):
            raise ContractViolation(f"code index out of range [0, {self.n})")

    @property
    def levels(self) -> int:
        return self.indices.shape[0]

    def to_bytes(self) -> bytes:
        L, h, w = self.indices.shape
        return struct.pack("<4Q", L, h, w, self.n) + self.indices.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["CodeGrid", int]:
        if len(buf) - offset < 32:
            raise ContractViolation("truncated code grid header")
        L, h, w, n = struct.unpack_from("<4Q", buf, offset)
        count = L * h * w
        start = offset + 32
        if len(buf) - start < 4 * count:
            raise ContractViolation("truncated code grid body")
        idx = np.frombuffer(buf, dtype="<u4", count=count, offset=start).reshape(L, h, w)
        return cls(idx.astype(np.int64), int(n)), start + 4 * count


def grids_from_codes(codes: np.ndarray, h: int, w: int, n: int) -> list[CodeGrid]:
    """Split an L x (B*h*w) index array into B grids."""
    L, m = codes.shape
    if m % (h * w):
        raise ContractViolation("position count is not a multiple of h*w")
    per = codes.reshape(L, m // (h * w), h, w).transpose(1, 0, 2, 3)
    return [CodeGrid(g, n) for g in per]


def write_grids(path: str | Path, grids: Sequence[CodeGrid]) -> None:
    Path(path).write_bytes(b"".join(g.to_bytes() for g in grids))


def read_grids(path: str | Path) -> list[CodeGrid]:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        g, pos = CodeGrid.from_bytes(buf, pos)
        out.append(g)
    return out
