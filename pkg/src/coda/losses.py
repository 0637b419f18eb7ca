"""Training objectives for the discrete tokenizer.

All squared-norm terms are element-wise means so that loss scales do not
depend on batch size or feature width.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .numkit import ContractViolation, Tensor

ROW_SUM_TOL = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lambda_q: float = 1.0
    lambda_e: float = 0.1
    beta: float = 0.25
    # perceptual and adversarial terms are not implemented; only 0 is accepted
    lambda_p: float = 0.0
    lambda_adv: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0 or not math.isfinite(value):
                raise ContractViolation(f"loss weight {name} must be finite and >= 0, got {value}")
        if self.lambda_p != 0 or self.lambda_adv != 0:
            raise ContractViolation("perceptual and adversarial losses are not supported; keep their weights at 0")


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    return nk.mean_squared_error(x_hat, x)


def quant_loss(f: Tensor, z_hard: Tensor, z_soft: Tensor | None, beta: float) -> Tensor:
    """Commitment + codebook + soft-assignment terms.

    ``z_soft=None`` drops the third term (plain nearest-neighbour quantizers
    have no soft path).
    """
    if f.shape != z_hard.shape or (z_soft is not None and z_soft.shape != f.shape):
        raise ContractViolation("quant_loss: f, z_hard and z_soft must share a shape")
    commit = nk.mean_squared_error(nk.stop_gradient(z_hard), f)
    codebook = nk.mean_squared_error(z_hard, nk.stop_gradient(f))
    loss = nk.add(commit, nk.scale(codebook, beta))
    if z_soft is not None:
        loss = nk.add(loss, nk.mean_squared_error(z_soft, f))
    return loss


def entropy_loss(attention: Tensor) -> Tensor:
    """Mean per-row entropy minus entropy of the batch-averaged distribution.

    Lower is better: sharp rows that together spread over the codebook.
    """
    A = attention.data
    if A.ndim != 2 or A.shape[0] == 0:
        raise ContractViolation("entropy_loss expects a non-empty m x n matrix")
    if np.any(A < 0):
        raise ContractViolation("entropy_loss: negative probabilities")
    if np.any(np.abs(A.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise ContractViolation("entropy_loss: rows must sum to 1")
    m = A.shape[0]
    row_entropy = nk.scale(nk.sum(nk.xlogx(attention)), -1.0 / m)
    marginal = nk.mean(attention, axis=0)
    batch_entropy = nk.scale(nk.sum(nk.xlogx(marginal)), -1.0)
    return nk.subtract(row_entropy, batch_entropy)


@dataclass
class LossParts:
    rec: Tensor
    quant: list[Tensor]
    entropy: list[Tensor] = field(default_factory=list)  # empty for quantizers without attention


@dataclass
class LossReport:
    total: float
    rec: float
    quant_per_level: list[float]
    entropy_per_level: list[float]
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"total": self.total, "rec": self.rec,
                "quant_per_level": list(self.quant_per_level),
                "entropy_per_level": list(self.entropy_per_level)}


def _sum_terms(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = nk.add(out, t)
    return out


def total_loss(parts: LossParts, weights: LossWeights) -> LossReport:
    levels = len(parts.quant)
    if parts.entropy and len(parts.entropy) != levels:
        raise ContractViolation(f"{len(parts.entropy)} entropy terms for {levels} quantization levels")
    total = parts.rec
    if levels:
        total = nk.add(total, nk.scale(_sum_terms(parts.quant), weights.lambda_q))
    if parts.entropy:
        total = nk.add(total, nk.scale(_sum_terms(parts.entropy), weights.lambda_e))
    return LossReport(
        total=total.item(),
        rec=parts.rec.item(),
        quant_per_level=[q.item() for q in parts.quant],
        entropy_per_level=[e.item() for e in parts.entropy],
        tensor=total,
    )
