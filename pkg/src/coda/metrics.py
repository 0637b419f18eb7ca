"""Reconstruction metrics, assignment-confidence heatmaps and training traces."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .codebook import Codebook
from .numkit import ContractViolation, Tensor
from .quantize import AttentionQuantizer, attention_scores

PSNR_CAP = 99.0


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(x, x_hat, peak: float = 1.0) -> float:
    a, b = _arr(x), _arr(x_hat)
    if a.shape != b.shape:
        raise ContractViolation(f"psnr: shapes {a.shape} and {b.shape} differ")
    if peak <= 0:
        raise ContractViolation("psnr: peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(x, x_hat, window: int = 7, peak: float = 1.0) -> float:
    """Mean SSIM over all fully contained ``window`` x ``window`` patches of two 2-D images."""
    a, b = _arr(x), _arr(x_hat)
    if a.shape != b.shape or a.ndim != 2:
        raise ContractViolation("ssim expects two 2-D images of the same shape")
    if window < 3 or window % 2 == 0:
        raise ContractViolation("ssim window must be odd and >= 3")
    if min(a.shape) < window:
        raise ContractViolation(f"image {a.shape} is smaller than the {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mean_ssim(images, recons, window: int = 7, peak: float = 1.0) -> float:
    return float(np.mean([ssim(a, b, window, peak) for a, b in zip(_arr(images), _arr(recons))]))


# --------------------------------------------------------------------------
# confidence heatmaps
# --------------------------------------------------------------------------


@dataclass
class ConfidenceHeatmap:
    values: np.ndarray  # m x k, rows sorted descending

    def to_csv(self, path: str | Path) -> None:
        lines = ["row,col,value"]
        for i, row in enumerate(self.values):
            lines += [f"{i},{j},{float(v)!r}" for j, v in enumerate(row)]
        Path(path).write_text("\n".join(lines) + "\n")


def _softmax64(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def assignment_confidences(F, codebook: Codebook, quantizer: AttentionQuantizer | None,
                           temperature: float = 1.0) -> np.ndarray:
    """Full m x n confidence matrix: attention weights, or softmax(-d^2) for plain VQ."""
    feats = _arr(F)
    if quantizer is None:
        c = codebook.embeddings.data.astype(np.float64)
        d2 = ((feats[:, None, :] - c[None, :, :]) ** 2).sum(-1)
        return _softmax64(-d2)
    scores = attention_scores(Tensor(feats), codebook, quantizer).data.astype(np.float64)
    return _softmax64(scores / (temperature * math.sqrt(quantizer.d_att)))


def confidence_heatmap(F, codebook: Codebook, quantizer: AttentionQuantizer | None, k: int,
                       temperature: float = 1.0) -> ConfidenceHeatmap:
    if not (1 <= k <= codebook.n):
        raise ContractViolation(f"k must be in [1, {codebook.n}], got {k}")
    conf = assignment_confidences(F, codebook, quantizer, temperature)
    top = -np.sort(-conf, axis=1)[:, :k]
    return ConfidenceHeatmap(top)


# --------------------------------------------------------------------------
# training traces and records
# --------------------------------------------------------------------------


@dataclass
class DynamicsTrace:
    steps: list[int] = field(default_factory=list)
    positions: list[np.ndarray] = field(default_factory=list)  # each n x 2

    def add(self, step: int, codes: np.ndarray) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ContractViolation("trace snapshots must have strictly increasing steps")
        codes = np.array(codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[1] != 2:
            raise ContractViolation("trace snapshots must be n x 2")
        self.steps.append(int(step))
        self.positions.append(codes)

    def to_csv(self, path: str | Path) -> None:
        lines = ["step,code,x,y"]
        for step, pts in zip(self.steps, self.positions):
            lines += [f"{step},{i},{float(x)!r},{float(y)!r}" for i, (x, y) in enumerate(pts)]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class MetricsRecord:
    step: int
    quant_err: float
    psnr: float | None
    ssim: float | None
    utilization: float
    residual_norms: list[float]

    def __post_init__(self):
        if self.psnr is not None and self.psnr < 0:
            raise ContractViolation("psnr must be >= 0")
        if self.ssim is not None and self.ssim > 1.0 + 1e-9:
            raise ContractViolation("ssim must be <= 1")
        if not (0.0 <= self.utilization <= 1.0):
            raise ContractViolation("utilization must be in [0, 1]")

    def to_dict(self) -> dict:
        return {"step": self.step, "quant_err": self.quant_err, "psnr": self.psnr,
                "ssim": self.ssim, "utilization": self.utilization,
                "residual_norms": list(self.residual_norms)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(d["step"], d["quant_err"], d["psnr"], d["ssim"], d["utilization"], list(d["residual_norms"]))


def to_jsonl(records: Iterable[MetricsRecord | dict]) -> str:
    rows = [r.to_dict() if isinstance(r, MetricsRecord) else r for r in records]
    return "".join(json.dumps(r) + "\n" for r in rows)


def write_jsonl(path: str | Path, records: Iterable[MetricsRecord | dict]) -> None:
    Path(path).write_text(to_jsonl(records))


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_table(path: str | Path, rows: Sequence[dict]) -> None:
    """CSV with a header row taken from the first row's keys."""
    if not rows:
        raise ContractViolation("cannot write an empty table")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
