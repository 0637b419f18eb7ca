"""Scripted comparisons: the component ladder, codebook-size, normalization,
adapter and level sweeps, confidence heatmaps and 2-D coverage runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .config import RunConfig
from .metrics import ConfidenceHeatmap, DynamicsTrace, confidence_heatmap, write_jsonl, write_table
from .numkit import ContractViolation
from .train import (Dataset, TrainResult, build_data, evaluate, pretrain, recon_mse, trace_dynamics,
                    train_tokenizer, uses_autoencoder)

# each arm adds one component to the previous one
LADDER = (
    ("vq", {"quantizer": "vq", "levels": 1, "adapt_where": "none"}),
    ("+residual", {"quantizer": "rq_vq", "adapt_where": "none"}),
    ("+attention", {"quantizer": "rq_attn", "adapt_where": "none"}),
    ("+adapt", {"quantizer": "rq_attn", "adapt_where": "both"}),
)
STUDIES = ("ladder", "size", "norm", "lora", "mixture")


@dataclass
class ArmResult:
    name: str
    cfg: RunConfig
    train: TrainResult
    row: dict = field(default_factory=dict)


def _row(name: str, cfg: RunConfig, result: TrainResult, data: Dataset) -> dict:
    rec = result.records[-1]
    row = {"arm": name, "quantizer": cfg.quantizer, "levels": cfg.levels, "codebook_size": cfg.codebook_size,
           "norm_kind": cfg.norm_kind, "adapt_where": cfg.adapt_where, "quant_err": rec.quant_err,
           "psnr": rec.psnr, "ssim": rec.ssim, "utilization": rec.utilization}
    if result.tokenizer.model is not None:
        row["recon_mse"] = recon_mse(result.tokenizer, data)
    return row


def run_arms(base: RunConfig, arms: Sequence[tuple[str, dict]]) -> list[ArmResult]:
    """Train each arm on the same data and pretrained autoencoder."""
    data = build_data(base)
    out = []
    for name, changes in arms:
        cfg = base.replace(**changes)
        pretrained = pretrain(cfg, data)[0] if uses_autoencoder(cfg) else None
        result = train_tokenizer(cfg, data, pretrained)
        out.append(ArmResult(name, cfg, result, _row(name, cfg, result, data)))
    return out


def ablation_ladder(base: RunConfig) -> list[ArmResult]:
    return run_arms(base, LADDER)


# Quantizer-only studies freeze the encoder: quant_err is measured in latent
# units, so arms are only comparable on the same latent distribution.


def codebook_size_sweep(base: RunConfig, sizes: Sequence[int] = (64, 256, 1024)) -> list[ArmResult]:
    return run_arms(base, [(f"n={n}", {"codebook_size": n, "adapt_where": "none"}) for n in sizes])


def norm_sweep(base: RunConfig, kinds: Sequence[str] = ("rms", "none")) -> list[ArmResult]:
    return run_arms(base, [(f"norm={k}", {"quantizer": "rq_attn", "norm_kind": k, "adapt_where": "none"})
                           for k in kinds])


def lora_sweep(base: RunConfig, wheres: Sequence[str] = ("none", "both")) -> list[ArmResult]:
    """Adapter placements; each row also reports whether the frozen base
    weights came out bit-identical to the pretrained ones."""
    arms = run_arms(base, [(f"adapt={w}", {"adapt_where": w}) for w in wheres])
    for arm in arms:
        ref = pretrain(arm.cfg)[0].base_tensors()
        now = arm.train.tokenizer.model.base_tensors()
        arm.row["base_bit_identical"] = all(np.array_equal(ref[k].data, now[k].data) for k in ref)
    return arms


def mixture_config(base: RunConfig) -> RunConfig:
    """The 2-D coverage benchmark: single-level quantizers on a Gaussian mixture."""
    return base.replace(dataset="mixture_2d", latent_dim=2, d_att=0, levels=1, codebook_size=64,
                        train_count=4096, eval_count=4096, adapt_where="none")


def mixture_coverage(base: RunConfig) -> list[ArmResult]:
    cfg = mixture_config(base)
    return run_arms(cfg, [("vq", {"quantizer": "vq"}), ("attention", {"quantizer": "rq_attn"})])


def levels_sweep(base: RunConfig, levels: Sequence[int]) -> list[dict]:
    """Train once with the deepest setting and evaluate every prefix of levels."""
    if not levels or min(levels) < 1:
        raise ContractViolation("levels sweep needs positive level counts")
    cfg = base.replace(levels=max(levels), quantizer="rq_vq" if base.quantizer == "vq" else base.quantizer)
    data = build_data(cfg)
    pretrained = pretrain(cfg, data)[0] if uses_autoencoder(cfg) else None
    tok = train_tokenizer(cfg, data, pretrained).tokenizer
    rows = []
    for L in levels:
        rec = evaluate(tok, data, cfg.steps, levels=L)
        rows.append({"levels": L, "quant_err": rec.quant_err, "psnr": rec.psnr, "ssim": rec.ssim,
                     "utilization": rec.utilization, "residual_norm": rec.residual_norms[-1]})
    return rows


def heatmap(cfg: RunConfig, tok, data: Dataset, k: int = 8, count: int = 16) -> ConfidenceHeatmap:
    """Top-k level-1 assignment confidences for ``count`` random eval features."""
    pick = np.random.default_rng(cfg.seed).choice(len(data.eval), size=min(count, len(data.eval)),
                                                  replace=False)
    with nk.no_grad():
        feats = tok.encode(data.eval[np.sort(pick)]).data
    return confidence_heatmap(feats, tok.rq.codebook_for(0), tok.rq.inner, k, cfg.temperature)


def dynamics(cfg: RunConfig, every: int | None) -> DynamicsTrace:
    return trace_dynamics(cfg, every)[0]


def run_study(study: str, base: RunConfig, out: str | Path) -> list[dict]:
    """Run one study, write ``<study>.csv`` plus one metrics JSONL per arm, return the rows."""
    runners = {"ladder": ablation_ladder, "size": codebook_size_sweep, "norm": norm_sweep,
               "lora": lora_sweep, "mixture": mixture_coverage}
    if study not in runners:
        raise ContractViolation(f"unknown study {study!r}; expected one of {STUDIES}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    arms = runners[study](base)
    for i, arm in enumerate(arms):
        write_jsonl(out / f"{study}_arm{i + 1}.jsonl", arm.train.records)
    rows = [arm.row for arm in arms]
    write_table(out / f"{study}.csv", rows)
    return rows
