"""Tokenizer training, evaluation and checkpoints driven by a RunConfig."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numkit as nk
from .codebook import UsageHistogram, record_usage, utilization
from .config import RunConfig
from .data import gaussian_mixture_2d, patchify, subspace_points, synth_images, unpatchify
from .losses import LossParts, entropy_loss, quant_loss, total_loss
from .metrics import DynamicsTrace, MetricsRecord, mean_ssim, psnr
from .numkit import ContractViolation, Tensor
from .optim import make_optimizer
from .quantize import ResidualQuantizer, quantization_error, rq_decode, rq_encode
from .vae import ToyAutoencoder, attach_lora, discrete_forward, loss_parts, pretrain_continuous

EVAL_SEED_OFFSET = 10_007
EVAL_CHUNK = 4096


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    kind: str
    train: np.ndarray  # rows fed to the encoder (patches) or quantizer (latents)
    eval: np.ndarray
    train_images: np.ndarray | None = None
    eval_images: np.ndarray | None = None

    @property
    def units(self) -> int:
        """Sampling units: images for image data, rows otherwise."""
        return len(self.train_images) if self.train_images is not None else len(self.train)


def _latent_split(cfg: RunConfig, seed: int, count: int) -> np.ndarray:
    if cfg.dataset == "mixture_2d":
        return gaussian_mixture_2d(count, cfg.mixture_components, cfg.mixture_radius, cfg.mixture_std, seed)
    return subspace_points(count, cfg.subspace_p, cfg.subspace_dim, cfg.subspace_noise, seed)


def build_data(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "images":
        tr = synth_images(cfg.train_count, cfg.image_size, cfg.seed, cfg.patch)
        ev = synth_images(cfg.eval_count, cfg.image_size, cfg.seed + EVAL_SEED_OFFSET, cfg.patch)
        return Dataset("images", patchify(tr, cfg.patch), patchify(ev, cfg.patch), tr, ev)
    return Dataset(cfg.dataset, _latent_split(cfg, cfg.seed, cfg.train_count),
                   _latent_split(cfg, cfg.seed + EVAL_SEED_OFFSET, cfg.eval_count))


def uses_autoencoder(cfg: RunConfig) -> bool:
    return cfg.dataset != "mixture_2d"


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

_PRETRAIN_CACHE: dict[tuple, tuple[ToyAutoencoder, float]] = {}


def _pretrain_key(cfg: RunConfig) -> tuple:
    return (cfg.dataset, cfg.seed, cfg.train_count, cfg.image_size, cfg.patch, cfg.subspace_p,
            cfg.subspace_dim, cfg.subspace_noise, cfg.latent_dim, tuple(cfg.hidden),
            cfg.pretrain_steps, cfg.pretrain_lr, cfg.momentum, cfg.batch_size)


def pretrain(cfg: RunConfig, data: Dataset | None = None) -> tuple[ToyAutoencoder, float]:
    """Continuous autoencoder for ``cfg``; memoized per process since it is a
    pure function of the relevant config fields."""
    if not uses_autoencoder(cfg):
        raise ContractViolation("latent-only datasets have no autoencoder to pretrain")
    key = _pretrain_key(cfg)
    if key not in _PRETRAIN_CACHE:
        data = data or build_data(cfg)
        rows_per_unit = len(data.train) // data.units
        _PRETRAIN_CACHE[key] = pretrain_continuous(
            data.train, cfg.latent_dim, cfg.hidden, cfg.pretrain_steps, cfg.pretrain_lr,
            cfg.momentum, cfg.batch_size * rows_per_unit, cfg.seed, "sgd")
    model, mse = _PRETRAIN_CACHE[key]
    return copy.deepcopy(model), mse


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------


@dataclass
class Tokenizer:
    cfg: RunConfig
    rq: ResidualQuantizer
    model: ToyAutoencoder | None = None

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.rq.named_tensors())
        if self.model is not None:
            out.update(self.model.named_tensors())
        return out

    def parameters(self) -> list[Tensor]:
        params = list(self.rq.parameters())
        if self.model is not None:
            params += self.model.parameters()
        return params

    def encode(self, rows: np.ndarray) -> Tensor:
        x = Tensor(rows)
        return self.model.encode(x) if self.model is not None else x


def build_quantizer(cfg: RunConfig, sample: np.ndarray | None = None) -> ResidualQuantizer:
    kind = "attn" if cfg.quantizer == "rq_attn" else "vq"
    return ResidualQuantizer.create(
        cfg.levels, cfg.codebook_size, cfg.latent_dim, kind=kind, norm_kind=cfg.norm_kind,
        d_att=cfg.attention_dim, shared_codebook=cfg.shared_codebook, init=cfg.codebook_init,
        seed=cfg.seed + 1, sample=sample)


def build_tokenizer(cfg: RunConfig, data: Dataset, pretrained: ToyAutoencoder | None = None) -> Tokenizer:
    model = None
    if uses_autoencoder(cfg):
        if pretrained is None:
            raise ContractViolation("this dataset needs a pretrained autoencoder")
        model = attach_lora(pretrained, cfg.lora_rank, cfg.adapt_where, seed=cfg.seed + 2)
    sample = None
    if cfg.codebook_init == "kmeans_on_sample":
        feats = data.train
        if model is not None:
            with nk.no_grad():
                feats = model.encode(Tensor(feats)).data
        pick = np.random.default_rng(cfg.seed + 3).permutation(len(feats))[:cfg.codebook_size * 4]
        sample = feats[pick]
    return Tokenizer(cfg, build_quantizer(cfg, sample), model)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate(tok: Tokenizer, data: Dataset, step: int, levels: int | None = None) -> MetricsRecord:
    cfg = tok.cfg
    L = levels or tok.rq.levels
    # per-level codebooks are distinct vocabularies, so their usage is counted separately
    books = len(tok.rq.codebooks)
    hist = UsageHistogram.empty(tok.rq.n * min(books, L))
    sq_err = 0.0
    norms = np.zeros(L)
    recons = []
    with nk.no_grad():
        for start in range(0, len(data.eval), EVAL_CHUNK):
            rows = data.eval[start:start + EVAL_CHUNK]
            f = tok.encode(rows)
            res = rq_encode(f, tok.rq, cfg.temperature, L)
            f_hat = rq_decode(res.z)
            sq_err += quantization_error(f, f_hat) * f.size
            codes = res.codes if books == 1 else res.codes + tok.rq.n * np.arange(L)[:, None]
            hist = record_usage(hist, codes)
            eps = [r.data for r in res.residuals[1:]] + [res.residual.data]
            norms += [np.linalg.norm(e.astype(np.float64), axis=1).sum() for e in eps]
            if tok.model is not None:
                recons.append(tok.model.decode(f_hat).data)
    count = len(data.eval)
    p = s = None
    if tok.model is not None and data.eval_images is not None:
        images = np.clip(unpatchify(np.concatenate(recons), cfg.patch, cfg.image_size), 0.0, 1.0)
        p = psnr(data.eval_images, images)
        s = mean_ssim(data.eval_images, images)
    return MetricsRecord(step, sq_err / (count * cfg.latent_dim), p, s, utilization(hist),
                         [float(v) for v in norms / count])


def recon_mse(tok: Tokenizer, data: Dataset) -> float:
    """Pixel MSE of the discrete reconstruction on the eval split."""
    if tok.model is None:
        raise ContractViolation("reconstruction needs an autoencoder")
    with nk.no_grad():
        out = discrete_forward(tok.model, tok.rq, Tensor(data.eval), tok.cfg.temperature)
    return float(np.mean((out.x_hat.data.astype(np.float64) - data.eval) ** 2))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    tokenizer: Tokenizer
    records: list[MetricsRecord] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)


def _batch_rows(data: Dataset, idx: np.ndarray, cfg: RunConfig) -> np.ndarray:
    if data.train_images is None:
        return data.train[idx]
    per = cfg.grid_side ** 2
    return data.train[(idx[:, None] * per + np.arange(per)).reshape(-1)]


def _latent_parts(tok: Tokenizer, rows: np.ndarray) -> LossParts:
    cfg = tok.cfg
    res = rq_encode(Tensor(rows), tok.rq, cfg.temperature)
    quant, ent = [], []
    for eps, rec in zip(res.residuals, res.records):
        quant.append(quant_loss(eps, rec.z_hard, rec.z_soft, cfg.beta))
        if rec.attention is not None:
            ent.append(entropy_loss(rec.attention))
    return LossParts(Tensor(0.0), quant, ent)


def train_tokenizer(cfg: RunConfig, data: Dataset | None = None,
                    pretrained: ToyAutoencoder | None = None,
                    on_step: Callable[[int, Tokenizer], None] | None = None,
                    tokenizer: Tokenizer | None = None) -> TrainResult:
    """Minibatch descent on the reconstruction, quantization and entropy terms.

    Evaluates at step 0, every ``eval_every`` steps and after the last step.
    ``on_step`` is called after every update (and once before the first).
    """
    data = data or build_data(cfg)
    tok = tokenizer or build_tokenizer(cfg, data, pretrained)
    weights = cfg.loss_weights()
    opt = make_optimizer(cfg.optimizer, tok.parameters(), cfg.lr)
    if cfg.optimizer == "sgd":
        opt.momentum = cfg.momentum
    rng = np.random.default_rng(cfg.seed + 4)
    result = TrainResult(tok, [evaluate(tok, data, 0)])
    if on_step:
        on_step(0, tok)
    units = data.units
    bs = min(cfg.batch_size, units)
    order, pos = rng.permutation(units), 0
    for step in range(1, cfg.steps + 1):
        if pos + bs > units:
            order, pos = rng.permutation(units), 0
        idx = order[pos:pos + bs]
        pos += bs
        rows = _batch_rows(data, idx, cfg)
        if tok.model is not None:
            x = Tensor(rows)
            parts = loss_parts(discrete_forward(tok.model, tok.rq, x, cfg.temperature), x, cfg.beta)
        else:
            parts = _latent_parts(tok, rows)
        opt.zero_grad()
        report = total_loss(parts, weights)
        report.tensor.backward()
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            result.records.append(evaluate(tok, data, step))
            result.losses.append({"step": step, **report.to_dict()})
        if on_step:
            on_step(step, tok)
    return result


def train_quantizer(cfg: RunConfig, **kwargs) -> TrainResult:
    """Latent-only training (no autoencoder), e.g. on the 2-D mixture."""
    if uses_autoencoder(cfg):
        raise ContractViolation("train_quantizer is for latent-only datasets")
    return train_tokenizer(cfg, **kwargs)


def trace_dynamics(cfg: RunConfig, every: int | None) -> tuple[DynamicsTrace, TrainResult]:
    """Snapshots of the emitted code positions every ``every`` steps (None: first and last only)."""
    if cfg.latent_dim != 2:
        raise ContractViolation("dynamics tracing needs 2-D latents")
    trace = DynamicsTrace()

    def snap(step: int, tok: Tokenizer) -> None:
        if step == 0 or step == cfg.steps or (every and step % every == 0):
            if not trace.steps or step > trace.steps[-1]:
                trace.add(step, tok.rq.effective_codes(0))

    result = train_tokenizer(cfg, pretrained=pretrain(cfg)[0] if uses_autoencoder(cfg) else None,
                             on_step=snap)
    return trace, result


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _input_dim(cfg: RunConfig) -> int:
    return cfg.patch_dim if cfg.dataset == "images" else cfg.subspace_p


def save_checkpoint(tok: Tokenizer, path: str | Path) -> None:
    nk.save_tensors(path, tok.named_tensors())


def load_checkpoint(cfg: RunConfig, path: str | Path) -> Tokenizer:
    state = nk.load_tensors(path)
    model = None
    if any(k.startswith("encoder.") for k in state):
        model = attach_lora(ToyAutoencoder.create(_input_dim(cfg), cfg.latent_dim, cfg.hidden),
                            cfg.lora_rank, cfg.adapt_where)
        model.load_state(state)
    rq = build_quantizer(cfg)
    for name, t in rq.named_tensors().items():
        if name not in state or state[name].shape != t.shape:
            raise ContractViolation(f"checkpoint entry {name} missing or misshapen")
        t.data = np.array(state[name], dtype=t.data.dtype)
    return Tokenizer(cfg, rq, model)


def save_autoencoder(model: ToyAutoencoder, path: str | Path) -> None:
    nk.save_tensors(path, model.base_tensors())


def load_autoencoder(cfg: RunConfig, path: str | Path) -> ToyAutoencoder:
    model = ToyAutoencoder.create(_input_dim(cfg), cfg.latent_dim, cfg.hidden)
    model.load_state(nk.load_tensors(path))
    return model
