"""A small continuous autoencoder with optional low-rank adapters.

Images are handled as rows of flattened patches, so every latent position is
encoded and decoded independently.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .losses import LossParts, entropy_loss, quant_loss, recon_loss
from .numkit import ContractViolation, Tensor
from .optim import make_optimizer
from .quantize import ResidualQuantizer, RQResult, rq_decode, rq_encode, straight_through

ADAPT_WHERE = ("encoder", "decoder", "both", "none")


@dataclass
class LoraAdapter:
    down: Tensor  # r x d_in
    up: Tensor  # d_out x r
    alpha: float

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class Linear:
    weight: Tensor  # d_out x d_in
    bias: Tensor  # d_out
    lora: LoraAdapter | None = None

    @classmethod
    def create(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "Linear":
        w = nk.gaussian_init((d_out, d_in), rng, fan_in=d_in)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(d_out), requires_grad=True))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        y = nk.add(nk.matmul(x, nk.transpose(self.weight)), self.bias)
        if self.lora is not None:
            low = nk.matmul(nk.matmul(x, nk.transpose(self.lora.down)), nk.transpose(self.lora.up))
            y = nk.add(y, nk.scale(low, self.lora.scale))
        return y

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}
        if self.lora is not None:
            out[f"{prefix}.lora.down"] = self.lora.down
            out[f"{prefix}.lora.up"] = self.lora.up
        return out


def _stack(dims: Sequence[int], rng: np.random.Generator) -> list[Linear]:
    return [Linear.create(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]


def _run(layers: list[Linear], x: Tensor) -> Tensor:
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = nk.silu(x)
    return x


@dataclass
class ToyAutoencoder:
    encoder: list[Linear]
    decoder: list[Linear]
    frozen: bool = False

    def __post_init__(self):
        if self.encoder[-1].d_out != self.decoder[0].d_in:
            raise ContractViolation("encoder output and decoder input dims differ")

    @classmethod
    def create(cls, p: int, d: int, hidden: Sequence[int] = (64, 32), seed: int = 0) -> "ToyAutoencoder":
        rng = np.random.default_rng(seed)
        dims = [p, *hidden, d]
        return cls(_stack(dims, rng), _stack(dims[::-1], rng))

    @property
    def input_dim(self) -> int:
        return self.encoder[0].d_in

    @property
    def latent_dim(self) -> int:
        return self.encoder[-1].d_out

    def encode(self, x: Tensor) -> Tensor:
        return _run(self.encoder, x)

    def decode(self, f: Tensor) -> Tensor:
        return _run(self.decoder, f)

    def __call__(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                out.update(layer.named_tensors(f"{part}.{i}"))
        return out

    def base_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if ".lora." not in k}

    def parameters(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors().items():
            if name not in state:
                raise ContractViolation(f"checkpoint is missing {name}")
            if state[name].shape != t.shape:
                raise ContractViolation(f"{name}: checkpoint shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=t.data.dtype)


def _batches(n_rows: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Indices for ``steps`` minibatches drawn epoch by epoch without replacement."""
    order = rng.permutation(n_rows)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n_rows:
            order = rng.permutation(n_rows)
            pos = 0
        yield order[pos:pos + batch_size]
        pos += batch_size


def pretrain_continuous(data: np.ndarray, latent_dim: int, hidden: Sequence[int] = (64, 32),
                        steps: int = 2000, lr: float = 0.05, momentum: float = 0.9,
                        batch_size: int = 64, seed: int = 0, optimizer: str = "sgd",
                        model: ToyAutoencoder | None = None) -> tuple[ToyAutoencoder, float]:
    """Fit the autoencoder by reconstruction MSE; returns the model and the
    final MSE over the full dataset."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2 or len(data) == 0:
        raise ContractViolation("pretraining needs a non-empty n x p dataset")
    if model is None:
        model = ToyAutoencoder.create(data.shape[1], latent_dim, hidden, seed=seed)
    opt = make_optimizer(optimizer, model.parameters(), lr)
    if optimizer == "sgd":
        opt.momentum = momentum
    rng = np.random.default_rng(seed + 1)
    for idx in _batches(len(data), min(batch_size, len(data)), steps, rng):
        x = Tensor(data[idx])
        opt.zero_grad()
        recon_loss(x, model(x)).backward()
        opt.step()
    with nk.no_grad():
        full = Tensor(data)
        final = recon_loss(full, model(full)).item()
    return model, final


def attach_lora(model: ToyAutoencoder, rank: int, where: str = "both", seed: int = 0,
                alpha: float | None = None) -> ToyAutoencoder:
    """Copy of ``model`` with frozen base weights and zero-initialized low-rank
    adapters on the selected parts."""
    if where not in ADAPT_WHERE:
        raise ContractViolation(f"adapt_where must be one of {ADAPT_WHERE}")
    out = copy.deepcopy(model)
    for t in out.named_tensors().values():
        t.requires_grad = False
        t.grad = None
    out.frozen = True
    if where == "none":
        return out
    if rank < 1:
        raise ContractViolation("LoRA rank must be >= 1")
    parts = {"encoder": [out.encoder], "decoder": [out.decoder], "both": [out.encoder, out.decoder]}[where]
    layers = [layer for part in parts for layer in part]
    smallest = min(min(layer.d_in, layer.d_out) for layer in layers)
    if rank > smallest:
        raise ContractViolation(f"LoRA rank {rank} exceeds the smallest adapted layer dim {smallest}")
    rng = np.random.default_rng(seed)
    for layer in layers:
        down = nk.gaussian_init((rank, layer.d_in), rng, fan_in=layer.d_in)
        layer.lora = LoraAdapter(Tensor(down, requires_grad=True),
                                 Tensor(np.zeros((layer.d_out, rank)), requires_grad=True),
                                 float(rank if alpha is None else alpha))
    return out


@dataclass
class DiscreteOutput:
    x_hat: Tensor
    f: Tensor
    f_hat: Tensor
    rq: RQResult
    continuous_hat: Tensor | None = field(default=None, repr=False)

    @property
    def codes(self) -> np.ndarray:
        return self.rq.codes


def discrete_forward(model: ToyAutoencoder, rq: ResidualQuantizer, x: Tensor,
                     temperature: float = 1.0, levels: int | None = None) -> DiscreteOutput:
    if levels is not None and levels < 1:
        raise ContractViolation("levels must be >= 1")
    f = model.encode(x)
    res = rq_encode(f, rq, temperature, levels)
    f_hat = straight_through(f, rq_decode(res.z))
    return DiscreteOutput(model.decode(f_hat), f, f_hat, res)


def loss_parts(out: DiscreteOutput, x: Tensor, beta: float, with_entropy: bool = True) -> LossParts:
    """Per-level quantization and entropy terms; each level compares its own
    residual input with the code it chose."""
    quant, entropy = [], []
    for eps, rec in zip(out.rq.residuals, out.rq.records):
        quant.append(quant_loss(eps, rec.z_hard, rec.z_soft, beta))
        if with_entropy and rec.attention is not None:
            entropy.append(entropy_loss(rec.attention))
    return LossParts(recon_loss(x, out.x_hat), quant, entropy)


def trainable_count(model: ToyAutoencoder) -> int:
    return int(sum(t.size for t in model.parameters()))
