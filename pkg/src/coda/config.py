"""Run configuration: a flat TOML file whose keys map one-to-one onto RunConfig fields."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .losses import LossWeights

QUANTIZER_KINDS = ("vq", "rq_vq", "rq_attn")
DATASETS = ("images", "mixture_2d", "subspace")


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass
class RunConfig:
    seed: int = 0
    # data
    dataset: str = "images"
    train_count: int = 256  # images, or points for latent datasets
    eval_count: int = 512
    image_size: int = 16
    patch: int = 4
    mixture_components: int = 8
    mixture_radius: float = 2.0
    mixture_std: float = 0.6
    subspace_p: int = 16
    subspace_dim: int = 4
    subspace_noise: float = 0.01
    # autoencoder
    latent_dim: int = 8
    hidden: list = field(default_factory=lambda: [64, 32])
    pretrain_steps: int = 1500
    pretrain_lr: float = 0.02
    # quantizer
    quantizer: str = "rq_attn"
    codebook_size: int = 512
    levels: int = 4
    norm_kind: str = "rms"
    d_att: int = 0  # 0 means latent_dim
    temperature: float = 1.0
    codebook_init: str = "gaussian"
    shared_codebook: bool = True
    # objective
    lambda_q: float = 1.0
    lambda_e: float = 0.1
    beta: float = 0.25
    # optimization
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    steps: int = 1000
    lora_rank: int = 4
    adapt_where: str = "both"
    eval_every: int = 500
    # generator
    gen_d_model: int = 64
    gen_blocks: int = 2
    gen_steps: int = 2000
    gen_lr: float = 3e-3
    gen_batch: int = 16
    gen_optimizer: str = "adam"
    num_classes: int = 0
    decode_steps: int = 8
    decode_temperature: float = 1.0
    schedule: str = "cosine"
    level_sequential: bool = False

    def __post_init__(self):
        self.hidden = list(self.hidden)
        self.validate()

    # ------------------------------------------------------------------
    def validate(self) -> None:
        def positive(*names):
            for n in names:
                if getattr(self, n) <= 0:
                    raise ConfigError(f"{n} must be positive, got {getattr(self, n)}")

        def nonneg(*names):
            for n in names:
                if getattr(self, n) < 0:
                    raise ConfigError(f"{n} must be >= 0, got {getattr(self, n)}")

        def choice(name, options):
            if getattr(self, name) not in options:
                raise ConfigError(f"{name} must be one of {options}, got {getattr(self, name)!r}")

        positive("train_count", "eval_count", "image_size", "patch", "mixture_components",
                 "subspace_p", "subspace_dim", "latent_dim", "codebook_size", "levels",
                 "temperature", "batch_size", "eval_every", "gen_d_model", "gen_batch",
                 "decode_steps", "lr", "gen_lr", "pretrain_lr")
        nonneg("seed", "mixture_radius", "mixture_std", "subspace_noise", "pretrain_steps", "d_att",
               "steps", "lora_rank", "gen_blocks", "gen_steps", "num_classes", "momentum",
               "decode_temperature")
        choice("dataset", DATASETS)
        choice("quantizer", QUANTIZER_KINDS)
        choice("norm_kind", ("rms", "layer", "none"))
        choice("codebook_init", ("gaussian", "uniform", "kmeans_on_sample"))
        choice("optimizer", ("sgd", "adam"))
        choice("gen_optimizer", ("sgd", "adam"))
        choice("adapt_where", ("encoder", "decoder", "both", "none"))
        choice("schedule", ("cosine", "linear"))
        if any((not isinstance(h, int)) or h <= 0 for h in self.hidden):
            raise ConfigError("hidden must be a list of positive integers")
        if self.quantizer == "vq" and self.levels != 1:
            raise ConfigError("quantizer 'vq' is single-level; set levels = 1 or use 'rq_vq'")
        if self.image_size % self.patch:
            raise ConfigError("image_size must be a multiple of patch")
        if self.subspace_dim > self.subspace_p:
            raise ConfigError("subspace_dim cannot exceed subspace_p")
        if self.dataset == "mixture_2d" and self.latent_dim != 2:
            raise ConfigError("mixture_2d is two-dimensional; set latent_dim = 2")
        if self.adapt_where != "none" and self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1 when adapting")
        try:
            self.loss_weights()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_q=self.lambda_q, lambda_e=self.lambda_e, beta=self.beta)

    @property
    def attention_dim(self) -> int:
        return self.d_att or self.latent_dim

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def config_hash(self) -> str:
        """Stable under key reordering: hashes sorted-key JSON."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r}")


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in cfg.to_dict().items())


def from_dict(raw: dict) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for k, v in raw.items():
        default = known[k].default if known[k].default is not dataclasses.MISSING else known[k].default_factory()
        if isinstance(default, bool) != isinstance(v, bool):
            raise ConfigError(f"{k}: expected {type(default).__name__}, got {v!r}")
        if isinstance(default, float) and isinstance(v, int):
            v = float(v)
        if not isinstance(v, type(default)):
            raise ConfigError(f"{k}: expected {type(default).__name__}, got {v!r}")
        values[k] = v
    return RunConfig(**values)


def loads(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed config: {e}") from None
    if any(isinstance(v, dict) for v in raw.values()):
        raise ConfigError("config is flat; tables are not supported")
    return from_dict(raw)


def load(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
