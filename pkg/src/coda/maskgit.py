"""Masked-token generator over code grids.

Grids are flattened level-major (level, row, col). Every token embedding is
summed with a level embedding and a spatial embedding. A batch of sequences is
processed as one stacked matrix with a block-diagonal attention mask, so the
whole forward pass stays 2-D.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .numkit import ContractViolation, Tensor
from .optim import make_optimizer
from .quantize import CodeGrid

NEG_INF = -1e9
SCHEDULE_KINDS = ("cosine", "linear")


def gamma(u, kind: str = "cosine"):
    """Fraction of tokens still masked at progress ``u`` in [0, 1]."""
    if kind == "cosine":
        return np.cos(np.pi * np.asarray(u) / 2.0)
    if kind == "linear":
        return 1.0 - np.asarray(u)
    raise ContractViolation(f"unknown schedule kind {kind!r}")


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


def _param(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


@dataclass
class Block:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, mlp_ratio: int = 4) -> "Block":
        s = 1.0 / math.sqrt(d)
        hidden = mlp_ratio * d
        return cls(
            _param(rng, (d, d), s, "w_q"), _param(rng, (d, d), s, "w_k"),
            _param(rng, (d, d), s, "w_v"), _param(rng, (d, d), s, "w_o"),
            _param(rng, (d, hidden), s, "w_1"), Tensor(np.zeros(hidden), requires_grad=True),
            _param(rng, (hidden, d), 1.0 / math.sqrt(hidden), "w_2"), Tensor(np.zeros(d), requires_grad=True),
        )

    def __call__(self, x: Tensor, bias: Tensor) -> Tensor:
        d = x.shape[1]
        h = nk.rowwise_rms_normalize(x)
        q, k, v = nk.matmul(h, self.w_q), nk.matmul(h, self.w_k), nk.matmul(h, self.w_v)
        scores = nk.add(nk.scale(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(d)), bias)
        attn = nk.matmul(nk.matmul(nk.softmax_rows(scores), v), self.w_o)
        x = nk.add(x, attn)
        h = nk.rowwise_rms_normalize(x)
        mlp = nk.add(nk.matmul(nk.silu(nk.add(nk.matmul(h, self.w_1), self.b_1)), self.w_2), self.b_2)
        return nk.add(x, mlp)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("w_q", "w_k", "w_v", "w_o", "w_1", "b_1", "w_2", "b_2")}


@dataclass
class GeneratorModel:
    n: int
    levels: int
    h: int
    w: int
    token_emb: Tensor  # (n + 1) x D, last row is MASK
    level_emb: Tensor  # L x D
    spatial_emb: Tensor  # (h * w) x D
    blocks: list[Block]
    w_out: Tensor  # D x n
    b_out: Tensor  # n
    class_emb: Tensor | None = None  # num_classes x D

    @classmethod
    def create(cls, n: int, levels: int, h: int, w: int, d_model: int = 64, n_blocks: int = 2,
               num_classes: int = 0, seed: int = 0) -> "GeneratorModel":
        if n < 2 or levels < 1 or h < 1 or w < 1:
            raise ContractViolation("generator needs n >= 2 and a non-empty grid")
        rng = np.random.default_rng(seed)
        s = 1.0 / math.sqrt(d_model)
        return cls(
            n, levels, h, w,
            _param(rng, (n + 1, d_model), 1.0, "token_emb"),
            _param(rng, (levels, d_model), 1.0, "level_emb"),
            _param(rng, (h * w, d_model), 1.0, "spatial_emb"),
            [Block.create(d_model, rng) for _ in range(n_blocks)],
            _param(rng, (d_model, n), s, "w_out"),
            Tensor(np.zeros(n), requires_grad=True),
            _param(rng, (num_classes, d_model), 1.0, "class_emb") if num_classes else None,
        )

    @property
    def mask_id(self) -> int:
        return self.n

    @property
    def seq_len(self) -> int:
        return self.levels * self.h * self.w

    @property
    def num_classes(self) -> int:
        return 0 if self.class_emb is None else self.class_emb.shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"gen.token_emb": self.token_emb, "gen.level_emb": self.level_emb,
               "gen.spatial_emb": self.spatial_emb, "gen.w_out": self.w_out, "gen.b_out": self.b_out}
        for i, b in enumerate(self.blocks):
            out.update(b.named_tensors(f"gen.block.{i}"))
        if self.class_emb is not None:
            out["gen.class_emb"] = self.class_emb
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def __call__(self, tokens: np.ndarray, labels: Sequence[int] | None = None) -> Tensor:
        """Logits (B*S) x n for a B x S token array (MASK = n)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        B, S = tokens.shape
        if S != self.seq_len:
            raise ContractViolation(f"expected sequences of length {self.seq_len}, got {S}")
        if tokens.min() < 0 or tokens.max() > self.n:
            raise ContractViolation("token id out of vocabulary")
        pos = np.arange(S)
        level_idx = np.tile(pos // (self.h * self.w), B)
        spatial_idx = np.tile(pos % (self.h * self.w), B)
        x = nk.add(nk.add(nk.gather_rows(self.token_emb, tokens.reshape(-1)),
                          nk.gather_rows(self.level_emb, level_idx)),
                   nk.gather_rows(self.spatial_emb, spatial_idx))
        seg = np.repeat(np.arange(B), S)
        conditioned = self.class_emb is not None and labels is not None
        if conditioned:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (B,) or labels.min() < 0 or labels.max() >= self.num_classes:
                raise ContractViolation("one class label in range is needed per sequence")
            x = nk.concat_rows([x, nk.gather_rows(self.class_emb, labels)])
            seg = np.concatenate([seg, np.arange(B)])
        bias = Tensor(np.where(seg[:, None] == seg[None, :], 0.0, NEG_INF))
        for block in self.blocks:
            x = block(x, bias)
        if conditioned:
            x = nk.gather_rows(x, np.arange(B * S))
        x = nk.rowwise_rms_normalize(x)
        return nk.add(nk.matmul(x, self.w_out), self.b_out)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors().items():
            if name not in state or state[name].shape != t.shape:
                raise ContractViolation(f"checkpoint entry {name} missing or misshapen")
            t.data = np.array(state[name], dtype=t.data.dtype)


# --------------------------------------------------------------------------
# masking and loss
# --------------------------------------------------------------------------


def mask_count(ratio: float, total: int) -> int:
    # the small slack keeps ratios like 0.5 * 32 from rounding up through float error
    return int(math.ceil(ratio * total - 1e-9))


def mask_tokens(codes: CodeGrid | np.ndarray, ratio: float, seed: int | np.random.Generator,
                mask_id: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Replace ceil(ratio * size) uniformly chosen positions with MASK.

    Returns the masked flat sequence and the sorted masked positions.
    """
    if not (0.0 < ratio <= 1.0):
        raise ContractViolation(f"mask ratio must be in (0, 1], got {ratio}")
    if isinstance(codes, CodeGrid):
        flat = codes.indices.reshape(-1)
        mask_id = codes.n if mask_id is None else mask_id
    else:
        flat = np.asarray(codes, dtype=np.int64).reshape(-1)
        if mask_id is None:
            raise ContractViolation("mask_id is required for raw index arrays")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = mask_count(ratio, flat.size)
    positions = np.sort(rng.choice(flat.size, size=k, replace=False))
    out = flat.copy()
    out[positions] = mask_id
    return out, positions


def mlm_loss(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    m, n = logits.shape
    if len(targets) != m or m == 0:
        raise ContractViolation("need one target per masked position")
    if targets.min() < 0 or targets.max() >= n:
        raise ContractViolation("target out of vocabulary")
    picked = nk.mul(nk.log_softmax_rows(logits), nk.one_hot_rows(targets, n))
    return nk.scale(nk.sum(picked), -1.0 / m)


# --------------------------------------------------------------------------
# decode schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DecodeSchedule:
    counts: tuple[int, ...]
    kind: str = "cosine"

    @property
    def steps(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def masked_after(self) -> list[int]:
        """Number of masked tokens remaining after each step."""
        return [self.total - int(c) for c in np.cumsum(self.counts)]


def build_schedule(T: int, total: int, kind: str = "cosine") -> DecodeSchedule:
    """Per-step unmask counts.

    One token per step is reserved so every count is positive; the remainder
    follows cumulative ``total' - floor(total' * gamma(t / T))`` and its
    increments are sorted ascending, so the reveal rate only grows.
    """
    if kind not in SCHEDULE_KINDS:
        raise ContractViolation(f"unknown schedule kind {kind!r}")
    if not (1 <= T <= total):
        raise ContractViolation(f"need 1 <= T <= total, got T={T}, total={total}")
    spare = total - T
    u = np.arange(T + 1) / T
    cumulative = spare - np.floor(spare * gamma(u, kind) + 1e-9).astype(np.int64)
    cumulative[-1] = spare
    extra = np.sort(np.diff(cumulative))
    return DecodeSchedule(tuple(int(c) + 1 for c in extra), kind)


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------


@dataclass
class DecodeResult:
    grids: list[CodeGrid]
    masked_trajectory: list[int]  # masked count per sample after each step


def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # inverse-CDF sampling; one uniform per row keeps the stream reproducible
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((cdf < u).sum(axis=1), probs.shape[1] - 1)


def _decode_span(model: GeneratorModel, tokens: np.ndarray, span: np.ndarray,
                 schedule: DecodeSchedule, temperature: float, rng: np.random.Generator,
                 labels, trajectory: list[int]) -> None:
    """Unmask the positions in ``span`` of every row of ``tokens`` in place."""
    mask_id = model.mask_id
    for count in schedule.counts:
        with nk.no_grad():
            logits = model(tokens, labels).data.reshape(len(tokens), model.seq_len, model.n)
        for b in range(len(tokens)):
            masked = span[tokens[b, span] == mask_id]
            z = logits[b, masked].astype(np.float64)
            if temperature <= 0:
                choice = z.argmax(axis=1)
                p = np.exp(z - z.max(axis=1, keepdims=True))
            else:
                p = np.exp((z - z.max(axis=1, keepdims=True)) / temperature)
                p /= p.sum(axis=1, keepdims=True)
                choice = _sample(p, rng)
            p = p / p.sum(axis=1, keepdims=True)
            confidence = p[np.arange(len(masked)), choice]
            # stable order: highest confidence first, earlier position on ties
            keep = np.argsort(-confidence, kind="stable")[:count]
            tokens[b, masked[keep]] = choice[keep]
        trajectory.append(int((tokens[0] == mask_id).sum()))


def decode_iterative(model: GeneratorModel, schedule: DecodeSchedule, temperature: float = 1.0,
                     seed: int = 0, num_samples: int = 1, labels: Sequence[int] | None = None,
                     level_sequential: bool = False) -> DecodeResult:
    """Generate ``num_samples`` grids from fully masked sequences.

    ``level_sequential`` decodes level 0 completely, then level 1, and so on;
    the schedule then covers one level (``h * w`` tokens) and is reused per level.
    """
    span_size = model.h * model.w if level_sequential else model.seq_len
    if schedule.total != span_size:
        raise ContractViolation(f"schedule covers {schedule.total} tokens, decoding span has {span_size}")
    rng = np.random.default_rng(seed)
    tokens = np.full((num_samples, model.seq_len), model.mask_id, dtype=np.int64)
    trajectory: list[int] = []
    if level_sequential:
        for level in range(model.levels):
            span = np.arange(level * span_size, (level + 1) * span_size)
            _decode_span(model, tokens, span, schedule, temperature, rng, labels, trajectory)
    else:
        _decode_span(model, tokens, np.arange(model.seq_len), schedule, temperature, rng, labels, trajectory)
    grids = [CodeGrid(t.reshape(model.levels, model.h, model.w), model.n) for t in tokens]
    return DecodeResult(grids, trajectory)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class GeneratorTrainLog:
    losses: list[float] = field(default_factory=list)


def masked_batch(seqs: np.ndarray, mask_id: int, rng: np.random.Generator,
                 ratio: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mask each sequence at ``ratio`` (or gamma(U(0,1)) when None).

    Returns the masked tokens, flat row indices of masked positions and their targets.
    """
    B, S = seqs.shape
    masked = np.empty_like(seqs)
    rows, targets = [], []
    for b in range(B):
        r = ratio if ratio is not None else max(float(gamma(rng.random())), 1.0 / S)
        masked[b], pos = mask_tokens(seqs[b], r, rng, mask_id)
        rows.append(b * S + pos)
        targets.append(seqs[b, pos])
    return masked, np.concatenate(rows), np.concatenate(targets)


def generator_loss(model: GeneratorModel, seqs: np.ndarray, rng: np.random.Generator,
                   ratio: float | None = None, labels=None) -> Tensor:
    masked, rows, targets = masked_batch(seqs, model.mask_id, rng, ratio)
    logits = model(masked, labels)
    return mlm_loss(nk.gather_rows(logits, rows), targets)


def train_generator(model: GeneratorModel, grids: Sequence[CodeGrid], steps: int, lr: float = 3e-3,
                    batch_size: int = 16, seed: int = 0, optimizer: str = "adam",
                    labels: Sequence[int] | None = None) -> GeneratorTrainLog:
    if not grids:
        raise ContractViolation("generator training needs at least one grid")
    seqs = np.stack([g.indices.reshape(-1) for g in grids])
    if seqs.shape[1] != model.seq_len or seqs.max() >= model.n:
        raise ContractViolation("grids do not match the generator's shape or vocabulary")
    label_arr = None if labels is None else np.asarray(labels, dtype=np.int64)
    opt = make_optimizer(optimizer, model.parameters(), lr)
    rng = np.random.default_rng(seed)
    log = GeneratorTrainLog()
    for _ in range(steps):
        idx = rng.integers(0, len(seqs), size=min(batch_size, len(seqs)))
        opt.zero_grad()
        loss = generator_loss(model, seqs[idx], rng, labels=None if label_arr is None else label_arr[idx])
        loss.backward()
        opt.step()
        log.losses.append(loss.item())
    return log


def evaluate_mlm(model: GeneratorModel, grids: Sequence[CodeGrid], ratio: float = 0.5,
                 seed: int = 0, repeats: int = 8) -> float:
    """Average masked-token loss at a fixed mask ratio."""
    seqs = np.stack([g.indices.reshape(-1) for g in grids])
    rng = np.random.default_rng(seed)
    with nk.no_grad():
        return float(np.mean([generator_loss(model, seqs, rng, ratio).item() for _ in range(repeats)]))
