"""Command-line entry point: ``coda <subcommand> --config run.toml --seed 0 --out runs/x``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
any failure while running.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import numkit as nk
from .config import ConfigError, RunConfig
from .experiments import STUDIES, dynamics, heatmap, levels_sweep, mixture_config, run_study
from .data import unpatchify
from .maskgit import GeneratorModel, build_schedule, decode_iterative, evaluate_mlm, train_generator
from .metrics import write_jsonl, write_table
from .quantize import decode_codes, grids_from_codes, rq_encode, write_grids
from .train import (build_data, evaluate, load_autoencoder, load_checkpoint, pretrain, save_autoencoder,
                    save_checkpoint, train_tokenizer, uses_autoencoder)


def parse_levels(text: str) -> list[int]:
    """``"1..10"`` or ``"1,2,4"`` to a list of level counts."""
    try:
        if ".." in text:
            lo, hi = (int(p) for p in text.split(".."))
            values = list(range(lo, hi + 1))
        else:
            values = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level range {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"level range {text!r} must be non-empty and positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat TOML run config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default="runs", help="output directory")
        return p

    add("pretrain", "train the continuous autoencoder")
    p = add("adapt", "train the tokenizer (quantizer plus adapters)")
    p.add_argument("--pretrained", help="autoencoder checkpoint from `pretrain`")
    p = add("train-gen", "train the masked-token generator on tokenized images")
    p.add_argument("--checkpoint", help="tokenizer checkpoint from `adapt`")
    p = add("eval", "evaluate a tokenizer checkpoint")
    p.add_argument("--checkpoint", required=True)
    p = add("ablate", "run a comparison study")
    p.add_argument("--study", choices=STUDIES, default="ladder")
    p = add("dynamics", "trace code positions while training on 2-D data")
    p.add_argument("--every", type=int, default=100, help="snapshot interval in steps")
    p = add("levels", "quantization error versus number of levels")
    p.add_argument("--levels", type=parse_levels, default=parse_levels("1..10"))
    p = add("heatmap", "top-k assignment confidences")
    p.add_argument("--checkpoint", help="tokenizer checkpoint (trains one when omitted)")
    p.add_argument("--k", type=int, default=8)
    p = add("decode", "generate token grids with iterative parallel decoding")
    p.add_argument("--generator", required=True, help="generator checkpoint from `train-gen`")
    p.add_argument("--checkpoint", help="tokenizer checkpoint; when given, samples are also decoded to images")
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--label", type=int, help="class label for conditioned generators")
    return parser


def load_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be >= 0")
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _pretrained(cfg: RunConfig, path: str | None):
    if not uses_autoencoder(cfg):
        return None
    return load_autoencoder(cfg, path) if path else pretrain(cfg)[0]


def _tokenizer(cfg: RunConfig, path: str | None):
    if path:
        return load_checkpoint(cfg, path)
    return train_tokenizer(cfg, pretrained=_pretrained(cfg, None)).tokenizer


def _generator(cfg: RunConfig) -> GeneratorModel:
    g = cfg.grid_side
    return GeneratorModel.create(cfg.codebook_size, cfg.levels, g, g, cfg.gen_d_model, cfg.gen_blocks,
                                 cfg.num_classes, seed=cfg.seed + 5)


def cmd_pretrain(cfg, args, out: Path) -> None:
    model, mse = pretrain(cfg)
    save_autoencoder(model, out / "autoencoder.ckpt")
    (out / "pretrain.json").write_text(json.dumps({"recon_mse": mse}) + "\n")


def cmd_adapt(cfg, args, out: Path) -> None:
    result = train_tokenizer(cfg, pretrained=_pretrained(cfg, args.pretrained))
    save_checkpoint(result.tokenizer, out / "tokenizer.ckpt")
    write_jsonl(out / "metrics.jsonl", result.records)
    write_jsonl(out / "losses.jsonl", result.losses)


def cmd_train_gen(cfg, args, out: Path) -> None:
    if not uses_autoencoder(cfg) or cfg.dataset != "images":
        raise nk.ContractViolation("generator training needs the image dataset")
    tok = _tokenizer(cfg, args.checkpoint)
    data = build_data(cfg)
    with nk.no_grad():
        codes = rq_encode(tok.encode(data.train), tok.rq, cfg.temperature).codes
    grids = grids_from_codes(codes, cfg.grid_side, cfg.grid_side, cfg.codebook_size)
    labels = None
    if cfg.num_classes:
        labels = list(np.random.default_rng(cfg.seed + 6).integers(0, cfg.num_classes, len(grids)))
    model = _generator(cfg)
    log = train_generator(model, grids, cfg.gen_steps, cfg.gen_lr, cfg.gen_batch, cfg.seed,
                          cfg.gen_optimizer, labels)
    nk.save_tensors(out / "generator.ckpt", model.named_tensors())
    write_grids(out / "train.grids", grids)
    final = {"steps": cfg.gen_steps, "final_loss": log.losses[-1] if log.losses else None}
    if labels is None:
        final["mlm_loss_at_half_mask"] = evaluate_mlm(model, grids, seed=cfg.seed)
    (out / "generator.json").write_text(json.dumps(final) + "\n")


def cmd_eval(cfg, args, out: Path) -> None:
    tok = load_checkpoint(cfg, args.checkpoint)
    write_jsonl(out / "metrics.jsonl", [evaluate(tok, build_data(cfg), cfg.steps)])


def cmd_ablate(cfg, args, out: Path) -> None:
    for row in run_study(args.study, cfg, out):
        print(json.dumps(row))


def cmd_dynamics(cfg, args, out: Path) -> None:
    if args.every < 1:
        raise ConfigError("--every must be >= 1")
    if cfg.dataset != "mixture_2d":
        cfg = mixture_config(cfg)
    dynamics(cfg, args.every).to_csv(out / "dynamics.csv")


def cmd_levels(cfg, args, out: Path) -> None:
    rows = levels_sweep(cfg, args.levels)
    write_table(out / "levels.csv", rows)
    for row in rows:
        print(json.dumps(row))


def cmd_heatmap(cfg, args, out: Path) -> None:
    tok = _tokenizer(cfg, args.checkpoint)
    heatmap(cfg, tok, build_data(cfg), args.k).to_csv(out / "heatmap.csv")


def cmd_decode(cfg, args, out: Path) -> None:
    model = _generator(cfg)
    model.load_state(nk.load_tensors(args.generator))
    span = model.h * model.w if cfg.level_sequential else model.seq_len
    labels = None if args.label is None else [args.label] * args.samples
    result = decode_iterative(model, build_schedule(cfg.decode_steps, span, cfg.schedule),
                              cfg.decode_temperature, cfg.seed, args.samples, labels, cfg.level_sequential)
    write_grids(out / "samples.grids", result.grids)
    (out / "decode.json").write_text(json.dumps({"masked_trajectory": result.masked_trajectory}) + "\n")
    if args.checkpoint:
        tok = load_checkpoint(cfg, args.checkpoint)
        if tok.model is None:
            raise nk.ContractViolation("decoding to images needs an autoencoder checkpoint")
        codes = np.concatenate([g.indices.reshape(g.levels, -1) for g in result.grids], axis=1)
        with nk.no_grad():
            rows = tok.model.decode(nk.Tensor(decode_codes(codes, tok.rq))).data
        np.save(out / "samples.npy", unpatchify(rows, cfg.patch, cfg.image_size))


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "train-gen": cmd_train_gen, "eval": cmd_eval,
            "ablate": cmd_ablate, "dynamics": cmd_dynamics, "levels": cmd_levels, "heatmap": cmd_heatmap,
            "decode": cmd_decode}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any failure maps to exit 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
