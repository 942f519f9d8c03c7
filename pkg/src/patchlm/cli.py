"""Command-line entry points: train, eval, report-activations, cost, export-curves."""

from __future__ import annotations

import argparse
import os
import sys
from fractions import Fraction

from .checkpoint import load_checkpoint
from .config import load_config
from .data import BlockStream, load_corpus, pack_blocks
from .evaluate import activation_rate, eval_nll, perplexity
from .model import param_count
from .trainer import cost_ratio, export_curves, flops_estimate, train_run


def _parse_lam(raw: str) -> Fraction:
    if "/" in raw:
        num, _, den = raw.partition("/")
        return Fraction(int(num), int(den))
    return Fraction(str(float(raw)))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchlm",
                                     description="patch-compressed two-stage LM training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the two-stage plan from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="directory for checkpoints and metrics.jsonl")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")

    p = sub.add_parser("eval", help="NLL and perplexity of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("report-activations", help="per-layer neuron activation table")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch-size", type=int, default=None, help="override the checkpoint's K")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("cost", help="cost ratio and compute estimate")
    p.add_argument("--config", default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--lam", default=None, help="patch-stage data fraction, e.g. 2/3")
    p.add_argument("--n-params", type=int, default=None)
    p.add_argument("--tokens", type=int, default=None)

    p = sub.add_parser("export-curves", help="JSON-lines metrics log to CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    return parser


def _eval_blocks(cfg):
    ids, vocab = load_corpus(cfg.data.path, cfg.data.kind)
    if vocab > cfg.model.vocab_size:
        raise ValueError(f"corpus vocab {vocab} exceeds model vocab {cfg.model.vocab_size}")
    if cfg.train.eval_fraction > 0:
        n_eval = int(len(ids) * cfg.train.eval_fraction)
        ids = ids[len(ids) - n_eval:]
    blocks = pack_blocks(ids, cfg.patch.context_tokens)
    return blocks[: cfg.train.eval_blocks]


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    metrics_path = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        metrics_path = os.path.join(args.out, "metrics.jsonl")
    result = train_run(cfg, out_dir=args.out, metrics_path=metrics_path)
    st = result.state
    print(f"done: {result.plan.patch_steps} patch steps + {result.plan.token_steps} token steps, "
          f"{st.tokens_consumed} tokens, {float(st.compute_units):.4g} compute units, "
          f"final loss {st.last_loss:.4f}")
    if metrics_path:
        print(f"metrics: {metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    params, _, _ = load_checkpoint(args.checkpoint)
    blocks = _eval_blocks(cfg)
    if len(blocks) == 0:
        raise ValueError("no evaluation blocks available")
    nll = eval_nll(params, blocks)
    print(f"nll={nll:.6f} ppl={perplexity(nll):.4f}")
    return 0


def _cmd_report_activations(args) -> int:
    cfg = load_config(args.config)
    params, patch_cfg, _ = load_checkpoint(args.checkpoint)
    k = args.patch_size if args.patch_size is not None else patch_cfg.patch_size
    ids, _ = load_corpus(cfg.data.path, cfg.data.kind)
    block_len = k * cfg.patch.context_tokens if k > 1 else cfg.patch.context_tokens
    stream = BlockStream(ids, block_len, seed=cfg.train.seed)
    n = min(max(1, cfg.train.tokens_per_batch // block_len), stream.n_blocks)
    if n == 0:
        raise ValueError("corpus too small for one activation batch")
    report = activation_rate(params, stream.blocks[:n], threshold=args.threshold, patch_size=k)
    print(report.table())
    return 0


def _cmd_cost(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        k = args.patch_size if args.patch_size is not None else cfg.patch.patch_size
        lam = _parse_lam(args.lam) if args.lam is not None else cfg.patch.lam
        n_params = args.n_params if args.n_params is not None else param_count(cfg.model)
    else:
        if args.patch_size is None or args.lam is None:
            raise ValueError("cost needs --config or both --patch-size and --lam")
        k, lam, n_params = args.patch_size, _parse_lam(args.lam), args.n_params
    ratio = cost_ratio(k, lam)
    print(f"{ratio:g}")
    if n_params is not None and args.tokens is not None:
        full = flops_estimate(n_params, args.tokens)
        print(f"token-level compute: {full:.6g}")
        print(f"two-stage compute:   {full * ratio:.6g}")
    return 0


def _cmd_export_curves(args) -> int:
    rows = export_curves(args.log, args.out)
    print(f"wrote {rows} rows to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "report-activations": _cmd_report_activations,
    "cost": _cmd_cost,
    "export-curves": _cmd_export_curves,
}


def main(argv=None) -> int:
    from .perf import tune_malloc

    tune_malloc()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, IndexError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e, FileNotFoundError) else 1


if __name__ == "__main__":
    sys.exit(main())
