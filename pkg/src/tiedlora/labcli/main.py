"""``tiedlora`` command line: audit, pretrain, train, eval, merge, gradcheck, sweep.

Exit codes: 0 success, 1 validation error, 2 numeric or verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import NumericError, ValidationError, VerificationError
from . import commands
from .config import RunConfig, load_config, parse_config

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2


def _ranks(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiedlora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str, *flags: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        if "config" in flags:
            p.add_argument("--config", type=Path, help="run config (YAML or JSON)")
        if "base" in flags:
            p.add_argument("--base", type=Path, required=True, help="base checkpoint")
        if "adapter" in flags:
            p.add_argument("--adapter", type=Path, help="adapter checkpoint")
        if "out" in flags:
            p.add_argument("--out", type=Path, help="output path")
        if "seed" in flags:
            p.add_argument("--seed", type=int, help="override seeds")
        if "mode" in flags:
            p.add_argument("--mode", help="adapter mode (LORA, TAB, TABUV, TBU, TB, TAUV, TA, TUV)")
        if "rank" in flags:
            p.add_argument("--rank", type=int, help="adapter rank r")
        return p

    audit = add("audit", "trainable-parameter table for all modes", "out")
    audit.add_argument("--d", type=int, default=4096, help="hidden size")
    audit.add_argument("--layers", type=int, default=32, help="number of layers L")
    audit.add_argument("--rank", type=_ranks, default=[2, 8, 32, 128], help="comma-separated ranks")

    add("pretrain", "full-parameter pretraining of the base model", "config", "out", "seed")
    add("train", "train an adapter on the configured task", "config", "base", "out", "seed", "mode", "rank")
    ev = add("eval", "score a base (optionally with adapter) on the task test split", "config", "base", "adapter", "seed")
    ev.add_argument("--metric", choices=["exact_match", "token_accuracy"])
    add("merge", "fold an adapter into the base weights", "config", "base", "adapter", "out")
    gc = add("gradcheck", "compare backprop against finite differences", "seed", "mode", "rank")
    gc.add_argument("--d", type=int, default=8)
    gc.add_argument("--layers", type=int, default=2)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=commands.GRADCHECK_TOLERANCE)
    sw = add("sweep", "rank × mode × seed grid; writes CSV", "config", "base", "out", "seed", "mode", "rank")
    sw.add_argument("--workers", type=int, help="parallel worker processes")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        s = args.seed
        updates = {
            "train": cfg.train.model_copy(update={"seed": s}),
            "adapter": cfg.adapter.model_copy(update={"init_seed": s}),
            "pretrain": cfg.pretrain.model_copy(update={"seed": s}),
            "model": cfg.model.model_copy(update={"seed": s}),
        }
        cfg = cfg.model_copy(update=updates)
    adapter_updates = {}
    if getattr(args, "mode", None):
        adapter_updates["mode"] = args.mode
    if isinstance(getattr(args, "rank", None), int):
        adapter_updates["r"] = args.rank
    sweep_updates = {}
    if args.command == "sweep":
        if getattr(args, "mode", None):
            sweep_updates["modes"] = [args.mode]
        if getattr(args, "rank", None):
            sweep_updates["ranks"] = [args.rank]
        if getattr(args, "seed", None) is not None:
            sweep_updates["seeds"] = [args.seed]
        if args.workers:
            sweep_updates["workers"] = args.workers
    # re-validate so overrides go through the same strict checks as the file
    data = cfg.model_dump()
    data["adapter"].update(adapter_updates)
    data["sweep"].update(sweep_updates)
    return parse_config(data)


def _out(args, cfg: RunConfig, default: str) -> Path:
    return args.out if args.out is not None else Path(cfg.out_dir) / default


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "audit":
        rows = commands.cmd_audit(args.d, args.layers, args.rank, args.out)
        table = [commands.AUDIT_HEADER[:7]] + [row[:7] for row in rows]
        widths = [max(len(str(r[i])) for r in table) for i in range(7)]
        for row, full in zip(table, [None] + rows):
            note = f"  ** {full[7]}" if full and full[7] else ""
            print("  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip() + note)
        return EXIT_OK

    if args.command == "gradcheck":
        mode = args.mode or "TABUV"
        err = commands.cmd_gradcheck(mode, args.d, args.layers, args.rank or 2, args.seed or 0, args.eps)
        ok = err <= args.tol
        print(f"gradcheck mode={mode} max_rel_error={err:.3e} tol={args.tol:.0e} {'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_NUMERIC

    cfg = _config(args)
    if args.command == "pretrain":
        out = _out(args, cfg, "base.ckpt")
        report = commands.cmd_pretrain(cfg, out)
        print(json.dumps({"checkpoint": str(out), "best_val_loss": report["best_val_loss"], "steps": report["steps_run"]}))
    elif args.command == "train":
        out = _out(args, cfg, "adapter.ckpt")
        report = commands.cmd_train(cfg, args.base, out)
        print(json.dumps({"checkpoint": str(out), "best_val_loss": report["best_val_loss"],
                          "stop_reason": report["stop_reason"], "steps": report["steps_run"]}))
    elif args.command == "eval":
        score = commands.cmd_eval(cfg, args.base, args.adapter, args.metric)
        print(f"{args.metric or 'score'}={score:.6f}")
    elif args.command == "merge":
        if args.adapter is None:
            raise ValidationError("merge needs --adapter")
        out = _out(args, cfg, "merged.ckpt")
        err = commands.cmd_merge(cfg, args.base, args.adapter, out)
        print(f"merged -> {out} (max relative logit gap {err:.3e})")
    elif args.command == "sweep":
        out = _out(args, cfg, "sweep.csv")
        results = commands.cmd_sweep(cfg, args.base, out)
        failed = sum(1 for r in results if r.error)
        print(f"sweep: {len(results)} cells, {failed} failed -> {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, VerificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
