"""Implementations behind the ``tiedlora`` subcommands.

Each ``cmd_*`` function returns plain data and writes its artifacts; the
argparse layer in :mod:`tiedlora.labcli.main` only handles flags, printing
and exit codes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from statistics import mean
from typing import Sequence

import numpy as np

from .. import numkit as nk
from ..adapter import (
    ModelDims,
    TiedLoraConfig,
    TiedLoraMode,
    count_trainable,
    fraction_of_lora,
    init_adapter,
)
from ..errors import DimensionError, ValidationError, VerificationError
from ..nanoformer import Model, TransformerConfig, attach_adapter, build_model, forward, merged_model
from ..taskgen import Batch, TaskDataset, evaluate, gen_seq_task, pretrain_mixture
from ..trainkit import grad_check, pretrain, train
from .checkpoint import (
    adapter_checkpoint,
    adapter_from_checkpoint,
    base_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .config import RunConfig

log = logging.getLogger(__name__)

FORMULAS = {
    TiedLoraMode.LORA: "4Ldr",
    TiedLoraMode.TAB: "4dr",
    TiedLoraMode.TABUV: "4dr+L(r+3d)",
    TiedLoraMode.TBU: "(L+3d)r",
    TiedLoraMode.TB: "3dr",
    TiedLoraMode.TAUV: "dr+L(r+3d)",
    TiedLoraMode.TA: "dr",
    TiedLoraMode.TUV: "L(r+3d)",
}

# A widely quoted 3.3% for TBU at (4096, 32), r=128 disagrees with the count,
# which is rank-independent and gives 2.3%.
QUOTED_ANOMALY = {"dims": (4096, 32), "mode": TiedLoraMode.TBU, "r": 128, "quoted": 3.3}

MERGE_TOLERANCE = 1e-9
GRADCHECK_TOLERANCE = 1e-4


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# audit

AUDIT_HEADER = ("mode", "d", "L", "r", "formula", "trainable", "percent_of_lora", "note")


def cmd_audit(d: int, L: int, ranks: Sequence[int], out: str | Path | None = None) -> list[tuple]:
    """Trainable counts and percent-of-LoRA for every mode and rank."""
    dims = ModelDims(d, L)
    rows = []
    for r in ranks:
        for mode in TiedLoraMode:
            config = TiedLoraConfig(mode, r, dims)
            pct = 100.0 * fraction_of_lora(config)
            note = ""
            a = QUOTED_ANOMALY
            if (d, L) == a["dims"] and mode is a["mode"] and r == a["r"]:
                note = f"inconsistent: quoted value {a['quoted']}, formula gives {pct:.1f} at every rank"
            rows.append((mode.value, d, L, r, FORMULAS[mode], count_trainable(config), f"{pct:.1f}", note))
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(_csv_text(AUDIT_HEADER, rows))
    return rows


# ---------------------------------------------------------------------------
# pretrain / train / eval / merge / gradcheck


def task_dataset(cfg: RunConfig) -> TaskDataset:
    t = cfg.task
    return gen_seq_task(
        t.kind, t.seed, t.n_train, t.n_val, t.n_test, t.max_len, alphabet=t.alphabet, max_seq_len=cfg.model.max_seq_len
    )


def cmd_pretrain(cfg: RunConfig, out: str | Path) -> dict:
    """Full-parameter training on the task-family mixture; writes a base checkpoint."""
    model = build_model(cfg.transformer, cfg.model.seed)
    p = cfg.pretrain
    mixture = pretrain_mixture(cfg.model.seed, p.n_per_kind, cfg.task.max_len, p.held_out_letters)
    report = pretrain(model, mixture, p.build())
    save_checkpoint(out, base_checkpoint(model, cfg.model.seed))
    return report.to_dict()


def load_base(path: str | Path, cfg: RunConfig | None = None) -> Model:
    model = model_from_checkpoint(load_checkpoint(path))
    if cfg is not None and model.config.dims != cfg.dims:
        raise DimensionError(f"base checkpoint dims {model.config.dims} do not match config dims {cfg.dims}")
    return model


def load_adapted(base_path, adapter_path, cfg: RunConfig | None = None) -> Model:
    base = load_base(base_path, cfg)
    params, config = adapter_from_checkpoint(load_checkpoint(adapter_path))
    return attach_adapter(base, params, config)


def cmd_train(cfg: RunConfig, base_path: str | Path, out: str | Path) -> dict:
    """Train a fresh adapter on the configured task; writes ``out`` and ``out``.report.json."""
    model = load_base(base_path, cfg)
    config = cfg.adapter.build(cfg.dims)
    adapted = attach_adapter(model, init_adapter(config), config)
    report = train(adapted, task_dataset(cfg), cfg.train.build())
    params, _ = adapted.adapter
    save_checkpoint(out, adapter_checkpoint(params, config))
    summary = report.to_dict()
    Path(f"{out}.report.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_eval(cfg: RunConfig, base_path, adapter_path=None, metric: str | None = None) -> float:
    model = load_adapted(base_path, adapter_path, cfg) if adapter_path else load_base(base_path, cfg)
    return evaluate(model, task_dataset(cfg), metric=metric)


def merge_equivalence_error(adapted: Model, merged: Model, n_sequences: int = 32, seed: int = 0) -> float:
    cfg = adapted.config
    rng = np.random.default_rng(seed)
    T = min(cfg.max_seq_len, 16)
    tokens = rng.integers(0, cfg.vocab_size, size=(n_sequences, T))
    return nk.relative_error(forward(adapted, tokens).data, forward(merged, tokens).data)


def cmd_merge(cfg: RunConfig | None, base_path, adapter_path, out) -> float:
    """Fold the adapter into the base; refuses to write if logits disagree beyond 1e-9."""
    adapted = load_adapted(base_path, adapter_path, cfg)
    merged = merged_model(adapted)
    err = merge_equivalence_error(adapted, merged)
    if not err <= MERGE_TOLERANCE:
        raise VerificationError(f"merged model deviates from adapter forward by {err:.3e} (> {MERGE_TOLERANCE})")
    seed = load_checkpoint(base_path).meta.get("seed", 0)
    save_checkpoint(out, base_checkpoint(merged, seed))
    return err


def randomize_adapter(params, seed: int, scale: float = 0.5) -> None:
    """Fill every stored component with random values so no gradient is trivially zero."""
    rng = np.random.default_rng(seed)
    for _, t in params.named_tensors():
        t.assign(scale * rng.normal(size=t.shape))


def gradcheck_model(mode, d=8, L=2, r=2, seed=0) -> tuple[Model, object]:
    tcfg = TransformerConfig(ModelDims(d, L), n_heads=2, vocab_size=13, max_seq_len=10)
    model = build_model(tcfg, seed)
    rng = np.random.default_rng(seed + 1)
    for _, t in model.base.named_tensors():
        t.assign(t.data + 0.2 * rng.normal(size=t.shape))
    config = TiedLoraConfig(mode, r, ModelDims(d, L), init_seed=seed)
    params = init_adapter(config)
    randomize_adapter(params, seed + 2)
    adapted = attach_adapter(model, params, config)
    tokens = np.random.default_rng(seed + 3).integers(2, 13, size=(3, 7))
    mask = np.ones_like(tokens, dtype=bool)
    mask[:, :2] = False
    batch = Batch(tokens, np.roll(tokens, -1, axis=1), mask)
    return adapted, batch


def cmd_gradcheck(mode: str, d: int = 8, L: int = 2, r: int = 2, seed: int = 0, eps: float = 1e-5) -> float:
    """Max relative backprop/finite-difference gap on a small random instance."""
    adapted, batch = gradcheck_model(TiedLoraMode.parse(mode), d, L, r, seed)
    return grad_check(adapted, batch, eps)


# ---------------------------------------------------------------------------
# sweep

SWEEP_HEADER = (
    "mode",
    "r",
    "seed",
    "lr",
    "trainable_count",
    "fraction_of_lora",
    "best_val_loss",
    "test_score",
    "steps",
    "error",
)
SUMMARY_HEADER = ("mode", "r", "n", "fraction_of_lora", "mean_best_val_loss", "mean_test_score")


@dataclass(frozen=True)
class SweepCell:
    mode: str
    r: int
    seed: int


@dataclass
class CellResult:
    mode: str
    r: int
    seed: int
    lr: float | None
    trainable_count: int
    fraction_of_lora: float
    best_val_loss: float | None
    test_score: float | None
    steps: int | None
    error: str
    wall_time: float

    def row(self) -> tuple:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return (
            self.mode,
            self.r,
            self.seed,
            fmt(self.lr),
            self.trainable_count,
            repr(self.fraction_of_lora),
            fmt(self.best_val_loss),
            fmt(self.test_score),
            "" if self.steps is None else self.steps,
            self.error,
        )


def run_cell(cfg: RunConfig, base_path: str, cell: SweepCell) -> CellResult:
    """Train one (mode, r, seed) cell at every configured lr; keep the lr with the best val loss."""
    started = time.perf_counter()
    dims = cfg.dims
    config = TiedLoraConfig(
        cell.mode, cell.r, dims, alpha=cfg.adapter.alpha, init_seed=cell.seed,
        init_std=cfg.adapter.init_std, zero_start_override=cfg.adapter.zero_start_override,
    )
    count, frac = count_trainable(config), fraction_of_lora(config)
    best = None
    try:
        dataset = task_dataset(cfg)
        for lr in cfg.sweep.lrs:
            model = load_base(base_path, cfg)
            adapted = attach_adapter(model, init_adapter(config), config)
            report = train(adapted, dataset, cfg.train.build(base_lr=lr, seed=cell.seed))
            if best is None or report.best_val_loss < best[1].best_val_loss:
                best = (lr, report, evaluate(adapted, dataset))
    except Exception as exc:  # recorded in-row; the sweep keeps going
        log.warning("cell %s failed: %s", cell, exc)
        return CellResult(cell.mode, cell.r, cell.seed, None, count, frac, None, None, None,
                          f"{type(exc).__name__}: {exc}".replace("\n", " "), time.perf_counter() - started)
    lr, report, score = best
    return CellResult(cell.mode, cell.r, cell.seed, lr, count, frac, report.best_val_loss, score,
                      report.steps_run, "", time.perf_counter() - started)


def _run_cell_args(args):
    return run_cell(*args)


def sweep_cells(cfg: RunConfig) -> list[SweepCell]:
    s = cfg.sweep
    return [SweepCell(m, r, seed) for m in s.modes for r in s.ranks for seed in s.seeds]


def summarize(results: Sequence[CellResult]) -> list[tuple]:
    groups: dict[tuple[str, int], list[CellResult]] = {}
    for res in results:
        groups.setdefault((res.mode, res.r), []).append(res)
    rows = []
    for (mode, r), items in groups.items():
        ok = [x for x in items if not x.error]
        rows.append((
            mode,
            r,
            len(ok),
            repr(items[0].fraction_of_lora),
            repr(mean(x.best_val_loss for x in ok)) if ok else "",
            repr(mean(x.test_score for x in ok)) if ok else "",
        ))
    return rows


def cmd_sweep(cfg: RunConfig, base_path: str | Path, out: str | Path) -> list[CellResult]:
    """Run the rank × mode × seed grid and write ``out`` (one row per cell).

    A per-(mode, r) summary goes to ``<out stem>.summary.csv`` and wall times
    to ``<out stem>.timing.csv``; the main CSV holds only reproducible values.
    """
    cells = sweep_cells(cfg)
    if not cells:
        raise ValidationError("sweep grid is empty")
    if not Path(base_path).exists():
        raise ValidationError(f"base checkpoint {base_path} does not exist")
    args = [(cfg, str(base_path), c) for c in cells]
    if cfg.sweep.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.sweep.workers) as pool:
            results = list(pool.map(_run_cell_args, args))
    else:
        results = [run_cell(*a) for a in args]
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_csv_text(SWEEP_HEADER, [r.row() for r in results]))
    stem = out.with_suffix("")
    Path(f"{stem}.summary.csv").write_text(_csv_text(SUMMARY_HEADER, summarize(results)))
    Path(f"{stem}.timing.csv").write_text(
        _csv_text(("mode", "r", "seed", "wall_time"), [(r.mode, r.r, r.seed, f"{r.wall_time:.3f}") for r in results])
    )
    return results
