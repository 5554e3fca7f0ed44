"""AdamW with a warmup+cosine schedule, early stopping, and gradient checks."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .adapter import count_trainable, named_trainable_slots
from .errors import MaskError, NumericError, ValidationError, VerificationError
from .nanoformer import Model, forward
from .taskgen import Batch, TaskDataset, distill_loss, encode_batch, sequence_loss

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 2000
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 50
    batch_size: int = 32
    val_interval: int = 30
    patience: int = 10
    seed: int = 0
    # required val-loss decrease to count as an improvement
    min_delta: float = 0.0
    # cap on validation examples per check; None uses the whole split
    max_val_examples: int | None = 256

    def __post_init__(self):
        if self.max_steps < 1 or not 0 <= self.warmup_steps < self.max_steps:
            raise ValidationError(f"need 0 <= warmup_steps < max_steps, got {self.warmup_steps}, {self.max_steps}")
        if self.patience < 1 or self.val_interval < 1 or self.batch_size < 1:
            raise ValidationError("patience, val_interval and batch_size must be >= 1")
        if not self.base_lr > 0 or self.weight_decay < 0:
            raise ValidationError("base_lr must be positive and weight_decay non-negative")


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``max_steps``."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.max_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, slots: Sequence[nk.Tensor]) -> "AdamWState":
        return cls([np.zeros(t.shape) for t in slots], [np.zeros(t.shape) for t in slots])


def adamw_step(
    slots: Sequence[nk.Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
    names: Sequence[str] | None = None,
) -> int:
    """One bias-corrected Adam update with decoupled weight decay.

    Slots are updated via :meth:`Tensor.assign`; a missing gradient counts as
    zero.  Returns the number of scalars written.
    """
    if not (len(slots) == len(grads) == len(state.m) == len(state.v)):
        raise ValidationError("slots, grads and optimizer state are not aligned")
    names = names or [t.name or f"slot{i}" for i, t in enumerate(slots)]
    grads = [np.zeros(t.shape) if g is None else np.asarray(g) for t, g in zip(slots, grads)]
    for name, g in zip(names, grads):
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in slot {name!r} at optimizer step {state.step + 1}")
    state.step += 1
    c1 = 1.0 - BETA1**state.step
    c2 = 1.0 - BETA2**state.step
    touched = 0
    for i, (p, g) in enumerate(zip(slots, grads)):
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.assign(p.data - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + cfg.weight_decay * p.data))
        touched += p.size
    return touched


@dataclass
class ValRecord:
    step: int
    train_loss: float | None
    val_loss: float
    val_metric: float
    lr: float


@dataclass
class TrainReport:
    records: list[ValRecord]
    stop_reason: str
    best_step: int
    best_val_loss: float
    steps_run: int
    touched_per_step: int
    wall_time: float = field(default=0.0, compare=False)

    @property
    def init_val_loss(self) -> float:
        return self.records[0].val_loss

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def state_digest(tensors: Sequence[tuple[str, nk.Tensor]]) -> dict[str, str]:
    return {name: hashlib.sha256(t.data.tobytes()).hexdigest() for name, t in tensors}


def _val_stats(model: Model, examples, vocab, batch_size: int) -> tuple[float, float]:
    total_loss, hits, count = 0.0, 0, 0
    for start in range(0, len(examples), batch_size):
        batch = encode_batch(examples[start : start + batch_size], vocab)
        logits = forward(model, batch.tokens).data
        n = batch.n_positions
        nb, T, V = logits.shape
        total_loss += n * nk.softmax_ce(nk.Tensor._wrap(logits.reshape(nb * T, V), False), batch.targets.reshape(-1), batch.mask.reshape(-1)).item()
        hits += int(((logits.argmax(axis=-1) == batch.targets) & batch.mask).sum())
        count += n
    return total_loss / count, hits / count


def fit(
    model: Model,
    slots: Sequence[tuple[str, nk.Tensor]],
    dataset: TaskDataset,
    cfg: TrainConfig,
    frozen: Sequence[tuple[str, nk.Tensor]] = (),
) -> TrainReport:
    """Optimize ``slots`` on next-token loss with validation-based early stopping.

    The best-validation values are restored into the slots before returning.
    Every tensor in ``frozen`` is checked to be byte-identical afterwards.
    """
    if not dataset.train or not dataset.val:
        raise ValidationError(f"dataset {dataset.name!r} needs non-empty train and val splits")
    if not slots:
        raise ValidationError("nothing to train: no trainable slots")
    names = [n for n, _ in slots]
    tensors = [t for _, t in slots]
    frozen_before = state_digest(frozen)
    rng = np.random.default_rng(cfg.seed)
    val_examples = dataset.val[: cfg.max_val_examples] if cfg.max_val_examples else dataset.val
    state = AdamWState.zeros(tensors)
    started = time.perf_counter()

    def validate(step: int, train_loss: float | None, lr: float) -> ValRecord:
        loss, acc = _val_stats(model, val_examples, dataset.vocab, max(cfg.batch_size, 64))
        if not math.isfinite(loss):
            raise NumericError(f"non-finite validation loss at step {step}")
        return ValRecord(step, train_loss, loss, acc, lr)

    records = [validate(0, None, 0.0)]
    best_loss, best_step = records[0].val_loss, 0
    best_values = [t.data for t in tensors]
    stale, stop_reason, steps_run, touched = 0, "max-steps", 0, 0
    order, cursor = rng.permutation(len(dataset.train)), 0
    running, running_n = 0.0, 0

    for step in range(1, cfg.max_steps + 1):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(dataset.train)), 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        batch = encode_batch([dataset.train[i] for i in idx], dataset.vocab)
        for t in tensors:
            t.zero_grad()
        with nk.GradGraph() as graph:
            loss = sequence_loss(model, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite training loss at step {step}")
        nk.backward(graph, loss)
        lr = cosine_lr(step, cfg)
        touched = adamw_step(tensors, [t.grad for t in tensors], state, lr, cfg, names)
        running += value
        running_n += 1
        steps_run = step

        if step % cfg.val_interval == 0 or step == cfg.max_steps:
            rec = validate(step, running / running_n, lr)
            records.append(rec)
            running, running_n = 0.0, 0
            if rec.val_loss < best_loss - cfg.min_delta:
                best_loss, best_step, stale = rec.val_loss, step, 0
                best_values = [t.data for t in tensors]
            else:
                stale += 1
                if stale >= cfg.patience:
                    stop_reason = "early-stop"
                    break
    for t, arr in zip(tensors, best_values):
        t.assign(arr)
        t.zero_grad()

    if state_digest(frozen) != frozen_before:
        changed = [n for n, h in state_digest(frozen).items() if frozen_before[n] != h]
        raise VerificationError(f"frozen tensors changed during training: {changed}")
    report = TrainReport(
        records=records,
        stop_reason=stop_reason,
        best_step=best_step,
        best_val_loss=best_loss,
        steps_run=steps_run,
        touched_per_step=touched,
        wall_time=time.perf_counter() - started,
    )
    log.info("%s: stopped (%s) after %d steps, best val loss %.4f at step %d", dataset.name, stop_reason, steps_run, best_loss, best_step)
    return report


def frozen_tensors(model: Model) -> list[tuple[str, nk.Tensor]]:
    """Base weights plus every adapter component the mode does not train."""
    out = [(f"base.{n}", t) for n, t in model.base.named_tensors()]
    if model.adapter is not None:
        params, config = model.adapter
        out += [(f"adapter.{n}", t) for n, t in params.named_tensors() if not t.requires_grad]
    return out


def train(model: Model, dataset: TaskDataset, cfg: TrainConfig) -> TrainReport:
    """Train the attached adapter's trainable components; everything else stays frozen."""
    if model.adapter is None:
        raise ValidationError("train() needs a model with an attached adapter")
    params, config = model.adapter
    slots = named_trainable_slots(params, config)
    report = fit(model, slots, dataset, cfg, frozen=frozen_tensors(model))
    expected = count_trainable(config)
    if report.touched_per_step != expected:
        raise VerificationError(f"optimizer touched {report.touched_per_step} scalars, mode allows {expected}")
    return report


def pretrain(model: Model, dataset: TaskDataset, cfg: TrainConfig) -> TrainReport:
    """Full-parameter training of a bare base model."""
    if model.adapter is not None:
        raise ValidationError("pretrain() expects a model without an adapter")
    model.base.set_trainable(True)
    try:
        return fit(model, model.base.named_tensors(), dataset, cfg)
    finally:
        model.base.set_trainable(False)


def grad_check(model: Model, batch: Batch, eps: float = 1e-5, slots: Sequence[str] | None = None) -> float:
    """Worst relative gap between backprop and central differences over trainable slots.

    The gap for a slot is ``max|g_bp - g_fd| / max(max|g_bp|, max|g_fd|)``.
    """
    if model.adapter is None:
        raise ValidationError("grad_check needs a model with an attached adapter")
    params, config = model.adapter
    named = dict(named_trainable_slots(params, config))
    if slots is not None:
        stored = {n for n, _ in params.named_tensors()}
        for name in slots:
            if name not in stored:
                raise ValidationError(f"unknown adapter slot {name!r}")
            if name not in named:
                raise MaskError(f"slot {name!r} is frozen in mode {config.mode.value}")
        named = {n: named[n] for n in slots}
    for t in named.values():
        t.zero_grad()
    with nk.GradGraph() as graph:
        loss = sequence_loss(model, batch)
    nk.backward(graph, loss)
    worst = 0.0
    for t in named.values():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        numeric = nk.finite_diff_grad(lambda _: sequence_loss(model, batch), t, eps)
        worst = max(worst, nk.relative_error(analytic, numeric.data))
        t.zero_grad()
    return worst


def train_distill(student: Model, teacher: Model, probes: np.ndarray, steps: int, lr: float, seed: int = 0) -> float:
    """Fit the student's adapter to teacher logits on a fixed probe set.

    Constant learning rate, no weight decay; returns the final probe loss.
    """
    if student.adapter is None:
        raise ValidationError("student needs an attached adapter")
    params, config = student.adapter
    named = named_trainable_slots(params, config)
    tensors = [t for _, t in named]
    cfg = TrainConfig(max_steps=max(steps, 1), base_lr=lr, weight_decay=0.0, warmup_steps=0, seed=seed)
    state = AdamWState.zeros(tensors)
    for _ in range(steps):
        for t in tensors:
            t.zero_grad()
        with nk.GradGraph() as graph:
            loss = distill_loss(student, teacher, probes)
        nk.backward(graph, loss)
        adamw_step(tensors, [t.grad for t in tensors], state, lr, cfg, [n for n, _ in named])
    return distill_loss(student, teacher, probes).item()
