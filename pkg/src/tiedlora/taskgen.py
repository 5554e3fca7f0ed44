"""Synthetic sequence tasks and the teacher–student update-recovery probe.

All tasks share one 32-symbol character vocabulary so a single pretrained
base can serve every family:

    _ pad   $ end-of-sequence   | copy separator   < reverse separator
    + =     0-9                 a-p

Each example is ``input`` (including its separator) and ``target``; the
training sequence is ``input + target + $``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numkit as nk
from .errors import DimensionError, GenerationError, ValidationError
from .nanoformer import Model, forward, generate_batch

LETTERS = "abcdefghijklmnop"
DIGITS = "0123456789"


@dataclass(frozen=True)
class Vocabulary:
    symbols: str = "_$|<+=" + DIGITS + LETTERS
    pad: str = "_"
    eos: str = "$"

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValidationError("vocabulary symbols must be unique")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return self.symbols.index(self.pad)

    @property
    def eos_id(self) -> int:
        return self.symbols.index(self.eos)

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self.symbols.index(ch) for ch in text)
        except ValueError:
            bad = sorted(set(text) - set(self.symbols))
            raise ValidationError(f"characters {bad} are not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in ids)


VOCAB = Vocabulary()

SEPARATORS = {"copy": "|", "reverse": "<"}
TASK_KINDS = ("copy", "reverse", "modadd")


@dataclass(frozen=True)
class Example:
    input: tuple[int, ...]
    target: tuple[int, ...]


@dataclass
class TaskDataset:
    name: str
    vocab: Vocabulary
    train: list[Example]
    val: list[Example]
    test: list[Example]
    metric: str = "exact_match"

    def split(self, name: str) -> list[Example]:
        if name not in ("train", "val", "test"):
            raise ValidationError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def max_sequence_len(self) -> int:
        return max(len(e.input) + len(e.target) + 1 for e in self.train + self.val + self.test)

    def to_lines(self, split: str) -> list[str]:
        """Records as ``input<TAB>target`` text lines."""
        return [f"{self.vocab.decode(e.input)}\t{self.vocab.decode(e.target)}" for e in self.split(split)]

    @classmethod
    def from_lines(cls, name: str, splits: dict[str, Sequence[str]], vocab: Vocabulary = VOCAB, metric: str = "exact_match"):
        parsed = {}
        for split in ("train", "val", "test"):
            rows = []
            for line in splits.get(split, ()):
                inp, tgt = line.rstrip("\n").split("\t")
                rows.append(Example(vocab.encode(inp), vocab.encode(tgt)))
            parsed[split] = rows
        return cls(name=name, vocab=vocab, metric=metric, **parsed)


def _render(kind: str, payload) -> tuple[str, str]:
    if kind == "modadd":
        a, b = payload
        return f"{a}+{b}=", str((a + b) % 100)
    sep = SEPARATORS[kind]
    target = payload if kind == "copy" else payload[::-1]
    return payload + sep, target


def _space_size(kind: str, k: int, min_len: int, max_len: int) -> int:
    if kind == "modadd":
        return 100 * 100
    return sum(k**n for n in range(min_len, max_len + 1))


def gen_seq_task(
    kind: str,
    seed: int,
    n_train: int,
    n_val: int,
    n_test: int,
    max_len: int,
    *,
    alphabet: str = LETTERS,
    min_len: int = 1,
    max_seq_len: int | None = None,
    vocab: Vocabulary = VOCAB,
    name: str | None = None,
) -> TaskDataset:
    """Generate a copy, reverse or modular-addition task with disjoint splits.

    Inputs are distinct across all three splits.  For ``modadd`` the operands
    are drawn from 0..99 and ``max_len`` only enters the sequence-length check.
    """
    if kind not in TASK_KINDS:
        raise ValidationError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    if max_len < 1 or min_len < 1 or min_len > max_len:
        raise ValidationError(f"invalid length range [{min_len}, {max_len}]")
    if max_seq_len is not None and 2 * max_len + 2 > max_seq_len:
        raise ValidationError(f"max_len={max_len} needs max_seq_len >= {2 * max_len + 2}, got {max_seq_len}")
    if kind != "modadd":
        vocab.encode(alphabet)
    n_total = n_train + n_val + n_test
    if min(n_train, n_val, n_test) < 0 or n_total == 0:
        raise ValidationError("split sizes must be non-negative and not all zero")
    if _space_size(kind, len(alphabet), min_len, max_len) < n_total:
        raise GenerationError(f"only {_space_size(kind, len(alphabet), min_len, max_len)} distinct {kind} inputs exist; {n_total} requested")

    rng = np.random.default_rng(seed)
    seen: set = set()
    payloads = []
    attempts, limit = 0, 100 * n_total + 10_000
    while len(payloads) < n_total:
        attempts += 1
        if attempts > limit:
            raise GenerationError(f"could not draw {n_total} distinct {kind} inputs after {limit} attempts")
        if kind == "modadd":
            item = tuple(int(x) for x in rng.integers(0, 100, size=2))
        else:
            n = int(rng.integers(min_len, max_len + 1))
            item = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=n))
        if item in seen:
            continue
        seen.add(item)
        payloads.append(item)

    examples = [Example(*(vocab.encode(s) for s in _render(kind, p))) for p in payloads]
    return TaskDataset(
        name=name or kind,
        vocab=vocab,
        train=examples[:n_train],
        val=examples[n_train : n_train + n_val],
        test=examples[n_train + n_val :],
    )


def pretrain_mixture(seed: int, n_per_kind: int, max_len: int, held_out_letters: int = 8) -> TaskDataset:
    """Family mixture for base pretraining.

    Copy is shown only over the first ``len(LETTERS) - held_out_letters``
    letters, so copy over the full alphabet stays a held-out variant.
    """
    seen_letters = LETTERS[: len(LETTERS) - held_out_letters]
    parts = [
        gen_seq_task("copy", seed, n_per_kind, n_per_kind // 8, 0, max_len, alphabet=seen_letters),
        gen_seq_task("reverse", seed + 1, n_per_kind, n_per_kind // 8, 0, max_len),
        gen_seq_task("modadd", seed + 2, n_per_kind, n_per_kind // 8, 0, max_len),
    ]
    rng = np.random.default_rng(seed)
    train = [e for p in parts for e in p.train]
    val = [e for p in parts for e in p.val]
    order = rng.permutation(len(train))
    return TaskDataset("mixture", VOCAB, [train[i] for i in order], val, [], metric="token_accuracy")


# ---------------------------------------------------------------------------
# batching and scoring


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @property
    def n_positions(self) -> int:
        return int(self.mask.sum())


def encode_batch(examples: Sequence[Example], vocab: Vocabulary) -> Batch:
    """Right-padded next-token batch; loss positions cover target and eos."""
    if not examples:
        raise ValidationError("cannot build a batch from zero examples")
    seqs = [e.input + e.target + (vocab.eos_id,) for e in examples]
    T = max(len(s) for s in seqs) - 1
    tokens = np.full((len(seqs), T), vocab.pad_id, dtype=np.int64)
    targets = np.full((len(seqs), T), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, (e, s) in enumerate(zip(examples, seqs)):
        n = len(s) - 1
        tokens[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        mask[i, len(e.input) - 1 : n] = True
    return Batch(tokens, targets, mask)


def sequence_loss(model: Model, batch: Batch) -> nk.Tensor:
    logits = forward(model, batch.tokens)
    nb, T, V = logits.shape
    return nk.softmax_ce(nk.reshape(logits, (nb * T, V)), batch.targets.reshape(-1), batch.mask.reshape(-1))


def score_predictions(predictions: Sequence[Sequence[int]], targets: Sequence[Sequence[int]], metric: str) -> float:
    """``exact_match`` fraction, or pooled per-position ``token_accuracy``."""
    if len(predictions) != len(targets):
        raise DimensionError(f"{len(predictions)} predictions for {len(targets)} targets")
    if not targets:
        return 0.0
    if metric == "exact_match":
        return sum(list(p) == list(t) for p, t in zip(predictions, targets)) / len(targets)
    if metric == "token_accuracy":
        hits = sum(sum(1 for a, b in zip(p, t) if a == b) for p, t in zip(predictions, targets))
        return hits / sum(len(t) for t in targets)
    raise ValidationError(f"unknown metric {metric!r}")


def predict(model: Model, examples: Sequence[Example], vocab: Vocabulary, max_new_tokens: int | None = None) -> list[list[int]]:
    """Greedy predictions (eos stripped), batched over equal-length inputs."""
    out: list[list[int] | None] = [None] * len(examples)
    groups: dict[int, list[int]] = {}
    for i, e in enumerate(examples):
        groups.setdefault(len(e.input), []).append(i)
    for _, idx in sorted(groups.items()):
        budget = max_new_tokens
        if budget is None:
            budget = max(len(examples[i].target) for i in idx) + 1
        gen = generate_batch(model, [examples[i].input for i in idx], budget, eos_id=vocab.eos_id)
        for i, g in zip(idx, gen):
            out[i] = g[:-1] if g and g[-1] == vocab.eos_id else g
    return out  # type: ignore[return-value]


def evaluate(
    model: Model, dataset: TaskDataset, max_new_tokens: int | None = None, *, split: str = "test", metric: str | None = None
) -> float:
    """Score greedy generations on ``split`` with the dataset's metric."""
    if model.config.vocab_size < dataset.vocab.size:
        raise ValidationError("model vocabulary is smaller than the dataset vocabulary")
    examples = dataset.split(split)
    preds = predict(model, examples, dataset.vocab, max_new_tokens)
    return score_predictions(preds, [e.target for e in examples], metric or dataset.metric)


# ---------------------------------------------------------------------------
# teacher–student probe


@dataclass
class TeacherSpec:
    base: Model
    deltas: list[np.ndarray]
    r_true: int
    seed: int
    probe_size: int = 64
    factors: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)


def make_teacher(base: Model, r_true: int, seed: int, probe_size: int = 64) -> tuple[TeacherSpec, Model]:
    """Copy ``base`` and add a random rank-``r_true`` update to every QKV matrix.

    Factor entries are Normal with standard deviation ``1/sqrt(d * r_true)``.
    """
    if r_true < 1:
        raise ValidationError(f"r_true must be >= 1, got {r_true}")
    d = base.config.d
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(d * r_true)
    weights = base.base.copy()
    deltas, factors = [], []
    for layer in weights.layers:
        P = rng.normal(0.0, std, size=(3 * d, r_true))
        Q = rng.normal(0.0, std, size=(r_true, d))
        delta = P @ Q
        layer.qkv = nk.Tensor(layer.qkv.data + delta, name=layer.qkv.name)
        deltas.append(delta)
        factors.append((P, Q))
    weights.set_trainable(False)
    teacher = Model(base.config, weights, None)
    return TeacherSpec(base, deltas, r_true, seed, probe_size, factors), teacher


def probe_tokens(config, n: int, length: int, seed: int) -> np.ndarray:
    if length > config.max_seq_len:
        raise DimensionError(f"probe length {length} exceeds max_seq_len={config.max_seq_len}")
    return np.random.default_rng(seed).integers(0, config.vocab_size, size=(n, length))


def distill_loss(student: Model, teacher: Model, probe_batch) -> nk.Tensor:
    """Mean squared logit gap; the teacher side is a constant."""
    if student.config != teacher.config:
        raise DimensionError("student and teacher geometries differ")
    target = nk.Tensor(forward(teacher, probe_batch).data)
    diff = nk.sub(forward(student, probe_batch), target)
    return nk.mean(nk.mul(diff, diff))
