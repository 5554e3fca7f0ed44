"""Tied low-rank adapters for the fused QKV projection.

Every layer's QKV output is ``W x + (alpha/r) * v * (B @ (u * (A @ x)))``
where ``A`` is r×d, ``B`` is 3d×r and ``u``/``v`` are per-layer scaling
vectors.  The eight modes choose which of the four components are trained
and whether ``A``/``B`` are shared by all layers.

A tied component is a single :class:`~tiedlora.numkit.Tensor` referenced by
every layer, so its gradient is summed across layers by the autodiff pass
without further bookkeeping.  Scaling vectors frozen at one are not stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import numkit as nk
from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class ModelDims:
    d: int
    L: int

    def __post_init__(self):
        if int(self.d) < 1 or int(self.L) < 1:
            raise ValidationError(f"ModelDims needs d >= 1 and L >= 1, got d={self.d}, L={self.L}")


class TiedLoraMode(str, Enum):
    LORA = "LORA"
    TAB = "TAB"
    TABUV = "TABUV"
    TBU = "TBU"
    TB = "TB"
    TAUV = "TAUV"
    TA = "TA"
    TUV = "TUV"

    @classmethod
    def parse(cls, name: "str | TiedLoraMode") -> "TiedLoraMode":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).upper())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValidationError(f"unknown mode {name!r}; expected one of {valid}") from None


@dataclass(frozen=True)
class ModeSpec:
    train_A: bool
    train_B: bool
    train_u: bool
    train_v: bool
    tie_A: bool
    tie_B: bool
    # component initialised to exactly zero ("B", "v" or None)
    zero: str | None


MODES: dict[TiedLoraMode, ModeSpec] = {
    TiedLoraMode.LORA: ModeSpec(True, True, False, False, False, False, "B"),
    TiedLoraMode.TAB: ModeSpec(True, True, False, False, True, True, "B"),
    TiedLoraMode.TABUV: ModeSpec(True, True, True, True, True, True, "v"),
    TiedLoraMode.TBU: ModeSpec(False, True, True, False, True, True, None),
    TiedLoraMode.TB: ModeSpec(False, True, False, False, True, True, None),
    TiedLoraMode.TAUV: ModeSpec(True, False, True, True, True, True, "v"),
    TiedLoraMode.TA: ModeSpec(True, False, False, False, True, True, None),
    TiedLoraMode.TUV: ModeSpec(False, False, True, True, True, True, "v"),
}

ZERO_START_MODES = tuple(m for m, s in MODES.items() if s.zero is not None)


@dataclass(frozen=True)
class TiedLoraConfig:
    """Adapter hyper-parameters.

    ``alpha`` defaults to ``r`` and ``init_std`` to ``1/sqrt(d)``.
    ``zero_start_override`` forces an exact-zero start for the modes whose
    default initialization perturbs the base model (TB, TBU: B=0; TA: A=0).
    """

    mode: TiedLoraMode
    r: int
    dims: ModelDims
    alpha: float | None = None
    init_seed: int = 0
    init_std: float | None = None
    zero_start_override: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", TiedLoraMode.parse(self.mode))
        if int(self.r) < 1:
            raise ValidationError(f"rank r must be >= 1, got {self.r}")
        object.__setattr__(self, "r", int(self.r))
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(self.r))
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if self.init_std is None:
            object.__setattr__(self, "init_std", 1.0 / math.sqrt(self.dims.d))

    @property
    def spec(self) -> ModeSpec:
        return MODES[self.mode]

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


@dataclass
class AdapterParams:
    """Per-layer views of the adapter components.

    ``A`` and ``B`` always have L entries; tied components repeat the same
    Tensor object.  ``u``/``v`` are None when frozen at the all-ones vector.
    """

    A: list[nk.Tensor]
    B: list[nk.Tensor]
    u: list[nk.Tensor] | None = None
    v: list[nk.Tensor] | None = None
    trainable: dict[str, bool] = field(default_factory=dict)
    tied: dict[str, bool] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.A)

    def named_tensors(self) -> list[tuple[str, nk.Tensor]]:
        """Every stored tensor once, in slot order: A, B, then u/v per layer."""
        out: list[tuple[str, nk.Tensor]] = []
        for comp in ("A", "B"):
            items = getattr(self, comp)
            if self.tied[comp]:
                out.append((comp, items[0]))
            else:
                out.extend((f"{comp}.{i}", t) for i, t in enumerate(items))
        for i in range(self.n_layers):
            if self.u is not None:
                out.append((f"u.{i}", self.u[i]))
            if self.v is not None:
                out.append((f"v.{i}", self.v[i]))
        return out


def count_trainable(config: TiedLoraConfig) -> int:
    """Closed-form number of trained scalars for ``config.mode``."""
    d, L, r = config.dims.d, config.dims.L, config.r
    mode = config.mode
    if mode is TiedLoraMode.LORA:
        return 4 * L * d * r
    if mode is TiedLoraMode.TAB:
        return 4 * d * r
    if mode is TiedLoraMode.TABUV:
        return 4 * d * r + L * (r + 3 * d)
    if mode is TiedLoraMode.TBU:
        return (L + 3 * d) * r
    if mode is TiedLoraMode.TB:
        return 3 * d * r
    if mode is TiedLoraMode.TAUV:
        return d * r + L * (r + 3 * d)
    if mode is TiedLoraMode.TA:
        return d * r
    return L * (r + 3 * d)


def fraction_of_lora(config: TiedLoraConfig) -> float:
    lora = TiedLoraConfig(TiedLoraMode.LORA, config.r, config.dims)
    return count_trainable(config) / count_trainable(lora)


def init_adapter(config: TiedLoraConfig) -> AdapterParams:
    """Draw initial adapter components deterministically from ``init_seed``.

    Draw order is fixed (all A instances, then all B instances) so the same
    seed always yields the same arrays.
    """
    spec = config.spec
    d, L, r = config.dims.d, config.dims.L, config.r
    rng = np.random.default_rng(config.init_seed)
    zero = spec.zero
    if zero is None and config.zero_start_override:
        zero = "A" if config.mode is TiedLoraMode.TA else "B"

    def build(comp: str, shape: tuple[int, int], tied: bool, train: bool) -> list[nk.Tensor]:
        n = 1 if tied else L
        out = []
        for i in range(n):
            arr = rng.normal(0.0, config.init_std, size=shape)
            if zero == comp:
                arr = np.zeros(shape)
            out.append(nk.Tensor(arr, requires_grad=train, name=comp if tied else f"{comp}.{i}"))
        return out * L if tied else out

    A = build("A", (r, d), spec.tie_A, spec.train_A)
    B = build("B", (3 * d, r), spec.tie_B, spec.train_B)
    u = [nk.Tensor(np.ones(r), requires_grad=True, name=f"u.{i}") for i in range(L)] if spec.train_u else None
    v_fill = 0.0 if zero == "v" else 1.0
    v = (
        [nk.Tensor(np.full(3 * d, v_fill), requires_grad=True, name=f"v.{i}") for i in range(L)]
        if spec.train_v
        else None
    )
    trainable = {"A": spec.train_A, "B": spec.train_B, "u": spec.train_u, "v": spec.train_v}
    tied = {"A": spec.tie_A, "B": spec.tie_B}
    return AdapterParams(A=A, B=B, u=u, v=v, trainable=trainable, tied=tied)


def validate_params(params: AdapterParams, config: TiedLoraConfig) -> None:
    """Reject params whose tensor shapes or tying disagree with ``config``."""
    d, L, r = config.dims.d, config.dims.L, config.r
    spec = config.spec
    expected = {"A": (r, d), "B": (3 * d, r)}
    for comp, tied in (("A", spec.tie_A), ("B", spec.tie_B)):
        items = getattr(params, comp)
        if len(items) != L:
            raise DimensionError(f"{comp} has {len(items)} layer entries, config says L={L}")
        for t in items:
            if t.shape != expected[comp]:
                raise DimensionError(f"{comp} has shape {t.shape}, config (d={d}, r={r}) needs {expected[comp]}")
        if params.tied.get(comp) != tied:
            raise ValidationError(f"{comp} tying does not match mode {config.mode.value}")
        if tied and any(t is not items[0] for t in items):
            raise ValidationError(f"{comp} must be a single instance shared by all layers in mode {config.mode.value}")
    for comp, length, train in (("u", r, spec.train_u), ("v", 3 * d, spec.train_v)):
        items = getattr(params, comp)
        if (items is not None) != train:
            raise ValidationError(f"{comp} storage does not match mode {config.mode.value}")
        if items is not None:
            if len(items) != L or any(t.shape != (length,) for t in items):
                raise DimensionError(f"{comp} vectors must be {L} × ({length},)")


def _check_layer(config: TiedLoraConfig, layer: int) -> None:
    if not 0 <= layer < config.dims.L:
        raise DimensionError(f"layer {layer} out of range for L={config.dims.L}")


def adapter_delta(params: AdapterParams, config: TiedLoraConfig, layer: int) -> np.ndarray:
    """Materialized 3d×d update ``(alpha/r) diag(v) B diag(u) A`` for one layer."""
    _check_layer(config, layer)
    A = params.A[layer].data
    B = params.B[layer].data
    if params.u is not None:
        A = params.u[layer].data[:, None] * A
    if params.v is not None:
        B = params.v[layer].data[:, None] * B
    return config.scaling * (B @ A)


def adapter_forward(
    params: AdapterParams, config: TiedLoraConfig, layer: int, W: nk.Tensor, x: nk.Tensor
) -> nk.Tensor:
    """``W x`` plus the low-rank path, without forming the 3d×d update.

    ``x`` is a length-d vector or a d×N matrix of column vectors.
    """
    _check_layer(config, layer)
    d = config.dims.d
    if W.shape != (3 * d, d) or x.shape[0] != d:
        raise DimensionError(f"adapter_forward expects W (3d×d)=({3 * d}, {d}) and x with {d} rows, got {W.shape}, {x.shape}")
    h = nk.matmul(params.A[layer], x)
    if params.u is not None:
        h = nk.scale_rows(params.u[layer], h)
    h = nk.matmul(params.B[layer], h)
    if params.v is not None:
        h = nk.scale_rows(params.v[layer], h)
    if config.scaling != 1.0:
        h = nk.scale(h, config.scaling)
    return nk.add(nk.matmul(W, x), h)


def merge(params: AdapterParams, config: TiedLoraConfig, base: Sequence) -> list[np.ndarray]:
    """Return new per-layer weights ``base[l] + delta_l``; ``base`` is not modified."""
    L, d = config.dims.L, config.dims.d
    if len(base) != L:
        raise DimensionError(f"merge got {len(base)} base matrices for L={L}")
    merged = []
    for layer, W in enumerate(base):
        W = W.data if isinstance(W, nk.Tensor) else np.asarray(W, dtype=np.float64)
        if W.shape != (3 * d, d):
            raise DimensionError(f"base matrix {layer} has shape {W.shape}, expected {(3 * d, d)}")
        merged.append(W + adapter_delta(params, config, layer))
    return merged


def tied_grad_accumulate(per_layer_grads: Sequence[np.ndarray], tied: bool) -> list[np.ndarray]:
    """Combine per-layer gradient contributions for a possibly tied component."""
    grads = [np.asarray(g, dtype=np.float64) for g in per_layer_grads]
    if not grads:
        raise DimensionError("no per-layer gradients given")
    if any(g.shape != grads[0].shape for g in grads):
        raise DimensionError(f"per-layer gradient shapes disagree: {[g.shape for g in grads]}")
    if not tied:
        return [g.copy() for g in grads]
    total = np.zeros_like(grads[0])
    for g in grads:
        total = total + g
    return [total]


def named_trainable_slots(params: AdapterParams, config: TiedLoraConfig) -> list[tuple[str, nk.Tensor]]:
    return [(name, t) for name, t in params.named_tensors() if params.trainable[name.split(".")[0]]]


def trainable_slots(params: AdapterParams, config: TiedLoraConfig) -> list[nk.Tensor]:
    """Trained tensors in fixed order: A (A.0..), B (B.0..), then u.i, v.i per layer."""
    return [t for _, t in named_trainable_slots(params, config)]


def frozen_slots(params: AdapterParams, config: TiedLoraConfig) -> list[tuple[str, nk.Tensor]]:
    return [(name, t) for name, t in params.named_tensors() if not params.trainable[name.split(".")[0]]]
