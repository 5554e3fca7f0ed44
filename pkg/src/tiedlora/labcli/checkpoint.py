"""Single-file checkpoints: a JSON manifest followed by a raw float64 payload.

Layout::

    b"TLORACK1"                  8-byte magic
    <u8 little-endian>           manifest length in bytes
    manifest                     UTF-8 JSON, sorted keys, no whitespace
    payload                      little-endian float64, row-major, manifest order

Each tensor entry records ``name``, ``shape``, ``offset`` and ``length``
(bytes, relative to the payload start).  Encoding is canonical, so
load → save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numkit as nk
from ..adapter import AdapterParams, ModelDims, TiedLoraConfig, TiedLoraMode
from ..errors import ValidationError
from ..nanoformer import Model, TransformerConfig, base_from_tensors, base_shapes

MAGIC = b"TLORACK1"
FORMAT_VERSION = 1


class CheckpointError(ValidationError):
    pass


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def manifest(self) -> dict:
        table, offset = [], 0
        for name, arr in self.tensors.items():
            length = arr.size * 8
            table.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": length})
            offset += length
        return {"format_version": FORMAT_VERSION, "kind": self.kind, **self.meta, "tensors": table}

    def to_bytes(self) -> bytes:
        manifest = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode()
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.tensors.values())
        return MAGIC + struct.pack("<Q", len(manifest)) + manifest + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<Q", blob[8:16])
        manifest = json.loads(blob[16 : 16 + n])
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
        payload = blob[16 + n :]
        table = manifest.pop("tensors")
        if sum(e["length"] for e in table) != len(payload):
            raise CheckpointError("payload length does not match the tensor table")
        tensors = {}
        for e in table:
            raw = payload[e["offset"] : e["offset"] + e["length"]]
            tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
        kind = manifest.pop("kind")
        manifest.pop("format_version")
        return cls(kind, manifest, tensors)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(ckpt.to_bytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model <-> checkpoint


def _transformer_meta(cfg: TransformerConfig) -> dict:
    return {
        "d": cfg.d,
        "L": cfg.L,
        "n_heads": cfg.n_heads,
        "vocab_size": cfg.vocab_size,
        "max_seq_len": cfg.max_seq_len,
        "mlp_mult": cfg.mlp_mult,
    }


def base_checkpoint(model: Model, seed: int) -> Checkpoint:
    cfg = model.config
    meta = {
        "mode": None,
        "dims": {"d": cfg.d, "L": cfg.L},
        "r": None,
        "alpha": None,
        "seed": seed,
        "transformer": _transformer_meta(cfg),
    }
    return Checkpoint("base", meta, {n: t.data for n, t in model.base.named_tensors()})


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    if ckpt.kind != "base":
        raise CheckpointError(f"expected a base checkpoint, got kind {ckpt.kind!r}")
    t = ckpt.meta["transformer"]
    cfg = TransformerConfig(
        ModelDims(t["d"], t["L"]),
        n_heads=t["n_heads"],
        vocab_size=t["vocab_size"],
        max_seq_len=t["max_seq_len"],
        mlp_mult=t["mlp_mult"],
    )
    shapes = base_shapes(cfg)
    if set(shapes) != set(ckpt.tensors):
        raise CheckpointError("base checkpoint tensor names do not match the transformer config")
    for name, shape in shapes.items():
        if ckpt.tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name} has shape {ckpt.tensors[name].shape}, expected {shape}")
    tensors = {name: nk.Tensor(ckpt.tensors[name], name=name) for name in shapes}
    return Model(cfg, base_from_tensors(tensors, cfg.L))


def adapter_checkpoint(params: AdapterParams, config: TiedLoraConfig) -> Checkpoint:
    meta = {
        "mode": config.mode.value,
        "dims": {"d": config.dims.d, "L": config.dims.L},
        "r": config.r,
        "alpha": config.alpha,
        "seed": config.init_seed,
        "init_std": config.init_std,
        "zero_start_override": config.zero_start_override,
    }
    return Checkpoint("adapter", meta, {n: t.data for n, t in params.named_tensors()})


def adapter_from_checkpoint(ckpt: Checkpoint) -> tuple[AdapterParams, TiedLoraConfig]:
    """Rebuild adapter params; tied components come back as one shared Tensor."""
    if ckpt.kind != "adapter":
        raise CheckpointError(f"expected an adapter checkpoint, got kind {ckpt.kind!r}")
    m = ckpt.meta
    config = TiedLoraConfig(
        mode=TiedLoraMode.parse(m["mode"]),
        r=m["r"],
        dims=ModelDims(m["dims"]["d"], m["dims"]["L"]),
        alpha=m["alpha"],
        init_seed=m["seed"],
        init_std=m["init_std"],
        zero_start_override=m["zero_start_override"],
    )
    spec, L = config.spec, config.dims.L

    def tensor(name: str, train: bool) -> nk.Tensor:
        if name not in ckpt.tensors:
            raise CheckpointError(f"adapter checkpoint is missing tensor {name!r}")
        return nk.Tensor(ckpt.tensors[name], requires_grad=train, name=name)

    def matrices(comp: str, tied: bool, train: bool) -> list[nk.Tensor]:
        if tied:
            return [tensor(comp, train)] * L
        return [tensor(f"{comp}.{i}", train) for i in range(L)]

    params = AdapterParams(
        A=matrices("A", spec.tie_A, spec.train_A),
        B=matrices("B", spec.tie_B, spec.train_B),
        u=[tensor(f"u.{i}", True) for i in range(L)] if spec.train_u else None,
        v=[tensor(f"v.{i}", True) for i in range(L)] if spec.train_v else None,
        trainable={"A": spec.train_A, "B": spec.train_B, "u": spec.train_u, "v": spec.train_v},
        tied={"A": spec.tie_A, "B": spec.tie_B},
    )
    expected = [n for n, _ in params.named_tensors()]
    if expected != list(ckpt.tensors):
        raise CheckpointError(f"adapter tensors {list(ckpt.tensors)} do not match mode layout {expected}")
    return params, config
