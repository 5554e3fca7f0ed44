"""A tiny pre-norm decoder-only transformer with a fused QKV projection.

Linear weights are stored output×input and act on column vectors, so a
row-batch ``X`` (N×d) is projected as ``X @ W.T``.  The fused QKV matrix is
the only place an adapter is injected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .adapter import AdapterParams, ModelDims, TiedLoraConfig, adapter_forward, merge, validate_params
from .errors import DimensionError, GenerationError, ValidationError


@dataclass(frozen=True)
class TransformerConfig:
    dims: ModelDims
    n_heads: int
    vocab_size: int
    max_seq_len: int
    mlp_mult: int = 4

    def __post_init__(self):
        if self.n_heads < 1 or self.dims.d % self.n_heads:
            raise ValidationError(f"hidden size {self.dims.d} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 1 or self.mlp_mult < 1:
            raise ValidationError("vocab_size and mlp_mult must be positive")
        if self.max_seq_len < 2:
            raise ValidationError(f"max_seq_len must be >= 2, got {self.max_seq_len}")

    @property
    def d(self) -> int:
        return self.dims.d

    @property
    def L(self) -> int:
        return self.dims.L

    @property
    def head_dim(self) -> int:
        return self.dims.d // self.n_heads


@dataclass
class LayerWeights:
    qkv: nk.Tensor
    qkv_bias: nk.Tensor
    attn_out: nk.Tensor
    mlp_in: nk.Tensor
    mlp_out: nk.Tensor
    ln1_gain: nk.Tensor
    ln1_bias: nk.Tensor
    ln2_gain: nk.Tensor
    ln2_bias: nk.Tensor


LAYER_FIELDS = ("qkv", "qkv_bias", "attn_out", "mlp_in", "mlp_out", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")


@dataclass
class BaseWeights:
    tok_emb: nk.Tensor
    pos_emb: nk.Tensor
    layers: list[LayerWeights]
    lnf_gain: nk.Tensor
    lnf_bias: nk.Tensor
    head: nk.Tensor

    def named_tensors(self) -> list[tuple[str, nk.Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{f}", getattr(layer, f)) for f in LAYER_FIELDS)
        out += [("lnf_gain", self.lnf_gain), ("lnf_bias", self.lnf_bias), ("head", self.head)]
        return out

    def set_trainable(self, flag: bool) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag
            t.grad = None

    def copy(self) -> "BaseWeights":
        tensors = {name: nk.Tensor(t.data, requires_grad=t.requires_grad, name=name) for name, t in self.named_tensors()}
        return base_from_tensors(tensors, len(self.layers))


def base_from_tensors(tensors: dict[str, nk.Tensor], n_layers: int) -> BaseWeights:
    layers = [LayerWeights(**{f: tensors[f"layers.{i}.{f}"] for f in LAYER_FIELDS}) for i in range(n_layers)]
    return BaseWeights(
        tok_emb=tensors["tok_emb"],
        pos_emb=tensors["pos_emb"],
        layers=layers,
        lnf_gain=tensors["lnf_gain"],
        lnf_bias=tensors["lnf_bias"],
        head=tensors["head"],
    )


def base_shapes(config: TransformerConfig) -> dict[str, tuple[int, ...]]:
    d, V, m = config.d, config.vocab_size, config.mlp_mult * config.d
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d), "pos_emb": (config.max_seq_len, d)}
    per_layer = {
        "qkv": (3 * d, d),
        "qkv_bias": (3 * d,),
        "attn_out": (d, d),
        "mlp_in": (m, d),
        "mlp_out": (d, m),
        "ln1_gain": (d,),
        "ln1_bias": (d,),
        "ln2_gain": (d,),
        "ln2_bias": (d,),
    }
    for i in range(config.L):
        shapes.update({f"layers.{i}.{f}": s for f, s in per_layer.items()})
    shapes.update({"lnf_gain": (d,), "lnf_bias": (d,), "head": (d, V)})
    return shapes


@dataclass
class Model:
    config: TransformerConfig
    base: BaseWeights
    adapter: tuple[AdapterParams, TiedLoraConfig] | None = field(default=None)


def build_model(config: TransformerConfig, seed: int = 0) -> Model:
    """Random base model: Normal(0, 0.02) matrices, unit norm gains, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in base_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gain"):
            arr = np.ones(shape)
        elif leaf.endswith("bias"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = nk.Tensor(arr, name=name)
    return Model(config, base_from_tensors(tensors, config.L))


def attach_adapter(model: Model, params: AdapterParams, config: TiedLoraConfig) -> Model:
    """Return a model that routes every QKV projection through the adapter; base stays frozen."""
    if config.dims != model.config.dims:
        raise DimensionError(f"adapter dims {config.dims} do not match model dims {model.config.dims}")
    validate_params(params, config)
    model.base.set_trainable(False)
    return Model(model.config, model.base, (params, config))


def detach_adapter(model: Model) -> Model:
    return Model(model.config, model.base, None)


def merged_model(model: Model) -> Model:
    """Fold the attached adapter into a copy of the base; the result has no adapter."""
    if model.adapter is None:
        raise ValidationError("model has no adapter to merge")
    params, config = model.adapter
    new_qkv = merge(params, config, [layer.qkv for layer in model.base.layers])
    base = model.base.copy()
    for layer, W in zip(base.layers, new_qkv):
        layer.qkv = nk.Tensor(W, name=layer.qkv.name)
    base.set_trainable(False)
    return Model(model.config, base, None)


def _check_tokens(config: TransformerConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise DimensionError(f"tokens must be batch×T, got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise DimensionError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise DimensionError(f"token id outside vocabulary [0, {config.vocab_size})")
    return tokens


def _qkv(model: Model, layer: int, h: nk.Tensor) -> nk.Tensor:
    weights = model.base.layers[layer]
    cols = nk.transpose(h)
    if model.adapter is None:
        z = nk.matmul(weights.qkv, cols)
    else:
        params, config = model.adapter
        z = adapter_forward(params, config, layer, weights.qkv, cols)
    return nk.add_bias(nk.transpose(z), weights.qkv_bias)


def forward(model: Model, tokens) -> nk.Tensor:
    """Causal logits of shape batch×T×V."""
    cfg = model.config
    tokens = _check_tokens(cfg, tokens)
    nb, T = tokens.shape
    d, H, hd = cfg.d, cfg.n_heads, cfg.head_dim
    base = model.base
    positions = np.broadcast_to(np.arange(T), (nb, T))
    x = nk.add(nk.embedding(base.tok_emb, tokens), nk.embedding(base.pos_emb, positions))
    x = nk.reshape(x, (nb * T, d))
    for i, w in enumerate(base.layers):
        h = nk.layer_norm(x, w.ln1_gain, w.ln1_bias)
        qkv = nk.permute(nk.reshape(_qkv(model, i, h), (nb, T, 3, H, hd)), (2, 0, 3, 1, 4))
        q, k, v = (nk.select(qkv, j) for j in range(3))
        att = nk.causal_softmax(nk.scale(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(hd)))
        o = nk.reshape(nk.permute(nk.matmul(att, v), (0, 2, 1, 3)), (nb * T, d))
        x = nk.add(x, nk.matmul(o, nk.transpose(w.attn_out)))
        h = nk.layer_norm(x, w.ln2_gain, w.ln2_bias)
        h = nk.gelu(nk.matmul(h, nk.transpose(w.mlp_in)))
        x = nk.add(x, nk.matmul(h, nk.transpose(w.mlp_out)))
    x = nk.layer_norm(x, base.lnf_gain, base.lnf_bias)
    return nk.reshape(nk.matmul(x, base.head), (nb, T, cfg.vocab_size))


def generate_batch(model: Model, prompts, max_new_tokens: int = 500, eos_id: int | None = None) -> list[list[int]]:
    """Greedy continuation of equal-length prompts.

    Returns only the generated tokens for each prompt, truncated after the
    first ``eos_id`` (which is kept).  Generation also stops once the
    context reaches ``max_seq_len``.
    """
    prompts = _check_tokens(model.config, prompts)
    seqs = prompts.copy()
    done = np.zeros(len(seqs), dtype=bool)
    steps = min(max_new_tokens, model.config.max_seq_len - prompts.shape[1])
    for _ in range(max(steps, 0)):
        logits = forward(model, seqs).data[:, -1, :]
        # argmax returns the first maximum, i.e. the lowest token id on ties
        nxt = logits.argmax(axis=1)
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        if eos_id is not None:
            done |= nxt == eos_id
            if done.all():
                break
    out = []
    for row in seqs[:, prompts.shape[1]:].tolist():
        if eos_id is not None and eos_id in row:
            row = row[: row.index(eos_id) + 1]
        out.append(row)
    return out


def generate(model: Model, prompt: Sequence[int], max_new_tokens: int = 500, eos_id: int | None = None) -> list[int]:
    """Greedy decoding: prompt followed by the argmax continuation."""
    prompt = list(prompt)
    if not prompt:
        raise GenerationError("prompt must be non-empty")
    if len(prompt) > model.config.max_seq_len:
        raise GenerationError(f"prompt length {len(prompt)} exceeds max_seq_len={model.config.max_seq_len}")
    if max_new_tokens <= 0:
        return prompt
    return prompt + generate_batch(model, [prompt], max_new_tokens, eos_id)[0]

