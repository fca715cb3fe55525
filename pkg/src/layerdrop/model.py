"""Decoder-only post-norm transformer LM built on :mod:`layerdrop.numcore`.

Every layer is attention + AddNorm followed by FFN + AddNorm. A
:class:`~layerdrop.structdrop.GroupMask` gates layers, sub-layers, heads,
FFN blocks or single weights; a skipped layer or sub-layer is an exact
identity on the hidden state. Surviving structures are never rescaled.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import numcore as nc
from .config import ModelConfig, layer_param_shapes, param_count
from .numcore import Rng, Tensor
from .structdrop import GroupMask, LayerGate

MAGIC = b"LDRP"
FORMAT_VERSION = 1


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class FfnParams:
    v: Tensor  # inner, [d_ffn, d_model]
    u: Tensor  # outer, [d_model, d_ffn]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class LayerParams:
    attn: AttentionParams
    ln1: LayerNormParams
    ffn: FfnParams
    ln2: LayerNormParams

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "attn.wq", self.attn.wq
        yield "attn.wk", self.attn.wk
        yield "attn.wv", self.attn.wv
        yield "attn.wo", self.attn.wo
        yield "ln1.gamma", self.ln1.gamma
        yield "ln1.beta", self.ln1.beta
        yield "ffn.v", self.ffn.v
        yield "ffn.u", self.ffn.u
        yield "ln2.gamma", self.ln2.gamma
        yield "ln2.beta", self.ln2.beta

    @classmethod
    def from_named(cls, t: dict[str, Tensor]) -> "LayerParams":
        return cls(
            AttentionParams(t["attn.wq"], t["attn.wk"], t["attn.wv"], t["attn.wo"]),
            LayerNormParams(t["ln1.gamma"], t["ln1.beta"]),
            FfnParams(t["ffn.v"], t["ffn.u"]),
            LayerNormParams(t["ln2.gamma"], t["ln2.beta"]),
        )


@dataclass
class ModelParams:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerParams] = field(default_factory=list)
    out_proj: Tensor | None = None

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, lp in enumerate(self.layers):
            for name, t in lp.named():
                yield f"layers.{i}.{name}", t
        yield "out_proj", self.out_proj

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def copy(self) -> "ModelParams":
        named = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                 for n, t in self.named_tensors()}
        return from_named(self.config, named)


def from_named(cfg: ModelConfig, named: dict[str, Tensor]) -> ModelParams:
    layers = []
    for i in range(cfg.n_layers):
        prefix = f"layers.{i}."
        layers.append(LayerParams.from_named(
            {k[len(prefix):]: v for k, v in named.items() if k.startswith(prefix)}))
    return ModelParams(cfg, named["tok_emb"], named["pos_emb"], layers, named["out_proj"])


def init_params(cfg: ModelConfig, rng: Rng | int = 0) -> ModelParams:
    """Glorot-uniform matrices, unit/zero layer-norm affines."""
    if not isinstance(rng, Rng):
        rng = Rng(rng)

    def glorot(name, shape):
        a = nc.glorot_bound(shape[0], shape[1])
        return Tensor(rng.uniform(-a, a, shape), requires_grad=True, name=name)

    named = {
        "tok_emb": glorot("tok_emb", (cfg.vocab_size, cfg.d_model)),
        "pos_emb": glorot("pos_emb", (cfg.max_seq_len, cfg.d_model)),
    }
    for i in range(cfg.n_layers):
        for key, shape in layer_param_shapes(cfg).items():
            name = f"layers.{i}.{key}"
            if key.endswith("gamma"):
                named[name] = Tensor(np.ones(shape), requires_grad=True, name=name)
            elif key.endswith("beta"):
                named[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)
            else:
                named[name] = glorot(name, shape)
    named["out_proj"] = glorot("out_proj", (cfg.d_model, cfg.vocab_size))
    params = from_named(cfg, named)
    assert params.num_params() == param_count(cfg)
    return params


# --- sub-layers --------------------------------------------------------------


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def embed(tokens, params: ModelParams) -> Tensor:
    """Token embedding scaled by sqrt(d_model) plus the positional row."""
    cfg = params.config
    arr = np.asarray(tokens, dtype=np.int64)
    t = arr.shape[-1]
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
        raise IndexError(f"token id outside [0, {cfg.vocab_size})")
    x = nc.take_rows(params.tok_emb, arr) * math.sqrt(cfg.d_model)
    return x + nc.take_rows(params.pos_emb, np.arange(t))


_causal_cache: dict[int, np.ndarray] = {}


def causal_mask(t: int) -> np.ndarray:
    m = _causal_cache.get(t)
    if m is None:
        m = np.tril(np.ones((t, t), dtype=bool))
        _causal_cache[t] = m
    return m


def _masked(w: Tensor, weights: dict | None, key: str) -> Tensor:
    if weights is None or key not in weights:
        return w
    return nc.mul(w, weights[key])


def attention_sublayer(x: Tensor, p: AttentionParams, n_heads: int,
                       head_mask: np.ndarray | None = None,
                       weights: dict | None = None) -> Tensor:
    """Causal multi-head scaled dot-product attention over ``[..., T, d]``.

    ``head_mask`` (one 0/1 per head) zeroes a head's output before the heads
    are concatenated.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = nc.reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    dh = d // n_heads

    def heads(w):
        y = nc.reshape(x @ w, (b, t, n_heads, dh))
        return nc.transpose(y, (0, 2, 1, 3))

    q = heads(_masked(p.wq, weights, "attn.wq"))
    k = heads(_masked(p.wk, weights, "attn.wk"))
    v = heads(_masked(p.wv, weights, "attn.wv"))
    scores = nc.matmul(q, nc.swap_last(k)) * (1.0 / math.sqrt(dh))
    probs = nc.softmax_rows(scores, causal_mask(t))
    o = nc.matmul(probs, v)
    if head_mask is not None:
        o = nc.mul(o, np.asarray(head_mask, dtype=np.float64).reshape(1, n_heads, 1, 1))
    o = nc.reshape(nc.transpose(o, (0, 2, 1, 3)), (b, t, d))
    y = o @ _masked(p.wo, weights, "attn.wo")
    if squeeze:
        y = nc.reshape(y, (t, d))
    return y


def ffn_sublayer(x: Tensor, p: FfnParams, weights: dict | None = None) -> Tensor:
    """Row-wise ``U relu(V x)``."""
    v = _masked(p.v, weights, "ffn.v")
    u = _masked(p.u, weights, "ffn.u")
    return nc.relu(x @ nc.swap_last(v)) @ nc.swap_last(u)


def add_norm(x: Tensor, sublayer_out: Tensor | None, ln: LayerNormParams,
             eps: float = 1e-5) -> Tensor:
    """``layer_norm(x + sublayer_out)``; ``None`` means a zero sub-layer output."""
    if sublayer_out is None:
        return nc.layer_norm(x, ln.gamma, ln.beta, eps)
    if sublayer_out.shape != x.shape:
        raise nc.ShapeError(f"add_norm shape mismatch: {x.shape} vs {sublayer_out.shape}")
    return nc.layer_norm(x + sublayer_out, ln.gamma, ln.beta, eps)


def _dropout(y: Tensor, rate: float, rng: Rng | None) -> Tensor:
    if rate <= 0.0:
        return y
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.bernoulli(1.0 - rate, y.shape)
    return nc.mul(y, keep * (1.0 / (1.0 - rate)))


def run_layer(x: Tensor, lp: LayerParams, cfg: ModelConfig, gate: LayerGate | None = None,
              train: bool = False, rng: Rng | None = None) -> Tensor:
    """One post-norm layer under ``gate``; skipped parts pass ``x`` through untouched."""
    gate = gate or LayerGate()
    if not gate.layer:
        return x
    rate = cfg.dropout if train else 0.0
    if gate.attn:
        a = attention_sublayer(x, lp.attn, cfg.n_heads, gate.heads, gate.weights)
        x = add_norm(x, _dropout(a, rate, rng), lp.ln1, cfg.ln_eps)
    if gate.ffn:
        f = None
        if gate.ffn_matrix:
            f = _dropout(ffn_sublayer(x, lp.ffn, gate.weights), rate, rng)
        x = add_norm(x, f, lp.ln2, cfg.ln_eps)
    return x


def forward_lm(tokens, params: ModelParams, mask: GroupMask | None = None,
               mode: str = "eval", rng: Rng | None = None) -> Tensor:
    """Logits ``[T, V]`` for a token list, or ``[B, T, V]`` for a batch."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    if mask is not None and mask.config.n_layers != cfg.n_layers:
        raise ValueError(f"mask built for {mask.config.n_layers} layers, model has {cfg.n_layers}")
    gates = mask.gates() if mask is not None else [None] * cfg.n_layers
    train = mode == "train"
    x = embed(tokens, params)
    for lp, gate in zip(params.layers, gates):
        x = run_layer(x, lp, cfg, gate, train, rng)
    return x @ params.out_proj


# --- checkpoints -------------------------------------------------------------


def checkpoint_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    cfg_json = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    for name, t in params.named_tensors():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams) -> None:
    """Write ``params`` atomically in the versioned LDRP binary format."""
    path = os.fspath(path)
    data = checkpoint_bytes(params)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    return params_from_bytes(data)


def params_from_bytes(data: bytes) -> ModelParams:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an LDRP checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", view, 8)
    pos = 12
    cfg = ModelConfig.from_dict(json.loads(bytes(view[pos:pos + clen])))
    pos += clen
    named = {}
    while pos < len(view):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        n = int(np.prod(dims, dtype=np.int64))
        if pos + 8 * n > len(view):
            raise CheckpointError(f"truncated payload for {name}")
        arr = np.frombuffer(view[pos:pos + 8 * n], dtype="<f8").astype(np.float64).reshape(dims)
        pos += 8 * n
        named[name] = Tensor(arr, requires_grad=True, name=name)
    expected = {n for n, _ in _expected_names(cfg)}
    if set(named) != expected:
        missing = sorted(expected - set(named))
        raise CheckpointError(f"checkpoint tensors do not match config (missing {missing[:3]})")
    return from_named(cfg, named)


def _expected_names(cfg: ModelConfig):
    yield "tok_emb", None
    yield "pos_emb", None
    for i in range(cfg.n_layers):
        for key in layer_param_shapes(cfg):
            yield f"layers.{i}.{key}", None
    yield "out_proj", None
