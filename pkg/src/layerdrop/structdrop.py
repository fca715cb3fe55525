"""Group enumeration, group-constrained mask sampling, and DropConnect.

A mask holds one bit per group (1 = active). Every weight a group covers
shares that group's bit. Composite schemes sample each member scheme
independently; a structure is active only when all groups covering it are.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .config import LAYER_MATRICES, GroupScheme, ModelConfig, layer_param_shapes
from .numcore import Rng, Tensor, mul


class Group(NamedTuple):
    scheme: str
    layer: int  # 0-based
    index: int  # head, sub-layer (0 attn, 1 ffn) or flat weight index; 0 otherwise
    covers: tuple  # ((param name, numpy index), ...)


class _WeightGroups(Sequence):
    """One group per scalar of every layer weight matrix, built on demand."""

    def __init__(self, cfg: ModelConfig):
        shapes = layer_param_shapes(cfg)
        self._spans = []
        start = 0
        for i in range(cfg.n_layers):
            for name in LAYER_MATRICES:
                size = int(np.prod(shapes[name]))
                self._spans.append((start, size, i, f"layers.{i}.{name}", shapes[name]))
                start += size
        self._total = start

    def __len__(self):
        return self._total

    def __getitem__(self, g):
        if isinstance(g, slice):
            return [self[i] for i in range(*g.indices(self._total))]
        if g < 0:
            g += self._total
        if not 0 <= g < self._total:
            raise IndexError(g)
        for start, size, layer, name, shape in self._spans:
            if g < start + size:
                idx = np.unravel_index(g - start, shape)
                return Group("weight", layer, g, ((name, tuple(int(i) for i in idx)),))
        raise IndexError(g)

    def spans(self):
        return self._spans


def _layer_names(i: int, keys) -> list[str]:
    return [f"layers.{i}.{k}" for k in keys]


def _component_groups(cfg: ModelConfig, kind: str):
    everything = slice(None)
    shapes = layer_param_shapes(cfg)
    groups = []
    if kind == "layer":
        for i in range(cfg.n_layers):
            groups.append(Group(kind, i, 0, tuple((n, everything) for n in _layer_names(i, shapes))))
    elif kind == "sublayer":
        attn = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln1.gamma", "ln1.beta"]
        ffn = ["ffn.v", "ffn.u", "ln2.gamma", "ln2.beta"]
        for i in range(cfg.n_layers):
            groups.append(Group(kind, i, 0, tuple((n, everything) for n in _layer_names(i, attn))))
            groups.append(Group(kind, i, 1, tuple((n, everything) for n in _layer_names(i, ffn))))
    elif kind == "head":
        dh = cfg.head_dim
        for i in range(cfg.n_layers):
            for h in range(cfg.n_heads):
                cols = (slice(None), slice(h * dh, (h + 1) * dh))
                rows = (slice(h * dh, (h + 1) * dh), slice(None))
                covers = tuple((f"layers.{i}.attn.{w}", cols) for w in ("wq", "wk", "wv"))
                groups.append(Group(kind, i, h, covers + ((f"layers.{i}.attn.wo", rows),)))
    elif kind == "ffn_matrix":
        for i in range(cfg.n_layers):
            groups.append(Group(kind, i, 0, tuple((n, everything) for n in _layer_names(i, ["ffn.v", "ffn.u"]))))
    elif kind == "weight":
        return _WeightGroups(cfg)
    else:
        raise ValueError(f"not a leaf scheme: {kind}")
    return groups


def enumerate_groups(config: ModelConfig, scheme: GroupScheme) -> list:
    """Group table for ``scheme``: a flat list over the scheme's components.

    Composite tables are the concatenation of their members' tables in
    member order; a structure covered by several groups is owned by all.
    """
    comps = [_component_groups(config, c.kind) for c in scheme.components()]
    if len(comps) == 1:
        return comps[0]
    return [g for comp in comps for g in comp]


def group_count(config: ModelConfig, scheme: GroupScheme) -> int:
    return sum(_count(config, c.kind) for c in scheme.components())


def _count(cfg: ModelConfig, kind: str) -> int:
    n = cfg.n_layers
    if kind == "weight":
        return len(_WeightGroups(cfg))
    return {"layer": n, "sublayer": 2 * n, "head": n * cfg.n_heads, "ffn_matrix": n}[kind]


@dataclass(frozen=True)
class DropSpec:
    scheme: GroupScheme
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"drop rate must be in [0, 1], got {self.rate}")


@dataclass
class LayerGate:
    """What a mask leaves running inside one layer."""

    layer: bool = True
    attn: bool = True
    ffn: bool = True
    ffn_matrix: bool = True
    heads: np.ndarray | None = None  # float {0,1} per head
    weights: dict | None = None  # layer-local matrix name -> {0,1} array

    @property
    def runs(self) -> bool:
        return self.layer and (self.attn or self.ffn)


class GroupMask:
    """{0,1} bits over a scheme's groups for one model configuration."""

    def __init__(self, scheme: GroupScheme, bits, config: ModelConfig, seed_used: int | None = None):
        self.scheme = scheme
        self.config = config
        self.bits = np.asarray(bits, dtype=bool).reshape(-1)
        self.seed_used = seed_used
        self._sizes = [_count(config, c.kind) for c in scheme.components()]
        if self.bits.size != sum(self._sizes):
            raise ValueError(
                f"mask has {self.bits.size} bits but scheme {scheme} has {sum(self._sizes)} groups")
        self._table = None

    @classmethod
    def from_keep(cls, config: ModelConfig, keep: Sequence[int]) -> "GroupMask":
        """Layer mask keeping the 1-indexed depths in ``keep``."""
        bits = np.zeros(config.n_layers, dtype=bool)
        for d in keep:
            if not 1 <= d <= config.n_layers:
                raise ValueError(f"keep index {d} outside [1, {config.n_layers}]")
            bits[d - 1] = True
        return cls(GroupScheme("layer"), bits, config)

    @property
    def group_table(self):
        if self._table is None:
            self._table = enumerate_groups(self.config, self.scheme)
        return self._table

    def component_bits(self) -> list[tuple[str, np.ndarray]]:
        out, start = [], 0
        for comp, size in zip(self.scheme.components(), self._sizes):
            out.append((comp.kind, self.bits[start:start + size]))
            start += size
        return out

    def active_layers(self) -> int:
        return sum(g.runs for g in self.gates())

    def gates(self) -> list[LayerGate]:
        cfg = self.config
        gates = [LayerGate() for _ in range(cfg.n_layers)]
        for kind, bits in self.component_bits():
            if kind == "layer":
                for i, g in enumerate(gates):
                    g.layer = bool(bits[i])
            elif kind == "sublayer":
                for i, g in enumerate(gates):
                    g.attn, g.ffn = bool(bits[2 * i]), bool(bits[2 * i + 1])
            elif kind == "head":
                hb = bits.reshape(cfg.n_layers, cfg.n_heads).astype(np.float64)
                for i, g in enumerate(gates):
                    g.heads = None if hb[i].all() else hb[i]
            elif kind == "ffn_matrix":
                for i, g in enumerate(gates):
                    g.ffn_matrix = bool(bits[i])
            elif kind == "weight":
                for start, size, layer, name, shape in _WeightGroups(cfg).spans():
                    g = gates[layer]
                    if g.weights is None:
                        g.weights = {}
                    local = name.split(".", 2)[2]
                    g.weights[local] = bits[start:start + size].reshape(shape).astype(np.float64)
        return gates

    def effective_heads(self) -> np.ndarray:
        """[n_layers, n_heads] bool: head contributes to the output."""
        cfg = self.config
        out = np.ones((cfg.n_layers, cfg.n_heads), dtype=bool)
        for i, g in enumerate(self.gates()):
            if not (g.layer and g.attn):
                out[i] = False
            elif g.heads is not None:
                out[i] &= g.heads.astype(bool)
        return out

    def expand(self) -> list[dict[str, np.ndarray]]:
        """Per-component mask over every layer weight, one dict per member."""
        cfg = self.config
        shapes = layer_param_shapes(cfg)
        comps = []
        for comp, (kind, bits) in zip(self.scheme.components(), self.component_bits()):
            m = {f"layers.{i}.{k}": np.ones(s, dtype=bool)
                 for i in range(cfg.n_layers) for k, s in shapes.items()}
            if kind == "weight":
                for start, size, _, name, shape in _WeightGroups(cfg).spans():
                    m[name] = bits[start:start + size].reshape(shape).copy()
            else:
                for g, bit in zip(_component_groups(cfg, kind), bits):
                    for name, idx in g.covers:
                        m[name][idx] = bit
            comps.append(m)
        return comps

    def effective_weights(self) -> dict[str, np.ndarray]:
        comps = self.expand()
        out = comps[0]
        for m in comps[1:]:
            out = {k: out[k] & m[k] for k in out}
        return out

    def to_json(self) -> str:
        return json.dumps({
            "scheme": str(self.scheme),
            "bits": [int(b) for b in self.bits],
            "seed": self.seed_used,
        })

    @classmethod
    def from_json(cls, text: str, config: ModelConfig) -> "GroupMask":
        d = json.loads(text)
        return cls(GroupScheme.parse(d["scheme"]), d["bits"], config, d.get("seed"))

    def __repr__(self):
        return f"GroupMask({self.scheme}, active={int(self.bits.sum())}/{self.bits.size})"


def sample_mask(spec: DropSpec, config: ModelConfig, rng: Rng) -> GroupMask:
    """Each group independently active with probability ``1 - spec.rate``."""
    seed = rng.state
    n = group_count(config, spec.scheme)
    bits = rng.bernoulli(1.0 - spec.rate, n)
    return GroupMask(spec.scheme, bits, config, seed_used=seed)


def expected_active(n: int, p: float) -> float:
    """Average number of groups left active at drop rate ``p``."""
    if n < 1 or not 0.0 <= p <= 1.0:
        raise ValueError(f"need n >= 1 and p in [0, 1], got n={n}, p={p}")
    return n * (1.0 - p)


def apply_dropconnect(w: Tensor, p: float, rng: Rng) -> Tensor:
    """Elementwise Bernoulli(1 - p) mask on ``w``; no rescaling."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    return mul(w, rng.bernoulli(1.0 - p, w.shape).astype(np.float64))


def expected_drop_fraction(config: ModelConfig, scheme: GroupScheme, rate: float) -> float:
    """Expected fraction of layer weights zeroed when every group drops at ``rate``.

    A weight covered by ``k`` groups survives with probability ``(1-rate)**k``.
    """
    shapes = layer_param_shapes(config)
    cover = {f"layers.{i}.{k}": np.zeros(s, dtype=np.int64)
             for i in range(config.n_layers) for k, s in shapes.items()}
    for comp in scheme.components():
        if comp.kind == "weight":
            for name in cover:
                if name.split(".", 2)[2] in LAYER_MATRICES:
                    cover[name] += 1
            continue
        for g in _component_groups(config, comp.kind):
            for name, idx in g.covers:
                cover[name][idx] += 1
    counts = np.concatenate([c.reshape(-1) for c in cover.values()])
    return float(np.mean(1.0 - (1.0 - rate) ** counts))


def matched_rate(config: ModelConfig, scheme: GroupScheme, target_fraction: float) -> float:
    """Drop rate giving ``scheme`` the expected weight-drop fraction ``target_fraction``.

    Returns 1.0 when even dropping every group falls short.
    """
    if expected_drop_fraction(config, scheme, 1.0) <= target_fraction:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if expected_drop_fraction(config, scheme, mid) < target_fraction:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
