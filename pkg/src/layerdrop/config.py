"""Model hyperparameters and the group schemes structured dropout works over."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

SCHEME_KINDS = ("layer", "sublayer", "head", "ffn_matrix", "weight")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class GroupScheme:
    """How weights are grouped for structured dropout.

    ``kind`` is one of ``SCHEME_KINDS`` or ``"composite"``; a composite holds
    its member schemes and is written ``"head+layer"``.
    """

    kind: str
    members: tuple["GroupScheme", ...] = ()

    def __post_init__(self):
        if self.kind == "composite":
            if not self.members:
                raise ConfigError("composite scheme needs members", "scheme")
            kinds = [m.kind for m in self.members]
            if len(set(kinds)) != len(kinds):
                raise ConfigError(f"composite members must be distinct: {kinds}", "scheme")
            if "weight" in kinds:
                raise ConfigError("weight-level groups cannot join a composite", "scheme")
            if "composite" in kinds:
                raise ConfigError("composites do not nest", "scheme")
        elif self.kind not in SCHEME_KINDS:
            raise ConfigError(f"unknown group scheme {self.kind!r}", "scheme")
        elif self.members:
            raise ConfigError("only composite schemes have members", "scheme")

    @classmethod
    def parse(cls, text: str) -> "GroupScheme":
        parts = [p.strip().lower() for p in str(text).split("+") if p.strip()]
        if len(parts) == 1:
            return cls(parts[0])
        return cls("composite", tuple(cls(p) for p in parts))

    def components(self) -> tuple["GroupScheme", ...]:
        return self.members if self.kind == "composite" else (self,)

    def __str__(self):
        if self.kind == "composite":
            return "+".join(m.kind for m in self.members)
        return self.kind


LAYER = GroupScheme("layer")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    vocab_size: int = 256
    max_seq_len: int = 128
    dropout: float = 0.0
    layerdrop_p: float = 0.0
    scheme: GroupScheme = field(default=LAYER)
    ln_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.scheme, str):
            object.__setattr__(self, "scheme", GroupScheme.parse(self.scheme))
        for key in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_seq_len"):
            val = getattr(self, key)
            if not isinstance(val, int) or isinstance(val, bool) or val < 1:
                raise ConfigError(f"{key} must be a positive integer, got {val!r}", key)
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}", "d_model")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}", "dropout")
        if not 0.0 <= self.layerdrop_p <= 1.0:
            raise ConfigError(f"layerdrop_p must be in [0, 1], got {self.layerdrop_p}", "layerdrop_p")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive", "ln_eps")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate_for_training(self) -> None:
        if self.layerdrop_p >= 1.0:
            raise ConfigError("layerdrop_p must be < 1 for training", "layerdrop_p")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scheme"] = str(self.scheme)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}", key)
        return cls(**d)


def layer_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of one layer's tensors, keyed by their name within the layer."""
    d, f = cfg.d_model, cfg.d_ffn
    return {
        "attn.wq": (d, d),
        "attn.wk": (d, d),
        "attn.wv": (d, d),
        "attn.wo": (d, d),
        "ln1.gamma": (d,),
        "ln1.beta": (d,),
        "ffn.v": (f, d),
        "ffn.u": (d, f),
        "ln2.gamma": (d,),
        "ln2.beta": (d,),
    }


LAYER_MATRICES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.v", "ffn.u")


def param_count(cfg: ModelConfig, n_layers: int | None = None) -> int:
    """Closed-form count: embeddings + positions + layers + output projection."""
    n = cfg.n_layers if n_layers is None else n_layers
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    per_layer = 4 * d * d + 2 * d * f + 4 * d
    return v * d + cfg.max_seq_len * d + n * per_layer + d * v
