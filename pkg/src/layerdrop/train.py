"""Training loop with LayerDrop, Adam, warmup+cosine schedule, and throughput timing."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .config import ConfigError, ModelConfig
from .data import Corpus, batch_stream, gen_synthetic
from .model import ModelParams, forward_lm, init_params, save_checkpoint
from .numcore import Rng
from .structdrop import DropSpec, sample_mask

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "train_loss", "valid_ppl", "tokens_per_sec", "active_layers_mean")


class TrainingDiverged(RuntimeError):
    """Loss or gradient went non-finite; carries the last finite snapshot."""

    def __init__(self, step: int, last_good: ModelParams | None, last_good_step: int,
                 checkpoint: str | None = None):
        msg = f"non-finite loss at step {step} (last good step {last_good_step})"
        if checkpoint:
            msg += f"; last good checkpoint at {checkpoint}"
        super().__init__(msg)
        self.step = step
        self.last_good = last_good
        self.last_good_step = last_good_step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch: int = 8
    block_len: int = 128
    lr_peak: float = 3e-4
    warmup_steps: int | None = None  # None -> 10% of steps
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float = 0.1
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", self.steps // 10)
        if self.steps < 0:
            raise ConfigError("steps must be >= 0", "steps")
        if not 0 <= self.warmup_steps <= max(self.steps, 0):
            raise ConfigError("warmup_steps must be in [0, steps]", "warmup_steps")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}", "schedule")
        for key in ("batch", "block_len", "eval_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key)
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive", "grad_clip")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown train config key {key!r}", key)
        return cls(**d)


@dataclass
class MetricsRow:
    step: int
    train_loss: float
    valid_ppl: float | None
    tokens_per_sec: float
    active_layers_mean: float


@dataclass
class RunMetrics:
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError("metric steps must increase")
        self.rows.append(row)

    def deterministic(self) -> list[tuple]:
        """Rows without the wall-clock column."""
        return [(r.step, r.train_loss, r.valid_ppl, r.active_layers_mean) for r in self.rows]

    def write_csv(self, path, include_timing: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for r in self.rows:
                w.writerow([r.step, repr(r.train_loss),
                            "" if r.valid_ppl is None else repr(r.valid_ppl),
                            repr(r.tokens_per_sec) if include_timing else "",
                            repr(r.active_layers_mean)])

    @classmethod
    def read_csv(cls, path) -> "RunMetrics":
        out = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                out.append(MetricsRow(
                    int(rec["step"]), float(rec["train_loss"]),
                    float(rec["valid_ppl"]) if rec["valid_ppl"] else None,
                    float(rec["tokens_per_sec"]) if rec["tokens_per_sec"] else float("nan"),
                    float(rec["active_layers_mean"])))
        return out


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update in place.

    A parameter whose gradient is ``None`` (e.g. a layer dropped this step)
    is skipped and its step count does not advance.
    """
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        t = state.t[name] + 1
        state.t[name] = t
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values() if g is not None))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            if g is not None:
                g *= scale
    return total


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values() if g is not None))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to 0 at ``cfg.steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w = cfg.warmup_steps
    if w > 0 and step < w:
        return cfg.lr_peak * step / w
    if cfg.schedule == "constant":
        return cfg.lr_peak
    span = cfg.steps - w
    if span <= 0:
        return cfg.lr_peak
    progress = min(1.0, (step - w) / span)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- loop --------------------------------------------------------------------


def _valid_ppl(params: ModelParams, valid: Corpus | None, block_len: int) -> float | None:
    if valid is None:
        return None
    from .evaluation import perplexity

    return perplexity(params, valid, block_len=block_len)


class Trainer:
    """Single-threaded deterministic training session over one parameter set."""

    def __init__(self, params: ModelParams, train_cfg: TrainConfig, corpus: Corpus,
                 layerdrop: bool = True):
        params.config.validate_for_training()
        self.params = params
        self.cfg = train_cfg
        root = Rng(train_cfg.seed)
        self.data_rng = root.spawn("data")
        self.mask_rng = root.spawn("mask")
        self.dropout_rng = root.spawn("dropout")
        self.batches = batch_stream(corpus, train_cfg.batch, train_cfg.block_len, self.data_rng)
        self.state = AdamState(train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
        self.named = {n: t for n, t in params.named_tensors() if t.requires_grad}
        mc = params.config
        self.drop = DropSpec(mc.scheme, mc.layerdrop_p) if layerdrop and mc.layerdrop_p > 0 else None
        self.step_count = 0
        self.last_grad_norm = 0.0

    def step(self) -> tuple[float, int, int]:
        """One update; returns (loss, active layers, tokens)."""
        self.step_count += 1
        batch = next(self.batches)
        mc = self.params.config
        mask = sample_mask(self.drop, mc, self.mask_rng) if self.drop else None
        active = mask.active_layers() if mask is not None else mc.n_layers
        for t in self.named.values():
            t.grad = None
        logits = forward_lm(batch.inputs, self.params, mask, "train", self.dropout_rng)
        loss = nc.cross_entropy(logits, batch.targets)
        lval = loss.item()
        if not math.isfinite(lval):
            return lval, active, batch.n_tokens
        nc.backward(loss)
        grads = {n: t.grad for n, t in self.named.items()}
        norm = clip_grad_norm(grads, self.cfg.grad_clip)
        if not math.isfinite(norm):
            return float("nan"), active, batch.n_tokens
        self.last_grad_norm = min(norm, self.cfg.grad_clip)
        adam_step(self.named, grads, self.state, lr_at(self.step_count, self.cfg))
        return lval, active, batch.n_tokens


def _run(trainer: Trainer, valid: Corpus | None, out_dir: str | None,
         metrics_path: str | None, include_timing: bool = True) -> RunMetrics:
    cfg = trainer.cfg
    metrics = RunMetrics()
    losses, actives, tokens = [], [], 0
    last_good, last_good_step = trainer.params.copy(), 0
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        loss, active, ntok = trainer.step()
        if not math.isfinite(loss):
            ckpt = None
            if out_dir:
                ckpt = os.path.join(out_dir, "last_good.ckpt")
                save_checkpoint(ckpt, last_good)
            raise TrainingDiverged(step, last_good, last_good_step, ckpt)
        losses.append(loss)
        actives.append(active)
        tokens += ntok
        if step % cfg.eval_every == 0 or step == cfg.steps:
            elapsed = time.perf_counter() - t0
            row = MetricsRow(step, float(np.mean(losses)),
                             _valid_ppl(trainer.params, valid, cfg.block_len),
                             tokens / elapsed if elapsed > 0 else 0.0,
                             float(np.mean(actives)))
            metrics.append(row)
            log.info("step %d loss %.4f valid_ppl %s tok/s %.0f active %.2f", row.step,
                     row.train_loss, row.valid_ppl, row.tokens_per_sec, row.active_layers_mean)
            if metrics_path:
                metrics.write_csv(metrics_path, include_timing)
            last_good, last_good_step = trainer.params.copy(), step
            losses, actives, tokens = [], [], 0
            t0 = time.perf_counter()
    return metrics


def train_lm(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: Corpus,
             valid: Corpus | None = None, init: ModelParams | None = None,
             out_dir: str | None = None,
             include_timing: bool = True) -> tuple[ModelParams, RunMetrics]:
    """Train from a seeded init (or ``init``) with LayerDrop at ``model_cfg.layerdrop_p``.

    With ``out_dir`` set, ``metrics.csv`` is rewritten at every eval point and
    ``model.ckpt`` is saved at the end. ``include_timing=False`` leaves the
    wall-clock column blank so the file is bit-reproducible.
    """
    model_cfg.validate_for_training()
    params = init if init is not None else init_params(model_cfg, Rng(train_cfg.seed).spawn("init"))
    trainer = Trainer(params, train_cfg, corpus)
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    metrics = _run(trainer, valid, out_dir, metrics_path, include_timing)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), params)
    return params, metrics


def finetune_pruned(params: ModelParams, keep, corpus: Corpus, steps: int,
                    train_cfg: TrainConfig | None = None, valid: Corpus | None = None,
                    out_dir: str | None = None) -> tuple[ModelParams, RunMetrics]:
    """Continue training a pruned model without LayerDrop.

    ``params`` may be the full model, in which case it is pruned to ``keep``
    first; the input is never modified.
    """
    from .prune import prune_model

    if keep is not None and len(keep) != params.config.n_layers:
        params = prune_model(params, keep)
    params = params.copy()
    params.config = params.config.replace(layerdrop_p=0.0)
    if steps == 0:
        return params, RunMetrics()
    base = train_cfg or TrainConfig()
    warmup = base.warmup_steps if base.warmup_steps <= steps else steps // 10
    cfg = base.replace(steps=steps, warmup_steps=warmup)
    params.set_requires_grad(True)
    trainer = Trainer(params, cfg, corpus, layerdrop=False)
    metrics_path = os.path.join(out_dir, "finetune_metrics.csv") if out_dir else None
    return params, _run(trainer, valid, out_dir, metrics_path)


def measure_throughput(model_cfg: ModelConfig, p_values, steps: int,
                       train_cfg: TrainConfig | None = None,
                       corpus: Corpus | None = None) -> list[tuple[float, float]]:
    """Training tokens/sec at each LayerDrop rate, excluding the first 10% of steps."""
    if steps < 2:
        raise ValueError("need at least 2 steps")
    base = train_cfg or TrainConfig(batch=4, block_len=model_cfg.max_seq_len)
    cfg = base.replace(steps=steps, warmup_steps=min(base.warmup_steps, steps))
    if corpus is None:
        corpus = gen_synthetic("zipf_bigram", 200_000, cfg.seed)
    skip = max(1, steps // 10)
    rows = []
    for p in p_values:
        mc = model_cfg.replace(layerdrop_p=p)
        params = init_params(mc, Rng(cfg.seed).spawn("init"))
        trainer = Trainer(params, cfg, corpus)
        tokens = 0
        t0 = None
        for i in range(steps):
            if i == skip:
                t0 = time.perf_counter()
            _, _, ntok = trainer.step()
            if i >= skip:
                tokens += ntok
        rows.append((p, tokens / (time.perf_counter() - t0)))
    return rows
