"""Inference-time layer selection and physical model shrinking.

Depths are 1-indexed throughout: layer ``d`` is ``params.layers[d - 1]``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .data import Corpus, batch_stream, make_blocks
from .model import ModelParams, embed, run_layer
from .numcore import Rng, Tensor


class PruneSpecError(ValueError):
    pass


def _check_keep(keep, n: int) -> tuple[int, ...]:
    keep = tuple(int(d) for d in keep)
    if not keep:
        raise PruneSpecError("keep-set is empty")
    if any(b <= a for a, b in zip(keep, keep[1:])):
        raise PruneSpecError(f"keep indices must be strictly increasing: {keep}")
    if keep[0] < 1 or keep[-1] > n:
        raise PruneSpecError(f"keep indices must lie in [1, {n}]: {keep}")
    return keep


@dataclass(frozen=True)
class PruneSpec:
    """A selection strategy plus its arguments.

    ``strategy`` is one of every_other, keep, search_on_valid, data_driven,
    chunk, random_k.
    """

    strategy: str
    p: float | None = None
    r: int | None = None
    keep: tuple[int, ...] = ()
    budget: int = 100
    which: str = "first_half"
    seed: int = 0

    def resolve(self, n: int, **context) -> tuple[int, ...]:
        """Keep-set for a model of depth ``n``.

        ``search_on_valid`` needs ``params`` and ``valid`` in ``context``;
        ``data_driven`` needs ``params``, ``train`` and optionally ``probe``.
        """
        s = self.strategy
        if self.r is not None and not 1 <= self.r <= n:
            raise PruneSpecError(f"target depth r={self.r} outside [1, {n}]")
        if s == "every_other":
            p = self.p if self.p is not None else optimal_drop_rate(self.r, n)
            return every_other_keep(n, p)
        if s == "keep":
            return _check_keep(self.keep, n)
        if s == "chunk":
            return chunk_keep(n, self.which)
        if s == "random_k":
            return random_keep(n, self.r, Rng(self.seed))
        if s == "search_on_valid":
            keep, _ = search_on_valid(context["params"], context["valid"], self.r, self.budget,
                                      Rng(self.seed))
            return keep
        if s == "data_driven":
            params = context["params"]
            p = self.p if self.p is not None else optimal_drop_rate(self.r, n)
            gates = train_gates(params, context["train"], p, context.get("steps", 200),
                                seed=self.seed)
            probe = context.get("probe") or context["train"]
            return select_topk_gates(gates, params, probe, self.r)
        raise PruneSpecError(f"unknown strategy {s!r}")


def every_other_keep(n: int, p: float) -> tuple[int, ...]:
    """Drop every depth divisible by ``floor(1/p)``; return the survivors."""
    if not 0.0 < p < 1.0:
        raise PruneSpecError(f"every-other pruning needs 0 < p < 1, got {p}")
    k = math.floor(1.0 / p)
    if k < 2:
        raise PruneSpecError(f"floor(1/p) = {k} < 2 would drop every layer (p={p})")
    return tuple(d for d in range(1, n + 1) if d % k != 0)


def optimal_drop_rate(r: int, n: int) -> float:
    """Train-time drop rate matching a target depth: ``1 - r/n``."""
    if not 1 <= r <= n:
        raise PruneSpecError(f"need 1 <= r <= n, got r={r}, n={n}")
    return 1.0 - r / n


def depth_keep(n: int, r: int) -> tuple[int, ...]:
    """Balanced keep-set of exactly ``r`` layers.

    Uses the every-other rule at ``p = 1 - r/n`` when it yields ``r``
    layers, otherwise evenly spaced depths ``floor(j*n/r) + 1``.
    """
    if r == n:
        return tuple(range(1, n + 1))
    p = optimal_drop_rate(r, n)
    if math.floor(1.0 / p) >= 2:
        keep = every_other_keep(n, p)
        if len(keep) == r:
            return keep
    return tuple(math.floor(j * n / r) + 1 for j in range(r))


def chunk_keep(n: int, which: str) -> tuple[int, ...]:
    """Drop the first or last ``floor(n/2)`` layers; odd ``n`` keeps the middle layer."""
    half = n // 2
    if which == "first_half":
        return tuple(range(half + 1, n + 1))
    if which == "last_half":
        return tuple(range(1, n - half + 1))
    raise PruneSpecError(f"chunk must be first_half or last_half, got {which!r}")


def random_keep(n: int, r: int, rng: Rng) -> tuple[int, ...]:
    return tuple(i + 1 for i in rng.subset(n, r))


def prune_model(params: ModelParams, keep) -> ModelParams:
    """Physically smaller model holding the kept layers in their original order."""
    cfg = params.config
    keep = _check_keep(keep, cfg.n_layers)
    small = params.copy()
    small.layers = [small.layers[d - 1] for d in keep]
    small.config = cfg.replace(n_layers=len(keep))
    return small


def keep_to_json(keep, **extra) -> str:
    return json.dumps({"keep": list(keep), **extra})


# --- search on valid ---------------------------------------------------------


def _subset_ppl(params: ModelParams, valid: Corpus, keep, block_len: int | None) -> float:
    from .evaluation import perplexity

    return perplexity(params, valid, keep=keep, block_len=block_len)


def search_on_valid(params: ModelParams, valid: Corpus, r: int, budget: int, rng: Rng,
                    block_len: int | None = None) -> tuple[tuple[int, ...], float]:
    """Best ``r``-layer keep-set by validation perplexity.

    Exhaustive when ``C(N, r) <= budget``; otherwise ``budget`` distinct
    uniform subsets. Ties go to the lexicographically smallest keep-set.
    """
    n = params.config.n_layers
    if not 1 <= r <= n:
        raise PruneSpecError(f"need 1 <= r <= {n}, got {r}")
    if budget < 1:
        raise PruneSpecError("budget must be >= 1")
    if math.comb(n, r) <= budget:
        candidates = list(itertools.combinations(range(1, n + 1), r))
    else:
        seen = set()
        while len(seen) < budget:
            seen.add(random_keep(n, r, rng))
        candidates = sorted(seen)
    best = None
    for keep in candidates:
        ppl = _subset_ppl(params, valid, keep, block_len)
        if best is None or ppl < best[1] or (ppl == best[1] and keep < best[0]):
            best = (keep, ppl)
    return best


def layer_importance_sweep(params: ModelParams, valid: Corpus, r: int, trials: int, rng: Rng,
                           block_len: int | None = None) -> list[dict]:
    """Mean validation perplexity of random ``r``-layer subsets that omit each layer.

    For layer ``n`` the subsets are drawn from the other ``N-1`` layers;
    when ``trials`` covers all of them the sweep is exhaustive. Subset
    perplexities are cached across layers.
    """
    n = params.config.n_layers
    if not 1 <= r < n:
        raise PruneSpecError(f"need 1 <= r < {n}, got {r}")
    if trials < 1:
        raise PruneSpecError("trials must be >= 1")
    cache: dict[tuple, float] = {}
    rows = []
    for layer in range(1, n + 1):
        others = [d for d in range(1, n + 1) if d != layer]
        total = math.comb(n - 1, r)
        if trials >= total:
            subsets = list(itertools.combinations(others, r))
        else:
            seen = set()
            sub_rng = rng.spawn(f"layer{layer}")
            while len(seen) < trials:
                seen.add(tuple(others[i] for i in sub_rng.subset(n - 1, r)))
            subsets = sorted(seen)
        ppls = []
        for keep in subsets:
            if keep not in cache:
                cache[keep] = _subset_ppl(params, valid, keep, block_len)
            ppls.append(cache[keep])
        rows.append({"layer": layer, "mean_ppl": float(np.mean(ppls)), "trials": len(subsets)})
    return rows


# --- data-driven gates -------------------------------------------------------


@dataclass
class GateParams:
    """Per-layer scorer ``w2 . tanh(W1 pooled + b1) + b2`` and the target mean drop rate."""

    w1: Tensor  # [N, d, h]
    b1: Tensor  # [N, h]
    w2: Tensor  # [N, h]
    b2: Tensor  # [N]
    target_p: float
    lam: float = 10.0
    history: list = field(default_factory=list)

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def init_gates(cfg: ModelConfig, target_p: float, hidden: int = 16, seed: int = 0,
               lam: float = 10.0) -> GateParams:
    """Random hidden layer, zero output weights: every layer starts at keep-prob ``1 - target_p``."""
    rng = Rng(seed).spawn("gates")
    n, d = cfg.n_layers, cfg.d_model
    a = nc.glorot_bound(d, hidden)
    keep0 = min(max(1.0 - target_p, 1e-6), 1 - 1e-6)
    return GateParams(
        w1=Tensor(rng.uniform(-a, a, (n, d, hidden)), requires_grad=True),
        b1=Tensor(np.zeros((n, hidden)), requires_grad=True),
        w2=Tensor(np.zeros((n, hidden)), requires_grad=True),
        b2=Tensor(np.full(n, math.log(keep0 / (1.0 - keep0))), requires_grad=True),
        target_p=target_p,
        lam=lam,
    )


def _layer_score(gates: GateParams, d: int, out: Tensor) -> Tensor:
    """Score per sequence ``[B]`` from the mean-pooled output of layer ``d`` (0-based)."""
    pooled = nc.mean(out, axis=1)  # [B, D]
    h = nc.tanh(pooled @ nc.take_rows(gates.w1, d) + nc.take_rows(gates.b1, d))
    s = nc.reshape(h @ nc.reshape(nc.take_rows(gates.w2, d), (-1, 1)), (-1,))
    return s + nc.take_rows(gates.b2, d)


def gated_forward(tokens, params: ModelParams, gates: GateParams) -> tuple[Tensor, list[Tensor]]:
    """Forward where layer ``d`` returns ``x + sigmoid(s_d) * (layer(x) - x)``.

    Returns logits and the per-layer score tensors ``[B]``.
    """
    cfg = params.config
    x = embed(tokens, params)
    scores = []
    for d, lp in enumerate(params.layers):
        out = run_layer(x, lp, cfg)
        s = _layer_score(gates, d, out)
        scores.append(s)
        k = nc.reshape(nc.sigmoid(s), (-1, 1, 1))
        x = x + k * (out - x)
    return x @ params.out_proj, scores


class GateTrainingError(RuntimeError):
    pass


def train_gates(params: ModelParams, train: Corpus, target_p: float, steps: int,
                lam: float = 10.0, lr: float = 1e-2, batch: int = 4, block_len: int | None = None,
                hidden: int = 16, seed: int = 0) -> GateParams:
    """Fit per-layer gate scorers against a frozen base model.

    Loss: LM cross-entropy of :func:`gated_forward` plus
    ``lam * (mean_d p_d - target_p)**2`` where ``p_d = 1 - mean sigmoid(s_d)``.
    Adam with a cosine-decayed learning rate.
    """
    from .train import AdamState, TrainConfig, adam_step, lr_at

    cfg = params.config
    gates = init_gates(cfg, target_p, hidden, seed, lam)
    if steps == 0:
        return gates
    saved = [t.requires_grad for t in params.tensors()]
    params.set_requires_grad(False)
    block_len = block_len or cfg.max_seq_len
    stream = batch_stream(train, batch, block_len, Rng(seed).spawn("gate-data"))
    sched = TrainConfig(steps=steps, lr_peak=lr, warmup_steps=0)
    state = AdamState()
    named = {str(i): t for i, t in enumerate(gates.tensors())}
    try:
        for step in range(1, steps + 1):
            b = next(stream)
            for t in named.values():
                t.grad = None
            logits, scores = gated_forward(b.inputs, params, gates)
            lm = nc.cross_entropy(logits, b.targets)
            keep_means = [nc.mean(nc.sigmoid(s)) for s in scores]
            mean_drop = 1.0 - nc.mean(nc.stack(keep_means))
            gap = mean_drop - target_p
            loss = lm + lam * (gap * gap)
            if not math.isfinite(loss.item()):
                raise GateTrainingError(f"gate training diverged at step {step}")
            nc.backward(loss)
            adam_step(named, {k: t.grad for k, t in named.items()}, state, lr_at(step, sched))
            gates.history.append((step, lm.item(), gap.item() + target_p))
    finally:
        for t, flag in zip(params.tensors(), saved):
            t.requires_grad = flag
    return gates


def _probe_pass(gates: GateParams, params: ModelParams, probe: Corpus,
                block_len: int | None, batch: int) -> tuple[np.ndarray, np.ndarray]:
    block_len = block_len or params.config.max_seq_len
    score_sum = np.zeros(params.config.n_layers)
    drop_sum = np.zeros(params.config.n_layers)
    count = 0
    with nc.no_grad():
        for b in make_blocks(probe, batch, block_len):
            _, scores = gated_forward(b.inputs, params, gates)
            score_sum += np.array([s.data.sum() for s in scores])
            drop_sum += np.array([(1.0 / (1.0 + np.exp(s.data))).sum() for s in scores])
            count += b.inputs.shape[0]
    return score_sum / count, drop_sum / count


def gate_scores(gates: GateParams, params: ModelParams, probe: Corpus,
                block_len: int | None = None, batch: int = 8) -> np.ndarray:
    """Mean raw score per layer over the probe corpus."""
    return _probe_pass(gates, params, probe, block_len, batch)[0]


def drop_rates(gates: GateParams, params: ModelParams, probe: Corpus,
               block_len: int | None = None, batch: int = 8) -> np.ndarray:
    """Per-layer drop rate ``p_d = 1 - sigmoid(s_d)`` averaged over probe sequences."""
    return _probe_pass(gates, params, probe, block_len, batch)[1]


def score_softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    z = np.exp(s - s.max())
    return z / z.sum()


def topk_from_scores(scores, r: int) -> tuple[int, ...]:
    """1-indexed depths of the ``r`` most probable layers under ``score_softmax``.

    Softmax is monotone, so ranking uses the raw scores; rounding in the
    probabilities cannot create false ties. Real ties keep the shallower layer.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not 1 <= r <= s.size:
        raise PruneSpecError(f"need 1 <= r <= {s.size}, got {r}")
    order = sorted(range(s.size), key=lambda i: (-s[i], i))
    return tuple(sorted(i + 1 for i in order[:r]))


def select_topk_gates(gates: GateParams, params: ModelParams, probe: Corpus, r: int,
                      block_len: int | None = None) -> tuple[int, ...]:
    """Fixed top-``r`` layers by mean gate score over ``probe``; independent of later inputs."""
    return topk_from_scores(gate_scores(gates, params, probe, block_len), r)
