"""Perplexity and the figure-style sweeps (prune curve, train-p x prune-r grid, schemes)."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .config import GroupScheme, ModelConfig, param_count
from .data import Corpus, make_blocks
from .model import ModelParams, forward_lm
from .prune import depth_keep, prune_model
from .structdrop import GroupMask, matched_rate
from .train import TrainConfig, train_lm


def nll_sum(params: ModelParams, corpus: Corpus, keep=None, block_len: int | None = None,
            batch: int = 16) -> tuple[float, int]:
    """Total next-token negative log-likelihood and token count, eval mode."""
    cfg = params.config
    block_len = block_len or cfg.max_seq_len
    mask = None
    if keep is not None and len(keep) != cfg.n_layers:
        mask = GroupMask.from_keep(cfg, keep)
    total, count = 0.0, 0
    with nc.no_grad():
        for b in make_blocks(corpus, batch, block_len):
            logits = forward_lm(b.inputs, params, mask, "eval").data.reshape(-1, cfg.vocab_size)
            lp = nc.log_softmax_np(logits)
            t = b.targets.reshape(-1)
            total += float(-lp[np.arange(t.size), t].sum())
            count += t.size
    return total, count


def perplexity(params: ModelParams, corpus: Corpus, keep=None, block_len: int | None = None,
               batch: int = 16) -> float:
    """``exp`` of the mean token cross-entropy over contiguous blocks.

    ``keep`` (1-indexed depths) evaluates the layer-masked model; ``None``
    or all depths evaluates the full model.
    """
    if len(corpus) < 2:
        raise ValueError("perplexity needs a non-empty corpus")
    total, count = nll_sum(params, corpus, keep, block_len, batch)
    return math.exp(total / count)


@dataclass
class SweepResult:
    """CSV-shaped sweep output; ``key_cols`` must be unique across rows."""

    experiment: str
    columns: list[str]
    key_cols: list[str]
    rows: list[dict] = field(default_factory=list)
    cells: list[dict] = field(default_factory=list)  # manifest entries

    def add(self, **row) -> None:
        key = tuple(row.get(k) for k in self.key_cols)
        if any(tuple(r.get(k) for k in self.key_cols) == key for r in self.rows):
            raise ValueError(f"duplicate sweep key {key}")
        self.rows.append({"experiment": self.experiment, **row})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["experiment"] + self.columns, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def write_manifest(self, path, **extra) -> None:
        with open(path, "w") as fh:
            json.dump({"experiment": self.experiment, "cells": self.cells, **extra}, fh,
                      indent=2, sort_keys=True)

    def column(self, name: str, **where) -> list:
        return [r[name] for r in self.rows if all(r.get(k) == v for k, v in where.items())]


def default_depths(n: int) -> list[int]:
    return sorted({max(1, round(n * f)) for f in (1.0, 0.75, 0.5, 0.25)}, reverse=True)


def prune_curve(params_layerdrop: ModelParams, params_baseline: ModelParams,
                scratch_models: dict[int, ModelParams], valid: Corpus,
                depths: list[int] | None = None, block_len: int | None = None) -> SweepResult:
    """Valid perplexity vs depth for three curves.

    ``layerdrop`` and ``baseline`` are pruned to each depth with the balanced
    every-other rule; ``scratch`` evaluates the model trained at that depth.
    """
    a, b = params_layerdrop.config, params_baseline.config
    if (a.n_layers, a.d_model, a.vocab_size) != (b.n_layers, b.d_model, b.vocab_size):
        raise ValueError("layerdrop and baseline models must share depth, d_model and vocab")
    n = a.n_layers
    for r, m in scratch_models.items():
        if m.config.d_model != a.d_model or m.config.vocab_size != a.vocab_size:
            raise ValueError(f"scratch model at depth {r} does not match d_model/vocab")
    depths = depths or default_depths(n)
    res = SweepResult("prune_curve", ["label", "r", "keep", "ppl", "params_count", "layers_active"],
                      ["label", "r"])
    for r in depths:
        keep = depth_keep(n, r)
        for label, params in (("layerdrop", params_layerdrop), ("baseline", params_baseline)):
            ppl = perplexity(params, valid, keep=keep, block_len=block_len)
            res.add(label=label, r=r, keep=" ".join(map(str, keep)), ppl=ppl,
                    params_count=param_count(params.config, r), layers_active=r)
        if r in scratch_models:
            m = scratch_models[r]
            res.add(label="scratch", r=r, keep="", ppl=perplexity(m, valid, block_len=block_len),
                    params_count=m.num_params(), layers_active=m.config.n_layers)
    return res


def drop_vs_prune_grid(train_ps: list[float], prune_rs: list[int], model_cfg: ModelConfig,
                       train_cfg: TrainConfig, corpus: Corpus, valid: Corpus) -> SweepResult:
    """One model per train-time LayerDrop rate, each evaluated at every prune depth."""
    res = SweepResult("drop_vs_prune", ["train_p", "r", "keep", "ppl", "params_count",
                                        "layers_active"], ["train_p", "r"])
    n = model_cfg.n_layers
    for p in train_ps:
        params, _ = train_lm(model_cfg.replace(layerdrop_p=p), train_cfg, corpus, valid)
        res.cells.append({"train_p": p, "seed": train_cfg.seed, "model": model_cfg.replace(
            layerdrop_p=p).to_dict(), "train": train_cfg.to_dict()})
        for r in prune_rs:
            keep = depth_keep(n, r)
            res.add(train_p=p, r=r, keep=" ".join(map(str, keep)),
                    ppl=perplexity(params, valid, keep=keep, block_len=train_cfg.block_len),
                    params_count=param_count(model_cfg, r), layers_active=r)
    return res


def scheme_comparison(schemes: list[GroupScheme], model_cfg: ModelConfig, train_cfg: TrainConfig,
                      corpus: Corpus, valid: Corpus, target_fraction: float = 0.2) -> SweepResult:
    """Train one model per scheme at a rate giving the same expected weight-drop fraction."""
    res = SweepResult("schemes", ["scheme", "rate", "ppl", "params_count", "layers_active"],
                      ["scheme"])
    for scheme in schemes:
        rate = matched_rate(model_cfg, scheme, target_fraction)
        mc = model_cfg.replace(scheme=scheme, layerdrop_p=min(rate, 0.99))
        params, _ = train_lm(mc, train_cfg, corpus, valid)
        res.cells.append({"scheme": str(scheme), "rate": rate, "seed": train_cfg.seed,
                          "model": mc.to_dict(), "train": train_cfg.to_dict()})
        res.add(scheme=str(scheme), rate=mc.layerdrop_p,
                ppl=perplexity(params, valid, block_len=train_cfg.block_len),
                params_count=params.num_params(), layers_active=mc.n_layers)
    return res


# --- soft checks (reported, never gating) ------------------------------------


def soft_checks(res: SweepResult, n_layers: int | None = None, band: float = 0.05) -> list[tuple[str, bool, str]]:
    """Direction-only comparisons for a sweep, each ``(name, passed, detail)``."""
    out = []
    if res.experiment == "prune_curve":
        for r in sorted({row["r"] for row in res.rows}):
            if n_layers and r > n_layers // 2:
                continue
            ld = res.column("ppl", label="layerdrop", r=r)
            bl = res.column("ppl", label="baseline", r=r)
            if ld and bl:
                out.append((f"layerdrop below baseline at r={r}", ld[0] < bl[0],
                            f"{ld[0]:.3f} vs {bl[0]:.3f}"))
    elif res.experiment == "drop_vs_prune":
        rs = sorted({row["r"] for row in res.rows})
        n = n_layers or max(rs)
        full = {row["train_p"]: row["ppl"] for row in res.rows if row["r"] == max(rs)}
        best_full = min(full.values())
        for p, v in sorted(full.items()):
            out.append((f"full depth within band for train_p={p}", v <= best_full * (1 + band),
                        f"{v:.3f} vs best {best_full:.3f}"))
        r = rs[0]
        cells = {row["train_p"]: row["ppl"] for row in res.rows if row["r"] == r}
        best_p = min(cells, key=cells.get)
        out.append((f"best train_p at r={r} >= 0.5*(1-r/N)", best_p >= 0.5 * (1 - r / n),
                    f"best train_p={best_p}"))
    elif res.experiment == "schemes":
        ppl = {row["scheme"]: row["ppl"] for row in res.rows}
        if "layer" in ppl and "sublayer" in ppl:
            rel = abs(ppl["layer"] - ppl["sublayer"]) / ppl["layer"]
            out.append(("layer vs sublayer within band", rel <= band, f"rel diff {rel:.3f}"))
        if "layer" in ppl and "head" in ppl:
            out.append(("head not better than layer", ppl["head"] >= ppl["layer"] * (1 - band),
                        f"{ppl['head']:.3f} vs {ppl['layer']:.3f}"))
    return out


def write_soft_checks(path, checks) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "passed", "detail"])
        for name, ok, detail in checks:
            w.writerow([name, int(ok), detail])


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return os.fspath(path)
