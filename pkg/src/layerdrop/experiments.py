"""The reference pruning experiment: baseline vs LayerDrop vs from-scratch.

One run trains three byte-level LMs with identical seeds and steps, prunes
the two deep ones to half depth without finetuning, then measures chunk
pruning, post-prune finetuning and per-layer importance on the LayerDrop
model. Every output CSV is deterministic given the config.
"""

from __future__ import annotations

import copy
import csv
import logging
import os
import statistics

from .config import ModelConfig
from .data import load_corpus
from .evaluation import perplexity, prune_curve, soft_checks, write_soft_checks
from .model import save_checkpoint
from .numcore import Rng
from .prune import chunk_keep, depth_keep, layer_importance_sweep
from .train import TrainConfig, finetune_pruned, train_lm

log = logging.getLogger(__name__)

REFERENCE_DEFAULTS = {
    "corpus": "data/shakespeare_1mb.txt",
    "split": [0.9, 0.05, 0.05],
    "model": {"n_layers": 8, "d_model": 128, "n_heads": 4, "d_ffn": 512,
              "vocab_size": 256, "max_seq_len": 128, "dropout": 0.1},
    "train": {"steps": 3000, "batch": 8, "block_len": 128, "lr_peak": 1e-3,
              "seed": 0, "eval_every": 500},
    "layerdrop_p": 0.5,
    "prune_depth": 4,
    "finetune": {"steps": 500, "lr_peak": 1e-4, "warmup_steps": 50},
    "importance": {"r": 4, "trials": 35},
    "importance_seeds": [1, 2],
    "save_checkpoints": True,
}

# criterion thresholds
MIN_RELATIVE_MARGIN = 0.10
MAX_SCRATCH_RATIO = 1.15


def reference_config(overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(REFERENCE_DEFAULTS)
    for key, val in (overrides or {}).items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _keep_str(keep) -> str:
    return " ".join(map(str, keep))


def run_reference(cfg: dict, out_dir: str, base_dir: str = ".") -> dict:
    """Run the whole experiment, writing CSVs (and checkpoints) under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    corpus_path = cfg["corpus"]
    if not os.path.isabs(corpus_path):
        corpus_path = os.path.join(base_dir, corpus_path)
    train, valid, _ = load_corpus(corpus_path, tuple(cfg["split"]))
    mc = ModelConfig(**cfg["model"])
    tc = TrainConfig(**cfg["train"])
    r = cfg["prune_depth"]
    n = mc.n_layers
    keep = depth_keep(n, r)

    def fit(name, model_cfg, seed=None):
        tcs = tc if seed is None else tc.replace(seed=seed)
        log.info("training %s (%d layers, layerdrop %.2f, seed %d)", name, model_cfg.n_layers,
                 model_cfg.layerdrop_p, tcs.seed)
        params, metrics = train_lm(model_cfg, tcs, train, valid)
        metrics.write_csv(os.path.join(out_dir, f"train_{name}_metrics.csv"), include_timing=False)
        if cfg.get("save_checkpoints"):
            save_checkpoint(os.path.join(out_dir, f"{name}.ckpt"), params)
        return params

    baseline = fit("baseline", mc.replace(layerdrop_p=0.0))
    layerdrop = fit("layerdrop", mc.replace(layerdrop_p=cfg["layerdrop_p"]))
    scratch = fit("scratch", mc.replace(n_layers=r, layerdrop_p=0.0))

    bl = tc.block_len
    ppl = {
        ("baseline", "full"): perplexity(baseline, valid, block_len=bl),
        ("baseline", "every_other"): perplexity(baseline, valid, keep=keep, block_len=bl),
        ("layerdrop", "full"): perplexity(layerdrop, valid, block_len=bl),
        ("layerdrop", "every_other"): perplexity(layerdrop, valid, keep=keep, block_len=bl),
        ("layerdrop", "first_half"): perplexity(layerdrop, valid, keep=chunk_keep(n, "first_half"), block_len=bl),
        ("layerdrop", "last_half"): perplexity(layerdrop, valid, keep=chunk_keep(n, "last_half"), block_len=bl),
        ("scratch", "full"): perplexity(scratch, valid, block_len=bl),
    }
    keeps = {"full": tuple(range(1, n + 1)), "every_other": keep,
             "first_half": chunk_keep(n, "first_half"), "last_half": chunk_keep(n, "last_half")}
    _write_rows(os.path.join(out_dir, "reference.csv"), ["model", "selection", "keep", "ppl"],
                [(m, s, _keep_str(keeps[s]) if m != "scratch" else _keep_str(range(1, r + 1)), v)
                 for (m, s), v in ppl.items()])

    curve = prune_curve(layerdrop, baseline, {r: scratch}, valid, block_len=bl)
    curve.write_csv(os.path.join(out_dir, "prune_curve.csv"))
    write_soft_checks(os.path.join(out_dir, "prune_curve_soft_checks.csv"),
                      soft_checks(curve, n))

    ft = cfg["finetune"]
    ft_cfg = tc.replace(steps=ft["steps"], lr_peak=ft["lr_peak"], warmup_steps=ft["warmup_steps"],
                        eval_every=max(1, ft["steps"]))
    tuned, ft_metrics = finetune_pruned(layerdrop, keep, train, ft["steps"], ft_cfg)
    ft_metrics.write_csv(os.path.join(out_dir, "finetune_metrics.csv"), include_timing=False)
    after = perplexity(tuned, valid, block_len=bl)
    _write_rows(os.path.join(out_dir, "finetune.csv"), ["stage", "keep", "ppl"],
                [("pruned", _keep_str(keep), ppl[("layerdrop", "every_other")]),
                 ("finetuned", _keep_str(keep), after)])

    imp = cfg["importance"]
    importance = {tc.seed: layer_importance_sweep(layerdrop, valid, imp["r"], imp["trials"],
                                                  Rng(tc.seed), block_len=bl)}
    for seed in cfg.get("importance_seeds", []):
        extra = fit(f"layerdrop_seed{seed}", mc.replace(layerdrop_p=cfg["layerdrop_p"]), seed)
        importance[seed] = layer_importance_sweep(extra, valid, imp["r"], imp["trials"],
                                                  Rng(seed), block_len=bl)
    _write_rows(os.path.join(out_dir, "importance.csv"), ["seed", "layer", "mean_ppl", "trials"],
                [(seed, row["layer"], row["mean_ppl"], row["trials"])
                 for seed, rows in importance.items() for row in rows])

    results = {"ppl": ppl, "finetuned": after, "importance": importance, "n_layers": n}
    _write_rows(os.path.join(out_dir, "criteria.csv"), ["criterion", "value", "threshold", "passed"],
                [(c, v, t, int(ok)) for c, v, t, ok in reference_criteria(results)])
    return results


def importance_direction(rows: list[dict]) -> tuple[bool, float, float, float]:
    """First and last layer each at or above the median layer's mean perplexity."""
    vals = [row["mean_ppl"] for row in sorted(rows, key=lambda x: x["layer"])]
    med = statistics.median(vals)
    return vals[0] >= med and vals[-1] >= med, vals[0], vals[-1], med


def reference_criteria(results: dict) -> list[tuple[str, float, str, bool]]:
    ppl = results["ppl"]
    ld = ppl[("layerdrop", "every_other")]
    base = ppl[("baseline", "every_other")]
    scratch = ppl[("scratch", "full")]
    margin = (base - ld) / base
    out = [
        ("6a pruned layerdrop beats pruned baseline by >=10%", margin,
         f">= {MIN_RELATIVE_MARGIN}", margin >= MIN_RELATIVE_MARGIN),
        ("6b pruned layerdrop within 1.15x of scratch", ld / scratch,
         f"<= {MAX_SCRATCH_RATIO}", ld / scratch <= MAX_SCRATCH_RATIO),
        ("8 first-half chunk worse than every-other", ppl[("layerdrop", "first_half")],
         f"> {ld!r}", ppl[("layerdrop", "first_half")] > ld),
        ("8 last-half chunk worse than every-other", ppl[("layerdrop", "last_half")],
         f"> {ld!r}", ppl[("layerdrop", "last_half")] > ld),
        ("9 finetuning does not increase ppl", results["finetuned"], f"<= {ld!r}",
         results["finetuned"] <= ld),
    ]
    seeds_ok = []
    for seed, rows in results["importance"].items():
        ok, first, last, med = importance_direction(rows)
        seeds_ok.append(ok)
        out.append((f"11 first/last layer importance >= median (seed {seed})", min(first, last),
                    f">= {med!r}", ok))
    # the importance direction only gates when it holds on every one of >= 3 seeds
    stable = len(seeds_ok) >= 3 and all(seeds_ok)
    out.append(("11 stable across seeds (gating)", float(sum(seeds_ok)),
                f"== {len(seeds_ok)} and >= 3", stable))
    return out


def gating_criteria(rows: list[tuple[str, float, str, bool]]) -> list[tuple[str, float, str, bool]]:
    """Criteria that must pass; per-seed importance rows are informational."""
    stable = any(name.startswith("11 stable") and ok for name, _, _, ok in rows)
    return [row for row in rows
            if not row[0].startswith("11 ") or (stable and row[0].startswith("11 stable"))]
