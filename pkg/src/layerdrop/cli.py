"""``layerdrop`` command line: train, eval, prune, sweep, bench, gradcheck.

Each run resolves a JSON config (defaults <- ``--config`` file <- ``--set``
overrides <- flags), writes it into ``manifest.json`` inside a fresh run
directory, and records every artifact there. Passing a manifest back as
``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
import tempfile

from threadpoolctl import threadpool_limits

from . import __version__
from . import numcore as nc
from .config import ConfigError, GroupScheme, ModelConfig
from .data import Corpus, gen_synthetic, load_corpus
from .evaluation import (SweepResult, drop_vs_prune_grid, perplexity, prune_curve,
                         scheme_comparison, soft_checks, write_soft_checks)
from .experiments import reference_config, run_reference
from .model import forward_lm, init_params, load_checkpoint, save_checkpoint
from .numcore import Rng
from .prune import PruneSpec, PruneSpecError, keep_to_json, layer_importance_sweep, prune_model
from .train import TrainConfig, TrainingDiverged, measure_throughput, train_lm

log = logging.getLogger("layerdrop")

COMMANDS = ("train", "eval", "prune", "sweep", "bench", "gradcheck")
MANIFEST_VERSION = 1

DEFAULTS = {
    "model": ModelConfig().to_dict(),
    "train": {**TrainConfig().to_dict(), "warmup_steps": None},
    "data": {"path": None, "split": [0.9, 0.05, 0.05], "synthetic": None,
             "synthetic_size": 200000, "synthetic_seed": 0},
    "eval": {"checkpoint": None, "keep": None, "split": "valid", "block_len": None},
    "prune": {"checkpoint": None, "strategy": "every_other", "p": None, "r": None, "keep": None,
              "which": "first_half", "budget": 100, "gate_steps": 200, "out": None},
    "sweep": {"experiment": "prune_curve", "train_ps": [0.0, 0.25, 0.5], "prune_rs": None,
              "schemes": ["layer", "sublayer", "head", "ffn_matrix", "head+layer"],
              "target_fraction": 0.2, "depths": None, "checkpoints": {},
              "importance_r": None, "importance_trials": 20, "reference": {}},
    "bench": {"p_values": [0.0, 0.25, 0.5], "steps": 230, "batch": 4},
    "output": {"timing": True},
    "gradcheck": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ffn": 64, "vocab_size": 32,
                  "seq_len": 8, "h": 1e-5, "threshold": 1e-4, "seed": 0},
}
# sections whose keys are free-form
OPEN_KEYS = {("sweep", "checkpoints"), ("sweep", "reference")}


def version_string() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --- config ------------------------------------------------------------------


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    for key, val in over.items():
        here = path + (key,)
        if key not in base and path not in OPEN_KEYS and here[:2] not in OPEN_KEYS:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}", ".".join(here))
        if isinstance(val, dict) and isinstance(base.get(key), dict) and here not in OPEN_KEYS:
            _merge(base[key], val, here)
        else:
            base[key] = val
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}", assignment)
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}", key)
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or (leaf not in node and tuple(parts[:-1]) not in OPEN_KEYS):
        raise ConfigError(f"unknown config key {key!r}", key)
    node[leaf] = _parse_value(raw)


def load_config(path: str | None, sets: list[str], command: str) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", "config") from exc
        if "manifest_version" in loaded:
            if loaded.get("command") != command:
                raise ConfigError(f"manifest is for {loaded.get('command')!r}, not {command!r}",
                                  "command")
            loaded = loaded["config"]
        _merge(cfg, loaded)
    for s in sets:
        apply_set(cfg, s)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(cfg["model"])
    except ConfigError as exc:
        raise ConfigError(str(exc), f"model.{exc.key}" if exc.key else "model") from exc
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}", "model") from exc


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except ConfigError as exc:
        raise ConfigError(str(exc), f"train.{exc.key}" if exc.key else "train") from exc


def load_data(cfg: dict, base_dir: str = "."):
    d = cfg["data"]
    if d.get("synthetic"):
        full = gen_synthetic(d["synthetic"], int(d["synthetic_size"]), int(d["synthetic_seed"]))
        n = len(full)
        a = int(round(n * d["split"][0]))
        b = a + int(round(n * d["split"][1]))
        return (Corpus(full.tokens[:a], "train", full.source),
                Corpus(full.tokens[a:b], "valid", full.source),
                Corpus(full.tokens[b:], "test", full.source))
    if not d.get("path"):
        raise ConfigError("data.path (or data.synthetic) is required", "data.path")
    path = d["path"] if os.path.isabs(d["path"]) else os.path.join(base_dir, d["path"])
    try:
        return load_corpus(path, tuple(d["split"]))
    except ValueError as exc:
        raise ConfigError(str(exc), "data.split") from exc


# --- run directory and manifest ----------------------------------------------


def _atomic_json(path: str, obj) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """A run directory owned by one process through a lockfile."""

    def __init__(self, root: str, command: str, seed: int, cfg: dict):
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        self.path = os.path.join(root, f"{command}-{stamp}-s{seed}")
        os.makedirs(self.path, exist_ok=False)
        self.lock = os.path.join(self.path, ".lock")
        fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self.manifest = {
            "manifest_version": MANIFEST_VERSION,
            "command": command,
            "config": cfg,
            "seed": seed,
            "version": version_string(),
            "start": _dt.datetime.now().isoformat(),
            "end": None,
            "status": "running",
            "artifacts": {},
        }
        self.external: list[str] = []
        self.write_manifest()

    def add_artifact(self, path: str) -> None:
        """Track an output written outside the run directory."""
        self.external.append(os.path.abspath(path))

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)

    def write_manifest(self) -> None:
        _atomic_json(self.file("manifest.json"), self.manifest)

    def finish(self, status: str) -> None:
        arts = {}
        for name in sorted(os.listdir(self.path)):
            if name in ("manifest.json", ".lock") or name.endswith(".tmp"):
                continue
            full = self.file(name)
            if os.path.isfile(full):
                arts[name] = _sha256(full)
        for full in self.external:
            if os.path.isfile(full):
                arts[full] = _sha256(full)
        self.manifest.update(end=_dt.datetime.now().isoformat(), status=status, artifacts=arts)
        self.write_manifest()
        if os.path.exists(self.lock):
            os.unlink(self.lock)


# --- commands ----------------------------------------------------------------


def _parse_keep(val):
    if val is None:
        return None
    if isinstance(val, str):
        return tuple(int(x) for x in val.replace(",", " ").split())
    return tuple(int(x) for x in val)


def cmd_train(cfg: dict, run: RunDir) -> int:
    mc = model_config(cfg)
    tc = train_config(cfg)
    mc.validate_for_training()
    train, valid, _ = load_data(cfg)
    try:
        train_lm(mc, tc, train, valid, out_dir=run.path,
                 include_timing=bool(cfg["output"]["timing"]))
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"checkpoint: {run.file('model.ckpt')}")
    return 0


def _require(cfg: dict, section: str, key: str):
    val = cfg[section].get(key)
    if val is None:
        raise ConfigError(f"{section}.{key} is required", f"{section}.{key}")
    return val


def cmd_eval(cfg: dict, run: RunDir) -> int:
    params = load_checkpoint(_require(cfg, "eval", "checkpoint"))
    train, valid, test = load_data(cfg)
    corpus = {"train": train, "valid": valid, "test": test}[cfg["eval"]["split"]]
    keep = _parse_keep(cfg["eval"]["keep"])
    ppl = perplexity(params, corpus, keep=keep, block_len=cfg["eval"]["block_len"])
    out = {"split": cfg["eval"]["split"], "keep": list(keep) if keep else None, "ppl": ppl}
    with open(run.file("eval.json"), "w") as fh:
        json.dump(out, fh, indent=2)
    print(f"ppl: {ppl!r}")
    return 0


def cmd_prune(cfg: dict, run: RunDir) -> int:
    pc = cfg["prune"]
    params = load_checkpoint(_require(cfg, "prune", "checkpoint"))
    n = params.config.n_layers
    spec = PruneSpec(strategy=pc["strategy"], p=pc["p"], r=pc["r"],
                     keep=_parse_keep(pc["keep"]) or (), budget=int(pc["budget"]),
                     which=pc["which"], seed=int(cfg["train"]["seed"]))
    context = {"params": params}
    if spec.strategy in ("search_on_valid", "data_driven"):
        train, valid, _ = load_data(cfg)
        context.update(train=train, valid=valid, probe=valid, steps=int(pc["gate_steps"]))
    try:
        keep = spec.resolve(n, **context)
    except PruneSpecError as exc:
        raise ConfigError(str(exc), "prune.strategy") from exc
    small = prune_model(params, keep)
    out = pc["out"] or run.file("pruned.ckpt")
    save_checkpoint(out, small)
    if pc["out"]:
        run.add_artifact(out)
    with open(run.file("keep.json"), "w") as fh:
        fh.write(keep_to_json(keep, strategy=spec.strategy, n_layers=n))
    print(f"keep: {' '.join(map(str, keep))}")
    print(f"checkpoint: {out}")
    return 0


def cmd_sweep(cfg: dict, run: RunDir) -> int:
    sc = cfg["sweep"]
    exp = sc["experiment"]
    if exp == "reference":
        overrides = copy.deepcopy(sc.get("reference") or {})
        overrides.setdefault("train", {}).setdefault("seed", cfg["train"]["seed"])
        run_reference(reference_config(overrides), run.path)
        print(f"results: {run.file('criteria.csv')}")
        return 0
    mc = model_config(cfg)
    tc = train_config(cfg)
    train, valid, _ = load_data(cfg)
    if exp == "prune_curve":
        ckpts = sc["checkpoints"]
        if not ckpts.get("layerdrop") or not ckpts.get("baseline"):
            raise ConfigError("sweep.checkpoints needs layerdrop and baseline paths",
                              "sweep.checkpoints")
        scratch = {int(r): load_checkpoint(p) for r, p in ckpts.get("scratch", {}).items()}
        res = prune_curve(load_checkpoint(ckpts["layerdrop"]), load_checkpoint(ckpts["baseline"]),
                          scratch, valid, sc["depths"], tc.block_len)
    elif exp == "drop_vs_prune":
        rs = sc["prune_rs"] or sorted({mc.n_layers, mc.n_layers // 2, max(1, mc.n_layers // 4)},
                                      reverse=True)
        res = drop_vs_prune_grid([float(p) for p in sc["train_ps"]], [int(r) for r in rs],
                                 mc, tc, train, valid)
    elif exp == "schemes":
        res = scheme_comparison([GroupScheme.parse(s) for s in sc["schemes"]], mc, tc, train,
                                valid, float(sc["target_fraction"]))
    elif exp == "importance":
        ckpt = sc["checkpoints"].get("model")
        if not ckpt:
            raise ConfigError("sweep.checkpoints.model is required", "sweep.checkpoints.model")
        params = load_checkpoint(ckpt)
        r = sc["importance_r"] or params.config.n_layers // 2
        rows = layer_importance_sweep(params, valid, int(r), int(sc["importance_trials"]),
                                      Rng(tc.seed), block_len=tc.block_len)
        res = SweepResult("importance", ["layer", "mean_ppl", "trials"], ["layer"])
        for row in rows:
            res.add(**row)
    else:
        raise ConfigError(f"unknown sweep experiment {exp!r}", "sweep.experiment")
    res.write_csv(run.file(f"{exp}.csv"))
    res.write_manifest(run.file(f"{exp}_cells.json"), seed=tc.seed)
    checks = soft_checks(res, mc.n_layers)
    if checks:
        write_soft_checks(run.file(f"{exp}_soft_checks.csv"), checks)
        for name, ok, detail in checks:
            print(f"soft check {'PASS' if ok else 'FAIL'}: {name} ({detail})")
    print(f"results: {run.file(exp + '.csv')}")
    return 0


def cmd_bench(cfg: dict, run: RunDir) -> int:
    mc = model_config(cfg)
    bc = cfg["bench"]
    tc = train_config(cfg).replace(batch=int(bc["batch"]), block_len=mc.max_seq_len)
    rows = measure_throughput(mc, [float(p) for p in bc["p_values"]], int(bc["steps"]), tc)
    base = rows[0][1]
    with open(run.file("throughput.csv"), "w") as fh:
        fh.write("p,tokens_per_sec,speedup\n")
        for p, tps in rows:
            fh.write(f"{p!r},{tps!r},{tps / base!r}\n")
            print(f"p={p}: {tps:.0f} tok/s ({tps / base:.2f}x)")
    return 0


def gradcheck_error(gc: dict) -> float:
    mc = ModelConfig(n_layers=gc["n_layers"], d_model=gc["d_model"], n_heads=gc["n_heads"],
                     d_ffn=gc["d_ffn"], vocab_size=gc["vocab_size"], max_seq_len=gc["seq_len"])
    rng = Rng(gc["seed"])
    params = init_params(mc, rng.spawn("init"))
    toks = rng.integers(mc.vocab_size, gc["seq_len"] + 1)

    def loss(_):
        return nc.cross_entropy(forward_lm(toks[:-1], params), toks[1:])

    return nc.grad_check(loss, params.tensors(), gc["h"])


def cmd_gradcheck(cfg: dict, run: RunDir) -> int:
    gc = cfg["gradcheck"]
    err = gradcheck_error(gc)
    with open(run.file("gradcheck.json"), "w") as fh:
        json.dump({"max_rel_error": err, "threshold": gc["threshold"]}, fh, indent=2)
    print(f"max relative error: {err:.3e}")
    return 0 if err < gc["threshold"] else 1


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "prune": cmd_prune, "sweep": cmd_sweep,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerdrop", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config or a previous run's manifest.json")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. model.layerdrop_p=0.5")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", default="runs")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)
        if name in ("eval", "prune"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--keep", help="comma-separated 1-indexed depths")
            p.add_argument("--split", choices=("train", "valid", "test"))
        if name == "prune":
            p.add_argument("--strategy", choices=("every_other", "keep", "search_on_valid",
                                                  "data_driven", "chunk", "random_k"))
            p.add_argument("--p", type=float)
            p.add_argument("--r", type=int)
            p.add_argument("--keep")
            p.add_argument("--which", choices=("first_half", "last_half"))
            p.add_argument("--budget", type=int)
            p.add_argument("--out")
        if name == "sweep":
            p.add_argument("--experiment", choices=("prune_curve", "drop_vs_prune", "schemes",
                                                    "importance", "reference"))
    return parser


def _flag_overrides(args, cfg: dict) -> None:
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    section = {"eval": "eval", "prune": "prune", "sweep": "sweep"}.get(args.command)
    if section is None:
        return
    for key in ("checkpoint", "keep", "split", "strategy", "p", "r", "which", "budget", "out",
                "experiment"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[section][key] = val


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.command)
        _flag_overrides(args, cfg)
        if args.command in ("train", "bench", "sweep"):
            model_config(cfg)
            train_config(cfg)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return 2

    # fixed thread count keeps BLAS reduction order (and so results) stable
    limiter = threadpool_limits(max(1, args.threads))

    seed = int(cfg["train"]["seed"])
    os.makedirs(args.out_dir, exist_ok=True)
    rd = RunDir(args.out_dir, args.command, seed, cfg)
    print(f"run_dir: {rd.path}")
    status = "failed"
    try:
        code = HANDLERS[args.command](cfg, rd)
        status = "done" if code == 0 else "failed"
        return code
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.info("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        rd.finish(status)
        limiter.restore_original_limits()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
