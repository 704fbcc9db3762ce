"""Command-line pipeline: simulate, complexity, gen, train, finetune, eval,
analyze, report, verify and ``config init``.

Every stage records its input hash and output file hashes in
``<out>/manifest.json``; a stage whose inputs and outputs still match is
skipped.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import tomli
import torch

from . import __version__, analysis, eca
from . import complexity as cx
from .datagen import chess, reasoning
from .datagen.dataset import DatasetFormatError, load_dataset, save_dataset
from .datagen.pretrain import PretrainConfig, gen_pretrain
from .model import (
    CheckpointFormatError,
    ModelConfig,
    NumericalDivergenceError,
    TrainConfig,
    evaluate,
    finetune_frozen,
    load_checkpoint,
    save_checkpoint,
    train_pretrain,
)
from .model.train import FrozenWeightDriftError, TrainHistory, efficiency

log = logging.getLogger("ecalab")

OUT_ENV = "ECALAB_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
TASKS = ("easy", "hard", "chess")


class ConfigError(ValueError):
    pass


class MissingPrerequisiteError(RuntimeError):
    pass


TEMPLATE = """\
# ecalab experiment configuration.  Every key is optional; the values shown
# are the defaults.

[experiment]
# explicit list of rule ids, "all" (256 rules) or "canonical" (88 symmetry classes)
rules = [0, 168, 4, 179, 30, 150, 54, 110]
horizons = [1]          # prediction horizons for pretraining (1 and/or 5)
seeds = [0]             # one pretraining + finetuning run per seed
workers = 1             # parallel runs over independent rules

[complexity]
width = 256
steps = 1000
density = 0.5
seed = 0
lyapunov_width = 256
lyapunov_trials = 32
lyapunov_steps = 200
krylov_width = 10
krylov_horizon = 32

[pretrain]
n_samples = 2048
width = 256             # automaton width
steps = 1000            # evolution length
t_len = 60              # window rows
x_len = 100             # window columns
density = 0.5
target = "single"       # "single": state at the horizon; "all": every state up to it

[model]
n_layers = 4
n_heads = 4
d_model = 128
d_ff = 512
dropout = 0.0

[train]                 # pretraining optimizer
lr = 1e-3
weight_decay = 0.01
warmup_frac = 0.1
lr_min = 0.0
batch_size = 64
grad_accum_steps = 1
clip_norm = 1.0
max_epochs = 50
patience = 20
min_delta = 1e-4

[easy]
n_train = 256
n_val = 64
seq_len = 20
lr = 1e-4
max_epochs = 1000
stop_at_accuracy = 0.8  # efficiency only needs the first epoch at 80%

[hard]
n_train = 256
n_val = 64
seq_len = 20
lr = 1e-5
max_epochs = 10000
stop_at_accuracy = 0.8

[chess]
pgn = []                # PGN files; the chess task is skipped when empty
min_rating = 2200
lr = 1e-4
max_epochs = 200

[analysis]
probe_size = 256        # held-out windows per rule for attention and CKA
cka_mode = "activation" # or "weight"
"""

_SECTIONS = ("experiment", "complexity", "pretrain", "model", "train", "easy", "hard", "chess", "analysis")
_TASK_DATA_KEYS = {"n_train", "n_val", "seq_len", "pgn", "min_rating"}


# --- configuration --------------------------------------------------------------------


def _build(cls, values: dict, section: str, **extra):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**{**values, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def resolve_rules(spec) -> list[int]:
    if spec == "all":
        return list(range(256))
    if spec == "canonical":
        return [c.canonical for c in eca.symmetry_classes()]
    if not isinstance(spec, list) or not spec:
        raise ConfigError('rules must be a non-empty list, "all" or "canonical"')
    try:
        return sorted({eca.check_rule(r) for r in spec})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad rule list: {exc}") from None


def load_config(path: str | Path | None) -> dict:
    """Parse and validate a TOML config into ready-to-use objects."""
    base = tomli.loads(TEMPLATE)
    if path is not None:
        try:
            user = tomli.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        extra = set(user) - set(_SECTIONS)
        if extra:
            raise ConfigError(f"unknown sections: {sorted(extra)}")
        for k, v in user.items():
            if not isinstance(v, dict):
                raise ConfigError(f"{k} must be a [table]")
            base[k].update(v)
    exp = base["experiment"]
    unknown = set(exp) - {"rules", "horizons", "seeds", "workers"}
    if unknown:
        raise ConfigError(f"[experiment] unknown keys: {sorted(unknown)}")
    horizons = exp["horizons"]
    if not horizons or any(h not in (1, 5) for h in horizons):
        raise ConfigError("horizons must be a non-empty subset of {1, 5}")
    seeds = exp["seeds"]
    if not seeds or any(not isinstance(s, int) or s < 0 for s in seeds):
        raise ConfigError("seeds must be non-negative integers")
    pre = dict(base["pretrain"])
    n_samples = pre.pop("n_samples")
    pre_cfg = _build(PretrainConfig, pre, "pretrain")
    cfg = {
        "raw": base,
        "rules": resolve_rules(exp["rules"]),
        "horizons": sorted(set(horizons)),
        "seeds": sorted(set(seeds)),
        "workers": int(exp["workers"]),
        "complexity": _build(cx.ComplexityConfig, base["complexity"], "complexity"),
        "n_samples": int(n_samples),
        "pretrain": pre_cfg,
        "model": _build(ModelConfig, base["model"], "model", context_len=pre_cfg.t_len, input_width=pre_cfg.x_len),
        "train": _build(TrainConfig, base["train"], "train"),
        "analysis": base["analysis"],
    }
    for task in TASKS:
        sec = base[task]
        cfg[task] = {k: v for k, v in sec.items() if k in _TASK_DATA_KEYS}
        cfg[f"{task}_train"] = _build(TrainConfig, {k: v for k, v in sec.items() if k not in _TASK_DATA_KEYS}, task)
    for task in ("easy", "hard"):
        if cfg[task]["seq_len"] - 1 > pre_cfg.t_len:
            raise ConfigError(f"[{task}] seq_len - 1 exceeds the model context {pre_cfg.t_len}")
    if cfg["analysis"].get("cka_mode") not in ("activation", "weight"):
        raise ConfigError('[analysis] cka_mode must be "activation" or "weight"')
    if cfg["workers"] < 1 or cfg["n_samples"] < 2:
        raise ConfigError("workers must be >= 1 and n_samples >= 2")
    cfg["hash"] = hashlib.sha256(json.dumps(base, sort_keys=True).encode()).hexdigest()
    return cfg


# --- manifest and stage cache -------------------------------------------------------------


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class Run:
    """The output directory and its manifest."""

    def __init__(self, out: Path, cfg: dict | None, threads: int):
        self.out = out
        self.cfg = cfg
        self.threads = threads
        self.path = out / "manifest.json"
        if self.path.exists():
            try:
                self.manifest = json.loads(self.path.read_text())
            except json.JSONDecodeError:
                raise ConfigError(f"{self.path} is not valid JSON") from None
        else:
            self.manifest = {"stages": {}}
        self.manifest.update(tool_version=__version__, threads=threads)
        if cfg is not None:
            self.manifest["config_hash"] = cfg["hash"]
            self.manifest["config"] = cfg["raw"]

    def save(self) -> None:
        _atomic_text(self.path, json.dumps(self.manifest, indent=1, sort_keys=True))

    def rel(self, path: Path) -> str:
        return path.relative_to(self.out).as_posix()

    def recorded(self) -> dict[str, str]:
        """Every output file recorded by a completed stage, with its sha256."""
        out = {}
        for st in self.manifest["stages"].values():
            if st.get("status") == "done":
                out.update(st["outputs"])
        return out

    def require(self, path: Path, producer: str) -> str:
        """Hash of a prerequisite file, checked against the manifest."""
        rel = self.rel(path)
        expected = self.recorded().get(rel)
        if not path.exists() or expected is None:
            raise MissingPrerequisiteError(f"{rel} is missing; run `ecalab {producer}` first")
        actual = file_sha256(path)
        if actual != expected:
            raise MissingPrerequisiteError(f"{rel} does not match its recorded hash; rerun `ecalab {producer}`")
        return actual

    def is_current(self, key: str, input_hash: str) -> bool:
        st = self.manifest["stages"].get(key)
        if not st or st.get("status") != "done" or st.get("input_hash") != input_hash:
            return False
        for rel, digest in st["outputs"].items():
            p = self.out / rel
            if not p.exists() or file_sha256(p) != digest:
                return False
        return True

    def run_jobs(self, jobs: list[dict], workers: int = 1) -> int:
        """Run the jobs whose cache entry is stale; returns how many ran.

        A job is ``{"key", "inputs", "outputs", "fn", "args"}`` where ``fn`` is a
        module-level function writing ``outputs``.
        """
        todo = []
        for job in jobs:
            job["input_hash"] = _json_hash(job["inputs"])
            if self.is_current(job["key"], job["input_hash"]):
                log.info("%s: up to date", job["key"])
            else:
                todo.append(job)
        if not todo:
            return 0
        for job in todo:
            self.manifest["stages"][job["key"]] = {"status": "running", "input_hash": job["input_hash"], "outputs": {}}
        self.save()

        def finish(job, elapsed, extra):
            outs = {self.rel(p): file_sha256(p) for p in job["outputs"]}
            self.manifest["stages"][job["key"]] = {
                "status": "done",
                "input_hash": job["input_hash"],
                "outputs": outs,
                "wall_seconds": round(elapsed, 3),
                **({"result": extra} if extra else {}),
            }
            self.save()
            log.info("%s: done in %.1fs", job["key"], elapsed)

        if workers <= 1 or len(todo) == 1:
            for job in todo:
                t = time.perf_counter()
                extra = job["fn"](*job["args"], threads=self.threads)
                finish(job, time.perf_counter() - t, extra)
        else:
            with ProcessPoolExecutor(workers) as pool:
                futures = [(job, time.perf_counter(), pool.submit(job["fn"], *job["args"], threads=self.threads)) for job in todo]
                for job, t, fut in futures:
                    extra = fut.result()
                    finish(job, time.perf_counter() - t, extra)
        return len(todo)

    def orphans(self) -> tuple[list[str], list[str]]:
        """``(untracked files, unfinished stages)``."""
        known = set(self.recorded()) | {"manifest.json"}
        files = sorted(p.relative_to(self.out).as_posix() for p in self.out.rglob("*") if p.is_file())
        untracked = [f for f in files if f not in known]
        unfinished = sorted(k for k, st in self.manifest["stages"].items() if st.get("status") != "done")
        return untracked, unfinished


# --- paths ---------------------------------------------------------------------------------


def _pre_name(rule, horizon, seed):
    return f"pretrain_r{rule}_h{horizon}_s{seed}"


def data_path(out: Path, name: str) -> Path:
    return out / "data" / f"{name}.eds"


def model_path(out: Path, name: str) -> Path:
    return out / "models" / f"{name}.eck"


def history_path(out: Path, name: str) -> Path:
    return out / "models" / f"{name}.history.json"


# --- job bodies (module level so worker processes can run them) ---------------------------


def _set_threads(threads: int) -> None:
    torch.set_num_threads(max(1, threads))


def _job_simulate(rule, width, steps, seed, density, path, threads):
    eca.save_grid(eca.random_grid(rule, width, steps, seed, density), _mkparent(path))


def _job_complexity(rules, ccfg, csv_path, json_path, workers, threads):
    reports = cx.sweep(rules, ccfg, workers)
    analysis.write_csv([r.as_dict() for r in reports], _mkparent(csv_path))
    sidecar = {"config": asdict(ccfg), "compressor": cx.COMPRESSOR, "lempel_ziv": "LZ76 phrases * log2(n) / n",
               "krylov": "Koopman-operator Krylov index of the centered occupancy observable", "rules": len(reports)}
    _atomic_text(json_path, json.dumps(sidecar, indent=1, sort_keys=True))


def _job_gen_pretrain(rule, horizon, seed, n, pcfg, path, threads):
    save_dataset(gen_pretrain(rule, n, horizon, seed, pcfg), _mkparent(path))


def _job_gen_reasoning(task, n, seq_len, seed, path, threads):
    gen = reasoning.gen_reasoning_easy if task == "easy" else reasoning.gen_reasoning_hard
    save_dataset(gen(n, seq_len, seed), _mkparent(path))


def _job_gen_chess(pgn, min_rating, seed, paths, threads):
    splits = chess.ingest_chess(pgn, min_rating, seed=seed)[:3]
    for ds, p in zip(splits, paths):
        save_dataset(ds, _mkparent(p))
    return {"games": [len(ds.meta["games"]) for ds in splits], "vocab": len(splits[0].meta["vocab"])}


def _job_train(data, mcfg, tcfg, ckpt_path, hist_path, threads):
    _set_threads(threads)
    ckpt, hist = train_pretrain(load_dataset(data), mcfg, tcfg)
    save_checkpoint(ckpt, _mkparent(ckpt_path))
    _atomic_text(hist_path, json.dumps(hist.as_dict(), sort_keys=True))
    return {"epochs": hist.epochs, "val_accuracy": hist.val_accuracy[-1], "stop_reason": hist.stop_reason}


def _job_finetune(ckpt, train, val, tcfg, head_seed, ckpt_path, hist_path, threads):
    _set_threads(threads)
    ft, hist = finetune_frozen(load_checkpoint(ckpt), load_dataset(train), load_dataset(val), tcfg, head_seed)
    save_checkpoint(ft, _mkparent(ckpt_path))
    _atomic_text(hist_path, json.dumps(hist.as_dict(), sort_keys=True))
    return {"epochs": hist.epochs, "efficiency": efficiency(hist), "val_accuracy": hist.val_accuracy[-1]}


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# --- commands --------------------------------------------------------------------------------


def cmd_simulate(run: Run, args) -> int:
    cfg = run.cfg
    rules = [args.rule] if args.rule is not None else cfg["rules"]
    c = cfg["complexity"]
    jobs = []
    for r in rules:
        path = run.out / "grids" / f"rule_{r}.ecg"
        inputs = {"rule": r, "width": args.width or c.width, "steps": args.steps or c.steps, "seed": c.seed, "density": c.density}
        jobs.append({"key": f"simulate/{r}", "inputs": inputs, "outputs": [path], "fn": _job_simulate,
                     "args": (r, inputs["width"], inputs["steps"], c.seed, c.density, path)})
    run.run_jobs(jobs, cfg["workers"])
    return EXIT_OK


def cmd_complexity(run: Run, args) -> int:
    cfg = run.cfg
    csv_path = run.out / "complexity" / "complexity.csv"
    json_path = run.out / "complexity" / "complexity.json"
    inputs = {"rules": cfg["rules"], "config": asdict(cfg["complexity"]), "compressor": cx.COMPRESSOR}
    run.run_jobs([{"key": "complexity", "inputs": inputs, "outputs": [csv_path, json_path], "fn": _job_complexity,
                   "args": (cfg["rules"], cfg["complexity"], csv_path, json_path, cfg["workers"])}])
    return EXIT_OK


def _pretrain_jobs(run: Run) -> list[dict]:
    cfg = run.cfg
    jobs = []
    for rule in cfg["rules"]:
        for h in cfg["horizons"]:
            for s in cfg["seeds"]:
                path = data_path(run.out, _pre_name(rule, h, s))
                inputs = {"rule": rule, "horizon": h, "seed": s, "n": cfg["n_samples"], "config": asdict(cfg["pretrain"])}
                jobs.append({"key": f"gen/{_pre_name(rule, h, s)}", "inputs": inputs, "outputs": [path],
                             "fn": _job_gen_pretrain, "args": (rule, h, s, cfg["n_samples"], cfg["pretrain"], path)})
    return jobs


def _task_jobs(run: Run, task: str) -> list[dict]:
    cfg = run.cfg
    t = cfg[task]
    jobs = []
    if task == "chess":
        pgn = [str(Path(p).resolve()) for p in t["pgn"]]
        if not pgn:
            return []
        missing = [p for p in pgn if not Path(p).exists()]
        if missing:
            raise MissingPrerequisiteError(f"PGN files not found: {missing}")
        paths = [data_path(run.out, f"chess_{split}") for split in ("train", "val", "test")]
        inputs = {"pgn": {p: file_sha256(Path(p)) for p in pgn}, "min_rating": t["min_rating"]}
        return [{"key": "gen/chess", "inputs": inputs, "outputs": paths, "fn": _job_gen_chess,
                 "args": (pgn, t["min_rating"], 0, paths)}]
    for s in cfg["seeds"]:
        for split, n, offset in (("train", t["n_train"], 0), ("val", t["n_val"], 1)):
            name = f"{task}_{split}_s{s}"
            data_seed = 2 * s + offset
            inputs = {"task": task, "n": n, "seq_len": t["seq_len"], "seed": data_seed}
            jobs.append({"key": f"gen/{name}", "inputs": inputs, "outputs": [data_path(run.out, name)],
                         "fn": _job_gen_reasoning, "args": (task, n, t["seq_len"], data_seed, data_path(run.out, name))})
    return jobs


def _gen_overrides(cfg: dict, args) -> dict:
    """One-off overrides of the config for a single ``gen`` call."""
    cfg = dict(cfg)
    if args.rule is not None:
        cfg["rules"] = resolve_rules([args.rule])
    if args.horizon is not None:
        if args.horizon not in (1, 5):
            raise ConfigError("--horizon must be 1 or 5")
        cfg["horizons"] = [args.horizon]
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    if args.samples is not None:
        cfg["n_samples"] = args.samples
    if args.pgn_dir is not None or args.min_rating is not None:
        chess_cfg = dict(cfg["chess"])
        if args.pgn_dir is not None:
            chess_cfg["pgn"] = sorted(str(p) for p in Path(args.pgn_dir).glob("*.pgn"))
            if not chess_cfg["pgn"]:
                raise MissingPrerequisiteError(f"no .pgn files in {args.pgn_dir}")
        if args.min_rating is not None:
            chess_cfg["min_rating"] = args.min_rating
        cfg["chess"] = chess_cfg
    return cfg


def cmd_gen(run: Run, args) -> int:
    if any(getattr(args, k, None) is not None for k in ("rule", "horizon", "seed", "samples", "pgn_dir", "min_rating")):
        # shallow copy: the manifest stays shared
        run = copy.copy(run)
        run.cfg = _gen_overrides(run.cfg, args)
    tasks = ("pretrain", *TASKS) if args.task == "all" else (args.task,)
    jobs = []
    for task in tasks:
        jobs += _pretrain_jobs(run) if task == "pretrain" else _task_jobs(run, task)
    run.run_jobs(jobs, run.cfg["workers"])
    return EXIT_OK


def cmd_train(run: Run, args) -> int:
    cfg = run.cfg
    jobs = []
    if args.dataset:
        data = Path(args.dataset)
        if not data.exists():
            raise MissingPrerequisiteError(f"{data} not found")
        ds = load_dataset(data)
        name = f"{data.stem}"
        seed = ds.meta.get("seed", 0)
        targets = [(data, name, file_sha256(data), seed)]
    else:
        rules = [args.rule] if args.rule is not None else cfg["rules"]
        targets = []
        for rule in rules:
            for h in cfg["horizons"]:
                for s in cfg["seeds"]:
                    name = _pre_name(rule, h, s)
                    data = data_path(run.out, name)
                    targets.append((data, name, run.require(data, "gen --task pretrain"), s))
    for data, name, digest, s in targets:
        mcfg = ModelConfig(**{**cfg["model"].as_dict(), "seed": s})
        tcfg = TrainConfig(**{**asdict(cfg["train"]), "seed": s})
        outs = [model_path(run.out, name), history_path(run.out, name)]
        inputs = {"dataset": digest, "model": mcfg.as_dict(), "train": asdict(tcfg)}
        jobs.append({"key": f"train/{name}", "inputs": inputs, "outputs": outs, "fn": _job_train,
                     "args": (data, mcfg, tcfg, *outs)})
    run.run_jobs(jobs, cfg["workers"])
    return EXIT_OK


def _task_data(run: Run, task: str, seed: int) -> tuple[Path, Path]:
    if task == "chess":
        return data_path(run.out, "chess_train"), data_path(run.out, "chess_val")
    return data_path(run.out, f"{task}_train_s{seed}"), data_path(run.out, f"{task}_val_s{seed}")


def cmd_finetune(run: Run, args) -> int:
    cfg = run.cfg
    tasks = [t for t in TASKS if t != "chess" or cfg["chess"]["pgn"]] if args.task == "all" else [args.task]
    if args.task == "chess" and not cfg["chess"]["pgn"]:
        raise ConfigError("[chess] pgn is empty")
    if args.ckpt:
        base = [(Path(args.ckpt), Path(args.ckpt).name.removesuffix(".eck"), cfg["seeds"][0])]
        if not base[0][0].exists():
            raise MissingPrerequisiteError(f"{args.ckpt} not found")
    else:
        base = [(model_path(run.out, _pre_name(r, h, s)), _pre_name(r, h, s), s)
                for r in cfg["rules"] for h in cfg["horizons"] for s in cfg["seeds"]]
    jobs = []
    for task in tasks:
        for ckpt, name, s in base:
            digest = run.require(ckpt, "train") if not args.ckpt else file_sha256(ckpt)
            tr, va = _task_data(run, task, s)
            hashes = [run.require(p, f"gen --task {task}") for p in (tr, va)]
            tcfg = TrainConfig(**{**asdict(cfg[f"{task}_train"]), "seed": s})
            ft_name = name.replace("pretrain", task, 1) if name.startswith("pretrain") else f"{task}_{name}"
            outs = [model_path(run.out, ft_name), history_path(run.out, ft_name)]
            inputs = {"ckpt": digest, "data": hashes, "train": asdict(tcfg)}
            jobs.append({"key": f"finetune/{ft_name}", "inputs": inputs, "outputs": outs, "fn": _job_finetune,
                         "args": (ckpt, tr, va, tcfg, s, *outs)})
    run.run_jobs(jobs, cfg["workers"])
    return EXIT_OK


def cmd_eval(run: Run, args) -> int:
    for p in (args.ckpt, args.dataset):
        if not Path(p).exists():
            raise MissingPrerequisiteError(f"{p} not found")
    metrics = evaluate(load_checkpoint(args.ckpt), load_dataset(args.dataset))
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return EXIT_OK


def _nanmean(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def cmd_analyze(run: Run, args) -> int:
    cfg = run.cfg
    out = run.out / "analysis"
    cpath = run.out / "complexity" / "complexity.csv"
    inputs = {"complexity": run.require(cpath, "complexity")}
    chess_on = bool(cfg["chess"]["pgn"])
    for r in cfg["rules"]:
        for h in cfg["horizons"]:
            for s in cfg["seeds"]:
                for task in ("pretrain", "easy", "hard", *(("chess",) if chess_on else ())):
                    name = _pre_name(r, h, s).replace("pretrain", task, 1)
                    if task in ("pretrain", "easy") or (run.out / "models" / f"{name}.eck").exists():
                        inputs[name] = run.require(model_path(run.out, name), "train" if task == "pretrain" else f"finetune --task {task}")
                        if task != "pretrain":
                            inputs[name + ".history"] = run.require(history_path(run.out, name), f"finetune --task {task}")
    if chess_on:
        inputs["chess_test"] = run.require(data_path(run.out, "chess_test"), "gen --task chess")
    inputs["analysis"] = cfg["analysis"]
    inputs["pretrain"] = asdict(cfg["pretrain"])
    names = ["results.csv", "correlations.json", "attention.csv", "cka.csv", "mds.csv", "inputs.json"]
    if set(cfg["horizons"]) == {1, 5}:
        names.append("horizons.csv")
    outputs = [out / n for n in names]
    run.run_jobs([{"key": "analyze", "inputs": inputs, "outputs": outputs, "fn": _job_analyze,
                   "args": (run.out, cfg["rules"], cfg["horizons"], cfg["seeds"], chess_on, cfg["analysis"],
                            cfg["pretrain"], cpath, _json_hash(inputs))}])
    return EXIT_OK


def _history_efficiency(path: Path) -> float:
    if not path.exists():
        return float("nan")
    return efficiency(TrainHistory(**json.loads(path.read_text())))


def _job_analyze(out, rules, horizons, seeds, chess_on, acfg, pcfg, cpath, inputs_hash, threads):
    _set_threads(threads)
    adir = out / "analysis"
    adir.mkdir(parents=True, exist_ok=True)
    comp = {row["rule"]: row for row in analysis.read_csv(cpath)}
    missing = set(rules) - set(comp)
    if missing:
        raise MissingPrerequisiteError(f"complexity.csv lacks rules {sorted(missing)}; rerun `ecalab complexity`")
    chess_test = load_dataset(data_path(out, "chess_test")) if chess_on else None
    per_horizon = {}
    attention_rows = []
    models = {}
    probes = {}
    h0 = horizons[0]
    for h in horizons:
        results = []
        for r in rules:
            eff = {t: [] for t in ("easy", "hard")}
            chess_acc, att = [], []
            for s in seeds:
                base = _pre_name(r, h, s)
                for t in eff:
                    eff[t].append(_history_efficiency(history_path(out, base.replace("pretrain", t, 1))))
                if chess_on:
                    chess_acc.append(evaluate(load_checkpoint(model_path(out, base.replace("pretrain", "chess", 1))), chess_test)["accuracy"])
                ckpt = load_checkpoint(model_path(out, base))
                probe_ds = gen_pretrain(r, acfg["probe_size"], h, seed=10_000 + s, cfg=pcfg)
                x = torch.from_numpy(np.unpackbits(probe_ds.records["input"], axis=-1, count=pcfg.x_len).astype(np.float32))
                offsets, mean = analysis.attention_last_k(ckpt.model, x, 10)
                att.append(offsets)
                if h == h0 and s == seeds[0]:
                    models[r] = ckpt
                    probes[r] = x
            per_offset = np.mean(att, axis=0)
            attention_rows.append({"rule": r, "horizon": h, **{f"offset_{j + 1}": float(v) for j, v in enumerate(per_offset)},
                                   "mean": float(per_offset.mean())})
            results.append(analysis.ExperimentResult(
                rule=r,
                complexity={k: v for k, v in comp[r].items() if k != "rule"},
                efficiency_easy=_nanmean(eff["easy"]),
                efficiency_hard=_nanmean(eff["hard"]),
                chess_accuracy=_nanmean(chess_acc),
                avg_attention_last10=float(per_offset.mean()),
                seeds=list(seeds),
            ))
        per_horizon[h] = results
    results = per_horizon[h0]
    analysis.write_csv([r.row() for r in results], adir / "results.csv")
    metrics = [m for m in analysis.METRICS if all(math.isfinite(getattr(r, m)) for r in results)]
    corr = {
        "horizon": h0,
        "n_rules": len(results),
        "correlations": analysis.correlations(results, metrics) if len(results) >= 3 else {},
        "class_summary": analysis.class_summary(results, metrics),
        "inputs_sha256": inputs_hash,
    }
    _atomic_text(adir / "correlations.json", json.dumps(corr, indent=1, sort_keys=True))
    analysis.write_csv(attention_rows, adir / "attention.csv")
    shared = torch.cat([probes[r][:16] for r in rules])
    mat = analysis.cka_matrix(models, acfg["cka_mode"], shared if acfg["cka_mode"] == "activation" else None)
    analysis.write_csv(analysis.matrix_rows(mat), adir / "cka.csv")
    coords, note = analysis.mds_embed(mat)
    mds_rows = [{"rule": r, **{f"x{c + 1}": float(coords[i, c]) for c in range(coords.shape[1])}} for i, r in enumerate(mat.labels)]
    analysis.write_csv(mds_rows, adir / "mds.csv")
    if set(horizons) == {1, 5}:
        one = {r.rule: r.efficiency_easy for r in per_horizon[1]}
        five = {r.rule: r.efficiency_easy for r in per_horizon[5]}
        lz = {r.rule: r.complexity["lempel_ziv"] for r in per_horizon[1]}
        analysis.write_csv(analysis.compare_horizons(one, five, lz), adir / "horizons.csv")
    _atomic_text(adir / "inputs.json", json.dumps({"inputs_sha256": inputs_hash, "cka_mode": acfg["cka_mode"], "mds_note": note}, indent=1))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if not math.isfinite(v) else f"{v:.4g}"
    return str(v)


def cmd_report(run: Run, args) -> int:
    adir = run.out / "analysis"
    res_path, corr_path = adir / "results.csv", adir / "correlations.json"
    inputs = {p.name: run.require(p, "analyze") for p in (res_path, corr_path)}
    outs = [run.out / "report" / "summary.md", run.out / "report" / "panels.csv"]
    run.run_jobs([{"key": "report", "inputs": inputs, "outputs": outs, "fn": _job_report, "args": (res_path, corr_path, *outs)}])
    return EXIT_OK


def _job_report(res_path, corr_path, md_path, panels_path, threads):
    rows = analysis.read_csv(res_path)
    corr = json.loads(corr_path.read_text())
    cols = ["rule", "wolfram_class", *analysis.MEASURES, *analysis.METRICS]
    lines = ["# ecalab summary", "", f"Horizon {corr['horizon']}, {corr['n_rules']} rules.", "", "## Per-rule results", ""]
    lines += ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(_fmt(r[c]) for c in cols) + " |" for r in rows]
    lines += ["", "## Pearson correlations (* p < 0.05)", ""]
    metrics = list(corr["correlations"])
    lines += ["| metric | " + " | ".join(analysis.MEASURES) + " |", "|" + "---|" * (len(analysis.MEASURES) + 1)]
    for m in metrics:
        cells = []
        for meas in analysis.MEASURES:
            c = corr["correlations"][m][meas]
            cells.append("n/a" if c is None else analysis.CorrelationResult(c["r"], c["p"], c["n"]).label())
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    lines += ["", "## Class means (stderr)", ""]
    summary = corr["class_summary"]
    lines += ["| class | " + " | ".join(metrics) + " |", "|" + "---|" * (len(metrics) + 1)]
    for cls, vals in summary.items():
        lines.append(f"| {cls} | " + " | ".join(f"{_fmt(vals[m]['mean'])} ({_fmt(vals[m]['stderr'])})" for m in metrics) + " |")
    _atomic_text(md_path, "\n".join(lines) + "\n")
    panels = [
        {"metric": m, "measure": meas, "rule": r["rule"], "wolfram_class": r["wolfram_class"], "x": r[meas], "y": r[m]}
        for m in metrics
        for meas in analysis.MEASURES
        for r in rows
    ]
    analysis.write_csv(panels, panels_path)


def cmd_run(run: Run, args) -> int:
    """Every stage in order."""
    ns = argparse.Namespace(rule=None, width=None, steps=None, task="all", dataset=None, ckpt=None,
                            horizon=None, seed=None, samples=None, pgn_dir=None, min_rating=None)
    for fn in (cmd_complexity, cmd_gen, cmd_train, cmd_finetune, cmd_analyze, cmd_report):
        fn(run, ns)
    return EXIT_OK


def cmd_verify(run: Run, args) -> int:
    untracked, unfinished = run.orphans()
    bad = [rel for rel, digest in run.recorded().items() if not (run.out / rel).exists() or file_sha256(run.out / rel) != digest]
    for f in untracked:
        print(f"untracked: {f}")
    for k in unfinished:
        print(f"unfinished stage: {k}")
    for f in bad:
        print(f"hash mismatch: {f}")
    if untracked or unfinished or bad:
        return EXIT_MISSING
    print("ok")
    return EXIT_OK


def cmd_config_init(args) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    _atomic_text(path, TEMPLATE)
    print(path)
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecalab", description="ECA pretraining experiments")
    p.add_argument("--out", help=f"run directory (default: ${OUT_ENV} or ./runs)")
    p.add_argument("--config", help="TOML config (see `ecalab config init`)")
    p.add_argument("--threads", type=int, default=1, help="torch threads per run (recorded in the manifest)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write .ecg spacetime grids")
    s.add_argument("--rule", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--steps", type=int)
    sub.add_parser("complexity", help="complexity sweep to CSV + JSON sidecar")
    g = sub.add_parser("gen", help="generate datasets")
    g.add_argument("--task", choices=("pretrain", *TASKS, "all"), default="all")
    g.add_argument("--rule", type=int, help="override the configured rule set")
    g.add_argument("--horizon", type=int)
    g.add_argument("--samples", type=int, help="pretraining samples per dataset")
    g.add_argument("--seed", type=int)
    g.add_argument("--pgn-dir", help="directory of .pgn files for the chess task")
    g.add_argument("--min-rating", type=int)
    t = sub.add_parser("train", help="pretrain on ECA windows")
    t.add_argument("--rule", type=int)
    t.add_argument("--dataset")
    f = sub.add_parser("finetune", help="frozen-backbone finetuning")
    f.add_argument("--task", choices=(*TASKS, "all"), default="all")
    f.add_argument("--ckpt")
    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    sub.add_parser("analyze", help="correlations, attention, CKA, MDS")
    sub.add_parser("report", help="markdown summary")
    sub.add_parser("run", help="all stages in order")
    sub.add_parser("verify", help="check manifest hashes and look for orphaned files")
    c = sub.add_parser("config", help="config helpers")
    csub = c.add_subparsers(dest="config_command", required=True)
    ci = csub.add_parser("init", help="write the documented default config")
    ci.add_argument("path", nargs="?", default="ecalab.toml")
    ci.add_argument("--force", action="store_true")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "complexity": cmd_complexity,
    "gen": cmd_gen,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "run": cmd_run,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "config":
            return cmd_config_init(args)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        _set_threads(args.threads)
        cfg = load_config(args.config)
        out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
        out.mkdir(parents=True, exist_ok=True)
        run = Run(out, cfg, args.threads)
        status = COMMANDS[args.command](run, args)
        run.save()
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingPrerequisiteError, DatasetFormatError, CheckpointFormatError, eca.GridFormatError, chess.EmptyCorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalDivergenceError, FrozenWeightDriftError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
