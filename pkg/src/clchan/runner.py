"""Experiment runner behind the command line.

The unit of work is a cell ``(seed, regimen, backbone)``. Cells share nothing
but the read-only task data of their seed, so they may run in worker threads;
each writes its own files under ``cells/<run_id>/`` and a final pass merges
them in config order, which keeps the merged files independent of scheduling.

Output directory::

    eval.csv  sweep.csv  forgetting.csv  memory.csv  gains.csv  summary.csv
    manifest.json  config.yaml
    cells/<run_id>/{eval,sweep,memory}.csv
    checkpoints/<run_id>/task<k>.ckpt  (+ task<k>.regimen for ewc and si)
    datasets/seed<s>/task<k>-{train,heldout}.bin  (written by ``generate``)
"""

import dataclasses
import importlib.metadata
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, kernels
from .channel import channel_gains, generate_realizations, load_dataset, save_dataset
from .config import check_output_writable, dump_config
from .harness import (
    DivergenceError,
    TaskSplit,
    derive_seed,
    evaluate_nmse_vs_snr,
    make_task_sequence,
    memory_accounting,
    run_sequence,
)
from .predictors import load_checkpoint, save_checkpoint
from .regularizers import save_regimen_state
from .results import (
    EVAL_COLUMNS,
    FORGETTING_COLUMNS,
    GAIN_COLUMNS,
    MEMORY_COLUMNS,
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    emit_csv,
    forgetting_rows,
    read_csv,
    summarize,
)

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class Cell:
    seed: int
    regimen: str
    backbone: str

    @property
    def run_id(self):
        return f"s{self.seed}-{self.regimen}-{self.backbone}"

    def fields(self):
        return {"run_id": self.run_id, "seed": self.seed, "regimen": self.regimen, "backbone": self.backbone}


@dataclasses.dataclass
class CellResult:
    cell: Cell
    eval_rows: list
    sweep_rows: list
    memory_rows: list
    error: dict | None = None


@dataclasses.dataclass
class ExperimentResult:
    output: str
    cells: list
    failed: list  # error dicts of diverged cells

    @property
    def ok(self):
        return not self.failed


def cells_of(cfg):
    return [Cell(s, r, b) for s in cfg.seeds for r in cfg.regimens for b in cfg.backbones]


# data ----------------------------------------------------------------------


def _dataset_path(out, seed, k, split):
    return os.path.join(out, "datasets", f"seed{seed}", f"task{k + 1}-{split}.bin")


def generate_datasets(cfg):
    """Write every seed's train/held-out sets; returns the paths written."""
    check_output_writable(cfg)
    paths = []
    for seed in cfg.seeds:
        for k, split in enumerate(_build_tasks(cfg, seed)):
            for name in ("train", "heldout"):
                path = _dataset_path(cfg.output, seed, k, name)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                save_dataset(getattr(split, name), path)
                paths.append(path)
    return paths


def _build_tasks(cfg, seed):
    d = cfg.data
    return make_task_sequence(cfg.scenarios, d.n_train, d.n_heldout, d.window, seed, cfg.train.snr_db_train)


def _cached_tasks(cfg, seed):
    """Datasets from ``generate`` when present and matching, else ``None``."""
    d = cfg.data
    splits = []
    for k, sc in enumerate(cfg.scenarios):
        snr = sc.snr_db_train if cfg.train.snr_db_train is None else cfg.train.snr_db_train
        pair = []
        for name, n, sub in (("train", d.n_train, 0), ("heldout", d.n_heldout, 1)):
            path = _dataset_path(cfg.output, seed, k, name)
            if not os.path.exists(path):
                return None
            ds = load_dataset(path)
            if (ds.scenario, ds.seed, len(ds), ds.window, ds.snr_db) != (sc, derive_seed(seed, k, sub), n, d.window, snr):
                log.warning("%s does not match the config; regenerating seed %d", path, seed)
                return None
            pair.append(ds)
        splits.append(TaskSplit(*pair))
    return splits


def load_tasks(cfg, seed):
    return _cached_tasks(cfg, seed) or _build_tasks(cfg, seed)


# one cell ------------------------------------------------------------------


def _ckpt_dir(cfg, cell):
    return os.path.join(cfg.output, "checkpoints", cell.run_id)


def _sweep_rows(cfg, cell, p):
    rows, seen = [], set()
    for sc in cfg.scenarios:
        if sc.name in seen:
            continue
        seen.add(sc.name)
        curve = evaluate_nmse_vs_snr(p, sc, list(cfg.snr_sweep), cfg.data.n_eval, cell.seed, cfg.data.window)
        for snr, db in curve:
            rows.append({**cell.fields(), "scenario": sc.name, "snr_db": snr, "nmse": 10.0 ** (db / 10.0), "nmse_db": db})
    return rows


def run_cell(cfg, cell, tasks):
    tcfg = dataclasses.replace(cfg.train, regimen=cell.regimen, backbone=cell.backbone, seed=cell.seed)
    ckpt = _ckpt_dir(cfg, cell)
    os.makedirs(ckpt, exist_ok=True)

    def on_task_end(k, p, state):
        save_checkpoint(p, os.path.join(ckpt, f"task{k + 1}.ckpt"), extra={"run_id": cell.run_id, "after_task": k + 1})
        if state is not None:
            save_regimen_state(state, os.path.join(ckpt, f"task{k + 1}.regimen"))

    t0 = time.perf_counter()
    try:
        res = run_sequence(tasks, tcfg, on_task_end=on_task_end)
    except DivergenceError as exc:
        log.error("%s diverged: %s", cell.run_id, exc)
        err = {"run_id": cell.run_id, "error": str(exc), "step": exc.step, "task_loss": exc.task_loss, "reg_loss": exc.reg_loss}
        return CellResult(cell, [], [], [], err)

    eval_rows = [
        {
            **cell.fields(),
            "scenario_seq": cfg.scenario_seq,
            "eval_task": j + 1,
            "after_task": a + 1,
            "nmse": v,
            "nmse_db": 10.0 * math.log10(v),
        }
        for j, a, v in res.matrix.records()
    ]
    mem = memory_accounting(res.state, res.predictor.n_params)
    memory_rows = [{**cell.fields(), "n_tasks": len(tasks), **mem}]
    sweep_rows = _sweep_rows(cfg, cell, res.predictor)
    log.info("%s done in %.1f s", cell.run_id, time.perf_counter() - t0)

    cell_dir = os.path.join(cfg.output, "cells", cell.run_id)
    os.makedirs(cell_dir, exist_ok=True)
    emit_csv(eval_rows, os.path.join(cell_dir, "eval.csv"), EVAL_COLUMNS)
    emit_csv(sweep_rows, os.path.join(cell_dir, "sweep.csv"), SWEEP_COLUMNS)
    emit_csv(memory_rows, os.path.join(cell_dir, "memory.csv"), MEMORY_COLUMNS)
    return CellResult(cell, eval_rows, sweep_rows, memory_rows)


def gain_rows(cfg):
    rows, seen = [], set()
    for i, sc in enumerate(cfg.scenarios):
        if sc.name in seen:
            continue
        seen.add(sc.name)
        for seed in cfg.seeds:
            h = generate_realizations(sc, cfg.data.n_gain, 1, derive_seed(seed, 77, i))[:, 0]
            for n, g in enumerate(channel_gains(h)):
                rows.append({"scenario": sc.name, "seed": seed, "sample": n, "gain": float(g), "gain_db": 10.0 * math.log10(g)})
    return rows


# whole experiment ------------------------------------------------------------


def _manifest(cfg, results, files):
    return {
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "versions": {
            "clchan": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "click": importlib.metadata.version("click"),
            "pyyaml": importlib.metadata.version("pyyaml"),
        },
        "kernel_backend": kernels.active.NAME,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "cells": [r.cell.run_id for r in results],
        "failed": [r.error for r in results if r.error],
        "files": files,
    }


def run_experiment(cfg, workers=None):
    """Train and evaluate every cell, then write the merged result files."""
    check_output_writable(cfg)
    dump_config(cfg, os.path.join(cfg.output, "config.yaml"))
    tasks = {seed: load_tasks(cfg, seed) for seed in cfg.seeds}
    cells = cells_of(cfg)
    workers = cfg.workers if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: run_cell(cfg, c, tasks[c.seed]), cells))
    else:
        results = [run_cell(cfg, c, tasks[c.seed]) for c in cells]

    eval_rows = [row for r in results for row in r.eval_rows]
    sweep_rows = [row for r in results for row in r.sweep_rows]
    memory_rows = [row for r in results for row in r.memory_rows]
    out = cfg.output
    files = {
        "eval.csv": (eval_rows, EVAL_COLUMNS),
        "sweep.csv": (sweep_rows, SWEEP_COLUMNS),
        "memory.csv": (memory_rows, MEMORY_COLUMNS),
        "forgetting.csv": (forgetting_rows(eval_rows), FORGETTING_COLUMNS),
        "summary.csv": (summarize(eval_rows, memory_rows), SUMMARY_COLUMNS),
        "gains.csv": (gain_rows(cfg), GAIN_COLUMNS),
    }
    for name, (rows, cols) in files.items():
        emit_csv(rows, os.path.join(out, name), cols)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(_manifest(cfg, results, sorted(files)), fh, indent=2, sort_keys=True)
        fh.write("\n")
    failed = [r.error for r in results if r.error]
    return ExperimentResult(out, results, failed)


def sweep_from_checkpoints(cfg):
    """Redo the SNR sweep on the final checkpoints of an earlier ``run``."""
    k = len(cfg.scenarios)
    rows = []
    for cell in cells_of(cfg):
        path = os.path.join(_ckpt_dir(cfg, cell), f"task{k}.ckpt")
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path}: no final checkpoint for {cell.run_id}; run the experiment first")
        rows.extend(_sweep_rows(cfg, cell, load_checkpoint(path)))
    emit_csv(rows, os.path.join(cfg.output, "sweep.csv"), SWEEP_COLUMNS)
    return rows


def summarize_dir(out):
    """Recompute forgetting.csv and summary.csv from eval.csv and memory.csv."""
    eval_rows = read_csv(os.path.join(out, "eval.csv"))
    memory_rows = read_csv(os.path.join(out, "memory.csv"))
    rows = summarize(eval_rows, memory_rows)
    emit_csv(forgetting_rows(eval_rows), os.path.join(out, "forgetting.csv"), FORGETTING_COLUMNS)
    emit_csv(rows, os.path.join(out, "summary.csv"), SUMMARY_COLUMNS)
    return rows


__all__ = [
    "Cell",
    "CellResult",
    "ExperimentResult",
    "cells_of",
    "gain_rows",
    "generate_datasets",
    "load_tasks",
    "run_cell",
    "run_experiment",
    "summarize_dir",
    "sweep_from_checkpoints",
]
