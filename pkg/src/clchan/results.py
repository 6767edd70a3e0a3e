"""CSV result files and the summary aggregation.

Floats are written with ``repr`` (the shortest string that parses back to the
same double), so every file re-reads bit-exactly and the dB columns stay
consistent with the linear ones.
"""

import csv
import dataclasses
import math
from collections import OrderedDict

import numpy as np

EVAL_COLUMNS = ("run_id", "seed", "regimen", "backbone", "scenario_seq", "eval_task", "after_task", "nmse", "nmse_db")
SWEEP_COLUMNS = ("run_id", "seed", "regimen", "backbone", "scenario", "snr_db", "nmse", "nmse_db")
SUMMARY_COLUMNS = ("regimen", "backbone", "metric", "median", "p25", "p75")
FORGETTING_COLUMNS = (
    "run_id", "seed", "regimen", "backbone", "task", "forgetting_abs", "forgetting_rel", "forgetting_db",
)
MEMORY_COLUMNS = ("run_id", "seed", "regimen", "backbone", "n_tasks", "model", "regimen_extra", "transient")
GAIN_COLUMNS = ("scenario", "seed", "sample", "gain", "gain_db")

SUMMARY_METRICS = ("forgetting_abs", "forgetting_rel", "final_nmse_db", "mem_floats_extra")


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _as_dict(r):
    return dataclasses.asdict(r) if dataclasses.is_dataclass(r) else dict(r)


def emit_csv(records, path, columns=None):
    """Write ``records`` (dicts or dataclasses with identical keys) as CSV.

    ``columns`` fixes the column order; it is required for an empty list.
    """
    rows = [_as_dict(r) for r in records]
    if columns is None:
        if not rows:
            raise ValueError("columns must be given for an empty record list")
        columns = tuple(rows[0])
    columns = tuple(columns)
    for i, r in enumerate(rows):
        if set(r) != set(columns):
            raise ValueError(f"record {i} has keys {sorted(r)}, expected {sorted(columns)}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def _parse(s):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    if s in ("true", "false"):
        return s == "true"
    return s


def read_csv(path):
    """Rows as dicts; ints, floats and booleans are converted back."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: _parse(v) for k, v in row.items()} for row in reader]


def read_columns(path):
    with open(path, newline="") as fh:
        return tuple(next(csv.reader(fh)))


# aggregation ---------------------------------------------------------------


def run_matrices(eval_rows):
    """``run_id -> (key, values[after, eval])`` rebuilt from eval rows, in first-seen order.

    ``key`` is ``(seed, regimen, backbone)``; task indices in the rows are 1-based.
    """
    out = OrderedDict()
    for r in eval_rows:
        out.setdefault(r["run_id"], ((r["seed"], r["regimen"], r["backbone"]), []))[1].append(r)
    mats = OrderedDict()
    for run_id, (key, rows) in out.items():
        k = max(r["after_task"] for r in rows)
        m = np.full((k, k), np.nan)
        for r in rows:
            m[r["after_task"] - 1, r["eval_task"] - 1] = r["nmse"]
        mats[run_id] = (key, m)
    return mats


def forgetting_rows(eval_rows):
    """Per run and past task: increase from the task's own NMSE to the final one."""
    rows = []
    for run_id, ((seed, regimen, backbone), m) in run_matrices(eval_rows).items():
        k = m.shape[0]
        for j in range(k - 1):
            own, final = m[j, j], m[k - 1, j]
            rows.append(
                {
                    "run_id": run_id,
                    "seed": seed,
                    "regimen": regimen,
                    "backbone": backbone,
                    "task": j + 1,
                    "forgetting_abs": final - own,
                    "forgetting_rel": (final - own) / own,
                    "forgetting_db": 10.0 * math.log10(final) - 10.0 * math.log10(own),
                }
            )
    return rows


def summarize(eval_rows, memory_rows):
    """Median and quartiles over runs, per (regimen, backbone) and metric.

    Per run: forgetting is averaged over past tasks (absent when K = 1),
    ``final_nmse_db`` is the last task's NMSE right after training it, and
    ``mem_floats_extra`` is the regimen's stored floats at the end.
    """
    groups = OrderedDict()

    def put(key, metric, value):
        groups.setdefault(key, {m: [] for m in SUMMARY_METRICS})[metric].append(value)

    for run_id, ((_, regimen, backbone), m) in run_matrices(eval_rows).items():
        key = (regimen, backbone)
        k = m.shape[0]
        if k >= 2:
            own, final = np.diag(m)[: k - 1], m[k - 1, : k - 1]
            put(key, "forgetting_abs", float(np.mean(final - own)))
            put(key, "forgetting_rel", float(np.mean((final - own) / own)))
        put(key, "final_nmse_db", 10.0 * math.log10(m[k - 1, k - 1]))
    for r in memory_rows:
        put((r["regimen"], r["backbone"]), "mem_floats_extra", float(r["regimen_extra"]))

    rows = []
    for (regimen, backbone), metrics in groups.items():
        for metric in SUMMARY_METRICS:
            vals = metrics[metric]
            if not vals:
                continue
            p25, med, p75 = np.percentile(vals, [25, 50, 75])
            rows.append(
                {"regimen": regimen, "backbone": backbone, "metric": metric, "median": float(med), "p25": float(p25), "p75": float(p75)}
            )
    return rows
