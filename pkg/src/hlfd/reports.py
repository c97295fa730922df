"""CSV tables and the human summary file.

Column orders are fixed. Floats are written with ``repr`` so a CSV carries
the exact value that was computed; absent loss terms are empty cells.
"""

from __future__ import annotations

import csv
import io
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import EvalResult
from .training import ExperimentReport, ExperimentRow, RunRecord

LOG_HEADER = ("mode", "seed", "epoch", "l_seg", "l_ufd", "l_ifd", "l_upd", "l_ipd", "l_h")
SUMMARY_HEADER = ("mode", "seed", "dsc_mean", "dsc_std", "rvd_mean", "rvd_std")
SWEEP_HEADER = ("beta", "lambda", "mode", "seed", "dsc", "rvd")
PER_SAMPLE_HEADER = ("id", "dsc", "rvd")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def training_log_rows(record: RunRecord) -> list[tuple]:
    return [(record.mode, record.seed, ep["epoch"], *(ep.get(k) for k in LOG_HEADER[3:]))
            for ep in record.epochs]


def training_log_csv(records: Sequence[RunRecord]) -> str:
    return render_csv(LOG_HEADER, (row for r in records for row in training_log_rows(r)))


def _stats(values: Sequence[float]) -> tuple[float, float]:
    arr = np.array([v for v in values if not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


def eval_summary_row(mode: str, seed, result: EvalResult) -> tuple:
    """Mean and spread over the test samples of one evaluated network."""
    d_mean, d_std = _stats([d for _, d, _ in result.per_sample])
    r_mean, r_std = _stats([r for _, _, r in result.per_sample])
    return (mode, seed, d_mean, d_std, r_mean, r_std)


def summary_csv(rows: Sequence[tuple]) -> str:
    return render_csv(SUMMARY_HEADER, rows)


def experiment_summary_rows(report: ExperimentReport) -> list[tuple]:
    """One row per (mode, seed), then one ``seed=all`` row per mode holding mean and std over seeds."""
    out = [eval_summary_row(r.mode, r.seed, r.record.eval) for r in report.rows
           if r.record is not None and r.record.eval is not None]
    for mode, s in report.summary().items():
        out.append((mode, "all", s["dsc_mean"], s["dsc_std"], s["rvd_mean"], s["rvd_std"]))
    return out


def sweep_csv(rows: Sequence[ExperimentRow]) -> str:
    return render_csv(SWEEP_HEADER, ((r.beta, r.lam, r.mode, r.seed, r.dsc, r.rvd) for r in rows))


def per_sample_csv(result: EvalResult) -> str:
    return render_csv(PER_SAMPLE_HEADER, result.per_sample)


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def iso_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


TIMESTAMP_KEY = "timestamp"


def human_summary(command: str, fields: dict[str, object], timestamp: str | None = None) -> str:
    """``key: value`` lines; the timestamp line is the only nondeterministic one."""
    lines = [f"command: {command}", f"{TIMESTAMP_KEY}: {timestamp or iso_now()}"]
    lines += [f"{k}: {_cell(v)}" for k, v in fields.items()]
    return "\n".join(lines) + "\n"


def strip_timestamp(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True)
                   if not line.startswith(f"{TIMESTAMP_KEY}: "))
