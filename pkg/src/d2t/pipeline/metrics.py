"""Append-only CSV metrics with fixed headers.

Deterministic outputs (``metrics.csv``, rate tables, histograms, curves) never
contain wall-clock; timings go to a separate ``timing.csv`` so reruns can be
compared byte for byte.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path
from typing import Iterable, Sequence

METRICS_HEADER = ("stage", "step", "metric", "value", "seed")
TIMING_HEADER = ("stage", "step", "wall_clock_s")
RATES_HEADER = ("variant", "episode", "mean_rate")
HISTOGRAM_HEADER = ("coordinate", "bin_lo", "bin_hi", "true_count", "generated_count")
CURVE_HEADER = ("curve", "step", "mean_rate")


def fmt(value) -> str:
    """Shortest round-tripping text for floats; ints verbatim."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row {row!r} does not match header {header}")
            w.writerow([fmt(v) for v in row])


def read_table(path: Path, header: Sequence[str]) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(header):
            raise ValueError(f"{path}: header {reader.fieldnames} != expected {list(header)}")
        return list(reader)


class MetricsLog:
    """Writer for one stage's ``metrics.csv`` (+ ``timing.csv``).

    Step indices must be non-decreasing within a stage; several metrics may
    share a step.
    """

    def __init__(self, directory: Path, stage: str, seed: int):
        self.directory = Path(directory)
        self.stage, self.seed = stage, seed
        self.path = self.directory / "metrics.csv"
        self.timing_path = self.directory / "timing.csv"
        self._last_step = -1
        self._t0 = time.perf_counter()
        for p, header in ((self.path, METRICS_HEADER), (self.timing_path, TIMING_HEADER)):
            write_table(p, header, [])

    def log(self, step: int, **metrics: float) -> None:
        if step < self._last_step:
            raise ValueError(f"step {step} precedes already logged step {self._last_step}")
        self._last_step = step
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for name, value in metrics.items():
                w.writerow([self.stage, step, name, fmt(float(value)), self.seed])
        with open(self.timing_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [self.stage, step, f"{time.perf_counter() - self._t0:.3f}"]
            )


def read_metrics(path: Path) -> list[dict]:
    rows = read_table(path, METRICS_HEADER)
    return [
        {"stage": r["stage"], "step": int(r["step"]), "metric": r["metric"], "value": float(r["value"]),
         "seed": int(r["seed"])}
        for r in rows
    ]


def metric_series(path: Path, name: str) -> list[tuple[int, float]]:
    return [(r["step"], r["value"]) for r in read_metrics(path) if r["metric"] == name]


def write_manifest(directory: Path, manifest: dict) -> None:
    with open(Path(directory) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(directory: Path) -> dict:
    with open(Path(directory) / "manifest.json") as fh:
        return json.load(fh)
