"""Accuracy statistics and report serialization.

A localization run produces one fix row per protocol epoch; the report
aggregates within-threshold percentages (the paper-style <=20 cm / <=10 cm
columns), error statistics, the achieved update rate and message counts,
and stamps in the seed and config hash so every table is reproducible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

from .core import Position, distance


class ReportError(ValueError):
    """Raised for empty or misaligned report inputs."""


@dataclass(frozen=True)
class EpochFix:
    """One localization attempt.

    status is "ok" when an estimate was produced; failure rows keep the
    epoch visible with the reason in status and no position.
    """

    epoch: int
    status: str
    t_range_tx_s: float | None = None
    true_pos: Position | None = None
    est_pos: Position | None = None
    residual_m: float = float("nan")
    iterations: int = 0
    wall_time_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok" and self.est_pos is not None

    @property
    def error_m(self) -> float:
        if not self.ok or self.true_pos is None:
            return float("nan")
        return distance(self.true_pos, self.est_pos)


@dataclass(frozen=True)
class AccuracyReport:
    seed: int
    config_hash: str
    protocol: str
    n_epochs: int
    n_ok: int
    pct_within: dict[float, float]  # threshold m -> percent of ok fixes
    mean_error_m: float
    median_error_m: float
    p95_error_m: float
    update_rate_hz: float
    message_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "protocol": self.protocol,
            "n_epochs": self.n_epochs,
            "n_ok": self.n_ok,
            "pct_within": {f"{t:g}": p for t, p in sorted(self.pct_within.items())},
            "mean_error_m": self.mean_error_m,
            "median_error_m": self.median_error_m,
            "p95_error_m": self.p95_error_m,
            "update_rate_hz": self.update_rate_hz,
            "message_counts": dict(sorted(self.message_counts.items())),
        }


def _percentile(sorted_vals: list[float], q: float) -> float:
    if not sorted_vals:
        return float("nan")
    if len(sorted_vals) == 1:
        return sorted_vals[0]
    pos = q * (len(sorted_vals) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(sorted_vals) - 1)
    frac = pos - lo
    return sorted_vals[lo] * (1.0 - frac) + sorted_vals[hi] * frac


def build_report(
    fixes: list[EpochFix],
    thresholds_m: list[float],
    seed: int,
    config_hash: str,
    protocol: str,
    message_counts: dict[str, int] | None = None,
) -> AccuracyReport:
    """Aggregate fixes into a report; percentages are over ok fixes."""
    if not fixes:
        raise ReportError("no fixes to report on")
    errors = sorted(f.error_m for f in fixes if f.ok and not math.isnan(f.error_m))
    n_ok = len(errors)
    pct_within: dict[float, float] = {}
    for t in thresholds_m:
        if t <= 0.0:
            raise ReportError(f"threshold must be positive, got {t}")
        if n_ok == 0:
            pct_within[t] = 0.0
        else:
            pct_within[t] = 100.0 * sum(1 for e in errors if e <= t) / n_ok

    times = sorted(f.t_range_tx_s for f in fixes if f.ok and f.t_range_tx_s is not None)
    if len(times) >= 2 and times[-1] > times[0]:
        rate = (len(times) - 1) / (times[-1] - times[0])
    else:
        rate = float("nan")

    return AccuracyReport(
        seed=seed,
        config_hash=config_hash,
        protocol=protocol,
        n_epochs=len(fixes),
        n_ok=n_ok,
        pct_within=pct_within,
        mean_error_m=(sum(errors) / n_ok) if n_ok else float("nan"),
        median_error_m=_percentile(errors, 0.5),
        p95_error_m=_percentile(errors, 0.95),
        update_rate_hz=rate,
        message_counts=message_counts or {},
    )


def format_report_table(report: AccuracyReport) -> str:
    lines = [
        f"protocol       {report.protocol}",
        f"epochs         {report.n_ok}/{report.n_epochs} ok",
        f"seed           {report.seed}",
        f"config hash    {report.config_hash}",
        f"update rate    {report.update_rate_hz:.1f} Hz",
        f"mean error     {report.mean_error_m * 100:.1f} cm",
        f"median error   {report.median_error_m * 100:.1f} cm",
        f"p95 error      {report.p95_error_m * 100:.1f} cm",
    ]
    for t, p in sorted(report.pct_within.items()):
        lines.append(f"<= {t * 100:5.1f} cm    {p:6.2f} %")
    if report.message_counts:
        counts = ", ".join(f"{k}={v}" for k, v in sorted(report.message_counts.items()))
        lines.append(f"messages       {counts}")
    return "\n".join(lines)


_CSV_COLUMNS = [
    "epoch", "status", "t_range_tx_s", "true_x_m", "true_y_m",
    "x_m", "y_m", "error_m", "residual_m", "iterations", "wall_time_us",
]


def write_positions_csv(fixes: list[EpochFix], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for f in fixes:
            writer.writerow([
                f.epoch,
                f.status,
                "" if f.t_range_tx_s is None else repr(f.t_range_tx_s),
                "" if f.true_pos is None else repr(f.true_pos.x),
                "" if f.true_pos is None else repr(f.true_pos.y),
                "" if f.est_pos is None else repr(f.est_pos.x),
                "" if f.est_pos is None else repr(f.est_pos.y),
                "" if math.isnan(f.error_m) else repr(f.error_m),
                "" if math.isnan(f.residual_m) else repr(f.residual_m),
                f.iterations,
                int(round(f.wall_time_s * 1e6)),
            ])


def read_positions_csv(path) -> list[EpochFix]:
    fixes: list[EpochFix] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:2] != ["epoch", "status"]:
            raise ReportError(f"{path}: not a positions CSV (bad header)")
        for row in reader:
            true_pos = None
            if row["true_x_m"]:
                true_pos = Position(float(row["true_x_m"]), float(row["true_y_m"]))
            est_pos = None
            if row["x_m"]:
                est_pos = Position(float(row["x_m"]), float(row["y_m"]))
            fixes.append(EpochFix(
                epoch=int(row["epoch"]),
                status=row["status"],
                t_range_tx_s=float(row["t_range_tx_s"]) if row["t_range_tx_s"] else None,
                true_pos=true_pos,
                est_pos=est_pos,
                residual_m=float(row["residual_m"]) if row["residual_m"] else float("nan"),
                iterations=int(row["iterations"]),
                wall_time_s=int(row["wall_time_us"]) / 1e6,
            ))
    if not fixes:
        raise ReportError(f"{path}: empty positions CSV")
    return fixes


def write_report_json(report: AccuracyReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
