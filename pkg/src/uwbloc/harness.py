"""End-to-end experiment pipeline: simulate, synchronize, solve, aggregate.

Ties the simulator, the TWR/TDoA measurement pipelines and the solvers into
per-epoch fixes, and provides parameter sweeps and the two-anchor drift
experiment.  The "truth" for a fix is the tag's position frozen at the
instant it transmitted the measured message, so a moving tag's report
measures staleness honestly.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .config import ExperimentConfig, SolverSettings
from .core import PS_PER_S, Position
from .netsim import EventTrace, MessageKind, run_scenario
from .report import EpochFix
from .solver import SolveRequest, SolverError, solve_tdoa, solve_twr
from .tdoa import (
    EpochSkipped,
    InsufficientHistory,
    RangeEpoch,
    TdoaState,
    epochs_from_trace,
    fold_sync,
    process_epoch,
)
from .twr import (
    CalibrationModel,
    DegenerateExchange,
    RangeMeasurement,
    apply_calibration,
    exchanges_from_trace,
    range_from_tof,
    sds_tof,
    single_sided_tof,
)

SWEEPABLE_PARAMETERS = (
    "sync_interval_s",
    "timestamp_noise_sigma_s",
    "drop_probability",
    "solver_method",
    "filter",
)


class HarnessError(ValueError):
    """Raised for invalid pipeline inputs (wrong trace/config pairing etc.)."""


def simulate(config: ExperimentConfig) -> EventTrace:
    return run_scenario(config)


def localize_trace(trace: EventTrace, config: ExperimentConfig) -> list[EpochFix]:
    """One estimated position per epoch of the trace; failures become
    status rows rather than exceptions."""
    if config.protocol.startswith("tdoa"):
        return _localize_tdoa(trace, config)
    return _localize_twr(trace, config)


def _prior_for(config: ExperimentConfig, last_ok: Position | None) -> Position | None:
    if config.solver.prior == "previous" and last_ok is not None:
        return last_ok
    if config.solver.prior_point_m is not None:
        return Position(*config.solver.prior_point_m)
    return None


def _localize_tdoa(trace: EventTrace, config: ExperimentConfig) -> list[EpochFix]:
    layout = config.layout
    mode = "kalman" if config.protocol == "tdoa_kalman" else "raw"
    syncs, ranges = epochs_from_trace(trace, layout, config.tag_id)
    range_tx_ps = {
        e.epoch: e.true_ps for e in trace.events
        if e.kind is MessageKind.RANGE and e.is_tx and e.sender == config.tag_id
    }
    anchor_map = {n.node_id: n.position for n in layout.anchors}
    state = TdoaState()
    last_ok: Position | None = None
    fixes: list[EpochFix] = []

    for epoch in range(config.epochs):
        sync = syncs.get(epoch)
        if sync is None:
            fixes.append(EpochFix(epoch, "no_sync"))
            continue
        tx_ps = range_tx_ps.get(epoch)
        if tx_ps is None:
            state = fold_sync(state, sync, layout, mode, config.kf_params)
            fixes.append(EpochFix(epoch, "no_range"))
            continue
        t_tx_s = tx_ps / PS_PER_S
        true_pos = config.trajectory.position_at_ps(tx_ps)
        rng_epoch = ranges.get(epoch, RangeEpoch(epoch=epoch, rx={}))
        try:
            measurements, state = process_epoch(
                state, sync, rng_epoch, layout, mode, config.kf_params,
                require_all=not config.allow_incomplete,
            )
        except EpochSkipped as exc:
            if exc.state is not None:
                state = exc.state
            status = ("insufficient_history"
                      if isinstance(exc, InsufficientHistory) else "incomplete")
            fixes.append(EpochFix(epoch, status, t_range_tx_s=t_tx_s,
                                  true_pos=true_pos))
            continue
        involved = {m.anchor_k for m in measurements} | {m.anchor_l for m in measurements}
        if len(involved) < 3:
            fixes.append(EpochFix(epoch, "incomplete", t_range_tx_s=t_tx_s,
                                  true_pos=true_pos))
            continue
        request = SolveRequest(
            anchors=anchor_map,
            measurements=tuple(measurements),
            prior=_prior_for(config, last_ok),
            bounds=layout.bounds,
        )
        try:
            result = solve_tdoa(request)
        except SolverError:
            fixes.append(EpochFix(epoch, "failed", t_range_tx_s=t_tx_s,
                                  true_pos=true_pos))
            continue
        last_ok = result.position
        fixes.append(EpochFix(
            epoch, "ok", t_range_tx_s=t_tx_s, true_pos=true_pos,
            est_pos=result.position, residual_m=result.residual_norm,
            iterations=result.iterations, wall_time_s=result.wall_time_s,
        ))
    return fixes


def _localize_twr(trace: EventTrace, config: ExperimentConfig) -> list[EpochFix]:
    layout = config.layout
    exchanges = exchanges_from_trace(trace, layout, config.tag_id)
    calib = CalibrationModel(config.calibration_slope, config.calibration_offset_m)
    anchor_map = {n.node_id: n.position for n in layout.anchors}
    single_sided = config.protocol == "twr_single"
    last_ok: Position | None = None
    fixes: list[EpochFix] = []

    for epoch in range(config.epochs):
        per_anchor = exchanges.get(epoch, {})
        needed = len(layout.anchors) if not config.allow_incomplete else 2
        if len(per_anchor) < needed:
            fixes.append(EpochFix(epoch, "incomplete"))
            continue
        measurements = []
        tx_ps_last = None
        degenerate = False
        for anchor_id in sorted(per_anchor):
            exchange, tx_ps = per_anchor[anchor_id]
            try:
                tof = single_sided_tof(exchange) if single_sided else sds_tof(exchange)
            except DegenerateExchange:
                degenerate = True
                break
            raw_m = range_from_tof(tof)
            corrected = apply_calibration(calib, raw_m)
            measurements.append(RangeMeasurement(
                anchor=anchor_id, range_m=corrected, epoch=epoch,
                clamped=corrected == 0.0 and raw_m < calib.offset_m,
            ))
            tx_ps_last = tx_ps
        if degenerate or not measurements:
            fixes.append(EpochFix(epoch, "failed"))
            continue
        t_tx_s = tx_ps_last / PS_PER_S
        true_pos = config.trajectory.position_at_ps(tx_ps_last)
        request = SolveRequest(
            anchors=anchor_map,
            measurements=tuple(measurements),
            prior=_prior_for(config, last_ok),
            bounds=layout.bounds,
        )
        try:
            result = solve_twr(request, method=config.solver.method)
        except SolverError:
            fixes.append(EpochFix(epoch, "failed", t_range_tx_s=t_tx_s,
                                  true_pos=true_pos))
            continue
        last_ok = result.position
        fixes.append(EpochFix(
            epoch, "ok", t_range_tx_s=t_tx_s, true_pos=true_pos,
            est_pos=result.position, residual_m=result.residual_norm,
            iterations=result.iterations, wall_time_s=result.wall_time_s,
        ))
    return fixes


def trace_summary(trace: EventTrace) -> dict:
    tx_counts: dict[str, int] = {}
    rx_count = 0
    for e in trace.events:
        if e.is_tx:
            tx_counts[e.kind.value] = tx_counts.get(e.kind.value, 0) + 1
        else:
            rx_count += 1
    duration_s = 0.0
    if trace.events:
        duration_s = (trace.events[-1].true_ps - trace.events[0].true_ps) / PS_PER_S
    return {
        "tx_counts": dict(sorted(tx_counts.items())),
        "tx_total": sum(tx_counts.values()),
        "rx_total": rx_count,
        "duration_s": duration_s,
        "seed": trace.rng_seed,
    }


def apply_sweep_value(config: ExperimentConfig, parameter: str, value) -> ExperimentConfig:
    """Return the config with one sweepable field replaced."""
    if parameter == "sync_interval_s":
        return config.replace(sync_interval_s=float(value))
    if parameter == "timestamp_noise_sigma_s":
        return config.replace(channel=replace(
            config.channel, timestamp_noise_sigma_s=float(value)))
    if parameter == "drop_probability":
        return config.replace(channel=replace(
            config.channel, drop_probability=float(value)))
    if parameter == "solver_method":
        return config.replace(solver=SolverSettings(
            method=str(value), prior=config.solver.prior,
            prior_point_m=config.solver.prior_point_m))
    if parameter == "filter":
        if not config.protocol.startswith("tdoa"):
            raise HarnessError("filter on/off sweep applies to TDoA protocols only")
        flags = {"on": "tdoa_kalman", "off": "tdoa_raw"}
        if str(value) not in flags:
            raise HarnessError(f"filter sweep values must be on/off, got {value!r}")
        return config.replace(protocol=flags[str(value)])
    raise HarnessError(
        f"parameter {parameter!r} is not sweepable; choose from {SWEEPABLE_PARAMETERS}")


def _sim_key(cfg: ExperimentConfig) -> str:
    """Hash of the fields that influence the simulated trace.

    Post-processing settings (solver, calibration, filter choice within the
    TDoA family) do not change the radio traffic, so sweeps over them can
    share one trace.
    """
    import hashlib
    import json

    d = cfg.to_dict()
    d["protocol"] = "tdoa" if cfg.protocol.startswith("tdoa") else "twr"
    for k in ("solver", "kalman", "calibration"):
        d.pop(k, None)
    return hashlib.sha256(
        json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def run_sweep(
    config: ExperimentConfig,
    parameter: str,
    values: list,
    thresholds_m: list[float],
) -> list[dict]:
    """Run the scenario once per parameter value, all with the same seed.

    Sweeps over post-processing parameters (filter, solver_method) reuse
    the identical underlying trace, so comparisons are noise-paired.
    """
    if not values:
        raise HarnessError("sweep needs at least one value")
    rows: list[dict] = []
    trace_cache: dict[str, EventTrace] = {}
    for value in values:
        cfg = apply_sweep_value(config, parameter, value)
        sim_key = _sim_key(cfg)
        if sim_key not in trace_cache:
            trace_cache[sim_key] = run_scenario(cfg)
        trace = trace_cache[sim_key]
        fixes = localize_trace(trace, cfg)
        errors = [f.error_m for f in fixes if f.ok and not math.isnan(f.error_m)]
        solve_times = [f.wall_time_s for f in fixes if f.ok]
        row: dict = {
            "parameter": parameter,
            "value": value,
            "protocol": cfg.protocol,
            "n_epochs": len(fixes),
            "n_ok": len(errors),
            "mean_error_m": float(np.mean(errors)) if errors else float("nan"),
            "median_error_m": float(np.median(errors)) if errors else float("nan"),
            "mean_solve_time_us": (float(np.mean(solve_times)) * 1e6
                                   if solve_times else float("nan")),
        }
        for t in thresholds_m:
            pct = (100.0 * sum(1 for e in errors if e <= t) / len(errors)
                   if errors else 0.0)
            row[f"pct_within_{t:g}m"] = pct
        rows.append(row)
    return rows


def drift_series(trace: EventTrace, config: ExperimentConfig) -> tuple[list[dict], float]:
    """Two-anchor drift experiment: per-epoch received-interval difference
    and the cumulative clock divergence, against the sync node's clock.

    Returns the rows and the fitted divergence slope in ns per second of
    sync time (the relative skew of anchor A vs anchor B).
    """
    layout = config.layout
    if len(layout.anchors) != 2:
        raise HarnessError("drift experiment needs exactly two anchors")
    a, b = layout.anchor_ids
    syncs, _ = epochs_from_trace(trace, layout, config.tag_id)
    rows: list[dict] = []
    first = None
    prev = None
    for epoch in sorted(syncs):
        s = syncs[epoch]
        if not s.is_complete((a, b)):
            continue
        if first is None:
            first = s
        interval_diff = float("nan")
        if prev is not None:
            interval_diff = (s.rx[a] - prev.rx[a]) - (s.rx[b] - prev.rx[b])
        cum = (s.rx[a] - first.rx[a]) - (s.rx[b] - first.rx[b])
        rows.append({
            "epoch": epoch,
            "t_sync_s": s.t_sync_tx - first.t_sync_tx,
            "interval_diff_ns": interval_diff * 1e9,
            "cum_drift_ns": cum * 1e9,
        })
        prev = s
    if len(rows) < 2:
        raise HarnessError("drift experiment needs at least two complete sync epochs")
    ts = np.array([r["t_sync_s"] for r in rows])
    cums = np.array([r["cum_drift_ns"] for r in rows])
    slope_ns_per_s = float(np.polyfit(ts, cums, 1)[0])
    return rows, slope_ns_per_s
