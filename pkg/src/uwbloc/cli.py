"""Command-line experiment harness.

Subcommands: simulate, localize, report, sweep, driftplot, calibrate.
Global flags (--config, --seed, --out) precede the subcommand:

    uwbloc --config room.json --seed 7 --out runs/ simulate

Exit codes: 0 success, 2 configuration/validation error, 3 runtime failure.
"""

from __future__ import annotations

import csv
import functools
import json
import math
import sys
from pathlib import Path

import click

from .clock import ClockError
from .config import ConfigError, ExperimentConfig, load_config
from .core import GeometryError
from .harness import (
    HarnessError,
    SWEEPABLE_PARAMETERS,
    drift_series,
    localize_trace,
    run_sweep,
    trace_summary,
)
from .netsim import SimulationError, read_trace, run_scenario, write_trace
from .report import (
    ReportError,
    build_report,
    format_report_table,
    read_positions_csv,
    write_positions_csv,
    write_report_json,
)
from .twr import RangingError, calibrate as fit_calibration, load_calibration_csv

_CONFIG_ERRORS = (ConfigError, GeometryError, SimulationError, HarnessError,
                  ClockError, ReportError, RangingError, ValueError)


def _guarded(fn):
    """Map domain errors to exit code 2, unexpected failures to 3."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _CONFIG_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except OSError as exc:
            click.echo(f"runtime failure: {exc}", err=True)
            sys.exit(3)

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              default=None, help="Experiment config JSON.")
@click.option("--seed", type=int, default=None,
              help="Override the config's RNG seed.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path),
              default=Path("."), help="Output directory.")
@click.pass_context
def main(ctx: click.Context, config_path: Path | None, seed: int | None,
         out_dir: Path):
    """UWB localization toolkit: simulate, localize, report."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed
    ctx.obj["out_dir"] = out_dir


def _load_ctx_config(ctx: click.Context) -> ExperimentConfig:
    path = ctx.obj.get("config_path")
    if path is None:
        click.echo("error: this command needs --config", err=True)
        sys.exit(2)
    config = load_config(path)
    seed = ctx.obj.get("seed")
    if seed is not None:
        config = config.replace(seed=seed)
    return config


def _out_dir(ctx: click.Context) -> Path:
    out = ctx.obj["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    return out


@main.command()
@click.option("--trace-name", default="trace.jsonl", show_default=True)
@click.pass_context
@_guarded
def simulate(ctx: click.Context, trace_name: str):
    """Run the configured scenario and write the event trace."""
    config = _load_ctx_config(ctx)
    trace = run_scenario(config)
    out = _out_dir(ctx) / trace_name
    write_trace(trace, out)
    summary = trace_summary(trace)
    click.echo(f"trace written to {out}")
    click.echo(f"epochs: {config.epochs}  seed: {config.seed}  "
               f"config: {config.config_hash()}")
    click.echo(f"messages: {summary['tx_total']} "
               f"({', '.join(f'{k}={v}' for k, v in summary['tx_counts'].items())})")
    click.echo(f"receptions: {summary['rx_total']}  "
               f"duration: {summary['duration_s']:.3f} s")


@main.command()
@click.option("--trace", "trace_path", type=click.Path(path_type=Path, exists=True),
              required=True, help="Trace file from `simulate`.")
@click.option("--positions-name", default="positions.csv", show_default=True)
@click.option("--measurements-out", type=click.Path(path_type=Path), default=None,
              help="Also dump the per-epoch TDoA measurement CSV here.")
@click.pass_context
@_guarded
def localize(ctx: click.Context, trace_path: Path, positions_name: str,
             measurements_out: Path | None):
    """Solve one position per epoch of a recorded trace."""
    config = _load_ctx_config(ctx)
    trace = read_trace(trace_path)
    fixes = localize_trace(trace, config)
    out = _out_dir(ctx) / positions_name
    write_positions_csv(fixes, out)
    meta = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "protocol": config.protocol,
        "trace_summary": trace_summary(trace),
    }
    meta_path = out.with_suffix(out.suffix + ".meta.json")
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if measurements_out is not None:
        _dump_measurements(trace, config, measurements_out)
    n_ok = sum(1 for f in fixes if f.ok)
    click.echo(f"positions written to {out} ({n_ok}/{len(fixes)} epochs solved)")


def _dump_measurements(trace, config: ExperimentConfig, path: Path) -> None:
    if not config.protocol.startswith("tdoa"):
        raise HarnessError("--measurements-out applies to TDoA protocols")
    from .tdoa import (
        EpochSkipped,
        RangeEpoch,
        TdoaState,
        epochs_from_trace,
        process_epoch,
        write_measurements_csv,
    )

    mode = "kalman" if config.protocol == "tdoa_kalman" else "raw"
    syncs, ranges = epochs_from_trace(trace, config.layout, config.tag_id)
    state = TdoaState()
    collected = []
    for epoch in sorted(syncs):
        rng_epoch = ranges.get(epoch, RangeEpoch(epoch=epoch, rx={}))
        try:
            ms, state = process_epoch(state, syncs[epoch], rng_epoch,
                                      config.layout, mode, config.kf_params,
                                      require_all=not config.allow_incomplete)
            collected.extend(ms)
        except EpochSkipped as exc:
            if exc.state is not None:
                state = exc.state
    write_measurements_csv(collected, path)


@main.command()
@click.option("--positions", "positions_path",
              type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--thresholds", default="0.1,0.2", show_default=True,
              help="Comma-separated within-radius thresholds in meters.")
@click.option("--report-name", default="report.json", show_default=True)
@click.pass_context
@_guarded
def report(ctx: click.Context, positions_path: Path, thresholds: str,
           report_name: str):
    """Aggregate a positions CSV into accuracy statistics."""
    fixes = read_positions_csv(positions_path)
    thresholds_m = _parse_floats(thresholds)
    meta_path = positions_path.with_suffix(positions_path.suffix + ".meta.json")
    seed, config_hash, protocol, counts = 0, "unknown", "unknown", {}
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        seed = meta.get("seed", 0)
        config_hash = meta.get("config_hash", "unknown")
        protocol = meta.get("protocol", "unknown")
        counts = meta.get("trace_summary", {}).get("tx_counts", {})
    rep = build_report(fixes, thresholds_m, seed=seed, config_hash=config_hash,
                       protocol=protocol, message_counts=counts)
    out = _out_dir(ctx) / report_name
    write_report_json(rep, out)
    click.echo(format_report_table(rep))
    click.echo(f"report written to {out}")


def _parse_floats(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad numeric list {text!r}") from exc
    if not values:
        raise ConfigError("empty value list")
    return values


@main.command()
@click.option("--parameter", required=True,
              type=click.Choice(SWEEPABLE_PARAMETERS),
              help="Config field to sweep.")
@click.option("--values", required=True,
              help="Comma-separated values (numbers, method names, or on/off).")
@click.option("--thresholds", default="0.1,0.2", show_default=True)
@click.option("--sweep-name", default="sweep.csv", show_default=True)
@click.pass_context
@_guarded
def sweep(ctx: click.Context, parameter: str, values: str, thresholds: str,
          sweep_name: str):
    """Re-run the scenario for each parameter value; emit long-format CSV."""
    config = _load_ctx_config(ctx)
    raw_values = [v.strip() for v in values.split(",") if v.strip()]
    if not raw_values:
        raise ConfigError("sweep needs at least one value")
    if parameter in ("sync_interval_s", "timestamp_noise_sigma_s", "drop_probability"):
        sweep_values = [float(v) for v in raw_values]
    else:
        sweep_values = list(raw_values)
    thresholds_m = _parse_floats(thresholds)
    rows = run_sweep(config, parameter, sweep_values, thresholds_m)

    out = _out_dir(ctx) / sweep_name
    metric_keys = [k for k in rows[0] if k not in ("parameter", "value")]
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "value", "metric", "metric_value"])
        for row in rows:
            for key in metric_keys:
                writer.writerow([row["parameter"], row["value"], key, row[key]])
    click.echo(f"{'value':>12}  {'protocol':>12}  {'ok':>6}  "
               + "  ".join(f"{k:>18}" for k in metric_keys if k.startswith("pct")))
    for row in rows:
        pct_cols = "  ".join(f"{row[k]:>18.2f}" for k in metric_keys
                             if k.startswith("pct"))
        click.echo(f"{row['value']!s:>12}  {row['protocol']:>12}  "
                   f"{row['n_ok']:>6}  {pct_cols}")
    click.echo(f"sweep written to {out}")


@main.command()
@click.option("--f-sync-hz", type=float, default=None,
              help="Sync broadcast rate; overrides the config interval.")
@click.option("--duration-s", type=float, default=None,
              help="Experiment length; overrides config epochs.")
@click.option("--drift-name", default="drift.csv", show_default=True)
@click.pass_context
@_guarded
def driftplot(ctx: click.Context, f_sync_hz: float | None,
              duration_s: float | None, drift_name: str):
    """Two-anchor clock-drift experiment; prints the fitted slope."""
    config = _load_ctx_config(ctx)
    if f_sync_hz is not None:
        if f_sync_hz <= 0:
            raise ConfigError("--f-sync-hz must be positive")
        config = config.replace(sync_interval_s=1.0 / f_sync_hz)
    if duration_s is not None:
        epochs = max(2, int(round(duration_s / config.sync_interval_s)))
        config = config.replace(epochs=epochs)
    if len(config.layout.anchors) != 2:
        raise ConfigError("driftplot needs a config with exactly two anchors")
    trace = run_scenario(config)
    rows, slope = drift_series(trace, config)
    out = _out_dir(ctx) / drift_name
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "t_sync_s", "interval_diff_ns", "cum_drift_ns"])
        for r in rows:
            writer.writerow([
                r["epoch"], repr(r["t_sync_s"]),
                "" if math.isnan(r["interval_diff_ns"]) else repr(r["interval_diff_ns"]),
                repr(r["cum_drift_ns"]),
            ])
    click.echo(f"drift series written to {out} ({len(rows)} epochs)")
    click.echo(f"fitted drift slope: {slope:.3f} ns/s")


@main.command()
@click.option("--samples", "samples_path",
              type=click.Path(path_type=Path, exists=True), required=True,
              help="CSV with header true_m,measured_m.")
@click.option("--model-name", default="calibration.json", show_default=True)
@click.pass_context
@_guarded
def calibrate(ctx: click.Context, samples_path: Path, model_name: str):
    """Fit the range calibration (slope, offset) from paired samples."""
    samples = load_calibration_csv(samples_path)
    model = fit_calibration(samples)
    out = _out_dir(ctx) / model_name
    with open(out, "w", encoding="utf-8") as fh:
        json.dump({"slope": model.slope, "offset_m": model.offset_m}, fh, indent=2)
        fh.write("\n")
    click.echo(f"fitted slope {model.slope:.6f}, offset {model.offset_m:.6f} m "
               f"({len(samples)} samples)")
    click.echo(f"model written to {out}")


if __name__ == "__main__":
    main()
