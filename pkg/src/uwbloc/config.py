"""Declarative experiment configuration.

A scenario is one JSON document with explicit units in every field name
(``_s``, ``_m``, ``_ns2``) so second/nanosecond/ppm mixups cannot hide.  The
same dataclass drives simulation, localization and reporting; its canonical
JSON form is hashed into every report for reproducibility.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .clock import ClockKfParams, ClockModel
from .core import PS_PER_S, Node, NodeRole, Position, Rect, SystemLayout, distance
from .netsim import ChannelModel, NearAnchorBias

PROTOCOLS = ("twr_single", "twr_sds", "tdoa_raw", "tdoa_kalman")
SOLVER_METHODS = ("closed_form", "derivative_free", "quasi_newton", "least_squares")
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class Trajectory:
    """Tag motion: a fixed point, or waypoints traversed at constant speed.

    The path starts at the first waypoint at true time zero and holds the
    final waypoint after the path is exhausted.
    """

    points: tuple[Position, ...]
    speed_m_s: float = 0.0

    def __post_init__(self) -> None:
        if not self.points:
            raise ConfigError("trajectory needs at least one point")
        if len(self.points) > 1 and self.speed_m_s <= 0.0:
            raise ConfigError("waypoint trajectory needs a positive speed")

    @property
    def is_static(self) -> bool:
        return len(self.points) == 1

    def position_at_s(self, t_s: float) -> Position:
        if self.is_static:
            return self.points[0]
        remaining = self.speed_m_s * max(t_s, 0.0)
        for a, b in zip(self.points, self.points[1:]):
            leg = distance(a, b)
            if remaining <= leg:
                if leg == 0.0:
                    return a
                f = remaining / leg
                return Position(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y))
            remaining -= leg
        return self.points[-1]

    def position_at_ps(self, true_ps: int) -> Position:
        return self.position_at_s(true_ps / PS_PER_S)


@dataclass(frozen=True)
class SolverSettings:
    method: str = "least_squares"
    prior: str = "none"  # none | previous
    prior_point_m: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.method not in SOLVER_METHODS:
            raise ConfigError(f"solver.method must be one of {SOLVER_METHODS}")
        if self.prior not in ("none", "previous"):
            raise ConfigError("solver.prior must be 'none' or 'previous'")


@dataclass(frozen=True)
class ExperimentConfig:
    layout: SystemLayout
    protocol: str
    seed: int = 1
    epochs: int = 1
    sync_interval_s: float = 0.1
    reply_delay_s: float = 500e-6
    range_delay_mode: str = "reply_floor"  # reply_floor | uniform_staleness
    tag_id: int = 100
    default_clock: ClockModel = field(default_factory=ClockModel)
    node_clocks: tuple[tuple[int, ClockModel], ...] = ()
    channel: ChannelModel = field(default_factory=ChannelModel)
    trajectory: Trajectory | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)
    calibration_slope: float = 1.0
    calibration_offset_m: float = 0.0
    kf_params: ClockKfParams = field(default_factory=ClockKfParams)
    max_speed_m_s: float = 2.0
    tag_initiated: bool = True
    allow_incomplete: bool = False

    def __post_init__(self) -> None:
        if self.trajectory is None:
            object.__setattr__(
                self, "trajectory", Trajectory((self.layout.tag_start,))
            )
        self.validate()

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.reply_delay_s <= 0.0:
            raise ConfigError("reply_delay_s must be positive")
        if self.protocol.startswith("tdoa"):
            if self.sync_interval_s <= 0.0:
                raise ConfigError("sync_interval_s must be positive for TDoA")
            if len(self.layout.anchors) < 3:
                raise ConfigError("TDoA localization needs >= 3 anchors")
        if self.range_delay_mode not in ("reply_floor", "uniform_staleness"):
            raise ConfigError("range_delay_mode must be reply_floor or uniform_staleness")
        if self.tag_id in self.layout.anchor_ids or self.tag_id == self.layout.sync.node_id:
            raise ConfigError(f"tag id {self.tag_id} collides with an infrastructure node")
        if self.trajectory is not None:
            if self.trajectory.speed_m_s > self.max_speed_m_s:
                raise ConfigError(
                    f"trajectory speed {self.trajectory.speed_m_s} exceeds "
                    f"max {self.max_speed_m_s} m/s"
                )
            for p in self.trajectory.points:
                if not self.layout.bounds.contains(p):
                    raise ConfigError(f"trajectory point ({p.x}, {p.y}) outside bounds")
        if not 0.3 <= self.calibration_slope <= 3.0:
            raise ConfigError("calibration slope outside sanity band")

    def clock_models(self) -> dict[int, ClockModel]:
        overrides = dict(self.node_clocks)
        models: dict[int, ClockModel] = {}
        for node_id in (*self.layout.anchor_ids, self.layout.sync.node_id, self.tag_id):
            models[node_id] = overrides.get(node_id, self.default_clock)
        return models

    def to_dict(self) -> dict[str, Any]:
        lay = self.layout
        d: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "protocol": self.protocol,
            "seed": self.seed,
            "epochs": self.epochs,
            "sync_interval_s": self.sync_interval_s,
            "reply_delay_s": self.reply_delay_s,
            "range_delay_mode": self.range_delay_mode,
            "layout": {
                "anchors": [
                    {"id": n.node_id, "x_m": n.position.x, "y_m": n.position.y}
                    for n in lay.anchors
                ],
                "sync": {"id": lay.sync.node_id, "x_m": lay.sync.position.x,
                         "y_m": lay.sync.position.y},
                "tag_start_m": [lay.tag_start.x, lay.tag_start.y],
                "bounds_m": {"x_min": lay.bounds.x_min, "y_min": lay.bounds.y_min,
                             "x_max": lay.bounds.x_max, "y_max": lay.bounds.y_max},
            },
            "tag": {"id": self.tag_id},
            "clocks": {
                "default": _clock_to_dict(self.default_clock),
                "per_node": {
                    str(node_id): _clock_to_dict(model)
                    for node_id, model in self.node_clocks
                },
            },
            "channel": {
                "timestamp_noise_sigma_s": self.channel.timestamp_noise_sigma_s,
                "drop_probability": self.channel.drop_probability,
                "near_anchor_bias": (
                    None if self.channel.near_anchor_bias is None else {
                        "radius_m": self.channel.near_anchor_bias.radius_m,
                        "bias_s": self.channel.near_anchor_bias.bias_s,
                    }
                ),
            },
            "trajectory": _trajectory_to_dict(self.trajectory),
            "solver": {
                "method": self.solver.method,
                "prior": self.solver.prior,
                "prior_point_m": (list(self.solver.prior_point_m)
                                  if self.solver.prior_point_m else None),
            },
            "calibration": {"slope": self.calibration_slope,
                            "offset_m": self.calibration_offset_m},
            "kalman": {
                "sigma2_t_ns2": self.kf_params.sigma2_t_ns2,
                "sigma2_m": self.kf_params.sigma2_m,
                "p0": [list(row) for row in self.kf_params.p0],
            },
            "max_speed_m_s": self.max_speed_m_s,
            "tag_initiated": self.tag_initiated,
            "allow_incomplete": self.allow_incomplete,
        }
        return d

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def replace(self, **kwargs) -> "ExperimentConfig":
        import dataclasses

        return dataclasses.replace(self, **kwargs)


def _clock_to_dict(m: ClockModel) -> dict[str, float]:
    return {
        "start_offset_s": m.start_offset_s,
        "skew": m.skew,
        "random_walk_sigma": m.random_walk_sigma,
        "phase_walk_sigma": m.phase_walk_sigma,
    }


def _clock_from_dict(d: dict[str, Any], where: str) -> ClockModel:
    try:
        return ClockModel(
            start_offset_s=float(d.get("start_offset_s", 0.0)),
            skew=float(d.get("skew", 1.0)),
            random_walk_sigma=float(d.get("random_walk_sigma", 0.0)),
            phase_walk_sigma=float(d.get("phase_walk_sigma", 0.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _trajectory_to_dict(t: Trajectory) -> dict[str, Any]:
    if t.is_static:
        return {"type": "static", "x_m": t.points[0].x, "y_m": t.points[0].y}
    return {
        "type": "waypoints",
        "points_m": [[p.x, p.y] for p in t.points],
        "speed_m_s": t.speed_m_s,
    }


def _trajectory_from_dict(d: dict[str, Any]) -> Trajectory:
    kind = d.get("type", "static")
    if kind == "static":
        return Trajectory((Position(float(d["x_m"]), float(d["y_m"])),))
    if kind == "waypoints":
        pts = tuple(Position(float(x), float(y)) for x, y in d["points_m"])
        return Trajectory(pts, speed_m_s=float(d.get("speed_m_s", 1.0)))
    raise ConfigError(f"trajectory.type must be 'static' or 'waypoints', got {kind!r}")


def _require(d: dict[str, Any], key: str, where: str) -> Any:
    if key not in d:
        raise ConfigError(f"missing required field {where}.{key}")
    return d[key]


def config_from_dict(doc: dict[str, Any]) -> ExperimentConfig:
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")

    lay_doc = _require(doc, "layout", "config")
    bounds_doc = _require(lay_doc, "bounds_m", "layout")
    try:
        bounds = Rect(float(bounds_doc["x_min"]), float(bounds_doc["y_min"]),
                      float(bounds_doc["x_max"]), float(bounds_doc["y_max"]))
        anchors = tuple(
            Node(int(a["id"]), NodeRole.ANCHOR,
                 Position(float(a["x_m"]), float(a["y_m"])))
            for a in _require(lay_doc, "anchors", "layout")
        )
        sync_doc = _require(lay_doc, "sync", "layout")
        sync = Node(int(sync_doc["id"]), NodeRole.SYNC,
                    Position(float(sync_doc["x_m"]), float(sync_doc["y_m"])))
        tag_start_doc = lay_doc.get("tag_start_m", [0.0, 0.0])
        layout = SystemLayout(
            anchors=anchors, sync=sync,
            tag_start=Position(float(tag_start_doc[0]), float(tag_start_doc[1])),
            bounds=bounds,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"layout: {exc}") from exc

    clocks_doc = doc.get("clocks", {})
    default_clock = _clock_from_dict(clocks_doc.get("default", {}), "clocks.default")
    node_clocks = tuple(
        (int(node_id), _clock_from_dict(cd, f"clocks.per_node.{node_id}"))
        for node_id, cd in sorted(clocks_doc.get("per_node", {}).items())
    )

    chan_doc = doc.get("channel", {})
    bias_doc = chan_doc.get("near_anchor_bias")
    try:
        channel = ChannelModel(
            timestamp_noise_sigma_s=float(chan_doc.get("timestamp_noise_sigma_s", 0.0)),
            drop_probability=float(chan_doc.get("drop_probability", 0.0)),
            near_anchor_bias=(
                None if bias_doc is None else NearAnchorBias(
                    radius_m=float(bias_doc["radius_m"]),
                    bias_s=float(bias_doc["bias_s"]),
                )
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"channel: {exc}") from exc

    solver_doc = doc.get("solver", {})
    prior_point = solver_doc.get("prior_point_m")
    solver = SolverSettings(
        method=solver_doc.get("method", "least_squares"),
        prior=solver_doc.get("prior", "none"),
        prior_point_m=tuple(prior_point) if prior_point else None,
    )

    calib_doc = doc.get("calibration", {})
    kal_doc = doc.get("kalman", {})
    kf_params = ClockKfParams(
        sigma2_t_ns2=float(kal_doc.get("sigma2_t_ns2", 0.4)),
        sigma2_m=float(kal_doc.get("sigma2_m", 0.01)),
        p0=tuple(tuple(float(v) for v in row)
                 for row in kal_doc.get("p0", [[1.0, 0.0], [0.0, 0.001]])),
    )

    traj_doc = doc.get("trajectory")
    trajectory = _trajectory_from_dict(traj_doc) if traj_doc else None

    try:
        return ExperimentConfig(
            layout=layout,
            protocol=str(_require(doc, "protocol", "config")),
            seed=int(doc.get("seed", 1)),
            epochs=int(_require(doc, "epochs", "config")),
            sync_interval_s=float(doc.get("sync_interval_s", 0.1)),
            reply_delay_s=float(doc.get("reply_delay_s", 500e-6)),
            range_delay_mode=str(doc.get("range_delay_mode", "reply_floor")),
            tag_id=int(doc.get("tag", {}).get("id", 100)),
            default_clock=default_clock,
            node_clocks=node_clocks,
            channel=channel,
            trajectory=trajectory,
            solver=solver,
            calibration_slope=float(calib_doc.get("slope", 1.0)),
            calibration_offset_m=float(calib_doc.get("offset_m", 0.0)),
            kf_params=kf_params,
            max_speed_m_s=float(doc.get("max_speed_m_s", 2.0)),
            tag_initiated=bool(doc.get("tag_initiated", True)),
            allow_incomplete=bool(doc.get("allow_incomplete", False)),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file; errors carry file/line context."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}"
            ) from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    try:
        return config_from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
