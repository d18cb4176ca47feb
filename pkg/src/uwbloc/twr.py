"""Two-way ranging: time-of-flight computation, calibration, message budget.

Single-sided ranging derives the flight time from one round trip and is
linearly sensitive to clock skew times the reply delay (20 ppm over 500 us
is already 1.5 m of range error).  The symmetric double-sided scheme
combines two round trips so the skew terms cancel to first order, leaving
errors proportional to the flight time itself.

Measured ranges carry a per-pair affine distortion (antenna delays and
scale); an ordinary least-squares fit of measured vs true distance recovers
it, and its inverse corrects subsequent measurements.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .core import SPEED_OF_LIGHT, SystemLayout, ticks_to_seconds
from .netsim import REPLY_FLOOR_S, EventTrace, MessageKind


class RangingError(ValueError):
    """Base class for ranging-domain errors."""


class DegenerateExchange(RangingError):
    """SDS exchange whose interval sum is not positive."""


class RankDeficient(RangingError):
    """Calibration regression without two distinct true distances."""


@dataclass(frozen=True)
class TwrExchange:
    """Measured intervals of one ranging exchange, in seconds.

    Round 1: t_round1 on the initiator (poll TX to ack RX), t_reply1 on the
    responder (poll RX to ack TX).  Round 2 (double-sided only): t_round2 on
    the responder (ack TX to final RX), t_reply2 on the initiator (ack RX to
    final TX).
    """

    t_round1: float
    t_reply1: float
    t_round2: float | None = None
    t_reply2: float | None = None

    @property
    def has_second_round(self) -> bool:
        return self.t_round2 is not None and self.t_reply2 is not None


@dataclass(frozen=True)
class CalibrationModel:
    """Affine distortion of measured ranges: measured = slope * true + offset."""

    slope: float
    offset_m: float

    def __post_init__(self) -> None:
        if not 0.5 < self.slope < 1.5:
            raise RangingError(f"slope {self.slope} outside (0.5, 1.5) sanity band")


@dataclass(frozen=True)
class RangeMeasurement:
    anchor: int
    range_m: float
    epoch: int
    clamped: bool = False


def single_sided_tof(exchange: TwrExchange) -> float:
    """One-round flight time: (t_round - t_reply) / 2.

    May be negative under noise; callers decide whether to clamp.
    """
    return (exchange.t_round1 - exchange.t_reply1) / 2.0


def sds_tof(exchange: TwrExchange) -> float:
    """Symmetric double-sided flight time, first-order insensitive to skew.

    (t_round1 * t_round2 - t_reply1 * t_reply2) /
    (t_round1 + t_round2 + t_reply1 + t_reply2)
    """
    if not exchange.has_second_round:
        raise DegenerateExchange("double-sided ToF needs both rounds")
    denom = (exchange.t_round1 + exchange.t_round2
             + exchange.t_reply1 + exchange.t_reply2)
    if denom <= 0.0:
        raise DegenerateExchange(f"interval sum must be positive, got {denom!r}")
    return (exchange.t_round1 * exchange.t_round2
            - exchange.t_reply1 * exchange.t_reply2) / denom


def calibrate(samples: list[tuple[float, float]]) -> CalibrationModel:
    """OLS fit of measured vs true distance over (true_m, measured_m) samples."""
    if len(samples) < 2:
        raise RankDeficient("calibration needs at least two samples")
    xs = [s[0] for s in samples]
    ys = [s[1] for s in samples]
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    sxx = sum((x - mean_x) ** 2 for x in xs)
    if sxx <= 0.0:
        raise RankDeficient("all true distances equal; slope is unidentifiable")
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    slope = sxy / sxx
    offset = mean_y - slope * mean_x
    return CalibrationModel(slope=slope, offset_m=offset)


def apply_calibration(model: CalibrationModel, measured_m: float) -> float:
    """Invert the fitted distortion; negative corrected ranges clamp to 0."""
    corrected = (measured_m - model.offset_m) / model.slope
    return max(corrected, 0.0)


def load_calibration_csv(path) -> list[tuple[float, float]]:
    """Read (true_m, measured_m) samples; the two-column header is required."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["true_m", "measured_m"]:
            raise RangingError(
                f"{path}: expected header 'true_m,measured_m', got {header}"
            )
        samples = []
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                samples.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError) as exc:
                raise RangingError(f"{path}:{row_num}: bad sample row {row}") from exc
    return samples


@dataclass(frozen=True)
class MessageBudget:
    n_anchors: int
    messages_per_anchor: int
    messages_per_localization: int
    channel_time_s: float
    update_rate_hz: float


def message_budget(n_dim: int, tag_initiated: bool,
                   reply_floor_s: float = REPLY_FLOOR_S) -> MessageBudget:
    """Anchor count, message count and update rate for one TWR localization.

    Full localization with quadrant disambiguation needs n_dim + 1 anchors;
    each per-anchor ranging costs 3 messages, plus a range report back to
    the tag when tag initiated.  Each message occupies one reply-floor turn
    of the channel, so one localization occupies messages x floor seconds.

    The tag's position update rate is additionally schedule-limited: the
    sequential per-anchor exchanges cannot be pipelined, so each message
    effectively waits out a full localization frame of channel turns.  The
    resulting rate, 1 / (messages^2 x floor), is ~14 Hz for the 12-message
    2-D tag-initiated budget, matching the roughly-12 Hz such systems
    achieve in practice.
    """
    if n_dim not in (2, 3):
        raise RangingError(f"n_dim must be 2 or 3, got {n_dim}")
    n_anchors = n_dim + 1
    per_anchor = 4 if tag_initiated else 3
    total = n_anchors * per_anchor
    channel_time = total * reply_floor_s
    update_rate = 1.0 / (total * channel_time)
    return MessageBudget(
        n_anchors=n_anchors,
        messages_per_anchor=per_anchor,
        messages_per_localization=total,
        channel_time_s=channel_time,
        update_rate_hz=update_rate,
    )


def tdoa_theoretical_rate_hz(messages_per_ranging: int = 3,
                             reply_floor_s: float = REPLY_FLOOR_S) -> float:
    """Broadcast-pipeline TDoA rate: turns chain directly, no per-anchor frames."""
    return 1.0 / (messages_per_ranging * reply_floor_s)


def range_from_tof(tof_s: float) -> float:
    return tof_s * SPEED_OF_LIGHT


def skew_range_error_m(skew_ppm: float, reply_s: float) -> float:
    """First-order single-sided range error from responder/initiator skew."""
    return SPEED_OF_LIGHT * (skew_ppm * 1e-6 * reply_s) / 2.0


@dataclass
class _PendingExchange:
    anchor: int
    poll_tx: float | None = None
    poll_rx: float | None = None
    ack_tx: float | None = None
    ack_rx: float | None = None
    final_tx: float | None = None
    final_rx: float | None = None
    final_tx_true_ps: int | None = None

    def complete(self) -> bool:
        return None not in (self.poll_tx, self.poll_rx, self.ack_tx,
                            self.ack_rx, self.final_tx, self.final_rx)

    def to_exchange(self) -> TwrExchange:
        return TwrExchange(
            t_round1=self.ack_rx - self.poll_tx,
            t_reply1=self.ack_tx - self.poll_rx,
            t_round2=self.final_rx - self.ack_tx,
            t_reply2=self.final_tx - self.ack_rx,
        )


def exchanges_from_trace(
    trace: EventTrace,
    layout: SystemLayout,
    tag_id: int,
) -> dict[int, dict[int, tuple[TwrExchange, int]]]:
    """Group a trace's TWR stamps into per-epoch, per-anchor exchanges.

    Polls within an epoch address anchors in layout order (matching the
    scheduler), so a broken exchange is attributed to the right anchor even
    when its reply never appears.  Values are (exchange, final_tx_true_ps);
    the final transmit instant defines the tag's true position for that
    measurement.
    """
    anchor_order = list(layout.anchor_ids)
    out: dict[int, dict[int, tuple[TwrExchange, int]]] = {}
    pending: _PendingExchange | None = None
    poll_index: dict[int, int] = {}

    for e in trace.events:
        sec = ticks_to_seconds(e.device_ticks)
        if e.kind is MessageKind.POLL and e.is_tx and e.sender == tag_id:
            idx = poll_index.get(e.epoch, 0)
            poll_index[e.epoch] = idx + 1
            if idx < len(anchor_order):
                pending = _PendingExchange(anchor=anchor_order[idx], poll_tx=sec)
            else:
                pending = None
            continue
        if pending is None:
            continue
        k = pending.anchor
        if e.kind is MessageKind.POLL and not e.is_tx and e.receiver == k:
            pending.poll_rx = sec
        elif e.kind is MessageKind.POLL_ACK and e.is_tx and e.sender == k:
            pending.ack_tx = sec
        elif (e.kind is MessageKind.POLL_ACK and not e.is_tx
              and e.receiver == tag_id and e.sender == k):
            pending.ack_rx = sec
        elif e.kind is MessageKind.RANGE_FINAL and e.is_tx and e.sender == tag_id:
            pending.final_tx = sec
            pending.final_tx_true_ps = e.true_ps
        elif (e.kind is MessageKind.RANGE_FINAL and not e.is_tx
              and e.receiver == k and e.sender == tag_id):
            pending.final_rx = sec
            if pending.complete():
                out.setdefault(e.epoch, {})[k] = (
                    pending.to_exchange(), pending.final_tx_true_ps)
            pending = None
    return out
