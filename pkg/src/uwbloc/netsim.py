"""Deterministic radio-network simulator.

Nodes exchange timestamped messages with speed-of-light propagation.  Every
transmission is stamped on the sender's own clock; every reception is stamped
on the receiver's clock, optionally perturbed by Gaussian timestamp noise and
a close-range bias, then quantized to whole ticks.  True event times are kept
in integer picoseconds so traces are exactly reproducible for a fixed seed.

Message flow per protocol:

* TWR (one ranging with one anchor): POLL tag->anchor, POLL_ACK anchor->tag,
  RANGE_FINAL tag->anchor, plus a RANGE_FINAL report anchor->tag when the
  exchange is tag initiated (the anchor holds the computed range and must
  send it back).
* TDoA (one epoch): RANGE_REQ tag->sync, SYNC broadcast by the sync node,
  RANGE broadcast by the tag after its chosen reply delay.  The tag may hold
  the RANGE anywhere inside the sync window; the gap between a RANGE and the
  sync it is adjusted against is what degrades accuracy at long sync
  intervals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable, Mapping

import numpy as np

from .clock import SimClock
from .core import (
    PS_PER_S,
    Position,
    derive_seed,
    propagation_delay,
    quantize_to_ticks,
    seconds_to_ps,
)

if TYPE_CHECKING:
    from .config import ExperimentConfig

REPLY_FLOOR_S = 500e-6
REPLY_FLOOR_PS = seconds_to_ps(REPLY_FLOOR_S)

# True time of the first scheduled protocol event.
SCENARIO_START_PS = seconds_to_ps(0.05)


class SimulationError(ValueError):
    """Raised for inconsistent scenario configurations."""


class MessageKind(Enum):
    POLL = "POLL"
    POLL_ACK = "POLL_ACK"
    RANGE_FINAL = "RANGE_FINAL"
    RANGE_REQ = "RANGE_REQ"
    SYNC = "SYNC"
    RANGE = "RANGE"


@dataclass(frozen=True)
class NearAnchorBias:
    """Extra rx-stamp bias when sender and receiver are closer than radius_m."""

    radius_m: float
    bias_s: float


@dataclass(frozen=True)
class ChannelModel:
    timestamp_noise_sigma_s: float = 0.0
    drop_probability: float = 0.0
    near_anchor_bias: NearAnchorBias | None = None

    def __post_init__(self) -> None:
        if self.timestamp_noise_sigma_s < 0.0:
            raise SimulationError("timestamp noise sigma must be >= 0")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise SimulationError("drop probability must be in [0, 1]")


@dataclass(frozen=True)
class RxRecord:
    receiver: int
    sender: int
    kind: MessageKind
    device_rx_ticks: int
    true_rx_ps: int
    epoch: int


@dataclass(frozen=True)
class TraceEvent:
    true_ps: int
    epoch: int
    kind: MessageKind
    is_tx: bool
    sender: int
    receiver: int | None
    device_ticks: int

    def sort_key(self) -> tuple:
        # Total order with deterministic tie-breaking for simultaneous events.
        return (self.true_ps, self.kind.value, 0 if self.is_tx else 1,
                self.sender, -1 if self.receiver is None else self.receiver)


@dataclass
class EventTrace:
    events: list[TraceEvent]
    rng_seed: int

    def tx_events(self) -> list[TraceEvent]:
        return [e for e in self.events if e.is_tx]

    def tx_count(self, kind: MessageKind | None = None) -> int:
        return sum(1 for e in self.events
                   if e.is_tx and (kind is None or e.kind is kind))

    def sorted(self) -> "EventTrace":
        return EventTrace(sorted(self.events, key=TraceEvent.sort_key), self.rng_seed)


def write_trace(trace: EventTrace, path) -> None:
    """Serialize a trace as line-delimited JSON (one record per line)."""
    with open(path, "w", encoding="utf-8") as fh:
        meta = {"record": "meta", "schema": 1, "seed": trace.rng_seed}
        fh.write(json.dumps(meta) + "\n")
        for e in trace.events:
            rec = {
                "record": "event",
                "epoch": e.epoch,
                "event": "tx" if e.is_tx else "rx",
                "kind": e.kind.value,
                "sender": e.sender,
                "receiver": e.receiver,
                "ticks": e.device_ticks,
                "true_ps": e.true_ps,
            }
            fh.write(json.dumps(rec) + "\n")


def read_trace(path) -> EventTrace:
    events: list[TraceEvent] = []
    seed = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("record") == "meta":
                seed = rec.get("seed", 0)
                continue
            events.append(TraceEvent(
                true_ps=rec["true_ps"],
                epoch=rec["epoch"],
                kind=MessageKind(rec["kind"]),
                is_tx=rec["event"] == "tx",
                sender=rec["sender"],
                receiver=rec["receiver"],
                device_ticks=rec["ticks"],
            ))
    return EventTrace(events, seed)


def enforce_reply_delay(rx_ps: int, requested_tx_ps: int,
                        floor_ps: int = REPLY_FLOOR_PS) -> int:
    """Earliest legal transmit time: a node replies no sooner than the floor."""
    if requested_tx_ps < rx_ps:
        raise SimulationError("requested reply before the triggering reception")
    return max(requested_tx_ps, rx_ps + floor_ps)


def broadcast(
    positions: Mapping[int, Position],
    clocks: Mapping[int, SimClock],
    sender: int,
    kind: MessageKind,
    tx_true_ps: int,
    channel: ChannelModel,
    seed: int,
    epoch: int = 0,
) -> tuple[int, list[RxRecord]]:
    """Transmit one message from `sender` to every other node.

    Returns the sender's own TX stamp (ticks) and one RxRecord per receiver
    that did not drop the packet.  RX stamps get Gaussian jitter and the
    close-range bias in the device-stamp domain, before quantization; TX
    stamps are clean (a radio stamps its own transmission precisely).
    """
    if sender not in positions:
        raise SimulationError(f"sender {sender} not placed")
    tx_ticks = clocks[sender].read_ticks(tx_true_ps)
    records: list[RxRecord] = []
    for receiver in sorted(positions):
        if receiver == sender:
            continue
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((seed, receiver)))
        )
        if channel.drop_probability > 0.0 and rng.random() < channel.drop_probability:
            continue
        dist_prop = propagation_delay(positions[sender], positions[receiver])
        true_rx_ps = tx_true_ps + seconds_to_ps(dist_prop)
        reading = clocks[receiver].read_exact(true_rx_ps)
        if channel.timestamp_noise_sigma_s > 0.0:
            reading += rng.normal(0.0, channel.timestamp_noise_sigma_s)
        bias = channel.near_anchor_bias
        if bias is not None:
            dx = positions[sender].x - positions[receiver].x
            dy = positions[sender].y - positions[receiver].y
            if math.hypot(dx, dy) <= bias.radius_m:
                reading += bias.bias_s
        records.append(RxRecord(
            receiver=receiver,
            sender=sender,
            kind=kind,
            device_rx_ticks=quantize_to_ticks(reading),
            true_rx_ps=true_rx_ps,
            epoch=epoch,
        ))
    return tx_ticks, records


class _ScenarioState:
    """Book-keeping shared by the protocol drivers."""

    def __init__(self, config: "ExperimentConfig"):
        self.config = config
        layout = config.layout
        self.positions_static: dict[int, Position] = {
            n.node_id: n.position for n in layout.anchors
        }
        self.positions_static[layout.sync.node_id] = layout.sync.position
        self.tag_id = config.tag_id
        self.sync_id = layout.sync.node_id
        self.clocks = {
            node_id: SimClock(model, derive_seed(config.seed, "clk", node_id))
            for node_id, model in config.clock_models().items()
        }
        self.channel = config.channel
        self.events: list[TraceEvent] = []
        self._bcast_counter = 0
        self.tag_position_at: Callable[[int], Position] = config.trajectory.position_at_ps

    def positions_at(self, true_ps: int) -> dict[int, Position]:
        positions = dict(self.positions_static)
        positions[self.tag_id] = self.tag_position_at(true_ps)
        return positions

    def emit(self, sender: int, kind: MessageKind, tx_true_ps: int,
             epoch: int) -> dict[int, RxRecord]:
        """Broadcast, append tx+rx trace events, return rx records by receiver."""
        self._bcast_counter += 1
        seed = derive_seed(self.config.seed, "bcast", self._bcast_counter)
        positions = self.positions_at(tx_true_ps)
        tx_ticks, records = broadcast(
            positions, self.clocks, sender, kind, tx_true_ps,
            self.channel, seed, epoch,
        )
        self.events.append(TraceEvent(
            true_ps=tx_true_ps, epoch=epoch, kind=kind, is_tx=True,
            sender=sender, receiver=None, device_ticks=tx_ticks,
        ))
        out: dict[int, RxRecord] = {}
        for rec in records:
            self.events.append(TraceEvent(
                true_ps=rec.true_rx_ps, epoch=epoch, kind=kind, is_tx=False,
                sender=sender, receiver=rec.receiver,
                device_ticks=rec.device_rx_ticks,
            ))
            out[rec.receiver] = rec
        return out


def _run_tdoa(state: _ScenarioState) -> None:
    cfg = state.config
    sync_pos = cfg.layout.sync.position
    interval_ps = seconds_to_ps(cfg.sync_interval_s)
    reply_ps = seconds_to_ps(cfg.reply_delay_s)

    # Per-epoch delay between the tag hearing SYNC and transmitting RANGE.
    # "uniform_staleness" spreads ranging across the sync window, the way a
    # tag ranging faster than the sync rate would; "reply_floor" ranges
    # immediately.
    delays_s = np.full(cfg.epochs, cfg.reply_delay_s)
    if cfg.range_delay_mode == "uniform_staleness":
        hi = cfg.sync_interval_s - 2.0 * cfg.reply_delay_s - 1e-3
        if hi > cfg.reply_delay_s:
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence(
                    (derive_seed(cfg.seed, "staleness"),)))
            )
            delays_s = rng.uniform(cfg.reply_delay_s, hi, size=cfg.epochs)

    for epoch in range(cfg.epochs):
        sync_target_ps = SCENARIO_START_PS + epoch * interval_ps
        tag_pos = state.tag_position_at(sync_target_ps)
        prop_ps = seconds_to_ps(propagation_delay(tag_pos, sync_pos))
        req_tx_ps = sync_target_ps - reply_ps - prop_ps
        req_rx = state.emit(state.tag_id, MessageKind.RANGE_REQ, req_tx_ps, epoch)
        if state.sync_id not in req_rx:
            continue  # sync node missed the request; no sync this epoch
        sync_tx_ps = enforce_reply_delay(
            req_rx[state.sync_id].true_rx_ps, sync_target_ps,
            floor_ps=reply_ps,
        )
        sync_rx = state.emit(state.sync_id, MessageKind.SYNC, sync_tx_ps, epoch)
        if state.tag_id not in sync_rx:
            continue  # tag missed its go-ahead; anchors still got the sync
        range_tx_ps = enforce_reply_delay(
            sync_rx[state.tag_id].true_rx_ps,
            sync_rx[state.tag_id].true_rx_ps + seconds_to_ps(float(delays_s[epoch])),
            floor_ps=reply_ps,
        )
        state.emit(state.tag_id, MessageKind.RANGE, range_tx_ps, epoch)


def _run_twr(state: _ScenarioState) -> None:
    cfg = state.config
    reply_ps = seconds_to_ps(cfg.reply_delay_s)
    cursor_ps = SCENARIO_START_PS
    for epoch in range(cfg.epochs):
        for anchor in cfg.layout.anchors:
            k = anchor.node_id
            poll_rx = state.emit(state.tag_id, MessageKind.POLL, cursor_ps, epoch)
            if k not in poll_rx:
                cursor_ps += reply_ps
                continue
            ack_tx_ps = enforce_reply_delay(
                poll_rx[k].true_rx_ps, poll_rx[k].true_rx_ps, floor_ps=reply_ps)
            ack_rx = state.emit(k, MessageKind.POLL_ACK, ack_tx_ps, epoch)
            if state.tag_id not in ack_rx:
                cursor_ps = ack_tx_ps + reply_ps
                continue
            final_tx_ps = enforce_reply_delay(
                ack_rx[state.tag_id].true_rx_ps, ack_rx[state.tag_id].true_rx_ps,
                floor_ps=reply_ps)
            final_rx = state.emit(state.tag_id, MessageKind.RANGE_FINAL,
                                  final_tx_ps, epoch)
            cursor_ps = final_tx_ps + reply_ps
            if k in final_rx and cfg.tag_initiated:
                # Anchor holds the range; report it back to the tag.
                report_tx_ps = enforce_reply_delay(
                    final_rx[k].true_rx_ps, final_rx[k].true_rx_ps,
                    floor_ps=reply_ps)
                state.emit(k, MessageKind.RANGE_FINAL, report_tx_ps, epoch)
                cursor_ps = report_tx_ps + reply_ps


def run_scenario(config: "ExperimentConfig") -> EventTrace:
    """Run the configured protocol; identical configs and seeds give
    byte-identical traces."""
    config.validate()
    state = _ScenarioState(config)
    if config.epochs > 0:
        if config.protocol.startswith("tdoa"):
            _run_tdoa(state)
        else:
            _run_twr(state)
    trace = EventTrace(state.events, config.seed)
    return trace.sorted()
