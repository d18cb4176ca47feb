"""Forward-TDoA pipeline: adjusted arrival times and pairwise differences.

Anchors stamp a tag's RANGE broadcast on their own free-running clocks.  To
compare stamps across anchors, each arrival is re-expressed on the sync
node's clock: subtract the anchor's stamp of the last SYNC (less the known
sync-to-anchor flight time), divide the elapsed interval by the anchor's
skew relative to the sync clock, and add the sync transmit stamp:

    adjusted = (t_range_rx - t_sync_rx + zeta) / skew + t_sync_tx

Two modes supply (t_sync_rx, skew):

* raw    -- the measured stamp of the latest SYNC, with skew taken as the
  interval ratio over the last two SYNCs.  Needs two sync receptions of
  history per anchor.
* kalman -- a per-anchor clock filter fuses every sync reception into a
  smoothed [timestamp, skew] state, so the tracked filter replaces the
  fresh sync pair and keeps adjusting well between widely spaced syncs.

Pairwise differences of adjusted arrivals are pure geometry: c * dt(k, l)
equals the tag's range difference to anchors k and l.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .clock import (
    ClockKfParams,
    ClockKfState,
    estimate_skew,
    kf_initial_state,
    kf_predict,
    kf_update,
)
from .core import SystemLayout, ticks_to_seconds
from .netsim import EventTrace, MessageKind


class TdoaError(ValueError):
    """Base class for TDoA pipeline errors."""


class MissingSyncRx(TdoaError):
    """An anchor lacks a sync stamp for the requested epoch."""


class EpochSkipped(TdoaError):
    """An epoch that cannot produce measurements.

    Carries the fold state after absorbing the epoch's sync information, so
    a pipeline can record the failure and keep going.
    """

    def __init__(self, msg: str, state: "TdoaState | None" = None):
        super().__init__(msg)
        self.state = state


class InsufficientHistory(EpochSkipped):
    """First epoch: no previous sync to estimate skews from."""


class IncompleteEpoch(EpochSkipped):
    """Missing sync or range stamps for one or more configured anchors."""


@dataclass(frozen=True)
class SyncEpoch:
    """One SYNC broadcast: the sync node's TX stamp and per-anchor RX stamps,
    all in seconds of the respective device clocks."""

    epoch: int
    t_sync_tx: float
    rx: dict[int, float]

    def is_complete(self, anchor_ids) -> bool:
        return all(a in self.rx for a in anchor_ids)


@dataclass(frozen=True)
class RangeEpoch:
    """One tag RANGE broadcast: per-anchor RX stamps in device seconds."""

    epoch: int
    rx: dict[int, float]

    def is_complete(self, anchor_ids) -> bool:
        return all(a in self.rx for a in anchor_ids)


@dataclass(frozen=True)
class TdoaMeasurement:
    """Adjusted arrival-time difference for one anchor pair, canonical k < l."""

    anchor_k: int
    anchor_l: int
    dt_s: float
    epoch: int


def adjusted_arrival(
    t_range_rx: float,
    sync: SyncEpoch,
    skew: float,
    zeta: float,
    anchor: int,
) -> float:
    """Re-express an anchor's RANGE arrival stamp on the sync node's clock."""
    if skew <= 0.0:
        raise TdoaError(f"skew must be positive, got {skew}")
    if anchor not in sync.rx:
        raise MissingSyncRx(f"anchor {anchor} has no sync stamp in epoch {sync.epoch}")
    return (t_range_rx - sync.rx[anchor] + zeta) / skew + sync.t_sync_tx


def pairwise_tdoa(adjusted: dict[int, float], epoch: int) -> list[TdoaMeasurement]:
    """All unordered anchor pairs in canonical order; dt = adj[k] - adj[l]."""
    if len(adjusted) < 2:
        raise TdoaError("need at least two adjusted arrivals")
    anchors = sorted(adjusted)
    out = []
    for i, k in enumerate(anchors):
        for l in anchors[i + 1:]:
            out.append(TdoaMeasurement(k, l, adjusted[k] - adjusted[l], epoch))
    return out


@dataclass(frozen=True)
class TdoaState:
    """Fold state of the epoch processor.

    Raw mode keeps the last complete sync epoch.  Kalman mode keeps a filter
    per anchor, the sync TX stamp of the last fold, the last measured
    (tx, rx) pair per anchor for interval-ratio measurements, and which
    filters have absorbed at least one real measurement.
    """

    prev_sync: SyncEpoch | None = None
    filters: dict[int, ClockKfState] = field(default_factory=dict)
    last_sync_tx: float | None = None
    last_meas: dict[int, tuple[float, float]] = field(default_factory=dict)
    warm: frozenset[int] = frozenset()


def fold_sync(
    state: TdoaState,
    sync: SyncEpoch,
    layout: SystemLayout,
    mode: str,
    kf_params: ClockKfParams | None = None,
) -> TdoaState:
    """Absorb one sync epoch's stamps into the fold state.

    Used directly when an epoch produced a sync but no usable range; the
    filters/history must advance regardless.
    """
    if mode == "raw":
        return _fold_sync_raw(state, sync, layout.anchor_ids)
    if mode == "kalman":
        return _fold_sync_kalman(state, sync, layout.anchor_ids,
                                 kf_params or ClockKfParams())
    raise TdoaError(f"mode must be 'raw' or 'kalman', got {mode!r}")


def _fold_sync_raw(state: TdoaState, sync: SyncEpoch, anchor_ids) -> TdoaState:
    if sync.is_complete(anchor_ids):
        return TdoaState(prev_sync=sync)
    return TdoaState(prev_sync=state.prev_sync)


def _fold_sync_kalman(
    state: TdoaState, sync: SyncEpoch, anchor_ids, params: ClockKfParams
) -> TdoaState:
    filters = dict(state.filters)
    last_meas = dict(state.last_meas)
    warm = set(state.warm)

    if state.last_sync_tx is not None:
        dt_sync = sync.t_sync_tx - state.last_sync_tx
        if dt_sync <= 0.0:
            raise TdoaError(f"epoch {sync.epoch}: non-increasing sync TX stamps")
        for a in list(filters):
            filters[a] = kf_predict(filters[a], dt_sync, params)

    for a in anchor_ids:
        if a not in sync.rx:
            continue  # dropped stamp: the filter coasts on its prediction
        if a not in filters:
            filters[a] = kf_initial_state(sync.rx[a], params)
        else:
            tx_prev, rx_prev = last_meas[a]
            measured_m = estimate_skew(rx_prev, sync.rx[a], tx_prev, sync.t_sync_tx)
            filters[a] = kf_update(filters[a], sync.rx[a], measured_m, params)
            warm.add(a)
        last_meas[a] = (sync.t_sync_tx, sync.rx[a])

    return TdoaState(
        filters=filters,
        last_sync_tx=sync.t_sync_tx,
        last_meas=last_meas,
        warm=frozenset(warm),
    )


def process_epoch(
    state: TdoaState,
    sync: SyncEpoch,
    rng: RangeEpoch,
    layout: SystemLayout,
    mode: str,
    kf_params: ClockKfParams | None = None,
    require_all: bool = True,
) -> tuple[list[TdoaMeasurement], TdoaState]:
    """Turn one (sync, range) epoch into pairwise TDoA measurements.

    Returns the measurements and the state to fold into the next epoch.
    InsufficientHistory / IncompleteEpoch are raised when no measurements
    can be produced; they carry the already-folded next state so pipelines
    can record the failure and continue.  With require_all=False an epoch
    missing some anchors degrades to the pairs of those still usable.
    """
    if mode not in ("raw", "kalman"):
        raise TdoaError(f"mode must be 'raw' or 'kalman', got {mode!r}")
    anchor_ids = layout.anchor_ids
    zetas = layout.sync_offsets()

    if mode == "raw":
        prev = state.prev_sync
        next_state = _fold_sync_raw(state, sync, anchor_ids)
        if prev is None:
            raise InsufficientHistory(
                f"epoch {sync.epoch}: raw mode needs a previous complete sync",
                state=next_state,
            )
        usable = [a for a in anchor_ids
                  if a in sync.rx and a in prev.rx and a in rng.rx]
        if len(usable) < len(anchor_ids) and require_all:
            raise IncompleteEpoch(
                f"epoch {sync.epoch}: missing sync or range stamps",
                state=next_state)
        if len(usable) < 2:
            raise IncompleteEpoch(
                f"epoch {sync.epoch}: fewer than 2 usable anchors",
                state=next_state)
        adjusted: dict[int, float] = {}
        for a in usable:
            skew = estimate_skew(prev.rx[a], sync.rx[a], prev.t_sync_tx, sync.t_sync_tx)
            adjusted[a] = adjusted_arrival(rng.rx[a], sync, skew, zetas[a], a)
        return pairwise_tdoa(adjusted, rng.epoch), next_state

    if kf_params is None:
        kf_params = ClockKfParams()
    first = state.last_sync_tx is None
    next_state = _fold_sync_kalman(state, sync, anchor_ids, kf_params)
    if first:
        raise InsufficientHistory(
            f"epoch {sync.epoch}: kalman mode needs one prior sync to warm filters",
            state=next_state,
        )
    usable = [a for a in anchor_ids if a in next_state.warm and a in rng.rx]
    if len(usable) < len(anchor_ids) and require_all:
        cold = [a for a in anchor_ids if a not in usable]
        raise IncompleteEpoch(
            f"epoch {sync.epoch}: anchors {cold} not usable (cold filter or "
            f"missing range stamp)", state=next_state)
    if len(usable) < 2:
        raise IncompleteEpoch(
            f"epoch {sync.epoch}: fewer than 2 usable anchors", state=next_state)

    filtered_sync = SyncEpoch(
        epoch=sync.epoch,
        t_sync_tx=sync.t_sync_tx,
        rx={a: next_state.filters[a].t_hat for a in usable},
    )
    adjusted = {}
    for a in usable:
        adjusted[a] = adjusted_arrival(
            rng.rx[a], filtered_sync, next_state.filters[a].m_hat, zetas[a], a)
    return pairwise_tdoa(adjusted, rng.epoch), next_state


def epochs_from_trace(
    trace: EventTrace,
    layout: SystemLayout,
    tag_id: int,
) -> tuple[dict[int, SyncEpoch], dict[int, RangeEpoch]]:
    """Group a trace's SYNC/RANGE stamps into per-epoch records, by counter."""
    sync_id = layout.sync.node_id
    anchor_ids = set(layout.anchor_ids)
    sync_tx: dict[int, float] = {}
    sync_rx: dict[int, dict[int, float]] = {}
    range_rx: dict[int, dict[int, float]] = {}
    for e in trace.events:
        seconds = ticks_to_seconds(e.device_ticks)
        if e.kind is MessageKind.SYNC and e.sender == sync_id:
            if e.is_tx:
                sync_tx[e.epoch] = seconds
            elif e.receiver in anchor_ids:
                sync_rx.setdefault(e.epoch, {})[e.receiver] = seconds
        elif e.kind is MessageKind.RANGE and e.sender == tag_id and not e.is_tx:
            if e.receiver in anchor_ids:
                range_rx.setdefault(e.epoch, {})[e.receiver] = seconds
    syncs = {
        i: SyncEpoch(epoch=i, t_sync_tx=tx, rx=sync_rx.get(i, {}))
        for i, tx in sync_tx.items()
    }
    ranges = {
        i: RangeEpoch(epoch=i, rx=rx) for i, rx in range_rx.items()
    }
    return syncs, ranges


def write_measurements_csv(measurements: list[TdoaMeasurement], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "anchor_k", "anchor_l", "dt_seconds"])
        for m in measurements:
            writer.writerow([m.epoch, m.anchor_k, m.anchor_l, repr(m.dt_s)])
