"""Simulated oscillators and clock-skew estimation.

A device clock is modeled as an affine map of true time (start offset plus a
constant rate ratio, the skew) with two optional stochastic components:

* ``random_walk_sigma`` -- the skew itself diffuses (Wiener process on the
  rate), modeling slow frequency wander.
* ``phase_walk_sigma``  -- the accumulated reading picks up a Brownian term
  (white frequency noise), modeling short-term oscillator instability.  This
  is what makes a clock a good short-interval timer but a poor long-interval
  one, and it is the component a per-epoch skew estimate cannot average away.

Skew between a node and the reference is estimated from the ratio of
received to transmitted intervals over consecutive sync broadcasts; the
fixed propagation offset cancels in the subtraction.  A 2-state linear
Kalman filter [timestamp, skew] smooths those per-epoch estimates.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import PS_PER_S, quantize_to_ticks

# Piecewise lattice on which stochastic clock components are realized.  Cells
# are regenerated chunk-by-chunk from counter-keyed seeds, so a reading at
# time t never depends on which other times were queried first.
_LATTICE_S = 0.01
_CELLS_PER_CHUNK = 4096

# Floor for the per-cell rate; keeps readings strictly increasing even under
# absurd walk parameters.
_MIN_CELL_SKEW = 0.5


class ClockError(ValueError):
    """Base class for clock-domain errors."""


class DegenerateInterval(ClockError):
    """Skew estimation over a zero or negative transmit interval."""


class NonPositiveInnovationCovariance(ClockError):
    """Kalman update with a singular innovation covariance (bad params)."""


@dataclass(frozen=True)
class ClockModel:
    """Parameters of one simulated oscillator.

    skew is the dimensionless ratio device-seconds per true-second
    (1.000000026 reads 26 ns fast per second).  Sigmas are diffusion
    strengths per sqrt(second); zero gives a perfectly affine clock.
    """

    start_offset_s: float = 0.0
    skew: float = 1.0
    random_walk_sigma: float = 0.0
    phase_walk_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.skew <= 0.0:
            raise ClockError(f"skew must be positive, got {self.skew}")
        if abs(self.skew - 1.0) > 100e-6:
            raise ClockError(f"skew {self.skew} outside +/-100 ppm sanity band")
        if self.start_offset_s < 0.0:
            raise ClockError("start offset must be >= 0 so readings stay >= 0")
        if self.random_walk_sigma < 0.0 or self.phase_walk_sigma < 0.0:
            raise ClockError("walk sigmas must be >= 0")

    @property
    def is_affine(self) -> bool:
        return self.random_walk_sigma == 0.0 and self.phase_walk_sigma == 0.0


class SimClock:
    """Deterministic realization of a ClockModel for one (model, seed) pair.

    The stochastic components live on a fixed 10 ms lattice: the skew walk is
    held constant within a cell, the phase walk is linear within a cell.
    Lattice chunks are generated lazily and cached, keyed by (seed, chunk),
    so realizations are reproducible and query-order independent.
    """

    def __init__(self, model: ClockModel, seed: int):
        self.model = model
        self.seed = int(seed)
        # Per-cell rate and cell-boundary cumulative quantities.  Index i of
        # _integral/_phase is the value at the START of cell i.
        self._rates = np.empty(0)
        self._integral = np.empty(0)
        self._phase = np.empty(0)
        self._chunks = 0

    def _extend(self, cell: int) -> None:
        while cell + 1 >= self._chunks * _CELLS_PER_CHUNK:
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence((self.seed, self._chunks)))
            )
            n = _CELLS_PER_CHUNK
            z_rate = rng.standard_normal(n)
            z_phase = rng.standard_normal(n)

            last_rate_dev = self._rates[-1] - self.model.skew if self._rates.size else 0.0
            rate_dev = last_rate_dev + np.cumsum(z_rate) * (
                self.model.random_walk_sigma * math.sqrt(_LATTICE_S)
            )
            rates = np.maximum(self.model.skew + rate_dev, _MIN_CELL_SKEW)

            last_integral = self._integral[-1] if self._integral.size else 0.0
            prev_rates_sum = np.concatenate(([0.0], np.cumsum(rates[:-1])))
            integral = last_integral + prev_rates_sum * _LATTICE_S
            # _integral[-1] is the value at the start of the previous chunk's
            # last cell; advance past that cell first.
            if self._rates.size:
                integral = integral + self._rates[-1] * _LATTICE_S

            last_phase = self._phase[-1] if self._phase.size else 0.0
            phase_steps = z_phase * (self.model.phase_walk_sigma * math.sqrt(_LATTICE_S))
            prev_phase_sum = np.concatenate(([0.0], np.cumsum(phase_steps[:-1])))
            phase = last_phase + prev_phase_sum
            if self._chunks:
                phase = phase + self._last_phase_step
            self._last_phase_step = phase_steps[-1]

            self._rates = np.concatenate((self._rates, rates))
            self._integral = np.concatenate((self._integral, integral))
            self._phase = np.concatenate((self._phase, phase))
            self._chunks += 1

    def read_exact(self, true_ps: int) -> float:
        """Continuous (unquantized) clock reading at a true time, in seconds."""
        t = true_ps / PS_PER_S
        m = self.model
        if m.is_affine:
            return m.start_offset_s + m.skew * t
        cell = int(t / _LATTICE_S)
        self._extend(cell)
        frac = t - cell * _LATTICE_S
        reading = m.start_offset_s + self._integral[cell] + self._rates[cell] * frac
        if m.phase_walk_sigma > 0.0:
            w0 = self._phase[cell]
            w1 = self._phase[cell + 1] if cell + 1 < self._phase.size else w0
            reading += w0 + (w1 - w0) * (frac / _LATTICE_S)
        return reading

    def read_ticks(self, true_ps: int) -> int:
        """Quantized device stamp (whole ticks) at a true time."""
        return quantize_to_ticks(self.read_exact(true_ps))


@functools.lru_cache(maxsize=512)
def _clock_instance(model: ClockModel, seed: int) -> SimClock:
    return SimClock(model, seed)


def read_clock(model: ClockModel, true_ps: int, rng_seed: int) -> int:
    """Device stamp (ticks) of `model` at true time `true_ps`, for a fixed seed.

    The underlying continuous reading is strictly increasing in true time;
    the returned tick count is nondecreasing (ties within one tick period).
    """
    return _clock_instance(model, rng_seed).read_ticks(true_ps)


def estimate_skew(
    t_sync_rx_prev: float,
    t_sync_rx_cur: float,
    t_sync_tx_prev: float,
    t_sync_tx_cur: float,
) -> float:
    """Per-epoch skew of a receiver clock relative to the sync clock.

    Ratio of the received interval to the transmitted interval over two
    consecutive sync broadcasts.  The receiver's fixed distance offset from
    the sync node appears in both rx stamps and cancels.
    """
    tx_interval = t_sync_tx_cur - t_sync_tx_prev
    if tx_interval <= 0.0:
        raise DegenerateInterval(
            f"sync TX interval must be positive, got {tx_interval!r} s"
        )
    return (t_sync_rx_cur - t_sync_rx_prev) / tx_interval


def _as_cov(p) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.shape != (2, 2):
        raise ClockError(f"covariance must be 2x2, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ClockKfParams:
    """Noise constants for the clock filter.

    sigma2_t_ns2 is specified in ns^2 (converted to s^2 internally) and is
    used for both the timestamp process and measurement variance; sigma2_m
    likewise for the skew channel.  p0 is the initial covariance.
    """

    sigma2_t_ns2: float = 0.4
    sigma2_m: float = 0.01
    p0: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 0.001))

    def __post_init__(self) -> None:
        if self.sigma2_t_ns2 < 0.0 or self.sigma2_m < 0.0:
            raise ClockError("variances must be >= 0")

    @property
    def sigma2_t_s2(self) -> float:
        return self.sigma2_t_ns2 * 1e-18

    def process_noise(self) -> np.ndarray:
        return np.diag([self.sigma2_t_s2, self.sigma2_m])

    def measurement_noise(self) -> np.ndarray:
        return np.diag([self.sigma2_t_s2, self.sigma2_m])

    def initial_covariance(self) -> np.ndarray:
        return _as_cov(self.p0)


@dataclass(frozen=True, eq=False)
class ClockKfState:
    """Filter state for one anchor: clock reading at last sync, and skew."""

    t_hat: float
    m_hat: float
    P: np.ndarray = field(default_factory=lambda: np.diag([1.0, 0.001]))

    def __post_init__(self) -> None:
        object.__setattr__(self, "P", _as_cov(self.P))
        if self.m_hat <= 0.0:
            raise ClockError(f"skew estimate must stay positive, got {self.m_hat}")


def kf_predict(state: ClockKfState, dt_sync: float, params: ClockKfParams) -> ClockKfState:
    """Propagate the clock state across a sync interval (sync-clock seconds)."""
    if dt_sync <= 0.0:
        raise ClockError(f"dt_sync must be positive, got {dt_sync}")
    F = np.array([[1.0, dt_sync], [0.0, 1.0]])
    t_next = state.t_hat + state.m_hat * dt_sync
    P_next = F @ state.P @ F.T + params.process_noise()
    return ClockKfState(t_next, state.m_hat, P_next)


def kf_update(
    state: ClockKfState,
    measured_t: float,
    measured_m: float,
    params: ClockKfParams,
) -> ClockKfState:
    """Fuse a measured [rx timestamp, interval-ratio skew] pair.

    Standard linear update with H = I; the Joseph-form covariance update
    keeps P symmetric positive semidefinite over long runs.
    """
    P = state.P
    R = params.measurement_noise()
    S = P + R
    # 2x2 positive definiteness check.
    if S[0, 0] <= 0.0 or np.linalg.det(S) <= 0.0:
        raise NonPositiveInnovationCovariance(
            f"innovation covariance not positive definite: {S!r}"
        )
    K = P @ np.linalg.inv(S)
    y = np.array([measured_t - state.t_hat, measured_m - state.m_hat])
    x = np.array([state.t_hat, state.m_hat]) + K @ y
    ImK = np.eye(2) - K
    P_post = ImK @ P @ ImK.T + K @ R @ K.T
    P_post = 0.5 * (P_post + P_post.T)
    return ClockKfState(float(x[0]), float(x[1]), P_post)


def kf_initial_state(t_first: float, params: ClockKfParams) -> ClockKfState:
    """State at the first sync reception: unit skew, configured initial P."""
    return ClockKfState(t_first, 1.0, params.initial_covariance())
