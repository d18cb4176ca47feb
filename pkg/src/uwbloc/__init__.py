"""Desk-scale UWB localization toolkit.

Simulates networks of UWB radios with drifting clocks, implements two-way
ranging and forward time-difference-of-arrival localization (with sync-node
clock synchronization and Kalman clock interpolation), and solves for
positions with closed-form and iterative methods.  The `uwbloc` CLI drives
end-to-end experiments from declarative JSON configs.
"""

from .clock import (
    ClockKfParams,
    ClockKfState,
    ClockModel,
    SimClock,
    estimate_skew,
    kf_predict,
    kf_update,
    read_clock,
)
from .config import ExperimentConfig, Trajectory, config_from_dict, load_config
from .core import (
    Node,
    NodeRole,
    Position,
    Rect,
    SPEED_OF_LIGHT,
    SystemLayout,
    distance,
    propagation_delay,
)
from .harness import drift_series, localize_trace, run_sweep
from .netsim import (
    ChannelModel,
    EventTrace,
    MessageKind,
    NearAnchorBias,
    broadcast,
    enforce_reply_delay,
    run_scenario,
)
from .report import AccuracyReport, EpochFix, build_report
from .solver import (
    SolveRequest,
    SolveResult,
    residuals_and_jacobian,
    solve_tdoa,
    solve_twr,
    trilaterate_closed_form,
)
from .tdoa import (
    RangeEpoch,
    SyncEpoch,
    TdoaMeasurement,
    adjusted_arrival,
    pairwise_tdoa,
    process_epoch,
)
from .twr import (
    CalibrationModel,
    RangeMeasurement,
    TwrExchange,
    apply_calibration,
    calibrate,
    message_budget,
    sds_tof,
    single_sided_tof,
)

__version__ = "0.1.0"
