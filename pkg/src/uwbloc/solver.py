"""Position estimation from range or arrival-time-difference measurements.

Three families:

* closed form -- differencing the circle equations of three anchors gives a
  2x2 linear system; exact when the ranges are consistent, but fixed to
  exactly three anchors and brittle under noise.
* iterative range solving -- minimize sum_k (r_k^2 - |p - p_k|^2)^2 inside
  the room bounds, behind one interface with three backends (Powell-style
  derivative-free search, BFGS quasi-Newton, and bounded trust-region least
  squares) so their accuracy/runtime can be compared like for like.
* hyperbolic multilateration -- minimize
  sum_pairs (c * dt_kl - (|p - p_k| - |p - p_l|))^2, the intersection of
  hyperbolas, via trust-region least squares.  dt(k, l) > 0 means the tag
  is farther from anchor k.

Two-anchor range solving is supported with bounds and an optional prior;
the mirror solution across the anchor baseline is found explicitly, and the
result is flagged ambiguous when nothing disambiguates the branches.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares, minimize

from .core import SPEED_OF_LIGHT, Position, Rect
from .tdoa import TdoaMeasurement
from .twr import RangeMeasurement

ITERATION_CAP = 200
STEP_TOL = 1e-10          # m
RESIDUAL_TOL = 1e-12      # m^2
GRAD_TOL = 1e-12
INCONSISTENT_RANGES_TOL = 1e-6  # m, closed-form residual flag threshold
_AMBIGUITY_COST_RTOL = 1e-3
_ANCHOR_SINGULARITY_EPS = 1e-9


class SolverError(ValueError):
    """Base class for solver-domain errors."""


class CollinearAnchors(SolverError):
    """Closed-form trilateration with (near-)collinear anchors."""


class DegenerateGeometry(SolverError):
    """Geometry that cannot resolve a 2-D position (e.g. collinear TDoA)."""


class SingularPoint(SolverError):
    """Residual Jacobian requested exactly at an anchor position."""


@dataclass(frozen=True)
class SolveRequest:
    """Inputs to one position solve.

    anchors maps node id to surveyed position; measurements are either all
    RangeMeasurement or all TdoaMeasurement.  prior warm-starts the solve
    and selects branches in ambiguous two-anchor geometry; bounds constrain
    the estimate to the room.
    """

    anchors: dict[int, Position]
    measurements: tuple
    prior: Position | None = None
    bounds: Rect | None = None

    def measurement_kind(self) -> str:
        if not self.measurements:
            raise SolverError("no measurements")
        first = self.measurements[0]
        if isinstance(first, RangeMeasurement):
            return "range"
        if isinstance(first, TdoaMeasurement):
            return "tdoa"
        raise SolverError(f"unsupported measurement type {type(first).__name__}")


@dataclass(frozen=True)
class SolveResult:
    position: Position
    residual_norm: float
    iterations: int
    wall_time_s: float
    converged: bool
    cost: float
    method: str
    ambiguous: bool = False
    inconsistent: bool = False


def trilaterate_closed_form(anchors, ranges) -> Position:
    """Intersect three circles by differencing their equations.

    Exact for consistent ranges.  Raises CollinearAnchors when the three
    anchor positions do not span the plane.
    """
    if len(anchors) != 3 or len(ranges) != 3:
        raise SolverError("closed form needs exactly 3 anchors and 3 ranges")
    p0, p1, p2 = anchors
    A = np.array([
        [2.0 * (p1.x - p0.x), 2.0 * (p1.y - p0.y)],
        [2.0 * (p2.x - p0.x), 2.0 * (p2.y - p0.y)],
    ])
    scale = max(abs(A).max(), 1e-30)
    if abs(np.linalg.det(A)) < 1e-9 * scale * scale:
        raise CollinearAnchors(f"anchors {[p.as_tuple() for p in anchors]} are collinear")
    sq = [p.x * p.x + p.y * p.y for p in (p0, p1, p2)]
    b = np.array([
        ranges[0] ** 2 - ranges[1] ** 2 - sq[0] + sq[1],
        ranges[0] ** 2 - ranges[2] ** 2 - sq[0] + sq[2],
    ])
    xy = np.linalg.solve(A, b)
    return Position(float(xy[0]), float(xy[1]))


def _anchor_array(request: SolveRequest, ids) -> np.ndarray:
    out = []
    for a in ids:
        if a not in request.anchors:
            raise SolverError(f"measurement references unknown anchor {a}")
        out.append(request.anchors[a].as_tuple())
    return np.asarray(out)


def residuals_and_jacobian(request: SolveRequest, p: Position) -> tuple[np.ndarray, np.ndarray]:
    """Analytic residual vector and 2-column Jacobian for the active cost.

    Range rows:  r_k^2 - |p - p_k|^2, gradient -2 (p - p_k).
    TDoA rows:   c dt_kl - (|p - p_k| - |p - p_l|), gradient -(u_k - u_l)
    with u the unit vectors from the anchors to p; raises SingularPoint when
    p coincides with an involved anchor.
    """
    kind = request.measurement_kind()
    pt = np.array([p.x, p.y])
    if kind == "range":
        anchors = _anchor_array(request, (m.anchor for m in request.measurements))
        ranges = np.array([m.range_m for m in request.measurements])
        diff = pt - anchors
        res = ranges ** 2 - np.sum(diff * diff, axis=1)
        jac = -2.0 * diff
        return res, jac

    ids_k = [m.anchor_k for m in request.measurements]
    ids_l = [m.anchor_l for m in request.measurements]
    pk = _anchor_array(request, ids_k)
    pl = _anchor_array(request, ids_l)
    dts = np.array([m.dt_s for m in request.measurements])
    dk = pt - pk
    dl = pt - pl
    nk = np.linalg.norm(dk, axis=1)
    nl = np.linalg.norm(dl, axis=1)
    if np.any(nk < _ANCHOR_SINGULARITY_EPS) or np.any(nl < _ANCHOR_SINGULARITY_EPS):
        raise SingularPoint(f"point ({p.x}, {p.y}) coincides with an anchor")
    res = SPEED_OF_LIGHT * dts - (nk - nl)
    jac = -(dk / nk[:, None] - dl / nl[:, None])
    return res, jac


def _cost_at(request: SolveRequest, xy: np.ndarray) -> float:
    res, _ = residuals_and_jacobian(request, Position(float(xy[0]), float(xy[1])))
    return float(np.dot(res, res))


def gradient_norm(request: SolveRequest, p: Position) -> float:
    res, jac = residuals_and_jacobian(request, p)
    return float(np.linalg.norm(2.0 * jac.T @ res))


def _nudge_off_anchors(request: SolveRequest, xy: np.ndarray) -> np.ndarray:
    for pos in request.anchors.values():
        if math.hypot(xy[0] - pos.x, xy[1] - pos.y) < _ANCHOR_SINGULARITY_EPS:
            return xy + np.array([1e-6, 1e-6])
    return xy


def _initial_point(request: SolveRequest) -> np.ndarray:
    if request.prior is not None:
        x0 = np.array([request.prior.x, request.prior.y])
    else:
        pts = np.array([p.as_tuple() for p in request.anchors.values()])
        x0 = pts.mean(axis=0)
    if request.bounds is not None:
        b = request.bounds
        margin_x = 1e-6 * (b.x_max - b.x_min)
        margin_y = 1e-6 * (b.y_max - b.y_min)
        x0 = np.array([
            min(max(x0[0], b.x_min + margin_x), b.x_max - margin_x),
            min(max(x0[1], b.y_min + margin_y), b.y_max - margin_y),
        ])
    return _nudge_off_anchors(request, x0)


def _in_bounds(request: SolveRequest, xy: np.ndarray) -> bool:
    if request.bounds is None:
        return True
    return request.bounds.contains(Position(float(xy[0]), float(xy[1])))


def _minimize_from(request: SolveRequest, x0: np.ndarray, method: str):
    """One optimizer run; returns (xy, iterations, optimizer_success)."""
    if method == "least_squares":
        def fun(xy):
            res, _ = residuals_and_jacobian(request, Position(xy[0], xy[1]))
            return res

        def jac(xy):
            _, J = residuals_and_jacobian(request, Position(xy[0], xy[1]))
            return J

        if request.bounds is not None:
            b = request.bounds
            ls_bounds = ([b.x_min, b.y_min], [b.x_max, b.y_max])
        else:
            ls_bounds = (-np.inf, np.inf)
        fit = least_squares(
            fun, x0, jac=jac, bounds=ls_bounds, method="trf",
            xtol=STEP_TOL, ftol=RESIDUAL_TOL, gtol=GRAD_TOL,
            max_nfev=ITERATION_CAP,
        )
        return fit.x, int(fit.nfev), bool(fit.success)

    if method == "derivative_free":
        scipy_bounds = None
        if request.bounds is not None:
            b = request.bounds
            scipy_bounds = [(b.x_min, b.x_max), (b.y_min, b.y_max)]
        fit = minimize(
            lambda xy: _cost_at(request, xy), x0, method="Powell",
            bounds=scipy_bounds,
            options={"maxiter": ITERATION_CAP, "xtol": STEP_TOL, "ftol": RESIDUAL_TOL},
        )
        return fit.x, int(fit.nit), bool(fit.success)

    if method == "quasi_newton":
        def grad(xy):
            res, J = residuals_and_jacobian(request, Position(xy[0], xy[1]))
            return 2.0 * (J.T @ res)

        # Line-search BFGS has no bound support; bounds are checked after.
        fit = minimize(
            lambda xy: _cost_at(request, xy), x0, method="BFGS", jac=grad,
            options={"maxiter": ITERATION_CAP, "gtol": 1e-10},
        )
        return fit.x, int(fit.nit), bool(fit.success)

    raise SolverError(f"unknown method {method!r}")


def _mirror_across_baseline(xy: np.ndarray, a: Position, b: Position) -> np.ndarray:
    """Reflect a point across the line through two anchors."""
    base = np.array([a.x, a.y])
    axis = np.array([b.x - a.x, b.y - a.y])
    norm2 = float(axis @ axis)
    if norm2 == 0.0:
        return xy.copy()
    v = xy - base
    proj = (v @ axis) / norm2 * axis
    return base + 2.0 * proj - v


def _result(request: SolveRequest, xy: np.ndarray, iterations: int,
            success: bool, method: str, t0: float,
            ambiguous: bool = False) -> SolveResult:
    p = Position(float(xy[0]), float(xy[1]))
    res, _ = residuals_and_jacobian(request, p)
    cost = float(np.dot(res, res))
    kind = request.measurement_kind()
    if kind == "range":
        # Meters-scale residual: per-anchor range mismatch.
        anchors = _anchor_array(request, (m.anchor for m in request.measurements))
        ranges = np.array([m.range_m for m in request.measurements])
        dists = np.linalg.norm(np.array([p.x, p.y]) - anchors, axis=1)
        resid_m = float(np.sqrt(np.mean((ranges - dists) ** 2)))
    else:
        resid_m = float(np.sqrt(np.mean(res ** 2)))
    converged = success and _in_bounds(request, xy) and not ambiguous
    return SolveResult(
        position=p,
        residual_norm=resid_m,
        iterations=iterations,
        wall_time_s=time.perf_counter() - t0,
        converged=converged,
        cost=cost,
        method=method,
        ambiguous=ambiguous,
    )


def solve_twr(request: SolveRequest, method: str = "least_squares") -> SolveResult:
    """Estimate a position from per-anchor ranges.

    method is one of closed_form, derivative_free, quasi_newton,
    least_squares.  Two-anchor requests need bounds; the mirror branch
    across the anchor baseline is explored, the prior (when given) picks
    the branch, and otherwise comparable in-bounds minima mark the result
    ambiguous with converged=False.  Hitting the iteration cap reports
    converged=False rather than raising.
    """
    t0 = time.perf_counter()
    if request.measurement_kind() != "range":
        raise SolverError("solve_twr needs RangeMeasurement inputs")
    n = len(request.measurements)
    if n < 2:
        raise SolverError("range solving needs at least 2 measurements")

    if method == "closed_form":
        if n != 3:
            raise SolverError("closed form needs exactly 3 range measurements")
        anchors = [request.anchors[m.anchor] for m in request.measurements]
        ranges = [m.range_m for m in request.measurements]
        p = trilaterate_closed_form(anchors, ranges)
        xy = np.array([p.x, p.y])
        result = _result(request, xy, 0, True, method, t0)
        if result.residual_norm > INCONSISTENT_RANGES_TOL:
            result = dataclasses.replace(result, inconsistent=True)
        return result

    if n == 2:
        if request.bounds is None:
            raise SolverError("2-anchor range solving needs bounds")
        return _solve_two_anchor(request, method, t0)

    x0 = _initial_point(request)
    xy, iterations, success = _minimize_from(request, x0, method)
    return _result(request, xy, iterations, success, method, t0)


def _solve_two_anchor(request: SolveRequest, method: str, t0: float) -> SolveResult:
    x0 = _initial_point(request)
    xy1, it1, ok1 = _minimize_from(request, x0, method)
    a = request.anchors[request.measurements[0].anchor]
    b = request.anchors[request.measurements[1].anchor]
    mirror_start = _nudge_off_anchors(request, _mirror_across_baseline(xy1, a, b))
    xy2, it2, ok2 = _minimize_from(request, mirror_start, method)

    candidates = []
    for xy, it, ok in ((xy1, it1, ok1), (xy2, it1 + it2, ok2)):
        if _in_bounds(request, xy):
            candidates.append((xy, it, ok, _cost_at(request, xy)))
    if not candidates:
        return _result(request, xy1, it1 + it2, False, method, t0)
    if len(candidates) == 2:
        (xa, ia, oka, ca), (xb, ib, okb, cb) = candidates
        distinct = np.linalg.norm(xa - xb) > 10.0 * STEP_TOL
        if distinct and request.prior is not None:
            prior = np.array([request.prior.x, request.prior.y])
            pick = candidates[0] if (np.linalg.norm(xa - prior)
                                     <= np.linalg.norm(xb - prior)) else candidates[1]
            return _result(request, pick[0], it1 + it2, pick[2], method, t0)
        if distinct:
            comparable = abs(ca - cb) <= _AMBIGUITY_COST_RTOL * (1.0 + max(ca, cb))
            best = candidates[0] if ca <= cb else candidates[1]
            return _result(request, best[0], it1 + it2, best[2], method, t0,
                           ambiguous=comparable)
    best = min(candidates, key=lambda c: c[3])
    return _result(request, best[0], best[1], best[2], method, t0)


def solve_tdoa(request: SolveRequest) -> SolveResult:
    """Estimate a position from pairwise arrival-time differences.

    Needs at least two independent pairs over three or more non-collinear
    anchors; solved as bounded trust-region nonlinear least squares on the
    hyperbola residuals.
    """
    t0 = time.perf_counter()
    if request.measurement_kind() != "tdoa":
        raise SolverError("solve_tdoa needs TdoaMeasurement inputs")
    if len(request.measurements) < 2:
        raise SolverError("TDoA solving needs at least 2 pair measurements")
    involved = {m.anchor_k for m in request.measurements}
    involved |= {m.anchor_l for m in request.measurements}
    if len(involved) < 3:
        raise SolverError("TDoA pairs must span at least 3 distinct anchors")
    pts = [request.anchors[a] for a in sorted(involved)]
    xs = np.array([p.as_tuple() for p in pts])
    spans = xs - xs[0]
    cross = spans[1:, 0, None] * spans[None, 1:, 1] - spans[1:, 1, None] * spans[None, 1:, 0]
    if np.all(np.abs(cross) < 1e-9):
        raise DegenerateGeometry("TDoA anchors are collinear; branch is unresolvable")
    x0 = _initial_point(request)
    xy, iterations, success = _minimize_from(request, x0, "least_squares")
    return _result(request, xy, iterations, success, "least_squares", t0)
