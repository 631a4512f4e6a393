"""
Aggregated system frequency response (SFR) model
Swing equation with a reheat governor, dynamic indices, IBR reserve
coupling and the piecewise-linear frequency-safety-margin fit.
"""
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from config import get_settings
from models.case import FrequencyParams, GovernorParams, ItdCase, RegionData
from models.errors import SimulationError

logger = logging.getLogger(__name__)

FINITE_CHECK_EVERY = 500


@dataclass(frozen=True)
class SfrParams:
    """h_total in p.u.s/Hz, d_total in p.u./Hz (governor droop excluded)"""
    h_total: float
    d_total: float
    governor: GovernorParams

    def __post_init__(self):
        if not (self.h_total > 0 and self.governor.t_r > 0 and self.governor.r_g > 0):
            raise ValueError("SFR parameters need h_total > 0, t_r > 0, r_g > 0")

    def with_ibr(self, h_ibr: float, d_ibr: float) -> "SfrParams":
        return replace(self, h_total=self.h_total + h_ibr, d_total=self.d_total + d_ibr)

    def scaled(self, factor: float) -> "SfrParams":
        """Scale H, D and 1/R together (T_R, F_H unchanged)"""
        gov = self.governor.model_copy(update={"r_g": self.governor.r_g / factor})
        return SfrParams(self.h_total * factor, self.d_total * factor, gov)


@dataclass(frozen=True)
class FrequencyTrace:
    times: np.ndarray
    delta_f: np.ndarray
    dfdt: np.ndarray


@dataclass(frozen=True)
class FrequencyIndices:
    rocof: float
    nadir: float
    qss: float


@dataclass(frozen=True)
class IbrControl:
    h: float
    d: float


class PwlMarginFit(BaseModel):
    """Planes of margin(H, D) = nadir_limit * (beta_c + beta_h*H + beta_d*D); the margin is their minimum"""
    segments: List[Tuple[float, float, float]]
    h_box: Tuple[float, float]
    d_box: Tuple[float, float]
    nadir_limit: float
    shift: float = 0.0
    conservatism_gap: float = 0.0

    def margin(self, h: float, d: float) -> float:
        return min(self.plane(m, h, d) for m in range(len(self.segments)))

    def plane(self, m: int, h: float, d: float, include_constant: bool = True) -> float:
        c, bh, bd = self.segments[m]
        return self.nadir_limit * ((c if include_constant else 0.0) + bh * h + bd * d)


def base_params(freq: FrequencyParams) -> SfrParams:
    """Thermal-only aggregate (no IBR inertia or droop)"""
    return SfrParams(h_total=freq.h_thermal, d_total=freq.damping, governor=freq.governor)


def _rhs(f, x, dp, h, d, r, fh, tr):
    y = x - (fh / r) * f
    dfdt = (y - dp - d * f) / (2.0 * h)
    dxdt = (-x - (1.0 - fh) / r * f) / tr
    return dfdt, dxdt


def _parabolic_vertex(a: np.ndarray, b: np.ndarray, c: np.ndarray, interior: np.ndarray) -> np.ndarray:
    """Vertex value of the parabola through three equally spaced samples"""
    curvature = a - 2 * b + c
    safe = interior & (np.abs(curvature) > 1e-300)
    denom = np.where(safe, curvature, 1.0)
    vertex = b - (a - c) ** 2 / (8.0 * denom)
    return np.where(safe, vertex, b)


def _integrate(
    h: np.ndarray, d: np.ndarray, r: np.ndarray, fh: np.ndarray, tr: np.ndarray,
    dp: np.ndarray, horizon: float, step: float, keep_trace: bool,
):
    """Classical RK4 over a batch of parameter sets; returns trace or extremes"""
    n_steps = int(math.ceil(horizon / step - 1e-9))
    f = np.zeros_like(dp, dtype=float)
    x = np.zeros_like(dp, dtype=float)
    extreme = np.zeros_like(dp, dtype=float)
    extreme_step = np.zeros(dp.shape, dtype=int)
    ext_a = np.zeros_like(extreme)
    ext_c = np.zeros_like(extreme)
    history = [(f.copy(), x.copy())] if keep_trace else None

    for k in range(1, n_steps + 1):
        k1f, k1x = _rhs(f, x, dp, h, d, r, fh, tr)
        k2f, k2x = _rhs(f + 0.5 * step * k1f, x + 0.5 * step * k1x, dp, h, d, r, fh, tr)
        k3f, k3x = _rhs(f + 0.5 * step * k2f, x + 0.5 * step * k2x, dp, h, d, r, fh, tr)
        k4f, k4x = _rhs(f + step * k3f, x + step * k3x, dp, h, d, r, fh, tr)
        f_prev = f
        f = f + step / 6.0 * (k1f + 2 * k2f + 2 * k3f + k4f)
        x = x + step / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        if k % FINITE_CHECK_EVERY == 0 and not (np.isfinite(f).all() and np.isfinite(x).all()):
            raise SimulationError(k)
        after = extreme_step == k - 1
        ext_c = np.where(after, f, ext_c)
        deeper = np.abs(f) > np.abs(extreme)
        ext_a = np.where(deeper, f_prev, ext_a)
        extreme = np.where(deeper, f, extreme)
        extreme_step = np.where(deeper, k, extreme_step)
        if keep_trace:
            history.append((f.copy(), x.copy()))

    if not (np.isfinite(f).all() and np.isfinite(x).all()):
        raise SimulationError(n_steps)
    if keep_trace:
        return np.array([s[0] for s in history]), np.array([s[1] for s in history])
    return _parabolic_vertex(ext_a, extreme, ext_c, extreme_step < n_steps), f


def _horizon(params_tr: float, horizon: Optional[float]) -> float:
    settings = get_settings()
    chosen = horizon if horizon is not None else max(settings.sfr_horizon, 5.0 * params_tr)
    if chosen < 5.0 * params_tr:
        raise ValueError(f"horizon {chosen}s shorter than 5*T_R = {5.0 * params_tr}s")
    return chosen


def simulate_sfr(
    params: SfrParams,
    step_disturbance: float,
    horizon: Optional[float] = None,
    step: Optional[float] = None,
) -> FrequencyTrace:
    """Step response of the closed loop; delta_f in Hz, positive disturbance = load increase"""
    gov = params.governor
    horizon = _horizon(gov.t_r, horizon)
    step = step or get_settings().sfr_step
    one = lambda v: np.array([v], dtype=float)
    states, gov_states = _integrate(
        one(params.h_total), one(params.d_total), one(gov.r_g), one(gov.f_h), one(gov.t_r),
        one(step_disturbance), horizon, step, keep_trace=True,
    )
    delta_f = states[:, 0]
    x = gov_states[:, 0]
    times = np.arange(len(delta_f)) * step
    dfdt = (x - gov.f_h / gov.r_g * delta_f - step_disturbance - params.d_total * delta_f) / (2 * params.h_total)
    return FrequencyTrace(times=times, delta_f=delta_f, dfdt=dfdt)


def indices_analytic(params: SfrParams, step_disturbance: float) -> Tuple[float, float]:
    """Closed-form (rocof, qss)"""
    rocof = -step_disturbance / (2.0 * params.h_total)
    qss = -step_disturbance / (params.d_total + 1.0 / params.governor.r_g)
    return rocof, qss


def _refine_extreme(trace: FrequencyTrace) -> float:
    """Parabolic refinement of the sampled extremum"""
    f = trace.delta_f
    k = int(np.argmax(np.abs(f)))
    if k == 0 or k == len(f) - 1:
        return float(f[k])
    vertex = _parabolic_vertex(np.array([f[k - 1]]), np.array([f[k]]), np.array([f[k + 1]]), np.array([True]))
    return float(vertex[0])


def nadir(params: SfrParams, step_disturbance: float, horizon: Optional[float] = None,
          step: Optional[float] = None) -> float:
    """Signed extremum of delta_f"""
    if step_disturbance == 0:
        return 0.0
    return _refine_extreme(simulate_sfr(params, step_disturbance, horizon, step))


def unit_nadirs(batch: Sequence[SfrParams], horizon: Optional[float] = None,
                step: Optional[float] = None) -> np.ndarray:
    """|nadir| per unit step disturbance for many parameter sets at once"""
    if not batch:
        return np.zeros(0)
    step = step or get_settings().sfr_step
    horizon = _horizon(max(p.governor.t_r for p in batch), horizon)
    col = lambda values: np.array(values, dtype=float)
    extreme, _ = _integrate(
        col([p.h_total for p in batch]), col([p.d_total for p in batch]),
        col([p.governor.r_g for p in batch]), col([p.governor.f_h for p in batch]),
        col([p.governor.t_r for p in batch]), np.ones(len(batch)),
        horizon, step, keep_trace=False,
    )
    return np.abs(extreme)


def compute_indices(params: SfrParams, step_disturbance: float) -> FrequencyIndices:
    rocof, qss = indices_analytic(params, step_disturbance)
    return FrequencyIndices(rocof=rocof, nadir=nadir(params, step_disturbance), qss=qss)


def check_indices(indices: FrequencyIndices, freq: FrequencyParams, tol: float = 1e-9) -> Dict[str, bool]:
    """Pass flag per threshold (symmetric magnitudes)"""
    return {
        "rocof": abs(indices.rocof) <= freq.rocof_max + tol,
        "nadir": abs(indices.nadir) <= freq.nadir_max + tol,
        "qss": abs(indices.qss) <= freq.qss_max + tol,
    }


def margin_true(params_base: SfrParams, h_ibr: float, d_ibr: float, nadir_limit: float) -> float:
    """Largest |step| whose nadir stays within nadir_limit (nadir is linear in the step)"""
    if nadir_limit <= 0:
        raise ValueError("nadir_limit must be positive")
    per_unit = unit_nadirs([params_base.with_ibr(h_ibr, d_ibr)])[0]
    return nadir_limit / per_unit


def margin_bisection(params_base: SfrParams, h_ibr: float, d_ibr: float, nadir_limit: float,
                     tol: float = 1e-5) -> float:
    """Same margin located by bisection over the step size"""
    params = params_base.with_ibr(h_ibr, d_ibr)
    lo, hi = 0.0, 1.0
    while abs(nadir(params, hi)) <= nadir_limit:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if abs(nadir(params, mid)) <= nadir_limit:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _lstsq_plane(points: np.ndarray, values: np.ndarray) -> Optional[np.ndarray]:
    if len(points) < 3 or np.linalg.matrix_rank(points) < 3:
        return None
    coef, *_ = np.linalg.lstsq(points, values, rcond=None)
    return coef


def _under_error(planes: np.ndarray, points: np.ndarray, values: np.ndarray) -> Tuple[float, float]:
    """(shift making min-of-planes conservative, worst gap after the shift)"""
    fitted = np.min(points @ planes.T, axis=1)
    shift = max(0.0, float(np.max(fitted - values)))
    gap = float(np.max(values - (fitted - shift)))
    return shift, gap


def _refine_planes(planes: np.ndarray, points: np.ndarray, values: np.ndarray, rounds: int = 50) -> np.ndarray:
    """k-planes alternation: assign points to their active (minimal) plane, refit each"""
    planes = planes.copy()
    assignment = None
    for _ in range(rounds):
        active = np.argmin(points @ planes.T, axis=1)
        if assignment is not None and np.array_equal(active, assignment):
            break
        assignment = active
        for m in range(len(planes)):
            coef = _lstsq_plane(points[active == m], values[active == m])
            if coef is not None:
                planes[m] = coef
    return planes


def fit_planes(points_hd: np.ndarray, values: np.ndarray, n_segments: int) -> Tuple[np.ndarray, float, float]:
    """
    Conservative min-of-planes fit over (H, D) samples
    Returns (planes as rows [c, h, d], shift, gap). The m-plane fit starts
    from the (m-1)-plane fit and is only accepted if it lowers the gap, so
    the gap is non-increasing in the number of segments.
    """
    points = np.column_stack([np.ones(len(points_hd)), points_hd])
    if np.ptp(values) <= 1e-12:
        planes = np.array([[float(np.mean(values)), 0.0, 0.0]])
        shift, gap = _under_error(planes, points, values)
        return planes, shift, gap

    planes = _lstsq_plane(points, values)[None, :]
    shift, gap = _under_error(planes, points, values)
    for _ in range(1, n_segments):
        fitted = np.min(points @ planes.T, axis=1)
        residual = np.abs(values - fitted)
        worst = residual >= np.quantile(residual, 1.0 - 1.0 / (len(planes) + 1))
        seed = _lstsq_plane(points[worst], values[worst])
        if seed is None:
            planes = np.vstack([planes, planes[-1]])
            continue
        candidate = _refine_planes(np.vstack([planes, seed]), points, values)
        c_shift, c_gap = _under_error(candidate, points, values)
        if c_gap < gap:
            planes, shift, gap = candidate, c_shift, c_gap
        else:
            planes = np.vstack([planes, planes[-1]])
    return planes, shift, gap


def fit_pwl_margin(
    params_base: SfrParams,
    h_box: Tuple[float, float],
    d_box: Tuple[float, float],
    nadir_limit: float,
    n_segments: Optional[int] = None,
    grid: Optional[int] = None,
) -> PwlMarginFit:
    """Fit the PWL margin surface over an N x N grid of IBR (H, D) totals"""
    settings = get_settings()
    n_segments = n_segments or settings.pwl_segments
    grid = grid or settings.pwl_grid
    if n_segments < 1:
        raise ValueError("need at least one segment")
    if not (h_box[1] > h_box[0] and d_box[1] > d_box[0]):
        # a zero-width box still gets a valid (constant) fit
        logger.warning(f"⚠️ degenerate PWL box H={h_box} D={d_box}")

    hs = np.linspace(h_box[0], h_box[1], grid)
    ds = np.linspace(d_box[0], d_box[1], grid)
    hh, dd = np.meshgrid(hs, ds, indexing="ij")
    points_hd = np.column_stack([hh.ravel(), dd.ravel()])
    batch = [params_base.with_ibr(h, d) for h, d in points_hd]
    margins = nadir_limit / unit_nadirs(batch)

    planes, shift, gap = fit_planes(points_hd, margins, n_segments)
    planes = planes.copy()
    planes[:, 0] -= shift
    segments = [tuple(float(c) / nadir_limit for c in plane) for plane in planes]
    logger.info(
        f"✅ PWL margin fit: {n_segments} segments on {grid}x{grid} grid, "
        f"shift {shift:.4g} p.u., worst gap {gap:.4g} p.u."
    )
    return PwlMarginFit(
        segments=segments,
        h_box=(float(h_box[0]), float(h_box[1])),
        d_box=(float(d_box[0]), float(d_box[1])),
        nadir_limit=nadir_limit,
        shift=shift,
        conservatism_gap=gap,
    )


def fit_case_margin(case: ItdCase, n_segments: Optional[int] = None, grid: Optional[int] = None) -> PwlMarginFit:
    """System-wide fit on the thermal base over the total IBR capability box"""
    freq = case.frequency
    h_cap = max(case.ibr_h_cap, 1e-6)
    d_cap = max(case.ibr_d_cap, 1e-6)
    return fit_pwl_margin(base_params(freq), (0.0, h_cap), (0.0, d_cap), freq.nadir_max, n_segments, grid)


def reserve_for_control(control: IbrControl, rocof_max: float, nadir_max: float) -> Tuple[float, float]:
    """Headroom an IBR must hold for its inertia / droop response"""
    reserve = 2.0 * control.h * rocof_max + control.d * nadir_max
    return reserve, reserve


def pfr_power_bounds(
    region: RegionData,
    controls: Dict[str, IbrControl],
    freq: FrequencyParams,
    base_points: Optional[Dict[str, float]] = None,
) -> Dict[int, float]:
    """
    Maximum PFR injection change per node. Thermal units are limited by their
    headroom p_max - P_g above the base point (p_min when no dispatch is given).
    """
    base_points = base_points or {}
    bounds: Dict[int, float] = {}
    for unit in list(region.renewables) + list(region.storage):
        control = controls.get(unit.id)
        if control is None:
            continue
        power = 2.0 * control.h * freq.rocof_max + control.d * freq.nadir_max
        bounds[unit.bus] = bounds.get(unit.bus, 0.0) + power
    for g in region.thermal:
        headroom = g.p_max - base_points.get(g.id, g.p_min)
        bounds[g.bus] = bounds.get(g.bus, 0.0) + thermal_pfr(g.droop_R, g.pfr_cap, headroom, freq)
    return bounds


def thermal_pfr(droop_R: float, pfr_cap: float, headroom: float, freq: FrequencyParams) -> float:
    return max(0.0, min(freq.nadir_max / droop_R, pfr_cap, headroom))


def aggregate_dispatch(case: ItdCase, ibr_h: float, ibr_d: float) -> SfrParams:
    """Thermal aggregate plus the dispatched IBR inertia and droop of all regions"""
    return base_params(case.frequency).with_ibr(ibr_h, ibr_d)


def export_trace_csv(trace: FrequencyTrace, path: Path) -> Path:
    frame = pd.DataFrame({"t": trace.times, "delta_f": trace.delta_f, "dfdt": trace.dfdt})
    frame.to_csv(path, index=False)
    logger.info(f"✅ Wrote frequency trace ({len(frame)} samples) to {path}")
    return Path(path)
