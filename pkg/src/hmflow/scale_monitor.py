"""Energy-scale monitoring and blowup-rate analysis.

The (outer) energy scale lambda_{eps, rho, p}(u) is the smallest lambda such
that every dyadic annulus U^r_{r/2}(p) with lambda < r < rho carries less
than eps energy; lambda == 0 means no concentration down to mesh scale.  The
search runs on a geometric r-grid of ratio 2^(1/8), fine enough to resolve
scale jumps.

On top of the scale trace this module checks the local-energy-growth bound,
fits blowup rates against the pure power law and the corotational
(T-t)/|log(T-t)|^2 law, and runs the epsilon-regularity and sup|dbar u|
observational checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import AnnulusSpec, SurfaceDomain
from .fields import MapState, compute_differential
from .flow import CorotationalState, CorotationalTrace, corotational_ball_energy, corotational_fields

R_GRID_RATIO = 2.0 ** 0.125
EPS0_ROUND_SPHERE = 4.0 * math.pi   # lowest dbar-energy of a harmonic 2-sphere


class ScaleMonitorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ball-energy accessors (shared by the scale search and its brute oracle)
# ---------------------------------------------------------------------------

def _ball_energy_map2d(u: MapState, center) -> Callable[[float], float]:
    fb = compute_differential(u)
    d = u.domain.distances_from(center).ravel()
    w = (u.domain.node_weights() * fb.energy_density).ravel()
    order = np.argsort(d, kind="stable")
    d_sorted = d[order]
    cum = np.concatenate([[0.0], np.cumsum(w[order])])

    def E_ball(r: float) -> float:
        return float(cum[np.searchsorted(d_sorted, r, side="right")])

    return E_ball


def ball_energy_function(state, center=(0.0, 0.0)) -> Callable[[float], float]:
    """E(B_r(center)) as a function of r, indicator-weighted node quadrature
    for 2D states, trapezoid radial quadrature for corotational profiles."""
    if isinstance(state, CorotationalState):
        if abs(center[0]) > 1e-14 or abs(center[1]) > 1e-14:
            raise ScaleMonitorError("corotational scale analysis is centered at the origin")
        return corotational_ball_energy(state)
    return _ball_energy_map2d(state, center)


def mesh_floor_of(state) -> float:
    if isinstance(state, CorotationalState):
        return 2.0 * state.dr
    return 2.0 * state.domain.min_length_scale


def scale_r_grid(rho: float, floor: float) -> np.ndarray:
    """Geometric radii rho, rho/ratio, ... down to the mesh floor."""
    n = max(int(math.floor(math.log(rho / floor) / math.log(R_GRID_RATIO))) + 1, 1)
    return rho / R_GRID_RATIO ** np.arange(n)


def annulus_energies(state, rho: float, center=(0.0, 0.0),
                     floor: Optional[float] = None):
    """(radii, E(U^r_{r/2})) on the geometric r-grid."""
    floor = floor or mesh_floor_of(state)
    E_ball = ball_energy_function(state, center)
    radii = scale_r_grid(rho, floor)
    energies = np.array([E_ball(r) - E_ball(r / 2.0) for r in radii])
    return radii, energies


def energy_scale(state, eps: float, rho: float, center=(0.0, 0.0),
                 floor: Optional[float] = None) -> float:
    """Outer energy scale lambda_{eps, rho, center} on the geometric r-grid.

    Returns the largest grid radius whose dyadic annulus still holds >= eps
    energy (so every annulus above it passes), or 0.0 if all annuli pass
    down to the mesh floor.
    """
    if eps <= 0.0:
        raise ScaleMonitorError("eps must be positive")
    if isinstance(state, MapState) and rho > state.domain.domain_radius_bound():
        raise ScaleMonitorError("rho exceeds the domain radius bound")
    if isinstance(state, CorotationalState) and rho > state.r[-1]:
        raise ScaleMonitorError("rho exceeds the profile radius")
    radii, energies = annulus_energies(state, rho, center, floor)
    bad = energies >= eps
    return float(radii[bad].max()) if bad.any() else 0.0


def energy_scale_brute(state, eps: float, rho: float, center=(0.0, 0.0),
                       floor: Optional[float] = None) -> float:
    """Independent oracle: explicit masked sums over every annulus of the
    same r-grid (no cumulative shortcut)."""
    floor = floor or mesh_floor_of(state)
    radii = scale_r_grid(rho, floor)
    if isinstance(state, CorotationalState):
        _, e, _, _, _ = corotational_fields(state)
        integrand = 2.0 * math.pi * e * state.r

        def annulus(r):
            lo, hi = r / 2.0, r
            rr = state.r
            # trapezoid of the cumulative integrand between lo and hi
            cum = np.concatenate([[0.0], np.cumsum(
                0.5 * (integrand[1:] + integrand[:-1]) * np.diff(rr))])
            return float(np.interp(hi, rr, cum) - np.interp(lo, rr, cum))
    else:
        fb = compute_differential(state)
        dist = state.domain.distances_from(center)
        w = state.domain.node_weights() * fb.energy_density

        def annulus(r):
            mask = (dist > r / 2.0) & (dist <= r)
            return float(w[mask].sum())

    lam = 0.0
    for r in radii:
        if annulus(r) >= eps and r > lam:
            lam = r
    return lam


# ---------------------------------------------------------------------------
# scale traces
# ---------------------------------------------------------------------------

@dataclass
class ScaleTrace:
    times: List[float]
    lambdas: List[float]
    stress_Lq: List[float]
    sup_dbar: List[float]
    eps: float
    rho: float
    center: tuple
    mesh_floor: float

    CSV_COLUMNS = "t,lambda,stress_Lq,sup_dbar"

    def __post_init__(self):
        t = np.asarray(self.times)
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ScaleMonitorError("trace times must be strictly increasing")
        lam = np.asarray(self.lambdas)
        if lam.size and (lam.min() < 0 or lam.max() > self.rho + 1e-12):
            raise ScaleMonitorError("lambda values must lie in [0, rho]")

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(
                "# energy-scale trace: t, lambda_{eps,rho,p}, "
                f"stress L^q, sup|dbar u|; eps={self.eps!r}, rho={self.rho!r}\n"
            )
            fh.write(self.CSV_COLUMNS + "\n")
            for row in zip(self.times, self.lambdas, self.stress_Lq, self.sup_dbar):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def scale_trace_from_corotational(trace: CorotationalTrace,
                                  template: CorotationalState,
                                  eps: float, rho: float) -> ScaleTrace:
    lambdas = []
    for i in range(len(trace.times)):
        s = trace.state_at(i, template)
        lambdas.append(energy_scale(s, eps, rho))
    return ScaleTrace(
        times=list(trace.times),
        lambdas=lambdas,
        stress_Lq=[r.stress_Lq for r in trace.reports],
        sup_dbar=[r.sup_dbar for r in trace.reports],
        eps=eps, rho=rho, center=(0.0, 0.0), mesh_floor=2.0 * template.dr,
    )


def scale_trace_from_snapshots(snapshots: Sequence[MapState], reports,
                               eps: float, rho: float, center) -> ScaleTrace:
    lambdas = [energy_scale(u, eps, rho, center) for u in snapshots]
    return ScaleTrace(
        times=[u.time for u in snapshots],
        lambdas=lambdas,
        stress_Lq=[r.stress_Lq for r in reports],
        sup_dbar=[r.sup_dbar for r in reports],
        eps=eps, rho=rho, center=tuple(center),
        mesh_floor=mesh_floor_of(snapshots[0]),
    )


# ---------------------------------------------------------------------------
# blowup-rate fitting
# ---------------------------------------------------------------------------

@dataclass
class RateFit:
    inconclusive: bool
    reason: str = ""
    n_points: int = 0
    T_used: float = float("nan")
    exponent: float = float("nan")
    exponent_stderr: float = float("nan")
    intercept: float = float("nan")           # log-amplitude of the power fit
    residual_power: float = float("nan")      # rms of the free power-law fit
    residual_cdy: float = float("nan")        # rms, (T-t)/|log(T-t)|^2 shape
    residual_sqrt: float = float("nan")       # rms, (T-t)^{1/2} shape
    kappa_cdy: float = float("nan")
    t_window: Tuple[float, float] = (float("nan"), float("nan"))
    lambda_window: Tuple[float, float] = (float("nan"), float("nan"))
    exponent_T_sensitivity: float = float("nan")

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)


def _power_fit(logx, logy):
    A = np.vstack([logx, np.ones_like(logx)]).T
    coef, res, _, _ = np.linalg.lstsq(A, logy, rcond=None)
    n = len(logx)
    pred = A @ coef
    rms = float(np.sqrt(np.mean((logy - pred) ** 2)))
    if n > 2:
        sxx = np.sum((logx - logx.mean()) ** 2)
        stderr = math.sqrt(max(np.sum((logy - pred) ** 2), 0.0) / (n - 2) / sxx)
    else:
        stderr = float("nan")
    return float(coef[0]), float(coef[1]), stderr, rms


def fit_blowup_rate(trace: ScaleTrace, T: float, min_points: int = 20,
                    floor: Optional[float] = None,
                    lambda_cap: Optional[float] = None) -> RateFit:
    """Least-squares rate fits over the resolved window lambda > mesh floor.

    Fits (a) a free power law lambda ~ (T-t)^s, (b) the corotational law
    kappa (T-t)/|log(T-t)|^2, (c) the type-II benchmark kappa (T-t)^{1/2},
    and reports rms log-residuals of each.  ``lambda_cap`` restricts the fit
    to the asymptotic regime lambda <= cap, excluding the initial transient.
    """
    floor = floor if floor is not None else trace.mesh_floor
    t = np.asarray(trace.times, dtype=float)
    lam = np.asarray(trace.lambdas, dtype=float)
    mask = (lam > floor) & (t < T) & (T - t > 1e-300)
    if lambda_cap is not None:
        mask &= lam <= lambda_cap
    if mask.sum() < min_points:
        return RateFit(
            inconclusive=True, n_points=int(mask.sum()), T_used=T,
            reason=f"only {int(mask.sum())} resolved trace points "
                   f"(need >= {min_points})",
        )
    tt, ll = t[mask], lam[mask]
    logu = np.log(T - tt)
    logl = np.log(ll)

    slope, intercept, stderr, rms_power = _power_fit(logu, logl)

    # fixed-shape models: only the amplitude is fitted
    shape_cdy = logu - 2.0 * np.log(np.abs(np.log(T - tt)))
    kappa_cdy = float(np.exp(np.mean(logl - shape_cdy)))
    rms_cdy = float(np.sqrt(np.mean((logl - shape_cdy - math.log(kappa_cdy)) ** 2)))
    shape_sqrt = 0.5 * logu
    amp_sqrt = float(np.mean(logl - shape_sqrt))
    rms_sqrt = float(np.sqrt(np.mean((logl - shape_sqrt - amp_sqrt) ** 2)))

    # sensitivity of the exponent to the estimated blowup time
    dT = 0.5 * (T - tt.max())
    sens = 0.0
    for Tp in (T - dT, T + dT):
        if Tp > tt.max():
            s2, _, _, _ = _power_fit(np.log(Tp - tt), logl)
            sens = max(sens, abs(s2 - slope))

    return RateFit(
        inconclusive=False,
        n_points=int(mask.sum()),
        T_used=T,
        exponent=slope,
        intercept=intercept,
        exponent_stderr=stderr,
        residual_power=rms_power,
        residual_cdy=rms_cdy,
        residual_sqrt=rms_sqrt,
        kappa_cdy=kappa_cdy,
        t_window=(float(tt.min()), float(tt.max())),
        lambda_window=(float(ll.min()), float(ll.max())),
        exponent_T_sensitivity=float(sens),
    )


def estimate_blowup_time(t_coarse: float, t_fine: float, order: float = 1.0) -> float:
    """Richardson extrapolation of the detected singular time across two
    resolutions (the fine grid halves the spacing)."""
    return t_fine + (t_fine - t_coarse) / (2.0**order - 1.0)


# ---------------------------------------------------------------------------
# local energy growth (stress-energy controlled)
# ---------------------------------------------------------------------------

@dataclass
class GrowthCheck:
    constant: float          # smallest C making every sampled pair pass
    sigma: float
    R: float
    q: float
    n_pairs: int
    worst_pair: Tuple[float, float]


def check_local_energy_growth(states: Sequence, R: float, center, q: float,
                              sigma: float, max_pairs: int = 400) -> GrowthCheck:
    """Fit the smallest C with E(t2, B_{R/2}) <= E(t1, B_R) + C sigma (t2-t1)
    R^{-2/q} over sampled time pairs t1 <= t2."""
    if sigma <= 0:
        raise ScaleMonitorError("sigma must be positive")
    Eb = [ball_energy_function(s, center) for s in states]
    times = [s.time for s in states]
    E_half = [f(R / 2.0) for f in Eb]
    E_full = [f(R) for f in Eb]
    n = len(states)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if len(pairs) > max_pairs:
        idx = np.linspace(0, len(pairs) - 1, max_pairs).astype(int)
        pairs = [pairs[i] for i in idx]
    C = 0.0
    worst = (times[0], times[-1])
    for i, j in pairs:
        dt = times[j] - times[i]
        if dt <= 0:
            continue
        need = (E_half[j] - E_full[i]) * R ** (2.0 / q) / (sigma * dt)
        if need > C:
            C = need
            worst = (times[i], times[j])
    return GrowthCheck(constant=float(max(C, 0.0)), sigma=sigma, R=R, q=q,
                       n_pairs=len(pairs), worst_pair=worst)


# ---------------------------------------------------------------------------
# epsilon-regularity and dbar-bound observational checks
# ---------------------------------------------------------------------------

def _sup_du_in_ball(state, center, radius) -> float:
    if isinstance(state, CorotationalState):
        _, e, _, _, _ = corotational_fields(state)
        mask = state.r <= radius
        return float(np.sqrt(2.0 * e[mask].max()))
    fb = compute_differential(state)
    mask = state.domain.distances_from(center) <= radius
    return float(np.sqrt(fb.du_norm_sq[mask].max()))


@dataclass
class RegularityCheck:
    center: tuple
    R: float
    tau: float
    eps_used: float
    sup_r_du: float
    constant: float          # sup(R |du|) / sqrt(eps)
    hypothesis_holds: bool


def check_epsilon_regularity(states: Sequence, centers, radii,
                             eps0: float = EPS0_ROUND_SPHERE,
                             tau_index: int = 0) -> List[RegularityCheck]:
    """Wherever the local smallness hypothesis
    E(u(tau), B_R) + sup_t E(u(t), U^R_{R/2}) <= eps < eps0 holds, record
    sup_{B_{R/2} x [tau + R^2/2, T)} R |du| / sqrt(eps)."""
    out = []
    times = [s.time for s in states]
    tau = times[tau_index]
    for center in centers:
        Ebs = [ball_energy_function(s, center) for s in states]
        for R in radii:
            eps = Ebs[tau_index](R) + max(
                Eb(R) - Eb(R / 2.0) for Eb in Ebs[tau_index:]
            )
            holds = eps < eps0
            if not holds:
                out.append(RegularityCheck(tuple(center), R, tau, eps,
                                           float("nan"), float("nan"), False))
                continue
            t_from = tau + R * R / 2.0
            sup_du = 0.0
            for s in states:
                if s.time >= t_from:
                    sup_du = max(sup_du, _sup_du_in_ball(s, center, R / 2.0))
            sup_r_du = R * sup_du
            const = sup_r_du / math.sqrt(eps) if eps > 0.0 else 0.0
            out.append(RegularityCheck(
                tuple(center), R, tau, eps, sup_r_du, const, True,
            ))
    return out


@dataclass
class DbarBoundCheck:
    applicable: bool
    delta: float
    tau: float
    constant: float          # observed sup|dbar u| / (delta (1/sqrt(tau) + 1))
    stress_L2_max: float
    reason: str = ""


def check_dbar_sup_bound(reports, tau: float,
                         eps0: float = EPS0_ROUND_SPHERE) -> DbarBoundCheck:
    """Observed constant in sup_{t >= tau} |dbar u| <= C delta (1/sqrt(tau)+1)
    with delta^2 = E_dbar(u(0)), gated on delta^2 < eps0.  Also reports the
    max stress L^q norm along the trace (uniform L^2 bound check)."""
    delta_sq = reports[0].E_dbar
    stress_max = max(r.stress_Lq for r in reports)
    if delta_sq >= eps0:
        return DbarBoundCheck(False, math.sqrt(delta_sq), tau, float("nan"),
                              stress_max, "E_dbar(u(0)) >= eps0; check skipped")
    delta = math.sqrt(delta_sq)
    late = [r for r in reports if r.t >= tau]
    if not late:
        return DbarBoundCheck(False, delta, tau, float("nan"), stress_max,
                              "no reports at or after tau")
    sup_dbar = max(r.sup_dbar for r in late)
    denom = delta * (1.0 / math.sqrt(tau) + 1.0)
    if denom < 1e-14:
        # holomorphic data: sup|dbar u| should sit at the mesh-error floor
        return DbarBoundCheck(True, delta, tau, 0.0, stress_max,
                              "delta = 0; sup|dbar u| at discretization floor")
    return DbarBoundCheck(True, delta, tau, sup_dbar / denom, stress_max)
