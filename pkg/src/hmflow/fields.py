"""Discrete differential calculus on map states.

Everything here is pointwise algebra on the frame components of du.  With
(E1, E2) the oriented orthonormal frame of the conformally flat domain metric
and D_i = du(E_i) the (tangent-projected) frame derivatives, the target
complex structure J splits du into

    b = (D1 + J D2) / 2      anti-holomorphic part, e_dbar = |b|^2
    a = (D1 - J D2) / 2      holomorphic part,      e_del  = |a|^2

so e_del + e_dbar = |du|^2 / 2 holds as an algebraic identity.  For the round
sphere J v = v x u, oriented so the stereographic chart map w(z) = z is
holomorphic.

The stress-energy tensor is stored through its frame components
s11 = (|D1|^2 - |D2|^2)/2 and s12 = <D1, D2> (trace-free by construction),
with norm |S| = sqrt(2 (s11^2 + s12^2)).  The Hopf differential coefficient
phi satisfies s11 = 2 Re phi, s12 = -2 Im phi; an independent chart-based
evaluation of phi is kept for cross-validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    AnnulusSpec,
    BoundaryKind,
    DomainKind,
    RoundSphere,
    SurfaceDomain,
    WarpedSphere,
    annulus_weights,
)


class FieldsError(ValueError):
    pass


class ChartPoleError(FieldsError):
    """Chart formulation hit a warp pole; use the embedded formulation."""


# ---------------------------------------------------------------------------
# grid derivative stencils
# ---------------------------------------------------------------------------

def _roll_diff(f, h, axis):
    return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * h)


def _roll_second(f, h, axis):
    return (np.roll(f, -1, axis=axis) - 2.0 * f + np.roll(f, 1, axis=axis)) / (h * h)


def _onesided_second(f, h, axis):
    """Centered second derivative with second-order one-sided ends."""
    out = np.empty_like(f)
    fm = np.moveaxis(f, axis, 0)
    om = np.moveaxis(out, axis, 0)
    om[1:-1] = (fm[2:] - 2.0 * fm[1:-1] + fm[:-2]) / (h * h)
    om[0] = (2.0 * fm[0] - 5.0 * fm[1] + 4.0 * fm[2] - fm[3]) / (h * h)
    om[-1] = (2.0 * fm[-1] - 5.0 * fm[-2] + 4.0 * fm[-3] - fm[-4]) / (h * h)
    return out


def _onesided_second_weights(x0, pts):
    """Weights w with sum w_i f(x_i) = f''(x0), exact for cubics."""
    d = np.asarray(pts, dtype=float) - x0
    V = np.vander(d, 4, increasing=True).T   # rows: d^0, d^1, d^2, d^3
    rhs = np.array([0.0, 0.0, 2.0, 0.0])
    return np.linalg.solve(V, rhs)


def _nonuniform_second(f, x, axis):
    """Second derivative on a smoothly graded 1D grid; centered interior,
    one-sided second-order (cubic-exact, 4 points) at the ends."""
    fm = np.moveaxis(f, axis, 0)
    om = np.empty_like(fm)
    hm = (x[1:-1] - x[:-2]).reshape((-1,) + (1,) * (fm.ndim - 1))
    hp = (x[2:] - x[1:-1]).reshape((-1,) + (1,) * (fm.ndim - 1))
    om[1:-1] = 2.0 * (hm * fm[2:] - (hm + hp) * fm[1:-1] + hp * fm[:-2]) / (
        hm * hp * (hm + hp)
    )
    w0 = _onesided_second_weights(x[0], x[:4])
    w1 = _onesided_second_weights(x[-1], x[-4:])
    om[0] = sum(w0[i] * fm[i] for i in range(4))
    om[-1] = sum(w1[i] * fm[-4 + i] for i in range(4))
    return np.moveaxis(om, 0, axis)


def coordinate_derivatives(f: np.ndarray, domain: SurfaceDomain):
    """First derivatives of a nodal field along the two grid coordinates.

    Cartesian: (f_x, f_y).  Polar: (f_r, f_theta).  Second-order centered,
    periodic where the domain is, one-sided second-order at Dirichlet edges.
    """
    if domain.kind is DomainKind.FLAT_TORUS:
        h = domain.xs[1] - domain.xs[0]
        return _roll_diff(f, h, axis=1), _roll_diff(f, h, axis=0)
    if domain.kind is DomainKind.UNIT_DISK:
        fx = np.gradient(f, domain.xs, axis=1, edge_order=2)
        fy = np.gradient(f, domain.ys, axis=0, edge_order=2)
        return fx, fy
    fr = np.gradient(f, domain.xs, axis=0, edge_order=2)
    dth = domain.ys[1] - domain.ys[0]
    fth = _roll_diff(f, dth, axis=1)
    return fr, fth


def flat_laplacian(f: np.ndarray, domain: SurfaceDomain) -> np.ndarray:
    """Coordinate Laplacian (no conformal factor): 5-point on Cartesian
    grids, polar form f_rr + f_r/r + f_tt/r^2 on the polar disk."""
    if domain.kind is DomainKind.FLAT_TORUS:
        h = domain.xs[1] - domain.xs[0]
        return _roll_second(f, h, axis=1) + _roll_second(f, h, axis=0)
    if domain.kind is DomainKind.UNIT_DISK:
        h = domain.xs[1] - domain.xs[0]
        return _onesided_second(f, h, axis=1) + _onesided_second(f, h, axis=0)
    rs = domain.xs
    dth = domain.ys[1] - domain.ys[0]
    r = rs.reshape((-1,) + (1,) * (f.ndim - 1))
    frr = _nonuniform_second(f, rs, axis=0)
    fr = np.gradient(f, rs, axis=0, edge_order=2)
    ftt = _roll_second(f, dth, axis=1)
    return frr + fr / r + ftt / (r * r)


def _wrapped_angle_derivs(theta: np.ndarray, domain: SurfaceDomain):
    """Derivatives of an angle-valued field, immune to 2 pi seams:
    theta' = cos(theta) (sin theta)' - sin(theta) (cos theta)'."""
    c, s = np.cos(theta), np.sin(theta)
    c1, c2 = coordinate_derivatives(c, domain)
    s1, s2 = coordinate_derivatives(s, domain)
    return c * s1 - s * c1, c * s2 - s * c2


# ---------------------------------------------------------------------------
# map states
# ---------------------------------------------------------------------------

@dataclass
class MapState:
    """Time-stamped grid of map values.

    Round-sphere values are unit 3-vectors (shape grid + (3,)); warped-sphere
    values are (psi, theta) chart pairs (shape grid + (2,)).
    """

    domain: SurfaceDomain
    target: object
    values: np.ndarray
    time: float = 0.0

    UNIT_TOL = 1e-12

    def __post_init__(self):
        expect = self.domain.shape + (self.target.value_dim,)
        if self.values.shape != expect:
            raise FieldsError(f"values shape {self.values.shape}, expected {expect}")

    def validate(self):
        if not np.all(np.isfinite(self.values)):
            loc = tuple(np.argwhere(~np.isfinite(self.values))[0])
            raise FieldsError(f"non-finite map value at node {loc}")
        if isinstance(self.target, RoundSphere):
            err = np.abs(np.linalg.norm(self.values, axis=-1) - 1.0).max()
            if err > self.UNIT_TOL:
                raise FieldsError(f"round-sphere values off the unit sphere by {err:.3e}")
        else:
            psi = self.values[..., 0]
            if psi.min() < -1e-12 or psi.max() > self.target.psi_max + 1e-12:
                raise FieldsError("warped-sphere psi outside [0, psi_max]")
        return self

    def copy(self) -> "MapState":
        return MapState(self.domain, self.target, self.values.copy(), self.time)

    def normalized(self) -> "MapState":
        if isinstance(self.target, RoundSphere):
            n = np.linalg.norm(self.values, axis=-1, keepdims=True)
            return MapState(self.domain, self.target, self.values / n, self.time)
        vals = self.values.copy()
        vals[..., 0] = np.clip(vals[..., 0], 0.0, self.target.psi_max)
        return MapState(self.domain, self.target, vals, self.time)


def constant_map(domain: SurfaceDomain, target, value) -> MapState:
    vals = np.broadcast_to(
        np.asarray(value, dtype=float), domain.shape + (target.value_dim,)
    ).copy()
    return MapState(domain, target, vals)


def chart_map(domain: SurfaceDomain, fn, target: Optional[RoundSphere] = None) -> MapState:
    """Map defined through the stereographic chart: u = from_chart(fn(z)),
    z the conformal coordinate of the domain (x + iy, or r e^{i theta})."""
    target = target or RoundSphere()
    X, Y = domain.node_coordinates()
    w = np.asarray(fn(X + 1j * Y), dtype=complex)
    return MapState(domain, target, target.from_chart(w))


def holomorphic_map(domain: SurfaceDomain, degree: int = 1, scale: float = 1.0) -> MapState:
    """Degree-d holomorphic chart map w(z) = (z / scale)^d to the round sphere."""
    return chart_map(domain, lambda z: (z / scale) ** degree)


def random_smooth_map(
    domain: SurfaceDomain,
    target=None,
    seed: int = 0,
    amplitude: float = 1.0,
    modes: int = 3,
) -> MapState:
    """Random low-mode smooth map, image inside a geodesic ball of radius
    ``amplitude`` about the chart-origin pole (so stereographic charts stay
    far from their singular pole for amplitude < pi)."""
    target = target or RoundSphere()
    rng = np.random.default_rng(seed)
    X, Y = domain.node_coordinates()
    if domain.is_cartesian:
        Lx = domain.xs[-1] - domain.xs[0]
        if domain.kind is DomainKind.FLAT_TORUS:
            Lx = len(domain.xs) * (domain.xs[1] - domain.xs[0])
        sx, sy = 2.0 * math.pi * X / Lx, 2.0 * math.pi * Y / Lx
    else:
        sx, sy = X, Y
    comps = np.zeros(domain.shape + (2,))
    for c in range(2):
        acc = np.zeros(domain.shape)
        for kx in range(1, modes + 1):
            for ky in range(0, modes + 1):
                a, b = rng.normal(size=2) / (kx * kx + ky * ky)
                acc += a * np.sin(kx * sx + ky * sy) + b * np.cos(kx * sx - ky * sy)
        comps[..., c] = acc
    vmax = np.abs(comps).max()
    comps *= amplitude / max(vmax, 1e-30)
    if isinstance(target, RoundSphere):
        # exponential map at the pole (0, 0, -1)
        norm = np.linalg.norm(comps, axis=-1)
        norm_safe = np.where(norm > 1e-30, norm, 1.0)
        u = np.empty(domain.shape + (3,))
        u[..., 0] = np.sin(norm) * comps[..., 0] / norm_safe
        u[..., 1] = np.sin(norm) * comps[..., 1] / norm_safe
        u[..., 2] = -np.cos(norm)
        return MapState(domain, target, u)
    psi0 = target.psi_max / 2.0
    vals = np.stack([psi0 + comps[..., 0], comps[..., 1]], axis=-1)
    vals[..., 0] = np.clip(vals[..., 0], 1e-3, target.psi_max - 1e-3)
    return MapState(domain, target, vals)


def perturbed_holomorphic_map(
    domain: SurfaceDomain, degree: int = 1, amplitude: float = 0.1, seed: int = 0
) -> MapState:
    base = holomorphic_map(domain, degree)
    noise = random_smooth_map(domain, RoundSphere(), seed=seed, amplitude=amplitude)
    vals = base.values + (noise.values - np.array([0.0, 0.0, -1.0]))
    vals /= np.linalg.norm(vals, axis=-1, keepdims=True)
    return MapState(domain, base.target, vals)


# ---------------------------------------------------------------------------
# field bundle
# ---------------------------------------------------------------------------

@dataclass
class FieldBundle:
    """Differential fields of one map state.  d1/d2 are the tangent-projected
    frame derivatives; see the module docstring for conventions."""

    d1: np.ndarray
    d2: np.ndarray
    e_del: np.ndarray
    e_dbar: np.ndarray
    hopf: Optional[np.ndarray] = None          # complex phi, split route
    s11: Optional[np.ndarray] = None           # direct stress assembly
    s12: Optional[np.ndarray] = None
    stress_norm: Optional[np.ndarray] = None
    hopf_chart: Optional[np.ndarray] = None    # chart route (round targets)
    chart_mask: Optional[np.ndarray] = None
    stress_hopf_gap: Optional[float] = None    # max |S_direct - 2 Re Phi_chart|
    tension: Optional[np.ndarray] = None
    tension_norm_sq: Optional[np.ndarray] = None

    @property
    def energy_density(self) -> np.ndarray:
        return self.e_del + self.e_dbar

    @property
    def du_norm_sq(self) -> np.ndarray:
        return 2.0 * (self.e_del + self.e_dbar)


def _frame_derivatives(u: MapState):
    """Tangent frame derivatives D1, D2 plus the metric scale fields."""
    dom = u.domain
    sig = np.sqrt(dom.conformal_factor)
    if isinstance(u.target, RoundSphere):
        f1, f2 = coordinate_derivatives(u.values, dom)
        if dom.kind is DomainKind.POLAR_DISK:
            f2 = f2 / dom.xs[:, None, None]
        D1 = f1 / sig[..., None]
        D2 = f2 / sig[..., None]
        # tangent projection; makes the splitting identities exact
        uu = u.values
        D1 = D1 - np.sum(D1 * uu, axis=-1, keepdims=True) * uu
        D2 = D2 - np.sum(D2 * uu, axis=-1, keepdims=True) * uu
        return D1, D2
    psi, theta = u.values[..., 0], u.values[..., 1]
    p1, p2 = coordinate_derivatives(psi, dom)
    t1, t2 = _wrapped_angle_derivs(theta, dom)
    if dom.kind is DomainKind.POLAR_DISK:
        p2 = p2 / dom.xs[:, None]
        t2 = t2 / dom.xs[:, None]
    phi = u.target.phi(psi)
    D1 = np.stack([p1, phi * t1], axis=-1) / sig[..., None]
    D2 = np.stack([p2, phi * t2], axis=-1) / sig[..., None]
    return D1, D2


def _apply_J(v: np.ndarray, u: MapState) -> np.ndarray:
    """Target complex structure on tangent fields: J v = v x u for the round
    sphere, 90-degree frame rotation for the warped chart."""
    if isinstance(u.target, RoundSphere):
        return np.cross(v, u.values)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def compute_differential(u: MapState) -> FieldBundle:
    """du in frame components together with the holomorphic energy split."""
    u.validate()
    D1, D2 = _frame_derivatives(u)
    JD2 = _apply_J(D2, u)
    b = 0.5 * (D1 + JD2)
    a = 0.5 * (D1 - JD2)
    e_dbar = np.sum(b * b, axis=-1)
    e_del = np.sum(a * a, axis=-1)
    for name, f in (("e_del", e_del), ("e_dbar", e_dbar)):
        if not np.all(np.isfinite(f)):
            loc = tuple(np.argwhere(~np.isfinite(f))[0])
            raise FieldsError(f"non-finite {name} at node {loc}")
    return FieldBundle(d1=D1, d2=D2, e_del=e_del, e_dbar=e_dbar)


def hopf_and_stress(u: MapState, fb: Optional[FieldBundle] = None,
                    chart_max: float = 4.0) -> FieldBundle:
    """Fill the Hopf differential and the stress-energy tensor.

    The stress is assembled twice: directly from du, and as 2 Re Phi with Phi
    from an independent stereographic-chart differentiation (round targets on
    Cartesian grids).  The max discrepancy over the chart-valid region is
    stored in ``stress_hopf_gap``.
    """
    fb = fb or compute_differential(u)
    D1, D2 = fb.d1, fb.d2
    fb.s11 = 0.5 * (np.sum(D1 * D1, axis=-1) - np.sum(D2 * D2, axis=-1))
    fb.s12 = np.sum(D1 * D2, axis=-1)
    fb.stress_norm = np.sqrt(2.0 * (fb.s11**2 + fb.s12**2))
    a = 0.5 * (D1 - _apply_J(D2, u))
    b = 0.5 * (D1 + _apply_J(D2, u))
    fb.hopf = np.sum(a * b, axis=-1) + 1j * np.sum(a * _apply_J(b, u), axis=-1)

    if isinstance(u.target, RoundSphere) and u.domain.is_cartesian:
        w = u.target.to_chart(u.values)
        ok = np.isfinite(w) & (np.abs(w) <= chart_max)
        # the comparison needs the whole stencil chart-valid
        valid = ok.copy()
        for ax in (0, 1):
            valid &= np.roll(ok, 1, axis=ax) & np.roll(ok, -1, axis=ax)
        if u.domain.boundary is BoundaryKind.DIRICHLET:
            valid[0, :] = valid[-1, :] = False
            valid[:, 0] = valid[:, -1] = False
        w_safe = np.where(ok, w, 0.0)
        w1, w2 = coordinate_derivatives(w_safe, u.domain)
        w_z = 0.5 * (w1 - 1j * w2)
        wbar_z = np.conj(0.5 * (w1 + 1j * w2))
        h11 = 2.0 / (1.0 + np.abs(w_safe) ** 2) ** 2
        fb.hopf_chart = 2.0 * h11 * w_z * wbar_z
        fb.chart_mask = valid
        if valid.any():
            ds11 = fb.s11 - 2.0 * np.real(fb.hopf_chart)
            ds12 = fb.s12 + 2.0 * np.imag(fb.hopf_chart)
            gap = np.sqrt(2.0 * (ds11**2 + ds12**2))
            fb.stress_hopf_gap = float(gap[valid].max())
    return fb


def tension(u: MapState, fb: Optional[FieldBundle] = None) -> np.ndarray:
    """Tension field tau(u) = tr_g grad du.

    Round sphere: tau = Lap_g u + |du|_g^2 u projected onto the tangent plane
    at u.  Warped sphere: chart formula with the Christoffel symbols of
    dpsi^2 + phi^2 dtheta^2 (raises near a warp pole).
    """
    dom = u.domain
    inv_sig2 = 1.0 / dom.conformal_factor
    if isinstance(u.target, RoundSphere):
        fb = fb or compute_differential(u)
        lap = flat_laplacian(u.values, dom) * inv_sig2[..., None]
        tau = lap + fb.du_norm_sq[..., None] * u.values
        tau -= np.sum(tau * u.values, axis=-1, keepdims=True) * u.values
        return tau

    psi, theta = u.values[..., 0], u.values[..., 1]
    phi = u.target.phi(psi)
    if np.any(phi < 1e-10):
        loc = tuple(np.argwhere(phi < 1e-10)[0])
        raise ChartPoleError(
            f"warp chart degenerates (phi ~ 0) at node {loc}; "
            "the chart tension formula is invalid across poles"
        )
    dphi = u.target.phi_prime(psi)
    p1, p2 = coordinate_derivatives(psi, dom)
    t1, t2 = _wrapped_angle_derivs(theta, dom)
    lap_psi = flat_laplacian(psi, dom) * inv_sig2
    # Laplacian of the angle through its seam-free first derivatives
    if dom.kind is DomainKind.POLAR_DISK:
        rs, dth = dom.xs, dom.ys[1] - dom.ys[0]
        r = rs[:, None]
        grad_th_sq = (t1**2 + (t2 / r) ** 2) * inv_sig2
        cross = (p1 * t1 + (p2 / r) * (t2 / r)) * inv_sig2
        lap_th = (
            np.gradient(t1, rs, axis=0, edge_order=2)
            + t1 / r
            + _roll_diff(t2, dth, axis=1) / (r * r)
        ) * inv_sig2
    else:
        grad_th_sq = (t1**2 + t2**2) * inv_sig2
        cross = (p1 * t1 + p2 * t2) * inv_sig2
        if dom.kind is DomainKind.UNIT_DISK:
            lap_th = (
                np.gradient(t1, dom.xs, axis=1, edge_order=2)
                + np.gradient(t2, dom.ys, axis=0, edge_order=2)
            ) * inv_sig2
        else:
            h = dom.xs[1] - dom.xs[0]
            lap_th = (_roll_diff(t1, h, axis=1) + _roll_diff(t2, h, axis=0)) * inv_sig2
    tau_psi = lap_psi - phi * dphi * grad_th_sq
    tau_th = lap_th + 2.0 * (dphi / phi) * cross
    return np.stack([tau_psi, tau_th], axis=-1)


def tension_norm_sq(u: MapState, tau: np.ndarray) -> np.ndarray:
    """|tau|^2 in the target metric."""
    if isinstance(u.target, RoundSphere):
        return np.sum(tau * tau, axis=-1)
    phi = u.target.phi(u.values[..., 0])
    return tau[..., 0] ** 2 + (phi * tau[..., 1]) ** 2


# ---------------------------------------------------------------------------
# energy reports
# ---------------------------------------------------------------------------

@dataclass
class EnergyReport:
    t: float
    E: float
    E_del: float
    E_dbar: float
    kappa: float
    sup_du: float
    sup_dbar: float
    stress_Lq: float
    q: float
    tension_L2_sq: float

    CSV_COLUMNS = (
        "t,E,E_del,E_dbar,kappa,sup_du,sup_dbar,stress_Lq,q,tension_L2_sq"
    )

    def row(self) -> str:
        return ",".join(
            repr(float(getattr(self, k))) for k in self.CSV_COLUMNS.split(",")
        )


def energy_report(u: MapState, q: float = 2.0,
                  fb: Optional[FieldBundle] = None) -> EnergyReport:
    """Quadrature of all densities at one time."""
    fb = fb or hopf_and_stress(u)
    if fb.s11 is None:
        fb = hopf_and_stress(u, fb)
    if fb.tension is None:
        fb.tension = tension(u, fb)
        fb.tension_norm_sq = tension_norm_sq(u, fb.tension)
    w = u.domain.node_weights()
    E_del = float(np.sum(w * fb.e_del))
    E_dbar = float(np.sum(w * fb.e_dbar))
    stress_lq = float(np.sum(w * fb.stress_norm**q) ** (1.0 / q))
    return EnergyReport(
        t=u.time,
        E=E_del + E_dbar,
        E_del=E_del,
        E_dbar=E_dbar,
        kappa=E_del - E_dbar,
        sup_du=float(np.sqrt(fb.du_norm_sq.max())),
        sup_dbar=float(np.sqrt(fb.e_dbar.max())),
        stress_Lq=stress_lq,
        q=q,
        tension_L2_sq=float(np.sum(w * fb.tension_norm_sq)),
    )


def local_energy(u: MapState, spec: AnnulusSpec,
                 fb: Optional[FieldBundle] = None) -> float:
    """Energy over an annulus or ball (r_inner == 0)."""
    fb = fb or compute_differential(u)
    w = annulus_weights(u.domain, spec)
    return float(np.sum(w * fb.energy_density))


# ---------------------------------------------------------------------------
# Bochner and pointwise-identity residuals (flat torus)
# ---------------------------------------------------------------------------

def _require_torus(u: MapState, what: str):
    if u.domain.kind is not DomainKind.FLAT_TORUS:
        raise NotImplementedError(
            f"{what} is implemented on the flat torus, where the domain "
            "connection is trivial"
        )


def _tangent_grad_sq(u: MapState, comps) -> np.ndarray:
    """Sum over derivative and form indices of |P_u d(comp)|^2 for a list of
    tangent 3-vector fields, flat-torus stencils."""
    h = u.domain.xs[1] - u.domain.xs[0]
    uu = u.values
    total = np.zeros(u.domain.shape)
    for comp in comps:
        for ax in (0, 1):
            d = _roll_diff(comp, h, axis=ax)
            d = d - np.sum(d * uu, axis=-1, keepdims=True) * uu
            total += np.sum(d * d, axis=-1)
    return total


@dataclass
class BochnerResidual:
    """Residual fields of the parabolic Bochner inequalities over one step.

    ``dbar_inequality`` is D = (d/dt - Lap) e_dbar / 2 + |grad dbar u|^2
    + K_domain e_dbar - C_N e_dbar^2, nonpositive up to discretization when
    the target passes the curvature check.  ``dbar_exact`` replaces the
    curvature bound with the exact sphere-target term K (e_dbar^2 -
    e_del e_dbar) and converges to zero.  ``full_*`` are the analogues for
    the total energy density.
    """

    dbar_inequality: np.ndarray
    dbar_exact: np.ndarray
    full_inequality: np.ndarray
    full_exact: np.ndarray

    @property
    def max_positive_dbar(self) -> float:
        return float(max(self.dbar_inequality.max(), 0.0))

    @property
    def max_positive_full(self) -> float:
        return float(max(self.full_inequality.max(), 0.0))

    @property
    def max_abs_exact(self) -> float:
        return float(np.abs(self.dbar_exact).max())


def bochner_residual(u_prev: MapState, u_next: MapState, dt: float) -> BochnerResidual:
    """Nodewise residuals of the split and full Bochner formulas between two
    consecutive flow states (time derivative centered at the midpoint)."""
    if dt <= 0:
        raise FieldsError("dt must be positive")
    _require_torus(u_prev, "bochner_residual")
    dom = u_prev.domain
    target = u_prev.target

    def per_state(u):
        fb = compute_differential(u)
        D2J = _apply_J(fb.d2, u)
        b = 0.5 * (fb.d1 + D2J)
        if isinstance(target, RoundSphere):
            comps_dbar = (b, -np.cross(b, u.values))
            grad_dbar = 0.5 * _tangent_grad_sq(u, comps_dbar)
            ux, uy = coordinate_derivatives(u.values, dom)
            grad_full = _tangent_grad_sq(u, (ux, uy))
            K_at_u = np.ones(dom.shape)
        else:
            raise NotImplementedError("bochner_residual supports round targets")
        return fb, grad_dbar, grad_full, K_at_u

    fb_p, gd_p, gf_p, K_p = per_state(u_prev)
    fb_n, gd_n, gf_n, K_n = per_state(u_next)

    e_dbar_avg = 0.5 * (fb_p.e_dbar + fb_n.e_dbar)
    e_del_avg = 0.5 * (fb_p.e_del + fb_n.e_del)
    e_avg = e_dbar_avg + e_del_avg
    K_avg = 0.5 * (K_p + K_n)
    K_dom = dom.gauss_curvature
    C_N = target.curvature_bound

    dot_dbar = (fb_n.e_dbar - fb_p.e_dbar) / dt
    dot_full = (fb_n.energy_density - fb_p.energy_density) / dt
    lap_dbar = flat_laplacian(e_dbar_avg, dom)
    lap_full = flat_laplacian(e_avg, dom)
    grad_dbar = 0.5 * (gd_p + gd_n)
    grad_full = 0.5 * (gf_p + gf_n)

    base_dbar = 0.5 * (dot_dbar - lap_dbar) + grad_dbar + K_dom * e_dbar_avg
    dbar_ineq = base_dbar - C_N * e_dbar_avg**2
    dbar_exact = base_dbar - K_avg * (e_dbar_avg**2 - e_del_avg * e_dbar_avg)

    A = 2.0 * C_N
    B = max(0.0, -2.0 * float(K_dom.min()))
    base_full = (dot_full - lap_full) + grad_full
    full_ineq = base_full + 2.0 * K_dom * e_avg - A * e_avg**2 - B * e_avg
    full_exact = base_full + 2.0 * K_dom * e_avg - 2.0 * K_avg * (e_del_avg - e_dbar_avg) ** 2

    return BochnerResidual(dbar_ineq, dbar_exact, full_ineq, full_exact)


def pointwise_energy_residual(u_prev: MapState, u_next: MapState, dt: float):
    """Residual field of d e/dt + |tau|^2 = div div S over one step.

    Returns (field, max-abs).  Flat torus only.
    """
    if dt <= 0:
        raise FieldsError("dt must be positive")
    _require_torus(u_prev, "pointwise_energy_residual")
    dom = u_prev.domain
    h = dom.xs[1] - dom.xs[0]

    def terms(u):
        fb = hopf_and_stress(u)
        tau = tension(u, fb)
        tsq = tension_norm_sq(u, tau)
        sxx, sxy = fb.s11, fb.s12  # sigma == 1 on the torus
        dds = (
            _roll_second(sxx, h, axis=1)
            - _roll_second(sxx, h, axis=0)
            + 2.0 * _roll_diff(_roll_diff(sxy, h, axis=1), h, axis=0)
        )
        return fb.energy_density, tsq, dds

    e_p, t_p, d_p = terms(u_prev)
    e_n, t_n, d_n = terms(u_next)
    res = (e_n - e_p) / dt + 0.5 * (t_p + t_n) - 0.5 * (d_p + d_n)
    return res, float(np.abs(res).max())


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def reports_to_csv(reports, path):
    """One row per time; columns documented in the header comment."""
    with open(path, "w") as fh:
        fh.write("# energy trace: " + EnergyReport.CSV_COLUMNS + "\n")
        fh.write(EnergyReport.CSV_COLUMNS + "\n")
        for rep in reports:
            fh.write(rep.row() + "\n")


def fieldbundle_to_csv(u: MapState, fb: FieldBundle, path):
    """One row per node with the scalar diagnostic fields."""
    X, Y = u.domain.node_coordinates()
    cols = ["x", "y", "e_del", "e_dbar", "s11", "s12", "stress_norm"]
    data = [X, Y, fb.e_del, fb.e_dbar, fb.s11, fb.s12, fb.stress_norm]
    if fb.hopf is not None:
        cols += ["hopf_re", "hopf_im"]
        data += [np.real(fb.hopf), np.imag(fb.hopf)]
    if fb.tension_norm_sq is not None:
        cols += ["tension_norm_sq"]
        data += [fb.tension_norm_sq]
    flat = np.column_stack([np.asarray(d).ravel() for d in data])
    with open(path, "w") as fh:
        fh.write("# per-node fields: " + ",".join(cols) + "\n")
        fh.write(",".join(cols) + "\n")
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
