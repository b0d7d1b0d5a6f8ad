"""Bubble-tree extraction from flow snapshots.

Near a finite-time singularity the map splits into a body map plus bubbles:
rescaling u(q + lambda x) about the energy center of mass q at the
concentration scale lambda produces an almost-harmonic sphere carrying at
least the quantum eps0 of energy.  The neck annuli between bubble and body
scales must lose both energy and target oscillation as the annulus widens,
and the concentrated energy must equal the sum of bubble energies (the
energy identity).  This module measures all of that on snapshot data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import AnnulusSpec, DomainKind, RoundSphere, SurfaceDomain, annulus_weights
from .fields import MapState, compute_differential, local_energy
from .flow import (
    CorotationalState,
    CorotationalTrace,
    corotational_fields,
    restart_corotational,
)
from .scale_monitor import (
    EPS0_ROUND_SPHERE,
    ball_energy_function,
    energy_scale,
    mesh_floor_of,
)


class BubbleTreeError(ValueError):
    pass


class InsufficientConcentration(BubbleTreeError):
    """No energy scale above the mesh floor; nothing to extract."""


# ---------------------------------------------------------------------------
# concentration detection
# ---------------------------------------------------------------------------

@dataclass
class Concentration:
    center: tuple
    t_first: float
    peak_grad: float       # sup |du| h at detection


def detect_concentrations(snapshots: Sequence[MapState], threshold: float = 0.5,
                          persistence: int = 2,
                          merge_radius: Optional[float] = None) -> List[Concentration]:
    """Nodes where sup|du| h stays above threshold across consecutive
    snapshots, merged by spatial clustering.  Sorted by peak gradient."""
    if not snapshots:
        return []
    dom = snapshots[0].domain
    h = dom.min_length_scale
    merge_radius = merge_radius or 8.0 * h
    X, Y = dom.node_coordinates()
    active: List[dict] = []
    done: List[dict] = []
    for u in snapshots:
        fb = compute_differential(u)
        g = np.sqrt(fb.du_norm_sq) * h
        mask = g >= threshold
        peaks = []
        if mask.any():
            lab = np.argwhere(mask)
            vals = g[mask]
            order = np.argsort(vals)[::-1]
            taken: List[tuple] = []
            for o in order:
                iy, ix = lab[o]
                p = (float(X[iy, ix]), float(Y[iy, ix]))
                if all(math.hypot(p[0] - q[0], p[1] - q[1]) > merge_radius for q in taken):
                    taken.append(p)
                    peaks.append((p, float(g[iy, ix])))
        matched = set()
        fresh = []
        for p, val in peaks:
            hit = None
            for i, c in enumerate(active):
                if math.hypot(p[0] - c["center"][0], p[1] - c["center"][1]) <= merge_radius:
                    hit = i
                    break
            if hit is None:
                fresh.append({"center": p, "t_first": u.time, "count": 1, "peak": val})
            else:
                active[hit]["count"] += 1
                active[hit]["peak"] = max(active[hit]["peak"], val)
                matched.add(hit)
        surviving = []
        for i, c in enumerate(active):
            if i in matched:
                surviving.append(c)
            elif c["count"] >= persistence:
                done.append(c)       # track ended but it was persistent
        active = surviving + fresh
    done.extend(c for c in active if c["count"] >= persistence)
    done.sort(key=lambda c: -c["peak"])
    return [Concentration(c["center"], c["t_first"], c["peak"]) for c in done]


# ---------------------------------------------------------------------------
# bubble extraction
# ---------------------------------------------------------------------------

@dataclass
class Bubble:
    center: tuple
    scale: float
    energy: float
    e_dbar_energy: float
    is_holomorphic: bool
    rescaled_scale_check: float      # energy scale of the rescaled state (~1)
    state: object = None             # rescaled MapState / CorotationalState
    children: List["Bubble"] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "center": list(self.center),
            "scale": self.scale,
            "energy": self.energy,
            "e_dbar_energy": self.e_dbar_energy,
            "is_holomorphic": self.is_holomorphic,
            "rescaled_scale_check": self.rescaled_scale_check,
            "children": [b.summary() for b in self.children],
        }


HOLOMORPHIC_FRACTION = 0.01     # E_dbar(bubble) <= 1% of its energy


def _reference_domain(n: int, width: float) -> SurfaceDomain:
    return SurfaceDomain.unit_disk(n, half_width=width)


def extract_bubble(u: MapState, p, eps: float, rho: float,
                   ref_n: int = 385, ref_width: float = 6.0) -> Bubble:
    """Center-of-mass rescaling at a concentration point of a 2D state.

    q is the energy center of mass over the ball of radius lambda0
    (lambda0 = energy scale at p); the bubble scale is the energy scale
    recentred at q; the rescaled state v(x) = u(q + lambda x) lives on a
    fixed Cartesian reference grid.
    """
    from .neck_decay import _bilinear_sample

    floor = mesh_floor_of(u)
    lam0 = energy_scale(u, eps, rho, p)
    if lam0 <= floor:
        raise InsufficientConcentration(
            f"energy scale {lam0:.3g} at {p} is not above the mesh floor {floor:.3g}"
        )
    fb = compute_differential(u)
    w = u.domain.node_weights() * fb.energy_density
    dist = u.domain.distances_from(p)
    mask = dist <= lam0
    X, Y = u.domain.node_coordinates()
    dx, dy = X - p[0], Y - p[1]
    if u.domain.kind is DomainKind.FLAT_TORUS:
        L = len(u.domain.xs) * (u.domain.xs[1] - u.domain.xs[0])
        dx = (dx + L / 2.0) % L - L / 2.0
        dy = (dy + L / 2.0) % L - L / 2.0
    wm = np.where(mask, w, 0.0)
    tot = wm.sum()
    q = (p[0] + float((wm * dx).sum() / tot), p[1] + float((wm * dy).sum() / tot))
    lam = energy_scale(u, eps, rho / 2.0, q)
    if lam <= floor:
        raise InsufficientConcentration("recentred energy scale below mesh floor")

    ref = _reference_domain(ref_n, ref_width)
    RX, RY = ref.node_coordinates()
    px = q[0] + lam * RX
    py = q[1] + lam * RY
    vals = _bilinear_sample(u, px.ravel(), py.ravel()).reshape(ref.shape + (-1,))
    if isinstance(u.target, RoundSphere):
        vals = vals / np.linalg.norm(vals, axis=-1, keepdims=True)
    v = MapState(ref, u.target, vals, u.time)
    vfb = compute_differential(v)
    wref = ref.node_weights()
    ball = ref.distances_from((0.0, 0.0)) <= ref_width
    energy = float((wref * vfb.energy_density)[ball].sum())
    e_dbar = float((wref * vfb.e_dbar)[ball].sum())
    scale_check = energy_scale(v, eps, ref_width * 0.9, (0.0, 0.0))
    return Bubble(
        center=q, scale=float(lam), energy=energy, e_dbar_energy=e_dbar,
        is_holomorphic=e_dbar <= HOLOMORPHIC_FRACTION * max(energy, 1e-30),
        rescaled_scale_check=float(scale_check), state=v,
    )


def extract_bubble_corotational(s: CorotationalState, eps: float, rho: float,
                                ref_n: int = 2049, ref_width: float = 8.0) -> Bubble:
    """Origin-centered extraction from an equivariant profile."""
    floor = mesh_floor_of(s)
    lam = energy_scale(s, eps, rho)
    if lam <= floor:
        raise InsufficientConcentration(
            f"energy scale {lam:.3g} not above the mesh floor {floor:.3g}"
        )
    x = np.linspace(0.0, ref_width, ref_n)
    hh = np.interp(lam * x, s.r, s.h)
    hh[0] = s.h[0]
    v = CorotationalState(x, hh, s.k, s.time, s.target)
    _, e, e_del, e_dbar, _ = corotational_fields(v)
    wgt = 2.0 * math.pi * x
    energy = float(np.trapezoid(e * wgt, x))
    e_dbar_E = float(np.trapezoid(e_dbar * wgt, x))
    scale_check = energy_scale(v, eps, ref_width * 0.9)
    return Bubble(
        center=(0.0, 0.0), scale=float(lam), energy=energy, e_dbar_energy=e_dbar_E,
        is_holomorphic=e_dbar_E <= HOLOMORPHIC_FRACTION * max(energy, 1e-30),
        rescaled_scale_check=float(scale_check), state=v,
    )


# ---------------------------------------------------------------------------
# neck accounting
# ---------------------------------------------------------------------------

def _great_circle_osc_band(h_lo: float, h_hi: float) -> float:
    """Oscillation of the corotational image band psi in [h_lo, h_hi]
    (all angles present): max great-circle distance."""

    def folded(x):
        x = math.fmod(x, 2.0 * math.pi)
        return min(abs(x), 2.0 * math.pi - abs(x))

    cands = [abs(h_hi - h_lo), folded(2 * h_lo), folded(2 * h_hi), folded(h_lo + h_hi)]
    return min(max(cands), math.pi)


def neck_accounting(state, p, lam: float, rho: float, alpha: float,
                    beta: float, osc_samples: int = 400) -> Tuple[float, float]:
    """(neck energy, oscillation) over the annulus alpha*lam <= |x - p| <=
    beta*rho.  Oscillation is measured in the target intrinsic distance."""
    r_in, r_out = alpha * lam, beta * rho
    if r_in >= r_out:
        raise BubbleTreeError(f"empty neck annulus: alpha lam = {r_in:.3g} >= "
                              f"beta rho = {r_out:.3g}")
    if isinstance(state, CorotationalState):
        Eb = ball_energy_function(state)
        energy = Eb(r_out) - Eb(r_in)
        mask = (state.r >= r_in) & (state.r <= r_out)
        if not mask.any():
            raise BubbleTreeError("neck annulus contains no profile nodes")
        h_lo, h_hi = float(state.h[mask].min()), float(state.h[mask].max())
        if isinstance(state.target, RoundSphere):
            osc = _great_circle_osc_band(h_lo, h_hi)
        else:
            osc = min(h_hi - h_lo + 2.0 * float(state.phi_of_h()[mask].max()),
                      state.target.diameter)
        return float(energy), float(osc)
    fb = compute_differential(state)
    w = annulus_weights(state.domain, AnnulusSpec(p, r_in, r_out))
    energy = float((w * fb.energy_density).sum())
    dist = state.domain.distances_from(p)
    mask = (dist >= r_in) & (dist <= r_out)
    pts = state.values[mask]
    if len(pts) == 0:
        raise BubbleTreeError("neck annulus contains no nodes")
    if len(pts) > osc_samples:
        idx = np.linspace(0, len(pts) - 1, osc_samples).astype(int)
        pts = pts[idx]
    osc = 0.0
    tgt = state.target
    for i in range(len(pts)):
        d = tgt.distance(pts[i : i + 1], pts[i + 1 :])
        if d.size:
            osc = max(osc, float(d.max()))
    return energy, osc


def neck_sweep(state, p, lam: float, rho: float, alphas, betas):
    """Tables E[i, j], osc[i, j] over (alpha_i, beta_j), skipping empty
    annuli (marked NaN)."""
    E = np.full((len(alphas), len(betas)), np.nan)
    osc = np.full_like(E, np.nan)
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            if a * lam < b * rho:
                E[i, j], osc[i, j] = neck_accounting(state, p, lam, rho, a, b)
    return E, osc


# ---------------------------------------------------------------------------
# energy identity and the tree
# ---------------------------------------------------------------------------

@dataclass
class BubbleTree:
    bubbles: List[Bubble]
    body_map: object
    neck_alphas: List[float]
    neck_betas: List[float]
    neck_energies: np.ndarray
    oscillations: np.ndarray
    energy_identity_residual: float
    concentrated_energy: float       # E(u(t*), B_r_small)
    r_small: float
    t_analysis: float
    delta0: float
    delta0_window_ok: bool
    extraction_order: List[int] = field(default_factory=list)

    def to_json(self, path):
        d = {
            "bubbles": [b.summary() for b in self.bubbles],
            "neck_alphas": list(map(float, self.neck_alphas)),
            "neck_betas": list(map(float, self.neck_betas)),
            "neck_energies": np.asarray(self.neck_energies).tolist(),
            "oscillations": np.asarray(self.oscillations).tolist(),
            "energy_identity_residual": self.energy_identity_residual,
            "concentrated_energy": self.concentrated_energy,
            "r_small": self.r_small,
            "t_analysis": self.t_analysis,
            "delta0": self.delta0,
            "delta0_window_ok": self.delta0_window_ok,
            "extraction_order": self.extraction_order,
        }
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1, sort_keys=True)


def energy_identity_check(state, bubbles: Sequence[Bubble], p,
                          r_small: float) -> Tuple[float, float]:
    """(residual, concentrated energy): |E(u, B_r) - sum_k E(phi_k)| at the
    analysis time, the desk-scale stand-in for the double limit."""
    Eb = ball_energy_function(state, p)
    conc = Eb(r_small)
    total = sum(b.energy for b in bubbles)
    return abs(conc - total), conc


def build_bubble_tree_corotational(
    trace: CorotationalTrace,
    template: CorotationalState,
    eps: float = 0.1 * EPS0_ROUND_SPHERE,
    rho: float = 0.5,
    resolve_cells: float = 10.0,
    alphas=(4.0, 8.0, 16.0, 32.0),
    betas=(0.8, 0.4, 0.2, 0.1),
    r_small: Optional[float] = None,
    delta0: float = 0.1 * EPS0_ROUND_SPHERE,
) -> BubbleTree:
    """Single-point bubble tree of a corotational blowup run.

    The analysis picks the latest snapshot whose energy scale is still
    resolved (>= resolve_cells grid cells), extracts the bubble there, sweeps
    the neck windows, and checks the energy identity against a small ball.
    """
    if trace.blowup_time is None:
        raise BubbleTreeError("trace has no detected singular time")
    lam_floor = resolve_cells * template.dr
    pick = None
    lam_pick = 0.0
    for i in range(len(trace.times) - 1, -1, -1):
        s = trace.state_at(i, template)
        lam = energy_scale(s, eps, rho)
        if lam >= lam_floor:
            pick, lam_pick = i, lam
            break
    if pick is None:
        raise InsufficientConcentration("no snapshot with a resolved energy scale")
    s_star = trace.state_at(pick, template)
    bubble = extract_bubble_corotational(s_star, eps, rho)
    r_small = r_small or rho / 8.0
    residual, conc = energy_identity_check(s_star, [bubble], (0.0, 0.0), r_small)
    E, osc = neck_sweep(s_star, (0.0, 0.0), bubble.scale, rho, alphas, betas)
    body = restart_corotational(s_star, bubble.scale)

    # Lemma 6.4 smallness window: energy drop since the analysis window start
    E_trace = [r.E for r in trace.reports]
    window_ok = (E_trace[pick] - min(E_trace[pick:])) < delta0

    return BubbleTree(
        bubbles=[bubble], body_map=body,
        neck_alphas=list(alphas), neck_betas=list(betas),
        neck_energies=E, oscillations=osc,
        energy_identity_residual=residual, concentrated_energy=conc,
        r_small=r_small, t_analysis=s_star.time,
        delta0=delta0, delta0_window_ok=bool(window_ok),
        extraction_order=[0],
    )


def build_bubble_tree_2d(snapshots: Sequence[MapState],
                         eps: float = 0.1 * EPS0_ROUND_SPHERE,
                         rho: float = 0.5,
                         threshold: float = 0.5,
                         alphas=(4.0, 8.0, 16.0),
                         betas=(0.8, 0.4, 0.2),
                         r_small: Optional[float] = None,
                         max_depth: int = 3,
                         delta0: float = 0.1 * EPS0_ROUND_SPHERE) -> BubbleTree:
    """Bubble tree from 2D snapshots: detect concentrations, extract in
    decreasing energy order (recursion depth capped at max_depth), account
    the necks of the strongest point, and check the energy identity there."""
    cands = detect_concentrations(snapshots, threshold=threshold)
    if not cands:
        raise InsufficientConcentration("no persistent concentration candidates")
    u = snapshots[-1]
    bubbles: List[Bubble] = []
    order: List[int] = []
    for i, c in enumerate(cands):
        try:
            b = extract_bubble(u, c.center, eps, rho)
        except InsufficientConcentration:
            continue
        if max_depth > 1 and b.state is not None:
            try:
                child = extract_bubble(b.state, (0.0, 0.0), eps,
                                       b.state.domain.domain_radius_bound() / 2.0)
                if child.scale < 0.25:   # genuinely deeper concentration
                    b.children.append(child)
            except (InsufficientConcentration, BubbleTreeError):
                pass
        bubbles.append(b)
        order.append(i)
    if not bubbles:
        raise InsufficientConcentration("no extractable bubbles")
    main = bubbles[0]
    E, osc = neck_sweep(u, main.center, main.scale, rho, alphas, betas)
    r_small = r_small or rho / 8.0
    residual, conc = energy_identity_check(u, [main], main.center, r_small)
    E0s = [float(np.sum(s.domain.node_weights() * compute_differential(s).energy_density))
           for s in snapshots]
    window_ok = (max(E0s) - min(E0s)) < delta0
    body = restart_like_body(u, main.center, main.scale)
    return BubbleTree(
        bubbles=bubbles, body_map=body,
        neck_alphas=list(alphas), neck_betas=list(betas),
        neck_energies=E, oscillations=osc,
        energy_identity_residual=residual, concentrated_energy=conc,
        r_small=r_small, t_analysis=u.time,
        delta0=delta0, delta0_window_ok=bool(window_ok),
        extraction_order=order,
    )


def restart_like_body(u: MapState, center, scale: float) -> MapState:
    from .flow import harmonic_fill

    mask = u.domain.distances_from(center) <= 4.0 * scale
    return harmonic_fill(u, mask)
