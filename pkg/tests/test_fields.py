import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmflow.geometry import AnnulusSpec, RoundSphere, SurfaceDomain, WarpedSphere
from hmflow.fields import (
    ChartPoleError,
    FieldsError,
    MapState,
    compute_differential,
    constant_map,
    energy_report,
    fieldbundle_to_csv,
    holomorphic_map,
    hopf_and_stress,
    local_energy,
    pointwise_energy_residual,
    random_smooth_map,
    reports_to_csv,
    tension,
    tension_norm_sq,
)
from conftest import refinement_order


def corotational_polar_state(nr=300, ntheta=128, r_min=0.02, profile=None, k=1):
    d = SurfaceDomain.polar_disk(nr, ntheta, r_min=r_min)
    R, TH = np.meshgrid(d.xs, d.ys, indexing="ij")
    h = profile(R) if profile else 2 * np.arctan(R)
    return MapState(d, RoundSphere(), RoundSphere.embed(h, k * TH))


# ---------------------------------------------------------------------------
# differential and the holomorphic split
# ---------------------------------------------------------------------------

def test_constant_map_zero_energy():
    d = SurfaceDomain.flat_torus(24)
    u = constant_map(d, RoundSphere(), (0.0, 0.0, 1.0))
    fb = compute_differential(u)
    assert fb.e_del.max() == 0.0 and fb.e_dbar.max() == 0.0


def test_holomorphic_chart_map_antiholomorphic_part_vanishes():
    # w(z) = z is holomorphic: sup |dbar u| converges at order >= 2
    sups = []
    for n in (33, 65):
        u = holomorphic_map(SurfaceDomain.unit_disk(n), 1)
        fb = compute_differential(u)
        sups.append(math.sqrt(fb.e_dbar.max()))
    assert refinement_order(*sups) >= 1.9
    assert sups[1] < 5e-4


def test_antiholomorphic_mirror():
    # w(z) = conj(z): the holomorphic part vanishes instead
    from hmflow.fields import chart_map
    u = chart_map(SurfaceDomain.unit_disk(65), lambda z: np.conj(z))
    fb = compute_differential(u)
    assert math.sqrt(fb.e_del.max()) < 5e-4
    assert fb.e_dbar.mean() > 0.1


def test_splitting_identity_is_algebraic(smooth_map48):
    fb = compute_differential(smooth_map48)
    gap = np.abs(fb.e_del + fb.e_dbar - 0.5 * fb.du_norm_sq).max()
    assert gap <= 1e-10


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), amp=st.floats(0.1, 2.0))
def test_splitting_identity_property(seed, amp):
    d = SurfaceDomain.flat_torus(16)
    u = random_smooth_map(d, RoundSphere(), seed=seed, amplitude=amp)
    fb = compute_differential(u)
    assert np.abs(fb.e_del + fb.e_dbar - 0.5 * fb.du_norm_sq).max() <= 1e-10


def test_warped_split_matches_round_on_corotational():
    # same corotational state through the embedded round pipeline and the
    # warped chart pipeline with phi = sin: the two discretizations agree at
    # second order (their angular-stencil constants differ near r_min)
    gaps = []
    ws = WarpedSphere.round()
    for nr, nth in ((200, 96), (400, 192)):
        d = SurfaceDomain.polar_disk(nr, nth, r_min=0.05)
        R, TH = np.meshgrid(d.xs, d.ys, indexing="ij")
        h = 1.1 * np.arctan(2 * R)
        fr = compute_differential(MapState(d, RoundSphere(), RoundSphere.embed(h, TH)))
        fw = compute_differential(MapState(d, ws, np.stack([h, TH % (2 * np.pi)], -1)))
        gaps.append(max(np.abs(fr.e_dbar - fw.e_dbar).max(),
                        np.abs(fr.e_del - fw.e_del).max()))
    assert refinement_order(*gaps) >= 1.8
    assert gaps[1] <= 1e-4


def test_nonfinite_values_raise_with_location():
    d = SurfaceDomain.flat_torus(16)
    u = constant_map(d, RoundSphere(), (0.0, 0.0, 1.0))
    u.values[3, 5, 1] = np.nan
    with pytest.raises(FieldsError, match=r"3.*5"):
        compute_differential(u)


# ---------------------------------------------------------------------------
# Hopf differential and stress-energy
# ---------------------------------------------------------------------------

def test_stress_trace_free_and_identity_route(smooth_map48):
    fb = hopf_and_stress(smooth_map48)
    # trace-free is structural: s11 stores both diagonal entries.
    # the split-route Hopf reproduces the direct stress algebraically
    assert np.abs(fb.s11 - 2 * np.real(fb.hopf)).max() < 1e-13
    assert np.abs(fb.s12 + 2 * np.imag(fb.hopf)).max() < 1e-13


def test_stress_bound_by_split_energies(smooth_map48):
    fb = hopf_and_stress(smooth_map48)
    bound = 4.0 * np.sqrt(fb.e_del * fb.e_dbar)
    assert np.all(fb.stress_norm <= bound * (1 + 1e-8) + 1e-15)


def test_holomorphic_stress_vanishes():
    sups = []
    for n in (33, 65):
        u = holomorphic_map(SurfaceDomain.unit_disk(n), 1)
        fb = hopf_and_stress(u)
        sups.append(fb.stress_norm.max())
    assert refinement_order(*sups) >= 1.8
    assert sups[1] < 5e-3


def test_chart_route_gap_refines_at_second_order():
    gaps = []
    for n in (48, 96):
        u = random_smooth_map(SurfaceDomain.flat_torus(n), seed=5, amplitude=1.2)
        fb = hopf_and_stress(u)
        gaps.append(fb.stress_hopf_gap)
    assert refinement_order(*gaps) >= 1.8


def test_corotational_stress_closed_form():
    # |S| = |h_r^2 - k^2 sin^2 h / r^2| / sqrt(2) for u = (h(r), k theta)
    hfun = lambda R: 1.1 * np.arctan(2 * R) + 0.3 * R**2
    u = corotational_polar_state(nr=600, profile=hfun)
    fb = hopf_and_stress(u)
    r = u.domain.xs
    hr = 1.1 * 2 / (1 + 4 * r**2) + 0.6 * r
    h = hfun(r)
    closed = np.abs(hr**2 - (np.sin(h) / r) ** 2) / math.sqrt(2.0)
    ref = max(closed.max(), 1.0)
    assert np.abs(fb.stress_norm[:, 0] - closed).max() <= 5e-3 * ref


# ---------------------------------------------------------------------------
# tension
# ---------------------------------------------------------------------------

def test_constant_map_tension_zero():
    d = SurfaceDomain.flat_torus(24)
    u = constant_map(d, RoundSphere(), (0.0, 1.0, 0.0))
    assert np.abs(tension(u)).max() == 0.0


def test_identity_map_of_round_sphere_is_harmonic():
    # polar chart with the round conformal factor; u = (2 arctan r, theta)
    sups = []
    for nr, nth in ((128, 64), (256, 128)):
        d = SurfaceDomain.polar_disk(nr, nth, r_min=0.05, round_sphere_factor=True)
        R, TH = np.meshgrid(d.xs, d.ys, indexing="ij")
        u = MapState(d, RoundSphere(), RoundSphere.embed(2 * np.arctan(R), TH))
        sups.append(np.abs(tension(u)).max())
    assert refinement_order(*sups) >= 1.7
    assert sups[1] < 5e-3


def test_corotational_tension_matches_radial_formula():
    # oracle: substitute the ansatz symbolically; tau_r = h'' + h'/r
    # - k^2 sin h cos h / r^2, and 2 arctan r annihilates it
    sp = pytest.importorskip("sympy")
    r_s = sp.symbols("r", positive=True)
    h_s = 2 * sp.atan(r_s)
    tau_s = sp.simplify(sp.diff(h_s, r_s, 2) + sp.diff(h_s, r_s) / r_s
                        - sp.sin(h_s) * sp.cos(h_s) / r_s**2)
    assert tau_s == 0

    hfun = lambda R: 1.3 * np.arctan(1.5 * R)
    errs = []
    for nr, nth in ((200, 96), (400, 192)):
        u = corotational_polar_state(nr=nr, ntheta=nth, r_min=0.04, profile=hfun)
        tau = tension(u)
        r = u.domain.xs
        h = hfun(r)
        hr = 1.3 * 1.5 / (1 + (1.5 * r) ** 2)
        hrr = -1.3 * 1.5**3 * 2 * r / (1 + (1.5 * r) ** 2) ** 2
        tau_radial = hrr + hr / r - np.sin(h) * np.cos(h) / r**2
        # tension points along d/dpsi = (cos h cos th, cos h sin th, sin h)
        TH = u.domain.ys[None, :]
        e_psi = np.stack([np.cos(h)[:, None] * np.cos(TH),
                          np.cos(h)[:, None] * np.sin(TH),
                          np.sin(h)[:, None] * np.ones_like(TH)], axis=-1)
        tau_r_measured = np.sum(tau * e_psi, axis=-1)
        errs.append(np.abs(tau_r_measured - tau_radial[:, None]).max())
    assert refinement_order(*errs) >= 1.7
    assert errs[1] <= 1e-2 * max(np.abs(tau_radial).max(), 1.0)


def test_warped_chart_tension_and_pole_guard():
    d = SurfaceDomain.polar_disk(200, 96, r_min=0.05)
    R, TH = np.meshgrid(d.xs, d.ys, indexing="ij")
    ws = WarpedSphere.round()
    u = MapState(d, ws, np.stack([2 * np.arctan(R), TH % (2 * np.pi)], -1))
    tau = tension(u)
    # static bubble: residual is O(dr^2 + dtheta^2), dominated by the
    # angular factor sin(dtheta)/dtheta near r_min
    assert np.abs(tau[..., 0]).max() < 0.06
    d2 = SurfaceDomain.polar_disk(400, 192, r_min=0.05)
    R2, TH2 = np.meshgrid(d2.xs, d2.ys, indexing="ij")
    u2 = MapState(d2, ws, np.stack([2 * np.arctan(R2), TH2 % (2 * np.pi)], -1))
    assert np.abs(tension(u2)[..., 0]).max() < 0.25 * np.abs(tau[..., 0]).max() * 1.1
    # pole guard: push psi to the pole
    u_bad = MapState(d, ws, np.stack([1e-12 * R, TH % (2 * np.pi)], -1))
    with pytest.raises(ChartPoleError):
        tension(u_bad)


# ---------------------------------------------------------------------------
# energy reports and local energy
# ---------------------------------------------------------------------------

def test_kappa_equals_4pi_degree():
    # degree-1 and 2 holomorphic maps resolved on the round polar chart;
    # oracle: kappa = 4 pi deg from the pullback area
    d = SurfaceDomain.polar_disk(512, 192, r_min=0.04, r_max=25.0,
                                 spacing="geometric", round_sphere_factor=True)
    for deg in (1, 2):
        rep = energy_report(holomorphic_map(d, deg))
        assert rep.kappa == pytest.approx(4 * math.pi * deg, rel=0.01)
        assert rep.E_dbar < 1e-4
        assert rep.E == pytest.approx(4 * math.pi * deg, rel=0.01)


def test_z_squared_chart_energy():
    # E = 4 pi deg for holomorphic maps; w = z^2 on a chart capturing the
    # image up to the r-cutoff
    d = SurfaceDomain.polar_disk(512, 192, r_min=0.04, r_max=25.0,
                                 spacing="geometric", round_sphere_factor=False)
    rep = energy_report(holomorphic_map(d, 2))
    # flat-chart domain: energy is conformally invariant, same 8 pi total
    assert rep.E == pytest.approx(8 * math.pi, rel=0.01)


def test_constant_map_report_zeros():
    d = SurfaceDomain.flat_torus(16)
    rep = energy_report(constant_map(d, RoundSphere(), (1.0, 0.0, 0.0)))
    for fieldname in ("E", "E_del", "E_dbar", "kappa", "sup_du", "stress_Lq",
                      "tension_L2_sq"):
        assert getattr(rep, fieldname) == pytest.approx(0.0, abs=1e-13)


def test_local_energy_full_domain_and_additivity(smooth_map48):
    u = smooth_map48
    rep = energy_report(u)
    L = 2 * math.pi
    center = (L / 2, L / 2)
    # disjoint annuli partition a ball
    ball = local_energy(u, AnnulusSpec.ball(center, 1.2))
    parts = [local_energy(u, AnnulusSpec(center, a, b))
             for a, b in ((0.0, 0.4), (0.4, 0.8), (0.8, 1.2))]
    assert sum(parts) == pytest.approx(ball, rel=1e-10)
    assert ball < rep.E


def test_local_energy_radial_oracle():
    # concentrated bump: 1D radial quadrature oracle
    d = SurfaceDomain.unit_disk(401, half_width=1.0)
    s = 0.15
    X, Y = d.node_coordinates()
    R2 = X**2 + Y**2
    u = MapState(d, RoundSphere(), RoundSphere.from_chart((X + 1j * Y) / s))
    ball = local_energy(u, AnnulusSpec.ball((0.0, 0.0), 0.6))
    # closed form through e = 4 s^2 / (s^2 + r^2)^2: E(B_r) = 4 pi r^2/(s^2+r^2)
    oracle = 4 * math.pi * 0.6**2 / (s**2 + 0.6**2)
    assert ball == pytest.approx(oracle, rel=2e-3)


# ---------------------------------------------------------------------------
# Bochner and pointwise-identity residuals
# ---------------------------------------------------------------------------

def _flow_pair(n, safety=0.5, seed=3, amp=0.8):
    from hmflow.flow import FlowConfig, step_2d
    u = random_smooth_map(SurfaceDomain.flat_torus(n), seed=seed, amplitude=amp)
    cfg = FlowConfig(dt_safety=safety, integrator="euler")
    nxt, dt, _ = step_2d(u, cfg)
    return u, nxt, dt


def test_bochner_residual_constant_pair():
    from hmflow.fields import bochner_residual
    d = SurfaceDomain.flat_torus(16)
    u = constant_map(d, RoundSphere(), (0.0, 0.0, 1.0))
    v = u.copy()
    v.time = 0.01
    res = bochner_residual(u, v, 0.01)
    assert res.max_positive_dbar == 0.0
    assert res.max_abs_exact == 0.0


def test_bochner_residual_sign_and_refinement():
    from hmflow.fields import bochner_residual
    pos = []
    exact = []
    for n, saf in ((32, 0.5), (64, 0.125)):
        u, v, dt = _flow_pair(n, saf)
        res = bochner_residual(u, v, dt)
        pos.append(res.max_positive_dbar)
        exact.append(res.max_abs_exact)
        assert res.max_positive_full >= 0.0
    # the inequality-form positive part and the exact-identity residual both
    # shrink under (h, dt) refinement
    assert pos[1] <= 0.5 * pos[0] or pos[1] < 1e-8
    assert exact[1] <= 0.5 * exact[0]


def test_bochner_rejects_nonpositive_dt_and_wrong_domain():
    from hmflow.fields import bochner_residual
    d = SurfaceDomain.unit_disk(17)
    u = constant_map(d, RoundSphere(), (0.0, 0.0, 1.0))
    with pytest.raises(NotImplementedError):
        bochner_residual(u, u, 0.1)
    t = SurfaceDomain.flat_torus(16)
    ut = constant_map(t, RoundSphere(), (0.0, 0.0, 1.0))
    with pytest.raises(FieldsError):
        bochner_residual(ut, ut, 0.0)


def test_pointwise_energy_residual_cases():
    # constant pair: exactly zero
    d = SurfaceDomain.flat_torus(24)
    u = constant_map(d, RoundSphere(), (0.0, 0.0, 1.0))
    _, maxres = pointwise_energy_residual(u, u.copy(), 0.01)
    assert maxres == 0.0

    # stationary harmonic pair (geodesic wrap): time and tension terms vanish
    X, _ = d.node_coordinates()
    vals = np.stack([np.cos(X), np.sin(X), np.zeros_like(X)], -1)
    uh = MapState(d, RoundSphere(), vals)
    _, maxres = pointwise_energy_residual(uh, uh.copy(), 0.01)
    assert maxres < 1e-10

    # generic flow: residual shrinks under joint (h^2, dt) refinement
    res = []
    for n, saf in ((32, 0.5), (64, 0.125)):
        up, un, dt = _flow_pair(n, saf)
        _, m = pointwise_energy_residual(up, un, dt)
        res.append(m)
    assert res[1] <= 0.5 * res[0]


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def test_csv_exports(tmp_path, smooth_map48):
    fb = hopf_and_stress(smooth_map48)
    fb.tension = tension(smooth_map48, fb)
    fb.tension_norm_sq = tension_norm_sq(smooth_map48, fb.tension)
    p1 = tmp_path / "fields.csv"
    fieldbundle_to_csv(smooth_map48, fb, p1)
    lines = p1.read_text().splitlines()
    assert lines[0].startswith("#")
    assert len(lines) == 2 + 48 * 48

    rep = energy_report(smooth_map48)
    p2 = tmp_path / "reports.csv"
    reports_to_csv([rep], p2)
    assert "kappa" in p2.read_text().splitlines()[1]
