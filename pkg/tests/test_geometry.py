import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmflow.geometry import (
    AnnulusSpec,
    GeometryError,
    RoundSphere,
    SurfaceDomain,
    WarpedSphere,
    annulus_nodes,
    annulus_weights,
    check_nonneg_curvature,
    curvature_tensor_at,
    disk_cell_area,
)


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

def test_flat_torus_invariants():
    d = SurfaceDomain.flat_torus(32)
    assert np.all(d.conformal_factor == 1.0)
    assert np.all(d.gauss_curvature == 0.0)
    assert d.node_weights().sum() == pytest.approx((2 * math.pi) ** 2, rel=1e-12)


def test_conformal_factor_must_be_positive():
    d = SurfaceDomain.flat_torus(8)
    with pytest.raises(GeometryError):
        SurfaceDomain(d.kind, d.xs, d.ys, 0.0 * d.conformal_factor,
                      d.gauss_curvature, d.boundary)


def test_polar_disk_total_area():
    d = SurfaceDomain.polar_disk(200, 96, r_min=1e-3)
    exact = math.pi * (1.0 - 1e-6)
    assert d.node_weights().sum() == pytest.approx(exact, rel=1e-12)


def test_polar_disk_geometric_spacing():
    d = SurfaceDomain.polar_disk(64, 32, r_min=0.01, spacing="geometric")
    ratios = d.xs[1:] / d.xs[:-1]
    assert np.allclose(ratios, ratios[0])


def test_round_sphere_factor_area():
    # stereographic chart of the round sphere: total area tends to 4 pi
    d = SurfaceDomain.polar_disk(600, 128, r_min=0.02, r_max=50.0,
                                 spacing="geometric", round_sphere_factor=True)
    assert d.node_weights().sum() == pytest.approx(4 * math.pi, rel=5e-3)
    assert np.all(d.gauss_curvature == 1.0)


def test_torus_wrapped_distance():
    d = SurfaceDomain.flat_torus(16)
    L = 2 * math.pi
    dist = d.distances_from((0.0, 0.0))
    # the farthest node is at the center of the fundamental domain
    assert dist.max() <= L / 2 * math.sqrt(2) + 1e-12
    assert dist[0, 1] == pytest.approx(L / 16)
    assert dist[0, 15] == pytest.approx(L / 16)  # wraps around


# ---------------------------------------------------------------------------
# annulus quadrature
# ---------------------------------------------------------------------------

def test_disk_cell_area_against_subsampling():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x0, y0 = rng.uniform(-1.5, 1.0, 2)
        dx, dy = rng.uniform(0.05, 0.8, 2)
        R = rng.uniform(0.2, 1.5)
        exact = disk_cell_area(x0, x0 + dx, y0, y0 + dy, R)
        xs = np.linspace(x0, x0 + dx, 400)
        ys = np.linspace(y0, y0 + dy, 400)
        X, Y = np.meshgrid(xs, ys)
        mc = np.mean(X**2 + Y**2 <= R**2) * dx * dy
        assert exact == pytest.approx(mc, abs=3e-3 * max(dx * dy, 0.01))


def test_annulus_area_unit_disk_chart():
    # U^1_{1/2} around the origin: area pi (1 - 1/4), exact cell intersections
    d = SurfaceDomain.unit_disk(101)
    w = annulus_weights(d, AnnulusSpec((0.0, 0.0), 0.5, 1.0))
    assert w.sum() == pytest.approx(math.pi * 0.75, rel=1e-12)


def test_annulus_full_torus_weight():
    d = SurfaceDomain.flat_torus(40)
    L = 2 * math.pi
    # a ball that is entirely inside the fundamental cell
    w = annulus_weights(d, AnnulusSpec((L / 2, L / 2), 0.0, 1.0))
    assert w.sum() == pytest.approx(math.pi, rel=1e-12)


def test_annulus_refinement_second_order():
    # off-grid center so cells straddle the circles; exact formula keeps the
    # total at machine precision anyway
    target = math.pi * (0.9**2 - 0.35**2)
    errs = []
    for n in (51, 101):
        d = SurfaceDomain.unit_disk(n)
        w = annulus_weights(d, AnnulusSpec((0.013, -0.021), 0.35, 0.9))
        errs.append(abs(w.sum() - target))
    assert errs[1] <= max(errs[0] / 4.0, 1e-12)


def test_annulus_nodes_empty_and_invalid():
    d = SurfaceDomain.unit_disk(41)
    with pytest.raises(GeometryError):
        AnnulusSpec((0, 0), 0.5, 0.5)   # r >= rho
    with pytest.raises(GeometryError):
        annulus_nodes(d, AnnulusSpec((5.0, 5.0), 0.01, 0.02))  # off-domain


def test_polar_origin_annulus_exact():
    d = SurfaceDomain.polar_disk(128, 64, r_min=0.05)
    w = annulus_weights(d, AnnulusSpec((0.0, 0.0), 0.3, 0.7))
    assert w.sum() == pytest.approx(math.pi * (0.49 - 0.09), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(
    r=st.floats(0.05, 0.4),
    rho=st.floats(0.45, 0.95),
    cx=st.floats(-0.2, 0.2),
)
def test_annulus_weights_nonnegative(r, rho, cx):
    d = SurfaceDomain.unit_disk(41)
    w = annulus_weights(d, AnnulusSpec((cx, 0.0), r, rho))
    assert w.min() >= 0.0
    assert w.sum() <= math.pi * rho**2 + 1e-9


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def test_round_sphere_chart_round_trip():
    rng = np.random.default_rng(1)
    w = rng.normal(size=50) + 1j * rng.normal(size=50)
    u = RoundSphere.from_chart(w)
    assert np.allclose(np.linalg.norm(u, axis=-1), 1.0)
    assert np.allclose(RoundSphere.to_chart(u), w)


def test_round_sphere_curvature():
    assert curvature_tensor_at(RoundSphere(), (0.3, 1.2)) == 1.0


def test_warp_sin_recovers_round_metric():
    # phi = sin reproduces the round sphere within 1e-8
    ws = WarpedSphere.round()
    pts = np.array([1e-12, 0.05, math.pi / 6, math.pi / 4, math.pi / 2,
                    3 * math.pi / 4, math.pi - 1e-12])
    assert np.abs(ws.gauss_curvature(pts) - 1.0).max() < 1e-8
    assert curvature_tensor_at(ws, math.pi / 4) == pytest.approx(1.0, abs=1e-8)
    ok, kmin = check_nonneg_curvature(ws)
    assert ok and kmin == pytest.approx(1.0, abs=1e-7)


def test_warped_curvature_against_symbolic_oracle():
    # oracle: sympy second derivative of phi = sin(psi) (1 + a sin^2 psi)
    sp = pytest.importorskip("sympy")
    psi_s = sp.symbols("psi")
    a = 0.1
    phi_s = sp.sin(psi_s) * (1 + a * sp.sin(psi_s) ** 2)
    K_s = -sp.diff(phi_s, psi_s, 2) / phi_s
    ws = WarpedSphere.from_function(
        lambda p: np.sin(p) * (1 + a * np.sin(p) ** 2), samples=12001)
    for p in (math.pi / 6, math.pi / 4, math.pi / 2, 3 * math.pi / 4):
        expect = float(K_s.subs(psi_s, p))
        assert curvature_tensor_at(ws, p) == pytest.approx(expect, abs=1e-6)


def test_check_nonneg_curvature_sign_cases():
    # frozen from the symbolic oracle: a = 0.1 keeps K >= 0.4002; a = 0.5
    # dips to -1.9998; the dumbbell a = -0.8 has a concave neck (K = -7)
    mk = lambda a: WarpedSphere.from_function(
        lambda p: np.sin(p) * (1 + a * np.sin(p) ** 2), samples=12001)
    ok1, k1 = check_nonneg_curvature(mk(0.1), 512)
    assert ok1 and k1 == pytest.approx(0.40002, abs=1e-3)
    ok2, k2 = check_nonneg_curvature(mk(0.5), 512)
    assert not ok2 and k2 == pytest.approx(-1.9998, abs=1e-2)
    ok3, _ = check_nonneg_curvature(mk(-0.8), 512)
    assert not ok3
    with pytest.raises(GeometryError):
        check_nonneg_curvature(mk(0.1), samples=1)


def test_warp_profile_validation():
    with pytest.raises(GeometryError):
        # phi'(0) = 1.2 violates smooth closing
        WarpedSphere.from_function(lambda p: np.sin(p) + 0.1 * np.sin(2 * p))
    with pytest.raises(GeometryError):
        WarpedSphere.from_table([0.0, 1.0], [0.0, 0.5])  # too few samples


def test_warp_profile_csv_round_trip(tmp_path):
    psi = np.linspace(0, math.pi, 2001)
    path = tmp_path / "warp.csv"
    np.savetxt(path, np.column_stack([psi, np.sin(psi)]), delimiter=",")
    ws = WarpedSphere.from_csv(path)
    assert ws.psi_max == pytest.approx(math.pi)
    assert float(ws.phi(1.0)) == pytest.approx(math.sin(1.0), abs=1e-9)


def test_curvature_rejects_out_of_chart():
    ws = WarpedSphere.round()
    with pytest.raises(GeometryError):
        curvature_tensor_at(ws, 4.0)
