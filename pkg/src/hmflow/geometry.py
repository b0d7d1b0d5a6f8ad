"""Discrete domain surfaces and 2-sphere target metrics.

The domain is a conformally flat grid, metric g = sigma2 * (flat), in one of
three flavors:

* ``FlatTorus``   -- periodic square [0, L)^2, sigma2 == 1, K == 0.
* ``UnitDisk``    -- Cartesian chart [-1, 1]^2 with Dirichlet boundary at the
                     square edge (the chart contains the closed unit disk).
* ``PolarDisk``   -- (r, theta) grid on an annulus r in [r_min, r_max] with
                     Dirichlet rings, uniform or geometric r spacing.

Targets are 2-spheres: the round unit sphere (maps stored as unit 3-vectors)
or a rotationally warped sphere with metric dpsi^2 + phi(psi)^2 dtheta^2
(maps stored as (psi, theta) chart pairs).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline


class DomainKind(str, enum.Enum):
    FLAT_TORUS = "flat_torus"
    UNIT_DISK = "unit_disk"
    POLAR_DISK = "polar_disk"


class BoundaryKind(str, enum.Enum):
    PERIODIC = "periodic"
    DIRICHLET = "dirichlet"


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# exact circle/cell quadrature
# ---------------------------------------------------------------------------

def _corner_area(a: float, b: float, radius: float) -> float:
    """Area of [0,a] x [0,b] intersected with the disk of given radius, a,b >= 0."""
    if radius <= 0.0 or a <= 0.0 or b <= 0.0:
        return 0.0
    r2 = radius * radius
    if a * a + b * b <= r2:
        return a * b
    a = min(a, radius)
    b = min(b, radius)
    # integrate min(b, sqrt(r2 - x^2)) over x in [0, a]
    xs = math.sqrt(max(r2 - b * b, 0.0))  # crossing abscissa of y = b with the arc
    if a <= xs:
        return a * b

    def arc_integral(x):
        # antiderivative of sqrt(r2 - x^2)
        x = min(max(x, -radius), radius)
        return 0.5 * (x * math.sqrt(max(r2 - x * x, 0.0)) + r2 * math.asin(x / radius))

    return xs * b + arc_integral(a) - arc_integral(xs)


def _signed_corner(x: float, y: float, radius: float) -> float:
    s = 1.0
    if x < 0.0:
        s = -s
        x = -x
    if y < 0.0:
        s = -s
        y = -y
    return s * _corner_area(x, y, radius)


def disk_cell_area(x0: float, x1: float, y0: float, y1: float, radius: float) -> float:
    """Exact area of the rectangle [x0,x1] x [y0,y1] inside the disk of radius
    ``radius`` centered at the origin."""
    return (
        _signed_corner(x1, y1, radius)
        - _signed_corner(x0, y1, radius)
        - _signed_corner(x1, y0, radius)
        + _signed_corner(x0, y0, radius)
    )


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurfaceDomain:
    """Discretized conformally flat surface.

    For Cartesian kinds, ``xs``/``ys`` are the node coordinates along each
    axis and fields are indexed [iy, ix].  For PolarDisk, ``xs`` holds the
    radial grid, ``ys`` the angular grid, and fields are indexed [ir, itheta].

    ``conformal_factor`` is sigma^2 > 0 at each node (g = sigma^2 * flat) and
    ``gauss_curvature`` the domain curvature K at each node.
    """

    kind: DomainKind
    xs: np.ndarray
    ys: np.ndarray
    conformal_factor: np.ndarray
    gauss_curvature: np.ndarray
    boundary: BoundaryKind

    def __post_init__(self):
        if np.any(self.conformal_factor <= 0.0):
            raise GeometryError("conformal factor must be positive at every node")
        if self.kind is DomainKind.FLAT_TORUS and self.boundary is not BoundaryKind.PERIODIC:
            raise GeometryError("flat torus must be periodic")
        if self.kind is not DomainKind.FLAT_TORUS and self.boundary is not BoundaryKind.DIRICHLET:
            raise GeometryError("disk domains must have Dirichlet boundary")

    # -- constructors -------------------------------------------------------

    @staticmethod
    def flat_torus(n: int, length: float = 2.0 * math.pi) -> "SurfaceDomain":
        xs = np.arange(n) * (length / n)
        ones = np.ones((n, n))
        return SurfaceDomain(
            DomainKind.FLAT_TORUS, xs, xs.copy(), ones, np.zeros((n, n)),
            BoundaryKind.PERIODIC,
        )

    @staticmethod
    def unit_disk(n: int, half_width: float = 1.0) -> "SurfaceDomain":
        """Cartesian chart [-w, w]^2 (contains the unit disk for w >= 1)."""
        xs = np.linspace(-half_width, half_width, n)
        ones = np.ones((n, n))
        return SurfaceDomain(
            DomainKind.UNIT_DISK, xs, xs.copy(), ones, np.zeros((n, n)),
            BoundaryKind.DIRICHLET,
        )

    @staticmethod
    def polar_disk(
        nr: int,
        ntheta: int,
        r_min: float = 1e-3,
        r_max: float = 1.0,
        spacing: str = "uniform",
        round_sphere_factor: bool = False,
    ) -> "SurfaceDomain":
        """Annulus r in [r_min, r_max] with uniform theta grid.

        With ``round_sphere_factor`` the conformal factor is the stereographic
        round-sphere metric 4/(1+r^2)^2 (K == 1), so the grid resolves a
        region of the round 2-sphere; otherwise the disk is flat.
        """
        if not (0.0 < r_min < r_max):
            raise GeometryError("need 0 < r_min < r_max")
        if spacing == "uniform":
            rs = np.linspace(r_min, r_max, nr)
        elif spacing == "geometric":
            rs = np.geomspace(r_min, r_max, nr)
        else:
            raise GeometryError(f"unknown r spacing {spacing!r}")
        thetas = np.arange(ntheta) * (2.0 * math.pi / ntheta)
        if round_sphere_factor:
            sigma2 = np.broadcast_to(
                (4.0 / (1.0 + rs**2) ** 2)[:, None], (nr, ntheta)
            ).copy()
            curv = np.ones((nr, ntheta))
        else:
            sigma2 = np.ones((nr, ntheta))
            curv = np.zeros((nr, ntheta))
        return SurfaceDomain(
            DomainKind.POLAR_DISK, rs, thetas, sigma2, curv, BoundaryKind.DIRICHLET,
        )

    # -- grid helpers --------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return (len(self.ys), len(self.xs)) if self.kind is not DomainKind.POLAR_DISK \
            else (len(self.xs), len(self.ys))

    @property
    def is_cartesian(self) -> bool:
        return self.kind in (DomainKind.FLAT_TORUS, DomainKind.UNIT_DISK)

    @property
    def spacing(self) -> tuple:
        """(hx, hy) for Cartesian grids; (min dr, dtheta) for polar."""
        if self.kind is DomainKind.FLAT_TORUS:
            h = self.xs[1] - self.xs[0]
            return (h, h)
        if self.kind is DomainKind.UNIT_DISK:
            return (self.xs[1] - self.xs[0], self.ys[1] - self.ys[0])
        dr = np.diff(self.xs)
        return (float(dr.min()), float(self.ys[1] - self.ys[0]))

    @property
    def min_length_scale(self) -> float:
        """Smallest physical mesh length (nodewise flat spacing times the
        local conformal scale), used for CFL limits and mesh floors."""
        sig = np.sqrt(self.conformal_factor)
        if self.is_cartesian:
            return float(min(self.spacing) * sig.min())
        dr = np.empty(len(self.xs))
        dr[:-1] = np.diff(self.xs)
        dr[-1] = dr[-2]
        dth = float(self.ys[1] - self.ys[0])
        local = np.minimum(dr, self.xs * dth)[:, None] * sig
        return float(local.min())

    def node_coordinates(self) -> tuple:
        """(X, Y) Cartesian coordinates of all nodes, shaped like fields."""
        if self.is_cartesian:
            X, Y = np.meshgrid(self.xs, self.ys, indexing="xy")
            return X, Y
        R, TH = np.meshgrid(self.xs, self.ys, indexing="ij")
        return R * np.cos(TH), R * np.sin(TH)

    def node_weights(self) -> np.ndarray:
        """Quadrature weights: area under g of the cell owned by each node."""
        if self.kind is DomainKind.FLAT_TORUS:
            h = self.xs[1] - self.xs[0]
            return self.conformal_factor * h * h
        if self.kind is DomainKind.UNIT_DISK:
            h = self.xs[1] - self.xs[0]
            wx = np.full(len(self.xs), h)
            wx[0] = wx[-1] = h / 2.0
            return self.conformal_factor * np.outer(wx, wx)
        # polar: exact flat cell areas, sigma^2 at nodes
        rs = self.xs
        edges = np.empty(len(rs) + 1)
        edges[1:-1] = 0.5 * (rs[1:] + rs[:-1])
        edges[0], edges[-1] = rs[0], rs[-1]
        ring = 0.5 * (edges[1:] ** 2 - edges[:-1] ** 2)
        dth = 2.0 * math.pi / len(self.ys)
        return self.conformal_factor * (ring * dth)[:, None]

    def interior_mask(self) -> np.ndarray:
        """True at nodes evolved by the flow (False on Dirichlet boundaries)."""
        mask = np.ones(self.shape, dtype=bool)
        if self.boundary is BoundaryKind.DIRICHLET:
            mask[0, :] = mask[-1, :] = False
            if self.kind is DomainKind.UNIT_DISK:
                mask[:, 0] = mask[:, -1] = False
        return mask

    def distances_from(self, p: tuple) -> np.ndarray:
        """Distance of every node from the point p = (x, y), in chart units.

        On the torus the displacement is wrapped into the fundamental domain.
        """
        X, Y = self.node_coordinates()
        dx, dy = X - p[0], Y - p[1]
        if self.kind is DomainKind.FLAT_TORUS:
            L = len(self.xs) * (self.xs[1] - self.xs[0])
            dx = (dx + L / 2.0) % L - L / 2.0
            dy = (dy + L / 2.0) % L - L / 2.0
        return np.hypot(dx, dy)

    def domain_radius_bound(self) -> float:
        """Largest annulus radius the domain supports around an interior point."""
        if self.kind is DomainKind.FLAT_TORUS:
            L = len(self.xs) * (self.xs[1] - self.xs[0])
            return L / 2.0
        if self.kind is DomainKind.UNIT_DISK:
            return float(self.xs[-1])
        return float(self.xs[-1])


@dataclass(frozen=True)
class AnnulusSpec:
    """Annulus r_inner <= dist(x, center) <= r_outer around ``center`` (chart
    coordinates).  A ball is the r_inner == 0 case."""

    center: tuple
    r_inner: float
    r_outer: float

    def __post_init__(self):
        if not (0.0 <= self.r_inner < self.r_outer):
            raise GeometryError(
                f"need 0 <= r < rho, got r={self.r_inner}, rho={self.r_outer}"
            )

    @staticmethod
    def ball(center: tuple, radius: float) -> "AnnulusSpec":
        return AnnulusSpec(center, 0.0, radius)


def annulus_weights(domain: SurfaceDomain, spec: AnnulusSpec) -> np.ndarray:
    """Quadrature weights for the annulus: per-node area under g of the part
    of each node cell inside the annulus.

    Cartesian grids use the exact circle/rectangle intersection area, so the
    total weight converges to the annulus area at second order.  PolarDisk
    supports origin-centered annuli exactly; off-center annuli fall back to
    whole-cell membership.
    """
    cx, cy = spec.center
    if domain.is_cartesian:
        xs, ys = domain.xs, domain.ys
        hx = xs[1] - xs[0]
        hy = ys[1] - ys[0]
        if domain.kind is DomainKind.FLAT_TORUS:
            L = len(xs) * hx
            if spec.r_outer > L / 2.0:
                raise GeometryError("annulus exceeds half the torus period")
            dx = (xs - cx + L / 2.0) % L - L / 2.0
            dy = (ys - cy + L / 2.0) % L - L / 2.0
        else:
            dx, dy = xs - cx, ys - cy
        # cell edges relative to the center; edge cells are half-width
        x0 = np.maximum(dx - hx / 2.0, dx.min() if domain.kind is DomainKind.UNIT_DISK else -np.inf)
        x1 = np.minimum(dx + hx / 2.0, dx.max() if domain.kind is DomainKind.UNIT_DISK else np.inf)
        y0 = np.maximum(dy - hy / 2.0, dy.min() if domain.kind is DomainKind.UNIT_DISK else -np.inf)
        y1 = np.minimum(dy + hy / 2.0, dy.max() if domain.kind is DomainKind.UNIT_DISK else np.inf)
        if domain.kind is DomainKind.FLAT_TORUS:
            x0, x1, y0, y1 = dx - hx / 2.0, dx + hx / 2.0, dy - hy / 2.0, dy + hy / 2.0
        X0, Y0 = np.meshgrid(x0, y0, indexing="xy")
        X1, Y1 = np.meshgrid(x1, y1, indexing="xy")
        area = np.maximum(X1 - X0, 0.0) * np.maximum(Y1 - Y0, 0.0)
        # nearest and farthest distance of each cell to the center classify
        # interior/exterior cells; only circle-straddling cells need the
        # exact intersection formula
        nx = np.clip(0.0, X0, X1)
        ny = np.clip(0.0, Y0, Y1)
        dmin = np.hypot(nx, ny)
        dmax = np.hypot(np.maximum(np.abs(X0), np.abs(X1)),
                        np.maximum(np.abs(Y0), np.abs(Y1)))
        frac = np.zeros_like(area)
        full = (dmin >= spec.r_inner) & (dmax <= spec.r_outer)
        frac[full] = area[full]
        straddle = ~full & (dmin < spec.r_outer) & (dmax > spec.r_inner)
        for j, i in np.argwhere(straddle):
            a, b = float(X0[j, i]), float(X1[j, i])
            lo, hi = float(Y0[j, i]), float(Y1[j, i])
            if b <= a or hi <= lo:
                continue
            outer = disk_cell_area(a, b, lo, hi, spec.r_outer)
            inner = disk_cell_area(a, b, lo, hi, spec.r_inner) if spec.r_inner > 0 else 0.0
            frac[j, i] = max(outer - inner, 0.0)
        return frac * domain.conformal_factor

    # polar disk
    if abs(cx) < 1e-14 and abs(cy) < 1e-14:
        rs = domain.xs
        edges = np.empty(len(rs) + 1)
        edges[1:-1] = 0.5 * (rs[1:] + rs[:-1])
        edges[0], edges[-1] = rs[0], rs[-1]
        lo = np.clip(edges[:-1], spec.r_inner, spec.r_outer)
        hi = np.clip(edges[1:], spec.r_inner, spec.r_outer)
        ring = 0.5 * np.maximum(hi**2 - lo**2, 0.0)
        dth = 2.0 * math.pi / len(domain.ys)
        return domain.conformal_factor * (ring * dth)[:, None]
    dist = domain.distances_from(spec.center)
    inside = (dist >= spec.r_inner) & (dist <= spec.r_outer)
    return np.where(inside, domain.node_weights(), 0.0)


def annulus_nodes(domain: SurfaceDomain, spec: AnnulusSpec):
    """(flat node indices, weights) of the nodes carrying annulus quadrature
    weight.  Raises if the annulus captures no nodes."""
    w = annulus_weights(domain, spec)
    idx = np.flatnonzero(w.ravel() > 0.0)
    if idx.size == 0:
        raise GeometryError("annulus contains no grid cells")
    return idx, w.ravel()[idx]


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoundSphere:
    """Unit round 2-sphere, maps stored as unit vectors in R^3.

    The complex structure is J v = v x u, oriented so the stereographic
    chart map w(z) = z is holomorphic (e_dbar == 0) and has kappa = +4 pi.
    """

    curvature_bound: float = 1.0  # sup of Gauss curvature

    kind = "round_sphere"
    value_dim = 3

    def gauss_curvature(self, point=None) -> float:
        return 1.0

    @staticmethod
    def embed(psi, theta):
        """(psi, theta) -> unit vector; psi = 0 is the chart origin pole."""
        sp = np.sin(psi)
        return np.stack(
            [sp * np.cos(theta), sp * np.sin(theta), -np.cos(psi)], axis=-1
        )

    @staticmethod
    def from_chart(w):
        """Inverse stereographic chart: complex w -> unit vector."""
        w = np.asarray(w)
        d = 1.0 + np.abs(w) ** 2
        return np.stack(
            [2.0 * w.real / d, 2.0 * w.imag / d, (np.abs(w) ** 2 - 1.0) / d], axis=-1
        )

    @staticmethod
    def to_chart(u):
        """Unit vector -> complex chart value (singular at the north pole)."""
        return (u[..., 0] + 1j * u[..., 1]) / (1.0 - u[..., 2])

    @staticmethod
    def distance(u, v):
        """Great-circle distance between unit vectors."""
        return np.arccos(np.clip(np.sum(u * v, axis=-1), -1.0, 1.0))

    diameter = math.pi


@dataclass(frozen=True)
class WarpedSphere:
    """Rotationally symmetric sphere dpsi^2 + phi(psi)^2 dtheta^2 on
    [0, psi_max], maps stored as (psi, theta) chart pairs.

    The profile is held as a cubic spline; curvature is -phi''/phi with the
    pole limit -phi'''(0)/phi'(0).
    """

    psi_max: float
    profile: CubicSpline
    curvature_bound: float = field(default=float("nan"))

    kind = "warped_sphere"
    value_dim = 2
    _POLE_TOL = 1e-6

    def __post_init__(self):
        psi = np.linspace(0.0, self.psi_max, 2001)
        vals = self.profile(psi)
        if np.any(vals[1:-1] <= 0.0):
            raise GeometryError("warp profile must be positive on the open interval")
        for where, want, got in (
            ("phi(0)", 0.0, vals[0]),
            (f"phi(psi_max)", 0.0, vals[-1]),
            ("phi'(0)", 1.0, float(self.profile(0.0, 1))),
            ("phi'(psi_max)", -1.0, float(self.profile(self.psi_max, 1))),
        ):
            if abs(got - want) > 1e-6:
                raise GeometryError(f"warp profile fails smooth closing: {where} = {got}")
        if math.isnan(self.curvature_bound):
            k = self.gauss_curvature(psi)
            object.__setattr__(self, "curvature_bound", float(np.max(k)))

    @classmethod
    def from_function(cls, phi: Callable, psi_max: float = math.pi, samples: int = 2001):
        psi = np.linspace(0.0, psi_max, samples)
        return cls.from_table(psi, phi(psi))

    @classmethod
    def from_table(cls, psi: Sequence, phi: Sequence):
        psi = np.asarray(psi, dtype=float)
        phi = np.asarray(phi, dtype=float)
        if psi.ndim != 1 or psi.size < 4 or np.any(np.diff(psi) <= 0):
            raise GeometryError("warp table needs >= 4 strictly increasing psi samples")
        spline = CubicSpline(psi, phi, bc_type="natural")
        return cls(psi_max=float(psi[-1]), profile=spline)

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", comments="#")
        if data.ndim != 2 or data.shape[1] != 2:
            raise GeometryError("warp CSV must have two columns: psi, phi(psi)")
        return cls.from_table(data[:, 0], data[:, 1])

    @classmethod
    def round(cls, samples: int = 12001):
        """phi = sin psi, which reproduces the round sphere."""
        return cls.from_function(np.sin, math.pi, samples)

    def phi(self, psi):
        return self.profile(psi)

    def phi_prime(self, psi):
        return self.profile(psi, 1)

    def _pole_curvature(self, end: float) -> float:
        """K at a warp pole by the limit rule: K extends evenly in the pole
        distance, so a fourth-order Richardson step from interior values
        evaluates the limit without touching the noisy spline third
        derivative."""
        delta = max(0.02 * self.psi_max, 40.0 * self.psi_max / max(len(self.profile.x), 2))
        s1 = end + delta if end == 0.0 else end - delta
        s2 = end + 2 * delta if end == 0.0 else end - 2 * delta
        k1 = -float(self.profile(s1, 2) / self.profile(s1))
        k2 = -float(self.profile(s2, 2) / self.profile(s2))
        return (4.0 * k1 - k2) / 3.0

    def gauss_curvature(self, psi):
        """K = -phi''/phi, with the symmetric pole limit at both ends."""
        psi = np.asarray(psi, dtype=float)
        if np.any(~np.isfinite(psi)):
            raise GeometryError("non-finite psi passed to curvature evaluator")
        out = np.empty(psi.shape)
        near0 = psi < self._POLE_TOL
        near1 = psi > self.psi_max - self._POLE_TOL
        mid = ~(near0 | near1)
        out[mid] = -self.profile(psi[mid], 2) / self.profile(psi[mid])
        if near0.any():
            out[near0] = self._pole_curvature(0.0)
        if near1.any():
            out[near1] = self._pole_curvature(self.psi_max)
        if np.any(~np.isfinite(out)):
            raise GeometryError("curvature evaluator produced non-finite values")
        return out if out.shape else float(out)

    def distance(self, a, b):
        """Intrinsic distance, conservatively estimated through the pole
        distance |psi_a - psi_b| and the worst-case angular leg."""
        dpsi = np.abs(a[..., 0] - b[..., 0])
        dth = np.abs((a[..., 1] - b[..., 1] + math.pi) % (2 * math.pi) - math.pi)
        phimax = np.maximum(self.profile(a[..., 0]), self.profile(b[..., 0]))
        return np.minimum(dpsi + phimax * dth, self.diameter)

    @property
    def diameter(self):
        return self.psi_max


def curvature_tensor_at(target, point):
    """Sectional (Gauss) curvature of the target at a point.

    For complex one-dimensional targets this scalar determines the whole
    curvature tensor, so no index bookkeeping is needed.
    """
    if isinstance(target, RoundSphere):
        return 1.0
    if isinstance(target, WarpedSphere):
        psi = point[0] if isinstance(point, (tuple, list, np.ndarray)) and np.ndim(point) else point
        psi = float(psi)
        if not (0.0 <= psi <= target.psi_max):
            raise GeometryError(f"psi = {psi} outside chart [0, {target.psi_max}]")
        return float(target.gauss_curvature(psi))
    raise TypeError(f"unknown target {target!r}")


def check_nonneg_curvature(target, samples: int = 512, tol: float = 1e-9):
    """(passes, min curvature found) for the nonnegative-curvature hypothesis.

    For 2-sphere targets nonnegative holomorphic bisectional curvature is
    just Gauss curvature >= 0.
    """
    if samples < 2:
        raise GeometryError("need at least 2 curvature samples")
    if isinstance(target, RoundSphere):
        return True, 1.0
    psi = np.linspace(0.0, target.psi_max, samples)
    k = target.gauss_curvature(psi)
    kmin = float(np.min(k))
    return kmin >= -tol, kmin
