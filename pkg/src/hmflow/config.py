"""Experiment configuration: JSON schema, total validation, deterministic
hashing.

Validation is collected, not short-circuited: ``validate_config`` returns
every violation it can find (inadmissible supersolution exponents, eps >=
eps0, rho >= R0, malformed initial data, ...) so a bad file is rejected
before any compute starts.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .geometry import RoundSphere, SurfaceDomain, WarpedSphere
from .fields import (
    MapState,
    holomorphic_map,
    perturbed_holomorphic_map,
    random_smooth_map,
)
from .flow import CorotationalState, FlowConfig, FlowError, cdy_initial_state
from .neck_decay import SupersolutionParams
from .scale_monitor import EPS0_ROUND_SPHERE


class ConfigError(ValueError):
    def __init__(self, violations: List[str]):
        super().__init__("invalid experiment config:\n  - " + "\n  - ".join(violations))
        self.violations = violations


_DOMAIN_KINDS = {"flat_torus", "unit_disk", "polar_disk"}
_TARGET_KINDS = {"round_sphere", "warped_sphere"}
_INITIAL_KINDS = {"holomorphic", "perturbed_holomorphic", "random_smooth", "corotational"}


@dataclass
class ExperimentConfig:
    """Validated experiment description (see ``validate_config`` for the
    accepted JSON surface)."""

    raw: dict
    name: str
    output_dir: str
    eps0: float = EPS0_ROUND_SPHERE

    # -- constructed objects -------------------------------------------------

    def domain(self) -> Optional[SurfaceDomain]:
        d = self.raw.get("domain")
        if d is None:
            return None
        kind = d["kind"]
        if kind == "flat_torus":
            return SurfaceDomain.flat_torus(d.get("n", 96), d.get("length", 2 * math.pi))
        if kind == "unit_disk":
            return SurfaceDomain.unit_disk(d.get("n", 129), d.get("half_width", 1.0))
        return SurfaceDomain.polar_disk(
            d.get("nr", 256), d.get("ntheta", 128), d.get("r_min", 1e-2),
            d.get("r_max", 1.0), d.get("spacing", "uniform"),
            d.get("round_sphere_factor", False),
        )

    def target(self):
        t = self.raw.get("target", {"kind": "round_sphere"})
        if t["kind"] == "round_sphere":
            return RoundSphere()
        if "profile_csv" in t:
            return WarpedSphere.from_csv(t["profile_csv"])
        return WarpedSphere.round()

    def initial_state(self):
        spec = self.raw["initial_data"]
        kind = spec["kind"]
        if kind == "corotational":
            return cdy_initial_state(
                spec.get("n", 4097),
                spec.get("boundary_value", 1.2 * math.pi),
                spec.get("bubble_scale", 0.06),
                spec.get("k", 1),
            )
        dom = self.domain()
        if kind == "holomorphic":
            return holomorphic_map(dom, spec.get("degree", 1))
        if kind == "perturbed_holomorphic":
            return perturbed_holomorphic_map(
                dom, spec.get("degree", 1), spec.get("amplitude", 0.1),
                spec.get("seed", 0))
        return random_smooth_map(
            dom, self.target(), spec.get("seed", 0),
            spec.get("amplitude", 0.9), spec.get("modes", 2))

    def flow_config(self) -> Optional[FlowConfig]:
        f = self.raw.get("flow")
        if f is None:
            return None
        return FlowConfig(**{k: v for k, v in f.items()})

    def monitors(self) -> dict:
        return self.raw.get("monitors", {})

    def R0(self) -> float:
        """Largest admissible annulus radius: a quarter of the domain
        diameter unless overridden."""
        if "R0" in self.raw:
            return float(self.raw["R0"])
        dom = self.domain()
        if dom is None:
            return 0.5
        return dom.domain_radius_bound() / 2.0

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode()
        ).hexdigest()


def validate_config(raw: dict) -> List[str]:
    """Every violation found in the raw config dict (empty when valid)."""
    bad: List[str] = []
    if not isinstance(raw, dict):
        return ["config must be a JSON object"]

    dom = raw.get("domain")
    corot = raw.get("initial_data", {}).get("kind") == "corotational"
    if dom is None and not corot and raw.get("flow") is not None:
        bad.append("missing domain (required unless the run is corotational or analysis-only)")
    if dom is not None:
        if dom.get("kind") not in _DOMAIN_KINDS:
            bad.append(f"domain.kind must be one of {sorted(_DOMAIN_KINDS)}")
        elif dom["kind"] == "polar_disk":
            if not (0.0 < dom.get("r_min", 1e-2) < dom.get("r_max", 1.0)):
                bad.append("polar_disk needs 0 < r_min < r_max")
            if dom.get("spacing", "uniform") not in ("uniform", "geometric"):
                bad.append("polar_disk spacing must be 'uniform' or 'geometric'")

    tgt = raw.get("target")
    if tgt is None:
        if raw.get("flow") is not None:
            bad.append("missing target (required for flow runs)")
    elif tgt.get("kind") not in _TARGET_KINDS:
        bad.append(f"unknown target kind (expected one of {sorted(_TARGET_KINDS)})")
    elif tgt["kind"] == "warped_sphere" and "profile_csv" in tgt:
        if not Path(tgt["profile_csv"]).exists():
            bad.append(f"target.profile_csv does not exist: {tgt['profile_csv']}")

    init = raw.get("initial_data")
    if raw.get("flow") is not None:
        if init is None:
            bad.append("missing initial_data for a flow run")
        elif init.get("kind") not in _INITIAL_KINDS:
            bad.append(f"initial_data.kind must be one of {sorted(_INITIAL_KINDS)}")
        elif init["kind"] == "corotational":
            h1 = init.get("boundary_value", 1.2 * math.pi)
            if not (math.pi < h1 < 2.0 * math.pi):
                bad.append(f"corotational boundary_value = {h1} outside (pi, 2 pi)")

    flow = raw.get("flow")
    if flow is not None:
        try:
            FlowConfig(**flow)
        except (FlowError, TypeError) as exc:
            bad.append(f"flow config: {exc}")

    eps0 = raw.get("eps0", EPS0_ROUND_SPHERE)
    mon = raw.get("monitors")
    if mon is not None:
        eps = mon.get("eps", 0.1 * eps0)
        if not (0.0 < eps < eps0):
            bad.append(f"monitors.eps = {eps} not inside (0, eps0 = {eps0:.6g})")
        rho = mon.get("rho")
        if rho is not None:
            R0 = raw.get("R0")
            if R0 is None and dom is not None:
                kind = dom.get("kind")
                if kind == "flat_torus":
                    R0 = dom.get("length", 2 * math.pi) / 4.0
                elif kind == "unit_disk":
                    R0 = dom.get("half_width", 1.0) / 2.0
                else:
                    R0 = dom.get("r_max", 1.0) / 2.0
            if R0 is None:
                R0 = 0.5
            if rho >= R0:
                bad.append(f"monitors.rho = {rho} >= R0 = {R0:.6g}")
        q = mon.get("q", 2.0)
        if q < 1.0:
            bad.append(f"monitors.q = {q} must be >= 1")

    neck = raw.get("neck")
    if neck is not None:
        try:
            p = SupersolutionParams(
                neck.get("gamma", 0.5), neck.get("nu", 0.9),
                neck.get("mu", 0.5), neck.get("R", 0.01))
            for v in p.violations():
                bad.append(f"neck params: {v}")
        except TypeError as exc:
            bad.append(f"neck params: {exc}")

    sup = raw.get("supersolution")
    if sup is not None:
        for trip in sup.get("triples", []):
            p = SupersolutionParams(trip["gamma"], trip["nu"], trip["mu"],
                                    trip.get("R", 0.01))
            for v in p.violations():
                bad.append(f"supersolution triple {trip}: {v}")

    if "output_dir" in raw and not isinstance(raw["output_dir"], str):
        bad.append("output_dir must be a string")
    return bad


def load_config(path) -> ExperimentConfig:
    """Parse and fully validate a JSON experiment file; raises ConfigError
    carrying every violation found."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"invalid JSON: {exc}"])
    bad = validate_config(raw)
    if bad:
        raise ConfigError(bad)
    return ExperimentConfig(
        raw=raw,
        name=raw.get("name", path.stem),
        output_dir=raw.get("output_dir", "runs/" + raw.get("name", path.stem)),
        eps0=raw.get("eps0", EPS0_ROUND_SPHERE),
    )
