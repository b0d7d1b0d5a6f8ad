"""Experiment orchestration and the command-line interface.

Commands:

    hmflow run <config.json>        flow + enabled analyses, full artifact set
    hmflow validate <config.json>   parse and check admissibility only
    hmflow analyze <snapshot-dir> <analysis.json>   analyses on stored snapshots
    hmflow report <run-dir>         summarize a finished run

Exit codes: 0 all enabled checks pass, 1 an assertion failed, 2 config error.
All emitted CSV/JSON artifacts except manifest.json are byte-reproducible
for a fixed config (seeded generators, deterministic reductions,
single-threaded kernels).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .fields import reports_to_csv
from .flow import (
    CorotationalState,
    FlowConfig,
    MapState,
    SnapshotWriter,
    cdy_initial_state,
    load_snapshot_series,
    run_corotational,
    run_flow,
)
from .neck_decay import (
    SupersolutionParams,
    admissible_parameter_sweep,
    check_neck_decay,
    verify_supersolution,
)
from .scale_monitor import (
    ScaleTrace,
    estimate_blowup_time,
    fit_blowup_rate,
    scale_trace_from_corotational,
    scale_trace_from_snapshots,
)
from .bubble_tree import InsufficientConcentration, build_bubble_tree_corotational


@dataclass
class RunManifest:
    config_hash: str
    version: str
    wall_clock: float
    files: dict = field(default_factory=dict)       # name -> sha256
    checks: dict = field(default_factory=dict)      # name -> bool

    @property
    def all_passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({
                "config_hash": self.config_hash,
                "version": self.version,
                "wall_clock": float(self.wall_clock),
                "files": dict(self.files),
                "checks": {k: bool(v) for k, v in self.checks.items()},
            }, fh, indent=1, sort_keys=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(cfg: ExperimentConfig) -> Path:
    root = os.environ.get("HMFLOW_OUTPUT_ROOT", ".")
    out = Path(root) / cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Flow, monitors, neck and bubble analyses per the config; writes every
    artifact under the output directory and records pass/fail checks."""
    t_start = time.time()
    out = _out_dir(cfg)
    manifest = RunManifest(cfg.config_hash(), __version__, 0.0)
    mon = cfg.monitors()
    eps = mon.get("eps", 0.1 * cfg.eps0)
    q = mon.get("q", 2.0)

    trace = None
    corot_trace = None
    template = None
    flow_cfg = cfg.flow_config()
    if flow_cfg is not None:
        init = cfg.initial_state()
        if isinstance(init, CorotationalState):
            template = init.copy()
            corot_trace = run_corotational(init, flow_cfg, q=q)
            reports = corot_trace.reports
        else:
            trace = run_flow(init, flow_cfg, q=q)
            reports = trace.reports
        reports_to_csv(reports, out / "energy_trace.csv")

        E = [r.E for r in reports]
        tol = flow_cfg.energy_identity_tol
        manifest.checks["energy_nonincreasing"] = all(
            E[i + 1] <= E[i] + tol * max(E[0], 1.0) for i in range(len(E) - 1))
        Edb = [r.E_dbar for r in reports]
        manifest.checks["e_dbar_nonincreasing"] = all(
            Edb[i + 1] <= Edb[i] + tol * max(E[0], 1.0) for i in range(len(Edb) - 1))
        if trace is not None and len(trace.segment_starts) == 1:
            defect = trace.energy_identity_defect()
            manifest.checks["global_energy_identity"] = defect <= tol * max(E[0], 1e-30)

        snapdir = out / "snapshots"
        writer = SnapshotWriter(snapdir)
        if corot_trace is not None:
            stride = max(len(corot_trace.times) // 50, 1)
            for i in range(0, len(corot_trace.times), stride):
                writer.add(corot_trace.state_at(i, template))
        else:
            for s in trace.snapshots:
                writer.add(s)
        writer.finalize()

    # -- scale monitoring and rate fitting -----------------------------------
    if mon and (corot_trace is not None or trace is not None):
        rho = mon.get("rho", 0.5)
        if corot_trace is not None:
            st = scale_trace_from_corotational(corot_trace, template, eps, rho)
        else:
            center = tuple(mon.get("centers", [[0.0, 0.0]])[0])
            st = scale_trace_from_snapshots(
                trace.snapshots, trace.reports, eps, rho, center)
        st.to_csv(out / "scale_trace.csv")

        if corot_trace is not None and corot_trace.blowup_time is not None:
            # companion run at half resolution for the Richardson estimate
            spec = cfg.raw["initial_data"]
            n2 = (spec.get("n", 4097) - 1) // 2 + 1
            s2 = cdy_initial_state(n2, spec.get("boundary_value", 1.2 * math.pi),
                                   spec.get("bubble_scale", 0.06), spec.get("k", 1))
            tr2 = run_corotational(s2, flow_cfg, q=q)
            if tr2.blowup_time is not None:
                T = estimate_blowup_time(tr2.blowup_time, corot_trace.blowup_time)
                fit = fit_blowup_rate(st, T, lambda_cap=mon.get("lambda_cap"))
                fit.to_json(out / "rate_fit.json")
                manifest.checks["rate_fit_conclusive"] = not fit.inconclusive

        # -- neck decay on the blowup window ---------------------------------
        neck = cfg.raw.get("neck")
        if neck is not None and corot_trace is not None:
            sigma = max(r.stress_Lq for r in corot_trace.reports)
            delta = math.sqrt(corot_trace.reports[0].E_dbar)
            states, lams = [], []
            for i in range(len(corot_trace.times)):
                if st.lambdas[i] > st.mesh_floor:
                    states.append(corot_trace.state_at(i, template))
                    lams.append(st.lambdas[i])
            if states:
                rep = check_neck_decay(
                    states[-20:], lams[-20:], rho=rho, q=q, sigma=sigma,
                    nu=neck.get("nu", 0.9), gamma=neck.get("gamma", 0.5),
                    eps=eps, delta=delta)
                rep.to_csv(out / "neck_decay.csv")
                manifest.checks["neck_constant_finite"] = bool(
                    np.isfinite(rep.C_stress) and np.isfinite(rep.C_dbar))

        # -- bubble tree ------------------------------------------------------
        bt = cfg.raw.get("bubble_tree")
        if bt is not None and corot_trace is not None \
                and corot_trace.blowup_time is not None:
            try:
                tree = build_bubble_tree_corotational(
                    corot_trace, template, eps=eps, rho=bt.get("rho", rho),
                    alphas=tuple(bt.get("alphas", (4.0, 8.0, 16.0, 32.0))),
                    betas=tuple(bt.get("betas", (0.8, 0.4, 0.2, 0.1))))
                tree.to_json(out / "bubble_tree.json")
                from .flow import write_snapshot
                for i, b in enumerate(tree.bubbles):
                    write_snapshot(out / f"bubble_{i:02d}.bin", b.state)
                    manifest.files[f"bubble_{i:02d}.bin"] = _sha256(out / f"bubble_{i:02d}.bin")
                manifest.checks["bubble_energy_quantized"] = all(
                    abs(b.energy / (4.0 * math.pi) - round(b.energy / (4.0 * math.pi)))
                    < 0.1 for b in tree.bubbles)
            except InsufficientConcentration:
                manifest.checks["bubble_extraction"] = False

    # -- supersolution sweep (analysis-only friendly) -------------------------
    sup = cfg.raw.get("supersolution")
    if sup is not None:
        grid = sup.get("grid", 512)
        triples = sup.get("triples")
        params = ([SupersolutionParams(t["gamma"], t["nu"], t["mu"], t.get("R", 0.01))
                   for t in triples] if triples
                  else admissible_parameter_sweep(sup.get("sweep", 10),
                                                  sup.get("R", 0.01)))
        reports = [verify_supersolution(p, grid, grid) for p in params]
        payload = [{
            "gamma": p.gamma, "nu": p.nu, "mu": p.mu, "R": p.R,
            "min_slack": r.min_slack, "boundary_sup": r.boundary_sup,
            "boundary_inf": r.boundary_inf,
            "envelope_constant": r.envelope_constant,
        } for p, r in zip(params, reports)]
        with open(out / "supersolution_report.json", "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        manifest.checks["supersolution_slack"] = all(
            r.min_slack >= -1e-6 for r in reports)

    for p in sorted(out.glob("*.csv")) + sorted(out.glob("*.json")):
        if p.name != "manifest.json":
            manifest.files[p.name] = _sha256(p)
    manifest.wall_clock = time.time() - t_start
    manifest.to_json(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def emit_plot_data(run_dir, kind: str) -> Path:
    """Tidy plot-ready CSV from a finished run.

    kinds: 'energy' (t, E, E_del, E_dbar, kappa), 'rate' (log(T-t) vs log
    lambda plus both model predictions), 'neck' (r, t, f, bound, ratio).
    """
    run = Path(run_dir)
    if kind == "energy":
        rows = _read_csv(run / "energy_trace.csv")
        out = run / "plot_energy.csv"
        with open(out, "w") as fh:
            fh.write("# energy trace for plotting: time, total/holomorphic/"
                     "anti-holomorphic energy, homotopy invariant kappa\n")
            fh.write("t,E,E_del,E_dbar,kappa\n")
            for r in rows:
                fh.write(f"{r['t']},{r['E']},{r['E_del']},{r['E_dbar']},{r['kappa']}\n")
        return out
    if kind == "rate":
        fit = json.loads((run / "rate_fit.json").read_text())
        rows = _read_csv(run / "scale_trace.csv")
        T = fit["T_used"]
        out = run / "plot_rate.csv"
        with open(out, "w") as fh:
            fh.write("# blowup rate data: log(T-t), log lambda, fitted power "
                     f"law (slope {fit['exponent']!r}), corotational-law prediction\n")
            fh.write("log_T_minus_t,log_lambda,power_fit,cdy_fit\n")
            for r in rows:
                t, lam = float(r["t"]), float(r["lambda"])
                if lam <= 0.0 or t >= T:
                    continue
                x = math.log(T - t)
                power = fit["exponent"] * x + fit["intercept"]
                cdy = math.log(fit["kappa_cdy"]) + x - 2.0 * math.log(abs(x))
                fh.write(f"{x!r},{math.log(lam)!r},{power!r},{cdy!r}\n")
        return out
    if kind == "neck":
        rows = _read_csv(run / "neck_decay.csv")
        out = run / "plot_neck.csv"
        with open(out, "w") as fh:
            fh.write("# neck decay: radius, time, angular energy f, "
                     "sqrt(eps) envelope bound, ratio\n")
            fh.write("r,t,f,bound,ratio\n")
            for r in rows:
                bound = float(r["bound_f"])
                ratio = float(r["f"]) / bound if bound > 0 else float("nan")
                fh.write(f"{r['r']},{r['t']},{r['f']},{r['bound_f']},{ratio!r}\n")
        return out
    raise ValueError(f"unknown plot kind {kind!r}")


def _read_csv(path: Path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    cols = lines[0].split(",")
    return [dict(zip(cols, ln.split(","))) for ln in lines[1:]]


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv: Optional[List[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="hmflow",
                                 description="harmonic map flow laboratory")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_val = sub.add_parser("validate", help="validate a config file")
    p_val.add_argument("config")
    p_an = sub.add_parser("analyze", help="run analyses on stored snapshots")
    p_an.add_argument("snapshot_dir")
    p_an.add_argument("analysis")
    p_rep = sub.add_parser("report", help="summarize a finished run")
    p_rep.add_argument("run_dir")
    args = ap.parse_args(argv)

    if args.cmd in ("run", "validate"):
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(exc, file=sys.stderr)
            return 2
        if args.cmd == "validate":
            print(f"{args.config}: valid (hash {cfg.config_hash()[:12]})")
            return 0
        manifest = run_experiment(cfg)
        for name, ok in sorted(manifest.checks.items()):
            print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        print(f"artifacts under {_out_dir(cfg)} ({manifest.wall_clock:.1f}s)")
        return 0 if manifest.all_passed else 1

    if args.cmd == "analyze":
        try:
            cfg = load_config(args.analysis)
        except ConfigError as exc:
            print(exc, file=sys.stderr)
            return 2
        snaps = load_snapshot_series(args.snapshot_dir)
        out = _out_dir(cfg)
        mon = cfg.monitors()
        eps = mon.get("eps", 0.1 * cfg.eps0)
        rho = mon.get("rho", 0.5)
        if isinstance(snaps[0], CorotationalState):
            from .flow import CorotationalTrace, corotational_report
            tr = CorotationalTrace(dt=0.0)
            for s in snaps:
                tr.times.append(s.time)
                tr.profiles.append(s.h)
                tr.reports.append(corotational_report(s))
            st = scale_trace_from_corotational(tr, snaps[0], eps, rho)
        else:
            from .fields import energy_report
            reports = [energy_report(s) for s in snaps]
            center = tuple(mon.get("centers", [[0.0, 0.0]])[0])
            st = scale_trace_from_snapshots(snaps, reports, eps, rho, center)
        st.to_csv(out / "scale_trace.csv")
        print(f"scale trace over {len(snaps)} snapshots -> {out/'scale_trace.csv'}")
        return 0

    run = Path(args.run_dir)
    man = json.loads((run / "manifest.json").read_text())
    print(f"run {run}  (version {man['version']}, {man['wall_clock']:.1f}s, "
          f"config {man['config_hash'][:12]})")
    for name, ok in sorted(man["checks"].items()):
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    for name in sorted(man["files"]):
        print(f"  {name}  sha256:{man['files'][name][:16]}")
    return 0 if all(man["checks"].values()) else 1


if __name__ == "__main__":
    sys.exit(main())
