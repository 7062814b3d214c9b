"""Command-line front end: sectioned config parsing and subcommands.

The config format is flat key=value lines under [section] headers; every
violation is collected and reported in one pass, naming the constraint
it breaks.  Subcommands exit 0 on success, 2 on a degeneracy halt (a
regular physical outcome, distinguished from failures), and 1 on
anything else.
"""

import argparse
import os
import sys


def _cap_threads():
    cap = os.environ.get("FSI_THREADS")
    if cap:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, cap)


_cap_threads()  # must land before the first numpy import

import numpy as np

from .geometry import ParamGrid, build_reference, GeometryError
from .pressure import PressureLaw, RegularizedPressure, PressureError, audit_hypotheses
from .shell_energy import ElasticityParams
from . import fluid_solver as fluid
from . import structure_solver as struct
from . import coupling as cp
from . import diagnostics_io as dg


class ConfigTextError(Exception):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


SCENARIOS = ("rest", "pressure-pulse", "shell-pluck", "manufactured")

# section -> key -> (parser, default); None default means required
_SCHEMA = {
    "geometry": {
        "kind": (str, "flat-slab"),
        "n1": (int, 24),
        "n2": (int, 4),
        "length1": (float, 2.0),
        "length2": (float, 1.0),
        "z0": (float, 0.0),
        "R": (float, 1.0),
        "r": (float, 0.8),
        "band_lo": (float, None),
        "band_hi": (float, None),
    },
    "law": {
        "gamma": (float, 3.0),
        "beta": (float, 2.0),
        "a_lower": (float, 0.5),
        "a_upper": (float, 2.0),
    },
    "scheme": {
        "tau": (float, 0.002),
        "T_end": (float, 0.02),
        "K_substeps": (int, 10),
        "delta": (float, 0.2),
        "omega": (float, None),
        "zeta": (float, 0.0),
        "kappa": (float, 8.0),
        "case": (str, "I"),
        "dt_fluid_cap": (float, None),
    },
    "shell": {
        "lambda": (float, 4.0),
        "mu": (float, 2.0),
        "thickness": (float, 0.25),
    },
    "fluid": {
        "cells": (int, 24),
        "depth": (float, 1.0),
        "mu_visc": (float, 1.0),
        "lam_visc": (float, 0.0),
        "visc_limit": (float, 0.05),
        "force_floor": (float, 1e-8),
    },
    "scenario": {
        "name": (str, "rest"),
        "amplitude": (float, 0.05),
        "density": (float, 0.7),
        "ratio": (float, 1.0),
        "pulse_width": (float, 0.25),
    },
    "output": {
        "out": (str, "."),
        "seed": (int, 0),
    },
    "study": {
        "parameter": (str, None),
        "values": (str, None),
    },
}


class CliConfig:
    """Parsed and validated run description; plain attributes per section."""

    def __init__(self, sections):
        self.sections = sections

    def get(self, section, key):
        return self.sections[section][key]


def parse_config(text):
    """Parse sectioned key=value text, collecting every violation."""
    sections = {s: {k: d for k, (_, d) in keys.items()} for s, keys in _SCHEMA.items()}
    violations = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SCHEMA:
                violations.append("line %d: unknown section [%s]" % (lineno, current))
                current = None
            continue
        if "=" not in line:
            violations.append("line %d: expected key = value, got %r" % (lineno, line))
            continue
        if current is None:
            violations.append("line %d: key outside any known section" % lineno)
            continue
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in _SCHEMA[current]:
            violations.append("unknown key: [%s] %s" % (current, key))
            continue
        cast = _SCHEMA[current][key][0]
        try:
            sections[current][key] = cast(val)
        except ValueError:
            violations.append(
                "bad value: [%s] %s = %r (expected %s)" % (current, key, val, cast.__name__)
            )

    violations.extend(_validate(sections))
    if violations:
        raise ConfigTextError(violations)
    return CliConfig(sections)


def _validate(s):
    """Every module-level precondition, checked here so one pass reports all."""
    v = []
    law, sch, geo, flu, sc, sh = (
        s["law"],
        s["scheme"],
        s["geometry"],
        s["fluid"],
        s["scenario"],
        s["shell"],
    )
    if law["gamma"] <= 0 or law["beta"] <= 0:
        v.append("pressure growth: gamma and beta must be positive")
    if not (0.0 < law["a_lower"] < law["a_upper"]):
        v.append("comparability cone: need 0 < a_lower < a_upper")
    top = max(law["gamma"], law["beta"])
    if sch["case"] not in ("I", "II"):
        v.append("case flag: must be I or II")
    elif sch["case"] == "I" and top <= 2.0:
        v.append("case-I exponent gate: max(gamma, beta) > 2 required")
    elif sch["case"] == "II":
        if top < 2.0:
            v.append("case-II exponent gate: max(gamma, beta) >= 2 required")
        if sch["zeta"] <= 0.0:
            v.append("case-II dissipation: zeta > 0 required")
    if sch["tau"] <= 0 or sch["T_end"] <= 0:
        v.append("window splitting: tau and T_end must be positive")
    if not (0.0 < sch["delta"] < 1.0):
        v.append("penalty strength: delta must lie in (0,1)")
    if sch["omega"] is not None and not (0.0 < sch["omega"] <= 1.0):
        v.append("extension floor: omega must lie in (0,1]")
    if sch["zeta"] < 0.0:
        v.append("parabolic dissipation: zeta must be nonnegative")
    if sch["kappa"] < max(4.0, law["gamma"], law["beta"]) + 1.0 - 1e-12:
        v.append("barrier exponent: kappa >= max(4, gamma, beta) + 1 required")
    if sch["K_substeps"] < 10:
        v.append("structure sub-stepping: K_substeps >= 10 required")
    if geo["kind"] not in ("flat-slab", "torus"):
        v.append("geometry kind: must be flat-slab or torus")
    if geo["kind"] == "torus" and not (geo["R"] > geo["r"] > 0):
        v.append("torus radii: R > r > 0 required")
    if geo["n1"] < 4 or geo["n2"] < 4:
        v.append("surface grid: at least 4 nodes per direction")
    if flu["cells"] < 4:
        v.append("fluid grid: at least 4 cells per axis")
    if flu["mu_visc"] <= 0:
        v.append("viscosity: mu_visc must be positive")
    if not (0.0 < flu["visc_limit"] <= 0.2):
        v.append("viscous step fraction: visc_limit must lie in (0, 0.2]")
    if sc["name"] not in SCENARIOS:
        v.append("scenario name: must be one of %s" % (SCENARIOS,))
    if sc["density"] < 0:
        v.append("scenario density: must be nonnegative")
    if not (law["a_lower"] <= sc["ratio"] <= law["a_upper"]):
        v.append("scenario ratio: Z0/rho0 must sit inside the comparability cone")
    if sh["thickness"] <= 0 or sh["mu"] <= 0:
        v.append("shell: thickness and mu must be positive")
    return v


# ---------------------------------------------------------------------------
# scenario construction


def _build_geometry(geo):
    if geo["kind"] == "flat-slab":
        grid = ParamGrid(geo["n1"], geo["n2"], geo["length1"] / geo["n1"], geo["length2"] / geo["n2"])
        band = None
        if geo["band_lo"] is not None and geo["band_hi"] is not None:
            band = (geo["band_lo"], geo["band_hi"])
        return build_reference("flat-slab", grid, band=band, z0=geo["z0"])
    grid = ParamGrid(geo["n1"], geo["n2"], 2 * np.pi / geo["n1"], 2 * np.pi / geo["n2"])
    band = None
    if geo["band_lo"] is not None and geo["band_hi"] is not None:
        band = (geo["band_lo"], geo["band_hi"])
    return build_reference("torus", grid, band=band, R=geo["R"], r=geo["r"])


def _build_fluid_grid(cfg, ref):
    geo = cfg.get("geometry", "kind")
    flu = cfg.sections["fluid"]
    if geo == "flat-slab":
        n = flu["cells"]
        length1 = cfg.get("geometry", "length1")
        return fluid.FluidGrid(
            origin=(0.0, -flu["depth"]),
            cells=(n, n),
            spacing=length1 / n,
            bc=("periodic", "wall"),
        )
    n = flu["cells"]
    R, r = cfg.get("geometry", "R"), cfg.get("geometry", "r")
    half = R + r + 0.2
    return fluid.FluidGrid(
        origin=(-half, -half, -(r + 0.2)),
        cells=(n, n, max(4, n // 2)),
        spacing=2.0 * half / n,
        bc=("wall",) * 3,
    )


def _scenario_fields(cfg, ref, grid):
    sc = cfg.sections["scenario"]
    name = sc["name"]
    shp = ref.grid.shape
    rho0 = np.zeros(grid.cells)
    Z0 = np.zeros(grid.cells)
    eta0 = np.zeros(shp)
    eta1 = np.zeros(shp)
    if name == "rest":
        return rho0, Z0, eta0, eta1
    d, q = sc["density"], sc["ratio"]
    rho0[:] = d
    Z0[:] = q * d
    if name == "shell-pluck":
        x = np.arange(ref.grid.n1) * ref.grid.h1 * 2 * np.pi / ref.grid.length1
        eta0 = sc["amplitude"] * np.sin(x)[:, None] * np.ones((1, ref.grid.n2))
    elif name == "pressure-pulse":
        centers = grid.centers()
        mids = [o + 0.5 * n * grid.h for o, n in zip(grid.origin, grid.cells)]
        r2 = sum((c - m) ** 2 for c, m in zip(centers, mids))
        bump = 1.0 + sc["amplitude"] * np.exp(-r2 / sc["pulse_width"] ** 2)
        rho0 *= bump
        Z0 *= bump
    elif name == "manufactured":
        centers = grid.centers()
        x = centers[0]
        span = grid.cells[0] * grid.h
        rho0 *= 1.0 + 0.2 * np.sin(2 * np.pi * x / span)
        law = cfg.sections["law"]
        mid = 0.5 * (law["a_lower"] + law["a_upper"])
        swing = 0.25 * (law["a_upper"] - law["a_lower"])
        Z0 = rho0 * (mid + swing * np.cos(2 * np.pi * x / span))
    return rho0, Z0, eta0, eta1


def build_state(cfg):
    """Turn a validated CliConfig into an initialized run state."""
    sch = cfg.sections["scheme"]
    law = PressureLaw(
        gamma=cfg.get("law", "gamma"),
        beta=cfg.get("law", "beta"),
        a_lower=cfg.get("law", "a_lower"),
        a_upper=cfg.get("law", "a_upper"),
    )
    scheme = cp.SchemeParams(
        tau=sch["tau"],
        T_end=sch["T_end"],
        K_substeps=sch["K_substeps"],
        dt_fluid_cap=sch["dt_fluid_cap"],
        delta=sch["delta"],
        omega=sch["omega"],
        zeta=sch["zeta"],
        kappa=sch["kappa"],
        case_flag=sch["case"],
    )
    ref = _build_geometry(cfg.sections["geometry"])
    grid = _build_fluid_grid(cfg, ref)
    rho0, Z0, eta0, eta1 = _scenario_fields(cfg, ref, grid)
    config = cp.RunConfig(
        ref,
        grid,
        law,
        scheme,
        cfg.get("shell", "lambda"),
        cfg.get("shell", "mu"),
        cfg.get("shell", "thickness"),
        mu_visc=cfg.get("fluid", "mu_visc"),
        lam_visc=cfg.get("fluid", "lam_visc"),
        force_floor=cfg.get("fluid", "force_floor"),
        visc_limit=cfg.get("fluid", "visc_limit"),
        rho0=rho0,
        Z0=Z0,
        eta0=eta0,
        eta1=eta1,
    )
    return cp.initialize(config)


def _meta_lines(cfg, seed, extra=()):
    lines = ["seed = %d" % seed]
    for sec in sorted(cfg.sections):
        for key in sorted(cfg.sections[sec]):
            val = cfg.sections[sec][key]
            if val is not None:
                lines.append("%s.%s = %r" % (sec, key, val))
    lines.extend(extra)
    return lines


# ---------------------------------------------------------------------------
# subcommands


def _load_config(args):
    if not args.config:
        print("a --config file is required", file=sys.stderr)
        raise SystemExit(1)
    with open(args.config) as fh:
        text = fh.read()
    try:
        cfg = parse_config(text)
    except ConfigTextError as err:
        print("config rejected (%d violations):" % len(err.violations), file=sys.stderr)
        for item in err.violations:
            print("  - " + item, file=sys.stderr)
        raise SystemExit(1)
    if args.seed is not None:
        cfg.sections["output"]["seed"] = args.seed
    if args.out is not None:
        cfg.sections["output"]["out"] = args.out
    return cfg


def _outdir(cfg):
    out = cfg.get("output", "out")
    os.makedirs(out, exist_ok=True)
    return out


def cmd_run(args):
    cfg = _load_config(args)
    state = build_state(cfg)
    out = _outdir(cfg)
    seed = cfg.get("output", "seed")
    halt_path = os.path.join(out, "halt.ckpt")
    n_windows = args.windows
    cp.run(state, n_windows=n_windows, halt_checkpoint=halt_path)
    dg.emit_ledger(os.path.join(out, "ledger.csv"), state.ledger)
    rows = state.ledger.rows
    if rows:
        dg.emit_series(
            os.path.join(out, "energy.dat"),
            [r[0] for r in rows],
            [r[-3] for r in rows],
            labels=("t", "monitored_total"),
        )
    cp.save_checkpoint(os.path.join(out, "final.ckpt"), state)
    dg.write_run_meta(
        os.path.join(out, "run.meta"),
        _meta_lines(cfg, seed, extra=["windows_done = %d" % state.n]),
    )
    if state.halted is not None:
        print(
            "degeneracy halt (%s) after %d windows at t=%s"
            % (state.halted.kind, state.n, repr(state.n * state.config.scheme.tau))
        )
        if state.halted.node is not None:
            print("worst node: %s value %r" % (state.halted.node, state.halted.value))
        return 2
    snap = cp.total_energy(state)
    print(
        "completed %d windows; slack %r (lhs %r rhs %r)"
        % (state.n, snap["slack"], snap["lhs"], snap["rhs"])
    )
    return 0


def cmd_check_pressure(args):
    cfg = _load_config(args)
    law = PressureLaw(
        gamma=cfg.get("law", "gamma"),
        beta=cfg.get("law", "beta"),
        a_lower=cfg.get("law", "a_lower"),
        a_upper=cfg.get("law", "a_upper"),
    )
    seed = cfg.get("output", "seed")
    report = audit_hypotheses(law, seed=seed)
    print(report.as_text())
    worst = float(dg.fopde_residual_scan(law, n=200, seed=seed))
    worst_reg = float(
        dg.fopde_residual_scan(
            RegularizedPressure(law, cfg.get("scheme", "delta"), cfg.get("scheme", "kappa")),
            n=200,
            seed=seed + 1,
        )
    )
    print("free-energy defect (law): %r" % worst)
    print("free-energy defect (regularized): %r" % worst_reg)
    out = _outdir(cfg)
    report.to_csv(os.path.join(out, "pressure_audit.csv"))
    if worst > 1e-5 or worst_reg > 1e-5:
        print("pressure audit FAILED", file=sys.stderr)
        return 1
    return 0


def cmd_shell_demo(args):
    cfg = _load_config(args)
    ref = _build_geometry(cfg.sections["geometry"])
    el = ElasticityParams(
        cfg.get("shell", "lambda"),
        cfg.get("shell", "mu"),
        cfg.get("shell", "thickness"),
        delta_reg=cfg.get("scheme", "delta"),
        zeta=max(cfg.get("scheme", "zeta"), 0.05),
    )
    tau = cfg.get("scheme", "tau")
    windows = args.windows or int(np.ceil(cfg.get("scheme", "T_end") / tau))
    x = np.arange(ref.grid.n1) * ref.grid.h1 * 2 * np.pi / ref.grid.length1
    eta0 = cfg.get("scenario", "amplitude") * np.sin(x)[:, None] * np.ones((1, ref.grid.n2))
    state = struct.ShellState(ref, eta0, np.zeros(ref.grid.shape))
    zero_trace = np.zeros(ref.grid.shape)
    times, totals = [], []
    offset = 0.0  # carries each window's ledgered totals across the reset
    for _ in range(windows):
        state, records, _ = struct.advance_window(
            state, zero_trace, tau, el, K=cfg.get("scheme", "K_substeps")
        )
        for row in records:
            total = offset + row[1] + row[2] + row[3] + row[4] + row[5] + row[6]
            times.append(row[0])
            totals.append(total)
        offset += records[-1][4] + records[-1][5] + records[-1][6]
    out = _outdir(cfg)
    dg.emit_series(
        os.path.join(out, "shell_energy.dat"), times, totals, labels=("t", "budget")
    )
    # stored energy plus everything ledgered may only fall (the velocity
    # jump of each implicit sub-step is paid but not tabulated), so the
    # budget must be non-increasing; any rise means a broken balance
    scale = 1.0 + abs(totals[0])
    rise = max(
        (totals[i + 1] - totals[i] for i in range(len(totals) - 1)), default=0.0
    )
    deficit = totals[0] - totals[-1]
    print(
        "sub-steps: %d  worst budget rise: %r  total deficit: %r"
        % (len(times), rise, deficit)
    )
    if rise > 1e-9 * scale or deficit < -1e-9 * scale:
        print("shell energy budget rose beyond tolerance", file=sys.stderr)
        return 1
    return 0


def cmd_convergence_study(args):
    cfg = _load_config(args)
    param = cfg.get("study", "parameter")
    values_text = cfg.get("study", "values")
    if param is None or values_text is None:
        print("config needs a [study] section with parameter and values", file=sys.stderr)
        return 1
    if param not in ("tau", "delta"):
        print("study parameter must be tau or delta", file=sys.stderr)
        return 1
    values = [float(t) for t in values_text.split(",") if t.strip()]

    def factory(value):
        sub = CliConfig({k: dict(v) for k, v in cfg.sections.items()})
        sub.sections["scheme"][param] = value
        if param == "delta" and sub.sections["scheme"]["omega"] is not None:
            sub.sections["scheme"]["omega"] = value
        return build_state(sub)

    try:
        rows = dg.convergence_study(factory, values)
    except dg.StudyError as err:
        print("study failed: %s" % err, file=sys.stderr)
        return 1
    out = _outdir(cfg)
    dg.emit_study(os.path.join(out, "study.csv"), rows)
    dg.write_run_meta(
        os.path.join(out, "run.meta"),
        _meta_lines(cfg, cfg.get("output", "seed")),
    )
    header = "%-12s %-14s %-14s %-14s %-10s" % (
        "parameter",
        "mismatch",
        "worst_slack",
        "leakage",
        "order",
    )
    print(header)
    for row in rows:
        print(
            "%-12r %-14.6e %-14.3e %-14.3e %-10s"
            % (row[0], row[1], row[2], row[3], "-" if row[6] is None else "%.3f" % row[6])
        )
    return 0


def _verify_checks(state):
    """Re-assert every module invariant on a loaded checkpoint."""
    from .geometry import gamma_bar
    from .pressure import cone_contains
    from .shell_energy import koiter_energy_parts

    config = state.config
    checks = []
    rho, Z = state.fluid.rho, state.fluid.Z
    checks.append(("density nonnegativity", bool(np.all(rho >= 0.0) and np.all(Z >= 0.0))))
    checks.append(
        ("comparability cone", bool(np.all(cone_contains(config.law, rho, Z, slack=1e-12))))
    )
    sigma = rho + Z
    dead = sigma <= 1e-12
    checks.append(
        ("velocity support", bool(np.all(np.abs(state.fluid.u[dead]) == 0.0)))
    )
    lo, hi = config.ref.band
    margin = min(-lo, hi)
    checks.append(("tubular band", bool(np.max(np.abs(state.shell.eta)) < margin)))
    checks.append(
        ("shape factor", bool(np.min(gamma_bar(config.ref, state.shell.eta)) > 0.0))
    )
    stretch, bend, reg = koiter_energy_parts(config.ref, config.elasticity, state.shell.eta)
    checks.append(
        (
            "shell energy sign",
            bool(stretch >= 0.0 and bend >= 0.0 and reg >= 0.0 and np.isfinite(stretch + bend + reg)),
        )
    )
    rows = state.ledger.rows
    ok_cum = all(
        rows[i][col] <= rows[i + 1][col] + 1e-12
        for col in (6, 7, 8)
        for i in range(len(rows) - 1)
    )
    checks.append(("ledger cumulative monotonicity", bool(ok_cum)))
    ok_slack = all(
        row[-1] >= -1e-6 * (1.0 + abs(row[-3]) + abs(row[-2])) for row in rows
    )
    checks.append(("window energy inequality", bool(ok_slack)))
    checks.append(
        ("finite fields", bool(np.all(np.isfinite(rho)) and np.all(np.isfinite(Z)) and np.all(np.isfinite(state.fluid.u))))
    )
    return checks


def cmd_verify_invariants(args):
    state = cp.load_checkpoint(args.checkpoint)
    checks = _verify_checks(state)
    failed = [name for name, ok in checks if not ok]
    for name, ok in checks:
        print("%-32s %s" % (name, "ok" if ok else "VIOLATED"))
    if failed:
        print("violated: %s" % ", ".join(failed), file=sys.stderr)
        return 1
    print("all invariants hold (%d windows, t=%r)" % (state.n, state.time))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="shellflow",
        description="two-fluid shell-bounded flow simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a sectioned key=value config file")
        p.add_argument("--out", help="output directory (overrides [output] out)")
        p.add_argument("--seed", type=int, help="seed echoed into run.meta")
        p.add_argument("--windows", type=int, help="cap the number of windows")

    p_run = sub.add_parser("run", help="advance windows until T_end or a halt")
    common(p_run)
    p_chk = sub.add_parser("check-pressure", help="audit the configured pressure law")
    common(p_chk)
    p_demo = sub.add_parser("shell-demo", help="structure-only energy-budget demo")
    common(p_demo)
    p_study = sub.add_parser("convergence-study", help="sweep a parameter, tabulate rates")
    common(p_study)
    p_ver = sub.add_parser("verify-invariants", help="replay a checkpoint's invariants")
    p_ver.add_argument("checkpoint", help="checkpoint file to verify")

    args = parser.parse_args(argv)
    handlers = {
        "run": cmd_run,
        "check-pressure": cmd_check_pressure,
        "shell-demo": cmd_shell_demo,
        "convergence-study": cmd_convergence_study,
        "verify-invariants": cmd_verify_invariants,
    }
    try:
        return handlers[args.command](args)
    except (cp.CouplingError, fluid.FluidError, struct.StructureError, PressureError, GeometryError) as err:
        print("error: %s" % err, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
