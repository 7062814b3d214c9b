"""Ledger emission, mixture-compactness diagnostics, and sweep driving.

Everything here either measures a run (pure monitors) or writes plain
text files whose rows parse back exactly; nothing feeds back into the
solvers.  The sweep driver reruns a scenario factory across parameter
values and reports mismatch, ledger slack, support leakage, and the
mixture-compactness gap per replica, with observed orders fitted from
consecutive pairs.
"""

import os

import numpy as np

from . import fluid_solver as fluid
from . import coupling as cp
from .pressure import eval_pressure, eval_pressure_reg, helmholtz, RegularizedPressure


class DiagnosticsError(Exception):
    pass


class StudyError(DiagnosticsError):
    pass


# ---------------------------------------------------------------------------
# exact-round-trip text tables


def emit_table(path, columns, rows):
    """Write a comma-separated table whose floats survive reparsing exactly."""
    lines = [",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise DiagnosticsError("row width %d != %d columns" % (len(row), len(columns)))
        cells = []
        for v in row:
            if v is None:
                cells.append("")
            elif isinstance(v, str):
                cells.append(v)
            else:
                cells.append(repr(float(v)))
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_table(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise DiagnosticsError("empty table %r" % path)
    columns = tuple(lines[0].split(","))
    rows = []
    for ln in lines[1:]:
        row = []
        for tok in ln.split(","):
            if tok == "":
                row.append(None)
            else:
                try:
                    row.append(float(tok))
                except ValueError:
                    row.append(tok)
        rows.append(tuple(row))
    return columns, rows


def emit_ledger(path, ledger):
    emit_table(path, cp.LEDGER_COLUMNS, ledger.rows)


def emit_series(path, xs, ys, labels=("x", "y")):
    """Two-column whitespace data file (gnuplot-style, comment header)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape:
        raise DiagnosticsError("series lengths differ")
    lines = ["# %s %s" % labels]
    for x, y in zip(xs, ys):
        lines.append("%s %s" % (repr(float(x)), repr(float(y))))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_series(path):
    xs, ys = [], []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            a, b = ln.split()
            xs.append(float(a))
            ys.append(float(b))
    return np.array(xs), np.array(ys)


def write_run_meta(path, lines):
    """Echo of the effective configuration plus version and seed lines.

    Callers pass fully formatted "key = value" strings; this only fixes
    the envelope so every run.meta looks the same.
    """
    from . import __version__

    out = ["# shellflow run metadata", "code_version = %s" % __version__]
    out.extend(lines)
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# mixture compactness


def mixture_fraction(state):
    """Share of the primary species in the total density, 0 on vacuum."""
    sigma = state.rho + state.Z
    safe = np.where(sigma > 0.0, sigma, 1.0)
    return np.where(sigma > 0.0, state.rho / safe, 0.0)


def compactness_gap(fine, other, p=2.0):
    """Density-weighted p-distance between the two states' mixture shares.

    The weight is the first argument's total density, so vacuum regions
    of the reference state never contribute.
    """
    if p < 1.0:
        raise DiagnosticsError("compactness exponent must be >= 1")
    if fine.grid.cells != other.grid.cells or fine.grid.h != other.grid.h:
        raise DiagnosticsError("compactness gap needs states on one grid")
    d = fine.rho + fine.Z
    diff = np.abs(mixture_fraction(fine) - mixture_fraction(other))
    return float(fine.grid.integrate(d * diff**p))


class CompactnessMonitor:
    """Time series of the compactness gap between two runs' states."""

    def __init__(self, p=2.0):
        if p < 1.0:
            raise DiagnosticsError("compactness exponent must be >= 1")
        self.p = float(p)
        self.times = []
        self.values = []

    def record(self, t, fine, other):
        v = compactness_gap(fine, other, self.p)
        if not (v >= 0.0 and np.isfinite(v)):
            raise DiagnosticsError("compactness gap must be finite and nonnegative")
        self.times.append(float(t))
        self.values.append(v)
        return v

    def series(self):
        return list(zip(self.times, self.values))


def coarsen_state(state, factor):
    """Conservative block-average restriction of a state onto a 2x/4x/... coarser grid."""
    grid = state.grid
    factor = int(factor)
    if factor < 1 or any(n % factor for n in grid.cells):
        raise DiagnosticsError("coarsening factor must divide the cell counts")
    coarse_grid = fluid.FluidGrid(
        grid.origin,
        tuple(n // factor for n in grid.cells),
        grid.h * factor,
        bc=grid.bc,
        surface_axes=grid.surface_axes,
        embed_fill=grid.embed_fill,
    )

    def blocks(f):
        out = f
        for ax in range(grid.dim):
            shp = out.shape[:ax] + (out.shape[ax] // factor, factor) + out.shape[ax + 1 :]
            out = out.reshape(shp).mean(axis=ax + 1)
        return out

    rho = blocks(state.rho)
    Z = blocks(state.Z)
    u = np.stack([blocks(state.u[..., a]) for a in range(grid.dim)], axis=-1)
    return fluid.FluidState(coarse_grid, rho, Z, u, time=state.time)


def prolong_state(state, factor, fine_grid=None):
    """Constant-injection prolongation onto a factor-finer grid."""
    grid = state.grid
    factor = int(factor)
    if factor < 1:
        raise DiagnosticsError("prolongation factor must be positive")
    if fine_grid is None:
        fine_grid = fluid.FluidGrid(
            grid.origin,
            tuple(n * factor for n in grid.cells),
            grid.h / factor,
            bc=grid.bc,
            surface_axes=grid.surface_axes,
            embed_fill=grid.embed_fill,
        )
    block = np.ones((factor,) * grid.dim)
    rho = np.kron(state.rho, block)
    Z = np.kron(state.Z, block)
    u = np.stack([np.kron(state.u[..., a], block) for a in range(grid.dim)], axis=-1)
    return fluid.FluidState(fine_grid, rho, Z, u, time=state.time)


# ---------------------------------------------------------------------------
# interface mismatch monitor


def trace_mismatch(state, shell):
    """Squared surface distance between the fluid trace and the shell motion."""
    ref = shell.ref
    v = fluid.compute_trace(state, ref, shell.eta)
    nu_r = state.grid.restrict_vector(ref.nu)
    diff = v - shell.w[..., None] * nu_r
    return float(ref.grid.integrate(np.sum(diff * diff, axis=-1)))


# ---------------------------------------------------------------------------
# pressure-law residual monitor


def fopde_residual_scan(law_or_reg, n=200, seed=0, step=1e-5, rho_lo=0.05, rho_hi=2.0):
    """Worst relative defect of rho dH/drho + Z dH/dZ - H = P over the cone."""
    rng = np.random.default_rng(seed)
    rho = rng.uniform(rho_lo, rho_hi, n)
    s = rng.uniform(law_or_reg.a_lower, law_or_reg.a_upper, n)
    Z = rho * s
    if isinstance(law_or_reg, RegularizedPressure):
        P = eval_pressure_reg(law_or_reg, rho, Z)
    else:
        P = eval_pressure(law_or_reg, rho, Z)
    worst = 0.0
    for i in range(n):
        r, z = rho[i], Z[i]
        dr = (helmholtz(law_or_reg, r + step, z) - helmholtz(law_or_reg, r - step, z)) / (2 * step)
        dz = (helmholtz(law_or_reg, r, z + step) - helmholtz(law_or_reg, r, z - step)) / (2 * step)
        resid = abs(r * dr + z * dz - helmholtz(law_or_reg, r, z) - P[i]) / (1.0 + abs(P[i]))
        worst = max(worst, resid)
    return worst


# ---------------------------------------------------------------------------
# sweep driver

STUDY_COLUMNS = (
    "parameter",
    "mismatch",
    "ledger_slack",
    "support_leakage",
    "exterior_share",
    "compactness_gap",
    "order",
)


def _replica_metrics(state):
    rows = state.ledger.rows
    slack = min(
        (row[-1] / (1.0 + abs(row[-3]) + abs(row[-2])) for row in rows), default=0.0
    )
    band = fluid.InterfaceBand(state.config.fluid_grid, state.config.ref, state.shell.eta)
    leakage = max(fluid.exterior_mass_fraction(state.fluid, band).values())
    total = state.ledger.diss_visc + state.diss_visc_exterior
    share = state.diss_visc_exterior / total if total > 0.0 else 0.0
    return float(state.mismatch_integral), float(slack), float(leakage), float(share)


def convergence_study(factory, values, slack_tol=1e-6, compare_p=2.0):
    """Rerun factory(value) across the sweep and tabulate the diagnostics.

    factory builds a fresh initialized run state for one parameter value;
    replicas advance to their own T_end.  A replica that violates an
    invariant or halts on degeneracy fails the whole study by name, since
    a truncated horizon would poison every comparison column.
    """
    values = list(values)
    if not values:
        raise StudyError("sweep needs at least one parameter value")
    rows = []
    finals = []
    for val in values:
        try:
            state = factory(val)
            cp.run(state, slack_tol=slack_tol)
        except Exception as err:
            raise StudyError("replica %r failed: %s" % (val, err))
        if state.halted is not None:
            raise StudyError("replica %r halted on degeneracy: %r" % (val, state.halted))
        mism, slack, leak, share = _replica_metrics(state)
        gap = None
        if finals and state.fluid.grid.cells == finals[-1].grid.cells:
            gap = compactness_gap(state.fluid, finals[-1], compare_p)
        rows.append([float(val), mism, slack, leak, share, gap, None])
        finals.append(state.fluid)
    for i in range(1, len(rows)):
        v0, v1 = rows[i - 1][0], rows[i][0]
        m0, m1 = rows[i - 1][1], rows[i][1]
        if m0 > 0.0 and m1 > 0.0 and v0 != v1:
            rows[i][-1] = float(np.log(m0 / m1) / np.log(v0 / v1))
    return [tuple(r) for r in rows]


def emit_study(path, rows):
    emit_table(path, STUDY_COLUMNS, rows)
