"""Window-alternating orchestration of the shell and fluid sub-problems.

Each window of length tau advances the shell first, feeding it the fluid
trace recorded one window earlier; the fluid then advances over the same
window in equal stability-limited inner steps, relaxed inside the
interface band toward the fresh shell velocity.  The one-window lag is
what decouples the two solves.

The energy ledger mirrors that exchange: the structure consumes the
trace allowance its window was promised, and posts a matching allowance
for the next fluid window.  Summed over windows everything telescopes
except the two penalty mismatch forms, the cumulative dissipations, and
one trailing trace term for the not-yet-consumed final window; those sit
on the monitored left side against the initial-data right side.  The
inequality is asserted at every window end and a violation fails the
run, which is what makes it a testable property rather than a hope.
"""

import numpy as np
from scipy.ndimage import convolve1d

from .geometry import ParamGrid, build_reference, gamma_bar
from .pressure import PressureLaw, RegularizedPressure
from .shell_energy import ElasticityParams, koiter_energy_parts
from . import structure_solver as struct
from . import fluid_solver as fluid


class CouplingError(Exception):
    pass


class ConfigError(CouplingError):
    pass


# ---------------------------------------------------------------------------
# parameters


class SchemeParams:
    """Window length, penalty/regularization knobs, and the case gate."""

    def __init__(
        self,
        tau,
        T_end,
        K_substeps=10,
        dt_fluid_cap=None,
        delta=1e-2,
        omega=None,
        zeta=0.0,
        kappa=8.0,
        case_flag="I",
        drop_inertia_artifact=False,
    ):
        self.tau = float(tau)
        self.T_end = float(T_end)
        self.K_substeps = int(K_substeps)
        self.dt_fluid_cap = None if dt_fluid_cap is None else float(dt_fluid_cap)
        self.delta = float(delta)
        self.omega = self.delta if omega is None else float(omega)
        self.zeta = float(zeta)
        self.kappa = float(kappa)
        self.case_flag = case_flag
        self.drop_inertia_artifact = bool(drop_inertia_artifact)
        if self.tau <= 0 or self.T_end <= 0:
            raise ConfigError("tau and T_end must be positive")
        if self.K_substeps < 10:
            raise ConfigError("K_substeps must be at least 10")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("delta must lie in (0,1)")
        if not (0.0 < self.omega <= 1.0):
            raise ConfigError("omega must lie in (0,1]")
        if self.zeta < 0.0:
            raise ConfigError("zeta must be nonnegative")
        if case_flag not in ("I", "II"):
            raise ConfigError("case flag must be I or II")
        if case_flag == "II" and self.zeta <= 0.0:
            raise ConfigError("case II needs positive parabolic dissipation zeta")

    def validate_against_law(self, law):
        top = max(law.gamma, law.beta)
        if self.case_flag == "I" and not top > 2.0:
            raise ConfigError("case I needs max(gamma, beta) > 2")
        if self.case_flag == "II" and not top >= 2.0:
            raise ConfigError("case II needs max(gamma, beta) >= 2")
        floor = max(4.0, law.gamma, law.beta) + 1.0
        if self.kappa < floor - 1e-12:
            raise ConfigError("kappa must be at least max(4, gamma, beta) + 1")


def case_one_sweep(delta, tau, T_end, **kw):
    """Case-I sweep convention: the three small parameters move together."""
    return SchemeParams(
        tau, T_end, delta=delta, omega=delta, zeta=delta, case_flag="I", **kw
    )


def case_two_sweep(delta, zeta, tau, T_end, **kw):
    """Case-II sweep convention: zeta fixed, extension floor tied to delta."""
    return SchemeParams(
        tau, T_end, delta=delta, omega=delta, zeta=zeta, case_flag="II", **kw
    )


# ---------------------------------------------------------------------------
# mollification


def _bump_kernel(h, width):
    n = int(np.floor(width / h + 1e-12))
    if n <= 0:
        return np.array([1.0])
    x = np.arange(-n, n + 1) * h / width
    k = np.where(np.abs(x) < 1.0, np.exp(-1.0 / np.maximum(1.0 - x * x, 1e-300)), 0.0)
    return k / np.sum(k)


def mollify_surface(grid, f, width):
    """Periodic bump mollification of a parameter-grid field."""
    out = convolve1d(f, _bump_kernel(grid.h1, width), axis=0, mode="wrap")
    return convolve1d(out, _bump_kernel(grid.h2, width), axis=1, mode="wrap")


def mollify_cells(grid, f, width):
    """Bump mollification of a cell field, reflecting at wall axes."""
    out = f
    for ax in range(grid.dim):
        mode = "wrap" if grid.bc[ax] == "periodic" else "reflect"
        out = convolve1d(out, _bump_kernel(grid.h, width), axis=ax, mode=mode)
    return out


# ---------------------------------------------------------------------------
# ledger

LEDGER_COLUMNS = (
    "t",
    "fluid_kinetic",
    "fluid_helmholtz",
    "shell_kinetic",
    "koiter",
    "koiter_reg",
    "dissipation_visc",
    "dissipation_zeta",
    "penalty_mismatch",
    "penalty_trail",
    "lhs_total",
    "rhs_total",
    "slack",
)


class EnergyLedger:
    """Cumulative two-sided account of the window energy inequality."""

    def __init__(self, rhs_parts):
        self.rhs_parts = dict(rhs_parts)
        self.rhs_total = float(sum(rhs_parts.values()))
        self.diss_visc = 0.0
        self.diss_zeta = 0.0
        self.pen_mismatch = 0.0
        self.pen_trail = 0.0
        self.rows = []

    def live_total(self, parts):
        return (
            parts["fluid_kinetic"]
            + parts["fluid_helmholtz"]
            + parts["shell_kinetic"]
            + parts["koiter"]
            + parts["koiter_reg"]
        )

    def post_window(self, t, live_parts, dvisc, dzeta, dmismatch, trail):
        self.diss_visc += dvisc
        self.diss_zeta += dzeta
        self.pen_mismatch += dmismatch
        self.pen_trail = trail
        lhs = (
            self.live_total(live_parts)
            + self.diss_visc
            + self.diss_zeta
            + self.pen_mismatch
            + self.pen_trail
        )
        slack = self.rhs_total - lhs
        row = (
            t,
            live_parts["fluid_kinetic"],
            live_parts["fluid_helmholtz"],
            live_parts["shell_kinetic"],
            live_parts["koiter"],
            live_parts["koiter_reg"],
            self.diss_visc,
            self.diss_zeta,
            self.pen_mismatch,
            self.pen_trail,
            lhs,
            self.rhs_total,
            slack,
        )
        self.rows.append(row)
        return lhs, slack

    def snapshot(self):
        if not self.rows:
            return {"lhs": self.rhs_total, "rhs": self.rhs_total, "slack": 0.0}
        row = self.rows[-1]
        out = dict(zip(LEDGER_COLUMNS, row))
        out["lhs"] = out.pop("lhs_total")
        out["rhs"] = out.pop("rhs_total")
        return out


# ---------------------------------------------------------------------------
# configuration and state


class RunConfig:
    """Everything a run needs; shell elasticity is derived so the single
    regularization parameter delta cannot diverge between modules."""

    def __init__(
        self,
        ref,
        fluid_grid,
        law,
        scheme,
        shell_lambda,
        shell_mu,
        shell_thickness,
        mu_visc=1.0,
        lam_visc=0.0,
        force_floor=1e-8,
        visc_limit=0.05,
        rho0=None,
        Z0=None,
        u0=None,
        eta0=None,
        eta1=None,
    ):
        self.ref = ref
        self.fluid_grid = fluid_grid
        scheme.validate_against_law(law)
        self.law = law
        self.reg = RegularizedPressure(law, scheme.delta, scheme.kappa)
        self.scheme = scheme
        self.elasticity = ElasticityParams(
            shell_lambda,
            shell_mu,
            shell_thickness,
            delta_reg=scheme.delta,
            zeta=scheme.zeta,
        )
        self.mu_visc = float(mu_visc)
        self.lam_visc = float(lam_visc)
        self.force_floor = float(force_floor)
        # tighter-than-default viscous step fraction: a smaller inner dt
        # lowers the per-cell force gate, so more of the mollified front
        # feels stresses and pressure (see the fluid module's
        # force_support)
        self.visc_limit = float(visc_limit)
        shp = ref.grid.shape
        cells = fluid_grid.cells
        self.rho0 = np.zeros(cells) if rho0 is None else np.asarray(rho0, dtype=float)
        self.Z0 = np.zeros(cells) if Z0 is None else np.asarray(Z0, dtype=float)
        self.u0 = (
            np.zeros(cells + (fluid_grid.dim,))
            if u0 is None
            else np.asarray(u0, dtype=float)
        )
        self.eta0 = np.zeros(shp) if eta0 is None else np.asarray(eta0, dtype=float)
        self.eta1 = np.zeros(shp) if eta1 is None else np.asarray(eta1, dtype=float)


class RunState:
    def __init__(self, config, fluid_state, shell_state, trace, ledger, n=0):
        self.config = config
        self.fluid = fluid_state
        self.shell = shell_state
        self.trace = trace
        self.ledger = ledger
        self.n = int(n)
        self.halted = None
        self.window_records = []
        self.mismatch_integral = 0.0  # plain int_0^t |v - w nu|^2 over the surface
        self.diss_visc_exterior = 0.0  # the exterior slice of dissipation_visc

    @property
    def time(self):
        return self.n * self.config.scheme.tau


def _shell_kinetic(config, w):
    cf = 1.0 if config.scheme.drop_inertia_artifact else 1.0 - config.scheme.delta
    return 0.5 * cf * config.ref.grid.inner(w, w)


def _trace_norm2(config, trace):
    return config.ref.grid.integrate(np.sum(trace * trace, axis=-1))


def _live_parts(config, fluid_state, shell_state):
    fe = fluid.fluid_energy(fluid_state, config.reg, None)
    stretch, bend, reg = koiter_energy_parts(config.ref, config.elasticity, shell_state.eta)
    return {
        "fluid_kinetic": fe["kinetic"],
        "fluid_helmholtz": fe["helmholtz"],
        "shell_kinetic": _shell_kinetic(config, shell_state.w),
        "koiter": stretch + bend,
        "koiter_reg": reg,
    }


def initialize(config):
    """Mollify and confine the initial data, deposit the lagged trace,
    and open the ledger with the right side of the window inequality."""
    ref = config.ref
    grid = config.fluid_grid
    scheme = config.scheme
    law = config.law

    if np.any(config.rho0 < 0.0) or np.any(config.Z0 < 0.0):
        raise ConfigError("initial densities must be nonnegative")
    pos = config.rho0 > 0.0
    if np.any(config.Z0[pos] < law.a_lower * config.rho0[pos]) or np.any(
        config.Z0[pos] > law.a_upper * config.rho0[pos]
    ):
        raise ConfigError("initial phase densities violate the comparability cone")
    if np.any((config.rho0 == 0.0) & (config.Z0 > 0.0)):
        raise ConfigError("initial phase densities violate the comparability cone")

    eta0 = mollify_surface(ref.grid, config.eta0, scheme.delta)
    lo, hi = ref.band
    margin = min(-lo, hi)
    if float(np.max(np.abs(eta0))) >= margin:
        raise ConfigError("initial displacement leaves the tubular band")
    if float(np.min(gamma_bar(ref, eta0))) <= 0.0:
        raise ConfigError("initial displacement has nonpositive shape factor")

    band = fluid.InterfaceBand(grid, ref, eta0)
    rho = np.where(band.inside, mollify_cells(grid, config.rho0, scheme.delta), 0.0)
    Z = np.where(band.inside, mollify_cells(grid, config.Z0, scheme.delta), 0.0)
    u = np.where(band.inside[..., None], config.u0, 0.0)
    fluid_state = fluid.FluidState(grid, rho, Z, u, time=0.0)
    fluid_state.validate(law)

    shell_state = struct.ShellState(ref, eta0, config.eta1.copy(), time=0.0)
    trace = config.eta1[..., None] * grid.restrict_vector(ref.nu)

    live = _live_parts(config, fluid_state, shell_state)
    rhs_parts = dict(live)
    rhs_parts["trace_allowance"] = 0.5 * scheme.delta * _trace_norm2(config, trace)
    ledger = EnergyLedger(rhs_parts)
    return RunState(config, fluid_state, shell_state, trace, ledger)


# ---------------------------------------------------------------------------
# degeneracy


class DegeneracyStatus:
    def __init__(self, kind, node=None, value=None):
        self.kind = kind  # "ok" | "first-kind" | "second-kind"
        self.node = node
        self.value = value

    @property
    def ok(self):
        return self.kind == "ok"

    def __repr__(self):
        return "DegeneracyStatus(%r, node=%r, value=%r)" % (self.kind, self.node, self.value)


def degeneracy_check(state, ref=None, band_margin_frac=0.02, gamma_bar_floor=1e-3):
    """Classify a state (or bare displacement) against both degeneracy kinds."""
    if ref is None:
        eta, ref = state.shell.eta, state.config.ref
    else:
        eta = np.asarray(state)
    lo, hi = ref.band
    margin = min(-lo, hi)
    amax = np.abs(eta)
    node = np.unravel_index(int(np.argmax(amax)), eta.shape)
    worst = float(amax[node])
    if worst >= (1.0 - band_margin_frac) * margin:
        return DegeneracyStatus("first-kind", node, margin - worst)
    gb = gamma_bar(ref, eta)
    gnode = np.unravel_index(int(np.argmin(gb)), gb.shape)
    gmin = float(gb[gnode])
    if gmin <= gamma_bar_floor:
        return DegeneracyStatus("second-kind", gnode, gmin)
    return DegeneracyStatus("ok", None, gmin)


# ---------------------------------------------------------------------------
# window advance


def run_window(state, slack_tol=1e-6):
    """Advance one window: structure on the lagged trace, then fluid on the
    fresh shell data, then ledger accounting with the inequality check."""
    if state.halted is not None:
        raise CouplingError("run already halted: %r" % (state.halted,))
    config = state.config
    ref = config.ref
    grid = config.fluid_grid
    scheme = config.scheme
    tau = scheme.tau
    delta = scheme.delta
    pgrid = ref.grid

    pre = degeneracy_check(state.shell.eta, ref)
    if not pre.ok:
        state.halted = pre
        return state

    v_prev = state.trace
    v_prev_normal = fluid.trace_normal_speed(grid, v_prev, ref)

    try:
        # undamped inner iteration: the explicit predictor already sits
        # within O(dt^2) of the sub-step solution, so damping only slows
        # the tail; non-convergence still falls back to dt halving
        shell_new, srecords, sinfo = struct.advance_window(
            state.shell,
            v_prev_normal,
            tau,
            config.elasticity,
            K=scheme.K_substeps,
            drop_inertia_artifact=scheme.drop_inertia_artifact,
            theta=1.0,
        )
    except struct.DegeneracyError as err:
        kind = "first-kind" if err.kind == "band" else "second-kind"
        state.halted = DegeneracyStatus(kind)
        return state

    # fluid sweep over the window in equal inner steps
    t0 = state.n * tau
    fluid_state = state.fluid
    visc_probe = fluid.extend_viscosity(
        grid, ref, shell_new.eta, scheme.omega, mu=config.mu_visc, lam=config.lam_visc
    )
    dt_try = 0.9 * fluid.stable_dt(fluid_state, visc_probe, visc_limit=config.visc_limit)
    if scheme.dt_fluid_cap is not None:
        dt_try = min(dt_try, scheme.dt_fluid_cap)
    n_inner = max(1, int(np.ceil(tau / dt_try - 1e-12)))
    dt_f = tau / n_inner

    diss_window = 0.0
    diss_ext_window = 0.0  # share charged outside the moving domain
    for j in range(1, n_inner + 1):
        t_new = t0 + j * dt_f
        eta_t = struct.eval_displacement(sinfo, t_new)
        w_t = struct.eval_velocity(sinfo, t_new)
        band_t = fluid.InterfaceBand(grid, ref, eta_t)
        visc_t = fluid.extend_viscosity(
            grid, ref, eta_t, scheme.omega, mu=config.mu_visc, lam=config.lam_visc, band=band_t
        )
        # the ledgered dissipation covers exactly the cells where the
        # momentum step applies stresses: ungated rim cells do no funded
        # work, so an unrestricted quadrature would charge ghost
        # velocities the kinetic books never paid for
        sigma = fluid_state.rho + fluid_state.Z
        gated = fluid.force_support(sigma, visc_t, dt_f, grid.h, config.force_floor)
        dfield = fluid.viscous_dissipation_field(grid, fluid_state.u, visc_t)
        diss_window += dt_f * grid.integrate(np.where(gated, dfield, 0.0))
        # report-only monitor of the floor-weighted exterior dissipation
        # (scales with the extension floor omega); the ledger above charges
        # only cells whose momentum step applied stresses
        diss_ext_window += dt_f * grid.integrate(np.where(band_t.inside, 0.0, dfield))
        u_new = fluid.advance_momentum(
            fluid_state,
            visc_t,
            config.reg,
            (delta, tau, w_t),
            ref,
            eta_t,
            dt_f,
            band=band_t,
            force_floor=config.force_floor,
        )
        # densities ride the fresh velocity: the Helmholtz release then
        # funds the pressure kick inside the same step, which is what keeps
        # the first window from rest on the right side of the inequality
        kicked = fluid.FluidState(grid, fluid_state.rho, fluid_state.Z, u_new, time=t_new)
        rho, Z = fluid.advance_continuity(kicked, dt_f)
        fluid_state = fluid.FluidState(grid, rho, Z, u_new, time=t_new)
        fluid_state.validate(config.law)

    trace_new = fluid.compute_trace(fluid_state, ref, shell_new.eta)

    # penalty mismatch, both directions, in the surface measure:
    # the structure column is already delta/(2 tau) sum dt |w - v_prev nu|^2;
    # the fluid direction integrates the window-constant new trace against
    # the piecewise-constant shell velocity path
    nu_r = grid.restrict_vector(ref.nu)
    w_path = sinfo["w_path"]
    dts = sinfo["dt"]
    mism_raw = 0.0
    for m in range(1, w_path.shape[0]):
        diff = trace_new - w_path[m][..., None] * nu_r
        mism_raw += dts * pgrid.integrate(np.sum(diff * diff, axis=-1))
    mism_fluid = mism_raw * delta / (2.0 * tau)
    pen_struct = srecords[-1][5]
    dzeta = srecords[-1][4]

    trail = 0.5 * delta * _trace_norm2(config, trace_new)
    live = _live_parts(config, fluid_state, shell_new)
    t_end = (state.n + 1) * tau
    lhs, slack = state.ledger.post_window(
        t_end, live, diss_window, dzeta, pen_struct + mism_fluid, trail
    )
    scale = 1.0 + abs(lhs) + abs(state.ledger.rhs_total)
    if slack < -slack_tol * scale:
        raise CouplingError(
            "window energy inequality violated at t=%.6f: slack %.3e (scale %.3e)"
            % (t_end, slack, scale)
        )

    state.fluid = fluid_state
    state.shell = shell_new
    state.trace = trace_new
    state.n += 1
    state.window_records.extend(srecords)
    state.mismatch_integral += mism_raw
    state.diss_visc_exterior += diss_ext_window
    post = degeneracy_check(shell_new.eta, ref)
    if not post.ok:
        state.halted = post
    return state


def run(state, n_windows=None, slack_tol=1e-6, halt_checkpoint=None):
    """Advance windows until T_end, a degeneracy halt, or n_windows.

    A degeneracy halt is a regular outcome, not an error: the state at
    the last completed window is kept and, when halt_checkpoint names a
    path, dumped there so the maximal interval reached is on disk.
    """
    total = int(np.ceil(state.config.scheme.T_end / state.config.scheme.tau - 1e-12))
    while state.n < total and state.halted is None:
        if n_windows is not None and n_windows <= 0:
            break
        run_window(state, slack_tol=slack_tol)
        if n_windows is not None:
            n_windows -= 1
    if state.halted is not None and halt_checkpoint is not None:
        save_checkpoint(halt_checkpoint, state)
    return state


def total_energy(state):
    """Current two-sided ledger snapshot (right minus left is the slack)."""
    return state.ledger.snapshot()


# ---------------------------------------------------------------------------
# checkpoints


def _write_array(out, name, arr):
    arr = np.asarray(arr, dtype=float)
    out.append("ARRAY %s %s" % (name, " ".join(str(d) for d in arr.shape)))
    flat = arr.reshape(-1)
    for i in range(0, flat.size, 8):
        out.append(" ".join(repr(float(v)) for v in flat[i : i + 8]))


def _read_array(lines, i, want):
    head = lines[i].split()
    if head[0] != "ARRAY" or head[1] != want:
        raise CouplingError("checkpoint: expected array %r, got %r" % (want, lines[i]))
    shape = tuple(int(t) for t in head[2:])
    n = int(np.prod(shape)) if shape else 1
    vals = []
    i += 1
    while len(vals) < n:
        vals.extend(float(t) for t in lines[i].split())
        i += 1
    return np.array(vals).reshape(shape), i


def save_checkpoint(path, state):
    """Deterministic plain-text snapshot of a run (same bytes, same state)."""
    config = state.config
    ref = config.ref
    grid = config.fluid_grid
    scheme = config.scheme
    law = config.law
    if ref.kind == "tabulated":
        raise CouplingError("checkpointing tabulated geometries is not supported")
    out = ["CKPT 1 %d %r" % (state.n, scheme.tau)]
    out.append(
        "SCHEME %r %r %d %s %r %r %r %r %s %d"
        % (
            scheme.tau,
            scheme.T_end,
            scheme.K_substeps,
            "none" if scheme.dt_fluid_cap is None else repr(scheme.dt_fluid_cap),
            scheme.delta,
            scheme.omega,
            scheme.zeta,
            scheme.kappa,
            scheme.case_flag,
            int(scheme.drop_inertia_artifact),
        )
    )
    out.append(
        "LAW %r %r %r %r %d" % (law.gamma, law.beta, law.a_lower, law.a_upper, len(law.terms))
    )
    for c, r, s in law.terms:
        out.append("TERM %r %r %r" % (c, r, s))
    el = config.elasticity
    out.append("ELAST %r %r %r" % (el.lambda_s, el.mu_s, el.h_thick))
    out.append(
        "VISC %r %r %r %r"
        % (config.mu_visc, config.lam_visc, config.force_floor, config.visc_limit)
    )
    out.append(
        "GEOM %s %d %d %r %r %r %r %s"
        % (
            ref.kind,
            ref.grid.n1,
            ref.grid.n2,
            ref.grid.h1,
            ref.grid.h2,
            ref.band[0],
            ref.band[1],
            " ".join("%s=%r" % (k, ref.params[k]) for k in sorted(ref.params)),
        )
    )
    out.append(
        "FLUIDGRID %s %s %r %s %s %r"
        % (
            ",".join(repr(v) for v in grid.origin),
            ",".join(str(c) for c in grid.cells),
            grid.h,
            ",".join(grid.bc),
            ",".join(str(a) for a in grid.surface_axes),
            grid.embed_fill,
        )
    )
    out.append("TIME %r %d" % (float(state.fluid.time), state.n))
    if state.halted is None:
        out.append("HALTED none")
    else:
        out.append(
            "HALTED %s %s %s"
            % (
                state.halted.kind,
                "none" if state.halted.node is None else ",".join(str(v) for v in state.halted.node),
                "none" if state.halted.value is None else repr(float(state.halted.value)),
            )
        )
    out.append("MISM %r" % float(state.mismatch_integral))
    out.append("DISSX %r" % float(state.diss_visc_exterior))
    led = state.ledger
    out.append(
        "LEDGER %r %r %r %r %r"
        % (
            float(led.rhs_total),
            float(led.diss_visc),
            float(led.diss_zeta),
            float(led.pen_mismatch),
            float(led.pen_trail),
        )
    )
    out.append("LEDGERPARTS %d" % len(led.rhs_parts))
    for k in sorted(led.rhs_parts):
        out.append("PART %s %r" % (k, float(led.rhs_parts[k])))
    out.append("LEDGERROWS %d" % len(led.rows))
    for row in led.rows:
        out.append("ROW " + " ".join(repr(float(v)) for v in row))
    _write_array(out, "rho", state.fluid.rho)
    _write_array(out, "Z", state.fluid.Z)
    _write_array(out, "u", state.fluid.u)
    _write_array(out, "eta", state.shell.eta)
    _write_array(out, "w", state.shell.w)
    _write_array(out, "trace", state.trace)
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("CKPT 1 "):
        raise CouplingError("not a version-1 checkpoint")
    i = 1
    tok = lines[i].split()
    assert tok[0] == "SCHEME"
    scheme = SchemeParams(
        tau=float(tok[1]),
        T_end=float(tok[2]),
        K_substeps=int(tok[3]),
        dt_fluid_cap=None if tok[4] == "none" else float(tok[4]),
        delta=float(tok[5]),
        omega=float(tok[6]),
        zeta=float(tok[7]),
        kappa=float(tok[8]),
        case_flag=tok[9],
        drop_inertia_artifact=bool(int(tok[10])),
    )
    i += 1
    tok = lines[i].split()
    assert tok[0] == "LAW"
    nterms = int(tok[5])
    gamma, beta, a_lo, a_hi = (float(t) for t in tok[1:5])
    i += 1
    terms = []
    for _ in range(nterms):
        tok = lines[i].split()
        terms.append((float(tok[1]), float(tok[2]), float(tok[3])))
        i += 1
    law = PressureLaw(gamma, beta, terms=terms, a_lower=a_lo, a_upper=a_hi)
    tok = lines[i].split()
    assert tok[0] == "ELAST"
    shell_lambda, shell_mu, shell_thickness = (float(t) for t in tok[1:4])
    i += 1
    tok = lines[i].split()
    assert tok[0] == "VISC"
    mu_visc, lam_visc, force_floor, visc_limit = (float(t) for t in tok[1:5])
    i += 1
    tok = lines[i].split()
    assert tok[0] == "GEOM"
    kind = tok[1]
    pgrid = ParamGrid(int(tok[2]), int(tok[3]), float(tok[4]), float(tok[5]))
    band = (float(tok[6]), float(tok[7]))
    geo_params = {}
    for item in tok[8:]:
        k, v = item.split("=")
        geo_params[k] = float(v)
    ref = build_reference(kind, pgrid, band=band, **geo_params)
    i += 1
    tok = lines[i].split()
    assert tok[0] == "FLUIDGRID"
    origin = tuple(float(v) for v in tok[1].split(","))
    cells = tuple(int(v) for v in tok[2].split(","))
    spacing = float(tok[3])
    bc = tuple(tok[4].split(","))
    surface_axes = tuple(int(v) for v in tok[5].split(","))
    embed_fill = float(tok[6])
    grid = fluid.FluidGrid(origin, cells, spacing, bc=bc, surface_axes=surface_axes, embed_fill=embed_fill)
    i += 1
    tok = lines[i].split()
    assert tok[0] == "TIME"
    t_now, n = float(tok[1]), int(tok[2])
    i += 1
    tok = lines[i].split()
    assert tok[0] == "HALTED"
    halted = None
    if tok[1] != "none":
        node = None if tok[2] == "none" else tuple(int(v) for v in tok[2].split(","))
        value = None if tok[3] == "none" else float(tok[3])
        halted = DegeneracyStatus(tok[1], node, value)
    i += 1
    tok = lines[i].split()
    assert tok[0] == "MISM"
    mismatch_integral = float(tok[1])
    i += 1
    tok = lines[i].split()
    assert tok[0] == "DISSX"
    diss_visc_exterior = float(tok[1])
    i += 1
    tok = lines[i].split()
    assert tok[0] == "LEDGER"
    rhs_total, diss_visc, diss_zeta, pen_mismatch, pen_trail = (float(t) for t in tok[1:6])
    i += 1
    tok = lines[i].split()
    assert tok[0] == "LEDGERPARTS"
    nparts = int(tok[1])
    i += 1
    rhs_parts = {}
    for _ in range(nparts):
        tok = lines[i].split()
        rhs_parts[tok[1]] = float(tok[2])
        i += 1
    tok = lines[i].split()
    assert tok[0] == "LEDGERROWS"
    nrows = int(tok[1])
    i += 1
    rows = []
    for _ in range(nrows):
        rows.append(tuple(float(t) for t in lines[i].split()[1:]))
        i += 1
    rho, i = _read_array(lines, i, "rho")
    Z, i = _read_array(lines, i, "Z")
    u, i = _read_array(lines, i, "u")
    eta, i = _read_array(lines, i, "eta")
    w, i = _read_array(lines, i, "w")
    trace, i = _read_array(lines, i, "trace")

    config = RunConfig(
        ref,
        grid,
        law,
        scheme,
        shell_lambda,
        shell_mu,
        shell_thickness,
        mu_visc=mu_visc,
        lam_visc=lam_visc,
        force_floor=force_floor,
        visc_limit=visc_limit,
    )
    fluid_state = fluid.FluidState(grid, rho, Z, u, time=t_now)
    shell_state = struct.ShellState(ref, eta, w, time=n * scheme.tau)
    ledger = EnergyLedger(rhs_parts)
    ledger.rhs_total = rhs_total
    ledger.diss_visc = diss_visc
    ledger.diss_zeta = diss_zeta
    ledger.pen_mismatch = pen_mismatch
    ledger.pen_trail = pen_trail
    ledger.rows = rows
    state = RunState(config, fluid_state, shell_state, trace, ledger, n=n)
    state.halted = halted
    state.mismatch_integral = mismatch_integral
    state.diss_visc_exterior = diss_visc_exterior
    return state
