import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shellflow.geometry import ParamGrid, build_reference, gamma_bar
from shellflow.pressure import PressureLaw, helmholtz_total
from shellflow import fluid_solver as fs
from shellflow import structure_solver as ss
from shellflow import coupling as cp


LAW = PressureLaw(gamma=3.0, beta=2.0)


def slab_setup(n=16, depth=1.0):
    grid = ParamGrid(n, 4, 2.0 / n, 0.25)
    ref = build_reference("flat-slab", grid, z0=0.0, band=(-0.5, 0.5))
    fg = fs.FluidGrid(
        origin=(0.0, -depth),
        cells=(n, n),
        spacing=2.0 / n,
        bc=("periodic", "wall"),
    )
    return ref, fg


def x_mode(ref, amp):
    grid = ref.grid
    x = np.arange(grid.n1) * grid.h1 * 2 * np.pi / grid.length1
    return amp * np.sin(x)[:, None] * np.ones((1, grid.n2))


def ringing_config(tau, T_end, n=16, delta=0.25, zeta=0.05, amp1=0.4, mu=0.5, dens=0.5):
    # shell launched with a sinusoidal velocity against a light fluid:
    # the band drag is strong enough to keep the trace chasing the shell
    ref, fg = slab_setup(n)
    sch = cp.SchemeParams(
        tau=tau, T_end=T_end, delta=delta, omega=delta, zeta=zeta, case_flag="II"
    )
    return cp.RunConfig(
        ref,
        fg,
        LAW,
        sch,
        4.0,
        2.0,
        0.25,
        mu_visc=mu,
        rho0=dens * np.ones(fg.cells),
        Z0=dens * np.ones(fg.cells),
        eta1=x_mode(ref, amp1),
    )


def vacuum_config(tau=0.002, T_end=0.006, n=12, **kw):
    ref, fg = slab_setup(n)
    sch = cp.SchemeParams(
        tau=tau, T_end=T_end, delta=0.2, omega=0.2, zeta=0.1, case_flag="II"
    )
    return cp.RunConfig(ref, fg, LAW, sch, 2.0, 1.0, 0.3, **kw)


# ---------------------------------------------------------------------------
# parameters and presets


def test_scheme_params_validation():
    ok = dict(tau=1e-3, T_end=1e-2)
    cp.SchemeParams(**ok)
    with pytest.raises(cp.ConfigError):
        cp.SchemeParams(tau=0.0, T_end=1e-2)
    with pytest.raises(cp.ConfigError):
        cp.SchemeParams(tau=1e-3, T_end=-1.0)
    with pytest.raises(cp.ConfigError):
        cp.SchemeParams(K_substeps=9, **ok)
    with pytest.raises(cp.ConfigError):
        cp.SchemeParams(delta=0.0, **ok)
    with pytest.raises(cp.ConfigError):
        cp.SchemeParams(delta=1.0, **ok)
    with pytest.raises(cp.ConfigError):
        cp.SchemeParams(omega=1.5, **ok)
    with pytest.raises(cp.ConfigError):
        cp.SchemeParams(zeta=-0.1, **ok)
    with pytest.raises(cp.ConfigError):
        cp.SchemeParams(case_flag="III", **ok)
    with pytest.raises(cp.ConfigError):
        cp.SchemeParams(case_flag="II", zeta=0.0, **ok)
    # omega defaults to delta
    sch = cp.SchemeParams(delta=0.05, **ok)
    assert sch.omega == 0.05


def test_case_gate_against_law():
    borderline = PressureLaw(gamma=2.0, beta=2.0)
    sch1 = cp.SchemeParams(tau=1e-3, T_end=1e-2, case_flag="I")
    with pytest.raises(cp.ConfigError):
        sch1.validate_against_law(borderline)
    sch2 = cp.SchemeParams(tau=1e-3, T_end=1e-2, case_flag="II", zeta=0.1)
    sch2.validate_against_law(borderline)  # >= 2 admitted with parabolic term
    # kappa floor moves with the exponents
    steep = PressureLaw(gamma=6.0, beta=2.0)
    bad = cp.SchemeParams(tau=1e-3, T_end=1e-2, kappa=6.9)
    with pytest.raises(cp.ConfigError):
        bad.validate_against_law(steep)
    cp.SchemeParams(tau=1e-3, T_end=1e-2, kappa=7.0).validate_against_law(steep)


def test_sweep_presets():
    one = cp.case_one_sweep(0.05, 1e-3, 1e-2)
    assert one.case_flag == "I"
    assert one.delta == one.omega == one.zeta == 0.05
    two = cp.case_two_sweep(0.05, 0.3, 1e-3, 1e-2)
    assert two.case_flag == "II"
    assert two.delta == two.omega == 0.05
    assert two.zeta == 0.3


# ---------------------------------------------------------------------------
# mollification


def test_bump_kernel_properties():
    k = cp._bump_kernel(0.1, 0.35)
    assert k.size == 7
    assert abs(np.sum(k) - 1.0) < 1e-12
    assert np.allclose(k, k[::-1])
    assert np.all(k >= 0.0)
    assert np.array_equal(cp._bump_kernel(0.1, 0.05), np.array([1.0]))


def test_mollify_surface_smooths_and_preserves_mass():
    grid = ParamGrid(64, 8, 2.0 / 64, 0.125)
    x = np.arange(64) * grid.h1
    f = np.where((x % 2.0) < 1.0, 1.0, 0.0)[:, None] * np.ones((1, 8))
    mass0 = grid.integrate(f)
    dists, curvs = [], []
    for width in (0.4, 0.2, 0.1):
        g = cp.mollify_surface(grid, f, width)
        assert abs(grid.integrate(g) - mass0) < 1e-12
        dists.append(np.sqrt(grid.inner(g - f, g - f)))
        d2 = (np.roll(g, -1, 0) - 2 * g + np.roll(g, 1, 0)) / grid.h1**2
        curvs.append(np.max(np.abs(d2)))
    # tighter mollifier tracks the data better but is allowed to be rougher
    assert dists[0] > dists[1] > dists[2] > 0.0
    assert curvs[0] < curvs[1] < curvs[2]
    raw_curv = np.max(np.abs((np.roll(f, -1, 0) - 2 * f + np.roll(f, 1, 0)) / grid.h1**2))
    assert all(c < raw_curv for c in curvs)
    const = np.full(grid.shape, 0.7)
    assert np.allclose(cp.mollify_surface(grid, const, 0.3), const, atol=1e-14)


def test_mollify_cells_constant_invariant():
    _, fg = slab_setup(16)
    const = np.full(fg.cells, 1.3)
    out = cp.mollify_cells(fg, const, 0.2)
    assert np.allclose(out, const, atol=1e-13)
    rng = np.random.default_rng(5)
    noisy = rng.uniform(0.5, 1.5, fg.cells)
    sm = cp.mollify_cells(fg, noisy, 0.3)
    assert sm.shape == noisy.shape
    assert np.max(np.abs(np.diff(sm, axis=0))) < np.max(np.abs(np.diff(noisy, axis=0)))


# ---------------------------------------------------------------------------
# initialization


def test_initialize_vacuum_rest():
    state = cp.initialize(vacuum_config())
    assert np.all(state.fluid.rho == 0.0)
    assert np.all(state.fluid.Z == 0.0)
    assert np.all(state.fluid.u == 0.0)
    assert np.all(state.trace == 0.0)
    assert all(v == 0.0 for v in state.ledger.rhs_parts.values())
    snap = cp.total_energy(state)
    assert snap["lhs"] == snap["rhs"] == 0.0 and snap["slack"] == 0.0


def test_initialize_uniform_box_ledger_is_helmholtz_only():
    config = vacuum_config(
        rho0=np.ones((12, 12)), Z0=np.ones((12, 12))
    )
    state = cp.initialize(config)
    parts = state.ledger.rhs_parts
    n_in = int(np.sum(state.fluid.rho > 0.0))
    expect = n_in * config.fluid_grid.cellvol * helmholtz_total(config.reg, 1.0, 1.0)
    assert abs(parts["fluid_helmholtz"] - expect) < 1e-12 * (1 + abs(expect))
    for key in ("fluid_kinetic", "shell_kinetic", "koiter", "koiter_reg", "trace_allowance"):
        assert parts[key] == 0.0


def test_initialize_rejects_bad_densities():
    cone_law = PressureLaw(gamma=3.0, beta=2.0, a_lower=0.5, a_upper=1.5)
    ref, fg = slab_setup(12)
    sch = cp.SchemeParams(tau=1e-3, T_end=1e-2, delta=0.2)
    ones = np.ones(fg.cells)
    with pytest.raises(cp.ConfigError):
        cp.initialize(
            cp.RunConfig(ref, fg, cone_law, sch, 2.0, 1.0, 0.3, rho0=ones, Z0=2.0 * ones)
        )
    with pytest.raises(cp.ConfigError):
        cp.initialize(
            cp.RunConfig(ref, fg, cone_law, sch, 2.0, 1.0, 0.3, rho0=-ones, Z0=ones)
        )
    # vanished primary phase cannot carry a live secondary phase
    rho = ones.copy()
    rho[3, 3] = 0.0
    with pytest.raises(cp.ConfigError):
        cp.initialize(
            cp.RunConfig(ref, fg, cone_law, sch, 2.0, 1.0, 0.3, rho0=rho, Z0=ones)
        )


def test_initialize_rejects_band_escape():
    config = vacuum_config(eta0=np.full((12, 4), 0.6))
    with pytest.raises(cp.ConfigError):
        cp.initialize(config)


def test_initialize_rejects_degenerate_shape():
    grid = ParamGrid(24, 12, 2 * np.pi / 24, 2 * np.pi / 12)
    ref = build_reference("torus", grid, R=1.0, r=0.8)
    fg = fs.FluidGrid(
        origin=(-2.0, -2.0, -1.0),
        cells=(8, 8, 8),
        spacing=0.5,
        bc=("wall", "wall", "wall"),
    )
    sch = cp.SchemeParams(tau=1e-3, T_end=1e-2, delta=0.2)
    # uniform outward displacement past the tube-closing radius: still inside
    # the tubular band, but the deformed area element changes sign
    config = cp.RunConfig(ref, fg, LAW, sch, 2.0, 1.0, 0.3, eta0=np.full(grid.shape, 0.21))
    with pytest.raises(cp.ConfigError):
        cp.initialize(config)


# ---------------------------------------------------------------------------
# degeneracy classification


def test_degeneracy_check_statuses():
    grid = ParamGrid(24, 12, 2 * np.pi / 24, 2 * np.pi / 12)
    ref = build_reference("torus", grid, R=1.0, r=0.8)
    flat = np.zeros(grid.shape)
    ok = cp.degeneracy_check(flat, ref)
    assert ok.ok and ok.kind == "ok"
    assert abs(ok.value - 1.0) < 1e-12

    lo, hi = ref.band
    margin = min(-lo, hi)
    spiked = flat.copy()
    spiked[5, 7] = 0.99 * margin
    first = cp.degeneracy_check(spiked, ref)
    assert first.kind == "first-kind"
    assert first.node == (5, 7)
    assert first.value < 0.02 * margin

    # the worst-node shape factor is exactly quadratic in a uniform
    # displacement, so three samples pin the level set of the halt floor
    etas = np.array([0.0, 0.08, 0.16])
    gmins = np.array(
        [float(np.min(gamma_bar(ref, e * np.ones(grid.shape)))) for e in etas]
    )
    poly = np.polyfit(etas, gmins, 2)
    target = 5e-4
    roots = np.roots(poly - np.array([0.0, 0.0, target]))
    eta_star = min(r for r in roots.real if r > 0)
    second = cp.degeneracy_check(np.full(grid.shape, eta_star), ref)
    assert second.kind == "second-kind"
    assert 0.0 < second.value <= 1e-3
    assert abs(second.value - target) < 0.05 * target


def test_degeneracy_first_kind_screens_shape():
    # a displacement violating both kinds reports the band escape
    grid = ParamGrid(24, 12, 2 * np.pi / 24, 2 * np.pi / 12)
    ref = build_reference("torus", grid, R=1.0, r=0.8)
    both = np.full(grid.shape, 0.21)
    both[0, 0] = 0.755
    status = cp.degeneracy_check(both, ref)
    assert status.kind == "first-kind"


# ---------------------------------------------------------------------------
# rest state and ledger sanity


def test_vacuum_rest_is_preserved():
    state = cp.initialize(vacuum_config(T_end=0.006))
    cp.run(state)
    assert state.n == 3
    assert state.halted is None
    assert np.all(state.fluid.rho == 0.0)
    assert np.all(state.fluid.u == 0.0)
    assert np.all(state.shell.eta == 0.0)
    assert np.all(state.shell.w == 0.0)
    for row in state.ledger.rows:
        assert len(row) == len(cp.LEDGER_COLUMNS)
        assert all(col == 0.0 for col in row[1:])
    snap = cp.total_energy(state)
    assert snap["slack"] == 0.0


def test_run_window_budget():
    state = cp.initialize(vacuum_config(T_end=0.02))
    cp.run(state, n_windows=2)
    assert state.n == 2
    cp.run(state)
    assert state.n == 10


def test_shell_only_decay_with_parabolic_term():
    # vacuum fluid, plucked shell velocity, zeta > 0: nothing feeds energy
    # in, so the monitored left side must not increase between windows
    config = vacuum_config(tau=0.002, T_end=0.012)
    config.eta1 = x_mode(config.ref, 0.3)
    state = cp.initialize(config)
    cp.run(state)
    assert state.n == 6
    lhs = [row[-3] for row in state.ledger.rows]
    scale = 1.0 + abs(state.ledger.rhs_total)
    for a, b in zip(lhs, lhs[1:]):
        assert b <= a + 1e-9 * scale
    dzeta = [row[7] for row in state.ledger.rows]
    assert dzeta[-1] > 0.0
    assert all(b >= a for a, b in zip(dzeta, dzeta[1:]))


def test_interacting_window_inequality():
    state = cp.initialize(ringing_config(0.002, 0.01))
    cp.run(state)
    assert state.n == 5
    assert state.halted is None
    rows = state.ledger.rows
    for row in rows:
        scale = 1.0 + abs(row[-3]) + abs(row[-2])
        assert row[-1] >= -1e-6 * scale
        assert row[9] >= 0.0  # trailing trace term carries a sign, not a bound
    for col in (6, 7, 8):  # cumulative dissipations and penalty mismatch
        vals = [row[col] for row in rows]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert vals[-1] > 0.0
    assert state.mismatch_integral > 0.0


def test_trace_mismatch_halves_with_tau():
    # one-window-lag consistency: refining the window length halves the
    # accumulated trace mismatch, well inside the [1.3, 3.1] bracket
    sizes = []
    for tau in (0.004, 0.002):
        state = cp.initialize(ringing_config(tau, 0.016))
        cp.run(state)
        assert state.halted is None
        sizes.append(state.mismatch_integral)
    ratio = sizes[0] / sizes[1]
    assert 1.3 <= ratio <= 3.1


def test_structure_consumes_lagged_trace(monkeypatch):
    seen = []
    real = ss.advance_window

    def spy(shell, v_normal, *args, **kw):
        seen.append(np.array(v_normal, copy=True))
        return real(shell, v_normal, *args, **kw)

    monkeypatch.setattr(ss, "advance_window", spy)
    state = cp.initialize(ringing_config(0.002, 0.01))
    entry = state.trace.copy()
    cp.run_window(state)
    mid = state.trace.copy()
    cp.run_window(state)
    grid = state.config.fluid_grid
    ref = state.config.ref
    # first window consumed the deposited initial trace, second window the
    # trace recorded at the end of the first; never the fresher one
    assert np.array_equal(seen[0], fs.trace_normal_speed(grid, entry, ref))
    assert np.array_equal(seen[1], fs.trace_normal_speed(grid, mid, ref))
    assert not np.array_equal(seen[1], fs.trace_normal_speed(grid, state.trace, ref))


def test_degeneracy_halts_run_and_checkpoints(tmp_path):
    # uniform outward blast: the shell marches toward the band edge and the
    # run must stop at the last completed window with a checkpoint on disk
    config = vacuum_config(tau=0.002, T_end=0.04)
    config.eta0 = np.full((12, 4), 0.40)
    config.eta1 = np.full((12, 4), 40.0)
    state = cp.initialize(config)
    path = os.fspath(tmp_path / "halted.ckpt")
    cp.run(state, halt_checkpoint=path)
    assert state.halted is not None
    assert state.halted.kind == "first-kind"
    assert 1 <= state.n < 20
    assert os.path.exists(path)
    loaded = cp.load_checkpoint(path)
    assert loaded.halted is not None
    assert loaded.halted.kind == "first-kind"
    assert loaded.n == state.n
    with pytest.raises(cp.CouplingError):
        cp.run_window(loaded)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    state = cp.initialize(ringing_config(0.002, 0.008))
    cp.run(state, n_windows=2)
    p1 = os.fspath(tmp_path / "a.ckpt")
    p2 = os.fspath(tmp_path / "b.ckpt")
    cp.save_checkpoint(p1, state)
    loaded = cp.load_checkpoint(p1)
    cp.save_checkpoint(p2, loaded)
    with open(p1, "rb") as fh:
        raw1 = fh.read()
    with open(p2, "rb") as fh:
        raw2 = fh.read()
    assert raw1 == raw2
    assert np.array_equal(loaded.fluid.rho, state.fluid.rho)
    assert np.array_equal(loaded.fluid.Z, state.fluid.Z)
    assert np.array_equal(loaded.fluid.u, state.fluid.u)
    assert np.array_equal(loaded.shell.eta, state.shell.eta)
    assert np.array_equal(loaded.shell.w, state.shell.w)
    assert np.array_equal(loaded.trace, state.trace)
    assert loaded.n == state.n
    assert loaded.mismatch_integral == state.mismatch_integral
    assert loaded.diss_visc_exterior == state.diss_visc_exterior
    assert loaded.ledger.rows == state.ledger.rows
    assert loaded.ledger.rhs_parts == state.ledger.rhs_parts
    # a resumed run reproduces the original bit for bit
    cp.run_window(state)
    cp.run_window(loaded)
    assert loaded.ledger.rows[-1] == state.ledger.rows[-1]
    assert np.array_equal(loaded.fluid.u, state.fluid.u)


def test_checkpoint_rejects_tabulated_geometry(tmp_path):
    state = cp.initialize(vacuum_config())
    grid = state.config.ref.grid
    phi = np.array(state.config.ref.phi, copy=True)
    state.config.ref = build_reference("tabulated", grid, phi=phi)
    with pytest.raises(cp.CouplingError):
        cp.save_checkpoint(os.fspath(tmp_path / "t.ckpt"), state)


# ---------------------------------------------------------------------------
# property run


@settings(max_examples=5, deadline=None)
@given(
    amp=st.floats(0.0, 0.05),
    dens=st.floats(0.3, 1.0),
    q=st.floats(0.8, 1.9),
)
def test_single_window_keeps_invariants(amp, dens, q):
    ref, fg = slab_setup(12)
    sch = cp.SchemeParams(tau=0.002, T_end=0.004, delta=0.2, zeta=0.05, case_flag="II")
    config = cp.RunConfig(
        ref,
        fg,
        LAW,
        sch,
        2.0,
        1.0,
        0.3,
        mu_visc=0.5,
        rho0=dens * np.ones(fg.cells),
        Z0=q * dens * np.ones(fg.cells),
        eta0=x_mode(ref, amp),
    )
    state = cp.initialize(config)
    cp.run_window(state)
    state.fluid.validate(LAW)
    assert state.ledger.rows[-1][-1] >= -1e-6 * (
        1.0 + abs(state.ledger.rows[-1][-3]) + abs(state.ledger.rhs_total)
    )
