import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shellflow.geometry import ParamGrid, build_reference, gamma_bar
from shellflow.shell_energy import (
    ElasticityParams,
    ShellEnergyError,
    SymTensorField2,
    change_of_metric,
    change_of_curvature,
    coercivity_monitor,
    curvature_rate,
    curvature_split,
    discrete_koiter_derivative,
    discrete_koiter_dual,
    elasticity_apply,
    elasticity_min_eig,
    grad3_dual,
    koiter_derivative,
    koiter_dual,
    koiter_energy,
    koiter_energy_parts,
    metric_rate,
)


def torus_ref(n=24, R=1.5, r=0.5):
    grid = ParamGrid(n, n, 2.0 * np.pi / n, 2.0 * np.pi / n)
    return build_reference("torus", grid, R=R, r=r)


def slab_ref(n1=32, n2=8, L1=2.0, L2=1.0):
    grid = ParamGrid(n1, n2, L1 / n1, L2 / n2)
    return build_reference("flat-slab", grid, z0=0.0)


def wavy(grid, amp, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = grid.nodes()
    L1 = grid.n1 * grid.h1
    L2 = grid.n2 * grid.h2
    out = np.zeros(grid.shape)
    for _ in range(3):
        k1 = rng.integers(1, 4)
        k2 = rng.integers(0, 3)
        p1, p2 = rng.uniform(0.0, 2.0 * np.pi, 2)
        out += rng.uniform(-amp, amp) * np.cos(2 * np.pi * k1 * x1 / L1 + p1) * np.cos(
            2 * np.pi * k2 * x2 / L2 + p2
        )
    return out


PARAMS = ElasticityParams(lambda_s=2.0, mu_s=1.0, h_thick=0.1, delta_reg=0.7, zeta=0.3)


def test_params_validation():
    with pytest.raises(ShellEnergyError):
        ElasticityParams(lambda_s=0.0, mu_s=1.0, h_thick=0.1)
    with pytest.raises(ShellEnergyError):
        ElasticityParams(lambda_s=1.0, mu_s=1.0, h_thick=-0.1)
    with pytest.raises(ShellEnergyError):
        ElasticityParams(lambda_s=1.0, mu_s=1.0, h_thick=0.1, delta_reg=-1.0)


def test_metric_matches_displaced_tangent_products():
    # independent route: difference of first fundamental forms
    for ref in (slab_ref(), torus_ref()):
        grid = ref.grid
        eta = wavy(grid, 0.05, seed=11)
        G = change_of_metric(ref, eta)
        e1, e2 = grid.d1(eta), grid.d2(eta)
        a1e = ref.a1 + e1[..., None] * ref.nu + eta[..., None] * ref.dnu1
        a2e = ref.a2 + e2[..., None] * ref.nu + eta[..., None] * ref.dnu2
        dot = lambda u, v: np.sum(u * v, axis=-1)
        assert np.max(np.abs(G.t11 - (dot(a1e, a1e) - ref.a_cov[..., 0, 0]))) < 1e-12
        assert np.max(np.abs(G.t12 - (dot(a1e, a2e) - ref.a_cov[..., 0, 1]))) < 1e-12
        assert np.max(np.abs(G.t22 - (dot(a2e, a2e) - ref.a_cov[..., 1, 1]))) < 1e-12


def test_zero_displacement_is_stress_free():
    for ref in (slab_ref(), torus_ref()):
        zero = np.zeros(ref.grid.shape)
        G = change_of_metric(ref, zero)
        R = change_of_curvature(ref, zero)
        for t in (G.t11, G.t12, G.t22):
            assert np.all(t == 0.0)
        for t in (R.t11, R.t12, R.t22):
            assert np.max(np.abs(t)) < 1e-12
        assert koiter_energy(ref, PARAMS, zero) < 1e-24


def test_curvature_split_reassembles():
    for ref in (slab_ref(), torus_ref()):
        eta = wavy(ref.grid, 0.08, seed=5)
        R = change_of_curvature(ref, eta)
        head, tail = curvature_split(ref, eta)
        scale = 1.0 + max(np.max(np.abs(t)) for t in (R.t11, R.t12, R.t22))
        for a, b, c in zip(
            (R.t11, R.t12, R.t22), (head.t11, head.t12, head.t22), (tail.t11, tail.t12, tail.t22)
        ):
            assert np.max(np.abs(a - (b + c))) < 1e-8 * scale


def test_slab_curvature_is_discrete_hessian():
    ref = slab_ref()
    grid = ref.grid
    eta = wavy(grid, 0.1, seed=3)
    R = change_of_curvature(ref, eta)
    assert np.max(np.abs(R.t11 - grid.d11(eta))) < 1e-13
    assert np.max(np.abs(R.t12 - grid.d12(eta))) < 1e-13
    assert np.max(np.abs(R.t22 - grid.d22(eta))) < 1e-13


def test_slab_min_eig_closed_form():
    # flat metric: operator is c*trace(.)*I + 4 mu * (.), smallest eig 4 mu
    ref = slab_ref()
    lam = elasticity_min_eig(ref, PARAMS)
    assert np.max(np.abs(lam - 4.0 * PARAMS.mu_s)) < 1e-10


def test_elasticity_positivity():
    rng = np.random.default_rng(7)
    for ref in (slab_ref(), torus_ref()):
        lam = elasticity_min_eig(ref, PARAMS)
        assert np.all(lam > 0.0)
        T = SymTensorField2(*(rng.standard_normal(ref.grid.shape) for _ in range(3)))
        quad = elasticity_apply(ref, PARAMS, T).contract(T)
        norm2 = T.contract(T)
        assert np.all(quad >= lam * norm2 - 1e-10)


def test_slab_single_mode_energy_frozen_oracle():
    # displacement A sin(k x) on the flat sheet: every energy part has a
    # closed form in the discrete wavenumbers of the stencils.
    n1, n2, L1, L2 = 32, 8, 2.0, 1.0
    ref = slab_ref(n1, n2, L1, L2)
    grid = ref.grid
    A, m = 0.07, 3
    k = 2.0 * np.pi * m / L1
    x1, _ = grid.nodes()
    eta = A * np.sin(k * x1)
    keff = np.sin(k * grid.h1) / grid.h1
    k2eff = 2.0 * (1.0 - np.cos(k * grid.h1)) / grid.h1**2
    cp = PARAMS.c_lam + 4.0 * PARAMS.mu_s
    area = L1 * L2
    want_stretch = PARAMS.h_thick / 4.0 * cp * A**4 * keff**4 * (3.0 / 8.0) * area
    want_bend = PARAMS.h_thick**3 / 48.0 * cp * A**2 * k2eff**2 * 0.5 * area
    want_reg = PARAMS.reg_weight * A**2 * keff**6 * 0.5 * area
    stretch, bend, reg = koiter_energy_parts(ref, PARAMS, eta)
    assert abs(stretch - want_stretch) < 1e-12 * want_stretch
    assert abs(bend - want_bend) < 1e-12 * want_bend
    assert abs(reg - want_reg) < 1e-12 * want_reg


def test_energy_derivative_matches_central_differences():
    rng = np.random.default_rng(19)
    step = 1e-5
    for ref in (slab_ref(), torus_ref(n=16)):
        for trial in range(6):
            eta = wavy(ref.grid, 0.06, seed=100 + trial)
            b = wavy(ref.grid, 1.0, seed=200 + trial)
            der = koiter_derivative(ref, PARAMS, eta, b)
            fd = (
                koiter_energy(ref, PARAMS, eta + step * b)
                - koiter_energy(ref, PARAMS, eta - step * b)
            ) / (2.0 * step)
            assert abs(der - fd) < 1e-4 * (1.0 + abs(der))


def test_discrete_derivative_telescopes_machine_exactly():
    for ref in (slab_ref(), torus_ref()):
        for trial in range(25):
            eta_prev = wavy(ref.grid, 0.08, seed=300 + trial)
            eta = eta_prev + wavy(ref.grid, 0.04, seed=400 + trial)
            diff = eta - eta_prev
            pair = discrete_koiter_derivative(ref, PARAMS, eta, eta_prev, diff, mode="simpson")
            k_new = koiter_energy(ref, PARAMS, eta)
            k_prev = koiter_energy(ref, PARAMS, eta_prev)
            tol = 1e-11 * (1.0 + abs(k_new) + abs(k_prev))
            assert abs(pair - (k_new - k_prev)) < tol


def test_endpoint_mode_does_not_telescope():
    ref = torus_ref()
    eta_prev = wavy(ref.grid, 0.1, seed=31)
    eta = eta_prev + wavy(ref.grid, 0.05, seed=32)
    diff = eta - eta_prev
    pair = discrete_koiter_derivative(ref, PARAMS, eta, eta_prev, diff, mode="endpoint")
    gap = pair - (koiter_energy(ref, PARAMS, eta) - koiter_energy(ref, PARAMS, eta_prev))
    scale = 1.0 + abs(koiter_energy(ref, PARAMS, eta))
    assert abs(gap) > 1e-9 * scale


def test_discrete_derivative_reduces_to_exact_at_rest():
    for ref in (slab_ref(), torus_ref(n=16)):
        eta = wavy(ref.grid, 0.07, seed=41)
        b = wavy(ref.grid, 1.0, seed=42)
        der = koiter_derivative(ref, PARAMS, eta, b)
        pair = discrete_koiter_derivative(ref, PARAMS, eta, eta, b, mode="simpson")
        assert abs(pair - der) < 1e-12 * (1.0 + abs(der))


def test_dual_field_reproduces_pairings():
    # transposed assembly against the direct tensor contraction
    for ref in (slab_ref(), torus_ref(n=16)):
        grid = ref.grid
        eta_prev = wavy(grid, 0.07, seed=51)
        eta = eta_prev + wavy(grid, 0.03, seed=52)
        for trial in range(5):
            b = wavy(grid, 1.0, seed=500 + trial)
            der = koiter_derivative(ref, PARAMS, eta, b)
            via_dual = grid.inner(koiter_dual(ref, PARAMS, eta), b)
            assert abs(via_dual - der) < 1e-10 * (1.0 + abs(der))
            for mode in ("simpson", "endpoint"):
                pair = discrete_koiter_derivative(ref, PARAMS, eta, eta_prev, b, mode=mode)
                via = grid.inner(discrete_koiter_dual(ref, PARAMS, eta, eta_prev, mode=mode), b)
                assert abs(via - pair) < 1e-10 * (1.0 + abs(pair))


def test_grad3_dual_transposes_inner_product():
    ref = slab_ref()
    grid = ref.grid
    u = wavy(grid, 0.5, seed=61)
    b = wavy(grid, 0.5, seed=62)
    want = grid.grad3_inner(u, b)
    assert abs(grid.inner(grad3_dual(grid, u), b) - want) < 1e-12 * (1.0 + abs(want))


def test_rates_linear_in_direction():
    ref = torus_ref(n=16)
    eta = wavy(ref.grid, 0.06, seed=71)
    b = wavy(ref.grid, 1.0, seed=72)
    for rate in (metric_rate, curvature_rate):
        r1 = rate(ref, eta, b)
        r2 = rate(ref, eta, 2.0 * b)
        for a, c in zip((r1.t11, r1.t12, r1.t22), (r2.t11, r2.t12, r2.t22)):
            assert np.max(np.abs(2.0 * a - c)) < 1e-12 * (1.0 + np.max(np.abs(c)))


def test_coercivity_monitor_holds():
    for ref in (slab_ref(), torus_ref()):
        for trial in range(4):
            eta = wavy(ref.grid, 0.09, seed=800 + trial)
            rep = coercivity_monitor(ref, PARAMS, eta)
            assert rep["ok"]
            assert rep["lambda_min"] > 0.0


def test_gamma_bar_weighting_consistent_with_split():
    ref = torus_ref(n=16)
    eta = wavy(ref.grid, 0.05, seed=91)
    head, _ = curvature_split(ref, eta)
    gb = gamma_bar(ref, eta)
    assert np.max(np.abs(head.t11 - gb * ref.grid.d11(eta))) < 1e-13


@settings(max_examples=20, deadline=None)
@given(
    amp=st.floats(min_value=1e-4, max_value=0.08),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_energy_nonnegative_and_telescoping_property(amp, seed):
    ref = torus_ref(n=12)
    eta_prev = wavy(ref.grid, amp, seed=seed)
    eta = eta_prev + wavy(ref.grid, 0.5 * amp, seed=seed + 1)
    k_new = koiter_energy(ref, PARAMS, eta)
    k_prev = koiter_energy(ref, PARAMS, eta_prev)
    assert k_new >= 0.0 and k_prev >= 0.0
    pair = discrete_koiter_derivative(
        ref, PARAMS, eta, eta_prev, eta - eta_prev, mode="simpson"
    )
    assert abs(pair - (k_new - k_prev)) < 1e-11 * (1.0 + abs(k_new) + abs(k_prev))
