"""Elastic energy of the moving shell and its discrete derivatives.

The stored energy has a membrane part driven by the change of metric, a
bending part driven by the change of curvature, and a small
sixth-order regularization term weighted by the seventh power of the
regularization knob.  All surface integrals use the periodic node
quadrature of the parameter grid.

Two derivative notions ship.  ``koiter_derivative`` is the exact
directional derivative of the energy at one displacement.  The
time-stepping scheme instead pairs *two* displacement snapshots through
``discrete_koiter_derivative``: elastic tensors are averaged between the
snapshots and tensor rates are combined by a three-point Simpson rule
along the straight path between them.  Because the metric rate is affine
and the curvature rate is quadratic along that path, the Simpson
combination integrates the path derivative exactly, and the pairing
telescopes machine-exactly:

    pairing(eta, eta_prev; b = eta - eta_prev) = K(eta) - K(eta_prev).

That identity is what makes the structural energy balance an equality
rather than an estimate.  ``mode="endpoint"`` keeps the one-point
variant (tensors and rates at the new snapshot only); it leaves a
positive quadratic excess in the balance and exists so the energy-check
machinery can be shown to catch it.
"""

import numpy as np

from .geometry import deformed_surface


class ShellEnergyError(Exception):
    pass


class ElasticityParams:
    """Material and discretization constants of the shell energy."""

    def __init__(self, lambda_s, mu_s, h_thick, delta_reg=0.0, zeta=0.0):
        if lambda_s <= 0 or mu_s <= 0:
            raise ShellEnergyError("Lame constants must be positive")
        if h_thick <= 0:
            raise ShellEnergyError("shell thickness must be positive")
        if delta_reg < 0 or zeta < 0:
            raise ShellEnergyError("delta_reg and zeta must be nonnegative")
        self.lambda_s = float(lambda_s)
        self.mu_s = float(mu_s)
        self.h_thick = float(h_thick)
        self.delta_reg = float(delta_reg)
        self.zeta = float(zeta)

    @property
    def c_lam(self):
        return 4.0 * self.lambda_s * self.mu_s / (self.lambda_s + 2.0 * self.mu_s)

    @property
    def reg_weight(self):
        return self.delta_reg**7


class SymTensorField2:
    """Symmetric 2x2 tensor field stored by independent components."""

    __slots__ = ("t11", "t12", "t22")

    def __init__(self, t11, t12, t22):
        self.t11 = t11
        self.t12 = t12
        self.t22 = t22

    def contract(self, other):
        """Double contraction field (off-diagonal counted twice)."""
        return self.t11 * other.t11 + 2.0 * self.t12 * other.t12 + self.t22 * other.t22

    def __add__(self, other):
        return SymTensorField2(self.t11 + other.t11, self.t12 + other.t12, self.t22 + other.t22)

    def __sub__(self, other):
        return SymTensorField2(self.t11 - other.t11, self.t12 - other.t12, self.t22 - other.t22)

    def scale(self, c):
        return SymTensorField2(c * self.t11, c * self.t12, c * self.t22)

    @staticmethod
    def simpson(t_prev, t_mid, t_new):
        c = 1.0 / 6.0
        return SymTensorField2(
            c * (t_prev.t11 + 4.0 * t_mid.t11 + t_new.t11),
            c * (t_prev.t12 + 4.0 * t_mid.t12 + t_new.t12),
            c * (t_prev.t22 + 4.0 * t_mid.t22 + t_new.t22),
        )


# ---------------------------------------------------------------------------
# change of metric


def _metric_coeffs(ref):
    def dot(u, v):
        return np.sum(u * v, axis=-1)

    c11 = 2.0 * dot(ref.a1, ref.dnu1)
    c12 = dot(ref.a1, ref.dnu2) + dot(ref.a2, ref.dnu1)
    c22 = 2.0 * dot(ref.a2, ref.dnu2)
    d11 = dot(ref.dnu1, ref.dnu1)
    d12 = dot(ref.dnu1, ref.dnu2)
    d22 = dot(ref.dnu2, ref.dnu2)
    return (c11, c12, c22), (d11, d12, d22)


def change_of_metric(ref, eta):
    grid = ref.grid
    e1, e2 = grid.d1(eta), grid.d2(eta)
    (c11, c12, c22), (d11, d12, d22) = _metric_coeffs(ref)
    return SymTensorField2(
        e1 * e1 + eta * c11 + eta**2 * d11,
        e1 * e2 + eta * c12 + eta**2 * d12,
        e2 * e2 + eta * c22 + eta**2 * d22,
    )


def metric_rate(ref, eta, b):
    """Directional derivative of the change of metric at eta along b."""
    grid = ref.grid
    e1, e2 = grid.d1(eta), grid.d2(eta)
    b1, b2 = grid.d1(b), grid.d2(b)
    (c11, c12, c22), (d11, d12, d22) = _metric_coeffs(ref)
    two_eta_b = 2.0 * eta * b
    return SymTensorField2(
        2.0 * b1 * e1 + b * c11 + two_eta_b * d11,
        b1 * e2 + e1 * b2 + b * c12 + two_eta_b * d12,
        2.0 * b2 * e2 + b * c22 + two_eta_b * d22,
    )


# ---------------------------------------------------------------------------
# change of curvature


def _dot(u, v):
    return np.sum(u * v, axis=-1)


def _second_surface_derivs(ref, eta):
    """Second derivatives of the displaced immersion, node-wise."""
    grid = ref.grid
    e1, e2 = grid.d1(eta), grid.d2(eta)
    e11, e12, e22 = grid.d11(eta), grid.d12(eta), grid.d22(eta)
    out = []
    pairs = (
        (ref.d2phi[0], ref.d2nu[0], e11, (e1, ref.dnu1), (e1, ref.dnu1)),
        (ref.d2phi[1], ref.d2nu[1], e12, (e1, ref.dnu2), (e2, ref.dnu1)),
        (ref.d2phi[2], ref.d2nu[2], e22, (e2, ref.dnu2), (e2, ref.dnu2)),
    )
    for phi_ij, nu_ij, e_ij, (ea, dna), (eb, dnb) in pairs:
        out.append(
            phi_ij
            + e_ij[..., None] * ref.nu
            + ea[..., None] * dna
            + eb[..., None] * dnb
            + eta[..., None] * nu_ij
        )
    return out


def change_of_curvature(ref, eta):
    surf = deformed_surface(ref, eta)
    J = ref.area_elem
    d2 = _second_surface_derivs(ref, eta)
    comps = []
    for phi_eta_ij, phi_ij in zip(d2, ref.d2phi):
        comps.append(_dot(phi_eta_ij, surf.normal_raw) / J - _dot(phi_ij, ref.nu))
    return SymTensorField2(*comps)


def curvature_split(ref, eta):
    """Second-derivative head and lower-order tail of the curvature change.

    head_ij = shape_factor * hessian_ij(eta); the tail collects every term
    with at most one derivative of the displacement.  head + tail must
    reproduce change_of_curvature; the comparison is a runtime
    cross-check of the curvature assembly.
    """
    from .geometry import gamma_bar

    grid = ref.grid
    J = ref.area_elem
    surf = deformed_surface(ref, eta)
    gb = gamma_bar(ref, eta)
    e1, e2 = grid.d1(eta), grid.d2(eta)
    hess = (grid.d11(eta), grid.d12(eta), grid.d22(eta))
    lows = (
        ref.d2phi[0] + (e1[..., None] * ref.dnu1) * 2.0 + eta[..., None] * ref.d2nu[0],
        ref.d2phi[1] + e1[..., None] * ref.dnu2 + e2[..., None] * ref.dnu1 + eta[..., None] * ref.d2nu[1],
        ref.d2phi[2] + (e2[..., None] * ref.dnu2) * 2.0 + eta[..., None] * ref.d2nu[2],
    )
    head, tail = [], []
    for h_ij, low_ij, phi_ij in zip(hess, lows, ref.d2phi):
        head.append(gb * h_ij)
        tail.append(_dot(low_ij, surf.normal_raw) / J - _dot(phi_ij, ref.nu))
    return SymTensorField2(*head), SymTensorField2(*tail)


def _curvature_rate_coeffs(ref, eta):
    """Per-component linear-form coefficients of the curvature rate.

    For each tensor slot ij the rate in direction b reads

        coeff_hess * hess_ij(b) + sum_k B_k(ij) d_k b + A(ij) b

    returned in a layout the direct and transposed assemblies share.
    """
    surf = deformed_surface(ref, eta)
    J = ref.area_elem
    nue = surf.normal_raw
    nn = _dot(ref.nu, nue) / J
    w1 = _dot(ref.dnu1, nue) / J
    w2 = _dot(ref.dnu2, nue) / J
    z = [_dot(n_ij, nue) / J for n_ij in ref.d2nu]
    cross1 = np.cross(ref.nu, surf.a2)
    cross2 = np.cross(surf.a1, ref.nu)
    gdir = np.cross(ref.dnu1, surf.a2) + np.cross(surf.a1, ref.dnu2)
    d2pe = _second_surface_derivs(ref, eta)
    q1 = [_dot(p, cross1) / J for p in d2pe]
    q2 = [_dot(p, cross2) / J for p in d2pe]
    g = [_dot(p, gdir) / J for p in d2pe]
    return {"nn": nn, "w1": w1, "w2": w2, "z": z, "q1": q1, "q2": q2, "g": g}


_SLOT_DERIVS = ((1, 1), (1, 2), (2, 2))


def curvature_rate(ref, eta, b, coeffs=None):
    """Directional derivative of the change of curvature at eta along b."""
    grid = ref.grid
    if coeffs is None:
        coeffs = _curvature_rate_coeffs(ref, eta)
    b1, b2 = grid.d1(b), grid.d2(b)
    bh = (grid.d11(b), grid.d12(b), grid.d22(b))
    bd = {1: b1, 2: b2}
    comps = []
    for slot, (i, j) in enumerate(_SLOT_DERIVS):
        wi = coeffs["w1"] if i == 1 else coeffs["w2"]
        wj = coeffs["w1"] if j == 1 else coeffs["w2"]
        comps.append(
            coeffs["nn"] * bh[slot]
            + bd[i] * wj
            + bd[j] * wi
            + b * coeffs["z"][slot]
            + b1 * coeffs["q1"][slot]
            + b2 * coeffs["q2"][slot]
            + b * coeffs["g"][slot]
        )
    return SymTensorField2(*comps)


# ---------------------------------------------------------------------------
# elasticity tensor


def elasticity_apply(ref, params, T):
    A = ref.A_contra
    a11, a12, a22 = A[..., 0, 0], A[..., 0, 1], A[..., 1, 1]
    tr = a11 * T.t11 + 2.0 * a12 * T.t12 + a22 * T.t22
    # (A T A)_ij with T symmetric
    m11 = a11 * T.t11 + a12 * T.t12
    m12 = a11 * T.t12 + a12 * T.t22
    m21 = a12 * T.t11 + a22 * T.t12
    m22 = a12 * T.t12 + a22 * T.t22
    ata11 = m11 * a11 + m12 * a12
    ata12 = m11 * a12 + m12 * a22
    ata22 = m21 * a12 + m22 * a22
    c = params.c_lam
    fm = 4.0 * params.mu_s
    return SymTensorField2(
        c * tr * a11 + fm * ata11,
        c * tr * a12 + fm * ata12,
        c * tr * a22 + fm * ata22,
    )


def elasticity_min_eig(ref, params):
    """Smallest eigenvalue of the elasticity operator, node-wise.

    Assembled in an orthonormal basis of symmetric 2x2 tensors, so the
    eigenvalues are with respect to the doubled-off-diagonal contraction.
    """
    grid = ref.grid
    basis = (
        SymTensorField2(np.ones(grid.shape), np.zeros(grid.shape), np.zeros(grid.shape)),
        SymTensorField2(np.zeros(grid.shape), np.zeros(grid.shape), np.ones(grid.shape)),
        SymTensorField2(
            np.zeros(grid.shape), np.full(grid.shape, 1.0 / np.sqrt(2.0)), np.zeros(grid.shape)
        ),
    )
    mat = np.zeros(grid.shape + (3, 3))
    applied = [elasticity_apply(ref, params, e) for e in basis]
    for p in range(3):
        for q in range(3):
            mat[..., p, q] = applied[p].contract(basis[q])
    return np.linalg.eigvalsh(mat)[..., 0]


# ---------------------------------------------------------------------------
# energy


def grad3_dual(grid, u):
    """Riesz field of b -> sum over third differences of (D u, D b)."""
    out = np.zeros(grid.shape)
    f1, f2 = grid.d1(u), grid.d2(u)
    f11, f12, f22 = grid.d1(f1), grid.d1(f2), grid.d2(f2)
    comps = (grid.d1(f11), grid.d2(f11), grid.d1(f22), grid.d2(f22))
    redo = (
        lambda v: grid.d1(grid.d1(grid.d1(v))),
        lambda v: grid.d2(grid.d1(grid.d1(v))),
        lambda v: grid.d1(grid.d2(grid.d2(v))),
        lambda v: grid.d2(grid.d2(grid.d2(v))),
    )
    for mult, comp, op in zip(grid.GRAD3_MULT, comps, redo):
        out -= mult * op(comp)  # odd-order composition: transpose is minus itself
    return out


def koiter_energy_parts(ref, params, eta):
    grid = ref.grid
    G = change_of_metric(ref, eta)
    R = change_of_curvature(ref, eta)
    stretch = params.h_thick / 4.0 * grid.integrate(elasticity_apply(ref, params, G).contract(G))
    bend = params.h_thick**3 / 48.0 * grid.integrate(elasticity_apply(ref, params, R).contract(R))
    reg = params.reg_weight * grid.grad3_inner(eta, eta)
    return stretch, bend, reg


def koiter_energy(ref, params, eta):
    return sum(koiter_energy_parts(ref, params, eta))


def koiter_derivative(ref, params, eta, b):
    """Exact directional derivative of the regularized energy."""
    grid = ref.grid
    G = change_of_metric(ref, eta)
    R = change_of_curvature(ref, eta)
    AG = elasticity_apply(ref, params, G)
    AR = elasticity_apply(ref, params, R)
    val = params.h_thick / 2.0 * grid.integrate(AG.contract(metric_rate(ref, eta, b)))
    val += params.h_thick**3 / 24.0 * grid.integrate(AR.contract(curvature_rate(ref, eta, b)))
    val += 2.0 * params.reg_weight * grid.grad3_inner(eta, b)
    return val


def _simpson_bases(eta, eta_prev):
    return (eta_prev, 0.5 * (eta + eta_prev), eta)


def discrete_koiter_derivative(ref, params, eta, eta_prev, b, mode="simpson"):
    """Two-snapshot energy pairing used by the structural sub-steps.

    simpson: averaged tensors against path-exact Simpson rates; satisfies
    the telescoping identity with b = eta - eta_prev.  endpoint: tensors
    and rates at the new snapshot only (the non-telescoping variant).
    """
    grid = ref.grid
    G_new = change_of_metric(ref, eta)
    R_new = change_of_curvature(ref, eta)
    if mode == "simpson":
        # arithmetic mean of endpoint tensors weights the elasticity form
        G_bar = (change_of_metric(ref, eta_prev) + G_new).scale(0.5)
        R_bar = (change_of_curvature(ref, eta_prev) + R_new).scale(0.5)
        g_rate = SymTensorField2.simpson(*(metric_rate(ref, e, b) for e in _simpson_bases(eta, eta_prev)))
        r_rate = SymTensorField2.simpson(*(curvature_rate(ref, e, b) for e in _simpson_bases(eta, eta_prev)))
        reg = params.reg_weight * grid.grad3_inner(eta + eta_prev, b)
    elif mode == "endpoint":
        G_bar, R_bar = G_new, R_new
        g_rate = metric_rate(ref, eta, b)
        r_rate = curvature_rate(ref, eta, b)
        reg = params.reg_weight * grid.grad3_inner(eta, b)
    else:
        raise ShellEnergyError("unknown derivative mode %r" % mode)
    AG = elasticity_apply(ref, params, G_bar)
    AR = elasticity_apply(ref, params, R_bar)
    val = params.h_thick / 2.0 * grid.integrate(AG.contract(g_rate))
    val += params.h_thick**3 / 24.0 * grid.integrate(AR.contract(r_rate))
    return val + reg


# ---------------------------------------------------------------------------
# dual (transposed) assembly


def _metric_dual(ref, S, eta):
    """Riesz field of b -> integral of S : metric_rate(eta) b."""
    grid = ref.grid
    e1, e2 = grid.d1(eta), grid.d2(eta)
    (c11, c12, c22), (d11, d12, d22) = _metric_coeffs(ref)
    B1 = 2.0 * (S.t11 * e1 + S.t12 * e2)
    B2 = 2.0 * (S.t12 * e1 + S.t22 * e2)
    A0 = (S.t11 * c11 + 2.0 * S.t12 * c12 + S.t22 * c22) + 2.0 * eta * (
        S.t11 * d11 + 2.0 * S.t12 * d12 + S.t22 * d22
    )
    return A0 - grid.d1(B1) - grid.d2(B2)


def _curvature_dual(ref, T, eta, coeffs=None):
    """Riesz field of b -> integral of T : curvature_rate(eta) b."""
    grid = ref.grid
    if coeffs is None:
        coeffs = _curvature_rate_coeffs(ref, eta)
    nn = coeffs["nn"]
    w1, w2 = coeffs["w1"], coeffs["w2"]
    ts = (T.t11, 2.0 * T.t12, T.t22)  # slot weights with contraction doubling
    C11 = T.t11 * nn
    C12 = 2.0 * T.t12 * nn
    C22 = T.t22 * nn
    B1 = 2.0 * (T.t11 * w1 + T.t12 * w2)
    B2 = 2.0 * (T.t12 * w1 + T.t22 * w2)
    A0 = np.zeros(grid.shape)
    for slot in range(3):
        B1 = B1 + ts[slot] * coeffs["q1"][slot]
        B2 = B2 + ts[slot] * coeffs["q2"][slot]
        A0 = A0 + ts[slot] * (coeffs["z"][slot] + coeffs["g"][slot])
    return (
        A0
        - grid.d1(B1)
        - grid.d2(B2)
        + grid.d11(C11)
        + grid.d12(C12)
        + grid.d22(C22)
    )


def koiter_dual(ref, params, eta):
    """Riesz field of the exact energy derivative."""
    G = change_of_metric(ref, eta)
    R = change_of_curvature(ref, eta)
    AG = elasticity_apply(ref, params, G).scale(params.h_thick / 2.0)
    AR = elasticity_apply(ref, params, R).scale(params.h_thick**3 / 24.0)
    out = _metric_dual(ref, AG, eta) + _curvature_dual(ref, AR, eta)
    return out + 2.0 * params.reg_weight * grad3_dual(ref.grid, eta)


def discrete_koiter_dual(ref, params, eta, eta_prev, mode="simpson", include_reg=True):
    """Riesz field of the two-snapshot pairing (transposed assembly)."""
    G_new = change_of_metric(ref, eta)
    R_new = change_of_curvature(ref, eta)
    if mode == "simpson":
        AG = elasticity_apply(
            ref, params, (change_of_metric(ref, eta_prev) + G_new).scale(0.5)
        ).scale(params.h_thick / 2.0)
        AR = elasticity_apply(
            ref, params, (change_of_curvature(ref, eta_prev) + R_new).scale(0.5)
        ).scale(params.h_thick**3 / 24.0)
        out = np.zeros(ref.grid.shape)
        for weight, base in zip((1.0, 4.0, 1.0), _simpson_bases(eta, eta_prev)):
            out = out + (weight / 6.0) * (
                _metric_dual(ref, AG, base) + _curvature_dual(ref, AR, base)
            )
        if include_reg:
            out = out + params.reg_weight * grad3_dual(ref.grid, eta + eta_prev)
        return out
    if mode == "endpoint":
        AG = elasticity_apply(ref, params, G_new).scale(params.h_thick / 2.0)
        AR = elasticity_apply(ref, params, R_new).scale(params.h_thick**3 / 24.0)
        out = _metric_dual(ref, AG, eta) + _curvature_dual(ref, AR, eta)
        if include_reg:
            out = out + params.reg_weight * grad3_dual(ref.grid, eta)
        return out
    raise ShellEnergyError("unknown derivative mode %r" % mode)


# ---------------------------------------------------------------------------
# coercivity monitor


def coercivity_monitor(ref, params, eta):
    """Bound the shape-weighted bending seminorm by the stored energy.

    Returns the seminorm, the certified bound assembled from the energy,
    the smallest elasticity eigenvalue, and the pass flag.  The bound is
    algebraic, so a failure indicates an assembly inconsistency rather
    than a modeling problem.
    """
    from .geometry import gamma_bar

    grid = ref.grid
    gb = gamma_bar(ref, eta)
    h11, h12, h22 = grid.d11(eta), grid.d12(eta), grid.d22(eta)
    seminorm = grid.integrate(gb**2 * (h11**2 + 2.0 * h12**2 + h22**2))
    head, tail = curvature_split(ref, eta)
    tail_sq = grid.integrate(tail.contract(tail))
    lam_min = float(np.min(elasticity_min_eig(ref, params)))
    if lam_min <= 0:
        raise ShellEnergyError("elasticity operator lost positivity")
    energy = koiter_energy(ref, params, eta)
    bound = 96.0 / (params.h_thick**3 * lam_min) * energy + 2.0 * tail_sq
    return {
        "seminorm": seminorm,
        "bound": bound,
        "lambda_min": lam_min,
        "ok": seminorm <= bound * (1.0 + 1e-12) + 1e-30,
    }
