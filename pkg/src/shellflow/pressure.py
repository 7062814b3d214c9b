"""Two-fluid pressure laws, their free energies, and hypothesis audits.

The constitutive family is

    P(rho, Z) = rho**gamma + Z**beta + sum_i C_i rho**r_i Z**s_i

for two phase variables sharing one velocity, restricted to the
comparability cone a_lower*rho <= Z <= a_upper*rho.  A regularized
variant adds high-order barrier terms weighted by delta that keep the
approximate system coercive.

The free energy of a law is the ray integral

    H(rho, Z) = rho * integral_1^rho P(s, s*Z/rho) / s**2 ds

normalized to vanish on the unit-density fiber; it solves the
first-order identity P = rho*dH/drho + Z*dH/dZ - H.  The barrier part of
the regularized law uses the homogeneous solution of the same identity,
an explicit polynomial, so the total free energy is quadrature plus a
closed form.

Two evaluation routes ship on purpose: ``helmholtz`` integrates the ray
with adaptive quadrature (reference quality, scalar), while
``helmholtz_field`` evaluates the closed form of the power family
(vectorized, used on whole grids).  Tests pin them against each other.
"""

import numpy as np
from scipy import integrate


class PressureError(Exception):
    pass


class PressureLaw:
    """Power-law pressure with optional cross terms and a comparability cone."""

    def __init__(self, gamma, beta, terms=(), a_lower=0.5, a_upper=2.0):
        if gamma <= 0 or beta <= 0:
            raise PressureError("adiabatic exponents must be positive")
        if not (0.0 < a_lower < a_upper < np.inf):
            raise PressureError("cone bounds need 0 < a_lower < a_upper < inf")
        mx = max(gamma, beta)
        for C, r, s in terms:
            if not (0.0 <= r < gamma):
                raise PressureError("cross term rho exponent must sit in [0, gamma)")
            if not (0.0 <= s < beta):
                raise PressureError("cross term Z exponent must sit in [0, beta)")
            if r + s >= mx:
                raise PressureError("cross term total degree must stay below max(gamma, beta)")
            if gamma == 2.0 and C < 0:
                raise PressureError("negative cross terms need gamma > 2")
        self.gamma = float(gamma)
        self.beta = float(beta)
        self.terms = [(float(C), float(r), float(s)) for C, r, s in terms]
        self.a_lower = float(a_lower)
        self.a_upper = float(a_upper)

    def monomials(self):
        """All (coefficient, rho-exponent, Z-exponent) triples of the law."""
        return [(1.0, self.gamma, 0.0), (1.0, 0.0, self.beta)] + list(self.terms)


class RegularizedPressure:
    """Pressure law plus delta-weighted high-order barrier terms."""

    def __init__(self, base, delta=1e-2, kappa=8.0):
        if delta <= 0:
            raise PressureError("delta must be positive")
        need = max(4.0, base.gamma, base.beta) + 1.0
        if kappa < need:
            raise PressureError("kappa must be at least max(4, gamma, beta) + 1")
        self.base = base
        self.delta = float(delta)
        self.kappa = float(kappa)

    @property
    def a_lower(self):
        return self.base.a_lower

    @property
    def a_upper(self):
        return self.base.a_upper

    def barrier_monomials(self):
        k = self.kappa
        return [(1.0, k, 0.0), (1.0, 0.0, k), (0.5, 2.0, k - 2.0), (0.5, k - 2.0, 2.0)]

    def monomials(self):
        out = list(self.base.monomials())
        out += [(self.delta * c, r, s) for c, r, s in self.barrier_monomials()]
        return out


def _pow(x, e):
    # x**0 must be 1 at x = 0 (constant term), and powers of 0 are 0
    if e == 0.0:
        return np.ones_like(np.asarray(x, dtype=float))
    return np.asarray(x, dtype=float) ** e


def _eval_monomials(monomials, rho, Z):
    rho = np.asarray(rho, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if np.any(rho < 0) or np.any(Z < 0):
        raise PressureError("densities must be nonnegative")
    out = np.zeros(np.broadcast(rho, Z).shape)
    for C, r, s in monomials:
        out += C * _pow(rho, r) * _pow(Z, s)
    # constant cross terms would violate (0,0) -> 0; the constraints forbid
    # r = s = 0 only through r+s < max(gamma, beta) >= 2 at scheme level,
    # so zero the origin explicitly per the limit convention
    both_zero = (rho == 0) & (Z == 0)
    if np.any(both_zero):
        out = np.where(both_zero, 0.0, out)
    return out if out.shape else float(out)


def eval_pressure(law, rho, Z):
    return _eval_monomials(law.monomials(), rho, Z)


def eval_pressure_reg(reg, rho, Z):
    return _eval_monomials(reg.monomials(), rho, Z)


def eval_dZ_pressure(law_or_reg, rho, Z):
    """Analytic partial of the pressure in the second phase variable."""
    rho = np.asarray(rho, dtype=float)
    Z = np.asarray(Z, dtype=float)
    out = np.zeros(np.broadcast(rho, Z).shape)
    for C, r, s in law_or_reg.monomials():
        if s == 0.0:
            continue
        out += C * s * _pow(rho, r) * _pow(Z, s - 1.0)
    return out if out.shape else float(out)


def cone_contains(law, rho, Z, slack=0.0):
    """Membership in the closed comparability cone, with optional slack."""
    rho = np.asarray(rho, dtype=float)
    Z = np.asarray(Z, dtype=float)
    lo = law.a_lower * rho - slack
    hi = law.a_upper * rho + slack
    return (Z >= lo) & (Z <= hi)


# ---------------------------------------------------------------------------
# free energies


def helmholtz(law_or_reg, rho, Z):
    """Ray-integral free energy by adaptive quadrature (reference route)."""
    rho = float(rho)
    Z = float(Z)
    if rho < 0 or Z < 0:
        raise PressureError("densities must be nonnegative")
    if rho == 0.0:
        if Z > 0.0:
            raise PressureError("rho = 0 with Z > 0 lies outside every cone")
        return 0.0
    if rho == 1.0:
        return 0.0
    ratio = Z / rho
    monos = law_or_reg.monomials()

    def integrand(s):
        val = 0.0
        for C, r, sz in monos:
            val += C * s ** (r + sz) * ratio**sz
        return val / s**2

    val, _ = integrate.quad(
        integrand, min(1.0, rho), max(1.0, rho), epsabs=1e-10, epsrel=1e-10, limit=200
    )
    if rho < 1.0:
        val = -val
    return rho * val


def helmholtz_field(law_or_reg, rho, Z):
    """Closed-form free energy of the power family (vectorized route).

    Each monomial C rho^r Z^s integrates along rays to
    C (rho^r Z^s - rho^(1-s) Z^s) / (r+s-1), with a logarithm when the
    total degree is 1.  Ratios use the cone convention Z/rho = 0 at
    vacuum.
    """
    rho = np.asarray(rho, dtype=float)
    Z = np.asarray(Z, dtype=float)
    pos = rho > 0.0
    safe_rho = np.where(pos, rho, 1.0)
    ratio = np.where(pos, Z / safe_rho, 0.0)
    out = np.zeros(np.broadcast(rho, Z).shape)
    for C, r, s in law_or_reg.monomials():
        n = r + s
        rs = _pow(ratio, s)
        if n == 1.0:
            out += C * rs * safe_rho * np.log(safe_rho)
        else:
            out += C * rs * (safe_rho**n - safe_rho) / (n - 1.0)
    out = np.where(pos, out, 0.0)
    return out if out.shape else float(out)


def h_delta(reg, rho, Z):
    """Homogeneous free-energy representative of the barrier terms."""
    rho = np.asarray(rho, dtype=float)
    Z = np.asarray(Z, dtype=float)
    k = reg.kappa
    poly = (
        _pow(rho, k)
        + _pow(Z, k)
        + 0.5 * rho**2 * _pow(Z, k - 2.0)
        + 0.5 * Z**2 * _pow(rho, k - 2.0)
    )
    out = reg.delta / (k - 1.0) * poly
    return out if out.shape else float(out)


def helmholtz_total(reg, rho, Z):
    """Free energy driving the scheme: quadrature plus the barrier polynomial."""
    return helmholtz(reg, rho, Z) + float(h_delta(reg, rho, Z))


def helmholtz_total_field(reg, rho, Z):
    return helmholtz_field(reg, rho, Z) + h_delta(reg, rho, Z)


# ---------------------------------------------------------------------------
# hypothesis audit


class AuditReport:
    """Sampled hypothesis audit: fitted constants plus worst sample points."""

    def __init__(self, rows, notes):
        self.rows = rows  # list of (quantity, value, worst_rho, worst_s)
        self.notes = notes

    def value(self, quantity):
        for q, v, _, _ in self.rows:
            if q == quantity:
                return v
        raise KeyError(quantity)

    def as_text(self):
        lines = ["%-24s %-24s %-24s %s" % ("quantity", "fitted-value", "worst-point-rho", "worst-point-s")]
        for q, v, wr, ws in self.rows:
            lines.append("%-24s %-24r %-24r %r" % (q, v, wr, ws))
        lines += ["# " + n for n in self.notes]
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("quantity,fitted-value,worst-point-rho,worst-point-s\n")
            for q, v, wr, ws in self.rows:
                f.write("%s,%r,%r,%r\n" % (q, float(v), float(wr), float(ws)))


def audit_hypotheses(law, sample_budget=2000, rho_max=2.0, seed=0):
    """Sample the law over the cone and fit the hypothesis constants.

    Report-only: fits the two-sided growth constants, the small-density
    power, the phase-derivative exponents, and scans ray monotonicity.
    Nothing here gates the scheme; the run driver decides what to do
    with warnings.
    """
    if sample_budget < 1000:
        raise PressureError("audit needs a sample budget of at least 1000")
    rng = np.random.default_rng(seed)
    n = int(sample_budget)
    # half uniform over (0, rho_max], half log-spaced toward vacuum
    rho = np.concatenate(
        [
            rng.uniform(1e-6, rho_max, n // 2),
            np.exp(rng.uniform(np.log(1e-6), np.log(1.0), n - n // 2)),
        ]
    )
    s = rng.uniform(law.a_lower, law.a_upper, n)
    Z = rho * s
    P = eval_pressure(law, rho, Z)

    rows = []
    notes = []

    def worst(idx):
        return float(rho[idx]), float(s[idx])

    # two-sided growth bounds
    denom_up = rho**law.gamma + Z**law.beta + 1.0
    ratios_up = P / denom_up
    i_up = int(np.argmax(ratios_up))
    rows.append(("C_upper", float(ratios_up[i_up]),) + worst(i_up))
    denom_lo = rho**law.gamma + Z**law.beta - 1.0
    mask_lo = denom_lo > 1e-3
    if np.any(mask_lo):
        ratios_lo = P[mask_lo] / denom_lo[mask_lo]
        j = int(np.argmin(ratios_lo))
        idx = np.flatnonzero(mask_lo)[j]
        rows.append(("C_lower", float(ratios_lo[j]),) + worst(idx))
    else:
        rows.append(("C_lower", 0.0, 0.0, 0.0))

    # small-density power: sup over the cone section decays like rho**alpha
    small = rho < 0.5
    if np.count_nonzero(small) > 10:
        lr = np.log(rho[small])
        sup_vals = np.array(
            [
                max(
                    abs(eval_pressure(law, r, r * law.a_lower)),
                    abs(eval_pressure(law, r, r * law.a_upper)),
                )
                for r in rho[small]
            ]
        )
        good = sup_vals > 0
        alpha = float(np.polyfit(lr[good], np.log(sup_vals[good]), 1)[0])
        i_w = int(np.flatnonzero(small)[np.argmax(sup_vals)])
        rows.append(("alpha", alpha,) + worst(i_w))
    else:
        alpha = min(law.gamma, law.beta)
        rows.append(("alpha", alpha, 0.0, 0.0))

    # phase-derivative exponents near vacuum and at large density
    dZ = np.abs(eval_dZ_pressure(law, rho, Z))
    tiny = (rho < 0.3) & (dZ > 0)
    if np.count_nonzero(tiny) > 10:
        slope_small = float(np.polyfit(np.log(rho[tiny]), np.log(dZ[tiny]), 1)[0])
    else:
        slope_small = law.beta - 1.0
    kappa_low = max(0.0, -slope_small)
    big = (rho > 0.8) & (dZ > 0)
    if np.count_nonzero(big) > 10:
        slope_big = float(np.polyfit(np.log(rho[big]), np.log(dZ[big]), 1)[0])
    else:
        slope_big = law.beta - 1.0
    kappa_high = slope_big + 1.0
    i_d = int(np.argmax(dZ))
    rows.append(("kappa_lower", kappa_low,) + worst(i_d))
    rows.append(("kappa_upper", kappa_high,) + worst(i_d))

    g_bog = min(2.0 * law.gamma / 3.0 - 1.0, law.gamma / 2.0)
    b_bog = min(2.0 * law.beta / 3.0 - 1.0, law.beta / 2.0)
    rows.append(("gamma_bog", g_bog, 0.0, 0.0))
    rows.append(("beta_bog", b_bog, 0.0, 0.0))
    kap_cap = max(law.gamma + g_bog, law.beta + b_bog)
    if not (kappa_low < 1.0 and 0.0 < kappa_high < kap_cap):
        notes.append(
            "phase-derivative exponents outside the admissible window "
            "(kappa_lower %.3f, kappa_upper %.3f, cap %.3f)" % (kappa_low, kappa_high, kap_cap)
        )

    # ray monotonicity scan
    ray_rho = np.linspace(1e-4, rho_max, 400)
    violations = 0
    worst_gap = 0.0
    worst_pt = (0.0, 0.0)
    for sv in np.linspace(law.a_lower, law.a_upper, 16):
        vals = eval_pressure(law, ray_rho, ray_rho * sv)
        diffs = np.diff(vals)
        scale = 1.0 + np.max(np.abs(vals))
        bad = diffs < -1e-12 * scale
        if np.any(bad):
            violations += int(np.count_nonzero(bad))
            k = int(np.argmin(diffs))
            if -diffs[k] > worst_gap:
                worst_gap = float(-diffs[k])
                worst_pt = (float(ray_rho[k]), float(sv))
    rows.append(("monotone_violations", float(violations)) + worst_pt)
    if violations == 0 and all(C >= 0 for C, _, _ in law.terms):
        notes.append("ray-monotone law: nonnegative decomposition with zero remainder admissible")
    return AuditReport(rows, notes)
