"""Reference surfaces, displacement handling, and the interface flow map.

Every surface field lives on a uniform periodic two-parameter grid.
Displacements are scalar node arrays measured along the reference unit
normal.  Three surface kinds are supported: an extruded flat slab, a
torus of revolution, and tabulated node data.  Signed distance and
nearest-point projection are closed-form for the first two kinds; the
tabulated kind supports surface quantities and energies only.

The flow map pushes points of the enclosing box along reference normals
by a smooth compactly supported profile of the signed distance, so that
it is the identity outside a configured collar band and a pure normal
shift of the surface itself.
"""

import numpy as np


class GeometryError(Exception):
    pass


class GeometryUnsupported(GeometryError):
    """Raised when an operation needs closed-form distance/projection."""


# ---------------------------------------------------------------------------
# parameter grid


class ParamGrid:
    """Uniform periodic grid on the two-parameter torus."""

    GRAD3_MULT = (1.0, 3.0, 3.0, 1.0)

    def __init__(self, n1, n2, h1, h2):
        if n1 < 4 or n2 < 4:
            raise GeometryError("ParamGrid needs n1, n2 >= 4")
        if h1 <= 0 or h2 <= 0:
            raise GeometryError("ParamGrid needs positive spacings")
        self.n1 = int(n1)
        self.n2 = int(n2)
        self.h1 = float(h1)
        self.h2 = float(h2)
        self.shape = (self.n1, self.n2)
        self.weight = self.h1 * self.h2
        self.length1 = self.n1 * self.h1
        self.length2 = self.n2 * self.h2

    def nodes(self):
        x1 = np.arange(self.n1) * self.h1
        x2 = np.arange(self.n2) * self.h2
        return np.meshgrid(x1, x2, indexing="ij")

    # centered periodic stencils; axis 0 is parameter direction 1
    def d1(self, f):
        return (np.roll(f, -1, 0) - np.roll(f, 1, 0)) / (2.0 * self.h1)

    def d2(self, f):
        return (np.roll(f, -1, 1) - np.roll(f, 1, 1)) / (2.0 * self.h2)

    def d11(self, f):
        return (np.roll(f, -1, 0) - 2.0 * f + np.roll(f, 1, 0)) / self.h1**2

    def d22(self, f):
        return (np.roll(f, -1, 1) - 2.0 * f + np.roll(f, 1, 1)) / self.h2**2

    def d12(self, f):
        return self.d1(self.d2(f))

    def grad(self, f):
        return (self.d1(f), self.d2(f))

    def grad2(self, f):
        return (self.d11(f), self.d12(f), self.d22(f))

    def grad3(self, f):
        # third differences as compositions of centered first differences,
        # multiplicities (1, 3, 3, 1) over component patterns 111/112/122/222
        f1, f2 = self.d1(f), self.d2(f)
        f11, f12, f22 = self.d1(f1), self.d1(f2), self.d2(f2)
        return (self.d1(f11), self.d2(f11), self.d1(f22), self.d2(f22))

    def integrate(self, f):
        return float(np.sum(f)) * self.weight

    def inner(self, f, g):
        return float(np.sum(f * g)) * self.weight

    def norm2(self, f):
        return self.inner(f, f)

    def grad_inner(self, f, g):
        return self.inner(self.d1(f), self.d1(g)) + self.inner(self.d2(f), self.d2(g))

    def grad3_inner(self, f, g):
        total = 0.0
        for m, df, dg in zip(self.GRAD3_MULT, self.grad3(f), self.grad3(g)):
            total += m * self.inner(df, dg)
        return total

    def interp(self, field, p1, p2):
        """Bilinear periodic interpolation of a node field at parameters."""
        s1 = np.asarray(p1) / self.h1
        s2 = np.asarray(p2) / self.h2
        i0 = np.floor(s1).astype(int)
        j0 = np.floor(s2).astype(int)
        t1 = s1 - i0
        t2 = s2 - j0
        i0 %= self.n1
        j0 %= self.n2
        i1 = (i0 + 1) % self.n1
        j1 = (j0 + 1) % self.n2
        return (
            field[i0, j0] * (1 - t1) * (1 - t2)
            + field[i1, j0] * t1 * (1 - t2)
            + field[i0, j1] * (1 - t1) * t2
            + field[i1, j1] * t1 * t2
        )


# ---------------------------------------------------------------------------
# cutoff profile for the flow map


def _bump(t):
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


class CutoffProfile:
    """Smooth plateau/ramp profile of the normal coordinate.

    Piecewise-linear trapezoid (0 outside (lo_out, hi_out), 1 on
    [lo_in, hi_in]) convolved with a compactly supported bump of width
    alpha, evaluated by fixed Gauss-Legendre quadrature.  Exactly 1 on
    the mollified plateau and exactly 0.0 outside the mollified support,
    which keeps the flow map bitwise-identity far from the surface.
    """

    NQUAD = 64

    def __init__(self, lo_out, lo_in, hi_in, hi_out, alpha):
        if not (lo_out < lo_in <= hi_in < hi_out):
            raise GeometryError("cutoff knots must be ordered")
        if alpha <= 0:
            raise GeometryError("mollifier width must be positive")
        self.knots = (float(lo_out), float(lo_in), float(hi_in), float(hi_out))
        self.alpha = float(alpha)
        t, w = np.polynomial.legendre.leggauss(self.NQUAD)
        wk = w * _bump(t)
        self._t = t
        self._wk = wk / np.sum(wk)
        self.support = (lo_out - alpha, hi_out + alpha)
        self.plateau = (lo_in + alpha, hi_in - alpha)
        if self.plateau[0] > self.plateau[1]:
            raise GeometryError("mollifier width swallows the plateau")

    def _trapezoid(self, x):
        lo_out, lo_in, hi_in, hi_out = self.knots
        up = np.clip((x - lo_out) / (lo_in - lo_out), 0.0, 1.0)
        down = np.clip((hi_out - x) / (hi_out - hi_in), 0.0, 1.0)
        return np.minimum(up, down)

    def _trapezoid_deriv(self, x):
        lo_out, lo_in, hi_in, hi_out = self.knots
        out = np.zeros_like(x)
        out[(x > lo_out) & (x < lo_in)] = 1.0 / (lo_in - lo_out)
        out[(x > hi_in) & (x < hi_out)] = -1.0 / (hi_out - hi_in)
        return out

    def _convolve(self, x, kernel):
        x = np.asarray(x, dtype=float)
        shifted = x[..., None] - self.alpha * self._t
        vals = kernel(shifted.reshape(-1)).reshape(shifted.shape)
        return vals @ self._wk

    def __call__(self, x):
        scalar = np.isscalar(x)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        lo, hi = self.support
        active = (x > lo) & (x < hi)
        if np.any(active):
            out[active] = self._convolve(x[active], self._trapezoid)
        plo, phi = self.plateau
        flat = (x >= plo) & (x <= phi)
        out[flat] = 1.0
        return float(out[0]) if scalar else out

    def deriv(self, x):
        scalar = np.isscalar(x)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        lo, hi = self.support
        plo, phi = self.plateau
        active = (x > lo) & (x < hi) & ~((x >= plo) & (x <= phi))
        if np.any(active):
            out[active] = self._convolve(x[active], self._trapezoid_deriv)
        return float(out[0]) if scalar else out


def cutoff_profile(band):
    """Build the flow-map profile for a collar band (lo, hi) around 0.

    Knot placement uses fixed fractions of the band width so the profile
    vanishes strictly inside the band and is exactly 1 near the surface.
    Mollifier width is 0.4 of the shorter ramp.
    """
    lo, hi = band
    if not (lo < 0.0 < hi):
        raise GeometryError("band must straddle 0")
    g = hi - lo
    lo_out, lo_in = lo + 0.10 * g, lo + 0.25 * g
    hi_in, hi_out = hi - 0.25 * g, hi - 0.10 * g
    alpha = 0.4 * min(lo_in - lo_out, hi_out - hi_in)
    return CutoffProfile(lo_out, lo_in, hi_in, hi_out, alpha)


# ---------------------------------------------------------------------------
# reference geometry


class ReferenceGeometry:
    """Reference surface with analytic first/second fundamental data.

    Arrays are node fields over the parameter grid: phi and its second
    derivatives, tangents a1/a2, unit normal nu and its first/second
    derivatives, covariant metric a_cov, contravariant metric A_contra,
    area element, and the collar band (lo, hi) of admissible normal
    offsets.
    """

    def __init__(self, kind, grid, band, fields, params):
        self.kind = kind
        self.grid = grid
        self.band = (float(band[0]), float(band[1]))
        self.params = dict(params)
        self.phi = fields["phi"]
        self.a1 = fields["a1"]
        self.a2 = fields["a2"]
        self.nu = fields["nu"]
        self.dnu1 = fields["dnu1"]
        self.dnu2 = fields["dnu2"]
        self.d2phi = fields["d2phi"]  # (phi_11, phi_12, phi_22)
        self.d2nu = fields["d2nu"]  # (nu_11, nu_12, nu_22)
        cross = np.cross(self.a1, self.a2)
        self.area_elem = np.linalg.norm(cross, axis=-1)
        if np.any(self.area_elem <= 0):
            raise GeometryError("degenerate reference surface")
        a11 = np.sum(self.a1 * self.a1, axis=-1)
        a12 = np.sum(self.a1 * self.a2, axis=-1)
        a22 = np.sum(self.a2 * self.a2, axis=-1)
        self.a_cov = np.stack(
            [np.stack([a11, a12], -1), np.stack([a12, a22], -1)], -2
        )
        det = a11 * a22 - a12 * a12
        self.A_contra = (
            np.stack([np.stack([a22, -a12], -1), np.stack([-a12, a11], -1)], -2)
            / det[..., None, None]
        )
        # orientation check: nu must agree with a1 x a2
        if not np.allclose(cross / self.area_elem[..., None], self.nu, atol=1e-9):
            raise GeometryError("normal field inconsistent with tangents")

    # ---- closed-form distance machinery (kind-specific) ----

    def signed_distance(self, points):
        raise GeometryUnsupported(
            "signed distance unavailable for kind %r" % self.kind
        )

    def project_params(self, points):
        """Parameters (p1, p2) of the nearest surface point."""
        raise GeometryUnsupported("projection unavailable for kind %r" % self.kind)

    def normal_at_params(self, p1, p2):
        raise GeometryUnsupported("normal lookup unavailable for kind %r" % self.kind)

    def surface_point(self, p1, p2):
        raise GeometryUnsupported("surface lookup unavailable for kind %r" % self.kind)


class _FlatSlabGeometry(ReferenceGeometry):
    """Horizontal plane x3 = z0, periodically extruded in both parameters."""

    def signed_distance(self, points):
        return np.asarray(points)[..., 2] - self.params["z0"]

    def project_params(self, points):
        p = np.asarray(points)
        return p[..., 0] % self.grid.length1, p[..., 1] % self.grid.length2

    def normal_at_params(self, p1, p2):
        shape = np.broadcast(p1, p2).shape
        nu = np.zeros(shape + (3,))
        nu[..., 2] = 1.0
        return nu

    def surface_point(self, p1, p2):
        p1, p2 = np.broadcast_arrays(p1, p2)
        return np.stack([p1, p2, np.full_like(p1, self.params["z0"])], -1)


class _TorusGeometry(ReferenceGeometry):
    """Torus of revolution: spine radius R in the x1x2-plane, tube radius r."""

    def _frame(self, points):
        p = np.asarray(points)
        rho_xy = np.hypot(p[..., 0], p[..., 1])
        theta = np.arctan2(p[..., 1], p[..., 0]) % (2.0 * np.pi)
        q_r = rho_xy - self.params["R"]
        q_z = p[..., 2]
        rho_c = np.hypot(q_r, q_z)
        psi = np.arctan2(q_z, q_r) % (2.0 * np.pi)
        return theta, psi, rho_c

    def signed_distance(self, points):
        _, _, rho_c = self._frame(points)
        return rho_c - self.params["r"]

    def project_params(self, points):
        theta, psi, _ = self._frame(points)
        return theta, psi

    def normal_at_params(self, p1, p2):
        ct, st = np.cos(p1), np.sin(p1)
        cp, sp = np.cos(p2), np.sin(p2)
        return np.stack([cp * ct, cp * st, sp], -1)

    def surface_point(self, p1, p2):
        R, r = self.params["R"], self.params["r"]
        ct, st = np.cos(p1), np.sin(p1)
        cp, sp = np.cos(p2), np.sin(p2)
        w = R + r * cp
        return np.stack([w * ct, w * st, r * sp], -1)


def _torus_fields(grid, R, r):
    t1, t2 = grid.nodes()
    ct, st = np.cos(t1), np.sin(t1)
    cp, sp = np.cos(t2), np.sin(t2)
    w = R + r * cp

    def vec(x, y, z):
        return np.stack([x, y, z], -1)

    phi = vec(w * ct, w * st, r * sp)
    a1 = vec(-w * st, w * ct, np.zeros_like(w))
    a2 = vec(-r * sp * ct, -r * sp * st, r * cp)
    nu = vec(cp * ct, cp * st, sp)
    dnu1 = vec(-cp * st, cp * ct, np.zeros_like(w))
    dnu2 = vec(-sp * ct, -sp * st, cp)
    phi_11 = vec(-w * ct, -w * st, np.zeros_like(w))
    phi_12 = vec(r * sp * st, -r * sp * ct, np.zeros_like(w))
    phi_22 = vec(-r * cp * ct, -r * cp * st, -r * sp)
    nu_11 = vec(-cp * ct, -cp * st, np.zeros_like(w))
    nu_12 = vec(sp * st, -sp * ct, np.zeros_like(w))
    nu_22 = vec(-cp * ct, -cp * st, -sp)
    return {
        "phi": phi,
        "a1": a1,
        "a2": a2,
        "nu": nu,
        "dnu1": dnu1,
        "dnu2": dnu2,
        "d2phi": (phi_11, phi_12, phi_22),
        "d2nu": (nu_11, nu_12, nu_22),
    }


def _slab_fields(grid, z0):
    t1, t2 = grid.nodes()
    zero = np.zeros_like(t1)

    def vec(x, y, z):
        return np.stack([x, y, z], -1)

    zerov = vec(zero, zero, zero)
    return {
        "phi": vec(t1, t2, np.full_like(t1, z0)),
        "a1": vec(np.ones_like(t1), zero, zero),
        "a2": vec(zero, np.ones_like(t1), zero),
        "nu": vec(zero, zero, np.ones_like(t1)),
        "dnu1": zerov,
        "dnu2": zerov,
        "d2phi": (zerov, zerov, zerov),
        "d2nu": (zerov, zerov, zerov),
    }


def _tabulated_fields(grid, phi):
    def dvec(op):
        return np.stack([op(phi[..., k]) for k in range(3)], -1)

    a1 = dvec(grid.d1)
    a2 = dvec(grid.d2)
    cross = np.cross(a1, a2)
    nu = cross / np.linalg.norm(cross, axis=-1)[..., None]
    return {
        "phi": phi,
        "a1": a1,
        "a2": a2,
        "nu": nu,
        "dnu1": np.stack([grid.d1(nu[..., k]) for k in range(3)], -1),
        "dnu2": np.stack([grid.d2(nu[..., k]) for k in range(3)], -1),
        "d2phi": (dvec(grid.d11), dvec(grid.d12), dvec(grid.d22)),
        "d2nu": (
            np.stack([grid.d11(nu[..., k]) for k in range(3)], -1),
            np.stack([grid.d12(nu[..., k]) for k in range(3)], -1),
            np.stack([grid.d22(nu[..., k]) for k in range(3)], -1),
        ),
    }


def build_reference(kind, grid, band=None, **params):
    """Construct a ReferenceGeometry of the given kind.

    flat-slab: params z0 (default 0); grid spacings give the periods.
    torus: params R, r; the grid must carry 2*pi periods.
    tabulated: params phi (n1 x n2 x 3 node array).
    """
    if kind == "flat-slab":
        z0 = float(params.get("z0", 0.0))
        band = band or (-0.5, 0.5)
        return _FlatSlabGeometry(kind, grid, band, _slab_fields(grid, z0), {"z0": z0})
    if kind == "torus":
        R = float(params["R"])
        r = float(params["r"])
        if R <= r or r <= 0:
            raise GeometryError("torus needs R > r > 0")
        if abs(grid.length1 - 2 * np.pi) > 1e-12 or abs(grid.length2 - 2 * np.pi) > 1e-12:
            raise GeometryError("torus grid must have 2*pi periods")
        margin = 0.05 * r
        band = band or (-(r - margin), r - margin)
        if band[0] <= -r or band[1] >= r:
            raise GeometryError("torus band must stay inside the tube radius")
        return _TorusGeometry(kind, grid, band, _torus_fields(grid, R, r), {"R": R, "r": r})
    if kind == "tabulated":
        phi = np.asarray(params["phi"], dtype=float)
        if phi.shape != grid.shape + (3,):
            raise GeometryError("tabulated phi must be n1 x n2 x 3")
        band = band or (-0.1, 0.1)
        return ReferenceGeometry(kind, grid, band, _tabulated_fields(grid, phi), {})
    raise GeometryError("unknown geometry kind %r" % kind)


# ---------------------------------------------------------------------------
# deformed surface and shape factor


class DeformedSurface:
    """Surface displaced along reference normals by a scalar node field."""

    def __init__(self, ref, eta):
        grid = ref.grid
        eta = np.asarray(eta, dtype=float)
        if eta.shape != grid.shape:
            raise GeometryError("displacement shape mismatch")
        self.ref = ref
        self.eta = eta
        self.nodes = ref.phi + eta[..., None] * ref.nu
        e1, e2 = grid.d1(eta), grid.d2(eta)
        self.a1 = ref.a1 + e1[..., None] * ref.nu + eta[..., None] * ref.dnu1
        self.a2 = ref.a2 + e2[..., None] * ref.nu + eta[..., None] * ref.dnu2
        self.normal_raw = np.cross(self.a1, self.a2)  # deliberately unnormalized
        self.area_elem = np.linalg.norm(self.normal_raw, axis=-1)


def deformed_surface(ref, eta):
    return DeformedSurface(ref, eta)


def gamma_bar(ref, eta):
    """Shape factor of the displaced surface.

    Quadratic polynomial in the displacement at each node; its product
    with the reference area element equals nu . (a1(eta) x a2(eta)).
    Positivity is the non-degeneracy monitor for the curvature change.
    """
    eta = np.asarray(eta, dtype=float)
    J = ref.area_elem
    lin = np.sum(ref.nu * (np.cross(ref.a1, ref.dnu2) + np.cross(ref.dnu1, ref.a2)), axis=-1)
    quad = np.sum(ref.nu * np.cross(ref.dnu1, ref.dnu2), axis=-1)
    return (J + eta * lin + eta**2 * quad) / J


# ---------------------------------------------------------------------------
# flow map


def flow_map(ref, eta, profile, points):
    """Push box points along reference normals by the profiled displacement."""
    points = np.asarray(points, dtype=float)
    d = ref.signed_distance(points)
    f = profile(d)
    p1, p2 = ref.project_params(points)
    e = ref.grid.interp(np.asarray(eta, dtype=float), p1, p2)
    nu = ref.normal_at_params(p1, p2)
    return points + (f * e)[..., None] * nu


def inverse_flow_map(ref, eta, profile, points, predictor_tol=1e-7):
    """Invert the flow map on each normal ray, then one Newton correction.

    The preimage normal coordinate solves s + f(s) e = d.  The shift-back
    predictor s <- d - f(s) e is a contraction exactly when the flow map
    is invertible (|f' e| < 1), so it is iterated to a loose tolerance and
    finished with a single Newton step.  Points outside the profile
    support are returned bitwise unchanged.
    """
    points = np.asarray(points, dtype=float)
    eta = np.asarray(eta, dtype=float)
    d = ref.signed_distance(points)
    f = profile(d)
    p1, p2 = ref.project_params(points)
    e = ref.grid.interp(eta, p1, p2)
    nu = ref.normal_at_params(p1, p2)
    s = d - f * e
    for _ in range(60):
        s_new = d - profile(s) * e
        done = np.max(np.abs(s_new - s)) < predictor_tol
        s = s_new
        if done:
            break
    slope = 1.0 + profile.deriv(s) * e
    if np.any(slope <= 1e-6):
        raise GeometryError("flow map is not invertible for this displacement")
    s = s - (s + profile(s) * e - d) / slope
    moved = points + (s - d)[..., None] * nu
    inert = (f == 0.0) & (profile(s) == 0.0)
    return np.where(inert[..., None], points, moved)


# ---------------------------------------------------------------------------
# tabulated node file format


def dump_geometry(path, grid, phi):
    with open(path, "w") as fh:
        fh.write("GEOM %d %d %r %r\n" % (grid.n1, grid.n2, grid.h1, grid.h2))
        for i in range(grid.n1):
            for j in range(grid.n2):
                fh.write(
                    "%d %d %r %r %r\n"
                    % (i, j, float(phi[i, j, 0]), float(phi[i, j, 1]), float(phi[i, j, 2]))
                )


def load_geometry(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5 or header[0] != "GEOM":
            raise GeometryError("bad geometry header")
        n1, n2 = int(header[1]), int(header[2])
        h1, h2 = float(header[3]), float(header[4])
        grid = ParamGrid(n1, n2, h1, h2)
        phi = np.zeros((n1, n2, 3))
        seen = 0
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            i, j = int(parts[0]), int(parts[1])
            phi[i, j] = [float(parts[2]), float(parts[3]), float(parts[4])]
            seen += 1
        if seen != n1 * n2:
            raise GeometryError("geometry node count mismatch")
    return grid, phi
