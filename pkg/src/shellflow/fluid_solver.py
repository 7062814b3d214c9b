"""Compressible two-phase flow on a fixed box around the moving shell.

Both phase densities ride one velocity field.  The box covers the
physical domain plus the tubular band the shell can sweep, so the
equations live on a fixed grid regardless of the deformation: densities
are extended by zero outside the physical region, viscosity is extended
by a small positive floor, and the shell acts on the fluid through a
Brinkman relaxation deposited on the cells straddling the deformed
surface.

Discretization choices (the structural invariants drive them):
first-order conservative upwind transport with one shared flux operator
for both densities and every momentum component, which makes mass
conservation, positivity, and phase-cone preservation exact cell-wise
properties; central differences for stress and pressure forces;
an implicit pointwise Brinkman step, unconditionally stable for stiff
penalty coefficients.  Axes are individually periodic or no-slip walls,
and everything is dimension-parametric (2-D default, 3-D supported).
"""

import numpy as np

from .geometry import cutoff_profile, inverse_flow_map
from .pressure import eval_pressure_reg, helmholtz_total_field


class FluidError(Exception):
    pass


class FluidGrid:
    """Uniform cell-centered box with per-axis boundary treatment."""

    def __init__(self, origin, cells, spacing, bc=None, surface_axes=None, embed_fill=0.0):
        self.origin = tuple(float(x) for x in origin)
        self.cells = tuple(int(n) for n in cells)
        self.dim = len(self.cells)
        if len(self.origin) != self.dim:
            raise FluidError("origin and cells must agree in dimension")
        if self.dim not in (2, 3):
            raise FluidError("the solver supports 2 or 3 dimensions")
        if any(n < 4 for n in self.cells):
            raise FluidError("need at least 4 cells per axis")
        if spacing <= 0:
            raise FluidError("spacing must be positive")
        self.h = float(spacing)
        if bc is None:
            bc = ("periodic",) * self.dim
        self.bc = tuple(bc)
        if len(self.bc) != self.dim or any(b not in ("periodic", "wall") for b in self.bc):
            raise FluidError("bc must give 'periodic' or 'wall' per axis")
        if surface_axes is None:
            surface_axes = (0, 2) if self.dim == 2 else (0, 1, 2)
        self.surface_axes = tuple(surface_axes)
        if len(self.surface_axes) != self.dim:
            raise FluidError("surface_axes must list one embedding axis per grid axis")
        self.embed_fill = float(embed_fill)
        self.cellvol = self.h**self.dim

    @property
    def extent(self):
        return tuple(o + n * self.h for o, n in zip(self.origin, self.cells))

    def centers(self):
        axes = [o + (np.arange(n) + 0.5) * self.h for o, n in zip(self.origin, self.cells)]
        return np.meshgrid(*axes, indexing="ij")

    def centers_embedded(self):
        """Cell centers as points of the 3-D ambient space of the shell."""
        cs = self.centers()
        out = np.full(self.cells + (3,), self.embed_fill)
        for grid_ax, emb_ax in enumerate(self.surface_axes):
            out[..., emb_ax] = cs[grid_ax]
        return out

    def restrict_vector(self, vec3):
        """Pull a 3-component field back to the grid's axes."""
        return np.stack([vec3[..., ax] for ax in self.surface_axes], axis=-1)

    def contains(self, points3):
        ok = np.ones(points3.shape[:-1], dtype=bool)
        for grid_ax, emb_ax in enumerate(self.surface_axes):
            lo = self.origin[grid_ax]
            hi = lo + self.cells[grid_ax] * self.h
            ok &= (points3[..., emb_ax] >= lo) & (points3[..., emb_ax] <= hi)
        return ok

    def integrate(self, f):
        return float(np.sum(f)) * self.cellvol


class FluidState:
    """Two densities, one velocity, and the clock."""

    def __init__(self, grid, rho, Z, u, time=0.0):
        self.grid = grid
        self.rho = rho
        self.Z = Z
        self.u = u
        self.time = float(time)
        if rho.shape != grid.cells or Z.shape != grid.cells:
            raise FluidError("density shape must match the grid")
        if u.shape != grid.cells + (grid.dim,):
            raise FluidError("velocity shape must match the grid")

    def validate(self, law, slack=1e-10):
        if np.min(self.rho) < -slack or np.min(self.Z) < -slack:
            raise FluidError("negative density")
        lo = law.a_lower * self.rho - slack * (1.0 + self.rho)
        hi = law.a_upper * self.rho + slack * (1.0 + self.rho)
        if np.any(self.Z < lo) or np.any(self.Z > hi):
            raise FluidError("phase densities left the comparability cone")


class ViscosityField:
    def __init__(self, mu_eff, lambda_eff):
        self.mu_eff = mu_eff
        self.lambda_eff = lambda_eff


# ---------------------------------------------------------------------------
# shifted-neighbor access


def _shift(q, axis, off, bc, neg=False):
    """Neighbor values q[i+off] with ghost cells past walls.

    Wall ghosts mirror the adjacent cell, negated for velocity
    components so the face value vanishes (no slip / no flux).
    """
    out = np.roll(q, -off, axis)
    if bc == "wall":
        sl = [slice(None)] * q.ndim
        src = [slice(None)] * q.ndim
        if off == 1:
            sl[axis] = -1
            src[axis] = -1
        else:
            sl[axis] = 0
            src[axis] = 0
        out[tuple(sl)] = (-1.0 if neg else 1.0) * q[tuple(src)]
    return out


def _central(q, axis, grid, neg=False):
    bc = grid.bc[axis]
    return (_shift(q, axis, 1, bc, neg) - _shift(q, axis, -1, bc, neg)) / (2.0 * grid.h)


# ---------------------------------------------------------------------------
# transport


def upwind_transport(grid, q, u, dt):
    """One conservative upwind step of a cell density under velocity u.

    The identical operator serves both phase densities and the momentum
    components; that sharing is what preserves the phase cone exactly.
    """
    out = q.copy()
    for ax in range(grid.dim):
        ul = _shift(u[..., ax], ax, -1, grid.bc[ax], neg=True)
        uf = 0.5 * (ul + u[..., ax])  # velocity at the left face of each cell
        if grid.bc[ax] == "wall":
            sl = [slice(None)] * grid.dim
            sl[ax] = 0
            uf[tuple(sl)] = 0.0  # shared wall face carries no flux
        ql = _shift(q, ax, -1, grid.bc[ax])
        flux = np.maximum(uf, 0.0) * ql + np.minimum(uf, 0.0) * q
        # face storage is cyclic (the wrap slot is the shared wall face,
        # already zeroed above), so the right-face read is a plain roll
        out -= dt / grid.h * (np.roll(flux, -1, ax) - flux)
    return out


def cfl_number(state, dt):
    return dt * float(np.max(np.abs(state.u))) / state.grid.h


def advance_continuity(state, dt):
    """Transport both densities; returns (rho, Z)."""
    if cfl_number(state, dt) > 0.45 + 1e-12:
        raise FluidError("transport CFL violated: dt*max|u|/h must stay at or below 0.45")
    rho = upwind_transport(state.grid, state.rho, state.u, dt)
    Z = upwind_transport(state.grid, state.Z, state.u, dt)
    return rho, Z


# ---------------------------------------------------------------------------
# interface band


class InterfaceBand:
    """Geometry of the deformed surface as seen by the fluid grid.

    Everything is derived from the reference-coordinate pullback of the
    cell centers: after the inverse flow map, the deformed surface sits
    exactly at reference distance zero, so band membership, inside/
    outside flags, and surface parameters all read off the reference
    geometry.  Frozen once per coupling window.
    """

    def __init__(self, grid, ref, eta, profile=None):
        band_lo, band_hi = ref.band
        margin = min(-band_lo, band_hi)
        if float(np.max(np.abs(eta))) >= margin:
            raise FluidError("displacement leaves the tubular band")
        if profile is None:
            profile = cutoff_profile(ref.band)
        pts = grid.centers_embedded()
        back = inverse_flow_map(ref, eta, profile, pts.reshape(-1, 3))
        back = back.reshape(pts.shape)
        self.s = ref.signed_distance(back)
        self.inside = self.s < 0.0
        self.band = np.abs(self.s) <= grid.h
        p1, p2 = ref.project_params(back)
        self.p1 = p1
        self.p2 = p2
        self.grid = grid
        self.ref = ref
        area = ref.grid.n1 * ref.grid.h1 * ref.grid.n2 * ref.grid.h2
        nb = int(np.count_nonzero(self.band))
        if nb == 0:
            raise FluidError("interface band contains no cells; grid too coarse")
        self.thickness = nb * grid.cellvol / area

    def spread_scalar(self, field):
        """Interpolate a surface node field at the pulled-back cell params."""
        return self.ref.grid.interp(field, self.p1, self.p2)

    def spread_shell_velocity(self, w):
        """Normal velocity w on the surface, spread as a grid vector field."""
        wv = self.spread_scalar(w)
        out = np.zeros(self.grid.cells + (3,))
        for k in range(3):
            out[..., k] = wv * self.spread_scalar(self.ref.nu[..., k])
        return self.grid.restrict_vector(out)


def extend_viscosity(grid, ref, eta, omega, mu=1.0, lam=0.0, band=None):
    """Viscosity extension: full strength inside, graded floor outside.

    The profile of the extension factor over the reference distance d:
    1 inside and on the surface, linear decay to 2*omega across the
    first omega of exterior distance, then exponential settling into
    (omega, 2*omega].  Composition with the inverse flow map transports
    the profile with the deformation.
    """
    if not (0.0 < omega < 1.0):
        raise FluidError("omega must lie in (0, 1)")
    if lam < 0.0 or mu <= 0.0:
        raise FluidError("need mu > 0 and lambda >= 0")
    if band is None:
        band = InterfaceBand(grid, ref, eta)
    d = band.s
    f = np.ones(grid.cells)
    near = (d > 0.0) & (d < omega)
    f = np.where(near, 1.0 + (2.0 * omega - 1.0) * d / omega, f)
    far = d >= omega
    f = np.where(far, omega * (1.0 + np.exp(-(d - omega) / omega)), f)
    return ViscosityField(f * mu, f * lam)


# ---------------------------------------------------------------------------
# momentum


def _strain_and_div(grid, u):
    dim = grid.dim
    grads = [[_central(u[..., a], b, grid, neg=True) for b in range(dim)] for a in range(dim)]
    div = sum(grads[a][a] for a in range(dim))
    return grads, div


def _stress(grid, u, visc):
    grads, div = _strain_and_div(grid, u)
    dim = grid.dim
    S = {}
    for a in range(dim):
        for b in range(a, dim):
            Dab = 0.5 * (grads[a][b] + grads[b][a])
            dev = Dab - (div / 3.0 if a == b else 0.0)
            S[(a, b)] = 2.0 * visc.mu_eff * dev + (visc.lambda_eff * div if a == b else 0.0)
    return S


def force_support(sigma, visc, dt, h, force_floor=1e-8):
    """Cells with enough mass to buffer one explicit force step.

    Dividing a viscous kick by a tiny density turns explicit diffusion
    into an amplifier; the cell-wise von Neumann bound for the stiffest
    (longitudinal) stress mode reads dt*(2*mu_eff+lambda_eff)/(sigma*h^2)
    <= 1/2.  Cells below that mass ride on transport alone until enough
    mass arrives, which is also what keeps pressure kicks at a thin free
    surface from launching ballistic dust.
    """
    gate = np.full(np.shape(sigma), force_floor)
    if visc is not None:
        gate = np.maximum(gate, 2.0 * dt * (2.0 * visc.mu_eff + visc.lambda_eff) / h**2)
    return sigma > gate


def advance_momentum(
    state,
    visc,
    reg,
    penalty,
    ref,
    eta,
    dt,
    band=None,
    force_floor=1e-8,
    return_band_report=False,
):
    """One explicit momentum step with implicit interface relaxation.

    Transports momentum with the shared upwind operator, then applies
    stress and pressure forces only on cells whose mass can buffer them
    (see force_support): explicit diffusion divided by a tiny density is
    an amplifier, so thin rim cells ride as ballistic dust until enough
    mass arrives.  Velocity is then reconstructed (vacuum rides at zero;
    pure transport cannot push the ratio m/sigma outside the hull of
    donor velocities), and band cells finally relax toward the spread
    shell velocity with the implicit closed form

        u_new = (u + dt*k*w_spread) / (1 + dt*k).
    """
    grid = state.grid
    if cfl_number(state, dt) > 0.45 + 1e-12:
        raise FluidError("transport CFL violated: dt*max|u|/h must stay at or below 0.45")
    if visc is not None:
        if dt * float(np.max(visc.mu_eff)) / grid.h**2 > 0.2 + 1e-12:
            raise FluidError("viscous stability violated: dt*max(mu_eff)/h^2 must stay at or below 0.2")
    sigma_old = state.rho + state.Z
    m = sigma_old[..., None] * state.u
    m_new = np.stack(
        [upwind_transport(grid, m[..., a], state.u, dt) for a in range(grid.dim)], axis=-1
    )
    sigma_new = upwind_transport(grid, sigma_old, state.u, dt)

    carry = force_support(sigma_old, visc, dt, grid.h, force_floor)
    if visc is not None:
        S = _stress(grid, state.u, visc)
        for a in range(grid.dim):
            f = np.zeros(grid.cells)
            for b in range(grid.dim):
                key = (a, b) if a <= b else (b, a)
                f += _central(S[key], b, grid)
            m_new[..., a] += dt * np.where(carry, f, 0.0)
    if reg is not None:
        P = eval_pressure_reg(reg, state.rho, state.Z)
        for a in range(grid.dim):
            m_new[..., a] -= dt * np.where(carry, _central(P, a, grid), 0.0)

    mass = sigma_new[..., None]
    u_new = np.where(mass > 1e-12, m_new / np.where(mass > 1e-12, mass, 1.0), 0.0)

    report = None
    if penalty is not None:
        delta, tau, w = penalty
        if band is None:
            band = InterfaceBand(grid, ref, eta)
        k = delta / (tau * band.thickness)
        w_spread = band.spread_shell_velocity(w)
        a_c = dt * k
        relax = (u_new + a_c * w_spread) / (1.0 + a_c)
        sel = band.band[..., None]
        if return_band_report:
            # per-cell energy bookkeeping of the implicit relaxation
            half = 0.5 * sigma_new
            kin_before = grid.integrate(np.where(band.band, half * np.sum(u_new**2, -1), 0.0))
            kin_after = grid.integrate(np.where(band.band, half * np.sum(relax**2, -1), 0.0))
            mismatch = grid.integrate(
                np.where(band.band, half * np.sum((relax - w_spread) ** 2, -1), 0.0)
            )
            report = {
                "coefficient": k,
                "kinetic_drop": kin_before - kin_after,
                "weighted_mismatch": mismatch,
            }
        u_new = np.where(sel, relax, u_new)

    if return_band_report:
        return u_new, report
    return u_new


# ---------------------------------------------------------------------------
# trace and energies


def _gather_linear(grid, field, points3, neg=False):
    """Multilinear interpolation of one cell field at embedded points."""
    pts = [points3[..., emb_ax] for emb_ax in grid.surface_axes]
    idx0, weights = [], []
    for ax, p in enumerate(pts):
        t = (np.asarray(p) - grid.origin[ax]) / grid.h - 0.5
        i0 = np.floor(t).astype(int)
        idx0.append(i0)
        weights.append(t - i0)
    out = np.zeros(np.asarray(pts[0]).shape)
    for corner in range(2**grid.dim):
        w = np.ones_like(out)
        idx = []
        sign = np.ones_like(out)
        for ax in range(grid.dim):
            bit = (corner >> ax) & 1
            w = w * (weights[ax] if bit else (1.0 - weights[ax]))
            i = idx0[ax] + bit
            n = grid.cells[ax]
            if grid.bc[ax] == "periodic":
                i = np.mod(i, n)
            else:
                below = i < 0
                above = i > n - 1
                if neg:
                    sign = sign * np.where(below | above, -1.0, 1.0)
                i = np.clip(i, 0, n - 1)
            idx.append(i)
        out += w * sign * field[tuple(idx)]
    return out


def compute_trace(state, ref, eta):
    """Velocity samples at the deformed surface nodes (multilinear)."""
    from .geometry import deformed_surface

    grid = state.grid
    nodes = deformed_surface(ref, eta).nodes
    if not np.all(grid.contains(nodes)):
        raise FluidError("deformed surface leaves the fluid box")
    comps = [_gather_linear(grid, state.u[..., a], nodes, neg=True) for a in range(grid.dim)]
    return np.stack(comps, axis=-1)


def trace_normal_speed(grid, trace, ref):
    """Project sampled surface velocity onto the reference normal field."""
    return np.sum(trace * grid.restrict_vector(ref.nu), axis=-1)


def viscous_dissipation_field(grid, u, visc):
    grads, div = _strain_and_div(grid, u)
    dim = grid.dim
    dev2 = np.zeros(grid.cells)
    for a in range(dim):
        for b in range(dim):
            Dab = 0.5 * (grads[a][b] + grads[b][a])
            dev = Dab - (div / 3.0 if a == b else 0.0)
            dev2 += dev**2
    # unresolved third axis of a plane flow still carries -div/3 deviatoric
    if dim == 2:
        dev2 += (div / 3.0) ** 2
    return 2.0 * visc.mu_eff * dev2 + visc.lambda_eff * div**2


def fluid_energy(state, reg, visc):
    """Kinetic, free-energy, and instantaneous dissipation cell sums."""
    grid = state.grid
    kinetic = grid.integrate(0.5 * (state.rho + state.Z) * np.sum(state.u**2, axis=-1))
    helm = grid.integrate(helmholtz_total_field(reg, state.rho, state.Z)) if reg is not None else 0.0
    diss = grid.integrate(viscous_dissipation_field(grid, state.u, visc)) if visc is not None else 0.0
    return {"kinetic": kinetic, "helmholtz": helm, "dissipation_rate": diss}


def exterior_mass_fraction(state, band):
    """Fraction of each phase's mass sitting outside the deformed domain."""
    out = {}
    for name, q in (("rho", state.rho), ("Z", state.Z)):
        total = float(np.sum(q))
        outside = float(np.sum(np.where(band.inside, 0.0, q)))
        out[name] = outside / total if total > 0 else 0.0
    return out


def stable_dt(state, visc, cfl=0.45, visc_limit=0.2):
    """Largest explicit step honoring both stability preconditions."""
    grid = state.grid
    vmax = float(np.max(np.abs(state.u)))
    dt = np.inf
    if vmax > 0:
        dt = cfl * grid.h / (grid.dim * vmax)
    if visc is not None:
        mu_max = float(np.max(visc.mu_eff + visc.lambda_eff))
        if mu_max > 0:
            dt = min(dt, visc_limit * grid.h**2 / mu_max)
    if not np.isfinite(dt):
        dt = visc_limit * grid.h**2
    return dt


# ---------------------------------------------------------------------------
# plain-text field dumps


def dump_fields(path, grid, fields):
    """Write named cell fields as FIELD blocks with row-major values."""
    shape3 = grid.cells + (1,) * (3 - grid.dim)
    with open(path, "w") as f:
        for name, q in fields.items():
            f.write("FIELD %s %d %d %d\n" % ((name,) + shape3))
            for v in np.asarray(q).reshape(-1):
                f.write("%r\n" % float(v))


def load_fields(path):
    fields = {}
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "FIELD" or len(head) != 5:
            raise FluidError("malformed field dump header: %r" % lines[i])
        name = head[1]
        shape = tuple(int(x) for x in head[2:])
        count = shape[0] * shape[1] * shape[2]
        vals = np.array([float(x) for x in lines[i + 1 : i + 1 + count]])
        if vals.size != count:
            raise FluidError("field %s truncated" % name)
        fields[name] = vals.reshape([s for s in shape if s > 1] or [1])
        i += 1 + count
    return fields
