"""Harmonic functions attached to a boundary pole.

A pole ``zeta`` is a lattice site on the boundary of ``D_tau``. Everything
is computed in integer site coordinates at a fixed resolution ``m``; the
corresponding point of the plane is ``site / m``.

Poles whose outward normal is not in the east-northeast octant are handled
by a lattice symmetry ``T`` that moves the normal there: fields are built in
the rotated frame and read back through ``T``.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import cg, spsolve

from . import _kernels
from ._validation import check_resolution, check_seed, check_sites
from .aggregation import concentric_radius
from .lattice import Disk, SiteSet, outer_boundary, sites_in
from .potential import Direction, c_profile, dyadic_angles

DIRECT_LIMIT = 100_000
SOLVER_TOL = 1e-12

_DIHEDRAL = [
    np.array(a, dtype=np.int64)
    for a in (
        [[1, 0], [0, 1]], [[0, 1], [1, 0]], [[0, -1], [1, 0]], [[1, 0], [0, -1]],
        [[-1, 0], [0, 1]], [[0, 1], [-1, 0]], [[0, -1], [-1, 0]], [[-1, 0], [0, -1]],
    )
]


def reflection_for(normal):
    """Lattice symmetry taking ``normal`` into ``{x >= y >= 0}``."""
    n = np.asarray(normal, dtype=float)
    for T in _DIHEDRAL:
        v = T @ n
        if v[0] >= v[1] - 1e-12 and v[1] >= -1e-12:
            return T
    raise ValueError("no symmetry found")  # unreachable for finite input


# ---------------------------------------------------------------------------
# fields


@dataclass
class HarmonicField:
    """Values on a site set; ``grid`` is aligned with ``sites.box``, NaN outside."""

    sites: SiteSet
    grid: np.ndarray
    m: int
    kind: str
    pole: tuple = None
    interior: SiteSet = None
    stats: dict = field(default_factory=dict)

    def __call__(self, sites):
        sites = np.asarray(sites, dtype=np.int64)
        one = sites.ndim == 1
        sites = sites.reshape(-1, 2)
        ix = sites[:, 0] - self.sites.x0
        iy = sites[:, 1] - self.sites.y0
        nx, ny = self.grid.shape
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        if not ok.all():
            raise KeyError(f"site {tuple(sites[~ok][0])} outside the field's domain")
        v = self.grid[ix, iy]
        if np.isnan(v).any():
            raise KeyError(f"site {tuple(sites[np.isnan(v)][0])} outside the field's domain")
        return float(v[0]) if one else v

    def values_on(self, A):
        return self(A.sites())

    def restrict(self, A):
        g = np.full(A.grid.shape, np.nan)
        s = A.sites()
        g[s[:, 0] - A.x0, s[:, 1] - A.y0] = self(s)
        return HarmonicField(A.copy(), g, self.m, self.kind, self.pole)

    def laplacian_residual(self, where):
        """``max |lap f|`` over the sites of ``where`` (all four neighbours needed)."""
        s = where.sites()
        if len(s) == 0:
            return 0.0
        c = self(s)
        nb = sum(self(s + d) for d in ((1, 0), (-1, 0), (0, 1), (0, -1)))
        return float(np.abs(0.25 * nb - c).max())

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        s = self.sites.sites()
        for (x, y), v in zip(s, self(s)):
            w.writerow([int(x), int(y), repr(float(v))])
        return buf.getvalue()

    def to_pgm(self, lo=None, hi=None):
        """8-bit heatmap (P5), row 0 at the top; sites outside the domain are 0."""
        g = self.grid
        finite = np.isfinite(g)
        lo = float(np.nanmin(g)) if lo is None else lo
        hi = float(np.nanmax(g)) if hi is None else hi
        scale = (hi - lo) or 1.0
        img = np.zeros(g.shape, dtype=np.uint8)
        img[finite] = np.clip(1 + 254 * (g[finite] - lo) / scale, 1, 255).astype(np.uint8)
        img = img.T[::-1]
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def _field_from_values(sites, values, m, kind, pole=None, interior=None, stats=None, order=None):
    """``values`` follow ``order`` (a site array) or, by default, ``sites.sites()``."""
    A = SiteSet.from_sites(sites) if not isinstance(sites, SiteSet) else sites
    if order is not None:
        s = np.asarray(order)
    else:
        s = np.asarray(sites.sites() if isinstance(sites, SiteSet) else sites)
    g = np.full(A.grid.shape, np.nan)
    g[s[:, 0] - A.x0, s[:, 1] - A.y0] = values
    return HarmonicField(A, g, m, kind, pole, interior, stats or {})


# ---------------------------------------------------------------------------
# pole context


@dataclass(frozen=True)
class PoleConstants:
    """Constants of the kernel: ``c``, ``C1`` for ``|H - F|`` and ``C2 = 2 C1``."""

    c: float
    C1: float

    @property
    def C2(self):
        return 2 * self.C1


def field_constant(table, direction, r_min=3.0):
    """``max |w|^2 |H(w) - F(w)|`` over ``r_min <= |w| <= L/2`` in table units."""
    X, Y = table.coords
    R = np.hypot(X, Y)
    g = table.values
    d = np.full_like(g, np.nan)
    d[1:, 1:] = (direction.alpha1 * g[:-1, 1:] + direction.alpha2 * g[:-1, :-1]
                 - (direction.alpha1 + direction.alpha2) * g[1:, 1:])
    H = 0.5 * np.pi * d
    v = direction.vector
    with np.errstate(divide="ignore", invalid="ignore"):
        F = -(v[0] * X + v[1] * Y) / R**2
    band = (R >= r_min) & (R <= table.L / 2) & np.isfinite(H)
    return float(np.max(R[band] ** 2 * np.abs(H[band] - F[band])))


_CONST_CACHE = {}


def pole_constants(table, n_directions=32):
    """``c`` and the largest ``C1`` over sampled directions (cached per table)."""
    key = (table.checksum(), n_directions)
    if key not in _CONST_CACHE:
        angles = dyadic_angles(n_directions)
        c = float(c_profile(table, angles).min())
        C1 = max(field_constant(table, Direction.from_angle(a)) for a in angles)
        _CONST_CACHE[key] = PoleConstants(c, C1)
    return _CONST_CACHE[key]


def tangent_radius(region, spacing=0.01, r_max=10.0):
    """Largest radius whose inner and outer tangent disks fit at every sampled boundary point."""
    if isinstance(region, Disk):
        return float(region.radius)
    pts = region.sample_boundary(spacing)
    h = 1e-6
    gx = (region.sdf(pts + [h, 0]) - region.sdf(pts - [h, 0])) / (2 * h)
    gy = (region.sdf(pts + [0, h]) - region.sdf(pts - [0, h])) / (2 * h)
    nrm = np.column_stack([gx, gy])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    best = r_max
    for sign in (-1.0, 1.0):
        lo = np.zeros(len(pts))
        hi = np.full(len(pts), r_max)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            ctr = pts + sign * mid[:, None] * nrm
            ok = sign * region.sdf(ctr) >= mid * (1 - 1e-6) - 1e-9
            lo = np.where(ok, mid, lo)
            hi = np.where(ok, hi, mid)
        best = min(best, float(lo.min()))
    return best


def outward_normal(region, point):
    if isinstance(region, Disk):
        v = np.asarray(point, dtype=float) - np.asarray(region.center, dtype=float)
        return v / np.linalg.norm(v)
    h = 1e-6
    p = np.asarray(point, dtype=float).reshape(1, 2)
    gx = (region.sdf(p + [h, 0]) - region.sdf(p - [h, 0]))[0]
    gy = (region.sdf(p + [0, h]) - region.sdf(p - [0, h]))[0]
    v = np.array([gx, gy])
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class PoleContext:
    """A pole ``zeta`` on the boundary of ``D_tau`` at resolution ``m``.

    ``normal`` is the outward unit normal in the original frame and
    ``transform`` the lattice symmetry taking it into the east-northeast
    octant. ``R0`` sets the level ``1/(2 m R0)`` that cuts out the extra part
    of the domain near the pole. ``R1`` is the distance from the pole to the
    nearest source point, when sources were supplied.
    """

    zeta: tuple
    m: int
    tau: float
    normal: tuple
    transform: np.ndarray
    R0: float
    R0prime: float
    region: object = None
    R1: float = None

    @property
    def nhat(self):
        v = self.transform @ np.asarray(self.normal)
        return Direction.from_angle(min(max(math.atan2(v[1], v[0]), 0.0), math.pi / 4))

    @property
    def threshold(self):
        return 1.0 / (2 * self.m * self.R0)

    @property
    def eps_edge(self):
        return 2.0 / (self.m**2 * self.R0)

    @property
    def point(self):
        return np.asarray(self.zeta, dtype=float) / self.m

    @property
    def zeta_prime(self):
        """Interior neighbour ``zeta - 1`` of the rotated frame, in original sites."""
        back = self.transform.T @ np.array([-1, 0])
        return (self.zeta[0] + int(back[0]), self.zeta[1] + int(back[1]))

    def local(self, sites):
        """Rotated table coordinates ``T (site - zeta)``."""
        s = np.asarray(sites, dtype=np.int64).reshape(-1, 2) - np.asarray(self.zeta)
        return s @ self.transform.T

    def exceptional(self):
        """Sites where ``H`` fails to be harmonic: the pole and two neighbours."""
        back = self.transform.T
        pts = [np.zeros(2, dtype=np.int64), back @ [1, 0], back @ [1, 1]]
        return [tuple(int(v) for v in np.asarray(self.zeta) + p) for p in pts]


def make_pole(zeta, m, region, tau=0.0, table=None, R0=None, R0prime=None, sources=None, normal=None):
    """Build a :class:`PoleContext` for the lattice site ``zeta`` on ``region``'s boundary.

    ``R0prime`` defaults to the tangent-disk radius of the region and ``R0``
    to ``c R0prime / (4 C2)`` with ``c`` and ``C2`` taken from ``table``.
    """
    m = check_resolution(m)
    zeta = tuple(int(v) for v in zeta)
    p = np.asarray(zeta, dtype=float) / m
    if abs(float(region.sdf(p.reshape(1, 2))[0])) > 1e-9:
        raise ValueError(f"pole {zeta} is not on the boundary of the region")
    n = outward_normal(region, p) if normal is None else np.asarray(normal, dtype=float)
    T = reflection_for(n)
    if R0prime is None:
        R0prime = tangent_radius(region)
    if R0 is None:
        if table is None:
            raise ValueError("either R0 or a potential table is required")
        k = pole_constants(table)
        R0 = k.c * R0prime / (4 * k.C2)
    if R0 <= 0:
        raise ValueError("R0 must be positive")
    R1 = None
    if sources is not None and len(sources):
        src = np.asarray(sources, dtype=float) / m
        R1 = float(np.min(np.hypot(src[:, 0] - p[0], src[:, 1] - p[1])))
        if R1 <= 0:
            raise ValueError("a source point coincides with the pole")
    return PoleContext(zeta, m, float(tau), tuple(n), T, float(R0), float(R0prime), region, R1)


def continuum_F(ctx, z):
    """``Re((n/m) / (zeta - z))`` at plane points ``z`` (shape ``(k, 2)`` or ``(2,)``)."""
    z = np.asarray(z, dtype=float)
    one = z.ndim == 1
    z = z.reshape(-1, 2)
    d = ctx.point - z
    r2 = (d**2).sum(axis=1)
    if np.any(r2 == 0):
        raise ValueError("F is singular at the pole")
    n = np.asarray(ctx.normal)
    out = (n[0] * d[:, 0] + n[1] * d[:, 1]) / (ctx.m * r2)
    return float(out[0]) if one else out


def H_values(table, ctx, sites):
    """``(pi/2)`` times the directional derivative of ``g`` at ``T (site - zeta)``."""
    w = ctx.local(sites)
    n = ctx.nhat
    x, y = w[:, 0], w[:, 1]
    return 0.5 * np.pi * (n.alpha1 * table(x - 1, y) + n.alpha2 * table(x - 1, y - 1)
                          - (n.alpha1 + n.alpha2) * table(x, y))


def default_box(ctx, pad=3):
    A = sites_in(ctx.region, ctx.m)
    return A.padded(pad) if A.count else SiteSet.from_sites([ctx.zeta], pad=pad)


def build_H(table, ctx, domain=None):
    """``H`` on every site of ``domain`` (default: the region's lattice box, padded)."""
    if domain is None:
        box = default_box(ctx)
        domain = SiteSet(box.x0, box.y0, np.ones_like(box.grid))
    s = domain.sites()
    try:
        vals = H_values(table, ctx, s)
    except IndexError as exc:
        raise ValueError(f"potential table L={table.L} is too small for this domain") from exc
    return _field_from_values(domain, vals, ctx.m, "H", ctx.zeta)


def build_F(ctx, domain):
    s = domain.sites()
    keep = ~np.all(s == np.asarray(ctx.zeta), axis=1)
    vals = np.full(len(s), np.nan)
    vals[keep] = continuum_F(ctx, s[keep] / ctx.m)
    return _field_from_values(domain, vals, ctx.m, "F", ctx.zeta)


@dataclass
class OmegaDomain:
    """``omega = (omega1 | omega2) - {zeta}`` and its outer boundary plus the pole."""

    omega1: SiteSet
    omega2: SiteSet
    omega: SiteSet
    boundary: SiteSet
    pole: tuple


def build_omega(ctx, H, D_tau_sites):
    """``omega1`` = lattice sites of ``D_tau``; ``omega2`` = ``{H > 1/(2 m R0)}``.

    The pole itself is removed from ``omega`` and belongs to the boundary.
    """
    box = H.sites
    o1 = D_tau_sites.reboxed(box.box)
    if o1.count != D_tau_sites.count:
        raise ValueError("H must be defined on a box covering D_tau")
    vals = np.where(np.isfinite(H.grid), H.grid, -np.inf)
    o2 = SiteSet(box.x0, box.y0, vals > ctx.threshold)
    o2.discard(ctx.zeta)
    omega = o1.union(o2)
    omega.discard(ctx.zeta)
    bnd = outer_boundary(omega)
    bnd = bnd.reboxed(bnd.box) if bnd.count else bnd
    bnd = bnd.padded(1)
    bnd.add(ctx.zeta)
    return OmegaDomain(o1, o2, omega, bnd, ctx.zeta)


# ---------------------------------------------------------------------------
# Dirichlet problems


class DisconnectedDomain(ValueError):
    pass


def _index(A):
    s = A.sites()
    idx = -np.ones(A.grid.shape, dtype=np.int64)
    idx[s[:, 0] - A.x0, s[:, 1] - A.y0] = np.arange(len(s))
    return s, idx


def check_connected(domain):
    lab, k = ndimage.label(domain.grid)
    if k > 1:
        sizes = ndimage.sum(domain.grid, lab, range(1, k + 1))
        first = [tuple(int(v) for v in np.argwhere(lab == j)[0] + (domain.x0, domain.y0)) for j in range(1, k + 1)]
        desc = ", ".join(f"component {j + 1} ({int(sz)} sites, first {f})" for j, (sz, f) in enumerate(zip(sizes, first)))
        raise DisconnectedDomain(f"domain has {k} components: {desc}")


def _solve(A, b):
    n = A.shape[0]
    if n <= DIRECT_LIMIT:
        x = spsolve(A.tocsc(), b)
        return x, {"method": "direct", "iterations": 1}
    d = A.diagonal()
    M = sp.diags(1.0 / d)
    info_it = [0]

    def count(_):
        info_it[0] += 1

    x, info = cg(A, b, rtol=SOLVER_TOL, atol=0.0, M=M, maxiter=20 * n, callback=count)
    if info != 0:
        raise RuntimeError(f"conjugate gradient did not converge (info={info})")
    return x, {"method": "cg", "iterations": info_it[0]}


def dirichlet_solve(domain, boundary_values, m=1, kind="dirichlet", pole=None, allow_disconnected=False,
                    edge_values=None):
    """Discrete harmonic extension into ``domain`` of ``boundary_values``.

    ``boundary_values`` is a callable on ``(k, 2)`` site arrays or a
    :class:`HarmonicField`; it is evaluated on the outer boundary of
    ``domain``. The result covers ``domain`` and its outer boundary.

    ``edge_values(inner, outer)``, if given, replaces the boundary value
    seen along each exit edge, so a boundary site can pay out differently
    depending on the side a walk arrives from.
    """
    if domain.count == 0:
        raise ValueError("empty domain")
    if not allow_disconnected:
        check_connected(domain)
    s, idx = _index(domain)
    n = len(s)
    bnd = outer_boundary(domain)
    bs = bnd.sites()
    bv = np.asarray(boundary_values(bs), dtype=float)
    bmap = {tuple(p): v for p, v in zip(map(tuple, bs), bv)}
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.ones(n)]
    rhs = np.zeros(n)
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb = s + (dx, dy)
        ix = nb[:, 0] - domain.x0
        iy = nb[:, 1] - domain.y0
        inside = (ix >= 0) & (ix < idx.shape[0]) & (iy >= 0) & (iy < idx.shape[1])
        j = np.full(n, -1)
        j[inside] = idx[ix[inside], iy[inside]]
        inner = j >= 0
        rows.append(np.flatnonzero(inner))
        cols.append(j[inner])
        vals.append(np.full(inner.sum(), -0.25))
        out = np.flatnonzero(~inner)
        if edge_values is not None:
            if len(out):
                rhs[out] += 0.25 * np.asarray(edge_values(s[out], nb[out]), dtype=float)
            continue
        for k in out:
            rhs[k] += 0.25 * bmap[tuple(nb[k])]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    x, stats = _solve(A, rhs)
    stats["residual"] = float(np.abs(A @ x - rhs).max())
    return _field_from_values(domain.union(bnd), np.concatenate([x, bv]), m, kind, pole, domain, stats,
                              order=np.concatenate([s, bs]))


def poisson_tilde(ctx, D_tau_sites, slit=True):
    """Probability that a walk from each site leaves ``D_tau`` through the pole.

    With ``slit`` the pole only counts when entered along the edge from
    ``zeta'``; walks stepping onto it from any other neighbour are killed
    with payoff 0. That is the lattice trace of cutting the pole's other
    edges, and it makes the field exactly ``G(zeta', .) / 4``.
    """
    interior = D_tau_sites.copy()
    interior.discard(ctx.zeta)
    if ctx.zeta_prime not in interior:
        raise ValueError("the pole has no interior neighbour in D_tau")
    z = np.asarray(ctx.zeta)
    zp = np.asarray(ctx.zeta_prime)

    def bv(b):
        return np.all(b == z, axis=1).astype(float)

    def ev(inner, outer):
        hit = np.all(outer == z, axis=1)
        if slit:
            hit &= np.all(inner == zp, axis=1)
        return hit.astype(float)

    return dirichlet_solve(interior, bv, ctx.m, "poisson", ctx.zeta, edge_values=ev)


def green_discrete(table, domain, y, m=1):
    """``E g(exit - y) - g(z - y)``: expected visits to ``y`` before leaving ``domain``."""
    y = np.asarray(y, dtype=np.int64)
    if tuple(y) not in domain:
        raise ValueError("y must be an interior site")

    def bv(b):
        d = b - y
        return table(d[:, 0], d[:, 1])

    try:
        f = dirichlet_solve(domain, bv, m, "green", tuple(int(v) for v in y))
        s = f.sites.sites()
        d = s - y
        f.grid[s[:, 0] - f.sites.x0, s[:, 1] - f.sites.y0] -= table(d[:, 0], d[:, 1])
    except IndexError as exc:
        raise ValueError(f"potential table L={table.L} is too small for this domain") from exc
    return f


def g_on_grid(table, pts):
    """``g`` extended linearly along lattice edges; ``pts`` in table units."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    fx = np.floor(pts[:, 0]).astype(np.int64)
    fy = np.floor(pts[:, 1]).astype(np.int64)
    tx = pts[:, 0] - fx
    ty = pts[:, 1] - fy
    if np.any((tx > 1e-12) & (ty > 1e-12)):
        raise ValueError("points must lie on lattice edges")
    g0 = table(fx, fy)
    gx = table(fx + (tx > 0), fy)
    gy = table(fx, fy + (ty > 0))
    return g0 + tx * (gx - g0) + ty * (gy - g0)


def _crossing(region, a, b, iters=60):
    """Parameter in ``(0, 1]`` where the segment ``a -> b`` (plane points) leaves ``region``."""
    if isinstance(region, Disk):
        c = np.asarray(region.center)
        d = b - a
        f = a - c
        A = (d**2).sum(axis=1)
        B = 2 * (f * d).sum(axis=1)
        C = (f**2).sum(axis=1) - region.radius**2
        return np.clip((-B + np.sqrt(np.maximum(B * B - 4 * A * C, 0.0))) / (2 * A), 1e-12, 1.0)
    lo = np.zeros(len(a))
    hi = np.ones(len(a))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = region.sdf(a + mid[:, None] * (b - a)) < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return np.maximum(hi, 1e-12)


@dataclass
class GridSystem:
    """Grid-walk Dirichlet problem on the lattice sites strictly inside a region.

    A walk on the lattice lines is absorbed where a line leaves the region.
    Seen at lattice sites it moves to a neighbour at distance ``t`` (in
    lattice units, ``t < 1`` only for boundary crossings) with probability
    proportional to ``1/t``.
    """

    interior: SiteSet
    sites: np.ndarray
    matrix: object
    exit_rows: np.ndarray
    exit_points: np.ndarray
    exit_weights: np.ndarray
    m: int

    def solve(self, boundary_fn):
        """``boundary_fn`` maps exit points (lattice units, floats) to values."""
        f = np.asarray(boundary_fn(self.exit_points), dtype=float)
        rhs = np.bincount(self.exit_rows, weights=self.exit_weights * f, minlength=len(self.sites))
        x, stats = _solve(self.matrix, rhs)
        return x, stats


def grid_system(region, m):
    m = check_resolution(m)
    A = sites_in(region, m)
    s0 = A.sites()
    strict = region.sdf(s0 / m) < 0
    interior = SiteSet.from_sites(s0[strict]) if strict.any() else SiteSet.empty()
    s, idx = _index(interior)
    n = len(s)
    diag = np.zeros(n)
    rows, cols, vals = [], [], []
    erows, epts, ew = [], [], []
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb = s + (dx, dy)
        ix = nb[:, 0] - interior.x0
        iy = nb[:, 1] - interior.y0
        ok = (ix >= 0) & (ix < idx.shape[0]) & (iy >= 0) & (iy < idx.shape[1])
        j = np.full(n, -1)
        j[ok] = idx[ix[ok], iy[ok]]
        inner = j >= 0
        r = np.flatnonzero(inner)
        rows.append(r)
        cols.append(j[inner])
        vals.append(-np.ones(len(r)))
        diag[inner] += 1.0
        out = np.flatnonzero(~inner)
        if len(out):
            a = s[out] / m
            b = nb[out] / m
            t = _crossing(region, a, b)
            w = 1.0 / t
            diag[out] += w
            erows.append(out)
            epts.append(s[out] + t[:, None] * np.array([dx, dy]))
            ew.append(w)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return GridSystem(interior, s, M, np.concatenate(erows), np.concatenate(epts), np.concatenate(ew), m)


def green_grid(table, system, y):
    """Green's function with exits on the region's true boundary (grid walk)."""
    y = np.asarray(y, dtype=np.int64)
    if tuple(y) not in system.interior:
        raise ValueError("y must be an interior site")
    try:
        u, stats = system.solve(lambda p: g_on_grid(table, p - y))
        d = system.sites - y
        vals = u - table(d[:, 0], d[:, 1])
    except IndexError as exc:
        raise ValueError(f"potential table L={table.L} is too small for this domain") from exc
    return _field_from_values(system.interior, vals, system.m, "green", tuple(int(v) for v in y),
                              system.interior, stats, order=system.sites)


# ---------------------------------------------------------------------------
# continuum comparisons


def green_disk_continuum(R, x, y, center=(0.0, 0.0)):
    """Green's function of the disk, normalised like ``-(2/pi) log|x - y|`` at the pole."""
    c = np.asarray(center, dtype=float)
    x = np.asarray(x, dtype=float).reshape(-1, 2) - c
    y = np.asarray(y, dtype=float).reshape(-1, 2) - c
    x, y = np.broadcast_arrays(x, y)
    rx = np.hypot(x[:, 0], x[:, 1])
    ry = np.hypot(y[:, 0], y[:, 1])
    if np.any(rx >= R) or np.any(ry >= R):
        raise ValueError("points must lie in the open disk")
    dxy = np.hypot(*(x - y).T)
    if np.any(dxy == 0):
        raise ValueError("x and y coincide")
    out = np.empty(len(dxy))
    small = ry < 1e-300
    out[small] = (2 / np.pi) * np.log(R / rx[small])
    ys = y[~small]
    ry2 = ry[~small, None] ** 2
    img = R**2 * ys / ry2
    far = np.hypot(*(x[~small] - img).T)
    out[~small] = (2 / np.pi) * np.log(ry[~small] * far / (R * dxy[~small]))
    return out if len(out) > 1 else float(out[0])


def disk_poisson_kernel(R, zeta, z, center=(0.0, 0.0)):
    """Inward normal derivative of the disk Green's function at the boundary point ``zeta``."""
    c = np.asarray(center, dtype=float)
    z = np.asarray(z, dtype=float).reshape(-1, 2)
    rz2 = ((z - c) ** 2).sum(axis=1)
    d2 = ((z - np.asarray(zeta, dtype=float)) ** 2).sum(axis=1)
    return (2 / np.pi) * (R**2 - rz2) / (R * d2)


@dataclass
class GreenConvergence:
    m_values: list
    alpha: float
    errors: list
    slope: float

    def ratios(self):
        e = self.errors
        return [e[i] / e[i + 1] for i in range(len(e) - 1)]


def disk_green(table, m, radius=1.0, zeta=None, exits="grid"):
    """Discrete Green's function of the disk ``|z| <= radius`` with pole at ``zeta'``.

    ``zeta`` must be a lattice site on the circle (default ``(m radius, 0)``);
    ``zeta'`` is its interior neighbour against the rotated normal. Returns
    ``(G, zeta, zeta')``.
    """
    m = check_resolution(m)
    if zeta is None:
        Rm = radius * m
        if abs(Rm - round(Rm)) > 1e-9:
            raise ValueError("radius * m must be an integer so the pole is a lattice site")
        zeta = (int(round(Rm)), 0)
    zeta = tuple(int(v) for v in zeta)
    if abs(math.hypot(*zeta) - radius * m) > 1e-9:
        raise ValueError("zeta must lie on the circle")
    back = reflection_for(np.asarray(zeta, dtype=float)).T @ np.array([-1, 0])
    zp = (zeta[0] + int(back[0]), zeta[1] + int(back[1]))
    region = Disk((0.0, 0.0), radius)
    if exits == "grid":
        G = green_grid(table, grid_system(region, m), zp)
    elif exits == "lattice":
        D = sites_in(region, m)
        D.discard(zeta)
        G = green_discrete(table, D, zp, m)
    else:
        raise ValueError(f"unknown exit model {exits!r}")
    return G, zeta, zp


def far_sites(G, radius, zp, alpha):
    """Interior sites at distance ``>= alpha`` from the circle and from ``zeta'``."""
    s = G.interior.sites()
    p = s / G.m
    q = np.asarray(zp, dtype=float) / G.m
    keep = (radius - np.hypot(p[:, 0], p[:, 1]) >= alpha) & (np.hypot(p[:, 0] - q[0], p[:, 1] - q[1]) >= alpha)
    return s[keep]


def green_errors(table, m, radius=1.0, alpha=0.2, exits="grid", zeta=None):
    """Max ``|G_discrete(zeta', z) - G_disk(zeta', z)|`` over sites at distance
    ``>= alpha`` from the boundary and from ``zeta'``."""
    G, zeta, zp = disk_green(table, m, radius, zeta, exits)
    s = far_sites(G, radius, zp, alpha)
    cont = green_disk_continuum(radius, s / m, np.array(zp, dtype=float) / m)
    return float(np.max(np.abs(G(s) - cont)))


def green_convergence_check(table, m_values=(16, 32, 64), radius=1.0, alpha=0.2, exits="grid"):
    """Errors of the discrete Green's function against the disk formula and their log-log slope."""
    errs = [green_errors(table, m, radius, alpha, exits) for m in m_values]
    slope = float(np.polyfit(np.log(m_values), np.log(errs), 1)[0])
    return GreenConvergence(list(m_values), alpha, errs, slope)


# ---------------------------------------------------------------------------
# mean values and martingales


def mean_value_discrepancy(field, D_sites, sources, initial=None):
    """``|sum_{D_sites} field - sum_{initial} field - sum_{sources} field|``.

    ``initial`` is the starting cluster ``A(0)``. Its sites carry mass in
    ``sigma_s`` just like the emitted particles, so they belong on the
    source side of the balance.
    """
    total = float(np.sum(field(D_sites.sites()))) if D_sites.count else 0.0
    src = np.asarray(sources, dtype=np.int64).reshape(-1, 2)
    if len(src):
        total -= float(np.sum(field(src)))
    if initial is not None and initial.count:
        total -= float(np.sum(field(initial.sites())))
    return abs(total)


@dataclass
class MartingaleTrace:
    indices: np.ndarray
    increments: np.ndarray

    @property
    def M(self):
        return np.cumsum(self.increments)

    @property
    def S(self):
        return np.cumsum(self.increments**2)

    @property
    def final(self):
        return float(self.increments.sum())


class MartingaleObserver:
    """Records ``field(landing) - field(source)`` for every particle."""

    def __init__(self, field):
        self.field = field
        self._idx = []
        self._inc = []

    def observe_batch(self, indices, sources, landings):
        try:
            inc = self.field(landings) - self.field(sources)
        except KeyError as exc:
            raise ValueError(f"landing outside the field's domain; check the absorbing set ({exc})") from exc
        self._idx.append(np.asarray(indices))
        self._inc.append(np.asarray(inc, dtype=float))

    def __call__(self, index, source, landing):
        self.observe_batch(np.array([index]), np.array([source]), np.array([landing]))

    @property
    def trace(self):
        if not self._inc:
            return MartingaleTrace(np.zeros(0, dtype=np.int64), np.zeros(0))
        return MartingaleTrace(np.concatenate(self._idx), np.concatenate(self._inc))


def martingale_observer(field):
    return MartingaleObserver(field)


def exit_distribution(domain, start, n_walks, seed, first_index=0, budget=10**9, with_previous=False):
    """Exit sites of ``n_walks`` lattice walks from ``start`` leaving ``domain``.

    With ``with_previous`` also returns the last site before each exit.
    """
    seed = check_seed(seed)
    g = domain.padded(2)
    out = np.empty((4, n_walks), dtype=np.int64)
    bad = _kernels.exit_walks(g.grid.view(np.uint8), g.x0, g.y0, int(start[0]), int(start[1]),
                              n_walks, np.uint64(seed), first_index, budget, out[0], out[1], out[2], out[3])
    if bad >= 0:
        raise RuntimeError(f"walk {bad} exceeded the step budget")
    exits = out[:2].T.copy()
    if with_previous:
        return exits, out[2:].T.copy()
    return exits


def poisson_monte_carlo(ctx, D_tau_sites, starts, n_walks, seed, slit=True):
    """Monte Carlo estimate (and standard error) of the pole's exit probability."""
    interior = D_tau_sites.copy()
    interior.discard(ctx.zeta)
    starts = check_sites(starts)
    est, se = [], []
    for k, s in enumerate(starts):
        ex, prev = exit_distribution(interior, s, n_walks, seed, first_index=k * n_walks, with_previous=True)
        hit = np.all(ex == np.asarray(ctx.zeta), axis=1)
        if slit:
            hit &= np.all(prev == np.asarray(ctx.zeta_prime), axis=1)
        p = hit.mean()
        est.append(p)
        se.append(math.sqrt(p * (1 - p) / n_walks))
    return np.array(est), np.array(se)


# ---------------------------------------------------------------------------
# pole sampling and the per-pole check suite

GOLDEN_ANGLE = math.pi * (3 - math.sqrt(5))


@dataclass(frozen=True)
class PoleSample:
    zeta: tuple
    region: Disk
    tau: float


def concentric_poles(spec, m, count, offset=0.3):
    """Lattice poles on the boundaries ``D_tau`` of a concentric disk flow.

    Angles follow the golden-angle sequence and radii sweep the middle half
    of ``(r(0), r(T))``; each pole's ``D_tau`` is the disk through it.
    """
    m = check_resolution(m)
    if concentric_radius(spec, 0.0) is None:
        raise ValueError("pole sampling needs a concentric disk flow")
    c = np.asarray(spec.D0.center, dtype=float)
    cm = c * m
    if not np.allclose(cm, np.round(cm)):
        raise ValueError("the disk center must be a lattice site at this resolution")
    cm = np.round(cm).astype(np.int64)
    r_lo, r_hi = spec.D0.radius, concentric_radius(spec, spec.T)
    out, seen = [], set()
    k = 0
    while len(out) < count and k < 50 * count + 50:
        frac = (k * (math.sqrt(5) - 1) / 2) % 1.0
        r = r_lo + (r_hi - r_lo) * (0.25 + 0.5 * frac)
        a = offset + k * GOLDEN_ANGLE
        k += 1
        z = tuple(int(v) for v in cm + np.round(m * r * np.array([math.cos(a), math.sin(a)])).astype(np.int64))
        rt = math.hypot(z[0] - cm[0], z[1] - cm[1]) / m
        tau = math.pi * (rt**2 - r_lo**2)
        if z in seen or not 0 < tau < spec.T:
            continue
        seen.add(z)
        out.append(PoleSample(z, Disk(tuple(c), rt), tau))
    return out


def hf_constant(H, ctx, min_dist=3.0):
    """``max m^2 |z - zeta|^2 |H - F|`` over field sites with ``m |z - zeta| >= min_dist``."""
    s = H.sites.sites()
    d = np.hypot(*(s - np.asarray(ctx.zeta)).T)
    keep = d >= min_dist
    s, d = s[keep], d[keep]
    diff = np.abs(H(s) - continuum_F(ctx, s / ctx.m))
    return float(np.max(d**2 * diff)) if len(s) else 0.0


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    bound: float
    ok: bool

    def to_dict(self):
        return {"name": self.name, "value": self.value, "bound": self.bound, "ok": bool(self.ok)}


def pole_checks(table, ctx, D_tau_sites, constants=None):
    """Run the harmonic invariants at one pole; returns a list of :class:`Check`."""
    k = pole_constants(table) if constants is None else constants
    m = ctx.m
    out = []
    H = build_H(table, ctx)
    hz = H(ctx.zeta)
    out.append(Check("H(zeta) in [1, 2]", hz, 2.0, 1.0 <= hz <= 2.0))

    inner = H.sites.copy()
    inner.grid[[0, -1], :] = False
    inner.grid[:, [0, -1]] = False
    inner._count = int(inner.grid.sum())
    for z in ctx.exceptional():
        for dz in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
            inner.discard((z[0] + dz[0], z[1] + dz[1]))
    res = H.laplacian_residual(inner)
    out.append(Check("H grid-harmonic", res, 1e-10, res <= 1e-10))

    om = build_omega(ctx, H, D_tau_sites)
    out.append(Check("zeta on the boundary of omega", 1.0, 1.0, ctx.zeta in om.boundary))
    rest = om.boundary.copy()
    rest.discard(ctx.zeta)
    bmax = float(np.abs(H(rest.sites())).max()) if rest.count else 0.0
    bound = ctx.threshold + ctx.eps_edge
    out.append(Check("|H| on boundary", bmax, bound, bmax <= bound))
    hmin = float(H(om.omega.sites()).min())
    out.append(Check("H lower bound on omega", hmin, -bound, hmin >= -bound))

    s = H.sites.sites()
    d = np.hypot(*(s - np.asarray(ctx.zeta)).T)
    far = d > k.C2 + 1
    excess = float(np.max(H(s[far]) - 1.0 / (d[far] - k.C2))) if far.any() else -1.0
    out.append(Check("decay bound", excess, 0.0, excess <= 1e-12))

    Ht = poisson_tilde(ctx, D_tau_sites)
    out.append(Check("Htilde(zeta) = 1", Ht(ctx.zeta), 1.0, Ht(ctx.zeta) == 1.0))
    vals = Ht(Ht.sites.sites())
    out.append(Check("Htilde in [0, 1]", float(vals.min()), 0.0,
                     vals.min() >= -1e-12 and vals.max() <= 1 + 1e-12))
    si = Ht.interior.sites()
    di = np.hypot(*(si - np.asarray(ctx.zeta)).T)
    fi = di > k.C2 + 1
    pk = float(np.max(Ht(si[fi]) - ctx.threshold - 1.0 / (di[fi] - k.C2))) if fi.any() else -1.0
    out.append(Check("Poisson-kernel bound", pk, 0.0, pk <= 1e-12))

    Dg = D_tau_sites.copy()
    Dg.discard(ctx.zeta)
    G = green_discrete(table, Dg, ctx.zeta_prime, m)
    off = di > 1.0 + 1e-9
    r = Ht(si[off]) / G(si[off])
    spread = float(r.max() / r.min() - 1)
    out.append(Check("Htilde / G constant", spread, 0.05, spread <= 0.05))
    cz = float(np.median(r))
    out.append(Check("c_zeta in [1/16, 1]", cz, 1.0, 1 / 16 <= cz <= 1))
    return out
