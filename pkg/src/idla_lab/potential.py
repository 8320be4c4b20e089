"""Recurrent potential kernel of the planar simple random walk.

The table is built exactly. Every value has the form ``A + B / (D pi)``
with integers ``A``, ``B`` and ``D`` the lcm of the odd numbers below
``2L``: the diagonal is known in closed form and the rest of the octant
follows from discrete harmonicity, column by column. Only the final
conversion to doubles rounds, so there is no propagation instability.
"""

import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import gmpy2
import numpy as np
from gmpy2 import mpfr, mpz
from scipy.stats import binom
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _kernels
from ._validation import check_resolution, check_seed, check_sites

# exact construction is checked up to this half-width (about 15 s)
MAX_L = 1200
EULER_GAMMA = 0.5772156649015329
# classical constant in g(z) = lambda + (2/pi) log|z| + O(|z|^-2)
LAMBDA_CLASSICAL = (2 * EULER_GAMMA + 3 * math.log(2)) / math.pi


class OutOfTable(IndexError):
    pass


@dataclass(frozen=True)
class PotentialTable:
    """Values of ``g`` on ``[-L, L]^2``; ``values[x + L, y + L] = g(x, y)``."""

    L: int
    values: np.ndarray

    def __call__(self, x, y=None):
        if y is None:
            z = np.asarray(x)
            x, y = z[..., 0], z[..., 1]
        x = np.asarray(x)
        y = np.asarray(y)
        if np.any(np.abs(x) > self.L) or np.any(np.abs(y) > self.L):
            raise OutOfTable(f"site outside the table [-{self.L}, {self.L}]^2")
        return self.values[x + self.L, y + self.L]

    @property
    def coords(self):
        r = np.arange(-self.L, self.L + 1)
        return np.meshgrid(r, r, indexing="ij")

    def laplacian(self):
        """``(1/4) sum of neighbours - g`` on the interior ``[-L+1, L-1]^2``."""
        g = self.values
        return 0.25 * (g[2:, 1:-1] + g[:-2, 1:-1] + g[1:-1, 2:] + g[1:-1, :-2]) - g[1:-1, 1:-1]

    def harmonicity_residual(self):
        """``(max |lap g| off the origin, |lap g(0) - 1|)``."""
        lap = self.laplacian()
        c = self.L - 1
        at0 = abs(lap[c, c] - 1.0)
        lap[c, c] = 0.0
        return float(np.abs(lap).max()), float(at0)

    def checksum(self):
        return hashlib.sha256(np.ascontiguousarray(self.values, dtype="<f8").tobytes()).hexdigest()

    def to_bytes(self):
        header = {"L": self.L, "dtype": "<f8", "checksum": self.checksum()}
        return json.dumps(header).encode() + b"\n" + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data):
        head, _, body = data.partition(b"\n")
        header = json.loads(head)
        L = int(header["L"])
        values = np.frombuffer(body, dtype="<f8").reshape(2 * L + 1, 2 * L + 1).copy()
        table = cls(L, values)
        if table.checksum() != header["checksum"]:
            raise ValueError("potential table checksum mismatch")
        return table

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def _octant_exact(L):
    """Integer coefficients ``(A, B, D)`` on ``0 <= y <= x <= L``."""
    D = mpz(1)
    for k in range(3, 2 * L, 2):
        D = gmpy2.lcm(D, k)
    A = [[mpz(0)] * (x + 1) for x in range(L + 1)]
    B = [[mpz(0)] * (x + 1) for x in range(L + 1)]
    A[1][0] = mpz(1)
    s = mpz(0)
    for n in range(1, L + 1):
        s += 4 * (D // (2 * n - 1))
        B[n][n] = s

    def at(x, y):
        y = abs(y)
        if y > x:
            x, y = y, x
        return A[x][y], B[x][y]

    for x in range(1, L):
        a1, b1 = at(x, x)
        a2, b2 = at(x, x - 1)
        A[x + 1][x] = 2 * a1 - a2
        B[x + 1][x] = 2 * b1 - b2
        for y in range(x):
            a0, b0 = at(x, y)
            al, bl = at(x - 1, y)
            au, bu = at(x, y + 1)
            ad, bd = at(x, y - 1)
            A[x + 1][y] = 4 * a0 - al - au - ad
            B[x + 1][y] = 4 * b0 - bl - bu - bd
    return A, B, D


def exact_potential(L, cache_dir=None):
    """Exact potential-kernel table on ``[-L, L]^2`` for ``2 <= L <= MAX_L``.

    With ``cache_dir`` (default: ``$IDLA_LAB_CACHE`` when set) tables are
    stored and reloaded as ``potential_L<L>.bin``.
    """
    if isinstance(L, bool) or not isinstance(L, (int, np.integer)):
        raise TypeError("L must be an integer")
    L = int(L)
    if L < 2:
        raise ValueError("L must be at least 2")
    if L > MAX_L:
        raise ValueError(f"L={L} exceeds the validated range L <= {MAX_L}")
    if cache_dir is None:
        cache_dir = os.environ.get("IDLA_LAB_CACHE")
    path = Path(cache_dir) / f"potential_L{L}.bin" if cache_dir else None
    if path is not None and path.exists():
        try:
            return PotentialTable.load(path)
        except ValueError as exc:
            warnings.warn(f"rebuilding corrupt potential cache {path}: {exc}", RuntimeWarning, stacklevel=2)

    A, B, D = _octant_exact(L)
    bits = max(max(abs(v).bit_length() for row in A for v in row),
               max(abs(v).bit_length() for row in B for v in row))
    with gmpy2.context(gmpy2.get_context(), precision=bits + 128):
        d_pi = mpfr(D) * gmpy2.const_pi()
        octant = np.zeros((L + 1, L + 1))
        for x in range(L + 1):
            for y in range(x + 1):
                octant[x, y] = float(mpfr(A[x][y]) + mpfr(B[x][y]) / d_pi)
    quad = octant + np.triu(octant.T, 1)
    full = np.zeros((2 * L + 1, 2 * L + 1))
    full[L:, L:] = quad
    full[:L + 1, L:] = quad[::-1]
    full[L:, :L + 1] = quad[:, ::-1]
    full[:L + 1, :L + 1] = quad[::-1, ::-1]
    table = PotentialTable(L, full)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        table.save(path)
    return table


@dataclass(frozen=True)
class AsymptoticParams:
    lam: float
    C1: float
    r_min: float
    r_max: float

    def remainder_bound(self, r):
        return self.C1 / np.asarray(r, dtype=float) ** 2


def remainder(table, lam):
    """``g(z) - lam - (2/pi) log|z|`` on the table (NaN at the origin)."""
    X, Y = table.coords
    R = np.hypot(X, Y)
    with np.errstate(divide="ignore"):
        out = table.values - lam - (2 / np.pi) * np.log(R)
    out[table.L, table.L] = np.nan
    return out


def fit_lambda(table, r_min=2.0):
    """Fit ``lambda`` on ``L/2 <= |z| <= L`` and the remainder constant ``C1``."""
    L = table.L
    if L < 50:
        raise ValueError("fit_lambda needs a table with L >= 50")
    X, Y = table.coords
    R = np.hypot(X, Y)
    far = (R >= L / 2) & (R <= L)
    lam = float(np.mean(table.values[far] - (2 / np.pi) * np.log(R[far])))
    band = (R >= r_min) & (R <= L)
    C1 = float(np.max(R[band] ** 2 * np.abs(remainder(table, lam)[band])))
    return AsymptoticParams(lam, C1, r_min, float(L))


def truncated_potential(z, n_steps):
    """Exact ``sum_{n <= n_steps} (P_n(0) - P_n(z))``.

    Uses the rotation ``(x + y, x - y)`` that splits the planar walk into two
    independent +-1 walks.
    """
    x, y = int(z[0]), int(z[1])
    n = np.arange(n_steps + 1)

    def p(a, b):
        ok = ((n + a) % 2 == 0) & (np.abs(a) <= n) & (np.abs(b) <= n)
        k1 = (n + a) // 2
        k2 = (n + b) // 2
        return np.where(ok, binom.pmf(k1, n, 0.5) * binom.pmf(k2, n, 0.5), 0.0)

    return float(np.sum(p(0, 0) - p(x + y, x - y)))


def monte_carlo_potential(sites, n_steps, n_walks, seed):
    """Monte Carlo estimate of the truncated sum at each site, with standard errors."""
    sites = check_sites(sites)
    seed = check_seed(seed)
    r = int(np.abs(sites).max()) if len(sites) else 0
    counts = _kernels.visit_counts(r, n_steps, n_walks, np.uint64(seed), 0)
    diff = counts[:, r, r][:, None] - counts[:, sites[:, 0] + r, sites[:, 1] + r]
    mean = diff.mean(axis=0)
    se = diff.std(axis=0, ddof=1) / math.sqrt(n_walks)
    return mean, se


# ---------------------------------------------------------------------------
# directional derivatives


@dataclass(frozen=True)
class Direction:
    """Unit vector ``alpha1 e_x + alpha2 (e_x + e_y)`` in the east-northeast octant."""

    alpha1: float
    alpha2: float

    def __post_init__(self):
        if self.alpha1 < -1e-12 or self.alpha2 < -1e-12:
            raise ValueError("alpha1 and alpha2 must be nonnegative")
        if abs(math.hypot(self.alpha1 + self.alpha2, self.alpha2) - 1) > 1e-9:
            raise ValueError("direction must have unit length")

    @classmethod
    def from_angle(cls, theta):
        if not -1e-12 <= theta <= math.pi / 4 + 1e-12:
            raise ValueError("angle must lie in [0, pi/4]")
        nx, ny = math.cos(theta), math.sin(theta)
        return cls(max(nx - ny, 0.0), max(ny, 0.0))

    @property
    def vector(self):
        return np.array([self.alpha1 + self.alpha2, self.alpha2])

    @property
    def angle(self):
        return math.atan2(self.alpha2, self.alpha1 + self.alpha2)


def dir_derivative(table, n, z):
    """``alpha1 g(z - 1) + alpha2 g(z - (1+i)) - (alpha1 + alpha2) g(z)``."""
    z = np.asarray(z)
    x, y = z[..., 0], z[..., 1]
    return (n.alpha1 * table(x - 1, y) + n.alpha2 * table(x - 1, y - 1)
            - (n.alpha1 + n.alpha2) * table(x, y))


def derivative_grid(table, n):
    """Directional derivative on the whole table; NaN where it needs sites off the table."""
    g = table.values
    out = np.full_like(g, np.nan)
    out[1:, 1:] = n.alpha1 * g[:-1, 1:] + n.alpha2 * g[:-1, :-1] - (n.alpha1 + n.alpha2) * g[1:, 1:]
    return out


def dyadic_angles(count):
    """``count`` angles in ``[0, pi/4]``: both ends, then dyadic midpoints.

    Each list is a prefix of the next, so minima over them only decrease.
    """
    fr = [0.0, 1.0]
    level = 1
    while len(fr) < count:
        k = 2**level
        fr.extend(j / k for j in range(1, k, 2))
        level += 1
    return [math.pi / 4 * f for f in fr[:count]]


def _c_for_direction(table, n, mode, radius):
    f = derivative_grid(table, n)
    X, Y = table.coords
    ok = np.isfinite(f) & (np.hypot(X, Y) <= radius)
    v = n.vector
    proj = X * v[0] + Y * v[1]
    best = float(proj[ok & (f <= 0)].min(initial=np.inf))
    if mode == "sites":
        return best
    if mode != "grid":
        raise ValueError(f"unknown mode {mode!r}")
    # zero crossings along lattice edges
    for sl0, sl1 in (((slice(None, -1), slice(None)), (slice(1, None), slice(None))),
                     ((slice(None), slice(None, -1)), (slice(None), slice(1, None)))):
        f0, f1 = f[sl0], f[sl1]
        both = ok[sl0] & ok[sl1]
        cross = both & ((f0 > 0) != (f1 > 0))
        if not cross.any():
            continue
        a, b = f0[cross], f1[cross]
        t = a / (a - b)
        p0, p1 = proj[sl0][cross], proj[sl1][cross]
        best = min(best, float(np.min(p0 + t * (p1 - p0))))
    return best


def c_profile(table, angles, mode="grid", radius=None):
    """The constant ``c`` for each direction angle separately."""
    if radius is None:
        radius = table.L / 2
    return np.array([_c_for_direction(table, Direction.from_angle(a), mode, radius) for a in angles])


def estimate_c(table, directions=32, mode="grid", radius=None):
    """Largest ``c`` with a positive directional derivative on ``{z . n <= c}``.

    Minimised over ``directions`` sampled angles in ``[0, pi/4]`` and over
    ``|z| <= L/2``. ``mode="grid"`` interpolates linearly along lattice edges
    (the grid of horizontal and vertical lines); ``mode="sites"`` looks at
    lattice sites only and gives a larger value.
    """
    if table.L < 100:
        raise ValueError("estimate_c needs a table with L >= 100")
    return float(c_profile(table, dyadic_angles(directions), mode, radius).min())


@dataclass
class InclusionReport:
    threshold: float
    radius: float
    checked: int
    violations: np.ndarray

    @property
    def ok(self):
        return len(self.violations) == 0


def required_R0prime(C2, R0, c):
    """Smallest admissible outer radius ``4 C2 R0 / c``."""
    return 4 * C2 * R0 / c


def check_level_set_inclusion(table, n, m, R0, R0prime):
    """Check ``{derivative < -1/(2 m R0)}`` lies in the disk of radius
    ``m R0prime`` tangent to the origin in direction ``n``.

    Coordinates are table (lattice) units. Returns the violating sites.
    """
    m = check_resolution(m)
    f = derivative_grid(table, n)
    X, Y = table.coords
    thr = -1.0 / (2 * m * R0)
    rad = m * R0prime
    v = n.vector
    low = np.isfinite(f) & (f < thr)
    outside = np.hypot(X - rad * v[0], Y - rad * v[1]) > rad * (1 + 1e-12)
    bad = low & outside
    viol = np.column_stack([X[bad], Y[bad]])
    return InclusionReport(thr, rad, int(np.isfinite(f).sum()), viol)


class PotentialKernel(BaseEstimator):
    """Potential-kernel table with its fitted asymptotics and the constant ``c``.

    Parameters
    ----------
    L : int
        Table half-width.
    n_directions : int
        Directions sampled for ``c``.
    mode : {"grid", "sites"}
    cache_dir : str or None
    """

    def __init__(self, L=150, n_directions=32, mode="grid", cache_dir=None):
        self.L = L
        self.n_directions = n_directions
        self.mode = mode
        self.cache_dir = cache_dir

    def fit(self, X=None, y=None):
        self.table_ = exact_potential(self.L, self.cache_dir)
        params = fit_lambda(self.table_)
        self.lambda_ = params.lam
        self.C1_ = params.C1
        self.angles_ = np.array(dyadic_angles(self.n_directions))
        self.c_by_direction_ = c_profile(self.table_, self.angles_, self.mode)
        self.c_ = float(self.c_by_direction_.min())
        return self

    def transform(self, X):
        """Kernel values at the integer sites ``X`` (shape ``(n, 2)``)."""
        check_is_fitted(self, "table_")
        return self.table_(check_sites(X))
