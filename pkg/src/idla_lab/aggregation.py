"""Growth engines: internal DLA, smash sums and the divisible sandpile."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _kernels
from ._validation import check_resolution, check_seed
from .lattice import (
    Disk,
    LatticeRegion,
    SiteSet,
    sites_in,
)
from .sources import DiskGrowth, discretize, sigma

DEFAULT_STEP_BUDGET = 10**9
SANDPILE_TOL = 1e-8
OCCUPIED_THRESHOLD = 1 - 1e-6


class WalkBudgetExceeded(RuntimeError):
    """A random walk ran past its step budget (usually a geometry bug)."""


# ---------------------------------------------------------------------------
# IDLA


@dataclass
class IdlaState:
    """Mutable state of one IDLA run; owned by a single executor.

    ``landings`` is the audit of landing sites in particle order, so the
    occupied set after any prefix can be rebuilt by :meth:`occupied_at`.
    """

    m: int
    occupied: SiteSet
    t: int
    seed: int
    initial: SiteSet
    landings: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    step_budget: int = DEFAULT_STEP_BUDGET

    @property
    def landing_sites(self):
        if not self.landings:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate(self.landings)

    @property
    def walk_lengths(self):
        if not self.lengths:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.lengths)

    def occupied_at(self, t):
        """Occupied set after the first ``t`` particles."""
        if not 0 <= t <= self.t:
            raise ValueError(f"particle count {t} outside [0, {self.t}]")
        out = self.initial.reboxed(self.occupied.box)
        land = self.landing_sites[:t]
        if len(land):
            out.grid[land[:, 0] - out.x0, land[:, 1] - out.y0] = True
            out._count = int(out.grid.sum())
        return out

    def copy(self):
        return IdlaState(
            self.m,
            self.occupied.copy(),
            self.t,
            self.seed,
            self.initial,
            list(self.landings),
            list(self.lengths),
            self.step_budget,
        )


def init_idla(spec, m, seed, step_budget=DEFAULT_STEP_BUDGET):
    """Start an IDLA run from ``A_m(0) = lattice ∩ D0``."""
    m = check_resolution(m)
    seed = check_seed(seed)
    initial = sites_in(spec.D0, m)
    pad = int(math.ceil(m * math.sqrt(max(spec.T, 0.0) / math.pi))) + 4
    occupied = initial.padded(pad)
    initial = SiteSet(occupied.x0, occupied.y0, occupied.grid.copy())
    return IdlaState(m, occupied, 0, seed, initial, step_budget=step_budget)


def _grow(state, pad):
    state.occupied = state.occupied.padded(pad)


def _absorb_grid(state, absorb):
    if absorb is None:
        return np.zeros((1, 1), dtype=np.uint8), False
    g = np.zeros(state.occupied.grid.shape, dtype=np.uint8)
    sites = absorb.sites()
    ix = sites[:, 0] - state.occupied.x0
    iy = sites[:, 1] - state.occupied.y0
    nx, ny = g.shape
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    g[ix[ok], iy[ok]] = 1
    return g, True


def _release(state, src, absorb=None):
    """Run the walks for ``src`` (``(n, 2)`` sites) and update ``state``."""
    n = len(src)
    land = np.empty((n, 2), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    done = 0
    seed = np.uint64(state.seed)
    while done < n:
        occ = state.occupied.grid.view(np.uint8)
        ab, use_ab = _absorb_grid(state, absorb)
        lx = np.empty(n - done, dtype=np.int64)
        ly = np.empty(n - done, dtype=np.int64)
        ln = np.empty(n - done, dtype=np.int64)
        sx = np.ascontiguousarray(src[done:, 0])
        sy = np.ascontiguousarray(src[done:, 1])
        # sources outside the grid land where they stand
        k_done, status = _kernels.idla_walks(
            occ, ab, use_ab, state.occupied.x0, state.occupied.y0, sx, sy, seed,
            state.t + done, state.step_budget, lx, ly, ln,
        )
        land[done : done + k_done, 0] = lx[:k_done]
        land[done : done + k_done, 1] = ly[:k_done]
        lengths[done : done + k_done] = ln[:k_done]
        done += k_done
        if status == _kernels.BUDGET:
            state.occupied._count = int(state.occupied.grid.sum())
            raise WalkBudgetExceeded(
                f"particle {state.t + done} exceeded {state.step_budget} steps; check the geometry"
            )
        if status == _kernels.EDGE:
            _grow(state, max(8, state.occupied.grid.shape[0] // 4))
    state.occupied._count = int(state.occupied.grid.sum())
    state.landings.append(land)
    state.lengths.append(lengths)
    state.t += n
    return land


def _ensure_sources_inside(state, src):
    if len(src) == 0:
        return
    xmin, xmax, ymin, ymax = state.occupied.box
    lo = src.min(axis=0)
    hi = src.max(axis=0)
    need = max(xmin - lo[0] + 1, ymin - lo[1] + 1, hi[0] - xmax + 1, hi[1] - ymax + 1, 0)
    if need > 0:
        _grow(state, int(need) + 2)


def step_idla(state, source, absorb=None):
    """Release one particle from ``source``; return its landing site.

    The walk stops at the first site outside the occupied set, or outside
    ``absorb`` when given. A source that is not occupied lands immediately.
    """
    src = np.asarray([source], dtype=np.int64).reshape(1, 2)
    _ensure_sources_inside(state, src)
    land = _release(state, src, absorb)
    return tuple(int(v) for v in land[0])


def run_idla(state, seq, t_max=None, observers=(), absorb=None):
    """Release the sources ``seq[state.t : t_max]`` in order.

    Each observer is called as ``observer(index, source, landing)`` per
    particle, or through ``observer.observe_batch(indices, sources, landings)``
    when it provides that method.
    """
    if t_max is None:
        t_max = len(seq)
    if t_max > len(seq):
        raise ValueError(f"t_max={t_max} exceeds the sequence length {len(seq)}")
    t0 = state.t
    if t_max <= t0:
        return state
    src = np.column_stack([seq.x[t0:t_max], seq.y[t0:t_max]]).astype(np.int64)
    _ensure_sources_inside(state, src)
    land = _release(state, src, absorb)
    idx = np.arange(t0, t_max)
    for obs in observers:
        if hasattr(obs, "observe_batch"):
            obs.observe_batch(idx, src, land)
        else:
            for i, s, l in zip(idx, src, land):
                obs(int(i), tuple(map(int, s)), tuple(map(int, l)))
    return state


class IDLA(BaseEstimator):
    """Internal DLA driven by a flow's source sequence.

    Parameters
    ----------
    m : int
        Lattice resolution.
    seed : int
        Base seed of the counter-based walk generator.
    ordering : {"lex", "reverse", "shuffle"}
        Order of sources sharing a release time.
    step_budget : int
        Per-particle step limit.

    Attributes
    ----------
    sequence_ : SourceSequence
    state_ : IdlaState
    """

    def __init__(self, m=32, seed=0, ordering="lex", step_budget=DEFAULT_STEP_BUDGET):
        self.m = m
        self.seed = seed
        self.ordering = ordering
        self.step_budget = step_budget

    def fit(self, flow, t_max=None, observers=(), absorb=None, sequence=None):
        m = check_resolution(self.m)
        seq = discretize(flow, m) if sequence is None else sequence
        if self.ordering != "lex":
            seq = seq.reordered(self.ordering, seed=self.seed)
        state = init_idla(flow, m, self.seed, self.step_budget)
        run_idla(state, seq, t_max, observers, absorb)
        self.sequence_ = seq
        self.state_ = state
        self.n_particles_ = state.t
        return self

    @property
    def occupied_(self):
        check_is_fitted(self, "state_")
        return self.state_.occupied

    @property
    def landings_(self):
        check_is_fitted(self, "state_")
        return self.state_.landing_sites

    def occupied_at(self, t):
        check_is_fitted(self, "state_")
        return self.state_.occupied_at(t)


# ---------------------------------------------------------------------------
# smash sum


def smash_sum(A, B, seed, step_budget=DEFAULT_STEP_BUDGET):
    """Diaconis-Fulton sum: walk each collision of ``A ∩ B`` out of the union.

    Collisions are released in lexicographic order of site.
    """
    seed = check_seed(seed)
    C = A.union(B)
    collisions = A.intersection(B).sites()
    if len(collisions) == 0:
        return C
    order = np.lexsort((collisions[:, 1], collisions[:, 0]))
    collisions = collisions[order]
    pad = int(math.ceil(math.sqrt(len(collisions)))) + 4
    state = IdlaState(1, C.padded(pad), 0, seed, C, step_budget=step_budget)
    _release(state, collisions)
    return state.occupied


# ---------------------------------------------------------------------------
# divisible sandpile


@dataclass
class SandpileState:
    """Real-valued mass on the sites ``(x0 + i, y0 + j)``."""

    m: int
    x0: int
    y0: int
    mass: np.ndarray
    tolerance: float = SANDPILE_TOL

    def total(self):
        return float(self.mass.sum())

    def copy(self):
        return SandpileState(self.m, self.x0, self.y0, self.mass.copy(), self.tolerance)

    def padded(self, pad):
        return SandpileState(self.m, self.x0 - pad, self.y0 - pad, np.pad(self.mass, pad), self.tolerance)

    def occupied(self, threshold=OCCUPIED_THRESHOLD):
        return SiteSet(self.x0, self.y0, self.mass >= threshold)

    @classmethod
    def point_mass(cls, total, m=1, pad=None):
        if pad is None:
            pad = int(math.ceil(math.sqrt(total / math.pi))) + 4
        mass = np.zeros((2 * pad + 1, 2 * pad + 1))
        mass[pad, pad] = total
        return cls(m, -pad, -pad, mass)

    @classmethod
    def from_flow(cls, spec, s, m):
        """Mass ``sigma_s`` on the lattice ``(1/m)Z^2``."""
        m = check_resolution(m)
        base = sites_in(spec.D0, m)
        pad = int(math.ceil(m * math.sqrt(max(s, 0.0) / math.pi))) + 6
        base = base.padded(pad)
        xs = np.arange(base.x0, base.x0 + base.grid.shape[0])
        ys = np.arange(base.y0, base.y0 + base.grid.shape[1])
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()]) / m
        mass = sigma(spec, s, pts).reshape(X.shape).astype(float)
        return cls(m, base.x0, base.y0, mass)


class SandpileNotConverged(RuntimeError):
    pass


def _laplacian(nx, ny):
    """``I - P/4`` on an ``nx`` by ``ny`` grid with zero exterior values."""
    n = nx * ny
    idx = np.arange(n).reshape(nx, ny)
    rows, cols = [idx.ravel()], [idx.ravel()]
    vals = [np.ones(n)]
    for a, b in (((slice(1, None), slice(None)), (slice(None, -1), slice(None))),
                 ((slice(None, -1), slice(None)), (slice(1, None), slice(None))),
                 ((slice(None), slice(1, None)), (slice(None), slice(None, -1))),
                 ((slice(None), slice(None, -1)), (slice(None), slice(1, None)))):
        r = idx[a].ravel()
        c = idx[b].ravel()
        rows.append(r)
        cols.append(c)
        vals.append(np.full(len(r), -0.25))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def _coarse_guess(mass):
    """Active-set guess from the problem on a grid twice as coarse."""
    nx, ny = mass.shape
    px, py = nx % 2, ny % 2
    m2 = np.pad(mass, ((0, px), (0, py)))
    coarse = m2.reshape(m2.shape[0] // 2, 2, m2.shape[1] // 2, 2).sum(axis=(1, 3)) / 4.0
    _, u, _ = solve_odometer(coarse)
    fine = np.repeat(np.repeat(u > 0, 2, axis=0), 2, axis=1)[:nx, :ny]
    grown = fine.copy()
    grown[1:] |= fine[:-1]
    grown[:-1] |= fine[1:]
    grown[:, 1:] |= fine[:, :-1]
    grown[:, :-1] |= fine[:, 1:]
    return grown & (mass > 0) | (mass > 1)


def solve_odometer(mass, max_iter=500, multilevel=True):
    """Exact final configuration via the odometer obstacle problem.

    Finds ``u >= 0`` with ``nu = mass - (I - P/4) u <= 1`` and ``nu = 1``
    wherever ``u > 0`` by a primal-dual active-set iteration, warm-started
    from a coarser grid. Returns ``(nu, u, iterations)``.
    """
    nx, ny = mass.shape
    A = _laplacian(nx, ny)
    f = (mass - 1.0).ravel()
    if multilevel and min(nx, ny) >= 48:
        J = _coarse_guess(mass).ravel()
    else:
        J = f > 0
    u = np.zeros(nx * ny)
    for it in range(1, max_iter + 1):
        u = np.zeros(nx * ny)
        if J.any():
            idx = np.flatnonzero(J)
            u[idx] = spsolve(A[idx][:, idx].tocsc(), f[idx])
        w = A @ u - f
        J_new = (J & (u > 0)) | (~J & (w < -1e-13))
        if np.array_equal(J_new, J):
            break
        J = J_new
    else:
        raise SandpileNotConverged(f"active set did not settle in {max_iter} iterations")
    nu = mass - (A @ u).reshape(nx, ny)
    return nu, u.reshape(nx, ny), it


def _border_mass(mass, tol):
    edge = np.concatenate([mass[0], mass[-1], mass[:, 0], mass[:, -1]])
    return bool(np.any(edge > tol))


def stabilize_sandpile(initial, schedule="sweep", max_iter=None):
    """Topple until no site carries more than ``1 + tolerance``.

    ``schedule`` selects the toppling order: ``"sweep"`` (raster Gauss-Seidel
    sweeps), ``"priority"`` (largest excess first) or ``"obstacle"`` (solve for
    the exact limit directly). The grid is grown whenever mass reaches its
    border. Returns ``(final_state, occupied)``.
    """
    state = initial.copy()
    tol = state.tolerance
    for _ in range(32):
        if schedule == "sweep":
            budget = max_iter or 10**6
            n, worst, border = _kernels.topple_sweep(state.mass, tol, budget)
        elif schedule == "priority":
            budget = max_iter or 10**9
            n, worst, border = _kernels.topple_priority(state.mass, tol, budget)
        elif schedule == "obstacle":
            nu, u, n = solve_odometer(state.mass)
            border = _border_mass(u, 0.0)
            if not border:
                state.mass = nu
            worst = float(max(nu.max() - 1.0, 0.0))
        else:
            raise ValueError(f"unknown toppling schedule {schedule!r}")
        if border:
            state = state.padded(max(8, state.mass.shape[0] // 4))
            continue
        if worst > tol:
            raise SandpileNotConverged(f"excess {worst:.3g} remains after {n} iterations")
        return state, state.occupied()
    raise SandpileNotConverged("sandpile kept reaching the grid border")


class DivisibleSandpile(BaseEstimator):
    """Divisible sandpile stabiliser.

    Parameters
    ----------
    schedule : {"sweep", "priority", "obstacle"}
    tolerance : float
        Allowed excess mass per site.
    threshold : float
        Minimum mass for a site to count as occupied.
    """

    def __init__(self, schedule="obstacle", tolerance=SANDPILE_TOL, threshold=OCCUPIED_THRESHOLD):
        self.schedule = schedule
        self.tolerance = tolerance
        self.threshold = threshold

    def fit(self, X):
        """``X`` is a :class:`SandpileState` or a 2-D mass array (origin at 0)."""
        if not isinstance(X, SandpileState):
            X = np.asarray(X, dtype=float)
            if X.ndim != 2:
                raise ValueError("mass must be a 2-D array")
            X = SandpileState(1, 0, 0, X)
        X = SandpileState(X.m, X.x0, X.y0, X.mass, self.tolerance)
        final, _ = stabilize_sandpile(X, self.schedule)
        self.final_ = final
        self.mass_ = final.mass
        self.occupied_ = final.occupied(self.threshold)
        return self

    def transform(self, X):
        return self.fit(X).occupied_


# ---------------------------------------------------------------------------
# deterministic flow D_s


def concentric_radius(spec, s):
    """Radius of ``D_s`` when every source is a disk concentric with a disk D0.

    By rotational symmetry ``D_s`` is then the disk of area
    ``area(D0) + s``; returns ``None`` for any other flow.
    """
    D0 = spec.D0
    if not isinstance(D0, Disk):
        return None
    for fam in spec.families:
        if not isinstance(fam.growth, DiskGrowth) or not np.allclose(fam.growth.center, D0.center):
            return None
    return math.sqrt(D0.radius**2 + s / math.pi)


def reference_flow(spec, s, m_ref, analytic=True):
    """Lattice approximation of ``D_s`` at resolution ``m_ref``.

    Concentric disk flows use the exact disk when ``analytic``; otherwise the
    divisible sandpile started from ``sigma_s`` is stabilised.
    """
    if not -1e-12 <= s <= spec.T + 1e-12:
        raise ValueError(f"time {s} outside [0, {spec.T}]")
    m_ref = check_resolution(m_ref)
    r = concentric_radius(spec, s) if analytic else None
    if r is not None:
        return sites_in(Disk(spec.D0.center, r), m_ref)
    if s <= 0:
        return sites_in(spec.D0, m_ref)
    _, occ = stabilize_sandpile(SandpileState.from_flow(spec, s, m_ref), "obstacle")
    return occ


def reference_region(spec, s, m_ref, analytic=True):
    """``D_s`` as a continuum region (exact disk or a lattice oracle region)."""
    r = concentric_radius(spec, s) if analytic else None
    if r is not None:
        return Disk(spec.D0.center, r)
    return LatticeRegion(reference_flow(spec, s, m_ref, analytic=False), m_ref)


HARMONIC_TESTS = {
    "1": lambda x, y: np.ones_like(x),
    "Re z": lambda x, y: x,
    "Im z": lambda x, y: y,
    "Re z^2": lambda x, y: x * x - y * y,
    "Im z^2": lambda x, y: 2 * x * y,
    "Re z^3": lambda x, y: x**3 - 3 * x * y * y,
    "Im z^3": lambda x, y: 3 * x * x * y - y**3,
}


def quadrature_check(spec, s, m_ref, h, analytic=False, reference=None):
    """``|sum_{D_s} h / m^2 - sum h sigma_s / m^2|`` on the ``m_ref`` lattice.

    ``h`` is a callable ``h(x, y)``, a key of :data:`HARMONIC_TESTS`, or a
    list of either (then a list of discrepancies is returned). The oracle is
    the divisible sandpile unless ``analytic``; the exact lattice disk carries
    lattice-point counting noise that does not shrink steadily with
    ``m_ref``. A precomputed ``reference`` site set may be passed in.
    """
    many = isinstance(h, (list, tuple))
    tests = [HARMONIC_TESTS[f] if isinstance(f, str) else f for f in (h if many else [h])]
    m_ref = check_resolution(m_ref)
    ref = reference_flow(spec, s, m_ref, analytic=analytic) if reference is None else reference
    p = ref.points(m_ref)
    dens = SandpileState.from_flow(spec, s, m_ref)
    X, Y = np.meshgrid(
        np.arange(dens.x0, dens.x0 + dens.mass.shape[0]) / m_ref,
        np.arange(dens.y0, dens.y0 + dens.mass.shape[1]) / m_ref,
        indexing="ij",
    )
    out = []
    for f in tests:
        lhs = float(np.sum(f(p[:, 0], p[:, 1]))) / m_ref**2
        rhs = float(np.sum(f(X, Y) * dens.mass)) / m_ref**2
        out.append(abs(lhs - rhs))
    return out if many else out[0]


# ---------------------------------------------------------------------------
# snapshots


def to_pgm(sites, value=255):
    """Binary PGM (P5) raster; row 0 is the top (largest y)."""
    img = np.where(sites.grid.T[::-1], value, 0).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def from_pgm(data, x0=0, y0=0):
    header, rest = data.split(b"\n", 3)[:3], data.split(b"\n", 3)[3]
    w, h = map(int, header[1].split())
    img = np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)
    return SiteSet(x0, y0, (img[::-1].T > 0))


def to_rle(sites):
    """Row-major run-length encoding of the occupancy grid as a dict."""
    flat = sites.grid.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(np.r_[0, flat, 0]))
    runs = np.diff(np.r_[0, change]).tolist()
    return {"x0": sites.x0, "y0": sites.y0, "shape": list(sites.grid.shape), "first": 0, "runs": runs}


def from_rle(obj):
    nx, ny = obj["shape"]
    flat = np.zeros(nx * ny + 1, dtype=bool)
    pos, val = 0, bool(obj["first"])
    for r in obj["runs"]:
        flat[pos : pos + r] = val
        pos += r
        val = not val
    return SiteSet(obj["x0"], obj["y0"], flat[: nx * ny].reshape(nx, ny))


def snapshot_metadata(spec, state):
    return {"seed": state.seed, "spec_hash": spec.spec_hash(), "m": state.m, "t": state.t,
            "count": state.occupied.count, "box": list(state.occupied.box)}


def write_snapshot(path_stem, spec, state, sites=None):
    """Write ``<stem>.pgm``, ``<stem>.rle.json`` and ``<stem>.meta.json``."""
    from pathlib import Path

    stem = Path(path_stem)
    sites = state.occupied if sites is None else sites
    stem.with_suffix(".pgm").write_bytes(to_pgm(sites))
    stem.with_suffix(".rle.json").write_text(json.dumps(to_rle(sites)))
    stem.with_suffix(".meta.json").write_text(json.dumps(snapshot_metadata(spec, state), sort_keys=True))
    return [stem.with_suffix(".pgm"), stem.with_suffix(".rle.json"), stem.with_suffix(".meta.json")]
