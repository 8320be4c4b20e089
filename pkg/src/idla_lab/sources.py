"""Concentrated mass distributions and their lattice source sequences."""

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_nonnegative, check_points, check_resolution
from .lattice import (
    MEMBERSHIP_TOL,
    Disk,
    Polygon,
    Region,
    polygon_area,
    region_from_dict,
    sites_in,
)


class FlowValidationError(ValueError):
    """A flow spec breaks one of the mass-distribution conditions.

    ``report`` carries the full :class:`ValidationReport`.
    """

    def __init__(self, report):
        self.report = report
        super().__init__(str(report))


# ---------------------------------------------------------------------------
# growth laws: u -> Q(u) with area(Q(u)) == u


class GrowthLaw:
    """A nested family of regions indexed by their volume ``u``."""

    def region(self, u):
        raise NotImplementedError

    def entry_time(self, points, u_max):
        """Smallest ``u`` in ``(0, u_max]`` with each point in ``Q(u)``.

        Points never covered get ``inf``. The default bisects on closed
        membership, which is monotone in ``u`` for nested families.
        """
        points = check_points(points)
        out = np.full(len(points), np.inf)
        if u_max <= 0:
            return out
        inside_end = self.region(u_max).contains(points)
        for k in np.flatnonzero(inside_end):
            p = points[k : k + 1]
            lo, hi = 0.0, u_max
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if self.region(mid).contains(p)[0]:
                    hi = mid
                else:
                    lo = mid
            out[k] = hi
        return out

    def to_dict(self):
        raise NotImplementedError


class DiskGrowth(GrowthLaw):
    """Disks of area ``u`` about a fixed centre."""

    def __init__(self, center):
        self.center = np.asarray(center, dtype=float).reshape(2)

    def region(self, u):
        return Disk(self.center, math.sqrt(max(u, 0.0) / math.pi))

    def entry_time(self, points, u_max):
        points = check_points(points)
        r2 = ((points - self.center) ** 2).sum(axis=1)
        u = math.pi * r2
        return np.where(u <= u_max * (1 + MEMBERSHIP_TOL) + MEMBERSHIP_TOL, np.minimum(u, u_max), np.inf)

    def to_dict(self):
        return {"disk_centered": self.center.tolist()}


class AffinePolygonGrowth(GrowthLaw):
    """Polygons interpolating affinely from ``start`` to ``end``.

    The interpolation parameter is chosen so that the area equals ``u``; the
    start polygon should be degenerate (zero area). Beyond ``area(end)`` the
    family stops growing.
    """

    def __init__(self, start, end):
        self.start = np.asarray(start, dtype=float)
        self.end = np.asarray(end, dtype=float)
        if self.start.shape != self.end.shape or self.start.ndim != 2 or self.start.shape[1] != 2:
            raise ValueError("start and end polygons need matching (k, 2) vertex arrays")
        # signed area is quadratic in the interpolation parameter
        a = [self._signed_area(t) for t in (0.0, 0.5, 1.0)]
        self._coef = np.polyfit([0.0, 0.5, 1.0], a, 2)
        self._sign = 1.0 if a[2] >= 0 else -1.0

    def _vertices(self, lam):
        return (1 - lam) * self.start + lam * self.end

    def _signed_area(self, lam):
        v = self._vertices(lam)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def _lam(self, u):
        a2, a1, a0 = self._sign * self._coef
        full = a2 + a1 + a0
        if u >= full:
            return 1.0
        if u <= a0:
            return 0.0
        if abs(a2) < 1e-15:
            return (u - a0) / a1
        disc = a1 * a1 - 4 * a2 * (a0 - u)
        roots = [(-a1 + s * math.sqrt(max(disc, 0.0))) / (2 * a2) for s in (1, -1)]
        roots = [r for r in roots if -1e-12 <= r <= 1 + 1e-12]
        return float(min(max(min(roots), 0.0), 1.0))

    def region(self, u):
        lam = self._lam(u)
        v = self._vertices(lam)
        if polygon_area(v) <= 0:
            return Polygon(np.repeat(v[:1], 3, axis=0))
        return Polygon(v)

    def entry_time(self, points, u_max):
        points = check_points(points)
        out = np.full(len(points), np.inf)
        if u_max <= 0:
            return out
        inside = self.region(u_max).contains(points)
        idx = np.flatnonzero(inside)
        if len(idx) == 0:
            return out
        lam_hi = np.full(len(idx), self._lam(u_max))
        lam_lo = np.zeros(len(idx))
        p = points[idx]
        for _ in range(55):
            mid = 0.5 * (lam_lo + lam_hi)
            ok = self._contains_at(p, mid)
            lam_hi = np.where(ok, mid, lam_hi)
            lam_lo = np.where(ok, lam_lo, mid)
        a2, a1, a0 = self._sign * self._coef
        out[idx] = np.clip(a2 * lam_hi**2 + a1 * lam_hi + a0, 0.0, u_max)
        return out

    def _contains_at(self, points, lam):
        """Closed membership of ``points[k]`` in the polygon at ``lam[k]``."""
        V = (1 - lam)[:, None, None] * self.start[None] + lam[:, None, None] * self.end[None]
        W = np.roll(V, -1, axis=1)
        px, py = points[:, 0][:, None], points[:, 1][:, None]
        x1, y1, x2, y2 = V[..., 0], V[..., 1], W[..., 0], W[..., 1]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside = np.logical_xor.reduce(crosses & (px < xint), axis=1)
        ex, ey = x2 - x1, y2 - y1
        l2 = np.where(ex * ex + ey * ey == 0, 1.0, ex * ex + ey * ey)
        t = np.clip(((px - x1) * ex + (py - y1) * ey) / l2, 0, 1)
        d = np.hypot(px - (x1 + t * ex), py - (y1 + t * ey)).min(axis=1)
        area = 0.5 * np.abs((x1 * y2 - x2 * y1).sum(axis=1))
        return (area > 0) & (inside | (d <= MEMBERSHIP_TOL))

    def to_dict(self):
        return {"affine_polygons": {"start": self.start.tolist(), "end": self.end.tolist()}}


class CallableGrowth(GrowthLaw):
    """Wrap an arbitrary ``u -> Region`` callable (entry times by bisection)."""

    def __init__(self, fn, name="callable"):
        self.fn = fn
        self.name = name

    def region(self, u):
        return self.fn(u)

    def to_dict(self):
        return {"callable": self.name}


def growth_from_dict(obj):
    (kind, body), = obj.items()
    if kind == "disk_centered":
        return DiskGrowth(body)
    if kind == "affine_polygons":
        return AffinePolygonGrowth(body["start"], body["end"])
    raise ValueError(f"unknown growth law {kind!r}")


# ---------------------------------------------------------------------------
# rate functions s -> s_i(s)


@dataclass(frozen=True)
class LinearRate:
    """``s_i(s) = T_i * clip((s - start) / (end - start), 0, 1)``."""

    start: float
    end: float
    kind: str = "sequential"
    weight: float = 1.0

    def __call__(self, s, T_i):
        s = np.asarray(s, dtype=float)
        if T_i == 0:
            return np.zeros_like(s)
        width = self.end - self.start
        if width <= 0:
            return np.where(s >= self.start, T_i, 0.0)
        return T_i * np.clip((s - self.start) / width, 0.0, 1.0)

    def inverse(self, u, T_i):
        """Smallest global time at which the family has grown to volume ``u``."""
        u = np.asarray(u, dtype=float)
        if T_i == 0:
            return np.full_like(u, self.start)
        return self.start + (u / T_i) * (self.end - self.start)

    def to_dict(self):
        if self.kind == "proportional":
            return {"proportional": self.weight}
        return {"sequential": [self.start, self.end]}


def proportional_rate(weight, T_i):
    """``s_i(s) = weight * s``; the family finishes at ``s = T_i / weight``."""
    weight = float(weight)
    if weight <= 0:
        raise ValueError("proportional rate weight must be positive")
    return LinearRate(0.0, T_i / weight, kind="proportional", weight=weight)


# ---------------------------------------------------------------------------
# flow spec


@dataclass
class Family:
    T: float
    growth: GrowthLaw
    rate: LinearRate

    def region_at(self, s):
        """``Q_i(s_i(s))`` at global time ``s``."""
        return self.growth.region(float(self.rate(s, self.T)))


@dataclass
class FlowSpec:
    """A concentrated mass distribution: initial domain plus growing sources."""

    D0: Region
    families: list = field(default_factory=list)
    name: str = "flow"

    @property
    def T(self):
        return float(sum(f.T for f in self.families))

    @property
    def N(self):
        return len(self.families)

    def rates(self, s):
        return np.array([float(f.rate(s, f.T)) for f in self.families])

    def to_dict(self):
        return {
            "D0": self.D0.to_dict(),
            "families": [
                {"T": f.T, "growth": f.growth.to_dict(), "rate": f.rate.to_dict()} for f in self.families
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def spec_hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, obj, name="flow"):
        D0 = region_from_dict(obj["D0"])
        fams = []
        for fam in obj.get("families", []):
            T_i = check_nonnegative(fam["T"], "family T")
            growth = growth_from_dict(fam["growth"])
            (rkind, rbody), = fam["rate"].items()
            if rkind == "proportional":
                rate = proportional_rate(rbody, T_i)
            elif rkind == "sequential":
                rate = LinearRate(float(rbody[0]), float(rbody[1]))
            else:
                raise ValueError(f"unknown rate kind {rkind!r}")
            fams.append(Family(T_i, growth, rate))
        return cls(D0, fams, name=obj.get("name", name))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def example_flow(N=1):
    """Unit disk with ``N`` concentric source disks growing to radius 1/2.

    ``T = N*pi/4`` and ``D_s`` is the disk of radius ``sqrt(1 + s/pi)``.
    """
    T_i = math.pi / 4
    fams = [Family(T_i, DiskGrowth((0.0, 0.0)), proportional_rate(1.0 / N, T_i)) for _ in range(N)]
    return FlowSpec(Disk((0.0, 0.0), 1.0), fams, name=f"example1_N{N}")


def example_flow_radius(s):
    return math.sqrt(1.0 + s / math.pi)


ASYMMETRIC_OFFSET = (5.0 * math.cos(math.pi / 12), 5.0 * math.sin(math.pi / 12))


def asymmetric_flow(offset=ASYMMETRIC_OFFSET):
    """Two off-centre families in a unit disk: a disk and a growing triangle.

    The triangle grows by homothety about its centroid; the two families grow
    proportionally to their volumes. The whole picture is translated by
    ``offset``. The default puts the flow at angle 15 degrees, far enough from
    the origin that 1, z, z^2 and z^3 keep a fixed sign (real and imaginary
    parts) on the whole domain, so quadrature errors do not cancel.
    """
    off = np.asarray(offset, dtype=float)
    end = np.array([[-0.65, -0.45], [-0.15, -0.5], [-0.35, -0.05]]) + off
    start = np.repeat(end.mean(axis=0, keepdims=True), 3, axis=0)
    T1, T2 = 0.15, polygon_area(end)
    T = T1 + T2
    fams = [
        Family(T1, DiskGrowth(tuple(np.array([0.3, 0.15]) + off)), proportional_rate(T1 / T, T1)),
        Family(T2, AffinePolygonGrowth(start, end), proportional_rate(T2 / T, T2)),
    ]
    return FlowSpec(Disk(tuple(off), 1.0), fams, name="asymmetric2")


# ---------------------------------------------------------------------------
# validation


@dataclass
class Violation:
    condition: str
    message: str
    worst: float
    location: object = None


@dataclass
class ValidationReport:
    samples: int
    violations: list = field(default_factory=list)
    worst: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.violations

    def conditions_failed(self):
        return sorted({v.condition for v in self.violations})

    def to_dict(self):
        return {
            "ok": self.ok,
            "samples": self.samples,
            "worst": self.worst,
            "violations": [v.__dict__ | {"location": _jsonable(v.location)} for v in self.violations],
        }

    def __str__(self):
        if self.ok:
            return f"flow valid ({self.samples} samples)"
        lines = [f"condition {v.condition}: {v.message} (worst {v.worst:.3g} at {v.location})" for v in self.violations]
        return "invalid flow:\n  " + "\n  ".join(lines)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, tuple):
        return [_jsonable(v) for v in x]
    return x


def validate_flow(spec, samples=17, tol=1e-6, raise_on_failure=False):
    """Check the mass-distribution conditions at ``samples`` times.

    Conditions are labelled ``"1"`` (volume), ``"2"`` (compactly inside D0),
    ``"3"`` (nested), ``"4"`` (bounded arclength) and ``"rates"`` (the rate
    functions are nondecreasing and sum to ``s``).
    """
    if samples < 2:
        raise ValueError("validate_flow needs at least 2 samples")
    report = ValidationReport(samples)
    worst = {"1": 0.0, "2": math.inf, "3": 0.0, "4": 0.0, "rates": 0.0}

    def fail(cond, msg, value, loc):
        report.violations.append(Violation(cond, msg, float(value), loc))

    for i, fam in enumerate(spec.families):
        if fam.T < 0:
            fail("1", f"family {i} has negative volume", fam.T, i)
            continue
        us = np.linspace(0.0, fam.T, samples)
        regions = [fam.growth.region(u) for u in us]
        # 1: volume
        errs = [abs(_area(r) - u) for r, u in zip(regions, us)]
        k = int(np.argmax(errs))
        worst["1"] = max(worst["1"], errs[k])
        if errs[k] > tol * max(1.0, fam.T):
            fail("1", f"family {i}: area(Q(u)) != u", errs[k], ("family", i, "u", float(us[k])))
        # 2: compact containment of the final region
        final = regions[-1]
        if _area(final) > 0:
            pts = final.sample_boundary(1e-3)
            margin = float(np.min(-spec.D0.sdf(pts))) if len(pts) else math.inf
            worst["2"] = min(worst["2"], margin)
            if margin <= tol:
                loc = pts[int(np.argmin(-spec.D0.sdf(pts)))]
                fail("2", f"family {i}: Q(T_i) not at positive distance from the boundary of D0", margin, tuple(float(v) for v in loc))
        # 3: nested
        for a, b, ua, ub in zip(regions[:-1], regions[1:], us[:-1], us[1:]):
            pts = a.sample_boundary(1e-3)
            if len(pts) == 0:
                continue
            excess = float(np.max(b.sdf(pts)))
            worst["3"] = max(worst["3"], excess)
            if excess > tol:
                fail("3", f"family {i}: Q({ua:.4g}) not inside Q({ub:.4g})", excess, ("family", i, "u", float(ua)))
                break
        # 4: arclength bounded
        lengths = [r.perimeter() for r in regions]
        worst["4"] = max(worst["4"], max(lengths))
        if not np.all(np.isfinite(lengths)):
            fail("4", f"family {i}: unbounded boundary length", math.inf, i)

    # rate functions
    T = spec.T
    ts = np.linspace(0.0, T, samples)
    if spec.families:
        rates = np.array([spec.rates(t) for t in ts])
        total_err = np.abs(rates.sum(axis=1) - ts)
        worst["rates"] = float(total_err.max())
        if total_err.max() > tol * max(1.0, T):
            k = int(np.argmax(total_err))
            fail("rates", "sum of rate functions differs from s", total_err[k], ("s", float(ts[k])))
        dec = np.diff(rates, axis=0)
        if np.any(dec < -tol):
            i = int(np.argmin(dec.min(axis=0)))
            fail("rates", f"rate function {i} decreases", float(-dec.min()), ("family", i))
        ends = rates[-1]
        for i, fam in enumerate(spec.families):
            if abs(ends[i] - fam.T) > tol * max(1.0, fam.T):
                fail("rates", f"rate function {i} does not reach T_i at s=T", abs(ends[i] - fam.T), ("family", i))
    report.worst = {k: (None if not np.isfinite(v) else float(v)) for k, v in worst.items()}
    if raise_on_failure and not report.ok:
        raise FlowValidationError(report)
    return report


def _area(region):
    try:
        return region.area()
    except NotImplementedError:
        return sites_in(region, 512).count / 512.0**2


# ---------------------------------------------------------------------------
# mass density and discretization


def sigma(spec, s, points):
    """``1_{D0} + sum_i 1_{Q_i(s_i(s))}`` at each point."""
    T = spec.T
    if not (-1e-12 <= s <= T + 1e-12):
        raise ValueError(f"time {s} outside [0, {T}]")
    points = check_points(points)
    out = spec.D0.contains(points).astype(np.int64)
    for fam in spec.families:
        out += fam.region_at(s).contains(points)
    return out


def source_density(spec, s, m, box=None):
    """Integer grid of ``(sigma_s - sigma_0)`` on the lattice ``(1/m)Z^2``.

    Returns ``(x0, y0, counts)`` with ``counts[i, j]`` at site ``(x0+i, y0+j)``.
    """
    m = check_resolution(m)
    if box is None:
        box = sites_in(spec.D0, m).box
    xmin, xmax, ymin, ymax = box
    xs = np.arange(xmin, xmax + 1)
    ys = np.arange(ymin, ymax + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()]) / m
    counts = np.zeros(len(pts), dtype=np.int64)
    for fam in spec.families:
        counts += fam.region_at(s).contains(pts)
        if s > 0:
            counts -= fam.region_at(0.0).contains(pts)
    return xmin, ymin, counts.reshape(X.shape)


@dataclass
class SourceSequence:
    """Ordered source sites ``z_{m,1..n}`` with their release times.

    ``entry`` is the exact (bisection-refined) time each site enters its
    source region; ``s`` is the release time on the partition mesh.
    """

    m: int
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    entry: np.ndarray
    family: np.ndarray
    mesh: float

    def __len__(self):
        return len(self.x)

    @property
    def n_m(self):
        return len(self.x)

    @property
    def sites(self):
        return np.column_stack([self.x, self.y])

    def prefix_count(self, s):
        """Number of sources released by time ``s``."""
        return int(np.searchsorted(self.s, s + 1e-12, side="right"))

    def multiplicities(self):
        keys, counts = np.unique(self.sites, axis=0, return_counts=True)
        return {tuple(map(int, k)): int(c) for k, c in zip(keys, counts)}

    def reordered(self, rule="reverse", seed=0):
        """Permute sources that share a release time.

        ``rule`` is ``"reverse"`` (reverse the order inside every tie group) or
        ``"shuffle"`` (seeded random permutation inside every group).
        """
        order = np.arange(len(self))
        rng = np.random.default_rng(seed)
        starts = np.flatnonzero(np.r_[True, self.s[1:] != self.s[:-1]])
        ends = np.r_[starts[1:], len(self)]
        for a, b in zip(starts, ends):
            if b - a < 2:
                continue
            if rule == "reverse":
                order[a:b] = order[a:b][::-1]
            elif rule == "shuffle":
                order[a:b] = rng.permutation(order[a:b])
            else:
                raise ValueError(f"unknown reorder rule {rule!r}")
        return SourceSequence(
            self.m, self.x[order], self.y[order], self.s[order], self.entry[order], self.family[order], self.mesh
        )

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "x", "y", "s"])
        for i, (x, y, s) in enumerate(zip(self.x, self.y, self.s)):
            w.writerow([i + 1, int(x), int(y), repr(float(s))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, m):
        rows = list(csv.DictReader(io.StringIO(text)))
        x = np.array([int(r["x"]) for r in rows], dtype=np.int64)
        y = np.array([int(r["y"]) for r in rows], dtype=np.int64)
        s = np.array([float(r["s"]) for r in rows])
        return cls(m, x, y, s, s.copy(), np.zeros(len(rows), dtype=np.int64), float("nan"))


def discretize(spec, m, validate=True):
    """Resolution-``m`` source sequence of a flow.

    Every site of ``Q_i(T_i)`` is released at the first point of the uniform
    mesh ``T/(4m^2)`` at or after the time it enters its family's region.
    Within one mesh cell sources are ordered by their refined entry time, then
    lexicographically by ``(x, y)``.
    """
    m = check_resolution(m)
    if validate:
        validate_flow(spec, raise_on_failure=True)
    T = spec.T
    xs, ys, entries, fams = [], [], [], []
    for i, fam in enumerate(spec.families):
        if fam.T == 0:
            continue
        final = fam.growth.region(fam.T)
        cand = sites_in(final, m).sites()
        if len(cand) == 0:
            continue
        u = fam.growth.entry_time(cand / m, fam.T)
        keep = np.isfinite(u)
        cand, u = cand[keep], u[keep]
        s_entry = fam.rate.inverse(u, fam.T)
        xs.append(cand[:, 0])
        ys.append(cand[:, 1])
        entries.append(np.clip(s_entry, 0.0, T))
        fams.append(np.full(len(cand), i, dtype=np.int64))
    if not xs:
        if T > 0:
            raise ValueError("mass never increases on the lattice: no source sites at this resolution")
        e = np.zeros(0)
        return SourceSequence(m, e.astype(np.int64), e.astype(np.int64), e, e, e.astype(np.int64), 0.0)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    entry = np.concatenate(entries)
    family = np.concatenate(fams)
    mesh = T / (4.0 * m * m)
    k = np.ceil(entry / mesh - 1e-9).astype(np.int64)
    k = np.clip(k, 1, int(round(T / mesh)))
    release = k * mesh
    order = np.lexsort((family, y, x, entry, k))
    return SourceSequence(m, x[order], y[order], release[order], entry[order], family[order], mesh)


# ---------------------------------------------------------------------------
# flow constants


@dataclass
class FlowConstants:
    u: float
    U: float
    v: float
    V: float


def estimate_flow_constants(spec, sampler, samples=9):
    """Empirical arclength and speed constants of the flow ``s -> D_s``.

    ``sampler(s)`` returns a region for ``D_s``. ``u, U`` bound the boundary
    length; ``v, V`` bound ``d(D_{s1}^c, D_{s0})`` and the Hausdorff distance
    between the sets relative to ``sqrt(1+s1) - sqrt(1+s0)``.
    """
    T = spec.T
    if T <= 0:
        raise ValueError("degenerate flow: zero total volume")
    ts = np.linspace(0.0, T, samples)
    regions = [sampler(t) for t in ts]
    lengths = [r.perimeter() for r in regions]
    lo, hi = [], []
    for i in range(samples):
        bi = regions[i].sample_boundary(1e-3)
        for j in range(i + 1, samples):
            bj = regions[j].sample_boundary(1e-3)
            denom = math.sqrt(1 + ts[j]) - math.sqrt(1 + ts[i])
            gap = float(np.min(-regions[j].sdf(bi)))
            spread = float(np.max(regions[i].distance(bj)))
            lo.append(gap / denom)
            hi.append(spread / denom)
    return FlowConstants(min(lengths), max(lengths), min(lo), max(hi))
