"""Lattice geometry on (1/m)Z^2.

Sites are integer pairs ``(x, y)``; under a resolution ``m`` a site stands for
the point ``(x/m, y/m)``. Continuum regions are bounded subsets of R^2 with
closed membership, and ``sites_in`` turns a region into a dense
:class:`SiteSet`.
"""

import json
import math

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_nonnegative, check_points, check_resolution, check_sites

# Slack for closed membership tests; absorbs rounding when a site lies exactly
# on a region boundary (e.g. a pole chosen on a circle).
MEMBERSHIP_TOL = 1e-12

NEIGHBOR_OFFSETS = np.array([(1, 0), (-1, 0), (0, 1), (0, -1)], dtype=np.int64)


def neighbors(z):
    """The four lattice neighbours of ``z`` in the order +x, -x, +y, -y."""
    x, y = int(z[0]), int(z[1])
    return [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)]


class SiteSet:
    """A finite set of lattice sites stored as a dense boolean grid.

    ``grid[i, j]`` is the occupancy of site ``(x0 + i, y0 + j)``. The grid is
    the bounding box; membership queries outside it return False. Mutation via
    :meth:`add` is single-writer; readers may share an instance freely while
    nobody writes to it.
    """

    __slots__ = ("x0", "y0", "grid", "_count")

    def __init__(self, x0, y0, grid):
        grid = np.ascontiguousarray(grid, dtype=bool)
        if grid.ndim != 2:
            raise ValueError("grid must be two-dimensional")
        self.x0 = int(x0)
        self.y0 = int(y0)
        self.grid = grid
        self._count = int(grid.sum())

    # construction -------------------------------------------------------
    @classmethod
    def empty(cls, xmin=0, xmax=-1, ymin=0, ymax=-1):
        nx = max(xmax - xmin + 1, 0)
        ny = max(ymax - ymin + 1, 0)
        return cls(xmin, ymin, np.zeros((nx, ny), dtype=bool))

    @classmethod
    def from_sites(cls, sites, box=None, pad=0):
        """Build a set from an ``(n, 2)`` array of sites.

        ``box`` is ``(xmin, xmax, ymin, ymax)`` inclusive; by default the tight
        bounding box grown by ``pad`` on every side.
        """
        sites = check_sites(sites) if len(sites) else np.zeros((0, 2), dtype=np.int64)
        if box is None:
            if len(sites) == 0:
                return cls.empty()
            xmin, ymin = sites.min(axis=0) - pad
            xmax, ymax = sites.max(axis=0) + pad
        else:
            xmin, xmax, ymin, ymax = box
        out = cls.empty(int(xmin), int(xmax), int(ymin), int(ymax))
        if len(sites):
            ix = sites[:, 0] - out.x0
            iy = sites[:, 1] - out.y0
            nx, ny = out.grid.shape
            if np.any((ix < 0) | (ix >= nx) | (iy < 0) | (iy >= ny)):
                raise ValueError("sites fall outside the requested bounding box")
            out.grid[ix, iy] = True
            out._count = int(out.grid.sum())
        return out

    def copy(self):
        return SiteSet(self.x0, self.y0, self.grid.copy())

    # basic protocol -------------------------------------------------------
    @property
    def count(self):
        return self._count

    def __len__(self):
        return self._count

    @property
    def shape(self):
        return self.grid.shape

    @property
    def box(self):
        nx, ny = self.grid.shape
        return (self.x0, self.x0 + nx - 1, self.y0, self.y0 + ny - 1)

    def sites(self):
        ix, iy = np.nonzero(self.grid)
        return np.column_stack([ix + self.x0, iy + self.y0]).astype(np.int64)

    def points(self, m):
        """Site positions in R^2 at resolution ``m``."""
        return self.sites() / float(check_resolution(m))

    def __iter__(self):
        return (tuple(map(int, s)) for s in self.sites())

    def __contains__(self, z):
        return bool(self.contains(np.asarray([z]))[0])

    def contains(self, sites):
        sites = check_sites(sites)
        ix = sites[:, 0] - self.x0
        iy = sites[:, 1] - self.y0
        nx, ny = self.grid.shape
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        out = np.zeros(len(sites), dtype=bool)
        out[inside] = self.grid[ix[inside], iy[inside]]
        return out

    def __eq__(self, other):
        if not isinstance(other, SiteSet):
            return NotImplemented
        if self.count != other.count:
            return False
        return bool(np.all(other.contains(self.sites())))

    def __repr__(self):
        return f"SiteSet(count={self.count}, box={self.box})"

    # mutation -------------------------------------------------------------
    def add(self, z):
        """Insert a site that lies inside the bounding box; returns True if new."""
        i, j = int(z[0]) - self.x0, int(z[1]) - self.y0
        nx, ny = self.grid.shape
        if not (0 <= i < nx and 0 <= j < ny):
            raise IndexError(f"site {tuple(z)} outside bounding box {self.box}")
        if self.grid[i, j]:
            return False
        self.grid[i, j] = True
        self._count += 1
        return True

    def discard(self, z):
        i, j = int(z[0]) - self.x0, int(z[1]) - self.y0
        nx, ny = self.grid.shape
        if 0 <= i < nx and 0 <= j < ny and self.grid[i, j]:
            self.grid[i, j] = False
            self._count -= 1

    # reshaping and algebra -------------------------------------------------
    def reboxed(self, box):
        """Same sites in a different bounding box (which must contain them)."""
        return SiteSet.from_sites(self.sites(), box=box)

    def padded(self, pad):
        xmin, xmax, ymin, ymax = self.box
        grid = np.pad(self.grid, pad)
        return SiteSet(xmin - pad, ymin - pad, grid)

    def _common(self, other):
        a, b = self.box, other.box
        box = (min(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), max(a[3], b[3]))
        return self.reboxed(box).grid, other.reboxed(box).grid, box

    def union(self, other):
        ga, gb, box = self._common(other)
        return SiteSet(box[0], box[2], ga | gb)

    def intersection(self, other):
        ga, gb, box = self._common(other)
        return SiteSet(box[0], box[2], ga & gb)

    def difference(self, other):
        ga, gb, box = self._common(other)
        return SiteSet(box[0], box[2], ga & ~gb)

    def issubset(self, other):
        return bool(np.all(other.contains(self.sites())))


def _shift(grid, dx, dy):
    """``out[i, j] = grid[i + dx, j + dy]`` with False outside."""
    out = np.zeros_like(grid)
    nx, ny = grid.shape
    xs_dst = slice(max(-dx, 0), nx - max(dx, 0))
    xs_src = slice(max(dx, 0), nx - max(-dx, 0))
    ys_dst = slice(max(-dy, 0), ny - max(dy, 0))
    ys_src = slice(max(dy, 0), ny - max(-dy, 0))
    out[xs_dst, ys_dst] = grid[xs_src, ys_src]
    return out


def interior_mask(grid):
    """Cells whose four neighbours are all set (cells on the grid edge never are)."""
    inner = grid.copy()
    for dx, dy in NEIGHBOR_OFFSETS:
        inner &= _shift(grid, dx, dy)
    return inner


def boundary(A):
    """Sites of ``A`` with at least one of their four neighbours outside ``A``."""
    padded = np.pad(A.grid, 1)
    edge = padded & ~interior_mask(padded)
    return SiteSet(A.x0 - 1, A.y0 - 1, edge)


def outer_boundary(A):
    """Sites outside ``A`` adjacent to at least one site of ``A``."""
    padded = np.pad(A.grid, 1)
    touched = np.zeros_like(padded)
    for dx, dy in NEIGHBOR_OFFSETS:
        touched |= _shift(padded, dx, dy)
    return SiteSet(A.x0 - 1, A.y0 - 1, touched & ~padded)


# ---------------------------------------------------------------------------
# continuum regions


class Region:
    """Bounded subset of R^2 with closed membership."""

    def sdf(self, points):
        """Signed distance: negative inside, positive outside."""
        raise NotImplementedError

    def contains(self, points):
        return self.sdf(check_points(points)) <= MEMBERSHIP_TOL

    def bbox(self):
        raise NotImplementedError

    def area(self):
        raise NotImplementedError

    def perimeter(self):
        pts = self.sample_boundary(1e-3)
        return len(pts) * 1e-3

    def sample_boundary(self, spacing):
        raise NotImplementedError

    def distance(self, points):
        """Euclidean distance to the region (zero inside)."""
        return np.maximum(self.sdf(check_points(points)), 0.0)

    def to_json(self):
        return json.dumps(self.to_dict())

    def to_dict(self):
        raise NotImplementedError


class EmptyRegion(Region):
    def sdf(self, points):
        return np.full(len(check_points(points)), np.inf)

    def contains(self, points):
        return np.zeros(len(check_points(points)), dtype=bool)

    def bbox(self):
        return (0.0, 0.0, 0.0, 0.0)

    def area(self):
        return 0.0

    def perimeter(self):
        return 0.0

    def sample_boundary(self, spacing):
        return np.zeros((0, 2))

    def to_dict(self):
        return {"polygon": []}


class Disk(Region):
    """Closed disk. A radius of zero denotes the empty set (zero volume)."""

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float).reshape(2)
        self.radius = float(radius)
        if not np.isfinite(self.radius) or self.radius < 0:
            raise ValueError(f"disk radius must be finite and >= 0, got {radius}")

    def sdf(self, points):
        points = check_points(points)
        if self.radius == 0:
            return np.full(len(points), np.inf)
        return np.hypot(points[:, 0] - self.center[0], points[:, 1] - self.center[1]) - self.radius

    def bbox(self):
        cx, cy = self.center
        r = self.radius
        return (cx - r, cx + r, cy - r, cy + r)

    def area(self):
        return math.pi * self.radius**2

    def perimeter(self):
        return 2 * math.pi * self.radius

    def sample_boundary(self, spacing):
        if self.radius == 0:
            return np.zeros((0, 2))
        n = max(int(math.ceil(self.perimeter() / spacing)), 8)
        theta = np.arange(n) * (2 * math.pi / n)
        return self.center + self.radius * np.column_stack([np.cos(theta), np.sin(theta)])

    def to_dict(self):
        return {"disk": {"center": self.center.tolist(), "radius": self.radius}}

    def __repr__(self):
        return f"Disk(center={self.center.tolist()}, radius={self.radius})"


def polygon_area(vertices):
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _segment_distance(points, a, b):
    """Distance from each point to every segment; returns ``(n_points, n_segments)``."""
    ab = b - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ab2 = np.where(ab2 == 0, 1.0, ab2)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pij,ij->pi", ap, ab) / ab2, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def _point_in_polygon(points, vertices):
    x, y = points[:, 0][:, None], points[:, 1][:, None]
    x1, y1 = vertices[:, 0][None], vertices[:, 1][None]
    x2, y2 = np.roll(vertices[:, 0], -1)[None], np.roll(vertices[:, 1], -1)[None]
    crosses = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return np.logical_xor.reduce(crosses & (x < xint), axis=1)


class Polygon(Region):
    """Closed simple polygon given by its vertex list (either orientation)."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("polygon vertices must be an (n, 2) array")
        if len(v) < 3:
            raise ValueError("a polygon needs at least three vertices")
        self.vertices = v

    def sdf(self, points):
        points = check_points(points)
        if polygon_area(self.vertices) == 0:
            return np.full(len(points), np.inf)
        a = self.vertices
        b = np.roll(a, -1, axis=0)
        out = np.empty(len(points))
        # chunk to bound the (points x edges) temporaries
        for start in range(0, len(points), 4096):
            p = points[start : start + 4096]
            d = _segment_distance(p, a, b).min(axis=1)
            inside = _point_in_polygon(p, a)
            out[start : start + 4096] = np.where(inside, -d, d)
        return out

    def bbox(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return (lo[0], hi[0], lo[1], hi[1])

    def area(self):
        return polygon_area(self.vertices)

    def perimeter(self):
        d = np.diff(np.vstack([self.vertices, self.vertices[:1]]), axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    def sample_boundary(self, spacing):
        pts = []
        a = self.vertices
        b = np.roll(a, -1, axis=0)
        for p, q in zip(a, b):
            n = max(int(math.ceil(np.hypot(*(q - p)) / spacing)), 1)
            t = np.arange(n) / n
            pts.append(p + t[:, None] * (q - p))
        return np.vstack(pts)

    def to_dict(self):
        return {"polygon": self.vertices.tolist()}


class Union(Region):
    def __init__(self, parts):
        self.parts = list(parts)
        if not self.parts:
            raise ValueError("union of no regions")

    def sdf(self, points):
        return np.min([p.sdf(points) for p in self.parts], axis=0)

    def bbox(self):
        boxes = np.array([p.bbox() for p in self.parts])
        return (boxes[:, 0].min(), boxes[:, 1].max(), boxes[:, 2].min(), boxes[:, 3].max())

    def area(self):
        return _lattice_area(self)

    def sample_boundary(self, spacing):
        pts = np.vstack([p.sample_boundary(spacing) for p in self.parts])
        return pts[np.abs(self.sdf(pts)) <= 1e-9]

    def to_dict(self):
        return {"union": [p.to_dict() for p in self.parts]}


class Difference(Region):
    def __init__(self, a, b):
        self.a, self.b = a, b

    def sdf(self, points):
        return np.maximum(self.a.sdf(points), -self.b.sdf(points))

    def contains(self, points):
        points = check_points(points)
        # closed set minus closed set is not closed; keep the boundary of b
        return self.a.contains(points) & (self.b.sdf(points) >= -MEMBERSHIP_TOL)

    def bbox(self):
        return self.a.bbox()

    def area(self):
        return _lattice_area(self)

    def sample_boundary(self, spacing):
        pts = np.vstack([self.a.sample_boundary(spacing), self.b.sample_boundary(spacing)])
        return pts[np.abs(self.sdf(pts)) <= 1e-9]

    def to_dict(self):
        return {"difference": [self.a.to_dict(), self.b.to_dict()]}


class OuterNeighborhood(Region):
    """``{z : d(z, region) < eps}``; for ``eps == 0`` the closed region itself."""

    def __init__(self, region, eps):
        self.region = region
        self.eps = check_nonnegative(eps, "eps")

    def sdf(self, points):
        return self.region.sdf(points) - self.eps

    def contains(self, points):
        d = self.region.sdf(check_points(points))
        if self.eps == 0:
            return d <= MEMBERSHIP_TOL
        return d < self.eps

    def bbox(self):
        x0, x1, y0, y1 = self.region.bbox()
        e = self.eps
        return (x0 - e, x1 + e, y0 - e, y1 + e)

    def area(self):
        return _lattice_area(self)

    def sample_boundary(self, spacing):
        raise NotImplementedError("neighbourhoods are membership predicates only")

    def to_dict(self):
        return {"outer": {"region": self.region.to_dict(), "eps": self.eps}}


class InnerNeighborhood(Region):
    """``{z in region : d(z, complement) > eps}``; for ``eps == 0`` the interior."""

    def __init__(self, region, eps):
        self.region = region
        self.eps = check_nonnegative(eps, "eps")

    def sdf(self, points):
        return self.region.sdf(points) + self.eps

    def contains(self, points):
        return self.region.sdf(check_points(points)) < -self.eps

    def bbox(self):
        return self.region.bbox()

    def area(self):
        return _lattice_area(self)

    def sample_boundary(self, spacing):
        raise NotImplementedError("neighbourhoods are membership predicates only")

    def to_dict(self):
        return {"inner": {"region": self.region.to_dict(), "eps": self.eps}}


def _lattice_area(region, m=512):
    return sites_in(region, m).count / float(m * m)


def region_from_dict(obj):
    """Decode the JSON region encoding (disk / polygon / union / difference)."""
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ValueError(f"region must be a single-key object, got {obj!r}")
    (kind, body), = obj.items()
    if kind == "disk":
        return Disk(body["center"], body["radius"])
    if kind == "polygon":
        if len(body) == 0:
            return EmptyRegion()
        return Polygon(body)
    if kind == "union":
        return Union([region_from_dict(b) for b in body])
    if kind == "difference":
        a, b = body
        return Difference(region_from_dict(a), region_from_dict(b))
    if kind == "outer":
        return OuterNeighborhood(region_from_dict(body["region"]), body["eps"])
    if kind == "inner":
        return InnerNeighborhood(region_from_dict(body["region"]), body["eps"])
    raise ValueError(f"unknown region kind {kind!r}")


def region_from_json(text):
    return region_from_dict(json.loads(text))


def sites_in(region, m):
    """All sites ``z`` with ``z/m`` in ``region`` (closed membership)."""
    m = check_resolution(m)
    x0, x1, y0, y1 = region.bbox()
    if not all(np.isfinite([x0, x1, y0, y1])):
        raise ValueError("sites_in requires a bounded region")
    ix0, ix1 = int(math.floor(x0 * m)) - 1, int(math.ceil(x1 * m)) + 1
    iy0, iy1 = int(math.floor(y0 * m)) - 1, int(math.ceil(y1 * m)) + 1
    xs = np.arange(ix0, ix1 + 1)
    ys = np.arange(iy0, iy1 + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()]) / float(m)
    mask = region.contains(pts).reshape(X.shape)
    return SiteSet(ix0, iy0, mask)


def eps_neighborhoods(region, eps):
    """Outer and inner ``eps``-neighbourhoods as membership regions."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    return OuterNeighborhood(region, eps), InnerNeighborhood(region, eps)


def _as_points(A, m):
    if isinstance(A, SiteSet):
        return A.points(m)
    arr = np.asarray(A)
    if arr.size == 0:
        return np.zeros((0, 2))
    if np.issubdtype(arr.dtype, np.integer):
        return check_sites(arr) / float(m)
    return check_points(arr)


def directed_hausdorff(A, B):
    """``sup_{a in A} inf_{b in B} |a - b|`` for point arrays."""
    d, _ = cKDTree(B).query(A)
    return float(d.max())


def hausdorff(A, B, m=1):
    """Symmetric Hausdorff distance in R^2 units.

    ``SiteSet`` arguments and integer arrays are lattice sites scaled by
    ``1/m``; float arrays are taken as points of R^2 already.
    """
    m = check_resolution(m)
    pa, pb = _as_points(A, m), _as_points(B, m)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("hausdorff distance of an empty set is undefined")
    return max(directed_hausdorff(pa, pb), directed_hausdorff(pb, pa))


class LatticeRegion(Region):
    """A site set at resolution ``m`` viewed as a union of ``1/m`` squares.

    Used to wrap a fine-resolution oracle set (e.g. a stabilised sandpile) as
    a continuum region. Distances are accurate to about ``1/m``.
    """

    def __init__(self, sites, m):
        self.m = check_resolution(m)
        self.sites = sites.padded(2)
        self._edt_in = None
        self._edt_out = None

    def _edts(self):
        if self._edt_in is None:
            from scipy.ndimage import distance_transform_edt

            g = self.sites.grid
            self._edt_in = distance_transform_edt(g) / self.m
            self._edt_out = distance_transform_edt(~g) / self.m
        return self._edt_in, self._edt_out

    def _index(self, points):
        ij = np.rint(check_points(points) * self.m).astype(np.int64)
        return ij[:, 0] - self.sites.x0, ij[:, 1] - self.sites.y0

    def contains(self, points):
        return self.sites.contains(np.rint(check_points(points) * self.m).astype(np.int64))

    def sdf(self, points):
        points = check_points(points)
        ein, eout = self._edts()
        i, j = self._index(points)
        nx, ny = self.sites.grid.shape
        inside = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
        out = np.empty(len(points))
        half = 0.5 / self.m
        gi, gj = i[inside], j[inside]
        occ = self.sites.grid[gi, gj]
        out[inside] = np.where(occ, -(ein[gi, gj] - half), eout[gi, gj] - half)
        if np.any(~inside):
            tree = cKDTree(self.sites.points(self.m))
            d, _ = tree.query(points[~inside])
            out[~inside] = d - half
        return out

    def bbox(self):
        xmin, xmax, ymin, ymax = self.sites.box
        return (xmin / self.m, xmax / self.m, ymin / self.m, ymax / self.m)

    def area(self):
        return self.sites.count / float(self.m * self.m)

    def perimeter(self):
        # Cauchy-Crofton: lattice edges crossed, scaled by pi/4
        g = np.pad(self.sites.grid, 1)
        crossings = np.count_nonzero(g[1:, :] != g[:-1, :]) + np.count_nonzero(g[:, 1:] != g[:, :-1])
        return math.pi / 4 * crossings / self.m

    def sample_boundary(self, spacing):
        return boundary(self.sites).points(self.m)

    def to_dict(self):
        raise NotImplementedError("lattice regions are not serialisable")
