"""Compiled inner loops: random walks and sandpile toppling.

Random numbers come from a counter-based SplitMix64 construction: particle
``k`` of a run seeded with ``seed`` reads the words ``mix(key_k + j*GOLDEN)``
for ``j = 1, 2, ...`` where ``key_k = mix(seed + (k+1)*GOLDEN)``. A walk is
therefore reproducible from ``(seed, k)`` alone, whatever order particles are
simulated in. Each 64-bit word supplies 32 two-bit steps.
"""

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_TWO = np.uint64(2)
_THREE = np.uint64(3)

DX = np.array([1, -1, 0, 0], dtype=np.int64)
DY = np.array([0, 0, 1, -1], dtype=np.int64)

OK = 0
EDGE = 1
BUDGET = 2


@njit(cache=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def particle_key(seed, index):
    return mix64(seed + GOLDEN * np.uint64(index + 1))


@njit(cache=True)
def uniform01(key, counter):
    """Deterministic uniform in [0, 1) from a particle key and a counter."""
    w = mix64(key + GOLDEN * np.uint64(counter + 1))
    return (w >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def idla_walks(occ, absorb, use_absorb, x0, y0, src_x, src_y, seed, first_index, budget, land_x, land_y, lengths):
    """Release particles one after another until each lands.

    A particle stops at the first site not in ``occ`` or, when
    ``use_absorb``, not in ``absorb``; that site is marked occupied. Returns
    ``(n_done, status)``; ``status == EDGE`` means the last landing touched the
    grid border and the caller must pad before continuing.
    """
    nx, ny = occ.shape
    n = src_x.shape[0]
    for k in range(n):
        px = src_x[k] - x0
        py = src_y[k] - y0
        key = particle_key(seed, first_index + k)
        counter = 0
        word = np.uint64(0)
        left = 0
        steps = 0
        while True:
            if occ[px, py] == 0:
                break
            if use_absorb and absorb[px, py] == 0:
                break
            if left == 0:
                counter += 1
                word = mix64(key + GOLDEN * np.uint64(counter))
                left = 32
            d = np.int64(word & _THREE)
            word = word >> _TWO
            left -= 1
            px += DX[d]
            py += DY[d]
            steps += 1
            if steps > budget:
                return k, BUDGET
        occ[px, py] = 1
        land_x[k] = px + x0
        land_y[k] = py + y0
        lengths[k] = steps
        if px == 0 or py == 0 or px == nx - 1 or py == ny - 1:
            return k + 1, EDGE
    return n, OK


@njit(cache=True)
def exit_walks(domain, x0, y0, sx, sy, n_walks, seed, first_index, budget, out_x, out_y, prev_x, prev_y):
    """Walk from ``(sx, sy)`` until leaving ``domain``; record the exit sites
    and the last site visited before the exit.

    ``domain`` must be padded so no domain cell touches the border.
    Returns ``-1`` on success or the index of the walk exceeding ``budget``.
    """
    for k in range(n_walks):
        px = sx - x0
        py = sy - y0
        key = particle_key(seed, first_index + k)
        counter = 0
        word = np.uint64(0)
        left = 0
        steps = 0
        qx = px
        qy = py
        while domain[px, py] != 0:
            if left == 0:
                counter += 1
                word = mix64(key + GOLDEN * np.uint64(counter))
                left = 32
            d = np.int64(word & _THREE)
            word = word >> _TWO
            left -= 1
            qx = px
            qy = py
            px += DX[d]
            py += DY[d]
            steps += 1
            if steps > budget:
                return k
        out_x[k] = px + x0
        out_y[k] = py + y0
        prev_x[k] = qx + x0
        prev_y[k] = qy + y0
    return -1


@njit(cache=True)
def topple_sweep(mass, tol, max_sweeps):
    """Gauss-Seidel toppling: keep 1 at each site, split the excess four ways.

    Returns ``(sweeps, max_excess, touched_border)``.
    """
    nx, ny = mass.shape
    border = False
    for sweep in range(max_sweeps):
        worst = 0.0
        for i in range(nx):
            for j in range(ny):
                e = mass[i, j] - 1.0
                if e > tol:
                    if e > worst:
                        worst = e
                    if i == 0 or j == 0 or i == nx - 1 or j == ny - 1:
                        border = True
                        return sweep, worst, border
                    mass[i, j] = 1.0
                    q = 0.25 * e
                    mass[i + 1, j] += q
                    mass[i - 1, j] += q
                    mass[i, j + 1] += q
                    mass[i, j - 1] += q
        if worst <= tol:
            return sweep + 1, worst, border
    worst = 0.0
    for i in range(nx):
        for j in range(ny):
            if mass[i, j] - 1.0 > worst:
                worst = mass[i, j] - 1.0
    return max_sweeps, worst, border


@njit(cache=True)
def _heap_push(keys, vals, size, key, val):
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        p = (i - 1) // 2
        if keys[p] >= keys[i]:
            break
        keys[p], keys[i] = keys[i], keys[p]
        vals[p], vals[i] = vals[i], vals[p]
        i = p
    return size + 1


@njit(cache=True)
def _heap_pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        big = i
        if l < size and keys[l] > keys[big]:
            big = l
        if r < size and keys[r] > keys[big]:
            big = r
        if big == i:
            break
        keys[big], keys[i] = keys[i], keys[big]
        vals[big], vals[i] = vals[i], vals[big]
        i = big
    return key, val, size


@njit(cache=True)
def topple_priority(mass, tol, max_topples):
    """Always topple the site with the largest current excess (lazy max-heap).

    Returns ``(topples, max_excess, touched_border)``.
    """
    nx, ny = mass.shape
    cap = 16 * nx * ny + 16
    keys = np.empty(cap, dtype=np.float64)
    vals = np.empty(cap, dtype=np.int64)
    size = 0
    for i in range(nx):
        for j in range(ny):
            if mass[i, j] - 1.0 > tol:
                size = _heap_push(keys, vals, size, mass[i, j] - 1.0, i * ny + j)
    topples = 0
    while size > 0 and topples < max_topples:
        key, idx, size = _heap_pop(keys, vals, size)
        i = idx // ny
        j = idx % ny
        e = mass[i, j] - 1.0
        if e <= tol or e != key:
            continue
        if i == 0 or j == 0 or i == nx - 1 or j == ny - 1:
            return topples, e, True
        mass[i, j] = 1.0
        q = 0.25 * e
        topples += 1
        for d in range(4):
            a = i + DX[d]
            b = j + DY[d]
            mass[a, b] += q
            ea = mass[a, b] - 1.0
            if ea > tol:
                if size >= cap - 1:
                    # compact: rebuild from the grid
                    size = 0
                    for u in range(nx):
                        for v in range(ny):
                            if mass[u, v] - 1.0 > tol:
                                size = _heap_push(keys, vals, size, mass[u, v] - 1.0, u * ny + v)
                else:
                    size = _heap_push(keys, vals, size, ea, a * ny + b)
    worst = 0.0
    for i in range(nx):
        for j in range(ny):
            if mass[i, j] - 1.0 > worst:
                worst = mass[i, j] - 1.0
    return topples, worst, False


@njit(cache=True)
def visit_counts(radius, n_steps, n_walks, seed, first_index):
    """Visits of ``n_walks`` walks of ``n_steps`` steps from the origin to each
    site of the window ``[-radius, radius]^2`` (step 0 included)."""
    w = 2 * radius + 1
    out = np.zeros((n_walks, w, w), dtype=np.int32)
    for k in range(n_walks):
        key = particle_key(seed, first_index + k)
        counter = 0
        word = np.uint64(0)
        left = 0
        px = 0
        py = 0
        out[k, radius, radius] += 1
        for _ in range(n_steps):
            if left == 0:
                counter += 1
                word = mix64(key + GOLDEN * np.uint64(counter))
                left = 32
            d = np.int64(word & _THREE)
            word = word >> _TWO
            left -= 1
            px += DX[d]
            py += DY[d]
            if -radius <= px <= radius and -radius <= py <= radius:
                out[k, px + radius, py + radius] += 1
    return out
