"""Compiled grid kernels: ray traversal, disc clearance and shortest paths.

All kernels work in cell coordinates of a row-major grid where cell
``(row, col)`` spans ``x in [col*res, (col+1)*res)`` and
``y in [row*res, (row+1)*res)``.  Cells outside the array count as blocked.
"""
from __future__ import annotations

import heapq
import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)

# 8-neighbourhood, straight moves first
_DR = np.array([-1, 1, 0, 0, -1, -1, 1, 1], dtype=np.int64)
_DC = np.array([0, 0, -1, 1, -1, 1, -1, 1], dtype=np.int64)


@njit(cache=True)
def ray_cells(x, y, angle, max_range, res, height, width, rows, cols, ts):
    """Supercover traversal of one ray; fills cells in visiting order.

    ``ts[i]`` is the distance at which the ray enters cell ``i`` (0 for the
    origin cell).  Returns the number of cells written.  Traversal stops when
    the entry distance exceeds ``max_range`` or the ray leaves the grid.
    When the ray passes exactly through a cell corner both side cells are
    emitted before the diagonal one.
    """
    dx = math.cos(angle)
    dy = math.sin(angle)
    gx = x / res
    gy = y / res
    c = int(math.floor(gx))
    r = int(math.floor(gy))
    cap = rows.shape[0]
    n = 0
    if r < 0 or r >= height or c < 0 or c >= width:
        return 0
    rows[n] = r
    cols[n] = c
    ts[n] = 0.0
    n += 1
    inf = np.inf
    if dx > 1e-12:
        sc = 1
        tmx = (c + 1 - gx) / dx * res
        tdx = res / dx
    elif dx < -1e-12:
        sc = -1
        tmx = (gx - c) / -dx * res
        tdx = res / -dx
    else:
        sc = 0
        tmx = inf
        tdx = inf
    if dy > 1e-12:
        sr = 1
        tmy = (r + 1 - gy) / dy * res
        tdy = res / dy
    elif dy < -1e-12:
        sr = -1
        tmy = (gy - r) / -dy * res
        tdy = res / -dy
    else:
        sr = 0
        tmy = inf
        tdy = inf
    while n < cap - 3:
        if tmx < tmy:
            t = tmx
            if t > max_range:
                break
            c += sc
            tmx += tdx
        elif tmy < tmx:
            t = tmy
            if t > max_range:
                break
            r += sr
            tmy += tdy
        else:
            t = tmx
            if t > max_range:
                break
            # corner crossing: both side cells touch the ray
            if 0 <= r < height and 0 <= c + sc < width:
                rows[n] = r
                cols[n] = c + sc
                ts[n] = t
                n += 1
            if 0 <= r + sr < height and 0 <= c < width:
                rows[n] = r + sr
                cols[n] = c
                ts[n] = t
                n += 1
            c += sc
            r += sr
            tmx += tdx
            tmy += tdy
        if r < 0 or r >= height or c < 0 or c >= width:
            break
        rows[n] = r
        cols[n] = c
        ts[n] = t
        n += 1
    return n


@njit(cache=True)
def cast_rays(blocked, res, x, y, angles, max_range, out_dist, out_row, out_col):
    """First blocked cell along each ray, or ``max_range`` with row/col -1."""
    h, w = blocked.shape
    cap = 2 * int(math.ceil(max_range / res)) + 16
    rows = np.empty(cap, dtype=np.int64)
    cols = np.empty(cap, dtype=np.int64)
    ts = np.empty(cap, dtype=np.float64)
    for k in range(angles.shape[0]):
        n = ray_cells(x, y, angles[k], max_range, res, h, w, rows, cols, ts)
        out_dist[k] = max_range
        out_row[k] = -1
        out_col[k] = -1
        for i in range(n):
            if blocked[rows[i], cols[i]]:
                out_dist[k] = max(ts[i], 1e-6)
                out_row[k] = rows[i]
                out_col[k] = cols[i]
                break


@njit(cache=True)
def mark_rays(codes, free_code, res, x, y, angles, dists, hit_rows, hit_cols, max_range):
    """Raise every cell traversed before each ray's hit to at least ``free_code``."""
    h, w = codes.shape
    cap = 2 * int(math.ceil(max_range / res)) + 16
    rows = np.empty(cap, dtype=np.int64)
    cols = np.empty(cap, dtype=np.int64)
    ts = np.empty(cap, dtype=np.float64)
    for k in range(angles.shape[0]):
        n = ray_cells(x, y, angles[k], max_range, res, h, w, rows, cols, ts)
        for i in range(n):
            rr = rows[i]
            cc = cols[i]
            if rr == hit_rows[k] and cc == hit_cols[k]:
                break
            if ts[i] > dists[k]:
                break
            if codes[rr, cc] < free_code:
                codes[rr, cc] = free_code


@njit(cache=True)
def disc_is_clear(blocked, res, x, y, radius):
    """True when no blocked cell square intersects the open disc."""
    h, w = blocked.shape
    r2 = radius * radius
    c0 = int(math.floor((x - radius) / res))
    c1 = int(math.floor((x + radius) / res))
    r0 = int(math.floor((y - radius) / res))
    r1 = int(math.floor((y + radius) / res))
    if c0 < 0 or r0 < 0 or c1 >= w or r1 >= h:
        return False
    for rr in range(r0, r1 + 1):
        ylo = rr * res
        yhi = ylo + res
        if y < ylo:
            ddy = ylo - y
        elif y > yhi:
            ddy = y - yhi
        else:
            ddy = 0.0
        for cc in range(c0, c1 + 1):
            if not blocked[rr, cc]:
                continue
            xlo = cc * res
            xhi = xlo + res
            if x < xlo:
                ddx = xlo - x
            elif x > xhi:
                ddx = x - xhi
            else:
                ddx = 0.0
            if ddx * ddx + ddy * ddy < r2:
                return False
    return True


@njit(cache=True)
def nearest_blocked_point(blocked, res, x, y, radius):
    """Closest point on any blocked cell square within ``radius``.

    Returns ``(px, py, found)``.
    """
    h, w = blocked.shape
    best = radius * radius
    bx = x
    by = y
    found = False
    c0 = max(int(math.floor((x - radius) / res)), 0)
    c1 = min(int(math.floor((x + radius) / res)), w - 1)
    r0 = max(int(math.floor((y - radius) / res)), 0)
    r1 = min(int(math.floor((y + radius) / res)), h - 1)
    for rr in range(r0, r1 + 1):
        py = min(max(y, rr * res), (rr + 1) * res)
        for cc in range(c0, c1 + 1):
            if not blocked[rr, cc]:
                continue
            px = min(max(x, cc * res), (cc + 1) * res)
            d2 = (px - x) ** 2 + (py - y) ** 2
            if d2 <= best:
                best = d2
                bx = px
                by = py
                found = True
    return bx, by, found


@njit(cache=True)
def _can_move(free, r, c, k, h, w):
    nr = r + _DR[k]
    nc = c + _DC[k]
    if nr < 0 or nr >= h or nc < 0 or nc >= w or not free[nr, nc]:
        return False
    if k >= 4:
        # no corner cutting past a blocked orthogonal neighbour
        if not free[r + _DR[k], c] or not free[r, c + _DC[k]]:
            return False
    return True


@njit(cache=True)
def astar_cells(free, sr, sc, gr, gc):
    """8-connected A* with the octile heuristic in unit-cell costs.

    Returns ``(path_rows, path_cols, expanded)``; empty path when unreachable.
    """
    h, w = free.shape
    g = np.full((h, w), np.inf)
    parent = np.full((h, w), -1, dtype=np.int64)
    closed = np.zeros((h, w), dtype=np.bool_)
    g[sr, sc] = 0.0
    heap = [(0.0, 0.0, sr * w + sc)]
    expanded = 0
    found = False
    while len(heap) > 0:
        f, hh, idx = heapq.heappop(heap)
        r = idx // w
        c = idx - r * w
        if closed[r, c]:
            continue
        closed[r, c] = True
        expanded += 1
        if r == gr and c == gc:
            found = True
            break
        for k in range(8):
            if not _can_move(free, r, c, k, h, w):
                continue
            nr = r + _DR[k]
            nc = c + _DC[k]
            if closed[nr, nc]:
                continue
            ng = g[r, c] + (SQRT2 if k >= 4 else 1.0)
            if ng < g[nr, nc]:
                g[nr, nc] = ng
                parent[nr, nc] = idx
                ar = abs(nr - gr)
                ac = abs(nc - gc)
                hn = max(ar, ac) + (SQRT2 - 1.0) * min(ar, ac)
                heapq.heappush(heap, (ng + hn, hn, nr * w + nc))
    if not found:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), expanded
    n = 1
    idx = gr * w + gc
    while idx != sr * w + sc:
        idx = parent[idx // w, idx % w]
        n += 1
    prow = np.empty(n, dtype=np.int64)
    pcol = np.empty(n, dtype=np.int64)
    idx = gr * w + gc
    for i in range(n - 1, -1, -1):
        prow[i] = idx // w
        pcol[i] = idx % w
        if i > 0:
            idx = parent[idx // w, idx % w]
    return prow, pcol, expanded


@njit(cache=True)
def distance_field(free, src_rows, src_cols):
    """Multi-source 8-connected Dijkstra in unit-cell costs (inf = unreachable)."""
    h, w = free.shape
    dist = np.full((h, w), np.inf)
    heap = [(0.0, 0)]
    heap.pop()
    for i in range(src_rows.shape[0]):
        r = src_rows[i]
        c = src_cols[i]
        if free[r, c] and dist[r, c] > 0.0:
            dist[r, c] = 0.0
            heapq.heappush(heap, (0.0, r * w + c))
    while len(heap) > 0:
        d, idx = heapq.heappop(heap)
        r = idx // w
        c = idx - r * w
        if d > dist[r, c]:
            continue
        for k in range(8):
            if not _can_move(free, r, c, k, h, w):
                continue
            nr = r + _DR[k]
            nc = c + _DC[k]
            nd = d + (SQRT2 if k >= 4 else 1.0)
            if nd < dist[nr, nc]:
                dist[nr, nc] = nd
                heapq.heappush(heap, (nd, nr * w + nc))
    return dist


@njit(cache=True)
def descend_field(free, dist, r, c, max_len):
    """Follow a distance field downhill from ``(r, c)``.

    Moves are symmetric so the field is also the cost-to-go; each step picks
    the neighbour minimising ``dist[n] + step``.  Stops at a source or after
    ``max_len`` unit-cost of travel.
    """
    h, w = free.shape
    cap = min(int(max_len * 2) + 4, h * w + 1)
    rows = np.empty(cap, dtype=np.int64)
    cols = np.empty(cap, dtype=np.int64)
    rows[0] = r
    cols[0] = c
    n = 1
    travelled = 0.0
    while dist[r, c] > 0.0 and travelled <= max_len and n < cap:
        here = dist[r, c]
        best = np.inf
        bk = -1
        for k in range(8):
            if not _can_move(free, r, c, k, h, w):
                continue
            nd = dist[r + _DR[k], c + _DC[k]]
            if not nd < here:
                continue
            cand = nd + (SQRT2 if k >= 4 else 1.0)
            if cand < best:
                best = cand
                bk = k
        if bk < 0:
            break
        travelled += SQRT2 if bk >= 4 else 1.0
        r += _DR[bk]
        c += _DC[bk]
        rows[n] = r
        cols[n] = c
        n += 1
    return rows[:n].copy(), cols[:n].copy()


@njit(cache=True)
def snap_to_field(dist, res, x, y, radius):
    """Cheapest finite field cell near a continuous point.

    Returns ``(row, col, cost_in_cells)`` where cost adds the Euclidean hop
    from the point to the cell centre; row is -1 when nothing finite lies
    within ``radius``.
    """
    h, w = dist.shape
    r = int(math.floor(y / res))
    c = int(math.floor(x / res))
    if 0 <= r < h and 0 <= c < w and np.isfinite(dist[r, c]):
        return r, c, dist[r, c]
    span = int(math.ceil(radius / res))
    best = np.inf
    br = -1
    bc = -1
    for rr in range(max(r - span, 0), min(r + span, h - 1) + 1):
        for cc in range(max(c - span, 0), min(c + span, w - 1) + 1):
            if not np.isfinite(dist[rr, cc]):
                continue
            hop = math.hypot((cc + 0.5) * res - x, (rr + 0.5) * res - y) / res
            if hop * res > radius:
                continue
            if dist[rr, cc] + hop < best:
                best = dist[rr, cc] + hop
                br = rr
                bc = cc
    return br, bc, best


@njit(cache=True)
def ego_sample(codes, ar, ac, cos_t, sin_t, size, block):
    """Heading-up resampling around cell ``(ar, ac)``.

    Pixel ``(i, j)`` pools ``block x block`` fine-cell samples at forward
    offsets ``block*(size//2 - i) - a`` and left offsets
    ``block*(size//2 - j) - b`` (``a, b < block``), keeping the max code.
    Samples outside the grid read 0.
    """
    h, w = codes.shape
    half = size // 2
    out = np.zeros((size, size), dtype=np.uint8)
    cx = ac + 0.5
    cy = ar + 0.5
    for i in range(size):
        for j in range(size):
            best = 0
            for a in range(block):
                f = block * (half - i) - a
                for b in range(block):
                    l = block * (half - j) - b
                    c = int(math.floor(cx + f * cos_t - l * sin_t))
                    r = int(math.floor(cy + f * sin_t + l * cos_t))
                    if 0 <= r < h and 0 <= c < w:
                        v = codes[r, c]
                        if v > best:
                            best = v
            out[i, j] = best
    return out
