"""Independent brute-force reference implementations used by the tests."""

from collections import deque
from itertools import product

import numpy as np


def neighbor_offsets(ndim, connectivity):
    offs = []
    for d in product((-1, 0, 1), repeat=ndim):
        if not any(d):
            continue
        if connectivity == "face" and sum(map(abs, d)) != 1:
            continue
        offs.append(d)
    return offs


def flood_fill_label(mask, connectivity):
    """BFS labeling in raster order; returns (labels, [(count, bbox)])."""
    mask = np.asarray(mask).astype(bool)
    labels = np.zeros(mask.shape, dtype=np.int64)
    offs = neighbor_offsets(mask.ndim, connectivity)
    comps = []
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        lab = len(comps) + 1
        labels[start] = lab
        queue = deque([start])
        members = []
        while queue:
            p = queue.popleft()
            members.append(p)
            for d in offs:
                q = tuple(a + b for a, b in zip(p, d))
                if all(0 <= q[i] < mask.shape[i] for i in range(mask.ndim)) and mask[q] and not labels[q]:
                    labels[q] = lab
                    queue.append(q)
        arr = np.array(members)
        bbox = tuple((int(lo), int(hi)) for lo, hi in zip(arr.min(0), arr.max(0)))
        comps.append((len(members), bbox, tuple(arr.mean(0))))
    return labels, comps


def binning(values, lo, hi, bins):
    """Per-value bin assignment with a right-closed last bin."""
    counts = [0] * bins
    width = (hi - lo) / bins
    for v in np.ravel(values):
        v = min(max(float(v), lo), hi)
        k = int((v - lo) // width)
        counts[min(k, bins - 1)] += 1
    return counts


def scan_rightmost_peak(counts, centers, prominence):
    """Exhaustive left-to-right scan keeping the last qualifying strict local max."""
    best = None
    floor = prominence * max(counts)
    n = len(counts)
    for i in range(n):
        left = counts[i - 1] if i > 0 else -1
        right = counts[i + 1] if i < n - 1 else -1
        if counts[i] > left and counts[i] > right and counts[i] >= floor and counts[i] > 0:
            best = centers[i]
    return best


def dense_cube_average(volume, predictor, edge, stride):
    """Per-voxel mean over every covering cube, gathered voxel-side.

    Cube predictions are computed once per origin; each voxel then collects
    the predictions of all cubes containing it via per-axis coverage tables.
    """
    shape = volume.shape
    grids = []
    for n in shape:
        offs = list(range(0, n - edge + 1, stride))
        if offs[-1] != n - edge:
            offs.append(n - edge)
        grids.append(offs)
    preds = np.zeros(tuple(len(g) for g in grids) + (edge,) * 3)
    for (i, z), (j, y), (k, x) in product(*(list(enumerate(g)) for g in grids)):
        cube = volume[z : z + edge, y : y + edge, x : x + edge]
        preds[i, j, k] = predictor(cube[None])[0]

    tables = []
    for n, offs in zip(shape, grids):
        cover = [[gi for gi, o in enumerate(offs) if o <= v < o + edge] for v in range(n)]
        width = max(len(c) for c in cover)
        idx = np.full((n, width), -1)
        for v, c in enumerate(cover):
            idx[v, : len(c)] = c
        tables.append((idx, np.array(offs)))

    (iz, oz), (iy, oy), (ix, ox) = tables
    zc = np.arange(shape[0])[:, None, None]
    yc = np.arange(shape[1])[None, :, None]
    xc = np.arange(shape[2])[None, None, :]
    total = np.zeros(shape)
    count = np.zeros(shape)
    for a, b, c in product(range(iz.shape[1]), range(iy.shape[1]), range(ix.shape[1])):
        gz, gy, gx = iz[:, a][:, None, None], iy[:, b][None, :, None], ix[:, c][None, None, :]
        valid = (gz >= 0) & (gy >= 0) & (gx >= 0)
        gz_, gy_, gx_ = np.maximum(gz, 0), np.maximum(gy, 0), np.maximum(gx, 0)
        vals = preds[
            np.broadcast_to(gz_, shape), np.broadcast_to(gy_, shape), np.broadcast_to(gx_, shape),
            np.broadcast_to(zc - oz[gz_], shape) % edge,
            np.broadcast_to(yc - oy[gy_], shape) % edge,
            np.broadcast_to(xc - ox[gx_], shape) % edge,
        ]
        total += np.where(valid, vals, 0.0)
        count += valid
    return total / count


def pooled_dice(preds, gts):
    p = np.concatenate([np.ravel(preds[k]) for k in sorted(gts)]).astype(bool)
    g = np.concatenate([np.ravel(gts[k]) for k in sorted(gts)]).astype(bool)
    s = p.sum() + g.sum()
    return 1.0 if s == 0 else 2.0 * (p & g).sum() / s


def central_difference_grad(f, x, eps=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
