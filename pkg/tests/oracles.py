"""Brute-force reference implementations used to check the pipeline."""

from collections import deque
import math

import numpy as np


def median_oracle(vol, size):
    """Sort the edge-replicated size^3 neighbourhood of every voxel, take the middle."""
    d, h, w = vol.shape
    r = size // 2
    out = np.empty_like(vol)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                vals = []
                for dz in range(-r, r + 1):
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            zz = min(max(z + dz, 0), d - 1)
                            yy = min(max(y + dy, 0), h - 1)
                            xx = min(max(x + dx, 0), w - 1)
                            vals.append(vol[zz, yy, xx])
                vals.sort()
                out[z, y, x] = vals[len(vals) // 2]
    return out


def erosion_oracle(mask, radius):
    """A voxel survives iff every in-grid voxel of its (2r+1)^3 box is set."""
    d, h, w = mask.shape
    out = np.zeros(mask.shape, bool)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                box = mask[max(z - radius, 0):z + radius + 1,
                           max(y - radius, 0):y + radius + 1,
                           max(x - radius, 0):x + radius + 1]
                out[z, y, x] = bool(box.all())
    return out


def components_oracle(mask, min_voxels):
    """Breadth-first flood fill over face neighbours; drop small components."""
    mask = mask.astype(bool)
    seen = np.zeros(mask.shape, bool)
    out = np.zeros(mask.shape, bool)
    steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        comp = [start]
        seen[start] = True
        queue = deque([start])
        while queue:
            z, y, x = queue.popleft()
            for dz, dy, dx in steps:
                n = (z + dz, y + dy, x + dx)
                if all(0 <= n[i] < mask.shape[i] for i in range(3)) and mask[n] and not seen[n]:
                    seen[n] = True
                    comp.append(n)
                    queue.append(n)
        if len(comp) >= min_voxels:
            for v in comp:
                out[v] = True
    return out


def percentile_oracle(values, p):
    """Fully sort, then index ceil(p/100*n) (1-based) computed in exact integer arithmetic."""
    s = sorted(float(v) for v in values)
    n = len(s)
    # p given with at most 6 decimals in tests
    num = round(p * 10 ** 6) * n
    idx = -(-num // (100 * 10 ** 6))
    return s[min(max(idx, 1), n) - 1]
