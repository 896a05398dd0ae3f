"""Brute-force reference implementations shared by the test modules."""

import itertools
import math

import numpy as np

NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def boundary_voxels(mask):
    """Mask voxels with a 6-neighbour outside the mask or outside the volume."""
    out = []
    shape = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for d in NEIGHBOURS:
            n = tuple(i + o for i, o in zip(idx, d))
            if any(c < 0 or c >= s for c, s in zip(n, shape)) or not mask[n]:
                out.append(tuple(int(i) for i in idx))
                break
    return out


def directed_mean(src, dst, spacing):
    total = 0.0
    for a in src:
        best = math.inf
        for b in dst:
            d = math.sqrt(sum(((i - j) * s) ** 2 for i, j, s in zip(a, b, spacing)))
            best = min(best, d)
        total += best
    return total / len(src)


def surf_dist(pred, ref, spacing):
    if not pred.any() or not ref.any():
        return None
    bp, br = boundary_voxels(pred), boundary_voxels(ref)
    return (directed_mean(bp, br, spacing) + directed_mean(br, bp, spacing)) / 2.0


def dice(pred, ref):
    a, b = int(pred.sum()), int(ref.sum())
    if a + b == 0:
        return 1.0
    return 2.0 * int((pred & ref).sum()) / (a + b)


def vol_diff(pred, ref, spacing):
    return (int(pred.sum()) - int(ref.sum())) * (spacing[0] * spacing[1] * spacing[2]) / 1000.0


def centroid_dist(pred, ref, spacing):
    if not pred.any() or not ref.any():
        return None

    def center(m):
        idx = np.argwhere(m)
        return [int(idx[:, a].sum()) / len(idx) * spacing[a] for a in range(3)]

    cp, cr = center(pred), center(ref)
    d = [p - r for p, r in zip(cp, cr)]
    return math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])


def all_masks_2cube():
    for bits in itertools.product((False, True), repeat=8):
        yield np.array(bits, dtype=bool).reshape(2, 2, 2)



def surf_dist_pairwise(pred, ref, spacing):
    """Same definition as surf_dist, with the all-pairs distances done in numpy."""
    if not pred.any() or not ref.any():
        return None
    sp = np.asarray(spacing, dtype=np.float64)
    bp = np.array(boundary_voxels(pred), dtype=np.float64) * sp
    br = np.array(boundary_voxels(ref), dtype=np.float64) * sp
    d = np.sqrt(((bp[:, None, :] - br[None, :, :]) ** 2).sum(-1))
    return (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean())) / 2.0
