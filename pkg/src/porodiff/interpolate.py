"""P1 interpolation between meshes (point location + barycentric weights)."""

from __future__ import annotations

import numpy as np

from .errors import PointOutsideDomainError


class P1Interpolator:
    """Evaluate P1 fields of a source mesh at fixed query points.

    Location is done once at construction; evaluation is a sparse weighted
    gather, cheap enough to run per snapshot.
    """

    def __init__(self, mesh, points, tol=1e-9):
        self.mesh = mesh
        points = np.atleast_2d(np.asarray(points, dtype=float))
        self.points = points
        tri_pts = mesh.nodes[mesh.triangles]
        lo = tri_pts.min(axis=1)
        hi = tri_pts.max(axis=1)
        bbox_lo = mesh.nodes.min(axis=0)
        bbox_hi = mesh.nodes.max(axis=0)
        span = np.maximum(bbox_hi - bbox_lo, 1e-300)
        nbin = max(1, int(np.sqrt(mesh.n_triangles)))
        self._nbin = nbin

        def bin_of(xy):
            b = np.floor((xy - bbox_lo) / span * nbin).astype(np.int64)
            return np.clip(b, 0, nbin - 1)

        buckets = {}
        blo = bin_of(lo)
        bhi = bin_of(hi)
        for t in range(mesh.n_triangles):
            for bx in range(blo[t, 0], bhi[t, 0] + 1):
                for by in range(blo[t, 1], bhi[t, 1] + 1):
                    buckets.setdefault((bx, by), []).append(t)

        p0 = tri_pts[:, 0]
        e1 = tri_pts[:, 1] - p0
        e2 = tri_pts[:, 2] - p0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]

        n = len(points)
        tri_idx = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        pb = bin_of(points)
        for i in range(n):
            best_t = -1
            best_short = -np.inf
            best_l = None
            for t in buckets.get((pb[i, 0], pb[i, 1]), ()):
                rel = points[i] - p0[t]
                l1 = (rel[0] * e2[t, 1] - rel[1] * e2[t, 0]) / det[t]
                l2 = (e1[t, 0] * rel[1] - e1[t, 1] * rel[0]) / det[t]
                l0 = 1.0 - l1 - l2
                short = min(l0, l1, l2)
                if short >= -tol:
                    best_t = t
                    best_l = (l0, l1, l2)
                    break
                if short > best_short:
                    best_short = short
                    best_t = t
                    best_l = (l0, l1, l2)
            if best_t < 0 or (min(best_l) < -tol and best_short < -1e-6):
                raise PointOutsideDomainError(
                    f"point {tuple(points[i])} lies outside the source mesh"
                )
            tri_idx[i] = best_t
            bary[i] = np.clip(best_l, 0.0, None)
            bary[i] /= bary[i].sum()
        self.tri_idx = tri_idx
        self.bary = bary
        self._verts = mesh.triangles[tri_idx]

    def __call__(self, values):
        values = np.asarray(values, dtype=float)
        return np.einsum("pk,pk->p", values[self._verts], self.bary)


def interpolate_p1(mesh, values, points):
    """One-off P1 interpolation of nodal values at the given points."""
    return P1Interpolator(mesh, points)(values)
