"""Rectangular sample lattices over box domains, with optional periodic axes."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter, OutOfDomain

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Lattice:
    """Axis-aligned sample grid.

    box is an (n, 2) array of [a_k, b_k]; shape gives node counts per axis.
    Non-periodic axes place nodes at a + i*h, i = 0..n_k-1 with
    h = (b-a)/(n_k-1), both endpoints included. Periodic axes must span
    exactly 2*pi and exclude the right endpoint (h = 2*pi/n_k).
    """

    box: np.ndarray
    shape: tuple
    periodic: tuple = None

    def __post_init__(self):
        box = np.atleast_2d(np.asarray(self.box, dtype=float))
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        per = self.periodic or tuple(False for _ in self.shape)
        object.__setattr__(self, "periodic", tuple(bool(p) for p in per))
        if box.shape != (self.ndim, 2):
            raise InvalidParameter("box must be (n, 2)")
        if any(s < 3 for s in self.shape):
            raise InvalidParameter("need at least 3 nodes per axis")
        for k, p in enumerate(self.periodic):
            if p and abs((box[k, 1] - box[k, 0]) - TWO_PI) > 1e-9:
                raise InvalidParameter("periodic axes must span exactly 2*pi")
        if np.any(self.h <= 0):
            raise InvalidParameter("box extents must be positive")

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def h(self):
        span = self.box[:, 1] - self.box[:, 0]
        divs = np.array([n if p else n - 1 for n, p in zip(self.shape, self.periodic)])
        return span / divs

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    @property
    def diameter(self):
        return float(np.linalg.norm(self.box[:, 1] - self.box[:, 0]))

    def axis_coords(self, k):
        return self.box[k, 0] + self.h[k] * np.arange(self.shape[k])

    def coords(self):
        """All node coordinates, shape (N, n), C-order over the index grid."""
        grids = np.meshgrid(*[self.axis_coords(k) for k in range(self.ndim)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def ravel(self, idx):
        return np.ravel_multi_index(tuple(np.asarray(idx).T), self.shape)

    def unravel(self, flat):
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def contains(self, points, margin=0.0):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.ones(pts.shape[0], dtype=bool)
        for k in range(self.ndim):
            if self.periodic[k]:
                continue
            ok &= (pts[:, k] >= self.box[k, 0] - 1e-12 + margin) & (
                pts[:, k] <= self.box[k, 1] + 1e-12 - margin
            )
        return ok

    def snap(self, points):
        """Nearest node indices for each point plus an in-box mask."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        idx = np.empty((n, self.ndim), dtype=np.int64)
        ok = np.ones(n, dtype=bool)
        for k in range(self.ndim):
            u = (pts[:, k] - self.box[k, 0]) / self.h[k]
            i = np.rint(u).astype(np.int64)
            if self.periodic[k]:
                i %= self.shape[k]
            else:
                ok &= (i >= 0) & (i <= self.shape[k] - 1)
                i = np.clip(i, 0, self.shape[k] - 1)
            idx[:, k] = i
        return idx, ok

    def snap_one(self, point):
        idx, ok = self.snap(np.asarray(point)[None, :])
        if not ok[0]:
            raise OutOfDomain(f"point {point} outside lattice box")
        return int(self.ravel(idx)[0])

    def interp_weights(self, points):
        """Multilinear interpolation stencil.

        Returns (flat_idx, weights, inside): flat_idx and weights have shape
        (N, 2**n); inside marks points whose full stencil lies in the box.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n_pts, n = pts.shape
        base = np.empty((n_pts, n), dtype=np.int64)
        frac = np.empty((n_pts, n))
        inside = np.ones(n_pts, dtype=bool)
        for k in range(n):
            u = (pts[:, k] - self.box[k, 0]) / self.h[k]
            if self.periodic[k]:
                u %= self.shape[k]
                i0 = np.floor(u).astype(np.int64)
                frac[:, k] = u - i0
                base[:, k] = i0 % self.shape[k]
            else:
                i0 = np.floor(u).astype(np.int64)
                inside &= (u >= -1e-9) & (i0 <= self.shape[k] - 1)
                i0 = np.clip(i0, 0, self.shape[k] - 2)
                frac[:, k] = np.clip(u - i0, 0.0, 1.0)
                base[:, k] = i0
        corners = 1 << n
        flat = np.empty((n_pts, corners), dtype=np.int64)
        wts = np.ones((n_pts, corners))
        strides = np.array([int(np.prod(self.shape[k + 1:], dtype=np.int64)) for k in range(n)])
        for c in range(corners):
            offs = np.zeros(n_pts, dtype=np.int64)
            w = np.ones(n_pts)
            for k in range(n):
                bit = (c >> k) & 1
                ik = base[:, k] + bit
                if self.periodic[k]:
                    ik %= self.shape[k]
                w = w * (frac[:, k] if bit else 1.0 - frac[:, k])
                offs = offs + ik * strides[k]
            flat[:, c] = offs
            wts[:, c] = w
        return flat, wts, inside

    def interpolate(self, values, points, fill=np.inf):
        """Multilinear interpolation of a flat nodal field at arbitrary points."""
        vals = np.asarray(values, dtype=float).ravel()
        flat, wts, inside = self.interp_weights(points)
        out = np.einsum("ij,ij->i", vals[flat], wts)
        out[~inside] = fill
        return out

    def boundary_mask(self):
        """Flat mask of nodes on a non-periodic box face."""
        mask = np.zeros(self.shape, dtype=bool)
        for k in range(self.ndim):
            if self.periodic[k]:
                continue
            sl = [slice(None)] * self.ndim
            sl[k] = 0
            mask[tuple(sl)] = True
            sl[k] = self.shape[k] - 1
            mask[tuple(sl)] = True
        return mask.ravel()

    def interior_mask(self, depth=1):
        mask = np.ones(self.shape, dtype=bool)
        for k in range(self.ndim):
            if self.periodic[k]:
                continue
            sl = [slice(None)] * self.ndim
            sl[k] = slice(0, depth)
            mask[tuple(sl)] = False
            sl[k] = slice(self.shape[k] - depth, self.shape[k])
            mask[tuple(sl)] = False
        return mask.ravel()

    def fingerprint(self):
        return (
            tuple(np.round(self.box, 12).ravel().tolist()),
            self.shape,
            self.periodic,
        )


def box_lattice(halfwidths, nodes, center=None, periodic=None):
    """Lattice on a centered box: [c_k - w_k, c_k + w_k] per axis."""
    hw = np.atleast_1d(np.asarray(halfwidths, dtype=float))
    n = hw.size
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    if np.isscalar(nodes) or np.asarray(nodes).ndim == 0:
        nodes = (int(nodes),) * n
    box = np.stack([c - hw, c + hw], axis=1)
    per = periodic or (False,) * n
    for k in range(n):
        if per[k]:
            box[k] = (0.0, TWO_PI)
    return Lattice(box=box, shape=tuple(int(m) for m in nodes), periodic=tuple(per))
