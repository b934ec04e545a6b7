"""Hoermander vector-field systems, stratification, and weighted approximating frames.

A frame stores the horizontal generators X_1..X_m together with an
enumeration Y_1..Y_p of the commutators needed to span the tangent space,
each carrying the order (degree) of the commutator that produced it.
The canonical enumeration puts horizontal fields first, then commutators
by stratum in lexicographic order of the generating indices.

The weighted approximating family attaches a parameter eps >= 0:
fields of degree d > 1 get scaled by eps**(d-1), and unweighted copies
of the commutators are appended so determinants over all n-tuples can be
formed. At eps = 0 the weighted copies vanish and the horizontal
structure is recovered.

Indices are 0-based throughout.
"""

from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np

from .errors import InvalidParameter, OutOfDomain, UnsupportedFrame
from .lattice import TWO_PI


def _as_points(x, n):
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 1:
        if pts.shape[0] != n:
            raise InvalidParameter(f"point has dimension {pts.shape[0]}, expected {n}")
        return pts[None, :], True
    if pts.shape[1] != n:
        raise InvalidParameter(f"points have dimension {pts.shape[1]}, expected {n}")
    return pts, False


@dataclass(frozen=True)
class VectorField:
    """One smooth field, given by a vectorized coefficient evaluator."""

    name: str
    ambient_dim: int
    coeff: callable  # (N, n) points -> (N, n) coefficients

    def __call__(self, x):
        pts, single = _as_points(x, self.ambient_dim)
        out = np.asarray(self.coeff(pts), dtype=float)
        return out[0] if single else out


@dataclass(frozen=True)
class Frame:
    """Stratified system Y_1..Y_p with Y_i = X_i for i < m.

    degrees[i] is the commutator order generating field i (1 for the
    horizontal generators). bracket_table maps ordered index pairs to
    closed-form coefficient evaluators; missing pairs fall back to
    centered finite differences. all_brackets_zero marks commuting
    frames (euclidean) so no differencing is ever needed.
    """

    name: str
    n: int
    m: int
    step: int
    degrees: tuple
    fields: tuple
    box: np.ndarray
    periodic_axes: tuple
    bracket_table: dict = dc_field(default_factory=dict)
    all_brackets_zero: bool = False
    hormander_smooth: bool = True
    excluded_modules: frozenset = frozenset()

    @property
    def p(self):
        return len(self.fields)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.box[:, 1] - self.box[:, 0]))

    def eval(self, i, x):
        """Coefficients of Y_i at x; x may be one point or an (N, n) batch."""
        return self.fields[i](x)

    def frame_matrix(self, x, indices=None):
        """Columns Y_i(x) stacked into an (..., n, k) matrix."""
        idx = range(self.p) if indices is None else indices
        pts, single = _as_points(x, self.n)
        cols = np.stack([self.fields[i](pts) for i in idx], axis=2)
        return cols[0] if single else cols

    def random_points(self, rng, count, shrink=0.9):
        lo = self.box[:, 0].copy()
        hi = self.box[:, 1].copy()
        mid, half = (lo + hi) / 2, (hi - lo) / 2
        lo, hi = mid - shrink * half, mid + shrink * half
        for k, p in enumerate(self.periodic_axes):
            if p:
                lo[k], hi[k] = 0.0, TWO_PI
        return rng.uniform(lo, hi, size=(count, self.n))


def bracket_of_evaluators(fi, fj, x, h):
    """[V_i, V_j] at x by centered differences of the coefficient maps.

    fi, fj are vectorized evaluators (N, n) -> (N, n); h is the spatial
    probe step. Exact to O(h^2) for smooth coefficients.
    """
    pts, single = _as_points(x, np.atleast_2d(np.asarray(x, dtype=float)).shape[-1])
    vi = np.asarray(fi(pts), dtype=float)
    vj = np.asarray(fj(pts), dtype=float)

    def directional(fn, v):
        scale = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
        delta = h / scale
        return (fn(pts + delta * v) - fn(pts - delta * v)) / (2.0 * delta)

    out = directional(fj, vi) - directional(fi, vj)
    return out[0] if single else out


def bracket(frame, i, j, x, h=None):
    """Commutator [Y_i, Y_j](x).

    Uses the frame's closed-form table when the pair is listed, otherwise
    centered finite differences with step h = 1e-5 * (box diameter).
    """
    if not (0 <= i < frame.p and 0 <= j < frame.p):
        raise InvalidParameter(f"field indices ({i}, {j}) out of range")
    pts, single = _as_points(x, frame.n)
    if not np.all(_in_box(frame, pts)):
        raise OutOfDomain("bracket evaluation point outside the frame's domain box")
    if i == j or frame.all_brackets_zero:
        out = np.zeros_like(pts)
        return out[0] if single else out
    if (i, j) in frame.bracket_table:
        out = np.asarray(frame.bracket_table[(i, j)](pts), dtype=float)
        return out[0] if single else out
    if (j, i) in frame.bracket_table:
        out = -np.asarray(frame.bracket_table[(j, i)](pts), dtype=float)
        return out[0] if single else out
    if h is None:
        h = 1e-5 * frame.diameter
    out = bracket_of_evaluators(frame.fields[i], frame.fields[j], pts, h)
    return out[0] if single else out


def _in_box(frame, pts):
    ok = np.ones(pts.shape[0], dtype=bool)
    for k in range(frame.n):
        if frame.periodic_axes[k]:
            continue
        ok &= (pts[:, k] >= frame.box[k, 0] - 1e-9) & (pts[:, k] <= frame.box[k, 1] + 1e-9)
    return ok


@dataclass(frozen=True)
class EpsFrame:
    """Weighted family of 2p - m fields attached to a frame and eps >= 0.

    Field i (0-based) is
        Y_i                      for i < m,
        eps**(d(i)-1) * Y_i      for m <= i < p,
        Y_{i-p+m}                for p <= i < 2p - m,
    with weighted degree 1 for i < p and d(i-p+m) otherwise.
    """

    base: Frame
    eps: float

    def __post_init__(self):
        if self.eps < 0:
            raise InvalidParameter("eps must be nonnegative")

    @property
    def n(self):
        return self.base.n

    @property
    def m(self):
        return self.base.m

    @property
    def p(self):
        return self.base.p

    @property
    def field_count(self):
        return 2 * self.base.p - self.base.m

    def weight(self, i):
        base = self.base
        if i < base.m:
            return 1.0
        if i < base.p:
            return float(self.eps ** (base.degrees[i] - 1))
        return 1.0

    def d_eps(self, i):
        base = self.base
        if i < base.p:
            return 1
        return base.degrees[i - base.p + base.m]

    def base_index(self, i):
        base = self.base
        return i if i < base.p else i - base.p + base.m

    def eval_field(self, i, x):
        if not 0 <= i < self.field_count:
            raise InvalidParameter(f"field index {i} out of range")
        w = self.weight(i)
        if w == 0.0:
            pts, single = _as_points(x, self.n)
            out = np.zeros_like(pts)
            return out[0] if single else out
        out = self.base.eval(self.base_index(i), x)
        return out if w == 1.0 else w * out

    def active_horizontal(self):
        """Indices i < p whose weighted field is not identically zero."""
        return [i for i in range(self.base.p) if self.weight(i) != 0.0]

    def matrix(self, x, indices):
        """Columns X_i^eps(x) for the given indices, shape (..., n, k)."""
        pts, single = _as_points(x, self.n)
        cols = np.stack([self.eval_field(i, pts) for i in indices], axis=2)
        return cols[0] if single else cols


def make_eps_frame(frame, eps):
    """Weighted approximating family for the given frame at parameter eps."""
    if eps < 0:
        raise InvalidParameter("eps must be nonnegative")
    return EpsFrame(base=frame, eps=float(eps))


# ---------------------------------------------------------------------------
# lattice differences


def axis_diffs(lat, u):
    """Centered first differences of a flat nodal field along every axis.

    Interior nodes are second-order centered; non-periodic faces fall back
    to one-sided first order. Returns a list of flat arrays.
    """
    grid = np.asarray(u, dtype=float).reshape(lat.shape)
    out = []
    for k in range(lat.ndim):
        h = lat.h[k]
        d = (np.roll(grid, -1, axis=k) - np.roll(grid, 1, axis=k)) / (2 * h)
        if not lat.periodic[k]:
            sl_lo = [slice(None)] * lat.ndim
            sl_lo[k] = 0
            sl_next = list(sl_lo)
            sl_next[k] = 1
            d[tuple(sl_lo)] = (grid[tuple(sl_next)] - grid[tuple(sl_lo)]) / h
            sl_hi = [slice(None)] * lat.ndim
            sl_hi[k] = lat.shape[k] - 1
            sl_prev = list(sl_hi)
            sl_prev[k] = lat.shape[k] - 2
            d[tuple(sl_hi)] = (grid[tuple(sl_hi)] - grid[tuple(sl_prev)]) / h
        out.append(d.ravel())
    return out


def grad_eps(epsframe, lat, u):
    """All p weighted derivatives (X_1^eps u, .., X_p^eps u) on every node.

    Returns an array of shape (p, N). Centered differences inside, one-sided
    on non-periodic faces, so values on the boundary ring are first order.
    """
    diffs = axis_diffs(lat, u)
    coords = lat.coords()
    out = np.zeros((epsframe.p, lat.size))
    for i in range(epsframe.p):
        w = epsframe.weight(i)
        if w == 0.0:
            continue
        coeff = epsframe.base.eval(epsframe.base_index(i), coords)
        acc = np.zeros(lat.size)
        for k in range(lat.ndim):
            ck = coeff[:, k]
            if np.any(ck != 0.0):
                acc += ck * diffs[k]
        out[i] = w * acc
    return out


def horizontal_gradient(epsframe, lat, u, node):
    """(X_1^eps u, .., X_p^eps u) at one interior lattice node.

    node is a flat node index. Second-order centered differences; raises
    OutOfDomain when the stencil would leave a non-periodic box face.
    """
    u = np.asarray(u, dtype=float).ravel()
    idx = lat.unravel(node)
    for k in range(lat.ndim):
        if lat.periodic[k]:
            continue
        if idx[k] == 0 or idx[k] == lat.shape[k] - 1:
            raise OutOfDomain("gradient stencil exits the lattice")
    x = lat.coords()[node]
    grid = u.reshape(lat.shape)
    out = np.zeros(epsframe.p)
    for i in range(epsframe.p):
        w = epsframe.weight(i)
        if w == 0.0:
            continue
        coeff = epsframe.base.eval(epsframe.base_index(i), x)
        val = 0.0
        for k in range(lat.ndim):
            if coeff[k] == 0.0:
                continue
            up = list(idx)
            dn = list(idx)
            up[k] = (idx[k] + 1) % lat.shape[k]
            dn[k] = (idx[k] - 1) % lat.shape[k]
            val += coeff[k] * (grid[tuple(up)] - grid[tuple(dn)]) / (2 * lat.h[k])
        out[i] = w * val
    return out


# ---------------------------------------------------------------------------
# built-in frames


def _const_field(vec):
    vec = np.asarray(vec, dtype=float)

    def coeff(pts):
        return np.broadcast_to(vec, pts.shape).copy()

    return coeff


def _heisenberg_fields():
    def x1(pts):
        out = np.zeros_like(pts)
        out[:, 0] = 1.0
        out[:, 2] = -pts[:, 1]
        return out

    def x2(pts):
        out = np.zeros_like(pts)
        out[:, 1] = 1.0
        out[:, 2] = pts[:, 0]
        return out

    return x1, x2, _const_field([0.0, 0.0, 2.0])


def _roto_fields():
    def x1(pts):
        out = np.zeros_like(pts)
        out[:, 0] = np.cos(pts[:, 2])
        out[:, 1] = np.sin(pts[:, 2])
        return out

    def y3(pts):
        out = np.zeros_like(pts)
        out[:, 0] = np.sin(pts[:, 2])
        out[:, 1] = -np.cos(pts[:, 2])
        return out

    return x1, _const_field([0.0, 0.0, 1.0]), y3


def build_builtin_frame(name):
    """Construct one of the hand-coded frames.

    Supported names: heisenberg1, rototranslation, grushin, example32 and
    euclidean(n) (also accepted as euclideanN). Unknown names raise
    UnsupportedFrame.
    """
    key = name.strip().lower().replace(" ", "")
    if key == "heisenberg1":
        x1, x2, y3 = _heisenberg_fields()
        fields = (
            VectorField("X1", 3, x1),
            VectorField("X2", 3, x2),
            VectorField("Y3", 3, y3),
        )
        table = {
            (0, 1): _const_field([0.0, 0.0, 2.0]),
            (0, 2): _const_field([0.0, 0.0, 0.0]),
            (1, 2): _const_field([0.0, 0.0, 0.0]),
        }
        return Frame(
            name="heisenberg1",
            n=3,
            m=2,
            step=2,
            degrees=(1, 1, 2),
            fields=fields,
            box=np.array([[-2.5, 2.5], [-2.5, 2.5], [-2.5, 2.5]]),
            periodic_axes=(False, False, False),
            bracket_table=table,
        )
    if key == "rototranslation":
        x1, x2, y3 = _roto_fields()
        fields = (
            VectorField("X1", 3, x1),
            VectorField("X2", 3, x2),
            VectorField("Y3", 3, y3),
        )
        table = {
            (0, 1): y3,
            (0, 2): _const_field([0.0, 0.0, 0.0]),
            (1, 2): x1,  # the rotation algebra closes back on X1
        }
        return Frame(
            name="rototranslation",
            n=3,
            m=2,
            step=2,
            degrees=(1, 1, 2),
            fields=fields,
            box=np.array([[-2.5, 2.5], [-2.5, 2.5], [0.0, TWO_PI]]),
            periodic_axes=(False, False, True),
            bracket_table=table,
        )
    if key == "grushin":
        def x2(pts):
            out = np.zeros_like(pts)
            out[:, 1] = np.abs(pts[:, 0])
            return out

        def b01(pts):
            out = np.zeros_like(pts)
            out[:, 1] = np.sign(pts[:, 0])
            return out

        fields = (
            VectorField("X1", 2, _const_field([1.0, 0.0])),
            VectorField("X2", 2, x2),
        )
        return Frame(
            name="grushin",
            n=2,
            m=2,
            step=1,
            degrees=(1, 1),
            fields=fields,
            box=np.array([[-2.5, 2.5], [-2.5, 2.5]]),
            periodic_axes=(False, False),
            bracket_table={(0, 1): b01},
            hormander_smooth=False,
            excluded_modules=frozenset({"heat", "flows"}),
        )
    if key == "example32":
        def x1(pts):
            out = np.zeros_like(pts)
            out[:, 0] = np.cos(pts[:, 4])
            out[:, 1] = np.sin(pts[:, 4])
            return out

        def neg_x1(pts):
            return -x1(pts)

        def x4(pts):
            out = np.zeros_like(pts)
            out[:, 3] = pts[:, 2] ** 2
            return out

        def y5(pts):
            out = np.zeros_like(pts)
            out[:, 0] = np.sin(pts[:, 4])
            out[:, 1] = -np.cos(pts[:, 4])
            return out

        def y6(pts):
            out = np.zeros_like(pts)
            out[:, 3] = 2.0 * pts[:, 2]
            return out

        fields = (
            VectorField("X1", 5, x1),
            VectorField("X2", 5, _const_field([0, 0, 0, 0, 1.0])),
            VectorField("X3", 5, _const_field([0, 0, 1.0, 0, 0])),
            VectorField("X4", 5, x4),
            VectorField("Y5", 5, y5),
            VectorField("Y6", 5, y6),
            VectorField("Y7", 5, x1),       # [X2, Y5], reappears with degree 3
            VectorField("Y8", 5, neg_x1),   # [Y5, X2]
            VectorField("Y9", 5, _const_field([0, 0, 0, 2.0, 0])),  # [X3, Y6]
        )
        table = {
            (0, 1): y5,
            (2, 3): y6,
            (1, 4): x1,
            (2, 5): _const_field([0, 0, 0, 2.0, 0]),
            (0, 2): _const_field([0, 0, 0, 0, 0]),
            (0, 3): _const_field([0, 0, 0, 0, 0]),
            (1, 2): _const_field([0, 0, 0, 0, 0]),
            (1, 3): _const_field([0, 0, 0, 0, 0]),
        }
        box = np.array(
            [[-2.5, 2.5], [-2.5, 2.5], [-2.5, 2.5], [-2.5, 2.5], [0.0, TWO_PI]]
        )
        return Frame(
            name="example32",
            n=5,
            m=4,
            step=3,
            degrees=(1, 1, 1, 1, 2, 2, 3, 3, 3),
            fields=fields,
            box=box,
            periodic_axes=(False, False, False, False, True),
        )
    if key.startswith("euclidean"):
        inner = key[len("euclidean"):].strip("()")
        try:
            n = int(inner)
        except ValueError:
            raise UnsupportedFrame(f"cannot parse euclidean dimension from {name!r}")
        if n < 1:
            raise UnsupportedFrame("euclidean dimension must be >= 1")
        fields = tuple(
            VectorField(f"X{i + 1}", n, _const_field(np.eye(n)[i])) for i in range(n)
        )
        return Frame(
            name=f"euclidean({n})",
            n=n,
            m=n,
            step=1,
            degrees=(1,) * n,
            fields=fields,
            box=np.stack([-2.5 * np.ones(n), 2.5 * np.ones(n)], axis=1),
            periodic_axes=(False,) * n,
            all_brackets_zero=True,
        )
    raise UnsupportedFrame(f"unknown frame {name!r}")


@lru_cache(maxsize=32)
def builtin(name):
    """Cached accessor for built-in frames (frames are immutable)."""
    return build_builtin_frame(name)


def validate_frame(frame, samples=40, seed=0, rank_tol=1e-10, bracket_tol=None):
    """Sampled invariant checks: spanning rank and bracket-table consistency.

    Returns a dict with the worst observed rank ratio and bracket mismatch.
    Raises InvalidParameter when the sampled span degenerates (skipped for
    frames flagged as not Hoermander-smooth, whose span may genuinely drop
    on thin sets).
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    pts = frame.random_points(rng, samples)
    mats = frame.frame_matrix(pts)
    svals = np.linalg.svd(mats, compute_uv=False)
    ratio = float(np.min(svals[:, -1] / svals[:, 0]))
    if frame.hormander_smooth and ratio <= rank_tol:
        raise InvalidParameter(
            f"frame {frame.name}: sampled span degenerates (ratio {ratio:.2e})"
        )
    worst = 0.0
    if not frame.all_brackets_zero:
        h = 1e-5 * frame.diameter
        if bracket_tol is None:
            bracket_tol = 1e-6 * max(1.0, frame.diameter)
        for (i, j), fn in frame.bracket_table.items():
            closed = np.asarray(fn(pts), dtype=float)
            fd = bracket_of_evaluators(frame.fields[i], frame.fields[j], pts, h)
            worst = max(worst, float(np.max(np.abs(closed - fd))))
        if worst > bracket_tol:
            raise InvalidParameter(
                f"frame {frame.name}: bracket table deviates from finite differences "
                f"by {worst:.2e}"
            )
    return {"rank_ratio": ratio, "bracket_mismatch": worst}
