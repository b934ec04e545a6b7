"""Heat kernels of d/dt - sum a_ij X_i^eps X_j^eps by two independent methods.

The finite-difference route diagonalizes the constant coefficient matrix,
writes the operator as a positive combination of squared directional
fields, and discretizes each square by a composed forward/backward flow
difference with multilinear interpolation. Off-diagonal stencil weights
are nonnegative by construction, so the explicit scheme is monotone under
its time-step bound and the kernel stays exactly nonnegative.

The stochastic route simulates the Stratonovich flow along sqrt(2) X_i^eps
with Heun predictor-corrector steps; its generator is the same sum of
squares (identity coefficients only), so simulated time equals operator
time with no rescaling.
"""

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.sparse import csr_matrix, identity as sparse_identity

from .errors import (
    DegenerateInfimum,
    DomainTooSmallWarning,
    InsufficientData,
    InvalidParameter,
    StabilityError,
)
from .frames import Frame, VectorField, _as_points
from .geodesy import get_engine
from .lattice import Lattice
from .rng import stream


@dataclass(frozen=True)
class CoeffMatrix:
    """Constant symmetric coefficient matrix with ellipticity constant lam.

    Validates the two-sided bounds (1/2) lam^-1 |xi|^2 <= xi' A xi <= 2 lam |xi|^2
    on the full block and lam^-1 |xi|^2 <= xi' A xi <= lam |xi|^2 on the
    horizontal block.
    """

    A: np.ndarray
    lam: float
    m: int

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        object.__setattr__(self, "A", A)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise InvalidParameter("coefficient matrix must be square")
        if not np.allclose(A, A.T, atol=1e-12):
            raise InvalidParameter("coefficient matrix must be symmetric")
        ev = np.linalg.eigvalsh(A)
        if ev.min() < 0.5 / self.lam - 1e-10 or ev.max() > 2 * self.lam + 1e-10:
            raise InvalidParameter("coefficient matrix violates the full-block bounds")
        evm = np.linalg.eigvalsh(A[: self.m, : self.m])
        if evm.min() < 1.0 / self.lam - 1e-10 or evm.max() > self.lam + 1e-10:
            raise InvalidParameter("coefficient matrix violates the horizontal bounds")

    @property
    def p(self):
        return self.A.shape[0]

    @staticmethod
    def identity(p, m=None, lam=1.0):
        return CoeffMatrix(A=np.eye(p), lam=lam, m=m if m is not None else p)


@dataclass
class KernelField:
    """Kernel samples on a lattice over a time ladder."""

    source: np.ndarray
    times: np.ndarray
    values: np.ndarray  # (T, N)
    lat: Lattice
    masses: np.ndarray
    method: str
    warnings: list = dc_field(default_factory=list)

    def at_time(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        return self.values[k]


def _coerce_coeff(epsframe, A):
    if A is None or (isinstance(A, str) and A == "identity"):
        return CoeffMatrix.identity(epsframe.p, epsframe.m)
    if isinstance(A, CoeffMatrix):
        return A
    return CoeffMatrix(A=np.asarray(A, dtype=float), lam=_auto_lam(A), m=epsframe.m)


def _auto_lam(A):
    ev = np.linalg.eigvalsh(np.asarray(A, dtype=float))
    return float(max(ev.max(), 1.0 / max(ev.min(), 1e-12), 1.0))


class _FdOperator:
    """Assembled explicit generator for one (epsframe, A, lattice) triple."""

    def __init__(self, epsframe, coeff, lat, step_cells=1.0):
        self.epsframe = epsframe
        self.lat = lat
        active = epsframe.active_horizontal()
        A = coeff.A
        if len(active) < epsframe.p:
            dead = [i for i in range(epsframe.p) if i not in active]
            block = A[np.ix_(dead, range(epsframe.p))]
            if np.any(np.abs(block) > 1e-14):
                raise InvalidParameter(
                    "at eps = 0 the coefficient matrix must vanish off the "
                    "horizontal block"
                )
        sub = A[np.ix_(active, active)]
        mu, Q = np.linalg.eigh(sub)
        coords = lat.coords()
        N = lat.size
        rows, cols, vals = [], [], []
        diag = np.zeros(N)
        src = np.arange(N)

        evs, slows, live = [], [], []
        for l in range(len(active)):
            if mu[l] <= 1e-14:
                continue

            def ev(pts, q=Q[:, l]):
                out = np.zeros_like(pts)
                for a, i in enumerate(active):
                    if q[a] != 0.0:
                        out += q[a] * epsframe.eval_field(i, pts)
                return out

            vec = ev(coords)
            # steps are quantized in cells of the slowest participating axis:
            # that axis lands on (near-)integer offsets, while finer axes take
            # multi-cell hops whose interpolation error is O(h_fine^2 / s^2)
            comp = np.abs(vec) / lat.h[None, :]
            comp[np.abs(vec) < 1e-12] = np.inf
            slow = np.min(comp, axis=1)
            if not np.any(np.isfinite(slow)):
                continue
            evs.append(ev)
            slows.append(slow)
            live.append(l)
        med = np.array(
            [np.median(s[np.isfinite(s) & (s > 1e-14)]) for s in slows]
        )
        ref = float(np.min(med))
        for ev, slow, l in zip(evs, slows, live):
            mult = float(np.clip(np.rint(np.median(slow[np.isfinite(slow)]) / ref), 1, 64))
            ok = np.isfinite(slow) & (slow > 1e-14)
            s = np.where(ok, step_cells * mult / np.where(ok, slow, 1.0), 0.0)
            for sign in (1.0, -1.0):
                ends = _rk4(ev, coords, sign * s, substeps=2)
                idx, w, inside = lat.interp_weights(ends)
                keep = ok & inside
                scale = np.where(keep, mu[l] / np.maximum(s, 1e-300) ** 2, 0.0)
                rows.append(np.repeat(src[keep], idx.shape[1]))
                cols.append(idx[keep].ravel())
                vals.append((w[keep] * scale[keep, None]).ravel())
                diag -= np.where(keep, mu[l] / np.maximum(s, 1e-300) ** 2, 0.0)
        rows.append(src)
        cols.append(src)
        vals.append(diag)
        S = csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(N, N),
        )
        S.sum_duplicates()
        boundary = lat.boundary_mask()
        keepmask = ~boundary
        # Dirichlet-zero: rows on the outer boundary stay zero
        scale_rows = keepmask.astype(float)
        S = csr_matrix(S.multiply(scale_rows[:, None]))
        self.S = S
        d = S.diagonal()
        worst = float(np.max(-d)) if np.any(d < 0) else 0.0
        self.dt_max = np.inf if worst == 0.0 else 1.0 / worst
        self.boundary = boundary

    def step_matrix(self, dt):
        return sparse_identity(self.lat.size, format="csr") + dt * self.S


def _rk4(ev, pts, s, substeps=1):
    y = np.array(pts, dtype=float, copy=True)
    ds = (np.asarray(s, dtype=float) / substeps)[:, None]
    for _ in range(substeps):
        k1 = ev(y)
        k2 = ev(y + 0.5 * ds * k1)
        k3 = ev(y + 0.5 * ds * k2)
        k4 = ev(y + ds * k3)
        y += ds / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


_FD_OPS = {}


def _fd_operator(epsframe, coeff, lat, step_cells):
    key = (
        id(epsframe.base),
        float(epsframe.eps),
        lat.fingerprint(),
        coeff.A.tobytes(),
        step_cells,
    )
    if key not in _FD_OPS:
        _FD_OPS[key] = _FdOperator(epsframe, coeff, lat, step_cells=step_cells)
    return _FD_OPS[key]


def delta_initial(lat, y, smooth=False):
    """Discrete delta at the node nearest y, scaled by 1/cell volume.

    smooth=True spreads a Gaussian of width 2h instead (for convergence
    studies); total mass is 1 either way.
    """
    u = np.zeros(lat.size)
    node = lat.snap_one(np.asarray(y, dtype=float))
    if not smooth:
        u[node] = 1.0 / lat.cell_volume
        return u
    pts = lat.coords()
    width = 2.0 * lat.h
    z = (pts - pts[node]) / width[None, :]
    u = np.exp(-0.5 * np.sum(z**2, axis=1))
    u /= np.sum(u) * lat.cell_volume
    return u


def heat_fd(
    epsframe,
    A,
    lat,
    y,
    t_end,
    dt=None,
    times=None,
    initial=None,
    smooth_delta=False,
    step_cells=1.0,
):
    """Explicit finite-difference heat kernel (or solution from given data).

    Stepping is monotone under the assembled bound dt <= dt_max (of order
    h^2 / (2 n lam max|coeff|^2)); passing a larger dt raises StabilityError.
    Values stay nonnegative exactly; mass decays only through the
    Dirichlet-zero boundary and a loss beyond 2 percent is reported as a
    DomainTooSmallWarning.
    """
    if t_end <= 0:
        raise InvalidParameter("t_end must be positive")
    coeff = _coerce_coeff(epsframe, A)
    op = _fd_operator(epsframe, coeff, lat, step_cells)
    if dt is None:
        dt = 0.9 * op.dt_max
    elif dt > op.dt_max * (1 + 1e-9):
        raise StabilityError(
            f"dt={dt:.3e} violates the monotone step bound {op.dt_max:.3e}"
        )
    n_steps = max(1, int(np.ceil(t_end / dt)))
    dt = t_end / n_steps
    if dt > op.dt_max * (1 + 1e-9):
        n_steps += 1
        dt = t_end / n_steps
    if initial is None:
        u = delta_initial(lat, y, smooth=smooth_delta)
    else:
        u = np.asarray(initial, dtype=float).ravel().copy()
        if u.size != lat.size:
            raise InvalidParameter("initial data does not match the lattice")
    u[op.boundary] = 0.0
    want = np.asarray(sorted(set(times))) if times is not None else np.array([t_end])
    want_steps = np.unique(np.clip(np.rint(want / dt).astype(int), 1, n_steps))
    M = op.step_matrix(dt)
    out_vals, out_times, out_mass = [], [], []
    mass0 = float(np.sum(u) * lat.cell_volume)
    for k in range(1, n_steps + 1):
        u = M.dot(u)
        if k in want_steps:
            out_vals.append(u.copy())
            out_times.append(k * dt)
            out_mass.append(float(np.sum(u) * lat.cell_volume))
    warns = []
    if mass0 > 0 and out_mass and out_mass[-1] < 0.98 * mass0:
        msg = (
            f"boundary mass loss {(1 - out_mass[-1] / mass0) * 100:.1f}% "
            f"at t={out_times[-1]:.3g}; enlarge the box"
        )
        warnings.warn(msg, DomainTooSmallWarning)
        warns.append(msg)
    return KernelField(
        source=np.asarray(y, dtype=float),
        times=np.asarray(out_times),
        values=np.asarray(out_vals),
        lat=lat,
        masses=np.asarray(out_mass),
        method="fd",
        warnings=warns,
    )


# ---------------------------------------------------------------------------
# stochastic flow estimator


def heat_mc(
    epsframe,
    lat,
    y,
    t_end,
    paths=100000,
    seed=0,
    n_steps=256,
    times=None,
    batch=50000,
):
    """Kernel estimate by the Stratonovich flow along sqrt(2) X_i^eps.

    Heun predictor-corrector steps; endpoints are binned on the lattice
    cells at each requested time. Identity coefficients only.
    """
    if paths < 10**5:
        raise InvalidParameter("need at least 1e5 paths")
    y = np.asarray(y, dtype=float)
    active = epsframe.active_horizontal()
    want = np.asarray(sorted(set(times))) if times is not None else np.array([t_end])
    dt = t_end / n_steps
    record_steps = np.unique(np.clip(np.rint(want / dt).astype(int), 1, n_steps))
    sq2 = np.sqrt(2.0)

    edges = []
    for k in range(lat.ndim):
        c = lat.axis_coords(k)
        edges.append(np.concatenate([c - lat.h[k] / 2, [c[-1] + lat.h[k] / 2]]))

    counts = {int(s): np.zeros(lat.shape) for s in record_steps}
    total = 0
    n_batches = int(np.ceil(paths / batch))
    for b in range(n_batches):
        take = min(batch, paths - total)
        total += take
        rng = stream(seed, "heat_mc", b)
        X = np.repeat(y[None, :], take, axis=0)
        for s in range(1, n_steps + 1):
            dW = rng.normal(0.0, np.sqrt(dt), size=(take, len(active)))

            def drift(pts):
                out = np.zeros_like(pts)
                for a, i in enumerate(active):
                    out += dW[:, a : a + 1] * (sq2 * epsframe.eval_field(i, pts))
                return out

            d0 = drift(X)
            X = X + 0.5 * (d0 + drift(X + d0))
            if int(s) in counts:
                H, _ = np.histogramdd(X, bins=edges)
                counts[int(s)] += H
    vals, out_times, masses = [], [], []
    for s in sorted(counts):
        density = counts[s].ravel() / (total * lat.cell_volume)
        vals.append(density)
        out_times.append(s * dt)
        masses.append(float(np.sum(counts[s]) / total))
    return KernelField(
        source=y,
        times=np.asarray(out_times),
        values=np.asarray(vals),
        lat=lat,
        masses=np.asarray(masses),
        method="mc",
    )


def compare_l1(field_a, field_b, lat, t_index=-1, coarsen=3):
    """Relative L1 discrepancy after aggregating both fields to coarse cells."""
    a = np.asarray(field_a.values[t_index]).reshape(lat.shape)
    b = np.asarray(field_b.values[t_index]).reshape(lat.shape)
    for ax in range(lat.ndim):
        n = (a.shape[ax] // coarsen) * coarsen
        sl = [slice(None)] * lat.ndim
        sl[ax] = slice(0, n)
        a, b = a[tuple(sl)], b[tuple(sl)]
        shape = list(a.shape)
        shape[ax] = n // coarsen
        shape.insert(ax + 1, coarsen)
        a = a.reshape(shape).sum(axis=ax + 1)
        b = b.reshape(shape).sum(axis=ax + 1)
    denom = np.sum(np.abs(a))
    if denom <= 0:
        raise InsufficientData("empty reference field in L1 comparison")
    return float(np.sum(np.abs(a - b)) / denom)


def semigroup_check(epsframe, A, lat, y, t1, t2, coarsen=1):
    """Compare P(t1+t2) against the two-stage composition with halved steps.

    Evolving the t1 kernel for t2 more applies the stage-two transition
    matrix, i.e. a discrete convolution of the two kernels, computed
    matrix-free with a different step size.
    """
    direct = heat_fd(epsframe, A, lat, y, t1 + t2)
    stage1 = heat_fd(epsframe, A, lat, y, t1)
    op = _fd_operator(epsframe, _coerce_coeff(epsframe, A), lat, 1.0)
    stage2 = heat_fd(
        epsframe, A, lat, y, t2, dt=0.45 * op.dt_max, initial=stage1.values[-1]
    )
    return compare_l1(direct, stage2, lat, coarsen=coarsen), direct, stage2


# ---------------------------------------------------------------------------
# Gaussian envelope fitting


@dataclass(frozen=True)
class GaussianFit:
    eps: float
    C_fit: float
    C_upper: float
    C_lower: float
    c_exp_upper: float
    c_exp_lower: float
    fit_residual: float
    n_points: int
    bracket_fraction: float


def gaussian_fit(
    kernel,
    distances,
    volumes,
    eps=None,
    region=3.0,
    floor=1e-12,
    boundary_margin=4,
):
    """Fit log(P |B|) against -d^2/t over the near-source region.

    distances is the nodal field d(source, .); volumes gives |B(source,
    sqrt(t_k))| per ladder time (ball volumes are comparable at nearby
    centers, so the source-centered value stands in for |B(x, sqrt(t))|).
    A single decay rate is fitted; the offset quantiles give bracketing
    envelopes that contain 98 percent of the fit-region samples by
    construction. Fewer than 50 usable points raises InsufficientData.
    """
    d = np.asarray(distances, dtype=float).ravel()
    interior = kernel.lat.interior_mask(depth=boundary_margin)
    zs, ws = [], []
    for k, t in enumerate(kernel.times):
        P = kernel.values[k]
        sel = interior & np.isfinite(d) & (d <= region * np.sqrt(t)) & (P > floor)
        if not np.any(sel):
            continue
        zs.append(d[sel] ** 2 / t)
        ws.append(np.log(P[sel] * volumes[k]))
    if not zs:
        raise InsufficientData("no usable kernel samples in the fit region")
    z = np.concatenate(zs)
    w = np.concatenate(ws)
    if z.size < 50:
        raise InsufficientData(f"only {z.size} fit points (< 50)")
    slope, intercept = np.polyfit(z, w, 1)
    b = max(-slope, 1e-6)
    resid = w - (intercept - b * z)
    q01, q99 = np.quantile(resid, [0.01, 0.99])
    frac = float(np.mean((resid >= q01) & (resid <= q99)))
    return GaussianFit(
        eps=float(eps if eps is not None else np.nan),
        C_fit=float(np.exp(intercept)),
        C_upper=float(np.exp(intercept + q99)),
        C_lower=float(np.exp(intercept + q01)),
        c_exp_upper=float(b),
        c_exp_lower=float(b),
        fit_residual=float(np.std(resid)),
        n_points=int(z.size),
        bracket_fraction=frac,
    )


# ---------------------------------------------------------------------------
# Heisenberg double lift


def h1_lift_frame(eps):
    """Hand-coded lift of the Heisenberg structure to five fields on R^6.

    Coordinates (x1, x2, x3, z1, z2, z3); the fifth field couples the new
    vertical direction to the old one with weight eps.
    """
    if not 0 < eps <= 1:
        raise InvalidParameter("lift is defined for eps in (0, 1]")

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

    def z1(pts):
        out = np.zeros_like(pts)
        out[:, 3] = 1.0
        out[:, 5] = pts[:, 4]
        return out

    def z2(pts):
        out = np.zeros_like(pts)
        out[:, 4] = 1.0
        out[:, 5] = -pts[:, 3]
        return out

    def z3e(pts):
        out = np.zeros_like(pts)
        out[:, 5] = 1.0
        out[:, 2] = eps
        return out

    fields = (
        VectorField("X1", 6, x1),
        VectorField("X2", 6, x2),
        VectorField("Z1", 6, z1),
        VectorField("Z2", 6, z2),
        VectorField("Z3e", 6, z3e),
    )
    box = np.stack([-2.5 * np.ones(6), 2.5 * np.ones(6)], axis=1)
    return Frame(
        name=f"h1lift(eps={eps})",
        n=6,
        m=5,
        step=2,
        degrees=(1, 1, 1, 1, 1),
        fields=fields,
        box=box,
        periodic_axes=(False,) * 6,
    )


def product_lattice(lat_x, lat_z):
    """Cartesian product lattice (x-block first)."""
    box = np.vstack([lat_x.box, lat_z.box])
    return Lattice(
        box=box,
        shape=lat_x.shape + lat_z.shape,
        periodic=lat_x.periodic + lat_z.periodic,
    )


def lift_h1_kernel(eps, lat6, y6, t_end, paths=100000, seed=0, times=None, n_steps=256):
    """Kernel of the lifted five-field operator on R^6 via the flow estimator."""
    from .frames import make_eps_frame

    frame = h1_lift_frame(eps)
    ef = make_eps_frame(frame, 1.0)  # all fields degree 1; weights trivial
    return heat_mc(
        ef, lat6, y6, t_end, paths=paths, seed=seed, times=times, n_steps=n_steps
    )


def marginalize(kernel6, n_keep=3):
    """Integrate out the trailing block, returning a kernel on the leading one.

    Mass is preserved exactly (sums commute with the z integration).
    """
    lat6 = kernel6.lat
    shape = lat6.shape
    keep_axes = tuple(range(n_keep))
    drop_axes = tuple(range(n_keep, lat6.ndim))
    z_cell = float(np.prod([lat6.h[k] for k in drop_axes]))
    lat3 = Lattice(
        box=lat6.box[:n_keep],
        shape=shape[:n_keep],
        periodic=lat6.periodic[:n_keep],
    )
    vals = []
    for k in range(len(kernel6.times)):
        grid = kernel6.values[k].reshape(shape)
        vals.append((grid.sum(axis=drop_axes) * z_cell).ravel())
    return KernelField(
        source=kernel6.source[:n_keep],
        times=kernel6.times.copy(),
        values=np.asarray(vals),
        lat=lat3,
        masses=kernel6.masses.copy(),
        method=kernel6.method + "-marginal",
    )


# ---------------------------------------------------------------------------
# Harnack probes


@dataclass(frozen=True)
class HarnackReport:
    sup_ratio: float
    mean_ratio: float
    sup_minus: float
    inf_plus: float
    mean_minus: float


def harnack_ratio(
    epsframe,
    A,
    lat,
    boundary_data,
    rho,
    xbar,
    tbar,
    engine=None,
    refine=10,
    n_snapshots=6,
):
    """sup over the early cylinder / inf over the late cylinder of a
    nonnegative caloric function.

    boundary_data is the nonnegative initial condition (nodal array or
    callable on points). The early window is (tbar - 8 rho^2, tbar - 7 rho^2)
    and the late one (tbar - rho^2, tbar), both over the metric ball
    B(xbar, rho). Also returns the mean-over-early version.
    """
    xbar = np.asarray(xbar, dtype=float)
    if tbar - 8 * rho**2 <= 0:
        raise InvalidParameter("early cylinder starts before t=0")
    initial = (
        boundary_data(lat.coords())
        if callable(boundary_data)
        else np.asarray(boundary_data, dtype=float).ravel()
    )
    if np.any(initial < -1e-12):
        raise InvalidParameter("Harnack probe needs nonnegative initial data")
    t_minus = np.linspace(tbar - 8 * rho**2, tbar - 7 * rho**2, n_snapshots)
    t_plus = np.linspace(tbar - rho**2, tbar, n_snapshots)
    times = np.concatenate([t_minus, t_plus])
    run = heat_fd(epsframe, A, lat, xbar, tbar, times=times, initial=initial)
    eng = engine or get_engine(epsframe, lat)
    ball = eng.field(xbar, refine=refine) < rho
    if not np.any(ball):
        raise InvalidParameter("ball B(xbar, rho) contains no lattice nodes")
    in_minus = run.times <= tbar - 7 * rho**2 + 1e-12
    in_plus = run.times >= tbar - rho**2 - 1e-12
    u_minus = run.values[in_minus][:, ball]
    u_plus = run.values[in_plus][:, ball]
    sup_minus = float(np.max(u_minus))
    mean_minus = float(np.mean(u_minus))
    inf_plus = float(np.min(u_plus))
    if inf_plus <= 1e-14:
        raise DegenerateInfimum("infimum over the late cylinder is numerically zero")
    return HarnackReport(
        sup_ratio=sup_minus / inf_plus,
        mean_ratio=mean_minus / inf_plus,
        sup_minus=sup_minus,
        inf_plus=inf_plus,
        mean_minus=mean_minus,
    )
