"""Ball volumes, determinant volume polynomials, doubling and Poincare probes.

Monte Carlo ball volumes test membership against a cached single-source
shortest-path field, so a full volume estimate costs one Dijkstra run plus
cheap interpolation lookups. A quasi-norm pre-filter with a calibrated
equivalence constant settles clearly-inside and clearly-outside samples
without touching the field; only the borderline shell consults it.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DomainTooSmall, InvalidParameter, ResolutionTooCoarse
from .frames import grad_eps
from .geodesy import get_engine, linearized_quasi_dist
from .lattice import TWO_PI, Lattice, box_lattice
from .rng import stream


@dataclass(frozen=True)
class VolumeEstimate:
    center: np.ndarray
    radius: float
    eps: float
    volume: float
    stderr: float
    sample_count: int
    method: str


@dataclass(frozen=True)
class NswPolynomial:
    """Sum over n-tuples I of |lambda_I(x)| r^(d_eps(I))."""

    tuples: tuple
    weights: np.ndarray
    degrees: np.ndarray

    def value_at(self, r):
        r = np.asarray(r, dtype=float)
        vals = np.tensordot(self.weights, np.power.outer(np.atleast_1d(r), self.degrees), (0, 1))
        return float(vals) if np.isscalar(r) or r.ndim == 0 else vals


def lambda_det(epsframe, I, x):
    """det(X_i1^eps(x), .., X_in^eps(x)) for an n-tuple of field indices."""
    I = tuple(int(i) for i in I)
    if len(I) != epsframe.n:
        raise InvalidParameter(f"need an n-tuple of indices, got {len(I)}")
    if any(not 0 <= i < epsframe.field_count for i in I):
        raise InvalidParameter(f"field index out of range in {I}")
    if len(set(I)) < len(I):
        return 0.0
    mat = epsframe.matrix(np.asarray(x, dtype=float), I)
    return float(np.linalg.det(mat))


def nsw_polynomial(epsframe, x):
    """All nonzero terms |lambda_I| r^(d_eps(I)) over sorted index tuples."""
    idx = range(epsframe.field_count)
    tuples, weights, degrees = [], [], []
    x = np.asarray(x, dtype=float)
    for I in combinations(idx, epsframe.n):
        w = abs(lambda_det(epsframe, I, x))
        if w > 0.0:
            tuples.append(I)
            weights.append(w)
            degrees.append(sum(epsframe.d_eps(i) for i in I))
    return NswPolynomial(
        tuples=tuple(tuples),
        weights=np.asarray(weights, dtype=float),
        degrees=np.asarray(degrees, dtype=float),
    )


def nsw_volume(epsframe, x, r):
    """Value of the determinant volume polynomial at radius r."""
    if r <= 0:
        raise InvalidParameter("radius must be positive")
    return nsw_polynomial(epsframe, x).value_at(r)


def nsw_best_tuple(epsframe, x, r):
    """Argmax tuple of |lambda_I(x)| r^(d_eps(I)) (maximality with no slack)."""
    poly = nsw_polynomial(epsframe, x)
    if not poly.tuples:
        raise InvalidParameter("all determinants vanish at this point")
    vals = poly.weights * np.power(r, poly.degrees)
    k = int(np.argmax(vals))
    return poly.tuples[k], float(vals[k])


# ---------------------------------------------------------------------------
# lattice sizing for metric balls


def ball_box_extents(epsframe, center, radius, pad=1.3):
    """Per-axis half-widths of a coordinate box sure to contain B(center, radius).

    Uses the frame matrix at the center with anisotropic reach
    max(eps^(d-1) * R, R^d) per enumerated field, padded by the gauge
    equivalence constant.
    """
    frame = epsframe.base
    basis = np.abs(frame.frame_matrix(np.asarray(center, dtype=float)))
    R = pad * radius
    reach = np.empty(frame.p)
    for i in range(frame.p):
        d = frame.degrees[i]
        riem = epsframe.eps ** (d - 1) * R if d > 1 else R
        reach[i] = max(riem, R**d)
    return basis @ reach


def lattice_for_ball(epsframe, center, radius, nodes=31, pad=1.3):
    """Centered lattice adapted to one ball (and its double) at this radius."""
    ext = ball_box_extents(epsframe, center, radius, pad=pad)
    frame = epsframe.base
    center = np.asarray(center, dtype=float)
    per = frame.periodic_axes
    hw = np.asarray(ext, dtype=float)
    for k in range(frame.n):
        if per[k] and hw[k] >= np.pi:
            continue
        lo = center[k] - hw[k]
        hi = center[k] + hw[k]
        if not per[k]:
            lo = max(lo, frame.box[k, 0])
            hi = min(hi, frame.box[k, 1])
        hw[k] = (hi - lo) / 2
        center[k] = (hi + lo) / 2
    shape, periodic = [], []
    for k in range(frame.n):
        if per[k] and hw[k] >= np.pi:
            periodic.append(True)
            shape.append(max(nodes, 8))
        else:
            periodic.append(False)
            shape.append(nodes)
    box = np.stack([center - hw, center + hw], axis=1)
    for k in range(frame.n):
        if periodic[k]:
            box[k] = (0.0, TWO_PI)
    return Lattice(box=box, shape=tuple(shape), periodic=tuple(periodic))


# ---------------------------------------------------------------------------
# Monte Carlo volumes


def _proxy_is_exact(epsframe):
    # commuting frames with no weighted copies: the linearized quasi-norm is
    # the true control distance at every eps
    return epsframe.base.all_brackets_zero and epsframe.p == epsframe.m


def calibrate_gauge_ratio(epsframe, lat, engine, center, count=160, seed=0, refine=0):
    """Empirical ratio band between lattice distance and the quasi-norm proxy."""
    if _proxy_is_exact(epsframe):
        return (1.0, 1.0)
    rng = stream(seed, "validation")
    field = engine.field(np.asarray(center, dtype=float), refine=refine)
    finite = np.flatnonzero(np.isfinite(field))
    if finite.size < 8:
        raise ResolutionTooCoarse("distance field empty; refine the lattice")
    take = rng.choice(finite, size=min(count, finite.size), replace=False)
    pts = lat.coords()[take]
    proxy = linearized_quasi_dist(epsframe.base, center, pts, epsframe.eps)
    dist = field[take]
    ok = (proxy > 1e-9) & (dist > 1e-9)
    ratio = dist[ok] / proxy[ok]
    if ratio.size == 0:
        return (0.5, 2.0)
    return (float(np.min(ratio)), float(np.max(ratio)))


def ball_volume_mc(
    epsframe,
    lat,
    x,
    r,
    samples=20000,
    seed=0,
    engine=None,
    batch=None,
    prefilter=True,
    refine=12,
):
    """Monte Carlo Lebesgue volume of the metric ball B(x, r).

    Uniform samples in a bounding box; membership resolved by the cached
    shortest-path field (multilinear interpolation, Bellman-refined), with
    a calibrated quasi-norm band settling clear cases first. Commuting
    frames skip the field entirely since the proxy is the exact metric.
    The bounding box must support the doubled ball, otherwise
    DomainTooSmall is raised.
    """
    if samples < 10**4:
        raise InvalidParameter("need at least 1e4 samples")
    x = np.asarray(x, dtype=float)
    ext = ball_box_extents(epsframe, x, r, pad=1.4)
    lo, hi = x - ext, x + ext
    for k in range(lat.ndim):
        if lat.periodic[k]:
            lo[k] = max(lo[k], x[k] - np.pi)
            hi[k] = min(hi[k], x[k] + np.pi)
            continue
        if lo[k] < lat.box[k, 0] - 1e-9 or hi[k] > lat.box[k, 1] + 1e-9:
            raise DomainTooSmall(
                f"bounding box for B(x, {r}) exceeds the lattice on axis {k}"
            )
    exact_proxy = _proxy_is_exact(epsframe)
    eng = engine or get_engine(epsframe, lat)
    field = None if exact_proxy else eng.field(x, refine=refine)
    box_vol = float(np.prod(hi - lo))
    lo_band = hi_band = 1.0
    margin_in, margin_out = 1.0, 1.0
    if not exact_proxy and prefilter:
        lo_band, hi_band = calibrate_gauge_ratio(
            epsframe, lat, eng, x, seed=seed, refine=refine
        )
        margin_in, margin_out = 0.95, 1.05
    n_batches = max(1, int(np.ceil(samples / (batch or samples))))
    per = int(np.ceil(samples / n_batches))
    inside = 0
    total = 0
    for b in range(n_batches):
        rng = stream(seed, "volume_mc", b)
        take = min(per, samples - total)
        pts = rng.uniform(lo, hi, size=(take, lat.ndim))
        total += take
        if exact_proxy or prefilter:
            proxy = linearized_quasi_dist(epsframe.base, x, pts, epsframe.eps)
            sure_in = proxy * hi_band < r * margin_in
            sure_out = proxy * lo_band >= r * margin_out
            shell = ~(sure_in | sure_out)
        else:
            sure_in = np.zeros(take, dtype=bool)
            shell = np.ones(take, dtype=bool)
        count = int(np.sum(sure_in))
        if np.any(shell):
            d = lat.interpolate(field, pts[shell])
            count += int(np.sum(d < r))
        inside += count
    p_hat = inside / total
    volume = box_vol * p_hat
    stderr = box_vol * float(np.sqrt(max(p_hat * (1 - p_hat), 1e-12) / total))
    return VolumeEstimate(
        center=x,
        radius=float(r),
        eps=float(epsframe.eps),
        volume=float(volume),
        stderr=stderr,
        sample_count=total,
        method="montecarlo",
    )


def doubling_ratio(epsframe, lat, x, r, samples=20000, seed=0, engine=None, refine=12):
    """|B(x, 2r)| / |B(x, r)| with shared distance field and split seeds."""
    v1 = ball_volume_mc(
        epsframe, lat, x, r, samples=samples, seed=seed, engine=engine, refine=refine
    )
    v2 = ball_volume_mc(
        epsframe, lat, x, 2 * r, samples=samples, seed=seed + 1, engine=engine, refine=refine
    )
    if v1.volume <= 0:
        raise ResolutionTooCoarse("inner ball volume vanished at this resolution")
    return v2.volume / v1.volume


def volume_slope(epsframe, x, radii, samples=20000, nodes=31, seed=0, refine=12):
    """Log-log slope of MC ball volume against radius, one adapted lattice per r."""
    vols = []
    for k, r in enumerate(radii):
        lat = lattice_for_ball(epsframe, x, 2.2 * r, nodes=nodes)
        eng = get_engine(epsframe, lat)
        est = ball_volume_mc(
            epsframe, lat, x, r, samples=samples, seed=seed + 17 * k, engine=eng, refine=refine
        )
        vols.append(est.volume)
    logs = np.log(np.asarray(vols))
    logr = np.log(np.asarray(radii, dtype=float))
    slope = np.polyfit(logr, logs, 1)[0]
    return float(slope), np.asarray(vols)


# ---------------------------------------------------------------------------
# Poincare ratio probe


def _test_functions(lat, center, r, seed):
    """Fixed probe library: coordinates, quadratics, seeded bumps, a mollified step."""
    pts = lat.coords()
    n = lat.ndim
    funcs = []
    for k in range(n):
        funcs.append((f"x{k + 1}", pts[:, k].copy()))
    for i in range(n):
        for j in range(i, n):
            funcs.append((f"x{i + 1}x{j + 1}", pts[:, i] * pts[:, j]))
    rng = stream(seed, "poincare_bumps")
    for b in range(3):
        c = center + rng.uniform(-1.0, 1.0, size=n) * r
        width = r * (0.4 + 0.4 * rng.random())
        funcs.append(
            (f"bump{b}", np.exp(-np.sum((pts - c) ** 2, axis=1) / (2 * width**2)))
        )
    funcs.append(("step", np.tanh((pts[:, 0] - center[0]) / (r / 4))))
    return funcs


def poincare_ratio(epsframe, lat, x, r, samples=None, seed=0, engine=None, test_functions=None, refine=12):
    """Worst ratio of mean oscillation on B(x, r) to r * mean gradient on B(x, 2r).

    A lower-bound probe of the Poincare constant over a fixed seeded
    test-function library; integrals are counting measure times cell volume.
    """
    x = np.asarray(x, dtype=float)
    eng = engine or get_engine(epsframe, lat)
    field = eng.field(x, refine=refine)
    in_small = field < r
    in_big = field < 2 * r
    if np.sum(in_small) < 8:
        raise ResolutionTooCoarse("ball contains too few nodes at this resolution")
    funcs = test_functions or _test_functions(lat, x, r, seed)
    worst = 0.0
    for _, u in funcs:
        grads = grad_eps(epsframe, lat, u)
        gnorm = np.sqrt(np.sum(grads**2, axis=0))
        num = float(np.sum(np.abs(u[in_small] - np.mean(u[in_small]))))
        den = float(r * np.sum(gnorm[in_big]))
        if den < 1e-14 * max(1.0, num):
            continue  # constants contribute nothing by convention
        worst = max(worst, num / den)
    return worst
