"""Hat functions and convexity-preserving perturbations of convex profiles.

A convex profile u on (0, sigma) is stored through its second-derivative
measure, a finite sum of nonnegative atoms.  Dense densities are turned into
fine atoms by :meth:`ConvexProfile.from_density`, so every profile produced
here is piecewise linear and all integrals are exact.

The bricks ``w(a, b, c, d)`` solve w'' = u'' restricted to (b, c) with
w(a) = w(d) = 0.  Combinations of three bricks with vanishing end slopes give
perturbations whose second derivative is a signed multiple of u'' on small
windows, so u + t*phi stays convex for |t| small.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChartMismatch,
    DegenerateInput,
    EmptyMass,
    NonConvexInput,
    SingularSystem,
)
from .geometry import arclength_of_points, perimeter

KINK_RTOL = 1e-10


# ---------------------------------------------------------------------------
# piecewise-linear profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Profile:
    """Continuous piecewise-linear function given by its knots.

    The function is extended by zero outside ``[x[0], x[-1]]`` when
    ``zero_outside`` is set, otherwise by constants.
    """

    x: np.ndarray
    y: np.ndarray
    zero_outside: bool = True

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("knots and values must be 1d arrays of equal length")
        if np.any(np.diff(x) < 0):
            raise ValueError("knots must be nondecreasing")
        # collapse repeated knots (keep the first value)
        keep = np.concatenate([[True], np.diff(x) > 0])
        object.__setattr__(self, "x", x[keep])
        object.__setattr__(self, "y", y[keep])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.zero_outside:
            return np.interp(t, self.x, self.y, left=0.0, right=0.0)
        return np.interp(t, self.x, self.y)

    def slopes(self):
        return np.diff(self.y) / np.diff(self.x)

    def derivative(self, t, side=1):
        """One-sided derivative at t (side=+1 right, -1 left)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        sl = np.concatenate([[0.0], self.slopes(), [0.0]])
        k = np.searchsorted(self.x, t, side="right" if side > 0 else "left")
        return sl[k]

    def kinks(self):
        """Knot positions and slope jumps (right minus left) at every knot."""
        sl = np.concatenate([[0.0], self.slopes(), [0.0]])
        jumps = np.diff(sl)
        if not self.zero_outside:
            jumps[0] = 0.0
            jumps[-1] = 0.0
        return self.x.copy(), jumps

    @property
    def support(self):
        nz = np.flatnonzero(np.abs(self.y) > 0)
        if nz.size == 0:
            return None
        lo = self.x[max(nz[0] - 1, 0)]
        hi = self.x[min(nz[-1] + 1, len(self.x) - 1)]
        return float(lo), float(hi)

    def __add__(self, other):
        X = np.union1d(self.x, other.x)
        return Profile(X, self(X) + other(X), self.zero_outside and other.zero_outside)

    def __sub__(self, other):
        return self + other.scaled(-1.0)

    def scaled(self, c):
        return Profile(self.x, c * self.y, self.zero_outside)

    def to_csv(self):
        lines = ["x,value"]
        lines += [f"{a:.17g},{b:.17g}" for a, b in zip(self.x, self.y)]
        return "\n".join(lines) + "\n"


def _union_grid(p, q, lo=None, hi=None):
    X = np.union1d(p.x, q.x)
    if lo is not None:
        X = np.union1d(X, [lo, hi])
        X = X[(X >= lo) & (X <= hi)]
    return X


def l2_distance(p, q, lo=None, hi=None):
    X = _union_grid(p, q, lo, hi)
    d = p(X) - q(X)
    L = np.diff(X)
    return float(np.sqrt(np.sum(L * (d[:-1] ** 2 + d[:-1] * d[1:] + d[1:] ** 2) / 3.0)))


def h1_seminorm_distance(p, q, lo=None, hi=None):
    X = _union_grid(p, q, lo, hi)
    d = p(X) - q(X)
    L = np.diff(X)
    return float(np.sqrt(np.sum(np.diff(d) ** 2 / L)))


def h1_distance(p, q, lo=None, hi=None):
    return float(np.hypot(l2_distance(p, q, lo, hi), h1_seminorm_distance(p, q, lo, hi)))


def l1_distance(p, q, lo=None, hi=None):
    X = _union_grid(p, q, lo, hi)
    d = p(X) - q(X)
    L = np.diff(X)
    a, b = d[:-1], d[1:]
    same = a * b >= 0
    out = np.where(same, 0.5 * L * (np.abs(a) + np.abs(b)), 0.0)
    den = np.abs(a) + np.abs(b)
    cross = ~same
    out[cross] = 0.5 * L[cross] * (a[cross] ** 2 + b[cross] ** 2) / den[cross]
    return float(out.sum())


# ---------------------------------------------------------------------------
# hats and convex profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HatSpec:
    sigma: float
    x1: float
    x2: float
    x3: float

    def __post_init__(self):
        if not (0.0 < self.x1 < self.x2 < self.x3 < self.sigma):
            raise DegenerateInput(
                f"hat nodes must satisfy 0 < x1 < x2 < x3 < sigma, got "
                f"{self.x1}, {self.x2}, {self.x3}, sigma={self.sigma}"
            )

    @property
    def nodes(self):
        return np.array([self.x1, self.x2, self.x3])

    def kink_weights(self):
        """Slope jumps of the hat at x1, x2, x3."""
        l1 = 1.0 / (self.x2 - self.x1)
        l2 = 1.0 / (self.x3 - self.x2)
        return np.array([l1, -(l1 + l2), l2])


def hat(spec):
    """Hat function: 0 outside (x1, x3), 1 at x2, affine in between."""
    s = spec
    return Profile(np.array([0.0, s.x1, s.x2, s.x3, s.sigma]), np.array([0.0, 0.0, 1.0, 0.0, 0.0]))


def hat_left(spec):
    """hat restricted to (x1, x2) (discontinuous at x2, returned as a steep ramp)."""
    s = spec
    eps = 1e-12 * s.sigma
    return Profile(np.array([0.0, s.x1, s.x2, s.x2 + eps, s.sigma]), np.array([0.0, 0.0, 1.0, 0.0, 0.0]))


def hat_right(spec):
    s = spec
    eps = 1e-12 * s.sigma
    return Profile(np.array([0.0, s.x2 - eps, s.x2, s.x3, s.sigma]), np.array([0.0, 0.0, 1.0, 0.0, 0.0]))


@dataclass(frozen=True, eq=False)
class ConvexProfile:
    """Convex piecewise-linear u on (0, sigma) stored through u'' = sum alpha_i delta(x - x_i).

    ``value0`` and ``slope0`` are u(0) and u'(0+).  ``density`` optionally
    keeps the (grid, values) pair a profile was built from.
    """

    sigma: float
    atoms_x: np.ndarray
    atoms_w: np.ndarray
    value0: float = 0.0
    slope0: float = 0.0
    density: tuple = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.atoms_x, dtype=float)
        w = np.asarray(self.atoms_w, dtype=float)
        if x.shape != w.shape:
            raise ValueError("atom positions and weights differ in length")
        if np.any(w < 0):
            raise NonConvexInput("atom weights must be nonnegative")
        if np.any((x <= 0) | (x >= self.sigma)):
            raise DegenerateInput("atoms must lie strictly inside (0, sigma)")
        order = np.argsort(x, kind="stable")
        x, w = x[order], w[order]
        if np.any(np.diff(x) == 0):
            ux, inv = np.unique(x, return_inverse=True)
            w = np.bincount(inv, w)
            x = ux
        object.__setattr__(self, "atoms_x", x)
        object.__setattr__(self, "atoms_w", w)

    @classmethod
    def atoms(cls, sigma, xs, ws, value0=0.0, slope0=0.0):
        return cls(float(sigma), xs, ws, value0, slope0)

    @classmethod
    def from_vertices(cls, x, u):
        """Profile through the points (x_k, u_k), x_0 = 0 and x_last = sigma."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        sl = np.diff(u) / np.diff(x)
        jumps = np.diff(sl)
        tol = 1e-12 * max(1.0, np.abs(sl).max())
        if np.any(jumps < -tol):
            raise NonConvexInput("slopes must be nondecreasing")
        jumps = np.maximum(jumps, 0.0)
        return cls(float(x[-1] - x[0]), x[1:-1] - x[0], jumps, float(u[0]), float(sl[0]))

    @classmethod
    def from_density(cls, sigma, grid, dens, value0=0.0, slope0=0.0):
        """Atoms at the cell midpoints of ``grid`` carrying the trapezoidal cell mass."""
        grid = np.asarray(grid, dtype=float)
        dens = np.asarray(dens, dtype=float)
        if np.any(dens < 0):
            raise NonConvexInput("density must be nonnegative")
        mass = 0.5 * (dens[:-1] + dens[1:]) * np.diff(grid)
        mid = 0.5 * (grid[:-1] + grid[1:])
        keep = mass > 0
        return cls(float(sigma), mid[keep], mass[keep], value0, slope0, (grid, dens))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = self.value0 + self.slope0 * t
        return out + np.sum(self.atoms_w * np.maximum(t[..., None] - self.atoms_x, 0.0), axis=-1)

    def as_profile(self):
        X = np.concatenate([[0.0], self.atoms_x, [self.sigma]])
        return Profile(X, self(X), zero_outside=False)

    def mass(self, lo, hi):
        """u''-mass carried by the open interval (lo, hi)."""
        m = (self.atoms_x > lo) & (self.atoms_x < hi)
        return float(self.atoms_w[m].sum())

    def in_support(self, x, delta):
        return self.mass(x - delta, x + delta) > 0


# ---------------------------------------------------------------------------
# bricks
# ---------------------------------------------------------------------------


def w_brick(u, a, b, c, d):
    """Solution of w'' = u'' restricted to (b, c), w(a) = w(d) = 0.

    For atomic u'' this is the sum of Green's functions
    G(x, m) = -(x - a)(d - m)/(d - a) for x <= m and -(m - a)(d - x)/(d - a)
    for x >= m, weighted by the atoms in (b, c).  Returns a :class:`Profile`
    supported on [a, d].
    """
    if not (a < b < c < d):
        raise DegenerateInput(f"brick needs a < b < c < d, got {a}, {b}, {c}, {d}")
    sel = (u.atoms_x > b) & (u.atoms_x < c)
    m = u.atoms_x[sel]
    al = u.atoms_w[sel]
    if m.size == 0 or al.sum() <= 0:
        raise EmptyMass(f"u'' has no mass in ({b}, {c})")
    X = np.concatenate([[a], m, [d]])
    L = d - a
    # w(x) = sum_j al_j G(x, m_j), evaluated at the knots
    xx = X[:, None]
    G = np.where(xx <= m[None], -(xx - a) * (d - m[None]) / L, -(m[None] - a) * (d - xx) / L)
    y = G @ al
    y[0] = 0.0
    y[-1] = 0.0
    return Profile(X, y)


def brick_end_slopes(w):
    """(w'(a+), w'(d-)) of a brick."""
    sl = w.slopes()
    return float(sl[0]), float(sl[-1])


# ---------------------------------------------------------------------------
# convexity-preserving sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PerturbationResult:
    """Profile plus the data of its construction."""

    profile: Profile
    delta: float
    lambdas: tuple
    scale: float
    windows: tuple
    info: dict = field(default_factory=dict)

    def __call__(self, t):
        return self.profile(t)


def _windows_ok(u, centers, delta, a, d):
    if a <= 0.0 or d >= u.sigma:
        return False
    c = np.sort(np.asarray(centers, dtype=float))
    return bool(np.all(np.diff(c) > 2.0 * delta))


def _shrink_delta(u, centers, delta, ends, max_halvings=60):
    """Halve delta until the windows are disjoint and the bricks fit in (0, sigma)."""
    d0 = delta
    for _ in range(max_halvings):
        a, d = ends(delta)
        if _windows_ok(u, centers, delta, a, d):
            return delta
        delta *= 0.5
    raise DegenerateInput(f"no admissible window size below {d0}")


def _combine(v1, v2, v3):
    """Solve for l1, l3 with (l1 v1 + v2 + l3 v3)'(a+) = (..)'(d-) = 0."""
    s1 = brick_end_slopes(v1)
    s2 = brick_end_slopes(v2)
    s3 = brick_end_slopes(v3)
    A = np.array([[s1[0], s3[0]], [s1[1], s3[1]]])
    rhs = -np.array([s2[0], s2[1]])
    det = np.linalg.det(A)
    if abs(det) <= 1e-12 * max(np.abs(A).max() ** 2, 1e-300):
        raise SingularSystem(f"coefficient system singular (det={det:.3e}); retry with a smaller delta")
    l1, l3 = np.linalg.solve(A, rhs)
    v = v1.scaled(l1) + v2 + v3.scaled(l3)
    return v, float(l1), float(l3)


def _normalized_brick(u, a, b, c, d, end):
    """Brick scaled so that v'(a+) = -1 (end='a') or v'(d-) = 1 (end='d')."""
    w = w_brick(u, a, b, c, d)
    sa, sd = brick_end_slopes(w)
    C = -1.0 / sa if end == "a" else 1.0 / sd
    return w.scaled(C), C


def convexity_hat(u, nodes, delta):
    """Convexity-preserving approximation phi_k of the hat at ``nodes``.

    Builds v = l1 v1 + v2 + l3 v3 from bricks centred at the three nodes with
    windows of half-width delta, chooses l1, l3 so both end slopes vanish and
    scales by v(x2).  delta is halved until the windows are disjoint and fit
    inside (0, sigma).
    """
    x1, x2, x3 = (float(t) for t in nodes)
    HatSpec(u.sigma, x1, x2, x3)
    delta = _shrink_delta(u, (x1, x2, x3), float(delta), lambda dl: (x1 - 2 * dl, x3 + 2 * dl))
    a, d = x1 - 2 * delta, x3 + 2 * delta
    v1, C1 = _normalized_brick(u, a, x1 - delta, x1 + delta, d, "a")
    v2, C2 = _normalized_brick(u, a, x2 - delta, x2 + delta, d, "a")
    v3, C3 = _normalized_brick(u, a, x3 - delta, x3 + delta, d, "d")
    v, l1, l3 = _combine(v1, v2, v3)
    vx2 = float(v(x2))
    if vx2 == 0.0:
        raise SingularSystem("combination vanishes at x2")
    phi = v.scaled(1.0 / vx2)
    wins = ((x1 - delta, x1 + delta), (x2 - delta, x2 + delta), (x3 - delta, x3 + delta))
    info = {"C": (C1, C2, C3), "v_x2": vx2, "a": a, "d": d}
    return PerturbationResult(phi, delta, (l1, 1.0, l3), 1.0 / vx2, wins, info)


def split_hats(u, nodes, delta, x2k=None):
    """Convexity-preserving approximations of hat*1_(x1,x2) and hat*1_(x2,x3).

    Used when x2 is an accumulation point of supp(u''): ``x2k`` (default x2)
    must carry u''-mass on both sides within delta.  Returns
    (phi_minus, phi_plus, phi) with phi_plus = phi - phi_minus, where phi is
    :func:`convexity_hat` at the same delta.
    """
    x1, x2, x3 = (float(t) for t in nodes)
    HatSpec(u.sigma, x1, x2, x3)
    x2k = x2 if x2k is None else float(x2k)
    delta = _shrink_delta(
        u, (x1, x2k, x3), float(delta), lambda dl: (x1 - 2 * dl, x3 + 2 * dl)
    )
    a, d = x1 - 2 * delta, x2 + 2 * delta
    v1, C1 = _normalized_brick(u, a, x1 - delta, x1 + delta, d, "a")
    v2, C2 = _normalized_brick(u, a, x2k - delta, x2k, d, "a")
    v3, C3 = _normalized_brick(u, a, x2k, x2k + delta, d, "d")
    v, l1, l3 = _combine(v1, v2, v3)
    slope = float(v.derivative(x1 + delta, side=1)[0])
    if slope == 0.0:
        raise SingularSystem("combination has zero slope at x1 + delta")
    scale = 1.0 / ((x2 - x1) * slope)
    phim = v.scaled(scale)
    full = convexity_hat(u, (x1, x2, x3), delta)
    phip = full.profile - phim
    wins = ((x1 - delta, x1 + delta), (x2k - delta, x2k), (x2k, x2k + delta))
    info = {"C": (C1, C2, C3), "slope": slope, "a": a, "d": d, "x2k": x2k}
    minus = PerturbationResult(phim, delta, (l1, 1.0, l3), scale, wins, info)
    plus = PerturbationResult(phip, delta, full.lambdas, full.scale, full.windows, {"phi": full})
    return minus, plus, full


def max_t_convex(u, v, rtol=KINK_RTOL):
    """Largest t0 with u + s v convex for every |s| <= t0.

    ``u`` is a :class:`ConvexProfile` (or a Profile with nonnegative kinks),
    ``v`` a Profile.  Kinks of v are compared with the atoms of u at the same
    position: t0 = min alpha / |beta| over kinks with beta != 0, and 0 if v
    kinks where u is flat.  Returns inf for v with no kinks.
    """
    if isinstance(v, PerturbationResult):
        v = v.profile
    vx, beta = v.kinks()
    if isinstance(u, ConvexProfile):
        ux, alpha = u.atoms_x, u.atoms_w
        sigma = u.sigma
    else:
        ux, alpha = u.kinks()
        sigma = ux[-1]
    scale = max(np.abs(beta).max() if beta.size else 0.0, 0.0)
    if scale == 0.0:
        return np.inf
    act = np.abs(beta) > rtol * scale
    # kinks at the end points of (0, sigma) do not affect convexity inside
    act &= (vx > 0) & (vx < sigma)
    if not act.any():
        return np.inf
    xs = vx[act]
    bs = np.abs(beta[act])
    tol = 1e-12 * max(sigma, 1.0)
    k = np.searchsorted(ux, xs)
    k = np.clip(k, 0, max(len(ux) - 1, 0))
    a = np.zeros_like(xs)
    if len(ux):
        for off in (-1, 0):
            kk = np.clip(k + off, 0, len(ux) - 1)
            hit = np.abs(ux[kk] - xs) <= tol
            a = np.where(hit & (a == 0), alpha[kk], a)
    ratio = np.where(a > 0, a / bs, 0.0)
    return float(ratio.min())


def concentration_report(u, result, hat_spec):
    """Second-derivative mass of phi_k inside each node window and outside all of them.

    Returns the per-node masses next to the hat kink weights.
    """
    prof = result.profile if isinstance(result, PerturbationResult) else result
    x, beta = prof.kinks()
    nodes = hat_spec.nodes
    dl = result.delta
    inside = np.zeros(3)
    used = np.zeros(x.shape, dtype=bool)
    for i, xi in enumerate(nodes):
        m = (x > xi - 2 * dl) & (x < xi + 2 * dl)
        inside[i] = beta[m].sum()
        used |= m
    outside = float(np.abs(beta[~used]).sum())
    return {"node_mass": inside, "hat_weights": hat_spec.kink_weights(), "outside_mass": outside}


def delta_sweep(u, nodes, deltas):
    """H1 distance between phi_k and the hat over a list of window sizes."""
    spec = HatSpec(u.sigma, *nodes)
    hp = hat(spec)
    rows = []
    for dl in deltas:
        r = convexity_hat(u, nodes, dl)
        rows.append(
            {
                "delta": r.delta,
                "h1_distance": h1_distance(r.profile, hp, 0.0, u.sigma),
                "max_t_convex": max_t_convex(u, r.profile),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# lifting to a domain boundary
# ---------------------------------------------------------------------------


def lift_to_domain(dom, chart, profile, z=(0.0, 1.0), delta=0.2):
    """Boundary perturbation v z with v(x, u0(x)) = profile(x) on the chart.

    ``z`` is given in the chart frame (default: the inward chart axis) and
    converted to world coordinates.  Raises :class:`ChartMismatch` when the
    profile support leaves the chart.
    """
    from .shape_calculus import BoundaryPerturbation

    if isinstance(profile, PerturbationResult):
        profile = profile.profile
    zw = chart.vector_to_world(np.asarray(z, dtype=float))
    sup = profile.support
    P = perimeter(dom)
    if sup is None:
        return BoundaryPerturbation(dom, np.array([0.0, 0.5 * P]), np.zeros(2), zw, delta)
    lo, hi = sup
    tol = 1e-12 * max(chart.sigma, 1.0)
    if lo < chart.x[0] - tol or hi > chart.x[-1] + tol:
        raise ChartMismatch(f"profile support [{lo:.4g}, {hi:.4g}] exceeds chart [0, {chart.sigma:.4g}]")
    X = np.union1d(profile.x, chart.x)
    X = X[(X >= lo) & (X <= hi)]
    pts = chart.to_world(X)
    s = arclength_of_points(dom, pts)
    vals = profile(X)
    # make the arclength increasing across the wrap point
    s = np.where(s < s[0] - 0.5 * P, s + P, s)
    s = np.mod(s, P)
    order = np.argsort(s, kind="stable")
    return BoundaryPerturbation(dom, s[order], vals[order], zw, delta)


def moved_polygon(dom, pert, t):
    """Vertices of (I + t V)(dom) for a boundary perturbation (vertex transport)."""
    from .geometry import point_at_arclength, vertex_arclength

    P = perimeter(dom)
    s = np.union1d(vertex_arclength(dom), np.mod(pert.s_knots, P))
    # knots that coincide with vertices up to round-off would give zero-length edges
    keep = np.concatenate([[True], np.diff(s) > 1e-12 * P])
    s = s[keep]
    pts = point_at_arclength(dom, s)
    return pts + t * pert.profile(s)[:, None] * pert.direction(s)
