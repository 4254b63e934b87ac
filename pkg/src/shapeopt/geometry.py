"""Convex polygons, support functions and local graph charts.

A :class:`ConvexDomain` is an immutable counterclockwise convex polygon. The
optimizer works in the support-function parametrization: on a uniform grid of
outward-normal angles ``theta_i = offset + 2*pi*i/N`` a vector ``h`` describes
the polygon ``{x : x . e(theta_i) <= h_i}``, and convexity of the described
body is the linear condition ``h[i-1] - 2 cos(dtheta) h[i] + h[i+1] >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ChartTooLong, DegenerateInput, InfeasibleSupport, NonConvexInput

TWO_PI = 2.0 * np.pi


def cross2(a, b):
    """z-component of the planar cross product, broadcasting over leading axes."""
    a = np.asarray(a)
    b = np.asarray(b)
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def perp(a):
    """Counterclockwise rotation by pi/2: (a, b) -> (-b, a)."""
    a = np.asarray(a, dtype=float)
    return np.stack([-a[..., 1], a[..., 0]], axis=-1)


def shoelace(P):
    P = np.asarray(P, dtype=float)
    return 0.5 * float(np.sum(cross2(P, np.roll(P, -1, axis=0))))


def polygon_centroid(P):
    P = np.asarray(P, dtype=float)
    Q = np.roll(P, -1, axis=0)
    c = cross2(P, Q)
    a = 0.5 * c.sum()
    return ((P + Q) * c[:, None]).sum(axis=0) / (6.0 * a)


@dataclass(frozen=True, eq=False)
class ConvexDomain:
    """Convex polygon with counterclockwise vertices.

    ``support_angles``/``support_values`` sample the support function (about
    ``origin``) at the outward normals of the edges; ``n_collinear_merged``
    counts input vertices that were dropped as collinear.
    """

    vertices: np.ndarray
    support_angles: np.ndarray
    support_values: np.ndarray
    origin: np.ndarray
    n_collinear_merged: int = 0

    @property
    def n(self):
        return len(self.vertices)

    @property
    def edges(self):
        return np.roll(self.vertices, -1, axis=0) - self.vertices

    @property
    def edge_lengths(self):
        return np.hypot(*self.edges.T)

    @property
    def normals(self):
        """Outward unit normal of edge i (from vertex i to vertex i+1)."""
        e = self.edges / self.edge_lengths[:, None]
        return np.stack([e[:, 1], -e[:, 0]], axis=1)

    @property
    def scale(self):
        return float(np.ptp(self.vertices, axis=0).max())

    def translated(self, d):
        return make_domain(self.vertices + np.asarray(d, dtype=float))

    def scaled(self, s, center=(0.0, 0.0)):
        c = np.asarray(center, dtype=float)
        return make_domain(c + s * (self.vertices - c))

    def rotated(self, angle, center=(0.0, 0.0)):
        c = np.asarray(center, dtype=float)
        R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        return make_domain(c + (self.vertices - c) @ R.T)


def make_domain(vertices, tol=1e-12):
    """Validate a vertex list and build a :class:`ConvexDomain`.

    Clockwise input is reversed; collinear vertices (|cross| within
    ``tol * scale**2``) are merged. Raises :class:`NonConvexInput` for reflex or
    self-intersecting input and :class:`DegenerateInput` for vanishing area.
    """
    P = np.asarray(vertices, dtype=float)
    if P.ndim != 2 or P.shape[1] != 2 or len(P) < 3:
        raise DegenerateInput("need at least 3 planar points")
    scale = float(np.ptp(P, axis=0).max())
    if scale == 0.0:
        raise DegenerateInput("all points coincide")
    # drop repeated points
    keep = np.hypot(*(P - np.roll(P, 1, axis=0)).T) > tol * scale
    P = P[keep]
    if len(P) < 3:
        raise DegenerateInput("fewer than 3 distinct points")
    ctol = tol * scale**2

    def turn(Q):
        return cross2(Q - np.roll(Q, 1, axis=0), np.roll(Q, -1, axis=0) - Q)

    c = turn(P)
    if (c > ctol).any() and (c < -ctol).any():
        raise NonConvexInput("vertex turns have mixed signs (reflex or self-intersecting)")
    area = shoelace(P)
    if abs(area) <= ctol:
        raise DegenerateInput(f"polygon area {area:.3g} below tolerance")
    if area < 0:
        P = P[::-1].copy()
    merged = 0
    while len(P) > 3:
        c = turn(P)
        flat = np.abs(c) <= ctol
        if not flat.any():
            break
        P = P[~flat] if (~flat).sum() >= 3 else P
        merged += int(flat.sum())
        if (~flat).sum() < 3:
            raise DegenerateInput("polygon collapses to a segment")
    c = turn(P)
    if (c < -ctol).any():
        raise NonConvexInput("reflex vertex")
    d1 = P - np.roll(P, 1, axis=0)
    d2 = np.roll(P, -1, axis=0) - P
    total_turn = np.arctan2(cross2(d1, d2), np.sum(d1 * d2, axis=1)).sum()
    if abs(total_turn - TWO_PI) > 1e-6:
        raise NonConvexInput("polygon is not simple (winds more than once)")
    origin = polygon_centroid(P)
    e = np.roll(P, -1, axis=0) - P
    nrm = np.stack([e[:, 1], -e[:, 0]], axis=1)
    ang = np.mod(np.arctan2(nrm[:, 1], nrm[:, 0]), TWO_PI)
    order = np.argsort(ang)
    ang = ang[order]
    vals = _support(P, origin, ang)
    return ConvexDomain(P, ang, vals, origin, merged)


def _support(P, origin, theta):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return ((P - origin) @ dirs.T).max(axis=0)


def support_function(dom, theta, center=None):
    """h(theta) = max over vertices of <vertex - center, (cos theta, sin theta)>.

    ``center`` defaults to ``dom.origin``. Scalar in, scalar out.
    """
    c = dom.origin if center is None else np.asarray(center, dtype=float)
    out = _support(dom.vertices, c, theta)
    return float(out[0]) if np.ndim(theta) == 0 else out


def support_vector(dom, n_angles, offset=0.0, center=(0.0, 0.0)):
    """Support values on the uniform grid ``offset + 2*pi*i/n_angles``."""
    return support_function(dom, grid_angles(n_angles, offset), center=center)


def grid_angles(n_angles, offset=0.0):
    return offset + TWO_PI * np.arange(n_angles) / n_angles


def convexity_margins(h):
    """Discrete convexity residuals h[i-1] - 2cos(dtheta) h[i] + h[i+1]."""
    h = np.asarray(h, dtype=float)
    d = TWO_PI / len(h)
    return np.roll(h, 1) - 2.0 * np.cos(d) * h + np.roll(h, -1)


def facet_lengths(h):
    """Length of facet i of the body described by uniform-grid support values."""
    d = TWO_PI / len(h)
    return convexity_margins(h) / np.sin(d)


def support_vertices(h, offset=0.0):
    """Vertex i is the intersection of the supporting lines i and i+1."""
    h = np.asarray(h, dtype=float)
    th = grid_angles(len(h), offset)
    c, s = np.cos(th), np.sin(th)
    c1, s1, h1 = np.roll(c, -1), np.roll(s, -1), np.roll(h, -1)
    det = c * s1 - s * c1
    x = (h * s1 - h1 * s) / det
    y = (c * h1 - c1 * h) / det
    return np.stack([x, y], axis=1)


def reconstruct_from_support(h, offset=0.0, tol=1e-10):
    """Polygon whose support function equals ``h`` on the uniform angle grid.

    Zero-length facets are removed. Raises :class:`InfeasibleSupport` when the
    discrete convexity inequality fails by more than ``tol * max|h|``.
    """
    h = np.asarray(h, dtype=float)
    if len(h) < 3:
        raise InfeasibleSupport("need at least 3 support samples")
    m = convexity_margins(h)
    scale = max(float(np.abs(h).max()), 1e-300)
    if (m < -tol * scale).any():
        i = int(np.argmin(m))
        raise InfeasibleSupport(f"discrete convexity violated at index {i} (margin {m[i]:.3g})")
    V = support_vertices(h, offset)
    L = facet_lengths(h)
    # vertex i closes facet i; drop vertices whose following facet is empty
    keep = np.roll(L, -1) > tol * scale
    if keep.sum() < 3:
        raise InfeasibleSupport("support vector describes a degenerate body")
    return make_domain(V[keep])


def area(dom):
    return shoelace(dom.vertices)


def perimeter(dom):
    return float(dom.edge_lengths.sum())


def diameter(dom):
    P = dom.vertices
    d = P[:, None, :] - P[None, :, :]
    return float(np.sqrt((d**2).sum(-1)).max())


def regular_polygon(n, radius=1.0, center=(0.0, 0.0), phase=0.0):
    """Regular n-gon with circumradius ``radius``; vertex k at angle phase + 2 pi k/n."""
    t = phase + TWO_PI * np.arange(n) / n
    return make_domain(np.asarray(center) + radius * np.stack([np.cos(t), np.sin(t)], axis=1))


def rectangle(x0, y0, x1, y1):
    return make_domain([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def contains(dom, pts, tol=1e-9):
    """Boolean mask of points inside the closed polygon (edge slack ``tol``)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    P = dom.vertices
    e = dom.edges
    rel = pts[:, None, :] - P[None, :, :]
    c = cross2(e[None, :, :], rel)
    return (c >= -tol * dom.edge_lengths[None, :]).all(axis=1)


def distance_to_boundary(dom, pts):
    """Unsigned distance from points to the polygon boundary."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    A = dom.vertices
    E = dom.edges
    L2 = (E**2).sum(1)
    rel = pts[:, None, :] - A[None]
    t = np.clip((rel * E[None]).sum(-1) / L2[None], 0.0, 1.0)
    d = rel - t[..., None] * E[None]
    return np.sqrt((d**2).sum(-1)).min(axis=1)


@dataclass(frozen=True)
class InclusionPair:
    """Constraint pair D1 subset Omega subset D2; ``None`` means empty D1 / unbounded D2."""

    D1: ConvexDomain | None = None
    D2: ConvexDomain | None = None

    def __post_init__(self):
        if self.D1 is not None and self.D2 is not None:
            if not contains(self.D2, self.D1.vertices, tol=1e-9 * self.D2.scale).all():
                raise ValueError("D1 must lie inside D2")


def inclusion_ok(dom, pair, tol=1e-9):
    """True iff D1 is inside ``dom`` and ``dom`` is inside D2 (vertex tests)."""
    ok = True
    if pair.D1 is not None:
        ok &= bool(contains(dom, pair.D1.vertices, tol=tol).all())
    if pair.D2 is not None:
        ok &= bool(contains(pair.D2, dom.vertices, tol=tol).all())
    return ok


def radial_function(dom, theta, center=None):
    """Distance from ``center`` to the boundary along direction theta."""
    c = dom.origin if center is None else np.asarray(center, dtype=float)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    d = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    # ray c + r d meets the line of edge i (n_i . x = n_i . P_i) at r = (n.(P-c))/(n.d)
    nrm = dom.normals
    off = ((dom.vertices - c) * nrm).sum(1)
    nd = d @ nrm.T
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(nd > 1e-15, off[None, :] / nd, np.inf)
    return r.min(axis=1)


def vertex_arclength(dom):
    """Arclength coordinate of each vertex measured from vertex 0."""
    return np.concatenate([[0.0], np.cumsum(dom.edge_lengths)[:-1]])


def point_at_arclength(dom, s):
    s = np.mod(np.atleast_1d(np.asarray(s, dtype=float)), perimeter(dom))
    sv = vertex_arclength(dom)
    k = np.clip(np.searchsorted(sv, s, side="right") - 1, 0, dom.n - 1)
    t = (s - sv[k]) / dom.edge_lengths[k]
    return dom.vertices[k] + t[:, None] * dom.edges[k]


def arclength_of_points(dom, pts, tol=1e-9):
    """Arclength coordinate of boundary points (projected onto the nearest edge)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    A = dom.vertices
    E = dom.edges
    L = dom.edge_lengths
    rel = pts[:, None, :] - A[None]
    t = np.clip((rel * E[None]).sum(-1) / (L**2)[None], 0.0, 1.0)
    d = np.sqrt(((rel - t[..., None] * E[None]) ** 2).sum(-1))
    k = np.argmin(d, axis=1)
    tk = t[np.arange(len(pts)), k]
    return vertex_arclength(dom)[k] + tk * L[k]


@dataclass(frozen=True, eq=False)
class LocalGraph:
    """Chart in which a boundary arc is the graph of a convex function.

    ``x``/``u`` are the abscissas and values of the vertices of the arc in the
    chart frame (origin ``origin``, axes ``ex`` tangent and ``ey`` pointing
    into the domain), so ``u[0] = 0`` and the first slope is 0.
    """

    origin: np.ndarray
    ex: np.ndarray
    ey: np.ndarray
    x: np.ndarray
    u: np.ndarray
    vertex_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def sigma(self):
        return float(self.x[-1])

    @property
    def slopes(self):
        return np.diff(self.u) / np.diff(self.x)

    def u0(self, x):
        return np.interp(x, self.x, self.u)

    def to_world(self, x, y=None):
        x = np.asarray(x, dtype=float)
        if y is None:
            y = self.u0(x)
        return self.origin + x[..., None] * self.ex + np.asarray(y)[..., None] * self.ey

    def to_chart(self, pts):
        rel = np.asarray(pts, dtype=float) - self.origin
        return rel @ self.ex, rel @ self.ey

    def vector_to_world(self, z):
        z = np.asarray(z, dtype=float)
        return z[..., 0, None] * self.ex + z[..., 1, None] * self.ey


def local_graph(dom, start_vertex, span):
    """Chart of the arc through ``span`` consecutive vertices starting at ``start_vertex``.

    The first edge lies on the x-axis so that u0(0) = 0 and u0'(0+) = 0. Raises
    :class:`ChartTooLong` when the arc turns by pi/2 or more.
    """
    if span < 3:
        raise ValueError("a chart needs at least 3 vertices")
    if span > dom.n:
        raise ChartTooLong("chart longer than the boundary")
    idx = (start_vertex + np.arange(span)) % dom.n
    P = dom.vertices[idx]
    d = np.diff(P, axis=0)
    turns = np.arctan2(cross2(d[:-1], d[1:]), np.sum(d[:-1] * d[1:], axis=1))
    if turns.sum() >= 0.5 * np.pi - 1e-12:
        raise ChartTooLong(f"arc turns by {turns.sum():.4f} >= pi/2")
    ex = d[0] / np.hypot(*d[0])
    ey = perp(ex)
    rel = P - P[0]
    return LocalGraph(P[0].copy(), ex, ey, rel @ ex, rel @ ey, idx)
