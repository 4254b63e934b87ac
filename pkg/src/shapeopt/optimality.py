"""Numerical checks of first- and second-order optimality on polygonal domains.

All boundary quantities are computed from the boundary flux q = d_nu U of a
state (Poisson solution or first eigenfunction), linearly interpolated along
the mesh boundary, or from a closed-form flux (:class:`SyntheticState`).

Conventions for the multiplier mu
---------------------------------
Energy mode: stationarity of E_f + mu|Omega| against a boundary profile phi on
a free edge reads

    int (mu - 1/2 q^2) phi dx = 0,

so for a constant flux q^2 = 2 mu.  The edgewise averages
(1/|e|) int q^2 phi dx over the two affine test functions of an edge then
equal mu directly.  Eigen mode: the density of lambda_1 + mu|Omega| is
mu - q^2, so the residual uses the full q^2 and the averages are doubled to
be reported on the same scale as mu.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pde
from .errors import ChartMismatch, NoFreeEdges, OverlappingSupports, PreconditionUnmet
from .geometry import (
    LocalGraph,
    arclength_of_points,
    diameter,
    distance_to_boundary,
    perimeter,
    perp,
    vertex_arclength,
)
from .io import dumps, to_plain
from .meshing import triangulate
from .perturbations import HatSpec, Profile, hat, lift_to_domain
from .shape_calculus import (
    GL_T,
    GL_W,
    ScaledField,
    ShapeState,
    SumField,
    ef_d2,
    lam_d2,
    vol_d1,
    vol_d2,
)

MODES = ("energy", "eigen")


@dataclass
class OptimalityConfig:
    """Thresholds of the optimality checks.

    ``residual_rtol``: first-order residuals must be below this fraction of
    mu times the edge length.  ``max_slope`` and ``max_chart_frac`` make the
    smallness of a vertex chart concrete: |u0'| <= max_slope on [0, x3] and
    x3 <= max_chart_frac * diam.
    """

    residual_rtol: float = 0.02
    tangential_rtol: float = 1e-6
    flux_constant: float = 4.0
    max_slope: float = 1.0
    max_chart_frac: float = 0.2
    average_rtol: float = 0.03
    min_edge_h: float = 3.0
    contact_tol: float = 1e-7
    chart_frame: str = "bisector"
    max_vertices: int = 8
    edge_hat_frac: float = 0.05
    n_quad: int = 400

    def to_dict(self):
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# flux access
# ---------------------------------------------------------------------------


class SyntheticState:
    """Closed-form boundary flux: a constant or a callable of world points."""

    def __init__(self, flux):
        self.flux = flux

    def flux_at(self, dom, pts):
        pts = np.atleast_2d(pts)
        if callable(self.flux):
            return np.asarray(self.flux(pts), dtype=float)
        return np.full(len(pts), float(self.flux))

    def breakpoints(self, dom):
        return np.zeros(0)


class _FieldFlux:
    """Piecewise linear interpolation of a state's nodal boundary flux in arclength."""

    def __init__(self, state, dom):
        mesh = state.mesh
        P = mesh.nodes[mesh.boundary_chain]
        s = arclength_of_points(dom, P)
        order = np.argsort(s, kind="stable")
        self.s = s[order]
        self.q = np.asarray(state.boundary_flux, dtype=float)[order]
        self.period = perimeter(dom)

    def at_s(self, s):
        return np.interp(np.mod(s, self.period), self.s, self.q, period=self.period)


_flux_cache = {}


def _as_flux(state, dom):
    if isinstance(state, SyntheticState):
        return state
    if isinstance(state, ShapeState):
        raise TypeError("pass the solved field (state.poisson or state.eigen[1])")
    if isinstance(state, tuple):  # (lambda, field) from solve_eigen
        state = state[1]
    if getattr(state, "boundary_flux", None) is None:
        raise ValueError("state has no boundary flux")
    key = (id(state), id(dom))
    ff = _flux_cache.get(key)
    if ff is None:
        _flux_cache.clear()
        ff = _flux_cache[key] = _FieldFlux(state, dom)
    return ff


def flux_at(state, dom, pts):
    """Boundary flux of ``state`` at boundary points of ``dom``."""
    ff = _as_flux(state, dom)
    if isinstance(ff, SyntheticState):
        return ff.flux_at(dom, pts)
    return ff.at_s(arclength_of_points(dom, pts))


def _flux_breaks(state, dom):
    ff = _as_flux(state, dom)
    return ff.s if isinstance(ff, _FieldFlux) else np.zeros(0)


def _density_factor(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    return 0.5 if mode == "energy" else 1.0


# ---------------------------------------------------------------------------
# charts
# ---------------------------------------------------------------------------


def edge_chart(dom, k):
    """Two-point chart of edge k (from vertex k to vertex k+1)."""
    k = int(k) % dom.n
    A = dom.vertices[k]
    B = dom.vertices[(k + 1) % dom.n]
    L = float(np.hypot(*(B - A)))
    ex = (B - A) / L
    return LocalGraph(A.copy(), ex, perp(ex), np.array([0.0, L]), np.zeros(2), np.array([k, (k + 1) % dom.n]))


def vertex_chart(dom, n, frame="bisector"):
    """Chart of the two edges around vertex n (nodes x1 < x2 < x3 = vertices n-1, n, n+1).

    ``frame="edge"`` puts the incoming edge on the x axis (slopes 0 and
    tan(turn)); ``frame="bisector"`` aligns the x axis with the bisector of the
    two edge directions (slopes -tan(turn/2) and tan(turn/2)).
    """
    idx = (int(n) + np.arange(-1, 2)) % dom.n
    P = dom.vertices[idx]
    d1 = P[1] - P[0]
    d2 = P[2] - P[1]
    t1 = d1 / np.hypot(*d1)
    t2 = d2 / np.hypot(*d2)
    if frame == "edge":
        ex = t1
    elif frame == "bisector":
        ex = t1 + t2
        ex = ex / np.hypot(*ex)
    else:
        raise ValueError("frame must be 'edge' or 'bisector'")
    ey = perp(ex)
    rel = P - P[0]
    x = rel @ ex
    if not np.all(np.diff(x) > 0):
        raise ChartMismatch("vertex arc is not a graph over the chart axis")
    return LocalGraph(P[0].copy(), ex, ey, x, rel @ ey, idx)


def _check_chart_on_domain(dom, chart):
    pts = chart.to_world(chart.x)
    mids = chart.to_world(0.5 * (chart.x[1:] + chart.x[:-1]))
    d = distance_to_boundary(dom, np.concatenate([pts, mids]))
    if d.max() > 1e-8 * dom.scale:
        raise ChartMismatch(f"chart leaves the boundary by {d.max():.3g}")


# ---------------------------------------------------------------------------
# first order
# ---------------------------------------------------------------------------


def _edge_grid(dom, state, chart, i, n_quad):
    if not 0 <= i < len(chart.x) - 1:
        raise ChartMismatch(f"edge index {i} outside the chart (0..{len(chart.x) - 2})")
    _check_chart_on_domain(dom, chart)
    xa, xb = float(chart.x[i]), float(chart.x[i + 1])
    x = np.linspace(xa, xb, n_quad + 1)
    br = _flux_breaks(state, dom)
    if len(br):
        # flux nodes on this edge, in chart abscissa
        pa, pb = chart.to_world(np.array([xa, xb]))
        sa, sb = arclength_of_points(dom, np.array([pa, pb]))
        P = perimeter(dom)
        span = np.mod(sb - sa, P)
        rel = np.mod(br - sa, P)
        inside = rel[(rel > 0) & (rel < span)]
        x = np.union1d(x, xa + inside / span * (xb - xa))
    return x, xa, xb


def first_order_residual(dom, state, mu, chart, i, mode="energy", n_quad=400):
    """Residuals int (mu - c q^2) phi dx of edge [x_i, x_{i+1}] of a chart.

    ``c`` is 1/2 in energy mode and 1 in eigen mode; the two test functions
    are the affine hats phi_i = (x_{i+1} - x)/(x_{i+1} - x_i) and
    phi_{i+1} = 1 - phi_i, integrated by the trapezoidal rule in the chart
    abscissa.
    """
    c = _density_factor(mode)
    x, xa, xb = _edge_grid(dom, state, chart, i, n_quad)
    q = flux_at(state, dom, chart.to_world(x))
    g = mu - c * q * q
    pa = (xb - x) / (xb - xa)
    pb = 1.0 - pa
    return float(np.trapezoid(g * pa, x)), float(np.trapezoid(g * pb, x))


def edge_averages(dom, state, k, mode="energy", n_quad=400):
    """Multiplier estimates (1/|e|) int q^2 phi dx for the two test functions of edge k.

    Reported on the scale of mu (doubled in eigen mode, see module notes).
    """
    chart = edge_chart(dom, k)
    x, xa, xb = _edge_grid(dom, state, chart, 0, n_quad)
    q2 = flux_at(state, dom, chart.to_world(x)) ** 2
    L = xb - xa
    pa = (xb - x) / L
    scale = 1.0 if mode == "energy" else 2.0
    _density_factor(mode)
    return (
        scale * float(np.trapezoid(q2 * pa, x)) / L,
        scale * float(np.trapezoid(q2 * (1.0 - pa), x)) / L,
    )


@dataclass
class MuEstimate:
    mu: float
    averages: list
    edges: list
    max_rel_deviation: float
    configured_mu: float | None = None

    def __float__(self):
        return float(self.mu)

    @property
    def rel_to_configured(self):
        if self.configured_mu is None or self.configured_mu == 0:
            return float("nan")
        return abs(self.mu - self.configured_mu) / abs(self.configured_mu)

    def to_dict(self):
        d = dict(self.__dict__)
        d["rel_to_configured"] = self.rel_to_configured
        return d


def estimate_mu(dom, state, free_edges, mode="energy", configured_mu=None, n_quad=400):
    """Least-squares multiplier from the edge averages over all free edges."""
    free_edges = [int(k) for k in free_edges]
    if not free_edges:
        raise NoFreeEdges("no free edges to estimate the multiplier from")
    avgs = []
    for k in free_edges:
        avgs.extend(edge_averages(dom, state, k, mode, n_quad))
    a = np.asarray(avgs)
    mu = float(a.mean())
    dev = float(np.abs(a - mu).max() / max(abs(mu), 1e-300))
    return MuEstimate(mu, a.tolist(), free_edges, dev, configured_mu)


# ---------------------------------------------------------------------------
# boundary integrals for a perturbation
# ---------------------------------------------------------------------------


class _BoundaryRule:
    """3-point Gauss rule on the boundary, refined at the knots of v, the
    flux nodes and the polygon vertices, so that v, q are linear on every cell."""

    def __init__(self, dom, state, pert):
        P = perimeter(dom)
        br = [vertex_arclength(dom), np.mod(pert.s_knots, P), _flux_breaks(state, dom), [0.0, P]]
        s = np.unique(np.concatenate([np.asarray(b, dtype=float) for b in br]))
        s = s[(s >= 0) & (s <= P)]
        a, b = s[:-1], s[1:]
        keep = b - a > 1e-14 * P
        a, b = a[keep], b[keep]
        self.s = a[:, None] + GL_T[None, :] * (b - a)[:, None]
        self.w = (b - a)[:, None] * GL_W[None, :]
        sv = vertex_arclength(dom)
        k = np.clip(np.searchsorted(sv, 0.5 * (a + b), side="right") - 1, 0, dom.n - 1)
        self.tau = dom.edges[k] / dom.edge_lengths[k, None]
        self.nu = -perp(self.tau)
        v_a, v_b = pert.profile(a), pert.profile(b)
        self.v = pert.profile(self.s)
        self.dv = ((v_b - v_a) / (b - a))[:, None] * np.ones_like(self.s)
        self.z = pert.direction(self.s)
        from .geometry import point_at_arclength

        self.pts = point_at_arclength(dom, self.s.ravel())
        self.q = flux_at(state, dom, self.pts).reshape(self.s.shape)
        self.zt = (self.z * self.tau[:, None, :]).sum(-1)
        self.zn = (self.z * self.nu[:, None, :]).sum(-1)

    def integrate(self, g):
        return float((self.w * g).sum())


def _perts(pert):
    if isinstance(pert, PairedPerturbation):
        return [(p, c) for p, c in zip(pert.parts, pert.coefficients)]
    return [(pert, 1.0)]


def tangential_term(dom, state, pert):
    """int q^2 (z.tau)(z.nu) v d_s v over the boundary."""
    total = 0.0
    for p, c in _perts(pert):
        r = _BoundaryRule(dom, state, p)
        total += c * c * r.integrate(r.q**2 * r.zt * r.zn * r.v * r.dv)
    return total


@dataclass
class FluxBoundResult:
    ratio: float
    bound: float
    numerator: float
    denominator: float
    degenerate: bool

    @property
    def passed(self):
        return (not self.degenerate) and self.ratio <= self.bound

    def to_dict(self):
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def flux_bound_check(dom, state, mu, pert, constant=4.0):
    """ratio = int |q| (V.nu)^2 / int q^2 (V.nu)^2 compared with constant/sqrt(mu).

    A vanishing denominator (zero flux on the support) is reported as the
    degenerate 0/0 case with ratio nan.
    """
    num = den = 0.0
    for p, c in _perts(pert):
        r = _BoundaryRule(dom, state, p)
        vn2 = (c * r.v * r.zn) ** 2
        num += r.integrate(np.abs(r.q) * vn2)
        den += r.integrate(r.q**2 * vn2)
    bound = constant / np.sqrt(mu) if mu > 0 else float("inf")
    scale = max(abs(num), 1.0) * 1e-300
    if den <= scale or den == 0.0:
        return FluxBoundResult(float("nan"), float(bound), num, den, True)
    return FluxBoundResult(num / den, float(bound), num, den, False)


# ---------------------------------------------------------------------------
# trace inequality
# ---------------------------------------------------------------------------


def cos_bump(t):
    """cos^2(pi t / 2) on |t| < 1, zero outside."""
    t = np.asarray(t, dtype=float)
    return np.where(np.abs(t) < 1.0, np.cos(0.5 * np.pi * t) ** 2, 0.0)


@dataclass
class TraceProbeResult:
    eps: list
    ratios: list
    sup: float
    slope: float
    n_nodes: list

    @property
    def bounded(self):
        return bool(np.isfinite(self.sup)) and abs(self.slope) <= 0.1

    def to_dict(self):
        d = dict(self.__dict__)
        d["bounded"] = self.bounded
        return d


def trace_inequality_probe(dom, eps_list=(0.4, 0.2, 0.1, 0.05), s0=0.0, h=0.05, amplitude=1.0, bump=cos_bump, cells=10):
    """Ratios ||w||_{L2(bdry)} / (sqrt(eps) ||grad Hw||_{L2}) for w = bump((s - s0)/eps).

    Hw is the discrete harmonic extension; the mesh is refined near the
    bump centre so that the support carries about ``cells`` boundary cells
    per eps.  The slope is that of log(ratio) against log(eps).
    """
    P = perimeter(dom)
    from .geometry import point_at_arclength

    c = point_at_arclength(dom, [s0])[0]
    ratios, nn = [], []
    for eps in eps_list:
        fine = max(float(eps) / cells, 1e-3)

        def size_fn(pts, c=c, eps=eps, fine=fine):
            d = np.hypot(*(np.atleast_2d(pts) - c).T)
            return fine + 0.35 * np.maximum(d - eps, 0.0)

        mesh = triangulate(dom, h, size_fn=size_fn)
        nn.append(int(mesh.n_nodes))
        chain = mesh.boundary_chain
        s = arclength_of_points(dom, mesh.nodes[chain])
        ds = np.mod(s - s0 + 0.5 * P, P) - 0.5 * P
        g = amplitude * bump(ds / eps)
        # boundary L2 norm of the fine profile (independent of the mesh)
        tt = np.linspace(-1.0, 1.0, 4001)
        wl2 = abs(amplitude) * np.sqrt(np.trapezoid(bump(tt) ** 2, tt) * eps)
        if wl2 == 0.0:
            ratios.append(0.0)
            continue
        ext = pde.solve_harmonic(mesh, g)
        ratios.append(float(wl2 / (np.sqrt(eps) * np.sqrt(ext.dirichlet_integral()))))
    r = np.asarray(ratios)
    e = np.asarray(eps_list, dtype=float)
    if (r > 0).all() and len(r) >= 2:
        slope = float(np.polyfit(np.log(e), np.log(r), 1)[0])
    else:
        slope = 0.0
    return TraceProbeResult(list(map(float, e)), r.tolist(), float(r.max()), slope, nn)


# ---------------------------------------------------------------------------
# second order
# ---------------------------------------------------------------------------


@dataclass
class PositivityResult:
    value: float
    mode: str
    breakdown: dict
    precondition_met: bool | None

    @property
    def passed(self):
        return self.value > 0

    def to_dict(self):
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def _field_of(pert):
    if isinstance(pert, PairedPerturbation):
        return pert.field()
    if hasattr(pert, "field"):
        return pert.field()
    return pert


def second_order_positivity(dom, mode, pert, f=None, h=0.03, state=None, residual_rel=None, config=None):
    """Lower bound of the second derivative along a perturbation.

    Energy mode: T1 + T2 + T4 of :func:`ef_d2` (the curvature term T3 dropped).
    Eigen mode: the ``lower_bound`` of :func:`lam_d2`, i.e. the second
    derivative without its curvature part.  ``residual_rel`` is the largest
    first-order residual (relative to mu times the edge length) on the
    chart; when it exceeds the configured threshold :class:`PreconditionUnmet`
    is raised.
    """
    cfg = OptimalityConfig() if config is None else config
    if residual_rel is not None and residual_rel > cfg.residual_rtol:
        raise PreconditionUnmet(
            f"first-order residual {residual_rel:.3g} exceeds {cfg.residual_rtol:.3g} of mu*length"
        )
    ctx = state if isinstance(state, ShapeState) else ShapeState(dom, h, f)
    V = _field_of(pert)
    if mode == "energy":
        rep = ef_d2(dom, ctx.f, V, state=ctx)
        value = rep.term_breakdown["lower_bound"]
    elif mode == "eigen":
        rep = lam_d2(dom, V, state=ctx)
        b = rep.term_breakdown
        value = b["lower_bound"]
        rep.term_breakdown["S1+S2+S4"] = b["S1"] + b["S2"] + b["S4"]
    else:
        raise ValueError(f"mode must be one of {MODES}")
    return PositivityResult(float(value), mode, dict(rep.term_breakdown), None if residual_rel is None else True)


# ---------------------------------------------------------------------------
# perturbations attached to vertices
# ---------------------------------------------------------------------------


def vertex_hat(dom, n, frame="bisector", z=(0.0, 1.0)):
    """Hat perturbation of vertex n: nodes at vertices n-1, n, n+1, direction z in the chart."""
    chart = vertex_chart(dom, n, frame)
    x = chart.x
    # the hat nodes are the chart end points, so the profile is built directly
    prof = Profile(np.asarray(x, dtype=float), np.array([0.0, 1.0, 0.0]))
    return lift_to_domain(dom, chart, prof, z=z), chart


@dataclass
class PairedPerturbation:
    """alpha_n v_n + beta_m v_m built from two vertex hats with disjoint supports."""

    parts: tuple
    coefficients: tuple
    charts: tuple
    vertices: tuple

    @property
    def alpha(self):
        return self.coefficients[0]

    @property
    def beta(self):
        return self.coefficients[1]

    def field(self):
        return SumField(*(ScaledField(p.field(), c) for p, c in zip(self.parts, self.coefficients)))


def paired_perturbation(dom, n, m, charts=None, frame="bisector"):
    """Area-neutral pair of vertex hats.

    alpha_n = 1/|x_{n-1} - x_{n+1}|, beta_m = -1/|x_{m-1} - x_{m+1}| in the
    abscissas of the respective charts, so that the first variation of the
    area vanishes.  The hat supports (vertices n-1..n+1 and m-1..m+1) may
    share an endpoint but no edge.
    """
    N = dom.n
    n, m = int(n) % N, int(m) % N
    gap = (m - n) % N
    if gap < 2 or gap > N - 2:
        raise OverlappingSupports(f"hats at vertices {n} and {m} share an edge")
    parts, charts_out = [], []
    for j, k in enumerate((n, m)):
        if charts is not None and charts[j] is not None:
            chart = charts[j]
            x = chart.x
            prof = Profile(np.asarray(x, dtype=float), np.array([0.0, 1.0, 0.0]))
            p = lift_to_domain(dom, chart, prof)
        else:
            p, chart = vertex_hat(dom, k, frame)
        parts.append(p)
        charts_out.append(chart)
    a = 1.0 / abs(charts_out[0].x[2] - charts_out[0].x[0])
    b = -1.0 / abs(charts_out[1].x[2] - charts_out[1].x[0])
    return PairedPerturbation(tuple(parts), (a, b), tuple(charts_out), (n, m))


def paired_volume_terms(dom, pp):
    """(vol_d1, vol_d2) of a paired perturbation and of its two parts."""
    V = pp.field()
    parts = [ScaledField(p.field(), c) for p, c in zip(pp.parts, pp.coefficients)]
    return {
        "vol_d1": vol_d1(dom, V),
        "vol_d2": vol_d2(dom, V),
        "vol_d1_parts": [vol_d1(dom, W) for W in parts],
        "vol_d2_parts": [vol_d2(dom, W) for W in parts],
    }


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class OptimalityReport:
    mode: str
    mu: float
    mu_estimate: float
    mu_estimate_detail: dict
    edge_residuals: list
    free_edges: list
    vertex_checks: list
    tangential_term: float | None
    flux_bound_ratio: float | None
    flux_bound: float | None
    positivity_value: float | None
    flags: dict
    config: dict = field(default_factory=dict)

    @property
    def max_residual_rel(self):
        vals = [e["rel"] for e in self.edge_residuals]
        return float(max(vals)) if vals else float("nan")

    def to_dict(self):
        d = to_plain(self.__dict__)
        d["max_residual_rel"] = self.max_residual_rel
        return d

    def to_json(self):
        return dumps(self.to_dict())

    def summary_table(self):
        rows = [
            ("mode", self.mode),
            ("mu (used)", f"{self.mu:.6g}"),
            ("mu estimate", f"{self.mu_estimate:.6g}"),
            ("free edges", str(len(self.free_edges))),
            ("max residual / (mu L)", f"{self.max_residual_rel:.3e}"),
            ("tangential term", _fmt(self.tangential_term)),
            ("flux ratio", _fmt(self.flux_bound_ratio) + f" (bound {_fmt(self.flux_bound)})"),
            ("positivity", _fmt(self.positivity_value)),
        ]
        rows += [(f"flag {k}", str(v)) for k, v in self.flags.items()]
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a.ljust(w)}  {b}" for a, b in rows)


def _fmt(v):
    return "n/a" if v is None else f"{v:.6g}"


def free_edges_of(dom, pair, h, config=None):
    """Free edges (no contact with D1 or D2) that are at least ``min_edge_h * h`` long."""
    from .optimizer import free_edge_mask

    cfg = OptimalityConfig() if config is None else config
    free = free_edge_mask(dom, pair, cfg.contact_tol)
    long_ = dom.edge_lengths >= cfg.min_edge_h * h
    return [int(k) for k in np.flatnonzero(free & long_)]


def vertex_contacts(dom, pair, tol=1e-7):
    """Per-vertex flags (on the boundary of D1, on the boundary of D2)."""
    t = tol * diameter(dom)
    P = dom.vertices
    on1 = np.zeros(dom.n, dtype=bool)
    on2 = np.zeros(dom.n, dtype=bool)
    if pair.D1 is not None:
        on1 = distance_to_boundary(pair.D1, P) <= t
    if pair.D2 is not None:
        on2 = distance_to_boundary(pair.D2, P) <= t
    return on1, on2


def edge_hat(dom, k, half_width):
    """Hat of half-width ``half_width`` centred on edge k, moving along the inward normal."""
    chart = edge_chart(dom, k)
    L = float(chart.x[-1])
    m = 0.5 * L
    e = min(float(half_width), 0.49 * L)
    prof = hat(HatSpec(L, m - e, m, m + e))
    return lift_to_domain(dom, chart, prof), chart


def _hat_kinks(chart, nodes):
    return chart.to_world(np.asarray(nodes, dtype=float))


def verify_optimum(dom, mode, pair, mu=None, f=None, h=0.03, constrained=False, config=None, state=None):
    """Run the full chain of checks on a candidate optimum.

    For constrained problems the multiplier is estimated from the edge
    averages; for penalized ones the configured ``mu`` is used and the
    estimate is reported next to it.  Second-order quantities are evaluated
    on hats around free vertices (both edges free, vertex touching neither
    D1 nor D2) and on short hats centred on free edges; only hats whose chart
    is short and whose first-order residuals pass enter the verdict flags.
    """
    cfg = OptimalityConfig() if config is None else config
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    free = free_edges_of(dom, pair, h, cfg)
    pin1, on2 = vertex_contacts(dom, pair, cfg.contact_tol)
    diam = diameter(dom)
    # candidate hats: (kind, index, chart nodes in world coordinates)
    hats = []
    fs = set(free)
    for n in range(dom.n):
        if (n - 1) % dom.n in fs and n in fs and not pin1[n] and not on2[n]:
            hats.append(("vertex", n))
    for k in free:
        hats.append(("edge", k))
    if isinstance(state, ShapeState):
        ctx = state
    else:
        kinks = []
        half = cfg.edge_hat_frac * diam
        for kind, j in hats:
            if kind == "edge":
                ch = edge_chart(dom, j)
                m = 0.5 * ch.x[-1]
                e = min(half, 0.49 * ch.x[-1])
                kinks.append(_hat_kinks(ch, [m - e, m, m + e]))
        bp = np.concatenate(kinks) if kinks else None
        ctx = ShapeState(dom, h, f, mesh=triangulate(dom, h, breakpoints=bp))
    U = ctx.poisson if mode == "energy" else ctx.eigen[1]
    flags = {}
    if not free:
        est = None
        mu_used = float(mu) if mu is not None else float("nan")
    else:
        est = estimate_mu(dom, U, free, mode, None if constrained else mu, cfg.n_quad)
        mu_used = est.mu if (constrained or mu is None) else float(mu)
    res = []
    for k in free:
        r = first_order_residual(dom, U, mu_used, edge_chart(dom, k), 0, mode, cfg.n_quad)
        L = float(dom.edge_lengths[k])
        scale = max(abs(mu_used) * L, 1e-300)
        # an end sitting on the boundary of D1 can only move outward, so its
        # test function gives an inequality and is not checked
        ends = [not pin1[k], not pin1[(k + 1) % dom.n]]
        rel = max([abs(x) / scale for x, e in zip(r, ends) if e], default=0.0)
        res.append(
            {
                "edge": k,
                "length": L,
                "r_minus": r[0],
                "r_plus": r[1],
                "checked_ends": ends,
                "rel": rel,
                "ok": rel <= cfg.residual_rtol,
            }
        )
    flags["has_free_edges"] = bool(free)
    flags["residuals_ok"] = bool(free) and all(e["ok"] for e in res)
    if constrained and est is not None:
        flags["averages_ok"] = est.max_rel_deviation <= cfg.average_rtol
    by_edge = {e["edge"]: e for e in res}
    checks = []
    for kind, j in hats:
        if kind == "vertex":
            prev = (j - 1) % dom.n
            try:
                pert, chart = vertex_hat(dom, j, cfg.chart_frame)
            except ChartMismatch:
                continue
            # the vertex hat restricted to each edge is one of the edge test functions
            resid = max(abs(by_edge[prev]["r_plus"]), abs(by_edge[j]["r_minus"])) / max(
                abs(mu_used) * min(by_edge[prev]["length"], by_edge[j]["length"]), 1e-300
            )
        else:
            pert, chart = edge_hat(dom, j, cfg.edge_hat_frac * diam)
            resid = by_edge[j]["rel"]
        support = float(np.ptp(pert.s_knots)) if kind == "edge" else float(chart.x[-1] - chart.x[0])
        slope = float(np.abs(chart.slopes).max())
        short = slope <= cfg.max_slope * (1 + 1e-9) and support <= cfg.max_chart_frac * diam
        checks.append(
            {
                "kind": kind,
                "index": int(j),
                "max_slope": slope,
                "chart_length": support,
                "short": bool(short),
                "residual_rel": float(resid),
                "_pert": pert,
            }
        )
    checks.sort(key=lambda c: (not c["short"], c["kind"] != "vertex", c["chart_length"]))
    checks = checks[: cfg.max_vertices]
    bound = cfg.flux_constant / np.sqrt(mu_used) if mu_used > 0 else float("inf")
    for c in checks:
        pert = c.pop("_pert")
        c["tangential_term"] = tangential_term(dom, U, pert)
        fb = flux_bound_check(dom, U, mu_used, pert, cfg.flux_constant)
        c["flux_ratio"] = fb.ratio
        try:
            pr = second_order_positivity(dom, mode, pert, state=ctx, residual_rel=c["residual_rel"], config=cfg)
        except PreconditionUnmet as e:
            c["precondition"] = str(e)
            c["precondition_met"] = False
            pr = second_order_positivity(dom, mode, pert, state=ctx, config=cfg)
        else:
            c["precondition_met"] = True
        c["positivity_value"] = pr.value
        c["breakdown"] = pr.breakdown
    tang = ratio = pos = None
    asserted = [c for c in checks if c["short"] and c["precondition_met"]]
    if asserted:
        tang = min(c["tangential_term"] for c in asserted)
        ratio = max(c["flux_ratio"] for c in asserted)
        pos = min(c["positivity_value"] for c in asserted)
        flags["tangential_ok"] = bool(tang >= -cfg.tangential_rtol * abs(mu_used))
        flags["flux_ok"] = bool(ratio <= bound)
        flags["positivity_ok"] = bool(pos > 0)
    else:
        flags["tangential_ok"] = flags["flux_ok"] = flags["positivity_ok"] = None
    flags["chain_ok"] = bool(flags["residuals_ok"]) and all(
        flags[k] is True for k in ("tangential_ok", "flux_ok", "positivity_ok")
    )
    return OptimalityReport(
        mode,
        float(mu_used),
        float("nan") if est is None else est.mu,
        {} if est is None else est.to_dict(),
        res,
        free,
        checks,
        tang,
        ratio,
        bound,
        pos,
        flags,
        cfg.to_dict(),
    )
