"""Shape maximization over convex polygons parametrized by support values.

The design variable is the vector h of support values on the uniform angle
grid theta_i = offset + 2 pi i / N.  Convexity and the inclusions
D1 subset Omega subset D2 are linear inequalities on h, so the projection onto
the feasible set is a small quadratic program.  The objective is one of

    penalized_energy     E_f(Omega) + mu |Omega|
    penalized_eigen      lambda_1(Omega) + mu |Omega|
    constrained_energy   E_f(Omega)         with |Omega| = m0
    constrained_eigen    lambda_1(Omega)    with |Omega| = m0

and its derivative with respect to h_i is the integral of the Hadamard density
over facet i (the facet moves with unit normal speed, its neighbours do not).
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import quadprog
from scipy.optimize import brentq

from . import pde
from .errors import InfeasibleInit, InfeasibleSupport
from .geometry import (
    InclusionPair,
    TWO_PI,
    area,
    convexity_margins,
    diameter,
    facet_lengths,
    grid_angles,
    make_domain,
    perimeter,
    reconstruct_from_support,
    support_vector,
)
from .meshing import triangulate

VARIANTS = ("penalized_energy", "penalized_eigen", "constrained_energy", "constrained_eigen")

# facets shorter than this fraction of h_target are dropped before meshing
MESH_MIN_FACET = 0.1


@dataclass
class ProblemSpec:
    variant: str
    pair: InclusionPair
    mu: float = 0.0
    m0: float | None = None
    f: pde.SourceSpec | None = None
    n_angles: int = 256
    h: float = 0.03
    offset: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.f is None:
            self.f = pde.SourceSpec.constant(1.0)
        if self.n_angles < 3:
            raise ValueError("n_angles must be at least 3")

    @property
    def is_eigen(self):
        return self.variant.endswith("eigen")

    @property
    def is_constrained(self):
        return self.variant.startswith("constrained")

    def validate(self):
        """Check parameter ranges; raises ValueError with the violated condition."""
        if self.pair.D2 is None:
            raise ValueError("the optimizer needs an outer domain D2")
        if self.is_constrained:
            a1 = area(self.pair.D1) if self.pair.D1 is not None else 0.0
            a2 = area(self.pair.D2)
            if self.m0 is None or not (a1 < self.m0 < a2):
                raise ValueError(
                    f"m0 must satisfy |D1| < m0 < |D2| (here {a1:.6g} < m0 < {a2:.6g}), got {self.m0}"
                )
        elif not self.mu >= 0:
            raise ValueError("mu must be nonnegative")
        if not self.h > 0:
            raise ValueError("h must be positive")

    def bounds(self):
        """Support-value bounds (lower from D1, upper from D2) on the grid."""
        N = self.n_angles
        lo = np.full(N, -np.inf)
        if self.pair.D1 is not None:
            lo = support_vector(self.pair.D1, N, self.offset)
        hi = support_vector(self.pair.D2, N, self.offset)
        return lo, hi

    def to_dict(self):
        d = {
            "variant": self.variant,
            "mu": self.mu,
            "m0": self.m0,
            "f": self.f.to_dict(),
            "n_angles": self.n_angles,
            "h": self.h,
            "offset": self.offset,
            "D1": None if self.pair.D1 is None else self.pair.D1.vertices.tolist(),
            "D2": None if self.pair.D2 is None else self.pair.D2.vertices.tolist(),
        }
        return d

    @classmethod
    def from_dict(cls, d):
        D1 = None if d.get("D1") is None else make_domain(np.asarray(d["D1"], dtype=float))
        D2 = None if d.get("D2") is None else make_domain(np.asarray(d["D2"], dtype=float))
        f = pde.SourceSpec.from_dict(d["f"]) if d.get("f") else None
        return cls(
            d["variant"],
            InclusionPair(D1, D2),
            float(d.get("mu", 0.0)),
            None if d.get("m0") is None else float(d["m0"]),
            f,
            int(d.get("n_angles", 256)),
            float(d.get("h", 0.03)),
            float(d.get("offset", 0.0)),
        )


def grid_polygon(n_angles, radius=1.0, offset=0.0):
    """Polygon circumscribed about a circle with facet normals on the angle grid."""
    return reconstruct_from_support(np.full(n_angles, float(radius)), offset)


# ---------------------------------------------------------------------------
# support-value polygons
# ---------------------------------------------------------------------------


def polygon_from_support(h, offset=0.0, min_facet=0.0):
    """Polygon of the support vector h with facets shorter than ``min_facet`` removed.

    Removed facets are absorbed by intersecting the supporting lines of the
    neighbouring kept facets.  Returns the domain and the grid indices of the
    kept facets, in counterclockwise order (facet k of the result is the edge
    from vertex k to vertex k+1).
    """
    h = np.asarray(h, dtype=float)
    N = len(h)
    L = facet_lengths(h)
    scale = max(float(np.abs(h).max()), 1e-300)
    keep = np.flatnonzero(L > max(min_facet, 1e-10 * scale))
    if len(keep) < 3:
        raise InfeasibleSupport("support vector describes a degenerate body")
    th = grid_angles(N, offset)[keep]
    n = np.stack([np.cos(th), np.sin(th)], axis=1)
    hk = h[keep]
    # vertex between kept facet k-1 and k
    n0, h0 = np.roll(n, 1, axis=0), np.roll(hk, 1)
    det = n0[:, 0] * n[:, 1] - n0[:, 1] * n[:, 0]
    x = (h0 * n[:, 1] - hk * n0[:, 1]) / det
    y = (n0[:, 0] * hk - n[:, 0] * h0) / det
    V = np.stack([x, y], axis=1)
    dom = make_domain(V)
    # make_domain keeps the counterclockwise order; vertex k starts facet k.
    # Realign in case the constructor rotated the list.
    shift = int(np.argmin(np.hypot(*(dom.vertices - V[0]).T)))
    if dom.n != len(keep):
        # collinear merges can only happen for numerically duplicate facets
        idx = _edge_grid_index(dom, N, offset)
        return dom, idx
    idx = np.roll(keep, -shift)
    return dom, idx


def _edge_grid_index(dom, N, offset):
    ang = np.arctan2(dom.normals[:, 1], dom.normals[:, 0])
    k = np.rint((ang - offset) / (TWO_PI / N)).astype(int) % N
    return k


def support_area(h):
    """Area of the polygon with support vector h (all facets nonnegative)."""
    return 0.5 * float(np.dot(h, facet_lengths(h)))


class Projector:
    """Euclidean projection onto {convexity margins >= 0, lo <= h <= hi}."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        N = len(self.hi)
        self.N = N
        c = np.cos(TWO_PI / N)
        M = -2.0 * c * np.eye(N) + np.roll(np.eye(N), 1, axis=1) + np.roll(np.eye(N), -1, axis=1)
        blocks = [M]
        rhs = [np.zeros(N)]
        fin = np.isfinite(self.lo)
        if fin.any():
            blocks.append(np.eye(N)[fin])
            rhs.append(self.lo[fin])
        blocks.append(-np.eye(N))
        rhs.append(-self.hi)
        self.C = np.ascontiguousarray(np.concatenate(blocks).T)
        self.b = np.concatenate(rhs)
        self.M = M
        self.G = np.eye(N)

    def feasible(self, h, tol=1e-9):
        scale = max(float(np.abs(self.hi).max()), 1.0)
        ok = (convexity_margins(h) >= -tol * scale).all()
        ok &= (h <= self.hi + tol * scale).all()
        fin = np.isfinite(self.lo)
        ok &= (h[fin] >= self.lo[fin] - tol * scale).all()
        return bool(ok)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.feasible(y, 0.0):
            return y.copy()
        x = quadprog.solve_qp(self.G, y, self.C, self.b, 0)[0]
        return self._polish(x)

    def _polish(self, x):
        # quadprog satisfies the constraints up to round-off; clip the bounds
        # and close tiny negative margins by lowering the offending value
        x = np.minimum(x, self.hi)
        fin = np.isfinite(self.lo)
        x[fin] = np.maximum(x[fin], self.lo[fin])
        c = np.cos(TWO_PI / self.N)
        for _ in range(3):
            m = convexity_margins(x)
            bad = m < 0
            if not bad.any():
                break
            x[bad] += m[bad] / (2.0 * c)
            x[fin] = np.maximum(x[fin], self.lo[fin])
        return x


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    h: np.ndarray
    value: float
    functional: float
    area: float
    grad: np.ndarray
    dom: object = field(repr=False, default=None)
    mesh: object = field(repr=False, default=None)
    state: object = field(repr=False, default=None)
    facet_index: np.ndarray = field(repr=False, default=None)


def density(spec, flux):
    """Hadamard density g of the objective along the boundary (nodal)."""
    mu = 0.0 if spec.is_constrained else spec.mu
    if spec.is_eigen:
        return mu - flux**2
    return mu - 0.5 * flux**2


def _solve_state(mesh, spec):
    if spec.is_eigen:
        lam, U = pde.solve_eigen(mesh, check_gap=False)
        return float(lam), U
    U = pde.solve_poisson(mesh, spec.f)
    return float(U.info["energy"]), U


def _facet_integrals(mesh, dom, g, N, offset):
    """Integral of the nodal boundary density g over every edge of dom, by grid index."""
    chain = mesh.boundary_chain
    P = mesh.nodes[chain]
    seg_L = np.hypot(*(np.roll(P, -1, axis=0) - P).T)
    ga, gb = g, np.roll(g, -1)
    seg_int = 0.5 * seg_L * (ga + gb)
    edge = np.cumsum(mesh.corner_mask.astype(int)) - 1
    per_edge = np.bincount(edge, seg_int, minlength=dom.n)
    idx = _edge_grid_index(dom, N, offset)
    out = np.zeros(N)
    np.add.at(out, idx, per_edge)
    return out, idx


def evaluate(h, spec, mesh=None):
    """Objective value and its gradient with respect to the support vector h."""
    h = np.asarray(h, dtype=float)
    N = len(h)
    dom, _ = polygon_from_support(h, spec.offset, MESH_MIN_FACET * spec.h)
    if mesh is None:
        mesh = triangulate(dom, spec.h)
    F, U = _solve_state(mesh, spec)
    A = support_area(h)
    mu = 0.0 if spec.is_constrained else spec.mu
    value = F + mu * A
    g = density(spec, U.boundary_flux)
    grad, idx = _facet_integrals(mesh, dom, g, N, spec.offset)
    # facets dropped for meshing: first-order contribution L_i * g at the
    # nearest boundary node
    L = facet_lengths(h)
    small = np.ones(N, dtype=bool)
    small[idx] = False
    small &= L > 0
    if small.any():
        th = grid_angles(N, spec.offset)[small]
        from .geometry import support_vertices

        Vt = support_vertices(h, spec.offset)[small]
        P = mesh.nodes[mesh.boundary_chain]
        j = np.argmin(((P[None, :, :] - Vt[:, None, :]) ** 2).sum(-1), axis=1)
        grad[small] = L[small] * g[j]
        del th
    return Evaluation(h.copy(), float(value), F, A, grad, dom, mesh, U, idx)


def objective(dom, spec, h=None):
    """E_f + mu|Omega|, lambda_1 + mu|Omega| (penalized) or the bare functional."""
    mesh = triangulate(dom, spec.h)
    F, _ = _solve_state(mesh, spec)
    if spec.is_constrained:
        return F
    return F + spec.mu * area(dom)


def gradient(dom, spec):
    """Derivative of the objective with respect to the support values on the grid.

    Facets of ``dom`` whose normals are not on the grid receive no velocity;
    grid angles without a facet (vertices) have zero derivative.
    """
    mesh = triangulate(dom, spec.h)
    _, U = _solve_state(mesh, spec)
    g = density(spec, U.boundary_flux)
    N = spec.n_angles
    chain = mesh.boundary_chain
    P = mesh.nodes[chain]
    seg_int = 0.5 * np.hypot(*(np.roll(P, -1, axis=0) - P).T) * (g + np.roll(g, -1))
    per_edge = np.bincount(np.cumsum(mesh.corner_mask.astype(int)) - 1, seg_int, minlength=dom.n)
    idx = _edge_grid_index(dom, N, spec.offset)
    ang = np.arctan2(dom.normals[:, 1], dom.normals[:, 0])
    on_grid = np.abs(np.angle(np.exp(1j * (ang - grid_angles(N, spec.offset)[idx])))) < 1e-9
    grad = np.zeros(N)
    np.add.at(grad, idx[on_grid], per_edge[on_grid])
    return grad


def support_displacement(mesh, dom, dh, facet_index, N, offset=0.0):
    """Node displacement of a mesh of ``dom`` induced by support change dh.

    Vertices move so that the supporting lines shift by dh, boundary nodes
    interpolate along their edge, interior nodes follow the discrete harmonic
    extension.  Used for Lagrangian finite differences in h.
    """
    th = grid_angles(N, offset)[facet_index]
    n = np.stack([np.cos(th), np.sin(th)], axis=1)
    dk = np.asarray(dh, dtype=float)[facet_index]
    n0, d0 = np.roll(n, 1, axis=0), np.roll(dk, 1)
    det = n0[:, 0] * n[:, 1] - n0[:, 1] * n[:, 0]
    dvx = (d0 * n[:, 1] - dk * n0[:, 1]) / det
    dvy = (n0[:, 0] * dk - n[:, 0] * d0) / det
    dv = np.stack([dvx, dvy], axis=1)  # displacement of vertex k (start of facet k)
    chain = mesh.boundary_chain
    P = mesh.nodes[chain]
    edge = np.cumsum(mesh.corner_mask.astype(int)) - 1
    A = dom.vertices[edge]
    B = dom.vertices[(edge + 1) % dom.n]
    t = ((P - A) * (B - A)).sum(1) / ((B - A) ** 2).sum(1)
    bdisp = (1.0 - t)[:, None] * dv[edge] + t[:, None] * dv[(edge + 1) % dom.n]
    sysm = pde.FemSystem.of(mesh)
    disp = np.zeros_like(mesh.nodes)
    for c in range(2):
        g = np.zeros(mesh.n_nodes)
        g[chain] = bdisp[:, c]
        disp[:, c] = sysm.dirichlet_solve(np.zeros(mesh.n_nodes), g[sysm.B])[0]
    return disp


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class OptOptions:
    max_iter: int = 200
    tol: float = 1e-3
    armijo: float = 1e-4
    initial_step: float = 0.05
    max_step: float = 0.2
    min_step: float = 1e-5
    min_metric_length: float = 0.25
    stall_window: int = 8
    stall_rtol: float = 1e-7
    snapshot_dir: str | None = None
    verbose: bool = False


@dataclass
class OptResult:
    domain: object
    h: np.ndarray
    value: float
    trace: list
    area_trace: list
    stationarity_trace: list
    active: dict
    iterations: int
    converged: bool
    reason: str
    line_search_failed: bool = False
    noise_floor: float = 0.0
    polygonality: dict = field(default_factory=dict)
    optimality: object = None
    wall_time: float = 0.0
    spec: object = field(default=None, repr=False)
    last_step: float = 0.0

    def to_dict(self):
        d = {
            "vertices": self.domain.vertices.tolist(),
            "h": self.h.tolist(),
            "value": self.value,
            "trace": self.trace,
            "area_trace": self.area_trace,
            "stationarity_trace": self.stationarity_trace,
            "active": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.active.items()},
            "iterations": self.iterations,
            "converged": self.converged,
            "reason": self.reason,
            "line_search_failed": self.line_search_failed,
            "noise_floor": self.noise_floor,
            "polygonality": _plain(self.polygonality),
            "optimality": None if self.optimality is None else _plain(getattr(self.optimality, "to_dict", lambda: self.optimality)()),
            "spec": None if self.spec is None else self.spec.to_dict(),
        }
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _plain(o):
    if isinstance(o, dict):
        return {k: _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return o


def minkowski_midpoint(spec):
    lo, hi = spec.bounds()
    if not np.isfinite(lo).all():
        lo = np.where(np.isfinite(lo), lo, 0.0)
    return 0.5 * (lo + hi)


def _active_sets(h, lo, hi, tol=1e-9):
    scale = max(float(np.abs(hi).max()), 1.0)
    return {
        "inner": np.flatnonzero(np.isfinite(lo) & (h <= lo + tol * scale)),
        "outer": np.flatnonzero(h >= hi - tol * scale),
        "convexity": np.flatnonzero(convexity_margins(h) <= tol * scale),
    }


class _AreaRestorer:
    """h -> P(h + beta L(h)) with beta chosen so that the area equals m0."""

    def __init__(self, proj, m0):
        self.proj = proj
        self.m0 = m0

    def __call__(self, y):
        L = np.maximum(facet_lengths(y), 0.0)
        if L.sum() == 0:
            L = np.ones_like(y)
        L = L / np.abs(L).max()
        scale = max(float(np.abs(self.proj.hi).max()), 1.0)

        def gap(beta):
            return support_area(self.proj(y + beta * L)) - self.m0

        g0 = gap(0.0)
        if abs(g0) <= 1e-13 * self.m0:
            return self.proj(y)
        b = 0.05 * scale * np.sign(-g0)
        while gap(b) * g0 > 0:
            b *= 2.0
            if abs(b) > 1e3 * scale:
                raise InfeasibleInit("cannot restore the prescribed area")
        beta = brentq(gap, 0.0, b, xtol=1e-15 * scale, rtol=4 * np.finfo(float).eps, maxiter=200)
        return self.proj(y + beta * L)


def ascent_direction(grad, h, min_len=0.25):
    """Gradient in the boundary L2 metric: facet integral divided by facet length.

    Facets shorter than ``min_len`` times the mean facet length use that
    length instead, so vanishing facets keep a bounded speed.
    """
    return grad / metric_weights(h, min_len)


def metric_weights(h, min_len=0.25):
    """Facet weights of the boundary L2 metric (lengths floored at ``min_len`` times the mean)."""
    L = facet_lengths(h)
    Lref = min_len * max(float(L.sum()), 1e-300) / len(h)
    return np.maximum(L, Lref)


def area_neutral(d, h, min_len=0.25):
    """Component of d orthogonal, in the facet metric, to the area gradient.

    The first variation of the area along d is sum(L d).  In the metric with
    weights W this is <d, L/W>_W, so removing the multiple of n = L/W keeps
    the direction an ascent direction and area preserving to first order.
    """
    L = facet_lengths(h)
    W = metric_weights(h, min_len)
    n = L / W
    return d - (d @ L) / (n @ L) * n


def _projected_direction(h, d, proj, restore):
    """Projected ascent direction (P(h + tau d) - h) / tau and its sup-norm."""
    tau = 1e-3 / max(float(np.abs(d).max()), 1e-300)
    y = proj(h + tau * d)
    if restore is not None:
        y = restore(y)
    pd = (y - h) / tau
    return float(np.abs(pd).max()), pd


def optimize(spec, init=None, opts=None, resume=None, callback=None):
    """Projected-gradient ascent on the support values.

    ``init`` is a support vector (default: Minkowski midpoint of D1 and D2).
    ``resume`` is a snapshot dict written by a previous run.
    """
    opts = OptOptions() if opts is None else opts
    spec.validate()
    t_start = time.perf_counter()
    N = spec.n_angles
    lo, hi = spec.bounds()
    proj = Projector(lo, hi)
    restore = _AreaRestorer(proj, spec.m0) if spec.is_constrained else None

    if resume is not None:
        h = np.asarray(resume["h"], dtype=float)
        step = float(resume["step"])
        trace = list(resume["trace"])
        area_trace = list(resume["area_trace"])
        stat_trace = list(resume["stationarity_trace"])
        it0 = int(resume["iteration"])
        noise = float(resume["noise_floor"])
        scale0 = float(resume["scale0"])
        best_hist = list(resume.get("best_hist", trace))
        diam = resume.get("diameter")
    else:
        h = minkowski_midpoint(spec) if init is None else np.asarray(init, dtype=float).copy()
        if len(h) != N:
            raise InfeasibleInit(f"init has {len(h)} support values, expected {N}")
        if not proj.feasible(h, 1e-9):
            raise InfeasibleInit("initial support vector violates convexity or inclusion")
        if restore is not None:
            h = restore(h)
        step = None
        trace, area_trace, stat_trace = [], [], []
        it0 = 0
        noise = None
        scale0 = None
        best_hist = []
        diam = None

    ev = evaluate(h, spec)
    if noise is None:
        noise = _noise_floor(h, spec, ev)
    # the step scale is fixed by the starting shape and carried through resumes
    diam = diameter(ev.dom) if diam is None else float(diam)
    if not trace:
        trace.append(ev.value)
        area_trace.append(ev.area)
    reason = "max_iter"
    converged = False
    ls_failed = False
    it = it0
    while it < opts.max_iter:
        d = ascent_direction(ev.grad, h, opts.min_metric_length)
        if spec.is_constrained:
            d = area_neutral(d, h, opts.min_metric_length)
        stat, pd = _projected_direction(h, d, proj, restore)
        if scale0 is None:
            scale0 = density_scale(spec, ev)
        stat_trace.append(stat)
        if stat <= opts.tol * scale0:
            converged, reason = True, "stationary"
            break
        if len(trace) > opts.stall_window:
            recent = trace[-opts.stall_window - 1 :]
            if max(recent) - recent[0] <= opts.stall_rtol * max(abs(recent[0]), 1.0):
                converged, reason = True, "stalled"
                break
        # the step is controlled through the largest support displacement
        if step is None:
            step = opts.initial_step * diam
        disp = min(2.0 * step, opts.max_step * diam)
        accepted = None
        while disp >= opts.min_step * diam:
            alpha = disp / max(stat, 1e-300)
            y = proj(h + alpha * d)
            if restore is not None:
                y = restore(y)
            moved = float(np.abs(y - h).max())
            if moved <= 1e-14 * diam:
                break
            cand = evaluate(y, spec)
            pred = float(ev.grad @ (y - h))
            if cand.value >= ev.value + opts.armijo * pred - noise and cand.value >= ev.value - noise:
                accepted = cand
                disp = moved
                break
            disp *= 0.5
        it += 1
        if accepted is None:
            ls_failed = True
            reason = "line_search"
            converged = stat <= 10.0 * opts.tol * scale0
            break
        step = disp
        h = accepted.h
        ev = accepted
        trace.append(ev.value)
        area_trace.append(ev.area)
        if opts.verbose:
            print(f"iter {it:4d}  J={ev.value:.10g}  area={ev.area:.6g}  stat={stat:.3e}  step={disp:.3e}")
        if callback is not None:
            callback(it, ev)
        if opts.snapshot_dir is not None:
            snap = {
                "iteration": it,
                "h": h.tolist(),
                "step": step,
                "trace": trace,
                "area_trace": area_trace,
                "stationarity_trace": stat_trace,
                "noise_floor": noise,
                "scale0": scale0,
                "diameter": diam,
                "spec": spec.to_dict(),
            }
            write_snapshot(opts.snapshot_dir, it, snap, ev.dom, spec)
    act = _active_sets(h, lo, hi)
    res = OptResult(
        ev.dom,
        h,
        ev.value,
        trace,
        area_trace,
        stat_trace,
        act,
        it,
        converged,
        reason,
        ls_failed,
        noise,
        spec=spec,
        last_step=step or 0.0,
    )
    res.polygonality = polygonality_report(ev.dom, spec.pair, n_angles=N)
    res.wall_time = time.perf_counter() - t_start
    res._evaluation = ev
    return res


def density_scale(spec, ev):
    """Scale of the Hadamard density used by the stationarity test.

    Penalized variants use mu; constrained variants (or mu = 0) the boundary
    mean of c q^2 with c = 1/2 (energy) or 1 (eigen), which is the multiplier
    at a stationary point.
    """
    if not spec.is_constrained and spec.mu > 0:
        return float(spec.mu)
    c = 1.0 if spec.is_eigen else 0.5
    q2 = c * ev.state.boundary_flux**2
    return max(float(q2.mean()), 1e-300)


def _noise_floor(h, spec, ev):
    """Objective change under a slightly different mesh of the same domain."""
    try:
        alt = triangulate(ev.dom, spec.h * 0.97)
        F, _ = _solve_state(alt, spec)
    except Exception:
        return 0.0
    return float(abs(F - ev.functional))


def write_snapshot(directory, it, snap, dom, spec):
    import os

    from .io import shape_svg

    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, f"snapshot_{it:04d}.json"), "w") as fh:
        json.dump(snap, fh, sort_keys=True)
    with open(os.path.join(directory, f"snapshot_{it:04d}.svg"), "w") as fh:
        fh.write(shape_svg(dom, spec.pair))


def load_snapshot(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# polygonality
# ---------------------------------------------------------------------------


def _line_fit_deviation(P):
    c = P.mean(axis=0)
    X = P - c
    if len(P) <= 2:
        return 0.0
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    nrm = vt[-1]
    return float(np.abs(X @ nrm).max())


def free_edge_mask(dom, pair, tol=1e-7):
    """Edges of ``dom`` whose relative interior touches neither D1 nor D2.

    An edge is in contact with D1 when the support value of D1 in the edge
    normal reaches the edge line, and in contact with D2 when the edge line is
    a supporting line of D2 (the edge then lies on the boundary of D2).  Edges
    meeting the boundary of D2 only at their endpoints are free.  Tolerance is
    ``tol * diam``.
    """
    from .geometry import support_function

    t = tol * diameter(dom)
    nrm = dom.normals
    off = (dom.vertices * nrm).sum(1)
    ang = np.arctan2(nrm[:, 1], nrm[:, 0])
    free = np.ones(dom.n, dtype=bool)
    if pair.D1 is not None:
        free &= support_function(pair.D1, ang, center=np.zeros(2)) < off - t
    if pair.D2 is not None:
        free &= off < support_function(pair.D2, ang, center=np.zeros(2)) - t
    return free


def polygonality_report(dom, pair, n_angles=None, drop_tol=1e-3, dev_tol=1e-3, ang_tol=None, contact_tol=1e-7):
    """Segments of the free boundary after clustering consecutive edge normals.

    Edges shorter than ``drop_tol * diam`` are merged into their neighbours;
    consecutive free edges whose normals differ by at most ``ang_tol``
    (default half the grid spacing, or 1e-6 without a grid) form one segment.
    """
    diam = diameter(dom)
    if ang_tol is None:
        ang_tol = 0.5 * TWO_PI / n_angles if n_angles else 1e-6
    L = dom.edge_lengths
    free = free_edge_mask(dom, pair, contact_tol)
    nrm = dom.normals
    ang = np.arctan2(nrm[:, 1], nrm[:, 0])
    n = dom.n
    long_ = L > drop_tol * diam
    # walk the boundary starting at a non-free (or any long) edge
    segments = []
    cur = None
    order = np.roll(np.arange(n), -int(np.argmin(free)) if not free.all() else 0)
    for k in order:
        if not long_[k]:
            continue
        if not free[k]:
            if cur is not None:
                segments.append(cur)
                cur = None
            continue
        if cur is not None and abs(np.angle(np.exp(1j * (ang[k] - cur["angle"])))) <= ang_tol:
            cur["edges"].append(int(k))
            cur["length"] += float(L[k])
        else:
            if cur is not None:
                segments.append(cur)
            cur = {"edges": [int(k)], "angle": float(ang[k]), "length": float(L[k])}
    if cur is not None:
        # close the cycle when everything is free
        if segments and free.all() and abs(np.angle(np.exp(1j * (segments[0]["angle"] - cur["angle"])))) <= ang_tol:
            segments[0]["edges"] = cur["edges"] + segments[0]["edges"]
            segments[0]["length"] += cur["length"]
        else:
            segments.append(cur)
    devs = []
    for s in segments:
        ks = np.array(s["edges"])
        P = np.concatenate([dom.vertices[ks], dom.vertices[(ks + 1) % n]])
        s["deviation"] = _line_fit_deviation(P)
        devs.append(s["deviation"])
    return {
        "segment_count": len(segments),
        "free_edge_count": int((free & long_).sum()),
        "edge_count": int(n),
        "segment_lengths": [s["length"] for s in segments],
        "segment_angles": [s["angle"] for s in segments],
        "max_deviation": float(max(devs) if devs else 0.0),
        "diameter": float(diam),
        "free_edges": [int(k) for k in np.flatnonzero(free & long_)],
        "segments": segments,
    }
