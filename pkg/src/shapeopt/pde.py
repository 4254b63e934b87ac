"""P1 finite elements for the Poisson problem and the first Dirichlet eigenpair.

Besides the nodal solution, every :class:`FemField` carries a recovered
gradient and Hessian (Zienkiewicz-Zhu patch recovery) and, for states, the
variationally consistent boundary flux obtained from the weak residual.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import ConvexHull, cKDTree

from . import kernels
from .errors import EmptyLevelSet, NonSimpleEigenvalue, SolverFailure
from .geometry import make_domain

# symmetric degree-4 rule on the reference triangle (barycentric coords, weights sum to 1)
_D4_A = (0.445948490915965, 0.091576213509771)
_D4_W = (0.223381589678011, 0.109951743655322)


def _dunavant4():
    pts, wts = [], []
    for a, w in zip(_D4_A, _D4_W):
        b = 1.0 - 2.0 * a
        for p in ((a, a, b), (a, b, a), (b, a, a)):
            pts.append(p)
            wts.append(w)
    return np.array(pts), np.array(wts)


QUAD_BARY, QUAD_W = _dunavant4()
# edge-midpoint rule, exact for quadratics
MID_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
MID_W = np.full(3, 1.0 / 3.0)
# 3-point Gauss-Legendre on [0, 1]
GL_T = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
GL_W = np.array([5.0, 8.0, 5.0]) / 18.0


@dataclass(frozen=True)
class SourceSpec:
    """Right-hand side f: ``constant`` (value ``c``) or ``concave_quadratic``
    a - b |x - x0|^2 with b >= 0."""

    kind: str = "constant"
    c: float = 1.0
    a: float = 0.0
    b: float = 0.0
    x0: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("constant", "concave_quadratic"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "constant" and self.c < 0:
            raise ValueError("constant source must be nonnegative")
        if self.kind == "concave_quadratic" and self.b < 0:
            raise ValueError("concave_quadratic needs b >= 0")

    @classmethod
    def constant(cls, c=1.0):
        return cls("constant", c=float(c))

    @classmethod
    def concave_quadratic(cls, a, b, x0=(0.0, 0.0)):
        return cls("concave_quadratic", a=float(a), b=float(b), x0=tuple(map(float, x0)))

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        if self.kind == "constant":
            return np.full(len(pts), self.c)
        d = pts - np.asarray(self.x0)
        return self.a - self.b * (d**2).sum(-1)

    def scaled(self, k):
        if self.kind == "constant":
            return SourceSpec.constant(self.c * k)
        return SourceSpec.concave_quadratic(self.a * k, self.b * k, self.x0)

    @property
    def is_zero(self):
        return self.kind == "constant" and self.c == 0.0

    def check_positive(self, pts):
        """Raise ValueError unless f > 0 at every given point."""
        v = self(pts)
        if not (v > 0).all():
            raise ValueError(f"source not positive (min {v.min():.3g})")

    def to_dict(self):
        return {"kind": self.kind, "c": self.c, "a": self.a, "b": self.b, "x0": list(self.x0)}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "constant"), d.get("c", 1.0), d.get("a", 0.0), d.get("b", 0.0), tuple(d.get("x0", (0.0, 0.0))))


class FemSystem:
    """Assembled matrices of a mesh, cached on the mesh object."""

    def __init__(self, mesh):
        self.mesh = mesh
        n = mesh.n_nodes
        rows, cols, kv, mv, area, grad = kernels.assemble_p1(mesh.nodes, mesh.triangles)
        if (area <= 0).any():
            raise SolverFailure("mesh has non-positive triangle areas", {"min_area": float(area.min())})
        self.K = sp.csr_matrix((kv, (rows, cols)), shape=(n, n))
        self.M = sp.csr_matrix((mv, (rows, cols)), shape=(n, n))
        self.area = area
        self.grad = grad
        self.I = mesh.interior
        self.B = mesh.boundary_chain
        self.K_II = self.K[self.I][:, self.I].tocsc()
        self.M_II = self.M[self.I][:, self.I].tocsc()
        self._lu = None
        self._mb_lu = None

    @classmethod
    def of(cls, mesh):
        if "system" not in mesh._cache:
            mesh._cache["system"] = cls(mesh)
        return mesh._cache["system"]

    @property
    def lu(self):
        if self._lu is None:
            self._lu = spla.splu(self.K_II)
        return self._lu

    def load(self, f):
        """Load vector F_i = int f phi_i."""
        m = self.mesh
        n = m.n_nodes
        if f.kind == "constant":
            return np.bincount(m.triangles.ravel(), np.repeat(self.area * f.c / 3.0, 3), minlength=n)
        P = m.nodes[m.triangles]
        xq = np.einsum("qi,eik->eqk", QUAD_BARY, P)
        fq = f(xq.reshape(-1, 2)).reshape(xq.shape[:2])
        loc = self.area[:, None] * np.einsum("q,eq,qi->ei", QUAD_W, fq, QUAD_BARY)
        return np.bincount(m.triangles.ravel(), loc.ravel(), minlength=n)

    def boundary_mass(self):
        """Consistent P1 mass matrix of the (closed) boundary chain."""
        m = self.mesh
        b = m.nodes[m.boundary_chain]
        L = np.hypot(*(np.roll(b, -1, axis=0) - b).T)
        nb = len(b)
        j = np.arange(nb)
        jn = (j + 1) % nb
        rows = np.concatenate([j, jn, j, jn])
        cols = np.concatenate([j, jn, jn, j])
        vals = np.concatenate([L / 3, L / 3, L / 6, L / 6])
        return sp.csr_matrix((vals, (rows, cols)), shape=(nb, nb))

    def solve_boundary_mass(self, r):
        if self._mb_lu is None:
            self._mb_lu = spla.splu(self.boundary_mass().tocsc())
        return self._mb_lu.solve(r)

    def dirichlet_solve(self, F, g=None):
        """Solve K u = F on interior nodes with u = g on the boundary chain."""
        n = self.mesh.n_nodes
        u = np.zeros(n)
        rhs = F[self.I].copy()
        if g is not None:
            u[self.B] = g
            rhs -= self.K[self.I][:, self.B] @ g
        if np.any(rhs != 0):
            u[self.I] = self.lu.solve(rhs)
            res = np.linalg.norm(self.K_II @ u[self.I] - rhs) / np.linalg.norm(rhs)
        else:
            res = 0.0
        if not np.isfinite(res) or res > 1e-10:
            raise SolverFailure(f"linear solve residual {res:.3g}", {"residual": res, "n": n})
        return u, res

    def elem_gradient(self, u):
        return np.einsum("eik,ei->ek", self.grad, u[self.mesh.triangles])

    def flux(self, u, F):
        """Boundary flux q with M_B q = (K u - F)_B."""
        r = self.K @ u - F
        return self.solve_boundary_mass(r[self.B])


def _patches(mesh):
    """Node-to-element incidence patches, 1-ring and 2-ring (CSR pairs)."""
    if "patches" in mesh._cache:
        return mesh._cache["patches"]
    n, m = mesh.n_nodes, mesh.n_triangles
    A = sp.csr_matrix((np.ones(3 * m), (mesh.triangles.ravel(), np.repeat(np.arange(m), 3))), shape=(n, m))
    A.data[:] = 1.0
    R2 = ((A @ A.T) @ A).tocsr()
    R2.data[:] = 1.0
    A.sort_indices()
    R2.sort_indices()
    counts = np.diff(A.indptr)
    use2 = mesh.is_boundary | (counts < 4)
    R = sp.diags((~use2).astype(float)) @ A + sp.diags(use2.astype(float)) @ R2
    R = R.tocsr()
    R.eliminate_zeros()
    R.sort_indices()
    out = (R.indptr.astype(np.int64), R.indices.astype(np.int64), R2.indptr.astype(np.int64), R2.indices.astype(np.int64))
    mesh._cache["patches"] = out
    return out


def recover(mesh, elem_values):
    """Zienkiewicz-Zhu recovery of element-constant data to nodal values.

    Returns (nodal values, relative fit residual per node).
    """
    ptr, idx, ptr2, idx2 = _patches(mesh)
    if "centroids" not in mesh._cache:
        mesh._cache["centroids"] = mesh.nodes[mesh.triangles].mean(axis=1)
    cen = mesh._cache["centroids"]
    vals = np.ascontiguousarray(elem_values.reshape(len(cen), -1))
    out, res, rc = kernels.patch_fit(mesh.nodes, cen, vals, ptr, idx)
    bad = rc < 1e-6
    if bad.any():
        # ill-conditioned patches: refit on the 2-ring
        out2, res2, _ = kernels.patch_fit(mesh.nodes, cen, vals, ptr2, idx2)
        out[bad] = out2[bad]
        res[bad] = res2[bad]
    return out.reshape((mesh.n_nodes,) + elem_values.shape[1:]), res


@dataclass(frozen=True, eq=False)
class FemField:
    """Scalar P1 field with recovered derivatives and boundary flux.

    ``boundary_flux`` is ordered like ``mesh.boundary_chain``; it is ``None``
    for fields that are not states (e.g. harmonic extensions).
    """

    mesh: object
    nodal_values: np.ndarray
    recovered_gradient: np.ndarray
    recovered_hessian: np.ndarray
    boundary_flux: np.ndarray | None
    kind: str = "poisson"
    info: dict = field(default_factory=dict)

    @property
    def system(self):
        return FemSystem.of(self.mesh)

    @property
    def max_value(self):
        return float(self.nodal_values.max())

    def elem_gradient(self):
        return self.system.elem_gradient(self.nodal_values)

    def dirichlet_integral(self):
        u = self.nodal_values
        return float(u @ (self.system.K @ u))

    def l2_norm(self):
        u = self.nodal_values
        return float(np.sqrt(u @ (self.system.M @ u)))

    def interpolate(self, pts, which="value"):
        """Evaluate the P1 interpolant (or recovered gradient) at points."""
        tri, bary = locate(self.mesh, pts)
        data = {"value": self.nodal_values, "gradient": self.recovered_gradient}[which]
        return np.einsum("pi,pi...->p...", bary, data[self.mesh.triangles[tri]])


def make_field(mesh, u, flux=None, kind="poisson", info=None, hessian=True, boundary_source=None):
    """Wrap nodal values into a :class:`FemField` with recovered derivatives.

    For states (``flux`` given) the boundary gradient and Hessian are imposed
    from the Dirichlet condition where the boundary is flat: grad U = q nu,
    U_tt = 0, U_tn = dq/ds and U_nn = -f (``boundary_source`` holds f at the
    chain nodes), and the interior Hessian is recovered from the corrected
    gradient.
    """
    sysm = FemSystem.of(mesh)
    g, gres = recover(mesh, sysm.elem_gradient(u))
    flat = None
    if flux is not None:
        nrm, tan, flat = _boundary_frames(mesh)
        b = mesh.boundary_chain
        g[b[flat]] = flux[flat, None] * nrm[flat]
        g[b[~flat]] = 0.0
    if hessian:
        eg = np.einsum("eik,eij->ejk", sysm.grad, g[mesh.triangles])  # (m, comp j, dir k)
        H, hres = recover(mesh, eg)
        H = 0.5 * (H + np.transpose(H, (0, 2, 1)))
        if flat is not None:
            fb = np.zeros(len(b)) if boundary_source is None else boundary_source
            s = mesh.boundary_s
            per = s[-1] + np.hypot(*(mesh.nodes[b[0]] - mesh.nodes[b[-1]]))
            sp_ = np.roll(s, -1) + np.where(np.arange(len(s)) == len(s) - 1, per, 0.0)
            sm_ = np.roll(s, 1) - np.where(np.arange(len(s)) == 0, per, 0.0)
            dq = (np.roll(flux, -1) - np.roll(flux, 1)) / (sp_ - sm_)
            kq = (_boundary_curvature(mesh, flat) * flux)[flat]
            t, n = tan[flat], nrm[flat]
            tt = t[:, :, None] * t[:, None, :]
            nn = n[:, :, None] * n[:, None, :]
            tn = t[:, :, None] * n[:, None, :] + n[:, :, None] * t[:, None, :]
            # U_tt = kappa q from U = 0 along the boundary, U_nn from the PDE
            Hb = kq[:, None, None] * tt + dq[flat, None, None] * tn - (fb[flat] + kq)[:, None, None] * nn
            H[b[flat]] = Hb
    else:
        H, hres = np.zeros((mesh.n_nodes, 2, 2)), np.zeros(mesh.n_nodes)
    info = dict(info or {})
    info["recovery_residual_grad"] = gres
    info["recovery_residual_hess"] = hres
    return FemField(mesh, u, g, H, flux, kind, info)


FLAT_TURN_TOL = 0.2


def _boundary_curvature(mesh, flat):
    """Curvature at chain nodes: turning angles of flat nodes averaged over an
    arclength window of two median segment lengths on each side."""
    P = mesh.nodes[mesh.boundary_chain]
    d = np.roll(P, -1, axis=0) - P
    L = np.hypot(d[:, 0], d[:, 1])
    t = d / L[:, None]
    tp = np.roll(t, 1, axis=0)
    turn = np.arctan2(tp[:, 0] * t[:, 1] - tp[:, 1] * t[:, 0], (tp * t).sum(1))
    turn = np.where(flat, turn, 0.0)
    per = L.sum()
    s = np.concatenate([[0.0], np.cumsum(L)[:-1]])
    r = 2.0 * np.median(L)
    # periodic window sums via cumulative sums on a tripled copy
    s3 = np.concatenate([s - per, s, s + per])
    c3 = np.concatenate([[0.0], np.cumsum(np.tile(turn, 3))])
    lo = np.searchsorted(s3, s - r, side="left")
    hi = np.searchsorted(s3, s + r, side="right")
    return (c3[hi] - c3[lo]) / (2.0 * r)


def _boundary_frames(mesh):
    """Bisector normals/tangents at chain nodes and a mask of nodes where the
    boundary turns by less than FLAT_TURN_TOL (treated as flat)."""
    P = mesh.nodes[mesh.boundary_chain]
    d = np.roll(P, -1, axis=0) - P
    t = d / np.hypot(d[:, 0], d[:, 1])[:, None]
    tp = np.roll(t, 1, axis=0)
    turn = np.arctan2(tp[:, 0] * t[:, 1] - tp[:, 1] * t[:, 0], (tp * t).sum(1))
    tb = t + tp
    tb /= np.hypot(tb[:, 0], tb[:, 1])[:, None]
    nb = np.stack([tb[:, 1], -tb[:, 0]], axis=1)
    return nb, tb, np.abs(turn) < FLAT_TURN_TOL


def solve_poisson(mesh, f=None):
    """P1 Galerkin solution of -Lap U = f with U = 0 on the boundary."""
    f = SourceSpec.constant(1.0) if f is None else f
    sysm = FemSystem.of(mesh)
    F = sysm.load(f)
    u, res = sysm.dirichlet_solve(F)
    q = sysm.flux(u, F)
    energy = -0.5 * float(F @ u)
    audit = 0.5 * float(u @ (sysm.K @ u)) - float(F @ u)
    info = {"source": f, "load": F, "residual": res, "energy": energy, "energy_audit": audit}
    return make_field(mesh, u, q, "poisson", info, boundary_source=f(mesh.nodes[mesh.boundary_chain]))


def solve_harmonic(mesh, g):
    """Harmonic function with Dirichlet data ``g`` on the boundary chain."""
    sysm = FemSystem.of(mesh)
    u, res = sysm.dirichlet_solve(np.zeros(mesh.n_nodes), g)
    return make_field(mesh, u, None, "harmonic", {"residual": res}, hessian=False)


def solve_eigen(mesh, tol=1e-8, maxiter=500, check_gap=True):
    """First Dirichlet eigenpair by inverse iteration (shift 0, sparse LU).

    Returns (lambda_1, field) with the field L2-normalized and positive.
    """
    sysm = FemSystem.of(mesh)
    K, M = sysm.K_II, sysm.M_II
    lu = sysm.lu
    x = np.ones(K.shape[0])
    lam = np.inf
    hist = []
    for it in range(1, maxiter + 1):
        y = lu.solve(M @ x)
        My = M @ y
        ny = np.sqrt(y @ My)
        y /= ny
        My /= ny
        Ky = K @ y
        lam = float(y @ Ky)
        res = np.linalg.norm(Ky - lam * My) / (lam * np.linalg.norm(My))
        hist.append(res)
        x = y
        if res < tol:
            break
    else:
        raise SolverFailure(f"inverse iteration did not converge (residual {res:.3g})", {"residuals": hist})
    u = np.zeros(mesh.n_nodes)
    u[sysm.I] = x * (1.0 if x.sum() > 0 else -1.0)
    info = {"lambda": lam, "iterations": it, "rayleigh_residual": hist[-1], "positive": bool((u[sysm.I] > 0).all())}
    if check_gap:
        lam2 = _second_eigenvalue(sysm, x)
        info["lambda2"] = lam2
        if lam2 - lam < 1e-6 * lam:
            warnings.warn(f"spectral gap {lam2 - lam:.3g} below threshold", NonSimpleEigenvalue)
    F = lam * (sysm.M @ u)
    q = sysm.flux(u, F)
    info["load"] = F
    return lam, make_field(mesh, u, q, "eigen", info)


def _second_eigenvalue(sysm, x1):
    lu = sysm.lu
    n = sysm.K_II.shape[0]
    op = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    try:
        vals = spla.eigsh(sysm.K_II, k=2, M=sysm.M_II, sigma=0.0, OPinv=op, which="LM", return_eigenvectors=False)
        return float(np.sort(vals)[1])
    except Exception:  # pragma: no cover - ARPACK trouble on tiny meshes
        return np.inf


def boundary_flux(field):
    """Per-boundary-node outward normal derivative (ordered like the chain)."""
    if field.boundary_flux is None:
        raise ValueError("field has no flux (not a state)")
    return field.boundary_flux


def dirichlet_energy(field, f=None):
    """-1/2 int f U at the solution; the audit value is in ``field.info``."""
    if f is not None and f != field.info.get("source"):
        F = field.system.load(f)
        return -0.5 * float(F @ field.nodal_values)
    return field.info["energy"]


def energy_audit(field):
    e = field.info["energy"]
    a = field.info["energy_audit"]
    return {"energy": e, "audit": a, "rel_diff": abs(e - a) / max(abs(e), 1e-300)}


def locate(mesh, pts, k=16):
    """Containing triangle and barycentric coordinates of each point.

    Points outside the mesh get the nearest candidate triangle with clipped
    barycentric coordinates.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if "ctree" not in mesh._cache:
        mesh._cache["ctree"] = cKDTree(mesh.nodes[mesh.triangles].mean(axis=1))
    tree = mesh._cache["ctree"]
    k = min(k, mesh.n_triangles)
    _, cand = tree.query(pts, k=k)
    cand = cand.reshape(len(pts), k)
    P = mesh.nodes[mesh.triangles[cand]]  # (p, k, 3, 2)
    v0 = P[..., 1, :] - P[..., 0, :]
    v1 = P[..., 2, :] - P[..., 0, :]
    w = pts[:, None, :] - P[..., 0, :]
    det = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
    b1 = (w[..., 0] * v1[..., 1] - w[..., 1] * v1[..., 0]) / det
    b2 = (v0[..., 0] * w[..., 1] - v0[..., 1] * w[..., 0]) / det
    b0 = 1.0 - b1 - b2
    B = np.stack([b0, b1, b2], axis=-1)
    score = B.min(axis=-1)
    j = np.argmax(score, axis=1)
    r = np.arange(len(pts))
    bary = np.clip(B[r, j], 0.0, None)
    bary /= bary.sum(1, keepdims=True)
    return cand[r, j], bary


def level_set_domain(field, eps):
    """Convex polygon approximating {U > eps} (marching triangles + hull)."""
    if eps >= field.max_value:
        raise EmptyLevelSet(f"eps={eps:.3g} >= max U={field.max_value:.3g}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    seg = kernels.contour_segments(field.mesh.nodes, field.mesh.triangles, field.nodal_values, float(eps))
    pts = seg.reshape(-1, 2)
    if len(pts) < 3:
        raise EmptyLevelSet("contour has fewer than 3 points")
    try:
        hull = ConvexHull(pts)
    except Exception as exc:
        raise EmptyLevelSet(f"level set too small to resolve: {exc}") from exc
    return make_domain(pts[hull.vertices])


def p1_error_l2(mesh, u, exact):
    """L2 error of a P1 field against a callable, degree-4 quadrature."""
    sysm = FemSystem.of(mesh)
    P = mesh.nodes[mesh.triangles]
    xq = np.einsum("qi,eik->eqk", QUAD_BARY, P)
    uq = np.einsum("qi,ei->eq", QUAD_BARY, u[mesh.triangles])
    eq = exact(xq.reshape(-1, 2)).reshape(uq.shape)
    return float(np.sqrt((sysm.area[:, None] * QUAD_W[None] * (uq - eq) ** 2).sum()))
