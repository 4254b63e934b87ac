"""Pure numpy versions of the hot loops.

Used when the compiled extension is not available, and as the reference the
compiled versions are tested against.
"""
import numpy as np

_MLOC = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def p1_element_data(nodes, tris):
    """Signed areas and barycentric gradients of every triangle.

    Returns ``area`` (m,) and ``grad`` (m, 3, 2) where ``grad[e, i]`` is the
    constant gradient of the i-th local hat function on element e.
    """
    P = nodes[tris]
    x, y = P[..., 0], P[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    grad = np.empty(tris.shape + (2,))
    grad[:, 0, 0] = y[:, 1] - y[:, 2]
    grad[:, 1, 0] = y[:, 2] - y[:, 0]
    grad[:, 2, 0] = y[:, 0] - y[:, 1]
    grad[:, 0, 1] = x[:, 2] - x[:, 1]
    grad[:, 1, 1] = x[:, 0] - x[:, 2]
    grad[:, 2, 1] = x[:, 1] - x[:, 0]
    grad /= det[:, None, None]
    return 0.5 * det, grad


def assemble_p1(nodes, tris):
    """COO triplets of the P1 stiffness and consistent mass matrices.

    Returns rows, cols, kvals, mvals (each of length 9*m), area and grad.
    """
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.int64)
    area, grad = p1_element_data(nodes, tris)
    kloc = area[:, None, None] * np.einsum("eik,ejk->eij", grad, grad)
    mloc = area[:, None, None] * _MLOC[None]
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    return rows, cols, kloc.ravel(), mloc.ravel(), area, grad


def patch_fit(nodes, centroids, values, ptr, idx):
    """Least-squares linear fit of element samples over each node patch.

    For node i the samples ``values[idx[ptr[i]:ptr[i+1]]]`` located at the
    corresponding centroids are fitted by a + b (x - x_i) + c (y - y_i); the
    fitted value a is returned per node and component, together with the
    relative rms fit residual and the reciprocal condition number of the
    normal matrix.
    """
    n = len(ptr) - 1
    counts = np.diff(ptr)
    owner = np.repeat(np.arange(n), counts)
    dx = centroids[idx, 0] - nodes[owner, 0]
    dy = centroids[idx, 1] - nodes[owner, 1]
    # scale offsets per patch for conditioning
    s = np.sqrt(np.bincount(owner, dx * dx + dy * dy, minlength=n) / np.maximum(counts, 1))
    s[s == 0] = 1.0
    dx = dx / s[owner]
    dy = dy / s[owner]
    basis = np.stack([np.ones_like(dx), dx, dy], axis=1)
    A = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            A[:, a, b] = np.bincount(owner, basis[:, a] * basis[:, b], minlength=n)
            A[:, b, a] = A[:, a, b]
    vals = values[idx]
    k = values.shape[1]
    B = np.zeros((n, 3, k))
    for a in range(3):
        for c in range(k):
            B[:, a, c] = np.bincount(owner, basis[:, a] * vals[:, c], minlength=n)
    ev = np.linalg.eigvalsh(A)
    rcond = ev[:, 0] / np.maximum(ev[:, 2], 1e-300)
    good = rcond > 1e-10
    coef = np.zeros((n, 3, k))
    coef[good] = np.linalg.solve(A[good], B[good])
    # rank-deficient patches fall back to the plain average
    coef[~good, 0, :] = B[~good, 0, :] / np.maximum(A[~good, 0, 0], 1.0)[:, None]
    fit = np.einsum("pa,pak->pk", basis, coef[owner])
    res2 = np.zeros((n, k))
    sc2 = np.zeros((n, k))
    for c in range(k):
        res2[:, c] = np.bincount(owner, (fit[:, c] - vals[:, c]) ** 2, minlength=n)
        sc2[:, c] = np.bincount(owner, vals[:, c] ** 2, minlength=n)
    resid = np.sqrt(res2.sum(1) / np.maximum(sc2.sum(1), 1e-300))
    return coef[:, 0, :], resid, rcond


def contour_segments(nodes, tris, values, level):
    """Marching triangles: the segment where each element crosses ``level``.

    Returns an (s, 2, 2) array of segment endpoints.
    """
    v = values[tris] - level
    above = v > 0
    cnt = above.sum(axis=1)
    cut = (cnt == 1) | (cnt == 2)
    t = tris[cut]
    v = v[cut]
    above = above[cut]
    # lone vertex: the one whose side differs from the other two
    lone = np.where(above.sum(1) == 1, np.argmax(above, axis=1), np.argmin(above, axis=1))
    r = np.arange(len(t))
    i0 = t[r, lone]
    i1 = t[r, (lone + 1) % 3]
    i2 = t[r, (lone + 2) % 3]
    v0 = v[r, lone]
    v1 = v[r, (lone + 1) % 3]
    v2 = v[r, (lone + 2) % 3]
    a = v0 / (v0 - v1)
    b = v0 / (v0 - v2)
    p = nodes[i0] + a[:, None] * (nodes[i1] - nodes[i0])
    q = nodes[i0] + b[:, None] * (nodes[i2] - nodes[i0])
    return np.stack([p, q], axis=1)
