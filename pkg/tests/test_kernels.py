import os
import subprocess
import sys

import numpy as np
import pytest
import scipy.sparse as sp

from shapeopt import _kernels_py as ref
from shapeopt import kernels
from shapeopt.geometry import regular_polygon
from shapeopt.meshing import triangulate


@pytest.fixture(scope="module")
def mesh():
    return triangulate(regular_polygon(64, 1.0), 0.08)


def _patches(m):
    n = m.n_nodes
    owner = m.triangles.ravel()
    elem = np.repeat(np.arange(len(m.triangles)), 3)
    order = np.argsort(owner, kind="stable")
    ptr = np.concatenate([[0], np.cumsum(np.bincount(owner, minlength=n))])
    return ptr, elem[order]


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


def test_assembly_invariants(mesh):
    rows, cols, kv, mv, area, grad = kernels.assemble_p1(mesh.nodes, mesh.triangles)
    n = mesh.n_nodes
    K = sp.coo_matrix((kv, (rows, cols)), shape=(n, n)).tocsr()
    M = sp.coo_matrix((mv, (rows, cols)), shape=(n, n)).tocsr()
    # constants are in the kernel of K; the mass matrix integrates 1 to the area
    assert np.abs(K @ np.ones(n)).max() < 1e-12
    assert np.ones(n) @ M @ np.ones(n) == pytest.approx(area.sum(), rel=1e-13)
    assert abs(K - K.T).max() < 1e-14
    # int |grad x|^2 = area
    x = mesh.nodes[:, 0]
    assert x @ K @ x == pytest.approx(area.sum(), rel=1e-12)


def test_patch_fit_reproduces_linear_data(mesh):
    cen = mesh.nodes[mesh.triangles].mean(axis=1)
    vals = np.stack([1.0 + 2.0 * cen[:, 0] - cen[:, 1], 0.5 * cen[:, 1]], axis=1)
    ptr, idx = _patches(mesh)
    out, res, rc = kernels.patch_fit(mesh.nodes, cen, vals, ptr, idx)
    good = rc > 1e-10
    exact = np.stack([1.0 + 2.0 * mesh.nodes[:, 0] - mesh.nodes[:, 1], 0.5 * mesh.nodes[:, 1]], axis=1)
    np.testing.assert_allclose(out[good], exact[good], atol=1e-11)
    assert res[good].max() < 1e-10


def test_contour_of_linear_field(mesh):
    segs = kernels.contour_segments(mesh.nodes, mesh.triangles, mesh.nodes[:, 0], 0.3)
    assert len(segs) > 0
    np.testing.assert_allclose(segs[..., 0], 0.3, atol=1e-14)
    L = np.hypot(*(segs[:, 1] - segs[:, 0]).T).sum()
    chord = 2 * np.sqrt(1 - 0.3**2)
    assert L == pytest.approx(chord, rel=0.01)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")
def test_compiled_matches_python(mesh):
    a = kernels.assemble_p1(mesh.nodes, mesh.triangles)
    b = ref.assemble_p1(mesh.nodes, mesh.triangles)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-13)
    rng = np.random.default_rng(3)
    cen = mesh.nodes[mesh.triangles].mean(axis=1)
    vals = rng.normal(size=(len(cen), 2))
    ptr, idx = _patches(mesh)
    for x, y in zip(kernels.patch_fit(mesh.nodes, cen, vals, ptr, idx), ref.patch_fit(mesh.nodes, cen, vals, ptr, idx)):
        np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-12)
    u = rng.normal(size=mesh.n_nodes)
    s1 = kernels.contour_segments(mesh.nodes, mesh.triangles, u, 0.1)
    s2 = ref.contour_segments(mesh.nodes, mesh.triangles, u, 0.1)
    np.testing.assert_allclose(s1, s2, atol=1e-14)


def test_pure_python_switch_gives_same_energy():
    code = (
        "from shapeopt import kernels; from shapeopt.cli import main;"
        "from shapeopt.shape_calculus import ShapeState; from shapeopt.geometry import regular_polygon;"
        "s = ShapeState(regular_polygon(64), 0.08); print(kernels.BACKEND, repr(s.poisson.info['energy']))"
    )
    outs = []
    for flag in ("1", "0"):
        env = dict(os.environ, SHAPEOPT_PURE_PYTHON=flag)
        r = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
        outs.append(r.stdout.split())
    assert outs[0][0] == "python"
    assert float(outs[0][1]) == pytest.approx(float(outs[1][1]), rel=1e-12)
