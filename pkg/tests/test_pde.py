import time

import numpy as np
import pytest

from helpers import J01
from shapeopt.errors import EmptyLevelSet
from shapeopt.geometry import area, rectangle, regular_polygon
from shapeopt.meshing import refine, triangulate
from shapeopt.pde import (
    SourceSpec,
    boundary_flux,
    dirichlet_energy,
    energy_audit,
    level_set_domain,
    p1_error_l2,
    solve_eigen,
    solve_harmonic,
    solve_poisson,
)


def square_series(x, y, terms=99):
    """U for -Lap U = 1 on the unit square by the double sine series."""
    out = 0.0
    for m in range(1, terms + 1, 2):
        for n in range(1, terms + 1, 2):
            out += 16.0 / (np.pi**4 * m * n * (m * m + n * n)) * np.sin(m * np.pi * x) * np.sin(n * np.pi * y)
    return out


def square_integral(terms=199):
    """int U over the unit square from the same series."""
    m = np.arange(1, terms + 1, 2)[:, None]
    n = np.arange(1, terms + 1, 2)[None, :]
    return float((64.0 / (np.pi**6 * m**2 * n**2 * (m**2 + n**2))).sum())


def test_series_oracles_self_consistent():
    assert square_series(0.5, 0.5) == pytest.approx(0.07367, abs=2e-5)
    assert square_integral() == pytest.approx(0.03514, abs=2e-5)


def test_disk_poisson(disk_poisson):
    U = disk_poisson
    c = U.interpolate(np.zeros((1, 2)))[0]
    assert c == pytest.approx(0.25, rel=0.01)
    assert U.mesh.is_boundary.sum() == len(U.mesh.boundary_chain)
    assert np.abs(U.nodal_values[U.mesh.boundary_chain]).max() == 0.0
    # exact solution (1 - r^2)/4, second-order accurate in L2
    err = p1_error_l2(U.mesh, U.nodal_values, lambda p: 0.25 * (1 - (p**2).sum(1)))
    assert err < 1e-3


def test_disk_flux(disk_poisson):
    q = boundary_flux(disk_poisson)
    assert (q <= 1e-12).all()
    np.testing.assert_allclose(q, -0.5, rtol=0.01)


def test_disk_energy(disk_poisson):
    assert dirichlet_energy(disk_poisson) == pytest.approx(-np.pi / 16, rel=0.01)
    assert energy_audit(disk_poisson)["rel_diff"] < 1e-8


def test_square_poisson(square):
    m = triangulate(square, 0.03)
    U = solve_poisson(m, SourceSpec.constant(1.0))
    assert U.interpolate(np.array([[0.5, 0.5]]))[0] == pytest.approx(square_series(0.5, 0.5), rel=0.01)
    assert dirichlet_energy(U) == pytest.approx(-0.5 * square_integral(), rel=0.01)
    q = boundary_flux(U)
    # Hopf sign away from the corners; at a convex corner the exact flux is 0
    # and the discrete value is a small overshoot of either sign
    assert (q[~m.corner_mask] <= 1e-10).all()
    assert np.abs(q[m.corner_mask]).max() < 0.1 * np.abs(q).max()


def test_zero_source(square):
    m = triangulate(square, 0.1)
    U = solve_poisson(m, SourceSpec.constant(0.0))
    assert np.abs(U.nodal_values).max() == 0.0
    assert np.abs(boundary_flux(U)).max() == 0.0
    assert dirichlet_energy(U) == 0.0


def test_square_corner_flux_vanishes(square):
    vals = []
    for h in (0.1, 0.05, 0.025):
        m = triangulate(square, h)
        U = solve_poisson(m)
        q = boundary_flux(U)
        vals.append(np.abs(q[m.corner_mask]).max())
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < 0.5 * vals[0]


def test_square_eigenvalue():
    sq = rectangle(0, 0, 1, 1)
    t = time.perf_counter()
    lam, U1 = solve_eigen(triangulate(sq, 0.02))
    assert time.perf_counter() - t < 30
    assert lam == pytest.approx(2 * np.pi**2, rel=0.01)
    assert U1.l2_norm() == pytest.approx(1.0, abs=1e-10)
    assert (U1.nodal_values[U1.mesh.interior] > 0).all()


def test_disk_eigenvalue(disk_eigen):
    lam, U1 = disk_eigen
    assert lam == pytest.approx(J01**2, rel=0.01)
    # (d_nu U1)^2 = j01^2 / pi on the unit disk
    np.testing.assert_allclose(boundary_flux(U1) ** 2, J01**2 / np.pi, rtol=0.03)


def test_eigen_scaling():
    d = regular_polygon(32)
    m = triangulate(d, 0.08)
    lam1, _ = solve_eigen(m)
    m2 = type(m)(2.0 * m.nodes, m.triangles, m.boundary_chain, 2 * m.boundary_s, m.corner_mask, 2 * m.h_max)
    lam2, _ = solve_eigen(m2)
    assert lam2 == pytest.approx(lam1 / 4, rel=1e-3)


def test_refinement_second_order():
    sq = rectangle(0, 0, 1, 1)
    m = triangulate(sq, 0.1)
    e1 = abs(solve_eigen(m)[0] - 2 * np.pi**2)
    e2 = abs(solve_eigen(refine(m))[0] - 2 * np.pi**2)
    assert 3.0 < e1 / e2 < 5.0


def test_harmonic_constant(disk_mesh):
    H = solve_harmonic(disk_mesh, np.full(len(disk_mesh.boundary_chain), 0.5))
    np.testing.assert_allclose(H.nodal_values, 0.5, atol=1e-12)
    assert H.dirichlet_integral() == pytest.approx(0.0, abs=1e-12)


def test_level_set(disk_poisson):
    d = level_set_domain(disk_poisson, 0.1)
    r = np.hypot(*d.vertices.T)
    np.testing.assert_allclose(r, np.sqrt(0.6), rtol=0.02)
    small = level_set_domain(disk_poisson, 1e-4)
    assert area(small) == pytest.approx(np.pi, rel=0.01)
    with pytest.raises(EmptyLevelSet):
        level_set_domain(disk_poisson, disk_poisson.max_value)


def test_source_scaling(square):
    m = triangulate(square, 0.1)
    E1 = solve_poisson(m, SourceSpec.constant(1.0)).info["energy"]
    E3 = solve_poisson(m, SourceSpec.constant(3.0)).info["energy"]
    assert E3 == pytest.approx(9 * E1, rel=1e-10)


def test_concave_source_positive_flux_sign(disk_mesh):
    U = solve_poisson(disk_mesh, SourceSpec.concave_quadratic(2.0, 1.0))
    assert (boundary_flux(U) <= 1e-10).all()
    with pytest.raises(ValueError):
        SourceSpec.constant(-1.0)
