import numpy as np
import pytest

from helpers import J01, hat_on_edge, rounded_square
from shapeopt.geometry import area, make_domain, rectangle, regular_polygon
from shapeopt.pde import SourceSpec
from shapeopt.shape_calculus import (
    AffineField,
    BoundaryPerturbation,
    ShapeState,
    bump,
    continuity_ratios,
    curvature_term,
    ef_d1,
    ef_d2,
    extend,
    fd_validate,
    lam_d1,
    lam_d2,
    solve_u1prime,
    solve_uprime,
    transported_area,
    vol_d1,
    vol_d2,
)

ZERO = AffineField()


def test_bump_profile():
    assert bump(1.0) == 1.0
    assert bump(0.5) == 0.0
    assert bump(0.0) == 0.0
    assert bump(1.5) == 0.0
    r = np.linspace(0.5, 1.5, 201)
    assert np.all(np.diff(bump(r[r <= 0.8])) >= 0)


def test_extend_boundary_and_origin(disk256):
    V = extend(1.0, (0.0, 1.0), disk256)
    P = disk256.vertices
    np.testing.assert_allclose(V(P), np.tile([0.0, 1.0], (len(P), 1)), atol=1e-12)
    np.testing.assert_allclose(V(np.zeros((1, 2))), 0.0)


def test_extend_radial_probe(centered_square):
    pert = hat_on_edge(centered_square, 1, z=(0.0, 1.0))
    V = pert.field()
    s = np.array([0.5 * (pert.s_knots[0] + pert.s_knots[1])])
    from shapeopt.geometry import point_at_arclength

    p = point_at_arclength(centered_square, s)[0]
    v = pert.profile(s)[0]
    for q in (0.7, 0.9, 1.0, 1.1, 1.3):
        np.testing.assert_allclose(V((q * p)[None])[0], bump(q) * v * np.array([0.0, 1.0]), atol=1e-12)


def test_vol_constant_and_identity(square):
    assert vol_d2(square, AffineField.constant((0.4, -1.0))) == pytest.approx(0.0, abs=1e-14)
    assert vol_d1(square, AffineField.constant((0.4, -1.0))) == pytest.approx(0.0, abs=1e-14)
    assert vol_d2(square, AffineField.identity()) == pytest.approx(2.0, abs=1e-14)
    assert vol_d1(square, AffineField.identity()) == pytest.approx(2.0, abs=1e-14)


def test_vol_hat_constant_direction(centered_square):
    pert = hat_on_edge(centered_square, 0, z=(0.3, -1.0))
    assert vol_d2(centered_square, pert.field(), factored=True) == 0.0
    # the unfactored boundary form agrees to round-off on the vertex chain of the hat
    from shapeopt.meshing import triangulate

    m = triangulate(centered_square, 0.05, breakpoints=None)
    assert abs(vol_d2(m, pert.field())) < 1e-12


def test_vol_exact_quadratic(rng):
    d = make_domain([(0, 0), (2, 0), (2.5, 1.0), (0.3, 1.4)])
    for _ in range(5):
        V = AffineField(rng.normal(size=(2, 2)), rng.normal(size=2))
        t = 0.1
        a0, ap, am = (transported_area(d, V, s) for s in (0.0, t, -t))
        assert (ap - am) / (2 * t) == pytest.approx(vol_d1(d, V), abs=1e-10)
        assert (ap - 2 * a0 + am) / t**2 == pytest.approx(vol_d2(d, V), abs=1e-10)


def test_ef_d1_translation_and_scaling(disk_state, disk256):
    E = disk_state.poisson.info["energy"]
    assert abs(ef_d1(disk256, None, AffineField.constant((0.3, -0.2)), state=disk_state)) < 1e-3 * abs(E)
    assert ef_d1(disk256, None, AffineField.identity(), state=disk_state) == pytest.approx(-np.pi / 4, rel=0.01)
    assert ef_d1(disk256, None, AffineField.identity(), state=disk_state) == pytest.approx(4 * E, rel=0.01)


def test_ef_d1_square_hat_matches_fd(square_state, centered_square):
    V = hat_on_edge(centered_square, 0).field()
    a = ef_d1(centered_square, None, V, state=square_state)
    rep = fd_validate("E_f", 1, centered_square, V, mesh=square_state.mesh)
    assert a == pytest.approx(rep.richardson_estimate, rel=0.02)


def test_uprime_tangential_and_disk(disk_state, disk256, centered_square, square_state):
    U = solve_uprime(disk256, None, AffineField.identity(), state=disk_state)
    np.testing.assert_allclose(U.nodal_values, 0.5, rtol=0.01)
    # trace equals -flux (V . nu) nodewise by construction
    from shapeopt.shape_calculus import dirichlet_data

    np.testing.assert_array_equal(U.nodal_values[disk_state.mesh.boundary_chain], dirichlet_data(disk_state.poisson, AffineField.identity()))
    # hat along the edge direction: V . nu = 0 on the support
    Vt = hat_on_edge(centered_square, 0, z=(1.0, 0.0)).field()
    Ut = solve_uprime(centered_square, None, Vt, state=square_state)
    assert np.abs(Ut.nodal_values).max() < 1e-12


def test_curvature_disk_closed_form(disk_state, disk256):
    c = curvature_term(disk256, disk_state.poisson, w=lambda p: np.ones(len(p)))
    assert c.value == pytest.approx(np.pi / 2, rel=0.03)
    z = curvature_term(disk256, disk_state.poisson, w=lambda p: np.zeros(len(p)))
    assert z.value == 0.0


def test_ef_d2_disk_identity(disk_state, disk256):
    rep = ef_d2(disk256, None, AffineField.identity(), state=disk_state)
    assert rep.analytic_value == pytest.approx(-3 * np.pi / 4, rel=0.03)
    b = rep.term_breakdown
    assert b["T2"] == pytest.approx(-np.pi, rel=0.03)
    assert b["T3"] == pytest.approx(np.pi / 4, rel=0.03)
    assert abs(b["T4"]) < 1e-3
    # U' is the constant 1/2, so its Dirichlet integral vanishes
    assert abs(b["T1"]) < 1e-3
    # analytic - lower bound = T3 >= 0
    assert rep.analytic_value - b["lower_bound"] == pytest.approx(b["T3"], rel=1e-12)
    assert b["T3"] >= 0


def test_ef_d2_zero_field(disk_state, disk256):
    assert ef_d2(disk256, None, ZERO, state=disk_state).analytic_value == 0.0


def test_ef_d2_square_hat_matches_fd(square_state, centered_square):
    V = hat_on_edge(centered_square, 0).field()
    a = ef_d2(centered_square, None, V, state=square_state).analytic_value
    rep = fd_validate("E_f", 2, centered_square, V, mesh=square_state.mesh)
    assert a == pytest.approx(rep.richardson_estimate, rel=0.03)
    assert 1.5 <= rep.convergence_order <= 2.5


def test_source_scaling_exact(square_state, centered_square):
    V = hat_on_edge(centered_square, 2).field()
    st3 = ShapeState(centered_square, f=SourceSpec.constant(3.0), mesh=square_state.mesh)
    assert st3.poisson.info["energy"] == pytest.approx(9 * square_state.poisson.info["energy"], rel=1e-10)
    assert ef_d1(centered_square, None, V, state=st3) == pytest.approx(9 * ef_d1(centered_square, None, V, state=square_state), rel=1e-10)
    a3 = ef_d2(centered_square, None, V, state=st3).analytic_value
    a1 = ef_d2(centered_square, None, V, state=square_state).analytic_value
    assert a3 == pytest.approx(9 * a1, rel=1e-10)


def test_lam_d1_laws(disk_state, disk256):
    lam = disk_state.eigen[0]
    assert abs(lam_d1(disk256, AffineField.constant((0.3, -0.2)), state=disk_state)) < 1e-3 * lam
    assert lam_d1(disk256, AffineField.identity(), state=disk_state) == pytest.approx(-2 * lam, rel=0.01)
    assert lam_d1(disk256, AffineField.identity(), state=disk_state) == pytest.approx(-2 * J01**2, rel=0.01)


def test_u1prime_constraint_and_tangential(square_state, centered_square, disk_state, disk256):
    Up = solve_u1prime(disk256, AffineField.identity(), state=disk_state)
    assert abs(Up.info["constraint"]) < 1e-9
    Vt = hat_on_edge(centered_square, 0, z=(1.0, 0.0)).field()
    Ut = solve_u1prime(centered_square, Vt, state=square_state)
    assert np.abs(Ut.nodal_values).max() < 1e-10
    assert lam_d1(centered_square, Vt, state=square_state) == 0.0


def test_lam_d2_disk_identity(disk_state, disk256):
    rep = lam_d2(disk256, AffineField.identity(), state=disk_state)
    lam = disk_state.eigen[0]
    assert rep.analytic_value == pytest.approx(6 * lam, rel=0.03)
    assert abs(rep.term_breakdown["S2"]) <= 1e-10
    assert lam_d2(disk256, ZERO, state=disk_state).analytic_value == 0.0


def test_lam_d2_square_hat_matches_fd(square_state, centered_square):
    V = hat_on_edge(centered_square, 3).field()
    rep = lam_d2(centered_square, V, state=square_state)
    assert abs(rep.term_breakdown["S2"]) <= 1e-10
    fd = fd_validate("lambda_1", 2, centered_square, V, mesh=square_state.mesh)
    assert rep.analytic_value == pytest.approx(fd.richardson_estimate, rel=0.03)
    assert 1.5 <= fd.convergence_order <= 2.5


def test_fd_validate_oracles(disk_state, disk256):
    V = AffineField.identity()
    rep = fd_validate("Vol", 2, disk256, V, mesh=disk_state.mesh)
    assert rep.richardson_estimate == pytest.approx(vol_d2(disk_state.mesh, V), abs=1e-9)
    assert rep.extra.get("exact")
    rep = fd_validate("E_f", 1, disk256, V, mesh=disk_state.mesh)
    assert rep.richardson_estimate == pytest.approx(-np.pi / 4, rel=0.01)
    rep = fd_validate("lambda_1", 2, disk256, V, mesh=disk_state.mesh)
    assert rep.richardson_estimate == pytest.approx(6 * disk_state.eigen[0], rel=0.02)


def test_fd_validate_inversion_guard(disk_state, disk256):
    from shapeopt.errors import StepTooLarge

    with pytest.raises(StepTooLarge):
        fd_validate("E_f", 1, disk256, AffineField(np.diag([-3.0, 0.0])), steps=(0.5, 0.4, 0.3), mesh=disk_state.mesh)


def test_curvature_forms_agree():
    for d in (regular_polygon(256), rounded_square(), rounded_square(0.6, 0.3, 24)):
        st = ShapeState(d, 0.03)
        c = curvature_term(d, st.poisson, w=lambda p: 1.0 + p[:, 0] ** 2)
        assert c.rel_diff < 0.05


def test_curvature_nonnegative_on_convex_domains(rng):
    doms = [rectangle(-0.5, -0.5, 0.5, 0.5), make_domain([(0, 0), (1, 0), (0.3, 0.9)]), regular_polygon(6, 0.7), rounded_square()]
    for d in doms:
        st = ShapeState(d, 0.03)
        for U in (st.poisson, st.eigen[1]):
            for k in range(3):
                c0 = rng.normal(size=2) * 0.4
                w = (lambda p, c0=c0: np.exp(-3.0 * ((p - d.origin - c0) ** 2).sum(1))) if k else (lambda p: np.ones(len(p)))
                c = curvature_term(d, U, w=w, diagnostic=False)
                assert c.value >= -0.02 * c.uniform_scale


def test_continuity_ratios_stable():
    r = continuity_ratios(regular_polygon(128), n_knots=(16, 32, 64))
    assert abs(r["slope1"]) <= 0.1
    assert abs(r["slope2"]) <= 0.1
    assert all(np.isfinite(row["ratio1"]) and row["ratio1"] > 0 for row in r["rows"])
