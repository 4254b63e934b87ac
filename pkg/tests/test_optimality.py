import numpy as np
import pytest
from scipy.integrate import quad

from shapeopt.errors import NoFreeEdges, OverlappingSupports, PreconditionUnmet
from shapeopt.geometry import InclusionPair, rectangle, regular_polygon
from shapeopt.optimality import (
    OptimalityConfig,
    SyntheticState,
    edge_averages,
    edge_chart,
    edge_hat,
    estimate_mu,
    first_order_residual,
    flux_bound_check,
    free_edges_of,
    paired_perturbation,
    paired_volume_terms,
    second_order_positivity,
    tangential_term,
    trace_inequality_probe,
    vertex_chart,
    vertex_contacts,
)
from shapeopt.perturbations import HatSpec, hat, lift_to_domain
from shapeopt.shape_calculus import AffineField


@pytest.fixture(scope="module")
def sq():
    return rectangle(-0.5, -0.5, 0.5, 0.5)


def test_residual_vanishes_for_matching_constant_flux(sq):
    c = 0.7
    ch = edge_chart(sq, 0)
    r = first_order_residual(sq, SyntheticState(c), c * c / 2, ch, 0, mode="energy")
    assert max(map(abs, r)) < 1e-14
    r = first_order_residual(sq, SyntheticState(c), c * c, ch, 0, mode="eigen")
    assert max(map(abs, r)) < 1e-14
    # mu = 0 leaves -c q^2 integrated against each hat: -(c^2/2) * L/2
    r = first_order_residual(sq, SyntheticState(c), 0.0, ch, 0, mode="energy")
    np.testing.assert_allclose(r, [-c * c / 4, -c * c / 4], rtol=1e-12)


def test_residual_against_quadrature(sq):
    # q = 1 + x on the bottom edge y = -0.5, x in (-0.5, 0.5); chart abscissa t = x + 0.5
    st = SyntheticState(lambda p: 1.0 + p[:, 0])
    mu = 0.3
    r = first_order_residual(sq, st, mu, edge_chart(sq, 0), 0, mode="energy", n_quad=4000)
    ra = quad(lambda t: (mu - 0.5 * (0.5 + t) ** 2) * (1 - t), 0, 1)[0]
    rb = quad(lambda t: (mu - 0.5 * (0.5 + t) ** 2) * t, 0, 1)[0]
    np.testing.assert_allclose(r, [ra, rb], rtol=1e-5)


def test_estimate_mu_constant_flux(sq):
    c = 0.9
    est = estimate_mu(sq, SyntheticState(c), [0, 1, 2, 3], "energy", configured_mu=c * c / 2)
    assert est.mu == pytest.approx(c * c / 2, rel=1e-12)
    assert est.max_rel_deviation < 1e-12
    assert est.rel_to_configured < 1e-12
    assert estimate_mu(sq, SyntheticState(c), [1], "eigen").mu == pytest.approx(c * c, rel=1e-12)
    with pytest.raises(NoFreeEdges):
        estimate_mu(sq, SyntheticState(c), [])


def test_edge_averages_two_edges(sq):
    # q^2 = x^2 + y^2 on the boundary: on edges 0 and 1 both averages equal 1/4 + 1/12 +- the linear part
    st = SyntheticState(lambda p: np.hypot(p[:, 0], p[:, 1]))
    est = estimate_mu(sq, st, [0, 1], "energy")
    a00 = quad(lambda t: ((t - 0.5) ** 2 + 0.25) * (1 - t), 0, 1)[0]
    a01 = quad(lambda t: ((t - 0.5) ** 2 + 0.25) * t, 0, 1)[0]
    np.testing.assert_allclose(est.averages, [a00, a01, a00, a01], rtol=1e-5)
    assert est.mu == pytest.approx((a00 + a01) / 2, rel=1e-5)
    np.testing.assert_allclose(edge_averages(sq, st, 2), [a00, a01], rtol=1e-5)


def test_tangential_term(sq):
    ch = edge_chart(sq, 0)
    prof = hat(HatSpec(1.0, 0.2, 0.5, 0.8))
    st = SyntheticState(lambda p: 1.0 + p[:, 0])
    # normal and purely tangential directions give zero
    assert tangential_term(sq, st, lift_to_domain(sq, ch, prof, z=(0.0, 1.0))) == 0.0
    assert tangential_term(sq, st, lift_to_domain(sq, ch, prof, z=(1.0, 0.0))) == 0.0
    # constant flux: the integrand is a derivative of v^2 / 2 and integrates to zero
    pz = lift_to_domain(sq, ch, prof, z=(0.6, 0.8))
    assert abs(tangential_term(sq, SyntheticState(1.3), pz)) < 1e-14
    # chart frame: ex = tau, ey = -nu, so z.tau = 0.6 and z.nu = -0.8
    ref = quad(lambda t: (0.5 + t) ** 2 * 0.6 * (-0.8) * prof(t) * prof.derivative(t)[0], 0, 1, points=[0.2, 0.5, 0.8])[0]
    assert tangential_term(sq, st, pz) == pytest.approx(ref, rel=1e-10)


def test_flux_bound_constant_flux(sq):
    mu = 0.08
    c = np.sqrt(2 * mu)
    pert, _ = edge_hat(sq, 1, 0.2)
    r = flux_bound_check(sq, SyntheticState(c), mu, pert)
    assert r.ratio == pytest.approx(1 / np.sqrt(2 * mu), rel=1e-12)
    assert r.bound == pytest.approx(4 / np.sqrt(mu))
    assert r.passed
    z = flux_bound_check(sq, SyntheticState(0.0), mu, pert)
    assert z.degenerate and np.isnan(z.ratio) and not z.passed


def test_vertex_chart_frames():
    d = regular_polygon(6, 1.0)
    ch = vertex_chart(d, 2, "bisector")
    np.testing.assert_allclose(ch.slopes, [-np.tan(np.pi / 6), np.tan(np.pi / 6)], atol=1e-12)
    ch = vertex_chart(d, 2, "edge")
    np.testing.assert_allclose(ch.slopes, [0.0, np.tan(np.pi / 3)], atol=1e-12)


def test_paired_perturbation_area_neutral():
    d = regular_polygon(9, 0.8, phase=0.1)
    pp = paired_perturbation(d, 1, 5)
    t = paired_volume_terms(d, pp)
    assert abs(t["vol_d1"]) < 1e-10
    assert t["vol_d1_parts"][0] == pytest.approx(-0.5, rel=1e-10)
    assert t["vol_d2"] == pytest.approx(sum(t["vol_d2_parts"]), abs=1e-12)
    with pytest.raises(OverlappingSupports):
        paired_perturbation(d, 1, 2)


def test_second_order_positivity_guards(sq):
    with pytest.raises(PreconditionUnmet):
        second_order_positivity(sq, "energy", AffineField(), residual_rel=0.5)
    r = second_order_positivity(sq, "energy", AffineField(), h=0.1)
    assert r.value == 0.0 and not r.passed
    r = second_order_positivity(sq, "eigen", AffineField(), h=0.1)
    assert r.value == 0.0


def test_positivity_disk_identity(disk_state, disk256):
    # the energy lower bound drops the curvature term: -pi (1 + 0) = T1 + T2 + T4
    r = second_order_positivity(disk256, "energy", AffineField.identity(), state=disk_state)
    assert r.value == pytest.approx(-np.pi, rel=0.03)


def test_contacts_and_free_edges(sq):
    pair = InclusionPair(rectangle(-0.5, -0.2, 0.1, 0.2), rectangle(-1, -1, 1, 1))
    on1, on2 = vertex_contacts(sq, pair)
    assert not on2.any()
    assert not on1.any()
    assert free_edges_of(sq, pair, 0.03) == [0, 1, 2]


def test_trace_probe_disk_bounded():
    r = trace_inequality_probe(regular_polygon(128), s0=0.3, eps_list=(0.4, 0.2, 0.1))
    assert r.bounded
    assert 0.5 < min(r.ratios) and max(r.ratios) < 1.5
    z = trace_inequality_probe(regular_polygon(64), amplitude=0.0, eps_list=(0.4, 0.2))
    assert z.ratios == [0.0, 0.0]


def test_trace_probe_square_corner(sq):
    r = trace_inequality_probe(sq, s0=0.0, eps_list=(0.4, 0.2, 0.1))
    assert r.bounded


def test_config_roundtrip():
    c = OptimalityConfig(residual_rtol=0.05)
    assert OptimalityConfig(**c.to_dict()) == c
