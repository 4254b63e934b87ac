import json

import numpy as np
import pytest
from scipy.optimize import minimize

from shapeopt.errors import InfeasibleInit
from shapeopt.geometry import (
    InclusionPair,
    area,
    convexity_margins,
    rectangle,
    regular_polygon,
    support_vector,
)
from shapeopt.optimizer import (
    OptOptions,
    ProblemSpec,
    Projector,
    _solve_state,
    area_neutral,
    ascent_direction,
    evaluate,
    facet_lengths,
    grid_polygon,
    load_snapshot,
    metric_weights,
    objective,
    optimize,
    polygon_from_support,
    polygonality_report,
    support_area,
    support_displacement,
)

SQ_ENERGY = -0.0175714  # -(1/2) int U for the unit square (series)


def small_spec(variant="penalized_energy", mu=0.05, m0=None, N=32, h=0.06):
    pair = InclusionPair(rectangle(-0.2, -0.2, 0.2, 0.2), grid_polygon(N, 0.9))
    return ProblemSpec(variant, pair, mu=mu, m0=m0, n_angles=N, h=h)


def test_objective_values():
    sq = rectangle(-0.5, -0.5, 0.5, 0.5)
    spec = ProblemSpec("penalized_energy", InclusionPair(None, rectangle(-1, -1, 1, 1)), mu=1.0, h=0.03)
    assert objective(sq, spec) == pytest.approx(SQ_ENERGY + 1.0, abs=1e-4)
    spec = ProblemSpec("penalized_eigen", InclusionPair(None, rectangle(-1, -1, 1, 1)), mu=0.0, h=0.03)
    assert objective(sq, spec) == pytest.approx(2 * np.pi**2, rel=0.01)
    spec = ProblemSpec("constrained_energy", InclusionPair(None, rectangle(-1, -1, 1, 1)), m0=1.0, h=0.03)
    assert objective(sq, spec) == pytest.approx(SQ_ENERGY, rel=0.01)


def test_spec_validation():
    with pytest.raises(ValueError):
        ProblemSpec("nope", InclusionPair(None, regular_polygon(8)))
    with pytest.raises(ValueError, match="m0"):
        small_spec("constrained_energy", m0=5.0).validate()
    with pytest.raises(ValueError):
        small_spec(mu=-1.0).validate()
    s = small_spec("constrained_eigen", m0=1.0)
    assert ProblemSpec.from_dict(json.loads(json.dumps(s.to_dict()))).to_dict() == s.to_dict()


def test_support_polygon_roundtrip():
    # octagon with facet normals at multiples of pi/4, all on the 64-grid
    d = regular_polygon(8, 0.8, phase=np.pi / 8)
    h = support_vector(d, 64)
    assert support_area(h) == pytest.approx(area(d), rel=1e-12)
    p, idx = polygon_from_support(h)
    assert p.n == 8
    assert area(p) == pytest.approx(area(d), rel=1e-12)
    np.testing.assert_array_equal(np.sort(idx), np.arange(0, 64, 8))
    # off-grid normals give the circumscribed grid polygon, which is larger
    h7 = support_vector(regular_polygon(7, 0.8, phase=0.2), 64)
    assert support_area(h7) > area(regular_polygon(7, 0.8, phase=0.2))


def _grad_fd_error(variant, mu, mesh_h):
    spec = small_spec(variant, mu=mu, N=32, h=mesh_h)
    h = 0.5 * (support_vector(spec.pair.D1, 32) + support_vector(spec.pair.D2, 32))
    ev = evaluate(h, spec)
    dh = np.cos(np.linspace(0, 2 * np.pi, 32, endpoint=False) * 2 + 0.3) * 0.5 + 0.5
    disp = support_displacement(ev.mesh, ev.dom, dh, ev.facet_index, 32)
    t = 1e-4
    vals = []
    for s in (t, -t):
        F, _ = _solve_state(ev.mesh.moved(s * disp), spec)
        vals.append(F + mu * support_area(h + s * dh))
    fd = (vals[0] - vals[1]) / (2 * t)
    return abs(ev.grad @ dh / fd - 1.0)


@pytest.mark.parametrize("variant,mu", [("penalized_energy", 0.05), ("penalized_eigen", 5.0)])
def test_gradient_matches_lagrangian_fd(variant, mu):
    # boundary-flux gradient vs. derivative of the discrete objective under mesh transport:
    # the mismatch is a first-order discretization error
    e1 = _grad_fd_error(variant, mu, 0.025)
    e2 = _grad_fd_error(variant, mu, 0.0125)
    assert e2 < 0.03
    assert e1 / e2 > 1.7


def test_gradient_sign_for_large_mu():
    spec = small_spec(mu=50.0)
    h = 0.5 * (support_vector(spec.pair.D1, 32) + support_vector(spec.pair.D2, 32))
    ev = evaluate(h, spec)
    L = facet_lengths(h)
    assert np.all(ev.grad[L > 0] > 0)


def test_projector_against_slsqp(rng):
    N = 12
    lo = support_vector(rectangle(-0.2, -0.1, 0.2, 0.1), N)
    hi = support_vector(regular_polygon(N, 1.0), N)
    P = Projector(lo, hi)
    for _ in range(5):
        y = rng.normal(0.5, 0.4, N)
        x = P(y)
        assert P.feasible(x)
        cons = [
            {"type": "ineq", "fun": convexity_margins},
            {"type": "ineq", "fun": lambda z: z - lo},
            {"type": "ineq", "fun": lambda z: hi - z},
        ]
        ref = minimize(lambda z: 0.5 * ((z - y) ** 2).sum(), np.clip(y, lo, hi), constraints=cons, method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
        assert 0.5 * ((x - y) ** 2).sum() <= ref.fun + 1e-8
        np.testing.assert_allclose(x, ref.x, atol=1e-5)
        np.testing.assert_allclose(P(x), x, rtol=0, atol=1e-15)


def test_area_neutral_direction(rng):
    h = support_vector(regular_polygon(40, 0.7, phase=0.05), 64)
    g = rng.normal(size=64)
    d = ascent_direction(g, h)
    dn = area_neutral(d, h)
    L = facet_lengths(h)
    assert abs(dn @ L) < 1e-12 * np.abs(d @ L) + 1e-14
    W = metric_weights(h)
    # still an ascent direction for g (projection in the W metric)
    assert g @ dn >= 0
    assert (dn * W) @ dn <= (d * W) @ d + 1e-12


def test_short_run_monotone_and_feasible():
    spec = small_spec(mu=0.05)
    r = optimize(spec, opts=OptOptions(max_iter=6))
    assert all(b >= a - r.noise_floor for a, b in zip(r.trace, r.trace[1:]))
    lo, hi = spec.bounds()
    assert Projector(lo, hi).feasible(r.h)
    assert r.iterations <= 6


def test_constrained_run_keeps_area():
    spec = small_spec("constrained_energy", m0=1.0)
    r = optimize(spec, opts=OptOptions(max_iter=4))
    np.testing.assert_allclose(r.area_trace, 1.0, rtol=1e-10)


def test_infeasible_init():
    spec = small_spec()
    with pytest.raises(InfeasibleInit):
        optimize(spec, init=np.full(32, 5.0))


def test_resume_bit_identical(tmp_path):
    spec = small_spec(mu=0.05)
    r = optimize(spec, opts=OptOptions(max_iter=5, snapshot_dir=str(tmp_path)))
    assert r.iterations == 5
    snap = load_snapshot(tmp_path / "snapshot_0003.json")
    r2 = optimize(spec, opts=OptOptions(max_iter=5), resume=snap)
    assert r2.trace == r.trace
    np.testing.assert_array_equal(r2.h, r.h)


def test_stationary_start_is_fixed_point():
    # with mu = 0 the energy only grows when the domain shrinks, so the inner body is optimal
    pair = InclusionPair(grid_polygon(16, 0.3), grid_polygon(16, 0.8))
    spec = ProblemSpec("penalized_energy", pair, mu=0.0, n_angles=16, h=0.05)
    lo = spec.bounds()[0]
    r = optimize(spec, init=lo, opts=OptOptions(max_iter=3))
    np.testing.assert_array_equal(r.h, lo)
    assert r.converged and r.reason == "stationary"


def test_polygonality_exact_polygon_and_disk():
    pair = InclusionPair(None, grid_polygon(64, 10.0))
    hexa = regular_polygon(6, 1.0)
    rep = polygonality_report(hexa, pair, n_angles=64)
    assert rep["segment_count"] == 6 and rep["max_deviation"] < 1e-12
    disk = grid_polygon(64, 1.0)
    assert polygonality_report(disk, pair, n_angles=64)["segment_count"] == 64
    # edges on the boundary of D2 are not free
    tight = InclusionPair(None, hexa)
    assert polygonality_report(hexa, tight, n_angles=64)["segment_count"] == 0
