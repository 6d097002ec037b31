"""Locality/independence checks, metric geometry, susceptibility, gauges."""

import numpy as np
import pytest

from escm import (
    GaugeTransform,
    IndefiniteMetricError,
    PairError,
    Point,
    QueryError,
    SolverConfig,
    apply_gauge,
    causal_metric,
    gauge_preserved,
    hard,
    icm_check,
    icm_penalty,
    lap_check,
    lap_penalty,
    metric_in_chart,
    parse_model,
    probe,
    solve,
    susceptibility,
)
from escm.diagnostics import HEADS, nondesc_pairs
from tests.conftest import chain2_dict
from tests.genmodels import planted_case

ISO_QUADRATIC = {
    "variables": [{"name": "Z1", "kind": "endogenous"},
                  {"name": "Z2", "kind": "endogenous"}],
    "edges": [],
    "terms": [
        {"owner": "local:Z1", "expr": "0.5*sq(z.Z1)"},
        {"owner": "local:Z2", "expr": "0.5*sq(z.Z2)"},
    ],
}


# ---------------------------------------------------------------------------
# LAP


def test_lap_detects_bilinear_coupling(chain2_z3):
    report = lap_check(chain2_z3, "Z1", "Z3", Point.for_model(chain2_z3))
    assert report.z_block.tolist() == [[0.3]]
    assert not report.passed


def test_lap_clean_pair_passes_exactly(chain2):
    report = lap_check(chain2, "Z2", "Z1", Point.for_model(chain2))
    assert report.max_abs_z == 0.0
    assert report.max_abs_theta == 0.0
    assert report.passed


def test_lap_rejects_descendant_pairs(chain2):
    with pytest.raises(PairError):
        lap_check(chain2, "Z1", "Z2", Point.for_model(chain2))


def test_lap_penalty_single_pair_weight(chain2_z3):
    p = Point.for_model(chain2_z3)
    # weight one violating ordered pair only: 0.3^2
    value = lap_penalty(chain2_z3, [p], lam={("Z1", "Z3"): 1.0}, mu={})
    assert value == pytest.approx(0.09, abs=1e-15)
    # uniform weights count both orientations of the symmetric coupling
    assert lap_penalty(chain2_z3, [p]) == pytest.approx(0.18, abs=1e-15)


def test_lap_penalty_zero_on_clean_model(chain2):
    assert lap_penalty(chain2, [Point.for_model(chain2)]) == 0.0


def test_lap_penalty_linear_in_weights(chain2_z3):
    p = Point.for_model(chain2_z3)
    base = lap_penalty(chain2_z3, [p], lam=1.0, mu=1.0)
    doubled = lap_penalty(chain2_z3, [p], lam=2.0, mu=2.0)
    assert doubled == pytest.approx(2.0 * base, rel=1e-15)


# ---------------------------------------------------------------------------
# ICM


def test_icm_clean_chain2(chain2):
    report = icm_check(chain2, "Z2", Point.for_model(chain2))
    assert report.parent_params == []
    assert report.passed


def test_icm_parent_params_clean_when_separate():
    spec = chain2_dict()
    spec["terms"][0]["expr"] = "0.5*sq(z.Z1 - theta.Z1.b*u.U1)"
    spec["terms"][0]["params"] = {"b": 1.0}
    model = parse_model(spec)
    report = icm_check(model, "Z2", Point.for_model(model, z=[1.0, 2.5], u=[1.0, 0.5]))
    assert report.parent_params == ["Z1.b"]
    assert np.all(report.d_residual_d_parent == 0.0)
    assert report.passed


def test_icm_shared_parameter_fails_with_reported_value():
    spec = chain2_dict()
    spec["terms"][0]["expr"] = "0.5*sq(z.Z1 - theta.Z2.a*u.U1)"
    model = parse_model(spec)
    report = icm_check(model, "Z2", Point.for_model(model, z=[1.0, 2.5], u=[1.0, 0.5]))
    assert report.parent_params == ["Z2.a"]
    assert report.d_residual_d_parent.tolist() == [[-1.0]]
    assert not report.passed


def test_icm_penalty_zero_on_clean_model(chain2):
    samples = [Point.for_model(chain2),
               Point.for_model(chain2, z=[1.0, 2.0], u=[0.3, -0.4])]
    assert icm_penalty(chain2, samples) == 0.0


# ---------------------------------------------------------------------------
# Planted corpus: soundness and completeness


def test_planted_corpus_detection_exact():
    rng = np.random.default_rng(77)
    for index in range(40):
        case = planted_case(rng, index)
        model = case["model"]
        point = Point.for_model(model)
        lap_hits = {}
        for a, i in nondesc_pairs(model):
            rep = lap_check(model, a, i, point)
            if not rep.passed:
                lap_hits[(a, i)] = rep
        icm_first_hits = {}
        icm_mixed_hits = {}
        for node in model.dag.nodes:
            rep = icm_check(model, node, point)
            if not rep.passed_first:
                icm_first_hits[node] = rep
            if not rep.passed_mixed:
                icm_mixed_hits[node] = rep

        kind, coeff = case["kind"], case["coeff"]
        if kind is None:
            assert not lap_hits and not icm_first_hits and not icm_mixed_hits
        elif kind == "lap_z":
            a, i = case["where"]
            assert (a, i) in lap_hits
            rep = lap_hits[(a, i)]
            assert abs(abs(rep.z_block).max() - abs(coeff)) <= 1e-10
            # the symmetric orientation trips too; nothing else does
            assert set(lap_hits) <= {(a, i), (i, a)}
            assert not icm_first_hits and not icm_mixed_hits
        elif kind == "lap_theta":
            a, i = case["where"]
            assert (a, i) in lap_hits
            rep = lap_hits[(a, i)]
            assert abs(abs(rep.theta_block).max() - abs(coeff)) <= 1e-10
        elif kind == "icm_first":
            parent, child = case["where"]
            assert child in icm_first_hits
            rep = icm_first_hits[child]
            assert abs(abs(rep.d_residual_d_parent).max() - abs(coeff)) <= 1e-10
            assert not lap_hits
        else:  # icm_mixed
            parent, child = case["where"]
            assert child in icm_mixed_hits
            rep = icm_mixed_hits[child]
            assert abs(abs(rep.mixed_parent_own).max() - abs(coeff)) <= 1e-10
            assert child not in icm_first_hits  # zero-default own factor
            assert not lap_hits


# ---------------------------------------------------------------------------
# Metric


def test_metric_chain2(chain2):
    eq = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5})
    metric = causal_metric(chain2, eq)
    assert metric.tolist() == [[5.0, -2.0], [-2.0, 1.0]]


def test_metric_congruence(chain2):
    eq = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5})
    metric = causal_metric(chain2, eq)
    j = np.array([[2.0, 0.0], [0.0, 1.0]])
    assert metric_in_chart(metric, j).tolist() == [[20.0, -4.0], [-4.0, 1.0]]


def test_metric_per_module_rescale(chain2):
    eq = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5})
    metric = causal_metric(chain2, eq, scales={"Z2": 3.0})
    assert metric.tolist() == [[13.0, -6.0], [-6.0, 3.0]]


def test_metric_subset_via_schur(chain2):
    eq = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5})
    eff = causal_metric(chain2, eq, subset=["z.Z1"])
    assert eff.tolist() == [[1.0]]


def test_metric_rejects_saddles():
    spec = {
        "variables": [{"name": "Z1", "kind": "endogenous"},
                      {"name": "Z2", "kind": "endogenous"}],
        "edges": [],
        "terms": [
            {"owner": "local:Z1", "expr": "0.5*sq(z.Z1)"},
            {"owner": "local:Z2", "expr": "-0.5*sq(z.Z2)"},
        ],
    }
    model = parse_model(spec)
    eq = solve(model)  # stays at the origin saddle
    with pytest.raises(IndefiniteMetricError):
        causal_metric(model, eq)


# ---------------------------------------------------------------------------
# Susceptibility


def test_susceptibility_chain2_parameter(chain2):
    eq = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5})
    response = susceptibility(chain2, eq, "theta.Z2.a")
    assert response[0] == 0.0  # exactly zero: Z1 is upstream
    assert response[1] == pytest.approx(1.0, abs=1e-12)


def test_susceptibility_chain2_context(chain2):
    eq = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5})
    response = susceptibility(chain2, eq, "u.U2")
    assert response[0] == 0.0
    assert response[1] == pytest.approx(1.0, abs=1e-12)


def test_susceptibility_matches_resolve(chain2):
    eq = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5})
    response = susceptibility(chain2, eq, "theta.Z2.a")
    h = 1e-5
    up = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5},
               init_point=eq.point)
    theta_up = eq.point.theta.copy()
    theta_up[0] += h
    theta_dn = eq.point.theta.copy()
    theta_dn[0] -= h
    from escm.engine import Point as P

    eq_up = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5},
                  cfg=SolverConfig(init="point"),
                  init_point=P(eq.point.z.copy(), eq.point.u.copy(), theta_up))
    eq_dn = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5},
                  cfg=SolverConfig(init="point"),
                  init_point=P(eq.point.z.copy(), eq.point.u.copy(), theta_dn))
    fd = (eq_up.point.z - eq_dn.point.z) / (2 * h)
    assert np.allclose(response, fd, atol=1e-6)


def test_susceptibility_wrt_hard_clamp(chain2):
    from escm import apply_surgery

    edited = apply_surgery(chain2, hard(chain2, "Z1", 0.5))
    clamps = dict(edited.clamps)
    clamps.update({("u", 0): 1.0, ("u", 1): 0.5})
    eq = solve(edited.objective, clamps=clamps, free=[("z", 1)])
    response = susceptibility(edited.objective, eq, "z.Z1")
    assert response[0] == pytest.approx(2.0, abs=1e-12)  # dz2*/d(do value) = a


def test_susceptibility_rejects_free_coordinate(chain2):
    eq = solve(chain2, clamps={"u.U1": 1.0, "u.U2": 0.5})
    with pytest.raises(QueryError):
        susceptibility(chain2, eq, "z.Z1")


# ---------------------------------------------------------------------------
# Gauges and probe heads


def _points(model, seeds):
    rng = np.random.default_rng(seeds)
    return [Point.for_model(model, z=rng.uniform(-1.5, 1.5, size=model.nz),
                            u=rng.uniform(-1.0, 1.0, size=model.nu))
            for _ in range(4)]


def test_identity_gauge_preserves_everything(chain2):
    verdicts = gauge_preserved(chain2, GaugeTransform(), points=_points(chain2, 0))
    assert all(verdicts.values())


def test_offset_gauge_breaks_only_absolute_energies(chain2):
    verdicts = gauge_preserved(chain2, GaugeTransform(offset={"Z1": 5.0}),
                               points=_points(chain2, 1))
    assert verdicts == {"H_E": False, "H_dE": True, "H_gradE": True,
                        "H_deltaE": True, "H_Hess": True}
    # the energy head differs by exactly the offset
    gauged = apply_gauge(chain2, GaugeTransform(offset={"Z1": 5.0}))
    pts = _points(chain2, 1)
    base = probe(chain2, "H_E", pts)
    moved = probe(gauged, "H_E", pts)
    deltas = [m["Z1"] - b["Z1"] for b, m in zip(base.outputs, moved.outputs)]
    assert all(d == 5.0 for d in deltas)


def test_pure_scale_breaks_all_heads_when_magnitudes_recorded():
    model = parse_model(ISO_QUADRATIC)
    verdicts = gauge_preserved(model, GaugeTransform(scale={"Z1": 2.0, "Z2": 2.0}),
                               points=_points(model, 2))
    assert not any(verdicts.values())


def test_compensated_scale_on_isotropic_quadratic_preserves_all():
    model = parse_model(ISO_QUADRATIC)
    gauge = GaugeTransform(scale={"Z1": 4.0, "Z2": 4.0}, j=2.0 * np.eye(2))
    verdicts = gauge_preserved(model, gauge, points=_points(model, 3))
    assert all(verdicts.values())


def test_reflection_preserves_hessian_only():
    spec = {
        "variables": [{"name": "Z1", "kind": "endogenous"}],
        "edges": [],
        "terms": [{"owner": "local:Z1", "expr": "0.5*sq(z.Z1 - 1)"}],
    }
    model = parse_model(spec)
    gauge = GaugeTransform(j=np.array([[-1.0]]))
    verdicts = gauge_preserved(model, gauge, points=_points(model, 4))
    assert verdicts["H_Hess"] is True
    assert verdicts["H_E"] is False
    assert verdicts["H_gradE"] is False
    assert verdicts["H_deltaE"] is False


def test_gauge_hierarchy_upward_closure():
    """Preservation sets nest along the head order on sampled gauge families."""
    model = parse_model(ISO_QUADRATIC)
    rng = np.random.default_rng(5)
    pts = _points(model, 6)
    order = {head: k for k, head in enumerate(HEADS)}
    gauges = [GaugeTransform()]
    for _ in range(6):
        b = {f"Z{k + 1}": float(rng.uniform(-3, 3)) for k in range(2)}
        gauges.append(GaugeTransform(offset=b))
    for _ in range(6):
        a = float(rng.uniform(0.5, 3.0))
        gauges.append(GaugeTransform(scale={"Z1": a, "Z2": a}))
    for _ in range(6):
        s = float(rng.uniform(0.5, 2.0))
        gauges.append(GaugeTransform(scale={"Z1": s * s, "Z2": s * s},
                                     j=s * np.eye(2)))
    for gauge in gauges:
        verdicts = gauge_preserved(model, gauge, points=pts)
        # preserved by the absolute-energy head implies preserved everywhere
        if verdicts["H_E"]:
            assert all(verdicts.values())
        # the preserved set is upward closed in the head order
        preserved_ranks = [order[h] for h, ok in verdicts.items() if ok]
        broken_ranks = [order[h] for h, ok in verdicts.items() if not ok]
        if preserved_ranks and broken_ranks:
            assert max(broken_ranks) < min(preserved_ranks)


def test_singular_gauge_rejected():
    with pytest.raises(QueryError):
        GaugeTransform(j=np.zeros((2, 2)))
    with pytest.raises(QueryError):
        GaugeTransform(scale={"Z1": 0.0})


def test_probe_unknown_owner_rejected(chain2):
    with pytest.raises(QueryError):
        apply_gauge(chain2, GaugeTransform(scale={"nope": 2.0}))
