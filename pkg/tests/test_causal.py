"""Abduction, surgery, counterfactuals, and set-valued interventions."""

import numpy as np
import pytest

from escm import (
    Point,
    QueryError,
    abduct,
    apply_surgery,
    counterfactual,
    disjunctive,
    disjunctive_envelope,
    disjunctive_select,
    hard,
    parse_model,
    soft,
    solve,
)
from escm.engine import Objective
from tests.conftest import chain2_dict

EVIDENCE = {"z.Z1": 1.0, "z.Z2": 2.5}


def grid_abduction_oracle(model, evidence, bounds=(-1.0, 1.0), step=1e-3):
    """Brute-force abduction for chain2: refine a 2-D grid over u down to
    the requested step."""
    objective = Objective.from_model(model)
    point = Point.for_model(model, z=[evidence["z.Z1"], evidence["z.Z2"]])
    lo1, hi1 = bounds
    lo2, hi2 = bounds
    width = bounds[1] - bounds[0]
    current = width / 20.0
    best = (np.inf, 0.0, 0.0)
    while True:
        grid1 = np.arange(lo1, hi1 + current / 2, current)
        grid2 = np.arange(lo2, hi2 + current / 2, current)
        for u1 in grid1:
            for u2 in grid2:
                point.u[0], point.u[1] = u1, u2
                val = objective.value(point)
                if val < best[0]:
                    best = (val, u1, u2)
        if current <= step:
            return best[1], best[2]
        lo1, hi1 = best[1] - current, best[1] + current
        lo2, hi2 = best[2] - current, best[2] + current
        current = max(step, current / 10.0)


def test_abduction_recovers_exogenous(chain2):
    explanation = abduct(chain2, EVIDENCE)
    assert np.allclose(explanation.point.u, [0.5, 0.25], atol=1e-10)
    assert explanation.point.z[0] == 1.0 and explanation.point.z[1] == 2.5
    u1, u2 = grid_abduction_oracle(chain2, EVIDENCE)
    assert abs(explanation.point.u[0] - u1) <= 2e-3
    assert abs(explanation.point.u[1] - u2) <= 2e-3


def test_abduction_zero_evidence_is_zero(chain2):
    explanation = abduct(chain2, {"z.Z1": 0.0, "z.Z2": 0.0})
    assert np.all(explanation.point.u == 0.0)


def test_abduction_fully_clamped_echoes(chain2):
    ev = {"z.Z1": 3.0, "z.Z2": -1.0, "u.U1": 0.25, "u.U2": 0.75}
    explanation = abduct(chain2, ev)
    assert explanation.point.z.tolist() == [3.0, -1.0]
    assert explanation.point.u.tolist() == [0.25, 0.75]
    assert explanation.free == ()


def test_hard_surgery_bookkeeping(chain2):
    edited = apply_surgery(chain2, hard(chain2, "Z1", 0.0))
    assert [t.owner for t in edited.objective.terms] == ["Z2", "U1", "U2"]
    assert edited.clamps == {("z", 0): 0.0}
    # children still read the clamped value: solving gives z2 = a*0 + u2
    clamps = dict(edited.clamps)
    clamps.update({("u", 0): 0.5, ("u", 1): 0.25})
    eq = solve(edited.objective, clamps=clamps, free=[("z", 1)])
    assert eq.point.z[1] == pytest.approx(0.25, abs=1e-12)


def test_soft_lambda_zero_is_identity(chain2):
    edited = apply_surgery(chain2, soft(chain2, "Z1", 0.0, "0.5*sq(z.Z1 - 7)"))
    base = Objective.from_model(chain2)
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = Point.for_model(chain2, z=rng.normal(size=2), u=rng.normal(size=2))
        assert edited.objective.value(p) == base.value(p)


def test_soft_lambda_one_replaces(chain2):
    edited = apply_surgery(chain2, soft(chain2, "Z1", 1.0, "0.5*sq(z.Z1 - 7)"))
    p = Point.for_model(chain2, z=[7.0, 14.5], u=[999.0, 0.5])
    # original local term would see u.U1; the replacement ignores it
    assert edited.objective.value(p) == pytest.approx(
        0.5 * 999.0 ** 2 + 0.5 * 0.25, rel=1e-15)


def test_soft_replacement_respects_mask(chain2):
    with pytest.raises(Exception):
        soft(chain2, "Z1", 0.5, "0.5*sq(z.Z1 - z.Z2)")  # child state masked out


def test_duplicate_targets_rejected(chain2):
    with pytest.raises(QueryError):
        apply_surgery(chain2, [hard(chain2, "Z1", 0.0), hard(chain2, "Z1", 1.0)])


def test_counterfactual_chain2_fixture(chain2):
    result = counterfactual(chain2, EVIDENCE, [hard(chain2, "Z1", 0.0)],
                            readouts={"phi": "z.Z2"})
    assert np.allclose(result.explanation.point.u, [0.5, 0.25], atol=1e-10)
    assert result.post.z[0] == 0.0
    assert result.readouts["phi"] == pytest.approx(0.25, abs=1e-10)
    # exogenous invariance is exact
    assert np.array_equal(result.pre.u, result.post.u)


def test_counterfactual_nondescendant_frozen(chain2):
    result = counterfactual(chain2, EVIDENCE, [hard(chain2, "Z2", 9.0)],
                            readouts={"phi": "z.Z1"})
    assert result.readouts["phi"] == 1.0  # Z1 is not downstream of Z2
    assert result.post.z[0] == result.pre.z[0]


def test_counterfactual_soft_identity(chain2):
    # identity surgery at a free-equilibrium context changes nothing
    result = counterfactual(chain2, {"z.Z1": 0.0, "z.Z2": 0.0},
                            [soft(chain2, "Z2", 0.0, "0.5*sq(z.Z2 - 3)")])
    assert np.allclose(result.post.z, result.pre.z, atol=1e-12)
    assert np.array_equal(result.post.u, result.pre.u)
    # exogenous-context evidence is also a free equilibrium in z
    result = counterfactual(chain2, {"u.U1": 1.0, "u.U2": 0.5},
                            [soft(chain2, "Z2", 0.0, "0.5*sq(z.Z2 - 3)")])
    assert np.allclose(result.post.z, result.pre.z, atol=1e-10)


def test_counterfactual_soft_identity_reequilibrates_target(chain2):
    # with endogenous evidence the abducted point is not a free equilibrium:
    # the softly edited target re-minimizes to its best response
    result = counterfactual(chain2, EVIDENCE,
                            [soft(chain2, "Z2", 0.0, "0.5*sq(z.Z2 - 3)")])
    u2 = result.explanation.point.u[1]
    assert result.post.z[1] == pytest.approx(2.0 * 1.0 + u2, abs=1e-10)
    assert result.post.z[0] == result.pre.z[0]


def test_counterfactual_soft_endpoint_matches_hard(chain2):
    hard_result = counterfactual(chain2, EVIDENCE, [hard(chain2, "Z1", 4.0)],
                                 readouts={"phi": "z.Z2"})
    soft_result = counterfactual(chain2, EVIDENCE,
                                 [soft(chain2, "Z1", 1.0, "0.5*sq(z.Z1 - 4)")],
                                 readouts={"phi": "z.Z2"})
    assert abs(soft_result.post.z[0] - 4.0) <= 1e-8
    assert abs(soft_result.readouts["phi"] - hard_result.readouts["phi"]) <= 1e-8


def test_autonomy_check_resolving_nondescendants(chain2):
    # context evidence: the abducted point is an observational equilibrium
    context = {"u.U1": 1.0, "u.U2": 0.5}
    result = counterfactual(chain2, context, [hard(chain2, "Z2", 9.0)])
    assert result.post.z[0] == result.pre.z[0]  # frozen by policy
    edited = apply_surgery(chain2, hard(chain2, "Z2", 9.0))
    clamps = dict(edited.clamps)
    clamps.update({("u", k): result.pre.u[k] for k in range(2)})
    from escm import SolverConfig

    eq = solve(edited.objective, clamps=clamps, free=[("z", 0)],
               cfg=SolverConfig(init="point"), init_point=result.post)
    assert abs(eq.point.z[0] - result.post.z[0]) < 1e-8


def test_hold_override(chain2):
    # hold the descendant too: nothing re-minimizes, post equals pre off-target
    result = counterfactual(chain2, EVIDENCE, [hard(chain2, "Z1", 0.0)],
                            readouts={"phi": "z.Z2"},
                            hold={"hold": ["z.Z2"]})
    assert result.readouts["phi"] == 2.5


def test_envelope_chain2(chain2):
    env = disjunctive_envelope(chain2, EVIDENCE, "Z1", [0.0, 1.0], {"phi": "z.Z2"})
    values = {k[0]: v.readouts["phi"] for k, v in env.branches.items()}
    assert values[0.0] == pytest.approx(0.25, abs=1e-10)
    assert values[1.0] == pytest.approx(2.25, abs=1e-10)
    assert env.envelopes["phi"][0] == pytest.approx(0.25, abs=1e-10)
    assert env.envelopes["phi"][1] == pytest.approx(2.25, abs=1e-10)
    # endpoints of a two-branch envelope are exactly the singleton effects
    assert env.envelopes["phi"] == (min(values.values()), max(values.values()))


def test_envelope_singleton_and_duplicates(chain2):
    single = disjunctive_envelope(chain2, EVIDENCE, "Z1", [0.5], {"phi": "z.Z2"})
    assert single.envelopes["phi"][0] == single.envelopes["phi"][1]
    dup = disjunctive_envelope(chain2, EVIDENCE, "Z1", [1.0, 1.0], {"phi": "z.Z2"})
    assert len(dup.branches) == 1


def test_envelope_containment_random_sets(chain2):
    rng = np.random.default_rng(8)
    values = sorted(float(v) for v in rng.uniform(-2, 2, size=5))
    env = disjunctive_envelope(chain2, EVIDENCE, "Z1", values, {"phi": "z.Z2"})
    lo, hi = env.envelopes["phi"]
    for branch in env.branches.values():
        assert lo - 1e-12 <= branch.readouts["phi"] <= hi + 1e-12


def test_select_tie_breaks_lexicographically(chain2):
    sel = disjunctive_select(chain2, EVIDENCE, "Z1", [0.0, 1.0],
                             readouts={"phi": "z.Z2"})
    # both branches re-equilibrate to zero residual: energies tie at
    # 0.5*(0.5^2 + 0.25^2) and the smaller value wins
    for e in sel.branch_energies.values():
        assert e == pytest.approx(0.15625, abs=1e-12)
    assert sel.selected == (0.0,)
    assert sel.readouts["phi"] == pytest.approx(0.25, abs=1e-10)


def test_select_tiny_tau_matches_committed_choice(chain2):
    # distinct branch energies via a held descendant
    hold = {"hold": ["z.Z2"]}
    committed = disjunctive_select(chain2, EVIDENCE, "Z1", [0.0, 1.0],
                                   readouts={"phi": "z.Z1"}, hold=hold)
    blended = disjunctive_select(chain2, EVIDENCE, "Z1", [0.0, 1.0], tau=1e-9,
                                 readouts={"phi": "z.Z1"}, hold=hold)
    assert committed.selected == (1.0,)
    chosen = committed.branch_readouts[committed.selected]["phi"]
    assert abs(blended.readouts["phi"] - chosen) <= 1e-6


def test_select_softmin_converges_to_argmin(chain2):
    hold = {"hold": ["z.Z2"]}
    committed = disjunctive_select(chain2, EVIDENCE, "Z1", [0.0, 1.0],
                                   readouts={"phi": "z.Z1"}, hold=hold)
    blended = disjunctive_select(chain2, EVIDENCE, "Z1", [0.0, 1.0], tau=1e-6,
                                 readouts={"phi": "z.Z1"}, hold=hold)
    chosen = committed.branch_readouts[committed.selected]["phi"]
    assert abs(blended.readouts["phi"] - chosen) < 1e-6


def test_select_rho_sweep_flips_at_crossover(chain2):
    # with z.Z2 held at its abducted value, branch energies are
    # e(s) = 0.5*(2.25 - 2s)^2 + 0.15625; control sq(s) with weight rho
    # flips the choice from s=1 to s=0 at rho* = e(0) - e(1) = 2.5
    hold = {"hold": ["z.Z2"]}
    rho_grid = [0.0, 1.0, 2.0, 3.0, 4.0]
    selections = []
    for rho in rho_grid:
        sel = disjunctive_select(chain2, EVIDENCE, "Z1", [0.0, 1.0],
                                 rho=rho, control="sq(s)", hold=hold)
        selections.append(sel.selected[0])
    assert selections[0] == 1.0 and selections[-1] == 0.0
    flip = next(k for k in range(1, len(selections))
                if selections[k] != selections[k - 1])
    assert rho_grid[flip - 1] < 2.5 <= rho_grid[flip]


def test_select_large_rho_forces_smallest_norm(chain2):
    sel = disjunctive_select(chain2, EVIDENCE, "Z1", [-2.0, 0.5, 1.5],
                             rho=1e6, control="sq(s)")
    assert sel.selected == (0.5,)


def test_disjunctive_surgery_cannot_be_applied_directly(chain2):
    with pytest.raises(QueryError):
        apply_surgery(chain2, disjunctive(chain2, "Z1", [0.0, 1.0]))


def test_failing_branch_reports_branch_id():
    from escm import EnergyDomainError

    spec = chain2_dict()
    # the child's mechanism leaves its domain when the parent drops below -2
    spec["terms"][1]["expr"] = "0.5*sq(z.Z2 - log(2 + z.Z1) - u.U2)"
    model = parse_model(spec)
    with pytest.raises(EnergyDomainError) as err:
        disjunctive_envelope(model, {"u.U1": 1.0, "u.U2": 0.5}, "Z1",
                             [1.0, -3.0], {"phi": "z.Z2"})
    message = str(err.value)
    assert "branch" in message and "-3.0" in message
    assert message.count("at subexpression") == 1  # no nested re-annotation


def test_exogenous_evidence_supported(chain2):
    explanation = abduct(chain2, {"z.Z2": 2.0, "u.U1": 0.0})
    assert explanation.point.u[0] == 0.0
    # stationarity: z1 - 2*(2 - 2*z1 - u2) = 0 and u2 = (2 - 2*z1)/2,
    # which solves to z1 = 2/3
    assert abs(explanation.point.z[0] - 2.0 / 3.0) < 1e-9
