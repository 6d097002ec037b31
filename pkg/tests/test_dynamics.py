"""Trajectories, steady states, and dynamic locality/independence checks."""

import numpy as np
import pytest

from escm import (
    DynHardSurgery,
    DynSoftSurgery,
    Point,
    QueryError,
    SolverError,
    integrate,
    parse_model,
    solve,
    steady_state,
)
from escm.dynamics import (
    dyn_icm_check,
    dyn_icm_penalty,
    dyn_lap_check,
    dyn_lap_penalty,
    dyn_surgery_from_dict,
)
from escm.engine import Objective
from tests.conftest import chain2_dict
from escm.corpus import random_quadratic_model


def test_integrate_converges_to_static_equilibrium(chain2_dyn):
    traj = integrate(chain2_dyn, [0.0, 0.0], [1.0, 0.5], t_end=20.0, dt=0.01)
    assert np.allclose(traj.states[-1], [1.0, 2.5], atol=1e-6)
    assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(20.0)


def test_zero_field_stays_constant():
    spec = chain2_dict()
    spec["dynamics"] = [{"var": "Z1", "expr": "0"}, {"var": "Z2", "expr": "0"}]
    model = parse_model(spec)
    traj = integrate(model, [0.3, -0.7], [0.0, 0.0], t_end=1.0, dt=0.1)
    assert np.all(traj.states == traj.states[0])


def test_feedback_control_drives_target(chain2_dyn):
    surgeries = [DynHardSurgery("Z1", 0.0, gain=10.0)]
    traj = integrate(chain2_dyn, [1.0, 2.5], [1.0, 0.5], surgeries,
                     t_end=20.0, dt=0.01)
    assert abs(traj.states[-1, 0]) < 1e-6
    assert abs(traj.states[-1, 1] - 0.5) < 1e-6
    assert traj.events == [{"t": 0.0, "surgery": "hard:Z1"}]


def test_feedback_exponential_rate(chain2_dyn):
    kappa = 10.0
    dt = 0.005
    traj = integrate(chain2_dyn, [1.0, 2.5], [1.0, 0.5],
                     [DynHardSurgery("Z1", 0.0, gain=kappa)], t_end=2.0, dt=dt)
    initial = abs(traj.states[0, 0])
    for t, state in zip(traj.times, traj.states):
        assert abs(state[0]) <= np.exp(-kappa * t) * initial + 1e-6


def test_blowup_reports_last_finite_time():
    spec = chain2_dict()
    spec["dynamics"] = [{"var": "Z1", "expr": "sq(z.Z1)*z.Z1"},
                        {"var": "Z2", "expr": "0"}]
    model = parse_model(spec)
    with pytest.raises(SolverError) as err:
        integrate(model, [5.0, 0.0], [0.0, 0.0], t_end=10.0, dt=0.1)
    assert "last_finite_time" in err.value.diagnostics


def test_steady_state_matches_static(chain2_dyn):
    ss = steady_state(chain2_dyn, [1.0, 0.5])
    assert np.allclose(ss.z, [1.0, 2.5], atol=1e-10)
    assert ss.stable
    eq = solve(chain2_dyn, clamps={"u.U1": 1.0, "u.U2": 0.5})
    assert np.max(np.abs(ss.z - eq.point.z)) <= 1e-8


def test_unstable_scalar_flagged():
    spec = {
        "variables": [{"name": "Z1", "kind": "endogenous"}],
        "edges": [],
        "terms": [{"owner": "local:Z1", "expr": "0.5*sq(z.Z1)"}],
        "dynamics": [{"var": "Z1", "expr": "z.Z1"}],
    }
    model = parse_model(spec)
    ss = steady_state(model, [])
    assert ss.z[0] == pytest.approx(0.0, abs=1e-12)
    assert not ss.stable


def test_steady_state_after_feedback(chain2_dyn):
    for kappa in (0.5, 3.0, 25.0):
        ss = steady_state(chain2_dyn, [1.0, 0.5],
                          [DynHardSurgery("Z1", 0.0, gain=kappa)])
        assert np.allclose(ss.z, [0.0, 0.5], atol=1e-10)
        assert ss.stable


def test_energy_descends_along_blockwise_flow():
    rng = np.random.default_rng(14)
    spec = random_quadratic_model(rng, n_nodes=5, density=0.6, dynamics=True)
    model = parse_model(spec)
    u = rng.uniform(-1.0, 1.0, size=model.nu)
    z0 = rng.uniform(-2.0, 2.0, size=model.nz)
    traj = integrate(model, z0, u, t_end=8.0, dt=0.02)
    objective = Objective.from_model(model)
    energies = [objective.value(Point.for_model(model, z=state, u=u))
                for state in traj.states[::10]]
    for a, b in zip(energies, energies[1:]):
        assert b <= a + 1e-9


def test_soft_dynamic_surgery_blends(chain2_dyn):
    replacement = "-(z.Z1 - 4)"
    full = steady_state(chain2_dyn, [1.0, 0.5],
                        [DynSoftSurgery("Z1", 1.0, replacement)])
    assert full.z[0] == pytest.approx(4.0, abs=1e-10)
    half = steady_state(chain2_dyn, [1.0, 0.5],
                        [DynSoftSurgery("Z1", 0.5, replacement)])
    # blended field: -(z-1)/2 - (z-4)/2 = 0 at z = 2.5
    assert half.z[0] == pytest.approx(2.5, abs=1e-10)
    identity = steady_state(chain2_dyn, [1.0, 0.5],
                            [DynSoftSurgery("Z1", 0.0, replacement)])
    assert identity.z[0] == pytest.approx(1.0, abs=1e-10)


def test_dyn_lap_clean_pair(chain2_dyn):
    report = dyn_lap_check(chain2_dyn, "Z2", "Z1", Point.for_model(chain2_dyn))
    assert report.max_abs_z == 0.0
    assert report.passed


def test_dyn_lap_planted_violation():
    spec = chain2_dict()
    spec["dynamics"] = [
        {"var": "Z1", "expr": "-(z.Z1 - u.U1) + 0.2*z.Z2"},
        {"var": "Z2", "expr": "-(z.Z2 - theta.Z2.a*z.Z1 - u.U2)"},
    ]
    model = parse_model(spec, mask_policy="warn")
    report = dyn_lap_check(model, "Z2", "Z1", Point.for_model(model))
    assert report.z_block.tolist() == [[0.2]]
    assert not report.passed


def test_dyn_lap_elimination_option(chain2_dyn):
    spec = chain2_dict()
    spec["variables"].insert(2, {"name": "Z3", "kind": "endogenous"})
    spec["terms"].insert(2, {"owner": "local:Z3", "expr": "0.5*sq(z.Z3)"})
    spec["dynamics"] = [
        {"var": "Z1", "expr": "-(z.Z1 - u.U1)"},
        {"var": "Z3", "expr": "-z.Z3"},
        {"var": "Z2", "expr": "-(z.Z2 - theta.Z2.a*z.Z1 - u.U2)"},
    ]
    model = parse_model(spec)
    report = dyn_lap_check(model, "Z2", "Z1", Point.for_model(model),
                           eliminate=("Z3",))
    assert report.passed
    with pytest.raises(QueryError):
        dyn_lap_check(model, "Z2", "Z1", Point.for_model(model),
                      eliminate=("Z1",))


def test_dyn_icm_clean_and_planted(chain2_dyn):
    clean = dyn_icm_check(chain2_dyn, "Z2", Point.for_model(chain2_dyn))
    assert clean.passed  # Z1's mechanism has no parameters

    spec = chain2_dict()
    spec["terms"][0]["expr"] = "0.5*sq(z.Z1 - theta.Z1.b*u.U1)"
    spec["terms"][0]["params"] = {"b": 1.0}
    spec["dynamics"] = [
        {"var": "Z1", "expr": "-(z.Z1 - theta.Z1.b*u.U1)"},
        {"var": "Z2", "expr": "-(z.Z2 - theta.Z2.a*z.Z1 - u.U2) + 0.4*theta.Z1.b"},
    ]
    model = parse_model(spec)
    report = dyn_icm_check(model, "Z2", Point.for_model(model))
    assert report.first.ravel().tolist() == [0.4]
    assert not report.passed


def test_dyn_penalties(chain2_dyn):
    samples = [Point.for_model(chain2_dyn)]
    assert dyn_lap_penalty(chain2_dyn, samples) == 0.0
    assert dyn_icm_penalty(chain2_dyn, samples) == 0.0

    spec = chain2_dict()
    spec["dynamics"] = [
        {"var": "Z1", "expr": "-(z.Z1 - u.U1) + 0.2*z.Z2"},
        {"var": "Z2", "expr": "-(z.Z2 - theta.Z2.a*z.Z1 - u.U2)"},
    ]
    model = parse_model(spec, mask_policy="warn")
    assert dyn_lap_penalty(model, [Point.for_model(model)]) == pytest.approx(0.04)


def test_dyn_surgery_from_dict(chain2_dyn):
    s = dyn_surgery_from_dict(chain2_dyn, {"kind": "hard", "target": "Z1",
                                           "value": 1.0, "gain": 5.0})
    assert isinstance(s, DynHardSurgery) and s.gain == 5.0
    with pytest.raises(QueryError):
        dyn_surgery_from_dict(chain2_dyn, {"kind": "hard", "target": "Z1",
                                           "value": 0.0, "gain": -1.0})


def test_requires_dynamics(chain2):
    with pytest.raises(QueryError):
        integrate(chain2, [0.0, 0.0], [0.0, 0.0], t_end=1.0, dt=0.1)
    with pytest.raises(QueryError):
        steady_state(chain2, [0.0, 0.0])
