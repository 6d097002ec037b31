"""Vector-field semantics: trajectories, steady states, dynamic checks.

Dynamics are declared per endogenous variable (scalar variables only) and
obey the same parent mask as local energy terms.  Hard interventions act
as feedback control, replacing the target's component with
``gain * (value - z_target)``; soft interventions blend in a replacement
field.  Integration is classical fixed-step fourth-order Runge-Kutta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Objective, ObjectiveTerm, Point, Ref
from .errors import QueryError, SingularSystemError, SolverError
from .expr import compile_expr, parse_expr
from .model import Model
from .solver import SolverConfig

__all__ = [
    "Trajectory",
    "DynHardSurgery",
    "DynSoftSurgery",
    "SteadyState",
    "dyn_surgery_from_dict",
    "integrate",
    "steady_state",
    "dyn_lap_check",
    "dyn_icm_check",
    "dyn_lap_penalty",
    "dyn_icm_penalty",
]


@dataclass(frozen=True)
class DynHardSurgery:
    """Replace the target's field with feedback control toward ``value``."""

    target: str
    value: float
    gain: float = 10.0

    kind = "hard"

    def __post_init__(self):
        if not self.gain > 0:
            raise QueryError("feedback gain must be positive")


@dataclass(frozen=True)
class DynSoftSurgery:
    """Blend the target's field with a replacement at weight ``lam``."""

    target: str
    lam: float
    expr: str

    kind = "soft"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise QueryError("soft surgery weight must lie in [0, 1]")


def dyn_surgery_from_dict(model: Model, data: dict):
    if not isinstance(data, dict) or "kind" not in data:
        raise QueryError(f"bad dynamic surgery payload {data!r}")
    if data["kind"] == "hard":
        return DynHardSurgery(data["target"], float(data["value"]),
                              float(data.get("gain", 10.0)))
    if data["kind"] == "soft":
        return DynSoftSurgery(data["target"], float(data.get("lambda", data.get("lam"))),
                              data["expr"])
    raise QueryError(f"unknown dynamic surgery kind {data['kind']!r}")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), nz)
    events: list[dict] = field(default_factory=list)
    node_order: list[str] = field(default_factory=list)


def _require_dynamics(model: Model):
    if model.dynamics is None:
        raise QueryError("model declares no dynamics")
    for v in model.endogenous:
        if v.dim != 1:
            raise QueryError("dynamic semantics require scalar endogenous variables")
    return {comp.var: comp for comp in model.dynamics}


class _Field:
    """Evaluable vector field after surgery, with exact Jacobians."""

    def __init__(self, model: Model, surgeries=()):
        components = _require_dynamics(model)
        self.model = model
        self.objective = Objective.from_model(model)  # for coordinate maps
        self.nodes = [v.name for v in model.endogenous]
        self.rows: list[tuple[str, object]] = []
        hard: dict[str, DynHardSurgery] = {}
        soft: dict[str, DynSoftSurgery] = {}
        for s in surgeries:
            if isinstance(s, DynHardSurgery):
                hard[s.target] = s
            elif isinstance(s, DynSoftSurgery):
                soft[s.target] = s
            else:
                raise QueryError("dynamic surgeries must be DynHardSurgery or DynSoftSurgery")
        for name in list(hard) + list(soft):
            if name not in components:
                raise QueryError(f"dynamic surgery target {name!r} has no component")
        for name in self.nodes:
            if name in hard:
                self.rows.append(("hard", hard[name]))
                continue
            base = components[name].compiled
            if name in soft:
                s = soft[name]
                local = model.local_term(name)
                replacement = compile_expr(parse_expr(s.expr),
                                           model.term_resolver(local))
                pieces = []
                if s.lam < 1.0:
                    pieces.append((1.0 - s.lam, base))
                if s.lam > 0.0:
                    pieces.append((s.lam, replacement))
                self.rows.append(("term", ObjectiveTerm(name, pieces)))
            else:
                self.rows.append(("term", ObjectiveTerm(name, [(1.0, base)])))

    def value(self, z: np.ndarray, point: Point) -> np.ndarray:
        point.z[:] = z
        out = np.empty(len(self.rows))
        for k, (kind, payload) in enumerate(self.rows):
            if kind == "hard":
                out[k] = payload.gain * (payload.value - z[k])
            else:
                out[k] = self.objective._term_value(payload, point)
        return out

    def jacobian(self, z: np.ndarray, point: Point) -> np.ndarray:
        point.z[:] = z
        n = len(self.rows)
        jac = np.zeros((n, n))
        for k, (kind, payload) in enumerate(self.rows):
            if kind == "hard":
                jac[k, k] = -payload.gain
                continue
            z_refs = [r for r in payload.refs if r[0] == "z"]
            jet = self.objective.term_jet(payload, point, z_refs, order=1)
            if hasattr(jet, "grad"):
                for ref, g in zip(z_refs, jet.grad):
                    jac[k, ref[1]] = g
        return jac


def integrate(model: Model, z0, u, surgeries=(), t_end: float = 10.0,
              dt: float = 0.01, theta=None) -> Trajectory:
    """Fixed-step RK4 integration of the (possibly edited) field.

    Surgeries are active from t=0 and recorded as events.  Raises
    :class:`SolverError` on a non-finite state, reporting the last finite
    time.
    """
    if dt <= 0:
        raise QueryError("dt must be positive")
    if t_end < 0:
        raise QueryError("t_end must be non-negative")
    field_fn = _Field(model, surgeries)
    point = Point.for_model(model, u=u, theta=theta)
    z = np.asarray(z0, dtype=float).copy()
    if z.shape != (model.nz,):
        raise QueryError("z0 has the wrong length")

    steps = int(round(t_end / dt))
    times = np.empty(steps + 1)
    states = np.empty((steps + 1, model.nz))
    times[0] = 0.0
    states[0] = z
    for n in range(steps):
        k1 = field_fn.value(z, point)
        k2 = field_fn.value(z + 0.5 * dt * k1, point)
        k3 = field_fn.value(z + 0.5 * dt * k2, point)
        k4 = field_fn.value(z + dt * k3, point)
        z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise SolverError(
                f"state became non-finite at t={(n + 1) * dt:g}",
                diagnostics={"last_finite_time": n * dt, "state": states[n].copy()},
            )
        times[n + 1] = (n + 1) * dt
        states[n + 1] = z
    events = [{"t": 0.0, "surgery": f"{s.kind}:{s.target}"} for s in surgeries]
    return Trajectory(times=times, states=states, events=events,
                      node_order=[v.name for v in model.endogenous])


@dataclass
class SteadyState:
    z: np.ndarray
    stable: bool
    residual: float
    iterations: int
    jacobian: np.ndarray


def steady_state(model: Model, u, surgeries=(), cfg: SolverConfig | None = None,
                 z0=None, theta=None) -> SteadyState:
    """Newton solve of F(z)=0 with exact Jacobians.

    Stability is judged by the Jacobian spectrum at the root: all real
    parts strictly negative.
    """
    cfg = cfg or SolverConfig()
    field_fn = _Field(model, surgeries)
    point = Point.for_model(model, u=u, theta=theta)
    z = np.zeros(model.nz) if z0 is None else np.asarray(z0, dtype=float).copy()

    iterations = 0
    fval = field_fn.value(z, point)
    residual = float(np.max(np.abs(fval))) if model.nz else 0.0
    while residual > cfg.tol_grad:
        if iterations >= cfg.max_iter:
            raise SolverError(
                f"steady state not found after {cfg.max_iter} iterations "
                f"(residual {residual:.3e})",
                diagnostics={"residual": residual, "z": z.copy()})
        jac = field_fn.jacobian(z, point)
        try:
            step = np.linalg.solve(jac, -fval)
        except np.linalg.LinAlgError:
            raise SingularSystemError("field Jacobian is singular") from None
        t = 1.0
        norm0 = float(np.linalg.norm(fval))
        while t >= 1e-14:
            cand = z + t * step
            f_new = field_fn.value(cand, point)
            if np.all(np.isfinite(f_new)) and float(np.linalg.norm(f_new)) < norm0:
                z, fval = cand, f_new
                break
            t *= 0.5
        else:
            raise SolverError("steady-state line search failed",
                              diagnostics={"residual": residual, "z": z.copy()})
        residual = float(np.max(np.abs(fval)))
        iterations += 1

    jac = field_fn.jacobian(z, point)
    eigenvalues = np.linalg.eigvals(jac)
    stable = bool(np.all(eigenvalues.real < 0.0))
    return SteadyState(z=z, stable=stable, residual=residual,
                       iterations=iterations, jacobian=jac)


# ---------------------------------------------------------------------------
# Dynamic locality / independence checks


@dataclass
class DynLapReport:
    pair: tuple[str, str]
    z_block: np.ndarray
    theta_block: np.ndarray
    max_abs_z: float
    max_abs_theta: float
    tol: float
    eliminated: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return max(self.max_abs_z, self.max_abs_theta) <= self.tol


def _component_derivs(model: Model, point: Point, theta_owner: str | None):
    """Jacobian dF/dz and, when requested, dF/dtheta_owner, exactly."""
    components = _require_dynamics(model)
    objective = Objective.from_model(model)
    nodes = [v.name for v in model.endogenous]
    n = len(nodes)
    theta_refs: list[Ref] = []
    if theta_owner is not None:
        theta_refs = [("theta", k)
                      for k in model.module_theta_refs(theta_owner, dynamics=True)]
    jac = np.zeros((n, n))
    dtheta = np.zeros((n, len(theta_refs)))
    for k, name in enumerate(nodes):
        term = ObjectiveTerm(name, [(1.0, components[name].compiled)])
        active = [r for r in term.refs if r[0] == "z"] + \
                 [r for r in theta_refs if r in term.refs]
        jet = objective.term_jet(term, point, active, order=1)
        if not hasattr(jet, "grad"):
            continue
        for ref, g in zip(active, jet.grad):
            if ref[0] == "z":
                jac[k, ref[1]] = g
            else:
                dtheta[k, theta_refs.index(ref)] = g
    return nodes, jac, dtheta, theta_refs


def dyn_lap_check(model: Model, a: str, i: str, point: Point,
                  tol: float = 1e-10, eliminate=()) -> DynLapReport:
    """Exact partials dF_i/dz_a and dF_i/dtheta_a; i must be a
    non-descendant of a.

    ``eliminate`` names coordinates removed by substitution: the check then
    applies to the reduced field obtained by solving those components'
    stationarity and chaining through them.
    """
    from .errors import PairError

    if i == a or i in model.descendants(a):
        raise PairError(f"{i!r} is {a!r} or one of its descendants")
    nodes, jac, dtheta, _ = _component_derivs(model, point, theta_owner=a)
    index = {name: k for k, name in enumerate(nodes)}
    eliminated = tuple(eliminate)
    if eliminated:
        if i in eliminated or a in eliminated:
            raise QueryError("cannot eliminate the pair coordinates themselves")
        drop = [index[name] for name in eliminated]
        keep = [k for k in range(len(nodes)) if k not in set(drop)]
        j_cc = jac[np.ix_(drop, drop)]
        try:
            solve_cf = np.linalg.solve(j_cc, jac[np.ix_(drop, keep)])
            solve_ct = np.linalg.solve(j_cc, dtheta[drop])
        except np.linalg.LinAlgError:
            raise SingularSystemError("eliminated block is singular") from None
        jac_red = jac[np.ix_(keep, keep)] - jac[np.ix_(keep, drop)] @ solve_cf
        dtheta_red = dtheta[keep] - jac[np.ix_(keep, drop)] @ solve_ct
        kept_names = [nodes[k] for k in keep]
        row = kept_names.index(i)
        col = kept_names.index(a)
        z_block = jac_red[row:row + 1, col:col + 1]
        theta_block = dtheta_red[row:row + 1, :]
    else:
        z_block = jac[index[i]:index[i] + 1, index[a]:index[a] + 1]
        theta_block = dtheta[index[i]:index[i] + 1, :]
    return DynLapReport(
        pair=(a, i),
        z_block=z_block,
        theta_block=theta_block,
        max_abs_z=float(np.max(np.abs(z_block))) if z_block.size else 0.0,
        max_abs_theta=float(np.max(np.abs(theta_block))) if theta_block.size else 0.0,
        tol=tol,
        eliminated=eliminated,
    )


@dataclass
class DynIcmReport:
    node: str
    first: np.ndarray   # dF_i/dtheta_PA(i)
    mixed: np.ndarray   # d2F_i/(dtheta_PA(i) dtheta_i)
    max_abs_first: float
    max_abs_mixed: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.max_abs_first, self.max_abs_mixed) <= self.tol


def dyn_icm_check(model: Model, i: str, point: Point,
                  tol: float = 1e-10) -> DynIcmReport:
    """Parent-parameter derivatives of the component F_i, first and mixed."""
    components = _require_dynamics(model)
    if i not in components:
        raise QueryError(f"no dynamics component for {i!r}")
    objective = Objective.from_model(model)
    seen: dict[Ref, None] = {}
    for p in model.dag.parents(i):
        for k in model.module_theta_refs(p, dynamics=True):
            seen.setdefault(("theta", k), None)
    parent_refs = list(seen)
    own_refs = [("theta", k) for k in model.module_theta_refs(i, dynamics=True)]
    dp, do = len(parent_refs), len(own_refs)
    if dp == 0:
        return DynIcmReport(i, np.zeros((1, 0)), np.zeros((1, 0, do)), 0.0, 0.0, tol)
    term = ObjectiveTerm(i, [(1.0, components[i].compiled)])
    # shared parameters may sit in both sets; evaluate on unique slots
    active = list(dict.fromkeys(parent_refs + own_refs))
    slot = {ref: k for k, ref in enumerate(active)}
    jet = objective.term_jet(term, point, active, order=2)
    first = np.zeros((1, dp))
    mixed = np.zeros((1, dp, do))
    if hasattr(jet, "grad"):
        for a, pref in enumerate(parent_refs):
            first[0, a] = jet.grad[slot[pref]]
            for b, oref in enumerate(own_refs):
                mixed[0, a, b] = jet.hess[slot[pref], slot[oref]]
    return DynIcmReport(
        node=i,
        first=first,
        mixed=mixed,
        max_abs_first=float(np.max(np.abs(first))) if first.size else 0.0,
        max_abs_mixed=float(np.max(np.abs(mixed))) if mixed.size else 0.0,
        tol=tol,
    )


def dyn_lap_penalty(model: Model, samples: list[Point], lam=1.0, mu=1.0) -> float:
    """Sampled penalty mirroring the static locality aggregation."""
    if not samples:
        raise QueryError("dyn_lap_penalty needs at least one sample point")
    from .diagnostics import _pair_weight, nondesc_pairs

    total = 0.0
    for point in samples:
        for pair in nondesc_pairs(model):
            report = dyn_lap_check(model, pair[0], pair[1], point)
            w_l = _pair_weight(lam, pair, 0.0 if isinstance(lam, dict) else 1.0)
            w_m = _pair_weight(mu, pair, 0.0 if isinstance(mu, dict) else 1.0)
            total += w_l * float(np.sum(report.z_block ** 2))
            total += w_m * float(np.sum(report.theta_block ** 2))
    return total / len(samples)


def dyn_icm_penalty(model: Model, samples: list[Point], alpha=1.0, beta=1.0) -> float:
    """Sampled penalty mirroring the static independence aggregation."""
    if not samples:
        raise QueryError("dyn_icm_penalty needs at least one sample point")
    from .diagnostics import _pair_weight

    total = 0.0
    for point in samples:
        for node in model.dag.nodes:
            report = dyn_icm_check(model, node, point)
            w_a = _pair_weight(alpha, node, 0.0 if isinstance(alpha, dict) else 1.0)
            w_b = _pair_weight(beta, node, 0.0 if isinstance(beta, dict) else 1.0)
            total += w_a * float(np.sum(report.first ** 2))
            total += w_b * float(np.sum(report.mixed ** 2))
    return total / len(samples)
