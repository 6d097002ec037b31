"""Modularity diagnostics, equilibrium geometry, and gauge probes.

Locality checks ask whether a non-descendant's state or parameters enter a
module's effective stationarity condition: exact mixed partials of the
pair energy must vanish.  Mechanism-independence checks ask whether parent
parameters deform a module's residual: first and mixed second parameter
derivatives of the residual must vanish.  Both are computed exactly, so
clean models fail only at exactly zero and planted coefficients are
recovered bit-for-bit.

The probe heads measure what a model commits to numerically at shared
sample points in a fixed chart: per-module energies, partials, gradients,
differences against a base point, and Hessians.  A gauge transform
(per-module positive scale and offset plus an invertible linear latent
map) is "preserved" by a head when the head's numbers do not move.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Objective, Point, Ref, _as_objective
from .errors import IndefiniteMetricError, QueryError, SingularSystemError
from .model import Model
from .solver import Equilibrium, normalize_refs, schur_effective_hessian

__all__ = [
    "LapReport",
    "IcmReport",
    "GaugeTransform",
    "ProbeReport",
    "HEADS",
    "nondesc_pairs",
    "lap_check",
    "lap_penalty",
    "icm_check",
    "icm_penalty",
    "causal_metric",
    "metric_in_chart",
    "susceptibility",
    "apply_gauge",
    "GaugedModel",
    "probe",
    "gauge_preserved",
]

HEADS = ("H_E", "H_dE", "H_gradE", "H_deltaE", "H_Hess")

STRUCTURAL_TOL = 1e-10


def nondesc_pairs(model: Model) -> list[tuple[str, str]]:
    """All ordered pairs (A, i) with i a non-descendant of A."""
    out = []
    for a in model.dag.nodes:
        for i in model.dag.nodes:
            if i != a and i in model.nondescendants(a):
                out.append((a, i))
    return out


# ---------------------------------------------------------------------------
# Locality (non-descendant) checks


@dataclass
class LapReport:
    pair: tuple[str, str]
    z_block: np.ndarray
    theta_block: np.ndarray
    theta_labels: list[str]
    max_abs_z: float
    max_abs_theta: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.max_abs_z, self.max_abs_theta) <= self.tol


def lap_check(model: Model, a: str, i: str, point: Point,
              tol: float = STRUCTURAL_TOL) -> LapReport:
    """Exact cross-partials of module i's pair energy with respect to the
    state and parameters of non-descendant A."""
    from .engine import effective_energy_pair

    pair = effective_energy_pair(model, a, i, point)
    z_block = pair.cross_zz()
    theta_block = pair.cross_ztheta()
    return LapReport(
        pair=(a, i),
        z_block=z_block,
        theta_block=theta_block,
        theta_labels=pair.theta_a_labels,
        max_abs_z=float(np.max(np.abs(z_block))) if z_block.size else 0.0,
        max_abs_theta=float(np.max(np.abs(theta_block))) if theta_block.size else 0.0,
        tol=tol,
    )


def _pair_weight(weights, pair: tuple[str, str], default: float) -> float:
    if weights is None:
        return default
    if isinstance(weights, dict):
        return float(weights.get(pair, default))
    return float(weights)


def lap_penalty(model: Model, samples: list[Point], lam=1.0, mu=1.0,
                default: float = 0.0) -> float:
    """Mean over samples of the weighted squared Frobenius norms of both
    cross-partial blocks, summed over all non-descendant pairs.

    ``lam``/``mu`` may be scalars or dicts keyed by the (A, i) pair;
    ``default`` is the weight for pairs missing from a dict.
    """
    if not samples:
        raise QueryError("lap_penalty needs at least one sample point")
    pairs = nondesc_pairs(model)
    total = 0.0
    for point in samples:
        for pair in pairs:
            report = lap_check(model, pair[0], pair[1], point)
            w_l = _pair_weight(lam, pair, default if isinstance(lam, dict) else 1.0)
            w_m = _pair_weight(mu, pair, default if isinstance(mu, dict) else 1.0)
            total += w_l * float(np.sum(report.z_block ** 2))
            total += w_m * float(np.sum(report.theta_block ** 2))
    return total / len(samples)


# ---------------------------------------------------------------------------
# Mechanism-independence (parameter) checks


@dataclass
class IcmReport:
    node: str
    parent_params: list[str]
    own_params: list[str]
    d_residual_d_parent: np.ndarray       # (dim_i, n_parent_params)
    mixed_parent_own: np.ndarray          # (dim_i, n_parent_params, n_own_params)
    max_abs_first: float
    max_abs_mixed: float
    tol: float

    @property
    def passed_first(self) -> bool:
        return self.max_abs_first <= self.tol

    @property
    def passed_mixed(self) -> bool:
        return self.max_abs_mixed <= self.tol

    @property
    def passed(self) -> bool:
        return self.passed_first and self.passed_mixed


def icm_check(model: Model, i: str, point: Point,
              tol: float = STRUCTURAL_TOL) -> IcmReport:
    """Parameter derivatives of node i's residual (the z_i gradient of the
    total energy) with respect to parent parameters, and the mixed
    parent-own second derivatives.  Nodes without parents pass with empty
    blocks.

    A parent's parameter set is usage-based (declared plus read), so a
    child parameter reused inside a parent's mechanism is correctly
    attributed to the parent side of the check."""
    if model.var(i).kind != "endogenous":
        raise QueryError(f"{i!r} is not endogenous")
    objective = Objective.from_model(model)
    zi = [("z", k) for k in model.coord_indices("z", i)]
    seen: dict[Ref, None] = {}
    for p in model.dag.parents(i):
        for k in model.module_theta_refs(p):
            seen.setdefault(("theta", k), None)
    parent_refs = list(seen)
    parent_labels = [model.coord_label("theta", r[1])[len("theta."):] for r in parent_refs]
    own_refs = [("theta", k) for k in model.module_theta_refs(i)]
    own_labels = [model.coord_label("theta", r[1])[len("theta."):] for r in own_refs]

    di, dp, do = len(zi), len(parent_refs), len(own_refs)
    if dp == 0:
        return IcmReport(i, [], own_labels, np.zeros((di, 0)), np.zeros((di, 0, do)),
                         0.0, 0.0, tol)

    active = zi + parent_refs + own_refs
    full = objective.derivatives(point, order=3, active=active)
    rows = [objective.gidx(r) for r in zi]
    cols_p = [objective.gidx(r) for r in parent_refs]
    cols_o = [objective.gidx(r) for r in own_refs]
    first = full.hess[np.ix_(rows, cols_p)]
    mixed = (full.third[np.ix_(rows, cols_p, cols_o)]
             if do else np.zeros((di, dp, 0)))
    return IcmReport(
        node=i,
        parent_params=parent_labels,
        own_params=own_labels,
        d_residual_d_parent=first,
        mixed_parent_own=mixed,
        max_abs_first=float(np.max(np.abs(first))) if first.size else 0.0,
        max_abs_mixed=float(np.max(np.abs(mixed))) if mixed.size else 0.0,
        tol=tol,
    )


def icm_penalty(model: Model, samples: list[Point], alpha=1.0, beta=1.0,
                default: float = 0.0) -> float:
    """Mean over samples of the weighted squared norms of the residual's
    parent-parameter derivatives and the mixed parent-own interactions."""
    if not samples:
        raise QueryError("icm_penalty needs at least one sample point")
    total = 0.0
    for point in samples:
        for node in model.dag.nodes:
            report = icm_check(model, node, point)
            w_a = _pair_weight(alpha, node, default if isinstance(alpha, dict) else 1.0)
            w_b = _pair_weight(beta, node, default if isinstance(beta, dict) else 1.0)
            total += w_a * float(np.sum(report.d_residual_d_parent ** 2))
            total += w_b * float(np.sum(report.mixed_parent_own ** 2))
    return total / len(samples)


# ---------------------------------------------------------------------------
# Equilibrium geometry


def _free_z_positions(objective: Objective, eq: Equilibrium) -> tuple[list[int], list[Ref]]:
    refs = [r for r in eq.free if r[0] == "z"]
    return [i for i, r in enumerate(eq.free) if r[0] == "z"], refs


def causal_metric(target, eq: Equilibrium, subset=None, scales=None,
                  mode: str = "minimize") -> np.ndarray:
    """Free-block curvature at a stable equilibrium: a local inner product
    on latent perturbations, in energetic units.

    ``subset`` restricts to a coordinate subset through the effective
    (re-minimized or clamped) curvature.  ``scales`` applies per-module
    energy rescalings via the term attribution blocks.
    """
    objective = _as_objective(target)
    _, z_refs = _free_z_positions(objective, eq)
    if not z_refs:
        raise QueryError("equilibrium has no free z coordinates")
    rows = [objective.gidx(r) for r in z_refs]

    if scales is None:
        full = objective.derivatives(eq.point, order=2)
        metric = full.hess[np.ix_(rows, rows)]
    else:
        second = objective.second_order(eq.point)
        z_idx = [r[1] for r in z_refs]
        metric = np.zeros((len(z_idx), len(z_idx)))
        for owner, blocks in second.attribution.items():
            a = float(scales.get(owner, 1.0))
            metric = metric + a * blocks["zz"][np.ix_(z_idx, z_idx)]

    try:
        np.linalg.cholesky(metric)
    except np.linalg.LinAlgError:
        raise IndefiniteMetricError(
            "free-block curvature is not positive definite (saddle); "
            "no metric is defined here") from None
    if not eq.hessian_pd:
        raise IndefiniteMetricError("equilibrium was flagged as a saddle")

    if subset is None:
        return metric
    keep_refs = normalize_refs(objective, subset)
    positions = []
    for ref in keep_refs:
        if ref not in z_refs:
            raise QueryError(f"subset coordinate {ref} is not a free z coordinate")
        positions.append(z_refs.index(ref))
    return schur_effective_hessian(metric, positions, mode=mode)


def metric_in_chart(metric: np.ndarray, chart_jacobian: np.ndarray) -> np.ndarray:
    """Congruence transform of the metric under a linear chart z = J zeta."""
    j = np.asarray(chart_jacobian, dtype=float)
    return j.T @ np.asarray(metric, dtype=float) @ j


def _exact_zero_support(objective: Objective, eq: Equilibrium,
                        wrt: Ref) -> list[Ref] | None:
    """Free coordinates that can respond to ``wrt``, or None when the
    structural argument does not apply and a dense solve is required.

    Valid only for separable objectives where every clamped endogenous
    coordinate lost its local term (a hard edit): then responses flow
    strictly downstream of the terms that read ``wrt``, and all other
    responses are exactly zero.
    """
    model = objective.model
    if objective.has_global() or model.mask_warnings:
        return None
    if any(r[0] != "z" for r in eq.free):
        return None
    retained = {t.owner for t in objective.terms}
    for ref in eq.clamps:
        if ref[0] == "z":
            owner = next(v.name for v in model.endogenous
                         if ref[1] in model.coord_indices("z", v.name))
            if owner in retained:
                return None  # conditioning on an un-edited module: dense path
    responders: set[str] = set()
    for term in objective.terms:
        if model.term_by_label.get(term.owner) is None:
            continue
        if model.term_by_label[term.owner].owner_kind != "local":
            continue
        if wrt in term.refs:
            responders.add(term.owner)
            responders |= set(model.descendants(term.owner))
    return [r for r in eq.free
            if any(r[1] in model.coord_indices("z", v) for v in responders)]


def susceptibility(target, eq: Equilibrium, wrt) -> np.ndarray:
    """Implicit-function response of the equilibrium to one coordinate.

    ``wrt`` is a u coordinate, a theta coordinate, or a clamped z
    coordinate; the result is aligned with ``eq.free``.  On separable
    models the structurally-unreachable entries are exactly zero.
    """
    objective = _as_objective(target)
    (wref,) = normalize_refs(objective, [wrt])
    if wref[0] == "z" and wref not in eq.clamps:
        raise QueryError("susceptibility with respect to a z coordinate "
                         "requires it to be clamped")
    if wref in eq.free:
        raise QueryError("cannot differentiate with respect to a free coordinate")

    free_gidx = np.array([objective.gidx(r) for r in eq.free], dtype=int)
    full = objective.derivatives(eq.point, order=2)
    rhs_full = full.hess[free_gidx, objective.gidx(wref)]
    response = np.zeros(len(eq.free))

    support = _exact_zero_support(objective, eq, wref)
    if support is not None:
        if not support:
            return response
        pos = [eq.free.index(r) for r in support]
        sub = full.hess[np.ix_(free_gidx[pos], free_gidx[pos])]
        try:
            response[pos] = np.linalg.solve(sub, -rhs_full[pos])
        except np.linalg.LinAlgError:
            raise SingularSystemError("free-block curvature is singular") from None
        return response

    h_ff = full.hess[np.ix_(free_gidx, free_gidx)]
    try:
        return np.linalg.solve(h_ff, -rhs_full)
    except np.linalg.LinAlgError:
        raise SingularSystemError("free-block curvature is singular") from None


# ---------------------------------------------------------------------------
# Gauge transforms and probe heads


@dataclass
class GaugeTransform:
    """Per-module energy rescaling/offset plus a linear latent map.

    The gauged energy of module i at the numeric point w is
    ``a_i * E_i(J^{-1} w) + b_i`` with u and theta untouched.
    """

    scale: dict[str, float] = field(default_factory=dict)
    offset: dict[str, float] = field(default_factory=dict)
    j: np.ndarray | None = None

    def __post_init__(self):
        for owner, a in self.scale.items():
            if not a > 0:
                raise QueryError(f"gauge scale for {owner!r} must be positive")
        if self.j is not None:
            self.j = np.asarray(self.j, dtype=float)
            n = self.j.shape[0]
            if self.j.shape != (n, n):
                raise QueryError("gauge latent map must be square")
            if abs(np.linalg.det(self.j)) <= 1e-12:
                raise QueryError("gauge latent map is singular")


class GaugedModel:
    """Read-only gauged view of a model, evaluable by the probe heads."""

    def __init__(self, model: Model, gauge: GaugeTransform):
        if gauge.j is not None and gauge.j.shape[0] != model.nz:
            raise QueryError("gauge latent map does not match the z dimension")
        unknown = [o for o in list(gauge.scale) + list(gauge.offset)
                   if o not in {t.label for t in model.terms}]
        if unknown:
            raise QueryError(f"gauge references unknown term owners: {unknown}")
        self.model = model
        self.gauge = gauge
        self._j_inv = None if gauge.j is None else np.linalg.inv(gauge.j)

    def pullback_point(self, point: Point) -> Point:
        if self._j_inv is None:
            return point.copy()
        pulled = point.copy()
        pulled.z = self._j_inv @ point.z
        return pulled

    def scale_of(self, owner: str) -> float:
        return float(self.gauge.scale.get(owner, 1.0))

    def offset_of(self, owner: str) -> float:
        return float(self.gauge.offset.get(owner, 0.0))


def apply_gauge(model: Model, gauge: GaugeTransform) -> GaugedModel:
    """Gauged view evaluating each term as a_i E_i(J^{-1} w) + b_i."""
    return GaugedModel(model, gauge)


@dataclass
class ProbeReport:
    head: str
    outputs: list[dict[str, object]]
    base_z: np.ndarray | None = None


def _per_term_z_derivs(model: Model, point: Point, order: int):
    """value/gradient/Hessian of each term with respect to the flat z
    vector, keyed by owner."""
    objective = Objective.from_model(model)
    out = {}
    for term in objective.terms:
        z_refs = [r for r in term.refs if r[0] == "z"]
        jet = objective.term_jet(term, point, z_refs, order)
        value = jet.value if hasattr(jet, "value") else float(jet)
        grad = np.zeros(model.nz)
        hess = np.zeros((model.nz, model.nz))
        if hasattr(jet, "grad"):
            idx = np.array([r[1] for r in z_refs], dtype=int)
            grad[idx] = jet.grad
            if order >= 2:
                hess[np.ix_(idx, idx)] = jet.hess
        out[term.owner] = (value, grad, hess)
    return out


def _head_payload(target, head: str, point: Point, base: Point | None):
    order = 2 if head == "H_Hess" else 1
    if isinstance(target, GaugedModel):
        raw = _per_term_z_derivs(target.model, target.pullback_point(point), order)
        payload = {}
        jinv = target._j_inv
        for owner, (value, grad, hess) in raw.items():
            a = target.scale_of(owner)
            value = a * value + target.offset_of(owner)
            grad = a * grad if jinv is None else a * (jinv.T @ grad)
            if head == "H_Hess":
                hess = a * hess if jinv is None else a * (jinv.T @ hess @ jinv)
            payload[owner] = (value, grad, hess)
    else:
        payload = _per_term_z_derivs(target, point, order)

    out = {}
    for owner, (value, grad, hess) in payload.items():
        if head == "H_E":
            out[owner] = float(value)
        elif head in ("H_dE", "H_gradE"):
            out[owner] = np.asarray(grad, dtype=float)
        elif head == "H_Hess":
            out[owner] = np.asarray(hess, dtype=float)
        elif head == "H_deltaE":
            out[owner] = float(value)  # differenced against base by caller
        else:
            raise QueryError(f"unknown probe head {head!r}")
    return out


def probe(target, head: str, points: list[Point], base: Point | None = None) -> ProbeReport:
    """Numeric readouts of one head per point per module.

    ``target`` is a model or a gauged view; for ``H_deltaE`` the base point
    defaults to the first sample point.
    """
    if head not in HEADS:
        raise QueryError(f"unknown probe head {head!r} (expected one of {HEADS})")
    if not points:
        raise QueryError("probe needs at least one sample point")
    base_point = base if base is not None else points[0]
    base_payload = _head_payload(target, head, base_point, None) if head == "H_deltaE" else None
    outputs = []
    for point in points:
        payload = _head_payload(target, head, point, base_point)
        if head == "H_deltaE":
            payload = {owner: float(payload[owner]) - float(base_payload[owner])
                       for owner in payload}
        outputs.append(payload)
    return ProbeReport(head=head, outputs=outputs,
                       base_z=base_point.z.copy() if head == "H_deltaE" else None)


def gauge_preserved(model: Model, gauge: GaugeTransform, heads=HEADS,
                    points: list[Point] | None = None, tol: float = 1e-9,
                    base: Point | None = None) -> dict[str, bool]:
    """Per-head preservation verdicts: does the gauged model report the
    same numbers as the base model at the same sample points?"""
    if points is None or not points:
        raise QueryError("gauge_preserved needs sample points")
    gauged = apply_gauge(model, gauge)
    verdicts = {}
    for head in heads:
        ref = probe(model, head, points, base)
        alt = probe(gauged, head, points, base)
        worst = 0.0
        for payload_ref, payload_alt in zip(ref.outputs, alt.outputs):
            for owner in payload_ref:
                delta = np.max(np.abs(np.asarray(payload_ref[owner], dtype=float)
                                      - np.asarray(payload_alt[owner], dtype=float)))
                worst = max(worst, float(delta))
        verdicts[head] = worst <= tol
    return verdicts
