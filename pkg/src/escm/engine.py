"""Energy evaluation with exact first, second and third derivatives.

All differentiation is forward-mode on the expression AST (see
:mod:`escm.jets`): no symbolic expansion, no finite differences.  Each
additive term is evaluated on its own small active-coordinate set and
scattered into global blocks, so coordinates a term never mentions
contribute exact zeros and the assembled ``H_zz`` is bitwise symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EnergyDomainError, PairError, QueryError
from .expr import CompiledExpr, Env
from .jets import Jet, seed
from .model import Model

__all__ = [
    "Point",
    "FirstOrder",
    "SecondOrder",
    "Objective",
    "evaluate",
    "second_order",
    "effective_energy_pair",
    "PairEnergy",
]

Ref = tuple[str, int]


@dataclass
class Point:
    """Full assignment of values to all z-, u- and theta-coordinates."""

    z: np.ndarray
    u: np.ndarray
    theta: np.ndarray

    @classmethod
    def for_model(cls, model: Model, z=None, u=None, theta=None) -> "Point":
        return cls(
            z=np.zeros(model.nz) if z is None else np.asarray(z, dtype=float).copy(),
            u=np.zeros(model.nu) if u is None else np.asarray(u, dtype=float).copy(),
            theta=model.theta_defaults() if theta is None
            else np.asarray(theta, dtype=float).copy(),
        )

    def copy(self) -> "Point":
        return Point(self.z.copy(), self.u.copy(), self.theta.copy())

    def get(self, ref: Ref) -> float:
        return float(getattr(self, ref[0])[ref[1]])

    def set(self, ref: Ref, value: float) -> None:
        getattr(self, ref[0])[ref[1]] = value


@dataclass
class FirstOrder:
    """Total energy and exact gradients at a point."""

    value: float
    grad_z: np.ndarray
    grad_u: np.ndarray
    grad_theta: np.ndarray


@dataclass
class SecondOrder:
    """Exact second-derivative blocks plus per-term attribution.

    ``attribution`` maps a term owner label to its additive contribution,
    as a dict with "zz", "zu" and "ztheta" blocks.
    """

    h_zz: np.ndarray
    h_zu: np.ndarray
    h_ztheta: np.ndarray
    attribution: dict[str, dict[str, np.ndarray]]


class ObjectiveTerm:
    """One additive contribution: a weighted sum of compiled expressions.

    Plain model terms have a single piece with weight 1; blended terms
    produced by soft surgery carry two.
    """

    __slots__ = ("owner", "pieces", "refs")

    def __init__(self, owner: str, pieces: Sequence[tuple[float, CompiledExpr]]):
        self.owner = owner
        self.pieces = tuple(pieces)
        seen: dict[Ref, None] = {}
        for _, compiled in self.pieces:
            for ref in compiled.refs:
                seen.setdefault(ref, None)
        order = {"z": 0, "u": 1, "theta": 2}
        self.refs = tuple(sorted(seen, key=lambda r: (order[r[0]], r[1])))


class FullDerivatives:
    """Value/gradient/Hessian (and optionally third tensor) over the stacked
    coordinate vector (z, u, theta)."""

    def __init__(self, objective: "Objective", order: int, attribution: bool):
        d = objective.dim
        self.objective = objective
        self.value = 0.0
        self.grad = np.zeros(d)
        self.hess = np.zeros((d, d)) if order >= 2 else None
        self.third = np.zeros((d, d, d)) if order >= 3 else None
        self.owner_hess: dict[str, np.ndarray] | None = {} if attribution else None

    def block(self, rows: str, cols: str) -> np.ndarray:
        return self.hess[self.objective.space_slice(rows), self.objective.space_slice(cols)]

    def grad_block(self, space: str) -> np.ndarray:
        return self.grad[self.objective.space_slice(space)]


class Objective:
    """An evaluable energy: the model's terms, possibly after surgery."""

    def __init__(self, model: Model, terms: Sequence[ObjectiveTerm]):
        self.model = model
        self.terms = tuple(terms)
        self.nz, self.nu, self.ntheta = model.nz, model.nu, model.ntheta
        self.dim = self.nz + self.nu + self.ntheta
        self._offsets = {"z": 0, "u": self.nz, "theta": self.nz + self.nu}

    @classmethod
    def from_model(cls, model: Model) -> "Objective":
        terms = [ObjectiveTerm(t.label, [(1.0, t.compiled)]) for t in model.terms]
        return cls(model, terms)

    def gidx(self, ref: Ref) -> int:
        return self._offsets[ref[0]] + ref[1]

    def space_slice(self, space: str) -> slice:
        start = self._offsets[space]
        size = {"z": self.nz, "u": self.nu, "theta": self.ntheta}[space]
        return slice(start, start + size)

    def owners(self) -> list[str]:
        return [t.owner for t in self.terms]

    def has_global(self) -> bool:
        return any(t.owner == "global" for t in self.terms)

    def check_point(self, point: Point) -> None:
        if len(point.z) != self.nz or len(point.u) != self.nu or len(point.theta) != self.ntheta:
            raise QueryError("point does not match the model's flat coordinate maps")
        for arr in (point.z, point.u, point.theta):
            if arr.size and not np.all(np.isfinite(arr)):
                raise QueryError("point contains non-finite entries")

    # -- evaluation ----------------------------------------------------------

    def value(self, point: Point) -> float:
        self.check_point(point)
        total = 0.0
        for term in self.terms:
            total += self._term_value(term, point)
        return total

    def _term_value(self, term: ObjectiveTerm, point: Point) -> float:
        leaves = {ref: point.get(ref) for ref in term.refs}
        env = Env(leaves)
        try:
            return sum(coeff * compiled.evaluate(env) for coeff, compiled in term.pieces)
        except EnergyDomainError as err:
            if err.owner is not None:
                raise
            raise EnergyDomainError(err.base_message, owner=term.owner,
                                    fragment=err.fragment) from None

    def term_jet(self, term: ObjectiveTerm, point: Point,
                 active: Sequence[Ref], order: int):
        """Evaluate one term with the given coordinates active; everything
        else is frozen at the point.  Returns a Jet (or float when no active
        coordinate occurs in the term)."""
        slot = {ref: j for j, ref in enumerate(active)}
        k = len(active)
        leaves = {}
        for ref in term.refs:
            if ref in slot:
                leaves[ref] = seed(point.get(ref), slot[ref], k, order)
            else:
                leaves[ref] = point.get(ref)
        env = Env(leaves)
        total = None
        try:
            for coeff, compiled in term.pieces:
                piece = compiled.evaluate(env)
                piece = piece * coeff if isinstance(piece, Jet) else coeff * piece
                total = piece if total is None else total + piece
        except EnergyDomainError as err:
            if err.owner is not None:
                raise
            raise EnergyDomainError(err.base_message, owner=term.owner,
                                    fragment=err.fragment) from None
        return total

    def derivatives(self, point: Point, order: int = 2,
                    attribution: bool = False,
                    active: Iterable[Ref] | None = None) -> FullDerivatives:
        """Assemble exact derivatives up to ``order`` over (z, u, theta).

        ``active`` restricts differentiation to a coordinate subset; frozen
        coordinates enter as constants (their rows/columns stay zero).
        """
        self.check_point(point)
        active_set = None if active is None else set(active)
        out = FullDerivatives(self, order, attribution)
        for term in self.terms:
            term_active = [r for r in term.refs
                           if active_set is None or r in active_set]
            result = self.term_jet(term, point, term_active, order)
            if not isinstance(result, Jet):
                out.value += result
                continue
            out.value += result.value
            g = np.array([self.gidx(r) for r in term_active], dtype=int)
            out.grad[g] += result.grad
            if order >= 2:
                out.hess[np.ix_(g, g)] += result.hess
                if out.owner_hess is not None:
                    block = out.owner_hess.setdefault(term.owner, np.zeros((self.dim, self.dim)))
                    block[np.ix_(g, g)] += result.hess
            if order >= 3:
                out.third[np.ix_(g, g, g)] += result.third
        return out

    def first_order(self, point: Point) -> FirstOrder:
        full = self.derivatives(point, order=1)
        return FirstOrder(
            value=full.value,
            grad_z=full.grad_block("z").copy(),
            grad_u=full.grad_block("u").copy(),
            grad_theta=full.grad_block("theta").copy(),
        )

    def second_order(self, point: Point) -> SecondOrder:
        full = self.derivatives(point, order=2, attribution=True)
        attribution = {}
        zs, us, ts = (self.space_slice(s) for s in ("z", "u", "theta"))
        for owner, block in full.owner_hess.items():
            attribution[owner] = {
                "zz": block[zs, zs].copy(),
                "zu": block[zs, us].copy(),
                "ztheta": block[zs, ts].copy(),
            }
        return SecondOrder(
            h_zz=full.block("z", "z").copy(),
            h_zu=full.block("z", "u").copy(),
            h_ztheta=full.block("z", "theta").copy(),
            attribution=attribution,
        )


def _as_objective(target) -> Objective:
    if isinstance(target, Objective):
        return target
    return Objective.from_model(target)


def evaluate(target, point: Point) -> FirstOrder:
    """Total energy and exact gradients of a model or edited objective."""
    return _as_objective(target).first_order(point)


def second_order(target, point: Point) -> SecondOrder:
    """Exact second-derivative blocks of a model or edited objective."""
    return _as_objective(target).second_order(point)


class PairEnergy:
    """Effective energy of module ``i`` relative to ``a``.

    Holds the module's local and exogenous terms plus the global term
    restricted to the pair: every coordinate other than the two modules'
    z-blocks and local parameters is frozen at the anchor point.
    """

    def __init__(self, model: Model, a: str, i: str, point: Point):
        if i == a or i in model.descendants(a):
            raise PairError(f"{i!r} is {a!r} or one of its descendants")
        self.model = model
        self.a, self.i = a, i
        self.point = point.copy()

        terms = [ObjectiveTerm(model.local_term(i).label,
                               [(1.0, model.local_term(i).compiled)])]
        paired = model.paired_exo(i)
        if paired is not None and paired in model.term_by_label:
            exo = model.term_by_label[paired]
            if exo.owner_kind == "exo":
                terms.append(ObjectiveTerm(exo.label, [(1.0, exo.compiled)]))
        if model.global_term is not None:
            terms.append(ObjectiveTerm("global", [(1.0, model.global_term.compiled)]))
        self._objective = Objective(model, terms)

        self.zi_refs = [("z", k) for k in model.coord_indices("z", i)]
        self.za_refs = [("z", k) for k in model.coord_indices("z", a)]
        self.ti_refs = [("theta", k) for k in model.module_theta_refs(i)]
        self.ta_refs = [("theta", k) for k in model.module_theta_refs(a)]
        # shared parameters may appear in both modules' sets; deduplicate
        self.active = list(dict.fromkeys(
            self.zi_refs + self.za_refs + self.ti_refs + self.ta_refs))
        self.theta_a_labels = [model.labels("theta")[k] for _, k in self.ta_refs]

    def _point_with(self, zi=None, za=None) -> Point:
        p = self.point.copy()
        if zi is not None:
            p.z[self.model.var_slice("z", self.i)] = np.asarray(zi, dtype=float)
        if za is not None:
            p.z[self.model.var_slice("z", self.a)] = np.asarray(za, dtype=float)
        return p

    def value(self, zi=None, za=None) -> float:
        return self._objective.value(self._point_with(zi, za))

    def gradient(self, zi=None, za=None) -> dict[str, np.ndarray]:
        full = self._objective.derivatives(self._point_with(zi, za),
                                           order=1, active=self.active)
        gi = np.array([full.grad[self._objective.gidx(r)] for r in self.zi_refs])
        ga = np.array([full.grad[self._objective.gidx(r)] for r in self.za_refs])
        return {"z_i": gi, "z_a": ga}

    def _cross(self, rows: list[Ref], cols: list[Ref]) -> np.ndarray:
        full = self._objective.derivatives(self.point, order=2, active=self.active)
        r = [self._objective.gidx(x) for x in rows]
        c = [self._objective.gidx(x) for x in cols]
        if not r or not c:
            return np.zeros((len(r), len(c)))
        return full.hess[np.ix_(r, c)]

    def cross_zz(self) -> np.ndarray:
        """Exact block of mixed partials d2E/(dz_i dz_a)."""
        return self._cross(self.zi_refs, self.za_refs)

    def cross_ztheta(self) -> np.ndarray:
        """Exact block of mixed partials d2E/(dz_i dtheta_a)."""
        return self._cross(self.zi_refs, self.ta_refs)


def effective_energy_pair(model: Model, a: str, i: str, point: Point) -> PairEnergy:
    """Pair energy handle for cross-partial queries; requires ``i`` to be a
    non-descendant of ``a``."""
    return PairEnergy(model, a, i, point)
