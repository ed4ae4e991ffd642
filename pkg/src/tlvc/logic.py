"""Temporal predicate ASTs and robustness scoring over finite and lasso traces.

A predicate is a tree of atoms combined with boolean and temporal operators.
Robustness maps a predicate and a trace position to a real score whose sign
decides satisfaction: negation flips the score, conjunction takes the min,
disjunction the max, and the temporal operators take extrema over future
positions. ``a U b`` scores ``max`` over candidate positions ``tau >= t`` of
``min(score of b at tau, min of score of a over t <= kappa < tau)``; the
left operand is charged strictly before the position where the right operand
scores, so a hit at ``tau = t`` owes nothing to ``a``. ``F p`` is exactly
``true U p`` under this convention.

Lasso traces (a finite prefix followed by a repeating cycle) make the
infinite extrema exact: every position at or beyond the prefix is identified
with its canonical cycle position, and until scans run two full cycles past
the query point, after which the running guard minimum is stationary. Finite
traces use truncated semantics: extrema range over the available suffix only
and a ``Next`` at the final position scores ``-bound``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Union

logger = logging.getLogger(__name__)


class RegistryError(Exception):
    """Raised for atom ids that were never registered."""


class TraceDomainError(Exception):
    """Raised when a time index falls outside a finite trace."""


# ---------------------------------------------------------------------------
# Predicate AST


@dataclass(frozen=True)
class Predicate:
    pass


@dataclass(frozen=True)
class Atom(Predicate):
    atom_id: str


@dataclass(frozen=True)
class TruePred(Predicate):
    pass


@dataclass(frozen=True)
class FalsePred(Predicate):
    pass


@dataclass(frozen=True)
class Not(Predicate):
    child: Predicate


@dataclass(frozen=True)
class And(Predicate):
    children: tuple[Predicate, ...]

    def __post_init__(self) -> None:
        if not self.children:
            raise ValueError("And requires at least one child")


@dataclass(frozen=True)
class Or(Predicate):
    children: tuple[Predicate, ...]

    def __post_init__(self) -> None:
        if not self.children:
            raise ValueError("Or requires at least one child")


@dataclass(frozen=True)
class Next(Predicate):
    child: Predicate


@dataclass(frozen=True)
class Finally(Predicate):
    child: Predicate


@dataclass(frozen=True)
class Globally(Predicate):
    child: Predicate


@dataclass(frozen=True)
class Until(Predicate):
    left: Predicate
    right: Predicate


def conj(*parts: Predicate) -> Predicate:
    """Convenience n-ary conjunction; a single part is returned unwrapped."""
    if len(parts) == 1:
        return parts[0]
    return And(tuple(parts))


def disj(*parts: Predicate) -> Predicate:
    if len(parts) == 1:
        return parts[0]
    return Or(tuple(parts))


def subformulas(p: Predicate) -> Iterator[Predicate]:
    """Yield every node of the tree, parents before children."""
    stack = [p]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Not | Next | Finally | Globally):
            stack.append(node.child)
        elif isinstance(node, And | Or):
            stack.extend(node.children)
        elif isinstance(node, Until):
            stack.append(node.left)
            stack.append(node.right)


def atom_ids(p: Predicate) -> set[str]:
    return {node.atom_id for node in subformulas(p) if isinstance(node, Atom)}


# ---------------------------------------------------------------------------
# Atom registry

StateFn = Callable[[int], float]


class PredicateRegistry:
    """Ordered table of named, bounded atom functions over MDP states.

    Every registered function is clipped into ``[-bound, bound]``; the first
    time a clip actually changes a value a warning is logged for that atom.
    """

    def __init__(self, bound: float = 1.0) -> None:
        if bound <= 0:
            raise ValueError("registry bound must be positive")
        self.bound = float(bound)
        self._entries: dict[str, tuple[str, StateFn]] = {}
        self._clip_warned: set[str] = set()

    def register(self, atom_id: str, name: str, fn: StateFn) -> None:
        if atom_id in self._entries:
            raise RegistryError(f"atom {atom_id!r} already registered")
        self._entries[atom_id] = (name, fn)

    def atom_ids(self) -> list[str]:
        return list(self._entries)

    def name_of(self, atom_id: str) -> str:
        return self._lookup(atom_id)[0]

    def value(self, atom_id: str, state: int) -> float:
        raw = float(self._lookup(atom_id)[1](state))
        clipped = min(max(raw, -self.bound), self.bound)
        if clipped != raw and atom_id not in self._clip_warned:
            self._clip_warned.add(atom_id)
            logger.warning(
                "atom %r returned %g outside [-%g, %g]; clipping",
                atom_id, raw, self.bound, self.bound,
            )
        return clipped

    def _lookup(self, atom_id: str) -> tuple[str, StateFn]:
        try:
            return self._entries[atom_id]
        except KeyError:
            raise RegistryError(f"unknown atom {atom_id!r}") from None


def registry_from_values(
    values: dict[str, list[float]], bound: float = 1.0
) -> PredicateRegistry:
    """Build a registry whose atoms index into per-state value lists."""
    reg = PredicateRegistry(bound=bound)
    for atom_id, table in values.items():
        frozen = [float(v) for v in table]
        reg.register(atom_id, atom_id, lambda s, _t=frozen: _t[s])
    return reg


# ---------------------------------------------------------------------------
# Traces


@dataclass(frozen=True)
class Finite:
    states: tuple[int, ...]


@dataclass(frozen=True)
class Lasso:
    prefix: tuple[int, ...]
    cycle: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.cycle:
            raise ValueError("Lasso cycle must be non-empty")


Trace = Union[Finite, Lasso]


def trace_state(trace: Trace, t: int) -> int:
    if isinstance(trace, Finite):
        if t < 0 or t >= len(trace.states):
            raise TraceDomainError(
                f"time {t} outside finite trace of length {len(trace.states)}"
            )
        return trace.states[t]
    if t < 0:
        raise TraceDomainError(f"negative time {t}")
    m = len(trace.prefix)
    if t < m:
        return trace.prefix[t]
    return trace.cycle[(t - m) % len(trace.cycle)]


# ---------------------------------------------------------------------------
# Robustness


def robustness(
    p: Predicate, trace: Trace, t: int, reg: PredicateRegistry
) -> float:
    """Score ``p`` on ``trace`` at time ``t``; satisfaction is score >= 0."""
    if isinstance(trace, Finite):
        horizon = len(trace.states)
        if t < 0 or t >= horizon:
            raise TraceDomainError(
                f"time {t} outside finite trace of length {horizon}"
            )
        evaluator = _FiniteEval(trace.states, reg)
        return evaluator.eval(p, t)
    if t < 0:
        raise TraceDomainError(f"negative time {t}")
    evaluator = _LassoEval(trace, reg)
    return evaluator.eval(p, evaluator.canon(t))


def satisfies(
    p: Predicate, trace: Trace, t: int, reg: PredicateRegistry
) -> bool:
    return robustness(p, trace, t, reg) >= 0.0


class _FiniteEval:
    """Truncated-horizon evaluation over an explicit state list."""

    def __init__(self, states: tuple[int, ...], reg: PredicateRegistry):
        self.states = states
        self.reg = reg
        self.memo: dict[tuple[int, int], float] = {}

    def eval(self, p: Predicate, t: int) -> float:
        key = (id(p), t)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        score = self._eval(p, t)
        self.memo[key] = score
        return score

    def _eval(self, p: Predicate, t: int) -> float:
        bound = self.reg.bound
        end = len(self.states)
        if isinstance(p, Atom):
            return self.reg.value(p.atom_id, self.states[t])
        if isinstance(p, TruePred):
            return bound
        if isinstance(p, FalsePred):
            return -bound
        if isinstance(p, Not):
            return -self.eval(p.child, t)
        if isinstance(p, And):
            return min(self.eval(c, t) for c in p.children)
        if isinstance(p, Or):
            return max(self.eval(c, t) for c in p.children)
        if isinstance(p, Next):
            if t + 1 >= end:
                return -bound
            return self.eval(p.child, t + 1)
        if isinstance(p, Finally):
            return max(self.eval(p.child, tau) for tau in range(t, end))
        if isinstance(p, Globally):
            return min(self.eval(p.child, tau) for tau in range(t, end))
        if isinstance(p, Until):
            best = -bound
            guard = bound
            for tau in range(t, end):
                best = max(best, min(self.eval(p.right, tau), guard))
                guard = min(guard, self.eval(p.left, tau))
            return best
        raise TypeError(f"unknown predicate node {type(p).__name__}")


class _LassoEval:
    """Exact evaluation over an eventually-periodic trace.

    Positions are canonicalized into ``[0, prefix + cycle)``; until scans run
    two full cycles past the query position, which is enough for the running
    guard minimum and the candidate scores to both become periodic.
    """

    def __init__(self, trace: Lasso, reg: PredicateRegistry):
        self.trace = trace
        self.reg = reg
        self.m = len(trace.prefix)
        self.k = len(trace.cycle)
        self.memo: dict[tuple[int, int], float] = {}

    def canon(self, t: int) -> int:
        if t < self.m:
            return t
        return self.m + (t - self.m) % self.k

    def eval(self, p: Predicate, t: int) -> float:
        key = (id(p), t)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        score = self._eval(p, t)
        self.memo[key] = score
        return score

    def _suffix_positions(self, t: int) -> range:
        if t < self.m:
            return range(t, self.m + self.k)
        return range(self.m, self.m + self.k)

    def _eval(self, p: Predicate, t: int) -> float:
        bound = self.reg.bound
        if isinstance(p, Atom):
            return self.reg.value(p.atom_id, trace_state(self.trace, t))
        if isinstance(p, TruePred):
            return bound
        if isinstance(p, FalsePred):
            return -bound
        if isinstance(p, Not):
            return -self.eval(p.child, t)
        if isinstance(p, And):
            return min(self.eval(c, t) for c in p.children)
        if isinstance(p, Or):
            return max(self.eval(c, t) for c in p.children)
        if isinstance(p, Next):
            return self.eval(p.child, self.canon(t + 1))
        if isinstance(p, Finally):
            return max(self.eval(p.child, tau) for tau in self._suffix_positions(t))
        if isinstance(p, Globally):
            return min(self.eval(p.child, tau) for tau in self._suffix_positions(t))
        if isinstance(p, Until):
            end = max(t, self.m) + 2 * self.k
            best = -bound
            guard = bound
            for tau in range(t, end):
                ct = self.canon(tau)
                best = max(best, min(self.eval(p.right, ct), guard))
                guard = min(guard, self.eval(p.left, ct))
            return best
        raise TypeError(f"unknown predicate node {type(p).__name__}")


# ---------------------------------------------------------------------------
# Structural equality


def structural_key(p: Predicate) -> tuple:
    """Deterministic tree key; And/Or children are sorted, not merged."""
    if isinstance(p, Atom):
        return ("atom", p.atom_id)
    if isinstance(p, TruePred):
        return ("true",)
    if isinstance(p, FalsePred):
        return ("false",)
    if isinstance(p, Not):
        return ("not", structural_key(p.child))
    if isinstance(p, And):
        return ("and", tuple(sorted(structural_key(c) for c in p.children)))
    if isinstance(p, Or):
        return ("or", tuple(sorted(structural_key(c) for c in p.children)))
    if isinstance(p, Next):
        return ("next", structural_key(p.child))
    if isinstance(p, Finally):
        return ("finally", structural_key(p.child))
    if isinstance(p, Globally):
        return ("globally", structural_key(p.child))
    if isinstance(p, Until):
        return ("until", structural_key(p.left), structural_key(p.right))
    raise TypeError(f"unknown predicate node {type(p).__name__}")


def structural_eq(p: Predicate, q: Predicate) -> bool:
    return structural_key(p) == structural_key(q)
