"""Normalization of predicate ASTs into the decomposable master class.

The target shape is a disjunction of branches, where each branch is either
``(X ...)`` applied to a further normalized spec, or a conjunction of

* plain untils ``avoid U reach`` with a state-level avoid side and a reach
  side that combines a state-level part with optionally another normalized
  spec (for until-chains and eventually-always goals),
* recurrence pairs ``G(q_j U r_j)`` collected from ``G`` over conjunctions
  of untils (with ``G F r`` as the guard-free special case), and
* a single state-level safety term ``G q`` merged from all safety conjuncts.

Everything outside this class is rejected with a ``FragmentError`` carrying
the offending subtree. Rejection is deliberate where a rewrite would need a
semantics we do not carry (negated temporal operators, temporal disjunction
under ``G``, temporal left sides of ``U``, bare state-level conjuncts with
no temporal scope).

All accepted rewrites preserve robustness scores exactly on every trace;
``check_equivalence`` spot-checks this on random lasso traces of an MDP.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

from tlvc.logic import (
    And,
    Atom,
    FalsePred,
    Finally,
    Globally,
    Lasso,
    Next,
    Not,
    Or,
    Predicate,
    PredicateRegistry,
    TruePred,
    Until,
    conj,
    disj,
    robustness,
)

# ---------------------------------------------------------------------------
# State-level expressions


@dataclass(frozen=True)
class StateExprBase:
    pass


@dataclass(frozen=True)
class SAtom(StateExprBase):
    atom_id: str


@dataclass(frozen=True)
class SNegAtom(StateExprBase):
    atom_id: str


@dataclass(frozen=True)
class SMin(StateExprBase):
    children: tuple["StateExpr", ...]


@dataclass(frozen=True)
class SMax(StateExprBase):
    children: tuple["StateExpr", ...]


@dataclass(frozen=True)
class SConst(StateExprBase):
    sign: int  # +1 for +bound, -1 for -bound


StateExpr = Union[SAtom, SNegAtom, SMin, SMax, SConst]

TOP = SConst(1)
BOTTOM = SConst(-1)


def state_key(e: StateExpr) -> tuple:
    if isinstance(e, SAtom):
        return ("atom", e.atom_id)
    if isinstance(e, SNegAtom):
        return ("negatom", e.atom_id)
    if isinstance(e, SMin):
        return ("min", tuple(state_key(c) for c in e.children))
    if isinstance(e, SMax):
        return ("max", tuple(state_key(c) for c in e.children))
    if isinstance(e, SConst):
        return ("const", e.sign)
    raise TypeError(f"unknown state expr {type(e).__name__}")


def _combine(
    kind: type, absorbing: SConst, neutral: SConst, parts: list[StateExpr]
) -> StateExpr:
    flat: list[StateExpr] = []
    for part in parts:
        if isinstance(part, kind):
            flat.extend(part.children)
        else:
            flat.append(part)
    if any(p == absorbing for p in flat):
        return absorbing
    flat = [p for p in flat if p != neutral]
    seen: dict[tuple, StateExpr] = {}
    for p in flat:
        seen.setdefault(state_key(p), p)
    ordered = [seen[k] for k in sorted(seen)]
    if not ordered:
        return neutral
    if len(ordered) == 1:
        return ordered[0]
    return kind(tuple(ordered))


def smin(*parts: StateExpr) -> StateExpr:
    return _combine(SMin, BOTTOM, TOP, list(parts))


def smax(*parts: StateExpr) -> StateExpr:
    return _combine(SMax, TOP, BOTTOM, list(parts))


def state_value(e: StateExpr, state: int, reg: PredicateRegistry) -> float:
    if isinstance(e, SAtom):
        return reg.value(e.atom_id, state)
    if isinstance(e, SNegAtom):
        return -reg.value(e.atom_id, state)
    if isinstance(e, SMin):
        return min(state_value(c, state, reg) for c in e.children)
    if isinstance(e, SMax):
        return max(state_value(c, state, reg) for c in e.children)
    if isinstance(e, SConst):
        return e.sign * reg.bound
    raise TypeError(f"unknown state expr {type(e).__name__}")


def state_predicate(e: StateExpr) -> Predicate:
    if isinstance(e, SAtom):
        return Atom(e.atom_id)
    if isinstance(e, SNegAtom):
        return Not(Atom(e.atom_id))
    if isinstance(e, SMin):
        return And(tuple(state_predicate(c) for c in e.children))
    if isinstance(e, SMax):
        return Or(tuple(state_predicate(c) for c in e.children))
    if isinstance(e, SConst):
        return TruePred() if e.sign > 0 else FalsePred()
    raise TypeError(f"unknown state expr {type(e).__name__}")


def state_atom_ids(e: StateExpr) -> set[str]:
    if isinstance(e, (SAtom, SNegAtom)):
        return {e.atom_id}
    if isinstance(e, (SMin, SMax)):
        return set().union(*(state_atom_ids(c) for c in e.children))
    return set()


# ---------------------------------------------------------------------------
# Normal forms


@dataclass(frozen=True)
class ReachTerm:
    """Reach side of an until: state part AND the value of a nested spec."""

    state: StateExpr
    sub: Optional["NormalizedSpec"]


@dataclass(frozen=True)
class UntilTerm:
    avoid: StateExpr
    reach: ReachTerm


@dataclass(frozen=True)
class LoopUntil:
    avoid: StateExpr
    reach: StateExpr


@dataclass(frozen=True)
class NormalForm:
    untils: tuple[UntilTerm, ...]
    loop_untils: tuple[LoopUntil, ...]
    safety: StateExpr


@dataclass(frozen=True)
class NextForm:
    spec: "NormalizedSpec"


Branch = Union[NormalForm, NextForm]


@dataclass(frozen=True)
class NormalizedSpec:
    branches: tuple[Branch, ...]

    def __post_init__(self) -> None:
        if not self.branches:
            raise ValueError("NormalizedSpec requires at least one branch")


class FragmentReason(Enum):
    NEGATED_TEMPORAL = "NegatedTemporal"
    DISJUNCTION_OF_TEMPORAL_UNDER_G = "DisjunctionOfTemporalUnderG"
    UNTIL_LEFT_TEMPORAL = "UntilLeftTemporal"
    UNSUPPORTED_NESTING = "UnsupportedNesting"


class FragmentError(Exception):
    def __init__(
        self, message: str, offending: Predicate, reason: FragmentReason
    ) -> None:
        super().__init__(f"{reason.value}: {message}")
        self.message = message
        self.offending = offending
        self.reason = reason


# ---------------------------------------------------------------------------
# Passes


def is_state_level(p: Predicate) -> bool:
    if isinstance(p, (Atom, TruePred, FalsePred)):
        return True
    if isinstance(p, Not):
        return is_state_level(p.child)
    if isinstance(p, (And, Or)):
        return all(is_state_level(c) for c in p.children)
    return False


def _dual(e: StateExpr) -> StateExpr:
    if isinstance(e, SAtom):
        return SNegAtom(e.atom_id)
    if isinstance(e, SNegAtom):
        return SAtom(e.atom_id)
    if isinstance(e, SMin):
        return smax(*(_dual(c) for c in e.children))
    if isinstance(e, SMax):
        return smin(*(_dual(c) for c in e.children))
    return SConst(-e.sign)


def to_state_expr(p: Predicate) -> StateExpr:
    if isinstance(p, Atom):
        return SAtom(p.atom_id)
    if isinstance(p, TruePred):
        return TOP
    if isinstance(p, FalsePred):
        return BOTTOM
    if isinstance(p, Not):
        return _dual(to_state_expr(p.child))
    if isinstance(p, And):
        return smin(*(to_state_expr(c) for c in p.children))
    if isinstance(p, Or):
        return smax(*(to_state_expr(c) for c in p.children))
    raise TypeError(f"not state-level: {type(p).__name__}")


def _push_negation(p: Predicate, neg: bool, origin: Optional[Predicate]) -> Predicate:
    if isinstance(p, Not):
        return _push_negation(p.child, not neg, p if not neg else origin)
    if isinstance(p, Atom):
        return Not(p) if neg else p
    if isinstance(p, TruePred):
        return FalsePred() if neg else p
    if isinstance(p, FalsePred):
        return TruePred() if neg else p
    if isinstance(p, And):
        children = tuple(_push_negation(c, neg, origin) for c in p.children)
        return Or(children) if neg else And(children)
    if isinstance(p, Or):
        children = tuple(_push_negation(c, neg, origin) for c in p.children)
        return And(children) if neg else Or(children)
    if neg:
        raise FragmentError(
            "negation applied to a temporal operator",
            origin if origin is not None else Not(p),
            FragmentReason.NEGATED_TEMPORAL,
        )
    if isinstance(p, Next):
        return Next(_push_negation(p.child, False, None))
    if isinstance(p, Finally):
        return Finally(_push_negation(p.child, False, None))
    if isinstance(p, Globally):
        return Globally(_push_negation(p.child, False, None))
    if isinstance(p, Until):
        return Until(
            _push_negation(p.left, False, None),
            _push_negation(p.right, False, None),
        )
    raise TypeError(f"unknown predicate node {type(p).__name__}")


def _flatten_and(p: Predicate) -> list[Predicate]:
    if isinstance(p, And):
        out: list[Predicate] = []
        for c in p.children:
            out.extend(_flatten_and(c))
        return out
    return [p]


def _dnf(p: Predicate) -> list[list[Predicate]]:
    """Disjunctive normal form over temporal-bearing And/Or only."""
    if is_state_level(p):
        return [[p]]
    if isinstance(p, Or):
        out: list[list[Predicate]] = []
        for c in p.children:
            out.extend(_dnf(c))
        return out
    if isinstance(p, And):
        combos: list[list[Predicate]] = [[]]
        for c in p.children:
            combos = [left + right for left in combos for right in _dnf(c)]
        return combos
    return [[p]]


def _expand_right(left: Optional[Predicate], right: Predicate) -> Predicate:
    """Distribute an until over disjunction in its reach side (exact:
    min against a max equals the max of the mins, position by position)."""
    parts = _dnf(right)
    def wrap(body: Predicate) -> Predicate:
        return Finally(body) if left is None else Until(left, body)
    if len(parts) == 1:
        return wrap(conj(*parts[0]))
    return Or(tuple(wrap(conj(*pt)) for pt in parts))


def _lift_or(p: Predicate) -> Predicate:
    """Pull temporal disjunction out of reach sides, bottom-up.

    ``G`` bodies and until left sides are left untouched so diagnostics for
    out-of-class nesting point at original subtrees.
    """
    if isinstance(p, (Atom, TruePred, FalsePred, Not, Globally)):
        return p
    if isinstance(p, Next):
        return Next(_lift_or(p.child))
    if isinstance(p, And):
        return And(tuple(_lift_or(c) for c in p.children))
    if isinstance(p, Or):
        return Or(tuple(_lift_or(c) for c in p.children))
    if isinstance(p, Finally):
        return _expand_right(None, _lift_or(p.child))
    if isinstance(p, Until):
        return _expand_right(p.left, _lift_or(p.right))
    raise TypeError(f"unknown predicate node {type(p).__name__}")


def _split_reach(r: Predicate) -> ReachTerm:
    if is_state_level(r):
        return ReachTerm(to_state_expr(r), None)
    if isinstance(r, And):
        state_parts: list[StateExpr] = []
        temporal_parts: list[Predicate] = []
        for c in _flatten_and(r):
            if is_state_level(c):
                state_parts.append(to_state_expr(c))
            else:
                temporal_parts.append(c)
        sub = _normalize(conj(*temporal_parts), allow_next=False)
        return ReachTerm(smin(*state_parts), sub)
    return ReachTerm(TOP, _normalize(r, allow_next=False))


def _fold_globally(
    body: Predicate,
    loops: list[LoopUntil],
    safety_parts: list[StateExpr],
) -> None:
    for part in _flatten_and(body):
        if is_state_level(part):
            safety_parts.append(to_state_expr(part))
        elif isinstance(part, Globally):
            _fold_globally(part.child, loops, safety_parts)
        elif isinstance(part, (Until, Finally)):
            if isinstance(part, Finally):
                left: Predicate = TruePred()
                right = part.child
            else:
                left, right = part.left, part.right
            if not is_state_level(left):
                raise FragmentError(
                    "until under G has a temporal left side",
                    part,
                    FragmentReason.UNTIL_LEFT_TEMPORAL,
                )
            if not is_state_level(right):
                raise FragmentError(
                    "until under G has a temporal reach side; recurrence "
                    "pairs must be state-level",
                    part,
                    FragmentReason.UNSUPPORTED_NESTING,
                )
            loops.append(LoopUntil(to_state_expr(left), to_state_expr(right)))
        elif isinstance(part, Or):
            raise FragmentError(
                "disjunction with temporal members under G",
                part,
                FragmentReason.DISJUNCTION_OF_TEMPORAL_UNDER_G,
            )
        else:
            raise FragmentError(
                f"{type(part).__name__} under G is outside the class",
                part,
                FragmentReason.UNSUPPORTED_NESTING,
            )


def _build_branch(conjuncts: list[Predicate], allow_next: bool) -> Branch:
    flat: list[Predicate] = []
    for c in conjuncts:
        flat.extend(_flatten_and(c))

    untils: list[UntilTerm] = []
    loops: list[LoopUntil] = []
    safety_parts: list[StateExpr] = []
    next_bodies: list[Predicate] = []
    non_next_seen: Optional[Predicate] = None

    for c in flat:
        if is_state_level(c):
            expr = to_state_expr(c)
            if isinstance(expr, SConst):
                safety_parts.append(expr)
                continue
            raise FragmentError(
                "state-level conjunct has no temporal scope in the class",
                c,
                FragmentReason.UNSUPPORTED_NESTING,
            )
        if isinstance(c, Globally):
            _fold_globally(c.child, loops, safety_parts)
            non_next_seen = c
        elif isinstance(c, (Until, Finally)):
            if isinstance(c, Finally):
                left: Predicate = TruePred()
                right = c.child
            else:
                left, right = c.left, c.right
            if not is_state_level(left):
                raise FragmentError(
                    "until left side is temporal",
                    c,
                    FragmentReason.UNTIL_LEFT_TEMPORAL,
                )
            untils.append(UntilTerm(to_state_expr(left), _split_reach(right)))
            non_next_seen = c
        elif isinstance(c, Next):
            next_bodies.append(c.child)
        else:
            raise FragmentError(
                f"{type(c).__name__} conjunct is outside the class",
                c,
                FragmentReason.UNSUPPORTED_NESTING,
            )

    if next_bodies:
        if non_next_seen is not None or any(
            not isinstance(e, SConst) or e.sign < 0 for e in safety_parts
        ):
            raise FragmentError(
                "X mixed with other temporal conjuncts",
                next_bodies[0],
                FragmentReason.UNSUPPORTED_NESTING,
            )
        if not allow_next:
            raise FragmentError(
                "X inside a reach side has no decomposition slot",
                next_bodies[0],
                FragmentReason.UNSUPPORTED_NESTING,
            )
        return NextForm(_normalize(conj(*next_bodies), allow_next=True))

    return NormalForm(
        untils=tuple(untils),
        loop_untils=tuple(loops),
        safety=smin(*safety_parts),
    )


def _normalize(p: Predicate, allow_next: bool) -> NormalizedSpec:
    pushed = _lift_or(_push_negation(p, False, None))
    branches: list[Branch] = []
    seen: set[Branch] = set()
    for conjuncts in _dnf(pushed):
        branch = _build_branch(conjuncts, allow_next)
        if branch not in seen:
            seen.add(branch)
            branches.append(branch)
    return NormalizedSpec(tuple(branches))


def normalize(p: Predicate) -> NormalizedSpec:
    """Rewrite ``p`` into the decomposable class or raise FragmentError."""
    return _normalize(p, allow_next=True)


# ---------------------------------------------------------------------------
# Back to predicates


def _reach_predicate(rt: ReachTerm) -> Predicate:
    parts: list[Predicate] = []
    if rt.state != TOP:
        parts.append(state_predicate(rt.state))
    if rt.sub is not None:
        parts.append(as_predicate(rt.sub))
    if not parts:
        return TruePred()
    return conj(*parts)


def _branch_predicate(b: Branch) -> Predicate:
    if isinstance(b, NextForm):
        return Next(as_predicate(b.spec))
    parts: list[Predicate] = [
        Until(state_predicate(u.avoid), _reach_predicate(u.reach))
        for u in b.untils
    ]
    if b.loop_untils:
        loop_body = conj(
            *(
                Until(state_predicate(l.avoid), state_predicate(l.reach))
                for l in b.loop_untils
            )
        )
        parts.append(Globally(loop_body))
    if b.safety != TOP:
        parts.append(Globally(state_predicate(b.safety)))
    if not parts:
        return TruePred()
    return conj(*parts)


def as_predicate(spec: NormalizedSpec) -> Predicate:
    """Predicate with the same robustness score as the normalized spec."""
    return disj(*(_branch_predicate(b) for b in spec.branches))


# ---------------------------------------------------------------------------
# Equivalence checking


@dataclass
class EquivalenceReport:
    samples: int
    mismatches: int
    first_counterexample: Optional[tuple[Lasso, float, float]]

    @property
    def ok(self) -> bool:
        return self.mismatches == 0


def random_policy_lasso(mdp, rng: random.Random) -> Lasso:
    """Roll a random stationary policy to its (prefix, cycle) lasso."""
    policy = [rng.randrange(mdp.action_count) for _ in range(mdp.state_count)]
    state = rng.randrange(mdp.state_count)
    seen: dict[int, int] = {}
    path: list[int] = []
    while state not in seen:
        seen[state] = len(path)
        path.append(state)
        state = mdp.successor(state, policy[state])
    split = seen[state]
    return Lasso(tuple(path[:split]), tuple(path[split:]))


def check_equivalence(
    p: Predicate,
    n: NormalizedSpec,
    samples: int,
    mdp,
    reg: PredicateRegistry,
    seed: int = 0,
) -> EquivalenceReport:
    """Compare robustness of ``p`` and of the rebuilt normal form exactly."""
    rng = random.Random(seed)
    rebuilt = as_predicate(n)
    mismatches = 0
    first: Optional[tuple[Lasso, float, float]] = None
    for _ in range(samples):
        trace = random_policy_lasso(mdp, rng)
        lhs = robustness(p, trace, 0, reg)
        rhs = robustness(rebuilt, trace, 0, reg)
        if lhs != rhs:
            mismatches += 1
            if first is None:
                first = (trace, lhs, rhs)
    return EquivalenceReport(samples, mismatches, first)


# ---------------------------------------------------------------------------
# Serialization helpers for the CLI's --emit normal


def state_to_jsonable(e: StateExpr):
    if isinstance(e, SAtom):
        return {"atom": e.atom_id}
    if isinstance(e, SNegAtom):
        return {"neg_atom": e.atom_id}
    if isinstance(e, SMin):
        return {"min": [state_to_jsonable(c) for c in e.children]}
    if isinstance(e, SMax):
        return {"max": [state_to_jsonable(c) for c in e.children]}
    if isinstance(e, SConst):
        return {"const": e.sign}
    raise TypeError(f"unknown state expr {type(e).__name__}")


def state_from_jsonable(data) -> StateExpr:
    if not isinstance(data, dict) or len(data) != 1:
        raise ValueError(f"bad state expression payload: {data!r}")
    tag, payload = next(iter(data.items()))
    if tag == "atom":
        return SAtom(str(payload))
    if tag == "neg_atom":
        return SNegAtom(str(payload))
    if tag == "min":
        return SMin(tuple(state_from_jsonable(c) for c in payload))
    if tag == "max":
        return SMax(tuple(state_from_jsonable(c) for c in payload))
    if tag == "const":
        if payload not in (1, -1):
            raise ValueError(f"const sign must be +-1, got {payload!r}")
        return SConst(int(payload))
    raise ValueError(f"unknown state expression tag {tag!r}")


def spec_to_jsonable(spec: NormalizedSpec) -> dict:
    branches = []
    for b in spec.branches:
        if isinstance(b, NextForm):
            branches.append({"kind": "next", "spec": spec_to_jsonable(b.spec)})
            continue
        branches.append(
            {
                "kind": "form",
                "untils": [
                    {
                        "avoid": state_to_jsonable(u.avoid),
                        "reach": {
                            "state": state_to_jsonable(u.reach.state),
                            "sub": (
                                spec_to_jsonable(u.reach.sub)
                                if u.reach.sub is not None
                                else None
                            ),
                        },
                    }
                    for u in b.untils
                ],
                "loop_untils": [
                    {
                        "avoid": state_to_jsonable(l.avoid),
                        "reach": state_to_jsonable(l.reach),
                    }
                    for l in b.loop_untils
                ],
                "safety": state_to_jsonable(b.safety),
            }
        )
    return {"branches": branches}


def spec_to_text(spec: NormalizedSpec) -> str:
    from tlvc.parse import print_predicate

    return print_predicate(as_predicate(spec))
