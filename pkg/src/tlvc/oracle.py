"""Ground-truth values on finite MDPs, computed without the value graph.

Two independent routes are provided:

* ``oracle_value`` sweeps a finite threshold ladder and solves a boolean
  winning-set fixpoint game at each threshold (attractors for untils,
  viability kernels for safety, a generalized-Buchi nested fixpoint for
  recurrence goals, and a subset-progress product for conjunctions of
  untils). The exact value at a state is the largest winning threshold.
* ``gf_iteration`` / ``loop_iteration`` realize the finite recurrence
  scheme: undiscounted quantitative reach fixpoints iterated from the
  bound downward until the tables stop changing.

Everything here works directly on normalized specs and numpy tables; the
graph compiler and the discounted solver are never imported, so agreement
between routes is meaningful evidence.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from tlvc.logic import PredicateRegistry
from tlvc.mdp import Mdp
from tlvc.normalize import (
    LoopUntil,
    NextForm,
    NormalForm,
    NormalizedSpec,
    StateExpr,
    TOP,
    UntilTerm,
    smin,
    state_atom_ids,
    state_key,
    state_value,
)

logger = logging.getLogger(__name__)


class UnsupportedSpecError(Exception):
    """Raised for spec shapes the oracle has no game construction for."""


class IterationError(Exception):
    """Raised when a recurrence iteration fails to stabilize within k_max."""

    def __init__(self, k_max: int, change: float):
        self.k_max = k_max
        self.change = change
        super().__init__(
            f"recurrence did not stabilize within {k_max} iterations "
            f"(last change {change:.3e})"
        )


@dataclass(frozen=True)
class ThresholdLadder:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if list(self.values) != sorted(set(self.values)):
            raise ValueError("ladder must be sorted and distinct")


@dataclass(frozen=True)
class WinningSet:
    threshold: float
    states: np.ndarray


def _spec_forms(spec: NormalizedSpec) -> Iterable[NormalForm]:
    for b in spec.branches:
        if isinstance(b, NextForm):
            yield from _spec_forms(b.spec)
        else:
            yield b
            for u in b.untils:
                if u.reach.sub is not None:
                    yield from _spec_forms(u.reach.sub)


def threshold_ladder(
    spec: NormalizedSpec, mdp: Mdp, reg: PredicateRegistry
) -> ThresholdLadder:
    """All candidate exact values: signed atom levels plus the bounds.

    Robustness scores are min/max combinations of atom values, negated
    atom values, and the bound constants, so the exact value at every
    state lies in this finite set.
    """
    atoms: set[str] = set()
    for form in _spec_forms(spec):
        for u in form.untils:
            atoms |= state_atom_ids(u.avoid) | state_atom_ids(u.reach.state)
        for l in form.loop_untils:
            atoms |= state_atom_ids(l.avoid) | state_atom_ids(l.reach)
        atoms |= state_atom_ids(form.safety)
    levels = {-reg.bound, reg.bound}
    for aid in sorted(atoms):
        for x in range(mdp.state_count):
            v = reg.value(aid, x)
            levels.add(v)
            levels.add(-v)
    return ThresholdLadder(tuple(sorted(levels)))


# ---------------------------------------------------------------------------
# Boolean fixpoints


def _pre(W: np.ndarray, succ: np.ndarray) -> np.ndarray:
    """States with some action leading into W."""
    return W[succ].any(axis=1)


def _reach_within(Q: np.ndarray, T: np.ndarray, succ: np.ndarray) -> np.ndarray:
    """Least fixpoint W = Q & (T | pre(W)).

    States that can reach a T-state while every visited state, the hit
    state included, lies in Q.
    """
    W = Q & T
    while True:
        nxt = Q & (T | _pre(W, succ))
        if np.array_equal(nxt, W):
            return W
        W = nxt


def _viability(Q: np.ndarray, succ: np.ndarray) -> np.ndarray:
    """Greatest fixpoint W = Q & pre(W): stay inside Q forever."""
    W = Q.copy()
    while True:
        nxt = Q & _pre(W, succ)
        if np.array_equal(nxt, W):
            return W
        W = nxt


def _generalized_buchi(
    Q: np.ndarray, targets: Sequence[np.ndarray], succ: np.ndarray
) -> np.ndarray:
    """Visit every target infinitely often while staying inside Q.

    Nested fixpoint over cyclic milestones: phase j must reach target j
    inside Q and then step into phase j+1's winning set. All phases share
    one winning set at the fixpoint, so phase 0 is returned.
    """
    count = len(targets)
    Ws = [np.ones_like(Q) for _ in range(count)]
    while True:
        nxt = [
            _reach_within(Q, targets[j] & _pre(Ws[(j + 1) % count], succ), succ)
            for j in range(count)
        ]
        if all(np.array_equal(a, b) for a, b in zip(nxt, Ws)):
            return Ws[0]
        Ws = nxt


# ---------------------------------------------------------------------------
# Per-threshold winning sets over spec configurations


class _Sweep:
    """Winning-set solver for one threshold over one MDP."""

    def __init__(self, lam: float, mdp: Mdp, reg: PredicateRegistry,
                 succ: np.ndarray):
        self.lam = lam
        self.mdp = mdp
        self.reg = reg
        self.succ = succ
        self.memo: dict[tuple, np.ndarray] = {}

    def level_set(self, e: StateExpr) -> np.ndarray:
        vals = np.array(
            [state_value(e, x, self.reg) for x in range(self.mdp.state_count)]
        )
        return vals >= self.lam

    def spec_win(self, spec: NormalizedSpec) -> np.ndarray:
        out = np.zeros(self.mdp.state_count, dtype=bool)
        for b in spec.branches:
            if isinstance(b, NextForm):
                out |= _pre(self.spec_win(b.spec), self.succ)
            else:
                out |= self.config_win(
                    frozenset(b.untils), b.loop_untils, b.safety
                )
        return out

    def config_win(
        self,
        untils: frozenset[UntilTerm],
        loops: tuple[LoopUntil, ...],
        safety: StateExpr,
    ) -> np.ndarray:
        key = (
            tuple(sorted(map(_until_memo_key, untils))),
            tuple(map(_loop_memo_key, loops)),
            state_key(safety),
        )
        hit = self.memo.get(key)
        if hit is not None:
            return hit

        Q = self.level_set(safety)
        for u in untils:
            Q &= self.level_set(u.avoid)
        for l in loops:
            # A recurrence goal pins the whole run inside its guard-or-target
            # window; the raw guard only matters between a hit and the next.
            Q &= self.level_set(l.avoid) | self.level_set(l.reach)

        if not untils and not loops:
            W = _viability(Q, self.succ)
        elif not untils:
            W = _generalized_buchi(
                Q, [self.level_set(l.reach) for l in loops], self.succ
            )
        else:
            T = np.zeros(self.mdp.state_count, dtype=bool)
            for u in sorted(untils, key=_until_memo_key):
                hit_here = self.level_set(u.reach.state)
                for popped in self._popped(u, untils, loops, safety):
                    if popped is None:
                        T |= hit_here
                    else:
                        T |= hit_here & self.config_win(*popped)
            W = _reach_within(Q, T, self.succ)

        self.memo[key] = W
        return W

    def _popped(self, u, untils, loops, safety):
        rest = untils - {u}
        if u.reach.sub is None:
            yield _trim(rest, loops, safety)
            return
        for branch in u.reach.sub.branches:
            if isinstance(branch, NextForm):
                raise UnsupportedSpecError(
                    "one-step obligations cannot appear inside reach sides"
                )
            yield _trim(
                rest | frozenset(branch.untils),
                loops + tuple(l for l in branch.loop_untils if l not in loops),
                smin(safety, branch.safety),
            )


def _trim(untils, loops, safety):
    if not untils and not loops and safety == TOP:
        return None
    return (untils, loops, safety)


def _until_memo_key(u: UntilTerm) -> tuple:
    sub = () if u.reach.sub is None else _spec_memo_key(u.reach.sub)
    return (state_key(u.avoid), state_key(u.reach.state), sub)


def _loop_memo_key(l: LoopUntil) -> tuple:
    return (state_key(l.avoid), state_key(l.reach))


def _spec_memo_key(spec: NormalizedSpec) -> tuple:
    out = []
    for b in spec.branches:
        if isinstance(b, NextForm):
            out.append(("next", _spec_memo_key(b.spec)))
        else:
            out.append((
                tuple(sorted(map(_until_memo_key, b.untils))),
                tuple(map(_loop_memo_key, b.loop_untils)),
                state_key(b.safety),
            ))
    return tuple(out)


def winning_sets(
    spec: NormalizedSpec,
    mdp: Mdp,
    reg: PredicateRegistry,
    ladder: Optional[ThresholdLadder] = None,
    jobs: int = 1,
) -> list[WinningSet]:
    """One winning set per ladder threshold, ascending."""
    if ladder is None:
        ladder = threshold_ladder(spec, mdp, reg)
    succ = np.array(mdp.successors, dtype=np.intp)

    def solve_one(lam: float) -> WinningSet:
        return WinningSet(lam, _Sweep(lam, mdp, reg, succ).spec_win(spec))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(solve_one, ladder.values))
    return [solve_one(lam) for lam in ladder.values]


def oracle_value(
    spec: NormalizedSpec,
    mdp: Mdp,
    reg: PredicateRegistry,
    jobs: int = 1,
) -> np.ndarray:
    """Exact best-achievable robustness per state: max winning threshold."""
    sets = winning_sets(spec, mdp, reg, jobs=jobs)
    V = np.full(mdp.state_count, -reg.bound, dtype=np.float64)
    for ws in sets:
        V[ws.states] = ws.threshold
    return V


# ---------------------------------------------------------------------------
# Finite recurrence iterations


def _vplus(V: np.ndarray, succ: np.ndarray) -> np.ndarray:
    return V[succ].max(axis=1)


def _reach_value(g: np.ndarray, succ: np.ndarray) -> np.ndarray:
    """Undiscounted quantitative reach: least fixpoint of max(g, W+)."""
    W = g.copy()
    while True:
        nxt = np.maximum(g, _vplus(W, succ))
        if np.array_equal(nxt, W):
            return W
        W = nxt


def _guarded_reach_value(
    q: np.ndarray, g: np.ndarray, succ: np.ndarray
) -> np.ndarray:
    """Undiscounted until value: collect g now, or pay q and step on.

    Least fixpoint of max(g, min(q, W+)) from W = g; the guard is charged
    strictly before the hit, never at it.
    """
    W = g.copy()
    while True:
        nxt = np.maximum(g, np.minimum(q, _vplus(W, succ)))
        if np.array_equal(nxt, W):
            return W
        W = nxt


def _state_table(e: StateExpr, mdp: Mdp, reg: PredicateRegistry) -> np.ndarray:
    return np.array(
        [state_value(e, x, reg) for x in range(mdp.state_count)],
        dtype=np.float64,
    )


def gf_iteration(
    r: StateExpr, mdp: Mdp, reg: PredicateRegistry, k_max: int = 10_000
) -> tuple[np.ndarray, int]:
    """Recurrence value of repeatedly reaching r, from the bound downward.

    Each round replaces the table with the exact reach value of the target
    min(r, best successor of the previous table); rounds are monotone
    non-increasing on a finite value lattice, so stabilization is exact.
    Returns the stabilized table and the number of rounds it took.
    """
    succ = np.array(mdp.successors, dtype=np.intp)
    r_tab = _state_table(r, mdp, reg)
    V = np.full(mdp.state_count, reg.bound, dtype=np.float64)
    for k in range(k_max + 1):
        nxt = _reach_value(np.minimum(r_tab, _vplus(V, succ)), succ)
        if np.array_equal(nxt, V):
            return V, k
        V = nxt
    raise IterationError(k_max, float(np.max(np.abs(nxt - V))))


def loop_iteration(
    pairs: Sequence[tuple[StateExpr, StateExpr]],
    mdp: Mdp,
    reg: PredicateRegistry,
    k_max: int = 10_000,
) -> tuple[np.ndarray, int]:
    """Coupled recurrence over a cyclic chain of guarded reach goals.

    Phase j chases r_j under guard q_j, with the conjunction of every
    phase's guard-or-target window folded into both tables: between any
    two hits the run must keep every pending until alive, not just the one
    being chased. Each round replaces every phase's table with the exact
    until value whose hit payoff is min(r_j, best successor of the
    previous round's next-phase table); rounds descend from the bound and
    stabilize exactly on the finite lattice of table values. Returns phase
    1's stabilized table and the round count.
    """
    if not pairs:
        raise ValueError("pairs must be non-empty")
    succ = np.array(mdp.successors, dtype=np.intp)
    count = len(pairs)
    raw = [
        (_state_table(q, mdp, reg), _state_table(r, mdp, reg))
        for q, r in pairs
    ]
    window = np.full(mdp.state_count, reg.bound, dtype=np.float64)
    for q_tab, r_tab in raw:
        window = np.minimum(window, np.maximum(q_tab, r_tab))
    q_tabs = [np.minimum(q_tab, window) for q_tab, _ in raw]
    r_tabs = [np.minimum(r_tab, window) for _, r_tab in raw]

    Vs = [np.full(mdp.state_count, reg.bound, dtype=np.float64)
          for _ in range(count)]
    for k in range(k_max + 1):
        nxt = [
            _guarded_reach_value(
                q_tabs[j],
                np.minimum(r_tabs[j], _vplus(Vs[(j + 1) % count], succ)),
                succ,
            )
            for j in range(count)
        ]
        if all(np.array_equal(a, b) for a, b in zip(nxt, Vs)):
            return Vs[0], k
        Vs = nxt
    changes = [float(np.max(np.abs(a - b))) for a, b in zip(nxt, Vs)]
    raise IterationError(k_max, max(changes))
