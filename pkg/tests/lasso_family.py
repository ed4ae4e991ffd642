"""Reference trace evaluator for normalized specs on lasso traces.

Scores a normalized spec directly on a ``prefix . cycle^omega`` trace,
term by term: a plain until charges its guard up to and including the hit
position, a recurrence group scores as the worst guard-or-target window
value over the suffix against the best cycle visit of each target, and
the safety term is the worst suffix value. This is the trace-level
counterpart of the per-state tables the solver and the set-sweep oracle
produce; tests compare their outputs against the best enumerable lasso.
"""

from __future__ import annotations

from tlvc.logic import Lasso, PredicateRegistry
from tlvc.mdp import Mdp
from tlvc.normalize import (
    NextForm,
    NormalForm,
    NormalizedSpec,
    StateExpr,
    UntilTerm,
    smax,
    state_value,
)


def _state_at(lasso: Lasso, tau: int) -> int:
    m, k = len(lasso.prefix), len(lasso.cycle)
    if tau < m:
        return lasso.prefix[tau]
    return lasso.cycle[(tau - m) % k]


def _suffix_min(
    e: StateExpr, lasso: Lasso, t: int, reg: PredicateRegistry
) -> float:
    m, k = len(lasso.prefix), len(lasso.cycle)
    end = max(t, m) + k
    return min(
        state_value(e, _state_at(lasso, tau), reg) for tau in range(t, end)
    )


def _cycle_max(e: StateExpr, lasso: Lasso, reg: PredicateRegistry) -> float:
    return max(state_value(e, s, reg) for s in lasso.cycle)


def _until_value(
    u: UntilTerm, lasso: Lasso, t: int, reg: PredicateRegistry
) -> float:
    m, k = len(lasso.prefix), len(lasso.cycle)
    end = max(t, m) + 2 * k
    best = -reg.bound
    guard = reg.bound
    for tau in range(t, end):
        s = _state_at(lasso, tau)
        guard = min(guard, state_value(u.avoid, s, reg))
        hit = min(guard, state_value(u.reach.state, s, reg))
        if u.reach.sub is not None:
            hit = min(hit, lasso_value(u.reach.sub, lasso, reg, tau))
        best = max(best, hit)
    return best


def lasso_value(
    spec: NormalizedSpec, lasso: Lasso, reg: PredicateRegistry, t: int = 0
) -> float:
    """Best branch score of the normalized spec on the lasso at time t."""
    best = -reg.bound
    for branch in spec.branches:
        if isinstance(branch, NextForm):
            best = max(best, lasso_value(branch.spec, lasso, reg, t + 1))
            continue
        assert isinstance(branch, NormalForm)
        v = _suffix_min(branch.safety, lasso, t, reg)
        for u in branch.untils:
            v = min(v, _until_value(u, lasso, t, reg))
        for l in branch.loop_untils:
            v = min(v, _suffix_min(smax(l.avoid, l.reach), lasso, t, reg))
            v = min(v, _cycle_max(l.reach, lasso, reg))
        best = max(best, v)
    return best


def enumerate_lassos(
    mdp: Mdp, start: int, max_prefix: int, max_cycle: int
) -> list[Lasso]:
    """All lassos from start with bounded prefix and cycle lengths."""
    succ_sets = [sorted(set(row)) for row in mdp.successors]
    paths: list[tuple[int, ...]] = [(start,)]
    frontier = [(start,)]
    for _ in range(max_prefix):
        frontier = [p + (n,) for p in frontier for n in succ_sets[p[-1]]]
        paths.extend(frontier)
    seen: set[tuple[tuple[int, ...], tuple[int, ...]]] = set()
    out: list[Lasso] = []
    for p in paths:
        anchor = p[-1]
        rings: list[tuple[int, ...]] = [(anchor,)]
        ring_frontier = [(anchor,)]
        for _ in range(max_cycle - 1):
            ring_frontier = [
                r + (n,) for r in ring_frontier for n in succ_sets[r[-1]]
            ]
            rings.extend(ring_frontier)
        for ring in rings:
            if anchor not in succ_sets[ring[-1]]:
                continue
            key = (p[:-1], ring)
            if key in seen:
                continue
            seen.add(key)
            out.append(Lasso(p[:-1], ring))
    return out


def best_lasso_value(
    spec: NormalizedSpec,
    mdp: Mdp,
    reg: PredicateRegistry,
    start: int,
    max_prefix: int,
    max_cycle: int,
) -> float:
    """Max spec score over all bounded lassos from start."""
    return max(
        lasso_value(spec, lasso, reg)
        for lasso in enumerate_lassos(mdp, start, max_prefix, max_cycle)
    )
