"""Greedy augmented policy extracted from a solved value graph.

The policy walks the graph while it walks the MDP. The active node
supplies greedy actions from its own table; at every state a comparison
between the stay value (best successor under the active table) and each
completion value (the reach payoff times the handed-off table) decides
whether control passes to a child node. Completions of plain reach nodes
hand off at the current state and may chain within a single step; loop
phases hand off through the successor, one phase per step. Every decision
reads only the current state and the solved tables, so a recorded
schedule of handoffs replays the closed-loop trajectory open loop.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import IO, Optional

import numpy as np

from tlvc.dvg import (
    Dvg,
    DvgNode,
    NextValueRef,
    NodeKind,
    ValueRef,
    VConst,
    VMax,
    VMin,
)
from tlvc.logic import (
    Finite,
    Lasso,
    Predicate,
    PredicateRegistry,
    Trace,
    robustness,
)
from tlvc.mdp import Mdp, cell_of
from tlvc.normalize import StateExpr, smin, state_value
from tlvc.solve import Solution

logger = logging.getLogger(__name__)

# Active-node sentinel once every obligation has completed.
DONE = "done"


@dataclass(frozen=True)
class AugState:
    env_state: int
    active: str
    loop_phase: int = 0


@dataclass(frozen=True)
class PolicyStep:
    action: int
    next_active: str
    trigger_fired: bool
    stay_value: float
    switch_value: float


@dataclass(frozen=True)
class SwitchEvent:
    time: int
    source: str
    target: str


@dataclass(frozen=True)
class ComparisonTree:
    """Precomputed handoff schedule plus the trajectory it certifies."""

    x0: int
    horizon: int
    events: tuple[SwitchEvent, ...]
    states: tuple[int, ...]
    actions: tuple[int, ...]


class PolicyError(Exception):
    pass


def _node_greedy(
    sol: Solution, node_id: str, succs: tuple[int, ...]
) -> tuple[int, float]:
    """Lowest-indexed action maximizing the node's successor value.

    Loop tables are exact and flat over whole regions, so value alone
    cannot steer; among value-maximal actions the solver's settle index
    (distance to the collection point) breaks the tie toward the target.
    """
    seq = np.asarray(succs)
    vals = sol.values(node_id)[seq]
    best = float(vals.max())
    rank = sol.loop_ranks.get(node_id)
    if rank is None:
        return int(np.argmax(vals)), best
    ties = np.flatnonzero(vals == best)
    a = int(min(ties, key=lambda i: (rank[seq[i]], i)))
    return a, best


def _completion_options(
    node: DvgNode,
) -> list[tuple[Optional[StateExpr], Optional[str]]]:
    """(state requirement, handoff target) per reach disjunct.

    A ``None`` target means the disjunct completes the whole objective.
    """
    items = (
        node.reach.children if isinstance(node.reach, VMax) else (node.reach,)
    )
    out: list[tuple[Optional[StateExpr], Optional[str]]] = []
    for item in items:
        if isinstance(item, VConst):
            out.append((item.state, None))
        elif isinstance(item, ValueRef):
            out.append((None, item.node_id))
        elif isinstance(item, VMin):
            parts = [c.state for c in item.children if isinstance(c, VConst)]
            e = smin(*parts) if parts else None
            refs = [c for c in item.children if isinstance(c, ValueRef)]
            for c in item.children:
                if isinstance(c, VMax):
                    refs.extend(
                        r for r in c.children if isinstance(r, ValueRef)
                    )
            if refs:
                out.extend((e, r.node_id) for r in refs)
            else:
                out.append((e, None))
        else:
            raise PolicyError(f"unexpected reach shape in node {node.id}")
    return out


def _loop_ring(dvg: Dvg, node_id: str) -> list[str]:
    ring = [node_id]
    nxt = dvg.nodes[node_id].loop_next
    while nxt != node_id:
        ring.append(nxt)
        nxt = dvg.nodes[nxt].loop_next
    return ring


def loop_phase_of(dvg: Dvg, node_id: str) -> int:
    """Position of a loop node within its cycle, anchored at the least id."""
    if node_id == DONE:
        return 0
    node = dvg.nodes[node_id]
    if node.kind is not NodeKind.REACH_AVOID_LOOP:
        return 0
    ring = _loop_ring(dvg, node_id)
    anchor = min(range(len(ring)), key=lambda i: ring[i])
    return (-anchor) % len(ring)


def _loop_reach_expr(node: DvgNode) -> StateExpr:
    for c in node.reach.children:
        if isinstance(c, VConst):
            return c.state
    raise PolicyError(f"loop node {node.id} has no state reach part")


def _loop_hit_value(
    dvg: Dvg, node: DvgNode, x: int, reg: PredicateRegistry
) -> float:
    """Reach payoff factor at x: own folded target capped by the whole
    ring's guard-or-target window (phases not adjacent to this one still
    constrain where a hit may be collected)."""
    v = state_value(_loop_reach_expr(node), x, reg)
    for nid in _loop_ring(dvg, node.id):
        other = dvg.nodes[nid]
        v = min(
            v,
            max(
                state_value(other.avoid, x, reg),
                state_value(_loop_reach_expr(other), x, reg),
            ),
        )
    return v


def act(
    s: AugState,
    sol: Solution,
    dvg: Dvg,
    mdp: Mdp,
    reg: PredicateRegistry,
) -> PolicyStep:
    """One greedy decision in the augmented state, handoffs resolved."""
    step, _ = _act_events(s, sol, dvg, mdp, reg)
    return step


def _act_events(
    s: AugState,
    sol: Solution,
    dvg: Dvg,
    mdp: Mdp,
    reg: PredicateRegistry,
) -> tuple[PolicyStep, list[tuple[str, str]]]:
    x = s.env_state
    active = s.active
    events: list[tuple[str, str]] = []
    fired = False
    stay_v = reg.bound
    switch_v = -np.inf
    visited: set[str] = set()

    while True:
        if active == DONE:
            return PolicyStep(0, DONE, fired, stay_v, switch_v), events
        node = dvg.nodes[active]
        if node.kind is NodeKind.MAX_COMBINE:
            best = min(
                node.children,
                key=lambda c: (-float(sol.values(c)[x]), c),
            )
            events.append((active, best))
            active = best
            continue
        if node.kind is NodeKind.ONE_STEP:
            child = node.children[0]
            a, v = _node_greedy(sol, child, mdp.successors[x])
            events.append((active, child))
            if not fired:
                stay_v = switch_v = v
            return PolicyStep(a, child, True, stay_v, switch_v), events
        if node.kind is NodeKind.AVOID:
            a, v = _node_greedy(sol, active, mdp.successors[x])
            if not fired:
                stay_v, switch_v = v, -np.inf
            return PolicyStep(a, active, fired, stay_v, switch_v), events

        a_stay, stay = _node_greedy(sol, active, mdp.successors[x])

        if node.kind is NodeKind.REACH_AVOID_LOOP:
            nxt = node.loop_next
            a_go, go = _node_greedy(sol, nxt, mdp.successors[x])
            switch = min(_loop_hit_value(dvg, node, x, reg), go)
            if switch >= stay:
                events.append((active, nxt))
                if not fired:
                    stay_v, switch_v = stay, switch
                return PolicyStep(a_go, nxt, True, stay_v, switch_v), events
            if not fired:
                stay_v, switch_v = stay, switch
            return PolicyStep(a_stay, active, fired, stay_v, switch_v), events

        # Plain reach node: evaluate every completion at the current state.
        best_v = -np.inf
        best_target: Optional[str] = None
        best_seen = False
        for e, target in _completion_options(node):
            v = reg.bound if e is None else state_value(e, x, reg)
            if target is not None:
                v = min(v, float(sol.values(target)[x]))
            if v > best_v:
                best_v, best_target, best_seen = v, target, True
        if not best_seen:
            raise PolicyError(f"node {node.id} has no completion options")
        if best_v >= stay:
            if not fired:
                stay_v, switch_v, fired = stay, best_v, True
            if best_target is None:
                events.append((active, DONE))
                return PolicyStep(0, DONE, True, stay_v, switch_v), events
            events.append((active, best_target))
            if best_target in visited:
                raise PolicyError(
                    f"handoff cycle through {best_target} at state {x}"
                )
            visited.add(active)
            active = best_target
            continue
        if not fired:
            stay_v, switch_v = stay, best_v
        return PolicyStep(a_stay, active, fired, stay_v, switch_v), events


@dataclass(frozen=True)
class RolloutStep:
    t: int
    state: int
    active: str
    action: int
    trigger_fired: bool


def simulate(
    x0: int,
    sol: Solution,
    dvg: Dvg,
    mdp: Mdp,
    reg: PredicateRegistry,
    horizon: int,
) -> tuple[Trace, list[RolloutStep], list[SwitchEvent]]:
    """Closed-loop run from x0: trace, per-step log, and handoff events.

    Stops early with a ``Lasso`` once the augmented (state, active node,
    loop phase) pair repeats; otherwise returns a ``Finite`` trace of
    ``horizon + 1`` states.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    states: list[int] = []
    steps: list[RolloutStep] = []
    events: list[SwitchEvent] = []
    seen: dict[tuple[int, str, int], int] = {}
    x, active = x0, dvg.root
    while True:
        key = (x, active, loop_phase_of(dvg, active))
        if key in seen:
            split = seen[key]
            return (
                Lasso(tuple(states[:split]), tuple(states[split:])),
                steps,
                events,
            )
        if len(states) == horizon + 1:
            return Finite(tuple(states)), steps, events
        seen[key] = len(states)
        t = len(states)
        states.append(x)
        step, ev = _act_events(
            AugState(x, active, loop_phase_of(dvg, active)),
            sol,
            dvg,
            mdp,
            reg,
        )
        events.extend(SwitchEvent(t, src, dst) for src, dst in ev)
        steps.append(
            RolloutStep(t, x, step.next_active, step.action, step.trigger_fired)
        )
        x = mdp.successor(x, step.action)
        active = step.next_active


def build_comparison_tree(
    x0: int,
    sol: Solution,
    dvg: Dvg,
    mdp: Mdp,
    reg: PredicateRegistry,
    horizon: int,
) -> ComparisonTree:
    """Record the handoff schedule of a closed-loop run from x0.

    Replaying the schedule open loop (``replay_comparison_tree``) yields
    the exact same trajectory: actions depend only on the active node's
    table, and the schedule pins when the active node changes.
    """
    trace, steps, events = simulate(x0, sol, dvg, mdp, reg, horizon)
    return ComparisonTree(
        x0=x0,
        horizon=horizon,
        events=tuple(events),
        states=tuple(s.state for s in steps),
        actions=tuple(s.action for s in steps),
    )


def replay_comparison_tree(
    tree: ComparisonTree, sol: Solution, dvg: Dvg, mdp: Mdp
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Drive the MDP with the recorded schedule alone; no comparisons."""
    by_time: dict[int, list[SwitchEvent]] = {}
    for ev in tree.events:
        by_time.setdefault(ev.time, []).append(ev)
    states: list[int] = []
    actions: list[int] = []
    x, active = tree.x0, dvg.root
    for t in range(len(tree.states)):
        states.append(x)
        for ev in by_time.get(t, ()):
            if ev.source != active:
                raise PolicyError(
                    f"schedule mismatch at t={t}: at {active}, "
                    f"event from {ev.source}"
                )
            active = ev.target
        if active == DONE:
            a = 0
        else:
            a, _ = _node_greedy(sol, active, mdp.successors[x])
        actions.append(a)
        x = mdp.successor(x, a)
    return tuple(states), tuple(actions)


def score_rollout(
    x0: int,
    sol: Solution,
    dvg: Dvg,
    mdp: Mdp,
    reg: PredicateRegistry,
    spec: Predicate,
    horizon: int,
) -> tuple[Trace, float]:
    """Roll the policy out from x0 and score the original predicate."""
    trace, _, _ = simulate(x0, sol, dvg, mdp, reg, horizon)
    return trace, robustness(spec, trace, 0, reg)


def write_rollout_csv(
    out: IO[str],
    steps: list[RolloutStep],
    mdp: Mdp,
) -> None:
    writer = csv.writer(out)
    writer.writerow(
        ["t", "state", "row", "col", "active", "action", "trigger"]
    )
    for s in steps:
        if mdp.coordinates is not None:
            row, col = cell_of(mdp, s.state)
        else:
            row, col = -1, -1
        writer.writerow(
            [s.t, s.state, row, col, s.active, s.action, int(s.trigger_fired)]
        )
