"""Fixed-point solving of a compiled value graph.

Every singleton graph node is driven to the fixed point of its discounted
backup operator by value iteration; nodes are processed in dependency order
so that reach expressions only ever reference already-solved tables. The
discount factor is annealed along ``gamma_schedule``, each stage warm
starting from the previous stage's tables, and the returned solution holds
the tables at the final gamma.

Loop cycles (the only strongly connected components with more than one
node) are solved by the undiscounted coupled recurrence instead: starting
every phase at the upper bound, each round replaces phase j's table with
the exact guarded-reach value whose hit payoff is min(folded target, best
successor of the previous round's next-phase table), Jacobi style, until
the tables stop changing. Rounds are monotone non-increasing from the
bound, values live on the finite lattice of folded-table entries, so
stabilization is exact and the result does not depend on gamma. The
discounted loop backup is exported and contractive, but its fixed point
rewards holding a hittable target forever without completing the next
phase, which diverges from the recurrence value (and from the recurrence
oracle) whenever parking beats cycling; the recurrence is what the rest of
the pipeline compares against, so it is what the solver uses.

All sweeps are pure maps from an immutable input table to a fresh output
array, so tables never mutate in place.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from tlvc.dvg import (
    Dvg,
    DvgNode,
    NextValueRef,
    NodeKind,
    ValueExpr,
    ValueRef,
    VConst,
    VMax,
    VMin,
)
from tlvc.logic import PredicateRegistry
from tlvc.mdp import Mdp
from tlvc.normalize import StateExpr, state_value

logger = logging.getLogger(__name__)


class ConvergenceError(Exception):
    """Raised when a node fails to converge within the iteration budget."""

    def __init__(self, node_id: str, gamma: float, residual: float, iters: int):
        self.node_id = node_id
        self.gamma = gamma
        self.residual = residual
        self.iters = iters
        super().__init__(
            f"node {node_id} did not converge at gamma={gamma} "
            f"after {iters} sweeps (residual {residual:.3e})"
        )


class DependencyError(Exception):
    """Raised when a value expression references an unsolved node."""


@dataclass(frozen=True)
class ValueTable:
    node_id: str
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=np.float64)
        )


@dataclass(frozen=True)
class SolveConfig:
    gamma_schedule: tuple[float, ...] = (0.9, 0.99, 0.999)
    tol: float = 1e-9
    max_iters: Optional[int] = None
    warm_start: bool = True

    def __post_init__(self) -> None:
        if not self.gamma_schedule:
            raise ValueError("gamma_schedule must be non-empty")
        for g in self.gamma_schedule:
            if not 0.0 < g < 1.0:
                raise ValueError(f"gamma {g} outside (0, 1)")
        if any(
            a >= b
            for a, b in zip(self.gamma_schedule, self.gamma_schedule[1:])
        ):
            raise ValueError("gamma_schedule must be strictly ascending")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")

    def iteration_budget(self, state_count: int) -> int:
        """Sweep budget per node and gamma stage.

        Geometric contraction at rate gamma needs on the order of
        ln(1/tol) / (1 - gamma) sweeps to push the sup-norm change below
        tol, which dominates the state-count heuristic once gamma is close
        to 1; the budget covers both regimes with headroom.
        """
        if self.max_iters is not None:
            return self.max_iters
        gamma_max = self.gamma_schedule[-1]
        contraction = 4 * math.ceil(math.log(1.0 / self.tol) / (1.0 - gamma_max))
        return max(100 * state_count, contraction)


@dataclass(frozen=True)
class Solution:
    tables: dict[str, ValueTable]
    iterations: dict[str, int]
    residuals: dict[str, float]
    gamma: float
    # Loop tables are exact and therefore flat across whole regions; the
    # sweep index at which each state's value settled recovers the lost
    # gradient (distance to the collection point) for greedy play.
    loop_ranks: dict[str, np.ndarray] = field(default_factory=dict)

    def values(self, node_id: str) -> np.ndarray:
        try:
            return self.tables[node_id].values
        except KeyError:
            raise DependencyError(f"node {node_id} not solved") from None


# ---------------------------------------------------------------------------
# Bellman backups (tables in, fresh table out)


def vplus(V: np.ndarray, succ: np.ndarray) -> np.ndarray:
    """Best one-step successor value: max over actions of V at f(x, a)."""
    return V[succ].max(axis=1)


def backup_avoid(
    V: np.ndarray, q: np.ndarray, succ: np.ndarray, gamma: float
) -> np.ndarray:
    vp = vplus(V, succ)
    return (1.0 - gamma) * q + gamma * np.minimum(vp, q)


def backup_reach_avoid(
    V: np.ndarray,
    r: np.ndarray,
    q: np.ndarray,
    succ: np.ndarray,
    gamma: float,
) -> np.ndarray:
    vp = vplus(V, succ)
    return (1.0 - gamma) * np.minimum(r, q) + gamma * np.minimum(
        np.maximum(vp, r), q
    )


def backup_reach_avoid_loop(
    Vs: Sequence[np.ndarray],
    j: int,
    r_j: np.ndarray,
    q_j: np.ndarray,
    succ: np.ndarray,
    gamma: float,
) -> np.ndarray:
    vp_j = vplus(Vs[j], succ)
    vp_next = vplus(Vs[(j + 1) % len(Vs)], succ)
    inner = np.minimum(np.maximum(np.minimum(r_j, vp_next), vp_j), q_j)
    return (1.0 - gamma) * np.minimum(r_j, q_j) + gamma * inner


# ---------------------------------------------------------------------------
# Expression evaluation


def state_table(
    expr: StateExpr, mdp: Mdp, reg: PredicateRegistry
) -> np.ndarray:
    """Pointwise evaluation of a state expression over all MDP states."""
    return np.array(
        [state_value(expr, x, reg) for x in range(mdp.state_count)],
        dtype=np.float64,
    )


def eval_value_expr(
    e: ValueExpr,
    sol: Solution,
    reg: PredicateRegistry,
    mdp: Mdp,
    succ: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Fold a value expression into a per-state table.

    References resolve against already-solved tables; a ``NextValueRef``
    takes the referenced table's best one-step successor value.
    """
    if succ is None:
        succ = successor_array(mdp)
    if isinstance(e, VConst):
        return state_table(e.state, mdp, reg)
    if isinstance(e, VMin):
        parts = [eval_value_expr(c, sol, reg, mdp, succ) for c in e.children]
        return np.minimum.reduce(parts)
    if isinstance(e, VMax):
        parts = [eval_value_expr(c, sol, reg, mdp, succ) for c in e.children]
        return np.maximum.reduce(parts)
    if isinstance(e, ValueRef):
        return sol.values(e.node_id)
    if isinstance(e, NextValueRef):
        return vplus(sol.values(e.node_id), succ)
    raise TypeError(f"unknown value expression {type(e).__name__}")


def successor_array(mdp: Mdp) -> np.ndarray:
    """Successor matrix of shape (state_count, action_count)."""
    return np.array(mdp.successors, dtype=np.intp)


# ---------------------------------------------------------------------------
# Core solve


@dataclass
class _NodeData:
    """Per-node constants that do not change across gammas."""

    q: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None
    loop_ids: tuple[str, ...] = ()
    loop_index: int = 0
    loop_r: dict[str, np.ndarray] = field(default_factory=dict)
    loop_q: dict[str, np.ndarray] = field(default_factory=dict)


def solve(
    dvg: Dvg,
    mdp: Mdp,
    reg: PredicateRegistry,
    cfg: SolveConfig = SolveConfig(),
) -> Solution:
    """Solve every node of the graph at the final gamma of the schedule."""
    succ = successor_array(mdp)
    budget = cfg.iteration_budget(mdp.state_count)
    tables: dict[str, ValueTable] = {}
    iterations: dict[str, int] = {}
    residuals: dict[str, float] = {}
    prev: dict[str, np.ndarray] = {}

    for stage, gamma in enumerate(cfg.gamma_schedule):
        sol = Solution(tables={}, iterations={}, residuals={}, gamma=gamma)
        warm = prev if (cfg.warm_start and stage > 0) else {}
        for scc in dvg.topo_order:
            nodes = [dvg.nodes[nid] for nid in scc]
            if len(nodes) == 1 and nodes[0].kind is not NodeKind.REACH_AVOID_LOOP:
                _solve_single(nodes[0], sol, reg, mdp, succ, gamma, cfg.tol,
                              budget, warm)
            else:
                _solve_loop_scc(nodes, sol, reg, mdp, succ, budget)
        prev = {nid: t.values for nid, t in sol.tables.items()}
        tables = sol.tables
        iterations = sol.iterations
        residuals = sol.residuals
        loop_ranks = sol.loop_ranks
        logger.debug(
            "gamma=%g solved, total sweeps=%d", gamma, sum(iterations.values())
        )

    return Solution(
        tables=tables,
        iterations=iterations,
        residuals=residuals,
        gamma=cfg.gamma_schedule[-1],
        loop_ranks=loop_ranks,
    )


def _finish(
    sol: Solution, node_id: str, V: np.ndarray, iters: int, residual: float
) -> None:
    sol.tables[node_id] = ValueTable(node_id, V)
    sol.iterations[node_id] = iters
    sol.residuals[node_id] = residual


def _solve_single(
    node: DvgNode,
    sol: Solution,
    reg: PredicateRegistry,
    mdp: Mdp,
    succ: np.ndarray,
    gamma: float,
    tol: float,
    budget: int,
    warm: dict[str, np.ndarray],
) -> None:
    if node.kind is NodeKind.MAX_COMBINE:
        V = eval_value_expr(node.reach, sol, reg, mdp, succ)
        _finish(sol, node.id, V, 0, 0.0)
        return
    if node.kind is NodeKind.ONE_STEP:
        V = eval_value_expr(node.reach, sol, reg, mdp, succ)
        _finish(sol, node.id, V, 0, 0.0)
        return

    if node.kind is NodeKind.AVOID:
        q = state_table(node.avoid, mdp, reg)
        step = lambda V: backup_avoid(V, q, succ, gamma)
        V = warm.get(node.id)
        if V is None:
            V = q.copy()
    elif node.kind is NodeKind.REACH_AVOID:
        q = state_table(node.avoid, mdp, reg)
        r = eval_value_expr(node.reach, sol, reg, mdp, succ)
        step = lambda V: backup_reach_avoid(V, r, q, succ, gamma)
        V = warm.get(node.id)
        if V is None:
            V = np.minimum(r, q)
    else:
        raise TypeError(f"unexpected singleton kind {node.kind}")

    iters = 0
    while True:
        nxt = step(V)
        change = float(np.max(np.abs(nxt - V)))
        V = nxt
        iters += 1
        if change < tol:
            break
        if iters >= budget:
            raise ConvergenceError(node.id, gamma, change, iters)
    residual = float(np.max(np.abs(step(V) - V)))
    _finish(sol, node.id, V, iters, residual)


def _guarded_reach(
    q: np.ndarray, g: np.ndarray, succ: np.ndarray, budget: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact undiscounted until value: collect g now, or pay q and step on.

    Least fixpoint of max(g, min(q, V+)) from V = g. Optimal hit paths
    never revisit a state (a revisit can only lower the running guard
    minimum), so the iteration stabilizes within state-count sweeps.
    Also returns the sweep index at which each state settled: the value
    surface is flat over whole regions, and the settle index is the step
    distance to the collection point that greedy play steers by.
    """
    W = g
    rank = np.zeros(len(g), dtype=np.int64)
    for k in range(1, budget + 1):
        nxt = np.maximum(g, np.minimum(q, vplus(W, succ)))
        if np.array_equal(nxt, W):
            return W, rank
        rank[nxt > W] = k
        W = nxt
    raise ConvergenceError("guarded-reach", 1.0,
                           float(np.max(np.abs(nxt - W))), budget)


def _solve_loop_scc(
    nodes: list[DvgNode],
    sol: Solution,
    reg: PredicateRegistry,
    mdp: Mdp,
    succ: np.ndarray,
    budget: int,
) -> None:
    for n in nodes:
        if n.kind is not NodeKind.REACH_AVOID_LOOP:
            raise TypeError(
                f"cycle through non-loop node {n.id} ({n.kind.value})"
            )
    # Order phases along the cycle so index j+1 is phase j's loop_next.
    order = [nodes[0]]
    by_id = {n.id: n for n in nodes}
    while len(order) < len(nodes):
        order.append(by_id[order[-1].loop_next])
    if order[-1].loop_next != order[0].id:
        raise TypeError("loop SCC does not close into a single cycle")

    count = len(order)
    qs = [state_table(n.avoid, mdp, reg) for n in order]
    rs = [_loop_reach_table(n, sol, reg, mdp, succ) for n in order]
    # Compiled tables carry each phase's own window and its successor's;
    # between hits the run must also keep every later phase alive, so fold
    # the whole group's guard-or-target window into every table. For one-
    # and two-phase cycles this is absorbed and changes nothing.
    window = np.full(mdp.state_count, reg.bound, dtype=np.float64)
    for j in range(count):
        window = np.minimum(window, np.maximum(qs[j], rs[j]))
    qs = [np.minimum(q, window) for q in qs]
    rs = [np.minimum(r, window) for r in rs]
    # Every phase starts at the upper bound, never from warm tables: the
    # recurrence map is monotone, and only iterates that descend from the
    # bound converge to its greatest fixed point, which is the loop value.
    Vs: list[np.ndarray] = [
        np.full(mdp.state_count, reg.bound, dtype=np.float64) for _ in order
    ]

    iters = 0
    while True:
        solved = [
            _guarded_reach(
                qs[j],
                np.minimum(rs[j], vplus(Vs[(j + 1) % count], succ)),
                succ,
                budget,
            )
            for j in range(count)
        ]
        nxt = [w for w, _ in solved]
        if all(np.array_equal(n, v) for n, v in zip(nxt, Vs)):
            break
        Vs = nxt
        iters += 1
        if iters >= budget:
            change = max(
                float(np.max(np.abs(n - v))) for n, v in zip(nxt, Vs)
            )
            raise ConvergenceError(order[0].id, 1.0, change, iters)
    for j, n in enumerate(order):
        sol.loop_ranks[n.id] = solved[j][1]
        _finish(sol, n.id, Vs[j], iters, 0.0)


def _loop_reach_table(
    node: DvgNode,
    sol: Solution,
    reg: PredicateRegistry,
    mdp: Mdp,
    succ: np.ndarray,
) -> np.ndarray:
    """The state-level part of a loop node's reach (the folded target).

    Loop reach expressions have the shape min(const, next-phase value);
    the next-phase part is supplied by the backup itself, so only the
    constant is extracted here.
    """
    expr = node.reach
    if isinstance(expr, VMin):
        consts = [c for c in expr.children if isinstance(c, VConst)]
        if len(consts) != len(expr.children) - 1:
            raise DependencyError(
                f"loop node {node.id} reach is not min(const..., next-ref)"
            )
        return np.minimum.reduce(
            [state_table(c.state, mdp, reg) for c in consts]
        )
    if isinstance(expr, VConst):
        return state_table(expr.state, mdp, reg)
    raise DependencyError(f"loop node {node.id} has malformed reach {expr!r}")


# ---------------------------------------------------------------------------
# Exports

BLOB_MAGIC = b"DVGV"
BLOB_VERSION = 1


def write_values_csv(path: str, dvg: Dvg, sol: Solution) -> None:
    """One row per (node, state): ``node-id,state,value``."""
    with open(path, "w") as f:
        f.write("node,state,value\n")
        for scc in dvg.topo_order:
            for nid in scc:
                vals = sol.values(nid)
                for x, v in enumerate(vals):
                    f.write(f"{nid},{x},{float(v)!r}\n")


def write_value_blob(path: str, dvg: Dvg, sol: Solution) -> None:
    """Compact binary export.

    Layout (all little-endian): magic ``DVGV``, version u32, node count
    u32, then for each node in flattened topo order a state count u32
    followed by that many f64 values. Node ids are not stored; readers
    reattach tables using the originating graph's topo order.
    """
    order = [nid for scc in dvg.topo_order for nid in scc]
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<II", BLOB_VERSION, len(order)))
        for nid in order:
            vals = sol.values(nid)
            f.write(struct.pack("<I", vals.shape[0]))
            f.write(vals.astype("<f8").tobytes())


def read_value_blob(path: str, dvg: Dvg) -> dict[str, np.ndarray]:
    """Inverse of write_value_blob against the same graph."""
    order = [nid for scc in dvg.topo_order for nid in scc]
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != BLOB_MAGIC:
        raise ValueError("bad magic; not a value blob")
    version, count = struct.unpack_from("<II", data, 4)
    if version != BLOB_VERSION:
        raise ValueError(f"unsupported blob version {version}")
    if count != len(order):
        raise ValueError(
            f"blob holds {count} nodes, graph has {len(order)}"
        )
    out: dict[str, np.ndarray] = {}
    offset = 12
    for nid in order:
        (state_count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        vals = np.frombuffer(
            data, dtype="<f8", count=state_count, offset=offset
        ).astype(np.float64)
        offset += 8 * state_count
        out[nid] = vals
    if offset != len(data):
        raise ValueError("trailing bytes after final node table")
    return out
