"""Finite deterministic MDPs and a GridWorld environment builder.

States are integers, actions are integers, and the successor table is total:
every (state, action) pair maps to exactly one state. Grids expose five
actions (stay, up, down, left, right); moves into walls or off the grid keep
the agent in place. Each named rectangular region registers an atom whose
value is a clipped signed cell distance, offset by half a cell so that no
state scores exactly zero: inside cells are positive, outside negative.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from tlvc.logic import Finite, Lasso, PredicateRegistry, Trace


class GridConfigError(Exception):
    """Raised for malformed or empty grid configurations."""


@dataclass(frozen=True)
class Mdp:
    state_count: int
    action_count: int
    successors: tuple[tuple[int, ...], ...]  # [state][action] -> state
    coordinates: Optional[tuple[tuple[int, int], ...]] = None

    def __post_init__(self) -> None:
        if self.state_count <= 0 or self.action_count <= 0:
            raise ValueError("state_count and action_count must be positive")
        if len(self.successors) != self.state_count:
            raise ValueError("successor table must cover every state")
        for row in self.successors:
            if len(row) != self.action_count:
                raise ValueError("successor table must cover every action")
            for nxt in row:
                if not 0 <= nxt < self.state_count:
                    raise ValueError(f"successor {nxt} out of range")
        if self.coordinates is not None and len(self.coordinates) != self.state_count:
            raise ValueError("coordinates must cover every state")

    def successor(self, state: int, action: int) -> int:
        return self.successors[state][action]


def random_mdp(
    rng: random.Random, state_count: int, action_count: int
) -> Mdp:
    """Uniformly random deterministic successor table (no coordinates)."""
    table = tuple(
        tuple(rng.randrange(state_count) for _ in range(action_count))
        for _ in range(state_count)
    )
    return Mdp(state_count, action_count, table)


# ---------------------------------------------------------------------------
# GridWorld

ACTIONS = ("stay", "up", "down", "left", "right")
_DELTAS = {"stay": (0, 0), "up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}

Rect = tuple[int, int, int, int]  # (top row, left col, bottom row, right col), inclusive


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    walls: frozenset[tuple[int, int]] = frozenset()
    regions: tuple[tuple[str, Rect], ...] = ()

    def __post_init__(self) -> None:
        if self.rows <= 0 or self.cols <= 0:
            raise GridConfigError("grid must have positive dimensions")
        for (r, c) in self.walls:
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise GridConfigError(f"wall {(r, c)} outside the grid")
        names = [name for name, _ in self.regions]
        if len(set(names)) != len(names):
            raise GridConfigError("region names must be unique")
        for name, (r0, c0, r1, c1) in self.regions:
            if not (0 <= r0 <= r1 < self.rows and 0 <= c0 <= c1 < self.cols):
                raise GridConfigError(f"region {name!r} outside the grid")


def build_grid(spec: GridSpec) -> tuple[Mdp, PredicateRegistry]:
    cells = [
        (r, c)
        for r in range(spec.rows)
        for c in range(spec.cols)
        if (r, c) not in spec.walls
    ]
    if not cells:
        raise GridConfigError("empty playable area")
    index = {cell: i for i, cell in enumerate(cells)}

    successors = []
    for (r, c) in cells:
        row = []
        for action in ACTIONS:
            dr, dc = _DELTAS[action]
            target = (r + dr, c + dc)
            row.append(index.get(target, index[(r, c)]))
        successors.append(tuple(row))

    mdp = Mdp(
        state_count=len(cells),
        action_count=len(ACTIONS),
        successors=tuple(successors),
        coordinates=tuple(cells),
    )

    reg = PredicateRegistry(bound=1.0)
    for name, rect in spec.regions:
        values = [_region_score(cell, rect) for cell in cells]
        reg.register(name, name, lambda s, _v=values: _v[s])
    return mdp, reg


def _region_score(cell: tuple[int, int], rect: Rect) -> float:
    """Half-cell-offset signed L-infinity distance score, clipped to [-1, 1].

    Inside cells score +0.5 at the region edge and grow toward the middle;
    outside cells score -0.5 one step away and fall off with distance. No
    cell scores exactly zero, so sign tests are unambiguous.
    """
    r, c = cell
    r0, c0, r1, c1 = rect
    dr = max(r0 - r, 0, r - r1)
    dc = max(c0 - c, 0, c - c1)
    if dr == 0 and dc == 0:
        depth = min(r - r0, r1 - r, c - c0, c1 - c) + 1
        signed = 1 - depth  # <= 0 inside, 0 on the region edge ring
    else:
        signed = max(dr, dc)  # >= 1 outside
    return float(min(max(0.5 - signed, -1.0), 1.0))


def cell_of(mdp: Mdp, state: int) -> tuple[int, int]:
    if mdp.coordinates is None:
        raise ValueError("MDP carries no grid coordinates")
    return mdp.coordinates[state]


# ---------------------------------------------------------------------------
# Config files


def grid_spec_from_config(text: str) -> GridSpec:
    """Parse a TOML grid description.

    Keys: ``rows``, ``cols``, optional ``walls`` (list of [row, col]),
    and one ``region.<name> = [r0, c0, r1, c1]`` entry per atom.
    """
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise GridConfigError(f"bad grid config: {exc}") from exc
    try:
        rows = int(data["rows"])
        cols = int(data["cols"])
    except KeyError as exc:
        raise GridConfigError(f"grid config missing key {exc}") from exc
    walls = frozenset(
        (int(r), int(c)) for r, c in data.get("walls", [])
    )
    regions = []
    for name, rect in data.get("region", {}).items():
        if not (isinstance(rect, list) and len(rect) == 4):
            raise GridConfigError(
                f"region {name!r} must be [r0, c0, r1, c1], got {rect!r}"
            )
        regions.append((name, tuple(int(v) for v in rect)))
    return GridSpec(rows, cols, walls, tuple(regions))


def load_grid(path: str) -> tuple[Mdp, PredicateRegistry]:
    with open(path, "r", encoding="utf-8") as fh:
        return build_grid(grid_spec_from_config(fh.read()))


def write_heatmap_csv(path: str, mdp: Mdp, values) -> None:
    """Per-cell CSV (row, col, value) for grid MDPs."""
    if mdp.coordinates is None:
        raise ValueError("heatmaps require grid coordinates")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for state, (r, c) in enumerate(mdp.coordinates):
            writer.writerow([r, c, repr(float(values[state]))])


# ---------------------------------------------------------------------------
# Rollouts


class RolloutPolicy(Protocol):
    """Action chooser with optional internal memory.

    ``observe`` is called once on arrival at each state (settling any memory
    updates), then ``memory_key``/``action`` must be pure until the next
    ``observe``. Cycle detection keys on (state, memory_key()).
    """

    def observe(self, state: int) -> None: ...

    def memory_key(self) -> object: ...

    def action(self, state: int) -> int: ...


@dataclass
class FunctionPolicy:
    """Memoryless adapter for a plain state -> action function."""

    fn: Callable[[int], int]

    def observe(self, state: int) -> None:
        pass

    def memory_key(self) -> object:
        return None

    def action(self, state: int) -> int:
        return self.fn(state)


def rollout(mdp: Mdp, policy: RolloutPolicy, x0: int, horizon: int) -> Trace:
    """Run the policy; fold into a Lasso when (state, memory) repeats.

    Returns a Finite trace of length horizon + 1 when no repeat shows up.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if not 0 <= x0 < mdp.state_count:
        raise ValueError(f"start state {x0} out of range")
    states: list[int] = []
    seen: dict[object, int] = {}
    x = x0
    while True:
        policy.observe(x)
        key = (x, policy.memory_key())
        if key in seen:
            split = seen[key]
            return Lasso(tuple(states[:split]), tuple(states[split:]))
        if len(states) == horizon + 1:
            return Finite(tuple(states))
        seen[key] = len(states)
        states.append(x)
        x = mdp.successor(x, policy.action(x))
