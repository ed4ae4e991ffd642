"""Compilation of normalized specs into a Decomposed Value Graph.

Each node stands for one atomic value problem over the MDP:

* ``Avoid`` — stay inside a state-level set forever.
* ``ReachAvoid`` — reach a (possibly value-dependent) target while staying
  inside a state-level set. Popping one pending until out of a conjunction
  produces a child node for the remaining conjunction, so N independent
  goals expand into the 2^N - 1 nonempty-subset nodes.
* ``ReachAvoidLoop`` — one phase of a repeating chain of untils under ``G``;
  phases point at each other through ``loop_next`` and form the only cycles
  in the graph. The shared safety term is folded into every phase's guard
  and reach.
* ``MaxCombine`` — pointwise max over alternative branches.
* ``OneStep`` — best one-step lookahead of the child value.

Structurally identical subproblems are shared: node identity is keyed on the
residual conjunction (until set, loop chain, safety), so the same residual
reached through different pop orders compiles once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Union

from tlvc.normalize import (
    LoopUntil,
    NextForm,
    NormalForm,
    NormalizedSpec,
    ReachTerm,
    StateExpr,
    TOP,
    UntilTerm,
    as_predicate,
    smax,
    smin,
    state_from_jsonable,
    state_key,
    state_to_jsonable,
)


class DvgSchemaError(Exception):
    """Raised for unreadable or inconsistent serialized graphs."""


# ---------------------------------------------------------------------------
# Value expressions


@dataclass(frozen=True)
class VConst:
    state: StateExpr


@dataclass(frozen=True)
class VMin:
    children: tuple["ValueExpr", ...]


@dataclass(frozen=True)
class VMax:
    children: tuple["ValueExpr", ...]


@dataclass(frozen=True)
class ValueRef:
    node_id: str


@dataclass(frozen=True)
class NextValueRef:
    node_id: str


ValueExpr = Union[VConst, VMin, VMax, ValueRef, NextValueRef]


def vmin(*parts: ValueExpr) -> ValueExpr:
    flat: list[ValueExpr] = []
    for p in parts:
        flat.extend(p.children if isinstance(p, VMin) else (p,))
    if not flat:
        return VConst(TOP)
    if len(flat) == 1:
        return flat[0]
    return VMin(tuple(flat))


def vmax(*parts: ValueExpr) -> ValueExpr:
    flat: list[ValueExpr] = []
    for p in parts:
        flat.extend(p.children if isinstance(p, VMax) else (p,))
    if not flat:
        return VConst(TOP)
    if len(flat) == 1:
        return flat[0]
    return VMax(tuple(flat))


def value_refs(e: ValueExpr) -> Iterator[str]:
    """Node ids referenced anywhere inside the expression."""
    if isinstance(e, (ValueRef, NextValueRef)):
        yield e.node_id
    elif isinstance(e, (VMin, VMax)):
        for c in e.children:
            yield from value_refs(c)


# ---------------------------------------------------------------------------
# Graph types


class NodeKind(Enum):
    AVOID = "Avoid"
    REACH_AVOID = "ReachAvoid"
    REACH_AVOID_LOOP = "ReachAvoidLoop"
    MAX_COMBINE = "MaxCombine"
    ONE_STEP = "OneStep"


@dataclass(frozen=True)
class DvgNode:
    id: str
    kind: NodeKind
    avoid: Optional[StateExpr]
    reach: Optional[ValueExpr]
    loop_next: Optional[str]
    children: tuple[str, ...]
    label: str


@dataclass(frozen=True)
class Dvg:
    nodes: dict[str, DvgNode]
    root: str
    topo_order: tuple[tuple[str, ...], ...]


# ---------------------------------------------------------------------------
# Deterministic ordering keys


def _reach_term_key(rt: ReachTerm) -> tuple:
    sub = ("nil",) if rt.sub is None else ("sub", _spec_key(rt.sub))
    return (state_key(rt.state), sub)


def _until_key(u: UntilTerm) -> tuple:
    return (state_key(u.avoid), _reach_term_key(u.reach))


def _loop_key(l: LoopUntil) -> tuple:
    return (state_key(l.avoid), state_key(l.reach))


def _branch_key(b) -> tuple:
    if isinstance(b, NextForm):
        return ("next", _spec_key(b.spec))
    return (
        "form",
        tuple(_until_key(u) for u in b.untils),
        tuple(_loop_key(l) for l in b.loop_untils),
        state_key(b.safety),
    )


def _spec_key(spec: NormalizedSpec) -> tuple:
    return tuple(_branch_key(b) for b in spec.branches)


# ---------------------------------------------------------------------------
# Compilation


class _Compiler:
    def __init__(self, dedup: bool) -> None:
        self.dedup = dedup
        self.nodes: dict[str, DvgNode] = {}
        self.memo: dict[tuple, str] = {}

    def fresh_id(self) -> str:
        return f"n{len(self.nodes)}"

    def add(self, node: DvgNode) -> str:
        self.nodes[node.id] = node
        return node.id

    def lookup(self, key: tuple) -> Optional[str]:
        if self.dedup:
            return self.memo.get(key)
        return None

    def remember(self, key: tuple, node_id: str) -> None:
        if self.dedup:
            self.memo[key] = node_id

    # -- entry points ------------------------------------------------------

    def spec_node(self, spec: NormalizedSpec) -> str:
        ids = []
        for b in spec.branches:
            nid = self.branch_node(b)
            if nid not in ids:
                ids.append(nid)
        if len(ids) == 1:
            return ids[0]
        key = ("maxcombine", tuple(ids))
        hit = self.lookup(key)
        if hit is not None:
            return hit
        nid = self.fresh_id()
        label = _label_of_spec(spec)
        self.add(
            DvgNode(
                id=nid,
                kind=NodeKind.MAX_COMBINE,
                avoid=None,
                reach=vmax(*(ValueRef(c) for c in ids)),
                loop_next=None,
                children=tuple(ids),
                label=label,
            )
        )
        self.remember(key, nid)
        return nid

    def branch_node(self, b) -> str:
        if isinstance(b, NextForm):
            child = self.spec_node(b.spec)
            key = ("onestep", child)
            hit = self.lookup(key)
            if hit is not None:
                return hit
            nid = self.fresh_id()
            self.add(
                DvgNode(
                    id=nid,
                    kind=NodeKind.ONE_STEP,
                    avoid=None,
                    reach=NextValueRef(child),
                    loop_next=None,
                    children=(child,),
                    label=_label_of_spec(NormalizedSpec((b,))),
                )
            )
            self.remember(key, nid)
            return nid
        return self.config_node(frozenset(b.untils), b.loop_untils, b.safety)

    # -- residual conjunctions ---------------------------------------------

    def config_node(
        self,
        untils: frozenset[UntilTerm],
        loops: tuple[LoopUntil, ...],
        safety: StateExpr,
    ) -> str:
        if untils:
            return self._reach_avoid_node(untils, loops, safety)
        if loops:
            return self._loop_cycle(loops, safety)
        return self._avoid_node(safety)

    def _avoid_node(self, safety: StateExpr) -> str:
        key = ("avoid", safety)
        hit = self.lookup(key)
        if hit is not None:
            return hit
        nid = self.fresh_id()
        self.add(
            DvgNode(
                id=nid,
                kind=NodeKind.AVOID,
                avoid=safety,
                reach=None,
                loop_next=None,
                children=(),
                label=_label_of_form(NormalForm((), (), safety)),
            )
        )
        self.remember(key, nid)
        return nid

    def _loop_cycle(
        self, loops: tuple[LoopUntil, ...], safety: StateExpr
    ) -> str:
        key = ("loop", loops, safety)
        hit = self.lookup(key)
        if hit is not None:
            return hit
        count = len(loops)
        # Reserve the ids up front so phase j can point at phase j+1.
        ids: list[str] = []
        for _ in range(count):
            nid = self.fresh_id()
            self.nodes[nid] = None  # type: ignore[assignment]
            ids.append(nid)
        for j, pair in enumerate(loops):
            nxt = loops[(j + 1) % count]
            if count > 1:
                window = smax(nxt.avoid, nxt.reach)
                guard = smin(pair.avoid, window, safety)
                reach_state = smin(pair.reach, window, safety)
            else:
                guard = smin(pair.avoid, safety)
                reach_state = smin(pair.reach, safety)
            next_id = ids[(j + 1) % count]
            rotated = loops[j:] + loops[:j]
            self.nodes[ids[j]] = DvgNode(
                id=ids[j],
                kind=NodeKind.REACH_AVOID_LOOP,
                avoid=guard,
                reach=vmin(VConst(reach_state), NextValueRef(next_id)),
                loop_next=next_id,
                children=(next_id,),
                label=_label_of_form(NormalForm((), rotated, safety)),
            )
        self.remember(key, ids[0])
        return ids[0]

    def _reach_avoid_node(
        self,
        untils: frozenset[UntilTerm],
        loops: tuple[LoopUntil, ...],
        safety: StateExpr,
    ) -> str:
        key = ("ra", untils, loops, safety)
        hit = self.lookup(key)
        if hit is not None:
            return hit
        ordered = sorted(untils, key=_until_key)
        avoid = smin(
            *(u.avoid for u in ordered),
            safety,
            *(smax(l.avoid, l.reach) for l in loops),
        )

        disjuncts: list[ValueExpr] = []
        children: list[str] = []
        for u in ordered:
            rest = untils - {u}
            refs: list[ValueExpr] = []
            for merged in self._popped_configs(u.reach, rest, loops, safety):
                if merged is None:
                    continue
                cid = self.config_node(*merged)
                refs.append(ValueRef(cid))
                if cid not in children:
                    children.append(cid)
            parts: list[ValueExpr] = []
            if u.reach.state != TOP:
                parts.append(VConst(u.reach.state))
            if refs:
                parts.append(vmax(*refs))
            disjuncts.append(vmin(*parts))
        reach = vmax(*disjuncts)

        nid = self.fresh_id()
        self.add(
            DvgNode(
                id=nid,
                kind=NodeKind.REACH_AVOID,
                avoid=avoid,
                reach=reach,
                loop_next=None,
                children=tuple(children),
                label=_label_of_form(NormalForm(tuple(ordered), loops, safety)),
            )
        )
        self.remember(key, nid)
        return nid

    def _popped_configs(
        self,
        reach: ReachTerm,
        rest: frozenset[UntilTerm],
        loops: tuple[LoopUntil, ...],
        safety: StateExpr,
    ):
        """Residual conjunction(s) after an until completes.

        Yields one config per branch of the nested reach spec (or the bare
        residual when the reach is state-level); yields None for a residual
        that is trivially true.
        """
        if reach.sub is None:
            yield self._as_config(rest, loops, safety)
            return
        for branch in reach.sub.branches:
            if isinstance(branch, NextForm):
                raise DvgSchemaError(
                    "reach sides cannot carry one-step branches"
                )
            merged_untils = rest | frozenset(branch.untils)
            merged_loops = loops + tuple(
                l for l in branch.loop_untils if l not in loops
            )
            merged_safety = smin(safety, branch.safety)
            yield self._as_config(merged_untils, merged_loops, merged_safety)

    @staticmethod
    def _as_config(untils, loops, safety):
        if not untils and not loops and safety == TOP:
            return None
        return (untils, loops, safety)


def _label_of_form(form: NormalForm) -> str:
    return _label_of_spec(NormalizedSpec((form,)))


def _label_of_spec(spec: NormalizedSpec) -> str:
    from tlvc.parse import print_predicate

    return print_predicate(as_predicate(spec))


def compile_spec(spec: NormalizedSpec, dedup: bool = True) -> Dvg:
    """Compile a normalized spec into its value graph."""
    compiler = _Compiler(dedup)
    root = compiler.spec_node(spec)
    nodes = compiler.nodes
    return Dvg(nodes=nodes, root=root, topo_order=_scc_topo_order(nodes))


# ---------------------------------------------------------------------------
# SCC condensation order (dependencies first)


def _scc_topo_order(nodes: dict[str, DvgNode]) -> tuple[tuple[str, ...], ...]:
    index: dict[str, int] = {}
    lowlink: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    sccs: list[tuple[str, ...]] = []
    counter = [0]

    def strongconnect(v: str) -> None:
        index[v] = lowlink[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        for w in nodes[v].children:
            if w not in index:
                strongconnect(w)
                lowlink[v] = min(lowlink[v], lowlink[w])
            elif w in on_stack:
                lowlink[v] = min(lowlink[v], index[w])
        if lowlink[v] == index[v]:
            component = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                component.append(w)
                if w == v:
                    break
            sccs.append(tuple(sorted(component, key=_node_sort_key)))

    for v in nodes:
        if v not in index:
            strongconnect(v)
    return tuple(sccs)


def _node_sort_key(node_id: str) -> tuple[int, str]:
    digits = node_id[1:]
    return (int(digits), node_id) if digits.isdigit() else (1 << 30, node_id)


# ---------------------------------------------------------------------------
# DOT export

_DOT_SHAPES = {
    NodeKind.AVOID: "box",
    NodeKind.REACH_AVOID: "ellipse",
    NodeKind.REACH_AVOID_LOOP: "hexagon",
    NodeKind.MAX_COMBINE: "invtrapezium",
    NodeKind.ONE_STEP: "parallelogram",
}


def to_dot(dvg: Dvg) -> str:
    lines = ["digraph dvg {", "  rankdir=TB;"]
    for node in dvg.nodes.values():
        label = node.label.replace("\\", "\\\\").replace('"', '\\"')
        shape = _DOT_SHAPES[node.kind]
        extra = ", peripheries=2" if node.id == dvg.root else ""
        lines.append(
            f'  "{node.id}" [shape={shape}, label="{node.id}\\n{label}"{extra}];'
        )
    for node in dvg.nodes.values():
        for child in node.children:
            style = (
                " [style=dashed]"
                if node.kind is NodeKind.REACH_AVOID_LOOP
                and child == node.loop_next
                else ""
            )
            lines.append(f'  "{node.id}" -> "{child}"{style};')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSON round-trip

SCHEMA_VERSION = 1


def _value_to_jsonable(e: ValueExpr):
    if isinstance(e, VConst):
        return {"const": state_to_jsonable(e.state)}
    if isinstance(e, VMin):
        return {"min": [_value_to_jsonable(c) for c in e.children]}
    if isinstance(e, VMax):
        return {"max": [_value_to_jsonable(c) for c in e.children]}
    if isinstance(e, ValueRef):
        return {"value_ref": e.node_id}
    if isinstance(e, NextValueRef):
        return {"next_value_ref": e.node_id}
    raise TypeError(f"unknown value expr {type(e).__name__}")


def _value_from_jsonable(data) -> ValueExpr:
    if not isinstance(data, dict) or len(data) != 1:
        raise DvgSchemaError(f"bad value expression payload: {data!r}")
    tag, payload = next(iter(data.items()))
    try:
        if tag == "const":
            return VConst(state_from_jsonable(payload))
        if tag == "min":
            return VMin(tuple(_value_from_jsonable(c) for c in payload))
        if tag == "max":
            return VMax(tuple(_value_from_jsonable(c) for c in payload))
        if tag == "value_ref":
            return ValueRef(str(payload))
        if tag == "next_value_ref":
            return NextValueRef(str(payload))
    except ValueError as exc:
        raise DvgSchemaError(str(exc)) from exc
    raise DvgSchemaError(f"unknown value expression tag {tag!r}")


def to_json(dvg: Dvg) -> str:
    payload = {
        "version": SCHEMA_VERSION,
        "root": dvg.root,
        "topo_order": [list(scc) for scc in dvg.topo_order],
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "avoid": None if n.avoid is None else state_to_jsonable(n.avoid),
                "reach": None if n.reach is None else _value_to_jsonable(n.reach),
                "loop_next": n.loop_next,
                "children": list(n.children),
                "label": n.label,
            }
            for n in dvg.nodes.values()
        ],
    }
    return json.dumps(payload, indent=2)


def from_json(text: str) -> Dvg:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DvgSchemaError(f"unreadable DVG JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise DvgSchemaError("DVG JSON must be an object")
    if payload.get("version") != SCHEMA_VERSION:
        raise DvgSchemaError(
            f"unsupported schema version {payload.get('version')!r}"
        )
    try:
        raw_nodes = payload["nodes"]
        root = payload["root"]
        topo = payload["topo_order"]
    except KeyError as exc:
        raise DvgSchemaError(f"DVG JSON missing key {exc}") from exc

    nodes: dict[str, DvgNode] = {}
    for raw in raw_nodes:
        try:
            kind = NodeKind(raw["kind"])
            node = DvgNode(
                id=str(raw["id"]),
                kind=kind,
                avoid=(
                    None
                    if raw.get("avoid") is None
                    else state_from_jsonable(raw["avoid"])
                ),
                reach=(
                    None
                    if raw.get("reach") is None
                    else _value_from_jsonable(raw["reach"])
                ),
                loop_next=raw.get("loop_next"),
                children=tuple(str(c) for c in raw.get("children", ())),
                label=str(raw.get("label", "")),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DvgSchemaError(f"bad node payload: {exc}") from exc
        if node.id in nodes:
            raise DvgSchemaError(f"duplicate node id {node.id!r}")
        nodes[node.id] = node

    dvg = Dvg(
        nodes=nodes,
        root=str(root),
        topo_order=tuple(tuple(str(v) for v in scc) for scc in topo),
    )
    validate(dvg)
    return dvg


def validate(dvg: Dvg) -> None:
    """Check referential integrity; raises DvgSchemaError on violations."""
    if dvg.root not in dvg.nodes:
        raise DvgSchemaError(f"dangling root {dvg.root!r}")
    topo_ids = [v for scc in dvg.topo_order for v in scc]
    if sorted(topo_ids) != sorted(dvg.nodes):
        raise DvgSchemaError("topo_order does not cover the node set exactly")
    for node in dvg.nodes.values():
        for child in node.children:
            if child not in dvg.nodes:
                raise DvgSchemaError(
                    f"node {node.id!r} has dangling child {child!r}"
                )
        if node.loop_next is not None and node.loop_next not in dvg.nodes:
            raise DvgSchemaError(
                f"node {node.id!r} has dangling loop_next {node.loop_next!r}"
            )
        if node.reach is not None:
            for ref in value_refs(node.reach):
                if ref not in node.children:
                    raise DvgSchemaError(
                        f"node {node.id!r} references {ref!r} outside children"
                    )
