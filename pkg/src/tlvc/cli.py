"""Command-line front end for the value-graph pipeline.

Five subcommands mirror the library stages: ``parse`` checks a formula
and dumps its tree, ``compile`` lowers it to a value graph, ``solve``
runs discounted iteration over a grid environment, ``rollout`` plays the
greedy switching policy from a start cell, and ``verify`` cross-checks
the solver against the exact oracle.

Exit codes: 0 on success, 1 for user errors (bad formula, unsupported
fragment, missing files, failed verification), 2 when an internal
invariant breaks (non-convergence, dependency violations).

The ``TLVC_LOG`` environment variable sets the log level (DEBUG, INFO,
WARNING, ...). All output is deterministic for a fixed config and seed;
the seed is echoed in report headers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from collections import Counter
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dvg import Dvg, DvgSchemaError, NodeKind, compile_spec, to_dot, to_json
from .logic import (
    And,
    Finally,
    Globally,
    Next,
    Not,
    Or,
    Predicate,
    PredicateRegistry,
    RegistryError,
    Until,
    atom_ids,
    robustness,
)
from .mdp import GridConfigError, Mdp, load_grid
from .mdp import write_heatmap_csv as _write_heatmap
from .normalize import (
    FragmentError,
    NormalizedSpec,
    check_equivalence,
    normalize,
    spec_to_jsonable,
)
from .oracle import IterationError, UnsupportedSpecError, oracle_value
from .parse import ParseError, parse_string, pred_to_jsonable
from .policy import PolicyError, simulate, write_rollout_csv
from .solve import (
    ConvergenceError,
    DependencyError,
    SolveConfig,
    Solution,
    backup_avoid,
    backup_reach_avoid,
    backup_reach_avoid_loop,
    solve,
    successor_array,
    write_value_blob,
    write_values_csv,
)

logger = logging.getLogger(__name__)

_INTERNAL_ERRORS = (ConvergenceError, DependencyError, IterationError, PolicyError)
_USER_ERRORS = (
    FragmentError,
    GridConfigError,
    DvgSchemaError,
    RegistryError,
    UnsupportedSpecError,
    OSError,
)


class CliError(Exception):
    """User-facing failure; the message goes to stderr and exit code is 1."""


# ---------------------------------------------------------------------------
# Shared plumbing


def _configure_logging() -> None:
    level_name = os.environ.get("TLVC_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(levelname)s %(name)s: %(message)s"
    )


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError(f"cannot read {path}: {err}") from err


def _parse_file(path: str) -> tuple[str, Predicate]:
    text = _read_text(path)
    try:
        return text, parse_string(text)
    except ParseError as err:
        raise CliError(err.caret_diagnostic(text)) from err


def _load_env(path: str) -> tuple[Mdp, PredicateRegistry]:
    if not Path(path).exists():
        raise CliError(f"env config not found: {path}")
    return load_grid(path)


def _check_atoms(pred: Predicate, reg: PredicateRegistry) -> None:
    known = set(reg.atom_ids())
    missing = sorted(atom_ids(pred) - known)
    if missing:
        raise CliError(
            f"spec uses atoms not defined by the env: {', '.join(missing)} "
            f"(env defines: {', '.join(sorted(known))})"
        )


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CliError(f"cannot create output directory {out}: {err}") from err
    return out


def _gamma_schedule(text: str) -> tuple[float, ...]:
    try:
        schedule = tuple(float(part) for part in text.split(","))
    except ValueError as err:
        raise CliError(f"bad gamma schedule {text!r}: {err}") from err
    for g in schedule:
        if not 0.0 < g < 1.0:
            raise CliError(f"gamma {g} outside (0, 1)")
    return schedule


def _solve_config(args: argparse.Namespace) -> SolveConfig:
    return SolveConfig(gamma_schedule=_gamma_schedule(args.gamma), tol=args.tol)


def _pipeline(
    args: argparse.Namespace,
) -> tuple[Predicate, NormalizedSpec, Dvg, Mdp, PredicateRegistry]:
    _, pred = _parse_file(args.spec)
    mdp, reg = _load_env(args.env)
    _check_atoms(pred, reg)
    spec = normalize(pred)
    dvg = compile_spec(spec)
    return pred, spec, dvg, mdp, reg


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_parse(args: argparse.Namespace) -> int:
    _, pred = _parse_file(args.spec)
    payload: dict = {"ast": pred_to_jsonable(pred)}
    if args.normalize:
        payload["normalized"] = spec_to_jsonable(normalize(pred))
    print(json.dumps(payload, indent=2))
    return 0


def cmd_compile(args: argparse.Namespace) -> int:
    _, _, dvg, _, _ = _pipeline(args)
    out = _out_dir(args)
    (out / "dvg.json").write_text(to_json(dvg), encoding="utf-8")
    if args.dot:
        (out / "dvg.dot").write_text(to_dot(dvg), encoding="utf-8")
    edges = sum(len(n.children) for n in dvg.nodes.values())
    edges += sum(1 for n in dvg.nodes.values() if n.loop_next is not None)
    kind_counts = Counter(n.kind.value for n in dvg.nodes.values())
    loop_sizes = [
        len(layer)
        for layer in dvg.topo_order
        if any(dvg.nodes[i].kind is NodeKind.REACH_AVOID_LOOP for i in layer)
    ]
    print(f"nodes={len(dvg.nodes)} edges={edges} sccs={len(dvg.topo_order)}")
    print("kinds: " + " ".join(f"{k}={v}" for k, v in sorted(kind_counts.items())))
    if loop_sizes:
        print("loop sccs: " + ",".join(str(s) for s in loop_sizes))
    print(f"root={dvg.root}")
    print(f"wrote {out / 'dvg.json'}")
    if args.dot:
        print(f"wrote {out / 'dvg.dot'}")
    return 0


def cmd_solve(args: argparse.Namespace) -> int:
    _, _, dvg, mdp, reg = _pipeline(args)
    cfg = _solve_config(args)
    sol = solve(dvg, mdp, reg, cfg)
    out = _out_dir(args)
    write_values_csv(str(out / "values.csv"), dvg, sol)
    write_value_blob(str(out / "values.bin"), dvg, sol)
    written = [out / "values.csv", out / "values.bin"]
    if mdp.coordinates is not None:
        for layer in dvg.topo_order:
            for node_id in layer:
                path = out / f"heatmap_{node_id}.csv"
                _write_heatmap(str(path), mdp, sol.values(node_id))
                written.append(path)
    lines = [f"# seed={args.seed} gamma={args.gamma} tol={_fmt(cfg.tol)}"]
    for layer in dvg.topo_order:
        for node_id in layer:
            lines.append(
                f"node={node_id} iters={sol.iterations[node_id]} "
                f"residual={_fmt(sol.residuals[node_id])}"
            )
    report = "\n".join(lines) + "\n"
    (out / "solve_report.txt").write_text(report, encoding="utf-8")
    written.append(out / "solve_report.txt")
    sys.stdout.write(report)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_rollout(args: argparse.Namespace) -> int:
    pred, _, dvg, mdp, reg = _pipeline(args)
    if not 0 <= args.x0 < mdp.state_count:
        raise CliError(
            f"x0 {args.x0} out of range (env has {mdp.state_count} states)"
        )
    horizon = args.horizon if args.horizon is not None else 4 * mdp.state_count
    if horizon < 1:
        raise CliError("horizon must be at least 1")
    cfg = _solve_config(args)
    sol = solve(dvg, mdp, reg, cfg)
    trace, steps, _ = simulate(args.x0, sol, dvg, mdp, reg, horizon)
    rho = robustness(pred, trace, 0, reg)
    out = _out_dir(args)
    path = out / "rollout.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        write_rollout_csv(fh, steps, mdp)
    print(f"# seed={args.seed} x0={args.x0} horizon={horizon}")
    print(f"robustness={_fmt(rho)}")
    print(f"satisfied={'true' if rho > 0.0 else 'false'}")
    print(f"wrote {path}")
    return 0


def _sign_report(
    solved: np.ndarray, exact: np.ndarray, margin: float
) -> tuple[int, int]:
    checked = np.abs(exact) >= margin
    bad = checked & (np.sign(solved) != np.sign(exact))
    return int(np.count_nonzero(bad)), int(np.count_nonzero(checked))


def _contraction_samples(
    mdp: Mdp, bound: float, rng: random.Random, samples: int
) -> tuple[int, float]:
    """Random (V, W) pairs through each printed backup; returns
    (violations, max observed ratio)."""
    succ = successor_array(mdp)
    gamma = 0.95
    n = mdp.state_count
    violations = 0
    worst = 0.0

    def table() -> np.ndarray:
        return np.array(
            [rng.uniform(-bound, bound) for _ in range(n)], dtype=np.float64
        )

    def sup(a: np.ndarray, b: np.ndarray) -> float:
        return float(np.max(np.abs(a - b)))

    for _ in range(samples):
        q, r = table(), table()
        checks: list[tuple[float, float]] = []

        V, W = table(), table()
        checks.append(
            (sup(backup_avoid(V, q, succ, gamma), backup_avoid(W, q, succ, gamma)),
             sup(V, W))
        )

        V, W = table(), table()
        checks.append(
            (
                sup(
                    backup_reach_avoid(V, r, q, succ, gamma),
                    backup_reach_avoid(W, r, q, succ, gamma),
                ),
                sup(V, W),
            )
        )

        Vs = [table(), table()]
        Ws = [table(), table()]
        lhs_loop = max(
            sup(
                backup_reach_avoid_loop(Vs, j, r, q, succ, gamma),
                backup_reach_avoid_loop(Ws, j, r, q, succ, gamma),
            )
            for j in range(2)
        )
        gap_loop = max(sup(Vs[j], Ws[j]) for j in range(2))
        checks.append((lhs_loop, gap_loop))

        for lhs, gap in checks:
            if gap > 0.0:
                worst = max(worst, lhs / gap)
            if lhs > gamma * gap + 1e-12:
                violations += 1
    return violations, worst


def _permute_loop_conjunctions(pred: Predicate, rng: random.Random) -> Predicate:
    """Reorder conjuncts under every G(... & ...); value-preserving."""
    if isinstance(pred, Globally) and isinstance(pred.child, And):
        children = list(pred.child.children)
        order = list(range(len(children)))
        rng.shuffle(order)
        if order == sorted(order) and len(order) > 1:
            order = order[1:] + order[:1]
        return Globally(And(tuple(children[i] for i in order)))
    if isinstance(pred, And):
        return And(tuple(_permute_loop_conjunctions(c, rng) for c in pred.children))
    if isinstance(pred, Or):
        return Or(tuple(_permute_loop_conjunctions(c, rng) for c in pred.children))
    if isinstance(pred, Not):
        return Not(_permute_loop_conjunctions(pred.child, rng))
    if isinstance(pred, Next):
        return Next(_permute_loop_conjunctions(pred.child, rng))
    if isinstance(pred, Finally):
        return Finally(_permute_loop_conjunctions(pred.child, rng))
    if isinstance(pred, Globally):
        return Globally(_permute_loop_conjunctions(pred.child, rng))
    if isinstance(pred, Until):
        return Until(
            _permute_loop_conjunctions(pred.left, rng),
            _permute_loop_conjunctions(pred.right, rng),
        )
    return pred


def cmd_verify(args: argparse.Namespace) -> int:
    pred, spec, dvg, mdp, reg = _pipeline(args)
    cfg = _solve_config(args)
    sol = solve(dvg, mdp, reg, cfg)
    exact = oracle_value(spec, mdp, reg, jobs=args.jobs)
    solved = np.asarray(sol.values(dvg.root), dtype=np.float64)

    lines = [
        "# tlvc verify",
        f"# spec={args.spec} env={args.env}",
        f"# gamma={args.gamma} tol={_fmt(args.tol)} margin={_fmt(args.margin)} "
        f"samples={args.samples} seed={args.seed} jobs={args.jobs}",
    ]
    failed = False

    gap = float(np.max(np.abs(solved - exact)))
    lines.append(f"max |V_gamma - V*| = {_fmt(gap)}")

    bad, checked = _sign_report(solved, exact, args.margin)
    lines.append(
        f"sign disagreements at margin {_fmt(args.margin)}: {bad} of "
        f"{checked} checked states"
    )
    if bad:
        failed = True

    eq = check_equivalence(pred, spec, args.samples, mdp, reg, seed=args.seed)
    lines.append(
        f"rewrite equivalence: {eq.samples} samples, {eq.mismatches} mismatches"
    )
    if not eq.ok:
        failed = True

    if args.contraction:
        rng = random.Random(args.seed)
        violations, worst = _contraction_samples(
            mdp, reg.bound, rng, args.samples
        )
        lines.append(
            f"contraction self-test: {violations} violations over "
            f"{args.samples} samples per operator, max ratio {_fmt(worst)}"
        )
        if violations:
            failed = True

    if args.permute_loops:
        rng = random.Random(args.seed + 1)
        permuted = _permute_loop_conjunctions(pred, rng)
        if permuted == pred:
            lines.append("loop-order permutation: no G-conjunctions, skipped")
        else:
            dvg_p = compile_spec(normalize(permuted))
            sol_p = solve(dvg_p, mdp, reg, cfg)
            same = np.array_equal(sol_p.values(dvg_p.root), solved)
            lines.append(
                "loop-order permutation: root tables "
                + ("identical" if same else "DIFFER")
            )
            if not same:
                failed = True

    lines.append("result: " + ("FAIL" if failed else "PASS"))
    report = "\n".join(lines) + "\n"
    out = _out_dir(args)
    (out / "verify_report.txt").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    print(f"wrote {out / 'verify_report.txt'}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(sub: argparse.ArgumentParser, env_required: bool) -> None:
    sub.add_argument("spec", help="path to the formula file")
    sub.add_argument(
        "--env", required=env_required, help="grid environment TOML config"
    )
    sub.add_argument("--out", default="out", help="output directory")
    sub.add_argument(
        "--gamma",
        default="0.9,0.99,0.999",
        help="comma-separated ascending discount schedule",
    )
    sub.add_argument("--tol", type=float, default=1e-9, help="solver tolerance")
    sub.add_argument("--jobs", type=int, default=1, help="oracle thread cap")
    sub.add_argument("--seed", type=int, default=0, help="sampling seed")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tlvc",
        description="Compile temporal objectives to value graphs and solve them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="check a formula and dump its tree")
    _add_common(p, env_required=False)
    p.add_argument(
        "--normalize",
        action="store_true",
        help="also normalize and dump the accepted-fragment form",
    )
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("compile", help="lower a formula to its value graph")
    _add_common(p, env_required=True)
    p.add_argument("--dot", action="store_true", help="also write dvg.dot")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("solve", help="solve the value graph over an environment")
    _add_common(p, env_required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("rollout", help="play the greedy policy from a start state")
    _add_common(p, env_required=True)
    p.add_argument("--x0", type=int, required=True, help="start state index")
    p.add_argument(
        "--horizon",
        type=int,
        default=None,
        help="step cap (default: 4x state count)",
    )
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("verify", help="cross-check the solver against the oracle")
    _add_common(p, env_required=True)
    p.add_argument(
        "--margin",
        type=float,
        default=0.05,
        help="oracle margin below which sign is not checked",
    )
    p.add_argument(
        "--samples",
        type=int,
        default=200,
        help="sample count for equivalence and contraction checks",
    )
    p.add_argument(
        "--contraction",
        action="store_true",
        help="also run the random-table contraction self-test",
    )
    p.add_argument(
        "--permute-loops",
        action="store_true",
        help="re-solve with G-conjunctions reordered and compare root tables",
    )
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except CliError as err:
        print(str(err), file=sys.stderr)
        return 1
    except _USER_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except _INTERNAL_ERRORS as err:
        print(f"internal error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
