"""Command-line entry point: ``allocdesign {generate,solve,frontier,assign,power}``.

Exit codes: 0 success, 1 usage/configuration error, 2 infeasible design,
3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cohort as cohort_mod
from .cohort import EVAL, PRESETS, OutcomeModel, iter_rows, load_cohort, synthesize_cohort, write_cohort
from .constraints import BUDGET_CAP, check_feasibility, problem_from_config
from .dual import SolverOptions, solve_dual
from .errors import ConfigError, DataError, InfeasibleDesign, PolicyFileError
from .evaluator import efficiency_variance, utility_report
from .frontier import (
    ANCHOR_FIELDS,
    FRONTIER_FIELDS,
    DesignTemplate,
    anchor_rows,
    bootstrap_bands,
    frontier_rows,
    frontier_svg,
    sweep,
    write_table,
)
from .policy import Policy, unit_uniform, export_policy, import_policy
from .power import PowerSpec, rct_benchmark, rd_benchmark, wald_sample_size

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DATA = 0, 1, 2, 3
ASSIGN_CHUNK = 4096

log = logging.getLogger("allocdesign")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{x:.6g}"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    return str(x)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _read_config(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _design_rows(cohort):
    return cohort.train() if cohort.n_train else cohort


def _ensure_split(cohort, train_fraction, seed):
    if cohort.n_train and cohort.n_eval:
        return cohort
    return cohort.with_split(train_fraction, seed)


def cmd_generate(args):
    params = {}
    if args.concentration is not None:
        params["concentration"] = args.concentration
    if args.scale is not None:
        params["scale"] = args.scale
    preset = PRESETS.get(args.preset, {})
    base_rate = args.base_rate if args.base_rate is not None else preset.get("base_rate", 0.54)
    train_fraction = args.train_fraction if args.train_fraction is not None else preset.get("train_fraction", 0.4)
    groups = None
    if args.groups:
        groups = {}
        for item in args.groups.split(","):
            label, _, prob = item.partition(":")
            groups[label] = float(prob or 1.0)
    cohort = synthesize_cohort(args.n, base_rate, args.dgp, args.seed, train_fraction=train_fraction, groups=groups, **params)
    write_cohort(cohort, args.out)
    print(f"wrote {len(cohort)} rows to {args.out} (mean mu0 {_fmt(float(cohort.mu0.mean()))})")
    return EXIT_OK


def cmd_solve(args):
    cohort = load_cohort(args.cohort)
    config = _read_config(args.config)
    design = _design_rows(cohort)
    problem = problem_from_config(config, design)
    feas = check_feasibility(problem)
    if not feas:
        print(f"infeasible: {json.dumps(feas.witness)}", file=sys.stderr)
        return EXIT_INFEASIBLE
    options = SolverOptions.from_dict(config.get("solver", {}))
    try:
        sol = solve_dual(problem, options)
    except InfeasibleDesign as exc:
        print(f"infeasible: {exc} {json.dumps(exc.witness)}", file=sys.stderr)
        return EXIT_INFEASIBLE
    policy = Policy.from_solution(problem, sol)
    if args.out_policy:
        export_policy(policy, args.out_policy)
    report = {
        "lambda": [float(x) for x in sol.lam],
        "labels": [c.label for c in problem.constraints],
        "objective": sol.objective,
        "kkt_residual": sol.kkt_residual,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "constraint_values": [float(x) for x in sol.constraint_values],
        "rhs": [float(x) for x in problem.rhs],
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2))
    print(f"objective {_fmt(sol.objective)}  residual {_fmt(sol.kkt_residual)}  iterations {sol.iterations}")
    for label, lam in zip(report["labels"], sol.lam):
        print(f"  lambda[{label}] = {_fmt(float(lam))}")
    return EXIT_OK


def _budget_of(config):
    for item in config.get("constraints", []):
        if item.get("kind") == BUDGET_CAP:
            return float(item["b"])
    raise ConfigError("config needs a budget_cap constraint")


def _parse_grid(text):
    if text is None:
        return None, None
    if "," in text:
        return [float(x) for x in text.split(",") if x.strip()], None
    return None, int(text)


def cmd_frontier(args):
    cohort = _ensure_split(load_cohort(args.cohort), args.train_fraction, args.seed)
    config = _read_config(args.config)
    budget = _budget_of(config)
    fairness = next((dict(c) for c in config.get("constraints", []) if c.get("kind") == "fairness"), None)
    if fairness:
        fairness.pop("kind")
    template = DesignTemplate(budget, float(config.get("gamma", 0.01)), config.get("estimand", {"type": "ate"}), fairness)
    model = OutcomeModel(args.beta)
    rows = cohort.evaluation()
    spec = PowerSpec(model.ate(rows), args.alpha, args.power)
    grid, size = _parse_grid(args.grid)
    if grid is None and size is not None:
        from .frontier import default_grid

        grid = default_grid(cohort.train(), budget, template.gamma, size)
    options = SolverOptions.from_dict(config.get("solver", {}))
    frontier = sweep(cohort, model, template, grid, spec=spec, benchmarks=args.benchmarks, options=options, seed=args.seed)
    if args.bootstrap > 0:
        bootstrap_bands(frontier, args.bootstrap, args.multiplier, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(frontier_rows(frontier), out / "frontier.csv", FRONTIER_FIELDS)
    if args.benchmarks:
        write_table(anchor_rows(frontier), out / "anchors.csv", ANCHOR_FIELDS)
    (out / "frontier.svg").write_text(frontier_svg(frontier))
    print(f"{len(frontier.points)} design points written to {out}")
    if frontier.rct is not None:
        print(f"  rct: n={frontier.rct.n_required} recall={_fmt(frontier.rct.recall)}")
        print(f"  need-based recall={_fmt(frontier.need_based.recall)}")
        print(f"  rd: n={frontier.rd.n_required} deff={_fmt(frontier.rd.deff)} f_h={_fmt(frontier.rd.fraction_in_bandwidth)}")
        if frontier.ninety_pct is not None:
            pt = frontier.ninety_pct
            print(f"  90% utility: n={pt.n_required} ({_fmt(pt.n_required / frontier.rct.n_required)}x rct)")
        else:
            print("  90% utility: not attained on this grid")
    return EXIT_OK


def _assign_chunk(policy, seed, chunk, writer):
    u = np.array([ind.u for ind in chunk])
    group = np.array([ind.group for ind in chunk], dtype=object)
    for ind, p in zip(chunk, policy.probabilities(u, group)):
        p = float(p)
        arm = "treated" if unit_uniform(seed, ind.id) < p else "control"
        writer.writerow([ind.id, repr(p), arm])


def cmd_assign(args):
    policy = import_policy(args.policy)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["id", "p", "arm"])
        chunk = []
        for row, ind, _ in iter_rows(args.input):
            if policy.needs_group and ind.group is None:
                raise DataError(f"row {row}: policy needs a group label")
            chunk.append(ind)
            if len(chunk) == ASSIGN_CHUNK:
                _assign_chunk(policy, args.seed, chunk, w)
                chunk = []
        if chunk:
            _assign_chunk(policy, args.seed, chunk, w)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_power(args):
    if args.variance is not None:
        if args.tau is None:
            raise ConfigError("--variance needs --tau")
        n = wald_sample_size(args.variance, PowerSpec(args.tau, args.alpha, args.power))
        print(n)
        return EXIT_OK
    if not args.cohort:
        raise ConfigError("power needs --cohort (or --variance and --tau)")
    cohort = load_cohort(args.cohort)
    split = EVAL if cohort.n_eval else None
    rows = cohort.evaluation() if split else cohort
    model = OutcomeModel(args.beta)
    spec = PowerSpec(args.tau if args.tau is not None else model.ate(rows), args.alpha, args.power)
    table = []
    if args.policy:
        policy = import_policy(args.policy)
        v = efficiency_variance(policy, cohort, model, split=split).v_ate
        util = utility_report(policy, cohort, split=split)
        table.append({"design": "policy", "n_required": wald_sample_size(v, spec), "recall": util.recall, "deff": "", "bandwidth": "", "f_h": ""})
    else:
        if args.budget is None:
            raise ConfigError("--design needs --budget")
        if args.design == "rct":
            r = rct_benchmark(cohort, model, args.budget, spec, split=split)
            table.append({"design": "rct", "n_required": r.n_required, "recall": r.recall, "deff": 1.0, "bandwidth": "", "f_h": 1.0})
        else:
            rd = rd_benchmark(cohort, model, args.budget, spec, seed=args.seed, split=split, bandwidth=args.bandwidth)
            table.append({"design": "rd", "n_required": rd.n_required, "recall": "", "deff": rd.deff, "bandwidth": rd.bandwidth, "f_h": rd.fraction_in_bandwidth})
    if args.out:
        write_table(table, args.out, ANCHOR_FIELDS)
    for row in table:
        print("  ".join(f"{k}={_fmt(v)}" for k, v in row.items() if v != ""))
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="allocdesign", description="Randomised allocation designs trading off targeting and learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="stream solver diagnostics to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesise a cohort file")
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--base-rate", type=float)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--dgp", default="beta", choices=sorted(cohort_mod.GENERATORS))
    g.add_argument("--concentration", type=float)
    g.add_argument("--scale", type=float)
    g.add_argument("--train-fraction", type=float)
    g.add_argument("--groups", help="labels with probabilities, e.g. A:0.5,B:0.5")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve the sample dual and export a policy")
    s.add_argument("--cohort", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out-policy")
    s.add_argument("--report")
    s.set_defaults(func=cmd_solve)

    f = sub.add_parser("frontier", help="sweep the utility floor and write frontier tables and a plot")
    f.add_argument("--cohort", required=True)
    f.add_argument("--config", required=True)
    f.add_argument("--grid", help="number of levels, or a comma-separated list of levels")
    f.add_argument("--bootstrap", type=int, default=0, help="multiplier bootstrap replicates (0 disables bands)")
    f.add_argument("--multiplier", default="gaussian", choices=["gaussian", "rademacher"])
    f.add_argument("--benchmarks", action=argparse.BooleanOptionalAction, default=True)
    f.add_argument("--beta", type=float, default=0.1)
    f.add_argument("--alpha", type=float, default=0.05)
    f.add_argument("--power", type=float, default=0.8)
    f.add_argument("--train-fraction", type=float, default=0.4, help="used only when the file has no split column")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_frontier)

    a = sub.add_parser("assign", help="stream assignment probabilities and arms for arrivals")
    a.add_argument("--policy", required=True)
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_assign)

    p = sub.add_parser("power", help="required sample sizes for a policy or a benchmark design")
    p.add_argument("--cohort")
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--policy")
    grp.add_argument("--design", choices=["rct", "rd"])
    p.add_argument("--budget", type=float)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--power", type=float, default=0.8)
    p.add_argument("--tau", type=float, help="effect to detect (default: the model ATE)")
    p.add_argument("--variance", type=float, help="per-unit variance; prints the Wald sample size only")
    p.add_argument("--bandwidth", type=float, help="override the IK bandwidth for --design rd")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_power)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s %(message)s")
    try:
        return args.func(args)
    except InfeasibleDesign as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataError, PolicyFileError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        # Downstream reader (e.g. ``head``) closed early; not an error.
        sys.stderr.close()
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
