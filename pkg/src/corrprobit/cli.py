"""Command-line interface.

Data goes to files named by ``--out``; a short human-readable summary goes
to standard output. Failures print a JSON error object to standard error
and exit with 2 (bad input), 3 (numerical failure) or 4 (infeasible).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from itertools import combinations
from pathlib import Path

import numpy as np

from . import experiments as ex
from .aggregator import (
    CountsSource,
    EstimationConfig,
    SamplingSource,
    build_subgraph,
    estimate_model,
    select_triples,
)
from .errors import DuplicateItemsInRow, InputError, ParseError, ProbitError
from .estimator3 import (
    GRID_POINTS,
    TripleCounts,
    estimate_triple,
    read_counts_csv,
    write_counts_csv,
)
from .model import ProbitModel, load_model, normalize, save_model
from .probability import PERM_ORDERS, all_triples
from .sampling import paired_welfare_difference, sample_triple_counts
from .witness import dump_family, lowerbound_pair, pairwise_equivalent_family, triple_separation

# ranking (best, middle) positions within a sorted triple -> ordering index
_ORDER_INDEX = {(o[0], o[1]): p for p, o in enumerate(PERM_ORDERS)}


def _require_seed(args, command: str) -> int:
    if args.seed is None:
        raise InputError(f"--seed is required for {command}")
    return args.seed


def _positive(name: str, value) -> None:
    if value is None or value < 1:
        raise InputError(f"{name} must be a positive integer, got {value}")


def _parse_triples(spec: str, n: int) -> list[tuple]:
    if spec == "all":
        return all_triples(n)
    if spec == "graph":
        return select_triples(build_subgraph(n))
    out = []
    for chunk in spec.split(","):
        try:
            t = tuple(sorted(int(x) for x in chunk.split("-")))
        except ValueError as exc:
            raise InputError(f"bad triple {chunk!r}; use i-j-k") from exc
        if len(t) != 3 or len(set(t)) != 3 or t[0] < 0 or t[2] >= n:
            raise InputError(f"bad triple {chunk!r} for {n} items")
        out.append(t)
    return sorted(set(out))


def _write_text(path, text: str) -> None:
    Path(path).write_text(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# ----------------------------------------------------------------------------
# subcommands


def cmd_sample(args) -> None:
    seed = _require_seed(args, "sample")
    _positive("--samples-per-triple", args.samples_per_triple)
    model = load_model(args.model)
    triples = _parse_triples(args.triples, model.n)
    rng = np.random.default_rng(seed)
    counts = [
        TripleCounts(t, sample_triple_counts(model, t, args.samples_per_triple, rng))
        for t in triples
    ]
    write_counts_csv(args.out, counts)
    print(f"sampled {len(counts)} triples x {args.samples_per_triple} observations -> {args.out}")


def _estimate_counts(counts, n, config):
    if n == 3 and len(counts) == 1:
        est, report = estimate_triple(
            counts[0], config.min_samples, tol=config.tol, grid_points=config.grid_points
        )
        model, _ = normalize(ProbitModel(est.mu_hat, est.sigma_hat))
        diag = {**est.to_dict(), "gamma_hat": report.gamma_hat}
        return model, diag
    source = CountsSource(counts)
    est = estimate_model(source, n, 0, config, triples=source.triples)
    return est.model(), {**est.diagnostics, "t_star": est.t_star}


def cmd_estimate(args) -> None:
    _positive("--grid", args.grid)
    config = EstimationConfig(
        sigma_solver=args.sigma_solver, mu_solver=args.mu_solver, grid_points=args.grid
    )
    if (args.counts is None) == (args.model is None):
        raise InputError("give exactly one of --counts or --model")
    if args.counts is not None:
        counts = read_counts_csv(args.counts)
        if not counts:
            raise InputError(f"{args.counts}: no counts")
        n = args.n or 1 + max(max(c.triple) for c in counts)
        model, diag = _estimate_counts(counts, n, config)
        source_desc = f"{len(counts)} triples from {args.counts}"
    else:
        seed = _require_seed(args, "estimate --model")
        _positive("--samples-per-triple", args.samples_per_triple)
        truth = load_model(args.model)
        est = estimate_model(
            SamplingSource(truth, seed), truth.n, args.samples_per_triple, config
        )
        model = est.model()
        diag = {**est.diagnostics, "t_star": est.t_star}
        if truth.normalized:
            diag["mu_error"] = float(np.abs(model.mu - truth.mu).max())
            diag["sigma_error"] = float(np.abs(model.sigma - truth.sigma).max())
        source_desc = f"{diag['n_triples']} sampled triples"
    save_model(model, args.out)
    if args.diagnostics:
        _write_text(args.diagnostics, _dump_json(diag))
    print(f"estimated {model.n}-item model from {source_desc} -> {args.out}")
    for key in ("mu_error", "sigma_error", "t_star", "max_cone_residual"):
        if key in diag:
            print(f"  {key}: {diag[key]:.4g}")


def read_rankings_csv(path) -> list[tuple[str, list[str], int]]:
    """Rows of ``user_id,item1,item2,...`` (best first); a header is optional."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            while row and row[-1] == "":
                row.pop()
            if not row:
                continue
            if lineno == 1 and row[0].lower() in ("user_id", "user"):
                continue
            user, items = row[0], row[1:]
            if any(i == "" for i in items):
                raise ParseError(f"{path}: line {lineno}: empty item field")
            if len(set(items)) != len(items):
                raise DuplicateItemsInRow(f"{path}: line {lineno}: user {user} repeats an item")
            rows.append((user, items, lineno))
    return rows


def rankings_to_counts(rows, max_triples_per_row=None, rng=None):
    """Best-of-three counts from every 3-subset of each ranking.

    Integer labels are kept; other labels are numbered in sorted order and
    the vocabulary is returned alongside the counts.
    """
    labels = sorted({i for _, items, _ in rows for i in items})
    try:
        index = {lab: int(lab) for lab in labels}
        if any(v < 0 for v in index.values()) or len(set(index.values())) != len(index):
            raise ValueError
        vocab = None
    except ValueError:
        index = {lab: k for k, lab in enumerate(labels)}
        vocab = labels
    table: dict[tuple, np.ndarray] = {}
    for _, items, _ in rows:
        ranked = [index[i] for i in items]
        if len(ranked) < 3:
            continue
        subsets = list(combinations(range(len(ranked)), 3))
        if max_triples_per_row is not None and len(subsets) > max_triples_per_row:
            pick = rng.choice(len(subsets), max_triples_per_row, replace=False)
            subsets = [subsets[k] for k in sorted(pick)]
        for pos in subsets:
            best, mid, _ = (ranked[p] for p in pos)
            triple = tuple(sorted(ranked[p] for p in pos))
            code = _ORDER_INDEX[(triple.index(best), triple.index(mid))]
            table.setdefault(triple, np.zeros(6, dtype=np.int64))[code] += 1
    counts = [TripleCounts(t, table[t]) for t in sorted(table)]
    return counts, vocab


def cmd_ingest(args) -> None:
    rows = read_rankings_csv(args.rankings)
    short = [ln for _, items, ln in rows if len(items) < 3]
    if short:
        raise InputError(f"{args.rankings}: line {short[0]}: a ranking needs at least 3 items")
    rng = None
    if args.max_triples_per_row is not None:
        _positive("--max-triples-per-row", args.max_triples_per_row)
        rng = np.random.default_rng(_require_seed(args, "ingest --max-triples-per-row"))
    counts, vocab = rankings_to_counts(rows, args.max_triples_per_row, rng)
    write_counts_csv(args.out, counts)
    total = sum(c.total for c in counts)
    print(f"ingested {len(rows)} rankings -> {len(counts)} triples, {total} observations")
    if vocab is not None:
        vocab_path = str(args.out) + ".items.csv"
        _write_text(vocab_path, "index,label\n" + "".join(f"{k},{v}\n" for k, v in enumerate(vocab)))
        print(f"  item labels numbered in {vocab_path}")


def cmd_witness(args) -> None:
    seed = _require_seed(args, "witness")
    base = load_model(args.model)
    if not base.normalized:
        base, _ = normalize(base)
    family = pairwise_equivalent_family(base, args.count, args.nu, seed)
    seps = [triple_separation(base, m) for m in family.members]
    text = json.loads(dump_family(family))
    text["report"]["triple_tv"] = [
        {"tv": tv, "triple": list(t)} for tv, t in seps
    ]
    if args.out:
        _write_text(args.out, _dump_json(text))
    print(f"case {family.case_tag}: {len(family.members)} members, nu = {family.perturbation_scale:.3g}")
    print(f"  min sigma gap {family.min_gap:.4g}, max pairwise diff {family.max_pairwise_diff:.2e}")
    print(f"  min triple TV {min(tv for tv, _ in seps):.4g}")


def cmd_lowerbound(args) -> None:
    pair = lowerbound_pair(args.n, args.epsilon, args.i_star, args.j_star)
    report = pair.report()
    if args.out:
        if args.format == "json":
            report["sigma1"] = pair.sigma1.tolist()
            report["sigma2"] = pair.sigma2.tolist()
            _write_text(args.out, _dump_json(report))
        else:
            lines = ["i,j,k,kl"] + [
                f"{t[0]},{t[1]},{t[2]},{v!r}" for t, v in sorted(pair.kl_per_triple.items())
            ]
            _write_text(args.out, "\n".join(lines) + "\n")
    print(f"n = {args.n}, epsilon = {args.epsilon:g}")
    print(f"  traces {report['trace1']:.15g} / {report['trace2']:.15g}, sup gap {report['sup_gap']:.4g}")
    print(f"  max triple KL {report['max_kl']:.3e} (epsilon^2 = {report['kl_bound']:.3e})")


def cmd_experiment(args) -> None:
    seed = _require_seed(args, "experiment")
    regime = ex.SyntheticRegime(args.mu, args.sigma, args.n, seed)
    task = ex.AccuracyTask(
        trials=args.trials,
        target_accepted=args.target_accepted,
        mc_cap=args.mc_draws,
        bootstrap=args.bootstrap,
    )
    _positive("--training-budget", args.training_budget)
    reports, fitted = ex.run_regime(regime, task, args.training_budget, args.methods.split(","))
    if args.out:
        if args.format == "json":
            _write_text(args.out, ex.reports_to_json(reports) + "\n")
        else:
            _write_text(args.out, ex.reports_to_csv([r.row() for r in reports]))
    if args.heatmaps:
        folder = Path(args.heatmaps)
        folder.mkdir(parents=True, exist_ok=True)
        for name, m in fitted.items():
            if isinstance(m, ProbitModel):
                _write_text(folder / f"{name}_sigma.csv", ex.matrix_to_csv(m.sigma))
    print(f"regime {regime.label}, n = {args.n}, {args.trials} trials")
    for r in reports:
        q = " ".join(f"{v:.3f}" for v in r.quantiles)
        print(f"  {r.method:16s} accuracy quartiles {q}")


def cmd_welfare(args) -> None:
    seed = _require_seed(args, "welfare")
    _positive("--mc-draws", args.mc_draws)
    truth = load_model(args.model)
    fitted = {"model": truth, "top_means": ex.LogitModel(truth.mu)}
    for spec in args.fitted or []:
        name, _, path = spec.partition("=")
        if not path:
            raise InputError(f"--fitted expects NAME=PATH, got {spec!r}")
        fitted[name] = load_model(path)
    sizes = [int(s) for s in args.sizes.split(",")]
    for s in sizes:
        if not 1 <= s <= truth.n:
            raise InputError(f"menu size {s} not in [1, {truth.n}]")
    reports = ex.run_welfare(truth, fitted, sizes, args.mc_draws, seed)
    rows = [r.row() for r in reports]
    by_size = {}
    for r in reports:
        by_size.setdefault(r.size, {})[r.method] = r.menu
    comparisons = []
    for s, menus in sorted(by_size.items()):
        if menus["model"] != menus["top_means"]:
            mean, se = paired_welfare_difference(
                truth, menus["model"], menus["top_means"], args.mc_draws, seed
            )
            comparisons.append({"size": s, "difference": mean, "stderr": se})
    if args.out:
        if args.format == "json":
            _write_text(args.out, _dump_json({"menus": rows, "comparisons": comparisons}))
        else:
            _write_text(args.out, ex.reports_to_csv(rows))
    for r in reports:
        print(f"  {r.method:12s} size {r.size}: menu {list(r.menu)} value {r.true_value:.4f}")
    for c in comparisons:
        print(
            f"  size {c['size']}: model menu beats top means by {c['difference']:.4f} "
            f"({c['difference'] / c['stderr']:.1f} standard errors)"
        )


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrprobit", description="Correlated probit models from best-of-three rankings."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, help="seed for all randomness")
        return p

    p = add("sample", cmd_sample, "simulate best-of-three counts from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples-per-triple", type=int, required=True)
    p.add_argument(
        "--triples", default="graph", help="'graph' (sparse design), 'all', or i-j-k,i-j-k"
    )

    p = add("estimate", cmd_estimate, "estimate a normalized model")
    p.add_argument("--counts", help="counts CSV")
    p.add_argument("--model", help="sample from this model instead of reading counts")
    p.add_argument("--samples-per-triple", type=int)
    p.add_argument("--n", type=int, help="item count (default: largest label + 1)")
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="write diagnostics JSON here")
    p.add_argument("--grid", type=int, default=GRID_POINTS, help="angle-search grid points")
    p.add_argument("--sigma-solver", choices=("propagate", "lp"), default="propagate")
    p.add_argument("--mu-solver", choices=("lsq", "lp"), default="lsq")

    p = add("ingest", cmd_ingest, "convert rankings to best-of-three counts")
    p.add_argument("--rankings", required=True, help="CSV rows user_id,item1,item2,...")
    p.add_argument("--out", required=True)
    p.add_argument("--max-triples-per-row", type=int)

    p = add("witness", cmd_witness, "models sharing all pairwise probabilities")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--nu", type=float, default=0.4)
    p.add_argument("--out")

    p = add("lowerbound", cmd_lowerbound, "two models close on every triple")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--i-star", type=int, default=0)
    p.add_argument("--j-star", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"), default="json")

    p = add("experiment", cmd_experiment, "synthetic accuracy study for one regime")
    p.add_argument("--mu", choices=ex.MU_KINDS, default="zero")
    p.add_argument("--sigma", choices=ex.SIGMA_KINDS, default="bin")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--training-budget", type=int, default=ex.DEFAULT_TRAINING_BUDGET)
    p.add_argument("--methods", default=",".join(ex.DEFAULT_METHODS))
    p.add_argument("--mc-draws", type=int, default=10_000_000, help="proposal cap per prediction")
    p.add_argument("--target-accepted", type=int, default=200)
    p.add_argument("--bootstrap", type=int, default=200)
    p.add_argument("--heatmaps", help="directory for covariance CSV matrices")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = add("welfare", cmd_welfare, "welfare-maximizing menus")
    p.add_argument("--model", required=True, help="true model")
    p.add_argument("--fitted", action="append", help="NAME=PATH of a fitted model (repeatable)")
    p.add_argument("--sizes", default="1,2,3")
    p.add_argument("--mc-draws", type=int, default=1_000_000)
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ProbitError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": 2}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
