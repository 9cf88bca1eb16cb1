"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 adapter
protocol error, 5 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cluster, hierarchy, importance, interactions, model, synth
from .perturb import DEFAULT_PERMUTATIONS, KINDS, PerturbationSpec

logger = logging.getLogger("hierfi")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PROTOCOL = 4
EXIT_INTERNAL = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config_error(message):
    return CliError(EXIT_CONFIG, message)


def _data_error(message):
    return CliError(EXIT_DATA, message)


# --- input helpers ---------------------------------------------------------


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise _config_error(f"{what} file not found: {path}")
    return p


def _read_text(path, what: str) -> str:
    try:
        return _require_file(path, what).read_text(encoding="utf-8")
    except OSError as exc:
        raise _config_error(f"cannot read {what} file {path}: {exc}") from None


def _load_hierarchy(path) -> hierarchy.FeatureHierarchy:
    text = _read_text(path, "hierarchy")
    fmt = "csv" if str(path).lower().endswith(".csv") else None
    try:
        return hierarchy.load_hierarchy(text, fmt)
    except (hierarchy.HierarchyError, ValueError, KeyError, TypeError) as exc:
        raise _config_error(f"invalid hierarchy {path}: {exc}") from None


def _load_data(args) -> model.Dataset:
    _require_file(args.data, "data")
    if args.targets is not None:
        _require_file(args.targets, "targets")
    try:
        return model.read_dataset(args.data, args.targets)
    except (ValueError, IndexError) as exc:
        raise _data_error(f"invalid data: {exc}") from None


def _load_ground_truth(path) -> synth.GroundTruth:
    try:
        return synth.GroundTruth.from_dict(json.loads(_read_text(path, "ground-truth")))
    except (ValueError, KeyError, TypeError) as exc:
        raise _config_error(f"invalid ground-truth document {path}: {exc}") from None


def _make_model(args, data: model.Dataset):
    if args.adapter:
        m = model.AdapterModel(args.adapter)
        source = {"kind": "adapter", "command": args.adapter}
    elif args.ground_truth:
        gt = _load_ground_truth(args.ground_truth)
        m = model.make_synthetic_model(gt, args.sigma, args.noise_seed)
        source = {"kind": "synthetic", "ground_truth": str(args.ground_truth), "sigma": args.sigma, "noise_seed": args.noise_seed}
    else:
        raise _config_error("a model is required: pass --adapter CMD or --ground-truth FILE")
    if m.arity != data.n_features:
        if hasattr(m, "close"):
            m.close()
        raise _data_error(f"model expects {m.arity} features but the data has {data.n_features}")
    return m, source


def _spec(args) -> PerturbationSpec:
    try:
        return PerturbationSpec(args.perturbation, args.num_permutations, args.erasure_value, args.seed)
    except ValueError as exc:
        raise _config_error(str(exc)) from None


def _check_q(q: float) -> float:
    if not 0.0 < q < 1.0:
        raise _config_error(f"--q must lie in (0, 1), got {q}")
    return q


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise _config_error(f"cannot write {path}: {exc}") from None


def _emit(args, text: str) -> None:
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


# --- subcommands -----------------------------------------------------------


def _summary_table(summary: dict) -> str:
    labels = {
        "total_nodes": "total nodes",
        "tested_nodes": "tested nodes",
        "unadjusted_p_below_0.05": "nodes with unadjusted p < 0.05",
        "nodes_rejected": "nodes rejected",
        "outer_nodes": "outer nodes",
        "feature_groups_among_outer_nodes": "feature groups among outer nodes",
    }
    width = max(len(v) for v in labels.values())
    return "".join(f"{labels[k].ljust(width)}  {summary[k]}\n" for k in labels)


def cmd_analyze(args) -> int:
    q = _check_q(args.q)
    spec = _spec(args)
    h = _load_hierarchy(args.hierarchy)
    data = _load_data(args)
    try:
        h.check_arity(data.n_features)
    except hierarchy.HierarchyError as exc:
        raise _data_error(str(exc)) from None
    m, source = _make_model(args, data)
    try:
        config = importance.AnalysisConfig(q=q, spec=spec, loss=args.loss, lazy=args.lazy, workers=args.workers)
        report = importance.analyze(m, data, h, config)
    finally:
        if hasattr(m, "close"):
            m.close()
    report.config["model"] = source
    report.config["data"] = str(args.data)
    report.config["hierarchy"] = str(args.hierarchy)
    _emit(args, report.dumps())
    if args.dot:
        _write(args.dot, importance.report_to_dot(report))
    (sys.stderr if not args.out else sys.stdout).write(_summary_table(report.summary()))
    return EXIT_OK


def cmd_interact(args) -> int:
    q = _check_q(args.q)
    spec = _spec(args)
    h = _load_hierarchy(args.hierarchy)
    if args.nodes:
        nodes = [n.strip() for n in args.nodes.split(",") if n.strip()]
        origin = {"nodes": nodes}
    elif args.report:
        try:
            doc = importance.read_report_nodes(_read_text(args.report, "report"))
        except ValueError as exc:
            raise _config_error(f"invalid report {args.report}: {exc}") from None
        nodes = list(doc.get("outer_nodes", []))
        origin = {"report": str(args.report)}
    else:
        raise _config_error("pass --report REPORT or --nodes a,b,...")
    unknown = [n for n in nodes if n not in h]
    if unknown:
        raise _config_error(f"unknown hierarchy node(s): {', '.join(unknown)}")
    data = _load_data(args)
    m, source = _make_model(args, data)
    try:
        cands = interactions.candidate_pairs(nodes, h)
        results = interactions.analyze_interactions(m, data, cands, q, spec, args.loss_variant, args.workers)
    finally:
        if hasattr(m, "close"):
            m.close()
    config = {
        "q": q,
        "perturbation": spec.to_dict(),
        "tail": "two-sided",
        "statistic": "loss" if args.loss_variant else "g",
        "loss": args.loss_variant,
        "model": source,
        "data": str(args.data),
        "hierarchy": str(args.hierarchy),
        "candidates": len(cands),
        **origin,
    }
    _emit(args, interactions.interaction_report(results, config))
    rejected = sum(r.rejected for r in results)
    (sys.stderr if not args.out else sys.stdout).write(f"candidates tested  {len(results)}\ninteractions rejected  {rejected}\n")
    return EXIT_OK


def _parse_grid(text: str, vary: str) -> list:
    try:
        values = [int(v) if vary == "m" else float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise _config_error(f"invalid --grid value list: {text!r}") from None
    if not values:
        raise _config_error("--grid is empty")
    if vary == "m" and min(values) < 1:
        raise _config_error("--grid values for m must be >= 1")
    if vary == "sigma" and min(values) < 0:
        raise _config_error("--grid values for sigma must be >= 0")
    return values


def cmd_synth(args) -> int:
    grid = _parse_grid(args.grid, args.vary)
    if args.replicates < 1:
        raise _config_error("--replicates must be >= 1")
    if not 0.0 < args.bernoulli_p < 1.0:
        raise _config_error("--bernoulli-p must lie in (0, 1)")
    base = synth.ExperimentConfig(
        n_features=args.n_features,
        n_linear=args.n_linear,
        n_interactions=args.n_interactions,
        m=args.m,
        sigma=args.sigma,
        bernoulli_p=args.bernoulli_p,
        q=_check_q(args.q),
        seed=args.seed,
    )
    try:
        synth.generate_ground_truth(base.n_features, base.n_linear, base.n_interactions, 0)
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    table = synth.run_experiment(args.vary, grid, args.replicates, base, processes=args.workers)
    _emit(args, table.dumps())
    if args.text:
        _write(args.text, table.format_text())
    (sys.stderr if not args.out else sys.stdout).write(table.format_text())
    return EXIT_OK


def _read_order(path, names: list[str]) -> list[int]:
    lines = [ln.strip() for ln in _read_text(path, "order").splitlines() if ln.strip()]
    index = {n: j for j, n in enumerate(names)}
    order = []
    for ln in lines:
        if ln in index:
            order.append(index[ln])
        elif ln.isdigit():
            order.append(int(ln))
        else:
            raise _config_error(f"order file names unknown column {ln!r}")
    return order


def cmd_cluster(args) -> int:
    _require_file(args.data, "data")
    try:
        with open(args.data, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        names = [n for n in rows[0] if n != model.TARGET_COLUMN]
        keep = [j for j, n in enumerate(rows[0]) if n != model.TARGET_COLUMN]
        X = np.array([[float(r[j]) for j in keep] for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise _data_error(f"invalid data matrix {args.data}: {exc}") from None
    order = _read_order(args.order, names) if args.order else None
    try:
        h = cluster.constrained_cluster(X, order, names)
    except ValueError as exc:
        raise _data_error(str(exc)) from None
    fmt = args.format or ("csv" if args.out and str(args.out).lower().endswith(".csv") else "json")
    _emit(args, hierarchy.export_hierarchy(h, fmt))
    if args.threshold is not None:
        flat = cluster.flat_clusters(h, args.threshold)
        sys.stderr.write(f"{len(flat)} clusters within {args.threshold:g} bits\n")
    return EXIT_OK


def cmd_export_dot(args) -> int:
    try:
        doc = importance.read_report_nodes(_read_text(args.report, "report"))
        text = importance.dot_from_entries(doc["nodes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise _config_error(f"invalid report {args.report}: {exc}") from None
    _emit(args, text)
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    if not 0.0 < args.bernoulli_p < 1.0:
        raise _config_error("--bernoulli-p must lie in (0, 1)")
    try:
        gt = synth.generate_ground_truth(args.n_features, args.n_linear, args.n_interactions, args.seed)
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    data = synth.generate_instances(gt, args.m, args.bernoulli_p, args.seed + 1)
    h = synth.build_random_hierarchy(args.n_features, args.seed + 2)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    _write(outdir / "ground_truth.json", gt.dumps())
    model.write_dataset(data, outdir / "data.csv")
    _write(outdir / "hierarchy.json", hierarchy.export_hierarchy(h, "json"))
    sys.stdout.write(f"wrote ground_truth.json, data.csv, hierarchy.json to {outdir}\n")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--adapter", help="command launching an external model adapter")
    g.add_argument("--ground-truth", help="ground-truth JSON for the built-in synthetic model")
    g.add_argument("--sigma", type=float, default=0.0, help="synthetic model deviation scale (default 0)")
    g.add_argument("--noise-seed", type=int, default=0, help="synthetic model deviation seed")


def _add_data_args(p):
    p.add_argument("--data", required=True, help="CSV with header; targets in a __target__ column")
    p.add_argument("--targets", help="one-column CSV of targets when the data has none")
    p.add_argument("--hierarchy", required=True, help="hierarchy document (JSON or CSV)")


def _add_perturbation_args(p, default_kind="permutation"):
    g = p.add_argument_group("perturbation")
    g.add_argument("--perturbation", choices=KINDS, default=default_kind)
    g.add_argument("--num-permutations", type=int, default=DEFAULT_PERMUTATIONS)
    g.add_argument("--erasure-value", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierfi", description="Hierarchical feature importance by perturbation testing.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="test hierarchy nodes with hierarchical FDR control")
    _add_data_args(p)
    _add_model_args(p)
    _add_perturbation_args(p)
    p.add_argument("--q", type=float, default=0.05)
    p.add_argument("--loss", choices=model.LOSSES, help="default: cross-entropy for logistic models, else squared error")
    p.add_argument("--lazy", action="store_true", help="only test children of rejected nodes")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--dot", help="also write a Graphviz rendering here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("interact", help="test pairwise interactions between nodes")
    _add_data_args(p)
    _add_model_args(p)
    _add_perturbation_args(p)
    p.add_argument("--report", help="importance report whose outer nodes are paired")
    p.add_argument("--nodes", help="comma-separated node ids to pair instead")
    p.add_argument("--q", type=float, default=0.05)
    p.add_argument("--loss-variant", choices=model.LOSSES, help="use the experimental loss-based statistic")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_interact)

    p = sub.add_parser("synth", help="FDR and power on synthetic ground truth")
    p.add_argument("--vary", choices=synth.VARY, required=True)
    p.add_argument("--grid", required=True, help="comma-separated values of the varied parameter")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--m", type=int, default=10_000)
    p.add_argument("--bernoulli-p", type=float, default=0.5)
    p.add_argument("--n-features", type=int, default=500)
    p.add_argument("--n-linear", type=int, default=50)
    p.add_argument("--n-interactions", type=int, default=50)
    p.add_argument("--q", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=1, help="replicate processes")
    p.add_argument("--out", help="JSON table path (default stdout)")
    p.add_argument("--text", help="also write the aligned-text table here")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", help="build a hierarchy by adjacency-constrained clustering")
    p.add_argument("--data", required=True, help="binary CSV matrix with header")
    p.add_argument("--order", help="file listing columns (names or indices) in linear order")
    p.add_argument("--threshold", type=float, help="report flat clusters within this many bits")
    p.add_argument("--format", choices=("json", "csv"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("export-dot", help="render a saved importance report as Graphviz")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("make-synthetic", help="write a synthetic ground truth, dataset and hierarchy")
    p.add_argument("--outdir", required=True)
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--n-features", type=int, default=500)
    p.add_argument("--n-linear", type=int, default=50)
    p.add_argument("--n-interactions", type=int, default=50)
    p.add_argument("--bernoulli-p", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"hierfi: error: {exc}\n")
        return exc.code
    except model.ProtocolError as exc:
        sys.stderr.write(f"hierfi: adapter protocol error: {exc}\n")
        return EXIT_PROTOCOL
    except model.CapabilityError as exc:
        sys.stderr.write(f"hierfi: error: {exc}\n")
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        sys.stderr.write(f"hierfi: internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
