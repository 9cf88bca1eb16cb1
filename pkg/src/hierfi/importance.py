"""Perturbation tests per hierarchy node and hierarchical FDR control."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import perturb
from .hierarchy import FeatureHierarchy, RejectedSubtree, outer_nodes
from .model import Dataset, apply_transfer, auroc, default_loss, evaluate_loss
from .perturb import PerturbationSpec
from .stats import Tail, TestResult, benjamini_hochberg, wilcoxon_signed_rank


@dataclass
class NodeTestRecord:
    node_id: str
    tested: bool = False
    p_value: float | None = None
    statistic: float | None = None
    n_effective: int | None = None
    # mean perturbed loss minus mean baseline loss
    effect_size: float | None = None
    mean_baseline_loss: float | None = None
    mean_perturbed_loss: float | None = None
    auroc: float | None = None


@dataclass(frozen=True)
class AnalysisConfig:
    q: float = 0.05
    spec: PerturbationSpec = field(default_factory=PerturbationSpec)
    loss: str | None = None
    lazy: bool = False
    tail: Tail = Tail.GREATER
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        object.__setattr__(self, "tail", Tail(self.tail))

    def to_dict(self, loss: str | None = None) -> dict:
        return {
            "q": self.q,
            "perturbation": self.spec.to_dict(),
            "loss": loss or self.loss,
            "mode": "lazy" if self.lazy else "eager",
            "tail": self.tail.value,
        }


def loss_differences(
    model, data: Dataset, features: Iterable[int], spec: PerturbationSpec, loss: str, stream_key=None, baseline=None
) -> tuple[np.ndarray, np.ndarray, float | None]:
    """Per-instance mean perturbed loss minus baseline loss.

    Returns ``(differences, baseline_losses, auroc_after_perturbation)``;
    the AUROC is only computed for logistic models on 0/1 targets.
    """
    if baseline is None:
        baseline = evaluate_loss(loss, data.y, model.predict(data.X))
    total = np.zeros(data.m)
    binary_task = model.transfer == "logistic" and np.all((data.y == 0) | (data.y == 1))
    aurocs = []
    batch = perturb.apply(data.X, features, spec, stream_key)
    for Xp in batch:
        pred = model.predict(Xp)
        total += evaluate_loss(loss, data.y, pred)
        if binary_task:
            aurocs.append(auroc(data.y, pred))
    diffs = total / len(batch) - baseline
    return diffs, baseline, (float(np.mean(aurocs)) if aurocs else None)


def test_node(
    model,
    data: Dataset,
    features: Iterable[int],
    spec: PerturbationSpec,
    loss: str,
    node_id: str = "",
    tail: Tail = Tail.GREATER,
    baseline=None,
) -> NodeTestRecord:
    """Does perturbing ``features`` raise the model's loss?"""
    key = node_id if node_id else None
    diffs, base, auc = loss_differences(model, data, features, spec, loss, key, baseline)
    res = wilcoxon_signed_rank(diffs, tail)
    mean_base = float(base.mean())
    return NodeTestRecord(
        node_id=node_id,
        tested=True,
        p_value=res.p_value,
        statistic=res.statistic,
        n_effective=res.n_effective,
        effect_size=float(diffs.mean()),
        mean_baseline_loss=mean_base,
        mean_perturbed_loss=mean_base + float(diffs.mean()),
        auroc=auc,
    )


test_node.__test__ = False


def _p(result) -> float:
    if isinstance(result, (int, float)):
        return float(result)
    p = getattr(result, "p_value", None)
    if p is None:
        raise RuntimeError(f"node result {result!r} carries no p-value")
    return float(p)


PValueSource = Mapping[str, object] | Callable[[list[str]], Mapping[str, object]]


def hierarchical_fdr(h: FeatureHierarchy, pvalues: PValueSource, q: float) -> RejectedSubtree:
    """Top-down BH over sibling families under rejected parents.

    The root is rejected iff its p-value is at most ``q``. Children of every
    rejected node form one family tested by Benjamini-Hochberg at level
    ``q``; only rejected children are descended into.

    ``pvalues`` is either a mapping from node id to a p-value (or an object
    with ``p_value``) or a callable that receives a list of node ids and
    returns such a mapping. The callable is only asked about the root and
    about children of rejected nodes, one tree level at a time.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if callable(pvalues):
        fetch = pvalues
    else:
        def fetch(ids):
            missing = [i for i in ids if i not in pvalues]
            if missing:
                raise RuntimeError(f"no p-value for visited node(s) {missing[:5]}")
            return {i: pvalues[i] for i in ids}

    root = h.root_id
    root_result = fetch([root])[root]
    rejected = RejectedSubtree()
    if _p(root_result) > q:
        return rejected
    rejected.results[root] = root_result
    frontier = [root]
    while frontier:
        families = [(node, h.children(node)) for node in frontier if h.children(node)]
        wanted = [c for _, kids in families for c in kids]
        results = fetch(wanted) if wanted else {}
        frontier = []
        for _, kids in families:
            ps = [_p(results[c]) for c in kids]
            for idx in sorted(benjamini_hochberg(ps, q)):
                child = kids[idx]
                rejected.results[child] = results[child]
                frontier.append(child)
    return rejected


@dataclass
class ImportanceReport:
    hierarchy: FeatureHierarchy
    records: dict[str, NodeTestRecord]
    rejected: RejectedSubtree
    outer: list[str]
    config: dict

    def summary(self) -> dict:
        tested = [r for r in self.records.values() if r.tested]
        return {
            "total_nodes": len(self.hierarchy),
            "tested_nodes": len(tested),
            "unadjusted_p_below_0.05": sum(1 for r in tested if r.p_value < 0.05),
            "nodes_rejected": len(self.rejected),
            "outer_nodes": len(self.outer),
            "feature_groups_among_outer_nodes": sum(1 for i in self.outer if not self.hierarchy[i].is_leaf),
        }

    def node_entries(self) -> list[dict]:
        h = self.hierarchy
        outer = set(self.outer)
        entries = []
        for node_id in h.preorder():
            node = h[node_id]
            rec = self.records[node_id]
            entries.append(
                {
                    "id": node_id,
                    "name": node.name,
                    "parent": node.parent_id,
                    "leaf": node.is_leaf,
                    "n_features": len(node.feature_indices),
                    "tested": rec.tested,
                    "p_value": rec.p_value,
                    "effect_size": rec.effect_size,
                    "mean_baseline_loss": rec.mean_baseline_loss,
                    "mean_perturbed_loss": rec.mean_perturbed_loss,
                    "auroc": rec.auroc,
                    "rejected": node_id in self.rejected,
                    "outer": node_id in outer,
                }
            )
        return entries

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "summary": self.summary(),
            "outer_nodes": list(self.outer),
            "nodes": self.node_entries(),
        }

    def dumps(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2) + "\n"


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def analyze(model, data: Dataset, hierarchy: FeatureHierarchy, config: AnalysisConfig | None = None) -> ImportanceReport:
    """Test hierarchy nodes by perturbation and apply hierarchical FDR control.

    Eager mode tests every node first; lazy mode only tests a node once its
    parent has been rejected. Both give the same rejected set because each
    node's perturbation stream is keyed by its id.
    """
    config = config or AnalysisConfig()
    hierarchy.check_arity(data.n_features)
    loss = config.loss or default_loss(model)
    baseline = evaluate_loss(loss, data.y, model.predict(data.X))
    records: dict[str, NodeTestRecord] = {i: NodeTestRecord(i) for i in hierarchy.node_ids}

    def run(ids: list[str]) -> dict[str, NodeTestRecord]:
        todo = [i for i in ids if not records[i].tested]

        def one(node_id):
            return test_node(
                model, data, hierarchy.features(node_id), config.spec, loss, node_id, config.tail, baseline
            )

        if config.workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                done = list(pool.map(one, todo))
        else:
            done = [one(i) for i in todo]
        for rec in done:
            records[rec.node_id] = rec
        return {i: records[i] for i in ids}

    if config.lazy:
        rejected = hierarchical_fdr(hierarchy, run, config.q)
    else:
        run(hierarchy.preorder())
        rejected = hierarchical_fdr(hierarchy, records, config.q)
    cfg = config.to_dict(loss)
    cfg["transfer"] = model.transfer
    cfg["m"] = data.m
    cfg["n_features"] = data.n_features
    return ImportanceReport(hierarchy, records, rejected, outer_nodes(hierarchy, rejected), cfg)


def read_report_nodes(text: str) -> dict:
    """Parse a serialized report back into plain data (config, nodes, outer)."""
    doc = json.loads(text)
    if not isinstance(doc, dict) or "nodes" not in doc:
        raise ValueError("not an importance report document")
    return doc


def _dot_quote(text: str) -> str:
    return '"' + str(text).replace("\\", "\\\\").replace('"', '\\"') + '"'


# -log10(p) is capped here so p = 0 still gets a finite intensity
_MAX_LOG10 = 300.0


def report_to_dot(report: ImportanceReport) -> str:
    """Graphviz rendering of the nodes the FDR procedure visited."""
    return dot_from_entries(report.node_entries())


def dot_from_entries(entries: list[dict]) -> str:
    """Graphviz rendering from report node entries (preorder, as serialized).

    Groups are ovals and base features boxes. Rejected nodes are filled with
    saturation proportional to -log10(p), scaled to the strongest rejection;
    visited nodes that were not rejected are white. A triangle stands in for
    the untested subtree below a visited, non-rejected group.
    """
    by_id = {e["id"]: e for e in entries}
    kids: dict[str, list[str]] = {e["id"]: [] for e in entries}
    for e in entries:
        if e["parent"] is not None:
            kids[e["parent"]].append(e["id"])
    rejected = {e["id"] for e in entries if e["rejected"]}

    def visited(e):
        return e["parent"] is None or e["parent"] in rejected

    def subtree_size(node_id):
        return sum(1 + subtree_size(c) for c in kids[node_id])

    def strength(e):
        p = e["p_value"]
        return _MAX_LOG10 if p <= 0 else min(_MAX_LOG10, -math.log10(p))

    top = max((strength(by_id[i]) for i in rejected), default=0.0) or 1.0
    lines = ["digraph importance {", "  node [style=filled, fontname=Helvetica];"]
    edges = []
    for e in entries:
        if not visited(e):
            continue
        node_id = e["id"]
        shape = "box" if e["leaf"] else "ellipse"
        fill = f"0.600 {0.1 + 0.9 * strength(e) / top:.3f} 1.000" if node_id in rejected else "white"
        p_text = "untested" if e["p_value"] is None else f"p={e['p_value']:.3g}"
        # graphviz line break goes in after quoting so it is not escaped
        label = _dot_quote(e["name"])[:-1] + "\\n" + p_text + '"'
        lines.append(f'  {_dot_quote(node_id)} [label={label}, shape={shape}, fillcolor="{fill}"];')
        if e["parent"] is not None:
            edges.append(f"  {_dot_quote(e['parent'])} -> {_dot_quote(node_id)};")
        if node_id not in rejected and not e["leaf"]:
            stub = _dot_quote(f"{node_id}/untested")
            lines.append(f'  {stub} [label="{subtree_size(node_id)} untested", shape=triangle, fillcolor="white"];')
            edges.append(f"  {_dot_quote(node_id)} -> {stub};")
    return "\n".join(lines + edges + ["}"]) + "\n"
