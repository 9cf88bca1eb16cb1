"""Feature-group trees over base-feature columns.

A hierarchy document is a list of node objects::

    [{"name": "root"},
     {"name": "left", "parent": "root", "features": [0]},
     {"name": "right", "parent": "root", "features": [1]}]

Leaves carry exactly one zero-based column index; internal nodes get the
union of their descendants' columns. The same content can be written as a
CSV with columns ``name,parent,features`` where ``features`` is a
semicolon-joined index list.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

logger = logging.getLogger(__name__)


class HierarchyError(ValueError):
    """Structural problem in a hierarchy document."""

    def __init__(self, kind: str, node: str | None, message: str):
        self.kind = kind
        self.node = node
        where = f" (node {node!r})" if node is not None else ""
        super().__init__(f"{kind}{where}: {message}")


@dataclass(frozen=True)
class HierarchyNode:
    id: str
    name: str
    parent_id: str | None
    feature_indices: frozenset[int]
    children: tuple[str, ...] = ()
    # merge distance for trees built by clustering
    height: float | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


class FeatureHierarchy:
    """Immutable, validated tree of feature groups."""

    def __init__(self, nodes: Iterable[HierarchyNode], root_id: str):
        self._nodes: dict[str, HierarchyNode] = {n.id: n for n in nodes}
        self.root_id = root_id
        self._by_name = {n.name: n.id for n in self._nodes.values()}
        self._depth: dict[str, int] = {}
        for node_id in self.preorder():
            parent = self._nodes[node_id].parent_id
            self._depth[node_id] = 0 if parent is None else self._depth[parent] + 1
        self.check_unions()

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._nodes

    def __getitem__(self, node_id: str) -> HierarchyNode:
        return self._nodes[node_id]

    def __iter__(self) -> Iterator[HierarchyNode]:
        return iter(self._nodes.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureHierarchy):
            return NotImplemented
        return self.root_id == other.root_id and self._nodes == other._nodes

    @property
    def root(self) -> HierarchyNode:
        return self._nodes[self.root_id]

    @property
    def node_ids(self) -> list[str]:
        return list(self._nodes)

    def by_name(self, name: str) -> HierarchyNode:
        return self._nodes[self._by_name[name]]

    def children(self, node_id: str) -> tuple[str, ...]:
        return self._nodes[node_id].children

    def parent(self, node_id: str) -> str | None:
        return self._nodes[node_id].parent_id

    def depth(self, node_id: str) -> int:
        return self._depth[node_id]

    def features(self, node_id: str) -> frozenset[int]:
        return self._nodes[node_id].feature_indices

    def leaves(self) -> list[str]:
        return [i for i in self.preorder() if self._nodes[i].is_leaf]

    def leaf_for_feature(self) -> dict[int, str]:
        return {next(iter(self._nodes[i].feature_indices)): i for i in self.leaves()}

    def preorder(self, start: str | None = None) -> list[str]:
        out = []
        stack = [self.root_id if start is None else start]
        while stack:
            node_id = stack.pop()
            out.append(node_id)
            stack.extend(reversed(self._nodes[node_id].children))
        return out

    def descendants(self, node_id: str) -> list[str]:
        return self.preorder(node_id)[1:]

    def ancestors(self, node_id: str) -> list[str]:
        out = []
        parent = self._nodes[node_id].parent_id
        while parent is not None:
            out.append(parent)
            parent = self._nodes[parent].parent_id
        return out

    @property
    def all_features(self) -> frozenset[int]:
        return self.root.feature_indices

    def check_unions(self) -> None:
        for node in self._nodes.values():
            if node.is_leaf:
                continue
            union = frozenset().union(*(self._nodes[c].feature_indices for c in node.children))
            if union != node.feature_indices:
                raise HierarchyError("feature-union", node.name, "feature set differs from union of children")

    def check_arity(self, n_features: int) -> None:
        """Ensure leaves index real columns; warn about untested columns."""
        bad = [i for i in self.all_features if i >= n_features]
        if bad:
            leaf = self.leaf_for_feature()[max(bad)]
            raise HierarchyError(
                "feature-range", self._nodes[leaf].name, f"column {max(bad)} outside data with {n_features} columns"
            )
        missing = n_features - len(self.all_features)
        if missing:
            logger.warning("%d data column(s) are not referenced by any hierarchy leaf", missing)

    def to_records(self) -> list[dict]:
        records = []
        for node_id in self.preorder():
            node = self._nodes[node_id]
            rec: dict = {"name": node.name}
            if node.id != node.name:
                rec["id"] = node.id
            if node.parent_id is not None:
                rec["parent"] = self._nodes[node.parent_id].name
            if node.is_leaf:
                rec["features"] = sorted(node.feature_indices)
            if node.height is not None:
                rec["height"] = node.height
            records.append(rec)
        return records


def _coerce_index(value, name: str) -> int:
    try:
        idx = int(value)
    except (TypeError, ValueError):
        raise HierarchyError("bad-feature", name, f"feature index {value!r} is not an integer") from None
    if idx != value and str(idx) != str(value).strip():
        raise HierarchyError("bad-feature", name, f"feature index {value!r} is not an integer")
    if idx < 0:
        raise HierarchyError("bad-feature", name, f"negative feature index {idx}")
    return idx


def from_records(records: Sequence[Mapping]) -> FeatureHierarchy:
    """Validate node records and build a hierarchy."""
    if not records:
        raise HierarchyError("empty", None, "hierarchy has no nodes")
    names: list[str] = []
    ids: dict[str, str] = {}
    parents: dict[str, str | None] = {}
    leaf_features: dict[str, list[int]] = {}
    heights: dict[str, float | None] = {}
    for rec in records:
        if "name" not in rec or rec["name"] in (None, ""):
            raise HierarchyError("missing-name", None, f"node record without a name: {dict(rec)!r}")
        name = str(rec["name"])
        if name in ids:
            raise HierarchyError("duplicate-name", name, "node names must be unique")
        names.append(name)
        ids[name] = str(rec["id"]) if rec.get("id") not in (None, "") else name
        parent = rec.get("parent")
        parents[name] = None if parent in (None, "") else str(parent)
        feats = rec.get("features")
        if feats not in (None, "", []):
            if isinstance(feats, (str, int)):
                feats = [feats]
            leaf_features[name] = [_coerce_index(f, name) for f in feats]
        height = rec.get("height")
        heights[name] = None if height in (None, "") else float(height)

    if len(set(ids.values())) != len(ids):
        seen: set[str] = set()
        for name in names:
            if ids[name] in seen:
                raise HierarchyError("duplicate-id", name, f"id {ids[name]!r} used twice")
            seen.add(ids[name])

    for name in names:
        parent = parents[name]
        if parent is not None and parent not in ids:
            raise HierarchyError("unknown-parent", name, f"parent {parent!r} does not exist")

    for name in names:
        seen = {name}
        parent = parents[name]
        while parent is not None:
            if parent in seen:
                raise HierarchyError("cycle", name, "parent chain loops back on itself")
            seen.add(parent)
            parent = parents[parent]

    roots = [n for n in names if parents[n] is None]
    if len(roots) != 1:
        raise HierarchyError("root", roots[1] if len(roots) > 1 else None, f"expected exactly one root, found {len(roots)}")

    children: dict[str, list[str]] = {n: [] for n in names}
    for name in names:
        if parents[name] is not None:
            children[parents[name]].append(name)

    owner: dict[int, str] = {}
    for name in names:
        if children[name]:
            continue
        feats = leaf_features.get(name)
        if not feats or len(feats) != 1:
            raise HierarchyError("leaf-features", name, "a leaf must carry exactly one feature index")
        idx = feats[0]
        if idx in owner:
            raise HierarchyError("duplicate-feature", name, f"feature {idx} already belongs to leaf {owner[idx]!r}")
        owner[idx] = name

    feature_sets: dict[str, frozenset[int]] = {}

    def collect(name: str) -> frozenset[int]:
        stack = [(name, False)]
        while stack:
            current, expanded = stack.pop()
            if current in feature_sets:
                continue
            if not children[current]:
                feature_sets[current] = frozenset(leaf_features[current])
            elif expanded:
                feature_sets[current] = frozenset().union(*(feature_sets[c] for c in children[current]))
            else:
                stack.append((current, True))
                stack.extend((c, False) for c in children[current])
        return feature_sets[name]

    collect(roots[0])
    for name in names:
        if children[name] and name in leaf_features and frozenset(leaf_features[name]) != feature_sets[name]:
            raise HierarchyError("feature-union", name, "internal node features differ from union of its leaves")

    nodes = [
        HierarchyNode(
            id=ids[name],
            name=name,
            parent_id=None if parents[name] is None else ids[parents[name]],
            feature_indices=feature_sets[name],
            children=tuple(ids[c] for c in children[name]),
            height=heights[name],
        )
        for name in names
    ]
    return FeatureHierarchy(nodes, ids[roots[0]])


def load_hierarchy(document: str, fmt: str | None = None) -> FeatureHierarchy:
    """Parse a JSON or CSV hierarchy document.

    ``fmt`` is ``"json"`` or ``"csv"``; when omitted it is sniffed from the
    first non-blank character.
    """
    if fmt is None:
        fmt = "json" if document.lstrip()[:1] in ("[", "{") else "csv"
    if fmt == "json":
        data = json.loads(document)
        if isinstance(data, dict):
            data = data.get("nodes", [])
        return from_records(data)
    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(document))
        if reader.fieldnames is None or "name" not in reader.fieldnames:
            raise HierarchyError("format", None, "CSV hierarchy needs a header with at least 'name'")
        records = []
        for row in reader:
            rec = dict(row)
            feats = (rec.get("features") or "").strip()
            rec["features"] = [f for f in feats.split(";") if f.strip()] if feats else None
            records.append(rec)
        return from_records(records)
    raise ValueError(f"unknown hierarchy format {fmt!r}")


def read_hierarchy(path) -> FeatureHierarchy:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    fmt = "csv" if str(path).lower().endswith(".csv") else None
    return load_hierarchy(text, fmt)


def export_hierarchy(h: FeatureHierarchy, fmt: str = "json") -> str:
    records = h.to_records()
    if fmt == "json":
        return json.dumps(records, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        has_id = any("id" in r for r in records)
        has_height = any("height" in r for r in records)
        fields = ["name", "parent", "features"] + (["id"] if has_id else []) + (["height"] if has_height else [])
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            row = dict(rec)
            row["features"] = ";".join(str(i) for i in rec.get("features", []))
            writer.writerow(row)
        return buf.getvalue()
    raise ValueError(f"unknown hierarchy format {fmt!r}")


@dataclass
class RejectedSubtree:
    """Nodes rejected by hierarchical FDR control, with their test results."""

    results: dict = field(default_factory=dict)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.results

    def __len__(self) -> int:
        return len(self.results)

    def __iter__(self):
        return iter(self.results)

    @property
    def ids(self) -> set[str]:
        return set(self.results)

    def is_parent_closed(self, h: FeatureHierarchy) -> bool:
        return all(h.parent(i) is None or h.parent(i) in self.results for i in self.results)

    def outer_flags(self, h: FeatureHierarchy) -> dict[str, bool]:
        return {i: not any(c in self.results for c in h.children(i)) for i in self.results}


def outer_nodes(h: FeatureHierarchy, rejected: RejectedSubtree) -> list[str]:
    """Rejected nodes with no rejected children, largest effect first."""
    if not rejected.is_parent_closed(h):
        raise ValueError("rejected set is not closed under parents")
    flags = rejected.outer_flags(h)
    order = {node_id: k for k, node_id in enumerate(h.preorder())}
    outer = [i for i, is_outer in flags.items() if is_outer]

    def effect(node_id: str) -> float:
        res = rejected.results[node_id]
        value = getattr(res, "effect_size", None)
        return float("-inf") if value is None else value

    return sorted(outer, key=lambda i: (-effect(i), order[i]))
