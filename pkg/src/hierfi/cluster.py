"""Adjacency-constrained agglomerative clustering of binary feature columns.

Features sit on a line (for example genome position). Only neighbouring
clusters may merge; among neighbours the pair with the smallest
complete-linkage Hamming distance merges first, the leftmost pair on ties.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hierarchy import FeatureHierarchy, HierarchyNode


@dataclass(frozen=True)
class LinkageStep:
    left: str
    right: str
    distance: int
    new: str


def hamming_matrix(X) -> np.ndarray:
    """Pairwise Hamming distances between the columns of a binary matrix."""
    X = _binary(X)
    ones = X.astype(np.int64)
    zeros = 1 - ones
    return ones.T @ zeros + zeros.T @ ones


def _binary(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("expected a 2-d data matrix")
    if not np.all((X == 0) | (X == 1)):
        raise ValueError("constrained clustering needs a binary (0/1) matrix")
    return X


def _check_order(order, n: int) -> list[int]:
    if order is None:
        return list(range(n))
    order = [int(j) for j in order]
    if sorted(order) != list(range(n)):
        raise ValueError(f"order must be a permutation of the {n} columns")
    return order


def linkage_steps(X, order: Sequence[int] | None = None, names: Sequence[str] | None = None) -> list[LinkageStep]:
    """The sequence of merges, n - 1 of them for n columns.

    Leaves are identified by ``names`` (column index ``j`` defaults to
    ``x<j>``); the cluster created by merge ``k`` is ``cluster<k>``.
    """
    X = _binary(X)
    n = X.shape[1]
    order = _check_order(order, n)
    labels = list(names) if names is not None else [f"x{j}" for j in range(n)]
    if len(labels) != n:
        raise ValueError("need one name per column")

    # cluster distances; rows/cols follow the current left-to-right line
    D = hamming_matrix(X)[np.ix_(order, order)]
    ids = [labels[j] for j in order]
    steps = []
    for k in range(1, n):
        adjacent = np.diagonal(D, offset=1)
        i = int(np.argmin(adjacent))  # first minimum, so ties go left
        new_id = f"cluster{k}"
        steps.append(LinkageStep(ids[i], ids[i + 1], int(adjacent[i]), new_id))
        # complete linkage: distance to the merged cluster is the larger one
        merged = np.maximum(D[i], D[i + 1])
        D[i, :] = merged
        D[:, i] = merged
        D[i, i] = 0
        D = np.delete(np.delete(D, i + 1, axis=0), i + 1, axis=1)
        ids[i : i + 2] = [new_id]
    return steps


def constrained_cluster(X, order: Sequence[int] | None = None, names: Sequence[str] | None = None) -> FeatureHierarchy:
    """Binary merge tree over the columns of ``X`` as a feature hierarchy.

    Each internal node records its merge distance as ``height``. The
    in-order leaf sequence equals ``order``.
    """
    X = _binary(X)
    n = X.shape[1]
    if n == 0:
        raise ValueError("no columns to cluster")
    order = _check_order(order, n)
    labels = list(names) if names is not None else [f"x{j}" for j in range(n)]
    steps = linkage_steps(X, order, labels)
    parent: dict[str, str] = {}
    for step in steps:
        parent[step.left] = step.new
        parent[step.right] = step.new
    nodes = [HierarchyNode(labels[j], labels[j], parent.get(labels[j]), frozenset({j})) for j in order]
    members = {labels[j]: frozenset({j}) for j in order}
    for step in steps:
        members[step.new] = members[step.left] | members[step.right]
        nodes.append(
            HierarchyNode(
                step.new,
                step.new,
                parent.get(step.new),
                members[step.new],
                (step.left, step.right),
                float(step.distance),
            )
        )
    root = steps[-1].new if steps else labels[order[0]]
    return FeatureHierarchy(nodes, root)


def flat_clusters(hierarchy: FeatureHierarchy, threshold: float) -> list[str]:
    """Maximal nodes whose merge distance is at most ``threshold``.

    Every pair of features inside a returned cluster differs in at most
    ``threshold`` bits. Leaves count as height 0.
    """
    out = []
    stack = [hierarchy.root_id]
    while stack:
        node_id = stack.pop()
        node = hierarchy[node_id]
        if node.is_leaf or (node.height is not None and node.height <= threshold):
            out.append(node_id)
        else:
            stack.extend(reversed(node.children))
    return out
