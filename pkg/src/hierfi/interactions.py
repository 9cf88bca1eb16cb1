"""Pairwise non-additivity tests between hierarchy nodes."""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import perturb
from .hierarchy import FeatureHierarchy
from .model import CapabilityError, Dataset, apply_transfer, evaluate_loss
from .perturb import PerturbationSpec
from .stats import Tail, benjamini_hochberg, wilcoxon_signed_rank

# cache single-node g-values only while P * m stays below this many floats
_CACHE_LIMIT = 2_000_000
# multiples of machine epsilon treated as cancellation residue
_ROUNDING_SLACK = 8 * np.finfo(float).eps


@dataclass(frozen=True)
class InteractionCandidate:
    a: str
    b: str
    features_a: frozenset[int]
    features_b: frozenset[int]

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("an interaction needs two distinct nodes")
        if self.features_a & self.features_b:
            raise ValueError(f"nodes {self.a!r} and {self.b!r} share features")

    @property
    def key(self) -> tuple[str, str]:
        return tuple(sorted((self.a, self.b)))

    def swapped(self) -> "InteractionCandidate":
        return InteractionCandidate(self.b, self.a, self.features_b, self.features_a)


@dataclass
class InteractionResult:
    candidate: InteractionCandidate
    p_value: float
    nonadditivity: float
    n_effective: int = 0
    rejected: bool = False
    experimental: bool = False

    def to_dict(self) -> dict:
        out = {
            "node_a": self.candidate.a,
            "node_b": self.candidate.b,
            "p": self.p_value,
            "nonadditivity": self.nonadditivity,
            "rejected": self.rejected,
        }
        if self.experimental:
            out["experimental"] = True
        return out


def candidate_pairs(nodes: list[str], hierarchy: FeatureHierarchy) -> list[InteractionCandidate]:
    """All unordered pairs of ``nodes`` whose feature sets are disjoint."""
    for node in nodes:
        if node not in hierarchy:
            raise KeyError(f"unknown node {node!r}")
    seen = list(dict.fromkeys(nodes))
    out = []
    for a, b in itertools.combinations(seen, 2):
        fa, fb = hierarchy.features(a), hierarchy.features(b)
        if fa & fb:
            continue
        out.append(InteractionCandidate(a, b, fa, fb))
    return out


def _g(model, X) -> np.ndarray:
    if not model.supports_g:
        raise CapabilityError("interaction tests need g(x): the model is not identity-transfer and exposes no g")
    return model.g(X)


class _SingleCache:
    """Per-node g-values under single perturbation, one row per replicate."""

    def __init__(self, model, data: Dataset, spec: PerturbationSpec, enabled: bool):
        self.model = model
        self.data = data
        self.spec = spec
        self.enabled = enabled and spec.replicates * data.m <= _CACHE_LIMIT
        self._store: dict[str, np.ndarray] = {}
        self._base: np.ndarray | None = None

    def base(self) -> np.ndarray:
        if self._base is None:
            self._base = _g(self.model, self.data.X)
        return self._base

    def get(self, node_id: str, features) -> np.ndarray:
        if node_id in self._store:
            return self._store[node_id]
        values = np.stack([_g(self.model, Xp) for Xp in perturb.apply(self.data.X, features, self.spec, node_id)])
        if self.enabled:
            self._store[node_id] = values
        return values


def _perturbed_g(model, data, cand, spec, cache):
    cache = cache or _SingleCache(model, data, spec, enabled=False)
    base = cache.base()
    g_a = cache.get(cand.a, cand.features_a)
    g_b = cache.get(cand.b, cand.features_b)
    batch = perturb.apply_joint(data.X, cand.features_a, cand.features_b, spec, cand.a, cand.b)
    g_ab = np.stack([_g(model, Xp) for Xp in batch])
    return base, g_a, g_b, g_ab


def nonadditivity(model, data: Dataset, cand: InteractionCandidate, spec: PerturbationSpec, cache=None) -> np.ndarray:
    """Per-instance joint change minus the sum of single changes in g."""
    base, g_a, g_b, g_ab = _perturbed_g(model, data, cand, spec, cache)
    # [g(ab) - g] - [g(a) - g] - [g(b) - g], averaged over replicates;
    # g_a + g_b is summed first so swapping a and b is bitwise neutral
    delta = (g_ab - (g_a + g_b)).mean(axis=0) + base
    # values inside the rounding bound of the four-term sum count as exact zeros
    scale = (np.abs(g_ab) + np.abs(g_a) + np.abs(g_b)).mean(axis=0) + np.abs(base)
    delta[np.abs(delta) <= _ROUNDING_SLACK * scale] = 0.0
    return delta


def test_interaction(model, data: Dataset, cand: InteractionCandidate, spec: PerturbationSpec, cache=None) -> InteractionResult:
    """Two-sided signed-rank test of non-additive joint perturbation effects."""
    delta = nonadditivity(model, data, cand, spec, cache)
    res = wilcoxon_signed_rank(delta, Tail.TWO_SIDED)
    return InteractionResult(cand, res.p_value, float(delta.mean()), res.n_effective)


def loss_nonadditivity(
    model, data: Dataset, cand: InteractionCandidate, spec: PerturbationSpec, loss: str, cache=None
) -> np.ndarray:
    """Loss under joint perturbation minus loss under the additive reconstruction."""
    base, g_a, g_b, g_ab = _perturbed_g(model, data, cand, spec, cache)
    joint = evaluate_loss(loss, data.y[None, :], apply_transfer(model.transfer, g_ab))
    additive = evaluate_loss(loss, data.y[None, :], apply_transfer(model.transfer, g_a + g_b - base))
    return (joint - additive).mean(axis=0)


def test_interaction_loss(
    model, data: Dataset, cand: InteractionCandidate, spec: PerturbationSpec, loss: str, cache=None
) -> InteractionResult:
    """Loss-based variant; its null distribution is not well understood."""
    diffs = loss_nonadditivity(model, data, cand, spec, loss, cache)
    res = wilcoxon_signed_rank(diffs, Tail.TWO_SIDED)
    return InteractionResult(cand, res.p_value, float(diffs.mean()), res.n_effective, experimental=True)


test_interaction.__test__ = False
test_interaction_loss.__test__ = False


def analyze_interactions(
    model,
    data: Dataset,
    candidates: list[InteractionCandidate],
    q: float = 0.05,
    spec: PerturbationSpec | None = None,
    loss: str | None = None,
    workers: int = 1,
) -> list[InteractionResult]:
    """Test every candidate and mark Benjamini-Hochberg rejections at ``q``.

    With ``loss`` set, the loss-based variant is used. Results come back
    sorted by p-value.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if not candidates:
        return []
    spec = spec or PerturbationSpec()
    cache = _SingleCache(model, data, spec, enabled=True)
    cache.base()
    if cache.enabled:
        # fill the cache up front so worker threads only read it
        for cand in candidates:
            cache.get(cand.a, cand.features_a)
            cache.get(cand.b, cand.features_b)

    def one(cand):
        if loss is None:
            return test_interaction(model, data, cand, spec, cache)
        return test_interaction_loss(model, data, cand, spec, loss, cache)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, candidates))
    else:
        results = [one(c) for c in candidates]
    for idx in benjamini_hochberg([r.p_value for r in results], q):
        results[idx].rejected = True
    return sorted(results, key=lambda r: (r.p_value, r.candidate.key))


def interaction_report(results: list[InteractionResult], config: dict) -> str:
    doc = {"config": config, "interactions": [r.to_dict() for r in results]}
    return json.dumps(doc, indent=2) + "\n"
