"""Synthetic ground truth, data, hierarchies and discovery scoring.

Ground-truth functions have the form
``y = sum_{j in I_L} a_j x_j + sum_{(j,k) in I_I} a_jk x_j x_k`` over binary
features; a "learned" model adds a fixed per-point deviation (see
:class:`hierfi.model.SyntheticModel`).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .hierarchy import FeatureHierarchy, HierarchyNode


@dataclass(frozen=True)
class GroundTruth:
    n_features: int
    linear: dict[int, float]
    interactions: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def important_features(self) -> frozenset[int]:
        """Features in I_L or in any pair of I_I."""
        out = set(self.linear)
        for j, k in self.interactions:
            out.update((j, k))
        return frozenset(out)

    def evaluate(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        y = np.zeros(X.shape[0])
        for j, a in self.linear.items():
            y += a * X[:, j]
        for (j, k), a in self.interactions.items():
            y += a * X[:, j] * X[:, k]
        return y

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "linear": [[j, a] for j, a in sorted(self.linear.items())],
            "interactions": [[j, k, a] for (j, k), a in sorted(self.interactions.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            n_features=int(d["n_features"]),
            linear={int(j): float(a) for j, a in d.get("linear", [])},
            interactions={(int(j), int(k)): float(a) for j, k, a in d.get("interactions", [])},
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


COEFFICIENT_GRID = 2.0**-30


def _grid_uniform(rng: np.random.Generator, size: int) -> np.ndarray:
    """U(0, 1) draws snapped to multiples of 2**-30, strictly inside (0, 1).

    On this grid every partial sum of coefficients over binary features is
    exact in double precision, so evaluation order never leaves rounding
    residue in differences that should be zero.
    """
    steps = np.rint(rng.uniform(0.0, 1.0, size=size) / COEFFICIENT_GRID)
    steps = np.clip(steps, 1, 2**30 - 1)
    return steps * COEFFICIENT_GRID


def generate_ground_truth(n_features: int = 500, n_linear: int = 50, n_interactions: int = 50, seed: int = 0) -> GroundTruth:
    """Random I_L, I_I (pairs drawn within I_L) and U(0, 1) coefficients."""
    if not 0 <= n_linear <= n_features:
        raise ValueError("n_linear must lie in [0, n_features]")
    if n_interactions < 0 or n_interactions > math.comb(n_linear, 2):
        raise ValueError(f"cannot draw {n_interactions} distinct pairs from {n_linear} features")
    rng = np.random.default_rng(seed)
    linear_idx = sorted(int(j) for j in rng.choice(n_features, size=n_linear, replace=False))
    pairs = list(itertools.combinations(linear_idx, 2))
    chosen = sorted(rng.choice(len(pairs), size=n_interactions, replace=False)) if n_interactions else []
    alphas = _grid_uniform(rng, n_linear)
    pair_alphas = _grid_uniform(rng, n_interactions)
    return GroundTruth(
        n_features=n_features,
        linear={j: float(a) for j, a in zip(linear_idx, alphas)},
        interactions={pairs[int(c)]: float(a) for c, a in zip(chosen, pair_alphas)},
    )


def generate_instances(ground_truth: GroundTruth, m: int, bernoulli_p: float = 0.5, seed: int = 0):
    """Bernoulli(p) binary instances with noiseless targets."""
    from .model import Dataset

    if not 0.0 < bernoulli_p < 1.0:
        raise ValueError("bernoulli_p must lie in (0, 1)")
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    X = (rng.random((m, ground_truth.n_features)) < bernoulli_p).astype(np.uint8)
    return Dataset(X, ground_truth.evaluate(X))


def build_random_hierarchy(n_features: int, seed: int = 0) -> FeatureHierarchy:
    """Balanced binary tree with a random permutation of features at the leaves.

    Leaves are named ``f<column>``; internal nodes ``g<k>`` in preorder, with
    the root ``g0``.
    """
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    rng = np.random.default_rng(seed)
    order = [int(j) for j in rng.permutation(n_features)]
    nodes: list[HierarchyNode] = []
    counter = itertools.count()

    def build(features: list[int], parent: str | None) -> str:
        if len(features) == 1:
            node_id = f"f{features[0]}"
            nodes.append(HierarchyNode(node_id, node_id, parent, frozenset(features)))
            return node_id
        node_id = f"g{next(counter)}"
        slot = len(nodes)
        nodes.append(None)  # placeholder keeps preorder
        half = (len(features) + 1) // 2
        left = build(features[:half], node_id)
        right = build(features[half:], node_id)
        nodes[slot] = HierarchyNode(node_id, node_id, parent, frozenset(features), (left, right))
        return node_id

    root = build(order, None)
    return FeatureHierarchy(nodes, root)


# --- scoring ---------------------------------------------------------------


@dataclass(frozen=True)
class EvaluationScore:
    feature_fdr: float
    feature_power: float
    interaction_fdr: float
    interaction_power: float

    def to_dict(self) -> dict:
        return {
            "feature_fdr": self.feature_fdr,
            "feature_power": self.feature_power,
            "interaction_fdr": self.interaction_fdr,
            "interaction_power": self.interaction_power,
        }


METRICS = ("feature_fdr", "feature_power", "interaction_fdr", "interaction_power")


def important_nodes(hierarchy: FeatureHierarchy, gt: GroundTruth) -> set[str]:
    """Nodes whose subtree holds at least one truly important feature."""
    imp = gt.important_features
    return {i for i in hierarchy.node_ids if hierarchy.features(i) & imp}


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def score(report, interactions, gt: GroundTruth, hierarchy: FeatureHierarchy | None = None) -> EvaluationScore:
    """FDR and power of reported discoveries against the ground truth.

    Feature metrics run over all rejected nodes, leaves and groups alike. A
    rejected interaction between nodes A and B is true when some pair of
    I_I has one member in A and the other in B; interaction power is the
    fraction of I_I pairs covered by a rejected interaction.
    """
    h = hierarchy or report.hierarchy
    if max(h.all_features, default=-1) >= gt.n_features:
        raise ValueError(f"hierarchy references feature columns beyond the ground truth's {gt.n_features}")
    truth = important_nodes(h, gt)
    rejected = set(report.rejected.ids)
    feature_fdr = _ratio(len(rejected - truth), len(rejected))
    feature_power = _ratio(len(rejected & truth), len(truth))

    found: set[tuple[int, int]] = set()
    n_rejected = n_false = 0
    for res in interactions or ():
        if not res.rejected:
            continue
        n_rejected += 1
        fa, fb = res.candidate.features_a, res.candidate.features_b
        hits = {(j, k) for (j, k) in gt.interactions if (j in fa and k in fb) or (j in fb and k in fa)}
        found |= hits
        n_false += not hits
    return EvaluationScore(
        feature_fdr=feature_fdr,
        feature_power=feature_power,
        interaction_fdr=_ratio(n_false, n_rejected),
        interaction_power=_ratio(len(found), len(gt.interactions)),
    )


# --- experiments -----------------------------------------------------------

VARY = ("m", "sigma")


@dataclass(frozen=True)
class ExperimentConfig:
    n_features: int = 500
    n_linear: int = 50
    n_interactions: int = 50
    m: int = 10_000
    sigma: float = 0.05
    bernoulli_p: float = 0.5
    q: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "n_linear": self.n_linear,
            "n_interactions": self.n_interactions,
            "m": self.m,
            "sigma": self.sigma,
            "bernoulli_p": self.bernoulli_p,
            "q": self.q,
            "seed": self.seed,
            "perturbation": "erasure",
        }


def replicate_seeds(seed: int, replicate: int) -> dict[str, int]:
    """Independent seeds for one replicate, shared by every grid point."""
    states = np.random.SeedSequence([seed, replicate]).generate_state(4, dtype=np.uint32)
    return dict(zip(("truth", "data", "hierarchy", "noise"), (int(s) for s in states)))


def run_replicate(config: ExperimentConfig, replicate: int, workers: int = 1) -> EvaluationScore:
    """One fresh (truth, model, data, hierarchy) draw, analyzed and scored."""
    from .importance import AnalysisConfig, analyze
    from .interactions import analyze_interactions, candidate_pairs
    from .model import SyntheticModel
    from .perturb import PerturbationSpec

    seeds = replicate_seeds(config.seed, replicate)
    gt = generate_ground_truth(config.n_features, config.n_linear, config.n_interactions, seeds["truth"])
    data = generate_instances(gt, config.m, config.bernoulli_p, seeds["data"])
    h = build_random_hierarchy(config.n_features, seeds["hierarchy"])
    model = SyntheticModel(gt, config.sigma, seeds["noise"])
    spec = PerturbationSpec("erasure")
    report = analyze(model, data, h, AnalysisConfig(q=config.q, spec=spec, lazy=True, workers=workers))
    leaves = [i for i in h.preorder() if i in report.rejected and h[i].is_leaf]
    results = analyze_interactions(model, data, candidate_pairs(leaves, h), config.q, spec, workers=workers)
    return score(report, results, gt, h)


def _replicate_job(args):
    config, replicate = args
    return run_replicate(config, replicate)


@dataclass
class ExperimentTable:
    vary: str
    config: dict
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"vary": self.vary, "config": self.config, "rows": self.rows}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def format_text(self) -> str:
        cfg = self.config
        fixed = f"sigma = {cfg['sigma']}" if self.vary == "m" else f"m = {cfg['m']}"
        lines = [
            f"# vary {self.vary}; {fixed}; bernoulli p = {cfg['bernoulli_p']}; q = {cfg['q']}; "
            f"replicates = {cfg['replicates']}; seed = {cfg['seed']}",
        ]
        header = [self.vary, "feat FDR", "feat power", "int FDR", "int power"]
        body = [
            [_fmt_grid(r["value"])] + [f"{r[k]['mean']:.3f} ± {r[k]['se']:.3f}" for k in METRICS] for r in self.rows
        ]
        widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
        for row in [header] + body:
            lines.append("  ".join(str(c).rjust(w) for c, w in zip(row, widths)))
        return "\n".join(lines) + "\n"


def _fmt_grid(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def _summarize(scores: list[EvaluationScore]) -> dict:
    out = {}
    for k in METRICS:
        vals = np.array([getattr(s, k) for s in scores])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out[k] = {"mean": float(vals.mean()), "se": se}
    return out


def run_experiment(
    vary: str,
    grid,
    replicates: int,
    base: ExperimentConfig | None = None,
    processes: int = 1,
    progress=None,
) -> ExperimentTable:
    """Mean FDR and power over replicates at each grid value of ``m`` or ``sigma``.

    Replicate r draws its truth, data, hierarchy and noise from seeds that
    depend only on (seed, r), so every grid point sees the same draws and
    trends are not blurred by replicate-to-replicate variation.
    """
    if vary not in VARY:
        raise ValueError(f"vary must be one of {VARY}")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    grid = [int(v) if vary == "m" else float(v) for v in grid]
    if not grid:
        raise ValueError("grid is empty")
    base = base or ExperimentConfig()
    rows = []
    for value in grid:
        cfg = ExperimentConfig(**{**base.__dict__, vary: value})
        jobs = [(cfg, r) for r in range(replicates)]
        if processes > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=processes) as pool:
                scores = list(pool.map(_replicate_job, jobs))
        else:
            scores = [_replicate_job(j) for j in jobs]
        row = {"value": value, "replicates": replicates, **_summarize(scores)}
        rows.append(row)
        if progress is not None:
            progress(row)
    config = base.to_dict()
    config[vary] = None
    config["replicates"] = replicates
    return ExperimentTable(vary, config, rows)
