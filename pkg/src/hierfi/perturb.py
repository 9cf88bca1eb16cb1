"""Perturbed copies of a data matrix for a feature set.

Random perturbations draw from a stream keyed by ``(spec.seed, stream_key)``,
where the key is normally a hierarchy node id. Results therefore do not
depend on the order in which nodes are evaluated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

KINDS = ("permutation", "erasure", "flip")
DEFAULT_PERMUTATIONS = 500


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "permutation"
    n_permutations: int = DEFAULT_PERMUTATIONS
    erasure_value: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        if self.n_permutations < 1:
            raise ValueError("number of permutations must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")

    @property
    def replicates(self) -> int:
        """P: permutation count for random kinds, 1 otherwise."""
        return self.n_permutations if self.kind == "permutation" else 1

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "permutation":
            out["n_permutations"] = self.n_permutations
        elif self.kind == "erasure":
            out["erasure_value"] = self.erasure_value
        out["seed"] = self.seed
        return out


def stream_id(key) -> int:
    """Stable 64-bit integer for an arbitrary stream key."""
    digest = hashlib.blake2b(repr(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_rng(seed: int, key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream_id(key)]))


def _matrix(data) -> np.ndarray:
    X = getattr(data, "X", data)
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("data matrix must be two-dimensional")
    return X


def _columns(X: np.ndarray, features: Iterable[int]) -> np.ndarray:
    cols = np.array(sorted({int(f) for f in features}), dtype=np.intp)
    if cols.size == 0:
        raise ValueError("feature set must be nonempty")
    if cols[0] < 0 or cols[-1] >= X.shape[1]:
        raise IndexError(f"feature index out of range for matrix with {X.shape[1]} columns")
    return cols


def _check_binary(X: np.ndarray, cols: np.ndarray) -> None:
    sub = X[:, cols]
    if not np.all((sub == 0) | (sub == 1)):
        raise ValueError("flip perturbation requires binary columns")


class PerturbedBatch:
    """Lazily generated perturbed matrices, one per replicate.

    Iterating yields ``len(batch)`` fresh arrays; iterating again yields the
    same arrays. The source matrix is never modified.
    """

    def __init__(self, X: np.ndarray, groups: list[tuple[np.ndarray, object]], spec: PerturbationSpec):
        self.X = X
        self.groups = groups
        self.spec = spec

    def __len__(self) -> int:
        return self.spec.replicates

    def __iter__(self) -> Iterator[np.ndarray]:
        spec = self.spec
        X = self.X
        if spec.kind == "erasure":
            out = X.copy()
            value = spec.erasure_value
            if np.issubdtype(out.dtype, np.integer) and value != int(value):
                out = out.astype(float)
            for cols, _ in self.groups:
                out[:, cols] = value
            yield out
        elif spec.kind == "flip":
            out = X.copy()
            for cols, _ in self.groups:
                out[:, cols] = 1 - X[:, cols]
            yield out
        else:
            m = X.shape[0]
            rngs = [stream_rng(spec.seed, key) for _, key in self.groups]
            for _ in range(spec.replicates):
                out = X.copy()
                for (cols, _), rng in zip(self.groups, rngs):
                    perm = rng.permutation(m)
                    out[:, cols] = X[np.ix_(perm, cols)]
                yield out

    def materialize(self) -> np.ndarray:
        return np.stack(list(self))


def apply(data, features: Iterable[int], spec: PerturbationSpec, stream_key=None) -> PerturbedBatch:
    """Perturb the columns in ``features`` as a unit.

    Permutation moves each row's group values together to another row; a new
    row permutation is drawn per replicate. Erasure writes
    ``spec.erasure_value``; flip maps x to 1 - x.
    """
    X = _matrix(data)
    cols = _columns(X, features)
    if spec.kind == "flip":
        _check_binary(X, cols)
    key = tuple(int(c) for c in cols) if stream_key is None else stream_key
    return PerturbedBatch(X, [(cols, key)], spec)


def apply_joint(data, features_a, features_b, spec: PerturbationSpec, key_a=None, key_b=None) -> PerturbedBatch:
    """Perturb two disjoint feature sets in the same replicate.

    Under permutation each set gets its own row permutation from its own
    stream, so replicate p of the joint batch perturbs set ``a`` exactly as
    replicate p of ``apply(data, features_a, spec, key_a)`` does.
    """
    X = _matrix(data)
    cols_a = _columns(X, features_a)
    cols_b = _columns(X, features_b)
    if np.intersect1d(cols_a, cols_b).size:
        raise ValueError("joint perturbation requires disjoint feature sets")
    if spec.kind == "flip":
        _check_binary(X, np.concatenate([cols_a, cols_b]))
    ka = tuple(int(c) for c in cols_a) if key_a is None else key_a
    kb = tuple(int(c) for c in cols_b) if key_b is None else key_b
    return PerturbedBatch(X, [(cols_a, ka), (cols_b, kb)], spec)
