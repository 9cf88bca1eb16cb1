"""Models under interrogation, loss functions and test data.

A model is anything with ``predict(X)`` plus the attributes ``arity``,
``transfer`` and ``supports_g``. Models that expose ``g(X)`` (the value fed
to the transfer function) can be used for interaction tests; identity
transfer models get ``g = predict`` for free.
"""

from __future__ import annotations

import csv
import json
import logging
import shlex
import subprocess
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, ndtri
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

TRANSFERS = ("identity", "logistic")
LOSSES = ("squared_error", "binary_cross_entropy")
BCE_EPS = 1e-12
TARGET_COLUMN = "__target__"


class CapabilityError(RuntimeError):
    """The model cannot provide a requested quantity (e.g. g-values)."""


class ProtocolError(RuntimeError):
    """An external model adapter misbehaved."""

    def __init__(self, message: str, request_id: int | None = None):
        self.request_id = request_id
        prefix = f"request {request_id}: " if request_id is not None else ""
        super().__init__(prefix + message)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    column_names: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-D matrix")
        if self.X.shape[0] < 1:
            raise ValueError("dataset needs at least one instance")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}")
        if self.column_names is not None and len(self.column_names) != self.X.shape[1]:
            raise ValueError("column_names length does not match X")

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


def read_dataset(path, targets_path=None) -> Dataset:
    """Load a CSV with a header row.

    Targets come from a ``__target__`` column or, if given, from a one-column
    ``targets_path`` file (header optional).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty data file")
    header, body = rows[0], rows[1:]
    try:
        values = np.array([[float(v) for v in row] for row in body], dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric or ragged data ({exc})") from None
    if TARGET_COLUMN in header:
        t = header.index(TARGET_COLUMN)
        y = values[:, t]
        X = np.delete(values, t, axis=1)
        names = [h for i, h in enumerate(header) if i != t]
    elif targets_path is not None:
        X, names = values, header
        with open(targets_path, newline="", encoding="utf-8") as fh:
            cells = [r[0] for r in csv.reader(fh) if r]
        try:
            float(cells[0])
        except (ValueError, IndexError):
            cells = cells[1:]
        y = np.array([float(c) for c in cells])
    else:
        raise ValueError(f"{path}: no {TARGET_COLUMN!r} column and no targets file given")
    return Dataset(X, y, names)


def write_dataset(data: Dataset, path) -> None:
    names = data.column_names or [f"x{j}" for j in range(data.n_features)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(names) + [TARGET_COLUMN])
        for row, target in zip(data.X.tolist(), data.y.tolist()):
            writer.writerow([repr(float(v)) if not float(v).is_integer() else int(v) for v in row] + [repr(target)])


def apply_transfer(transfer: str, values: np.ndarray) -> np.ndarray:
    if transfer == "identity":
        return values
    if transfer == "logistic":
        return expit(values)
    raise ValueError(f"unknown transfer function {transfer!r}")


class Model:
    """Base class for models; subclasses implement ``predict`` and maybe ``g``."""

    arity: int | None = None
    transfer: str = "identity"

    @property
    def supports_g(self) -> bool:
        return self.transfer == "identity"

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim != 2:
            raise ValueError("model input must be a 2-D matrix")
        if self.arity is not None and X.shape[1] != self.arity:
            raise ValueError(f"model expects {self.arity} columns, got {X.shape[1]}")
        return X

    def predict(self, X) -> np.ndarray:
        raise NotImplementedError

    def g(self, X) -> np.ndarray:
        if self.transfer == "identity":
            return self.predict(X)
        raise CapabilityError("model does not expose pre-transfer values g(x)")


class FunctionModel(Model):
    """Wraps plain callables.

    Give ``predict_fn`` for a black box, or ``g_fn`` (optionally both) to
    expose pre-transfer values; with only ``g_fn``, predictions are
    ``transfer(g_fn(X))``.
    """

    def __init__(
        self,
        predict_fn: Callable | None = None,
        arity: int | None = None,
        transfer: str = "identity",
        g_fn: Callable | None = None,
    ):
        if transfer not in TRANSFERS:
            raise ValueError(f"unknown transfer function {transfer!r}")
        if predict_fn is None and g_fn is None:
            raise ValueError("need predict_fn or g_fn")
        self._predict = predict_fn
        self._g = g_fn
        self.arity = arity
        self.transfer = transfer

    @property
    def supports_g(self) -> bool:
        return self._g is not None or self.transfer == "identity"

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        if self._predict is not None:
            return np.asarray(self._predict(X), dtype=float).ravel()
        return apply_transfer(self.transfer, self.g(X))

    def g(self, X) -> np.ndarray:
        X = self._check(X)
        if self._g is not None:
            return np.asarray(self._g(X), dtype=float).ravel()
        return super().g(X)


def check_consistency(model: Model, X, tol: float = 1e-9) -> float:
    """Largest |f(g(x)) - predict(x)|; raises if it exceeds ``tol``."""
    pred = model.predict(X)
    via_g = apply_transfer(model.transfer, model.g(X))
    worst = float(np.max(np.abs(via_g - pred))) if pred.size else 0.0
    if worst > tol:
        raise ValueError(f"transfer(g(x)) differs from predict(x) by {worst:g}")
    return worst


def evaluate_loss(loss: str, y, predictions) -> np.ndarray:
    """Per-instance loss L[y, h(x)]."""
    y = np.asarray(y, dtype=float)
    p = np.asarray(predictions, dtype=float)
    if loss == "squared_error":
        return (y - p) ** 2
    if loss == "binary_cross_entropy":
        clipped = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
        if np.any(clipped != p):
            logger.warning("cross-entropy predictions outside (0, 1) clamped at %g", BCE_EPS)
        # equals zero when the prediction matches the target to within eps
        out = -(y * np.log(clipped) + (1.0 - y) * np.log1p(-clipped))
        return np.maximum(out, 0.0)
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def losses(model: Model, data: Dataset, loss: str) -> np.ndarray:
    return evaluate_loss(loss, data.y, model.predict(data.X))


def default_loss(model: Model) -> str:
    return "binary_cross_entropy" if model.transfer == "logistic" else "squared_error"


def auroc(y, scores) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    y = np.asarray(y, dtype=float)
    scores = np.asarray(scores, dtype=float)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != y.size:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --- synthetic model -------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, elementwise on uint64 arrays (wrapping)."""
    x = np.array(x, dtype=np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def _float_bits(X: np.ndarray) -> np.ndarray:
    Xf = np.asarray(X, dtype=np.float64) + 0.0  # folds -0.0 into +0.0
    return Xf.view(np.uint64)


class PointHash:
    """Stable 64-bit hash of feature vectors.

    hash(x) = sum_j mix64(bits(x_j) XOR salt_j) mod 2**64, where bits() is the
    IEEE-754 double pattern. Rows made only of 0/1 take a fast path through a
    floating-point matrix product that reproduces the same integer sum.
    """

    _CHUNK = 22

    def __init__(self, n_features: int):
        self.n_features = n_features
        salts = _mix64(np.arange(n_features, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15))
        self.salts = salts
        zero_bits = _float_bits(np.zeros(1))[0]
        one_bits = _float_bits(np.ones(1))[0]
        t0 = _mix64(salts ^ zero_bits)
        t1 = _mix64(salts ^ one_bits)
        self.base = np.uint64(int(t0.astype(object).sum()) & 0xFFFFFFFFFFFFFFFF)
        diff = t1 - t0  # wraps mod 2**64
        mask = np.uint64((1 << self._CHUNK) - 1)
        c = np.uint64(self._CHUNK)
        self.chunks = np.stack(
            [diff & mask, (diff >> c) & mask, diff >> (c + c)], axis=1
        ).astype(np.float64)

    def hash_generic(self, X: np.ndarray) -> np.ndarray:
        terms = _mix64(_float_bits(X) ^ self.salts[None, :])
        return terms.sum(axis=1, dtype=np.uint64)

    def combine_chunks(self, sums: np.ndarray) -> np.ndarray:
        """Turn exact per-chunk float sums (rows x 3) into 64-bit hashes."""
        with np.errstate(invalid="ignore"):
            s = sums.astype(np.uint64)
        c = np.uint64(self._CHUNK)
        return self.base + s[:, 0] + (s[:, 1] << c) + (s[:, 2] << (c + c))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        out = self.combine_chunks(_blocked_matmul(X, self.chunks)[0])
        binary = _binary_rows(X)
        if not binary.all():
            rows = ~binary
            out[rows] = self.hash_generic(X[rows].astype(np.float64))
        return out


_BLOCK_ROWS = 256


def _blocked_matmul(X: np.ndarray, W: np.ndarray, pairs=None) -> tuple[np.ndarray, np.ndarray | None]:
    """``X @ W`` in float64, converting X a few rows at a time.

    Converting a large uint8 matrix in one go costs more than the product
    itself; a small reused buffer stays in cache. With ``pairs = (U, Q)``
    the quadratic forms ``x_U Q x_U`` are returned as well.
    """
    m, n = X.shape
    out = np.empty((m, W.shape[1]))
    extra = np.empty(m) if pairs is not None else None
    buf = np.empty((min(_BLOCK_ROWS, m), n))
    for start in range(0, m, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, m)
        block = buf[: stop - start]
        np.copyto(block, X[start:stop], casting="unsafe")
        np.matmul(block, W, out=out[start:stop])
        if pairs is not None:
            cols, Q = pairs
            xu = block[:, cols]
            extra[start:stop] = np.einsum("ij,ij->i", xu @ Q, xu)
    return out, extra


def _binary_rows(X: np.ndarray) -> np.ndarray:
    if X.dtype == bool:
        return np.ones(X.shape[0], dtype=bool)
    if np.issubdtype(X.dtype, np.integer) and X.size:
        if X.min() >= 0 and X.max() <= 1:
            return np.ones(X.shape[0], dtype=bool)
    return np.all((X == 0) | (X == 1), axis=1)


def _uniform_from_hash(h: np.ndarray) -> np.ndarray:
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)


class SyntheticModel(Model):
    """Ground-truth function plus a fixed per-point deviation.

    Output is sum_j a_j x_j + sum_(j,k) a_jk x_j x_k + gamma(x), where
    gamma(x) ~ N(0, sigma^2) is derived from a hash of x and the noise seed,
    so the same point always yields the same output.
    """

    transfer = "identity"

    def __init__(self, ground_truth, sigma: float = 0.0, seed: int = 0):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.ground_truth = ground_truth
        self.sigma = float(sigma)
        self.seed = int(seed)
        n = ground_truth.n_features
        self.arity = n
        self._alpha = np.zeros(n)
        for j, a in ground_truth.linear.items():
            self._alpha[j] = a
        pairs = sorted(ground_truth.interactions.items())
        self._pair_j = np.array([p[0][0] for p in pairs], dtype=np.intp)
        self._pair_k = np.array([p[0][1] for p in pairs], dtype=np.intp)
        self._pair_a = np.array([p[1] for p in pairs], dtype=float)
        # pair terms as an upper-triangular quadratic form over the used columns
        cols = np.unique(np.concatenate([self._pair_j, self._pair_k]))
        pos = np.searchsorted(cols, [self._pair_j, self._pair_k])
        Q = np.zeros((cols.size, cols.size))
        np.add.at(Q, (pos[0], pos[1]), self._pair_a)
        self._pairs = (cols, Q) if self._pair_a.size else None
        self._hash = PointHash(n)
        self._seed_mix = _mix64(np.array([self.seed], dtype=np.uint64))[0]
        self._weights = np.column_stack([self._alpha, self._hash.chunks])

    def truth(self, X) -> np.ndarray:
        X = self._check(X)
        prod, pair_sum = _blocked_matmul(X, self._alpha[:, None], self._pairs)
        return prod[:, 0] if pair_sum is None else prod[:, 0] + pair_sum

    def noise(self, X) -> np.ndarray:
        X = self._check(X)
        if self.sigma == 0:
            return np.zeros(X.shape[0])
        return self._noise_from_hash(self._hash(X))

    def _noise_from_hash(self, h: np.ndarray) -> np.ndarray:
        u = _uniform_from_hash(_mix64(h ^ self._seed_mix))
        return self.sigma * ndtri(u)

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        if self.sigma == 0:
            return self.truth(X)
        prod, pair_sum = _blocked_matmul(X, self._weights, self._pairs)
        out = prod[:, 0] if pair_sum is None else prod[:, 0] + pair_sum
        h = self._hash.combine_chunks(prod[:, 1:])
        binary = _binary_rows(X)
        if not binary.all():
            h[~binary] = self._hash.hash_generic(X[~binary].astype(np.float64))
        return out + self._noise_from_hash(h)


def make_synthetic_model(ground_truth, sigma: float, seed: int = 0) -> SyntheticModel:
    return SyntheticModel(ground_truth, sigma, seed)


# --- external adapter ------------------------------------------------------


class AdapterModel(Model):
    """Model served by an external process speaking newline-delimited JSON.

    On startup the adapter prints ``{"arity", "transfer", "supports_g"}``.
    Each request ``{"id", "op", "X"}`` must be answered by
    ``{"id", "values"}`` with one value per row. Requests are serialized.
    """

    def __init__(self, command: str | Sequence[str], max_rows: int = 10_000, timeout: float | None = None):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.command = argv
        self.max_rows = max_rows
        self._lock = threading.Lock()
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ProtocolError(f"cannot launch adapter {argv!r}: {exc}") from None
        hello = self._read_message(None)
        try:
            self.arity = int(hello["arity"])
            self.transfer = str(hello.get("transfer", "identity"))
            self._supports_g = bool(hello.get("supports_g", False))
        except (KeyError, TypeError, ValueError):
            self.close()
            raise ProtocolError(f"malformed handshake {hello!r}") from None
        if self.transfer not in TRANSFERS:
            self.close()
            raise ProtocolError(f"unknown transfer {self.transfer!r} in handshake")

    @property
    def supports_g(self) -> bool:
        return self._supports_g or self.transfer == "identity"

    def _read_message(self, request_id: int | None) -> dict:
        line = self._proc.stdout.readline()
        if not line:
            code = self._proc.wait()
            raise ProtocolError(f"adapter exited with status {code} before replying", request_id)
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            raise ProtocolError(f"malformed response {line.strip()[:200]!r}", request_id) from None
        if not isinstance(msg, dict):
            raise ProtocolError(f"malformed response {line.strip()[:200]!r}", request_id)
        return msg

    def _request(self, op: str, X: np.ndarray) -> np.ndarray:
        with self._lock:
            request_id = self._next_id
            self._next_id += 1
            payload = json.dumps({"id": request_id, "op": op, "X": X.tolist()})
            try:
                self._proc.stdin.write(payload + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError):
                code = self._proc.wait()
                raise ProtocolError(f"adapter exited with status {code}", request_id) from None
            msg = self._read_message(request_id)
        if msg.get("id") != request_id:
            raise ProtocolError(f"response id {msg.get('id')!r} does not match", request_id)
        values = msg.get("values")
        if not isinstance(values, list) or len(values) != X.shape[0]:
            raise ProtocolError("response must carry one value per row", request_id)
        try:
            out = np.array(values, dtype=float)
        except (TypeError, ValueError):
            raise ProtocolError("non-numeric values in response", request_id) from None
        if not np.all(np.isfinite(out)):
            raise ProtocolError("non-finite values in response", request_id)
        return out

    def _batched(self, op: str, X) -> np.ndarray:
        X = self._check(X).astype(float, copy=False)
        parts = [self._request(op, X[i : i + self.max_rows]) for i in range(0, X.shape[0], self.max_rows)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def predict(self, X) -> np.ndarray:
        return self._batched("predict", X)

    def g(self, X) -> np.ndarray:
        if self._supports_g:
            return self._batched("g", X)
        return super().g(X)

    def close(self) -> None:
        proc = self._proc
        if proc.poll() is None:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        if proc.stdout:
            proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
