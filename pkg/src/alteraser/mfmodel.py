"""One-layer neural matrix factorization with a whole-data weighted loss.

The score is ``h . (p_u * q_v)``. Observed entries have target 1 and weight 1;
every other entry has target 0 and weight ``w0_v``. Writing ``a_v = h * q_v``
the all-entries part of the loss collapses to ``sum_u p_u^T G_Q p_u`` with the
``d x d`` Gram matrix ``G_Q = sum_v w0_v a_v a_v^T``, which is what keeps the
loss, its gradients and the block Hessians cheap.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .dataio import InteractionDataset
from .errors import CheckpointError, ShapeError, StaleCacheError

MAGIC = b"ALTE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")


@dataclass
class WeightScheme:
    """Weights of the missing entries.

    ``uniform`` uses ``w0`` for every item. ``item_popularity`` scales
    ``w0_cap`` by item training frequency relative to the most popular item;
    the per-item vector is frozen when the scheme is fitted.
    """

    kind: Literal["uniform", "item_popularity"] = "uniform"
    w0: float = 0.05
    w0_cap: float = 0.1
    per_item: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "item_popularity"):
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        if not 0.0 <= self.w0 <= 1.0 or not 0.0 <= self.w0_cap <= 1.0:
            raise ValueError("missing-entry weights must lie in [0, 1]")
        if self.per_item is not None:
            self.per_item = np.asarray(self.per_item, dtype=np.float64)
            if np.any(self.per_item < 0) or np.any(self.per_item > 1):
                raise ValueError("missing-entry weights must lie in [0, 1]")

    @classmethod
    def popularity(cls, ds: InteractionDataset, w0_cap: float = 0.1) -> "WeightScheme":
        freq = ds.item_counts().astype(np.float64)
        top = freq.max(initial=0.0)
        per_item = w0_cap * freq / top if top > 0 else np.zeros_like(freq)
        return cls("item_popularity", w0_cap=w0_cap, per_item=per_item)

    def fit(self, ds: InteractionDataset) -> "WeightScheme":
        if self.kind == "uniform":
            return WeightScheme("uniform", self.w0, self.w0_cap)
        return WeightScheme.popularity(ds, self.w0_cap)

    def item_weights(self, num_items: int) -> np.ndarray:
        if self.kind == "uniform":
            return np.full(num_items, self.w0)
        if self.per_item is None:
            raise ValueError("popularity weights have not been fitted to a dataset")
        if len(self.per_item) != num_items:
            raise ShapeError(f"weight vector has {len(self.per_item)} items, model has {num_items}")
        return self.per_item

    def to_json(self) -> dict:
        out = {"kind": self.kind, "w0": self.w0, "w0_cap": self.w0_cap}
        if self.per_item is not None:
            out["per_item"] = [float(x) for x in self.per_item]
        return out

    @classmethod
    def from_json(cls, blob: dict) -> "WeightScheme":
        return cls(blob["kind"], blob["w0"], blob["w0_cap"], blob.get("per_item"))


@dataclass
class ModelState:
    """User/item embeddings ``P``, ``Q`` and the prediction layer ``h``.

    Code that writes into ``P`` or ``Q`` must call :meth:`bump` so that Gram
    caches built earlier are rejected.
    """

    P: np.ndarray
    Q: np.ndarray
    h: np.ndarray
    lam: float
    weights: WeightScheme = field(default_factory=WeightScheme)
    seed: int = 0
    version: int = 0

    def __post_init__(self):
        self.P = np.ascontiguousarray(self.P, dtype=np.float64)
        self.Q = np.ascontiguousarray(self.Q, dtype=np.float64)
        self.h = np.ascontiguousarray(self.h, dtype=np.float64)
        d = self.h.shape[0]
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[1] != d or self.Q.shape[1] != d:
            raise ShapeError(f"inconsistent shapes P{self.P.shape} Q{self.Q.shape} h{self.h.shape}")
        if self.lam <= 0:
            raise ValueError("lambda must be strictly positive")

    @property
    def num_users(self) -> int:
        return self.P.shape[0]

    @property
    def num_items(self) -> int:
        return self.Q.shape[0]

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    @property
    def w0(self) -> np.ndarray:
        return self.weights.item_weights(self.num_items)

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "ModelState":
        return ModelState(self.P.copy(), self.Q.copy(), self.h.copy(), self.lam,
                          self.weights, self.seed, self.version)

    def check_bound(self, ds: InteractionDataset) -> None:
        if (self.num_users, self.num_items) != (ds.num_users, ds.num_items):
            raise ShapeError(f"model is {self.num_users}x{self.num_items} but dataset is "
                             f"{ds.num_users}x{ds.num_items}")

    def user_design(self) -> np.ndarray:
        """Rows ``c_u = h * p_u`` (design vectors of the item blocks)."""
        return self.P * self.h

    def item_design(self) -> np.ndarray:
        """Rows ``a_v = h * q_v`` (design vectors of the user blocks)."""
        return self.Q * self.h


def init_model(num_users: int, num_items: int, dim: int = 64, lam: float = 1e-2,
               weights: WeightScheme | None = None, seed: int = 0,
               std: float = 0.01) -> ModelState:
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, std, size=(num_users, dim))
    Q = rng.normal(0.0, std, size=(num_items, dim))
    return ModelState(P, Q, np.ones(dim), lam, weights or WeightScheme(), seed)


# prediction --------------------------------------------------------------


def _check_index(idx: int, bound: int, what: str) -> None:
    if not 0 <= idx < bound:
        raise IndexError(f"{what} index {idx} out of range [0, {bound})")


def predict(model: ModelState, u: int, v: int) -> float:
    _check_index(u, model.num_users, "user")
    _check_index(v, model.num_items, "item")
    return float(np.dot(model.h, model.P[u] * model.Q[v]))


def user_scores(model: ModelState, u: int) -> np.ndarray:
    _check_index(u, model.num_users, "user")
    return model.Q @ (model.h * model.P[u])


def predict_pairs(model: ModelState, pairs: np.ndarray) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return np.einsum("ij,ij->i", model.P[pairs[:, 0]] * model.h, model.Q[pairs[:, 1]])


def rank_items(scores: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Top-``k`` indices by descending score, ties by ascending index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates = np.arange(len(scores))
    if exclude is not None and len(exclude):
        mask = np.ones(len(scores), dtype=bool)
        mask[np.asarray(list(exclude) if isinstance(exclude, (set, frozenset)) else exclude,
                        dtype=np.int64)] = False
        candidates = candidates[mask]
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order[:k]]


def predict_topk(model: ModelState, u: int, k: int, exclude=None) -> list[int]:
    """The ``k`` best-scoring items for ``u`` outside ``exclude``."""
    return [int(v) for v in rank_items(user_scores(model, u), k, exclude)]


# losses ------------------------------------------------------------------


def l2_penalty(model: ModelState) -> float:
    return 0.5 * model.lam * (np.sum(model.P ** 2) + np.sum(model.Q ** 2) + np.sum(model.h ** 2))


def loss_naive(model: ModelState, ds: InteractionDataset) -> float:
    """Direct weighted squared error over every ``(u, v)`` entry. O(m n d)."""
    model.check_bound(ds)
    y = ds.dense_train()
    w = np.where(y > 0, 1.0, model.w0[None, :])
    yhat = (model.P * model.h) @ model.Q.T
    return float(0.5 * np.sum(w * (y - yhat) ** 2) + l2_penalty(model))


def gram(design: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    if weights is None:
        g = design.T @ design
    else:
        g = design.T @ (weights[:, None] * design)
    return 0.5 * (g + g.T)


@dataclass(frozen=True)
class GramCache:
    """``item_gram`` is ``sum_v w0_v a_v a_v^T``; ``user_gram`` is ``sum_u c_u c_u^T``."""

    item_gram: np.ndarray
    user_gram: np.ndarray
    version: int


def gram_cache(model: ModelState) -> GramCache:
    return GramCache(gram(model.item_design(), model.w0), gram(model.user_design()), model.version)


def _cache(model: ModelState, cache: GramCache | None) -> GramCache:
    if cache is None:
        return gram_cache(model)
    if cache.version != model.version:
        raise StaleCacheError(f"Gram cache version {cache.version} != model version {model.version}")
    return cache


def loss_efficient(model: ModelState, ds: InteractionDataset,
                   cache: GramCache | None = None) -> float:
    """Same value as :func:`loss_naive` in O(|D| d + (m + n) d^2)."""
    model.check_bound(ds)
    cache = _cache(model, cache)
    w0 = model.w0
    u, v = ds.train[:, 0], ds.train[:, 1]
    yhat = np.einsum("ij,ij->i", model.P[u] * model.h, model.Q[v])
    observed = np.sum((1.0 - w0[v]) * yhat ** 2 - 2.0 * yhat + 1.0)
    missing = np.sum((model.P @ cache.item_gram) * model.P)
    return float(0.5 * (observed + missing) + l2_penalty(model))


def grad_user(model: ModelState, ds: InteractionDataset, u: int,
              cache: GramCache | None = None) -> np.ndarray:
    cache = _cache(model, cache)
    items = ds.by_user(u)
    a = model.Q[items] * model.h
    p = model.P[u]
    coef = (1.0 - model.w0[items]) * (a @ p) - 1.0
    return coef @ a + cache.item_gram @ p + model.lam * p


def grad_item(model: ModelState, ds: InteractionDataset, v: int,
              cache: GramCache | None = None) -> np.ndarray:
    cache = _cache(model, cache)
    users = ds.by_item(v)
    c = model.P[users] * model.h
    q = model.Q[v]
    w0v = model.w0[v]
    coef = (1.0 - w0v) * (c @ q) - 1.0
    return coef @ c + w0v * (cache.user_gram @ q) + model.lam * q


def grad_h(model: ModelState, ds: InteractionDataset) -> np.ndarray:
    u, v = ds.train[:, 0], ds.train[:, 1]
    z = model.P[u] * model.Q[v]
    coef = (1.0 - model.w0[v]) * (z @ model.h) - 1.0
    # sum_{u,v} w0_v z z^T factorizes as (P^T P) * (Q^T W0 Q), elementwise
    curvature = (model.P.T @ model.P) * gram(model.Q, model.w0)
    return coef @ z + curvature @ model.h + model.lam * model.h


# checkpoints -------------------------------------------------------------


def save_checkpoint(model: ModelState, path) -> None:
    m, d = model.P.shape
    n = model.Q.shape[0]
    meta = json.dumps({"lambda": model.lam, "weights": model.weights.to_json(),
                       "seed": model.seed}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, m, n, d))
        for arr in (model.P, model.Q, model.h):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def load_checkpoint(path) -> ModelState:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, m, n, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = _HEADER.size
    arrays = []
    for shape in ((m, d), (n, d), (d,)):
        size = int(np.prod(shape)) * 8
        if len(data) < offset + size:
            raise CheckpointError(f"{path}: truncated array data")
        arrays.append(np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset)
                      .reshape(shape).astype(np.float64))
        offset += size
    if len(data) < offset + 4:
        raise CheckpointError(f"{path}: truncated metadata length")
    (meta_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) != offset + meta_len:
        raise CheckpointError(f"{path}: metadata length mismatch")
    try:
        meta = json.loads(data[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata") from exc
    P, Q, h = arrays
    return ModelState(P, Q, h, meta["lambda"], WeightScheme.from_json(meta["weights"]), meta["seed"])
