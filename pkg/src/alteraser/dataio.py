"""Implicit-feedback datasets, per-user splits and forget-request generation.

Pairs are stored as ``(N, 2)`` int64 arrays sorted by ``(user, item)``.
Both adjacency directions are kept in CSR form so that a user's (or an
item's) training row is a contiguous slice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .errors import DataError, ParseError

Scenario = Literal["privacy", "noise"]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _pair_keys(pairs: np.ndarray, num_items: int) -> np.ndarray:
    return pairs[:, 0].astype(np.int64) * num_items + pairs[:, 1]


def _canonical(pairs, num_items: int) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.empty((0, 2), dtype=np.int64)
    keys = np.unique(_pair_keys(pairs, num_items))
    return np.stack([keys // num_items, keys % num_items], axis=1)


def _csr(rows: np.ndarray, cols: np.ndarray, nrows: int):
    order = np.lexsort((cols, rows))
    indptr = np.zeros(nrows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=nrows), out=indptr[1:])
    return indptr, cols[order].astype(np.int64)


@dataclass(frozen=True)
class InteractionDataset:
    """Implicit-feedback interactions with a train/test partition.

    ``train`` and ``test`` are disjoint, deduplicated, sorted pair arrays.
    ``user_ids[i]`` is the external id of dense user index ``i``.
    """

    num_users: int
    num_items: int
    train: np.ndarray
    test: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    _user_indptr: np.ndarray = field(init=False, repr=False, compare=False)
    _user_indices: np.ndarray = field(init=False, repr=False, compare=False)
    _item_indptr: np.ndarray = field(init=False, repr=False, compare=False)
    _item_indices: np.ndarray = field(init=False, repr=False, compare=False)
    _test_indptr: np.ndarray = field(init=False, repr=False, compare=False)
    _test_indices: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m, n = self.num_users, self.num_items
        for name in ("train", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            if len(arr) and (arr.min() < 0 or arr[:, 0].max() >= m or arr[:, 1].max() >= n):
                raise DataError(f"{name} pair index out of range for {m}x{n} dataset")
        train = _canonical(self.train, max(n, 1))
        test = _canonical(self.test, max(n, 1))
        if len(train) and len(test):
            if np.intersect1d(_pair_keys(train, n), _pair_keys(test, n)).size:
                raise DataError("train and test pairs overlap")
        if len(self.user_ids) != m or len(self.item_ids) != n:
            raise DataError("id maps do not match dataset shape")
        train.setflags(write=False)
        test.setflags(write=False)
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "test", test)
        up, ui = _csr(train[:, 0], train[:, 1], m)
        ip, ii = _csr(train[:, 1], train[:, 0], n)
        tp, ti = _csr(test[:, 0], test[:, 1], m)
        for name, value in (
            ("_user_indptr", up), ("_user_indices", ui),
            ("_item_indptr", ip), ("_item_indices", ii),
            ("_test_indptr", tp), ("_test_indices", ti),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    # adjacency -----------------------------------------------------------

    def by_user(self, u: int) -> np.ndarray:
        """Sorted training items of user ``u``."""
        return self._user_indices[self._user_indptr[u]:self._user_indptr[u + 1]]

    def by_item(self, v: int) -> np.ndarray:
        """Sorted training users of item ``v``."""
        return self._item_indices[self._item_indptr[v]:self._item_indptr[v + 1]]

    def test_items(self, u: int) -> np.ndarray:
        return self._test_indices[self._test_indptr[u]:self._test_indptr[u + 1]]

    @property
    def user_csr(self) -> tuple[np.ndarray, np.ndarray]:
        return self._user_indptr, self._user_indices

    @property
    def item_csr(self) -> tuple[np.ndarray, np.ndarray]:
        return self._item_indptr, self._item_indices

    def user_counts(self) -> np.ndarray:
        return np.diff(self._user_indptr)

    def item_counts(self) -> np.ndarray:
        return np.diff(self._item_indptr)

    @property
    def num_train(self) -> int:
        return len(self.train)

    def train_pairs(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.train}

    def test_pairs(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.test}

    def active_users(self) -> np.ndarray:
        return np.flatnonzero(self.user_counts())

    def active_items(self) -> np.ndarray:
        return np.flatnonzero(self.item_counts())

    @property
    def user_id_map(self) -> dict[str, int]:
        return {uid: i for i, uid in enumerate(self.user_ids)}

    @property
    def item_id_map(self) -> dict[str, int]:
        return {iid: i for i, iid in enumerate(self.item_ids)}

    def with_train(self, train: np.ndarray) -> "InteractionDataset":
        return InteractionDataset(self.num_users, self.num_items, train, self.test,
                                  self.user_ids, self.item_ids)

    def dense_train(self) -> np.ndarray:
        """``m x n`` 0/1 matrix of training positives (small datasets only)."""
        y = np.zeros((self.num_users, self.num_items))
        y[self.train[:, 0], self.train[:, 1]] = 1.0
        return y


@dataclass(frozen=True)
class ForgetRequest:
    """Training pairs to erase, in dense indices."""

    pairs: np.ndarray
    scenario: Scenario
    forgetting_users: tuple[int, ...]
    seed: int

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs):
            keys = pairs[:, 0] * (int(pairs[:, 1].max()) + 1) + pairs[:, 1]
            pairs = pairs[np.argsort(keys, kind="stable")]
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "forgetting_users", tuple(int(u) for u in self.forgetting_users))
        if self.scenario not in ("privacy", "noise"):
            raise DataError(f"unknown scenario {self.scenario!r}")
        missing = set(int(u) for u in pairs[:, 0]) - set(self.forgetting_users)
        if missing:
            raise DataError(f"request pairs reference non-forgetting users {sorted(missing)[:5]}")

    def __len__(self):
        return len(self.pairs)

    def users(self) -> np.ndarray:
        return np.unique(self.pairs[:, 0])

    def items(self) -> np.ndarray:
        return np.unique(self.pairs[:, 1])


# loading ---------------------------------------------------------------


def _build(raw: Iterable[tuple[str, str]], path) -> InteractionDataset:
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    pairs = []
    for uid, iid in raw:
        u = users.setdefault(uid, len(users))
        v = items.setdefault(iid, len(items))
        pairs.append((u, v))
    if not pairs:
        raise DataError(f"{path}: no interactions found")
    return InteractionDataset(len(users), len(items), np.array(pairs, dtype=np.int64),
                              np.empty((0, 2), dtype=np.int64),
                              tuple(users), tuple(items))


def _read_fields(path, sep: str, comment: str | None):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or (comment and line.lstrip().startswith(comment)):
                continue
            parts = line.split(sep)
            if len(parts) < 2 or not parts[0].strip() or not parts[1].strip():
                raise ParseError(path, lineno, f"expected at least 2 {sep!r}-separated fields, got {line!r}")
            yield parts[0].strip(), parts[1].strip()


def load_movielens(path) -> InteractionDataset:
    """Read a ``UserID::MovieID::Rating::Timestamp`` file as implicit feedback.

    Any rating counts as a positive; repeated pairs collapse to one.
    """
    return _build(_read_fields(path, "::", None), path)


def load_tsv(path) -> InteractionDataset:
    """Read ``user<TAB>item[<TAB>...]`` lines, skipping ``#`` comments."""
    return _build(_read_fields(path, "\t", "#"), path)


def make_planted(num_users: int, num_items: int, rank: int = 4,
                 items_per_user: int = 30, temperature: float = 0.5,
                 seed: int = 0) -> InteractionDataset:
    """Synthetic dataset with low-rank taste structure.

    Each user picks ``items_per_user`` items by Gumbel-top-k over
    ``U V^T / temperature`` with Gaussian factors of the given rank.
    """
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((num_users, rank))
    V = rng.standard_normal((num_items, rank))
    logits = U @ V.T / (np.sqrt(rank) * temperature)
    logits += rng.gumbel(size=logits.shape)
    k = min(items_per_user, num_items)
    top = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    pairs = np.stack([np.repeat(np.arange(num_users), k), top.ravel()], axis=1)
    return InteractionDataset(num_users, num_items, pairs, np.empty((0, 2), dtype=np.int64),
                              tuple(f"u{i}" for i in range(num_users)),
                              tuple(f"i{j}" for j in range(num_items)))


def subsample_users(ds: InteractionDataset, max_users: int) -> InteractionDataset:
    """Keep the first ``max_users`` users and re-index the items they touch."""
    keep = np.concatenate([ds.train, ds.test])
    keep = keep[keep[:, 0] < max_users]
    items, remap = np.unique(keep[:, 1], return_inverse=True)
    pairs = np.stack([keep[:, 0], remap.ravel()], axis=1)
    return InteractionDataset(max_users, len(items), pairs, np.empty((0, 2), dtype=np.int64),
                              ds.user_ids[:max_users], tuple(ds.item_ids[i] for i in items))


# splitting and forget requests -------------------------------------------


def split_per_user(ds: InteractionDataset, train_fraction: float = 0.8,
                   seed: int = 0) -> InteractionDataset:
    """Hold out ``1 - train_fraction`` of each user's interactions for test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(ds.test):
        raise DataError("dataset is already split")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for u in range(ds.num_users):
        items = ds.by_user(u)
        n_i = len(items)
        if n_i == 0:
            continue
        n_train = max(1, round_half_up(train_fraction * n_i))
        if n_i >= 2:
            n_train = min(n_train, n_i - 1)
        perm = rng.permutation(items)
        train.extend((u, int(v)) for v in perm[:n_train])
        test.extend((u, int(v)) for v in perm[n_train:])
    return InteractionDataset(ds.num_users, ds.num_items,
                              np.array(train, dtype=np.int64).reshape(-1, 2),
                              np.array(test, dtype=np.int64).reshape(-1, 2),
                              ds.user_ids, ds.item_ids)


def _pick_users(ds: InteractionDataset, num_users: int, rng) -> np.ndarray:
    eligible = np.flatnonzero(ds.user_counts() >= 2)
    if num_users > len(eligible):
        raise DataError(f"requested {num_users} forgetting users but only "
                        f"{len(eligible)} users have >= 2 training pairs")
    return np.sort(rng.choice(eligible, size=num_users, replace=False))


def gen_forget_privacy(ds: InteractionDataset, num_forgetting_users: int = 64,
                       seed: int = 0) -> ForgetRequest:
    """Each sampled user asks to delete half (rounded half up) of their training pairs."""
    rng = np.random.default_rng(seed)
    users = _pick_users(ds, num_forgetting_users, rng)
    pairs = []
    for u in users:
        items = ds.by_user(u)
        k = round_half_up(len(items) / 2)
        pairs.extend((int(u), int(v)) for v in rng.choice(items, size=k, replace=False))
    return ForgetRequest(np.array(pairs, dtype=np.int64).reshape(-1, 2), "privacy",
                         tuple(int(u) for u in users), seed)


def inject_noise_and_gen_forget(ds: InteractionDataset, num_forgetting_users: int = 64,
                                seed: int = 0) -> tuple[InteractionDataset, ForgetRequest]:
    """Add false positives to sampled users; the request deletes exactly those."""
    rng = np.random.default_rng(seed)
    users = _pick_users(ds, num_forgetting_users, rng)
    all_items = np.arange(ds.num_items)
    pairs = []
    for u in users:
        n_pos = len(ds.by_user(u))
        k = round_half_up(n_pos / 2)
        seen = np.union1d(ds.by_user(u), ds.test_items(u))
        candidates = np.setdiff1d(all_items, seen, assume_unique=True)
        if len(candidates) < k:
            raise DataError(f"user {ds.user_ids[u]!r} has only {len(candidates)} unobserved "
                            f"items, {k} needed for noise injection")
        pairs.extend((int(u), int(v)) for v in rng.choice(candidates, size=k, replace=False))
    injected = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    noisy = ds.with_train(np.concatenate([ds.train, injected]))
    return noisy, ForgetRequest(injected, "noise", tuple(int(u) for u in users), seed)


def apply_forget(ds: InteractionDataset, req: ForgetRequest) -> InteractionDataset:
    """Remaining dataset: training pairs minus the request; test set untouched."""
    if len(req) == 0:
        return ds
    n = ds.num_items
    if (req.pairs.min() < 0 or req.pairs[:, 0].max() >= ds.num_users
            or req.pairs[:, 1].max() >= n):
        raise DataError("forget request index out of range")
    train_keys = _pair_keys(ds.train, n)
    drop = _pair_keys(req.pairs, n)
    absent = ~np.isin(drop, train_keys)
    if absent.any():
        u, v = req.pairs[np.argmax(absent)]
        raise DataError(f"forget pair ({ds.user_ids[u]}, {ds.item_ids[v]}) is not in the training set")
    return ds.with_train(ds.train[~np.isin(train_keys, drop)])


def restore_noise(ds_remaining: InteractionDataset, req: ForgetRequest) -> InteractionDataset:
    """Rebuild ``D_a`` for a noise request by re-adding its pairs to the training set."""
    return ds_remaining.with_train(np.concatenate([ds_remaining.train, req.pairs]))


# forget-request files ----------------------------------------------------


def write_forget_request(req: ForgetRequest, ds: InteractionDataset, path) -> None:
    lines = [f"# scenario={req.scenario}", f"# seed={req.seed}",
             "# users=" + ",".join(ds.user_ids[u] for u in req.forgetting_users)]
    lines += [f"{ds.user_ids[u]}\t{ds.item_ids[v]}" for u, v in req.pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_forget_request(path, ds: InteractionDataset) -> ForgetRequest:
    """Parse a forget file against ``ds``'s id maps.

    The optional ``# users=`` header preserves forgetting users that end up
    with no pairs; otherwise they are inferred from the pairs.
    """
    header: dict[str, str] = {}
    pairs = []
    umap, imap = ds.user_id_map, ds.item_id_map
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if sep:
                    header[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError(path, lineno, "expected user<TAB>item")
            uid, iid = parts[0].strip(), parts[1].strip()
            if uid not in umap or iid not in imap:
                raise ParseError(path, lineno, f"unknown id pair ({uid}, {iid})")
            pairs.append((umap[uid], imap[iid]))
    if "scenario" not in header or "seed" not in header:
        raise DataError(f"{path}: missing '# scenario=' or '# seed=' header")
    try:
        seed = int(header["seed"])
    except ValueError as exc:
        raise DataError(f"{path}: bad seed header {header['seed']!r}") from exc
    pairs_arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    users = set(int(u) for u in pairs_arr[:, 0])
    if header.get("users"):
        for uid in header["users"].split(","):
            if uid not in umap:
                raise DataError(f"{path}: unknown forgetting user {uid!r}")
            users.add(umap[uid])
    return ForgetRequest(pairs_arr, header["scenario"], tuple(sorted(users)), seed)
