"""AdamW training of the full model on user mini-batches.

Used for the Original, Retrain, Retrain* and Warm-Start baselines, and
(through :func:`first_order_substep`) as the inner optimizer of the
first-order ablation of the alternating eraser.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .dataio import InteractionDataset
from .errors import DivergenceError
from .mfmodel import ModelState, gram, loss_efficient
from .subsolver import SubproblemSpec, hvp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size_users: int = 256
    max_epochs: int = 500
    patience: int = 10
    # an epoch counts as an improvement only if it beats the best loss by this relative margin
    min_rel_improvement: float = 1e-4
    seed: int = 0
    substep_iters: int = 50

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0 or self.epsilon <= 0:
            raise ValueError("learning_rate/weight_decay must be >= 0 and epsilon > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.patience < 1 or self.batch_size_users < 1 or self.max_epochs < 0:
            raise ValueError("patience and batch_size_users must be >= 1")
        if self.min_rel_improvement < 0 or self.substep_iters < 0:
            raise ValueError("min_rel_improvement and substep_iters must be >= 0")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    elapsed_seconds: list = field(default_factory=list)
    initial_loss: float = float("nan")
    best_epoch: int = 0

    def append(self, epoch: int, loss: float, elapsed: float) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(loss)
        self.elapsed_seconds.append(elapsed)

    def write_csv(self, path, timing: bool = True) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "elapsed_seconds"])
            w.writerow([0, repr(self.initial_loss), repr(0.0)])
            for e, l, t in zip(self.epochs, self.train_loss, self.elapsed_seconds):
                w.writerow([e, repr(l), repr(t) if timing else ""])


class _Adam:
    """AdamW state for one parameter array, with optional row-sparse updates."""

    def __init__(self, shape, cfg: TrainConfig):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0] if len(shape) > 1 else 1, dtype=np.int64)
        self.cfg = cfg

    def step(self, param: np.ndarray, grad: np.ndarray, rows=None) -> None:
        c = self.cfg
        if rows is None:
            rows = slice(None)
        self.t[rows] += 1
        t = self.t[rows] if param.ndim == 1 else self.t[rows][:, None]
        m = self.m[rows] = c.beta1 * self.m[rows] + (1 - c.beta1) * grad
        v = self.v[rows] = c.beta2 * self.v[rows] + (1 - c.beta2) * grad * grad
        m_hat = m / (1 - c.beta1 ** t)
        v_hat = v / (1 - c.beta2 ** t)
        p = param[rows]
        p -= c.learning_rate * c.weight_decay * p
        p -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.epsilon)
        param[rows] = p


def batch_gradients(model: ModelState, ds: InteractionDataset, users: np.ndarray):
    """Gradients of the loss terms owned by ``users`` w.r.t. ``P[users]``, ``Q`` and ``h``.

    The observed entries and the all-items Gram term of those users are
    included in full; the ``Q``/``h`` ridge terms are scaled by the batch's
    share of users so that one epoch sums to the full-data gradient.
    """
    indptr, indices = ds.user_csr
    w0 = model.w0
    h = model.h
    A = model.Q * h
    Pb = model.P[users]
    counts = indptr[users + 1] - indptr[users]
    rows = np.repeat(np.arange(len(users)), counts)
    cols = np.concatenate([indices[indptr[u]:indptr[u + 1]] for u in users]) if len(users) else \
        np.empty(0, dtype=np.int64)
    yhat = np.einsum("ij,ij->i", Pb[rows], A[cols])
    coef = (1.0 - w0[cols]) * yhat - 1.0
    C = sp.csr_matrix((coef, (rows, cols)), shape=(len(users), model.num_items))

    g_item = gram(A, w0)
    gP = C @ A + Pb @ g_item + model.lam * Pb
    gA = C.T @ Pb + w0[:, None] * (A @ (Pb.T @ Pb))
    share = len(users) / model.num_users
    gQ = gA * h + model.lam * share * model.Q
    gh = np.sum(gA * model.Q, axis=0) + model.lam * share * h
    return np.asarray(gP), np.asarray(gQ), gh


def train(ds: InteractionDataset, config: TrainConfig, init: ModelState,
          update_h: bool = True) -> tuple[ModelState, TrainLog]:
    """Minimize the whole-data loss on ``ds`` starting from ``init`` (copied).

    Stops after ``patience`` epochs without improvement of the full training
    loss, or at ``max_epochs``; returns the best model seen.
    """
    init.check_bound(ds)
    model = init.copy()
    rng = np.random.default_rng(config.seed)
    opt_P = _Adam(model.P.shape, config)
    opt_Q = _Adam(model.Q.shape, config)
    opt_h = _Adam(model.h.shape, config)
    users_all = np.arange(ds.num_users)
    trainlog = TrainLog()
    best = loss_efficient(model, ds)
    trainlog.initial_loss = best
    best_state = model.copy()
    stale = 0
    if not np.isfinite(best):
        raise DivergenceError(0, best)
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(users_all)
        for lo in range(0, len(order), config.batch_size_users):
            batch = np.sort(order[lo:lo + config.batch_size_users])
            gP, gQ, gh = batch_gradients(model, ds, batch)
            opt_P.step(model.P, gP, rows=batch)
            opt_Q.step(model.Q, gQ)
            if update_h:
                opt_h.step(model.h, gh)
            model.bump()
        loss = loss_efficient(model, ds)
        trainlog.append(epoch, loss, time.perf_counter() - start)
        if not np.isfinite(loss):
            raise DivergenceError(epoch, loss)
        # the loss is a sum of weighted squares, so best >= 0
        stale = 0 if loss < best * (1.0 - config.min_rel_improvement) else stale + 1
        if loss < best:
            best, best_state = loss, model.copy()
            trainlog.best_epoch = epoch
        if stale >= config.patience:
            log.debug("early stop at epoch %d (best %d)", epoch, trainlog.best_epoch)
            break
    return best_state, trainlog


def first_order_substep(spec: SubproblemSpec, embedding: np.ndarray, config: TrainConfig,
                        steps: int | None = None) -> np.ndarray:
    """``steps`` AdamW iterations on one block's quadratic loss."""
    steps = config.substep_iters if steps is None else steps
    x = np.array(embedding, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b = spec.rhs
    c = config
    for t in range(1, steps + 1):
        g = hvp(spec, x) - b
        m = c.beta1 * m + (1 - c.beta1) * g
        v = c.beta2 * v + (1 - c.beta2) * g * g
        x -= c.learning_rate * c.weight_decay * x
        x -= c.learning_rate * (m / (1 - c.beta1 ** t)) / (np.sqrt(v / (1 - c.beta2 ** t)) + c.epsilon)
    return x


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
