"""Alternating unlearning: warm start, one targeted pass, then full passes.

Each pass solves the user blocks with ``Q`` fixed, then the item blocks
with the freshly updated ``P`` fixed. Blocks within a phase share one
frozen cross side and one Gram matrix, so they are solved independently
(optionally on a thread pool) and write disjoint rows.
"""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .dataio import ForgetRequest, InteractionDataset, apply_forget
from .errors import SolverError
from .firstorder import TrainConfig, first_order_substep
from .mfmodel import ModelState, gram, loss_efficient
from .subsolver import HFConfig, SubproblemSpec, ah_newton_solve, check_psd, hf_newton_solve

Solver = Literal["ah_newton", "hf_newton", "first_order"]
SOLVERS = ("ah_newton", "hf_newton", "first_order")


@dataclass(frozen=True)
class UnlearnConfig:
    inner_solver: Solver = "ah_newton"
    max_full_passes: int = 3
    rel_loss_tol: float = 1e-4
    hf: HFConfig = field(default_factory=HFConfig)
    first_order: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-2))
    parallel_workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.inner_solver not in SOLVERS:
            raise ValueError(f"unknown inner solver {self.inner_solver!r}")
        if self.max_full_passes < 0:
            raise ValueError("max_full_passes must be >= 0")
        if self.rel_loss_tol <= 0:
            raise ValueError("rel_loss_tol must be > 0")
        if self.parallel_workers < 1:
            raise ValueError("parallel_workers must be >= 1")


@dataclass
class UnlearnLog:
    rows: list = field(default_factory=list)
    stalled_blocks: int = 0

    def add(self, pass_index, phase, blocks, loss, elapsed):
        self.rows.append((pass_index, phase, blocks, loss, elapsed))

    @property
    def losses(self) -> list[float]:
        """Loss after each completed pass (targeted pass first)."""
        return [r[3] for r in self.rows if r[1] == "item"]

    def write_csv(self, path, timing: bool = True) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["pass", "phase", "blocks_solved", "loss_after", "elapsed_seconds"])
            for p, ph, b, loss, t in self.rows:
                w.writerow([p, ph, b, repr(loss), repr(t) if timing else ""])


def _solve(spec: SubproblemSpec, warm: np.ndarray, cfg: UnlearnConfig) -> tuple[np.ndarray, bool]:
    if cfg.inner_solver == "ah_newton":
        return ah_newton_solve(spec), False
    if cfg.inner_solver == "hf_newton":
        res = hf_newton_solve(spec, warm, cfg.hf)
        return res.x, res.stalled
    return first_order_substep(spec, warm, cfg.first_order), False


def _solve_phase(blocks: np.ndarray, indptr: np.ndarray, indices: np.ndarray,
                 target: np.ndarray, design_side: np.ndarray, obs_weight, gram_for,
                 lam: float, kind: str, cfg: UnlearnConfig) -> int:
    """Solve every block in ``blocks`` and write the rows of ``target`` in place."""

    def run(chunk):
        stalled = 0
        for b in chunk:
            nbrs = indices[indptr[b]:indptr[b + 1]]
            spec = SubproblemSpec(design_side[nbrs], obs_weight(b, nbrs), gram_for(b), lam,
                                  block=(kind, int(b)), validate=False)
            try:
                x, was_stalled = _solve(spec, target[b], cfg)
            except SolverError as exc:
                raise SolverError(exc.detail, block=(kind, int(b))) from exc
            target[b] = x
            stalled += was_stalled
        return stalled

    if len(blocks) == 0:
        return 0
    workers = min(cfg.parallel_workers, len(blocks))
    if workers == 1:
        return run(blocks)
    chunks = np.array_split(blocks, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return sum(pool.map(run, chunks))


def one_erase_pass(users, items, ds_r: InteractionDataset, model: ModelState,
                   cfg: UnlearnConfig, log: UnlearnLog | None = None,
                   pass_index: int = 0, clock_start: float | None = None) -> ModelState:
    """Minimize the loss on ``ds_r`` over the listed user rows, then item rows.

    ``model`` is updated in place (``h`` untouched) and returned.
    """
    users = np.asarray(sorted(int(u) for u in users), dtype=np.int64)
    items = np.asarray(sorted(int(v) for v in items), dtype=np.int64)
    w0 = model.w0
    h = model.h
    clock_start = time.perf_counter() if clock_start is None else clock_start
    stalled = 0

    # user phase: Q fixed
    A = model.Q * h
    G_Q = gram(A, w0)
    check_psd(G_Q)
    up, ui = ds_r.user_csr
    stalled += _solve_phase(users, up, ui, model.P, A, lambda u, nbrs: 1.0 - w0[nbrs],
                            lambda u: G_Q, model.lam, "user", cfg)
    model.bump()
    if log is not None:
        log.add(pass_index, "user", len(users), loss_efficient(model, ds_r),
                time.perf_counter() - clock_start)

    # item phase: the updated P fixed
    C = model.P * h
    G_P = gram(C)
    check_psd(G_P)
    ip, ii = ds_r.item_csr
    stalled += _solve_phase(items, ip, ii, model.Q, C,
                            lambda v, nbrs: np.full(len(nbrs), 1.0 - w0[v]),
                            lambda v: w0[v] * G_P, model.lam, "item", cfg)
    model.bump()
    if log is not None:
        log.add(pass_index, "item", len(items), loss_efficient(model, ds_r),
                time.perf_counter() - clock_start)
        log.stalled_blocks += stalled
    return model


def stopping_check(loss_history, cfg: UnlearnConfig, eps: float = 1e-12) -> bool:
    """Whether to stop the full passes.

    ``loss_history[0]`` is the loss after the targeted pass and each later
    entry the loss after one full pass.
    """
    full_passes = len(loss_history) - 1
    if full_passes >= cfg.max_full_passes:
        return True
    if full_passes < 1:
        return False
    prev, curr = loss_history[-2], loss_history[-1]
    return (prev - curr) / max(abs(prev), eps) < cfg.rel_loss_tol


def alt_erase(ds_a: InteractionDataset, req: ForgetRequest, model_a: ModelState,
              cfg: UnlearnConfig = UnlearnConfig()) -> tuple[ModelState, UnlearnLog]:
    """Unlearn ``req`` from ``model_a``; returns a new model and the pass log."""
    model_a.check_bound(ds_a)
    ds_r = apply_forget(ds_a, req)
    model = model_a.copy()
    log = UnlearnLog()
    start = time.perf_counter()
    log.add(0, "init", 0, loss_efficient(model, ds_r), 0.0)

    history = []
    try:
        one_erase_pass(req.users(), req.items(), ds_r, model, cfg, log, 0, start)
    except SolverError as exc:
        raise SolverError(exc.detail, block=exc.block, pass_index=0) from exc
    history.append(log.losses[-1])

    users_r, items_r = ds_r.active_users(), ds_r.active_items()
    pass_index = 0
    while not stopping_check(history, cfg):
        pass_index += 1
        try:
            one_erase_pass(users_r, items_r, ds_r, model, cfg, log, pass_index, start)
        except SolverError as exc:
            raise SolverError(exc.detail, block=exc.block, pass_index=pass_index) from exc
        history.append(log.losses[-1])
    return model, log
