"""Second-order solvers for a single embedding block.

With the opposite side and ``h`` fixed, the loss restricted to one user
(or one item) is the strictly convex quadratic

    f(x) = 1/2 x^T H x - b^T x + const,
    H = sum_obs w_i a_i a_i^T + G + lam I,      b = sum_obs a_i,

where ``a_i`` are the design vectors of the block's observed entries,
``w_i = 1 - w0`` their extra weight and ``G`` the shared Gram matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import SolverError

PSD_TOL = 1e-8


def build_gram(fixed_side: np.ndarray, h: np.ndarray, weights) -> np.ndarray:
    """``sum_r w_r (h * row_r)(h * row_r)^T`` over all rows of ``fixed_side``."""
    design = fixed_side * h
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (design.shape[0],))
    g = design.T @ (weights[:, None] * design)
    return 0.5 * (g + g.T)


def check_psd(gram: np.ndarray, tol: float = PSD_TOL) -> None:
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ValueError(f"Gram matrix must be square, got {gram.shape}")
    scale = max(1.0, float(np.abs(gram).max(initial=0.0)))
    if not np.allclose(gram, gram.T, rtol=0.0, atol=tol * scale):
        raise ValueError("Gram matrix is not symmetric")
    if gram.size and np.linalg.eigvalsh(gram)[0] < -tol * scale:
        raise ValueError("Gram matrix is not positive semidefinite")


@dataclass(frozen=True)
class SubproblemSpec:
    """Ridge-regression data of one block.

    ``design`` is ``k x d`` (one row per observed entry), ``obs_weights`` the
    ``k`` extra weights ``1 - w0``. Set ``validate=False`` when the Gram
    matrix has already been checked for the whole phase.
    """

    design: np.ndarray
    obs_weights: np.ndarray
    gram: np.ndarray
    lam: float
    block: object = None
    validate: bool = True

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be strictly positive")
        if self.validate:
            d = self.gram.shape[0]
            if self.design.ndim != 2 or self.design.shape[1] != d:
                raise ValueError(f"design shape {self.design.shape} does not match Gram {self.gram.shape}")
            if self.obs_weights.shape != (self.design.shape[0],):
                raise ValueError("one observation weight per design row required")
            check_psd(self.gram)

    @property
    def dim(self) -> int:
        return self.gram.shape[0]

    @property
    def rhs(self) -> np.ndarray:
        return self.design.sum(axis=0)

    def hessian(self) -> np.ndarray:
        a = self.design
        H = a.T @ (self.obs_weights[:, None] * a) + self.gram
        H[np.diag_indices_from(H)] += self.lam
        return 0.5 * (H + H.T)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return hvp(self, x) - self.rhs

    def loss(self, x: np.ndarray) -> float:
        """Block loss up to an additive constant."""
        return float(0.5 * x @ hvp(self, x) - self.rhs @ x)

    def tolerance(self) -> float:
        return 1e-8 * (1.0 + float(np.linalg.norm(self.rhs)))


def hvp(spec: SubproblemSpec, x: np.ndarray) -> np.ndarray:
    """``H x`` without forming ``H``."""
    a = spec.design
    return (spec.obs_weights * (a @ x)) @ a + spec.gram @ x + spec.lam * x


def ah_newton_solve(spec: SubproblemSpec) -> np.ndarray:
    """Exact block minimizer ``H^{-1} b`` by Cholesky.

    One retry adds ``1e-10 trace(H) / d`` to the diagonal before giving up.
    """
    H = spec.hessian()
    b = spec.rhs
    try:
        return cho_solve(cho_factor(H, lower=True, check_finite=False), b, check_finite=False)
    except LinAlgError:
        pass
    H[np.diag_indices_from(H)] += 1e-10 * np.trace(H) / spec.dim
    try:
        return cho_solve(cho_factor(H, lower=True, check_finite=False), b, check_finite=False)
    except LinAlgError as exc:
        raise SolverError("Hessian is not positive definite", block=spec.block) from exc


@dataclass(frozen=True)
class HFConfig:
    cg_tol: float = 1e-10
    cg_max_iters: int | None = None  # None means 2 d
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    armijo: float = 1e-4
    shrink: float = 0.5
    max_trials: int = 20
    max_outer: int = 5

    def __post_init__(self):
        for name in ("cg_tol", "damping_init", "damping_up", "damping_down", "armijo",
                     "max_trials", "max_outer"):
            if getattr(self, name) <= 0:
                raise ValueError(f"HFConfig.{name} must be positive")
        if self.cg_max_iters is not None and self.cg_max_iters <= 0:
            raise ValueError("HFConfig.cg_max_iters must be positive")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("HFConfig.shrink must lie in (0, 1)")


class HFResult(NamedTuple):
    x: np.ndarray
    stalled: bool
    outer_iters: int
    losses: tuple


def conjugate_gradient(matvec, b: np.ndarray, tol: float, max_iters: int) -> np.ndarray:
    """Solve ``A x = b`` for SPD ``A`` from ``x = 0``; ``tol`` is relative to ``||b||``."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    stop = (tol * np.linalg.norm(b)) ** 2
    for _ in range(max_iters):
        if rr <= stop:
            break
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def hf_newton_solve(spec: SubproblemSpec, warm: np.ndarray,
                    cfg: HFConfig = HFConfig()) -> HFResult:
    """Hessian-free Newton with CG, Armijo backtracking and LM damping."""
    x = np.array(warm, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite warm start", block=spec.block)
    mu = cfg.damping_init
    max_cg = cfg.cg_max_iters or 2 * spec.dim
    tol = spec.tolerance()
    f = spec.loss(x)
    losses = [f]
    outer = 0
    for outer in range(cfg.max_outer):
        g = spec.gradient(x)
        if np.linalg.norm(g) < tol:
            return HFResult(x, False, outer, tuple(losses))
        step = conjugate_gradient(lambda v: hvp(spec, v) + mu * v, -g, cfg.cg_tol, max_cg)
        slope = g @ step
        if slope >= 0:
            step, slope = -g, -(g @ g)
        predicted = slope + 0.5 * step @ hvp(spec, step)
        t = 1.0
        for _ in range(cfg.max_trials):
            f_new = spec.loss(x + t * step)
            if f_new <= f + cfg.armijo * t * slope:
                break
            t *= cfg.shrink
        else:
            return HFResult(x, True, outer, tuple(losses))
        actual = f_new - f
        model_change = t * slope + 0.5 * t * t * (predicted - slope)
        rho = actual / model_change if model_change < 0 else 0.0
        if rho > 0.75:
            mu *= cfg.damping_down
        elif rho < 0.25:
            mu *= cfg.damping_up
        x = x + t * step
        f = f_new
        losses.append(f)
    else:
        outer = cfg.max_outer
    stalled = np.linalg.norm(spec.gradient(x)) >= tol
    return HFResult(x, bool(stalled), outer, tuple(losses))
