"""p-norm regression ``H ≈ P F`` for p in {1, 2}.

All solves go through the normal equations ``(Pᵀ W P + λ I) F = Pᵀ W H`` with a
Cholesky factorization.  ``λ = ridge * trace(Pᵀ W P) / d`` so that ``ridge`` is
relative to the scale of the design.  LAD (p=1) runs a fixed number of
iteratively reweighted least-squares updates, one weight vector per output
column, starting from the least-squares solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import ContractError, DimensionError, SingularMatrixError
from .rng import SplitMix64
from .tensor import as_matrix, cholesky_factor, cholesky_substitute, matmul

ORACLE_MAX_ROWS = 64
ORACLE_MAX_WIDTH = 8


@dataclass(frozen=True)
class PnrConfig:
    p: int = 2
    irls_iters: int = 5
    irls_eps: float = 1e-8
    ridge: float = 1e-9
    d: int | None = None
    D: int | None = None

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ContractError(f"p must be 1 or 2, got {self.p}")
        if self.irls_iters < 1:
            raise ContractError("irls_iters must be >= 1")
        if not self.irls_eps > 0:
            raise ContractError("irls_eps must be > 0")
        if not self.ridge >= 0:
            raise ContractError("ridge must be >= 0")


@dataclass(frozen=True)
class RegressionProblem:
    H: np.ndarray
    P: np.ndarray
    row_weights: np.ndarray | None = None

    def __post_init__(self):
        H = as_matrix(self.H, "H")
        P = as_matrix(self.P, "P")
        if H.shape[0] != P.shape[0]:
            raise DimensionError(f"H {H.shape} and P {P.shape} must have the same number of rows")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "P", P)
        if self.row_weights is not None:
            w = np.asarray(self.row_weights, dtype=np.float64).reshape(-1)
            if w.shape != (H.shape[0],):
                raise DimensionError(f"row_weights has {w.size} entries for {H.shape[0]} rows")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ContractError("row_weights must be finite and non-negative")
            object.__setattr__(self, "row_weights", w)

    @property
    def n(self):
        return self.H.shape[0]

    @property
    def d(self):
        return self.P.shape[1]

    @property
    def D(self):
        return self.H.shape[1]

    def weights(self):
        return np.ones(self.n) if self.row_weights is None else self.row_weights


@dataclass
class RegressionSolution:
    F: np.ndarray
    objective: float
    iterations_used: int
    final_weights: np.ndarray | None = None
    # Cholesky factor(s) of the last normal-equations matrix: (d, d) for LSE,
    # (D, d, d) for LAD.  Used by the differentiable layer.
    factor: np.ndarray | None = field(default=None, repr=False)


def _ridge_lambda(A, ridge):
    """Per-matrix ridge strength for a stack of normal matrices ``A``."""
    d = A.shape[-1]
    return ridge * np.trace(A, axis1=-2, axis2=-1) / d


def _factor(A, ridge):
    lam = _ridge_lambda(A, ridge)
    A = A + lam[..., None, None] * np.eye(A.shape[-1])
    try:
        return cholesky_factor(A)
    except SingularMatrixError as exc:
        hint = " (use ridge > 0)" if ridge == 0 else " even with ridge; increase ridge"
        raise SingularMatrixError(f"normal equations are singular: {exc}{hint}", pivot=exc.pivot) from exc


def weighted_lse(P, H, w, ridge):
    """Shared-weight solve; returns (F, cholesky factor)."""
    Pw = P * w[:, None]
    L = _factor(P.T @ Pw, ridge)
    return cholesky_substitute(L, Pw.T @ H), L


def columnwise_lse(P, H, W, ridge):
    """One weighted solve per column ``i`` of ``H`` with weights ``W[:, i]``.

    Returns (F, factors) with factors shaped (D, d, d).
    """
    A = np.einsum("ni,nk,nl->ikl", W, P, P)
    B = np.einsum("ni,nk,ni->ik", W, P, H)[..., None]
    L = _factor(A, ridge)
    return cholesky_substitute(L, B)[..., 0].T, L


def objective(prob, F, p):
    """Entrywise weighted p-norm objective of the residual ``H - P F``."""
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (prob.d, prob.D):
        raise DimensionError(f"F has shape {F.shape}, expected {(prob.d, prob.D)}")
    R = prob.H - matmul(prob.P, F)
    w = prob.weights()[:, None]
    if p == 1:
        return float(np.sum(w * np.abs(R)))
    if p == 2:
        return float(np.sum(w * R * R))
    raise ContractError(f"p must be 1 or 2, got {p}")


def solve_lse(prob, cfg=PnrConfig()):
    F, L = weighted_lse(prob.P, prob.H, prob.weights(), cfg.ridge)
    return RegressionSolution(F, objective(prob, F, 2), 0, None, L)


def irls_weights(prob, F, eps):
    """Per-column IRLS weights ``row_weight / max(|residual|, eps)``, shape (n, D)."""
    R = prob.H - prob.P @ F
    return prob.weights()[:, None] / np.maximum(np.abs(R), eps)


def solve_lad_irls(prob, cfg=PnrConfig(p=1)):
    if cfg.irls_iters < 1:
        raise ContractError("irls_iters must be >= 1")
    F = solve_lse(prob, cfg).F
    W = L = None
    for _ in range(cfg.irls_iters):
        W = irls_weights(prob, F, cfg.irls_eps)
        F, L = columnwise_lse(prob.P, prob.H, W, cfg.ridge)
    return RegressionSolution(F, objective(prob, F, 1), cfg.irls_iters, W, L)


def solve(prob, cfg):
    return solve_lad_irls(prob, cfg) if cfg.p == 1 else solve_lse(prob, cfg)


def solve_masked(prob, mask, cfg):
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    if mask.shape != (prob.n,):
        raise DimensionError(f"mask has {mask.size} entries for {prob.n} rows")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask entries must be 0 or 1")
    masked = RegressionProblem(prob.H, prob.P, prob.weights() * mask)
    return solve(masked, cfg)


def sample_mask(n, keep_prob, seed):
    if not 0.0 <= keep_prob <= 1.0:
        raise ContractError(f"keep_prob must lie in [0, 1], got {keep_prob}")
    return SplitMix64(seed).bernoulli(n, keep_prob)


def stack_shots(shots):
    """Stack M (H, P) shots into one regression problem (row order = shot order)."""
    shots = list(shots)
    if not shots:
        raise ContractError("stack_shots needs at least one shot")
    Hs = [as_matrix(h, "H") for h, _ in shots]
    Ps = [as_matrix(p, "P") for _, p in shots]
    if len({h.shape[1] for h in Hs}) != 1 or len({p.shape[1] for p in Ps}) != 1:
        raise DimensionError(
            f"shots disagree on widths: H {[h.shape for h in Hs]}, P {[p.shape for p in Ps]}"
        )
    return RegressionProblem(np.vstack(Hs), np.vstack(Ps))


def predict_target(F, P_t):
    return matmul(P_t, F)


def lad_oracle(prob):
    """Exact LAD by linear programming, one column at a time (test support).

    For each column h: minimize Σ w_j t_j subject to -t <= h - P f <= t.
    """
    n, d = prob.P.shape
    if n > ORACLE_MAX_ROWS or d > ORACLE_MAX_WIDTH:
        raise ContractError(
            f"lad_oracle handles n <= {ORACLE_MAX_ROWS}, d <= {ORACLE_MAX_WIDTH}; got n={n}, d={d}"
        )
    w = prob.weights()
    P = prob.P
    eye = np.eye(n)
    A_ub = np.block([[-P, -eye], [P, -eye]])
    c = np.concatenate([np.zeros(d), w])
    bounds = [(None, None)] * d + [(0, None)] * n
    F = np.empty((d, prob.D))
    for i in range(prob.D):
        h = prob.H[:, i]
        res = linprog(c, A_ub=A_ub, b_ub=np.concatenate([-h, h]), bounds=bounds, method="highs")
        if res.status != 0:
            raise ArithmeticError(f"LP oracle failed on column {i}: {res.message}")
        F[:, i] = res.x[:d]
    return RegressionSolution(F, objective(prob, F, 1), 0)
