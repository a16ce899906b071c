"""The pNR layer on the autodiff tape, and finite-difference gradient checks.

Backward pass for a weighted solve ``F = S Pᵀ W H`` with ``S = (Pᵀ W P + λI)⁻¹``
and upstream gradient ``G = ∂loss/∂F``::

    U   = S G                  (per column when W differs per column)
    ∂H  = W ∘ (P U)
    ∂P  = (W ∘ R) Uᵀ − (W ∘ (P U)) Fᵀ,     R = H − P F

plus the term from ``λ = ridge · trace(Pᵀ W P) / d`` depending on P, which is
not negligible once IRLS weights reach ``1 / irls_eps``.

For p=1 the weights of the last IRLS update are held fixed, so the gradient
is that of the frozen weighted-LSE map and not of the whole iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import SplitMix64
from .solver import PnrConfig, RegressionProblem, columnwise_lse, solve_lad_irls, solve_lse
from .tensor import Tape, cholesky_substitute


@dataclass(eq=False)
class PnrNode:
    """Handles and cached by-products of one pNR layer application."""

    F: object
    H_t: object
    H_s: np.ndarray
    P_s: np.ndarray
    F_value: np.ndarray
    weights: np.ndarray  # (n,) shared weights for LSE, (n, D) per-column for LAD
    factor: np.ndarray
    p: int
    ridge: float = 0.0


def _apply_inverse(factor, G):
    if factor.ndim == 2:
        return cholesky_substitute(factor, G)
    return cholesky_substitute(factor, G.T[..., None])[..., 0].T


def _weighted_backward(G, H, P, F, W, factor, ridge):
    U = _apply_inverse(factor, G)
    PU = P @ U
    WPU = W * PU
    R = H - P @ F
    gP = (W * R) @ U.T - WPU @ F.T
    if ridge:
        c = np.sum(U * F, axis=0)
        gP -= (2.0 * ridge / P.shape[1]) * np.sum(W * c, axis=1)[:, None] * P
    return WPU, gP


def lse_backward(G, cached):
    """Exact (∂H_s, ∂P_s) of the closed-form least-squares map."""
    W = cached.weights[:, None]
    return _weighted_backward(G, cached.H_s, cached.P_s, cached.F_value, W, cached.factor, cached.ridge)


def lad_backward_frozen(G, cached):
    """(∂H_s, ∂P_s) of the weighted-LSE map with the final IRLS weights held fixed."""
    if cached.weights is None or cached.weights.ndim != 2:
        raise ContractError("frozen-weight backward needs the per-column IRLS weights")
    return _weighted_backward(
        G, cached.H_s, cached.P_s, cached.F_value, cached.weights, cached.factor, cached.ridge
    )


def frozen_map(H, P, W, ridge):
    """Column-wise weighted LSE with fixed weights ``W`` (n × D)."""
    return columnwise_lse(P, H, W, ridge)[0]


def frozen_map_qr(H, P, W, ridge):
    """Same map as :func:`frozen_map`, solved by orthogonal factorization.

    Each column solves the augmented system ``[√w·P; √λ·I] f = [√w·h; 0]``
    with ``numpy.linalg.lstsq``; it avoids squaring the condition number,
    which matters when IRLS weights span eight orders of magnitude.
    """
    n, d = P.shape
    F = np.empty((d, H.shape[1]))
    for i in range(H.shape[1]):
        sw = np.sqrt(W[:, i])
        lam = ridge * np.sum(W[:, i][:, None] * P * P) / d
        A = np.vstack([sw[:, None] * P, np.sqrt(lam) * np.eye(d)])
        b = np.concatenate([sw * H[:, i], np.zeros(d)])
        F[:, i] = np.linalg.lstsq(A, b, rcond=None)[0]
    return F


def pnr_forward(tape, H_s, P_s, P_t, cfg, row_weights=None, _corrupt=False):
    """Estimate F from (H_s, P_s) and predict H_t = P_t F.

    Returns a :class:`PnrNode` whose ``F`` and ``H_t`` attributes are tape nodes.
    """
    prob = RegressionProblem(H_s.value, P_s.value, row_weights)
    if cfg.p == 1:
        sol = solve_lad_irls(prob, cfg)
        weights = sol.final_weights
    else:
        sol = solve_lse(prob, cfg)
        weights = prob.weights()
    cached = PnrNode(None, None, prob.H, prob.P, sol.F, weights, sol.factor, cfg.p, cfg.ridge)
    rule = lad_backward_frozen if cfg.p == 1 else lse_backward

    def backward_rule(G):
        gH, gP = rule(G, cached)
        if _corrupt:
            gH = 1.5 * gH
        return gH, gP

    cached.F = tape.custom(sol.F, (H_s, P_s), backward_rule, kind=f"pnr_p{cfg.p}")
    cached.H_t = tape.matmul(P_t, cached.F)
    return cached


# ---------------------------------------------------------------------------
# gradient checks


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return bool(self.max_rel_err <= self.tol)

    def line(self):
        return f"{self.name:<28s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} {'PASS' if self.passed else 'FAIL'}"


def tape_gradients(build, inputs):
    """Loss value and tape gradients of ``build(tape, *leaves)`` w.r.t. each input."""
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    loss = build(tape, *leaves)
    if loss.value.shape != (1, 1):
        raise ContractError(f"gradcheck needs a scalar loss, got shape {loss.value.shape}")
    grads = tape.backward(loss)
    return float(loss.value[0, 0]), [grads[leaf.id] for leaf in leaves]


def numeric_gradients(fn, inputs, step=1e-5):
    """Central finite differences of the scalar function ``fn(*inputs)``."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out = []
    for x in inputs:
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            hi = fn(*inputs)
            x[idx] = orig - step
            lo = fn(*inputs)
            x[idx] = orig
            g[idx] = (hi - lo) / (2.0 * step)
        out.append(g)
    return out


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradcheck(build, inputs, step=1e-5, tol=1e-6, numeric=None, name="gradcheck"):
    """Compare tape gradients of ``build`` with central differences.

    ``numeric`` optionally supplies the scalar function to difference (for
    checking a backward rule against a surrogate map); by default the loss
    built by ``build`` on a fresh tape is used.
    """
    _, analytic = tape_gradients(build, inputs)
    if numeric is None:

        def numeric(*xs):
            tape = Tape()
            return float(build(tape, *[tape.leaf(x) for x in xs]).value[0, 0])

    return GradcheckReport(name, max_relative_error(analytic, numeric_gradients(numeric, inputs, step)), tol)


def _random_instance(rng, n_max=16, d_max=4, D_max=4):
    d = 1 + rng.integers(d_max)
    n = max(d + 2, 2 + rng.integers(n_max - 1))
    D = 1 + rng.integers(D_max)
    m = 1 + rng.integers(4)
    H = rng.uniform((n, D), -1.0, 1.0)
    P = rng.uniform((n, d), -1.0, 1.0)
    P_t = rng.uniform((m, d), -1.0, 1.0)
    M = rng.uniform((m, D), -1.0, 1.0)
    return H, P, P_t, M


def check_pnr_lse(rng, ridge=1e-9, corrupt=False, name="pnr_p2"):
    H, P, P_t, M = _random_instance(rng)
    cfg = PnrConfig(p=2, ridge=ridge)
    Mc = M.copy()

    def build(tape, h, p, pt):
        node = pnr_forward(tape, h, p, pt, cfg, _corrupt=corrupt)
        return tape.sum(tape.mul(node.H_t, tape.const(Mc)))

    return gradcheck(build, [H, P, P_t], tol=1e-5, name=name)


def check_pnr_lad_frozen(rng, ridge=1e-9, corrupt=False, name="pnr_p1_frozen"):
    H, P, P_t, M = _random_instance(rng)
    cfg = PnrConfig(p=1, ridge=ridge)
    captured = {}

    def build(tape, h, p, pt):
        node = pnr_forward(tape, h, p, pt, cfg, _corrupt=corrupt)
        captured["W"] = node.weights
        return tape.sum(tape.mul(node.H_t, tape.const(M)))

    _, analytic = tape_gradients(build, [H, P, P_t])
    W = captured["W"]

    def surrogate(h, p, pt):
        return float(np.sum((pt @ frozen_map_qr(h, p, W, ridge)) * M))

    err = max_relative_error(analytic, numeric_gradients(surrogate, [H, P, P_t]))
    return GradcheckReport(name, err, 1e-4)


def check_builtin_ops(rng, name="tape_ops"):
    A = rng.uniform((3, 4), -1.0, 1.0)
    B = rng.uniform((4, 2), -1.0, 1.0)
    C = rng.uniform((3, 2), -1.0, 1.0)
    bias = rng.uniform((1, 2), -1.0, 1.0)

    def build(tape, a, b, c, bb):
        x = tape.add_row(tape.matmul(a, b), bb)
        y = tape.add(tape.tanh(x), tape.mul(tape.sigmoid(c), tape.softplus(x)))
        z = tape.sub(tape.relu(y), tape.scale(tape.abs(c), 0.3))
        return tape.mean(tape.mul(z, z))

    return gradcheck(build, [A, B, C, bias], tol=1e-6, name=name)


def gradcheck_suite(seed=0, trials=20, p=(1, 2), corrupt=False):
    """All layer gradient checks; one report per (check, trial)."""
    rng = SplitMix64(seed)
    ps = (p,) if isinstance(p, int) else tuple(p)
    reports = []
    for t in range(trials):
        reports.append(check_builtin_ops(rng, name=f"tape_ops[{t}]"))
        if 2 in ps:
            reports.append(check_pnr_lse(rng, corrupt=corrupt, name=f"pnr_p2[{t}]"))
        if 1 in ps:
            reports.append(check_pnr_lad_frozen(rng, corrupt=corrupt, name=f"pnr_p1_frozen[{t}]"))
    return reports
