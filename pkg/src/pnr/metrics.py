"""SSIM, recovery error and aggregate evaluation of trained models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import derive_seed


@dataclass(frozen=True)
class SsimParams:
    window: int = 8
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def C1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def C2(self):
        return (self.k2 * self.dynamic_range) ** 2


def _windows(x, w):
    h, wd, c = x.shape
    nh, nw = h // w, wd // w
    blocks = x[: nh * w, : nw * w].reshape(nh, w, nw, w, c).transpose(0, 2, 4, 1, 3)
    return blocks.reshape(-1, w * w)


def ssim(a, b, params=SsimParams()):
    """Mean SSIM over non-overlapping uniform windows and channels.

    Uses population (1/N) variances and covariance inside each window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    w = params.window
    if a.ndim != 3 or a.shape[0] < w or a.shape[1] < w:
        raise DimensionError(f"ssim: image {a.shape} smaller than the {w}x{w} window")
    xa, xb = _windows(a, w), _windows(b, w)
    mu_a, mu_b = xa.mean(axis=1), xb.mean(axis=1)
    da, db = xa - mu_a[:, None], xb - mu_b[:, None]
    var_a, var_b = np.mean(da * da, axis=1), np.mean(db * db, axis=1)
    cov = np.mean(da * db, axis=1)
    C1, C2 = params.C1, params.C2
    num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def recovery_error(F_hat, F_star):
    F_hat = np.asarray(F_hat, dtype=np.float64)
    F_star = np.asarray(F_star, dtype=np.float64)
    if F_hat.shape != F_star.shape:
        raise DimensionError(f"recovery_error: {F_hat.shape} vs {F_star.shape}")
    return float(np.linalg.norm(F_hat - F_star))


def multishot_cases(data, M, max_M=None, noise=0.0, seed=0):
    """Deterministic (shots, target) cases on the test split.

    For target view k of an identity with views v_0..v_{n-1}, the shots are
    v_{k+1}, ..., v_{k+M} (indices mod n).  Only identities with at least
    ``max_M + 1`` views are used, so every M sees the same targets.
    """
    from .model import example_from_views

    max_M = M if max_M is None else max_M
    cases = []
    for ident, views in sorted(data.by_identity("test").items()):
        n = len(views)
        if n < max_M + 1:
            continue
        for k in range(n):
            shots = [views[(k + j) % n] for j in range(1, M + 1)]
            cases.append(example_from_views(shots, views[k], noise, derive_seed(seed, ident, k)))
    return cases


@dataclass
class EvalReport:
    rows: list  # (M, cases, mean L1, mean SSIM, median SSIM)

    def as_dict(self):
        out = {}
        for M, n, l1, s_mean, s_med in self.rows:
            out[f"M{M}.cases"] = n
            out[f"M{M}.mean_l1"] = l1
            out[f"M{M}.mean_ssim"] = s_mean
            out[f"M{M}.median_ssim"] = s_med
        first = self.rows[0]
        out["mean_l1"] = first[2]
        out["mean_ssim"] = first[3]
        return out

    def text(self):
        lines = ["M   cases   mean_L1   mean_SSIM   median_SSIM"]
        for M, n, l1, s_mean, s_med in self.rows:
            lines.append(f"{M:<3d} {n:<7d} {l1:.6f}  {s_mean:.6f}    {s_med:.6f}")
        lines.append("")
        lines += [f"{k} = {v!r}" for k, v in self.as_dict().items()]
        return "\n".join(lines) + "\n"


def evaluate(params, cfg, data, Ms=(1,), noise=None, generator=None):
    """Mean L1 and SSIM of generated vs. target images for each shot count M.

    ``generator(example) -> image`` defaults to the trained model.
    """
    from .model import from_patches, infer

    noise = cfg.eval_noise if noise is None else noise
    if generator is None:
        generator = lambda ex: infer(params, cfg, ex)
    rows = []
    for M in Ms:
        cases = multishot_cases(data, M, max(Ms), noise, cfg.seed)
        if not cases:
            raise ConfigError(f"no test identity has {max(Ms) + 1} views")
        l1s, ssims = [], []
        for ex in cases:
            out = generator(ex)
            target = from_patches(ex.target_image)
            l1s.append(float(np.mean(np.abs(out - target))))
            ssims.append(ssim(out, target))
        rows.append((M, len(cases), float(np.mean(l1s)), float(np.mean(ssims)), float(np.median(ssims))))
    return EvalReport(rows)


def evaluate_checkpoint(path, cfg, data, Ms=(1,), noise=None):
    from .model import load_checkpoint

    return evaluate(load_checkpoint(path, cfg).params, cfg, data, Ms, noise)
