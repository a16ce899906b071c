"""Seeded synthetic data: regression instances with known F* and toy pose-transfer images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import SplitMix64, derive_seed
from .solver import RegressionProblem

IMAGE_SIZE = 16
CHANNELS = 3
JOINTS = 6  # head, neck, left hip, right hip, left foot, right foot
HEATMAP_SIGMA = 1.5
BACKGROUND = 0.0


@dataclass(frozen=True)
class SynthSpec:
    n: int = 32
    d: int = 4
    D: int = 3
    noise_sigma: float = 0.01
    outlier_frac: float = 0.2
    outlier_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.d, self.D) < 1:
            raise ContractError("n, d, D must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        if not 0.0 <= self.outlier_frac < 1.0:
            raise ContractError("outlier_frac must lie in [0, 1)")
        if not self.outlier_scale > 0:
            raise ContractError("outlier_scale must be > 0")

    @property
    def outlier_count(self):
        return int(round(self.outlier_frac * self.n))


def gen_regression_instance(spec):
    """Return (problem, F_star, outlier_rows).

    Draw order from one SplitMix64 stream: P (n*d uniforms in [-1, 1]), F*
    (d*D uniforms in [-1, 1]), noise (n*D normals), outlier row subset, outlier
    perturbations (k*D normals).
    """
    rng = SplitMix64(spec.seed)
    n, d, D = spec.n, spec.d, spec.D
    P = rng.uniform((n, d), -1.0, 1.0)
    F_star = rng.uniform((d, D), -1.0, 1.0)
    H = P @ F_star + rng.normal((n, D), scale=spec.noise_sigma)
    rows = rng.choose(n, spec.outlier_count)
    if rows.size:
        H[rows] += rng.normal((rows.size, D), scale=spec.outlier_scale)
    return RegressionProblem(H, P), F_star, rows


# ---------------------------------------------------------------------------
# toy pose-transfer images


@dataclass(frozen=True, eq=False)
class ToyView:
    """One rendered (image, pose map) pair of an identity."""

    identity: int
    keypoints: np.ndarray  # (JOINTS, 2) integer (row, col)
    image: np.ndarray  # (16, 16, 3) in [0, 1]
    pose_map: np.ndarray  # (16, 16, JOINTS) in (0, 1]


@dataclass(frozen=True, eq=False)
class ToySample:
    """A (source, target) pair sharing one identity."""

    source: ToyView
    target: ToyView

    @property
    def identity(self):
        return self.source.identity


@dataclass(eq=False)
class ToyDataset:
    train: list
    test: list
    palettes: dict

    def by_identity(self, split):
        groups = {}
        for v in getattr(self, split):
            groups.setdefault(v.identity, []).append(v)
        return groups

    def pairs(self, split):
        out = []
        for views in self.by_identity(split).values():
            for a in views:
                for b in views:
                    if a is not b:
                        out.append(ToySample(a, b))
        return out


def render_pose_heatmap(keypoints, grid=IMAGE_SIZE, sigma=HEATMAP_SIGMA):
    """Gaussian heatmap per keypoint; returns (grid, grid, J)."""
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    if np.any(kp < 0) or np.any(kp > grid - 1):
        raise ContractError(f"keypoints must lie inside the {grid}x{grid} image, got {kp.tolist()}")
    rr, cc = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    dist2 = (rr[..., None] - kp[:, 0]) ** 2 + (cc[..., None] - kp[:, 1]) ** 2
    return np.exp(-dist2 / (2.0 * sigma * sigma))


def sample_pose(rng):
    """Random integer keypoints (row, col) of a standing figure."""
    top = rng.integers(3)  # head row in {1..3}
    height = 11 + rng.integers(3)
    cx = 5 + rng.integers(6)
    lean = rng.integers(3) - 1
    half_hip = 1 + rng.integers(2)
    spread = rng.integers(3)
    head = (top + 1, cx)
    neck = (top + 3, cx + lean)
    hip_row = top + 1 + height // 2 + 1
    foot_row = min(top + 1 + height, IMAGE_SIZE - 1)
    l_hip = (hip_row, cx + lean - half_hip)
    r_hip = (hip_row, cx + lean + half_hip)
    l_foot = (foot_row, cx - half_hip - spread)
    r_foot = (foot_row, cx + half_hip + spread)
    kp = np.array([head, neck, l_hip, r_hip, l_foot, r_foot], dtype=np.int64)
    return np.clip(kp, 0, IMAGE_SIZE - 1)


def _fill(img, r0, r1, c0, c1, color):
    r0, r1 = sorted((int(r0), int(r1)))
    c0, c1 = sorted((int(c0), int(c1)))
    img[max(r0, 0) : min(r1, IMAGE_SIZE - 1) + 1, max(c0, 0) : min(c1, IMAGE_SIZE - 1) + 1] = color


def render_figure(keypoints, palette):
    """Draw head, torso and legs rectangles; palette rows are (head, torso, legs) colors."""
    head, neck, l_hip, r_hip, l_foot, r_foot = np.asarray(keypoints)
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, CHANNELS), BACKGROUND)
    _fill(img, l_hip[0] + 1, l_foot[0], l_hip[1], l_foot[1], palette[2])
    _fill(img, r_hip[0] + 1, r_foot[0], r_hip[1], r_foot[1], palette[2])
    _fill(img, neck[0], l_hip[0], min(l_hip[1], neck[1] - 1), max(r_hip[1], neck[1] + 1), palette[1])
    _fill(img, head[0] - 1, head[0] + 1, head[1] - 1, head[1] + 1, palette[0])
    return img


def gen_toy_dataset(identities, samples_per_id, seed, test_fraction=0.25):
    """Render ``samples_per_id`` distinct poses per identity; identities are split train/test.

    With two or more identities at least one goes to the test split; the two
    identity sets are disjoint.
    """
    if identities < 1 or samples_per_id < 1:
        raise ContractError("identities and samples_per_id must be >= 1")
    n_test = 0 if identities < 2 else max(1, int(round(test_fraction * identities)))
    train, test, palettes = [], [], {}
    for ident in range(identities):
        rng = SplitMix64(derive_seed(seed, ident))
        palette = rng.uniform((3, CHANNELS), 0.25, 1.0)
        palettes[ident] = palette
        views, seen = [], set()
        attempts = 0
        while len(views) < samples_per_id:
            kp = sample_pose(rng)
            key = kp.tobytes()
            attempts += 1
            if key in seen and attempts < 100 * samples_per_id:
                continue
            seen.add(key)
            views.append(ToyView(ident, kp, render_figure(kp, palette), render_pose_heatmap(kp)))
        (test if ident >= identities - n_test else train).extend(views)
    return ToyDataset(train, test, palettes)


def add_image_noise(image, sigma, seed):
    """Additive Gaussian pixel noise, clipped to [0, 1]."""
    if sigma == 0:
        return image
    noise = SplitMix64(seed).normal(image.shape, scale=sigma)
    return np.clip(image + noise, 0.0, 1.0)
