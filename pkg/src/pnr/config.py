"""Training configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .errors import ConfigError
from .solver import PnrConfig

MODES = ("supervised", "unsupervised", "multishot")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "supervised"
    shots: int = 1  # M used by multishot training
    p: int = 2
    steps: int = 300
    batch: int = 8
    lr: float = 0.002
    beta1: float = 0.5
    beta2: float = 0.999
    lambda1: float = 5.0
    lambda2: float = 5.0
    lambda3: float | None = None  # 10 supervised, 0 unsupervised
    lambda4: float = 10.0
    seed: int = 0
    # model dimensions
    d: int = 3
    D: int = 16
    hidden: int = 32
    pose_depth: int = 2  # hidden tanh layers in the pose extractor
    disc_hidden: int = 32
    perceptual_dim: int = 64
    # pNR solver
    irls_iters: int = 5
    irls_eps: float = 1e-8
    ridge: float = 1e-9
    keep_prob: float = 0.5
    # data
    identities: int = 16
    samples_per_id: int = 6
    eval_noise: float = 0.0
    eval_pairs: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda3 is None:
            object.__setattr__(self, "lambda3", 0.0 if self.mode == "unsupervised" else 10.0)
        if self.mode == "unsupervised" and self.lambda3 != 0:
            raise ConfigError("unsupervised training requires lambda3 = 0")
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ConfigError("loss weights must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.p not in (1, 2):
            raise ConfigError("p must be 1 or 2")
        if not 0 <= self.keep_prob <= 1:
            raise ConfigError("keep_prob must lie in [0, 1]")
        for name in ("shots", "steps", "batch", "d", "D", "hidden", "pose_depth", "disc_hidden",
                     "perceptual_dim", "irls_iters", "identities", "samples_per_id", "eval_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.ridge < 0 or not self.irls_eps > 0 or self.eval_noise < 0:
            raise ConfigError("ridge, eval_noise must be >= 0 and irls_eps > 0")

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def pnr(self):
        return PnrConfig(p=self.p, irls_iters=self.irls_iters, irls_eps=self.irls_eps,
                         ridge=self.ridge, d=self.d, D=self.D)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_CASTS = {"mode": str, "shots": int, "p": int, "steps": int, "batch": int, "seed": int, "d": int, "D": int,
          "hidden": int, "pose_depth": int, "disc_hidden": int, "perceptual_dim": int, "irls_iters": int,
          "identities": int, "samples_per_id": int, "eval_pairs": int}


def parse_config(text, env=None):
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors.

    ``PNR_SEED`` in ``env`` (default: ``os.environ``) overrides ``seed``.
    """
    env = os.environ if env is None else env
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _CASTS.get(key, float)(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    if env.get("PNR_SEED"):
        try:
            values["seed"] = int(env["PNR_SEED"])
        except ValueError:
            raise ConfigError(f"PNR_SEED must be an integer, got {env['PNR_SEED']!r}") from None
    return TrainConfig(**values)


def load_config(path, env=None):
    with open(path) as fh:
        return parse_config(fh.read(), env)


def format_config(cfg):
    return "".join(f"{f} = {getattr(cfg, f)}\n" for f in _FIELDS)
