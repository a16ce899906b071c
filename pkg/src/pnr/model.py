"""Desk-scale pose-transfer model built around the pNR layer.

Images are 16×16×3 and are handled as 16 row-major 4×4 patches, so the
appearance and pose extractors, like the generator, act independently on
each region: row k of H or P describes patch k.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, PnrError, SingularMatrixError
from .layer import pnr_forward
from .rng import SplitMix64, derive_seed
from .solver import sample_mask
from .synth import CHANNELS, IMAGE_SIZE, JOINTS
from .tensor import Tape, decode_matrix, encode_matrix

PATCH = 4
GRID = IMAGE_SIZE // PATCH
REGIONS = GRID * GRID
APPEARANCE_IN = PATCH * PATCH * CHANNELS
POSE_IN = PATCH * PATCH * JOINTS
IMAGE_PIXELS = IMAGE_SIZE * IMAGE_SIZE * CHANNELS
POSE_PIXELS = IMAGE_SIZE * IMAGE_SIZE * JOINTS
PERCEPTUAL_SEED = 0x9E5C

GENERATOR_GROUPS = ("app", "pose", "gen")
DISCRIMINATOR_GROUPS = ("dI", "dK")


class TrainingDiverged(PnrError, ArithmeticError):
    """A loss became NaN or infinite."""


def to_patches(array):
    """(16, 16, C) -> (REGIONS, PATCH*PATCH*C), patches in row-major grid order."""
    a = np.asarray(array, dtype=np.float64)
    if a.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE) or a.ndim != 3:
        raise DimensionError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE}xC array, got {a.shape}")
    c = a.shape[2]
    return a.reshape(GRID, PATCH, GRID, PATCH, c).transpose(0, 2, 1, 3, 4).reshape(REGIONS, PATCH * PATCH * c)


def from_patches(patches, channels=CHANNELS):
    m = np.asarray(patches, dtype=np.float64)
    if m.shape != (REGIONS, PATCH * PATCH * channels):
        raise DimensionError(f"expected ({REGIONS}, {PATCH * PATCH * channels}) patches, got {m.shape}")
    return m.reshape(GRID, GRID, PATCH, PATCH, channels).transpose(0, 2, 1, 3, 4).reshape(
        IMAGE_SIZE, IMAGE_SIZE, channels
    )


# ---------------------------------------------------------------------------
# parameters


def _pose_shapes(cfg):
    widths = [POSE_IN] + [cfg.hidden] * cfg.pose_depth + [cfg.d]
    shapes = {}
    for k, (a, b) in enumerate(zip(widths, widths[1:]), 1):
        shapes[f"pose.W{k}"], shapes[f"pose.b{k}"] = (a, b), (1, b)
    return shapes


def param_shapes(cfg):
    h, hd = cfg.hidden, cfg.disc_hidden
    return {
        "app.W1": (APPEARANCE_IN, h), "app.b1": (1, h),
        "app.W2": (h, cfg.D), "app.b2": (1, cfg.D),
        **_pose_shapes(cfg),
        "gen.W1": (cfg.D, h), "gen.b1": (1, h),
        "gen.W2": (h, APPEARANCE_IN), "gen.b2": (1, APPEARANCE_IN),
        "dI.W1": (2 * IMAGE_PIXELS, hd), "dI.b1": (1, hd),
        "dI.W2": (hd, 1), "dI.b2": (1, 1),
        "dK.W1": (IMAGE_PIXELS + POSE_PIXELS, hd), "dK.b1": (1, hd),
        "dK.W2": (hd, 1), "dK.b2": (1, 1),
    }  # fmt: skip


def init_params(cfg, seed=None):
    """Glorot-uniform weights, zero biases."""
    rng = SplitMix64(derive_seed(cfg.seed if seed is None else seed, 0xA11))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.split(".")[1].startswith("b"):
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(shape, -limit, limit)
    return params


def group_names(params, groups):
    return [k for k in params if k.split(".")[0] in groups]


def perceptual_projection(cfg):
    """Fixed random linear features standing in for a pretrained network."""
    rng = SplitMix64(PERCEPTUAL_SEED)
    return rng.normal((IMAGE_PIXELS, cfg.perceptual_dim), scale=1.0 / np.sqrt(IMAGE_PIXELS))


# ---------------------------------------------------------------------------
# networks (tape-building)


def _affine(tape, x, nodes, prefix, k):
    return tape.add_row(tape.matmul(x, nodes[f"{prefix}.W{k}"]), nodes[f"{prefix}.b{k}"])


def _check_width(node, width, what):
    if node.value.shape != (REGIONS, width):
        raise DimensionError(f"{what}: expected ({REGIONS}, {width}) patches, got {node.value.shape}")


def extract_appearance(tape, nodes, image):
    _check_width(image, APPEARANCE_IN, "extract_appearance")
    return _affine(tape, tape.tanh(_affine(tape, image, nodes, "app", 1)), nodes, "app", 2)


def extract_pose(tape, nodes, pose_map):
    _check_width(pose_map, POSE_IN, "extract_pose")
    depth = sum(1 for k in nodes if k.startswith("pose.W")) - 1
    h = pose_map
    for k in range(1, depth + 1):
        h = tape.tanh(_affine(tape, h, nodes, "pose", k))
    return _affine(tape, h, nodes, "pose", depth + 1)


def generate_image(tape, nodes, H_t):
    if H_t.value.shape[0] != REGIONS:
        raise DimensionError(f"generate_image: expected {REGIONS} rows, got {H_t.value.shape[0]}")
    h = tape.tanh(_affine(tape, H_t, nodes, "gen", 1))
    return tape.sigmoid(_affine(tape, h, nodes, "gen", 2))


def discriminate(tape, nodes, prefix, a, b):
    """Logit of a discriminator on the flattened pair (a, b)."""
    x = tape.hstack([tape.reshape(a, 1, a.value.size), tape.reshape(b, 1, b.value.size)])
    return _affine(tape, tape.relu(_affine(tape, x, nodes, prefix, 1)), nodes, prefix, 2)


# ---------------------------------------------------------------------------
# losses


def loss_l1(tape, generated, target):
    """Mean absolute pixel difference."""
    if generated.value.shape != target.value.shape:
        raise DimensionError(f"loss_l1: {generated.value.shape} vs {target.value.shape}")
    return tape.mean(tape.abs(tape.sub(generated, target)))


def loss_perceptual(tape, projection, generated, target):
    feats = [tape.matmul(tape.reshape(x, 1, x.value.size), projection) for x in (generated, target)]
    return tape.mean(tape.abs(tape.sub(*feats)))


def gan_d_loss(tape, real_logit, fake_logit):
    """-[log D(real) + log(1 - D(fake))] with D = sigmoid(logit)."""
    return tape.add(tape.softplus(tape.scale(real_logit, -1.0)), tape.softplus(fake_logit))


def gan_g_loss(tape, fake_logit):
    """Non-saturating generator loss -log D(fake)."""
    return tape.softplus(tape.scale(fake_logit, -1.0))


def loss_gan(tape, disc, real_pair, fake_pair):
    """(d_loss, g_loss) for a discriminator callable ``disc(tape, a, b) -> logit``."""
    fake_logit = disc(tape, *fake_pair)
    return gan_d_loss(tape, disc(tape, *real_pair), fake_logit), gan_g_loss(tape, fake_logit)


def total_loss(cfg, components):
    """λ-weighted sum of (L1, perceptual, GAN_I, GAN_K) values."""
    return float(sum(lam * c for lam, c in zip(cfg.lambdas, components)))


def _weighted(tape, cfg, components):
    total = None
    for lam, node in zip(cfg.lambdas, components):
        if lam == 0 or node is None:
            continue
        term = tape.scale(node, lam)
        total = term if total is None else tape.add(total, term)
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params, names):
    return AdamState({k: np.zeros_like(params[k]) for k in names}, {k: np.zeros_like(params[k]) for k in names})


def adam_step(params, grads, state, lr, beta1, beta2, eps=1e-8):
    """Bias-corrected Adam over the parameters tracked by ``state``; returns (params, state)."""
    t = state.step + 1
    new_params = dict(params)
    m, v = {}, {}
    for k in state.m:
        g = grads[k]
        m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m[k] / (1.0 - beta1**t)
        v_hat = v[k] / (1.0 - beta2**t)
        new_params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Example:
    """One training/evaluation case in patch layout."""

    shots: list  # [(image patches, pose patches)], M >= 1
    target_pose: np.ndarray | None  # None: reconstruct the source pose
    target_image: np.ndarray
    row_weights: np.ndarray | None = None

    @property
    def source_image(self):
        return self.shots[0][0]


def example_from_views(shots, target, noise=0.0, seed=0):
    """Build an :class:`Example` from synth views; optional pixel noise on the shots."""
    from .synth import add_image_noise

    shot_arrays = []
    for j, v in enumerate(shots):
        img = add_image_noise(v.image, noise, derive_seed(seed, j)) if noise else v.image
        shot_arrays.append((to_patches(img), to_patches(v.pose_map)))
    return Example(shot_arrays, to_patches(target.pose_map), to_patches(target.image))


def self_example(view, mask=None):
    pair = (to_patches(view.image), to_patches(view.pose_map))
    return Example([pair], None, pair[0], mask)


def generator_forward(tape, nodes, ex, cfg):
    """Return (generated image node, source image node, target pose node)."""
    Hs, Ps = [], []
    for img, pose in ex.shots:
        Hs.append(extract_appearance(tape, nodes, tape.const(img)))
        Ps.append(extract_pose(tape, nodes, tape.const(pose)))
    H_s = Hs[0] if len(Hs) == 1 else tape.vstack(Hs)
    P_s = Ps[0] if len(Ps) == 1 else tape.vstack(Ps)
    if ex.target_pose is None:
        K_t = tape.const(ex.shots[0][1])
        P_t = Ps[0]
    else:
        K_t = tape.const(ex.target_pose)
        P_t = extract_pose(tape, nodes, K_t)
    row_weights = ex.row_weights
    if row_weights is not None and len(ex.shots) > 1:
        row_weights = np.tile(row_weights, len(ex.shots))
    node = pnr_forward(tape, H_s, P_s, P_t, cfg.pnr, row_weights)
    return generate_image(tape, nodes, node.H_t), tape.const(ex.shots[0][0]), K_t


def infer(params, cfg, ex):
    """Generated image (16×16×3) for one example."""
    tape = Tape()
    nodes = {k: tape.const(v) for k, v in params.items() if k.split(".")[0] in GENERATOR_GROUPS}
    out, _, _ = generator_forward(tape, nodes, ex, cfg)
    return from_patches(out.value)


def infer_multishot(params, cfg, shots, target_pose):
    """Generate from M (image, pose map) source pairs and a target pose map (16×16×J arrays)."""
    if len(shots) < 1:
        raise ConfigError("multi-shot inference needs at least one shot")
    ex = Example([(to_patches(i), to_patches(k)) for i, k in shots], to_patches(target_pose), None)
    return infer(params, cfg, ex)


@dataclass
class TrainState:
    params: dict
    opt_g: AdamState
    opt_d: AdamState
    step: int = 0
    skipped: int = 0
    log: list = field(default_factory=list)


def new_train_state(cfg):
    params = init_params(cfg)
    return TrainState(
        params,
        adam_init(params, group_names(params, GENERATOR_GROUPS)),
        adam_init(params, group_names(params, DISCRIMINATOR_GROUPS)),
    )


LOSS_KEYS = ("L1", "Lper", "LganI", "LganK")


def train_step(state, batch, cfg, projection=None):
    """One discriminator half-step followed by one generator half-step.

    Returns the batch-mean loss components, or None when a singular solve
    forced the step to be skipped (counted in ``state.skipped``).
    """
    projection = perceptual_projection(cfg) if projection is None else projection
    lam1, lam2, lam3, lam4 = cfg.lambdas
    tape = Tape()
    gnodes = {k: tape.leaf(state.params[k]) for k in state.opt_g.m}
    try:
        forwards = [generator_forward(tape, gnodes, ex, cfg) for ex in batch]
    except SingularMatrixError:
        state.skipped += 1
        state.step += 1
        return None
    targets = [tape.const(ex.target_image) for ex in batch]
    scale = 1.0 / len(batch)

    # discriminators see the generated images as constants
    d_loss = None
    if lam3 > 0 or lam4 > 0:
        dtape = Tape()
        dnodes = {k: dtape.leaf(state.params[k]) for k in state.opt_d.m}
        terms = []
        for (fake, src, K_t), target in zip(forwards, targets):
            fake_c, src_c, real_c = (dtape.const(n.value) for n in (fake, src, target))
            if lam3 > 0:
                disc = lambda t, a, b: discriminate(t, dnodes, "dI", a, b)
                terms.append(gan_d_loss(dtape, disc(dtape, real_c, src_c), disc(dtape, fake_c, src_c)))
            if lam4 > 0:
                k_c = dtape.const(K_t.value)
                disc = lambda t, a, b: discriminate(t, dnodes, "dK", a, b)
                terms.append(gan_d_loss(dtape, disc(dtape, real_c, k_c), disc(dtape, fake_c, k_c)))
        total = terms[0]
        for t in terms[1:]:
            total = dtape.add(total, t)
        total = dtape.scale(total, scale)
        d_loss = float(total.value[0, 0])
        grads = dtape.backward(total)
        active = [k for k in state.opt_d.m
                  if (k.startswith("dI.") and lam3 > 0) or (k.startswith("dK.") and lam4 > 0)]
        dgrads = {k: grads[dnodes[k].id] if k in active else np.zeros_like(state.params[k]) for k in state.opt_d.m}
        state.params, state.opt_d = adam_step(state.params, dgrads, state.opt_d, cfg.lr, cfg.beta1, cfg.beta2)

    # generator side, discriminator parameters frozen
    fixed = {k: tape.const(state.params[k]) for k in state.opt_d.m}
    sums = [None, None, None, None]

    def acc(i, node):
        sums[i] = node if sums[i] is None else tape.add(sums[i], node)

    for (fake, src, K_t), target in zip(forwards, targets):
        acc(0, loss_l1(tape, fake, target))
        acc(1, loss_perceptual(tape, tape.const(projection), fake, target))
        if lam3 > 0:
            acc(2, gan_g_loss(tape, discriminate(tape, fixed, "dI", fake, src)))
        if lam4 > 0:
            acc(3, gan_g_loss(tape, discriminate(tape, fixed, "dK", fake, K_t)))
    comps = [None if s is None else tape.scale(s, scale) for s in sums]
    values = {k: (0.0 if c is None else float(c.value[0, 0])) for k, c in zip(LOSS_KEYS, comps)}
    if d_loss is not None:
        values["Ldisc"] = d_loss
    if not all(np.isfinite(v) for v in values.values()):
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {values}")
    objective = _weighted(tape, cfg, comps)
    if objective is not None:
        grads = tape.backward(objective)
        ggrads = {k: grads[n.id] for k, n in gnodes.items()}
    else:
        ggrads = {k: np.zeros_like(state.params[k]) for k in gnodes}
    state.params, state.opt_g = adam_step(state.params, ggrads, state.opt_g, cfg.lr, cfg.beta1, cfg.beta2)
    values["total"] = total_loss(cfg, [values[k] for k in LOSS_KEYS])
    state.step += 1
    return values


def sample_batch(data, cfg, step):
    """Seeded training batch for ``cfg.mode`` drawn from ``data.train``."""
    rng = SplitMix64(derive_seed(cfg.seed, 0xBA7C, step))
    groups = data.by_identity("train")
    ids = sorted(groups)
    batch = []
    for i in range(cfg.batch):
        views = groups[ids[rng.integers(len(ids))]]
        if cfg.mode == "unsupervised":
            view = views[rng.integers(len(views))]
            mask = sample_mask(REGIONS, cfg.keep_prob, derive_seed(cfg.seed, 0x3A5C, step, i))
            batch.append(self_example(view, mask))
            continue
        need = (cfg.shots if cfg.mode == "multishot" else 1) + 1
        if len(views) < need:
            raise ConfigError(f"identity needs {need} views for mode {cfg.mode}, has {len(views)}")
        picks = rng.choose(len(views), need)
        order = rng.permutation(need)
        chosen = [views[picks[j]] for j in order]
        batch.append(example_from_views(chosen[:-1], chosen[-1]))
    return batch


def heldout_examples(data, cfg):
    """Deterministic evaluation cases from the test split matching ``cfg.mode``."""
    if cfg.mode == "unsupervised":
        return [self_example(v) for v in data.test[: cfg.eval_pairs]]
    pairs = data.pairs("test")
    if not pairs:
        raise ConfigError("test split is empty")
    stride = max(1, len(pairs) // cfg.eval_pairs)
    return [example_from_views([s.source], s.target) for s in pairs[::stride][: cfg.eval_pairs]]


def heldout_l1(params, cfg, examples):
    return float(np.mean([np.mean(np.abs(infer(params, cfg, ex) - from_patches(ex.target_image))) for ex in examples]))


def train(cfg, data, state=None, on_step=None):
    """Run ``cfg.steps`` training steps; ``on_step(step, losses)`` sees every completed step."""
    state = new_train_state(cfg) if state is None else state
    projection = perceptual_projection(cfg)
    while state.step < cfg.steps:
        step = state.step
        losses = train_step(state, sample_batch(data, cfg, step), cfg, projection)
        if losses is not None:
            state.log.append((step, *(losses[k] for k in LOSS_KEYS)))
            if on_step is not None:
                on_step(step, losses)
    return state


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PNRC"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


def checkpoint_records(state):
    records = {f"param/{k}": v for k, v in state.params.items()}
    for tag, opt in (("adam_g", state.opt_g), ("adam_d", state.opt_d)):
        records[f"{tag}/step"] = np.array([[float(opt.step)]])
        for k in opt.m:
            records[f"{tag}/m/{k}"] = opt.m[k]
            records[f"{tag}/v/{k}"] = opt.v[k]
    records["train/step"] = np.array([[float(state.step)]])
    records["train/skipped"] = np.array([[float(state.skipped)]])
    return records


def save_checkpoint(path, state):
    records = checkpoint_records(state)
    out = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(records))]
    for name, m in records.items():
        raw = name.encode("utf-8")
        out += [_U32.pack(len(raw)), raw, encode_matrix(m)]
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def read_checkpoint_records(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated checkpoint header")
    (version,) = _U32.unpack_from(buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = _U32.unpack_from(buf, 8)
    pos, records = 12, {}
    for _ in range(count):
        if pos + 4 > len(buf):
            raise FormatError(f"{path}: truncated record")
        (length,) = _U32.unpack_from(buf, pos)
        name = buf[pos + 4 : pos + 4 + length].decode("utf-8")
        records[name], pos = decode_matrix(buf, pos + 4 + length)
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after {count} records")
    return records


def load_checkpoint(path, cfg):
    """Restore a :class:`TrainState`; shapes must match ``cfg``."""
    records = read_checkpoint_records(path)
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        m = records.get(f"param/{name}")
        if m is None or m.shape != shape:
            got = None if m is None else m.shape
            raise ConfigError(f"checkpoint parameter {name}: expected shape {shape}, found {got}")
        params[name] = m

    def opt(tag, groups):
        names = group_names(params, groups)
        step = int(records.get(f"{tag}/step", np.zeros((1, 1)))[0, 0])
        m = {k: records.get(f"{tag}/m/{k}", np.zeros_like(params[k])) for k in names}
        v = {k: records.get(f"{tag}/v/{k}", np.zeros_like(params[k])) for k in names}
        return AdamState(m, v, step)

    state = TrainState(params, opt("adam_g", GENERATOR_GROUPS), opt("adam_d", DISCRIMINATOR_GROUPS))
    state.step = int(records.get("train/step", np.zeros((1, 1)))[0, 0])
    state.skipped = int(records.get("train/skipped", np.zeros((1, 1)))[0, 0])
    return state
