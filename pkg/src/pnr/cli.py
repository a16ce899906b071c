"""Command-line experiment runner.

Exit codes:
  0  success
  1  a check failed (gradcheck)
  2  I/O or file-format error
  3  dimension mismatch
  4  singular regression problem
  5  configuration error
  6  training diverged (non-finite loss)
"""

from __future__ import annotations

import argparse
import datetime as _dt
import os
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, format_config, load_config
from .errors import ConfigError, ContractError, DimensionError, FormatError, SingularMatrixError
from .layer import gradcheck_suite
from .metrics import evaluate, recovery_error
from .model import LOSS_KEYS, TrainingDiverged, load_checkpoint, save_checkpoint, train
from .solver import PnrConfig, RegressionProblem, solve_lad_irls, solve_lse
from .synth import CHANNELS, IMAGE_SIZE, JOINTS, SynthSpec, ToyDataset, ToyView, gen_regression_instance, gen_toy_dataset
from .tensor import load_matrix, save_matrix

EXIT_OK, EXIT_CHECK, EXIT_IO, EXIT_DIM, EXIT_SINGULAR, EXIT_CONFIG, EXIT_DIVERGED = range(7)

CHECKPOINT_NAME = "checkpoint.pnrc"
CONFIG_NAME = "config.txt"
LOSS_LOG_NAME = "losses.csv"
MANIFEST_NAME = "manifest.txt"
DATA_MANIFEST_NAME = "manifest.txt"


def _timestamp():
    # SOURCE_DATE_EPOCH pins timestamps so reruns are byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = (
        _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
        if epoch
        else _dt.datetime.now(_dt.timezone.utc)
    )
    return now.strftime("%Y-%m-%dT%H:%M:%SZ")


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# toy dataset directories


def write_dataset(data, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# view image pose keypoints identity split\n"]
    for split in ("train", "test"):
        for i, v in enumerate(getattr(data, split)):
            stem = f"{split}_{i:04d}"
            files = (f"{stem}_image.pnrm", f"{stem}_pose.pnrm", f"{stem}_kp.pnrm")
            save_matrix(out / files[0], v.image.reshape(IMAGE_SIZE, IMAGE_SIZE * CHANNELS))
            save_matrix(out / files[1], v.pose_map.reshape(IMAGE_SIZE, IMAGE_SIZE * JOINTS))
            save_matrix(out / files[2], v.keypoints.astype(np.float64))
            lines.append(f"{stem} {files[0]} {files[1]} {files[2]} {v.identity} {split}\n")
    (out / DATA_MANIFEST_NAME).write_text("".join(lines))


def read_dataset(directory):
    directory = Path(directory)
    text = (directory / DATA_MANIFEST_NAME).read_text()
    train, test = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6 or parts[5] not in ("train", "test"):
            raise FormatError(f"{directory / DATA_MANIFEST_NAME}:{lineno}: malformed entry")
        _, img_f, pose_f, kp_f, ident, split = parts
        image = load_matrix(directory / img_f).reshape(IMAGE_SIZE, IMAGE_SIZE, CHANNELS)
        pose = load_matrix(directory / pose_f).reshape(IMAGE_SIZE, IMAGE_SIZE, JOINTS)
        kp = load_matrix(directory / kp_f).astype(np.int64)
        (train if split == "train" else test).append(ToyView(int(ident), kp, image, pose))
    return ToyDataset(train, test, {})


def _dataset(args, cfg):
    if getattr(args, "data", None):
        return read_dataset(args.data)
    return gen_toy_dataset(cfg.identities, cfg.samples_per_id, cfg.seed)


# ---------------------------------------------------------------------------
# verbs


def cmd_gradcheck(args):
    ps = (1, 2) if args.p is None else (args.p,)
    reports = gradcheck_suite(args.seed, args.trials, ps, corrupt=args.corrupt_backward)
    for r in reports:
        print(r.line())
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def cmd_solve(args):
    H = load_matrix(args.H)
    P = load_matrix(args.P)
    cfg = PnrConfig(p=args.p, irls_iters=args.iters, irls_eps=args.eps, ridge=args.ridge)
    prob = RegressionProblem(H, P)
    sol = solve_lad_irls(prob, cfg) if args.p == 1 else solve_lse(prob, cfg)
    save_matrix(args.out, sol.F)
    print(f"objective = {sol.objective!r}")
    print(f"iterations_used = {sol.iterations_used}")
    return EXIT_OK


def bench_robust(spec, trials, cfg):
    """Per-trial (LSE error, LAD error) on seeds spec.seed .. spec.seed + trials - 1."""
    rows = []
    for t in range(trials):
        trial_spec = SynthSpec(spec.n, spec.d, spec.D, spec.noise_sigma, spec.outlier_frac,
                               spec.outlier_scale, spec.seed + t)
        prob, F_star, _ = gen_regression_instance(trial_spec)
        lse = recovery_error(solve_lse(prob, cfg).F, F_star)
        lad = recovery_error(solve_lad_irls(prob, cfg).F, F_star)
        rows.append((trial_spec.seed, lse, lad))
    return rows


def cmd_bench_robust(args):
    if args.trials < 1:
        raise ConfigError("trials must be >= 1")
    spec = SynthSpec(args.n, args.d, args.D, args.noise, args.frac, args.scale, args.seed)
    cfg = PnrConfig(p=1, irls_iters=args.iters, irls_eps=args.eps, ridge=args.ridge)
    rows = bench_robust(spec, args.trials, cfg)
    print("seed      lse_error     lad_error     winner")
    for seed, lse, lad in rows:
        print(f"{seed:<9d} {lse:.6e}  {lad:.6e}  {'LAD' if lad < lse else 'LSE'}")
    wins = sum(lad < lse for _, lse, lad in rows)
    print()
    print("method  mean_error    median_error  wins")
    for name, col, w in (("LSE", 1, len(rows) - wins), ("LAD", 2, wins)):
        errs = [r[col] for r in rows]
        print(f"{name:<7s} {np.mean(errs):.6e}  {np.median(errs):.6e}  {w}")
    print(f"lad_win_rate = {wins / len(rows)!r}")
    return EXIT_OK


def cmd_synth(args):
    out = Path(args.out)
    if args.kind == "regression":
        spec = SynthSpec(args.n, args.d, args.D, args.noise, args.frac, args.scale, args.seed)
        prob, F_star, rows = gen_regression_instance(spec)
        out.mkdir(parents=True, exist_ok=True)
        save_matrix(out / "H.pnrm", prob.H)
        save_matrix(out / "P.pnrm", prob.P)
        save_matrix(out / "F_star.pnrm", F_star)
        (out / "outliers.txt").write_text("".join(f"{r}\n" for r in rows))
        print(f"wrote regression instance n={spec.n} d={spec.d} D={spec.D} to {out}")
        return EXIT_OK
    data = gen_toy_dataset(args.identities, args.samples_per_id, args.seed)
    write_dataset(data, out)
    print(f"wrote {len(data.train)} train and {len(data.test)} test views to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config)
    data = _dataset(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _timestamp()
    log_path = out / LOSS_LOG_NAME
    with open(log_path, "w") as log:
        log.write("step," + ",".join(LOSS_KEYS) + "\n")

        def on_step(step, losses):
            log.write(f"{step}," + ",".join(repr(losses[k]) for k in LOSS_KEYS) + "\n")
            if (step + 1) % args.print_every == 0 or step + 1 == cfg.steps:
                print(f"step {step + 1}/{cfg.steps} " + " ".join(f"{k}={losses[k]:.4f}" for k in LOSS_KEYS))

        state = train(cfg, data, on_step=on_step)
    save_checkpoint(out / CHECKPOINT_NAME, state)
    (out / CONFIG_NAME).write_text(format_config(cfg))
    manifest = [
        f"command = train\n",
        f"seed = {cfg.seed}\n",
        f"started = {started}\n",
        f"finished = {_timestamp()}\n",
        f"steps = {state.step}\n",
        f"skipped_steps = {state.skipped}\n",
        f"checkpoint = {CHECKPOINT_NAME}\n",
        f"config = {CONFIG_NAME}\n",
        f"loss_log = {LOSS_LOG_NAME}\n",
    ] + [f"config.{line}" for line in format_config(cfg).splitlines(keepends=True)]
    (out / MANIFEST_NAME).write_text("".join(manifest))
    print(f"wrote {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    cfg = load_config(args.config or ckpt.parent / CONFIG_NAME)
    data = _dataset(args, cfg)
    params = load_checkpoint(ckpt, cfg).params
    report = evaluate(params, cfg, data, tuple(args.M), args.noise)
    text = report.text()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="pnr", description="p-norm regression layer experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference checks of the tape and the pNR layer")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--p", type=int, choices=(1, 2), default=None, help="restrict to one norm (default: both)")
    g.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("solve", help="solve H ≈ P F from PNRM files")
    s.add_argument("--p", type=int, choices=(1, 2), default=2)
    s.add_argument("--H", required=True)
    s.add_argument("--P", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--eps", type=float, default=1e-8)
    s.add_argument("--ridge", type=float, default=1e-9)
    s.set_defaults(func=cmd_solve)

    def spec_args(p):
        p.add_argument("--n", type=int, default=32)
        p.add_argument("--d", type=int, default=4)
        p.add_argument("--D", type=int, default=3)
        p.add_argument("--noise", type=float, default=0.01)
        p.add_argument("--frac", type=float, default=0.2)
        p.add_argument("--scale", type=float, default=10.0)
        p.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench-robust", help="Monte-Carlo LSE vs LAD recovery under outliers")
    spec_args(b)
    b.add_argument("--trials", type=int, default=100)
    b.add_argument("--iters", type=int, default=5)
    b.add_argument("--eps", type=float, default=1e-8)
    b.add_argument("--ridge", type=float, default=1e-9)
    b.set_defaults(func=cmd_bench_robust)

    y = sub.add_parser("synth", help="write a synthetic dataset")
    y.add_argument("--kind", choices=("toy", "regression"), default="toy")
    y.add_argument("--out", required=True)
    y.add_argument("--identities", type=int, default=16)
    y.add_argument("--samples-per-id", type=int, default=6)
    spec_args(y)
    y.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the toy model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory from `pnr synth` (default: generate from config)")
    t.add_argument("--print-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="default: config.txt next to the checkpoint")
    e.add_argument("--data", help="dataset directory (default: generate from config)")
    e.add_argument("--M", type=int, nargs="+", default=[1])
    e.add_argument("--noise", type=float, default=None, help="input pixel noise (default: eval_noise)")
    e.add_argument("--out", help="also write the report to this file")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, FormatError) as exc:
        return _fail(EXIT_IO, str(exc))
    except DimensionError as exc:
        return _fail(EXIT_DIM, str(exc))
    except SingularMatrixError as exc:
        return _fail(EXIT_SINGULAR, str(exc))
    except (ConfigError, ContractError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, str(exc))


if __name__ == "__main__":
    sys.exit(main())
