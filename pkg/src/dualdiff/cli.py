"""Command-line front end: gen-data, train, eval, ablate."""
import argparse
import itertools
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (
    CONDITIONER_CHOICES, LOSS_CHOICES, NOISE_CHOICES, SAMPLER_CHOICES, TrainingConfig, load_config,
)
from .data import load_dataset, save_dataset, synth_dataset
from .errors import CheckpointError, ConfigError, NumericalError
from .pipeline import LOSS_TERMS, evaluate, init_train_state, run_training

LOG_HEADER = "step," + ",".join(LOSS_TERMS) + ",total"
# Variant sets of each ablation axis; steps are fractions of the base step count
ABLATION_AXES = {
    "steps": (0.25, 0.5, 0.75, 1.0, 1.25, 1.5),
    "conditioner": ("plain", "mfcm"),
    "loss": ("base", "kl", "full"),
    "noise": ("gaussian", "bernoulli", "both"),
}
AXIS_LABELS = {
    "steps": "Number of training steps",
    "conditioner": "Conditioning module",
    "loss": "Loss function",
    "noise": "Noise term",
}


class CommandError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def _fmt(x):
    return format(float(x), ".17g")


def _common(parser):
    parser.add_argument("--seed", type=int, help="root seed for every random stream")
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--steps", type=int, help="training steps (overrides train_steps)")
    parser.add_argument("--stride", type=int, help="reverse-chain stride (overrides stride)")
    parser.add_argument("--noise", choices=NOISE_CHOICES)
    parser.add_argument("--conditioner", choices=CONDITIONER_CHOICES)
    parser.add_argument("--loss", choices=LOSS_CHOICES)
    parser.add_argument("--sampler", choices=SAMPLER_CHOICES)


def build_parser():
    parser = argparse.ArgumentParser(prog="dualdiff", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--zero-noise", action="store_true", help="images are smoothed masks only")

    p = sub.add_parser("train", help="train the toy model")
    _common(p)
    p.add_argument("data_dir")
    p.add_argument("checkpoint", help="output checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log", help="loss log path (default: CHECKPOINT.log.csv)")
    p.add_argument("--checkpoint-every", type=int, help="also checkpoint every N steps")

    p = sub.add_parser("eval", help="segment a dataset and report Dice")
    _common(p)
    p.add_argument("data_dir")
    p.add_argument("checkpoint")
    p.add_argument("--report", required=True, help="report path (timings go to REPORT.timing)")
    p.add_argument("--svg", help="write a per-sample Dice histogram here")

    p = sub.add_parser("ablate", help="sweep ablation axes and tabulate mean Dice")
    _common(p)
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--axes", default="", help="comma-separated subset of " + ",".join(ABLATION_AXES))
    p.add_argument("--eval-dir", help="held-out dataset (default: last quarter of DATA_DIR)")
    return parser


def resolve_config(args, base=None):
    """Config file (or ``base``) with command-line overrides applied."""
    try:
        cfg = load_config(args.config) if args.config else (base or TrainingConfig())
    except OSError as exc:
        raise CommandError(f"cannot read config {args.config}: {exc.strerror}") from None
    overrides = {
        "seed": args.seed, "train_steps": args.steps, "stride": args.stride, "noise": args.noise,
        "conditioner": args.conditioner, "loss": args.loss, "sampler": args.sampler,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides.get("sampler") == "ddpm" and "stride" not in overrides:
        overrides["stride"] = 1
    return cfg.replace(**overrides)


def _load_data(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot load dataset {path}: {exc}") from None


# -- gen-data --------------------------------------------------------------------

def cmd_gen_data(args):
    if args.n < 1:
        raise CommandError("--n must be at least 1", code=2)
    if args.side < 4 or args.side % 4:
        raise CommandError("--side must be a positive multiple of 4", code=2)
    seed = 0 if args.seed is None else args.seed
    records = synth_dataset(args.n, args.side, seed, zero_noise=args.zero_noise)
    params = {"n": args.n, "side": args.side, "seed": seed, "zero_noise": args.zero_noise,
              "format": "pgm-p5-8bit", "mask_values": "0,255"}
    try:
        save_dataset(records, args.out_dir, params)
    except OSError as exc:
        raise CommandError(f"cannot write {exc.filename or args.out_dir}: {exc.strerror}") from None
    print(f"wrote {args.n} records to {args.out_dir}")
    return 0


# -- train -------------------------------------------------------------------------

class LossLog:
    """CSV loss log; on resume keeps rows up to the restored step."""

    def __init__(self, path, resume_step=None):
        self.path = path
        lines = [LOG_HEADER]
        if resume_step is not None and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                old = fh.read().splitlines()
            lines += [ln for ln in old[1:] if ln and int(ln.split(",", 1)[0]) <= resume_step]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        self.fh = open(path, "a", encoding="utf-8")

    def write(self, step, parts, total):
        self.fh.write(",".join([str(step)] + [_fmt(parts[k]) for k in LOSS_TERMS] + [_fmt(total)]) + "\n")

    def close(self):
        self.fh.close()


def train_records(records, cfg, state, until, ckpt_path, log, checkpoint_every=0):
    def on_step(step, parts, total):
        if step % cfg.log_every == 0:
            log.write(step, parts, total)
        if checkpoint_every and step % checkpoint_every == 0 and step < until:
            save_checkpoint(ckpt_path, Checkpoint.from_train_state(cfg, state))

    run_training(records, cfg, state, until, on_step)
    return state


def cmd_train(args):
    records = _load_data(args.data_dir)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        cfg = ckpt.cfg if args.steps is None else ckpt.cfg.replace(train_steps=args.steps)
        state = ckpt.to_train_state()
    else:
        cfg = resolve_config(args)
        state = init_train_state(cfg)
    if cfg.model != "toy":
        raise CommandError("only the toy model can be trained", code=2)
    every = cfg.checkpoint_every if args.checkpoint_every is None else args.checkpoint_every
    log_path = args.log or args.checkpoint + ".log.csv"
    try:
        log = LossLog(log_path, resume_step=state.step if args.resume else None)
    except OSError as exc:
        raise CommandError(f"cannot write log {log_path}: {exc.strerror}") from None
    try:
        train_records(records, cfg, state, cfg.train_steps, args.checkpoint, log, every)
    except NumericalError as exc:
        raise CommandError(f"numerical error at step {exc.step}: {exc}", code=3) from None
    finally:
        log.close()
    try:
        save_checkpoint(args.checkpoint, Checkpoint.from_train_state(cfg, state))
    except OSError as exc:
        raise CommandError(f"cannot write checkpoint {args.checkpoint}: {exc.strerror}") from None
    print(f"trained to step {state.step}; checkpoint {args.checkpoint}")
    return 0


# -- eval ----------------------------------------------------------------------------

def format_report(ckpt_step, cfg, seed, result):
    lines = [
        "# dualdiff evaluation report",
        f"checkpoint_step = {ckpt_step}",
        f"model = {cfg.model}",
        f"sampler = {cfg.sampler}",
        f"stride = {cfg.stride}",
        f"T = {cfg.T}",
        f"noise = {cfg.noise}",
        f"ensemble = {cfg.ensemble}",
        f"seed = {seed}",
        f"n = {len(result.per_sample)}",
        f"mean_dice = {_fmt(result.mean_dice)}",
    ]
    lines += [f"branch_dice.{k} = {_fmt(v)}" for k, v in sorted(result.branch_dice.items())]
    lines.append("index,dice")
    lines += [f"{i},{_fmt(d)}" for i, d in enumerate(result.per_sample)]
    return "\n".join(lines) + "\n"


def write_histogram_svg(path, values):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "dualdiff", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist(values, bins=np.linspace(0.0, 1.0, 21), color="0.35", edgecolor="white")
        ax.set_xlabel("Dice")
        ax.set_ylabel("samples")
        ax.set_xlim(0.0, 1.0)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    records = _load_data(args.data_dir)
    cfg = ckpt.cfg
    overrides = {k: v for k, v in {"stride": args.stride, "sampler": args.sampler}.items() if v is not None}
    if overrides.get("sampler") == "ddpm":
        overrides["stride"] = 1
    cfg = cfg.replace(**overrides)
    seed = cfg.seed if args.seed is None else args.seed
    model = ckpt.to_train_state().model if cfg.model == "toy" else None
    result = evaluate(records, model, cfg, seed=seed)
    try:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(format_report(ckpt.step, cfg, seed, result))
        with open(args.report + ".timing", "w", encoding="utf-8") as fh:
            fh.write(f"seconds_per_image = {result.seconds_per_image:.6f}\n")
        if args.svg:
            write_histogram_svg(args.svg, result.per_sample)
    except OSError as exc:
        raise CommandError(f"cannot write {exc.filename}: {exc.strerror}") from None
    print(f"mean Dice {result.mean_dice:.4f} over {len(records)} images")
    return 0


# -- ablate ----------------------------------------------------------------------------

def parse_axes(text):
    axes = [a.strip() for a in text.split(",") if a.strip()]
    for a in axes:
        if a not in ABLATION_AXES:
            raise CommandError(f"unknown ablation axis {a!r}; choose from {', '.join(ABLATION_AXES)}", code=2)
    if len(set(axes)) != len(axes):
        raise CommandError("ablation axes repeat", code=2)
    return axes


def ablation_variants(base, axes):
    """(label, config) pairs for the cartesian product of the chosen axes."""
    variants = []
    for combo in itertools.product(*(ABLATION_AXES[a] for a in axes)):
        changes, label = {}, []
        for axis, value in zip(axes, combo):
            if axis == "steps":
                changes["train_steps"] = int(round(base.train_steps * value))
                label.append(f"steps={changes['train_steps']}")
            else:
                changes[axis] = value
                label.append(f"{axis}={value}")
        variants.append((",".join(label) or "baseline", base.replace(**changes)))
    return variants


def cmd_ablate(args):
    axes = parse_axes(args.axes)
    base = resolve_config(args)
    records = _load_data(args.data_dir)
    if args.eval_dir:
        train_set, held_out = records, _load_data(args.eval_dir)
    else:
        cut = max(1, (3 * len(records)) // 4)
        if cut >= len(records):
            raise CommandError("dataset too small to hold out an evaluation split; pass --eval-dir", code=2)
        train_set, held_out = records[:cut], records[cut:]
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    for i, (label, cfg) in enumerate(ablation_variants(base, axes)):
        state = init_train_state(cfg)
        log = LossLog(os.path.join(args.out_dir, f"variant_{i:02d}.log.csv"))
        try:
            train_records(train_set, cfg, state, cfg.train_steps, None, log)
        except NumericalError as exc:
            raise CommandError(f"variant {label}: numerical error at step {exc.step}: {exc}", code=3) from None
        finally:
            log.close()
        result = evaluate(held_out, state.model, cfg)
        rows.append((label, result.mean_dice))
        print(f"{label}: mean Dice {result.mean_dice:.4f}", flush=True)
    with open(os.path.join(args.out_dir, "summary.tsv"), "w", encoding="utf-8") as fh:
        fh.write("component\tvariant\tmean_dice\n")
        component = " x ".join(AXIS_LABELS[a] for a in axes) or "Baseline"
        for label, score in rows:
            fh.write(f"{component}\t{label}\t{score:.6f}\n")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"dualdiff {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, CheckpointError) as exc:
        print(f"dualdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if os.environ.get("DUALDIFF_VERBOSE"):
        print(f"{args.command} took {time.perf_counter() - start:.2f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
