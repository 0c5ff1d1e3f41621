"""Command line entry points: ``train``, ``generate``, ``eval``, ``train-oracle``, ``inspect``.

Run configs are flat ``key = value`` files. Recognized keys:

    lr, lr_g, lr_d, beta1, beta2, batch_size, epochs, noise_dim, seed,
    d2_enabled, d_steps_per_g_step, n_samples, g_base_channels,
    d_base_channels, g_loss                     training hyperparameters
    train_images, train_labels                  MNIST IDX files (required)
    schema                                      class schema file (optional)
    out_dir                                     output directory (required)
    checkpoint_interval                         steps between checkpoints
    grid.rows, grid.cols                        layout of periodic sample grids

Unknown keys are rejected. Exit codes: 0 success, 2 bad config or
arguments, 3 training aborted on a non-finite value, 4 oracle unusable,
5 output directory locked by another run.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass

import numpy as np
from filelock import FileLock, Timeout

from .checkpoint import CheckpointError
from .conditioning import ConditionSchema, SchemaError, load_schema, make_condition, mnist_schema, sample_distinct_pairs
from .dataset import IdxFormatError, build_dataset, iter_epoch, load_idx_images, load_idx_labels, load_mnist
from .diagnostics import (
    OracleAccuracyError,
    build_report,
    calibrate_duplicate_threshold,
    load_oracle,
    save_oracle,
    train_eval_classifier,
)
from .grid import export_grid, write_pgm, quantize
from .kvfile import ConfigError, parse_bool, read_kv_file
from .training import (
    NonFiniteError,
    TrainConfig,
    load_checkpoint,
    new_state,
    sample_images,
    set_single_threaded,
    train,
    train_step,
)

log = logging.getLogger("crgan")

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE, EXIT_ORACLE, EXIT_LOCKED = 0, 2, 3, 4, 5

# RMS distance below which two paired-digit images count as repeats. Calibrated on
# 400 disjoint sets of 150 composed MNIST training pairs with mixed conditions:
# the smallest per-set threshold keeping the rate under 1% was 0.2416.
DEFAULT_DUPLICATE_THRESHOLD = 0.24
LOCK_NAME = ".crgan.lock"
GRID_SEED = 1234

_INT_KEYS = {"batch_size", "epochs", "noise_dim", "seed", "d_steps_per_g_step", "n_samples", "g_base_channels", "d_base_channels"}
_FLOAT_KEYS = {"lr", "lr_g", "lr_d", "beta1", "beta2"}
_RUN_KEYS = {"train_images", "train_labels", "schema", "out_dir", "checkpoint_interval", "grid.rows", "grid.cols"}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _RUN_KEYS | {"d2_enabled", "g_loss"}


@dataclass
class RunConfig:
    train: TrainConfig
    train_images: str
    train_labels: str
    out_dir: str
    schema_path: str | None = None
    checkpoint_interval: int = 1000
    grid_rows: int = 6
    grid_cols: int = 6

    def schema(self) -> ConditionSchema:
        return load_schema(self.schema_path) if self.schema_path else mnist_schema()


def load_run_config(path) -> RunConfig:
    """Parse and validate a run config; every problem is a :class:`ConfigError`."""
    entries = read_kv_file(path)
    base = os.path.dirname(os.path.abspath(path))
    train_kw: dict = {}
    run_kw: dict = {}
    for key, (value, line) in entries.items():
        if key not in KNOWN_KEYS:
            raise ConfigError("unknown key", path, line, key)
        try:
            if key in _INT_KEYS:
                train_kw[key] = int(value)
            elif key in _FLOAT_KEYS:
                train_kw[key] = float(value)
            elif key == "d2_enabled":
                train_kw[key] = parse_bool(value)
            elif key == "g_loss":
                train_kw[key] = value
            elif key in ("checkpoint_interval", "grid.rows", "grid.cols"):
                run_kw[key.replace(".", "_")] = int(value)
            else:
                run_kw[key] = value if os.path.isabs(value) else os.path.join(base, value)
        except ValueError as exc:
            raise ConfigError(str(exc), path, line, key) from None
    for required in ("train_images", "train_labels", "out_dir"):
        if required not in run_kw:
            raise ConfigError("missing required key", path, key=required)
    try:
        tc = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None
    for key in ("train_images", "train_labels", "schema"):
        if key in run_kw and not os.path.exists(run_kw[key]):
            raise ConfigError(f"path does not exist: {run_kw[key]}", path, entries[key][1], key)
    out_dir = run_kw["out_dir"]
    parent = out_dir if os.path.isdir(out_dir) else os.path.dirname(out_dir) or "."
    if not os.access(parent, os.W_OK):
        raise ConfigError(f"output directory not writable: {out_dir}", path, entries["out_dir"][1], "out_dir")
    for key in ("checkpoint_interval", "grid_rows", "grid_cols"):
        if key in run_kw and run_kw[key] < 1:
            raise ConfigError("must be >= 1", path, key=key.replace("grid_", "grid."))
    cfg = RunConfig(
        train=tc,
        train_images=run_kw["train_images"],
        train_labels=run_kw["train_labels"],
        out_dir=out_dir,
        schema_path=run_kw.get("schema"),
        **{k: run_kw[k] for k in ("checkpoint_interval", "grid_rows", "grid_cols") if k in run_kw},
    )
    try:
        schema = cfg.schema()
    except (ConfigError, SchemaError) as exc:
        raise ConfigError(f"schema: {exc}", path, key="schema") from None
    if schema.num_classes != tc.num_classes:
        raise ConfigError(f"schema has {schema.num_classes} classes, training expects {tc.num_classes}", path, key="schema")
    return cfg


def grid_layout(count: int) -> tuple[int, int]:
    rows = math.isqrt(count)
    if rows * rows < count:
        rows += 1
    cols = -(-count // rows)
    return rows, cols


def _grid_conditions(n: int, num_classes: int) -> np.ndarray:
    return sample_distinct_pairs(np.random.default_rng(GRID_SEED), n, num_classes)


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config)
        images = load_idx_images(cfg.train_images)
        labels = load_idx_labels(cfg.train_labels)
    except (ConfigError, IdxFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    set_single_threaded()
    tc = cfg.train
    dataset = build_dataset(images, labels, tc.n_samples, tc.seed)

    if args.dry_run:
        state = new_state(tc)
        batch = next(iter_epoch(dataset, tc.batch_size, tc.seed, 0))
        _, tel = train_step(state, batch)
        print(f"dry run ok: {tel.to_line()}")
        return EXIT_OK

    os.makedirs(cfg.out_dir, exist_ok=True)
    lock = FileLock(os.path.join(cfg.out_dir, LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        print(f"error: {cfg.out_dir} is in use by another run", file=sys.stderr)
        return EXIT_LOCKED
    n_grid = cfg.grid_rows * cfg.grid_cols
    grid_conds = _grid_conditions(n_grid, tc.num_classes)

    def write_grid(state, path):
        imgs = sample_images(state.gen, grid_conds, seed=GRID_SEED)
        export_grid(imgs, cfg.grid_rows, cfg.grid_cols, os.path.join(cfg.out_dir, f"grid_step_{state.step:07d}.pgm"))

    try:
        result = train(
            tc,
            dataset,
            out_dir=cfg.out_dir,
            checkpoint_interval=cfg.checkpoint_interval,
            resume_from=args.resume,
            on_checkpoint=write_grid,
            progress_every=100,
        )
    except NonFiniteError as exc:
        print(f"error: training aborted: {exc}; last checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_NONFINITE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        lock.release()
    print(f"finished {result.state.step} steps; final checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        schema = load_schema(args.schema) if args.schema else mnist_schema()
        classes = schema.parse_classes(args.classes)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.count < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        state = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if schema.num_classes != state.config.num_classes:
        print(f"error: schema has {schema.num_classes} classes, checkpoint has {state.config.num_classes}", file=sys.stderr)
        return EXIT_CONFIG
    cond = make_condition(classes, schema)
    if int(cond.sum()) != 2:
        log.warning("condition %s has %d classes; training used exactly 2 distinct classes per image",
                    args.classes, int(cond.sum()))
    set_single_threaded()
    conds = np.repeat(cond[None], args.count, axis=0)
    images = sample_images(state.gen, conds, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    rows, cols = grid_layout(args.count)
    export_grid(images, rows, cols, os.path.join(args.out, "grid.pgm"))
    q = quantize(images.numpy())[:, 0]
    for i, img in enumerate(q):
        write_pgm(os.path.join(args.out, f"sample_{i:04d}.pgm"), img)
    print(f"wrote {args.count} samples ({rows}x{cols} grid) to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.n < 2:
        print(f"error: --n must be >= 2, got {args.n}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        state = load_checkpoint(args.checkpoint)
        oracle = load_oracle(args.oracle)
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not oracle.usable():
        print(f"error: oracle accuracy {oracle.test_accuracy:.4f} is below the 0.98 requirement", file=sys.stderr)
        return EXIT_ORACLE
    set_single_threaded()
    threshold = args.threshold
    if threshold is None and args.mnist_dir:
        images, labels = load_mnist(args.mnist_dir, "test")
        real = build_dataset(images, labels, args.n * 10, args.seed + 1)
        threshold = calibrate_duplicate_threshold([real.images(slice(i * args.n, (i + 1) * args.n)) for i in range(10)])
    if threshold is None:
        threshold = DEFAULT_DUPLICATE_THRESHOLD
    conds = sample_distinct_pairs(np.random.default_rng(args.seed), args.n, state.config.num_classes)
    images = sample_images(state.gen, conds, seed=args.seed + 1)
    try:
        report = build_report(images, conds, oracle, threshold)
    except OracleAccuracyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(args.out, "report.kv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_kv())
    rows, cols = grid_layout(args.n)
    export_grid(images, rows, cols, os.path.join(args.out, "eval_grid.pgm"))
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_train_oracle(args) -> int:
    set_single_threaded()
    try:
        train_set = load_mnist(args.mnist_dir, "train")
        test_set = load_mnist(args.mnist_dir, "test")
    except (IdxFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        oracle = train_eval_classifier(*train_set, *test_set, seed=args.seed, epochs=args.epochs)
    except OracleAccuracyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    save_oracle(oracle, args.out)
    print(f"oracle held-out accuracy {oracle.test_accuracy:.4f}; saved to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .diagnostics import analyze_telemetry

    if args.checkpoint:
        try:
            state = load_checkpoint(args.checkpoint)
        except (CheckpointError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"step {state.step}")
        for k, v in dataclasses.asdict(state.config).items():
            print(f"{k} = {v}")
        for k, v in state.disc.parameter_counts().items():
            print(f"params.{k} = {v}")
    if args.telemetry:
        try:
            summary = analyze_telemetry(args.telemetry, args.steps_per_epoch, args.spike_multiple)
        except (ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(summary.to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the GAN from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--dry-run", action="store_true", help="validate, build models, run one step, write nothing")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample images for a list of classes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classes", required=True, help="comma-separated class names or indices")
    p.add_argument("--count", type=int, default=36)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--schema", help="class schema file (default: digits 0-9)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="diversity, repetition, and adherence report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--n", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, help="near-duplicate RMS threshold")
    p.add_argument("--mnist-dir", help="calibrate the threshold on real pairs from this MNIST directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-oracle", help="train the digit classifier used by eval")
    p.add_argument("--mnist-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=3)
    p.set_defaults(func=cmd_train_oracle)

    p = sub.add_parser("inspect", help="summarize a checkpoint and/or telemetry file")
    p.add_argument("--checkpoint")
    p.add_argument("--telemetry")
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--spike-multiple", type=float, default=5.0)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
