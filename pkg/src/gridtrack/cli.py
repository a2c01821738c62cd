"""Command line pipeline: generate corpora, train models, evaluate them, and
render frame-by-frame pixmaps.

Heavy modules are imported inside each command so the thread-count override
(GRIDTRACK_THREADS) is applied to the BLAS environment before numpy starts
any pools. Every command is deterministic given its arguments and seeds, and
exits 0 only when all requested outputs were written.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_override() -> None:
    n = os.environ.get("GRIDTRACK_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


def _uniform_frame_count(manifest) -> int:
    counts = set(manifest.frame_counts)
    if len(counts) != 1:
        raise ValueError(
            f"sequences have differing frame counts {sorted(counts)}; "
            "one shared show/blank schedule needs a common length"
        )
    return counts.pop()


def _check_grid(model, manifest, ckpt_path) -> None:
    if model.config.grid != manifest.grid:
        raise ValueError(
            f"checkpoint {ckpt_path} was trained on grid {model.config.grid}, "
            f"which does not match the dataset grid {manifest.grid}"
        )


# ------------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    from .dataset import write_dataset
    from .geometry import GridSpec
    from .simulator import scenario_builders

    if args.sequences < 1:
        raise ValueError("--sequences must be at least 1")
    spec = GridSpec(size_cells=args.grid, cell_size=args.cell_size)
    builder = scenario_builders()[args.scenario]
    kwargs = {"frame_rate": args.frame_rate}
    if args.scenario != "occlusion":
        kwargs["frames"] = args.frames
    batches = [builder(args.seed + i, spec, **kwargs) for i in range(args.sequences)]
    manifest = write_dataset(
        args.out, batches, frame_rate=args.frame_rate, provenance="synthetic", seed=args.seed
    )
    print(
        f"wrote {manifest.sequence_count} x {manifest.frame_counts[0]}-frame "
        f"sequences ({args.scenario}, grid {args.grid}) to {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    from .dataset import read_dataset
    from .model import ModelConfig, build, save_checkpoint
    from .training import ShowBlankSchedule, TrainConfig, train

    manifest, batches = read_dataset(args.data)
    frames = _uniform_frame_count(manifest)
    schedule = ShowBlankSchedule(total_frames=frames, show=args.show, blank=args.blank)
    moving = any(not b.is_static() for b in batches)
    cfg = TrainConfig(
        schedule=schedule,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        batch_size=args.batch_size,
        max_steps=args.steps,
        seed=args.seed,
        moving_sensor=moving,
        baseline_override=args.baseline_override,
        plateau_patience=args.plateau_patience,
        checkpoint_every=args.checkpoint_every,
        checkpoint_dir=args.checkpoint_dir,
        log_path=args.log,
    )
    model = build(
        ModelConfig.for_variant(args.variant, manifest.grid, use_stm=args.stm == "on"),
        seed=args.seed,
    )
    result = train(model, batches, cfg)
    save_checkpoint(result.model, args.out)
    last = f"{result.losses[-1]:.6f}" if result.losses else "n/a"
    print(
        f"trained {args.variant} for {result.steps} steps "
        f"(stop: {result.stop_reason}, final loss {last})"
    )
    print(f"checkpoint: {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import read_dataset
    from .evaluation import compare_models, f1_horizon
    from .model import load_checkpoint
    from .render import plot_curves
    from .training import ShowBlankSchedule

    if len(args.ckpt) > 2:
        raise ValueError("eval compares at most two checkpoints")
    manifest, batches = read_dataset(args.data)
    frames = _uniform_frame_count(manifest)
    schedule = ShowBlankSchedule(total_frames=frames, show=args.show, blank=args.blank)
    models = []
    for path in args.ckpt:
        model = load_checkpoint(path)
        _check_grid(model, manifest, path)
        models.append(model)
    labels = args.label or [
        os.path.splitext(os.path.basename(p))[0] for p in args.ckpt
    ]
    if len(labels) != len(models):
        raise ValueError(f"{len(models)} checkpoints but {len(labels)} labels")
    if len(set(labels)) != len(labels):
        raise ValueError(f"labels must be distinct, got {labels}")
    os.makedirs(args.out, exist_ok=True)
    curves = [
        f1_horizon(m, batches, schedule, threshold=args.threshold) for m in models
    ]
    written = []
    for label, curve in zip(labels, curves):
        path = os.path.join(args.out, f"horizon_{label}.txt")
        with open(path, "w") as fh:
            fh.write(curve.table() + "\n")
        written.append(path)
        print(f"[{label}]")
        print(curve.table())
    plot_path = os.path.join(args.out, "curves.ppm")
    if len(curves) == 2:
        cmp = compare_models(curves[0], curves[1], label_a=labels[0], label_b=labels[1])
        path = os.path.join(args.out, "comparison.txt")
        with open(path, "w") as fh:
            fh.write(cmp.table() + "\n")
        written.append(path)
        print(cmp.table())
        cmp.save_plot(plot_path)
    else:
        plot_curves(
            plot_path,
            {labels[0]: (curves[0].offsets, curves[0].f1)},
            title="f1 by prediction offset",
        )
    written.append(plot_path)
    print("wrote " + ", ".join(written))
    return 0


def cmd_render(args) -> int:
    from .dataset import read_dataset
    from .geometry import Pose2
    from .model import BLANK, decode, initial_state, load_checkpoint, step
    from .render import frame_panel, hidden_tiles, write_ppm
    from .tensor import no_grad
    from .training import ShowBlankSchedule

    manifest, batches = read_dataset(args.data)
    if not (0 <= args.sequence < len(batches)):
        raise ValueError(
            f"--sequence {args.sequence} out of range; dataset has {len(batches)}"
        )
    batch = batches[args.sequence]
    model = load_checkpoint(args.ckpt)
    _check_grid(model, manifest, args.ckpt)
    show = args.show if args.show is not None else batch.frames
    blank = args.blank if args.blank is not None else 0
    schedule = ShowBlankSchedule(total_frames=batch.frames, show=show, blank=blank)
    if args.overlay and batch.truth_occ is None:
        raise ValueError("truth overlay requested but the sequence carries no ground truth")
    with_truth = batch.truth_occ is not None
    os.makedirs(args.out, exist_ok=True)
    identity = Pose2.identity()
    written = 0
    with no_grad():
        h = initial_state(model)
        for f in range(batch.frames):
            ego = batch.rel_transforms[f] if model.config.use_stm else identity
            x = batch.observations[f] if schedule.is_shown(f) else BLANK
            h = step(model, h, x, ego)
            pred = decode(model, h).data[0, 0]
            panel = frame_panel(
                batch.observations[f],
                pred,
                truth=batch.truth_occ[f] if with_truth else None,
                threshold=args.threshold,
                scale=args.scale,
            )
            write_ppm(os.path.join(args.out, f"frame_{f:03d}.ppm"), panel)
            written += 1
            if args.hidden:
                tiles = hidden_tiles([layer.data[0] for layer in h.layers])
                write_ppm(os.path.join(args.out, f"hidden_{f:03d}.ppm"), tiles)
                written += 1
    print(f"wrote {written} images to {args.out}")
    return 0


# -------------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    from .model import variant_names

    parser = argparse.ArgumentParser(
        prog="gridtrack",
        description="occupancy-grid tracking: data generation, training, "
        "evaluation, rendering",
        epilog="environment: GRIDTRACK_THREADS=N caps the numpy/BLAS thread pools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument(
        "--scenario",
        required=True,
        choices=("static-crossing", "occlusion", "moving-straight", "moving-turning"),
    )
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--sequences", type=int, default=8)
    gen.add_argument("--out", required=True)
    gen.add_argument("--grid", type=int, default=51, help="grid side length in cells")
    gen.add_argument("--cell-size", type=float, default=0.2, help="cell size in meters")
    gen.add_argument("--frames", type=int, default=20)
    gen.add_argument("--frame-rate", type=float, default=8.0)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a model on a dataset directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--variant", default="GRU3DilConv_16", choices=variant_names())
    tr.add_argument("--stm", choices=("on", "off"), default="off",
                    help="egomotion compensation of the recurrent state")
    tr.add_argument("--show", type=int, default=10)
    tr.add_argument("--blank", type=int, default=10)
    tr.add_argument("--steps", type=int, default=100)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True, help="checkpoint path to write")
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--optimizer", choices=("adam", "sgd_momentum"), default="adam")
    tr.add_argument("--batch-size", type=int, default=1)
    tr.add_argument("--baseline-override", action="store_true",
                    help="allow --stm off on moving-sensor data")
    tr.add_argument("--plateau-patience", type=int, default=500)
    tr.add_argument("--checkpoint-every", type=int, default=0)
    tr.add_argument("--checkpoint-dir", default=None)
    tr.add_argument("--log", default=None, help="per-step loss log path")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score checkpoints over the blanked horizon")
    ev.add_argument("--ckpt", action="append", required=True,
                    help="checkpoint to score; give twice to compare two")
    ev.add_argument("--data", required=True)
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--show", type=int, default=10)
    ev.add_argument("--blank", type=int, default=10)
    ev.add_argument("--label", action="append", default=None,
                    help="label per checkpoint (defaults to file stems)")
    ev.add_argument("--out", default="eval_out")
    ev.set_defaults(func=cmd_eval)

    rd = sub.add_parser("render", help="render per-frame panels as pixmaps")
    rd.add_argument("--ckpt", required=True)
    rd.add_argument("--data", required=True)
    rd.add_argument("--sequence", type=int, default=0)
    rd.add_argument("--out", default="render_out")
    rd.add_argument("--threshold", type=float, default=0.5)
    rd.add_argument("--scale", type=int, default=4)
    rd.add_argument("--show", type=int, default=None,
                    help="shown frames per cycle (default: all frames shown)")
    rd.add_argument("--blank", type=int, default=None)
    rd.add_argument("--hidden", action="store_true",
                    help="also write hidden-layer activation tiles")
    rd.add_argument("--overlay", action="store_true",
                    help="require the truth overlay (error if truth is absent)")
    rd.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    _apply_thread_override()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
