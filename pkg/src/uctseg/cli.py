"""Command-line entry points for the full phantom-to-report pipeline.

Subcommands: phantom (dataset synthesis), extract (patch/exemplar audit),
train, eval, errmap, exp1 (training-size comparison), exp2 (repeated
random splits). Every run writes a config echo plus its manifests,
checkpoints, delimited reports, and rendered figures under --out.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import figures, imagedata, metrics, patches, phantom, trainer
from .checkpoint import load_checkpoint
from .errors import DataError, TrainingDiverged
from .trainer import TrainConfig


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text!r}")
    return value


def _nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text!r}")
    return value


def _size_list(text: str) -> list[int]:
    try:
        sizes = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not sizes or any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError(f"sizes must be positive integers, got {text!r}")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uctseg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic slice dataset")
    p.add_argument("--count", type=_positive_int, default=33, help="slices to generate")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=_nonnegative_int, default=0)
    p.add_argument("--size", type=_positive_int, default=128, help="slice side length")
    p.add_argument("--overlap", type=float, default=0.6, help="dirt/bone intensity overlap in [0, 1]")
    p.add_argument("--bone-fraction", type=float, default=0.30)
    p.add_argument("--dirt-fraction", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.03, help="additive noise sigma")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("extract", help="extract patches and export the exemplar sets")
    _add_run_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train one network on a manifest")
    _add_run_flags(p)
    p.add_argument(
        "--train-count",
        type=_positive_int,
        default=None,
        help="split off this many images for training and hold out the rest",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=trainer.MODES, default=None,
                   help="require the checkpoint to be from this mode")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("errmap", help="render per-image misclassification maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_errmap)

    p = sub.add_parser("exp1", help="training-size comparison on a fixed test split")
    _add_run_flags(p)
    p.add_argument("--sizes", type=_size_list, default=[20, 10],
                   help="comma-separated training-set sizes (default 20,10)")
    p.add_argument("--seeds", type=_positive_int, default=3, help="training seeds per cell")
    p.set_defaults(func=cmd_exp1)

    p = sub.add_parser("exp2", help="mean/variance of F1 over repeated random splits")
    _add_run_flags(p)
    p.add_argument("--splits", type=_positive_int, default=10)
    p.add_argument("--train-count", type=_positive_int, default=20)
    p.set_defaults(func=cmd_exp2)

    return parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="TSV dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=_nonnegative_int, default=None, help="override the config seed")
    p.add_argument("--mode", choices=trainer.MODES, default=None, help="override the config mode")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------------
# shared plumbing


def _load_config(args) -> TrainConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "config", None):
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**overrides)


def _prepare_out(out_dir: str, config: TrainConfig | None = None) -> dict[str, str]:
    paths = {"root": out_dir}
    for sub in ("manifests", "checkpoints", "reports", "figures"):
        paths[sub] = os.path.join(out_dir, sub)
        os.makedirs(paths[sub], exist_ok=True)
    if config is not None:
        config.to_file(os.path.join(out_dir, "config.echo"))
    return paths


def _build_rep_set(manifest, config: TrainConfig):
    labeled = trainer.load_labeled_patches(manifest, config)
    return patches.select_representatives(
        labeled,
        bone_min_fraction=config.bone_min_fraction,
        dirt_min_fraction=config.dirt_min_fraction,
        other_max_fraction=config.other_max_fraction,
        max_per_class=config.max_per_class,
        per_step_count=config.p,
    )


def _train_one(manifest, config: TrainConfig, checkpoint_path, loss_csv_path, tag=""):
    rep_set = None
    if config.mode == "dsrdn" and config.k > 0:
        rep_set = _build_rep_set(manifest, config)
    prefix = f"[{tag}] " if tag else ""

    def log(status):
        print(
            f"{prefix}epoch {status['epoch'] + 1}/{config.epochs} "
            f"lr {status['lr']:.1e} mean total {status['mean_total']:.4f}",
            flush=True,
        )

    return trainer.train(
        manifest,
        rep_set,
        config,
        checkpoint_path=checkpoint_path,
        loss_csv_path=loss_csv_path,
        log=log,
    )


def _write_eval_outputs(paths, pooled, per_image, predictions, manifest, tag=""):
    suffix = f"_{tag}" if tag else ""
    rows = per_image + [("pooled", pooled)]
    metrics.write_dice_csv(os.path.join(paths["reports"], f"dice{suffix}.csv"), rows)
    metrics.write_summary_json(
        os.path.join(paths["reports"], f"summary{suffix}.json"), pooled, per_image
    )
    figures.plot_f1_bars(pooled, os.path.join(paths["figures"], f"f1_pooled{suffix}.png"))
    map_dir = os.path.join(paths["figures"], f"error_maps{suffix}")
    os.makedirs(map_dir, exist_ok=True)
    by_id = dict(predictions)
    count_rows = []
    for entry in manifest:
        image, labels = imagedata.load_pair(entry.image_path, entry.label_path)
        rgb, n_wrong = metrics.error_map(by_id[entry.identifier], labels, image)
        imagedata.save_rgb(rgb, os.path.join(map_dir, f"{entry.identifier}.png"))
        count_rows.append((entry.identifier, n_wrong))
    with open(os.path.join(paths["reports"], f"error_counts{suffix}.csv"), "w", encoding="utf-8") as fh:
        fh.write("image,errors\n")
        for identifier, n_wrong in count_rows:
            fh.write(f"{identifier},{n_wrong}\n")


def _f1_line(report: metrics.DiceReport) -> str:
    return " ".join(
        f"{name}={report.f1[c]:.4f}" for c, name in enumerate(imagedata.CLASS_NAMES)
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    config = phantom.PhantomConfig(
        width=args.size,
        height=args.size,
        bone_fraction_target=args.bone_fraction,
        dirt_fraction_target=args.dirt_fraction,
        intensity_overlap=args.overlap,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    manifest = phantom.generate_dataset(config, args.count, args.out)
    fractions = []
    for entry in manifest:
        labels = imagedata.load_labels(entry.label_path)
        summary = phantom.class_fraction_summary(labels)
        fractions.append([summary[name] for name in imagedata.CLASS_NAMES])
    means = np.mean(fractions, axis=0)
    print(f"wrote {len(manifest)} slices to {args.out}")
    print(
        "mean class fractions: "
        + " ".join(f"{name}={means[c]:.4f}" for c, name in enumerate(imagedata.CLASS_NAMES))
    )
    return 0


def cmd_extract(args) -> int:
    config = _load_config(args)
    paths = _prepare_out(args.out, config)
    manifest = imagedata.read_manifest(args.manifest, "all")
    labeled = trainer.load_labeled_patches(manifest, config)
    print(f"extracted {len(labeled)} patches from {len(manifest)} images")
    rep_set = patches.select_representatives(
        labeled,
        bone_min_fraction=config.bone_min_fraction,
        dirt_min_fraction=config.dirt_min_fraction,
        other_max_fraction=config.other_max_fraction,
        max_per_class=config.max_per_class,
        per_step_count=config.p,
    )
    index = patches.export_patch_set(rep_set, os.path.join(paths["root"], "representatives"))
    print(
        f"selected {len(rep_set.bone_patches)} bone and {len(rep_set.dirt_patches)} dirt "
        f"exemplars (per-step draw {rep_set.per_step_count}); index at {index}"
    )
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    paths = _prepare_out(args.out, config)
    manifest = imagedata.read_manifest(args.manifest, "all")
    if args.train_count is not None:
        train_m, test_m = imagedata.make_splits(manifest, args.train_count, config.seed)
        imagedata.write_manifest(test_m, os.path.join(paths["manifests"], "test.tsv"))
    else:
        train_m = manifest
    imagedata.write_manifest(train_m, os.path.join(paths["manifests"], "train.tsv"))
    ckpt_path = os.path.join(paths["checkpoints"], "model.ckpt")
    loss_path = os.path.join(paths["reports"], "loss_history.csv")
    ckpt = _train_one(train_m, config, ckpt_path, loss_path)
    figures.plot_loss_curves(ckpt.loss_history, os.path.join(paths["figures"], "loss_curves.png"))
    print(f"trained {config.mode} for {config.epochs} epochs ({len(ckpt.loss_history)} steps)")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = imagedata.read_manifest(args.manifest, "test")
    paths = _prepare_out(args.out)
    pooled, per_image, predictions = trainer.evaluate(ckpt, manifest, expected_mode=args.mode)
    _write_eval_outputs(paths, pooled, per_image, predictions, manifest)
    print(f"pooled F1 over {len(manifest)} images: {_f1_line(pooled)}")
    return 0


def cmd_errmap(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = imagedata.read_manifest(args.manifest, "test")
    paths = _prepare_out(args.out)
    pooled, per_image, predictions = trainer.evaluate(ckpt, manifest)
    _write_eval_outputs(paths, pooled, per_image, predictions, manifest)
    total_errors = pooled.total_pixels - pooled.correct_pixels
    print(f"wrote {len(manifest)} error maps ({total_errors} mislabeled pixels total)")
    return 0


def cmd_exp1(args) -> int:
    config = _load_config(args)
    paths = _prepare_out(args.out, config)
    manifest = imagedata.read_manifest(args.manifest, "all")
    sizes = sorted(args.sizes, reverse=True)
    train_full, test_m = imagedata.make_splits(manifest, sizes[0], config.seed)
    imagedata.write_manifest(train_full, os.path.join(paths["manifests"], "train_full.tsv"))
    imagedata.write_manifest(test_m, os.path.join(paths["manifests"], "test.tsv"))

    rows = []
    for mode in trainer.MODES:
        for size in sizes:
            sub_m = imagedata.DatasetManifest(train_full.entries[:size], f"train{size}")
            imagedata.write_manifest(
                sub_m, os.path.join(paths["manifests"], f"train{size}.tsv")
            )
            for s in range(args.seeds):
                run_seed = config.seed + s
                run_cfg = config.replace(mode=mode, seed=run_seed)
                tag = f"{mode}_n{size}_s{run_seed}"
                ckpt = _train_one(
                    sub_m,
                    run_cfg,
                    os.path.join(paths["checkpoints"], f"{tag}.ckpt"),
                    os.path.join(paths["reports"], f"loss_{tag}.csv"),
                    tag=tag,
                )
                pooled, _, _ = trainer.evaluate(ckpt, test_m)
                rows.append({"mode": mode, "size": size, "seed": run_seed, "f1": pooled.f1})
                print(f"[{tag}] {_f1_line(pooled)}", flush=True)

    results_path = os.path.join(paths["reports"], "exp1_results.csv")
    with open(results_path, "w", encoding="utf-8") as fh:
        fh.write("mode,size,seed,f1_air,f1_dirt,f1_bone\n")
        for r in rows:
            fh.write(
                f"{r['mode']},{r['size']},{r['seed']},"
                + ",".join(f"{v:.6f}" for v in r["f1"])
                + "\n"
            )

    if len(sizes) >= 2:
        big, small = sizes[0], sizes[-1]
        with open(os.path.join(paths["reports"], "exp1_deltas.csv"), "w", encoding="utf-8") as fh:
            fh.write("mode,class,median_delta\n")
            for mode in trainer.MODES:
                for c, name in enumerate(imagedata.CLASS_NAMES):
                    deltas = []
                    for s in range(args.seeds):
                        f_big = next(
                            r["f1"][c]
                            for r in rows
                            if r["mode"] == mode and r["size"] == big and r["seed"] == config.seed + s
                        )
                        f_small = next(
                            r["f1"][c]
                            for r in rows
                            if r["mode"] == mode and r["size"] == small and r["seed"] == config.seed + s
                        )
                        deltas.append(f_big - f_small)
                    fh.write(f"{mode},{name},{np.median(deltas):.6f}\n")

    figures.plot_train_size_comparison(
        rows, os.path.join(paths["figures"], "exp1_f1_vs_train_size.png")
    )
    print(f"results: {results_path}")
    return 0


def cmd_exp2(args) -> int:
    config = _load_config(args)
    paths = _prepare_out(args.out, config)
    manifest = imagedata.read_manifest(args.manifest, "all")

    reports_by_mode: dict[str, list[metrics.DiceReport]] = {m: [] for m in trainer.MODES}
    f1_path = os.path.join(paths["reports"], "exp2_f1.csv")
    with open(f1_path, "w", encoding="utf-8") as fh:
        fh.write("split,mode,f1_air,f1_dirt,f1_bone\n")
        for i in range(args.splits):
            split_seed = config.seed + i
            train_m, test_m = imagedata.make_splits(manifest, args.train_count, split_seed)
            imagedata.write_manifest(
                train_m, os.path.join(paths["manifests"], f"split{i:02d}_train.tsv")
            )
            imagedata.write_manifest(
                test_m, os.path.join(paths["manifests"], f"split{i:02d}_test.tsv")
            )
            for mode in trainer.MODES:
                run_cfg = config.replace(mode=mode, seed=split_seed)
                tag = f"split{i:02d}_{mode}"
                ckpt = _train_one(
                    train_m,
                    run_cfg,
                    os.path.join(paths["checkpoints"], f"{tag}.ckpt"),
                    os.path.join(paths["reports"], f"loss_{tag}.csv"),
                    tag=tag,
                )
                pooled, _, _ = trainer.evaluate(ckpt, test_m)
                reports_by_mode[mode].append(pooled)
                fh.write(f"{i},{mode}," + ",".join(f"{v:.6f}" for v in pooled.f1) + "\n")
                print(f"[{tag}] {_f1_line(pooled)}", flush=True)

    distributions = {}
    with open(os.path.join(paths["reports"], "exp2_summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("mode,class,mean_f1,variance\n")
        for mode, reports in reports_by_mode.items():
            dist = metrics.summarize_splits(reports)
            distributions[mode] = dist
            for c, name in enumerate(imagedata.CLASS_NAMES):
                fh.write(f"{mode},{name},{dist.mean[c]:.6f},{dist.variance[c]:.8f}\n")
            table = metrics.gaussian_density_table(dist)
            np.savetxt(
                os.path.join(paths["reports"], f"exp2_density_{mode}.csv"),
                table,
                delimiter=",",
                header="f1," + ",".join(imagedata.CLASS_NAMES),
                comments="",
            )

    figures.plot_split_distributions(
        distributions, os.path.join(paths["figures"], "exp2_distributions.png")
    )
    for mode, dist in distributions.items():
        print(
            f"{mode}: "
            + " ".join(
                f"{name} mean={dist.mean[c]:.4f} var={dist.variance[c]:.2e}"
                for c, name in enumerate(imagedata.CLASS_NAMES)
            )
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
