"""Command-line entry point: generate | train | eval | table | gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Relative --data-dir/--out paths are resolved under $CONSISTSEG_OUTPUT_ROOT
when it is set.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, save_config
from .deform import DeformParams
from .losses import batch_loss
from .metrics import MetricsRow, evaluate_prediction, postprocess, write_aggregate_csv, \
    write_metrics_csv, write_plot_data
from .model import NetworkConfig, UNet
from .synthdata import DatasetOnDisk, SceneParams, generate_dataset, load_dataset
from .trainer import ExperimentData, TrainingDiverged, predict_labels, prepare_item, run_cell

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class DataError(RuntimeError):
    pass


def _resolve(path: str) -> Path:
    root = os.environ.get("CONSISTSEG_OUTPUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return apply_overrides(cfg, args.set or [])


def _experiment_data(dataset: DatasetOnDisk, labeled_size: int) -> ExperimentData:
    plan = dataset.plan
    if labeled_size not in plan.labeled_subsets:
        raise DataError(f"dataset has no labeled subset of size {labeled_size}; "
                        f"available: {sorted(plan.labeled_subsets)}")
    labeled = [dataset.load_scene(i) for i in plan.labeled_subsets[labeled_size]]
    train_unlabeled = [(i, dataset.load_scene(i).image)
                       for i in plan.unlabeled_train_ids(labeled_size)]
    val = [dataset.load_scene(i) for i in plan.val_ids]
    test = [dataset.load_scene(i) for i in plan.test_ids]
    extra = [(i, s.image) for i, s in zip(plan.val_ids, val)]
    extra += [(i, s.image) for i, s in zip(plan.test_ids, test)]
    return ExperimentData(labeled, train_unlabeled, val, test, extra)


# -- subcommands -----------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve(args.data_dir)
    scene_params = SceneParams(size=cfg.scene_size, n_structures=cfg.n_structures)
    generate_dataset(out, cfg.n_total, cfg.data_seed, scene_params, cfg.train_fraction)
    save_config(cfg, out / "config.used")
    print(f"generate: wrote {cfg.n_total} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    dataset = load_dataset(_resolve(args.data_dir))
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.used")
    dparams = cfg.deform_params()
    summary_rows = []
    for size in cfg.labeled_size_list():
        data = _experiment_data(dataset, size)
        for seed in cfg.seed_list():
            for regime in cfg.regime_list():
                cell_dir = out / f"size{size}" / f"{regime}_s{seed}"
                info = run_cell(data, regime, cfg.train_config(), dparams,
                                cfg.network_config(), seed, cell_dir)
                summary_rows.append([regime, size, seed, repr(info["val_miou"]),
                                     repr(info["test_miou"]), info["steps"]])
                print(f"train: {regime} size={size} seed={seed} "
                      f"val={info['val_miou']:.4f} test={info['test_miou']:.4f} "
                      f"steps={info['steps']}")
    with open(out / "runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regime", "labeled_size", "seed", "val_miou", "test_miou", "steps"])
        writer.writerows(summary_rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    dataset = load_dataset(_resolve(args.data_dir))
    out = _resolve(args.out)
    rows_raw: list[MetricsRow] = []
    rows_post: list[MetricsRow] = []
    n_classes = cfg.n_classes
    for size in cfg.labeled_size_list():
        data = _experiment_data(dataset, size)
        test_images = [s.image for s in data.test]
        for seed in cfg.seed_list():
            for regime in cfg.regime_list():
                ckpt = out / f"size{size}" / f"{regime}_s{seed}" / "checkpoint.wct"
                if not ckpt.exists():
                    raise DataError(f"missing checkpoint: {ckpt}")
                net = UNet(cfg.network_config(), np.random.default_rng(0))
                net.load(ckpt)
                preds = predict_labels(net, test_images)
                for variant, rows in (("raw", rows_raw), ("post", rows_post)):
                    per_image = []
                    for pred, scene in zip(preds, data.test):
                        p = postprocess(pred, n_classes) if variant == "post" else pred
                        per_image.append(evaluate_prediction(p, scene.labelmap, n_classes,
                                                             cfg.pixel_size))
                    ious = np.mean([pi[0] for pi in per_image], axis=0)
                    macds = []
                    for ci in range(n_classes - 1):
                        vals = [pi[1][ci] for pi in per_image if pi[1][ci] is not None]
                        macds.append(float(np.mean(vals)) if vals else None)
                    rows.append(MetricsRow(regime, size, seed, [float(v) for v in ious],
                                           float(np.mean(ious)), macds))
    write_metrics_csv(out / "metrics.csv", rows_raw)
    write_metrics_csv(out / "metrics_post.csv", rows_post)
    warnings = write_aggregate_csv(out / "table.csv", rows_raw)
    write_aggregate_csv(out / "table_post.csv", rows_post)
    write_plot_data(out / "plotdata.csv", rows_raw)
    for w in warnings:
        print(f"eval: warning: {w}", file=sys.stderr)
    print(f"eval: wrote metrics for {len(rows_raw)} cells to {out}")
    return EXIT_OK


def cmd_table(args) -> int:
    out = _resolve(args.out)
    path = out / "metrics.csv"
    if not path.exists():
        raise DataError(f"missing metrics file: {path}")
    groups: dict[tuple[str, int, int], dict[int, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["regime"], int(row["labeled_size"]), int(row["seed"]))
            groups.setdefault(key, {})[int(row["class"])] = float(row["iou"])
    rows = [MetricsRow(regime, size, seed, [ious[c] for c in sorted(ious)],
                       float(np.mean(list(ious.values()))), [None] * len(ious))
            for (regime, size, seed), ious in groups.items()]
    warnings = write_aggregate_csv(out / "table.csv", rows)
    write_plot_data(out / "plotdata.csv", rows)
    for w in warnings:
        print(f"table: warning: {w}", file=sys.stderr)
    print(f"table: aggregated {len(rows)} rows into {out / 'table.csv'}")
    return EXIT_OK


def gradcheck_fixture(seed: int = 7):
    """Self-contained 16x16 fixture: tiny net, 2 labeled + 2 unlabeled items."""
    n = 16
    n_classes = 3
    rng = np.random.default_rng(seed)
    net_cfg = NetworkConfig(input_size=n, n_classes=n_classes, depth=1, base_channels=4)
    net = UNet(net_cfg, rng)
    # zero-initialized biases put many pre-activations exactly on the relu
    # kink (a dead patch contributes conv = 0 + bias = 0), where central
    # differences and the subgradient legitimately disagree; nudge off it
    for p in net.params:
        p.data = p.data + rng.normal(0.0, 0.01, size=p.shape)
    # the size-scaled defaults are too aggressive to invert reliably at
    # 16x16 (reflective-border smoothing inflates the variance), so the
    # fixture pins a gentler field that still deforms visibly
    dparams = DeformParams(width=n, height=n, amplitude=10.0, sigma=3.0,
                           elastic_prob=0.7)
    items = []
    for k in range(4):
        image = rng.uniform(0.0, 1.0, size=(n, n))
        labelmap = rng.integers(0, n_classes, size=(n, n)) if k < 2 else None
        items.append(prepare_item(image, labelmap, dparams, n_classes, rng))
    return net, items


def cmd_gradcheck(args) -> int:
    net, items = gradcheck_fixture()
    lam = 1.0

    def loss_fn():
        loss, _ = batch_loss(items, net, lam)
        return loss

    err = T.finite_diff_check(loss_fn, net.params, eps=args.eps,
                              max_entries_per_param=args.max_entries)
    print(f"gradcheck: max relative error {err:.3e} (threshold 1e-4)")
    if not np.isfinite(err) or err >= 1e-4:
        print("gradcheck: FAIL", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradcheck: PASS")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consistseg",
        description="Semi-supervised segmentation via consistency under elastic deformations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_dir=False, out=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if data_dir:
            p.add_argument("--data-dir", required=True, help="dataset directory")
        if out:
            p.add_argument("--out", required=True, help="experiment output directory")

    p = sub.add_parser("generate", help="write the synthetic dataset")
    common(p)
    p.add_argument("--data-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the regime x size x seed training grid")
    common(p, data_dir=True, out=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute test metrics for trained checkpoints")
    common(p, data_dir=True, out=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("table", help="aggregate metrics.csv into the results table")
    common(p, out=True)
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("gradcheck", help="finite-difference check of the composite loss")
    common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-entries", type=int, default=None,
                   help="limit checked entries per parameter (default: all)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, PermissionError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
