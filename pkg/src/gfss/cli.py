"""Command line entry point: ``gfss <command> [options]``.

Artifacts go under ``$GFSS_ARTIFACT_ROOT`` (default ``./artifacts``)::

    data/          synthetic dataset (train/, test/, dataset.cfg)
    checkpoints/   *.ckpt plus a *.cfg snapshot of the config that produced it
    logs/          per-step loss CSVs and gfss.log
    reports/       metric CSVs and weight statistics
    previews/      augmentation overlays

Configuration is layered: built-in preset < ``--config`` file < command line flags.
The file is flat ``key = value`` text; ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from gfss.data import (
    DatasetSpec,
    base_training_set,
    denormalize,
    generate_synthetic_dataset,
    load_split,
    sample_support_set,
    save_dataset,
    split_folds,
)
from gfss.errors import ConfigurationError, GFSSError

log = logging.getLogger("gfss")

ARTIFACT_ENV = "GFSS_ARTIFACT_ROOT"
SUBDIRS = ("checkpoints", "logs", "reports", "previews")
DATASET_FILE = "dataset.cfg"

# dataset keys that are not also training keys; ``seed`` and ``num_folds`` are shared
_DATA_KEYS = ("num_classes", "images_per_class", "image_size", "test_images_per_class", "second_object_prob")
_CLI_KEYS = ("preset", "novel_classes")


class UsageError(Exception):
    """Bad configuration or arguments; exit status 2."""


# -- config files and value parsing ---------------------------------------------------

def _train_fields():
    from gfss.training import TrainConfig

    return {f.name: f for f in dataclasses.fields(TrainConfig)}


def known_keys() -> set[str]:
    return set(_train_fields()) | set(_DATA_KEYS) | set(_CLI_KEYS)


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key = value`` lines. Unknown keys are a usage error."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    known = known_keys()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def write_config_file(path, values: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, (tuple, list)):
            value = "x".join(str(v) for v in value) if key == "image_size" else ",".join(str(v) for v in value)
        lines.append(f"{key} = {'none' if value is None else value}\n")
    path.write_text("".join(lines))
    return path


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        return None if str(text).strip().lower() in ("none", "") else conv(text)

    return parse


_TRAIN_PARSERS = {
    "lr": float, "momentum": float, "weight_decay": float, "poly_power": float, "aux_tau": float,
    "ccl_ratio": float, "finetune_lr": _optional(float),
    "pretrain_epochs": int, "finetune_epochs": int, "batch_size": int, "crop_size": int, "seed": int,
    "shots": int, "fold": int, "num_folds": int, "feature_dim": int, "stride": int, "cutout_size": int,
    "final_activation": _parse_bool, "use_aux": _parse_bool, "npm_scale": _parse_bool,
    "npm_fusion_bias": _parse_bool, "ccl_stop_gradient": _parse_bool,
    "finetune_optimizer": _optional(str),
}


def _parse_size(text: str) -> tuple[int, int]:
    parts = str(text).lower().replace(",", "x").split("x")
    if len(parts) == 1:
        parts = parts * 2
    h, w = (int(p) for p in parts)
    return h, w


_DATA_PARSERS = {
    "num_classes": int, "images_per_class": int, "image_size": _parse_size,
    "test_images_per_class": _optional(int), "second_object_prob": float,
}


def _convert(key: str, value):
    if not isinstance(value, str):
        return value
    conv = _TRAIN_PARSERS.get(key) or _DATA_PARSERS.get(key) or str
    try:
        return conv(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r} ({exc})") from exc


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser, data_keys: bool = False):
    """One flag per config key; values are strings, converted after layering."""
    group = parser.add_argument_group("configuration (override --config)")
    group.add_argument("--config", help="flat key = value file")
    group.add_argument("--preset", choices=("desk", "full"), default=None,
                       help="built-in defaults (desk: 64x64 synthetic task; full: full-scale recipe)")
    for key in _train_fields():
        group.add_argument(_flag(key), dest=key, default=None, metavar="V")
    if data_keys:
        for key in _DATA_KEYS:
            group.add_argument(_flag(key), dest=key, default=None, metavar="V")
    else:
        group.add_argument("--num-classes", dest="num_classes", default=None, metavar="V",
                           help="class count when the data root has no dataset.cfg")
    group.add_argument("--novel-classes", dest="novel_classes", default=None, metavar="IDS",
                       help="comma-separated novel ids instead of the fold block")
    group.add_argument("--epochs", dest="epochs", default=None, metavar="N",
                       help="epochs of the phase this command runs")


def layered_values(args, phase: str | None = None) -> dict:
    """Merge preset < file < flags into a dict of typed values."""
    values = read_config_file(args.config) if args.config else {}
    for key in known_keys():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = flag_value
    if getattr(args, "epochs", None) is not None:
        if phase not in ("pretrain", "finetune"):
            raise UsageError("--epochs only applies to pretrain and finetune; use --pretrain-epochs/--finetune-epochs")
        values[f"{phase}_epochs"] = args.epochs
    return {k: _convert(k, v) for k, v in values.items()}


def train_config(values: dict):
    from gfss.training import TrainConfig, desk_config

    preset = values.get("preset") or "desk"
    overrides = {k: v for k, v in values.items() if k in _train_fields()}
    try:
        return desk_config(**overrides) if preset == "desk" else TrainConfig(**overrides)
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def dataset_spec(values: dict) -> DatasetSpec:
    kwargs = {k: values[k] for k in _DATA_KEYS if k in values}
    for shared in ("seed", "num_folds"):
        if shared in values:
            kwargs[shared] = values[shared]
    spec = DatasetSpec(**kwargs)
    try:
        spec.validate()
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    return spec


# -- artifact layout ------------------------------------------------------------------

def artifact_root(args) -> Path:
    root = Path(args.artifact_root or os.environ.get(ARTIFACT_ENV) or "artifacts")
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    return root


def _data_dir(args, root: Path) -> Path:
    return Path(args.data) if getattr(args, "data", None) else root / "data"


def _load_data(data_dir: Path):
    return load_split(data_dir / "train"), load_split(data_dir / "test")


def _num_classes(data_dir: Path, values: dict, samples) -> int:
    if "num_classes" in values:
        return int(values["num_classes"])
    cfg = data_dir / DATASET_FILE
    if cfg.exists():
        return int(read_config_file(cfg).get("num_classes", 0)) or _max_id(samples)
    return _max_id(samples)


def _max_id(samples) -> int:
    return max(max(s.class_ids(), default=0) for s in samples)


def _taxonomy(values: dict, config, num_classes: int):
    override = values.get("novel_classes")
    novel = [int(c) for c in str(override).split(",") if c.strip()] if override else None
    try:
        return split_folds(range(1, num_classes + 1), config.num_folds, config.fold, novel)
    except (ConfigurationError, IndexError) as exc:
        raise UsageError(str(exc)) from exc


def _snapshot_values(config, values: dict) -> dict:
    snap = config.to_dict()
    for key in _CLI_KEYS + ("num_classes",):
        if values.get(key) is not None:
            snap[key] = values[key]
    return snap


# -- commands -------------------------------------------------------------------------

def cmd_synth_data(args, root: Path) -> int:
    values = layered_values(args)
    spec = dataset_spec(values)
    out = Path(args.out) if args.out else root / "data"
    train, test = generate_synthetic_dataset(spec)
    save_dataset(train, test, out)
    write_config_file(out / DATASET_FILE, dataclasses.asdict(spec))
    print(f"wrote {len(train)} train and {len(test)} test samples to {out}")
    return 0


def cmd_pretrain(args, root: Path) -> int:
    from gfss.checkpoint import save_checkpoint
    from gfss.training import pretrain

    values = layered_values(args, "pretrain")
    config = train_config(values)
    data_dir = _data_dir(args, root)
    train, _ = _load_data(data_dir)
    tax = _taxonomy(values, config, _num_classes(data_dir, values, train))
    name = args.name or f"pretrain_fold{config.fold}"
    ckpt = pretrain(base_training_set(train, tax), tax, config, log_path=root / "logs" / f"{name}.csv")
    path = save_checkpoint(ckpt, root / "checkpoints" / f"{name}.ckpt")
    write_config_file(path.with_suffix(".cfg"), _snapshot_values(config, values))
    print(f"checkpoint {path} (lineage {ckpt.lineage_id})")
    return 0


def _finetune_checkpoint(args, root: Path, values: dict):
    from gfss.checkpoint import load_checkpoint

    path = Path(args.checkpoint) if args.checkpoint else None
    if path is None:
        fold = values.get("fold", 0)
        path = root / "checkpoints" / f"pretrain_fold{fold}.ckpt"
    return load_checkpoint(path)


def cmd_finetune(args, root: Path) -> int:
    from gfss.checkpoint import save_checkpoint
    from gfss.data import ClassTaxonomy
    from gfss.training import TrainConfig, finetune

    values = layered_values(args, "finetune")
    ckpt = _finetune_checkpoint(args, root, values)
    # start from the pre-training snapshot so backbone settings always agree
    inherited = {k: v for k, v in ckpt.config.items() if k in _train_fields()}
    merged = {**inherited, **{k: v for k, v in values.items() if k in _train_fields()}}
    try:
        config = TrainConfig(**merged)
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    tax = ClassTaxonomy.from_dict(ckpt.taxonomy)
    train, _ = _load_data(_data_dir(args, root))
    support = sample_support_set(train, tax, config.shots, config.seed)
    name = args.name or f"finetune_fold{config.fold}"
    out = finetune(ckpt, support, base_training_set(train, tax), tax, config,
                   log_path=root / "logs" / f"{name}.csv")
    path = save_checkpoint(out, root / "checkpoints" / f"{name}.ckpt")
    write_config_file(path.with_suffix(".cfg"), _snapshot_values(config, values))
    print(f"checkpoint {path} (lineage {out.lineage_id}, parent {out.parent_lineage})")
    return 0


def _write_report(root: Path, name: str, rows) -> Path:
    from gfss.evaluation import report_csv

    path = root / "reports" / f"{name}.csv"
    path.write_text(report_csv(rows))
    return path


def cmd_evaluate(args, root: Path) -> int:
    from gfss.checkpoint import load_checkpoint
    from gfss.data import ClassTaxonomy
    from gfss.evaluation import evaluate_model, evaluate_predictor, report_table
    from gfss.training import model_from_checkpoint

    values = layered_values(args)
    data_dir = _data_dir(args, root)
    _, test = _load_data(data_dir)
    if args.oracle:
        config = train_config(values)
        tax = _taxonomy(values, config, _num_classes(data_dir, values, test))
        report = evaluate_predictor(lambda s: s.mask, test, tax)
        report.fold_index = config.fold
        name = args.name or f"evaluate_oracle_fold{config.fold}"
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint or --oracle")
        ckpt = load_checkpoint(args.checkpoint)
        tax = ClassTaxonomy.from_dict(ckpt.taxonomy)
        model = model_from_checkpoint(ckpt)
        if model.num_novel == 0:
            raise UsageError("evaluate needs a fine-tuned checkpoint (novel classifier missing)")
        fold = ckpt.config.get("fold")
        report = evaluate_model(model, test, tax, fold_index=fold)
        name = args.name or f"evaluate_fold{fold}"
    path = _write_report(root, name, [report.summary_row()])
    print(report_table([report.summary_row()]))
    print(f"report {path}")
    return 0


def cmd_cross_validate(args, root: Path) -> int:
    from gfss.evaluation import cross_validate, evaluate_model, report_table
    from gfss.training import finetune, model_from_checkpoint, pretrain

    values = layered_values(args)
    base_config = train_config(values)
    data_dir = _data_dir(args, root)
    train, test = _load_data(data_dir)
    num_classes = _num_classes(data_dir, values, train)

    def run(fold, config):
        config = config.replace(fold=fold)
        tax = split_folds(range(1, num_classes + 1), config.num_folds, fold)
        base = base_training_set(train, tax)
        ckpt = pretrain(base, tax, config, log_path=root / "logs" / f"cv_pretrain_fold{fold}.csv")
        support = sample_support_set(train, tax, config.shots, config.seed)
        tuned = finetune(ckpt, support, base, tax, config, log_path=root / "logs" / f"cv_finetune_fold{fold}.csv")
        return evaluate_model(model_from_checkpoint(tuned), test, tax, fold_index=fold)

    result = cross_validate(run, base_config.num_folds, base_config)
    path = _write_report(root, args.name or "cross_validate", result.rows())
    write_config_file(path.with_suffix(".cfg"), _snapshot_values(base_config, values))
    if result.rows():
        print(report_table(result.rows()))
    print(f"report {path}")
    if result.failures:
        fail_path = root / "reports" / f"{args.name or 'cross_validate'}_failures.csv"
        with open(fail_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("fold", "error"))
            writer.writeheader()
            writer.writerows(result.failures)
        for f in result.failures:
            print(f"fold {f['fold']} failed: {f['error']}", file=sys.stderr)
        return 1
    return 0


def _overlay(image: np.ndarray, mask: np.ndarray, boxes, center, size) -> np.ndarray:
    """RGB uint8 image with class tint, box outlines and the cutout square."""
    from gfss.augmentation import cutout_region
    from gfss.data import class_color

    rgb = np.clip(denormalize(image), 0.0, 1.0)
    num = max(int(mask[mask != 255].max(initial=0)), 1)
    out = rgb.copy()
    for cid in np.unique(mask):
        if cid in (0, 255):
            continue
        out[mask == cid] = 0.5 * rgb[mask == cid] + 0.5 * class_color(int(cid), max(num, 8))
    for b in boxes:
        out[b.y_min, b.x_min : b.x_max + 1] = (1, 1, 1)
        out[b.y_max, b.x_min : b.x_max + 1] = (1, 1, 1)
        out[b.y_min : b.y_max + 1, b.x_min] = (1, 1, 1)
        out[b.y_min : b.y_max + 1, b.x_max] = (1, 1, 1)
    if center is not None:
        rows, cols = cutout_region(center, mask.shape, size)
        out[rows, cols] = (1.0, 0.9, 0.0)
    return (out * 255).round().astype(np.uint8)


def cmd_aug_preview(args, root: Path) -> int:
    from PIL import Image

    from gfss.augmentation import extract_boxes, strong_augment, weak_augment
    from gfss.training import rng_stream

    values = layered_values(args)
    config = train_config(values)
    train, _ = _load_data(_data_dir(args, root))
    rng = rng_stream(config.seed, "ccl")
    picks = rng.choice(len(train), size=min(args.count, len(train)), replace=False)
    written = []
    for k, idx in enumerate(picks):
        weak = weak_augment(train[idx], rng, (config.crop_size, config.crop_size))
        pair = strong_augment(weak, config.cutout_mode, rng, config.cutout_size)
        boxes = extract_boxes(weak.mask)
        left = _overlay(weak.image, weak.mask, boxes, None, config.cutout_size)
        right = _overlay(pair.strong.image, weak.mask, boxes, pair.cutout_center, config.cutout_size)
        plain = (np.clip(denormalize(pair.strong.image), 0, 1) * 255).round().astype(np.uint8)
        panel = np.concatenate([left, plain, right], axis=1)
        path = root / "previews" / f"{config.cutout_mode}_{k:03d}.png"
        Image.fromarray(panel).resize((panel.shape[1] * args.scale, panel.shape[0] * args.scale),
                                      Image.NEAREST).save(path)
        written.append(path)
    print(f"wrote {len(written)} previews to {root / 'previews'}")
    return 0


def cmd_inspect_weights(args, root: Path) -> int:
    from gfss.checkpoint import load_checkpoint
    from gfss.classifiers import weight_stats

    ckpt = load_checkpoint(args.checkpoint)
    rows = []
    for group, key, ids in (("base", "clf.base", ckpt.taxonomy["base_ids"]),
                            ("novel", "clf.novel", ckpt.taxonomy["novel_ids"])):
        if key not in ckpt.tensors:
            continue
        stats = weight_stats(ckpt.tensors[key])
        rows += [(group, c, m, s) for c, m, s in stats.rows(ids)]
        rows.append((group, "mean", stats.mu_bar, stats.sigma_bar))
    print(f"{'group':<7}{'class':>7}{'mu':>12}{'sigma':>12}")
    for group, cid, mu, sigma in rows:
        print(f"{group:<7}{str(cid):>7}{mu:>12.6f}{sigma:>12.6f}")
    name = args.name or f"weights_{Path(args.checkpoint).stem}"
    path = root / "reports" / f"{name}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("group", "class", "mu", "sigma"))
        writer.writerows((g, c, repr(float(m)), repr(float(s))) for g, c, m, s in rows)
    print(f"report {path}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "cross-validate": cmd_cross_validate,
    "aug-preview": cmd_aug_preview,
    "inspect-weights": cmd_inspect_weights,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfss", description="Generalized few-shot segmentation toolkit.")
    parser.add_argument("--artifact-root", default=None, help=f"artifact directory (default ${ARTIFACT_ENV} or ./artifacts)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render the synthetic shapes dataset")
    p.add_argument("--out", help="output directory (default <root>/data)")
    add_config_flags(p, data_keys=True)

    for name, helptext in (("pretrain", "phase 1: train on base classes"),
                           ("finetune", "phase 2: learn novel classes from the support set")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", help="dataset root (default <root>/data)")
        p.add_argument("--name", help="artifact stem")
        if name == "finetune":
            p.add_argument("--checkpoint", help="pre-training checkpoint (default <root>/checkpoints/pretrain_fold<k>.ckpt)")
        add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a fine-tuned checkpoint on the test split")
    p.add_argument("--data")
    p.add_argument("--name")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself (sanity check)")
    add_config_flags(p)

    p = sub.add_parser("cross-validate", help="pretrain, finetune and evaluate every fold")
    p.add_argument("--data")
    p.add_argument("--name")
    add_config_flags(p)

    p = sub.add_parser("aug-preview", help="write weak/strong view overlays")
    p.add_argument("--data")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--scale", type=int, default=4, help="nearest-neighbour upscaling of the PNGs")
    add_config_flags(p)

    p = sub.add_parser("inspect-weights", help="per-class classifier weight mean/std table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--name")
    return parser


def _setup_logging(root: Path, verbose: bool) -> Path:
    log_file = root / "logs" / "gfss.log"
    handler = logging.FileHandler(log_file)
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logger = logging.getLogger("gfss")
    logger.handlers[:] = [handler]
    logger.setLevel(logging.INFO)
    if verbose:
        logger.addHandler(logging.StreamHandler(sys.stderr))
    return log_file


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    root = artifact_root(args)
    log_file = _setup_logging(root, args.verbose)
    log.info("command %s %s", args.command, argv if argv is not None else sys.argv[1:])
    try:
        return COMMANDS[args.command](args, root)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gfss: error: {exc}", file=sys.stderr)
        return 2
    except (GFSSError, ValueError, FloatingPointError, OSError) as exc:
        log.exception("command %s failed", args.command)
        print(f"gfss: {args.command} failed: {type(exc).__name__}: {exc} (see {log_file})", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
