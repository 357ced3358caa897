"""Command-line driver: ``pmcut {gen,train,eval,attack,preview}``.

Every command resolves its settings from built-in defaults, then an optional
``key = value`` file given with ``--config``, then explicit flags (flags win).
The resolved settings are written to ``<out>/config.txt`` so a run can be
repeated from that file alone.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .augment import (AugmentConfig, apply_pmc, build_mask_knn, build_mask_random, mix_point_targets,
                      sample_lambda)
from .core import ConfigError, InvalidInputError, PointCloud, rng_stream
from .data import FAMILIES, PCBFormatError, build_dataset, read_dataset, write_dataset, write_pct
from .network import ARCHS, TNET_POSITIONS, CheckpointError, PointModel, load_checkpoint, save_checkpoint
from .robustness import (AttackSpec, attack_sweep, evaluate_classification, evaluate_segmentation_miou,
                         sweep_table)
from .training import NumericalError, TrainConfig, Trainer

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

DEFAULTS = {
    "seed": "0",
    "out": "run",
    # gen
    "families": ",".join(FAMILIES),
    "per_class": "250",
    "points": "256",
    "split": "0.8",
    "size_jitter": "0.2",
    "rotation_jitter": "0",
    # model and training
    "data": "",
    "checkpoint": "",
    "arch": "pointnet-mini",
    "task": "cls",
    "tnet": "after",
    "tnet_layers": "0,1,2",
    "k_neighbors": "8",
    "epochs": "50",
    "batch_size": "32",
    "optimizer": "adam",
    "lr": "0.001",
    "lr_floor": "0.001",
    "reg_weight": "0.001",
    # augmentation
    "rho": "0.5",
    "beta": "1.0",
    "mode": "pmc-r",
    "layer": "random",
    "lambda": "",
    # attack and preview
    "attacks": "drop:0.2,drop:0.3,drop:0.4,noise:0.001,noise:0.002,noise:0.003,scale:1.2,rotate:x:30",
    "pair": "0,1",
}

COMMAND_KEYS = {
    "gen": ["seed", "out", "families", "per_class", "points", "split", "size_jitter", "rotation_jitter"],
    "train": ["seed", "out", "data", "arch", "task", "tnet", "tnet_layers", "k_neighbors", "epochs",
              "batch_size", "optimizer", "lr", "lr_floor", "reg_weight", "rho", "beta", "mode", "layer",
              "lambda"],
    "eval": ["seed", "out", "data", "checkpoint", "arch", "task"],
    "attack": ["seed", "out", "data", "checkpoint", "arch", "task", "attacks"],
    "preview": ["seed", "out", "data", "mode", "beta", "lambda", "pair"],
}


# eval and attack read the architecture from the checkpoint unless one is requested
CHECKPOINT_DEFAULTS = {"arch": "", "task": ""}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing and config resolution
# ---------------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmcut", description="Point-wise embedded-space mixing for point clouds")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate a synthetic dataset (train.pcb / test.pcb)",
        "train": "train a model and write a checkpoint plus metrics",
        "eval": "evaluate a checkpoint on the clean test split",
        "attack": "evaluate a checkpoint under a grid of test-time attacks",
        "preview": "write a mixed pair of clouds as text for plotting",
    }
    choices = {"mode": ("pmc-r", "pmc-k"), "tnet": TNET_POSITIONS, "arch": ARCHS, "task": ("cls", "seg"),
               "optimizer": ("adam", "sgd-cosine")}
    for cmd, keys in COMMAND_KEYS.items():
        p = sub.add_parser(cmd, help=helps[cmd])
        p.add_argument("--config", help="key = value settings file; flags override it")
        for key in keys:
            default = DEFAULTS[key] or "unset"
            if "checkpoint" in keys and key in CHECKPOINT_DEFAULTS:
                default = "from checkpoint"
            p.add_argument(_flag(key), dest=key, default=None, choices=choices.get(key),
                           help=f"default: {default}")
    return parser


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes and underscores are interchangeable."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def resolve(args: argparse.Namespace) -> dict:
    keys = COMMAND_KEYS[args.command]
    settings = {k: DEFAULTS[k] for k in keys}
    if "checkpoint" in keys:
        settings.update(CHECKPOINT_DEFAULTS)
    if args.config:
        for key, val in read_config_file(args.config).items():
            if key not in settings:
                raise UsageError(f"unknown setting {key!r} for {args.command}")
            settings[key] = val
    for key in keys:
        val = getattr(args, key)
        if val is not None:
            settings[key] = val
    return settings


def echo_config(settings: dict, command: str, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# pmcut {command}"] + [f"{k} = {v}" for k, v in settings.items()]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def _int(settings, key) -> int:
    try:
        return int(settings[key])
    except ValueError:
        raise UsageError(f"{key} must be an integer, got {settings[key]!r}") from None


def _float(settings, key) -> float:
    try:
        return float(settings[key])
    except ValueError:
        raise UsageError(f"{key} must be a number, got {settings[key]!r}") from None


def _int_list(settings, key) -> tuple:
    text = settings[key].strip()
    if text in ("", "none"):
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{key} must be a comma-separated list of integers") from None


def _layer(settings):
    val = settings["layer"].strip()
    if val == "random":
        return val
    try:
        return int(val)
    except ValueError:
        raise UsageError(f"layer must be an integer or 'random', got {val!r}") from None


def _dataset(settings):
    if not settings["data"]:
        raise UsageError("--data is required")
    path = Path(settings["data"])
    if not path.is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return read_dataset(path)


def _augment(settings) -> AugmentConfig:
    return AugmentConfig(rho=_float(settings, "rho"), beta=_float(settings, "beta"), mode=settings["mode"],
                         layer=_layer(settings), fixed_lambda=_float(settings, "lambda") if settings["lambda"] else None)


def _model_for_eval(settings, dataset) -> PointModel:
    if not settings["checkpoint"]:
        raise UsageError("--checkpoint is required")
    path = Path(settings["checkpoint"])
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    model = load_checkpoint(path, expect_arch=settings["arch"] or None, expect_task=settings["task"] or None)
    if model.num_classes != dataset.num_classes:
        raise UsageError(f"checkpoint predicts {model.num_classes} classes, dataset has {dataset.num_classes}")
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(settings: dict, out: Path) -> str:
    families = tuple(f.strip() for f in settings["families"].split(",") if f.strip())
    ds = build_dataset(families, _int(settings, "per_class"), _int(settings, "points"),
                       _float(settings, "split"), _int(settings, "seed"),
                       _float(settings, "size_jitter"), _float(settings, "rotation_jitter"))
    write_dataset(out, ds)
    return f"wrote {len(ds.train_idx)} train / {len(ds.test_idx)} test clouds to {out}"


def cmd_train(settings: dict, out: Path) -> str:
    ds = _dataset(settings)
    seed = _int(settings, "seed")
    task = settings["task"]
    if task == "seg" and ds.clouds[0].point_labels is None:
        raise UsageError("segmentation needs per-point labels in the dataset")
    model = PointModel(settings["arch"], ds.num_classes, ds.num_part_classes, task, settings["tnet"],
                       _int_list(settings, "tnet_layers"), _int(settings, "k_neighbors"), seed)
    cfg = TrainConfig(epochs=_int(settings, "epochs"), batch_size=_int(settings, "batch_size"),
                      optimizer=settings["optimizer"], lr_initial=_float(settings, "lr"),
                      lr_floor=_float(settings, "lr_floor"), augment=_augment(settings),
                      tnet_reg_weight=_float(settings, "reg_weight"), seed=seed)
    report = Trainer(model, ds, cfg).fit()
    save_checkpoint(model, out / "model.pmcm")
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    final = " ".join(f"{k}={v:.4f}" for k, v in report.final_metrics.items())
    return f"final {final}; checkpoint {out / 'model.pmcm'}"


def cmd_eval(settings: dict, out: Path) -> str:
    ds = _dataset(settings)
    model = _model_for_eval(settings, ds)
    if model.task == "cls":
        r = evaluate_classification(model, ds.test_clouds(), ds.num_classes)
        metrics = {"oa": r.overall_accuracy, "ma": r.mean_class_accuracy}
    else:
        metrics = {"miou": evaluate_segmentation_miou(model, ds.test_clouds(), ds.parts_by_class).miou}
    text = "metric,value\n" + "".join(f"{k},{v:.6f}\n" for k, v in metrics.items())
    (out / "eval.csv").write_text(text)
    return " ".join(f"{k}={v:.4f}" for k, v in metrics.items())


def cmd_attack(settings: dict, out: Path) -> str:
    ds = _dataset(settings)
    model = _model_for_eval(settings, ds)
    attacks = [AttackSpec.parse(a) for a in settings["attacks"].split(",") if a.strip()]
    if not attacks:
        raise UsageError("--attacks is empty")
    rows = attack_sweep(model, ds.test_clouds(), attacks, rng_stream(_int(settings, "seed"), "attack"),
                        ds.parts_by_class)
    table = sweep_table(rows, model.task)
    (out / "attack.csv").write_text(table)
    return table.rstrip("\n")


def cmd_preview(settings: dict, out: Path) -> str:
    ds = _dataset(settings)
    pair = _int_list(settings, "pair")
    if len(pair) != 2 or not all(0 <= i < len(ds.clouds) for i in pair):
        raise UsageError(f"--pair needs two cloud indices below {len(ds.clouds)}")
    first, second = ds.clouds[pair[0]], ds.clouds[pair[1]]
    if first.n != second.n:
        raise UsageError("preview clouds must share N")
    rng = rng_stream(_int(settings, "seed"), "mask", "preview")
    lam = _float(settings, "lambda") if settings["lambda"] else sample_lambda(_float(settings, "beta"), rng)
    if not 0.0 <= lam <= 1.0:
        raise UsageError("lambda must lie in [0, 1]")
    if settings["mode"] == "pmc-k":
        mask = build_mask_knn(second.points, lam, rng)
    else:
        mask = build_mask_random(first.n, lam, rng)
    mixed_pts = apply_pmc(first.points, second.points, mask.keep)
    parts = None
    if first.point_labels is not None and second.point_labels is not None:
        parts = mix_point_targets(first.point_labels, second.point_labels, mask)
    meta = {"mode": settings["mode"], "lambda": repr(mask.lambda_realized), "kept": mask.kept,
            "center": -1 if mask.center is None else mask.center,
            "mask": "".join("1" if k else "0" for k in mask.keep)}
    write_pct(out / "first.pct", first)
    write_pct(out / "second.pct", second)
    write_pct(out / "mixed.pct", PointCloud(mixed_pts, first.class_label, parts), meta)
    return f"lambda={mask.lambda_realized:.4f} kept={mask.kept}/{first.n} -> {out / 'mixed.pct'}"


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "preview": cmd_preview}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        settings = resolve(args)
        out = Path(settings["out"])
        echo_config(settings, args.command, out)
        message = COMMANDS[args.command](settings, out)
    except (UsageError, ConfigError, InvalidInputError, CheckpointError, PCBFormatError,
            FileNotFoundError) as exc:
        print(f"pmcut {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"pmcut {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
