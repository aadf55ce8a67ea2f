"""Experiment runner: generate data, train, attack, evaluate, sweep, transfer.

One JSON config document drives everything; every field has a default and
unknown keys are rejected. The master seed is mandatory (config or
FUSELAB_SEED) and all per-scene, per-epoch, and per-budget randomness is
derived from it, so reruns are byte-identical.

Exit codes: 0 success, 2 config/usage error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from fuselab import __version__, evalkit
from fuselab.advtrain import (AdvTrainError, DivergenceError, TrainConfig,
                              check_variant, train)
from fuselab.attacks import (AttackError, AttackSpec, apply_perturbation,
                             pgd_attack, save_perturbation)
from fuselab.detector import (DetectorConfig, DetectorError, check_checkpoint,
                              infer_fusion)
from fuselab.evalkit import EvalError
from fuselab.ndlab import NDLabError, ParamStore
from fuselab.rng import derive_seed
from fuselab.scenegen import (DEFAULT_INTRINSICS, CameraIntrinsics,
                              SceneGenError, SceneSpec, generate_dataset,
                              load_split)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

IMAGE_BUDGETS = [0.0, 0.5, 1.0, 2.0, 4.0]
LIDAR_BUDGETS = [0.0, 0.1, 0.2, 0.3, 0.5]

ATTACK_PRESETS = {
    "full-image": (["image"], "full"),
    "car-image": (["image"], "car_boxes"),
    "full-lidar": (["lidar"], "full"),
    "car-lidar": (["lidar"], "car_boxes"),
    "full-joint": (["image", "lidar"], "full"),
    "car-joint": (["image", "lidar"], "car_boxes"),
}

AT_VARIANT_CHOICES = ["none", "at-image", "at-car", "at-lidar", "at-lidar-car",
                      "at-joint", "at-joint-car"]


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "seed": None,
        "dataset": {
            "train_count": 400,
            "val_count": 100,
            "intrinsics": DEFAULT_INTRINSICS.to_dict(),
            "scene": SceneSpec().to_dict(),
        },
        "model": DetectorConfig().to_dict(),
        "train": {
            "epochs": 40,
            "batch_size": 8,
            "schedule": {"kind": "cosine", "start": 0.01, "end": 0.002},
            "at_variant": None,
            "eps_image": 2.0,
            "gamma_lidar": 0.3,
        },
        "attack": AttackSpec().to_dict(),
        "eval": {"iou_thresh": 0.5, "split": "val", "budgets": None},
    }


# sections whose valid keys depend on a discriminator field; a user value
# replaces the default wholesale and is validated by the section's from_dict
ATOMIC_SECTIONS = {"train.schedule"}


def _merge(defaults, user, path=""):
    """Recursive overlay of user values on defaults; unknown keys rejected."""
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = {}
    for key, dval in defaults.items():
        full = f"{path}{key}"
        if key not in user:
            out[key] = dval
        elif isinstance(dval, dict) and full not in ATOMIC_SECTIONS:
            out[key] = _merge(dval, user[key], f"{full}.")
        else:
            out[key] = user[key]
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key '{path}{sorted(unknown)[0]}'")
    return out


def load_config(config_path) -> tuple:
    """Returns (resolved config, raw user document)."""
    doc = {}
    if config_path is not None:
        with open(config_path) as f:
            text = f.read()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: invalid JSON at line {e.lineno} "
                              f"column {e.colno}: {e.msg}") from e
    resolved = _merge(default_config(), doc)
    env = os.environ.get("FUSELAB_SEED")
    if env is not None:
        try:
            resolved["seed"] = int(env)
        except ValueError as e:
            raise ConfigError(f"FUSELAB_SEED must be an integer, got {env!r}") from e
    if resolved["seed"] is None:
        raise ConfigError("a master seed is mandatory: set \"seed\" in the "
                          "config or export FUSELAB_SEED")
    if not isinstance(resolved["seed"], int):
        raise ConfigError(f"seed must be an integer, got {resolved['seed']!r}")
    return resolved, doc


def _build(section_cls, d, what):
    try:
        return section_cls.from_dict(d)
    except TypeError as e:
        raise ConfigError(f"bad {what} section: {e}") from e


def write_sidecar(path, command: str, config: dict, extras: dict | None = None):
    doc = {"tool": "fuselab", "version": __version__, "command": command,
           "config": config}
    if extras:
        doc.update(extras)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_data(data_dir, split: str):
    """(<manifest>, scenes, stats) for one split; stats come from train."""
    data_dir = Path(data_dir)
    manifest, scenes = load_split(data_dir / split)
    stats = manifest.depth_stats
    if stats is None and split != "train":
        train_manifest, _scenes = None, None
        try:
            from fuselab.scenegen import load_manifest
            train_manifest = load_manifest(data_dir / "train")
        except SceneGenError:
            pass
        if train_manifest is not None:
            stats = train_manifest.depth_stats
    return manifest, scenes, stats


def _load_checkpoint(path) -> ParamStore:
    try:
        return ParamStore.load(path)
    except (NDLabError, FileNotFoundError) as e:
        raise ConfigError(f"cannot load checkpoint {path}: {e}") from e


def _model_config(resolved: dict, user_doc: dict, args, store: ParamStore):
    """DetectorConfig for a checkpoint; explicit fusion conflicts are errors."""
    inferred = infer_fusion(store)
    explicit = None
    if getattr(args, "fusion", None):
        explicit = args.fusion
    elif isinstance(user_doc.get("model"), dict) and "fusion" in user_doc["model"]:
        explicit = user_doc["model"]["fusion"]
    if explicit is not None and explicit != inferred:
        raise ConfigError(f"checkpoint was trained with fusion {inferred!r} "
                          f"but the config asks for {explicit!r}")
    section = dict(resolved["model"])
    section["fusion"] = inferred
    config = _build(DetectorConfig, section, "model")
    check_checkpoint(store, config)
    return config


def _attack_spec(resolved: dict, preset: str | None) -> AttackSpec:
    section = dict(resolved["attack"])
    if preset is not None:
        channels, mask_mode = ATTACK_PRESETS[preset]
        section["channels"] = channels
        section["mask_mode"] = mask_mode
    return _build(AttackSpec, section, "attack")


def _budgets(resolved: dict, spec: AttackSpec) -> list:
    budgets = resolved["eval"]["budgets"]
    if budgets is None:
        budgets = IMAGE_BUDGETS if "image" in spec.channels else LIDAR_BUDGETS
    return [float(b) for b in budgets]


def _require_stats(stats, config):
    if config.needs_lidar and stats is None:
        raise ConfigError("no depth statistics available: generate a training "
                          "split first (they are computed over it)")


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    resolved, _doc = load_config(args.config)
    seed = resolved["seed"]
    counts = {"train": resolved["dataset"]["train_count"],
              "val": resolved["dataset"]["val_count"]}
    if args.count is not None:
        if args.count < 0:
            raise ConfigError("--count must be non-negative")
        counts = {"train": args.count, "val": args.count}
    intrinsics = _build(CameraIntrinsics, resolved["dataset"]["intrinsics"],
                        "dataset.intrinsics")
    spec = _build(SceneSpec, resolved["dataset"]["scene"], "dataset.scene")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val"):
        manifest = generate_dataset(spec, intrinsics, counts[split],
                                    derive_seed(seed, split), out / split,
                                    split=split)
        print(f"{split}: {len(manifest.scenes)} scenes -> {out / split}")
    write_sidecar(out / "run.json", "gen-data", resolved,
                  {"counts": counts})
    return EXIT_OK


def cmd_train(args) -> int:
    resolved, doc = load_config(args.config)
    if args.fusion:
        resolved["model"]["fusion"] = args.fusion
    if args.at_variant:
        resolved["train"]["at_variant"] = (
            None if args.at_variant == "none" else args.at_variant)
    model_config = _build(DetectorConfig, resolved["model"], "model")
    train_config = _build(TrainConfig,
                          {**resolved["train"], "seed": resolved["seed"]}, "train")
    check_variant(model_config, train_config.at_variant)

    _manifest, scenes, stats = _load_data(args.data, "train")
    if not scenes:
        raise ConfigError(f"no training scenes in {args.data}")
    _require_stats(stats, model_config)
    val_scenes = None
    try:
        _m, val_scenes, _s = _load_data(args.data, "val")
    except SceneGenError:
        pass

    intrinsics = _manifest.intrinsics

    def show(row, _store):
        print(f"{row['epoch']},{row['loss_total']!r},{row['loss_obj']!r},"
              f"{row['loss_cls']!r},{row['loss_reg']!r},{row['lr']!r}")
        sys.stdout.flush()

    store, report = train(model_config, scenes, intrinsics, stats, train_config,
                          val_scenes=val_scenes or None, epoch_callback=show)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    store.save(ckpt)
    with open(out / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    write_sidecar(out / "run.json", "train", resolved)
    if report.final_val_map is not None:
        print(f"val mAP {report.final_val_map!r}")
    print(f"checkpoint -> {ckpt}")
    return EXIT_OK


def cmd_attack(args) -> int:
    resolved, doc = load_config(args.config)
    store = _load_checkpoint(args.ckpt)
    config = _model_config(resolved, doc, args, store)
    spec = _attack_spec(resolved, args.attack)
    split = args.split or resolved["eval"]["split"]
    _manifest, scenes, stats = _load_data(args.data, split)
    if not scenes:
        raise ConfigError(f"no scenes in split {split!r}")
    _require_stats(stats, config)
    intrinsics = _manifest.intrinsics
    seed = resolved["seed"]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = []
    for si, scene in enumerate(scenes):
        pert = pgd_attack(store, config, scene, intrinsics, stats, spec,
                          seed=derive_seed(seed, "attack", si))
        save_perturbation(pert, out / f"pert_{si}.pert")
        rgb_adv, lidar_adv = apply_perturbation(scene, pert, intrinsics, stats)
        inputs.append((rgb_adv / np.float32(255.0), lidar_adv))

    clean = evalkit.evaluate_map(store, config, scenes, intrinsics, stats,
                                 iou_thresh=resolved["eval"]["iou_thresh"])
    attacked = evalkit.evaluate_map(store, config, scenes, intrinsics, stats,
                                    perturb=lambda si, scene: inputs[si],
                                    iou_thresh=resolved["eval"]["iou_thresh"])
    summary = {
        "split": split,
        "scenes": len(scenes),
        "clean_map": clean.map,
        "attacked_map": attacked.map,
        "per_class_attacked": {k: v.ap for k, v in attacked.per_class.items()},
        "attack": spec.to_dict(),
    }
    with open(out / "attack.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    write_sidecar(out / "run.json", "attack", resolved)
    print(f"clean mAP {clean.map!r} -> attacked mAP {attacked.map!r}")
    print(f"perturbations -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved, doc = load_config(args.config)
    store = _load_checkpoint(args.ckpt)
    config = _model_config(resolved, doc, args, store)
    split = args.split or resolved["eval"]["split"]
    _manifest, scenes, stats = _load_data(args.data, split)
    if not scenes:
        raise ConfigError(f"no scenes in split {split!r}")
    _require_stats(stats, config)
    intrinsics = _manifest.intrinsics

    perturb = None
    spec = None
    if args.attack is not None:
        spec = _attack_spec(resolved, args.attack)
        hook = evalkit.attack_perturb_fn(store, config, intrinsics, stats, spec,
                                         resolved["seed"])
        inputs = evalkit.precompute_inputs(scenes, hook, jobs=args.jobs)
        perturb = lambda si, scene: inputs[si]

    res = evalkit.evaluate_map(store, config, scenes, intrinsics, stats,
                               perturb=perturb,
                               iou_thresh=resolved["eval"]["iou_thresh"])
    result = {
        "split": split,
        "scenes": len(scenes),
        "map": res.map,
        "per_class": {k: v.ap for k, v in res.per_class.items()},
        "n_gt": {k: v.n_gt for k, v in res.per_class.items()},
        "attack": spec.to_dict() if spec is not None else None,
    }
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(result, f, indent=1, sort_keys=True)
        f.write("\n")
    write_sidecar(Path(str(out) + ".run.json"), "eval", resolved)
    print(f"mAP {res.map!r} over {len(scenes)} scenes -> {out}")
    return EXIT_OK


def cmd_curve(args) -> int:
    resolved, doc = load_config(args.config)
    store = _load_checkpoint(args.ckpt)
    config = _model_config(resolved, doc, args, store)
    spec = _attack_spec(resolved, args.attack)
    split = args.split or resolved["eval"]["split"]
    _manifest, scenes, stats = _load_data(args.data, split)
    if not scenes:
        raise ConfigError(f"no scenes in split {split!r}")
    _require_stats(stats, config)

    budgets = _budgets(resolved, spec)
    curve = evalkit.robustness_curve(store, config, scenes, _manifest.intrinsics,
                                     stats, spec, budgets, resolved["seed"],
                                     iou_thresh=resolved["eval"]["iou_thresh"],
                                     jobs=args.jobs)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    evalkit.write_curve_csv(curve, out, sidecar={
        "tool": "fuselab", "version": __version__, "command": "curve",
        "config": resolved, "split": split})
    for b, m in zip(curve.budgets, curve.maps):
        print(f"budget {b!r}: mAP {m!r}")
    print(f"curve -> {out}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    resolved, doc = load_config(args.config)
    source = _load_checkpoint(args.source_ckpt)
    target = _load_checkpoint(args.target_ckpt)
    source_cfg = dict(resolved["model"])
    source_cfg["fusion"] = infer_fusion(source)
    source_config = _build(DetectorConfig, source_cfg, "model")
    check_checkpoint(source, source_config)
    target_config = _model_config(resolved, doc, args, target)

    spec = _attack_spec(resolved, args.attack)
    split = args.split or resolved["eval"]["split"]
    _manifest, scenes, stats = _load_data(args.data, split)
    if not scenes:
        raise ConfigError(f"no scenes in split {split!r}")
    _require_stats(stats, source_config)
    _require_stats(stats, target_config)
    intrinsics = _manifest.intrinsics
    iou_thresh = resolved["eval"]["iou_thresh"]
    seed = resolved["seed"]
    budgets = _budgets(resolved, spec)

    rows = []
    for budget in budgets:
        if budget == 0:
            clean = evalkit.evaluate_map(target, target_config, scenes,
                                         intrinsics, stats, iou_thresh=iou_thresh)
            rows.append((budget, clean.map, clean.map))
            continue
        bspec = evalkit.scaled_spec(spec, budget)
        bseed = derive_seed(seed, "budget", repr(float(budget)))
        crafted = evalkit.attack_perturb_fn(source, source_config, intrinsics,
                                            stats, bspec, bseed)
        inputs = evalkit.precompute_inputs(scenes, crafted, jobs=args.jobs)
        transfer = evalkit.evaluate_map(target, target_config, scenes, intrinsics,
                                        stats, perturb=lambda si, s: inputs[si],
                                        iou_thresh=iou_thresh)
        white = evalkit.attack_perturb_fn(target, target_config, intrinsics,
                                          stats, bspec, bseed)
        winputs = evalkit.precompute_inputs(scenes, white, jobs=args.jobs)
        whitebox = evalkit.evaluate_map(target, target_config, scenes, intrinsics,
                                        stats, perturb=lambda si, s: winputs[si],
                                        iou_thresh=iou_thresh)
        rows.append((budget, transfer.map, whitebox.map))

    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write("budget,transfer_map,whitebox_map\n")
        for budget, t, w in rows:
            f.write(f"{float(budget)!r},{float(t)!r},{float(w)!r}\n")
    write_sidecar(Path(str(out) + ".json"), "transfer", resolved,
                  {"split": split, "budgets": budgets})
    for budget, t, w in rows:
        print(f"budget {budget!r}: transfer mAP {t!r}, white-box mAP {w!r}")
    print(f"transfer table -> {out}")
    return EXIT_OK


# -- argument surface ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fuselab",
        description="Camera+LiDAR fusion detectors under adversarial attack: "
                    "data generation, training, attacks, evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt=True, data=True):
        p.add_argument("--config", help="JSON experiment config")
        if data:
            p.add_argument("--data", required=True, help="dataset root directory")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="model checkpoint")
        p.add_argument("--split", choices=["train", "val"],
                       help="dataset split (default from config)")
        p.add_argument("--fusion", choices=["rgb", "depth", "early", "late"],
                       help="expected fusion mode of the checkpoint")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="parallel scenes for attack/eval work")

    p = sub.add_parser("gen-data", help="generate train and val scene sets")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--count", type=int,
                   help="override scene count for both splits")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector (clean or adversarial)")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fusion", choices=["rgb", "depth", "early", "late"])
    p.add_argument("--at-variant", choices=AT_VARIANT_CHOICES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="craft per-scene perturbations and measure "
                                      "the mAP drop")
    common(p)
    p.add_argument("--attack", choices=sorted(ATTACK_PRESETS),
                   help="channel/mask preset (default from config)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally under attack")
    common(p)
    p.add_argument("--attack", choices=sorted(ATTACK_PRESETS),
                   help="evaluate under this attack instead of clean")
    p.add_argument("--out", required=True, help="result JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curve", help="mAP versus perturbation budget")
    common(p)
    p.add_argument("--attack", choices=sorted(ATTACK_PRESETS),
                   help="channel/mask preset (default from config)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("transfer", help="black-box transfer between checkpoints")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--source-ckpt", required=True,
                   help="checkpoint perturbations are crafted on")
    p.add_argument("--target-ckpt", required=True,
                   help="checkpoint the perturbations are applied to")
    p.add_argument("--split", choices=["train", "val"])
    p.add_argument("--fusion", choices=["rgb", "depth", "early", "late"],
                   help="expected fusion mode of the target checkpoint")
    p.add_argument("--attack", choices=sorted(ATTACK_PRESETS))
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_transfer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SceneGenError, DetectorError, AttackError, EvalError,
            AdvTrainError) as e:
        if isinstance(e, DivergenceError):
            print(f"fuselab: numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"fuselab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NDLabError as e:
        print(f"fuselab: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"fuselab: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
