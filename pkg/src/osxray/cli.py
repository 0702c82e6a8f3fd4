"""Command-line entry point: synth, train, eval, gradcam, report.

Exit codes: 0 success, 2 usage/config error, 3 training failure. All
randomness flows from --seed; outputs are byte-stable across reruns except
the wall-clock fields, which are isolated in meta.txt.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import AugmentConfig, load_dataset, load_image, read_manifest, synth_generate
from .errors import ConfigError, ContractError, DimensionError, IngestionError, OsxrayError, TrainingError
from .gradcam import flip_experiment, gradcam, save_heatmap_png, save_overlay_png
from .layers import load_checkpoint
from .metrics import evaluate_predictions
from .osloss import OsConfig
from .train import TrainConfig, build_spec_for, cross_validate, _predict_probs

# Config file keys in serialization order; anything else is rejected.
_CONFIG_KEYS = (
    "epochs", "batch_size", "lr0", "beta1", "beta2", "adam_eps",
    "decay_base", "decay_every", "k", "lambda", "class_weights",
    "augment", "hflip_prob", "max_translate_frac",
    "seed", "num_classes", "image_side", "width_divisor", "folds",
)


def config_to_dict(cfg: TrainConfig, folds: int) -> dict:
    return {
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr0": cfg.lr0,
        "beta1": cfg.beta1, "beta2": cfg.beta2, "adam_eps": cfg.adam_eps,
        "decay_base": cfg.decay_base, "decay_every": cfg.decay_every,
        "k": cfg.os.k, "lambda": cfg.os.lam,
        "class_weights": ",".join(repr(w) for w in cfg.os.class_weights),
        "augment": cfg.augment is not None,
        "hflip_prob": (cfg.augment or AugmentConfig()).hflip_prob,
        "max_translate_frac": (cfg.augment or AugmentConfig()).max_translate_frac,
        "seed": cfg.seed, "num_classes": cfg.num_classes,
        "image_side": cfg.image_side, "width_divisor": cfg.width_divisor,
        "folds": folds,
    }


def serialize_config(values: dict) -> str:
    lines = [f"{key} = {values[key]!r}" for key in _CONFIG_KEYS]
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = raw
    return values


def _parse_bool(raw: str) -> bool:
    if raw in ("True", "true", "1"):
        return True
    if raw in ("False", "false", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def dict_to_config(values: dict) -> tuple:
    """Build (TrainConfig, folds) from string or already-typed values."""
    def get(key, default, conv):
        if key not in values:
            return default
        v = values[key]
        return conv(v) if isinstance(v, str) else v

    weights_raw = values.get("class_weights")
    if weights_raw is None:
        weights = (4.0, 1.0, 1.0)
    elif isinstance(weights_raw, str):
        weights = tuple(float(w.strip().strip("'\"")) for w in weights_raw.strip("'\"").split(","))
    else:
        weights = tuple(weights_raw)
    os_cfg = OsConfig(k=get("k", 3, int), lam=get("lambda", 0.8, float), class_weights=weights)
    use_aug = get("augment", False, _parse_bool)
    aug = AugmentConfig(hflip_prob=get("hflip_prob", 0.5, float),
                        max_translate_frac=get("max_translate_frac", 0.05, float),
                        seed=get("seed", 0, int)) if use_aug else None
    cfg = TrainConfig(
        epochs=get("epochs", 100, int), batch_size=get("batch_size", 32, int),
        lr0=get("lr0", 0.003, float), beta1=get("beta1", 0.9, float),
        beta2=get("beta2", 0.999, float), adam_eps=get("adam_eps", 1e-8, float),
        decay_base=get("decay_base", 0.7, float), decay_every=get("decay_every", 1000, int),
        os=os_cfg, augment=aug, seed=get("seed", 0, int),
        num_classes=get("num_classes", 3, int), image_side=get("image_side", 256, int),
        width_divisor=get("width_divisor", 1, int),
    )
    return cfg, get("folds", 5, int)


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    if args.per_class < 1:
        print("error: empty class (--per-class must be >= 1)", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return 2
    manifest = synth_generate(out, args.per_class, classes=args.classes,
                              side=args.side, seed=args.seed)
    print(f"wrote {len(manifest)} images to {out} (manifest.csv included)")
    return 0


def _effective_config(args) -> tuple:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(encoding="utf-8"))
    if args.k is not None:
        values["k"] = str(args.k)
    if getattr(args, "lam", None) is not None:
        values["lambda"] = repr(args.lam)
    if args.augment:
        values["augment"] = "true"
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.folds is not None:
        values["folds"] = str(args.folds)
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = str(args.epochs)
    if getattr(args, "image_side", None) is not None:
        values["image_side"] = str(args.image_side)
    if getattr(args, "width_divisor", None) is not None:
        values["width_divisor"] = str(args.width_divisor)
    if getattr(args, "num_classes", None) is not None:
        values["num_classes"] = str(args.num_classes)
    return dict_to_config(values)


def cmd_train(args) -> int:
    start = time.time()
    cfg, folds = _effective_config(args)
    manifest = read_manifest(args.manifest)
    if len(manifest.class_names) != cfg.num_classes:
        raise ConfigError(f"manifest has {len(manifest.class_names)} classes, config says {cfg.num_classes}")
    spec = build_spec_for(cfg)
    m = spec.flatten_length()
    if spec.os_k is not None and m % spec.os_k != 0:
        raise ConfigError(f"k={spec.os_k} does not divide flatten length m={m}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(config_to_dict(cfg, folds)), encoding="utf-8")

    images, labels = load_dataset(manifest, cfg.image_side)
    result = cross_validate(images, labels, cfg, n_folds=folds, out_dir=out,
                            only_fold=args.fold)
    payload = {
        "label": "baseline" if (cfg.os.lam >= 1.0) else f"+OS k={cfg.os.k} lambda={cfg.os.lam}",
        "k": cfg.os.k, "lambda": cfg.os.lam, "augment": cfg.augment is not None,
        "folds": [
            {
                "fold": r.fold,
                "metrics": r.metrics.to_dict(),
                "train_acc": r.train_acc, "train_loss": r.train_loss,
                "val_acc": r.val_acc, "val_loss": r.val_loss,
                "os_penalty": r.os_penalty,
            }
            for r in result["folds"]
        ],
        "aggregate": result["aggregate"],
    }
    (out / "metrics.json").write_text(json.dumps(payload, sort_keys=True, indent=1),
                                      encoding="utf-8")
    (out / "meta.txt").write_text(f"wall_clock_seconds = {time.time() - start:.3f}\n",
                                  encoding="utf-8")
    acc = result["aggregate"]["accuracy_mean"]
    print(f"trained {len(result['folds'])} fold(s); mean accuracy {acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    spec, params, _seed = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    if len(manifest.class_names) != spec.num_classes:
        raise ConfigError(f"class-count mismatch: checkpoint {spec.num_classes}, "
                          f"manifest {len(manifest.class_names)}")
    images, labels = load_dataset(manifest, spec.image_side)
    probs = _predict_probs(spec, params, images, batch_size=32)
    report = evaluate_predictions(probs, labels, spec.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1),
                                      encoding="utf-8")
    lines = [
        f"accuracy  {report.accuracy:.6f}",
        f"precision {report.precision:.6f}",
        f"recall    {report.recall:.6f}",
        f"f1        {report.f1:.6f}",
        f"ece       {report.calibration.ece:.6f}",
        f"oe        {report.calibration.oe:.6f}",
        f"brier     {report.calibration.brier:.6f}",
        "confusion (rows true, cols predicted):",
    ]
    for row in report.confusion:
        lines.append("  " + " ".join(f"{v:6d}" for v in row))
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"accuracy {report.accuracy:.4f} on {len(labels)} samples")
    return 0


def cmd_gradcam(args) -> int:
    spec, params, _seed = load_checkpoint(args.checkpoint)
    if not 0 <= args.class_id < spec.num_classes:
        raise ContractError(f"--class {args.class_id} out of range [0,{spec.num_classes})")
    image = load_image(args.image, side=spec.image_side)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    cam = gradcam(spec, params, image, args.class_id)
    save_heatmap_png(out / f"{stem}_{args.class_id}_cam.png", cam.values)
    save_overlay_png(out / f"{stem}_{args.class_id}_overlay.png", image, cam.values)
    if args.flip_experiment:
        [res] = flip_experiment(spec, params, [image], class_ids=[args.class_id])
        flipped = image[:, :, ::-1].copy()
        save_heatmap_png(out / f"{stem}_{args.class_id}_flip_cam.png", res["cam_flipped"].values)
        save_overlay_png(out / f"{stem}_{args.class_id}_flip_overlay.png", flipped,
                         res["cam_flipped"].values)
        summary = (f"centroid_displacement_px = {res['centroid_displacement']!r}\n"
                   f"l1_gap = {res['l1_gap']!r}\n")
        (out / f"{stem}_{args.class_id}_flip_summary.txt").write_text(summary, encoding="utf-8")
    print(f"wrote Grad-CAM outputs for class {args.class_id} to {out}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        run = Path(run)
        metrics_path = run / "metrics.json"
        config_path = run / "config.txt"
        if not metrics_path.exists() or not config_path.exists():
            print(f"error: malformed run directory {run} (missing metrics.json or config.txt)",
                  file=sys.stderr)
            return 2
        payload = json.loads(metrics_path.read_text(encoding="utf-8"))
        cfg_values = parse_config_text(config_path.read_text(encoding="utf-8"))
        rows.append({
            "run": run.name,
            "k": int(cfg_values.get("k", "0")),
            "lambda": float(cfg_values.get("lambda", "1.0")),
            "label": payload["label"],
            "agg": payload["aggregate"],
        })
    rows.sort(key=lambda r: (r["k"], r["lambda"], r["run"]))
    header = ["run", "label", "k", "lambda",
              "accuracy", "precision", "recall", "f1", "ece", "oe", "brier"]
    out_lines = ["\t".join(header)]
    for r in rows:
        a = r["agg"]
        cells = [r["run"], r["label"], str(r["k"]), repr(r["lambda"])]
        for key in ("accuracy", "precision", "recall", "f1", "ece", "oe", "brier"):
            cells.append(f"{a[key + '_mean']:.6f}+-{a[key + '_std']:.6f}")
        out_lines.append("\t".join(cells))
    text = "\n".join(out_lines) + "\n"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    out.with_suffix(out.suffix + ".tsv").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osxray",
                                     description="Orthogonality-regularized X-ray classifier toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with cross-validation")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--folds", type=int)
    p.add_argument("--fold", type=int, help="train a single fold index only")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--image-side", type=int)
    p.add_argument("--width-divisor", type=int)
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="emit Grad-CAM heatmap and overlay PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flip-experiment", action="store_true")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("report", help="aggregate run directories into a table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, DimensionError, IngestionError, OsxrayError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
