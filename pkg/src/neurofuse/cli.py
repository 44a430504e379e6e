"""Command-line interface.

Every trained model lives in a run directory:

    config.txt     key=value settings (preset, classes, seed, data root, ...)
    manifest.txt   dataset manifest the run was trained from
    weights.btwf   network weights after stage-1 training
    report.txt     epoch log, one line per epoch plus a footer
    summary.json   machine-readable training summary
    head.btgb      boosted-tree head, present once fit-head has run

Subcommands cover the full pipeline: synth, ingest, preprocess, train,
fit-head, eval, quantize, explain, predict.  Every subcommand accepts
--seed and --config <file>; the config file is plain key=value text and
fills in any option not given on the command line.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import architecture as A
from . import data as D
from . import gbdt as B
from . import gradcam as G
from . import metrics as M
from . import preprocess as P
from . import quantize as Q
from . import tensor as T
from . import training as TR

__all__ = ["main"]

_CONFIG = "config.txt"
_MANIFEST = "manifest.txt"
_WEIGHTS = "weights.btwf"
_REPORT = "report.txt"
_SUMMARY = "summary.json"
_HEAD = "head.btgb"


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------

def _opt(args, key: str, cast, default):
    """CLI value if given, else the config-file value, else the default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    fallback = args.config_values.get(key)
    if fallback is not None:
        return cast(fallback)
    return default


def _flag(args, key: str) -> bool:
    if getattr(args, key, False):
        return True
    return args.config_values.get(key, "").strip().lower() in ("1", "true", "yes")


def _tap_widths(text: str | None) -> tuple[int, ...] | None:
    if text is None or text.strip() == "":
        return None
    try:
        widths = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ValueError(f"tap widths must be comma-separated integers, got {text!r}")
    if len(widths) != 3 or any(w < 1 for w in widths):
        raise ValueError("tap widths need exactly three positive integers")
    return widths


def _net_config(preset: str, tap_widths: tuple[int, ...] | None) -> A.NetworkConfig:
    builders = {"paper": A.paper_config, "tiny": A.tiny_config}
    if preset not in builders:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(builders)}")
    build = builders[preset]
    return build(tap_widths) if tap_widths else build()


def _stack_split(manifest, root, split_name: str, input_size: int) -> tuple[np.ndarray, np.ndarray]:
    images, labels = D.load_split_arrays(manifest, root, split_name)
    if not images:
        raise ValueError(f"manifest has no entries in the {split_name!r} split")
    for img, entry in zip(images, manifest.split_entries(split_name)):
        if img.ndim != 2 or img.shape != (input_size, input_size):
            raise ValueError(
                f"{entry.path}: expected {input_size}x{input_size} grayscale input; "
                "run the preprocess subcommand first")
    return np.stack(images), labels


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

def _write_run_config(run: Path, values: dict) -> None:
    D.write_config_text(run / _CONFIG, values)


def _read_run_config(run: Path) -> dict:
    path = run / _CONFIG
    if not path.exists():
        raise ValueError(f"{run} is not a run directory ({_CONFIG} missing)")
    cfg = D.read_config_text(path)
    missing = [k for k in ("preset", "classes", "seed", "input_size", "data_root")
               if k not in cfg]
    if missing:
        raise ValueError(f"{path} is missing keys: {', '.join(missing)}")
    return cfg


def _load_run(run_dir, weights=None):
    """Rebuild the network (MLP head) and dataset handles from a run dir."""
    run = Path(run_dir)
    cfg = _read_run_config(run)
    classes = tuple(cfg["classes"].split(","))
    taps = _tap_widths(cfg.get("tap_widths") or None)
    net = A.build_fusion_classifier(_net_config(cfg["preset"], taps),
                                    len(classes), seed=int(cfg["seed"]))
    D.load_state_into(Path(weights) if weights else run / _WEIGHTS, net)
    net.eval()
    manifest = D.load_manifest(run / _MANIFEST)
    return net, manifest, cfg, Path(cfg["data_root"])


def _load_head(run: Path):
    path = run / _HEAD
    if not path.exists():
        return None
    return B.gbdt_deserialize(path.read_bytes())


def _predict_proba(net, ensemble, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    labels = np.zeros(len(images), dtype=np.int64)
    if ensemble is not None:
        feats, _ = TR.extract_features(net, (images, labels), batch_size=batch_size)
        return B.gbdt_predict(ensemble, feats)
    net.eval()
    channels = TR.net_input_channels(net)
    out = []
    for start in range(0, len(images), batch_size):
        x = T.Tensor(TR.to_net_input(images[start:start + batch_size], channels))
        out.append(T.softmax(net.logits(net.features(x))).data)
    return np.concatenate(out, axis=0)


def _prepared_image(path, cfg) -> np.ndarray:
    """Grayscale image at the network's input size, preprocessing if needed."""
    size = int(cfg["input_size"])
    gray = P.to_grayscale(D.load_image(path))
    if gray.shape == (size, size):
        return gray
    return P.preprocess_image(gray, size=(size, size)).image


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = D.SynthSpec(
        n_images=_opt(args, "n_images", int, 600),
        image_size=_opt(args, "size", int, 64),
        noise=_opt(args, "noise", float, 6.0),
        seed=_opt(args, "seed", int, 0),
    )
    manifest = D.synth_generate(spec, args.out)
    counts = manifest.class_counts()
    print(f"wrote {len(manifest.entries)} images under {args.out}")
    for name, count in zip(manifest.classes, counts):
        print(f"  {name}: {count}")
    print("splits: " + " ".join(f"{k}={v}" for k, v in manifest.split_counts().items()))
    return 0


def cmd_ingest(args) -> int:
    manifest = D.split(D.ingest(args.root), _opt(args, "seed", int, 0))
    out = Path(args.out) if args.out else Path(args.root) / _MANIFEST
    D.save_manifest(manifest, out)
    print(f"classes: {' '.join(manifest.classes)}")
    print(f"images: {len(manifest.entries)}")
    print("splits: " + " ".join(f"{k}={v}" for k, v in manifest.split_counts().items()))
    if manifest.skipped:
        print(f"skipped {len(manifest.skipped)} undecodable file(s):")
        for path in manifest.skipped:
            print(f"  {path}")
    print(f"manifest: {out}")
    return 0


def cmd_preprocess(args) -> int:
    manifest = D.load_manifest(args.manifest)
    root = Path(args.root) if args.root else Path(args.manifest).parent
    out = Path(args.out)
    size = _opt(args, "size", int, 224)
    grid = _opt(args, "clahe_grid", int, 8)
    clip = _opt(args, "clahe_clip", float, 2.0)
    margin = _opt(args, "roi_margin", int, 0)
    roi = not _flag(args, "no_roi")
    for entry in manifest.entries:
        result = P.preprocess_image(
            D.load_image(root / entry.path), size=(size, size),
            clahe_grid=grid, clahe_clip=clip, roi=roi, roi_margin=margin)
        D.save_image(out / entry.path, result.image)
    D.save_manifest(manifest, out / _MANIFEST)
    print(f"preprocessed {len(manifest.entries)} images to {size}x{size} under {out}")
    return 0


def cmd_train(args) -> int:
    data_root = Path(args.data)
    manifest = D.load_manifest(data_root / _MANIFEST)
    seed = _opt(args, "seed", int, 0)
    preset = _opt(args, "preset", str, "tiny")
    taps = _tap_widths(_opt(args, "tap_widths", str, None))
    net_cfg = _net_config(preset, taps)
    input_size = net_cfg.residual.input_size

    train_set = _stack_split(manifest, data_root, "train", input_size)
    val_set = _stack_split(manifest, data_root, "val", input_size)
    sets = [train_set[0], val_set[0]]
    if manifest.split_counts().get("test"):
        sets.append(_stack_split(manifest, data_root, "test", input_size)[0])
    TR.assert_no_leakage(*sets)

    net = A.build_fusion_classifier(net_cfg, len(manifest.classes), seed=seed)
    cfg = TR.TrainConfig(
        epochs=_opt(args, "epochs", int, 50),
        batch_size=_opt(args, "batch_size", int, 32),
        lr=_opt(args, "lr", float, 1e-3),
        seed=seed,
        log_cadence=_opt(args, "log_cadence", int, 1),
        augment=None if _flag(args, "no_augment") else P.AugmentSpec(),
        early_stop_val_acc=_opt(args, "early_stop_val_acc", float, None),
    )
    report = TR.train_stage1(net, train_set, val_set, cfg, log=print)

    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    D.write_weights(run / _WEIGHTS, net)
    D.save_manifest(manifest, run / _MANIFEST)
    (run / _REPORT).write_text(TR.format_train_report(report), encoding="utf-8")
    (run / _SUMMARY).write_text(
        json.dumps(TR.report_summary(report), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    _write_run_config(run, {
        "preset": preset,
        "tap_widths": ",".join(str(w) for w in taps) if taps else "",
        "classes": ",".join(manifest.classes),
        "input_size": input_size,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "seed": seed,
        "augment": 0 if cfg.augment is None else 1,
        "head": "mlp",
        "data_root": data_root.resolve(),
    })
    print(f"run written to {run}")
    print(f"best epoch {report.best_epoch}: val_acc {report.best_val_acc:.4f}")
    return 0


def cmd_fit_head(args) -> int:
    run = Path(args.run)
    net, manifest, cfg, data_root = _load_run(run)
    input_size = int(cfg["input_size"])
    train_set = _stack_split(manifest, data_root, "train", input_size)
    params = B.BoostParams(
        rounds=_opt(args, "rounds", int, 100),
        max_depth=_opt(args, "max_depth", int, 4),
        eta=_opt(args, "eta", float, 0.3),
    )
    feats, labels = TR.extract_features(net, train_set)
    ensemble = TR.train_stage2(feats, labels, params)
    (run / _HEAD).write_bytes(B.gbdt_serialize(ensemble))

    cfg.update({"head": "gbdt", "gbdt_rounds": params.rounds,
                "gbdt_max_depth": params.max_depth, "gbdt_eta": params.eta})
    _write_run_config(run, cfg)
    print(f"boosted head written to {run / _HEAD}")
    if manifest.split_counts().get("val"):
        val_images, val_labels = _stack_split(manifest, data_root, "val", input_size)
        probs = _predict_proba(net, ensemble, val_images)
        acc = float((np.argmax(probs, axis=1) == val_labels).mean())
        print(f"val accuracy with boosted head: {acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    net, manifest, cfg, data_root = _load_run(run, weights=args.weights)
    images, labels = _stack_split(manifest, data_root, args.split, int(cfg["input_size"]))
    head_mode = args.head or ("gbdt" if cfg.get("head") == "gbdt" else "mlp")
    ensemble = _load_head(run) if head_mode == "gbdt" else None
    if head_mode == "gbdt" and ensemble is None:
        raise ValueError("no boosted head in this run; run fit-head first")
    probs = _predict_proba(net, ensemble, images)
    report = M.evaluate(probs, labels, n_classes=len(manifest.classes))
    out = Path(args.out) if args.out else run / f"eval-{args.split}"
    paths = M.emit_plots(report, out)
    print(M.format_report(report), end="")
    print(f"head: {head_mode}")
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_quantize(args) -> int:
    run = Path(args.run)
    net, manifest, cfg, data_root = _load_run(run)
    out = Path(args.out) if args.out else run / "model.q8"
    _, sizes = Q.quantize_model(net, out)
    print(f"quantized weights written to {out}")
    print(f"float32 bytes: {sizes.f32_bytes}")
    print(f"quantized bytes: {sizes.quantized_bytes} "
          f"({sizes.quantized_bytes / sizes.f32_bytes:.3f}x, ratio {sizes.ratio:.2f})")
    if args.check_split:
        input_size = int(cfg["input_size"])
        images, _ = _stack_split(manifest, data_root, args.check_split, input_size)
        taps = _tap_widths(cfg.get("tap_widths") or None)
        net_q = A.build_fusion_classifier(_net_config(cfg["preset"], taps),
                                          len(manifest.classes), seed=int(cfg["seed"]))
        D.load_state_into(out, net_q)
        agreement = Q.fidelity_check(net, net_q, images)
        print(f"top-1 agreement on {args.check_split}: {agreement.top1_agreement:.4f} "
              f"(max logit deviation {agreement.max_logit_deviation:.5f})")
    return 0


def cmd_explain(args) -> int:
    run = Path(args.run)
    net, _, cfg, _ = _load_run(run, weights=args.weights)
    image = _prepared_image(args.image, cfg)
    heatmap = G.grad_cam(net, image, class_index=args.class_index,
                         target_layer=_opt(args, "target", str, "pointwise"))
    D.save_image(args.out, G.overlay(image, heatmap, alpha=_opt(args, "alpha", float, 0.4)))
    classes = cfg["classes"].split(",")
    print(f"class {heatmap.class_index} ({classes[heatmap.class_index]})")
    print(f"overlay written to {args.out}")
    return 0


def cmd_predict(args) -> int:
    run = Path(args.run)
    net, _, cfg, _ = _load_run(run, weights=args.weights)
    classes = cfg["classes"].split(",")
    ensemble = _load_head(run) if cfg.get("head") == "gbdt" else None
    images = np.stack([_prepared_image(p, cfg) for p in args.images])
    probs = _predict_proba(net, ensemble, images)
    for path, row in zip(args.images, probs):
        scores = " ".join(f"{p:.4f}" for p in row)
        print(f"{path}\t{classes[int(np.argmax(row))]}\t{scores}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="rng seed (default 0)")
    common.add_argument("--config", default=None, metavar="FILE",
                        help="key=value file supplying defaults for any option")

    parser = argparse.ArgumentParser(
        prog="neurofuse",
        description="Brain-MRI fusion classifier: preprocessing, training, "
                    "boosted heads, quantization, and heatmap explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate the synthetic blob dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-images", type=int, default=None, dest="n_images")
    p.add_argument("--size", type=int, default=None, help="square image size")
    p.add_argument("--noise", type=float, default=None, help="background noise sigma")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common],
                       help="index a class-per-directory image tree")
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--out", default=None, help="manifest path (default <root>/manifest.txt)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", parents=[common],
                       help="ROI-crop, CLAHE, and resize a manifest's images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", default=None, help="image root (default: manifest directory)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=None, help="output side (default 224)")
    p.add_argument("--clahe-grid", type=int, default=None, dest="clahe_grid")
    p.add_argument("--clahe-clip", type=float, default=None, dest="clahe_clip")
    p.add_argument("--roi-margin", type=int, default=None, dest="roi_margin")
    p.add_argument("--no-roi", action="store_true", dest="no_roi",
                   help="skip the foreground crop")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common],
                       help="stage-1 training; writes a run directory")
    p.add_argument("--data", required=True, help="dataset dir holding manifest.txt")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--preset", choices=("paper", "tiny"), default=None)
    p.add_argument("--tap-widths", default=None, dest="tap_widths",
                   help="three comma-separated channel widths")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--log-cadence", type=int, default=None, dest="log_cadence")
    p.add_argument("--no-augment", action="store_true", dest="no_augment")
    p.add_argument("--early-stop-val-acc", type=float, default=None,
                   dest="early_stop_val_acc")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-head", parents=[common],
                       help="fit the boosted-tree head on a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--max-depth", type=int, default=None, dest="max_depth")
    p.add_argument("--eta", type=float, default=None)
    p.set_defaults(func=cmd_fit_head)

    p = sub.add_parser("eval", parents=[common],
                       help="score a split and emit metric reports")
    p.add_argument("--run", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default=None, help="report dir (default <run>/eval-<split>)")
    p.add_argument("--head", choices=("mlp", "gbdt"), default=None,
                   help="override the run's configured head")
    p.add_argument("--weights", default=None, help="alternative weight file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", parents=[common],
                       help="8-bit weight quantization of a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None, help="output file (default <run>/model.q8)")
    p.add_argument("--check-split", choices=("train", "val", "test"), default=None,
                   dest="check_split", help="also report top-1 agreement on a split")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("explain", parents=[common],
                       help="write a heatmap overlay for one image")
    p.add_argument("--run", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", type=int, default=None, dest="class_index",
                   help="class to explain (default: the prediction)")
    p.add_argument("--out", default="cam.png")
    p.add_argument("--alpha", type=float, default=None, help="overlay opacity")
    p.add_argument("--target", default=None, choices=G.TARGET_LAYERS,
                   help="activation grid to explain (default: pointwise)")
    p.add_argument("--weights", default=None, help="alternative weight file")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("predict", parents=[common],
                       help="print class probabilities for images")
    p.add_argument("--run", required=True)
    p.add_argument("--weights", default=None, help="alternative weight file")
    p.add_argument("images", nargs="+", metavar="IMAGE")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.config_values = D.read_config_text(args.config) if args.config else {}
        return args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        reason = exc.args[0] if exc.args else exc
        print(f"error: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
