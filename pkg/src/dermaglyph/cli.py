"""Command-line entry point.

One binary with subcommands mirroring the pipeline stages: synth,
enhance, quality, split, train, eval, explain, and pipeline (all stages
in order).  Flags override values from --config; every default matches
the published protocol (see config module).  Diagnostics go to stderr
tagged with the stage name; the exit code is 0 only if every requested
stage succeeded.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, apply_overrides, load_config

log = logging.getLogger("dermaglyph")


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="key = value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="top-level seed (default: 0 or config value)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for image stages (default: all cores)")
    parser.add_argument("--verbose", action="store_true", help="debug logging to stderr")


def _build_config(args: argparse.Namespace, overrides: dict) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    merged = dict(overrides)
    merged.setdefault("seed", args.seed)
    merged.setdefault("threads", args.threads)
    return apply_overrides(cfg, merged)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dermaglyph",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        _common_flags(p)
        return p

    p = add("synth", "generate a labeled synthetic cohort (10 fingers per participant)")
    p.add_argument("--out", required=True, help="output directory for PNGs + manifest.csv")
    p.add_argument("--controls", type=int, default=40, help="control participants")
    p.add_argument("--ks", type=int, default=25, help="KS participants")
    p.add_argument("--wss", type=int, default=12, help="WSS participants")
    p.add_argument("--image-size", type=int, default=224, help="square image side in pixels")
    p.add_argument("--base-freq", type=float, default=0.1, help="control ridge frequency (cycles/pixel)")
    p.add_argument("--freq-delta", type=float, default=0.015,
                   help="class frequency shift (+KS / -WSS)")
    p.add_argument("--noise-sigma", type=float, default=0.05, help="additive Gaussian noise sigma")

    p = add("enhance", "Gabor ridge enhancement of a PNG file or directory")
    p.add_argument("--in", dest="src", required=True, help="input PNG file or directory")
    p.add_argument("--out", required=True, help="output directory")

    p = add("quality", "score images and gate out low-quality records")
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--threshold", type=int, default=2, help="minimum retained score (0-100)")
    p.add_argument("--out", required=True, help="gated manifest CSV path")
    p.add_argument("--rejects", default=None,
                   help="rejection log CSV (default: <out dir>/rejections.csv)")

    p = add("split", "participant-level 80/20 split with 5 cross-validation folds")
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--task", default="control-ks",
                   choices=["control-ks", "control-wss", "ks-wss"], help="classification task")
    p.add_argument("--test-fraction", type=float, default=0.2, help="held-out participant fraction")
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    p.add_argument("--out", required=True, help="plan JSON path")

    p = add("train", "train the 5-fold ensemble (10 epochs each, Adam lr 3e-4)")
    p.add_argument("--manifest", required=True, help="gated manifest CSV")
    p.add_argument("--plan", required=True, help="split plan JSON")
    p.add_argument("--task", default=None, help="must match the plan's task when given")
    p.add_argument("--out", required=True, help="run directory for checkpoints + logs")
    p.add_argument("--image-size", type=int, default=224, help="model input side in pixels")
    p.add_argument("--epochs", type=int, default=10, help="training epochs per fold model")
    p.add_argument("--lr", type=float, default=3e-4, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    p.add_argument("--embed-dim", type=int, default=0,
                   help="embedding dim (0 = task default: 512 vs controls, 256 ks-wss)")
    p.add_argument("--ffn-hidden", type=int, default=0,
                   help="FFN hidden dim (0 = task default: 1024 vs controls, 512 ks-wss)")
    p.add_argument("--no-class-weights", action="store_true",
                   help="disable inverse-frequency loss weighting")

    p = add("eval", "evaluate an ensemble run on the held-out test images")
    p.add_argument("--run", required=True, help="run directory with fold*.ckpt")
    p.add_argument("--manifest", required=True, help="gated manifest CSV")
    p.add_argument("--plan", required=True, help="split plan JSON")
    p.add_argument("--out", default=None, help="output directory (default: <run>/eval)")

    p = add("explain", "attention heatmap overlay for one image")
    p.add_argument("--run", required=True, help="run directory with fold*.ckpt")
    p.add_argument("--image", required=True, help="fingerprint PNG")
    p.add_argument("--out", required=True, help="overlay PNG path (sidecar JSON alongside)")

    p = add("pipeline", "run all stages: synth, enhance, quality, split, train, eval, explain")
    p.add_argument("--out", default=None, help="output directory (default: config out_dir)")

    return parser


def _cmd_synth(args) -> int:
    from .dataset import Label
    from .synth import SynthSpec, generate_cohort

    cfg = _build_config(args, {
        "controls": args.controls, "ks": args.ks, "wss": args.wss,
        "image_size": args.image_size, "base_freq": args.base_freq,
        "freq_delta": args.freq_delta, "noise_sigma": args.noise_sigma,
    })
    spec = SynthSpec(
        image_size=cfg.image_size, base_freq=cfg.base_freq, freq_delta=cfg.freq_delta,
        whorl_density={Label.CONTROL: cfg.whorl_control, Label.KS: cfg.whorl_ks,
                       Label.WSS: cfg.whorl_wss},
        noise_sigma=cfg.noise_sigma, seed=cfg.seed,
    )
    counts = {Label.CONTROL: cfg.controls, Label.KS: cfg.ks, Label.WSS: cfg.wss}
    manifest = generate_cohort(spec, counts, args.out)
    log.info("[synth] wrote %d images under %s", len(manifest.records), args.out)
    return 0


def _cmd_enhance(args) -> int:
    from .dataset import load_manifest, save_manifest
    from .enhance import EnhanceConfig
    from .pipeline import enhance_paths, rebase_manifest, thread_count

    cfg = _build_config(args, {})
    enhance_cfg = EnhanceConfig(
        block_size=cfg.block_size, sigma_x=cfg.sigma_x, sigma_y=cfg.sigma_y,
        target_mean=cfg.target_mean, target_var=cfg.target_var,
        var_threshold=cfg.var_threshold,
    )
    src = Path(args.src)
    out = Path(args.out)
    if src.is_dir():
        files = sorted(src.glob("*.png"))
        if not files:
            log.error("[enhance] no PNG files in %s", src)
            return 1
    else:
        files = [src]
    pairs = [(f, out / f.name) for f in files]
    failures = enhance_paths(pairs, enhance_cfg, thread_count(cfg.threads))
    if src.is_dir() and (src / "manifest.csv").exists():
        manifest = load_manifest(src / "manifest.csv")
        save_manifest(rebase_manifest(manifest, out), out / "manifest.csv")
    log.info("[enhance] %d enhanced, %d skipped", len(pairs) - len(failures), len(failures))
    return 0 if len(failures) < len(pairs) else 1


def _cmd_quality(args) -> int:
    from .dataset import load_manifest, save_manifest
    from .quality import gate_manifest, write_rejection_log

    manifest = load_manifest(args.manifest)
    gated, rejections = gate_manifest(manifest, args.threshold)
    save_manifest(gated, args.out)
    rejects_path = args.rejects or str(Path(args.out).parent / "rejections.csv")
    write_rejection_log(rejections, rejects_path)
    log.info("[quality] retained %d / %d records", len(gated.records), len(manifest.records))
    return 0


def _cmd_split(args) -> int:
    from .dataset import Task, load_manifest, make_split

    cfg = _build_config(args, {"task": args.task, "test_fraction": args.test_fraction,
                               "n_folds": args.folds})
    manifest = load_manifest(args.manifest)
    plan = make_split(manifest, Task.from_key(cfg.task), cfg.test_fraction, cfg.n_folds,
                      seed=cfg.seed)
    plan.to_json(args.out)
    log.info("[split] %d test participants, %d folds -> %s",
             len(plan.test_participants), len(plan.folds), args.out)
    return 0


def _cmd_train(args) -> int:
    from .dataset import SplitPlan, load_manifest
    from .pipeline import vit_config_from
    from .train_eval import TrainConfig, train_ensemble

    cfg = _build_config(args, {
        "image_size": args.image_size, "epochs": args.epochs, "lr": args.lr,
        "batch_size": args.batch_size, "embed_dim": args.embed_dim,
        "ffn_hidden": args.ffn_hidden,
        "use_class_weights": False if args.no_class_weights else None,
    })
    manifest = load_manifest(args.manifest)
    plan = SplitPlan.from_json(args.plan)
    if args.task is not None and args.task != plan.task.key:
        log.error("[train] --task %s does not match plan task %s", args.task, plan.task.key)
        return 1
    vit_cfg = vit_config_from(cfg, plan.task)
    train_cfg = TrainConfig(task=plan.task, epochs=cfg.epochs, lr=cfg.lr,
                            batch_size=cfg.batch_size, seed=cfg.seed,
                            use_class_weights=cfg.use_class_weights)
    paths = train_ensemble(manifest, plan, vit_cfg, train_cfg, args.out)
    log.info("[train] wrote %d checkpoints under %s", len(paths), args.out)
    return 0


def _cmd_eval(args) -> int:
    from .dataset import SplitPlan, load_manifest
    from .train_eval import EnsembleModel, evaluate_ensemble, save_roc_svg, write_roc_csv

    manifest = load_manifest(args.manifest)
    plan = SplitPlan.from_json(args.plan)
    ensemble = EnsembleModel.from_dir(args.run)
    report, curve, _, _ = evaluate_ensemble(ensemble, manifest, plan)
    out = Path(args.out) if args.out else Path(args.run) / "eval"
    report.to_json(out / "report.json")
    write_roc_csv(curve, out / "roc.csv")
    save_roc_svg(curve, out / "roc.svg", title=f"ROC ({plan.task.key})")
    log.info("[eval] auc=%.3f accuracy=%.3f f1=%.3f -> %s",
             report.auc, report.accuracy, report.f1, out)
    return 0


def _cmd_explain(args) -> int:
    from . import imgio
    from .explain import ensemble_heatmap, write_heatmap
    from .train_eval import EnsembleModel
    from .vit import preprocess_image

    ensemble = EnsembleModel.from_dir(args.run)
    img = imgio.load_png(args.image)
    model_input = preprocess_image(img, ensemble.config)
    heatmap, overlay = ensemble_heatmap(ensemble, img, model_input,
                                        source=f"{args.run};{args.image}")
    write_heatmap(heatmap, overlay, args.out)
    log.info("[explain] wrote %s (+ sidecar JSON)", args.out)
    return 0


def _cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    cfg = _build_config(args, {"out_dir": args.out})
    inputs = {}
    if args.config:
        from .pipeline import sha256_file

        inputs["config_file"] = sha256_file(Path(args.config))
    manifest_path = run_pipeline(cfg, inputs)
    log.info("[pipeline] complete; run manifest at %s", manifest_path)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "enhance": _cmd_enhance,
    "quality": _cmd_quality,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
    "pipeline": _cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"[config] error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced with stage tag where available
        stage = getattr(exc, "stage", args.command)
        print(f"[{stage}] error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
