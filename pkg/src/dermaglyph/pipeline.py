"""End-to-end pipeline orchestration and the run manifest.

Stages run in order (synth, enhance, quality, split, train, eval,
explain); the first failing stage aborts the run with a stage-tagged
error.  Every artifact the run produces is listed in run_manifest.json
with a sha256 content hash, so two runs with the same config and seed can
be compared byte-for-byte.

Seed derivation from the top-level seed: synthesis uses ``seed``, the
split uses ``seed + 1``, training uses ``seed + 2`` (fold k trains with
``seed + 2 + k``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import imgio
from .config import PipelineConfig
from .dataset import (
    Label,
    Manifest,
    ManifestRecord,
    Task,
    expand_split,
    make_split,
    save_manifest,
)
from .enhance import EnhanceConfig, NoRidgeStructureError, enhance_fingerprint
from .explain import ensemble_heatmap, write_heatmap
from .quality import gate_manifest, write_rejection_log
from .synth import SynthSpec, generate_cohort
from .train_eval import (
    EnsembleModel,
    TrainConfig,
    evaluate_ensemble,
    save_roc_svg,
    train_ensemble,
    write_roc_csv,
)
from .vit import ViTConfig, preprocess_image

__all__ = [
    "StageError",
    "run_pipeline",
    "enhance_paths",
    "vit_config_from",
    "write_run_manifest",
    "rebase_manifest",
    "thread_count",
    "sha256_file",
]

log = logging.getLogger(__name__)


class StageError(Exception):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def thread_count(cfg_threads: int) -> int:
    return cfg_threads if cfg_threads > 0 else (os.cpu_count() or 1)


def enhance_paths(
    pairs: list[tuple[Path, Path]], enhance_cfg: EnhanceConfig, threads: int = 1
) -> list[tuple[Path, str]]:
    """Enhance (src, dst) image pairs, in parallel across images.

    Per-image failures (unreadable input, no ridge structure) are
    collected and returned as (src, reason) instead of aborting the batch;
    results are independent of the thread schedule.
    """

    def work(pair: tuple[Path, Path]) -> tuple[Path, str] | None:
        src, dst = pair
        try:
            img = imgio.load_png(src)
            imgio.write_png(enhance_fingerprint(img, enhance_cfg), dst)
            return None
        except (FileNotFoundError, imgio.DecodeError, imgio.UnsupportedDepthError,
                NoRidgeStructureError) as exc:
            return (src, str(exc))

    failures: list[tuple[Path, str]] = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]
    for res in results:
        if res is not None:
            failures.append(res)
            log.warning("enhance skipped %s: %s", res[0], res[1])
    return failures


def vit_config_from(cfg: PipelineConfig, task: Task) -> ViTConfig:
    """Model config from the pipeline config; 0 dims mean task defaults."""
    base = ViTConfig.for_task(task, image_size=cfg.image_size)
    return ViTConfig(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        embed_dim=cfg.embed_dim or base.embed_dim,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        ffn_hidden=cfg.ffn_hidden or base.ffn_hidden,
    )


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir: Path, cfg: PipelineConfig, inputs: dict[str, str]) -> Path:
    """Hash every file under out_dir into run_manifest.json."""
    artifacts = []
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "run_manifest.json":
            artifacts.append({
                "path": path.relative_to(out_dir).as_posix(),
                "sha256": sha256_file(path),
            })
    payload = {
        "tool": "dermaglyph",
        "version": __version__,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "inputs": inputs,
        "artifacts": artifacts,
    }
    manifest_path = out_dir / "run_manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def rebase_manifest(manifest: Manifest, new_dir: Path) -> Manifest:
    records = tuple(
        ManifestRecord(r.participant_id, r.finger, r.label, str(new_dir / Path(r.path).name), r.quality)
        for r in manifest.records
    )
    return Manifest(records)


def run_pipeline(cfg: PipelineConfig, config_inputs: dict[str, str] | None = None) -> Path:
    """Execute all stages under cfg.out_dir; returns the run manifest path."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    task = Task.from_key(cfg.task)
    threads = thread_count(cfg.threads)

    # synth
    try:
        spec = SynthSpec(
            image_size=cfg.image_size,
            base_freq=cfg.base_freq,
            freq_delta=cfg.freq_delta,
            whorl_density={
                Label.CONTROL: cfg.whorl_control,
                Label.KS: cfg.whorl_ks,
                Label.WSS: cfg.whorl_wss,
            },
            noise_sigma=cfg.noise_sigma,
            seed=cfg.seed,
        )
        counts = {Label.CONTROL: cfg.controls, Label.KS: cfg.ks, Label.WSS: cfg.wss}
        log.info("[synth] generating cohort: %s", {k.value: v for k, v in counts.items()})
        raw_manifest = generate_cohort(spec, counts, out_dir / "raw")
    except (ValueError, OSError) as exc:
        raise StageError("synth", str(exc)) from exc

    # enhance
    try:
        enhance_cfg = EnhanceConfig(
            block_size=cfg.block_size,
            sigma_x=cfg.sigma_x,
            sigma_y=cfg.sigma_y,
            target_mean=cfg.target_mean,
            target_var=cfg.target_var,
            var_threshold=cfg.var_threshold,
        )
        enhanced_dir = out_dir / "enhanced"
        pairs = [
            (Path(r.path), enhanced_dir / Path(r.path).name) for r in raw_manifest.records
        ]
        log.info("[enhance] filtering %d images with %d thread(s)", len(pairs), threads)
        failures = enhance_paths(pairs, enhance_cfg, threads)
        if len(failures) == len(pairs):
            raise StageError("enhance", "no image could be enhanced")
        enhanced_manifest = rebase_manifest(raw_manifest, enhanced_dir)
        save_manifest(enhanced_manifest, enhanced_dir / "manifest.csv")
    except StageError:
        raise
    except (ValueError, OSError) as exc:
        raise StageError("enhance", str(exc)) from exc

    # quality
    try:
        log.info("[quality] gating at threshold %d", cfg.quality_threshold)
        gated, rejections = gate_manifest(enhanced_manifest, cfg.quality_threshold)
        if not gated.records:
            raise StageError("quality", "every record was rejected")
        save_manifest(gated, out_dir / "manifest_gated.csv")
        write_rejection_log(rejections, out_dir / "rejections.csv")
    except StageError:
        raise
    except (ValueError, OSError) as exc:
        raise StageError("quality", str(exc)) from exc

    # split
    try:
        plan = make_split(gated, task, cfg.test_fraction, cfg.n_folds, seed=cfg.seed + 1)
        plan.to_json(out_dir / "plan.json")
        log.info("[split] %d test participants, %d folds",
                 len(plan.test_participants), len(plan.folds))
    except Exception as exc:
        raise StageError("split", str(exc)) from exc

    # train
    try:
        vit_cfg = vit_config_from(cfg, task)
        train_cfg = TrainConfig(
            task=task,
            epochs=cfg.epochs,
            lr=cfg.lr,
            batch_size=cfg.batch_size,
            seed=cfg.seed + 2,
            use_class_weights=cfg.use_class_weights,
        )
        log.info("[train] 5-fold ensemble: embed %d, ffn %d, %d epochs",
                 vit_cfg.embed_dim, vit_cfg.ffn_hidden, cfg.epochs)
        train_ensemble(gated, plan, vit_cfg, train_cfg, out_dir / "run")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("train", str(exc)) from exc

    # eval
    try:
        ensemble = EnsembleModel.from_dir(out_dir / "run")
        report, curve, _scores, _labels = evaluate_ensemble(ensemble, gated, plan)
        report.to_json(out_dir / "eval" / "report.json")
        write_roc_csv(curve, out_dir / "eval" / "roc.csv")
        save_roc_svg(curve, out_dir / "eval" / "roc.svg", title=f"ROC ({task.key})")
        log.info("[eval] auc=%.3f accuracy=%.3f over %d test images",
                 report.auc, report.accuracy, report.n_images)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("eval", str(exc)) from exc

    # explain: one heatmap for the first test image of each class
    try:
        expanded = expand_split(plan, gated)
        chosen: dict[Label, ManifestRecord] = {}
        for i in expanded.test:
            rec = gated.records[i]
            if rec.label not in chosen:
                chosen[rec.label] = rec
        for rec in chosen.values():
            img = imgio.load_png(rec.path)
            model_input = preprocess_image(img, ensemble.config)
            heatmap, overlay = ensemble_heatmap(
                ensemble, img, model_input, source=f"run;{rec.path}"
            )
            name = f"{rec.participant_id}_f{rec.finger:02d}_heatmap.png"
            write_heatmap(heatmap, overlay, out_dir / "heatmaps" / name)
        log.info("[explain] wrote %d heatmaps", len(chosen))
    except StageError:
        raise
    except Exception as exc:
        raise StageError("explain", str(exc)) from exc

    return write_run_manifest(out_dir, cfg, config_inputs or {})
