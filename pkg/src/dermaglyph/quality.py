"""Proxy quality scoring and manifest gating.

The score is a documented three-component proxy on a 0-100 scale:
coverage (foreground block fraction), contrast (normalized foreground
variance), and coherence (mean foreground orientation coherence).  It is
not bit-compatible with external quality tools; manifests may carry an
explicit ``quality`` column to inject externally computed scores, which
bypasses the proxy entirely.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio
from .dataset import Manifest, ManifestRecord
from .enhance import estimate_orientation, normalize_image, segment
from .imgio import GrayImage, round_half_up

__all__ = [
    "QualityReport",
    "RejectionEntry",
    "score_quality",
    "gate_manifest",
    "write_rejection_log",
]

DEFAULT_THRESHOLD = 2

_BLOCK_SIZE = 16
_VAR_THRESHOLD = 0.001
_CONTRAST_SCALE = 0.01


@dataclass(frozen=True)
class QualityReport:
    score: int
    components: dict[str, float]
    passed: bool


@dataclass(frozen=True)
class RejectionEntry:
    path: str
    score: int | None
    reason: str  # "quality" or "io"


def score_quality(img: GrayImage, threshold: int = DEFAULT_THRESHOLD) -> QualityReport:
    """Score one image; degenerate (flat) images score 0.

    score = round(100 * mean(coverage, contrast, coherence)), and
    passed <=> score >= threshold.
    """
    unit = imgio.to_unit_float(img)
    norm, degenerate = normalize_image(unit, 0.5, _CONTRAST_SCALE)
    if degenerate:
        components = {"coverage": 0.0, "contrast": 0.0, "coherence": 0.0}
        return QualityReport(score=0, components=components, passed=0 >= threshold)

    mask = segment(norm, _BLOCK_SIZE, _VAR_THRESHOLD)
    fg = mask.foreground
    coverage = float(fg.mean())

    if fg.any():
        fg_pixels = np.kron(fg, np.ones((_BLOCK_SIZE, _BLOCK_SIZE), dtype=bool))
        fg_pixels = fg_pixels[: norm.data.shape[0], : norm.data.shape[1]]
        contrast = min(float(norm.data[fg_pixels].var()) / _CONTRAST_SCALE, 1.0)
        orient = estimate_orientation(norm, _BLOCK_SIZE)
        coherence = float(orient.coherence[fg].mean())
    else:
        contrast = 0.0
        coherence = 0.0

    components = {"coverage": coverage, "contrast": contrast, "coherence": coherence}
    score = int(round_half_up(100.0 * (coverage + contrast + coherence) / 3.0))
    return QualityReport(score=score, components=components, passed=score >= threshold)


def gate_manifest(
    manifest: Manifest, threshold: int = DEFAULT_THRESHOLD
) -> tuple[Manifest, list[RejectionEntry]]:
    """Keep records scoring at or above the threshold.

    Records with a manifest-provided quality value use it directly; the
    rest are scored by the proxy.  Unreadable files are rejected with
    reason "io" regardless of threshold.  Order is preserved and
    len(retained) + len(rejected) == len(input).
    """
    if not 0 <= threshold <= 100:
        raise ValueError(f"threshold must be in [0, 100], got {threshold}")
    retained: list[ManifestRecord] = []
    rejected: list[RejectionEntry] = []
    for rec in manifest.records:
        if rec.quality is not None:
            score = rec.quality
        else:
            try:
                img = imgio.load_png(rec.path)
            except (FileNotFoundError, imgio.DecodeError, imgio.UnsupportedDepthError):
                rejected.append(RejectionEntry(rec.path, None, "io"))
                continue
            score = score_quality(img, threshold).score
        if score >= threshold:
            retained.append(
                rec if rec.quality is not None
                else ManifestRecord(rec.participant_id, rec.finger, rec.label, rec.path, score)
            )
        else:
            rejected.append(RejectionEntry(rec.path, score, "quality"))
    return Manifest(tuple(retained)), rejected


def write_rejection_log(rejections: list[RejectionEntry], path: str | Path) -> None:
    """CSV rejection log: path,score,reason (score empty for io failures)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "score", "reason"])
        for entry in rejections:
            writer.writerow([entry.path, "" if entry.score is None else entry.score, entry.reason])
