"""Synthetic fingerprint-like image generation with class-conditional structure.

Each print is a cosine ridge pattern over a smooth phase field: a linear
carrier at a random direction plus a configurable number of spiral
singularities (whorl-like cores).  Class identity is injected through the
carrier frequency (CONTROL at the base frequency, KS shifted up, WSS
shifted down by ``freq_delta``) and through the per-class singularity
count.  Participants share nuisance variation (a global rotation within
+/-15 degrees and a contrast factor) across their ten fingers, so
participant identity carries information and split-leakage tests are
meaningful.

All randomness flows from explicit integer seeds through numpy
SeedSequence; per-finger streams are derived from (cohort seed,
participant index, finger), independent of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Label, Manifest, ManifestRecord, save_manifest
from .imgio import FloatImage, GrayImage, from_unit_float, write_png

__all__ = ["SynthSpec", "ridge_sinusoid", "generate_print", "generate_cohort"]

FREQ_MIN = 1.0 / 25.0
FREQ_MAX = 1.0 / 3.0

_AMPLITUDE = 0.4          # base half-range of the cosine in unit intensity
_ROTATION_RANGE = math.radians(15.0)
_CONTRAST_RANGE = (0.75, 1.25)
_MARGIN_FRACTION = 0.2    # singularities stay inside the central 60% box


@dataclass(frozen=True)
class SynthSpec:
    """Generation parameters; per-class whorl counts keyed by Label."""

    image_size: int = 224
    base_freq: float = 0.1
    freq_delta: float = 0.015
    whorl_density: dict[Label, int] = field(
        default_factory=lambda: {Label.CONTROL: 0, Label.KS: 1, Label.WSS: 2}
    )
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 1:
            raise ValueError(f"image_size must be >= 1, got {self.image_size}")
        for f in (self.base_freq, self.base_freq + self.freq_delta, self.base_freq - self.freq_delta):
            if not FREQ_MIN <= f <= FREQ_MAX:
                raise ValueError(
                    f"class frequency {f:.4f} outside ridge range [{FREQ_MIN:.4f}, {FREQ_MAX:.4f}]"
                )
        for label, k in self.whorl_density.items():
            if k < 0:
                raise ValueError(f"whorl_density[{label}] must be >= 0, got {k}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def class_freq(self, label: Label) -> float:
        if label is Label.KS:
            return self.base_freq + self.freq_delta
        if label is Label.WSS:
            return self.base_freq - self.freq_delta
        return self.base_freq


def ridge_sinusoid(
    width: int,
    height: int,
    ridge_angle: float,
    freq: float,
    noise_sigma: float = 0.0,
    seed: int = 0,
    amplitude: float = _AMPLITUDE,
) -> GrayImage:
    """Parallel-ridge test pattern with stripes running along ``ridge_angle``.

    Intensity varies along the ridge normal (angle + 90 degrees), so a
    block orientation estimator should recover ``ridge_angle`` mod pi.
    Used as the independent oracle for the enhancement stage.
    """
    normal = ridge_angle + math.pi / 2.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    phase = 2.0 * math.pi * freq * (xx * math.cos(normal) + yy * math.sin(normal))
    unit = 0.5 + amplitude * np.cos(phase)
    if noise_sigma > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
        unit = unit + rng.normal(0.0, noise_sigma, unit.shape)
    return from_unit_float(FloatImage(np.clip(unit, 0.0, 1.0)))


def _render(
    spec: SynthSpec,
    label: Label,
    rng: np.random.Generator,
    rotation: float,
    contrast: float,
) -> GrayImage:
    """Draw one print; the rng is consumed in a fixed, documented order."""
    size = spec.image_size
    freq = spec.class_freq(label)
    n_whorls = spec.whorl_density.get(label, 0)

    half = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    xx -= half
    yy -= half
    cr, sr = math.cos(rotation), math.sin(rotation)
    xr = cr * xx + sr * yy
    yr = -sr * xx + cr * yy

    # draw order: carrier direction, phase offset, then per-whorl (x, y, sign)
    direction = rng.uniform(0.0, math.pi)
    phase0 = rng.uniform(0.0, 2.0 * math.pi)
    phase = 2.0 * math.pi * freq * (xr * math.cos(direction) + yr * math.sin(direction)) + phase0
    span = size * (1.0 - 2.0 * _MARGIN_FRACTION)
    for _ in range(n_whorls):
        cx = rng.uniform(-span / 2.0, span / 2.0)
        cy = rng.uniform(-span / 2.0, span / 2.0)
        sign = 1.0 if rng.integers(0, 2) == 1 else -1.0
        phase = phase + sign * np.arctan2(yr - cy, xr - cx)

    unit = 0.5 + _AMPLITUDE * contrast * np.cos(phase)
    if spec.noise_sigma > 0:
        unit = unit + rng.normal(0.0, spec.noise_sigma, unit.shape)
    return from_unit_float(FloatImage(np.clip(unit, 0.0, 1.0)))


def generate_print(
    spec: SynthSpec,
    label: Label,
    rng_seed: int,
    rotation: float = 0.0,
    contrast: float = 1.0,
) -> GrayImage:
    """Generate one labeled print, deterministic in (spec, label, rng_seed).

    ``rotation`` and ``contrast`` default to the neutral values; cohort
    generation passes participant-shared draws for them.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(rng_seed)])))
    return _render(spec, label, rng, rotation, contrast)


def _finger_seed(seed: int, participant_index: int, finger: int) -> int:
    ss = np.random.SeedSequence([seed, 2, participant_index, finger])
    return int(ss.generate_state(1, np.uint64)[0])


_PID_PREFIX = {Label.CONTROL: "C", Label.KS: "K", Label.WSS: "W"}


def generate_cohort(
    spec: SynthSpec,
    n_per_class: dict[Label, int],
    out_dir: str | Path,
) -> Manifest:
    """Write a synthetic cohort (10 fingers per participant) plus manifest.csv.

    Participant nuisances (rotation, contrast) come from the stream
    (seed, 1, participant); finger patterns from (seed, 2, participant,
    finger).  Two runs with the same spec produce identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    pidx = 0
    for label in Label:
        for _ in range(n_per_class.get(label, 0)):
            pid = f"{_PID_PREFIX[label]}{pidx:04d}"
            prng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([spec.seed, 1, pidx]))
            )
            rotation = prng.uniform(-_ROTATION_RANGE, _ROTATION_RANGE)
            contrast = prng.uniform(*_CONTRAST_RANGE)
            for finger in range(1, 11):
                img = generate_print(
                    spec, label, _finger_seed(spec.seed, pidx, finger),
                    rotation=rotation, contrast=contrast,
                )
                fname = f"{pid}_f{finger:02d}.png"
                write_png(img, out_dir / fname)
                records.append(ManifestRecord(pid, finger, label, str(out_dir / fname)))
            pidx += 1
    manifest = Manifest(tuple(records))
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
