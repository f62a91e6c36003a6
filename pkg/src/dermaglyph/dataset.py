"""Manifest model, labels, and leakage-free participant-level splitting.

A manifest indexes fingerprint images by (participant, finger) and carries
one label per participant.  Splits are always performed at the participant
level so that no individual contributes images to more than one partition,
and they are pure functions of (manifest, task, fractions, seed).  The
shuffle RNG is numpy's PCG64, seeded explicitly, so plans are reproducible
across platforms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "Label",
    "Task",
    "ManifestRecord",
    "Manifest",
    "SplitPlan",
    "ManifestError",
    "SplitError",
    "load_manifest",
    "save_manifest",
    "make_split",
    "expand_split",
    "class_weights",
]


class ManifestError(Exception):
    """Malformed manifest file or invariant violation."""


class SplitError(Exception):
    """Split preconditions not met (e.g. a class is too small)."""


class Label(Enum):
    CONTROL = "Control"
    KS = "KS"
    WSS = "WSS"

    def __str__(self) -> str:
        return self.value


class Task(Enum):
    """Binary classification task; second class is the positive one."""

    CONTROL_KS = ("control-ks", Label.CONTROL, Label.KS)
    CONTROL_WSS = ("control-wss", Label.CONTROL, Label.WSS)
    KS_WSS = ("ks-wss", Label.KS, Label.WSS)

    def __init__(self, key: str, negative: Label, positive: Label):
        self.key = key
        self.negative = negative
        self.positive = positive

    @property
    def classes(self) -> tuple[Label, Label]:
        return (self.negative, self.positive)

    @classmethod
    def from_key(cls, key: str) -> "Task":
        for task in cls:
            if task.key == key:
                return task
        raise ValueError(f"unknown task {key!r}; expected one of "
                         + ", ".join(t.key for t in cls))


@dataclass(frozen=True)
class ManifestRecord:
    participant_id: str
    finger: int
    label: Label
    path: str
    quality: int | None = None


@dataclass(frozen=True)
class Manifest:
    """Validated list of image records.

    Invariants: (participant_id, finger) pairs are unique, fingers lie in
    1..10, and every record of one participant carries the same label.
    """

    records: tuple[ManifestRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen: dict[tuple[str, int], int] = {}
        labels: dict[str, Label] = {}
        for i, rec in enumerate(self.records):
            if not 1 <= rec.finger <= 10:
                raise ManifestError(
                    f"record {i}: finger {rec.finger} out of range 1..10 "
                    f"(participant {rec.participant_id})"
                )
            key = (rec.participant_id, rec.finger)
            if key in seen:
                raise ManifestError(
                    f"duplicate (participant, finger) = ({rec.participant_id}, {rec.finger})"
                )
            seen[key] = i
            prev = labels.setdefault(rec.participant_id, rec.label)
            if prev is not rec.label:
                raise ManifestError(
                    f"participant {rec.participant_id} labeled both {prev} and {rec.label}"
                )
            if rec.quality is not None and not 0 <= rec.quality <= 100:
                raise ManifestError(
                    f"record {i}: quality {rec.quality} out of range 0..100"
                )

    def __len__(self) -> int:
        return len(self.records)

    def participants(self) -> dict[str, Label]:
        """Participant id -> label, in first-appearance order."""
        out: dict[str, Label] = {}
        for rec in self.records:
            out.setdefault(rec.participant_id, rec.label)
        return out

    def subset(self, indices) -> "Manifest":
        return Manifest(tuple(self.records[i] for i in indices))


_HEADER = ["participant_id", "finger", "label", "path"]


def load_manifest(path: str | Path) -> Manifest:
    """Read and validate a manifest CSV.

    Expected header: participant_id,finger,label,path[,quality].  Errors
    carry the 1-based line number of the offending row.
    """
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file (missing header)") from None
        has_quality = header == _HEADER + ["quality"]
        if not has_quality and header != _HEADER:
            raise ManifestError(
                f"{path}: line 1: bad header {header!r}; expected "
                f"{','.join(_HEADER)}[,quality]"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            expected = 5 if has_quality else 4
            if len(row) != expected:
                raise ManifestError(f"{path}: line {lineno}: expected {expected} fields, got {len(row)}")
            pid, finger_s, label_s, img_path = row[:4]
            try:
                finger = int(finger_s)
            except ValueError:
                raise ManifestError(f"{path}: line {lineno}: finger {finger_s!r} is not an integer") from None
            try:
                label = Label(label_s)
            except ValueError:
                raise ManifestError(
                    f"{path}: line {lineno}: unknown label {label_s!r}; expected "
                    + ", ".join(l.value for l in Label)
                ) from None
            quality = None
            if has_quality and row[4] != "":
                try:
                    quality = int(row[4])
                except ValueError:
                    raise ManifestError(f"{path}: line {lineno}: quality {row[4]!r} is not an integer") from None
            records.append(ManifestRecord(pid, finger, label, img_path, quality))
    try:
        return Manifest(tuple(records))
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest CSV (quality column included iff any record has one)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    has_quality = any(rec.quality is not None for rec in manifest.records)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER + (["quality"] if has_quality else []))
        for rec in manifest.records:
            row = [rec.participant_id, str(rec.finger), rec.label.value, rec.path]
            if has_quality:
                row.append("" if rec.quality is None else str(rec.quality))
            writer.writerow(row)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SplitPlan:
    """Participant-level train/test assignment plus cross-validation folds."""

    task: Task
    seed: int
    test_participants: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]

    @property
    def train_participants(self) -> tuple[str, ...]:
        return tuple(p for fold in self.folds for p in fold)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "task": self.task.key,
            "seed": self.seed,
            "test_participants": list(self.test_participants),
            "folds": [list(f) for f in self.folds],
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "SplitPlan":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            task=Task.from_key(payload["task"]),
            seed=int(payload["seed"]),
            test_participants=tuple(payload["test_participants"]),
            folds=tuple(tuple(f) for f in payload["folds"]),
        )


def make_split(
    manifest: Manifest,
    task: Task,
    test_fraction: float = 0.2,
    n_folds: int = 5,
    seed: int = 0,
) -> SplitPlan:
    """Stratified participant-level split into test set and training folds.

    Per class: participants are shuffled by a PCG64 generator seeded from
    ``seed``, round(N * test_fraction) go to the test set (round-half-up),
    and the rest are dealt onto the folds by a single round-robin pointer
    shared across classes, so per-class fold sizes differ by at most one
    and total fold sizes stay balanced.
    """
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if n_folds < 1:
        raise SplitError(f"n_folds must be >= 1, got {n_folds}")

    by_class: dict[Label, list[str]] = {c: [] for c in task.classes}
    for pid, label in manifest.participants().items():
        if label in by_class:
            by_class[label].append(pid)

    rng = np.random.Generator(np.random.PCG64(seed))
    test: list[str] = []
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    pointer = 0
    for label in task.classes:
        # sort first so the plan depends on manifest content, not row order
        pids = sorted(by_class[label])
        n = len(pids)
        if n < n_folds + 1:
            raise SplitError(
                f"class {label} has {n} participants; need at least {n_folds + 1} "
                f"for {n_folds} folds plus a test split"
            )
        order = rng.permutation(n)
        shuffled = [pids[i] for i in order]
        n_test = _round_half_up(n * test_fraction)
        test.extend(shuffled[:n_test])
        for pid in shuffled[n_test:]:
            folds[pointer].append(pid)
            pointer = (pointer + 1) % n_folds
    return SplitPlan(
        task=task,
        seed=seed,
        test_participants=tuple(test),
        folds=tuple(tuple(f) for f in folds),
    )


@dataclass(frozen=True)
class ExpandedSplit:
    """Image-level record indices for each partition of a SplitPlan."""

    test: tuple[int, ...]
    folds: tuple[tuple[int, ...], ...]

    def train_for_fold(self, k: int) -> tuple[int, ...]:
        """Training indices for the model that validates on fold k."""
        return tuple(i for j, fold in enumerate(self.folds) if j != k for i in fold)


def expand_split(plan: SplitPlan, manifest: Manifest) -> ExpandedSplit:
    """Map a participant-level plan to image-level manifest indices."""
    known = set(manifest.participants())
    for pid in (*plan.test_participants, *plan.train_participants):
        if pid not in known:
            raise SplitError(f"plan references unknown participant {pid!r}")
    test_set = set(plan.test_participants)
    fold_of = {pid: k for k, fold in enumerate(plan.folds) for pid in fold}
    test: list[int] = []
    folds: list[list[int]] = [[] for _ in plan.folds]
    for i, rec in enumerate(manifest.records):
        if rec.participant_id in test_set:
            test.append(i)
        elif rec.participant_id in fold_of:
            folds[fold_of[rec.participant_id]].append(i)
    return ExpandedSplit(test=tuple(test), folds=tuple(tuple(f) for f in folds))


def class_weights(manifest: Manifest, task: Task) -> dict[Label, float]:
    """Inverse-frequency class weights over the given (training) images.

    weight_c = N_total / (2 * N_c); balanced classes get weight 1.0.
    """
    counts = {c: 0 for c in task.classes}
    for rec in manifest.records:
        if rec.label in counts:
            counts[rec.label] += 1
    for label, n in counts.items():
        if n == 0:
            raise SplitError(f"class {label} has no images")
    total = sum(counts.values())
    return {label: total / (2.0 * n) for label, n in counts.items()}
