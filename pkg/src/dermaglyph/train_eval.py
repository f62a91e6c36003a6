"""Training, cross-validated ensembling, and evaluation metrics.

Five models are trained, one per cross-validation fold (training on the
other four folds), and ensembled at prediction time by averaging their
output logits in fold order.  Metrics are computed at the image level
over all held-out test images: confusion-matrix scores at a fixed 0.5
probability threshold, plus a threshold-free ROC curve with trapezoidal
AUC.  Equal mean logits break toward the lower class index.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import imgio
from .dataset import ExpandedSplit, Label, Manifest, SplitPlan, Task, class_weights, expand_split
from .tensor import AdamState, Tensor, adam_step, cross_entropy, zero_grad
from .vit import (
    CheckpointError,
    ModelParams,
    ViTConfig,
    forward_batch,
    init_params,
    load_checkpoint,
    preprocess_image,
    save_checkpoint,
)

__all__ = [
    "TrainConfig",
    "EvalReport",
    "RocCurve",
    "train_fold",
    "train_ensemble",
    "EnsembleModel",
    "compute_metrics",
    "roc_auc",
    "load_inputs",
    "evaluate_ensemble",
    "write_roc_csv",
    "save_roc_svg",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    task: Task
    epochs: int = 10
    lr: float = 3e-4
    batch_size: int = 32
    seed: int = 0
    use_class_weights: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def load_inputs(
    manifest: Manifest, indices, cfg: ViTConfig, task: Task
) -> tuple[np.ndarray, np.ndarray]:
    """Load and preprocess the indexed records: (N, S, S) inputs, 0/1 labels."""
    images = np.empty((len(indices), cfg.image_size, cfg.image_size), dtype=np.float32)
    labels = np.empty(len(indices), dtype=np.int64)
    for row, i in enumerate(indices):
        rec = manifest.records[i]
        images[row] = preprocess_image(imgio.load_png(rec.path), cfg)
        labels[row] = 1 if rec.label is task.positive else 0
    return images, labels


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 3, epoch])))


def train_fold(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    cfg: ViTConfig,
    train_cfg: TrainConfig,
    fold_seed: int,
    class_weight: np.ndarray | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Train one model for the configured epochs; returns final params + log.

    No early stopping and no model selection: the final-epoch parameters
    are returned.  Per-epoch entries log the weight-averaged training loss
    and unweighted validation loss/accuracy.
    """
    if len(train_images) == 0 or len(val_images) == 0:
        raise ValueError("empty train or validation partition")
    params = init_params(cfg, fold_seed)
    plist = params.param_list()
    state = AdamState.for_params(plist, lr=train_cfg.lr)
    n = len(train_images)
    weights_per_image = (
        class_weight[train_labels] if class_weight is not None else np.ones(n, dtype=np.float32)
    )

    epoch_log: list[dict] = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = _epoch_rng(fold_seed, epoch).permutation(n)
        loss_sum = 0.0
        weight_sum = 0.0
        for b0 in range(0, n, train_cfg.batch_size):
            batch = order[b0 : b0 + train_cfg.batch_size]
            zero_grad(plist)
            logits, _ = forward_batch(params, cfg, train_images[batch])
            loss = cross_entropy(logits, train_labels[batch], class_weight)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {b0 // train_cfg.batch_size}"
                )
            loss.backward()
            adam_step(plist, state)
            w_batch = float(weights_per_image[batch].sum())
            loss_sum += loss.item() * w_batch
            weight_sum += w_batch
        val_loss, val_acc = _validate(params, cfg, val_images, val_labels, train_cfg.batch_size)
        entry = {
            "epoch": epoch,
            "train_loss": loss_sum / weight_sum,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
        }
        epoch_log.append(entry)
        log.info(
            "epoch %d: train_loss=%.4f val_loss=%.4f val_acc=%.3f",
            epoch, entry["train_loss"], val_loss, val_acc,
        )
    return params, epoch_log


def _validate(params, cfg, images, labels, batch_size) -> tuple[float, float]:
    loss_sum = 0.0
    correct = 0
    for b0 in range(0, len(images), batch_size):
        sl = slice(b0, b0 + batch_size)
        logits, _ = forward_batch(params, cfg, images[sl])
        loss = cross_entropy(Tensor(logits.data), labels[sl])
        loss_sum += loss.item() * len(images[sl])
        correct += int((logits.data.argmax(axis=1) == labels[sl]).sum())
    return loss_sum / len(images), correct / len(images)


def train_ensemble(
    manifest: Manifest,
    plan: SplitPlan,
    cfg: ViTConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
) -> list[Path]:
    """Train one model per fold (validating on it) and save checkpoints.

    Model i trains on the folds other than i with seed ``seed + i`` and is
    saved as fold{i}.ckpt with a fold{i}_log.json epoch log.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    expanded = expand_split(plan, manifest)
    # load each training image once; folds share them
    all_train_idx = sorted(i for fold in expanded.folds for i in fold)
    images, labels = load_inputs(manifest, all_train_idx, cfg, plan.task)
    row_of = {idx: row for row, idx in enumerate(all_train_idx)}

    paths: list[Path] = []
    for k in range(len(expanded.folds)):
        train_rows = np.array([row_of[i] for i in expanded.train_for_fold(k)], dtype=np.intp)
        val_rows = np.array([row_of[i] for i in expanded.folds[k]], dtype=np.intp)
        weight = None
        if train_cfg.use_class_weights:
            sub = manifest.subset([all_train_idx[r] for r in train_rows])
            wmap = class_weights(sub, plan.task)
            weight = np.array(
                [wmap[plan.task.negative], wmap[plan.task.positive]], dtype=np.float32
            )
        fold_seed = train_cfg.seed + k
        log.info("training fold %d (seed %d): %d train / %d val images",
                 k, fold_seed, len(train_rows), len(val_rows))
        params, epoch_log = train_fold(
            images[train_rows], labels[train_rows],
            images[val_rows], labels[val_rows],
            cfg, train_cfg, fold_seed, weight,
        )
        ckpt = out_dir / f"fold{k}.ckpt"
        save_checkpoint(params, cfg, ckpt, task=plan.task, train_seed=fold_seed, fold=k)
        with open(out_dir / f"fold{k}_log.json", "w") as fh:
            json.dump({"fold": k, "seed": fold_seed, "epochs": epoch_log}, fh, indent=2)
            fh.write("\n")
        paths.append(ckpt)
    return paths


class EnsembleModel:
    """Fixed-order collection of fold models sharing one config and task."""

    def __init__(self, members: list[tuple[ModelParams, ViTConfig, dict]]):
        if not members:
            raise CheckpointError("ensemble needs at least one checkpoint")
        cfg0 = members[0][1]
        task0 = members[0][2].get("task")
        for _, cfg, meta in members[1:]:
            if cfg != cfg0:
                raise CheckpointError(
                    f"checkpoint config mismatch: {cfg} vs {cfg0}"
                )
            if meta.get("task") != task0:
                raise CheckpointError(
                    f"checkpoint task mismatch: {meta.get('task')!r} vs {task0!r}"
                )
        self.members = members
        self.config = cfg0
        self.task_key = task0

    @classmethod
    def from_paths(cls, paths) -> "EnsembleModel":
        return cls([load_checkpoint(p) for p in paths])

    @classmethod
    def from_dir(cls, run_dir) -> "EnsembleModel":
        paths = sorted(Path(run_dir).glob("fold*.ckpt"))
        if not paths:
            raise CheckpointError(f"no fold*.ckpt files in {run_dir}")
        return cls.from_paths(paths)

    def mean_logits(self, images: np.ndarray) -> np.ndarray:
        """Arithmetic mean of member logits, summed in member order."""
        total = np.zeros((images.shape[0], self.config.n_classes), dtype=np.float64)
        for params, cfg, _ in self.members:
            logits, _ = forward_batch(params, cfg, images)
            total += logits.data.astype(np.float64)
        return total / len(self.members)

    def predict_batch(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(mean logits, softmax probabilities, predicted class indices)."""
        mean = self.mean_logits(images)
        z = mean - mean.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        preds = mean.argmax(axis=1)  # ties resolve to the lower index
        return mean, probs, preds

    def predict(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        mean, probs, preds = self.predict_batch(image[None])
        return mean[0], probs[0], int(preds[0])


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_images: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "EvalReport":
        with open(path) as fh:
            return cls(**json.load(fh))


def compute_metrics(scores: np.ndarray, labels: np.ndarray) -> EvalReport:
    """Confusion metrics at probability threshold 0.5, plus trapezoidal AUC.

    A predicted positive requires score > 0.5, matching the ensemble's
    argmax rule where an exact tie resolves to the negative class.
    Undefined precision/recall (empty denominator) is reported as 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("empty input")
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    preds = scores > 0.5
    pos = labels == 1
    tp = int(np.sum(preds & pos))
    fp = int(np.sum(preds & ~pos))
    fn = int(np.sum(~preds & pos))
    tn = int(np.sum(~preds & ~pos))
    n = len(labels)
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        log.warning("no predicted positives; precision reported as 0")
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        log.warning("no positive labels; recall reported as 0")
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(
        accuracy=(tp + tn) / n,
        precision=precision,
        recall=recall,
        f1=f1,
        auc=roc_auc(scores, labels).auc,
        tp=tp, fp=fp, tn=tn, fn=fn,
        n_images=n,
    )


@dataclass(frozen=True)
class RocCurve:
    """ROC points from (0,0) to (1,1) at descending score thresholds."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def __post_init__(self):
        if not (self.fpr[0] == 0.0 and self.tpr[0] == 0.0):
            raise ValueError("ROC curve must start at (0, 0)")
        if not (self.fpr[-1] == 1.0 and self.tpr[-1] == 1.0):
            raise ValueError("ROC curve must end at (1, 1)")
        if np.any(np.diff(self.fpr) < 0) or np.any(np.diff(self.tpr) < 0):
            raise ValueError("ROC curve must be monotone")


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    """ROC curve over thresholds at the distinct scores, descending.

    Tied scores collapse into a single threshold step, which makes the
    trapezoidal area equal to the pairwise statistic
    P(score+ > score-) + 0.5 P(score+ = score-).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: both classes must be present")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = (labels[order] == 1).astype(np.int64)

    # group indices where the score changes; each group end is a threshold
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    group_ends = np.concatenate([distinct, [len(scores) - 1]])
    cum_tp = np.cumsum(sorted_pos)[group_ends]
    cum_fp = (group_ends + 1) - cum_tp

    tpr = np.concatenate([[0.0], cum_tp / n_pos])
    fpr = np.concatenate([[0.0], cum_fp / n_neg])
    thresholds = np.concatenate([[np.inf], sorted_scores[group_ends]])
    auc = float(np.trapz(tpr, fpr))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def evaluate_ensemble(
    ensemble: EnsembleModel, manifest: Manifest, plan: SplitPlan, batch_size: int = 32
) -> tuple[EvalReport, RocCurve, np.ndarray, np.ndarray]:
    """Score every held-out test image; returns (report, roc, scores, labels)."""
    if ensemble.task_key is not None and ensemble.task_key != plan.task.key:
        raise CheckpointError(
            f"checkpoints trained for task {ensemble.task_key!r}, plan is {plan.task.key!r}"
        )
    expanded = expand_split(plan, manifest)
    if not expanded.test:
        raise ValueError("plan has no test images in this manifest")
    images, labels = load_inputs(manifest, expanded.test, ensemble.config, plan.task)
    scores = np.empty(len(images), dtype=np.float64)
    for b0 in range(0, len(images), batch_size):
        sl = slice(b0, b0 + batch_size)
        _, probs, _ = ensemble.predict_batch(images[sl])
        scores[sl] = probs[:, 1]
    return compute_metrics(scores, labels), roc_auc(scores, labels), scores, labels


def write_roc_csv(curve: RocCurve, path: str | Path) -> None:
    """Delimited ROC points: threshold,fpr,tpr per row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def save_roc_svg(curve: RocCurve, path: str | Path, title: str = "ROC") -> None:
    """Render the ROC curve to a reproducible SVG file."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "dermaglyph"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(curve.fpr, curve.tpr, lw=2, label=f"AUC = {curve.auc:.2f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=1, color="gray")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
