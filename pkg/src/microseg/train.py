"""Training loops, schedules, evaluation, and whole-image prediction.

Two published protocols are implemented: classifier pre-training (AdamW,
cosine-decay learning rate with 5 warmup epochs, early stopping) and two-phase
segmentation fine-tuning (Adam at 2e-4 until the validation mean IoU stalls
for 30 epochs, restore the best weights, then continue at 1e-5 until it
stalls again).  Every loop is deterministic given its seed when BLAS runs
single-threaded.

Rates of exactly zero are accepted by both schedules so a frozen-parameter
run can be used as a diagnostic.
"""

from __future__ import annotations

import dataclasses
import math
import os
from typing import Optional

import numpy as np

from . import data as D
from . import losses as L
from . import models as M
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import Adam, AdamW
from .tensor import Tensor, backward, no_grad
from .tensor import log_softmax as _log_softmax

__all__ = [
    "NumericError",
    "PretrainSchedule",
    "SegSchedule",
    "RunRecord",
    "EvalReport",
    "cosine_warmup_lr",
    "early_stop",
    "pretrain_classifier",
    "finetune_segmentation",
    "evaluate",
    "predict_mask",
    "predict",
]


class NumericError(RuntimeError):
    """A loss or update became non-finite (NaN/inf) during training."""


# -- schedules ------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PretrainSchedule:
    """Classifier pre-training protocol (AdamW + cosine decay with warmup)."""

    epochs: int = 30
    warmup_epochs: int = 5
    batch: int = 128
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    patience: int = 5
    fine_tune_lr: float = 1e-5
    fine_tune_weight_decay: float = 1e-8

    def __post_init__(self):
        if not 0 < self.warmup_epochs < self.epochs:
            raise ValueError(
                f"need 0 < warmup_epochs < epochs, got {self.warmup_epochs} "
                f"vs {self.epochs}"
            )
        if self.batch < 1 or self.patience < 1:
            raise ValueError("batch and patience must be >= 1")
        for name in ("base_lr", "weight_decay", "fine_tune_lr",
                     "fine_tune_weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def fine_tuned(self):
        """The same protocol with the reduced fine-tuning rates."""
        return dataclasses.replace(
            self, base_lr=self.fine_tune_lr,
            weight_decay=self.fine_tune_weight_decay,
        )


@dataclasses.dataclass(frozen=True)
class SegSchedule:
    """Two-phase segmentation protocol (Adam, combined 0.7/0.3 loss).

    batch and max_epochs_per_phase are desk-scale knobs, not part of the
    published protocol, which leaves both unstated.
    """

    phase1_lr: float = 2e-4
    phase2_lr: float = 1e-5
    patience_per_phase: int = 30
    batch: int = 8
    max_epochs_per_phase: int = 200

    def __post_init__(self):
        if self.phase1_lr < 0 or self.phase2_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.phase2_lr > self.phase1_lr:
            raise ValueError(
                f"phase2_lr ({self.phase2_lr}) must not exceed phase1_lr "
                f"({self.phase1_lr})"
            )
        if self.patience_per_phase < 1:
            raise ValueError("patience_per_phase must be >= 1")
        if self.batch < 1 or self.max_epochs_per_phase < 1:
            raise ValueError("batch and max_epochs_per_phase must be >= 1")


@dataclasses.dataclass
class RunRecord:
    """Per-epoch trace plus convergence bookkeeping for one training run."""

    train_loss: list
    val_metric: list
    lr: list
    best_epoch: int
    best_checkpoint: str  # relative to the run directory, so records compare
    seed: int
    config: dict
    epochs_to_converge: int
    phase_boundary: Optional[int] = None  # first epoch index of phase 2
    load_report: Optional[dict] = None

    def __post_init__(self):
        if self.val_metric and not math.isclose(
            self.val_metric[self.best_epoch], max(self.val_metric)
        ):
            raise ValueError("best epoch does not hold the best val metric")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


@dataclasses.dataclass
class EvalReport:
    """Per-image mean IoU plus the aggregate mean and population std."""

    per_image: list
    mean: float
    std: float


# -- schedule arithmetic --------------------------------------------------------------


def cosine_warmup_lr(epoch, sched, min_lr=0.0):
    """Linear warmup to base_lr, then half-cosine decay toward min_lr."""
    if not 0 <= epoch < sched.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.epochs})")
    if epoch < sched.warmup_epochs:
        return sched.base_lr * (epoch + 1) / sched.warmup_epochs
    progress = (epoch - sched.warmup_epochs) / (sched.epochs
                                                - sched.warmup_epochs)
    return min_lr + 0.5 * (sched.base_lr - min_lr) * (
        1.0 + math.cos(math.pi * progress)
    )


def early_stop(history, patience, min_delta=0.0):
    """True iff the last `patience` metrics never beat the best before them."""
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    if len(history) <= patience:
        return False
    best_before = max(history[:-patience])
    return all(h <= best_before + min_delta for h in history[-patience:])


# -- shared loop machinery ------------------------------------------------------------


def _load_classification_split(manifest, split, root):
    records = manifest.for_split(split)
    images, labels = [], []
    for record in records:
        if record.label is None:
            raise ValueError(
                f"{record.image_path}: classification needs label records"
            )
        base = str(root) + "/" if root is not None else ""
        images.append(D.read_image(base + record.image_path))
        labels.append(record.label)
    return images, np.asarray(labels, dtype=np.int64)


def _load_segmentation_split(manifest, split, root):
    return [D.load_segmentation_pair(r, root=root)
            for r in manifest.for_split(split)]


def _image_batch(images, indices):
    return Tensor(np.stack([D.normalize(images[i]).data for i in indices]))


def _classification_loss(logits, labels):
    log_p = _log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(log_p * Tensor(onehot)).sum(axis=1).mean()


def _check_finite(value, context):
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss ({value}) during {context}")


def _restore(model, checkpoint_path):
    for name, array in load_checkpoint(checkpoint_path).items():
        model.params[name].data[...] = array


def _topk_val(model, images, labels, k=1):
    with no_grad():
        scores = []
        for start in range(0, len(images), 32):
            idx = range(start, min(start + 32, len(images)))
            scores.append(model.forward(_image_batch(images, idx)).data)
    return L.topk_accuracy(np.concatenate(scores), labels, k=k)


def _mean_iou_over_pairs(model, pairs, num_classes):
    values = []
    with no_grad():
        for image, mask in pairs:
            logits = model.forward(_image_batch([image], [0]))
            pred = logits.data[0].argmax(axis=0)
            values.append(L.iou(pred, mask.astype(np.int64),
                                num_classes).mean)
    return values


# -- classifier pre-training ----------------------------------------------------------

def pretrain_classifier(config, manifest, sched, seed, out_dir,
                        init=None, init_policy="encoder_only", root=None):
    """AdamW epoch loop with cosine warmup lr and top-1 early stopping.

    Returns (RunRecord, best checkpoint path).  `init` (a checkpoint path or
    name->array mapping) warm-starts matching parameters before training —
    passing the reduced-rate schedule from PretrainSchedule.fine_tuned()
    alongside it gives the published fine-tuning protocol.
    """
    if config.variant != "classifier":
        raise ValueError(f"pretraining needs a classifier config, "
                         f"got {config.variant!r}")
    train_images, train_labels = _load_classification_split(
        manifest, "train", root)
    if not train_images:
        raise ValueError("train split is empty")
    val_images, val_labels = _load_classification_split(manifest, "val", root)
    if not val_images:  # fall back to the train split for the tracked metric
        val_images, val_labels = train_images, train_labels

    rng = np.random.default_rng(seed)
    model = M.build_model(config, rng)
    load_report = None
    if init is not None:
        tensors = load_checkpoint(init) if not isinstance(init, dict) else init
        report = M.load_pretrained(model, tensors, policy=init_policy)
        if not report.loaded:
            raise ValueError("init checkpoint matches no parameter names")
        load_report = {"loaded": len(report.loaded),
                       "skipped": len(report.skipped),
                       "mismatched": len(report.mismatched)}

    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    best_path = os.path.join(out_dir, "best.ckpt")
    optimizer = AdamW(lr=sched.base_lr, weight_decay=sched.weight_decay)
    losses, metrics, lrs = [], [], []
    best_epoch = -1
    best_metric = -np.inf
    order = np.arange(len(train_images))
    for epoch in range(sched.epochs):
        lr = cosine_warmup_lr(epoch, sched)
        optimizer.lr = lr
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), sched.batch):
            idx = order[start:start + sched.batch]
            logits = model.forward(_image_batch(train_images, idx),
                                   rng=rng, training=True)
            loss = _classification_loss(logits, train_labels[idx])
            _check_finite(loss.data, f"pretrain epoch {epoch}")
            optimizer.zero_grad(model.params)
            grads = backward(loss, model.params)
            optimizer.step(model.params, grads)
            epoch_losses.append(float(loss.data))
        losses.append(float(np.mean(epoch_losses)))
        metric = _topk_val(model, val_images, val_labels, k=1)
        metrics.append(metric)
        lrs.append(lr)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            save_checkpoint(model.params, best_path)
        if early_stop(metrics, sched.patience):
            break
    record = RunRecord(
        train_loss=losses, val_metric=metrics, lr=lrs,
        best_epoch=best_epoch, best_checkpoint="best.ckpt", seed=seed,
        config=dataclasses.asdict(config), epochs_to_converge=best_epoch + 1,
        load_report=load_report,
    )
    return record, best_path


# -- segmentation fine-tuning ---------------------------------------------------------


def _seg_epoch(model, pairs, optimizer, sched, rng, context):
    order = np.arange(len(pairs))
    rng.shuffle(order)
    epoch_losses = []
    for start in range(0, len(order), sched.batch):
        idx = order[start:start + sched.batch]
        images = _image_batch([pairs[i][0] for i in idx], range(len(idx)))
        masks = np.stack([pairs[i][1] for i in idx]).astype(np.int64)
        logits = model.forward(images, rng=rng, training=True)
        loss = L.combined_loss(logits, masks)
        _check_finite(loss.data, context)
        optimizer.zero_grad(model.params)
        grads = backward(loss, model.params)
        optimizer.step(model.params, grads)
        epoch_losses.append(float(loss.data))
    return float(np.mean(epoch_losses))


def finetune_segmentation(config, manifest, sched, seed, out_dir,
                          init=None, init_policy="encoder_only", root=None):
    """Two-phase Adam protocol tracking validation mean IoU.

    Phase 1 runs at phase1_lr until the val metric shows no strict
    improvement for patience_per_phase epochs; the best weights are restored
    and phase 2 continues at phase2_lr (fresh optimizer state) until it
    stalls again.  Returns (RunRecord, best checkpoint path).
    """
    if config.variant not in ("cs_unet", "swin_unet", "unet"):
        raise ValueError(f"fine-tuning needs a segmentation config, "
                         f"got {config.variant!r}")
    train_pairs = _load_segmentation_split(manifest, "train", root)
    if not train_pairs:
        raise ValueError("train split is empty")
    val_pairs = _load_segmentation_split(manifest, "val", root) or train_pairs

    rng = np.random.default_rng(seed)
    model = M.build_model(config, rng)
    load_report = None
    if init is not None:
        tensors = load_checkpoint(init) if not isinstance(init, dict) else init
        report = M.load_pretrained(model, tensors, policy=init_policy)
        if not report.loaded:
            raise ValueError("init checkpoint matches no parameter names")
        load_report = {"loaded": len(report.loaded),
                       "skipped": len(report.skipped),
                       "mismatched": len(report.mismatched)}

    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    best_path = os.path.join(out_dir, "best.ckpt")
    k = config.num_classes
    losses, metrics, lrs = [], [], []
    best_epoch = -1
    best_metric = -np.inf

    def run_phase(lr, label):
        nonlocal best_epoch, best_metric
        optimizer = Adam(lr=lr)
        phase_metrics = []
        for _ in range(sched.max_epochs_per_phase):
            losses.append(_seg_epoch(model, train_pairs, optimizer, sched,
                                     rng, label))
            metric = float(np.mean(_mean_iou_over_pairs(model, val_pairs, k)))
            metrics.append(metric)
            phase_metrics.append(metric)
            lrs.append(lr)
            if metric > best_metric:
                best_metric = metric
                best_epoch = len(metrics) - 1
                save_checkpoint(model.params, best_path)
            if early_stop(phase_metrics, sched.patience_per_phase):
                break

    run_phase(sched.phase1_lr, "fine-tune phase 1")
    if best_epoch >= 0:
        _restore(model, best_path)
    phase_boundary = len(metrics)
    run_phase(sched.phase2_lr, "fine-tune phase 2")

    record = RunRecord(
        train_loss=losses, val_metric=metrics, lr=lrs,
        best_epoch=best_epoch, best_checkpoint="best.ckpt", seed=seed,
        config=dataclasses.asdict(config), epochs_to_converge=best_epoch + 1,
        phase_boundary=phase_boundary, load_report=load_report,
    )
    return record, best_path


# -- evaluation and prediction --------------------------------------------------------


def evaluate(model, records, num_classes, root=None):
    """Per-image mean IoU over segmentation records; population std."""
    if not records:
        raise ValueError("cannot evaluate an empty split")
    pairs = [D.load_segmentation_pair(r, root=root) for r in records]
    per_image = _mean_iou_over_pairs(model, pairs, num_classes)
    values = np.asarray(per_image, dtype=np.float64)
    return EvalReport(per_image=[float(v) for v in per_image],
                      mean=float(values.mean()),
                      std=float(values.std()))  # population: divide by N


def predict_mask(model, image):
    """Argmax class-index mask for one image, tiling oversized inputs.

    Images larger than the model input are cover-tiled and stitched with
    center-crop priority: each output pixel takes its value from the tile
    whose center it is nearest.
    """
    if model.config.num_classes > 256:
        raise ValueError("8-bit masks support at most 256 classes")
    image = np.asarray(image)
    size = model.config.input_size
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        tiles = [(image, (0, 0))]
    else:
        tiles = D.tile_image(image, D.TilingSpec(tile=size, policy="cover"))

    out = np.zeros((h, w), dtype=np.uint8)
    best_d2 = np.full((h, w), np.inf)
    rows = np.arange(size, dtype=np.float64)
    center = (size - 1) / 2.0
    local_d2 = ((rows - center) ** 2)[:, None] + ((rows - center) ** 2)[None]
    with no_grad():
        for tile, (r, c) in tiles:
            logits = model.forward(_image_batch([tile], [0]))
            mask = logits.data[0].argmax(axis=0).astype(np.uint8)
            window = best_d2[r:r + size, c:c + size]
            take = local_d2 < window  # strict: earlier tiles win ties
            out[r:r + size, c:c + size][take] = mask[take]
            window[take] = local_d2[take]
    return out


def predict(model, image_path, out_path, png_path=None):
    """Read an image, write its predicted mask as 8-bit PGM (optional PNG)."""
    image = D.read_image(image_path)
    mask = predict_mask(model, image)
    D.write_mask(mask, out_path)
    if png_path is not None:
        D.write_mask(mask, png_path)
    return mask
