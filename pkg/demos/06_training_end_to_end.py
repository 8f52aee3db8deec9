"""The full workflow: pretrain a classifier, transfer it, segment, evaluate.

This is the library-API version of what the ``microseg`` command line does —
classifier pretraining on texture families, warm-starting a hybrid
segmentation model from the classifier encoder, the two-phase fine-tuning
protocol with its single learning-rate drop, and tiled prediction on an
image larger than the model input.

The segmentation stage runs the one-shot protocol: a single labeled image.
Everything is synthetic and tiny, so the whole script finishes in about ten
seconds on a laptop CPU.

Run:  python3 demos/06_training_end_to_end.py
"""

import os
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir,
                                "tests"))
from helpers import (  # noqa: E402  (corpus builders shared with the tests)
    image_from_mask,
    synthetic_segmentation_target,
    write_classification_corpus,
    write_segmentation_corpus,
)

from microseg import models as M  # noqa: E402
from microseg.checkpoint import load_checkpoint  # noqa: E402
from microseg.train import (  # noqa: E402
    PretrainSchedule,
    SegSchedule,
    evaluate,
    finetune_segmentation,
    predict_mask,
    pretrain_classifier,
)

with tempfile.TemporaryDirectory() as tmp:
    cls_dir = os.path.join(tmp, "textures")
    seg_dir = os.path.join(tmp, "segmentation")
    os.makedirs(cls_dir)
    os.makedirs(seg_dir)

    # -- 1. pretrain a tiny classifier on eight texture families ----------------------
    cls_manifest = write_classification_corpus(
        cls_dir, num_classes=8, train_per_class=3, val_per_class=1,
        size=32, seed=0)
    cls_cfg = M.ModelConfig(variant="classifier", input_size=32, patch=4,
                            embed_dim=16, depths=(2, 2), heads=(2, 2),
                            window=4, num_classes=8)
    sched = PretrainSchedule(epochs=6, warmup_epochs=1, batch=8,
                             base_lr=1e-3, weight_decay=0.01, patience=6)
    record, classifier_ckpt = pretrain_classifier(
        cls_cfg, cls_manifest, sched, seed=0,
        out_dir=os.path.join(tmp, "pretrain"), root=cls_dir)
    print("pretraining val top-1 per epoch:",
          [round(v, 2) for v in record.val_metric])
    print("learning-rate trace (cosine after 1 warmup epoch):",
          [f"{lr:.1e}" for lr in record.lr])

    # -- 2. one-shot segmentation, warm-started from that encoder ---------------------
    # The classifier saw 32x32 inputs, the segmentation model runs at 64x64;
    # windowed-attention weights are resolution-independent, so the encoder
    # tensors transfer by name regardless.
    seg_manifest = write_segmentation_corpus(
        seg_dir, num_train=1, num_val=1, size=64, num_classes=3, seed=0)
    seg_cfg = M.ModelConfig(variant="cs_unet", input_size=64, patch=4,
                            embed_dim=16, depths=(2, 2), heads=(2, 2),
                            window=4, num_classes=3, cnn_channels=(16, 32))
    seg_sched = SegSchedule(phase1_lr=4e-3, phase2_lr=4e-4,
                            patience_per_phase=40, batch=1,
                            max_epochs_per_phase=160)
    record, best_ckpt = finetune_segmentation(
        seg_cfg, seg_manifest, seg_sched, seed=0,
        out_dir=os.path.join(tmp, "finetune"),
        init=classifier_ckpt, root=seg_dir)
    print("\nwarm start loaded %d encoder tensors" %
          record.load_report["loaded"])
    boundary = record.phase_boundary
    print("phase 1: %d epochs at lr %.0e; phase 2: %d epochs at %.0e"
          % (boundary, record.lr[0],
             len(record.lr) - boundary, record.lr[-1]))
    trace = [round(v, 2) for v in record.val_metric[::20]]
    print("validation mean IoU every 20 epochs:", trace)
    print("best IoU %.3f at epoch %d (phase %d)"
          % (max(record.val_metric), record.best_epoch,
             1 if record.best_epoch < boundary else 2))

    # -- 3. reload the best weights and evaluate ---------------------------------------
    model = M.build_model(seg_cfg, np.random.default_rng(0))
    for name, array in load_checkpoint(best_ckpt).items():
        model.params[name].data[...] = array
    report = evaluate(model, seg_manifest.for_split("val"), 3, root=seg_dir)
    print("\nevaluate: mean IoU %.3f ± %.3f over %d image(s)"
          % (report.mean, report.std, len(report.per_image)))

    # -- 4. predict on an image larger than the model input ----------------------------
    big_mask = synthetic_segmentation_target(96, 3)
    big_image = image_from_mask(big_mask, np.random.default_rng(9))
    stitched = predict_mask(model, big_image)
    print("\n96x96 input through the 64x64 model -> stitched mask",
          stitched.shape, "with classes",
          sorted(np.unique(stitched).tolist()))
