"""Segmentation losses and metrics on a worked example.

Microscopy masks are imbalanced — background dominates.  The training loss
therefore combines inverse-frequency-weighted cross entropy (70%) with Dice
(30%), and quality is reported as per-class intersection-over-union.

Run:  python3 demos/04_losses_metrics.py
"""

import numpy as np

from microseg import losses as L
from microseg.tensor import Tensor, backward

rng = np.random.default_rng(0)

# -- 1. an imbalanced toy mask ----------------------------------------------------------

target = np.zeros((1, 16, 16), dtype=np.int64)
target[0, 2:6, 2:6] = 1          # 16 pixels of class 1
target[0, 10:12, 10:12] = 2      # 4 pixels of class 2
hist = np.bincount(target.ravel(), minlength=3)
weights = L.class_weights(hist)
print("pixel histogram:", hist.tolist())
print("inverse-frequency weights:", np.round(weights, 3).tolist(),
      " (rare classes weigh more)")

# -- 2. the combined loss and its parts -------------------------------------------------

logits = Tensor(rng.standard_normal((1, 3, 16, 16)), requires_grad=True)
bce = L.balanced_cross_entropy(logits, target)
dice = L.dice_loss(logits, target)
combined = L.combined_loss(logits, target)
print("\nbalanced CE %.4f   Dice %.4f   0.7*CE + 0.3*Dice = %.4f == %.4f"
      % (float(bce.data), float(dice.data),
         0.7 * float(bce.data) + 0.3 * float(dice.data),
         float(combined.data)))

grads = backward(combined, {"logits": logits})
print("loss is differentiable: |dL/dlogits| = %.4f"
      % np.abs(grads["logits"]).sum())

# -- 3. IoU: the accuracy currency of segmentation --------------------------------------

pred = target[0].copy()
pred[3, 2:6] = 0                 # clip one row off the class-1 square
report = L.iou(pred, target[0], 3)
print("\nafter erasing one row of class 1:")
for c, v in enumerate(report.per_class):
    print(f"  class {c}: IoU {'—' if v is None else round(v, 4)}")
print(f"  mean IoU {report.mean:.4f}")

# a class absent from both maps is excluded, not counted as zero
partial = L.iou(np.zeros((4, 4), int), np.zeros((4, 4), int), 3)
print("all-background 4x4, 3 classes:",
      [None if v is None else float(v) for v in partial.per_class],
      "-> mean", partial.mean)

# -- 4. top-k accuracy for the classification stage --------------------------------------

scores = np.array([[9.0, 1.0, 0.0, 0.0],
                   [1.0, 2.0, 9.0, 0.0],
                   [0.0, 9.0, 2.0, 1.0]])
labels = np.array([0, 1, 1])
print("\ntop-1 accuracy %.3f   top-2 accuracy %.3f"
      % (L.topk_accuracy(scores, labels, 1),
         L.topk_accuracy(scores, labels, 2)))
