"""The model zoo: one config dataclass, four variants, one parameter registry.

Every model is a flat ``name -> Tensor`` dictionary plus pure functions — no
layer objects.  That makes checkpointing trivial (serialize the dict) and
transfer learning transparent (copy whatever names match).

Run:  python3 demos/03_model_zoo.py
"""

import os
import tempfile

import numpy as np

from microseg import models as M
from microseg.checkpoint import load_checkpoint, save_checkpoint

rng = np.random.default_rng(0)


def param_count(model):
    return sum(p.data.size for p in model.params.values())


# -- 1. four variants from one config --------------------------------------------------

base = dict(input_size=64, patch=4, embed_dim=16, depths=(2, 2),
            heads=(2, 4), window=4)
image = rng.standard_normal((1, 3, 64, 64))

for variant, extra in (
    ("cs_unet", {"num_classes": 3, "cnn_channels": (16, 32)}),
    ("swin_unet", {"num_classes": 3}),
    ("unet", {"num_classes": 3, "cnn_channels": (16, 32)}),
    ("classifier", {"num_classes": 10}),
):
    cfg = M.ModelConfig(variant=variant, **base, **extra)
    model = M.build_model(cfg, np.random.default_rng(0))
    out = model.forward(image)
    print(f"{variant:<11} {param_count(model):>7,} params  "
          f"forward {image.shape} -> {tuple(out.shape)}")

# -- 2. the hybrid model fuses a CNN ladder with the transformer ladder ----------------

cfg = M.ModelConfig(variant="cs_unet", num_classes=3,
                    cnn_channels=(16, 32), **base)
model = M.build_model(cfg, np.random.default_rng(0))
groups = {}
for name, p in model.params.items():
    groups.setdefault(name.split(".")[0], [0, 0])
    groups[name.split(".")[0]][0] += 1
    groups[name.split(".")[0]][1] += p.data.size
print("\nhybrid model parameter groups:")
for g, (n, size) in sorted(groups.items()):
    print(f"  {g:<13} {n:>3} tensors {size:>7,} values")

# -- 3. checkpoints are a flat binary format; loading back is exact --------------------

with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "model.ckpt")
    save_checkpoint(model.params, path)
    print(f"\nsaved {len(model.params)} tensors "
          f"({os.path.getsize(path):,} bytes)")
    restored = load_checkpoint(path)
    exact = all(np.array_equal(restored[n], p.data)
                for n, p in model.params.items())
    print("load == save:", exact)

    # -- 4. transfer: a classifier's encoder warm-starts a segmentation net -----------
    classifier = M.build_model(
        M.ModelConfig(variant="classifier", num_classes=10, **base),
        np.random.default_rng(7))
    cls_path = os.path.join(tmp, "classifier.ckpt")
    save_checkpoint(classifier.params, cls_path)

    fresh = M.build_model(cfg, np.random.default_rng(1))
    report = M.load_pretrained(fresh, load_checkpoint(cls_path),
                               policy="encoder_only")
    print(f"\nencoder_only transfer: {len(report.loaded)} loaded, "
          f"{len(report.skipped)} skipped, "
          f"{len(report.mismatched)} shape-mismatched")
    report = M.load_pretrained(fresh, load_checkpoint(cls_path),
                               policy="encoder_and_decoder")
    print(f"encoder_and_decoder:   {len(report.loaded)} loaded "
          f"(decoder mirrored from the encoder stages)")
