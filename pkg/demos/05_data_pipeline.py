"""From huge micrographs to training batches.

Microscopy images are far larger than any model input, rarely labeled, and
few.  The pipeline answers with three tools: tiling (cut big images into
model-sized squares), paired augmentation (same geometry for image and mask,
photometrics for the image only), and k-means pseudo-labeling (cluster
encoder features when no labels exist at all).

Run:  python3 demos/05_data_pipeline.py
"""

import os
import tempfile

import numpy as np

from microseg import models as M
from microseg.data import (
    AugmentSpec,
    DatasetManifest,
    ManifestRecord,
    TilingSpec,
    apply_augment,
    draw_augment,
    kmeans,
    load_manifest,
    pseudo_label,
    save_manifest,
    tile_image,
)

rng = np.random.default_rng(0)

# -- 1. tiling: "none" keeps whole tiles, "cover" reaches every pixel -------------------

big = rng.integers(0, 256, (700, 700)).astype(np.uint8)
for policy in ("none", "cover"):
    tiles = tile_image(big, TilingSpec(tile=512, policy=policy))
    print(f"700x700, tile 512, policy {policy!r}: {len(tiles)} tiles at "
          f"{sorted({origin for _, origin in tiles})}")

# -- 2. augmentation: one parameter draw, two consistent applications --------------------

image = ((3 * np.arange(64)[:, None] + 7 * np.arange(64)[None, :]) % 251
         ).astype(np.uint8)
mask = (image > 128).astype(np.uint8)
spec = AugmentSpec(crop_size=48, p_hflip=1.0, p_rot90=1.0,
                   p_contrast=1.0, contrast_range=(0.7, 1.3),
                   p_noise=1.0, noise_std=0.05)
params = draw_augment(spec, image.shape, np.random.default_rng(4))
aug_image, aug_mask = apply_augment(image, mask, params)
print("\ndrawn parameters:", {k: v for k, v in params.items()
                              if v not in (None, False, 0)})
print("image", image.shape, "->", aug_image.shape,
      "; mask follows the same geometry:", aug_mask.shape)
# the mask is untouched by contrast/noise: it still holds only {0, 1}
print("mask stays categorical:", sorted(np.unique(aug_mask).tolist()))

# -- 3. manifests: JSON-lines records binding images to labels or masks ------------------

records = [
    ManifestRecord("img/a.pgm", "train", label=0),
    ManifestRecord("img/b.pgm", "train", mask_path="img/b_mask.pgm"),
    ManifestRecord("img/c.pgm", "val", label=1),
]
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "manifest.jsonl")
    save_manifest(DatasetManifest(records), path)
    print("\nmanifest on disk:")
    with open(path) as fh:
        for line in fh:
            print("  " + line.rstrip())
    print("round-trips:", load_manifest(path).records == records)

# -- 4. k-means recovers structure without any labels ------------------------------------

blobs = np.concatenate([
    np.array([0.0, 0.0]) + 0.4 * rng.standard_normal((30, 2)),
    np.array([6.0, 0.0]) + 0.4 * rng.standard_normal((30, 2)),
    np.array([3.0, 5.0]) + 0.4 * rng.standard_normal((30, 2)),
])
assign, centroids, inertia = kmeans(blobs, 3, seed=0)
print("\nk-means on three blobs: cluster sizes",
      np.bincount(assign).tolist(), " inertia %.2f" % inertia)
print("centroids:", np.round(centroids, 2).tolist())

# -- 5. pseudo-labels: encoder features + k-means -> a classification manifest -----------

families = []
paths = []
for fam in range(3):
    base = np.random.default_rng(100 + fam).integers(
        0, 256, (32, 32)).astype(np.uint8)
    for i in range(4):
        copy = base.copy()
        flip = np.random.default_rng(10 * fam + i).integers(0, 32, (6, 2))
        copy[flip[:, 0], flip[:, 1]] = 255 - copy[flip[:, 0], flip[:, 1]]
        families.append(copy)
        paths.append(f"fam{fam}_{i}.pgm")

encoder = M.build_model(
    M.ModelConfig(variant="classifier", input_size=32, patch=4, embed_dim=8,
                  depths=(2, 2), heads=(1, 2), window=4, num_classes=3),
    np.random.default_rng(5))
manifest = pseudo_label(families, encoder, k=3, seed=3, paths=paths)
print("\npseudo-labels from a randomly initialized encoder:")
for record in manifest.records:
    print(f"  {record.image_path:<12} -> cluster {record.label}")
