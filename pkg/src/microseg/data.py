"""Dataset plumbing: image I/O, tiling, augmentation, manifests, clustering.

Images travel through the pipeline as 8-bit numpy arrays — (H, W) grayscale
or (H, W, 3) RGB — and only become float tensors at :func:`normalize`, the
boundary into model land.  Masks are 8-bit single-channel arrays whose pixel
values are class indices; every geometric transform touches them with pure
index operations so labels are never interpolated.

Manifests are JSON-lines files, one record per line, with fields
``image_path``, ``split`` and exactly one of ``label`` / ``mask_path``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import Tensor, no_grad

__all__ = [
    "SPLITS",
    "ManifestError",
    "ManifestRecord",
    "DatasetManifest",
    "TilingSpec",
    "AugmentSpec",
    "read_image",
    "write_image",
    "read_mask",
    "write_mask",
    "normalize",
    "tile_image",
    "crop_scale_band",
    "draw_augment",
    "apply_augment",
    "augment",
    "load_manifest",
    "save_manifest",
    "load_segmentation_pair",
    "extract_features",
    "kmeans",
    "pseudo_label",
]

SPLITS = ("train", "val", "test")


# -- image I/O ------------------------------------------------------------------------


def read_image(path):
    """Read an 8-bit grayscale or RGB image as (H, W) or (H, W, 3) uint8."""
    with Image.open(path) as img:
        if img.mode == "P":
            img = img.convert("RGB")
        if img.mode == "LA":
            img = img.convert("L")
        if img.mode == "RGBA":
            img = img.convert("RGB")
        if img.mode not in ("L", "RGB"):
            raise ValueError(f"unsupported image mode {img.mode!r} in {path}")
        return np.asarray(img, dtype=np.uint8)


def write_image(image, path):
    """Write uint8 (H, W) or (H, W, 3) to .pgm/.ppm/.png by extension."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    suffix = str(path).lower().rsplit(".", 1)[-1]
    if suffix == "pgm" and image.ndim != 2:
        raise ValueError("PGM holds a single channel; got shape "
                         f"{image.shape}")
    if suffix == "ppm" and (image.ndim != 3 or image.shape[2] != 3):
        raise ValueError(f"PPM holds three channels; got shape {image.shape}")
    if suffix not in ("pgm", "ppm", "png"):
        raise ValueError(f"unsupported image extension .{suffix}")
    Image.fromarray(image).save(path)


def read_mask(path):
    """Read an 8-bit single-channel class-index mask as (H, W) uint8."""
    with Image.open(path) as img:
        if img.mode != "L":
            raise ValueError(
                f"mask must be 8-bit single-channel, got mode {img.mode!r} "
                f"in {path}"
            )
        return np.asarray(img, dtype=np.uint8)


def write_mask(mask, path):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    write_image(mask.astype(np.uint8, copy=False), path)


def normalize(image, mean=0.5, std=0.5):
    """8-bit image -> float32 Tensor (3, H, W): scale to [0,1], standardize.

    Grayscale input is replicated across the three channels.
    """
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected 1 or 3 channels, got shape {image.shape}")
    x = image.astype(np.float32) / 255.0
    x = (x - np.float32(mean)) / np.float32(std)
    return Tensor(x.transpose(2, 0, 1))


# -- tiling and cropping --------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TilingSpec:
    """Square tiling with either disjoint ('none') or edge-covering overlap."""

    tile: int = 512
    policy: str = "none"

    def __post_init__(self):
        if self.tile < 1:
            raise ValueError(f"tile side must be >= 1, got {self.tile}")
        if self.policy not in ("none", "cover"):
            raise ValueError(f"policy must be 'none' or 'cover', "
                             f"got {self.policy!r}")


def _tile_origins(extent, tile, policy):
    if policy == "none":
        return [i * tile for i in range(extent // tile)]
    origins = [i * tile for i in range(math.ceil(extent / tile))]
    origins[-1] = extent - tile  # shift the last tile to end at the edge
    return origins


def tile_image(image, spec):
    """Cut (H, W[, C]) into (tile, (row, col)) pieces per the spec's policy.

    'none' keeps floor(H/t)*floor(W/t) disjoint tiles; 'cover' keeps
    ceil(H/t)*ceil(W/t) tiles with the last row/column shifted inward so the
    union of tiles is exactly the image rectangle.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    t = spec.tile
    if h < t or w < t:
        raise ValueError(f"image {h}x{w} is smaller than the tile side {t}")
    tiles = []
    for r in _tile_origins(h, t, spec.policy):
        for c in _tile_origins(w, t, spec.policy):
            tiles.append((image[r:r + t, c:c + t].copy(), (r, c)))
    return tiles


def crop_scale_band(image, fraction):
    """Drop the bottom `fraction` of rows (where annotation bands sit)."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    image = np.asarray(image)
    h = image.shape[0]
    if h * (1.0 - fraction) < 1.0:
        raise ValueError(
            f"removing {fraction} of {h} rows would leave less than one row"
        )
    removed = math.floor(h * fraction)
    return image[: h - removed].copy()


# -- augmentation ---------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class AugmentSpec:
    """Per-transform probabilities and ranges.

    Geometric transforms (crop, flips, 90-degree rotations) are applied
    identically to image and mask; photometric ones (contrast, brightness,
    gamma, blur/sharpen, noise) touch the image only.  A probability of 0
    disables a transform.  Point ranges (for example contrast (1.0, 1.0))
    are allowed so single parameter values can be forced in tests.
    """

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.0
    crop_size: Optional[int] = None
    p_contrast: float = 0.0
    contrast_range: tuple = (0.8, 1.2)
    p_brightness: float = 0.0
    brightness_delta: float = 0.1
    p_gamma: float = 0.0
    gamma_range: tuple = (0.8, 1.2)
    p_filter: float = 0.0  # blur or sharpen, picked 50/50 when triggered
    p_noise: float = 0.0
    noise_std: float = 0.02

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rot90", "p_contrast",
                     "p_brightness", "p_gamma", "p_filter", "p_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("contrast_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, "
                                 f"got ({lo}, {hi})")
        if self.brightness_delta < 0:
            raise ValueError("brightness_delta must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.crop_size is not None and self.crop_size < 1:
            raise ValueError(f"crop_size must be >= 1, got {self.crop_size}")


def draw_augment(spec, image_shape, rng):
    """Sample one set of transform parameters (deterministic given rng state).

    Decisions are drawn in a fixed order so a seed fully determines the
    transform sequence regardless of how samples are prefetched.
    """
    h, w = image_shape[:2]
    params = {"crop": None, "hflip": False, "vflip": False, "rot_k": 0,
              "contrast": None, "brightness": None, "gamma": None,
              "filter": None, "noise_seed": None, "noise_std": spec.noise_std}
    if spec.crop_size is not None:
        s = spec.crop_size
        if h < s or w < s:
            raise ValueError(f"image {h}x{w} smaller than crop size {s}")
        params["crop"] = (int(rng.integers(h - s + 1)),
                          int(rng.integers(w - s + 1)), s)
    if spec.p_hflip > 0:
        params["hflip"] = bool(rng.random() < spec.p_hflip)
    if spec.p_vflip > 0:
        params["vflip"] = bool(rng.random() < spec.p_vflip)
    if spec.p_rot90 > 0 and rng.random() < spec.p_rot90:
        params["rot_k"] = int(rng.integers(1, 4))
    if spec.p_contrast > 0 and rng.random() < spec.p_contrast:
        params["contrast"] = float(rng.uniform(*spec.contrast_range))
    if spec.p_brightness > 0 and rng.random() < spec.p_brightness:
        d = spec.brightness_delta
        params["brightness"] = float(rng.uniform(-d, d))
    if spec.p_gamma > 0 and rng.random() < spec.p_gamma:
        params["gamma"] = float(rng.uniform(*spec.gamma_range))
    if spec.p_filter > 0 and rng.random() < spec.p_filter:
        params["filter"] = "blur" if rng.random() < 0.5 else "sharpen"
    if spec.p_noise > 0 and rng.random() < spec.p_noise:
        params["noise_seed"] = int(rng.integers(2**63))
    return params


def _apply_geometric(arr, params):
    if params["crop"] is not None:
        r, c, s = params["crop"]
        arr = arr[r:r + s, c:c + s]
    if params["hflip"]:
        arr = arr[:, ::-1]
    if params["vflip"]:
        arr = arr[::-1]
    if params["rot_k"]:
        arr = np.rot90(arr, params["rot_k"], axes=(0, 1))
    return np.ascontiguousarray(arr)


def _gaussian_blur(x):
    sigma = (1.0, 1.0) if x.ndim == 2 else (1.0, 1.0, 0.0)
    return ndimage.gaussian_filter(x, sigma=sigma, mode="nearest")


def _apply_photometric(image, params):
    x = image.astype(np.float64) / 255.0
    if params["contrast"] is not None:
        x = (x - 0.5) * params["contrast"] + 0.5
    if params["brightness"] is not None:
        x = x + params["brightness"]
    if params["gamma"] is not None:
        x = np.clip(x, 0.0, 1.0) ** params["gamma"]
    if params["filter"] == "blur":
        x = _gaussian_blur(x)
    elif params["filter"] == "sharpen":
        x = x + (x - _gaussian_blur(x))
    if params["noise_seed"] is not None and params["noise_std"] > 0:
        noise_rng = np.random.default_rng(params["noise_seed"])
        x = x + noise_rng.normal(0.0, params["noise_std"], size=x.shape)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def apply_augment(image, mask, params):
    """Apply drawn parameters: geometry to both, photometry to image only."""
    image = np.asarray(image)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[:2] != image.shape[:2]:
            raise ValueError(
                f"mask size {mask.shape[:2]} does not match image size "
                f"{image.shape[:2]}"
            )
    out_image = _apply_photometric(_apply_geometric(image, params), params)
    out_mask = None if mask is None else _apply_geometric(mask, params)
    return out_image, out_mask


def augment(image, mask, spec, rng):
    """Draw parameters and apply them; deterministic given the rng state."""
    params = draw_augment(spec, np.asarray(image).shape, rng)
    return apply_augment(image, mask, params)


# -- manifests ------------------------------------------------------------------------


class ManifestError(ValueError):
    """Malformed manifest content; the message names the offending line."""


@dataclasses.dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    split: str
    label: Optional[int] = None
    mask_path: Optional[str] = None

    def validate(self):
        if not self.image_path or not isinstance(self.image_path, str):
            raise ManifestError("image_path must be a non-empty string")
        if self.split not in SPLITS:
            raise ManifestError(
                f"split must be one of {'/'.join(SPLITS)}, "
                f"got {self.split!r}"
            )
        has_label = self.label is not None
        has_mask = self.mask_path is not None
        if has_label == has_mask:
            raise ManifestError(
                "record needs exactly one of label (classification) or "
                "mask_path (segmentation)"
            )
        if has_label and (not isinstance(self.label, int)
                          or isinstance(self.label, bool) or self.label < 0):
            raise ManifestError(f"label must be a non-negative integer, "
                                f"got {self.label!r}")
        if has_mask and (not isinstance(self.mask_path, str)
                         or not self.mask_path):
            raise ManifestError("mask_path must be a non-empty string")
        return self


@dataclasses.dataclass
class DatasetManifest:
    records: list

    def __post_init__(self):
        for record in self.records:
            record.validate()

    def for_split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def split_counts(self):
        counts = {name: 0 for name in SPLITS}
        for record in self.records:
            counts[record.split] += 1
        return counts


_MANIFEST_FIELDS = ("image_path", "split", "label", "mask_path")


def load_manifest(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: not valid JSON "
                                    f"({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"line {lineno}: expected an object, "
                                    f"got {type(obj).__name__}")
            unknown = sorted(set(obj) - set(_MANIFEST_FIELDS))
            if unknown:
                raise ManifestError(
                    f"line {lineno}: unknown fields {', '.join(unknown)}"
                )
            try:
                ManifestRecord(**obj).validate()
            except ManifestError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
            records.append(ManifestRecord(**obj))
    return DatasetManifest(records)


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        for record in manifest.records:
            obj = {"image_path": record.image_path, "split": record.split}
            if record.label is not None:
                obj["label"] = record.label
            else:
                obj["mask_path"] = record.mask_path
            fh.write(json.dumps(obj) + "\n")


def load_segmentation_pair(record, root=None):
    """Read (image, mask) for a segmentation record; dimensions must agree."""
    if record.mask_path is None:
        raise ValueError(f"{record.image_path}: not a segmentation record")
    base = str(root) + "/" if root is not None else ""
    image = read_image(base + record.image_path)
    mask = read_mask(base + record.mask_path)
    if mask.shape != image.shape[:2]:
        raise ValueError(
            f"{record.mask_path}: mask size {mask.shape} does not match "
            f"image size {image.shape[:2]}"
        )
    return image, mask


# -- feature extraction and clustering ------------------------------------------------


def extract_features(model, images, batch_size=16):
    """Embed images with a classifier trunk: one pooled row per image."""
    from . import models  # local import to avoid a cycle at module load

    rows = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            batch = np.stack([normalize(im).data for im in chunk])
            rows.append(models.encode(model, Tensor(batch)).data)
    if not rows:
        return np.zeros((0, 0), dtype=np.float32)
    return np.concatenate(rows, axis=0)


def _sq_dists(x, centroids):
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * (x @ centroids.T)
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:  # all remaining points coincide with chosen centroids
            idx = rng.integers(n)
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(features, k, seed, max_iter=300, inertia_trace=None):
    """Seeded k-means++ plus Lloyd iterations to an assignment fixpoint.

    Returns (assignments [N], centroids [k, D], inertia).  Empty clusters are
    re-seeded to the point farthest from its assigned centroid.  Appends the
    post-assignment inertia of each iteration to `inertia_trace` if given.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {x.shape}")
    n = x.shape[0]
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    assignments = None
    inertia = 0.0
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new_assignments = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), new_assignments]
        inertia = float(point_d2.sum())
        if inertia_trace is not None:
            inertia_trace.append(inertia)
        if assignments is not None and np.array_equal(new_assignments,
                                                      assignments):
            break
        assignments = new_assignments
        counts = np.bincount(assignments, minlength=k)
        for c in range(k):
            if counts[c] > 0:
                centroids[c] = x[assignments == c].mean(axis=0)
        if (counts == 0).any():
            farthest = point_d2.copy()
            for c in np.flatnonzero(counts == 0):
                idx = int(farthest.argmax())
                centroids[c] = x[idx]
                farthest[idx] = -1.0
    return assignments, centroids, inertia


def pseudo_label(images, encoder, k, seed, paths=None, split="train"):
    """Cluster encoder embeddings and emit a manifest labeled by cluster id."""
    if paths is None:
        paths = [f"images/{i:05d}.png" for i in range(len(images))]
    if len(paths) != len(images):
        raise ValueError(f"{len(paths)} paths for {len(images)} images")
    features = extract_features(encoder, images)
    assignments, _, _ = kmeans(features, k, seed)
    records = [
        ManifestRecord(image_path=path, split=split, label=int(cluster))
        for path, cluster in zip(paths, assignments)
    ]
    return DatasetManifest(records)
