"""Independent brute-force oracles shared by the unit and acceptance tests,
plus the small model configs the training tests reuse.

The oracles are written directly against the math, in plain numpy loops,
with no calls into the library's own kernels.
"""

import numpy as np

from microseg.models import ModelConfig


def tiny_config(variant="cs_unet", input_size=32, num_classes=3, **overrides):
    """Two-stage model small enough for sub-second forwards in tests."""
    base = dict(
        variant=variant,
        input_size=input_size,
        patch=4,
        embed_dim=8,
        depths=(2, 2),
        heads=(2, 2),
        window=4,
        num_classes=num_classes,
        cnn_channels=(8, 16),
    )
    base.update(overrides)
    return ModelConfig(**base).validate()


def region_of(a, window, shift):
    """Contiguous-run id of coordinate ``a`` under a shifted window partition.

    The shifted partition of one axis splits it into runs [0, shift),
    [shift, shift+window), [shift+window, shift+2*window), ...; two tokens may
    attend exactly when their (row run, column run) pairs agree.
    """
    return 0 if a < shift else (a - shift) // window + 1


def oracle_shift_mask(h, w, window, shift):
    """Expected additive mask per rolled window, from run membership alone."""
    nh, nw = h // window, w // window
    n = window * window
    mask = np.zeros((nh * nw, n, n), dtype=np.float32)
    for wi in range(nh):
        for wj in range(nw):
            regions = []
            for a in range(window):
                for b in range(window):
                    orig_r = (wi * window + a + shift) % h
                    orig_c = (wj * window + b + shift) % w
                    regions.append(
                        (region_of(orig_r, window, shift),
                         region_of(orig_c, window, shift))
                    )
            for i in range(n):
                for j in range(n):
                    if regions[i] != regions[j]:
                        mask[wi * nw + wj, i, j] = -1e9
    return mask


def oracle_masked_attention(grid, weights, num_heads, window, shift):
    """Shifted-window attention computed token by token on the unrolled grid.

    grid: (H, W, C) float64.  weights: dict with qkv.weight (3C, C),
    qkv.bias, proj.weight (C, C), proj.bias, table ((2M-1)^2, heads), all
    numpy.  Each token attends exactly to the tokens of its own shifted
    window region; the position bias uses original-frame offsets.
    """
    h, w, c = grid.shape
    hd = c // num_heads
    scale = hd**-0.5
    qkv = grid @ weights["qkv.weight"].T + weights["qkv.bias"]  # (H, W, 3C)
    q, k, v = qkv[..., :c], qkv[..., c : 2 * c], qkv[..., 2 * c :]
    table = weights["table"]

    out = np.zeros_like(grid)
    for r in range(h):
        for cc in range(w):
            reg = (region_of(r, window, shift), region_of(cc, window, shift))
            members = [
                (r2, c2)
                for r2 in range(h)
                for c2 in range(w)
                if (region_of(r2, window, shift),
                    region_of(c2, window, shift)) == reg
            ]
            head_outs = []
            for head in range(num_heads):
                sl = slice(head * hd, (head + 1) * hd)
                logits = np.empty(len(members))
                for mi, (r2, c2) in enumerate(members):
                    bias_idx = (r - r2 + window - 1) * (2 * window - 1) + (
                        cc - c2 + window - 1
                    )
                    logits[mi] = (
                        scale * float(q[r, cc, sl] @ k[r2, c2, sl])
                        + table[bias_idx, head]
                    )
                e = np.exp(logits - logits.max())
                a = e / e.sum()
                acc = np.zeros(hd)
                for mi, (r2, c2) in enumerate(members):
                    acc += a[mi] * v[r2, c2, sl]
                head_outs.append(acc)
            out[r, cc] = np.concatenate(head_outs)
    return out @ weights["proj.weight"].T + weights["proj.bias"]


def oracle_iou(pred, target, num_classes):
    """Per-class IoU by direct pixel counting; None where the union is empty."""
    per_class = []
    for c in range(num_classes):
        inter = int(np.sum((pred == c) & (target == c)))
        union = int(np.sum((pred == c) | (target == c)))
        per_class.append(None if union == 0 else inter / union)
    defined = [x for x in per_class if x is not None]
    mean = sum(defined) / len(defined) if defined else None
    return per_class, mean


def oracle_softmax(row):
    e = np.exp(row - row.max())
    return e / e.sum()


def oracle_balanced_ce(logits, target, weights):
    """Mean over pixels of w[y] * (-log p[y]), summed by explicit loops."""
    b, k, h, w = logits.shape
    total = 0.0
    for bi in range(b):
        for r in range(h):
            for c in range(w):
                p = oracle_softmax(logits[bi, :, r, c].astype(np.float64))
                y = int(target[bi, r, c])
                total += weights[y] * (-np.log(p[y]))
    return total / (b * h * w)


def oracle_dice(logits, target, num_classes, eps=1.0):
    """1 - mean_c (2*sum p_c g_c + eps) / (sum p_c + sum g_c + eps)."""
    b, k, h, w = logits.shape
    probs = np.zeros_like(logits, dtype=np.float64)
    for bi in range(b):
        for r in range(h):
            for c in range(w):
                probs[bi, :, r, c] = oracle_softmax(
                    logits[bi, :, r, c].astype(np.float64)
                )
    score = 0.0
    for cls in range(num_classes):
        p = probs[:, cls]
        g = (target == cls).astype(np.float64)
        score += (2.0 * (p * g).sum() + eps) / (p.sum() + g.sum() + eps)
    return 1.0 - score / num_classes


def oracle_topk(logits, labels, k):
    """Top-k accuracy with ties resolved toward lower class indices."""
    hits = 0
    for row, y in zip(logits, labels):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        if int(y) in order[:k]:
            hits += 1
    return hits / len(labels)


def adjusted_rand_index(a, b):
    """Chance-corrected pair-counting agreement between two labelings."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = len(a)
    classes_a, classes_b = np.unique(a), np.unique(b)
    table = np.array(
        [[np.sum((a == ca) & (b == cb)) for cb in classes_b] for ca in classes_a],
        dtype=np.int64,
    )

    def comb2(x):
        return x * (x - 1) // 2

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return (sum_cells - expected) / (max_index - expected)


# -- synthetic corpora shared by the training and acceptance tests --------------------


def perturb_pixels(base, rng, count=8):
    """Invert a few random pixels of an 8-bit texture."""
    out = base.copy()
    rows = rng.integers(0, base.shape[0], count)
    cols = rng.integers(0, base.shape[1], count)
    out[rows, cols] = 255 - out[rows, cols]
    return out


def write_classification_corpus(root, num_classes=4, train_per_class=3,
                                val_per_class=1, size=32, seed=0):
    """Texture families on disk: one noise base per class, perturbed copies.

    Returns the manifest (paths relative to ``root``).
    """
    from microseg.data import DatasetManifest, ManifestRecord, write_image

    rng = np.random.default_rng(seed)
    bases = [rng.integers(0, 256, size=(size, size), dtype=np.uint8)
             for _ in range(num_classes)]
    records = []
    for label, base in enumerate(bases):
        for i in range(train_per_class + val_per_class):
            split = "train" if i < train_per_class else "val"
            name = f"c{label}_{i}.pgm"
            write_image(perturb_pixels(base, rng), f"{root}/{name}")
            records.append(ManifestRecord(name, split, label=label))
    return DatasetManifest(records)


def synthetic_segmentation_target(size, num_classes=3):
    """Class-index mask with one disc per non-background class."""
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    mask = np.zeros((size, size), dtype=np.int64)
    radius = (size // 5) ** 2
    for k in range(1, num_classes):
        cr = size * (2 * k - 1) // (2 * (num_classes - 1) or 2)
        mask[(r - cr) ** 2 + (c - cr) ** 2 < radius] = k
    return mask


def image_from_mask(mask, rng, spread=90, base=30, noise=20):
    """Render a mask as an 8-bit image: distinct gray level per class + noise."""
    levels = (mask * spread + base).astype(np.int64)
    noisy = levels + rng.integers(0, noise, mask.shape)
    return np.clip(noisy, 0, 255).astype(np.uint8)


def write_segmentation_corpus(root, num_train=2, num_val=1, size=32,
                              num_classes=3, seed=0):
    """Disc-segmentation corpus on disk; same target, fresh noise per image."""
    from microseg.data import DatasetManifest, ManifestRecord, write_image, write_mask

    rng = np.random.default_rng(seed)
    mask = synthetic_segmentation_target(size, num_classes)
    records = []
    for i in range(num_train + num_val):
        split = "train" if i < num_train else "val"
        image_name, mask_name = f"s{i}.pgm", f"s{i}_mask.pgm"
        write_image(image_from_mask(mask, rng), f"{root}/{image_name}")
        write_mask(mask.astype(np.uint8), f"{root}/{mask_name}")
        records.append(ManifestRecord(image_name, split, mask_path=mask_name))
    return DatasetManifest(records)
