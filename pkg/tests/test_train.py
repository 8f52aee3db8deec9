"""Training schedules, loops, evaluation aggregation, and prediction."""

import dataclasses
import math

import numpy as np
import pytest

from microseg import losses as L
from microseg.checkpoint import load_checkpoint
from microseg.data import read_mask, write_image
from microseg.models import build_model
from microseg.tensor import Tensor
from microseg.train import (
    EvalReport,
    NumericError,
    PretrainSchedule,
    RunRecord,
    SegSchedule,
    cosine_warmup_lr,
    early_stop,
    evaluate,
    finetune_segmentation,
    predict,
    predict_mask,
    pretrain_classifier,
)

from helpers import (
    image_from_mask,
    synthetic_segmentation_target,
    tiny_config,
    write_classification_corpus,
    write_segmentation_corpus,
)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def test_pretrain_schedule_published_defaults():
    sched = PretrainSchedule()
    assert sched.epochs == 30
    assert sched.warmup_epochs == 5
    assert sched.batch == 128
    assert sched.base_lr == 1e-3
    assert sched.weight_decay == 0.05
    assert sched.patience == 5
    assert sched.fine_tune_lr == 1e-5
    assert sched.fine_tune_weight_decay == 1e-8


def test_pretrain_schedule_fine_tuned_overrides_rates_only():
    sched = PretrainSchedule(epochs=12, warmup_epochs=2, batch=16)
    tuned = sched.fine_tuned()
    assert tuned.base_lr == 1e-5
    assert tuned.weight_decay == 1e-8
    assert tuned.epochs == 12
    assert tuned.warmup_epochs == 2
    assert tuned.batch == 16


def test_pretrain_schedule_validation():
    with pytest.raises(ValueError, match="warmup"):
        PretrainSchedule(epochs=5, warmup_epochs=5)
    with pytest.raises(ValueError, match="warmup"):
        PretrainSchedule(warmup_epochs=0)
    with pytest.raises(ValueError, match="base_lr"):
        PretrainSchedule(base_lr=-1e-3)
    with pytest.raises(ValueError, match="batch"):
        PretrainSchedule(batch=0)
    PretrainSchedule(base_lr=0.0)  # zero rate allowed as a diagnostic


def test_seg_schedule_published_defaults():
    sched = SegSchedule()
    assert sched.phase1_lr == 2e-4
    assert sched.phase2_lr == 1e-5
    assert sched.patience_per_phase == 30


def test_seg_schedule_validation():
    with pytest.raises(ValueError, match="phase2_lr"):
        SegSchedule(phase1_lr=1e-5, phase2_lr=2e-4)
    with pytest.raises(ValueError, match="patience"):
        SegSchedule(patience_per_phase=0)
    with pytest.raises(ValueError, match=">= 0"):
        SegSchedule(phase1_lr=-1.0)
    SegSchedule(phase1_lr=0.0, phase2_lr=0.0)  # frozen-run diagnostic


# ---------------------------------------------------------------------------
# cosine_warmup_lr
# ---------------------------------------------------------------------------


def test_cosine_warmup_published_values():
    sched = PretrainSchedule()  # base 1e-3, warmup 5, epochs 30
    assert cosine_warmup_lr(0, sched) == pytest.approx(2e-4, rel=1e-12)
    assert cosine_warmup_lr(5, sched) == sched.base_lr  # cos(0) == 1, exact
    assert cosine_warmup_lr(29, sched) == pytest.approx(
        3.942649342761117e-06, rel=1e-9
    )


def test_cosine_warmup_is_linear_then_decaying():
    sched = PretrainSchedule(epochs=20, warmup_epochs=4, base_lr=8e-4)
    trace = [cosine_warmup_lr(e, sched) for e in range(20)]
    for e in range(4):
        assert trace[e] == pytest.approx(8e-4 * (e + 1) / 4)
    for prev, cur in zip(trace[4:], trace[5:]):
        assert cur < prev
    assert max(trace) == trace[4] == 8e-4


def test_cosine_warmup_min_lr_floor():
    sched = PretrainSchedule(epochs=10, warmup_epochs=2)
    values = [cosine_warmup_lr(e, sched, min_lr=1e-5) for e in range(2, 10)]
    assert all(v >= 1e-5 for v in values)
    assert values[0] == sched.base_lr


def test_cosine_warmup_rejects_out_of_range():
    sched = PretrainSchedule()
    with pytest.raises(ValueError, match="epoch"):
        cosine_warmup_lr(-1, sched)
    with pytest.raises(ValueError, match="epoch"):
        cosine_warmup_lr(30, sched)


# ---------------------------------------------------------------------------
# early_stop
# ---------------------------------------------------------------------------


def test_early_stop_stagnation():
    assert early_stop([0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6], patience=5)


def test_early_stop_improving():
    assert not early_stop([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], patience=5)


def test_early_stop_short_history():
    assert not early_stop([0.9, 0.8], patience=5)
    assert not early_stop([0.9] * 5, patience=5)  # nothing before the window


def test_early_stop_improvement_inside_window():
    history = [0.5, 0.6, 0.7, 0.61, 0.62, 0.63, 0.64, 0.71]
    assert not early_stop(history, patience=5)
    history[-1] = 0.70  # ties are not strict improvements
    assert early_stop(history, patience=5)


def test_early_stop_min_delta():
    history = [0.5, 0.50005, 0.50008, 0.50009]
    assert early_stop(history, patience=3, min_delta=1e-3)
    assert not early_stop(history, patience=3)


def test_early_stop_patience_guard():
    with pytest.raises(ValueError, match="patience"):
        early_stop([0.5], patience=0)


# ---------------------------------------------------------------------------
# RunRecord
# ---------------------------------------------------------------------------


def test_run_record_roundtrip():
    record = RunRecord(
        train_loss=[1.0, 0.5], val_metric=[0.4, 0.7], lr=[1e-3, 1e-3],
        best_epoch=1, best_checkpoint="x/best.ckpt", seed=3,
        config={"variant": "classifier"}, epochs_to_converge=2,
    )
    assert RunRecord.from_dict(record.to_dict()) == record


def test_run_record_best_epoch_invariant():
    with pytest.raises(ValueError, match="best"):
        RunRecord(
            train_loss=[1.0, 0.5], val_metric=[0.4, 0.7], lr=[1e-3, 1e-3],
            best_epoch=0, best_checkpoint="x", seed=0, config={},
            epochs_to_converge=1,
        )


# ---------------------------------------------------------------------------
# Classifier pre-training
# ---------------------------------------------------------------------------


def quick_pretrain_sched(**overrides):
    base = dict(epochs=4, warmup_epochs=1, batch=4, base_lr=1e-3,
                weight_decay=0.01, patience=4)
    base.update(overrides)
    return PretrainSchedule(**base)


def classifier_config():
    return tiny_config(variant="classifier", num_classes=4)


def test_pretrain_runs_and_records(tmp_path):
    manifest = write_classification_corpus(tmp_path)
    record, ckpt = pretrain_classifier(
        classifier_config(), manifest, quick_pretrain_sched(), seed=0,
        out_dir=tmp_path, root=tmp_path,
    )
    assert (tmp_path / "best.ckpt").exists()
    n = len(record.val_metric)
    assert 1 <= n <= 4
    assert len(record.train_loss) == len(record.lr) == n
    assert record.val_metric[record.best_epoch] == max(record.val_metric)
    assert record.epochs_to_converge == record.best_epoch + 1
    sched = quick_pretrain_sched()
    assert record.lr == [cosine_warmup_lr(e, sched) for e in range(n)]
    assert record.config["variant"] == "classifier"
    assert record.seed == 0
    tensors = load_checkpoint(ckpt)
    assert set(tensors) == set(
        build_model(classifier_config(), np.random.default_rng(0)).params
    )


def test_pretrain_is_deterministic(tmp_path):
    manifest = write_classification_corpus(tmp_path)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        runs.append(pretrain_classifier(
            classifier_config(), manifest, quick_pretrain_sched(), seed=7,
            out_dir=out, root=tmp_path,
        ))
    rec_a, ckpt_a = runs[0]
    rec_b, ckpt_b = runs[1]
    assert rec_a.train_loss == rec_b.train_loss
    assert rec_a.val_metric == rec_b.val_metric
    assert rec_a.best_epoch == rec_b.best_epoch
    with open(ckpt_a, "rb") as fa, open(ckpt_b, "rb") as fb:
        assert fa.read() == fb.read()


def test_pretrain_learns_the_texture_families(tmp_path):
    manifest = write_classification_corpus(tmp_path)
    record, _ = pretrain_classifier(
        classifier_config(), manifest,
        quick_pretrain_sched(epochs=8, base_lr=3e-3), seed=1,
        out_dir=tmp_path, root=tmp_path,
    )
    # 4 tightly-clustered families: well above the 0.25 chance level
    assert max(record.val_metric) >= 0.75


def test_pretrain_zero_lr_leaves_parameters_at_init(tmp_path):
    manifest = write_classification_corpus(tmp_path)
    record, ckpt = pretrain_classifier(
        classifier_config(), manifest,
        quick_pretrain_sched(base_lr=0.0, weight_decay=0.0), seed=5,
        out_dir=tmp_path, root=tmp_path,
    )
    fresh = build_model(classifier_config(), np.random.default_rng(5))
    for name, arr in load_checkpoint(ckpt).items():
        assert np.array_equal(arr, fresh.params[name].data), name


def test_pretrain_init_warm_start(tmp_path):
    manifest = write_classification_corpus(tmp_path)
    _, ckpt = pretrain_classifier(
        classifier_config(), manifest, quick_pretrain_sched(), seed=0,
        out_dir=tmp_path, root=tmp_path,
    )
    out2 = tmp_path / "warm"
    out2.mkdir()
    record, _ = pretrain_classifier(
        classifier_config(), manifest,
        quick_pretrain_sched(epochs=2).fine_tuned(), seed=1,
        out_dir=out2, init=ckpt, root=tmp_path,
    )
    assert record.load_report is not None
    assert record.load_report["loaded"] > 0
    assert record.load_report["mismatched"] == 0


def test_pretrain_incompatible_init_rejected(tmp_path):
    manifest = write_classification_corpus(tmp_path)
    with pytest.raises(ValueError, match="matches no parameter"):
        pretrain_classifier(
            classifier_config(), manifest, quick_pretrain_sched(), seed=0,
            out_dir=tmp_path, init={"nonsense.weight": np.zeros(3, np.float32)},
            root=tmp_path,
        )


def test_pretrain_early_stops_on_flat_metric(tmp_path):
    # all images identical: the val metric cannot improve after epoch 0
    manifest = write_classification_corpus(tmp_path, num_classes=2,
                                           train_per_class=2, seed=3)
    flat = tmp_path / "flat.pgm"
    write_image(np.full((32, 32), 128, dtype=np.uint8), flat)
    for record_path in [r.image_path for r in manifest.records]:
        write_image(np.full((32, 32), 128, dtype=np.uint8),
                    tmp_path / record_path)
    record, _ = pretrain_classifier(
        classifier_config(), manifest,
        quick_pretrain_sched(epochs=20, warmup_epochs=1, patience=2), seed=0,
        out_dir=tmp_path, root=tmp_path,
    )
    assert len(record.val_metric) == 3  # best at 0, then patience 2


def test_pretrain_validates_inputs(tmp_path):
    manifest = write_classification_corpus(tmp_path)
    with pytest.raises(ValueError, match="classifier"):
        pretrain_classifier(tiny_config(variant="cs_unet"), manifest,
                            quick_pretrain_sched(), 0, tmp_path,
                            root=tmp_path)
    empty = write_classification_corpus(tmp_path, train_per_class=0,
                                        val_per_class=1)
    with pytest.raises(ValueError, match="train split is empty"):
        pretrain_classifier(classifier_config(), empty,
                            quick_pretrain_sched(), 0, tmp_path,
                            root=tmp_path)


def test_pretrain_raises_numeric_error_on_nan(tmp_path):
    manifest = write_classification_corpus(tmp_path)
    model = build_model(classifier_config(), np.random.default_rng(0))
    name = "swin_encoder.patch_embed.proj.weight"
    poisoned = {name: np.full(model.params[name].shape, np.nan,
                              dtype=np.float32)}
    with pytest.raises(NumericError, match="non-finite"):
        pretrain_classifier(
            classifier_config(), manifest, quick_pretrain_sched(), seed=0,
            out_dir=tmp_path, init=poisoned, root=tmp_path,
        )


# ---------------------------------------------------------------------------
# Segmentation fine-tuning
# ---------------------------------------------------------------------------


def quick_seg_sched(**overrides):
    base = dict(phase1_lr=3e-3, phase2_lr=1e-4, patience_per_phase=3,
                batch=2, max_epochs_per_phase=4)
    base.update(overrides)
    return SegSchedule(**base)


def seg_config():
    return tiny_config(variant="cs_unet", num_classes=3)


def test_finetune_runs_with_single_lr_drop(tmp_path):
    manifest = write_segmentation_corpus(tmp_path)
    record, ckpt = finetune_segmentation(
        seg_config(), manifest, quick_seg_sched(), seed=0,
        out_dir=tmp_path, root=tmp_path,
    )
    assert (tmp_path / "best.ckpt").exists()
    boundary = record.phase_boundary
    assert 1 <= boundary < len(record.lr)
    assert set(record.lr[:boundary]) == {3e-3}
    assert set(record.lr[boundary:]) == {1e-4}
    drops = sum(1 for a, b in zip(record.lr, record.lr[1:]) if b < a)
    assert drops == 1
    assert record.val_metric[record.best_epoch] == max(record.val_metric)


def test_finetune_one_shot_manifest_produces_a_mask(tmp_path):
    manifest = write_segmentation_corpus(tmp_path, num_train=1, num_val=0)
    record, ckpt = finetune_segmentation(
        seg_config(), manifest, quick_seg_sched(max_epochs_per_phase=2),
        seed=0, out_dir=tmp_path, root=tmp_path,
    )
    model = build_model(seg_config(), np.random.default_rng(0))
    for name, arr in load_checkpoint(ckpt).items():
        model.params[name].data[...] = arr
    image = image_from_mask(synthetic_segmentation_target(32, 3),
                            np.random.default_rng(9))
    mask = predict_mask(model, image)
    assert mask.shape == (32, 32)
    assert mask.dtype == np.uint8
    assert mask.max() < 3


def test_finetune_zero_lr_is_bitwise_frozen(tmp_path):
    manifest = write_segmentation_corpus(tmp_path)
    sched = quick_seg_sched(phase1_lr=0.0, phase2_lr=0.0,
                            max_epochs_per_phase=2)
    record, ckpt = finetune_segmentation(
        seg_config(), manifest, sched, seed=11, out_dir=tmp_path,
        root=tmp_path,
    )
    fresh = build_model(seg_config(), np.random.default_rng(11))
    for name, arr in load_checkpoint(ckpt).items():
        assert np.array_equal(arr, fresh.params[name].data), name


def test_finetune_init_from_classifier_checkpoint(tmp_path):
    cls_manifest = write_classification_corpus(tmp_path)
    _, cls_ckpt = pretrain_classifier(
        tiny_config(variant="classifier", num_classes=4), cls_manifest,
        quick_pretrain_sched(epochs=2), seed=0, out_dir=tmp_path,
        root=tmp_path,
    )
    seg_dir = tmp_path / "seg"
    seg_dir.mkdir()
    manifest = write_segmentation_corpus(seg_dir)
    record, _ = finetune_segmentation(
        seg_config(), manifest, quick_seg_sched(max_epochs_per_phase=1),
        seed=0, out_dir=seg_dir, init=cls_ckpt, root=seg_dir,
    )
    assert record.load_report["loaded"] > 0


def test_finetune_incompatible_init_rejected(tmp_path):
    manifest = write_segmentation_corpus(tmp_path)
    with pytest.raises(ValueError, match="matches no parameter"):
        finetune_segmentation(
            seg_config(), manifest, quick_seg_sched(), seed=0,
            out_dir=tmp_path, init={"junk": np.zeros(2, np.float32)},
            root=tmp_path,
        )


def test_finetune_validates_variant_and_split(tmp_path):
    manifest = write_segmentation_corpus(tmp_path)
    with pytest.raises(ValueError, match="segmentation config"):
        finetune_segmentation(
            tiny_config(variant="classifier"), manifest, quick_seg_sched(),
            0, tmp_path, root=tmp_path,
        )
    empty = write_segmentation_corpus(tmp_path, num_train=0, num_val=1)
    with pytest.raises(ValueError, match="train split is empty"):
        finetune_segmentation(seg_config(), empty, quick_seg_sched(), 0,
                              tmp_path, root=tmp_path)


def test_finetune_is_deterministic(tmp_path):
    manifest = write_segmentation_corpus(tmp_path)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        runs.append(finetune_segmentation(
            seg_config(), manifest,
            quick_seg_sched(max_epochs_per_phase=2), seed=4, out_dir=out,
            root=tmp_path,
        ))
    assert runs[0][0].train_loss == runs[1][0].train_loss
    assert runs[0][0].val_metric == runs[1][0].val_metric
    with open(runs[0][1], "rb") as fa, open(runs[1][1], "rb") as fb:
        assert fa.read() == fb.read()


# ---------------------------------------------------------------------------
# Evaluation aggregation
# ---------------------------------------------------------------------------


class StubModel:
    """Replays a fixed queue of prediction masks as one-hot logits."""

    def __init__(self, preds, num_classes):
        self.preds = list(preds)
        self.num_classes = num_classes

    def forward(self, batch, rng=None, training=False):
        pred = self.preds.pop(0)
        h, w = pred.shape
        logits = np.zeros((1, self.num_classes, h, w), dtype=np.float32)
        bi, ri, ci = np.indices((1, h, w))
        logits[bi, pred[None], ri, ci] = 10.0
        return Tensor(logits)


def seg_records(tmp_path, targets, images=None):
    from microseg.data import DatasetManifest, ManifestRecord, write_mask

    records = []
    for i, target in enumerate(targets):
        image = (images[i] if images is not None
                 else np.zeros(target.shape, dtype=np.uint8))
        write_image(image, tmp_path / f"e{i}.pgm")
        write_mask(target.astype(np.uint8), tmp_path / f"e{i}_mask.pgm")
        records.append(ManifestRecord(f"e{i}.pgm", "test",
                                      mask_path=f"e{i}_mask.pgm"))
    return records


def test_evaluate_perfect_oracle(tmp_path, rng):
    targets = [rng.integers(0, 3, size=(8, 8)).astype(np.int64)
               for _ in range(3)]
    records = seg_records(tmp_path, targets)
    model = StubModel(targets, num_classes=3)
    report = evaluate(model, records, num_classes=3, root=tmp_path)
    assert report.per_image == [1.0, 1.0, 1.0]
    assert report.mean == 1.0
    assert report.std == 0.0


def test_evaluate_single_image_zero_std(tmp_path, rng):
    target = rng.integers(0, 2, size=(8, 8)).astype(np.int64)
    records = seg_records(tmp_path, [target])
    report = evaluate(StubModel([target], 2), records, 2, root=tmp_path)
    assert report.std == 0.0


def test_evaluate_hand_mean_and_population_std(tmp_path):
    """Two images engineered to per-image mean IoU exactly 0.8 and 0.6."""
    # image A: 4 classes sized 34/34/16/16 on a 10x10 grid; swap 4 pixels
    # between classes 2 and 3 -> IoU (1, 1, 12/20, 12/20), mean 0.8
    flat_a = np.array([0] * 34 + [1] * 34 + [2] * 16 + [3] * 16)
    target_a = flat_a.reshape(10, 10)
    pred_a = flat_a.copy()
    pred_a[68:72] = 3   # four class-2 pixels -> 3
    pred_a[84:88] = 2   # four class-3 pixels -> 2
    pred_a = pred_a.reshape(10, 10)
    assert L.iou(pred_a, target_a, 4).mean == pytest.approx(0.8)
    # image B: sizes 35/35/15/15; swap 10 pixels -> IoU (1, 1, 0.2, 0.2)
    flat_b = np.array([0] * 35 + [1] * 35 + [2] * 15 + [3] * 15)
    target_b = flat_b.reshape(10, 10)
    pred_b = flat_b.copy()
    pred_b[70:80] = 3
    pred_b[85:95] = 2
    pred_b = pred_b.reshape(10, 10)
    assert L.iou(pred_b, target_b, 4).mean == pytest.approx(0.6)

    records = seg_records(tmp_path, [target_a, target_b])
    model = StubModel([pred_a, pred_b], num_classes=4)
    report = evaluate(model, records, num_classes=4, root=tmp_path)
    assert report.mean == pytest.approx(0.7)
    assert report.std == pytest.approx(0.1)  # population std, divide by N


def test_evaluate_empty_split_rejected():
    with pytest.raises(ValueError, match="empty"):
        evaluate(StubModel([], 2), [], 2)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


class ConstantModel:
    """Fixed logits; class `winner` always wins."""

    def __init__(self, input_size, num_classes, winner=0, queue=None):
        self.config = type("Cfg", (), {"input_size": input_size,
                                       "num_classes": num_classes})()
        self.winner = winner
        self.queue = queue  # optional per-call winner list

    def forward(self, batch, rng=None, training=False):
        winner = self.queue.pop(0) if self.queue else self.winner
        b, _, h, w = batch.shape
        k = self.config.num_classes
        logits = np.zeros((b, k, h, w), dtype=np.float32)
        logits[:, winner] = 1.0
        return Tensor(logits)


def test_predict_constant_logits_constant_mask(rng):
    model = ConstantModel(input_size=16, num_classes=3, winner=2)
    image = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
    mask = predict_mask(model, image)
    assert mask.shape == (16, 16)
    assert (mask == 2).all()


def test_predict_exact_size_equals_single_tile(rng):
    cfg = tiny_config(variant="cs_unet", num_classes=3)
    model = build_model(cfg, np.random.default_rng(0))
    image = rng.integers(0, 256, size=(32, 32), dtype=np.uint8)
    from microseg.data import normalize
    direct = model.forward(
        Tensor(normalize(image).data[None])
    ).data[0].argmax(axis=0).astype(np.uint8)
    assert np.array_equal(predict_mask(model, image), direct)


def test_predict_stitching_center_crop_priority(rng):
    """48x32 image, 32-input model: tiles at rows 0 and 16.  Pixels go to the
    nearer tile center, so rows 0-23 come from tile A, rows 24-47 from B."""
    model = ConstantModel(input_size=32, num_classes=2, queue=[0, 1])
    image = rng.integers(0, 256, size=(48, 32), dtype=np.uint8)
    mask = predict_mask(model, image)
    assert (mask[:24] == 0).all()
    assert (mask[24:] == 1).all()


def test_predict_pixel_in_one_tile_keeps_that_tiles_value(rng):
    model = ConstantModel(input_size=32, num_classes=2, queue=[0, 1])
    image = rng.integers(0, 256, size=(48, 32), dtype=np.uint8)
    mask = predict_mask(model, image)
    # rows 32-47 exist only in the second tile
    assert (mask[32:] == 1).all()
    # rows 0-15 exist only in the first
    assert (mask[:16] == 0).all()


def test_predict_too_small_image_rejected(rng):
    model = ConstantModel(input_size=32, num_classes=2)
    with pytest.raises(ValueError, match="smaller"):
        predict_mask(model, np.zeros((16, 16), dtype=np.uint8))


def test_predict_too_many_classes_rejected():
    model = ConstantModel(input_size=16, num_classes=300)
    with pytest.raises(ValueError, match="256"):
        predict_mask(model, np.zeros((16, 16), dtype=np.uint8))


def test_predict_writes_pgm_and_optional_png(tmp_path, rng):
    model = ConstantModel(input_size=16, num_classes=3, winner=1)
    image = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
    src = tmp_path / "in.pgm"
    write_image(image, src)
    out = tmp_path / "mask.pgm"
    png = tmp_path / "mask.png"
    returned = predict(model, src, out, png_path=png)
    assert np.array_equal(read_mask(out), returned)
    assert np.array_equal(read_mask(png), returned)
    assert (returned == 1).all()
