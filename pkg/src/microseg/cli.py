"""Command-line surface.

Subcommands: pretrain, finetune, predict, evaluate, tile, cluster, gradcheck.
Global flags: --config (JSON with the model/schedule keys), --seed,
--threads (1 means bit-stable single-thread math), --out.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numeric failure
(non-finite values detected).

Heavy imports happen inside the command handlers so --threads can pin the
BLAS thread pools before numpy first loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


def _set_threads(n):
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _read_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return obj


def _ensure_out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _emit(lines, summary, out_dir):
    for key, value in lines:
        print(f"{key} = {value}")
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_run_record(record, out_dir):
    path = os.path.join(out_dir, "run_record.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_model_config(cfg_obj):
    from .models import ModelConfig

    if "model" not in cfg_obj:
        raise ValueError("config needs a 'model' section")
    return ModelConfig.from_dict(cfg_obj["model"])


def _schedule(cls, cfg_obj, section):
    try:
        return cls(**cfg_obj.get(section, {}))
    except TypeError as exc:
        raise ValueError(f"bad '{section}' config section: {exc}") from exc


def _manifest_and_root(args, cfg_obj):
    from .data import load_manifest

    path = getattr(args, "manifest", None) or cfg_obj.get("manifest")
    if not path:
        raise ValueError("no manifest: pass --manifest or a 'manifest' "
                         "config key")
    root = cfg_obj.get("root") or os.path.dirname(os.path.abspath(path))
    return load_manifest(path), root


def _restore_exact(model, ckpt_path):
    from .checkpoint import load_checkpoint

    tensors = load_checkpoint(ckpt_path)
    copied = 0
    for name, array in tensors.items():
        param = model.params.get(name)
        if param is not None and param.shape == array.shape:
            param.data[...] = array.astype(param.data.dtype)
            copied += 1
    if copied == 0:
        raise ValueError(f"{ckpt_path}: no tensor matches this model")
    return copied


# -- command handlers -----------------------------------------------------------------


def _cmd_pretrain(args):
    from .train import PretrainSchedule, pretrain_classifier

    cfg_obj = _read_config(args.config)
    model_cfg = _load_model_config(cfg_obj)
    sched = _schedule(PretrainSchedule, cfg_obj, "pretrain")
    if args.fine_tune:
        sched = sched.fine_tuned()
    manifest, root = _manifest_and_root(args, cfg_obj)
    out_dir = _ensure_out(args)
    record, ckpt = pretrain_classifier(
        model_cfg, manifest, sched, args.seed, out_dir,
        init=args.init, root=root,
    )
    record_path = _write_run_record(record, out_dir)
    n = len(record.val_metric)
    _emit(
        [
            ("command", "pretrain"),
            ("seed", args.seed),
            ("epochs_run", n),
            ("best_epoch", record.best_epoch),
            ("best_val_top1", f"{max(record.val_metric):.6f}"),
            ("epochs_to_converge", record.epochs_to_converge),
            ("best_checkpoint", ckpt),
            ("run_record", record_path),
        ],
        {
            "command": "pretrain",
            "seed": args.seed,
            "epochs_run": n,
            "best_epoch": record.best_epoch,
            "best_val_top1": max(record.val_metric),
            "epochs_to_converge": record.epochs_to_converge,
            "best_checkpoint": ckpt,
            "run_record": record_path,
        },
        out_dir,
    )
    return EXIT_OK


def _cmd_finetune(args):
    from .train import SegSchedule, finetune_segmentation

    cfg_obj = _read_config(args.config)
    model_cfg = _load_model_config(cfg_obj)
    sched = _schedule(SegSchedule, cfg_obj, "seg")
    manifest, root = _manifest_and_root(args, cfg_obj)
    out_dir = _ensure_out(args)
    record, ckpt = finetune_segmentation(
        model_cfg, manifest, sched, args.seed, out_dir,
        init=args.init, init_policy=args.policy, root=root,
    )
    record_path = _write_run_record(record, out_dir)
    _emit(
        [
            ("command", "finetune"),
            ("seed", args.seed),
            ("epochs_run", len(record.val_metric)),
            ("phase_boundary", record.phase_boundary),
            ("best_epoch", record.best_epoch),
            ("best_val_mean_iou", f"{max(record.val_metric):.6f}"),
            ("best_checkpoint", ckpt),
            ("run_record", record_path),
        ],
        {
            "command": "finetune",
            "seed": args.seed,
            "epochs_run": len(record.val_metric),
            "phase_boundary": record.phase_boundary,
            "best_epoch": record.best_epoch,
            "best_val_mean_iou": max(record.val_metric),
            "best_checkpoint": ckpt,
            "run_record": record_path,
        },
        out_dir,
    )
    return EXIT_OK


def _build_model_from(args, cfg_obj):
    import numpy as np

    from .models import build_model

    model_cfg = _load_model_config(cfg_obj)
    model = build_model(model_cfg, np.random.default_rng(args.seed))
    if args.ckpt:
        _restore_exact(model, args.ckpt)
    return model


def _cmd_predict(args):
    from .train import predict

    cfg_obj = _read_config(args.config)
    model = _build_model_from(args, cfg_obj)
    out_dir = _ensure_out(args)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    mask_path = os.path.join(out_dir, f"{stem}_mask.pgm")
    png_path = os.path.join(out_dir, f"{stem}_mask.png") if args.png else None
    mask = predict(model, args.image, mask_path, png_path=png_path)
    lines = [
        ("command", "predict"),
        ("image", args.image),
        ("mask", mask_path),
        ("classes_present", " ".join(str(v) for v in sorted(set(mask.ravel().tolist())))),
    ]
    summary = {
        "command": "predict",
        "image": args.image,
        "mask": mask_path,
        "png": png_path,
        "shape": list(mask.shape),
    }
    if png_path:
        lines.append(("png", png_path))
    _emit(lines, summary, out_dir)
    return EXIT_OK


def _cmd_evaluate(args):
    from .train import evaluate

    cfg_obj = _read_config(args.config)
    model = _build_model_from(args, cfg_obj)
    manifest, root = _manifest_and_root(args, cfg_obj)
    records = manifest.for_split(args.split)
    out_dir = _ensure_out(args)
    report = evaluate(model, records, model.config.num_classes, root=root)
    lines = [
        ("command", "evaluate"),
        ("split", args.split),
        ("images", len(report.per_image)),
        ("mean_iou", f"{report.mean:.6f}"),
        ("std_iou", f"{report.std:.6f}"),
    ]
    lines += [(f"iou[{i}]", f"{v:.6f}") for i, v in enumerate(report.per_image)]
    _emit(
        lines,
        {
            "command": "evaluate",
            "split": args.split,
            "mean_iou": report.mean,
            "std_iou": report.std,
            "per_image": report.per_image,
        },
        out_dir,
    )
    return EXIT_OK


def _cmd_tile(args):
    from .data import TilingSpec, read_image, tile_image, write_image

    spec = TilingSpec(tile=args.tile, policy=args.policy)
    image = read_image(args.image)
    tiles = tile_image(image, spec)
    out_dir = _ensure_out(args)
    ext = "pgm" if image.ndim == 2 else "ppm"
    origins = []
    for tile, (r, c) in tiles:
        name = f"tile_r{r:05d}_c{c:05d}.{ext}"
        write_image(tile, os.path.join(out_dir, name))
        origins.append({"row": r, "col": c, "file": name})
    _emit(
        [
            ("command", "tile"),
            ("image", args.image),
            ("tile", args.tile),
            ("policy", args.policy),
            ("count", len(tiles)),
        ],
        {
            "command": "tile",
            "image": args.image,
            "tile": args.tile,
            "policy": args.policy,
            "count": len(tiles),
            "tiles": origins,
        },
        out_dir,
    )
    return EXIT_OK


def _cmd_cluster(args):
    from .data import pseudo_label, read_image, save_manifest

    cfg_obj = _read_config(args.config)
    model = _build_model_from(args, cfg_obj)
    if model.config.variant != "classifier":
        raise ValueError("clustering needs a classifier-variant model")
    names = sorted(
        f for f in os.listdir(args.images)
        if f.lower().endswith((".pgm", ".ppm", ".png"))
    )
    if not names:
        raise ValueError(f"no .pgm/.ppm/.png images in {args.images}")
    images = [read_image(os.path.join(args.images, f)) for f in names]
    manifest = pseudo_label(images, model, args.k, args.seed, paths=names)
    out_dir = _ensure_out(args)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    save_manifest(manifest, manifest_path)
    counts = {}
    for record in manifest.records:
        counts[record.label] = counts.get(record.label, 0) + 1
    _emit(
        [
            ("command", "cluster"),
            ("images", len(images)),
            ("k", args.k),
            ("manifest", manifest_path),
            ("cluster_sizes",
             " ".join(str(counts.get(c, 0)) for c in range(args.k))),
        ],
        {
            "command": "cluster",
            "images": len(images),
            "k": args.k,
            "manifest": manifest_path,
            "cluster_sizes": [counts.get(c, 0) for c in range(args.k)],
        },
        out_dir,
    )
    return EXIT_OK


def _gradcheck_cases(rng):
    import numpy as np

    from . import tensor as T

    def t(*shape):
        return T.Tensor(rng.standard_normal(shape), requires_grad=True)

    return [
        ("matmul", (t(3, 4), t(4, 2)),
         lambda a, b: (a @ b).sum()),
        ("linear", (t(5, 4), t(3, 4), t(3)),
         lambda x, w, b: T.linear(x, w, b).sum()),
        ("conv2d", (t(1, 2, 6, 6), t(3, 2, 3, 3), t(3)),
         lambda x, w, b: (T.conv2d(x, w, b, stride=2) * 0.5).sum()),
        ("layer_norm", (t(2, 5, 8), t(8), t(8)),
         lambda x, g, b: (T.layer_norm(x, g, b) ** 2).sum()),
        ("softmax", (t(3, 7),),
         lambda x: (T.softmax(x, axis=1) * T.softmax(x, axis=1)).sum()),
        ("log_softmax", (t(3, 7),),
         lambda x: (-T.log_softmax(x, axis=1))[:, 0].sum()),
        ("gelu", (t(4, 4),),
         lambda x: T.gelu(x).sum()),
        ("avg_pool2d", (t(1, 2, 6, 6),),
         lambda x: (T.avg_pool2d(x, 2) ** 2).sum()),
    ]


def _cmd_gradcheck(args):
    import numpy as np

    from .tensor import check_gradients

    rng = np.random.default_rng(args.seed)
    tolerance = 1e-5
    worst_overall = 0.0
    failures = 0
    for name, inputs, f in _gradcheck_cases(rng):
        worst = check_gradients(f, inputs)
        if not np.isfinite(worst):
            print(f"{name} = {worst} NONFINITE")
            raise _Nonfinite(name)
        status = "PASS" if worst < tolerance else "FAIL"
        failures += status == "FAIL"
        worst_overall = max(worst_overall, worst)
        print(f"{name} = {worst:.3e} {status}")
    print(f"worst = {worst_overall:.3e}")
    print(f"tolerance = {tolerance:.0e}")
    if failures:
        print(f"failed = {failures}")
        return EXIT_VALIDATION
    print("all gradients match finite differences")
    return EXIT_OK


class _Nonfinite(RuntimeError):
    pass


# -- argument parsing -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="microseg",
        description="Microscopy segmentation: hybrid CNN + windowed-attention "
                    "models with a self-contained autodiff engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="JSON config with model/schedule keys")
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS threads (1 = bit-stable)")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("pretrain", help="train a classifier from scratch")
    common(p)
    p.add_argument("--manifest", help="classification manifest (JSON lines)")
    p.add_argument("--init", help="warm-start checkpoint")
    p.add_argument("--fine-tune", action="store_true",
                   help="use the reduced fine-tuning rates")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="two-phase segmentation training")
    common(p)
    p.add_argument("--manifest", help="segmentation manifest (JSON lines)")
    p.add_argument("--init", help="pre-trained checkpoint for the encoders")
    p.add_argument("--policy", default="encoder_only",
                   choices=["encoder_only", "encoder_and_decoder"],
                   help="which parameter groups the init seeds")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("predict", help="write the argmax mask for an image")
    common(p)
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="input image")
    p.add_argument("--png", action="store_true", help="also write a PNG mask")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="mean/std IoU over a manifest split")
    common(p)
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--manifest", help="segmentation manifest")
    p.add_argument("--split", default="test",
                   choices=["train", "val", "test"])
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("tile", help="cut an image into square tiles")
    common(p, config_required=False)
    p.add_argument("--image", required=True, help="input image")
    p.add_argument("--tile", type=int, default=512, help="tile side")
    p.add_argument("--policy", default="cover", choices=["none", "cover"])
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("cluster",
                       help="k-means pseudo-labels from encoder features")
    common(p)
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--k", type=int, required=True, help="cluster count")
    p.add_argument("--ckpt", help="encoder checkpoint (random init if absent)")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients to finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    # Imported only now so the thread caps above precede numpy's first load.
    from .checkpoint import CheckpointError
    from .train import NumericError

    try:
        return args.func(args)
    except (_Nonfinite, NumericError) as exc:
        print(f"error: non-finite values: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:  # includes manifest and config problems
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:  # includes FileNotFoundError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
