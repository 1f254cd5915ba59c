"""Command-line entry point: pretrain, train, evaluate, predict, cam, serve, plot.

Config comes from an optional JSON file merged with flag overrides (flags
win); the effective config is echoed to stdout before any work starts.
Exit codes: 0 success, 2 missing input files, 3 validation failures.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .datapipe import (AugmentationConfig, ArrayDataset, DecodeError,
                       DirectoryDataset, scan_dataset, shuffled_indices)
from .explain import grad_cam, heatmap_to_csv, overlay_to_png, render_overlay
from .metrics import evaluate_scores, export_report, roc_curve
from .model import (CheckpointError, ModelConfig, build_model, forward,
                    freeze_backbone, load_backbone_into, load_checkpoint,
                    predict, save_backbone_checkpoint, save_checkpoint)
from .plots import (parse_history_csv, parse_roc_csv, render_history_chart,
                    render_roc_chart)
from .service import ServiceState, create_app
from .synthetic import make_shape_dataset
from .training import (FocalLossParams, RmsPropState, TrainConfig, bce_loss,
                       rmsprop_step, train)

EXIT_OK = 0
EXIT_MISSING = 2
EXIT_INVALID = 3

DEFAULT_CONFIG = {
    "model": {"input_shape": [3, 64, 64], "backbone_preset": "tiny",
              "batchnorm": True, "head_units": 50, "dropout_p": 0.5,
              "threshold": 0.5},
    "train": {"batch_size": 16, "max_epochs": 100, "seed": 0, "loss": "focal",
              "alpha": 0.25, "gamma": 2.0, "balanced": True, "lr": 1e-3,
              "rho": 0.9, "epsilon": 1e-7, "patience": 5, "min_delta": 1e-4,
              "augment": True, "val_fraction": 0.1},
    "augment": {"hflip_prob": 0.5, "rotation_max_degrees": 10.0},
    "pretrain": {"images": 480, "epochs": 8, "lr": 2e-3, "seed": 7,
                 "image_size": 64},
}


def load_config(path=None, overrides=None) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        for section, values in user.items():
            if section not in config:
                raise ValueError(f"unknown config section {section!r}")
            for key, value in values.items():
                if key not in config[section]:
                    raise ValueError(f"unknown config key {section}.{key}")
                config[section][key] = value
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".")
        config[section][key] = value
    return config


def model_config_from(config: dict, output_units: int = 1) -> ModelConfig:
    m = config["model"]
    return ModelConfig(input_shape=tuple(m["input_shape"]),
                       backbone_preset=m["backbone_preset"],
                       batchnorm=m["batchnorm"], head_units=m["head_units"],
                       output_units=output_units, dropout_p=m["dropout_p"],
                       threshold=m["threshold"], seed=config["train"]["seed"])


def train_config_from(config: dict, checkpoint_path=None) -> TrainConfig:
    t = config["train"]
    return TrainConfig(batch_size=t["batch_size"], max_epochs=t["max_epochs"],
                       seed=t["seed"], loss=t["loss"],
                       focal=FocalLossParams(alpha=t["alpha"], gamma=t["gamma"],
                                             balanced=t["balanced"]),
                       lr=t["lr"], rho=t["rho"], epsilon=t["epsilon"],
                       patience=t["patience"], min_delta=t["min_delta"],
                       augment=t["augment"], checkpoint_path=checkpoint_path)


def _echo(config: dict, command: str) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True))


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# pretrain


def run_pretrain(config: dict, out_dir: Path) -> Path:
    """Train backbone + temporary 3-way head on the synthetic shape task."""
    p = config["pretrain"]
    size = p["image_size"]
    images, labels = make_shape_dataset(p["images"], size, seed=p["seed"])
    n_val = max(len(images) // 6, 1)
    ds = ArrayDataset({"train": (list(images[:-n_val]), labels[:-n_val]),
                       "val": (list(images[-n_val:]), labels[-n_val:])},
                      channels=config["model"]["input_shape"][0])

    cfg = model_config_from(config, output_units=len(set(labels.tolist())))
    cfg.input_shape = (config["model"]["input_shape"][0], size, size)
    cfg.seed = p["seed"]
    model = build_model(cfg, rng=np.random.default_rng(p["seed"]))

    opt = RmsPropState(lr=p["lr"])
    rng = np.random.default_rng(p["seed"])
    classes = cfg.output_units
    eye = np.eye(classes, dtype=np.int64)

    def val_accuracy():
        correct = n = 0
        for xb, yb in ds.batches("val", config["train"]["batch_size"]):
            out, _ = forward(model, xb, mode="eval")
            correct += int(np.sum(out.data.argmax(axis=1) == yb))
            n += len(yb)
        return correct / n

    best_acc = -1.0
    best_weights = None
    for epoch in range(1, p["epochs"] + 1):
        total = correct = n = 0
        for xb, yb in ds.batches("train", config["train"]["batch_size"],
                                 shuffle_seed=p["seed"], epoch=epoch):
            with T.Tape() as tape:
                out, _ = forward(model, xb, mode="train", rng=rng)
                onehot = eye[yb].reshape(-1)
                loss = bce_loss(T.reshape(out, (out.data.size,)), onehot)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise ValueError(f"pretraining diverged at epoch {epoch}")
            grads = T.backward(tape, loss)
            rmsprop_step(model, grads, opt)
            total += loss_value * len(yb)
            correct += int(np.sum(out.data.argmax(axis=1) == yb))
            n += len(yb)
        acc = val_accuracy()
        if acc > best_acc:
            best_acc = acc
            best_weights = {k: t.data.copy() for k, t in model.parameters.items()}
        print(f"pretrain epoch {epoch}: loss {total / n:.4f} "
              f"acc {correct / n:.3f} val acc {acc:.3f}")

    for key, data in best_weights.items():
        model.parameters[key].data = data

    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "backbone.ckpt"
    model.metadata["pretrain_val_acc"] = best_acc
    save_backbone_checkpoint(model, path)
    print(f"pretrain best val acc {best_acc:.3f}; wrote {path}")
    return path


# ---------------------------------------------------------------------------
# train


def _directory_dataset(config: dict, data_dir) -> DirectoryDataset:
    index = scan_dataset(_require_file(data_dir, "dataset directory"))
    _, h, w = config["model"]["input_shape"]
    aug = AugmentationConfig(
        hflip_prob=config["augment"]["hflip_prob"],
        rotation_max_degrees=config["augment"]["rotation_max_degrees"])
    ds = DirectoryDataset(index, image_size=(h, w),
                          channels=config["model"]["input_shape"][0],
                          augmentation=aug,
                          augment_seed=config["train"]["seed"])
    if not ds.splits.get("val") or len(ds.splits["val"][0]) == 0:
        _carve_validation(ds, config["train"]["val_fraction"],
                          config["train"]["seed"])
    return ds


def _carve_validation(ds, fraction: float, seed: int) -> None:
    paths, labels = ds.splits["train"]
    n_val = max(1, int(round(len(paths) * fraction)))
    order = shuffled_indices(len(paths), seed)
    val_idx = set(order[:n_val])
    ds.splits["val"] = ([p for i, p in enumerate(paths) if i in val_idx],
                        labels[[i for i in range(len(paths)) if i in val_idx]])
    ds.splits["train"] = ([p for i, p in enumerate(paths) if i not in val_idx],
                          labels[[i for i in range(len(paths)) if i not in val_idx]])


def run_train(config: dict, data_dir, out_dir: Path, backbone=None,
              freeze: bool = True) -> Path:
    ds = _directory_dataset(config, data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(model_config_from(config))
    if backbone is not None:
        load_backbone_into(model, _require_file(backbone, "backbone checkpoint"))
        if freeze:
            freeze_backbone(model)
    ckpt_path = out_dir / "model.ckpt"
    model, history = train(model, ds, train_config_from(config, ckpt_path))
    if not ckpt_path.exists():  # no improvement ever recorded
        save_checkpoint(model, ckpt_path)
    history.write_csv(out_dir / "history.csv")
    last = history.records[-1]
    print(f"trained {len(history.records)} epochs; "
          f"best val loss {min(r.val_loss for r in history.records):.6f}; "
          f"final val acc {last.val_acc:.4f}")
    print(f"wrote {ckpt_path} and {out_dir / 'history.csv'}")
    return ckpt_path


# ---------------------------------------------------------------------------
# evaluate


def run_evaluate(config: dict, data_dir, checkpoint, out_dir: Path) -> dict:
    model = load_checkpoint(_require_file(checkpoint, "checkpoint"))
    index = scan_dataset(_require_file(data_dir, "dataset directory"))
    _, h, w = model.input_shape
    ds = DirectoryDataset(index, image_size=(h, w), channels=model.input_shape[0])
    scores, labels = [], []
    for xb, yb in ds.batches("test", config["train"]["batch_size"]):
        out, _ = forward(model, xb, mode="eval")
        scores.extend(float(v) for v in out.data.reshape(-1))
        labels.extend(int(v) for v in yb)
    threshold = config["model"]["threshold"]
    report = evaluate_scores(scores, labels, threshold)
    try:
        curve = roc_curve(scores, labels)
    except ValueError:
        curve = None
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = export_report(report, curve, out_dir)
    print(json.dumps(report.to_json(), sort_keys=True))
    print(f"wrote {paths['report']}" +
          (f" and {paths['roc']}" if "roc" in paths else ""))
    return report.to_json()


# ---------------------------------------------------------------------------
# predict / cam


def run_predict(checkpoint, image_path, threshold: float,
                always_cam: bool = False) -> dict:
    from .service import infer_bytes  # shared inference path with the API
    model = load_checkpoint(_require_file(checkpoint, "checkpoint"))
    payload = _require_file(image_path, "image").read_bytes()
    state = ServiceState(model=model, threshold=threshold)
    result = infer_bytes(state, payload, always_cam=always_cam)
    print(json.dumps(result, sort_keys=True))
    return result


def run_cam(checkpoint, image_path, out_path, heatmap_csv=None,
            blend: float = 0.4) -> None:
    from .datapipe import decode_image, resize_bilinear, to_tensor
    model = load_checkpoint(_require_file(checkpoint, "checkpoint"))
    payload = _require_file(image_path, "image").read_bytes()
    img = decode_image(payload)
    _, h, w = model.input_shape
    resized = resize_bilinear(img, w, h)
    tensor_img = to_tensor(resized, model.input_shape[0])
    heatmap = grad_cam(model, tensor_img)
    overlay = render_overlay(resized, heatmap, blend=blend)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(overlay_to_png(overlay))
    print(f"wrote {out_path}")
    if heatmap_csv is not None:
        Path(heatmap_csv).write_text(heatmap_to_csv(heatmap))
        print(f"wrote {heatmap_csv}")


# ---------------------------------------------------------------------------
# plot


def run_plot(history_csv=None, roc_csv=None, out_dir: Path = Path("out")) -> list:
    written = []
    out_dir.mkdir(parents=True, exist_ok=True)
    if history_csv is not None:
        cols = parse_history_csv(_require_file(history_csv, "history csv"))
        loss_svg = render_history_chart(cols["epoch"], cols["train_loss"],
                                        cols["val_loss"],
                                        "Train vs validation loss", "loss")
        acc_svg = render_history_chart(cols["epoch"], cols["train_acc"],
                                       cols["val_acc"],
                                       "Train vs validation accuracy",
                                       "accuracy")
        for name, svg in (("history_loss.svg", loss_svg),
                          ("history_acc.svg", acc_svg)):
            path = out_dir / name
            path.write_text(svg)
            written.append(path)
    if roc_csv is not None:
        fprs, tprs = parse_roc_csv(_require_file(roc_csv, "roc csv"))
        path = out_dir / "roc.svg"
        path.write_text(render_roc_chart(fprs, tprs))
        written.append(path)
    if not written:
        raise ValueError("plot needs --history and/or --roc")
    for path in written:
        print(f"wrote {path}")
    return written


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pneunet",
        description="Pneumonia X-ray classifier with region highlighting")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out-dir", default="out",
                        help="artifact directory (default ./out)")
    parser.add_argument("--seed", type=int, help="override train.seed")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", help="train a backbone on synthetic shapes")

    p_train = sub.add_parser("train", help="train on an X-ray directory")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--backbone", help="transfer-source checkpoint")
    p_train.add_argument("--no-freeze", action="store_true",
                         help="leave backbone trainable after transfer")
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--loss", choices=["focal", "bce"])

    p_eval = sub.add_parser("evaluate", help="evaluate on the test split")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--threshold", type=float)

    p_pred = sub.add_parser("predict", help="classify one image")
    p_pred.add_argument("--image", required=True)
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--threshold", type=float)
    p_pred.add_argument("--always-cam", action="store_true")

    p_cam = sub.add_parser("cam", help="write a Grad-CAM overlay PNG")
    p_cam.add_argument("--image", required=True)
    p_cam.add_argument("--checkpoint", required=True)
    p_cam.add_argument("--out", help="overlay path (default out-dir/overlay.png)")
    p_cam.add_argument("--heatmap-csv", help="also dump the raw grid as CSV")

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--checkpoint",
                         default=os.environ.get("PNEUNET_CHECKPOINT"))
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--threshold", type=float)
    p_serve.add_argument("--static-dir", help="built UI bundle to serve at /")

    p_plot = sub.add_parser("plot", help="render CSV artifacts to SVG")
    p_plot.add_argument("--history", help="history.csv from train")
    p_plot.add_argument("--roc", help="roc.csv from evaluate")

    p_cfg = sub.add_parser("config", help="config utilities")
    p_cfg.add_argument("--print-default", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {"train.seed": getattr(args, "seed", None)}
        if args.command == "train":
            overrides.update({"train.batch_size": args.batch_size,
                              "train.max_epochs": args.epochs,
                              "train.lr": args.lr,
                              "train.loss": args.loss})
        if args.command in ("evaluate", "predict", "serve") and \
                getattr(args, "threshold", None) is not None:
            overrides["model.threshold"] = args.threshold
        config = load_config(args.config, overrides)
        out_dir = Path(args.out_dir)

        if args.command == "config":
            print(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True))
            return EXIT_OK

        _echo(config, args.command)

        if args.command == "pretrain":
            run_pretrain(config, out_dir)
        elif args.command == "train":
            run_train(config, args.data, out_dir, backbone=args.backbone,
                      freeze=not args.no_freeze)
        elif args.command == "evaluate":
            run_evaluate(config, args.data, args.checkpoint, out_dir)
        elif args.command == "predict":
            run_predict(args.checkpoint, args.image,
                        config["model"]["threshold"], args.always_cam)
        elif args.command == "cam":
            out = args.out or (out_dir / "overlay.png")
            run_cam(args.checkpoint, args.image, out, args.heatmap_csv)
        elif args.command == "plot":
            run_plot(args.history, args.roc, out_dir)
        elif args.command == "serve":
            if args.checkpoint is None:
                raise ValueError("serve needs --checkpoint or PNEUNET_CHECKPOINT")
            model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
            state = ServiceState(model=model,
                                 threshold=config["model"]["threshold"])
            import uvicorn
            uvicorn.run(create_app(state, static_dir=args.static_dir),
                        host=args.host, port=args.port)
        return EXIT_OK
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, CheckpointError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
