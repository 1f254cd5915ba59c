"""Model graph assembly, forward execution, freezing, and checkpoint persistence.

The backbone is a scaled-down residual network (stem conv, residual
stages, global average pooling) and the head is dense(head_units)+ReLU,
dropout, dense(output_units), sigmoid. Checkpoints are a single seekable
file: magic ``PNEU``, u32 version, u64 header length, canonical JSON
header (architecture, trainable flags, metadata, tensor directory), then
raw little-endian float32 blobs.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import LayerSpec
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PNEU"
CHECKPOINT_VERSION = 1

BACKBONE_PRESETS = {
    # preset: (stage channel list, minimum input side)
    "tiny": ([8, 16, 32], 32),
    "small": ([16, 32, 64, 128], 64),
}


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclass
class ModelConfig:
    input_shape: tuple = (3, 64, 64)  # [C, H, W]
    backbone_preset: str = "tiny"
    batchnorm: bool = True
    head_units: int = 50
    output_units: int = 1
    dropout_p: float = 0.5
    threshold: float = 0.5
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "backbone_preset": self.backbone_preset,
            "batchnorm": self.batchnorm,
            "head_units": self.head_units,
            "output_units": self.output_units,
            "dropout_p": self.dropout_p,
            "threshold": self.threshold,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        cfg = ModelConfig()
        for key, value in obj.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown model config key {key!r}")
            setattr(cfg, key, tuple(value) if key == "input_shape" else value)
        return cfg


@dataclass
class ModelGraph:
    layers: list  # ordered LayerSpec list
    parameters: dict  # name -> Tensor
    trainable: dict  # name -> bool
    input_shape: tuple  # (C, H, W)
    conv_feature_layer: str
    config: ModelConfig
    metadata: dict = field(default_factory=dict)

    def trainable_parameters(self) -> dict:
        return {n: t for n, t in self.parameters.items() if self.trainable.get(n)}

    def head_parameter_names(self) -> list:
        return [n for n in self.parameters if n.startswith("head.")]


# ---------------------------------------------------------------------------
# Construction


def _conv_spec(name, cin, cout, kernel, stride, padding):
    return LayerSpec("conv2d", name, {"in_channels": cin, "out_channels": cout,
                                      "kernel": kernel, "stride": stride,
                                      "padding": padding})


def build_model(config: ModelConfig, rng: np.random.Generator | None = None) -> ModelGraph:
    """Assemble backbone + head and initialize parameters.

    Layout: stem conv -> residual stages -> global_avg_pool ->
    dense(head_units, relu) -> dropout -> dense(output_units) -> sigmoid.
    The CAM target is the output of the last residual stage.
    """
    if config.backbone_preset not in BACKBONE_PRESETS:
        raise ValueError(f"unknown backbone preset {config.backbone_preset!r}; "
                         f"choose from {sorted(BACKBONE_PRESETS)}")
    stage_channels, min_side = BACKBONE_PRESETS[config.backbone_preset]
    c, h, w = config.input_shape
    if h < min_side or w < min_side:
        raise ValueError(
            f"input {h}x{w} too small for preset {config.backbone_preset!r} "
            f"(minimum {min_side}x{min_side} for its downsampling chain)")
    rng = rng or np.random.default_rng(config.seed)

    specs: list[LayerSpec] = []
    params: dict[str, Tensor] = {}

    def add_conv(name, cin, cout, kernel, stride, padding):
        specs.append(_conv_spec(name, cin, cout, kernel, stride, padding))
        _init_conv(params, name, cin, cout, kernel, rng)

    def add_bn(name, channels):
        specs.append(LayerSpec("batchnorm", name, {"channels": channels}))
        _init_bn(params, name, channels)

    stem_ch = stage_channels[0]
    add_conv("stem.conv", c, stem_ch, 3, 1, 1)
    if config.batchnorm:
        add_bn("stem.bn", stem_ch)
    specs.append(LayerSpec("relu", "stem.relu"))
    specs.append(LayerSpec("maxpool2d", "stem.pool", {"window": 2, "stride": 2}))

    cin = stem_ch
    last_stage = ""
    for i, cout in enumerate(stage_channels):
        name = f"stage{i + 1}.block"
        stride = 1 if i == 0 else 2
        specs.append(LayerSpec("residual_block", name,
                               {"in_channels": cin, "out_channels": cout,
                                "stride": stride, "batchnorm": config.batchnorm}))
        _init_residual(params, name, cin, cout, stride, config.batchnorm, rng)
        cin = cout
        last_stage = name

    specs.append(LayerSpec("global_avg_pool", "gap"))

    gap_features = cin
    specs.append(LayerSpec("dense", "head.fc1",
                           {"in_features": gap_features, "units": config.head_units}))
    params["head.fc1.weight"] = Tensor(
        L.kaiming_uniform((gap_features, config.head_units), gap_features, rng),
        requires_grad=True)
    params["head.fc1.bias"] = Tensor(np.zeros(config.head_units, np.float32),
                                     requires_grad=True)
    specs.append(LayerSpec("relu", "head.relu"))
    specs.append(LayerSpec("dropout", "head.dropout", {"p": config.dropout_p}))
    specs.append(LayerSpec("dense", "head.fc2",
                           {"in_features": config.head_units,
                            "units": config.output_units}))
    params["head.fc2.weight"] = Tensor(
        L.xavier_uniform((config.head_units, config.output_units),
                         config.head_units, config.output_units, rng),
        requires_grad=True)
    params["head.fc2.bias"] = Tensor(np.zeros(config.output_units, np.float32),
                                     requires_grad=True)
    specs.append(LayerSpec("sigmoid", "head.sigmoid"))

    trainable = {name: not name.endswith((".running_mean", ".running_var"))
                 for name in params}
    return ModelGraph(layers=specs, parameters=params, trainable=trainable,
                      input_shape=tuple(config.input_shape),
                      conv_feature_layer=last_stage, config=config,
                      metadata={"created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                                "seed": config.seed})


def _init_conv(params, name, cin, cout, kernel, rng):
    fan_in = cin * kernel * kernel
    params[f"{name}.weight"] = Tensor(
        L.kaiming_uniform((cout, cin, kernel, kernel), fan_in, rng),
        requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)


def _init_bn(params, name, channels):
    params[f"{name}.gamma"] = Tensor(np.ones(channels, np.float32), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(channels, np.float32), requires_grad=True)
    params[f"{name}.running_mean"] = Tensor(np.zeros(channels, np.float32))
    params[f"{name}.running_var"] = Tensor(np.ones(channels, np.float32))


def _init_residual(params, name, cin, cout, stride, batchnorm, rng):
    _init_conv(params, f"{name}.conv1", cin, cout, 3, rng)
    _init_conv(params, f"{name}.conv2", cout, cout, 3, rng)
    if batchnorm:
        _init_bn(params, f"{name}.bn1", cout)
        _init_bn(params, f"{name}.bn2", cout)
    if cin != cout or stride > 1:
        _init_conv(params, f"{name}.proj", cin, cout, 1, rng)
        if batchnorm:
            _init_bn(params, f"{name}.proj_bn", cout)


# ---------------------------------------------------------------------------
# Forward execution


def _apply_bn(model, name, x, mode):
    p = model.parameters
    out, new_mean, new_var = L.batchnorm(
        x, p[f"{name}.gamma"], p[f"{name}.beta"],
        p[f"{name}.running_mean"].data, p[f"{name}.running_var"].data, mode)
    if mode == "train":
        p[f"{name}.running_mean"] = Tensor(new_mean)
        p[f"{name}.running_var"] = Tensor(new_var)
    return out


def _apply_residual(model, spec, x, mode):
    out, buffer_updates = L.residual_block(
        x, model.parameters, spec.name, stride=spec.hyper["stride"],
        use_bn=spec.hyper.get("batchnorm", False), mode=mode)
    for name, data in buffer_updates.items():
        model.parameters[name] = Tensor(data)
    return out


def forward(model: ModelGraph, x: Tensor, mode: str = "eval",
            rng: np.random.Generator | None = None,
            capture: set | None = None):
    """Run the graph on a [N,C,H,W] batch.

    Returns (output, captured) where captured maps requested layer names to
    their activations; the pre-sigmoid logit is always captured as "logit".
    """
    if x.data.ndim != 4:
        raise ValueError(f"forward expects [N,C,H,W], got {x.shape}")
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"input shape {tuple(x.shape[1:])} does not match "
                         f"model input {tuple(model.input_shape)}")
    capture = capture or set()
    captured = {}
    p = model.parameters
    out = x
    for spec in model.layers:
        kind = spec.kind
        if kind == "conv2d":
            out = L.conv2d(out, p[f"{spec.name}.weight"], p[f"{spec.name}.bias"],
                           stride=spec.hyper["stride"], padding=spec.hyper["padding"])
        elif kind == "batchnorm":
            out = _apply_bn(model, spec.name, out, mode)
        elif kind == "relu":
            out = L.relu(out)
        elif kind == "sigmoid":
            captured["logit"] = out
            out = L.sigmoid(out)
        elif kind == "maxpool2d":
            out = L.maxpool2d(out, spec.hyper["window"], spec.hyper["stride"])
        elif kind == "residual_block":
            out = _apply_residual(model, spec, out, mode)
        elif kind == "global_avg_pool":
            out = L.global_avg_pool(out)
        elif kind == "dense":
            out = L.dense(out, p[f"{spec.name}.weight"], p[f"{spec.name}.bias"])
        elif kind == "dropout":
            out = L.dropout(out, spec.hyper["p"], mode, rng)
        elif kind == "flatten":
            out = T.reshape(out, (out.shape[0], -1))
        else:  # unreachable: LayerSpec validates kinds
            raise ValueError(f"cannot execute layer kind {kind!r}")
        if spec.name in capture:
            captured[spec.name] = out
    return out, captured


def predict(model: ModelGraph, image: Tensor, threshold: float = 0.5):
    """Classify a single [C,H,W] image; positive (PNEUMONIA) iff p >= threshold."""
    if tuple(image.shape) != tuple(model.input_shape):
        raise ValueError(f"image shape {tuple(image.shape)} does not match "
                         f"model input {tuple(model.input_shape)}")
    batch = Tensor(image.data[None])
    out, _ = forward(model, batch, mode="eval")
    prob = float(out.data.reshape(-1)[0])
    label = "PNEUMONIA" if prob >= threshold else "NORMAL"
    return prob, label


# ---------------------------------------------------------------------------
# Freezing


def freeze_backbone(model: ModelGraph) -> ModelGraph:
    """Mark backbone parameters non-trainable; head stays trainable.

    Gradients still flow through frozen layers (Grad-CAM needs them); only
    the optimizer consults the trainable flags.
    """
    for name in model.parameters:
        if name.endswith((".running_mean", ".running_var")):
            model.trainable[name] = False
        else:
            model.trainable[name] = name.startswith("head.")
    return model


def unfreeze_all(model: ModelGraph) -> ModelGraph:
    for name in model.parameters:
        model.trainable[name] = not name.endswith((".running_mean", ".running_var"))
    return model


# ---------------------------------------------------------------------------
# Checkpoint persistence


def _header_json(model: ModelGraph, tensor_dir: list) -> bytes:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": {
            "input_shape": list(model.input_shape),
            "conv_feature_layer": model.conv_feature_layer,
            "layers": [spec.to_json() for spec in model.layers],
            "config": model.config.to_json(),
        },
        "trainable": {k: bool(v) for k, v in sorted(model.trainable.items())},
        "metadata": model.metadata,
        "tensors": tensor_dir,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: ModelGraph, path) -> None:
    names = sorted(model.parameters)
    tensor_dir = []
    offset = 0
    blobs = []
    for name in names:
        t = model.parameters[name]
        if t.data.dtype != np.float32:
            raise CheckpointError(f"checkpoint stores float32 only; "
                                  f"{name} has dtype {t.data.dtype}")
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        tensor_dir.append({"name": name, "shape": list(t.shape),
                           "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)

    header = _header_json(model, tensor_dir)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _read_header(fh):
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic: expected {CHECKPOINT_MAGIC!r}, "
                              f"got {magic!r}")
    raw = fh.read(4)
    if len(raw) < 4:
        raise CheckpointError("truncated checkpoint: missing version")
    (version,) = struct.unpack("<I", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} "
                              f"(this build reads version {CHECKPOINT_VERSION})")
    raw = fh.read(8)
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint: missing header length")
    (header_len,) = struct.unpack("<Q", raw)
    header_bytes = fh.read(header_len)
    if len(header_bytes) != header_len:
        raise CheckpointError("truncated checkpoint: incomplete header")
    try:
        return json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc


def load_checkpoint(path) -> ModelGraph:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        data = fh.read()

    arch = header["architecture"]
    config = ModelConfig.from_json(arch["config"])
    specs = [LayerSpec.from_json(obj) for obj in arch["layers"]]
    params = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) * 4
        if nbytes != expected:
            raise CheckpointError(
                f"tensor {entry['name']}: directory says {nbytes} bytes but "
                f"shape {shape} needs {expected}")
        blob = data[start:start + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(f"truncated checkpoint: tensor "
                                  f"{entry['name']} blob incomplete")
        arr = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True)

    trainable = {k: bool(v) for k, v in header["trainable"].items()}
    for name, t in params.items():
        if name.endswith((".running_mean", ".running_var")):
            t.requires_grad = False

    model = ModelGraph(layers=specs, parameters=params, trainable=trainable,
                       input_shape=tuple(arch["input_shape"]),
                       conv_feature_layer=arch["conv_feature_layer"],
                       config=config, metadata=dict(header.get("metadata", {})))
    _check_parameters_exist(model)
    return model


def _check_parameters_exist(model: ModelGraph) -> None:
    for spec in model.layers:
        if spec.kind in ("conv2d", "dense"):
            for suffix in (".weight", ".bias"):
                if spec.name + suffix not in model.parameters:
                    raise CheckpointError(
                        f"layer {spec.name} references missing parameter "
                        f"{spec.name + suffix}")


# ---------------------------------------------------------------------------
# Transfer: pretrain checkpoints carry backbone tensors only


def save_backbone_checkpoint(model: ModelGraph, path) -> None:
    """Persist the backbone (everything outside head.*) as a transfer source."""
    backbone_layers = []
    for spec in model.layers:
        if spec.name.startswith("head.") or spec.kind == "global_avg_pool":
            break
        backbone_layers.append(spec)
    backbone = ModelGraph(
        layers=backbone_layers,
        parameters={n: t for n, t in model.parameters.items()
                    if not n.startswith("head.")},
        trainable={n: v for n, v in model.trainable.items()
                   if not n.startswith("head.")},
        input_shape=model.input_shape,
        conv_feature_layer=model.conv_feature_layer,
        config=model.config,
        metadata={**model.metadata, "backbone_only": True},
    )
    save_checkpoint(backbone, path)


def load_backbone_into(model: ModelGraph, path) -> ModelGraph:
    """Copy backbone weights from a transfer checkpoint into a built model."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        data = fh.read()
    if not header.get("metadata", {}).get("backbone_only"):
        raise CheckpointError("not a backbone checkpoint (metadata.backbone_only missing)")
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in model.parameters:
            raise CheckpointError(f"backbone tensor {name} has no slot in the model")
        shape = tuple(entry["shape"])
        if shape != tuple(model.parameters[name].shape):
            raise CheckpointError(f"backbone tensor {name}: shape {shape} != "
                                  f"model shape {tuple(model.parameters[name].shape)}")
        blob = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise CheckpointError(f"truncated checkpoint: tensor {name} blob incomplete")
        arr = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        old = model.parameters[name]
        model.parameters[name] = Tensor(arr, requires_grad=old.requires_grad)
    model.metadata["transfer_source"] = str(path)
    return model


def count_parameters(model: ModelGraph, trainable_only: bool = False) -> int:
    total = 0
    for name, t in model.parameters.items():
        if trainable_only and not model.trainable.get(name):
            continue
        total += t.size
    return total
