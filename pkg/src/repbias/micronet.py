"""A small convolutional network with exact forward and backward passes.

Layers are valid (unpadded) convolutions, ReLU, Flatten and fully-connected
maps. Every pass is batched internally; single images are handled as a batch
of one. The probe layer is a Conv layer whose *output* (before any following
ReLU) is the feature map ``x`` used for attribution.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteLoss, ShapeMismatch, ValidationError
from .tensor import read_tensor, tensor_to_bytes


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FullyConnected:
    in_features: int
    out_features: int


Layer = Conv | ReLU | Flatten | FullyConnected


def _layer_to_dict(layer: Layer) -> dict:
    if isinstance(layer, Conv):
        return {"kind": "conv", "kernel": layer.kernel, "in_channels": layer.in_channels,
                "out_channels": layer.out_channels, "stride": layer.stride}
    if isinstance(layer, FullyConnected):
        return {"kind": "fc", "in_features": layer.in_features, "out_features": layer.out_features}
    if isinstance(layer, ReLU):
        return {"kind": "relu"}
    return {"kind": "flatten"}


def _layer_from_dict(d: dict) -> Layer:
    kind = d["kind"]
    if kind == "conv":
        return Conv(int(d["kernel"]), int(d["in_channels"]), int(d["out_channels"]), int(d.get("stride", 1)))
    if kind == "fc":
        return FullyConnected(int(d["in_features"]), int(d["out_features"]))
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    raise ValidationError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class NetworkConfig:
    """Layer stack plus the input shape ``(C, H, W)`` and probe layer index.

    ``probe_layer`` indexes ``layers`` and must point at a Conv layer; when
    omitted the first Conv layer is used.
    """

    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    attribute_count: int
    probe_layer: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.probe_layer is None:
            convs = [k for k, layer in enumerate(self.layers) if isinstance(layer, Conv)]
            if not convs:
                raise ValidationError("network has no Conv layer to probe")
            object.__setattr__(self, "probe_layer", convs[0])
        self.output_shapes()  # validates composition

    def output_shapes(self) -> list[tuple[int, ...]]:
        if self.attribute_count <= 0:
            raise ValidationError("attribute_count must be positive")
        if not 0 <= self.probe_layer < len(self.layers) or not isinstance(self.layers[self.probe_layer], Conv):
            raise ValidationError(f"probe_layer {self.probe_layer} is not a Conv layer")
        shape: tuple[int, ...] = self.input_shape
        shapes = []
        for k, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeMismatch(f"layer {k}: conv expects {layer.in_channels} channels, got {shape}")
                c, h, w = shape
                ho = (h - layer.kernel) // layer.stride + 1
                wo = (w - layer.kernel) // layer.stride + 1
                if layer.kernel <= 0 or layer.stride <= 0 or ho <= 0 or wo <= 0:
                    raise ShapeMismatch(f"layer {k}: kernel {layer.kernel} does not fit {shape}")
                shape = (layer.out_channels, ho, wo)
            elif isinstance(layer, FullyConnected):
                if shape != (layer.in_features,):
                    raise ShapeMismatch(f"layer {k}: fc expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            shapes.append(shape)
        if shape != (self.attribute_count,):
            raise ShapeMismatch(f"final output {shape} != ({self.attribute_count},)")
        return shapes

    @property
    def probe_shape(self) -> tuple[int, ...]:
        return self.output_shapes()[self.probe_layer]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [_layer_to_dict(layer) for layer in self.layers],
            "attribute_count": self.attribute_count,
            "probe_layer": self.probe_layer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(tuple(d["input_shape"]), tuple(_layer_from_dict(x) for x in d["layers"]),
                   int(d["attribute_count"]), d.get("probe_layer"))


def default_config(attribute_count: int, image_size: int = 16, channels: int = 1) -> NetworkConfig:
    """Conv3x3(8)-ReLU-Conv3x3(16)-ReLU-Flatten-FC(32)-ReLU-FC(n)."""
    side = image_size - 4
    layers = (
        Conv(3, channels, 8), ReLU(),
        Conv(3, 8, 16), ReLU(),
        Flatten(),
        FullyConnected(16 * side * side, 32), ReLU(),
        FullyConnected(32, attribute_count),
    )
    return NetworkConfig((channels, image_size, image_size), layers, attribute_count)


# -- network ------------------------------------------------------------------


class MicroNet:
    """Network parameters bound to a :class:`NetworkConfig`.

    ``params[k]`` is ``{"weight": ..., "bias": ...}`` for Conv/FC layers and
    ``None`` otherwise. Treat instances as immutable; :func:`train` returns a
    new one.
    """

    def __init__(self, config: NetworkConfig, params: Sequence[dict | None]):
        self.config = config
        self.params = list(params)
        for k, layer in enumerate(config.layers):
            p = self.params[k]
            if isinstance(layer, Conv):
                want = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            elif isinstance(layer, FullyConnected):
                want = (layer.out_features, layer.in_features)
            else:
                if p is not None:
                    raise ValidationError(f"layer {k} takes no parameters")
                continue
            if p is None or p["weight"].shape != want or p["bias"].shape != (want[0],):
                raise ShapeMismatch(f"layer {k}: expected weight {want}")

    @classmethod
    def initialize(cls, config: NetworkConfig, seed=0, scale: float = 1.0) -> "MicroNet":
        """Uniform(-s, s) init with s = scale / sqrt(fan_in), biases included."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params: list[dict | None] = []
        for layer in config.layers:
            if isinstance(layer, Conv):
                shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                fan_in = layer.in_channels * layer.kernel * layer.kernel
            elif isinstance(layer, FullyConnected):
                shape = (layer.out_features, layer.in_features)
                fan_in = layer.in_features
            else:
                params.append(None)
                continue
            s = scale / np.sqrt(fan_in)
            params.append({"weight": rng.uniform(-s, s, size=shape), "bias": rng.uniform(-s, s, size=shape[0])})
        return cls(config, params)

    @classmethod
    def zeros(cls, config: NetworkConfig, bias=None) -> "MicroNet":
        net = cls.initialize(config, 0)
        for k, p in enumerate(net.params):
            if p is not None:
                p["weight"][...] = 0.0
                p["bias"][...] = 0.0
        if bias is not None:
            last = max(k for k, p in enumerate(net.params) if p is not None)
            net.params[last]["bias"][...] = bias
        return net

    def copy(self) -> "MicroNet":
        return MicroNet(self.config, copy.deepcopy(self.params))

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for p in self.params:
            if p is not None:
                out.extend([p["weight"], p["bias"]])
        return out

    @property
    def attribute_count(self) -> int:
        return self.config.attribute_count


# -- layer primitives ---------------------------------------------------------


def _conv_windows(x, kernel, stride):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv_forward(x, weight, bias, stride=1):
    k = weight.shape[-1]
    win = _conv_windows(x, k, stride)  # (B, C, Ho, Wo, k, k)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias[None, :, None, None]


def conv_backward_input(grad, weight, in_shape, stride=1):
    b, _, ho, wo = grad.shape
    o, c, k, _ = weight.shape
    gx = np.zeros((b,) + tuple(in_shape), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(grad, weight[:, :, i, j], axes=([1], [0]))  # (B, Ho, Wo, C)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    return gx


def conv_backward_params(grad, x, kernel, stride=1):
    win = _conv_windows(x, kernel, stride)
    gw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
    return gw, grad.sum(axis=(0, 2, 3))


def _layer_forward(layer, p, x):
    if isinstance(layer, Conv):
        return conv_forward(x, p["weight"], p["bias"], layer.stride)
    if isinstance(layer, FullyConnected):
        return x @ p["weight"].T + p["bias"]
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    return x.reshape(x.shape[0], -1)


def _layer_backward(layer, p, x_in, grad, want_params):
    """Return (grad wrt layer input, param grads or None)."""
    if isinstance(layer, Conv):
        gx = conv_backward_input(grad, p["weight"], x_in.shape[1:], layer.stride)
        gp = None
        if want_params:
            gw, gb = conv_backward_params(grad, x_in, layer.kernel, layer.stride)
            gp = {"weight": gw, "bias": gb}
        return gx, gp
    if isinstance(layer, FullyConnected):
        gx = grad @ p["weight"]
        gp = {"weight": grad.T @ x_in, "bias": grad.sum(axis=0)} if want_params else None
        return gx, gp
    if isinstance(layer, ReLU):
        return grad * (x_in > 0.0), None
    return grad.reshape(x_in.shape), None


# -- forward / backward -------------------------------------------------------


@dataclass
class ActivationTrace:
    """Input plus every layer output of one forward pass.

    Arrays carry a leading batch axis; ``batched`` records whether the caller
    passed a single image, in which case the accessors drop that axis.
    """

    input: np.ndarray
    outputs: list[np.ndarray]
    probe_layer: int
    batched: bool = False

    def _view(self, arr):
        return arr if self.batched else arr[0]

    @property
    def scores(self) -> np.ndarray:
        return self._view(self.outputs[-1])

    @property
    def probe(self) -> np.ndarray:
        """Probe-layer feature map ``x``."""
        return self._view(self.outputs[self.probe_layer])

    def layer_output(self, k: int) -> np.ndarray:
        return self._view(self.outputs[k])

    def __len__(self):
        return self.input.shape[0]


def _as_batch(net: MicroNet, images):
    arr = np.asarray(images, dtype=np.float64)
    in_shape = net.config.input_shape
    if arr.shape == in_shape:
        return arr[None], False
    if arr.ndim == len(in_shape) + 1 and arr.shape[1:] == in_shape:
        return arr, True
    raise ShapeMismatch(f"image shape {arr.shape} does not match network input {in_shape}")


def forward(net: MicroNet, image) -> ActivationTrace:
    x, batched = _as_batch(net, image)
    outputs = []
    h = x
    for layer, p in zip(net.config.layers, net.params):
        h = _layer_forward(layer, p, h)
        outputs.append(h)
    return ActivationTrace(x, outputs, net.config.probe_layer, batched)


def forward_from(net: MicroNet, layer_index: int, activation) -> np.ndarray:
    """Scores obtained by feeding ``activation`` as the output of ``layer_index``.

    Accepts one activation or a batch; returns scores with matching batching.
    """
    shapes = net.config.output_shapes()
    arr = np.asarray(activation, dtype=np.float64)
    single = arr.shape == shapes[layer_index]
    h = arr[None] if single else arr
    for layer, p in zip(net.config.layers[layer_index + 1:], net.params[layer_index + 1:]):
        h = _layer_forward(layer, p, h)
    return h[0] if single else h


def _backward(net, trace, grad_out, stop, want_params):
    """Backpropagate ``grad_out`` (wrt scores) down to the output of layer ``stop``.

    ``stop = -1`` goes all the way to the input. Returns (grad, param grads).
    """
    layers = net.config.layers
    grads: list[dict | None] = [None] * len(layers)
    g = grad_out
    for k in range(len(layers) - 1, stop, -1):
        x_in = trace.outputs[k - 1] if k > 0 else trace.input
        g, gp = _layer_backward(layers[k], net.params[k], x_in, g, want_params)
        grads[k] = gp
    return g, grads


def grad_at_probe(net: MicroNet, trace: ActivationTrace, attr_index: int) -> np.ndarray:
    """Gradient of score ``attr_index`` wrt the probe-layer output.

    ReLU gates come from the stored trace, so the result is the exact local
    linear map of the activation region the image falls in.
    """
    n = net.attribute_count
    if not 0 <= attr_index < n:
        raise ValidationError(f"attribute index {attr_index} out of range [0, {n})")
    if trace.probe_layer != net.config.probe_layer:
        raise ValidationError("trace was produced with a different probe layer")
    seed = np.zeros((len(trace), n))
    seed[:, attr_index] = 1.0
    g, _ = _backward(net, trace, seed, net.config.probe_layer, want_params=False)
    return g if trace.batched else g[0]


def predict_sign(net: MicroNet, image, attr_index: int):
    """+1/-1 prediction; a score of exactly 0 counts as +1."""
    scores = forward(net, image).scores
    y = scores[..., attr_index]
    out = np.where(y >= 0.0, 1, -1)
    return int(out) if np.ndim(out) == 0 else out


# -- losses and training -------------------------------------------------------

LOGISTIC = "logistic"
SQUARED = "squared"


@dataclass(frozen=True)
class LossSpec:
    kinds: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        bad = [k for k in self.kinds if k not in (LOGISTIC, SQUARED)]
        if bad:
            raise ValidationError(f"unknown loss kinds {bad}")

    @classmethod
    def logistic(cls, n: int) -> "LossSpec":
        return cls((LOGISTIC,) * n)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.init_scale <= 0 or self.epochs < 0:
            raise ValidationError("training hyperparameters must be positive")


def loss_terms(scores, targets, loss: LossSpec):
    """Per-sample summed loss and d(loss)/d(scores), elementwise per attribute."""
    logistic = np.array([k == LOGISTIC for k in loss.kinds])
    margin = scores * targets
    values = np.where(logistic, np.logaddexp(0.0, -margin), (targets - scores) ** 2)
    # d/dY log(1 + exp(-Y Y*)) = -Y* sigmoid(-Y Y*)
    sig = np.exp(-np.logaddexp(0.0, margin))
    grads = np.where(logistic, -targets * sig, 2.0 * (scores - targets))
    return values.sum(axis=1), grads


def loss_and_grads(net: MicroNet, images, targets, loss: LossSpec):
    """Mean loss over the batch and its gradient for every parameter."""
    trace = forward(net, images)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(trace), -1)
    values, dscore = loss_terms(trace.outputs[-1], targets, loss)
    dscore = dscore / len(trace)
    _, grads = _backward(net, trace, dscore, -1, want_params=True)
    return float(values.mean()), grads


def mean_loss(net: MicroNet, images, targets, loss: LossSpec) -> float:
    scores = forward(net, images).outputs[-1]
    values, _ = loss_terms(scores, np.asarray(targets, dtype=np.float64), loss)
    return float(values.mean())


def train(net: MicroNet, images, annotations, loss: LossSpec, cfg: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> MicroNet:
    """Plain minibatch SGD; returns a new network, leaving ``net`` untouched."""
    images, _ = _as_batch(net, images)
    targets = np.asarray(annotations, dtype=np.float64)
    if targets.shape != (images.shape[0], net.attribute_count):
        raise ShapeMismatch(f"annotations {targets.shape} vs ({images.shape[0]}, {net.attribute_count})")
    if len(loss.kinds) != net.attribute_count:
        raise ValidationError("one loss kind per attribute required")
    for a, kind in enumerate(loss.kinds):
        if kind == LOGISTIC and not np.all(np.isin(targets[:, a], (-1.0, 1.0))):
            raise ValidationError(f"attribute {a}: logistic loss needs annotations in {{-1, +1}}")

    out = net.copy()
    rng = np.random.default_rng(cfg.seed)
    count = images.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(count)
        total = 0.0
        for start in range(0, count, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            # divergence is detected below; numpy's overflow chatter adds nothing
            with np.errstate(over="ignore", invalid="ignore"):
                value, grads = loss_and_grads(out, images[idx], targets[idx], loss)
            if not np.isfinite(value):
                raise NonFiniteLoss(f"loss became non-finite in epoch {epoch}", epoch=epoch)
            total += value * len(idx)
            for p, gp in zip(out.params, grads):
                if p is not None:
                    p["weight"] -= cfg.learning_rate * gp["weight"]
                    p["bias"] -= cfg.learning_rate * gp["bias"]
        if not all(np.all(np.isfinite(a)) for a in out.parameter_arrays()):
            raise NonFiniteLoss(f"parameters became non-finite in epoch {epoch}", epoch=epoch)
        if on_epoch is not None:
            on_epoch(epoch, total / count)
    return out


# -- model files --------------------------------------------------------------

MODEL_MAGIC = b"BLNM"
MODEL_VERSION = 1


def model_to_bytes(net: MicroNet) -> bytes:
    """Header JSON (layer specs, tensor offsets) followed by BLTN records."""
    records = []
    entries = []
    offset = 0
    for k, p in enumerate(net.params):
        if p is None:
            continue
        for name in ("weight", "bias"):
            blob = tensor_to_bytes(p[name])
            entries.append({"name": f"layer{k}.{name}", "layer": k, "offset": offset, "nbytes": len(blob)})
            records.append(blob)
            offset += len(blob)
    header = dict(net.config.to_dict(), tensors=entries)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(hbytes)) + hbytes + b"".join(records)


def model_from_bytes(data: bytes) -> MicroNet:
    if data[:4] != MODEL_MAGIC:
        raise ValidationError("not a model file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != MODEL_VERSION:
        raise ValidationError(f"unsupported model version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    base = 12 + hlen
    config = NetworkConfig.from_dict(header)
    params: list[dict | None] = [None] * len(config.layers)

    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = read_tensor(io.BytesIO(data[start:start + entry["nbytes"]]))
        k = entry["layer"]
        params[k] = params[k] or {}
        params[k][entry["name"].split(".")[-1]] = arr
    return MicroNet(config, params)


def save_model(path, net: MicroNet) -> None:
    from ._io import atomic_write_bytes

    atomic_write_bytes(path, model_to_bytes(net))


def load_model(path) -> MicroNet:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
