"""Layer primitives and the DarkNet-style backbone builder.

The backbone is a stack of conv + batch-norm + leaky-ReLU blocks with five
max-pool stages, a final bias-carrying conv, a flatten, and one linear
head. Every conv uses zero-padding 1 (the only padding rule consistent
with the reference layer shapes: 64->66, 33->35, 9->11->13 and the
676-unit flatten when the final conv has 4 channels). Conv layers are
bias-free except the final one, whose bias accounts for its extra
``num_classes`` parameters.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"OSXCKPT1\n"

# Output channels of the 16 backbone convs (the 17th is the head conv).
_BACKBONE_CHANNELS = (8, 16, 32, 16, 32, 64, 32, 64, 128, 64, 128, 256, 128, 256, 128, 256)
# Zero-based conv indices that use 1x1 kernels (bottlenecks).
_ONE_BY_ONE = {3, 6, 9, 12, 14}
# Zero-based conv indices followed by a 2x2/stride-2 max pool.
_POOL_AFTER = {0, 1, 4, 7, 10}

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LEAKY_ALPHA = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv2d | batchnorm | leaky_relu | maxpool | flatten | linear
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    bias: bool = False
    window: int = 2
    units: int = 0
    alpha: float = LEAKY_ALPHA


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    num_classes: int
    os_k: Optional[int]
    image_side: int
    in_channels: int = 3
    width_divisor: int = 1

    @property
    def conv_count(self) -> int:
        return sum(1 for l in self.layers if l.kind == "conv2d")

    @property
    def pool_count(self) -> int:
        return sum(1 for l in self.layers if l.kind == "maxpool")

    def flatten_length(self) -> int:
        side = self.image_side
        channels = self.in_channels
        for l in self.layers:
            if l.kind == "conv2d":
                side = (side + 2 * l.pad - l.kernel) // l.stride + 1
                channels = l.out_channels
            elif l.kind == "maxpool":
                side = (side - l.window) // l.stride + 1
        return channels * side * side


class ModelParams:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.bn_updates: dict[str, int] = {}

    def named(self):
        return self.tensors.items()

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


# --------------------------------------------------------------------- ops

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, pad: int) -> Tensor:
    """2-d convolution (cross-correlation) via im2col.

    x: [N, Cin, H, W], w: [Cout, Cin, k, k], optional b: [Cout].
    """
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise DimensionError(f"conv2d: input channels {cin} vs weight {w.shape}")
    if (h + 2 * pad - k) % stride != 0 or (wd + 2 * pad - k) % stride != 0:
        raise DimensionError(f"conv2d: non-integral output size for input {x.shape}, k={k}, stride={stride}, pad={pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # cols: [N, Ho, Wo, Cin, k, k] -> [N*Ho*Wo, Cin*k*k]
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.data.dtype)

    children = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if w.requires_grad:
            w._accumulate((gmat.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
            gpad = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gpad[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if pad:
                gpad = gpad[:, :, pad:-pad, pad:-pad]
            x._accumulate(gpad)

    return Tensor._from_op(out, children, "conv2d", bw)


def maxpool(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Channelwise spatial max; gradient routed to the first argmax of each window."""
    n, c, h, w = x.shape
    if h < window or w < window:
        raise DimensionError(f"maxpool: input {x.shape} smaller than window {window}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    hc, wc = (ho - 1) * stride + window, (wo - 1) * stride + window

    win = sliding_window_view(x.data[:, :, :hc, :wc], (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C, Ho, Wo, window, window]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def bw(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        rows = arg // window
        cols = arg % window
        hi = (np.arange(ho) * stride)[None, None, :, None] + rows
        wi = (np.arange(wo) * stride)[None, None, None, :] + cols
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, hi, wi), g)
        x._accumulate(gx)

    return Tensor._from_op(out, (x,), "maxpool", bw)


def batchnorm(x: Tensor, params: ModelParams, name: str, mode: str,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running estimates in-place; eval mode uses the running estimates.
    """
    gamma = params.tensors[name + ".gamma"]
    beta = params.tensors[name + ".beta"]
    c = x.shape[1]
    if gamma.shape[1] != c:
        raise DimensionError(f"batchnorm {name}: channels {c} vs params {gamma.shape}")
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        rm, rv = params.buffers[name + ".mean"], params.buffers[name + ".var"]
        params.buffers[name + ".mean"] = (1 - momentum) * rm + momentum * mu.data
        params.buffers[name + ".var"] = (1 - momentum) * rv + momentum * var.data
        params.bn_updates[name] = params.bn_updates.get(name, 0) + 1
        xhat = (x - mu) / (var + eps).sqrt()
    elif mode == "eval":
        if params.bn_updates.get(name, 0) == 0:
            warnings.warn(f"batchnorm {name}: eval before any train-mode update, using init stats")
        rm = Tensor(params.buffers[name + ".mean"])
        rv = Tensor(params.buffers[name + ".var"])
        xhat = (x - rm) / (rv + eps).sqrt()
    else:
        raise ContractError(f"batchnorm: unknown mode {mode!r}")
    return gamma * xhat + beta


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: [N, m], w: [m, units], b: [units]."""
    return x.matmul(w) + b


# ----------------------------------------------------------------- builder

def build_darkcovidnet(num_classes: int, os_k: Optional[int] = None,
                       image_side: int = 256, width_divisor: int = 1) -> ModelSpec:
    """Build the 17-conv / 5-pool classifier spec.

    When os_k is given the final conv emits os_k channels (so the flatten
    splits into k equal blocks); otherwise it emits num_classes channels.
    width_divisor scales every backbone channel count down for desk-scale
    experiments without changing the layer pattern.
    """
    if num_classes not in (2, 3):
        raise ContractError(f"num_classes must be 2 or 3, got {num_classes}")
    if os_k is not None and os_k < 1:
        raise ContractError(f"os_k must be positive, got {os_k}")
    layers: list[LayerSpec] = []
    for i, base_c in enumerate(_BACKBONE_CHANNELS):
        c = max(1, base_c // width_divisor)
        k = 1 if i in _ONE_BY_ONE else 3
        layers.append(LayerSpec(kind="conv2d", out_channels=c, kernel=k, stride=1, pad=1))
        layers.append(LayerSpec(kind="batchnorm", out_channels=c))
        layers.append(LayerSpec(kind="leaky_relu", alpha=LEAKY_ALPHA))
        if i in _POOL_AFTER:
            layers.append(LayerSpec(kind="maxpool", window=2, stride=2))
    final_c = os_k if os_k is not None else num_classes
    layers.append(LayerSpec(kind="conv2d", out_channels=final_c, kernel=3, stride=1, pad=1, bias=True))
    layers.append(LayerSpec(kind="flatten"))
    layers.append(LayerSpec(kind="linear", units=num_classes))
    return ModelSpec(layers=tuple(layers), num_classes=num_classes, os_k=os_k,
                     image_side=image_side, width_divisor=width_divisor)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, alpha: float = LEAKY_ALPHA) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + alpha ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([0x0517, int(seed)]))
    params = ModelParams()
    cin = spec.in_channels
    conv_i = bn_i = 0
    flatten_len = None
    side = spec.image_side
    for layer in spec.layers:
        if layer.kind == "conv2d":
            name = f"conv{conv_i}"
            fan_in = cin * layer.kernel * layer.kernel
            w = _kaiming_uniform(rng, (layer.out_channels, cin, layer.kernel, layer.kernel), fan_in)
            params.tensors[name + ".w"] = Tensor(w, requires_grad=True)
            if layer.bias:
                params.tensors[name + ".b"] = Tensor(np.zeros(layer.out_channels, dtype=np.float32),
                                                     requires_grad=True)
            cin = layer.out_channels
            side = (side + 2 * layer.pad - layer.kernel) // layer.stride + 1
            conv_i += 1
        elif layer.kind == "batchnorm":
            name = f"bn{bn_i}"
            params.tensors[name + ".gamma"] = Tensor(np.ones((1, cin, 1, 1), dtype=np.float32),
                                                     requires_grad=True)
            params.tensors[name + ".beta"] = Tensor(np.zeros((1, cin, 1, 1), dtype=np.float32),
                                                    requires_grad=True)
            params.buffers[name + ".mean"] = np.zeros((1, cin, 1, 1), dtype=np.float32)
            params.buffers[name + ".var"] = np.ones((1, cin, 1, 1), dtype=np.float32)
            bn_i += 1
        elif layer.kind == "maxpool":
            side = (side - layer.window) // layer.stride + 1
        elif layer.kind == "flatten":
            flatten_len = cin * side * side
        elif layer.kind == "linear":
            if flatten_len is None:
                raise ContractError("linear layer before flatten")
            w = _kaiming_uniform(rng, (flatten_len, layer.units), flatten_len, alpha=1.0)
            params.tensors["linear.w"] = Tensor(w, requires_grad=True)
            params.tensors["linear.b"] = Tensor(np.zeros(layer.units, dtype=np.float32),
                                                requires_grad=True)
    return params


@dataclass
class ForwardResult:
    logits: Tensor
    flatten_features: Tensor
    last_conv_maps: Tensor


def forward(spec: ModelSpec, params: ModelParams, batch: Tensor, mode: str = "eval") -> ForwardResult:
    """Run the network; returns logits, the flatten activations, and the
    final conv feature maps (Grad-CAM input)."""
    if batch.ndim != 4 or batch.shape[1] != spec.in_channels:
        raise DimensionError(f"forward: expected batch [N,{spec.in_channels},H,W], got {batch.shape}")
    x = batch
    conv_i = bn_i = 0
    last_conv = None
    flatten_feats = None
    for li, layer in enumerate(spec.layers):
        try:
            if layer.kind == "conv2d":
                name = f"conv{conv_i}"
                b = params.tensors.get(name + ".b")
                x = conv2d(x, params.tensors[name + ".w"], b, layer.stride, layer.pad)
                last_conv = x
                conv_i += 1
            elif layer.kind == "batchnorm":
                x = batchnorm(x, params, f"bn{bn_i}", mode)
                bn_i += 1
            elif layer.kind == "leaky_relu":
                x = x.leaky_relu(layer.alpha)
            elif layer.kind == "maxpool":
                x = maxpool(x, layer.window, layer.stride)
            elif layer.kind == "flatten":
                x = x.reshape((x.shape[0], -1))
                flatten_feats = x
            elif layer.kind == "linear":
                x = linear(x, params.tensors["linear.w"], params.tensors["linear.b"])
            else:
                raise ContractError(f"unknown layer kind {layer.kind!r}")
        except DimensionError as exc:
            raise DimensionError(f"layer {li} ({layer.kind}): {exc}") from None
    if flatten_feats is None or last_conv is None:
        raise ContractError("model has no flatten or conv layer")
    return ForwardResult(logits=x, flatten_features=flatten_feats, last_conv_maps=last_conv)


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, spec: ModelSpec, params: ModelParams, seed: int) -> None:
    """Write a deterministic binary checkpoint.

    Layout: magic line, one JSON header line (model metadata plus array
    directory with dtype/shape/offset/length, keys sorted), then the raw
    little-endian array bytes concatenated in directory order.
    """
    entries = {}
    blobs = []
    offset = 0
    items = [(k, t.data) for k, t in sorted(params.tensors.items())]
    items += [(f"buffer:{k}", v) for k, v in sorted(params.buffers.items())]
    for key, arr in items:
        raw = np.ascontiguousarray(arr).tobytes()
        entries[key] = {"dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = {
        "num_classes": spec.num_classes,
        "os_k": spec.os_k,
        "image_side": spec.image_side,
        "width_divisor": spec.width_divisor,
        "seed": seed,
        "bn_updates": dict(sorted(params.bn_updates.items())),
        "arrays": entries,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Read a checkpoint; returns (spec, params, seed). Round-trips bit-exactly."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"checkpoint {path}: bad magic")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContractError(f"checkpoint {path}: corrupt header ({exc})") from None
        body = fh.read()
    spec = build_darkcovidnet(header["num_classes"], header["os_k"],
                              header["image_side"], header["width_divisor"])
    params = ModelParams()
    for key, meta in header["arrays"].items():
        raw = body[meta["offset"]:meta["offset"] + meta["length"]]
        arr = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
        if key.startswith("buffer:"):
            params.buffers[key[len("buffer:"):]] = arr
        else:
            params.tensors[key] = Tensor(arr, requires_grad=True)
    params.bn_updates = {k: int(v) for k, v in header.get("bn_updates", {}).items()}
    return spec, params, header["seed"]
