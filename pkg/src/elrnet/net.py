"""Declarative network specs and the assembled spatial/temporal/fused ConvNets.

The base architecture is three conv blocks (conv -> batchnorm -> relu ->
2x2 max pool) followed by two fully-connected layers, with dropout at the
input of each FC layer.  Spatial and temporal streams are identical except
for the input channel count (3 RGB channels vs 11 stacked color-encoded
flow fields = 33 channels).  A fused network runs both streams and merges
them with one of the fusion operators after the Conv3 block or after Fc4.

Parameters are stored per logical name as a list of one or more segments
split along the layer's output-channel axis; semi-coupled training places
the first k output channels of a layer in a segment physically shared with
the partner network.  Standalone networks always hold a single segment.

Checkpoint format (version 1, little-endian): magic ``ELRC``, uint32
version, uint32 record count, then per record uint16 name length, UTF-8
name, uint8 ndim, uint32 dims, raw float32 data.  Records cover every
logical parameter plus per-layer batch-norm running statistics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .fusion import (
    FusionConvParams,
    fuse_concat_backward,
    fuse_concat_forward,
    fuse_conv_backward,
    fuse_conv_forward,
    fuse_sum_backward,
    fuse_sum_forward,
)

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "Network",
    "build_network",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "SPATIAL_CHANNELS",
    "TEMPORAL_CHANNELS",
]

SPATIAL_CHANNELS = 3
TEMPORAL_CHANNELS = 33           # 11 stacked flow fields, 3 color channels each
WEIGHT_INIT_STD = 1e-3
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5

STREAMS = ("spatial", "temporal", "fused")
FUSIONS = ("sum", "concat", "conv")
FUSION_SITES = ("conv3", "fc4")

# coupling layer index n in 1..5; the fusion bank couples with layer 3
COUPLING_INDEX = {"conv1": 1, "conv2": 2, "conv3": 3, "fusion": 3, "fc4": 4, "fc5": 5}


@dataclass(frozen=True)
class LayerSpec:
    """One step of the network program."""

    kind: str                                   # conv|pool|batchnorm|relu|dropout|linear|fusion
    name: str
    kernel: tuple[int, int] | None = None
    out_channels: int | None = None
    coupling_layer_index: int | None = None


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description for one stream or a fused two-stream net."""

    stream: str
    num_classes: int
    input_size: int = 32
    conv_channels: tuple[int, int, int] = (32, 64, 128)
    conv_kernels: tuple[int, int, int] = (5, 3, 3)
    fc4_width: int = 256
    dropout: float = 0.85
    fusion: str | None = None
    fusion_after: str | None = None

    def validate(self):
        if self.stream not in STREAMS:
            raise ValueError(f"stream must be one of {STREAMS}, got {self.stream!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size < 8 or self.input_size % 8:
            raise ValueError(
                f"input_size must be a multiple of 8 (three 2x2 pools), got {self.input_size}")
        if len(self.conv_channels) != 3 or len(self.conv_kernels) != 3:
            raise ValueError("exactly 3 conv layers are required per stream")
        if any(c < 1 for c in self.conv_channels) or self.fc4_width < 1:
            raise ValueError("layer widths must be >= 1")
        if any(k < 1 or k % 2 == 0 for k in self.conv_kernels):
            raise ValueError("conv kernels must be odd (same padding)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.stream == "fused":
            if self.fusion not in FUSIONS:
                raise ValueError(f"fused stream needs fusion in {FUSIONS}, got {self.fusion!r}")
            if self.fusion_after not in FUSION_SITES:
                raise ValueError(
                    f"fusion location must be one of {FUSION_SITES}, got {self.fusion_after!r}")
        elif self.fusion is not None or self.fusion_after is not None:
            raise ValueError(f"{self.stream} stream must not declare a fusion operator")
        return self

    # -- derived shapes ----------------------------------------------------

    def stream_channels(self, stream):
        return SPATIAL_CHANNELS if stream == "spatial" else TEMPORAL_CHANNELS

    @property
    def input_shape(self):
        """Per-input shape(s): one [H,W,C] triple, or a pair for fused nets."""
        s = self.input_size
        if self.stream == "fused":
            return ((s, s, SPATIAL_CHANNELS), (s, s, TEMPORAL_CHANNELS))
        return (s, s, self.stream_channels(self.stream))

    @property
    def final_map_side(self):
        return self.input_size // 8

    def _fused_depth(self, d):
        cat = 2 * d
        if self.fusion == "sum":
            return d
        if self.fusion == "concat":
            return cat
        return int(np.floor(0.5 * cat + 0.5))   # conv fusion: round(0.5 * D_o)

    @property
    def fc4_in(self):
        d3 = self.conv_channels[2]
        side = self.final_map_side
        if self.stream == "fused" and self.fusion_after == "conv3":
            return side * side * self._fused_depth(d3)
        return side * side * d3

    @property
    def fc5_in(self):
        if self.stream == "fused" and self.fusion_after == "fc4":
            return self._fused_depth(self.fc4_width)
        return self.fc4_width

    @property
    def layers(self):
        """Ordered layer program; one sub-list per stream then the trunk."""
        self.validate()
        out = []
        prefixes = ["spatial.", "temporal."] if self.stream == "fused" else [""]
        for p in prefixes:
            for i in range(3):
                name = f"{p}conv{i + 1}"
                out.append(LayerSpec("conv", name, (self.conv_kernels[i],) * 2,
                                     self.conv_channels[i], i + 1))
                out.append(LayerSpec("batchnorm", name))
                out.append(LayerSpec("relu", name))
                out.append(LayerSpec("pool", name))
            if self.stream == "fused" and self.fusion_after == "fc4":
                out.append(LayerSpec("dropout", f"{p}fc4.in"))
                out.append(LayerSpec("linear", f"{p}fc4", None, self.fc4_width, 4))
                out.append(LayerSpec("relu", f"{p}fc4"))
        if self.stream == "fused":
            out.append(LayerSpec("fusion", "fusion", None,
                                 self._fused_depth(
                                     self.conv_channels[2] if self.fusion_after == "conv3"
                                     else self.fc4_width),
                                 3))
        if not (self.stream == "fused" and self.fusion_after == "fc4"):
            out.append(LayerSpec("dropout", "fc4.in"))
            out.append(LayerSpec("linear", "fc4", None, self.fc4_width, 4))
            out.append(LayerSpec("relu", "fc4"))
        out.append(LayerSpec("dropout", "fc5.in"))
        out.append(LayerSpec("linear", "fc5", None, self.num_classes, 5))
        return out


@dataclass(frozen=True)
class ParamDef:
    """Creation-order record of one logical parameter tensor."""

    name: str
    shape: tuple[int, ...]
    split_axis: int            # output-channel axis used for coupling splits
    coupling_index: int        # layer n in 1..5
    kind: str                  # weight|bias|gamma|beta


def _conv_defs(prefix, index, kernel, c_in, c_out):
    name = f"{prefix}conv{index}"
    return [
        ParamDef(f"{name}.w", (kernel, kernel, c_in, c_out), 3, index, "weight"),
        ParamDef(f"{name}.b", (c_out,), 0, index, "bias"),
        ParamDef(f"{name}.gamma", (c_out,), 0, index, "gamma"),
        ParamDef(f"{name}.beta", (c_out,), 0, index, "beta"),
    ]


def _linear_defs(name, d_in, d_out, coupling):
    return [
        ParamDef(f"{name}.w", (d_in, d_out), 1, coupling, "weight"),
        ParamDef(f"{name}.b", (d_out,), 0, coupling, "bias"),
    ]


def parameter_defs(spec: NetworkSpec):
    """All logical parameters of a network, in deterministic creation order."""
    spec.validate()
    defs = []
    side = spec.final_map_side
    d3 = spec.conv_channels[2]
    if spec.stream == "fused":
        for stream in ("spatial", "temporal"):
            c_in = spec.stream_channels(stream)
            cs = spec.conv_channels
            for i in range(3):
                defs += _conv_defs(f"{stream}.", i + 1, spec.conv_kernels[i],
                                   c_in if i == 0 else cs[i - 1], cs[i])
            if spec.fusion_after == "fc4":
                defs += _linear_defs(f"{stream}.fc4", side * side * d3, spec.fc4_width, 4)
        if spec.fusion == "conv":
            d_cat = 2 * (d3 if spec.fusion_after == "conv3" else spec.fc4_width)
            d_out = spec._fused_depth(d_cat // 2)
            defs += [
                ParamDef("fusion.w", (1, 1, d_cat, d_out), 3, 3, "weight"),
                ParamDef("fusion.b", (d_out,), 0, 3, "bias"),
            ]
        if spec.fusion_after == "conv3":
            defs += _linear_defs("fc4", spec.fc4_in, spec.fc4_width, 4)
        defs += _linear_defs("fc5", spec.fc5_in, spec.num_classes, 5)
    else:
        c_in = spec.stream_channels(spec.stream)
        cs = spec.conv_channels
        for i in range(3):
            defs += _conv_defs("", i + 1, spec.conv_kernels[i],
                               c_in if i == 0 else cs[i - 1], cs[i])
        defs += _linear_defs("fc4", spec.fc4_in, spec.fc4_width, 4)
        defs += _linear_defs("fc5", spec.fc4_width, spec.num_classes, 5)
    return defs


class Network:
    """A built network: spec, parameter segments, and batch-norm state.

    ``params`` maps each logical name to a list of segments along the
    layer's output axis (one segment unless the network is coupled).
    ``version`` increments whenever an optimizer updates the parameters;
    forward caches record it so backward can reject stale caches.
    """

    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.defs = parameter_defs(spec)
        self.def_map = {d.name: d for d in self.defs}
        self.params: dict[str, list[np.ndarray]] = {}
        self.bn_running: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.version = 0

    # -- parameter access ---------------------------------------------------

    def get(self, name):
        segs = self.params[name]
        if len(segs) == 1:
            return segs[0]
        return np.concatenate(segs, axis=self.def_map[name].split_axis)

    def set_(self, name, value):
        """Copy a full logical value into the (possibly shared) segments."""
        d = self.def_map[name]
        if tuple(value.shape) != d.shape:
            raise ValueError(f"{name}: expected shape {d.shape}, got {tuple(value.shape)}")
        offset = 0
        for seg in self.params[name]:
            width = seg.shape[d.split_axis]
            idx = [slice(None)] * seg.ndim
            idx[d.split_axis] = slice(offset, offset + width)
            seg[...] = value[tuple(idx)].astype(self.dtype)
            offset += width

    def split_grad(self, name, grad):
        """Slice a logical gradient to match this network's segment layout."""
        d = self.def_map[name]
        pieces, offset = [], 0
        for seg in self.params[name]:
            width = seg.shape[d.split_axis]
            idx = [slice(None)] * seg.ndim
            idx[d.split_axis] = slice(offset, offset + width)
            pieces.append(grad[tuple(idx)])
            offset += width
        return pieces

    @property
    def conv_layer_names(self):
        prefixes = ["spatial.", "temporal."] if self.spec.stream == "fused" else [""]
        return [f"{p}conv{i}" for p in prefixes for i in (1, 2, 3)]

    # -- forward ------------------------------------------------------------

    def _bn_state(self, name):
        mean, var = self.bn_running[name]
        return ops.BatchNormState(self.get(f"{name}.gamma"), self.get(f"{name}.beta"),
                                  mean, var, BN_MOMENTUM, BN_EPSILON)

    def _conv_blocks(self, prefix, x, mode, steps):
        for i in (1, 2, 3):
            name = f"{prefix}conv{i}"
            w = self.get(f"{name}.w")
            x, c = ops.conv2d_forward(x, w, self.get(f"{name}.b"),
                                      stride=1, pad=w.shape[0] // 2)
            steps.append(("conv", name, c))
            x, c = ops.batchnorm_forward(x, self._bn_state(name), mode)
            steps.append(("bn", name, c))
            x, c = ops.relu_forward(x)
            steps.append(("relu", None, c))
            x, c = ops.maxpool_forward(x)
            steps.append(("pool", None, c))
        return x

    def _fc(self, name, x, mode, rng, steps, activation):
        if x.ndim != 2:
            steps.append(("flatten", None, x.shape))
            x = x.reshape(x.shape[0], -1)
        x, c = ops.dropout_forward(x, self.spec.dropout, mode, rng)
        steps.append(("dropout", None, c))
        x, c = ops.linear_forward(x, self.get(f"{name}.w"), self.get(f"{name}.b"))
        steps.append(("linear", name, c))
        if activation:
            x, c = ops.relu_forward(x)
            steps.append(("relu", None, c))
        return x

    def _check_input(self, x, stream):
        s = self.spec.input_size
        c = self.spec.stream_channels(stream)
        if x.ndim != 4 or x.shape[1:] != (s, s, c):
            raise ValueError(
                f"{stream} stream expects input [N,{s},{s},{c}], got {tuple(x.shape)}")

    def forward(self, batch, mode="eval", rng=None):
        """Run the network; returns (logits, cache).

        ``batch`` is an [N,H,W,C] array for single-stream nets or an
        (rgb, flow_stack) pair for fused nets.  ``rng`` feeds dropout and
        is required in train mode when dropout > 0.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        spec = self.spec
        cache = {"version": self.version, "mode": mode, "streams": {}, "fusion": None}

        if spec.stream == "fused":
            if not isinstance(batch, (tuple, list)) or len(batch) != 2:
                raise ValueError("fused network expects an (rgb, flow_stack) input pair")
            inputs = {"spatial": batch[0], "temporal": batch[1]}
        else:
            inputs = {spec.stream: batch}

        maps = {}
        for stream, x in inputs.items():
            self._check_input(x, stream)
            prefix = f"{stream}." if spec.stream == "fused" else ""
            steps = []
            x = self._conv_blocks(prefix, x, mode, steps)
            if spec.stream == "fused" and spec.fusion_after == "fc4":
                x = self._fc(f"{prefix}fc4", x, mode, rng, steps, activation=True)
                x = x.reshape(x.shape[0], 1, 1, -1)    # vectors fuse as 1x1 maps
            cache["streams"][stream] = steps
            maps[stream] = x

        if spec.stream == "fused":
            x_s, x_t = maps["spatial"], maps["temporal"]
            if spec.fusion == "sum":
                x, fcache = fuse_sum_forward(x_s, x_t)
            elif spec.fusion == "concat":
                x, fcache = fuse_concat_forward(x_s, x_t)
            else:
                params = FusionConvParams(self.get("fusion.w"), self.get("fusion.b"))
                x, fcache = fuse_conv_forward(x_s, x_t, params)
            cache["fusion"] = fcache
        else:
            x = maps[spec.stream]

        trunk = []
        if not (spec.stream == "fused" and spec.fusion_after == "fc4"):
            x = self._fc("fc4", x, mode, rng, trunk, activation=True)
        logits = self._fc("fc5", x, mode, rng, trunk, activation=False)
        cache["trunk"] = trunk
        return logits, cache

    # -- backward -----------------------------------------------------------

    def _steps_backward(self, d, steps, prefix_grads):
        for step in reversed(steps):
            kind, name, c = step
            if kind == "conv":
                d, dw, db = ops.conv2d_backward(d, c)
                prefix_grads[f"{name}.w"] = dw
                prefix_grads[f"{name}.b"] = db
            elif kind == "bn":
                d, dg, dbeta = ops.batchnorm_backward(d, c)
                prefix_grads[f"{name}.gamma"] = dg
                prefix_grads[f"{name}.beta"] = dbeta
            elif kind == "relu":
                d = ops.relu_backward(d, c)
            elif kind == "pool":
                d = ops.maxpool_backward(d, c)
            elif kind == "dropout":
                d = ops.dropout_backward(d, c)
            elif kind == "linear":
                d, dw, db = ops.linear_backward(d, c)
                prefix_grads[f"{name}.w"] = dw
                prefix_grads[f"{name}.b"] = db
            elif kind == "flatten":
                d = d.reshape(c)
        return d

    def backward(self, cache, dlogits):
        """Gradient of every logical parameter given d(loss)/d(logits)."""
        if cache["version"] != self.version:
            raise ValueError("stale cache: parameters were updated after this forward pass")
        grads = {}
        d = self._steps_backward(dlogits, cache["trunk"], grads)

        spec = self.spec
        if spec.stream == "fused":
            if spec.fusion == "sum":
                d_s, d_t = fuse_sum_backward(d)
            elif spec.fusion == "concat":
                d_s, d_t = fuse_concat_backward(d)
            else:
                d_s, d_t, dw, db = fuse_conv_backward(d, cache["fusion"])
                grads["fusion.w"] = dw
                grads["fusion.b"] = db
            for stream, dmap in (("spatial", d_s), ("temporal", d_t)):
                if spec.fusion_after == "fc4":
                    dmap = dmap.reshape(dmap.shape[0], -1)
                self._steps_backward(dmap, cache["streams"][stream], grads)
        else:
            self._steps_backward(d, cache["streams"][spec.stream], grads)
        return grads


def build_network(spec: NetworkSpec, seed, dtype=np.float32) -> Network:
    """Initialize a network: weights ~ N(0, 1e-3^2), zero biases, unit bn scale."""
    net = Network(spec, dtype)
    rng = np.random.default_rng(seed)
    for d in net.defs:
        if d.kind == "weight":
            value = rng.normal(0.0, WEIGHT_INIT_STD, d.shape).astype(net.dtype)
        elif d.kind == "gamma":
            value = np.ones(d.shape, net.dtype)
        else:
            value = np.zeros(d.shape, net.dtype)
        net.params[d.name] = [value]
    for name in net.conv_layer_names:
        c = net.def_map[f"{name}.gamma"].shape[0]
        net.bn_running[name] = (np.zeros(c, net.dtype), np.ones(c, net.dtype))
    return net


def count_parameters(network: Network) -> int:
    """Total weight + bias + batch-norm affine elements (running stats excluded)."""
    return sum(int(np.prod(d.shape)) for d in network.defs)


# ---------------------------------------------------------------------------
# checkpoint io

CHECKPOINT_MAGIC = b"ELRC"
CHECKPOINT_VERSION = 1


def _checkpoint_records(net: Network):
    for d in net.defs:
        yield d.name, net.get(d.name)
    for name in net.conv_layer_names:
        mean, var = net.bn_running[name]
        yield f"{name}.running_mean", mean
        yield f"{name}.running_var", var


def save_checkpoint(net: Network, path):
    records = list(_checkpoint_records(net))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(records)))
        for name, arr in records:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(net: Network, path):
    """Fill an existing network's parameters and bn statistics in place."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        loaded = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n_values = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * n_values), dtype="<f4").reshape(shape)
            loaded[name] = data

    expected = {name for name, _ in _checkpoint_records(net)}
    missing = expected - set(loaded)
    unknown = set(loaded) - expected
    if missing or unknown:
        raise ValueError(
            f"{path}: checkpoint does not match network "
            f"(missing {sorted(missing)[:3]}, unknown {sorted(unknown)[:3]})")
    for d in net.defs:
        net.set_(d.name, loaded[d.name])
    for name in net.conv_layer_names:
        mean, var = net.bn_running[name]
        mean[...] = loaded[f"{name}.running_mean"].astype(net.dtype)
        var[...] = loaded[f"{name}.running_var"].astype(net.dtype)
    net.version += 1
