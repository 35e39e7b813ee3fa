"""Volumetric encoder architectures, probe classifier heads and checkpoint I/O.

Architectures are declarative layer lists (:class:`ArchitectureSpec`); the
parameters live in a separate :class:`EncoderParams` container so specs can
be shared read-only. ``forward_with_taps`` runs the network and captures the
three feature taps used for representation evaluation: the early feature map
(``local_map``), the pooled output of the convolutional trunk
(``conv_features``) and the first fully-connected block (``fc_features``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autodiff import DimensionError, Parameter, Tensor, record, relu, reshape

__all__ = [
    "ArchitectureSpec",
    "EncoderOutput",
    "EncoderParams",
    "ClassifierHead",
    "build_encoder",
    "forward_with_taps",
    "build_probe",
    "parameter_count",
    "layer_shapes",
    "tap_dims",
    "save_checkpoint",
    "load_checkpoint",
    "PRESETS",
]


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv:
    cin: int
    cout: int
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class BatchNorm:
    channels: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class ResBlock:
    """Post-activation basic block: conv-bn-relu-conv-bn plus shortcut,
    ReLU after the add. ``downsample`` switches the shortcut to conv+bn."""

    cin: int
    cout: int
    stride: int
    downsample: bool


@dataclass(frozen=True)
class ArchitectureSpec:
    preset: str
    input_side: int
    num_classes: int
    layers: tuple
    local_tap: int  # layer index after which the local feature map is taken
    conv_tap: int  # layer index after which conv_features are taken
    fc_tap: int | None  # layer index after which fc_features are taken
    is_dim: bool  # True when the final output is a representation, not logits

    @property
    def out_dim(self) -> int:
        last = self.layers[-1]
        return last.n_out if isinstance(last, Linear) else self.num_classes


@dataclass
class EncoderOutput:
    logits_or_z: Tensor
    conv_features: Tensor | None
    fc_features: Tensor | None
    local_map: Tensor | None

    def tap(self, name: str) -> Tensor:
        table = {
            "conv": self.conv_features,
            "fc": self.fc_features,
            "z": self.logits_or_z,
            "local": self.local_map,
        }
        if name not in table or table[name] is None:
            raise KeyError(f"tap {name!r} not available in this encoder output")
        return table[name]


class EncoderParams:
    """Named trainable tensors plus batch-norm running states."""

    def __init__(self):
        self.tensors: dict[str, Parameter] = {}
        self.bn: dict[str, nn.BatchNormState] = {}

    def parameters(self) -> list[Parameter]:
        return list(self.tensors.values())

    def set_mode(self, mode: str) -> None:
        for state in self.bn.values():
            state.mode = mode

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of every array needed to restore the model, including the
        BN running statistics."""
        out = {name: p.data.copy() for name, p in self.tensors.items()}
        for name, state in self.bn.items():
            out[f"{name}.running_mean"] = state.running_mean.copy()
            out[f"{name}.running_var"] = state.running_var.copy()
        return out

    def load_snapshot(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.tensors.items():
            if name not in arrays:
                raise KeyError(f"snapshot is missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise DimensionError(
                    f"snapshot shape {arrays[name].shape} != {p.data.shape} for {name!r}"
                )
            p.data = np.ascontiguousarray(arrays[name])
        for name, state in self.bn.items():
            state.running_mean = arrays[f"{name}.running_mean"].copy()
            state.running_var = arrays[f"{name}.running_var"].copy()

    def astype(self, dtype) -> "EncoderParams":
        other = EncoderParams()
        for name, p in self.tensors.items():
            other.tensors[name] = Parameter(p.data.astype(dtype), name=name)
        for name, state in self.bn.items():
            st = state.copy()
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
            other.bn[name] = st
        return other


# ---------------------------------------------------------------------------
# presets


def _alexnet_layers(widths, fc_width, out_dim, first_kernel=5, pools=(3, 3, 3)):
    c1, c2, c3, c4, c5 = widths
    p1, p2, p3 = pools
    return (
        Conv(1, c1, first_kernel, 2, 0),
        BatchNorm(c1),
        ReLU(),
        MaxPool(p1, p1),
        Conv(c1, c2, 3, 1, 0),
        BatchNorm(c2),
        ReLU(),
        MaxPool(p2, p2),
        Conv(c2, c3, 3, 1, 1),
        BatchNorm(c3),
        ReLU(),  # local tap
        Conv(c3, c4, 3, 1, 1),
        BatchNorm(c4),
        ReLU(),
        Conv(c4, c5, 3, 1, 1),
        BatchNorm(c5),
        ReLU(),
        MaxPool(p3, p3),  # conv tap
        Flatten(),
        Linear(-1, fc_width),  # -1 resolved against the flattened size
        BatchNorm(fc_width),
        ReLU(),  # fc tap
        Linear(fc_width, out_dim),
    )


def _alexnet_micro_layers(out_dim):
    w = 2
    return (
        Conv(1, w, 3, 1, 0),
        BatchNorm(w),
        ReLU(),
        MaxPool(2, 2),
        Conv(w, w, 3, 1, 0),
        BatchNorm(w),
        ReLU(),
        MaxPool(2, 2),
        Conv(w, w, 3, 1, 1),
        BatchNorm(w),
        ReLU(),
        Conv(w, w, 3, 1, 1),
        BatchNorm(w),
        ReLU(),
        Conv(w, w, 3, 1, 1),
        BatchNorm(w),
        ReLU(),
        MaxPool(1, 1),
        Flatten(),
        Linear(-1, 4),
        BatchNorm(4),
        ReLU(),
        Linear(4, out_dim),
    )


def _resnet_layers(widths, fc_width, out_dim, pools=(3, 3)):
    c1, c2, c3 = widths
    p1, p2 = pools
    return (
        Conv(1, c1, 3, 2, 0),
        BatchNorm(c1),
        ReLU(),
        MaxPool(p1, p1),
        ResBlock(c1, c1, 1, False),
        ResBlock(c1, c1, 1, False),  # local tap
        ResBlock(c1, c2, 2, True),
        ResBlock(c2, c2, 1, False),
        ResBlock(c2, c3, 2, True),
        ResBlock(c3, c3, 1, False),
        MaxPool(p2, p2),  # conv tap
        Flatten(),
        Linear(-1, fc_width),
        BatchNorm(fc_width),
        ReLU(),  # fc tap
        Linear(fc_width, out_dim),
    )


def _taps_for_alexnet(layers):
    relu_idx = [i for i, l in enumerate(layers) if isinstance(l, ReLU)]
    pool_idx = [i for i, l in enumerate(layers) if isinstance(l, MaxPool)]
    return relu_idx[2], pool_idx[2], relu_idx[-1]


def _taps_for_resnet(layers):
    block_idx = [i for i, l in enumerate(layers) if isinstance(l, ResBlock)]
    pool_idx = [i for i, l in enumerate(layers) if isinstance(l, MaxPool)]
    relu_idx = [i for i, l in enumerate(layers) if isinstance(l, ReLU)]
    return block_idx[1], pool_idx[1], relu_idx[-1]


_CANON_ALEX = dict(widths=(64, 128, 192, 192, 128), fc_width=1024)
_MINI_ALEX = dict(widths=(16, 32, 48, 48, 32), fc_width=64, pools=(2, 2, 2))


def _make_preset(preset: str, input_side: int, num_classes: int) -> ArchitectureSpec:
    is_dim = preset.startswith("dim_")
    if preset in ("alexnet", "dim_alexnet"):
        out = 64 if is_dim else num_classes
        layers = _alexnet_layers(out_dim=out, **_CANON_ALEX)
        taps = _taps_for_alexnet(layers)
        default_side = 128
    elif preset in ("alexnet_mini", "dim_alexnet_mini"):
        out = 64 if is_dim else num_classes
        layers = _alexnet_layers(out_dim=out, **_MINI_ALEX)
        taps = _taps_for_alexnet(layers)
        default_side = 32
    elif preset in ("alexnet_micro", "dim_alexnet_micro"):
        out = 4 if is_dim else num_classes
        layers = _alexnet_micro_layers(out)
        taps = _taps_for_alexnet(layers)
        default_side = 12
    elif preset == "resnet":
        layers = _resnet_layers((64, 128, 256), 1024, num_classes)
        taps = _taps_for_resnet(layers)
        default_side = 128
    elif preset == "resnet_mini":
        layers = _resnet_layers((16, 32, 64), 32, num_classes, pools=(2, 2))
        taps = _taps_for_resnet(layers)
        default_side = 32
    elif preset == "linear":
        layers = (Flatten(), Linear(-1, num_classes))
        taps = (None, None, None)
        default_side = 8
    else:
        raise ValueError(f"unknown preset {preset!r}")
    side = input_side if input_side else default_side
    local_tap, conv_tap, fc_tap = taps
    return ArchitectureSpec(
        preset=preset,
        input_side=side,
        num_classes=num_classes,
        layers=layers,
        local_tap=local_tap,
        conv_tap=conv_tap,
        fc_tap=fc_tap,
        is_dim=is_dim,
    )


PRESETS = (
    "alexnet",
    "dim_alexnet",
    "resnet",
    "alexnet_mini",
    "dim_alexnet_mini",
    "resnet_mini",
    "alexnet_micro",
    "dim_alexnet_micro",
    "linear",
)


# ---------------------------------------------------------------------------
# shape propagation and validation


def layer_shapes(spec: ArchitectureSpec) -> list[tuple[int, int]]:
    """(channels, spatial side) after every layer; flattened stages report
    (feature_count, 0). Raises DimensionError naming the failing layer."""
    side = spec.input_side
    ch = 1
    flat: int | None = None
    out: list[tuple[int, int]] = []
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({type(layer).__name__})"
        if isinstance(layer, Conv):
            if layer.cin != ch:
                raise DimensionError(f"{where}: expects {layer.cin} channels, got {ch}")
            if layer.kernel > side + 2 * layer.padding:
                raise DimensionError(f"{where}: kernel {layer.kernel} exceeds padded extent")
            side = nn.conv_out_dim(side, layer.kernel, layer.stride, layer.padding)
            ch = layer.cout
        elif isinstance(layer, MaxPool):
            if layer.kernel > side:
                raise DimensionError(f"{where}: pool kernel {layer.kernel} exceeds extent {side}")
            side = (side - layer.kernel) // layer.stride + 1
        elif isinstance(layer, BatchNorm):
            expected = flat if flat is not None else ch
            if layer.channels != expected:
                raise DimensionError(f"{where}: expects {layer.channels} features, got {expected}")
        elif isinstance(layer, ResBlock):
            if layer.cin != ch:
                raise DimensionError(f"{where}: expects {layer.cin} channels, got {ch}")
            if not layer.downsample and (layer.cin != layer.cout or layer.stride != 1):
                raise DimensionError(f"{where}: identity shortcut needs matching shape")
            side = nn.conv_out_dim(side, 3, layer.stride, 1)
            ch = layer.cout
        elif isinstance(layer, Flatten):
            flat = ch * side**3
        elif isinstance(layer, Linear):
            n_in = layer.n_in if layer.n_in != -1 else flat
            if flat is None or n_in != flat:
                raise DimensionError(f"{where}: expects {layer.n_in} inputs, got {flat}")
            flat = layer.n_out
        if side < 1 and flat is None:
            raise DimensionError(f"{where}: spatial extent shrank to {side}; input side too small")
        out.append((ch, side) if flat is None else (flat, 0))
    return out


def _resolved_layers(spec: ArchitectureSpec) -> list:
    """Layers with Linear(-1, ...) placeholders replaced by flattened sizes."""
    shapes = layer_shapes(spec)
    resolved = []
    flat = None
    for layer, (feat, side) in zip(spec.layers, shapes):
        if isinstance(layer, Linear) and layer.n_in == -1:
            resolved.append(Linear(flat, layer.n_out))
        else:
            resolved.append(layer)
        flat = feat if side == 0 else None
    return resolved


def tap_dims(spec: ArchitectureSpec) -> dict[str, int]:
    """Flattened feature width of each tap (conv / fc / z / local channels)."""
    shapes = layer_shapes(spec)
    dims = {}
    if spec.conv_tap is not None:
        ch, side = shapes[spec.conv_tap]
        dims["conv"] = ch * side**3
    if spec.fc_tap is not None:
        dims["fc"] = shapes[spec.fc_tap][0]
    if spec.local_tap is not None:
        ch, side = shapes[spec.local_tap]
        dims["local_channels"] = ch
        dims["local_side"] = side
    dims["z"] = spec.out_dim
    return dims


# ---------------------------------------------------------------------------
# building and running


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _init_conv(params, name, rng, c: Conv, dtype):
    fan_in = c.cin * c.kernel**3
    params.tensors[f"{name}.weight"] = Parameter(
        _kaiming(rng, (c.cout, c.cin, c.kernel, c.kernel, c.kernel), fan_in, dtype), name=f"{name}.weight"
    )
    params.tensors[f"{name}.bias"] = Parameter(np.zeros(c.cout, dtype=dtype), name=f"{name}.bias")


def _init_bn(params, name, rng, channels: int, dtype):
    params.tensors[f"{name}.gamma"] = Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
    params.tensors[f"{name}.beta"] = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
    params.bn[name] = nn.BatchNormState.create(channels, dtype=dtype)


def _init_linear(params, name, rng, l: Linear, dtype):
    params.tensors[f"{name}.weight"] = Parameter(
        _kaiming(rng, (l.n_out, l.n_in), l.n_in, dtype), name=f"{name}.weight"
    )
    params.tensors[f"{name}.bias"] = Parameter(np.zeros(l.n_out, dtype=dtype), name=f"{name}.bias")


def build_encoder(
    preset: str,
    input_side: int = 0,
    num_classes: int = 4,
    seed: int = 0,
    dtype=np.float32,
) -> tuple[ArchitectureSpec, EncoderParams]:
    """Construct an architecture spec and its initialized parameters.

    Kaiming fan-in initialization for conv/linear weights, zero biases,
    BN gamma=1/beta=0. Raises DimensionError (naming the layer) when
    ``input_side`` is too small for the layer chain.
    """
    spec = _make_preset(preset, input_side, num_classes)
    layers = _resolved_layers(spec)  # validates shapes
    rng = np.random.default_rng(seed)
    params = EncoderParams()
    for i, layer in enumerate(layers):
        name = f"{i:02d}_{type(layer).__name__.lower()}"
        if isinstance(layer, Conv):
            _init_conv(params, name, rng, layer, dtype)
        elif isinstance(layer, BatchNorm):
            _init_bn(params, name, rng, layer.channels, dtype)
        elif isinstance(layer, Linear):
            _init_linear(params, name, rng, layer, dtype)
        elif isinstance(layer, ResBlock):
            _init_conv(params, f"{name}.conv1", rng, Conv(layer.cin, layer.cout, 3, layer.stride, 1), dtype)
            _init_bn(params, f"{name}.bn1", rng, layer.cout, dtype)
            _init_conv(params, f"{name}.conv2", rng, Conv(layer.cout, layer.cout, 3, 1, 1), dtype)
            _init_bn(params, f"{name}.bn2", rng, layer.cout, dtype)
            if layer.downsample:
                _init_conv(params, f"{name}.down", rng, Conv(layer.cin, layer.cout, 3, layer.stride, 1), dtype)
                _init_bn(params, f"{name}.down_bn", rng, layer.cout, dtype)
    return spec, params


def _run_block(layer: ResBlock, name: str, x: Tensor, params: EncoderParams) -> Tensor:
    t = params.tensors
    h = nn.conv3d(x, t[f"{name}.conv1.weight"], t[f"{name}.conv1.bias"], layer.stride, 1)
    h = nn.batch_norm(h, params.bn[f"{name}.bn1"], t[f"{name}.bn1.gamma"], t[f"{name}.bn1.beta"])
    h = relu(h)
    h = nn.conv3d(h, t[f"{name}.conv2.weight"], t[f"{name}.conv2.bias"], 1, 1)
    h = nn.batch_norm(h, params.bn[f"{name}.bn2"], t[f"{name}.bn2.gamma"], t[f"{name}.bn2.beta"])
    if layer.downsample:
        s = nn.conv3d(x, t[f"{name}.down.weight"], t[f"{name}.down.bias"], layer.stride, 1)
        s = nn.batch_norm(s, params.bn[f"{name}.down_bn"], t[f"{name}.down_bn.gamma"], t[f"{name}.down_bn.beta"])
    else:
        s = x
    return relu(h + s)


def forward_with_taps(
    spec: ArchitectureSpec,
    params: EncoderParams,
    batch: Tensor,
    mode: str = "eval",
    trace: list | None = None,
) -> EncoderOutput:
    """Run the encoder, capturing the tap tensors along the way.

    When ``trace`` is a list it receives every layer's output tensor in
    order (useful for inspecting intermediates, e.g. kink proximity in
    gradient checks)."""
    if batch.ndim != 5 or batch.shape[2:] != (spec.input_side,) * 3:
        raise DimensionError(
            f"batch shape {batch.shape} does not match input side {spec.input_side}"
        )
    params.set_mode(mode)
    layers = _resolved_layers(spec)
    t = params.tensors
    x = batch
    taps: dict[int, Tensor] = {}
    for i, layer in enumerate(layers):
        name = f"{i:02d}_{type(layer).__name__.lower()}"
        if isinstance(layer, Conv):
            x = nn.conv3d(x, t[f"{name}.weight"], t[f"{name}.bias"], layer.stride, layer.padding)
        elif isinstance(layer, BatchNorm):
            x = nn.batch_norm(x, params.bn[name], t[f"{name}.gamma"], t[f"{name}.beta"])
        elif isinstance(layer, ReLU):
            x = relu(x)
        elif isinstance(layer, MaxPool):
            x = nn.maxpool3d(x, layer.kernel, layer.stride)
        elif isinstance(layer, Flatten):
            x = reshape(x, (x.shape[0], -1))
        elif isinstance(layer, Linear):
            x = nn.linear(x, t[f"{name}.weight"], t[f"{name}.bias"])
        elif isinstance(layer, ResBlock):
            x = _run_block(layer, name, x, params)
        if trace is not None:
            trace.append(x)
        if i in (spec.local_tap, spec.conv_tap, spec.fc_tap):
            taps[i] = x
    return EncoderOutput(
        logits_or_z=x,
        conv_features=taps.get(spec.conv_tap),
        fc_features=taps.get(spec.fc_tap),
        local_map=taps.get(spec.local_tap),
    )


def parameter_count(spec: ArchitectureSpec) -> int:
    """Exact number of trainable scalars (BN running stats excluded)."""
    total = 0
    for layer in _resolved_layers(spec):
        if isinstance(layer, Conv):
            total += layer.cout * layer.cin * layer.kernel**3 + layer.cout
        elif isinstance(layer, BatchNorm):
            total += 2 * layer.channels
        elif isinstance(layer, Linear):
            total += layer.n_out * layer.n_in + layer.n_out
        elif isinstance(layer, ResBlock):
            total += layer.cout * layer.cin * 27 + layer.cout  # conv1
            total += layer.cout * layer.cout * 27 + layer.cout  # conv2
            total += 4 * layer.cout  # two BN layers
            if layer.downsample:
                total += layer.cout * layer.cin * 27 + layer.cout + 2 * layer.cout
    return total


# ---------------------------------------------------------------------------
# probe classifier heads


class ClassifierHead:
    """Fixed probe head: linear(input,200) -> BN -> ReLU -> dropout(0.1)
    -> linear(200, num_classes)."""

    HIDDEN = 200
    DROPOUT_P = 0.1

    def __init__(self, input_dim: int, num_classes: int, seed: int = 0, dtype=np.float32,
                 hidden: int | None = None):
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.hidden = hidden or self.HIDDEN
        rng = np.random.default_rng(seed)
        self.w1 = Parameter(_kaiming(rng, (self.hidden, input_dim), input_dim, dtype), name="probe.w1")
        self.b1 = Parameter(np.zeros(self.hidden, dtype=dtype), name="probe.b1")
        self.gamma = Parameter(np.ones(self.hidden, dtype=dtype), name="probe.gamma")
        self.beta = Parameter(np.zeros(self.hidden, dtype=dtype), name="probe.beta")
        self.bn = nn.BatchNormState.create(self.hidden, dtype=dtype)
        self.w2 = Parameter(_kaiming(rng, (num_classes, self.hidden), self.hidden, dtype), name="probe.w2")
        self.b2 = Parameter(np.zeros(num_classes, dtype=dtype), name="probe.b2")

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.gamma, self.beta, self.w2, self.b2]

    def forward(self, features: Tensor, mode: str, rng: np.random.Generator) -> Tensor:
        self.bn.mode = mode
        h = nn.linear(features, self.w1, self.b1)
        h = nn.batch_norm(h, self.bn, self.gamma, self.beta)
        h = relu(h)
        h = nn.dropout(h, self.DROPOUT_P, mode, rng)
        return nn.linear(h, self.w2, self.b2)

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data.copy() for p in self.parameters()}
        out["probe.bn.running_mean"] = self.bn.running_mean.copy()
        out["probe.bn.running_var"] = self.bn.running_var.copy()
        return out

    def load_snapshot(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.ascontiguousarray(arrays[p.name])
        self.bn.running_mean = arrays["probe.bn.running_mean"].copy()
        self.bn.running_var = arrays["probe.bn.running_var"].copy()


def build_probe(spec: ArchitectureSpec, tap: str, num_classes: int = 4, seed: int = 0) -> ClassifierHead:
    """Probe head sized for one of the encoder taps ('conv', 'fc' or 'z')."""
    dims = tap_dims(spec)
    if tap not in ("conv", "fc", "z") or tap not in dims:
        raise KeyError(f"unknown tap {tap!r}; expected one of conv, fc, z")
    return ClassifierHead(dims[tap], num_classes, seed=seed)


# ---------------------------------------------------------------------------
# checkpoint file format
#
# magic "IMVCKPT1", then per tensor: u32 name length, UTF-8 name,
# u32 dtype tag (0 = f32, 1 = f64), u32 rank, rank x u64 dims, raw
# little-endian values. Round-trips bit-exactly.

_CKPT_MAGIC = b"IMVCKPT1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        for name, arr in arrays.items():
            if arr.dtype not in _TAG_FOR:
                raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", _TAG_FOR[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"bad magic in checkpoint {path}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) < 4:
                raise ValueError(f"truncated checkpoint {path}")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            tag, rank = struct.unpack("<II", fh.read(8))
            if tag not in _DTYPE_TAGS:
                raise ValueError(f"unknown dtype tag {tag} in checkpoint {path}")
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            dtype = _DTYPE_TAGS[tag]
            count = int(np.prod(dims)) if rank else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"truncated checkpoint {path}")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    return arrays
