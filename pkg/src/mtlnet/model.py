"""Shared ResNet10 encoder with an FCN8 segmentation decoder and a YOLO-v2
style detection head.

The architecture is described by :class:`ModelSpec` and flattened into a
layer table (:func:`layer_table`). Parameter construction, forward passes and
the analytic cost model in :mod:`mtlnet.bench` all read that same table.

Layer table (width_mult=1, names without the ``.w``/``.b`` suffixes)::

    enc.stem.conv      7x7/2   3 -> 64        + enc.stem.bn, maxpool 3x3/2
    enc.block1.conv1   3x3/1  64 -> 64        + bn1
    enc.block1.conv2   3x3/1  64 -> 64        + bn2
    enc.block2.conv1   3x3/2  64 -> 128       + bn1
    enc.block2.conv2   3x3/1 128 -> 128       + bn2
    enc.block2.proj    1x1/2  64 -> 128       + proj_bn
    enc.block3.*       as block2, 128 -> 256
    enc.block4.*       as block2, 256 -> 512
    seg.score{32,16,8} 1x1 -> C_seg (+bias), one per fusion stride
    seg.up{s}          transposed conv between consecutive fusion strides
    det.conv1          3x3/1 512 -> 512 (+bias), ReLU
    det.conv2          1x1   512 -> A*(5+C_det) (+bias)
"""
from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ConvSpec, Tensor

DEFAULT_ANCHORS = ((1.0, 1.0), (2.0, 2.0), (4.0, 2.0), (2.0, 4.0), (6.0, 3.0))
MIN_CHANNELS = 8
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_size: tuple = (384, 1280)
    seg_classes: tuple = ("background", "road", "sidewalk")
    det_classes: tuple = ("car", "person", "cyclist")
    width_mult: float = 1.0
    base_widths: tuple = (64, 128, 256, 512)
    skip_strides: tuple = (8, 16)
    anchors: tuple = DEFAULT_ANCHORS
    heads: tuple = ("seg", "det")
    channel_floor: int = MIN_CHANNELS

    def __post_init__(self):
        # normalise list inputs (e.g. from JSON) into hashable tuples
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "seg_classes", tuple(self.seg_classes))
        object.__setattr__(self, "det_classes", tuple(self.det_classes))
        object.__setattr__(self, "base_widths", tuple(int(v) for v in self.base_widths))
        object.__setattr__(self, "channel_floor", int(self.channel_floor))
        object.__setattr__(self, "skip_strides", tuple(sorted({int(s) for s in self.skip_strides}, reverse=True)))
        object.__setattr__(self, "anchors", tuple((float(a), float(b)) for a, b in self.anchors))
        object.__setattr__(self, "heads", tuple(h for h in ("seg", "det") if h in set(self.heads)))
        self.validate()

    def validate(self) -> None:
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise SpecError(f"input size {self.input_size} must be positive multiples of 32")
        if not 0 < self.width_mult <= 1:
            raise SpecError("width_mult must lie in (0, 1]")
        if self.channel_floor < 1:
            raise SpecError("channel_floor must be at least 1")
        if len(self.base_widths) != 4 or min(self.base_widths) <= 0:
            raise SpecError("base_widths needs four positive entries")
        if not set(self.skip_strides) <= {8, 16}:
            raise SpecError("skip_strides must be a subset of {8, 16}")
        if not self.heads:
            raise SpecError("at least one head (seg/det) is required")
        if "seg" in self.heads and len(self.seg_classes) < 2:
            raise SpecError("need at least two segmentation classes")
        if "det" in self.heads:
            if len(self.anchors) < 1:
                raise SpecError("need at least one anchor")
            if not self.det_classes:
                raise SpecError("need at least one detection class")
            if any(a <= 0 or b <= 0 for a, b in self.anchors):
                raise SpecError("anchor sizes must be positive")

    @property
    def widths(self) -> tuple:
        return tuple(scaled_width(b, self.width_mult, self.channel_floor) for b in self.base_widths)

    @property
    def det_width(self) -> int:
        return scaled_width(512, self.width_mult, self.channel_floor)

    @property
    def det_channels(self) -> int:
        return len(self.anchors) * (5 + len(self.det_classes))

    @property
    def grid(self) -> tuple:
        return self.input_size[0] // 32, self.input_size[1] // 32

    def with_(self, **changes) -> "ModelSpec":
        d = asdict(self)
        d.update(changes)
        return ModelSpec(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["anchors"] = [list(a) for a in self.anchors]
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**d)


def scaled_width(base: int, width_mult: float, floor: int = MIN_CHANNELS) -> int:
    return max(floor, math.ceil(base * width_mult))


# --------------------------------------------------------------------------
# layer table


@dataclass(frozen=True)
class Layer:
    """One weighted layer. ``in_stride`` is the input's spatial stride
    relative to the network input."""

    name: str
    kind: str  # "conv" | "deconv" | "bn"
    in_ch: int
    out_ch: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = False
    in_stride: int = 1

    @property
    def conv_spec(self) -> ConvSpec:
        return ConvSpec(self.in_ch, self.out_ch, (self.kernel,) * 2, (self.stride,) * 2,
                        (self.padding,) * 2, self.bias)

    @property
    def out_stride(self) -> int:
        if self.kind == "deconv":
            return self.in_stride // self.stride
        return self.in_stride * self.stride

    def param_shapes(self) -> "OrderedDict[str, tuple]":
        p = OrderedDict()
        if self.kind == "conv":
            p[self.name + ".w"] = (self.out_ch, self.in_ch, self.kernel, self.kernel)
        elif self.kind == "deconv":
            p[self.name + ".w"] = (self.in_ch, self.out_ch, self.kernel, self.kernel)
        elif self.kind == "bn":
            for s in ("gamma", "beta", "mean", "var"):
                p[f"{self.name}.{s}"] = (self.out_ch,)
            return p
        if self.bias:
            p[self.name + ".b"] = (self.out_ch,)
        return p


def fusion_strides(spec: ModelSpec) -> list:
    """Strides at which the segmentation path holds a score map, coarse to fine."""
    return [32] + [s for s in (16, 8) if s in spec.skip_strides] + [1]


def encoder_layers(spec: ModelSpec) -> list:
    w = spec.widths
    L = [Layer("enc.stem.conv", "conv", 3, w[0], 7, 2, 3, in_stride=1),
         Layer("enc.stem.bn", "bn", w[0], w[0], in_stride=2)]
    cin, stride_in = w[0], 4  # after the 3x3/2 maxpool
    for i, cout in enumerate(w, start=1):
        s = 1 if i == 1 else 2
        b = f"enc.block{i}"
        L += [Layer(f"{b}.conv1", "conv", cin, cout, 3, s, 1, in_stride=stride_in),
              Layer(f"{b}.bn1", "bn", cout, cout, in_stride=stride_in * s),
              Layer(f"{b}.conv2", "conv", cout, cout, 3, 1, 1, in_stride=stride_in * s),
              Layer(f"{b}.bn2", "bn", cout, cout, in_stride=stride_in * s)]
        if s != 1 or cin != cout:
            L += [Layer(f"{b}.proj", "conv", cin, cout, 1, s, 0, in_stride=stride_in),
                  Layer(f"{b}.proj_bn", "bn", cout, cout, in_stride=stride_in * s)]
        cin, stride_in = cout, stride_in * s
    return L


def seg_layers(spec: ModelSpec) -> list:
    w = spec.widths
    c = len(spec.seg_classes)
    feat_ch = {32: w[3], 16: w[2], 8: w[1]}
    stops = fusion_strides(spec)
    L = [Layer(f"seg.score{s}", "conv", feat_ch[s], c, 1, 1, 0, True, in_stride=s) for s in stops[:-1]]
    for a, b in zip(stops[:-1], stops[1:]):
        f = a // b
        L.append(Layer(f"seg.up{a}", "deconv", c, c, 2 * f, f, f // 2, in_stride=a))
    return L


def det_layers(spec: ModelSpec) -> list:
    return [Layer("det.conv1", "conv", spec.widths[3], spec.det_width, 3, 1, 1, True, in_stride=32),
            Layer("det.conv2", "conv", spec.det_width, spec.det_channels, 1, 1, 0, True, in_stride=32)]


def layer_table(spec: ModelSpec) -> list:
    L = encoder_layers(spec)
    if "seg" in spec.heads:
        L += seg_layers(spec)
    if "det" in spec.heads:
        L += det_layers(spec)
    return L


# --------------------------------------------------------------------------
# parameters


class ModelParams:
    """Ordered name -> Tensor store. Batch-norm running statistics live here
    too (``.mean``/``.var``) but never require grad."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list:
        return list(self.tensors)

    def trainable(self) -> list:
        return [n for n in self.tensors if is_trainable(n)]

    def num_trainable(self) -> int:
        return int(sum(self.tensors[n].data.size for n in self.trainable()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def bn_state(self, name: str) -> BatchNormState:
        return BatchNormState(self.tensors[name + ".mean"].data, self.tensors[name + ".var"].data)

    def apply_bn_updates(self, updates: dict) -> None:
        for name, st in updates.items():
            self.tensors[name + ".mean"] = Tensor(st.mean)
            self.tensors[name + ".var"] = Tensor(st.var)

    def copy(self) -> "ModelParams":
        out = OrderedDict()
        for n, t in self.tensors.items():
            out[n] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return ModelParams(out)

    def astype(self, dtype) -> "ModelParams":
        out = OrderedDict()
        for n, t in self.tensors.items():
            out[n] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
        return ModelParams(out)


def is_trainable(name: str) -> bool:
    return not (name.endswith(".mean") or name.endswith(".var"))


def expected_inventory(spec: ModelSpec) -> "OrderedDict[str, tuple]":
    inv = OrderedDict()
    for layer in layer_table(spec):
        inv.update(layer.param_shapes())
    return inv


def _fan_in(layer: Layer) -> int:
    return layer.in_ch * layer.kernel * layer.kernel


def build(spec: ModelSpec, seed: int, dtype: str = "f32") -> ModelParams:
    """Seeded He-normal init; biases and beta 0, gamma 1, running var 1."""
    spec.validate()
    dt = T.DTYPES[dtype]
    rng = np.random.Generator(np.random.PCG64(seed))
    out = OrderedDict()
    for layer in layer_table(spec):
        for name, shape in layer.param_shapes().items():
            suffix = name.rsplit(".", 1)[1]
            if suffix == "w":
                std = math.sqrt(2.0 / _fan_in(layer))
                data = rng.standard_normal(shape) * std
            elif suffix in ("gamma", "var"):
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            out[name] = Tensor(data.astype(dt), requires_grad=is_trainable(name))
    return ModelParams(out)


def check_inventory(params: ModelParams, spec: ModelSpec) -> None:
    inv = expected_inventory(spec)
    missing = [n for n in inv if n not in params]
    orphans = [n for n in params if n not in inv]
    wrong = [n for n in inv if n in params and params[n].shape != inv[n]]
    if missing or orphans or wrong:
        raise SpecError(f"parameter inventory mismatch: missing={missing} orphans={orphans} shape={wrong}")


# --------------------------------------------------------------------------
# forward


@dataclass
class EncoderFeatures:
    f4: Tensor
    f8: Tensor
    f16: Tensor
    f32: Tensor

    def at(self, stride: int) -> Tensor:
        return {4: self.f4, 8: self.f8, 16: self.f16, 32: self.f32}[stride]


@dataclass
class _Ctx:
    params: ModelParams
    mode: str
    bn_updates: Optional[dict] = field(default=None)

    def conv(self, layer: Layer, x: Tensor) -> Tensor:
        b = self.params[layer.name + ".b"] if layer.bias else None
        return T.conv2d(x, self.params[layer.name + ".w"], b, layer.conv_spec)

    def bn(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        out, st = T.batchnorm2d(x, p[name + ".gamma"], p[name + ".beta"], p.bn_state(name),
                                self.mode, BN_EPS, BN_MOMENTUM)
        if self.mode == "train" and self.bn_updates is not None:
            self.bn_updates[name] = st
        return out


def _check_input(spec: ModelSpec, x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected N x 3 x H x W input, got {x.shape}")
    if tuple(x.shape[2:]) != spec.input_size:
        raise ValueError(f"input spatial size {x.shape[2:]} != spec {spec.input_size}")


def forward_encoder(params: ModelParams, spec: ModelSpec, x: Tensor, mode: str = "eval",
                    bn_updates: Optional[dict] = None) -> EncoderFeatures:
    """Run the shared encoder. In train mode, updated batch-norm running
    statistics are written into ``bn_updates`` (params are not touched)."""
    _check_input(spec, x)
    ctx = _Ctx(params, mode, bn_updates)
    layers = {l.name: l for l in encoder_layers(spec)}
    h = T.relu(ctx.bn("enc.stem.bn", ctx.conv(layers["enc.stem.conv"], x)))
    h = T.maxpool2d(h, 3, 2, 1)
    taps = []
    for i in range(1, 5):
        b = f"enc.block{i}"
        y = T.relu(ctx.bn(f"{b}.bn1", ctx.conv(layers[f"{b}.conv1"], h)))
        y = ctx.bn(f"{b}.bn2", ctx.conv(layers[f"{b}.conv2"], y))
        short = h
        if f"{b}.proj" in layers:
            short = ctx.bn(f"{b}.proj_bn", ctx.conv(layers[f"{b}.proj"], h))
        h = T.relu(T.add(y, short))
        taps.append(h)
    return EncoderFeatures(*taps)


def forward_seg(params: ModelParams, spec: ModelSpec, feats: EncoderFeatures) -> Tensor:
    """FCN8 decoder: score maps fused by addition, then upsampled to input size."""
    if "seg" not in spec.heads:
        raise SpecError("model has no segmentation head")
    ctx = _Ctx(params, "eval")
    layers = {l.name: l for l in seg_layers(spec)}
    stops = fusion_strides(spec)
    y = None
    for a in stops[:-1]:
        score = ctx.conv(layers[f"seg.score{a}"], feats.at(a))
        y = score if y is None else T.add(y, score)
        up = layers[f"seg.up{a}"]
        y = T.deconv2d(y, params[up.name + ".w"], up.stride)
    return y


def forward_det(params: ModelParams, spec: ModelSpec, feats: EncoderFeatures) -> Tensor:
    """Raw detection map, channels grouped per anchor as
    [tx, ty, tw, th, to, class logits...]."""
    if "det" not in spec.heads:
        raise SpecError("model has no detection head")
    ctx = _Ctx(params, "eval")
    c1, c2 = det_layers(spec)
    return ctx.conv(c2, T.relu(ctx.conv(c1, feats.f32)))


@dataclass
class Outputs:
    features: EncoderFeatures
    seg: Optional[Tensor]
    det: Optional[Tensor]


def forward(params: ModelParams, spec: ModelSpec, x: Tensor, mode: str = "eval",
            bn_updates: Optional[dict] = None) -> Outputs:
    """Encoder once, then every configured head on the same features."""
    feats = forward_encoder(params, spec, x, mode, bn_updates)
    seg = forward_seg(params, spec, feats) if "seg" in spec.heads else None
    det = forward_det(params, spec, feats) if "det" in spec.heads else None
    return Outputs(feats, seg, det)


# --------------------------------------------------------------------------
# checkpoints (.mtlw)

_CKPT_MAGIC = b"MTLW"
_CKPT_VERSION = 1


def checkpoint_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", _CKPT_VERSION, len(params)))
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        T.write_tensor(buf, t)
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, spec: Optional[ModelSpec] = None) -> None:
    """Write ``path`` and, when a spec is given, ``<path>.spec.json`` beside it."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))
    if spec is not None:
        with open(str(path) + ".spec.json", "w") as fh:
            json.dump(spec.to_json(), fh, indent=2, sort_keys=True)


def read_checkpoint(fh) -> ModelParams:
    if fh.read(4) != _CKPT_MAGIC:
        raise ValueError("not a .mtlw checkpoint")
    version, count = struct.unpack("<II", fh.read(8))
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        if name in out:
            raise ValueError(f"duplicate parameter {name!r}")
        out[name] = Tensor(T.read_tensor(fh), requires_grad=is_trainable(name))
    return ModelParams(out)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)


def load_spec(path) -> ModelSpec:
    with open(path) as fh:
        return ModelSpec.from_json(json.load(fh))
