"""ResNet1D and TCN encoders with a shared dense regression head.

Both families map a ``[B, C, 6000]`` batch to one distance per item:
encoder -> global average pool -> dense(size) -> relu -> dense(size/2)
-> relu -> dense(1).  The raw head output is mapped to kilometres with a
fixed affine (``target_scale``, ``target_offset`` buffers) that training
sets from the training targets; it is part of the model and saved with it.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import TRACE_LEN
from .errors import FormatError, InvalidArgument, NumericFailure
from .tensor import Tensor

DENSE_SIZES = (64, 128, 256)
ARCHS = ("resnet1d", "tcn")
_ARCH_ALIASES = {"resnet": "resnet1d", "resnet1d": "resnet1d", "tcn": "tcn"}


def normalize_arch(name: str) -> str:
    try:
        return _ARCH_ALIASES[str(name).lower()]
    except KeyError:
        raise InvalidArgument(f"unknown architecture {name!r}; expected one of {ARCHS}") from None


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "tcn"
    dense_size: int = 64
    in_channels: int = 3
    seed: int = 0
    allow_nonstandard_size: bool = False

    def __post_init__(self):
        object.__setattr__(self, "arch", normalize_arch(self.arch))

    def validate(self):
        if self.in_channels not in (3, 4):
            raise InvalidArgument(f"in_channels must be 3 or 4, got {self.in_channels}")
        if self.dense_size not in DENSE_SIZES and not self.allow_nonstandard_size:
            raise InvalidArgument(f"dense_size must be one of {DENSE_SIZES}, got {self.dense_size}")
        if self.dense_size < 2:
            raise InvalidArgument("dense_size must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgument("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class ResNetSpec:
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    kernel: int = 3


@dataclass(frozen=True)
class TCNSpec:
    levels: int = 11
    kernel: int = 3
    # narrowed from 32 so a 50-epoch desk run on 6000-sample traces fits a CPU budget
    channels: int = 8

    @property
    def dilations(self) -> list:
        return [2**i for i in range(self.levels)]


def receptive_field(spec: TCNSpec) -> int:
    """Input samples seen by one output of the causal stack (two convs per level)."""
    return 1 + sum(2 * (spec.kernel - 1) * d for d in spec.dilations)


class Model:
    """Named parameters, normalization buffers and the forward procedure."""

    def __init__(self, config: ModelConfig, spec):
        self.config = config
        self.spec = spec
        self.params: dict = {}
        self.buffers: dict = {}
        self.training = False
        self._forward = _resnet_forward if config.arch == "resnet1d" else _tcn_forward

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def __call__(self, x, training: bool | None = None, taps: list | None = None) -> Tensor:
        return forward(self, x, training=training, taps=taps)

    def state_bytes(self) -> bytes:
        parts = [p.data.tobytes() for p in self.params.values()]
        parts += [np.asarray(b).tobytes() for b in self.buffers.values()]
        return b"".join(parts)


# ---------------------------------------------------------------------------
# construction


class _Init:
    def __init__(self, model: Model, seed: int):
        self.model = model
        self.rng = np.random.default_rng(seed)
        self.dtype = T.default_dtype()

    def weight(self, name, shape):
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.model.params[name] = Tensor(data, requires_grad=True, name=name)

    def const(self, name, shape, value):
        self.model.params[name] = Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True, name=name)

    def conv(self, name, cout, cin, k, bias=True):
        self.weight(f"{name}.w", (cout, cin, k))
        if bias:
            self.const(f"{name}.b", (cout,), 0.0)

    def bn(self, name, ch):
        self.const(f"{name}.scale", (ch,), 1.0)
        self.const(f"{name}.shift", (ch,), 0.0)
        self.model.buffers[f"{name}.running_mean"] = np.zeros(ch, dtype=self.dtype)
        self.model.buffers[f"{name}.running_var"] = np.ones(ch, dtype=self.dtype)

    def dense(self, name, out_f, in_f):
        self.weight(f"{name}.w", (out_f, in_f))
        self.const(f"{name}.b", (out_f,), 0.0)


def build_model(config: ModelConfig, spec=None) -> Model:
    """Deterministically initialise a model; equal seeds give identical bytes."""
    config.validate()
    if spec is None:
        spec = ResNetSpec() if config.arch == "resnet1d" else TCNSpec()
    model = Model(config, spec)
    init = _Init(model, config.seed)
    if config.arch == "resnet1d":
        init.conv("stem.conv", spec.stem_channels, config.in_channels, spec.stem_kernel, bias=False)
        init.bn("stem.bn", spec.stem_channels)
        cin = spec.stem_channels
        for si, ch in enumerate(spec.stage_channels):
            for bi in range(spec.blocks_per_stage):
                stride = 2 if bi == 0 else 1
                pre = f"stage{si}.block{bi}"
                init.conv(f"{pre}.conv1", ch, cin, spec.kernel, bias=False)
                init.bn(f"{pre}.bn1", ch)
                init.conv(f"{pre}.conv2", ch, ch, spec.kernel, bias=False)
                init.bn(f"{pre}.bn2", ch)
                if stride != 1 or cin != ch:
                    init.conv(f"{pre}.down", ch, cin, 1, bias=False)
                    init.bn(f"{pre}.down_bn", ch)
                cin = ch
        features = cin
    else:
        cin = config.in_channels
        for i in range(spec.levels):
            init.conv(f"block{i}.conv1", spec.channels, cin, spec.kernel)
            init.conv(f"block{i}.conv2", spec.channels, spec.channels, spec.kernel)
            if cin != spec.channels:
                init.conv(f"block{i}.down", spec.channels, cin, 1)
            cin = spec.channels
        features = cin
    hidden = config.dense_size
    init.dense("head.fc1", hidden, features)
    init.dense("head.fc2", hidden // 2, hidden)
    init.dense("head.out", 1, hidden // 2)
    model.buffers["target_scale"] = np.ones(1, dtype=init.dtype)
    model.buffers["target_offset"] = np.zeros(1, dtype=init.dtype)
    return model


def param_count(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# forward


def _check_finite(t: Tensor, layer: str) -> Tensor:
    d = t.data
    if not np.isfinite(d.sum()) and not np.isfinite(d).all():
        raise NumericFailure(f"non-finite activation in layer {layer}", layer=layer)
    return t


def _ws_conv(model, name, x, stride=1, padding=0):
    w = T.weight_standardize(model.params[f"{name}.w"])
    return T.conv1d(x, w, None, stride=stride, padding=padding)


def _bn(model, name, x, training):
    return T.batch_norm(
        x,
        model.params[f"{name}.scale"],
        model.params[f"{name}.shift"],
        model.buffers[f"{name}.running_mean"],
        model.buffers[f"{name}.running_var"],
        training=training,
    )


def _resnet_forward(model: Model, x: Tensor, training: bool, taps) -> Tensor:
    spec = model.spec
    h = _ws_conv(model, "stem.conv", x, stride=spec.stem_stride, padding=spec.stem_kernel // 2)
    h = _check_finite(T.relu(_bn(model, "stem.bn", h, training)), "stem")
    pad = spec.kernel // 2
    for si in range(len(spec.stage_channels)):
        for bi in range(spec.blocks_per_stage):
            pre = f"stage{si}.block{bi}"
            stride = 2 if bi == 0 else 1
            o = T.relu(_bn(model, f"{pre}.bn1", _ws_conv(model, f"{pre}.conv1", h, stride, pad), training))
            o = _bn(model, f"{pre}.bn2", _ws_conv(model, f"{pre}.conv2", o, 1, pad), training)
            if f"{pre}.down.w" in model.params:
                short = _bn(model, f"{pre}.down_bn", _ws_conv(model, f"{pre}.down", h, stride, 0), training)
            else:
                short = h
            h = _check_finite(T.relu(T.residual_add(o, short)), pre)
            if taps is not None:
                taps.append((pre, h.data))
    return h


def _tcn_forward(model: Model, x: Tensor, training: bool, taps) -> Tensor:
    spec = model.spec
    p = model.params
    h = x
    for i, d in enumerate(spec.dilations):
        pre = f"block{i}"
        causal = (d * (spec.kernel - 1), 0)
        o = T.relu(T.conv1d(h, p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"], dilation=d, padding=causal))
        o = T.relu(T.conv1d(o, p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"], dilation=d, padding=causal))
        short = T.conv1d(h, p[f"{pre}.down.w"], p[f"{pre}.down.b"]) if f"{pre}.down.w" in p else h
        h = _check_finite(T.relu(T.residual_add(o, short)), pre)
        if taps is not None:
            taps.append((pre, h.data))
    return h


def forward(model: Model, x, training: bool | None = None, taps: list | None = None) -> Tensor:
    """Predicted epicentral distance in km for each item of ``x[B, C, 6000]``.

    ``taps``, when given, collects ``(layer, activation)`` pairs of the
    encoder blocks.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=T.default_dtype()))
    if x.data.ndim != 3:
        raise InvalidArgument(f"expected a [B, C, L] batch, got shape {x.shape}")
    B, C, L = x.shape
    if C != model.config.in_channels:
        raise InvalidArgument(f"model expects {model.config.in_channels} channels, got {C}")
    if L != TRACE_LEN:
        raise InvalidArgument(f"model expects {TRACE_LEN} samples, got {L}")
    training = model.training if training is None else training
    h = model._forward(model, x, training, taps)
    p = model.params
    z = T.global_avg_pool(h)
    z = T.relu(T.dense(z, p["head.fc1.w"], p["head.fc1.b"]))
    z = T.relu(T.dense(z, p["head.fc2.w"], p["head.fc2.b"]))
    z = T.reshape(T.dense(z, p["head.out.w"], p["head.out.b"]), (B,))
    out = T.scale_shift(z, float(model.buffers["target_scale"][0]), float(model.buffers["target_offset"][0]))
    return _check_finite(out, "head")


# ---------------------------------------------------------------------------
# checkpoints: b"EPD1", u32 manifest length, JSON manifest, float32 LE blobs

CHECKPOINT_MAGIC = b"EPD1"
_LEN = struct.Struct("<I")


def save_checkpoint(model: Model, path) -> None:
    entries, blobs, offset = [], [], 0
    tensors = [(n, t.data) for n, t in model.params.items()]
    tensors += [(f"buffer:{n}", b) for n, b in model.buffers.items()]
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    spec = asdict(model.spec)
    spec["kind"] = type(model.spec).__name__
    header = json.dumps({"config": asdict(model.config), "spec": spec, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}", offset=0)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated checkpoint header", offset=len(raw))
    (hlen,) = _LEN.unpack_from(raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})", offset=8) from None
    spec_d = dict(header["spec"])
    kind = spec_d.pop("kind")
    if "stage_channels" in spec_d:
        spec_d["stage_channels"] = tuple(spec_d["stage_channels"])
    spec = {"ResNetSpec": ResNetSpec, "TCNSpec": TCNSpec}[kind](**spec_d)
    model = build_model(ModelConfig(**header["config"]), spec)
    base = 8 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        start = base + entry["offset"]
        count = int(np.prod(shape))
        end = start + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated tensor {entry['name']}", offset=len(raw))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
        name = entry["name"]
        if name.startswith("buffer:"):
            model.buffers[name[len("buffer:"):]] = arr
        else:
            model.params[name].data = arr
    return model
