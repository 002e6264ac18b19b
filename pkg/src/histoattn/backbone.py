"""Miniature EfficientNet-style classifier.

stem conv -> stages of MBConv blocks (expand 1x1, depthwise 3x3, squeeze-
excitation, project 1x1, residual) -> optional attention after each stage ->
global average pooling -> dense head. No batch normalisation.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import attention as attn
from . import ops
from .errors import ConfigError, DataError, IoError, ShapeError
from .formats import config_hash
from .tensor import Tensor, as_tensor, no_grad

ATTENTION_KINDS = ("none", "cbam", "self", "deformable")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class StageConfig:
    channels: int
    blocks: int = 1
    stride: int = 1
    expansion_ratio: int = 4
    se_ratio: float = 0.25


@dataclass
class HeadConfig:
    hidden: int = 256
    dropout_p: float = 0.4
    final_activation: str = "relu"
    dense_layers: int = 2


def _toy_stages() -> list[StageConfig]:
    return [StageConfig(16, 1, 2), StageConfig(32, 2, 2)]


@dataclass
class ModelConfig:
    in_channels: int = 3
    stem_channels: int = 8
    stages: list[StageConfig] = field(default_factory=_toy_stages)
    attention: str = "cbam"
    cbam_reduction: Optional[int] = None
    head: HeadConfig = field(default_factory=HeadConfig)
    num_classes: int = 2
    initializer: str = "he"
    seed: int = 0

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)

    def validate(self) -> None:
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.initializer not in ("normal", "he"):
            raise ConfigError(f"initializer must be 'normal' or 'he', got {self.initializer!r}")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        for s in self.stages:
            if s.stride not in (1, 2):
                raise ConfigError(f"stage stride must be 1 or 2, got {s.stride}")
            if not 0.0 < s.se_ratio <= 1.0:
                raise ConfigError(f"se_ratio must lie in (0, 1], got {s.se_ratio}")
            if s.blocks < 1 or s.channels < 1 or s.expansion_ratio < 1:
                raise ConfigError("stage channels, blocks and expansion_ratio must be positive")
        h = self.head
        if not 0.0 <= h.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if h.dense_layers not in (2, 3):
            raise ConfigError("dense_layers must be 2 or 3")
        if h.final_activation not in ("relu", "tanh"):
            raise ConfigError("final_activation must be 'relu' or 'tanh'")
        if self.num_classes != 2:
            raise ConfigError("only binary classification (num_classes=2) is supported")
        if min(self.in_channels, self.stem_channels, h.hidden) < 1:
            raise ConfigError("channel and hidden widths must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# initialisers
# ---------------------------------------------------------------------------

def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, 0.02, size=shape)


INITIALIZERS: dict[str, Callable] = {"he": _he, "normal": _normal}


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def se_width(channels: int, se_ratio: float) -> int:
    return max(1, int(round(channels * se_ratio)))


def se_block(f, w_reduce, w_expand, b_reduce=None, b_expand=None) -> Tensor:
    """Squeeze-and-excitation: GAP -> dense -> ReLU -> dense -> sigmoid -> rescale."""
    f = as_tensor(f)
    B, C = f.shape[:2]
    z = ops.relu(ops.dense(ops.global_pool(f, "avg"), w_reduce, b_reduce))
    gate = ops.sigmoid(ops.dense(z, w_expand, b_expand))
    return ops.mul(f, ops.reshape(gate, (B, C, 1, 1)))


@dataclass
class MBConvParams:
    expand: Tensor      # (C*e, C, 1, 1)
    depthwise: Tensor   # (C*e, 1, 3, 3)
    se_reduce_w: Tensor
    se_reduce_b: Tensor
    se_expand_w: Tensor
    se_expand_b: Tensor
    project: Tensor     # (C_out, C*e, 1, 1)

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{k}", v) for k, v in self.__dict__.items()]


def mbconv(f, p: MBConvParams, stride: int = 1) -> Tensor:
    f = as_tensor(f)
    hidden = p.expand.shape[0]
    x = ops.relu(ops.conv2d(f, p.expand))
    x = ops.relu(ops.conv2d(x, p.depthwise, stride=stride, padding=1, groups=hidden))
    x = se_block(x, p.se_reduce_w, p.se_expand_w, p.se_reduce_b, p.se_expand_b)
    x = ops.conv2d(x, p.project)
    if stride == 1 and x.shape[1] == f.shape[1]:
        x = ops.add(x, f)
    return x


def init_mbconv(cin: int, cout: int, expansion: int, se_ratio: float, rng, init) -> MBConvParams:
    hid = cin * expansion
    red = se_width(hid, se_ratio)
    return MBConvParams(
        expand=Tensor(init(rng, (hid, cin, 1, 1), cin)),
        depthwise=Tensor(init(rng, (hid, 1, 3, 3), 9)),
        se_reduce_w=Tensor(init(rng, (hid, red), hid)),
        se_reduce_b=Tensor(np.zeros(red)),
        se_expand_w=Tensor(init(rng, (red, hid), red)),
        se_expand_b=Tensor(np.zeros(hid)),
        project=Tensor(init(rng, (cout, hid, 1, 1), hid)),
    )


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.stem: Tensor
        self.blocks: list[list[tuple[MBConvParams, int]]] = []
        self.attention: list[object] = []
        self.head: list[tuple[Tensor, Tensor]] = []

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        out["stem.w"] = self.stem
        for si, (stage, att) in enumerate(zip(self.blocks, self.attention)):
            for bi, (p, _) in enumerate(stage):
                out.update(p.named(f"stages.{si}.blocks.{bi}"))
            if att is not None:
                for k, v in att.__dict__.items():
                    if isinstance(v, Tensor):
                        out[f"stages.{si}.attn.{k}"] = v
        for li, (w, b) in enumerate(self.head):
            out[f"head.{li}.w"] = w
            out[f"head.{li}.b"] = b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state(self, state) -> None:
        params = self.named_parameters()
        if list(params) != list(state):
            raise ShapeError("parameter names do not match the model")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, batch, training: bool = False, dropout_seed: int = 0) -> Tensor:
        return forward(self, batch, training, dropout_seed)


def _apply_attention(kind: str, f: Tensor, p) -> Tensor:
    if kind == "cbam":
        cp, sp = p
        return attn.cbam(f, cp, sp)
    if kind == "self":
        return attn.self_attention(f, p)
    if kind == "deformable":
        return attn.deformable_attention(f, p)
    return f


@dataclass
class _CBAMPair:
    channel_w0: Tensor
    channel_w1: Tensor
    spatial_kernel: Tensor
    reduction: int

    def unpack(self):
        return (attn.ChannelAttentionParams(self.channel_w0, self.channel_w1, self.reduction),
                attn.SpatialAttentionParams(self.spatial_kernel))


def build_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    init = INITIALIZERS[cfg.initializer]
    m = Model(cfg)
    m.stem = Tensor(init(rng, (cfg.stem_channels, cfg.in_channels, 3, 3), cfg.in_channels * 9))
    cin = cfg.stem_channels
    for s in cfg.stages:
        stage = []
        for bi in range(s.blocks):
            stride = s.stride if bi == 0 else 1
            stage.append((init_mbconv(cin, s.channels, s.expansion_ratio, s.se_ratio, rng, init), stride))
            cin = s.channels
        m.blocks.append(stage)
        if cfg.attention == "cbam":
            cp = attn.init_channel(cin, cfg.cbam_reduction, rng, init)
            sp = attn.init_spatial(rng, init)
            m.attention.append(_CBAMPair(cp.w0, cp.w1, sp.kernel, cp.reduction_ratio))
        elif cfg.attention == "self":
            m.attention.append(attn.init_self(cin, None, rng, init))
        elif cfg.attention == "deformable":
            m.attention.append(attn.init_deformable(cin, rng, init))
        else:
            m.attention.append(None)
    widths = [cin] + [cfg.head.hidden] * (cfg.head.dense_layers - 1) + [cfg.num_classes]
    for a, b in zip(widths[:-1], widths[1:]):
        m.head.append((Tensor(init(rng, (a, b), a)), Tensor(np.zeros(b))))
    for p in m.parameters():
        p.requires_grad = True
    return m


def features(m: Model, batch) -> Tensor:
    """Everything up to (and including) global average pooling."""
    x = as_tensor(batch)
    if x.ndim != 4 or x.shape[1] != m.config.in_channels:
        raise ShapeError(f"expected (B, {m.config.in_channels}, H, W) input, got {x.shape}")
    x = ops.relu(ops.conv2d(x, m.stem, stride=2, padding=1))
    for stage, att in zip(m.blocks, m.attention):
        for p, stride in stage:
            x = mbconv(x, p, stride)
        if att is not None:
            x = _apply_attention(m.config.attention, x, att.unpack() if isinstance(att, _CBAMPair) else att)
    return ops.global_pool(x, "avg")


def spatial_attention_maps(m: Model, batch) -> list[np.ndarray]:
    """CBAM spatial gates (B, 1, h, w) after each stage, for visual export."""
    if m.config.attention != "cbam":
        raise ConfigError("spatial attention maps need a CBAM model")
    maps = []
    with no_grad():
        x = ops.relu(ops.conv2d(as_tensor(batch), m.stem, stride=2, padding=1))
        for stage, att in zip(m.blocks, m.attention):
            for p, stride in stage:
                x = mbconv(x, p, stride)
            cp, sp = att.unpack()
            _, fc = attn.channel_attention(x, cp)
            m_s, x = attn.spatial_attention(fc, sp)
            maps.append(m_s.data.copy())
    return maps


def forward(m: Model, batch, training: bool = False, dropout_seed: int = 0) -> Tensor:
    """Logits of shape (B, num_classes); dropout is active only when training."""
    h = features(m, batch)
    act = ops.relu if m.config.head.final_activation == "relu" else ops.tanh
    for li, (w, b) in enumerate(m.head):
        h = ops.dense(h, w, b)
        if li < len(m.head) - 1:
            h = ops.dropout(act(h), m.config.head.dropout_p, training, dropout_seed + li)
    return h


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form count from layer shapes."""
    n = cfg.stem_channels * cfg.in_channels * 9
    cin = cfg.stem_channels
    for s in cfg.stages:
        for _ in range(s.blocks):
            hid = cin * s.expansion_ratio
            red = se_width(hid, s.se_ratio)
            n += hid * cin + hid * 9 + (hid * red + red) + (red * hid + hid) + s.channels * hid
            cin = s.channels
        n += attn.parameter_count(cfg.attention, cin, cfg.cbam_reduction)
    widths = [cin] + [cfg.head.hidden] * (cfg.head.dense_layers - 1) + [cfg.num_classes]
    n += sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    return n


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HACKPT01"


def save_checkpoint(path, model: Model, extra: Optional[dict] = None) -> None:
    """magic | u64 header length | JSON header | little-endian f64 parameters."""
    manifest, offset, blobs = [], 0, []
    for name, t in model.named_parameters().items():
        blob = t.data.astype("<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    cfg = model.config.to_dict()
    header = {"format": 1, "config": cfg, "seed": model.config.seed,
              "config_hash": config_hash(cfg), "parameters": manifest, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(CHECKPOINT_MAGIC) or len(buf) < 16:
        raise DataError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16:16 + hlen])
        model = build_model(ModelConfig.from_dict(header["config"]))
        data = buf[16 + hlen:]
        state = OrderedDict()
        for entry in header["parameters"]:
            start, nb = entry["offset"], entry["nbytes"]
            if start + nb > len(data):
                raise DataError("checkpoint truncated")
            state[entry["name"]] = np.frombuffer(data[start:start + nb], dtype="<f8").reshape(entry["shape"])
        model.load_state(state)
    except (ValueError, KeyError, TypeError, ShapeError, ConfigError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    return model, header
