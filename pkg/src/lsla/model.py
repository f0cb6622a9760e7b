"""Hierarchical ViT-LSLA backbone and its checkpoint format.

Parameters live in one insertion-ordered ``dict[str, Tensor]``; every forward
function is a pure function of (config, params, input).
"""

from __future__ import annotations

import functools
import math
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .attention import (
    AttentionConfig,
    AttentionParams,
    BiasMode,
    ScaleMode,
    Variant,
    WindowMask,
    attend,
    build_shift_mask,
    init_params as init_attention,
    trunc_normal,
    window_partition,
    window_reverse,
)
from .numcore import ShapeError, Tensor

Params = dict[str, Tensor]
LN_EPS = 1e-5


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    heads: int

    def __post_init__(self):
        if self.depth < 1 or self.dim < 1 or self.heads < 1:
            raise ValueError(f"bad stage {self}")
        if self.dim % self.heads:
            raise ValueError(f"stage dim {self.dim} not divisible by heads {self.heads}")


def _stages(depths, dims, heads) -> tuple[StageConfig, ...]:
    return tuple(StageConfig(*t) for t in zip(depths, dims, heads))


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    in_channels: int = 3
    stem_mid_channels: int = 48
    window: int = 7
    stages: tuple[StageConfig, ...] = _stages((3, 4, 7, 2), (96, 192, 384, 768), (3, 6, 12, 24))
    mlp_ratio: int = 2
    num_classes: int = 102
    variant: Variant = Variant.QXX
    final_projection: bool = True
    scale_mode: ScaleMode = ScaleMode.DYNAMIC
    inner_bias: bool = True
    outer_bias: bool = True
    bias_mode: BiasMode = BiasMode.DIRECT

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "scale_mode", ScaleMode(self.scale_mode))
        object.__setattr__(self, "bias_mode", BiasMode(self.bias_mode))
        if not self.stages:
            raise ValueError("need at least one stage")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.dim != 2 * a.dim:
                raise ValueError("each stage must double the previous stage's dim")
        if self.image_size % 4:
            raise ValueError(f"image size {self.image_size} not divisible by 4")
        for s in stage_layout(self):
            if s.resolution % s.window:
                raise ValueError(
                    f"stage resolution {s.resolution} not divisible by window {s.window}"
                )

    def attention(self, dim: int, heads: int, window: int) -> AttentionConfig:
        return AttentionConfig(
            dim=dim,
            heads=heads,
            window=window,
            variant=self.variant,
            final_projection=self.final_projection,
            scale_mode=self.scale_mode,
            inner_bias=self.inner_bias,
            outer_bias=self.outer_bias,
            bias_mode=self.bias_mode,
        )

    # key=value text form, shared by checkpoints and --config files

    def to_text(self) -> str:
        vals = {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "stem_mid_channels": self.stem_mid_channels,
            "window": self.window,
            "depths": ",".join(str(s.depth) for s in self.stages),
            "dims": ",".join(str(s.dim) for s in self.stages),
            "heads": ",".join(str(s.heads) for s in self.stages),
            "mlp_ratio": self.mlp_ratio,
            "num_classes": self.num_classes,
            "variant": self.variant.value,
            "final_projection": str(self.final_projection).lower(),
            "scale_mode": self.scale_mode.value,
            "inner_bias": str(self.inner_bias).lower(),
            "outer_bias": str(self.outer_bias).lower(),
            "bias_mode": self.bias_mode.value,
        }
        return "".join(f"{k}={v}\n" for k, v in vals.items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
        ints = lambda s: tuple(int(t) for t in s.split(","))
        flag = lambda s: {"true": True, "false": False}[s.lower()]
        kw: dict = {}
        for key in ("image_size", "in_channels", "stem_mid_channels", "window", "mlp_ratio", "num_classes"):
            if key in raw:
                kw[key] = int(raw.pop(key))
        for key in ("final_projection", "inner_bias", "outer_bias"):
            if key in raw:
                kw[key] = flag(raw.pop(key))
        for key in ("variant", "scale_mode", "bias_mode"):
            if key in raw:
                kw[key] = raw.pop(key)
        if {"depths", "dims", "heads"} & raw.keys():
            try:
                kw["stages"] = _stages(ints(raw.pop("depths")), ints(raw.pop("dims")), ints(raw.pop("heads")))
            except KeyError as e:
                raise ValueError(f"config missing {e.args[0]}") from None
        if raw:
            raise ValueError(f"unknown config keys: {sorted(raw)}")
        return cls(**kw)


@dataclass(frozen=True)
class StageLayout:
    index: int
    resolution: int
    window: int
    dim: int
    heads: int
    depth: int
    attention: AttentionConfig

    def shift(self, block_index: int) -> int:
        if block_index % 2 == 0 or self.resolution <= self.window:
            return 0
        return self.window // 2


def stage_layout(cfg: ModelConfig) -> list[StageLayout]:
    """Per-stage resolution and effective window.

    Maps smaller than the window are covered by a single window of their own
    size, and never shifted.
    """
    out = []
    res = cfg.image_size // 4
    for i, s in enumerate(cfg.stages):
        if i:
            res = -(-res // 2)
        win = min(cfg.window, res)
        out.append(StageLayout(i, res, win, s.dim, s.heads, s.depth, cfg.attention(s.dim, s.heads, win)))
    return out


# parameters


def _kaiming(rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def init_model(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> Params:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p: Params = {}

    def put(name, arr):
        p[name] = nc.parameter(arr, name=name)

    def norm(prefix, d):
        put(f"{prefix}.weight", np.ones(d))
        put(f"{prefix}.bias", np.zeros(d))

    def conv(prefix, cin, cout):
        put(f"{prefix}.weight", _kaiming(rng, (3, 3, cin, cout)))
        put(f"{prefix}.bias", np.zeros(cout))

    def lin(prefix, din, dout):
        put(f"{prefix}.weight", trunc_normal(rng, (din, dout)))
        put(f"{prefix}.bias", np.zeros(dout))

    d0 = cfg.stages[0].dim
    conv("stem.conv1", cfg.in_channels, cfg.stem_mid_channels)
    norm("stem.norm1", cfg.stem_mid_channels)
    conv("stem.conv2", cfg.stem_mid_channels, d0)
    norm("stem.norm2", d0)
    layout = stage_layout(cfg)
    for st in layout:
        for j in range(st.depth):
            pre = f"stages.{st.index}.blocks.{j}"
            norm(f"{pre}.norm1", st.dim)
            for name, t in init_attention(st.attention, rng).named():
                t.name = f"{pre}.attn.{name}"
                p[t.name] = t
            norm(f"{pre}.norm2", st.dim)
            lin(f"{pre}.mlp.fc1", st.dim, cfg.mlp_ratio * st.dim)
            lin(f"{pre}.mlp.fc2", cfg.mlp_ratio * st.dim, st.dim)
        if st.index < len(layout) - 1:
            conv(f"merges.{st.index}.conv", st.dim, 2 * st.dim)
            norm(f"merges.{st.index}.norm", 2 * st.dim)
    dl = cfg.stages[-1].dim
    norm("head.norm", dl)
    lin("head.fc", dl, cfg.num_classes)
    return p


def attention_params(params: Params, prefix: str) -> AttentionParams:
    pre = prefix + "."
    return AttentionParams.from_named({k[len(pre):]: v for k, v in params.items() if k.startswith(pre)})


def component_of(name: str) -> str:
    """Accounting component a parameter belongs to."""
    parts = name.split(".")
    if parts[0] == "stages":
        leaf = parts[4]
        return ".".join(parts[:4] + ["norm" if leaf.startswith("norm") else leaf])
    if parts[0] == "merges":
        return ".".join(parts[:2])
    return parts[0]


# forward


def _ln(params: Params, prefix: str, x: Tensor) -> Tensor:
    return nc.layer_norm(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], LN_EPS)


def _conv(params: Params, prefix: str, x: Tensor, stride: int) -> Tensor:
    return nc.conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride)


def stem_forward(cfg: ModelConfig, params: Params, x: Tensor) -> Tensor:
    """(b, H, W, 3) -> (b, H/4, W/4, stage-1 dim)."""
    if x.ndim != 4 or x.shape[1] % 4 or x.shape[2] % 4 or x.shape[3] != cfg.in_channels:
        raise ShapeError(f"stem input {x.shape} needs (b, 4k, 4k, {cfg.in_channels})")
    x = nc.gelu(_ln(params, "stem.norm1", _conv(params, "stem.conv1", x, 2)))
    return _ln(params, "stem.norm2", _conv(params, "stem.conv2", x, 2))


@functools.lru_cache(maxsize=64)
def _mask(h: int, w: int, window: int, shift: int) -> WindowMask:
    return build_shift_mask(h, w, window, shift)


def _windows(x: Tensor, window: int, shift: int) -> tuple[Tensor, WindowMask | None]:
    _, h, w, _ = x.shape
    if shift:
        x = nc.roll(x, (-shift, -shift), (1, 2))
    return window_partition(x, window), (_mask(h, w, window, shift) if shift else None)


def block_forward(acfg: AttentionConfig, params: Params, prefix: str, x: Tensor, block_index: int) -> Tensor:
    """Pre-norm residual block: attention over (shifted) windows, then MLP.

    Odd blocks shift by window // 2 unless the map is a single window.
    """
    b, h, w, c = x.shape
    window = acfg.window
    if h % window or w % window:
        raise ShapeError(f"block input {h}x{w} not divisible by window {window}")
    shift = window // 2 if block_index % 2 and min(h, w) > window else 0
    y = _ln(params, f"{prefix}.norm1", x)
    win, mask = _windows(y, window, shift)
    y = attend(acfg, attention_params(params, f"{prefix}.attn"), win, mask)
    y = window_reverse(y, window, h, w)
    if shift:
        y = nc.roll(y, (shift, shift), (1, 2))
    x = x + y
    y = _ln(params, f"{prefix}.norm2", x)
    y = nc.linear(y, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"])
    y = nc.gelu(y)
    y = nc.linear(y, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    return x + y


def patch_merge(params: Params, prefix: str, x: Tensor) -> Tensor:
    """3x3 stride-2 conv doubling channels, then layer norm. Odd maps round up."""
    return _ln(params, f"{prefix}.norm", _conv(params, f"{prefix}.conv", x, 2))


def _check_images(cfg: ModelConfig, images: Tensor) -> None:
    want = (cfg.image_size, cfg.image_size, cfg.in_channels)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ShapeError(f"images {images.shape} do not match (b, {want[0]}, {want[1]}, {want[2]})")


def features(cfg: ModelConfig, params: Params, images: Tensor, stop: tuple[int, int] | None = None):
    """Run stem and stages. With ``stop=(stage, block)`` return that block's input instead."""
    images = nc.as_tensor(images)
    _check_images(cfg, images)
    x = stem_forward(cfg, params, images)
    layout = stage_layout(cfg)
    for st in layout:
        for j in range(st.depth):
            if stop == (st.index, j):
                return x
            x = block_forward(st.attention, params, f"stages.{st.index}.blocks.{j}", x, j)
        if st.index < len(layout) - 1:
            x = patch_merge(params, f"merges.{st.index}", x)
    if stop is not None:
        raise IndexError(f"no block {stop}")
    return x


def model_forward(cfg: ModelConfig, params: Params, images: Tensor) -> Tensor:
    """images (b, H, W, C) -> logits (b, num_classes)."""
    x = features(cfg, params, images)
    x = nc.mean(x, axis=(1, 2))
    x = _ln(params, "head.norm", x)
    return nc.linear(x, params["head.fc.weight"], params["head.fc.bias"])


def block_attention_input(cfg: ModelConfig, params: Params, images: Tensor, stage: int, block: int):
    """Windows and mask fed to one block's attention, for inspection."""
    layout = stage_layout(cfg)
    if not 0 <= stage < len(layout) or not 0 <= block < layout[stage].depth:
        raise IndexError(f"no block ({stage}, {block})")
    st = layout[stage]
    x = features(cfg, params, images, stop=(stage, block))
    y = _ln(params, f"stages.{stage}.blocks.{block}.norm1", x)
    win, mask = _windows(y, st.window, st.shift(block))
    return st, win, mask


# checkpoints

MAGIC = b"LSLA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(cfg: ModelConfig, params: Params) -> bytes:
    cfg_blob = cfg.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(cfg_blob)), cfg_blob]
    parts.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(cfg: ModelConfig, params: Params, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(cfg, params))


def parse_checkpoint(blob: bytes) -> tuple[ModelConfig, Params]:
    if len(blob) < 4 + 4 + 8 + 4 + 4 or blob[:4] != MAGIC:
        raise CheckpointError("not an LSLA checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = take("<Q")
    cfg = ModelConfig.from_text(body[pos : pos + clen].decode("utf-8"))
    pos += clen
    (count,) = take("<I")
    params: Params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}Q")
        n = int(np.prod(dims))
        if pos + 8 * n > len(body):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
        if name in params:
            raise CheckpointError(f"duplicate tensor {name}")
        params[name] = nc.parameter(arr, name=name)
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    expected = init_shapes(cfg)
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError("checkpoint tensors do not match its config")
    return cfg, params


def load_checkpoint(path) -> tuple[ModelConfig, Params]:
    return parse_checkpoint(Path(path).read_bytes())


@functools.lru_cache(maxsize=16)
def _init_shapes(cfg: ModelConfig) -> tuple:
    return tuple((k, v.shape) for k, v in init_model(cfg, 0).items())


def init_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return dict(_init_shapes(cfg))
