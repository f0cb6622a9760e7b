"""Windowed attention: QKV / QXV / QXX variants with the self-limiting terms.

Scores for head h are ``q_h k_hᵀ`` where the key role is played by the
projected keys (QKV) or by the raw input split into heads (QXV, QXX).
They are scaled by ``1/sqrt(d_h)`` or multiplied elementwise by a learnable
dynamic-scale matrix shared over heads, shifted by an optional inner bias
and the window mask, normalised, then an optional outer bias is added to
the attention weights before they mix the values.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Iterator

import numpy as np

from . import numcore as nc
from .numcore import ShapeError, Tensor

MASK_SENTINEL = -1e9


class Variant(str, Enum):
    QKV = "qkv"
    QXV = "qxv"
    QXX = "qxx"


class ScaleMode(str, Enum):
    FIXED = "fixed"
    DYNAMIC = "dynamic"


class BiasMode(str, Enum):
    DIRECT = "direct"
    TABLE = "table"


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int
    window: int = 7
    variant: Variant = Variant.QXX
    final_projection: bool = True
    scale_mode: ScaleMode = ScaleMode.DYNAMIC
    inner_bias: bool = True
    outer_bias: bool = True
    bias_mode: BiasMode = BiasMode.DIRECT

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "scale_mode", ScaleMode(self.scale_mode))
        object.__setattr__(self, "bias_mode", BiasMode(self.bias_mode))
        if self.dim < 1 or self.heads < 1 or self.window < 1:
            raise ValueError("dim, heads and window must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def tokens(self) -> int:
        return self.window * self.window

    @property
    def has_k(self) -> bool:
        return self.variant is Variant.QKV

    @property
    def has_v(self) -> bool:
        return self.variant in (Variant.QKV, Variant.QXV)

    def bias_shape(self) -> tuple[int, ...]:
        if self.bias_mode is BiasMode.DIRECT:
            return (self.heads, self.tokens, self.tokens)
        return (self.heads, (2 * self.window - 1) ** 2)


@dataclass
class AttentionParams:
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor | None = None
    k_bias: Tensor | None = None
    v_weight: Tensor | None = None
    v_bias: Tensor | None = None
    proj_weight: Tensor | None = None
    proj_bias: Tensor | None = None
    dynamic_scale: Tensor | None = None
    inner_bias: Tensor | None = None
    outer_bias: Tensor | None = None

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                yield f.name, t

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor]) -> "AttentionParams":
        return cls(**tensors)

    def check(self, cfg: AttentionConfig) -> None:
        d, n = cfg.dim, cfg.tokens
        expect = {
            "q_weight": (d, d),
            "q_bias": (d,),
            "k_weight": (d, d) if cfg.has_k else None,
            "k_bias": (d,) if cfg.has_k else None,
            "v_weight": (d, d) if cfg.has_v else None,
            "v_bias": (d,) if cfg.has_v else None,
            "proj_weight": (d, d) if cfg.final_projection else None,
            "proj_bias": (d,) if cfg.final_projection else None,
            "dynamic_scale": (n, n) if cfg.scale_mode is ScaleMode.DYNAMIC else None,
            "inner_bias": cfg.bias_shape() if cfg.inner_bias else None,
            "outer_bias": cfg.bias_shape() if cfg.outer_bias else None,
        }
        for name, shape in expect.items():
            t = getattr(self, name)
            got = None if t is None else t.shape
            if got != shape:
                raise ShapeError(f"attention param {name}: expected {shape}, got {got}")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at +-2 std by redrawing."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: AttentionConfig, rng: np.random.Generator) -> AttentionParams:
    d = cfg.dim

    def lin():
        return nc.parameter(trunc_normal(rng, (d, d))), nc.parameter(np.zeros(d))

    q_w, q_b = lin()
    p = AttentionParams(q_weight=q_w, q_bias=q_b)
    if cfg.has_k:
        p.k_weight, p.k_bias = lin()
    if cfg.has_v:
        p.v_weight, p.v_bias = lin()
    if cfg.final_projection:
        p.proj_weight, p.proj_bias = lin()
    if cfg.scale_mode is ScaleMode.DYNAMIC:
        p.dynamic_scale = nc.parameter(np.full((cfg.tokens, cfg.tokens), 1.0 / math.sqrt(cfg.head_dim)))
    if cfg.inner_bias:
        p.inner_bias = nc.parameter(np.zeros(cfg.bias_shape()))
    if cfg.outer_bias:
        p.outer_bias = nc.parameter(np.zeros(cfg.bias_shape()))
    return p


# windows and masks


def window_partition(x: Tensor, window: int) -> Tensor:
    """(b, h, w, c) -> (b * h/M * w/M, M*M, c), tiles in row-major order."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by window {window}")
    x = x.reshape(b, h // window, window, w // window, window, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, window * window, c)


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    nw, n, c = windows.shape
    per_image = (h // window) * (w // window)
    if h % window or w % window or n != window * window or nw % per_image:
        raise ShapeError(f"{windows.shape} windows inconsistent with {h}x{w} map and window {window}")
    b = nw // per_image
    x = windows.reshape(b, h // window, w // window, window, window, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


@dataclass(frozen=True)
class WindowMask:
    additive: np.ndarray  # (nW, N, N), 0 or MASK_SENTINEL
    keep: np.ndarray  # (nW, N, N) bool, False at excluded pairs

    @property
    def num_windows(self) -> int:
        return self.additive.shape[0]


def region_labels(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Region id of each position of the (already cyclically shifted) map."""
    labels = np.zeros((h, w), dtype=np.int64)
    bounds = lambda n: ((0, n - window), (n - window, n - shift), (n - shift, n))
    rid = 0
    for r0, r1 in bounds(h):
        for c0, c1 in bounds(w):
            labels[r0:r1, c0:c1] = rid
            rid += 1
    return labels


def build_shift_mask(h: int, w: int, window: int, shift: int) -> WindowMask:
    if not 0 <= shift < window:
        raise ValueError(f"shift {shift} outside [0, {window})")
    if h % window or w % window:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by window {window}")
    nw = (h // window) * (w // window)
    n = window * window
    if shift == 0:
        return WindowMask(np.zeros((nw, n, n)), np.ones((nw, n, n), dtype=bool))
    lab = region_labels(h, w, window, shift).astype(np.float64)[None, :, :, None]
    lab = window_partition(nc.as_tensor(lab), window).data[..., 0]  # nW, N
    keep = lab[:, :, None] == lab[:, None, :]
    return WindowMask(np.where(keep, 0.0, MASK_SENTINEL), keep)


def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    span = 2 * window - 1
    return (rel[0] + window - 1) * span + (rel[1] + window - 1)


def _bias_values(cfg: AttentionConfig, bias: Tensor) -> Tensor:
    if cfg.bias_mode is BiasMode.DIRECT:
        return bias
    n = cfg.tokens
    return nc.take(bias, relative_position_index(cfg.window).reshape(-1), axis=1).reshape(cfg.heads, n, n)


# the attention itself


def _split_heads(t: Tensor, heads: int) -> Tensor:
    bw, n, d = t.shape
    return t.reshape(bw, n, heads, d // heads).transpose(0, 2, 1, 3)


def attention_weights(
    cfg: AttentionConfig, params: AttentionParams, x: Tensor, mask: WindowMask | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Return (pre-outer weights, post-outer weights, per-head values).

    Weights are (windows, H, N, N); values are (windows, H, N, d_h).
    """
    x = nc.as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (cfg.tokens, cfg.dim):
        raise ShapeError(f"attention input {x.shape} does not match (*, {cfg.tokens}, {cfg.dim})")
    bw, n, d = x.shape
    heads = cfg.heads
    q = _split_heads(nc.linear(x, params.q_weight, params.q_bias), heads)
    xh = _split_heads(x, heads)
    if cfg.has_k:
        keys = _split_heads(nc.linear(x, params.k_weight, params.k_bias), heads)
    else:
        keys = xh
    if cfg.has_v:
        values = _split_heads(nc.linear(x, params.v_weight, params.v_bias), heads)
    else:
        values = xh

    scores = nc.matmul(q, keys.transpose(0, 1, 3, 2))
    if cfg.scale_mode is ScaleMode.DYNAMIC:
        scores = scores * params.dynamic_scale
    else:
        scores = scores * (1.0 / math.sqrt(cfg.head_dim))
    if cfg.inner_bias:
        scores = scores + _bias_values(cfg, params.inner_bias)
    if mask is not None:
        nw = mask.num_windows
        if bw % nw:
            raise ShapeError(f"{bw} windows not a multiple of mask's {nw}")
        scores = scores.reshape(bw // nw, nw, heads, n, n) + mask.additive[None, :, None]
        scores = scores.reshape(bw, heads, n, n)
    attn = nc.softmax_lastdim(scores)
    post = attn
    if cfg.outer_bias:
        outer = _bias_values(cfg, params.outer_bias)
        if mask is None:
            post = attn + outer
        else:
            nw = mask.num_windows
            gated = outer * mask.keep[:, None].astype(np.float64)  # nW, H, N, N
            post = (attn.reshape(bw // nw, nw, heads, n, n) + gated).reshape(bw, heads, n, n)
    return attn, post, values


def attend(cfg: AttentionConfig, params: AttentionParams, x: Tensor, mask: WindowMask | None = None) -> Tensor:
    """Multi-head windowed attention over ``x`` of shape (windows, N, d)."""
    _, post, values = attention_weights(cfg, params, x, mask)
    bw, n, d = x.shape
    y = nc.matmul(post, values).transpose(0, 2, 1, 3).reshape(bw, n, d)
    if cfg.final_projection:
        y = nc.linear(y, params.proj_weight, params.proj_bias)
    return y


# equivalence constructors

_fault_skew = 0.0


def set_fault(skew: float) -> None:
    """Negative-control hook: perturb fuse_vo by ``skew`` (0 disables)."""
    global _fault_skew
    _fault_skew = float(skew)


def construct_equivalent_qbar(w_q: np.ndarray, w_k: np.ndarray) -> np.ndarray:
    """Single query matrix W̄ with (X W̄) Xᵀ == (X W_q)(X W_k)ᵀ."""
    w_q, w_k = np.asarray(w_q, dtype=np.float64), np.asarray(w_k, dtype=np.float64)
    if w_q.ndim != 2 or w_q.shape[0] != w_q.shape[1] or w_q.shape != w_k.shape:
        raise ShapeError(f"need equal square matrices, got {w_q.shape} and {w_k.shape}")
    return w_q @ w_k.T


def fuse_vo(w_v: np.ndarray, w_o: np.ndarray) -> np.ndarray:
    """Single output matrix W with A X W == A (X W_v) W_o."""
    w_v, w_o = np.asarray(w_v, dtype=np.float64), np.asarray(w_o, dtype=np.float64)
    if w_v.ndim != 2 or w_v.shape[0] != w_v.shape[1] or w_v.shape != w_o.shape:
        raise ShapeError(f"need equal square matrices, got {w_v.shape} and {w_o.shape}")
    fused = w_v @ w_o
    if _fault_skew:
        fused = fused + _fault_skew
    return fused


def qxx_from_qkv(cfg: AttentionConfig, params: AttentionParams) -> tuple[AttentionConfig, AttentionParams]:
    """Rewrite a bias-free QKV attention as an exactly equivalent QXX one.

    Exact only for a single head; with several heads the raw-input key/value
    split cannot absorb cross-head mixing.
    """
    if cfg.variant is not Variant.QKV or not cfg.final_projection:
        raise ValueError("need a QKV attention with a final projection")
    qbar = construct_equivalent_qbar(params.q_weight.data, params.k_weight.data)
    fused = fuse_vo(params.v_weight.data, params.proj_weight.data)
    d = cfg.dim
    new_cfg = replace(cfg, variant=Variant.QXX)
    new = AttentionParams(
        q_weight=nc.parameter(qbar),
        q_bias=nc.parameter(np.zeros(d)),
        proj_weight=nc.parameter(fused),
        proj_bias=nc.parameter(np.zeros(d)),
        dynamic_scale=params.dynamic_scale,
        inner_bias=params.inner_bias,
        outer_bias=params.outer_bias,
    )
    return new_cfg, new


# inspection


@dataclass
class BiasProfile:
    ds: np.ndarray
    inner_bias: np.ndarray
    attn_pre: np.ndarray
    attn_post: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["index", "ds", "inner_bias", "attn_pre", "attn_post"])
        for k in range(self.ds.size):
            writer.writerow(
                [k] + [f"{float(col[k]):.17g}" for col in (self.ds, self.inner_bias, self.attn_pre, self.attn_post)]
            )
        return buf.getvalue()


def bias_profile(
    cfg: AttentionConfig,
    params: AttentionParams,
    x: Tensor,
    query_index: int,
    head: int,
    mask: WindowMask | None = None,
) -> BiasProfile:
    """Per-key rows for one query of one window: scale, inner bias, weights.

    ``x`` is a single window (1, N, d); ``mask`` if given covers that window only.
    """
    n = cfg.tokens
    if not 0 <= query_index < n:
        raise IndexError(f"query index {query_index} outside [0, {n})")
    if not 0 <= head < cfg.heads:
        raise IndexError(f"head {head} outside [0, {cfg.heads})")
    x = nc.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.shape[0] != 1:
        raise ShapeError("bias_profile takes exactly one window")
    pre, post, _ = attention_weights(cfg, params, x.detach(), mask)
    if cfg.scale_mode is ScaleMode.DYNAMIC:
        ds = params.dynamic_scale.data[query_index].copy()
    else:
        ds = np.full(n, 1.0 / math.sqrt(cfg.head_dim))
    if cfg.inner_bias:
        inner = _bias_values(cfg, params.inner_bias.detach()).data[head, query_index].copy()
    else:
        inner = np.zeros(n)
    return BiasProfile(ds, inner, pre.data[0, head, query_index].copy(), post.data[0, head, query_index].copy())
