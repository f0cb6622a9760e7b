"""Registry of executable properties run by ``lsla verify``.

Each check takes a seed and returns a :class:`Outcome` holding the measured
quantity, the bound it must respect and a short detail string.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import attention as at
from . import numcore as nc
from .accounting import audit_params, count_flops
from .model import ModelConfig, block_forward, init_model

TOL_EQUIV = 1e-10
TOL_REDUCTION = 1e-12
TOL_GRAD = 1e-4
TOL_COST = 0.05


@dataclass
class Outcome:
    ok: bool
    measured: float
    bound: float
    detail: str = ""


@dataclass
class Property:
    name: str
    summary: str
    check: Callable[[int], Outcome]


REGISTRY: dict[str, Property] = {}


def prop(name: str, summary: str):
    def deco(fn):
        REGISTRY[name] = Property(name, summary, fn)
        return fn

    return deco


def _below(value: float, bound: float, detail: str = "") -> Outcome:
    return Outcome(bool(value < bound), float(value), bound, detail)


# numeric core


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv(x: np.ndarray, kern: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    b, h, w, cin = x.shape
    cout = kern.shape[3]
    ho, wo = -(-h // stride), -(-w // stride)
    out = np.zeros((b, ho, wo, cout))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    s = bias[co]
                    for di in range(3):
                        for dj in range(3):
                            yi, xj = i * stride + di - 1, j * stride + dj - 1
                            if 0 <= yi < h and 0 <= xj < w:
                                for ci in range(cin):
                                    s += x[n, yi, xj, ci] * kern[di, dj, ci, co]
                    out[n, i, j, co] = s
    return out


@prop("numcore-matmul-oracle", "matmul agrees with a triple-loop product")
def _matmul(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    return _below(np.abs(nc.matmul(nc.Tensor(a), nc.Tensor(b)).data - naive_matmul(a, b)).max(), 1e-12)


@prop("numcore-conv-oracle", "conv2d agrees with a direct loop convolution")
def _conv(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for stride in (1, 2):
        x = rng.standard_normal((2, 5, 6, 3))
        k, b = rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)
        got = nc.conv2d(nc.Tensor(x), nc.Tensor(k), nc.Tensor(b), stride).data
        worst = max(worst, np.abs(got - naive_conv(x, k, b, stride)).max())
    return _below(worst, 1e-12)


@prop("numcore-softmax-rows", "softmax rows sum to 1 and ignore row offsets")
def _softmax(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 9)) * 5
    s = nc.softmax_lastdim(nc.Tensor(x)).data
    shifted = nc.softmax_lastdim(nc.Tensor(x + rng.standard_normal((6, 1)) * 10)).data
    return _below(max(np.abs(s.sum(-1) - 1).max(), np.abs(s - shifted).max()), 1e-12)


@prop("numcore-gradcheck", "every differentiable primitive passes finite differences")
def _grad_ops(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    p = {
        "a": nc.parameter(rng.standard_normal((2, 3, 4))),
        "b": nc.parameter(rng.standard_normal((1, 4, 5))),
        "g": nc.parameter(rng.standard_normal(5)),
        "beta": nc.parameter(rng.standard_normal(5)),
        "k": nc.parameter(rng.standard_normal((3, 3, 2, 3))),
        "kb": nc.parameter(rng.standard_normal(3)),
        "img": nc.parameter(rng.standard_normal((1, 4, 4, 2))),
    }
    w = rng.standard_normal((2, 3, 5))

    def f():
        y = nc.matmul(p["a"], p["b"])
        y = nc.layer_norm(y, p["g"], p["beta"])
        y = nc.softmax_lastdim(nc.gelu(y) * 2.0)
        c = nc.conv2d(p["img"], p["k"], p["kb"], 2)
        c = nc.roll(c, (1,), (1,)).reshape(1, 12)
        return (y * w).sum() + nc.cross_entropy(c, [3]) + nc.take(c, np.array([0, 5]), 1).sum()

    worst = max(r.max_rel_error for r in nc.fd_gradcheck(f, p))
    return _below(worst, TOL_GRAD)


# attention algebra


@prop("equivalence-qk", "(X W̄) Xᵀ equals (X W_q)(X W_k)ᵀ over 1000 random instances")
def _equiv_qk(seed: int, trials: int = 1000) -> Outcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 9))
        n = int(rng.integers(1, 10))
        x, wq, wk = rng.standard_normal((n, d)), rng.standard_normal((d, d)), rng.standard_normal((d, d))
        lhs = (x @ at.construct_equivalent_qbar(wq, wk)) @ x.T
        rhs = (x @ wq) @ (x @ wk).T
        worst = max(worst, np.abs(lhs - rhs).max())
    return _below(worst, TOL_EQUIV, f"{trials} instances")


@prop("equivalence-vo", "A X W equals ((A X W_v) W_o) over 1000 random instances")
def _equiv_vo(seed: int, trials: int = 1000) -> Outcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 9))
        n = int(rng.integers(1, 10))
        a, x = rng.standard_normal((n, n)), rng.standard_normal((n, d))
        wv, wo = rng.standard_normal((d, d)), rng.standard_normal((d, d))
        lhs = a @ x @ at.fuse_vo(wv, wo)
        rhs = ((a @ x) @ wv) @ wo
        worst = max(worst, np.abs(lhs - rhs).max())
    return _below(worst, TOL_EQUIV, f"{trials} instances")


def _zero_linear_biases(p: at.AttentionParams) -> None:
    for name, t in p.named():
        if name.endswith("_bias") and name not in ("inner_bias", "outer_bias"):
            t.data[...] = 0.0


@prop("expressivity-qkv-as-qxx", "a bias-free single-head QKV attention is reproduced by constructed QXX weights")
def _expressivity(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d, m in ((4, 2), (8, 3), (6, 2)):
        cfg = at.AttentionConfig(d, 1, m, "qkv", True, "fixed", False, False)
        p = at.init_params(cfg, rng)
        for _, t in p.named():
            t.data[...] = rng.standard_normal(t.shape)
        _zero_linear_biases(p)
        x = nc.Tensor(rng.standard_normal((3, m * m, d)))
        qcfg, qp = at.qxx_from_qkv(cfg, p)
        worst = max(worst, np.abs(at.attend(cfg, p, x).data - at.attend(qcfg, qp, x).data).max())
    return _below(worst, TOL_EQUIV)


@prop("reduction-dynamic-scale", "LSLA with DS = 1/sqrt(d_h) and zero biases equals fixed-scale bias-free QXX")
def _reduction(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d, h, m in ((8, 2, 3), (12, 3, 2), (16, 4, 4)):
        full = at.AttentionConfig(d, h, m)
        plain = at.AttentionConfig(d, h, m, scale_mode="fixed", inner_bias=False, outer_bias=False)
        p = at.init_params(full, rng)
        p.q_weight.data[...] = rng.standard_normal((d, d))
        p.proj_weight.data[...] = rng.standard_normal((d, d))
        pp = at.AttentionParams(p.q_weight, p.q_bias, proj_weight=p.proj_weight, proj_bias=p.proj_bias)
        x = nc.Tensor(rng.standard_normal((4, m * m, d)))
        worst = max(worst, np.abs(at.attend(full, p, x).data - at.attend(plain, pp, x).data).max())
    return _below(worst, TOL_REDUCTION)


def _random_lsla(rng, d, h, m, bias_mode="direct"):
    cfg = at.AttentionConfig(d, h, m, bias_mode=bias_mode)
    p = at.init_params(cfg, rng)
    for _, t in p.named():
        t.data[...] = rng.standard_normal(t.shape) * 0.3
    return cfg, p


def mask_leak(seed: int, h: int = 14, m: int = 7, shift: int = 3) -> float:
    """Largest attention weight at an excluded pair, before or after the outer bias."""
    rng = np.random.default_rng(seed)
    cfg, p = _random_lsla(rng, 8, 2, m)
    mask = at.build_shift_mask(h, h, m, shift)
    x = nc.Tensor(rng.standard_normal((2 * mask.num_windows, m * m, 8)))
    pre, post, _ = at.attention_weights(cfg, p, x, mask)
    excluded = np.broadcast_to(~mask.keep[None, :, None], (2,) + (mask.num_windows, 2, m * m, m * m))
    pre = pre.data.reshape(excluded.shape)
    post = post.data.reshape(excluded.shape)
    return float(max(np.abs(pre[excluded]).max(), np.abs(post[excluded]).max()))


@prop("mask-soundness", "shifted windows put exactly zero weight on cross-region pairs (14x14, M=7, shift 3)")
def _mask(seed: int) -> Outcome:
    leak = mask_leak(seed)
    return Outcome(leak == 0.0, leak, 0.0, "max |weight| at excluded pairs")


def row_sum_error(seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    cfg, p = _random_lsla(rng, 8, 2, 7)
    mask = at.build_shift_mask(14, 14, 7, 3)
    x = nc.Tensor(rng.standard_normal((mask.num_windows, 49, 8)))
    pre, post, _ = at.attention_weights(cfg, p, x, mask)
    pre_err = np.abs(pre.data.sum(-1) - 1).max()
    gated = p.outer_bias.data[None] * mask.keep[:, None]
    post_err = np.abs(post.data.sum(-1) - (1 + gated.sum(-1))).max()
    return float(pre_err), float(post_err)


@prop("row-sum-law", "pre-outer rows sum to 1; post-outer rows add the unmasked outer-bias row sum")
def _rowsum(seed: int) -> Outcome:
    return _below(max(row_sum_error(seed)), TOL_REDUCTION)


@prop("attend-deterministic", "attend is bit-deterministic")
def _determinism(seed: int) -> Outcome:
    rng = np.random.default_rng(seed)
    cfg, p = _random_lsla(rng, 8, 2, 3)
    x = nc.Tensor(rng.standard_normal((4, 9, 8)))
    same = np.array_equal(at.attend(cfg, p, x).data, at.attend(cfg, p, x).data)
    return Outcome(same, 0.0 if same else 1.0, 0.0)


def block_gradcheck(seed: int, bias_mode: str = "direct") -> list[nc.GradReport]:
    """Finite-difference check over every parameter of one shifted LSLA block."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        image_size=16, stem_mid_channels=4, window=2, stages=((2, 8, 2),), num_classes=3, bias_mode=bias_mode
    )
    params = init_model(cfg, rng)
    prefix = "stages.0.blocks.1"
    block = {k: v for k, v in params.items() if k.startswith(prefix)}
    for k, t in block.items():
        t.data[...] += rng.standard_normal(t.shape) * 0.3
    acfg = at.AttentionConfig(8, 2, 2, bias_mode=bias_mode)
    x = nc.Tensor(rng.standard_normal((1, 4, 4, 8)))
    head = rng.standard_normal((8, 3))
    labels = [0, 2, 1, 1]

    def f():
        y = block_forward(acfg, params, prefix, x, 1)
        logits = nc.matmul(y.reshape(4, 4, 8), head).mean(axis=1)
        return nc.cross_entropy(logits, labels)

    return nc.fd_gradcheck(f, block)


@prop("gradcheck-lsla-block", "finite differences over a full shifted LSLA block (W_q, W_o, DS, B_i, B_o, MLP, norms)")
def _block_grad(seed: int) -> Outcome:
    reports = block_gradcheck(seed)
    worst = max(reports, key=lambda r: r.max_rel_error)
    return _below(worst.max_rel_error, TOL_GRAD, f"worst {worst.name}")


# costs

PUBLISHED_COSTS = {
    # (variant, final projection) -> (params in M, GFLOPs)
    ("qxx", True): (18.9, 3.5),
    ("qxv", False): (18.9, 3.5),
    ("qkv", True): (24.0, 4.4),
    ("qxx", False): (16.4, 3.1),
}


def cost_deviation(cfg: ModelConfig) -> tuple[float, float]:
    target = PUBLISHED_COSTS[(cfg.variant.value, cfg.final_projection)]
    rep = count_flops(cfg)
    return rep.total_params / 1e6 / target[0] - 1, rep.total_flops / 1e9 / target[1] - 1


@prop("cost-table", "analytic params/FLOPs within 5% of the published cost columns")
def _costs(seed: int) -> Outcome:
    worst, where = 0.0, ""
    for (variant, proj) in PUBLISHED_COSTS:
        dp, df = cost_deviation(ModelConfig(variant=variant, final_projection=proj))
        if max(abs(dp), abs(df)) > worst:
            worst, where = max(abs(dp), abs(df)), f"{variant}{'' if proj else '-np'}"
    return _below(worst, TOL_COST, f"worst {where}")


@prop("cost-qxv-equals-qxx", "QXV (no projection) and QXX cost the same")
def _qxv(seed: int) -> Outcome:
    a = count_flops(ModelConfig(variant="qxx"))
    b = count_flops(ModelConfig(variant="qxv", final_projection=False))
    diff = abs(a.total_params - b.total_params) + abs(a.total_flops - b.total_flops)
    return Outcome(diff == 0, float(diff), 0.0)


def ablation_grid() -> list[ModelConfig]:
    base = ModelConfig()
    return [
        replace(base, variant=v, final_projection=p, bias_mode=b)
        for v in ("qkv", "qxv", "qxx")
        for p in (True, False)
        for b in ("direct", "table")
    ]


@prop("audit-grid", "closed-form parameter count equals the instantiated walk for all 12 ablation configs")
def _audit(seed: int) -> Outcome:
    bad = []
    for cfg in ablation_grid():
        rep = audit_params(cfg, init_model(cfg, seed), strict=False)
        if not rep.ok:
            bad.append(f"{cfg.variant.value}/{cfg.final_projection}/{cfg.bias_mode.value}")
    return Outcome(not bad, float(len(bad)), 0.0, ", ".join(bad))


def select(pattern: str | None) -> list[Property]:
    if not pattern:
        return list(REGISTRY.values())
    return [p for n, p in REGISTRY.items() if fnmatch.fnmatch(n, pattern)]


def run(pattern: str | None = None, seed: int = 42) -> list[tuple[Property, Outcome]]:
    results = []
    for p in select(pattern):
        try:
            out = p.check(seed)
        except Exception as e:  # a crashing check is a failed check
            out = Outcome(False, math.nan, math.nan, f"{type(e).__name__}: {e}")
        results.append((p, out))
    return results
