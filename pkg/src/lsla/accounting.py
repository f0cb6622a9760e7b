"""Closed-form parameter and FLOP counts for ViT-LSLA configurations.

FLOPs use the multiply-accumulate convention: a product of an (m, k) and a
(k, n) matrix costs m*k*n. Elementwise work (bias adds, scale, masks,
softmax, norms, GELU, residual adds, pooling) costs one per output element.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field, replace

from .attention import AttentionConfig, BiasMode, ScaleMode
from .model import ModelConfig, Params, component_of, stage_layout

CONVENTION = (
    "1 MAC = 1 FLOP; elementwise ops (bias, scale, mask, softmax, norm, GELU, "
    "residual, pooling) counted at 1 FLOP per element"
)


@dataclass
class CostReport:
    rows: list[tuple[str, int, int]] = field(default_factory=list)
    convention: str = CONVENTION

    def add(self, component: str, params: int = 0, flops: int = 0) -> None:
        if params < 0 or flops < 0:
            raise ValueError("negative cost")
        self.rows.append((component, int(params), int(flops)))

    @property
    def total_params(self) -> int:
        return sum(r[1] for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r[2] for r in self.rows)

    def by_component(self) -> dict[str, tuple[int, int]]:
        out: dict[str, list[int]] = defaultdict(lambda: [0, 0])
        for name, p, f in self.rows:
            out[name][0] += p
            out[name][1] += f
        return {k: (v[0], v[1]) for k, v in out.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "params", "flops"])
        for row in self.rows:
            w.writerow(row)
        w.writerow(["total", self.total_params, self.total_flops])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(r[0]) for r in self.rows] + [9])
        lines = [f"{'component':<{width}}  {'params':>12}  {'flops':>15}"]
        lines += [f"{n:<{width}}  {p:>12,}  {f:>15,}" for n, p, f in self.rows]
        lines.append(f"{'total':<{width}}  {self.total_params:>12,}  {self.total_flops:>15,}")
        lines.append(f"({self.total_params / 1e6:.2f}M params, {self.total_flops / 1e9:.2f}G FLOPs; {self.convention})")
        return "\n".join(lines)


def linear_params(din: int, dout: int, bias: bool = True) -> int:
    return din * dout + (dout if bias else 0)


def conv_params(cin: int, cout: int) -> int:
    return 9 * cin * cout + cout


def norm_params(d: int) -> int:
    return 2 * d


def attention_params(cfg: AttentionConfig) -> int:
    d, n = cfg.dim, cfg.tokens
    count = linear_params(d, d)
    if cfg.has_k:
        count += linear_params(d, d)
    if cfg.has_v:
        count += linear_params(d, d)
    if cfg.final_projection:
        count += linear_params(d, d)
    if cfg.scale_mode is ScaleMode.DYNAMIC:
        count += n * n
    per_bias = cfg.heads * (n * n if cfg.bias_mode is BiasMode.DIRECT else (2 * cfg.window - 1) ** 2)
    count += per_bias * (int(cfg.inner_bias) + int(cfg.outer_bias))
    return count


def attention_flops(cfg: AttentionConfig, windows: int, masked: bool) -> int:
    d, n, h = cfg.dim, cfg.tokens, cfg.heads
    per = n * d * d + n * d  # query projection + bias
    per += (int(cfg.has_k) + int(cfg.has_v)) * (n * d * d + n * d)
    per += h * n * n * cfg.head_dim  # scores
    per += h * n * n  # fixed scale or dynamic-scale Hadamard
    per += h * n * n * (int(cfg.inner_bias) + int(masked))
    per += h * n * n  # softmax
    per += h * n * n * int(cfg.outer_bias)
    per += h * n * n * cfg.head_dim  # weighted sum
    if cfg.final_projection:
        per += n * d * d + n * d
    return windows * per


def _walk(cfg: ModelConfig, with_flops: bool, image_size: int) -> CostReport:
    if image_size != cfg.image_size:
        cfg = replace(cfg, image_size=image_size)
    rep = CostReport()
    r = cfg.mlp_ratio
    mid, d0 = cfg.stem_mid_channels, cfg.stages[0].dim
    h1, h2 = -(-image_size // 2), -(-image_size // 4)
    stem_p = conv_params(cfg.in_channels, mid) + norm_params(mid) + conv_params(mid, d0) + norm_params(d0)
    stem_f = h1 * h1 * (9 * cfg.in_channels * mid + mid) + 3 * h1 * h1 * mid  # conv+bias, norm, gelu
    stem_f += h2 * h2 * (9 * mid * d0 + d0) + h2 * h2 * d0
    rep.add("stem", stem_p, stem_f if with_flops else 0)
    layout = stage_layout(cfg)
    for st in layout:
        tokens = st.resolution * st.resolution
        windows = tokens // st.attention.tokens
        d = st.dim
        for j in range(st.depth):
            pre = f"stages.{st.index}.blocks.{j}"
            a_f = attention_flops(st.attention, windows, st.shift(j) > 0) + tokens * d  # + residual
            rep.add(f"{pre}.norm", 2 * norm_params(d), 2 * tokens * d if with_flops else 0)
            rep.add(f"{pre}.attn", attention_params(st.attention), a_f if with_flops else 0)
            mlp_f = tokens * (2 * r * d * d + r * d + d) + tokens * r * d + tokens * d  # fc1+fc2, gelu, residual
            rep.add(f"{pre}.mlp", linear_params(d, r * d) + linear_params(r * d, d), mlp_f if with_flops else 0)
        if st.index < len(layout) - 1:
            nxt = layout[st.index + 1].resolution
            m_f = nxt * nxt * (9 * d * 2 * d + 2 * d) + nxt * nxt * 2 * d
            rep.add(f"merges.{st.index}", conv_params(d, 2 * d) + norm_params(2 * d), m_f if with_flops else 0)
    last = layout[-1]
    dl = last.dim
    head_f = last.resolution**2 * dl + dl + linear_params(dl, cfg.num_classes)
    rep.add("head", norm_params(dl) + linear_params(dl, cfg.num_classes), head_f if with_flops else 0)
    return rep


def count_params(cfg: ModelConfig) -> CostReport:
    rep = _walk(cfg, False, cfg.image_size)
    rep.rows = [(n, p, 0) for n, p, _ in rep.rows]
    return rep


def count_flops(cfg: ModelConfig, image_size: int | None = None) -> CostReport:
    return _walk(cfg, True, cfg.image_size if image_size is None else image_size)


class AuditError(AssertionError):
    pass


@dataclass
class AuditReport:
    walked_total: int
    closed_form_total: int
    mismatches: dict[str, tuple[int, int]]

    @property
    def ok(self) -> bool:
        return not self.mismatches and self.walked_total == self.closed_form_total


def audit_params(cfg: ModelConfig, params: Params, strict: bool = True) -> AuditReport:
    """Walk the instantiated tensors and compare with the closed form per component."""
    walked: dict[str, int] = defaultdict(int)
    for name, t in params.items():
        walked[component_of(name)] += t.size
    closed = {k: p for k, (p, _) in count_params(cfg).by_component().items()}
    bad = {
        k: (walked.get(k, 0), closed.get(k, 0))
        for k in sorted(set(walked) | set(closed))
        if walked.get(k, 0) != closed.get(k, 0)
    }
    rep = AuditReport(sum(walked.values()), sum(closed.values()), bad)
    if strict and not rep.ok:
        lines = ", ".join(f"{k}: walked {w} vs closed-form {c}" for k, (w, c) in bad.items())
        raise AuditError(f"parameter audit mismatch: {lines}")
    return rep
