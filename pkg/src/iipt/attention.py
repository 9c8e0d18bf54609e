"""Intra-inter-part attention and its class-token spatial/temporal variants.

``mhsa`` is plain multi-head scaled dot-product attention over the trailing
two axes (any leading batch axes broadcast). ``iipa`` adds a linear intra
branch on the values. The layer-level ops (``flat_attention_layer``,
``s_iipa``, ``t_iipa``) own the q/k/v projections and the output projection;
the output projection applies to the attention (inter) branch only, with the
intra branch added afterwards.

Token rows are expected class-token first, then frame-major part tokens. The
spatial variant runs one attention map per frame over that frame's parts
(class key/value prepended per frame); the temporal variant is its mirror,
one map per part across frames. Both route the class query through a single
global attention over all tokens. Within one call every reduction runs in
input token order, which is documented here because permutation tests rely
on it: reordering frame blocks reorders the inputs of the class-branch
reductions (bit-level drift allowed), while the per-frame token maps never
mix frames, so their outputs permute bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


@dataclass
class AttentionParams:
    """Projection weights for one attention block. ``w_intra`` is None when
    the block was built for standard (intra-free) attention."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    w_out: Tensor
    b_out: Tensor
    heads: int
    w_intra: Tensor | None = None
    b_intra: Tensor | None = None

    def tensors(self) -> list[Tensor | None]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
                self.w_out, self.b_out, self.w_intra, self.b_intra]


@dataclass
class AttentionConfig:
    mode: str = "iipa"      # "iipa" | "standard"
    axis: str = "spatial"   # "spatial" | "temporal" | "flat"

    def __post_init__(self):
        if self.mode not in ("iipa", "standard"):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.axis not in ("spatial", "temporal", "flat"):
            raise ValueError(f"unknown attention axis {self.axis!r}")


def init_attention_params(channels: int, heads: int, intra: bool, rng: np.random.Generator) -> AttentionParams:
    if channels % heads:
        raise ValueError(f"heads ({heads}) must divide channels ({channels})")

    def affine():
        bound = 1.0 / math.sqrt(channels)
        return Tensor(rng.uniform(-bound, bound, size=(channels, channels))), Tensor(np.zeros(channels))

    wq, bq = affine()
    wk, bk = affine()
    wv, bv = affine()
    wo, bo = affine()
    wi, bi = affine() if intra else (None, None)
    return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo, heads, wi, bi)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    d = c // heads
    x = ad.reshape(x, tuple(lead) + (n, heads, d))
    return ad.swapaxes(x, -2, -3)  # (..., heads, n, d)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, d = x.shape
    x = ad.swapaxes(x, -2, -3)
    return ad.reshape(x, tuple(lead) + (n, heads * d))


def mhsa(q: Tensor, k: Tensor, v: Tensor, heads: int, collect: list | None = None) -> Tensor:
    """Multi-head attention: softmax(q kᵀ / sqrt(d)) v per head, concatenated.

    q is (..., nq, C); k and v are (..., nk, C) with matching rows. Appends
    each softmax weight array to ``collect`` when given.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"mhsa shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    c = q.shape[-1]
    if c % heads:
        raise ShapeError(f"heads ({heads}) must divide channels ({c})")
    d = c // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = ad.scale(ad.matmul(qh, ad.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d))
    weights = ad.softmax_lastdim(scores)
    if collect is not None:
        collect.append(weights.data)
    return _merge_heads(ad.matmul(weights, vh))


def iipa(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, config: AttentionConfig,
         collect: list | None = None) -> Tensor:
    """Inter-branch attention plus a linear intra branch on the values.

    Standard mode skips the intra branch entirely and is bit-identical to
    ``mhsa``. The intra branch requires q and v to have the same row count.
    """
    inter = mhsa(q, k, v, params.heads, collect)
    if config.mode == "standard":
        return inter
    if params.w_intra is None:
        raise ValueError("iipa mode needs intra-branch weights")
    if q.shape[-2] != v.shape[-2]:
        raise ShapeError(f"intra branch needs matching rows, got q {q.shape} vs v {v.shape}")
    return ad.add(inter, ad.linear(v, params.w_intra, params.b_intra))


def _project(x: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    q = ad.linear(x, params.wq, params.bq)
    k = ad.linear(x, params.wk, params.bk)
    v = ad.linear(x, params.wv, params.bv)
    return q, k, v


def flat_attention_layer(x: Tensor, params: AttentionParams, config: AttentionConfig,
                         collect: list | None = None) -> Tensor:
    """One attention over the whole flattened token sequence (class included)."""
    q, k, v = _project(x, params)
    out = ad.linear(mhsa(q, k, v, params.heads, collect), params.w_out, params.b_out)
    if config.mode == "iipa":
        out = ad.add(out, ad.linear(v, params.w_intra, params.b_intra))
    return out


def _grouped_class_attention(
    x: Tensor,
    params: AttentionParams,
    config: AttentionConfig,
    groups: int,
    group_size: int,
    transpose_grid: bool,
    collect: list | None,
) -> Tensor:
    """Shared kernel behind the spatial and temporal variants.

    Row 0 is the class token; the remaining groups*group_size rows form a
    (groups, group_size) grid after optional transposition of the stored
    frame-major layout. The class query attends over every token once; each
    grid group runs its own attention with the class key/value prepended.
    """
    *lead, rows, c = x.shape
    n = groups * group_size
    if rows != n + 1:
        raise ShapeError(f"expected {n + 1} rows (class + {groups}x{group_size} grid), got {rows}")
    lead = tuple(lead)

    q, k, v = _project(x, params)
    q_cls = ad.take(q, [0], axis=-2)
    cls_out = mhsa(q_cls, k, v, params.heads, collect)            # (..., 1, C)

    token_idx = np.arange(1, n + 1)

    def to_grid(t: Tensor) -> Tensor:
        g = ad.reshape(ad.take(t, token_idx, axis=-2), lead + (group_size, groups, c) if transpose_grid else lead + (groups, group_size, c))
        if transpose_grid:
            g = ad.swapaxes(g, -2, -3)
        return g

    def from_grid(t: Tensor) -> Tensor:
        if transpose_grid:
            t = ad.swapaxes(t, -2, -3)
        return ad.reshape(t, lead + (n, c))

    q_grid = to_grid(q)                                            # (..., G, S, C)
    k_grid, v_grid = to_grid(k), to_grid(v)
    k_cls = ad.reshape(ad.take(k, [0] * groups, axis=-2), lead + (groups, 1, c))
    v_cls = ad.reshape(ad.take(v, [0] * groups, axis=-2), lead + (groups, 1, c))
    k_aug = ad.concat([k_cls, k_grid], axis=-2)                    # (..., G, S+1, C)
    v_aug = ad.concat([v_cls, v_grid], axis=-2)
    inter_grid = mhsa(q_grid, k_aug, v_aug, params.heads, collect)
    inter_tokens = from_grid(inter_grid)

    out = ad.linear(ad.concat([cls_out, inter_tokens], axis=-2), params.w_out, params.b_out)
    if config.mode == "iipa":
        v_tokens = ad.take(v, token_idx, axis=-2)
        intra = ad.linear(v_tokens, params.w_intra, params.b_intra)
        zero_cls = Tensor(np.zeros(lead + (1, c)))
        out = ad.add(out, ad.concat([zero_cls, intra], axis=-2))
    return out


def s_iipa(x: Tensor, params: AttentionParams, config: AttentionConfig, parts: int, frames: int,
           collect: list | None = None) -> Tensor:
    """Spatial variant: one attention map per frame across that frame's parts."""
    return _grouped_class_attention(x, params, config, groups=frames, group_size=parts,
                                    transpose_grid=False, collect=collect)


def t_iipa(x: Tensor, params: AttentionParams, config: AttentionConfig, parts: int, frames: int,
           collect: list | None = None) -> Tensor:
    """Temporal variant: one attention map per part across frames."""
    return _grouped_class_attention(x, params, config, groups=parts, group_size=frames,
                                    transpose_grid=True, collect=collect)
