"""Dual-branch temporal attention over per-video feature sequences.

One branch is windowed multi-head attention: each query position scores keys
inside three size-w windows anchored at i-w, i, i+w, with each window's
scores weighted by the cosine similarity between the query and the anchor
query.  The other branch mixes features locally by shifting channels along
time and time steps along channels (zero padded), plus a residual.  A
learnable scalar fuses the two branch outputs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class ShiftMode(str, enum.Enum):
    GENERAL = "gs"        # one-directional offsets 0..s-1
    BIDIRECTIONAL = "bs"  # symmetric offsets -(s-1)/2..+(s-1)/2


class FusionMode(str, enum.Enum):
    FIXED11 = "fixed-1-1"
    ALPHA_RIGHT = "alpha-right"
    ALPHA_LEFT = "alpha-left"
    ALPHA_COMPLEMENT = "alpha-complement"
    TWO_ALPHAS = "two-alphas"


class ScoreScale(str, enum.Enum):
    SQRT_T = "sqrt-t"    # divide scores by sqrt(sequence length)
    SQRT_DH = "sqrt-dh"  # divide scores by sqrt(head dim)


@dataclass(frozen=True)
class AttentionConfig:
    """Hyperparameters of one dual-branch attention block."""

    model_dim: int
    heads: int
    window: int = 5
    shift_size: int = 9
    shift_mode: ShiftMode = ShiftMode.BIDIRECTIONAL
    fusion_mode: FusionMode = FusionMode.ALPHA_COMPLEMENT
    score_scale: ScoreScale = ScoreScale.SQRT_T
    cosine_weighting: bool = True  # diagnostic: False forces every window weight to 1

    def __post_init__(self):
        if self.model_dim <= 0 or self.heads <= 0:
            raise ConfigError(f"model_dim and heads must be positive, got {self.model_dim}, {self.heads}")
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.window <= 0 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and positive, got {self.window}")
        if self.shift_size <= 0 or self.shift_size % 2 == 0:
            raise ConfigError(f"shift_size must be odd and positive, got {self.shift_size}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass
class FusionWeights:
    """Per-layer learnable fusion scalars; ``alpha2`` only for TWO_ALPHAS."""

    alpha: Tensor
    alpha2: Tensor | None = None


def shift_offsets(count: int, shift_size: int, mode: ShiftMode) -> np.ndarray:
    """Offset o(x) for index x: GS cycles 0..s-1, BS cycles symmetrically."""
    base = np.arange(count, dtype=np.intp) % shift_size
    if mode == ShiftMode.BIDIRECTIONAL:
        return base - (shift_size - 1) // 2
    return base


@lru_cache(maxsize=64)
def window_geometry(length: int, window: int):
    """Key positions, masks, and anchors for every query of a length-T sequence.

    Returns (positions [T,3w], slot_valid [T,3w], anchors [T,3], anchor_valid [T,3]).
    A slot is valid only when both its position and its window's anchor lie in
    [0, T): a window whose anchor falls outside the sequence is masked whole.
    """
    half = (window - 1) // 2
    slots = np.arange(3 * window)
    win_of_slot = slots // window
    within = slots % window - half
    i = np.arange(length)[:, None]
    anchors = i + (np.arange(3)[None, :] - 1) * window
    anchor_valid = (anchors >= 0) & (anchors < length)
    positions = i + (win_of_slot[None, :] - 1) * window + within[None, :]
    slot_valid = (positions >= 0) & (positions < length) & anchor_valid[:, win_of_slot]
    positions = np.clip(positions, 0, length - 1)
    for arr in (positions, slot_valid, anchors, anchor_valid):
        arr.setflags(write=False)
    return positions, slot_valid, anchors, anchor_valid


def window_dot_counts(length: int, window: int) -> dict[str, int]:
    """Query-key dot products per head: interior-sense, boundary-exact, dense."""
    _, slot_valid, _, _ = window_geometry(length, window)
    return {
        "interior": length * 3 * window,
        "actual": int(slot_valid.sum()),
        "dense": length * length,
    }


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(C_D, T) -> (H, T, D_h), concatenation order preserved."""
    dim, length = x.shape
    cols = tc.transpose(x)  # T, C_D
    return tc.transpose(tc.reshape(cols, (length, heads, dim // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """(H, T, D_h) -> (C_D, T), inverse of split_heads."""
    heads, length, head_dim = x.shape
    cols = tc.reshape(tc.transpose(x, (1, 0, 2)), (length, heads * head_dim))
    return tc.transpose(cols)


def project_qkv(e_in: Tensor, weights: dict[str, Tensor], cfg: AttentionConfig):
    """Three per-column linear maps of (C_D, T), each split into heads."""
    if e_in.ndim != 2 or e_in.shape[0] != cfg.model_dim:
        raise ShapeError(f"expected ({cfg.model_dim}, T) input, got {e_in.shape}")

    def proj(prefix: str) -> Tensor:
        out = tc.add(tc.matmul(weights[f"w{prefix}"], e_in), tc.reshape(weights[f"b{prefix}"], (cfg.model_dim, 1)))
        return split_heads(out, cfg.heads)

    return proj("q"), proj("k"), proj("v")


def windowed_scores(q: Tensor, k: Tensor, window: int, cosine_weighting: bool = True):
    """Window-weighted query-key scores.

    Returns (scores [H,T,3w], mask [H,T,3w]).  Score (i, slot) is
    delta_window * (q_i . k_p) with delta_window the cosine similarity between
    q_i and the window's anchor query (1 for the center window of any nonzero
    query, 0 for zero vectors).  Masked slots hold unweighted garbage and must
    be dropped by the softmax mask.
    """
    heads, length, _ = q.shape
    positions, slot_valid, anchors, anchor_valid = window_geometry(length, window)
    kw = tc.gather_time(k, positions)
    raw = tc.window_dots(q, kw)
    if cosine_weighting:
        delta = tc.cosine_weights(q, anchors, anchor_valid)  # H,T,3
        weighted = tc.mul(tc.reshape(raw, (heads, length, 3, window)), tc.reshape(delta, (heads, length, 3, 1)))
        scores = tc.reshape(weighted, (heads, length, 3 * window))
    else:
        scores = raw
    mask = np.broadcast_to(slot_valid, (heads, length, 3 * window))
    return scores, mask


def attention_scale(cfg: AttentionConfig, length: int) -> float:
    if cfg.score_scale == ScoreScale.SQRT_T:
        return math.sqrt(length)
    return math.sqrt(cfg.head_dim)


def windowed_attention(
    q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig, counter: dict | None = None
) -> Tensor:
    """Masked softmax over each query's 3w scores, mixing V; heads re-merged."""
    heads, length, _ = q.shape
    if length < 1:
        raise ShapeError("windowed attention needs at least one time step")
    scores, mask = windowed_scores(q, k, cfg.window, cfg.cosine_weighting)
    if counter is not None:
        counts = window_dot_counts(length, cfg.window)
        counter["qk_dots_per_head"] = counter.get("qk_dots_per_head", 0) + counts["actual"]
        counter["heads"] = heads
    weights = tc.softmax_lastdim(tc.mul(scores, 1.0 / attention_scale(cfg, length)), mask)
    positions, _, _, _ = window_geometry(length, cfg.window)
    mixed = tc.window_mix(weights, tc.gather_time(v, positions))
    return merge_heads(mixed)


def temporal_shift(v: Tensor, shift_size: int, mode: ShiftMode) -> Tensor:
    """Shift channel d of each head along time by o(d), zero padded."""
    if v.ndim != 3:
        raise ShapeError(f"expected (H, T, D_h), got {v.shape}")
    return tc.shift_time(v, shift_offsets(v.shape[2], shift_size, mode))


def channel_shift(v: Tensor, shift_size: int, mode: ShiftMode) -> Tensor:
    """Shift time step t's features along channels by o(t), zero padded."""
    if v.ndim != 3:
        raise ShapeError(f"expected (H, T, D_h), got {v.shape}")
    return tc.shift_channels(v, shift_offsets(v.shape[1], shift_size, mode))


def shift_mix(v: Tensor, cfg: AttentionConfig) -> Tensor:
    """V plus both shift results, in head space (H, T, D_h)."""
    return tc.add(
        tc.add(v, temporal_shift(v, cfg.shift_size, cfg.shift_mode)),
        channel_shift(v, cfg.shift_size, cfg.shift_mode),
    )


def shift_branch(v: Tensor, cfg: AttentionConfig) -> Tensor:
    """The local branch output reshaped back to (C_D, T)."""
    return merge_heads(shift_mix(v, cfg))


def fuse_branches(e_attn: Tensor, e_conv: Tensor, mode: FusionMode, fusion: FusionWeights) -> Tensor:
    if mode == FusionMode.FIXED11:
        return tc.add(e_attn, e_conv)
    if mode == FusionMode.ALPHA_RIGHT:
        return tc.add(e_attn, tc.mul(fusion.alpha, e_conv))
    if mode == FusionMode.ALPHA_LEFT:
        return tc.add(tc.mul(fusion.alpha, e_attn), e_conv)
    if mode == FusionMode.ALPHA_COMPLEMENT:
        # the two effective weights sum to 1 by construction
        return tc.add(tc.mul(fusion.alpha, e_attn), tc.mul(tc.sub(1.0, fusion.alpha), e_conv))
    if mode == FusionMode.TWO_ALPHAS:
        if fusion.alpha2 is None:
            raise ConfigError("two-alphas fusion needs a second scalar")
        return tc.add(tc.mul(fusion.alpha, e_attn), tc.mul(fusion.alpha2, e_conv))
    raise ConfigError(f"unknown fusion mode {mode!r}")


def dual_branch_attention(
    e_in: Tensor,
    cfg: AttentionConfig,
    weights: dict[str, Tensor],
    fusion: FusionWeights,
    counter: dict | None = None,
) -> Tensor:
    """Shared Q/K/V projection, both branches, fused to (C_D, T)."""
    q, k, v = project_qkv(e_in, weights, cfg)
    e_attn = windowed_attention(q, k, v, cfg, counter=counter)
    e_conv = shift_branch(v, cfg)
    return fuse_branches(e_attn, e_conv, cfg.fusion_mode, fusion)
