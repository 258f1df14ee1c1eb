"""From query/key tensors to straight-through box masks.

The pipeline per grounded concept is

    cross-attention -> token/layer aggregation -> min-max normalization
    -> dynamic threshold -> foreground mask -> bounding rectangle
    -> straight-through attachment onto the shape and appearance maps.

Hard quantities (threshold, foreground mask, rectangle) are computed
from detached values only, so a replay tape reproduces them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import field as F
from .autodiff import Node
from .config import GuidanceConfig
from .errors import EmptyMask, ShapeMismatch, ValidationError
from .field import NormBox


@dataclass
class AttentionStack:
    """Per-layer attention tensors of shape ``(H_l, W_l, N)``."""

    layers: list[Node]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("an attention stack needs at least one layer")
        ns = {layer.shape[-1] for layer in self.layers}
        if len(ns) != 1 or any(layer.value.ndim != 3 for layer in self.layers):
            raise ShapeMismatch(f"layers must be (H, W, N) with a shared N, got {[l.shape for l in self.layers]}")

    @property
    def n_tokens(self) -> int:
        return self.layers[0].shape[-1]

    @property
    def resolutions(self) -> list[tuple[int, int]]:
        return [layer.shape[:2] for layer in self.layers]

    def max_token_sum_error(self) -> float:
        return max(float(np.abs(layer.value.sum(axis=-1) - 1.0).max()) for layer in self.layers)


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    token_indices: tuple[int, ...]
    box: NormBox

    def __post_init__(self) -> None:
        if not self.token_indices:
            raise ValidationError(f"concept {self.name!r} has no tokens")
        if len(set(self.token_indices)) != len(self.token_indices):
            raise ValidationError(f"concept {self.name!r} repeats a token index")


def validate_concepts(concepts: Sequence[ConceptSpec], n_tokens: int) -> None:
    seen: dict[int, str] = {}
    names = set()
    for c in concepts:
        if c.name in names:
            raise ValidationError(f"duplicate concept name {c.name!r}")
        names.add(c.name)
        for j in c.token_indices:
            if not 0 <= j < n_tokens:
                raise ValidationError(f"token {j} of concept {c.name!r} is outside [0, {n_tokens})")
            if j in seen:
                raise ValidationError(f"token {j} is shared by concepts {seen[j]!r} and {c.name!r}")
            seen[j] = c.name


@dataclass
class ConceptMaps:
    concept: ConceptSpec
    m_agg: Node
    m_norm: Node
    m_shape: Node
    m_appear: Node
    tau: float
    fg_mask: np.ndarray
    mbr: np.ndarray
    b_shape: Node
    b_appear: Node
    gt_mask: np.ndarray
    # range (max - min) of m_agg used by the appearance map, detached
    appear_range: float = 1.0


def cross_attention(queries: Node, keys: np.ndarray) -> Node:
    """Softmax over tokens of ``q . k / sqrt(d)`` at every spatial location.

    ``queries`` has shape ``(H, W, d)``; ``keys`` is a constant ``(N, d)``.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if queries.value.ndim != 3 or keys.ndim != 2 or queries.shape[-1] != keys.shape[1]:
        raise ShapeMismatch(f"queries {queries.shape} and keys {keys.shape} are incompatible")
    h, w, d = queries.shape
    flat = ad.reshape(queries, (h * w, d))
    logits = ad.matmul_const(flat, keys.T / np.sqrt(d))
    return ad.reshape(ad.softmax(logits), (h, w, keys.shape[0]))


def aggregate(stack: AttentionStack, concept: ConceptSpec, agg_h: int, agg_w: int) -> Node:
    """Layer average of the concept's token-summed, upsampled attention."""
    maps = []
    for layer in stack.layers:
        lh, lw = layer.shape[:2]
        if lh > agg_h or lw > agg_w:
            raise ShapeMismatch(f"layer {lh}x{lw} exceeds aggregation size {agg_h}x{agg_w}")
        m = ad.channel_sum(layer, concept.token_indices)
        if (lh, lw) != (agg_h, agg_w):
            m = ad.upsample(m, agg_h, agg_w)
        maps.append(m)
    total = maps[0]
    for m in maps[1:]:
        total = total + m
    return ad.scale(total, 1.0 / len(maps))


def normalize(x: Node, *, through: bool = False) -> tuple[Node, float]:
    """Min-max normalize a field node; returns the node and its (detached) range.

    Extremes are detached unless ``through`` is set.  A range below
    ``field.NORMALIZE_EPS`` yields the all-zero field.
    """
    lo = ad.reduce_min(x)
    hi = ad.reduce_max(x)
    if not through:
        lo, hi = ad.detach(lo), ad.detach(hi)
    rng = hi - lo
    rng_value = float(ad.detach(rng).value)
    if rng_value < F.NORMALIZE_EPS:
        return ad.scale(x, 0.0), rng_value
    return (x - lo) / rng, rng_value


def dynamic_threshold(m_norm: Node, gt_mask: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """Weighted inside/outside mean threshold and the resulting foreground."""
    v = ad.detach(m_norm).value
    if v.shape != gt_mask.shape:
        raise ShapeMismatch(f"map {v.shape} vs box mask {gt_mask.shape}")
    tau = lam * F.masked_mean(v, gt_mask) + (1.0 - lam) * F.masked_mean(v, 1.0 - gt_mask)
    # a mix of means lies in [min, max]; clamp away rounding so a uniform map keeps tau == v
    tau = min(max(tau, float(v.min())), float(v.max()))
    fg = (v >= tau).astype(np.float64)
    m_norm.tape.decide(fg)
    return float(tau), fg


def threshold_node(m_norm: Node, gt_mask: np.ndarray, lam: float) -> Node:
    """The dynamic threshold as a differentiable scalar node."""
    def mmean(mask):
        total = mask.sum()
        if total == 0:
            return m_norm.tape.const(0.0)
        return ad.scale(ad.masked_sum(m_norm, mask), 1.0 / total)

    return ad.scale(mmean(gt_mask), lam) + ad.scale(mmean(1.0 - gt_mask), 1.0 - lam)


def minimum_bounding_rectangle(fg: np.ndarray) -> np.ndarray:
    """Filled rectangle spanning all foreground rows and columns."""
    fg = np.asarray(fg)
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("foreground mask has no pixels")
    out = np.zeros(fg.shape)
    out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = 1.0
    return out


def shape_variant(m_norm: Node, tau, s: float, *, through: bool = False) -> Node:
    """Renormalized ``sigmoid(s * (m_norm - tau))``; ``tau`` may be a float or node."""
    if s <= 0:
        raise ValueError("sharpness must be positive")
    soft = ad.sigmoid(ad.scale(m_norm - tau, s))
    out, _ = normalize(soft, through=through)
    return out


def appearance_variant(m_agg: Node, *, through: bool = False) -> Node:
    """Min-max rescaled aggregate map, built as its own node."""
    out, _ = normalize(m_agg, through=through)
    return out


def build_concept_maps(
    stack: AttentionStack,
    concept: ConceptSpec,
    config: GuidanceConfig,
    agg_shape: tuple[int, int] | None = None,
) -> ConceptMaps:
    if agg_shape is None:
        agg_shape = max(stack.resolutions)
    agg_h, agg_w = agg_shape
    through = config.grad_through_tau
    gt = F.rasterize_box(concept.box, agg_h, agg_w)

    m_agg = aggregate(stack, concept, agg_h, agg_w)
    m_norm, _ = normalize(m_agg, through=through)

    if config.fixed_threshold:
        v = ad.detach(m_norm).value
        # a degenerate all-zero map would leave nothing above the fixed level
        tau = min(config.fixed_tau, float(v.max()))
        fg = (v >= tau).astype(np.float64)
        m_norm.tape.decide(fg)
        tau_arg = tau
    else:
        tau, fg = dynamic_threshold(m_norm, gt, config.lam)
        tau_arg = threshold_node(m_norm, gt, config.lam) if through else tau

    mbr = minimum_bounding_rectangle(fg)
    m_norm.tape.decide(mbr)

    m_shape = shape_variant(m_norm, tau_arg, config.sharpness, through=through)
    m_appear, appear_range = normalize(m_agg, through=through)
    return ConceptMaps(
        concept=concept,
        m_agg=m_agg,
        m_norm=m_norm,
        m_shape=m_shape,
        m_appear=m_appear,
        tau=tau,
        fg_mask=fg,
        mbr=mbr,
        b_shape=ad.ste_attach(mbr, m_shape),
        b_appear=ad.ste_attach(mbr, m_appear),
        gt_mask=gt,
        appear_range=appear_range,
    )
