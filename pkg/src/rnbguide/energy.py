"""Guidance energies on top of ``ConceptMaps``.

The (1 - IoU) factors are plain floats computed from hard masks, i.e.
constants of the graph.  Region-loss fractions read the straight-through
masks, so their forward values are |MBR & GT| / |MBR| while gradients
flow into the soft shape and appearance maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import field as F
from .attention import AttentionStack, ConceptMaps, ConceptSpec
from .autodiff import Node
from .config import GuidanceConfig
from .errors import ShapeMismatch, ZeroUnion

EDGE_TOL = 1e-8
BCE_EPS = 1e-6


def box_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    inter = float((pred * gt).sum())
    union = float(pred.sum() + ((1.0 - pred) * gt).sum())
    if union == 0:
        raise ZeroUnion("both masks are empty")
    return inter / union


def _fraction_outside(b: Node, gt: np.ndarray) -> Node:
    # 1 - sum(b * gt) / sum(b)
    return 1.0 - ad.masked_sum(b, gt) / ad.sum_(b)


def region_loss(cm: ConceptMaps, lambda_s: float, lambda_a: float, *, use_ste: bool = True) -> Node:
    weight = 1.0 - box_iou(cm.mbr, cm.gt_mask)
    b_s = cm.b_shape if use_ste else cm.m_shape
    b_a = cm.b_appear if use_ste else cm.m_appear
    inner = ad.scale(_fraction_outside(b_s, cm.gt_mask), lambda_s) + ad.scale(
        _fraction_outside(b_a, cm.gt_mask), lambda_a
    )
    return ad.scale(inner, weight)


def region_loss_appearance_term(cm: ConceptMaps, lambda_a: float) -> Node:
    """The lambda_a branch of the region loss on its own."""
    weight = 1.0 - box_iou(cm.mbr, cm.gt_mask)
    return ad.scale(_fraction_outside(cm.b_appear, cm.gt_mask), lambda_a * weight)


def closed_form_region_grad(cm: ConceptMaps, lambda_a: float, *, wrt: str = "appearance") -> np.ndarray:
    """Analytic gradient of the lambda_a branch.

    With ``m = |MBR|``, ``n = |MBR & GT|`` and ``c = lambda_a (1 - IoU)`` the
    gradient with respect to the appearance map is
    ``-c (GT / m - n / m^2)``.  ``wrt="aggregate"`` divides by the detached
    normalization range to give the gradient with respect to ``m_agg``.
    """
    mbr, gt = cm.mbr, cm.gt_mask
    m = float(mbr.sum())
    n = float((mbr * gt).sum())
    c = lambda_a * (1.0 - box_iou(mbr, gt))
    grad = -c * (gt / m - n / (m * m) * np.ones_like(gt))
    if wrt == "appearance":
        return grad
    if wrt == "aggregate":
        if cm.appear_range < F.NORMALIZE_EPS:
            return np.zeros_like(grad)
        return grad / cm.appear_range
    raise ValueError(f"wrt must be 'appearance' or 'aggregate', got {wrt!r}")


def boundary_loss(cm: ConceptMaps) -> Node:
    """(1 - IoU) times the share of Sobel edge energy outside the box.

    Edge energy is measured above the smoothing floor ``sqrt(SOBEL_EPS)``
    per pixel; a map with less than ``EDGE_TOL`` of it counts as
    structureless and receives the full (1 - IoU) penalty.
    """
    weight = 1.0 - box_iou(cm.mbr, cm.gt_mask)
    tape = cm.m_agg.tape
    edges = ad.sobel_edges(cm.m_agg)
    total = ad.sum_(edges)
    floor = edges.value.size * math.sqrt(F.SOBEL_EPS)
    if float(ad.detach(total).value) - floor < EDGE_TOL:
        return tape.const(weight)
    frac = ad.masked_sum(edges, cm.gt_mask) / total
    return ad.scale(1.0 - frac, weight)


@dataclass
class ConceptLoss:
    name: str
    iou: float
    tau: float
    l_r: float
    l_b: float


@dataclass
class LossBreakdown:
    concepts: list[ConceptLoss]
    g: float
    lr_total: float
    lb_total: float
    node: Node | None = field(default=None, repr=False)

    @property
    def ious(self) -> list[float]:
        return [c.iou for c in self.concepts]


def total_energy(cms: Sequence[ConceptMaps], config: GuidanceConfig) -> tuple[Node, LossBreakdown]:
    """Sum of region and boundary losses over concepts, in concept order.

    The returned node follows the variant's ablation switches; the
    breakdown always reports both components' forward values.
    """
    if not cms:
        raise ValueError("total_energy needs at least one concept")
    tape = cms[0].m_agg.tape
    g = tape.const(0.0)
    rows = []
    for cm in cms:
        lr = region_loss(cm, config.lambda_s, config.lambda_a, use_ste=config.uses_ste)
        lb = boundary_loss(cm)
        rows.append(ConceptLoss(cm.concept.name, box_iou(cm.mbr, cm.gt_mask), cm.tau, lr.item(), lb.item()))
        if config.uses_region:
            g = g + lr
        if config.uses_boundary:
            g = g + lb
    breakdown = LossBreakdown(
        concepts=rows,
        g=g.item(),
        lr_total=float(sum(r.l_r for r in rows)),
        lb_total=float(sum(r.l_b for r in rows)),
        node=g,
    )
    return g, breakdown


def layout_guidance_energy(stack: AttentionStack, concepts: Sequence[ConceptSpec]) -> Node:
    """Squared in-box attention deficit, averaged over each concept's tokens and layers."""
    tape = stack.layers[0].tape
    g = tape.const(0.0)
    for concept in concepts:
        terms = []
        for layer in stack.layers:
            lh, lw = layer.shape[:2]
            box = F.rasterize_box(concept.box, lh, lw)
            for j in concept.token_indices:
                a = ad.channel_sum(layer, [j])
                ratio = ad.masked_sum(a, box) / ad.sum_(a)
                terms.append(ad.square(1.0 - ratio))
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        g = g + ad.scale(acc, 1.0 / len(terms))
    return g


def _bce(pred: Node, target: np.ndarray) -> Node:
    p = ad.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    ll = ad.mul(ad.log(p), target) + ad.mul(ad.log(1.0 - p), 1.0 - target)
    return -ad.mean(ll)


def zest_energy(cms: Sequence[ConceptMaps]) -> Node:
    """Per-pixel BCE of the normalized map against the box mask, plus the
    same loss on the map rescaled by its own (detached) maximum."""
    tape = cms[0].m_agg.tape
    g = tape.const(0.0)
    for cm in cms:
        pred = cm.m_norm
        peak = float(ad.detach(ad.reduce_max(pred)).value)
        rescaled = ad.scale(pred, 1.0 / peak) if peak > 0 else pred
        g = g + _bce(pred, cm.gt_mask) + _bce(rescaled, cm.gt_mask)
    return g
