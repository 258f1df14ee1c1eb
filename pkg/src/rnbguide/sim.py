"""Mock denoiser and the guided sampling loop.

A latent query tensor ``z`` of shape ``(H0, W0, d)`` plus a fixed
sinusoidal positional field gives the queries of the finest layer;
coarser layers average-pool them.  Attention against fixed random keys
is the stand-in for a U-Net's cross-attention, and guidance moves ``z``
along the negative energy gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionStack, ConceptMaps, ConceptSpec, build_concept_maps, cross_attention
from .autodiff import Node, Tape
from .config import GuidanceConfig
from .energy import LossBreakdown, layout_guidance_energy, total_energy, zest_energy
from .errors import NonFiniteGradient, ValidationError

_KEY_STREAM = 0
_LATENT_STREAM = 1
_NOISE_STREAM = 2


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def positional_field(height: int, width: int, dim: int) -> np.ndarray:
    """Deterministic sinusoidal features.

    Channel ``c`` uses the row coordinate for even ``c // 2`` and the column
    coordinate for odd, with frequency growing every two channel pairs and
    sine/cosine alternating within a pair.
    """
    hh, ww = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    out = np.empty((height, width, dim))
    for c in range(dim):
        pair = c // 2
        coord = hh if pair % 2 == 0 else ww
        freq = np.pi * (1 + pair // 2)
        out[..., c] = np.sin(freq * coord) if c % 2 == 0 else np.cos(freq * coord)
    return out


@dataclass
class SimModel:
    seed: int
    n_tokens: int
    dim: int
    base_resolution: tuple[int, int]
    layer_factors: tuple[int, ...] = (1, 2)
    keys: np.ndarray = field(init=False, repr=False)
    positional: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        h0, w0 = self.base_resolution
        if self.n_tokens < 1 or self.dim < 1:
            raise ValidationError("n_tokens and dim must be positive")
        for f in self.layer_factors:
            if f < 1 or f & (f - 1):
                raise ValidationError(f"layer factor {f} is not a power of two")
            if h0 % f or w0 % f:
                raise ValidationError(f"layer factor {f} does not divide {h0}x{w0}")
        self.layer_factors = tuple(int(f) for f in self.layer_factors)
        self.keys = _rng(self.seed, _KEY_STREAM).standard_normal((self.n_tokens, self.dim))
        self.positional = positional_field(h0, w0, self.dim)

    @property
    def layer_resolutions(self) -> list[tuple[int, int]]:
        h0, w0 = self.base_resolution
        return [(h0 // f, w0 // f) for f in self.layer_factors]


@dataclass
class SimLatent:
    z: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 3 or not np.all(np.isfinite(self.z)):
            raise ValueError("latent must be a finite (H0, W0, d) array")

    @classmethod
    def initial(cls, model: SimModel, seed: int, sigma_q: float = 1.0) -> "SimLatent":
        h0, w0 = model.base_resolution
        z = _rng(seed, _LATENT_STREAM).standard_normal((h0, w0, model.dim)) * sigma_q
        return cls(z, seed)


@dataclass
class Scene:
    """Everything a sampling run needs besides the config."""

    seed: int
    model: SimModel
    concepts: list[ConceptSpec]
    agg_resolution: tuple[int, int]
    config: GuidanceConfig = field(default_factory=GuidanceConfig)
    name: str = "scene"


def render_attention(z: Node, model: SimModel) -> AttentionStack:
    x = z + model.positional
    layers = []
    for f in model.layer_factors:
        q = x
        while f > 1:
            q = ad.avg_pool2(q)
            f //= 2
        layers.append(cross_attention(q, model.keys))
    return AttentionStack(layers)


@dataclass
class Evaluation:
    breakdown: LossBreakdown
    maps: list[ConceptMaps]
    grad: np.ndarray | None
    energy: float


def evaluate(z: np.ndarray, scene: Scene, config: GuidanceConfig, *, need_grad: bool = True) -> Evaluation:
    """Forward the full graph at ``z``; optionally backpropagate to ``z``."""
    tape = Tape()
    zn = tape.leaf(z, name="z")
    loss, breakdown, maps = build_energy(tape, zn, scene, config)
    grad = None
    if need_grad:
        grad = tape.backward(loss)[zn.index]
    return Evaluation(breakdown, maps, grad, loss.item())


def build_energy(tape: Tape, zn: Node, scene: Scene, config: GuidanceConfig):
    stack = render_attention(zn, scene.model)
    maps = [build_concept_maps(stack, c, config, scene.agg_resolution) for c in scene.concepts]
    loss, breakdown = total_energy(maps, config)
    if config.baseline == "layout_guidance":
        loss = layout_guidance_energy(stack, scene.concepts)
    elif config.baseline == "zest":
        loss = zest_energy(maps)
    breakdown.g = loss.item()
    breakdown.node = loss
    return loss, breakdown, maps


def _checked_update(z: np.ndarray, grad: np.ndarray, config: GuidanceConfig, step: int) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        bad = int(np.size(grad) - np.isfinite(grad).sum())
        raise NonFiniteGradient(step, f"{bad} non-finite entries in a gradient of size {grad.size}")
    if config.grad_clip_norm is not None:
        norm = float(np.sqrt((grad * grad).sum()))
        if norm > 0:
            grad = grad * (config.grad_clip_norm / norm)
    return z - config.eta_g * grad


def guidance_step(
    latent: SimLatent, scene: Scene, config: GuidanceConfig, step: int = 1
) -> tuple[SimLatent, LossBreakdown]:
    """One update ``z <- z - eta_g * grad g``; the breakdown is taken before it."""
    ev = evaluate(latent.z, scene, config)
    z_new = _checked_update(latent.z, ev.grad, config, step)
    return SimLatent(z_new, latent.seed), ev.breakdown


@dataclass
class StepReport:
    step: int
    g: float
    lr: float
    lb: float
    ious: list[float]
    taus: list[float]
    mbrs: list[np.ndarray] = field(repr=False, default_factory=list)
    m_aggs: list[np.ndarray] = field(repr=False, default_factory=list)


def _report(step: int, ev: Evaluation, keep_maps: bool) -> StepReport:
    b = ev.breakdown
    return StepReport(
        step=step,
        g=b.g,
        lr=b.lr_total,
        lb=b.lb_total,
        ious=[c.iou for c in b.concepts],
        taus=[c.tau for c in b.concepts],
        mbrs=[cm.mbr.copy() for cm in ev.maps] if keep_maps else [],
        m_aggs=[cm.m_agg.value.copy() for cm in ev.maps] if keep_maps else [],
    )


def run_sampling(scene: Scene, config: GuidanceConfig | None = None, *, keep_maps: bool = False) -> list[StepReport]:
    """Initial evaluation plus ``total_steps`` steps, guided for the first ``guidance_steps``.

    Row ``t`` describes the latent after step ``t``.  Unguided steps are the
    identity, plus Gaussian noise when ``noise_scale > 0``.
    """
    config = config or scene.config
    latent = SimLatent.initial(scene.model, scene.seed, config.sigma_q)
    noise_rng = _rng(scene.seed, _NOISE_STREAM)
    z = latent.z
    ev = evaluate(z, scene, config, need_grad=config.guidance_steps > 0)
    trajectory = [_report(0, ev, keep_maps)]
    for t in range(1, config.total_steps + 1):
        if t <= config.guidance_steps:
            z = _checked_update(z, ev.grad, config, t)
        elif config.noise_scale > 0:
            z = z + config.noise_scale * noise_rng.standard_normal(z.shape)
        ev = evaluate(z, scene, config, need_grad=t < config.guidance_steps)
        trajectory.append(_report(t, ev, keep_maps))
    return trajectory
