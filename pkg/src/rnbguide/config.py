from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

# Ablations combine with "+", e.g. "no_region+no_boundary"; baselines stand alone.
VARIANTS = (
    "rnb",
    "fixed_threshold",
    "no_ste",
    "no_region",
    "no_boundary",
    "layout_guidance",
    "zest",
)

BASELINES = ("layout_guidance", "zest")

# Keys accepted in a scene file's "config" object, mapped to field names.
SCENE_CONFIG_KEYS = {
    "lambda": "lam",
    "lambda_s": "lambda_s",
    "lambda_a": "lambda_a",
    "eta_g": "eta_g",
    "sharpness": "sharpness",
    "total_steps": "total_steps",
    "guidance_steps": "guidance_steps",
    "noise_scale": "noise_scale",
    "grad_clip_norm": "grad_clip_norm",
}


@dataclass(frozen=True)
class GuidanceConfig:
    """Hyperparameters of one guided sampling run.

    Defaults follow the published setting (threshold weight 0.4, region
    weights 1.5 / 1.0, guidance at the first 10 of 50 steps, step size 70).
    The step size is on Stable Diffusion's latent scale; simulator fixtures
    carry their own calibrated value.
    """

    lam: float = 0.4
    lambda_s: float = 1.5
    lambda_a: float = 1.0
    eta_g: float = 70.0
    sharpness: float = 10.0
    total_steps: int = 50
    guidance_steps: int = 10
    noise_scale: float = 0.0
    grad_clip_norm: float | None = None
    sigma_q: float = 1.0
    variant: str = "rnb"
    fixed_tau: float = 0.5
    grad_through_tau: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.eta_g <= 0 or not math.isfinite(self.eta_g):
            raise ValueError(f"eta_g must be positive and finite, got {self.eta_g}")
        if self.sharpness <= 0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")
        if self.lambda_s < 0 or self.lambda_a < 0:
            raise ValueError("lambda_s and lambda_a must be non-negative")
        if self.total_steps < 0 or self.guidance_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.guidance_steps > self.total_steps:
            raise ValueError(
                f"guidance_steps ({self.guidance_steps}) exceeds total_steps ({self.total_steps})"
            )
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive or null")
        parts = self.variant_parts
        for p in parts:
            if p not in VARIANTS:
                raise ValueError(f"unknown variant {p!r}; expected one of {VARIANTS}")
        if len(parts) > 1 and set(parts) & set(BASELINES + ("rnb",)):
            raise ValueError(f"variant {self.variant!r}: only ablations can be combined")

    @property
    def variant_parts(self) -> tuple[str, ...]:
        return tuple(self.variant.split("+"))

    @property
    def baseline(self) -> str:
        parts = self.variant_parts
        return parts[0] if parts[0] in BASELINES else "rnb"

    @property
    def uses_region(self) -> bool:
        return "no_region" not in self.variant_parts

    @property
    def uses_boundary(self) -> bool:
        return "no_boundary" not in self.variant_parts

    @property
    def uses_ste(self) -> bool:
        return "no_ste" not in self.variant_parts

    @property
    def fixed_threshold(self) -> bool:
        return "fixed_threshold" in self.variant_parts

    def with_(self, **changes) -> "GuidanceConfig":
        return replace(self, **changes)

    def to_scene_dict(self) -> dict:
        d = asdict(self)
        return {key: d[attr] for key, attr in SCENE_CONFIG_KEYS.items()}

    def to_dict(self) -> dict:
        return asdict(self)
