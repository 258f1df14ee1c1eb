"""Strict JSON scene files.

Schema::

    {"seed": int, "n_tokens": int, "dim": int,
     "base_resolution": [H0, W0], "layer_factors": [int, ...],
     "agg_resolution": [H, W],
     "concepts": [{"name": str, "tokens": [int, ...], "box": [x0, y0, x1, y1]}],
     "config": {"lambda": f, "lambda_s": f, "lambda_a": f, "eta_g": f,
                "sharpness": f, "total_steps": i, "guidance_steps": i,
                "noise_scale": f, "grad_clip_norm": f | null}}

``layer_factors`` defaults to ``[1, 2]``, ``agg_resolution`` to the finest
layer and every ``config`` entry to ``GuidanceConfig``'s default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..attention import ConceptSpec, validate_concepts
from ..config import SCENE_CONFIG_KEYS, GuidanceConfig
from ..errors import DegenerateBox, ParseError, ValidationError
from ..field import NormBox, rasterize_box
from ..sim import Scene, SimModel

TOP_KEYS = {"seed", "n_tokens", "dim", "base_resolution", "layer_factors", "agg_resolution", "concepts", "config"}
REQUIRED_KEYS = {"seed", "n_tokens", "dim", "base_resolution", "concepts"}
CONCEPT_KEYS = {"name", "tokens", "box"}
INT_CONFIG_KEYS = {"total_steps", "guidance_steps"}


@dataclass
class SceneFile:
    seed: int
    n_tokens: int
    dim: int
    base_resolution: tuple[int, int]
    layer_factors: tuple[int, ...]
    agg_resolution: tuple[int, int]
    concepts: list[ConceptSpec]
    config: GuidanceConfig = field(default_factory=GuidanceConfig)
    name: str = "scene"

    def build(self, config: GuidanceConfig | None = None) -> Scene:
        model = SimModel(self.seed, self.n_tokens, self.dim, self.base_resolution, self.layer_factors)
        return Scene(self.seed, model, list(self.concepts), self.agg_resolution, config or self.config, self.name)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_tokens": self.n_tokens,
            "dim": self.dim,
            "base_resolution": list(self.base_resolution),
            "layer_factors": list(self.layer_factors),
            "agg_resolution": list(self.agg_resolution),
            "concepts": [
                {"name": c.name, "tokens": list(c.token_indices), "box": c.box.as_list()} for c in self.concepts
            ],
            "config": self.config.to_scene_dict(),
        }


def _int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}: expected an integer, got {value!r}")
    return value


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _pair(value, where: str) -> tuple[int, int]:
    if not isinstance(value, list) or len(value) != 2:
        raise ValidationError(f"{where}: expected [int, int], got {value!r}")
    return _int(value[0], f"{where}[0]"), _int(value[1], f"{where}[1]")


def _unknown(keys, allowed, where: str) -> None:
    extra = sorted(set(keys) - allowed)
    if extra:
        raise ValidationError(f"{where}: unknown key(s) {', '.join(extra)}")


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def parse_config(raw, base: GuidanceConfig | None = None) -> GuidanceConfig:
    if not isinstance(raw, dict):
        raise ValidationError(f"config: expected an object, got {type(raw).__name__}")
    _unknown(raw, set(SCENE_CONFIG_KEYS), "config")
    changes = {}
    for key, value in raw.items():
        where = f"config.{key}"
        if key in INT_CONFIG_KEYS:
            changes[SCENE_CONFIG_KEYS[key]] = _int(value, where)
        elif key == "grad_clip_norm" and value is None:
            changes["grad_clip_norm"] = None
        else:
            changes[SCENE_CONFIG_KEYS[key]] = _num(value, where)
    try:
        return (base or GuidanceConfig()).with_(**changes)
    except ValueError as exc:
        raise ValidationError(f"config: {exc}") from None


def parse_scene(data, name: str = "scene") -> SceneFile:
    if not isinstance(data, dict):
        raise ValidationError("scene: top level must be a JSON object")
    _unknown(data, TOP_KEYS, "scene")
    missing = sorted(REQUIRED_KEYS - set(data))
    if missing:
        raise ValidationError(f"scene: missing required key(s) {', '.join(missing)}")

    seed = _int(data["seed"], "seed")
    n_tokens = _int(data["n_tokens"], "n_tokens")
    dim = _int(data["dim"], "dim")
    if n_tokens < 1 or dim < 1:
        raise ValidationError("n_tokens and dim must be positive")
    h0, w0 = _pair(data["base_resolution"], "base_resolution")
    if not (_is_pow2(h0) and _is_pow2(w0) and h0 >= 8 and w0 >= 8):
        raise ValidationError(f"base_resolution: {h0}x{w0} must be powers of two >= 8")

    raw_factors = data.get("layer_factors", [1, 2])
    if not isinstance(raw_factors, list) or not raw_factors:
        raise ValidationError("layer_factors: expected a non-empty list of integers")
    factors = tuple(_int(f, f"layer_factors[{i}]") for i, f in enumerate(raw_factors))
    for f in factors:
        if not _is_pow2(f) or h0 % f or w0 % f:
            raise ValidationError(f"layer_factors: {f} is not a power of two dividing {h0}x{w0}")
    finest = (h0 // min(factors), w0 // min(factors))
    agg = _pair(data["agg_resolution"], "agg_resolution") if "agg_resolution" in data else finest
    if agg[0] < finest[0] or agg[1] < finest[1]:
        raise ValidationError(f"agg_resolution: {agg} is coarser than the finest layer {finest}")
    if agg[0] < 3 or agg[1] < 3:
        raise ValidationError("agg_resolution: needs at least 3x3 for the edge map")

    raw_concepts = data["concepts"]
    if not isinstance(raw_concepts, list) or not raw_concepts:
        raise ValidationError("concepts: expected a non-empty list")
    concepts = []
    for i, rc in enumerate(raw_concepts):
        where = f"concepts[{i}]"
        if not isinstance(rc, dict):
            raise ValidationError(f"{where}: expected an object")
        _unknown(rc, CONCEPT_KEYS, where)
        for key in sorted(CONCEPT_KEYS - set(rc)):
            raise ValidationError(f"{where}: missing key {key}")
        if not isinstance(rc["name"], str) or not rc["name"] or "," in rc["name"]:
            raise ValidationError(f"{where}.name: expected a non-empty string without commas")
        if not isinstance(rc["tokens"], list):
            raise ValidationError(f"{where}.tokens: expected a list of integers")
        tokens = tuple(_int(t, f"{where}.tokens") for t in rc["tokens"])
        if not isinstance(rc["box"], list) or len(rc["box"]) != 4:
            raise ValidationError(f"{where}.box: expected [x0, y0, x1, y1]")
        coords = [_num(v, f"{where}.box") for v in rc["box"]]
        try:
            box = NormBox(*coords)
            rasterize_box(box, *agg)
        except (ValueError, DegenerateBox) as exc:
            raise ValidationError(f"{where}.box: {exc}") from None
        concepts.append(ConceptSpec(rc["name"], tokens, box))
    validate_concepts(concepts, n_tokens)

    config = parse_config(data.get("config", {}))
    return SceneFile(seed, n_tokens, dim, (h0, w0), factors, agg, concepts, config, name)


def load_scene(path) -> SceneFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not valid UTF-8 ({exc})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return parse_scene(data, name=path.stem)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def dump_scene(scene: SceneFile) -> str:
    return json.dumps(scene.to_dict(), indent=2) + "\n"
