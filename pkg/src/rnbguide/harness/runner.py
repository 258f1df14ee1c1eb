"""Experiment orchestration: single runs, parameter sweeps, suites."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..autodiff import GradCheckReport, gradcheck
from ..config import SCENE_CONFIG_KEYS, GuidanceConfig
from ..sim import StepReport, build_energy, run_sampling
from .io import atomic_write_text, dump_pgm, fmt, write_json
from .metrics import steps_to_iou, trajectory_miou
from .scene import INT_CONFIG_KEYS, SceneFile, load_scene, parse_scene

log = logging.getLogger(__name__)

METRIC_NOTE = (
    "mIoU is IoU between the thresholded attention map's bounding rectangle "
    "and the rasterized target box (no detector, no images)"
)


@dataclass
class RunReport:
    scene: str
    variant: str
    rows: list[StepReport]
    final_miou: float
    steps_to_iou_05: int | None
    wall_time: float = 0.0
    config: GuidanceConfig = field(default_factory=GuidanceConfig)

    def summary(self) -> dict:
        return {
            "scene": self.scene,
            "variant": self.variant,
            "final_miou": self.final_miou,
            "final_ious": list(self.rows[-1].ious),
            "steps_to_iou_0.5": self.steps_to_iou_05,
            "rows": len(self.rows),
            "config": self.config.to_dict(),
            "metric": METRIC_NOTE,
        }


def metrics_csv(rows: Sequence[StepReport], names: Sequence[str]) -> str:
    header = ["step", "g", "lr", "lb"]
    for n in names:
        header += [f"iou_{n}", f"tau_{n}"]
    lines = [",".join(header)]
    for r in rows:
        cells = [str(r.step), fmt(r.g), fmt(r.lr), fmt(r.lb)]
        for iou, tau in zip(r.ious, r.taus):
            cells += [fmt(iou), fmt(tau)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def run_scene(scene_file: SceneFile, config: GuidanceConfig | None = None, *, keep_maps: bool = False) -> RunReport:
    config = config or scene_file.config
    t0 = time.perf_counter()
    rows = run_sampling(scene_file.build(config), config, keep_maps=keep_maps)
    return RunReport(
        scene=scene_file.name,
        variant=config.variant,
        rows=rows,
        final_miou=trajectory_miou(rows),
        steps_to_iou_05=steps_to_iou(rows, 0.5),
        wall_time=time.perf_counter() - t0,
        config=config,
    )


def write_run(report: RunReport, names: Sequence[str], out_dir, *, dump_maps: bool = False) -> None:
    out = Path(out_dir)
    atomic_write_text(out / "metrics.csv", metrics_csv(report.rows, names))
    write_json(out / "report.json", report.summary())
    # wall time lives apart so report.json stays byte-stable across reruns
    write_json(out / "timing.json", {"wall_time_s": round(report.wall_time, 6)})
    if dump_maps:
        for row in report.rows:
            for name, m_agg, mbr in zip(names, row.m_aggs, row.mbrs):
                dump_pgm(m_agg, out / "maps" / f"step{row.step:03d}_{name}_attn.pgm")
                dump_pgm(mbr, out / "maps" / f"step{row.step:03d}_{name}_mbr.pgm")


def run_experiment(
    scene_path,
    out_dir,
    *,
    variant: str | None = None,
    dump_maps: bool = False,
    grad_through_tau: bool = False,
) -> RunReport:
    scene_file = load_scene(scene_path)
    config = scene_file.config.with_(variant=variant or scene_file.config.variant, grad_through_tau=grad_through_tau)
    report = run_scene(scene_file, config, keep_maps=dump_maps)
    write_run(report, [c.name for c in scene_file.concepts], out_dir, dump_maps=dump_maps)
    log.info("%s [%s]: final mIoU %.4f in %.2fs", report.scene, report.variant, report.final_miou, report.wall_time)
    return report


def with_param(config: GuidanceConfig, param: str, value: float) -> GuidanceConfig:
    if param not in SCENE_CONFIG_KEYS:
        raise KeyError(f"unknown parameter {param!r}; expected one of {sorted(SCENE_CONFIG_KEYS)}")
    if param in INT_CONFIG_KEYS:
        if float(value) != int(value):
            raise ValueError(f"{param} must be an integer, got {value}")
        value = int(value)
    return config.with_(**{SCENE_CONFIG_KEYS[param]: value})


def sweep(scene_file: SceneFile, param: str, values: Sequence[float], *, variant: str | None = None) -> list[tuple[float, float]]:
    """Final mIoU for each value of one numeric config field, seed held fixed."""
    base = scene_file.config if variant is None else scene_file.config.with_(variant=variant)
    out = []
    for v in values:
        report = run_scene(scene_file, with_param(base, param, v))
        out.append((v, report.final_miou))
    return out


def sweep_suite(scenes: Sequence[SceneFile], param: str, values: Sequence[float], *, scale: bool = False) -> list[tuple[float, float]]:
    """Suite-mean final mIoU per value.

    With ``scale=True`` the values multiply each scene's own setting of
    ``param`` instead of replacing it.
    """
    out = []
    for v in values:
        mious = []
        for s in scenes:
            base_value = getattr(s.config, SCENE_CONFIG_KEYS[param])
            cfg = with_param(s.config, param, base_value * v if scale else v)
            mious.append(run_scene(s, cfg).final_miou)
        out.append((v, float(np.mean(mious))))
    return out


def sweep_csv(param: str, table: Sequence[tuple[float, float]]) -> str:
    lines = [f"{param},final_miou"]
    lines += [f"{fmt(v)},{fmt(m)}" for v, m in table]
    return "\n".join(lines) + "\n"


def load_suite(scenes_dir) -> list[SceneFile]:
    paths = sorted(Path(scenes_dir).glob("*.json"))
    return [load_scene(p) for p in paths]


def run_suite(scenes_dir, out_dir, variants: Sequence[str] = ("rnb",), *, grad_through_tau: bool = False) -> dict:
    """Run every scene under every variant; one directory per (scene, variant)."""
    for v in variants:
        GuidanceConfig(variant=v)
    scenes = load_suite(scenes_dir)
    if not scenes:
        raise FileNotFoundError(f"no *.json scenes in {scenes_dir}")
    out = Path(out_dir)
    table: dict[str, list[float]] = {v: [] for v in variants}
    lines = ["scene,variant,final_miou"]
    for s in scenes:
        names = [c.name for c in s.concepts]
        for v in variants:
            cfg = s.config.with_(variant=v, grad_through_tau=grad_through_tau)
            report = run_scene(s, cfg)
            write_run(report, names, out / s.name / v)
            table[v].append(report.final_miou)
            lines.append(f"{s.name},{v},{fmt(report.final_miou)}")
    atomic_write_text(out / "suite.csv", "\n".join(lines) + "\n")
    summary = {
        "scenes": [s.name for s in scenes],
        "mean_final_miou": {v: float(np.mean(m)) for v, m in table.items()},
        "metric": METRIC_NOTE,
    }
    write_json(out / "summary.json", summary)
    return summary


# -- synthetic scenes -------------------------------------------------------

def random_scene(seed: int, base: int = 8, n_tokens: int = 4, dim: int = 4, k: int = 2, **config) -> SceneFile:
    """Seeded scene with ``k`` side-by-side boxes; concept ``i`` owns token ``i + 1``."""
    if k + 1 > n_tokens:
        raise ValueError("need at least k + 1 tokens")
    rng = np.random.default_rng([seed, 99])
    vertical = bool(rng.random() < 0.5)
    edges = np.linspace(0.0, 1.0, k + 1)
    concepts = []
    for i in range(k):
        lo, hi = edges[i], edges[i + 1]
        width = hi - lo
        a0 = lo + width * (0.05 + 0.15 * rng.random())
        a1 = hi - width * (0.05 + 0.15 * rng.random())
        b0 = 0.05 + 0.2 * rng.random()
        b1 = 0.75 + 0.2 * rng.random()
        box = [b0, a0, b1, a1] if vertical else [a0, b0, a1, b1]
        concepts.append({"name": f"c{i}", "tokens": [i + 1], "box": [round(x, 4) for x in box]})
    data = {
        "seed": seed,
        "n_tokens": n_tokens,
        "dim": dim,
        "base_resolution": [base, base],
        "layer_factors": [1, 2],
        "concepts": concepts,
        "config": config,
    }
    return parse_scene(data, name=f"random_{seed:03d}")


def energy_builder(scene_file: SceneFile, config: GuidanceConfig | None = None):
    """Loss builder over the leaf ``z`` for ``autodiff.gradcheck``."""
    scene = scene_file.build(config)
    cfg = scene.config

    def build(tape, leaves):
        loss, _, _ = build_energy(tape, leaves["z"], scene, cfg)
        return loss

    return build, scene


def gradcheck_scene(
    seed: int,
    probes: int = 64,
    h: float = 1e-4,
    *,
    grad_through_tau: bool = False,
    variant: str = "rnb",
) -> GradCheckReport:
    from ..sim import SimLatent

    scene_file = random_scene(seed)
    cfg = scene_file.config.with_(grad_through_tau=grad_through_tau, variant=variant)
    build, scene = energy_builder(scene_file, cfg)
    z = SimLatent.initial(scene.model, seed, cfg.sigma_q).z
    return gradcheck(build, {"z": z}, probe_count=probes, h=h, seed=seed)
