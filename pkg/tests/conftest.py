from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from rnbguide import autodiff as ad
from rnbguide.attention import AttentionStack, ConceptMaps, ConceptSpec
from rnbguide.autodiff import Tape
from rnbguide.field import NormBox
from rnbguide.harness.runner import load_suite, random_scene, run_scene
from rnbguide.sim import SimLatent, evaluate

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
SUITE_DIR = FIXTURES / "suite"


@pytest.fixture(scope="session")
def calibration() -> dict:
    return json.loads((FIXTURES / "calibration.json").read_text())


def rect(shape, r0, r1, c0, c1) -> np.ndarray:
    """Filled mask over rows r0..r1 and cols c0..c1, inclusive."""
    m = np.zeros(shape)
    m[r0:r1 + 1, c0:c1 + 1] = 1.0
    return m


def hand_maps(mbr, gt, *, appear=None, shape_map=None, agg=None, seed=0) -> tuple[Tape, ConceptMaps, dict]:
    """ConceptMaps assembled directly from masks, with soft maps as leaves."""
    rng = np.random.default_rng(seed)
    mbr = np.asarray(mbr, dtype=float)
    gt = np.asarray(gt, dtype=float)
    tape = Tape()
    m_agg = tape.leaf(rng.random(gt.shape) if agg is None else agg, name="agg")
    m_shape = tape.leaf(rng.random(gt.shape) if shape_map is None else shape_map, name="shape")
    m_appear = tape.leaf(rng.random(gt.shape) if appear is None else appear, name="appear")
    cm = ConceptMaps(
        concept=ConceptSpec("c", (0,), NormBox(0, 0, 1, 1)),
        m_agg=m_agg,
        m_norm=m_agg,
        m_shape=m_shape,
        m_appear=m_appear,
        tau=0.5,
        fg_mask=mbr,
        mbr=mbr,
        b_shape=ad.ste_attach(mbr, m_shape),
        b_appear=ad.ste_attach(mbr, m_appear),
        gt_mask=gt,
    )
    return tape, cm, {"agg": m_agg, "shape": m_shape, "appear": m_appear}


def stack_of(*layers) -> tuple[Tape, AttentionStack]:
    tape = Tape()
    return tape, AttentionStack([tape.leaf(np.asarray(a, dtype=float)) for a in layers])


def mbr_box(mbr: np.ndarray) -> NormBox:
    """Box whose rasterization at ``mbr``'s resolution is exactly ``mbr``."""
    h, w = mbr.shape
    rows = np.flatnonzero(mbr.any(axis=1))
    cols = np.flatnonzero(mbr.any(axis=0))
    return NormBox(cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def aligned_scene(seed: int, max_rounds: int = 20):
    """Random scene whose boxes are moved onto the initial rectangles until they agree.

    The threshold depends on the box, so the box is re-fitted until the
    rectangle extracted at the initial latent reproduces it.  Returns None
    when no fixed point is reached.
    """
    sf = random_scene(seed)
    for _ in range(max_rounds):
        scene = sf.build()
        z = SimLatent.initial(scene.model, scene.seed, sf.config.sigma_q).z
        ev = evaluate(z, scene, sf.config, need_grad=False)
        if all(np.array_equal(cm.mbr, cm.gt_mask) for cm in ev.maps):
            return sf
        concepts = [dataclasses.replace(c, box=mbr_box(cm.mbr)) for c, cm in zip(sf.concepts, ev.maps)]
        sf = dataclasses.replace(sf, concepts=concepts)
    return None


class SuiteRuns:
    """Fixture-suite runs cached per (variant, eta scale) for the session."""

    def __init__(self):
        self.scenes = load_suite(SUITE_DIR)
        self._cache = {}

    def reports(self, variant: str = "rnb", eta_scale: float = 1.0):
        key = (variant, eta_scale)
        if key not in self._cache:
            self._cache[key] = [
                run_scene(s, s.config.with_(variant=variant, eta_g=s.config.eta_g * eta_scale)) for s in self.scenes
            ]
        return self._cache[key]

    def mean_miou(self, variant: str = "rnb", eta_scale: float = 1.0) -> float:
        return float(np.mean([r.final_miou for r in self.reports(variant, eta_scale)]))


@pytest.fixture(scope="session")
def suite_runs() -> SuiteRuns:
    return SuiteRuns()


# -- acceptance summary ------------------------------------------------------

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n, title = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    _criteria[item.nodeid] = (f"{n}", f"criterion {n} ({title}): {outcome}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_criteria.values(), key=lambda t: int(t[0])):
        terminalreporter.write_line(line)
