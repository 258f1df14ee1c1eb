from __future__ import annotations

from typing import Sequence

import numpy as np

from ..attention import ConceptMaps
from ..energy import box_iou
from ..errors import MissingRun
from ..sim import StepReport


def miou_metric(maps: Sequence[ConceptMaps]) -> float:
    """Mean over concepts of IoU(final bounding rectangle, box mask)."""
    if not maps:
        raise MissingRun("no concept maps to score")
    return float(np.mean([box_iou(cm.mbr, cm.gt_mask) for cm in maps]))


def trajectory_miou(trajectory: Sequence[StepReport]) -> float:
    if not trajectory:
        raise MissingRun("empty trajectory")
    return float(np.mean(trajectory[-1].ious))


def suite_miou(per_scene: Sequence[float]) -> float:
    if not per_scene:
        raise MissingRun("no scenes were run")
    return float(np.mean(per_scene))


def steps_to_iou(trajectory: Sequence[StepReport], level: float = 0.5) -> int | None:
    """First step whose mean IoU reaches ``level``."""
    for row in trajectory:
        if np.mean(row.ious) >= level:
            return row.step
    return None
