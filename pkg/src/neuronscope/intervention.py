"""Ablation masks built from rankings; applied through ``forward(mask=...)``."""

from __future__ import annotations

import json
from pathlib import Path

from .attribution import NeuronRanking
from .model import EMPTY_MASK, AblationMask


def mask_from_ranking(ranking: NeuronRanking, k: int) -> AblationMask:
    """The first ``k`` neurons of ``ranking``."""
    if not 0 <= k <= len(ranking):
        raise ValueError(f"k={k} outside [0, {len(ranking)}]")
    return AblationMask.of(ranking.pairs(k))


def union(*masks: AblationMask) -> AblationMask:
    if not masks:
        return EMPTY_MASK
    return masks[0].union(*masks[1:])


def load_mask(path) -> AblationMask:
    return AblationMask.from_json(json.loads(Path(path).read_text()))
