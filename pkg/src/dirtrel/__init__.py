"""Rare-event estimation with tensor-train transport maps."""

from .tt import GridSpec, TTTensor, eval_continuous, eval_discrete
from .cross import CrossConfig, CrossReport, maxvol, skeleton, tt_cross
from .transport import (
    DirtMap, ReferenceDensity, SirtLayer, TemperingSchedule, build_sirt_layer,
    dirt_build, dirt_sample, irt_invert,
)

__version__ = "0.1.0"

__all__ = [
    "GridSpec", "TTTensor", "eval_continuous", "eval_discrete",
    "CrossConfig", "CrossReport", "maxvol", "skeleton", "tt_cross",
    "DirtMap", "ReferenceDensity", "SirtLayer", "TemperingSchedule", "build_sirt_layer",
    "dirt_build", "dirt_sample", "irt_invert",
]
