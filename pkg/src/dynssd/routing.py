"""Pipeline configuration, the size-routing predicate and patch preparation.

Both the classifier dataset builder and the live pipeline prepare patches
through :func:`prepare_patch`, which consults :func:`route`, so the two can
never disagree about which crops go through the generator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .imaging import BoundingBox, bicubic_resize, crop

GENERATOR = "generator"
DIRECT = "direct"
UPSAMPLING_MODES = ("generator", "bicubic")


@dataclass(frozen=True)
class PipelineConfig:
    routing_threshold: int = 48
    generator_input: int = 32
    classifier_input: int = 64
    confidence_threshold: float = 0.2
    nms_threshold: float = 0.45
    max_proposals: int = 16
    decision_threshold: float = 0.5
    upsampling_mode: str = "generator"

    def __post_init__(self):
        errors = []
        for name in ("routing_threshold", "generator_input", "classifier_input", "max_proposals"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name} must be a positive integer")
        if self.classifier_input != 2 * self.generator_input:
            errors.append(
                f"classifier_input ({self.classifier_input}) must be 2 x generator_input ({self.generator_input})"
            )
        if self.routing_threshold <= self.generator_input:
            errors.append(
                f"routing_threshold ({self.routing_threshold}) must exceed generator_input ({self.generator_input})"
            )
        if not 0.0 <= self.confidence_threshold <= 1.0:
            errors.append("confidence_threshold must lie in [0, 1]")
        if not 0.0 < self.nms_threshold <= 1.0:
            errors.append("nms_threshold must lie in (0, 1]")
        if not 0.0 <= self.decision_threshold < 1.0:
            errors.append("decision_threshold must lie in [0, 1)")
        if self.upsampling_mode not in UPSAMPLING_MODES:
            errors.append(f"upsampling_mode must be one of {UPSAMPLING_MODES}, got {self.upsampling_mode!r}")
        if errors:
            raise ValueError("; ".join(errors))

    def with_mode(self, mode: str) -> "PipelineConfig":
        return PipelineConfig(**{**asdict(self), "upsampling_mode": mode})


def route(box: BoundingBox, config: PipelineConfig) -> str:
    """Generator iff both box dimensions are strictly below the routing threshold."""
    thr = config.routing_threshold
    return GENERATOR if box.width < thr and box.height < thr else DIRECT


def prepare_patch(
    img: np.ndarray,
    box: BoundingBox,
    config: PipelineConfig,
    upsample: Callable[[np.ndarray], np.ndarray] | None,
) -> tuple[np.ndarray, str]:
    """Crop ``box`` and bring it to the classifier input size.

    ``upsample`` maps a generator_input patch to a classifier_input patch and
    is only called for generator-routed crops when the mode is "generator".
    """
    path = route(box, config)
    region = crop(img, box)
    ci, gi = config.classifier_input, config.generator_input
    if path == GENERATOR and config.upsampling_mode == "generator":
        if upsample is None:
            raise ValueError("generator mode needs an upsampling function")
        patch = upsample(bicubic_resize(region, gi, gi))
        if patch.shape != (ci, ci, 3):
            raise ValueError(f"upsampler returned {patch.shape}, expected {(ci, ci, 3)}")
        return patch, path
    return bicubic_resize(region, ci, ci), path
