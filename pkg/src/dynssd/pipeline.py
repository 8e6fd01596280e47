"""End-to-end detector: propose, route by size, upsample or resize, classify.

The ablation variant swaps the generator for plain bicubic interpolation on
the small-region branch; in that mode the generator checkpoint is never read.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .classifier import classify_batch
from .imaging import BoundingBox
from .proposer import Proposer, propose
from .routing import DIRECT, GENERATOR, PipelineConfig, prepare_patch, route
from .srgan import Generator, PatchCNN, generate
from .synth import DatasetManifest

__all__ = [
    "Detection",
    "FrameResult",
    "LazyGenerator",
    "Models",
    "PipelineConfig",
    "detect_frame",
    "read_results",
    "route",
    "run_split",
    "write_results",
]


class LazyGenerator:
    """Defers building (and reading the checkpoint of) the generator until first use."""

    def __init__(self, factory: Callable[[], Generator]):
        self._factory = factory
        self._gen: Generator | None = None

    @classmethod
    def from_checkpoint(cls, path, config) -> "LazyGenerator":
        def build():
            gen = Generator(config)
            gen.load(path)
            gen.freeze()
            return gen

        return cls(build)

    @classmethod
    def of(cls, gen: Generator) -> "LazyGenerator":
        return cls(lambda: gen)

    @property
    def loaded(self) -> bool:
        return self._gen is not None

    def get(self) -> Generator:
        if self._gen is None:
            self._gen = self._factory()
        return self._gen

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        return generate(self.get(), patch)


@dataclass
class Models:
    proposer: Proposer
    classifier: PatchCNN
    generator: LazyGenerator | None = None


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    objectness: float
    prob: float
    route: str

    def to_json(self) -> dict:
        return {"box": list(self.box.as_tuple()), "objectness": self.objectness, "prob": self.prob, "route": self.route}

    @classmethod
    def from_json(cls, raw: dict) -> "Detection":
        if raw["route"] not in (GENERATOR, DIRECT):
            raise ValueError(f"unknown route {raw['route']!r}")
        return cls(BoundingBox.from_seq(raw["box"]), float(raw["objectness"]), float(raw["prob"]), raw["route"])


@dataclass(frozen=True)
class FrameResult:
    image_id: str
    detections: tuple[Detection, ...] = field(default_factory=tuple)

    @property
    def positive(self) -> bool:
        return bool(self.detections)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "positive": self.positive, "detections": [d.to_json() for d in self.detections]}

    @classmethod
    def from_json(cls, raw: dict) -> "FrameResult":
        res = cls(raw["image_id"], tuple(Detection.from_json(d) for d in raw["detections"]))
        if bool(raw["positive"]) != res.positive:
            raise ValueError(f"{raw['image_id']}: positive flag disagrees with detections")
        return res


def detect_frame(models: Models, img: np.ndarray, config: PipelineConfig, image_id: str = "") -> FrameResult:
    proposals = propose(
        models.proposer, img, config.confidence_threshold, config.nms_threshold, config.max_proposals
    )
    if not proposals:
        return FrameResult(image_id)
    upsample = None
    if config.upsampling_mode == "generator":
        if models.generator is None:
            raise ValueError("generator mode requires a generator")
        upsample = models.generator
    patches, routes = [], []
    for p in proposals:
        patch, path = prepare_patch(img, p.box, config, upsample)
        patches.append(patch)
        routes.append(path)
    # one patch at a time keeps every probability independent of the proposal count
    probs = [float(classify_batch(models.classifier, patch[None])[0]) for patch in patches]
    kept = tuple(
        Detection(p.box, p.objectness, prob, path)
        for p, prob, path in zip(proposals, probs, routes)
        if prob >= config.decision_threshold
    )
    return FrameResult(image_id, kept)


def write_results(results: Sequence[FrameResult], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_results(path) -> list[FrameResult]:
    path = Path(path)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(FrameResult.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad result record: {exc}") from exc
    return out


def run_split(
    models: Models, manifest: DatasetManifest, config: PipelineConfig, results_path=None
) -> list[FrameResult]:
    """One FrameResult per manifest item, in manifest order."""
    results = []
    for item in manifest.items:
        path = manifest.image_path(item)
        try:
            img = manifest.read_image(item)
        except OSError as exc:
            raise OSError(f"cannot read frame {path}: {exc}") from exc
        results.append(detect_frame(models, img, config, item.image_id))
    if results_path is not None:
        write_results(results, results_path)
    return results
