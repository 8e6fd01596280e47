"""Polyp / background patch classifier sharing the discriminator architecture.

Training patches come from the proposer's training split only: authentic
large crops, generator-upsampled small crops and negative regions, all
prepared through the same routing code path the pipeline uses.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .boxes import boxes_to_array, iou_matrix, jitter_box
from .imaging import BoundingBox, write_ppm
from .optim import AdamState, adam_step, zero_grad
from .routing import GENERATOR, PipelineConfig, prepare_patch
from .srgan import PatchCNN, PatchCNNConfig, to_nchw
from .synth import Annotation, DatasetManifest, load_frames

log = logging.getLogger(__name__)

POLYP, BACKGROUND = 1, 0
SOURCES = ("authentic", "generated", "negative")
TRAINING_SPLIT = "train"
NEGATIVE_MAX_IOU = 0.2


class LeakageError(ValueError):
    """Raised when classifier data would come from outside the proposer's training split."""


@dataclass
class ClassifierTrainingSet:
    patches: np.ndarray  # N x S x S x 3
    labels: np.ndarray  # N, 1 = polyp
    sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.patches)
        if self.patches.ndim != 4 or self.patches.shape[1] != self.patches.shape[2]:
            raise T.ShapeError(f"patches must be square N x S x S x 3, got {self.patches.shape}")
        if len(self.labels) != n or len(self.sources) != n:
            raise ValueError("patches, labels and sources must have equal length")
        bad = set(self.sources) - set(SOURCES)
        if bad:
            raise ValueError(f"unknown source tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.patches)

    def subset(self, idx) -> "ClassifierTrainingSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ClassifierTrainingSet(self.patches[idx], self.labels[idx], [self.sources[i] for i in idx])

    def dump(self, out_dir) -> None:
        """Write every patch as PPM plus an index.json describing label and source."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        index = []
        for i, (p, y, s) in enumerate(zip(self.patches, self.labels, self.sources)):
            name = f"patch-{i:05d}.ppm"
            write_ppm(p, out / name)
            index.append({"image": name, "label": "polyp" if y == POLYP else "background", "source": s})
        (out / "index.json").write_text(json.dumps(index, indent=1) + "\n")


def sample_negative_box(
    rng: np.random.Generator, gts: Sequence[BoundingBox], h: int, w: int, sizes: np.ndarray, tries: int = 50
) -> BoundingBox | None:
    """Random box with side lengths drawn from ``sizes`` and IoU < 0.2 with every gt."""
    gt = boxes_to_array(gts)
    for _ in range(tries):
        bw, bh = sizes[rng.integers(len(sizes))] * rng.uniform(0.8, 1.25, 2)
        bw, bh = min(bw, w - 1.0), min(bh, h - 1.0)
        x0, y0 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
        box = BoundingBox(x0, y0, x0 + bw, y0 + bh)
        if len(gt) == 0 or iou_matrix(gt, boxes_to_array([box])).max() < NEGATIVE_MAX_IOU:
            return box
    return None


def build_classifier_dataset(
    manifest: DatasetManifest,
    upsample: Callable[[np.ndarray], np.ndarray],
    config: PipelineConfig,
    seed: int,
    duplicate_scales: Sequence[float] = (0.75,),
    jitters_per_box: int = 2,
    proposer_split: str = TRAINING_SPLIT,
    extra_negatives: Callable[[np.ndarray, Annotation], list[BoundingBox]] | None = None,
    frames: Sequence[tuple[np.ndarray, Annotation]] | None = None,
) -> ClassifierTrainingSet:
    """Balanced 1:1 polyp/background patch set from the proposer's training split.

    ``upsample`` is the frozen generator (generator_input -> classifier_input).
    ``extra_negatives`` may add hard negatives, e.g. proposer false positives;
    they are filtered by the same IoU < 0.2 rule as the random ones.
    """
    if manifest.split != proposer_split:
        raise LeakageError(
            f"classifier data must come from the proposer's training split {proposer_split!r}, "
            f"got manifest split {manifest.split!r}"
        )
    cfg = config.with_mode("generator")
    if frames is None:
        frames = load_frames(manifest, duplicate_scales)
    rng = np.random.default_rng(seed)
    gt_sizes = np.array([(b.width, b.height) for _, ann in frames for b in ann.boxes])
    if len(gt_sizes) == 0:
        raise ValueError("training manifest has no positive boxes; cannot build a balanced classifier set")

    pos_patches, pos_sources = [], []
    neg_boxes: list[tuple[int, BoundingBox]] = []
    for fi, (img, ann) in enumerate(frames):
        h, w = img.shape[:2]
        for b in ann.boxes:
            for _ in range(jitters_per_box):
                patch, path = prepare_patch(img, jitter_box(b, rng, 0.1, (h, w)), cfg, upsample)
                pos_patches.append(patch)
                pos_sources.append("generated" if path == GENERATOR else "authentic")
        for _ in range(max(1, len(ann.boxes)) * jitters_per_box):
            nb = sample_negative_box(rng, ann.boxes, h, w, gt_sizes)
            if nb is not None:
                neg_boxes.append((fi, nb))
        if extra_negatives is not None:
            gt = boxes_to_array(ann.boxes)
            for nb in extra_negatives(img, ann):
                if len(gt) == 0 or iou_matrix(gt, boxes_to_array([nb])).max() < NEGATIVE_MAX_IOU:
                    neg_boxes.append((fi, nb))

    n = min(len(pos_patches), len(neg_boxes))
    if n == 0:
        raise ValueError("could not sample any negative regions")
    pos_idx = np.sort(rng.choice(len(pos_patches), n, replace=False))
    neg_idx = np.sort(rng.choice(len(neg_boxes), n, replace=False))
    neg_patches = [prepare_patch(frames[neg_boxes[i][0]][0], neg_boxes[i][1], cfg, upsample)[0] for i in neg_idx]
    patches = np.stack([pos_patches[i] for i in pos_idx] + neg_patches)
    labels = np.array([POLYP] * n + [BACKGROUND] * n, dtype=np.int64)
    sources = [pos_sources[i] for i in pos_idx] + ["negative"] * n
    log.info("classifier set: %d polyp (%d generated), %d background", n, sources.count("generated"), n)
    return ClassifierTrainingSet(patches, labels, sources)


# --- model ------------------------------------------------------------------------


def classify_batch(model: PatchCNN, patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if len(patches) == 0:
        return np.zeros(0)
    return T._sigmoid(model(T.Tensor(to_nchw(patches))).data)


def classify(model: PatchCNN, patch: np.ndarray) -> float:
    if np.asarray(patch).ndim != 3:
        raise T.ShapeError("classify takes a single S x S x 3 patch")
    return float(classify_batch(model, np.asarray(patch)[None])[0])


@dataclass(frozen=True)
class ClassifierSchedule:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3


def accuracy(model: PatchCNN, data: ClassifierTrainingSet, threshold: float = 0.5) -> float:
    probs = classify_batch(model, data.patches)
    return float(np.mean((probs >= threshold) == (data.labels == POLYP)))


def train_classifier(
    data: ClassifierTrainingSet,
    config: PatchCNNConfig | None = None,
    schedule: ClassifierSchedule | None = None,
    seed: int = 0,
    out_dir=None,
) -> tuple[PatchCNN, list[dict]]:
    """BCE + Adam; per-epoch ``classifier.ckpt`` and ``classifier_log.csv`` when ``out_dir`` is set."""
    if len(data) == 0:
        raise ValueError("cannot train the classifier on an empty dataset")
    if len(set(data.labels.tolist())) < 2:
        raise ValueError("classifier dataset contains a single class")
    config = config or PatchCNNConfig(input_size=data.patches.shape[1])
    sched = schedule or ClassifierSchedule()
    model = PatchCNN(config, seed=seed)
    state = AdamState(lr=sched.lr)
    rng = np.random.default_rng(seed)
    x_all = to_nchw(data.patches)
    y_all = (data.labels == POLYP).astype(np.float64)
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "classifier.ckpt")
    for epoch in range(sched.epochs):
        order = rng.permutation(len(data))
        total, correct = 0.0, 0
        for start in range(0, len(order), sched.batch_size):
            idx = order[start : start + sched.batch_size]
            x = x_all[idx]
            if rng.random() < 0.5:
                x = x[:, :, :, ::-1].copy()
            with T.Tape() as tape:
                logits = model(T.Tensor(x))
                loss = T.bce_with_logits(logits, y_all[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"classifier loss diverged at epoch {epoch}")
            T.backward(loss, tape)
            adam_step(model.params, state)
            zero_grad(model.params)
            total += loss.item() * len(idx)
            correct += int(np.sum((logits.data >= 0) == (y_all[idx] == 1)))
        history.append({"epoch": epoch, "loss": total / len(data), "accuracy": correct / len(data)})
        log.info("classifier epoch %d loss %.4f acc %.3f", epoch, history[-1]["loss"], history[-1]["accuracy"])
        if out is not None:
            model.save(out / "classifier.ckpt")
    if out is not None:
        with open(out / "classifier_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "accuracy"])
            for row in history:
                w.writerow([row["epoch"], f"{row['loss']:.10g}", f"{row['accuracy']:.10g}"])
    return model, history
