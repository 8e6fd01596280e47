"""SSD-style single-shot detector used as a high-recall region proposer.

A four-block stride-2 backbone feeds objectness and box-regression heads on
its last two feature maps. Priors are tiled per cell and aspect ratio,
matched to ground truth with the usual best-prior-plus-threshold rule, and
trained with smooth-L1 localisation plus objectness BCE under hard negative
mining.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .boxes import RegionProposal, boxes_to_array, iou_matrix, nms_indices
from .imaging import BoundingBox
from .module import Module
from .optim import AdamState, adam_step, conv_param, zero_grad
from .synth import Annotation, apply_plan, draw_plan, item_seed

log = logging.getLogger(__name__)

VARIANCES = (0.1, 0.2)


@dataclass(frozen=True)
class ProposerConfig:
    image_size: int = 128
    channels: tuple[int, ...] = (16, 32, 32, 64)
    s_min: float = 0.2
    s_max: float = 0.7
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    match_iou: float = 0.5
    negative_ratio: float = 3.0
    confidence: float = 0.2
    nms_iou: float = 0.45
    max_proposals: int = 16

    @property
    def feature_maps(self) -> tuple[int, ...]:
        sizes, n = [], self.image_size
        for _ in self.channels:
            n = (n + 1) // 2
            sizes.append(n)
        return tuple(sizes[-2:]) if len(sizes) >= 2 else tuple(sizes)


# --- priors and box coding -----------------------------------------------------


def build_priors(
    feature_maps: Sequence[int],
    s_min: float = 0.2,
    s_max: float = 0.7,
    aspect_ratios: Sequence[float] = (1.0, 2.0, 0.5),
) -> np.ndarray:
    """Prior boxes as an (P, 4) array of normalised (cx, cy, w, h).

    Order: level, row, column, aspect ratio.
    """
    if not feature_maps:
        raise ValueError("need at least one feature map level")
    if any(int(f) < 1 for f in feature_maps):
        raise ValueError(f"feature map sizes must be positive, got {feature_maps}")
    if not 0 < s_min <= s_max <= 1:
        raise ValueError(f"need 0 < s_min <= s_max <= 1, got {s_min}, {s_max}")
    if not aspect_ratios or min(aspect_ratios) <= 0:
        raise ValueError("aspect ratios must be positive")
    m = len(feature_maps)
    out = []
    for k, f in enumerate(feature_maps):
        s = s_min if m == 1 else s_min + (s_max - s_min) * k / (m - 1)
        for i in range(f):
            for j in range(f):
                cx, cy = (j + 0.5) / f, (i + 0.5) / f
                for a in aspect_ratios:
                    w = min(s * math.sqrt(a), 1.0)
                    h = min(s / math.sqrt(a), 1.0)
                    out.append((cx, cy, w, h))
    return np.array(out, dtype=np.float64)


def center_to_corner(b: np.ndarray) -> np.ndarray:
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def corner_to_center(b: np.ndarray) -> np.ndarray:
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def encode(boxes: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """Regression targets of corner-form boxes relative to centre-form priors."""
    c = corner_to_center(boxes)
    return np.concatenate(
        [
            (c[..., :2] - priors[..., :2]) / (priors[..., 2:] * VARIANCES[0]),
            np.log(c[..., 2:] / priors[..., 2:]) / VARIANCES[1],
        ],
        axis=-1,
    )


def decode(offsets: np.ndarray, priors: np.ndarray) -> np.ndarray:
    centers = priors[..., :2] + offsets[..., :2] * VARIANCES[0] * priors[..., 2:]
    sizes = priors[..., 2:] * np.exp(offsets[..., 2:] * VARIANCES[1])
    return center_to_corner(np.concatenate([centers, sizes], axis=-1))


@dataclass
class MatchAssignment:
    positive: np.ndarray  # (P,) bool
    gt_index: np.ndarray  # (P,) int, -1 for negatives
    targets: np.ndarray  # (P, 4) encoded offsets, zero for negatives

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def match_priors(priors: np.ndarray, gt_boxes: np.ndarray, iou_threshold: float = 0.5) -> MatchAssignment:
    """Assign priors to normalised corner-form ground truth boxes.

    Each ground truth first claims its best still-unclaimed prior; every
    other prior then takes its best ground truth if that overlap reaches
    ``iou_threshold``.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"match IoU threshold must lie in (0, 1), got {iou_threshold}")
    p = len(priors)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_index = np.full(p, -1, dtype=np.int64)
    targets = np.zeros((p, 4))
    if len(gt) == 0:
        return MatchAssignment(np.zeros(p, dtype=bool), gt_index, targets)
    ious = iou_matrix(gt, center_to_corner(priors))  # (G, P)
    forced = np.zeros(p, dtype=bool)
    for g in range(len(gt)):
        row = np.where(forced, -1.0, ious[g])
        best = int(np.argmax(row))
        forced[best] = True
        gt_index[best] = g
    best_gt = np.argmax(ious, axis=0)
    best_iou = ious[best_gt, np.arange(p)]
    by_threshold = (~forced) & (best_iou >= iou_threshold)
    gt_index[by_threshold] = best_gt[by_threshold]
    positive = gt_index >= 0
    targets[positive] = encode(gt[gt_index[positive]], priors[positive])
    return MatchAssignment(positive, gt_index, targets)


# --- loss ---------------------------------------------------------------------


def hard_negative_mask(neg_loss: np.ndarray, positive: np.ndarray, ratio: float) -> np.ndarray:
    """Pick the highest-loss negatives, ``ratio`` per positive over the whole batch.

    Ties are broken by the lower flat index so selection is deterministic.
    """
    flat_loss = neg_loss.reshape(-1)
    flat_pos = positive.reshape(-1)
    n_pos = int(flat_pos.sum())
    candidates = np.flatnonzero(~flat_pos)
    k = min(int(math.floor(ratio * n_pos)), len(candidates))
    mask = np.zeros(flat_loss.shape, dtype=bool)
    if k > 0:
        order = np.argsort(-flat_loss[candidates], kind="stable")
        mask[candidates[order[:k]]] = True
    return mask.reshape(positive.shape)


def multibox_loss(
    class_logits: T.Tensor,
    loc_preds: T.Tensor,
    assignments: Sequence[MatchAssignment],
    negative_ratio: float = 3.0,
) -> T.Tensor:
    """(smooth-L1 on positives + BCE on positives and mined negatives) / #positives."""
    n, p = class_logits.shape
    if loc_preds.shape != (n, p, 4):
        raise T.ShapeError(f"loc_preds shape {loc_preds.shape} does not match logits {class_logits.shape}")
    if len(assignments) != n:
        raise T.ShapeError(f"{len(assignments)} assignments for a batch of {n}")
    positive = np.stack([a.positive for a in assignments])
    if positive.shape != (n, p):
        raise T.ShapeError(f"assignment prior count {positive.shape[1]} != {p}")
    targets = np.stack([a.targets for a in assignments])

    conf = T.bce_with_logits(class_logits, positive.astype(np.float64), reduction="none")
    mined = hard_negative_mask(np.where(positive, -np.inf, conf.data), positive, negative_ratio)
    conf_term = T.sum(T.mul(conf, (positive | mined).astype(np.float64)))

    loc = T.smooth_l1(loc_preds, T.Tensor(targets), reduction="none")
    loc_term = T.sum(T.mul(loc, np.repeat(positive[:, :, None], 4, axis=2).astype(np.float64)))
    norm = max(int(positive.sum()), 1)
    return T.scale(T.add(conf_term, loc_term), 1.0 / norm)


# --- model ----------------------------------------------------------------------


class Proposer(Module):
    def __init__(self, config: ProposerConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or ProposerConfig()
        rng = np.random.default_rng(seed)
        cin = 3
        for i, cout in enumerate(cfg.channels):
            self._add(f"backbone{i}", conv_param(rng, cin, cout, 3))
            cin = cout
        a = len(cfg.aspect_ratios)
        head_in = cfg.channels[-2:] if len(cfg.channels) >= 2 else cfg.channels
        for lvl, c in enumerate(head_in):
            self._add(f"cls{lvl}", conv_param(rng, c, a, 3))
            self._add(f"loc{lvl}", conv_param(rng, c, 4 * a, 3))
        self.priors = build_priors(cfg.feature_maps, cfg.s_min, cfg.s_max, cfg.aspect_ratios)

    def forward(self, x: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        n = x.shape[0]
        h = x
        feats = []
        for i in range(len(self.config.channels)):
            h = T.leaky_relu(
                T.conv2d(h, self.params[f"backbone{i}.w"], self.params[f"backbone{i}.b"], stride=2, padding=1), 0.2
            )
            feats.append(h)
        cls_parts, loc_parts = [], []
        for lvl, f in enumerate(feats[-2:]):
            c = T.conv2d(f, self.params[f"cls{lvl}.w"], self.params[f"cls{lvl}.b"], padding=1)
            l = T.conv2d(f, self.params[f"loc{lvl}.w"], self.params[f"loc{lvl}.b"], padding=1)
            _, a, fh, fw = c.shape
            cls_parts.append(T.reshape(T.transpose(c, (0, 2, 3, 1)), (n, fh * fw * a)))
            loc_parts.append(T.reshape(T.transpose(l, (0, 2, 3, 1)), (n, fh * fw * a, 4)))
        return T.concat(cls_parts, axis=1), T.concat(loc_parts, axis=1)

    __call__ = forward


def to_input(images: Sequence[np.ndarray]) -> T.Tensor:
    """Stack HxWx3 images in [0, 1] into a centred NCHW tensor."""
    batch = np.stack([np.asarray(im, dtype=np.float64) for im in images]).transpose(0, 3, 1, 2)
    return T.Tensor(2.0 * batch - 1.0)


# --- inference --------------------------------------------------------------------


def propose_batch(
    model: Proposer,
    images: Sequence[np.ndarray],
    confidence_threshold: float | None = None,
    nms_threshold: float | None = None,
    max_proposals: int | None = None,
) -> list[list[RegionProposal]]:
    cfg = model.config
    conf_t = cfg.confidence if confidence_threshold is None else confidence_threshold
    nms_t = cfg.nms_iou if nms_threshold is None else nms_threshold
    cap = cfg.max_proposals if max_proposals is None else max_proposals
    if not images:
        return []
    h, w = images[0].shape[:2]
    logits, loc = model(to_input(images))
    scores = T._sigmoid(logits.data)
    boxes = decode(loc.data, model.priors[None])
    boxes = boxes * np.array([w, h, w, h], dtype=np.float64)
    boxes[..., [0, 2]] = np.clip(boxes[..., [0, 2]], 0.0, w)
    boxes[..., [1, 3]] = np.clip(boxes[..., [1, 3]], 0.0, h)
    out = []
    for b, s in zip(boxes, scores):
        valid = (s >= conf_t) & (b[:, 2] - b[:, 0] >= 1.0) & (b[:, 3] - b[:, 1] >= 1.0)
        idx = np.flatnonzero(valid)
        keep = idx[nms_indices(b[idx], s[idx], nms_t)][:cap] if len(idx) else idx
        out.append([RegionProposal(BoundingBox(*map(float, b[i])), float(s[i])) for i in keep])
    return out


def propose(model: Proposer, img: np.ndarray, confidence_threshold=None, nms_threshold=None, max_proposals=None):
    return propose_batch(model, [img], confidence_threshold, nms_threshold, max_proposals)[0]


# --- training ----------------------------------------------------------------------


@dataclass
class TrainSchedule:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    augment: bool = True


def _normalised(boxes: Sequence[BoundingBox], h: int, w: int) -> np.ndarray:
    return boxes_to_array(boxes) / np.array([w, h, w, h], dtype=np.float64)


def train_proposer(
    frames: Sequence[tuple[np.ndarray, Annotation]],
    config: ProposerConfig | None = None,
    schedule: TrainSchedule | None = None,
    seed: int = 0,
    on_epoch: Callable[[int, float, "Proposer"], None] | None = None,
) -> tuple[Proposer, list[float]]:
    """Train on (image, annotation) pairs; returns the model and per-epoch mean loss."""
    if not frames:
        raise ValueError("cannot train the proposer on an empty frame list")
    sched = schedule or TrainSchedule()
    model = Proposer(config, seed=seed)
    state = AdamState(lr=sched.lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(sched.epochs):
        order = rng.permutation(len(frames))
        losses = []
        for start in range(0, len(order), sched.batch_size):
            imgs, assigns = [], []
            for i in order[start : start + sched.batch_size]:
                img, ann = frames[i]
                if sched.augment:
                    img, ann = apply_plan(img, ann, draw_plan(item_seed(seed, epoch * len(frames) + int(i))))
                h, w = img.shape[:2]
                imgs.append(img)
                assigns.append(match_priors(model.priors, _normalised(ann.boxes, h, w), model.config.match_iou))
            with T.Tape() as tape:
                logits, loc = model(to_input(imgs))
                loss = multibox_loss(logits, loc, assigns, model.config.negative_ratio)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"proposer loss diverged at epoch {epoch}")
            T.backward(loss, tape)
            adam_step(model.params, state)
            zero_grad(model.params)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("proposer epoch %d loss %.4f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1], model)
    return model, history
