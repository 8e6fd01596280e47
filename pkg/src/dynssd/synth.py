"""Synthetic colonoscopy-like frames with polyp annotations.

Frames have a smooth reddish-pink mucosa texture, optional distractors
(pale bubbles, specular glints, darker folds) and 0-2 polyps. Each polyp is
a soft elliptical dome with a hue shift and fine surface pitting. The
ground-truth box of a polyp is the tight box of pixels whose blob weight is
at least one half.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .imaging import BoundingBox, bicubic_resize, hflip, read_ppm, scale_and_pad, vflip, write_ppm

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

# Index offsets keep train / test scenes on disjoint seed streams.
SPLIT_OFFSETS = {"train": 0, "val": 1 << 24, "test": 2 << 24}


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def item_seed(master: int, index: int) -> int:
    return splitmix64((master & MASK64) ^ splitmix64(index))


@dataclass
class Annotation:
    image_id: str
    boxes: list[BoundingBox] = field(default_factory=list)
    relative_sizes: list[float] = field(default_factory=list)

    @property
    def is_positive(self) -> bool:
        return bool(self.boxes)

    @property
    def largest_relative_size(self) -> float:
        return max(self.relative_sizes)


def relative_size(box: BoundingBox, img_h: int, img_w: int) -> float:
    """Box diagonal over image diagonal."""
    return math.hypot(box.width, box.height) / math.hypot(img_w, img_h)


def annotate(image_id: str, boxes: Sequence[BoundingBox], img_h: int, img_w: int) -> Annotation:
    boxes = list(boxes)
    return Annotation(image_id, boxes, [relative_size(b, img_h, img_w) for b in boxes])


# --- scene generation ---------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    count_weights: tuple[float, ...] = (0.0, 0.85, 0.15)
    radius_range: tuple[float, float] = (8.0, 36.0)
    texture_amplitude: float = 0.08
    max_bubbles: int = 2
    max_glints: int = 3
    softness: float = 0.08

    def validate(self) -> None:
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"radius range must satisfy 0 < min <= max, got {self.radius_range}")
        # an ellipse stretched by up to 1.25 must fit with a one-pixel margin
        if 2 * hi * 1.25 + 2 > self.image_size:
            raise ValueError(f"radius up to {hi} cannot fit in a {self.image_size}px image")
        if not self.count_weights or min(self.count_weights) < 0 or sum(self.count_weights) <= 0:
            raise ValueError("count_weights must be non-negative with a positive sum")


def blob_weight(size: int, cx: float, cy: float, rx: float, ry: float, softness: float) -> np.ndarray:
    """Soft elliptical mask: 0.5 exactly on the ellipse boundary, ~1 inside."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    rho = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    z = np.clip((1.0 - rho) / softness, -50, 50)
    return 1.0 / (1.0 + np.exp(-z))


def mask_box(weight: np.ndarray, threshold: float = 0.5) -> BoundingBox | None:
    ys, xs = np.nonzero(weight >= threshold)
    if len(xs) == 0:
        return None
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _value_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells, 1))
    return bicubic_resize(coarse, size, size)[:, :, 0]


def _background(rng, cfg: SceneConfig) -> np.ndarray:
    s = cfg.image_size
    low = _value_noise(rng, s, 4)
    mid = _value_noise(rng, s, 12)
    tone = 0.65 * low + 0.35 * mid
    img = np.empty((s, s, 3))
    img[:, :, 0] = 0.62 + 0.25 * tone
    img[:, :, 1] = 0.28 + 0.16 * tone
    img[:, :, 2] = 0.30 + 0.14 * tone
    img += cfg.texture_amplitude * (rng.random((s, s, 1)) - 0.5)
    # darker folds: a couple of soft sinusoidal ridges
    yy, xx = np.mgrid[0:s, 0:s] / s
    for _ in range(rng.integers(0, 3)):
        theta, phase, freq = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi), rng.uniform(1.5, 3.0)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        ridge = np.exp(-((np.sin(2 * np.pi * freq * u + phase)) ** 2) / 0.02)
        img *= (1.0 - 0.25 * ridge)[:, :, None]
    # vignette typical of endoscope optics
    r2 = (xx - 0.5) ** 2 + (yy - 0.5) ** 2
    img *= (1.0 - 0.5 * r2)[:, :, None]
    return img


def _place(rng, cfg: SceneConfig, taken: list, radius_range) -> tuple[float, float, float, float] | None:
    s = cfg.image_size
    for _ in range(30):
        r = rng.uniform(*radius_range)
        rx, ry = r, r * rng.uniform(0.8, 1.25)
        cx = rng.uniform(rx + 1, s - rx - 1)
        cy = rng.uniform(ry + 1, s - ry - 1)
        if all(math.hypot(cx - ox, cy - oy) > 0.9 * (max(rx, ry) + orad) for ox, oy, orad in taken):
            taken.append((cx, cy, max(rx, ry)))
            return cx, cy, rx, ry
    return None


def _paint_polyp(img, rng, cfg: SceneConfig, cx, cy, rx, ry) -> np.ndarray:
    s = cfg.image_size
    alpha = blob_weight(s, cx, cy, rx, ry, cfg.softness)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    rho2 = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    dome = np.sqrt(np.clip(1.0 - rho2, 0.0, 1.0))
    # fine pit pattern on the polyp surface
    pits = np.cos(2 * np.pi * (xx - cx) / rng.uniform(3.0, 5.0)) * np.cos(2 * np.pi * (yy - cy) / rng.uniform(3.0, 5.0))
    hue = np.array([0.93, 0.55, 0.42]) + rng.uniform(-0.04, 0.04, 3)
    color = hue[None, None, :] * (0.75 + 0.3 * dome[:, :, None]) + 0.06 * pits[:, :, None]
    # specular highlight up and to the left of the apex
    hx, hy = cx - 0.35 * rx, cy - 0.35 * ry
    spec = np.exp(-(((xx - hx) ** 2 + (yy - hy) ** 2) / (0.06 * rx * ry + 1.0)))
    color = color + 0.25 * spec[:, :, None]
    a = alpha[:, :, None]
    img[:] = img * (1.0 - a) + color * a
    return alpha


def _paint_bubble(img, cfg: SceneConfig, cx, cy, rx, ry):
    s = cfg.image_size
    alpha = blob_weight(s, cx, cy, rx, ry, cfg.softness * 1.5)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    rho = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    rim = np.exp(-((rho - 0.9) ** 2) / 0.01)
    color = np.array([0.86, 0.80, 0.55])[None, None, :] * (0.85 + 0.15 * rim[:, :, None])
    a = 0.8 * alpha[:, :, None]
    img[:] = img * (1.0 - a) + color * a


def _paint_glint(img, rng, cfg: SceneConfig):
    s = cfg.image_size
    cx, cy = rng.uniform(4, s - 4, size=2)
    rad = rng.uniform(1.0, 3.0)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * rad * rad))
    img[:] = img * (1.0 - g[:, :, None]) + g[:, :, None]


def generate_scene(
    seed: int, config: SceneConfig | None = None, n_polyps: int | None = None, image_id: str | None = None
) -> tuple[np.ndarray, Annotation]:
    """Render one frame; fully determined by ``seed``, ``config`` and ``n_polyps``."""
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed & MASK64)
    weights = np.asarray(cfg.count_weights, dtype=np.float64)
    drawn = int(rng.choice(len(weights), p=weights / weights.sum()))
    count = drawn if n_polyps is None else int(n_polyps)
    img = _background(rng, cfg)
    taken: list = []
    boxes = []
    for _ in range(count):
        spot = _place(rng, cfg, taken, cfg.radius_range)
        if spot is None:
            continue
        alpha = _paint_polyp(img, rng, cfg, *spot)
        box = mask_box(alpha)
        if box is not None:
            boxes.append(box)
    lo, hi = cfg.radius_range
    for _ in range(rng.integers(0, cfg.max_bubbles + 1)):
        spot = _place(rng, cfg, taken, (lo * 0.6, hi * 0.7))
        if spot is not None:
            _paint_bubble(img, cfg, *spot)
    for _ in range(rng.integers(0, cfg.max_glints + 1)):
        _paint_glint(img, rng, cfg)
    img = np.clip(img, 0.0, 1.0)
    s = cfg.image_size
    return img, annotate(image_id or f"scene-{seed:016x}", boxes, s, s)


# --- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentPlan:
    hflip: bool
    vflip: bool
    zoom: float | None
    contrast: float | None
    saturation: float | None

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip) and self.zoom is None and self.contrast is None and self.saturation is None


def draw_plan(seed: int) -> AugmentPlan:
    rng = np.random.default_rng(seed & MASK64)
    coins = rng.random(5) < 0.5
    mags = rng.uniform((1.0, 0.8, 0.7), (1.3, 1.2, 1.3))
    return AugmentPlan(
        hflip=bool(coins[0]),
        vflip=bool(coins[1]),
        zoom=float(mags[0]) if coins[2] else None,
        contrast=float(mags[1]) if coins[3] else None,
        saturation=float(mags[2]) if coins[4] else None,
    )


def zoom_center(img: np.ndarray, boxes: Sequence[BoundingBox], z: float) -> tuple[np.ndarray, list[BoundingBox]]:
    """Magnify the central 1/z window back to full size; boxes that leave the frame are dropped."""
    h, w = img.shape[:2]
    ch, cw = h / z, w / z
    y0, x0 = (h - ch) / 2, (w - cw) / 2
    my = kernels.resize_matrix(h, h, y0, ch)
    mx = kernels.resize_matrix(w, w, x0, cw)
    rows = (my @ img.reshape(h, -1)).reshape(h, w, -1)
    out = np.clip(np.einsum("pw,owc->opc", mx, rows), 0.0, 1.0)
    moved = []
    cy, cx = h / 2, w / 2
    for b in boxes:
        nb = BoundingBox(
            (b.x_min - cx) * z + cx, (b.y_min - cy) * z + cy, (b.x_max - cx) * z + cx, (b.y_max - cy) * z + cy
        ).clipped(h, w)
        if nb is not None and nb.width >= 1.0 and nb.height >= 1.0:
            moved.append(nb)
    return np.ascontiguousarray(out), moved


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = img.mean()
    return np.clip(m + factor * (img - m), 0.0, 1.0)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    gray = img.mean(axis=2, keepdims=True)
    return np.clip(gray + factor * (img - gray), 0.0, 1.0)


def apply_plan(img: np.ndarray, ann: Annotation, plan: AugmentPlan) -> tuple[np.ndarray, Annotation]:
    boxes = list(ann.boxes)
    out = img
    if plan.hflip:
        out, boxes = hflip(out, boxes)
    if plan.vflip:
        out, boxes = vflip(out, boxes)
    if plan.zoom is not None:
        out, boxes = zoom_center(out, boxes, plan.zoom)
    if plan.contrast is not None:
        out = adjust_contrast(out, plan.contrast)
    if plan.saturation is not None:
        out = adjust_saturation(out, plan.saturation)
    h, w = out.shape[:2]
    return np.clip(out, 0.0, 1.0), annotate(ann.image_id, boxes, h, w)


def augment(img: np.ndarray, ann: Annotation, seed: int) -> tuple[np.ndarray, Annotation]:
    """Random flips, central zoom, contrast and saturation, each with probability 0.5."""
    return apply_plan(img, ann, draw_plan(seed))


# --- stratification -------------------------------------------------------------


@dataclass(frozen=True)
class SizeBand:
    """Half-open relative-size interval [lower, upper); the top band also holds ``upper``."""

    lower: float
    upper: float
    closed: bool = False

    def contains(self, r: float) -> bool:
        return self.lower <= r < self.upper or (self.closed and r == self.upper)

    def label(self) -> str:
        return f"[{self.lower:.3f}, {self.upper:.3f}{']' if self.closed else ')'}"


def bands_from_edges(edges: Sequence[float]) -> list[SizeBand]:
    cuts = [0.0, *edges, 1.0]
    return [SizeBand(cuts[i], cuts[i + 1], closed=(i == len(cuts) - 2)) for i in range(len(cuts) - 1)]


def stratify(annotations: Sequence[Annotation], k: int = 3) -> list[SizeBand]:
    """Quantile size bands over per-image relative size (largest box per image)."""
    if k < 1:
        raise ValueError("band count must be positive")
    sizes = sorted(a.largest_relative_size for a in annotations if a.is_positive)
    n = len(sizes)
    if n < k:
        raise ValueError(f"need at least {k} positive images to form {k} bands, got {n}")
    if k == 1:
        return bands_from_edges([])
    if sizes[0] == sizes[-1]:
        log.warning("all relative sizes equal (%.4f); collapsing to a single band", sizes[0])
        return bands_from_edges([])
    edges: list[float] = []
    for j in range(1, k):
        e = sizes[(j * n) // k]
        if e > sizes[0] and (not edges or e > edges[-1]):
            edges.append(e)
    if len(edges) < k - 1:
        log.warning("tied relative sizes collapsed %d bands into %d", k, len(edges) + 1)
    return bands_from_edges(edges)


def band_index(bands: Sequence[SizeBand], r: float) -> int:
    for i, b in enumerate(bands):
        if b.contains(r):
            return i
    raise ValueError(f"relative size {r} falls outside every band")


# --- manifests --------------------------------------------------------------------


@dataclass
class ManifestItem:
    image: str
    annotation: Annotation

    @property
    def image_id(self) -> str:
        return self.annotation.image_id


@dataclass
class DatasetManifest:
    split: str
    seed: int
    scale_factor: float
    image_size: tuple[int, int]
    items: list[ManifestItem] = field(default_factory=list)
    root: Path | None = None

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "seed": self.seed,
            "scale_factor": self.scale_factor,
            "image_size": list(self.image_size),
            "items": [
                {
                    "id": it.image_id,
                    "image": it.image,
                    "boxes": [list(b.as_tuple()) for b in it.annotation.boxes],
                    "positive": it.annotation.is_positive,
                }
                for it in self.items
            ],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        h, w = raw.get("image_size", (None, None))
        items = []
        for entry in raw["items"]:
            image = entry["image"]
            if h is None:
                h, w = read_ppm(path.parent / image).shape[:2]
            boxes = [BoundingBox.from_seq(b) for b in entry["boxes"]]
            image_id = entry.get("id") or Path(image).stem
            ann = annotate(image_id, boxes, h, w)
            if bool(entry.get("positive", ann.is_positive)) != ann.is_positive:
                raise ValueError(f"{path}: item {image_id} positive flag disagrees with its boxes")
            items.append(ManifestItem(image, ann))
        return cls(raw["split"], int(raw["seed"]), float(raw["scale_factor"]), (h, w), items, path.parent)

    def image_path(self, item: ManifestItem) -> Path:
        return (self.root or Path(".")) / item.image

    def read_image(self, item: ManifestItem) -> np.ndarray:
        return read_ppm(self.image_path(item))

    def annotations(self) -> list[Annotation]:
        return [it.annotation for it in self.items]


def frame_plan(seed: int, n_pos: int, n_neg: int) -> list[bool]:
    """Deterministic interleaving of positive and negative frames."""
    flags = np.array([True] * n_pos + [False] * n_neg)
    np.random.default_rng(seed & MASK64).shuffle(flags)
    return [bool(f) for f in flags]


def render_split(
    split: str, seed: int, n_pos: int, n_neg: int, config: SceneConfig | None = None, scale_factor: float = 1.0
):
    """Yield (image_id, image, annotation) for every frame of a split.

    Scenes are keyed by the split's *base* name (``test75`` reuses ``test``
    scenes) so scaled splits are duplicates of their unscaled parent.
    """
    cfg = config or SceneConfig()
    base = split.rstrip("0123456789") or split
    offset = SPLIT_OFFSETS.get(base, 3 << 24)
    for i, positive in enumerate(frame_plan(seed ^ offset, n_pos, n_neg)):
        s = item_seed(seed, offset + i)
        image_id = f"{base}-{i:05d}"
        img, ann = generate_scene(s, cfg, n_polyps=None if positive else 0, image_id=image_id)
        if positive and not ann.is_positive:
            img, ann = generate_scene(s, cfg, n_polyps=1, image_id=image_id)
        if scale_factor != 1.0:
            img, boxes = scale_and_pad(img, ann.boxes, scale_factor)
            ann = annotate(image_id, boxes, *img.shape[:2])
        yield image_id, img, ann


def write_split(
    out_dir, split: str, seed: int, n_pos: int, n_neg: int, config: SceneConfig | None = None, scale_factor: float = 1.0
) -> DatasetManifest:
    cfg = config or SceneConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(split, seed, scale_factor, (cfg.image_size, cfg.image_size), root=out_dir)
    for image_id, img, ann in render_split(split, seed, n_pos, n_neg, cfg, scale_factor):
        name = f"{image_id}.ppm"
        write_ppm(img, out_dir / name)
        # boxes are stored against the quantised image actually written
        manifest.items.append(ManifestItem(name, ann))
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_frames(manifest: DatasetManifest, duplicate_scales: Sequence[float] = ()) -> list[tuple[np.ndarray, Annotation]]:
    """Read every frame of a manifest, plus scale-and-pad duplicates at each extra factor."""
    h, w = manifest.image_size
    frames = []
    for item in manifest.items:
        img = manifest.read_image(item)
        frames.append((img, item.annotation))
        for f in duplicate_scales:
            scaled, boxes = scale_and_pad(img, item.annotation.boxes, f)
            frames.append((scaled, annotate(item.image_id, boxes, h, w)))
    return frames
