"""x2 super-resolution generator, patch discriminator and their adversarial training.

The generator predicts a residual on top of a nearest-neighbour upsample of
its input; the output head starts at zero so an untrained generator is
exactly that upsample. Output is clamped to [0, 1].

The discriminator is a small strided CNN ending in one logit. The
classifier reuses the same architecture.
"""

from __future__ import annotations

import csv
import math
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .boxes import jitter_box
from .imaging import bicubic_resize, crop
from .module import Module
from .optim import AdamState, adam_step, conv_param, dense_param, zero_grad
from .synth import Annotation

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "loss_g", "loss_d", "pixel", "adv", "cycle")


@dataclass(frozen=True)
class GeneratorConfig:
    input_size: int = 32
    upsample_factor: int = 2
    residual_blocks: int = 4
    base_channels: int = 8

    def __post_init__(self):
        if self.upsample_factor != 2:
            raise ValueError(f"upsample_factor is fixed at 2, got {self.upsample_factor}")
        for name in ("input_size", "residual_blocks", "base_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"generator {name} must be positive")

    @property
    def output_size(self) -> int:
        return 2 * self.input_size


@dataclass(frozen=True)
class PatchCNNConfig:
    input_size: int = 64
    channels: tuple[int, ...] = (8, 16, 32, 32)

    def __post_init__(self):
        if self.input_size < 1 or not self.channels or min(self.channels) < 1:
            raise ValueError("patch CNN needs a positive input size and channel counts")

    @property
    def final_side(self) -> int:
        n = self.input_size
        for _ in self.channels:
            n = (n + 1) // 2
        return n


@dataclass(frozen=True)
class GanLossWeights:
    lambda_adv: float = 1e-4
    lambda_pixel: float = 1.0
    lambda_cycle: float = 0.1

    def __post_init__(self):
        w = (self.lambda_adv, self.lambda_pixel, self.lambda_cycle)
        if min(w) < 0:
            raise ValueError(f"GAN loss weights must be non-negative, got {w}")
        if max(w) == 0:
            raise ValueError("at least one GAN loss weight must be positive")


def to_nchw(patches) -> np.ndarray:
    arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise T.ShapeError(f"expected N x H x W x 3 patches, got {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


class Generator(Module):
    def __init__(self, config: GeneratorConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        rng = np.random.default_rng(seed)
        c = cfg.base_channels
        self._add("stem", conv_param(rng, 3, c, 3))
        for i in range(cfg.residual_blocks):
            self._add(f"res{i}a", conv_param(rng, c, c, 3))
            self._add(f"res{i}b", conv_param(rng, c, c, 3))
        self._add("up", conv_param(rng, c, c, 3))
        self._add("head", conv_param(rng, c, 3, 3, zero=True))

    def _conv(self, x, name):
        return T.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], padding=1)

    def forward(self, x: T.Tensor) -> T.Tensor:
        s = self.config.input_size
        if x.data.ndim != 4 or x.shape[1:] != (3, s, s):
            raise T.ShapeError(f"generator expects N x 3 x {s} x {s} input, got {x.shape}")
        h = T.leaky_relu(self._conv(x, "stem"), 0.2)
        for i in range(self.config.residual_blocks):
            r = T.leaky_relu(self._conv(h, f"res{i}a"), 0.2)
            h = T.add(h, self._conv(r, f"res{i}b"))
        u = T.leaky_relu(self._conv(T.upsample_nearest2x(h), "up"), 0.2)
        return T.clip(T.add(T.upsample_nearest2x(x), self._conv(u, "head")), 0.0, 1.0)

    __call__ = forward


class PatchCNN(Module):
    """Strided conv stack to a single logit; the discriminator and the classifier."""

    def __init__(self, config: PatchCNNConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or PatchCNNConfig()
        rng = np.random.default_rng(seed)
        cin = 3
        for i, cout in enumerate(cfg.channels):
            self._add(f"conv{i}", conv_param(rng, cin, cout, 3))
            cin = cout
        self._add("fc", dense_param(rng, cin * cfg.final_side**2, 1))

    def forward(self, x: T.Tensor) -> T.Tensor:
        s = self.config.input_size
        if x.data.ndim != 4 or x.shape[1:] != (3, s, s):
            raise T.ShapeError(f"patch network expects N x 3 x {s} x {s} input, got {x.shape}")
        h = x
        for i in range(len(self.config.channels)):
            h = T.leaky_relu(
                T.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride=2, padding=1), 0.2
            )
        flat = T.reshape(h, (x.shape[0], h.size // x.shape[0]))
        return T.reshape(T.dense(flat, self.params["fc.w"], self.params["fc.b"]), (x.shape[0],))

    __call__ = forward


Discriminator = PatchCNN


def generate(gen: Generator, patch: np.ndarray) -> np.ndarray:
    """Upsample one H x W x 3 patch (or a batch) by exactly two."""
    single = np.asarray(patch).ndim == 3
    out = to_nhwc(gen(T.Tensor(to_nchw(patch))).data)
    return out[0] if single else out


def discriminate(disc: PatchCNN, patch: np.ndarray) -> float:
    if np.asarray(patch).ndim != 3:
        raise T.ShapeError("discriminate scores a single H x W x 3 patch")
    return float(disc(T.Tensor(to_nchw(patch))).data[0])


def downsample2x(hr: np.ndarray) -> np.ndarray:
    """Bicubic halving of an N x H x W x 3 batch."""
    n, h, w, _ = hr.shape
    if h % 2 or w % 2:
        raise T.ShapeError(f"cannot halve odd patch size {h}x{w}")
    return np.stack([bicubic_resize(p, h // 2, w // 2) for p in hr])


def generator_objective(
    gen: Generator, disc: PatchCNN, lr: T.Tensor, hr: T.Tensor, weights: GanLossWeights
) -> tuple[T.Tensor, T.Tensor, T.Tensor | None, T.Tensor]:
    """Weighted generator loss and its (pixel, adversarial, cycle) terms.

    The adversarial term is skipped entirely (``None``) when its weight is 0.
    """
    fake = gen(lr)
    pixel = T.mse(fake, hr)
    cycle = T.mse(T.resize(fake, lr.shape[2], lr.shape[3]), lr)
    total = T.add(T.scale(pixel, weights.lambda_pixel), T.scale(cycle, weights.lambda_cycle))
    adv = None
    if weights.lambda_adv > 0:
        adv = T.bce_with_logits(disc(fake), np.ones(lr.shape[0]))
        total = T.add(total, T.scale(adv, weights.lambda_adv))
    return total, pixel, adv, cycle


class GanStepLosses(NamedTuple):
    loss_g: float
    loss_d: float
    pixel: float
    adv: float
    cycle: float


def gan_train_step(
    gen: Generator,
    disc: PatchCNN,
    hr_batch: np.ndarray,
    weights: GanLossWeights,
    opt_g: AdamState,
    opt_d: AdamState,
    lr_batch: np.ndarray | None = None,
) -> GanStepLosses:
    """One discriminator update followed by one generator update."""
    hr_batch = np.asarray(hr_batch, dtype=np.float64)
    if hr_batch.ndim != 4 or hr_batch.shape[1:3] != (gen.config.output_size,) * 2:
        raise T.ShapeError(f"hr batch must be N x {gen.config.output_size}^2 x 3, got {hr_batch.shape}")
    if lr_batch is None:
        lr_batch = downsample2x(hr_batch)
    hr = T.Tensor(to_nchw(hr_batch))
    lr = T.Tensor(to_nchw(lr_batch))
    n = hr_batch.shape[0]

    fake = gen(lr)  # no tape active: a constant for the discriminator
    with T.Tape() as tape:
        d_real = disc(hr)
        d_fake = disc(T.Tensor(fake.data))
        loss_d = T.add(T.bce_with_logits(d_real, np.ones(n)), T.bce_with_logits(d_fake, np.zeros(n)))
    T.backward(loss_d, tape)
    adam_step(disc.params, opt_d)
    zero_grad(disc.params)

    with T.Tape() as tape:
        total, pixel, adv, cycle = generator_objective(gen, disc, lr, hr, weights)
    if not (np.isfinite(total.data) and np.isfinite(loss_d.data)):
        raise FloatingPointError("GAN loss became non-finite")
    T.backward(total, tape)
    adam_step(gen.params, opt_g)
    zero_grad(gen.params)
    zero_grad(disc.params)
    adv_value = adv.item() if adv is not None else 0.0
    return GanStepLosses(total.item(), loss_d.item(), pixel.item(), adv_value, cycle.item())


# --- data -----------------------------------------------------------------------


def polyp_patches(
    frames: Sequence[tuple[np.ndarray, Annotation]],
    size: int,
    count: int,
    seed: int,
    min_side: float = 0.0,
) -> np.ndarray:
    """Jittered ground-truth crops resized to ``size``; the high-resolution training set.

    Boxes with a side below ``min_side`` are skipped so high-resolution
    targets are not themselves heavy upsamples.
    """
    pool = [(img, b) for img, ann in frames for b in ann.boxes if min(b.width, b.height) >= min_side]
    if not pool:
        raise ValueError(f"no ground-truth boxes with both sides >= {min_side} to build patches from")
    rng = np.random.default_rng(seed)
    out = np.empty((count, size, size, 3))
    for k in range(count):
        img, box = pool[k % len(pool)] if k < len(pool) else pool[int(rng.integers(len(pool)))]
        patch = bicubic_resize(crop(img, jitter_box(box, rng, 0.1, img.shape[:2])), size, size)
        if rng.random() < 0.5:
            patch = patch[:, ::-1]
        out[k] = patch
    return out


# --- training ---------------------------------------------------------------------


@dataclass(frozen=True)
class GanSchedule:
    epochs: int = 20
    batch_size: int = 16
    lr_g: float = 1e-3
    lr_d: float = 2e-4
    cosine_decay: bool = True

    def rates(self, epoch: int) -> tuple[float, float]:
        """(generator, discriminator) learning rates for ``epoch``."""
        if not self.cosine_decay or self.epochs <= 1:
            return self.lr_g, self.lr_d
        f = 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.lr_g * f, self.lr_d * f


def train_gan(
    patches: np.ndarray,
    gen_config: GeneratorConfig | None = None,
    disc_config: PatchCNNConfig | None = None,
    weights: GanLossWeights | None = None,
    schedule: GanSchedule | None = None,
    seed: int = 0,
    out_dir=None,
) -> tuple[Generator, PatchCNN, list[GanStepLosses]]:
    """Alternating 1:1 updates over shuffled minibatches of high-resolution patches.

    With ``out_dir`` set, ``generator.ckpt`` / ``discriminator.ckpt`` are
    rewritten after every epoch (and once up front) and per-step losses go to
    ``gan_losses.csv``.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4 or len(patches) == 0:
        raise ValueError("train_gan needs at least one high-resolution patch")
    gen_config = gen_config or GeneratorConfig()
    disc_config = disc_config or PatchCNNConfig(input_size=gen_config.output_size)
    if disc_config.input_size != gen_config.output_size:
        raise T.ShapeError("discriminator input size must equal the generator output size")
    weights = weights or GanLossWeights()
    sched = schedule or GanSchedule()
    gen = Generator(gen_config, seed=seed)
    disc = PatchCNN(disc_config, seed=seed + 1)
    opt_g, opt_d = AdamState(lr=sched.lr_g), AdamState(lr=sched.lr_d)
    lows = downsample2x(patches)
    rng = np.random.default_rng(seed)
    history: list[GanStepLosses] = []

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        gen.save(out / "generator.ckpt")
        disc.save(out / "discriminator.ckpt")
        fh = open(out / "gan_losses.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
    try:
        for epoch in range(sched.epochs):
            opt_g.lr, opt_d.lr = sched.rates(epoch)
            order = rng.permutation(len(patches))
            for start in range(0, len(order), sched.batch_size):
                idx = order[start : start + sched.batch_size]
                step = gan_train_step(gen, disc, patches[idx], weights, opt_g, opt_d, lows[idx])
                history.append(step)
                if writer is not None:
                    writer.writerow([len(history), *(f"{v:.10g}" for v in step)])
            log.info("gan epoch %d pixel %.5f", epoch, history[-1].pixel)
            if out is not None:
                gen.save(out / "generator.ckpt")
                disc.save(out / "discriminator.ckpt")
    finally:
        if writer is not None:
            fh.close()
    return gen, disc, history


def pixel_mse(gen: Generator, hr: np.ndarray, lr: np.ndarray | None = None) -> tuple[float, float]:
    """(generator mse, bicubic-upsample mse) against the given high-resolution patches."""
    lr = downsample2x(hr) if lr is None else lr
    n, h, w, _ = hr.shape
    g = generate(gen, lr)
    b = np.stack([bicubic_resize(p, h, w) for p in lr])
    return float(np.mean((g - hr) ** 2)), float(np.mean((b - hr) ** 2))
