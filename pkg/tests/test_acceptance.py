"""Acceptance suite: one PASS/FAIL line per criterion.

The two seeded desk experiments (super-resolution sanity and the generator vs
bicubic ablation) share one full pipeline run per seed, so the whole file
takes roughly 25 minutes on a single core.
"""

from __future__ import annotations

import filecmp
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from dynssd import cli
from dynssd import config as C
from dynssd import kernels
from dynssd import tensor as T
from dynssd.evaluation import ConfusionCounts, score_results, sensitivity, specificity, stratified_report
from dynssd.imaging import BoundingBox, scale_and_pad
from dynssd.pipeline import Detection, FrameResult
from dynssd.proposer import Proposer, build_priors, center_to_corner, corner_to_center, decode, encode, match_priors
from dynssd.routing import DIRECT, GENERATOR, PipelineConfig, route
from dynssd.srgan import Generator, PatchCNN, pixel_mse, polyp_patches
from dynssd.synth import DatasetManifest, ManifestItem, annotate, load_frames, relative_size, stratify
from gradcases import cases, gradcheck
from oracles import bicubic_direct, conv2d_direct, match_bruteforce, nms_quadratic

DESK_SEEDS = (0, 1, 2)


def verdict(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


# --- metric arithmetic ------------------------------------------------------------


def test_metric_regression(capsys):
    start = time.perf_counter()
    # (tp, fn) for sensitivities, (tn, fp) for specificities
    sens = {(344, 74): 0.823, (391, 27): 0.935, (380, 38): 0.909, (341, 77): 0.816}
    spec = {(385, 44): 0.897, (354, 60): 0.855, (333, 79): 0.808, (331, 80): 0.805}
    bad = [k for k, v in sens.items() if round(sensitivity(ConfusionCounts(tp=k[0], fn=k[1])), 3) != v]
    bad += [k for k, v in spec.items() if round(specificity(ConfusionCounts(tn=k[0], fp=k[1])), 3) != v]
    delta = round(sensitivity(ConfusionCounts(tp=391, fn=27)) - sensitivity(ConfusionCounts(tp=344, fn=74)), 3)
    elapsed = time.perf_counter() - start
    ok = not bad and delta == 0.112 and elapsed < 1.0
    verdict(capsys, "metric regression", ok, f"8 rates, delta {delta:+.3f}, mismatches {bad}, {elapsed * 1e3:.1f} ms")


# --- numerical substrate ------------------------------------------------------------


def test_gradient_suite(capsys):
    start = time.perf_counter()
    worst = {}
    for name, factory in cases().items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(gradcheck(*factory(rng), rng) for _ in range(20))
    elapsed = time.perf_counter() - start
    failing = {k: v for k, v in worst.items() if not v < 1e-4}
    top = max(worst, key=worst.get)
    ok = not failing and elapsed < 120
    verdict(
        capsys,
        "gradient suite",
        ok,
        f"{len(worst)} ops x 20 trials, worst {top} {worst[top]:.2e}, failing {sorted(failing)}, {elapsed:.1f} s",
    )


def _random_boxes(rng, n, scale):
    xy = rng.uniform(0, 0.8, (n, 2))
    wh = rng.uniform(0.02, 0.5, (n, 2))
    return np.concatenate([xy, np.minimum(xy + wh, 1.0)], axis=1) * scale


def test_oracle_equivalence(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    conv_err = 0.0
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)]:
        x = rng.standard_normal((2, 3, 9, 8))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), stride=stride, padding=pad).data
        conv_err = max(conv_err, float(np.max(np.abs(got - conv2d_direct(x, k, b, stride, pad)))))

    nms_bad = 0
    for _ in range(100):
        n = int(rng.integers(1, 40))
        boxes = _random_boxes(rng, n, 100)
        scores = np.round(rng.random(n), 1)
        thr = float(rng.uniform(0.1, 0.9))
        nms_bad += kernels.nms(boxes, scores, thr).tolist() != nms_quadratic(boxes, scores, thr)

    match_bad = 0
    for _ in range(100):
        priors = np.column_stack([rng.uniform(0.1, 0.9, (24, 2)), rng.uniform(0.05, 0.4, (24, 2))])
        gts = _random_boxes(rng, int(rng.integers(0, 5)), 1.0)
        thr = float(rng.uniform(0.3, 0.7))
        got = match_priors(priors, gts, thr).gt_index.tolist()
        match_bad += got != match_bruteforce(center_to_corner(priors), gts, thr)

    priors = build_priors([8, 4])
    boxes = _random_boxes(rng, len(priors), 1.0)
    code_err = float(np.max(np.abs(decode(encode(boxes, priors), priors) - boxes)))
    code_err = max(code_err, float(np.max(np.abs(center_to_corner(corner_to_center(boxes)) - boxes))))

    bic_err = 0.0
    for ih, iw, oh, ow in [(5, 7, 11, 3), (16, 16, 32, 32), (32, 24, 13, 40), (9, 9, 9, 9)]:
        img = rng.random((ih, iw, 3))
        bic_err = max(bic_err, float(np.max(np.abs(kernels.resize_bicubic(img, oh, ow) - bicubic_direct(img, oh, ow)))))

    elapsed = time.perf_counter() - start
    ok = conv_err <= 1e-9 and nms_bad == 0 and match_bad == 0 and code_err <= 1e-9 and bic_err <= 1e-9
    ok = ok and elapsed < 120
    verdict(
        capsys,
        "oracle equivalence",
        ok,
        f"conv {conv_err:.1e}, nms mismatches {nms_bad}/100, matching mismatches {match_bad}/100, "
        f"encode/decode {code_err:.1e}, bicubic {bic_err:.1e} ({kernels.BACKEND} backend), {elapsed:.1f} s",
    )


# --- routing and scaling ------------------------------------------------------------


def test_routing_law(capsys):
    start = time.perf_counter()
    cfg = PipelineConfig(routing_threshold=200, generator_input=64, classifier_input=128)
    wrong = 0
    for w in range(1, 401):
        for h in range(1, 401):
            want = GENERATOR if w <= 199 and h <= 199 else DIRECT
            wrong += route(BoundingBox(0, 0, w, h), cfg) != want
    boundary = route(BoundingBox(0, 0, 200, 1), cfg) == DIRECT and route(BoundingBox(0, 0, 1, 200), cfg) == DIRECT
    elapsed = time.perf_counter() - start
    ok = wrong == 0 and boundary and elapsed < 5
    verdict(capsys, "routing law", ok, f"160000 sizes, {wrong} misrouted, 200 routes direct: {boundary}, {elapsed:.2f} s")


def test_scaling_protocol(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(75)
    img = rng.random((128, 160, 3))
    worst, shape_ok = 0.0, True
    for _ in range(200):
        x0, y0 = rng.uniform(0, 120), rng.uniform(0, 90)
        box = BoundingBox(x0, y0, x0 + rng.uniform(4, 160 - x0), y0 + rng.uniform(4, 128 - y0))
        out, (moved,) = scale_and_pad(img, [box], 0.75)
        shape_ok &= out.shape == img.shape
        ratio = relative_size(moved, *out.shape[:2]) / relative_size(box, *img.shape[:2])
        worst = max(worst, abs(ratio - 0.75))
    elapsed = time.perf_counter() - start
    ok = shape_ok and worst <= 0.01 and elapsed < 5
    verdict(capsys, "scaling protocol", ok, f"200 boxes, dims kept {shape_ok}, max |ratio - 0.75| {worst:.2e}, {elapsed:.2f} s")


def test_stratification_conservation(capsys):
    rng = np.random.default_rng(50)
    broken = 0
    for trial in range(50):
        items, results = [], []
        for i in range(int(rng.integers(5, 30))):
            boxes = []
            for _ in range(int(rng.integers(0, 4))):
                x0, y0 = rng.uniform(0, 80, 2)
                boxes.append(BoundingBox(x0, y0, x0 + rng.uniform(2, 20), y0 + rng.uniform(2, 20)))
            items.append(ManifestItem(f"{i}.ppm", annotate(str(i), boxes, 100, 100)))
            dets = []
            for b in boxes:
                if rng.random() < 0.6:
                    dets.append(Detection(b, 0.9, 0.9, GENERATOR))
            if rng.random() < 0.3:
                dets.append(Detection(BoundingBox(0, 0, 5, 5), 0.5, 0.7, DIRECT))
            results.append(FrameResult(str(i), tuple(dets)))
        if not any(it.annotation.is_positive for it in items):
            items.append(ManifestItem("p.ppm", annotate("p", [BoundingBox(10, 10, 30, 30)], 100, 100)))
            results.append(FrameResult("p"))
        manifest = DatasetManifest("test", trial, 1.0, (100, 100), items)
        k = int(rng.integers(1, 4))
        rep = stratified_report(results, manifest, stratify(manifest.annotations(), k))
        overall = score_results(results, manifest)
        banded = sum(tp + fn for tp, fn in rep.band_counts)
        broken += banded != overall.tp + overall.fn or sum(tp for tp, _ in rep.band_counts) != overall.tp
    verdict(capsys, "stratification conservation", broken == 0, f"50 random result sets, {broken} violations")


# --- determinism ----------------------------------------------------------------------

TINY = """
seed = 11
[dataset]
image_size = 64
train_positive = 16
train_negative = 8
test_positive = 8
test_negative = 8
bands = 2
[proposer]
channels = [4, 8, 8, 8]
epochs = 2
[gan]
base_channels = 2
residual_blocks = 1
disc_channels = [4, 4]
patches = 16
epochs = 1
[classifier]
epochs = 2
[pipeline]
routing_threshold = 24
generator_input = 16
classifier_input = 32
"""


def test_determinism(tmp_path, monkeypatch, capsys):
    cfg_path = tmp_path / "tiny.toml"
    cfg_path.write_text(TINY)
    roots = []
    for k in range(2):
        root = tmp_path / f"work{k}"
        monkeypatch.setenv(cli.WORKDIR_ENV, str(root))
        assert cli.main(["all", "-c", str(cfg_path)]) == 0
        roots.append(root)
    files = sorted(p.relative_to(roots[0]) for p in roots[0].rglob("*") if p.is_file() and p.name != ".lock")
    differing = [str(f) for f in files if not filecmp.cmp(roots[0] / f, roots[1] / f, shallow=False)]
    reports = [f for f in files if f.suffix in (".txt", ".csv")]

    cfg = C.loads(TINY)
    ctx = cli.Context(cfg, cli.Workdir(roots[0]), False)
    trips = []
    for model, path in [
        (Proposer(ctx.proposer_config()), roots[0] / "proposer" / "proposer.ckpt"),
        (Generator(ctx.generator_config()), roots[0] / "gan" / "generator.ckpt"),
        (PatchCNN(ctx.patch_config()), roots[0] / "classifier" / "classifier.ckpt"),
    ]:
        model.load(path)
        again = tmp_path / f"rt-{path.name}"
        model.save(again)
        trips.append(again.read_bytes() == path.read_bytes())
    ok = not differing and len(reports) >= 10 and all(trips)
    verdict(
        capsys,
        "determinism",
        ok,
        f"{len(files)} files ({len(reports)} reports) compared, differing {differing}, checkpoint round trips {trips}",
    )


# --- desk experiments -------------------------------------------------------------------


def _desk_run(root: Path, seed: int) -> dict:
    cfg = C.ExperimentConfig(seed=seed, paths=C.PathsSection(workdir=str(root / "work")))
    path = root / "desk.toml"
    path.write_text(C.dumps(cfg))
    timings = {}
    for stage in ("gen-data", "train-proposer", "train-gan", "train-classifier", "ablate"):
        start = time.process_time()
        code = cli.main([stage, "-c", str(path)])
        timings[stage] = time.process_time() - start
        if code != 0:
            raise RuntimeError(f"seed {seed}: stage {stage} exited {code}")
    return {"cfg": cfg, "ctx": cli.Context(cfg, cli.Workdir(root / "work"), False), "cpu": timings}


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    return {s: _desk_run(tmp_path_factory.mktemp(f"desk{s}"), s) for s in DESK_SEEDS}


@pytest.mark.slow
def test_sr_sanity(desk_runs, capsys):
    lines, wins, in_budget = [], 0, True
    for seed, run in desk_runs.items():
        ctx = run["ctx"]
        gen = ctx.lazy_generator().get()
        frames = [f for f in load_frames(ctx.manifest("test")) if f[1].is_positive]
        pl = run["cfg"].pipeline
        held_out = polyp_patches(frames, pl.classifier_input, 300, seed + 1000, min_side=pl.generator_input)
        g, b = pixel_mse(gen, held_out)
        wins += g < b
        in_budget &= run["cpu"]["train-gan"] <= 600
        lines.append(f"seed {seed}: gen {g:.3e} vs bicubic {b:.3e}, {run['cpu']['train-gan']:.0f} s")
    verdict(capsys, "SR sanity", wins >= 2 and in_budget, f"{wins}/3 seeds beat bicubic; " + "; ".join(lines))


def _smallest_band(report) -> float:
    return report.band_sensitivity(0)


@pytest.mark.slow
def test_end_to_end_ablation(desk_runs, capsys):
    lines, passing, in_budget, big_enough = [], 0, True, True
    for seed, run in desk_runs.items():
        ctx = run["ctx"]
        manifest = ctx.manifest("test75")
        n_pos = sum(it.annotation.is_positive for it in manifest.items)
        big_enough &= n_pos >= 200 and len(manifest.items) - n_pos >= 200
        gen_rep, bic_rep = cli.load_report(ctx, "test75", "generator"), cli.load_report(ctx, "test75", "bicubic")
        sg, sb = _smallest_band(gen_rep), _smallest_band(bic_rep)
        dspec = abs(gen_rep.specificity - bic_rep.specificity)
        passing += sg >= sb and dspec <= 0.05
        total = sum(run["cpu"].values())
        in_budget &= total < 1800
        lines.append(f"seed {seed}: small-band sens gen {sg:.3f} vs bic {sb:.3f}, |d spec| {dspec:.3f}, {total / 60:.1f} min")
    ok = passing >= 2 and in_budget and big_enough
    verdict(capsys, "end-to-end ablation", ok, f"{passing}/3 seeds hold; " + "; ".join(lines))
