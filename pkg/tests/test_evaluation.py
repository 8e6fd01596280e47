import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynssd.evaluation import (
    ABLATION_HEADER,
    UNDEFINED,
    AlignmentError,
    ConfusionCounts,
    UndefinedRateError,
    ablation_table,
    compare_counts,
    compare_runs,
    plot_csv,
    report_csv,
    report_text,
    score_results,
    sensitivity,
    specificity,
    stratified_report,
)
from dynssd.imaging import BoundingBox
from dynssd.pipeline import Detection, FrameResult
from dynssd.synth import DatasetManifest, ManifestItem, SizeBand, annotate, bands_from_edges


def manifest_of(frames, size=100):
    items = [ManifestItem(f"{i}.ppm", annotate(i, boxes, size, size)) for i, boxes in frames]
    return DatasetManifest("test", 0, 1.0, (size, size), items)


def det(*box):
    return Detection(BoundingBox(*box), 0.9, 0.9, "direct")


class TestRates:
    @pytest.mark.parametrize(
        "tp,fn,want", [(344, 74, 0.823), (391, 27, 0.935), (380, 38, 0.909), (341, 77, 0.816)]
    )
    def test_published_sensitivity(self, tp, fn, want):
        assert round(sensitivity(ConfusionCounts(tp=tp, fn=fn)), 3) == want

    @pytest.mark.parametrize(
        "tn,fp,want", [(385, 44, 0.897), (354, 60, 0.855), (333, 79, 0.808), (331, 80, 0.805)]
    )
    def test_published_specificity(self, tn, fp, want):
        assert round(specificity(ConfusionCounts(tn=tn, fp=fp)), 3) == want

    def test_published_deltas(self):
        base, ours = ConfusionCounts(344, 44, 385, 74), ConfusionCounts(391, 60, 354, 27)
        assert round(compare_counts(base, ours)[0], 3) == 0.112
        bic, gen = ConfusionCounts(341, 80, 331, 77), ConfusionCounts(380, 79, 333, 38)
        assert round(compare_counts(bic, gen)[0], 3) == 0.093

    def test_undefined(self):
        with pytest.raises(UndefinedRateError):
            sensitivity(ConfusionCounts(tn=3))
        with pytest.raises(UndefinedRateError):
            specificity(ConfusionCounts(tp=3))

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1)


class TestScoring:
    def test_all_negative(self):
        m = manifest_of([(f"n{i}", []) for i in range(5)])
        c = score_results([FrameResult(f"n{i}") for i in range(5)], m)
        assert c == ConfusionCounts(tn=5)

    def test_perfect(self):
        m = manifest_of([("a", [BoundingBox(1, 1, 20, 20)]), ("b", []), ("c", [BoundingBox(5, 5, 9, 9), BoundingBox(50, 50, 90, 80)])])
        res = [FrameResult(it.image_id, tuple(det(*b.as_tuple()) for b in it.annotation.boxes)) for it in m.items]
        c = score_results(res, m)
        assert c.fn == 0 and c.fp == 0 and c.tp == 3 and c.tn == 1

    def test_hand_enumerated(self):
        g = BoundingBox(10, 10, 30, 30)
        h = BoundingBox(60, 60, 90, 90)
        frames = [
            ("p0", [g]),  # hit
            ("p1", [g]),  # miss: nothing accepted
            ("p2", [g]),  # miss: detection too loose (iou 0.25)
            ("p3", [g, h]),  # one of two found + spurious extra
            ("p4", [g]),  # hit plus spurious extra -> tp + fp
            ("n0", []),  # clean
            ("n1", []),  # false alarm
            ("n2", []),  # two false alarms still one frame
            ("n3", []),
            ("n4", []),
        ]
        results = [
            FrameResult("p0", (det(11, 11, 30, 30),)),
            FrameResult("p1"),
            FrameResult("p2", (det(10, 10, 50, 50),)),
            FrameResult("p3", (det(60, 60, 88, 90), det(0, 50, 5, 55))),
            FrameResult("p4", (det(10, 10, 30, 30), det(70, 0, 90, 20))),
            FrameResult("n0"),
            FrameResult("n1", (det(1, 1, 5, 5),)),
            FrameResult("n2", (det(1, 1, 5, 5), det(40, 40, 50, 50))),
            FrameResult("n3"),
            FrameResult("n4"),
        ]
        # tp: p0, p3(h), p4 = 3; fn: p1, p2, p3(g) = 3
        # fp: p2 (loose box matches nothing), p3 extra, p4 extra, n1, n2 = 5; tn: n0, n3, n4 = 3
        assert score_results(results, manifest_of(frames)) == ConfusionCounts(tp=3, fp=5, tn=3, fn=3)

    def test_alignment_errors(self):
        m = manifest_of([("a", []), ("b", [])])
        with pytest.raises(AlignmentError, match="missing \\['b'\\]"):
            score_results([FrameResult("a")], m)
        with pytest.raises(AlignmentError, match="extra \\['z'\\]"):
            score_results([FrameResult("a"), FrameResult("b"), FrameResult("z")], m)

    def test_permutation_invariant(self):
        m, res = random_run(np.random.default_rng(0), 30)
        assert score_results(res[::-1], m) == score_results(res, m)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
    def test_raising_iou_never_adds_tp(self, seed, a, b):
        lo, hi = sorted((a, b))
        m, res = random_run(np.random.default_rng(seed), 20)
        assert score_results(res, m, hi).tp <= score_results(res, m, lo).tp


def random_box(rng, size=100):
    x0, y0 = rng.uniform(0, size - 10, 2)
    return BoundingBox(x0, y0, rng.uniform(x0 + 3, size), rng.uniform(y0 + 3, size))


def random_run(rng, n):
    frames, results = [], []
    for i in range(n):
        gts = [random_box(rng) for _ in range(int(rng.integers(0, 3)))]
        frames.append((f"f{i}", gts))
        dets = []
        for g in gts:
            if rng.random() < 0.6:
                d = rng.normal(scale=3, size=4)
                dets.append(det(g.x_min + d[0], g.y_min + d[1], g.x_max + abs(d[2]) + 1, g.y_max + abs(d[3]) + 1))
        if rng.random() < 0.3:
            dets.append(Detection(random_box(rng), 0.5, 0.6, "generator"))
        results.append(FrameResult(f"f{i}", tuple(dets)))
    return manifest_of(frames), results


class TestStratified:
    def test_single_band_equals_overall(self):
        m, res = random_run(np.random.default_rng(1), 40)
        rep = stratified_report(res, m, bands_from_edges([]))
        assert rep.band_sensitivity(0) == rep.sensitivity

    def test_empty_bands_undefined(self):
        m = manifest_of([("a", [BoundingBox(0, 0, 5, 5)]), ("b", [BoundingBox(0, 0, 4, 6)])])
        rep = stratified_report([FrameResult("a", (det(0, 0, 5, 5),)), FrameResult("b")], m, bands_from_edges([0.2, 0.5]))
        assert rep.band_counts == ((1, 1), (0, 0), (0, 0))
        assert rep.band_sensitivity(1) is None
        assert UNDEFINED in report_text(rep)
        rows = list(csv.DictReader(io.StringIO(report_csv(rep))))
        assert rows[1]["sensitivity"] == UNDEFINED and rows[0]["sensitivity"] == "0.500000"
        assert rows[-1]["band"] == "overall" and rows[-1]["tn"] == "0"

    def test_planted_bands(self):
        size = 100
        diag = np.hypot(size, size)
        # boxes with relative sizes 0.1, 0.1, 0.4, 0.4, 0.8
        def sq(r):
            s = r * diag / np.sqrt(2)
            return BoundingBox(0, 0, s, s)

        frames = [(f"f{i}", [sq(r)]) for i, r in enumerate([0.1, 0.1, 0.4, 0.4, 0.8])]
        hits = [True, False, True, True, False]
        res = [FrameResult(f"f{i}", (det(*b[0].as_tuple()),) if h else ()) for (_, b), h, i in zip(frames, hits, range(5))]
        rep = stratified_report(res, manifest_of(frames), bands_from_edges([0.2, 0.6]))
        assert rep.band_counts == ((1, 1), (2, 0), (0, 1))
        assert [rep.band_sensitivity(i) for i in range(3)] == [0.5, 1.0, 0.0]

    def test_band_coverage_error(self):
        m = manifest_of([("a", [BoundingBox(0, 0, 50, 50)])])
        with pytest.raises(ValueError, match="outside every band"):
            stratified_report([FrameResult("a")], m, [SizeBand(0.0, 0.1)])

    @pytest.mark.parametrize("seed", range(10))
    def test_conservation(self, seed):
        rng = np.random.default_rng(seed)
        m, res = random_run(rng, 50)
        edges = sorted(rng.uniform(0.05, 0.95, int(rng.integers(0, 4))))
        rep = stratified_report(res, m, bands_from_edges(edges))
        assert sum(t + f for t, f in rep.band_counts) == rep.overall.tp + rep.overall.fn
        assert sum(t for t, _ in rep.band_counts) == rep.overall.tp
        negatives = sum(not it.annotation.is_positive for it in m.items)
        positives_with_spurious = rep.overall.tn + rep.overall.fp - negatives
        assert positives_with_spurious >= 0


class TestComparison:
    def test_self_zero(self):
        m, res = random_run(np.random.default_rng(2), 40)
        rep = stratified_report(res, m, bands_from_edges([0.3]))
        for row in compare_runs(rep, rep):
            assert row.sensitivity_delta in (0.0, None)
        assert compare_runs(rep, rep)[-1].specificity_delta == 0.0

    def test_incompatible(self):
        m, res = random_run(np.random.default_rng(2), 40)
        a = stratified_report(res, m, bands_from_edges([0.3]))
        b = stratified_report(res, m, bands_from_edges([0.4]))
        with pytest.raises(ValueError):
            compare_runs(a, b)

    def test_ablation_table_header(self):
        text = ablation_table([("Generator", ConfusionCounts(380, 79, 333, 38)), ("Bicubic Interpolation", ConfusionCounts(341, 80, 331, 77))])
        header, rule, gen, bic = text.splitlines()
        assert header.split("  ")[0] == ABLATION_HEADER[0]
        for col in ABLATION_HEADER:
            assert col in header
        assert "0.909" in gen and "0.808" in gen and "0.816" in bic and "0.805" in bic

    def test_plot_csv(self):
        m, res = random_run(np.random.default_rng(3), 20)
        rep = stratified_report(res, m, bands_from_edges([0.3]))
        lines = plot_csv({"generator": rep, "bicubic": rep}).splitlines()
        assert lines[0] == "run,band,band_lower,band_upper,sensitivity"
        assert len(lines) == 5
