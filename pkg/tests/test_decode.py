import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorkit.decode import (
    DecodeConfig,
    Detection,
    bench_decode,
    decode_baseline,
    decode_improved,
    face_scores,
    nms,
    nms_rows,
    read_detections,
    synth_raw_output,
    write_detections,
)
from anchorkit.geometry import AnchorConfig, Box, generate_anchors
from anchorkit.network import RawOutput

from oracles import nms_oracle


def toy_grid():
    return generate_anchors(AnchorConfig.toy())


def raw_from_scores(grid, scores, offsets=None):
    scores = np.asarray(scores, dtype=np.float64)
    logits = np.zeros((len(grid), 2))
    logits[:, 1] = np.log(scores / (1 - scores))
    if offsets is None:
        offsets = np.zeros((len(grid), 4))
    return RawOutput(logits=logits.astype(np.float32), offsets=np.asarray(offsets, dtype=np.float32))


class TestDecodeConfig:
    def test_defaults(self):
        cfg = DecodeConfig()
        assert cfg.score_threshold == 0.1
        assert cfg.nms_threshold == 0.3
        assert cfg.report_threshold == 0.1

    def test_gate_above_report_rejected(self):
        with pytest.raises(ValueError):
            DecodeConfig(score_threshold=0.5, report_threshold=0.2)


class TestFaceScores:
    def test_sigmoid_identity(self):
        logits = np.array([[0.0, 0.0], [0.0, 10.0], [3.0, 1.0]])
        s = face_scores(logits)
        assert s[0] == pytest.approx(0.5)
        assert s[1] == pytest.approx(1 / (1 + math.exp(-10)))
        assert s[2] == pytest.approx(1 / (1 + math.exp(2)))

    def test_stable_for_huge_logits(self):
        s = face_scores(np.array([[1000.0, 999.0]]))
        assert np.isfinite(s).all()


class TestNMS:
    def test_single_detection(self):
        d = Detection(Box(0, 0, 10, 10), 0.7)
        assert nms([d], 0.3) == [d]

    def test_identical_boxes_keep_higher(self):
        a = Detection(Box(0, 0, 10, 10), 0.9)
        b = Detection(Box(0, 0, 10, 10), 0.8)
        assert nms([b, a], 0.3) == [a]

    def test_hand_built_vs_oracle(self):
        boxes = np.array(
            [
                [0, 0, 10, 10],
                [1, 1, 11, 11],
                [20, 20, 30, 30],
                [21, 19, 31, 29],
                [5, 5, 14, 14],
            ],
            dtype=float,
        )
        scores = np.array([0.9, 0.85, 0.6, 0.7, 0.5])
        kept = nms_rows(boxes, scores, 0.3)
        np.testing.assert_array_equal(kept, nms_oracle(boxes, scores, 0.3))

    def test_tie_keeps_lower_index(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
        scores = np.array([0.5, 0.5])
        np.testing.assert_array_equal(nms_rows(boxes, scores, 0.3), [0])

    def test_kept_set_is_antichain(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            x = rng.uniform(0, 50, size=(n, 2))
            wh = rng.uniform(1, 30, size=(n, 2))
            boxes = np.concatenate([x, x + wh], axis=1)
            scores = rng.uniform(0, 1, size=n)
            kept = nms_rows(boxes, scores, 0.3)
            from anchorkit.geometry import pairwise_iou

            m = pairwise_iou(boxes[kept], boxes[kept])
            np.fill_diagonal(m, 0.0)
            assert np.all(m <= 0.3)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_vs_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 9))
        x = rng.uniform(0, 40, size=(n, 2))
        wh = rng.uniform(1, 25, size=(n, 2))
        boxes = np.concatenate([x, x + wh], axis=1)
        scores = np.round(rng.uniform(0, 1, size=n), 2)  # induce ties
        thresh = float(rng.choice([0.2, 0.3, 0.5]))
        np.testing.assert_array_equal(
            nms_rows(boxes, scores, thresh), nms_oracle(boxes, scores, thresh)
        )


class TestDecodePaths:
    def test_zero_net_above_report_empty(self):
        grid = toy_grid()
        raw = raw_from_scores(grid, np.full(len(grid), 0.5))
        cfg = DecodeConfig(score_threshold=0.1, report_threshold=0.6)
        assert decode_baseline(raw, grid, cfg).detections == []
        assert decode_improved(raw, grid, cfg).detections == []

    def test_single_confident_anchor(self):
        grid = toy_grid()
        logits = np.zeros((len(grid), 2), dtype=np.float32)
        logits[7, 1] = 10.0
        raw = RawOutput(logits=logits, offsets=np.zeros((len(grid), 4), dtype=np.float32))
        cfg = DecodeConfig(report_threshold=0.9)
        result = decode_baseline(raw, grid, cfg)
        assert len(result.detections) == 1
        det = result.detections[0]
        assert det.score == pytest.approx(1 / (1 + math.exp(-10)))
        # anchor 7 clipped to the image
        x1, y1, x2, y2 = grid.boxes[7]
        assert det.box.as_tuple() == (max(x1, 0), max(y1, 0), min(x2, 64), min(y2, 64))

    def test_improved_counts_strictly_above_gate(self):
        grid = generate_anchors(AnchorConfig(layers=((4, 16),), image_w=8, image_h=8))
        assert len(grid) == 4
        raw = raw_from_scores(grid, [0.05, 0.2, 0.95, 0.1])
        result = decode_improved(raw, grid, DecodeConfig())
        assert result.decode_ops == 2  # 0.2 and 0.95; 0.1 is not > 0.1
        assert decode_baseline(raw, grid, DecodeConfig()).decode_ops == 4

    def test_gate_must_not_exceed_report(self):
        grid = toy_grid()
        raw = raw_from_scores(grid, np.full(len(grid), 0.5))
        with pytest.raises(ValueError):
            decode_improved(raw, grid, DecodeConfig(score_threshold=0.4, report_threshold=0.3))

    def test_equivalence_on_random_outputs(self):
        grid = toy_grid()
        rng = np.random.default_rng(77)
        for trial in range(50):
            logits = rng.normal(0, 3, size=(len(grid), 2)).astype(np.float32)
            offsets = rng.normal(0, 0.4, size=(len(grid), 4)).astype(np.float32)
            raw = RawOutput(logits=logits, offsets=offsets)
            cfg = DecodeConfig(
                score_threshold=0.1,
                report_threshold=float(rng.choice([0.1, 0.25, 0.5])),
                clip_to_image=bool(rng.integers(0, 2)),
            )
            a = decode_baseline(raw, grid, cfg)
            b = decode_improved(raw, grid, cfg)
            assert a.detections == b.detections
            assert b.decode_ops == int(
                np.sum(face_scores(logits.astype(np.float64)) > cfg.score_threshold)
            )

    def test_equivalence_with_score_ties(self):
        grid = toy_grid()
        logits = np.zeros((len(grid), 2), dtype=np.float32)
        logits[10:20, 1] = 2.0  # ten identical scores
        offsets = np.zeros((len(grid), 4), dtype=np.float32)
        raw = RawOutput(logits=logits, offsets=offsets)
        a = decode_baseline(raw, grid)
        b = decode_improved(raw, grid)
        assert a.detections == b.detections

    def test_raising_gate_never_changes_output(self):
        grid = toy_grid()
        rng = np.random.default_rng(5)
        logits = rng.normal(0, 3, size=(len(grid), 2)).astype(np.float32)
        raw = RawOutput(logits=logits, offsets=np.zeros((len(grid), 4), dtype=np.float32))
        base = decode_improved(raw, grid, DecodeConfig(score_threshold=0.05, report_threshold=0.5))
        for gate in (0.1, 0.3, 0.5):
            again = decode_improved(
                raw, grid, DecodeConfig(score_threshold=gate, report_threshold=0.5)
            )
            assert again.detections == base.detections

    def test_max_detections_truncates(self):
        grid = toy_grid()
        raw = raw_from_scores(grid, np.full(len(grid), 0.9))
        cfg = DecodeConfig(max_detections=3)
        assert len(decode_baseline(raw, grid, cfg).detections) == 3


class TestBench:
    def test_hot_fraction_zero(self):
        report = bench_decode(1000, 0.0, repeats=10, seed=1)
        assert report.improved_ops == 0
        assert report.baseline_ops == 1000
        assert report.outputs_equal

    def test_hot_fraction_one(self):
        report = bench_decode(500, 1.0, repeats=10, seed=1)
        assert report.improved_ops == report.baseline_ops == 500
        assert report.outputs_equal

    def test_fixture_hot_count_exact(self):
        grid = generate_anchors(AnchorConfig())
        raw = synth_raw_output(grid, 171 / 34125, seed=3)
        scores = face_scores(raw.logits.astype(np.float64))
        assert int(np.sum(scores > 0.1)) == 171
        result = decode_improved(raw, grid)
        assert result.decode_ops == 171

    def test_csv_format(self):
        report = bench_decode(200, 0.05, repeats=10, seed=2)
        buf = io.StringIO()
        report.to_csv(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0].startswith("#")
        assert lines[1] == "path,anchors,hot_fraction,mean_ns,stddev_ns,decode_ops"
        assert lines[2].startswith("baseline,200,0.05,")
        assert lines[3].startswith("improved,200,0.05,")

    def test_repeats_floor(self):
        with pytest.raises(ValueError, match="repeats"):
            bench_decode(100, 0.1, repeats=5)


class TestDetectionIO:
    def test_round_trip(self):
        dets = {
            "a.pgm": [Detection(Box(1, 2, 11, 22), 0.875), Detection(Box(0.5, 0.5, 3.25, 9.5), 0.125)],
            "b.pgm": [],
        }
        buf = io.StringIO()
        write_detections(buf, dets)
        text = buf.getvalue()
        again = read_detections(text)
        assert set(again) == {"a.pgm", "b.pgm"}
        assert again["b.pgm"] == []
        first = again["a.pgm"][0]
        assert first.score == pytest.approx(0.875)
        assert first.box.as_tuple() == pytest.approx((1, 2, 11, 22))

    def test_six_significant_digits(self):
        dets = {"x": [Detection(Box(1 / 3, 2 / 3, 10 / 3, 20 / 3), 0.123456789)]}
        buf = io.StringIO()
        write_detections(buf, dets)
        assert "0.123457" in buf.getvalue()
        assert "0.333333 0.666667 3 6" in buf.getvalue()

    def test_truncated_rejected(self):
        with pytest.raises(ValueError, match="truncated"):
            read_detections("img.pgm\n2\n1 1 5 5 0.9\n")
