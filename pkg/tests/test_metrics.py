import numpy as np
import pytest

from consistseg import metrics as M


class TestHardIou:
    def test_identical_masks(self):
        lab = np.array([[0, 1], [1, 2]])
        for cls in (0, 1, 2):
            assert M.hard_iou(lab, lab, cls) == 1.0

    def test_both_empty_scores_one(self):
        lab = np.zeros((4, 4), dtype=int)
        assert M.hard_iou(lab, lab, 3) == 1.0

    def test_one_empty_scores_zero(self):
        pred = np.zeros((4, 4), dtype=int)
        true = pred.copy()
        true[0, 0] = 1
        assert M.hard_iou(pred, true, 1) == 0.0

    def test_half_overlap(self):
        pred = np.zeros((4, 4), dtype=int)
        true = np.zeros((4, 4), dtype=int)
        pred[:, :2] = 1  # 8 px
        true[:, 1:3] = 1  # 8 px, overlap 4, union 12
        assert abs(M.hard_iou(pred, true, 1) - 4.0 / 12.0) < 1e-15

    def test_matches_set_counting_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pred = rng.integers(0, 3, (8, 8))
            true = rng.integers(0, 3, (8, 8))
            for cls in range(3):
                inter = sum(1 for i in range(8) for j in range(8)
                            if pred[i, j] == cls and true[i, j] == cls)
                union = sum(1 for i in range(8) for j in range(8)
                            if pred[i, j] == cls or true[i, j] == cls)
                expected = 1.0 if union == 0 else inter / union
                assert abs(M.hard_iou(pred, true, cls) - expected) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(M.MetricError):
            M.hard_iou(np.zeros((2, 2)), np.zeros((2, 3)), 0)


class TestMiou:
    def test_excludes_background(self):
        pred = np.zeros((4, 4), dtype=int)
        true = np.zeros((4, 4), dtype=int)
        true[0, 0] = 1  # class 1 missed entirely; class 2 empty in both
        assert M.miou(pred, true, 3) == 0.5

    def test_perfect_prediction(self):
        lab = np.arange(16).reshape(4, 4) % 3
        assert M.miou(lab, lab, 3) == 1.0


class TestContour:
    def test_filled_square(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[1:5, 1:5] = True
        c = M.contour(mask)
        assert c.sum() == 12  # 4x4 square boundary
        assert not c[2:4, 2:4].any()

    def test_touching_border_counts_edge(self):
        mask = np.ones((3, 3), dtype=bool)
        assert M.contour(mask).sum() == 8


def macd_brute_force(pred_mask, true_mask):
    """All-pairs contour distance oracle, O(n^2) in contour pixels."""
    cp = np.argwhere(M.contour(pred_mask))
    ct = np.argwhere(M.contour(true_mask))
    d = np.sqrt(((cp[:, None, :] - ct[None, :, :]) ** 2).sum(axis=2))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


class TestMacd:
    def test_identical_masks_zero(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:6, 2:6] = True
        assert M.macd(mask, mask) == 0.0

    def test_single_pixel_masks_give_euclidean_distance(self):
        a = np.zeros((8, 8), dtype=bool)
        b = np.zeros((8, 8), dtype=bool)
        a[1, 1] = True
        b[4, 5] = True
        assert abs(M.macd(a, b) - 5.0) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (16, 16)) > 0.6
        b = rng.uniform(0, 1, (16, 16)) > 0.6
        assert M.macd(a, b) == M.macd(b, a)

    def test_matches_all_pairs_oracle(self):
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 30:
            a = rng.uniform(0, 1, (24, 24)) > 0.55
            b = rng.uniform(0, 1, (24, 24)) > 0.55
            if not (a.any() and b.any()):
                continue
            assert abs(M.macd(a, b) - macd_brute_force(a, b)) < 1e-9
            checked += 1

    def test_pixel_size_scales_linearly(self):
        a = np.zeros((8, 8), dtype=bool)
        b = np.zeros((8, 8), dtype=bool)
        a[2:4, 2:4] = True
        b[4:6, 4:6] = True
        assert abs(M.macd(a, b, pixel_size=2.5) - 2.5 * M.macd(a, b)) < 1e-12

    def test_empty_mask_rejected(self):
        mask = np.zeros((4, 4), dtype=bool)
        full = ~mask
        with pytest.raises(M.MetricError, match="empty"):
            M.macd(mask, full)


class TestPostprocess:
    def test_keeps_largest_component(self):
        lab = np.zeros((8, 8), dtype=int)
        lab[1:5, 1:5] = 1  # 16 px
        lab[6, 6] = 1  # stray pixel
        out = M.postprocess(lab, 2)
        assert out[6, 6] == 0
        assert np.array_equal(out[1:5, 1:5], lab[1:5, 1:5])

    def test_fills_interior_hole(self):
        lab = np.zeros((8, 8), dtype=int)
        lab[1:7, 1:7] = 2
        lab[3, 3] = 0
        out = M.postprocess(lab, 3)
        assert out[3, 3] == 2

    def test_border_background_untouched(self):
        lab = np.zeros((8, 8), dtype=int)
        lab[3:5, 3:5] = 1
        out = M.postprocess(lab, 2)
        assert out[0, 0] == 0
        assert (out == 0).sum() == (lab == 0).sum()

    def test_tie_breaks_to_earliest_component(self):
        lab = np.zeros((5, 5), dtype=int)
        lab[0, 0] = 1
        lab[4, 4] = 1  # equal-size components; scan order keeps the first
        out = M.postprocess(lab, 2)
        assert out[0, 0] == 1 and out[4, 4] == 0

    def test_idempotent_on_random_predictions(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            lab = rng.integers(0, 4, (16, 16))
            once = M.postprocess(lab, 4)
            assert np.array_equal(M.postprocess(once, 4), once)

    def test_input_not_mutated(self):
        rng = np.random.default_rng(4)
        lab = rng.integers(0, 3, (12, 12))
        before = lab.copy()
        M.postprocess(lab, 3)
        assert np.array_equal(lab, before)


class TestEvaluatePrediction:
    def test_lengths_and_none_for_empty(self):
        pred = np.zeros((8, 8), dtype=int)
        true = np.zeros((8, 8), dtype=int)
        pred[2:5, 2:5] = 1
        true[2:5, 3:6] = 1
        ious, macds = M.evaluate_prediction(pred, true, 3)
        assert len(ious) == 2 and len(macds) == 2
        assert macds[0] is not None
        assert macds[1] is None  # class 2 empty in both masks
        assert ious[1] == 1.0


def fixture_rows():
    return [
        M.MetricsRow("baseline", 5, s, [0.5, 0.6], 0.55 + 0.01 * s, [1.0, None])
        for s in range(3)
    ] + [
        M.MetricsRow("semitc", 5, s, [0.7, 0.8], 0.75 + 0.01 * s, [0.5, 0.6])
        for s in range(3)
    ]


class TestAggregation:
    def test_results_table_hand_computed(self):
        cells, regimes, sizes = M.results_table(fixture_rows())
        assert regimes == ["baseline", "semitc"]
        assert sizes == [5]
        m, s, n = cells[("baseline", 5)]
        assert abs(m - 0.56) < 1e-12
        assert abs(s - np.std([0.55, 0.56, 0.57])) < 1e-12
        assert n == 3

    def test_empty_rows_rejected(self):
        with pytest.raises(M.MetricError):
            M.results_table([])

    def test_metrics_csv_schema(self, tmp_path):
        path = tmp_path / "metrics.csv"
        M.write_metrics_csv(path, fixture_rows()[:1])
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "regime,labeled_size,seed,class,iou,macd"
        assert len(lines) == 3  # one line per structure class
        assert lines[2].endswith(",")  # None macd serializes empty

    def test_aggregate_csv_and_warnings(self, tmp_path):
        rows = fixture_rows() + [M.MetricsRow("semitc", 10, 0, [0.7, 0.8], 0.75, [None, None])]
        warnings = M.write_aggregate_csv(tmp_path / "table.csv", rows)
        assert any("baseline" in w and "10" in w for w in warnings)
        lines = (tmp_path / "table.csv").read_text().strip().split("\n")
        assert lines[0] == "regime,labeled_5,labeled_10"
        assert lines[1].startswith("baseline,0.5600+/-")

    def test_plot_data_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        M.write_plot_data(p1, fixture_rows())
        M.write_plot_data(p2, fixture_rows())
        assert p1.read_bytes() == p2.read_bytes()
