import math
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from backend.synthct.conformal import EvalPolicy, IntervalField
from backend.synthct.core import BinaryMask, ImageGrid, NormalizationSpec, Units, normalize
from backend.synthct.errors import EmptyMask, EmptySoftMask, InvalidConfig
from backend.synthct.metrics import (
    ADJ,
    AGGREGATE_ID,
    BASE,
    REPORT_COLUMNS,
    CoverageCounts,
    MetricsReport,
    StratificationBins,
    dice,
    evaluate_slice,
    marginal_coverage,
    masked_mae,
    mean_interval_size,
    soft_mae,
    soft_mask,
    stratified_coverage,
    stratified_coverage_error,
    uncertainty_map,
)
from backend.synthct.phantom import PhantomSpec, generate_phantom

SPEC = NormalizationSpec()


def grid(values, units=Units.NORMALIZED):
    return ImageGrid(np.asarray(values, dtype=np.float64), units)


def mask(bits):
    return BinaryMask(np.asarray(bits, dtype=bool))


class TestPointMetrics(unittest.TestCase):

    def test_mae_examples(self):
        """Zero for identical images; normalized diffs {0.01, 0.03} are 30 HU."""
        ct = grid([[0.1, 0.2]])
        self.assertEqual(masked_mae(ct, ct, mask([[1, 1]]), SPEC), 0.0)
        sct = grid([[0.11, 0.23]])
        self.assertAlmostEqual(masked_mae(sct, ct, mask([[1, 1]]), SPEC), 30.0, places=3)
        with self.assertRaises(EmptyMask):
            masked_mae(sct, ct, mask([[0, 0]]), SPEC)

    def test_soft_mask_examples(self):
        """Without bone the soft mask is the body intersection; an empty predicted body empties it."""
        body = mask([[1, 1, 0]])
        body_hat = mask([[0, 1, 1]])
        none = mask([[0, 0, 0]])
        np.testing.assert_array_equal(soft_mask(body, body_hat, none, none).bits, [[False, True, False]])
        self.assertTrue(soft_mask(body, none, none, none).is_empty())

    def test_soft_mae_examples(self):
        """All-soft 2x2 with diffs {0.1, 0.1, 0.3, 0.3} averages 0.2 normalized."""
        ct = grid(np.zeros((2, 2)))
        sct = grid([[0.1, 0.1], [0.3, 0.3]])
        full, none = mask(np.ones((2, 2))), mask(np.zeros((2, 2)))
        self.assertAlmostEqual(soft_mae(sct, ct, full, full, none, none, SPEC), 0.2 * SPEC.half_range, places=2)
        with self.assertRaises(EmptySoftMask):
            soft_mae(sct, ct, full, full, full, none, SPEC)

    def test_dice_examples(self):
        """Identical, disjoint, partial overlap and both-empty cases."""
        p = mask([[1, 1, 1, 0]])
        self.assertEqual(dice(p, p), 1.0)
        self.assertEqual(dice(p, mask([[0, 0, 0, 1]])), 0.0)
        self.assertAlmostEqual(dice(p, mask([[0, 1, 1, 1]])), 4 / 6)
        empty = mask([[0, 0, 0, 0]])
        self.assertEqual(dice(empty, empty), 1.0)
        self.assertIsNone(dice(empty, empty, both_empty=None))


class TestCoverage(unittest.TestCase):

    def setUp(self):
        self.full = mask(np.ones((2, 2)))

    def test_marginal_examples(self):
        """Full range covers everything; [-0.5, 0.5] covers half of {0, 0.4, 0.6, -0.7}."""
        ct = grid([[0.0, 0.4], [0.6, -0.7]])
        self.assertEqual(marginal_coverage(IntervalField.full_range(ct), ct, self.full), 1.0)
        intervals = IntervalField(grid(np.full((2, 2), -0.5)), grid(np.full((2, 2), 0.5)))
        self.assertEqual(marginal_coverage(intervals, ct, self.full), 0.5)
        self.assertEqual(marginal_coverage(IntervalField(ct, ct), ct, self.full), 1.0)

    def test_stratified_examples(self):
        """Coverages {0.8, 1.0} at alpha 0.1 average a 0.1 deviation; empty groups are skipped."""
        ct = grid(np.array([[-0.5] * 5 + [0.5] * 5]))
        lower = np.full((1, 10), -1.0)
        lower[0, 0] = 0.0
        intervals = IntervalField(grid(lower), grid(np.ones((1, 10))))
        bins = StratificationBins((0.0, 0.8), Units.NORMALIZED)
        result = stratified_coverage(intervals, ct, mask(np.ones((1, 10))), bins, alpha=0.1)
        self.assertAlmostEqual(result.error, 0.1)
        self.assertEqual(result.counts, [5, 5, 0])
        self.assertAlmostEqual(result.coverage[0], 0.8)
        self.assertIsNone(result.coverage[2])

    def test_stratified_at_target(self):
        """Every group exactly at 1 - alpha gives zero error."""
        ct = grid(np.array([[-0.5] * 10 + [0.5] * 10]))
        lower = np.full((1, 20), -1.0)
        lower[0, 0], lower[0, 10] = 0.0, 0.9
        intervals = IntervalField(grid(lower), grid(np.ones((1, 20))))
        bins = StratificationBins((0.0,), Units.NORMALIZED)
        self.assertAlmostEqual(stratified_coverage_error(intervals, ct, mask(np.ones((1, 20))), bins, 0.1), 0.0)

    def test_hu_bins_on_normalized_grid(self):
        """HU edges are converted through the normalization window."""
        ct = normalize(grid([[-500.0, 200.0, 800.0]], Units.HU), SPEC)
        groups = StratificationBins((-200.0, 150.0, 350.0)).assign(ct, SPEC)
        np.testing.assert_array_equal(groups, [[0, 2, 3]])

    def test_edge_values_go_up(self):
        """A value equal to an edge falls in the upper group."""
        groups = StratificationBins((0.0,), Units.NORMALIZED).assign(grid([[0.0, -0.1]]))
        np.testing.assert_array_equal(groups, [[1, 0]])

    def test_invalid_bins(self):
        """Edges must increase strictly."""
        with self.assertRaises(InvalidConfig):
            StratificationBins((1.0, 1.0))
        with self.assertRaises(InvalidConfig):
            StratificationBins.parse("a,b")
        self.assertEqual(StratificationBins.parse("-200, 150").edges, (-200.0, 150.0))

    def test_empty_tallies(self):
        """Tallies with no pixels report nothing and an empty mask is rejected."""
        counts = CoverageCounts(np.zeros(2, dtype=np.int64), np.zeros(2, dtype=np.int64))
        self.assertIsNone(counts.stratified(0.1))
        with self.assertRaises(EmptyMask):
            stratified_coverage(IntervalField.full_range(grid([[0.0]])), grid([[0.0]]), mask([[0]]),
                                StratificationBins((0.0,), Units.NORMALIZED), 0.1)

    def test_interval_size_and_map(self):
        """Sizes average over the mask; the map is log(size + 1)."""
        zero = grid(np.zeros((2, 2)))
        self.assertEqual(mean_interval_size(IntervalField(zero, zero), self.full), 0.0)
        width = IntervalField(grid(np.full((2, 2), -0.25)), grid(np.full((2, 2), 0.25)))
        self.assertAlmostEqual(mean_interval_size(width, self.full), 0.5)
        self.assertAlmostEqual(mean_interval_size(width, self.full, Units.HU, SPEC), 750.0)
        lo = grid(np.full((1, 2), -0.9))
        hi = grid([[-0.9, -0.9 + (math.e - 1)]])
        values = uncertainty_map(IntervalField(lo, hi)).values
        self.assertEqual(float(values[0, 0]), 0.0)
        self.assertAlmostEqual(float(values[0, 1]), 1.0, places=6)


class TestOracleEquivalence(unittest.TestCase):
    """Each metric against a plain double loop on random small inputs."""

    def setUp(self):
        self.rng = np.random.default_rng(2024)
        self.bins = StratificationBins((-0.3, 0.1, 0.4), Units.NORMALIZED)

    def _case(self):
        h, w = (int(v) for v in self.rng.integers(1, 17, size=2))
        ct = self.rng.uniform(-1, 1, (h, w))
        sct = np.clip(ct + self.rng.normal(0, 0.2, (h, w)), -1, 1)
        lo = np.clip(sct - self.rng.uniform(0, 0.3, (h, w)), -1, 1)
        hi = np.clip(sct + self.rng.uniform(0, 0.3, (h, w)), -1, 1)
        masks = [self.rng.uniform(size=(h, w)) < p for p in (0.8, 0.7, 0.3, 0.2)]
        return grid(ct), grid(sct), IntervalField(grid(lo), grid(hi)), masks

    def test_against_double_loops(self):
        """Counts match exactly and means within 1e-6 relative."""
        for case in range(1000):
            ct, sct, intervals, (m_body, mhat_body, m_bone, mhat_bone) = self._case()
            h, w = ct.shape
            y, yhat = ct.values.astype(np.float64), sct.values.astype(np.float64)
            lo, hi = intervals.lower.values, intervals.upper.values

            soft, abs_sum, n, soft_sum, inter = [], 0.0, 0, 0.0, 0
            covered, totals = [0] * 4, [0] * 4
            for i in range(h):
                for j in range(w):
                    is_soft = m_body[i, j] and mhat_body[i, j] and not (m_bone[i, j] or mhat_bone[i, j])
                    soft.append(bool(is_soft))
                    if m_body[i, j]:
                        abs_sum += abs(yhat[i, j] - y[i, j])
                        n += 1
                        g = sum(1 for e in self.bins.edges if y[i, j] >= e)
                        totals[g] += 1
                        covered[g] += int(lo[i, j] <= ct.values[i, j] <= hi[i, j])
                    if is_soft:
                        soft_sum += abs(yhat[i, j] - y[i, j])
                    inter += int(m_body[i, j] and mhat_body[i, j])

            with self.subTest(case=case):
                got_soft = soft_mask(mask(m_body), mask(mhat_body), mask(m_bone), mask(mhat_bone))
                self.assertEqual(got_soft.bits.ravel().tolist(), soft)
                denom = int(m_body.sum() + mhat_body.sum())
                expected_dice = 1.0 if denom == 0 else 2.0 * inter / denom
                self.assertEqual(dice(mask(m_body), mask(mhat_body)), expected_dice)
                if n:
                    body = mask(m_body)
                    self.assertTrue(math.isclose(masked_mae(sct, ct, body, SPEC) / SPEC.half_range,
                                                 abs_sum / n, rel_tol=1e-6))
                    self.assertEqual(marginal_coverage(intervals, ct, body), sum(covered) / n)
                    rates = [c / t for c, t in zip(covered, totals) if t]
                    expected_err = sum(abs(0.9 - r) for r in rates) / len(rates)
                    got = stratified_coverage_error(intervals, ct, body, self.bins, 0.1)
                    self.assertTrue(math.isclose(got, expected_err, rel_tol=1e-6, abs_tol=1e-12))
                if any(soft):
                    got = soft_mae(sct, ct, mask(m_body), mask(mhat_body), mask(m_bone), mask(mhat_bone), SPEC)
                    self.assertTrue(math.isclose(got / SPEC.half_range, soft_sum / sum(soft), rel_tol=1e-6))


class TestReport(unittest.TestCase):

    def setUp(self):
        spec = PhantomSpec(height=64, width=64)
        self.cts = [normalize(generate_phantom(spec, seed).ct, SPEC) for seed in (1, 2)]

    def test_perfect_translation(self):
        """A perfect sCT with full-range intervals has zero error and full coverage."""
        ct = self.cts[0]
        row = evaluate_slice("P000", 0, ct, ct, {BASE: IntervalField.full_range(ct)}, spec=SPEC)
        self.assertEqual(row.mae, 0.0)
        self.assertEqual(row.soft_mae, 0.0)
        self.assertEqual(row.dice_body, 1.0)
        self.assertEqual(row.coverage[BASE].marginal(), 1.0)
        self.assertAlmostEqual(row.coverage[BASE].mean_size(), 2.0)

    def test_full_policy_covers_every_pixel(self):
        """The full policy evaluates coverage on the whole image."""
        ct = self.cts[0]
        row = evaluate_slice("P000", 0, ct, ct, {BASE: IntervalField(ct, ct)}, spec=SPEC,
                             eval_policy=EvalPolicy.FULL)
        self.assertEqual(row.n_pixels, ct.values.size)

    def test_report_layout_and_pooling(self):
        """Columns follow the documented order and the pooled aggregate row comes last."""
        report = MetricsReport(alpha=0.1)
        for i, ct in enumerate(self.cts):
            sct = grid(np.clip(ct.values + 0.01, -1, 1))
            narrow = IntervalField(sct, sct)
            report.add(evaluate_slice(f"P{i:03d}", 0, sct, ct, {BASE: narrow, ADJ: IntervalField.full_range(ct)},
                                      spec=SPEC))
        frame = report.to_frame()
        self.assertEqual(list(frame.columns[:len(REPORT_COLUMNS)]), REPORT_COLUMNS)
        self.assertEqual(list(frame.columns[len(REPORT_COLUMNS):]),
                         [f"Cov-{label}-g{g}" for label in (BASE, ADJ) for g in range(4)] + ["NPixels"])
        self.assertEqual(frame["patient_id"].tolist(), ["P000", "P001", AGGREGATE_ID])
        self.assertTrue(pd.isna(frame["slice_index"].iloc[-1]))
        total = report.aggregate()
        self.assertEqual(frame["NPixels"].iloc[-1], sum(r.n_pixels for r in report.rows))
        self.assertAlmostEqual(frame["MAE"].iloc[-1], total.mae_sum / total.mae_n)
        self.assertEqual(frame["M-Cov-Adj"].iloc[-1], 1.0)
        self.assertLess(frame["M-Cov-Base"].iloc[-1], 0.1)
        self.assertAlmostEqual(frame["MAE"].iloc[0], 15.0, places=2)

    def test_rows_sort_by_key(self):
        """Insertion order does not change the report."""
        rows = [evaluate_slice(f"P{i:03d}", 0, ct, ct, {BASE: IntervalField(ct, ct)}, spec=SPEC)
                for i, ct in enumerate(self.cts)]
        forward, backward = MetricsReport(alpha=0.1), MetricsReport(alpha=0.1)
        for row in rows:
            forward.add(row)
        for row in reversed(rows):
            backward.add(row)
        pd.testing.assert_frame_equal(forward.to_frame(), backward.to_frame())

    def test_write_csv_is_reproducible(self):
        """Writing the same report twice gives identical files."""
        report = MetricsReport(alpha=0.1)
        report.add(evaluate_slice("P000", 0, self.cts[0], self.cts[0], spec=SPEC))
        with tempfile.TemporaryDirectory() as tmp:
            a, b = os.path.join(tmp, "a.csv"), os.path.join(tmp, "b.csv")
            report.write_csv(a)
            report.write_csv(b)
            with open(a, "rb") as fa, open(b, "rb") as fb:
                self.assertEqual(fa.read(), fb.read())
            self.assertEqual(pd.read_csv(a)["patient_id"].tolist(), ["P000", AGGREGATE_ID])


if __name__ == '__main__':
    unittest.main()
