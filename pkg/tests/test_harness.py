import os
import shutil
import tempfile
import unittest

import numpy as np

from backend.synthct.config import RunConfig, from_dict
from backend.synthct.core import derive_seed
from backend.synthct.errors import InvalidConfig
from backend.synthct.harness import EXPERIMENTS, coverage_study, generate_cohort, noise_curve, patient_id, run_experiment
from backend.synthct.metrics import MetricsReport, evaluate_slice
from backend.synthct.translator import TranslationMode, Translator


class TestHarness(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.cfg = from_dict({"phantom": {"height": 64, "width": 64}, "sampler": {"k": 4},
                             "conformal": {"alpha": 0.2}, "seed": 1})

    def setUp(self):
        self.out = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.out)

    def test_cohort_is_deterministic(self):
        """Cohorts are seeded per slice and ordered by patient then slice."""
        a = generate_cohort(self.cfg, 2, 2)
        b = generate_cohort(self.cfg, 2, 2)
        self.assertEqual([(s.patient_id, s.slice_index) for s in a],
                         [("P000", 0), ("P000", 1), ("P001", 0), ("P001", 1)])
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.cbct.values, y.cbct.values)
        self.assertEqual(patient_id(12), "P012")
        with self.assertRaises(InvalidConfig):
            generate_cohort(self.cfg, 0, 1)

    def test_dry_run_and_validation(self):
        """A dry run only validates; unknown experiments and empty cohorts are rejected."""
        result = run_experiment("table1-phantom", self.cfg, self.out, 4, 1, dry_run=True)
        self.assertTrue(result.summary["dry_run"])
        self.assertTrue(result.frame.empty)
        self.assertEqual(os.listdir(self.out), [])
        with self.assertRaises(InvalidConfig):
            run_experiment("table9", self.cfg, self.out, 4, 1)
        with self.assertRaises(InvalidConfig):
            run_experiment(EXPERIMENTS[0], self.cfg, self.out, 0, 1)

    def test_table1_rows(self):
        """One aggregate row per method block and input setting, plus uncertainty maps."""
        result = run_experiment("table1-phantom", self.cfg, self.out, 20, 1)
        frame = result.frame
        self.assertEqual(len(frame), 6)
        self.assertEqual(sorted(set(frame["mode"])), ["C+SEG", "CBCT", "SEG"])
        self.assertEqual(sorted(set(frame["method"])), ["pw-crc", "pw-scp"])
        for column in ("MAE", "SoftMAE", "M-Cov-Base", "M-Cov-Adj", "P-Cov-Base", "IntSize-Adj", "NPixels"):
            self.assertIn(column, frame.columns)
        self.assertTrue(((frame["M-Cov-Base"] >= 0) & (frame["M-Cov-Base"] <= 1)).all())
        self.assertTrue((frame["MAE"] > 0).all())
        self.assertTrue(os.path.exists(os.path.join(self.out, "table1_phantom.csv")))
        self.assertEqual(len([p for p in result.outputs if p.endswith(".pgm")]), 12)
        self.assertIn("fit", result.timings)

    def test_fig3_rows(self):
        """Five perturbation levels for each prior-conditioned mode; level 0 keeps the prior."""
        frame = run_experiment("fig3-noise", self.cfg, self.out, 10, 1).frame
        self.assertEqual(len(frame), 10)
        self.assertEqual(sorted(set(frame["level"])), [0, 1, 2, 3, 4])
        self.assertEqual(sorted(set(frame["mode"])), ["C+SEG", "SEG"])
        self.assertTrue((frame.loc[frame["level"] == 0, "PriorDice"] == 1.0).all())
        self.assertTrue((frame["n"] == 2).all())

    def test_coverage_experiment_summary(self):
        """The coverage experiment reports its calibration size and bounds."""
        result = run_experiment("coverage", self.cfg, self.out, 6, 1)
        self.assertEqual((result.summary["n_cal"], result.summary["n_test"]), (4, 2))
        self.assertAlmostEqual(result.summary["upper_bound"], 0.8 + 1.0 / 5)
        self.assertEqual(len(result.frame), 200)
        self.assertTrue(os.path.exists(os.path.join(self.out, "coverage.csv")))


class TestPhantomResults(unittest.TestCase):
    """Orderings and guarantees measured on seeded phantom cohorts."""

    @classmethod
    def setUpClass(cls):
        cls.cfg = RunConfig()
        train = generate_cohort(cls.cfg, 25, 1, seed=derive_seed(cls.cfg.seed, "train", 0))
        cls.translator = Translator.fit([(s.cbct, s.ct) for s in train], cls.cfg.translator, cls.cfg.body,
                                        cls.cfg.bone, cls.cfg.metrics.bins)

    def test_prior_conditioned_modes_order(self):
        """Over 50 phantoms: MAE C+SEG <= SEG <= CBCT, SoftMAE C+SEG <= CBCT, prior modes win on Dice."""
        test = generate_cohort(self.cfg, 50, 1)
        totals = {}
        for mode in (TranslationMode.CBCT, TranslationMode.SEG, TranslationMode.CSEG):
            report = MetricsReport(self.cfg.conformal.alpha, self.cfg.metrics.stratification)
            for item in test:
                sct = self.translator.apply(item.cbct, item.prior, mode)
                report.add(evaluate_slice(item.patient_id, item.slice_index, sct, item.ct, None,
                                          self.cfg.metrics.stratification, self.cfg.normalization,
                                          self.cfg.body, self.cfg.bone))
            totals[mode] = report.aggregate()
        cbct, seg, cseg = totals[TranslationMode.CBCT], totals[TranslationMode.SEG], totals[TranslationMode.CSEG]
        self.assertLessEqual(cseg.mae, seg.mae)
        self.assertLessEqual(seg.mae, cbct.mae)
        self.assertLessEqual(cseg.soft_mae, cbct.soft_mae)
        for prior_mode in (seg, cseg):
            self.assertGreaterEqual(prior_mode.dice_body, cbct.dice_body)
            self.assertGreaterEqual(prior_mode.dice_bone, cbct.dice_bone)

    def test_noise_curve_trend(self):
        """Over 100 phantoms SEG error grows with the perturbation level and C+SEG degrades less."""
        test = generate_cohort(self.cfg, 100, 1)
        frame = noise_curve(self.cfg, self.translator, test, self.cfg.seed)
        seg = frame[frame["mode"] == "SEG"].sort_values("level")
        cseg = frame[frame["mode"] == "C+SEG"].sort_values("level")
        self.assertEqual(list(seg["level"]), [0, 1, 2, 3, 4])
        self.assertTrue((np.diff(seg["MAE"].to_numpy()) >= 0).all())
        self.assertTrue((np.diff(seg["SoftMAE"].to_numpy()) >= 0).all())
        self.assertTrue((np.diff(seg["PriorDice"].to_numpy()) <= 0).all())
        gap = seg["MAE"].to_numpy() - cseg["MAE"].to_numpy()
        self.assertGreater(gap[4], gap[0])

    def test_split_conformal_coverage_and_risk(self):
        """200 splits with 99 calibration slices at alpha 0.1: coverage in [0.89, 0.92], CRC risk <= 0.11."""
        cfg = from_dict({"phantom": {"height": 64, "width": 64}, "seed": 2})
        self.assertEqual((cfg.conformal.alpha, cfg.sampler.k), (0.1, 16))
        frame = coverage_study(cfg, n_cal=99, n_test=20, n_splits=200)
        self.assertEqual(len(frame), 200)
        coverage = frame["pixel_coverage"].mean()
        self.assertGreaterEqual(coverage, 0.900 - 0.01)
        self.assertLessEqual(coverage, 0.910 + 0.01)
        self.assertLessEqual(frame["crc_risk"].mean(), 0.1 + 0.01)
        self.assertTrue((frame["lambda_hat"] >= 0).all())


if __name__ == '__main__':
    unittest.main()
