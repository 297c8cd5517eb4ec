import contextlib
import io
import json
import os
import shutil
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import pandas as pd

from backend.commands.cli import build_parser, main, overrides
from backend.synthct.core import ImageGrid, Units
from backend.synthct.harness import BenchResult
from backend.synthct.storage import read_manifest, read_mask, write_volume

CONFIG = """\
phantom:
  height: 64
  width: 64
sampler:
  k: 4
conformal:
  alpha: 0.2
seed: 3
log_level: WARNING
"""


def run(*argv):
    """Runs the CLI and returns (exit code, parsed stdout summary or None)."""
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main([str(a) for a in argv])
    text = out.getvalue().strip()
    return code, json.loads(text) if text else None


def tree_bytes(root: str):
    files = {}
    for folder, _, names in os.walk(root):
        for name in names:
            path = os.path.join(folder, name)
            with open(path, "rb") as f:
                files[os.path.relpath(path, root)] = f.read()
    return files


class TestCliPipeline(unittest.TestCase):
    """Phantom cohort through translation, calibration, prediction and evaluation."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.config = os.path.join(cls.tmp, "run.yml")
        with open(cls.config, "w") as f:
            f.write(CONFIG)
        cls.cohort = os.path.join(cls.tmp, "cohort")
        code, cls.gen_summary = run("phantom", "gen", "--patients", 6, "--slices", 1, "--out", cls.cohort,
                                    "--config", cls.config)
        assert code == 0
        cls.translated = os.path.join(cls.tmp, "sct")
        code, cls.tr_summary = run("translate", "--manifest", os.path.join(cls.cohort, "manifest.csv"),
                                   "--samples", 3, "--out", cls.translated, "--config", cls.config)
        assert code == 0
        cls.manifest = os.path.join(cls.translated, "manifest.csv")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    def _path(self, *parts):
        return os.path.join(self.tmp, *parts)

    def test_phantom_gen_summary(self):
        """The summary reports the cohort and the config it ran under."""
        self.assertEqual(self.gen_summary["command"], "phantom gen")
        self.assertEqual(self.gen_summary["slices"], 6)
        self.assertEqual(self.gen_summary["config"]["phantom"]["height"], 64)
        self.assertEqual(len(self.gen_summary["config_digest"]), 64)
        manifest = read_manifest(self.gen_summary["manifest"], require_pairs=True)
        self.assertEqual(manifest.patients(), [f"P{i:03d}" for i in range(6)])

    def test_phantom_gen_is_reproducible(self):
        """Two runs with the same seed write byte-identical trees."""
        out = self._path("again")
        code, _ = run("phantom", "gen", "--patients", 6, "--slices", 1, "--out", out, "--config", self.config)
        self.assertEqual(code, 0)
        self.assertEqual(tree_bytes(out), tree_bytes(self.cohort))

    def test_translate_writes_sct_and_samples(self):
        """Every slice gets an sct record and the requested samples."""
        manifest = read_manifest(self.manifest)
        self.assertEqual(self.tr_summary["mode"], "c+seg")
        self.assertEqual(len(manifest.slice_keys()), 6)
        for pid, s in manifest.slice_keys():
            self.assertIsNotNone(manifest.find(pid, s, "sct"))
            self.assertEqual(len(manifest.samples(pid, s)), 3)

    def test_segment_with_truth(self):
        """Segmenting a phantom CT reports Dice against its analytic truth."""
        ct = os.path.join(self.cohort, "P000", "0000_ct.ctvol")
        body, bone = self._path("seg", "body.ctvol"), self._path("seg", "bone.ctvol")
        code, summary = run("segment", "--in", ct, "--out-body", body, "--out-bone", bone,
                            "--truth-dir", os.path.join(self.cohort, "P000"), "--config", self.config)
        self.assertEqual(code, 0)
        self.assertGreater(summary["dice_body"], 0.9)
        self.assertEqual(read_mask(body).count(), summary["body_pixels"])

    def test_scp_predict_and_evaluate(self):
        """Calibrated SCP intervals feed prediction and a two-column evaluation report."""
        base, adj = self._path("scp.bin"), self._path("scp_adj.bin")
        code, summary = run("calibrate", "--manifest", self.manifest, "--method", "pw-scp", "--out", base,
                            "--config", self.config)
        self.assertEqual(code, 0)
        self.assertEqual((summary["n_c"], summary["P"], summary["n_p"]), (6, 6, "1"))
        self.assertEqual(summary["saturated_pixels"], 0)
        code, _ = run("calibrate", "--manifest", self.manifest, "--method", "pw-scp-adj", "--out", adj,
                      "--config", self.config)
        self.assertEqual(code, 0)

        pred_dir, maps = self._path("pred"), self._path("maps")
        code, summary = run("predict", "--manifest", self.manifest, "--calib", base, "--out", pred_dir,
                            "--map-out", maps)
        self.assertEqual(code, 0)
        self.assertEqual((summary["slices"], summary["maps"]), (6, 6))
        predicted = read_manifest(os.path.join(pred_dir, "manifest.csv"))
        lower = predicted.find("P000", 0, "lower")
        self.assertTrue(os.path.exists(predicted.resolve(lower)))

        report = self._path("report.csv")
        code, summary = run("evaluate", "--manifest", self.manifest, "--calib", base, "--calib", adj,
                            "--out", report)
        self.assertEqual(code, 0)
        frame = pd.read_csv(report)
        self.assertEqual(frame["patient_id"].iloc[-1], "ALL")
        self.assertEqual(len(frame), 7)
        self.assertGreaterEqual(summary["aggregate"]["M-Cov-Base"], 0.0)
        self.assertLessEqual(summary["aggregate"]["M-Cov-Adj"], 1.0)

    def test_crc_calibrate_and_predict(self):
        """PW-CRC widens the sample bounds by a nonnegative lambda."""
        calib = self._path("crc.bin")
        code, summary = run("calibrate", "--manifest", self.manifest, "--method", "pw-crc", "--out", calib,
                            "--config", self.config)
        self.assertEqual(code, 0)
        self.assertGreaterEqual(summary["lambda_hat"], 0.0)
        code, summary = run("predict", "--manifest", self.manifest, "--calib", calib, "--out", self._path("crc"))
        self.assertEqual(code, 0)
        self.assertEqual(summary["method"], "pw-crc")

    def test_predict_adopts_calibration_config(self):
        """predict reports the config embedded in the container."""
        calib = self._path("scp_cfg.bin")
        code, cal_summary = run("calibrate", "--manifest", self.manifest, "--method", "pw-scp", "--out", calib,
                                "--config", self.config)
        self.assertEqual(code, 0)
        code, summary = run("predict", "--manifest", self.manifest, "--calib", calib, "--out", self._path("p2"))
        self.assertEqual(summary["config_digest"], cal_summary["calibration_digest"])
        self.assertEqual(summary["config"]["conformal"]["alpha"], 0.2)

    def test_saturated_everywhere(self):
        """Six calibration slices cannot support alpha 0.1."""
        code, summary = run("calibrate", "--manifest", self.manifest, "--method", "pw-scp", "--alpha", 0.1,
                            "--out", self._path("sat.bin"), "--config", self.config)
        self.assertEqual(code, 5)
        self.assertIsNone(summary)

    def test_crc_infeasible(self):
        """Three calibration slices cannot meet B / (n_c + 1) <= alpha at alpha 0.1."""
        split = self._path("split")
        code, _ = run("split", "--manifest", self.manifest, "--fractions", "0.5,0.5,0", "--out", split,
                      "--config", self.config)
        self.assertEqual(code, 0)
        code, _ = run("calibrate", "--manifest", os.path.join(split, "cal.csv"), "--method", "pw-crc",
                      "--alpha", 0.1, "--out", self._path("inf.bin"), "--config", self.config)
        self.assertEqual(code, 5)

    def test_tampered_container(self):
        """A modified calibration container is a provenance failure."""
        calib = self._path("tamper.bin")
        self.assertEqual(run("calibrate", "--manifest", self.manifest, "--method", "pw-scp", "--out", calib,
                             "--config", self.config)[0], 0)
        with open(calib, "rb") as f:
            data = bytearray(f.read())
        data[-40] ^= 0x01
        with open(calib, "wb") as f:
            f.write(bytes(data))
        code, _ = run("predict", "--manifest", self.manifest, "--calib", calib, "--out", self._path("t"))
        self.assertEqual(code, 6)

    def test_split_by_patient(self):
        """Patients land in exactly one group and the groups cover the cohort."""
        out = self._path("split_all")
        code, summary = run("split", "--manifest", self.manifest, "--out", out, "--config", self.config)
        self.assertEqual(code, 0)
        groups = [summary[name]["patients"] for name in ("train", "cal", "test")]
        self.assertEqual([len(g) for g in groups], [3, 2, 1])
        self.assertEqual(sorted(sum(groups, [])), [f"P{i:03d}" for i in range(6)])
        test = read_manifest(os.path.join(out, "test.csv"))
        self.assertEqual(test.patients(), groups[2])

    def test_perturb_levels(self):
        """Level 0 copies the masks; other levels move them."""
        manifest = os.path.join(self.cohort, "manifest.csv")
        code, summary = run("perturb", "--manifest", manifest, "--level", 0, "--out", self._path("l0"))
        self.assertEqual((code, summary["slices"]), (0, 6))
        src = os.path.join(self.cohort, "P001", "0000_mask_body.ctvol")
        with open(src, "rb") as a, open(self._path("l0", "P001", "0000_mask_body.ctvol"), "rb") as b:
            self.assertEqual(a.read(), b.read())
        code, _ = run("perturb", "--manifest", manifest, "--level", 4, "--out", self._path("l4"))
        self.assertEqual(code, 0)
        moved = read_mask(self._path("l4", "P001", "0000_mask_body.ctvol"))
        self.assertFalse(np.array_equal(moved.bits, read_mask(src).bits))


class TestCliErrors(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_invalid_perturbation_level(self):
        """Level 5 is invalid input."""
        code, _ = run("perturb", "--manifest", "unused.csv", "--level", 5, "--out", self.tmp.name)
        self.assertEqual(code, 2)

    def test_air_only_slice(self):
        """Segmenting a slice without a body is an empty-region failure."""
        path = os.path.join(self.tmp.name, "air.ctvol")
        write_volume(ImageGrid(np.full((16, 16), -1000.0), Units.HU), path)
        code, _ = run("segment", "--in", path, "--out-body", os.path.join(self.tmp.name, "b.ctvol"),
                      "--out-bone", os.path.join(self.tmp.name, "o.ctvol"))
        self.assertEqual(code, 4)

    def test_missing_and_malformed_files(self):
        """Missing or malformed inputs exit with the format code."""
        code, _ = run("split", "--manifest", os.path.join(self.tmp.name, "none.csv"), "--out", self.tmp.name)
        self.assertEqual(code, 3)
        bad = os.path.join(self.tmp.name, "bad.ctvol")
        with open(bad, "wb") as f:
            f.write(b"not a volume at all, definitely")
        code, _ = run("segment", "--in", bad, "--out-body", bad + ".b", "--out-bone", bad + ".o")
        self.assertEqual(code, 3)

    def test_unknown_config_key(self):
        """Unknown config keys are invalid input."""
        path = os.path.join(self.tmp.name, "bad.yml")
        with open(path, "w") as f:
            f.write("conformal:\n  alfa: 0.1\n")
        code, _ = run("bench", "--experiment", "coverage", "--dry-run", "--out", self.tmp.name, "--config", path)
        self.assertEqual(code, 2)

    def test_bench_dry_run(self):
        """A dry run validates the config without running."""
        code, summary = run("bench", "--experiment", "table1-phantom", "--dry-run", "--out", self.tmp.name)
        self.assertEqual(code, 0)
        self.assertTrue(summary["dry_run"])
        self.assertEqual(summary["rows"], 0)

    @patch("backend.commands.handlers.harness.run_experiment")
    def test_bench_dispatch(self, mock_run):
        """bench forwards its flags and reports the experiment summary."""
        mock_run.return_value = BenchResult("coverage", pd.DataFrame({"split": [0, 1]}), outputs=["c.csv"],
                                            timings={"splits": 0.5}, summary={"mean_pixel_coverage": 0.91})
        code, summary = run("bench", "--experiment", "coverage", "--patients", 7, "--slices", 2, "--seed", 4,
                            "--out", self.tmp.name)
        self.assertEqual(code, 0)
        name, cfg, out, patients, slices, dry_run = mock_run.call_args[0]
        self.assertEqual((name, out, patients, slices, dry_run), ("coverage", self.tmp.name, 7, 2, False))
        self.assertEqual(cfg.seed, 4)
        self.assertEqual((summary["rows"], summary["outputs"], summary["mean_pixel_coverage"]), (2, ["c.csv"], 0.91))


class TestOverrides(unittest.TestCase):

    def test_flags_map_to_config_keys(self):
        """Only flags that were given become overrides."""
        args = build_parser().parse_args(["calibrate", "--manifest", "m.csv", "--method", "pw-crc", "--alpha", "0.05",
                                          "--out", "c.bin", "--workers", "4", "--log-level", "debug"])
        self.assertEqual(overrides(args), {"conformal.alpha": 0.05, "conformal.workers": 4, "log_level": "DEBUG"})

    def test_seed_flag_scope(self):
        """The seed flag sets the run seed for cohort commands only."""
        gen = build_parser().parse_args(["phantom", "gen", "--patients", "1", "--slices", "1", "--seed", "9",
                                         "--out", "o"])
        self.assertEqual(overrides(gen)["seed"], 9)
        tr = build_parser().parse_args(["translate", "--manifest", "m.csv", "--seed", "9", "--out", "o"])
        self.assertNotIn("seed", overrides(tr))
        sp = build_parser().parse_args(["split", "--manifest", "m.csv", "--fractions", "0.6,0.2,0.2", "--out", "o"])
        self.assertEqual(overrides(sp)["split.fractions"], [0.6, 0.2, 0.2])


if __name__ == '__main__':
    unittest.main()
