import os
import tempfile
import unittest

from backend.synthct.config import (
    RunConfig,
    canonical_json,
    config_digest,
    from_dict,
    load_config,
    nest,
    resolve_config,
    to_dict,
)
from backend.synthct.conformal import Aggregation, EvalPolicy
from backend.synthct.core import Units
from backend.synthct.errors import InvalidConfig, TooFewSamples, UnknownConfigKey
from backend.synthct.segmentation import KernelShape
from backend.synthct.translator import TranslationMode

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


class TestConfig(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def _yaml(self, text: str) -> str:
        path = os.path.join(self.tmp.name, "run.yml")
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_defaults(self):
        """Built-in defaults of the run config."""
        cfg = RunConfig()
        self.assertEqual(cfg.conformal.alpha, 0.1)
        self.assertIs(cfg.conformal.aggregation, Aggregation.IMAGE)
        self.assertIs(cfg.conformal.eval_policy, EvalPolicy.BODY)
        self.assertIs(cfg.translator.mode, TranslationMode.CSEG)
        self.assertEqual(cfg.metrics.bins, (-200.0, 150.0, 350.0))
        self.assertEqual(cfg.split.fractions, (0.5, 0.3, 0.2))
        self.assertEqual((cfg.normalization.hu_min, cfg.normalization.hu_max), (-1000.0, 2000.0))

    def test_shipped_default_file_matches_builtins(self):
        """config/default.yml spells out the built-in defaults."""
        cfg = resolve_config(os.path.join(REPO_ROOT, "config", "default.yml"))
        self.assertEqual(config_digest(cfg), config_digest(RunConfig()))

    def test_precedence(self):
        """Flags override the file, the file overrides defaults, None flags are ignored."""
        path = self._yaml("conformal:\n  alpha: 0.2\n  workers: 3\nseed: 4\n")
        from_file = resolve_config(path)
        self.assertEqual((from_file.conformal.alpha, from_file.conformal.workers, from_file.seed), (0.2, 3, 4))
        flagged = resolve_config(path, {"conformal.alpha": 0.3, "seed": None})
        self.assertEqual((flagged.conformal.alpha, flagged.conformal.workers, flagged.seed), (0.3, 3, 4))
        self.assertEqual(resolve_config(None, {"translator.mode": "SEG"}).translator.mode, TranslationMode.SEG)

    def test_unknown_keys(self):
        """Unknown keys are rejected with their dotted path."""
        with self.assertRaises(UnknownConfigKey) as ctx:
            from_dict({"conformal": {"alfa": 0.1}})
        self.assertEqual(ctx.exception.key_path, "conformal.alfa")
        with self.assertRaises(UnknownConfigKey):
            resolve_config(self._yaml("verbose: true\n"))

    def test_invalid_values(self):
        """Out-of-range and malformed values fail as invalid config."""
        cases = [
            {"conformal": {"alpha": 1.5}},
            {"conformal": {"alpha": 0.0}},
            {"conformal": {"bound_quantiles": [0.9, 0.1]}},
            {"conformal": {"aggregation": "patient"}},
            {"conformal": 3},
            {"translator": {"mode": "mri"}},
            {"body": {"closing_kernel": "hexagon"}},
            {"bone": {"low_hu": 400.0}},
            {"metrics": {"bins": 150.0}},
            {"metrics": {"bins": [150.0, -200.0]}},
            {"metrics": {"size_units": "Scalar"}},
            {"split": {"fractions": [0.5, 0.5, 0.5]}},
            {"log_level": "verbose"},
            {"normalization": {"hu_min": 100.0, "hu_max": 0.0}},
        ]
        for data in cases:
            with self.subTest(data=data):
                with self.assertRaises(InvalidConfig):
                    from_dict(data)
        with self.assertRaises(TooFewSamples):
            from_dict({"sampler": {"k": 1}})

    def test_value_parsing(self):
        """Kernels, enums and units are parsed from their text form."""
        cfg = from_dict({"body": {"closing_kernel": "cross3"}, "conformal": {"eval_policy": "full"},
                         "metrics": {"size_units": "HU"}, "log_level": "debug"})
        self.assertIs(cfg.body.closing_kernel.shape, KernelShape.CROSS3)
        self.assertIs(cfg.conformal.eval_policy, EvalPolicy.FULL)
        self.assertIs(cfg.metrics.size_units, Units.HU)
        self.assertEqual(cfg.log_level, "DEBUG")

    def test_yaml_loading(self):
        """Empty files are empty mappings; broken or non-mapping YAML is invalid."""
        self.assertEqual(load_config(self._yaml("")), {})
        with self.assertRaises(InvalidConfig):
            load_config(self._yaml("conformal: [unclosed\n"))
        with self.assertRaises(InvalidConfig):
            load_config(self._yaml("- 1\n- 2\n"))
        with self.assertRaises(OSError):
            load_config(os.path.join(self.tmp.name, "missing.yml"))

    def test_nest(self):
        """Dotted keys become nested sections."""
        self.assertEqual(nest({"conformal.alpha": 0.2, "conformal.workers": 2, "seed": 1}),
                         {"conformal": {"alpha": 0.2, "workers": 2}, "seed": 1})

    def test_serialization_and_digest(self):
        """The digest hashes canonical JSON and follows every value change."""
        data = to_dict(RunConfig())
        self.assertEqual(data["body"]["closing_kernel"], "disk(3)")
        self.assertEqual(data["translator"]["mode"], "c+seg")
        self.assertEqual(data["metrics"]["size_units"], "Normalized")
        self.assertEqual(data["split"]["fractions"], [0.5, 0.3, 0.2])
        self.assertEqual(canonical_json({"b": 1, "a": [1, 2]}), '{"a":[1,2],"b":1}')
        self.assertEqual(from_dict(data), RunConfig())

        digest = config_digest(RunConfig())
        self.assertEqual(len(digest), 64)
        self.assertEqual(digest, config_digest(RunConfig()))
        self.assertNotEqual(digest, config_digest(from_dict({"conformal": {"alpha": 0.2}})))


if __name__ == '__main__':
    unittest.main()
