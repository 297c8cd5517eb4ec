import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from backend.commands import handlers
from backend.synthct import __version__
from backend.synthct.config import LOG_LEVELS, resolve_config, to_dict
from backend.synthct.conformal import Method
from backend.synthct.errors import SynthCTError
from backend.synthct.harness import EXPERIMENTS
from backend.synthct.translator import TranslationMode

logger = logging.getLogger("backend.commands.cli")

FORMAT_EXIT_CODE = 3


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="YAML config file; flags override its values.")
    parser.add_argument("--log-level", choices=LOG_LEVELS, type=str.upper, help="Log level on stderr.")
    parser.add_argument("--workers", type=int, help="Worker threads for pixel-wise calibration.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctconf",
                                     description="Conformal uncertainty for CBCT to CT synthesis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    phantom = commands.add_parser("phantom", help="Synthetic phantom cohorts.")
    phantom_commands = phantom.add_subparsers(dest="phantom_command", required=True)
    gen = phantom_commands.add_parser("gen", help="Generate a phantom cohort and its manifest.")
    _add_common(gen)
    gen.add_argument("--patients", type=int, required=True, help="Number of patients.")
    gen.add_argument("--slices", type=int, required=True, help="Slices per patient.")
    gen.add_argument("--seed", type=int, help="Cohort seed.")
    gen.add_argument("--out", required=True, help="Output directory.")
    gen.set_defaults(handler=handlers.phantom_gen, label="phantom gen")

    seg = commands.add_parser("segment", help="Extract body and bone masks from a planning CT slice.")
    _add_common(seg)
    seg.add_argument("--in", "--input", dest="input", required=True, help="Input volume file.")
    seg.add_argument("--out-body", required=True, help="Body mask output file.")
    seg.add_argument("--out-bone", required=True, help="Bone mask output file.")
    seg.add_argument("--truth-dir", help="Directory with truth_body/truth_bone masks to report Dice against.")
    seg.set_defaults(handler=handlers.segment)

    tr = commands.add_parser("translate", help="Produce synthetic CT slices (and optional samples).")
    _add_common(tr)
    tr.add_argument("--manifest", required=True, help="Input manifest.")
    tr.add_argument("--mode", choices=[m.value for m in TranslationMode], help="Translator input setting.")
    tr.add_argument("--fit-manifest", help="Manifest of pairs to fit the translator on (defaults to --manifest).")
    tr.add_argument("--samples", type=int, default=0, help="Stochastic samples per slice (0 or at least 2).")
    tr.add_argument("--seed", type=int, default=0, help="Sampler seed.")
    tr.add_argument("--out", required=True, help="Output directory.")
    tr.set_defaults(handler=handlers.translate)

    cal = commands.add_parser("calibrate", help="Fit a pixel-wise calibration.")
    _add_common(cal)
    cal.add_argument("--manifest", required=True, help="Calibration manifest with sct and ct records.")
    cal.add_argument("--method", required=True, choices=[m.label for m in Method], help="Calibration method.")
    cal.add_argument("--alpha", type=float, help="Target miscoverage level.")
    cal.add_argument("--out", required=True, help="Calibration container output file.")
    cal.set_defaults(handler=handlers.calibrate)

    pr = commands.add_parser("predict", help="Write interval bounds for every sct slice.")
    _add_common(pr)
    pr.add_argument("--manifest", required=True, help="Test manifest.")
    pr.add_argument("--calib", required=True, help="Calibration container.")
    pr.add_argument("--out", required=True, help="Output directory.")
    pr.add_argument("--map-out", help="Directory for uncertainty map PGM images.")
    pr.set_defaults(handler=handlers.predict)

    ev = commands.add_parser("evaluate", help="Write the per-slice metrics report.")
    _add_common(ev)
    ev.add_argument("--manifest", required=True, help="Test manifest.")
    ev.add_argument("--calib", required=True, action="append",
                    help="Calibration container; give twice for base and adjusted columns.")
    ev.add_argument("--bins", help="Comma separated HU edges of the stratification groups.")
    ev.add_argument("--out", required=True, help="Report CSV file.")
    ev.set_defaults(handler=handlers.evaluate)

    pe = commands.add_parser("perturb", help="Apply an affine perturbation to the prior masks.")
    _add_common(pe)
    pe.add_argument("--manifest", required=True, help="Input manifest.")
    pe.add_argument("--level", type=int, required=True, help="Perturbation level 0..4.")
    pe.add_argument("--seed", type=int, default=0, help="Perturbation seed.")
    pe.add_argument("--out", required=True, help="Output directory.")
    pe.set_defaults(handler=handlers.perturb)

    be = commands.add_parser("bench", help="Run a bench experiment on a phantom cohort.")
    _add_common(be)
    be.add_argument("--experiment", required=True, choices=EXPERIMENTS, help="Experiment to run.")
    be.add_argument("--patients", type=int, default=40, help="Number of phantom patients.")
    be.add_argument("--slices", type=int, default=4, help="Slices per patient.")
    be.add_argument("--seed", type=int, help="Cohort seed.")
    be.add_argument("--out", required=True, help="Output directory.")
    be.add_argument("--dry-run", action="store_true", help="Validate the config and print the plan only.")
    be.set_defaults(handler=handlers.bench)

    sp = commands.add_parser("split", help="Split a manifest into train, calibration and test by patient.")
    _add_common(sp)
    sp.add_argument("--manifest", required=True, help="Input manifest.")
    sp.add_argument("--fractions", help="Comma separated train,cal,test fractions.")
    sp.add_argument("--seed", type=int, help="Split seed.")
    sp.add_argument("--out", required=True, help="Output directory.")
    sp.set_defaults(handler=handlers.split)
    return parser


def _fractions(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise SystemExit(f"ctconf: --fractions must be comma separated numbers, got {text!r}")


def overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config keys set by flags. Only flags that map onto the run config are listed."""
    values = {
        "log_level": getattr(args, "log_level", None),
        "conformal.workers": getattr(args, "workers", None),
        "conformal.alpha": getattr(args, "alpha", None),
        "translator.mode": getattr(args, "mode", None),
        "split.fractions": _fractions(getattr(args, "fractions", None)),
    }
    # translate and perturb seeds drive per-slice draws, not the cohort seed.
    if args.command in ("phantom", "bench", "split"):
        values["seed"] = getattr(args, "seed", None)
    return {k: v for k, v in values.items() if v is not None}


def configure_logging(level: str):
    logging.basicConfig(stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    logging.getLogger("backend").setLevel(level)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or "INFO")
    label = getattr(args, "label", args.command)
    try:
        # 1. Resolve config: flag > file > default
        cfg = resolve_config(args.config, overrides(args))
        configure_logging(cfg.log_level)
        ctx = handlers.RunContext(cfg)

        # 2. Run the command
        summary = args.handler(args, ctx)
    except SynthCTError as e:
        logger.error(f"{label} failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{label} failed: {e}")
        return FORMAT_EXIT_CODE

    # 3. Report the summary with the provenance of the config actually used
    print(json.dumps({"command": label, **summary, "config": to_dict(ctx.cfg),
                      "config_digest": ctx.config_digest}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
