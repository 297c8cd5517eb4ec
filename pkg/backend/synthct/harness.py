"""
Bench experiments on the phantom cohort.

- table1-phantom: all four calibration methods for each translator input setting.
- fig3-noise: translation error as the segmentation prior is perturbed (levels 0..4).
- coverage: repeated calibration/test splits of i.i.d. slices, reporting the empirical
  coverage of PW-SCP and the test risk of PW-CRC.
"""
import contextlib
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from backend.synthct.conformal import (
    EvalPolicy,
    IntervalField,
    Method,
    calibrate_pw_crc,
    calibrate_pw_scp,
    heuristic_bounds,
    miscoverage_risk,
    predict_crc,
    predict_scp,
)
from backend.synthct.config import RunConfig
from backend.synthct.core import (
    BinaryMask,
    ImageGrid,
    SegmentationPrior,
    derive_seed,
    normalize,
    split_patients,
)
from backend.synthct.errors import CalibrationError, EmptyRegionError, InvalidConfig
from backend.synthct.metrics import (
    ADJ,
    BASE,
    MetricsReport,
    dice,
    evaluate_slice,
    uncertainty_map,
)
from backend.synthct.phantom import degrade_to_cbct, generate_phantom, perturb_prior
from backend.synthct.segmentation import build_prior
from backend.synthct.storage import export_pgm
from backend.synthct.translator import TranslationMode, Translator, sample_ensemble

logger = logging.getLogger(__name__)

EXPERIMENTS = ("table1-phantom", "fig3-noise", "coverage")
MODES = (TranslationMode.CBCT, TranslationMode.SEG, TranslationMode.CSEG)
NOISE_MODES = (TranslationMode.SEG, TranslationMode.CSEG)
METHOD_BLOCKS = ((Method.PW_SCP, Method.PW_SCP_ADJ), (Method.PW_CRC, Method.PW_CRC_ADJ))
# Interval sizes live in [0, 2] normalized units.
MAP_WINDOW = (0.0, math.log1p(2.0))


@dataclass
class PhantomSlice:
    patient_id: str
    slice_index: int
    ct: ImageGrid
    cbct: ImageGrid
    prior: SegmentationPrior
    body_truth: BinaryMask
    bone_truth: BinaryMask


@dataclass
class BenchResult:
    experiment: str
    frame: pd.DataFrame
    outputs: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)


@contextlib.contextmanager
def stage(timings: Dict[str, float], name: str) -> Iterator[None]:
    """Times one stage and logs its wall-clock duration."""
    start = time.perf_counter()
    yield
    timings[name] = round(time.perf_counter() - start, 3)
    logger.info(f"Stage {name} took {timings[name]:.2f}s")


def patient_id(index: int) -> str:
    return f"P{index:03d}"


def phantom_slice(cfg: RunConfig, seed: int, pid: str, slice_index: int, n_slices: int) -> PhantomSlice:
    """One cohort slice: clean CT, simulated CBCT, extracted prior and analytic truths."""
    slice_seed = derive_seed(seed, pid, slice_index)
    phantom = generate_phantom(cfg.phantom, slice_seed, patient_seed=derive_seed(seed, pid, -1),
                               slice_pos=slice_index / (n_slices - 1) if n_slices > 1 else 0.0)
    cbct = degrade_to_cbct(phantom.ct, cfg.degradation, derive_seed(slice_seed, "cbct", 0))
    prior = build_prior(phantom.ct, cfg.body, cfg.bone)
    return PhantomSlice(pid, slice_index, phantom.ct, cbct, prior, phantom.body_truth, phantom.bone_truth)


def generate_cohort(cfg: RunConfig, n_patients: int, n_slices: int, seed: Optional[int] = None) -> List[PhantomSlice]:
    if n_patients < 1 or n_slices < 1:
        raise InvalidConfig(f"Cohort needs at least one patient and one slice, got {n_patients}x{n_slices}")
    seed = cfg.seed if seed is None else seed
    return [phantom_slice(cfg, seed, patient_id(p), s, n_slices) for p in range(n_patients) for s in range(n_slices)]


def _split_cohort(cfg: RunConfig, cohort: List[PhantomSlice]) -> Tuple[List[PhantomSlice], ...]:
    train, cal, test = split_patients(sorted({s.patient_id for s in cohort}), cfg.split.fractions, cfg.seed)
    groups = tuple([s for s in cohort if s.patient_id in set(ids)] for ids in (train, cal, test))
    if not all(groups):
        raise InvalidConfig(f"Split {cfg.split.fractions} of {len({s.patient_id for s in cohort})} patients "
                            "leaves an empty train, calibration or test group")
    return groups


def _fit_translator(cfg: RunConfig, train: List[PhantomSlice]) -> Translator:
    return Translator.fit([(s.cbct, s.ct) for s in train], cfg.translator, cfg.body, cfg.bone, cfg.metrics.bins)


def _eval_mask(cfg: RunConfig, item: PhantomSlice) -> BinaryMask:
    if cfg.conformal.eval_policy is EvalPolicy.FULL:
        return BinaryMask(np.ones(item.ct.shape, dtype=bool))
    return item.body_truth


class _ModeData:
    """Normalized predictions, truths and heuristic bounds of a slice group for one mode."""

    def __init__(self, cfg: RunConfig, translator: Translator, mode: TranslationMode, items: List[PhantomSlice],
                 with_bounds: bool):
        spec = cfg.normalization
        self.items = items
        self.sct = [normalize(translator.apply(s.cbct, s.prior, mode), spec) for s in items]
        self.ct = [normalize(s.ct, spec) for s in items]
        self.bounds: List[IntervalField] = []
        if with_bounds:
            for s in items:
                sampler = dataclasses.replace(cfg.sampler, seed=derive_seed(cfg.sampler.seed, s.patient_id,
                                                                            s.slice_index))
                samples = sample_ensemble(s.cbct, s.prior, mode, translator, sampler, spec)
                self.bounds.append(heuristic_bounds(samples, *cfg.conformal.bound_quantiles))


def _calibrate(cfg: RunConfig, method: Method, cal: _ModeData):
    c = cfg.conformal
    pids = [s.patient_id for s in cal.items]
    if method.is_crc:
        triples = [(b, y, _eval_mask(cfg, s)) for b, y, s in zip(cal.bounds, cal.ct, cal.items)]
        return calibrate_pw_crc(triples, c.alpha, c.crc_b, method.adjusted, pids, c.aggregation,
                                c.bound_quantiles, c.eval_policy)
    return calibrate_pw_scp(list(zip(cal.sct, cal.ct)), c.alpha, method.adjusted, pids, c.eval_policy,
                            c.chunk_pixels, c.workers)


def _predict(cfg: RunConfig, method: Method, calib, data: _ModeData, index: int) -> IntervalField:
    if calib is None:
        return IntervalField.full_range(data.sct[index])
    clip = cfg.conformal.clip_intervals
    if method.is_crc:
        return predict_crc(data.bounds[index], calib, clip)
    return predict_scp(data.sct[index], calib, clip)


def run_table1(cfg: RunConfig, out_dir: str, n_patients: int, n_slices: int) -> BenchResult:
    """Method block x input setting matrix, one aggregate row per cell."""
    result = BenchResult("table1-phantom", pd.DataFrame())
    maps_dir = os.path.join(out_dir, "maps")

    # 1. Cohort and patient split
    with stage(result.timings, "cohort"):
        train, cal, test = _split_cohort(cfg, generate_cohort(cfg, n_patients, n_slices))
    # 2. Translator fitted on training patients only
    with stage(result.timings, "fit"):
        translator = _fit_translator(cfg, train)

    rows = []
    for mode in MODES:
        with stage(result.timings, f"translate-{mode.value}"):
            cal_data = _ModeData(cfg, translator, mode, cal, with_bounds=True)
            test_data = _ModeData(cfg, translator, mode, test, with_bounds=True)
        for block in METHOD_BLOCKS:
            # 3. Calibrate base and adjusted; an infeasible method falls back to full-range intervals
            with stage(result.timings, f"calibrate-{block[0].label}-{mode.value}"):
                calibs = {}
                for label, method in zip((BASE, ADJ), block):
                    try:
                        calibs[label] = _calibrate(cfg, method, cal_data)
                    except CalibrationError as e:
                        logger.warning(f"{method.label} on {mode.value}: {e}; using full-range intervals")
                        calibs[label] = None
            # 4. Evaluate on test patients
            with stage(result.timings, f"evaluate-{block[0].label}-{mode.value}"):
                report = MetricsReport(cfg.conformal.alpha, cfg.metrics.stratification)
                for i, item in enumerate(test):
                    intervals = {label: _predict(cfg, method, calibs[label], test_data, i)
                                 for label, method in zip((BASE, ADJ), block)}
                    if i == 0:
                        for label, field_ in intervals.items():
                            path = os.path.join(maps_dir, f"{block[0].label}_{mode.value}_{label.lower()}.pgm")
                            export_pgm(uncertainty_map(field_), path, *MAP_WINDOW)
                            result.outputs.append(path)
                    try:
                        report.add(evaluate_slice(
                            item.patient_id, item.slice_index, test_data.sct[i], test_data.ct[i], intervals,
                            cfg.metrics.stratification, cfg.normalization, cfg.body, cfg.bone,
                            cfg.conformal.eval_policy, cfg.metrics.size_units, cfg.metrics.dice_both_empty,
                            item.body_truth))
                    except EmptyRegionError as e:
                        logger.warning(f"Skipping slice {item.patient_id}/{item.slice_index}: {e}")
                aggregate = report.to_frame().iloc[-1].to_dict()
            row = {"method": block[0].label, "mode": mode.value.upper()}
            row.update({k: v for k, v in aggregate.items() if k not in ("patient_id", "slice_index")})
            rows.append(row)

    result.frame = pd.DataFrame(rows)
    path = os.path.join(out_dir, "table1_phantom.csv")
    os.makedirs(out_dir, exist_ok=True)
    result.frame.to_csv(path, index=False)
    result.outputs.insert(0, path)
    logger.info(f"Wrote {len(rows)} table rows to {path}")
    return result


def noise_curve(cfg: RunConfig, translator: Translator, items: Sequence[PhantomSlice],
                seed: int) -> pd.DataFrame:
    """
    Translation error per perturbation level and prior-conditioned mode.

    Every slice uses one perturbation seed across levels and modes, so the levels differ
    only in magnitude.
    """
    rows = []
    for level in range(5):
        for mode in NOISE_MODES:
            report = MetricsReport(cfg.conformal.alpha, cfg.metrics.stratification)
            prior_dice = []
            for item in items:
                prior = perturb_prior(item.prior, level, derive_seed(seed, item.patient_id, item.slice_index))
                prior_dice.append(dice(prior.body, item.prior.body))
                sct = translator.apply(item.cbct, prior, mode)
                report.add(evaluate_slice(item.patient_id, item.slice_index, sct, item.ct, None,
                                          cfg.metrics.stratification, cfg.normalization, cfg.body, cfg.bone))
            total = report.aggregate()
            rows.append({"level": level, "mode": mode.value.upper(), "MAE": total.mae, "SoftMAE": total.soft_mae,
                         "PriorDice": float(np.mean(prior_dice)), "n": len(items)})
    return pd.DataFrame(rows, columns=["level", "mode", "MAE", "SoftMAE", "PriorDice", "n"])


def run_fig3(cfg: RunConfig, out_dir: str, n_patients: int, n_slices: int) -> BenchResult:
    result = BenchResult("fig3-noise", pd.DataFrame())
    with stage(result.timings, "cohort"):
        train, _, test = _split_cohort(cfg, generate_cohort(cfg, n_patients, n_slices))
    with stage(result.timings, "fit"):
        translator = _fit_translator(cfg, train)
    with stage(result.timings, "perturb-evaluate"):
        result.frame = noise_curve(cfg, translator, test, cfg.seed)
    path = os.path.join(out_dir, "fig3_noise.csv")
    os.makedirs(out_dir, exist_ok=True)
    result.frame.to_csv(path, index=False)
    result.outputs.append(path)
    return result


def coverage_study(cfg: RunConfig, n_cal: int, n_test: int, n_splits: int, n_train: int = 8,
                   mode: Optional[TranslationMode] = None) -> pd.DataFrame:
    """
    Repeated random calibration/test splits over a pool of i.i.d. slices.

    Each pool slice is its own patient, so slice- and patient-level exchangeability
    coincide. Coverage is measured on the pixels inside every pool body, a fixed region.
    Per split the frame holds the pooled pixel coverage and the mean per-patient
    coverage of PW-SCP, and the mean test miscoverage risk of PW-CRC.
    """
    mode = cfg.translator.mode if mode is None else mode
    c = cfg.conformal
    train = generate_cohort(cfg, n_train, 1, seed=derive_seed(cfg.seed, "train", 0))
    pool = generate_cohort(cfg, n_cal + n_test, 1)
    translator = _fit_translator(cfg, train)
    data = _ModeData(cfg, translator, mode, pool, with_bounds=True)
    common = BinaryMask(np.logical_and.reduce([s.body_truth.bits for s in pool]))
    if common.is_empty():
        raise EmptyRegionError("Pool bodies share no pixel")

    rows = []
    for split in range(n_splits):
        order = np.random.default_rng(derive_seed(cfg.seed, "split", split)).permutation(len(pool))
        cal_idx, test_idx = order[:n_cal], order[n_cal:]
        scp = calibrate_pw_scp([(data.sct[i], data.ct[i]) for i in cal_idx], c.alpha, chunk_pixels=c.chunk_pixels)
        crc = calibrate_pw_crc([(data.bounds[i], data.ct[i], common) for i in cal_idx], c.alpha, c.crc_b)
        covered, per_patient, risks = 0, [], []
        for i in test_idx:
            field_ = predict_scp(data.sct[i], scp, c.clip_intervals)
            y = data.ct[i].values[common.bits]
            hits = int(np.count_nonzero((field_.lower.values[common.bits] <= y) & (y <= field_.upper.values[common.bits])))
            covered += hits
            per_patient.append(hits / common.count())
            risks.append(miscoverage_risk(data.bounds[i], data.ct[i], common, crc.lambda_hat))
        rows.append({"split": split, "pixel_coverage": covered / (common.count() * len(test_idx)),
                     "patient_coverage": float(np.mean(per_patient)), "crc_risk": float(np.mean(risks)),
                     "qhat_mean": float(scp.qhat.values[common.bits].mean()), "lambda_hat": crc.lambda_hat})
    return pd.DataFrame(rows)


def run_coverage(cfg: RunConfig, out_dir: str, n_patients: int, n_splits: int = 200) -> BenchResult:
    result = BenchResult("coverage", pd.DataFrame())
    n_cal = max(int(round(n_patients * cfg.split.fractions[1] / (cfg.split.fractions[1] + cfg.split.fractions[2]))), 1)
    n_test = max(n_patients - n_cal, 1)
    with stage(result.timings, "splits"):
        result.frame = coverage_study(cfg, n_cal, n_test, n_splits)
    path = os.path.join(out_dir, "coverage.csv")
    os.makedirs(out_dir, exist_ok=True)
    result.frame.to_csv(path, index=False)
    result.outputs.append(path)
    result.summary = {
        "n_cal": n_cal, "n_test": n_test, "splits": n_splits,
        "mean_pixel_coverage": float(result.frame["pixel_coverage"].mean()),
        "mean_patient_coverage": float(result.frame["patient_coverage"].mean()),
        "mean_crc_risk": float(result.frame["crc_risk"].mean()),
        "target_coverage": 1.0 - cfg.conformal.alpha,
        "upper_bound": 1.0 - cfg.conformal.alpha + 1.0 / (n_cal + 1),
    }
    return result


def run_experiment(name: str, cfg: RunConfig, out_dir: str, n_patients: int, n_slices: int,
                   dry_run: bool = False) -> BenchResult:
    """Dispatches a bench experiment; a dry run only validates the inputs."""
    if name not in EXPERIMENTS:
        raise InvalidConfig(f"Unknown experiment '{name}' (expected one of {EXPERIMENTS})")
    if n_patients < 1 or n_slices < 1:
        raise InvalidConfig("bench needs at least one patient and one slice")
    if dry_run:
        logger.info(f"Dry run of {name}: configuration is valid")
        return BenchResult(name, pd.DataFrame(), summary={"dry_run": True})
    logger.info(f"Running {name} on {n_patients} patients x {n_slices} slices")
    if name == "table1-phantom":
        return run_table1(cfg, out_dir, n_patients, n_slices)
    if name == "fig3-noise":
        return run_fig3(cfg, out_dir, n_patients, n_slices)
    return run_coverage(cfg, out_dir, n_patients)
