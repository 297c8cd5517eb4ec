"""
Pixel-wise conformal calibration: split conformal (PW-SCP) and conformal risk control
(PW-CRC), each with a patient-adjusted variant, plus interval prediction.

All grids handled here are in normalized units. Quantile ranks and feasibility checks
are evaluated with exact rational arithmetic so that ceilings never drift.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum, IntEnum
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from backend.synthct.core import BinaryMask, ImageGrid, Units, require_same_shape
from backend.synthct.errors import (
    EmptyCalibration,
    EmptyMask,
    Infeasible,
    InvalidConfig,
    InvalidInputError,
    TooFewSamples,
    UnitMismatch,
)

logger = logging.getLogger(__name__)

SATURATED = np.float32(-1.0)
DEFAULT_CHUNK_PIXELS = 16384
# Slack on the CRC condition for float64 accumulation of the risk.
RISK_TOLERANCE = 1e-12


class Method(IntEnum):
    PW_SCP = 1
    PW_SCP_ADJ = 2
    PW_CRC = 3
    PW_CRC_ADJ = 4

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    @property
    def adjusted(self) -> bool:
        return self in (Method.PW_SCP_ADJ, Method.PW_CRC_ADJ)

    @property
    def is_crc(self) -> bool:
        return self in (Method.PW_CRC, Method.PW_CRC_ADJ)

    @classmethod
    def parse(cls, text: Union[str, "Method"]) -> "Method":
        if isinstance(text, cls):
            return text
        for method in cls:
            if method.label == str(text).lower():
                return method
        raise InvalidConfig(f"Unknown method '{text}' (expected one of {[m.label for m in cls]})")


class EvalPolicy(str, Enum):
    BODY = "body"
    FULL = "full"


class Aggregation(str, Enum):
    IMAGE = "image"
    PIXEL = "pixel"


def _exact(value: float) -> Fraction:
    # repr keeps the decimal the user wrote (0.1 -> 1/10, not the binary expansion).
    return Fraction(repr(float(value)))


def _check_alpha(alpha: float):
    if not 0.0 < float(alpha) < 1.0:
        raise InvalidConfig(f"alpha must be in (0, 1), got {alpha}")


@dataclass(frozen=True, eq=False)
class IntervalField:
    """Per-pixel bounds [lower, upper] in the units of the sCT they surround."""
    lower: ImageGrid
    upper: ImageGrid

    def __post_init__(self):
        require_same_shape(self.lower, self.upper)
        if self.lower.units is not self.upper.units:
            raise UnitMismatch("Interval bounds must share units")
        if (self.lower.values > self.upper.values).any():
            raise InvalidInputError("Interval lower bound exceeds upper bound")

    @property
    def units(self) -> Units:
        return self.lower.units

    @property
    def shape(self) -> Tuple[int, int]:
        return self.lower.shape

    def sizes(self) -> np.ndarray:
        return self.upper.values.astype(np.float64) - self.lower.values.astype(np.float64)

    @classmethod
    def full_range(cls, like: Union[ImageGrid, BinaryMask]) -> "IntervalField":
        """The whole normalized output space, used when calibration cannot certify anything."""
        h, w = like.shape
        return cls(ImageGrid(np.full((h, w), -1.0), Units.NORMALIZED), ImageGrid(np.ones((h, w)), Units.NORMALIZED))


@dataclass(frozen=True, eq=False)
class ScpCalibration:
    qhat: ImageGrid
    alpha: float
    n_c: int
    n_p: Fraction
    n_patients: int
    adjusted: bool = False
    eval_policy: EvalPolicy = EvalPolicy.BODY

    @property
    def method(self) -> Method:
        return Method.PW_SCP_ADJ if self.adjusted else Method.PW_SCP

    @property
    def saturated_mask(self) -> BinaryMask:
        return BinaryMask(self.qhat.values < 0)


@dataclass(frozen=True)
class CrcCalibration:
    lambda_hat: float
    alpha: float
    b: float
    n_c: int
    n_p: Fraction
    n_patients: int
    adjusted: bool = False
    bound_quantiles: Tuple[float, float] = (0.05, 0.95)
    aggregation: Aggregation = Aggregation.IMAGE
    eval_policy: EvalPolicy = EvalPolicy.BODY

    @property
    def method(self) -> Method:
        return Method.PW_CRC_ADJ if self.adjusted else Method.PW_CRC


Calibration = Union[ScpCalibration, CrcCalibration]


def conformity_scores(sct: ImageGrid, ct: ImageGrid) -> ImageGrid:
    """Absolute error |sct - ct| per pixel."""
    require_same_shape(sct, ct)
    if sct.units is not ct.units:
        raise UnitMismatch(f"Scores need matching units, got {sct.units.value} and {ct.units.value}")
    return ImageGrid(np.abs(sct.values - ct.values), Units.SCALAR)


def scp_rank(n_c: int, n_p: Union[Fraction, int, float], alpha: float, adjusted: bool) -> Optional[int]:
    """
    Order-statistic rank of the conformal quantile.

    Returns ceil((1 - alpha) * (n_c + 1)) for the base method, or
    ceil((1 - alpha) * (n_c + n_p)) when adjusted, and None (saturated) when the rank
    exceeds n_c.
    """
    if n_c < 1:
        raise EmptyCalibration("scp_rank needs at least one calibration sample")
    _check_alpha(alpha)
    extra = Fraction(n_p) if adjusted else Fraction(1)
    k = math.ceil((1 - _exact(alpha)) * (n_c + extra))
    return None if k > n_c else int(k)


def scp_min_calibration(alpha: float) -> int:
    """Smallest n_c whose base rank does not saturate."""
    _check_alpha(alpha)
    a = _exact(alpha)
    # ceil((1 - a)(n + 1)) <= n  <=>  n >= (1 - a) / a
    return max(math.ceil((1 - a) / a), 1)


def _patient_grouping(n_c: int, patient_ids: Optional[Sequence[str]], adjusted: bool) -> Tuple[Fraction, int]:
    if patient_ids is None:
        if adjusted:
            raise InvalidConfig("Adjusted calibration needs the patient id of every calibration slice")
        return Fraction(1), n_c
    if len(patient_ids) != n_c:
        raise InvalidInputError(f"Got {len(patient_ids)} patient ids for {n_c} calibration slices")
    n_patients = len(set(patient_ids))
    return Fraction(n_c, n_patients), n_patients


def _chunks(n_pixels: int, chunk_pixels: int) -> List[Tuple[int, int]]:
    if chunk_pixels < 1:
        raise InvalidConfig(f"chunk_pixels must be >= 1, got {chunk_pixels}")
    return [(start, min(start + chunk_pixels, n_pixels)) for start in range(0, n_pixels, chunk_pixels)]


def calibrate_pw_scp(cal: Sequence[Tuple[ImageGrid, ImageGrid]], alpha: float, adjusted: bool = False,
                     patient_ids: Optional[Sequence[str]] = None, eval_policy: EvalPolicy = EvalPolicy.BODY,
                     chunk_pixels: int = DEFAULT_CHUNK_PIXELS, workers: int = 1) -> ScpCalibration:
    """
    Fits the per-pixel conformal quantile q̂ from (sct, ct) calibration pairs.

    Pixels are processed in chunks of `chunk_pixels` columns; within a chunk the scores of
    all calibration slices are selected with a partial sort, so the result does not
    depend on chunking or on the number of worker threads.

    Args:
        cal (Sequence[Tuple[ImageGrid, ImageGrid]]): (sct, ct) pairs, normalized.
        alpha (float): Miscoverage level.
        adjusted (bool): Use the patient-level rank.
        patient_ids (Optional[Sequence[str]]): Patient of each pair, required when adjusted.
        eval_policy (EvalPolicy): Recorded for evaluation.
        chunk_pixels (int): Pixels per selection chunk.
        workers (int): Threads over chunks.

    Returns:
        ScpCalibration: q̂ grid with the saturation sentinel where the rank exceeds n_c.
    """
    _check_alpha(alpha)
    pairs = list(cal)
    if not pairs:
        raise EmptyCalibration("PW-SCP calibration set is empty")
    shape = require_same_shape(*[g for pair in pairs for g in pair])
    n_c = len(pairs)
    n_p, n_patients = _patient_grouping(n_c, patient_ids, adjusted)
    k = scp_rank(n_c, n_p, alpha, adjusted)
    qhat = np.full(shape[0] * shape[1], SATURATED, dtype=np.float32)

    if k is None:
        logger.warning(f"All {qhat.size} pixels saturated: n_c={n_c} is below the minimum "
                       f"{scp_min_calibration(alpha)} for alpha={alpha}, intervals span the full range")
    else:
        scts = [s.values.ravel() for s, _ in pairs]
        cts = [c.values.ravel() for _, c in pairs]

        def select(span: Tuple[int, int]) -> np.ndarray:
            start, stop = span
            block = np.empty((stop - start, n_c), dtype=np.float32)
            for i in range(n_c):
                block[:, i] = np.abs(scts[i][start:stop] - cts[i][start:stop])
            block.partition(k - 1, axis=1)
            return block[:, k - 1]

        spans = _chunks(qhat.size, chunk_pixels)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(select, spans))
        else:
            results = [select(span) for span in spans]
        for (start, stop), values in zip(spans, results):
            qhat[start:stop] = values

    method = "PW-SCP-ADJ" if adjusted else "PW-SCP"
    logger.info(f"Calibrated {method} on {n_c} slices from {n_patients} patients (alpha={alpha}, rank={k})")
    return ScpCalibration(ImageGrid(qhat.reshape(shape), Units.SCALAR), float(alpha), n_c, n_p, n_patients,
                          adjusted, EvalPolicy(eval_policy))


def _interval(lower: np.ndarray, upper: np.ndarray, units: Units, clip: bool) -> IntervalField:
    if clip:
        lower, upper = np.clip(lower, -1.0, 1.0), np.clip(upper, -1.0, 1.0)
    return IntervalField(ImageGrid(lower, units, strict=clip), ImageGrid(upper, units, strict=clip))


def predict_scp(sct: ImageGrid, calib: ScpCalibration, clip: bool = True) -> IntervalField:
    """Symmetric intervals [sct - q̂, sct + q̂]; saturated pixels get [-1, 1]."""
    require_same_shape(sct, calib.qhat)
    if sct.units is not Units.NORMALIZED:
        raise UnitMismatch(f"predict_scp expects a normalized sCT, got {sct.units.value}")
    y = sct.values.astype(np.float64)
    q = calib.qhat.values.astype(np.float64)
    saturated = q < 0
    lower = np.where(saturated, -1.0, y - q)
    upper = np.where(saturated, 1.0, y + q)
    return _interval(lower, upper, sct.units, clip)


def _order_index(q: float, k: int) -> int:
    return max(math.ceil(_exact(q) * k), 1) - 1


def heuristic_bounds(samples: Sequence[ImageGrid], q_lo: float = 0.05, q_hi: float = 0.95) -> IntervalField:
    """
    Per-pixel empirical quantiles of K sCT samples.

    The bound at level q is the order statistic with 1-based index ceil(q * K) (index 0
    meaning the minimum), so (0, 1) yields the per-pixel min and max.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise TooFewSamples(f"heuristic_bounds needs at least 2 samples, got {len(samples)}")
    if not 0.0 <= q_lo < q_hi <= 1.0:
        raise InvalidInputError(f"Bound quantiles must satisfy 0 <= q_lo < q_hi <= 1, got ({q_lo}, {q_hi})")
    require_same_shape(*samples)
    units = {s.units for s in samples}
    if len(units) != 1:
        raise UnitMismatch("Samples mix units")
    stack = np.stack([s.values for s in samples])
    lo, hi = _order_index(q_lo, len(samples)), _order_index(q_hi, len(samples))
    ordered = np.partition(stack, sorted({lo, hi}), axis=0)
    unit = units.pop()
    return IntervalField(ImageGrid(ordered[lo], unit), ImageGrid(ordered[hi], unit))


def _deficits(bounds: IntervalField, ct: ImageGrid) -> np.ndarray:
    require_same_shape(bounds, ct)
    if bounds.units is not ct.units:
        raise UnitMismatch(f"Bounds in {bounds.units.value} cannot cover a {ct.units.value} grid")
    y = ct.values.astype(np.float64)
    return np.maximum(bounds.lower.values.astype(np.float64) - y, y - bounds.upper.values.astype(np.float64))


def miscoverage_risk(bounds: IntervalField, ct: ImageGrid, mask: BinaryMask, lam: float) -> float:
    """Fraction of mask pixels falling outside [lower - lam, upper + lam]."""
    require_same_shape(bounds, mask)
    if mask.is_empty():
        raise EmptyMask("Miscoverage risk over an empty mask")
    missed = _deficits(bounds, ct)[mask.bits] > lam
    return float(np.count_nonzero(missed)) / mask.count()


def crc_feasibility(n_c: int, n_p: Fraction, alpha: float, b: float, adjusted: bool) -> Tuple[Fraction, Fraction]:
    """
    Returns (slope, offset) of the CRC condition slope * R̂(λ) + offset <= alpha.

    Raises Infeasible when even a zero empirical risk violates it.
    """
    a, big_b = _exact(alpha), _exact(b)
    extra = Fraction(n_p) if adjusted else Fraction(1)
    slope = Fraction(n_c) / (n_c + extra)
    offset = big_b * extra / (n_c + extra)
    if offset > a:
        need = math.ceil(big_b / a - 1)
        if adjusted:
            raise Infeasible(f"PW-CRC-ADJ infeasible at alpha={alpha}, B={b}: needs at least {need} calibration "
                             f"patients", min_patients=need)
        raise Infeasible(f"PW-CRC infeasible at alpha={alpha}, B={b}: needs n_c >= {need}, got {n_c}", min_n_c=need)
    return slope, offset


def calibrate_pw_crc(cal: Sequence[Tuple[IntervalField, ImageGrid, BinaryMask]], alpha: float, b: float = 1.0,
                     adjusted: bool = False, patient_ids: Optional[Sequence[str]] = None,
                     aggregation: Aggregation = Aggregation.IMAGE,
                     bound_quantiles: Tuple[float, float] = (0.05, 0.95),
                     eval_policy: EvalPolicy = EvalPolicy.BODY) -> CrcCalibration:
    """
    Finds the smallest additive widening λ̂ meeting the CRC condition.

    The empirical risk is a nonincreasing right-continuous step function of λ whose jumps
    sit at the positive per-pixel deficits max(l̃ - y, y - ũ), so scanning {0} and those
    deficits in ascending order yields the exact infimum.

    Args:
        cal (Sequence[Tuple[IntervalField, ImageGrid, BinaryMask]]): Heuristic bounds,
            ground truth and evaluation mask per calibration slice (normalized).
        alpha (float): Target risk level.
        b (float): Upper bound of the loss.
        adjusted (bool): Use the patient-level condition.
        patient_ids (Optional[Sequence[str]]): Patient of each slice, required when adjusted.
        aggregation (Aggregation): Per-image miscoverage fraction or pooled pixels.
        bound_quantiles (Tuple[float, float]): Recorded sample quantiles of the bounds.
        eval_policy (EvalPolicy): Recorded mask policy.

    Returns:
        CrcCalibration: λ̂ and provenance.
    """
    _check_alpha(alpha)
    if b <= 0:
        raise InvalidConfig(f"Risk bound B must be positive, got {b}")
    items = list(cal)
    if not items:
        raise EmptyCalibration("PW-CRC calibration set is empty")
    n_c = len(items)
    n_p, n_patients = _patient_grouping(n_c, patient_ids, adjusted)
    slope, offset = crc_feasibility(n_c, n_p, alpha, b, adjusted)
    target = float((_exact(alpha) - offset) / slope)
    aggregation = Aggregation(aggregation)

    masks = [mask for _, _, mask in items]
    if any(m.is_empty() for m in masks):
        raise EmptyMask("A calibration slice has an empty evaluation mask")
    total = sum(m.count() for m in masks)
    deficits, weights = [], []
    for bounds, ct, mask in items:
        require_same_shape(bounds, ct, mask)
        d = _deficits(bounds, ct)[mask.bits]
        positive = d[d > 0]
        w = 1.0 / (n_c * mask.count()) if aggregation is Aggregation.IMAGE else 1.0 / total
        deficits.append(positive)
        weights.append(np.full(positive.size, w))
    values, inverse = np.unique(np.concatenate(deficits), return_inverse=True)
    mass = np.bincount(inverse, weights=np.concatenate(weights), minlength=values.size)

    # risk_after[j] = R̂(values[j]) = mass of deficits strictly above values[j].
    tail = np.cumsum(mass[::-1])[::-1]
    risk_after = np.append(tail[1:], 0.0)
    risk_at_zero = float(tail[0]) if values.size else 0.0
    if risk_at_zero <= target + RISK_TOLERANCE:
        lam = 0.0
    else:
        lam = float(values[int(np.argmax(risk_after <= target + RISK_TOLERANCE))])

    method = "PW-CRC-ADJ" if adjusted else "PW-CRC"
    logger.info(f"Calibrated {method} on {n_c} slices from {n_patients} patients: lambda={lam:.6f} "
                f"(risk target {target:.6f})")
    return CrcCalibration(lam, float(alpha), float(b), n_c, n_p, n_patients, adjusted,
                          tuple(float(q) for q in bound_quantiles), aggregation, EvalPolicy(eval_policy))


def crc_condition(risk: float, calib: CrcCalibration) -> bool:
    """Whether an empirical risk satisfies the recorded calibration's CRC condition."""
    slope, offset = crc_feasibility(calib.n_c, calib.n_p, calib.alpha, calib.b, calib.adjusted)
    return float(slope) * risk + float(offset) <= calib.alpha + RISK_TOLERANCE


def predict_crc(bounds: IntervalField, calib: CrcCalibration, clip: bool = True) -> IntervalField:
    """Additively widened bounds [l̃ - λ̂, ũ + λ̂]."""
    lam = calib.lambda_hat
    lower = bounds.lower.values.astype(np.float64) - lam
    upper = bounds.upper.values.astype(np.float64) + lam
    return _interval(lower, upper, bounds.units, clip)
