"""
Evaluation metrics for sCT translation and conformal intervals.

Per-slice results are kept as exact counts and sums (`SliceMetrics`) so reports over
many slices pool them in a fixed order instead of averaging averages.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from backend.synthct.conformal import EvalPolicy, IntervalField
from backend.synthct.core import BinaryMask, ImageGrid, NormalizationSpec, Units, require_same_shape
from backend.synthct.errors import AllGroupsEmpty, EmptyBody, EmptyMask, EmptySoftMask, InvalidConfig, UnitMismatch
from backend.synthct.segmentation import BodySegConfig, BoneSegConfig, extract_body_mask, extract_bone_mask

logger = logging.getLogger(__name__)

BASE, ADJ = "Base", "Adj"
AGGREGATE_ID = "ALL"
REPORT_COLUMNS = [
    "patient_id", "slice_index", "MAE", "SoftMAE", "DiceBody", "DiceBone",
    "M-Cov-Base", "M-Cov-Adj", "P-Cov-Base", "P-Cov-Adj", "IntSize-Base", "IntSize-Adj",
]


@dataclass(frozen=True)
class StratificationBins:
    """Cut points over ground-truth intensities defining len(edges) + 1 groups."""
    edges: Tuple[float, ...] = (-200.0, 150.0, 350.0)
    units: Units = Units.HU

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
            raise InvalidConfig(f"Bin edges must be non-empty and strictly increasing, got {edges}")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "units", Units(self.units))

    @classmethod
    def parse(cls, text: str, units: Units = Units.HU) -> "StratificationBins":
        try:
            return cls(tuple(float(part) for part in str(text).split(",") if part.strip()), units)
        except ValueError:
            raise InvalidConfig(f"Cannot parse bin edges '{text}'")

    @property
    def n_groups(self) -> int:
        return len(self.edges) + 1

    def edges_in(self, units: Units, spec: Optional[NormalizationSpec]) -> np.ndarray:
        if units is self.units:
            return np.asarray(self.edges)
        if spec is None:
            raise UnitMismatch(f"Bins in {self.units.value} need a NormalizationSpec for {units.value} grids")
        if self.units is Units.HU and units is Units.NORMALIZED:
            return np.array([spec.hu_to_normalized(e) for e in self.edges])
        if self.units is Units.NORMALIZED and units is Units.HU:
            return np.array([spec.normalized_to_hu(e) for e in self.edges])
        raise UnitMismatch(f"Cannot stratify {units.value} values with {self.units.value} bins")

    def assign(self, ct: ImageGrid, spec: Optional[NormalizationSpec] = None) -> np.ndarray:
        """Group index per pixel; a value equal to an edge falls in the upper group."""
        return np.digitize(ct.values, self.edges_in(ct.units, spec))


def _hu_scale(units: Units, spec: Optional[NormalizationSpec]) -> float:
    if units is Units.HU:
        return 1.0
    if units is Units.NORMALIZED and spec is not None:
        return spec.half_range
    raise UnitMismatch(f"Cannot report {units.value} errors in HU without a NormalizationSpec")


def _abs_error(sct: ImageGrid, ct: ImageGrid) -> np.ndarray:
    require_same_shape(sct, ct)
    if sct.units is not ct.units:
        raise UnitMismatch(f"Cannot compare {sct.units.value} with {ct.units.value}")
    return np.abs(sct.values.astype(np.float64) - ct.values.astype(np.float64))


def masked_mae(sct: ImageGrid, ct: ImageGrid, mask: BinaryMask, spec: Optional[NormalizationSpec] = None) -> float:
    """Mean absolute error over the mask, in HU."""
    require_same_shape(sct, mask)
    if mask.is_empty():
        raise EmptyMask("MAE over an empty mask")
    return float(_abs_error(sct, ct)[mask.bits].mean()) * _hu_scale(sct.units, spec)


def soft_mask(m_body: BinaryMask, mhat_body: BinaryMask, m_bone: BinaryMask, mhat_bone: BinaryMask) -> BinaryMask:
    """Soft tissue both masks agree on: (body ∩ body_hat) minus (bone ∪ bone_hat)."""
    require_same_shape(m_body, mhat_body, m_bone, mhat_bone)
    return BinaryMask((m_body.bits & mhat_body.bits) & ~(m_bone.bits | mhat_bone.bits))


def soft_mae(sct: ImageGrid, ct: ImageGrid, m_body: BinaryMask, mhat_body: BinaryMask, m_bone: BinaryMask,
             mhat_bone: BinaryMask, spec: Optional[NormalizationSpec] = None) -> float:
    soft = soft_mask(m_body, mhat_body, m_bone, mhat_bone)
    if soft.is_empty():
        raise EmptySoftMask("Soft-tissue mask is empty")
    return float(_abs_error(sct, ct)[soft.bits].mean()) * _hu_scale(sct.units, spec)


def derive_masks(grid: ImageGrid, body_cfg: BodySegConfig = BodySegConfig(), bone_cfg: BoneSegConfig = BoneSegConfig(),
                 spec: Optional[NormalizationSpec] = None) -> Tuple[BinaryMask, BinaryMask]:
    """Body and bone masks of an image; an image without a body yields two empty masks."""
    try:
        body = extract_body_mask(grid, body_cfg, spec)
    except EmptyBody:
        empty = BinaryMask.zeros(*grid.shape)
        return empty, empty
    return body, extract_bone_mask(grid, body, bone_cfg, spec)


def soft_mae_from_images(sct: ImageGrid, ct: ImageGrid, body_cfg: BodySegConfig = BodySegConfig(),
                         bone_cfg: BoneSegConfig = BoneSegConfig(),
                         spec: Optional[NormalizationSpec] = None) -> float:
    """SoftMAE with ground-truth masks from the CT and predicted masks from the sCT."""
    m_body, m_bone = derive_masks(ct, body_cfg, bone_cfg, spec)
    mhat_body, mhat_bone = derive_masks(sct, body_cfg, bone_cfg, spec)
    return soft_mae(sct, ct, m_body, mhat_body, m_bone, mhat_bone, spec)


def dice(p: BinaryMask, q: BinaryMask, both_empty: Optional[float] = 1.0) -> Optional[float]:
    require_same_shape(p, q)
    denom = p.count() + q.count()
    if denom == 0:
        return both_empty
    return 2.0 * int(np.count_nonzero(p.bits & q.bits)) / denom


def _covered(intervals: IntervalField, ct: ImageGrid) -> np.ndarray:
    require_same_shape(intervals, ct)
    if intervals.units is not ct.units:
        raise UnitMismatch(f"Intervals in {intervals.units.value} cannot cover a {ct.units.value} grid")
    return (intervals.lower.values <= ct.values) & (ct.values <= intervals.upper.values)


def marginal_coverage(intervals: IntervalField, ct: ImageGrid, mask: BinaryMask) -> float:
    """Fraction of mask pixels whose ground truth lies in the closed interval."""
    require_same_shape(intervals, mask)
    if mask.is_empty():
        raise EmptyMask("Coverage over an empty mask")
    return float(np.count_nonzero(_covered(intervals, ct)[mask.bits])) / mask.count()


class StratifiedCoverage(NamedTuple):
    error: float
    coverage: List[Optional[float]]
    counts: List[int]


def _stratified_error(covered: np.ndarray, totals: np.ndarray, alpha: float) -> StratifiedCoverage:
    nonempty = totals > 0
    if not nonempty.any():
        raise AllGroupsEmpty("Every intensity group is empty")
    rates = covered[nonempty] / totals[nonempty]
    error = float(np.abs((1.0 - alpha) - rates).mean())
    coverage = [float(c) / t if t else None for c, t in zip(covered, totals)]
    return StratifiedCoverage(error, coverage, [int(t) for t in totals])


def stratified_coverage(intervals: IntervalField, ct: ImageGrid, mask: BinaryMask, bins: StratificationBins,
                        alpha: float, spec: Optional[NormalizationSpec] = None) -> StratifiedCoverage:
    """Per-group coverage and its mean absolute deviation from 1 - alpha over nonempty groups."""
    require_same_shape(intervals, mask)
    if mask.is_empty():
        raise EmptyMask("Stratified coverage over an empty mask")
    groups = bins.assign(ct, spec)[mask.bits]
    hits = _covered(intervals, ct)[mask.bits]
    totals = np.bincount(groups, minlength=bins.n_groups)
    covered = np.bincount(groups[hits], minlength=bins.n_groups)
    return _stratified_error(covered, totals, alpha)


def stratified_coverage_error(intervals: IntervalField, ct: ImageGrid, mask: BinaryMask, bins: StratificationBins,
                              alpha: float, spec: Optional[NormalizationSpec] = None) -> float:
    return stratified_coverage(intervals, ct, mask, bins, alpha, spec).error


def _size_scale(interval_units: Units, size_units: Units, spec: Optional[NormalizationSpec]) -> float:
    if interval_units is size_units:
        return 1.0
    if spec is None:
        raise UnitMismatch(f"Converting interval sizes to {size_units.value} needs a NormalizationSpec")
    if interval_units is Units.NORMALIZED and size_units is Units.HU:
        return spec.half_range
    if interval_units is Units.HU and size_units is Units.NORMALIZED:
        return 1.0 / spec.half_range
    raise UnitMismatch(f"Cannot express {interval_units.value} sizes in {size_units.value}")


def mean_interval_size(intervals: IntervalField, mask: BinaryMask, units: Units = Units.NORMALIZED,
                       spec: Optional[NormalizationSpec] = None) -> float:
    require_same_shape(intervals, mask)
    if mask.is_empty():
        raise EmptyMask("Interval size over an empty mask")
    return float(intervals.sizes()[mask.bits].mean()) * _size_scale(intervals.units, Units(units), spec)


def uncertainty_map(intervals: IntervalField, units: Units = Units.NORMALIZED,
                    spec: Optional[NormalizationSpec] = None) -> ImageGrid:
    """log(size + 1) per pixel, natural log, size in the requested units."""
    sizes = intervals.sizes() * _size_scale(intervals.units, Units(units), spec)
    return ImageGrid(np.log1p(sizes), Units.SCALAR)


@dataclass
class CoverageCounts:
    """Exact coverage tallies of one interval set over an evaluation mask."""
    covered: np.ndarray
    totals: np.ndarray
    size_sum: float = 0.0

    @classmethod
    def measure(cls, intervals: IntervalField, ct: ImageGrid, mask: BinaryMask, bins: StratificationBins,
                spec: Optional[NormalizationSpec], size_units: Units) -> "CoverageCounts":
        groups = bins.assign(ct, spec)[mask.bits]
        hits = _covered(intervals, ct)[mask.bits]
        size = float(intervals.sizes()[mask.bits].sum()) * _size_scale(intervals.units, size_units, spec)
        return cls(np.bincount(groups[hits], minlength=bins.n_groups).astype(np.int64),
                   np.bincount(groups, minlength=bins.n_groups).astype(np.int64), size)

    def merge(self, other: "CoverageCounts") -> "CoverageCounts":
        return CoverageCounts(self.covered + other.covered, self.totals + other.totals, self.size_sum + other.size_sum)

    @property
    def n(self) -> int:
        return int(self.totals.sum())

    def marginal(self) -> Optional[float]:
        return float(self.covered.sum()) / self.n if self.n else None

    def stratified(self, alpha: float) -> Optional[StratifiedCoverage]:
        return _stratified_error(self.covered, self.totals, alpha) if self.n else None

    def mean_size(self) -> Optional[float]:
        return self.size_sum / self.n if self.n else None


@dataclass
class SliceMetrics:
    patient_id: str
    slice_index: Optional[int]
    mae_sum: float = 0.0
    mae_n: int = 0
    soft_sum: float = 0.0
    soft_n: int = 0
    dice_body: Optional[float] = None
    dice_bone: Optional[float] = None
    coverage: Dict[str, CoverageCounts] = field(default_factory=dict)
    n_pixels: int = 0

    @property
    def mae(self) -> Optional[float]:
        return self.mae_sum / self.mae_n if self.mae_n else None

    @property
    def soft_mae(self) -> Optional[float]:
        return self.soft_sum / self.soft_n if self.soft_n else None


def evaluation_mask(ct: ImageGrid, policy: EvalPolicy, body_cfg: BodySegConfig = BodySegConfig(),
                    spec: Optional[NormalizationSpec] = None, truth_body: Optional[BinaryMask] = None) -> BinaryMask:
    """Coverage mask: the ground-truth body (given or extracted) or every pixel."""
    if EvalPolicy(policy) is EvalPolicy.FULL:
        return BinaryMask(np.ones(ct.shape, dtype=bool))
    return truth_body if truth_body is not None else extract_body_mask(ct, body_cfg, spec)


def evaluate_slice(patient_id: str, slice_index: int, sct: ImageGrid, ct: ImageGrid,
                   intervals: Optional[Mapping[str, IntervalField]] = None,
                   bins: StratificationBins = StratificationBins(), spec: NormalizationSpec = NormalizationSpec(),
                   body_cfg: BodySegConfig = BodySegConfig(), bone_cfg: BoneSegConfig = BoneSegConfig(),
                   eval_policy: EvalPolicy = EvalPolicy.BODY, size_units: Units = Units.NORMALIZED,
                   dice_both_empty: Optional[float] = 1.0,
                   truth_body: Optional[BinaryMask] = None) -> SliceMetrics:
    """
    Computes every per-slice tally of the report.

    MAE and Dice are evaluated over the union of the ground-truth and predicted bodies,
    SoftMAE over the soft-tissue mask, and coverage over the evaluation mask.
    `intervals` maps a column label ("Base", "Adj") to the intervals of that method.
    """
    row = SliceMetrics(patient_id, int(slice_index))
    m_body, m_bone = derive_masks(ct, body_cfg, bone_cfg, spec)
    mhat_body, mhat_bone = derive_masks(sct, body_cfg, bone_cfg, spec)
    errors = _abs_error(sct, ct) * _hu_scale(sct.units, spec)

    union = m_body.bits | mhat_body.bits
    row.mae_sum, row.mae_n = float(errors[union].sum()), int(np.count_nonzero(union))
    soft = soft_mask(m_body, mhat_body, m_bone, mhat_bone).bits
    row.soft_sum, row.soft_n = float(errors[soft].sum()), int(np.count_nonzero(soft))
    row.dice_body = dice(m_body, mhat_body, dice_both_empty)
    row.dice_bone = dice(m_bone, mhat_bone, dice_both_empty)

    if intervals:
        mask = evaluation_mask(ct, eval_policy, body_cfg, spec, truth_body if truth_body is not None else m_body)
        if mask.is_empty():
            raise EmptyMask(f"Slice {patient_id}/{slice_index} has an empty evaluation mask")
        row.n_pixels = mask.count()
        for label, field_ in intervals.items():
            row.coverage[label] = CoverageCounts.measure(field_, ct, mask, bins, spec, Units(size_units))
    return row


class MetricsReport:
    """Per-slice rows plus a pooled aggregate, serialized in a fixed column order."""

    def __init__(self, alpha: float, bins: StratificationBins = StratificationBins()):
        self.alpha = alpha
        self.bins = bins
        self.rows: List[SliceMetrics] = []

    def add(self, row: SliceMetrics):
        self.rows.append(row)

    def aggregate(self) -> SliceMetrics:
        total = SliceMetrics(AGGREGATE_ID, None)
        body_scores, bone_scores = [], []
        for row in sorted(self.rows, key=lambda r: (r.patient_id, r.slice_index)):
            total.mae_sum += row.mae_sum
            total.mae_n += row.mae_n
            total.soft_sum += row.soft_sum
            total.soft_n += row.soft_n
            total.n_pixels += row.n_pixels
            if row.dice_body is not None:
                body_scores.append(row.dice_body)
            if row.dice_bone is not None:
                bone_scores.append(row.dice_bone)
            for label, counts in row.coverage.items():
                total.coverage[label] = total.coverage[label].merge(counts) if label in total.coverage else counts
        total.dice_body = float(np.mean(body_scores)) if body_scores else None
        total.dice_bone = float(np.mean(bone_scores)) if bone_scores else None
        return total

    def _record(self, row: SliceMetrics) -> Dict[str, object]:
        record: Dict[str, object] = {
            "patient_id": row.patient_id, "slice_index": row.slice_index,
            "MAE": row.mae, "SoftMAE": row.soft_mae, "DiceBody": row.dice_body, "DiceBone": row.dice_bone,
        }
        strat = {label: row.coverage[label].stratified(self.alpha) if label in row.coverage else None
                 for label in (BASE, ADJ)}
        for label in (BASE, ADJ):
            counts = row.coverage.get(label)
            record[f"M-Cov-{label}"] = counts.marginal() if counts else None
        for label in (BASE, ADJ):
            record[f"P-Cov-{label}"] = strat[label].error if strat[label] else None
        for label in (BASE, ADJ):
            counts = row.coverage.get(label)
            record[f"IntSize-{label}"] = counts.mean_size() if counts else None
        for label in (BASE, ADJ):
            for g in range(self.bins.n_groups):
                record[f"Cov-{label}-g{g}"] = strat[label].coverage[g] if strat[label] else None
        record["NPixels"] = row.n_pixels
        return record

    def columns(self) -> List[str]:
        groups = [f"Cov-{label}-g{g}" for label in (BASE, ADJ) for g in range(self.bins.n_groups)]
        return REPORT_COLUMNS + groups + ["NPixels"]

    def to_frame(self, include_aggregate: bool = True) -> pd.DataFrame:
        rows = sorted(self.rows, key=lambda r: (r.patient_id, r.slice_index))
        if include_aggregate:
            rows = rows + [self.aggregate()]
        frame = pd.DataFrame([self._record(r) for r in rows], columns=self.columns())
        frame["slice_index"] = frame["slice_index"].astype("Int64")
        frame["NPixels"] = frame["NPixels"].astype("int64")
        return frame

    def write_csv(self, path: str) -> pd.DataFrame:
        frame = self.to_frame()
        try:
            frame.to_csv(path, index=False)
        except OSError as e:
            logger.error(f"Failed to write metrics report to {path}: {e}")
            raise
        logger.info(f"Wrote metrics report with {len(self.rows)} slices to {path}")
        return frame
