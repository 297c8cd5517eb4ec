import hashlib
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from backend.synthct.errors import (
    BadRole,
    CropTooLarge,
    DuplicateRecord,
    EmptyManifest,
    InvalidConfig,
    InvalidGrid,
    ManifestError,
    MissingPair,
    PriorInconsistent,
    ShapeMismatch,
    UnitMismatch,
)

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1

AIR_HU = -1000.0


class Units(str, Enum):
    NORMALIZED = "Normalized"
    HU = "HU"
    # Derived, unbounded fields (uncertainty maps). Never written to volumes.
    SCALAR = "Scalar"


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """
    One H×W scalar field (CT, CBCT, sCT or a bound surface).

    Values are stored as an immutable float32 array in row-major order. Grids in
    normalized units are checked against [-1, 1] unless `strict` is False, which is
    reserved for unclipped interval bounds.
    """
    values: np.ndarray
    units: Units = Units.HU
    strict: bool = True

    def __post_init__(self):
        units = Units(self.units)
        arr = _frozen(self.values, np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidGrid(f"Expected a non-empty 2D grid, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidGrid("Grid contains NaN or Inf values")
        if units is Units.NORMALIZED and self.strict and (arr.min() < -1.0 or arr.max() > 1.0):
            raise InvalidGrid(f"Normalized grid outside [-1, 1]: [{arr.min()}, {arr.max()}]")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "units", units)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "ImageGrid":
        return ImageGrid(values, self.units, self.strict)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A {0,1} grid stored as an immutable boolean array."""
    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.dtype != bool:
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise InvalidGrid("Mask values must be 0 or 1")
        arr = _frozen(arr, bool)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidGrid(f"Expected a non-empty 2D mask, got shape {arr.shape}")
        object.__setattr__(self, "bits", arr)

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()


@dataclass(frozen=True, eq=False)
class SegmentationPrior:
    """The prior M = (bone, body); bone must lie inside body."""
    bone: BinaryMask
    body: BinaryMask

    def __post_init__(self):
        if self.bone.shape != self.body.shape:
            raise ShapeMismatch(f"Bone mask {self.bone.shape} and body mask {self.body.shape} differ")
        if (self.bone.bits & ~self.body.bits).any():
            raise PriorInconsistent("Bone mask extends outside the body mask")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.body.shape


@dataclass(frozen=True)
class NormalizationSpec:
    """HU window mapped linearly onto [-1, 1]."""
    hu_min: float = -1000.0
    hu_max: float = 2000.0

    def __post_init__(self):
        if not (np.isfinite(self.hu_min) and np.isfinite(self.hu_max)) or self.hu_min >= self.hu_max:
            raise InvalidConfig(f"NormalizationSpec needs hu_min < hu_max, got ({self.hu_min}, {self.hu_max})")

    @property
    def half_range(self) -> float:
        return (self.hu_max - self.hu_min) / 2.0

    def hu_to_normalized(self, hu: float) -> float:
        """Maps a scalar HU value without clamping (infinite thresholds stay infinite)."""
        return 2.0 * (hu - self.hu_min) / (self.hu_max - self.hu_min) - 1.0

    def normalized_to_hu(self, value: float) -> float:
        return self.hu_min + (value + 1.0) * self.half_range


def normalize(grid: ImageGrid, spec: NormalizationSpec) -> ImageGrid:
    """
    Min-max normalizes an HU grid onto [-1, 1], clamping out-of-window values.

    Args:
        grid (ImageGrid): Grid in HU.
        spec (NormalizationSpec): The HU window.

    Returns:
        ImageGrid: Grid in normalized units, same shape.
    """
    if grid.units is not Units.HU:
        raise UnitMismatch(f"normalize expects an HU grid, got {grid.units.value}")
    v = grid.values.astype(np.float64)
    out = 2.0 * (v - spec.hu_min) / (spec.hu_max - spec.hu_min) - 1.0
    return ImageGrid(np.clip(out, -1.0, 1.0), Units.NORMALIZED)


def denormalize(grid: ImageGrid, spec: NormalizationSpec) -> ImageGrid:
    """Inverse of normalize on in-window values."""
    if grid.units is not Units.NORMALIZED:
        raise UnitMismatch(f"denormalize expects a normalized grid, got {grid.units.value}")
    v = grid.values.astype(np.float64)
    return ImageGrid(spec.hu_min + (v + 1.0) * spec.half_range, Units.HU)


def as_hu(grid: ImageGrid, spec: Optional[NormalizationSpec]) -> ImageGrid:
    """Returns the grid in HU, denormalizing when needed."""
    if grid.units is Units.HU:
        return grid
    if grid.units is Units.NORMALIZED and spec is not None:
        return denormalize(grid, spec)
    raise UnitMismatch(f"Cannot express a {grid.units.value} grid in HU without a NormalizationSpec")


def as_normalized(grid: ImageGrid, spec: Optional[NormalizationSpec]) -> ImageGrid:
    if grid.units is Units.NORMALIZED:
        return grid
    if grid.units is Units.HU and spec is not None:
        return normalize(grid, spec)
    raise UnitMismatch(f"Cannot normalize a {grid.units.value} grid without a NormalizationSpec")


def crop_center(item: Union[ImageGrid, BinaryMask], out_h: int, out_w: int) -> Union[ImageGrid, BinaryMask]:
    """
    Returns the centered out_h×out_w window of a grid or mask.

    The offset on each axis is floor((dim - out) / 2), so grids and masks of the same
    shape are cropped identically.
    """
    h, w = item.shape
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w:
        raise CropTooLarge(f"Cannot crop {h}x{w} to {out_h}x{out_w}")
    top = (h - out_h) // 2
    left = (w - out_w) // 2
    if isinstance(item, BinaryMask):
        return BinaryMask(item.bits[top:top + out_h, left:left + out_w])
    return item.with_values(item.values[top:top + out_h, left:left + out_w])


def require_same_shape(*items) -> Tuple[int, int]:
    shapes = {tuple(item.shape) for item in items}
    if len(shapes) != 1:
        raise ShapeMismatch(f"Shape mismatch: {sorted(shapes)}")
    return shapes.pop()


class Role(str, Enum):
    CBCT = "cbct"
    CT = "ct"
    PCT = "pct"
    SCT = "sct"
    MASK_BODY = "mask_body"
    MASK_BONE = "mask_bone"
    SAMPLE = "sample"
    TRUTH_BODY = "truth_body"
    TRUTH_BONE = "truth_bone"
    LOWER = "lower"
    UPPER = "upper"


RecordKey = Tuple[str, int, str, int]


@dataclass(frozen=True)
class SliceRecord:
    patient_id: str
    slice_index: int
    role: Role
    path: str
    sample_index: Optional[int] = None

    def __post_init__(self):
        try:
            role = Role(self.role)
        except ValueError:
            raise BadRole(f"Unknown role '{self.role}' for {self.patient_id}/{self.slice_index}")
        object.__setattr__(self, "role", role)
        if not self.patient_id:
            raise ManifestError("Empty patient_id")
        if int(self.slice_index) < 0:
            raise ManifestError(f"Negative slice_index {self.slice_index} for {self.patient_id}")
        if role is Role.SAMPLE and self.sample_index is None:
            raise ManifestError(f"Sample record {self.patient_id}/{self.slice_index} has no sample_index")
        if role is not Role.SAMPLE and self.sample_index is not None:
            raise ManifestError(f"Only sample records carry a sample_index ({role.value})")

    @property
    def key(self) -> RecordKey:
        return (self.patient_id, int(self.slice_index), self.role.value,
                -1 if self.sample_index is None else int(self.sample_index))


@dataclass
class DatasetManifest:
    """
    Patient-grouped records linking slices to files on disk.

    Records are kept sorted by (patient_id, slice_index, role, sample_index). Relative
    record paths resolve against `base_dir`, the directory of the manifest file.
    """
    records: List[SliceRecord] = field(default_factory=list)
    base_dir: str = ""

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.key)
        self._index: Dict[RecordKey, SliceRecord] = {}
        for record in self.records:
            if record.key in self._index:
                raise DuplicateRecord(f"Duplicate manifest record {record.key}")
            self._index[record.key] = record

    def validate(self, require_pairs: bool = True) -> "DatasetManifest":
        if not self.records:
            raise EmptyManifest("Manifest has no records")
        if require_pairs:
            for record in self.records:
                if record.role is Role.CBCT and self.find(record.patient_id, record.slice_index, Role.CT) is None:
                    raise MissingPair(f"cbct record {record.patient_id}/{record.slice_index} has no matching ct")
        return self

    def patients(self) -> List[str]:
        return sorted({r.patient_id for r in self.records})

    def slice_keys(self, role: Optional[Role] = None) -> List[Tuple[str, int]]:
        keys = {(r.patient_id, int(r.slice_index)) for r in self.records if role is None or r.role is role}
        return sorted(keys)

    def find(self, patient_id: str, slice_index: int, role: Role,
             sample_index: Optional[int] = None) -> Optional[SliceRecord]:
        key = (patient_id, int(slice_index), Role(role).value, -1 if sample_index is None else int(sample_index))
        return self._index.get(key)

    def samples(self, patient_id: str, slice_index: int) -> List[SliceRecord]:
        return [r for r in self.records
                if r.patient_id == patient_id and r.slice_index == slice_index and r.role is Role.SAMPLE]

    def resolve(self, record: SliceRecord) -> str:
        if os.path.isabs(record.path) or not self.base_dir:
            return record.path
        return os.path.join(self.base_dir, record.path)

    def subset(self, patients: Iterable[str]) -> "DatasetManifest":
        keep = set(patients)
        return DatasetManifest([r for r in self.records if r.patient_id in keep], self.base_dir)

    def extended(self, extra: Sequence[SliceRecord]) -> "DatasetManifest":
        return DatasetManifest(list(self.records) + list(extra), self.base_dir)

    def slices_per_patient(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for patient_id, _ in self.slice_keys():
            counts[patient_id] = counts.get(patient_id, 0) + 1
        return counts


def derive_seed(seed: int, patient_id: str, slice_index: int) -> int:
    """
    Derives a per-slice seed as seed XOR hash(patient_id, slice_index).

    Generation order therefore never changes outputs. slice_index -1 is used for the
    patient-level anatomy seed.
    """
    digest = hashlib.sha256(f"{patient_id}:{slice_index}".encode("utf-8")).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], "little")) & _SEED_MASK


def split_patients(patient_ids: Sequence[str], fractions: Sequence[float],
                   seed: int) -> Tuple[List[str], List[str], List[str]]:
    """
    Splits patients into train / calibration / test groups.

    Args:
        patient_ids (Sequence[str]): Distinct patient identifiers.
        fractions (Sequence[float]): Three nonnegative fractions summing to 1.
        seed (int): Seed of the permutation.

    Returns:
        Tuple[List[str], List[str], List[str]]: Sorted train, calibration and test ids.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidConfig(f"Split fractions must be three nonnegative values summing to 1, got {fractions}")
    ids = sorted(set(patient_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(fractions[0] * len(ids)))
    n_cal = min(int(round(fractions[1] * len(ids))), len(ids) - n_train)
    train = sorted(shuffled[:n_train])
    cal = sorted(shuffled[n_train:n_train + n_cal])
    test = sorted(shuffled[n_train + n_cal:])
    logger.info(f"Split {len(ids)} patients into {len(train)} train / {len(cal)} calibration / {len(test)} test")
    return train, cal, test
