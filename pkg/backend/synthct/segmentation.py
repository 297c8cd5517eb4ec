import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.morphology import disk

from backend.synthct.core import BinaryMask, ImageGrid, NormalizationSpec, SegmentationPrior, Units, require_same_shape
from backend.synthct.errors import EmptyBody, InvalidConfig, InvalidInputError, UnitMismatch

logger = logging.getLogger(__name__)

_KERNEL_PATTERN = re.compile(r"^\s*(cross3|square3|disk\(\s*(\d+)\s*\))\s*$")


class KernelShape(str, Enum):
    CROSS3 = "cross3"
    SQUARE3 = "square3"
    DISK = "disk"


@dataclass(frozen=True)
class MorphKernel:
    shape: KernelShape = KernelShape.DISK
    radius: int = 1

    def __post_init__(self):
        shape = KernelShape(self.shape)
        object.__setattr__(self, "shape", shape)
        if shape is KernelShape.DISK and int(self.radius) < 1:
            raise InvalidConfig(f"Disk kernel radius must be >= 1, got {self.radius}")

    @classmethod
    def parse(cls, text: str) -> "MorphKernel":
        """Parses 'cross3', 'square3' or 'disk(r)'."""
        match = _KERNEL_PATTERN.match(str(text))
        if not match:
            raise InvalidConfig(f"Unrecognized morphology kernel '{text}'")
        if match.group(2) is not None:
            return cls(KernelShape.DISK, int(match.group(2)))
        return cls(KernelShape(match.group(1)), 1)

    def __str__(self) -> str:
        return f"disk({self.radius})" if self.shape is KernelShape.DISK else self.shape.value

    def footprint(self) -> np.ndarray:
        if self.shape is KernelShape.CROSS3:
            return ndimage.generate_binary_structure(2, 1)
        if self.shape is KernelShape.SQUARE3:
            return ndimage.generate_binary_structure(2, 2)
        return disk(int(self.radius)).astype(bool)


@dataclass(frozen=True)
class BodySegConfig:
    threshold_hu: float = -300.0
    min_component_frac: float = 0.01
    closing_kernel: MorphKernel = field(default_factory=lambda: MorphKernel(KernelShape.DISK, 3))

    def __post_init__(self):
        if not 0.0 < self.min_component_frac < 1.0:
            raise InvalidConfig(f"min_component_frac must be in (0, 1), got {self.min_component_frac}")


@dataclass(frozen=True)
class BoneSegConfig:
    high_hu: float = 350.0
    medium_hu: float = 150.0
    low_hu: float = 100.0
    bridge_kernel: MorphKernel = field(default_factory=lambda: MorphKernel(KernelShape.DISK, 2))
    include_low_connected: bool = True
    min_component_px: int = 20

    def __post_init__(self):
        if not self.low_hu < self.medium_hu < self.high_hu:
            raise InvalidConfig(
                f"Bone thresholds must satisfy low < medium < high, got {self.low_hu}/{self.medium_hu}/{self.high_hu}")
        if self.min_component_px < 0:
            raise InvalidConfig("min_component_px must be >= 0")


@dataclass(frozen=True, eq=False)
class ComponentLabels:
    """Label grid (0 = background, 1..n in raster-scan order) and exact component sizes."""
    labels: np.ndarray
    sizes: np.ndarray

    @property
    def count(self) -> int:
        return int(self.sizes.size)


def threshold(grid: ImageGrid, lo: float, hi: float, threshold_units: Optional[Units] = None,
              spec: Optional[NormalizationSpec] = None) -> BinaryMask:
    """
    Marks pixels with lo <= value <= hi.

    Thresholds are in the grid's units unless `threshold_units` says otherwise, in which
    case they are converted through `spec`. Infinite thresholds act as open bounds.
    """
    if lo > hi:
        raise InvalidInputError(f"threshold needs lo <= hi, got {lo} > {hi}")
    units = grid.units if threshold_units is None else Units(threshold_units)
    if units is not grid.units:
        if spec is None:
            raise UnitMismatch(f"Thresholds in {units.value} need a NormalizationSpec for a {grid.units.value} grid")
        if units is Units.HU and grid.units is Units.NORMALIZED:
            lo, hi = spec.hu_to_normalized(lo), spec.hu_to_normalized(hi)
        elif units is Units.NORMALIZED and grid.units is Units.HU:
            lo, hi = spec.normalized_to_hu(lo), spec.normalized_to_hu(hi)
        else:
            raise UnitMismatch(f"Cannot compare {units.value} thresholds with a {grid.units.value} grid")
    values = grid.values
    return BinaryMask((values >= lo) & (values <= hi))


def dilate(mask: BinaryMask, k: MorphKernel) -> BinaryMask:
    return BinaryMask(ndimage.binary_dilation(mask.bits, structure=k.footprint()))


def erode(mask: BinaryMask, k: MorphKernel) -> BinaryMask:
    # Out-of-image neighbours count as background.
    return BinaryMask(ndimage.binary_erosion(mask.bits, structure=k.footprint(), border_value=0))


def fill_holes(mask: BinaryMask) -> BinaryMask:
    # Default structure is the 4-connected cross, applied to the background.
    return BinaryMask(ndimage.binary_fill_holes(mask.bits))


def connected_components(mask: BinaryMask, connectivity: int = 8) -> ComponentLabels:
    """
    Labels foreground components deterministically.

    Labels follow raster-scan order of each component's first pixel, so label 1 is the
    component encountered first.

    Args:
        mask (BinaryMask): Input mask.
        connectivity (int): 4 or 8.

    Returns:
        ComponentLabels: int32 label grid and the size of each label 1..n.
    """
    if connectivity not in (4, 8):
        raise InvalidInputError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(mask.bits, structure=structure)
    labels = labels.astype(np.int32)
    if n:
        flat = labels.ravel()
        nonzero = np.flatnonzero(flat)
        found, first = np.unique(flat[nonzero], return_index=True)
        order = found[np.argsort(nonzero[first], kind="stable")]
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[order] = np.arange(1, n + 1, dtype=np.int32)
        labels = remap[labels]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return ComponentLabels(labels, sizes)


def _closing(bits: np.ndarray, k: MorphKernel) -> np.ndarray:
    """Closing on a zero-padded canvas so the result never loses input pixels at the border."""
    fp = k.footprint()
    pad = max(fp.shape)
    canvas = np.pad(bits, pad, mode="constant", constant_values=False)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(canvas, structure=fp), structure=fp, border_value=0)
    return closed[pad:-pad, pad:-pad]


def _largest_component(bits: np.ndarray) -> np.ndarray:
    cc = connected_components(BinaryMask(bits), 8)
    if cc.count == 0:
        return bits
    # argmax returns the first maximum, i.e. the earliest component in raster order.
    return cc.labels == int(np.argmax(cc.sizes)) + 1


def extract_body_mask(pct: ImageGrid, cfg: BodySegConfig = BodySegConfig(),
                      spec: Optional[NormalizationSpec] = None) -> BinaryMask:
    """
    Extracts the body outline from a planning CT.

    threshold(>= threshold_hu) -> drop small 8-connected components -> keep the largest ->
    fill holes -> closing. Raises EmptyBody when no component passes the size filter.
    """
    height, width = pct.shape
    candidate = threshold(pct, cfg.threshold_hu, np.inf, threshold_units=Units.HU, spec=spec)
    cc = connected_components(candidate, 8)
    keep = np.flatnonzero(cc.sizes >= cfg.min_component_frac * height * width)
    if keep.size == 0:
        raise EmptyBody(f"No body component of at least {cfg.min_component_frac:.3f} of the image area")
    largest = int(keep[np.argmax(cc.sizes[keep])]) + 1
    body = ndimage.binary_fill_holes(cc.labels == largest)
    body = _closing(body, cfg.closing_kernel)
    body = _largest_component(ndimage.binary_fill_holes(body))
    return BinaryMask(body)


def extract_bone_mask(pct: ImageGrid, body: BinaryMask, cfg: BoneSegConfig = BoneSegConfig(),
                      spec: Optional[NormalizationSpec] = None) -> BinaryMask:
    """
    Multi-threshold bone classification restricted to the body.

    High-intensity pixels seed the mask; medium pixels join when they fall inside the
    dilated high mask, which bridges gaps between cortical fragments. Low pixels joined
    to that result through 8-connected chains are added when include_low_connected is set.
    Components smaller than min_component_px are removed.
    """
    require_same_shape(pct, body)
    inside = body.bits

    def at_least(hu: float) -> np.ndarray:
        return threshold(pct, hu, np.inf, threshold_units=Units.HU, spec=spec).bits

    ge_high, ge_medium, ge_low = at_least(cfg.high_hu), at_least(cfg.medium_hu), at_least(cfg.low_hu)
    high = ge_high & inside
    medium = ge_medium & ~ge_high & inside
    low = ge_low & ~ge_medium & inside

    bone = high | (medium & dilate(BinaryMask(high), cfg.bridge_kernel).bits)
    if cfg.include_low_connected and bone.any() and low.any():
        cc = connected_components(BinaryMask(bone | low), 8)
        touching = np.unique(cc.labels[bone])
        bone = bone | (low & np.isin(cc.labels, touching[touching > 0]))
    if cfg.min_component_px > 1 and bone.any():
        cc = connected_components(BinaryMask(bone), 8)
        small = np.flatnonzero(cc.sizes < cfg.min_component_px) + 1
        bone = bone & ~np.isin(cc.labels, small)
    return BinaryMask(bone & inside)


def build_prior(pct: ImageGrid, body_cfg: BodySegConfig = BodySegConfig(), bone_cfg: BoneSegConfig = BoneSegConfig(),
                spec: Optional[NormalizationSpec] = None) -> SegmentationPrior:
    """Extracts the segmentation prior (bone, body) from a planning CT."""
    body = extract_body_mask(pct, body_cfg, spec)
    bone = extract_bone_mask(pct, body, bone_cfg, spec)
    logger.debug(f"Built prior: body={body.count()} px, bone={bone.count()} px")
    return SegmentationPrior(bone=bone, body=body)
