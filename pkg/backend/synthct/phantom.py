import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from backend.synthct.core import AIR_HU, BinaryMask, ImageGrid, SegmentationPrior, Units
from backend.synthct.errors import InvalidConfig, InvalidInputError, SpecInfeasible

logger = logging.getLogger(__name__)

# Bounded retries when placing structures inside the body.
MAX_PLACEMENT_ATTEMPTS = 200
MIN_BONE_RADIUS_PX = 4.0
MAX_CT_HU = 3071.0
STREAK_WIDTH_PX = 1.5

# Magnitudes at level 4: rotation in degrees, translation and scale as fractions.
MAX_ROTATION_DEG = 15.0
MAX_TRANSLATION_FRAC = 0.15
MAX_SCALE_FRAC = 0.15


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 128
    width: int = 128
    body_axes: Tuple[float, float] = (0.72, 0.86)
    n_bone_rings: int = 2
    bone_hu_range: Tuple[float, float] = (300.0, 1200.0)
    soft_hu_range: Tuple[float, float] = (-80.0, 80.0)
    n_air_pockets: int = 2
    texture_scale: float = 30.0
    n_organs: int = 3
    fat_rim_frac: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "body_axes", tuple(float(a) for a in self.body_axes))
        object.__setattr__(self, "bone_hu_range", tuple(float(v) for v in self.bone_hu_range))
        object.__setattr__(self, "soft_hu_range", tuple(float(v) for v in self.soft_hu_range))
        if len(self.body_axes) != 2 or not all(0.0 < a < 1.0 for a in self.body_axes):
            raise InvalidConfig(f"body_axes must be two fractions in (0, 1), got {self.body_axes}")
        for name in ("bone_hu_range", "soft_hu_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InvalidConfig(f"{name} must be ordered, got ({lo}, {hi})")
        if min(self.n_bone_rings, self.n_air_pockets, self.n_organs) < 0 or self.texture_scale < 0:
            raise InvalidConfig("Structure counts and texture_scale must be nonnegative")
        if not 0.0 <= self.fat_rim_frac < 0.5:
            raise InvalidConfig(f"fat_rim_frac must be in [0, 0.5), got {self.fat_rim_frac}")


@dataclass(frozen=True)
class DegradationSpec:
    noise_sigma_hu: float = 25.0
    cupping_amp_hu: float = 80.0
    n_streaks: int = 4
    streak_amp_hu: float = 60.0
    fov_radius_frac: float = 0.95
    misreg_max_px: int = 2

    def __post_init__(self):
        if min(self.noise_sigma_hu, self.cupping_amp_hu, self.streak_amp_hu, self.n_streaks, self.misreg_max_px) < 0:
            raise InvalidConfig("Degradation amplitudes and counts must be nonnegative")
        if not 0.0 < self.fov_radius_frac <= 1.0:
            raise InvalidConfig(f"fov_radius_frac must be in (0, 1], got {self.fov_radius_frac}")


@dataclass(frozen=True)
class PerturbationLevel:
    level: int = 0

    def __post_init__(self):
        if isinstance(self.level, bool) or int(self.level) != self.level or not 0 <= int(self.level) <= 4:
            raise InvalidInputError(f"Perturbation level must be an integer in 0..4, got {self.level}")
        object.__setattr__(self, "level", int(self.level))

    @property
    def magnitudes(self) -> Tuple[float, float, float]:
        f = self.level / 4.0
        return f * MAX_ROTATION_DEG, f * MAX_TRANSLATION_FRAC, f * MAX_SCALE_FRAC


@dataclass(frozen=True)
class AffineDraw:
    rotation_deg: float
    shift_y_frac: float
    shift_x_frac: float
    scale: float


class Phantom(NamedTuple):
    ct: ImageGrid
    body_truth: BinaryMask
    bone_truth: BinaryMask


@dataclass(frozen=True)
class _Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float = 0.0

    def rasterize(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        dy, dx = yy - self.cy, xx - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = dy * c + dx * s
        v = -dy * s + dx * c
        return (u / self.ry) ** 2 + (v / self.rx) ** 2 <= 1.0

    def point(self, rho: float, phi: float) -> Tuple[float, float]:
        """Point at fractional radius rho and polar angle phi in the ellipse frame."""
        u, v = rho * self.ry * math.cos(phi), rho * self.rx * math.sin(phi)
        c, s = math.cos(self.angle), math.sin(self.angle)
        return self.cy + u * c - v * s, self.cx + u * s + v * c

    def shrunk(self, margin: float) -> "_Ellipse":
        return _Ellipse(self.cy, self.cx, max(self.ry - margin, 0.5), max(self.rx - margin, 0.5), self.angle)


def _disk(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, radius: float) -> np.ndarray:
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _place(rng: np.random.Generator, body: _Ellipse, body_px: np.ndarray, occupied: np.ndarray,
           yy: np.ndarray, xx: np.ndarray, radius: float, margin: float,
           rho_range: Tuple[float, float]) -> Optional[Tuple[float, float]]:
    """Finds a center whose disk (plus margin) lies inside the body and clear of occupied pixels."""
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        cy, cx = body.point(rng.uniform(*rho_range), rng.uniform(0.0, 2.0 * math.pi))
        footprint = _disk(yy, xx, cy, cx, radius + margin)
        if not (footprint & ~body_px).any() and not (footprint & occupied).any():
            return cy, cx
    return None


def generate_phantom(spec: PhantomSpec, seed: int, patient_seed: Optional[int] = None,
                     slice_pos: float = 0.0) -> Phantom:
    """
    Generates one procedural pelvis-like CT slice with analytic truth masks.

    Anatomy (body ellipse, bone and pocket layout, organs) is drawn from `patient_seed`
    when given, so slices of one patient share it; texture is drawn from `seed`.
    `slice_pos` in [0, 1] smoothly modulates body axes and bone radii along the volume.

    Args:
        spec (PhantomSpec): Geometry and intensity ranges.
        seed (int): Slice-level seed.
        patient_seed (Optional[int]): Anatomy seed, defaults to `seed`.
        slice_pos (float): Position of the slice within the patient volume.

    Returns:
        Phantom: (ct in HU, body_truth, bone_truth).
    """
    if spec.height < 64 or spec.width < 64:
        raise InvalidInputError(f"Phantom dimensions must be at least 64x64, got {spec.height}x{spec.width}")
    anatomy = np.random.default_rng(seed if patient_seed is None else patient_seed)
    texture_rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    phase = anatomy.uniform(0.0, 2.0 * math.pi)
    modulation = 1.0 + 0.04 * math.sin(math.pi * slice_pos + phase)
    body = _Ellipse(
        cy=(h - 1) / 2.0 + anatomy.uniform(-0.02, 0.02) * h,
        cx=(w - 1) / 2.0 + anatomy.uniform(-0.02, 0.02) * w,
        ry=spec.body_axes[0] * h / 2.0 * anatomy.uniform(0.95, 1.05) * modulation,
        rx=spec.body_axes[1] * w / 2.0 * anatomy.uniform(0.95, 1.05) * modulation,
        angle=anatomy.uniform(-0.15, 0.15),
    )
    body_px = body.rasterize(yy, xx)
    short_axis = min(body.ry, body.rx)
    rim_px = max(spec.fat_rim_frac * short_axis, 1.0) if spec.fat_rim_frac > 0 else 0.0

    soft_lo, soft_hi = spec.soft_hu_range
    soft_w = soft_hi - soft_lo
    ct = np.full((h, w), AIR_HU, dtype=np.float64)
    ct[body_px] = (soft_lo + soft_hi) / 2.0 + anatomy.uniform(-0.1, 0.1) * soft_w
    if rim_px > 0:
        rim = body_px & ~body.shrunk(rim_px).rasterize(yy, xx)
        ct[rim] = soft_lo + anatomy.uniform(0.0, 0.1) * soft_w
    for _ in range(spec.n_organs):
        oy, ox = body.point(anatomy.uniform(0.0, 0.5), anatomy.uniform(0.0, 2.0 * math.pi))
        organ = _Ellipse(oy, ox, anatomy.uniform(0.15, 0.3) * body.ry, anatomy.uniform(0.15, 0.3) * body.rx,
                         anatomy.uniform(0.0, math.pi))
        organ_px = organ.rasterize(yy, xx) & body.shrunk(rim_px).rasterize(yy, xx)
        ct[organ_px] = anatomy.uniform(soft_lo + 0.4 * soft_w, soft_hi - 0.25 * soft_w)

    texture = np.zeros((h, w))
    if spec.texture_scale > 0:
        field = ndimage.gaussian_filter(texture_rng.standard_normal((h, w)), sigma=max(h, w) / 12.0, mode="reflect")
        peak = np.abs(field).max()
        if peak > 0:
            texture = field / peak * spec.texture_scale
    ct[body_px] += texture[body_px]

    bone_lo, bone_hi = spec.bone_hu_range
    bone_w = bone_hi - bone_lo
    bone_px = np.zeros((h, w), dtype=bool)
    margin = rim_px + 2.0
    for ring in range(spec.n_bone_rings):
        radius = max(anatomy.uniform(0.14, 0.2) * short_axis, MIN_BONE_RADIUS_PX)
        radius *= 1.0 + 0.05 * math.sin(math.pi * slice_pos + phase + ring)
        center = _place(anatomy, body, body_px, ndimage.binary_dilation(bone_px, iterations=2),
                        yy, xx, radius, margin, (0.15, 0.7))
        if center is None:
            raise SpecInfeasible(f"Bone ring {ring + 1} of {spec.n_bone_rings} (radius {radius:.1f} px) does not fit")
        outer = _disk(yy, xx, center[0], center[1], radius)
        core = _disk(yy, xx, center[0], center[1], 0.55 * radius)
        ct[outer] = anatomy.uniform(bone_lo + 0.55 * bone_w, bone_hi - 0.05 * bone_w)
        ct[core] = anatomy.uniform(bone_lo + 0.2 * bone_w, bone_lo + 0.35 * bone_w)
        ct[outer] += 0.5 * texture[outer]
        bone_px |= outer
    ct[bone_px] = np.clip(ct[bone_px], bone_lo, bone_hi)

    occupied = ndimage.binary_dilation(bone_px, iterations=2)
    for pocket in range(spec.n_air_pockets):
        radius = max(anatomy.uniform(0.05, 0.09) * short_axis, 1.5)
        center = _place(anatomy, body, body_px, occupied, yy, xx, radius, margin, (0.0, 0.7))
        if center is None:
            logger.debug(f"Skipping air pocket {pocket + 1}: no free position")
            continue
        pocket_px = _disk(yy, xx, center[0], center[1], radius)
        ct[pocket_px] = AIR_HU
        occupied |= pocket_px

    return Phantom(ImageGrid(ct, Units.HU), BinaryMask(body_px), BinaryMask(bone_px))


def degrade_to_cbct(ct: ImageGrid, spec: DegradationSpec, seed: int) -> ImageGrid:
    """
    Simulates CBCT artefacts on a clean CT.

    Applies a rigid integer misregistration, radial cupping, linear streaks and Gaussian
    noise, clips to the CT range, and finally blanks everything outside the circular FOV.
    Disabled stages are skipped entirely, so the all-zero configuration returns the input.
    """
    rng = np.random.default_rng(seed)
    values = ct.values.astype(np.float64)
    h, w = values.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    radius = np.hypot(yy - cy, xx - cx)
    half_diagonal = max(math.hypot(cy, cx), 1.0)
    changed = False

    shift_px = int(spec.misreg_max_px)
    if shift_px > 0:
        dy, dx = (int(v) for v in rng.integers(-shift_px, shift_px + 1, size=2))
        if dy or dx:
            values = ndimage.shift(values, (dy, dx), order=0, mode="constant", cval=AIR_HU)
            changed = True
    if spec.cupping_amp_hu > 0:
        values = values - spec.cupping_amp_hu * (1.0 - (radius / half_diagonal) ** 2)
        changed = True
    if spec.streak_amp_hu > 0:
        for _ in range(spec.n_streaks):
            theta = rng.uniform(0.0, math.pi)
            offset = rng.uniform(-0.5, 0.5) * min(h, w) / 2.0
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            distance = (xx - cx) * math.sin(theta) - (yy - cy) * math.cos(theta) - offset
            values = values + sign * spec.streak_amp_hu * np.exp(-distance ** 2 / (2.0 * STREAK_WIDTH_PX ** 2))
            changed = True
    if spec.noise_sigma_hu > 0:
        values = values + rng.normal(0.0, spec.noise_sigma_hu, size=(h, w))
        changed = True
    if changed:
        values = np.clip(values, AIR_HU, MAX_CT_HU)
    if spec.fov_radius_frac < 1.0:
        values[radius > spec.fov_radius_frac * half_diagonal] = AIR_HU
    return ImageGrid(values, Units.HU)


def sample_affine(level: Union[PerturbationLevel, int], seed: int) -> AffineDraw:
    """
    Draws the affine perturbation for a level.

    One U(-1, 1) vector is drawn per seed and scaled by the level magnitudes, so each
    parameter is uniform on its stated range and the same seed yields nested
    perturbations across levels.
    """
    lvl = level if isinstance(level, PerturbationLevel) else PerturbationLevel(level)
    u = np.random.default_rng(seed).uniform(-1.0, 1.0, size=4)
    m_r, m_t, m_s = lvl.magnitudes
    return AffineDraw(float(u[0] * m_r), float(u[1] * m_t), float(u[2] * m_t), float(1.0 + u[3] * m_s))


def _resample(values: np.ndarray, draw: AffineDraw, order: int, cval: float) -> np.ndarray:
    h, w = values.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([draw.shift_y_frac * h, draw.shift_x_frac * w])
    theta = math.radians(draw.rotation_deg)
    # Inverse map: input = R(-theta) (output - center - shift) / scale + center.
    inverse = np.array([[math.cos(theta), math.sin(theta)],
                        [-math.sin(theta), math.cos(theta)]]) / draw.scale
    offset = center - inverse @ (center + shift)
    return ndimage.affine_transform(values, inverse, offset=offset, output_shape=(h, w),
                                    order=order, mode="constant", cval=cval)


def apply_affine_perturbation(item: Union[BinaryMask, ImageGrid], level: Union[PerturbationLevel, int],
                              seed: int) -> Union[BinaryMask, ImageGrid]:
    """
    Applies a random rotation/translation/scaling about the image center.

    Masks use nearest-neighbour resampling with background 0; grids use bilinear
    resampling with air as background. Level 0 returns the input unchanged.
    """
    lvl = level if isinstance(level, PerturbationLevel) else PerturbationLevel(level)
    if lvl.level == 0:
        return item
    draw = sample_affine(lvl, seed)
    if isinstance(item, BinaryMask):
        return BinaryMask(_resample(item.bits.astype(np.float32), draw, 0, 0.0) > 0.5)
    background = {Units.HU: AIR_HU, Units.NORMALIZED: -1.0}.get(item.units, 0.0)
    return item.with_values(_resample(item.values.astype(np.float64), draw, 1, background))


def perturb_prior(prior: SegmentationPrior, level: Union[PerturbationLevel, int], seed: int) -> SegmentationPrior:
    """Perturbs both prior channels with the same draw, which keeps bone inside body."""
    return SegmentationPrior(bone=apply_affine_perturbation(prior.bone, level, seed),
                             body=apply_affine_perturbation(prior.body, level, seed))
