"""
Translator stubs standing in for the CBCT -> CT networks.

The three input settings share one fitted `Translator`: an intensity LUT fitted by
quantile matching on calibration pairs (CBCT), a per-region constant fill driven by the
segmentation prior (SEG), and the LUT conditioned on the prior (C+SEG).
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from backend.synthct.core import (
    AIR_HU,
    ImageGrid,
    NormalizationSpec,
    SegmentationPrior,
    Units,
    normalize,
    require_same_shape,
)
from backend.synthct.errors import EmptyBody, InvalidConfig, ModeInputMissing, TooFewSamples, UnitMismatch
from backend.synthct.segmentation import BodySegConfig, BoneSegConfig, build_prior

logger = logging.getLogger(__name__)

# Used when a calibration set has no soft tissue or no bone at all.
FALLBACK_SOFT_HU = 0.0
FALLBACK_BONE_HU = 700.0
DEFAULT_RESIDUAL_EDGES = (-200.0, 150.0, 350.0)

CalPair = Tuple[Optional[ImageGrid], ImageGrid]


class TranslationMode(str, Enum):
    CBCT = "cbct"
    SEG = "seg"
    CSEG = "c+seg"

    @classmethod
    def parse(cls, text: Union[str, "TranslationMode"]) -> "TranslationMode":
        try:
            return cls(str(text.value if isinstance(text, cls) else text).lower())
        except ValueError:
            raise InvalidConfig(f"Unknown translator mode '{text}' (expected cbct, seg or c+seg)")

    @property
    def uses_cbct(self) -> bool:
        return self is not TranslationMode.SEG

    @property
    def uses_prior(self) -> bool:
        return self is not TranslationMode.CBCT


@dataclass(frozen=True)
class TranslatorConfig:
    mode: TranslationMode = TranslationMode.CSEG
    lut_knots: int = 33
    bone_blend: float = 0.5
    seg_depth_bands: int = 2
    seg_band_px: float = 3.0
    align_radius_px: int = 3

    def __post_init__(self):
        object.__setattr__(self, "mode", TranslationMode.parse(self.mode))
        if self.lut_knots < 2:
            raise InvalidConfig("lut_knots must be >= 2")
        if not 0.0 <= self.bone_blend <= 1.0:
            raise InvalidConfig(f"bone_blend must be in [0, 1], got {self.bone_blend}")
        if self.seg_depth_bands < 1 or self.seg_band_px <= 0:
            raise InvalidConfig("seg_depth_bands must be >= 1 and seg_band_px > 0")
        if self.align_radius_px < 0:
            raise InvalidConfig("align_radius_px must be >= 0")


@dataclass(frozen=True)
class SamplerConfig:
    k: int = 16
    noise_sigma: float = 0.03
    correlation_len_px: float = 8.0
    seed: int = 0
    residual_gain: float = 1.0

    def __post_init__(self):
        if self.k < 2:
            raise TooFewSamples(f"SamplerConfig.k must be >= 2, got {self.k}")
        if self.noise_sigma < 0 or self.correlation_len_px <= 0:
            raise InvalidConfig("noise_sigma must be >= 0 and correlation_len_px > 0")
        if not 0.0 <= self.residual_gain <= 1.0:
            raise InvalidConfig(f"residual_gain must be in [0, 1], got {self.residual_gain}")


def _require_hu(grid: ImageGrid, name: str):
    if grid.units is not Units.HU:
        raise UnitMismatch(f"Translator expects {name} in HU, got {grid.units.value}")


def _monotone_knots(xq: np.ndarray, yq: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Collapses repeated input knots (e.g. saturated air) into strictly increasing ones."""
    yq = np.maximum.accumulate(yq)
    knots, inverse, counts = np.unique(xq, return_inverse=True, return_counts=True)
    values = np.bincount(inverse, weights=yq) / counts
    return knots, np.maximum.accumulate(values)


def _shift(values: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    h, w = values.shape
    out = np.full_like(values, fill)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        values[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    return out


class Translator:
    """
    A fitted translator stub.

    Fit once on (cbct, ct) calibration pairs and apply to any slice in any mode. Pairs may
    omit the CBCT (None), in which case only the SEG mode is available.
    """

    def __init__(self, cfg: TranslatorConfig, lut: Optional[Tuple[np.ndarray, np.ndarray]],
                 soft_medians: np.ndarray, bone_median: float, hu_ceiling: float,
                 body_cfg: BodySegConfig, residual_edges: Sequence[float],
                 residual_pairs: List[Tuple[Optional[ImageGrid], ImageGrid, Optional[SegmentationPrior]]]):
        self.cfg = cfg
        self.lut = lut
        self.soft_medians = soft_medians
        self.bone_median = float(bone_median)
        self.hu_ceiling = float(hu_ceiling)
        self.body_cfg = body_cfg
        self.residual_edges = np.asarray(residual_edges, dtype=np.float64)
        self._residual_pairs = residual_pairs
        self._profiles: Dict[TranslationMode, np.ndarray] = {}

    @classmethod
    def fit(cls, cal_pairs: Sequence[CalPair], cfg: TranslatorConfig = TranslatorConfig(),
            body_cfg: BodySegConfig = BodySegConfig(), bone_cfg: BoneSegConfig = BoneSegConfig(),
            residual_edges: Sequence[float] = DEFAULT_RESIDUAL_EDGES) -> "Translator":
        """
        Fits the LUT, the SEG fill values and the intensity ceiling.

        Args:
            cal_pairs (Sequence[CalPair]): (cbct or None, ct) pairs in HU.
            cfg (TranslatorConfig): Translator parameters.
            body_cfg (BodySegConfig): Body extraction used for calibration priors.
            bone_cfg (BoneSegConfig): Bone extraction used for calibration priors.
            residual_edges (Sequence[float]): HU edges grouping calibration residuals.

        Returns:
            Translator: The fitted stub.
        """
        pairs = list(cal_pairs)
        if not pairs:
            raise ModeInputMissing("Translator needs at least one calibration pair")
        for cbct, ct in pairs:
            _require_hu(ct, "ct")
            if cbct is not None:
                _require_hu(cbct, "cbct")
                require_same_shape(cbct, ct)

        lut = None
        with_cbct = [(cbct, ct) for cbct, ct in pairs if cbct is not None]
        if with_cbct:
            levels = np.linspace(0.0, 1.0, cfg.lut_knots)
            xq = np.quantile(np.concatenate([c.values.ravel() for c, _ in with_cbct]).astype(np.float64), levels)
            yq = np.quantile(np.concatenate([t.values.ravel() for _, t in with_cbct]).astype(np.float64), levels)
            lut = _monotone_knots(xq, yq)
            logger.info(f"Fitted {lut[0].size}-knot intensity LUT on {len(with_cbct)} pairs")

        band_values: List[List[np.ndarray]] = [[] for _ in range(cfg.seg_depth_bands)]
        bone_values: List[np.ndarray] = []
        residual_pairs = []
        for cbct, ct in pairs:
            try:
                prior = build_prior(ct, body_cfg, bone_cfg)
            except EmptyBody:
                logger.warning("Skipping calibration slice without a body for the SEG fill")
                residual_pairs.append((cbct, ct, None))
                continue
            residual_pairs.append((cbct, ct, prior))
            soft = prior.body.bits & ~prior.bone.bits
            bands = _depth_bands(prior.body.bits, cfg)
            for b in range(cfg.seg_depth_bands):
                band_values[b].append(ct.values[soft & (bands == b)])
            bone_values.append(ct.values[prior.bone.bits])

        soft_all = np.concatenate([v for band in band_values for v in band]) if any(band_values) else np.empty(0)
        if soft_all.size == 0:
            logger.warning(f"No soft tissue in the calibration set, SEG fill falls back to {FALLBACK_SOFT_HU} HU")
            soft_default = FALLBACK_SOFT_HU
        else:
            soft_default = float(np.median(soft_all))
        soft_medians = np.array([
            float(np.median(np.concatenate(band))) if band and sum(v.size for v in band) else soft_default
            for band in band_values
        ])
        bone_all = np.concatenate(bone_values) if bone_values else np.empty(0)
        if bone_all.size == 0:
            logger.warning(f"No bone in the calibration set, SEG fill falls back to {FALLBACK_BONE_HU} HU")
            bone_median = FALLBACK_BONE_HU
            ceiling = max(float(max(ct.values.max() for _, ct in pairs)), FALLBACK_BONE_HU)
        else:
            bone_median = float(np.median(bone_all))
            ceiling = float(bone_all.max())
        return cls(cfg, lut, soft_medians, bone_median, ceiling, body_cfg, residual_edges, residual_pairs)

    def _lut_apply(self, values: np.ndarray) -> np.ndarray:
        knots, targets = self.lut
        return np.interp(values.astype(np.float64), knots, targets)

    def _seg_fill(self, prior: SegmentationPrior) -> np.ndarray:
        body = prior.body.bits
        out = np.full(body.shape, AIR_HU)
        bands = _depth_bands(body, self.cfg)
        out[body] = self.soft_medians[bands[body]]
        out[prior.bone.bits] = self.bone_median
        return out

    def _align(self, values: np.ndarray, body: np.ndarray) -> np.ndarray:
        """Integer rigid shift of the CBCT that best overlaps its outline with the prior body."""
        h, w = values.shape
        ry = min(self.cfg.align_radius_px, h - 1)
        rx = min(self.cfg.align_radius_px, w - 1)
        if ry == 0 and rx == 0:
            return values
        outline = values >= self.body_cfg.threshold_hu
        body_count = int(body.sum())
        shifts = sorted(((dy, dx) for dy in range(-ry, ry + 1) for dx in range(-rx, rx + 1)),
                        key=lambda s: (abs(s[0]) + abs(s[1]), s[0], s[1]))
        best, best_score = (0, 0), -1.0
        for dy, dx in shifts:
            moved = _shift(outline, dy, dx, False)
            denom = int(moved.sum()) + body_count
            score = 2.0 * int((moved & body).sum()) / denom if denom else 1.0
            if score > best_score:
                best, best_score = (dy, dx), score
        if best != (0, 0):
            logger.debug(f"Aligned CBCT to prior by {best} (dice {best_score:.4f})")
        return _shift(values, best[0], best[1], AIR_HU)

    def apply(self, cbct: Optional[ImageGrid], prior: Optional[SegmentationPrior],
              mode: Union[TranslationMode, str, None] = None) -> ImageGrid:
        """Translates one slice; returns the sCT in HU."""
        mode = self.cfg.mode if mode is None else TranslationMode.parse(mode)
        if mode.uses_cbct and (cbct is None or self.lut is None):
            raise ModeInputMissing(f"Mode {mode.value} needs a CBCT slice and a fitted LUT")
        if mode.uses_prior and prior is None:
            raise ModeInputMissing(f"Mode {mode.value} needs a segmentation prior")
        if cbct is not None and mode.uses_cbct:
            _require_hu(cbct, "cbct")
        if mode is TranslationMode.CBCT:
            return ImageGrid(self._lut_apply(cbct.values), Units.HU)
        if mode is TranslationMode.SEG:
            return ImageGrid(self._seg_fill(prior), Units.HU)

        require_same_shape(cbct, prior.body)
        body, bone = prior.body.bits, prior.bone.bits
        out = self._lut_apply(self._align(cbct.values.astype(np.float64), body))
        beta = self.cfg.bone_blend
        out[bone] = (1.0 - beta) * out[bone] + beta * self.bone_median
        out[~body] = AIR_HU
        return ImageGrid(np.clip(out, AIR_HU, self.hu_ceiling), Units.HU)

    def residual_profile(self, mode: Union[TranslationMode, str]) -> np.ndarray:
        """Mean absolute calibration residual (HU) per predicted-intensity group."""
        mode = TranslationMode.parse(mode)
        if mode not in self._profiles:
            groups = self.residual_edges.size + 1
            sums, counts = np.zeros(groups), np.zeros(groups)
            for cbct, ct, prior in self._residual_pairs:
                if (mode.uses_cbct and cbct is None) or (mode.uses_prior and prior is None):
                    continue
                pred = self.apply(cbct, prior, mode).values.astype(np.float64)
                group = np.digitize(pred, self.residual_edges)
                residual = np.abs(pred - ct.values)
                sums += np.bincount(group.ravel(), weights=residual.ravel(), minlength=groups)
                counts += np.bincount(group.ravel(), minlength=groups)
            overall = sums.sum() / counts.sum() if counts.sum() else 0.0
            self._profiles[mode] = np.where(counts > 0, sums / np.maximum(counts, 1), overall)
        return self._profiles[mode]

    def sigma_scale(self, pred_hu: np.ndarray, mode: Union[TranslationMode, str], gain: float) -> np.ndarray:
        """Per-pixel multiplier (1 - gain) + gain * r(group) / mean(r)."""
        if gain == 0:
            return np.ones(pred_hu.shape)
        profile = self.residual_profile(mode)
        group = np.digitize(pred_hu, self.residual_edges)
        mean = float(profile[group].mean())
        if mean <= 0:
            return np.ones(pred_hu.shape)
        return (1.0 - gain) + gain * profile[group] / mean


def _depth_bands(body: np.ndarray, cfg: TranslatorConfig) -> np.ndarray:
    depth = ndimage.distance_transform_edt(body)
    bands = np.floor(np.maximum(depth - 1.0, 0.0) / cfg.seg_band_px).astype(np.int64)
    return np.minimum(bands, cfg.seg_depth_bands - 1)


def _resolve(cal: Union[Sequence[CalPair], Translator], cfg: TranslatorConfig) -> Translator:
    return cal if isinstance(cal, Translator) else Translator.fit(cal, cfg)


def translate(cbct: Optional[ImageGrid], prior: Optional[SegmentationPrior],
              mode: Union[TranslationMode, str], cal: Union[Sequence[CalPair], Translator],
              cfg: TranslatorConfig = TranslatorConfig()) -> ImageGrid:
    """Translates a CBCT slice (and/or prior) to an sCT in HU for the given input setting."""
    return _resolve(cal, cfg).apply(cbct, prior, mode)


def _unit_gain(sigma: float) -> float:
    """Standard deviation of gaussian_filter applied to unit white noise."""
    radius = int(4.0 * sigma + 0.5)
    size = 2 * radius + 3
    delta = np.zeros((size, size))
    delta[size // 2, size // 2] = 1.0
    kernel = ndimage.gaussian_filter(delta, sigma=sigma, mode="constant")
    return float(math.sqrt((kernel ** 2).sum()))


def sample_ensemble(cbct: Optional[ImageGrid], prior: Optional[SegmentationPrior],
                    mode: Union[TranslationMode, str], cal: Union[Sequence[CalPair], Translator],
                    scfg: SamplerConfig, spec: NormalizationSpec = NormalizationSpec(),
                    cfg: TranslatorConfig = TranslatorConfig()) -> List[ImageGrid]:
    """
    Draws K stochastic sCT samples around the deterministic translation.

    Each sample adds an independent Gaussian field smoothed to the configured correlation
    length and rescaled to unit variance, multiplied by noise_sigma and by the residual
    scale of the pixel's predicted-intensity group. Samples are normalized and clamped to
    [-1, 1].
    """
    translator = _resolve(cal, cfg)
    pred_hu = translator.apply(cbct, prior, mode)
    base = normalize(pred_hu, spec).values.astype(np.float64)
    if scfg.noise_sigma == 0:
        return [ImageGrid(base, Units.NORMALIZED) for _ in range(scfg.k)]
    sigma = scfg.noise_sigma * translator.sigma_scale(pred_hu.values.astype(np.float64), mode, scfg.residual_gain)
    gain = _unit_gain(scfg.correlation_len_px)
    rng = np.random.default_rng(scfg.seed)
    samples = []
    for _ in range(scfg.k):
        field = ndimage.gaussian_filter(rng.standard_normal(base.shape), sigma=scfg.correlation_len_px,
                                        mode="reflect") / gain
        samples.append(ImageGrid(np.clip(base + sigma * field, -1.0, 1.0), Units.NORMALIZED))
    return samples
