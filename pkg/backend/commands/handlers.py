"""
Command handlers. Each takes the parsed arguments and the run context, does its work
through the synthct library and returns the JSON-ready summary printed on stdout.
"""
import dataclasses
import logging
import os
import shutil
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from backend.synthct import harness
from backend.synthct.conformal import (
    IntervalField,
    Method,
    ScpCalibration,
    calibrate_pw_crc,
    calibrate_pw_scp,
    heuristic_bounds,
    predict_crc,
    predict_scp,
    scp_min_calibration,
)
from backend.synthct.config import RunConfig, config_digest, from_dict, to_dict
from backend.synthct.core import (
    BinaryMask,
    DatasetManifest,
    ImageGrid,
    NormalizationSpec,
    Role,
    SegmentationPrior,
    SliceRecord,
    as_hu,
    as_normalized,
    derive_seed,
    split_patients,
)
from backend.synthct.errors import (
    DigestMismatch,
    EmptyMask,
    EmptyRegionError,
    InvalidInputError,
    ModeInputMissing,
    SaturatedEverywhere,
    TooFewSamples,
)
from backend.synthct.metrics import (
    ADJ,
    BASE,
    MetricsReport,
    dice,
    evaluate_slice,
    evaluation_mask,
    uncertainty_map,
)
from backend.synthct.phantom import PerturbationLevel, perturb_prior
from backend.synthct.segmentation import build_prior
from backend.synthct.storage import (
    export_pgm,
    load_calibration,
    read_grid,
    read_manifest,
    read_mask,
    save_calibration,
    write_manifest,
    write_volume,
)
from backend.synthct.translator import Translator, sample_ensemble

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
VOLUME_SUFFIX = ".ctvol"


@dataclass
class RunContext:
    """Resolved config of the running command. Handlers adopting an embedded config replace it."""
    cfg: RunConfig
    digest: Optional[str] = None

    @property
    def config_digest(self) -> str:
        return self.digest or config_digest(self.cfg)


def slice_path(out_dir: str, patient_id: str, slice_index: int, role: str) -> str:
    return os.path.join(out_dir, patient_id, f"{slice_index:04d}_{role}{VOLUME_SUFFIX}")


def _record(out_dir: str, patient_id: str, slice_index: int, role: Role,
            sample_index: Optional[int] = None) -> SliceRecord:
    suffix = role.value if sample_index is None else f"{role.value}_{sample_index:02d}"
    return SliceRecord(patient_id, slice_index, role, slice_path(out_dir, patient_id, slice_index, suffix), sample_index)


def _read(manifest: DatasetManifest, patient_id: str, slice_index: int, role: Role) -> Optional[ImageGrid]:
    record = manifest.find(patient_id, slice_index, role)
    return read_grid(manifest.resolve(record)) if record else None


def _read_mask(manifest: DatasetManifest, patient_id: str, slice_index: int, role: Role) -> Optional[BinaryMask]:
    record = manifest.find(patient_id, slice_index, role)
    return read_mask(manifest.resolve(record)) if record else None


def _absolute(manifest: DatasetManifest) -> DatasetManifest:
    """Same records with paths made absolute, ready to be re-rooted by write_manifest."""
    records = [dataclasses.replace(r, path=os.path.abspath(manifest.resolve(r))) for r in manifest.records]
    return DatasetManifest(records)


def _prior(manifest: DatasetManifest, patient_id: str, slice_index: int, cfg: RunConfig) -> Optional[SegmentationPrior]:
    body = _read_mask(manifest, patient_id, slice_index, Role.MASK_BODY)
    bone = _read_mask(manifest, patient_id, slice_index, Role.MASK_BONE)
    if body is not None and bone is not None:
        return SegmentationPrior(bone=bone, body=body)
    pct = _read(manifest, patient_id, slice_index, Role.PCT)
    if pct is not None:
        return build_prior(pct, cfg.body, cfg.bone, cfg.normalization)
    return None


# --- phantom gen ---

def phantom_gen(args, ctx: RunContext) -> Dict[str, Any]:
    cfg = ctx.cfg
    if args.patients < 1 or args.slices < 1:
        raise InvalidInputError("phantom gen needs --patients >= 1 and --slices >= 1")
    records: List[SliceRecord] = []
    for p in range(args.patients):
        pid = harness.patient_id(p)
        for s in range(args.slices):
            item = harness.phantom_slice(cfg, cfg.seed, pid, s, args.slices)
            ct_path = slice_path(args.out, pid, s, Role.CT.value)
            write_volume(item.ct, ct_path)
            # The clean CT doubles as the planning CT the prior is extracted from.
            records.append(SliceRecord(pid, s, Role.CT, ct_path))
            records.append(SliceRecord(pid, s, Role.PCT, ct_path))
            for role, volume in ((Role.CBCT, item.cbct), (Role.MASK_BODY, item.prior.body),
                                 (Role.MASK_BONE, item.prior.bone), (Role.TRUTH_BODY, item.body_truth),
                                 (Role.TRUTH_BONE, item.bone_truth)):
                record = _record(args.out, pid, s, role)
                write_volume(volume, record.path)
                records.append(record)
    manifest_path = os.path.join(args.out, MANIFEST_NAME)
    write_manifest(DatasetManifest(records), manifest_path)
    logger.info(f"Generated {args.patients * args.slices} phantom slices under {args.out}")
    return {"slices": args.patients * args.slices, "patients": args.patients, "manifest": manifest_path}


# --- segment ---

def _truth_paths(input_path: str, truth_dir: str) -> Tuple[str, str]:
    stem = os.path.basename(input_path)
    if stem.endswith(VOLUME_SUFFIX):
        stem = stem[:-len(VOLUME_SUFFIX)]
    prefix = stem.rsplit("_", 1)[0] if "_" in stem else stem
    return (os.path.join(truth_dir, f"{prefix}_{Role.TRUTH_BODY.value}{VOLUME_SUFFIX}"),
            os.path.join(truth_dir, f"{prefix}_{Role.TRUTH_BONE.value}{VOLUME_SUFFIX}"))


def segment(args, ctx: RunContext) -> Dict[str, Any]:
    cfg = ctx.cfg
    grid = read_grid(args.input)
    prior = build_prior(grid, cfg.body, cfg.bone, cfg.normalization)
    write_volume(prior.body, args.out_body)
    write_volume(prior.bone, args.out_bone)
    summary: Dict[str, Any] = {"body_pixels": prior.body.count(), "bone_pixels": prior.bone.count()}
    if args.truth_dir:
        body_path, bone_path = _truth_paths(args.input, args.truth_dir)
        summary["dice_body"] = dice(prior.body, read_mask(body_path), cfg.metrics.dice_both_empty)
        summary["dice_bone"] = dice(prior.bone, read_mask(bone_path), cfg.metrics.dice_both_empty)
    return summary


# --- translate ---

def _fit_pairs(manifest: DatasetManifest, spec: NormalizationSpec) -> List[Tuple[Optional[ImageGrid], ImageGrid]]:
    pairs = []
    for pid, s in manifest.slice_keys(Role.CT):
        cbct = _read(manifest, pid, s, Role.CBCT)
        pairs.append((as_hu(cbct, spec) if cbct is not None else None, as_hu(_read(manifest, pid, s, Role.CT), spec)))
    return pairs


def translate(args, ctx: RunContext) -> Dict[str, Any]:
    cfg = ctx.cfg
    mode = cfg.translator.mode
    spec = cfg.normalization
    manifest = read_manifest(args.manifest)
    fit_manifest = read_manifest(args.fit_manifest) if args.fit_manifest else manifest
    pairs = _fit_pairs(fit_manifest, spec)
    if not pairs:
        raise ModeInputMissing("The fit manifest has no ct records")
    translator = Translator.fit(pairs, cfg.translator, cfg.body, cfg.bone, cfg.metrics.bins)

    if args.samples == 1:
        raise TooFewSamples("--samples must be 0 or at least 2")
    kept = [r for r in _absolute(manifest).records if r.role not in (Role.SCT, Role.SAMPLE)]
    new: List[SliceRecord] = []
    for pid, s in manifest.slice_keys():
        cbct = _read(manifest, pid, s, Role.CBCT) if mode.uses_cbct else None
        prior = _prior(manifest, pid, s, cfg) if mode.uses_prior else None
        if mode.uses_cbct and cbct is None:
            raise ModeInputMissing(f"Mode {mode.value} needs a cbct record for {pid}/{s}")
        if mode.uses_prior and prior is None:
            raise ModeInputMissing(f"Mode {mode.value} needs mask or pct records for {pid}/{s}")
        if cbct is not None:
            cbct = as_hu(cbct, spec)
        sct = as_normalized(translator.apply(cbct, prior, mode), spec)
        record = _record(args.out, pid, s, Role.SCT)
        write_volume(sct, record.path)
        new.append(record)
        if args.samples:
            sampler = dataclasses.replace(cfg.sampler, k=args.samples, seed=derive_seed(args.seed, pid, s))
            for k, sample in enumerate(sample_ensemble(cbct, prior, mode, translator, sampler, spec)):
                record = _record(args.out, pid, s, Role.SAMPLE, k)
                write_volume(sample, record.path)
                new.append(record)
    manifest_path = os.path.join(args.out, MANIFEST_NAME)
    write_manifest(DatasetManifest(kept + new), manifest_path)
    logger.info(f"Translated {len(manifest.slice_keys())} slices in {mode.value} mode")
    return {"mode": mode.value, "slices": len(manifest.slice_keys()), "samples": args.samples,
            "manifest": manifest_path}


# --- calibrate ---

def _calibration_slices(manifest: DatasetManifest) -> List[Tuple[str, int]]:
    keys = [(pid, s) for pid, s in manifest.slice_keys(Role.SCT) if manifest.find(pid, s, Role.CT)]
    if not keys:
        raise EmptyMask("The manifest has no slices with both sct and ct records")
    return keys


def _bounds(manifest: DatasetManifest, pid: str, s: int, quantiles: Tuple[float, float],
            spec: NormalizationSpec) -> IntervalField:
    samples = [as_normalized(read_grid(manifest.resolve(r)), spec) for r in manifest.samples(pid, s)]
    if len(samples) < 2:
        raise TooFewSamples(f"{pid}/{s} has {len(samples)} sample records; CRC needs at least 2")
    return heuristic_bounds(samples, *quantiles)


def _eval_mask(manifest: DatasetManifest, pid: str, s: int, ct: ImageGrid, cfg: RunConfig) -> BinaryMask:
    truth = _read_mask(manifest, pid, s, Role.TRUTH_BODY)
    return evaluation_mask(as_hu(ct, cfg.normalization), cfg.conformal.eval_policy, cfg.body,
                           cfg.normalization, truth)


def calibrate(args, ctx: RunContext) -> Dict[str, Any]:
    cfg = ctx.cfg
    c, spec = cfg.conformal, cfg.normalization
    method = Method.parse(args.method)
    manifest = read_manifest(args.manifest, require_pairs=True)
    keys = _calibration_slices(manifest)
    pids = [pid for pid, _ in keys]
    cts = [as_normalized(_read(manifest, pid, s, Role.CT), spec) for pid, s in keys]

    if method.is_crc:
        triples = [(_bounds(manifest, pid, s, c.bound_quantiles, spec), ct, _eval_mask(manifest, pid, s, ct, cfg))
                   for (pid, s), ct in zip(keys, cts)]
        calib = calibrate_pw_crc(triples, c.alpha, c.crc_b, method.adjusted, pids, c.aggregation,
                                 c.bound_quantiles, c.eval_policy)
        stats: Dict[str, Any] = {"lambda_hat": calib.lambda_hat}
    else:
        scts = [as_normalized(_read(manifest, pid, s, Role.SCT), spec) for pid, s in keys]
        calib = calibrate_pw_scp(list(zip(scts, cts)), c.alpha, method.adjusted, pids, c.eval_policy,
                                 c.chunk_pixels, c.workers)
        stats = _qhat_stats(calib)
        if stats["saturated_pixels"] == calib.qhat.values.size:
            raise SaturatedEverywhere(f"Every pixel is saturated with n_c={calib.n_c} at alpha={c.alpha}; "
                                      f"needs n_c >= {scp_min_calibration(c.alpha)}",
                                      scp_min_calibration(c.alpha))
    digest = save_calibration(args.out, calib, spec, to_dict(cfg))
    return {"method": method.label, "alpha": c.alpha, "n_c": calib.n_c, "P": calib.n_patients,
            "n_p": str(calib.n_p), "n_p_value": float(calib.n_p), "calibration": args.out,
            "calibration_digest": digest, **stats}


def _qhat_stats(calib: ScpCalibration) -> Dict[str, Any]:
    q = calib.qhat.values
    valid = q[q >= 0]
    saturated = int(q.size - valid.size)
    if saturated:
        logger.warning(f"{saturated} of {q.size} pixels ({saturated / q.size:.1%}) saturated; "
                       "their intervals span the full range")
    if not valid.size:
        return {"saturated_pixels": saturated}
    return {"saturated_pixels": saturated, "qhat_mean": float(valid.mean()), "qhat_min": float(valid.min()),
            "qhat_max": float(valid.max())}


# --- predict ---

def _adopt(ctx: RunContext, artifacts) -> RunConfig:
    digests = {a.digest for a in artifacts}
    if len(digests) != 1:
        raise DigestMismatch("Calibration containers were fitted under different configs")
    ctx.cfg = from_dict(artifacts[0].config)
    ctx.digest = artifacts[0].digest
    return ctx.cfg


def _intervals(manifest: DatasetManifest, pid: str, s: int, sct: ImageGrid, calib, cfg: RunConfig) -> IntervalField:
    clip = cfg.conformal.clip_intervals
    if calib.method.is_crc:
        return predict_crc(_bounds(manifest, pid, s, calib.bound_quantiles, cfg.normalization), calib, clip)
    return predict_scp(sct, calib, clip)


def predict(args, ctx: RunContext) -> Dict[str, Any]:
    artifact = load_calibration(args.calib)
    cfg = _adopt(ctx, [artifact])
    calib, spec = artifact.calibration, artifact.spec
    manifest = read_manifest(args.manifest)
    kept = [r for r in _absolute(manifest).records if r.role not in (Role.LOWER, Role.UPPER)]
    new: List[SliceRecord] = []
    maps = 0
    for pid, s in manifest.slice_keys(Role.SCT):
        sct = as_normalized(_read(manifest, pid, s, Role.SCT), spec)
        field_ = _intervals(manifest, pid, s, sct, calib, cfg)
        for role, grid in ((Role.LOWER, field_.lower), (Role.UPPER, field_.upper)):
            record = _record(args.out, pid, s, role)
            write_volume(grid, record.path)
            new.append(record)
        if args.map_out:
            export_pgm(uncertainty_map(field_), os.path.join(args.map_out, f"{pid}_{s:04d}.pgm"), *harness.MAP_WINDOW)
            maps += 1
    manifest_path = os.path.join(args.out, MANIFEST_NAME)
    write_manifest(DatasetManifest(kept + new), manifest_path)
    return {"method": calib.method.label, "slices": len(new) // 2, "maps": maps, "manifest": manifest_path}


# --- evaluate ---

def evaluate(args, ctx: RunContext) -> Dict[str, Any]:
    artifacts = [load_calibration(path) for path in args.calib]
    if len(artifacts) > 2:
        raise InvalidInputError("evaluate accepts at most two calibrations (base and adjusted)")
    cfg = _adopt(ctx, artifacts)
    if args.bins:
        cfg = ctx.cfg = from_dict({"metrics": {"bins": [float(v) for v in args.bins.split(",") if v.strip()]}}, cfg)
        ctx.digest = None
    labels = [ADJ if a.calibration.adjusted else BASE for a in artifacts]
    if len(set(labels)) != len(labels):
        raise InvalidInputError("Two calibrations must be one base and one adjusted method")
    spec = artifacts[0].spec
    manifest = read_manifest(args.manifest, require_pairs=True)
    report = MetricsReport(cfg.conformal.alpha, cfg.metrics.stratification)
    for pid, s in _calibration_slices(manifest):
        sct = as_normalized(_read(manifest, pid, s, Role.SCT), spec)
        ct = as_normalized(_read(manifest, pid, s, Role.CT), spec)
        try:
            intervals = {label: _intervals(manifest, pid, s, sct, a.calibration, cfg)
                         for label, a in zip(labels, artifacts)}
            report.add(evaluate_slice(pid, s, sct, ct, intervals, cfg.metrics.stratification, spec, cfg.body,
                                      cfg.bone, cfg.conformal.eval_policy, cfg.metrics.size_units,
                                      cfg.metrics.dice_both_empty,
                                      _read_mask(manifest, pid, s, Role.TRUTH_BODY)))
        except EmptyRegionError as e:
            logger.warning(f"Skipping slice {pid}/{s}: {e}")
    if not report.rows:
        raise EmptyMask("No slice had a nonempty evaluation mask")
    frame = report.write_csv(args.out)
    aggregate = frame.iloc[-1].drop(["patient_id", "slice_index"])
    return {"slices": len(report.rows), "report": args.out,
            "aggregate": {k: None if pd.isna(v) else float(v) for k, v in aggregate.items()}}


# --- perturb ---

def perturb(args, ctx: RunContext) -> Dict[str, Any]:
    level = PerturbationLevel(args.level)
    manifest = read_manifest(args.manifest)
    moved = {Role.MASK_BODY, Role.MASK_BONE}
    records = [r for r in _absolute(manifest).records if r.role not in moved]
    count = 0
    for pid, s in manifest.slice_keys(Role.MASK_BODY):
        body_rec = manifest.find(pid, s, Role.MASK_BODY)
        bone_rec = manifest.find(pid, s, Role.MASK_BONE)
        if bone_rec is None:
            raise ModeInputMissing(f"{pid}/{s} has a body mask but no bone mask")
        out_body, out_bone = _record(args.out, pid, s, Role.MASK_BODY), _record(args.out, pid, s, Role.MASK_BONE)
        if level.level == 0:
            for src, dst in ((body_rec, out_body), (bone_rec, out_bone)):
                os.makedirs(os.path.dirname(dst.path), exist_ok=True)
                shutil.copyfile(manifest.resolve(src), dst.path)
        else:
            prior = SegmentationPrior(bone=read_mask(manifest.resolve(bone_rec)),
                                      body=read_mask(manifest.resolve(body_rec)))
            shifted = perturb_prior(prior, level, derive_seed(args.seed, pid, s))
            write_volume(shifted.body, out_body.path)
            write_volume(shifted.bone, out_bone.path)
        records.extend([out_body, out_bone])
        count += 1
    manifest_path = os.path.join(args.out, MANIFEST_NAME)
    write_manifest(DatasetManifest(records), manifest_path)
    return {"level": level.level, "slices": count, "manifest": manifest_path}


# --- bench ---

def bench(args, ctx: RunContext) -> Dict[str, Any]:
    result = harness.run_experiment(args.experiment, ctx.cfg, args.out, args.patients, args.slices, args.dry_run)
    return {"experiment": result.experiment, "rows": int(len(result.frame)), "outputs": result.outputs,
            "timings": result.timings, **result.summary}


# --- split ---

def split(args, ctx: RunContext) -> Dict[str, Any]:
    cfg = ctx.cfg
    manifest = read_manifest(args.manifest)
    groups = split_patients(manifest.patients(), cfg.split.fractions, cfg.seed)
    outputs = {}
    for name, ids in zip(("train", "cal", "test"), groups):
        path = os.path.join(args.out, f"{name}.csv")
        write_manifest(_absolute(manifest.subset(ids)), path)
        outputs[name] = {"patients": ids, "manifest": path}
    return outputs
