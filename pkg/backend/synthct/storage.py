"""
On-disk formats: the volume container, manifest CSV, calibration container, a minimal
NIfTI-1 reader and PGM export. All multi-byte values are little-endian.
"""
import hashlib
import json
import logging
import math
import os
import struct
from fractions import Fraction
from typing import Any, Dict, List, NamedTuple, Optional, Union

import numpy as np
import pandas as pd

from backend.synthct.conformal import (
    Aggregation,
    Calibration,
    CrcCalibration,
    EvalPolicy,
    Method,
    ScpCalibration,
)
from backend.synthct.config import canonical_json
from backend.synthct.core import BinaryMask, DatasetManifest, ImageGrid, NormalizationSpec, SliceRecord, Units
from backend.synthct.errors import (
    BadMagic,
    BadNiftiMagic,
    BadUnits,
    CompressedInput,
    ContainerFormatError,
    DigestMismatch,
    InvalidGrid,
    InvalidInputError,
    ManifestError,
    MethodPayloadMismatch,
    NiftiFormatError,
    SynthCTError,
    TruncatedPayload,
    UnsupportedDatatype,
    VolumeFormatError,
)

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b"CTVOL001"
VOLUME_VERSION = 1
# magic, version, height, width, units, 3 reserved zero bytes
VOLUME_HEADER = struct.Struct("<8sIIIB3x")
UNITS_CODES = {Units.NORMALIZED: 0, Units.HU: 1}
MASK_CODE = 2

MANIFEST_COLUMNS = ["patient_id", "slice_index", "role", "sample_index", "path"]

CAL_MAGIC = b"CTCAL001"
# magic, method, alpha, n_c, n_p num, n_p den, P, hu_min, hu_max, config digest, config length
CAL_HEADER = struct.Struct("<8sBdIIIIdd32sI")
SCP_PAYLOAD_HEADER = struct.Struct("<BII")
CRC_PAYLOAD = struct.Struct("<ddddBB")
DIGEST_SIZE = 32
POLICY_CODES = {EvalPolicy.BODY: 0, EvalPolicy.FULL: 1}
AGGREGATION_CODES = {Aggregation.IMAGE: 0, Aggregation.PIXEL: 1}

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"
# name -> (offset, format)
NIFTI_FIELDS = {
    "sizeof_hdr": (0, "i"),
    "dim": (40, "8h"),
    "datatype": (70, "h"),
    "bitpix": (72, "h"),
    "vox_offset": (108, "f"),
    "scl_slope": (112, "f"),
    "scl_inter": (116, "f"),
}
NIFTI_DATATYPES = {4: ("i2", 16), 16: ("f4", 32)}

Volume = Union[ImageGrid, BinaryMask]


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        logger.error(f"Error reading {path}: {e}")
        raise


def _write_bytes(path: str, data: bytes):
    try:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise


# --- volume container ---

def encode_volume(item: Volume) -> bytes:
    if isinstance(item, BinaryMask):
        code, values = MASK_CODE, item.bits.astype("<f4")
    else:
        if item.units not in UNITS_CODES:
            raise BadUnits(f"{item.units.value} grids cannot be stored as volumes")
        code, values = UNITS_CODES[item.units], item.values.astype("<f4")
    h, w = values.shape
    return VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, h, w, code) + values.tobytes(order="C")


def decode_volume(data: bytes, strict: bool = True) -> Volume:
    """
    Parses a volume container.

    `strict=False` accepts normalized payloads outside [-1, 1], as written for unclipped
    interval bounds.
    """
    if len(data) < VOLUME_HEADER.size:
        raise TruncatedPayload(f"Volume has {len(data)} bytes, shorter than the {VOLUME_HEADER.size}-byte header")
    magic, version, h, w, code = VOLUME_HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC or version != VOLUME_VERSION:
        raise BadMagic(f"Not a volume file (magic {magic!r}, version {version})")
    if data[21:VOLUME_HEADER.size] != b"\x00\x00\x00":
        raise VolumeFormatError("Reserved header bytes must be zero")
    if code not in (0, 1, MASK_CODE):
        raise BadUnits(f"Unknown units code {code}")
    if h < 1 or w < 1:
        raise VolumeFormatError(f"Invalid volume dimensions {h}x{w}")
    expected = h * w * 4
    payload = data[VOLUME_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayload(f"Payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise VolumeFormatError(f"Payload has {len(payload) - expected} trailing bytes")
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    try:
        if code == MASK_CODE:
            if not np.isin(values, (0.0, 1.0)).all():
                raise BadUnits("Mask payload holds values other than 0.0 and 1.0")
            return BinaryMask(values == 1.0)
        units = Units.NORMALIZED if code == 0 else Units.HU
        return ImageGrid(values, units, strict=strict)
    except InvalidGrid as e:
        raise VolumeFormatError(f"Invalid volume payload: {e}") from e


def write_volume(item: Volume, path: str):
    _write_bytes(path, encode_volume(item))
    logger.debug(f"Wrote volume {path}")


def read_volume(path: str, strict: bool = True) -> Volume:
    try:
        return decode_volume(_read_bytes(path), strict)
    except VolumeFormatError as e:
        logger.error(f"Malformed volume {path}: {e}")
        raise


def read_grid(path: str, strict: bool = True) -> ImageGrid:
    item = read_volume(path, strict)
    if not isinstance(item, ImageGrid):
        raise BadUnits(f"{path} holds a mask, expected an image grid")
    return item


def read_mask(path: str) -> BinaryMask:
    item = read_volume(path)
    if not isinstance(item, BinaryMask):
        raise BadUnits(f"{path} holds an image grid, expected a mask")
    return item


# --- manifest ---

def read_manifest(path: str, require_pairs: bool = False) -> DatasetManifest:
    """Loads a manifest CSV; relative record paths resolve against its directory."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except OSError as e:
        logger.error(f"Error reading manifest {path}: {e}")
        raise
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise ManifestError(f"Manifest {path} is not a valid CSV: {e}") from e
    if list(frame.columns) != MANIFEST_COLUMNS:
        raise ManifestError(f"Manifest header must be {','.join(MANIFEST_COLUMNS)}, got {','.join(frame.columns)}")
    records = []
    for line, row in enumerate(frame.itertuples(index=False), start=2):
        try:
            sample_index = int(row.sample_index) if row.sample_index != "" else None
            records.append(SliceRecord(row.patient_id, int(row.slice_index), row.role, row.path, sample_index))
        except ValueError as e:
            if isinstance(e, SynthCTError):
                raise
            raise ManifestError(f"{path}:{line}: {e}") from e
    manifest = DatasetManifest(records, os.path.dirname(os.path.abspath(path)))
    return manifest.validate(require_pairs)


def write_manifest(manifest: DatasetManifest, path: str):
    """Writes a manifest CSV with record paths relative to the manifest directory."""
    out_dir = os.path.dirname(os.path.abspath(path))
    rows = [{
        "patient_id": r.patient_id,
        "slice_index": str(r.slice_index),
        "role": r.role.value,
        "sample_index": "" if r.sample_index is None else str(r.sample_index),
        "path": os.path.relpath(os.path.abspath(manifest.resolve(r)), out_dir).replace(os.sep, "/"),
    } for r in manifest.records]
    try:
        os.makedirs(out_dir, exist_ok=True)
        pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False, encoding="utf-8")
    except OSError as e:
        logger.error(f"Error writing manifest {path}: {e}")
        raise
    logger.info(f"Wrote manifest with {len(rows)} records to {path}")


# --- calibration container ---

class CalibrationArtifact(NamedTuple):
    calibration: Calibration
    spec: NormalizationSpec
    config: Dict[str, Any]
    digest: str


def encode_calibration(calib: Calibration, spec: NormalizationSpec, config: Dict[str, Any]) -> bytes:
    config_json = canonical_json(config).encode("utf-8")
    digest = hashlib.sha256(config_json).digest()
    n_p = Fraction(calib.n_p)
    head = CAL_HEADER.pack(CAL_MAGIC, int(calib.method), float(calib.alpha), calib.n_c, n_p.numerator,
                           n_p.denominator, calib.n_patients, float(spec.hu_min), float(spec.hu_max), digest,
                           len(config_json))
    if isinstance(calib, ScpCalibration):
        h, w = calib.qhat.shape
        payload = SCP_PAYLOAD_HEADER.pack(POLICY_CODES[calib.eval_policy], h, w) + \
            calib.qhat.values.astype("<f4").tobytes(order="C")
    else:
        q_lo, q_hi = calib.bound_quantiles
        payload = CRC_PAYLOAD.pack(calib.lambda_hat, calib.b, q_lo, q_hi, AGGREGATION_CODES[calib.aggregation],
                                   POLICY_CODES[calib.eval_policy])
    body = head + config_json + payload
    return body + hashlib.sha256(body).digest()


def _code_lookup(codes: Dict, value: int, what: str):
    for key, code in codes.items():
        if code == value:
            return key
    raise ContainerFormatError(f"Unknown {what} code {value}")


def decode_calibration(data: bytes) -> CalibrationArtifact:
    """
    Parses a calibration container, verifying the container hash and the config digest.

    Raises DigestMismatch when either hash disagrees and MethodPayloadMismatch when the
    method id does not match the payload kind.
    """
    if len(data) < CAL_HEADER.size + DIGEST_SIZE:
        raise ContainerFormatError(f"Calibration container has only {len(data)} bytes")
    if data[:8] != CAL_MAGIC:
        raise ContainerFormatError(f"Not a calibration container (magic {data[:8]!r})")
    body, trailer = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != trailer:
        raise DigestMismatch("Calibration container hash does not match its contents")
    (_, method_id, alpha, n_c, num, den, n_patients, hu_min, hu_max, digest,
     config_len) = CAL_HEADER.unpack_from(body)
    try:
        method = Method(method_id)
    except ValueError:
        raise ContainerFormatError(f"Unknown method id {method_id}")
    config_end = CAL_HEADER.size + config_len
    if config_end > len(body) or den == 0:
        raise ContainerFormatError("Calibration container header is inconsistent")
    config_json = body[CAL_HEADER.size:config_end]
    if hashlib.sha256(config_json).digest() != digest:
        raise DigestMismatch("Embedded config does not match the recorded config digest")
    try:
        config = json.loads(config_json.decode("utf-8"))
    except ValueError as e:
        raise ContainerFormatError(f"Embedded config is not valid JSON: {e}") from e
    payload = body[config_end:]
    n_p = Fraction(num, den)

    scp_payload = len(payload) >= SCP_PAYLOAD_HEADER.size and \
        len(payload) == SCP_PAYLOAD_HEADER.size + 4 * _grid_cells(payload)
    crc_payload = len(payload) == CRC_PAYLOAD.size
    if (method.is_crc and not crc_payload) or (not method.is_crc and not scp_payload):
        raise MethodPayloadMismatch(f"Method {method.label} does not match a {len(payload)}-byte payload")

    try:
        spec = NormalizationSpec(hu_min, hu_max)
        if method.is_crc:
            lam, b, q_lo, q_hi, agg, policy = CRC_PAYLOAD.unpack(payload)
            calib: Calibration = CrcCalibration(lam, alpha, b, n_c, n_p, n_patients, method.adjusted, (q_lo, q_hi),
                                                _code_lookup(AGGREGATION_CODES, agg, "aggregation"),
                                                _code_lookup(POLICY_CODES, policy, "eval policy"))
        else:
            policy, h, w = SCP_PAYLOAD_HEADER.unpack_from(payload)
            qhat = np.frombuffer(payload[SCP_PAYLOAD_HEADER.size:], dtype="<f4").reshape(h, w)
            calib = ScpCalibration(ImageGrid(qhat, Units.SCALAR), alpha, n_c, n_p, n_patients, method.adjusted,
                                   _code_lookup(POLICY_CODES, policy, "eval policy"))
    except InvalidInputError as e:
        raise ContainerFormatError(f"Invalid calibration contents: {e}") from e
    return CalibrationArtifact(calib, spec, config, digest.hex())


def _grid_cells(payload: bytes) -> int:
    _, h, w = SCP_PAYLOAD_HEADER.unpack_from(payload)
    return h * w if h and w else -1


def save_calibration(path: str, calib: Calibration, spec: NormalizationSpec, config: Dict[str, Any]) -> str:
    """Writes the container and returns the hex config digest it embeds."""
    data = encode_calibration(calib, spec, config)
    _write_bytes(path, data)
    digest = hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()
    logger.info(f"Saved {calib.method.label} calibration to {path}")
    return digest


def load_calibration(path: str, expected_digest: Optional[str] = None) -> CalibrationArtifact:
    try:
        artifact = decode_calibration(_read_bytes(path))
    except (ContainerFormatError, DigestMismatch, MethodPayloadMismatch) as e:
        logger.error(f"Rejected calibration container {path}: {e}")
        raise
    if expected_digest is not None and artifact.digest != expected_digest:
        raise DigestMismatch(f"Calibration {path} was fitted under config {artifact.digest[:12]}, "
                             f"expected {expected_digest[:12]}")
    return artifact


# --- NIfTI-1 import ---

def _nifti_field(header: bytes, endian: str, name: str):
    offset, fmt = NIFTI_FIELDS[name]
    values = struct.unpack_from(endian + fmt, header, offset)
    return values if len(values) > 1 else values[0]


def import_nifti(path: str, spec: Optional[NormalizationSpec] = None, slice_axis: int = 2) -> List[ImageGrid]:
    """
    Reads an uncompressed single-file NIfTI-1 volume as HU slices.

    Voxel values are rescaled with scl_slope / scl_inter (a zero slope means no
    scaling). Slices are taken along `slice_axis` (0 = i, 1 = j, 2 = k) in index order.

    Args:
        path (str): .nii file.
        spec (Optional[NormalizationSpec]): When given, out-of-window voxels are counted
            in the log.
        slice_axis (int): Volume axis to slice along.

    Returns:
        List[ImageGrid]: One HU grid per slice.
    """
    if slice_axis not in (0, 1, 2):
        raise InvalidInputError(f"slice_axis must be 0, 1 or 2, got {slice_axis}")
    data = _read_bytes(path)
    if data[:2] == GZIP_MAGIC:
        raise CompressedInput(f"{path} is gzip-compressed; only uncompressed .nii is supported")
    if len(data) < NIFTI_HEADER_SIZE:
        raise NiftiFormatError(f"{path} is shorter than a NIfTI-1 header")
    endian = next((e for e in "<>" if struct.unpack_from(e + "i", data, 0)[0] == NIFTI_HEADER_SIZE), None)
    if endian is None or data[344:348] != NIFTI_MAGIC:
        raise BadNiftiMagic(f"{path} is not a single-file NIfTI-1 image")
    datatype = _nifti_field(data, endian, "datatype")
    if datatype not in NIFTI_DATATYPES:
        raise UnsupportedDatatype(f"NIfTI datatype {datatype} is not supported (int16 or float32 only)")
    dtype, bitpix = NIFTI_DATATYPES[datatype]
    if _nifti_field(data, endian, "bitpix") != bitpix:
        raise NiftiFormatError(f"bitpix does not match datatype {datatype}")

    dim = _nifti_field(data, endian, "dim")
    ndim = dim[0]
    if not 2 <= ndim <= 7 or any(d < 1 for d in dim[1:ndim + 1]) or any(d != 1 for d in dim[4:ndim + 1]):
        raise NiftiFormatError(f"Unsupported NIfTI dimensions {dim[:ndim + 1]}")
    nx, ny = dim[1], dim[2]
    nz = dim[3] if ndim >= 3 else 1
    vox_offset = _nifti_field(data, endian, "vox_offset")
    if not math.isfinite(vox_offset):
        raise NiftiFormatError(f"{path} has a non-finite vox_offset")
    offset = int(vox_offset)
    count = nx * ny * nz
    item = np.dtype(endian + dtype)
    if offset < NIFTI_HEADER_SIZE or len(data) < offset + count * item.itemsize:
        raise NiftiFormatError(f"{path} voxel data is truncated or misplaced")

    # i varies fastest on disk.
    volume = np.frombuffer(data, dtype=item, count=count, offset=offset).reshape(nz, ny, nx).astype(np.float64)
    slope, inter = _nifti_field(data, endian, "scl_slope"), _nifti_field(data, endian, "scl_inter")
    if slope != 0 and math.isfinite(slope):
        volume = volume * slope + inter
    if slice_axis == 2:
        slices = [volume[k] for k in range(nz)]
    elif slice_axis == 1:
        slices = [volume[:, j, :] for j in range(ny)]
    else:
        slices = [volume[:, :, i] for i in range(nx)]
    if spec is not None:
        outside = int(np.count_nonzero((volume < spec.hu_min) | (volume > spec.hu_max)))
        logger.debug(f"{outside} of {volume.size} voxels fall outside the HU window")
    logger.info(f"Imported {len(slices)} slices of {path}")
    return [ImageGrid(s, Units.HU) for s in slices]


# --- map export ---

def encode_pgm(grid: ImageGrid, vmin: float, vmax: float) -> bytes:
    """8-bit binary PGM with a linear window; byte = floor(clamp(t, 0, 1) * 255 + 0.5)."""
    if not vmin < vmax:
        raise InvalidInputError(f"PGM window needs min < max, got ({vmin}, {vmax})")
    t = (grid.values.astype(np.float64) - vmin) / (vmax - vmin)
    pixels = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes(order="C")


def export_pgm(grid: ImageGrid, path: str, vmin: float, vmax: float):
    _write_bytes(path, encode_pgm(grid, vmin, vmax))
    logger.debug(f"Exported map {path}")
