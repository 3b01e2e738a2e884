"""Descriptor serialization (RECB streams) and bandwidth accounting.

A RECB stream is a 12-byte header followed by fixed-layout records::

    header   "RECB" | u16 version | u8 profile id | u8 quantization | u32 count
    record   u32 scan_id | f64 timestamp | 12 x f32 pose [R|t] | payload

The payload is the bottleneck in row-major order: raw float32, IEEE half
precision, or ``min, max`` (two float32) followed by one byte per value for
the affine uint8 mode. All values are little-endian.
"""

from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from recnet.errors import ConfigError, FormatError
from recnet.model import PROFILES_BY_ID, ModelProfile, from_network, get_profile
from recnet.engine import Tensor, no_grad
from recnet.pointcloud_io import PointCloud, Pose
from recnet.projection import ProjectionConfig, unproject
from recnet.retrieval import DescriptorRecord

RECB_MAGIC = b"RECB"
RECB_VERSION = 1
HEADER = struct.Struct("<4sHBBI")
RECORD_PREFIX = struct.Struct("<Id12f")


class Quantization(enum.IntEnum):
    FLOAT32 = 0
    FLOAT16 = 1
    UINT8 = 2

    @classmethod
    def parse(cls, value) -> Quantization:
        if isinstance(value, Quantization):
            return value
        if isinstance(value, int):
            return cls(value)
        names = {"float32": cls.FLOAT32, "float16": cls.FLOAT16, "uint8": cls.UINT8}
        try:
            return names[str(value).lower()]
        except KeyError:
            raise ConfigError(f"unknown quantization {value!r}; choose from {sorted(names)}") from None


class SerializationError(ValueError):
    pass


def payload_size(shape: tuple[int, int], mode: Quantization) -> int:
    n = int(np.prod(shape))
    return {Quantization.FLOAT32: 4 * n, Quantization.FLOAT16: 2 * n, Quantization.UINT8: 8 + n}[mode]


def record_size(shape: tuple[int, int], mode: Quantization) -> int:
    return RECORD_PREFIX.size + payload_size(shape, mode)


def _encode_payload(values: np.ndarray, mode: Quantization) -> bytes:
    flat = np.asarray(values, dtype=np.float32).reshape(-1)
    if mode is Quantization.FLOAT32:
        return flat.astype("<f4").tobytes()
    if mode is Quantization.FLOAT16:
        with np.errstate(over="ignore"):
            half = flat.astype("<f2")
        if not np.all(np.isfinite(half)):
            raise SerializationError("value out of float16 range")
        return half.tobytes()
    lo, hi = np.float32(flat.min()), np.float32(flat.max())
    scale = np.float64(hi) - np.float64(lo)
    if scale > 0:
        q = np.rint((flat.astype(np.float64) - lo) / scale * 255.0)
    else:
        q = np.zeros(flat.shape)
    return struct.pack("<2f", lo, hi) + np.clip(q, 0, 255).astype(np.uint8).tobytes()


def _decode_payload(raw: bytes, offset: int, shape, mode: Quantization) -> np.ndarray:
    n = int(np.prod(shape))
    if mode is Quantization.FLOAT32:
        values = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
    elif mode is Quantization.FLOAT16:
        values = np.frombuffer(raw, dtype="<f2", count=n, offset=offset).astype(np.float32)
    else:
        lo, hi = struct.unpack_from("<2f", raw, offset)
        q = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset + 8).astype(np.float64)
        values = (lo + q * ((np.float64(hi) - np.float64(lo)) / 255.0)).astype(np.float32)
    return values.reshape(shape).copy()


def _profile_for_shape(shape) -> ModelProfile:
    for p in PROFILES_BY_ID.values():
        if p.bottleneck_shape == tuple(shape):
            return p
    raise SerializationError(f"no profile has bottleneck shape {tuple(shape)}")


def encode_record(record: DescriptorRecord, mode: Quantization) -> bytes:
    b = record.bottleneck
    if not np.all(np.isfinite(b)):
        raise SerializationError(f"scan {record.scan_id}: bottleneck has non-finite values")
    prefix = RECORD_PREFIX.pack(record.scan_id, record.timestamp, *record.pose.matrix().reshape(-1))
    return prefix + _encode_payload(b, mode)


def serialize_descriptors(records: Sequence[DescriptorRecord], mode="float32", profile: ModelProfile | str | None = None) -> bytes:
    """Encode records as one RECB stream. The profile defaults to the one matching the bottleneck shape."""
    mode = Quantization.parse(mode)
    records = list(records)
    if profile is None:
        profile = _profile_for_shape(records[0].bottleneck.shape) if records else get_profile("kitti")
    elif isinstance(profile, str):
        profile = get_profile(profile)
    for r in records:
        if r.bottleneck.shape != profile.bottleneck_shape:
            raise SerializationError(
                f"scan {r.scan_id}: bottleneck {r.bottleneck.shape} does not match profile {profile.name}"
            )
    head = HEADER.pack(RECB_MAGIC, RECB_VERSION, profile.profile_id, int(mode), len(records))
    return head + b"".join(encode_record(r, mode) for r in records)


def serialize_descriptor(record: DescriptorRecord, mode="float32", profile=None) -> bytes:
    """A single-record RECB stream."""
    return serialize_descriptors([record], mode, profile)


@dataclass
class DescriptorStream:
    profile: ModelProfile
    mode: Quantization
    records: list[DescriptorRecord]


def deserialize_descriptors(raw: bytes) -> DescriptorStream:
    if len(raw) < HEADER.size:
        raise FormatError("truncated RECB header", offset=len(raw))
    magic, version, profile_id, mode_id, count = HEADER.unpack_from(raw)
    if magic != RECB_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != RECB_VERSION:
        raise FormatError(f"unsupported RECB version {version}", offset=4)
    if profile_id not in PROFILES_BY_ID:
        raise FormatError(f"unknown profile id {profile_id}", offset=6)
    try:
        mode = Quantization(mode_id)
    except ValueError:
        raise FormatError(f"unknown quantization mode {mode_id}", offset=7) from None
    profile = PROFILES_BY_ID[profile_id]
    shape = profile.bottleneck_shape
    off = HEADER.size
    records = []
    for _ in range(count):
        if off + RECORD_PREFIX.size > len(raw):
            raise FormatError("truncated record header", offset=off)
        scan_id, ts, *pose = RECORD_PREFIX.unpack_from(raw, off)
        payload_at = off + RECORD_PREFIX.size
        if payload_at + payload_size(shape, mode) > len(raw):
            raise FormatError(f"truncated payload for scan {scan_id}", offset=payload_at)
        values = _decode_payload(raw, payload_at, shape, mode)
        try:
            p = Pose.from_matrix(np.array(pose, dtype=np.float64).reshape(3, 4))
        except ValueError as exc:
            raise FormatError(f"scan {scan_id}: invalid pose ({exc})", offset=off + 12) from None
        records.append(DescriptorRecord(scan_id, values, p, ts))
        off = payload_at + payload_size(shape, mode)
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after {count} records", offset=off)
    return DescriptorStream(profile, mode, records)


def deserialize_descriptor(raw: bytes) -> DescriptorRecord:
    stream = deserialize_descriptors(raw)
    if len(stream.records) != 1:
        raise FormatError(f"expected one record, found {len(stream.records)}", offset=8)
    return stream.records[0]


def write_descriptor_file(path: str | os.PathLike, records, mode="float32", profile=None) -> int:
    data = serialize_descriptors(records, mode, profile)
    Path(path).write_bytes(data)
    return len(data)


def read_descriptor_file(path: str | os.PathLike) -> DescriptorStream:
    try:
        return deserialize_descriptors(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def quantization_bound(values: np.ndarray, mode) -> float:
    """Largest per-element error the encoding may introduce for ``values``."""
    mode = Quantization.parse(mode)
    v = np.asarray(values, dtype=np.float32)
    if mode is Quantization.FLOAT32:
        return 0.0
    if mode is Quantization.FLOAT16:
        # round-to-nearest: half the spacing at the largest magnitude
        return float(np.spacing(np.float16(np.max(np.abs(v))))) / 2.0
    # affine rounding error plus the float32 rounding of the decoded value
    half_ulp = float(np.spacing(np.max(np.abs(v)))) / 2.0
    return (float(v.max()) - float(v.min())) / 510.0 + half_ulp


# bandwidth accounting -------------------------------------------------------

KB = 1000.0
MB = 1_000_000.0

TABLE_LABELS = {
    "duration": "Mission Duration (s)",
    "raw_rate": "Bandwidth for transmitting original clouds (kB/s)",
    "descriptor_rate": "Bandwidth for bottleneck vectors (kB/s)",
    "raw_total": "Final map size from original clouds (MB)",
    "descriptor_total": "Final size of bottleneck vectors (MB)",
}


@dataclass(frozen=True)
class MissionStats:
    duration: float
    raw_rate: float
    descriptor_rate: float
    raw_total: float
    descriptor_total: float
    ratio: float
    n_scans: int = 0
    n_points: int = 0
    n_descriptors: int = 0


def mission_report(scans: Sequence[tuple[int, int]], descriptors: Sequence[int], duration: float) -> MissionStats:
    """Rates (kB/s) and totals (MB) for sending raw scans versus descriptors.

    ``scans`` holds ``(point count, bytes)`` per scan, ``descriptors`` the
    serialized byte length of each descriptor. ``ratio`` is raw over
    descriptor rate, infinite when no descriptor bytes are sent.
    """
    if not duration > 0:
        raise ConfigError(f"mission duration must be positive, got {duration}")
    raw_bytes = sum(int(b) for _, b in scans)
    desc_bytes = sum(int(b) for b in descriptors)
    raw_rate = raw_bytes / duration / KB
    desc_rate = desc_bytes / duration / KB
    return MissionStats(
        duration=float(duration),
        raw_rate=raw_rate,
        descriptor_rate=desc_rate,
        raw_total=raw_bytes / MB,
        descriptor_total=desc_bytes / MB,
        ratio=raw_rate / desc_rate if desc_bytes else math.inf,
        n_scans=len(scans),
        n_points=sum(int(p) for p, _ in scans),
        n_descriptors=len(descriptors),
    )


def _num(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:,.2f}".rstrip("0").rstrip(".") if v != int(v) else f"{int(v):,}"


def format_mission_report(columns: dict[str, MissionStats]) -> str:
    """Plain-text table with one column per mission, rows as in the reference table."""
    names = list(columns)
    label_w = max(len(label) for label in TABLE_LABELS.values()) + 2
    widths = [max(len(n), 12) for n in names]
    lines = ["Statistics:".ljust(label_w) + "".join(n.rjust(w + 2) for n, w in zip(names, widths))]
    for key, label in TABLE_LABELS.items():
        cells = [_num(getattr(columns[n], key)).rjust(w + 2) for n, w in zip(names, widths)]
        lines.append(label.ljust(label_w) + "".join(cells))
    ratio = [(_num(columns[n].ratio) + "x").rjust(w + 2) for n, w in zip(names, widths)]
    lines.append("Bandwidth reduction (original / bottleneck)".ljust(label_w) + "".join(ratio))
    return "\n".join(lines) + "\n"


# map reconstruction ----------------------------------------------------------


def reconstruct_map(
    records: Sequence[DescriptorRecord],
    model,
    poses: dict[int, Pose] | None = None,
    projection: ProjectionConfig | None = None,
) -> PointCloud:
    """Decode every descriptor, unproject it and place it with its pose.

    ``poses`` maps scan_id to pose; when omitted the pose stored in each
    record is used. Scans are concatenated in scan_id order.
    """
    records = sorted(records, key=lambda r: r.scan_id)
    if not records:
        return PointCloud.empty()
    projection = projection or model.profile.projection()
    if poses is not None:
        missing = [r.scan_id for r in records if r.scan_id not in poses]
        if missing:
            raise ConfigError(f"no pose for scan_id {missing[0]}")
    was_training = model.training
    model.eval()
    parts = []
    try:
        with no_grad():
            for r in records:
                out = model.decode(Tensor(r.bottleneck[None]))
                image = from_network(out, projection)[0]
                pose = poses[r.scan_id] if poses is not None else r.pose
                parts.append(pose.apply(unproject(image).points))
    finally:
        if was_training:
            model.train()
    return PointCloud(np.concatenate(parts).reshape(-1, 3))
