"""Binary and text file formats for depth, panoptic, flow, image, cloud and
trajectory data.

All multi-byte fields are little-endian. Writers are atomic (temp file plus
rename) and readers report the offending file and byte offset on truncation
or bad magic. Text floats are written with ``repr`` so that every format
round-trips bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from ._binio import (
    FormatError,
    atomic_write_bytes,
    atomic_write_text,
    expect_magic,
    read_exact,
    read_i32,
    read_u32,
)
from .geometry import DepthMap, Pose
from .tracking import PanopticMap
from .warpfusion import FLOW_INVALID, FlowField

FLO_MAGIC = 202021.25
PMAP_INSTANCE_LIMIT = 10000


# ---------------------------------------------------------------------------
# depth maps: magic DMAP, u32 width, u32 height, f32 row-major, NaN = invalid


def save_dmap(path, depth: DepthMap):
    h, w = depth.shape
    values = np.where(depth.valid, depth.values, np.nan).astype("<f4")
    atomic_write_bytes(path, b"DMAP" + struct.pack("<II", w, h) + values.tobytes())


def load_dmap(path) -> DepthMap:
    with open(path, "rb") as f:
        expect_magic(f, b"DMAP", path)
        w = read_u32(f, path)
        h = read_u32(f, path)
        raw = np.frombuffer(read_exact(f, 4 * w * h, path), dtype="<f4")
    values = raw.reshape(h, w).astype(np.float64)
    return DepthMap(values, np.isfinite(values) & (values > 0))


# ---------------------------------------------------------------------------
# panoptic maps: magic PMAP, u32 width, u32 height,
# u32 per pixel = semantic * 10000 + instance, then a u8 unknown-flag plane


def save_pmap(path, pan: PanopticMap):
    h, w = pan.shape
    if np.any(pan.instances >= PMAP_INSTANCE_LIMIT):
        raise FormatError(f"{path}: instance ids must be below {PMAP_INSTANCE_LIMIT}")
    packed = (
        pan.semantics.astype(np.uint32) * PMAP_INSTANCE_LIMIT + pan.instances.astype(np.uint32)
    ).astype("<u4")
    blob = b"PMAP" + struct.pack("<II", w, h) + packed.tobytes()
    blob += pan.unknown.astype(np.uint8).tobytes()
    atomic_write_bytes(path, blob)


def load_pmap(path) -> PanopticMap:
    with open(path, "rb") as f:
        expect_magic(f, b"PMAP", path)
        w = read_u32(f, path)
        h = read_u32(f, path)
        packed = np.frombuffer(read_exact(f, 4 * w * h, path), dtype="<u4").reshape(h, w)
        unknown = np.frombuffer(read_exact(f, w * h, path), dtype=np.uint8).reshape(h, w)
    return PanopticMap(
        (packed // PMAP_INSTANCE_LIMIT).astype(np.uint16),
        (packed % PMAP_INSTANCE_LIMIT).astype(np.uint16),
        unknown.astype(bool),
    )


# ---------------------------------------------------------------------------
# optical flow: Middlebury .flo


def save_flo(path, flow: FlowField):
    h, w = flow.shape
    values = flow.values.copy()
    values[~flow.valid] = 1e10  # sentinel for unknown flow
    blob = struct.pack("<fii", FLO_MAGIC, w, h) + values.astype("<f4").tobytes()
    atomic_write_bytes(path, blob)


def load_flo(path) -> FlowField:
    with open(path, "rb") as f:
        magic = struct.unpack("<f", read_exact(f, 4, path))[0]
        if magic != FLO_MAGIC:
            raise FormatError(f"{path}: bad magic at byte offset 0, not a .flo file")
        w = read_i32(f, path)
        h = read_i32(f, path)
        raw = np.frombuffer(read_exact(f, 4 * 2 * w * h, path), dtype="<f4")
    values = raw.reshape(h, w, 2).astype(np.float64)
    valid = np.all(np.isfinite(values) & (np.abs(values) < FLOW_INVALID), axis=-1)
    return FlowField(values, valid)


# ---------------------------------------------------------------------------
# images: binary PPM (P6, maxval 255)


def save_ppm(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"{path}: PPM expects a uint8 (H, W, 3) image")
    h, w = image.shape[:2]
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        expect_magic(f, b"P6\n", path)
        dims = b""
        while not dims.endswith(b"\n"):
            dims += read_exact(f, 1, path)
        try:
            w, h = (int(v) for v in dims.split())
        except ValueError:
            raise FormatError(f"{path}: malformed PPM size header") from None
        maxval = b""
        while not maxval.endswith(b"\n"):
            maxval += read_exact(f, 1, path)
        if maxval.strip() != b"255":
            raise FormatError(f"{path}: PPM maxval must be 255")
        data = read_exact(f, w * h * 3, path)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def image_to_float(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def float_to_image(values) -> np.ndarray:
    scaled = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# descriptor clouds: ascii PLY with properties x y z d0..d7 (f32)


def save_ply(path, positions, descriptors):
    positions = np.asarray(positions, dtype=np.float32)
    descriptors = np.asarray(descriptors, dtype=np.float32)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise FormatError(f"{path}: positions must be (N, 3)")
    if descriptors.shape != (positions.shape[0], 8):
        raise FormatError(f"{path}: descriptors must be (N, 8)")
    lines = ["ply", "format ascii 1.0", f"element vertex {positions.shape[0]}"]
    lines += [f"property float {name}" for name in ("x", "y", "z")]
    lines += [f"property float d{i}" for i in range(8)]
    lines.append("end_header")
    for p, d in zip(positions, descriptors):
        row = [repr(float(v)) for v in p] + [repr(float(v)) for v in d]
        lines.append(" ".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_ply(path):
    with open(path, "r", encoding="utf-8") as f:
        text = f.read().splitlines()
    if not text or text[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    count = None
    body_at = None
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        if line == "end_header":
            body_at = i + 1
            break
    if count is None or body_at is None:
        raise FormatError(f"{path}: PLY header missing vertex element or end_header")
    rows = text[body_at : body_at + count]
    if len(rows) != count:
        raise FormatError(f"{path}: PLY body truncated, wanted {count} rows, got {len(rows)}")
    data = np.array([[np.float32(v) for v in row.split()] for row in rows], dtype=np.float32)
    if data.size and data.shape[1] != 11:
        raise FormatError(f"{path}: PLY rows must hold x y z d0..d7")
    data = data.reshape(count, 11)
    return data[:, :3].astype(np.float64), data[:, 3:].astype(np.float64)


# ---------------------------------------------------------------------------
# trajectories: TUM text, one `timestamp tx ty tz qx qy qz qw` per line


def save_trajectory_tum(path, trajectory):
    lines = []
    for ts, pose in trajectory:
        qw, qx, qy, qz = pose.q
        vals = [ts, pose.t[0], pose.t[1], pose.t[2], qx, qy, qz, qw]
        lines.append(" ".join(repr(float(v)) for v in vals))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_trajectory_tum(path):
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}: line {ln} must hold 8 fields, got {len(parts)}")
            ts, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts)
            out.append((ts, Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))))
    return out


# ---------------------------------------------------------------------------
# fused feature maps: magic FMAP, u32 width, u32 height, u32 channels, f32


def save_fmap(path, values):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise FormatError(f"{path}: feature map must be (H, W, C)")
    h, w, c = values.shape
    blob = b"FMAP" + struct.pack("<III", w, h, c) + values.astype("<f4").tobytes()
    atomic_write_bytes(path, blob)


def load_fmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        expect_magic(f, b"FMAP", path)
        w = read_u32(f, path)
        h = read_u32(f, path)
        c = read_u32(f, path)
        raw = np.frombuffer(read_exact(f, 4 * w * h * c, path), dtype="<f4")
    return raw.reshape(h, w, c).astype(np.float64)
