"""Point-based rendering: descriptor cloud accumulation, Z-buffered
multi-scale rasterization and deterministic coarse-to-fine compositing.

Each cloud point carries an 8-vector descriptor whose first three channels
hold RGB in [0, 1]; the remaining channels are opaque payload. Rasterization
is exact: the surviving point at a pixel is the one of minimum camera-frame
depth, ties broken by the smaller point index, so the result is invariant
to point order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Z_MIN, CameraModel, Pose
from .odometry import refine_dynamic_mask

DESCRIPTOR_DIM = 8


class RenderingError(ValueError):
    pass


@dataclass
class DescriptorCloud:
    positions: np.ndarray  # (N, 3) world coordinates
    descriptors: np.ndarray  # (N, 8)
    source_frame: np.ndarray = None  # (N,)
    source_pixel: np.ndarray = None  # (N, 2)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        n = self.positions.shape[0]
        if self.descriptors.shape != (n, DESCRIPTOR_DIM):
            raise RenderingError(f"descriptors must be (N, {DESCRIPTOR_DIM})")
        if not np.all(np.isfinite(self.positions)):
            raise RenderingError("point positions must be finite")
        if self.source_frame is None:
            self.source_frame = np.full(n, -1, dtype=np.int64)
        if self.source_pixel is None:
            self.source_pixel = np.full((n, 2), -1, dtype=np.int64)
        self.source_frame = np.asarray(self.source_frame, dtype=np.int64)
        self.source_pixel = np.asarray(self.source_pixel, dtype=np.int64)

    def __len__(self):
        return self.positions.shape[0]

    @staticmethod
    def empty() -> "DescriptorCloud":
        return DescriptorCloud(np.zeros((0, 3)), np.zeros((0, DESCRIPTOR_DIM)))


@dataclass
class RasterLevel:
    descriptors: np.ndarray  # (H, W, 8)
    depth: np.ndarray  # (H, W), finite positive where occupied
    occupied: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.occupied.shape


def accumulate_points(frames, trajectory, cam: CameraModel, stride: int = 1) -> DescriptorCloud:
    """Backproject every stride-th valid, non-dynamic pixel into the world.

    ``trajectory`` supplies one world-from-camera pose per frame. Descriptor
    channels 0..2 are seeded from the frame RGB scaled to [0, 1]; channels
    3..7 start at zero. Pixels on refined-dynamic or unknown regions are
    left out of the cloud.
    """
    if stride < 1:
        raise RenderingError("stride must be at least 1")
    if len(trajectory) != len(frames):
        raise RenderingError("trajectory and frame counts differ")
    pos_chunks, desc_chunks, frame_chunks, pix_chunks = [], [], [], []
    for f, (_, pose) in zip(frames, trajectory):
        if pose is None:
            raise RenderingError(f"frame {f.index} has no pose")
        h, w = f.depth.shape
        rr, cc = np.meshgrid(np.arange(0, h, stride), np.arange(0, w, stride), indexing="ij")
        rr, cc = rr.ravel(), cc.ravel()
        keep = f.depth.valid[rr, cc]
        if f.panoptic is not None and f.dynamic is not None:
            dyn = refine_dynamic_mask(f.dynamic, f.panoptic)
            keep &= dyn[rr, cc] < 1.0
        elif f.panoptic is not None:
            keep &= ~f.panoptic.unknown[rr, cc]
        rr, cc = rr[keep], cc[keep]
        if rr.size == 0:
            continue
        d = f.depth.values[rr, cc]
        rays = np.stack([(cc - cam.cx) / cam.fx * d, (rr - cam.cy) / cam.fy * d, d], axis=-1)
        pos_chunks.append(pose.apply(rays))
        desc = np.zeros((rr.size, DESCRIPTOR_DIM))
        if f.image is not None:
            desc[:, :3] = f.image[rr, cc].astype(np.float64) / 255.0
        desc_chunks.append(desc)
        frame_chunks.append(np.full(rr.size, f.index, dtype=np.int64))
        pix_chunks.append(np.stack([cc, rr], axis=-1))
    if not pos_chunks:
        return DescriptorCloud.empty()
    return DescriptorCloud(
        np.concatenate(pos_chunks),
        np.concatenate(desc_chunks),
        np.concatenate(frame_chunks),
        np.concatenate(pix_chunks),
    )


def rasterize(cloud: DescriptorCloud, view: Pose, cam: CameraModel, levels: int = 4) -> list:
    """Z-buffered rasterization into a pyramid of ``levels`` levels.

    Level k halves the intrinsics k times (fx, fy, cx, cy scaled by 2^-k)
    with ceil-divided sizes. The winner at each pixel is the point of
    minimum camera depth, ties broken by the smaller point index; points at
    or behind the near plane write nothing.
    """
    if levels < 1:
        raise RenderingError("pyramid needs at least one level")
    cam_pts = view.inverse().apply(cloud.positions) if len(cloud) else np.zeros((0, 3))
    z = cam_pts[:, 2] if len(cloud) else np.zeros(0)
    out = []
    for k in range(levels):
        cam_k = cam.scaled(0.5**k)
        h, w = cam_k.height, cam_k.width
        level = RasterLevel(
            np.zeros((h, w, DESCRIPTOR_DIM)),
            np.zeros((h, w)),
            np.zeros((h, w), dtype=bool),
        )
        if len(cloud):
            ok = np.isfinite(z) & (z > Z_MIN)
            zs = np.where(ok, z, 1.0)
            u = cam_k.fx * cam_pts[:, 0] / zs + cam_k.cx
            v = cam_k.fy * cam_pts[:, 1] / zs + cam_k.cy
            px = np.floor(u + 0.5).astype(np.int64)
            py = np.floor(v + 0.5).astype(np.int64)
            ok &= (px >= 0) & (px < w) & (py >= 0) & (py < h)
            idx = np.flatnonzero(ok)
            if idx.size:
                tgt = py[idx] * w + px[idx]
                order = np.lexsort((idx, z[idx]))  # depth, then point index
                tgt_ord, src_ord = tgt[order], idx[order]
                _, first = np.unique(tgt_ord, return_index=True)
                winners_tgt = tgt_ord[first]
                winners_src = src_ord[first]
                level.descriptors.reshape(-1, DESCRIPTOR_DIM)[winners_tgt] = cloud.descriptors[
                    winners_src
                ]
                level.depth.ravel()[winners_tgt] = z[winners_src]
                level.occupied.ravel()[winners_tgt] = True
        out.append(level)
    return out


def composite(pyramid: list):
    """Coarse-to-fine hole filling: every empty fine pixel inherits its
    nearest occupied ancestor's descriptor by pixel replication.

    Returns the RGB image (descriptor channels 0..2 clamped to [0, 1]) and
    the coverage mask of pixels any level contributed to. Occupied
    finest-level pixels are never modified.
    """
    if len(pyramid) < 1:
        raise RenderingError("composite needs at least one raster level")
    canvas = pyramid[-1].descriptors.copy()
    cover = pyramid[-1].occupied.copy()
    for level in reversed(pyramid[:-1]):
        h, w = level.shape
        rows = np.arange(h) // 2
        cols = np.arange(w) // 2
        up = canvas[rows[:, None], cols[None, :]]
        up_cover = cover[rows[:, None], cols[None, :]]
        canvas = np.where(level.occupied[..., None], level.descriptors, up)
        cover = level.occupied | up_cover
    rgb = np.clip(canvas[..., :3], 0.0, 1.0)
    rgb[~cover] = 0.0
    return rgb, cover


@dataclass(frozen=True)
class SampleScore:
    image_id: int
    quality: float  # lower is better


def sample_quality(rendered, reference, mask=None) -> float:
    """Mean absolute RGB error; the ranking score for hard-sample mining."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise RenderingError("images must share one shape")
    diff = np.abs(a - b)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return 0.0
        return float(diff[mask].mean())
    return float(diff.mean())


def select_hard_samples(scores, n: int) -> list:
    """Ids of the n worst (largest) quality scores, descending, ties toward
    the smaller id."""
    scores = list(scores)
    if n > len(scores):
        raise RenderingError(f"cannot select {n} of {len(scores)} samples")
    ranked = sorted(scores, key=lambda s: (-s.quality, s.image_id))
    return [s.image_id for s in ranked[:n]]
