"""Depth-ordered forward warping, channel-attention feature fusion and
multi-scale pyramids.

Forward warping splats every source pixel to its flow-displaced target and
resolves collisions by source depth: the surviving value at a contested
target is the one with the minimum source depth, ties broken by the smaller
row-major source index. This makes the warp a pure function of its inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._binio import atomic_write_bytes, expect_magic, read_exact, read_u32
from .geometry import DepthMap
from .tracking import PanopticMap

# flow entries at or above this magnitude mark unknown flow (Middlebury style)
FLOW_INVALID = 1e9


class WarpFusionError(ValueError):
    pass


@dataclass
class FlowField:
    """Per-pixel (du, dv) displacement in pixels with a validity mask."""

    values: np.ndarray  # (H, W, 2) float64
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[2] != 2:
            raise WarpFusionError("flow values must have shape (H, W, 2)")
        if self.valid.shape != self.values.shape[:2]:
            raise WarpFusionError("flow validity mask must be (H, W)")
        if np.any(self.valid & ~np.all(np.isfinite(self.values), axis=-1)):
            raise WarpFusionError("valid flow entries must be finite")

    @staticmethod
    def from_values(values) -> "FlowField":
        values = np.asarray(values, dtype=np.float64)
        valid = np.all(np.isfinite(values) & (np.abs(values) < FLOW_INVALID), axis=-1)
        return FlowField(values, valid)

    @property
    def shape(self):
        return self.valid.shape

    def copy(self) -> "FlowField":
        return FlowField(self.values.copy(), self.valid.copy())


def _splat_winners(flow: FlowField, depth: DepthMap):
    """Resolve the forward-splat conflicts.

    Returns (target_flat, source_flat) index arrays covering each written
    target exactly once; the survivor at a target has minimum source depth,
    ties broken by the smaller row-major source index.
    """
    h, w = flow.shape
    grid_x, grid_y = np.meshgrid(np.arange(w), np.arange(h))
    tx = np.floor(grid_x + flow.values[..., 0] + 0.5).astype(np.int64)
    ty = np.floor(grid_y + flow.values[..., 1] + 0.5).astype(np.int64)
    ok = flow.valid & depth.valid & (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    src = np.flatnonzero(ok.ravel())
    if src.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    tgt = (ty.ravel()[src] * w + tx.ravel()[src]).astype(np.int64)
    d = depth.values.ravel()[src]
    order = np.lexsort((src, d))  # ascending depth, then ascending source index
    tgt_ord, src_ord = tgt[order], src[order]
    _, first = np.unique(tgt_ord, return_index=True)
    return tgt_ord[first], src_ord[first]


def warp_forward(src, flow: FlowField, depth: DepthMap):
    """Forward-warp a feature map or panoptic map along an optical flow.

    Every source pixel is splatted to ``round(x + f(x))``; nearer sources
    overwrite farther ones at contested targets; out-of-bounds targets are
    dropped. Returns the warped map and a coverage mask over written targets.
    """
    if isinstance(src, PanopticMap):
        if src.shape != flow.shape or src.shape != depth.shape:
            raise WarpFusionError("source, flow and depth sizes differ")
        tgt, winner = _splat_winners(flow, depth)
        out = PanopticMap(
            np.zeros(src.shape, dtype=np.uint16),
            np.zeros(src.shape, dtype=np.uint16),
            np.zeros(src.shape, dtype=bool),
        )
        out.semantics.ravel()[tgt] = src.semantics.ravel()[winner]
        out.instances.ravel()[tgt] = src.instances.ravel()[winner]
        out.unknown.ravel()[tgt] = src.unknown.ravel()[winner]
        coverage = np.zeros(src.shape, dtype=bool)
        coverage.ravel()[tgt] = True
        return out, coverage

    arr = np.asarray(src)
    if arr.shape[:2] != flow.shape or arr.shape[:2] != depth.shape:
        raise WarpFusionError("source, flow and depth sizes differ")
    tgt, winner = _splat_winners(flow, depth)
    flat = arr.reshape(arr.shape[0] * arr.shape[1], -1)
    out = np.zeros_like(flat)
    out[tgt] = flat[winner]
    coverage = np.zeros(arr.shape[0] * arr.shape[1], dtype=bool)
    coverage[tgt] = True
    return out.reshape(arr.shape), coverage.reshape(arr.shape[:2])


@dataclass
class AttentionGate:
    """Channel gate plus fusion kernel for one fusion branch.

    The base mechanism is the minimal one: global average pool, per-channel
    affine map, logistic squashing. ``kernel`` has shape (n, n, 2C, C) and is
    applied with zero padding and stride 1. Subclasses swap the gating
    mechanism while keeping the same interface.
    """

    scale: np.ndarray  # (2C,)
    bias: np.ndarray  # (2C,)
    kernel: np.ndarray  # (n, n, 2C, C)

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        n = self.kernel.shape[0]
        if self.kernel.ndim != 4 or self.kernel.shape[1] != n:
            raise WarpFusionError("kernel must have shape (n, n, 2C, C)")
        if n % 2 != 1:
            raise WarpFusionError("kernel size must be odd")
        if self.kernel.shape[2] != 2 * self.kernel.shape[3]:
            raise WarpFusionError("kernel input channels must be twice its output channels")
        if self.scale.shape != (self.channels,) or self.bias.shape != (self.channels,):
            raise WarpFusionError("gate parameters must have length 2C")
        if not (
            np.all(np.isfinite(self.scale))
            and np.all(np.isfinite(self.bias))
            and np.all(np.isfinite(self.kernel))
        ):
            raise WarpFusionError("gate parameters must be finite")

    @property
    def channels(self) -> int:
        """Gated channel count 2C."""
        return self.kernel.shape[2]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[0]

    def weights(self, pooled: np.ndarray) -> np.ndarray:
        return _sigmoid(self.scale * pooled + self.bias)


class SqueezeExciteGate(AttentionGate):
    """Bottleneck variant: two affine stages with a ReLU in between."""

    def __init__(self, scale, bias, kernel, w_down, w_up):
        super().__init__(scale, bias, kernel)
        self.w_down = np.asarray(w_down, dtype=np.float64)  # (r, 2C)
        self.w_up = np.asarray(w_up, dtype=np.float64)  # (2C, r)

    def weights(self, pooled):
        hidden = np.maximum(self.w_down @ pooled, 0.0)
        return _sigmoid(self.w_up @ hidden + self.bias)


class EfficientChannelGate(AttentionGate):
    """1-D convolution across the pooled channel vector."""

    def __init__(self, scale, bias, kernel, conv1d):
        super().__init__(scale, bias, kernel)
        self.conv1d = np.asarray(conv1d, dtype=np.float64)

    def weights(self, pooled):
        pad = self.conv1d.size // 2
        padded = np.pad(pooled, pad)
        mixed = np.correlate(padded, self.conv1d, mode="valid")
        return _sigmoid(mixed + self.bias)


class ConstantGate(AttentionGate):
    """Fixed channel weights; a testing and ablation device."""

    def __init__(self, weights, kernel):
        fixed = np.asarray(weights, dtype=np.float64)
        super().__init__(np.zeros(fixed.size), np.zeros(fixed.size), kernel)
        self._fixed = fixed

    def weights(self, pooled):
        return self._fixed.copy()


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def _check_feature_map(z, name):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[2] < 1:
        raise WarpFusionError(f"{name} must have shape (H, W, C) with C >= 1")
    if not np.all(np.isfinite(z)):
        raise WarpFusionError(f"{name} must be finite")
    return z


def channel_attention(concat, gate: AttentionGate) -> np.ndarray:
    """Channel weights for a 2C-channel map via the gate's mechanism over
    the globally average-pooled channel statistics."""
    concat = _check_feature_map(concat, "concat")
    if concat.shape[2] != gate.channels:
        raise WarpFusionError(
            f"channel mismatch: map has {concat.shape[2]}, gate expects {gate.channels}"
        )
    pooled = concat.mean(axis=(0, 1))
    return gate.weights(pooled)


def conv2d(x, kernel) -> np.ndarray:
    """Dense 2-D convolution, zero padding, stride 1.

    ``x`` is (H, W, Cin), ``kernel`` is (n, n, Cin, Cout).
    """
    n = kernel.shape[0]
    pad = n // 2
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (n, n), axis=(0, 1))
    return np.einsum("hwcij,ijco->hwo", win, kernel, optimize=True)


def ag_fuse(z_t, z_warped, gate: AttentionGate) -> np.ndarray:
    """Attention-gated fusion of the current features with warped previous
    features.

    Concatenates along channels (warped first, current second), scales each
    channel by its attention weight and convolves down to C channels.
    """
    z_t = _check_feature_map(z_t, "z_t")
    z_warped = _check_feature_map(z_warped, "z_warped")
    if z_t.shape != z_warped.shape:
        raise WarpFusionError("current and warped feature maps must share one shape")
    concat = np.concatenate([z_warped, z_t], axis=-1)
    if concat.shape[2] != gate.channels:
        raise WarpFusionError("gate channel count does not match the concatenated maps")
    weights = channel_attention(concat, gate)
    return conv2d(concat * weights, gate.kernel)


def ag_fuse_all(z_t, z_warped, bank) -> list:
    """One fused map per branch, mirroring one fusion per decoding stage."""
    return [ag_fuse(z_t, z_warped, gate) for gate in bank]


@dataclass
class GateTangent:
    """Perturbation direction of an affine gate's parameters."""

    scale: np.ndarray
    bias: np.ndarray
    kernel: np.ndarray

    @staticmethod
    def zeros(gate: AttentionGate) -> "GateTangent":
        return GateTangent(
            np.zeros_like(gate.scale), np.zeros_like(gate.bias), np.zeros_like(gate.kernel)
        )


def ag_fuse_jvp(z_t, z_warped, gate: AttentionGate, d_z_t, d_z_warped, d_gate: GateTangent):
    """Directional derivative of :func:`ag_fuse` along input and parameter
    perturbations. Implemented for the base affine gate mechanism."""
    if type(gate) is not AttentionGate:
        raise WarpFusionError("gradient path is implemented for the affine gate")
    z_t = _check_feature_map(z_t, "z_t")
    z_warped = _check_feature_map(z_warped, "z_warped")
    d_z_t = np.asarray(d_z_t, dtype=np.float64)
    d_z_warped = np.asarray(d_z_warped, dtype=np.float64)
    if z_t.shape != z_warped.shape or d_z_t.shape != z_t.shape or d_z_warped.shape != z_t.shape:
        raise WarpFusionError("perturbations must match the feature map shapes")

    concat = np.concatenate([z_warped, z_t], axis=-1)
    d_concat = np.concatenate([d_z_warped, d_z_t], axis=-1)
    pooled = concat.mean(axis=(0, 1))
    d_pooled = d_concat.mean(axis=(0, 1))
    a = _sigmoid(gate.scale * pooled + gate.bias)
    d_pre = d_gate.scale * pooled + gate.scale * d_pooled + d_gate.bias
    d_a = a * (1.0 - a) * d_pre
    d_scaled = d_concat * a + concat * d_a
    return conv2d(d_scaled, gate.kernel) + conv2d(concat * a, d_gate.kernel)


@dataclass
class Pyramid:
    """K feature or raster levels; level k has sides ceil(side / 2**k)."""

    levels: list
    valid: list = None

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]


def _avg_pool2(x, valid=None):
    h, w = x.shape[:2]
    hk, wk = (h + 1) // 2, (w + 1) // 2
    rows = np.arange(h) // 2
    cols = np.arange(w) // 2
    idx = (rows[:, None] * wk + cols[None, :]).ravel()
    channels = 1 if x.ndim == 2 else x.shape[2]
    flat = x.reshape(h * w, channels).astype(np.float64)
    weight = np.ones(h * w) if valid is None else valid.ravel().astype(np.float64)
    sums = np.zeros((hk * wk, channels))
    np.add.at(sums, idx, flat * weight[:, None])
    counts = np.zeros(hk * wk)
    np.add.at(counts, idx, weight)
    covered = counts > 0
    out = np.zeros_like(sums)
    out[covered] = sums[covered] / counts[covered, None]
    out = out.reshape((hk, wk) if x.ndim == 2 else (hk, wk, channels))
    return out, covered.reshape(hk, wk)


def build_pyramid(base, levels: int, valid=None) -> Pyramid:
    """Average-pooling pyramid with ``levels`` levels, level 0 the base.

    Pooling averages over valid pixels only when a validity mask is given;
    a pooled pixel is valid when any contributing pixel was.
    """
    if levels < 1:
        raise WarpFusionError("pyramid needs at least one level")
    base = np.asarray(base, dtype=np.float64)
    masks = [np.ones(base.shape[:2], dtype=bool) if valid is None else np.asarray(valid, bool)]
    if valid is None:
        level0 = base.copy()
    else:
        m = masks[0] if base.ndim == 2 else masks[0][..., None]
        level0 = np.where(m, base, 0.0)
    out = [level0]
    for _ in range(levels - 1):
        pooled, covered = _avg_pool2(out[-1], masks[-1])
        out.append(pooled)
        masks.append(covered)
    return Pyramid(out, masks if valid is not None else None)


def default_kernel_size(width: int, height: int) -> int:
    """Fusion kernel size by image area: 3 up to 1242x375, 7 above 1920x1080."""
    area = width * height
    if area <= 1242 * 375:
        return 3
    if area > 1920 * 1080:
        return 7
    return 5


AGFW_MAGIC = b"AGFW"


def random_fusion_bank(branches: int, channels: int, kernel_size: int, seed: int) -> list:
    """Deterministic pseudo-random gate initialization for a given seed."""
    rng = np.random.default_rng(seed)
    bank = []
    for _ in range(branches):
        scale = rng.normal(0.0, 0.5, size=2 * channels)
        bias = rng.normal(0.0, 0.5, size=2 * channels)
        fan_in = kernel_size * kernel_size * 2 * channels
        kernel = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(kernel_size, kernel_size, 2 * channels, channels))
        bank.append(AttentionGate(scale, bias, kernel))
    return bank


def save_fusion_bank(path, bank):
    """Serialize affine gates: magic, branch count, then per branch C, n,
    the 2C (scale, bias) pairs and the row-major kernel, all little-endian."""
    blob = bytearray(AGFW_MAGIC)
    blob += struct.pack("<I", len(bank))
    for gate in bank:
        c = gate.kernel.shape[3]
        n = gate.kernel_size
        blob += struct.pack("<II", c, n)
        pairs = np.stack([gate.scale, gate.bias], axis=1).astype("<f4")
        blob += pairs.tobytes()
        blob += gate.kernel.astype("<f4").tobytes()
    atomic_write_bytes(path, bytes(blob))


def load_fusion_bank(path) -> list:
    with open(path, "rb") as f:
        expect_magic(f, AGFW_MAGIC, path)
        count = read_u32(f, path)
        bank = []
        for _ in range(count):
            c = read_u32(f, path)
            n = read_u32(f, path)
            pairs = np.frombuffer(read_exact(f, 4 * 2 * (2 * c), path), dtype="<f4")
            pairs = pairs.reshape(2 * c, 2).astype(np.float64)
            kernel = np.frombuffer(read_exact(f, 4 * n * n * 2 * c * c, path), dtype="<f4")
            kernel = kernel.reshape(n, n, 2 * c, c).astype(np.float64)
            bank.append(AttentionGate(pairs[:, 0], pairs[:, 1], kernel))
    return bank
