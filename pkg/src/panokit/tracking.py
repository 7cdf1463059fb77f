"""Instance association and identity repair for panoptic label maps.

A panoptic map stores a semantic class id (0 = void) and an instance id
(0 = stuff / no instance) per pixel, plus an "unknown" flag plane marking
pixels whose identity could not be trusted; unknown pixels are excluded
from optical-flow matching downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"
IGNORE = "ignore"


class TrackingError(ValueError):
    pass


@dataclass
class PanopticMap:
    semantics: np.ndarray  # (H, W) uint16, 0 = void
    instances: np.ndarray  # (H, W) uint16, > 0 only on "thing" pixels
    unknown: np.ndarray = None  # (H, W) bool

    def __post_init__(self):
        self.semantics = np.asarray(self.semantics, dtype=np.uint16)
        self.instances = np.asarray(self.instances, dtype=np.uint16)
        if self.unknown is None:
            self.unknown = np.zeros(self.semantics.shape, dtype=bool)
        self.unknown = np.asarray(self.unknown, dtype=bool)
        if not (self.semantics.shape == self.instances.shape == self.unknown.shape):
            raise TrackingError("panoptic planes must share one (H, W) shape")

    @property
    def shape(self):
        return self.semantics.shape

    def copy(self) -> "PanopticMap":
        return PanopticMap(self.semantics.copy(), self.instances.copy(), self.unknown.copy())

    def segments(self, frame: int = 0) -> list["Segment"]:
        """Extract segments: one per (class, instance) pair for things, one
        per class for stuff. Void pixels yield no segment. Sorted by key."""
        key = self.semantics.astype(np.int64) * 65536 + self.instances.astype(np.int64)
        flat = key.ravel()
        order = np.argsort(flat, kind="stable")
        uniq, starts = np.unique(flat[order], return_index=True)
        out = []
        for u, lo, hi in zip(uniq, starts, list(starts[1:]) + [flat.size]):
            class_id, inst_id = int(u // 65536), int(u % 65536)
            if class_id == 0:
                continue
            idx = np.sort(order[lo:hi])
            out.append(Segment.from_indices(frame, class_id, inst_id, idx, self.shape))
        return out


@dataclass
class Segment:
    """A run-length encoded pixel set belonging to one panoptic entity."""

    frame: int
    class_id: int
    instance_id: int
    starts: np.ndarray  # run starts, row-major flat indices
    lengths: np.ndarray
    shape: tuple = field(default=None)

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.pixel_count == 0:
            raise TrackingError("segment pixel set must be non-empty")
        if self.shape is not None:
            last = self.starts[-1] + self.lengths[-1]
            if self.starts[0] < 0 or last > self.shape[0] * self.shape[1]:
                raise TrackingError("segment pixels out of image bounds")

    @property
    def pixel_count(self) -> int:
        return int(self.lengths.sum())

    @staticmethod
    def from_indices(frame, class_id, instance_id, flat_indices, shape) -> "Segment":
        idx = np.asarray(flat_indices, dtype=np.int64)
        if idx.size == 0:
            raise TrackingError("segment pixel set must be non-empty")
        breaks = np.flatnonzero(np.diff(idx) != 1)
        starts = idx[np.concatenate([[0], breaks + 1])]
        ends = idx[np.concatenate([breaks, [idx.size - 1]])]
        return Segment(frame, class_id, instance_id, starts, ends - starts + 1, tuple(shape))

    @staticmethod
    def from_mask(frame, class_id, instance_id, mask) -> "Segment":
        mask = np.asarray(mask, dtype=bool)
        return Segment.from_indices(frame, class_id, instance_id, np.flatnonzero(mask), mask.shape)

    def indices(self) -> np.ndarray:
        return np.concatenate(
            [np.arange(s, s + n, dtype=np.int64) for s, n in zip(self.starts, self.lengths)]
        )

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        m[self.indices()] = True
        return m.reshape(self.shape)


def mask_iou(a: Segment, b: Segment) -> float:
    """Intersection over union of two segments' pixel sets."""
    if a.shape != b.shape:
        raise TrackingError("segments live on different frame sizes")
    ia, ib = a.indices(), b.indices()
    inter = np.intersect1d(ia, ib, assume_unique=True).size
    union = ia.size + ib.size - inter
    return inter / union


def associate_kernels(key, ref, alpha1: float = 0.7, alpha2: float = 0.3):
    """Label every (key, ref) segment pair by mask overlap.

    Pairs with IoU above ``alpha1`` are positive, below ``alpha2`` negative,
    anything in between is ignored.
    """
    if not (0.0 <= alpha2 <= alpha1 <= 1.0):
        raise TrackingError("thresholds must satisfy 0 <= alpha2 <= alpha1 <= 1")
    out = []
    for ki, kseg in enumerate(key):
        for ri, rseg in enumerate(ref):
            iou = mask_iou(kseg, rseg)
            if iou > alpha1:
                label = POSITIVE
            elif iou < alpha2:
                label = NEGATIVE
            else:
                label = IGNORE
            out.append((ki, ri, label))
    return out


def contrastive_track_score(v, positives, negatives) -> float:
    """Contrastive tracking score of an embedding against positive and
    negative targets, evaluated with log-sum-exp stabilization.

    For each positive target the score accumulates
    ``-log(exp(v.k+) / (exp(v.k+) + sum_k- exp(v.k-)))``.
    """
    v = np.asarray(v, dtype=np.float64)
    if len(positives) == 0:
        raise TrackingError("at least one positive target is required")
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    if len(negatives) == 0:
        neg = np.zeros((0, v.size))
    else:
        neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if pos.shape[1] != v.size or neg.shape[1] != v.size:
        raise TrackingError("embedding lengths differ")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise TrackingError("embeddings must be finite")
    pos_logits = pos @ v
    neg_logits = neg @ v
    total = 0.0
    for p in pos_logits:
        logits = np.concatenate([[p], neg_logits])
        m = logits.max()
        lse = m + np.log(np.sum(np.exp(logits - m)))
        total += lse - p
    return float(total)


def aux_cosine_score(v, k, c) -> float:
    """Squared gap between the cosine similarity of two embeddings and a
    binary match target ``c``."""
    v = np.asarray(v, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    nv, nk = np.linalg.norm(v), np.linalg.norm(k)
    if nv == 0 or nk == 0:
        raise TrackingError("zero embedding has no cosine similarity")
    return float((v @ k / (nv * nk) - c) ** 2)


class IdAllocator:
    """Monotone instance-id counter, never reused within a sequence.

    Single-owner state: callers must serialize allocation per sequence.
    """

    def __init__(self, start: int = 1):
        self._next = int(start)

    @staticmethod
    def above(*maps: PanopticMap) -> "IdAllocator":
        top = 0
        for m in maps:
            if m.instances.size:
                top = max(top, int(m.instances.max()))
        return IdAllocator(top + 1)

    def allocate(self) -> int:
        out = self._next
        self._next += 1
        return out


@dataclass
class MatchRecord:
    frame: int
    curr_id: int
    prev_id: int
    iou: float

    def line(self) -> str:
        return f"{self.frame} {self.curr_id} <- {self.prev_id} {self.iou:.6f}"


@dataclass
class UnknownRecord:
    frame: int
    seg_id: int
    reason: str = "class_mismatch"

    def line(self) -> str:
        return f"{self.frame} {self.seg_id} UNKNOWN reason={self.reason}"


@dataclass
class PostMatchResult:
    current: PanopticMap
    previous: PanopticMap
    matches: list
    unknowns: list

    def report_lines(self) -> list[str]:
        return [r.line() for r in self.matches] + [r.line() for r in self.unknowns]


def post_match(
    prev: PanopticMap,
    curr: PanopticMap,
    flow_warp_of_prev: PanopticMap,
    iou_floor: float = 0.5,
    allocator: IdAllocator = None,
    frame: int = 1,
    compare_warped: bool = True,
) -> PostMatchResult:
    """Repair instance identities of ``curr`` against the previous frame.

    Each current segment is matched to the warped-previous segment of
    maximal IoU at or above ``iou_floor`` (set ``compare_warped=False`` to
    match against the raw previous map instead). Same-class matches inherit
    the previous instance id; class mismatches flag both segments' pixels
    unknown in their respective frames. Unmatched current thing segments
    receive fresh ids. Id inheritance is injective; ties resolve by larger
    IoU, then smaller current id.
    """
    if not (prev.shape == curr.shape == flow_warp_of_prev.shape):
        raise TrackingError("panoptic maps must share one shape")
    reference = flow_warp_of_prev if compare_warped else prev
    curr_segs = curr.segments(frame)
    ref_segs = reference.segments(frame - 1)

    candidates = []
    for ci, cseg in enumerate(curr_segs):
        for pi, pseg in enumerate(ref_segs):
            iou = mask_iou(cseg, pseg)
            if iou >= iou_floor:
                candidates.append((iou, ci, pi))
    candidates.sort(key=lambda t: (-t[0], curr_segs[t[1]].class_id, curr_segs[t[1]].instance_id))

    assigned_curr, assigned_prev = set(), set()
    pairs = []
    for iou, ci, pi in candidates:
        if ci in assigned_curr or pi in assigned_prev:
            continue
        assigned_curr.add(ci)
        assigned_prev.add(pi)
        pairs.append((ci, pi, iou))

    out_curr = curr.copy()
    out_prev = prev.copy()
    if allocator is None:
        allocator = IdAllocator.above(prev, curr)
    matches, unknowns = [], []

    for ci, pi, iou in sorted(pairs, key=lambda t: (curr_segs[t[0]].class_id, curr_segs[t[0]].instance_id)):
        cseg, pseg = curr_segs[ci], ref_segs[pi]
        cmask = cseg.mask()
        if cseg.class_id == pseg.class_id:
            if cseg.instance_id > 0 and pseg.instance_id > 0:
                out_curr.instances[cmask] = pseg.instance_id
                matches.append(MatchRecord(frame, cseg.instance_id, pseg.instance_id, iou))
        else:
            out_curr.unknown |= cmask
            prev_mask = (out_prev.semantics == pseg.class_id) & (
                out_prev.instances == pseg.instance_id
            )
            out_prev.unknown |= prev_mask
            unknowns.append(UnknownRecord(frame, cseg.instance_id or cseg.class_id))
            unknowns.append(UnknownRecord(frame - 1, pseg.instance_id or pseg.class_id))

    for ci, cseg in enumerate(curr_segs):
        if ci in assigned_curr or cseg.instance_id == 0:
            continue
        out_curr.instances[cseg.mask()] = allocator.allocate()

    return PostMatchResult(out_curr, out_prev, matches, unknowns)
