"""Evaluation metrics: video panoptic quality over temporal tubes,
absolute trajectory error after similarity alignment, PSNR and SSIM.

VPQ rules implemented here (and mirrored by the brute-force oracle):
windows of ``k + 1`` frames slide with stride 1; tubes concatenate a
segment's masks across the window; ground-truth void and unknown-flagged
pixels (on either side) are excluded from all tube areas; tubes of one
class match when their tube IoU exceeds 0.5, which makes the match unique;
per-class PQ aggregates over all windows and VPQ averages the classes that
appear in the ground truth.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

TUBE_IOU_THRESHOLD = 0.5
PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DYNAMIC_RANGE = 255.0


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class VpqScores:
    total: float
    things: float
    stuff: float


@dataclass
class Tube:
    """A segment's mask stack across one temporal window."""

    class_id: int
    instance_id: int
    masks: list = field(default_factory=list)  # one (H, W) bool mask per frame

    def area(self) -> int:
        return int(sum(m.sum() for m in self.masks))


def _check_sequences(pred, gt, k):
    if len(pred) != len(gt):
        raise MetricsError("prediction and ground truth sequences differ in length")
    if len(gt) == 0:
        raise MetricsError("empty sequences")
    shape = gt[0].shape
    for p, g in zip(pred, gt):
        if p.shape != shape or g.shape != shape:
            raise MetricsError("all panoptic maps must share one size")
    if k + 1 > len(gt):
        raise MetricsError(f"window of {k + 1} frames exceeds sequence length {len(gt)}")


def _gt_class_census(gt):
    """Classes present in the ground truth and which of them are things."""
    present, things = set(), set()
    for g in gt:
        cls = np.unique(g.semantics)
        present.update(int(c) for c in cls if c != 0)
        thing_cls = np.unique(g.semantics[g.instances > 0])
        things.update(int(c) for c in thing_cls if c != 0)
    return present, things


def _average(stats, classes):
    total, n = 0.0, 0
    for c in classes:
        iou_sum, tp, fp, fn = stats[c]
        if tp + fp + fn == 0:
            continue
        total += iou_sum / (tp + 0.5 * fp + 0.5 * fn)
        n += 1
    return total / n if n else 0.0


def _scores_from_stats(stats, present, things):
    stuff = present - things
    return VpqScores(
        total=_average(stats, present),
        things=_average(stats, things),
        stuff=_average(stats, stuff),
    )


def vpq(pred, gt, k: int) -> VpqScores:
    """Video panoptic quality at temporal window size ``k``.

    Returns the class-averaged score plus the separate things and stuff
    submeans, all in [0, 1].
    """
    _check_sequences(pred, gt, k)
    present, things = _gt_class_census(gt)
    stats = defaultdict(lambda: [0.0, 0, 0, 0])  # class -> [iou_sum, tp, fp, fn]
    length = k + 1

    for start in range(len(gt) - k):
        gkeys, pkeys = [], []
        for t in range(start, start + length):
            g, p = gt[t], pred[t]
            excl = (g.semantics == 0) | g.unknown | p.unknown
            gk = g.semantics.astype(np.uint64) * 65536 + g.instances.astype(np.uint64)
            pk = p.semantics.astype(np.uint64) * 65536 + p.instances.astype(np.uint64)
            gk[excl] = 0
            pk[excl | (p.semantics == 0)] = 0
            gkeys.append(gk)
            pkeys.append(pk)
        gstack = np.stack(gkeys).ravel()
        pstack = np.stack(pkeys).ravel()

        g_ids, g_areas = np.unique(gstack, return_counts=True)
        p_ids, p_areas = np.unique(pstack, return_counts=True)
        g_area = {int(i): int(a) for i, a in zip(g_ids, g_areas) if i != 0}
        p_area = {int(i): int(a) for i, a in zip(p_ids, p_areas) if i != 0}

        combo, inter = np.unique(gstack * np.uint64(1 << 32) + pstack, return_counts=True)
        matched_g, matched_p = set(), set()
        for key, count in zip(combo, inter):
            key = int(key)
            gid, pid = key >> 32, key & 0xFFFFFFFF
            if gid == 0 or pid == 0:
                continue
            if gid // 65536 != pid // 65536:
                continue
            union = g_area[gid] + p_area[pid] - int(count)
            iou = int(count) / union
            if iou > TUBE_IOU_THRESHOLD:
                cls = gid // 65536
                stats[cls][0] += iou
                stats[cls][1] += 1
                matched_g.add(gid)
                matched_p.add(pid)
        for gid in g_area:
            if gid not in matched_g:
                stats[gid // 65536][3] += 1
        for pid in p_area:
            cls = pid // 65536
            if pid not in matched_p and cls in present:
                stats[cls][2] += 1

    return _scores_from_stats(stats, present, things)


def vpq_bruteforce(pred, gt, k: int) -> VpqScores:
    """Independent tube-matching oracle built on explicit pixel sets."""
    _check_sequences(pred, gt, k)
    present, things = _gt_class_census(gt)
    stats = defaultdict(lambda: [0.0, 0, 0, 0])

    for start in range(len(gt) - k):
        frames = list(range(start, start + k + 1))
        gt_tubes = _collect_tubes(gt, pred, frames, side="gt")
        pred_tubes = _collect_tubes(gt, pred, frames, side="pred")
        pairs = []
        for gkey, gpix in gt_tubes.items():
            for pkey, ppix in pred_tubes.items():
                if gkey[0] != pkey[0]:
                    continue
                inter = len(gpix & ppix)
                union = len(gpix | ppix)
                if union == 0:
                    continue
                iou = inter / union
                if iou > TUBE_IOU_THRESHOLD:
                    pairs.append((gkey, pkey, iou))
        matched_g = {g for g, _, _ in pairs}
        matched_p = {p for _, p, _ in pairs}
        for gkey, pkey, iou in pairs:
            stats[gkey[0]][0] += iou
            stats[gkey[0]][1] += 1
        for gkey in gt_tubes:
            if gkey not in matched_g:
                stats[gkey[0]][3] += 1
        for pkey in pred_tubes:
            if pkey not in matched_p and pkey[0] in present:
                stats[pkey[0]][2] += 1

    return _scores_from_stats(stats, present, things)


def _collect_tubes(gt, pred, frames, side):
    tubes = defaultdict(set)
    for t in frames:
        g, p = gt[t], pred[t]
        m = g if side == "gt" else p
        h, w = m.shape
        for r in range(h):
            for c in range(w):
                if g.semantics[r, c] == 0 or g.unknown[r, c] or p.unknown[r, c]:
                    continue
                cls = int(m.semantics[r, c])
                if cls == 0:
                    continue
                tubes[(cls, int(m.instances[r, c]))].add((t, r, c))
    return dict(tubes)


# ---------------------------------------------------------------------------
# trajectory error


def _associate(est, gt, tolerance=0.01):
    pairs = []
    for i, (te, _) in enumerate(est):
        for j, (tg, _) in enumerate(gt):
            d = abs(te - tg)
            if d <= tolerance:
                pairs.append((d, i, j))
    pairs.sort(key=lambda t: (t[0], t[1], t[2]))
    used_i, used_j, out = set(), set(), []
    for _, i, j in pairs:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        out.append((i, j))
    return sorted(out)


def _check_increasing(traj, name):
    ts = [t for t, _ in traj]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise MetricsError(f"{name} trajectory timestamps must be strictly increasing")


def ate_rmse(est, gt, scale_align: bool = True) -> float:
    """RMSE of translational error after closed-form similarity alignment.

    The estimate is aligned onto the ground truth with the rotation,
    translation and (optionally, default on) scale minimizing the summed
    squared position error. Positions are timestamp-associated within 10 ms.
    """
    _check_increasing(est, "estimated")
    _check_increasing(gt, "ground truth")
    pairs = _associate(est, gt)
    if len(pairs) < 3:
        raise MetricsError(f"need at least 3 associated pose pairs, got {len(pairs)}")
    e = np.stack([est[i][1].t for i, _ in pairs])
    g = np.stack([gt[j][1].t for _, j in pairs])

    mu_e, mu_g = e.mean(axis=0), g.mean(axis=0)
    ec, gc = e - mu_e, g - mu_g
    cov = gc.T @ ec / len(pairs)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if scale_align:
        var_e = (ec**2).sum() / len(pairs)
        s = float(np.trace(np.diag(D) @ S) / var_e) if var_e > 0 else 1.0
    else:
        s = 1.0
    t = mu_g - s * R @ mu_e
    resid = g - (s * (R @ e.T).T + t)
    return float(np.sqrt((resid**2).sum(axis=1).mean()))


# ---------------------------------------------------------------------------
# image fidelity


def psnr(a, b, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError("psnr inputs must share one shape")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak**2 / mse), PSNR_CAP_DB))


def _gaussian_kernel_1d():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


def _filter_valid(x, k):
    """Separable valid-mode filtering of a 2-D array."""
    win = np.lib.stride_tricks.sliding_window_view(x, k.size, axis=1)
    x = np.einsum("hwi,i->hw", win, k)
    win = np.lib.stride_tricks.sliding_window_view(x, k.size, axis=0)
    return np.einsum("hwi,i->hw", win, k)


def ssim(a, b) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, dynamic range 255, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError("ssim inputs must share one shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise MetricsError(f"ssim needs images with min side >= {SSIM_WINDOW}")
    k = _gaussian_kernel_1d()
    c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# report serialization


def _fmt(v):
    return "-" if v is None else repr(float(v))


def report_lines(entries) -> list:
    """`metric k value_total value_things value_stuff` lines; absent fields
    print as '-'."""
    out = []
    for metric, k, total, things_v, stuff_v in entries:
        kf = "-" if k is None else str(int(k))
        out.append(f"{metric} {kf} {_fmt(total)} {_fmt(things_v)} {_fmt(stuff_v)}")
    return out


def report_keyvalues(entries) -> list:
    out = []
    for metric, k, total, things_v, stuff_v in entries:
        stem = metric if k is None else f"{metric}_k{int(k)}"
        out.append(f"{stem}_total={_fmt(total)}")
        if things_v is not None:
            out.append(f"{stem}_things={_fmt(things_v)}")
        if stuff_v is not None:
            out.append(f"{stem}_stuff={_fmt(stuff_v)}")
    return out
