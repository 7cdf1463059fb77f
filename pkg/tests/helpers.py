"""Shared generators for randomized metric and warp test instances."""

import numpy as np

from panokit.tracking import PanopticMap


def random_panoptic_sequences(rng, max_frames=4, max_size=32, max_segments=6):
    """A (pred, gt) pair of short panoptic sequences with assorted defects.

    Ground truth scatters rectangles of thing and stuff classes; the
    prediction perturbs it by shifting masks, dropping or adding segments,
    flipping classes, renaming instances and sprinkling unknown flags.
    """
    frames = int(rng.integers(1, max_frames + 1))
    h = int(rng.integers(8, max_size + 1))
    w = int(rng.integers(8, max_size + 1))
    n_seg = int(rng.integers(1, max_segments + 1))

    specs = []
    for i in range(n_seg):
        is_thing = rng.random() < 0.6
        specs.append(
            dict(
                class_id=int(rng.integers(1, 5)) if not is_thing else int(rng.integers(10, 14)),
                instance_id=i + 1 if is_thing else 0,
                r=int(rng.integers(0, h - 3)),
                c=int(rng.integers(0, w - 3)),
                rh=int(rng.integers(2, min(8, h))),
                rw=int(rng.integers(2, min(8, w))),
                dr=int(rng.integers(-1, 2)),
                dc=int(rng.integers(-1, 2)),
            )
        )

    gt_seq, pred_seq = [], []
    for t in range(frames):
        gsem = np.zeros((h, w), dtype=np.uint16)
        gins = np.zeros((h, w), dtype=np.uint16)
        psem = np.zeros((h, w), dtype=np.uint16)
        pins = np.zeros((h, w), dtype=np.uint16)
        for s in specs:
            r0 = np.clip(s["r"] + t * s["dr"], 0, h - 1)
            c0 = np.clip(s["c"] + t * s["dc"], 0, w - 1)
            r1, c1 = min(r0 + s["rh"], h), min(c0 + s["rw"], w)
            gsem[r0:r1, c0:c1] = s["class_id"]
            gins[r0:r1, c0:c1] = s["instance_id"]
            # prediction: jittered copy with occasional label damage
            roll = rng.random()
            if roll < 0.15:
                continue  # dropped segment -> FN
            pr0 = np.clip(r0 + int(rng.integers(-2, 3)), 0, h - 1)
            pc0 = np.clip(c0 + int(rng.integers(-2, 3)), 0, w - 1)
            pr1, pc1 = min(pr0 + s["rh"], h), min(pc0 + s["rw"], w)
            cls = s["class_id"] if roll > 0.25 else s["class_id"] + 1
            inst = s["instance_id"]
            if inst and rng.random() < 0.2:
                inst = inst + 40  # renamed track
            psem[pr0:pr1, pc0:pc1] = cls
            pins[pr0:pr1, pc0:pc1] = inst if cls >= 10 else 0
        if rng.random() < 0.3:
            psem[rng.integers(0, h - 2) :, rng.integers(0, w - 2) :] ^= 0
            # spurious extra prediction -> FP
            er, ec = int(rng.integers(0, h - 2)), int(rng.integers(0, w - 2))
            psem[er : er + 2, ec : ec + 2] = int(rng.integers(1, 14))
        gunk = rng.random((h, w)) < 0.03
        punk = rng.random((h, w)) < 0.03
        gt_seq.append(PanopticMap(gsem, gins, gunk))
        pred_seq.append(PanopticMap(psem, pins, punk))
    return pred_seq, gt_seq
