"""Frame-graph dense bundle adjustment with panoptic-aware confidence
weighting and depth propagation.

Pose conventions: the frame graph stores camera-from-world poses so that the
relative transform along an edge (i, j) is ``xi_j @ xi_i^-1`` and maps
camera-i coordinates into camera j. Externally facing trajectories use the
world-from-camera convention (TUM style); :func:`run_odometry` converts at
the boundary.

Depths are optimized as inverse depths internally (conditioning for distant
points) while every interface carries metric depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    MIN_DEPTH,
    Z_MIN,
    CameraModel,
    DepthMap,
    GeometryError,
    Pose,
    pixel_grid,
    pose_relative,
    retract_state,
    se3_exp,
)
from .tracking import PanopticMap
from .warpfusion import FlowField

DEFAULT_ETA = 10.0
DEFAULT_TAU = 0.5
DEFAULT_WINDOW = 2
INITIAL_DAMPING = 1e-4
MAX_STEP_RETRIES = 5
CONVERGENCE_RTOL = 1e-8
# trust-region curvature on the inverse-depth block; suppresses drift along
# the unobservable monocular scale direction and freezes unconstrained
# depths without biasing any stationary point
DEPTH_PRIOR_WEIGHT = 1e-2
# composed flow targets are dropped where neighboring flows disagree by more
FLOW_COMPOSE_SPREAD = 0.5


class OdometryError(ValueError):
    pass


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass
class DynamicMask:
    """Two per-pixel motion score channels (static, dynamic); the derived
    motion probability is the logistic of their difference."""

    scores: np.ndarray  # (H, W, 2)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 3 or self.scores.shape[2] != 2:
            raise OdometryError("dynamic mask scores must have shape (H, W, 2)")
        if not np.all(np.isfinite(self.scores)):
            raise OdometryError("dynamic mask scores must be finite")

    @property
    def shape(self):
        return self.scores.shape[:2]

    def probability(self) -> np.ndarray:
        return _sigmoid(self.scores[..., 1] - self.scores[..., 0])


@dataclass
class FrameState:
    """Per-frame bundle flowing through the pipeline."""

    index: int
    depth: DepthMap
    image: np.ndarray = None  # (H, W, 3) uint8
    panoptic: PanopticMap = None
    flow_to_next: FlowField = None
    confidence: np.ndarray = None  # (H, W, 2) raw scores, pre-logistic
    dynamic: DynamicMask = None
    pose: Pose = None  # world-from-camera initial estimate
    embedding: np.ndarray = None


def refine_dynamic_mask(raw: DynamicMask, pan: PanopticMap, tau: float = DEFAULT_TAU):
    """Panoptic refinement of a raw dynamic mask.

    Stuff pixels are forced static (0); each thing instance votes with its
    mean motion probability against ``tau`` and is set wholly dynamic or
    wholly static; unknown-flagged pixels are treated as dynamic.
    """
    if raw.shape != pan.shape:
        raise OdometryError("dynamic mask and panoptic map sizes differ")
    prob = raw.probability()
    out = np.zeros(raw.shape, dtype=np.float64)
    thing = pan.instances > 0
    if np.any(thing):
        key = pan.semantics.astype(np.int64) * 65536 + pan.instances.astype(np.int64)
        for k in np.unique(key[thing]):
            m = thing & (key == k)
            if prob[m].mean() > tau:
                out[m] = 1.0
    out[pan.unknown] = 1.0
    return out


def panoptic_confidence(w, mdp, eta: float = DEFAULT_ETA):
    """Panoptic-aware confidence: logistic of the raw score boosted by
    ``eta`` on non-dynamic pixels, applied to both channels."""
    w = np.asarray(w, dtype=np.float64)
    mdp = np.asarray(mdp, dtype=np.float64)
    if eta < 0:
        raise OdometryError("eta must be non-negative")
    if w.ndim != 3 or w.shape[2] != 2:
        raise OdometryError("confidence scores must have shape (H, W, 2)")
    if mdp.shape != w.shape[:2]:
        raise OdometryError("dynamic mask and confidence sizes differ")
    return _sigmoid(w + (1.0 - mdp)[..., None] * eta)


@dataclass
class Edge:
    """Measured correspondence targets and weights for one frame pair."""

    target: np.ndarray  # (H, W, 2) target pixel positions in frame j
    target_valid: np.ndarray  # (H, W) bool
    weight: np.ndarray  # (H, W, 2) confidence diagonal of the residual norm
    dynamic: DynamicMask = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.target_valid = np.asarray(self.target_valid, dtype=bool)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.target.shape[:2] != self.target_valid.shape or self.target.shape != self.weight.shape:
            raise OdometryError("edge arrays must share one (H, W) size")


class FrameGraph:
    """Covisibility graph: per-frame state plus correspondence edges."""

    def __init__(self):
        self.frames = {}
        self.edges = {}

    def add_frame(self, index: int, pose: Pose, depth: DepthMap, panoptic: PanopticMap = None):
        self.frames[index] = _FrameNode(pose, depth, panoptic, depth.copy())

    def add_edge(self, i: int, j: int, edge: Edge):
        if i == j:
            raise OdometryError("self edges are not allowed")
        if i not in self.frames or j not in self.frames:
            raise OdometryError(f"edge ({i}, {j}) references a missing frame")
        self.edges[(i, j)] = edge

    @property
    def anchor(self) -> int:
        return min(self.frames)


@dataclass
class _FrameNode:
    pose: Pose  # camera-from-world
    depth: DepthMap
    panoptic: PanopticMap = None
    ref_depth: DepthMap = None  # input depths anchoring the scale gauge


def _edge_residuals(graph: FrameGraph, cam: CameraModel, i: int, j: int):
    """Residuals, weights and linearization inputs for edge (i, j).

    Pixels participate when the source depth is valid, the target is valid,
    the transformed point projects in front of the camera and the source
    pixel is not unknown-flagged.
    """
    node_i, node_j = graph.frames[i], graph.frames[j]
    edge = graph.edges[(i, j)]
    h, w = node_i.depth.shape
    T = pose_relative(node_i.pose, node_j.pose)
    R = T.rotation_matrix()

    grid = pixel_grid(h, w)
    rays = np.empty((h, w, 3))
    rays[..., 0] = (grid[..., 0] - cam.cx) / cam.fx
    rays[..., 1] = (grid[..., 1] - cam.cy) / cam.fy
    rays[..., 2] = 1.0

    depth = node_i.depth
    safe_depth = np.where(depth.valid, depth.values, 1.0)
    Xi = rays * safe_depth[..., None]
    Xj = Xi @ R.T + T.t
    Z = Xj[..., 2]

    mask = depth.valid & edge.target_valid & np.isfinite(Z) & (Z > Z_MIN)
    if node_i.panoptic is not None:
        mask = mask & ~node_i.panoptic.unknown

    Zs = np.where(mask, Z, 1.0)
    pred = np.empty((h, w, 2))
    pred[..., 0] = cam.fx * Xj[..., 0] / Zs + cam.cx
    pred[..., 1] = cam.fy * Xj[..., 1] / Zs + cam.cy

    r = np.where(mask[..., None], edge.target - pred, 0.0)
    weight = np.where(mask[..., None], edge.weight, 0.0)
    return dict(mask=mask, residual=r, weight=weight, Xi=Xi, Xj=Xj, T=T, R=R, depth=safe_depth)


def dba_cost(graph: FrameGraph, cam: CameraModel) -> float:
    """Confidence-weighted squared reprojection residual over all edges."""
    total = 0.0
    for (i, j) in sorted(graph.edges):
        data = _edge_residuals(graph, cam, i, j)
        total += float(np.sum(data["weight"] * data["residual"] ** 2))
    return total


def _batch_skew(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


@dataclass
class DbaStepResult:
    pose_increments: dict
    depth_increments: dict  # per-frame inverse-depth increments, (H, W)
    cost: float
    accepted: bool
    damping: float
    diagnostics: str = ""


def _linearize_edge(graph: FrameGraph, cam: CameraModel, i: int, j: int):
    """Residuals and prediction Jacobians of edge (i, j) over its valid
    pixels: w.r.t. both pose tangents (left-multiplicative) and the source
    pixels' inverse depths."""
    data = _edge_residuals(graph, cam, i, j)
    mask = data["mask"]
    flat = np.flatnonzero(mask.ravel())
    Xi = data["Xi"].reshape(-1, 3)[flat]
    Xj = data["Xj"].reshape(-1, 3)[flat]
    d = data["depth"].ravel()[flat]
    r = data["residual"].reshape(-1, 2)[flat]
    wgt = data["weight"].reshape(-1, 2)[flat]
    R, t = data["R"], data["T"].t

    Z = Xj[:, 2]
    Jpi = np.zeros((flat.size, 2, 3))
    Jpi[:, 0, 0] = cam.fx / Z
    Jpi[:, 0, 2] = -cam.fx * Xj[:, 0] / Z**2
    Jpi[:, 1, 1] = cam.fy / Z
    Jpi[:, 1, 2] = -cam.fy * Xj[:, 1] / Z**2

    A_j = np.concatenate(
        [-_batch_skew(Xj), np.broadcast_to(np.eye(3), (flat.size, 3, 3))], axis=2
    )
    A_i = np.concatenate(
        [np.einsum("ab,nbc->nac", R, _batch_skew(Xi)), np.broadcast_to(-R, (flat.size, 3, 3))],
        axis=2,
    )
    # inverse depth rho = 1/d; dXj/drho = -(Xj - t) / rho = -(Xj - t) * d
    dXj = -(Xj - t) * d[:, None]
    return dict(
        flat=flat,
        residual=r,
        weight=wgt,
        Jp_i=Jpi @ A_i,
        Jp_j=Jpi @ A_j,
        Jd=np.einsum("nkc,nc->nk", Jpi, dXj),
    )


def dba_step(graph: FrameGraph, cam: CameraModel, damping: float = INITIAL_DAMPING) -> DbaStepResult:
    """One damped Gauss-Newton step on poses and inverse depths.

    The residuals are linearized in the non-anchor pose tangents and the
    per-pixel inverse depths of each edge's source frame; the depth block is
    eliminated by a scalar Schur complement and the reduced pose system is
    solved with multiplicative damping on its diagonal. The step is applied
    through ``retract_state`` and kept only if the total cost decreases,
    otherwise the damping grows tenfold and the step retries (up to
    MAX_STEP_RETRIES); a still-singular reduced system raises.
    """
    frames = sorted(graph.frames)
    if len(frames) < 2 or not graph.edges:
        raise OdometryError("dba_step needs at least 2 frames and 1 edge")
    anchor = graph.anchor
    slots = {f: k for k, f in enumerate(f for f in frames if f != anchor)}
    n_pose = 6 * len(slots)

    h, w = graph.frames[frames[0]].depth.shape
    px = h * w
    depth_base = {f: k * px for k, f in enumerate(frames)}
    n_depth = px * len(frames)

    H = np.zeros((n_pose, n_pose))
    b = np.zeros(n_pose)
    E = np.zeros((n_depth, n_pose))
    C = np.zeros(n_depth)
    g_d = np.zeros(n_depth)

    for (i, j) in sorted(graph.edges):
        lin = _linearize_edge(graph, cam, i, j)
        flat = lin["flat"]
        if flat.size == 0:
            continue
        r, wgt = lin["residual"], lin["weight"]
        Jp_i, Jp_j, Jd = lin["Jp_i"], lin["Jp_j"], lin["Jd"]

        rows = depth_base[i] + flat
        C_add = np.einsum("nk,nk->n", wgt, Jd**2)
        np.add.at(C, rows, C_add)
        np.add.at(g_d, rows, np.einsum("nk,nk,nk->n", Jd, wgt, r))

        blocks = []
        if i != anchor:
            blocks.append((slots[i], Jp_i))
        if j != anchor:
            blocks.append((slots[j], Jp_j))
        for sa, Ja in blocks:
            ca = slice(6 * sa, 6 * sa + 6)
            b[ca] += np.einsum("nkp,nk,nk->p", Ja, wgt, r)
            E[rows, ca] += np.einsum("nkp,nk,nk->np", Ja, wgt, Jd)
            for sb, Jb in blocks:
                cb = slice(6 * sb, 6 * sb + 6)
                H[ca, cb] += np.einsum("nkp,nk,nkq->pq", Ja, wgt, Jb)

    # trust-region curvature on the inverse-depth block: damps steps along
    # the unobservable monocular scale direction and freezes unconstrained
    # depths, while leaving every stationary point of the cost untouched
    # (no gradient contribution)
    C = C + DEPTH_PRIOR_WEIGHT
    constrained = C > 0
    Ec = E[constrained]
    Cc = C[constrained]
    gc = g_d[constrained]
    H_red = H - Ec.T @ (Ec / Cc[:, None])
    b_red = b - Ec.T @ (gc / Cc)

    cost_before = dba_cost(graph, cam)
    snapshot = {f: (graph.frames[f].pose, graph.frames[f].depth.copy()) for f in frames}

    lam = damping
    singular = None
    for _ in range(MAX_STEP_RETRIES + 1):
        damped = H_red.copy()
        idx = np.arange(n_pose)
        damped[idx, idx] *= 1.0 + lam
        try:
            delta_pose = np.linalg.solve(damped, b_red) if n_pose else np.zeros(0)
            singular = None
        except np.linalg.LinAlgError as err:
            singular = err
            lam *= 10.0
            continue

        delta_rho = np.zeros(n_depth)
        if n_pose:
            delta_rho[constrained] = (gc - Ec @ delta_pose) / Cc
        else:
            delta_rho[constrained] = gc / Cc

        pose_inc, depth_inc = {}, {}
        for f in frames:
            inc = delta_pose[6 * slots[f] : 6 * slots[f] + 6] if f in slots else np.zeros(6)
            pose_inc[f] = inc
            drho = delta_rho[depth_base[f] : depth_base[f] + px].reshape(h, w)
            depth_inc[f] = drho
            node = graph.frames[f]
            old = node.depth
            rho = np.where(old.valid, 1.0 / old.values, np.nan)
            with np.errstate(divide="ignore", invalid="ignore"):
                new_vals = 1.0 / (rho + drho)
            delta_depth = np.where(old.valid, new_vals - old.values, 0.0)
            new_pose, new_depth = retract_state(node.pose, inc, old, delta_depth)
            node.pose, node.depth = new_pose, new_depth

        cost_after = dba_cost(graph, cam)
        step_norm = float(np.linalg.norm(delta_pose)) + float(np.abs(delta_rho).max(initial=0.0))
        if cost_after < cost_before or step_norm < 1e-14:
            return DbaStepResult(pose_inc, depth_inc, cost_after, True, lam)

        for f in frames:
            graph.frames[f].pose, graph.frames[f].depth = snapshot[f]
        lam *= 10.0

    if singular is not None or not np.all(np.isfinite(H_red)):
        raise OdometryError(
            "singular reduced system after max damping: "
            f"{len(slots)} free poses, {int(constrained.sum())} constrained depths, "
            f"damping={lam:.3e}"
        )
    zero = {f: np.zeros(6) for f in frames}
    zero_d = {f: np.zeros((h, w)) for f in frames}
    return DbaStepResult(zero, zero_d, cost_before, False, lam, "no cost decrease within retries")


def _sample_flow(flow: FlowField, pts):
    """Bilinear flow lookup at fractional positions.

    Returns the interpolated flow, an ok mask and the neighborhood spread
    (max deviation of the four corner flows from their mean, in pixels).
    """
    h, w = flow.shape
    x = pts[..., 0]
    y = pts[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    inb = (x0 >= 0) & (x0 <= w - 1) & (y0 >= 0) & (y0 <= h - 1) & (x <= w - 1) & (y <= h - 1) & (x >= 0) & (y >= 0)
    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1 = np.clip(x0c + 1, 0, w - 1)
    y1 = np.clip(y0c + 1, 0, h - 1)
    fx = np.clip(x - x0c, 0.0, 1.0)
    fy = np.clip(y - y0c, 0.0, 1.0)

    corners = [
        flow.values[y0c, x0c],
        flow.values[y0c, x1],
        flow.values[y1, x0c],
        flow.values[y1, x1],
    ]
    weights = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    value = sum(c * wt[..., None] for c, wt in zip(corners, weights))
    ok = (
        inb
        & flow.valid[y0c, x0c]
        & flow.valid[y0c, x1]
        & flow.valid[y1, x0c]
        & flow.valid[y1, x1]
    )
    stack = np.stack(corners)
    spread = np.abs(stack - stack.mean(axis=0)).max(axis=(0, -1))
    return value, ok, spread


def _panoptic_key(pan: PanopticMap):
    return pan.semantics.astype(np.int64) * 65536 + pan.instances.astype(np.int64)


def compose_flow_targets(frames, i: int, j: int):
    """Correspondence targets from frame i into frame j by chaining the
    stored next-frame flows.

    Chained targets are dropped near flow discontinuities and, when
    panoptic maps are available, wherever the chained position lands on a
    different panoptic entity than the source pixel at an intermediate
    frame (the source surface is occluded there, so the sampled flow
    belongs to the occluder) or on an unknown-flagged pixel.
    """
    if j <= i:
        raise OdometryError("flow targets require i < j")
    h, w = frames[i].depth.shape
    pos = pixel_grid(h, w)
    valid = np.ones((h, w), dtype=bool)
    src_key = _panoptic_key(frames[i].panoptic) if frames[i].panoptic is not None else None
    for t in range(i, j):
        flow = frames[t].flow_to_next
        if flow is None:
            raise OdometryError(f"frame {t} lacks a flow field toward frame {t + 1}")
        if t == i:
            value = flow.values
            ok = flow.valid
            spread = np.zeros((h, w))
        else:
            value, ok, spread = _sample_flow(flow, pos)
            if src_key is not None and frames[t].panoptic is not None:
                xr = np.clip(np.floor(pos[..., 0] + 0.5).astype(np.int64), 0, w - 1)
                yr = np.clip(np.floor(pos[..., 1] + 0.5).astype(np.int64), 0, h - 1)
                here_key = _panoptic_key(frames[t].panoptic)
                ok = ok & (here_key[yr, xr] == src_key) & ~frames[t].panoptic.unknown[yr, xr]
        valid &= ok & (spread <= FLOW_COMPOSE_SPREAD)
        pos = pos + value
    return pos, valid


def _rebuild_edges(graph, frames, window, eta, tau, refine_mask):
    """Recompute every edge's targets, masks and confidences in place."""
    graph.edges.clear()
    for a, f in enumerate(frames):
        for step in range(1, window + 1):
            bidx = a + step
            if bidx >= len(frames):
                break
            target, tvalid = compose_flow_targets(frames, a, bidx)
            h, w = f.depth.shape
            scores = f.confidence if f.confidence is not None else np.zeros((h, w, 2))
            if f.panoptic is not None and f.dynamic is not None:
                if refine_mask:
                    mdp = refine_dynamic_mask(f.dynamic, f.panoptic, tau)
                else:
                    mdp = f.dynamic.probability()
            elif f.panoptic is not None and refine_mask:
                mdp = np.zeros((h, w))
                mdp[f.panoptic.unknown] = 1.0
            else:
                mdp = np.zeros((h, w))
            weight = panoptic_confidence(scores, mdp, eta)
            # confidently dynamic regions are excluded from flow matching
            # altogether; their unconstrained depths become the blank areas
            # that depth propagation later fills
            tvalid = tvalid & ~(mdp >= 1.0)
            graph.add_edge(
                frames[a].index,
                frames[bidx].index,
                Edge(target, tvalid, weight, f.dynamic),
            )


def build_frame_graph(
    frames,
    cam: CameraModel,
    window: int = DEFAULT_WINDOW,
    eta: float = DEFAULT_ETA,
    tau: float = DEFAULT_TAU,
    refine_mask: bool = True,
) -> FrameGraph:
    """Assemble the DBA problem from frame states.

    Edges connect each frame to its ``window`` successors. Edge weights are
    the panoptic-aware confidences; with ``refine_mask`` off, the raw motion
    probability enters the confidence instead of the refined mask.
    """
    graph = FrameGraph()
    for f in frames:
        pose_wc = f.pose if f.pose is not None else Pose.identity()
        graph.add_frame(f.index, pose_wc.inverse(), f.depth.copy(), f.panoptic)
    _rebuild_edges(graph, frames, window, eta, tau, refine_mask)
    return graph


@dataclass
class OdometryResult:
    trajectory: list  # [(timestamp, world-from-camera Pose)]
    depths: list  # refined per-frame DepthMaps (dynamic regions invalidated)
    graph: FrameGraph
    costs: list = field(default_factory=list)
    accepted_steps: int = 0


def run_odometry(
    frames,
    cam: CameraModel,
    iters: int = 10,
    panoptic_rounds: int = 1,
    window: int = DEFAULT_WINDOW,
    eta: float = DEFAULT_ETA,
    tau: float = DEFAULT_TAU,
    refine_mask: bool = True,
    damping: float = INITIAL_DAMPING,
) -> OdometryResult:
    """Windowed dense bundle adjustment over a frame sequence.

    Runs ``panoptic_rounds`` outer rounds; each recomputes the refined
    dynamic masks and confidences from the current panoptic maps, then takes
    up to ``iters`` accepted Gauss-Newton steps, stopping early once the
    relative cost decrease falls below CONVERGENCE_RTOL. Returns the
    gauge-anchored trajectory (anchor kept at its initial pose) and the
    refined depth maps, with confidently dynamic pixels marked invalid.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise OdometryError("odometry needs at least 2 frames")

    graph = build_frame_graph(frames, cam, window, eta, tau, refine_mask)
    costs = []
    accepted = 0
    lam = damping
    for round_idx in range(max(panoptic_rounds, 1)):
        if round_idx > 0:
            # later rounds refresh the refined masks, confidences and flow
            # targets from the current panoptic maps; the optimized pose and
            # depth state carries over untouched
            _rebuild_edges(graph, frames, window, eta, tau, refine_mask)
        prev_cost = dba_cost(graph, cam)
        costs.append(prev_cost)
        for _ in range(iters):
            snapshot = {
                f: (graph.frames[f].pose, graph.frames[f].depth.copy()) for f in graph.frames
            }
            result = dba_step(graph, cam, lam)
            if not result.accepted:
                break
            if prev_cost > 0 and (prev_cost - result.cost) / prev_cost < CONVERGENCE_RTOL:
                # converged: sub-tolerance progress is noise, keep the state
                for f in graph.frames:
                    graph.frames[f].pose, graph.frames[f].depth = snapshot[f]
                break
            accepted += 1
            lam = max(result.damping / 10.0, damping)
            costs.append(result.cost)
            prev_cost = result.cost

    trajectory = [(float(f.index), graph.frames[f.index].pose.inverse()) for f in frames]
    depths = []
    for f in frames:
        refined = graph.frames[f.index].depth.copy()
        if refine_mask and f.panoptic is not None and f.dynamic is not None:
            mdp = refine_dynamic_mask(f.dynamic, f.panoptic, tau)
            dyn = mdp >= 1.0
            refined = DepthMap(np.where(dyn, np.nan, refined.values), refined.valid & ~dyn)
        depths.append(refined)
    return OdometryResult(trajectory, depths, graph, costs, accepted)


def propagate_depth(d_refined: DepthMap, d_dense: DepthMap) -> DepthMap:
    """Fill the blank regions of the refined depth map from the dense map.

    The output keeps every valid refined pixel untouched and takes the dense
    value elsewhere; validity is the union of the two masks.
    """
    if d_refined.shape != d_dense.shape:
        raise GeometryError("depth maps must share one size")
    take_refined = d_refined.valid
    values = np.where(take_refined, d_refined.values, d_dense.values)
    valid = d_refined.valid | d_dense.valid
    values = np.where(valid, values, np.nan)
    return DepthMap(values, valid)
