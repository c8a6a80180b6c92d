"""Offline topological-map compilation from a LiDAR point-cloud prior.

Per camera frame: render intensity/depth views of the cloud at a predicted
pose, match the render against the camera image, lift render features to 3-D
through the render depth, reject outliers with rotation-only RANSAC, solve
PnP for the prediction error, refine the pose, re-render depth there, and
chain the next frame's prediction through odometry.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    EmptyCloud,
    MatcherFailure,
    MissingOdometry,
    NoConsensus,
    NoConvergence,
    NoVisibleLandmarks,
    AllPointsDropped,
    TooFewMatches,
)
from .geometry import CameraIntrinsics, Pose, Rotation, project_points, so3_exp
from .matching import CameraFrame, Matched3D2D, Matcher
from .topomap import (
    DEFAULT_MAX_RANGE_M,
    DepthImage,
    IntensityImage,
    TopologicalMap,
    TopoNode,
)

log = logging.getLogger(__name__)

# Points closer than this to the image plane are culled when rendering.
NEAR_PLANE_M = 0.1


@dataclass
class PointCloud:
    """Global-frame points with 0-255 intensities."""

    points: np.ndarray  # (N, 3)
    intensity: np.ndarray  # (N,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=float).reshape(-1)
        if len(self.intensity) != len(self.points):
            raise ValueError("points and intensities differ in length")
        if len(self.points) and not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class OdometrySequence:
    """Baseline-frame odometry poses plus the camera-to-baseline extrinsic."""

    timestamps: np.ndarray
    poses: list[Pose]
    cam_to_base: Pose

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("odometry timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)


def rasterize(
    cloud: PointCloud,
    pose: Pose,
    intr: CameraIntrinsics,
    max_range: float = DEFAULT_MAX_RANGE_M,
):
    """Render the cloud from a camera pose: z-buffered 1-pixel splats.

    Returns (IntensityImage, DepthImage); pixels nothing projects into carry
    the invalid-depth sentinel (0). Ties at identical depth resolve to the
    later point in cloud order.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot rasterize an empty point cloud")
    pts_cam = pose.inverse().apply(cloud.points)
    z = pts_cam[:, 2]
    uv, in_front = project_points(intr, pts_cam, min_depth=NEAR_PLANE_M)
    cols = np.rint(uv[:, 0]).astype(int)
    rows = np.rint(uv[:, 1]).astype(int)
    keep = (
        in_front
        & (z < max_range)
        & (cols >= 0) & (cols < intr.width) & (rows >= 0) & (rows < intr.height)
    )
    depth = np.zeros((intr.height, intr.width), dtype=np.float32)
    inten = np.zeros((intr.height, intr.width), dtype=np.uint8)
    idx = np.flatnonzero(keep)
    # Assign far-to-near so the nearest point lands last and wins the pixel.
    order = idx[np.argsort(-z[idx], kind="stable")]
    r, c = rows[order], cols[order]
    depth[r, c] = z[order]
    inten[r, c] = np.clip(cloud.intensity[order], 0, 255).astype(np.uint8)
    return IntensityImage(inten), DepthImage(depth)


def _bearings_from_pixels(pixels: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    rays = np.column_stack(
        [
            (pixels[:, 0] - intr.cx) / intr.fx,
            (pixels[:, 1] - intr.cy) / intr.fy,
            np.ones(len(pixels)),
        ]
    )
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _fit_rotation(src: np.ndarray, dst: np.ndarray) -> Rotation:
    """Least-squares rotation with dst ~ R @ src (Kabsch, proper rotation)."""
    w = dst.T @ src
    u, _, vt = np.linalg.svd(w)
    d = np.sign(np.linalg.det(u @ vt))
    return Rotation.from_matrix(u @ np.diag([1.0, 1.0, d]) @ vt)


def rotation_ransac(
    matches: Matched3D2D,
    intr: CameraIntrinsics,
    iterations: int = 500,
    threshold_px: float = 3.0,
    min_inlier_ratio: float = 0.3,
    seed: int = 0,
) -> Matched3D2D:
    """Consensus outlier rejection under a rotation-only inter-view model.

    The 3-D side of ``matches`` must be expressed in the reference (render)
    camera frame; translation between the views is assumed small relative to
    point depth. Two bearing pairs per hypothesis; inliers reproject within
    ``threshold_px`` of their measured pixel.
    """
    n = len(matches)
    if n < 2:
        raise TooFewMatches(f"rotation RANSAC needs >= 2 matches, got {n}")
    ref = matches.points / np.linalg.norm(matches.points, axis=1, keepdims=True)
    cur = _bearings_from_pixels(matches.pixels, intr)
    rng = np.random.default_rng(seed)

    best_count = -1
    best_mask = None
    for _ in range(iterations):
        i, j = rng.choice(n, size=2, replace=False)
        if np.linalg.norm(np.cross(ref[i], ref[j])) < 1e-6:
            continue  # parallel bearings do not pin the rotation
        rot = _fit_rotation(ref[[i, j]], cur[[i, j]]).as_matrix()
        d = ref @ rot.T
        zsafe = np.where(d[:, 2] > 1e-9, d[:, 2], 1.0)
        u = intr.fx * d[:, 0] / zsafe + intr.cx
        v = intr.fy * d[:, 1] / zsafe + intr.cy
        err2 = (u - matches.pixels[:, 0]) ** 2 + (v - matches.pixels[:, 1]) ** 2
        mask = (d[:, 2] > 1e-9) & (err2 < threshold_px**2)
        count = int(np.count_nonzero(mask))
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < max(2, min_inlier_ratio * n):
        raise NoConsensus(
            f"best consensus {max(best_count, 0)}/{n} below ratio {min_inlier_ratio}"
        )
    return Matched3D2D(points=matches.points[best_mask], pixels=matches.pixels[best_mask])


@dataclass
class PnPResult:
    pose: Pose  # maps point-frame coordinates into camera coordinates
    rms_px: float
    iterations: int


def _reprojection_rms(pose: Pose, matches: Matched3D2D, intr: CameraIntrinsics) -> float:
    q = pose.apply(matches.points)
    if np.any(q[:, 2] <= 1e-3):
        return np.inf
    u = intr.fx * q[:, 0] / q[:, 2] + intr.cx
    v = intr.fy * q[:, 1] / q[:, 2] + intr.cy
    return float(np.sqrt(np.mean((u - matches.pixels[:, 0]) ** 2 + (v - matches.pixels[:, 1]) ** 2)))


def _pnp_dlt(matches: Matched3D2D, intr: CameraIntrinsics) -> Pose:
    """Algebraic initialization: DLT on normalized coordinates, then the
    nearest proper rotation and a front-of-camera sign choice.

    The 3-D points are Hartley-normalized (centroid to origin, mean radius
    sqrt(3)) before building the design matrix; deep scenes are otherwise too
    ill-conditioned for a usable estimate.
    """
    n = len(matches)
    centroid = matches.points.mean(axis=0)
    radius = np.mean(np.linalg.norm(matches.points - centroid, axis=1))
    scale3d = np.sqrt(3.0) / max(radius, 1e-12)
    m = (matches.points - centroid) * scale3d
    a = (matches.pixels[:, 0] - intr.cx) / intr.fx
    b = (matches.pixels[:, 1] - intr.cy) / intr.fy
    rows = np.zeros((2 * n, 12))
    homog = np.column_stack([m, np.ones(n)])
    rows[0::2, 0:4] = homog
    rows[0::2, 8:12] = -a[:, None] * homog
    rows[1::2, 4:8] = homog
    rows[1::2, 8:12] = -b[:, None] * homog
    _, _, vt = np.linalg.svd(rows, full_matrices=False)
    p = vt[-1].reshape(3, 4)
    # undo the 3-D normalization: P_un = P @ [[s I, -s c], [0, 1]]
    p = np.hstack([p[:, :3] * scale3d, (p[:, 3] - p[:, :3] @ (centroid * scale3d)).reshape(3, 1)])
    scale = np.mean(np.linalg.svd(p[:, :3], compute_uv=False))
    if scale < 1e-12:
        raise DegenerateConfiguration("DLT produced a rank-deficient projection")
    m = matches.points
    best = None
    for sign in (1.0, -1.0):
        mrot = sign * p[:, :3] / scale
        u, _, vt2 = np.linalg.svd(mrot)
        r = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt2))]) @ vt2
        t = sign * p[:, 3] / scale
        z = (m @ r.T + t)[:, 2]
        n_front = int(np.count_nonzero(z > 0))
        if best is None or n_front > best[0]:
            best = (n_front, r, t)
    _, r, t = best
    return Pose(Rotation.from_matrix(r), t)


def solve_pnp(
    matches: Matched3D2D,
    intr: CameraIntrinsics,
    max_iterations: int = 50,
) -> PnPResult:
    """Pose from 3-D/2-D matches: DLT start, Gauss-Newton reprojection polish.

    The returned pose maps point-frame coordinates into the camera frame
    (p_cam = R @ m + t), the classic PnP view transform. Step halving keeps
    the reprojection RMS non-increasing across iterations.
    """
    n = len(matches)
    if n < 6:
        raise DegenerateConfiguration(
            f"PnP needs >= 6 matches for the algebraic initialization, got {n}"
        )
    spread = np.linalg.svd(matches.points - matches.points.mean(axis=0), compute_uv=False)
    if spread[1] < 1e-9 * max(spread[0], 1e-12):
        raise DegenerateConfiguration("3-D points are collinear")
    if spread[2] < 1e-8 * max(spread[0], 1e-12):
        raise DegenerateConfiguration("3-D points are coplanar")

    # Multi-start: the DLT estimate, plus the identity transform, which is the
    # natural basin for relative problems whose points already sit near the
    # camera frame (render-to-frame refinement with a decent prediction).
    candidates = [_pnp_dlt(matches, intr), Pose.identity()]
    scored = [(_reprojection_rms(c, matches, intr), c) for c in candidates]
    rms, pose = min(scored, key=lambda rc: rc[0])
    if not np.isfinite(rms):
        raise NoConvergence("algebraic initialization leaves points behind the camera")

    history = [rms]
    iterations = 0
    skew_m = np.zeros((n, 3, 3))
    mx, my, mz = matches.points[:, 0], matches.points[:, 1], matches.points[:, 2]
    skew_m[:, 0, 1], skew_m[:, 0, 2] = -mz, my
    skew_m[:, 1, 0], skew_m[:, 1, 2] = mz, -mx
    skew_m[:, 2, 0], skew_m[:, 2, 1] = -my, mx
    for iterations in range(1, max_iterations + 1):
        r_mat = pose.rotation.as_matrix()
        q = matches.points @ r_mat.T + pose.translation
        x, y, z = q[:, 0], q[:, 1], q[:, 2]
        res = np.column_stack(
            [
                intr.fx * x / z + intr.cx - matches.pixels[:, 0],
                intr.fy * y / z + intr.cy - matches.pixels[:, 1],
            ]
        )
        # d(pixel)/d(camera point), chained with d(q)/d(dtheta) = -R [m]x, d(q)/d(dt) = I
        jp = np.zeros((n, 2, 3))
        jp[:, 0, 0] = intr.fx / z
        jp[:, 0, 2] = -intr.fx * x / z**2
        jp[:, 1, 1] = intr.fy / z
        jp[:, 1, 2] = -intr.fy * y / z**2
        jac = np.concatenate(
            [np.einsum("nij,jk,nkl->nil", jp, -r_mat, skew_m), jp], axis=2
        )
        jtj = np.einsum("nij,nik->jk", jac, jac)
        jtr = np.einsum("nij,ni->j", jac, res)
        try:
            step = np.linalg.solve(jtj, -jtr)
        except np.linalg.LinAlgError:
            raise DegenerateConfiguration("normal equations singular in PnP refinement")

        if np.linalg.norm(step) < 1e-14:
            break
        improved = False
        for _ in range(12):
            cand = Pose(
                pose.rotation @ so3_exp(step[:3]), pose.translation + step[3:]
            )
            cand_rms = _reprojection_rms(cand, matches, intr)
            if cand_rms <= rms:
                pose, rms = cand, cand_rms
                improved = True
                break
            step = 0.5 * step
        history.append(rms)
        if not improved:
            break  # local minimum at current precision
        if np.linalg.norm(step) < 1e-12:
            break
    else:
        # Iterations exhausted. A stalled RMS is a converged least-squares
        # answer; raise only when the optimizer was still actively descending.
        if history[-6] - history[-1] > 1e-3 * max(history[-1], 1e-12):
            raise NoConvergence(f"PnP still descending after {max_iterations} iterations")
    return PnPResult(pose=pose, rms_px=rms, iterations=iterations)


def refine_node_pose(predicted: Pose, pnp_result: Pose) -> Pose:
    """Correct the predicted camera pose by the PnP view transform."""
    return predicted @ pnp_result.inverse()


def chain_initial_pose(prev_refined: Pose, odo: OdometrySequence, k: int) -> Pose:
    """Predict the next camera pose from the refined one and an odometry step."""
    if k < 0 or k + 1 >= len(odo):
        raise MissingOdometry(f"odometry steps {k} and {k + 1} are required")
    ext = odo.cam_to_base
    delta = odo.poses[k].inverse() @ odo.poses[k + 1]
    return prev_refined @ ext.inverse() @ delta @ ext


@dataclass
class MapGenParams:
    ransac_iterations: int = 500
    # Wider than the 3 px matching default: the gate must also swallow the
    # parallax that the initial-pose error induces on nearby points.
    ransac_threshold_px: float = 10.0
    min_inlier_ratio: float = 0.3
    min_matches: int = 6
    # A solved frame whose reprojection RMS exceeds this did not actually fit
    # the matches; treat it as a failed frame rather than storing a bad node.
    max_pnp_rms_px: float = 5.0
    max_range_m: float = DEFAULT_MAX_RANGE_M
    seed: int = 0


@dataclass
class FrameReport:
    frame_index: int
    timestamp: float
    accepted: bool
    reason: str = ""
    n_matches: int = 0
    n_lifted: int = 0
    n_inliers: int = 0
    pnp_rms_px: float = float("nan")


@dataclass
class MapGenResult:
    map: TopologicalMap
    reports: list[FrameReport] = field(default_factory=list)

    @property
    def n_accepted(self) -> int:
        return sum(1 for r in self.reports if r.accepted)


def _lift_matches(
    matches, render_depth: DepthImage, intr: CameraIntrinsics
) -> Matched3D2D:
    """3-D points (render-camera frame) for node-side pixels with stored depth."""
    node_px = matches.node
    cols = np.rint(node_px[:, 0]).astype(int)
    rows = np.rint(node_px[:, 1]).astype(int)
    in_bounds = (
        (cols >= 0) & (cols < render_depth.width)
        & (rows >= 0) & (rows < render_depth.height)
    )
    d = np.where(
        in_bounds,
        render_depth.data[rows % render_depth.height, cols % render_depth.width],
        0.0,
    )
    valid = in_bounds & np.isfinite(d) & (d > 0.0)
    u, v = node_px[:, 0], node_px[:, 1]
    pts = np.column_stack(
        [d * (u - intr.cx) / intr.fx, d * (v - intr.cy) / intr.fy, d]
    )
    return Matched3D2D(points=pts[valid], pixels=matches.cur[valid])


def generate_map(
    cloud: PointCloud,
    frames: list[CameraFrame],
    odo: OdometrySequence,
    initial_pose: Pose,
    intr: CameraIntrinsics,
    matcher: Matcher,
    params: MapGenParams = MapGenParams(),
) -> MapGenResult:
    """Compile the point-cloud prior into a topological map.

    ``initial_pose`` predicts the camera pose of the first frame; afterwards
    predictions chain through odometry from the last refined (or, when a frame
    fails, last predicted) pose. Failed frames are skipped and reported, never
    fatal.
    """
    topo_map = TopologicalMap(intr)
    result = MapGenResult(map=topo_map)
    predicted = initial_pose
    for k, frame in enumerate(frames):
        report = FrameReport(frame_index=k, timestamp=frame.timestamp, accepted=False)
        result.reports.append(report)
        chained_from = predicted
        try:
            render_inten, render_depth = rasterize(
                cloud, predicted, intr, max_range=params.max_range_m
            )
            render_node = TopoNode(
                node_id=-1,
                depth=render_depth,
                image=render_inten,
                pose=predicted,
                timestamp=frame.timestamp,
                intrinsics=intr,
            )
            matches = matcher.match(frame, render_node)
            report.n_matches = len(matches)
            lifted = _lift_matches(matches, render_depth, intr)
            report.n_lifted = len(lifted)
            if len(lifted) < params.min_matches:
                raise TooFewMatches(
                    f"{len(lifted)} lifted matches, need {params.min_matches}"
                )
            inliers = rotation_ransac(
                lifted,
                intr,
                iterations=params.ransac_iterations,
                threshold_px=params.ransac_threshold_px,
                min_inlier_ratio=params.min_inlier_ratio,
                seed=params.seed * 9_176_141 + k,
            )
            report.n_inliers = len(inliers)
            if len(inliers) < params.min_matches:
                raise TooFewMatches(
                    f"{len(inliers)} RANSAC inliers, need {params.min_matches}"
                )
            pnp = solve_pnp(inliers, intr)
            report.pnp_rms_px = pnp.rms_px
            if pnp.rms_px > params.max_pnp_rms_px:
                raise NoConvergence(
                    f"PnP reprojection RMS {pnp.rms_px:.2f} px exceeds "
                    f"{params.max_pnp_rms_px} px"
                )
            refined = refine_node_pose(predicted, pnp.pose)
            _, refined_depth = rasterize(cloud, refined, intr, max_range=params.max_range_m)
            node = TopoNode(
                node_id=len(topo_map),
                depth=refined_depth,
                image=frame.image,
                pose=refined,
                timestamp=frame.timestamp,
                intrinsics=intr,
            )
            topo_map.insert_node(node)
            report.accepted = True
            chained_from = refined
        except (
            TooFewMatches,
            NoConsensus,
            DegenerateConfiguration,
            NoConvergence,
            NoVisibleLandmarks,
            AllPointsDropped,
            MatcherFailure,
        ) as exc:
            report.reason = f"{type(exc).__name__}: {exc}"
            log.warning("frame %d skipped: %s", k, report.reason)
        if k + 1 < len(frames):
            predicted = chain_initial_pose(chained_from, odo, k)
    topo_map.build_index()
    return result
