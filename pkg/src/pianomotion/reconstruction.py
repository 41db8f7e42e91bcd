"""Multi-view keypoint reconstruction and skeleton fitting.

Pipeline: per-joint DLT triangulation with RANSAC view rejection, linear
interpolation across short invalid gaps, zero-phase low-pass filtering of
the joint tracks, then per-frame fitting of the articulated hand skeleton
to the 3D joints by quasi-Newton minimization of the mean squared error
followed by a damped least-squares polish of the same objective.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import warnings

import numpy as np
import scipy.optimize
import scipy.signal
from scipy.spatial.transform import Rotation

from .hand import (HandPose, HandSkeleton, MotionClip, PARAMS_PER_HAND,
                   SkeletonPair, fk_from_vector, fk_jacobian)

DEFAULT_IMAGE_SIZE = (3840, 2160)
DEFAULT_REPROJ_THRESHOLD = 8.0     # px
DEFAULT_RANSAC_ITERS = 20
DEFAULT_MAX_GAP = 5                # frames
DEFAULT_CUTOFF_HZ = 10.0
DEFAULT_FILTER_ORDER = 4
DEFAULT_FIT_ITERS = 200
DEFAULT_FIT_GTOL = 1e-8


@dataclasses.dataclass(eq=False)
class CameraRig:
    """Calibrated cameras as 3x4 world-to-pixel projection matrices."""

    projections: np.ndarray            # (n_views, 3, 4)
    image_size: tuple = DEFAULT_IMAGE_SIZE

    def __post_init__(self) -> None:
        self.projections = np.asarray(self.projections, dtype=np.float64)
        if (self.projections.ndim != 3
                or self.projections.shape[1:] != (3, 4)):
            raise ValueError("projections must have shape (n, 3, 4)")
        if self.n_views < 2:
            raise ValueError("a rig needs at least 2 cameras")
        for i, P in enumerate(self.projections):
            if np.linalg.matrix_rank(P) != 3:
                raise ValueError("camera %d projection is rank-deficient" % i)
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image size must be positive")

    @property
    def n_views(self) -> int:
        return self.projections.shape[0]

    def project(self, view: int, point) -> np.ndarray:
        """Pixel coordinates of a world point in one view."""
        ph = self.projections[view] @ np.append(np.asarray(point), 1.0)
        return ph[:2] / ph[2]

    def to_json(self) -> str:
        obj = {
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
            "cameras": [{"P": [[float(v) for v in row] for row in P]}
                        for P in self.projections],
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "CameraRig":
        obj = json.loads(text)
        mats = []
        for i, cam in enumerate(obj["cameras"]):
            P = np.array(cam["P"], dtype=np.float64)
            if P.shape != (3, 4):
                raise ValueError("camera %d: P must be 3x4" % i)
            if "K" in cam or "R" in cam or "t" in cam:
                K = np.array(cam["K"], dtype=np.float64)
                R = np.array(cam["R"], dtype=np.float64)
                t = np.array(cam["t"], dtype=np.float64).reshape(3, 1)
                composed = K @ np.hstack([R, t])
                if not np.allclose(composed, P, atol=1e-6):
                    raise ValueError(
                        "camera %d: K[R|t] disagrees with P beyond 1e-6" % i)
            mats.append(P)
        size = tuple(obj.get("image_size", DEFAULT_IMAGE_SIZE))
        return cls(np.stack(mats), size)


@dataclasses.dataclass(eq=False)
class KeypointObservations:
    """2D hand keypoints per frame, view, hand and joint.

    uv is (frames, views, 2, 21, 2) pixels, conf (frames, views, 2, 21) in
    [0, 1], valid a boolean mask of the same shape.  Pixel coordinates must
    be inside the image bounds wherever valid.
    """

    uv: np.ndarray
    conf: np.ndarray
    valid: np.ndarray
    image_size: tuple = DEFAULT_IMAGE_SIZE

    def __post_init__(self) -> None:
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.uv.ndim != 5 or self.uv.shape[2:] != (2, 21, 2):
            raise ValueError("uv must have shape (F, V, 2, 21, 2)")
        if self.conf.shape != self.uv.shape[:4]:
            raise ValueError("conf must have shape (F, V, 2, 21)")
        if self.valid.shape != self.conf.shape:
            raise ValueError("valid must have shape (F, V, 2, 21)")
        if np.any((self.conf < 0) | (self.conf > 1)):
            raise ValueError("confidences must lie in [0, 1]")
        w, h = self.image_size
        u = self.uv[..., 0][self.valid]
        v = self.uv[..., 1][self.valid]
        if u.size and (u.min() < 0 or u.max() > w or v.min() < 0 or v.max() > h):
            raise ValueError("valid keypoints must lie inside the image bounds")

    @property
    def n_frames(self) -> int:
        return self.uv.shape[0]

    @property
    def n_views(self) -> int:
        return self.uv.shape[1]

    def to_json(self) -> str:
        obj = {
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
            "uv": self.uv.tolist(),
            "conf": self.conf.tolist(),
            "valid": self.valid.astype(int).tolist(),
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "KeypointObservations":
        obj = json.loads(text)
        return cls(np.array(obj["uv"], dtype=np.float64),
                   np.array(obj["conf"], dtype=np.float64),
                   np.array(obj["valid"], dtype=bool),
                   tuple(obj.get("image_size", DEFAULT_IMAGE_SIZE)))

    @classmethod
    def from_csv(cls, text: str,
                 image_size: tuple = DEFAULT_IMAGE_SIZE) -> "KeypointObservations":
        """Parse rows of frame,view,hand,joint,u,v,conf,valid.

        Any (frame, view, hand, joint) cell without a row is invalid.
        """
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("no keypoint rows")
        n_f = max(int(r["frame"]) for r in rows) + 1
        n_v = max(int(r["view"]) for r in rows) + 1
        uv = np.zeros((n_f, n_v, 2, 21, 2))
        conf = np.zeros((n_f, n_v, 2, 21))
        valid = np.zeros((n_f, n_v, 2, 21), dtype=bool)
        for r in rows:
            f, v = int(r["frame"]), int(r["view"])
            h, j = int(r["hand"]), int(r["joint"])
            uv[f, v, h, j] = (float(r["u"]), float(r["v"]))
            conf[f, v, h, j] = float(r["conf"])
            valid[f, v, h, j] = bool(int(r["valid"]))
        return cls(uv, conf, valid, image_size)


@dataclasses.dataclass(eq=False)
class JointTrajectory:
    """3D joint tracks: positions (F, 2, 21, 3) meters plus a validity mask."""

    fps: float
    positions: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        if not (self.fps > 0):
            raise ValueError("fps must be positive")
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.positions.ndim != 4 or self.positions.shape[1:] != (2, 21, 3):
            raise ValueError("positions must have shape (F, 2, 21, 3)")
        if self.valid.shape != self.positions.shape[:3]:
            raise ValueError("valid must have shape (F, 2, 21)")
        if not np.all(np.isfinite(self.positions[self.valid])):
            raise ValueError("valid samples must be finite")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    def to_json(self) -> str:
        pos = np.where(self.valid[..., None], self.positions, 0.0)
        obj = {
            "fps": self.fps,
            "positions": pos.tolist(),
            "valid": self.valid.astype(int).tolist(),
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "JointTrajectory":
        obj = json.loads(text)
        return cls(float(obj["fps"]),
                   np.array(obj["positions"], dtype=np.float64),
                   np.array(obj["valid"], dtype=bool))


class TriangulationError(ValueError):
    pass


@dataclasses.dataclass(eq=False)
class TriangulationResult:
    point: np.ndarray
    degenerate: bool


def triangulate_point(uv, projections, weights=None) -> TriangulationResult:
    """Homogeneous DLT triangulation from >= 2 views.

    uv is (V, 2) pixel coordinates, projections (V, 3, 4).  Each view adds
    the two constraints u*P[2] - P[0] and v*P[2] - P[1]; the solution is
    the right singular vector of the stacked system with the smallest
    singular value.  Rows are scaled by per-view weights when given.  Rigs
    whose rays are near-parallel (or duplicated) produce a result flagged
    degenerate rather than an error.
    """
    uv = np.asarray(uv, dtype=np.float64)
    projections = np.asarray(projections, dtype=np.float64)
    n = uv.shape[0]
    if n < 2:
        raise TriangulationError("triangulation needs >= 2 views, got %d" % n)
    A = np.empty((2 * n, 4))
    for i in range(n):
        P = projections[i]
        A[2 * i] = uv[i, 0] * P[2] - P[0]
        A[2 * i + 1] = uv[i, 1] * P[2] - P[1]
        if weights is not None:
            A[2 * i:2 * i + 2] *= weights[i]
    _, s, vt = np.linalg.svd(A)
    x = vt[-1]
    # Rank deficiency beyond the expected 1D nullspace means the views do
    # not pin down a unique point.
    degenerate = bool(s[2] <= 1e-9 * s[0])
    if abs(x[3]) < 1e-12 * np.linalg.norm(x[:3]):
        return TriangulationResult(np.full(3, np.nan), True)
    return TriangulationResult(x[:3] / x[3], degenerate)


def _reprojection_errors(point, uv, projections) -> np.ndarray:
    """Per-view pixel distance between observation and projected point."""
    n = uv.shape[0]
    out = np.empty(n)
    for i in range(n):
        ph = projections[i] @ np.append(point, 1.0)
        if abs(ph[2]) < 1e-12:
            out[i] = np.inf
            continue
        out[i] = np.linalg.norm(ph[:2] / ph[2] - uv[i])
    return out


def _weighted_sse(point, uv, projections, weights) -> float:
    err = _reprojection_errors(point, uv, projections)
    return float(np.sum(weights * err ** 2))


def _gauss_newton_polish(point, uv, projections, weights, iters: int = 10):
    """Refine a triangulated point by damped Gauss-Newton on reprojection."""
    x = np.array(point, dtype=np.float64)
    best = _weighted_sse(x, uv, projections, weights)
    lam = 1e-6
    for _ in range(iters):
        J = []
        r = []
        for i in range(uv.shape[0]):
            P = projections[i]
            ph = P @ np.append(x, 1.0)
            if abs(ph[2]) < 1e-12:
                return x
            w = np.sqrt(weights[i])
            proj = ph[:2] / ph[2]
            r.extend(w * (proj - uv[i]))
            # d(proj)/dx = (P[:2, :3] - proj x P[2, :3]) / depth
            Ji = (P[:2, :3] - np.outer(proj, P[2, :3])) / ph[2]
            J.append(w * Ji)
        J = np.vstack(J)
        r = np.asarray(r)
        H = J.T @ J + lam * np.eye(3)
        try:
            step = np.linalg.solve(H, J.T @ r)
        except np.linalg.LinAlgError:
            break
        cand = x - step
        sse = _weighted_sse(cand, uv, projections, weights)
        if sse < best:
            x, best = cand, sse
            lam = max(lam * 0.5, 1e-9)
        else:
            lam *= 10.0
            if lam > 1e3:
                break
    return x


@dataclasses.dataclass(eq=False)
class RansacResult:
    point: np.ndarray
    inliers: np.ndarray            # (V,) bool over the rig's views
    valid: bool
    ambiguous: bool
    residual: float                # weighted RMS px over the inlier views


def ransac_triangulate(uv, rig: CameraRig, valid=None, conf=None,
                       reproj_threshold: float = DEFAULT_REPROJ_THRESHOLD,
                       max_iters: int = DEFAULT_RANSAC_ITERS,
                       seed: int = 0) -> RansacResult:
    """Triangulate one point while rejecting outlier views.

    View pairs are triangulated and scored by how many views reproject
    within reproj_threshold pixels.  All pairs are tried when their count
    fits in max_iters (always true for <= 5 views at the default 20);
    otherwise a seeded sample of pairs is drawn.  The best inlier set gets
    a confidence-weighted DLT refit plus a Gauss-Newton polish, and the
    candidate with the lowest weighted reprojection SSE on that set is
    returned, so the result is never worse than any sampled pair's own
    solution there.
    """
    uv = np.asarray(uv, dtype=np.float64)
    n = rig.n_views
    if valid is None:
        valid = np.ones(n, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
    if conf is None:
        conf = np.ones(n)
    else:
        conf = np.asarray(conf, dtype=np.float64)
    view_ids = np.nonzero(valid)[0]
    if len(view_ids) < 2:
        return RansacResult(np.full(3, np.nan), np.zeros(n, dtype=bool),
                            False, False, np.inf)

    all_pairs = list(itertools.combinations(view_ids.tolist(), 2))
    if len(all_pairs) <= max_iters:
        pairs = all_pairs
    else:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(all_pairs), size=max_iters, replace=False)
        pairs = [all_pairs[i] for i in sorted(picks)]

    best_count = 0
    best_inliers = None
    ambiguous = False
    pair_solutions = []
    for a, b in pairs:
        res = triangulate_point(uv[[a, b]], rig.projections[[a, b]])
        if not np.all(np.isfinite(res.point)):
            continue
        errs = _reprojection_errors(res.point, uv[view_ids],
                                    rig.projections[view_ids])
        inl = errs <= reproj_threshold
        pair_solutions.append((res.point, inl))
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inliers = inl
            ambiguous = False
        elif count == best_count and best_inliers is not None:
            if not np.array_equal(inl, best_inliers):
                ambiguous = True
    if best_count < 2:
        return RansacResult(np.full(3, np.nan), np.zeros(n, dtype=bool),
                            False, False, np.inf)

    inlier_views = view_ids[best_inliers]
    in_uv = uv[inlier_views]
    in_P = rig.projections[inlier_views]
    in_w = conf[inlier_views]
    if np.all(in_w <= 0):
        in_w = np.ones_like(in_w)

    candidates = [p for p, _ in pair_solutions]
    refit = triangulate_point(in_uv, in_P, weights=in_w)
    if np.all(np.isfinite(refit.point)):
        candidates.append(refit.point)
        candidates.append(_gauss_newton_polish(refit.point, in_uv, in_P, in_w))
    scores = [_weighted_sse(p, in_uv, in_P, in_w) for p in candidates]
    best = candidates[int(np.argmin(scores))]

    inliers_full = np.zeros(n, dtype=bool)
    inliers_full[inlier_views] = True
    rms = float(np.sqrt(min(scores) / np.sum(in_w)))
    return RansacResult(np.array(best), inliers_full, True, ambiguous, rms)


def butterworth_filter(series, cutoff_hz: float, fps: float,
                       order: int = DEFAULT_FILTER_ORDER) -> np.ndarray:
    """Zero-phase low-pass along axis 0 with reflective edge padding.

    The filter is designed at the given order and applied forward and
    backward, so the magnitude response is squared and the phase is zero.
    Series shorter than 3x the order are returned unfiltered with a
    warning.
    """
    series = np.asarray(series, dtype=np.float64)
    if order < 2 or order % 2 != 0:
        raise ValueError("filter order must be even and >= 2")
    if not (0 < cutoff_hz < fps / 2.0):
        raise ValueError("cutoff must lie in (0, fps/2)")
    n = series.shape[0]
    if n < 3 * order:
        warnings.warn("series of length %d too short for order-%d filtering; "
                      "returned unfiltered" % (n, order))
        return series.copy()
    b, a = scipy.signal.butter(order, cutoff_hz / (fps / 2.0))
    padlen = min(3 * (order + 1), n - 1)
    return scipy.signal.filtfilt(b, a, series, axis=0, padtype="even",
                                 padlen=padlen)


def interpolate_gaps(traj: JointTrajectory,
                     max_gap: int = DEFAULT_MAX_GAP) -> JointTrajectory:
    """Fill invalid runs of up to max_gap frames by linear interpolation.

    Only interior gaps (valid samples on both sides) are filled; longer
    gaps and leading/trailing invalid stretches are left invalid.
    """
    pos = traj.positions.copy()
    val = traj.valid.copy()
    n = traj.n_frames
    for h in range(2):
        for j in range(21):
            col = val[:, h, j]
            f = 0
            while f < n:
                if col[f]:
                    f += 1
                    continue
                g = f
                while g < n and not col[g]:
                    g += 1
                gap = g - f
                if f > 0 and g < n and gap <= max_gap:
                    p0 = pos[f - 1, h, j]
                    p1 = pos[g, h, j]
                    for k in range(gap):
                        t = (k + 1) / (gap + 1)
                        pos[f + k, h, j] = (1 - t) * p0 + t * p1
                        col[f + k] = True
                f = g
    return JointTrajectory(traj.fps, pos, val)


def smooth_trajectory(traj: JointTrajectory,
                      cutoff_hz: float = DEFAULT_CUTOFF_HZ,
                      order: int = DEFAULT_FILTER_ORDER,
                      max_gap: int = DEFAULT_MAX_GAP) -> JointTrajectory:
    """Gap-interpolate then low-pass every joint track.

    Each maximal run of valid frames is filtered independently; runs too
    short for the filter pass through unchanged.
    """
    traj = interpolate_gaps(traj, max_gap)
    pos = traj.positions.copy()
    n = traj.n_frames
    for h in range(2):
        for j in range(21):
            col = traj.valid[:, h, j]
            f = 0
            while f < n:
                if not col[f]:
                    f += 1
                    continue
                g = f
                while g < n and col[g]:
                    g += 1
                if g - f >= 3 * order:
                    pos[f:g, h, j] = butterworth_filter(
                        pos[f:g, h, j], cutoff_hz, traj.fps, order)
                f = g
    return JointTrajectory(traj.fps, pos, traj.valid.copy())


def triangulate_observations(obs: KeypointObservations, rig: CameraRig,
                             fps: float,
                             reproj_threshold: float = DEFAULT_REPROJ_THRESHOLD,
                             max_iters: int = DEFAULT_RANSAC_ITERS,
                             seed: int = 0) -> JointTrajectory:
    """RANSAC-triangulate every (frame, hand, joint) into a 3D trajectory."""
    F = obs.n_frames
    pos = np.zeros((F, 2, 21, 3))
    val = np.zeros((F, 2, 21), dtype=bool)
    for f in range(F):
        for h in range(2):
            for j in range(21):
                res = ransac_triangulate(
                    obs.uv[f, :, h, j], rig,
                    valid=obs.valid[f, :, h, j],
                    conf=obs.conf[f, :, h, j],
                    reproj_threshold=reproj_threshold,
                    max_iters=max_iters,
                    seed=seed)
                if res.valid:
                    pos[f, h, j] = res.point
                    val[f, h, j] = True
    return JointTrajectory(fps, pos, val)


def _rigid_init(skeleton: HandSkeleton, y: np.ndarray,
                mask: np.ndarray) -> np.ndarray:
    """Pose vector from rigidly aligning the rest pose to observed joints."""
    rest = fk_from_vector(skeleton, np.zeros(PARAMS_PER_HAND))
    vec = np.zeros(PARAMS_PER_HAND)
    idx = np.nonzero(mask)[0]
    if len(idx) >= 3:
        X = rest[idx]
        Y = y[idx]
        Xc = X - X.mean(axis=0)
        Yc = Y - Y.mean(axis=0)
        U, _, Vt = np.linalg.svd(Xc.T @ Yc)
        d = np.sign(np.linalg.det(Vt.T @ U.T))
        R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
        vec[3:6] = Rotation.from_matrix(R).as_rotvec()
        vec[:3] = Y.mean(axis=0) - R @ X.mean(axis=0)
    elif mask[0]:
        vec[:3] = y[0]
    return vec


@dataclasses.dataclass(eq=False)
class FitResult:
    clip: MotionClip
    copied: np.ndarray             # (F, 2) True where a frame was propagated
    residual_rms: np.ndarray       # (F, 2) meters, NaN where copied


def _residual_system(skeleton, y, idx, vec, soft_limit_weight, lo, hi):
    """Stacked residuals and Jacobian whose SSE equals the fit objective."""
    p, J = fk_jacobian(skeleton, vec)
    scale = 1.0 / np.sqrt(len(idx))
    r = scale * (p[idx] - y[idx]).reshape(-1)
    Jr = scale * J[idx].reshape(3 * len(idx), PARAMS_PER_HAND)
    if soft_limit_weight > 0.0:
        th = vec[6:]
        under = np.minimum(th - lo, 0.0)
        over = np.maximum(th - hi, 0.0)
        w = np.sqrt(soft_limit_weight)
        r = np.concatenate([r, w * (under + over)])
        Jp = np.zeros((len(th), PARAMS_PER_HAND))
        Jp[np.arange(len(th)), 6 + np.arange(len(th))] = w * (
            (under < 0.0) | (over > 0.0))
        Jr = np.vstack([Jr, Jp])
    return r, Jr


def _lm_polish(skeleton, y, idx, x0, soft_limit_weight, lo, hi,
               iters: int = 40):
    """Damped least-squares refinement of a fitted pose vector.

    The quasi-Newton stage stalls well above millimeter accuracy on this
    objective within its iteration budget; exploiting the least-squares
    structure with Levenberg-Marquardt steps closes the rest of the gap.
    Monotone by construction: steps that raise the objective are rejected.
    """
    vec = x0.copy()
    r, J = _residual_system(skeleton, y, idx, vec, soft_limit_weight, lo, hi)
    f = float(r @ r)
    lam = 1e-6
    eye = np.eye(PARAMS_PER_HAND)
    for _ in range(iters):
        try:
            step = np.linalg.solve(J.T @ J + lam * eye, J.T @ r)
        except np.linalg.LinAlgError:
            break
        cand = vec - step
        rc, Jc = _residual_system(skeleton, y, idx, cand, soft_limit_weight,
                                  lo, hi)
        fc = float(rc @ rc)
        if fc < f:
            vec, f, r, J = cand, fc, rc, Jc
            lam = max(lam * 0.5, 1e-12)
            if f < 1e-24:
                break
        else:
            lam *= 10.0
            if lam > 1e8:
                break
    return vec, f


def _fit_frame(skeleton: HandSkeleton, y: np.ndarray, mask: np.ndarray,
               x0: np.ndarray, max_iter: int, gtol: float,
               soft_limit_weight: float):
    idx = np.nonzero(mask)[0]
    n_valid = len(idx)
    lo = skeleton.joint_limits[:, :, 0].reshape(-1)
    hi = skeleton.joint_limits[:, :, 1].reshape(-1)

    def objective(vec):
        p, J = fk_jacobian(skeleton, vec)
        r = p[idx] - y[idx]
        f = float(np.sum(r ** 2)) / n_valid
        g = 2.0 / n_valid * np.einsum("jk,jkc->c", r, J[idx])
        if soft_limit_weight > 0.0:
            th = vec[6:]
            under = np.minimum(th - lo, 0.0)
            over = np.maximum(th - hi, 0.0)
            f += soft_limit_weight * float(np.sum(under ** 2 + over ** 2))
            g[6:] += soft_limit_weight * 2.0 * (under + over)
        return f, g

    f0, _ = objective(x0)
    res = scipy.optimize.minimize(
        objective, x0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15})
    if res.fun <= f0:
        vec, best = res.x, res.fun
    else:
        vec, best = x0, f0
    polished, f_pol = _lm_polish(skeleton, y, idx, vec, soft_limit_weight,
                                 lo, hi)
    if f_pol < best:
        vec = polished
    p = fk_from_vector(skeleton, vec)
    rms = float(np.sqrt(np.mean(np.sum((p[idx] - y[idx]) ** 2, axis=1))))
    return vec, rms


def fit_skeleton(traj: JointTrajectory, skeletons: SkeletonPair,
                 init: MotionClip | None = None,
                 max_iter: int = DEFAULT_FIT_ITERS,
                 gtol: float = DEFAULT_FIT_GTOL,
                 soft_limit_weight: float = 0.0) -> FitResult:
    """Fit hand poses to a joint trajectory, frame by frame.

    Each frame minimizes the mean squared distance between FK joints and
    the valid trajectory joints over the root transform and 15 joint
    rotations, warm-started from the previous frame's fit (frame 0 from
    `init` or a rigid alignment of the rest pose).  A quasi-Newton pass is
    followed by a damped least-squares polish; both are guarded, so the
    fitted MSE never exceeds the starting point's.  Frames with no valid
    joints copy the previous pose and are flagged.
    """
    F = traj.n_frames
    if F == 0:
        raise ValueError("empty trajectory")
    copied = np.zeros((F, 2), dtype=bool)
    rms = np.full((F, 2), np.nan)
    frames = []
    prev_vecs = [None, None]
    for f in range(F):
        poses = []
        for h in range(2):
            skeleton = skeletons[h]
            y = traj.positions[f, h]
            mask = traj.valid[f, h]
            if mask.sum() == 0:
                copied[f, h] = True
                if prev_vecs[h] is not None:
                    vec = prev_vecs[h].copy()
                elif init is not None:
                    vec = init.pose(f, h).to_vector()
                else:
                    vec = np.zeros(PARAMS_PER_HAND)
                poses.append(HandPose.from_vector(vec))
                prev_vecs[h] = vec
                continue
            if prev_vecs[h] is not None:
                x0 = prev_vecs[h].copy()
            elif init is not None:
                x0 = init.pose(f, h).to_vector()
            else:
                x0 = _rigid_init(skeleton, y, mask)
            vec, rms[f, h] = _fit_frame(skeleton, y, mask, x0, max_iter,
                                        gtol, soft_limit_weight)
            prev_vecs[h] = vec
            poses.append(HandPose.from_vector(vec))
        frames.append((poses[0], poses[1]))
    return FitResult(MotionClip(traj.fps, frames), copied, rms)
