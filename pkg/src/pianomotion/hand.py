"""Articulated hand model: skeleton, poses, forward kinematics, velocities.

Each hand is a 21-joint tree.  Joint 0 is the wrist; joints 1..15 are the
rotational finger joints in the order

    thumb  mcp, pip, dip      (1, 2, 3)
    index  mcp, pip, dip      (4, 5, 6)
    middle mcp, pip, dip      (7, 8, 9)
    ring   mcp, pip, dip      (10, 11, 12)
    pinky  mcp, pip, dip      (13, 14, 15)

and joints 16..20 are the fingertips (thumb..pinky), which carry no rotation
of their own.  Bone offsets are expressed in the parent joint's rest frame.
The canonical rest frame has the palm facing down (-z), fingers along +y and
the thumb toward -x for a right hand (+x for a left hand).

A pose is a root translation, a root orientation quaternion stored (w, x, y,
z), and 15 local axis-angle rotation vectors.  The flattened parameter vector
used by the fitting and refinement optimizers is

    [root_t (3), root rotvec (3), joint rotvecs (45)]        -> 51 per hand

Anatomically a hand has 27 degrees of freedom (wrist 6, thumb mcp 3, other
mcps 2, pips and dips 1 each); the optimizers work in the redundant 51-dim
parameterization and rely on regularization rather than hard-coding the
reduced axes.
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

NUM_JOINTS = 21
NUM_ROT_JOINTS = 16  # wrist + 15 finger joints
NUM_FINGER_JOINTS = 15
NUM_FINGERS = 5
PARAMS_PER_HAND = 51

JOINT_NAMES = (
    "wrist",
    "thumb_mcp", "thumb_pip", "thumb_dip",
    "index_mcp", "index_pip", "index_dip",
    "middle_mcp", "middle_pip", "middle_dip",
    "ring_mcp", "ring_pip", "ring_dip",
    "pinky_mcp", "pinky_pip", "pinky_dip",
    "thumb_tip", "index_tip", "middle_tip", "ring_tip", "pinky_tip",
)

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

# Parent of each joint; -1 marks the root.
PARENTS = np.array(
    [-1,
     0, 1, 2,
     0, 4, 5,
     0, 7, 8,
     0, 10, 11,
     0, 13, 14,
     3, 6, 9, 12, 15],
    dtype=np.int64,
)

TIP_JOINTS = np.arange(16, 21)

# affected[i, j] is True when rotating joint i moves joint j.
_AFFECTED = np.zeros((NUM_ROT_JOINTS, NUM_JOINTS), dtype=bool)
for _j in range(1, NUM_JOINTS):
    _a = PARENTS[_j]
    while _a >= 0:
        _AFFECTED[_a, _j] = True
        _a = PARENTS[_a]
del _j, _a


@dataclasses.dataclass(frozen=True)
class DofLayout:
    """Anatomical degree-of-freedom budget for one hand.

    The physical model treats each hand as 16 rigid links (palm plus three
    phalanges per finger).  The wrist contributes 6 DoF, the thumb mcp 3,
    the remaining mcps 2 (flexion + abduction) and every pip/dip 1.
    """

    wrist_dofs: int = 6
    thumb_mcp_dofs: int = 3
    finger_mcp_dofs: int = 2
    pip_dofs: int = 1
    dip_dofs: int = 1
    links_per_hand: int = 16

    def __post_init__(self) -> None:
        if self.dof_count != 27:
            raise ValueError(
                "hand DoF budget must total 27, got %d" % self.dof_count)

    @property
    def dof_count(self) -> int:
        return (self.wrist_dofs
                + self.thumb_mcp_dofs
                + 4 * self.finger_mcp_dofs
                + 5 * self.pip_dofs
                + 5 * self.dip_dofs)

    def dof_names(self) -> list:
        names = ["wrist_t%s" % a for a in "xyz"]
        names += ["wrist_r%s" % a for a in "xyz"]
        names += ["thumb_mcp_%s" % a for a in ("flex", "abd", "twist")]
        for f in FINGER_NAMES[1:]:
            names += ["%s_mcp_flex" % f, "%s_mcp_abd" % f]
        for f in FINGER_NAMES:
            names.append("%s_pip_flex" % f)
        for f in FINGER_NAMES:
            names.append("%s_dip_flex" % f)
        return names


def _as_unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError("quaternion must have shape (4,), got %s" % (q.shape,))
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > 1e-9:
        raise ValueError("quaternion norm %.12f is not 1 within 1e-9" % n)
    return q


def quat_to_matrix(q_wxyz: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) unit quaternion."""
    w, x, y, z = q_wxyz
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(mat: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion for a rotation matrix, w >= 0."""
    x, y, z, w = Rotation.from_matrix(mat).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q


def quat_to_rotvec(q_wxyz: np.ndarray) -> np.ndarray:
    w, x, y, z = q_wxyz
    return Rotation.from_quat([x, y, z, w]).as_rotvec()


def rotvec_to_quat(v: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_rotvec(np.asarray(v, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q


def _hat(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _rotvec_matrix_and_grads(w: np.ndarray):
    """Rotation matrix for rotvec w and its derivative wrt each component.

    Uses the closed form d exp([w]x)/dw_k = (w_k [w]x + [w x (I - R) e_k]x)
    / |w|^2 . R, falling back to [e_k]x at w = 0.
    """
    R = Rotation.from_rotvec(w).as_matrix()
    grads = np.empty((3, 3, 3))
    n2 = float(w @ w)
    if n2 < 1e-16:
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            grads[k] = _hat(e)
        return R, grads
    IR = np.eye(3) - R
    hw = _hat(w)
    for k in range(3):
        grads[k] = (w[k] * hw + _hat(np.cross(w, IR[:, k]))) / n2 @ R
    return R, grads


@dataclasses.dataclass(eq=False)
class HandPose:
    """One hand's configuration: root transform plus finger joint rotations."""

    root_t: np.ndarray
    root_q: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self) -> None:
        self.root_t = np.asarray(self.root_t, dtype=np.float64)
        if self.root_t.shape != (3,):
            raise ValueError("root_t must have shape (3,)")
        self.root_q = _as_unit_quat(self.root_q)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        if self.joint_rotations.shape != (NUM_FINGER_JOINTS, 3):
            raise ValueError("joint_rotations must have shape (15, 3), got %s"
                             % (self.joint_rotations.shape,))

    @classmethod
    def identity(cls, root_t=(0.0, 0.0, 0.0)) -> "HandPose":
        return cls(np.asarray(root_t, dtype=np.float64),
                   np.array([1.0, 0.0, 0.0, 0.0]),
                   np.zeros((NUM_FINGER_JOINTS, 3)))

    def copy(self) -> "HandPose":
        return HandPose(self.root_t.copy(), self.root_q.copy(),
                        self.joint_rotations.copy())

    def to_vector(self) -> np.ndarray:
        """Flatten to [t (3), root rotvec (3), joint rotvecs (45)]."""
        return np.concatenate([
            self.root_t,
            quat_to_rotvec(self.root_q),
            self.joint_rotations.reshape(-1),
        ])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "HandPose":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (PARAMS_PER_HAND,):
            raise ValueError("pose vector must have shape (%d,), got %s"
                             % (PARAMS_PER_HAND, vec.shape))
        return cls(vec[:3].copy(), rotvec_to_quat(vec[3:6]),
                   vec[6:].reshape(NUM_FINGER_JOINTS, 3).copy())

    def to_json_obj(self) -> dict:
        return {
            "root_t": [float(v) for v in self.root_t],
            "root_q": [float(v) for v in self.root_q],
            "joint_rotations": [[float(v) for v in row]
                                for row in self.joint_rotations],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "HandPose":
        return cls(np.array(obj["root_t"], dtype=np.float64),
                   np.array(obj["root_q"], dtype=np.float64),
                   np.array(obj["joint_rotations"], dtype=np.float64))


@dataclasses.dataclass(eq=False)
class HandSkeleton:
    """Rest-pose bone offsets and joint rotation limits for one hand."""

    handedness: str
    bone_offsets: np.ndarray          # (21, 3); row 0 is zero
    joint_limits: np.ndarray          # (15, 3, 2) radians, [:, :, 0] <= [:, :, 1]

    def __post_init__(self) -> None:
        if self.handedness not in ("left", "right"):
            raise ValueError("handedness must be 'left' or 'right'")
        self.bone_offsets = np.asarray(self.bone_offsets, dtype=np.float64)
        if self.bone_offsets.shape == (NUM_JOINTS - 1, 3):
            self.bone_offsets = np.vstack([np.zeros(3), self.bone_offsets])
        if self.bone_offsets.shape != (NUM_JOINTS, 3):
            raise ValueError("bone_offsets must have shape (21, 3) or (20, 3)")
        if np.any(self.bone_offsets[0] != 0.0):
            raise ValueError("wrist offset row must be zero")
        lengths = np.linalg.norm(self.bone_offsets[1:], axis=1)
        if np.any(lengths <= 0.0):
            raise ValueError("every bone must have positive length")
        self.joint_limits = np.asarray(self.joint_limits, dtype=np.float64)
        if self.joint_limits.shape != (NUM_FINGER_JOINTS, 3, 2):
            raise ValueError("joint_limits must have shape (15, 3, 2)")
        if np.any(self.joint_limits[:, :, 0] > self.joint_limits[:, :, 1]):
            raise ValueError("joint limit lower bounds must not exceed uppers")

    @property
    def bone_lengths(self) -> np.ndarray:
        """(20,) length of the bone ending at joints 1..20."""
        return np.linalg.norm(self.bone_offsets[1:], axis=1)

    def clamp(self, pose: HandPose) -> HandPose:
        """Return a copy of pose with joint rotations clipped to the limits."""
        rot = np.clip(pose.joint_rotations,
                      self.joint_limits[:, :, 0],
                      self.joint_limits[:, :, 1])
        return HandPose(pose.root_t.copy(), pose.root_q.copy(), rot)

    def violates_limits(self, pose: HandPose, tol: float = 0.0) -> bool:
        lo = self.joint_limits[:, :, 0] - tol
        hi = self.joint_limits[:, :, 1] + tol
        r = pose.joint_rotations
        return bool(np.any(r < lo) or np.any(r > hi))

    def to_json_obj(self) -> dict:
        return {
            "handedness": self.handedness,
            "bone_offsets": [[float(v) for v in row]
                             for row in self.bone_offsets[1:]],
            "joint_limits": [[[float(b) for b in ax] for ax in jnt]
                             for jnt in self.joint_limits],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "HandSkeleton":
        return cls(obj["handedness"],
                   np.array(obj["bone_offsets"], dtype=np.float64),
                   np.array(obj["joint_limits"], dtype=np.float64))


@dataclasses.dataclass(eq=False)
class SkeletonPair:
    left: HandSkeleton
    right: HandSkeleton

    def __post_init__(self) -> None:
        if self.left.handedness != "left" or self.right.handedness != "right":
            raise ValueError("SkeletonPair fields must be a left and a right hand")

    def __getitem__(self, hand: int) -> HandSkeleton:
        return (self.left, self.right)[hand]

    @classmethod
    def default(cls) -> "SkeletonPair":
        path = os.path.join(os.path.dirname(__file__), "data",
                            "skeleton_default.json")
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(HandSkeleton.from_json_obj(obj["left"]),
                   HandSkeleton.from_json_obj(obj["right"]))

    def to_json(self) -> str:
        obj = {"left": self.left.to_json_obj(), "right": self.right.to_json_obj()}
        return json.dumps(obj, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SkeletonPair":
        obj = json.loads(text)
        return cls(HandSkeleton.from_json_obj(obj["left"]),
                   HandSkeleton.from_json_obj(obj["right"]))


def _fk_core(skeleton: HandSkeleton, root_t: np.ndarray,
             rotvecs: np.ndarray):
    """Positions (21, 3) and global rotations (16, 3, 3) of every joint.

    rotvecs holds the root orientation in row 0 followed by the 15 finger
    joint rotations.
    """
    p = np.empty((NUM_JOINTS, 3))
    G = np.empty((NUM_ROT_JOINTS, 3, 3))
    locals_ = Rotation.from_rotvec(rotvecs).as_matrix()
    p[0] = root_t
    G[0] = locals_[0]
    for j in range(1, NUM_JOINTS):
        par = PARENTS[j]
        p[j] = p[par] + G[par] @ skeleton.bone_offsets[j]
        if j < NUM_ROT_JOINTS:
            G[j] = G[par] @ locals_[j]
    return p, G


def forward_kinematics(skeleton: HandSkeleton, pose: HandPose) -> np.ndarray:
    """World positions of all 21 joints, shape (21, 3)."""
    rotvecs = np.vstack([quat_to_rotvec(pose.root_q), pose.joint_rotations])
    p, _ = _fk_core(skeleton, pose.root_t, rotvecs)
    return p


def fk_with_orientations(skeleton: HandSkeleton, pose: HandPose):
    """(positions (21, 3), global rotations (16, 3, 3)) for one pose."""
    rotvecs = np.vstack([quat_to_rotvec(pose.root_q), pose.joint_rotations])
    return _fk_core(skeleton, pose.root_t, rotvecs)


def fingertip_positions(skeleton: HandSkeleton, pose: HandPose) -> np.ndarray:
    """World positions of the five fingertips, thumb first, shape (5, 3)."""
    return forward_kinematics(skeleton, pose)[TIP_JOINTS]


def fk_from_vector(skeleton: HandSkeleton, vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    rotvecs = vec[3:].reshape(NUM_ROT_JOINTS, 3)
    p, _ = _fk_core(skeleton, vec[:3], rotvecs)
    return p


def fk_jacobian(skeleton: HandSkeleton, vec: np.ndarray):
    """FK positions and their Jacobian wrt the 51-dim parameter vector.

    Returns (positions (21, 3), J (21, 3, 51)).  Columns follow the vector
    layout: 0..2 root translation, 3..5 root rotation vector, 6.. the 15
    joint rotation vectors in joint order.
    """
    vec = np.asarray(vec, dtype=np.float64)
    rotvecs = vec[3:].reshape(NUM_ROT_JOINTS, 3)

    p = np.empty((NUM_JOINTS, 3))
    G = np.empty((NUM_ROT_JOINTS, 3, 3))
    locals_ = np.empty((NUM_ROT_JOINTS, 3, 3))
    dlocals = np.empty((NUM_ROT_JOINTS, 3, 3, 3))
    for i in range(NUM_ROT_JOINTS):
        locals_[i], dlocals[i] = _rotvec_matrix_and_grads(rotvecs[i])

    p[0] = vec[:3]
    G[0] = locals_[0]
    for j in range(1, NUM_JOINTS):
        par = PARENTS[j]
        p[j] = p[par] + G[par] @ skeleton.bone_offsets[j]
        if j < NUM_ROT_JOINTS:
            G[j] = G[par] @ locals_[j]

    J = np.zeros((NUM_JOINTS, 3, PARAMS_PER_HAND))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, 2, 2] = 1.0
    for i in range(NUM_ROT_JOINTS):
        affected = np.nonzero(_AFFECTED[i])[0]
        if affected.size == 0:
            continue
        Gp = np.eye(3) if i == 0 else G[PARENTS[i]]
        # s holds the moved points in joint i's frame; rotating the local
        # rotvec moves them by Gp . dR . s.
        s = (p[affected] - p[i]) @ G[i]          # rows are G[i].T @ (p_j - p_i)
        base = 3 + 3 * i
        for k in range(3):
            cols = (Gp @ dlocals[i, k] @ s.T).T
            J[affected, :, base + k] = cols
    return p, J


def tip_jacobian(skeleton: HandSkeleton, vec: np.ndarray):
    """Fingertip positions (5, 3) and their Jacobian (5, 3, 51)."""
    p, J = fk_jacobian(skeleton, vec)
    return p[TIP_JOINTS], J[TIP_JOINTS]


@dataclasses.dataclass(eq=False)
class MotionClip:
    """A fixed-rate sequence of two-hand poses, left hand first."""

    fps: float
    frames: list                       # list of (HandPose, HandPose)

    def __post_init__(self) -> None:
        if not (self.fps > 0.0):
            raise ValueError("fps must be positive")
        for fr in self.frames:
            if len(fr) != 2:
                raise ValueError("each frame must hold exactly two hand poses")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def copy(self) -> "MotionClip":
        return MotionClip(self.fps, [(l.copy(), r.copy()) for l, r in self.frames])

    def pose(self, frame: int, hand: int) -> HandPose:
        return self.frames[frame][hand]

    def to_json(self) -> str:
        obj = {
            "fps": self.fps,
            "hands": ["left", "right"],
            "frames": [[l.to_json_obj(), r.to_json_obj()]
                       for l, r in self.frames],
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "MotionClip":
        obj = json.loads(text)
        if obj.get("hands", ["left", "right"]) != ["left", "right"]:
            raise ValueError("clip hand order must be [left, right]")
        frames = [(HandPose.from_json_obj(l), HandPose.from_json_obj(r))
                  for l, r in obj["frames"]]
        return cls(float(obj["fps"]), frames)

    def to_arrays(self):
        n = self.n_frames
        root_t = np.empty((n, 2, 3))
        root_q = np.empty((n, 2, 4))
        joint_rotations = np.empty((n, 2, NUM_FINGER_JOINTS, 3))
        for f, (l, r) in enumerate(self.frames):
            for h, pose in enumerate((l, r)):
                root_t[f, h] = pose.root_t
                root_q[f, h] = pose.root_q
                joint_rotations[f, h] = pose.joint_rotations
        return root_t, root_q, joint_rotations

    @classmethod
    def from_arrays(cls, fps: float, root_t, root_q, joint_rotations) -> "MotionClip":
        root_t = np.asarray(root_t, dtype=np.float64)
        root_q = np.asarray(root_q, dtype=np.float64)
        joint_rotations = np.asarray(joint_rotations, dtype=np.float64)
        n = root_t.shape[0]
        frames = []
        for f in range(n):
            frames.append((HandPose(root_t[f, 0], root_q[f, 0], joint_rotations[f, 0]),
                           HandPose(root_t[f, 1], root_q[f, 1], joint_rotations[f, 1])))
        return cls(fps, frames)

    def save_npz(self, path: str) -> None:
        root_t, root_q, joint_rotations = self.to_arrays()
        np.savez(path, fps=np.float64(self.fps), root_t=root_t,
                 root_q=root_q, joint_rotations=joint_rotations)

    @classmethod
    def load_npz(cls, path: str) -> "MotionClip":
        with np.load(path) as data:
            return cls.from_arrays(float(data["fps"]), data["root_t"],
                                   data["root_q"], data["joint_rotations"])


def clip_positions(clip: MotionClip, skeletons: SkeletonPair) -> np.ndarray:
    """FK joint positions for every frame and hand, shape (F, 2, 21, 3)."""
    out = np.empty((clip.n_frames, 2, NUM_JOINTS, 3))
    for f, (left, right) in enumerate(clip.frames):
        out[f, 0] = forward_kinematics(skeletons.left, left)
        out[f, 1] = forward_kinematics(skeletons.right, right)
    return out


def clip_fingertips(clip: MotionClip, skeletons: SkeletonPair) -> np.ndarray:
    """Fingertip tracks, shape (F, 10, 3): left thumb..pinky, then right."""
    pos = clip_positions(clip, skeletons)
    return pos[:, :, TIP_JOINTS, :].reshape(clip.n_frames, 10, 3)


def _finite_diff(x: np.ndarray, fps: float) -> np.ndarray:
    """Per-frame time derivative along axis 0.

    Central differences in the interior, one-sided at the two ends so the
    output has the same length as the input.  A constant-velocity input
    reproduces that velocity exactly at every frame.
    """
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 frames to differentiate")
    v = np.empty_like(x)
    v[0] = (x[1] - x[0]) * fps
    v[-1] = (x[-1] - x[-2]) * fps
    if n > 2:
        v[1:-1] = (x[2:] - x[:-2]) * (fps / 2.0)
    return v


@dataclasses.dataclass(eq=False)
class ClipVelocities:
    """Finite-difference velocities of a clip, all in meters per second."""

    wrist: np.ndarray              # (F, 2, 3) world wrist velocity
    fingertips_world: np.ndarray   # (F, 2, 5, 3)
    fingertips_local: np.ndarray   # (F, 2, 5, 3), wrist-frame tip coordinates


def finite_diff_velocities(clip: MotionClip,
                           skeletons: SkeletonPair) -> ClipVelocities:
    """Wrist and fingertip velocities for every frame of a clip.

    The local variant expresses fingertip positions in the wrist frame
    before differencing, so pure rigid translation of a hand produces zero
    local fingertip velocity.
    """
    n = clip.n_frames
    pos = clip_positions(clip, skeletons)
    wrist_p = pos[:, :, 0, :]
    tips_w = pos[:, :, TIP_JOINTS, :]

    tips_l = np.empty_like(tips_w)
    for f, (left, right) in enumerate(clip.frames):
        for h, pose in enumerate((left, right)):
            Rw = quat_to_matrix(pose.root_q)
            tips_l[f, h] = (tips_w[f, h] - wrist_p[f, h]) @ Rw
    return ClipVelocities(
        wrist=_finite_diff(wrist_p, clip.fps),
        fingertips_world=_finite_diff(tips_w, clip.fps),
        fingertips_local=_finite_diff(tips_l, clip.fps),
    )


def link_states(skeleton: HandSkeleton, pose: HandPose):
    """Positions (16, 3) and orientations (16, 4) wxyz of the rigid links.

    Link i is the body rooted at rotational joint i: the palm (wrist) plus
    the fifteen phalanges.  Orientation is the joint's global rotation.
    """
    p, G = fk_with_orientations(skeleton, pose)
    quats = np.empty((NUM_ROT_JOINTS, 4))
    for i in range(NUM_ROT_JOINTS):
        quats[i] = matrix_to_quat(G[i])
    return p[:NUM_ROT_JOINTS], quats
