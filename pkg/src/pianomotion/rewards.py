"""Goal encoding, fingering assignment, and per-frame reward terms.

The key-press goals of a piano-roll matrix are merged into maximal runs of
frames sharing one target key set.  From those segments this module builds
the policy observations (a 5x89 goal state and a two-frame pose state) and
the shaped reward: a multiplicative term for target keys, a penalty for
touched non-targets, a bonus when every target sounds, and an energy term
from wrist and fingertip speeds.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from scipy.spatial.transform import Rotation

from . import keyboard as kb
from .hand import (DofLayout, MotionClip, SkeletonPair, clip_fingertips,
                   finite_diff_velocities, fk_with_orientations,
                   matrix_to_quat)
from .keyboard import KeyboardGeometry, KeyState
from .midi import NUM_KEYS, KeyMatrix

GOAL_SLOTS = 5
# Reward weights: non-target penalty, all-correct bonus, energy weight,
# energy exponent scale, fingertip speed weight inside the energy term.
NONTARGET_WEIGHT = 0.15
CORRECT_WEIGHT = 0.5
ENERGY_WEIGHT = 0.05
ENERGY_SCALE = 0.75
FINGER_SPEED_WEIGHT = 0.1
NONTARGET_IGNORE_RATIO = 0.1
TARGET_RATIO_SHAPING = 0.01


@dataclasses.dataclass(frozen=True)
class GoalSegment:
    """A maximal run of frames sharing one target key set."""

    keys: frozenset
    start: int
    end: int                   # exclusive

    def __post_init__(self) -> None:
        if not (0 <= self.start < self.end):
            raise ValueError("segment must satisfy 0 <= start < end")
        for k in self.keys:
            if not 1 <= k <= NUM_KEYS:
                raise ValueError("key %r outside 1..88" % (k,))

    @property
    def length(self) -> int:
        return self.end - self.start


def merged_goals(midi: KeyMatrix) -> list:
    """Run-length encode identical rows of a key matrix into goal segments.

    Silent stretches become segments with an empty key set, so the returned
    segments always partition the full frame range.
    """
    segments = []
    start = 0
    current = midi.keys_at(0)
    for f in range(1, midi.n_frames):
        keys = midi.keys_at(f)
        if keys != current:
            segments.append(GoalSegment(frozenset(current), start, f))
            start = f
            current = keys
    segments.append(GoalSegment(frozenset(current), start, midi.n_frames))
    return segments


def expand_goals(segments, fps: float) -> KeyMatrix:
    """Inverse of merged_goals: rebuild the key matrix from segments."""
    if not segments:
        raise ValueError("no segments to expand")
    n = segments[-1].end
    data = np.zeros((n, NUM_KEYS), dtype=np.uint8)
    for seg in segments:
        for k in seg.keys:
            data[seg.start:seg.end, k - 1] = 1
    return KeyMatrix(fps=fps, data=data)


@dataclasses.dataclass(eq=False)
class GoalState:
    """The next five goal segments as an array of key rows plus timers.

    matrix is 5 x 89: columns 0..87 hold the segment's binary key vector,
    column 88 the timer in frames from the current frame to the segment's
    end.  Slots beyond the last segment are zero.
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (GOAL_SLOTS, NUM_KEYS + 1):
            raise ValueError("goal state must be 5 x 89")
        keys = self.matrix[:, :NUM_KEYS]
        if not np.all((keys == 0.0) | (keys == 1.0)):
            raise ValueError("goal key entries must be 0 or 1")
        if np.any(self.matrix[:, NUM_KEYS] < 0.0):
            raise ValueError("goal timers must be >= 0")

    @property
    def timers(self) -> np.ndarray:
        return self.matrix[:, NUM_KEYS]


def goal_state(segments, current_frame: int) -> GoalState:
    """Goal state at a frame: current segment plus the next four.

    Every slot's timer counts frames from current_frame to that segment's
    end, so timers increase across populated slots and the slot-0 timer
    drops by exactly 1 each frame within a segment.
    """
    mat = np.zeros((GOAL_SLOTS, NUM_KEYS + 1))
    idx = None
    for i, seg in enumerate(segments):
        if seg.start <= current_frame < seg.end:
            idx = i
            break
    if idx is None:
        raise ValueError("frame %d outside the segment range" % current_frame)
    for slot in range(GOAL_SLOTS):
        if idx + slot >= len(segments):
            break
        seg = segments[idx + slot]
        for k in seg.keys:
            mat[slot, k - 1] = 1.0
        mat[slot, NUM_KEYS] = seg.end - current_frame
    return GoalState(mat)


@dataclasses.dataclass(eq=False)
class PoseState:
    """Two-frame link-state history for both hands.

    array is (2 hands, 2 history frames, links * 13); each link contributes
    position (3), orientation quaternion wxyz (4), linear velocity (3) and
    angular velocity (3).  Hands are ordered left, right; history frames
    (t-1, t).
    """

    array: np.ndarray
    links_per_hand: int = 16

    def __post_init__(self) -> None:
        self.array = np.asarray(self.array, dtype=np.float64)
        want = (2, 2, self.links_per_hand * 13)
        if self.array.shape != want:
            raise ValueError("pose state must have shape %s" % (want,))
        quats = self.array.reshape(2, 2, self.links_per_hand, 13)[..., 3:7]
        norms = np.linalg.norm(quats, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("link orientation quaternions must be unit norm")


def _link_snapshot(clip: MotionClip, skeletons: SkeletonPair, frame: int):
    """(positions (2, links, 3), rotations (2, links, 3, 3)) at one frame."""
    pos = np.empty((2, 16, 3))
    rot = np.empty((2, 16, 3, 3))
    for h in range(2):
        p, G = fk_with_orientations(skeletons[h], clip.pose(frame, h))
        pos[h] = p[:16]
        rot[h] = G
    return pos, rot


def pose_state(clip: MotionClip, skeletons: SkeletonPair, current_frame: int,
               layout: DofLayout | None = None) -> PoseState:
    """Link positions, orientations and velocities at frames (t-1, t).

    Velocities are one-step finite differences at the clip frame rate:
    backward at every frame except frame 0, where the forward difference is
    used so a two-frame history starting at the clip head stays defined.
    The caller must pass current_frame >= 1 (pad the clip to observe its
    first frame).
    """
    layout = layout or DofLayout()
    if layout.links_per_hand != 16:
        raise ValueError("pose state supports 16 links per hand, got %d"
                         % layout.links_per_hand)
    if current_frame < 1:
        raise ValueError("pose state needs current_frame >= 1")
    if current_frame >= clip.n_frames:
        raise ValueError("frame %d outside clip of %d frames"
                         % (current_frame, clip.n_frames))

    def velocity_pair(f: int):
        if f >= 1:
            a, b = f - 1, f
        else:
            a, b = 0, 1
        pa, ra = _link_snapshot(clip, skeletons, a)
        pb, rb = _link_snapshot(clip, skeletons, b)
        lin = (pb - pa) * clip.fps
        ang = np.empty_like(lin)
        for h in range(2):
            for l in range(16):
                rel = rb[h, l] @ ra[h, l].T
                ang[h, l] = Rotation.from_matrix(rel).as_rotvec() * clip.fps
        return lin, ang

    out = np.empty((2, 2, layout.links_per_hand * 13))
    for slot, f in enumerate((current_frame - 1, current_frame)):
        pos, rot = _link_snapshot(clip, skeletons, f)
        lin, ang = velocity_pair(f)
        for h in range(2):
            rows = np.empty((16, 13))
            rows[:, 0:3] = pos[h]
            for l in range(16):
                rows[l, 3:7] = matrix_to_quat(rot[h, l])
            rows[:, 7:10] = lin[h]
            rows[:, 10:13] = ang[h]
            out[h, slot] = rows.reshape(-1)
    return PoseState(out, layout.links_per_hand)


def assign_fingering(reference: MotionClip, skeletons: SkeletonPair,
                     geom: KeyboardGeometry, key: int, frame: int) -> int:
    """Fingertip (1..10) nearest the key's press target in a reference frame.

    Fingertips are numbered 1..5 for the left hand thumb..pinky and 6..10
    for the right.  Ties resolve to the lower index.  There is no distance
    gate: a reference hovering far from the key still yields its nearest
    fingertip.
    """
    tips = clip_fingertips(reference, skeletons)[frame]      # (10, 3)
    target = kb.key_target_position(geom, key)
    d = np.linalg.norm(tips - target, axis=1)
    return int(np.argmin(d)) + 1


def key_press_onset(midi: KeyMatrix, key: int, frame: int) -> int:
    """First frame of the active run of `key` that contains `frame`."""
    col = midi.data[:, key - 1]
    if not col[frame]:
        raise ValueError("key %d is not active at frame %d" % (key, frame))
    f = frame
    while f > 0 and col[f - 1]:
        f -= 1
    return f


def reward_target(fingertip, key_state: KeyState, target) -> float:
    """Per-target-key reward from the assigned fingertip and press depth.

    1 when the key is pressed past 90% of travel; otherwise
    exp(-dist + 0.01 * depth ratio) with dist the fingertip-to-target
    distance in meters, so the reward grows as the finger approaches and as
    the key sinks.
    """
    ratio = key_state.ratio
    if ratio > kb.SOUNDING_RATIO:
        return 1.0
    dist = float(np.linalg.norm(np.asarray(fingertip, dtype=np.float64)
                                - np.asarray(target, dtype=np.float64)))
    return math.exp(-dist + TARGET_RATIO_SHAPING * ratio)


def reward_nontarget(key_state: KeyState) -> float:
    """Penalty weight for a non-target key: depth ratio scaled by 1/0.9.

    Trivial touches (depth ratio <= 0.1) are ignored; beyond that the
    penalty grows linearly, reaching 1 at the sounding threshold and
    1/0.9 at full travel.
    """
    if not key_state.touched:
        return 0.0
    ratio = key_state.ratio
    if ratio <= NONTARGET_IGNORE_RATIO:
        return 0.0
    return ratio / kb.SOUNDING_RATIO


def reward_energy(wrist_velocities, fingertip_velocities) -> float:
    """Energy term from wrist and wrist-local fingertip speeds.

    wrist_velocities is (2, 3); fingertip_velocities is (2, 5, 3) in each
    wrist's local frame.  Per hand the cost is (|v_wrist| + 0.1 * sum of
    fingertip speeds)^2; the reward is exp(-0.75 * total), 1 at rest.
    """
    wrist_velocities = np.asarray(wrist_velocities, dtype=np.float64)
    fingertip_velocities = np.asarray(fingertip_velocities, dtype=np.float64)
    if wrist_velocities.shape != (2, 3) or fingertip_velocities.shape != (2, 5, 3):
        raise ValueError("expected wrist (2, 3) and fingertip (2, 5, 3) velocities")
    total = 0.0
    for h in range(2):
        vw = float(np.linalg.norm(wrist_velocities[h]))
        vf = float(np.sum(np.linalg.norm(fingertip_velocities[h], axis=1)))
        total += (vw + FINGER_SPEED_WEIGHT * vf) ** 2
    return math.exp(-ENERGY_SCALE * total)


@dataclasses.dataclass(eq=False)
class RewardBreakdown:
    """All reward terms at one frame plus their weighted combination."""

    frame: int
    targets: dict              # key -> r+ value
    nontargets: dict           # key -> nonzero r- value
    r_correct: float
    r_energy: float
    energy_sign: float
    total: float

    def to_json_obj(self) -> dict:
        return {
            "frame": self.frame,
            "targets": {str(k): v for k, v in sorted(self.targets.items())},
            "nontargets": {str(k): v for k, v in sorted(self.nontargets.items())},
            "r_correct": self.r_correct,
            "r_energy": self.r_energy,
            "energy_sign": self.energy_sign,
            "total": self.total,
        }


def reward_total(targets: dict, nontargets: dict, all_correct: bool,
                 energy: float, energy_sign: float = -1.0,
                 frame: int = 0) -> RewardBreakdown:
    """Combine the per-key terms into the frame reward.

    total = prod(r+) - 0.15 * sum(r-) + 0.5 * r_correct
            + energy_sign * 0.05 * r_energy

    An empty target set contributes an empty product of 1.  The energy term
    enters with a configurable sign (default -1); the breakdown keeps the
    term separate so consumers can re-weight it.
    """
    if energy_sign not in (-1.0, 1.0):
        raise ValueError("energy_sign must be -1.0 or +1.0")
    prod = 1.0
    for v in targets.values():
        prod *= v
    penalty = sum(nontargets.values())
    r_correct = 1.0 if all_correct else 0.0
    total = (prod - NONTARGET_WEIGHT * penalty + CORRECT_WEIGHT * r_correct
             + energy_sign * ENERGY_WEIGHT * energy)
    return RewardBreakdown(frame=frame, targets=dict(targets),
                           nontargets=dict(nontargets), r_correct=r_correct,
                           r_energy=energy, energy_sign=energy_sign,
                           total=total)


def segment_fingering(midi: KeyMatrix, segments, reference: MotionClip,
                      skeletons: SkeletonPair, geom: KeyboardGeometry) -> dict:
    """Fingertip assignment per (segment index, key), fixed at press onset.

    A key held across segment boundaries keeps the fingertip chosen at its
    original onset frame.
    """
    assignment = {}
    onset_cache = {}
    for si, seg in enumerate(segments):
        for k in sorted(seg.keys):
            onset = key_press_onset(midi, k, seg.start)
            if (k, onset) not in onset_cache:
                onset_cache[(k, onset)] = assign_fingering(
                    reference, skeletons, geom, k, onset)
            assignment[(si, k)] = onset_cache[(k, onset)]
    return assignment


def evaluate_rewards(clip: MotionClip, skeletons: SkeletonPair,
                     geom: KeyboardGeometry, midi: KeyMatrix,
                     reference: MotionClip | None = None,
                     reference_skeletons: SkeletonPair | None = None,
                     energy_sign: float = -1.0) -> list:
    """Per-frame reward breakdowns for a clip against its score.

    Fingering comes from `reference` when given (with its own skeletons if
    they differ), otherwise from the evaluated clip itself.  The clip and
    matrix must agree on fps and frame count.
    """
    if clip.n_frames != midi.n_frames:
        raise ValueError("clip has %d frames, matrix %d"
                         % (clip.n_frames, midi.n_frames))
    if abs(clip.fps - midi.fps) > 1e-9:
        raise ValueError("clip fps %g != matrix fps %g" % (clip.fps, midi.fps))
    if clip.n_frames < 2:
        raise ValueError("need >= 2 frames for velocities")
    reference = reference or clip
    reference_skeletons = reference_skeletons or skeletons

    segments = merged_goals(midi)
    fingering = segment_fingering(midi, segments, reference,
                                  reference_skeletons, geom)
    seg_of_frame = np.empty(midi.n_frames, dtype=np.int64)
    for si, seg in enumerate(segments):
        seg_of_frame[seg.start:seg.end] = si

    tips = clip_fingertips(clip, skeletons)          # (F, 10, 3)
    vel = finite_diff_velocities(clip, skeletons)
    targets_xyz = {k: kb.key_target_position(geom, k)
                   for k in range(1, NUM_KEYS + 1)}

    out = []
    for f in range(clip.n_frames):
        si = int(seg_of_frame[f])
        target_keys = sorted(segments[si].keys)
        depths = kb.key_depths(geom, tips[f])
        r_plus = {}
        all_correct = True
        for k in target_keys:
            state = kb.key_state_from_depth(geom, k, float(depths[k - 1]))
            tip_idx = fingering[(si, k)] - 1
            r_plus[k] = reward_target(tips[f, tip_idx], state, targets_xyz[k])
            if not state.sounding:
                all_correct = False
        r_minus = {}
        for k in range(1, NUM_KEYS + 1):
            if k in segments[si].keys or depths[k - 1] <= 0.0:
                continue
            val = reward_nontarget(
                kb.key_state_from_depth(geom, k, float(depths[k - 1])))
            if val > 0.0:
                r_minus[k] = val
        energy = reward_energy(vel.wrist[f], vel.fingertips_local[f])
        out.append(reward_total(r_plus, r_minus, all_correct, energy,
                                energy_sign, frame=f))
    return out
