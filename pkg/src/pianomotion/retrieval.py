"""Nearest-neighbor motion retrieval over sliding piano-roll windows.

A dataset of binary key matrices is cut into fixed-length windows (default
30 frames, stride 1).  A query matrix is windowed the same way and each
query window is matched to the dataset window minimizing squared L2
distance, which on binary matrices is simply the number of disagreeing
cells.  Runs of query windows whose matches advance in lockstep through a
single dataset clip are merged into longer reference segments.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .hand import MotionClip
from .midi import NUM_KEYS, KeyMatrix

DEFAULT_WINDOW_LEN = 30
DEFAULT_STRIDE = 1

# Window rows processed per block during the distance scan; bounds peak
# memory at block_size * window_len * 88 bytes without changing results.
_BLOCK = 4096


@dataclasses.dataclass(eq=False)
class WindowIndex:
    """All windows of a dataset plus the provenance of each window."""

    window_len: int
    stride: int
    windows: np.ndarray        # (n_windows, window_len, 88) uint8
    clip_ids: list             # clip id strings
    window_clip: np.ndarray    # (n_windows,) index into clip_ids
    window_start: np.ndarray   # (n_windows,) start frame within the clip

    def __post_init__(self) -> None:
        if self.window_len < 1 or self.stride < 1:
            raise ValueError("window_len and stride must be >= 1")
        self.windows = np.ascontiguousarray(self.windows, dtype=np.uint8)
        if self.windows.ndim != 3 or self.windows.shape[1:] != (self.window_len,
                                                                NUM_KEYS):
            raise ValueError("windows must have shape (n, window_len, 88)")
        self.window_clip = np.asarray(self.window_clip, dtype=np.int64)
        self.window_start = np.asarray(self.window_start, dtype=np.int64)
        n = self.windows.shape[0]
        if self.window_clip.shape != (n,) or self.window_start.shape != (n,):
            raise ValueError("provenance arrays must have one row per window")

    @property
    def n_windows(self) -> int:
        return self.windows.shape[0]

    def provenance(self, window_idx: int):
        """(clip id, start frame) of a dataset window."""
        return (self.clip_ids[int(self.window_clip[window_idx])],
                int(self.window_start[window_idx]))

    def save(self, path: str) -> None:
        np.savez(path,
                 window_len=np.int64(self.window_len),
                 stride=np.int64(self.stride),
                 windows=self.windows,
                 clip_ids=np.array(self.clip_ids, dtype=np.str_),
                 window_clip=self.window_clip,
                 window_start=self.window_start)

    @classmethod
    def load(cls, path: str) -> "WindowIndex":
        with np.load(path) as data:
            return cls(int(data["window_len"]), int(data["stride"]),
                       data["windows"], [str(s) for s in data["clip_ids"]],
                       data["window_clip"], data["window_start"])


def _window_starts(n_frames: int, window_len: int, stride: int) -> np.ndarray:
    return np.arange(0, n_frames - window_len + 1, stride, dtype=np.int64)


def build_index(dataset, window_len: int = DEFAULT_WINDOW_LEN,
                stride: int = DEFAULT_STRIDE) -> WindowIndex:
    """Enumerate all windows of a dataset of (clip id, KeyMatrix) pairs.

    Clips shorter than window_len are skipped with a warning; windows never
    span clip boundaries.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot index an empty dataset")
    chunks = []
    clips = []
    starts = []
    clip_ids = []
    for clip_id, matrix in dataset:
        if matrix.n_frames < window_len:
            warnings.warn("clip %r has %d frames < window length %d; skipped"
                          % (clip_id, matrix.n_frames, window_len))
            continue
        ci = len(clip_ids)
        clip_ids.append(str(clip_id))
        ws = _window_starts(matrix.n_frames, window_len, stride)
        for s in ws:
            chunks.append(matrix.data[s:s + window_len])
        clips.append(np.full(len(ws), ci, dtype=np.int64))
        starts.append(ws)
    if not chunks:
        raise ValueError("no clip is long enough to produce a window")
    return WindowIndex(window_len, stride,
                       np.stack(chunks).astype(np.uint8),
                       clip_ids,
                       np.concatenate(clips),
                       np.concatenate(starts))


@dataclasses.dataclass(eq=False)
class RetrievalResult:
    """Per-query-window nearest dataset windows."""

    window_len: int
    stride: int
    query_starts: np.ndarray   # (n_query_windows,)
    matches: np.ndarray        # (n_query_windows,) dataset window indices
    distances: np.ndarray      # (n_query_windows,) squared L2 distances


def _distances_block(block: np.ndarray, q: np.ndarray,
                     method: str) -> np.ndarray:
    """Squared L2 distances from one query window to a block of windows.

    Both methods produce exactly the same float64 values: all quantities
    are small integers, so the inner products in the matmul variant are
    exact.
    """
    if method == "scan":
        return np.sum(block != q, axis=(1, 2)).astype(np.float64)
    if method == "matmul":
        bf = block.reshape(block.shape[0], -1).astype(np.float64)
        qf = q.reshape(-1).astype(np.float64)
        return bf.sum(axis=1) + qf.sum() - 2.0 * (bf @ qf)
    raise ValueError("unknown distance method %r" % (method,))


def retrieve(index: WindowIndex, query: KeyMatrix,
             method: str = "scan") -> RetrievalResult:
    """Match every query window to its nearest dataset window.

    Exact exhaustive search; ties resolve to the lowest dataset window
    index.  method selects between the direct elementwise scan and a
    matmul formulation; both are exact and return identical results.
    """
    if query.n_frames < index.window_len:
        raise ValueError("query has %d frames, need at least %d"
                         % (query.n_frames, index.window_len))
    q_starts = _window_starts(query.n_frames, index.window_len, index.stride)
    n_q = len(q_starts)
    matches = np.empty(n_q, dtype=np.int64)
    dists = np.empty(n_q, dtype=np.float64)
    qdata = query.data.astype(np.uint8)
    for qi, qs in enumerate(q_starts):
        q = qdata[qs:qs + index.window_len]
        best_d = np.inf
        best_i = -1
        for lo in range(0, index.n_windows, _BLOCK):
            block = index.windows[lo:lo + _BLOCK]
            d = _distances_block(block, q, method)
            i = int(np.argmin(d))
            # Strict < keeps the earliest window on cross-block ties.
            if d[i] < best_d:
                best_d = float(d[i])
                best_i = lo + i
        matches[qi] = best_i
        dists[qi] = best_d
    return RetrievalResult(index.window_len, index.stride, q_starts,
                           matches, dists)


@dataclasses.dataclass(frozen=True)
class ReferenceSegment:
    """A contiguous span of a dataset clip matched by a run of query windows."""

    clip_id: str
    start: int
    length: int
    query_start: int
    n_windows: int

    def to_json_obj(self) -> dict:
        return {"clip_id": self.clip_id, "start": self.start,
                "length": self.length, "query_start": self.query_start,
                "n_windows": self.n_windows}


def merge_segments(result: RetrievalResult, index: WindowIndex) -> list:
    """Coalesce runs of query windows whose matches advance together.

    Consecutive query windows merge when their dataset matches are the
    next window of the same clip; each merged run covers the union of its
    matched frame ranges.  Isolated windows become window-length segments.
    """
    segments = []
    n = len(result.matches)
    j = 0
    while j < n:
        k = j
        while (k + 1 < n
               and result.matches[k + 1] == result.matches[k] + 1
               and index.window_clip[result.matches[k + 1]]
                   == index.window_clip[result.matches[k]]):
            k += 1
        first = int(result.matches[j])
        run_len = k - j + 1
        clip_id, start = index.provenance(first)
        segments.append(ReferenceSegment(
            clip_id=clip_id,
            start=start,
            length=index.window_len + (run_len - 1) * index.stride,
            query_start=int(result.query_starts[j]),
            n_windows=run_len,
        ))
        j = k + 1
    return segments


def segments_to_motions(segments, motions: dict) -> list:
    """Slice reference motion excerpts for each merged segment.

    motions maps clip id to MotionClip.  Raises if any segment's clip is
    missing, listing every unresolvable id.
    """
    missing = sorted({s.clip_id for s in segments} - set(motions))
    if missing:
        raise KeyError("no motion for clip ids: %s" % ", ".join(missing))
    out = []
    for seg in segments:
        clip = motions[seg.clip_id]
        if seg.start + seg.length > clip.n_frames:
            raise ValueError("segment %s exceeds clip length %d"
                             % (seg, clip.n_frames))
        frames = [(l.copy(), r.copy())
                  for l, r in clip.frames[seg.start:seg.start + seg.length]]
        out.append(MotionClip(clip.fps, frames))
    return out
