"""Standard MIDI File ingestion and frame-aligned key matrices.

Parses SMF format 0/1 byte streams into absolute-time note events, quantizes
note lists into binary frames x 88 key matrices, builds duration-weighted
condition matrices, and synchronizes two note streams by grid search over
candidate time offsets.

Pitch convention: piano key 1..88 (A0=1), i.e. MIDI note number minus 20.
All times are seconds, all matrices row-major frames x 88.
"""

from __future__ import annotations

import bisect
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

NUM_KEYS = 88
MIN_MIDI_PITCH = 21  # A0
MAX_MIDI_PITCH = 108  # C8
DEFAULT_FPS = 59.94

# Sync defaults: candidate offsets every 1 ms over +/-30 s, onset tolerance 16 ms.
DEFAULT_SYNC_TOLERANCE = 0.016
DEFAULT_GRID_STEP = 0.001
DEFAULT_GRID_SPAN = 30.0


class MidiParseError(ValueError):
    """Malformed SMF data. `offset` is the byte position of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MidiWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NoteEvent:
    """One note: [onset, offset) in seconds, pitch as piano key 1..88."""

    onset: float
    offset: float
    pitch: int

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"onset must be >= 0, got {self.onset}")
        if self.offset <= self.onset:
            raise ValueError(f"offset {self.offset} must exceed onset {self.onset}")
        if not 1 <= self.pitch <= NUM_KEYS:
            raise ValueError(f"pitch must be in 1..88, got {self.pitch}")


@dataclass(frozen=True)
class NoteList:
    """Onset-sorted sequence of NoteEvents with a provenance label."""

    notes: tuple[NoteEvent, ...]
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(self.notes))
        onsets = [n.onset for n in self.notes]
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise ValueError("notes must be sorted by non-decreasing onset")

    def __len__(self) -> int:
        return len(self.notes)

    def __iter__(self):
        return iter(self.notes)

    @staticmethod
    def from_events(events, source: str = "") -> "NoteList":
        return NoteList(tuple(sorted(events, key=lambda n: (n.onset, n.pitch))), source)

    def shifted(self, delta: float) -> "NoteList":
        """Return a copy with `delta` seconds added to every onset/offset."""
        return NoteList(
            tuple(NoteEvent(n.onset + delta, n.offset + delta, n.pitch) for n in self.notes),
            self.source,
        )

    def duration(self) -> float:
        return max((n.offset for n in self.notes), default=0.0)


@dataclass
class KeyMatrix:
    """Binary frames x 88 piano roll at a fixed frame rate."""

    fps: float
    data: np.ndarray  # (n_frames, 88) of {0,1}

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2 or self.data.shape[1] != NUM_KEYS:
            raise ValueError(f"data must be (n_frames, 88), got {self.data.shape}")
        if not np.isin(self.data, (0, 1)).all():
            raise ValueError("key matrix entries must be 0 or 1")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def keys_at(self, frame: int) -> set[int]:
        """Pressed key indices (1..88) at a frame."""
        return {int(k) + 1 for k in np.flatnonzero(self.data[frame])}


@dataclass
class ConditionMatrix:
    """Duration-weighted piano roll: nonzero entries in (0, 1]."""

    fps: float
    data: np.ndarray  # (n_frames, 88) float

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != NUM_KEYS:
            raise ValueError(f"data must be (n_frames, 88), got {self.data.shape}")
        nz = self.data[self.data != 0]
        if nz.size and not ((nz > 0) & (nz <= 1)).all():
            raise ValueError("nonzero condition entries must lie in (0, 1]")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class MatchResult:
    """One-to-one note matching between two lists."""

    pairs: tuple[tuple[int, int], ...]  # (index in a, index in b)
    count: int

    def __post_init__(self):
        if self.count != len(self.pairs):
            raise ValueError("count must equal number of pairs")


# ---------------------------------------------------------------------------
# SMF parsing


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MidiParseError("unexpected end of data", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.read(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.read(2), "big")

    def u32(self) -> int:
        return int.from_bytes(self.read(4), "big")

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            byte = self.u8()
            value = (value << 7) | (byte & 0x7F)
            if not byte & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", self.pos)


_CHANNEL_MSG_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _parse_track(reader: _Reader):
    """One MTrk chunk -> (note on/off events, tempo events), ticks absolute."""
    notes = []  # (tick, channel, midi_pitch, is_on)
    tempos = []  # (tick, microseconds per quarter note)
    header = reader.read(4)
    if header != b"MTrk":
        raise MidiParseError(f"expected MTrk chunk, got {header!r}", reader.pos - 4)
    length = reader.u32()
    end = reader.pos + length
    if end > len(reader.data):
        raise MidiParseError("track length exceeds data size", reader.pos - 4)
    tick = 0
    running_status = None
    while reader.pos < end:
        tick += reader.varlen()
        status = reader.u8()
        if status < 0x80:
            # Running status: first data byte already consumed.
            if running_status is None:
                raise MidiParseError("data byte without running status", reader.pos - 1)
            data0 = status
            status = running_status
            rest = _CHANNEL_MSG_LEN[status & 0xF0] - 1
            payload = bytes([data0]) + reader.read(rest)
        elif status < 0xF0:
            running_status = status
            payload = reader.read(_CHANNEL_MSG_LEN[status & 0xF0])
        elif status in (0xF0, 0xF7):  # sysex
            running_status = None
            payload = reader.read(reader.varlen())
            continue
        elif status == 0xFF:  # meta
            meta_type = reader.u8()
            payload = reader.read(reader.varlen())
            if meta_type == 0x51:
                if len(payload) != 3:
                    raise MidiParseError("set-tempo event must carry 3 bytes", reader.pos)
                tempos.append((tick, int.from_bytes(payload, "big")))
            if meta_type == 0x2F:  # end of track
                reader.pos = end
                break
            continue
        else:
            raise MidiParseError(f"unexpected status byte 0x{status:02x}", reader.pos - 1)

        kind = status & 0xF0
        channel = status & 0x0F
        if kind == 0x90:
            pitch, velocity = payload[0], payload[1]
            notes.append((tick, channel, pitch, velocity > 0))
        elif kind == 0x80:
            notes.append((tick, channel, payload[0], False))
    return notes, tempos


class _TempoMap:
    """Piecewise-constant tempo: converts absolute ticks to seconds."""

    def __init__(self, tempos, ppq: int):
        tempos = sorted(tempos)
        if not tempos or tempos[0][0] > 0:
            tempos.insert(0, (0, 500000))  # SMF default: 120 bpm
        self.ticks = [t for t, _ in tempos]
        self.uspq = [u for _, u in tempos]
        self.ppq = ppq
        self.seconds_at = [0.0]
        for i in range(1, len(self.ticks)):
            dt = self.ticks[i] - self.ticks[i - 1]
            self.seconds_at.append(
                self.seconds_at[-1] + dt * self.uspq[i - 1] / (self.ppq * 1e6)
            )

    def seconds(self, tick: int) -> float:
        i = bisect.bisect_right(self.ticks, tick) - 1
        return self.seconds_at[i] + (tick - self.ticks[i]) * self.uspq[i] / (self.ppq * 1e6)


def parse_midi(data: bytes, source: str = "") -> NoteList:
    """Parse an SMF format 0/1 byte stream into a NoteList.

    Note-on/note-off pairs are resolved to absolute seconds through the tempo
    map; a note-on with velocity 0 closes the note like a note-off. Pitches
    outside MIDI 21..108 are dropped and notes left open at end of track are
    closed there; both cases raise a MidiWarning with counts.

    Raises:
        MidiParseError: malformed header or chunk, with the byte offset.
    """
    reader = _Reader(data)
    header = reader.read(4)
    if header != b"MThd":
        raise MidiParseError(f"expected MThd header, got {header!r}", 0)
    header_len = reader.u32()
    if header_len < 6:
        raise MidiParseError(f"header length must be >= 6, got {header_len}", 4)
    fmt = reader.u16()
    n_tracks = reader.u16()
    division = reader.u16()
    reader.read(header_len - 6)
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("time division must be positive", 12)

    all_notes = []
    all_tempos = []
    for _ in range(n_tracks):
        notes, tempos = _parse_track(reader)
        all_notes.append(notes)
        all_tempos.extend(tempos)
    tempo_map = _TempoMap(all_tempos, division)

    events = []
    dropped = 0
    unterminated = 0
    for track_notes in all_notes:
        open_notes: dict[tuple[int, int], list[int]] = {}
        end_tick = max((t for t, *_ in track_notes), default=0)
        for tick, channel, midi_pitch, is_on in track_notes:
            key = (channel, midi_pitch)
            if is_on:
                open_notes.setdefault(key, []).append(tick)
            else:
                stack = open_notes.get(key)
                if stack:
                    onset_tick = stack.pop(0)  # FIFO: close the oldest open note
                    events.append((onset_tick, tick, midi_pitch))
        for (channel, midi_pitch), stack in open_notes.items():
            for onset_tick in stack:
                unterminated += 1
                if end_tick > onset_tick:
                    events.append((onset_tick, end_tick, midi_pitch))

    out = []
    for onset_tick, offset_tick, midi_pitch in events:
        if not MIN_MIDI_PITCH <= midi_pitch <= MAX_MIDI_PITCH:
            dropped += 1
            continue
        onset = tempo_map.seconds(onset_tick)
        offset = tempo_map.seconds(offset_tick)
        if offset <= onset:
            continue  # zero-length after tempo mapping; nothing to keep
        out.append(NoteEvent(onset, offset, midi_pitch - MIN_MIDI_PITCH + 1))

    if dropped:
        warnings.warn(f"dropped {dropped} note(s) outside MIDI 21..108", MidiWarning)
    if unterminated:
        warnings.warn(
            f"closed {unterminated} unterminated note(s) at end of track", MidiWarning
        )
    return NoteList.from_events(out, source)


def _varlen_bytes(value: int) -> bytes:
    chunks = [value & 0x7F]
    value >>= 7
    while value:
        chunks.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(chunks))


def serialize_midi(notes: NoteList, ppq: int = 480, tempo_uspq: int = 500000) -> bytes:
    """Write a NoteList as a single-track SMF (format 0).

    Inverse of parse_midi up to tick rounding: round-trips preserve
    onset/offset within one tick.
    """
    ticks_per_second = ppq * 1e6 / tempo_uspq
    events = []  # (tick, order, midi_pitch, velocity); note-offs sort first at a tick
    for note in notes:
        midi_pitch = note.pitch + MIN_MIDI_PITCH - 1
        on_tick = round(note.onset * ticks_per_second)
        off_tick = max(on_tick + 1, round(note.offset * ticks_per_second))
        events.append((on_tick, 1, midi_pitch, 64))
        events.append((off_tick, 0, midi_pitch, 0))
    events.sort()

    body = bytearray()
    body += b"\x00\xff\x51\x03" + tempo_uspq.to_bytes(3, "big")
    tick = 0
    for event_tick, order, midi_pitch, velocity in events:
        body += _varlen_bytes(event_tick - tick)
        tick = event_tick
        status = 0x90 if order == 1 else 0x80
        body += bytes([status, midi_pitch, velocity])
    body += b"\x00\xff\x2f\x00"

    out = bytearray()
    out += b"MThd" + (6).to_bytes(4, "big")
    out += (0).to_bytes(2, "big") + (1).to_bytes(2, "big") + ppq.to_bytes(2, "big")
    out += b"MTrk" + len(body).to_bytes(4, "big") + bytes(body)
    return bytes(out)


# ---------------------------------------------------------------------------
# Quantization


def _note_frames(note: NoteEvent, fps: float, n_frames: int) -> np.ndarray:
    """Frame indices whose [i/fps, (i+1)/fps) interval intersects the note."""
    lo = max(0, int(np.floor(note.onset * fps)) - 1)
    hi = min(n_frames, int(np.ceil(note.offset * fps)) + 1)
    if hi <= lo:
        return np.empty(0, dtype=np.int64)
    idx = np.arange(lo, hi)
    covered = (note.onset < (idx + 1) / fps) & (note.offset > idx / fps)
    return idx[covered]


def quantize(notes: NoteList, fps: float, n_frames: int) -> KeyMatrix:
    """Rasterize notes into a binary frames x 88 matrix.

    Entry (i, p) is 1 iff some note of pitch p overlaps the half-open frame
    interval [i/fps, (i+1)/fps). Notes beyond n_frames are truncated.
    """
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    if n_frames < 0:
        raise ValueError(f"n_frames must be >= 0, got {n_frames}")
    data = np.zeros((n_frames, NUM_KEYS), dtype=np.uint8)
    for note in notes:
        data[_note_frames(note, fps, n_frames), note.pitch - 1] = 1
    return KeyMatrix(fps, data)


def condition_matrix(
    notes: NoteList, fps: float, n_frames: int, mode: str = "constant"
) -> ConditionMatrix:
    """Duration-weighted piano roll.

    mode "constant": every frame of a note holds 1/(note duration in frames).
    mode "decaying": frame i of a note holds 1/(i - onset_frame + 1).
    Overlapping same-pitch notes: the later-starting note wins on its frames.
    """
    if mode not in ("constant", "decaying"):
        raise ValueError(f"mode must be 'constant' or 'decaying', got {mode!r}")
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    if n_frames < 0:
        raise ValueError(f"n_frames must be >= 0, got {n_frames}")
    data = np.zeros((n_frames, NUM_KEYS), dtype=np.float64)
    for note in notes:  # onset order, so later-starting notes overwrite
        frames = _note_frames(note, fps, n_frames)
        if frames.size == 0:
            continue
        if mode == "constant":
            data[frames, note.pitch - 1] = 1.0 / frames.size
        else:
            data[frames, note.pitch - 1] = 1.0 / (frames - frames[0] + 1)
    return ConditionMatrix(fps, data)


def expand_key_matrix(matrix: KeyMatrix) -> NoteList:
    """Reconstruct a NoteList from a binary matrix (one note per run of 1s)."""
    events = []
    for key in range(NUM_KEYS):
        column = matrix.data[:, key]
        changes = np.flatnonzero(np.diff(np.concatenate(([0], column, [0]))))
        for start, end in changes.reshape(-1, 2):
            events.append(NoteEvent(start / matrix.fps, end / matrix.fps, key + 1))
    return NoteList.from_events(events, "expanded")


# ---------------------------------------------------------------------------
# Note matching and offset search


def _group_by_pitch(notes: NoteList):
    groups: dict[int, list[tuple[float, int]]] = {}
    for i, note in enumerate(notes):
        groups.setdefault(note.pitch, []).append((note.onset, i))
    return groups


def _greedy_match(a_onsets, b_onsets, tolerance: float, b_shift: float = 0.0):
    """Greedy per-pitch matching on two onset-sorted lists.

    Each a-onset (ascending) takes the nearest unmatched b-onset within
    tolerance; distance ties prefer the earlier b-onset. Returns the list of
    (a position, b position) pairs and the summed |onset gap|.
    """
    matched = [False] * len(b_onsets)
    shifted = [t - b_shift for t in b_onsets]
    pairs = []
    total_gap = 0.0
    for ia, ta in enumerate(a_onsets):
        pos = bisect.bisect_left(shifted, ta)
        left = pos - 1
        while left >= 0 and matched[left]:
            left -= 1
        right = pos
        while right < len(shifted) and matched[right]:
            right += 1
        best = None
        if left >= 0:
            best = left
        if right < len(shifted):
            if best is None or abs(shifted[right] - ta) < abs(shifted[best] - ta):
                best = right
        if best is not None and abs(shifted[best] - ta) <= tolerance:
            matched[best] = True
            pairs.append((ia, best))
            total_gap += abs(shifted[best] - ta)
    return pairs, total_gap


def match_notes(a: NoteList, b: NoteList, tolerance: float) -> MatchResult:
    """One-to-one matching: same pitch and |onset difference| <= tolerance.

    Greedy per pitch: a-notes in ascending onset order each take the nearest
    unmatched b-onset. Deterministic; optimal when onsets are well separated.
    """
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    groups_a = _group_by_pitch(a)
    groups_b = _group_by_pitch(b)
    pairs = []
    for pitch, list_a in groups_a.items():
        list_b = groups_b.get(pitch)
        if not list_b:
            continue
        local, _ = _greedy_match(
            [t for t, _ in list_a], [t for t, _ in list_b], tolerance
        )
        pairs.extend((list_a[ia][1], list_b[ib][1]) for ia, ib in local)
    pairs.sort()
    return MatchResult(tuple(pairs), len(pairs))


def offset_grid(
    span: float = DEFAULT_GRID_SPAN, step: float = DEFAULT_GRID_STEP
) -> list[float]:
    """Symmetric candidate offsets: multiples of `step` covering [-span, span]."""
    n = int(round(span / step))
    return [k * step for k in range(-n, n + 1)]


def find_offset(
    a: NoteList,
    b: NoteList,
    grid=None,
    tolerance: float = DEFAULT_SYNC_TOLERANCE,
) -> tuple[float, int]:
    """Find the time offset of b relative to a by exhaustive grid search.

    Scores each candidate offset by the greedy match count between a and b
    shifted back by the offset, so find_offset(a, a.shifted(d)) recovers d.
    Count ties are broken by the smallest summed onset gap of the matching,
    then by smallest |offset|. Returns (offset, match count).
    """
    if grid is None:
        grid = offset_grid()
    grid = list(grid)
    if not grid:
        raise ValueError("offset grid must be non-empty")
    groups_a = _group_by_pitch(a)
    groups_b = _group_by_pitch(b)
    shared = [
        ([t for t, _ in groups_a[p]], [t for t, _ in groups_b[p]])
        for p in groups_a
        if p in groups_b
    ]
    best = None
    for offset in grid:
        count = 0
        gap = 0.0
        for a_onsets, b_onsets in shared:
            pairs, pair_gap = _greedy_match(a_onsets, b_onsets, tolerance, offset)
            count += len(pairs)
            gap += pair_gap
        score = (-count, gap, abs(offset), offset)
        if best is None or score < best[0]:
            best = (score, offset, count)
    return best[1], best[2]


# ---------------------------------------------------------------------------
# Matrix serialization: RLE-column JSON and dense CSV


def _runs(column: np.ndarray):
    """Maximal runs of equal nonzero values: (start, end, value), end exclusive."""
    runs = []
    start = None
    value = 0.0
    for i, entry in enumerate(column):
        if entry != 0 and (start is None or entry != value):
            if start is not None:
                runs.append((start, i, value))
            start, value = i, entry
        elif entry == 0 and start is not None:
            runs.append((start, i, value))
            start = None
    if start is not None:
        runs.append((start, len(column), value))
    return runs


def matrix_to_json(matrix: KeyMatrix | ConditionMatrix) -> str:
    """Serialize a key/condition matrix with run-length-encoded columns."""
    binary = isinstance(matrix, KeyMatrix)
    columns = {}
    for key in range(NUM_KEYS):
        runs = _runs(matrix.data[:, key])
        if not runs:
            continue
        if binary:
            columns[str(key + 1)] = [[int(s), int(e)] for s, e, _ in runs]
        else:
            columns[str(key + 1)] = [[int(s), int(e), float(v)] for s, e, v in runs]
    payload = {
        "type": "key_matrix" if binary else "condition_matrix",
        "fps": matrix.fps,
        "n_frames": matrix.n_frames,
        "n_keys": NUM_KEYS,
        "columns": columns,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def matrix_from_json(text: str) -> KeyMatrix | ConditionMatrix:
    payload = json.loads(text)
    kind = payload.get("type")
    if kind not in ("key_matrix", "condition_matrix"):
        raise ValueError(f"unknown matrix type {kind!r}")
    binary = kind == "key_matrix"
    dtype = np.uint8 if binary else np.float64
    data = np.zeros((payload["n_frames"], NUM_KEYS), dtype=dtype)
    for key_str, runs in payload["columns"].items():
        key = int(key_str) - 1
        for run in runs:
            if binary:
                start, end = run
                data[start:end, key] = 1
            else:
                start, end, value = run
                data[start:end, key] = value
    cls = KeyMatrix if binary else ConditionMatrix
    return cls(payload["fps"], data)


def matrix_to_csv(matrix: KeyMatrix | ConditionMatrix) -> str:
    """Dense frames x 88 CSV for debugging."""
    lines = []
    for row in matrix.data:
        if isinstance(matrix, KeyMatrix):
            lines.append(",".join(str(int(v)) for v in row))
        else:
            lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
