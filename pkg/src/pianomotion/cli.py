"""Command-line pipeline: MIDI processing, reconstruction, refinement, eval.

Every subcommand reads explicit input files, validates them, and writes its
outputs atomically (temp file + rename), so interrupted runs never leave a
half-written artifact.  All randomized stages take explicit seeds and the
same inputs always produce byte-identical outputs.  Exit codes: 0 success,
1 validation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import zipfile

import numpy as np

from . import hand, keyboard, metrics, midi, midi_ik, reconstruction
from . import retrieval, rewards

CONFIG_ENV = "PIANOMOTION_CONFIG"

# Defaults for every tunable reachable from the command line or the config
# file.  A config file may override any subset; flags win over the config.
_DEFAULTS = {
    "fps": midi.DEFAULT_FPS,
    "keyboard": None,
    "skeleton": None,
    "seed": 0,
    "tolerance": midi.DEFAULT_SYNC_TOLERANCE,
    "span": midi.DEFAULT_GRID_SPAN,
    "step": midi.DEFAULT_GRID_STEP,
    "mode": "constant",
    "reproj_threshold": reconstruction.DEFAULT_REPROJ_THRESHOLD,
    "ransac_iters": reconstruction.DEFAULT_RANSAC_ITERS,
    "cutoff": reconstruction.DEFAULT_CUTOFF_HZ,
    "order": reconstruction.DEFAULT_FILTER_ORDER,
    "max_gap": reconstruction.DEFAULT_MAX_GAP,
    "max_iter": reconstruction.DEFAULT_FIT_ITERS,
    "gtol": reconstruction.DEFAULT_FIT_GTOL,
    "limit_weight": 0.0,
    "activation_depth": keyboard.DEFAULT_ACTIVATION_DEPTH,
    "smoothness": midi_ik.DEFAULT_SMOOTHNESS,
    "epochs": midi_ik.DEFAULT_EPOCHS,
    "exit_clearance": midi_ik.DEFAULT_EXIT_CLEARANCE,
    "press_margin": midi_ik.DEFAULT_PRESS_MARGIN,
    "max_displacement": midi_ik.DEFAULT_MAX_DISPLACEMENT,
    "window_len": retrieval.DEFAULT_WINDOW_LEN,
    "stride": retrieval.DEFAULT_STRIDE,
    "method": "scan",
    "energy_sign": -1.0,
    "skip_vacuous": False,
}

_CONFIG_CHOICES = {"mode": ("constant", "decaying"),
                   "method": ("scan", "matmul"),
                   "energy_sign": (-1.0, 1.0)}


class CliError(Exception):
    """Validation failure; maps to exit code 1."""


class CliIoError(Exception):
    """Filesystem failure; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write("error: %s\n" % message)
        raise SystemExit(1)


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CliIoError("cannot read %s: %s" % (path, exc))


def _read_text(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliIoError("cannot read %s: %s" % (path, exc))


def _atomic_write(path: str, data) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    mode = "wb" if isinstance(data, bytes) else "w"
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        try:
            with os.fdopen(fd, mode, **({} if mode == "wb"
                                        else {"newline": "\n"})) as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise CliIoError("cannot write %s: %s" % (path, exc))


def _emit(args, text: str) -> None:
    if args.dry_run:
        return
    if getattr(args, "output", None):
        _atomic_write(args.output, text)
    else:
        sys.stdout.write(text)


def _load_config(args) -> dict:
    cfg = dict(_DEFAULTS)
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if path:
        try:
            obj = json.loads(_read_text(path))
        except json.JSONDecodeError as exc:
            raise CliError("config %s is not valid JSON: %s" % (path, exc))
        if not isinstance(obj, dict):
            raise CliError("config %s must be a JSON object" % path)
        for key, value in obj.items():
            if key not in _DEFAULTS:
                raise CliError("config %s: unknown field %r" % (path, key))
            if key in _CONFIG_CHOICES and value not in _CONFIG_CHOICES[key]:
                raise CliError("config %s: field %r must be one of %s"
                               % (path, key, _CONFIG_CHOICES[key]))
            cfg[key] = value
    return cfg


def _get(args, cfg: dict, key: str):
    value = getattr(args, key, None)
    return cfg[key] if value is None else value


def _load_keyboard(args, cfg) -> keyboard.KeyboardGeometry:
    path = _get(args, cfg, "keyboard")
    if path is None:
        return keyboard.build_keyboard()
    try:
        config = keyboard.KeyboardConfig.from_json(_read_text(path))
    except ValueError as exc:
        raise CliError("keyboard config %s: %s" % (path, exc))
    return keyboard.build_keyboard(config)


def _load_skeletons(args, cfg) -> hand.SkeletonPair:
    path = _get(args, cfg, "skeleton")
    if path is None:
        return hand.SkeletonPair.default()
    try:
        return hand.SkeletonPair.from_json(_read_text(path))
    except (ValueError, KeyError) as exc:
        raise CliError("skeleton config %s: %s" % (path, exc))


def _load_clip(path: str) -> hand.MotionClip:
    try:
        return hand.MotionClip.from_json(_read_text(path))
    except (ValueError, KeyError) as exc:
        raise CliError("motion clip %s: %s" % (path, exc))


def _load_notes(path: str) -> midi.NoteList:
    data = _read_bytes(path)
    try:
        return midi.parse_midi(data, source=path)
    except midi.MidiParseError as exc:
        raise CliError("%s: %s" % (path, exc))


def _load_key_matrix(path: str, fps: float) -> midi.KeyMatrix:
    """Load a key matrix from a MIDI file or a matrix JSON file.

    MIDI files are quantized at the given fps; matrix files carry their
    own fps, which must agree.
    """
    data = _read_bytes(path)
    if data[:4] == b"MThd":
        notes = _load_notes(path)
        n_frames = max(1, int(np.ceil(notes.duration() * fps)))
        return midi.quantize(notes, fps, n_frames)
    try:
        matrix = midi.matrix_from_json(data.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CliError("%s: %s" % (path, exc))
    if not isinstance(matrix, midi.KeyMatrix):
        raise CliError("%s: need a binary key matrix, got a condition matrix"
                       % path)
    if abs(matrix.fps - fps) > 1e-9:
        raise CliError("%s: matrix fps %g does not match clip fps %g"
                       % (path, matrix.fps, fps))
    return matrix


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


# --------------------------------------------------------------------------
# Subcommands


def cmd_quantize(args, cfg):
    fps = _get(args, cfg, "fps")
    notes = _load_notes(args.midi)
    n_frames = args.frames or max(1, int(np.ceil(notes.duration() * fps)))
    matrix = midi.quantize(notes, fps, n_frames)
    if args.dry_run:
        return 0
    text = midi.matrix_to_json(matrix) + "\n"
    _emit(args, text)
    if args.csv:
        _atomic_write(args.csv, midi.matrix_to_csv(matrix))
    return 0


def cmd_condition(args, cfg):
    fps = _get(args, cfg, "fps")
    mode = _get(args, cfg, "mode")
    notes = _load_notes(args.midi)
    n_frames = args.frames or max(1, int(np.ceil(notes.duration() * fps)))
    matrix = midi.condition_matrix(notes, fps, n_frames, mode=mode)
    if args.dry_run:
        return 0
    _emit(args, midi.matrix_to_json(matrix) + "\n")
    return 0


def cmd_sync(args, cfg):
    notes_a = _load_notes(args.a)
    notes_b = _load_notes(args.b)
    tol = _get(args, cfg, "tolerance")
    grid = midi.offset_grid(_get(args, cfg, "span"), _get(args, cfg, "step"))
    if args.dry_run:
        return 0
    offset, count = midi.find_offset(notes_a, notes_b, grid, tol)
    _emit(args, _dump({"offset": offset, "matches": count,
                       "notes_a": len(notes_a), "notes_b": len(notes_b)}))
    return 0


def cmd_triangulate(args, cfg):
    rig = reconstruction.CameraRig.from_json(_read_text(args.cameras))
    text = _read_text(args.keypoints)
    try:
        if args.keypoints.endswith(".csv"):
            obs = reconstruction.KeypointObservations.from_csv(
                text, rig.image_size)
        else:
            obs = reconstruction.KeypointObservations.from_json(text)
    except (ValueError, KeyError) as exc:
        raise CliError("keypoints %s: %s" % (args.keypoints, exc))
    if args.dry_run:
        return 0
    fps = _get(args, cfg, "fps")
    traj = reconstruction.triangulate_observations(
        obs, rig, fps,
        reproj_threshold=_get(args, cfg, "reproj_threshold"),
        max_iters=_get(args, cfg, "ransac_iters"),
        seed=_get(args, cfg, "seed"))
    if not args.no_filter:
        traj = reconstruction.smooth_trajectory(
            traj, cutoff_hz=_get(args, cfg, "cutoff"),
            order=_get(args, cfg, "order"),
            max_gap=_get(args, cfg, "max_gap"))
    _emit(args, traj.to_json() + "\n")
    return 0


def cmd_fit(args, cfg):
    try:
        traj = reconstruction.JointTrajectory.from_json(
            _read_text(args.trajectory))
    except (ValueError, KeyError) as exc:
        raise CliError("trajectory %s: %s" % (args.trajectory, exc))
    skeletons = _load_skeletons(args, cfg)
    init = _load_clip(args.init) if args.init else None
    if args.dry_run:
        return 0
    result = reconstruction.fit_skeleton(
        traj, skeletons, init=init,
        max_iter=_get(args, cfg, "max_iter"),
        gtol=_get(args, cfg, "gtol"),
        soft_limit_weight=_get(args, cfg, "limit_weight"))
    _emit(args, result.clip.to_json() + "\n")
    if args.report:
        rms = [[None if not np.isfinite(v) else v for v in row]
               for row in result.residual_rms]
        _atomic_write(args.report, _dump({
            "n_frames": result.clip.n_frames,
            "copied_frames": int(result.copied.sum()),
            "residual_rms": rms,
        }))
    return 0


def cmd_refine(args, cfg):
    clip = _load_clip(args.clip)
    skeletons = _load_skeletons(args, cfg)
    geom = _load_keyboard(args, cfg)
    matrix = _load_key_matrix(args.midi, clip.fps)
    if args.dry_run:
        return 0
    result, before, after = midi_ik.refine_to_midi(
        clip, skeletons, geom, matrix,
        activation_depth=_get(args, cfg, "activation_depth"),
        smoothness=_get(args, cfg, "smoothness"),
        epochs=int(_get(args, cfg, "epochs")),
        exit_clearance=_get(args, cfg, "exit_clearance"),
        press_margin=_get(args, cfg, "press_margin"),
        max_displacement=_get(args, cfg, "max_displacement"))
    _emit(args, result.clip.to_json() + "\n")
    if args.report:
        report = result.report_obj()
        report["errors_before"] = len(before)
        report["errors_after"] = len(after)
        _atomic_write(args.report, _dump(report))
    return 0


def cmd_extract_press(args, cfg):
    clip = _load_clip(args.clip)
    skeletons = _load_skeletons(args, cfg)
    geom = _load_keyboard(args, cfg)
    if args.dry_run:
        return 0
    pressed = metrics.extracted_presses(
        clip, skeletons, geom, _get(args, cfg, "activation_depth"))
    data = np.zeros((clip.n_frames, midi.NUM_KEYS), dtype=np.uint8)
    for f, keys in enumerate(pressed):
        for k in keys:
            data[f, k - 1] = 1
    _emit(args, midi.matrix_to_json(midi.KeyMatrix(clip.fps, data)) + "\n")
    return 0


def cmd_eval(args, cfg):
    clip = _load_clip(args.clip)
    skeletons = _load_skeletons(args, cfg)
    geom = _load_keyboard(args, cfg)
    matrix = _load_key_matrix(args.midi, clip.fps)
    if args.dry_run:
        return 0
    report = metrics.clip_metrics(
        clip, skeletons, geom, matrix,
        activation_depth=_get(args, cfg, "activation_depth"),
        skip_vacuous=bool(_get(args, cfg, "skip_vacuous")))
    _emit(args, report.to_json() + "\n")
    if args.per_frame:
        lines = ["frame,precision,recall,f1"]
        for f, row in enumerate(report.per_frame):
            if np.any(np.isnan(row)):
                lines.append("%d,,," % f)
            else:
                lines.append("%d,%r,%r,%r" % (f, row[0], row[1], row[2]))
        _atomic_write(args.per_frame, "\n".join(lines) + "\n")
    return 0


def cmd_index(args, cfg):
    fps = _get(args, cfg, "fps")
    dataset = []
    for path in args.dataset:
        name = os.path.splitext(os.path.basename(path))[0]
        matrix = _load_key_matrix(path, fps)
        dataset.append((name, matrix))
    index = retrieval.build_index(dataset,
                                  window_len=int(_get(args, cfg, "window_len")),
                                  stride=int(_get(args, cfg, "stride")))
    if args.dry_run:
        return 0
    try:
        index.save(args.output)
    except OSError as exc:
        raise CliIoError("cannot write %s: %s" % (args.output, exc))
    return 0


def cmd_retrieve(args, cfg):
    try:
        index = retrieval.WindowIndex.load(args.index)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CliIoError("cannot read index %s: %s" % (args.index, exc))
    query = _load_key_matrix(args.query, _get(args, cfg, "fps"))
    if args.dry_run:
        return 0
    result = retrieval.retrieve(index, query,
                                method=_get(args, cfg, "method"))
    segments = retrieval.merge_segments(result, index)
    payload = {
        "window_len": index.window_len,
        "stride": index.stride,
        "n_query_windows": len(result.matches),
        "segments": [s.to_json_obj() for s in segments],
    }
    if args.full:
        payload["matches"] = [int(m) for m in result.matches]
        payload["distances"] = [float(d) for d in result.distances]
    _emit(args, _dump(payload))
    return 0


def cmd_goalstate(args, cfg):
    fps = _get(args, cfg, "fps")
    matrix = _load_key_matrix(args.midi, fps)
    if args.dry_run:
        return 0
    segments = rewards.merged_goals(matrix)
    if args.frame is not None:
        frames = [args.frame]
    else:
        frames = range(matrix.n_frames)
    lines = ["frame,slot," + ",".join("k%d" % k for k in range(1, 89))
             + ",timer"]
    for f in frames:
        state = rewards.goal_state(segments, f)
        for slot in range(rewards.GOAL_SLOTS):
            row = state.matrix[slot]
            lines.append("%d,%d,%s,%d"
                         % (f, slot,
                            ",".join(str(int(v)) for v in row[:88]),
                            int(row[88])))
    _emit(args, "\n".join(lines) + "\n")
    return 0


def cmd_reward(args, cfg):
    clip = _load_clip(args.clip)
    skeletons = _load_skeletons(args, cfg)
    geom = _load_keyboard(args, cfg)
    matrix = _load_key_matrix(args.midi, clip.fps)
    reference = _load_clip(args.reference) if args.reference else None
    if args.dry_run:
        return 0
    breakdowns = rewards.evaluate_rewards(
        clip, skeletons, geom, matrix, reference=reference,
        energy_sign=float(_get(args, cfg, "energy_sign")))
    lines = [json.dumps(b.to_json_obj(), sort_keys=True,
                        separators=(",", ":")) for b in breakdowns]
    _emit(args, "\n".join(lines) + "\n")
    return 0


# --------------------------------------------------------------------------
# Argument wiring


def _add_common(p: argparse.ArgumentParser, output: bool = True):
    p.add_argument("--config", help="pipeline config JSON (or $%s)" % CONFIG_ENV)
    p.add_argument("--dry-run", action="store_true",
                   help="validate inputs, write nothing")
    if output:
        p.add_argument("-o", "--output", help="output path (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pianomotion",
                     description="MIDI-grounded piano hand-motion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", parents=[], help="MIDI to binary key matrix")
    p.add_argument("--midi", required=True)
    p.add_argument("--fps", type=float)
    p.add_argument("--frames", type=int, help="frame count (default: cover the file)")
    p.add_argument("--csv", help="also write a dense CSV")
    _add_common(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("condition", help="MIDI to duration-weighted matrix")
    p.add_argument("--midi", required=True)
    p.add_argument("--fps", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--mode", choices=("constant", "decaying"))
    _add_common(p)
    p.set_defaults(func=cmd_condition)

    p = sub.add_parser("sync", help="recover the time offset between two MIDI files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--span", type=float)
    p.add_argument("--step", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("triangulate", help="2D keypoints to a smoothed 3D trajectory")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--fps", type=float)
    p.add_argument("--reproj-threshold", dest="reproj_threshold", type=float)
    p.add_argument("--ransac-iters", dest="ransac_iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--cutoff", type=float)
    p.add_argument("--order", type=int)
    p.add_argument("--max-gap", dest="max_gap", type=int)
    p.add_argument("--no-filter", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_triangulate)

    p = sub.add_parser("fit", help="fit hand skeletons to a 3D trajectory")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--skeleton")
    p.add_argument("--init", help="initial motion clip")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--gtol", type=float)
    p.add_argument("--limit-weight", dest="limit_weight", type=float)
    p.add_argument("--report", help="write a fit report JSON")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("refine", help="IK-refine a clip to match its MIDI")
    p.add_argument("--clip", required=True)
    p.add_argument("--midi", required=True)
    p.add_argument("--keyboard")
    p.add_argument("--skeleton")
    p.add_argument("--activation-depth", dest="activation_depth", type=float)
    p.add_argument("--smoothness", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--exit-clearance", dest="exit_clearance", type=float)
    p.add_argument("--press-margin", dest="press_margin", type=float)
    p.add_argument("--max-displacement", dest="max_displacement", type=float)
    p.add_argument("--report", help="write a refinement report JSON")
    _add_common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("extract-press", help="extract the clip's pressed keys")
    p.add_argument("--clip", required=True)
    p.add_argument("--keyboard")
    p.add_argument("--skeleton")
    p.add_argument("--activation-depth", dest="activation_depth", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_extract_press)

    p = sub.add_parser("eval", help="precision/recall/F1 of a clip against MIDI")
    p.add_argument("--clip", required=True)
    p.add_argument("--midi", required=True)
    p.add_argument("--keyboard")
    p.add_argument("--skeleton")
    p.add_argument("--activation-depth", dest="activation_depth", type=float)
    p.add_argument("--skip-vacuous", dest="skip_vacuous", action="store_const",
                   const=True)
    p.add_argument("--per-frame", dest="per_frame", help="per-frame CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("index", help="build a retrieval index from key matrices")
    p.add_argument("--dataset", nargs="+", required=True,
                   help="key matrix JSON or MIDI files; clip id = basename")
    p.add_argument("--fps", type=float)
    p.add_argument("--window-len", dest="window_len", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--config", help="pipeline config JSON (or $%s)" % CONFIG_ENV)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("-o", "--output", required=True, help="index file (.npz)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="match a query matrix against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--fps", type=float)
    p.add_argument("--method", choices=("scan", "matmul"))
    p.add_argument("--full", action="store_true",
                   help="include per-window matches and distances")
    _add_common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("goalstate", help="dump 5x89 goal states as CSV")
    p.add_argument("--midi", required=True)
    p.add_argument("--fps", type=float)
    p.add_argument("--frame", type=int, help="one frame (default: all)")
    _add_common(p)
    p.set_defaults(func=cmd_goalstate)

    p = sub.add_parser("reward", help="per-frame reward breakdown as JSON lines")
    p.add_argument("--clip", required=True)
    p.add_argument("--midi", required=True)
    p.add_argument("--keyboard")
    p.add_argument("--skeleton")
    p.add_argument("--reference", help="reference clip for fingering")
    p.add_argument("--energy-sign", dest="energy_sign", type=float,
                   choices=(-1.0, 1.0))
    _add_common(p)
    p.set_defaults(func=cmd_reward)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except CliError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return 1
    except ValueError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return 1
    except CliIoError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return 2
    except OSError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
