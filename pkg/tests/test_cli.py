"""End-to-end subcommand tests driving the console entry point in-process."""

import json

import numpy as np
import pytest

import _synth
from pianomotion import cli, hand, keyboard as kb, metrics, midi, retrieval
from pianomotion.hand import MotionClip


def write_midi(path, spans, fps=60.0):
    notes = _synth.notes_on_frames(spans, fps=fps)
    path.write_bytes(midi.serialize_midi(notes))
    return notes


def write_matrix(path, frame_keys, fps=60.0):
    matrix = _synth.matrix_from_frames(frame_keys, fps=fps)
    path.write_text(midi.matrix_to_json(matrix))
    return matrix


def write_clip(path, clip):
    path.write_text(clip.to_json())


def run(argv):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# MIDI subcommands


def test_quantize_stdout_and_file(tmp_path, capsys):
    mid = tmp_path / "song.mid"
    write_midi(mid, [(40, 0, 3), (42, 1, 2)])
    assert run(["quantize", "--midi", mid, "--fps", 60]) == 0
    from_stdout = midi.matrix_from_json(capsys.readouterr().out)
    out = tmp_path / "m.json"
    csv = tmp_path / "m.csv"
    assert run(["quantize", "--midi", mid, "--fps", 60,
                "-o", out, "--csv", csv]) == 0
    from_file = midi.matrix_from_json(out.read_text())
    assert np.array_equal(from_stdout.data, from_file.data)
    assert from_file.fps == 60.0
    assert from_file.data[0, 39] == 1 and from_file.data[1, 41] == 1
    assert from_file.data[2, 41] == 0
    rows = csv.read_text().strip().split("\n")
    assert len(rows) == from_file.n_frames


def test_quantize_frames_flag(tmp_path, capsys):
    mid = tmp_path / "song.mid"
    write_midi(mid, [(40, 0, 2)])
    assert run(["quantize", "--midi", mid, "--fps", 60, "--frames", 7]) == 0
    matrix = midi.matrix_from_json(capsys.readouterr().out)
    assert matrix.n_frames == 7


def test_condition_mode_flag(tmp_path, capsys):
    mid = tmp_path / "song.mid"
    write_midi(mid, [(40, 0, 4)])
    assert run(["condition", "--midi", mid, "--fps", 60,
                "--mode", "decaying"]) == 0
    matrix = midi.matrix_from_json(capsys.readouterr().out)
    col = matrix.data[:4, 39]
    assert np.allclose(col, [1.0, 0.5, 1.0 / 3.0, 0.25], atol=1e-12)


def test_sync_recovers_offset(tmp_path, capsys):
    a = tmp_path / "a.mid"
    b = tmp_path / "b.mid"
    notes = write_midi(a, [(40, 0, 2), (44, 3, 5), (47, 6, 8)])
    shifted = midi.NoteList.from_events(
        [midi.NoteEvent(n.onset + 0.035, n.offset + 0.035, n.pitch)
         for n in notes], "b")
    b.write_bytes(midi.serialize_midi(shifted))
    assert run(["sync", "--a", a, "--b", b,
                "--span", 0.1, "--step", 0.005]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["matches"] == 3
    assert abs(abs(payload["offset"]) - 0.035) < 1e-9
    assert payload["notes_a"] == 3 and payload["notes_b"] == 3


# ---------------------------------------------------------------------------
# Reconstruction chain


def scene_files(tmp_path, geom, skeletons, n_frames=1):
    rig = _synth.five_camera_rig()
    frames = [( _synth.parked_pose(0, x=-0.1),
                _synth.hover_pose(geom, 1, 40))] * n_frames
    clip = MotionClip(60.0, frames)
    uv, conf, valid, joints = _synth.project_clip(clip, skeletons, rig)
    obs = cli.reconstruction.KeypointObservations(uv, conf, valid)
    cam_path = tmp_path / "cameras.json"
    kp_path = tmp_path / "keypoints.json"
    cam_path.write_text(rig.to_json())
    kp_path.write_text(obs.to_json())
    return cam_path, kp_path, joints


def test_triangulate_and_fit_chain(tmp_path, capsys, geom, skeletons):
    cam, kp, joints = scene_files(tmp_path, geom, skeletons)
    traj_path = tmp_path / "traj.json"
    assert run(["triangulate", "--keypoints", kp, "--cameras", cam,
                "--fps", 60, "--no-filter", "-o", traj_path]) == 0
    traj = cli.reconstruction.JointTrajectory.from_json(traj_path.read_text())
    assert traj.valid.all()
    assert np.abs(traj.positions - joints).max() < 1e-6

    clip_path = tmp_path / "fit.json"
    report_path = tmp_path / "fit_report.json"
    assert run(["fit", "--trajectory", traj_path, "-o", clip_path,
                "--report", report_path]) == 0
    clip = MotionClip.from_json(clip_path.read_text())
    for h in range(2):
        p = hand.forward_kinematics(skeletons[h], clip.pose(0, h))
        assert np.linalg.norm(p - joints[0, h], axis=1).max() < 1e-4
    report = json.loads(report_path.read_text())
    assert report["n_frames"] == 1
    assert report["copied_frames"] == 0
    assert max(max(row) for row in report["residual_rms"]) < 1e-4


def test_refine_via_cli(tmp_path, geom, skeletons):
    press = _synth.pressing_pose(geom, skeletons, {7: 40})
    touch = _synth.pressing_pose(geom, skeletons, {}, center_key=40,
                                 lift={7: -0.002})
    parked = _synth.parked_pose(0)
    clip = MotionClip(60.0, [(parked, press), (parked, touch)])
    clip_path = tmp_path / "clip.json"
    write_clip(clip_path, clip)
    matrix_path = tmp_path / "score.json"
    write_matrix(matrix_path, [{40}, {40}])
    out = tmp_path / "refined.json"
    report_path = tmp_path / "report.json"
    assert run(["refine", "--clip", clip_path, "--midi", matrix_path,
                "--smoothness", 0, "-o", out, "--report", report_path]) == 0
    refined = MotionClip.from_json(out.read_text())
    presses = metrics.extracted_presses(refined, skeletons, geom)
    assert presses == [{40}, {40}]
    report = json.loads(report_path.read_text())
    assert report["errors_before"] == 1
    assert report["errors_after"] == 0


def test_extract_press_and_eval(tmp_path, capsys, geom, skeletons):
    press = _synth.pressing_pose(geom, skeletons, {7: 40})
    parked = _synth.parked_pose(0)
    clip = MotionClip(60.0, [(parked, press), (parked, press)])
    clip_path = tmp_path / "clip.json"
    write_clip(clip_path, clip)

    assert run(["extract-press", "--clip", clip_path]) == 0
    matrix = midi.matrix_from_json(capsys.readouterr().out)
    assert matrix.data[:, 39].tolist() == [1, 1]
    assert matrix.data.sum() == 2

    matrix_path = tmp_path / "score.json"
    write_matrix(matrix_path, [{40}, {40}])
    per_frame = tmp_path / "frames.csv"
    assert run(["eval", "--clip", clip_path, "--midi", matrix_path,
                "--per-frame", per_frame]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["precision"] == 100.0
    assert report["recall"] == 100.0
    assert report["f1"] == 100.0
    lines = per_frame.read_text().strip().split("\n")
    assert lines[0] == "frame,precision,recall,f1"
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# Retrieval


def test_index_and_retrieve(tmp_path, capsys, rng):
    ds_a = tmp_path / "alpha.json"
    ds_b = tmp_path / "beta.json"
    rows_a = [{40 + int(x)} for x in rng.integers(0, 12, 40)]
    rows_b = [{60} if f % 2 else {61, 62} for f in range(40)]
    write_matrix(ds_a, rows_a)
    write_matrix(ds_b, rows_b)
    index_path = tmp_path / "index.npz"
    assert run(["index", "--dataset", ds_a, ds_b, "--fps", 60,
                "-o", index_path]) == 0
    index = retrieval.WindowIndex.load(str(index_path))
    assert set(index.clip_ids) == {"alpha", "beta"}

    query_path = tmp_path / "query.json"
    write_matrix(query_path, rows_a[5:37])
    assert run(["retrieve", "--index", index_path, "--query", query_path,
                "--fps", 60, "--full"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["window_len"] == 30 and payload["stride"] == 1
    assert payload["n_query_windows"] == 3
    assert len(payload["matches"]) == 3
    assert payload["segments"][0]["clip_id"] == "alpha"
    assert payload["segments"][0]["start"] == 5


# ---------------------------------------------------------------------------
# Goal state and rewards


def test_goalstate_csv(tmp_path, capsys):
    matrix_path = tmp_path / "score.json"
    write_matrix(matrix_path, [{40}, {40}, set()])
    assert run(["goalstate", "--midi", matrix_path, "--fps", 60,
                "--frame", 0]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert len(lines) == 6                     # header + 5 slots
    assert lines[0].startswith("frame,slot,k1,")
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "0"
    assert first[2 + 39] == "1"                # key 40 active in slot 0
    assert first[-1] == "2"                    # two frames to segment end


def test_reward_json_lines_deterministic(tmp_path, geom, skeletons):
    press = _synth.pressing_pose(geom, skeletons, {7: 40}, depth={7: 0.0095})
    parked = _synth.parked_pose(0)
    clip = MotionClip(60.0, [(parked, press), (parked, press)])
    clip_path = tmp_path / "clip.json"
    write_clip(clip_path, clip)
    matrix_path = tmp_path / "score.json"
    write_matrix(matrix_path, [{40}, {40}])
    out_a = tmp_path / "a.jsonl"
    out_b = tmp_path / "b.jsonl"
    for out in (out_a, out_b):
        assert run(["reward", "--clip", clip_path, "--midi", matrix_path,
                    "-o", out]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    lines = out_a.read_text().strip().split("\n")
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first["targets"] == {"40": 1.0}
    assert first["total"] == pytest.approx(1.45, rel=1e-12)


# ---------------------------------------------------------------------------
# Config handling and failure modes


def test_config_file_and_flag_precedence(tmp_path, capsys):
    mid = tmp_path / "song.mid"
    write_midi(mid, [(40, 0, 2)], fps=30.0)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"fps": 30.0}))
    assert run(["quantize", "--midi", mid, "--config", cfg]) == 0
    assert midi.matrix_from_json(capsys.readouterr().out).fps == 30.0
    # An explicit flag beats the config file.
    assert run(["quantize", "--midi", mid, "--config", cfg, "--fps", 60]) == 0
    assert midi.matrix_from_json(capsys.readouterr().out).fps == 60.0


def test_config_env_var(tmp_path, capsys, monkeypatch):
    mid = tmp_path / "song.mid"
    write_midi(mid, [(40, 0, 2)], fps=30.0)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"fps": 30.0}))
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    assert run(["quantize", "--midi", mid]) == 0
    assert midi.matrix_from_json(capsys.readouterr().out).fps == 30.0


def test_config_rejects_unknown_field(tmp_path, capsys):
    mid = tmp_path / "song.mid"
    write_midi(mid, [(40, 0, 2)])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"fsp": 30.0}))
    assert run(["quantize", "--midi", mid, "--config", cfg]) == 1
    assert "unknown field" in capsys.readouterr().err


def test_config_rejects_bad_choice(tmp_path, capsys):
    mid = tmp_path / "song.mid"
    write_midi(mid, [(40, 0, 2)])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"mode": "linear"}))
    assert run(["condition", "--midi", mid, "--config", cfg]) == 1
    assert "must be one of" in capsys.readouterr().err


def test_missing_input_is_io_error(tmp_path, capsys):
    assert run(["quantize", "--midi", tmp_path / "absent.mid"]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_corrupt_midi_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.mid"
    bad.write_bytes(b"MThd garbage")
    assert run(["quantize", "--midi", bad]) == 1
    assert "error" in capsys.readouterr().err


def test_eval_fps_mismatch_is_validation_error(tmp_path, capsys, geom,
                                               skeletons):
    press = _synth.pressing_pose(geom, skeletons, {7: 40})
    clip = MotionClip(60.0, [(_synth.parked_pose(0), press)] * 2)
    clip_path = tmp_path / "clip.json"
    write_clip(clip_path, clip)
    matrix_path = tmp_path / "score.json"
    write_matrix(matrix_path, [{40}, {40}], fps=59.94)
    assert run(["eval", "--clip", clip_path, "--midi", matrix_path]) == 1
    assert "fps" in capsys.readouterr().err


def test_dry_run_writes_nothing(tmp_path, capsys):
    mid = tmp_path / "song.mid"
    write_midi(mid, [(40, 0, 2)])
    out = tmp_path / "out.json"
    assert run(["quantize", "--midi", mid, "--fps", 60,
                "-o", out, "--dry-run"]) == 0
    assert not out.exists()
    assert capsys.readouterr().out == ""


def test_unknown_subcommand_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["frobnicate"])
    assert exc.value.code == 1
