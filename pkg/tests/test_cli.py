import hashlib
import json

import numpy as np
import pytest

from talkfield.cli import EXIT_CODES, build_parser, main, resolve
from talkfield.formats import write_image, write_keypoints, write_wav
from talkfield.toyscene import speech_envelope, toy_audio

SMALL = ["--width", "16", "--height", "16", "--points", "4"]


@pytest.fixture(scope="module")
def wav(tmp_path_factory):
    p = tmp_path_factory.mktemp("audio") / "speech.wav"
    write_wav(p, toy_audio(speech_envelope(50, np.random.default_rng(0)), 25.0))
    return p


def digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.glob("*.ppm"))}


def test_render_frame_count(tmp_path, wav):
    assert main(["render", "--audio", str(wav), "--frames", "50", "--out", str(tmp_path), *SMALL]) == 0
    names = sorted(p.name for p in tmp_path.glob("*.ppm"))
    assert names == [f"frame_{i:05d}.ppm" for i in range(50)]
    stats = (tmp_path / "render_stats.csv").read_text().splitlines()
    assert stats[0] == "frame_index,wall_ms,clamped_points,P,H,W" and len(stats) == 51


def test_render_default_frames_follow_audio(tmp_path, wav):
    assert main(["render", "--audio", str(wav), "--out", str(tmp_path), *SMALL]) == 0
    assert len(list(tmp_path.glob("*.ppm"))) == 50


def test_render_byte_identical_across_runs_and_workers(tmp_path, wav):
    runs = []
    for k, workers in enumerate(("1", "1", "3")):
        out = tmp_path / str(k)
        args = ["render", "--audio", str(wav), "--frames", "6", "--seed", "5", "--workers", workers,
                "--out", str(out), *SMALL]
        assert main(args) == 0
        runs.append(digest(out))
    assert runs[0] == runs[1] == runs[2] and len(runs[0]) == 6


def test_seed_changes_output(tmp_path, wav):
    outs = []
    for seed in ("1", "2"):
        out = tmp_path / seed
        main(["render", "--audio", str(wav), "--frames", "2", "--seed", seed, "--out", str(out), *SMALL])
        outs.append(digest(out))
    assert outs[0] != outs[1]


def test_train_then_render_with_checkpoint(tmp_path, wav):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 3, "rays_per_batch": 8, "P_gt": 16, "n_views": 2,
                               "audio_frames": 30, "resolutions": [8, 16], "log2_table_size": 8}))
    out = tmp_path / "train"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--width", "8", "--height", "8",
                 "--points", "4"]) == 0
    assert (out / "model.lnck").is_file() and (out / "train_log.csv").read_text().startswith("iteration,loss")
    rend = tmp_path / "render"
    assert main(["render", "--checkpoint", str(out / "model.lnck"), "--audio", str(wav), "--frames", "2",
                 "--out", str(rend), *SMALL]) == 0
    assert len(list(rend.glob("*.ppm"))) == 2


def test_config_file_overridden_by_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "points": 9, "frames": 4}))
    args = build_parser().parse_args(["render", "--config", str(cfg), "--seed", "8"])
    opts = resolve(args)
    assert opts["seed"] == 8 and opts["points"] == 9 and opts["frames"] == 4


def test_render_with_ref_image(tmp_path, wav, rng):
    ref = tmp_path / "ref.ppm"
    write_image(ref, rng.uniform(size=(16, 16, 3)))
    kp = tmp_path / "kp.txt"
    write_keypoints(kp, rng.uniform(0.3, 0.7, size=(68, 2)))
    base = ["render", "--audio", str(wav), "--frames", "1", "--ref", str(ref), "--points", "4"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 7
    assert main(base + ["--keypoints", str(kp), "--out", str(tmp_path / "b")]) == 0
    assert main(base + ["--keypoints", str(kp), "--width", "32", "--out", str(tmp_path / "c")]) == 6


def test_exit_codes(tmp_path, wav, capsys):
    assert main(["render", "--audio", str(tmp_path / "none.wav"), "--out", str(tmp_path)]) == 3
    assert "talkfield: error[missing-file]: no such file" in capsys.readouterr().err
    assert main(["render", "--bogus"]) == 2
    assert main(["launch"]) == 2
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    kp = tmp_path / "kp.txt"
    write_keypoints(kp, np.full((68, 2), 0.5))
    assert main(["render", "--audio", str(wav), "--ref", str(bad), "--keypoints", str(kp)]) == 5
    assert "error[bad-magic]" in capsys.readouterr().err
    ck = tmp_path / "ck.lnck"
    ck.write_bytes(b"LNCK" + bytes(40))
    assert main(["render", "--audio", str(wav), "--checkpoint", str(ck)]) == 5


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for code, _ in EXIT_CODES:
        assert f"  {code}  " in text


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "core-math" in out and "cli-io" in out


def test_bench_writes_report(tmp_path, capsys):
    args = ["bench", "--knob", "audio", "--values", "0.2,0.4,0.6,0.8", "--out", str(tmp_path)]
    assert main(args) == 0
    assert {"audio.csv", "audio.svg", "report.json"} <= {p.name for p in tmp_path.iterdir()}
    assert main(["bench", "--knob", "audio", "--values", "1,2", "--out", str(tmp_path)]) == 2
    assert main(["bench", "--knob", "audio", "--values", "a,b,c,d", "--out", str(tmp_path)]) == 2
