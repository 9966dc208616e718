import json
import subprocess
import sys

import numpy as np
import pytest

from zonetrain import cli, evalkit, ingest
from zonetrain.errors import ZonePurityViolation
from zonetrain.synthphantom import generate_dataset, small_geometry

DESK_FAST = ["--profile", "desk", "--n-train-images", "1", "--epochs", "1", "--lr", "3e-4"]


def run(args, capsys):
    code = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def test_extract_default_counts(capsys, tmp_path):
    code, out, _ = run(["extract", "--preview", tmp_path / "prev"], capsys)
    assert code == 0
    assert out.splitlines()[0] == "81 regular / 27 per zone"
    audit = json.loads((tmp_path / "prev" / "audit.json").read_text())
    assert audit["axial_line_starts"] == [540, 640, 740, 840, 940, 1040, 1140, 1240, 1340]
    assert audit["zone_centers_cm"]["on_focus"] == 2.0
    prev = np.load(tmp_path / "prev" / "preview.npz")
    assert prev["patches"].shape == (81, 2, 200, 26)
    assert (tmp_path / "prev" / "preview.png").exists()


def test_train_logs_schedule(capsys, caplog):
    with caplog.at_level("INFO", logger="zonetrain"):
        code, out, _ = run(["train", "--n-train-images", "25", "--dry-run"], capsys)
    assert code == 0
    assert "epochs=2000 lr=5e-6" in out and "epochs=2000 lr=5e-6" in caplog.text


def test_table_desk_grid(capsys, tmp_path):
    out_dir = tmp_path / "table"
    code, out, _ = run(["table", *DESK_FAST, "--n-repetitions", "2", "--out", out_dir], capsys)
    assert code == 0
    grid = out.splitlines()[-6:]
    assert grid[0].split() == ["pre_focal", "on_focus", "post_focal"]
    assert [l.split()[0] for l in grid[1:]] == ["pre_focal", "on_focus", "post_focal", "regular", "depth_aware"]
    rows = [l for l in (out_dir / "table.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 16
    assert (out_dir / "table.png").exists()
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["seeds"]["repetitions"] == [0, 1]
    assert manifest["dataset_digest"].startswith("synthetic-sha256:")
    assert not (out_dir / cli.INCOMPLETE).exists()
    # report re-renders the stored table
    code, out2, _ = run(["report", out_dir, "--out", tmp_path / "rep"], capsys)
    assert code == 0 and (tmp_path / "rep" / "table.png").exists()
    assert out2.strip() == "\n".join(grid).strip()


def test_sequential_matches_parallel(capsys, tmp_path):
    base = ["table", *DESK_FAST, "--n-repetitions", "2", "--rows", "regular"]
    run([*base, "--sequential", "--out", tmp_path / "a"], capsys)
    run([*base, "--workers", "2", "--out", tmp_path / "b"], capsys)
    assert (tmp_path / "a" / "table.csv").read_bytes() == (tmp_path / "b" / "table.csv").read_bytes()


def test_train_then_eval(capsys, tmp_path):
    run_dir = tmp_path / "run"
    code, _, _ = run(["train", *DESK_FAST, "--strategy", "zone", "--out", run_dir], capsys)
    assert code == 0
    assert sorted(p.name for p in run_dir.glob("*.ztck")) == [
        "model-on_focus.ztck", "model-post_focal.ztck", "model-pre_focal.ztck"]
    history = json.loads((run_dir / "history.json").read_text())
    assert len(history["on_focus"]["train_loss"]) == 1
    code, out, _ = run(["eval", run_dir, "--test-zone", "on_focus"], capsys)
    assert code == 0
    result = json.loads(out)
    assert result["n_samples"] == 3 * 12
    assert result["accuracy"] == pytest.approx(np.trace(result["confusion"]) / 36)


def test_sweeps_and_width(capsys, tmp_path):
    code, out, _ = run(["sweep-offset", *DESK_FAST, "--n-repetitions", "1", "--offsets=-0.2,0,0.2",
                        "--out", tmp_path / "o"], capsys)
    assert code == 0 and len(out.strip().splitlines()) == 4
    assert (tmp_path / "o" / "sweep_offset.png").exists()
    code, _, _ = run(["sweep-center", *DESK_FAST, "--n-repetitions", "1", "--centers", "1.8,2.0,3.9",
                      "--out", tmp_path / "c"], capsys)
    assert code == 0
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["omitted"] == [3.9]
    code, _, _ = run(["width", *DESK_FAST, "--n-repetitions", "1", "--out", tmp_path / "w"], capsys)
    assert code == 0
    code, out, _ = run(["report", tmp_path / "w" / "zone_width.csv"], capsys)
    assert code == 0 and out.startswith("zone_width")


def test_invalid_config_exit_one_without_artifacts(capsys, tmp_path):
    out_dir = tmp_path / "never"
    code, _, err = run(["table", "--n-train-images", "37", "--out", out_dir], capsys)
    assert code == 1
    assert json.loads(err)["error"] == "ConfigError"
    assert not out_dir.exists()
    code, _, err = run(["table", "--no-such-flag"], capsys)
    assert code == 1 and json.loads(err)["exit_code"] == 1


def test_data_error_exit_two(capsys, tmp_path):
    bad = tmp_path / "bad.ztrf"
    bad.write_bytes(b"JUNKJUNK")
    code, _, err = run(["extract", "--container", bad], capsys)
    assert code == 2 and json.loads(err)["error"] == "BadMagic"


def test_compute_error_exit_three_marks_partial_output(capsys, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise ZonePurityViolation("mixed zones")

    monkeypatch.setattr(evalkit, "repeat_experiment", boom)
    out_dir = tmp_path / "t"
    code, _, err = run(["table", *DESK_FAST, "--n-repetitions", "1", "--out", out_dir], capsys)
    assert code == 3 and json.loads(err)["error"] == "ZonePurityViolation"
    assert (out_dir / cli.INCOMPLETE).exists()


def test_synth_import_and_container_data(capsys, tmp_path):
    container = tmp_path / "f.ztrf"
    code, out, _ = run(["synth", "--profile", "desk", "--frames-per-class", "3", "-o", container], capsys)
    assert code == 0 and json.loads(out)["frames"] == 9
    code, out, _ = run(["extract", "--profile", "desk", "--container", container], capsys)
    assert out.splitlines()[0] == "36 regular / 12 per zone"

    geometry = small_geometry()[0]
    frame = generate_dataset(1, geometry=geometry)[0].samples
    raw = tmp_path / "raw.bin"
    raw.write_bytes(np.ascontiguousarray(frame, dtype="<f4").tobytes())
    layout = tmp_path / "layout.json"
    layout.write_text(json.dumps({"axial_pixels": 1040, "lateral_pixels": 128, "dtype": "<f4",
                                  "order": "axial_major"}))
    code, out, _ = run(["import", "--layout", layout, "--file", f"{raw}:2", "-o", tmp_path / "i.ztrf"], capsys)
    assert code == 0 and json.loads(out)["labels"] == [2]
    (back,) = ingest.read_container(tmp_path / "i.ztrf")
    np.testing.assert_array_equal(back.samples, frame)


def test_fetch_uses_cache_env(capsys, tmp_path, monkeypatch):
    import http.server
    import threading
    from functools import partial

    root = tmp_path / "remote"
    root.mkdir()
    (root / "a.bin").write_bytes(b"x" * 64)
    (root / "index.json").write_text(json.dumps([{"name": "a.bin"}]))
    httpd = http.server.ThreadingHTTPServer(
        ("127.0.0.1", 0), partial(http.server.SimpleHTTPRequestHandler, directory=str(root)))
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    monkeypatch.setenv(cli.CACHE_ENV, str(tmp_path / "cache"))
    try:
        url = f"http://127.0.0.1:{httpd.server_address[1]}"
        code, out, _ = run(["fetch", "--url", url], capsys)
        assert code == 0 and json.loads(out)["bytes_transferred"] == 64
        code, out, _ = run(["fetch", "--url", url], capsys)
        assert json.loads(out)["bytes_transferred"] == 0
    finally:
        httpd.shutdown()
        httpd.server_close()
    assert (tmp_path / "cache" / "a.bin").exists()


def test_trace_and_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "zonetrain", "trace", "--channels", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "48 x 4 x 96" in res.stdout and "5888" in res.stdout


def test_format_lr():
    assert cli.format_lr(5e-6) == "5e-6"
    assert cli.format_lr(1e-5) == "1e-5"
    assert cli.format_lr(0.0003) == "0.0003"


def test_unknown_table_row_is_config_error(tmp_path, capsys):
    code = cli.main(["table", "--profile", "desk", "--rows", "foo", "--n-train-images", "1", "--epochs", "1",
                     "--lr", "1e-3", "--n-repetitions", "1", "--out", str(tmp_path / "t")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and "foo" in err["message"]
