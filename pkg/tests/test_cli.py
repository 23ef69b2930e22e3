from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import TINY_VOC_CFG, VOC_NAMES
from yolo_offload.cli import COMMANDS, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, parse_args
from yolo_offload.images import write_pnm
from yolo_offload.wire import Broker

SMALL_CFG = """[net]
width=64
height=64
channels=3
[convolutional]
filters=25
size=1
stride=32
activation=linear
[region]
anchors=1,1
classes=20
num=1
"""


def run(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "img.ppm"
    rng = np.random.default_rng(0)
    write_pnm(path, rng.integers(0, 256, (60, 80, 3), dtype=np.uint8))
    return path


@pytest.mark.parametrize("command", [None, *COMMANDS])
def test_help_exits_zero(command, capsys):
    argv = ["--help"] if command is None else [command, "--help"]
    assert run(argv) == EXIT_OK
    assert "usage" in capsys.readouterr().out


def test_entry_point_module():
    out = subprocess.run([sys.executable, "-m", "yolo_offload.cli", "--help"],
                         capture_output=True, text=True, timeout=60)
    assert out.returncode == 0 and "demo" in out.stdout


def test_missing_command_is_usage_error():
    assert run([]) == EXIT_USAGE


@pytest.mark.parametrize("flag, value", [("--conf", "1.01"), ("--conf", "0"), ("--nms", "x"),
                                         ("--size", "330")])
def test_bad_values_are_usage_errors(image, flag, value, capsys):
    code = run(["detect", "--image", str(image), "--cfg", str(TINY_VOC_CFG),
                "--random-weights", "0", flag, value])
    assert code == EXIT_USAGE
    assert flag in capsys.readouterr().err


def test_missing_weights_file_is_runtime_error(image, tmp_path):
    assert run(["detect", "--image", str(image), "--cfg", str(TINY_VOC_CFG),
                "--weights", str(tmp_path / "absent.weights")]) == EXIT_RUNTIME


def test_truncated_weights_is_runtime_error(image, tmp_path, tiny_voc_weights, capsys):
    bad = tmp_path / "bad.weights"
    bad.write_bytes(tiny_voc_weights[:-4])
    assert run(["detect", "--image", str(image), "--cfg", str(TINY_VOC_CFG),
                "--weights", str(bad)]) == EXIT_RUNTIME
    assert "1 missing" in capsys.readouterr().err


def test_no_weights_is_usage_error(image):
    assert run(["detect", "--image", str(image), "--cfg", str(TINY_VOC_CFG)]) == EXIT_USAGE


def test_unreachable_broker_is_runtime_error():
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    assert run(["--broker", f"127.0.0.1:{port}", "camera", "--frames", "1"]) == EXIT_RUNTIME


def detect_args(image, cfg, extra=()):
    return ["detect", "--image", str(image), "--cfg", str(cfg), "--random-weights", "3",
            "--names", str(VOC_NAMES), "--size", "64", "--conf", "0.01", *extra]


def test_detect_deterministic(image, tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CFG)
    assert run(detect_args(image, cfg)) == EXIT_OK
    first = capsys.readouterr().out
    assert run(detect_args(image, cfg)) == EXIT_OK
    assert capsys.readouterr().out == first
    assert first.strip()
    label, prob, corners = first.splitlines()[0].split("\t")
    assert label in VOC_NAMES.read_text().split()
    assert 0 < float(prob) <= 1 and len(corners.split()) == 4


def test_detect_writes_outputs_and_eval_map(image, tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CFG)
    dets, annotated = tmp_path / "dets.jsonl", tmp_path / "out.ppm"
    assert run(detect_args(image, cfg, ["--output", str(annotated),
                                        "--dets-out", str(dets)])) == EXIT_OK
    assert annotated.exists()
    record = json.loads(dets.read_text())
    assert record["image"] == "img"
    truth = tmp_path / "truth"
    truth.mkdir()
    (truth / "img.txt").write_text("11 10 10 40 40 0\n")
    capsys.readouterr()
    assert run(["eval-map", "--dets", str(dets), "--truth", str(truth)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "dog" in out and "mAP" in out


def test_convert_voc_command(tmp_path, capsys):
    (tmp_path / "xml").mkdir()
    (tmp_path / "xml" / "a.xml").write_text(
        "<annotation><object><name>cat</name><bndbox><xmin>1</xmin><ymin>1</ymin>"
        "<xmax>5</xmax><ymax>5</ymax></bndbox></object></annotation>")
    assert run(["convert-voc", "--xml", str(tmp_path / "xml"), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "a.txt").read_text() == "7 1 1 5 5 0\n"


def test_sweep_command(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CFG)
    out_csv = tmp_path / "r.csv"
    assert run(["sweep", "--cfg", str(cfg), "--random-weights", "0", "--sizes", "64,96",
                "--frames", "2", "--csv", str(out_csv)]) == EXIT_OK
    table = capsys.readouterr().out
    assert "64x64" in table and "96x96" in table
    lines = out_csv.read_text().splitlines()
    assert lines[0].startswith("input_side,frames") and len(lines) == 3
    assert run(["sweep", "--cfg", str(cfg), "--random-weights", "0", "--sizes", "64,100"]) \
        == EXIT_USAGE


def test_demo_zero_duration_rejected(capsys):
    assert run(["demo", "--stub", "--duration", "0"]) == EXIT_USAGE


def test_demo_stub(tmp_path, capsys):
    assert run(["demo", "--stub", "--stub-ms", "50", "--duration", "1", "--rate", "20",
                "--camera-size", "64x48", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    stats = dict(line.rsplit(None, 1) for line in out.splitlines())
    assert int(stats["frames in"]) == 20
    assert int(stats["frames processed"]) >= 10
    assert int(stats["sink messages"]) == int(stats["frames processed"])
    assert (tmp_path / "detections.jsonl").exists()


def test_broker_command_runs_for_duration():
    assert run(["--broker", "127.0.0.1:0", "broker", "--duration", "0.2"]) == EXIT_OK


def test_camera_command_publishes(capsys):
    with Broker() as b:
        assert run(["--broker", b.endpoint, "camera", "--size", "32x24", "--rate", "100",
                    "--frames", "5"]) == EXIT_OK


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# demo settings\nbroker=10.0.0.1:9\nconf=0.3\nsize=320\nletterbox=true\n")
    args = parse_args(["--config", str(conf), "detect", "--image", "x", "--cfg", "c",
                       "--size", "416"])
    assert args.broker == "10.0.0.1:9"
    assert args.conf == 0.3
    assert args.size == 416          # the flag wins over the file
    assert args.letterbox is True


def test_config_file_invalid_value(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("conf=2\n")
    with pytest.raises(SystemExit) as exc:
        parse_args(["--config", str(conf), "detect", "--image", "x", "--cfg", "c"])
    assert exc.value.code == EXIT_USAGE


def test_config_file_missing(tmp_path):
    with pytest.raises(SystemExit) as exc:
        parse_args(["--config", str(tmp_path / "nope"), "demo"])
    assert exc.value.code == EXIT_USAGE
