"""Single entry point: ``yolo-offload <subcommand>``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("yolo_offload")


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _probability(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"{value} is outside (0, 1)")
    return value


def _side(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value <= 0 or value % 32:
        raise argparse.ArgumentTypeError(f"{value} is not a positive multiple of 32")
    return value


def _sizes(text: str) -> list[int]:
    return [_side(v) for v in text.split(",") if v.strip()]


def _geometry(text: str) -> tuple[int, int]:
    w, sep, h = text.lower().partition("x")
    if not sep or not w.isdigit() or not h.isdigit() or int(w) == 0 or int(h) == 0:
        raise argparse.ArgumentTypeError(f"size must look like WIDTHxHEIGHT, got {text!r}")
    return int(w), int(h)


def _positive(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"{value} must be positive")
    return value


GLOBAL_KEYS = {"broker", "log-level"}
_TRUE, _FALSE = {"true", "yes", "on", "1"}, {"false", "no", "off", "0"}


def read_config_file(path: str) -> dict[str, str]:
    """Parse a ``key=value`` file whose keys are flag names without dashes."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().lstrip("-").replace("_", "-")] = value.strip()
    return out


def _config_tokens(values: dict[str, str], keys) -> list[str]:
    tokens = []
    for key in keys:
        value = values[key]
        if value.lower() in _TRUE | _FALSE and key not in GLOBAL_KEYS:
            if value.lower() in _TRUE:
                tokens.append(f"--{key}")
        else:
            tokens += [f"--{key}", value]
    return tokens


def _add_model_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--cfg", required=required, help="Darknet cfg file")
    p.add_argument("--weights", help="Darknet weights file")
    p.add_argument("--random-weights", type=int, metavar="SEED",
                   help="use synthetic weights instead of --weights (timing only)")
    p.add_argument("--names", help="class names file, one label per line")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="yolo-offload", description=__doc__.splitlines()[0])
    parser.add_argument("--broker", default="127.0.0.1:11311", help="broker HOST:PORT")
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    parser.add_argument("--config", help="key=value file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("broker", help="run the topic broker")
    p.add_argument("--queue-depth", type=int, default=8)
    p.add_argument("--duration", type=_positive)

    p = sub.add_parser("camera", help="publish camera frames")
    p.add_argument("--topic", default="camera")
    p.add_argument("--size", type=_geometry, default=(640, 480), help="WIDTHxHEIGHT")
    p.add_argument("--rate", type=float, default=30.0, help="frames per second")
    p.add_argument("--source", default="pattern", help="image directory or 'pattern'")
    p.add_argument("--duration", type=_positive)
    p.add_argument("--frames", type=int)

    p = sub.add_parser("detector", help="run the detector node")
    _add_model_args(p, required=False)
    p.add_argument("--stub", action="store_true", help="use the stub backend")
    p.add_argument("--stub-ms", type=float, default=0.0, help="stub service time")
    p.add_argument("--size", type=_side, default=416)
    p.add_argument("--conf", type=_probability, default=0.24)
    p.add_argument("--nms", type=_probability, default=0.45)
    p.add_argument("--in", dest="in_topic", default="camera")
    p.add_argument("--out", dest="out_topic", default="detections")
    p.add_argument("--duration", type=_positive)

    p = sub.add_parser("sink", help="join detections to frames and log them")
    p.add_argument("--in", dest="in_topic", default="detections")
    p.add_argument("--frames", dest="frames_topic", default="camera")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--emit-empty", action="store_true")
    p.add_argument("--duration", type=_positive)

    p = sub.add_parser("detect", help="run detection on one image")
    p.add_argument("--image", required=True)
    _add_model_args(p)
    p.add_argument("--size", type=_side, default=416)
    p.add_argument("--conf", type=_probability, default=0.24)
    p.add_argument("--nms", type=_probability, default=0.45)
    p.add_argument("--letterbox", action="store_true")
    p.add_argument("--output", help="write the annotated image (PPM)")
    p.add_argument("--dets-out", help="append a JSONL record for eval-map")

    p = sub.add_parser("sweep", help="throughput (and optional mAP) across input sizes")
    _add_model_args(p)
    p.add_argument("--sizes", type=_sizes, default=[160, 224, 288, 320, 352, 384])
    p.add_argument("--images", help="image directory (default: synthetic frames)")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--conf", type=_probability, default=0.24)
    p.add_argument("--nms", type=_probability, default=0.45)
    p.add_argument("--truth", help="truth sidecar directory; adds an mAP column")
    p.add_argument("--csv", help="also write the CSV here")
    p.add_argument("--end-to-end", action="store_true", help="time through a local broker")

    p = sub.add_parser("eval-map", help="VOC-2007 11-point mAP of a detections file")
    p.add_argument("--dets", required=True, help="JSONL detections file")
    p.add_argument("--truth", required=True, help="truth sidecar directory")
    p.add_argument("--iou", type=_probability, default=0.5)
    p.add_argument("--names", help="class names file")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("convert-voc", help="convert VOC XML annotations to truth sidecars")
    p.add_argument("--xml", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--names", help="class names file (default: the 20 VOC classes)")

    p = sub.add_parser("demo", help="run broker, camera, detector and sink in one process")
    _add_model_args(p, required=False)
    p.add_argument("--stub", action="store_true")
    p.add_argument("--stub-ms", type=float, default=100.0)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--rate", type=float, default=30.0)
    p.add_argument("--camera-size", type=_geometry, default=(640, 480))
    p.add_argument("--source", default="pattern")
    p.add_argument("--size", type=_side, default=320)
    p.add_argument("--conf", type=_probability, default=0.24)
    p.add_argument("--nms", type=_probability, default=0.45)
    p.add_argument("--out", dest="out_dir", help="sink output directory (default: temporary)")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse flags, layering an optional ``--config`` file under them.

    File values are spliced in ahead of the command-line flags, so an explicit
    flag always wins (argparse keeps the last occurrence).
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            values = read_config_file(known.config)
        except (OSError, UsageError) as exc:
            parser.exit(EXIT_USAGE, f"yolo-offload: cannot read config: {exc}\n")
        cmd_index = next((i for i, tok in enumerate(argv) if tok in COMMANDS), None)
        if cmd_index is not None:
            global_keys = [k for k in values if k in GLOBAL_KEYS]
            local_keys = [k for k in values if k not in GLOBAL_KEYS]
            argv = (_config_tokens(values, global_keys) + argv[:cmd_index + 1]
                    + _config_tokens(values, local_keys) + argv[cmd_index + 1:])
    return parser.parse_args(argv)


def _load_backend(args, side: int):
    from .model import (
        CfgParseError,
        WeightsError,
        build_model,
        load_names,
        parse_cfg,
        synthetic_weights,
    )
    from .pipeline import ModelBackend

    try:
        specs = parse_cfg(Path(args.cfg).read_text(encoding="utf-8"))
        if args.random_weights is not None:
            data = synthetic_weights(specs, args.random_weights)
        elif args.weights:
            data = Path(args.weights).read_bytes()
        else:
            raise UsageError("either --weights or --random-weights is required")
        names = load_names(args.names) if args.names else None
        model = build_model(specs, data, names)
    except OSError as exc:
        raise RuntimeFailure(f"cannot read model files: {exc}") from exc
    except (CfgParseError, WeightsError) as exc:
        raise RuntimeFailure(f"cannot load model: {exc}") from exc
    conf = getattr(args, "conf", 0.24)
    nms_t = getattr(args, "nms", 0.45)
    return ModelBackend(model, conf, nms_t, getattr(args, "letterbox", False)).with_input_size(side)


def _connect(endpoint: str, name: str):
    from .wire import BrokerUnreachable, Session

    try:
        return Session.connect(endpoint, name)
    except BrokerUnreachable as exc:
        raise RuntimeFailure(str(exc)) from exc


def _stop_on_signal() -> threading.Event:
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
    return stop


def cmd_broker(args) -> int:
    from .wire import Broker, parse_endpoint

    host, port = parse_endpoint(args.broker)
    broker = Broker(host, port, queue_depth=args.queue_depth)
    try:
        broker.start_in_thread()
    except OSError as exc:
        raise RuntimeFailure(f"cannot listen on {args.broker}: {exc}") from exc
    print(f"broker listening on {broker.endpoint}", flush=True)
    stop = _stop_on_signal()
    try:
        stop.wait(args.duration)
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    return EXIT_OK


def cmd_camera(args) -> int:
    from .nodes import CameraConfig, run_camera

    w, h = args.size
    config = CameraConfig(w, h, args.rate, args.source, args.topic)
    session = _connect(args.broker, "camera")
    try:
        stats = run_camera(config, session, args.duration, args.frames, _stop_on_signal())
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        session.close()
    print(f"published {stats.published} frames", flush=True)
    return EXIT_OK


def _detector_backend(args):
    from .pipeline import StubBackend

    if args.stub:
        return StubBackend((), args.stub_ms / 1000.0, args.size)
    if not args.cfg:
        raise UsageError("--cfg is required unless --stub is given")
    return _load_backend(args, args.size)


def cmd_detector(args) -> int:
    from .nodes import DetectorConfig, run_detector

    backend = _detector_backend(args)
    config = DetectorConfig(args.cfg, args.weights, args.names, args.size, args.conf, args.nms,
                            args.in_topic, args.out_topic)
    session = _connect(args.broker, "detector")
    try:
        stats = run_detector(config, session, backend, args.duration, _stop_on_signal())
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        session.close()
    print(f"received {stats.received} frames, processed {len(stats.processed)}", flush=True)
    return EXIT_OK


def cmd_sink(args) -> int:
    from .nodes import run_sink

    session = _connect(args.broker, "sink")
    try:
        stats = run_sink(session, args.out_dir, args.in_topic, args.frames_topic,
                         args.emit_empty, args.duration, _stop_on_signal())
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        session.close()
    print(f"logged {stats.messages} detection sets, {stats.annotated} annotated images",
          flush=True)
    return EXIT_OK


def cmd_detect(args) -> int:
    from .bench.voc_map import ScoredBox, detections_record
    from .images import draw_detections, read_image, write_pnm

    backend = _load_backend(args, args.size)
    try:
        image = read_image(args.image)
    except (OSError, ValueError) as exc:
        raise RuntimeFailure(f"cannot read image: {exc}") from exc
    dets = backend.detect(image)
    h, w = image.shape[:2]
    scored = []
    for d in dets:
        x0, y0, x1, y1 = d.box.corners()
        x0, x1 = max(0.0, x0 * w), min(w - 1.0, x1 * w)
        y0, y1 = max(0.0, y0 * h), min(h - 1.0, y1 * h)
        print(f"{d.label}\t{d.prob:.4f}\t{x0:.1f} {y0:.1f} {x1:.1f} {y1:.1f}")
        scored.append(ScoredBox(d.class_id, d.prob, (x0, y0, x1, y1)))
    if args.output:
        write_pnm(args.output, draw_detections(image, dets))
    if args.dets_out:
        with open(args.dets_out, "a", encoding="utf-8") as fh:
            fh.write(detections_record(Path(args.image).stem, scored) + "\n")
    return EXIT_OK


def _workload(args) -> tuple[list[np.ndarray], list[str]]:
    from .images import list_images, read_image

    if not args.images:
        rng = np.random.default_rng(0)
        return [rng.integers(0, 256, (480, 640, 3), dtype=np.uint8) for _ in range(4)], []
    paths = list_images(args.images)
    images, ids = [], []
    for path in paths:
        try:
            images.append(read_image(path))
            ids.append(path.stem)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
    if not images:
        raise UsageError("no frames")
    return images, ids


def cmd_sweep(args) -> int:
    from dataclasses import replace

    from .bench import end_to_end, evaluate_map, load_truth_dir, mean_ap, sweep, to_csv, to_table
    from .bench.voc_map import ScoredBox

    backend = _load_backend(args, args.sizes[0] if args.sizes else 416)
    images, ids = _workload(args)
    if args.end_to_end:
        results = []
        for side in args.sizes:
            results.append(end_to_end(backend.with_input_size(side), images, args.frames,
                                      args.warmup))
    else:
        results = sweep(args.sizes, images, backend, args.frames, args.warmup)
    if args.truth:
        if not ids:
            raise UsageError("--truth needs --images")
        truth = load_truth_dir(args.truth)
        scored_results = []
        for r in results:
            if not r.ok:
                scored_results.append(r)
                continue
            sized = backend.with_input_size(r.input_side)
            dets = {}
            for image_id, image in zip(ids, images):
                h, w = image.shape[:2]
                dets[image_id] = [ScoredBox(d.class_id, d.prob, _pixel_corners(d.box, w, h))
                                  for d in sized.detect(image)]
            aps = evaluate_map(dets, truth, num_classes=backend.model.num_classes)
            scored_results.append(replace(r, map=mean_ap(aps)))
        results = scored_results
    print(to_table(results), end="")
    if args.csv:
        Path(args.csv).write_text(to_csv(results), encoding="utf-8")
    return EXIT_OK


def _pixel_corners(box, w: int, h: int):
    x0, y0, x1, y1 = box.corners()
    return (max(0.0, x0 * w), max(0.0, y0 * h), min(w - 1.0, x1 * w), min(h - 1.0, y1 * h))


def cmd_eval_map(args) -> int:
    from .bench import evaluate_map, load_detections, load_truth_dir, mean_ap
    from .bench.voc_map import VOC_CLASSES
    from .model import load_names

    try:
        names = load_names(args.names) if args.names else list(VOC_CLASSES)
        dets = load_detections(args.dets)
        truth = load_truth_dir(args.truth)
    except OSError as exc:
        raise RuntimeFailure(str(exc)) from exc
    results = evaluate_map(dets, truth, args.iou, len(names), args.workers)
    for r in results:
        print(f"{names[r.class_id]:>14}  {100 * r.ap:6.2f}")
    print(f"{'mAP':>14}  {100 * mean_ap(results):6.2f}")
    return EXIT_OK


def cmd_convert_voc(args) -> int:
    from .bench import convert_voc
    from .bench.voc_map import VOC_CLASSES
    from .model import load_names

    names = load_names(args.names) if args.names else VOC_CLASSES
    try:
        count = convert_voc(args.xml, args.out, names)
    except OSError as exc:
        raise RuntimeFailure(str(exc)) from exc
    print(f"converted {count} annotation files")
    return EXIT_OK


def cmd_demo(args) -> int:
    from .demo import DemoConfig, run_demo

    if args.duration <= 0:
        raise UsageError("--duration must be positive")
    backend = _detector_backend(args) if (args.stub or args.cfg) else None
    if backend is None:
        raise UsageError("demo needs --stub or --cfg with weights")
    w, h = args.camera_size
    config = DemoConfig(duration=args.duration, rate_hz=args.rate, width=w, height=h,
                        source=args.source, input_side=args.size, out_dir=args.out_dir)
    summary = run_demo(config, backend)
    print(summary.format(), end="")
    return EXIT_OK


COMMANDS = {
    "broker": cmd_broker, "camera": cmd_camera, "detector": cmd_detector, "sink": cmd_sink,
    "detect": cmd_detect, "sweep": cmd_sweep, "eval-map": cmd_eval_map,
    "convert-voc": cmd_convert_voc, "demo": cmd_demo,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    log.debug("effective configuration: %s", vars(args))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"yolo-offload: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as exc:
        print(f"yolo-offload: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"yolo-offload: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"yolo-offload: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
