"""Command-line entry point: ``mtlnet <command> [options]``.

Commands: generate, train, eval, infer, rectify, bench, gradcheck, study.
Every command writes a ``manifest.json`` into its output directory before
doing any work and finalises it afterwards. Exit status is 0 on success,
1 on a usage error and 2 when the command itself fails.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import bench as B
from . import data as D
from . import fisheye as F
from . import gradcheck as G
from . import model as M
from . import postproc as P
from . import train as TR
from .loss import LossWeights
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger("mtlnet")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad command-line input (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad input; usage errors here are 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# run manifest


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format: sha1(b"blob <len>\\0" + data)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """What ran, with which resolved configuration and inputs, and what it wrote.

    Written when the run starts (status "running") and rewritten when it ends.
    Its ``config`` section is complete, so ``--config manifest.json`` replays
    the run.
    """

    def __init__(self, command: str, argv: Sequence[str], config: dict, seed: Optional[int],
                 out_dir: Path, inputs: Sequence = ()):
        self.out_dir = Path(out_dir)
        self.doc = {
            "command": command,
            "argv": list(argv),
            "cwd": os.getcwd(),
            "config": config,
            "tool": "mtlnet",
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seed": seed,
            "inputs": {},
            "outputs": [],
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        for p in inputs:
            self.add_input(p)
        self.doc["input_hash"] = self.input_hash()

    def add_input(self, path) -> None:
        p = Path(path)
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                self.doc["inputs"][str(f)] = git_blob_hash(f.read_bytes())
        elif p.is_file():
            self.doc["inputs"][str(p)] = git_blob_hash(p.read_bytes())

    def input_hash(self) -> str:
        """Hash over the canonical config plus every input file's blob hash."""
        h = hashlib.sha1()
        h.update(json.dumps(self.doc["config"], sort_keys=True).encode())
        for name, digest in sorted(self.doc["inputs"].items()):
            h.update(f"\n{digest} {name}".encode())
        return h.hexdigest()

    def write(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / MANIFEST).write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str, error: Optional[str] = None) -> None:
        self.doc["finished"] = _now()
        self.doc["status"] = status
        if error:
            self.doc["error"] = error
        self.doc["outputs"] = sorted(
            str(p.relative_to(self.out_dir)) for p in self.out_dir.rglob("*") if p.is_file() and p.name != MANIFEST
        )
        self.write()


# --------------------------------------------------------------------------
# helpers


def load_config(path) -> dict:
    """Read a JSON config; a run manifest yields the config it recorded."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from e
    if isinstance(doc, dict) and "command" in doc and "config" in doc and "status" in doc:
        return doc["config"]
    return doc


def parse_size(text: str) -> tuple:
    """'1280x384' (W x H) -> (H, W)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 1280x384, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def resolve_threads(arg: Optional[int]) -> Optional[int]:
    if arg is not None:
        return arg
    env = os.environ.get("MTLNET_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MTLNET_THREADS must be an integer, got {env!r}") from None
    return None


def _inside(path: Path, root: Path) -> bool:
    try:
        path.resolve().relative_to(root.resolve())
        return True
    except ValueError:
        return False


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_model(checkpoint: str, spec_path: Optional[str], dtype: Optional[str]):
    spec = M.load_spec(spec_path or f"{checkpoint}.spec.json")
    params = M.load_checkpoint(checkpoint)
    M.check_inventory(params, spec)
    if dtype:
        params = params.astype(T.DTYPES[dtype])
    return spec, params


# --------------------------------------------------------------------------
# commands: each validates its arguments and returns (resolved config,
# input paths, seed, run) where run() does the work


def cmd_generate(args, out: Path):
    cfg = load_config(args.config)
    # either a bare scene config or the {"scene", "count", "start"} form a
    # manifest records
    count = args.count if args.count is not None else cfg.get("count")
    start = args.start if args.start is not None else cfg.get("start", 0)
    if "scene" in cfg:
        cfg = dict(cfg["scene"])
    if count is None:
        raise UsageError("generate needs --count")
    if count < 0 or start < 0:
        raise UsageError("--count and --start must be non-negative")
    if args.seed is not None:
        cfg["seed"] = args.seed
    scene = D.SceneConfig.from_json(cfg)
    resolved = {"scene": scene.to_json(), "count": int(count), "start": int(start)}

    def run():
        meta = D.write_dataset(scene, int(count), out, int(start))
        log.info("wrote %d samples to %s (sha256 %s)", count, out, meta["dataset_sha256"])

    return resolved, [args.config] if args.config else [], scene.seed, run


def cmd_train(args, out: Path):
    cfg = load_config(args.config)
    if not cfg:
        raise UsageError("train needs --config")
    exp = TR.ExperimentConfig.from_json(cfg)
    if args.seed is not None:
        exp.optimizer = dataclasses.replace(exp.optimizer, seed=args.seed)
    if args.dtype:
        exp.dtype = args.dtype
    if args.steps is not None:
        exp.optimizer = dataclasses.replace(exp.optimizer, steps=args.steps)
    inputs = [p for p in (exp.train_data, exp.eval_data) if isinstance(p, str)]

    def run():
        res = TR.train(exp, out, progress=True)
        if res.final_eval:
            log.info("final eval: miou=%s map=%s", res.final_eval.get("miou"), res.final_eval.get("map"))

    return exp.to_json(), inputs, exp.optimizer.seed, run


def cmd_eval(args, out: Path):
    cfg = {"checkpoint": args.checkpoint, "spec": args.spec, "data": args.data, "horizon_row": args.horizon_row,
           "dtype": args.dtype, "batch_size": args.batch_size}

    def run():
        spec, params = _load_model(args.checkpoint, args.spec, args.dtype)
        ds = D.Dataset.load(args.data)
        exp = TR.ExperimentConfig(name="custom", model=spec, weights=_weights_for(spec),
                                  horizon_row=args.horizon_row, dtype=args.dtype or "f32")
        res = TR.evaluate(params, exp, ds, args.batch_size)
        _write_json(out / "eval.json", res)
        log.info("miou=%s map=%s", res.get("miou"), res.get("map"))

    return cfg, [args.checkpoint, args.data] + ([args.spec] if args.spec else []), None, run


def _weights_for(spec: M.ModelSpec):
    return LossWeights(1.0 if "seg" in spec.heads else 0.0, 1.0 if "det" in spec.heads else 0.0)


def cmd_infer(args, out: Path):
    images = []
    for p in args.images:
        p = Path(p)
        images += sorted(p.glob("*.ppm")) if p.is_dir() else [p]
    cfg = {"checkpoint": args.checkpoint, "spec": args.spec, "images": [str(p) for p in images],
           "horizon_row": args.horizon_row, "score_thresh": args.score_thresh, "nms_iou": args.nms_iou,
           "dtype": args.dtype}

    def run():
        if not images:
            raise FileNotFoundError("no input images")
        spec, params = _load_model(args.checkpoint, args.spec, args.dtype)
        dt = np.float64 if (args.dtype or "f32") == "f64" else np.float32
        for path in images:
            infer_one(spec, params, path, out, args.horizon_row, args.score_thresh, args.nms_iou, dt)

    return cfg, [args.checkpoint] + [str(p) for p in images] + ([args.spec] if args.spec else []), None, run


def infer_one(spec, params, path: Path, out: Path, horizon_row, score_thresh, nms_iou, dt=np.float32):
    """Detections (JSONL), label mask (PGM) and overlay (PPM) for one image.

    Images whose size differs from the model input are resized for the
    network; outputs are mapped back to the original resolution.
    """
    raw = D.read_ppm(path)
    h0, w0 = raw.shape[:2]
    img = D.uint8_to_image(raw)
    hm, wm = spec.input_size
    x = img if (h0, w0) == (hm, wm) else D.resize_bilinear(img, (hm, wm))
    o = M.forward(params, spec, Tensor(x[None].astype(dt)))
    stem = path.stem
    dets = []
    if o.det is not None:
        dets = P.postprocess(o.det, spec.anchors, spec.input_size, len(spec.det_classes), nms_iou, score_thresh)[0]
        if (h0, w0) != (hm, wm):
            sx, sy = w0 / wm, h0 / hm
            dets = [P.Detection(d.class_idx, d.score, (d.box[0] * sx, d.box[1] * sy, d.box[2] * sx, d.box[3] * sy))
                    for d in dets]
    with open(out / f"{stem}.jsonl", "w") as fh:
        P.write_detections_jsonl(fh, stem, dets, spec.det_classes)
    mask = None
    if o.seg is not None:
        hr = None if horizon_row is None else int(round(horizon_row * hm / h0))
        labels = P.seg_argmax(o.seg, hr)[0].labels
        if (h0, w0) != (hm, wm):
            labels = D.resize_labels(labels, (h0, w0))
        mask = P.SegMask(labels, horizon_row)
        D.write_pgm(out / f"{stem}_mask.pgm", labels.astype(np.uint8))
    D.write_ppm(out / f"{stem}_overlay.ppm", P.render_overlay(raw, mask, dets))
    log.info("%s: %d detections", stem, len(dets))


def cmd_rectify(args, out: Path):
    dst = Path(args.output)
    if not dst.is_absolute() and args.out is not None:
        dst = out / dst
    if not _inside(dst, out):
        raise UsageError(f"output {dst} lies outside --out {out}")
    cfg = {"model": F.DistortionModel.load(args.model).to_json(), "input": args.input, "output": str(dst)}

    def run():
        model = F.DistortionModel.load(args.model)
        img = D.read_ppm(args.input)
        rect, valid = F.rectify(model, img.astype(np.float64))
        dst.parent.mkdir(parents=True, exist_ok=True)
        D.write_ppm(dst, np.clip(np.round(rect), 0, 255).astype(np.uint8))
        if args.mask:
            D.write_pgm(dst.with_name(dst.stem + "_valid.pgm"), valid.astype(np.uint8) * 255)
        log.info("rectified %s -> %s (%.1f%% valid)", args.input, dst, 100 * valid.mean())

    return cfg, [args.model, args.input], None, run


def cmd_bench(args, out: Path):
    spec = M.ModelSpec.from_json(load_config(args.spec)) if args.spec else M.ModelSpec()
    if args.size:
        spec = spec.with_(input_size=args.size)
    threads = args.threads_resolved if args.threads_resolved is not None else 1
    seed = args.seed if args.seed is not None else 0
    cfg = {"spec": spec.to_json(), "runs": args.runs, "warmup": args.warmup, "threads": threads,
           "horizon_row": args.horizon_row, "seed": seed, "dtype": args.dtype or "f32"}

    def run():
        params = M.build(spec, seed, args.dtype or "f32")
        rep = B.measure_fps(spec, args.runs, args.warmup, seed, args.horizon_row, threads, params)
        B.write_cost(rep, out / "cost.json")
        print(rep.table())

    return cfg, [args.spec] if args.spec else [], seed, run


def cmd_gradcheck(args, out: Path):
    cfg = {"seeds": args.seeds, "micro_seeds": args.micro_seeds, "step": G.STEP, "tolerance": G.TOLERANCE}
    status = {}

    def run():
        results = G.run_suite(args.seeds, args.micro_seeds, log=print)
        failed = [r for r in results if not r.ok]
        _write_json(out / "gradcheck.json", {
            "tolerance": G.TOLERANCE, "passed": not failed,
            "results": [{"name": r.name, "seed": r.seed, "rel_error": r.error, "ok": r.ok} for r in results]})
        if failed:
            status["failed"] = len(failed)
            raise RuntimeError(f"{len(failed)} gradient checks failed")

    return cfg, [], None, run


def cmd_study(args, out: Path):
    cfg = load_config(args.config)
    if not cfg:
        raise UsageError("study needs --config")
    study = TR.StudyConfig.from_json(cfg)
    if args.seed is not None:
        study.seeds = tuple(args.seed + i for i in range(len(study.seeds)))
    if args.steps is not None:
        study.optimizer = dataclasses.replace(study.optimizer, steps=args.steps)
    if args.dtype:
        study.dtype = args.dtype
    inputs = [p for p in (study.train_data, study.eval_data) if isinstance(p, str)]

    def run():
        rep = TR.run_study(study, out, progress=True)
        print(TR.Mx.table_csv(rep["table"]), end="")
        for label, s in rep["summary"].items():
            log.info("%s: %s", label, s)
        if rep["failures"]:
            raise RuntimeError(f"{len(rep['failures'])} study runs failed")

    return study.to_json(), inputs, None, run


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "rectify": cmd_rectify, "bench": cmd_bench, "gradcheck": cmd_gradcheck, "study": cmd_study,
}


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="JSON config for the command (a manifest.json replays its run)")
    g.add_argument("--out", help="output directory; nothing is written outside it")
    g.add_argument("--seed", type=int, help="override the seed in the config")
    g.add_argument("--threads", type=int,
                   help="BLAS thread limit (default: $MTLNET_THREADS, else unrestricted; bench defaults to 1)")
    g.add_argument("--dtype", choices=("f32", "f64"), help="float precision of parameters and activations")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = _Parser(prog="mtlnet", description="Multi-task segmentation and detection network toolkit.")
    p.add_argument("--version", action="version", version=f"mtlnet {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("generate", parents=[common], help="write a synthetic driving-scene dataset")
    s.add_argument("--count", type=int, help="number of samples")
    s.add_argument("--start", type=int, help="index of the first sample (default 0)")

    s = sub.add_parser("train", parents=[common], help="train one experiment from an experiment config")
    s.add_argument("--steps", type=int, help="override optimizer.steps")

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset directory")
    s.add_argument("--checkpoint", required=True, help=".mtlw checkpoint")
    s.add_argument("--spec", help="model spec JSON (default: <checkpoint>.spec.json)")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--horizon-row", type=int, help="ignore segmentation rows above this one")
    s.add_argument("--batch-size", type=int, default=16)

    s = sub.add_parser("infer", parents=[common], help="detections, mask and overlay for PPM images")
    s.add_argument("images", nargs="+", help="PPM files or directories of them")
    s.add_argument("--checkpoint", required=True, help=".mtlw checkpoint")
    s.add_argument("--spec", help="model spec JSON (default: <checkpoint>.spec.json)")
    s.add_argument("--horizon-row", type=int, help="leave rows above this one unevaluated (255 in the mask)")
    s.add_argument("--score-thresh", type=float, default=0.05)
    s.add_argument("--nms-iou", type=float, default=0.45)

    s = sub.add_parser("rectify", parents=[common], help="undo radial lens distortion of a PPM image")
    s.add_argument("--model", required=True, help="distortion model JSON")
    s.add_argument("input", help="distorted PPM")
    s.add_argument("output", help="rectified PPM (relative paths resolve inside --out when given)")
    s.add_argument("--mask", action="store_true", help="also write <output>_valid.pgm")

    s = sub.add_parser("bench", parents=[common], help="analytic MACs and measured fps; writes cost.json")
    s.add_argument("--spec", help="model spec JSON (default: built-in spec)")
    s.add_argument("--size", type=parse_size, help="input WxH, e.g. 1280x384")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--warmup", type=int, default=2)
    s.add_argument("--horizon-row", type=int)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite; exit 0 iff all pass")
    s.add_argument("--seeds", type=int, default=20, help="random cases per op")
    s.add_argument("--micro-seeds", type=int, default=1, help="micro-network cases")

    s = sub.add_parser("study", parents=[common], help="train all five columns over seeds and write the table")
    s.add_argument("--steps", type=int, help="override optimizer.steps")
    return p


# commands whose inputs live in flags rather than a config file; their
# manifests replay by re-running the recorded arguments
FLAG_COMMANDS = ("eval", "infer", "rectify", "bench", "gradcheck")


def _option(argv: Sequence[str], name: str) -> Optional[str]:
    for i, a in enumerate(argv):
        if a == name and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith(name + "="):
            return a.split("=", 1)[1]
    return None


def expand_manifest(argv: Sequence[str]) -> list:
    """``<cmd> --config manifest.json [--out dir]`` for a flag-driven command
    becomes the argument list the manifest recorded (with the new --out)."""
    argv = list(argv)
    path = _option(argv, "--config")
    if not argv or argv[0] not in FLAG_COMMANDS or path is None:
        return argv
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError):
        return argv
    if not (isinstance(doc, dict) and doc.get("command") == argv[0] and "argv" in doc and "status" in doc):
        return argv
    replay = list(doc["argv"])
    out = _option(argv, "--out")
    if out is not None:
        replay += ["--out", out]
    return replay


def _default_out(args) -> Path:
    if args.command == "rectify":
        return Path(args.output).parent
    return Path(f"mtlnet-{args.command}")


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = expand_manifest(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out) if args.out else _default_out(args)
    try:
        args.threads_resolved = resolve_threads(args.threads)
        if args.threads_resolved is not None and args.threads_resolved < 1:
            raise UsageError("--threads must be >= 1")
        resolved, inputs, seed, run = COMMANDS[args.command](args, out)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mtlnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, TypeError) as e:
        print(f"mtlnet {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILURE

    manifest = RunManifest(args.command, argv, resolved, seed, out, inputs)
    manifest.write()
    limit = contextlib.nullcontext()
    if args.threads_resolved is not None and args.command != "bench":
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=args.threads_resolved)
    try:
        with limit:
            run()
    except UsageError as e:
        manifest.finish("failed", str(e))
        print(f"mtlnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - reported, recorded, exit 2
        log.debug("failure", exc_info=True)
        manifest.finish("failed", f"{type(e).__name__}: {e}")
        print(f"mtlnet {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    manifest.finish("ok")
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
