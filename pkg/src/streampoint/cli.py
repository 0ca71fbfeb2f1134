"""Command line entry point: ``streampoint <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from streampoint import __version__, geometry, synthdata
from streampoint.errors import (
    DegenerateError,
    EmptyEvaluationError,
    EmptyExportError,
    FormatError,
    InvalidInputError,
    NumericFault,
    ShapeError,
    StreampointError,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_seed_range(text: str) -> list[int]:
    """``A..B`` is the half-open range [A, B); a single integer or comma list also works."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            return list(range(int(a), int(b)))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad seed range {text!r}") from exc


def _floats(text: str, n: int, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"{what}: expected {n} numbers, got {text!r}") from exc
    if len(vals) != n:
        raise UsageError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


@contextlib.contextmanager
def _thread_limit():
    n = int(os.environ.get("STREAMPOINT_THREADS", "0") or 0)
    if n <= 0:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def write_run_manifest(out_dir, command: str, argv: list[str], config: dict, seed, inputs, outputs,
                       started: float) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_time_s": round(time.time() - started, 3),
    }
    path = out_dir / "run_manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


# -- commands ----------------------------------------------------------------------------

def cmd_gen(args, argv, started) -> int:
    seeds = parse_seed_range(args.seeds)
    if not seeds:
        raise UsageError("empty seed range")
    modes = tuple(m.strip() for m in args.modes.split(","))
    written = synthdata.generate_dataset(seeds, args.out, n_views=args.views,
                                         sequences_per_scene=args.sequences_per_scene, modes=modes,
                                         camera_only_prob=args.camera_only_prob,
                                         height=args.size, width=args.size)
    config = {"views": args.views, "sequences_per_scene": args.sequences_per_scene, "modes": list(modes),
              "camera_only_prob": args.camera_only_prob, "size": args.size}
    write_run_manifest(args.out, "gen", argv, config, seeds, [], written, started)
    print(f"wrote {len(written)} sequences to {args.out}")
    return EXIT_OK


def cmd_train(args, argv, started) -> int:
    from streampoint import config, trainer

    overrides = list(args.set or [])
    if args.preset:
        overrides.insert(0, f"preset={args.preset}")
    cfg = config.load_train_config(args.config, overrides)
    result = trainer.train(cfg, args.data, args.out, resume_from=args.resume, stop_after=args.stop_after)
    write_run_manifest(args.out, "train", argv, cfg.to_dict(), cfg.seed, [args.data],
                       [result.checkpoint, result.log_path], started)
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _save_predictions(out_dir: Path, preds, sample) -> list[Path]:
    from streampoint.substrate import ptm

    written = []
    for i, p in enumerate(preds):
        sub = out_dir / f"frame_{i:03d}"
        sub.mkdir(parents=True, exist_ok=True)
        tensors = {"x_self": p.x_self, "c_self": p.c_self, "x_world": p.x_world, "c_world": p.c_world}
        if p.color is not None:
            tensors["color"] = p.color
        for name, t in tensors.items():
            written.append(ptm.save(sub / f"{name}.ptm", t.data.astype(np.float32)))
    return written


def _cloud_colors(preds, sample) -> list[np.ndarray]:
    return [p.color.data if p.color is not None else f.image for p, f in zip(preds, sample.frames)]


def cmd_infer(args, argv, started, mode: str | None = None) -> int:
    from streampoint import evaluation, ply
    from streampoint.model import load_checkpoint

    mode = mode or args.mode
    model, manifest, _ = load_checkpoint(args.checkpoint)
    sample = synthdata.read_sequence(args.sequence)
    preds = evaluation.predict(model, sample, mode)
    out = Path(args.out)
    written = _save_predictions(out, preds, sample)
    poses = [{"frame": i, "pose": p.pose.as_list()} for i, p in enumerate(preds)]
    (out / "poses.json").write_text(json.dumps(poses, indent=1) + "\n")
    cloud = ply.export_ply(out / "cloud.ply", [p.x_world.data for p in preds], _cloud_colors(preds, sample),
                           [p.c_world.data for p in preds], threshold=args.min_conf)
    written += [out / "poses.json", cloud]
    write_run_manifest(out, "revisit" if mode == "revisit" else "infer", argv,
                       {"mode": mode, "min_conf": args.min_conf, "model": manifest["config"]}, None,
                       [args.checkpoint, args.sequence], written, started)
    print(f"{len(preds)} prediction sets written to {out}")
    return EXIT_OK


def _query_camera(args) -> tuple[geometry.CameraIntrinsics, geometry.Pose]:
    if args.camera_json:
        try:
            spec = json.loads(Path(args.camera_json).read_text())
            K_vals, pose_vals = spec["K"], spec["pose"]
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"{args.camera_json}: camera spec needs 'K' and 'pose' ({exc})") from exc
    else:
        if not (args.intrinsics and args.pose):
            raise UsageError("query needs --intrinsics and --pose, or --camera-json")
        K_vals = _floats(args.intrinsics, 4, "--intrinsics")
        pose_vals = _floats(args.pose, 7, "--pose")
    return K_vals, geometry.Pose.from_list(pose_vals)


def cmd_query(args, argv, started) -> int:
    from streampoint import ply
    from streampoint.model import load_checkpoint
    from streampoint.substrate import ptm
    from streampoint.substrate.tensor import no_grad

    model, manifest, _ = load_checkpoint(args.checkpoint)
    sample = synthdata.read_sequence(args.sequence)
    K_vals, pose = _query_camera(args)
    K = geometry.CameraIntrinsics(*K_vals, width=model.cfg.width, height=model.cfg.height)
    with no_grad():
        _, state = model.run_sequence(synthdata.model_inputs(sample))
        pred, _ = model.step(state, geometry.camera_to_raymap(K, pose))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [ptm.save(out / f"{name}.ptm", t.data.astype(np.float32))
               for name, t in [("x_self", pred.x_self), ("c_self", pred.c_self), ("x_world", pred.x_world),
                               ("c_world", pred.c_world), ("color", pred.color)]]
    written.append(ply.export_ply(out / "query.ply", pred.x_world.data, pred.color.data, pred.c_world.data,
                                  threshold=args.min_conf))
    write_run_manifest(out, "query", argv, {"K": K.as_list(), "pose": pose.as_list(), "model": manifest["config"]},
                       None, [args.checkpoint, args.sequence], written, started)
    print(f"query outputs written to {out}")
    return EXIT_OK


def cmd_eval(args, argv, started) -> int:
    from streampoint import evaluation

    if not args.bypass_gt and not args.checkpoint:
        raise UsageError("eval needs --checkpoint unless --bypass-gt is given")
    report = evaluation.evaluate_run(args.checkpoint, args.data, args.protocol, args.alignment, args.mode,
                                     bypass=args.bypass_gt, conf_quantile=args.conf_quantile, out_path=args.out)
    write_run_manifest(Path(args.out).parent, "eval", argv,
                       {"protocol": args.protocol, "alignment": args.alignment, "mode": args.mode,
                        "bypass_gt": args.bypass_gt, "conf_quantile": args.conf_quantile}, None,
                       [p for p in (args.checkpoint, args.data) if p], [args.out], started)
    for metric, stats in report["aggregate"].items():
        print(f"{metric}: mean {stats['mean']:.6g} median {stats['median']:.6g}")
    failed = [r for r in report["per_sequence"] if "error" in r]
    for r in failed:
        print(f"{r['id']}: {r['error']}", file=sys.stderr)
    return EXIT_OK


def cmd_selftest(args, argv, started) -> int:
    from streampoint import selftest

    results = selftest.run(quick=args.quick)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERIC


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="streampoint", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic scenes and sequences")
    g.add_argument("--seeds", required=True, help="scene seeds, e.g. 0..10 (end exclusive) or 1,4,9")
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, default=4)
    g.add_argument("--sequences-per-scene", type=int, default=1)
    g.add_argument("--modes", default="video,collection")
    g.add_argument("--camera-only-prob", type=float, default=0.1)
    g.add_argument("--size", type=int, default=32)

    t = sub.add_parser("train", help="train a model on generated data")
    t.add_argument("--config", help="key=value training config file")
    t.add_argument("--preset", help="named desk-scale preset (overfit, generalize)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--stop-after", type=int, help="stop (and checkpoint) at this global step")

    for name, help_text in [("infer", "stream a sequence and export predictions"),
                            ("revisit", "re-process a sequence against its frozen final state")]:
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--sequence", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--min-conf", type=float, default=1.0, help="keep points with confidence above this")
        if name == "infer":
            c.add_argument("--mode", choices=["online", "revisit"], default="online")

    q = sub.add_parser("query", help="read out a novel view from the state with a raymap")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--sequence", required=True)
    q.add_argument("--intrinsics", help="fx,fy,cx,cy")
    q.add_argument("--pose", help="qw,qx,qy,qz,tx,ty,tz in the first camera's frame")
    q.add_argument("--camera-json", help='file with {"K": [fx,fy,cx,cy], "pose": [7 numbers]}')
    q.add_argument("--out", required=True)
    q.add_argument("--min-conf", type=float, default=1.0)

    e = sub.add_parser("eval", help="depth, pose or reconstruction metrics")
    e.add_argument("--protocol", choices=["depth", "pose", "recon"], required=True)
    e.add_argument("--alignment", default="none",
                   choices=["none", "per_frame_median", "per_seq_scale", "per_seq_scale_shift"])
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--mode", choices=["online", "revisit"], default="online")
    e.add_argument("--bypass-gt", action="store_true", help="score ground truth against itself")
    e.add_argument("--conf-quantile", type=float, default=0.5)

    s = sub.add_parser("selftest", help="run the invariant suites")
    s.add_argument("--quick", action="store_true", help="smaller iteration counts")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "query": cmd_query,
            "eval": cmd_eval, "selftest": cmd_selftest,
            "revisit": lambda a, v, s: cmd_infer(a, v, s, mode="revisit")}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return COMMANDS[args.command](args, argv, started)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidInputError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, DegenerateError, EmptyEvaluationError, EmptyExportError,
            StreampointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
