"""``talkfield`` command line: train, render, bench and selftest.

A ``--config`` JSON file may set any flag by its long name (dashes or
underscores); flags given on the command line override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    KeypointsRequiredError,
    MissingFileError,
    TalkfieldError,
)

EXIT_CODES = (
    (0, "success"),
    (1, "other talkfield error, or a failed selftest"),
    (2, "usage: unknown subcommand or flag, bad flag value"),
    (3, "missing input file"),
    (4, "version mismatch in a checkpoint or feature file"),
    (5, "malformed file: bad magic, truncated payload, checksum failure"),
    (6, "dimension mismatch between a file and the requested config"),
    (7, "keypoints required or degenerate landmarks"),
    (8, "training diverged"),
)

EPILOG = "exit codes:\n" + "\n".join(f"  {c}  {text}" for c, text in EXIT_CODES) + (
    "\n\nErrors print one line to stderr: 'talkfield: error[<category>]: <message>'."
)

# defaults for flags a config file may also set; None means "not given"
DEFAULTS = {
    "seed": 0,
    "preset": "desk",
    "width": None,
    "height": None,
    "points": None,
    "fps": 25.0,
    "frames": None,
    "workers": 1,
    "dtype": "float32",
    "iterations": 20000,
    "repeats": 5,
    "out": "out",
}


class UsageError(TalkfieldError):
    exit_code = 2
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="talkfield", description=__doc__, epilog=EPILOG, formatter_class=fmt)
    sub = p.add_subparsers(dest="mode", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file of flag values; flags override it")
        sp.add_argument("--seed", type=int, default=None, help="single source of randomness")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--width", type=int, default=None)
        sp.add_argument("--height", type=int, default=None)
        sp.add_argument("--points", type=int, default=None, help="samples per ray P")
        sp.add_argument("--fps", type=float, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    def inference(sp):
        sp.add_argument("--preset", choices=("desk", "fast", "paper"), default=None,
                        help="size and sampling preset: desk 128x128 P=32, fast 64x64 P=16, "
                             "paper 512x512 P=64 (slow)")
        sp.add_argument("--checkpoint", help="trained checkpoint (.lnck)")
        sp.add_argument("--workers", type=int, default=None, help="renderer threads")
        sp.add_argument("--dtype", choices=("float32", "float64"), default=None,
                        help="inference precision")

    t = sub.add_parser("train", help="fit a model to the toy scene", epilog=EPILOG, formatter_class=fmt)
    common(t)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--checkpoint", help="where to write the checkpoint (default OUT/model.lnck)")

    r = sub.add_parser("render", help="audio + reference image to numbered PPM frames",
                       epilog=EPILOG, formatter_class=fmt)
    common(r)
    inference(r)
    r.add_argument("--audio", help="16-bit PCM WAV")
    r.add_argument("--features", help="precomputed LNAF feature file")
    r.add_argument("--ref", help="reference image I_r (PPM P6); default is the toy reference")
    r.add_argument("--keypoints", help="keypoint file for --ref")
    r.add_argument("--blink", help="per-frame blink values, one per line")
    r.add_argument("--frames", type=int, default=None, help="frame count (default ceil(T*fps))")

    b = sub.add_parser("bench", help="scaling sweep over one knob", epilog=EPILOG, formatter_class=fmt)
    common(b)
    inference(b)
    b.add_argument("--knob", required=True, choices=("frames", "resolution", "points", "audio", "landmarks"))
    b.add_argument("--values", required=True, help="comma-separated knob values")
    b.add_argument("--repeats", type=int, default=None)

    s = sub.add_parser("selftest", help="run the built-in example suite", epilog=EPILOG, formatter_class=fmt)
    s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        p = Path(path)
        if not p.is_file():
            raise MissingFileError(f"no such file: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{p}: config must be a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in data.items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"no such file: {p}")
    return p


def _out_dir(opts) -> Path:
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TalkfieldError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _preset_size(opts):
    from .bench import PRESETS

    pre = PRESETS[opts["preset"]]
    return (opts["height"] or pre.height, opts["width"] or pre.width, opts["points"] or pre.P)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(opts) -> int:
    from .formats import save_checkpoint
    from .trainer import TrainConfig, train

    fields = TrainConfig.__dataclass_fields__
    cfg_kw = {k: v for k, v in opts.items() if k in fields}
    cfg_kw.update(iterations=opts["iterations"], seed=opts["seed"], fps=opts["fps"])
    if opts["width"]:
        cfg_kw["width"] = opts["width"]
    if opts["height"]:
        cfg_kw["height"] = opts["height"]
    if opts["points"]:
        cfg_kw["P"] = opts["points"]
    for k, v in cfg_kw.items():
        if isinstance(v, list):
            cfg_kw[k] = tuple(v)
    try:
        config = TrainConfig(**cfg_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(opts)
    result = train(config)
    ckpt_path = Path(opts.get("checkpoint") or out / "model.lnck")
    save_checkpoint(ckpt_path, result.checkpoint)
    result.write_log(out / "train_log.csv")
    last = result.log[-1] if result.log else (0, float("nan"), float("nan"))
    print(f"wrote {ckpt_path} after {config.iterations} iterations (last logged loss {last[1]:.6g})")
    return 0


def _load_audio(opts, d_a: int):
    from .conditioning import read_feature_file
    from .formats import read_wav

    if opts.get("features"):
        seq = read_feature_file(_require_file(opts["features"]), expect_d_a=d_a)
        return seq, seq.fps
    if opts.get("audio"):
        return read_wav(_require_file(opts["audio"])), opts["fps"]
    raise UsageError("render needs --audio or --features")


def _reference(opts, height, width, L, seed):
    from .bench import toy_reference
    from .formats import read_image, read_keypoints
    from .toyscene import ToyScene

    if not opts.get("ref"):
        ref = toy_reference(ToyScene(), height, width, L, seed=seed)
        if opts.get("keypoints"):
            ref.keypoints = read_keypoints(_require_file(opts["keypoints"]))
        return ref
    ref = read_image(_require_file(opts["ref"]))
    if not opts.get("keypoints"):
        raise KeypointsRequiredError(f"keypoints required: {opts['ref']} needs a --keypoints file")
    ref.keypoints = read_keypoints(_require_file(opts["keypoints"]))
    return ref


def cmd_render(opts) -> int:
    from .bench import run_pipeline
    from .formats import load_checkpoint, read_blink, write_image, write_render_stats
    from .trainer import init_checkpoint, TrainConfig

    if opts.get("checkpoint"):
        ckpt = load_checkpoint(_require_file(opts["checkpoint"]))
    else:
        logging.getLogger(__name__).warning("no --checkpoint; rendering an untrained model")
        ckpt = init_checkpoint(TrainConfig(seed=opts["seed"]))
    height, width, P = _preset_size(opts)
    audio, fps = _load_audio(opts, ckpt.model.d_a)
    ref = _reference(opts, height, width, ckpt.n_keypoints, opts["seed"])
    if (ref.height, ref.width) != (height, width):
        if opts.get("ref") and not (opts["width"] or opts["height"]):
            height, width = ref.height, ref.width
        else:
            raise DimensionMismatchError("image size", f"{ref.height}x{ref.width}", f"{height}x{width}")
    blink = read_blink(_require_file(opts["blink"])) if opts.get("blink") else None
    if blink is not None and (blink.min() < 0 or blink.max() > 1):
        raise UsageError("blink values must lie in [0, 1]")
    result = run_pipeline(ckpt, audio, ref, opts["frames"], blink=blink, P=P, fps=fps,
                          seed=opts["seed"], workers=opts["workers"],
                          dtype=np.dtype(opts["dtype"]).type)
    out = _out_dir(opts)
    for frame in result.frames:
        write_image(out / f"frame_{frame.index:05d}.ppm", frame)
    write_render_stats(out / "render_stats.csv", result.frames)
    print(f"wrote {len(result.frames)} frames to {out} "
          f"(audio {result.audio_ms:.1f} ms, median frame {np.median(result.per_frame_ms):.1f} ms)")
    return 0


def _parse_values(text: str, knob: str):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated numbers: {text!r}") from exc
    if knob != "audio":
        vals = [int(v) for v in vals]
    return vals


def cmd_bench(opts) -> int:
    from dataclasses import replace

    from .bench import PRESETS, BenchContext, measure_scaling, report, standard_fits
    from .formats import load_checkpoint
    from .trainer import TrainConfig, init_checkpoint

    preset = PRESETS[opts["preset"]]
    height, width, P = _preset_size(opts)
    preset = replace(preset, height=height, width=width, P=P, fps=opts["fps"],
                     dtype=opts["dtype"], workers=opts["workers"])
    if opts.get("checkpoint"):
        ckpt = load_checkpoint(_require_file(opts["checkpoint"]))
    else:
        # timing does not depend on trained weights
        ckpt = init_checkpoint(TrainConfig(seed=opts["seed"]))
    values = _parse_values(str(opts["values"]), opts["knob"])
    ctx = BenchContext(ckpt, preset, seed=opts["seed"], rng_seed=opts["seed"])
    try:
        records = measure_scaling(opts["knob"], values, ctx, repeats=opts["repeats"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(opts)
    paths = report(records, standard_fits(records), out)
    for rec in records:
        flag = " FLAGGED " + rec.reason if rec.flagged else ""
        print(f"{rec.knob}={rec.value:g} {rec.component}: {rec.wall_ms:.3f} ms{flag}")
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def cmd_selftest(opts) -> int:
    from .selftest import print_table, run_selftest

    results = run_selftest()
    print_table(results)
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"train": cmd_train, "render": cmd_render, "bench": cmd_bench, "selftest": cmd_selftest}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        opts = resolve(args)
        return COMMANDS[args.mode](opts)
    except TalkfieldError as exc:
        print(f"talkfield: error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
