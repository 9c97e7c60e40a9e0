"""Run every scaling sweep at a preset and write CSV, SVG and report.json.

    python3 scripts/run_scaling.py --preset desk --out runs/scaling
"""

import argparse
from pathlib import Path

from talkfield.bench import PRESETS, BenchContext, measure_scaling, report, standard_fits
from talkfield.formats import load_checkpoint
from talkfield.trainer import TrainConfig, init_checkpoint

SWEEPS = {
    "frames": [8, 16, 32, 64, 128],
    "resolution": [32, 48, 64, 96, 128],
    "points": [8, 16, 32, 48, 64],
    "audio": [5, 10, 15, 20, 25],
    "landmarks": [25, 50, 100, 200],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    ap.add_argument("--checkpoint", help="timings do not depend on trained weights; default is untrained")
    ap.add_argument("--knobs", default=",".join(SWEEPS), help="comma-separated subset of " + ",".join(SWEEPS))
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default="runs/scaling")
    args = ap.parse_args()

    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else init_checkpoint(TrainConfig())
    ctx = BenchContext(ckpt, PRESETS[args.preset])
    records = []
    for knob in args.knobs.split(","):
        recs = measure_scaling(knob, SWEEPS[knob], ctx, repeats=args.repeats)
        for r in recs:
            print(f"{knob}={r.value:g} {r.component}: {r.wall_ms:.2f} ms" + (" FLAGGED " + r.reason if r.flagged else ""))
        records += recs
    fits = standard_fits(records)
    for (knob, comp), fit in fits.items():
        print(f"fit {knob}/{comp}: {fit.model} {fit.coefficients} R^2={fit.r2:.4f}")
    for p in report(records, fits, Path(args.out)):
        print("wrote", p)


if __name__ == "__main__":
    main()
