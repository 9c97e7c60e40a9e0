"""Train the head model on the toy scene and report held-out PSNR and LMD.

    python3 scripts/train_toy.py --iterations 20000 --out runs/toy
"""

import argparse
import logging
import time
from pathlib import Path

from talkfield.formats import save_checkpoint
from talkfield.trainer import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iterations", type=int, default=TrainConfig.iterations)
    ap.add_argument("--seed", type=int, default=TrainConfig.seed)
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--eval-views", type=int, default=4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    config = TrainConfig(iterations=args.iterations, seed=args.seed, log_every=500)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = train(config)
    secs = time.perf_counter() - t0
    save_checkpoint(out / "model.lnck", result.checkpoint)
    result.write_log(out / "train_log.csv")
    ev = evaluate(result.checkpoint, config, n=args.eval_views)
    print(f"trained {config.iterations} iterations in {secs / 60:.1f} min")
    print(f"held-out PSNR {ev.mean_psnr:.2f} dB  per view {[round(p, 2) for p in ev.psnr]}")
    print(f"held-out LMD  {ev.mean_lmd:.3f} px  per view {[round(x, 3) for x in ev.lmd]}")


if __name__ == "__main__":
    main()
