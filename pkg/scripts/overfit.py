"""Overfit the tiny model on the synthetic set and report loss and ODS/OIS.

    python scripts/overfit.py [--steps 2000] [--lr 1e-3] [--out runs/overfit]

Writes the checkpoint, history.csv and per-image predictions (PGM) to --out.
"""

import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

from edgenat.config import EvalConfig, TrainConfig, tiny_config
from edgenat.data import synth_dataset, write_pgm
from edgenat.eval import ods_ois
from edgenat.loss import binarize
from edgenat.model import EdgeNAT
from edgenat.train import dataset_loss, train


def main():
    defaults = TrainConfig()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=defaults.total_steps)
    ap.add_argument("--lr", type=float, default=defaults.peak_lr)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    warm = round(args.steps * defaults.warmup_steps / defaults.total_steps)
    cfg = replace(defaults, total_steps=args.steps, warmup_steps=warm, peak_lr=args.lr, checkpoint_interval=0)
    samples = synth_dataset(args.n, args.size, args.seed)
    model = EdgeNAT.init(tiny_config(), seed=cfg.seed)
    out = Path(args.out)
    t0 = time.perf_counter()
    initial = dataset_loss(model, samples, cfg)
    result = train(model, samples, cfg, out)
    final = dataset_loss(model, samples, cfg)
    minutes = (time.perf_counter() - t0) / 60

    with open(out / "history.csv", "w") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in result.history:
            fh.write(f"{step},{lr:.8e},{loss:.6f}\n")
    preds = [model.predict(s.image) for s in samples]
    for s, p in zip(samples, preds):
        write_pgm(out / "pred" / f"{s.id}.pgm", p)
    gts = [binarize(s.gt_prob, cfg.eta) for s in samples]
    print(f"loss {initial:.2f} -> {final:.2f} ({final / initial:.3f}x) in {minutes:.1f} min")
    for tol in (0.0075, 0.011, 0.016, 0.02):
        r = ods_ois(preds, gts, EvalConfig(max_dist=tol))
        print(f"tolerance {tol}: ods {r.ods:.4f} ois {r.ois:.4f}")


if __name__ == "__main__":
    main()
