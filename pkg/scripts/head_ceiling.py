"""Best loss and ODS reachable by any stride-4 logit map on the overfit set.

Every edge map the model emits is sigmoid(bilinear upsample of a stride-4
logit map). Balanced BCE is convex in the logits and the upsample is linear,
so fitting a free logit grid per image with L-BFGS gives the global minimum
over everything the head can express. Its ODS bounds the overfit run too.

    python scripts/head_ceiling.py [--n 8] [--size 64] [--seed 7]
"""

import argparse

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from edgenat.config import EvalConfig
from edgenat.data import synth_dataset
from edgenat.eval import ods_ois
from edgenat.loss import binarize
from edgenat.tensor import Tensor, bilinear_resize, precision


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    with precision(np.float64):
        eye = Tensor(np.eye(n_in)[None], dtype=np.float64)
        return bilinear_resize(eye, n_out, n_in).data[0]  # [n_out, n_in]


def fit(labels: np.ndarray, up: np.ndarray) -> tuple:
    n_coarse = up.shape[1]
    a = 1.0 - labels.mean()
    w_pos, w_neg = labels * a, (1.0 - labels) * (1.0 - a)

    def loss(z):
        logits = up @ z.reshape(n_coarse, n_coarse) @ up.T
        f = -(w_pos * log_expit(logits) + w_neg * log_expit(-logits)).sum()
        g_logits = w_pos * (expit(logits) - 1.0) + w_neg * expit(logits)
        return f, (up.T @ g_logits @ up).ravel()

    res = minimize(loss, np.zeros(n_coarse * n_coarse), jac=True, method="L-BFGS-B",
                   options={"maxiter": 5000, "gtol": 1e-9})
    return res.fun, expit(up @ res.x.reshape(n_coarse, n_coarse) @ up.T)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--side-weight", type=float, default=0.4)
    args = ap.parse_args()

    samples = synth_dataset(args.n, args.size, args.seed)
    up = resize_matrix(args.size // 4, args.size)
    floors, inits, preds, gts = [], [], [], []
    for s in samples:
        gt = binarize(s.gt_prob)
        y = gt.labels[0].astype(np.float64)
        f, e = fit(y, up)
        floors.append(f)
        inits.append(np.log(2.0) * 2.0 * y.sum() * (y.size - y.sum()) / y.size)
        preds.append(e)
        gts.append(gt)
        print(f"{s.id}: loss floor {f:.3f}, loss at 0.5 {inits[-1]:.3f}")
    scale = 1.0 + 4 * args.side_weight
    ratio = sum(floors) / sum(inits)
    print(f"total-loss floor {scale * np.mean(floors):.3f} vs {scale * np.mean(inits):.3f} at 0.5: ratio {ratio:.4f}")
    for tol in (0.0075, 0.011, 0.016, 0.02):
        r = ods_ois(preds, gts, EvalConfig(max_dist=tol))
        radius = tol * np.hypot(args.size, args.size)
        print(f"tolerance {tol} ({radius:.2f} px): ods {r.ods:.4f} ois {r.ois:.4f}")


if __name__ == "__main__":
    main()
