"""Greedy versus maximum matching on random 8x8 instances.

Prints the aggregate true-positive ratio over 20 instances for a grid of
edge densities and tolerance radii, for salt-and-pepper maps and for
jittered line drawings.

    python scripts/matcher_gap.py
"""

import numpy as np

from edgenat.eval import match_boundaries


def salt(seed, density):
    rng = np.random.default_rng([seed, 6])
    return rng.random((8, 8)) < density, rng.random((8, 8)) < density


def lines(seed, _density):
    rng = np.random.default_rng([seed, 8])
    g = np.zeros((8, 8), bool)
    for _ in range(2):
        y0, x0, y1, x1 = rng.integers(0, 8, 4)
        n = max(abs(y1 - y0), abs(x1 - x0)) + 1
        g[np.rint(np.linspace(y0, y1, n)).astype(int), np.rint(np.linspace(x0, x1, n)).astype(int)] = True
    pts = np.argwhere(g)
    kept = pts[rng.random(len(pts)) > 0.15]
    jitter = rng.integers(-1, 2, kept.shape) * (rng.random((len(kept), 1)) < 0.4)
    moved = np.clip(kept + jitter, 0, 7)
    p = np.zeros_like(g)
    p[moved[:, 0], moved[:, 1]] = True
    return p | (rng.random((8, 8)) < 0.05), g


def main():
    diag = np.hypot(8, 8)
    radii = (0.9, 1.0, 1.5, 2.0, 3.0)
    print("kind     density " + " ".join(f"r={r:<5}" for r in radii))
    for kind, gen, densities in (("salt", salt, (0.1, 0.2, 0.3)), ("lines", lines, (None,))):
        for d in densities:
            row = []
            for r in radii:
                g = e = 0
                for seed in range(20):
                    a, b = gen(seed, d)
                    g += match_boundaries(a, b, r / diag, "greedy")[0]
                    e += match_boundaries(a, b, r / diag, "exact")[0]
                row.append(g / e)
            print(f"{kind:8s} {str(d):7s} " + " ".join(f"{v:7.4f}" for v in row))


if __name__ == "__main__":
    main()
