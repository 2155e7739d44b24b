"""Finite-difference check of the full model's backward pass across seeds.

    python3 scripts/gradcheck.py --seeds 20 --h 1e-4
"""

import argparse
import time

import numpy as np

from odrase.model import gradient_check, init_params


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--h", type=float, default=1e-4)
    ap.add_argument("--tol", type=float, default=1e-4)
    ap.add_argument("--bypass", action="store_true", help="replace attention with T + I")
    args = ap.parse_args()

    start = time.perf_counter()
    failures = 0
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        params = init_params(text_dim=6, image_dim=7, seq_len=4, image_tokens=5, d=8, n_heads=2,
                             n_classes=3, rng=rng)
        sample = (rng.normal(size=(4, 6)), rng.normal(size=(5, 7)), (rng.random(3) < 0.5).astype(float))
        rep = gradient_check(params, sample, h=args.h, tol=args.tol, bypass_attention=args.bypass)
        failures += not rep.passed
        print(f"seed {seed:>3}  max rel err {rep.max_rel_error:.2e}  at {rep.worst_param}{list(rep.worst_index)}"
              f"  {'ok' if rep.passed else 'FAIL'}")
    print(f"{args.seeds - failures}/{args.seeds} passed in {time.perf_counter() - start:.1f} s")
    raise SystemExit(1 if failures else 0)


if __name__ == "__main__":
    main()
