"""Train the grounding classifier on the linearly decodable synthetic fixture.

Reports the per-epoch loss and subset accuracy on the training fixture and on
a held-out draw from the same generator.

    python3 scripts/synthetic_train.py --epochs 25 --optimizer sgd
"""

import argparse
import time

import numpy as np

from odrase.evaluation import evaluate, format_table
from odrase.model import TrainConfig, labels_from_probs, predict_proba, train
from odrase.synthetic import SyntheticSpec, make_fixture


def score(params, text, y, image, threshold):
    probs = predict_proba(text, image, params)
    preds = [labels_from_probs(p, threshold) for p in probs]
    truths = [set(np.flatnonzero(row).tolist()) for row in y]
    return evaluate(preds, truths, y.shape[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--optimizer", default="sgd", choices=("sgd", "momentum", "adam"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    # one draw, split so train and held-out share code books
    spec = SyntheticSpec(n_samples=args.samples + 100, seed=args.seed)
    text, image, y = make_fixture(spec)
    n = args.samples
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=args.lr,
                      optimizer=args.optimizer, seed=args.seed)
    start = time.perf_counter()
    res = train(list(zip(text[:n], image[:n], y[:n])), cfg)
    elapsed = time.perf_counter() - start

    for k, loss in enumerate(res.epoch_losses, start=1):
        print(f"epoch {k:>3}  loss {loss:.4f}")
    print(f"trained in {elapsed:.1f} s\n")
    print(format_table([
        ("train", score(res.params, text[:n], y[:n], image[:n], cfg.threshold)),
        ("held-out", score(res.params, text[n:], y[n:], image[n:], cfg.threshold)),
    ]))


if __name__ == "__main__":
    main()
