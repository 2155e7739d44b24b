"""Discard fraction of the ontology filter as the mock backend's noise grows.

    python3 scripts/noise_sweep.py --records 500 --seeds 3
"""

import argparse

from odrase import load_ontology
from odrase.g2cot import MockBackend, annotate_many
from odrase.graph_filter import filter_record_graph
from odrase.ontology import reference_graph


def discard_fraction(cfg, noise, seed, n):
    g_a = reference_graph(cfg)
    recs = annotate_many([(f"rec{k:05d}", f"{k}.jpg") for k in range(n)], cfg, MockBackend(seed, noise, cfg))
    return sum(not filter_record_graph(r.instance_graph, g_a).kept for r in recs) / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--records", type=int, default=500)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--ontology")
    args = ap.parse_args()
    cfg = load_ontology(args.ontology)

    print(f"{'noise':>6} {'expected':>9} {'observed':>9} {'min':>7} {'max':>7}")
    for noise in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0):
        fr = [discard_fraction(cfg, noise, s, args.records) for s in range(args.seeds)]
        print(f"{noise:>6.1f} {noise:>9.3f} {sum(fr) / len(fr):>9.3f} {min(fr):>7.3f} {max(fr):>7.3f}")


if __name__ == "__main__":
    main()
