"""Record the frozen reference run for the MetaSNIP end-to-end test.

    python3 scripts/make_golden_metasnip.py [--out tests/fixtures/metasnip_golden.json]

Only rerun this after an intentional change to the pruning or fine-tuning
rules; the test compares against whatever this script last wrote.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from gatedmeta import nets
from gatedmeta.adaptation import metasnip_adapt

KEEP_RATIO = 0.3
STEP = 0.2


def toy_run():
    """Seeded 2-class blobs, a briefly trained ungated MLP, then MetaSNIP."""
    rng = np.random.default_rng(1234)
    centers = np.array([[1.5, 0.0, -1.0, 0.5, 0.0, 1.0], [-1.0, 1.0, 0.5, -0.5, 1.0, -1.0]])
    y = np.repeat([0, 1], 30)
    x = centers[y] + 0.8 * rng.normal(size=(60, 6))
    perm = rng.permutation(60)
    train = nets.Batch(x[perm[:40]], y[perm[:40]])
    test = nets.Batch(x[perm[40:]], y[perm[40:]])
    meta = nets.mlp(n_in=6, hidden=8, n_classes=2, seed=7)
    for _ in range(20):
        _, g_theta, _ = nets.loss_and_grad(meta, train, gating=False)
        meta.params[meta.theta_range] -= 0.1 * g_theta
    res = metasnip_adapt(meta, train, test, KEEP_RATIO, step=STEP, task_id=0)
    return meta, res


def record():
    meta, res = toy_run()
    theta = res.model.params[res.model.theta_range]
    pool = meta.theta_weight_indices()
    return {
        "keep_ratio": KEEP_RATIO,
        "step": STEP,
        "meta_params": meta.params.tolist(),
        "adapted_params": res.model.params.tolist(),
        "pruned_indices": [int(i) for i in pool if theta[i] == 0.0],
        "accuracy": res.accuracy,
        "sparsity": res.sparsity,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests/fixtures/metasnip_golden.json"))
    args = ap.parse_args(argv)
    Path(args.out).write_text(json.dumps(record(), indent=1) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
