"""Hyperparameter sweep of the full model: classifier loss, diffusion loss, alpha and T.

Each row changes one setting of the base config; rows are averaged over seeds.

    python3 scripts/sweep.py --out runs/sweep --seeds 1
"""
import argparse
import logging

from din.config import TrainConfig
from din.harness import Metrics, emit_report, evaluate, train
from run_ablation import corpus

GRID = {
    "classifier loss": {
        "CE": dict(use_rfl=False),
        "Focal": dict(gamma=1.0, rfl_reverse=False),
        "SCE": dict(gamma=0.0),
        "RFL": {},
    },
    "diffusion loss": {"KL": dict(dif_loss="kl"), "MSE": {}},
    "alpha": {"0.1": dict(alpha=0.1), "0.5": {}, "1": dict(alpha=1.0)},
    "T": {"10": dict(T=10), "50": {}, "100": dict(T=100)},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seeds", default="1")
    ap.add_argument("--groups", default=",".join(GRID))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    train_data, test = corpus()
    seeds = [int(s) for s in args.seeds.split(",")]
    tables = {}
    for group in args.groups.split(","):
        rows = []
        for label, change in GRID[group].items():
            runs = [evaluate(train(TrainConfig(seed=s, **change), train_data), test, s) for s in seeds]
            m = Metrics.mean(runs)
            print(f"{group:>16} {label:>6}: overall {100 * m.acc_overall:.2f}", flush=True)
            rows.append((label, m))
        tables[group] = rows
    emit_report(tables, args.out)


if __name__ == "__main__":
    main()
