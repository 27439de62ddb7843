"""Six-choice module ablation on the synthetic corpus with 20% semantic noise.

    python3 scripts/run_ablation.py --out runs/ablation --seeds 1,2,3
"""
import argparse
import logging

from din.config import TrainConfig, load_config
from din.dataset import generate_synthetic_corpus
from din.harness import ablation_table, emit_report, run_ablation
from din.noise_bench import HashingEmbedding, NoiseSpec, build_semantic_index, inject_noise


def corpus(n_train=2000, n_test=1000, open_classes=18, noise=0.2, kind="semantic"):
    train = generate_synthetic_corpus(n_train, open_classes, seed=1)
    test = generate_synthetic_corpus(n_test, open_classes, seed=2, split="test", id_prefix="t")
    index = build_semantic_index(train.vocabulary, HashingEmbedding(), 2)
    return inject_noise(train, index, NoiseSpec(kind, noise, 3)), test


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--choices", default="0,1,2,3,4,5")
    ap.add_argument("--noise", type=float, default=0.2)
    ap.add_argument("--kind", default="semantic", choices=["semantic", "random"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = load_config(args.config) if args.config else TrainConfig()
    train, test = corpus(noise=args.noise, kind=args.kind)
    seeds = [int(s) for s in args.seeds.split(",")]
    choices = [int(c) for c in args.choices.split(",")]
    rows = run_ablation(base, train, test, seeds, choices)
    emit_report({f"{args.kind} {int(100 * args.noise)}%": ablation_table(rows)}, args.out)
    for r in rows:
        m = r.metrics
        print(f"choice {r.choice}: open {100 * m.acc_open:.2f} close {100 * m.acc_close:.2f} "
              f"overall {100 * m.acc_overall:.2f} correction {100 * m.correction_rate:.2f}")


if __name__ == "__main__":
    main()
