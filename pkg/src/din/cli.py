"""Command-line entry point: ``din synth | build-noise | train | eval | ablate``.

Exit codes: 0 success, 1 usage error (bad flags, bad config), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import TrainConfig, field_types, load_config

EXIT_USAGE, EXIT_RUNTIME = 1, 2

# short aliases for a few config flags
ALIASES = {"init_mode": ["--init"]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag] + ALIASES.get(f.name, [])
        g.add_argument(*names, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper(),
                       help=f"default {f.default!r}")


def _config_from_args(args) -> TrainConfig:
    types = field_types()
    overrides = {}
    for name, cast in types.items():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is None:
            continue
        try:
            overrides[name] = cast(raw)
        except ValueError as e:
            raise UsageError(f"--{name.replace('_', '-')}: {e}") from None
    try:
        return load_config(getattr(args, "config", None), **overrides)
    except (KeyError, ValueError, OSError) as e:
        raise UsageError(str(e).strip("'\"")) from None


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed required")
    return seeds


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    from .dataset import generate_synthetic_corpus, save_dataset, save_vocabulary

    data = generate_synthetic_corpus(args.n, args.open_classes, args.seed, split=args.split,
                                     id_prefix=args.id_prefix)
    save_dataset(data, args.out)
    if args.vocab:
        save_vocabulary(data.vocabulary, args.vocab)
    print(f"wrote {len(data)} samples, {len(data.vocabulary)} answers -> {args.out}")


def cmd_build_noise(args) -> None:
    from .dataset import load_dataset, save_dataset
    from .noise_bench import FileEmbedding, HashingEmbedding, NoiseSpec, build_semantic_index, inject_noise, noise_report

    try:
        spec = NoiseSpec(args.kind, args.ratio, args.seed, args.min_freq)
    except ValueError as e:
        raise UsageError(str(e)) from None
    data = load_dataset(args.inp)
    provider = FileEmbedding(args.embeddings) if args.embeddings else HashingEmbedding()
    index = build_semantic_index(data.vocabulary, provider, args.min_freq)
    noisy = inject_noise(data, index, spec)
    save_dataset(noisy, args.out)
    stats = noise_report(noisy)
    sidecar = Path(str(args.out) + ".stats.json")
    sidecar.write_text(stats.to_json() + "\n")
    print(f"noised {stats.noised} -> {args.out} (stats: {sidecar})")


def cmd_train(args) -> None:
    from .dataset import load_dataset
    from .harness import train, write_trace

    cfg = _config_from_args(args)
    data = load_dataset(args.data)
    ckpt = train(cfg, data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    write_trace(ckpt.trace, Path(str(out) + ".trace.csv"))
    print(f"trained {len(ckpt.trace)} steps, final loss {ckpt.trace[-1]['L_total']:.4f} -> {out}")


def cmd_eval(args) -> None:
    from .dataset import load_dataset
    from .harness import ModelCheckpoint, Predictor, correction_rate, emit_report, evaluate

    ckpt = ModelCheckpoint.load(args.ckpt)
    data = load_dataset(args.data, ckpt.vocabulary if args.strict_vocab else None, split="test")
    predictor = Predictor(ckpt)
    m = evaluate(ckpt, data, args.seed, predictor)
    if any(s.is_noised for s in data.samples):
        m.correction_rate = correction_rate(ckpt, data, args.seed, predictor)
    if args.report:
        emit_report({"eval": [(Path(args.ckpt).name, m)]}, args.report)
    print(json.dumps(m.__dict__, sort_keys=True))


def cmd_ablate(args) -> None:
    from .dataset import load_dataset
    from .harness import ABLATION_CHOICES, ablation_table, emit_report, run_ablation

    cfg = _config_from_args(args)
    bad = [c for c in args.choices if c not in ABLATION_CHOICES]
    if bad:
        raise UsageError(f"unknown ablation choices {bad}; valid: 0-5")
    train_data = load_dataset(args.train)
    test_data = load_dataset(args.test, split="test")
    rows = run_ablation(cfg, train_data, test_data, args.seeds, args.choices)
    emit_report({"ablation": ablation_table(rows)}, args.out)
    for r in rows:
        print(f"choice {r.choice}: overall {100 * r.metrics.acc_overall:.2f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="din", description="Diffusion-based answer classifier with noisy-label refinement.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic image/question corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--open-classes", type=int, default=18, help="open-end answer classes (total L = this + 2)")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--split", choices=["train", "test"], default="train")
    s.add_argument("--id-prefix", default="s")
    s.add_argument("--vocab", help="also write the answer vocabulary JSON here")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-noise", help="inject semantic or random label noise")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["semantic", "random"], default="semantic")
    s.add_argument("--ratio", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-freq", type=int, default=2)
    s.add_argument("--embeddings", help='JSONL of {"answer": str, "vector": [...]}; default: hashed char trigrams')
    s.set_defaults(func=cmd_build_noise)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a labelled set")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", help="directory for report.csv / report.md")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--strict-vocab", action="store_true", help="load data with the checkpoint vocabulary")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run the six-choice module ablation")
    s.add_argument("--config")
    s.add_argument("--train", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--seeds", type=_seeds, default=[1, 2, 3])
    s.add_argument("--choices", type=_seeds, default=[0, 1, 2, 3, 4, 5])
    s.add_argument("--out", default="ablation_report")
    _add_config_flags(s)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"din {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure: I/O, data errors, divergence
        print(f"din {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
