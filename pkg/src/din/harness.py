"""Training loop, evaluation metrics, the ablation grid and report writing."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nlr
from .config import TrainConfig
from .dataset import CLOSED, OPEN, AnswerVocabulary, Dataset, load_image
from .diffusion import dif_loss, forward_sample, make_schedule, sample_answer
from .model_core import DiNModel, Tokenizer
from .noise_bench import sample_rng

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "w_t", "L_RFL", "L_dif", "L_total")

# Table-3 grid: choice -> (use_ad, use_rfl, use_aa)
ABLATION_CHOICES = {
    0: (False, False, False),
    1: (False, True, False),
    2: (True, False, False),
    3: (True, False, True),
    4: (True, True, False),
    5: (True, True, True),
}


@dataclass
class ModelCheckpoint:
    config: dict
    answers: list[str]
    closed: list[bool]
    text_vocab: list[str]
    image_shape: tuple[int, int, int]
    state_dict: dict
    trace: list[dict] = field(default_factory=list)

    @property
    def vocabulary(self) -> AnswerVocabulary:
        return AnswerVocabulary.from_json({"answers": self.answers, "closed": self.closed})

    def save(self, path) -> None:
        torch.save(
            {**asdict(self), "state_dict": dict(self.state_dict), "image_shape": list(self.image_shape)},
            path,
        )

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        obj = torch.load(path, weights_only=True)
        obj["image_shape"] = tuple(obj["image_shape"])
        return cls(**obj)


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------


def stack_images(dataset: Dataset) -> torch.Tensor:
    root = dataset.meta.get("root")
    base = Path(root) if root else None
    return torch.as_tensor(
        np.stack([load_image(s.image, base) for s in dataset.samples]), dtype=torch.float32
    )


def build_model(cfg: TrainConfig, num_classes: int, tokenizer: Tokenizer, image_shape) -> DiNModel:
    H, W, C = image_shape
    if H != W:
        raise ValueError("square images only")
    return DiNModel(
        num_classes, len(tokenizer), d=cfg.d_model, depth=cfg.depth, heads=cfg.heads,
        image_size=H, channels=C, patch=cfg.patch_size, denoiser_hidden=cfg.denoiser_hidden,
        classifier_source=cfg.classifier_source,
    )


def remap_answers(dataset: Dataset, vocab: AnswerVocabulary):
    """Answer and clean-answer indices of ``dataset`` expressed in ``vocab``."""
    src = dataset.vocabulary.answers
    try:
        ans = [vocab.index_of[src[s.answer_index]] for s in dataset.samples]
        clean = [
            vocab.index_of[src[s.clean_answer_index]] if s.clean_answer_index is not None else -1
            for s in dataset.samples
        ]
    except KeyError as e:
        raise ValueError(f"vocabulary mismatch: answer {e.args[0]!r} unknown to the model") from None
    return np.asarray(ans), np.asarray(clean)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_step_losses(model, batch, cfg: TrainConfig, sched, ema: nlr.EmaWeight, gen):
    """Loss terms for one mini-batch. Returns (total, l_cls, l_dif, new_ema)."""
    images, ids, mask, target = batch
    cond, proto = model(images, ids, mask)
    if cfg.use_rfl:
        l_cls = nlr.rfl_loss(proto.logits, target, cfg.gamma, cfg.rfl_floor, cfg.rfl_reverse)
    else:
        l_cls = nlr.cross_entropy(proto.logits, target)
    if not cfg.use_ad:
        return l_cls, l_cls, torch.zeros(()), ema

    ema = ema.update(proto.confidence.detach().numpy())
    y_bar = nlr.adjust_answer(proto.probs.detach(), target, ema.w) if cfg.use_aa else target
    t = torch.randint(1, cfg.T + 1, (target.shape[0],), generator=gen)
    noise = torch.randn(target.shape, generator=gen)
    y_t = forward_sample(y_bar, cond.cond_prob, t, sched, None, noise=noise)
    y0_hat = model.denoiser(y_t, cond.cond_prob, t)
    l_dif = dif_loss(y0_hat, y_bar, cfg.dif_loss)
    return l_dif + cfg.alpha * l_cls, l_cls, l_dif, ema


def train(cfg: TrainConfig, train_data: Dataset, max_steps: int | None = None) -> ModelCheckpoint:
    """Optimise the joint objective L_dif + alpha * L_cls with Adam."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    vocab = train_data.vocabulary
    L = len(vocab)
    tokenizer = Tokenizer.from_questions(s.question for s in train_data.samples)
    images = stack_images(train_data)
    ids, mask = tokenizer.batch([s.question for s in train_data.samples])
    targets = torch.nn.functional.one_hot(
        torch.tensor([s.answer_index for s in train_data.samples]), L
    ).float()
    image_shape = tuple(images.shape[1:])

    model = build_model(cfg, L, tokenizer, image_shape)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    ema = nlr.EmaWeight(cfg.tau)
    trace: list[dict] = []
    n = len(train_data)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = (images[idx], ids[idx], mask[idx], targets[idx])
            total, l_cls, l_dif, ema = train_step_losses(model, batch, cfg, sched, ema, gen)
            step += 1
            trace.append({"step": step, "w_t": ema.w, "L_RFL": float(l_cls.detach()),
                          "L_dif": float(l_dif.detach()), "L_total": float(total.detach())})
            if not math.isfinite(trace[-1]["L_total"]):
                raise FloatingPointError(f"non-finite loss at step {step} (epoch {epoch + 1})")
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if max_steps is not None and step >= max_steps:
                break
        if max_steps is not None and step >= max_steps:
            break
        logger.info("epoch %d mean loss %.4f", epoch + 1,
                    np.mean([r["L_total"] for r in trace if r["step"] > step - math.ceil(n / cfg.batch_size)]))

    vj = vocab.to_json()
    return ModelCheckpoint(
        cfg.to_dict(), vj["answers"], vj["closed"], tokenizer.itos, image_shape,
        {k: v.detach().clone() for k, v in model.state_dict().items()}, trace,
    )


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
        w.writeheader()
        w.writerows(trace)


def epoch_means(trace, steps_per_epoch: int) -> list[float]:
    tot = [r["L_total"] for r in trace]
    return [float(np.mean(tot[i : i + steps_per_epoch])) for i in range(0, len(tot), steps_per_epoch)]


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


class Predictor:
    """Rebuilds a model from a checkpoint and predicts answer indices.

    With the diffuser enabled, predictions come from the reverse chain only;
    otherwise from the proto-answer classifier.
    """

    def __init__(self, ckpt: ModelCheckpoint):
        self.ckpt = ckpt
        self.cfg = TrainConfig(**ckpt.config)
        self.vocab = ckpt.vocabulary
        self.tokenizer = Tokenizer([])
        self.tokenizer.itos = list(ckpt.text_vocab)
        self.tokenizer.stoi = {w: i for i, w in enumerate(self.tokenizer.itos)}
        self.model = build_model(self.cfg, len(self.vocab), self.tokenizer, ckpt.image_shape)
        self.model.load_state_dict(ckpt.state_dict)
        self.model.eval()
        self.sched = make_schedule(self.cfg.T, self.cfg.beta_start, self.cfg.beta_end)

    def chain_noise(self, sample_ids, seed):
        L = len(self.vocab)
        draws = [sample_rng(seed, sid, "reverse").standard_normal((self.sched.T, L)) for sid in sample_ids]
        return torch.as_tensor(np.stack(draws, axis=1), dtype=torch.float32)

    @torch.no_grad()
    def predict(self, dataset: Dataset, seed: int = 0, batch_size: int = 256) -> np.ndarray:
        if len(dataset) == 0:
            return np.zeros(0, dtype=np.int64)
        images = stack_images(dataset)
        if tuple(images.shape[1:]) != tuple(self.ckpt.image_shape):
            raise ValueError(f"image shape {tuple(images.shape[1:])} does not match the model")
        ids, mask = self.tokenizer.batch([s.question for s in dataset.samples])
        out = []
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            cond, proto = self.model(images[sl], ids[sl], mask[sl])
            if self.cfg.use_ad:
                noise = self.chain_noise([s.id for s in dataset.samples[sl]], seed)
                _, pred = sample_answer(self.model.denoiser, cond.cond_prob, self.sched,
                                        init=self.cfg.init_mode, noise=noise)
            else:
                pred = proto.probs.argmax(-1)
            out.append(pred.numpy())
        return np.concatenate(out)


@dataclass
class Metrics:
    acc_open: float
    acc_close: float
    acc_overall: float
    acc_micro: float
    n_open: int
    n_closed: int
    correction_rate: float | None = None

    @classmethod
    def mean(cls, items: list["Metrics"]) -> "Metrics":
        def avg(name):
            vals = [getattr(m, name) for m in items]
            if any(v is None for v in vals):
                return None
            return float(np.mean(vals))

        return cls(avg("acc_open"), avg("acc_close"), avg("acc_overall"), avg("acc_micro"),
                   items[0].n_open, items[0].n_closed, avg("correction_rate"))


def overall_accuracy(acc_open: float, acc_close: float) -> float:
    """Macro average of the two question types; a missing stratum (NaN) is ignored."""
    if math.isnan(acc_open):
        return acc_close
    if math.isnan(acc_close):
        return acc_open
    return (acc_open + acc_close) / 2


def metrics_from_predictions(pred, truth, qtypes) -> Metrics:
    pred, truth, qtypes = np.asarray(pred), np.asarray(truth), np.asarray(qtypes)
    correct = pred == truth
    accs = {}
    counts = {}
    for q in (OPEN, CLOSED):
        sel = qtypes == q
        counts[q] = int(sel.sum())
        accs[q] = float(correct[sel].mean()) if counts[q] else float("nan")
    if counts[OPEN] == 0:
        logger.warning("no open-end questions: acc_open undefined")
    if counts[CLOSED] == 0:
        logger.warning("no closed-end questions: acc_close undefined")
    micro = float(correct.mean()) if len(correct) else float("nan")
    return Metrics(accs[OPEN], accs[CLOSED], overall_accuracy(accs[OPEN], accs[CLOSED]), micro,
                   counts[OPEN], counts[CLOSED])


def evaluate(ckpt: ModelCheckpoint, test_data: Dataset, seed: int = 0, predictor=None) -> Metrics:
    """Accuracy against clean labels (``clean_answer`` if present, else ``answer``)."""
    predictor = predictor or Predictor(ckpt)
    ans, clean = remap_answers(test_data, predictor.vocab)
    truth = np.where(clean >= 0, clean, ans)
    pred = predictor.predict(test_data, seed)
    return metrics_from_predictions(pred, truth, [s.qtype for s in test_data.samples])


def correction_rate(ckpt: ModelCheckpoint, noisy_train: Dataset, seed: int = 0, predictor=None) -> float:
    """Fraction of noised training samples now predicted as their clean label."""
    noised = [s for s in noisy_train.samples if s.is_noised]
    if not noised:
        raise ValueError("dataset has no noised samples")
    sub = Dataset(noised, noisy_train.vocabulary, noisy_train.split, dict(noisy_train.meta))
    predictor = predictor or Predictor(ckpt)
    _, clean = remap_answers(sub, predictor.vocab)
    pred = predictor.predict(sub, seed)
    return float(np.mean(pred == clean))


# ---------------------------------------------------------------------------
# ablation + reports
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    choice: int
    metrics: Metrics
    per_seed: list[Metrics]


def choice_config(base: TrainConfig, choice: int) -> TrainConfig:
    use_ad, use_rfl, use_aa = ABLATION_CHOICES[choice]
    return base.replace(use_ad=use_ad, use_rfl=use_rfl, use_aa=use_aa)


def run_ablation(base: TrainConfig, train_data: Dataset, test_data: Dataset, seeds=(0,),
                 choices=tuple(ABLATION_CHOICES)) -> list[AblationRow]:
    """Train/evaluate every requested grid choice with the same seeds."""
    has_noise = any(s.is_noised for s in train_data.samples)
    rows = []
    for choice in choices:
        per_seed = []
        for seed in seeds:
            cfg = choice_config(base, choice).replace(seed=seed)
            ckpt = train(cfg, train_data)
            predictor = Predictor(ckpt)
            m = evaluate(ckpt, test_data, seed, predictor)
            if has_noise:
                m.correction_rate = correction_rate(ckpt, train_data, seed, predictor)
            logger.info("choice %d seed %d overall %.4f", choice, seed, m.acc_overall)
            per_seed.append(m)
        rows.append(AblationRow(choice, Metrics.mean(per_seed), per_seed))
    return rows


def _pct(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{100 * v:.2f}"


REPORT_COLUMNS = ("table", "row", "open", "close", "overall", "micro", "correction", "n_open", "n_closed")


def report_csv(tables: dict[str, list[tuple[str, Metrics]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for name, rows in tables.items():
        for label, m in rows:
            w.writerow([name, label, _pct(m.acc_open), _pct(m.acc_close), _pct(m.acc_overall),
                        _pct(m.acc_micro), _pct(m.correction_rate), m.n_open, m.n_closed])
    return buf.getvalue()


def report_markdown(tables: dict[str, list[tuple[str, Metrics]]]) -> str:
    lines = []
    for name, rows in tables.items():
        lines += [f"## {name}", "", "| Row | Open | Close | Overall | Micro | Correction |",
                  "|---|---|---|---|---|---|"]
        for label, m in rows:
            lines.append(f"| {label} | {_pct(m.acc_open)} | {_pct(m.acc_close)} | "
                         f"{_pct(m.acc_overall)} | {_pct(m.acc_micro)} | {_pct(m.correction_rate)} |")
        lines.append("")
    return "\n".join(lines)


def emit_report(tables: dict[str, list[tuple[str, Metrics]]], path) -> None:
    """Write ``report.csv`` and ``report.md`` into directory ``path``. Values are percentages."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(tables))
    (out / "report.md").write_text(report_markdown(tables))


def ablation_table(rows: list[AblationRow]) -> list[tuple[str, Metrics]]:
    return [(str(r.choice), r.metrics) for r in rows]
