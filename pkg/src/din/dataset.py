"""Samples, answer vocabularies, JSONL I/O and the synthetic pattern corpus."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

OPEN = "open"
CLOSED = "closed"
QTYPES = (OPEN, CLOSED)


@dataclass
class Sample:
    id: str
    image: np.ndarray | str  # H x W x C array, or a path to an image file
    question: str
    answer_index: int
    qtype: str
    clean_answer_index: int | None = None
    is_noised: bool = False

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        same_image = (
            self.image == other.image
            if isinstance(self.image, str) or isinstance(other.image, str)
            else np.array_equal(self.image, other.image)
        )
        return bool(same_image) and (
            self.id,
            self.question,
            self.answer_index,
            self.qtype,
            self.clean_answer_index,
            self.is_noised,
        ) == (
            other.id,
            other.question,
            other.answer_index,
            other.qtype,
            other.clean_answer_index,
            other.is_noised,
        )


@dataclass
class AnswerVocabulary:
    answers: list[str]
    frequency: list[int]
    closed_set: frozenset[int]
    index_of: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index_of = {a: i for i, a in enumerate(self.answers)}
        if len(self.index_of) != len(self.answers):
            raise ValueError("answers must be distinct")
        if len(self.frequency) != len(self.answers):
            raise ValueError("frequency must have one entry per answer")
        self.closed_set = frozenset(int(i) for i in self.closed_set)
        if any(not 0 <= i < len(self.answers) for i in self.closed_set):
            raise ValueError("closed_set index out of range")

    def __len__(self):
        return len(self.answers)

    @property
    def open_set(self) -> frozenset[int]:
        return frozenset(range(len(self))) - self.closed_set

    def to_json(self) -> dict:
        return {
            "answers": list(self.answers),
            "closed": [i in self.closed_set for i in range(len(self))],
        }

    @classmethod
    def from_json(cls, obj: Mapping, frequency: Sequence[int] | None = None):
        answers = list(obj["answers"])
        closed = list(obj["closed"])
        if len(closed) != len(answers):
            raise ValueError("'closed' must be parallel to 'answers'")
        freq = list(frequency) if frequency is not None else [0] * len(answers)
        return cls(answers, freq, frozenset(i for i, c in enumerate(closed) if c))


@dataclass
class Dataset:
    samples: list[Sample]
    vocabulary: AnswerVocabulary
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        L = len(self.vocabulary)
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if not 0 <= s.answer_index < L:
                raise ValueError(f"sample {s.id!r}: answer_index out of range")
            if s.clean_answer_index is not None and not 0 <= s.clean_answer_index < L:
                raise ValueError(f"sample {s.id!r}: clean_answer_index out of range")
            if s.is_noised and (
                s.clean_answer_index is None or s.clean_answer_index == s.answer_index
            ):
                raise ValueError(f"sample {s.id!r}: noised sample needs a differing clean answer")

    def __len__(self):
        return len(self.samples)

    @property
    def n_questions(self) -> int:
        return len(self.samples)

    @property
    def n_images(self) -> int:
        keys = set()
        for s in self.samples:
            keys.add(s.image if isinstance(s.image, str) else np.asarray(s.image).tobytes())
        return len(keys)

    def answer_text(self, index: int) -> str:
        return self.vocabulary.answers[index]


def build_vocabulary(
    samples: Iterable[Mapping], universe: Mapping[str, str] | None = None
) -> AnswerVocabulary:
    """Build a vocabulary from records carrying ``answer`` and ``qtype`` keys.

    Answers are ordered by descending frequency, then lexicographically. An
    answer is closed only if every occurrence is under a closed question.
    ``universe`` (answer -> qtype) adds answers that must exist even when they
    never occur; they get frequency 0.
    """
    counts: Counter[str] = Counter()
    qtypes: dict[str, set[str]] = {}
    for rec in samples:
        a, q = rec["answer"], rec["qtype"]
        if q not in QTYPES:
            raise ValueError(f"unknown qtype {q!r}")
        counts[a] += 1
        qtypes.setdefault(a, set()).add(q)
    for a, q in (universe or {}).items():
        counts.setdefault(a, 0)
        qtypes.setdefault(a, set()).add(q)
    if not counts:
        raise ValueError("cannot build a vocabulary from zero samples")
    for a, qs in qtypes.items():
        if len(qs) > 1:
            logger.warning("answer %r occurs under both question types; treated as open", a)
    answers = sorted(counts, key=lambda a: (-counts[a], a))
    closed = frozenset(i for i, a in enumerate(answers) if qtypes[a] == {CLOSED})
    return AnswerVocabulary(answers, [counts[a] for a in answers], closed)


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------


def _image_from_json(value, base: Path):
    if isinstance(value, str):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("inline image must be a 2-D or 3-D array")
    return arr


def _image_to_json(image):
    if isinstance(image, str):
        return image
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return arr.tolist()


def load_image(image, base: Path | None = None) -> np.ndarray:
    """Resolve an image payload to an H x W x C float array."""
    if not isinstance(image, str):
        arr = np.asarray(image, dtype=np.float64)
        return arr[:, :, None] if arr.ndim == 2 else arr
    path = Path(image)
    if base is not None and not path.is_absolute():
        path = base / path
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
    else:
        from PIL import Image

        arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def load_vocabulary(path) -> AnswerVocabulary:
    with open(path) as f:
        return AnswerVocabulary.from_json(json.load(f))


def save_vocabulary(vocab: AnswerVocabulary, path) -> None:
    with open(path, "w") as f:
        json.dump(vocab.to_json(), f)
        f.write("\n")


_REQUIRED = ("id", "image", "question", "answer", "qtype")


def load_dataset(path, vocabulary: AnswerVocabulary | str | Path | None = None, split="train"):
    """Read a JSONL file. The vocabulary is rebuilt from the answers unless given."""
    path = Path(path)
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            missing = [k for k in _REQUIRED if k not in rec]
            if missing or rec["qtype"] not in QTYPES:
                raise ValueError(f"{path}:{lineno}: malformed record (missing {missing} or bad qtype)")
            records.append((lineno, rec))

    if isinstance(vocabulary, (str, Path)):
        vocabulary = load_vocabulary(vocabulary)
    if vocabulary is None:
        if not records:
            raise ValueError(f"{path}: empty file and no vocabulary supplied")
        vocabulary = build_vocabulary(r for _, r in records)
    else:
        counts = Counter(r["answer"] for _, r in records)
        vocabulary = AnswerVocabulary(
            list(vocabulary.answers),
            [counts.get(a, 0) for a in vocabulary.answers],
            vocabulary.closed_set,
        )

    samples = []
    seen = set()
    for lineno, rec in records:
        if rec["id"] in seen:
            raise ValueError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        try:
            answer = vocabulary.index_of[rec["answer"]]
            clean = rec.get("clean_answer")
            clean = vocabulary.index_of[clean] if clean is not None else None
        except KeyError as e:
            raise ValueError(f"{path}:{lineno}: answer {e.args[0]!r} not in vocabulary") from None
        samples.append(
            Sample(
                id=rec["id"],
                image=_image_from_json(rec["image"], path.parent),
                question=rec["question"],
                answer_index=answer,
                qtype=rec["qtype"],
                clean_answer_index=clean,
                is_noised=bool(rec.get("is_noised", False)),
            )
        )
    return Dataset(samples, vocabulary, split, meta={"root": str(path.parent)})


def sample_to_record(sample: Sample, vocab: AnswerVocabulary) -> dict:
    rec = {
        "id": sample.id,
        "image": _image_to_json(sample.image),
        "question": sample.question,
        "answer": vocab.answers[sample.answer_index],
        "qtype": sample.qtype,
    }
    if sample.clean_answer_index is not None:
        rec["clean_answer"] = vocab.answers[sample.clean_answer_index]
    rec["is_noised"] = sample.is_noised
    return rec


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as f:
        for s in dataset.samples:
            f.write(json.dumps(sample_to_record(s, dataset.vocabulary)))
            f.write("\n")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# Answer names for the synthetic patterns. Several come in near-spelling pairs
# so the trigram embedding produces meaningful nearest neighbours.
PATTERN_NAMES = (
    "left lung", "right lung", "left kidney", "right kidney", "axial", "coronal",
    "sagittal", "cyst", "cysts", "mass", "masses", "nodule", "nodules", "edema",
    "effusion", "pleural effusion", "fracture", "fractures", "lesion", "lesions",
    "brain", "brainstem", "liver", "spleen", "heart", "aorta", "colon", "stomach",
    "ct", "mri", "x-ray", "ultrasound",
)
YES, NO = "yes", "no"
OPEN_TEMPLATES = ("what pattern is shown", "which pattern is in the image")
CLOSED_TEMPLATES = ("is the image dark", "is this image dark")

IMAGE_SIZE = 8
PATTERN_SIZE = 7
_PATTERN_SEED = 20240601
_BACKGROUND = 0.25
_JITTER = 0.04
_DARK_LEVELS = (0.3, 0.5)
_BRIGHT_LEVELS = (0.7, 1.0)
_DARK_CUTOFF = 0.6


def _placements(mask: np.ndarray):
    shift = IMAGE_SIZE - PATTERN_SIZE
    for dy in range(shift + 1):
        for dx in range(shift + 1):
            canvas = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
            canvas[dy : dy + PATTERN_SIZE, dx : dx + PATTERN_SIZE] = mask
            yield canvas


def synthetic_patterns(n_patterns: int) -> np.ndarray:
    """Fixed binary PATTERN_SIZE-square masks, every placement on the 8x8 canvas unique."""
    if n_patterns > len(PATTERN_NAMES):
        raise ValueError(f"at most {len(PATTERN_NAMES)} synthetic patterns")
    rng = np.random.default_rng(_PATTERN_SEED)
    masks, seen = [], set()
    while len(masks) < n_patterns:
        mask = rng.random((PATTERN_SIZE, PATTERN_SIZE)) < 0.4
        if mask.sum() < 6:
            continue
        keys = [c.tobytes() for c in _placements(mask)]
        if len(set(keys)) < len(keys) or seen.intersection(keys):
            continue
        seen.update(keys)
        masks.append(mask)
    return np.stack(masks)


def render_pattern(mask, level, dy, dx, rng) -> np.ndarray:
    canvas = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    canvas[dy : dy + PATTERN_SIZE, dx : dx + PATTERN_SIZE] = mask
    img = np.where(canvas, level, _BACKGROUND * level)
    img = img + rng.uniform(-_JITTER, _JITTER, size=img.shape)
    return img[:, :, None]


def decode_image(image: np.ndarray, patterns: np.ndarray) -> tuple[int, bool]:
    """Recover (pattern index, is_dark) from a rendered synthetic image."""
    img = np.asarray(image, dtype=np.float64)[:, :, 0]
    on = img > (img.min() + img.max()) / 2
    for k, mask in enumerate(patterns):
        if any(np.array_equal(on, c) for c in _placements(mask)):
            return k, bool(img[on].mean() < _DARK_CUTOFF)
    raise ValueError("image does not match any synthetic pattern")


def synthetic_answer(image, question: str, patterns: np.ndarray) -> str:
    k, dark = decode_image(image, patterns)
    if question in OPEN_TEMPLATES:
        return PATTERN_NAMES[k]
    if question in CLOSED_TEMPLATES:
        return YES if dark else NO
    raise ValueError(f"not a synthetic template: {question!r}")


def generate_synthetic_corpus(n: int, L_open: int, seed: int, split="train", id_prefix="s"):
    """Deterministic image/question/answer corpus over ``L_open + 2`` classes."""
    if n < 1 or L_open < 2:
        raise ValueError("need n >= 1 and L_open >= 2")
    patterns = synthetic_patterns(L_open)
    rng = np.random.default_rng(seed)
    shift = IMAGE_SIZE - PATTERN_SIZE
    records = []
    for i in range(n):
        k = int(rng.integers(L_open))
        dark = bool(rng.random() < 0.5)
        level = rng.uniform(*(_DARK_LEVELS if dark else _BRIGHT_LEVELS))
        dy, dx = (int(v) for v in rng.integers(shift + 1, size=2))
        image = render_pattern(patterns[k], level, dy, dx, rng)
        if rng.random() < 0.5:
            qtype, question = OPEN, OPEN_TEMPLATES[int(rng.integers(len(OPEN_TEMPLATES)))]
            answer = PATTERN_NAMES[k]
        else:
            qtype, question = CLOSED, CLOSED_TEMPLATES[int(rng.integers(len(CLOSED_TEMPLATES)))]
            answer = YES if dark else NO
        records.append(
            {"id": f"{id_prefix}{i:06d}", "image": image, "question": question,
             "answer": answer, "qtype": qtype}
        )
    universe = {name: OPEN for name in PATTERN_NAMES[:L_open]}
    universe.update({YES: CLOSED, NO: CLOSED})
    vocab = build_vocabulary(records, universe=universe)
    samples = [
        Sample(r["id"], r["image"], r["question"], vocab.index_of[r["answer"]], r["qtype"])
        for r in records
    ]
    return Dataset(samples, vocab, split, meta={"synthetic": {"n": n, "L_open": L_open, "seed": seed}})
