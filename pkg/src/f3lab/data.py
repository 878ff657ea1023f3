"""Synthetic colored-shape VQA data.

Every sample starts from a scene graph (background level plus one to three
shapes, each in its own image quadrant). The image is rendered from the
scene and the question/answer pair is derived from it, so labels are correct
by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fileio import read_container, write_container

VOCAB = (
    "<pad>", "what", "color", "is", "the", "there", "a", "how", "many",
    "shapes", "are", "square", "circle", "triangle", "red", "green", "blue",
    "?",
)
TOKEN = {w: i for i, w in enumerate(VOCAB)}
QUESTION_LEN = 6

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue")
COLOR_RGB = np.array([[0.9, 0.15, 0.1], [0.1, 0.85, 0.2], [0.15, 0.25, 0.95]])

ANSWERS = ("red", "green", "blue", "yes", "no", "one", "two", "three")
ANSWER = {a: i for i, a in enumerate(ANSWERS)}

QTYPES = ("yes/no", "number", "other")
DEFAULT_MIX = (0.384, 0.140, 0.476)

DATASET_MAGIC = b"F3DS"
DATASET_VERSION = 1
_SPLIT_IDS = {"train": 0, "eval": 1}

# columns of Dataset.objects
OBJ_PRESENT, OBJ_SHAPE, OBJ_COLOR, OBJ_QUADRANT, OBJ_SIZE, OBJ_DY, OBJ_DX = range(7)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    question: np.ndarray
    answer_label: int
    qtype: str


@dataclass
class Dataset:
    images: np.ndarray          # (n, S, S, 3) in [0, 1]
    questions: np.ndarray       # (n, QUESTION_LEN) token ids
    labels: np.ndarray          # (n,)
    qtypes: np.ndarray          # (n,) index into QTYPES
    background: np.ndarray      # (n,)
    objects: np.ndarray         # (n, 3, 7) int scene records, see OBJ_* columns
    gains: np.ndarray           # (n, 3) per-object brightness
    seed: int = 0
    split: str = "train"
    mix: tuple = DEFAULT_MIX
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return Sample(self.images[i], self.questions[i], int(self.labels[i]),
                      QTYPES[int(self.qtypes[i])])

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.questions[idx], self.labels[idx],
                       self.qtypes[idx], self.background[idx], self.objects[idx],
                       self.gains[idx], self.seed, self.split, self.mix,
                       dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        arrays = ("images", "questions", "labels", "qtypes", "background",
                  "objects", "gains")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.seed == other.seed and self.split == other.split
                and tuple(self.mix) == tuple(other.mix))


def shape_mask(shape, size):
    r, c = np.mgrid[0:size, 0:size].astype(float)
    mid = (size - 1) / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (r - mid) ** 2 + (c - mid) ** 2 <= (size / 2.0) ** 2 - 0.5
    if shape == "triangle":
        return np.abs(c - mid) <= r / 2.0 + 0.25
    raise ValueError(f"unknown shape {shape!r}")


def render(background, objects, gains, image_size=16):
    img = np.full((image_size, image_size, 3), float(background))
    half = image_size // 2
    for obj, gain in zip(objects, gains):
        if not obj[OBJ_PRESENT]:
            continue
        size = int(obj[OBJ_SIZE])
        qy, qx = divmod(int(obj[OBJ_QUADRANT]), 2)
        y0 = qy * half + int(obj[OBJ_DY])
        x0 = qx * half + int(obj[OBJ_DX])
        mask = shape_mask(SHAPES[obj[OBJ_SHAPE]], size)
        patch = img[y0:y0 + size, x0:x0 + size]
        patch[mask] = gain * COLOR_RGB[obj[OBJ_COLOR]]
    return img


def encode_question(words):
    ids = [TOKEN[w] for w in words]
    ids += [TOKEN["<pad>"]] * (QUESTION_LEN - len(ids))
    return np.array(ids, dtype=np.int64)


def _sample_scene(rng, image_size):
    half = image_size // 2
    k = int(rng.integers(1, 4))
    objects = np.zeros((3, 7), dtype=np.int64)
    gains = np.zeros(3)
    shapes = rng.permutation(3)[:k]
    quads = rng.permutation(4)[:k]
    for j in range(k):
        size = int(rng.integers(half - 1, half + 1))
        objects[j] = (1, shapes[j], rng.integers(3), quads[j], size,
                      rng.integers(0, half - size + 1), rng.integers(0, half - size + 1))
        gains[j] = rng.uniform(0.8, 1.0)
    background = rng.uniform(0.0, 0.25)
    return background, objects, gains


def answer_for(question, objects):
    """Derive the answer label from a question and its scene records."""
    words = [VOCAB[t] for t in question if t != TOKEN["<pad>"]]
    present = [o for o in objects if o[OBJ_PRESENT]]
    if words[:2] == ["how", "many"]:
        return ANSWER[("one", "two", "three")[len(present) - 1]]
    if words[:2] == ["is", "there"]:
        shape = SHAPES.index(words[3])
        return ANSWER["yes" if any(o[OBJ_SHAPE] == shape for o in present) else "no"]
    if words[:2] == ["what", "color"]:
        shape = SHAPES.index(words[4])
        for o in present:
            if o[OBJ_SHAPE] == shape:
                return ANSWER[COLORS[o[OBJ_COLOR]]]
        raise ValueError("question refers to a shape absent from the scene")
    raise ValueError(f"unrecognized question {' '.join(words)!r}")


def _qtype_counts(n, mix):
    raw = np.asarray(mix) * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def generate(n, seed, qtype_mix=DEFAULT_MIX, split="train", image_size=16):
    """Generate ``n`` samples; the qtype counts follow ``qtype_mix`` exactly
    up to rounding. ``split`` selects an independent RNG stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mix = tuple(float(m) for m in qtype_mix)
    if len(mix) != 3 or abs(sum(mix) - 1.0) > 1e-9 or min(mix) < 0:
        raise ValueError(f"qtype_mix must be three nonnegative weights summing to 1, got {mix}")
    if split not in _SPLIT_IDS:
        raise ValueError(f"split must be one of {sorted(_SPLIT_IDS)}")
    if image_size % 2 or image_size < 8:
        raise ValueError("image_size must be even and >= 8")
    rng = np.random.default_rng([int(seed), _SPLIT_IDS[split]])
    counts = _qtype_counts(n, mix)
    qtypes = rng.permutation(np.repeat(np.arange(3), counts))

    images = np.empty((n, image_size, image_size, 3))
    questions = np.empty((n, QUESTION_LEN), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    background = np.empty(n)
    objects = np.empty((n, 3, 7), dtype=np.int64)
    gains = np.empty((n, 3))
    for i, qt in enumerate(qtypes):
        if QTYPES[qt] == "yes/no":
            want_yes = rng.random() < 0.5
            while True:
                bg, obj, gain = _sample_scene(rng, image_size)
                present = sorted(int(o[OBJ_SHAPE]) for o in obj if o[OBJ_PRESENT])
                pool = present if want_yes else [s for s in range(3) if s not in present]
                if pool:
                    break
            words = ["is", "there", "a", SHAPES[pool[rng.integers(len(pool))]], "?"]
        else:
            bg, obj, gain = _sample_scene(rng, image_size)
            if QTYPES[qt] == "number":
                words = ["how", "many", "shapes", "are", "there", "?"]
            else:
                present = [int(o[OBJ_SHAPE]) for o in obj if o[OBJ_PRESENT]]
                shape = present[rng.integers(len(present))]
                words = ["what", "color", "is", "the", SHAPES[shape], "?"]
        q = encode_question(words)
        images[i] = render(bg, obj, gain, image_size)
        questions[i] = q
        labels[i] = answer_for(q, obj)
        background[i] = bg
        objects[i] = obj
        gains[i] = gain
    return Dataset(images, questions, labels, qtypes.astype(np.int64), background,
                   objects, gains, int(seed), split, mix,
                   {"image_size": image_size, "question_len": QUESTION_LEN,
                    "vocab": list(VOCAB), "answers": list(ANSWERS)})


def save(dataset, path, extra_meta=None, extra_arrays=None):
    meta = {"kind": "dataset", "seed": dataset.seed, "split": dataset.split,
            "mix": list(dataset.mix), "n": len(dataset), "info": dataset.meta}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {"images": dataset.images, "questions": dataset.questions,
              "labels": dataset.labels, "qtypes": dataset.qtypes,
              "background": dataset.background, "objects": dataset.objects,
              "gains": dataset.gains}
    if extra_arrays:
        arrays.update(extra_arrays)
    write_container(path, DATASET_MAGIC, DATASET_VERSION, meta, arrays)


def load(path, with_extras=False):
    meta, arrays = read_container(path, DATASET_MAGIC, DATASET_VERSION)
    ds = Dataset(arrays.pop("images"), arrays.pop("questions"), arrays.pop("labels"),
                 arrays.pop("qtypes"), arrays.pop("background"), arrays.pop("objects"),
                 arrays.pop("gains"), meta["seed"], meta["split"], tuple(meta["mix"]),
                 meta.get("info", {}))
    if with_extras:
        return ds, meta, arrays
    return ds
