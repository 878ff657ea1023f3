"""Toy vision-language model with an exposed cross-modal attention tensor.

The image is cut into ``p x p`` patches and linearly projected to M visual
tokens. The question contributes N embedded text tokens, and one learned
answer-slot token is appended last. A stack of pre-norm transformer layers
runs over ``[visual; text; slot]`` and the answer logits are read from the
slot. The slot's softmax row in every layer and head, restricted to the M
visual positions, is the cross-modal attention ``A`` of shape (L, H, M).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .fileio import read_container, write_container

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"F3CK"
CHECKPOINT_VERSION = 1
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    vocab_size: int = 32
    max_question_len: int = 6
    answer_classes: int = 8
    layers: int = 3
    heads: int = 4
    width: int = 32
    ff_width: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        for name in ("layers", "heads", "width", "vocab_size", "answer_classes",
                     "max_question_len", "ff_width", "channels", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_visual(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self):
        return self.width // self.heads


def init_params(cfg):
    """Seeded initial weights, keyed by name. Plain arrays, not tensors."""
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.width, cfg.ff_width

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    p = {
        "patch_w": dense(cfg.patch_dim, d),
        "patch_b": np.zeros(d),
        "pos_visual": rng.normal(0.0, 0.1, size=(cfg.num_visual, d)),
        "token_emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)),
        "pos_text": rng.normal(0.0, 0.1, size=(cfg.max_question_len, d)),
        "slot": rng.normal(0.0, 1.0, size=(d,)),
        "head_w": dense(d, cfg.answer_classes),
        "head_b": np.zeros(cfg.answer_classes),
    }
    for i in range(cfg.layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"l{i}.{w}"] = dense(d, d)
        p[f"l{i}.w1"] = dense(d, f)
        p[f"l{i}.b1"] = np.zeros(f)
        p[f"l{i}.w2"] = dense(f, d) * 0.5
        p[f"l{i}.b2"] = np.zeros(d)
    return p


def _layer_norm(x):
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.mul(xc, xc), axis=-1, keepdims=True)
    return ad.div(xc, ad.sqrt(ad.add(var, _LN_EPS)))


@dataclass
class ForwardResult:
    logits: Tensor              # (B, K)
    attention: Tensor           # (B, L, H, M)
    full_rows: list = field(default_factory=list)   # per layer (B, H, T) slot rows


class ToyVLM:
    def __init__(self, config=None, params=None):
        self.config = config or ModelConfig()
        raw = init_params(self.config) if params is None else params
        expected = init_params(self.config) if params is not None else raw
        for name, arr in raw.items():
            if name not in expected or np.shape(arr) != expected[name].shape:
                raise ValueError(f"parameter {name!r} does not match config")
        self.params = {k: Tensor(v) for k, v in raw.items()}

    # -- parameter access --------------------------------------------------

    def param_arrays(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def set_trainable(self, flag):
        for t in self.params.values():
            t.requires_grad = flag

    def __eq__(self, other):
        if not isinstance(other, ToyVLM):
            return NotImplemented
        return (self.config == other.config
                and self.params.keys() == other.params.keys()
                and all(np.array_equal(self.params[k].data, other.params[k].data)
                        for k in self.params))

    # -- forward -------------------------------------------------------------

    def _check_image(self, images):
        cfg = self.config
        want = (cfg.image_size, cfg.image_size, cfg.channels)
        if tuple(images.shape[-3:]) != want:
            raise ValueError(f"image shape {images.shape} does not match {want}")

    def encode_image(self, images):
        """(B, S, S, C) or (S, S, C) pixels -> (B, M, d) visual tokens."""
        images = ad.as_tensor(images)
        self._check_image(images)
        if images.ndim == 3:
            images = ad.reshape(images, (1,) + images.shape)
        cfg = self.config
        b, g, p = images.shape[0], cfg.grid, cfg.patch_size
        x = ad.reshape(images, (b, g, p, g, p, cfg.channels))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ad.reshape(x, (b, cfg.num_visual, cfg.patch_dim))
        return ad.add(ad.matmul(x, self.params["patch_w"]), self.params["patch_b"])

    def forward(self, images, questions):
        """Batched forward. Returns answer logits and the (B, L, H, M) attention."""
        cfg = self.config
        P = self.params
        questions = np.asarray(questions, dtype=np.int64)
        if questions.ndim == 1:
            questions = questions[None]
        n = questions.shape[1]
        if n < 1 or n > cfg.max_question_len:
            raise ValueError(f"question length {n} outside [1, {cfg.max_question_len}]")
        vis = ad.add(self.encode_image(images), P["pos_visual"])
        b = vis.shape[0]
        if questions.shape[0] != b:
            raise ValueError("batch size mismatch between images and questions")
        txt = ad.add(ad.embed(P["token_emb"], questions),
                     ad.getitem(P["pos_text"], slice(0, n)))
        slot = ad.add(Tensor(np.zeros((b, 1, cfg.width))),
                      ad.reshape(P["slot"], (1, 1, cfg.width)))
        x = ad.concat([vis, txt, slot], axis=1)
        t_len = x.shape[1]
        h, dh, m = cfg.heads, cfg.head_dim, cfg.num_visual
        inv = 1.0 / np.sqrt(dh)
        rows, attn = [], []
        for i in range(cfg.layers):
            xn = _layer_norm(x)

            def heads_of(w):
                y = ad.reshape(ad.matmul(xn, P[f"l{i}.{w}"]), (b, t_len, h, dh))
                return ad.transpose(y, (0, 2, 1, 3))

            q, k, v = heads_of("wq"), heads_of("wk"), heads_of("wv")
            scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv)
            probs = ad.softmax(scores, axis=-1)                 # (B, H, T, T)
            row = ad.getitem(probs, (slice(None), slice(None), t_len - 1))
            rows.append(row)
            attn.append(ad.getitem(row, (slice(None), slice(None), slice(0, m))))
            ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)),
                             (b, t_len, cfg.width))
            x = ad.add(x, ad.matmul(ctx, P[f"l{i}.wo"]))
            hid = ad.tanh(ad.add(ad.matmul(_layer_norm(x), P[f"l{i}.w1"]), P[f"l{i}.b1"]))
            x = ad.add(x, ad.add(ad.matmul(hid, P[f"l{i}.w2"]), P[f"l{i}.b2"]))
        out = _layer_norm(ad.getitem(x, (slice(None), t_len - 1)))
        logits = ad.add(ad.matmul(out, P["head_w"]), P["head_b"])
        return ForwardResult(logits, ad.stack(attn, axis=1), rows)

    def attention(self, images, questions):
        """(B, L, H, M) attention as a plain array, no tape."""
        return self.forward(images, questions).attention.data

    def predict(self, images, questions):
        return np.argmax(self.forward(images, questions).logits.data, axis=-1)

    def lvlm_loss(self, images, questions, labels, reduction="sum"):
        """Cross-entropy of the answer logits; per-sample values are summed,
        averaged, or returned as a vector."""
        return cross_entropy(self.forward(images, questions).logits, labels,
                             self.config.answer_classes, reduction)


def normalize_over_tokens(attention):
    """Rescale each (layer, head) row of an attention tensor to sum to 1 over M."""
    a = np.asarray(attention, dtype=np.float64)
    return a / a.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels, classes, reduction="sum"):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"answer label outside [0, {classes})")
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.getitem(logp, (np.arange(labels.size), labels))
    nll = ad.neg(picked)
    if reduction == "none":
        return nll
    if reduction == "mean":
        return ad.mean(nll)
    return ad.sum_(nll)


# -- objectives and input gradients --------------------------------------------

class Objective:
    """Scalar loss of a batch of images; summed over the batch so each image's
    gradient is its own per-sample gradient."""

    def __call__(self, model, images, questions):
        raise NotImplementedError


class LvlmObjective(Objective):
    def __init__(self, labels):
        self.labels = np.asarray(labels)

    def __call__(self, model, images, questions):
        return model.lvlm_loss(images, questions, self.labels, reduction="sum")


class CWObjective(Objective):
    """Answer loss minus ``c`` times the l2 distance to the clean image."""

    def __init__(self, clean, labels, c):
        self.clean = np.asarray(clean, dtype=np.float64)
        self.labels = np.asarray(labels)
        self.c = float(c)

    def __call__(self, model, images, questions):
        loss = model.lvlm_loss(images, questions, self.labels, reduction="sum")
        b = self.clean.reshape(-1, *self.clean.shape[-3:]).shape[0]
        diff = ad.reshape(ad.sub(images, self.clean), (b, -1))
        dist = ad.sum_(ad.l2_norm(diff, axis=1))
        return ad.sub(loss, ad.scale(dist, self.c))


class ConstantObjective(Objective):
    def __init__(self, value=0.0):
        self.value = float(value)

    def __call__(self, model, images, questions):
        return ad.add(ad.scale(ad.sum_(images), 0.0), self.value)


def input_grad(model, images, questions, objective):
    """Gradient of ``objective`` with respect to the input pixels."""
    images = np.asarray(images, dtype=np.float64)
    with Tape() as tape:
        x = Tensor(images, requires_grad=True)
        loss = objective(model, x, questions)
    tape.backward(loss)
    return x.grad


# -- training ----------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: ToyVLM
    train_accuracy: float
    history: list


def accuracy_of(model, images, questions, labels, batch_size=256):
    if len(labels) == 0:
        raise ValueError("empty dataset")
    hits = 0
    for s in range(0, len(labels), batch_size):
        pred = model.predict(images[s:s + batch_size], questions[s:s + batch_size])
        hits += int(np.sum(pred == labels[s:s + batch_size]))
    return hits / len(labels)


def train(dataset, epochs, learning_rate, seed, config=None, batch_size=32,
          momentum=0.9, noise=0.0, model=None):
    """Minibatch SGD with seeded shuffling. Deterministic for a given seed.

    ``noise`` > 0 adds i.i.d. uniform pixel noise to each training image, with
    a per-image amplitude drawn from U[0, noise].
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model or ToyVLM(config)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    velocity = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    history = []
    model.set_trainable(True)
    try:
        for epoch in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for step, s in enumerate(range(0, n, batch_size)):
                idx = order[s:s + batch_size]
                images = dataset.images[idx]
                if noise > 0:
                    amp = rng.uniform(0.0, noise, size=(len(idx), 1, 1, 1))
                    images = np.clip(images + amp * rng.uniform(-1.0, 1.0, images.shape), 0.0, 1.0)
                try:
                    with Tape() as tape:
                        loss = model.lvlm_loss(images, dataset.questions[idx],
                                               dataset.labels[idx], reduction="mean")
                    tape.backward(loss)
                except FloatingPointError as exc:
                    raise TrainingDiverged(
                        f"non-finite value at epoch {epoch} step {step}: {exc}") from exc
                total += loss.item() * len(idx)
                for k, t in model.params.items():
                    v = velocity[k]
                    v *= momentum
                    v += t.grad
                    t.data = t.data - learning_rate * v
                    t.grad = None
                if not all(np.all(np.isfinite(t.data)) for t in model.params.values()):
                    raise TrainingDiverged(f"parameters became non-finite at epoch {epoch}")
            history.append(total / n)
            log.debug("epoch %d loss %.5f", epoch, history[-1])
    finally:
        model.set_trainable(False)
    acc = accuracy_of(model, dataset.images, dataset.questions, dataset.labels)
    return TrainResult(model, acc, history)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model, path, extra=None):
    meta = {"kind": "checkpoint", "format_version": CHECKPOINT_VERSION,
            "config": asdict(model.config), "extra": extra or {}}
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, model.param_arrays())


def load_checkpoint(path):
    meta, arrays = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    return ToyVLM(ModelConfig(**meta["config"]), arrays)
