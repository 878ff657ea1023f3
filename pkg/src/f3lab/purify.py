"""Attention-guided purification by deliberately adding noise.

All purifiers are batched: ``x_adv`` is (B, S, S, C) and ``rngs`` holds one
``numpy.random.Generator`` per sample, so a sample's result depends only on
its own inputs and its own random stream.

Variants:

* ``v1``      random uniform noise (the reference image itself)
* ``v2``      one random-magnitude step along ``-sign(g)``
* ``v3``      per-pixel magnitude from the normalized gradient, along ``-sign(g)``
* ``v3_multistep``  K small v3 steps inside a total l-inf budget
* ``oracle``  a v2-style step toward the true clean attention (analysis only)
* ``rp``      random resize-and-pad, the classical comparison defense

``g`` is the gradient, with respect to the input, of the distance between
the input's cross-modal attention and a fixed target attention.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .model import Objective, input_grad

VARIANTS = ("v1", "v2", "v3", "v3_multistep", "oracle", "rp")
DISTANCES = ("mse", "kl")
KL_SMOOTHING = 1e-9
_DEGENERATE = 1e-12


@dataclass(frozen=True)
class PurifyConfig:
    variant: str = "v3"
    alpha_inf: float = 16 / 255
    beta_inf: float = 32 / 255
    gamma_inf: float = 32 / 255
    K: int = 1
    eps_inf_total: float = 16 / 255
    distance: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        if min(self.alpha_inf, self.beta_inf, self.gamma_inf, self.eps_inf_total) < 0:
            raise ValueError("noise bounds must be nonnegative")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    def to_dict(self):
        return asdict(self)

    def label(self):
        v = self.variant
        a, b = _fmt255(self.alpha_inf), _fmt255(self.beta_inf)
        suffix = "" if self.distance == "mse" else f",{self.distance}"
        if v == "v1":
            return f"v1(a={a})"
        if v == "oracle":
            return f"oracle(g={_fmt255(self.gamma_inf)}{suffix})"
        if v == "rp":
            return "rp"
        if v == "v3_multistep":
            return (f"v3_multistep(K={self.K},b={b},a={a},"
                    f"e={_fmt255(self.eps_inf_total)}{suffix})")
        return f"{v}(a={a},b={b}{suffix})"


def _fmt255(v):
    n = v * 255
    return f"{round(n)}/255" if abs(n - round(n)) < 1e-9 else f"{n:.4f}/255"


@dataclass
class PurifyResult:
    purified: np.ndarray
    reference: np.ndarray | None = None
    grad: np.ndarray | None = None
    magnitude: np.ndarray | None = None       # scalar draws (v2/oracle) or scale maps (v3)
    l1: np.ndarray = field(default=None)      # per-sample sum |x_p - x'|
    linf: np.ndarray = field(default=None)    # per-sample max |x_p - x'|

    @property
    def l1_mean(self):
        """Per-sample mean absolute perturbation (l1 divided by pixel count)."""
        return self.l1 / np.prod(self.purified.shape[1:])


def project_linf(x, center, eps):
    """Project onto the l-inf ball of radius ``eps`` around ``center`` so that
    ``abs(x - center) <= eps`` holds exactly in floating point. Elements
    already inside are left untouched."""
    x = np.array(x, dtype=np.float64)
    center = np.broadcast_to(np.asarray(center, dtype=np.float64), x.shape)
    over = np.abs(x - center) > eps
    if np.any(over):
        c = center[over]
        x[over] = c + np.clip(x[over] - c, -eps, eps)
        over = np.abs(x - center) > eps
        while np.any(over):
            x[over] = np.nextafter(x[over], center[over])
            over = np.abs(x - center) > eps
    return x


def perturbation_norms(x_from, x_to):
    d = np.abs(np.asarray(x_to) - np.asarray(x_from)).reshape(len(x_from), -1)
    return d.sum(axis=1), d.max(axis=1)


def _finish(x_adv, purified, **kw):
    l1, linf = perturbation_norms(x_adv, purified)
    return PurifyResult(purified, l1=l1, linf=linf, **kw)


def sample_rngs(seed, indices, *extra):
    """Independent per-sample generators keyed by (seed, sample index, extra...)."""
    return [np.random.default_rng([int(seed), int(i), *map(int, extra)]) for i in indices]


# -- attention distances -------------------------------------------------------

def _normalize_rows(a):
    """Normalize over the visual-token axis, smooth by KL_SMOOTHING, renormalize."""
    p = ad.div(a, ad.sum_(a, axis=-1, keepdims=True))
    p = ad.add(p, KL_SMOOTHING)
    return ad.div(p, ad.sum_(p, axis=-1, keepdims=True))


def attention_distance(reference, other, kind="mse"):
    """Distance between attention tensors shaped (..., L, H, M).

    ``mse`` averages squared differences over all L*H*M entries. ``kl``
    averages, over the (L, H) rows, KL(reference row || other row) of the
    rows normalized over M. Returns one value per leading index (a Tensor
    when either input is a Tensor, else an array or float).
    """
    as_array = not isinstance(reference, ad.Tensor) and not isinstance(other, ad.Tensor)
    ref, oth = ad.as_tensor(reference), ad.as_tensor(other)
    if ref.shape != oth.shape:
        raise ValueError(f"attention shapes differ: {ref.shape} vs {oth.shape}")
    if kind == "mse":
        d = ad.sub(oth, ref)
        out = ad.mean(ad.mul(d, d), axis=(-3, -2, -1))
    elif kind == "kl":
        if np.any(ref.data.sum(axis=-1) <= 0) or np.any(oth.data.sum(axis=-1) <= 0):
            raise ValueError("kl distance needs rows with positive mass")
        p, q = _normalize_rows(ref), _normalize_rows(oth)
        out = ad.mean(ad.sum_(ad.kl_terms(p, q), axis=-1), axis=(-2, -1))
    else:
        raise ValueError(f"unknown distance {kind!r}")
    if as_array:
        return out.data if out.data.ndim else float(out.data)
    return out


class AttentionObjective(Objective):
    """Summed distance from each image's attention to a fixed target."""

    def __init__(self, target, kind="mse"):
        self.target = np.asarray(target, dtype=np.float64)
        self.kind = kind

    def __call__(self, model, images, questions):
        attn = model.forward(images, questions).attention
        return ad.sum_(attention_distance(self.target, attn, self.kind))


# -- building blocks -------------------------------------------------------------

def random_perturb(x_adv, alpha_inf, rngs):
    """x_R = clip(x' - a), a ~ U[-alpha_inf, alpha_inf] i.i.d. per pixel."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    noise = np.stack([r.uniform(-alpha_inf, alpha_inf, size=x_adv.shape[1:]) for r in rngs])
    return project_linf(np.clip(x_adv - noise, 0.0, 1.0), x_adv, alpha_inf)


def f3_grad(model, x_adv, questions, alpha_inf, rngs, distance="mse"):
    """Gradient of dist(A(x'), A(x_R)) w.r.t. x'; A(x_R) is a constant target."""
    x_ref = random_perturb(x_adv, alpha_inf, rngs)
    target = model.attention(x_ref, questions)
    g = input_grad(model, x_adv, questions, AttentionObjective(target, distance))
    return g, x_ref


def f3_scale(g, beta_inf):
    """Per-pixel magnitude beta_inf * clip(g_norm / mean(g_norm), 0, 1).

    ``g`` is one sample's gradient, or a batch with the sample on axis 0;
    min, max and mean are taken over each sample's whole gradient.
    """
    g = np.asarray(g, dtype=np.float64)
    single = g.ndim <= 1 or g.ndim == 3
    gb = g.reshape(1, -1) if single else g.reshape(len(g), -1)
    out = np.empty_like(gb)
    for i, row in enumerate(gb):
        lo, hi = row.min(), row.max()
        if hi - lo < _DEGENERATE:
            out[i] = 1.0
            continue
        norm = (row - lo) / (hi - lo)
        avg = norm.mean()
        if avg < _DEGENERATE:
            out[i] = 0.0
            continue
        out[i] = np.maximum(0.0, np.minimum(norm / avg, 1.0))
    return (beta_inf * out).reshape(g.shape)


def _uniform_scalars(rngs, bound):
    return np.array([r.uniform(0.0, bound) for r in rngs])


def _bcast(v, like):
    return np.asarray(v).reshape((-1,) + (1,) * (like.ndim - 1))


# -- purifiers ------------------------------------------------------------------

def f3_v1(x_adv, alpha_inf, rngs):
    x_ref = random_perturb(x_adv, alpha_inf, rngs)
    return _finish(x_adv, x_ref, reference=x_ref)


def oracle_purify(model, x_adv, x_clean, questions, gamma_inf, rngs, distance="mse"):
    """One sign step toward the clean image's attention, gamma ~ U[0, gamma_inf]."""
    target = model.attention(x_clean, questions)
    g = input_grad(model, x_adv, questions, AttentionObjective(target, distance))
    gamma = _uniform_scalars(rngs, gamma_inf)
    x_p = np.clip(x_adv - _bcast(gamma, x_adv) * np.sign(g), 0.0, 1.0)
    return _finish(x_adv, project_linf(x_p, x_adv, gamma_inf), grad=g, magnitude=gamma)


def f3_v2(model, x_adv, questions, alpha_inf, beta_inf, rngs, distance="mse"):
    g, x_ref = f3_grad(model, x_adv, questions, alpha_inf, rngs, distance)
    beta = _uniform_scalars(rngs, beta_inf)
    x_p = np.clip(x_adv - _bcast(beta, x_adv) * np.sign(g), 0.0, 1.0)
    x_p = project_linf(x_p, x_adv, beta_inf)
    return _finish(x_adv, x_p, reference=x_ref, grad=g, magnitude=beta)


def f3_v3(model, x_adv, questions, alpha_inf, beta_inf, rngs, distance="mse"):
    g, x_ref = f3_grad(model, x_adv, questions, alpha_inf, rngs, distance)
    mag = f3_scale(g, beta_inf)
    x_p = project_linf(np.clip(x_adv - mag * np.sign(g), 0.0, 1.0), x_adv, beta_inf)
    return _finish(x_adv, x_p, reference=x_ref, grad=g, magnitude=mag)


def f3_multistep(model, x_adv, questions, alpha_inf, beta_inf_step, K, eps_inf_total,
                 rngs, distance="mse"):
    """K v3 steps, each re-drawing the reference from the current iterate and
    projecting back into the eps_inf_total ball around x'."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = x_adv
    step = None
    for _ in range(K):
        step = f3_v3(model, x, questions, alpha_inf, beta_inf_step, rngs, distance)
        x = project_linf(step.purified, x_adv, eps_inf_total)
    return _finish(x_adv, x, reference=step.reference, grad=step.grad,
                   magnitude=step.magnitude)


def purify(model, cfg, x_adv, questions, rngs, x_clean=None):
    """Dispatch on ``cfg.variant``."""
    v = cfg.variant
    if v == "v1":
        return f3_v1(x_adv, cfg.alpha_inf, rngs)
    if v == "v2":
        return f3_v2(model, x_adv, questions, cfg.alpha_inf, cfg.beta_inf, rngs, cfg.distance)
    if v == "v3":
        return f3_v3(model, x_adv, questions, cfg.alpha_inf, cfg.beta_inf, rngs, cfg.distance)
    if v == "v3_multistep":
        return f3_multistep(model, x_adv, questions, cfg.alpha_inf, cfg.beta_inf, cfg.K,
                            cfg.eps_inf_total, rngs, cfg.distance)
    if v == "rp":
        draws = rp_draws(rngs, np.shape(x_adv)[1])
        out = _finish(x_adv, rp_apply(x_adv, draws))
        out.magnitude = draws
        return out
    if v == "oracle":
        if x_clean is None:
            raise ValueError("oracle purification needs the clean images")
        return oracle_purify(model, x_adv, x_clean, questions, cfg.gamma_inf, rngs,
                             cfg.distance)
    raise ValueError(f"unknown variant {v!r}")


# -- classical baseline -------------------------------------------------------------

def bilinear_matrix(n_out, n_in, scale=None):
    """(n_out, n_in) 1-d bilinear interpolation weights, half-pixel centers.

    ``scale`` is the continuous resize factor (default ``n_out / n_in``);
    output pixel i samples input position (i + 0.5) / scale - 0.5.
    """
    scale = n_out / n_in if scale is None else scale
    pos = np.clip((np.arange(n_out) + 0.5) / scale - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    np.add.at(w, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(w, (np.arange(n_out), hi), frac)
    return w


@dataclass(frozen=True)
class RPDraw:
    scale: float    # continuous resize factor in [0.8, 1.0]
    size: int       # resized side length, round(scale * image size)
    oy: int
    ox: int


def rp_draws(rngs, image_size, scale=None, offset=None):
    draws = []
    for r in rngs:
        s = r.uniform(0.8, 1.0) if scale is None else scale
        new = max(1, int(round(s * image_size)))
        room = image_size - new
        if offset is None:
            oy, ox = int(r.integers(0, room + 1)), int(r.integers(0, room + 1))
        else:
            oy, ox = offset
        draws.append(RPDraw(float(s), new, oy, ox))
    return draws


def rp_apply(x, draws):
    """Resize each image to ``draw.size`` and paste it at the drawn offset on a
    zero canvas. The map is linear in ``x``; see ``rp_adjoint``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    n = x.shape[1]
    for i, d in enumerate(draws):
        w = bilinear_matrix(d.size, n, d.scale)
        out[i, d.oy:d.oy + d.size, d.ox:d.ox + d.size] = np.einsum("ah,hwc,bw->abc", w, x[i], w)
    return out


def rp_adjoint(g, draws):
    g = np.asarray(g, dtype=np.float64)
    out = np.zeros_like(g)
    n = g.shape[1]
    for i, d in enumerate(draws):
        w = bilinear_matrix(d.size, n, d.scale)
        crop = g[i, d.oy:d.oy + d.size, d.ox:d.ox + d.size]
        out[i] = np.einsum("ah,abc,bw->hwc", w, crop, w)
    return out


def rp_baseline(x, rngs, scale=None, offset=None):
    """Random resize (scale ~ U[0.8, 1.0]) and zero padding back to full size.

    ``scale`` and ``offset`` pin the random draws (used for testing).
    """
    x = np.asarray(x, dtype=np.float64)
    return rp_apply(x, rp_draws(rngs, x.shape[1], scale, offset))
