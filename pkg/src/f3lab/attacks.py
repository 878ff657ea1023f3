"""White-box attacks on the toy model: PGD, C&W-style penalized ascent, and
EOT-PGD through a randomized purifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import CWObjective, LvlmObjective, input_grad
from .purify import project_linf, purify, rp_adjoint, sample_rngs

METHODS = ("pgd", "cw", "eot_pgd")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"
    steps: int = 20
    step_size: float = 2 / 255
    eps_inf: float = 8 / 255
    c: float = 0.005
    eot_samples: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.method in ("pgd", "eot_pgd") and self.eps_inf <= 0:
            raise ValueError("eps_inf must be positive")
        if self.c < 0:
            raise ValueError("c must be nonnegative")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def cw_default(cls, **kw):
        return cls(method="cw", **{"steps": 50, "step_size": 0.01, "c": 0.005, **kw})


def _project(x_adv, x, eps):
    return project_linf(np.clip(x_adv, 0.0, 1.0), x, eps)


def pgd_attack(model, images, questions, labels, cfg):
    """Sign-gradient ascent on the answer loss, projected to the l-inf ball."""
    x = np.asarray(images, dtype=np.float64)
    x_adv = x.copy()
    objective = LvlmObjective(labels)
    for _ in range(cfg.steps):
        g = input_grad(model, x_adv, questions, objective)
        x_adv = _project(x_adv + cfg.step_size * np.sign(g), x, cfg.eps_inf)
    return x_adv


def cw_attack(model, images, questions, labels, cfg):
    """Sign-gradient ascent on loss - c * ||x - x'||_2, clipped to [0, 1] only."""
    x = np.asarray(images, dtype=np.float64)
    x_adv = x.copy()
    objective = CWObjective(x, labels, cfg.c)
    for _ in range(cfg.steps):
        g = input_grad(model, x_adv, questions, objective)
        x_adv = np.clip(x_adv + cfg.step_size * np.sign(g), 0.0, 1.0)
    return x_adv


def eot_pgd_adaptive(model, purify_cfg, images, questions, labels, cfg, indices=None):
    """PGD against ``purify(.)``: every step averages the answer-loss gradient
    over ``cfg.eot_samples`` purifier draws.

    F3 purifiers are crossed with a straight-through rule: their noise is held
    constant and the final [0, 1] clip passes gradient only where it was
    inactive. Resize-and-pad is linear for fixed draws, so its exact adjoint
    is used. Randomness comes from per-sample streams keyed by
    (attack seed, sample index, step, draw).
    """
    x = np.asarray(images, dtype=np.float64)
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    x_adv = x.copy()
    objective = LvlmObjective(labels)
    for t in range(cfg.steps):
        acc = np.zeros_like(x)
        for e in range(cfg.eot_samples):
            rngs = sample_rngs(cfg.seed, idx, 1000 + t, e)
            res = purify(model, purify_cfg, x_adv, questions, rngs, x_clean=x)
            g = input_grad(model, res.purified, questions, objective)
            if purify_cfg.variant == "rp":
                acc += rp_adjoint(g, res.magnitude)
            else:
                acc += g * ((res.purified > 0.0) & (res.purified < 1.0))
        x_adv = _project(x_adv + cfg.step_size * np.sign(acc / cfg.eot_samples), x, cfg.eps_inf)
    return x_adv


def run_attack(model, cfg, images, questions, labels, purify_cfg=None, indices=None):
    if cfg.method == "pgd":
        return pgd_attack(model, images, questions, labels, cfg)
    if cfg.method == "cw":
        return cw_attack(model, images, questions, labels, cfg)
    if purify_cfg is None:
        raise ValueError("eot_pgd needs a purifier configuration")
    return eot_pgd_adaptive(model, purify_cfg, images, questions, labels, cfg, indices)


def attack_success_rate(answers_before, answers_after):
    """Fraction of samples whose answer changed."""
    a, b = np.asarray(answers_before), np.asarray(answers_after)
    if a.shape != b.shape:
        raise ValueError("answer lists differ in length")
    if a.size == 0:
        return 0.0
    return float(np.mean(a != b))
