"""Training loops: standard noise-prediction training for the backbone, and
distillation training for the feedback state against the frozen backbone.

The feedback trainer noises each clean image to a uniformly drawn step t,
runs the feedback-augmented model there, and distills it toward the frozen
backbone evaluated on the same trajectory re-noised to floor(t/2). Gradients
are applied only to the feedback parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, mse
from .data import Dataset, batches
from .dit import DiT
from .feedback import FeedbackState, ilf_forward
from .optim import Adam
from .schedule import NoiseSchedule, ddim_step, noise_sample

TPOST_TRAINING_MODES = ("half_t", "t")


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    iterations: int = 2000
    w_recon: float = 1.0
    w_distill: float = 1.0
    seed: int = 0
    tpost_mode_training: str = "half_t"
    teacher_steps: int = 1
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.w_recon < 0 or self.w_distill < 0:
            raise ValueError("loss weights must be >= 0")
        if self.w_recon == 0 and self.w_distill == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.tpost_mode_training not in TPOST_TRAINING_MODES:
            raise ValueError(f"unknown tpost_mode_training {self.tpost_mode_training!r}")
        if self.teacher_steps < 1:
            raise ValueError("teacher_steps must be >= 1")


def _teacher_prediction(model: DiT, ns: NoiseSchedule, x0: np.ndarray,
                        x_t: np.ndarray, t: int, t_half: int, eps: np.ndarray,
                        label, teacher_steps: int) -> Tensor:
    if teacher_steps == 1:
        # fast approximation: re-noise the same trajectory directly to t/2
        x_half = noise_sample(x0, t_half, eps, ns)
        return model.forward(x_half, t_half, label)
    # expensive variant: chain DDIM transitions from t down to t/2
    taus = np.linspace(t, t_half, teacher_steps + 1)
    x = x_t
    for j in range(teacher_steps):
        pred = model.forward(x, float(taus[j]), label)
        x = ddim_step(x, pred.data, float(taus[j]), float(taus[j + 1]), ns)
    return model.forward(x, float(taus[-1]), label)


def feedback_train_step(model: DiT, fs: FeedbackState, ns: NoiseSchedule,
                        images: np.ndarray, labels: np.ndarray,
                        cfg: TrainConfig, rng: np.random.Generator,
                        opt: Adam) -> tuple:
    """One batch of feedback training. Returns (recon, distill, total) floats."""
    if not model.frozen:
        raise RuntimeError("backbone must be frozen before feedback training")
    T = model.cfg.T
    recon_terms, distill_terms = [], []
    for x0, label in zip(images, labels):
        t = int(rng.integers(1, T + 1))
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = noise_sample(x0, t, eps, ns)
        t_half = t // 2
        teacher = _teacher_prediction(model, ns, x0, x_t, t, t_half, eps,
                                      int(label), cfg.teacher_steps)
        t_post = float(t_half) if cfg.tpost_mode_training == "half_t" else float(t)
        pred, _ = ilf_forward(model, fs, x_t, t, t_post, int(label))
        recon_terms.append(mse(pred, Tensor(eps)))
        distill_terms.append(mse(pred, teacher))

    inv_b = 1.0 / len(recon_terms)
    recon = _mean_terms(recon_terms) * inv_b
    distill = _mean_terms(distill_terms) * inv_b
    loss = recon * cfg.w_recon + distill * cfg.w_distill
    if not loss.is_finite():
        raise FloatingPointError("non-finite feedback training loss")
    opt.zero_grad()
    backward(loss)
    opt.step()
    return recon.item(), distill.item(), loss.item()


def _mean_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def train_feedback(model: DiT, fs: FeedbackState, ns: NoiseSchedule,
                   dataset: Dataset, cfg: TrainConfig, on_checkpoint=None) -> list:
    """Run feedback training; returns the loss curve as (recon, distill, total)
    rows, one per iteration."""
    if dataset.images.shape[0] == 0:
        raise ValueError("empty dataset")
    opt = Adam(fs.params(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 17])
    batch_rng = np.random.default_rng([cfg.seed, 31])
    curve = []
    stream = batches(dataset, cfg.batch_size, batch_rng)
    for step in range(cfg.iterations):
        images, labels = next(stream)
        curve.append(feedback_train_step(model, fs, ns, images, labels, cfg, rng, opt))
        if on_checkpoint and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
            on_checkpoint(step + 1)
    return curve


@dataclass
class BackboneTrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    iterations: int = 3000
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def train_backbone(model: DiT, ns: NoiseSchedule, dataset: Dataset,
                   cfg: BackboneTrainConfig, on_checkpoint=None) -> list:
    """Standard noise-prediction training of the backbone itself."""
    if dataset.images.shape[0] == 0:
        raise ValueError("empty dataset")
    model.set_trainable(True)
    opt = Adam(model.params(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 17])
    batch_rng = np.random.default_rng([cfg.seed, 31])
    T = model.cfg.T
    curve = []
    stream = batches(dataset, cfg.batch_size, batch_rng)
    for step in range(cfg.iterations):
        images, labels = next(stream)
        terms = []
        for x0, label in zip(images, labels):
            t = int(rng.integers(1, T + 1))
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            x_t = noise_sample(x0, t, eps, ns)
            pred = model.forward(x_t, t, int(label))
            terms.append(mse(pred, Tensor(eps)))
        loss = _mean_terms(terms) * (1.0 / len(terms))
        if not loss.is_finite():
            raise FloatingPointError("non-finite backbone training loss")
        opt.zero_grad()
        backward(loss)
        opt.step()
        curve.append(loss.item())
        if on_checkpoint and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
            on_checkpoint(step + 1)
    return curve
