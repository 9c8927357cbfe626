"""Denoising diffusion machinery: schedule, corruption, reverse step, training and sampling.

The denoiser predicts the clean sample directly; the reverse transition uses
the closed-form Gaussian posterior q(x_{t-1} | x_t, x0_hat) with fixed variance.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .errors import InvalidRange, NonFiniteLoss, ShapeMismatch, StepOutOfRange
from .model import (Batch, LossWeights, TempDiffRegNet, composite_loss, dct_basis, make_batch,
                    timestep_embedding)
from .nn import ops
from .nn.tensor import Tensor
from .synth import ObservationNoise

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedule and transitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by step; entry 0 is the clean state (beta 0, alpha_bar 1)."""
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t):
        t = np.asarray(t)
        if t.size == 0 or t.min() < 1 or t.max() > self.T:
            raise StepOutOfRange(f"step {t} outside [1, {self.T}]")
        return t

    def posterior_variance(self, t: int) -> float:
        return float(self.betas[t] * (1 - self.alpha_bar[t - 1]) / (1 - self.alpha_bar[t]))


def build_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule."""
    if int(T) != T or T < 1:
        raise InvalidRange(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    T = int(T)
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bar):
        a.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bar)


def _per_sample(values, t, ndim):
    """Gather schedule values at t and shape them to broadcast over a batch."""
    v = np.asarray(values[np.asarray(t)], float)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def forward_sample(x0, t, schedule: NoiseSchedule, noise):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; t may be per-sample along axis 0."""
    schedule.check_step(t)
    x0 = np.asarray(x0, float)
    noise = np.asarray(noise, float)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = _per_sample(schedule.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise


def forward_transition(x_prev, t: int, schedule: NoiseSchedule, noise):
    """Single step q(x_t | x_{t-1})."""
    schedule.check_step(t)
    b = schedule.betas[t]
    return math.sqrt(1 - b) * np.asarray(x_prev, float) + math.sqrt(b) * np.asarray(noise, float)


def posterior_coefficients(t: int, schedule: NoiseSchedule):
    """(coefficient on x0_hat, coefficient on x_t, posterior std) at step t."""
    schedule.check_step(t)
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    c0 = math.sqrt(ab_prev) * schedule.betas[t] / (1 - ab)
    ct = math.sqrt(schedule.alphas[t]) * (1 - ab_prev) / (1 - ab)
    return c0, ct, math.sqrt(max(schedule.posterior_variance(t), 0.0))


def posterior_step(x_t, x0_hat, t: int, schedule: NoiseSchedule, noise=None):
    """Draw x_{t-1} from q(x_{t-1} | x_t, x0_hat); the step to 0 returns the mean."""
    c0, ct, sigma = posterior_coefficients(t, schedule)
    mu = c0 * np.asarray(x0_hat, float) + ct * np.asarray(x_t, float)
    if t == 1 or noise is None:
        return mu
    return mu + sigma * np.asarray(noise, float)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *key)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    lr_final: float = 1e-4
    warmup: int = 50
    grad_clip: float = 1.0
    renoise: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    log_every: int = 100
    time_budget: Optional[float] = None
    # redraw observations around the labels at every step
    augment: Optional[ObservationNoise] = None
    # random smooth offset (mm rms) added to labels and observations alike
    jitter: float = 0.0
    jitter_modes: int = 4

    def lr_at(self, step: int) -> float:
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        frac = (step - self.warmup) / max(self.steps - self.warmup, 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + math.cos(math.pi * min(frac, 1.0)))


def train_step(batch: Batch, model: TempDiffRegNet, schedule: NoiseSchedule,
               weights: LossWeights, rng: np.random.Generator, optimizer: nn.Adam,
               renoise: bool = True, grad_clip: float = 0.0) -> dict:
    """One optimizer update on ``batch``; returns the loss breakdown."""
    B = batch.size
    gain = model.cfg.residual_gain
    x0 = model.to_displacement(batch.label, batch.proj)
    t = rng.integers(1, schedule.T + 1, size=B)
    x_t = forward_sample(x0, t, schedule, rng.normal(size=x0.shape))

    optimizer.zero_grad()
    y = model.encode(batch)
    x0_hat = model.decode(x_t, t, y)
    pairs = [(x0_hat, x0)]
    if renoise:
        t_prev = np.maximum(t - 1, 1)
        x_prev = forward_sample(x0_hat.data, t_prev, schedule, rng.normal(size=x0.shape))
        pairs.append((model.decode(x_prev, t_prev, y), x0))
    x_1 = forward_sample(x0, np.ones(B, int), schedule, rng.normal(size=x0.shape))
    final = model.decode(x_1, 1, y) if (weights.mse or weights.curv) else Tensor(x0)
    loss, terms = composite_loss(final, x0, weights, pairs, batch.proj, gain)
    if not np.isfinite(loss.data):
        exc = NonFiniteLoss(f"non-finite loss {terms}")
        exc.terms = terms
        raise exc
    loss.backward()
    terms["grad_norm"] = nn.clip_grad_norm(optimizer.params, grad_clip) if grad_clip else nn.grad_norm(optimizer.params)
    optimizer.step()
    return terms


def jitter_batch(batch: Batch, rms: float, modes: int, rng: np.random.Generator) -> None:
    """Shift labels and observations by one shared smooth offset per sample, in place.

    The offset spans the first ``modes`` cosine modes along the branch and is
    constant over frames; its expected per-point rms is ``rms`` millimetres.
    """
    B, F, P, _ = batch.label.shape
    basis = dct_basis(P, modes) * math.sqrt(P / modes)
    coef = rng.normal(size=(B, 2, modes)) * rms / math.sqrt(2)
    offset = np.einsum("bcm,mp->bpc", coef, basis) / batch.scale[:, None, None]
    batch.label = batch.label + offset[:, None]
    batch.obs = batch.obs + offset[:, None]


def train(model: TempDiffRegNet, samples: Sequence, schedule: NoiseSchedule,
          cfg: TrainConfig, callback: Optional[Callable] = None) -> list[dict]:
    """Mini-batch training; returns the per-step loss trace."""
    batch_all = make_batch(samples)
    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    trace = []
    start = time.perf_counter()
    n = batch_all.size
    for step in range(cfg.steps):
        rng = stream(cfg.seed, 1, step)
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        opt.lr = cfg.lr_at(step)
        batch = batch_all.subset(idx)
        if cfg.jitter > 0:
            jitter_batch(batch, cfg.jitter, cfg.jitter_modes, stream(cfg.seed, 5, step))
        if cfg.augment is not None:
            batch.obs, batch.occluded = cfg.augment.corrupt(batch.label, batch.scale,
                                                            stream(cfg.seed, 4, step))
        try:
            terms = train_step(batch, model, schedule, cfg.weights, rng, opt,
                               cfg.renoise, cfg.grad_clip)
        except NonFiniteLoss as exc:
            exc.step = step
            raise
        terms["step"] = step
        trace.append(terms)
        if callback is not None:
            callback(step, terms)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f (mse %.5f curv %.5f diff %.5f)", step, terms["total"],
                     terms["mse"], terms["curv"], terms["diff"])
        if cfg.time_budget is not None and time.perf_counter() - start > cfg.time_budget:
            log.warning("time budget reached after %d steps", step + 1)
            break
    return trace


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass
class Registration:
    """Sampler output for one sample."""
    shape_mm: np.ndarray       # (F, P, 2) detector millimetres
    shape_norm: np.ndarray     # (F, P, 2) normalized
    displacement: np.ndarray   # (F, P, 2) diffusion variable
    trajectory: Optional[list] = None  # x_t for t = T..0


def _sample_batch(batch: Batch, model: TempDiffRegNet, schedule: NoiseSchedule,
                  keys: Sequence[tuple], seed: int, keep_trajectory: bool = False):
    check_compatible(model, schedule)
    if batch.obs.shape[1:3] != (model.cfg.frames, model.cfg.points):
        raise ShapeMismatch(f"batch has (F, P) = {batch.obs.shape[1:3]}, model expects "
                            f"({model.cfg.frames}, {model.cfg.points})")
    shape = (model.cfg.frames, model.cfg.points, 2)
    noise = np.stack([stream(seed, *k).normal(size=(schedule.T + 1, *shape)) for k in keys])
    with nn.no_grad():
        y = model.encode(batch)
        x = noise[:, 0]
        traj = [x.copy()] if keep_trajectory else None
        for t in range(schedule.T, 0, -1):
            x0_hat = model.decode(x, t, y, blend=t > 1).data
            x = posterior_step(x, x0_hat, t, schedule, noise[:, t] if t > 1 else None)
            if keep_trajectory:
                traj.append(x.copy())
    return x, traj


def check_compatible(model: TempDiffRegNet, schedule: NoiseSchedule) -> None:
    """The decoder's skip weights are tied to the schedule it was trained with."""
    ab = model.cfg.alpha_bar()
    if len(ab) != len(schedule.alpha_bar) or not np.allclose(ab, schedule.alpha_bar,
                                                             rtol=1e-12, atol=0):
        raise ShapeMismatch("noise schedule does not match the model configuration")


def sample_key(sample) -> tuple:
    return (int(sample.case_id), int(sample.branch_id), int(getattr(sample, "window", 0)))


def sample_inference(sample, model: TempDiffRegNet, schedule: NoiseSchedule, seed: int = 0,
                     keep_trajectory: bool = True) -> Registration:
    """Ancestral sampling from pure noise for one multi-frame sample."""
    batch = make_batch([sample])
    x, traj = _sample_batch(batch, model, schedule, [sample_key(sample)], seed, keep_trajectory)
    norm = model.to_shape(x[0], batch.proj[0])
    return Registration(sample.denormalize(norm), norm, x[0],
                        [s[0] for s in traj] if traj is not None else None)


def sample_many(samples: Sequence, model: TempDiffRegNet, schedule: NoiseSchedule,
                seed: int = 0, batch_size: int = 64) -> list[Registration]:
    """Batched equivalent of calling :func:`sample_inference` on each sample."""
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = list(samples[i:i + batch_size])
        batch = make_batch(chunk)
        x, _ = _sample_batch(batch, model, schedule, [sample_key(s) for s in chunk], seed)
        for s, xi, proj in zip(chunk, x, batch.proj):
            norm = model.to_shape(xi, proj)
            out.append(Registration(s.denormalize(norm), norm, xi))
    return out


@dataclass
class Uncertainty:
    mean: np.ndarray     # (F, P, 2) mm
    std: np.ndarray      # (F, P) mm, root mean squared distance to the mean
    samples: np.ndarray  # (n, F, P, 2) mm


def pointwise_spread(samples: np.ndarray):
    """Mean curve and per-point spread sqrt(mean_k |s_k - mean|^2)."""
    samples = np.asarray(samples, float)
    mean = samples.mean(axis=0)
    std = np.sqrt(((samples - mean) ** 2).sum(axis=-1).mean(axis=0))
    return mean, std


def sample_uncertainty(sample, model: TempDiffRegNet, schedule: NoiseSchedule,
                       n_samples: int = 25, seed: int = 0) -> Uncertainty:
    """Repeat sampling ``n_samples`` times under the same condition."""
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    batch = make_batch([sample] * n_samples)
    keys = [sample_key(sample) + (k,) for k in range(n_samples)]
    x, _ = _sample_batch(batch, model, schedule, keys, seed)
    shapes = np.stack([sample.denormalize(model.to_shape(xi, batch.proj[0])) for xi in x])
    mean, std = pointwise_spread(shapes)
    return Uncertainty(mean, std, shapes)


# ---------------------------------------------------------------------------
# Unconditional toy variant
# ---------------------------------------------------------------------------

def eight_gaussians(n: int, rng: np.random.Generator, radius: float = 2.0, std: float = 0.1):
    """Samples and component labels from a ring of eight isotropic Gaussians."""
    centers = mixture_centers(radius)
    labels = rng.integers(0, 8, size=n)
    return centers[labels] + std * rng.normal(size=(n, 2)), labels


def mixture_centers(radius: float = 2.0) -> np.ndarray:
    ang = 2 * np.pi * np.arange(8) / 8
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


class ToyDenoiser(nn.Module):
    """x0-predicting MLP over [x_t, step embedding] for 2D points."""

    def __init__(self, T: int, hidden: int = 128, time_dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.T, self.time_dim = T, time_dim
        self.mlp = nn.MLP([2 + time_dim, hidden, hidden, hidden, 2], rng)

    def forward(self, x_t, t):
        t = np.broadcast_to(np.asarray(t, np.int64), (len(x_t),))
        if t.min() < 1 or t.max() > self.T:
            raise StepOutOfRange(f"step outside [1, {self.T}]")
        return self.mlp(ops.concat([nn.Tensor(x_t), Tensor(timestep_embedding(t, self.time_dim))], -1))


def train_toy(data: np.ndarray, schedule: NoiseSchedule, steps: int = 3000, batch_size: int = 256,
              lr: float = 2e-3, seed: int = 0) -> tuple[ToyDenoiser, list]:
    model = ToyDenoiser(schedule.T, seed=seed)
    opt = nn.Adam(model.parameters(), lr=lr)
    trace = []
    for step in range(steps):
        rng = stream(seed, 2, step)
        x0 = data[rng.integers(0, len(data), size=batch_size)]
        t = rng.integers(1, schedule.T + 1, size=batch_size)
        x_t = forward_sample(x0, t, schedule, rng.normal(size=x0.shape))
        opt.zero_grad()
        loss = ((model(x_t, t) - x0) ** 2).sum(axis=-1).mean()
        loss.backward()
        opt.lr = lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / steps)))
        opt.step()
        trace.append(float(loss.data))
    return model, trace


def sample_toy(model: ToyDenoiser, schedule: NoiseSchedule, n: int, seed: int = 0) -> np.ndarray:
    rng = stream(seed, 3)
    x = rng.normal(size=(n, 2))
    with nn.no_grad():
        for t in range(schedule.T, 0, -1):
            x0_hat = model(x, t).data
            x = posterior_step(x, x0_hat, t, schedule, rng.normal(size=x.shape) if t > 1 else None)
    return x
