"""Noise schedules, forward/reverse diffusion, training loss, sampling.

The denoiser predicts the injected noise (epsilon parameterization); the
reverse-step mean is derived from that prediction and the variance is the
fixed schedule posterior.  No noise is injected at the final step, which
makes the reverse pass exactly invertible given the true epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.05
SHORT_SCHEDULE_BETAS = tuple(np.geomspace(1e-4, 0.5, 4))


class ScheduleError(ValueError):
    pass


class SamplingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"sampling aborted at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas with derived cumulative products (1-indexed by t)."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError(f"betas must be a non-empty 1-D array, got shape {betas.shape}")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("all betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    @property
    def T(self) -> int:
        return self.betas.size

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        # t = 0 is the identity point of the forward marginal.
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0)."""
        self._check_t(t)
        ab_t = self.alpha_bar(t)
        ab_prev = self.alpha_bar(t - 1)
        return self.beta(t) * (1.0 - ab_prev) / (1.0 - ab_t)

    def _check_t(self, t: int):
        if not (1 <= t <= self.T):
            raise ScheduleError(f"step {t} outside [1, {self.T}]")


def make_linear_schedule(T: int, beta_min: float = DEFAULT_BETA_MIN,
                         beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if T == 1:
        return NoiseSchedule(betas=np.array([beta_min]))
    return NoiseSchedule(betas=np.linspace(beta_min, beta_max, T))


def make_short_schedule(betas=None) -> NoiseSchedule:
    """Few-step sampling schedule; defaults to a 4-entry geometric grid."""
    if betas is None:
        betas = SHORT_SCHEDULE_BETAS
    betas = np.asarray(betas, dtype=np.float64)
    if betas.size < 1:
        raise ScheduleError("short schedule needs at least one beta")
    return NoiseSchedule(betas=betas)


DEFAULT_TRAIN_STEPS = 100


def make_strided_schedule(n_steps: int, base: NoiseSchedule | None = None) -> NoiseSchedule:
    """Sub-sample a base schedule onto ``n_steps`` evenly spaced levels.

    The resulting schedule traverses the same cumulative noise range as the
    base (terminal alpha_bar included), so few-step sampling starts from the
    same Gaussian prior the base schedule was trained against.
    """
    if base is None:
        base = make_linear_schedule(DEFAULT_TRAIN_STEPS)
    if not (1 <= n_steps <= base.T):
        raise ScheduleError(f"n_steps must be in [1, {base.T}], got {n_steps}")
    grid = np.unique(np.round(np.linspace(1, base.T, n_steps)).astype(int))
    betas, prev = [], 1.0
    for t in grid:
        ab = base.alpha_bar(int(t))
        betas.append(1.0 - ab / prev)
        prev = ab
    return NoiseSchedule(betas=np.asarray(betas, dtype=np.float64))


def schedule_for_steps(steps: int) -> NoiseSchedule:
    """Sampling-schedule policy for a requested step count.

    4 steps uses the fixed geometric grid; other counts up to the training
    length use a strided sub-sample of the training schedule so the noise
    range matches; longer counts fall back to a linear schedule.
    """
    if steps == 4:
        return make_short_schedule()
    if steps <= DEFAULT_TRAIN_STEPS:
        return make_strided_schedule(steps)
    return make_linear_schedule(steps)


def _noise_like(x, rng: np.random.Generator):
    eps = rng.standard_normal(tuple(x.shape))
    if isinstance(x, torch.Tensor):
        return torch.from_numpy(eps).to(x.dtype)
    return eps


def forward_step(x_prev, t: int, schedule: NoiseSchedule, rng: np.random.Generator):
    """One forward transition: sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps."""
    beta = schedule.beta(t)
    eps = _noise_like(x_prev, rng)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * eps


def forward_marginal(x0, t: int, epsilon, schedule: NoiseSchedule):
    """Closed-form marginal: sqrt(abar_t) x_0 + sqrt(1-abar_t) eps."""
    if tuple(np.shape(x0)) != tuple(np.shape(epsilon)):
        raise ScheduleError(f"epsilon shape {np.shape(epsilon)} != x0 shape {np.shape(x0)}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * epsilon


def reverse_step(predicted_noise, x_t, t: int, schedule: NoiseSchedule,
                 rng: np.random.Generator | None):
    """One reverse transition from the epsilon parameterization.

    At t = 1 the return is exactly the posterior mean (no noise injected);
    passing rng=None zeroes the stochastic term at every step.
    """
    if tuple(np.shape(predicted_noise)) != tuple(np.shape(x_t)):
        raise ScheduleError(
            f"predicted noise shape {np.shape(predicted_noise)} != x_t shape {np.shape(x_t)}")
    beta = schedule.beta(t)
    ab = schedule.alpha_bar(t)
    mean = (x_t - beta / math.sqrt(1.0 - ab) * predicted_noise) / math.sqrt(schedule.alpha(t))
    if t == 1 or rng is None:
        return mean
    sigma = math.sqrt(schedule.posterior_variance(t))
    return mean + sigma * _noise_like(x_t, rng)


def training_loss(model, x0: torch.Tensor, reference: torch.Tensor, condition,
                  schedule: NoiseSchedule, rng: np.random.Generator) -> torch.Tensor:
    """Epsilon-prediction MSE at a uniformly sampled step."""
    if x0.shape[-1] % 256 != 0:
        raise ScheduleError(f"x0 length {x0.shape[-1]} not a multiple of 256")
    t = int(rng.integers(1, schedule.T + 1))
    eps = _noise_like(x0, rng)
    x_t = forward_marginal(x0, t, eps, schedule)
    pred = model(x_t, reference, condition, t, schedule)
    return torch.mean((pred - eps) ** 2)


def gaussian_kl(mean_q: float, var_q: float, mean_p: float, var_p: float) -> float:
    """KL(N(mean_q, var_q) || N(mean_p, var_p)) for scalar Gaussians."""
    if var_q <= 0 or var_p <= 0:
        raise ScheduleError("variances must be positive")
    return 0.5 * (var_q / var_p + (mean_q - mean_p) ** 2 / var_p
                  - 1.0 + math.log(var_p / var_q))


@dataclass
class ScalarGaussianProblem:
    """Per-step Gaussian pairs (q posterior vs model) of a 1-D toy diffusion."""

    q_means: list
    q_vars: list
    p_means: list
    p_vars: list

    def __post_init__(self):
        n = len(self.q_means)
        if not (len(self.q_vars) == len(self.p_means) == len(self.p_vars) == n):
            raise ScheduleError("per-step parameter lists must have equal length")


def vlb_oracle(problem: ScalarGaussianProblem) -> list:
    """Closed-form per-step KL terms of the variational bound (scalar case)."""
    return [gaussian_kl(mq, vq, mp, vp)
            for mq, vq, mp, vp in zip(problem.q_means, problem.q_vars,
                                      problem.p_means, problem.p_vars)]


def scalar_posterior(x0: float, x_t: float, t: int, schedule: NoiseSchedule):
    """Mean/variance of q(x_{t-1} | x_t, x_0) for scalar data."""
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    beta = schedule.beta(t)
    mean = (math.sqrt(ab_prev) * beta / (1 - ab_t) * x0
            + math.sqrt(schedule.alpha(t)) * (1 - ab_prev) / (1 - ab_t) * x_t)
    return mean, schedule.posterior_variance(t)


def sample(model, condition, reference: torch.Tensor, schedule: NoiseSchedule,
           rng: np.random.Generator, length: int | None = None) -> torch.Tensor:
    """Full reverse pass from Gaussian noise, conditioned on (reference, condition)."""
    if length is None:
        length = int(reference.shape[-1])
    if length % 256 != 0:
        raise ScheduleError(f"target length {length} not a multiple of 256")
    if int(reference.shape[-1]) != length:
        raise ScheduleError(f"reference length {reference.shape[-1]} != target length {length}")
    x = torch.from_numpy(rng.standard_normal(length)).to(reference.dtype)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            pred = model(x, reference, condition, t, schedule)
            if not torch.isfinite(pred).all():
                raise SamplingError(t, "non-finite model output")
            x = reverse_step(pred, x, t, schedule, rng)
    return x
