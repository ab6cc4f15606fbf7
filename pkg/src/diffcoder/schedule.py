"""Discrete-time noise schedules and the algebra of the noising process.

Everything here is framework-free: schedules are precomputed numpy tables,
and the field operations only use elementwise arithmetic with scalar
coefficients, so they work unchanged on numpy arrays and torch tensors.

Conventions: t = 0 is the clean-data end, t = T is (near-)pure noise.
``alpha_bar[t]`` is the cumulative signal-retention coefficient of the
marginal x_t = sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps, and the
log signal-to-noise ratio is lambda_t = log(alpha_bar / (1 - alpha_bar)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("sigmoid", "linear", "cosine")
PREDICTION_KINDS = ("epsilon", "x0", "v")

# Divisions by sqrt(alpha_bar) or sqrt(1 - alpha_bar) are refused outside
# this range instead of propagating huge or NaN values.
ALPHA_BAR_DIVISION_FLOOR = 1e-8


class ScheduleError(ValueError):
    """Invalid schedule construction or use."""


class DegenerateTimestepError(ScheduleError):
    """alpha_bar at this timestep is too close to 0 or 1 for the requested
    conversion to be well conditioned."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed schedule table for T discrete timesteps.

    alpha_bar has T+1 entries indexed t = 0..T, strictly decreasing, with
    alpha_bar[0] at the clean-data end. lambda_min / lambda_max bound the
    log-SNR range (used directly by the sigmoid kind).
    """

    kind: str
    T: int
    lambda_min: float
    lambda_max: float
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for a single timestep t in [0, T]."""
        t = _check_timestep(t, self.T, low=0)
        return float(self.alpha_bar[t])

    def snr(self, t: int) -> float:
        """Signal-to-noise ratio alpha_bar / (1 - alpha_bar) at timestep t."""
        ab = self.alpha_bar_at(t)
        return ab / (1.0 - ab)

    def log_snr(self, t: int) -> float:
        return math.log(self.snr(t))

    def beta(self, t: int) -> float:
        """One-step noise rate 1 - alpha_bar[t] / alpha_bar[t-1], t in [1, T]."""
        t = _check_timestep(t, self.T)
        return 1.0 - float(self.alpha_bar[t]) / float(self.alpha_bar[t - 1])


@dataclass(frozen=True)
class DenoiserPrediction:
    """A network output together with what it parameterizes.

    parameterization is one of 'epsilon' (the noise), 'x0' (the clean
    field) or 'v' (the velocity sqrt(ab)*eps - sqrt(1-ab)*x0).
    """

    values: object
    parameterization: str

    def __post_init__(self):
        if self.parameterization not in PREDICTION_KINDS:
            raise ScheduleError(
                f"unknown parameterization {self.parameterization!r}; "
                f"expected one of {PREDICTION_KINDS}"
            )


def make_schedule(
    kind: str,
    T: int,
    lambda_min: float = -15.0,
    lambda_max: float = 15.0,
) -> NoiseSchedule:
    """Build a schedule table of the given kind for T timesteps.

    sigmoid: lambda_t interpolates linearly from lambda_max at t=0 down to
    lambda_min at t=T and alpha_bar = sigmoid(lambda_t), so the high-SNR
    end sits at t=0. linear uses the classic linearly spaced one-step
    rates, cosine the squared-cosine profile with its usual rate cap.
    """
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not lambda_min < lambda_max:
        raise ScheduleError(f"need lambda_min < lambda_max, got [{lambda_min}, {lambda_max}]")

    t = np.arange(T + 1, dtype=np.float64)
    if kind == "sigmoid":
        lam = (1.0 - t / T) * lambda_max + (t / T) * lambda_min
        alpha_bar = 1.0 / (1.0 + np.exp(-lam))
    elif kind == "linear":
        betas = np.linspace(1e-4, 2e-2, T)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:  # cosine
        s = 0.008
        f = np.cos((t / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
        raw = f / f[0]
        betas = np.minimum(1.0 - raw[1:] / raw[:-1], 0.999)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    alpha_bar.setflags(write=False)
    return NoiseSchedule(kind=kind, T=int(T), lambda_min=float(lambda_min),
                         lambda_max=float(lambda_max), alpha_bar=alpha_bar)


def forward_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Draw x_t from the closed-form marginal given clean data and noise.

    Returns sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
    """
    _check_same_shape(x0, eps)
    t = _check_timestep(t, sched.T)
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def v_target(x0, eps, t: int, sched: NoiseSchedule):
    """Velocity regression target sqrt(alpha_bar)*eps - sqrt(1-alpha_bar)*x0."""
    _check_same_shape(x0, eps)
    t = _check_timestep(t, sched.T)
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * eps - math.sqrt(1.0 - ab) * x0


def convert_prediction(pred: DenoiserPrediction, x_t, t: int, sched: NoiseSchedule):
    """Convert any prediction parameterization into the pair (x0_hat, eps_hat).

    The three parameterizations of one (x0, eps) pair convert to the same
    result. Conversions that divide by sqrt(alpha_bar) or
    sqrt(1 - alpha_bar) raise DegenerateTimestepError when alpha_bar lies
    outside [1e-8, 1 - 1e-8].
    """
    _check_same_shape(pred.values, x_t)
    t = _check_timestep(t, sched.T)
    ab = float(sched.alpha_bar[t])
    a = math.sqrt(ab)
    b = math.sqrt(1.0 - ab)

    if pred.parameterization == "v":
        v = pred.values
        x0_hat = a * x_t - b * v
        eps_hat = a * v + b * x_t
    elif pred.parameterization == "epsilon":
        if ab < ALPHA_BAR_DIVISION_FLOOR:
            raise DegenerateTimestepError(
                f"alpha_bar={ab:.3e} at t={t} is too small to recover x0 from epsilon"
            )
        eps_hat = pred.values
        x0_hat = (x_t - b * eps_hat) / a
    else:  # x0
        if ab > 1.0 - ALPHA_BAR_DIVISION_FLOOR:
            raise DegenerateTimestepError(
                f"alpha_bar={ab:.10f} at t={t} is too close to 1 to recover epsilon from x0"
            )
        x0_hat = pred.values
        eps_hat = (x_t - a * x0_hat) / b
    return x0_hat, eps_hat


def loss_weight(sched: NoiseSchedule, t: int) -> float:
    """Truncated SNR weight max(SNR(t), 1) for the denoising loss."""
    t = _check_timestep(t, sched.T)
    return max(sched.snr(t), 1.0)


def _check_timestep(t, T: int, low: int = 1) -> int:
    if not isinstance(t, (int, np.integer)):
        raise ScheduleError(f"timestep must be an integer, got {type(t).__name__}")
    if not low <= t <= T:
        raise ScheduleError(f"timestep {t} out of range [{low}, {T}]")
    return int(t)


def _check_same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ScheduleError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
