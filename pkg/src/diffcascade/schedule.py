"""Continuous-time variance-preserving noise schedule.

The forward process mixes clean data with Gaussian noise as
``z_t = alpha_t * x + sigma_t * eps`` for t in [0, 1], with
``alpha_t**2 + sigma_t**2 == 1`` everywhere.  Two parameterizations are
provided:

* ``cosine``: alpha_t = cos(pi*t/2) (default).
* ``linear-snr``: the linear-beta VP schedule in continuous time,
  log alpha_t = -(beta0*t + (beta1-beta0)*t**2/2)/2 with beta0=0.1,
  beta1=20; its log-SNR falls roughly linearly over most of [0, 1].

The choice of schedule is an implementation decision; endpoints are
clamped to [t_min, t_max] so sigma_t > 0 and alpha_t > 0 always hold.
"""

import dataclasses
import math

import numpy as np

_LINEAR_BETA0 = 0.1
_LINEAR_BETA1 = 20.0

KINDS = ("cosine", "linear-snr")


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "cosine"
    t_min: float = 1e-3
    t_max: float = 0.999
    num_sample_steps: int = 256

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not (0.0 < self.t_min < self.t_max <= 1.0):
            raise ValueError(f"require 0 < t_min < t_max <= 1, got [{self.t_min}, {self.t_max}]")
        if self.num_sample_steps < 1:
            raise ValueError("num_sample_steps must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def alpha_sigma(schedule: NoiseSchedule, t):
    """(alpha_t, sigma_t) with t clamped into [t_min, t_max].

    Accepts a scalar or an array; returns matching float64 values.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("t must be finite")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    tc = np.clip(t, schedule.t_min, schedule.t_max)
    if schedule.kind == "cosine":
        alpha = np.cos(0.5 * math.pi * tc)
        sigma = np.sin(0.5 * math.pi * tc)
    else:  # linear-snr
        log_alpha = -0.5 * (_LINEAR_BETA0 * tc + 0.5 * (_LINEAR_BETA1 - _LINEAR_BETA0) * tc ** 2)
        alpha = np.exp(log_alpha)
        sigma = np.sqrt(-np.expm1(2.0 * log_alpha))
    if t.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def snr(schedule: NoiseSchedule, t):
    """Signal-to-noise ratio alpha_t**2 / sigma_t**2."""
    alpha, sigma = alpha_sigma(schedule, t)
    return alpha ** 2 / sigma ** 2


def loss_weight(schedule: NoiseSchedule, t, kind: str = "clipped-snr", snr_clip: float = 5.0):
    """Per-timestep weight w_t for the squared-error objective.

    ``clipped-snr`` (default) returns min(SNR(t), snr_clip); with an x-hat
    predicting network this matches epsilon-space error up to the clip.
    ``constant`` returns 1.  Both are interpretations; the training recipe
    only says the error is weighted over t.
    """
    if kind == "constant":
        base = np.ones_like(np.asarray(t, dtype=np.float64))
        return float(base) if np.asarray(t).ndim == 0 else base
    if kind != "clipped-snr":
        raise ValueError(f"unknown loss-weight kind {kind!r}")
    value = np.minimum(snr(schedule, t), snr_clip)
    return float(value) if np.asarray(t).ndim == 0 else value


def discretize(schedule: NoiseSchedule, num_steps: int | None = None):
    """Strictly decreasing uniform grid from t_max to t_min, num_steps+1 points."""
    n = schedule.num_sample_steps if num_steps is None else int(num_steps)
    if n < 1:
        raise ValueError("num_steps must be >= 1")
    return np.linspace(schedule.t_max, schedule.t_min, n + 1)
