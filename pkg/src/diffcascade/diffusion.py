"""Forward noising, the denoising training objective, and the x-hat/epsilon
prediction interconversion."""

import dataclasses

import numpy as np

from .nn import autograd as ag
from .schedule import NoiseSchedule, alpha_sigma, loss_weight


@dataclasses.dataclass
class NoisySample:
    """One forward-process draw: z_t = alpha_t * x + sigma_t * epsilon."""
    z_t: np.ndarray
    t: float
    epsilon: np.ndarray
    x: np.ndarray


@dataclasses.dataclass
class ModelPrediction:
    """Denoiser output in both parameterizations at one timestep."""
    x_hat: np.ndarray
    eps_hat: np.ndarray
    t: float


def forward_noise(x, t, epsilon, schedule: NoiseSchedule) -> NoisySample:
    """Noise clean data to time t with the given standard-normal draw."""
    x = np.asarray(x)
    epsilon = np.asarray(epsilon)
    if x.shape != epsilon.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs epsilon {epsilon.shape}")
    alpha, sigma = alpha_sigma(schedule, t)
    z_t = (alpha * x + sigma * epsilon).astype(x.dtype, copy=False)
    return NoisySample(z_t=z_t, t=float(np.asarray(t).reshape(())), epsilon=epsilon, x=x)


def x_to_eps(z_t, x_hat, t, schedule: NoiseSchedule):
    """eps_hat = (z_t - alpha_t * x_hat) / sigma_t."""
    alpha, sigma = alpha_sigma(schedule, t)
    return (np.asarray(z_t) - alpha * np.asarray(x_hat)) / sigma


def eps_to_x(z_t, eps_hat, t, schedule: NoiseSchedule, clip: bool = False):
    """x_hat = (z_t - sigma_t * eps_hat) / alpha_t, optionally clipped to [-1, 1].

    Clipping is a sampling-path option only; the loss path never clips.
    """
    alpha, sigma = alpha_sigma(schedule, t)
    x_hat = (np.asarray(z_t) - sigma * np.asarray(eps_hat)) / alpha
    if clip:
        x_hat = np.clip(x_hat, -1.0, 1.0)
    return x_hat


def denoising_loss(model, batch, schedule: NoiseSchedule, rng,
                   weight_kind: str = "clipped-snr", snr_clip: float = 5.0):
    """Monte-Carlo denoising objective over one batch.

    ``batch`` is a non-empty list of (x, cond) pairs with x in [-1, 1] of a
    common shape (C, H, W).  Per item, t ~ U[t_min, t_max] and eps ~ N(0, I)
    are drawn from ``rng``; the loss is the batch mean of
    w_t * mean_pixels((x_hat - x)**2).  Returns an autograd scalar (call
    ``.item()`` for the float); gradients flow into the model parameters.
    Deterministic given the rng state.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    xs = np.stack([np.asarray(x) for x, _ in batch]).astype(np.float64)
    conds = [c for _, c in batch]
    bsz = xs.shape[0]

    t = rng.uniform(schedule.t_min, schedule.t_max, size=bsz)
    eps = rng.standard_normal(xs.shape)
    alpha, sigma = alpha_sigma(schedule, t)
    shape1 = (bsz,) + (1,) * (xs.ndim - 1)
    z = alpha.reshape(shape1) * xs + sigma.reshape(shape1) * eps
    w = loss_weight(schedule, t, kind=weight_kind, snr_clip=snr_clip)

    cond_batch = _stack_conds(conds)
    x_hat = model(z, t, cond_batch)
    if not isinstance(x_hat, ag.Tensor):
        x_hat = ag.as_tensor(x_hat)
    err = (x_hat - xs.astype(x_hat.dtype)) ** 2
    per_item = err.mean(axis=tuple(range(1, xs.ndim)))
    return (per_item * w.astype(x_hat.dtype)).mean()


class _CondStack:
    __slots__ = ("token_embeddings", "mask", "pooled")

    def __init__(self, token_embeddings, mask, pooled):
        self.token_embeddings = token_embeddings
        self.mask = mask
        self.pooled = pooled


def _stack_conds(conds):
    """Stack per-item TextConditioning objects into batched arrays."""
    return _CondStack(
        token_embeddings=np.stack([np.asarray(c.token_embeddings) for c in conds]),
        mask=np.stack([np.asarray(c.mask) for c in conds]),
        pooled=np.stack([np.asarray(c.pooled) for c in conds]),
    )
