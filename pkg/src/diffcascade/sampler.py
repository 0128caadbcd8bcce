"""Classifier-free guidance and ancestral reverse-diffusion sampling.

The denoiser predicts x-hat; guidance happens in epsilon space: both the
conditional and unconditional predictions are converted to epsilon,
combined as ``w * eps_cond + (1 - w) * eps_uncond``, converted back, and
one ancestral step (posterior mean plus lower-bound-variance noise) moves
the state down the discretized time grid.  w = 1 disables guidance.
"""

import dataclasses

import numpy as np

from .diffusion import eps_to_x, x_to_eps
from .errors import NumericError
from .nn import autograd as ag
from .schedule import NoiseSchedule, alpha_sigma, discretize


@dataclasses.dataclass(frozen=True)
class GuidanceConfig:
    w: float = 1.0                 # guidance weight; 1 disables guidance
    clip_xhat: bool = True
    num_steps: int = 256

    def __post_init__(self):
        if self.w < 0.0:
            raise ValueError("guidance weight must be >= 0")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


def guided_eps(eps_cond, eps_uncond, w: float):
    """w * eps_cond + (1 - w) * eps_uncond.

    The endpoints are returned exactly: w = 1 gives eps_cond bitwise and
    w = 0 gives eps_uncond bitwise.
    """
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    if w == 1.0:
        return eps_cond.copy()
    if w == 0.0:
        return eps_uncond.copy()
    return w * eps_cond + (1.0 - w) * eps_uncond


def _model_x_hat(model, z, t, cond, lr_condition, aug_level):
    with ag.no_grad():
        if lr_condition is not None:
            out = model(z, t, cond, lr_condition, aug_level)
        else:
            out = model(z, t, cond)
    return out.data if isinstance(out, ag.Tensor) else np.asarray(out)


def sample(model, cond, null_cond, schedule: NoiseSchedule, guidance: GuidanceConfig,
           shape, rng, lr_condition=None):
    """Draw one image (or a batch) by ancestral sampling with CFG.

    ``shape`` is (C, H, W) for a single image or (B, C, H, W) for a batch;
    ``cond`` must be batched accordingly (a single TextConditioning
    broadcasts).  For a super-resolution model, pass ``lr_condition`` as an
    AugmentedLowRes; its level conditions the model alongside the timestep.
    Deterministic given the rng state.
    """
    is_sr = lr_condition is not None
    if is_sr:
        lr_image, aug_level = lr_condition.image, lr_condition.aug_level
    else:
        lr_image = aug_level = None
    if _needs_lr(model) and not is_sr:
        raise ValueError("this model requires lr_condition")

    grid = discretize(schedule, guidance.num_steps)
    z = rng.standard_normal(shape)
    for i in range(guidance.num_steps):
        s = grid[i]
        x_hat_c = _model_x_hat(model, z, s, cond, lr_image, aug_level)
        x_hat_u = _model_x_hat(model, z, s, null_cond, lr_image, aug_level)
        eps_c = x_to_eps(z, x_hat_c, s, schedule)
        eps_u = x_to_eps(z, x_hat_u, s, schedule)
        eps = guided_eps(eps_c, eps_u, guidance.w)
        x_hat = eps_to_x(z, eps, s, schedule, clip=guidance.clip_xhat)
        if i == guidance.num_steps - 1:
            final = np.clip(x_hat, -1.0, 1.0)
            _check_finite(final, i)
            return final
        z = ancestral_step(z, x_hat, s, grid[i + 1], schedule, rng)
        _check_finite(z, i)
    raise AssertionError("unreachable")


def ancestral_step(z, x_hat, t_from, t_to, schedule: NoiseSchedule, rng):
    """One reverse transition: sample from the forward-process posterior
    q(z_{t_to} | z_{t_from}, x = x_hat) with the lower-bound variance."""
    a_s, s_s = alpha_sigma(schedule, t_from)
    a_u, s_u = alpha_sigma(schedule, t_to)
    a_su = a_s / a_u
    var_su = max(s_s ** 2 - a_su ** 2 * s_u ** 2, 0.0)
    mean = (a_su * s_u ** 2 / s_s ** 2) * z + (a_u * var_su / s_s ** 2) * x_hat
    std = np.sqrt(var_su * s_u ** 2 / s_s ** 2)
    return mean + std * rng.standard_normal(np.shape(z))


def _check_finite(arr, step_index):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values during sampling at step {step_index}")


def _needs_lr(model):
    config = getattr(model, "config", None)
    return hasattr(config, "scale_factor")
