"""Noise schedules, forward diffusion, guidance, samplers, and training.

The model's noise prediction is the input gradient of a scalar energy,
which makes guidance and composition pure arithmetic on gradients:

* classifier-free guidance:  (1+w) * e_cond - w * e_uncond
* composition over scenes:   e_uncond + sum_i w_i * (e_cond_i - e_uncond)

Both planners route through :func:`compose_gradients`; guidance is the
single-component special case, so the two are bit-identical by
construction rather than merely algebraically equal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .networks import AdamState, EnergyModel, adam_step
from .schedule import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_STEPS,
    NoiseSchedule,
    make_schedule,
    schedule_from_beta,
)

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "schedule_from_beta",
    "GuidanceConfig",
    "TrainConfig",
    "TrainingDiverged",
    "forward_diffuse",
    "cfg_combine",
    "compose_gradients",
    "denoised_mean",
    "reverse_noise",
    "ddpm_step",
    "ddim_step",
    "ddim_time_grid",
    "training_loss",
    "train",
    "moving_average",
    "save_loss_curve",
]


class TrainingDiverged(RuntimeError):
    """Loss exploded past 10x its initial value."""


@dataclass(frozen=True)
class GuidanceConfig:
    """Conditioning strength at sampling time and the training-time
    probability of dropping the scene latent."""

    scale: float = 2.0
    dropout: float = 0.2

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 128
    learning_rate: float = 1e-4
    n_steps: int = DEFAULT_STEPS
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def forward_diffuse(tau0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """tau_t = sqrt(abar_t) tau_0 + sqrt(1 - abar_t) eps."""
    if not 1 <= t <= sched.n_steps:
        raise ValueError(f"step {t} outside [1, {sched.n_steps}]")
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * np.asarray(tau0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def cfg_combine(e_cond: np.ndarray, e_uncond: np.ndarray, w: float) -> np.ndarray:
    """(1+w) * e_cond - w * e_uncond."""
    e_cond = np.asarray(e_cond)
    e_uncond = np.asarray(e_uncond)
    if e_cond.shape != e_uncond.shape:
        raise ValueError("shape mismatch between guidance branches")
    return (1.0 + w) * e_cond - w * e_uncond


def compose_gradients(e_uncond: np.ndarray, parts: Sequence[tuple[np.ndarray, float]]) -> np.ndarray:
    """e_uncond + sum_i w_i * (e_cond_i - e_uncond).

    With a single part of weight 1+w this is classifier-free guidance;
    planners call only this function so the identity holds bit for bit.
    """
    if len(parts) == 0:
        raise ValueError("composition needs at least one component")
    e_uncond = np.asarray(e_uncond)
    out = e_uncond.copy()
    for e_cond, w in parts:
        e_cond = np.asarray(e_cond)
        if e_cond.shape != e_uncond.shape:
            raise ValueError("shape mismatch between composition parts")
        out = out + w * (e_cond - e_uncond)
    return out


def denoised_mean(tau_t: np.ndarray, e_comb: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """mu_t of the reverse process, before any potential-field shift."""
    a = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    return (tau_t - ((1.0 - a) / np.sqrt(1.0 - ab)) * e_comb) / np.sqrt(a)


def reverse_noise(t: int, sched: NoiseSchedule, rng: np.random.Generator, shape) -> np.ndarray:
    """sigma_t * xi; zero at the final step so the chain ends at the mean."""
    if t <= 1:
        return np.zeros(shape)
    return sched.sigma[t - 1] * rng.standard_normal(shape)


def ddpm_step(
    tau_t: np.ndarray,
    e_comb: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ancestral step: tau_{t-1} = mu_t + sigma_t xi (xi = 0 at t=1)."""
    mu = denoised_mean(tau_t, e_comb, t, sched)
    return mu + reverse_noise(t, sched, rng, np.shape(tau_t))


def ddim_step(
    tau_t: np.ndarray,
    e_comb: np.ndarray,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Deterministic step to an arbitrary earlier time (eta = 0)."""
    if t_prev >= t:
        raise ValueError("t_prev must be smaller than t")
    ab = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t_prev)
    tau0_hat = (tau_t - np.sqrt(1.0 - ab) * e_comb) / np.sqrt(ab)
    return np.sqrt(ab_prev) * tau0_hat + np.sqrt(1.0 - ab_prev) * e_comb


def ddim_time_grid(n_steps: int, n_sampling_steps: int) -> list[tuple[int, int]]:
    """(t, t_prev) pairs, evenly spaced from N down to 0 inclusive."""
    if not 1 <= n_sampling_steps <= n_steps:
        raise ValueError("sampling steps must be in [1, n_steps]")
    grid = [int(round(v)) for v in np.linspace(n_steps, n_steps / n_sampling_steps, n_sampling_steps)]
    grid.append(0)
    return list(zip(grid[:-1], grid[1:]))


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


def _batch_latents(
    model: EnergyModel,
    clouds: Sequence[np.ndarray],
    keep: np.ndarray,
    cloud_ids: Sequence | None,
) -> Tensor:
    """Latents for a batch with conditional dropout applied.

    Dropped samples get the zero latent by never being encoded at all,
    and repeated clouds (same id) are encoded once — training batches
    drawn from a per-environment dataset repeat clouds heavily.
    """
    batch = len(clouds)
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        return ad.constant(model.zero_latent(batch))
    if cloud_ids is None:
        unique_rows = list(kept)
        row_of = {int(i): k for k, i in enumerate(kept)}
        expand = np.arange(kept.size)
    else:
        row_of: dict = {}
        unique_rows = []
        expand = np.empty(kept.size, dtype=np.intp)
        for k, i in enumerate(kept):
            key = cloud_ids[i]
            if key not in row_of:
                row_of[key] = len(unique_rows)
                unique_rows.append(int(i))
            expand[k] = row_of[key]
    z_unique = model.encode_batch([clouds[i] for i in unique_rows])
    z_kept = ad.take(z_unique, expand)
    return ad.scatter_add(z_kept, kept, (batch, z_unique.shape[1]))


def training_loss(
    model: EnergyModel,
    trajectories: np.ndarray,
    clouds: Sequence[np.ndarray],
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    rng: np.random.Generator,
    cloud_ids: Sequence | None = None,
) -> tuple[Tensor, int]:
    """Mean squared error between the drawn noise and the energy's input
    gradient, with conditional dropout.  Returns the loss tensor (its
    graph supports the parameter backward) and the dropped-sample count.
    """
    trajectories = np.asarray(trajectories, dtype=np.float64)
    batch = trajectories.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, sched.n_steps + 1, size=batch)
    eps = rng.standard_normal(trajectories.shape)
    ab = sched.alpha_bar[t - 1][:, None, None]
    tau_t = np.sqrt(ab) * trajectories + np.sqrt(1.0 - ab) * eps

    keep = rng.random(batch) >= guidance.dropout
    z = _batch_latents(model, clouds, keep, cloud_ids)

    tau = Tensor(tau_t, requires_grad=True)
    total_energy = ad.tsum(model.energy_batch(tau, t, z))
    grad_tau = ad.grad(total_energy, [tau], create_graph=True)[0]
    resid = ad.constant(eps) - grad_tau
    loss = ad.tsum(ad.mul(resid, resid)) / batch
    if not np.isfinite(loss.data):
        raise FloatingPointError("training loss is not finite")
    return loss, int(batch - keep.sum())


def train(
    model: EnergyModel,
    trajectories: np.ndarray,
    clouds: Sequence[np.ndarray],
    cfg: TrainConfig,
    guidance: GuidanceConfig,
    cloud_ids: Sequence | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[EnergyModel, list[float]]:
    """Adam on the noise-matching objective; returns a trained model and
    the per-epoch mean loss curve.  Fully deterministic given the seed.
    """
    n = len(trajectories)
    if n == 0:
        raise ValueError("empty dataset")
    if cfg.n_steps != model.n_steps:
        raise ValueError("train config step count does not match the model schedule")
    sched = model.schedule
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.params)
    state = AdamState.for_params(params)
    working = EnergyModel(model.d_space, model.horizon, sched, params)

    losses: list[float] = []
    initial: float | None = None
    param_names = list(params)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch_traj = trajectories[idx]
            batch_clouds = [clouds[i] for i in idx]
            batch_ids = None if cloud_ids is None else [cloud_ids[i] for i in idx]
            loss, _ = training_loss(
                working, batch_traj, batch_clouds, sched, guidance, rng, cloud_ids=batch_ids
            )
            grads = ad.grad(loss, [working.params[k] for k in param_names])
            grad_map = {k: g.data for k, g in zip(param_names, grads)}
            new_params, state = adam_step(working.params, grad_map, state, cfg.learning_rate)
            working = EnergyModel(model.d_space, model.horizon, cfg.n_steps, new_params)
            epoch_losses.append(float(loss.data))
        mean_loss = float(np.mean(epoch_losses))
        losses.append(mean_loss)
        if initial is None:
            initial = mean_loss
        if mean_loss > 10.0 * initial:
            raise TrainingDiverged(
                f"epoch {epoch}: loss {mean_loss:.3f} exceeds 10x initial {initial:.3f}"
            )
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)

    trained = EnergyModel(
        model.d_space, model.horizon, cfg.n_steps, working.params, trained=True
    )
    return trained, losses


def moving_average(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average used by the loss-curve monotonicity check."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def save_loss_curve(path, losses: Sequence[float]) -> None:
    lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(losses)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
