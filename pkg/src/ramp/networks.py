"""Scene encoder, energy network, parameter store, Adam, and weight files.

The trajectory model is a scalar energy E = ||s||^2.  A permutation-
invariant encoder maps an obstacle point cloud to a 320-dim scene latent
``z``; an MLP trunk maps ``(flattened trajectory, time embedding, z)``
to a correction with one output per trajectory coordinate, and

    s = gain * (tau - sqrt(abar_t) * mu(tau, t, z)) / (sqrt(2) (1-abar_t)^(1/4))
    mu = tau + trunk(tau, t, z)

so the energy is a scaled squared reconstruction error.  The model's
noise prediction is the input gradient of E, so sampling needs one
backward pass and training needs gradients of that gradient.  The
residual form matters: the 1/sqrt(1-abar) steepness of the score at low
noise is carried analytically, and the learned map lives in smooth
denoised-trajectory space.  A bare MLP head (narrow output, no
residual) stalls: its input gradient 2 J^T s starts near zero and must
grow through products of small weights.

All activations are tanh: double-backward requires smooth second
derivatives, which piecewise-linear activations do not provide.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import serialize
from ._version import __version__
from .autodiff import Tensor
from .schedule import NoiseSchedule, make_schedule, schedule_from_beta

POINTS_PER_OBSTACLE = 64
TIME_EMBED_DIM = 32
SCENE_LATENT_DIM = 320
_POINT_HIDDEN = 64
_OBSTACLE_FEATURES = 160
_TRUNK_WIDTH = 256
_N_FREQS = TIME_EMBED_DIM // 2


def parameter_spec(d_space: int, horizon: int) -> dict[str, tuple[int, ...]]:
    """Topology of every named tensor, fixed per (d_space, horizon).

    The trunk head has one output per trajectory coordinate: the noise
    prediction is the input gradient 2 J(tau)^T s(tau), and a narrower
    head pins it into a lower-dimensional moving subspace that cannot
    cover the full noise target (it stalls in practice).
    """
    flat = horizon * 2 * d_space
    trunk_in = flat + TIME_EMBED_DIM + SCENE_LATENT_DIM
    return {
        "enc/point1/w": (d_space, _POINT_HIDDEN),
        "enc/point1/b": (_POINT_HIDDEN,),
        "enc/point2/w": (_POINT_HIDDEN, _POINT_HIDDEN),
        "enc/point2/b": (_POINT_HIDDEN,),
        "enc/obstacle/w": (2 * _POINT_HIDDEN, _OBSTACLE_FEATURES),
        "enc/obstacle/b": (_OBSTACLE_FEATURES,),
        "enc/scene/w": (2 * _OBSTACLE_FEATURES, SCENE_LATENT_DIM),
        "enc/scene/b": (SCENE_LATENT_DIM,),
        "trunk/l1/w": (trunk_in, _TRUNK_WIDTH),
        "trunk/l1/b": (_TRUNK_WIDTH,),
        "trunk/l2/w": (_TRUNK_WIDTH, _TRUNK_WIDTH),
        "trunk/l2/b": (_TRUNK_WIDTH,),
        "trunk/out/w": (_TRUNK_WIDTH, flat),
        "trunk/out/b": (flat,),
        "trunk/seed_gain": (1,),
    }


def init_params(d_space: int, horizon: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform +-1/sqrt(fan_in) init; final trunk layer scaled down so the
    initial noise prediction starts at the analytic seed alone."""
    params: dict[str, Tensor] = {}
    for name, shape in parameter_spec(d_space, horizon).items():
        if name == "trunk/seed_gain":
            data = np.ones(shape)
        elif name.endswith("/b"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        if name == "trunk/out/w":
            data = data * 0.1
        params[name] = Tensor(data, requires_grad=True)
    return params


def time_embedding(t: np.ndarray, n_steps: int) -> np.ndarray:
    """Sinusoidal embedding of t/N: 16 frequency pairs, dim 32.

    The top frequency stays below the step resolution (64 cycles over
    the unit interval) so no channel aliases across adjacent steps.
    """
    x = np.asarray(t, dtype=np.float64) / float(n_steps)
    freqs = np.exp(np.linspace(0.0, np.log(64.0), _N_FREQS))
    ang = 2.0 * np.pi * np.outer(x, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _dense(x: Tensor, params: dict[str, Tensor], name: str, activation: bool) -> Tensor:
    y = ad.matmul(x, params[f"{name}/w"]) + params[f"{name}/b"]
    return ad.tanh(y) if activation else y


def _pool(h: Tensor, axis: int, count: int) -> Tensor:
    # mean || max; the sorted sum keeps the mean bit-identical under any
    # permutation of the pooled axis.
    mean = ad.sorted_sum(h, axis=axis) * (1.0 / count)
    return ad.concat([mean, ad.amax(h, axis=axis)], axis=-1)


@dataclass
class AdamState:
    """First/second moment buffers plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns new parameter tensors."""
    step = state.step + 1
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = Tensor(p.data - update, requires_grad=True)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=step)


@dataclass
class EnergyModel:
    """Parameter store for the encoder + energy trunk, tied to the noise
    schedule it was created against.

    ``trained`` is persisted with the weights; planners refuse to sample
    from a store that never saw a training step.
    """

    d_space: int
    horizon: int
    schedule: NoiseSchedule
    params: dict[str, Tensor]
    trained: bool = False
    extras: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        d_space: int,
        horizon: int,
        n_steps: int,
        seed: int,
        schedule: NoiseSchedule | None = None,
    ) -> "EnergyModel":
        rng = np.random.default_rng(seed)
        if schedule is None:
            schedule = make_schedule(n_steps)
        elif schedule.n_steps != n_steps:
            raise ValueError("schedule length does not match n_steps")
        return cls(d_space, horizon, schedule, init_params(d_space, horizon, rng))

    @property
    def n_steps(self) -> int:
        return self.schedule.n_steps

    @property
    def state_dim(self) -> int:
        return 2 * self.d_space

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_latent(self, batch: int | None = None) -> np.ndarray:
        """The all-zeros latent denoting the unconditional branch."""
        if batch is None:
            return np.zeros(SCENE_LATENT_DIM)
        return np.zeros((batch, SCENE_LATENT_DIM))

    # ------------------------------------------------------------------
    # encoder
    # ------------------------------------------------------------------

    def _encode(self, x: Tensor) -> Tensor:
        h = _dense(x, self.params, "enc/point1", activation=True)
        h = _dense(h, self.params, "enc/point2", activation=True)
        per_obstacle = _pool(h, axis=-2, count=x.shape[-2])
        o = _dense(per_obstacle, self.params, "enc/obstacle", activation=True)
        scene = _pool(o, axis=-2, count=x.shape[-3])
        return _dense(scene, self.params, "enc/scene", activation=False)

    def encode_cloud(self, cloud: np.ndarray) -> Tensor:
        """Scene latent of one cloud of shape (n_obs, points, d_space).

        The latent is invariant, bit for bit, to permutations of points
        within an obstacle and to permutations of obstacles.  An empty
        cloud (no obstacles) maps to the zero latent.
        """
        cloud = np.asarray(cloud, dtype=np.float64)
        if cloud.size == 0:
            return Tensor(self.zero_latent())
        if cloud.ndim != 3 or cloud.shape[-1] != self.d_space:
            raise ValueError(f"cloud shape {cloud.shape} does not match d_space={self.d_space}")
        return self._encode(ad.constant(cloud))

    def encode_batch(self, clouds: Sequence[np.ndarray]) -> Tensor:
        """Latents for a batch of clouds, grouped by obstacle count so
        mixed-size batches still run vectorized."""
        groups: dict[int, list[int]] = {}
        for i, c in enumerate(clouds):
            groups.setdefault(int(np.asarray(c).shape[0]), []).append(i)
        parts: list[Tensor] = []
        flat_index: list[int] = []
        for n_obs in sorted(groups):
            idx = groups[n_obs]
            flat_index.extend(idx)
            if n_obs == 0:
                parts.append(Tensor(self.zero_latent(len(idx))))
                continue
            stacked = np.stack([np.asarray(clouds[i], dtype=np.float64) for i in idx])
            parts.append(self._encode(ad.constant(stacked)))
        grouped = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        inverse = np.argsort(np.asarray(flat_index))
        return ad.take(grouped, inverse)

    # ------------------------------------------------------------------
    # energy
    # ------------------------------------------------------------------

    def energy_batch(self, tau: Tensor, t: np.ndarray, z: Tensor) -> Tensor:
        """Per-sample energies, shape (B,); each is a squared norm, so
        energies are always >= 0."""
        batch = tau.shape[0]
        if tau.shape[1] != self.horizon or tau.shape[2] != self.state_dim:
            raise ValueError(
                f"trajectory shape {tau.shape} does not match "
                f"(H={self.horizon}, d={self.state_dim})"
            )
        if z.shape != (batch, SCENE_LATENT_DIM):
            raise ValueError(f"latent shape {z.shape} does not match batch {batch}")
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.n_steps):
            raise ValueError("diffusion step out of range")
        emb = ad.constant(time_embedding(t, self.n_steps))
        flat = ad.reshape(tau, (batch, self.horizon * self.state_dim))
        x = ad.concat([flat, emb, z], axis=1)
        h = _dense(x, self.params, "trunk/l1", activation=True)
        h = _dense(h, self.params, "trunk/l2", activation=True)
        correction = _dense(h, self.params, "trunk/out", activation=False)
        # s = gain * c(t) * (tau - sqrt(abar) * mu),  mu = tau + correction
        ab = self.schedule.alpha_bar[np.asarray(t) - 1][:, None]
        sqrt_ab = np.sqrt(ab)
        c = 1.0 / (np.sqrt(2.0) * (1.0 - ab) ** 0.25)
        residual = ad.mul(ad.constant(c * (1.0 - sqrt_ab)), flat) - ad.mul(
            ad.constant(c * sqrt_ab), correction
        )
        s = ad.mul(self.params["trunk/seed_gain"], residual)
        return ad.tsum(ad.mul(s, s), axis=1)

    def energy(self, tau: np.ndarray, t: int, z) -> float:
        """Scalar energy of a single trajectory."""
        z_t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        with ad.no_grad():
            e = self.energy_batch(
                ad.constant(np.asarray(tau)[None]),
                np.array([t]),
                ad.reshape(z_t, (1, SCENE_LATENT_DIM)),
            )
        return float(e.data[0])

    def noise_prediction(self, tau: np.ndarray, t: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Input gradient of the energy for a batch: shape (B, H, d).

        This is the model's epsilon estimate used by both samplers.
        """
        tau_t = Tensor(np.asarray(tau, dtype=np.float64), requires_grad=True)
        total = ad.tsum(self.energy_batch(tau_t, t, ad.constant(z)))
        return ad.grad(total, [tau_t], create_graph=False)[0].data

    def input_gradient(self, tau: np.ndarray, t: int, z) -> np.ndarray:
        """Single-trajectory counterpart of :meth:`noise_prediction`."""
        z_row = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        return self.noise_prediction(np.asarray(tau)[None], np.array([t]), z_row[None])[0]

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save(self, path, seed: int = 0, cfg_hash: str | None = None) -> None:
        tensors = {name: p.data for name, p in self.params.items()}
        tensors["meta/version"] = np.array(serialize.version_tuple(__version__), dtype=np.float64)
        tensors["meta/seed"] = np.array([float(seed)])
        tensors["meta/trained"] = np.array([1.0 if self.trained else 0.0])
        tensors["meta/d_space"] = np.array([float(self.d_space)])
        tensors["meta/horizon"] = np.array([float(self.horizon)])
        tensors["schedule/beta"] = self.schedule.beta
        if cfg_hash is not None:
            tensors["meta/config_hash"] = serialize.hash_to_floats(cfg_hash)
        with open(path, "wb") as f:
            f.write(serialize.WEIGHT_MAGIC)
            f.write(np.uint32(serialize.FORMAT_VERSION).tobytes())
            serialize.write_tensor_records(f, tensors)

    @classmethod
    def load(cls, path) -> "EnergyModel":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != serialize.WEIGHT_MAGIC:
                raise serialize.ArtifactError(f"{path}: not a weight file")
            fmt = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
            if fmt != serialize.FORMAT_VERSION:
                raise serialize.ArtifactError(f"{path}: unsupported format version {fmt}")
            tensors = serialize.read_tensor_records(f)
        version = ".".join(str(int(v)) for v in tensors.pop("meta/version"))
        serialize.check_tool_version(version, str(path))
        d_space = int(tensors.pop("meta/d_space")[0])
        horizon = int(tensors.pop("meta/horizon")[0])
        trained = bool(tensors.pop("meta/trained")[0])
        schedule = schedule_from_beta(tensors.pop("schedule/beta"))
        extras = {"tool_version": version, "seed": int(tensors.pop("meta/seed")[0])}
        if "meta/config_hash" in tensors:
            extras["config_hash"] = serialize.floats_to_hash(tensors.pop("meta/config_hash"))
        spec = parameter_spec(d_space, horizon)
        missing = sorted(set(spec) - set(tensors))
        if missing:
            raise serialize.ArtifactError(f"{path}: missing tensors {missing}")
        params = {name: Tensor(tensors[name], requires_grad=True) for name in spec}
        return cls(d_space, horizon, schedule, params, trained=trained, extras=extras)
