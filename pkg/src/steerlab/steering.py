"""Alignment objectives and the six steering samplers (RS/PR/OP/BI/GD/SS)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import DenoiserModel, NoiseSchedule, forward_diffuse, predict_clean, reverse_step, sample
from .geometry import resample_polyline
from .world import Trajectory

METHODS = ("RS", "PR", "OP", "BI", "GD", "SS")


@dataclass(frozen=True)
class Interaction:
    """Tagged user input: point goal, trajectory sketch, or physical nudge."""

    kind: str  # point | sketch | nudge
    point: np.ndarray | None = None
    sketch: np.ndarray | None = None
    prefix: np.ndarray | None = None  # nudge: k replacement states

    def __post_init__(self):
        if self.kind == "point":
            p = np.asarray(self.point, float).reshape(2)
            object.__setattr__(self, "point", p)
        elif self.kind == "sketch":
            s = np.asarray(self.sketch, float)
            if s.ndim != 2 or len(s) < 2:
                raise ValueError("sketch needs >= 2 points")
            object.__setattr__(self, "sketch", s)
        elif self.kind == "nudge":
            p = np.asarray(self.prefix, float)
            if p.ndim != 2 or len(p) < 1:
                raise ValueError("nudge needs >= 1 prefix state")
            object.__setattr__(self, "prefix", p)
        else:
            raise ValueError(f"unknown interaction kind {self.kind!r}")

    @property
    def k(self) -> int:
        return 0 if self.prefix is None else len(self.prefix)

    def to_json(self) -> dict:
        if self.kind == "point":
            return {"kind": "point", "data": self.point.tolist()}
        if self.kind == "sketch":
            return {"kind": "sketch", "data": self.sketch.tolist()}
        return {"kind": "nudge", "data": {"prefix": self.prefix.tolist(), "k": self.k}}

    @staticmethod
    def from_json(d: dict) -> "Interaction":
        kind = d["kind"]
        data = d["data"]
        if kind == "point":
            return Interaction("point", point=np.asarray(data, float))
        if kind == "sketch":
            return Interaction("sketch", sketch=np.asarray(data, float))
        if kind == "nudge":
            return Interaction("nudge", prefix=np.asarray(data["prefix"], float))
        raise ValueError(f"unknown interaction kind {kind!r}")


def resample_sketch(sketch: np.ndarray, horizon: int, mode: str = "arclength") -> np.ndarray:
    """Resample a sketch polyline to the trajectory horizon.

    'arclength' spaces samples uniformly along the curve; 'index' interpolates
    uniformly over the input index axis.
    """
    sketch = np.asarray(sketch, float)
    if mode == "arclength":
        return resample_polyline(sketch, horizon)
    if mode == "index":
        src = np.linspace(0, 1, len(sketch))
        dst = np.linspace(0, 1, horizon)
        return np.stack([np.interp(dst, src, sketch[:, 0]), np.interp(dst, src, sketch[:, 1])], axis=1)
    raise ValueError(f"unknown resample mode {mode!r}")


def objective_value_and_grad(tau, z: Interaction, resample_mode: str = "arclength"):
    """Alignment objective xi(tau, z) and its gradient over the trajectory.

    point: mean_t ||s_t - z||; sketch: sum_t ||s_t - z_t|| after resampling z
    to the horizon. The nudge objective is not gradient-based: it returns
    (0, None) when the prefix already matches and (inf, None) otherwise;
    samplers realize it as a hard prefix clamp.

    States exactly at the target contribute subgradient 0.
    """
    states = tau.states if isinstance(tau, Trajectory) else np.asarray(tau, float)
    t_len = len(states)
    if z.kind == "point":
        d = states - z.point[None, :]
        dist = np.linalg.norm(d, axis=1)
        value = float(dist.mean())
        safe = np.where(dist > 0, dist, np.inf)
        grad = d / (t_len * safe[:, None])
        return value, grad
    if z.kind == "sketch":
        target = resample_sketch(z.sketch, t_len, resample_mode)
        d = states - target
        dist = np.linalg.norm(d, axis=1)
        value = float(dist.sum())
        safe = np.where(dist > 0, dist, np.inf)
        grad = d / safe[:, None]
        return value, grad
    if z.kind == "nudge":
        k = min(z.k, t_len)
        match = np.allclose(states[:k], z.prefix[:k], atol=1e-12)
        return (0.0 if match else np.inf), None
    raise ValueError(f"unknown interaction kind {z.kind!r}")


def batch_objective(batch: list[Trajectory], z: Interaction, resample_mode="arclength") -> np.ndarray:
    return np.array([objective_value_and_grad(tr, z, resample_mode)[0] for tr in batch])


@dataclass
class SteerConfig:
    """Sampler selection and guidance knobs."""

    method: str = "SS"
    guide_ratio: float = 60.0  # beta
    beta_schedule: list | None = None  # optional per-inference-step betas, index 1..S
    cutoff_step: int = 0  # beta_i = 0 for i <= cutoff (late denoising steps)
    mcmc_steps: int = 4  # M
    batch: int = 32
    op_prefix: int = 16  # clamp length when OP receives a sketch
    resample_mode: str = "arclength"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.guide_ratio < 0:
            raise ValueError("guide ratio must be >= 0")
        if self.mcmc_steps < 1:
            raise ValueError("mcmc steps must be >= 1")

    def beta_at(self, i: int, sched: NoiseSchedule) -> float:
        if self.beta_schedule is not None:
            if len(self.beta_schedule) < sched.inference_steps:
                raise ValueError("beta schedule shorter than inference chain")
            if len(self.beta_schedule) > sched.inference_steps:
                raise ValueError("beta schedule longer than inference chain")
            return float(self.beta_schedule[i - 1])
        if i <= self.cutoff_step:
            return 0.0
        return float(self.guide_ratio)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "guideRatio": self.guide_ratio,
            "betaSchedule": self.beta_schedule,
            "cutoffStep": self.cutoff_step,
            "mcmcSteps": self.mcmc_steps,
            "batch": self.batch,
            "opPrefix": self.op_prefix,
            "resampleMode": self.resample_mode,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(d: dict) -> "SteerConfig":
        return SteerConfig(
            method=d.get("method", "SS"),
            guide_ratio=float(d.get("guideRatio", 60.0)),
            beta_schedule=d.get("betaSchedule"),
            cutoff_step=int(d.get("cutoffStep", 0)),
            mcmc_steps=int(d.get("mcmcSteps", 4)),
            batch=int(d.get("batch", 32)),
            op_prefix=int(d.get("opPrefix", 16)),
            resample_mode=d.get("resampleMode", "arclength"),
            seed=int(d.get("seed", 0)),
        )


def _check_compat(method: str, z: Interaction | None):
    if method == "RS":
        return
    if z is None:
        raise ValueError(f"method {method} needs an interaction")
    if method in ("PR", "BI", "GD", "SS") and z.kind not in ("point", "sketch"):
        raise ValueError(f"method {method} needs a point or sketch interaction, got {z.kind}")
    if method == "OP" and z.kind not in ("nudge", "sketch"):
        raise ValueError("OP needs a nudge or sketch interaction")


def _normalized_guide(tau_n: np.ndarray, z: Interaction, model: DenoiserModel, mode: str) -> np.ndarray:
    """Gradient of the alignment objective in normalized trajectory space."""
    grads = np.zeros_like(tau_n)
    if z.kind == "point":
        zn = Interaction("point", point=model.stats.normalize(z.point))
    else:
        zn = Interaction("sketch", sketch=model.stats.normalize(z.sketch))
    for b in range(tau_n.shape[0]):
        _, g = objective_value_and_grad(tau_n[b], zn, mode)
        grads[b] = g
    return grads


def steer(
    model: DenoiserModel,
    sched: NoiseSchedule,
    observation: np.ndarray | None,
    z: Interaction | None,
    cfg: SteerConfig,
    rng: np.random.Generator,
) -> list[Trajectory]:
    """Generate a steered batch with the configured sampler."""
    _check_compat(cfg.method, z)
    method = cfg.method
    if method == "RS":
        return sample(model, sched, observation, cfg.batch, rng)
    if method == "PR":
        batch = sample(model, sched, observation, cfg.batch, rng)
        xi = batch_objective(batch, z, cfg.resample_mode)
        order = np.argsort(xi, kind="stable")
        return [batch[i] for i in order]
    if method == "OP":
        return _steer_op(model, sched, z, cfg, rng)
    if method == "BI":
        return _steer_bi(model, sched, observation, z, cfg, rng)
    if method in ("GD", "SS"):
        return _steer_guided(model, sched, observation, z, cfg, rng)
    raise AssertionError(method)


def _steer_op(model, sched, z, cfg, rng):
    """Output perturbation: hard prefix clamp, inpainted at every reverse step."""
    if z.kind == "nudge":
        prefix = z.prefix
    else:
        k = min(cfg.op_prefix, model.horizon - 1)
        prefix = resample_sketch(z.sketch, model.horizon, cfg.resample_mode)[:k]
    k = min(len(prefix), model.horizon - 1)
    if not 1 <= k < model.horizon:
        raise ValueError("nudge prefix length must satisfy 1 <= k < T")
    prefix_n = model.stats.normalize(prefix[:k])
    tau = rng.standard_normal((cfg.batch, model.horizon, model.state_dim))
    for i in range(sched.inference_steps, 0, -1):
        tau[:, :k, :] = prefix_n
        tau = reverse_step(model, sched, tau, i, obs_n=None)
    tau[:, :k, :] = prefix_n
    out = []
    for b in range(cfg.batch):
        states = model.stats.denormalize(tau[b])
        states[:k] = prefix[:k]
        out.append(Trajectory(states, 0.1))
    return out


def _steer_bi(model, sched, observation, z, cfg, rng):
    """Biased initialization: start the chain at the corrupted user input."""
    if z.kind == "point":
        base = np.tile(z.point, (model.horizon, 1))
    else:
        base = resample_sketch(z.sketch, model.horizon, cfg.resample_mode)
    base_n = model.stats.normalize(base)
    eta = rng.standard_normal((cfg.batch, model.horizon, model.state_dim))
    init = forward_diffuse(sched, base_n[None], sched.inference_steps, eta)
    return sample(model, sched, observation, cfg.batch, rng, init=init)


def _steer_guided(model, sched, observation, z, cfg, rng):
    """GD: Eq-style guided reverse chain. SS: M-1 same-level MCMC updates per
    denoise step (clean prediction + forward diffusion), then one guided step down."""
    mcmc = cfg.mcmc_steps if cfg.method == "SS" else 1
    obs_n = None if observation is None else model.stats.normalize(np.asarray(observation, float))
    tau = rng.standard_normal((cfg.batch, model.horizon, model.state_dim))
    for i in range(sched.inference_steps, 0, -1):
        beta = cfg.beta_at(i, sched)
        for j in range(1, mcmc + 1):
            if obs_n is not None:
                tau[:, 0, :] = obs_n
            guide = _normalized_guide(tau, z, model, cfg.resample_mode) if beta > 0 else None
            if j < mcmc:
                clean = predict_clean(model, sched, tau, i, obs_n, guide, beta)
                eta = rng.standard_normal(tau.shape)
                tau = forward_diffuse(sched, clean, i, eta)
            else:
                tau = reverse_step(model, sched, tau, i, obs_n, guide, beta)
    if obs_n is not None:
        tau[:, 0, :] = obs_n
    out = []
    for b in range(cfg.batch):
        states = model.stats.denormalize(tau[b])
        if observation is not None:
            states[0] = np.asarray(observation, float)
        out.append(Trajectory(states, 0.1))
    return out
