"""Trajectory denoising-diffusion policy: schedule, training, reverse sampling.

The reverse update follows the guided form

    tau_{i-1} = alpha_i * (tau_i - gamma_i * (eps(tau_i, i) + beta_i * guide)) + sigma_i * eta

with per-inference-step coefficients derived from a cosine-free linear-beta
schedule and a DDIM-style timestep subsequence. The deterministic variant
(eta = 0 on intermediate steps) is the default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nets import Adam, Mlp
from .world import Trajectory

EMBED_DIM = 8


@dataclass
class NoiseSchedule:
    """Coefficients for a diffusion process with N training steps and a
    subsampled inference chain of S steps (inference index i runs S..1)."""

    train_steps: int = 100
    inference_steps: int = 10
    beta_start: float | None = None  # default scales the classic 1000-step range to N
    beta_end: float | None = None
    stochastic: bool = False

    def __post_init__(self):
        if self.inference_steps > self.train_steps:
            raise ValueError("inferenceSteps must be <= train steps")
        n = self.train_steps
        if self.beta_start is None:
            self.beta_start = 1e-4 * (1000.0 / n)
        if self.beta_end is None:
            self.beta_end = 0.02 * (1000.0 / n)
        betas = np.linspace(self.beta_start, self.beta_end, n)
        alphas = 1.0 - betas
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])  # index 0..N
        self.signal = np.sqrt(self.alpha_bar)
        self.noise = np.sqrt(1.0 - self.alpha_bar)
        # ascending train timesteps for the S inference levels; i-th inference
        # step (1-based) works at train level ts[i]
        s = self.inference_steps
        self.ts = np.zeros(s + 1, dtype=int)
        self.ts[1:] = np.round(np.linspace(n / s, n, s)).astype(int)
        self.alpha_i = np.zeros(s + 1)
        self.gamma_i = np.zeros(s + 1)
        self.sigma_i = np.zeros(s + 1)
        for i in range(1, s + 1):
            t, tp = self.ts[i], self.ts[i - 1]
            ab_t, ab_p = self.alpha_bar[t], self.alpha_bar[tp]
            a = np.sqrt(ab_p / ab_t)
            if self.stochastic and i > 1:
                sig = np.sqrt((1 - ab_p) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_p)
            else:
                sig = 0.0
            g = np.sqrt(1 - ab_t) - np.sqrt(max(1 - ab_p - sig**2, 0.0)) / a
            self.alpha_i[i] = a
            self.gamma_i[i] = g
            self.sigma_i[i] = sig
        assert (self.alpha_i[1:] > 0).all() and (self.gamma_i[1:] > 0).all()
        assert (np.diff(self.signal) <= 1e-12).all(), "signal product must decrease"

    def level(self, i: int) -> tuple[float, float]:
        """(sqrt alpha_bar, sqrt 1-alpha_bar) at inference step i."""
        t = self.ts[i]
        return float(self.signal[t]), float(self.noise[t])

    def to_json(self) -> dict:
        return {
            "trainSteps": self.train_steps,
            "inferenceSteps": self.inference_steps,
            "betaStart": self.beta_start,
            "betaEnd": self.beta_end,
            "stochastic": self.stochastic,
        }

    @staticmethod
    def from_json(d: dict) -> "NoiseSchedule":
        return NoiseSchedule(
            train_steps=int(d["trainSteps"]),
            inference_steps=int(d["inferenceSteps"]),
            beta_start=float(d.get("betaStart", 1e-4)),
            beta_end=float(d.get("betaEnd", 0.02)),
            stochastic=bool(d.get("stochastic", False)),
        )


@dataclass
class NormStats:
    """Per-dimension affine map between world units and [-1, 1]."""

    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, float)
        self.scale = np.asarray(self.scale, float)
        if (self.scale <= 0).any():
            raise ValueError("scale must be positive")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, float) - self.offset) / self.scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, float) * self.scale + self.offset

    @staticmethod
    def fit(states: np.ndarray, margin: float = 0.05) -> "NormStats":
        lo = states.min(axis=0)
        hi = states.max(axis=0)
        mid = 0.5 * (lo + hi)
        half = np.maximum(0.5 * (hi - lo) * (1 + margin), 1e-9)
        return NormStats(mid, half)

    def to_json(self) -> dict:
        return {"offset": self.offset.tolist(), "scale": self.scale.tolist()}

    @staticmethod
    def from_json(d: dict) -> "NormStats":
        return NormStats(np.asarray(d["offset"]), np.asarray(d["scale"]))


def timestep_embedding(t: np.ndarray, n_train: int, dim: int = EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of train-step indices scaled to [0, 1]."""
    t = np.atleast_1d(np.asarray(t, float)) / n_train
    half = dim // 2
    freqs = np.exp(np.linspace(0, np.log(1000.0), half))
    ang = t[:, None] * freqs[None, :] * np.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserModel:
    """Epsilon-prediction network over flattened noisy trajectories.

    Input: [flatten(tau), observation, embed(t)]; output: flattened epsilon.
    The observation slot is zero-filled for unconditional models.
    """

    net: Mlp
    horizon: int
    state_dim: int
    stats: NormStats
    conditioned: bool = True

    def __post_init__(self):
        want_in = self.horizon * self.state_dim + self.state_dim + EMBED_DIM
        if self.net.in_dim != want_in or self.net.out_dim != self.horizon * self.state_dim:
            raise ValueError("denoiser net dims inconsistent with horizon/state_dim")

    def epsilon(self, tau: np.ndarray, t: int, obs_n: np.ndarray | None, sched: NoiseSchedule) -> np.ndarray:
        """Predict noise for a (B, T, D) normalized batch at train level t."""
        b = tau.shape[0]
        obs = np.zeros((b, self.state_dim)) if obs_n is None else np.broadcast_to(obs_n, (b, self.state_dim))
        emb = np.broadcast_to(timestep_embedding(np.array([t]), sched.train_steps), (b, EMBED_DIM))
        x = np.concatenate([tau.reshape(b, -1), obs, emb], axis=1)
        return self.net.forward(x).reshape(b, self.horizon, self.state_dim)

    def save(self, path, sched: NoiseSchedule | None = None):
        d = {
            "net": self.net.to_checkpoint(),
            "horizon": self.horizon,
            "stateDim": self.state_dim,
            "stats": self.stats.to_json(),
            "conditioned": self.conditioned,
        }
        if sched is not None:
            d["schedule"] = sched.to_json()
        with open(path, "w") as f:
            json.dump(d, f)

    @staticmethod
    def load(path) -> tuple["DenoiserModel", NoiseSchedule | None]:
        with open(path) as f:
            d = json.load(f)
        model = DenoiserModel(
            net=Mlp.from_checkpoint(d["net"]),
            horizon=int(d["horizon"]),
            state_dim=int(d["stateDim"]),
            stats=NormStats.from_json(d["stats"]),
            conditioned=bool(d.get("conditioned", True)),
        )
        sched = NoiseSchedule.from_json(d["schedule"]) if "schedule" in d else None
        return model, sched


@dataclass
class TrainConfig:
    epochs: int = 120
    batch: int = 128
    hidden: tuple = (256, 256)
    lr: float = 1e-3
    lr_decay: bool = True  # cosine decay to 5% of lr over the run
    seed: int = 0
    train_steps: int = 100
    inference_steps: int = 10
    level_subset: bool = True  # corrupt only at the levels the inference chain visits
    log_every: int = 0  # epochs between loss prints; 0 silences


def train_denoiser(
    data: list[Trajectory], cfg: TrainConfig, conditioned: bool = True
) -> tuple[DenoiserModel, NoiseSchedule, list[float]]:
    """Epsilon-regression training; returns model, schedule, per-epoch losses."""
    if not data:
        raise ValueError("empty training set")
    horizon = len(data[0])
    if any(len(tr) != horizon for tr in data):
        raise ValueError("training set must have a uniform horizon")
    state_dim = data[0].states.shape[1]
    all_states = np.concatenate([tr.states for tr in data], axis=0)
    stats = NormStats.fit(all_states)
    trajs = np.stack([stats.normalize(tr.states) for tr in data])  # (N, T, D)
    n = len(trajs)
    sched = NoiseSchedule(train_steps=cfg.train_steps, inference_steps=cfg.inference_steps)
    rng = np.random.default_rng(cfg.seed)
    net = Mlp(
        layer_dims=[horizon * state_dim + state_dim + EMBED_DIM, *cfg.hidden, horizon * state_dim],
        activations=["relu"] * len(cfg.hidden) + ["identity"],
        seed=cfg.seed,
    )
    opt = Adam(lr=cfg.lr)
    losses = []
    for epoch in range(cfg.epochs):
        if cfg.lr_decay:
            frac = epoch / max(cfg.epochs - 1, 1)
            opt.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1 + np.cos(np.pi * frac)))
        order = rng.permutation(n)
        total = 0.0
        nb = 0
        for s0 in range(0, n, cfg.batch):
            idx = order[s0 : s0 + cfg.batch]
            tau0 = trajs[idx]
            b = len(idx)
            if cfg.level_subset:
                t = rng.choice(sched.ts[1:], size=b)
            else:
                t = rng.integers(1, sched.train_steps + 1, size=b)
            eta = rng.standard_normal(tau0.shape)
            sig = sched.signal[t][:, None, None]
            noi = sched.noise[t][:, None, None]
            tau_t = sig * tau0 + noi * eta
            obs = tau0[:, 0, :] if conditioned else np.zeros((b, state_dim))
            if conditioned:
                tau_t = tau_t.copy()
                tau_t[:, 0, :] = obs  # mirror the inference-time inpainting clamp
            emb = timestep_embedding(t, sched.train_steps)
            x = np.concatenate([tau_t.reshape(b, -1), obs, emb], axis=1)
            pred, cache = net.forward_cached(x)
            target = eta.reshape(b, -1)
            diff = pred - target
            if conditioned:
                diff[:, :state_dim] = 0.0  # clamped first state carries no noise target
            loss = float((diff * diff).mean())
            if not np.isfinite(loss):
                raise FloatingPointError(f"NaN training loss at epoch {epoch}")
            upstream = 2.0 * diff / diff.size
            pgrad, _ = net.backward_from_cache(cache, upstream)
            opt.step(net, pgrad)
            total += loss
            nb += 1
        losses.append(total / max(nb, 1))
        if cfg.log_every and (epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1):
            print(f"[train-dp] epoch {epoch} loss {losses[-1]:.5f}")
    model = DenoiserModel(net=net, horizon=horizon, state_dim=state_dim, stats=stats, conditioned=conditioned)
    model.net.meta.update({"epochs": cfg.epochs, "hidden": list(cfg.hidden), "finalLoss": losses[-1]})
    return model, sched, losses


def reverse_step(
    model: DenoiserModel,
    sched: NoiseSchedule,
    tau_i: np.ndarray,
    i: int,
    obs_n: np.ndarray | None = None,
    guide: np.ndarray | None = None,
    beta_i: float = 0.0,
    eta: np.ndarray | None = None,
) -> np.ndarray:
    """One guided reverse update from inference level i to i-1 on a (B, T, D) batch."""
    if not 1 <= i <= sched.inference_steps:
        raise ValueError(f"inference step {i} out of range")
    if guide is not None and guide.shape != tau_i.shape:
        raise ValueError("guide shape mismatch")
    eps = model.epsilon(tau_i, int(sched.ts[i]), obs_n, sched)
    if guide is not None and beta_i != 0.0:
        eps = eps + beta_i * guide
    out = sched.alpha_i[i] * (tau_i - sched.gamma_i[i] * eps)
    if sched.sigma_i[i] > 0.0:
        if eta is None:
            raise ValueError("stochastic schedule needs eta")
        out = out + sched.sigma_i[i] * eta
    elif eta is not None:
        out = out + sched.sigma_i[i] * eta
    return out


def forward_diffuse(sched: NoiseSchedule, tau0: np.ndarray, i: int, eta: np.ndarray) -> np.ndarray:
    """Corrupt a clean batch to inference level i."""
    sig, noi = sched.level(i)
    return sig * tau0 + noi * eta


def predict_clean(model: DenoiserModel, sched: NoiseSchedule, tau_i, i, obs_n, guide=None, beta_i=0.0):
    """Intermediate clean prediction tau~_0 from level i via the guided epsilon."""
    eps = model.epsilon(tau_i, int(sched.ts[i]), obs_n, sched)
    if guide is not None and beta_i != 0.0:
        eps = eps + beta_i * guide
    sig, noi = sched.level(i)
    return (tau_i - noi * eps) / sig


def sample(
    model: DenoiserModel,
    sched: NoiseSchedule,
    observation: np.ndarray | None,
    batch: int,
    rng: np.random.Generator,
    init: np.ndarray | None = None,
) -> list[Trajectory]:
    """Unconditional batch of reverse chains (inpainting-conditioned on observation)."""
    t_dim = (model.horizon, model.state_dim)
    tau = rng.standard_normal((batch, *t_dim)) if init is None else np.array(init, float)
    obs_n = None if observation is None else model.stats.normalize(np.asarray(observation, float))
    for i in range(sched.inference_steps, 0, -1):
        if obs_n is not None:
            tau[:, 0, :] = obs_n
        eta = rng.standard_normal(tau.shape) if sched.sigma_i[i] > 0 else None
        tau = reverse_step(model, sched, tau, i, obs_n, eta=eta)
    if obs_n is not None:
        tau[:, 0, :] = obs_n
    out = []
    for k in range(batch):
        states = model.stats.denormalize(tau[k])
        if observation is not None:
            states[0] = np.asarray(observation, float)
        out.append(Trajectory(states, 0.1))
    return out
