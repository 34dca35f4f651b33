"""Sensor-based segmentation, stable LPV-DS mode policies, and the BC baseline.

The mode policy is a Gaussian-mixture-weighted sum of linear systems sharing
one attractor:

    xdot = f(x) = sum_k gamma_k(x) (A_k x + b_k),   b_k = -A_k x*

Each A_k is parameterized as skew - L L^T - eps*I so its symmetric part is
negative definite by construction (P = identity Lyapunov metric), which makes
the mixture globally asymptotically stable at x*.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .nets import Adam, Mlp
from .world import Trajectory, World


# --- Gaussian mixture ------------------------------------------------------


@dataclass
class Gmm:
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    weights: np.ndarray  # (K,)

    @property
    def k(self) -> int:
        return len(self.weights)

    def log_component_densities(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        n, d = x.shape
        out = np.zeros((n, self.k))
        for k in range(self.k):
            diff = x - self.means[k]
            cov = self.covs[k]
            chol = np.linalg.cholesky(cov)
            sol = np.linalg.solve(chol, diff.T)
            maha = (sol**2).sum(axis=0)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[:, k] = -0.5 * (maha + logdet + d * np.log(2 * np.pi))
        return out

    def posteriors(self, x: np.ndarray) -> np.ndarray:
        """Mixing weights gamma_k(x): responsibilities, rows sum to one."""
        logp = self.log_component_densities(np.atleast_2d(x)) + np.log(self.weights)[None, :]
        m = logp.max(axis=1, keepdims=True)
        p = np.exp(logp - m)
        return p / p.sum(axis=1, keepdims=True)

    def log_likelihood(self, x: np.ndarray) -> float:
        logp = self.log_component_densities(x) + np.log(self.weights)[None, :]
        m = logp.max(axis=1, keepdims=True)
        return float((m.squeeze(1) + np.log(np.exp(logp - m).sum(axis=1))).sum())

    def to_json(self) -> dict:
        return {"means": self.means.tolist(), "covs": self.covs.tolist(), "weights": self.weights.tolist()}

    @staticmethod
    def from_json(d: dict) -> "Gmm":
        return Gmm(np.asarray(d["means"]), np.asarray(d["covs"]), np.asarray(d["weights"]))


COV_FLOOR = 1e-6


def fit_gmm(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 100) -> Gmm:
    """Standard EM with a covariance floor against degenerate components."""
    x = np.atleast_2d(np.asarray(x, float))
    n, d = x.shape
    idx = rng.choice(n, size=k, replace=n < k)
    means = x[idx] + rng.normal(0, 1e-3, size=(k, d))
    covs = np.array([np.cov(x.T) + np.eye(d) * 1e-3 for _ in range(k)])
    weights = np.full(k, 1.0 / k)
    gmm = Gmm(means, covs, weights)
    prev = -np.inf
    for _ in range(iters):
        r = gmm.posteriors(x)  # (n, k)
        nk = r.sum(axis=0) + 1e-12
        means = (r.T @ x) / nk[:, None]
        covs = np.zeros((k, d, d))
        for j in range(k):
            diff = x - means[j]
            covs[j] = (r[:, j][:, None] * diff).T @ diff / nk[j]
            covs[j] += np.eye(d) * COV_FLOOR
        weights = nk / n
        gmm = Gmm(means, covs, weights)
        ll = gmm.log_likelihood(x)
        if abs(ll - prev) < 1e-8 * max(1.0, abs(ll)):
            break
        prev = ll
    return gmm


def select_gmm(x: np.ndarray, rng: np.random.Generator, k_max: int = 5, iters: int = 100) -> Gmm:
    """Information-criterion (BIC) sweep over component counts 1..k_max."""
    x = np.atleast_2d(np.asarray(x, float))
    n, d = x.shape
    best = None
    best_bic = np.inf
    for k in range(1, min(k_max, n) + 1):
        gmm = fit_gmm(x, k, rng, iters)
        p = k * (d + d * (d + 1) // 2) + (k - 1)
        bic = -2.0 * gmm.log_likelihood(x) + p * np.log(n)
        if bic < best_bic:
            best_bic = bic
            best = gmm
    return best


# --- LPV-DS ---------------------------------------------------------------


@dataclass
class LpvDs:
    """Stable mixture of linear systems with shared attractor."""

    A: np.ndarray  # (K, d, d)
    b: np.ndarray  # (K, d)
    gmm: Gmm
    attractor: np.ndarray  # (d,)

    def velocity(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        gamma = self.gmm.posteriors(x)  # (n, K)
        lin = np.einsum("kij,nj->nki", self.A, x) + self.b[None]  # (n, K, d)
        return np.einsum("nk,nkd->nd", gamma, lin)

    def certificate(self) -> float:
        """Max eigenvalue of A_k + A_k^T over components (must be < 0)."""
        worst = -np.inf
        for a in self.A:
            worst = max(worst, float(np.linalg.eigvalsh(a + a.T).max()))
        return worst

    def lyapunov(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        d = x - self.attractor
        return (d * d).sum(axis=1)

    def to_json(self) -> dict:
        return {
            "K": self.gmm.k,
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "gmm": self.gmm.to_json(),
            "attractor": self.attractor.tolist(),
        }

    @staticmethod
    def from_json(d: dict) -> "LpvDs":
        return LpvDs(
            np.asarray(d["A"]), np.asarray(d["b"]), Gmm.from_json(d["gmm"]), np.asarray(d["attractor"])
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @staticmethod
    def load(path) -> "LpvDs":
        with open(path) as f:
            return LpvDs.from_json(json.load(f))


@dataclass
class DsFitConfig:
    k_max: int = 5
    eps_margin: float = 1e-3
    fit_iters: int = 800
    lr: float = 0.05
    seed: int = 0


def _assemble_A(params: np.ndarray, k: int, eps: float) -> np.ndarray:
    """params per component: (l11, l21, l22, s) -> A = skew(s) - L L^T - eps I."""
    A = np.zeros((k, 2, 2))
    for j in range(k):
        l11, l21, l22, s = params[4 * j : 4 * j + 4]
        L = np.array([[l11, 0.0], [l21, l22]])
        A[j] = np.array([[0.0, -s], [s, 0.0]]) - L @ L.T - eps * np.eye(2)
    return A


def fit_lpvds(
    x: np.ndarray, xdot: np.ndarray, attractor, cfg: DsFitConfig = None
) -> LpvDs:
    """Fit mixing model by EM (BIC-selected K) and linear systems by gradient
    descent on velocity MSE with stability enforced by construction."""
    cfg = cfg or DsFitConfig()
    x = np.atleast_2d(np.asarray(x, float))
    xdot = np.atleast_2d(np.asarray(xdot, float))
    attractor = np.asarray(attractor, float)
    rng = np.random.default_rng(cfg.seed)
    gmm = select_gmm(x, rng, cfg.k_max)
    k = gmm.k
    gamma = gmm.posteriors(x)  # fixed during the A-fit
    rel = x - attractor
    params = SimpleNamespace(params=np.tile([1.0, 0.0, 1.0, 0.0], k))
    opt = Adam(lr=cfg.lr)
    n = len(x)
    for it in range(cfg.fit_iters):
        A = _assemble_A(params.params, k, cfg.eps_margin)
        pred = np.einsum("nk,kij,nj->ni", gamma, A, rel)
        resid = pred - xdot
        # dL/dA_k = (2/n) sum_n gamma_nk resid_n rel_n^T
        ga = np.einsum("nk,ni,nj->kij", gamma, resid, rel) * (2.0 / n)
        grad = np.zeros_like(params.params)
        for j in range(k):
            g = ga[j]
            l11, l21, l22, s = params.params[4 * j : 4 * j + 4]
            L = np.array([[l11, 0.0], [l21, l22]])
            gl = -(g + g.T) @ L
            grad[4 * j : 4 * j + 4] = (gl[0, 0], gl[1, 0], gl[1, 1], g[1, 0] - g[0, 1])
        opt.step(params, grad)
    A = _assemble_A(params.params, k, cfg.eps_margin)
    b = -np.einsum("kij,j->ki", A, attractor)
    ds = LpvDs(A, b, gmm, attractor)
    if ds.certificate() >= -1e-9:
        raise RuntimeError("stability certificate violated after fit (should be impossible)")
    return ds


# --- behavior-cloning baseline ---------------------------------------------


@dataclass
class BcPolicy:
    """Plain velocity regressor: 2x100 relu hidden, tanh output scaled to +-50."""

    net: Mlp
    out_scale: float = 50.0

    @staticmethod
    def new(seed: int = 0, hidden: int = 100) -> "BcPolicy":
        return BcPolicy(Mlp([2, hidden, hidden, 2], ["relu", "relu", "tanh"], seed=seed))

    def velocity(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        return self.out_scale * self.net.forward(x)


def train_bc(x: np.ndarray, xdot: np.ndarray, epochs: int = 1500, lr: float = 1e-3, seed: int = 0) -> BcPolicy:
    policy = BcPolicy.new(seed=seed)
    x = np.atleast_2d(np.asarray(x, float))
    target = np.atleast_2d(np.asarray(xdot, float)) / policy.out_scale
    opt = Adam(lr=lr)
    net = policy.net
    for _ in range(epochs):
        pred, cache = net.forward_cached(x)
        diff = pred - target
        pgrad, _ = net.backward_from_cache(cache, 2.0 * diff / diff.size)
        opt.step(net, pgrad)
    return policy


# --- segmentation -----------------------------------------------------------


@dataclass
class Segment:
    demo: int
    mode: int
    next_mode: int | None
    x: np.ndarray
    xdot: np.ndarray


@dataclass
class SegmentedDemos:
    segments: list[Segment]
    edges: set = field(default_factory=set)

    def modes(self) -> list[int]:
        return sorted({s.mode for s in self.segments})

    def samples(self, mode: int, next_mode: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        xs, vs = [], []
        for s in self.segments:
            if s.mode != mode:
                continue
            if next_mode is not None and s.next_mode != next_mode:
                continue
            xs.append(s.x)
            vs.append(s.xdot)
        if not xs:
            raise KeyError(f"no segments for mode {mode} (next={next_mode})")
        return np.concatenate(xs), np.concatenate(vs)

    def attractor(self, mode: int, next_mode: int | None = None) -> np.ndarray:
        """Mean of the last states of matching segments."""
        last = [
            s.x[-1]
            for s in self.segments
            if s.mode == mode and (next_mode is None or s.next_mode == next_mode)
        ]
        if not last:
            raise KeyError(f"no segments for mode {mode} (next={next_mode})")
        return np.mean(np.stack(last), axis=0)


def segment(demos: list[Trajectory], world: World, allowed_modes: set | None = None) -> SegmentedDemos:
    """Split demos into contiguous same-sensor-state runs with velocity samples."""
    segs: list[Segment] = []
    edges = set()
    for di, demo in enumerate(demos):
        modes = world.modes_of_many(demo.states)
        if allowed_modes is not None:
            unseen = set(modes.tolist()) - set(allowed_modes)
            if unseen:
                raise ValueError(f"demo {di} visits undeclared sensor state(s) {sorted(unseen)}")
        vel = np.gradient(demo.states, axis=0) / demo.dt
        start = 0
        for t in range(1, len(modes) + 1):
            if t == len(modes) or modes[t] != modes[start]:
                nxt = int(modes[t]) if t < len(modes) else None
                segs.append(Segment(di, int(modes[start]), nxt, demo.states[start:t], vel[start:t]))
                if nxt is not None:
                    edges.add((int(modes[start]), nxt))
                start = t
    return SegmentedDemos(segs, edges)


# --- rollouts ---------------------------------------------------------------


@dataclass
class RolloutResult:
    traj: Trajectory
    status: str  # reached | exited | timeout | diverged
    exit_state: np.ndarray | None = None  # first out-of-region state
    last_in: np.ndarray | None = None  # state one step before exit
    perturb_steps: list = field(default_factory=list)


def rollout(
    policy,
    x0,
    dt: float = 0.01,
    max_steps: int = 4000,
    attractor=None,
    reach_tol: float = 1e-3,
    region=None,
    modulator=None,
    perturbations: list[tuple[int, np.ndarray]] | None = None,
    diverge_dist: float = 10.0,
) -> RolloutResult:
    """Explicit-Euler integration of a velocity policy with an optional
    modulation hook, stop region, and instantaneous displacement schedule."""
    x = np.asarray(x0, float).copy()
    states = [x.copy()]
    pmap = {int(s): np.asarray(d, float) for s, d in (perturbations or [])}
    ptimes = []
    status = "timeout"
    exit_state = None
    last_in = None
    for step in range(max_steps):
        if step in pmap:
            x = x + pmap[step]
            ptimes.append(len(states))
            states.append(x.copy())
        v = policy.velocity(x[None])[0]
        if modulator is not None:
            v = modulator(x[None], v[None])[0]
        x = x + dt * v
        states.append(x.copy())
        if attractor is not None and np.linalg.norm(x - attractor) < reach_tol:
            status = "reached"
            break
        if region is not None and not region.contains(x):
            status = "exited"
            exit_state = x.copy()
            last_in = states[-2].copy()
            break
        if np.linalg.norm(x - states[0]) > diverge_dist:
            status = "diverged"
            break
    return RolloutResult(Trajectory(np.array(states), dt), status, exit_state, last_in, ptimes)


def rollout_batch(
    policy,
    x0: np.ndarray,
    dt: float = 0.01,
    max_steps: int = 4000,
    attractor=None,
    reach_tol: float = 1e-3,
    region=None,
    modulator=None,
    diverge_dist: float = 10.0,
):
    """Vectorized rollouts sharing one policy; returns per-rollout status plus
    exit bookkeeping for boundary estimation.

    Statuses: reached | exited | timeout | diverged.
    """
    x = np.atleast_2d(np.asarray(x0, float)).copy()
    n = len(x)
    start = x.copy()
    status = np.array(["timeout"] * n, dtype=object)
    alive = np.ones(n, dtype=bool)
    exit_states = [None] * n
    last_ins = [None] * n
    for _ in range(max_steps):
        if not alive.any():
            break
        xa = x[alive]
        v = policy.velocity(xa)
        if modulator is not None:
            v = modulator(xa, v)
        xn = xa + dt * v
        idx = np.flatnonzero(alive)
        if attractor is not None:
            hit = np.linalg.norm(xn - attractor, axis=1) < reach_tol
            for i in idx[hit]:
                status[i] = "reached"
                alive[i] = False
        if region is not None:
            outside = ~region.contains_many(xn)
            for pos, i in enumerate(idx):
                if outside[pos] and status[i] == "timeout":
                    status[i] = "exited"
                    exit_states[i] = xn[pos].copy()
                    last_ins[i] = xa[pos].copy()
                    alive[i] = False
        far = np.linalg.norm(xn - start[idx], axis=1) > diverge_dist
        for pos, i in enumerate(idx):
            if far[pos] and status[i] == "timeout":
                status[i] = "diverged"
                alive[i] = False
        x[idx] = xn
    return status, x, exit_states, last_ins
