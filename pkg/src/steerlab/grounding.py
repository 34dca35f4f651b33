"""Grounding classifiers from success/failure trajectories, plus mode-based execution.

The classifier maps continuous states to a categorical mode belief and is
trained end-to-end from trajectory-level success labels through a
differentiable feasibility score

    f_{t,t+1} = phi(s_t)^T F phi(s_{t+1})

where F is the signed feasibility matrix (0 feasible, -m for m skipped modes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Polygon
from .nets import Adam, Mlp
from .world import LabeledTrajectory, Trajectory, World, label_executed


# --- feasibility ------------------------------------------------------------


@dataclass
class FeasibilityMatrix:
    """K x K signed transition costs over mode ids (0 on feasible edges)."""

    mode_ids: list[int]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, float)
        k = len(self.mode_ids)
        if self.matrix.shape != (k, k):
            raise ValueError("feasibility matrix shape mismatch")
        if not np.allclose(np.diag(self.matrix), 0.0):
            raise ValueError("feasibility diagonal must be zero")
        if (self.matrix > 0).any():
            raise ValueError("feasibility entries must be <= 0")
        self._index = {m: i for i, m in enumerate(self.mode_ids)}

    @property
    def k(self) -> int:
        return len(self.mode_ids)

    def cost(self, a: int, b: int) -> float:
        return float(self.matrix[self._index[a], self._index[b]])

    def is_feasible(self, a: int, b: int) -> bool:
        return self.cost(a, b) == 0.0

    def to_json(self) -> dict:
        return {"modeIds": self.mode_ids, "matrix": self.matrix.tolist()}

    @staticmethod
    def from_json(d: dict) -> "FeasibilityMatrix":
        return FeasibilityMatrix([int(m) for m in d["modeIds"]], np.asarray(d["matrix"]))


@dataclass
class TaskSpecFile:
    """Static task description: mode names, adjacency, features, attractor hints."""

    mode_names: list[str]
    mode_ids: list[int]
    adjacency: list[tuple]  # undirected directly-connected pairs of mode ids
    features: list[str] = field(default_factory=lambda: ["x", "y"])
    pseudo_attractor_feature: str = "position"
    goal_mode: int | None = None

    def __post_init__(self):
        if len(self.mode_names) != len(self.mode_ids):
            raise ValueError("mode names and ids must align")
        if self.k < 2:
            raise ValueError("need at least 2 modes")
        if not self._connected():
            raise ValueError("adjacency must be connected")

    @property
    def k(self) -> int:
        return len(self.mode_ids)

    def _connected(self) -> bool:
        reach = {self.mode_ids[0]}
        stack = [self.mode_ids[0]]
        adj = self._adj()
        while stack:
            u = stack.pop()
            for v in adj.get(u, ()):  # noqa: B905
                if v not in reach:
                    reach.add(v)
                    stack.append(v)
        return reach == set(self.mode_ids)

    def _adj(self) -> dict:
        adj: dict[int, set] = {m: set() for m in self.mode_ids}
        for a, b in self.adjacency:
            adj[int(a)].add(int(b))
            adj[int(b)].add(int(a))
        return adj

    def to_json(self) -> dict:
        return {
            "modeNames": self.mode_names,
            "modeIds": self.mode_ids,
            "adjacency": [list(p) for p in self.adjacency],
            "features": self.features,
            "pseudoAttractorFeature": self.pseudo_attractor_feature,
            "goalMode": self.goal_mode,
        }

    @staticmethod
    def from_json(d: dict) -> "TaskSpecFile":
        return TaskSpecFile(
            mode_names=list(d["modeNames"]),
            mode_ids=[int(m) for m in d["modeIds"]],
            adjacency=[tuple(int(x) for x in p) for p in d["adjacency"]],
            features=list(d.get("features", ["x", "y"])),
            pseudo_attractor_feature=d.get("pseudoAttractorFeature", "position"),
            goal_mode=d.get("goalMode"),
        )

    @staticmethod
    def for_chain_world(world: World) -> "TaskSpecFile":
        ids = sorted([r.mode_id for r in world.mode_regions] + ([world.free_space_mode] if world.free_space_mode is not None else []))
        return TaskSpecFile(
            mode_names=[f"mode{m}" for m in ids],
            mode_ids=ids,
            adjacency=[(a, b) for a, b in zip(ids, ids[1:])],
            goal_mode=world.goal_mode,
        )


def build_feasibility(spec: TaskSpecFile) -> FeasibilityMatrix:
    """Entries are negative BFS shortest-path hop counts minus one (0 = adjacent)."""
    k = spec.k
    adj = spec._adj()
    mat = np.zeros((k, k))
    for i, a in enumerate(spec.mode_ids):
        # BFS hop counts from a
        dist = {a: 0}
        frontier = [a]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        for j, b in enumerate(spec.mode_ids):
            if a == b:
                continue
            mat[i, j] = -(dist[b] - 1)
    return FeasibilityMatrix(list(spec.mode_ids), mat)


# --- classifier -------------------------------------------------------------


@dataclass
class ClassifierModel:
    net: Mlp  # softmax head over K modes
    mode_ids: list[int]
    state_dim: int = 2

    def classify(self, s: np.ndarray) -> np.ndarray:
        """Categorical mode belief for one state or a batch."""
        return self.net.forward(np.asarray(s, float))

    def predict(self, s: np.ndarray) -> np.ndarray:
        b = np.atleast_2d(self.classify(s))
        return np.asarray(self.mode_ids)[b.argmax(axis=1)]

    def save(self, path):
        d = {"net": self.net.to_checkpoint(), "modeIds": self.mode_ids, "stateDim": self.state_dim}
        with open(path, "w") as f:
            json.dump(d, f)

    @staticmethod
    def load(path) -> "ClassifierModel":
        with open(path) as f:
            d = json.load(f)
        return ClassifierModel(Mlp.from_checkpoint(d["net"]), [int(m) for m in d["modeIds"]], int(d["stateDim"]))


@dataclass
class DynamicsHead:
    """Per-mode next-delta predictor: state delta -> K x state_dim deltas."""

    net: Mlp
    k: int
    state_dim: int = 2

    def predict(self, deltas: np.ndarray) -> np.ndarray:
        out = self.net.forward(np.atleast_2d(np.asarray(deltas, float)))
        return out.reshape(len(out), self.k, self.state_dim)


@dataclass
class ClassifierConfig:
    lambda_s: float = 1.0
    lambda_f: float = 1.0
    lambda_i: float = 1.0
    lambda_d: float = 0.1
    underactuated: bool = False
    hidden: tuple = (64, 64)
    dyn_hidden: tuple = (32,)
    epochs: int = 200
    batch_trajs: int = 64
    lr: float = 2e-3
    lr_decay: bool = True
    weight_decay: float = 0.0  # decoupled
    # annealed monotone-alignment auxiliary: successful trajectories reduce to
    # the K-step chain, so their states can be soft-labeled by a Viterbi
    # alignment against current beliefs. Weight decays to zero over
    # align_frac of training, after which the objective is exactly L_full.
    align_weight: float = 2.0
    align_frac: float = 0.6
    seed: int = 0
    log_every: int = 0


def classifier_loss(
    net: Mlp,
    dyn: Mlp | None,
    trajs: list[LabeledTrajectory],
    feas: FeasibilityMatrix,
    cfg: ClassifierConfig,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Full training loss and exact parameter gradients for a trajectory batch.

    Loss terms: success/failure feasibility scores, endpoint cross-entropy,
    and (optionally) the per-mode forward-dynamics regression.
    """
    k = feas.k
    f_mat = feas.matrix
    idx0 = 0
    succ_idx, fail_idx = [], []
    states = []
    spans = []
    for tr in trajs:
        t_len = len(tr.traj)
        states.append(tr.traj.states)
        spans.append((idx0, idx0 + t_len))
        (succ_idx if tr.success else fail_idx).append(len(spans) - 1)
        idx0 += t_len
    if not succ_idx or not fail_idx:
        raise ValueError("training needs both success and failure trajectories (negative data are necessary)")
    x = np.concatenate(states, axis=0)
    beliefs, cache = net.forward_cached(x)
    d_beliefs = np.zeros_like(beliefs)
    m_count, n_count = len(succ_idx), len(fail_idx)
    sigma1 = np.zeros(k)
    sigma1[0] = 1.0
    sigmak = np.zeros(k)
    sigmak[-1] = 1.0
    loss = 0.0
    # success / failure feasibility terms
    for si, (lo, hi) in enumerate(spans):
        b = beliefs[lo:hi]
        fscore = np.einsum("ti,ij,tj->t", b[:-1], f_mat, b[1:])
        total = fscore.sum()
        if si in succ_idx:
            w = -cfg.lambda_s / (m_count * (hi - lo - 1))
            loss += w * total
            d_beliefs[lo : hi - 1] += w * (f_mat @ b[1:].T).T
            d_beliefs[lo + 1 : hi] += w * (f_mat.T @ b[:-1].T).T
        else:
            w = cfg.lambda_f / n_count
            if total > -1.0:
                loss += w * total
                d_beliefs[lo : hi - 1] += w * (f_mat @ b[1:].T).T
                d_beliefs[lo + 1 : hi] += w * (f_mat.T @ b[:-1].T).T
            else:
                loss += w * -1.0
    # endpoint pinning (cross-entropy to first/last demonstrated modes);
    # gradients go to the logits directly (probs - onehot), which stays finite
    # even when a belief underflows
    n_all = len(spans)
    logit_grad = np.zeros_like(beliefs)
    for lo, hi in spans:
        b1 = beliefs[lo]
        bt = beliefs[hi - 1]
        loss += -cfg.lambda_i / n_all * (np.log(max(b1[0], 1e-300)) + np.log(max(bt[-1], 1e-300)))
        logit_grad[lo] += cfg.lambda_i / n_all * (b1 - sigma1)
        logit_grad[hi - 1] += cfg.lambda_i / n_all * (bt - sigmak)
    dyn_grad = None
    if cfg.underactuated:
        if dyn is None:
            raise ValueError("underactuated loss needs a dynamics head")
        d_in, d_tgt, d_blo = [], [], []
        for lo, hi in spans:
            s = x[lo:hi]
            if hi - lo < 3:
                continue
            d_in.append(s[1:-1] - s[:-2])
            d_tgt.append(s[2:] - s[1:-1])
            d_blo.append(np.arange(lo + 1, hi - 1))
        din = np.concatenate(d_in)
        dtgt = np.concatenate(d_tgt)
        bsel = np.concatenate(d_blo)
        pred_flat, dyn_cache = dyn.forward_cached(din)
        kd = pred_flat.reshape(len(din), k, -1)
        bsub = beliefs[bsel]
        mix = np.einsum("nk,nkd->nd", bsub, kd)
        resid = mix - dtgt
        loss += cfg.lambda_d * float((resid * resid).sum())
        up_b = 2.0 * cfg.lambda_d * np.einsum("nd,nkd->nk", resid, kd)
        np.add.at(d_beliefs, bsel, up_b)
        up_dyn = 2.0 * cfg.lambda_d * np.einsum("nd,nk->nkd", resid, bsub).reshape(len(din), -1)
        dyn_grad, _ = dyn.backward_from_cache(dyn_cache, up_dyn)
    net_grad, _ = net.backward_from_cache(cache, d_beliefs, logit_extra=logit_grad)
    return float(loss), net_grad, dyn_grad


def viterbi_align(log_beliefs: np.ndarray, prior_w: float = 0.5) -> np.ndarray:
    """Best monotone class path 0 -> K-1 through per-state log beliefs.

    A weak phase prior breaks the ties of uninformative beliefs toward an
    even split instead of piling every transition at one end.
    """
    t_len, k = log_beliefs.shape
    phase = np.linspace(0, k - 1, t_len)
    score = log_beliefs - prior_w * (np.arange(k)[None, :] - phase[:, None]) ** 2 / k
    neg = -1e18
    dp = np.full((t_len, k), neg)
    bp = np.zeros((t_len, k), dtype=int)
    dp[0, 0] = score[0, 0]
    for t in range(1, t_len):
        stay = dp[t - 1]
        adv = np.concatenate([[neg], dp[t - 1][:-1]])
        take = adv > stay
        dp[t] = np.where(take, adv, stay) + score[t]
        bp[t] = np.where(take, np.arange(k) - 1, np.arange(k))
    path = [k - 1]
    for t in range(t_len - 1, 0, -1):
        path.append(bp[t, path[-1]])
    return np.array(path[::-1])


def train_classifier(
    data: list[LabeledTrajectory],
    feas: FeasibilityMatrix,
    spec: TaskSpecFile,
    cfg: ClassifierConfig = None,
) -> tuple[ClassifierModel, DynamicsHead | None, list[float]]:
    """Stochastic gradient training of the grounding classifier (and optional
    dynamics head); returns per-epoch loss history."""
    cfg = cfg or ClassifierConfig()
    if all(tr.success for tr in data) or not any(tr.success for tr in data):
        raise ValueError("training needs both success and failure trajectories (negative data are necessary)")
    state_dim = data[0].traj.states.shape[1]
    k = feas.k
    rng = np.random.default_rng(cfg.seed)
    net = Mlp([state_dim, *cfg.hidden, k], ["relu"] * len(cfg.hidden) + ["softmax"], seed=cfg.seed)
    # uniform initial beliefs keep every class's softmax gradient alive
    w0, b0, _, dout = net.layout[-1]
    net.params[w0 : b0 + dout] = 0.0
    dyn_net = None
    if cfg.underactuated:
        dyn_net = Mlp([state_dim, *cfg.dyn_hidden, k * state_dim], ["relu"] * len(cfg.dyn_hidden) + ["identity"], seed=cfg.seed + 1)
    opt = Adam(lr=cfg.lr)
    dyn_opt = Adam(lr=cfg.lr)
    losses = []
    n = len(data)
    succ_ids = [i for i, tr in enumerate(data) if tr.success]
    fail_ids = [i for i, tr in enumerate(data) if not tr.success]
    for epoch in range(cfg.epochs):
        if cfg.lr_decay:
            frac = epoch / max(cfg.epochs - 1, 1)
            decayed = cfg.lr * (0.05 + 0.95 * 0.5 * (1 + np.cos(np.pi * frac)))
            opt.lr = dyn_opt.lr = decayed
        order = rng.permutation(n)
        total = 0.0
        nb = 0
        for s0 in range(0, n, cfg.batch_trajs):
            idx = order[s0 : s0 + cfg.batch_trajs].tolist()
            # every batch needs both outcomes for a well-formed loss
            if not any(data[i].success for i in idx):
                idx.append(int(rng.choice(succ_ids)))
            if all(data[i].success for i in idx):
                idx.append(int(rng.choice(fail_ids)))
            batch = [data[i] for i in idx]
            loss, g_net, g_dyn = classifier_loss(net, dyn_net, batch, feas, cfg)
            lam_a = cfg.align_weight * max(0.0, 1.0 - epoch / max(cfg.align_frac * cfg.epochs, 1))
            if lam_a > 0:
                succ_batch = [tr for tr in batch if tr.success][:12]
                if succ_batch:
                    states = np.concatenate([tr.traj.states for tr in succ_batch])
                    bel, cache = net.forward_cached(states)
                    logb = np.log(np.maximum(bel, 1e-12))
                    targets = []
                    off = 0
                    for tr in succ_batch:
                        t_len = len(tr.traj)
                        targets.append(viterbi_align(logb[off : off + t_len]))
                        off += t_len
                    tgt = np.concatenate(targets)
                    onehot = np.zeros_like(bel)
                    onehot[np.arange(len(tgt)), tgt] = 1.0
                    dz = lam_a * (bel - onehot) / len(tgt)
                    g_align, _ = net.backward_from_cache(cache, np.zeros_like(bel), logit_extra=dz)
                    g_net = g_net + g_align
            opt.step(net, g_net)
            if cfg.weight_decay:
                net.params *= 1.0 - opt.lr * cfg.weight_decay
            if g_dyn is not None:
                dyn_opt.step(dyn_net, g_dyn)
            total += loss
            nb += 1
        losses.append(total / max(nb, 1))
        if cfg.log_every and (epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1):
            print(f"[train-classifier] epoch {epoch} loss {losses[-1]:.5f}")
    model = ClassifierModel(net, list(spec.mode_ids), state_dim)
    head = DynamicsHead(dyn_net, k, state_dim) if dyn_net is not None else None
    return model, head, losses


def classifier_accuracy(model: ClassifierModel, world: World, n_grid: int = 100) -> float:
    """Per-state mode accuracy on a uniform grid against the geometric oracle."""
    xs = np.linspace(world.bounds[0], world.bounds[2], n_grid)
    ys = np.linspace(world.bounds[1], world.bounds[3], n_grid)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    truth = world.modes_of_many(pts)
    pred = model.predict(pts)
    return float((pred == truth).mean())


def export_mode_grid(model: ClassifierModel, world: World, n_grid: int = 100) -> dict:
    """Argmax mode ids on a uniform grid; the UI overlay format."""
    xs = np.linspace(world.bounds[0], world.bounds[2], n_grid)
    ys = np.linspace(world.bounds[1], world.bounds[3], n_grid)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pred = model.predict(pts).reshape(n_grid, n_grid)
    return {"bounds": world.bounds.tolist(), "n": n_grid, "modes": pred.tolist()}


# --- kmeans segmentation baseline --------------------------------------------


def kmeans_mode_baseline(demos: list[Trajectory], k: int, rng: np.random.Generator, iters: int = 50):
    """kmeans++ clustering of demo states, clusters ordered by mean demo time.

    Returns a predict(points) -> mode-index-array callable (1-based mode order).
    """
    x = np.concatenate([d.states for d in demos])
    t_frac = np.concatenate([np.linspace(0, 1, len(d)) for d in demos])
    centers = [x[rng.integers(len(x))]]
    for _ in range(k - 1):
        d2 = np.min(np.stack([((x - c) ** 2).sum(axis=1) for c in centers]), axis=0)
        centers.append(x[rng.choice(len(x), p=d2 / d2.sum())])
    centers = np.stack(centers)
    for _ in range(iters):
        assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        new = np.stack([x[assign == j].mean(axis=0) if (assign == j).any() else centers[j] for j in range(k)])
        if np.allclose(new, centers):
            break
        centers = new
    assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    mean_time = np.array([t_frac[assign == j].mean() if (assign == j).any() else 1.0 for j in range(k)])
    order = np.argsort(mean_time)
    rank = np.empty(k, dtype=int)
    rank[order] = np.arange(1, k + 1)

    def predict(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        a = np.argmin(((pts[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        return rank[a]

    return predict


# --- mode-based execution ------------------------------------------------------


@dataclass
class ModeExecutor:
    """Closed loop: classify, run the active per-mode policy with a
    pseudo-attractor blend, monitor transitions, replan on invalid ones."""

    policies: dict  # mode id -> velocity policy
    model: ClassifierModel
    spec: TaskSpecFile
    feas: FeasibilityMatrix
    pseudo_attractors: dict  # mode id -> 2D point
    blend: float = 0.5
    engage_frac: float = 0.10  # of world diameter
    speed: float = 1.0

    def plan_next(self, mode: int) -> int | None:
        """Next mode along the demonstrated chain toward the goal."""
        ids = self.spec.mode_ids
        if self.spec.goal_mode is None or mode == self.spec.goal_mode:
            return None
        i = ids.index(mode)
        gi = ids.index(self.spec.goal_mode)
        return ids[i + 1] if i < gi else ids[i - 1]

    def velocity(self, x: np.ndarray, mode: int, world: World) -> np.ndarray:
        pol = self.policies.get(mode)
        v = pol.velocity(x[None])[0] if pol is not None else np.zeros(2)
        pa = self.pseudo_attractors.get(mode)
        if pa is not None:
            gap = pa - x
            dist = np.linalg.norm(gap)
            if dist > self.engage_frac * world.diameter:
                pull = gap / dist * self.speed
                v = (1 - self.blend) * v + self.blend * pull
        return v


def execute_mode_policy(
    executor: ModeExecutor,
    world: World,
    x0: np.ndarray,
    perturbations: list[tuple[int, np.ndarray]] | None = None,
    dt: float = 0.02,
    max_steps: int = 3000,
) -> LabeledTrajectory:
    """Run the GLiDE closed loop; label by the perturbation-aware oracle."""
    x = np.asarray(x0, float).copy()
    states = [x.copy()]
    pmap = {int(s): np.asarray(d, float) for s, d in (perturbations or [])}
    p_steps = []
    goal = executor.spec.goal_mode
    for step in range(max_steps):
        if step in pmap:
            x = x + pmap[step]
            p_steps.append(len(states))
            states.append(x.copy())
        mode = int(executor.model.predict(x[None])[0])
        # the environment, not the policy, detects task completion
        if goal is not None and world.mode_of(x) == goal:
            break
        v = executor.velocity(x, mode, world)
        nrm = np.linalg.norm(v)
        if nrm > 2.0 * executor.speed:
            v = v / nrm * 2.0 * executor.speed
        x = x + dt * v
        x = np.clip(x, world.bounds[:2], world.bounds[2:])
        states.append(x.copy())
    traj = Trajectory(np.array(states), dt)
    return label_executed(world, executor.feas, traj, p_steps)


# --- planning executive ---------------------------------------------------------


@dataclass
class ModeGridMap:
    """Rasterized mode map over world bounds; learned or geometric."""

    bounds: np.ndarray
    modes: np.ndarray  # (n, n) int grid, row = y index

    @staticmethod
    def from_classifier(model: ClassifierModel, world: World, n: int = 120) -> "ModeGridMap":
        xs = np.linspace(world.bounds[0], world.bounds[2], n)
        ys = np.linspace(world.bounds[1], world.bounds[3], n)
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        return ModeGridMap(world.bounds.copy(), model.predict(pts).reshape(n, n))

    @staticmethod
    def from_world(world: World, n: int = 120) -> "ModeGridMap":
        xs = np.linspace(world.bounds[0], world.bounds[2], n)
        ys = np.linspace(world.bounds[1], world.bounds[3], n)
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        return ModeGridMap(world.bounds.copy(), world.modes_of_many(pts).reshape(n, n))

    def mode_at(self, p: np.ndarray) -> int:
        return int(self.modes_at(np.asarray(p, float)[None])[0])

    def modes_at(self, pts: np.ndarray) -> np.ndarray:
        n = self.modes.shape[0]
        fx = (pts[:, 0] - self.bounds[0]) / (self.bounds[2] - self.bounds[0])
        fy = (pts[:, 1] - self.bounds[1]) / (self.bounds[3] - self.bounds[1])
        ix = np.clip((fx * (n - 1)).round().astype(int), 0, n - 1)
        iy = np.clip((fy * (n - 1)).round().astype(int), 0, n - 1)
        return self.modes[iy, ix]

    def cells_of(self, mode: int) -> np.ndarray:
        n = self.modes.shape[0]
        iy, ix = np.nonzero(self.modes == mode)
        xs = self.bounds[0] + ix / (n - 1) * (self.bounds[2] - self.bounds[0])
        ys = self.bounds[1] + iy / (n - 1) * (self.bounds[3] - self.bounds[1])
        return np.stack([xs, ys], axis=1)

    def guard_target(self, a: int, b: int) -> np.ndarray:
        """Centroid of a-cells bordering b-cells: the pseudo-guard to aim for."""
        m = self.modes
        mask = np.zeros_like(m, dtype=bool)
        for shift in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            rolled = np.roll(m, shift, axis=(0, 1))
            mask |= (m == a) & (rolled == b)
        if not mask.any():
            raise RuntimeError(f"no guard cells between modes {a} and {b}")
        iy, ix = np.nonzero(mask)
        n = m.shape[0]
        xs = self.bounds[0] + ix / (n - 1) * (self.bounds[2] - self.bounds[0])
        ys = self.bounds[1] + iy / (n - 1) * (self.bounds[3] - self.bounds[1])
        return np.array([xs.mean(), ys.mean()])

    def segment_allowed(self, a: np.ndarray, b: np.ndarray, allowed: set, step: float = None) -> bool:
        n = self.modes.shape[0]
        if step is None:
            step = (self.bounds[2] - self.bounds[0]) / n / 2
        length = float(np.linalg.norm(b - a))
        count = max(2, int(length / step) + 1)
        pts = a[None] + np.linspace(0, 1, count)[:, None] * (b - a)[None]
        return bool(np.isin(self.modes_at(pts), list(allowed)).all())


def rrt_plan(
    grid: ModeGridMap,
    start: np.ndarray,
    goal: np.ndarray,
    allowed: set,
    rng: np.random.Generator,
    max_iters: int = 800,
    step: float = 0.08,
    goal_bias: float = 0.2,
) -> np.ndarray | None:
    """RRT over grid cells restricted to the allowed mode set."""
    if grid.segment_allowed(start, goal, allowed):
        return np.stack([start, goal])
    nodes = [np.asarray(start, float)]
    parents = [-1]
    lo, hi = grid.bounds[:2], grid.bounds[2:]
    for _ in range(max_iters):
        target = goal if rng.random() < goal_bias else rng.uniform(lo, hi)
        arr = np.stack(nodes)
        nearest = int(np.argmin(((arr - target) ** 2).sum(axis=1)))
        base = nodes[nearest]
        d = target - base
        dist = np.linalg.norm(d)
        if dist < 1e-9:
            continue
        new = base + d / dist * min(step, dist)
        if not grid.segment_allowed(base, new, allowed):
            continue
        nodes.append(new)
        parents.append(nearest)
        if grid.segment_allowed(new, goal, allowed):
            path = [goal, new]
            i = len(nodes) - 1
            while parents[i] >= 0:
                i = parents[i]
                path.append(nodes[i])
            return np.stack(path[::-1])
    return None


def execute_planning(
    grid: ModeGridMap,
    spec: TaskSpecFile,
    feas: FeasibilityMatrix,
    world: World,
    x0: np.ndarray,
    rng: np.random.Generator,
    perturbations: list[tuple[int, np.ndarray]] | None = None,
    dt: float = 0.02,
    speed: float = 1.0,
    max_steps: int = 4000,
) -> LabeledTrajectory:
    """Waypoint execution: RRT inside the (non-convex) first mode, then
    straight potential-field descent toward each next guard; replans after
    perturbations using the mode map."""
    x = np.asarray(x0, float).copy()
    states = [x.copy()]
    pmap = {int(s): np.asarray(d, float) for s, d in (perturbations or [])}
    p_steps = []
    ids = spec.mode_ids
    goal_mode = spec.goal_mode
    waypoints: list[np.ndarray] = []
    step_len = dt * speed

    def replan(cur: np.ndarray) -> list[np.ndarray]:
        mode = grid.mode_at(cur)
        if mode == goal_mode:
            return []
        if mode not in ids:
            return []
        nxt = ids[min(ids.index(mode) + 1, len(ids) - 1)]
        target = grid.guard_target(mode, nxt)
        if mode == ids[0]:
            path = rrt_plan(grid, cur, target, {mode, nxt}, rng)
            if path is None:
                return []
            return list(path[1:])
        return [target]

    waypoints = replan(x)
    for step in range(max_steps):
        if step in pmap:
            x = x + pmap[step]
            p_steps.append(len(states))
            states.append(x.copy())
            waypoints = replan(x)
        mode = grid.mode_at(x)
        if goal_mode is not None and world.mode_of(x) == goal_mode:
            break
        if not waypoints:
            waypoints = replan(x)
            if not waypoints:
                break
        target = waypoints[0]
        gap = target - x
        dist = np.linalg.norm(gap)
        if dist < step_len * 1.5:
            waypoints.pop(0)
            if not waypoints:
                waypoints = replan(x)
            states.append(x.copy())
            continue
        x = x + gap / dist * step_len
        states.append(x.copy())
    traj = Trajectory(np.array(states), dt)
    return label_executed(world, feas, traj, p_steps)
