"""Worlds, trajectories, sensing and success labeling.

A world is either an obstacle world (maze-style: free space minus polygon
obstacles) or a mode world (ordered polygon regions with integer mode ids and
an optional free-space mode for the complement).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Polygon, as_points, polyline_collides, shared_boundary


@dataclass(frozen=True)
class Trajectory:
    """Fixed-horizon sequence of 2D states."""

    states: np.ndarray  # (T, 2)
    dt: float = 0.1

    def __post_init__(self):
        s = as_points(self.states)
        if len(s) < 2:
            raise ValueError("trajectory needs T >= 2 states")
        if not np.isfinite(s).all():
            raise ValueError("trajectory states must be finite")
        object.__setattr__(self, "states", s)

    def __len__(self) -> int:
        return len(self.states)

    def to_json(self) -> dict:
        return {"states": self.states.tolist(), "dt": self.dt}

    @staticmethod
    def from_json(d: dict) -> "Trajectory":
        return Trajectory(np.asarray(d["states"], float), float(d.get("dt", 0.1)))


@dataclass(frozen=True)
class LabeledTrajectory:
    """Trajectory plus per-step mode ids and a task-success bit."""

    traj: Trajectory
    mode_seq: np.ndarray  # (T,) int
    success: bool

    def __post_init__(self):
        m = np.asarray(self.mode_seq, dtype=int)
        if len(m) != len(self.traj):
            raise ValueError("mode_seq length must equal trajectory length")
        object.__setattr__(self, "mode_seq", m)

    def reduced_modes(self) -> list[int]:
        """Mode sequence with self-transitions removed."""
        out: list[int] = []
        for m in self.mode_seq.tolist():
            if not out or out[-1] != m:
                out.append(m)
        return out

    def to_json(self) -> dict:
        d = self.traj.to_json()
        d["modes"] = self.mode_seq.tolist()
        d["success"] = bool(self.success)
        return d

    @staticmethod
    def from_json(d: dict) -> "LabeledTrajectory":
        return LabeledTrajectory(Trajectory.from_json(d), np.asarray(d["modes"], int), bool(d["success"]))


@dataclass
class ModeRegion:
    mode_id: int
    polygon: Polygon
    name: str = ""


@dataclass
class World:
    """Axis-aligned bounded 2D world with obstacles and/or mode regions."""

    bounds: np.ndarray  # [x0, y0, x1, y1]
    obstacles: list[Polygon] = field(default_factory=list)
    mode_regions: list[ModeRegion] = field(default_factory=list)
    free_space_mode: int | None = None
    goal_mode: int | None = None
    name: str = "world"

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, float).reshape(4)
        if not (self.bounds[0] < self.bounds[2] and self.bounds[1] < self.bounds[3]):
            raise ValueError("bounds must satisfy x0 < x1 and y0 < y1")
        self.validate()

    def validate(self):
        for r in self.mode_regions:
            lo = r.polygon.vertices.min(axis=0)
            hi = r.polygon.vertices.max(axis=0)
            if lo[0] < self.bounds[0] - 1e-9 or lo[1] < self.bounds[1] - 1e-9:
                raise ValueError(f"mode {r.mode_id} leaves world bounds")
            if hi[0] > self.bounds[2] + 1e-9 or hi[1] > self.bounds[3] + 1e-9:
                raise ValueError(f"mode {r.mode_id} leaves world bounds")
        regions = self.ordered_regions()
        for i, a in enumerate(regions):
            for b in regions[i + 1 :]:
                if self._interiors_overlap(a.polygon, b.polygon):
                    raise ValueError(f"mode regions {a.mode_id} and {b.mode_id} overlap")
        for a, b in zip(regions, regions[1:]):
            if shared_boundary(a.polygon, b.polygon) is None:
                raise ValueError(f"consecutive modes {a.mode_id}->{b.mode_id} share no guard segment")

    @staticmethod
    def _interiors_overlap(p: Polygon, q: Polygon) -> bool:
        if q.contains_many(p.vertices, boundary=False).any() or p.contains_many(q.vertices, boundary=False).any():
            return True
        if p.contains(q.centroid, boundary=False) or q.contains(p.centroid, boundary=False):
            return True
        return False

    def ordered_regions(self) -> list[ModeRegion]:
        return sorted(self.mode_regions, key=lambda r: r.mode_id)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.bounds[2] - self.bounds[0], self.bounds[3] - self.bounds[1]))

    @property
    def width_height(self) -> np.ndarray:
        return np.array([self.bounds[2] - self.bounds[0], self.bounds[3] - self.bounds[1]])

    def sample_free(self, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
        """Uniform point in bounds avoiding obstacle interiors."""
        lo = self.bounds[:2]
        hi = self.bounds[2:]
        for _ in range(max_tries):
            p = rng.uniform(lo, hi)
            if not any(o.contains(p) for o in self.obstacles):
                return p
        raise RuntimeError("could not sample a free point; world fully blocked?")

    def in_bounds(self, p) -> bool:
        p = np.asarray(p, float)
        return bool(
            self.bounds[0] <= p[0] <= self.bounds[2] and self.bounds[1] <= p[1] <= self.bounds[3]
        )

    # --- sensing -------------------------------------------------------

    def sense(self, x) -> np.ndarray:
        """Boolean sensor vector: one indicator per mode region, lower id wins ties."""
        x = np.asarray(x, float)
        if not np.isfinite(x).all():
            raise ValueError("sense() requires a finite point")
        alpha = np.zeros(len(self.mode_regions), dtype=bool)
        for i, r in enumerate(self.ordered_regions()):
            if r.polygon.contains(x, boundary=True):
                alpha[i] = True
                break
        return alpha

    def label_of(self, alpha: np.ndarray) -> int:
        """L(alpha): mode id for a sensor vector; free-space code when all zeros."""
        idx = np.flatnonzero(alpha)
        if len(idx) == 0:
            if self.free_space_mode is None:
                raise ValueError("sensor vector is all-zero but world has no free-space mode")
            return int(self.free_space_mode)
        return int(self.ordered_regions()[idx[0]].mode_id)

    def mode_of(self, x) -> int:
        return self.label_of(self.sense(x))

    def modes_of_many(self, pts: np.ndarray) -> np.ndarray:
        """Vectorized mode_of over (N,2) points."""
        pts = as_points(pts)
        out = np.full(len(pts), -1, dtype=int)
        if self.free_space_mode is not None:
            out[:] = self.free_space_mode
        unassigned = np.ones(len(pts), dtype=bool)
        for r in self.ordered_regions():
            hit = unassigned & r.polygon.contains_many(pts, boundary=True)
            out[hit] = r.mode_id
            unassigned &= ~hit
        if (out < 0).any():
            raise ValueError("point outside all regions and no free-space mode declared")
        return out

    def region(self, mode_id: int) -> ModeRegion:
        for r in self.mode_regions:
            if r.mode_id == mode_id:
                return r
        raise KeyError(f"no mode region with id {mode_id}")

    def guard(self, a: int, b: int) -> np.ndarray | None:
        """Shared boundary segment between modes a and b (None if absent)."""
        try:
            return shared_boundary(self.region(a).polygon, self.region(b).polygon)
        except KeyError:
            return None

    # --- serialization --------------------------------------------------

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "bounds": self.bounds.tolist(),
            "obstacles": [o.vertices.tolist() for o in self.obstacles],
            "modes": [
                {"id": r.mode_id, "vertices": r.polygon.vertices.tolist(), "name": r.name}
                for r in self.mode_regions
            ],
            "goalMode": self.goal_mode,
            "freeSpaceMode": self.free_space_mode,
        }

    @staticmethod
    def from_json(d: dict) -> "World":
        return World(
            bounds=np.asarray(d["bounds"], float),
            obstacles=[Polygon(np.asarray(v, float)) for v in d.get("obstacles", [])],
            mode_regions=[
                ModeRegion(int(m["id"]), Polygon(np.asarray(m["vertices"], float)), m.get("name", ""))
                for m in d.get("modes", [])
            ],
            free_space_mode=d.get("freeSpaceMode"),
            goal_mode=d.get("goalMode"),
            name=d.get("name", "world"),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @staticmethod
    def load(path) -> "World":
        with open(path) as f:
            return World.from_json(json.load(f))


def label_trajectory(world: World, feas, traj: Trajectory) -> LabeledTrajectory:
    """Per-step mode via point-in-polygon; success iff the reduced mode sequence
    is a path of feasible edges ending at the goal mode.

    `feas` is a FeasibilityMatrix (grounding module) or any object with
    `.is_feasible(a, b)`.
    """
    if not world.mode_regions:
        raise ValueError("label_trajectory needs a world with mode regions")
    modes = world.modes_of_many(traj.states)
    lab = LabeledTrajectory(traj, modes, False)
    ok = _modes_feasible(lab.reduced_modes(), feas, world.goal_mode)
    return LabeledTrajectory(traj, modes, ok)


def _modes_feasible(reduced: list[int], feas, goal_mode) -> bool:
    for a, b in zip(reduced, reduced[1:]):
        if not feas.is_feasible(a, b):
            return False
    return goal_mode is None or reduced[-1] == goal_mode


def label_executed(world: World, feas, traj: Trajectory, perturb_steps: list[int]) -> LabeledTrajectory:
    """Label an executed rollout where instantaneous external displacements
    occurred at the given step indices; the displacement jumps themselves are
    exempt from the feasible-edge check (motion in between is not).
    """
    modes = world.modes_of_many(traj.states)
    cut = sorted(set(int(i) for i in perturb_steps))
    segments = []
    start = 0
    for c in cut:
        if start < c:
            segments.append(modes[start:c])
        start = c
    segments.append(modes[start:])
    ok = True
    for seg in segments:
        red: list[int] = []
        for m in seg.tolist():
            if not red or red[-1] != m:
                red.append(m)
        for a, b in zip(red, red[1:]):
            if not feas.is_feasible(a, b):
                ok = False
    if world.goal_mode is not None and modes[-1] != world.goal_mode:
        ok = False
    return LabeledTrajectory(traj, modes, ok)


# --- built-in worlds -----------------------------------------------------


def maze_world() -> World:
    """Four-room unit maze with wide doorways; obstacle world for the diffusion policy."""
    t = 0.04  # wall half-thickness
    walls = []

    def wall(x0, y0, x1, y1):
        walls.append(Polygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])))

    # central plus-shaped walls with door gaps
    wall(0.5 - t, 0.0, 0.5 + t, 0.18)
    wall(0.5 - t, 0.42, 0.5 + t, 0.58)
    wall(0.5 - t, 0.82, 0.5 + t, 1.0)
    wall(0.0, 0.5 - t, 0.18, 0.5 + t)
    wall(0.42, 0.5 - t, 0.58, 0.5 + t)
    wall(0.82, 0.5 - t, 1.0, 0.5 + t)
    return World(bounds=[0.0, 0.0, 1.0, 1.0], obstacles=walls, name="maze4")


def two_goal_world() -> World:
    """Open box with two goal regions; task-alignment analog of the kitchen domain."""
    left = Polygon(np.array([[0.08, 0.72], [0.32, 0.72], [0.32, 0.95], [0.08, 0.95]]))
    right = Polygon(np.array([[0.68, 0.72], [0.92, 0.72], [0.92, 0.95], [0.68, 0.95]]))
    return World(
        bounds=[0.0, 0.0, 1.0, 1.0],
        mode_regions=[ModeRegion(1, left, "left-goal"), ModeRegion(2, right, "right-goal")],
        free_space_mode=0,
        name="twogoal",
    )


def chain_world(n_modes: int = 5, seed: int = 0) -> World:
    """Polygon-chain navigation world: free space is mode 1, polygons are modes 2..K.

    The polygons fill most of the workspace (free space is the entry strip on
    the left plus thin margins); consecutive polygons share a full vertical
    edge, with corner positions randomized per seed under convexity.
    """
    if n_modes < 2:
        raise ValueError("need at least 2 modes")
    rng = np.random.default_rng(seed)
    k = n_modes - 1  # polygon count
    xs = np.sort(rng.uniform(-0.03, 0.03, size=k + 1) + np.linspace(0.28, 0.96, k + 1))
    regions = []
    # shared vertical edges: at x = xs[i], y-interval [ylo[i], yhi[i]]
    ylo = rng.uniform(0.03, 0.12, size=k + 1)
    yhi = rng.uniform(0.88, 0.97, size=k + 1)
    for i in range(k):
        quad = np.array(
            [
                [xs[i], ylo[i]],
                [xs[i + 1], ylo[i + 1]],
                [xs[i + 1], yhi[i + 1]],
                [xs[i], yhi[i]],
            ]
        )
        regions.append(ModeRegion(i + 2, Polygon(quad), f"mode{i + 2}"))
    return World(
        bounds=[0.0, 0.0, 1.0, 1.0],
        mode_regions=regions,
        free_space_mode=1,
        goal_mode=n_modes,
        name=f"chain{n_modes}",
    )


def scoop_world() -> World:
    """Four-mode scooping abstraction: reach (a) -> scoop (b) -> transport (c) -> done (d).

    Axes mimic spoon distance-to-soup and orientation. The reaching mode is
    the sensor complement (no sensors active), so it is the free-space mode
    rather than a polygon; mode b is a narrow convex wedge so mode policies
    fitted to curved demonstrations can exit it, exercising boundary
    estimation.
    """
    b = Polygon(np.array([[0.30, 0.30], [0.55, 0.42], [0.55, 0.58], [0.30, 0.70]]))
    c = Polygon(np.array([[0.55, 0.30], [0.80, 0.30], [0.80, 0.70], [0.55, 0.70]]))
    d = Polygon(np.array([[0.80, 0.25], [0.98, 0.25], [0.98, 0.75], [0.80, 0.75]]))
    return World(
        bounds=[0.0, 0.0, 1.0, 1.0],
        mode_regions=[
            ModeRegion(2, b, "scoop"),
            ModeRegion(3, c, "transport"),
            ModeRegion(4, d, "done"),
        ],
        free_space_mode=1,
        goal_mode=4,
        name="scoop",
    )


def carry_world() -> World:
    """Underactuated 1D carry abstraction embedded in the (robot_x, token_x) plane.

    Mode 1: token still at source. Mode 2: token attached to robot (diagonal
    band). Mode 3: token delivered. Everything else is free mode 0. The token
    coordinate only changes while the state is inside the band, so state
    deltas carry mode information.
    """
    src = Polygon(np.array([[-0.05, -0.02], [1.05, -0.02], [1.05, 0.10], [-0.05, 0.10]]))
    band = Polygon(np.array([[0.04, 0.10], [0.16, 0.10], [0.96, 0.90], [0.84, 0.90]]))
    dst = Polygon(np.array([[-0.05, 0.90], [1.05, 0.90], [1.05, 1.02], [-0.05, 1.02]]))
    return World(
        bounds=[-0.1, -0.1, 1.1, 1.1],
        mode_regions=[ModeRegion(1, src, "source"), ModeRegion(2, band, "carry"), ModeRegion(3, dst, "delivered")],
        free_space_mode=0,
        goal_mode=3,
        name="carry",
    )


BUILTIN_WORLDS = {
    "maze4": maze_world,
    "twogoal": two_goal_world,
    "chain3": lambda: chain_world(3, seed=3),
    "chain4": lambda: chain_world(4, seed=4),
    "chain5": lambda: chain_world(5, seed=5),
    "scoop": scoop_world,
    "carry": carry_world,
}


def get_world(name: str) -> World:
    if name in BUILTIN_WORLDS:
        return BUILTIN_WORLDS[name]()
    raise KeyError(f"unknown world '{name}'; builtins: {sorted(BUILTIN_WORLDS)}")
