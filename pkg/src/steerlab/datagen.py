"""Demonstration generation, counterfactual perturbation, and dataset files."""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np

from .geometry import VisibilityGraph, polyline_collides, rediscretize, resample_polyline
from .world import LabeledTrajectory, Trajectory, World

DEFAULT_HORIZON = 64
DEFAULT_STRIDE = 32
DEFAULT_STEP = 0.015  # world units per control step


def generate_maze_demos(
    world: World,
    steps: int,
    rng: np.random.Generator,
    horizon: int = DEFAULT_HORIZON,
    stride: int = DEFAULT_STRIDE,
    step_len: float = DEFAULT_STEP,
    dt: float = 0.1,
    retry_budget: int = 50,
) -> list[Trajectory]:
    """Collision-free random-walk demos chunked into fixed-horizon trajectories.

    Endpoints are sampled uniformly in free space and joined by the shortest
    collision-free polyline over a visibility graph, then re-discretized at
    constant speed. Deterministic per rng seed.
    """
    if steps <= 0:
        raise ValueError("steps must be positive")
    vg = VisibilityGraph(world.obstacles, inflate=0.012)
    chunks: list[Trajectory] = []
    walk: list[np.ndarray] = []
    emitted = 0
    cur = world.sample_free(rng)
    failures = 0
    while emitted < steps:
        goal = world.sample_free(rng)
        path = vg.shortest_path(cur, goal)
        if path is None:
            failures += 1
            if failures > retry_budget:
                raise RuntimeError("maze generation: no reachable endpoint pairs; world blocked")
            continue
        failures = 0
        pts = rediscretize(path, step_len)
        if walk:
            pts = pts[1:]  # previous leg ends where this one starts
        walk.extend(list(pts))
        cur = goal
        # emit complete windows, keep the tail for the next leg
        while len(walk) >= horizon:
            win = np.array(walk[:horizon])
            chunks.append(Trajectory(win, dt))
            emitted += horizon
            walk = walk[stride:]
    return chunks


def generate_twogoal_demos(
    world: World,
    count: int,
    rng: np.random.Generator,
    horizon: int = DEFAULT_HORIZON,
    dt: float = 0.1,
) -> list[Trajectory]:
    """Bimodal demo set: curved paths from a bottom start strip to either goal region."""
    demos = []
    regions = world.ordered_regions()
    for _ in range(count):
        start = np.array([rng.uniform(0.35, 0.65), rng.uniform(0.05, 0.15)])
        target_region = regions[int(rng.integers(len(regions)))]
        goal = target_region.polygon.centroid + rng.uniform(-0.06, 0.06, size=2)
        # quadratic bezier through a lateral control point for a curved, multimodal set
        side = np.sign(goal[0] - start[0]) or 1.0
        ctrl = np.array(
            [0.5 + side * rng.uniform(0.15, 0.35), rng.uniform(0.35, 0.55)]
        )
        t = np.linspace(0, 1, horizon)[:, None]
        pts = (1 - t) ** 2 * start + 2 * (1 - t) * t * ctrl + t**2 * goal
        demos.append(Trajectory(resample_polyline(pts, horizon), dt))
    return demos


def perturb_counterfactual(demo: Trajectory, rng: np.random.Generator, bounds=None) -> Trajectory:
    """Replace a random interior segment X..Y with straight legs X->Z->Y.

    Z is uniform in bounds (demo bounding box when bounds is None). The output
    is re-discretized at the demo's mean step length; the first and last
    states are preserved exactly.
    """
    s = demo.states
    if len(s) < 3:
        raise ValueError("need >= 3 states to perturb")
    if bounds is None:
        lo, hi = s.min(axis=0), s.max(axis=0)
    else:
        b = np.asarray(bounds, float).reshape(4)
        lo, hi = b[:2], b[2:]
    n = len(s)
    for _ in range(64):
        i, j = sorted(rng.integers(0, n, size=2))
        if i < j:
            break
    else:
        raise RuntimeError("could not sample distinct perturbation indices")
    z = rng.uniform(lo, hi)
    return perturb_at(demo, int(i), int(j), z)


def perturb_at(demo: Trajectory, i: int, j: int, z) -> Trajectory:
    """Deterministic X->Z->Y splice at explicit indices i < j and detour point z."""
    s = demo.states
    if not 0 <= i < j < len(s):
        raise ValueError("need 0 <= i < j < T")
    z = np.asarray(z, float)
    step = max(np.linalg.norm(np.diff(s, axis=0), axis=1).mean(), 1e-6)
    detour = np.concatenate([s[: i + 1], z[None], s[j:]], axis=0)
    out = rediscretize(detour, step)
    out[0], out[-1] = s[0], s[-1]
    return Trajectory(out, demo.dt)


def gripper_flip_perturbation(demo_robot: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """Carry-world analog of gripper toggles: flip the carry bit at a random step.

    Takes the robot coordinate track, returns the full (robot_x, token_x)
    state track simulated under a forced attach/detach event.
    """
    kind = "drop" if rng.random() < 0.5 else "nograsp"
    t_flip = int(rng.integers(len(demo_robot) // 4, 3 * len(demo_robot) // 4))
    return simulate_carry(demo_robot, flip_kind=kind, flip_step=t_flip), kind


def simulate_carry(
    robot_x: np.ndarray,
    token_start: float = 0.05,
    grab_dist: float = 0.05,
    flip_kind: str | None = None,
    flip_step: int = -1,
) -> np.ndarray:
    """Roll the underactuated token along a robot track.

    The token moves with the robot while attached. `flip_kind` forces a
    sensor-bit flip: 'drop' detaches at flip_step, 'nograsp' suppresses the
    initial attach.
    """
    robot_x = np.asarray(robot_x, float).ravel()
    token = float(token_start)
    attached = False
    out = np.zeros((len(robot_x), 2))
    for t, rx in enumerate(robot_x):
        if flip_kind == "drop" and t == flip_step:
            attached = False
        if not attached and abs(rx - token) <= grab_dist:
            if not (flip_kind == "nograsp" and token == token_start):
                attached = True
        if attached:
            token = rx
        out[t] = (rx, token)
    return out


def generate_chain_demos(
    world: World,
    count: int,
    rng: np.random.Generator,
    step_len: float = 0.02,
    dt: float = 0.02,
) -> list[Trajectory]:
    """Successful polygon-chain traversals from anywhere in free space.

    The pre-entry leg routes around the polygon chain on a visibility graph,
    then the path crosses each guard (jittered crossing points) to the goal
    region centroid.
    """
    regions = world.ordered_regions()
    first = regions[0]
    obstacles = [r.polygon for r in regions]
    vg = VisibilityGraph(obstacles, inflate=0.015)
    left = first.polygon.vertices[:, 0].min()
    ys = [v[1] for v in first.polygon.vertices if abs(v[0] - left) < 1e-9]
    demos = []
    while len(demos) < count:
        start = world.sample_free(rng)
        if any(r.polygon.contains(start) for r in regions):
            continue
        entry_y = rng.uniform(min(ys) + 0.05, max(ys) - 0.05)
        entry = np.array([left - 0.02, entry_y])
        pre = vg.shortest_path(start, entry)
        if pre is None:
            continue
        waypoints = list(pre) + [np.array([left + 1e-6, entry_y])]
        for a, b in zip(regions, regions[1:]):
            seg = world.guard(a.mode_id, b.mode_id)
            mid = seg.mean(axis=0)
            span = seg[1] - seg[0]
            waypoints.append(mid + span * rng.uniform(-0.25, 0.25))
        goal_c = regions[-1].polygon.centroid
        waypoints.append(goal_c + rng.uniform(-0.03, 0.03, size=2))
        demos.append(Trajectory(rediscretize(np.array(waypoints), step_len), dt))
    return demos


def generate_scoop_demos(world: World, count: int, rng: np.random.Generator, dt: float = 0.01) -> list[Trajectory]:
    """Curved scooping demos a -> b -> c -> d with a pronounced arc inside the
    scooping wedge, so a single linear mode policy overshoots its boundary."""
    demos = []
    for _ in range(count):
        jit = lambda s: rng.uniform(-s, s)
        p_a = np.array([0.10 + jit(0.04), 0.70 + jit(0.08)])
        g_ab = np.array([0.30, 0.50 + jit(0.10)])
        # arc through the wedge: dips toward the bottom lip before the b->c guard
        arc_mid = np.array([0.42 + jit(0.02), 0.38 + jit(0.02)])
        g_bc = np.array([0.55, 0.47 + jit(0.04)])
        mid_c = np.array([0.68 + jit(0.03), 0.50 + jit(0.06)])
        g_cd = np.array([0.80, 0.50 + jit(0.08)])
        end = np.array([0.90 + jit(0.04), 0.50 + jit(0.10)])
        pts = []
        for seg in (
            _bezier(p_a, 0.5 * (p_a + g_ab) + np.array([0, jit(0.05)]), g_ab, 40),
            _bezier(g_ab, arc_mid, g_bc, 60),
            _bezier(g_bc, mid_c, g_cd, 40),
            _bezier(g_cd, 0.5 * (g_cd + end), end, 30),
        ):
            pts.extend(seg if not pts else seg[1:])
        demos.append(Trajectory(np.array(pts), dt))
    return demos


def _bezier(p0, p1, p2, n):
    t = np.linspace(0, 1, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def generate_carry_dataset(
    count: int, rng: np.random.Generator, n_steps: int = 80
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Underactuated carry tracks: robot goes to the token, carries it to the
    target. Returns (success tracks, perturbed tracks) in the (robot_x,
    token_x) plane; perturbations are robot detours and forced carry-bit flips.
    """
    demos = []
    perturbed = []
    for i in range(count):
        start = rng.uniform(-0.02, 0.3)
        robot = np.concatenate(
            [
                np.linspace(start, 0.05, n_steps // 4),
                np.linspace(0.05, 0.95, n_steps - n_steps // 4),
            ]
        )
        robot += rng.normal(0, 0.004, size=len(robot))
        robot[-1] = 0.95
        demos.append(simulate_carry(robot))
        # robot-path detour (token follows per dynamics while attached)
        i0, i1 = sorted(rng.integers(5, len(robot) - 5, size=2))
        if i1 > i0 + 2:
            z = rng.uniform(-0.05, 1.05)
            det = np.concatenate([robot[: i0 + 1], [z], robot[i1:]])
            perturbed.append(simulate_carry(np.interp(np.linspace(0, 1, n_steps), np.linspace(0, 1, len(det)), det)))
        flipped, _ = gripper_flip_perturbation(robot, rng)
        perturbed.append(flipped)
    return demos, perturbed


# --- dataset files --------------------------------------------------------

MAGIC = b"STLB"
BINARY_VERSION = 1


def save_jsonl(path, items: list) -> None:
    with open(path, "w") as f:
        for it in items:
            f.write(json.dumps(it.to_json()) + "\n")


def load_jsonl(path, labeled: bool = None) -> list:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            want_labeled = labeled if labeled is not None else "modes" in d
            out.append(LabeledTrajectory.from_json(d) if want_labeled else Trajectory.from_json(d))
    return out


def save_binary(path, items: list[LabeledTrajectory]) -> None:
    """Packed little-endian dataset: magic, u32 version, u32 T, u32 count, then per
    record f64 dt, T x 2 f64 states, T i32 modes, u8 success."""
    if not items:
        raise ValueError("cannot save empty dataset")
    horizon = len(items[0].traj)
    if any(len(it.traj) != horizon for it in items):
        raise ValueError("binary format requires a uniform horizon")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", BINARY_VERSION, horizon, len(items)))
        for it in items:
            f.write(struct.pack("<d", it.traj.dt))
            f.write(it.traj.states.astype("<f8").tobytes())
            f.write(it.mode_seq.astype("<i4").tobytes())
            f.write(struct.pack("<B", 1 if it.success else 0))


def load_binary(path) -> list[LabeledTrajectory]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}; expected {MAGIC!r}")
        version, horizon, count = struct.unpack("<III", f.read(12))
        if version != BINARY_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        out = []
        for _ in range(count):
            (dt,) = struct.unpack("<d", f.read(8))
            states = np.frombuffer(f.read(horizon * 2 * 8), dtype="<f8").reshape(horizon, 2).copy()
            modes = np.frombuffer(f.read(horizon * 4), dtype="<i4").astype(int)
            (succ,) = struct.unpack("<B", f.read(1))
            out.append(LabeledTrajectory(Trajectory(states, dt), modes, bool(succ)))
        return out


def dataset_digest(items: list) -> str:
    """Stable content digest used by determinism tests."""
    import hashlib

    h = hashlib.sha256()
    for it in items:
        h.update(json.dumps(it.to_json(), sort_keys=True).encode())
    return h.hexdigest()
