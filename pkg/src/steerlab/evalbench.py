"""Metrics, experiment recipes, and report emission.

Recipes reproduce the desk-scale analogs: maze sketch steering (alignment vs
collision tradeoff), the product-vs-sum bimodal toy, single-mode invariance/
reachability grids, the multi-step scooping closed loop, and the grounded
navigation benchmark. Reports carry their raw trials so every aggregate can
be recomputed (audit trail).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen
from .diffusion import DenoiserModel, NoiseSchedule, TrainConfig, train_denoiser
from .geometry import polyline_collides
from .grounding import (
    ClassifierConfig,
    ClassifierModel,
    FeasibilityMatrix,
    ModeExecutor,
    ModeGridMap,
    TaskSpecFile,
    build_feasibility,
    classifier_accuracy,
    execute_mode_policy,
    execute_planning,
    kmeans_mode_baseline,
    train_classifier,
)
from .lpvds import DsFitConfig, fit_lpvds, rollout_batch, segment, train_bc
from .ltlspec import SCOOP_SPEC, compile_spec_text
from .modeguard import learn_guards
from .modesys import build_mode_system, run_closed_loop
from .steering import Interaction, SteerConfig, batch_objective, resample_sketch, steer
from .world import Trajectory, World, get_world, label_trajectory

OUTCOMES = ("AS", "AF", "MS", "MF")


# --- metrics -----------------------------------------------------------------


def motion_alignment(batch: list[Trajectory], sketch: np.ndarray, resample_mode="arclength"):
    """(min, avg) per-step L2 distance between the sketch and batch samples,
    using the same resampling as the sketch objective."""
    if not batch:
        raise ValueError("empty batch")
    t_len = len(batch[0])
    target = resample_sketch(np.asarray(sketch, float), t_len, resample_mode)
    dists = np.array([np.linalg.norm(tr.states - target, axis=1).mean() for tr in batch])
    return float(dists.min()), float(dists.mean())


def collision_rate(batch: list[Trajectory], world: World) -> float:
    if not batch:
        raise ValueError("empty batch")
    hits = sum(polyline_collides(tr.states, world.obstacles) for tr in batch)
    return hits / len(batch)


def task_alignment(
    batch: list[Trajectory],
    z: Interaction,
    world: World,
    intended_mode: int,
    resample_mode="arclength",
) -> str:
    """Joint outcome of the best-aligned sample: AS/AF/MS/MF.

    Aligned: the lowest-objective sample ends in the intended region.
    Successful: it ends in some goal region without collisions.
    """
    xi = batch_objective(batch, z, resample_mode)
    best = batch[int(np.argmin(xi))]
    final_mode = world.mode_of(best.states[-1])
    aligned = final_mode == intended_mode
    in_goal = any(final_mode == r.mode_id for r in world.mode_regions)
    collided = polyline_collides(best.states, world.obstacles) if world.obstacles else False
    success = in_goal and not collided
    return ("A" if aligned else "M") + ("S" if success else "F")


# --- reports -------------------------------------------------------------------


@dataclass
class TrialResult:
    method: str
    seed: int
    interaction: dict | None
    metrics: dict
    outcome: str | None = None

    def __post_init__(self):
        if self.outcome is not None and self.outcome not in OUTCOMES:
            raise ValueError(f"outcome must be one of {OUTCOMES}")
        if "collisionRate" in self.metrics and not 0.0 <= self.metrics["collisionRate"] <= 1.0:
            raise ValueError("collision rate out of range")

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "interaction": self.interaction,
            "metrics": self.metrics,
            "outcome": self.outcome,
        }

    @staticmethod
    def from_json(d: dict) -> "TrialResult":
        return TrialResult(d["method"], int(d["seed"]), d.get("interaction"), dict(d["metrics"]), d.get("outcome"))


@dataclass
class ExperimentReport:
    recipe: str
    config: dict
    seeds: list
    trials: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def compute_aggregates(self) -> dict:
        agg: dict[str, dict] = {}
        by_method: dict[str, list[TrialResult]] = {}
        for t in self.trials:
            by_method.setdefault(t.method, []).append(t)
        for method, ts in sorted(by_method.items()):
            entry: dict[str, float] = {"trials": len(ts)}
            keys = sorted({k for t in ts for k in t.metrics})
            for k in keys:
                vals = [t.metrics[k] for t in ts if k in t.metrics]
                entry[k] = float(np.mean(vals))
            outcomes = [t.outcome for t in ts if t.outcome]
            if outcomes:
                for o in OUTCOMES:
                    entry[o] = outcomes.count(o) / len(outcomes)
            agg[method] = entry
        return agg

    def finalize(self) -> "ExperimentReport":
        self.aggregates = self.compute_aggregates()
        return self

    def to_json(self) -> dict:
        return {
            "recipe": self.recipe,
            "config": self.config,
            "seeds": list(self.seeds),
            "trials": [t.to_json() for t in self.trials],
            "aggregates": self.aggregates,
            "extras": self.extras,
        }

    @staticmethod
    def from_json(d: dict) -> "ExperimentReport":
        return ExperimentReport(
            recipe=d["recipe"],
            config=dict(d["config"]),
            seeds=list(d["seeds"]),
            trials=[TrialResult.from_json(t) for t in d["trials"]],
            aggregates=dict(d.get("aggregates", {})),
            extras=dict(d.get("extras", {})),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = sorted({k for t in self.trials for k in t.metrics})
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "seed", "outcome", *keys])
        for t in self.trials:
            w.writerow([t.method, t.seed, t.outcome or "", *[repr(t.metrics.get(k, "")) for k in keys]])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"# {self.recipe}", ""]
        methods = sorted(self.aggregates)
        keys = sorted({k for m in methods for k in self.aggregates[m] if k != "trials"})
        lines.append("| method | " + " | ".join(keys) + " |")
        lines.append("|" + "---|" * (len(keys) + 1))
        for m in methods:
            row = [m] + [f"{self.aggregates[m].get(k, float('nan')):.4g}" for k in keys]
            lines.append("| " + " | ".join(row) + " |")
        return "\n".join(lines) + "\n"

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{self.recipe}.json", "w") as f:
            json.dump(self.to_json(), f, indent=1)
        (out / f"{self.recipe}.csv").write_text(self.to_csv())
        (out / f"{self.recipe}.md").write_text(self.to_markdown())


class MissingArtifact(FileNotFoundError):
    pass


# --- artifact builders -----------------------------------------------------------


def _cfg_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def maze_dp_defaults() -> dict:
    return {
        "world": "maze4",
        "steps": 200_000,
        "seed": 7,
        "epochs": 180,
        "batch": 256,
        "hidden": [384, 384],
        "lr": 1e-3,
        "trainSteps": 100,
        "inferenceSteps": 10,
    }


def ensure_maze_dp(artifacts_dir, cfg: dict | None = None, log=print):
    """Train (or load cached) maze diffusion policy; returns (model, sched, path)."""
    cfg = {**maze_dp_defaults(), **(cfg or {})}
    art = Path(artifacts_dir)
    art.mkdir(parents=True, exist_ok=True)
    path = art / f"dp-{cfg['world']}-{_cfg_hash(cfg)}.json"
    if path.exists():
        model, sched = DenoiserModel.load(path)
        return model, sched, path
    world = get_world(cfg["world"])
    rng = np.random.default_rng(cfg["seed"])
    if cfg["world"] == "twogoal":
        demos = datagen.generate_twogoal_demos(world, cfg["steps"] // datagen.DEFAULT_HORIZON, rng)
    else:
        demos = datagen.generate_maze_demos(world, cfg["steps"], rng)
    log(f"[artifacts] training diffusion policy on {len(demos)} chunks ({cfg['steps']} steps)")
    model, sched, losses = train_denoiser(
        demos,
        TrainConfig(
            epochs=cfg["epochs"],
            batch=cfg["batch"],
            hidden=tuple(cfg["hidden"]),
            lr=cfg["lr"],
            seed=cfg["seed"],
            train_steps=cfg["trainSteps"],
            inference_steps=cfg["inferenceSteps"],
        ),
    )
    model.net.meta["trainLossHistory"] = [round(x, 6) for x in losses[:: max(1, len(losses) // 50)]]
    model.net.meta["config"] = cfg
    model.save(path, sched)
    return model, sched, path


def require_artifact(path, build_hint: str):
    if not Path(path).exists():
        raise MissingArtifact(f"missing artifact {path}; build it first: {build_hint}")


# --- recipe: maze2d ------------------------------------------------------------


def synthetic_sketch(world: World, start: np.ndarray, rng: np.random.Generator, length: float = 0.9):
    """Curved sketch from the start toward a random far target; not collision
    checked on purpose (constraint-violating inputs are part of the benchmark)."""
    for _ in range(64):
        target = rng.uniform(world.bounds[:2], world.bounds[2:])
        if np.linalg.norm(target - start) > 0.4:
            break
    ctrl = 0.5 * (start + target) + rng.uniform(-0.25, 0.25, size=2)
    t = np.linspace(0, 1, 48)[:, None]
    pts = (1 - t) ** 2 * start + 2 * (1 - t) * t * ctrl + t**2 * target
    seg = pts[1:] - pts[:-1]
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])
    if arc[-1] > length:
        pts = pts[arc <= length]
    return np.clip(pts, world.bounds[:2], world.bounds[2:])


def run_maze2d(cfg: dict, seeds, artifacts_dir, log=print) -> ExperimentReport:
    methods = cfg.get("methods", ["RS", "PR", "OP", "BI", "GD", "SS"])
    model, sched, _ = ensure_maze_dp(artifacts_dir, cfg.get("dp"), log=log)
    world = get_world(cfg.get("world", "maze4"))
    betas = cfg.get("betas", {"GD": 20.0, "SS": 60.0})
    mcmc = cfg.get("mcmcSteps", 4)
    batch = cfg.get("batch", 32)
    report = ExperimentReport("maze2d", cfg, list(seeds))
    for seed in seeds:
        rng = np.random.default_rng(int(seed))
        start = world.sample_free(rng)
        sketch = synthetic_sketch(world, start, rng)
        z = Interaction("sketch", sketch=sketch)
        for method in methods:
            scfg = SteerConfig(
                method=method,
                guide_ratio=betas.get(method, 0.0),
                mcmc_steps=mcmc if method == "SS" else 1,
                batch=batch,
                op_prefix=cfg.get("opPrefix", 16),
                seed=int(seed),
            )
            srng = np.random.default_rng(int(seed) * 1000 + 17)
            out = steer(model, sched, start, z, scfg, srng)
            mn, avg = motion_alignment(out, sketch)
            report.trials.append(
                TrialResult(
                    method,
                    int(seed),
                    z.to_json(),
                    {"minL2": mn, "avgL2": avg, "collisionRate": collision_rate(out, world)},
                )
            )
    return report.finalize()


# --- recipe: two-goal task alignment ---------------------------------------------


def run_twogoal(cfg: dict, seeds, artifacts_dir, log=print) -> ExperimentReport:
    dp_cfg = {"world": "twogoal", "steps": 40_000, "epochs": 160, "hidden": [256, 256], **cfg.get("dp", {})}
    model, sched, _ = ensure_maze_dp(artifacts_dir, dp_cfg, log=log)
    world = get_world("twogoal")
    methods = cfg.get("methods", ["RS", "GD", "SS"])
    betas = cfg.get("betas", {"GD": 20.0, "SS": 60.0})
    report = ExperimentReport("twogoal", cfg, list(seeds))
    for seed in seeds:
        rng = np.random.default_rng(int(seed))
        start = np.array([rng.uniform(0.4, 0.6), rng.uniform(0.06, 0.14)])
        intended = world.ordered_regions()[int(seed) % 2]
        z = Interaction("point", point=intended.polygon.centroid)
        for method in methods:
            scfg = SteerConfig(
                method=method,
                guide_ratio=betas.get(method, 0.0),
                mcmc_steps=cfg.get("mcmcSteps", 4) if method == "SS" else 1,
                batch=cfg.get("batch", 32),
                seed=int(seed),
            )
            srng = np.random.default_rng(int(seed) * 1000 + 29)
            out = steer(model, sched, start, z, scfg, srng)
            outcome = task_alignment(out, z, world, intended.mode_id)
            report.trials.append(TrialResult(method, int(seed), z.to_json(), {}, outcome))
    return report.finalize()


# --- recipe: product-vs-sum toy ---------------------------------------------------


TOY_CENTERS = np.array([[-1.5, 0.0], [1.5, 0.0]])
TOY_SIGMA = 0.35


def toy_logpdf(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    comps = []
    for c in TOY_CENTERS:
        d2 = ((x - c) ** 2).sum(axis=1)
        comps.append(-0.5 * d2 / TOY_SIGMA**2 - np.log(2 * np.pi * TOY_SIGMA**2))
    comps = np.stack(comps, axis=1) + np.log(0.5)
    m = comps.max(axis=1)
    return m + np.log(np.exp(comps - m[:, None]).sum(axis=1))


def ensure_toy_dp(artifacts_dir, cfg: dict | None = None, log=print):
    cfg = {"n": 4096, "epochs": 600, "batch": 256, "hidden": [128, 128], "seed": 3, "inferenceSteps": 25, **(cfg or {})}
    art = Path(artifacts_dir)
    art.mkdir(parents=True, exist_ok=True)
    path = art / f"dp-toy-{_cfg_hash(cfg)}.json"
    if path.exists():
        model, sched = DenoiserModel.load(path)
        return model, sched, path
    rng = np.random.default_rng(cfg["seed"])
    comp = rng.integers(0, 2, size=cfg["n"])
    pts = TOY_CENTERS[comp] + rng.normal(0, TOY_SIGMA, size=(cfg["n"], 2))
    data = [Trajectory(p[None].repeat(2, axis=0), 0.1) for p in pts]  # horizon-2 carrier
    log(f"[artifacts] training bimodal toy model on {cfg['n']} samples")
    model, sched, _ = train_denoiser(
        data,
        TrainConfig(
            epochs=cfg["epochs"],
            batch=cfg["batch"],
            hidden=tuple(cfg["hidden"]),
            seed=cfg["seed"],
            inference_steps=cfg["inferenceSteps"],
        ),
        conditioned=False,
    )
    model.save(path, sched)
    return model, sched, path


def run_gdss_toy(cfg: dict, seeds, artifacts_dir, log=print) -> ExperimentReport:
    model, sched, _ = ensure_toy_dp(artifacts_dir, cfg.get("dp"), log=log)
    target = np.asarray(cfg.get("target", [0.0, 1.2]), float)
    betas = cfg.get("betas", {"GD": 6.0, "SS": 18.0})
    report = ExperimentReport("gdss-toy", cfg, list(seeds))
    z = Interaction("point", point=target)
    for seed in seeds:
        for method in ("GD", "SS"):
            scfg = SteerConfig(
                method=method,
                guide_ratio=betas[method],
                mcmc_steps=cfg.get("mcmcSteps", 4) if method == "SS" else 1,
                batch=cfg.get("batch", 64),
                seed=int(seed),
            )
            srng = np.random.default_rng(int(seed) * 1000 + 31)
            out = steer(model, sched, None, z, scfg, srng)
            pts = np.stack([tr.states.mean(axis=0) for tr in out])
            logp = toy_logpdf(pts)
            within = np.linalg.norm(pts[:, None, :] - TOY_CENTERS[None], axis=2).min(axis=1) <= 3 * TOY_SIGMA
            report.trials.append(
                TrialResult(
                    method,
                    int(seed),
                    z.to_json(),
                    {"meanLogDensity": float(logp.mean()), "frac3Sigma": float(within.mean())},
                )
            )
    return report.finalize()


# --- recipe: single-mode invariance/reachability ------------------------------------


def make_single_mode_case(seed: int):
    """Random convex mode, interior attractor with clearance, 2-3 curved demos,
    noisy start sets. The canonical single-mode experiment geometry."""
    from .geometry import random_convex_polygon

    rng = np.random.default_rng(seed)
    poly = random_convex_polygon(rng, (0.5, 0.5), 0.4, 7)
    c = poly.centroid
    attractor = c
    for _ in range(200):
        cand = c + rng.uniform(-0.15, 0.15, size=2)
        if poly.contains(cand) and poly.distance_to_boundary(cand) > 0.12:
            attractor = cand
            break
    demos = []
    for _ in range(int(rng.integers(2, 4))):
        start = c
        for _ in range(100):
            cand = c + rng.uniform(-0.35, 0.35, size=2)
            if poly.contains(cand) and poly.distance_to_boundary(cand) > 0.05 and np.linalg.norm(cand - attractor) > 0.15:
                start = cand
                break
        ctrl = 0.5 * (start + attractor) + rng.uniform(-0.2, 0.2, size=2)
        t = np.linspace(0, 1, 200)[:, None]
        demos.append((1 - t) ** 2 * start + 2 * (1 - t) * t * ctrl + t**2 * attractor)
    x = np.concatenate(demos)
    xdot = np.concatenate([np.gradient(d, axis=0) / 0.01 for d in demos])
    return poly, attractor, x, xdot


def sample_mode_starts(poly, x, sigma, count, rng):
    if sigma == 0.0:
        idx = rng.choice(len(x), size=count)
        return x[idx]
    starts = []
    while len(starts) < count:
        cand = x[rng.choice(len(x))] + rng.normal(0, sigma, size=2)
        if poly.contains(cand):
            starts.append(cand)
    return np.array(starts)


def run_tli_single(cfg: dict, seeds, artifacts_dir=None, log=print) -> ExperimentReport:
    noise_levels = cfg.get("noiseLevels", [0.0, 0.05, 0.30])
    n_starts = cfg.get("starts", 100)
    max_cuts = cfg.get("maxCuts", 6)
    max_steps = cfg.get("maxSteps", 40000)
    report = ExperimentReport("tli-single", cfg, list(seeds))
    cut_counts = {"DS": [], "BC": []}
    for seed in seeds:
        poly, attractor, x, xdot = make_single_mode_case(int(seed))
        ds = fit_lpvds(x, xdot, attractor, DsFitConfig(seed=1))
        bc = train_bc(x, xdot, epochs=cfg.get("bcEpochs", 1200), seed=1)
        rng = np.random.default_rng(int(seed) + 991)
        guard_starts = sample_mode_starts(poly, x, max(noise_levels), n_starts, rng)
        guards = {
            "DS": learn_guards(ds, poly, attractor, guard_starts, max_cuts=max_cuts, max_steps=max_steps),
            "BC": learn_guards(bc, poly, attractor, guard_starts, max_cuts=max_cuts, max_steps=max_steps),
        }
        cut_counts["DS"].append(len(guards["DS"].cuts))
        cut_counts["BC"].append(len(guards["BC"].cuts))
        for sigma in noise_levels:
            srng = np.random.default_rng(int(seed) * 7919 + int(sigma * 1000))
            starts = sample_mode_starts(poly, x, sigma, n_starts, srng)
            for name, policy in (("BC", bc), ("DS", ds)):
                for mod in (False, True):
                    modulator = guards[name].modulate if mod else None
                    status, _, _, _ = rollout_batch(
                        policy,
                        starts,
                        dt=0.01,
                        max_steps=max_steps,
                        attractor=attractor,
                        reach_tol=1e-3,
                        region=poly,
                        modulator=modulator,
                    )
                    rate = float(np.mean(status == "reached"))
                    method = name + ("+mod" if mod else "")
                    report.trials.append(
                        TrialResult(method, int(seed), None, {f"success@{sigma}": rate, "cuts": len(guards[name].cuts) if mod else 0})
                    )
    report.extras["cutCounts"] = cut_counts
    return report.finalize()


# --- recipe: multi-step scooping closed loop ------------------------------------------


def build_scoop_system(seed: int = 0, n_demos: int = 3, policy_kind: str = "ds", k_max: int = 5):
    world = get_world("scoop")
    auto = compile_spec_text(SCOOP_SPEC)
    rng = np.random.default_rng(seed)
    demos = datagen.generate_scoop_demos(world, n_demos, rng)
    return build_mode_system(world, auto, demos, DsFitConfig(seed=seed, k_max=k_max), policy_kind=policy_kind)


def crafted_loop_system(seed: int = 0):
    """Scoop system whose wedge policy is rotation-dominant (stable by
    construction, but its spiral swings out through the wedge lip from the
    canonical entry point). Without boundary estimation the automaton loops
    b -> a -> b forever; with it, one or two cuts end the loop."""
    from .lpvds import Gmm, LpvDs

    system = build_scoop_system(seed)
    att_b = system.attractors["b"]
    skew, contract = 2.5, 0.4
    a_mat = np.array([[-contract - 1e-3, -skew], [skew, -contract - 1e-3]])
    gmm = Gmm(means=np.array([[0.42, 0.5]]), covs=np.array([np.eye(2) * 0.05]), weights=np.array([1.0]))
    system.policies["b"] = LpvDs(
        A=a_mat[None], b=-(a_mat @ att_b)[None], gmm=gmm, attractor=att_b
    )
    system.guards.pop("b", None)
    return system


def crafted_loop_schedule() -> list:
    """The loop is autonomous once the wedge is entered; no displacements needed."""
    return []


def run_tli_scoop(cfg: dict, seeds, artifacts_dir=None, log=print) -> ExperimentReport:
    max_p = cfg.get("maxPerturbations", 10)
    report = ExperimentReport("tli-scoop", cfg, list(seeds))
    system_seed = cfg.get("systemSeed", 0)
    world = get_world("scoop")
    regions = {r.mode_id: r for r in world.mode_regions}
    for seed in seeds:
        system = build_scoop_system(system_seed)
        rng = np.random.default_rng(int(seed) + 555)
        n_p = int(rng.integers(1, max_p + 1))
        # teleports land inside the active window: each recovery adds ~200 steps
        steps = np.sort(rng.choice(np.arange(20, 150 * (n_p + 1), 10), size=n_p, replace=False))
        x0 = np.array([0.10, 0.70]) + rng.uniform(-0.03, 0.03, size=2)
        # displacements re-targeted into random seen modes (absolute teleports)
        schedule = []
        for s in steps:
            target_region = regions[int(rng.choice(list(regions)))]
            target = target_region.polygon.centroid + rng.uniform(-0.04, 0.04, size=2)
            schedule.append((int(s), target))
        res = run_teleport_loop(system, x0, schedule, modulation=True, max_steps=cfg.get("maxSteps", 60000))
        report.trials.append(
            TrialResult(
                "DS+automaton+mod",
                int(seed),
                None,
                {"reached": float(res.reached), "replans": res.replans, "cuts": res.cuts_added, "perturbations": n_p},
            )
        )
    crafted = crafted_loop_system(system_seed)
    res_plain = run_closed_loop(crafted, np.array([0.10, 0.70]), crafted_loop_schedule(), modulation=False, max_steps=cfg.get("loopSteps", 40000))
    crafted2 = crafted_loop_system(system_seed)
    res_mod = run_closed_loop(crafted2, np.array([0.10, 0.70]), crafted_loop_schedule(), modulation=True, max_steps=cfg.get("loopSteps", 40000))
    report.extras["craftedLoop"] = {
        "withoutModulation": {"reached": res_plain.reached, "looped": res_plain.looped, "replans": res_plain.replans},
        "withModulation": {"reached": res_mod.reached, "looped": res_mod.looped, "cuts": res_mod.cuts_added},
    }
    return report.finalize()


def run_teleport_loop(system, x0, schedule, modulation, max_steps):
    """Closed loop where scheduled perturbations teleport the state to absolute
    targets (displacement = target - current state at that step)."""
    from .ltlspec import start_monitor, step_monitor
    from .modeguard import CutInfeasible, solve_cut
    from .modesys import RunResult, _refresh

    events = {int(s): np.asarray(t, float) for s, t in schedule}
    world = system.world
    auto = system.auto
    x = np.asarray(x0, float).copy()
    mon = start_monitor(auto)
    observed = system.name_of(world.mode_of(x))
    if observed != mon.current:
        mon, _ = step_monitor(auto, mon, observed)
    directive = _refresh(auto, mon)
    entry = x.copy()
    states = [x.copy()]
    evs = []
    fail_counts: dict[str, int] = {}
    cuts = 0
    mode_seq = [mon.current]
    goal_names = set(auto.goals)
    reached = False
    prev_x = x.copy()
    step_i = 0
    for step_i in range(max_steps):
        if step_i in events:
            x = events[step_i].copy()
            states.append(x.copy())
        policy, att = system.policy_for(directive.policy_key)
        v = policy.velocity(x[None])
        if modulation:
            v = system.guard_set(mon.current).modulate(x[None], v)
        prev_x = x
        x = x + 0.01 * v[0]
        states.append(x.copy())
        observed = system.name_of(world.mode_of(x))
        if observed != mon.current:
            exited = mon.current
            was_planned = observed == (mon.plan[1] if len(mon.plan) > 1 else None)
            mon, directive = step_monitor(auto, mon, observed)
            mode_seq.append(observed)
            evs.extend(directive.events)
            if not was_planned:
                key = f"{exited}->{observed}"
                fail_counts[key] = fail_counts.get(key, 0) + 1
                if modulation:
                    gs = system.guard_set(exited)
                    if not gs.separates(x):
                        try:
                            gs.add(solve_cut(x, prev_x, entry, gs.reference, [c.anchor for c in gs.cuts]))
                            cuts += 1
                        except CutInfeasible:
                            pass
            entry = x.copy()
        if mon.current in goal_names:
            reached = True
            break
    looped = any(c > 3 for c in fail_counts.values()) and not reached
    return RunResult(reached, looped, step_i + 1, Trajectory(np.array(states), 0.01), evs, mon.replans, cuts, mode_seq)


# --- recipe: grounded navigation -------------------------------------------------------


def chain_counterfactual(demo: Trajectory, world: World, rng: np.random.Generator) -> Trajectory:
    """Counterfactual sampler mixing local detours (boundary-revealing) with
    occasional global ones (coverage)."""
    n = len(demo.states)
    if rng.random() < 0.7:
        span = int(rng.integers(4, 18))
        i = int(rng.integers(0, n - span - 1))
        j = i + span
        mid = 0.5 * (demo.states[i] + demo.states[j])
        z = np.clip(mid + rng.normal(0, 0.13, size=2), world.bounds[:2], world.bounds[2:])
        return datagen.perturb_at(demo, i, j, z)
    return datagen.perturb_counterfactual(demo, rng, bounds=world.bounds)


def build_glide_dataset(world: World, feas: FeasibilityMatrix, n_demos: int, n_perturbed: int, seed: int):
    rng = np.random.default_rng(seed)
    demos = datagen.generate_chain_demos(world, n_demos, rng)
    labeled = [label_trajectory(world, feas, d) for d in demos]
    bad = [lt for lt in labeled if not lt.success]
    if bad:
        raise RuntimeError("chain demo generator emitted an unsuccessful demo")
    perturbed = []
    while len(perturbed) < n_perturbed:
        base = demos[int(rng.integers(len(demos)))]
        p = chain_counterfactual(base, world, rng)
        perturbed.append(label_trajectory(world, feas, p))
    return labeled, perturbed


def run_glide_nav(cfg: dict, seeds, artifacts_dir=None, log=print) -> ExperimentReport:
    world = get_world(cfg.get("world", "chain5"))
    spec = TaskSpecFile.for_chain_world(world)
    feas = build_feasibility(spec)
    n_demos = cfg.get("demos", 8)
    n_pert = cfg.get("perturbed", 1800)
    data_seed = cfg.get("dataSeed", 11)
    demos_l, perturbed = build_glide_dataset(world, feas, n_demos, n_pert, data_seed)
    data = demos_l + perturbed
    ccfg = ClassifierConfig(
        epochs=cfg.get("epochs", 150),
        hidden=tuple(cfg.get("hidden", [64, 64])),
        seed=cfg.get("seed", 0),
        batch_trajs=cfg.get("batchTrajs", 48),
    )
    log(f"[glide] training classifier on {len(data)} trajectories")
    model, _, _ = train_classifier(data, feas, spec, ccfg)
    acc_full = classifier_accuracy(model, world)
    report = ExperimentReport("glide-nav", cfg, list(seeds))
    report.extras["accuracy"] = {"full": acc_full}

    # ablations
    rng = np.random.default_rng(data_seed + 3)
    random_failures = []
    while len(random_failures) < len(perturbed):
        a = rng.uniform(world.bounds[:2], world.bounds[2:])
        b = rng.uniform(world.bounds[:2], world.bounds[2:])
        t = np.linspace(0, 1, 60)[:, None]
        lt = label_trajectory(world, feas, Trajectory(a + t * (b - a), 0.02))
        random_failures.append(lt)
    nc_data = demos_l + random_failures
    model_nc, _, _ = train_classifier(nc_data, feas, spec, ccfg)
    report.extras["accuracy"]["noCounterfactual"] = classifier_accuracy(model_nc, world)

    wrong_ids = spec.mode_ids[:-1]
    wrong_spec = TaskSpecFile(
        mode_names=[f"mode{m}" for m in wrong_ids],
        mode_ids=list(wrong_ids),
        adjacency=[(a, b) for a, b in zip(wrong_ids, wrong_ids[1:])],
        goal_mode=wrong_ids[-1],
    )
    wrong_feas = build_feasibility(wrong_spec)
    model_wk, _, _ = train_classifier(data, wrong_feas, wrong_spec, ccfg)
    report.extras["accuracy"]["wrongFeasibility"] = classifier_accuracy(model_wk, world)

    km_predict = kmeans_mode_baseline([lt.traj for lt in demos_l], spec.k, np.random.default_rng(ccfg.seed))
    xs = np.linspace(world.bounds[0], world.bounds[2], 100)
    ys = np.linspace(world.bounds[1], world.bounds[3], 100)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    km_modes = km_predict(pts)
    truth = world.modes_of_many(pts)
    report.extras["accuracy"]["kmeans"] = float((km_modes == truth).mean())

    # policies
    bc_all_x = np.concatenate([lt.traj.states[:-1] for lt in demos_l])
    bc_all_v = np.concatenate([np.diff(lt.traj.states, axis=0) / lt.traj.dt for lt in demos_l])
    bc_policy = train_bc(bc_all_x, bc_all_v, epochs=cfg.get("bcEpochs", 1500), seed=ccfg.seed)

    per_mode = {}
    attract = {}
    for m in spec.mode_ids:
        xs_m, vs_m, trans_states = [], [], []
        for lt in demos_l:
            s = lt.traj.states
            pred = model.predict(s)
            vel = np.gradient(s, axis=0) / lt.traj.dt
            mask = pred == m
            if mask.any():
                xs_m.append(s[mask])
                vs_m.append(vel[mask])
            nxt = spec.mode_ids[min(spec.mode_ids.index(m) + 1, spec.k - 1)]
            for t in range(len(s) - 1):
                if pred[t] == m and pred[t + 1] == nxt and nxt != m:
                    trans_states.append(s[t])
        if xs_m:
            per_mode[m] = train_bc(np.concatenate(xs_m), np.concatenate(vs_m), epochs=cfg.get("bcEpochs", 1500), seed=ccfg.seed + m)
        if trans_states:
            attract[m] = np.mean(np.stack(trans_states), axis=0)
    speed = float(np.linalg.norm(bc_all_v, axis=1).mean())
    executor = ModeExecutor(per_mode, model, spec, feas, attract, speed=speed)
    grid_learned = ModeGridMap.from_classifier(model, world, n=cfg.get("grid", 120))

    episodes = cfg.get("episodes", 500)
    max_steps = cfg.get("maxSteps", 2500)
    dt = 0.02
    seeds = list(seeds)
    per_seed = max(1, episodes // max(len(seeds), 1))
    for perturb in (False, True):
        suffix = "perturbed" if perturb else "plain"
        for seed in seeds:
            erng = np.random.default_rng(int(seed) * 31 + (1 if perturb else 0))
            for ep in range(per_seed):
                start = np.array([erng.uniform(0.03, 0.2), erng.uniform(0.2, 0.8)])
                schedule = []
                if perturb:
                    for _ in range(int(erng.integers(1, 3))):
                        schedule.append((int(erng.integers(100, max_steps // 2)), erng.uniform(-0.25, 0.25, size=2)))
                # plain BC
                lt = _run_plain_bc(bc_policy, world, feas, start, schedule, dt, max_steps)
                report.trials.append(TrialResult(f"BC/{suffix}", int(seed), None, {"success": float(lt.success)}))
                lt2 = execute_mode_policy(executor, world, start, schedule, dt=dt, max_steps=max_steps)
                report.trials.append(TrialResult(f"GLiDE+BC/{suffix}", int(seed), None, {"success": float(lt2.success)}))
                lt3 = execute_planning(grid_learned, spec, feas, world, start, np.random.default_rng(ep * 97 + int(seed)), schedule, dt=dt, speed=speed, max_steps=max_steps)
                report.trials.append(TrialResult(f"GLiDE+Planning/{suffix}", int(seed), None, {"success": float(lt3.success)}))
    return report.finalize()


def _run_plain_bc(policy, world: World, feas, x0, schedule, dt, max_steps):
    from .world import label_executed

    x = np.asarray(x0, float).copy()
    states = [x.copy()]
    pmap = {int(s): np.asarray(d, float) for s, d in (schedule or [])}
    p_steps = []
    goal = world.goal_mode
    for step in range(max_steps):
        if step in pmap:
            x = x + pmap[step]
            p_steps.append(len(states))
            states.append(x.copy())
        if goal is not None and world.mode_of(x) == goal:
            break
        v = policy.velocity(x[None])[0]
        n = np.linalg.norm(v)
        if n > 3.0:
            v = v / n * 3.0
        x = np.clip(x + dt * v, world.bounds[:2], world.bounds[2:])
        states.append(x.copy())
    return label_executed(world, feas, Trajectory(np.array(states), dt), p_steps)


# --- dispatch -------------------------------------------------------------------


RECIPES = {
    "maze2d": run_maze2d,
    "twogoal": run_twogoal,
    "gdss-toy": run_gdss_toy,
    "tli-single": run_tli_single,
    "tli-scoop": run_tli_scoop,
    "glide-nav": run_glide_nav,
}


def run_experiment(recipe: str, cfg: dict, seeds, out_dir=None, artifacts_dir="artifacts", log=print) -> ExperimentReport:
    if recipe not in RECIPES:
        raise KeyError(f"unknown recipe {recipe!r}; available: {sorted(RECIPES)}")
    report = RECIPES[recipe](cfg or {}, list(seeds), artifacts_dir=artifacts_dir, log=log)
    if out_dir is not None:
        report.save(out_dir)
    return report
