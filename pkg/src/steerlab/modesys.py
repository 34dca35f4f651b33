"""Closed-loop mode system: task automaton + stable mode policies + boundary cuts.

Offline: segment demos, fit one LPV-DS per mode (or per transition) with the
attractor nudged just past the outgoing guard so crossings actually register
on the sensors. Online: monitor sensor modes, replan on unexpected
transitions, and turn invariance failures into cuts for the exited mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .lpvds import DsFitConfig, LpvDs, fit_lpvds, segment, train_bc
from .ltlspec import Directive, MonitorState, TaskAutomaton, start_monitor, step_monitor
from .modeguard import CutInfeasible, GuardSet, solve_cut
from .world import Trajectory, World

GUARD_NUDGE = 0.02  # attractor offset past the outgoing guard


@dataclass
class ModeSystem:
    """Frozen mode policies bound to an automaton over a sensed world."""

    world: World
    auto: TaskAutomaton
    policies: dict  # policy key (mode name or (mode, next)) -> velocity policy
    attractors: dict  # same keys -> 2D point
    guards: dict = field(default_factory=dict)  # mode name -> GuardSet
    id_to_name: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.id_to_name:
            self.id_to_name = {v: k for k, v in self.auto.mode_ids.items()}

    def name_of(self, world_mode: int) -> str:
        return self.id_to_name[world_mode]

    def guard_set(self, mode_name: str) -> GuardSet:
        if mode_name not in self.guards:
            key = self._any_key(mode_name)
            self.guards[mode_name] = GuardSet(np.asarray(self.attractors[key], float))
        return self.guards[mode_name]

    def _any_key(self, mode_name: str):
        if mode_name in self.policies:
            return mode_name
        for k in self.policies:
            if isinstance(k, tuple) and k[0] == mode_name:
                return k
        raise KeyError(f"no policy for mode {mode_name!r}")

    def policy_for(self, key):
        if key in self.policies:
            return self.policies[key], self.attractors[key]
        if isinstance(key, tuple):
            return self.policies[key[0]], self.attractors[key[0]]
        key2 = self._any_key(key)
        return self.policies[key2], self.attractors[key2]


def _nudged_attractor(world: World, seg_attractor: np.ndarray, mode_id: int, next_id: int | None) -> np.ndarray:
    """Shift the segmentation attractor slightly into the next mode region."""
    if next_id is None:
        return seg_attractor
    guard = world.guard(mode_id, next_id)
    if guard is None:
        nxt = world.region(next_id).polygon
        direction = nxt.centroid - seg_attractor
        n = np.linalg.norm(direction)
        return seg_attractor + (direction / n) * GUARD_NUDGE if n > 1e-12 else seg_attractor
    mid = guard.mean(axis=0)
    nxt_c = world.region(next_id).polygon.centroid
    direction = nxt_c - mid
    n = np.linalg.norm(direction)
    target = mid + (direction / n) * GUARD_NUDGE if n > 1e-12 else mid
    return target


def build_mode_system(
    world: World,
    auto: TaskAutomaton,
    demos: list[Trajectory],
    fit_cfg: DsFitConfig = None,
    policy_kind: str = "ds",
    bc_epochs: int = 1200,
) -> ModeSystem:
    """Offline learning: sensor segmentation, per-mode (or per-transition)
    policy fits, guard-nudged attractors."""
    fit_cfg = fit_cfg or DsFitConfig()
    name_of = {v: k for k, v in auto.mode_ids.items()}
    segs = segment(demos, world, allowed_modes=set(auto.mode_ids.values()))
    policies = {}
    attractors = {}
    per_transition = auto.per_transition_policies
    keys = set()
    for s in segs.segments:
        if per_transition and s.next_mode is not None:
            keys.add((s.mode, s.next_mode))
        else:
            keys.add((s.mode, None))
    for mode_id, next_id in sorted(keys, key=lambda t: (t[0], t[1] if t[1] is not None else -1)):
        if per_transition and next_id is not None:
            x, xdot = segs.samples(mode_id, next_id)
            seg_att = segs.attractor(mode_id, next_id)
            key = (name_of[mode_id], name_of[next_id])
        else:
            x, xdot = segs.samples(mode_id)
            seg_att = segs.attractor(mode_id)
            key = name_of[mode_id]
            # pick the demonstrated onward edge for the nudge
            nexts = [s.next_mode for s in segs.segments if s.mode == mode_id and s.next_mode is not None]
            next_id = nexts[0] if nexts else None
        att = _nudged_attractor(world, seg_att, mode_id, next_id)
        if policy_kind == "ds":
            policies[key] = fit_lpvds(x, xdot, att, fit_cfg)
        elif policy_kind == "bc":
            policies[key] = train_bc(x, xdot, epochs=bc_epochs, seed=fit_cfg.seed)
        else:
            raise ValueError(f"unknown policy kind {policy_kind!r}")
        attractors[key] = att
    return ModeSystem(world=world, auto=auto, policies=policies, attractors=attractors)


@dataclass
class RunResult:
    reached: bool
    looped: bool
    steps: int
    traj: Trajectory
    events: list
    replans: int
    cuts_added: int
    mode_seq: list


def run_closed_loop(
    system: ModeSystem,
    x0: np.ndarray,
    perturbations: list[tuple[int, np.ndarray]] | None = None,
    modulation: bool = True,
    dt: float = 0.01,
    max_steps: int = 60000,
    goal_tol: float = 5e-3,
    loop_threshold: int = 3,
) -> RunResult:
    """Receding-horizon execution until the goal mode's attractor is reached.

    Invariance failures (unexpected sensor transitions) are turned into cuts
    for the exited mode when modulation is enabled; the same failure
    half-space is never cut twice. Looping is flagged when the same
    unexpected transition repeats more than `loop_threshold` times.
    """
    world = system.world
    auto = system.auto
    x = np.asarray(x0, float).copy()
    mon = start_monitor(auto)
    observed = system.name_of(world.mode_of(x))
    if observed != mon.current:
        mon, _ = step_monitor(auto, mon, observed)
    directive = _refresh(auto, mon)
    entry_state = x.copy()
    states = [x.copy()]
    events: list[str] = []
    pmap = {int(s): np.asarray(d, float) for s, d in (perturbations or [])}
    fail_counts: dict[str, int] = {}
    cuts_added = 0
    mode_seq = [mon.current]
    goal_names = set(auto.goals)
    reached = False
    step_i = 0
    prev_x = x.copy()
    for step_i in range(max_steps):
        if step_i in pmap:
            x = x + pmap[step_i]
            states.append(x.copy())
        policy, attractor = system.policy_for(directive.policy_key)
        v = policy.velocity(x[None])
        if modulation:
            v = system.guard_set(mon.current).modulate(x[None], v)
        prev_x = x
        x = x + dt * v[0]
        states.append(x.copy())
        observed = system.name_of(world.mode_of(x))
        if observed != mon.current:
            exited = mon.current
            was_planned = observed == (mon.plan[1] if len(mon.plan) > 1 else None)
            mon, directive = step_monitor(auto, mon, observed)
            mode_seq.append(observed)
            events.extend(directive.events)
            if not was_planned:
                key = f"{exited}->{observed}"
                fail_counts[key] = fail_counts.get(key, 0) + 1
                if modulation:
                    gs = system.guard_set(exited)
                    if not gs.separates(x):
                        try:
                            gs.add(
                                solve_cut(
                                    x, prev_x, entry_state, gs.reference, [c.anchor for c in gs.cuts]
                                )
                            )
                            cuts_added += 1
                            events.append(f"cut:{exited}")
                        except CutInfeasible:
                            events.append(f"cut-infeasible:{exited}")
            entry_state = x.copy()
        if mon.current in goal_names:
            reached = True
            break
    looped = any(c > loop_threshold for c in fail_counts.values()) and not reached
    return RunResult(
        reached=reached,
        looped=looped,
        steps=step_i + 1,
        traj=Trajectory(np.array(states), dt),
        events=events,
        replans=mon.replans,
        cuts_added=cuts_added,
        mode_seq=mode_seq,
    )


def _refresh(auto: TaskAutomaton, mon: MonitorState) -> Directive:
    nxt = mon.plan[1] if len(mon.plan) > 1 else None
    key = (mon.current, nxt) if auto.per_transition_policies and nxt else mon.current
    return Directive(mode=mon.current, next_mode=nxt, policy_key=key, events=[])
