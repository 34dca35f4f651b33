"""Online mode-boundary estimation (cutting planes) and velocity modulation.

Each invariance failure yields a half-space cut through the last in-mode
state; the cut set defines an implicit boundary function Gamma (0 at the
reference point, 1 on the most binding cut plane, > 1 outside). A modulation
matrix built from Gamma zeroes the velocity component penetrating the
boundary while preserving tangential motion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SEPARATION_MARGIN = 1e-9


@dataclass(frozen=True)
class Cut:
    """Half-space boundary: w . (x - p) <= 0 keeps x on the mode side."""

    normal: np.ndarray  # unit vector pointing out of the mode
    anchor: np.ndarray  # last in-mode state the plane passes through

    def __post_init__(self):
        w = np.asarray(self.normal, float).reshape(2)
        n = np.linalg.norm(w)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("cut normal must be unit length")
        object.__setattr__(self, "normal", w)
        object.__setattr__(self, "anchor", np.asarray(self.anchor, float).reshape(2))

    def side(self, x: np.ndarray) -> np.ndarray:
        """w . (x - p); positive values are outside the cut."""
        x = np.atleast_2d(x)
        return (x - self.anchor) @ self.normal

    def to_json(self) -> dict:
        return {"normal": self.normal.tolist(), "anchor": self.anchor.tolist()}

    @staticmethod
    def from_json(d: dict) -> "Cut":
        return Cut(np.asarray(d["normal"]), np.asarray(d["anchor"]))


class CutInfeasible(RuntimeError):
    """No direction separates the failure state from the constraint set."""


def solve_cut(
    fail_state,
    last_in,
    entry,
    attractor,
    prior_anchors: list | None = None,
    grid: int = 8192,
    attractor_margin: float = 0.15,
) -> Cut:
    """Find the outward normal of a cutting plane through `last_in`.

    Minimizes (w^T (x* - p))^2 subject to ||w|| = 1 and w keeping the
    attractor, the entry state, and all prior anchors on the inside, while
    strictly separating the failure state. In 2D the unit circle is searched
    directly: dense angle grid plus golden-section refinement on the best
    feasible arc.

    `attractor_margin` keeps the plane a fraction of ||x* - p|| away from the
    attractor so the boundary function built on these cuts stays well scaled;
    it is relaxed to zero automatically when it makes the problem infeasible.
    """
    p = np.asarray(last_in, float)
    x_star = np.asarray(attractor, float)
    xf = np.asarray(fail_state, float)
    if np.allclose(p, x_star):
        raise ValueError("last in-mode state coincides with the attractor")
    anchors = [np.asarray(a, float) for a in (prior_anchors or [])]
    inside_vecs = [a - p for a in anchors]
    if entry is not None:
        inside_vecs.insert(0, np.asarray(entry, float) - p)
    out_vec = xf - p
    margin = attractor_margin * float(np.linalg.norm(x_star - p))

    def feasible(w, m):
        if w @ (x_star - p) > -m:
            return False
        if any(w @ v > 0.0 for v in inside_vecs):
            return False
        return w @ out_vec > SEPARATION_MARGIN

    def objective(w):
        return float(w @ (x_star - p)) ** 2

    thetas = np.linspace(0.0, 2 * np.pi, grid, endpoint=False)
    ws = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
    base_ok = np.ones(grid, dtype=bool)
    for v in inside_vecs:
        base_ok &= ws @ v <= 0.0
    base_ok &= ws @ out_vec > SEPARATION_MARGIN
    base_ok &= ws @ (x_star - p) <= 0.0
    if not base_ok.any():
        raise CutInfeasible("no separating direction under the anchor constraints")
    # cap the margin by what the constraint set actually admits
    deepest = float((-(ws @ (x_star - p)))[base_ok].max())
    margin = min(margin, 0.9 * deepest)
    ok = base_ok & (ws @ (x_star - p) <= -margin)
    vals = np.where(ok, (ws @ (x_star - p)) ** 2, np.inf)
    best = int(np.argmin(vals))
    # golden-section refinement inside the feasible neighborhood of the best angle
    step = 2 * np.pi / grid
    lo, hi = thetas[best] - step, thetas[best] + step
    phi = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    for _ in range(60):
        wc = np.array([np.cos(c), np.sin(c)])
        wd = np.array([np.cos(d), np.sin(d)])
        fc = objective(wc) if feasible(wc, margin) else np.inf
        fd = objective(wd) if feasible(wd, margin) else np.inf
        if fc <= fd:
            b, d = d, c
            c = b - phi * (b - a)
        else:
            a, c = c, d
            d = a + phi * (b - a)
    w_best = np.array([np.cos(thetas[best]), np.sin(thetas[best])])
    mid = 0.5 * (a + b)
    w_mid = np.array([np.cos(mid), np.sin(mid)])
    if feasible(w_mid, margin) and objective(w_mid) < objective(w_best):
        w_best = w_mid
    return Cut(w_best, p)


@dataclass
class GuardSet:
    """Cut collection plus the reference point (attractor) for Gamma."""

    reference: np.ndarray
    cuts: list[Cut] = field(default_factory=list)

    def __post_init__(self):
        self.reference = np.asarray(self.reference, float).reshape(2)
        for c in self.cuts:
            self._check(c)

    def _check(self, cut: Cut):
        if cut.side(self.reference[None])[0] >= 0.0:
            raise ValueError("reference point must be strictly inside every cut")

    def add(self, cut: Cut):
        self._check(cut)
        self.cuts.append(cut)

    def separates(self, x) -> bool:
        """Is x already outside some existing cut? (solve can be skipped)"""
        x = np.asarray(x, float)[None]
        return any(c.side(x)[0] > 0.0 for c in self.cuts)

    def gamma_parts(self, x: np.ndarray) -> np.ndarray:
        """Per-cut affine boundary coordinates, (N, n_cuts)."""
        x = np.atleast_2d(np.asarray(x, float))
        if not self.cuts:
            return np.zeros((len(x), 0))
        out = np.zeros((len(x), len(self.cuts)))
        for i, c in enumerate(self.cuts):
            denom = float(c.side(self.reference[None])[0])  # < 0 by invariant
            out[:, i] = 1.0 - c.side(x) / denom
        return out

    def gamma(self, x) -> float:
        """Implicit boundary value: 0 at the reference, 1 on the most binding
        cut plane, > 1 outside the cut set; 0 everywhere when no cuts exist.

        Clamped to R+ so the radial eigenvalue 1 - Gamma never exceeds one
        (outward motion is never amplified deep inside the cut set).
        """
        parts = self.gamma_parts(np.asarray(x, float)[None])
        return 0.0 if parts.shape[1] == 0 else float(max(parts[0].max(), 0.0))

    def gamma_many(self, x: np.ndarray) -> np.ndarray:
        parts = self.gamma_parts(x)
        return np.zeros(len(parts)) if parts.shape[1] == 0 else np.maximum(parts.max(axis=1), 0.0)

    def modulate(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Batch velocity modulation M(x) v.

        Unmodulated when there are no cuts, at the reference point, or when
        the velocity moves away from the cuts; otherwise the radial
        eigenvalue is scaled by 1 - Gamma. Outside the cut set (Gamma > 1)
        this scale goes negative, reversing outward radial motion back toward
        the cut interior; the Lyapunov decrease argument only needs
        Gamma > 0 with a non-negative outward component, so stability is
        unaffected while corner escape routes between cut planes disappear.
        """
        x = np.atleast_2d(np.asarray(x, float))
        v = np.atleast_2d(np.asarray(v, float))
        if not self.cuts:
            return v.copy()
        out = v.copy()
        parts = self.gamma_parts(x)
        gam = np.maximum(parts.max(axis=1), 0.0)
        # most binding cut inside the cut set; outside it, the plane nearest to
        # being crossed carries the boundary information (identical choice when
        # all gamma parts are <= 1)
        closest = np.abs(1.0 - parts).argmin(axis=1)
        rel = x - self.reference
        dist = np.linalg.norm(rel, axis=1)
        active = dist > 1e-12
        if not active.any():
            return out
        idx = np.flatnonzero(active)
        r = rel[idx] / dist[idx][:, None]
        w = np.stack([self.cuts[c].normal for c in closest[idx]])
        e = np.stack([-w[:, 1], w[:, 0]], axis=1)  # tangent to the closest cut
        det = r[:, 0] * e[:, 1] - r[:, 1] * e[:, 0]
        # r parallel to the tangent: nudge the basis by a tiny rotation
        bad = np.abs(det) < 1e-12
        if bad.any():
            ang = 1e-9
            rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            e[bad] = e[bad] @ rot.T
            det = r[:, 0] * e[:, 1] - r[:, 1] * e[:, 0]
        vi = v[idx]
        # coords = E^{-1} v for E = [r e]
        a = (vi[:, 0] * e[:, 1] - vi[:, 1] * e[:, 0]) / det
        toward = a >= 0.0  # positive radial component points at the cuts
        # radial eigenvalue, floored so reversal never exceeds the outward speed;
        # Mf = f - (1 - lam) a r, so only the radial part is rewritten
        lam = np.maximum(1.0 - gam[idx], -1.0)
        mod = vi - ((1.0 - lam) * a)[:, None] * r
        # numerical guard for ill-conditioned bases: scaling preserves the
        # Lyapunov decrease sign, so cap the modulated speed at 3x nominal
        vn = np.linalg.norm(vi, axis=1)
        mn = np.linalg.norm(mod, axis=1)
        blow = mn > 3.0 * vn
        if blow.any():
            mod[blow] *= (3.0 * vn[blow] / mn[blow])[:, None]
        out[idx[toward]] = mod[toward]
        return out

    def to_json(self) -> dict:
        return {"reference": self.reference.tolist(), "cuts": [c.to_json() for c in self.cuts]}

    @staticmethod
    def from_json(d: dict) -> "GuardSet":
        return GuardSet(np.asarray(d["reference"]), [Cut.from_json(c) for c in d["cuts"]])


def learn_guards(
    policy,
    region,
    attractor,
    starts: np.ndarray,
    dt: float = 0.01,
    max_steps: int = 6000,
    max_cuts: int = 8,
    reach_tol: float = 1e-3,
) -> GuardSet:
    """Iterative boundary estimation: roll out, cut at the first invariance
    failure, repeat until no rollout exits or the cut budget is spent.

    Cuts are solved with all prior anchors as constraints; when that is
    infeasible the oldest anchor constraint is dropped and the solve retried.
    """
    from .lpvds import rollout_batch

    guards = GuardSet(np.asarray(attractor, float))
    for _ in range(max_cuts):
        status, _, exit_states, last_ins = rollout_batch(
            policy,
            starts,
            dt=dt,
            max_steps=max_steps,
            attractor=guards.reference,
            reach_tol=reach_tol,
            region=region,
            modulator=guards.modulate if guards.cuts else None,
        )
        exited = [i for i, s in enumerate(status) if s == "exited"]
        # skip failures a cut through (essentially) the same anchor already covers;
        # exits ON a plane (tangential slides) still need their own cut
        fresh = [
            i
            for i in exited
            if not any(
                c.side(np.asarray(exit_states[i])[None])[0] > 1e-6
                and np.linalg.norm(c.anchor - last_ins[i]) < 1e-6
                for c in guards.cuts
            )
        ]
        if not fresh:
            break
        i = fresh[0]
        anchors = [c.anchor for c in guards.cuts]
        entry = starts[i]
        cut = None
        while True:
            try:
                cut = solve_cut(exit_states[i], last_ins[i], entry, guards.reference, anchors)
                break
            except CutInfeasible:
                if anchors:
                    anchors = anchors[1:]  # oldest anchor constraint goes first
                elif entry is not None:
                    entry = None  # degenerate entry (start at the boundary)
                else:
                    raise
        guards.add(cut)
    return guards
