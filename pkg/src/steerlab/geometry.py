"""2D geometric primitives: polygons, containment, segment collision, resampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12


def as_points(pts) -> np.ndarray:
    a = np.asarray(pts, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"expected (N,2) point array, got shape {a.shape}")
    return a


def cross2(o, a, b) -> float:
    """Signed area of the parallelogram (a-o) x (b-o)."""
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


@dataclass(frozen=True)
class Polygon:
    """Simple polygon given by an ordered vertex ring (no repeated last vertex)."""

    vertices: np.ndarray

    def __post_init__(self):
        v = as_points(self.vertices)
        if len(v) < 3:
            raise ValueError("polygon needs >= 3 vertices")
        object.__setattr__(self, "vertices", v)
        if not self._is_simple():
            raise ValueError("polygon is self-intersecting")

    def _is_simple(self) -> bool:
        v = self.vertices
        n = len(v)
        for i in range(n):
            a1, a2 = v[i], v[(i + 1) % n]
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or (i + 1) % n == j:
                    continue
                b1, b2 = v[j], v[(j + 1) % n]
                if segments_intersect(a1, a2, b1, b2):
                    return False
        return True

    @property
    def is_convex(self) -> bool:
        v = self.vertices
        n = len(v)
        signs = []
        for i in range(n):
            c = cross2(v[i], v[(i + 1) % n], v[(i + 2) % n])
            if abs(c) > EPS:
                signs.append(np.sign(c))
        return len(set(signs)) <= 1

    def edges(self) -> np.ndarray:
        """(n, 2, 2) array of edge segments."""
        v = self.vertices
        return np.stack([v, np.roll(v, -1, axis=0)], axis=1)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @property
    def area(self) -> float:
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def contains(self, p, boundary: bool = True, tol: float = 1e-9) -> bool:
        return bool(self.contains_many(np.asarray(p, dtype=float)[None, :], boundary, tol)[0])

    def contains_many(self, pts: np.ndarray, boundary: bool = True, tol: float = 1e-9) -> np.ndarray:
        """Vectorized even-odd containment test with explicit boundary handling."""
        pts = as_points(pts)
        v = self.vertices
        a = v
        b = np.roll(v, -1, axis=0)
        x, y = pts[:, 0][:, None], pts[:, 1][:, None]
        ax, ay, bx, by = a[:, 0][None], a[:, 1][None], b[:, 0][None], b[:, 1][None]
        # even-odd crossing count over edges
        cond = (ay > y) != (by > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (y - ay) * (bx - ax) / np.where(by == ay, np.inf, by - ay)
        inside = np.sum(cond & (x < xint), axis=1) % 2 == 1
        ond = point_segment_distance_many(pts, a, b) <= tol
        on_edge = ond.any(axis=1)
        if boundary:
            return inside | on_edge
        return inside & ~on_edge

    def distance_to_boundary(self, p) -> float:
        v = self.vertices
        return float(point_segment_distance_many(np.asarray(p, float)[None, :], v, np.roll(v, -1, axis=0)).min())


def point_segment_distance_many(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from each point to each segment: (P, S) matrix."""
    d = b - a  # (S,2)
    len2 = np.maximum((d * d).sum(axis=1), EPS)  # (S,)
    ap = pts[:, None, :] - a[None, :, :]  # (P,S,2)
    t = np.clip((ap * d[None]).sum(axis=2) / len2[None], 0.0, 1.0)
    proj = a[None] + t[..., None] * d[None]
    return np.linalg.norm(pts[:, None, :] - proj, axis=2)


def segments_intersect(p1, p2, q1, q2, tol: float = EPS) -> bool:
    """Proper or touching intersection of segments p1p2 and q1q2."""
    d1 = cross2(q1, q2, p1)
    d2 = cross2(q1, q2, p2)
    d3 = cross2(p1, p2, q1)
    d4 = cross2(p1, p2, q2)
    if ((d1 > tol and d2 < -tol) or (d1 < -tol and d2 > tol)) and (
        (d3 > tol and d4 < -tol) or (d3 < -tol and d4 > tol)
    ):
        return True
    for d, a, b, c in ((d1, q1, q2, p1), (d2, q1, q2, p2), (d3, p1, p2, q1), (d4, p1, p2, q2)):
        if abs(d) <= tol and _on_segment(a, b, c, tol):
            return True
    return False


def _on_segment(a, b, c, tol) -> bool:
    return (
        min(a[0], b[0]) - tol <= c[0] <= max(a[0], b[0]) + tol
        and min(a[1], b[1]) - tol <= c[1] <= max(a[1], b[1]) + tol
    )


def segments_cross_many(p1: np.ndarray, p2: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Boolean (N,) mask: does segment i of p1/p2 hit any segment of a/b?

    Vectorized orientation test; treats touching as a hit.
    """
    p1, p2 = as_points(p1), as_points(p2)
    tol = EPS

    def cr(ox, oy, ax_, ay_, bx, by):
        return (ax_ - ox) * (by - oy) - (ay_ - oy) * (bx - ox)

    ax, ay = a[:, 0][None], a[:, 1][None]
    bx, by = b[:, 0][None], b[:, 1][None]
    px1, py1 = p1[:, 0][:, None], p1[:, 1][:, None]
    px2, py2 = p2[:, 0][:, None], p2[:, 1][:, None]
    d1 = cr(ax, ay, bx, by, px1, py1)
    d2 = cr(ax, ay, bx, by, px2, py2)
    d3 = cr(px1, py1, px2, py2, ax, ay)
    d4 = cr(px1, py1, px2, py2, bx, by)
    proper = (((d1 > tol) & (d2 < -tol)) | ((d1 < -tol) & (d2 > tol))) & (
        ((d3 > tol) & (d4 < -tol)) | ((d3 < -tol) & (d4 > tol))
    )
    # collinear / endpoint touches
    def on_seg(sx1, sy1, sx2, sy2, cx, cy):
        return (
            (np.minimum(sx1, sx2) - tol <= cx)
            & (cx <= np.maximum(sx1, sx2) + tol)
            & (np.minimum(sy1, sy2) - tol <= cy)
            & (cy <= np.maximum(sy1, sy2) + tol)
        )

    touch = (
        ((np.abs(d1) <= tol) & on_seg(ax, ay, bx, by, px1, py1))
        | ((np.abs(d2) <= tol) & on_seg(ax, ay, bx, by, px2, py2))
        | ((np.abs(d3) <= tol) & on_seg(px1, py1, px2, py2, ax, ay))
        | ((np.abs(d4) <= tol) & on_seg(px1, py1, px2, py2, bx, by))
    )
    return (proper | touch).any(axis=1)


def segment_hits_polygon(a, b, poly: Polygon) -> bool:
    """Segment collides with polygon (crosses an edge or lies inside)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    e = poly.edges()
    if segments_cross_many(a[None], b[None], e[:, 0], e[:, 1])[0]:
        return True
    mid = 0.5 * (a + b)
    return poly.contains(mid, boundary=False)


def polyline_collides(states: np.ndarray, obstacles: list[Polygon]) -> bool:
    """Any consecutive-state segment of the polyline hits any obstacle."""
    states = as_points(states)
    if len(states) < 2:
        return any(o.contains(states[0]) for o in obstacles)
    p1, p2 = states[:-1], states[1:]
    for obs in obstacles:
        e = obs.edges()
        if segments_cross_many(p1, p2, e[:, 0], e[:, 1]).any():
            return True
        if obs.contains_many(0.5 * (p1 + p2), boundary=False).any():
            return True
    return False


def segment_clear(a, b, obstacles: list[Polygon]) -> bool:
    return not any(segment_hits_polygon(a, b, o) for o in obstacles)


def polyline_length(pts: np.ndarray) -> float:
    pts = as_points(pts)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def resample_polyline(pts: np.ndarray, n: int) -> np.ndarray:
    """Uniform arc-length resampling to exactly n points (endpoints preserved)."""
    pts = as_points(pts)
    if n < 2:
        raise ValueError("need n >= 2")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= EPS:
        return np.repeat(pts[:1], n, axis=0)
    target = np.linspace(0.0, total, n)
    x = np.interp(target, s, pts[:, 0])
    y = np.interp(target, s, pts[:, 1])
    out = np.stack([x, y], axis=1)
    out[0], out[-1] = pts[0], pts[-1]
    return out


def rediscretize(pts: np.ndarray, step: float) -> np.ndarray:
    """Constant-speed re-discretization with spacing ~step (endpoints preserved)."""
    pts = as_points(pts)
    total = polyline_length(pts)
    n = max(2, int(round(total / step)) + 1)
    return resample_polyline(pts, n)


def shared_boundary(a: Polygon, b: Polygon, tol: float = 1e-9) -> np.ndarray | None:
    """Shared edge segment between two polygons, or None.

    Returns the 2x2 endpoints of the overlap of any pair of collinear edges.
    """
    for ea in a.edges():
        for eb in b.edges():
            seg = _collinear_overlap(ea[0], ea[1], eb[0], eb[1], tol)
            if seg is not None:
                return seg
    return None


def _collinear_overlap(a1, a2, b1, b2, tol):
    d = a2 - a1
    ln = np.linalg.norm(d)
    if ln < tol:
        return None
    u = d / ln
    # both b endpoints must sit on the a-line
    if abs(cross2(a1, a2, b1)) > tol * max(1.0, ln) or abs(cross2(a1, a2, b2)) > tol * max(1.0, ln):
        return None
    ta = sorted([0.0, ln])
    tb = sorted([float(np.dot(b1 - a1, u)), float(np.dot(b2 - a1, u))])
    lo, hi = max(ta[0], tb[0]), min(ta[1], tb[1])
    if hi - lo < tol:
        return None
    return np.stack([a1 + lo * u, a1 + hi * u])


def random_convex_polygon(rng: np.random.Generator, center, radius: float, n_vertices: int = 7) -> Polygon:
    """Random convex polygon: jittered radii at sorted random angles around center."""
    center = np.asarray(center, float)
    for _ in range(64):
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=n_vertices))
        if np.min(np.diff(ang)) < 0.15:
            continue
        rad = rng.uniform(0.55 * radius, radius, size=n_vertices)
        pts = center + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        hull = convex_hull(pts)
        if len(hull) >= max(4, n_vertices - 2):
            return Polygon(hull)
    return Polygon(convex_hull(pts))


def convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain, counter-clockwise, no duplicate endpoint."""
    pts = as_points(pts)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    p = pts[order]
    lower: list[np.ndarray] = []
    for q in p:
        while len(lower) >= 2 and cross2(lower[-2], lower[-1], q) <= EPS:
            lower.pop()
        lower.append(q)
    upper: list[np.ndarray] = []
    for q in p[::-1]:
        while len(upper) >= 2 and cross2(upper[-2], upper[-1], q) <= EPS:
            upper.pop()
        upper.append(q)
    return np.array(lower[:-1] + upper[:-1])


@dataclass
class VisibilityGraph:
    """Shortest collision-free polylines among polygon obstacles.

    Nodes are obstacle vertices pushed slightly outward; queries add their own
    endpoints. Intended for desk-scale worlds (tens of vertices).
    """

    obstacles: list[Polygon]
    inflate: float = 1e-6
    nodes: np.ndarray = field(init=False)
    _adj: dict = field(init=False)

    def __post_init__(self):
        nodes = []
        for poly in self.obstacles:
            c = poly.centroid
            for v in poly.vertices:
                d = v - c
                nrm = np.linalg.norm(d)
                nodes.append(v + (d / nrm) * self.inflate if nrm > EPS else v)
        self.nodes = np.array(nodes) if nodes else np.zeros((0, 2))
        self._adj = {}
        n = len(self.nodes)
        for i in range(n):
            for j in range(i + 1, n):
                if segment_clear(self.nodes[i], self.nodes[j], self.obstacles):
                    w = float(np.linalg.norm(self.nodes[i] - self.nodes[j]))
                    self._adj.setdefault(i, []).append((j, w))
                    self._adj.setdefault(j, []).append((i, w))

    def shortest_path(self, start, goal) -> np.ndarray | None:
        """Dijkstra over obstacle vertices plus the two query endpoints."""
        import heapq

        start = np.asarray(start, float)
        goal = np.asarray(goal, float)
        if segment_clear(start, goal, self.obstacles):
            return np.stack([start, goal])
        pts = [start, goal] + list(self.nodes)
        n = len(pts)
        adj: dict[int, list[tuple[int, float]]] = {i: [] for i in range(n)}
        for i in self._adj:
            for j, w in self._adj[i]:
                adj[i + 2].append((j + 2, w))
        for q in (0, 1):
            for k in range(len(self.nodes)):
                if segment_clear(pts[q], pts[k + 2], self.obstacles):
                    w = float(np.linalg.norm(pts[q] - pts[k + 2]))
                    adj[q].append((k + 2, w))
                    adj[k + 2].append((q, w))
        dist = [np.inf] * n
        prev = [-1] * n
        dist[0] = 0.0
        heap = [(0.0, 0)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            if u == 1:
                break
            for v, w in adj[u]:
                nd = d + w
                if nd < dist[v]:
                    dist[v] = nd
                    prev[v] = u
                    heapq.heappush(heap, (nd, v))
        if not np.isfinite(dist[1]):
            return None
        path = [1]
        while path[-1] != 0:
            path.append(prev[path[-1]])
        return np.array([pts[i] for i in reversed(path)])
