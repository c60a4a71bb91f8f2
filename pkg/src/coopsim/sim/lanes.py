"""Directed waypoint lane graph with A* search."""

from __future__ import annotations

import heapq
import math

import numpy as np

from ..geometry import wrap_angle


class NoRouteError(RuntimeError):
    pass


class LaneGraph:
    """Waypoint nodes (x, y, heading) joined by directed, length-weighted edges.

    Nodes may carry a stop-line tag: the traffic-light group that must be
    green before a vehicle passes that node.
    """

    def __init__(self, spacing: float = 2.0):
        self.spacing = spacing
        self._xy: list[tuple[float, float]] = []
        self._yaw: list[float] = []
        self.stop_group: dict[int, str] = {}
        self.edges: dict[int, list[tuple[int, float]]] = {}
        self.lanes: dict[str, list[int]] = {}
        self.opposing: set[int] = set()    # nodes that borrow the oncoming lane
        self._arr = None

    # -------------------------------------------------------------- building
    def add_node(self, x: float, y: float, yaw: float) -> int:
        self._xy.append((float(x), float(y)))
        self._yaw.append(wrap_angle(yaw))
        self.edges[len(self._xy) - 1] = []
        self._arr = None
        return len(self._xy) - 1

    def add_edge(self, a: int, b: int, cost_scale: float = 1.0):
        length = math.dist(self._xy[a], self._xy[b])
        self.edges[a].append((b, length * cost_scale))

    def add_lane(self, name: str, polyline, stop_group: str | None = None, cost_scale: float = 1.0,
                 opposing: bool = False) -> list[int]:
        """Resample ``polyline`` every ``spacing`` metres and chain the nodes.

        With ``stop_group`` the last node is tagged as a stop line; ``opposing``
        marks a lane driven against its normal direction (overtaking).
        """
        pts = resample(np.asarray(polyline, dtype=np.float64), self.spacing)
        ids = []
        for i, (x, y) in enumerate(pts):
            j = min(i, len(pts) - 2)
            yaw = math.atan2(pts[j + 1][1] - pts[j][1], pts[j + 1][0] - pts[j][0])
            ids.append(self.add_node(x, y, yaw))
        for a, b in zip(ids[:-1], ids[1:]):
            self.add_edge(a, b, cost_scale)
        if stop_group is not None:
            self.stop_group[ids[-1]] = stop_group
        if opposing:
            self.opposing.update(ids)
        self.lanes[name] = ids
        return ids

    def join(self, a: str, b: str):
        """Connect the end of lane ``a`` to the start of lane ``b``."""
        self.add_edge(self.lanes[a][-1], self.lanes[b][0])

    # -------------------------------------------------------------- queries
    def __len__(self) -> int:
        return len(self._xy)

    @property
    def xy(self) -> np.ndarray:
        if self._arr is None:
            self._arr = (np.array(self._xy), np.array(self._yaw))
        return self._arr[0]

    @property
    def yaw(self) -> np.ndarray:
        self.xy
        return self._arr[1]

    def position(self, n: int) -> tuple[float, float]:
        return self._xy[n]

    def nearest(self, x: float, y: float, yaw: float | None = None, radius: float = 8.0,
                max_heading_err: float = math.radians(60)) -> int | None:
        """Closest heading-compatible node, preferring nodes ahead of the pose."""
        d = np.hypot(self.xy[:, 0] - x, self.xy[:, 1] - y)
        ok = d <= radius
        score = d.copy()
        if yaw is not None:
            err = np.abs((self.yaw - yaw + np.pi) % (2 * np.pi) - np.pi)
            ok &= err <= max_heading_err
            ahead = (self.xy[:, 0] - x) * math.cos(yaw) + (self.xy[:, 1] - y) * math.sin(yaw)
            score = score + 2.0 * err + np.where(ahead < 0, 2.0, 0.0)
        if not ok.any():
            return None
        score[~ok] = np.inf
        return int(np.argmin(score))

    def nodes_near(self, x: float, y: float, radius: float) -> np.ndarray:
        d = np.hypot(self.xy[:, 0] - x, self.xy[:, 1] - y)
        return np.flatnonzero(d <= radius)

    def astar(self, start: int, goals, blocked=frozenset(), blocked_edges=frozenset(),
              yaw_weight: float = 0.5) -> list[int]:
        """Shortest path by edge length.

        Heuristic: Euclidean distance to the nearest goal node plus a small
        penalty on heading misalignment with the bearing to that goal.
        The penalty is at most ``yaw_weight`` metres, which bounds how far
        the returned path can be from the true shortest one.
        """
        goals = set(int(g) for g in goals)
        if not goals:
            raise NoRouteError("no goal nodes")
        gxy = np.array([self._xy[g] for g in goals])

        def h(n):
            x, y = self._xy[n]
            d = np.hypot(gxy[:, 0] - x, gxy[:, 1] - y)
            i = int(np.argmin(d))
            if d[i] < 1e-9:
                return 0.0
            bearing = math.atan2(gxy[i, 1] - y, gxy[i, 0] - x)
            err = abs(wrap_angle(bearing - self._yaw[n])) / math.pi
            return float(d[i]) + yaw_weight * err

        open_heap = [(h(start), 0.0, start)]
        came = {start: -1}
        cost = {start: 0.0}
        done = set()
        while open_heap:
            _, g, n = heapq.heappop(open_heap)
            if n in done:
                continue
            done.add(n)
            if n in goals:
                path = [n]
                while came[path[-1]] != -1:
                    path.append(came[path[-1]])
                return path[::-1]
            for m, w in self.edges[n]:
                if (m in blocked and m not in goals) or (n, m) in blocked_edges:
                    continue
                ng = g + w
                if ng < cost.get(m, math.inf) - 1e-12:
                    cost[m] = ng
                    came[m] = n
                    heapq.heappush(open_heap, (ng + h(m), ng, m))
        raise NoRouteError(f"no route from node {start} to goal")

    def path_xy(self, path: list[int]) -> np.ndarray:
        return np.array([self._xy[n] for n in path])


def resample(poly: np.ndarray, spacing: float) -> np.ndarray:
    """Points every ``spacing`` metres along a polyline, endpoints included."""
    seg = np.hypot(*np.diff(poly, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    n = max(1, int(round(total / spacing)))
    s = np.linspace(0.0, total, n + 1)
    return np.stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])], axis=1)


def arc(cx: float, cy: float, r: float, a0: float, a1: float, n: int = 24) -> np.ndarray:
    t = np.linspace(a0, a1, n)
    return np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1)


def line(x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    return np.array([[x0, y0], [x1, y1]], dtype=np.float64)
