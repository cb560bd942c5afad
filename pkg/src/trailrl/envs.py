"""Goal-conditioned environments.

Every environment emits observations normalized to [-1, 1] per dimension.
Grid worlds use 4 cardinal moves on a position-only state; the continuous
rooms world takes a 2D displacement command of bounded norm.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .replay import Trajectory

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
# (d_row, d_col), indexed by action; also the BFS expansion order
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)


class InvalidQueryError(ValueError):
    pass


class UnreachableGoalError(RuntimeError):
    pass


@dataclass(frozen=True)
class ActionSpaceSpec:
    kind: str  # "discrete" | "continuous"
    n_actions: int = 0
    dim: int = 0
    max_norm: float = 0.0

    def __post_init__(self):
        if self.kind == "discrete":
            if self.n_actions < 2:
                raise ValueError("discrete action space needs n_actions >= 2")
        elif self.kind == "continuous":
            if self.dim < 1 or self.max_norm <= 0:
                raise ValueError("continuous action space needs dim >= 1 and max_norm > 0")
        else:
            raise ValueError(f"unknown action space kind {self.kind!r}")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"


@dataclass(frozen=True)
class GoalEnvSpec:
    name: str
    state_dim: int
    action_space: ActionSpaceSpec
    horizon: int
    goal_tolerance: float

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.goal_tolerance < 0:
            raise ValueError("goal_tolerance must be >= 0")


@dataclass(frozen=True)
class GoalQuery:
    start: np.ndarray
    goal: np.ndarray
    id: int = 0


class GoalEnv:
    """Base class: holds the seeded RNG and the current (state, goal)."""

    spec: GoalEnvSpec

    def __init__(self, spec: GoalEnvSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.state: np.ndarray | None = None
        self.goal: np.ndarray | None = None

    # subclasses provide: sample_state, validate_state, transition, is_success_batch

    def is_success(self, s, g) -> bool:
        return bool(self.is_success_batch(np.atleast_2d(s), np.atleast_2d(g))[0])

    def sample_query(self, rng: np.random.Generator | None = None, qid: int = 0) -> GoalQuery:
        rng = self.rng if rng is None else rng
        start = self.sample_state(rng)
        while True:
            goal = self.sample_state(rng)
            if not self.is_success(start, goal):
                return GoalQuery(start, goal, qid)

    def sample_queries(self, n: int, seed: int) -> list[GoalQuery]:
        rng = np.random.default_rng(seed)
        return [self.sample_query(rng, qid=i) for i in range(n)]

    def reset(self, query: GoalQuery | None = None) -> tuple[np.ndarray, np.ndarray]:
        if query is None:
            query = self.sample_query()
        else:
            self.validate_state(query.start)
            self.validate_state(query.goal)
        self.state = np.array(query.start, dtype=np.float64)
        self.goal = np.array(query.goal, dtype=np.float64)
        return self.state.copy(), self.goal.copy()

    def step(self, action) -> np.ndarray:
        if self.state is None:
            raise RuntimeError("step() called before reset()")
        nxt = self.transition(self.state[None], np.asarray(action)[None], self.goal[None], self.rng)
        self.state = nxt[0]
        return self.state.copy()


class GridEnv(GoalEnv):
    """Deterministic grid world over a boolean wall map.

    Observation is (x, y) = (col, row) mapped linearly onto [-1, 1].
    """

    def __init__(self, walls: np.ndarray, horizon: int, seed: int = 0, name: str = "grid",
                 doors: Iterable[tuple[int, int]] = ()):
        walls = np.asarray(walls, dtype=bool)
        if walls.ndim != 2 or min(walls.shape) < 3:
            raise ValueError("wall map must be a 2D array of at least 3x3")
        if not (walls[0].all() and walls[-1].all() and walls[:, 0].all() and walls[:, -1].all()):
            raise ValueError("wall map must have a solid border")
        spec = GoalEnvSpec(name, 2, ActionSpaceSpec("discrete", n_actions=4), horizon, 0.0)
        super().__init__(spec, seed)
        self.walls = walls
        self.doors = frozenset(doors)
        self.height, self.width = walls.shape
        self.free_cells = np.argwhere(~walls)
        self._scale = np.array([2.0 / (self.width - 1), 2.0 / (self.height - 1)])
        unreached = len(self.free_cells) - len(self.bfs_distances(tuple(self.free_cells[0])))
        if unreached:
            raise ValueError(f"layout is not connected: {unreached} free cells unreachable")

    def cell_to_obs(self, cells) -> np.ndarray:
        cells = np.asarray(cells)
        xy = cells[..., ::-1].astype(np.float64)
        return xy * self._scale - 1.0

    def obs_to_cell(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        xy = np.rint((obs + 1.0) / self._scale).astype(np.int64)
        return xy[..., ::-1]

    def validate_state(self, obs) -> tuple[int, int]:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (2,) or not np.all(np.isfinite(obs)):
            raise InvalidQueryError(f"grid state must be a finite 2-vector, got {obs!r}")
        r, c = self.obs_to_cell(obs)
        if not (0 <= r < self.height and 0 <= c < self.width):
            raise InvalidQueryError(f"state {obs.tolist()} is out of bounds")
        if np.abs(self.cell_to_obs((r, c)) - obs).max() > 1e-9:
            raise InvalidQueryError(f"state {obs.tolist()} is not on a cell center")
        if self.walls[r, c]:
            raise InvalidQueryError(f"state {obs.tolist()} is a wall cell ({r}, {c})")
        return int(r), int(c)

    def sample_state(self, rng: np.random.Generator) -> np.ndarray:
        return self.cell_to_obs(self.free_cells[rng.integers(len(self.free_cells))])

    def is_success_batch(self, s, g) -> np.ndarray:
        return np.all(self.obs_to_cell(s) == self.obs_to_cell(g), axis=-1)

    def transition(self, s, a, g, rng=None) -> np.ndarray:
        a = np.asarray(a).astype(np.int64).reshape(-1)
        if a.min() < 0 or a.max() >= 4:
            raise ValueError(f"discrete action out of range: {a.tolist()}")
        cells = self.obs_to_cell(s)
        nxt = cells + MOVES[a]
        blocked = self.walls[nxt[:, 0], nxt[:, 1]] | self.is_success_batch(s, g)
        nxt[blocked] = cells[blocked]
        return self.cell_to_obs(nxt)

    def neighbors(self, cell: tuple[int, int]):
        r, c = cell
        for a, (dr, dc) in enumerate(MOVES):
            if not self.walls[r + dr, c + dc]:
                yield a, (r + dr, c + dc)

    def bfs_distances(self, source: tuple[int, int]) -> dict[tuple[int, int], int]:
        dist = {source: 0}
        queue = deque([source])
        while queue:
            cell = queue.popleft()
            for _, nxt in self.neighbors(cell):
                if nxt not in dist:
                    dist[nxt] = dist[cell] + 1
                    queue.append(nxt)
        return dist

    def shortest_path(self, s, g) -> Trajectory:
        """BFS shortest path; neighbors are expanded in action order up, down, left, right."""
        src, dst = self.validate_state(s), self.validate_state(g)
        parent: dict[tuple[int, int], tuple[tuple[int, int], int] | None] = {src: None}
        queue = deque([src])
        while queue and dst not in parent:
            cell = queue.popleft()
            for a, nxt in self.neighbors(cell):
                if nxt not in parent:
                    parent[nxt] = (cell, a)
                    queue.append(nxt)
        if dst not in parent:
            raise UnreachableGoalError(f"{dst} is unreachable from {src}")
        cells, actions = [dst], []
        while parent[cells[-1]] is not None:
            prev, a = parent[cells[-1]]
            cells.append(prev)
            actions.append(a)
        cells.reverse()
        actions.reverse()
        return Trajectory(self.cell_to_obs(np.array(cells)), np.array(actions, dtype=np.int64))

    def to_text(self) -> str:
        rows = []
        for r in range(self.height):
            rows.append("".join(
                "#" if self.walls[r, c] else ("D" if (r, c) in self.doors else ".")
                for c in range(self.width)))
        return "\n".join(rows) + "\n"


def make_discrete_rooms(rooms_x: int, rooms_y: int, room_size: int, seed: int,
                        horizon: int = 50) -> GridEnv:
    """Grid of rooms_x by rooms_y square rooms joined by one-cell doors at random wall positions."""
    if rooms_x < 1 or rooms_y < 1:
        raise ValueError("need at least one room in each direction")
    if room_size < 2:
        raise ValueError("room_size must be >= 2")
    pitch = room_size + 1
    height, width = rooms_y * pitch + 1, rooms_x * pitch + 1
    walls = np.zeros((height, width), dtype=bool)
    walls[::pitch, :] = True
    walls[:, ::pitch] = True
    rng = np.random.default_rng(seed)
    doors = []
    for ry in range(rooms_y):
        for rx in range(rooms_x - 1):
            # vertical wall between (rx, ry) and (rx+1, ry)
            doors.append((ry * pitch + 1 + int(rng.integers(room_size)), (rx + 1) * pitch))
    for ry in range(rooms_y - 1):
        for rx in range(rooms_x):
            doors.append(((ry + 1) * pitch, rx * pitch + 1 + int(rng.integers(room_size))))
    for r, c in doors:
        walls[r, c] = False
    name = f"rooms_{rooms_x}x{rooms_y}_{room_size}"
    return GridEnv(walls, horizon, seed=seed, name=name, doors=doors)


def _spiral_arm(n_segments: int) -> list[tuple[int, int]]:
    # clockwise square spiral in (x, y) with y pointing down; segment k has 2k cells
    dirs = [(1, 0), (0, 1), (-1, 0), (0, -1)]
    x = y = 0
    pts = [(0, 0)]
    for k in range(1, n_segments + 1):
        dx, dy = dirs[(k - 1) % 4]
        for _ in range(2 * k):
            x, y = x + dx, y + dy
            pts.append((x, y))
    return pts


def double_spiral_walls(turns: int = 13, size: int = 31) -> np.ndarray:
    """Two interleaved single-cell corridors spiralling out from the center.

    The second arm is the first rotated by 180 degrees about (0, 1); it is one
    segment shorter so both outer ends finish on the right, where a connector
    column joins them. ``turns`` must be odd.
    """
    if turns < 3 or turns % 2 == 0:
        raise ValueError("turns must be an odd integer >= 3")
    arm_a = _spiral_arm(turns)
    arm_b = [(-x, 2 - y) for x, y in _spiral_arm(turns - 1)]
    ax, ay = arm_a[-1]
    bx, by = arm_b[-1]
    # arm A ends heading east along the top, arm B ends heading south on the right
    connector = [(ax, y) for y in range(ay + 1, by + 2)] + [(x, by + 1) for x in range(bx, ax)]
    cells = arm_a + arm_b + connector
    xs = [p[0] for p in cells]
    ys = [p[1] for p in cells]
    x0, y0 = min(xs) - 1, min(ys) - 1
    size = max(max(xs) - x0 + 2, max(ys) - y0 + 2, size)
    walls = np.ones((size, size), dtype=bool)
    for x, y in cells:
        walls[y - y0, x - x0] = False
    return walls


def make_double_spiral(seed: int = 0, horizon: int = 200, turns: int = 13, size: int = 31) -> GridEnv:
    return GridEnv(double_spiral_walls(turns, size), horizon, seed=seed, name="double_spiral")


class ContinuousRoomsEnv(GoalEnv):
    """2x2 rooms on [-1, 1]^2 separated by thin walls on x=0 and y=0.

    Each of the four wall segments has one door of ``door_width`` centered at
    +-``door_offset`` along the wall. A step clips the command to norm
    ``max_action``, adds Gaussian actuation noise, then applies the x and y
    components in turn, rejecting any component that would cross a wall or
    leave the square.
    """

    def __init__(self, noise_sigma: float = 0.0, horizon: int = 50, seed: int = 0,
                 max_action: float = 0.1, goal_tolerance: float = 0.2,
                 door_width: float = 0.2, door_offset: float = 0.5,
                 start_region: tuple[float, float, float, float] | None = None):
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        spec = GoalEnvSpec(f"continuous_rooms_{noise_sigma:g}", 2,
                           ActionSpaceSpec("continuous", dim=2, max_norm=max_action),
                           horizon, goal_tolerance)
        super().__init__(spec, seed)
        self.noise_sigma = float(noise_sigma)
        self.max_action = float(max_action)
        self.door_half = door_width / 2
        self.door_offset = door_offset
        # (xmin, xmax, ymin, ymax) limiting rho0's start states, e.g. one room
        self.start_region = start_region

    def validate_state(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (2,) or not np.all(np.isfinite(obs)):
            raise InvalidQueryError(f"continuous state must be a finite 2-vector, got {obs!r}")
        if np.abs(obs).max() > 1.0:
            raise InvalidQueryError(f"state {obs.tolist()} is out of bounds")
        return obs

    def sample_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=2)

    def sample_query(self, rng=None, qid=0):
        if self.start_region is None:
            return super().sample_query(rng, qid)
        rng = self.rng if rng is None else rng
        x0, x1, y0, y1 = self.start_region
        start = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        while True:
            goal = self.sample_state(rng)
            if not self.is_success(start, goal):
                return GoalQuery(start, goal, qid)

    def is_success_batch(self, s, g) -> np.ndarray:
        return np.linalg.norm(np.asarray(s) - np.asarray(g), axis=-1) <= self.spec.goal_tolerance

    def clip_action(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        norm = np.linalg.norm(a, axis=-1, keepdims=True)
        scale = np.minimum(1.0, self.max_action / np.maximum(norm, 1e-300))
        return a * scale

    def _in_door(self, along) -> np.ndarray:
        return np.abs(np.abs(along) - self.door_offset) <= self.door_half

    def transition(self, s, a, g, rng=None) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        disp = self.clip_action(np.asarray(a, dtype=np.float64).reshape(s.shape))
        if self.noise_sigma > 0:
            rng = self.rng if rng is None else rng
            disp = disp + rng.normal(0.0, self.noise_sigma, size=disp.shape)
        x, y = s[:, 0].copy(), s[:, 1].copy()
        nx = x + disp[:, 0]
        ok = (np.abs(nx) <= 1.0) & (((x < 0) == (nx < 0)) | self._in_door(y))
        x = np.where(ok, nx, x)
        ny = y + disp[:, 1]
        ok = (np.abs(ny) <= 1.0) & (((y < 0) == (ny < 0)) | self._in_door(x))
        y = np.where(ok, ny, y)
        nxt = np.stack([x, y], axis=1)
        done = self.is_success_batch(s, g)
        nxt[done] = s[done]
        return nxt


def make_continuous_rooms(noise_sigma: float = 0.0, seed: int = 0, horizon: int = 50,
                          **kwargs) -> ContinuousRoomsEnv:
    return ContinuousRoomsEnv(noise_sigma, horizon=horizon, seed=seed, **kwargs)


def make_env(name: str, seed: int = 0, **params) -> GoalEnv:
    """Build an environment from a registry name plus keyword params."""
    if name == "discrete_rooms":
        return make_discrete_rooms(params.pop("rooms_x", 3), params.pop("rooms_y", 3),
                                   params.pop("room_size", 5), seed, **params)
    if name == "large_rooms":
        return make_discrete_rooms(params.pop("rooms_x", 5), params.pop("rooms_y", 5),
                                   params.pop("room_size", 15), seed, horizon=params.pop("horizon", 200),
                                   **params)
    if name == "double_spiral":
        return make_double_spiral(seed, **params)
    if name == "continuous_rooms":
        return make_continuous_rooms(seed=seed, **params)
    raise ValueError(f"unknown environment {name!r}")


def write_queries(path, queries: Sequence[GoalQuery]) -> None:
    d = len(queries[0].start) if queries else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"start_{i}" for i in range(d)] + [f"goal_{i}" for i in range(d)])
        for q in queries:
            w.writerow([q.id] + [f"{v:.17g}" for v in (*q.start, *q.goal)])


def read_queries(path) -> list[GoalQuery]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "id" or (len(header) - 1) % 2:
        raise ValueError(f"{path}: malformed query header {header}")
    d = (len(header) - 1) // 2
    out = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        vals = np.array([float(v) for v in row[1:]])
        out.append(GoalQuery(vals[:d], vals[d:], int(row[0])))
    return out


def write_layout(path, env: GridEnv) -> None:
    Path(path).write_text(env.to_text())
