"""Grid-world navigation with randomised radiation zones and potential-based shaping."""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAP_DIR = Path(__file__).parent / "maps"
CELL_SIZE_M = 0.10


class MapError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


class EpisodeDone(RuntimeError):
    pass


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


MOVES = {Action.UP: (0, -1), Action.DOWN: (0, 1), Action.LEFT: (-1, 0), Action.RIGHT: (1, 0)}
_DELTAS = tuple(MOVES[a] for a in Action)


@dataclass(frozen=True)
class GridMap:
    walls: np.ndarray               # bool, indexed [y, x]
    start: tuple[int, int]          # (x, y)
    goal: tuple[int, int]
    cell_size_m: float = CELL_SIZE_M

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    def free(self, cell: tuple[int, int]) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and not self.walls[y, x]

    def to_text(self) -> str:
        rows = []
        for y in range(self.height):
            row = ["#" if w else "." for w in self.walls[y]]
            rows.append(row)
        rows[self.start[1]][self.start[0]] = "S"
        rows[self.goal[1]][self.goal[0]] = "G"
        return "\n".join("".join(r) for r in rows) + "\n"


def parse_map(text: str, cell_size_m: float = CELL_SIZE_M) -> GridMap:
    """ASCII map: ``#`` wall, ``.`` free, ``S`` start, ``G`` goal; border must be wall."""
    lines = [ln.rstrip("\r") for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MapError("empty map")
    width = len(lines[0])
    if any(len(ln) != width for ln in lines):
        raise MapError("map rows differ in length")
    walls = np.zeros((len(lines), width), dtype=bool)
    start = goal = None
    for y, ln in enumerate(lines):
        for x, ch in enumerate(ln):
            if ch == "#":
                walls[y, x] = True
            elif ch == "S":
                if start is not None:
                    raise MapError("more than one start")
                start = (x, y)
            elif ch == "G":
                if goal is not None:
                    raise MapError("more than one goal")
                goal = (x, y)
            elif ch != ".":
                raise MapError(f"unknown map character {ch!r} at ({x}, {y})")
    if start is None or goal is None:
        raise MapError("map needs one S and one G")
    if not (walls[0].all() and walls[-1].all() and walls[:, 0].all() and walls[:, -1].all()):
        raise MapError("map border must be walls")
    return GridMap(walls, start, goal, cell_size_m)


def load_map(path: str | Path) -> GridMap:
    return parse_map(Path(path).read_text())


def reference_map() -> GridMap:
    return load_map(MAP_DIR / "reference_20x20.txt")


@dataclass(frozen=True)
class RadiationZone:
    center: tuple[int, int]
    radius_cells: int = 2

    def cells(self, width: int, height: int) -> list[tuple[int, int]]:
        cx, cy, r = *self.center, self.radius_cells
        return [(x, y) for y in range(max(0, cy - r), min(height, cy + r + 1))
                for x in range(max(0, cx - r), min(width, cx + r + 1))
                if (x - cx) ** 2 + (y - cy) ** 2 <= r * r]


@dataclass(frozen=True)
class RewardParams:
    r_goal: float = 10.0
    r_collide: float = -0.1
    r_timeout: float = 0.0
    gamma: float = 0.99
    max_steps: int = 500


@dataclass(frozen=True)
class EnvConfig:
    zones: int = 3
    zone_radius: int = 2
    window: int = 5
    rewards: RewardParams = field(default_factory=RewardParams)
    n_mode: str = "total"           # "total" or "free" cells normalise the potential
    max_rejections: int = 100

    def __post_init__(self) -> None:
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd number")
        if self.zones < 0 or self.zone_radius < 1:
            raise ValueError("zones >= 0 and zone_radius >= 1 required")
        if self.n_mode not in ("total", "free"):
            raise ValueError("n_mode must be 'total' or 'free'")


@dataclass(frozen=True)
class Observation:
    curr: tuple[int, int]
    rel_goal: tuple[int, int]
    collidable_mask: np.ndarray
    visited_mask: np.ndarray

    def as_vector(self, width: int, height: int) -> np.ndarray:
        """Flattened network input.

        Position is scaled by the map size; the goal offset by the window size so
        that neighbouring cells near the goal stay distinguishable.
        """
        w = self.collidable_mask.shape[0]
        head = np.array([self.curr[0] / width, self.curr[1] / height,
                         self.rel_goal[0] / w, self.rel_goal[1] / w])
        return np.concatenate([head, self.collidable_mask.ravel(), self.visited_mask.ravel()])

    def key(self) -> bytes:
        return (np.array([*self.curr, *self.rel_goal], dtype=np.int16).tobytes()
                + np.packbits(self.collidable_mask).tobytes() + np.packbits(self.visited_mask).tobytes())


@dataclass(frozen=True)
class StepResult:
    obs: Observation
    reward: float
    terminated: bool
    truncated: bool
    outcome: str = ""               # GOAL, COLLISION, RADIATION, TIMEOUT or ""


def reachable(blocked: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> bool:
    """Breadth-first search over unblocked cells ([y, x] indexing)."""
    h, w = blocked.shape
    if blocked[start[1], start[0]] or blocked[goal[1], goal[0]]:
        return False
    seen = np.zeros_like(blocked)
    seen[start[1], start[0]] = True
    q = deque([start])
    while q:
        x, y = q.popleft()
        if (x, y) == goal:
            return True
        for dx, dy in _DELTAS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not blocked[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                q.append((nx, ny))
    return False


class NavEnv:
    """Single-robot grid world. Radiation zones are re-drawn at every reset."""

    def __init__(self, grid: GridMap, cfg: EnvConfig = EnvConfig(), seed: int | None = None) -> None:
        self.map = grid
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        free = ~grid.walls
        self.n_norm = grid.width * grid.height if cfg.n_mode == "total" else int(free.sum())
        self._candidates = [(int(x), int(y)) for y, x in zip(*np.nonzero(free))
                            if (x, y) not in (grid.start, grid.goal)]
        r = cfg.window // 2
        self._pad = r
        self.zones: list[RadiationZone] = []
        self.zone_mask = np.zeros_like(grid.walls)
        self._padded_block = np.ones((grid.height + 2 * r, grid.width + 2 * r), dtype=bool)
        self.pos = grid.start
        self.visited = np.zeros_like(grid.walls)
        self.steps = 0
        self.done = True

    # -- potential ------------------------------------------------------
    def phi(self, cell: tuple[int, int]) -> float:
        gx, gy = self.map.goal
        return -(abs(gx - cell[0]) + abs(gy - cell[1])) / self.n_norm

    # -- episode --------------------------------------------------------
    def place_zones(self) -> list[RadiationZone]:
        g, cfg = self.map, self.cfg
        if cfg.zones == 0:
            return []
        for _ in range(cfg.max_rejections):
            picks = self.rng.choice(len(self._candidates), size=cfg.zones, replace=False)
            zones = [RadiationZone(self._candidates[i], cfg.zone_radius) for i in picks]
            mask = np.zeros_like(g.walls)
            for z in zones:
                for x, y in z.cells(g.width, g.height):
                    mask[y, x] = True
            if mask[g.start[1], g.start[0]] or mask[g.goal[1], g.goal[0]]:
                continue
            if reachable(g.walls | mask, g.start, g.goal):
                return zones
        raise PlacementError(f"no valid zone placement after {cfg.max_rejections} tries")

    def set_zones(self, zones: list[RadiationZone]) -> None:
        g, r = self.map, self._pad
        self.zones = list(zones)
        self.zone_mask = np.zeros_like(g.walls)
        for z in self.zones:
            for x, y in z.cells(g.width, g.height):
                self.zone_mask[y, x] = True
        self._padded_block[:] = True
        self._padded_block[r:r + g.height, r:r + g.width] = g.walls | self.zone_mask

    def reset(self, seed: int | None = None) -> Observation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.set_zones(self.place_zones())
        self.pos = self.map.start
        self.visited = np.zeros_like(self.map.walls)
        self.visited[self.pos[1], self.pos[0]] = True
        self.steps = 0
        self.done = False
        return self.observe()

    def observe(self) -> Observation:
        x, y = self.pos
        w = self.cfg.window
        coll = self._padded_block[y:y + w, x:x + w].copy()
        r = self._pad
        vis = np.zeros((w, w), dtype=bool)
        g = self.map
        y0, y1 = max(0, y - r), min(g.height, y + r + 1)
        x0, x1 = max(0, x - r), min(g.width, x + r + 1)
        vis[y0 - (y - r):y1 - (y - r), x0 - (x - r):x1 - (x - r)] = self.visited[y0:y1, x0:x1]
        gx, gy = g.goal
        return Observation((x, y), (gx - x, gy - y), coll, vis)

    def step(self, action: Action | int) -> StepResult:
        if self.done:
            raise EpisodeDone("episode finished; call reset()")
        rp = self.cfg.rewards
        dx, dy = _DELTAS[int(action)]
        old = self.pos
        new = (old[0] + dx, old[1] + dy)
        self.steps += 1
        g = self.map
        if not g.free(new) or self.zone_mask[new[1], new[0]]:
            self.done = True
            outcome = "COLLISION" if not g.free(new) else "RADIATION"
            return StepResult(self.observe(), rp.r_collide, True, False, outcome)
        self.pos = new
        self.visited[new[1], new[0]] = True
        if new == g.goal:
            self.done = True
            return StepResult(self.observe(), rp.r_goal, True, False, "GOAL")
        if self.steps >= rp.max_steps:
            self.done = True
            return StepResult(self.observe(), rp.r_timeout, False, True, "TIMEOUT")
        reward = rp.gamma * self.phi(new) - self.phi(old)
        return StepResult(self.observe(), reward, False, False)


def open_moves(obs: Observation) -> list[int]:
    """Actions whose target cell the observation does not mark collidable (all four if none)."""
    c = obs.collidable_mask
    r = c.shape[0] // 2
    moves = [int(a) for a, (dx, dy) in zip(Action, _DELTAS) if not c[r + dy, r + dx]]
    return moves or [int(a) for a in Action]


def map_from_twin(link, tag: str = "NAV_MAP") -> GridMap:
    """Fetch the ASCII layout published by the twin mirror as a text tag."""
    tv = link.read_tag(tag)
    if not isinstance(tv.value, str):
        raise MapError(f"{tag} is not a text tag")
    return parse_map(tv.value)
