"""Occupancy grids: generation, shortest-path distances, connectivity and
dynamic-obstacle motion.

Cells are addressed as ``(x, y)`` with ``0 <= x < width`` and
``0 <= y < height``. Arrays are indexed ``[x, y]``. Only static obstacles
block paths; dynamic obstacles are handled by action masking.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidPositionError, InvalidSourceError, MapDegenerateError

Coord = tuple[int, int]

UNREACHABLE = int(np.iinfo(np.int64).max)

# up, down, left, right; matches the first four action indices
MOVES: tuple[Coord, ...] = ((0, -1), (0, 1), (-1, 0), (1, 0))

MAP_MAGIC = "DMSMAP"
MAP_VERSION = 1


class MapFormatError(ConfigError):
    pass


@dataclass(frozen=True)
class DistanceField:
    source: Coord
    dist: np.ndarray

    def __getitem__(self, cell: Coord) -> int:
        return int(self.dist[cell[0], cell[1]])

    def reachable(self, cell: Coord) -> bool:
        return self[cell] != UNREACHABLE


@dataclass(frozen=True, eq=False)
class GridMap:
    width: int
    height: int
    static: np.ndarray  # bool [width, height]
    dynamic: tuple[Coord, ...] = ()
    seed: int = 0
    spawn_hints: tuple[Coord, ...] = ()
    # shared by every dynamic-obstacle snapshot of the same static layout
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.static.shape != (self.width, self.height):
            raise ConfigError(f"static grid shape {self.static.shape} != {(self.width, self.height)}")
        self.static.setflags(write=False)
        for c in self.dynamic:
            if not self.in_bounds(c):
                raise ConfigError(f"dynamic obstacle {c} off-grid")
            if self.static[c]:
                raise ConfigError(f"dynamic obstacle {c} overlaps a static obstacle")
        if len(set(self.dynamic)) != len(self.dynamic):
            raise ConfigError("duplicate dynamic obstacle positions")

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.seed == other.seed
            and self.dynamic == other.dynamic
            and self.spawn_hints == other.spawn_hints
            and np.array_equal(self.static, other.static)
        )

    __hash__ = None

    @property
    def static_cells(self) -> set[Coord]:
        return {(int(x), int(y)) for x, y in np.argwhere(self.static)}

    @property
    def dynamic_cells(self) -> set[Coord]:
        return set(self.dynamic)

    def in_bounds(self, cell: Coord) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell: Coord) -> bool:
        """On-grid and not a static obstacle."""
        return self.in_bounds(cell) and not self.static[cell[0], cell[1]]

    def blocked_grid(self) -> np.ndarray:
        """Static and dynamic obstacles combined."""
        grid = self.static.copy()
        for x, y in self.dynamic:
            grid[x, y] = True
        return grid

    def free_cells(self) -> list[Coord]:
        return [(int(x), int(y)) for x, y in np.argwhere(~self.static)]

    def with_dynamic(self, dynamic: Sequence[Coord]) -> "GridMap":
        return GridMap(self.width, self.height, self.static, tuple(dynamic), self.seed,
                       self.spawn_hints, self._cache)

    def _neighbours(self) -> list[list[int]]:
        nbrs = self._cache.get("nbrs")
        if nbrs is None:
            W, H = self.width, self.height
            free = ~self.static
            nbrs = [[] for _ in range(W * H)]
            for x in range(W):
                for y in range(H):
                    if not free[x, y]:
                        continue
                    lst = nbrs[x * H + y]
                    for dx, dy in MOVES:
                        nx, ny = x + dx, y + dy
                        if 0 <= nx < W and 0 <= ny < H and free[nx, ny]:
                            lst.append(nx * H + ny)
            self._cache["nbrs"] = nbrs
        return nbrs

    def components(self) -> np.ndarray:
        """Label of the 4-connected static-free component per cell; -1 on obstacles."""
        labels = self._cache.get("components")
        if labels is None:
            nbrs = self._neighbours()
            H = self.height
            flat = np.full(self.width * H, -1, dtype=np.int64)
            free = (~self.static).ravel()
            label = 0
            for start in range(self.width * H):
                if not free[start] or flat[start] >= 0:
                    continue
                flat[start] = label
                queue = deque([start])
                while queue:
                    u = queue.popleft()
                    for v in nbrs[u]:
                        if flat[v] < 0:
                            flat[v] = label
                            queue.append(v)
                label += 1
            labels = flat.reshape(self.width, H)
            labels.setflags(write=False)
            self._cache["components"] = labels
        return labels

    def largest_component(self) -> np.ndarray:
        labels = self.components()
        valid = labels[labels >= 0]
        if valid.size == 0:
            raise MapDegenerateError("map has no free cells")
        counts = np.bincount(valid)
        return labels == int(np.argmax(counts))


def _validate_dims(X, Y, static_density, dynamic_density):
    if int(X) != X or int(Y) != Y or X < 3 or Y < 3:
        raise ConfigError(f"map dimensions must be integers >= 3, got {X}x{Y}")
    for name, d in (("static_density", static_density), ("dynamic_density", dynamic_density)):
        if not 0.0 <= d < 0.5:
            raise ConfigError(f"{name} must lie in [0, 0.5), got {d}")


def generate_map(X: int, Y: int, static_density: float, dynamic_density: float, seed: int) -> GridMap:
    """Random map where each cell is independently a static obstacle, and each
    remaining cell independently a dynamic obstacle start."""
    _validate_dims(X, Y, static_density, dynamic_density)
    rng = np.random.default_rng(seed)
    static = rng.random((X, Y)) < static_density
    dyn = (rng.random((X, Y)) < dynamic_density) & ~static
    dynamic = tuple((int(x), int(y)) for x, y in np.argwhere(dyn))
    return GridMap(int(X), int(Y), static, dynamic, int(seed))


def empty_map(X: int, Y: int, seed: int = 0) -> GridMap:
    return GridMap(X, Y, np.zeros((X, Y), dtype=bool), (), seed)


def map_from_rows(rows: Sequence[str], seed: int = 0) -> GridMap:
    """Build a map from rows of ``.#DR`` characters; row index is y."""
    if not rows:
        raise MapFormatError("no map rows")
    X, Y = len(rows[0]), len(rows)
    static = np.zeros((X, Y), dtype=bool)
    dynamic: list[Coord] = []
    hints: list[Coord] = []
    for y, row in enumerate(rows):
        if len(row) != X:
            raise MapFormatError(f"ragged map line {y}: expected {X} chars, got {len(row)}")
        for x, ch in enumerate(row):
            if ch == "#":
                static[x, y] = True
            elif ch == "D":
                dynamic.append((x, y))
            elif ch == "R":
                hints.append((x, y))
            elif ch != ".":
                raise MapFormatError(f"unknown map character {ch!r} at ({x}, {y})")
    # dynamic obstacles are indexed x-major, same as generate_map
    return GridMap(X, Y, static, tuple(sorted(dynamic)), seed, tuple(hints))


def format_map(grid: GridMap) -> str:
    chars = np.full((grid.height, grid.width), ".", dtype="<U1")
    chars[grid.static.T] = "#"
    for x, y in grid.spawn_hints:
        chars[y, x] = "R"
    for x, y in grid.dynamic:
        chars[y, x] = "D"
    lines = [f"{MAP_MAGIC} {MAP_VERSION} {grid.width} {grid.height} {grid.seed}"]
    lines += ["".join(row) for row in chars]
    return "\n".join(lines) + "\n"


def parse_map(text: str) -> GridMap:
    lines = text.splitlines()
    if not lines:
        raise MapFormatError("empty map file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != MAP_MAGIC:
        raise MapFormatError(f"bad map header: {lines[0]!r}")
    if head[1] != str(MAP_VERSION):
        raise MapFormatError(f"unsupported map version {head[1]}")
    try:
        X, Y, seed = int(head[2]), int(head[3]), int(head[4])
    except ValueError as exc:
        raise MapFormatError(f"bad map header: {lines[0]!r}") from exc
    rows = lines[1:]
    while rows and rows[-1] == "":
        rows.pop()
    if len(rows) != Y:
        raise MapFormatError(f"expected {Y} map rows, got {len(rows)}")
    if any(len(r) != X for r in rows):
        raise MapFormatError("ragged map lines")
    return map_from_rows(rows, seed)


def save_map(grid: GridMap, path) -> Path:
    path = Path(path)
    path.write_text(format_map(grid))
    return path


def load_map(path) -> GridMap:
    return parse_map(Path(path).read_text())


def shortest_path_distances(grid: GridMap, source: Coord) -> DistanceField:
    """Breadth-first step distances from ``source`` around static obstacles.

    Results are cached on the map's static layout and returned read-only.
    """
    source = (int(source[0]), int(source[1]))
    if not grid.is_free(source):
        raise InvalidSourceError(f"source {source} is off-grid or a static obstacle")
    cache = grid._cache.setdefault("dist", {})
    field_ = cache.get(source)
    if field_ is not None:
        return field_
    H = grid.height
    nbrs = grid._neighbours()
    flat = np.full(grid.width * H, UNREACHABLE, dtype=np.int64)
    dist = [-1] * (grid.width * H)
    s = source[0] * H + source[1]
    dist[s] = 0
    queue = deque([s])
    while queue:
        u = queue.popleft()
        du = dist[u] + 1
        for v in nbrs[u]:
            if dist[v] < 0:
                dist[v] = du
                queue.append(v)
    arr = np.asarray(dist, dtype=np.int64)
    flat = np.where(arr >= 0, arr, flat)
    out = flat.reshape(grid.width, H)
    out.setflags(write=False)
    field_ = DistanceField(source, out)
    cache[source] = field_
    return field_


def is_rendezvous_feasible(grid: GridMap, positions: Sequence[Coord]) -> bool:
    if not positions:
        raise InvalidPositionError("positions must be non-empty")
    for p in positions:
        if not grid.is_free(p):
            raise InvalidPositionError(f"position {p} is off-grid or on a static obstacle")
    labels = grid.components()
    first = labels[positions[0][0], positions[0][1]]
    return all(labels[p[0], p[1]] == first for p in positions)


def step_dynamic_obstacles(grid: GridMap, rng: np.random.Generator) -> GridMap:
    """Move every dynamic obstacle once, in index order.

    Each obstacle picks uniformly among staying put and the on-grid
    4-neighbours not occupied by any obstacle at the moment it moves.
    """
    if not grid.dynamic:
        return grid
    occupied = set(grid.dynamic)
    static = grid.static
    W, H = grid.width, grid.height
    moved: list[Coord] = []
    for x, y in grid.dynamic:
        choices = [(x, y)]
        for dx, dy in MOVES:
            nx, ny = x + dx, y + dy
            if 0 <= nx < W and 0 <= ny < H and not static[nx, ny] and (nx, ny) not in occupied:
                choices.append((nx, ny))
        nxt = choices[int(rng.integers(len(choices)))] if len(choices) > 1 else (x, y)
        occupied.discard((x, y))
        occupied.add(nxt)
        moved.append(nxt)
    return grid.with_dynamic(moved)


def nearest_free_cell(grid: GridMap, cell: Coord, rng: np.random.Generator,
                      allowed: Optional[np.ndarray] = None) -> Coord:
    """Return ``cell`` if it is usable, else a random usable 4-neighbour, else
    the closest usable cell by grid BFS with ties broken by ``rng``.

    ``allowed`` optionally restricts usable cells (e.g. to one component);
    by default any static-free cell is usable.
    """
    usable = ~grid.static if allowed is None else (allowed & ~grid.static)
    W, H = grid.width, grid.height

    def ok(c):
        return 0 <= c[0] < W and 0 <= c[1] < H and bool(usable[c[0], c[1]])

    cell = (int(cell[0]), int(cell[1]))
    if ok(cell):
        return cell
    nbrs = [(cell[0] + dx, cell[1] + dy) for dx, dy in MOVES]
    nbrs = [c for c in nbrs if ok(c)]
    if nbrs:
        return nbrs[int(rng.integers(len(nbrs)))]
    if not usable.any():
        raise MapDegenerateError("no free cell on the map")
    start = (min(max(cell[0], 0), W - 1), min(max(cell[1], 0), H - 1))
    seen = {start}
    frontier = [start]
    while frontier:
        hits = [c for c in frontier if ok(c)]
        if hits:
            return hits[int(rng.integers(len(hits)))]
        nxt = []
        for x, y in frontier:
            for dx, dy in MOVES:
                c = (x + dx, y + dy)
                if 0 <= c[0] < W and 0 <= c[1] < H and c not in seen:
                    seen.add(c)
                    nxt.append(c)
        frontier = nxt
    raise MapDegenerateError("no free cell reachable")  # pragma: no cover


def component_cells(grid: GridMap, cell: Coord) -> np.ndarray:
    labels = grid.components()
    return labels == labels[cell[0], cell[1]]

