"""Static rail network: grid of transition cells, road types, distance maps.

A cell is a 16-bit mask laid out in four 4-bit blocks, one block per
incoming heading (N, E, S, W from the most significant block down).  Within
a block the 4 bits flag the allowed outgoing headings, again in N, E, S, W
order.  Example: ``1000 0000 0010 0000`` is a vertical straight -- a train
heading north keeps heading north, a train heading south keeps south.
"""

from __future__ import annotations

import math
from collections import deque
from enum import IntEnum

import numpy as np

from .errors import DomainError


class Direction(IntEnum):
    """Compass heading, clockwise so that rotation is addition mod 4."""

    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    def opposite(self) -> "Direction":
        return Direction((self + 2) % 4)

    def left(self) -> "Direction":
        return Direction((self - 1) % 4)

    def right(self) -> "Direction":
        return Direction((self + 1) % 4)


# (row, col) deltas per heading; row 0 is the top of the map.
DIR_DELTA = {
    Direction.NORTH: (-1, 0),
    Direction.EAST: (0, 1),
    Direction.SOUTH: (1, 0),
    Direction.WEST: (0, -1),
}


def transition_bit(incoming: int, outgoing: int) -> int:
    """Mask bit for entering with heading `incoming` and leaving with `outgoing`."""
    return 1 << (15 - (4 * int(incoming) + int(outgoing)))


def has_transition(cell: int, incoming: int, outgoing: int) -> bool:
    return bool(cell & transition_bit(incoming, outgoing))


def outgoing_headings(cell: int, incoming: int) -> list[Direction]:
    block = (cell >> (4 * (3 - int(incoming)))) & 0xF
    return [Direction(o) for o in range(4) if block & (1 << (3 - o))]


def is_rail(cell: int) -> bool:
    return cell != 0


def rotate_cell(cell: int, quarter_turns: int = 1) -> int:
    """Rotate the cell geometry clockwise by 90-degree steps."""
    q = quarter_turns % 4
    out = cell
    for _ in range(q):
        rotated = 0
        for i in range(4):
            for o in range(4):
                if has_transition(out, i, o):
                    rotated |= transition_bit((i + 1) % 4, (o + 1) % 4)
        out = rotated
    return out


def mirror_cell(cell: int) -> int:
    """Mirror the cell geometry east-west."""
    flip = {0: 0, 1: 3, 2: 2, 3: 1}
    mirrored = 0
    for i in range(4):
        for o in range(4):
            if has_transition(cell, i, o):
                mirrored |= transition_bit(flip[i], flip[o])
    return mirrored


# ---------------------------------------------------------------------------
# Cell construction from track segments.
#
# A segment joins two cell sides; a train entering through side `a` moves with
# heading opposite(a) and exits through side `b` with heading `b`.  A stub is a
# buffer stop: the track reaches side `a` only and the train reverses.
# ---------------------------------------------------------------------------

def cell_from_segments(segments, stubs=()) -> int:
    bits = 0
    for a, b in segments:
        bits |= transition_bit(Direction(a).opposite(), b)
        bits |= transition_bit(Direction(b).opposite(), a)
    for a in stubs:
        bits |= transition_bit(Direction(a).opposite(), a)
    return bits


def straight_cell(axis: str = "ns") -> int:
    if axis == "ns":
        return cell_from_segments([(Direction.NORTH, Direction.SOUTH)])
    return cell_from_segments([(Direction.EAST, Direction.WEST)])


def curve_cell(side_a: Direction, side_b: Direction) -> int:
    return cell_from_segments([(side_a, side_b)])


def dead_end_cell(open_side: Direction) -> int:
    return cell_from_segments([], stubs=[open_side])


class RoadType(IntEnum):
    """Canonical cell geometry classes, one-hot slots 0..10."""

    EMPTY = 0
    STRAIGHT = 1
    CURVE = 2
    SIMPLE_SWITCH_LEFT = 3
    SIMPLE_SWITCH_RIGHT = 4
    DIAMOND = 5
    SINGLE_SLIP = 6
    DOUBLE_SLIP = 7
    SYMMETRIC_SWITCH = 8
    DEAD_END = 9
    CUSTOM = 10


N, E, S, W = Direction.NORTH, Direction.EAST, Direction.SOUTH, Direction.WEST

# Canonical representatives; classification closes them under rotation.
# The left/right simple switches are mirror images and deliberately kept
# distinct (they are distinct choices for the driver).
_CANONICAL = {
    RoadType.EMPTY: 0,
    RoadType.STRAIGHT: cell_from_segments([(N, S)]),
    RoadType.CURVE: cell_from_segments([(S, E)]),
    # facing a northbound train: forward plus a left branch to the west
    RoadType.SIMPLE_SWITCH_LEFT: cell_from_segments([(N, S), (S, W)]),
    RoadType.SIMPLE_SWITCH_RIGHT: cell_from_segments([(N, S), (S, E)]),
    RoadType.DIAMOND: cell_from_segments([(N, S), (E, W)]),
    RoadType.SINGLE_SLIP: cell_from_segments([(N, S), (E, W), (S, W)]),
    RoadType.DOUBLE_SLIP: cell_from_segments([(N, S), (E, W), (S, E), (N, W)]),
    RoadType.SYMMETRIC_SWITCH: cell_from_segments([(S, E), (S, W)]),
    RoadType.DEAD_END: dead_end_cell(S),
}

_ROAD_TYPE_LOOKUP: dict[int, RoadType] = {}
for _type, _bits in _CANONICAL.items():
    for _q in range(4):
        _ROAD_TYPE_LOOKUP.setdefault(rotate_cell(_bits, _q), _type)


def classify_road_type(cell: int) -> RoadType:
    """Classify a transition mask; unknown geometry maps to CUSTOM."""
    return _ROAD_TYPE_LOOKUP.get(cell, RoadType.CUSTOM)


class RailGrid:
    """Immutable-by-convention rail map plus lazily built derived structures."""

    def __init__(self, cells: np.ndarray, cities=None):
        cells = np.asarray(cells, dtype=np.uint16)
        if cells.ndim != 2:
            raise DomainError("cells must be a 2-D array")
        self.cells = cells
        self.height, self.width = cells.shape
        self.cities = list(cities or [])
        self._dist_cache: dict[tuple[int, int], DistanceMap] = {}
        self._segment_graph = None

    def __eq__(self, other):
        return (
            isinstance(other, RailGrid)
            and np.array_equal(self.cells, other.cells)
            and self.cities == other.cities
        )

    def in_bounds(self, pos) -> bool:
        r, c = pos
        return 0 <= r < self.height and 0 <= c < self.width

    def cell_at(self, pos) -> int:
        return int(self.cells[pos[0], pos[1]])

    def is_rail(self, pos) -> bool:
        return self.in_bounds(pos) and self.cells[pos[0], pos[1]] != 0

    def cell_index(self, pos) -> int:
        return pos[0] * self.width + pos[1]

    def rail_positions(self):
        rows, cols = np.nonzero(self.cells)
        return [(int(r), int(c)) for r, c in zip(rows, cols)]

    def rotated(self) -> "RailGrid":
        """New grid rotated 90 degrees clockwise (used by covariance checks)."""
        h, w = self.height, self.width
        out = np.zeros((w, h), dtype=np.uint16)
        for r in range(h):
            for c in range(w):
                out[c, h - 1 - r] = rotate_cell(int(self.cells[r, c]), 1)
        cities = [((c, h - 1 - r), name) for (r, c), name in self.cities]
        return RailGrid(out, cities)


def rotate_position(pos, height: int):
    """Position mapping matching RailGrid.rotated()."""
    r, c = pos
    return (c, height - 1 - r)


def valid_transitions(grid: RailGrid, pos, heading: Direction):
    """(outgoing heading, next position) pairs leaving `pos` with `heading`.

    Sorted by outgoing heading so iteration order is reproducible.
    """
    if not grid.in_bounds(pos):
        raise DomainError(f"position {pos} out of bounds")
    cell = grid.cell_at(pos)
    if not is_rail(cell):
        raise DomainError(f"cell {pos} is not rail")
    moves = []
    for out in sorted(outgoing_headings(cell, heading)):
        dr, dc = DIR_DELTA[out]
        moves.append((Direction(out), (pos[0] + dr, pos[1] + dc)))
    return tuple(moves)


INF = math.inf


class DistanceMap:
    """Shortest step counts from every (position, heading) state to a target cell."""

    def __init__(self, target, dist: np.ndarray, width: int, height: int):
        self.target = target
        self.width = width
        self.height = height
        self._dist = dist  # int32, -1 encodes unreachable

    def get(self, pos, heading) -> float:
        d = self._dist[(pos[0] * self.width + pos[1]) * 4 + int(heading)]
        return INF if d < 0 else int(d)

    def raw(self) -> np.ndarray:
        return self._dist


def shortest_distance_map(grid: RailGrid, target) -> DistanceMap:
    """Reverse BFS over the directed (position, heading) graph, unit edge cost.

    States located on the target cell have distance 0 for every heading.
    Results are cached on the grid per target.
    """
    if not grid.is_rail(target):
        raise DomainError(f"target {target} is not a rail cell")
    key = (int(target[0]), int(target[1]))
    cached = grid._dist_cache.get(key)
    if cached is not None:
        return cached

    w, h = grid.width, grid.height
    n_states = w * h * 4
    # reverse adjacency: for each state, the states that step into it
    rev: list[list[int]] = [[] for _ in range(n_states)]
    for r in range(h):
        for c in range(w):
            cell = int(grid.cells[r, c])
            if cell == 0:
                continue
            base = (r * w + c) * 4
            for inc in range(4):
                for out in outgoing_headings(cell, inc):
                    dr, dc = DIR_DELTA[out]
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < h and 0 <= nc < w and grid.cells[nr, nc]:
                        rev[(nr * w + nc) * 4 + int(out)].append(base + inc)

    dist = np.full(n_states, -1, dtype=np.int32)
    queue = deque()
    tbase = (key[0] * w + key[1]) * 4
    for hdg in range(4):
        dist[tbase + hdg] = 0
        queue.append(tbase + hdg)
    while queue:
        s = queue.popleft()
        d = dist[s] + 1
        for p in rev[s]:
            if dist[p] < 0:
                dist[p] = d
                queue.append(p)

    dm = DistanceMap(key, dist, w, h)
    grid._dist_cache[key] = dm
    return dm
