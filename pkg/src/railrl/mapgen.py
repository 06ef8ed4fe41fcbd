"""Procedural scenario generation.

Cities are 2-row parallel-track blocks placed on a jittered grid layout and
chained with rectilinear corridors.  Tracks are assembled as per-cell side
segments and only converted to 16-bit transition masks at the end, so corridor
crossings become diamonds and junctions become switches automatically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError
from .grid import (
    DIR_DELTA,
    Direction,
    RailGrid,
    RoadType,
    cell_from_segments,
    classify_road_type,
    shortest_distance_map,
    valid_transitions,
)
from .scenario import MalfunctionParams, Scenario, TrainSpec

N, E, S, W = Direction.NORTH, Direction.EAST, Direction.SOUTH, Direction.WEST

SPEED_PERIODS = (1, 2, 3, 4)
TIMETABLE_SLACK = 1.5
DEPARTURE_WINDOW = 0.25
MAX_LAYOUT_ATTEMPTS = 12


@dataclass(frozen=True)
class MapConfig:
    width: int
    height: int
    n_cities: int
    n_trains: int
    seed: int
    malfunction: MalfunctionParams = field(default_factory=MalfunctionParams)
    city_track_len: int = 6


def horizon_for(width: int, height: int, n_trains: int, n_cities: int) -> int:
    """Episode length chosen so the worst per-train penalty stays within N*Tmax."""
    return math.ceil(8 * (width + height + n_trains / n_cities))


class _RetryLayout(Exception):
    pass


class _NetBuilder:
    """Accumulates per-cell track segments; merge rules keep geometry sane."""

    def __init__(self, height: int, width: int):
        self.height = height
        self.width = width
        self.segments: dict[tuple, set] = {}
        self.stubs: dict[tuple, set] = {}
        self.reserved: set = set()  # city footprints, closed to corridors

    def in_bounds(self, pos):
        return 0 <= pos[0] < self.height and 0 <= pos[1] < self.width

    def add_segment(self, pos, a: Direction, b: Direction):
        if not self.in_bounds(pos):
            raise _RetryLayout
        self.segments.setdefault(pos, set()).add(frozenset((a, b)))

    def add_stub(self, pos, side: Direction):
        if not self.in_bounds(pos):
            raise _RetryLayout
        self.stubs.setdefault(pos, set()).add(side)

    def corridor_cell_ok(self, pos, a: Direction, b: Direction) -> bool:
        """A corridor may use an empty cell or cross a perpendicular straight."""
        if not self.in_bounds(pos) or pos in self.reserved or pos in self.stubs:
            return False
        existing = self.segments.get(pos)
        if not existing:
            return True
        straight = frozenset((a, b))
        if straight not in (frozenset((N, S)), frozenset((E, W))):
            return False  # corners may not overlap anything
        other = frozenset((N, S)) if straight == frozenset((E, W)) else frozenset((E, W))
        return existing == {other}

    def build(self, cities) -> RailGrid:
        cells = np.zeros((self.height, self.width), dtype=np.uint16)
        for pos in set(self.segments) | set(self.stubs):
            cells[pos[0], pos[1]] = cell_from_segments(
                self.segments.get(pos, ()), self.stubs.get(pos, ())
            )
        return RailGrid(cells, cities)


@dataclass
class _City:
    index: int
    row: int  # top track row
    col: int  # leftmost track column
    length: int
    used_ports: set = field(default_factory=set)

    @property
    def top_cells(self):
        return [(self.row, c) for c in range(self.col, self.col + self.length)]

    @property
    def bottom_cells(self):
        return [(self.row + 1, c) for c in range(self.col, self.col + self.length)]

    def footprint(self):
        return set(self.top_cells) | set(self.bottom_cells)

    @property
    def anchor(self):
        return (self.row, self.col)


def _build_city_block(builder: _NetBuilder, city: _City):
    r, c0 = city.row, city.col
    c1 = c0 + city.length - 1
    for row in (r, r + 1):
        for c in range(c0 + 1, c1):
            builder.add_segment((row, c), E, W)
    # the four track ends are buffer stops until a port replaces them
    builder.add_stub((r, c0), E)
    builder.add_stub((r, c1), W)
    builder.add_stub((r + 1, c0), E)
    builder.add_stub((r + 1, c1), W)
    # crossovers one cell in from each end so trains can change lanes
    ca, cb = c0 + 1, c1 - 1
    builder.add_segment((r, ca), W, S)
    builder.add_segment((r + 1, ca), N, E)
    builder.add_segment((r, cb), E, S)
    builder.add_segment((r + 1, cb), N, W)
    builder.reserved |= city.footprint()


def _port_candidates(city: _City, preferred: Direction):
    """End and tee attachment points, best side first."""
    r, c0 = city.row, city.col
    c1 = c0 + city.length - 1
    tee_cols = [c for c in range(c0 + 2, c1 - 1)]
    tee_cols = tee_cols[len(tee_cols) // 2 :] + tee_cols[: len(tee_cols) // 2]
    by_side = {
        E: [("end", (r, c1), E), ("end", (r + 1, c1), E)],
        W: [("end", (r, c0), W), ("end", (r + 1, c0), W)],
        N: [("tee", (r, c), N) for c in tee_cols],
        S: [("tee", (r + 1, c), S) for c in tee_cols],
    }
    order = [preferred] + [d for d in (N, E, S, W) if d != preferred]
    out = []
    for side in order:
        out.extend(by_side[side])
    return out


def _open_port(builder: _NetBuilder, city: _City, preferred: Direction):
    """Turn one attachment point into a junction; returns (cell, exit side)."""
    for kind, pos, side in _port_candidates(city, preferred):
        if (pos, side) in city.used_ports:
            continue
        city.used_ports.add((pos, side))
        if kind == "end":
            opposite = Direction(side).opposite()
            builder.stubs.get(pos, set()).discard(opposite)
            # buffer stop becomes a straight run-through into the corridor
            builder.add_segment(pos, side, opposite)
            return pos, side
        # tee: branch curve from the corridor side into the track, eastward
        builder.add_segment(pos, side, E)
        return pos, side
    raise _RetryLayout


def _route(start, end, first_axis: str):
    """Rectilinear path from `start` to `end` with at most two corners."""
    (r0, c0), (r1, c1) = start, end
    if first_axis == "h":
        waypoints = [(r0, (c0 + c1) // 2), (r1, (c0 + c1) // 2), (r1, c1)]
    else:
        waypoints = [((r0 + r1) // 2, c0), ((r0 + r1) // 2, c1), (r1, c1)]
    path = [start]
    for wr, wc in waypoints:
        r, c = path[-1]
        if r != wr and c != wc:
            raise _RetryLayout
        while r != wr:
            r += 1 if wr > r else -1
            path.append((r, c))
        while c != wc:
            c += 1 if wc > c else -1
            path.append((r, c))
    return path


def _side_toward(a, b) -> Direction:
    dr, dc = b[0] - a[0], b[1] - a[1]
    for d, delta in DIR_DELTA.items():
        if (dr, dc) == delta:
            return d
    raise _RetryLayout


def _lay_corridor(builder: _NetBuilder, exit_port, exit_side, entry_port, entry_side):
    dr, dc = DIR_DELTA[exit_side]
    start = (exit_port[0] + dr, exit_port[1] + dc)
    dr, dc = DIR_DELTA[entry_side]
    end = (entry_port[0] + dr, entry_port[1] + dc)

    axes = ("h", "v") if exit_side in (E, W) else ("v", "h")
    for first_axis in axes:
        try:
            path = _route(start, end, first_axis)
        except _RetryLayout:
            continue
        if len(path) != len(set(path)):
            continue
        chain = [exit_port] + path + [entry_port]
        cells = []
        ok = True
        for i in range(1, len(chain) - 1):
            a = _side_toward(chain[i], chain[i - 1])
            b = _side_toward(chain[i], chain[i + 1])
            if a == b or not builder.corridor_cell_ok(chain[i], a, b):
                ok = False
                break
            cells.append((chain[i], a, b))
        if not ok:
            continue
        for pos, a, b in cells:
            builder.add_segment(pos, a, b)
        return
    raise _RetryLayout


def _place_cities(cfg: MapConfig, rng) -> list[_City]:
    margin = 2
    cols = math.ceil(math.sqrt(cfg.n_cities))
    rows = math.ceil(cfg.n_cities / cols)
    inner_w = cfg.width - 2 * margin
    inner_h = cfg.height - 2 * margin
    slot_w = inner_w // cols
    slot_h = inner_h // rows
    track_len = cfg.city_track_len
    while track_len > 4 and slot_w < track_len + 2:
        track_len -= 1
    if slot_w < track_len + 2 or slot_h < 4:
        raise GenerationError(
            f"map {cfg.width}x{cfg.height} too small for {cfg.n_cities} cities"
        )
    cities = []
    for idx in range(cfg.n_cities):
        sr, sc = divmod(idx, cols)
        jr = int(rng.integers(1, max(2, slot_h - 3)))
        jc = int(rng.integers(1, max(2, slot_w - track_len - 1)))
        cities.append(
            _City(
                index=idx,
                row=margin + sr * slot_h + jr,
                col=margin + sc * slot_w + jc,
                length=track_len,
            )
        )
    return cities


def _connect(builder: _NetBuilder, a: _City, b: _City):
    (ra, ca), (rb, cb) = a.anchor, b.anchor
    if abs(cb - ca) >= abs(rb - ra):
        side_a, side_b = (E, W) if cb > ca else (W, E)
    else:
        side_a, side_b = (S, N) if rb > ra else (N, S)
    exit_cell, exit_side = _open_port(builder, a, side_a)
    entry_cell, entry_side = _open_port(builder, b, side_b)
    _lay_corridor(builder, exit_cell, exit_side, entry_cell, entry_side)


def _audit_transitions(grid: RailGrid):
    """Every set bit must point at an in-bounds rail neighbor."""
    for r, c in grid.rail_positions():
        for inc in range(4):
            for _out, npos in valid_transitions(grid, (r, c), Direction(inc)):
                if not grid.is_rail(npos):
                    raise _RetryLayout


def _station_cells(grid: RailGrid, city: _City):
    """Plain straight cells inside the city, preferred spawn/target spots."""
    cells = [
        pos
        for pos in city.top_cells + city.bottom_cells
        if classify_road_type(grid.cell_at(pos)) == RoadType.STRAIGHT
    ]
    return cells or city.top_cells


def _make_specs(cfg: MapConfig, grid: RailGrid, cities, t_max: int, rng):
    stations = [_station_cells(grid, city) for city in cities]
    specs = []
    for i in range(cfg.n_trains):
        src = i % len(cities)
        for _ in range(40):
            dst = int(rng.integers(0, len(cities)))
            if dst == src:
                continue
            spawn_pos = stations[src][int(rng.integers(0, len(stations[src])))]
            target = stations[dst][int(rng.integers(0, len(stations[dst])))]
            heading = E if rng.integers(0, 2) else W
            d0 = shortest_distance_map(grid, target).get(spawn_pos, heading)
            if math.isfinite(d0) and d0 > 0:
                break
        else:
            raise _RetryLayout
        period = int(SPEED_PERIODS[int(rng.integers(0, len(SPEED_PERIODS)))])
        depart = int(rng.integers(0, int(DEPARTURE_WINDOW * t_max) + 1))
        arrive = min(depart + math.ceil(TIMETABLE_SLACK * d0 * period), t_max)
        specs.append(
            TrainSpec(
                id=i + 1,
                speed_period=period,
                spawn=(spawn_pos, heading),
                target=target,
                earliest_departure=depart,
                latest_arrival=arrive,
            )
        )
    return specs


def generate_scenario(cfg: MapConfig) -> Scenario:
    """Deterministic in cfg.seed; raises GenerationError when infeasible."""
    if cfg.n_cities < 2:
        raise GenerationError("need at least 2 cities")
    if cfg.n_trains < 1:
        raise GenerationError("need at least 1 train")
    t_max = horizon_for(cfg.width, cfg.height, cfg.n_trains, cfg.n_cities)
    last_error = None
    for attempt in range(MAX_LAYOUT_ATTEMPTS):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.seed, attempt]))
        )
        try:
            builder = _NetBuilder(cfg.height, cfg.width)
            cities = _place_cities(cfg, rng)
            for city in cities:
                _build_city_block(builder, city)
            for a, b in zip(cities, cities[1:]):
                _connect(builder, a, b)
            grid = builder.build([(c.anchor, f"city{c.index}") for c in cities])
            _audit_transitions(grid)
            specs = _make_specs(cfg, grid, cities, t_max, rng)
            return Scenario(
                grid=grid,
                specs=specs,
                malfunction=cfg.malfunction,
                t_max=t_max,
                seed=cfg.seed,
            )
        except _RetryLayout as exc:
            last_error = exc
            continue
    raise GenerationError(
        f"could not generate a feasible map for {cfg.width}x{cfg.height}, "
        f"{cfg.n_cities} cities ({MAX_LAYOUT_ATTEMPTS} layouts tried)"
    ) from last_error


def generate_map(cfg: MapConfig):
    """(grid, train specs) view of generate_scenario, same determinism."""
    scn = generate_scenario(cfg)
    return scn.grid, scn.specs
