"""Static problem definition: train specs, malfunction parameters, scenario files.

A scenario file is JSON with the grid serialized as one hex string per row
(4 hex digits per cell).  ``load(save(x)) == x`` holds bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .grid import Direction, RailGrid

FORMAT_VERSION = 1


@dataclass(frozen=True)
class MalfunctionParams:
    """Random breakdowns: `rate` expected events per train per 1000 ticks."""

    rate: float = 0.0
    min_duration: int = 1
    max_duration: int = 1

    def __post_init__(self):
        if self.rate < 0:
            raise DomainError("malfunction rate must be >= 0")
        if not (1 <= self.min_duration <= self.max_duration):
            raise DomainError("need 1 <= min_duration <= max_duration")

    @property
    def per_tick_probability(self) -> float:
        return self.rate / 1000.0


@dataclass(frozen=True)
class TrainSpec:
    """Timetable entry for one train.

    `speed_period` is the integer number of ticks per cell move (1/s_i);
    the train may depart at `earliest_departure` and is late after
    `latest_arrival`.
    """

    id: int
    speed_period: int
    spawn: tuple  # ((row, col), Direction)
    target: tuple  # (row, col)
    earliest_departure: int
    latest_arrival: int

    def __post_init__(self):
        if self.speed_period < 1:
            raise DomainError("speed_period must be >= 1")
        if not self.earliest_departure < self.latest_arrival:
            raise DomainError("need earliest_departure < latest_arrival")

    @property
    def speed(self) -> float:
        return 1.0 / self.speed_period


@dataclass
class Scenario:
    """A complete playable instance: map, timetable, malfunction model, horizon."""

    grid: RailGrid
    specs: list[TrainSpec]
    malfunction: MalfunctionParams
    t_max: int
    seed: int = 0

    @property
    def n_trains(self) -> int:
        return len(self.specs)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "width": self.grid.width,
            "height": self.grid.height,
            "cells": [
                "".join(f"{int(v):04x}" for v in row) for row in self.grid.cells
            ],
            "cities": [
                {"row": r, "col": c, "name": name} for (r, c), name in self.grid.cities
            ],
            "trains": [
                {
                    "id": s.id,
                    "speed_period": s.speed_period,
                    "spawn_row": s.spawn[0][0],
                    "spawn_col": s.spawn[0][1],
                    "spawn_heading": int(s.spawn[1]),
                    "target_row": s.target[0],
                    "target_col": s.target[1],
                    "earliest_departure": s.earliest_departure,
                    "latest_arrival": s.latest_arrival,
                }
                for s in self.specs
            ],
            "malfunction": {
                "rate": self.malfunction.rate,
                "min_duration": self.malfunction.min_duration,
                "max_duration": self.malfunction.max_duration,
            },
            "t_max": self.t_max,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            if data.get("version") != FORMAT_VERSION:
                raise FormatError(f"unsupported scenario version {data.get('version')}")
            w, h = data["width"], data["height"]
            cells = np.zeros((h, w), dtype=np.uint16)
            rows = data["cells"]
            if len(rows) != h:
                raise FormatError("cell row count does not match height")
            for r, row in enumerate(rows):
                if len(row) != 4 * w:
                    raise FormatError(f"cell row {r} has wrong length")
                for c in range(w):
                    cells[r, c] = int(row[4 * c : 4 * c + 4], 16)
            cities = [((d["row"], d["col"]), d["name"]) for d in data["cities"]]
            specs = [
                TrainSpec(
                    id=d["id"],
                    speed_period=d["speed_period"],
                    spawn=((d["spawn_row"], d["spawn_col"]), Direction(d["spawn_heading"])),
                    target=(d["target_row"], d["target_col"]),
                    earliest_departure=d["earliest_departure"],
                    latest_arrival=d["latest_arrival"],
                )
                for d in data["trains"]
            ]
            m = data["malfunction"]
            params = MalfunctionParams(m["rate"], m["min_duration"], m["max_duration"])
            return cls(
                grid=RailGrid(cells, cities),
                specs=specs,
                malfunction=params,
                t_max=data["t_max"],
                seed=data["seed"],
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed scenario file: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"scenario is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def digest(self) -> str:
        """Stable content hash used to bind replays to their scenario."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.to_dict() == other.to_dict()
