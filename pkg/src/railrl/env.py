"""Deterministic multi-train rail simulator.

Discrete time, one cell per train, sequential movement in ascending train id.
A train's life cycle: WAITING until its earliest departure, then READY at the
spawn cell edge, then on the map (MOVING / STOPPED / MALFUNCTION) until it
reaches its target, which removes it from the grid (DONE).

Reward bookkeeping is telescoped: every step contributes an integer delta so
that the episode total matches the closed-form per-train schedule rewards
exactly, and the normalized episode return always lands in [0, 1].
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import DomainError
from .grid import Direction, shortest_distance_map, valid_transitions
from .scenario import Scenario, TrainSpec


class RailAction(IntEnum):
    DO_NOTHING = 0
    LEFT = 1
    FORWARD = 2
    RIGHT = 3
    STOP = 4


ACTION_COUNT = 5


class TrainPhase(IntEnum):
    WAITING = 0
    READY = 1
    MOVING = 2
    STOPPED = 3
    MALFUNCTION = 4
    DONE = 5


# observation state adds a seventh slot for malfunctioning off-map trains
OBS_STATE_COUNT = 7
OBS_STATE_MALFUNCTION_OFF_MAP = 6


@dataclass
class TrainState:
    spec: TrainSpec
    phase: TrainPhase = TrainPhase.WAITING
    position: tuple | None = None
    heading: Direction = Direction.NORTH
    prev_heading: Direction | None = None
    step_counter: int = 0
    malfunction_left: int = 0
    arrival_time: int | None = None
    deadlocked: bool = False
    departed: bool = False

    @property
    def id(self) -> int:
        return self.spec.id

    @property
    def on_map(self) -> bool:
        return self.position is not None

    def obs_state(self) -> int:
        """Phase index for observations; off-map malfunctions get their own slot."""
        if self.phase == TrainPhase.READY and self.malfunction_left > 0:
            return OBS_STATE_MALFUNCTION_OFF_MAP
        return int(self.phase)

    def copy(self) -> "TrainState":
        return TrainState(
            spec=self.spec,
            phase=self.phase,
            position=self.position,
            heading=self.heading,
            prev_heading=self.prev_heading,
            step_counter=self.step_counter,
            malfunction_left=self.malfunction_left,
            arrival_time=self.arrival_time,
            deadlocked=self.deadlocked,
            departed=self.departed,
        )


@dataclass
class StepInfo:
    t: int
    done: bool
    new_arrivals: int
    new_departures: int
    new_deadlocks: int
    n_arrived: int
    n_departed: int
    n_deadlocked: int
    n_malfunctioning: int
    env_reward_delta_raw: int
    env_reward_delta: float


_MOVE_ACTIONS = (RailAction.LEFT, RailAction.FORWARD, RailAction.RIGHT)


class RailEnv:
    """Simulator for one scenario.  Deterministic given (scenario, seed)."""

    def __init__(self, scenario: Scenario, seed: int | None = None):
        self.scenario = scenario
        self.grid = scenario.grid
        self.reset(seed)

    @property
    def n_trains(self) -> int:
        return len(self.scenario.specs)

    @property
    def t_max(self) -> int:
        return self.scenario.t_max

    def reset(self, seed: int | None = None):
        self.seed = self.scenario.seed if seed is None else seed
        self.rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed]))
        )
        self.t = 0
        self.done = False
        self.trains = [TrainState(spec=s) for s in self.scenario.specs]
        self.occupancy: dict = {}
        self.total_env_reward_raw = 0
        self._promote()
        return self

    def clone(self) -> "RailEnv":
        """Independent copy sharing the immutable scenario, including rng state."""
        other = object.__new__(RailEnv)
        other.scenario = self.scenario
        other.grid = self.grid
        other.seed = self.seed
        other.rng = np.random.Generator(np.random.PCG64())
        other.rng.bit_generator.state = self.rng.bit_generator.state
        other.t = self.t
        other.done = self.done
        other.trains = [tr.copy() for tr in self.trains]
        other.occupancy = dict(self.occupancy)
        other.total_env_reward_raw = self.total_env_reward_raw
        return other

    # -- queries ----------------------------------------------------------

    def train(self, train_id: int) -> TrainState:
        if not 1 <= train_id <= self.n_trains:
            raise DomainError(f"no train with id {train_id}")
        return self.trains[train_id - 1]

    def distance_to_target(self, train: TrainState) -> float:
        """Shortest remaining rail distance from the train's current state."""
        dmap = shortest_distance_map(self.grid, train.spec.target)
        if train.on_map:
            return dmap.get(train.position, train.heading)
        pos, heading = train.spec.spawn
        return dmap.get(pos, heading)

    def valid_actions(self, train_id: int) -> np.ndarray:
        """Boolean mask over the 5 actions; at least one entry is always true."""
        train = self.train(train_id)
        mask = np.zeros(ACTION_COUNT, dtype=bool)
        mask[RailAction.DO_NOTHING] = True
        if train.phase in (TrainPhase.WAITING, TrainPhase.DONE):
            return mask
        mask[RailAction.STOP] = True
        if train.phase == TrainPhase.READY:
            mask[RailAction.FORWARD] = True
            return mask
        if train.deadlocked:
            # it can never move again, so movement actions are not offered
            return mask
        trans = valid_transitions(self.grid, train.position, train.heading)
        outs = {out for out, _ in trans}
        mask[RailAction.LEFT] = train.heading.left() in outs
        mask[RailAction.FORWARD] = train.heading in outs
        mask[RailAction.RIGHT] = train.heading.right() in outs
        if len(trans) == 1 and train.heading not in outs:
            # curves and dead ends: the unique transition rides on FORWARD
            mask[RailAction.FORWARD] = True
        return mask

    def valid_action_masks(self) -> np.ndarray:
        return np.stack([self.valid_actions(i + 1) for i in range(self.n_trains)])

    # -- stepping ---------------------------------------------------------

    def _promote(self):
        for train in self.trains:
            if train.phase == TrainPhase.WAITING and self.t >= train.spec.earliest_departure:
                train.phase = TrainPhase.READY

    def _draw_malfunctions(self):
        p = self.scenario.malfunction.per_tick_probability
        if p <= 0.0:
            return
        lo = self.scenario.malfunction.min_duration
        hi = self.scenario.malfunction.max_duration
        for train in self.trains:
            if train.phase in (TrainPhase.WAITING, TrainPhase.DONE):
                continue
            if train.malfunction_left > 0:
                continue
            if self.rng.random() < p:
                train.malfunction_left = int(self.rng.integers(lo, hi + 1))

    def _normalize_actions(self, actions) -> list:
        if isinstance(actions, dict):
            return [
                int(actions.get(i + 1, RailAction.DO_NOTHING))
                for i in range(self.n_trains)
            ]
        out = [int(a) for a in actions]
        if len(out) != self.n_trains:
            raise DomainError(
                f"expected {self.n_trains} actions, got {len(out)}"
            )
        return out

    def _move_train(self, train: TrainState, action: int):
        """Advance one on-map train; occupancy is live so earlier moves count."""
        if train.malfunction_left > 0:
            train.phase = TrainPhase.MALFUNCTION
            return
        if action == RailAction.DO_NOTHING:
            action = (
                RailAction.FORWARD
                if train.phase in (TrainPhase.MOVING, TrainPhase.MALFUNCTION)
                else RailAction.STOP
            )
        if action == RailAction.STOP or action not in _MOVE_ACTIONS:
            train.phase = TrainPhase.STOPPED
            return
        trans = valid_transitions(self.grid, train.position, train.heading)
        desired = {
            RailAction.LEFT: train.heading.left(),
            RailAction.FORWARD: train.heading,
            RailAction.RIGHT: train.heading.right(),
        }[RailAction(action)]
        chosen = next(((o, p) for o, p in trans if o == desired), None)
        if chosen is None and len(trans) == 1:
            chosen = trans[0]
        if chosen is None:
            train.phase = TrainPhase.STOPPED
            return
        train.step_counter += 1
        if train.step_counter < train.spec.speed_period:
            train.phase = TrainPhase.MOVING
            return
        out_heading, next_pos = chosen
        if next_pos in self.occupancy:
            # blocked at the cell boundary: keep the accumulated progress
            train.step_counter = train.spec.speed_period - 1
            train.phase = TrainPhase.STOPPED
            return
        del self.occupancy[train.position]
        train.position = next_pos
        train.prev_heading = train.heading
        train.heading = out_heading
        train.step_counter = 0
        train.phase = TrainPhase.MOVING
        if next_pos == train.spec.target:
            train.phase = TrainPhase.DONE
            train.arrival_time = self.t  # caller sets self.t to the new tick
            train.position = None
        else:
            self.occupancy[next_pos] = train.id

    def step(self, actions) -> StepInfo:
        if self.done:
            raise DomainError("episode already finished")
        acts = self._normalize_actions(actions)
        prev_arrived = sum(1 for tr in self.trains if tr.phase == TrainPhase.DONE)
        prev_departed = sum(1 for tr in self.trains if tr.departed)
        prev_deadlocked = sum(1 for tr in self.trains if tr.deadlocked)
        pending = [tr for tr in self.trains if tr.phase != TrainPhase.DONE]

        self._promote()
        self._draw_malfunctions()
        self.t += 1

        for train in self.trains:
            action = acts[train.id - 1]
            if train.phase in (TrainPhase.WAITING, TrainPhase.DONE):
                continue
            if train.phase == TrainPhase.READY:
                if train.malfunction_left > 0 or action not in _MOVE_ACTIONS:
                    continue
                pos, heading = train.spec.spawn
                if pos in self.occupancy:
                    continue
                train.position = pos
                train.heading = heading
                train.step_counter = 0
                train.phase = TrainPhase.MOVING
                train.departed = True
                self.occupancy[pos] = train.id
                continue
            self._move_train(train, action)

        for train in self.trains:
            if train.malfunction_left > 0:
                train.malfunction_left -= 1

        self.detect_deadlocks()
        self._promote()

        # schedule penalty: one unit per train still unfinished past its slot
        delta_raw = -sum(1 for tr in pending if self.t > tr.spec.latest_arrival)
        n_arrived = sum(1 for tr in self.trains if tr.phase == TrainPhase.DONE)
        self.done = self.t >= self.t_max or n_arrived == self.n_trains
        if self.t >= self.t_max:
            for train in self.trains:
                if train.phase != TrainPhase.DONE:
                    d = self.distance_to_target(train)
                    delta_raw -= int(min(d, train.spec.latest_arrival))
        self.total_env_reward_raw += delta_raw

        n_departed = sum(1 for tr in self.trains if tr.departed)
        n_deadlocked = sum(1 for tr in self.trains if tr.deadlocked)
        n_malfunctioning = sum(
            1
            for tr in self.trains
            if tr.malfunction_left > 0 and tr.phase != TrainPhase.DONE
        )
        return StepInfo(
            t=self.t,
            done=self.done,
            new_arrivals=n_arrived - prev_arrived,
            new_departures=n_departed - prev_departed,
            new_deadlocks=n_deadlocked - prev_deadlocked,
            n_arrived=n_arrived,
            n_departed=n_departed,
            n_deadlocked=n_deadlocked,
            n_malfunctioning=n_malfunctioning,
            env_reward_delta_raw=delta_raw,
            env_reward_delta=delta_raw / (self.n_trains * self.t_max),
        )

    # -- deadlock detection -----------------------------------------------

    def detect_deadlocks(self) -> set:
        """Greatest fixpoint of trains whose every exit is held by the set.

        Trains in the result can never move again: within-step chain moves
        require the blocker to move first, and swaps are impossible, so a set
        of trains that only block each other is permanently stuck.  Trains in
        malfunction are skipped until they recover.  Flags are sticky.
        """
        members = {
            tr.id
            for tr in self.trains
            if tr.on_map and tr.malfunction_left == 0
        }
        by_id = {tr.id: tr for tr in self.trains}
        changed = True
        while changed:
            changed = False
            for tid in list(members):
                tr = by_id[tid]
                for _out, npos in valid_transitions(self.grid, tr.position, tr.heading):
                    holder = self.occupancy.get(npos)
                    if holder is None or holder not in members:
                        members.discard(tid)
                        changed = True
                        break
        for tid in members:
            by_id[tid].deadlocked = True
        return {tr.id for tr in self.trains if tr.deadlocked}

    # -- rewards ----------------------------------------------------------

    def final_rewards(self) -> list:
        """Per-train schedule rewards; only defined once the episode is over."""
        if not self.done:
            raise DomainError("episode still running")
        out = []
        for train in self.trains:
            b = train.spec.latest_arrival
            if train.arrival_time is not None:
                out.append(min(0, b - train.arrival_time))
            else:
                d = self.distance_to_target(train)
                out.append(b - self.t_max - int(min(d, b)))
        return out

    def normalized_reward(self) -> float:
        """1 + R / (N * t_max), in [0, 1]; 1.0 means everyone was on time."""
        return 1.0 + self.total_env_reward_raw / (self.n_trains * self.t_max)

    # -- state fingerprint -------------------------------------------------

    def state_digest(self) -> int:
        parts = [str(self.t)]
        for tr in self.trains:
            parts.append(
                f"{int(tr.phase)},{tr.position},{int(tr.heading)},"
                f"{tr.step_counter},{tr.malfunction_left},{tr.arrival_time},"
                f"{int(tr.deadlocked)}"
            )
        return zlib.crc32("|".join(parts).encode())
