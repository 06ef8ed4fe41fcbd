"""Episode replay files.

Line 1 is a JSON header binding the replay to a scenario digest and seed.
Each following line encodes one tick: one action digit per train in id order,
then ':' and the crc32 state fingerprint taken after the tick was applied.
Verification replays the episode and reports the first divergent tick.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .env import ACTION_COUNT, RailEnv
from .errors import DomainError, FormatError, IntegrityError
from .scenario import Scenario

FORMAT_VERSION = 1


@dataclass
class Replay:
    scenario_digest: str
    seed: int
    n_trains: int
    actions: list  # one list of ints per tick
    digests: list  # crc32 after each tick
    final_reward: float

    def save(self, path):
        header = {
            "version": FORMAT_VERSION,
            "scenario_digest": self.scenario_digest,
            "seed": self.seed,
            "n_trains": self.n_trains,
            "ticks": len(self.actions),
            "final_reward": self.final_reward,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for acts, digest in zip(self.actions, self.digests):
                fh.write("".join(str(a) for a in acts) + f":{digest}\n")

    @classmethod
    def load(cls, path) -> "Replay":
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise FormatError("empty replay file")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad replay header: {exc}") from exc
        if not isinstance(header, dict) or header.get("version") != FORMAT_VERSION:
            raise FormatError("unsupported replay version")
        try:
            n_trains = int(header["n_trains"])
            ticks = int(header["ticks"])
            seed = int(header["seed"])
            digest = str(header["scenario_digest"])
            final_reward = float(header["final_reward"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad replay header field: {exc}") from exc
        body = lines[1:]
        if len(body) != ticks:
            raise FormatError(f"expected {ticks} tick lines, found {len(body)}")
        actions, digests = [], []
        for lineno, line in enumerate(body, start=2):
            head, sep, tail = line.partition(":")
            if not sep:
                raise FormatError(f"line {lineno}: missing state digest")
            if len(head) != n_trains or not head.isdigit():
                raise FormatError(f"line {lineno}: expected {n_trains} action digits")
            acts = [int(ch) for ch in head]
            if any(a >= ACTION_COUNT for a in acts):
                raise FormatError(f"line {lineno}: action digit out of range")
            try:
                digests.append(int(tail))
            except ValueError as exc:
                raise FormatError(f"line {lineno}: bad digest") from exc
            actions.append(acts)
        return cls(
            scenario_digest=digest,
            seed=seed,
            n_trains=n_trains,
            actions=actions,
            digests=digests,
            final_reward=final_reward,
        )


class ReplayRecorder:
    """Wraps an env; stepping through the recorder logs the action stream."""

    def __init__(self, env: RailEnv):
        self.env = env
        self.actions = []
        self.digests = []

    def step(self, actions):
        info = self.env.step(actions)
        row = (
            [int(actions.get(i + 1, 0)) for i in range(self.env.n_trains)]
            if isinstance(actions, dict)
            else [int(a) for a in actions]
        )
        self.actions.append(row)
        self.digests.append(self.env.state_digest())
        return info

    def finish(self) -> Replay:
        if not self.env.done:
            raise DomainError("cannot finish a replay before the episode ends")
        return Replay(
            scenario_digest=self.env.scenario.digest(),
            seed=self.env.seed,
            n_trains=self.env.n_trains,
            actions=self.actions,
            digests=self.digests,
            final_reward=self.env.normalized_reward(),
        )


def verify_replay(replay: Replay, scenario: Scenario) -> RailEnv:
    """Re-run the replay; raises IntegrityError at the first divergent tick."""
    if replay.scenario_digest != scenario.digest():
        raise IntegrityError("replay was recorded against a different scenario", tick=0)
    if replay.n_trains != len(scenario.specs):
        raise IntegrityError("train count mismatch", tick=0)
    env = RailEnv(scenario, replay.seed)
    for k, (acts, digest) in enumerate(zip(replay.actions, replay.digests), start=1):
        env.step(acts)
        if env.state_digest() != digest:
            raise IntegrityError(f"state diverged at tick {k}", tick=k)
    if not env.done:
        raise IntegrityError("replay ends before the episode does", tick=len(replay.actions))
    if env.normalized_reward() != replay.final_reward:
        raise IntegrityError("final reward mismatch", tick=len(replay.actions))
    return env
