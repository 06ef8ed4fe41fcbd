"""Shaped rewards, rollout collection, PPO updates, and curriculum phases.

Each step yields one scalar reward shared by every train (no credit
assignment); the critic likewise predicts one value per step, the sum of
per-train value-head outputs.  Training alternates rollouts over a pool of
independent environments with minibatched clipped-surrogate updates, and a
phase driver runs the whole loop with periodic evaluation and checkpoints.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .env import RailEnv, StepInfo
from .errors import DomainError, FormatError, GenerationError
from .mapgen import MalfunctionParams, MapConfig, generate_scenario
from .nn import (
    NetConfig,
    PolicyNet,
    build_policy,
    collate,
    policy_from_checkpoint,
    save_checkpoint,
)
from .obs import DEFAULT_MAX_DEPTH, DEFAULT_MAX_NODES, ObsBuilder, flatten


@dataclass(frozen=True)
class ShapingWeights:
    """Coefficients for the shared step reward:

    r_t = c_e * (env reward increment) + c_a * (arrivals / N)
        + c_d * (departures / N) - c_l * (deadlocks / N)
    """

    c_e: float = 1.0
    c_a: float = 5.0
    c_d: float = 0.0
    c_l: float = 2.5

    def __post_init__(self):
        for name in ("c_e", "c_a", "c_d", "c_l"):
            if getattr(self, name) < 0:
                raise DomainError(f"shaping weight {name} must be >= 0")


def shaped_reward(info: StepInfo, n: int, weights: ShapingWeights) -> float:
    if min(info.new_arrivals, info.new_departures, info.new_deadlocks) < 0:
        raise DomainError("event counts must be >= 0")
    return (
        weights.c_e * info.env_reward_delta
        + weights.c_a * info.new_arrivals / n
        + weights.c_d * info.new_departures / n
        - weights.c_l * info.new_deadlocks / n
    )


@dataclass
class PhaseConfig:
    name: str = "phase"
    n_agents: int = 50
    weights: ShapingWeights = field(default_factory=ShapingWeights)
    init_from: str | None = None
    # training environment; a fresh map is generated per episode
    width: int = 35
    height: int = 30
    n_cities: int = 3
    malfunction_rate: float = 0.0
    malfunction_min: int = 20
    malfunction_max: int = 50
    # observation budget
    obs_depth: int = DEFAULT_MAX_DEPTH
    obs_max_nodes: int = DEFAULT_MAX_NODES
    # rollout / PPO
    rollout_length: int = 128
    n_envs: int = 4
    clip_eps: float = 0.2
    gamma: float = 0.999
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_steps: int = 128
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_steps: int = 2_000_000
    # evaluation / checkpoints, in units of updates
    eval_every: int = 20
    eval_episodes: int = 10
    checkpoint_every: int = 50
    stop_at_arrival: float | None = None
    net: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.n_agents <= 0:
            raise DomainError("n_agents must be > 0")

    def net_config(self) -> NetConfig:
        return NetConfig(**self.net)

    def map_config(self, seed: int) -> MapConfig:
        return MapConfig(
            width=self.width,
            height=self.height,
            n_cities=self.n_cities,
            n_trains=self.n_agents,
            seed=seed,
            malfunction=MalfunctionParams(
                rate=self.malfunction_rate,
                min_duration=self.malfunction_min,
                max_duration=self.malfunction_max,
            ),
        )

    def to_dict(self) -> dict:
        d = {
            k: v
            for k, v in self.__dict__.items()
            if k not in ("weights",)
        }
        d["weights"] = {
            "c_e": self.weights.c_e,
            "c_a": self.weights.c_a,
            "c_d": self.weights.c_d,
            "c_l": self.weights.c_l,
        }
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PhaseConfig":
        try:
            data = dict(data)
            if "weights" in data:
                data["weights"] = ShapingWeights(**data["weights"])
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise FormatError(f"bad phase config: {exc}") from exc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PhaseConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read phase config: {exc}") from exc
        if not isinstance(data, dict):
            raise FormatError("phase config must be a JSON object")
        return cls.from_dict(data)


def _preset(name, agents, c_e, c_a, c_d, c_l, init, width, height, cities):
    return PhaseConfig(
        name=name,
        n_agents=agents,
        weights=ShapingWeights(c_e, c_a, c_d, c_l),
        init_from=init,
        width=width,
        height=height,
        n_cities=cities,
    )


# Curriculum ladder; later phases start from the previous phase's checkpoint
# (init_from holds the phase name here, resolved to a file by the caller).
PHASE_PRESETS = {
    "Phase-I": _preset("Phase-I", 50, 1, 5, 0, 2.5, None, 35, 30, 3),
    "Phase-II": _preset("Phase-II", 50, 0, 5, 1, 2.5, "Phase-I", 35, 30, 3),
    "Phase-III-50": _preset("Phase-III-50", 50, 0, 5, 1, 2.5, "Phase-II", 35, 30, 3),
    "Phase-III-80": _preset("Phase-III-80", 80, 1, 5, 0.1, 2.5, "Phase-III-50", 30, 35, 5),
    "Phase-III-100": _preset("Phase-III-100", 100, 1, 5, 0.1, 2.5, "Phase-III-50", 120, 80, 21),
    "Phase-III-200": _preset("Phase-III-200", 200, 1, 5, 0.1, 2.5, "Phase-III-100", 100, 100, 29),
}


# -- action sampling --------------------------------------------------------


def _masked_probs(logits: np.ndarray, masks: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    masks = np.asarray(masks)
    if logits.shape != masks.shape:
        raise DomainError("logits and masks must have equal shapes")
    if not masks.any(axis=-1).all():
        raise DomainError("action mask with no valid action")
    z = np.where(masks > 0, logits, -np.inf)
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def sample_actions(logits, masks, rng=None, greedy: bool = False):
    """Masked categorical draw; invalid actions get probability exactly 0.

    Returns (actions, log_probs) as numpy arrays over the leading axis.
    """
    p = _masked_probs(logits, masks)
    if greedy:
        actions = p.argmax(axis=-1)
    else:
        if rng is None:
            raise DomainError("sampling requires an rng (or greedy=True)")
        cdf = p.cumsum(axis=-1)
        u = rng.random(p.shape[:-1] + (1,))
        actions = (u >= cdf).sum(axis=-1)
    log_probs = np.log(np.take_along_axis(p, actions[..., None], -1))[..., 0]
    return actions.astype(np.int64), log_probs


def action_masks(env: RailEnv) -> np.ndarray:
    return np.stack([env.valid_actions(i + 1) for i in range(env.n_trains)])


# -- rollouts ---------------------------------------------------------------


@dataclass
class Trajectory:
    """Per-step storage for one rollout lane; rewards are the shared scalar."""

    obs: list  # FlatObsBatch per step
    masks: np.ndarray  # (S, N, 5) float32
    actions: np.ndarray  # (S, N) int64
    log_probs: np.ndarray  # (S, N) float64
    rewards: np.ndarray  # (S,) float64, identical for every agent
    values: np.ndarray  # (S,) float64 centralized value
    dones: np.ndarray  # (S,) bool
    bootstrap: float
    env_reward_deltas: np.ndarray  # (S,) float64, c_e-free env component
    arrivals: int = 0
    departures: int = 0
    episodes: int = 0

    def __len__(self):
        return len(self.rewards)


class EpisodeStream:
    """Hands out environments over freshly generated maps, one per episode."""

    def __init__(self, phase: PhaseConfig, seed_seq: np.random.SeedSequence):
        self.phase = phase
        self._seeds = seed_seq
        self._counter = 0

    def next_env(self) -> RailEnv:
        last_exc = None
        for _ in range(16):
            seed = int(self._seeds.generate_state(1, np.uint64)[0] % 2**31) + self._counter
            self._counter += 1
            try:
                scenario = generate_scenario(self.phase.map_config(seed))
            except GenerationError as exc:
                last_exc = exc
                continue
            env = RailEnv(scenario)
            env.reset(seed=seed)
            return env
        raise GenerationError(f"no feasible training map after retries: {last_exc}")


def _policy_step(model, batches, width, height):
    tb = collate(batches, width, height)
    with torch.no_grad():
        logits, _values, v = model(tb)
    if tb.steps == 1:
        return logits.double().numpy()[None], np.array([float(v)])
    return logits.double().numpy(), v.double().numpy()


def collect_rollout(env, model, phase: PhaseConfig, rng, stream=None):
    """Steps `env` for rollout_length transitions, resuming across episode
    boundaries with fresh maps from `stream` (env reused to the end if None).
    Returns (Trajectory, env) where env is the live environment afterwards.
    """
    s = phase.rollout_length
    obs_list, masks, actions, logps, rewards, values, dones, deltas = (
        [], [], [], [], [], [], [], [],
    )
    arrivals = departures = episodes = 0
    builder = ObsBuilder(env, phase.obs_depth, phase.obs_max_nodes)
    for _ in range(s):
        batch = flatten(*builder.build_all())
        mask = action_masks(env)
        logits, v = _policy_step(model, batch, env.grid.width, env.grid.height)
        act, logp = sample_actions(logits[0], mask, rng)
        info = env.step(act)
        obs_list.append(batch)
        masks.append(mask)
        actions.append(act)
        logps.append(logp)
        rewards.append(shaped_reward(info, env.n_trains, phase.weights))
        values.append(float(v[0]))
        dones.append(info.done)
        deltas.append(info.env_reward_delta)
        if info.done:
            arrivals += info.n_arrived
            departures += info.n_departed
            episodes += 1
            if stream is None:
                env.reset(seed=env.seed)
            else:
                env = stream.next_env()
            builder = ObsBuilder(env, phase.obs_depth, phase.obs_max_nodes)
    if dones[-1]:
        bootstrap = 0.0
    else:
        batch = flatten(*builder.build_all())
        _logits, v = _policy_step(model, batch, env.grid.width, env.grid.height)
        bootstrap = float(v[0])
    traj = Trajectory(
        obs=obs_list,
        masks=np.stack(masks).astype(np.float32),
        actions=np.stack(actions),
        log_probs=np.stack(logps),
        rewards=np.asarray(rewards),
        values=np.asarray(values),
        dones=np.asarray(dones),
        bootstrap=bootstrap,
        env_reward_deltas=np.asarray(deltas),
        arrivals=arrivals,
        departures=departures,
        episodes=episodes,
    )
    return traj, env


def gae_advantages(traj: Trajectory, gamma: float, lam: float):
    """Generalized advantage estimation with resets at done flags; the
    returned targets are advantages + values."""
    s = len(traj)
    adv = np.zeros(s)
    carry = 0.0
    next_value = traj.bootstrap
    for t in range(s - 1, -1, -1):
        cont = 0.0 if traj.dones[t] else 1.0
        delta = traj.rewards[t] + gamma * next_value * cont - traj.values[t]
        carry = delta + gamma * lam * cont * carry
        adv[t] = carry
        next_value = traj.values[t]
    return adv, adv + traj.values


# -- PPO --------------------------------------------------------------------


def _masked_log_softmax(logits: torch.Tensor, masks: torch.Tensor):
    z = logits.masked_fill(masks <= 0, -1e9)
    return z - torch.logsumexp(z, dim=-1, keepdim=True)


def ppo_update(model: PolicyNet, optimizer, trajs, phase: PhaseConfig, rng):
    """One round of minibatched clipped-surrogate updates over the rollouts.

    Per-train policy ratios share the step's scalar advantage; the value head
    regresses the shared return.  Returns averaged statistics.
    """
    if not trajs or not sum(len(t) for t in trajs):
        raise DomainError("cannot update on an empty trajectory")
    obs, masks, actions, logps, advs, rets, sizes = [], [], [], [], [], [], []
    for traj in trajs:
        a, r = gae_advantages(traj, phase.gamma, phase.gae_lambda)
        obs.extend(traj.obs)
        masks.append(traj.masks)
        actions.append(traj.actions)
        logps.append(traj.log_probs)
        advs.append(a)
        rets.append(r)
        sizes.append(len(traj))
    masks = torch.from_numpy(np.concatenate(masks))
    actions = torch.from_numpy(np.concatenate(actions))
    old_logp = torch.from_numpy(np.concatenate(logps).astype(np.float32))
    adv = np.concatenate(advs)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    adv = torch.from_numpy(adv.astype(np.float32))
    ret = torch.from_numpy(np.concatenate(rets).astype(np.float32))

    total = len(obs)
    width = phase.width
    height = phase.height
    stats = {k: 0.0 for k in (
        "loss", "policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac",
    )}
    batches = 0
    for _ in range(phase.epochs):
        order = rng.permutation(total)
        for lo in range(0, total, phase.minibatch_steps):
            idx = order[lo : lo + phase.minibatch_steps]
            tb = collate([obs[i] for i in idx], width, height)
            logits, _vals, v = model(tb)
            if logits.dim() == 2:
                logits, v = logits.unsqueeze(0), v.unsqueeze(0)
            mb_masks = masks[idx]
            logp_all = _masked_log_softmax(logits, mb_masks)
            mb_actions = actions[idx]
            logp = logp_all.gather(-1, mb_actions.unsqueeze(-1)).squeeze(-1)
            ratio = torch.exp(logp - old_logp[idx])
            mb_adv = adv[idx].unsqueeze(-1)
            unclipped = ratio * mb_adv
            clipped = torch.clamp(ratio, 1 - phase.clip_eps, 1 + phase.clip_eps) * mb_adv
            policy_loss = -torch.min(unclipped, clipped).mean()
            value_loss = torch.nn.functional.mse_loss(v, ret[idx])
            p = logp_all.exp()
            entropy = -(p * logp_all).sum(-1).mean()
            loss = (
                policy_loss
                + phase.value_coef * value_loss
                - phase.entropy_coef * entropy
            )
            if not torch.isfinite(loss):
                raise FloatingPointError("non-finite PPO loss; update aborted")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), phase.max_grad_norm)
            optimizer.step()
            with torch.no_grad():
                stats["loss"] += float(loss)
                stats["policy_loss"] += float(policy_loss)
                stats["value_loss"] += float(value_loss)
                stats["entropy"] += float(entropy)
                stats["approx_kl"] += float((old_logp[idx] - logp).mean())
                stats["clip_frac"] += float(
                    ((ratio - 1).abs() > phase.clip_eps).float().mean()
                )
            batches += 1
    return {k: v / batches for k, v in stats.items()}


# -- evaluation -------------------------------------------------------------


def evaluate(model, phase: PhaseConfig, episodes: int, seed: int, policy="greedy"):
    """Greedy (or random) episodes on fresh maps; returns aggregate metrics."""
    stream = EpisodeStream(phase, np.random.SeedSequence([seed, 48879]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    arrived, departed, rewards = [], [], []
    for _ in range(episodes):
        env = stream.next_env()
        builder = ObsBuilder(env, phase.obs_depth, phase.obs_max_nodes)
        while not env.done:
            mask = action_masks(env)
            if policy == "random":
                logits = np.zeros_like(mask, dtype=np.float64)
                act, _ = sample_actions(logits, mask, rng)
            else:
                batch = flatten(*builder.build_all())
                logits, _v = _policy_step(model, batch, env.grid.width, env.grid.height)
                act, _ = sample_actions(logits[0], mask, greedy=True)
            env.step(act)
        n = env.n_trains
        arrived.append(sum(tr.arrival_time is not None for tr in env.trains) / n)
        departed.append(sum(tr.departed for tr in env.trains) / n)
        rewards.append(env.normalized_reward())
    return {
        "episodes": episodes,
        "arrival": float(np.mean(arrived)),
        "arrival_std": float(np.std(arrived)),
        "departure": float(np.mean(departed)),
        "departure_std": float(np.std(departed)),
        "env_reward_mean": float(np.mean(rewards)),
        "env_reward_std": float(np.std(rewards)),
    }


# -- phase driver -----------------------------------------------------------

_METRIC_FIELDS = [
    "step",
    "arrival_pct",
    "depart_pct",
    "env_reward_mean",
    "loss",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_frac",
]


def _append_metrics(path, row: dict):
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_METRIC_FIELDS)
        if fresh:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in _METRIC_FIELDS})


def run_phase(phase: PhaseConfig, out_dir, log=None) -> str:
    """Trains one curriculum phase; returns the final checkpoint path.

    Writes `<name>.ckpt` plus periodic copies and `<name>_metrics.csv` under
    out_dir.  With a zero step budget the initial weights are saved unchanged.
    """
    os.makedirs(out_dir, exist_ok=True)
    torch.set_num_threads(1)
    torch.manual_seed(phase.seed)
    if phase.init_from:
        model = policy_from_checkpoint(phase.init_from)
    else:
        model = build_policy(phase.net_config(), seed=phase.seed)
    final_path = os.path.join(out_dir, f"{phase.name}.ckpt")
    metrics_path = os.path.join(out_dir, f"{phase.name}_metrics.csv")

    root = np.random.SeedSequence(phase.seed)
    lane_seqs = root.spawn(phase.n_envs)
    rollout_rng = np.random.default_rng(root.spawn(1)[0])
    update_rng = np.random.default_rng(root.spawn(1)[0])
    streams = [EpisodeStream(phase, sq) for sq in lane_seqs]
    envs = [st.next_env() for st in streams]

    optimizer = torch.optim.Adam(model.parameters(), lr=phase.learning_rate)
    env_steps = 0
    update = 0
    best = -1.0
    while env_steps < phase.total_steps:
        trajs = []
        for lane in range(phase.n_envs):
            traj, envs[lane] = collect_rollout(
                envs[lane], model, phase, rollout_rng, streams[lane]
            )
            trajs.append(traj)
        env_steps += sum(len(t) for t in trajs)
        stats = ppo_update(model, optimizer, trajs, phase, update_rng)
        update += 1
        if phase.checkpoint_every and update % phase.checkpoint_every == 0:
            save_checkpoint(
                os.path.join(out_dir, f"{phase.name}_u{update}.ckpt"),
                model,
                extra={"phase": phase.name, "update": update, "env_steps": env_steps},
            )
        if phase.eval_every and update % phase.eval_every == 0:
            metrics = evaluate(model, phase, phase.eval_episodes, phase.seed + 7)
            row = {
                "step": env_steps,
                "arrival_pct": round(100 * metrics["arrival"], 3),
                "depart_pct": round(100 * metrics["departure"], 3),
                "env_reward_mean": round(metrics["env_reward_mean"], 6),
                **{k: round(v, 6) for k, v in stats.items()},
            }
            _append_metrics(metrics_path, row)
            if log:
                log(
                    f"[{phase.name}] update {update} steps {env_steps} "
                    f"arrival {row['arrival_pct']}% depart {row['depart_pct']}% "
                    f"reward {row['env_reward_mean']}"
                )
            best = max(best, metrics["arrival"])
            if (
                phase.stop_at_arrival is not None
                and metrics["arrival"] >= phase.stop_at_arrival
            ):
                break
    save_checkpoint(
        final_path,
        model,
        extra={"phase": phase.name, "update": update, "env_steps": env_steps},
    )
    return final_path
