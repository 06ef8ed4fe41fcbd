"""Straightforward observation builder used as a reference.

Implements the same attribute and tree definitions as `obs` with plain
per-train loops: every node re-walks its branch cell by cell and scans the
whole train list at each cell.  No shared indexing pass, no caching beyond
the grid's distance maps.  The fast builder must match this output exactly;
`railrl bench-obs` asserts that before timing the two against each other.
"""

from __future__ import annotations

import numpy as np

from .env import RailEnv, TrainPhase
from .grid import outgoing_headings, shortest_distance_map, valid_transitions
from .obs import (
    ATTR_DIM,
    DEFAULT_MAX_DEPTH,
    DEFAULT_MAX_NODES,
    NODE_FEATURE_DIM,
    BranchLabel,
    ObsTree,
    _relative_label,
)


def _is_any_switch(grid, pos) -> bool:
    cell = grid.cell_at(pos)
    return any(len(outgoing_headings(cell, h)) >= 2 for h in range(4))


def _walk_branch(grid, entry, target):
    """Cells and headings from `entry` to the branch terminator.

    Returns (states, ends_at_target, children, unusable_index) where children
    are (label, entry) pairs sorted by label.
    """
    pos, heading = entry
    states = []
    seen = set()
    unusable = -1
    ends_at_target = False
    children = []
    while True:
        states.append((pos, heading))
        seen.add((pos, heading))
        trans = valid_transitions(grid, pos, heading)
        if unusable < 0 and _is_any_switch(grid, pos) and len(trans) == 1:
            unusable = len(states) - 1
        if pos == target:
            ends_at_target = True
            break
        if not trans:
            break
        if len(trans) >= 2:
            children = sorted(
                ((_relative_label(heading, out), (npos, out)) for out, npos in trans),
                key=lambda kv: int(kv[0]),
            )
            break
        out, npos = trans[0]
        if out == heading.opposite():
            children = [(BranchLabel.BACK, (npos, out))]
            break
        if (npos, out) in seen:
            break
        pos, heading = npos, out
    return states, ends_at_target, children, unusable


def _branch_features(env: RailEnv, observer, states, offset, ends_at_target, unusable):
    """The 11 readings for one branch, by direct scans over all trains."""
    length = len(states)
    sentinel = length + 1

    same = opposite_total = ready = malf = 0
    first_tgt = first_agent = first_conflict = None
    speeds = []
    for idx, (pos, heading) in enumerate(states):
        at_root_cell = offset == 0 and idx == 0
        for tr in env.trains:
            is_self = tr is observer and at_root_cell
            if tr.on_map and tr.position == pos:
                if not is_self:
                    if tr.heading == heading:
                        same += 1
                    else:
                        opposite_total += 1
                    if first_agent is None:
                        first_agent = idx
                    speeds.append(tr.spec.speed)
                # an on-map observer stays in the root malfunction count
                if tr.malfunction_left > 0:
                    malf += 1
                if tr.heading == heading.opposite():
                    q = offset + idx
                    pj = tr.spec.speed_period
                    pi = observer.spec.speed_period
                    p_min = -((-q * pj) // (pi + pj))
                    if first_conflict is None or p_min < first_conflict:
                        first_conflict = p_min
            elif (
                not tr.on_map
                and tr.phase == TrainPhase.READY
                and tr.spec.spawn[0] == pos
                and not is_self
            ):
                if tr.malfunction_left > 0:
                    malf += 1
                else:
                    ready += 1
                speeds.append(tr.spec.speed)
            if (
                tr.phase != TrainPhase.DONE
                and tr.spec.target == pos
                and first_tgt is None
            ):
                first_tgt = idx

    if observer.phase != TrainPhase.DONE and ends_at_target and first_tgt == length - 1:
        here = states[-1][0]
        n_here = sum(
            1
            for tr in env.trains
            if tr.phase != TrainPhase.DONE and tr.spec.target == here
        )
        if n_here <= 1:
            first_tgt = None

    d_other_tgt = offset + first_tgt if first_tgt is not None else sentinel
    d_agents = offset + first_agent if first_agent is not None else sentinel
    d_conflict = sentinel
    if first_conflict is not None:
        first = max(first_conflict, offset)
        if first <= offset + length - 1:
            d_conflict = first
    d_own = offset + length - 1 if ends_at_target else sentinel
    d_unusable = offset + unusable if unusable >= 0 else sentinel

    feat = np.zeros(NODE_FEATURE_DIM, dtype=np.float64)
    feat[0] = same
    feat[1] = opposite_total
    feat[2] = ready
    feat[3] = malf
    feat[4] = d_own
    feat[5] = d_other_tgt
    feat[6] = d_agents
    feat[7] = d_conflict
    feat[8] = d_unusable
    feat[9] = length
    feat[10] = min(speeds) if speeds else 1.0
    return feat.astype(np.float32)


def naive_build_tree(
    env: RailEnv,
    train_id: int,
    max_depth: int = DEFAULT_MAX_DEPTH,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> ObsTree:
    grid = env.grid
    train = env.train(train_id)
    target = train.spec.target
    root = (train.position, train.heading) if train.on_map else train.spec.spawn

    walked = [_walk_branch(grid, root, target)]
    parents, labels, depths, offsets = [-1], [-1], [0], [0]
    cursor = 0
    while cursor < len(walked):
        if depths[cursor] < max_depth and len(walked) < max_nodes:
            states, _ends, children, _un = walked[cursor]
            child_offset = offsets[cursor] + len(states)
            for label, entry in children:
                if len(walked) >= max_nodes:
                    break
                walked.append(_walk_branch(grid, entry, target))
                parents.append(cursor)
                labels.append(int(label))
                depths.append(depths[cursor] + 1)
                offsets.append(child_offset)
        cursor += 1

    feat = np.stack(
        [
            _branch_features(env, train, states, offsets[k], ends, unusable)
            for k, (states, ends, _children, unusable) in enumerate(walked)
        ]
    )
    return ObsTree(
        train.id,
        feat,
        np.array(parents, dtype=np.int32),
        np.array(labels, dtype=np.int8),
        np.array(depths, dtype=np.int16),
    )


def naive_build_attr(env: RailEnv, train_id: int) -> np.ndarray:
    train = env.train(train_id)
    spec = train.spec
    grid = env.grid
    scale = grid.width + grid.height
    t_max = env.t_max

    v = np.zeros(ATTR_DIM, dtype=np.float64)
    v[0] = spec.id / env.n_trains
    v[1] = spec.earliest_departure / t_max
    v[2] = spec.latest_arrival / t_max
    v[3 + int(spec.spawn[1])] = 1.0
    dmap = shortest_distance_map(grid, spec.target)
    v[7] = min(dmap.get(spec.spawn[0], spec.spawn[1]), 2 * scale) / scale

    pos, heading = (train.position, train.heading) if train.on_map else spec.spawn
    cell = grid.cell_at(pos)
    from .grid import classify_road_type

    v[8 + int(classify_road_type(cell))] = 1.0
    for k in range(16):
        v[19 + k] = (cell >> (15 - k)) & 1
    v[35 + int(heading)] = 1.0
    if train.prev_heading is not None:
        v[39 + int(train.prev_heading)] = 1.0
    v[43] = float(train.deadlocked)
    v[44:49] = env.valid_actions(train_id).astype(np.float64)
    v[49] = min(dmap.get(pos, heading), 2 * scale) / scale
    v[50] = env.t / t_max
    v[51] = (spec.latest_arrival - env.t) / t_max
    v[52] = (train.arrival_time or 0) / t_max
    v[53 + train.obs_state()] = 1.0
    v[60] = float(not train.on_map)
    v[61] = float(train.on_map)
    v[62] = float(train.malfunction_left > 0)
    v[63] = float(train.phase == TrainPhase.MOVING)
    if train.malfunction_left > 0:
        v[64] = (env.t + train.malfunction_left) / t_max
    v[65] = train.malfunction_left / t_max
    v[66 + min(train.step_counter, 4)] = 1.0
    return v.astype(np.float32)


def naive_build_all(
    env: RailEnv,
    max_depth: int = DEFAULT_MAX_DEPTH,
    max_nodes: int = DEFAULT_MAX_NODES,
):
    ids = range(1, env.n_trains + 1)
    attrs = np.stack([naive_build_attr(env, i) for i in ids])
    trees = [naive_build_tree(env, i, max_depth, max_nodes) for i in ids]
    return attrs, trees
