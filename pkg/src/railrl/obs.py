"""Per-train observations: attribute vectors and spanning trees over branches.

The tree view follows the track from the train's position and spawns a child
per choice at each switch.  A node covers one branch: the maximal run of cells
from a branch entry up to the next decision point, dead end, own target, or
the depth frontier.  Expansion is breadth-first, so node depth counts the
decision points crossed, and the node budget cuts the deepest frontier first.

Branch structure is static per (entry state, target) and cached on the grid.
Each build shares one per-cell indexing pass across every train and reduces
node features with vectorized segment sums, which is what makes full builds
cheap enough to run inside a training loop.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .env import RailEnv, TrainPhase, TrainState
from .errors import DomainError, FormatError
from .grid import (
    DIR_DELTA,
    Direction,
    classify_road_type,
    outgoing_headings,
    shortest_distance_map,
    valid_transitions,
)

ATTR_DIM = 71
NODE_FEATURE_DIM = 11

# attribute vector layout
A_ID = 0
A_EARLIEST = 1
A_LATEST = 2
A_INIT_DIR = slice(3, 7)
A_INIT_DIST = 7
A_ROAD_TYPE = slice(8, 19)
A_TRANSITION_BITS = slice(19, 35)
A_CUR_DIR = slice(35, 39)
A_LAST_TURN_DIR = slice(39, 43)
A_DEADLOCKED = 43
A_ACTION_MASK = slice(44, 49)
A_DIST_TARGET = 49
A_TIME = 50
A_TURNS_BEFORE_LATE = 51
A_ARRIVAL = 52
A_PHASE = slice(53, 60)
A_OFF_MAP = 60
A_ON_MAP = 61
A_MALFUNCTIONING = 62
A_MOVING = 63
A_MALFUNCTION_ENDS = 64
A_MALFUNCTION_LEFT = 65
A_SPEED_SLOT = slice(66, 71)

# node feature layout
F_SAME_DIR = 0
F_OPPOSITE_DIR = 1
F_READY = 2
F_MALFUNCTION = 3
F_DIST_OWN_TARGET = 4
F_DIST_OTHER_TARGETS = 5
F_DIST_OTHER_AGENTS = 6
F_DIST_CONFLICT = 7
F_DIST_UNUSABLE_SWITCH = 8
F_BRANCH_LENGTH = 9
F_SLOWEST_SPEED = 10

DEFAULT_MAX_DEPTH = 10
DEFAULT_MAX_NODES = 512

_BIG = 1 << 30


class BranchLabel(IntEnum):
    LEFT = 0
    FORWARD = 1
    RIGHT = 2
    BACK = 3


class _SegKind(IntEnum):
    DECISION = 0
    DEAD_END = 1
    TARGET = 2
    CYCLE = 3


class _Segment:
    """Static branch: cells walked from an entry state to its terminator."""

    __slots__ = (
        "entry",
        "cells",
        "headings",
        "length",
        "kind",
        "children",
        "ends_at_target",
        "unusable_idx",
        "within",
    )

    def __init__(self, entry, cells, headings, kind, children, unusable_idx):
        self.entry = entry
        self.cells = cells  # flat cell indices, int64
        self.headings = headings  # traversal heading per cell, int64
        self.length = len(cells)
        self.kind = kind
        self.children = children  # ((BranchLabel, entry state), ...)
        self.ends_at_target = kind == _SegKind.TARGET
        self.unusable_idx = unusable_idx
        self.within = np.arange(self.length, dtype=np.int64)


class ObsTreeNode:
    """Materialized tree node; `feature` holds the 11 raw branch readings."""

    __slots__ = ("feature", "children", "depth")

    def __init__(self, feature, children, depth):
        self.feature = feature
        self.children = children  # list of (BranchLabel, ObsTreeNode)
        self.depth = depth

    def __eq__(self, other):
        if not isinstance(other, ObsTreeNode):
            return NotImplemented
        return (
            self.depth == other.depth
            and np.array_equal(self.feature, other.feature)
            and len(self.children) == len(other.children)
            and all(
                la == lb and ca == cb
                for (la, ca), (lb, cb) in zip(self.children, other.children)
            )
        )


class ObsTree:
    """Array-backed tree; `root` materializes node objects on first use."""

    def __init__(self, agent_id, feat, parent, label, depth):
        self.agent_id = agent_id
        self.feat = feat  # (n, 11) float32, raw values
        self.parent = parent  # (n,) int32, -1 for the root
        self.label = label  # (n,) int8, -1 for the root
        self.depth = depth  # (n,) int16
        self.node_count = len(parent)
        self._root = None

    @property
    def root(self) -> ObsTreeNode:
        if self._root is None:
            nodes = [
                ObsTreeNode(self.feat[k], [], int(self.depth[k]))
                for k in range(self.node_count)
            ]
            for k in range(1, self.node_count):
                nodes[int(self.parent[k])].children.append(
                    (BranchLabel(int(self.label[k])), nodes[k])
                )
            self._root = nodes[0]
        return self._root

    def __eq__(self, other):
        if not isinstance(other, ObsTree):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.node_count == other.node_count
            and np.array_equal(self.parent, other.parent)
            and np.array_equal(self.label, other.label)
            and np.array_equal(self.depth, other.depth)
            and np.array_equal(self.feat, other.feat)
        )


def _relative_label(heading: Direction, out: Direction) -> BranchLabel:
    if out == heading:
        return BranchLabel.FORWARD
    if out == heading.left():
        return BranchLabel.LEFT
    if out == heading.right():
        return BranchLabel.RIGHT
    return BranchLabel.BACK


class _Pass:
    """One shared per-cell indexing pass; read-only during feature assembly."""

    def __init__(self, env: RailEnv):
        grid = env.grid
        n_cells = grid.height * grid.width
        self.head_cnt = np.zeros((n_cells, 4), dtype=np.int32)
        self.tot_cnt = np.zeros(n_cells, dtype=np.int32)
        self.period_at = np.zeros(n_cells, dtype=np.int64)
        self.ready_cnt = np.zeros(n_cells, dtype=np.int32)
        self.malf_cnt = np.zeros(n_cells, dtype=np.int32)
        self.tgt_cnt = np.zeros(n_cells, dtype=np.int32)
        self.speed_min = np.full(n_cells, np.inf, dtype=np.float64)
        self.cell_trains: dict = {}
        for tr in env.trains:
            if tr.on_map:
                ci = grid.cell_index(tr.position)
                self.head_cnt[ci, int(tr.heading)] += 1
                self.tot_cnt[ci] += 1
                self.period_at[ci] = tr.spec.speed_period
                if tr.malfunction_left > 0:
                    self.malf_cnt[ci] += 1
                self.speed_min[ci] = min(self.speed_min[ci], tr.spec.speed)
                self.cell_trains.setdefault(ci, []).append(tr)
            elif tr.phase == TrainPhase.READY:
                ci = grid.cell_index(tr.spec.spawn[0])
                if tr.malfunction_left > 0:
                    self.malf_cnt[ci] += 1
                else:
                    self.ready_cnt[ci] += 1
                self.speed_min[ci] = min(self.speed_min[ci], tr.spec.speed)
                self.cell_trains.setdefault(ci, []).append(tr)
            if tr.phase != TrainPhase.DONE:
                self.tgt_cnt[grid.cell_index(tr.spec.target)] += 1


class _SegmentStats:
    """Vectorized per-segment reductions for one pass."""

    def __init__(self, segments, p: _Pass):
        self.row_of = {id(seg): k for k, seg in enumerate(segments)}
        self.segments = segments
        self._p = p
        lengths = np.array([seg.length for seg in segments], dtype=np.int64)
        starts = np.zeros(len(segments), dtype=np.int64)
        np.cumsum(lengths[:-1], out=starts[1:])
        cells = np.concatenate([seg.cells for seg in segments])
        heads = np.concatenate([seg.headings for seg in segments])
        within = np.concatenate([seg.within for seg in segments])

        self.lengths = lengths
        tot_vec = p.tot_cnt[cells]
        same_vec = p.head_cnt[cells, heads]
        opp_vec = p.head_cnt[cells, (heads + 2) % 4]
        tgt_vec = p.tgt_cnt[cells]
        self.same = np.add.reduceat(same_vec, starts)
        self.tot = np.add.reduceat(tot_vec, starts)
        self.ready = np.add.reduceat(p.ready_cnt[cells], starts)
        self.malf = np.add.reduceat(p.malf_cnt[cells], starts)
        self.speed = np.minimum.reduceat(p.speed_min[cells], starts)
        self.occ_first = np.minimum.reduceat(
            np.where(tot_vec > 0, within, _BIG), starts
        )
        self.tgt_first = np.minimum.reduceat(
            np.where(tgt_vec > 0, within, _BIG), starts
        )
        self.opp_total = np.add.reduceat(opp_vec, starts)
        self._starts = starts
        self._cells = cells
        self._within = within
        self._opp_vec = opp_vec
        self._tot_vec = tot_vec
        self._opp_lists: dict = {}

    def opp_list(self, row: int):
        """[(within index, speed period), ...] of strictly opposing trains."""
        got = self._opp_lists.get(row)
        if got is None:
            s = self._starts[row]
            e = s + self.lengths[row]
            idx = np.flatnonzero(self._opp_vec[s:e])
            got = [
                (int(k), int(self._p.period_at[self._cells[s + k]]))
                for k in idx
            ]
            self._opp_lists[row] = got
        return got

    def occupied_slice(self, row: int) -> np.ndarray:
        s = self._starts[row]
        return self._tot_vec[s : s + self.lengths[row]]


class ObsBuilder:
    """Builds observations for one env; branch graphs are cached on the grid."""

    def __init__(
        self,
        env: RailEnv,
        max_depth: int = DEFAULT_MAX_DEPTH,
        max_nodes: int = DEFAULT_MAX_NODES,
    ):
        if max_depth < 0:
            raise DomainError("max_depth must be >= 0")
        if max_nodes < 1:
            raise DomainError("max_nodes must be >= 1")
        self.env = env
        self.grid = env.grid
        self.max_depth = max_depth
        self.max_nodes = max_nodes
        if self.grid._segment_graph is None:
            self.grid._segment_graph = {
                "segments": {},
                "switch_any": self._switch_any_map(),
            }
        self._segments = self.grid._segment_graph["segments"]
        self._switch_any = self.grid._segment_graph["switch_any"]

    def _switch_any_map(self) -> np.ndarray:
        grid = self.grid
        out = np.zeros(grid.height * grid.width, dtype=bool)
        for pos in grid.rail_positions():
            cell = grid.cell_at(pos)
            if any(len(outgoing_headings(cell, h)) >= 2 for h in range(4)):
                out[grid.cell_index(pos)] = True
        return out

    # -- static branch graph ------------------------------------------------

    def _segment(self, entry, target) -> _Segment:
        key = (entry, target)
        seg = self._segments.get(key)
        if seg is not None:
            return seg
        grid = self.grid
        cells, headings = [], []
        seen = set()
        unusable_idx = -1
        pos, heading = entry
        kind, children = _SegKind.CYCLE, ()
        while True:
            ci = grid.cell_index(pos)
            cells.append(ci)
            headings.append(int(heading))
            seen.add((pos, heading))
            trans = valid_transitions(grid, pos, heading)
            if unusable_idx < 0 and self._switch_any[ci] and len(trans) == 1:
                unusable_idx = len(cells) - 1
            if pos == target:
                kind, children = _SegKind.TARGET, ()
                break
            if len(trans) == 0:
                kind, children = _SegKind.DEAD_END, ()
                break
            if len(trans) >= 2:
                kind = _SegKind.DECISION
                kids = [
                    (_relative_label(heading, out), (npos, out))
                    for out, npos in trans
                ]
                kids.sort(key=lambda kv: int(kv[0]))
                children = tuple(kids)
                break
            out, npos = trans[0]
            if out == heading.opposite():
                kind = _SegKind.DEAD_END
                children = ((BranchLabel.BACK, (npos, out)),)
                break
            if (npos, out) in seen:
                kind, children = _SegKind.CYCLE, ()
                break
            pos, heading = npos, out
        seg = _Segment(
            entry,
            np.array(cells, dtype=np.int64),
            np.array(headings, dtype=np.int64),
            kind,
            children,
            unusable_idx,
        )
        self._segments[key] = seg
        return seg

    def _root_state(self, train: TrainState):
        if train.on_map:
            return (train.position, train.heading)
        return train.spec.spawn

    def _skeleton(self, train: TrainState):
        """BFS over branches: parallel arrays (segments, parent, label, depth, offset)."""
        target = train.spec.target
        segs = [self._segment(self._root_state(train), target)]
        parents, labels, depths, offsets = [-1], [-1], [0], [0]
        cursor = 0
        while cursor < len(segs):
            if depths[cursor] < self.max_depth and len(segs) < self.max_nodes:
                seg = segs[cursor]
                child_offset = offsets[cursor] + seg.length
                for label, entry in seg.children:
                    if len(segs) >= self.max_nodes:
                        break
                    segs.append(self._segment(entry, target))
                    parents.append(cursor)
                    labels.append(int(label))
                    depths.append(depths[cursor] + 1)
                    offsets.append(child_offset)
            cursor += 1
        return segs, parents, labels, depths, offsets

    # -- feature assembly ---------------------------------------------------

    def _assemble(self, train, segs, offsets, stats: _Pass, sstats):
        """Raw (n, 11) feature matrix for one train's node list."""
        rows = np.array([sstats.row_of[id(s)] for s in segs], dtype=np.int64)
        offs = np.array(offsets, dtype=np.int64)
        lens = sstats.lengths[rows]
        sent = lens + 1

        same = sstats.same[rows].astype(np.int64)
        tot = sstats.tot[rows].astype(np.int64)
        ready = sstats.ready[rows].astype(np.int64)
        malf = sstats.malf[rows].astype(np.int64)
        speed = sstats.speed[rows].copy()
        occ_first = sstats.occ_first[rows]
        tgt_first = sstats.tgt_first[rows]

        opp = tot - same
        ends_at = np.array([s.ends_at_target for s in segs], dtype=bool)
        unusable = np.array([s.unusable_idx for s in segs], dtype=np.int64)

        d_own = np.where(ends_at, offs + lens - 1, sent)
        d_other_tgt = np.where(tgt_first < lens, offs + tgt_first, sent)
        d_agents = np.where(occ_first < lens, offs + occ_first, sent)
        d_unusable = np.where(unusable >= 0, offs + unusable, sent)

        # head-on forecast: cells an opposing train reaches no later than us
        d_conflict = sent.copy()
        own_period = train.spec.speed_period
        hot = np.flatnonzero(sstats.opp_total[rows] > 0)
        for k in hot:
            row = int(rows[k])
            first = _BIG
            for q_idx, period_j in sstats.opp_list(row):
                q = int(offs[k]) + q_idx
                p_min = -((-q * period_j) // (own_period + period_j))
                first = min(first, p_min)
            first = max(first, int(offs[k]))
            if first <= int(offs[k] + lens[k] - 1):
                d_conflict[k] = first

        # the observer must not count itself at its own root cell
        anchored = segs[0].entry == self._root_state(train) and offsets[0] == 0
        if anchored and (train.on_map or train.phase == TrainPhase.READY):
            root_cell = int(segs[0].cells[0])
            others = [
                tr for tr in stats.cell_trains.get(root_cell, []) if tr is not train
            ]
            if train.on_map:
                same[0] -= 1
                tot[0] -= 1
                if occ_first[0] == 0:
                    # the hit at distance 0 is the observer itself
                    occ = sstats.occupied_slice(int(rows[0])).copy()
                    occ[0] = 0
                    nz = np.flatnonzero(occ)
                    d_agents[0] = int(offs[0]) + int(nz[0]) if len(nz) else sent[0]
            elif train.malfunction_left > 0:
                malf[0] -= 1
            else:
                ready[0] -= 1
            cell_speeds = [tr.spec.speed for tr in others]
            s = sstats._starts[int(rows[0])]
            rest = stats.speed_min[sstats._cells[s + 1 : s + int(lens[0])]]
            best = min(cell_speeds, default=np.inf)
            if len(rest):
                best = min(best, float(rest.min()))
            speed[0] = best

        # own target only ever sits on a terminating branch; drop self hits
        if train.phase != TrainPhase.DONE:
            own_tgt_cells = np.flatnonzero(ends_at & (tgt_first == lens - 1))
            tgt_cell = self.grid.cell_index(train.spec.target)
            if len(own_tgt_cells) and stats.tgt_cnt[tgt_cell] <= 1:
                d_other_tgt[own_tgt_cells] = sent[own_tgt_cells]

        speed = np.where(np.isinf(speed), 1.0, speed)
        feat = np.empty((len(segs), NODE_FEATURE_DIM), dtype=np.float64)
        feat[:, F_SAME_DIR] = same
        feat[:, F_OPPOSITE_DIR] = opp
        feat[:, F_READY] = ready
        feat[:, F_MALFUNCTION] = malf
        feat[:, F_DIST_OWN_TARGET] = d_own
        feat[:, F_DIST_OTHER_TARGETS] = d_other_tgt
        feat[:, F_DIST_OTHER_AGENTS] = d_agents
        feat[:, F_DIST_CONFLICT] = d_conflict
        feat[:, F_DIST_UNUSABLE_SWITCH] = d_unusable
        feat[:, F_BRANCH_LENGTH] = lens
        feat[:, F_SLOWEST_SPEED] = speed
        return feat.astype(np.float32)

    # -- public API ---------------------------------------------------------

    def build_attr(self, train_id: int) -> np.ndarray:
        """Normalized 71-entry attribute vector for one train."""
        env = self.env
        train = env.train(train_id)
        spec = train.spec
        grid = self.grid
        scale = grid.width + grid.height
        t_max = env.t_max
        n = env.n_trains

        v = np.zeros(ATTR_DIM, dtype=np.float64)
        v[A_ID] = spec.id / n
        v[A_EARLIEST] = spec.earliest_departure / t_max
        v[A_LATEST] = spec.latest_arrival / t_max
        v[A_INIT_DIR.start + int(spec.spawn[1])] = 1.0
        dmap = shortest_distance_map(grid, spec.target)
        d0 = dmap.get(spec.spawn[0], spec.spawn[1])
        v[A_INIT_DIST] = min(d0, 2 * scale) / scale

        pos, heading = (
            (train.position, train.heading) if train.on_map else spec.spawn
        )
        cell = grid.cell_at(pos)
        v[A_ROAD_TYPE.start + int(classify_road_type(cell))] = 1.0
        for k in range(16):
            v[A_TRANSITION_BITS.start + k] = (cell >> (15 - k)) & 1
        v[A_CUR_DIR.start + int(heading)] = 1.0
        if train.prev_heading is not None:
            v[A_LAST_TURN_DIR.start + int(train.prev_heading)] = 1.0
        v[A_DEADLOCKED] = float(train.deadlocked)
        v[A_ACTION_MASK] = env.valid_actions(train_id).astype(np.float64)
        d = dmap.get(pos, heading)
        v[A_DIST_TARGET] = min(d, 2 * scale) / scale

        v[A_TIME] = env.t / t_max
        v[A_TURNS_BEFORE_LATE] = (spec.latest_arrival - env.t) / t_max
        v[A_ARRIVAL] = (train.arrival_time or 0) / t_max

        v[A_PHASE.start + train.obs_state()] = 1.0
        v[A_OFF_MAP] = float(not train.on_map)
        v[A_ON_MAP] = float(train.on_map)
        v[A_MALFUNCTIONING] = float(train.malfunction_left > 0)
        v[A_MOVING] = float(train.phase == TrainPhase.MOVING)
        if train.malfunction_left > 0:
            v[A_MALFUNCTION_ENDS] = (env.t + train.malfunction_left) / t_max
        v[A_MALFUNCTION_LEFT] = train.malfunction_left / t_max
        v[A_SPEED_SLOT.start + min(train.step_counter, 4)] = 1.0
        return v.astype(np.float32)

    def _trees_for(self, train_ids) -> list:
        env = self.env
        stats = _Pass(env)
        trains = [env.train(i) for i in train_ids]
        skeletons = [self._skeleton(tr) for tr in trains]
        unique, seen = [], set()
        for segs, *_ in skeletons:
            for seg in segs:
                if id(seg) not in seen:
                    seen.add(id(seg))
                    unique.append(seg)
        sstats = _SegmentStats(unique, stats)
        trees = []
        for train, (segs, parents, labels, depths, offsets) in zip(
            trains, skeletons
        ):
            feat = self._assemble(train, segs, offsets, stats, sstats)
            trees.append(
                ObsTree(
                    train.id,
                    feat,
                    np.array(parents, dtype=np.int32),
                    np.array(labels, dtype=np.int8),
                    np.array(depths, dtype=np.int16),
                )
            )
        return trees

    def build_tree(self, train_id: int) -> ObsTree:
        return self._trees_for([train_id])[0]

    def build_all(self):
        """(attr matrix, trees) for every train, sharing one indexing pass."""
        ids = range(1, self.env.n_trains + 1)
        attrs = np.stack([self.build_attr(i) for i in ids])
        trees = self._trees_for(list(ids))
        return attrs, trees

    def node_features(self, train_id: int, entry=None, offset: int = 0) -> np.ndarray:
        """Raw 11 readings for the branch starting at `entry` (default: root)."""
        train = self.env.train(train_id)
        if entry is None:
            entry = self._root_state(train)
        seg = self._segment(entry, train.spec.target)
        stats = _Pass(self.env)
        sstats = _SegmentStats([seg], stats)
        return self._assemble(train, [seg], [offset], stats, sstats)[0]


def build_all(env: RailEnv, max_depth=DEFAULT_MAX_DEPTH, max_nodes=DEFAULT_MAX_NODES):
    return ObsBuilder(env, max_depth, max_nodes).build_all()


def scale_node_features(feat: np.ndarray, n_trains: int, width: int, height: int):
    """Counts / N, distances and lengths / (width + height); speeds stay as-is."""
    out = np.asarray(feat, dtype=np.float32).copy()
    out[..., F_SAME_DIR : F_MALFUNCTION + 1] /= n_trains
    out[..., F_DIST_OWN_TARGET : F_BRANCH_LENGTH + 1] /= width + height
    return out


# -- flat batches -----------------------------------------------------------


@dataclass
class FlatObsBatch:
    """Batched observation with trees in parent-pointer form (BFS order)."""

    attr: np.ndarray  # (n_agents, 71) float32
    node_feat: np.ndarray  # (total_nodes, 11) float32
    parent: np.ndarray  # (total_nodes,) int32, per-agent local, root = -1
    label: np.ndarray  # (total_nodes,) int8, root = -1
    offsets: np.ndarray  # (n_agents + 1,) int64

    @property
    def n_agents(self) -> int:
        return len(self.attr)

    def agent_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))


def flatten(attrs: np.ndarray, trees) -> FlatObsBatch:
    attrs = np.asarray(attrs, dtype=np.float32)
    if attrs.ndim != 2 or attrs.shape[1] != ATTR_DIM or len(trees) != len(attrs):
        raise FormatError("attr matrix does not match tree list")
    offsets = np.zeros(len(trees) + 1, dtype=np.int64)
    for k, tree in enumerate(trees):
        offsets[k + 1] = offsets[k] + tree.node_count
    return FlatObsBatch(
        attr=attrs,
        node_feat=np.concatenate([t.feat for t in trees]),
        parent=np.concatenate([t.parent for t in trees]),
        label=np.concatenate([t.label for t in trees]),
        offsets=offsets,
    )


def unflatten(batch: FlatObsBatch) -> list:
    """Rebuild per-agent trees; malformed topology raises FormatError."""
    if len(batch.offsets) != batch.n_agents + 1 or batch.offsets[0] != 0:
        raise FormatError("bad offsets array")
    if batch.offsets[-1] != len(batch.node_feat):
        raise FormatError("offsets do not cover the node arrays")
    trees = []
    for i in range(batch.n_agents):
        sl = batch.agent_slice(i)
        parent = batch.parent[sl]
        label = batch.label[sl]
        n = len(parent)
        if n == 0:
            raise FormatError(f"agent {i + 1} has no nodes")
        if parent[0] != -1 or label[0] != -1:
            raise FormatError(f"agent {i + 1}: first node must be the root")
        depth = np.zeros(n, dtype=np.int16)
        for k in range(1, n):
            pk = int(parent[k])
            if not 0 <= pk < k:
                raise FormatError(f"agent {i + 1}: child {k} precedes its parent")
            if not 0 <= int(label[k]) <= 3:
                raise FormatError(f"agent {i + 1}: bad branch label at node {k}")
            depth[k] = depth[pk] + 1
        trees.append(
            ObsTree(i + 1, batch.node_feat[sl], parent, label, depth)
        )
    return trees


_MAGIC = b"FOBS"
_DUMP_VERSION = 1


def save_flat(batch: FlatObsBatch, path):
    """Binary dump: little-endian header then raw row-major arrays.

    Layout: magic "FOBS", u32 version, u32 n_agents, u32 attr_dim,
    u32 node_dim, u64 total_nodes, then offsets as i64, attr as f32,
    node features as f32, parents as i32, labels as i8.
    """
    header = struct.pack(
        "<4sIIIIQ",
        _MAGIC,
        _DUMP_VERSION,
        batch.n_agents,
        batch.attr.shape[1],
        batch.node_feat.shape[1],
        len(batch.node_feat),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(batch.offsets, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(batch.attr, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(batch.node_feat, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(batch.parent, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(batch.label, dtype="<i1").tobytes())


def load_flat(path) -> FlatObsBatch:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_size = struct.calcsize("<4sIIIIQ")
    if len(blob) < head_size:
        raise FormatError("truncated observation dump")
    magic, version, n_agents, attr_dim, node_dim, total = struct.unpack_from(
        "<4sIIIIQ", blob
    )
    if magic != _MAGIC:
        raise FormatError("not an observation dump")
    if version != _DUMP_VERSION:
        raise FormatError(f"unsupported dump version {version}")
    sizes = [
        (n_agents + 1) * 8,
        n_agents * attr_dim * 4,
        total * node_dim * 4,
        total * 4,
        total * 1,
    ]
    if len(blob) != head_size + sum(sizes):
        raise FormatError("observation dump has the wrong size")
    out, cursor = [], head_size
    for size, dtype in zip(sizes, ["<i8", "<f4", "<f4", "<i4", "<i1"]):
        out.append(np.frombuffer(blob, dtype=dtype, count=size // np.dtype(dtype).itemsize, offset=cursor))
        cursor += size
    offsets, attr, node_feat, parent, label = out
    return FlatObsBatch(
        attr=attr.reshape(n_agents, attr_dim).copy(),
        node_feat=node_feat.reshape(total, node_dim).copy(),
        parent=parent.astype(np.int32),
        label=label.astype(np.int8),
        offsets=offsets.astype(np.int64),
    )
