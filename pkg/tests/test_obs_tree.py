import numpy as np
import pytest

from railrl.env import RailEnv
from railrl.errors import DomainError, FormatError
from railrl.naive_obs import naive_build_all, naive_build_attr, naive_build_tree
from railrl.obs import (
    ATTR_DIM,
    F_BRANCH_LENGTH,
    F_SLOWEST_SPEED,
    NODE_FEATURE_DIM,
    FlatObsBatch,
    ObsBuilder,
    build_all,
    flatten,
    load_flat,
    save_flat,
    scale_node_features,
    unflatten,
)

import oracles
from oracles import random_small_scenario


def random_env(seed, steps=0, height=8, width=8, n_trains=3):
    rng = np.random.default_rng(7700 + seed)
    scn = None
    while scn is None:
        scn = random_small_scenario(rng, height=height, width=width, n_trains=n_trains)
    env = RailEnv(scn, seed=seed)
    for _ in range(steps):
        if env.done:
            break
        env.step(rng.integers(0, 5, size=env.n_trains).tolist())
    return env


def assert_trees_match(env, max_depth, max_nodes):
    builder = ObsBuilder(env, max_depth, max_nodes)
    for tid in range(1, env.n_trains + 1):
        tree = builder.build_tree(tid)
        feat, parent, label, depth = oracles.oracle_tree_arrays(
            env, tid, max_depth, max_nodes
        )
        np.testing.assert_array_equal(tree.parent, parent, err_msg=f"train {tid}")
        np.testing.assert_array_equal(tree.label, label, err_msg=f"train {tid}")
        np.testing.assert_array_equal(tree.depth, depth, err_msg=f"train {tid}")
        np.testing.assert_array_equal(
            tree.feat, feat.astype(np.float32), err_msg=f"train {tid}"
        )


class TestAgainstPathEnumeration:
    @pytest.mark.parametrize("seed", range(10))
    def test_random_walk_maps(self, seed):
        env = random_env(seed, steps=seed % 4 * 5)
        assert_trees_match(env, max_depth=4, max_nodes=40)

    def test_generated_scenario(self, small_scenario):
        env = RailEnv(small_scenario, seed=2)
        assert_trees_match(env, max_depth=3, max_nodes=48)

    def test_generated_scenario_after_steps(self, small_scenario, rng):
        env = RailEnv(small_scenario, seed=2)
        for _ in range(12):
            if env.done:
                break
            env.step(rng.integers(0, 5, size=env.n_trains).tolist())
        assert_trees_match(env, max_depth=3, max_nodes=48)

    def test_with_malfunctions(self, small_malf_scenario, rng):
        env = RailEnv(small_malf_scenario, seed=6)
        for _ in range(18):
            if env.done:
                break
            env.step(rng.integers(0, 5, size=env.n_trains).tolist())
        assert_trees_match(env, max_depth=3, max_nodes=32)

    def test_depth_zero_is_root_only(self):
        env = random_env(3)
        builder = ObsBuilder(env, max_depth=0, max_nodes=8)
        for tid in range(1, env.n_trains + 1):
            tree = builder.build_tree(tid)
            assert tree.node_count == 1
            assert tree.parent.tolist() == [-1]
        assert_trees_match(env, max_depth=0, max_nodes=8)

    @pytest.mark.parametrize("max_nodes", [1, 2, 3, 5, 9])
    def test_node_budget_truncation(self, max_nodes):
        env = random_env(5)
        assert_trees_match(env, max_depth=6, max_nodes=max_nodes)


class TestTreeShape:
    def test_bfs_invariants(self):
        env = random_env(7)
        builder = ObsBuilder(env, max_depth=5, max_nodes=30)
        for tid in range(1, env.n_trains + 1):
            tree = builder.build_tree(tid)
            n = tree.node_count
            assert 1 <= n <= 30
            assert tree.parent[0] == -1 and tree.label[0] == -1
            for k in range(1, n):
                assert 0 <= tree.parent[k] < k
                assert 0 <= tree.label[k] <= 3
                assert tree.depth[k] == tree.depth[tree.parent[k]] + 1
            assert tree.depth.max() <= 5
            assert tree.feat.shape == (n, NODE_FEATURE_DIM)
            assert tree.feat.dtype == np.float32

    def test_siblings_sorted_by_label(self):
        env = random_env(8)
        builder = ObsBuilder(env, max_depth=5, max_nodes=40)
        for tid in range(1, env.n_trains + 1):
            tree = builder.build_tree(tid)
            for p in range(tree.node_count):
                labs = [
                    int(tree.label[k])
                    for k in range(tree.node_count)
                    if tree.parent[k] == p
                ]
                assert labs == sorted(labs)
                assert len(labs) == len(set(labs))

    def test_root_object_view_matches_arrays(self):
        env = random_env(9)
        tree = ObsBuilder(env, 4, 24).build_tree(1)
        root = tree.root
        assert root.depth == 0
        np.testing.assert_array_equal(root.feature, tree.feat[0])
        stack, count = [root], 0
        while stack:
            node = stack.pop()
            count += 1
            stack.extend(child for _, child in node.children)
        assert count == tree.node_count

    def test_build_all_matches_per_train_builds(self, small_scenario):
        env = RailEnv(small_scenario, seed=2)
        builder = ObsBuilder(env, 4, 32)
        attrs, trees = builder.build_all()
        assert attrs.shape == (env.n_trains, ATTR_DIM)
        for tid in range(1, env.n_trains + 1):
            np.testing.assert_array_equal(attrs[tid - 1], builder.build_attr(tid))
            assert trees[tid - 1] == builder.build_tree(tid)

    def test_root_branch_features_endpoint(self):
        env = random_env(11)
        builder = ObsBuilder(env, 4, 24)
        for tid in range(1, env.n_trains + 1):
            rows = builder.node_features(tid)
            tree = builder.build_tree(tid)
            np.testing.assert_array_equal(rows, tree.feat[0])

    def test_bad_budgets_raise(self):
        env = random_env(1)
        with pytest.raises(DomainError):
            ObsBuilder(env, max_depth=-1)
        with pytest.raises(DomainError):
            ObsBuilder(env, max_nodes=0)


class TestNaiveReferenceAgrees:
    @pytest.mark.parametrize("seed", range(6))
    def test_trees_and_attrs_identical(self, seed):
        env = random_env(seed, steps=seed * 3)
        builder = ObsBuilder(env, 4, 32)
        attrs, trees = builder.build_all()
        n_attrs, n_trees = naive_build_all(env, 4, 32)
        np.testing.assert_array_equal(attrs, n_attrs)
        for fast, slow in zip(trees, n_trees):
            assert fast == slow

    def test_single_train_entry_points(self, small_scenario):
        env = RailEnv(small_scenario, seed=2)
        builder = ObsBuilder(env, 3, 24)
        for tid in range(1, env.n_trains + 1):
            np.testing.assert_array_equal(
                builder.build_attr(tid), naive_build_attr(env, tid)
            )
            assert builder.build_tree(tid) == naive_build_tree(env, tid, 3, 24)


class TestScaling:
    def test_counts_and_distances_normalized(self):
        feat = np.zeros((2, NODE_FEATURE_DIM), dtype=np.float32)
        feat[0, :] = [4, 2, 1, 3, 10, 8, 6, 12, 5, 9, 0.5]
        out = scale_node_features(feat, n_trains=4, width=8, height=8)
        np.testing.assert_allclose(
            out[0],
            [1.0, 0.5, 0.25, 0.75, 10 / 16, 0.5, 6 / 16, 0.75, 5 / 16, 9 / 16, 0.5],
            rtol=1e-6,
        )
        assert out[0, F_SLOWEST_SPEED] == np.float32(0.5)

    def test_input_not_mutated(self):
        feat = np.ones((3, NODE_FEATURE_DIM), dtype=np.float32)
        scale_node_features(feat, 2, 8, 8)
        np.testing.assert_array_equal(feat, np.ones((3, NODE_FEATURE_DIM)))


class TestFlatBatch:
    def _batch(self, env):
        attrs, trees = build_all(env, 4, 24)
        return flatten(attrs, trees), trees

    def test_flatten_layout(self):
        env = random_env(13)
        batch, trees = self._batch(env)
        assert batch.n_agents == env.n_trains
        assert batch.offsets[0] == 0
        sizes = [t.node_count for t in trees]
        np.testing.assert_array_equal(np.diff(batch.offsets), sizes)
        for i, tree in enumerate(trees):
            sl = batch.agent_slice(i)
            np.testing.assert_array_equal(batch.node_feat[sl], tree.feat)
            np.testing.assert_array_equal(batch.parent[sl], tree.parent)
            np.testing.assert_array_equal(batch.label[sl], tree.label)

    def test_unflatten_round_trip(self):
        env = random_env(14)
        batch, trees = self._batch(env)
        back = unflatten(batch)
        assert back == trees

    def test_save_load_round_trip(self, tmp_path):
        env = random_env(15)
        batch, _ = self._batch(env)
        path = tmp_path / "obs.fobs"
        save_flat(batch, path)
        loaded = load_flat(path)
        np.testing.assert_array_equal(loaded.attr, batch.attr)
        np.testing.assert_array_equal(loaded.node_feat, batch.node_feat)
        np.testing.assert_array_equal(loaded.parent, batch.parent)
        np.testing.assert_array_equal(loaded.label, batch.label)
        np.testing.assert_array_equal(loaded.offsets, batch.offsets)

    def test_flatten_rejects_mismatched_shapes(self):
        env = random_env(16)
        attrs, trees = build_all(env, 4, 24)
        with pytest.raises(FormatError):
            flatten(attrs[:-1], trees)
        with pytest.raises(FormatError):
            flatten(attrs[:, :-1], trees)

    def test_unflatten_rejects_bad_topology(self):
        env = random_env(17)
        batch, _ = self._batch(env)
        bad = FlatObsBatch(
            attr=batch.attr,
            node_feat=batch.node_feat,
            parent=batch.parent.copy(),
            label=batch.label,
            offsets=batch.offsets,
        )
        k = int(batch.offsets[1])
        if k + 1 < len(bad.parent):
            bad.parent[k + 1] = 99
            with pytest.raises(FormatError):
                unflatten(bad)

    def test_load_rejects_corruption(self, tmp_path):
        env = random_env(18)
        batch, _ = self._batch(env)
        path = tmp_path / "obs.fobs"
        save_flat(batch, path)
        blob = bytearray(path.read_bytes())

        truncated = tmp_path / "short.fobs"
        truncated.write_bytes(bytes(blob[:-3]))
        with pytest.raises(FormatError):
            load_flat(truncated)

        wrong_magic = tmp_path / "magic.fobs"
        wrong_magic.write_bytes(b"XOBS" + bytes(blob[4:]))
        with pytest.raises(FormatError):
            load_flat(wrong_magic)

        wrong_version = tmp_path / "vers.fobs"
        bad = bytearray(blob)
        bad[4] = 42
        wrong_version.write_bytes(bytes(bad))
        with pytest.raises(FormatError):
            load_flat(wrong_version)
