import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmdp.core import ContractViolation, InvalidArgument, run_episode
from rmdp.envs import (DOWN, LEFT, RIGHT, UP, ResourceGathering, ResourceGatheringConfig, VecResourceGathering,
                       VecVelocityTrack, VelocityTrack, VelocityTrackConfig, VelState, bfs_distances,
                       rg_initial_state, rg_optimal_oracle, rg_step, shortest_round_trip, velocity_kernel,
                       vt_partition_oracle, vt_step)

CFG = ResourceGatheringConfig()


class Script:
    def __init__(self, actions):
        self.actions, self.i = list(actions), 0

    def act(self, obs, rng):
        a = self.actions[self.i % len(self.actions)]
        self.i += 1
        return a, 0.0


def play(actions, cfg=CFG):
    state = rg_initial_state(cfg)
    total = np.zeros(cfg.n)
    for a in actions:
        state, r, done = rg_step(state, a, cfg)
        total += r
        if done:
            break
    return state, total


# -- Resource Gathering ---------------------------------------------------------

def test_right_then_left_pays_two_agents():
    state, total = play([RIGHT, LEFT])
    assert state.done and state.t == 2
    assert total[CFG.tile(2, 0)] == 98 and total[CFG.tile(2, 1)] == 98
    assert np.count_nonzero(total) == 2


def test_wall_move_is_a_no_op_that_uses_time():
    state, r, done = rg_step(rg_initial_state(CFG), LEFT, CFG)
    assert state.position == (2, 0) and state.t == 1 and not done
    assert not r.any()


def test_time_limit_pays_zero():
    # walk away and bounce against the east wall forever
    state, total = play([RIGHT] * 200)
    assert state.done and state.t == CFG.time_limit
    assert np.all(total == 0)


def test_step_after_done_is_a_contract_violation():
    state, _ = play([RIGHT, LEFT])
    with pytest.raises(ContractViolation):
        rg_step(state, UP, CFG)


def test_start_agent_visited_from_the_start():
    assert rg_initial_state(CFG).visited[CFG.tile(2, 0)]


def test_invalid_action():
    with pytest.raises(InvalidArgument):
        rg_step(rg_initial_state(CFG), 4, CFG)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=120))
def test_episode_reward_range_and_length(actions):
    state = rg_initial_state(CFG)
    total = np.zeros(CFG.n)
    for a in actions:
        state, r, done = rg_step(state, a, CFG)
        total += r
        if done:
            break
    assert np.all((total == 0) | ((total > 0) & (total <= 98)))
    assert np.all(total[~state.visited] == 0)
    if state.done:
        assert 2 <= state.t <= CFG.time_limit


def test_bfs_and_oracle_values():
    d = bfs_distances(CFG)
    assert d[CFG.tile(4, 4)] == 6
    per_agent, sw = rg_optimal_oracle(CFG)
    assert per_agent[CFG.tile(2, 0)] == 98
    assert per_agent[CFG.tile(4, 4)] == 88
    assert sw == pytest.approx(93.52, abs=1e-12)


def test_oracle_with_central_start():
    _, sw = rg_optimal_oracle(ResourceGatheringConfig(start_cell=(2, 2)))
    assert sw == pytest.approx(95.12, abs=1e-12)


def test_oracle_rounds_to_one_decimal():
    assert abs(rg_optimal_oracle(CFG)[1] - 93.6) <= 0.1


@pytest.mark.parametrize("tile", range(25))
def test_scripted_round_trip_attains_oracle(tile):
    per_agent, _ = rg_optimal_oracle(CFG)
    ret = run_episode(ResourceGathering(CFG), Script(shortest_round_trip(CFG, tile)), np.random.default_rng(0))
    assert ret[tile] == per_agent[tile]


def test_oracle_by_exhaustive_search_on_a_small_grid():
    cfg = ResourceGatheringConfig(grid_side=3, start_cell=(1, 0), time_limit=12)
    best = np.zeros(cfg.n)
    for length in range(2, 9):
        for seq in itertools.product(range(4), repeat=length):
            state, total = play(seq, cfg)
            if state.done:
                best = np.maximum(best, total)
    np.testing.assert_array_equal(best, rg_optimal_oracle(cfg)[0])


def test_vector_env_matches_scalar_env():
    rng = np.random.default_rng(0)
    E = 4
    vec = VecResourceGathering(E, CFG)
    envs = [ResourceGathering(CFG) for _ in range(E)]
    obs_v = vec.reset()
    obs_s = np.stack([e.reset() for e in envs])
    np.testing.assert_array_equal(obs_v, obs_s)
    for _ in range(400):
        acts = rng.integers(0, 4, size=E)
        obs_v, r_v, d_v = vec.step(acts)
        for e, env in enumerate(envs):
            o, r, d = env.step(acts[e])
            np.testing.assert_array_equal(r_v[e], r)
            assert d_v[e] == d
            if d:
                o = env.reset()
            np.testing.assert_array_equal(obs_v[e], o)


def test_observation_layout():
    obs = ResourceGathering(CFG).reset()
    assert obs.shape == (26,)
    assert obs[CFG.tile(2, 0)] == 1 and obs.sum() == 1 and obs[-1] == 0


def test_config_validation():
    with pytest.raises(InvalidArgument):
        ResourceGatheringConfig(start_cell=(5, 0))


# -- velocity tracking -----------------------------------------------------------

def test_kernel_values():
    b, H = 4.0, 200
    _, r, _ = vt_step(VelState(1.0, 0), 0.0, np.array([1.0, 1.0 + b / 20, 1.0 + b / 40]), b, H)
    np.testing.assert_allclose(r, [100 / H, 0.0, 0.5 * 100 / H], atol=1e-12)


def test_kernel_symmetry_and_equal_targets():
    t = np.array([1.3, 1.3])
    assert velocity_kernel(t, 1.3 + 0.05, 4.0)[0] == pytest.approx(velocity_kernel(t, 1.3 - 0.05, 4.0)[0])
    r = velocity_kernel(t, 1.2, 4.0)
    assert r[0] == r[1]


@given(st.floats(0, 4), st.floats(-3, 3), st.lists(st.floats(0, 4), min_size=1, max_size=10))
def test_velocity_step_bounds(v, a, targets):
    state, r, _ = vt_step(VelState(v, 0), a, np.array(targets), 4.0, 200)
    assert 0.0 <= state.v <= 4.0
    assert np.all((r >= 0) & (r <= 100 / 200 + 1e-12))


def test_action_is_clamped():
    s, _, _ = vt_step(VelState(1.0, 0), 5.0, np.array([0.0]), 4.0, 200)
    assert s.v == pytest.approx(1.4)


def test_perfect_tracking_totals_one_hundred():
    cfg = VelocityTrackConfig(n=1, b=4.0, horizon=50, targets=(0.0,))
    total = run_episode(VelocityTrack(cfg), Script([0.0]), np.random.default_rng(0))
    assert total[0] == pytest.approx(100.0)


def test_targets_must_lie_in_range():
    with pytest.raises(InvalidArgument):
        VelocityTrackConfig(n=1, b=1.0, targets=(2.0,))


def test_vector_velocity_matches_scalar():
    rng = np.random.default_rng(1)
    cfg = VelocityTrackConfig.sample(5, 3.0, rng, horizon=20)
    vec = VecVelocityTrack(3, cfg)
    envs = [VelocityTrack(cfg) for _ in range(3)]
    for e in envs:
        e.reset()
    for _ in range(45):
        acts = rng.uniform(-1.5, 1.5, size=3)
        obs_v, r_v, d_v = vec.step(acts)
        for i, env in enumerate(envs):
            o, r, d = env.step(acts[i])
            np.testing.assert_allclose(r_v[i], r)
            if d:
                o = env.reset()
            np.testing.assert_allclose(obs_v[i], o)


def test_partition_oracle_examples():
    b = 4.0
    assert vt_partition_oracle([1.7], 1, b)[0] == pytest.approx(100.0, abs=1e-12)
    assert vt_partition_oracle([0.2 * b, 0.8 * b], 2, b)[0] == pytest.approx(100.0, abs=1e-12)
    with pytest.raises(InvalidArgument):
        vt_partition_oracle([1.0], 2, b)


def test_partition_oracle_single_group_matches_grid_search():
    b = 4.0
    targets = np.array([0.0, b / 40, b / 20, b])
    grid = np.linspace(0, b, 400)
    candidates = np.concatenate([grid, targets, np.clip(np.concatenate([targets - b / 20, targets + b / 20]), 0, b)])
    brute = max(100 * velocity_kernel(targets, v, b).sum() for v in candidates) / 4
    assert vt_partition_oracle(targets, 1, b)[0] == pytest.approx(brute, abs=1e-12)


def test_partition_oracle_matches_exhaustive_segmentation():
    rng = np.random.default_rng(5)
    b = 2.0
    targets = np.sort(rng.uniform(0, b, size=7))
    grid = np.linspace(0, b, 400)
    k = 3
    # the triangular kernels are piecewise linear: their kinks are the only candidates besides the grid
    grid = np.concatenate([grid, targets, np.clip(np.concatenate([targets - b / 20, targets + b / 20]), 0, b)])

    def seg(a, c):
        return max(100 * velocity_kernel(targets[a:c], v, b).sum() for v in grid)

    best = max(seg(0, i) + seg(i, j) + seg(j, 7) for i in range(1, 6) for j in range(i + 1, 7))
    sw, bounds = vt_partition_oracle(targets, k, b)
    assert sw == pytest.approx(best / 7, abs=1e-9)
    assert bounds[0][0] == 0 and bounds[-1][1] == 7 and len(bounds) == k


def test_partition_oracle_is_monotone_in_k():
    targets = np.random.default_rng(2).uniform(0, 4, size=30)
    values = [vt_partition_oracle(targets, k, 4.0)[0] for k in range(1, 6)]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
