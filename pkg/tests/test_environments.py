import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from a2po_lab import oracle
from a2po_lab.decmdp import DecMdp, DecMdpError, JointPolicy
from a2po_lab.environments import (CLIMBING_GAME, COORDINATION_2X2, EnvSizeError, GridSpreadSpec, MatrixGameSpec,
                                   build_grid_spread, build_matrix_game, env_from_dict, grid_positions,
                                   grid_reward, random_decmdp)


def value_iteration(mdp, iters=3000):
    v = np.zeros(mdp.n_states)
    for _ in range(iters):
        v = (mdp.reward + mdp.gamma * mdp.transition @ v).max(axis=1)
    return v


# -- matrix games ----------------------------------------------------------

def test_coordination_optimum():
    mdp = build_matrix_game(MatrixGameSpec(COORDINATION_2X2, gamma=0.9))
    assert mdp.n_states == 1 and mdp.action_counts == (2, 2)
    _, j_star, _ = oracle.optimal_values(mdp)
    assert j_star == pytest.approx(1 / (1 - 0.9), abs=1e-9)


def test_matrix_game_reward_is_payoff():
    mdp = build_matrix_game(MatrixGameSpec(CLIMBING_GAME))
    for a in itertools.product(range(3), repeat=2):
        assert mdp.reward[0, mdp.joint_index(a)] == CLIMBING_GAME[a]


def test_climbing_optimum_by_enumeration():
    mdp = build_matrix_game(MatrixGameSpec(CLIMBING_GAME, gamma=0.9))
    best = max(itertools.product(range(3), repeat=2), key=lambda a: CLIMBING_GAME[a])
    assert best == (0, 0)
    _, j_star, greedy = oracle.optimal_values(mdp)
    assert tuple(mdp.decode(greedy[0])) == best
    assert j_star == pytest.approx(11.0 / (1 - 0.9), abs=1e-8)


def test_zero_payoff_gives_zero_return():
    mdp = build_matrix_game(MatrixGameSpec(np.zeros((3, 2)), gamma=0.8))
    for seed in range(5):
        jp = JointPolicy.random(1, (3, 2), np.random.default_rng(seed), 3.0)
        assert oracle.expected_return(mdp, jp) == 0.0


def test_repeated_matrix_game_finite_horizon():
    mdp = build_matrix_game(MatrixGameSpec(COORDINATION_2X2, gamma=0.9, repeat=3))
    assert mdp.absorbing.sum() == 1
    _, j_star, _ = oracle.optimal_values(mdp)
    assert j_star == pytest.approx(1 + 0.9 + 0.81, abs=1e-12)


def test_matrix_game_shape_mismatch():
    with pytest.raises(DecMdpError):
        build_matrix_game(MatrixGameSpec(np.zeros((2, 0))))


# -- grid spread -----------------------------------------------------------

def test_single_agent_on_landmark_stays():
    spec = GridSpreadSpec(side=3, n_agents=1, landmarks=[4])
    mdp = build_grid_spread(spec)
    state = grid_positions(spec).index((4,))
    assert mdp.reward[state, 0] == 0.0
    assert mdp.transition[state, 0, state] == 1.0


def test_same_cell_single_collision_penalty():
    spec = GridSpreadSpec(side=3, n_agents=2, landmarks=[0, 8], collision_penalty=2.5)
    # both agents on landmark 0: landmark 8 is 4 steps away, one colliding pair
    assert grid_reward(spec, (0, 0), [0, 8]) == -4.0 - 2.5
    assert grid_reward(spec, (0, 8), [0, 8]) == 0.0
    three = GridSpreadSpec(side=3, n_agents=3, collision_penalty=1.0)
    assert grid_reward(three, (4, 4, 4), [4]) == -3.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=3, max_size=3), st.permutations(range(3)),
       st.lists(st.integers(0, 15), min_size=1, max_size=3))
def test_grid_reward_permutation_invariant(cells, perm, landmarks):
    spec = GridSpreadSpec(side=4, n_agents=3)
    swapped = [cells[p] for p in perm]
    assert grid_reward(spec, cells, landmarks) == grid_reward(spec, swapped, landmarks)


def test_grid_starts_on_distinct_cells():
    spec = GridSpreadSpec()
    mdp = build_grid_spread(spec)
    for cells, p in zip(grid_positions(spec), mdp.initial_dist):
        assert (p > 0) == (len(set(cells)) == len(cells))


def test_grid_walls_block_moves():
    spec = GridSpreadSpec(side=2, n_agents=1, landmarks=[0], walls=[1])
    mdp = build_grid_spread(spec)
    states = grid_positions(spec)
    # moving east from cell 0 runs into the wall
    assert mdp.transition[states.index((0,)), 3, states.index((0,))] == 1.0


def test_grid_optimal_return_by_value_iteration():
    mdp = build_grid_spread(GridSpreadSpec())
    assert (mdp.n_states, mdp.n_joint_actions) == (81, 25)
    v = value_iteration(mdp)
    j_vi = float(mdp.initial_dist @ v)
    _, j_star, _ = oracle.optimal_values(mdp)
    assert j_vi == pytest.approx(-1.15, abs=1e-9)
    assert j_star == pytest.approx(j_vi, abs=1e-9)


def test_grid_size_cap():
    with pytest.raises(EnvSizeError):
        build_grid_spread(GridSpreadSpec(side=5, n_agents=3))


# -- random generator ------------------------------------------------------

def test_random_decmdp_deterministic():
    a = random_decmdp(4, 2, (2, 3), seed=9, sparsity=0.5)
    b = random_decmdp(4, 2, (2, 3), seed=9, sparsity=0.5)
    assert np.array_equal(a.transition, b.transition) and np.array_equal(a.reward, b.reward)
    c = random_decmdp(4, 2, (2, 3), seed=10, sparsity=0.5)
    assert not np.array_equal(a.transition, c.transition)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.sampled_from([1e-3, 0.1, 1.0, 10.0]))
def test_random_decmdp_valid(seed, n_states, sparsity):
    mdp = random_decmdp(n_states, 2, 2, seed=seed, sparsity=sparsity)
    assert np.abs(mdp.transition.sum(axis=2) - 1).max() <= 1e-12
    assert np.all(np.abs(mdp.reward) <= 1.0)
    assert abs(mdp.initial_dist.sum() - 1) <= 1e-12


def test_low_sparsity_is_near_deterministic():
    maxima = np.concatenate([random_decmdp(3, 2, 2, seed=k, sparsity=0.01).transition.max(axis=2).ravel()
                             for k in range(100)])
    assert np.median(maxima) > 0.9


def test_random_decmdp_size_cap():
    with pytest.raises(EnvSizeError):
        random_decmdp(2000, 2, 3, seed=0)


# -- loading from dicts---------------------------------------------------------

def test_env_from_dict_types():
    assert env_from_dict({"type": "matrix_game", "payoff": "coordination"}).action_counts == (2, 2)
    assert env_from_dict({"type": "matrix_game", "payoff": [[1, 0, 2]]}, gamma=0.5).gamma == 0.5
    assert env_from_dict({"type": "grid_spread", "side": 2}).n_states == 16
    r = env_from_dict({"type": "random", "n_states": 3, "n_agents": 2, "action_counts": 2, "seed": 1})
    assert np.array_equal(r.transition, random_decmdp(3, 2, 2, seed=1).transition)
    back = env_from_dict({"type": "decmdp", **r.to_dict()})
    assert np.array_equal(back.reward, r.reward)


def test_env_from_dict_path(tmp_path):
    mdp = random_decmdp(2, 1, 3, seed=2)
    mdp.save(tmp_path / "m.json")
    assert isinstance(env_from_dict({"path": str(tmp_path / "m.json")}), DecMdp)


@pytest.mark.parametrize("spec,field", [
    ({"type": "maze"}, "type"),
    ({"type": "matrix_game"}, "payoff"),
    ({"type": "matrix_game", "payoff": "prisoner"}, "payoff"),
    ({"type": "grid_spread", "colour": 1}, "env"),
])
def test_env_from_dict_errors(spec, field):
    with pytest.raises(DecMdpError) as e:
        env_from_dict(spec)
    assert e.value.field == field
