import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from a2po_lab import oracle
from a2po_lab.decmdp import (CorruptBatchError, DecMdp, DecMdpError, JointPolicy, TabularPolicy,
                             discounted_returns, empirical_return, joint_prob, rollout)
from a2po_lab.environments import random_decmdp

from conftest import random_instance


def single_state(reward=1.0, gamma=0.9, n_actions=1):
    return DecMdp(np.ones((1, n_actions, 1)), np.full((1, n_actions), reward), gamma, [1.0], (n_actions,))


def test_joint_prob_product_of_uniforms():
    jp = JointPolicy.uniform(3, (2, 2))
    for s in range(3):
        for a in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            assert joint_prob(jp, s, a) == 0.25


def test_joint_prob_saturated_softmax():
    jp = JointPolicy((TabularPolicy(np.array([[20.0, -20.0]])),))
    assert joint_prob(jp, 0, (0,)) >= 1 - 1e-8


def test_joint_prob_matches_independent_product():
    rng = np.random.default_rng(5)
    logits = [rng.standard_normal((4, 3)), rng.standard_normal((4, 2))]
    jp = JointPolicy(tuple(TabularPolicy(x) for x in logits))
    for s in range(4):
        for a0 in range(3):
            for a1 in range(2):
                p0 = np.exp(logits[0][s, a0]) / np.exp(logits[0][s]).sum()
                p1 = np.exp(logits[1][s, a1]) / np.exp(logits[1][s]).sum()
                assert abs(joint_prob(jp, s, (a0, a1)) - p0 * p1) < 1e-12
                # mixed-radix layout: agent 0 is the most significant digit
                assert abs(jp.joint_probs[s, a0 * 2 + a1] - p0 * p1) < 1e-12


@pytest.mark.parametrize("s,a", [(5, (0, 0)), (0, (2, 0)), (0, (0,)), (-1, (0, 0))])
def test_joint_prob_index_errors(s, a):
    with pytest.raises(IndexError):
        joint_prob(JointPolicy.uniform(3, (2, 2)), s, a)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5), st.lists(st.integers(1, 4), min_size=1, max_size=3),
       st.floats(0.1, 30.0))
def test_policies_positive_and_normalized(seed, n_states, counts, scale):
    jp = JointPolicy.random(n_states, counts, np.random.default_rng(seed), scale)
    for p in jp.agents:
        assert np.all(p.probs > 0)
        assert np.abs(p.probs.sum(axis=1) - 1).max() < 1e-12
    assert np.abs(jp.joint_probs.sum(axis=1) - 1).max() < 1e-10


def test_joint_index_round_trip():
    mdp = random_decmdp(2, 3, (2, 3, 4), seed=0)
    joint = np.arange(mdp.n_joint_actions)
    actions = mdp.decode(joint)
    assert actions.shape == (24, 3)
    assert np.array_equal(mdp.joint_index(actions), joint)
    assert mdp.joint_index([1, 2, 3]) == 1 * 12 + 2 * 4 + 3


def test_validation_rejects_bad_rows_and_gamma():
    with pytest.raises(DecMdpError) as e:
        DecMdp(np.full((1, 1, 1), 0.5), np.zeros((1, 1)), 0.9, [1.0], (1,))
    assert e.value.field == "transition"
    with pytest.raises(DecMdpError) as e:
        DecMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0, [1.0], (1,))
    assert e.value.field == "gamma"
    with pytest.raises(DecMdpError) as e:
        DecMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 0.5, [0.9], (1,))
    assert e.value.field == "initial_dist"
    with pytest.raises(DecMdpError) as e:
        DecMdp(np.ones((1, 2, 1)), np.zeros((1, 1)), 0.5, [1.0], (2,))
    assert e.value.field == "reward"


def test_absorbing_state_must_self_loop():
    t = np.zeros((2, 1, 2))
    t[:, 0, 1] = 1.0
    DecMdp(t, np.zeros((2, 1)), 0.9, [1.0, 0.0], (1,), absorbing=[False, True])
    with pytest.raises(DecMdpError):
        DecMdp(t, np.array([[0.0], [1.0]]), 0.9, [1.0, 0.0], (1,), absorbing=[False, True])


def test_json_round_trip(tmp_path):
    mdp = random_decmdp(3, 2, (2, 3), seed=4)
    path = tmp_path / "mdp.json"
    mdp.save(path)
    d = json.loads(path.read_text())
    assert set(d) == {"n_states", "action_counts", "transition", "reward", "gamma", "initial_dist"}
    back = DecMdp.load(path)
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert back.action_counts == mdp.action_counts and back.gamma == mdp.gamma


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d.pop("reward"), "reward"),
    (lambda d: d.update(gamma="x"), "gamma"),
    (lambda d: d.update(initial_dist=[1.0]), "initial_dist"),
    (lambda d: d.update(transition=[[["a"]]]), "transition"),
])
def test_json_errors_name_field(mutate, field):
    d = random_decmdp(2, 1, 2, seed=0).to_dict()
    mutate(d)
    with pytest.raises(DecMdpError) as e:
        DecMdp.from_dict(d)
    assert e.value.field == field


def test_rollout_degenerate_chain():
    batch = rollout(single_state(1.0), JointPolicy.uniform(1, (1,)), 3, 4, seed=0)
    assert batch.n_episodes == 4
    for ep in batch.episodes:
        assert list(ep["rewards"]) == [1.0, 1.0, 1.0]
        assert list(ep["done"]) == [False, False, True]


def test_rollout_determinism_bytes():
    mdp, base, _, _ = random_instance(1)
    a = rollout(mdp, base, 10, 50, seed=7)
    b = rollout(mdp, base, 10, 50, seed=7)
    assert a.to_csv() == b.to_csv()
    c = rollout(mdp, base, 10, 50, seed=8)
    assert a.to_csv() != c.to_csv()


def test_rollout_invariants_and_behavior_probs():
    t = np.zeros((3, 2, 3))
    t[0, :, 1] = 1.0
    t[1, 0, 2] = 1.0
    t[1, 1, 0] = 1.0
    t[2, :, 2] = 1.0
    r = np.array([[1.0, 0.0], [0.5, 0.2], [0.0, 0.0]])
    mdp = DecMdp(t, r, 0.9, [1.0, 0.0, 0.0], (2,), absorbing=[False, False, True])
    jp = JointPolicy.random(3, (2,), np.random.default_rng(0))
    batch = rollout(mdp, jp, horizon=6, n_episodes=200, seed=3)
    batch.check_behavior(jp)
    lengths = batch.episode_lengths
    assert lengths.max() <= 6
    done_per_episode = np.bincount(batch.episode, weights=batch.done)
    assert np.all(done_per_episode == 1)
    # terminal steps are exactly those entering the absorbing state
    terminal = batch.done & ~batch.truncated
    assert np.array_equal(terminal, mdp.absorbing[batch.next_states])
    assert not np.any(mdp.absorbing[batch.states])
    with pytest.raises(CorruptBatchError):
        batch.check_behavior(JointPolicy.uniform(3, (2,)))


def test_rollout_csv_header():
    mdp, base, _, _ = random_instance(2)
    text = rollout(mdp, base, 3, 2, seed=0).to_csv()
    assert text.splitlines()[0] == "episode,t,state,a_0,a_1,reward,logp_0,logp_1,done"


def test_visit_frequencies_match_oracle_visitation():
    mdp, base, _, _ = random_instance(3)
    g = mdp.gamma
    batch = rollout(mdp, base, horizon=150, n_episodes=1000, seed=11)
    # discount-weighted state frequencies estimate d^pi; 1.5e5 steps in total
    w = (1 - g) * g ** batch.t
    freq = np.bincount(batch.states, weights=w, minlength=mdp.n_states) / batch.n_episodes
    exact = oracle.exact_eval(mdp, base).visitation
    assert np.abs(freq - exact).max() < 0.02


def test_empirical_return_hand_cases():
    batch = rollout(single_state(0.0), JointPolicy.uniform(1, (1,)), 5, 3, seed=0)
    assert empirical_return(batch, 0.9) == 0.0
    batch = rollout(single_state(1.0), JointPolicy.uniform(1, (1,)), 3, 1, seed=0)
    batch.rewards[:] = [1.0, 0.0, 0.0]
    assert empirical_return(batch, 0.9) == 1.0
    assert discounted_returns(batch, 0.9).shape == (1,)


def test_empirical_return_empty_batch():
    batch = rollout(single_state(), JointPolicy.uniform(1, (1,)), 1, 1, seed=0)
    mask = np.zeros(batch.n_steps, dtype=bool)
    for name in ("episode", "t", "states", "actions", "rewards", "behavior_probs", "done", "truncated",
                 "next_states"):
        setattr(batch, name, getattr(batch, name)[mask])
    with pytest.raises(ValueError):
        empirical_return(batch, 0.9)


def test_empirical_return_converges_to_oracle():
    mdp, base, _, _ = random_instance(4)
    g = mdp.gamma
    batch = rollout(mdp, base, horizon=200, n_episodes=10_000, seed=5)
    returns = discounted_returns(batch, g)
    se = returns.std() / np.sqrt(returns.size)
    exact = oracle.expected_return(mdp, base)
    truncation = g ** 200 * np.abs(mdp.reward).max() / (1 - g)
    assert abs(returns.mean() - exact) <= 3 * se + truncation
