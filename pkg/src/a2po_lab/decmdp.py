"""Finite DEC-MDPs, tabular softmax policies and rollout collection.

Joint actions are flattened with a mixed-radix code in which agent 0 is the
most significant digit, i.e. ``np.ravel_multi_index(actions, action_counts)``.
Every tensor indexed by a joint action (transition, reward, joint policy
probabilities) uses that same flattening.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_TOL = 1e-12


class DecMdpError(ValueError):
    """Raised when a DEC-MDP (or its JSON encoding) is malformed.

    ``field`` names the offending entry so that CLI callers can report it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CorruptBatchError(ValueError):
    pass


def _readonly(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=float, copy=True)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class DecMdp:
    """A finite, fully observed DEC-MDP with a shared reward.

    Attributes:
        transition: ``T[s, joint_a, s']``.
        reward: ``r[s, joint_a]``.
        gamma: discount in ``[0, 1)``.
        initial_dist: distribution of ``s_0``.
        action_counts: number of actions of each agent.
        absorbing: optional mask of absorbing states; they must self-loop
            with zero reward and end an episode when entered.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    action_counts: tuple[int, ...]
    absorbing: np.ndarray | None = None

    def __post_init__(self):
        counts = tuple(int(c) for c in self.action_counts)
        object.__setattr__(self, "action_counts", counts)
        if not counts or min(counts) < 1:
            raise DecMdpError("action_counts", "need at least one agent with >= 1 action")
        n_joint = int(np.prod(counts))
        try:
            transition = np.asarray(self.transition, dtype=float)
            reward = np.asarray(self.reward, dtype=float)
            initial = np.asarray(self.initial_dist, dtype=float)
        except (TypeError, ValueError) as exc:
            raise DecMdpError("transition/reward/initial_dist", f"not numeric: {exc}") from None
        if initial.ndim != 1 or initial.size < 1:
            raise DecMdpError("initial_dist", "must be a non-empty vector")
        n_states = initial.size
        if transition.size != n_states * n_joint * n_states:
            raise DecMdpError(
                "transition",
                f"expected {n_states}x{n_joint}x{n_states} entries, got shape {transition.shape}",
            )
        if reward.size != n_states * n_joint:
            raise DecMdpError("reward", f"expected {n_states}x{n_joint} entries, got shape {reward.shape}")
        transition = transition.reshape(n_states, n_joint, n_states)
        reward = reward.reshape(n_states, n_joint)

        if not np.all(np.isfinite(transition)) or np.any(transition < 0):
            raise DecMdpError("transition", "entries must be finite and non-negative")
        row_err = np.abs(transition.sum(axis=2) - 1.0).max()
        if row_err > PROB_TOL:
            raise DecMdpError("transition", f"rows must sum to 1 (max error {row_err:.3g})")
        if not np.all(np.isfinite(reward)):
            raise DecMdpError("reward", "entries must be finite")
        if not np.all(np.isfinite(initial)) or np.any(initial < 0):
            raise DecMdpError("initial_dist", "entries must be finite and non-negative")
        if abs(initial.sum() - 1.0) > PROB_TOL:
            raise DecMdpError("initial_dist", f"must sum to 1 (sum {initial.sum():.17g})")
        gamma = float(self.gamma)
        if not 0.0 <= gamma < 1.0:
            raise DecMdpError("gamma", f"must lie in [0, 1), got {gamma}")

        if self.absorbing is None:
            absorbing = np.zeros(n_states, dtype=bool)
        else:
            absorbing = np.asarray(self.absorbing, dtype=bool).reshape(-1)
            if absorbing.size != n_states:
                raise DecMdpError("absorbing", f"expected {n_states} flags")
            for s in np.flatnonzero(absorbing):
                if np.any(transition[s, :, s] != 1.0) or np.any(reward[s] != 0.0):
                    raise DecMdpError("absorbing", f"state {s} must self-loop with zero reward")
        absorbing = absorbing.copy()
        absorbing.setflags(write=False)

        object.__setattr__(self, "transition", _readonly(transition))
        object.__setattr__(self, "reward", _readonly(reward))
        object.__setattr__(self, "initial_dist", _readonly(initial))
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "absorbing", absorbing)

    @property
    def n_states(self) -> int:
        return self.initial_dist.size

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.action_counts))

    def joint_index(self, actions) -> np.ndarray | int:
        """Flatten per-agent actions (last axis = agents) into joint indices."""
        actions = np.asarray(actions)
        idx = np.ravel_multi_index(tuple(np.moveaxis(actions, -1, 0)), self.action_counts)
        return int(idx) if np.ndim(idx) == 0 else idx

    def decode(self, joint) -> np.ndarray:
        """Inverse of :meth:`joint_index`; returns ``(..., n_agents)``."""
        return np.stack(np.unravel_index(joint, self.action_counts), axis=-1)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "n_states": self.n_states,
            "action_counts": list(self.action_counts),
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
        }
        if self.absorbing.any():
            d["absorbing"] = self.absorbing.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecMdp":
        if not isinstance(d, dict):
            raise DecMdpError("<root>", "expected a JSON object")
        for key in ("n_states", "action_counts", "transition", "reward", "gamma", "initial_dist"):
            if key not in d:
                raise DecMdpError(key, "missing required field")
        try:
            n_states = int(d["n_states"])
        except (TypeError, ValueError):
            raise DecMdpError("n_states", "must be an integer") from None
        if not isinstance(d["action_counts"], list):
            raise DecMdpError("action_counts", "must be a list of integers")
        try:
            gamma = float(d["gamma"])
        except (TypeError, ValueError):
            raise DecMdpError("gamma", "must be a number") from None
        for key in ("transition", "reward", "initial_dist"):
            try:
                np.asarray(d[key], dtype=float)
            except (TypeError, ValueError):
                raise DecMdpError(key, "must be a (nested) array of numbers") from None
        if len(d["initial_dist"]) != n_states:
            raise DecMdpError("initial_dist", f"expected {n_states} entries")
        return cls(
            transition=d["transition"],
            reward=d["reward"],
            gamma=gamma,
            initial_dist=d["initial_dist"],
            action_counts=tuple(d["action_counts"]),
            absorbing=d.get("absorbing"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DecMdp":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DecMdpError("<json>", str(exc)) from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "DecMdp":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Softmax policy of one agent, ``pi(a|s) = softmax(logits[s])[a]``."""

    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float)
        if logits.ndim != 2:
            raise ValueError(f"logits must be (n_states, n_actions), got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        object.__setattr__(self, "logits", _readonly(logits))

    @cached_property
    def probs(self) -> np.ndarray:
        p = _softmax(self.logits)
        p.setflags(write=False)
        return p

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.zeros((n_states, n_actions)))


@dataclass(frozen=True, eq=False)
class JointPolicy:
    """Product of per-agent tabular policies."""

    agents: tuple[TabularPolicy, ...]

    def __post_init__(self):
        agents = tuple(self.agents)
        if not agents:
            raise ValueError("a joint policy needs at least one agent")
        if len({p.n_states for p in agents}) != 1:
            raise ValueError("all agents must share the state space")
        object.__setattr__(self, "agents", agents)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_states(self) -> int:
        return self.agents[0].n_states

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(p.n_actions for p in self.agents)

    @cached_property
    def joint_probs(self) -> np.ndarray:
        """``(n_states, n_joint)`` table of product probabilities."""
        out = self.agents[0].probs
        for p in self.agents[1:]:
            out = (out[:, :, None] * p.probs[:, None, :]).reshape(self.n_states, -1)
        out = np.array(out)
        out.setflags(write=False)
        return out

    def replace(self, agent: int, policy: TabularPolicy) -> "JointPolicy":
        agents = list(self.agents)
        agents[agent] = policy
        return JointPolicy(tuple(agents))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.agents:
            h.update(np.ascontiguousarray(p.logits).tobytes())
            h.update(str(p.logits.shape).encode())
        return h.hexdigest()[:16]

    @classmethod
    def uniform(cls, n_states: int, action_counts: Sequence[int]) -> "JointPolicy":
        return cls(tuple(TabularPolicy.uniform(n_states, a) for a in action_counts))

    @classmethod
    def random(cls, n_states: int, action_counts: Sequence[int], rng: np.random.Generator,
               scale: float = 1.0) -> "JointPolicy":
        return cls(tuple(TabularPolicy(scale * rng.standard_normal((n_states, a)))
                         for a in action_counts))


def check_compatible(mdp: DecMdp, jp: JointPolicy) -> None:
    if jp.n_states != mdp.n_states or jp.action_counts != mdp.action_counts:
        raise ValueError(
            f"policy shape (states={jp.n_states}, actions={jp.action_counts}) does not match "
            f"MDP (states={mdp.n_states}, actions={mdp.action_counts})"
        )


def joint_prob(jp: JointPolicy, s: int, a: Sequence[int]) -> float:
    """Probability of the joint action ``a`` (one index per agent) in state ``s``."""
    if len(a) != jp.n_agents:
        raise IndexError(f"expected {jp.n_agents} action indices, got {len(a)}")
    if not 0 <= s < jp.n_states:
        raise IndexError(f"state {s} out of range")
    prob = 1.0
    for i, (policy, ai) in enumerate(zip(jp.agents, a)):
        if not 0 <= ai < policy.n_actions:
            raise IndexError(f"action {ai} out of range for agent {i}")
        prob *= float(policy.probs[s, ai])
    return prob


@dataclass(eq=False)
class RolloutBatch:
    """Flat, episode-major record of trajectories collected under one joint policy.

    ``done`` marks the final step of each episode. ``truncated`` is true when
    that final step was cut by the horizon rather than by entering an
    absorbing state; advantage estimators bootstrap from ``next_states`` there.
    """

    episode: np.ndarray
    t: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_probs: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    next_states: np.ndarray
    behavior_policy_id: str
    horizon: int
    n_agents: int = field(init=False)

    def __post_init__(self):
        self.n_agents = self.actions.shape[1]

    @property
    def n_steps(self) -> int:
        return self.states.size

    @property
    def n_episodes(self) -> int:
        return int(self.done.sum())

    @property
    def episode_lengths(self) -> np.ndarray:
        return np.bincount(self.episode, minlength=self.n_episodes)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_steps, 1.0 / self.n_steps)

    @property
    def episodes(self) -> list[dict[str, np.ndarray]]:
        bounds = np.concatenate([[0], np.cumsum(self.episode_lengths)])
        keys = ("states", "actions", "rewards", "behavior_probs", "done")
        return [{k: getattr(self, k)[lo:hi] for k in keys} for lo, hi in zip(bounds[:-1], bounds[1:])]

    def check_behavior(self, jp: JointPolicy, tol: float = PROB_TOL) -> None:
        """Raise unless stored probabilities match ``jp`` at the stored (s, a^i)."""
        for i, policy in enumerate(jp.agents):
            ref = policy.probs[self.states, self.actions[:, i]]
            if np.any(np.abs(ref - self.behavior_probs[:, i]) > tol):
                raise CorruptBatchError(f"behavior probabilities of agent {i} do not match policy")

    def to_csv(self, path=None) -> str:
        """Serialize as ``episode,t,state,a_0..,reward,logp_0..,done``.

        Floats are written with 17 significant digits so the text is an exact,
        reproducible image of the batch.
        """
        n = self.n_agents
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "t", "state", *[f"a_{i}" for i in range(n)], "reward",
                    *[f"logp_{i}" for i in range(n)], "done"])
        logp = np.log(self.behavior_probs)
        for k in range(self.n_steps):
            w.writerow([int(self.episode[k]), int(self.t[k]), int(self.states[k]),
                        *[int(x) for x in self.actions[k]], f"{self.rewards[k]:.17g}",
                        *[f"{x:.17g}" for x in logp[k]], int(self.done[k])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _sample_categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def rollout(mdp: DecMdp, jp: JointPolicy, horizon: int, n_episodes: int, seed) -> RolloutBatch:
    """Sample ``n_episodes`` episodes of at most ``horizon`` steps.

    All uniforms are drawn up front from one generator as an
    ``(n_episodes, horizon, n_agents + 1)`` block, so episode ``e`` is a pure
    function of ``(seed, e)`` and the batch is bit-reproducible.
    """
    check_compatible(mdp, jp)
    if horizon < 1 or n_episodes < 1:
        raise ValueError("horizon and n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    n = mdp.n_agents
    u0 = rng.random(n_episodes)
    u = rng.random((n_episodes, horizon, n + 1))

    states = np.empty((n_episodes, horizon), dtype=np.int64)
    next_states = np.empty_like(states)
    actions = np.empty((n_episodes, horizon, n), dtype=np.int64)
    probs = np.empty((n_episodes, horizon, n))
    rewards = np.empty((n_episodes, horizon))
    lengths = np.full(n_episodes, horizon, dtype=np.int64)
    terminal = np.zeros(n_episodes, dtype=bool)

    agent_cdfs = [np.cumsum(p.probs, axis=1) for p in jp.agents]
    trans_cdf = np.cumsum(mdp.transition, axis=2)
    s = _sample_categorical(np.broadcast_to(np.cumsum(mdp.initial_dist), (n_episodes, mdp.n_states)), u0)
    alive = np.ones(n_episodes, dtype=bool)
    for t in range(horizon):
        for i in range(n):
            a_i = _sample_categorical(agent_cdfs[i][s], u[:, t, i])
            actions[:, t, i] = a_i
            probs[:, t, i] = jp.agents[i].probs[s, a_i]
        ja = mdp.joint_index(actions[:, t, :])
        s_next = _sample_categorical(trans_cdf[s, ja], u[:, t, n])
        states[:, t] = s
        next_states[:, t] = s_next
        rewards[:, t] = mdp.reward[s, ja]
        ends = alive & mdp.absorbing[s_next]
        lengths[ends] = t + 1
        terminal |= ends
        alive &= ~ends
        s = s_next

    mask = np.arange(horizon)[None, :] < lengths[:, None]
    done = np.zeros((n_episodes, horizon), dtype=bool)
    done[np.arange(n_episodes), lengths - 1] = True
    truncated = done & ~terminal[:, None]
    return RolloutBatch(
        episode=np.broadcast_to(np.arange(n_episodes)[:, None], mask.shape)[mask],
        t=np.broadcast_to(np.arange(horizon)[None, :], mask.shape)[mask],
        states=states[mask],
        actions=actions[mask],
        rewards=rewards[mask],
        behavior_probs=probs[mask],
        done=done[mask],
        truncated=truncated[mask],
        next_states=next_states[mask],
        behavior_policy_id=jp.fingerprint(),
        horizon=horizon,
    )


def discounted_returns(batch: RolloutBatch, gamma: float) -> np.ndarray:
    """Per-episode ``sum_t gamma^t r_t``."""
    return np.bincount(batch.episode, weights=batch.rewards * gamma ** batch.t,
                       minlength=batch.n_episodes)


def empirical_return(batch: RolloutBatch, gamma: float) -> float:
    if batch.n_steps == 0:
        raise ValueError("empty batch")
    return float(discounted_returns(batch, gamma).mean())
