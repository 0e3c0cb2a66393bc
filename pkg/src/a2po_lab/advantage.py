"""Sample-based advantage estimators on rollout batches.

All three estimators share one backward recursion

    A_t = delta_t + gamma * c_{t+1} * A_{t+1}

and differ only in the per-step trace weight ``c``: ``lambda`` for GAE,
``lambda * min(1, rho)`` for the preceding-agent correction (``rho`` is the
joint ratio of the already-updated agents) and the same truncation with the
full target joint ratio for the V-trace-style baseline.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decmdp import CorruptBatchError, JointPolicy, RolloutBatch

ESTIMATORS = ("gae", "preopc", "vtrace")


@dataclass(frozen=True, eq=False)
class ValueTable:
    v: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("value table must be a finite vector")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, n_states: int) -> "ValueTable":
        return cls(np.zeros(n_states))


@dataclass(frozen=True, eq=False)
class AdvantageField:
    """Per-step advantages aligned with a batch, plus value targets."""

    episode: np.ndarray
    t: np.ndarray
    advantage: np.ndarray
    value_target: np.ndarray
    estimator: str

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if not (np.all(np.isfinite(self.advantage)) and np.all(np.isfinite(self.value_target))):
            raise FloatingPointError("non-finite advantage or value target")

    def __len__(self) -> int:
        return self.advantage.size

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "t", "advantage", "value_target", "estimator"])
        for e, t, a, y in zip(self.episode, self.t, self.advantage, self.value_target):
            w.writerow([int(e), int(t), f"{a:.17g}", f"{y:.17g}", self.estimator])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def td_residuals(batch: RolloutBatch, v: ValueTable, gamma: float) -> np.ndarray:
    """``delta_t = r_t + gamma V(s_{t+1}) - V(s_t)``.

    Steps that end in an absorbing state use ``V(s_{t+1}) = 0``; steps cut by
    the horizon bootstrap from ``V(s_{t+1})``.
    """
    if batch.n_steps == 0:
        raise ValueError("empty batch")
    terminal = batch.done & ~batch.truncated
    v_next = np.where(terminal, 0.0, v.v[batch.next_states])
    return batch.rewards + gamma * v_next - v.v[batch.states]


def _backward(batch: RolloutBatch, delta: np.ndarray, trace: np.ndarray, gamma: float) -> np.ndarray:
    """Run ``A_t = delta_t + gamma * trace_{t+1} * A_{t+1}`` within each episode.

    Steps are scattered onto an ``(episodes, horizon)`` grid whose padding is
    zero, so the recursion stops at every episode boundary by itself.
    """
    n_ep = int(batch.episode.max()) + 1
    width = int(batch.t.max()) + 2
    d = np.zeros((n_ep, width))
    c = np.zeros((n_ep, width))
    d[batch.episode, batch.t] = delta
    c[batch.episode, batch.t] = trace
    adv = np.zeros((n_ep, width))
    for t in range(width - 2, -1, -1):
        adv[:, t] = d[:, t] + gamma * c[:, t + 1] * adv[:, t + 1]
    return adv[batch.episode, batch.t]


def _field(batch, v, delta, trace, gamma, tag) -> AdvantageField:
    adv = _backward(batch, delta, trace, gamma)
    return AdvantageField(
        episode=batch.episode,
        t=batch.t,
        advantage=adv,
        value_target=adv + v.v[batch.states],
        estimator=tag,
    )


def gae_from_residuals(batch: RolloutBatch, delta: np.ndarray, gamma: float, lam: float,
                       v: ValueTable | None = None) -> AdvantageField:
    """``A_t = sum_k (gamma lambda)^k delta_{t+k}`` within each episode.

    ``v`` is only needed for value targets; without it the targets equal the
    advantages (``V = 0``).
    """
    if v is None:
        v = ValueTable(np.zeros(int(batch.states.max()) + 1))
    return _field(batch, v, delta, np.full(delta.size, float(lam)), gamma, "gae")


def gae(batch: RolloutBatch, v: ValueTable, gamma: float, lam: float) -> AdvantageField:
    return gae_from_residuals(batch, td_residuals(batch, v, gamma), gamma, lam, v)


def step_ratios(batch: RolloutBatch, policy: JointPolicy, agents=None) -> np.ndarray:
    """Product over ``agents`` of ``policy^i(a^i|s) / behavior^i(a^i|s)``.

    ``agents=None`` means all agents. Denominators are the probabilities
    stored in the batch.
    """
    if np.any(batch.behavior_probs <= 0.0):
        raise CorruptBatchError("stored behavior probability is zero")
    if agents is None:
        agents = range(batch.n_agents)
    ratio = np.ones(batch.n_steps)
    for i in agents:
        ratio *= policy.agents[i].probs[batch.states, batch.actions[:, i]] / batch.behavior_probs[:, i]
    return ratio


def _check_base(batch: RolloutBatch, base: JointPolicy) -> None:
    if batch.behavior_policy_id != base.fingerprint():
        raise CorruptBatchError("batch was not collected under the given base policy")


def preopc(batch: RolloutBatch, v: ValueTable, base: JointPolicy, intermediate: JointPolicy,
           gamma: float, lam: float) -> AdvantageField:
    """Advantage of ``intermediate`` estimated from data of ``base``.

    Each trace weight is ``lambda * min(1, rho)`` with ``rho`` the joint ratio
    of ``intermediate`` over the stored behavior probabilities. Agents whose
    policy is unchanged contribute a ratio of exactly 1 and are skipped.
    """
    _check_base(batch, base)
    changed = [i for i, (p, q) in enumerate(zip(base.agents, intermediate.agents))
               if p is not q and not np.array_equal(p.logits, q.logits)]
    rho = step_ratios(batch, intermediate, changed)
    trace = lam * np.minimum(1.0, rho)
    return _field(batch, v, td_residuals(batch, v, gamma), trace, gamma, "preopc")


def vtrace_advantage(batch: RolloutBatch, v: ValueTable, base: JointPolicy, target: JointPolicy,
                     gamma: float, lam: float) -> AdvantageField:
    """Same recursion as :func:`preopc` with the ratio taken over all agents of ``target``."""
    _check_base(batch, base)
    changed = [i for i, (p, q) in enumerate(zip(base.agents, target.agents))
               if p is not q and not np.array_equal(p.logits, q.logits)]
    rho = step_ratios(batch, target, changed)
    trace = lam * np.minimum(1.0, rho)
    return _field(batch, v, td_residuals(batch, v, gamma), trace, gamma, "vtrace")


def value_mse(v: ValueTable, batch: RolloutBatch, targets: AdvantageField) -> float:
    return float(np.mean((v.v[batch.states] - targets.value_target) ** 2))


def fit_value(v: ValueTable, batch: RolloutBatch, targets: AdvantageField, epochs: int,
              lr: float) -> ValueTable:
    """Regress ``V(s_t)`` onto the value targets by diagonally scaled gradient descent.

    The loss ``mean (V(s_t) - y_t)^2`` separates over states; its gradient
    at state ``s`` is ``2 f_s (V(s) - ybar_s)`` with visit fraction ``f_s``
    and mean target ``ybar_s``. Each step divides by the curvature ``2 f_s``,
    so rarely visited states learn as fast as common ones:
    ``V(s) <- V(s) - lr (V(s) - ybar_s)``. The loss is non-increasing for
    ``0 < lr < 2`` and ``lr = 1`` reaches the minimiser in one epoch.
    Unvisited states keep their values.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(targets) != batch.n_steps:
        raise ValueError("targets do not match the batch")
    size = v.v.size
    counts = np.bincount(batch.states, minlength=size)
    sums = np.bincount(batch.states, weights=targets.value_target, minlength=size)
    seen = counts > 0
    mean_target = np.where(seen, sums / np.maximum(counts, 1), 0.0)
    vals = v.v.copy()
    for _ in range(epochs):
        vals[seen] -= lr * (vals[seen] - mean_target[seen])
    return ValueTable(vals)


def marginal_advantage_stats(batch: RolloutBatch, advantage: np.ndarray, action_counts,
                             weights: np.ndarray | None = None) -> np.ndarray:
    """Per-agent ``E_{s, a^i} |E[A | s, a^i]|``.

    For each agent the advantages are averaged within every ``(s, a^i)``
    group (marginalising the other agents' actions) and the absolute group
    means are averaged with the group weights.
    """
    if weights is None:
        weights = np.full(batch.n_steps, 1.0 / batch.n_steps)
    n_states = int(batch.states.max()) + 1
    out = np.empty(len(action_counts))
    for i, m in enumerate(action_counts):
        key = batch.states * m + batch.actions[:, i]
        w = np.bincount(key, weights=weights, minlength=n_states * m)
        s = np.bincount(key, weights=weights * advantage, minlength=n_states * m)
        seen = w > 0
        out[i] = np.abs(s[seen]).sum() / w.sum()
    return out
