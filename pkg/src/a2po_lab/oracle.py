"""Exact dynamic-programming ground truth.

Everything here is computed with dense linear solves on the enumerated
MDP, so it is restricted to instances with
``n_states * n_joint_actions <= ORACLE_CAP``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .decmdp import DecMdp, JointPolicy, TabularPolicy, check_compatible

ORACLE_CAP = 10_000

ALGORITHMS = ("naive", "rpisa_ppo", "mappo", "coppo", "happo", "a2po")


class OracleSizeError(ValueError):
    pass


def check_size(mdp: DecMdp) -> None:
    size = mdp.n_states * mdp.n_joint_actions
    if size > ORACLE_CAP:
        raise OracleSizeError(f"n_states * n_joint_actions = {size} exceeds oracle cap {ORACLE_CAP}")


@dataclass(frozen=True, eq=False)
class ExactEval:
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray
    visitation: np.ndarray
    expected_return: float
    policy: np.ndarray  # joint action probabilities, (n_states, n_joint)


def state_kernel(mdp: DecMdp, joint_probs: np.ndarray) -> np.ndarray:
    return np.einsum("sj,sjt->st", joint_probs, mdp.transition)


def exact_eval(mdp: DecMdp, jp: JointPolicy) -> ExactEval:
    check_compatible(mdp, jp)
    check_size(mdp)
    pi = jp.joint_probs
    g = mdp.gamma
    eye = np.eye(mdp.n_states)
    m = eye - g * state_kernel(mdp, pi)
    v = np.linalg.solve(m, (pi * mdp.reward).sum(axis=1))
    q = mdp.reward + g * mdp.transition @ v
    d = (1.0 - g) * np.linalg.solve(m.T, mdp.initial_dist)
    return ExactEval(
        v=v,
        q=q,
        adv=q - v[:, None],
        visitation=d,
        expected_return=float(mdp.initial_dist @ v),
        policy=pi,
    )


def expected_return(mdp: DecMdp, jp: JointPolicy) -> float:
    return exact_eval(mdp, jp).expected_return


def optimal_values(mdp: DecMdp, tol: float = 1e-12, max_iter: int = 100_000):
    """Value iteration over joint actions (centralised control).

    Returns ``(v_star, J_star, greedy_joint_action)``. With full state
    observability a deterministic joint action per state is representable by
    a product of per-agent policies, so ``J_star`` is also the best a DEC-MDP
    team can achieve.
    """
    check_size(mdp)
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = mdp.reward + mdp.gamma * mdp.transition @ v
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    return v, float(mdp.initial_dist @ v), q.argmax(axis=1)


def tv_max(p: TabularPolicy, q: TabularPolicy) -> float:
    """``max_s  1/2 sum_a |p(a|s) - q(a|s)|``."""
    if p.logits.shape != q.logits.shape:
        raise ValueError(f"shape mismatch: {p.logits.shape} vs {q.logits.shape}")
    return float(0.5 * np.abs(p.probs - q.probs).sum(axis=1).max())


def joint_tv_max(p: JointPolicy, q: JointPolicy) -> float:
    if p.action_counts != q.action_counts or p.n_states != q.n_states:
        raise ValueError("joint policies have different shapes")
    return float(0.5 * np.abs(p.joint_probs - q.joint_probs).sum(axis=1).max())


def performance_difference(mdp: DecMdp, jp_old: JointPolicy, jp_new: JointPolicy) -> float:
    """``1/(1-gamma) E_{s~d^new, a~new}[A^old(s, a)]``, which equals ``J(new) - J(old)``."""
    old = exact_eval(mdp, jp_old)
    new = exact_eval(mdp, jp_new)
    inner = (new.policy * old.adv).sum(axis=1)
    return float(new.visitation @ inner / (1.0 - mdp.gamma))


def transition_shift(mdp: DecMdp, jp_from: JointPolicy, jp_to: JointPolicy) -> np.ndarray:
    """``Delta[s, s'] = sum_a T(s'|s, a) (to(a|s) - from(a|s))``; rows sum to zero."""
    check_compatible(mdp, jp_from)
    check_compatible(mdp, jp_to)
    return state_kernel(mdp, jp_to.joint_probs - jp_from.joint_probs)


def exact_corrected_advantage(mdp: DecMdp, base: JointPolicy, correction_probs: np.ndarray,
                              lam: float, v: np.ndarray) -> np.ndarray:
    """Expected value of the truncated-ratio advantage recursion.

    For a trajectory following ``base`` from ``(s_t, a_t) = (s, a)``,
    returns ``E[delta_t + sum_{k>=1} gamma^k prod_{j<=k} c_{t+j} delta_{t+k}]``
    with ``c(s, a) = lam * min(1, correction(a|s) / base(a|s))``. Because
    ``c`` is Markov in ``(s, a)`` the weighted tail obeys
    ``U = b + gamma P_c U`` and is obtained by one linear solve.
    Entering an absorbing state ends the episode (value 0, no tail).
    """
    g = mdp.gamma
    pi = base.joint_probs
    cont = mdp.transition * (~mdp.absorbing)[None, None, :]
    v_next = np.where(mdp.absorbing, 0.0, v)
    delta = mdp.reward + g * mdp.transition @ v_next - v[:, None]
    c = lam * np.minimum(1.0, correction_probs / pi)
    w = pi * c
    p_c = np.einsum("sj,sjt->st", w, cont)
    b = (w * delta).sum(axis=1)
    u = np.linalg.solve(np.eye(mdp.n_states) - g * p_c, b)
    return delta + g * cont @ u


def exact_preopc_advantage(mdp: DecMdp, base: JointPolicy, intermediate: JointPolicy, lam: float,
                           v: np.ndarray | None = None) -> np.ndarray:
    """Exact expectation of the preceding-agent corrected advantage.

    ``v`` defaults to the exact value function of ``intermediate`` (the
    critic the value regression is chasing).
    """
    check_size(mdp)
    if v is None:
        v = exact_eval(mdp, intermediate).v
    return exact_corrected_advantage(mdp, base, intermediate.joint_probs, lam, np.asarray(v, float))


def exact_gae_advantage(mdp: DecMdp, base: JointPolicy, lam: float, v: np.ndarray) -> np.ndarray:
    """Expected GAE(lambda) advantage on ``base`` data with critic ``v``."""
    return exact_corrected_advantage(mdp, base, base.joint_probs, lam, np.asarray(v, float))


def exact_preopc_error(mdp: DecMdp, jp_base: JointPolicy, jp_intermediate: JointPolicy, lam: float,
                       v: np.ndarray | None = None) -> float:
    """``max_{s,a} |A^{base, intermediate}(s, a) - A^{intermediate}(s, a)|``."""
    target = exact_eval(mdp, jp_intermediate)
    if v is None:
        v = target.v
    est = exact_preopc_advantage(mdp, jp_base, jp_intermediate, lam, v)
    return float(np.abs(est - target.adv).max())


def intermediate_policies(base: JointPolicy, target: JointPolicy, order: Sequence[int]) -> list[JointPolicy]:
    """``[pi_bar^0 = base, pi_bar^1, ..., pi_bar^n = target]`` along ``order``."""
    out = [base]
    cur = base
    for agent in order:
        cur = cur.replace(agent, target.agents[agent])
        out.append(cur)
    return out


def _gap_term(gamma: float, tv_sum: float) -> float:
    # sum_t gamma^t (1 - (1 - x)^t) = 1/(1-gamma) - 1/(1-gamma(1-x))
    return 1.0 / (1.0 - gamma) - 1.0 / (1.0 - gamma * (1.0 - tv_sum))


@dataclass
class BoundReport:
    """Exact bound ingredients and evaluated monotonic bounds.

    Per-agent vectors are indexed by agent id; ``order`` gives the update
    order. ``bounds`` holds joint bounds, ``gaps`` the matching exact
    left-hand sides ``|J - surrogate|``.
    """

    gamma: float
    lam: float
    order: list[int]
    epsilon: float
    epsilon_base: float
    epsilon_per_agent: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    bounds: dict[str, float]
    loose_bounds: dict[str, float]
    single_agent_bounds: dict[str, np.ndarray]
    single_agent_loose_bounds: dict[str, np.ndarray]
    gaps: dict[str, float]
    single_agent_gaps: dict[str, np.ndarray]
    a2po_terms: np.ndarray
    incremental: np.ndarray
    ordering_condition: bool
    strict_ordering_condition: bool
    returns: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        def conv(x):
            if isinstance(x, np.ndarray):
                return x.tolist()
            if isinstance(x, dict):
                return {k: conv(v) for k, v in x.items()}
            if isinstance(x, (np.floating, np.bool_)):
                return x.item()
            return x
        return {k: conv(v) for k, v in asdict(self).items()}

    def consistent(self, tol: float = 1e-12) -> bool:
        """The a2po joint bound is the per-agent first terms plus the xi term."""
        g = self.gamma
        rebuilt = float(self.a2po_terms.sum() + self.xi.sum() / (1.0 - g))
        return abs(rebuilt - self.bounds["a2po"]) <= tol * max(1.0, abs(rebuilt))


def bound_report(mdp: DecMdp, jp_base: JointPolicy, jp_target: JointPolicy,
                 update_order: Sequence[int] | None = None, lam: float = 0.95) -> BoundReport:
    check_compatible(mdp, jp_base)
    check_compatible(mdp, jp_target)
    n = mdp.n_agents
    order = list(range(n)) if update_order is None else [int(i) for i in update_order]
    if sorted(order) != list(range(n)):
        raise ValueError(f"update_order must be a permutation of 0..{n - 1}, got {order}")
    g = mdp.gamma
    h = 1.0 / (1.0 - g)

    chain = intermediate_policies(jp_base, jp_target, order)
    evals = [exact_eval(mdp, p) for p in chain]
    base = evals[0]
    d_base = base.visitation
    returns = np.array([e.expected_return for e in evals])

    alpha = np.array([tv_max(jp_base.agents[i], jp_target.agents[i]) for i in range(n)])
    eps_pos = np.array([np.abs(evals[k].adv).max() for k in range(n)])
    eps = float(eps_pos.max())
    eps_base = float(eps_pos[0])

    pre_adv = [exact_preopc_advantage(mdp, jp_base, chain[k], lam, evals[k].v) for k in range(n)]
    xi_pos = np.array([np.abs(pre_adv[k] - evals[k].adv).max() for k in range(n)])

    alpha_pos = alpha[order]
    prefix = np.cumsum(alpha_pos)  # sum over e^i and i
    total = float(alpha.sum())

    # exact surrogate gaps along the chain
    def expect(d, pol, adv):
        return float(d @ (pol * adv).sum(axis=1))

    a2po_gain = np.array([expect(d_base, evals[k + 1].policy, pre_adv[k]) for k in range(n)])
    single_gap_a2po = np.abs(returns[1:] - returns[:-1] - h * a2po_gain)
    naive_gain = np.array([expect(d_base, evals[k + 1].policy, base.adv) for k in range(n)])
    single_gap_naive = np.abs(returns[1:] - returns[:-1] - h * naive_gain)
    rpisa_gain = np.array([expect(evals[k].visitation, evals[k + 1].policy, evals[k].adv) for k in range(n)])
    single_gap_rpisa = np.abs(returns[1:] - returns[:-1] - h * rpisa_gain)

    j_delta = returns[-1] - returns[0]
    gaps = {
        "a2po": float(abs(j_delta - h * a2po_gain.sum())),
        "naive": float(abs(j_delta - h * naive_gain.sum())),
        "rpisa_ppo": float(abs(j_delta - h * rpisa_gain.sum())),
        "coppo": float(abs(j_delta - h * expect(d_base, evals[-1].policy, base.adv))),
    }
    gaps["happo"] = gaps["coppo"]
    mappo_gain = 0.0
    for i in range(n):
        mixed = jp_base.replace(i, jp_target.agents[i]).joint_probs
        mappo_gain += expect(d_base, mixed, base.adv)
    gaps["mappo"] = float(abs(j_delta - h * mappo_gain))

    # bound formulas, per update position
    gap_prefix = np.array([_gap_term(g, x) for x in prefix])
    gap_self = np.array([_gap_term(g, a) for a in alpha_pos])
    preceding = prefix - alpha_pos
    a2po_single = 4 * eps_pos * alpha_pos * gap_prefix + h * xi_pos
    a2po_single_loose = 4 * g * eps_pos / (1 - g) ** 2 * alpha_pos * prefix + h * xi_pos
    naive_single = 4 * eps_pos * alpha_pos * gap_prefix + h * (4 * alpha_pos * eps_pos + 2 * preceding * eps_base)
    naive_eq1 = (2 * eps_base * alpha_pos * (3 * h - 2.0 / (1 - g * (1 - prefix)))
                 + 2 * eps_base * preceding * h)
    rpisa_single = 4 * eps_pos * alpha_pos * gap_self
    a2po_terms = 4 * eps * alpha_pos * gap_prefix

    bounds = {
        "naive": float(naive_single.sum()),
        "rpisa_ppo": float(4 * eps * (alpha_pos * gap_self).sum()),
        "mappo": 4 * eps * total * h,
        "coppo": 4 * eps * total * _gap_term(g, total),
        "a2po": float(a2po_terms.sum() + h * xi_pos.sum()),
    }
    bounds["happo"] = bounds["coppo"]
    loose = {
        "a2po": float(4 * g * eps / (1 - g) ** 2 * (alpha_pos * prefix).sum() + h * xi_pos.sum()),
        "naive_eq1": float(naive_eq1.sum()),
    }

    def by_agent(x):
        out = np.empty(n)
        out[order] = x
        return out

    # partially realised bounds after fixing k agents (k = 0..n)
    per_pos_bound = a2po_terms + h * xi_pos
    incremental = np.array([single_gap_a2po[:k].sum() + per_pos_bound[k:].sum() for k in range(n + 1)])

    # Ordering: a2po <= coppo exactly when the summed xi terms fit under the
    # prefix/total difference of the coppo and a2po first terms.
    slack = 4 * eps * (alpha_pos * (_gap_term(g, total) - gap_prefix)).sum()
    ordering_condition = bool(h * xi_pos.sum() <= slack)
    rest = total - prefix
    per_position_rhs = g * (1 - g) * rest / ((1 - g * (1 - prefix)) * (1 - g * (1 - total)))
    strict_condition = bool(np.all(xi_pos < per_position_rhs))

    return BoundReport(
        gamma=g,
        lam=float(lam),
        order=order,
        epsilon=eps,
        epsilon_base=eps_base,
        epsilon_per_agent=by_agent(eps_pos),
        alpha=alpha,
        xi=by_agent(xi_pos),
        bounds=bounds,
        loose_bounds=loose,
        single_agent_bounds={
            "a2po": by_agent(a2po_single),
            "rpisa_ppo": by_agent(rpisa_single),
            "naive": by_agent(naive_single),
        },
        single_agent_loose_bounds={"a2po": by_agent(a2po_single_loose), "naive_eq1": by_agent(naive_eq1)},
        gaps=gaps,
        single_agent_gaps={
            "a2po": by_agent(single_gap_a2po),
            "rpisa_ppo": by_agent(single_gap_rpisa),
            "naive": by_agent(single_gap_naive),
        },
        a2po_terms=by_agent(a2po_terms),
        incremental=incremental,
        ordering_condition=ordering_condition,
        strict_ordering_condition=strict_condition,
        returns=returns,
    )
