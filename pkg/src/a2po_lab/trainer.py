"""Sequential (A2PO, HAPPO) and simultaneous (MAPPO, CoPPO) tabular trainers.

Every trainer runs plain gradient ascent on a clipped importance-ratio
surrogate. For agent ``i`` the surrogate ratio is ``l = r_i * g`` where
``r_i`` is agent ``i``'s own ratio and ``g`` a factor that does not depend on
its parameters:

* a2po:  ``g = clip(prod_{j in preceding} r_j, 1 +- eps_i / 2)``
* coppo: ``g = clip(prod_{j != i} r_j, 1 +- eps / 2)``
* mappo, happo: ``g = 1`` (happo instead rescales the advantage by the
  unclipped preceding ratio)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import oracle
from .advantage import (AdvantageField, ValueTable, fit_value, gae, marginal_advantage_stats, preopc,
                        vtrace_advantage)
from .decmdp import DecMdp, JointPolicy, RolloutBatch, TabularPolicy, check_compatible, empirical_return, rollout

ALGORITHMS = ("a2po", "mappo", "coppo", "happo")
SELECTION_RULES = ("cyclic", "random", "greedy", "semi_greedy", "reverse_greedy", "reverse_semi_greedy")
ESTIMATORS = ("gae", "preopc", "vtrace")
GREEDY_STATS = ("per_step", "one_shot")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class TrainerConfig:
    """Trainer hyperparameters.

    ``gamma=None`` uses the MDP's discount. ``exact_advantages`` replaces
    sampled rollouts by the enumerated ``(s, a)`` table weighted with
    ``d^pi(s) pi(a|s)`` and oracle advantages (no value fitting).
    ``greedy_stat`` picks how greedy rules rank agents: ``per_step``
    recomputes statistics against the current prefix before each pick,
    ``one_shot`` ranks once per stage from base-policy advantages.
    """

    algorithm: str = "a2po"
    selection_rule: str = "semi_greedy"
    base_clip: float = 0.2
    clip_blend: float = 0.5
    adaptive_clip: bool = True
    estimator: str = "preopc"
    lam: float = 0.95
    gamma: float | None = None
    ppo_epochs: int = 5
    lr: float = 1.0
    horizon: int = 50
    episodes_per_iter: int = 32
    iterations: int = 100
    seed: int = 0
    value_lr: float = 0.5
    value_epochs: int = 5
    init_scale: float = 0.0
    exact_advantages: bool = False
    greedy_stat: str = "per_step"
    happo_random_order: bool = False
    fair_epochs: bool = False
    normalize_advantages: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        choices = {"algorithm": ALGORITHMS, "selection_rule": SELECTION_RULES, "estimator": ESTIMATORS,
                   "greedy_stat": GREEDY_STATS}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"must be one of {allowed}, got {getattr(self, name)!r}")
        if not self.base_clip > 0:
            raise ConfigError("base_clip", "must be > 0")
        if not 0.0 <= self.clip_blend <= 1.0:
            raise ConfigError("clip_blend", "must lie in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda", "must lie in [0, 1]")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", "must lie in [0, 1)")
        for name in ("ppo_epochs", "horizon", "episodes_per_iter"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("iterations", "value_epochs"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr", "must be >= 0")
        if not 0 < self.value_lr < 2:
            raise ConfigError("value_lr", "must lie in (0, 2) for monotone value regression")
        if self.init_scale < 0:
            raise ConfigError("init_scale", "must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(key, "unknown trainer field")
            kwargs[key] = _coerce(key, value, known[key].default)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lambda"] = d.pop("lam")
        return d


def _coerce(key, value, default):
    name = "lambda" if key == "lam" else key
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float) or (default is None and key == "gamma"):
            if value is None and default is None:
                return None
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(name, f"invalid value {value!r}") from None
    return value


# ---------------------------------------------------------------------------
# clipping schedule and agent selection

def adaptive_clip(eps: float, k: int, n: int, c_eps: float) -> float:
    """``C(eps, k) = eps * c_eps + eps * (1 - c_eps) * k / n`` for ``1 <= k <= n``.

    Written as a shortfall from ``eps`` so the last updater gets exactly ``eps``.
    """
    if not 1 <= k <= n:
        raise ValueError(f"order index k={k} outside 1..{n}")
    return eps - eps * (1.0 - c_eps) * (n - k) / n


def select_next_agent(rule: str, remaining, k: int, adv_stats=None, rng: np.random.Generator | None = None) -> int:
    """Pick the agent updated at (1-based) order position ``k``.

    semi-greedy rules are greedy when ``k`` is even and uniform when odd.
    Ties go to the lowest index.
    """
    remaining = sorted(int(i) for i in remaining)
    if not remaining:
        raise ValueError("no remaining agents")
    if rule not in SELECTION_RULES:
        raise ValueError(f"unknown selection rule {rule!r}")
    if rule == "cyclic":
        return remaining[0]
    greedy = rule in ("greedy", "reverse_greedy") or (rule.endswith("semi_greedy") and k % 2 == 0)
    if not greedy:
        if rng is None:
            raise ValueError(f"rule {rule!r} needs an rng at k={k}")
        return remaining[int(rng.integers(len(remaining)))]
    if adv_stats is None:
        raise ValueError(f"rule {rule!r} needs advantage statistics")
    stats = np.asarray(adv_stats, dtype=float)[remaining]
    pick = np.argmin(stats) if rule.startswith("reverse") else np.argmax(stats)
    return remaining[int(pick)]


# ---------------------------------------------------------------------------
# surrogate objective

@dataclass
class SurrogateResult:
    objective: float
    gradient: np.ndarray
    clip_fraction: float
    mean_ratio: float
    ratio_spread: float


def own_ratio(batch: RolloutBatch, policy: TabularPolicy, agent: int) -> np.ndarray:
    return policy.probs[batch.states, batch.actions[:, agent]] / batch.behavior_probs[:, agent]


def ratio_product(batch: RolloutBatch, working: JointPolicy, agents) -> np.ndarray:
    out = np.ones(batch.n_steps)
    for j in agents:
        out = out * own_ratio(batch, working.agents[j], j)
    return out


def surrogate(batch: RolloutBatch, advantage: np.ndarray, policy: TabularPolicy, agent: int,
              factor: np.ndarray | float, eps: float, weights: np.ndarray | None = None) -> SurrogateResult:
    """``sum_n w_n min(l_n A_n, clip(l_n, 1 +- eps) A_n)`` with ``l = r_agent * factor``.

    The gradient is taken with respect to ``policy.logits`` only. Samples on
    the clipped branch contribute nothing.
    """
    if advantage.shape != (batch.n_steps,):
        raise ValueError(f"advantage has shape {advantage.shape}, batch has {batch.n_steps} steps")
    if weights is None:
        weights = batch.weights
    r = own_ratio(batch, policy, agent)
    ell = r * factor
    clipped = np.clip(ell, 1.0 - eps, 1.0 + eps)
    a = advantage
    objective = float(weights @ np.minimum(ell * a, clipped * a))
    active = ell * a <= clipped * a
    coef = np.where(active, weights * a * ell, 0.0)
    # d l / d logits[s, b] = l * (1{b = a} - pi(b|s))
    s, act = batch.states, batch.actions[:, agent]
    grad = np.zeros_like(policy.logits)
    np.add.at(grad, (s, act), coef)
    grad -= np.bincount(s, weights=coef, minlength=policy.n_states)[:, None] * policy.probs
    return SurrogateResult(
        objective=objective,
        gradient=grad,
        clip_fraction=float(weights @ (np.abs(ell - 1.0) > eps)),
        mean_ratio=float(weights @ ell),
        ratio_spread=float(weights @ np.abs(ell - 1.0)),
    )


def clipped_surrogate(batch: RolloutBatch, adv: AdvantageField | np.ndarray, base: JointPolicy,
                      working: JointPolicy, agent: int, preceding, eps_i: float,
                      weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Doubly clipped sequential objective for ``agent`` and its logit gradient.

    ``base`` is the behavior policy of ``batch`` (its stored probabilities are
    used as ratio denominators); ``working`` holds the preceding agents'
    updated policies and the candidate policy of ``agent``.
    """
    check_batch_matches(batch, base)
    a = adv.advantage if isinstance(adv, AdvantageField) else np.asarray(adv, float)
    g = np.clip(ratio_product(batch, working, preceding), 1.0 - eps_i / 2, 1.0 + eps_i / 2)
    res = surrogate(batch, a, working.agents[agent], agent, g, eps_i, weights)
    return res.objective, res.gradient


def check_batch_matches(batch: RolloutBatch, base: JointPolicy) -> None:
    if batch.n_agents != base.n_agents:
        raise ValueError("batch and policy have different agent counts")


# ---------------------------------------------------------------------------
# stage machinery

@dataclass
class StageState:
    base: JointPolicy
    working: JointPolicy
    order: list[int] = field(default_factory=list)
    preceding: dict[int, tuple[int, ...]] = field(default_factory=dict)
    eps: dict[int, float] = field(default_factory=dict)


@dataclass
class AgentUpdate:
    agent: int
    order_k: int
    eps_i: float
    objective: float
    clip_fraction: float
    mean_ratio: float
    tv_to_base: float
    ratio_spread: float = 0.0
    stats: np.ndarray | None = None


@dataclass
class StageResult:
    policy: JointPolicy
    value: ValueTable
    updates: list[AgentUpdate]
    state: StageState
    batch_return: float


@dataclass
class StageData:
    """What one stage trains on: a batch, its step weights, and (optionally) the MDP for exact mode."""

    batch: RolloutBatch
    weights: np.ndarray
    mdp: DecMdp | None = None
    exact: bool = False
    base_return: float = float("nan")


def enumerated_batch(mdp: DecMdp, base: JointPolicy) -> StageData:
    """Every ``(s, joint a)`` once, weighted by ``d^base(s) base(a|s)``."""
    ev = oracle.exact_eval(mdp, base)
    n_s, n_j = mdp.n_states, mdp.n_joint_actions
    states = np.repeat(np.arange(n_s), n_j)
    joint = np.tile(np.arange(n_j), n_s)
    actions = mdp.decode(joint)
    probs = np.stack([base.agents[i].probs[states, actions[:, i]] for i in range(mdp.n_agents)], axis=1)
    n = states.size
    batch = RolloutBatch(
        episode=np.arange(n), t=np.zeros(n, dtype=np.int64), states=states, actions=actions,
        rewards=mdp.reward[states, joint], behavior_probs=probs, done=np.ones(n, dtype=bool),
        truncated=np.ones(n, dtype=bool), next_states=states, behavior_policy_id=base.fingerprint(),
        horizon=1,
    )
    weights = (ev.visitation[:, None] * ev.policy).ravel()
    return StageData(batch, weights, mdp, exact=True, base_return=ev.expected_return)


def _epochs(config: TrainerConfig, n: int, sequential: bool) -> int:
    if sequential and config.fair_epochs:
        return max(1, config.ppo_epochs // n)
    return config.ppo_epochs


def _maybe_normalize(a: np.ndarray, config: TrainerConfig, weights: np.ndarray) -> np.ndarray:
    if not config.normalize_advantages:
        return a
    mean = weights @ a
    std = math.sqrt(max(weights @ (a - mean) ** 2, 0.0))
    return (a - mean) / (std + 1e-8)


def _advantage(data: StageData, value: ValueTable, base: JointPolicy, target: JointPolicy,
               gamma: float, config: TrainerConfig, estimator: str) -> tuple[np.ndarray, AdvantageField | None]:
    """Advantages of ``target`` (equal to ``base`` for base-policy estimates)."""
    if data.exact:
        adv = oracle.exact_eval(data.mdp, target).adv
        joint = data.mdp.joint_index(data.batch.actions)
        return adv[data.batch.states, joint], None
    if estimator == "gae":
        f = gae(data.batch, value, gamma, config.lam)
    elif estimator == "preopc":
        f = preopc(data.batch, value, base, target, gamma, config.lam)
    else:
        f = vtrace_advantage(data.batch, value, base, target, gamma, config.lam)
    return f.advantage, f


def _fit(value: ValueTable, data: StageData, f: AdvantageField | None, config: TrainerConfig) -> ValueTable:
    if f is None or config.value_epochs == 0:
        return value
    return fit_value(value, data.batch, f, config.value_epochs, config.value_lr)


def _ascend(data: StageData, advantage: np.ndarray, policy: TabularPolicy, agent: int,
            factor, eps: float, epochs: int, lr: float) -> tuple[TabularPolicy, SurrogateResult]:
    logits = policy.logits
    for _ in range(epochs):
        res = surrogate(data.batch, advantage, policy, agent, factor, eps, data.weights)
        if lr != 0:
            logits = logits + lr * res.gradient
            policy = TabularPolicy(logits)
    return policy, surrogate(data.batch, advantage, policy, agent, factor, eps, data.weights)


def _stats(data: StageData, advantage: np.ndarray, counts) -> np.ndarray:
    return marginal_advantage_stats(data.batch, advantage, counts, data.weights)


def sequential_stage(data: StageData, base: JointPolicy, value: ValueTable, config: TrainerConfig,
                     gamma: float, rng: np.random.Generator) -> StageResult:
    """One A2PO or HAPPO stage on ``data`` collected under ``base``."""
    n = base.n_agents
    counts = base.action_counts
    happo = config.algorithm == "happo"
    state = StageState(base=base, working=base)
    remaining = set(range(n))
    epochs = _epochs(config, n, sequential=True)
    updates = []

    if happo:
        order = list(rng.permutation(n)) if config.happo_random_order else list(range(n))
        base_adv, f = _advantage(data, value, base, base, gamma, config, "gae")
        value = _fit(value, data, f, config)
    one_shot = None
    if not happo and config.greedy_stat == "one_shot":
        a0, _ = _advantage(data, value, base, base, gamma, config, "gae")
        one_shot = _stats(data, a0, counts)

    for k in range(1, n + 1):
        if happo:
            agent = int(order[k - 1])
            stats = None
            preceding = tuple(state.order)
            factor = 1.0
            advantage = base_adv * ratio_product(data.batch, state.working, preceding)
            eps_i = config.base_clip
        else:
            estimator = config.estimator
            advantage, f = _advantage(data, value, base, state.working, gamma, config, estimator)
            stats = one_shot if one_shot is not None else _stats(data, advantage, counts)
            agent = select_next_agent(config.selection_rule, remaining, k, stats, rng)
            preceding = tuple(state.order)
            eps_i = adaptive_clip(config.base_clip, k, n, config.clip_blend) if config.adaptive_clip \
                else config.base_clip
            factor = np.clip(ratio_product(data.batch, state.working, preceding), 1 - eps_i / 2, 1 + eps_i / 2)
            value = _fit(value, data, f, config)
        advantage = _maybe_normalize(advantage, config, data.weights)
        new_policy, res = _ascend(data, advantage, state.working.agents[agent], agent, factor, eps_i,
                                  epochs, config.lr)
        state.working = state.working.replace(agent, new_policy)
        state.order.append(agent)
        state.preceding[agent] = preceding
        state.eps[agent] = eps_i
        remaining.discard(agent)
        updates.append(AgentUpdate(agent, k, eps_i, res.objective, res.clip_fraction, res.mean_ratio,
                                   oracle.tv_max(base.agents[agent], new_policy), res.ratio_spread, stats))
    return StageResult(state.working, value, updates, state, _batch_return(data, gamma))


def simultaneous_stage(data: StageData, base: JointPolicy, value: ValueTable, config: TrainerConfig,
                       gamma: float) -> StageResult:
    """One MAPPO or CoPPO stage: all agents ascend together for P epochs."""
    n = base.n_agents
    eps = config.base_clip
    coppo = config.algorithm == "coppo"
    estimator = "vtrace" if config.estimator == "vtrace" else "gae"
    advantage, f = _advantage(data, value, base, base, gamma, config, "gae")
    value = _fit(value, data, f, config)
    advantage = _maybe_normalize(advantage, config, data.weights)
    working = base
    state = StageState(base=base, working=base, order=list(range(n)),
                       preceding={i: () for i in range(n)}, eps={i: eps for i in range(n)})

    def factor_for(i, jp):
        if not coppo or n == 1:
            return 1.0
        others = [j for j in range(n) if j != i]
        return np.clip(ratio_product(data.batch, jp, others), 1 - eps / 2, 1 + eps / 2)

    for epoch in range(config.ppo_epochs):
        if estimator == "vtrace" and epoch > 0 and not data.exact:
            advantage, _ = _advantage(data, value, base, working, gamma, config, "vtrace")
            advantage = _maybe_normalize(advantage, config, data.weights)
        if config.lr == 0:
            break
        grads = [surrogate(data.batch, advantage, working.agents[i], i, factor_for(i, working), eps,
                           data.weights).gradient for i in range(n)]
        working = JointPolicy(tuple(TabularPolicy(working.agents[i].logits + config.lr * grads[i])
                                    for i in range(n)))
    updates = []
    for i in range(n):
        res = surrogate(data.batch, advantage, working.agents[i], i, factor_for(i, working), eps, data.weights)
        updates.append(AgentUpdate(i, i + 1, eps, res.objective, res.clip_fraction, res.mean_ratio,
                                   oracle.tv_max(base.agents[i], working.agents[i]), res.ratio_spread))
    state.working = working
    return StageResult(working, value, updates, state, _batch_return(data, gamma))


def _batch_return(data: StageData, gamma: float) -> float:
    if data.exact:
        return data.base_return
    return empirical_return(data.batch, gamma)


def run_stage(mdp: DecMdp, base: JointPolicy, value: ValueTable, config: TrainerConfig,
              rollout_seed, select_rng: np.random.Generator) -> StageResult:
    gamma = effective_gamma(mdp, config)
    if config.exact_advantages:
        data = enumerated_batch(mdp, base)
    else:
        batch = rollout(mdp, base, config.horizon, config.episodes_per_iter, rollout_seed)
        data = StageData(batch, batch.weights)
    if config.algorithm in ("a2po", "happo"):
        return sequential_stage(data, base, value, config, gamma, select_rng)
    return simultaneous_stage(data, base, value, config, gamma)


def a2po_stage(mdp, state_or_base, config: TrainerConfig, value: ValueTable | None = None,
               rollout_seed=0, rng: np.random.Generator | None = None) -> StageResult:
    base = state_or_base.base if isinstance(state_or_base, StageState) else state_or_base
    config = replace(config, algorithm="a2po")
    return run_stage(mdp, base, value or ValueTable.zeros(mdp.n_states), config, rollout_seed,
                     rng or np.random.default_rng(rollout_seed))


def mappo_stage(mdp, base: JointPolicy, config: TrainerConfig, value: ValueTable | None = None,
                rollout_seed=0) -> StageResult:
    config = replace(config, algorithm="mappo")
    return run_stage(mdp, base, value or ValueTable.zeros(mdp.n_states), config, rollout_seed,
                     np.random.default_rng(rollout_seed))


def coppo_stage(mdp, base: JointPolicy, config: TrainerConfig, value: ValueTable | None = None,
                rollout_seed=0) -> StageResult:
    config = replace(config, algorithm="coppo")
    return run_stage(mdp, base, value or ValueTable.zeros(mdp.n_states), config, rollout_seed,
                     np.random.default_rng(rollout_seed))


def happo_stage(mdp, base: JointPolicy, config: TrainerConfig, value: ValueTable | None = None,
                rollout_seed=0, rng: np.random.Generator | None = None) -> StageResult:
    config = replace(config, algorithm="happo")
    return run_stage(mdp, base, value or ValueTable.zeros(mdp.n_states), config, rollout_seed,
                     rng or np.random.default_rng(rollout_seed))


# ---------------------------------------------------------------------------
# training loop

METRIC_COLUMNS = ("iter", "agent", "order_k", "eps_i", "objective", "clip_fraction", "mean_ratio",
                  "tv_to_base", "J_empirical", "J_exact")


def effective_gamma(mdp: DecMdp, config: TrainerConfig) -> float:
    if config.gamma is not None and abs(config.gamma - mdp.gamma) > 1e-15:
        raise ConfigError("gamma", f"trainer gamma {config.gamma} differs from environment gamma {mdp.gamma}")
    return mdp.gamma


@dataclass
class TrainResult:
    policy: JointPolicy
    value: ValueTable
    rows: list[dict]
    initial_J: float | None
    final_J: float | None
    J_history: list[float]


def initial_policy(mdp: DecMdp, config: TrainerConfig, rng: np.random.Generator) -> JointPolicy:
    if config.init_scale == 0:
        return JointPolicy.uniform(mdp.n_states, mdp.action_counts)
    return JointPolicy.random(mdp.n_states, mdp.action_counts, rng, config.init_scale)


def train(mdp: DecMdp, config: TrainerConfig, use_oracle: bool = True,
          on_iteration: Callable[[int, list[dict]], None] | None = None) -> TrainResult:
    """Run ``config.iterations`` stages from a seeded initial policy.

    Randomness comes from three streams spawned from ``config.seed``:
    policy initialisation, agent selection, and rollouts.
    """
    check_gamma = effective_gamma(mdp, config)
    del check_gamma
    if use_oracle:
        oracle.check_size(mdp)
    init_ss, select_ss, rollout_ss = np.random.SeedSequence(config.seed).spawn(3)
    policy = initial_policy(mdp, config, np.random.default_rng(init_ss))
    check_compatible(mdp, policy)
    select_rng = np.random.default_rng(select_ss)
    rollout_rng = np.random.default_rng(rollout_ss)
    value = ValueTable.zeros(mdp.n_states)
    exact_J = (lambda jp: oracle.expected_return(mdp, jp)) if use_oracle else (lambda jp: None)
    initial_J = exact_J(policy)
    history = [initial_J] if use_oracle else []
    rows = []
    for it in range(config.iterations):
        seed = int(rollout_rng.integers(2**63 - 1))
        result = run_stage(mdp, policy, value, config, seed, select_rng)
        sequential = config.algorithm in ("a2po", "happo")
        iter_rows = []
        working = policy
        stage_J = exact_J(result.policy)
        for u in result.updates:
            if sequential:
                working = working.replace(u.agent, result.policy.agents[u.agent])
                j = exact_J(working)
            else:
                j = stage_J
            iter_rows.append({
                "iter": it, "agent": u.agent, "order_k": u.order_k, "eps_i": u.eps_i,
                "objective": u.objective, "clip_fraction": u.clip_fraction, "mean_ratio": u.mean_ratio,
                "tv_to_base": u.tv_to_base, "J_empirical": result.batch_return, "J_exact": j,
            })
        rows.extend(iter_rows)
        policy, value = result.policy, result.value
        if use_oracle:
            history.append(stage_J)
        if on_iteration is not None:
            on_iteration(it, iter_rows)
    return TrainResult(policy, value, rows, initial_J, exact_J(policy), history)
