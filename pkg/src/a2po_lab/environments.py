"""Built-in cooperative environments and a random DEC-MDP generator."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decmdp import DecMdp, DecMdpError

STATE_CAP = 10_000

COORDINATION_2X2 = np.array([[1.0, 0.0], [0.0, 1.0]])
# Deceptive 3x3 payoff: the optimum (0, 0) is surrounded by heavy penalties,
# so independent learners tend to settle on the safe (2, 2) / (1, 1) region.
CLIMBING_GAME = np.array([[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 0.0, 5.0]])

# stay, N, S, E, W as (row, col) offsets
MOVES = np.array([[0, 0], [-1, 0], [1, 0], [0, 1], [0, -1]])


class EnvSizeError(ValueError):
    pass


@dataclass(frozen=True)
class MatrixGameSpec:
    """Repeated common-payoff game.

    ``repeat=None`` gives a single self-looping state played forever with
    discount ``gamma``. A positive ``repeat`` builds a chain of ``repeat``
    play states followed by an absorbing state, so episodes last exactly
    ``repeat`` steps.
    """

    payoff: np.ndarray
    gamma: float = 0.9
    repeat: int | None = None

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(np.asarray(self.payoff).shape)

    @property
    def n_agents(self) -> int:
        return np.asarray(self.payoff).ndim


def build_matrix_game(spec: MatrixGameSpec) -> DecMdp:
    payoff = np.asarray(spec.payoff, dtype=float)
    if payoff.ndim < 1 or min(payoff.shape) < 1:
        raise DecMdpError("payoff", f"need one axis per agent with >= 1 action, got shape {payoff.shape}")
    counts = payoff.shape
    n_joint = payoff.size
    r = payoff.reshape(-1)
    if spec.repeat is None:
        transition = np.ones((1, n_joint, 1))
        return DecMdp(transition, r[None, :], spec.gamma, np.ones(1), counts)
    if spec.repeat < 1:
        raise DecMdpError("repeat", "must be >= 1")
    n_states = spec.repeat + 1
    transition = np.zeros((n_states, n_joint, n_states))
    reward = np.zeros((n_states, n_joint))
    for s in range(spec.repeat):
        transition[s, :, s + 1] = 1.0
        reward[s] = r
    transition[-1, :, -1] = 1.0
    absorbing = np.zeros(n_states, dtype=bool)
    absorbing[-1] = True
    initial = np.zeros(n_states)
    initial[0] = 1.0
    return DecMdp(transition, reward, spec.gamma, initial, counts, absorbing)


@dataclass(frozen=True)
class GridSpreadSpec:
    """Cooperative navigation on a ``side x side`` grid.

    ``landmarks`` are cell indices (row-major); by default they are spread
    evenly over the cells. ``walls`` are blocked cells. Agents that would
    move off the grid or into a wall stay put. The shared reward is computed
    on the post-move positions.
    """

    side: int = 3
    n_agents: int = 2
    n_landmarks: int | None = None
    collision_penalty: float = 1.0
    distance_scale: float = 1.0
    gamma: float = 0.9
    landmarks: Sequence[int] | None = None
    walls: Sequence[int] = ()


def default_landmarks(n_cells: int, n_landmarks: int) -> list[int]:
    return [int(round(x)) for x in np.linspace(0, n_cells - 1, n_landmarks)]


def grid_positions(spec: GridSpreadSpec):
    """States as tuples of agent cells, in lexicographic order."""
    free = [c for c in range(spec.side * spec.side) if c not in set(spec.walls)]
    return list(itertools.product(free, repeat=spec.n_agents))


def grid_reward(spec: GridSpreadSpec, cells: Sequence[int], landmarks: Sequence[int]) -> float:
    side = spec.side
    rc = np.array([divmod(int(c), side) for c in cells])
    total = 0.0
    for lm in landmarks:
        lr, lc = divmod(int(lm), side)
        total += np.min(np.abs(rc[:, 0] - lr) + np.abs(rc[:, 1] - lc))
    collisions = sum(1 for a, b in itertools.combinations(cells, 2) if a == b)
    return -spec.distance_scale * total - spec.collision_penalty * collisions


def build_grid_spread(spec: GridSpreadSpec) -> DecMdp:
    side = spec.side
    n_cells = side * side
    n = spec.n_agents
    if side < 1 or n < 1:
        raise DecMdpError("side/n_agents", "must be >= 1")
    walls = set(int(w) for w in spec.walls)
    if any(not 0 <= w < n_cells for w in walls):
        raise DecMdpError("walls", "cell index out of range")
    n_free = n_cells - len(walls)
    n_states = n_free ** n
    if n_states > STATE_CAP:
        raise EnvSizeError(f"grid spread has {n_states} joint-position states, cap is {STATE_CAP}")
    n_landmarks = spec.n_landmarks if spec.n_landmarks is not None else n
    landmarks = list(spec.landmarks) if spec.landmarks is not None else default_landmarks(n_cells, n_landmarks)
    if len(landmarks) != n_landmarks or len(landmarks) > n_cells:
        raise DecMdpError("landmarks", f"expected {n_landmarks} landmarks within {n_cells} cells")
    if any(not 0 <= lm < n_cells for lm in landmarks):
        raise DecMdpError("landmarks", "cell index out of range")
    if n > n_free:
        raise DecMdpError("n_agents", "more agents than free cells")

    states = grid_positions(spec)
    index = {s: k for k, s in enumerate(states)}
    # per-cell successor under each move
    step = np.empty((n_cells, len(MOVES)), dtype=int)
    for c in range(n_cells):
        r, col = divmod(c, side)
        for m, (dr, dc) in enumerate(MOVES):
            nr, nc = r + dr, col + dc
            target = nr * side + nc
            ok = 0 <= nr < side and 0 <= nc < side and target not in walls
            step[c, m] = target if ok else c

    n_moves = len(MOVES)
    n_joint = n_moves ** n
    joint_moves = np.array(list(itertools.product(range(n_moves), repeat=n)))
    transition = np.zeros((n_states, n_joint, n_states))
    reward = np.zeros((n_states, n_joint))
    cell_reward = {}
    for k, cells in enumerate(states):
        for j, moves in enumerate(joint_moves):
            nxt = tuple(int(step[c, m]) for c, m in zip(cells, moves))
            transition[k, j, index[nxt]] = 1.0
            if nxt not in cell_reward:
                cell_reward[nxt] = grid_reward(spec, nxt, landmarks)
            reward[k, j] = cell_reward[nxt]

    distinct = np.array([len(set(cells)) == n for cells in states], dtype=float)
    initial = distinct / distinct.sum()
    return DecMdp(transition, reward, spec.gamma, initial, (n_moves,) * n)


def random_decmdp(n_states: int, n_agents: int, action_counts: Sequence[int] | int, seed,
                  sparsity: float = 1.0, gamma: float = 0.9) -> DecMdp:
    """Random DEC-MDP with Dirichlet(sparsity) transition rows and U[-1, 1] rewards.

    Small ``sparsity`` concentrates rows on few successors. Rows are drawn
    through log-gamma variates so tiny concentrations do not underflow to
    all-zero rows.
    """
    if isinstance(action_counts, (int, np.integer)):
        action_counts = (int(action_counts),) * n_agents
    counts = tuple(int(a) for a in action_counts)
    if len(counts) != n_agents:
        raise ValueError("action_counts must have one entry per agent")
    if sparsity <= 0:
        raise ValueError("sparsity must be > 0")
    n_joint = int(np.prod(counts))
    if n_states * n_joint > STATE_CAP:
        raise EnvSizeError(f"n_states * n_joint = {n_states * n_joint} exceeds cap {STATE_CAP}")
    rng = np.random.default_rng(seed)
    # log Gamma(a) = log Gamma(a + 1) + log(U) / a
    g = rng.standard_gamma(sparsity + 1.0, size=(n_states, n_joint, n_states))
    u = rng.random((n_states, n_joint, n_states))
    log_g = np.log(g) + np.log(u) / sparsity
    log_g -= log_g.max(axis=2, keepdims=True)
    w = np.exp(log_g)
    transition = w / w.sum(axis=2, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_joint))
    initial = np.full(n_states, 1.0 / n_states)
    return DecMdp(transition, reward, gamma, initial, counts)


def env_from_dict(d: dict, gamma: float | None = None) -> DecMdp:
    """Build an environment from a JSON-style spec with a ``type`` header.

    ``gamma`` fills in the discount when the spec does not give one.
    """
    if not isinstance(d, dict):
        raise DecMdpError("env", "expected an object")
    kind = d.get("type", "decmdp")
    body = {k: v for k, v in d.items() if k != "type"}
    if gamma is not None:
        body.setdefault("gamma", gamma)
    try:
        if kind == "decmdp":
            if "path" in body:
                return DecMdp.load(body["path"])
            if "n_states" not in body and "initial_dist" in body:
                body["n_states"] = len(body["initial_dist"])
            return DecMdp.from_dict(body)
        if kind == "matrix_game":
            payoff = body.pop("payoff", None)
            if payoff is None:
                raise DecMdpError("payoff", "missing required field")
            if isinstance(payoff, str):
                named = {"coordination": COORDINATION_2X2, "climbing": CLIMBING_GAME}
                if payoff not in named:
                    raise DecMdpError("payoff", f"unknown named payoff {payoff!r}")
                payoff = named[payoff]
            return build_matrix_game(MatrixGameSpec(np.asarray(payoff, float), **body))
        if kind == "grid_spread":
            return build_grid_spread(GridSpreadSpec(**body))
        if kind == "random":
            return random_decmdp(**body)
    except TypeError as exc:
        raise DecMdpError("env", str(exc)) from None
    raise DecMdpError("type", f"unknown environment type {kind!r}")
