"""Experiment orchestration: manifests, seeded multi-run execution, ablations, bound checks."""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import oracle
from .decmdp import DecMdp, DecMdpError, JointPolicy, TabularPolicy
from .environments import env_from_dict, random_decmdp
from .trainer import METRIC_COLUMNS, ConfigError, TrainerConfig, train

ABLATION_AXES = {
    "estimator": ["gae", "preopc"],
    "selection_rule": ["cyclic", "random", "greedy", "semi_greedy", "reverse_greedy", "reverse_semi_greedy"],
    "adaptive_clip": [False, True],
    "lambda": [0.9, 0.93, 0.95, 0.97],
}


@dataclass
class RunManifest:
    env: dict
    trainer: TrainerConfig
    n_seeds: int = 1
    output_dir: str = "runs"
    oracle: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        if not isinstance(d, dict):
            raise ConfigError("manifest", "expected a JSON object")
        known = {"env", "trainer", "n_seeds", "output_dir", "oracle"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown manifest field")
        if "env" not in d:
            raise ConfigError("env", "missing required field")
        if not isinstance(d["env"], dict):
            raise ConfigError("env", "must be an object")
        trainer = TrainerConfig.from_dict(d.get("trainer", {}))
        n_seeds = d.get("n_seeds", 1)
        if isinstance(n_seeds, bool) or not isinstance(n_seeds, int) or n_seeds < 1:
            raise ConfigError("n_seeds", "must be an integer >= 1")
        oracle_on = d.get("oracle", True)
        if not isinstance(oracle_on, bool):
            raise ConfigError("oracle", "must be true or false")
        out = d.get("output_dir", "runs")
        if not isinstance(out, str) or not out:
            raise ConfigError("output_dir", "must be a non-empty path")
        return cls(env=copy.deepcopy(d["env"]), trainer=trainer, n_seeds=n_seeds, output_dir=out,
                   oracle=oracle_on)

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("manifest", f"invalid JSON: {exc}") from None
        return cls.from_dict(apply_overrides(d, overrides))

    def to_dict(self) -> dict:
        return {"env": self.env, "trainer": self.trainer.to_dict(), "n_seeds": self.n_seeds,
                "output_dir": self.output_dir, "oracle": self.oracle}

    def build_env(self) -> DecMdp:
        try:
            return env_from_dict(self.env, gamma=self.trainer.gamma)
        except DecMdpError as exc:
            raise ConfigError(f"env.{exc.field}", str(exc)) from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` overrides; dotted keys address nested objects.

    Undotted keys that name a trainer field go to ``trainer``. Values are
    parsed as JSON when possible and kept as strings otherwise.
    """
    d = copy.deepcopy(d)
    trainer_keys = {f.name for f in fields(TrainerConfig)} | {"lambda"}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        path = key.strip().split(".")
        if len(path) == 1 and path[0] in trainer_keys:
            path = ["trainer", path[0]]
        node = d
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot set a field inside a non-object")
        node[path[-1]] = _parse_value(text)
    return d


# ---------------------------------------------------------------------------
# runs

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k in ("iter", "agent", "order_k"):
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v) if v != "" else None
            out.append(parsed)
        return out


def _run_seed(args):
    env, config, use_oracle, out_dir, index = args
    mdp = env_from_dict(env, gamma=config.gamma)
    timings = []
    clock = [time.perf_counter()]

    def tick(it, _rows):
        now = time.perf_counter()
        timings.append((it, now - clock[0]))
        clock[0] = now

    result = train(mdp, config, use_oracle=use_oracle, on_iteration=tick)
    out = Path(out_dir)
    (out / f"seed_{index}.csv").write_text(metrics_csv(result.rows))
    with open(out / f"seed_{index}_timing.csv", "w") as fh:
        fh.write("iter,wall_clock_s\n")
        for it, dt in timings:
            fh.write(f"{it},{dt:.6f}\n")
    if use_oracle:
        final = result.final_J
    elif result.rows:
        final = result.rows[-1]["J_empirical"]
    else:
        final = None
    return {"seed": config.seed, "initial_J": result.initial_J, "final_J": final}


def worker_count(n_jobs: int) -> int:
    limit = os.environ.get("A2PO_LAB_THREADS")
    cap = os.cpu_count() or 1
    if limit:
        try:
            cap = max(1, int(limit))
        except ValueError:
            raise ConfigError("A2PO_LAB_THREADS", f"must be an integer, got {limit!r}") from None
    return max(1, min(cap, n_jobs))


def _stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.array(vals, dtype=float)
    return float(arr.mean()), float(arr.std())


def run_experiment(manifest: RunManifest, output_dir=None) -> dict:
    """Train ``n_seeds`` runs and write per-seed metrics plus ``summary.json``.

    Seed ``k`` uses trainer seed ``config.seed + k`` and writes
    ``seed_k.csv`` (deterministic) and ``seed_k_timing.csv`` (wall clock).
    """
    out = Path(output_dir or manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mdp = manifest.build_env()
    if manifest.oracle:
        oracle.check_size(mdp)
    jobs = [(manifest.env, replace(manifest.trainer, seed=manifest.trainer.seed + k), manifest.oracle, str(out), k)
            for k in range(manifest.n_seeds)]
    n_workers = worker_count(len(jobs))
    if n_workers == 1:
        per_seed = [_run_seed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            per_seed = list(pool.map(_run_seed, jobs))
    final_mean, final_std = _stats([r["final_J"] for r in per_seed])
    init_mean, init_std = _stats([r["initial_J"] for r in per_seed])
    summary = {
        "n_seeds": manifest.n_seeds,
        "seeds": [r["seed"] for r in per_seed],
        "iterations": manifest.trainer.iterations,
        "oracle": manifest.oracle,
        "final_J": [r["final_J"] for r in per_seed],
        "final_J_mean": final_mean,
        "final_J_std": final_std,
        "initial_J": [r["initial_J"] for r in per_seed],
        "initial_J_mean": init_mean,
        "initial_J_std": init_std,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def ablate(manifest: RunManifest, axis: str, values: Sequence | None = None, output_dir=None) -> list[dict]:
    """Run the manifest once per value of ``axis``; write ``ablation_<axis>.csv``."""
    if axis not in ABLATION_AXES:
        raise ConfigError("axis", f"must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    values = list(ABLATION_AXES[axis] if values is None else values)
    out = Path(output_dir or manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    field_name = "lam" if axis == "lambda" else axis
    table = []
    for value in values:
        config = replace(manifest.trainer, **{field_name: value})
        sub = replace(manifest, trainer=config)
        summary = run_experiment(sub, out / f"{axis}={_fmt_value(value)}")
        table.append({"axis": axis, "value": value, "final_J_mean": summary["final_J_mean"],
                      "final_J_std": summary["final_J_std"], "n_seeds": summary["n_seeds"],
                      "final_J": summary["final_J"]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "final_J_mean", "final_J_std", "n_seeds"])
    for row in table:
        w.writerow([axis, _fmt_value(row["value"]), _fmt(row["final_J_mean"]), _fmt(row["final_J_std"]),
                    row["n_seeds"]])
    (out / f"ablation_{axis}.csv").write_text(buf.getvalue())
    return table


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# ---------------------------------------------------------------------------
# bound verification

BOUND_CHECKS = (
    "performance_difference",
    "tv_subadditivity",
    "transition_shift_telescoping",
    "a2po_single_agent_bound",
    "a2po_joint_bound",
    "naive_bound",
    "rpisa_bound",
    "mappo_bound",
    "coppo_bound",
    "incremental_tightening",
    "bound_ordering",
)

BOUND_TOL = 1e-10


def _leq(lhs, rhs, tol=BOUND_TOL) -> bool:
    return bool(np.all(np.asarray(lhs) <= np.asarray(rhs) + tol * np.maximum(1.0, np.abs(rhs))))


def check_instance(mdp: DecMdp, base: JointPolicy, target: JointPolicy, order: Sequence[int],
                   lam: float) -> tuple[oracle.BoundReport, dict[str, bool | None]]:
    """Evaluate every exact inequality on one instance.

    Returns the report and a map from check name to pass/fail; ``None``
    marks a check that does not apply (bound ordering when its sufficient
    condition fails).
    """
    report = oracle.bound_report(mdp, base, target, order, lam)
    out: dict[str, bool | None] = {}
    delta_j = report.returns[-1] - report.returns[0]
    out["performance_difference"] = abs(oracle.performance_difference(mdp, base, target) - delta_j) < 1e-9
    tv_sum = sum(oracle.tv_max(p, q) for p, q in zip(base.agents, target.agents))
    out["tv_subadditivity"] = oracle.joint_tv_max(base, target) <= tv_sum + 1e-12
    chain = oracle.intermediate_policies(base, target, order)
    total = oracle.transition_shift(mdp, base, chain[-1])
    pieces = sum(oracle.transition_shift(mdp, chain[k], chain[k + 1]) for k in range(len(order)))
    out["transition_shift_telescoping"] = bool(np.abs(total - pieces).max() <= 1e-12)
    out["a2po_single_agent_bound"] = _leq(report.single_agent_gaps["a2po"], report.single_agent_bounds["a2po"])
    out["a2po_joint_bound"] = _leq(report.gaps["a2po"], report.bounds["a2po"])
    out["naive_bound"] = _leq(report.single_agent_gaps["naive"], report.single_agent_bounds["naive"])
    out["rpisa_bound"] = _leq(report.single_agent_gaps["rpisa_ppo"], report.single_agent_bounds["rpisa_ppo"])
    out["mappo_bound"] = _leq(report.gaps["mappo"], report.bounds["mappo"])
    out["coppo_bound"] = _leq(report.gaps["coppo"], report.bounds["coppo"])
    inc = report.incremental
    out["incremental_tightening"] = _leq(inc[1:], inc[:-1])
    if report.ordering_condition:
        b = report.bounds
        out["bound_ordering"] = _leq(b["a2po"], b["coppo"]) and _leq(b["coppo"], b["mappo"])
    else:
        out["bound_ordering"] = None
    return report, out


def perturbed_target(base: JointPolicy, rng: np.random.Generator, step: float) -> JointPolicy:
    return JointPolicy(tuple(TabularPolicy(p.logits + step * rng.standard_normal(p.logits.shape))
                             for p in base.agents))


def random_instance(rng: np.random.Generator, mdp: DecMdp | None = None, n_states: int = 4, n_agents: int = 2,
                    n_actions: int = 2, step: float | None = None):
    """A random ``(mdp, base, target, order, lambda)`` tuple for bound checks."""
    if mdp is None:
        mdp = random_decmdp(n_states, n_agents, n_actions, seed=rng.integers(2**63 - 1),
                            sparsity=float(rng.uniform(0.2, 2.0)), gamma=float(rng.uniform(0.5, 0.95)))
    base = JointPolicy.random(mdp.n_states, mdp.action_counts, rng, scale=float(rng.uniform(0.0, 2.0)))
    if step is None:
        step = float(rng.uniform(0.02, 1.0))
    target = perturbed_target(base, rng, step)
    order = [int(i) for i in rng.permutation(mdp.n_agents)]
    return mdp, base, target, order


def verify_bounds(trials: int, seed: int, mdp: DecMdp | None = None, n_states: int = 4, n_agents: int = 2,
                  n_actions: int = 2, lam: float = 0.95, step: float | None = None):
    """Run ``trials`` random instances; return (reports, {check: [passed, applicable]})."""
    rng = np.random.default_rng(seed)
    tally = {name: [0, 0] for name in BOUND_CHECKS}
    reports = []
    for _ in range(trials):
        inst = random_instance(rng, mdp, n_states, n_agents, n_actions, step)
        report, checks = check_instance(*inst, lam)
        reports.append(report)
        for name, ok in checks.items():
            if ok is None:
                continue
            tally[name][1] += 1
            tally[name][0] += int(ok)
    return reports, tally
