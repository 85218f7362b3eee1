"""Monte-Carlo advantage estimation from outcome-only rollouts, the
advantage-as-reward planning pipeline with its certified suboptimality
bound, and the hard instance showing that planning on a Q-table instead
loses a constant.

The environment interface is outcome-only: a rollout reveals just the
total return from its start point, matching the verifier/rollout setting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .coverage import distribution_concentrability
from .mdp import (
    LayeredMdp,
    MdpValidationError,
    StateActionTable,
    TabularPolicy,
    build_mdp,
    occupancy_measures,
    optimal_policy,
    optimal_value,
    policy_return,
    value_tables,
)
from .outcome import RewardClass


@dataclass
class AdvantageSamples:
    """Rollout-based advantage estimates at a set of pairs.

    Each entry is (layer, state, action, estimate) with `rollouts`
    rollout pairs per estimate; `nu` records the sampling distribution
    over pairs the downstream fit is weighted by.
    """

    entries: tuple[tuple[int, str, int, float], ...]
    rollouts: int
    nu: StateActionTable
    policy_id: str = "mu"
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.rollouts < 1:
            raise MdpValidationError("rollout count must be at least 1")
        for layer, state, action, estimate in self.entries:
            if not math.isfinite(estimate):
                raise MdpValidationError(
                    f"non-finite estimate at ({state!r}, {action})"
                )


def _rollout_return(
    mdp: LayeredMdp,
    mu: TabularPolicy,
    layer: int,
    state_idx: int,
    rng: np.random.Generator,
    first_action: int | None = None,
) -> float:
    """Total reward from (state, [action]) to the end, following mu."""
    total = 0.0
    s = state_idx
    for h in range(layer, mdp.horizon):
        if h == layer and first_action is not None:
            a = first_action
        else:
            probs = mu.probs[h][s]
            a = int(np.searchsorted(np.cumsum(probs), rng.random()))
            a = min(a, mdp.n_actions - 1)
        total += float(mdp.reward.values[h][s, a])
        if h < mdp.horizon - 1:
            row = mdp.transitions[h][s, a]
            s = int(np.searchsorted(np.cumsum(row), rng.random()))
            s = min(s, len(mdp.layers[h + 1]) - 1)
    return total


def monte_carlo_advantage(
    mdp: LayeredMdp,
    mu: TabularPolicy,
    state: str,
    action: int,
    k: int,
    rng: np.random.Generator,
) -> float:
    """Unbiased rollout estimate of Q^mu(s, a) - V^mu(s).

    Averages k rollouts pinned to (s, a) and k independent rollouts from
    s under mu; using fresh V-rollouts (rather than a shared baseline)
    keeps the estimator exactly unbiased.
    """
    if k < 1:
        raise MdpValidationError("rollout count must be at least 1")
    layer, idx = mdp.skeleton.locate(state)
    q_est = sum(
        _rollout_return(mdp, mu, layer, idx, rng, first_action=action)
        for _ in range(k)
    ) / k
    v_est = sum(_rollout_return(mdp, mu, layer, idx, rng) for _ in range(k)) / k
    return q_est - v_est


def uniform_occupancy_distribution(mdp: LayeredMdp) -> StateActionTable:
    """Layer-normalized occupancy of the uniform policy (the default nu)."""
    occ = occupancy_measures(mdp, TabularPolicy.uniform(mdp.skeleton))
    vals = tuple(sa / mdp.horizon for sa in occ.state_action)
    return StateActionTable(mdp.skeleton, vals)


def collect_advantage_samples(
    mdp: LayeredMdp,
    mu: TabularPolicy,
    k: int,
    rng: np.random.Generator,
    nu: StateActionTable | None = None,
    policy_id: str = "mu",
    seed: int | None = None,
) -> AdvantageSamples:
    """One rollout estimate per pair with positive nu mass."""
    nu = nu or uniform_occupancy_distribution(mdp)
    entries = []
    for h, names in enumerate(mdp.layers):
        for i, name in enumerate(names):
            for a in range(mdp.n_actions):
                if nu.values[h][i, a] <= 0.0:
                    continue
                est = monte_carlo_advantage(mdp, mu, name, a, k, rng)
                entries.append((h, name, a, est))
    return AdvantageSamples(tuple(entries), k, nu, policy_id, seed)


@dataclass
class AdvantageFit:
    """Weighted least-squares selection over a finite class of tables."""

    index: int
    name: str
    table: StateActionTable
    scores: tuple[float, ...]
    weighted_loss: float
    eps_stat: float | None = None


def fit_advantage_reward(
    samples: AdvantageSamples,
    rc: RewardClass,
    mdp: LayeredMdp | None = None,
    mu: TabularPolicy | None = None,
) -> AdvantageFit:
    """argmin over the class of the nu-weighted squared error to the estimates.

    With the true MDP and rollout policy supplied, the exact population
    error E_nu[(r_hat - A^mu)^2] of the selected table is attached as
    eps_stat.
    """
    if not samples.entries:
        raise MdpValidationError("no advantage samples")
    losses = []
    for table in rc.tables:
        loss = 0.0
        for layer, state, action, estimate in samples.entries:
            w = samples.nu.lookup(state, action)
            loss += w * (table.lookup(state, action) - estimate) ** 2
        losses.append(float(loss))
    best = 0
    for j in range(1, len(losses)):
        if losses[j] < losses[best]:
            best = j
    fit = AdvantageFit(
        best, rc.names[best], rc.tables[best], tuple(losses), losses[best]
    )
    if mdp is not None and mu is not None:
        adv = value_tables(mdp, mu).advantage_table()
        err = 0.0
        for h in range(mdp.horizon):
            err += float(
                (samples.nu.values[h] * (rc.tables[best].values[h] - adv.values[h]) ** 2).sum()
            )
        fit.eps_stat = err
    return fit


Planner = Callable[[LayeredMdp, StateActionTable], TabularPolicy]


def exact_planner(mdp: LayeredMdp, reward: StateActionTable) -> TabularPolicy:
    return optimal_policy(mdp, reward)


def truncated_planner(free_suffix: int) -> Planner:
    """A deliberately weak planner: action 0 before the last `free_suffix`
    layers, optimal afterwards. Gives a nonzero planner error for
    bound-composition experiments."""

    def plan(mdp: LayeredMdp, reward: StateActionTable) -> TabularPolicy:
        full = optimal_policy(mdp, reward)
        choices = []
        cut = mdp.horizon - free_suffix
        for h in range(mdp.horizon):
            if h < cut:
                choices.append(np.zeros(len(mdp.layers[h]), dtype=np.int64))
            else:
                choices.append(np.argmax(full.probs[h], axis=1))
        return TabularPolicy.deterministic(mdp.skeleton, choices)

    return plan


@dataclass
class PipelineReport:
    """Everything needed to audit one advantage-as-reward run.

    Both readings of the statistical term are evaluated: bound_sqrt uses
    2H sqrt(C eps_stat) (the reading under which the guarantee is provable)
    and bound_linear uses 2H sqrt(C) eps_stat (the literal display); the
    flags record which held on this run.
    """

    policy: TabularPolicy
    suboptimality: float
    eps_stat: float
    eps_alg: float
    c_sa_nu: float
    bound_sqrt: float
    bound_linear: float
    holds_sqrt: bool
    holds_linear: bool
    fit: AdvantageFit


def advantage_pipeline(
    mdp: LayeredMdp,
    mu: TabularPolicy,
    rc: RewardClass,
    k: int,
    rng: np.random.Generator,
    nu: StateActionTable | None = None,
    planner: Planner | None = None,
) -> PipelineReport:
    """Estimate A^mu by rollouts, fit a table, plan on it, audit the result."""
    nu = nu or uniform_occupancy_distribution(mdp)
    samples = collect_advantage_samples(mdp, mu, k, rng, nu=nu)
    fit = fit_advantage_reward(samples, rc, mdp=mdp, mu=mu)
    plan = planner or exact_planner
    pi_hat = plan(mdp, fit.table)
    eps_alg = optimal_value(mdp, fit.table) - policy_return(mdp, pi_hat, fit.table)
    suboptimality = optimal_value(mdp) - policy_return(mdp, pi_hat)
    c_sa = distribution_concentrability(mdp, nu, "all").value
    eps_stat = fit.eps_stat if fit.eps_stat is not None else fit.weighted_loss
    bound_sqrt = 2 * mdp.horizon * math.sqrt(max(c_sa * eps_stat, 0.0)) + eps_alg
    bound_linear = 2 * mdp.horizon * math.sqrt(max(c_sa, 0.0)) * eps_stat + eps_alg
    slack = 1e-9
    return PipelineReport(
        policy=pi_hat,
        suboptimality=suboptimality,
        eps_stat=eps_stat,
        eps_alg=eps_alg,
        c_sa_nu=c_sa,
        bound_sqrt=bound_sqrt,
        bound_linear=bound_linear,
        holds_sqrt=suboptimality <= bound_sqrt + slack,
        holds_linear=suboptimality <= bound_linear + slack,
        fit=fit,
    )


def q_as_reward_gap(
    mdp: LayeredMdp, mu: TabularPolicy
) -> tuple[TabularPolicy, float]:
    """Plan greedily with Q^mu as the reward; return the policy and its
    optimality gap under the true reward."""
    q_table = value_tables(mdp, mu).q_table()
    pi_hat = optimal_policy(mdp, q_table)
    gap = optimal_value(mdp) - policy_return(mdp, pi_hat)
    return pi_hat, gap


def counterexample_mdp() -> tuple[LayeredMdp, TabularPolicy]:
    """The two-layer instance where Q-as-reward planning loses 1/3.

    Layers {a} and {b, c}; action 0 at a leads to b, action 1 to c.
    Rewards: r(b,0)=1, r(b,1)=0, r(c,0)=2/3, r(c,1)=1/2, r(a,.)=0.
    The rollout policy mu plays 0 at a and 1 at b and c.
    """
    transitions = [np.zeros((1, 2, 2))]
    transitions[0][0, 0, 0] = 1.0  # a --0--> b
    transitions[0][0, 1, 1] = 1.0  # a --1--> c
    rewards = [
        np.zeros((1, 2)),
        np.array([[1.0, 0.0], [2.0 / 3.0, 0.5]]),
    ]
    mdp = build_mdp([["a"], ["b", "c"]], 2, transitions, rewards, "a")
    mu = TabularPolicy.deterministic(mdp.skeleton, {"a": 0, "b": 1, "c": 1})
    return mdp, mu
