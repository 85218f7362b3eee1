"""Outcome supervision datasets, least-squares reward imputation, and the
split-fit-impute-solve pipeline that turns an outcome-data solver out of
any process-data solver.

Reward classes are finite and fitted by exhaustive argmin, which keeps
optimizer noise out of the statistical checks; ties break to the lowest
class index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .mdp import (
    LayeredMdp,
    MdpSkeleton,
    MdpValidationError,
    StateActionTable,
    TabularPolicy,
    Trajectory,
    encode_trajectories,
    optimal_value,
    path_sum_extrema,
    policy_return,
    sample_trajectories,
    trajectories_from_arrays,
    trajectory_ensemble,
)


@dataclass
class OutcomeDataset:
    """Trajectories carrying only their total reward (no per-step signal)."""

    records: tuple[Trajectory, ...]
    policy_id: str = "pi_off"
    seed: int | None = None

    def __post_init__(self) -> None:
        for k, traj in enumerate(self.records):
            if traj.total_reward is None:
                raise MdpValidationError(f"outcome record {k} lacks a total reward")
            if traj.step_rewards is not None:
                raise MdpValidationError(
                    f"outcome record {k} carries per-step rewards"
                )

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class ProcessDataset:
    """Trajectories carrying per-step rewards."""

    records: tuple[Trajectory, ...]
    policy_id: str = "pi_off"
    seed: int | None = None

    def __post_init__(self) -> None:
        for k, traj in enumerate(self.records):
            if traj.step_rewards is None:
                raise MdpValidationError(f"process record {k} lacks step rewards")
            if not all(math.isfinite(r) for r in traj.step_rewards):
                raise MdpValidationError(f"process record {k} has non-finite rewards")

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class RewardClass:
    """A finite, ordered set of candidate reward tables.

    `realizable` records whether the generating MDP's true reward is a
    member (exact array equality). Construction checks the per-pair
    range and, when a total range is given, that every member's path
    sums stay inside it on the MDP's support.
    """

    tables: tuple[StateActionTable, ...]
    names: tuple[str, ...]
    realizable: bool

    def __len__(self) -> int:
        return len(self.tables)

    @classmethod
    def build(
        cls,
        mdp: LayeredMdp,
        tables: Sequence[StateActionTable],
        names: Sequence[str] | None = None,
        member_range: tuple[float, float] = (0.0, 1.0),
        total_range: tuple[float, float] | None = (0.0, 1.0),
    ) -> "RewardClass":
        if not tables:
            raise MdpValidationError("reward class must be nonempty")
        lo, hi = member_range
        for j, table in enumerate(tables):
            for h, vals in enumerate(table.values):
                if np.any(vals < lo - 1e-12) or np.any(vals > hi + 1e-12):
                    raise MdpValidationError(
                        f"reward class member {j} leaves [{lo}, {hi}] at layer {h + 1}"
                    )
            if total_range is not None:
                t_lo, t_hi = path_sum_extrema(mdp, table)
                if t_lo < total_range[0] - 1e-9 or t_hi > total_range[1] + 1e-9:
                    raise MdpValidationError(
                        f"reward class member {j} has trajectory totals in "
                        f"[{t_lo!r}, {t_hi!r}], outside {total_range}"
                    )
        realizable = any(table.equals(mdp.reward) for table in tables)
        if names is None:
            names = tuple(f"r_{j}" for j in range(len(tables)))
        return cls(tuple(tables), tuple(names), realizable)


def collect_outcome_dataset(
    mdp: LayeredMdp,
    pi_off: TabularPolicy,
    n: int,
    rng: np.random.Generator,
    policy_id: str = "pi_off",
    seed: int | None = None,
) -> OutcomeDataset:
    """n i.i.d. trajectories from pi_off with only the total reward attached."""
    if n < 1:
        raise MdpValidationError("dataset size must be at least 1")
    si, ai, rew = sample_trajectories(mdp, pi_off, n, rng)
    records = trajectories_from_arrays(mdp, si, ai, rew, keep="total")
    return OutcomeDataset(tuple(records), policy_id, seed)


@dataclass
class RewardFit:
    """Result of an exhaustive fit over a finite reward class."""

    index: int
    name: str
    table: StateActionTable
    scores: tuple[float, ...]
    train_loss: float
    excess_risk: float | None = None


def least_squares_reward(
    data: OutcomeDataset,
    rc: RewardClass,
    mdp: LayeredMdp | None = None,
    pi_off: TabularPolicy | None = None,
    cap: int | None = None,
) -> RewardFit:
    """argmin over the class of the summed squared trajectory-level residual.

    With the true MDP and data policy supplied, the exact population
    excess risk E_off[(r_hat(tau) - r*(tau))^2] is computed by
    enumeration and attached as a diagnostic.
    """
    if len(data) == 0:
        raise MdpValidationError("cannot fit a reward on an empty dataset")
    skeleton = rc.tables[0].skeleton
    si, ai = encode_trajectories(skeleton, data.records)
    totals = np.array([traj.total_reward for traj in data.records])
    losses = []
    for table in rc.tables:
        predicted = table.gather(si, ai)
        losses.append(float(((predicted - totals) ** 2).sum()))
    best = 0
    for j in range(1, len(losses)):
        if losses[j] < losses[best]:
            best = j
    fit = RewardFit(best, rc.names[best], rc.tables[best], tuple(losses), losses[best])
    if mdp is not None and pi_off is not None:
        diff = rc.tables[best].minus(mdp.reward)
        _, probs, sums = trajectory_ensemble(mdp, [pi_off], [diff], cap=cap)
        fit.excess_risk = float((probs[:, 0] * sums[:, 0] ** 2).sum())
    return fit


def impute_process(data: OutcomeDataset, r_hat: StateActionTable) -> ProcessDataset:
    """Replace each record's total reward with per-step values from r_hat."""
    records = []
    for traj in data.records:
        steps = tuple(r_hat.lookup(s, a) for s, a in zip(traj.states, traj.actions))
        records.append(Trajectory(traj.states, traj.actions, steps, float(sum(steps))))
    return ProcessDataset(tuple(records), data.policy_id, data.seed)


def split_records(
    records: Sequence[Trajectory], rng: np.random.Generator
) -> tuple[tuple[Trajectory, ...], tuple[Trajectory, ...]]:
    """Even/odd split of a seeded shuffle; an odd count favors the first half."""
    order = rng.permutation(len(records))
    first = tuple(records[i] for i in order[0::2])
    second = tuple(records[i] for i in order[1::2])
    return first, second


Solver = Callable[[ProcessDataset, MdpSkeleton], TabularPolicy]


def solve_from_outcomes(
    data: OutcomeDataset,
    rc: RewardClass,
    solver: Solver,
    rng: np.random.Generator,
    skeleton: MdpSkeleton | None = None,
) -> TabularPolicy:
    """Fit a reward on half the outcome data, impute the other half, solve.

    The split is deterministic given the generator state, so the whole
    pipeline is reproducible from its seed.
    """
    if len(data) < 2:
        raise MdpValidationError("need at least two records to split")
    first, second = split_records(data.records, rng)
    fit = least_squares_reward(OutcomeDataset(first, data.policy_id), rc)
    imputed = impute_process(OutcomeDataset(second, data.policy_id), fit.table)
    return solver(imputed, skeleton or rc.tables[0].skeleton)


def reward_evaluation_gap(
    mdp: LayeredMdp, r_hat: StateActionTable, pi: TabularPolicy
) -> float:
    """Exact |J_{r_hat}(pi) - J_{r*}(pi)| for one policy."""
    return abs(policy_return(mdp, pi, r_hat) - policy_return(mdp, pi))


def max_reward_evaluation_gap(mdp: LayeredMdp, r_hat: StateActionTable) -> float:
    """sup over deterministic policies of |J_{r_hat}(pi) - J_{r*}(pi)|.

    The supremum of the signed difference is attained by planning on the
    difference table, so two backward inductions give the exact value
    without policy enumeration (cross-checked against enumeration in the
    tests).
    """
    diff = r_hat.minus(mdp.reward)
    high = optimal_value(mdp, diff)
    low = -optimal_value(mdp, diff.scaled(-1.0))
    return max(abs(high), abs(low))
