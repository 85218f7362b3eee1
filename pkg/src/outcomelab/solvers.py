"""Offline RL procedures: tabular FQI, certainty-equivalence planning, and
pessimistic version-space planning straight from outcome data.

Unseen (s, a) pairs follow one fixed rule everywhere: empirical reward
0, transition uniform over the next layer, argmax ties to action 0.
Coverage failure modes are then reproducible rather than
implementation-dependent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import (
    EnumerationCapError,
    LayeredMdp,
    MdpSkeleton,
    MdpValidationError,
    PolicyClass,
    StateActionTable,
    TabularPolicy,
    all_deterministic_policies,
    build_mdp,
    encode_trajectories,
    optimal_policy,
    policy_return,
)
from .outcome import OutcomeDataset, ProcessDataset


@dataclass
class ModelClass:
    """Finite list of candidate MDPs sharing (S, A, H)."""

    candidates: tuple[LayeredMdp, ...]
    names: tuple[str, ...]
    contains_truth: bool

    def __len__(self) -> int:
        return len(self.candidates)

    @classmethod
    def build(
        cls,
        candidates: Sequence[LayeredMdp],
        names: Sequence[str] | None = None,
        truth: LayeredMdp | None = None,
    ) -> "ModelClass":
        if not candidates:
            raise MdpValidationError("model class must be nonempty")
        skeleton = candidates[0].skeleton
        for j, mdp in enumerate(candidates):
            if mdp.skeleton.layers != skeleton.layers or mdp.n_actions != skeleton.n_actions:
                raise MdpValidationError(f"candidate {j} has an incompatible skeleton")
        if names is None:
            names = tuple(f"M_{j}" for j in range(len(candidates)))
        contains = False
        if truth is not None:
            for mdp in candidates:
                same_p = all(
                    np.array_equal(a, b)
                    for a, b in zip(mdp.transitions, truth.transitions)
                )
                if same_p and mdp.reward.equals(truth.reward):
                    contains = True
                    break
        return cls(tuple(candidates), tuple(names), contains)


@dataclass
class VersionSpace:
    """Indices of the statistically plausible candidates at threshold alpha."""

    indices: tuple[int, ...]
    alpha: float
    scores: tuple[float, ...]


def _empirical_model(
    data: ProcessDataset, skeleton: MdpSkeleton
) -> tuple[tuple[np.ndarray, ...], StateActionTable]:
    """Count-based transition and mean-reward estimates with the default rule."""
    H = skeleton.horizon
    sizes = skeleton.layer_sizes()
    A = skeleton.n_actions
    trans_counts = [np.zeros((sizes[h], A, sizes[h + 1])) for h in range(H - 1)]
    reward_sums = [np.zeros((sizes[h], A)) for h in range(H)]
    visits = [np.zeros((sizes[h], A)) for h in range(H)]
    si, ai = encode_trajectories(skeleton, data.records)
    for k, traj in enumerate(data.records):
        for h in range(H):
            s, a = si[k, h], ai[k, h]
            visits[h][s, a] += 1.0
            reward_sums[h][s, a] += traj.step_rewards[h]
            if h < H - 1:
                trans_counts[h][s, a, si[k, h + 1]] += 1.0
    transitions = []
    for h in range(H - 1):
        seen = visits[h] > 0
        t = np.where(
            seen[:, :, None],
            trans_counts[h] / np.maximum(visits[h][:, :, None], 1.0),
            1.0 / sizes[h + 1],
        )
        transitions.append(t)
    rewards = tuple(
        np.where(visits[h] > 0, reward_sums[h] / np.maximum(visits[h], 1.0), 0.0)
        for h in range(H)
    )
    return tuple(transitions), StateActionTable(skeleton, rewards)


def model_based_greedy(
    data: ProcessDataset,
    skeleton: MdpSkeleton,
    reward_table: StateActionTable | None = None,
) -> TabularPolicy:
    """Maximum-likelihood tabular model, then greedy planning.

    With `reward_table` the fitted reward model is used everywhere in
    place of the empirical per-pair means (the natural consumer when a
    full reward model is available); transitions always come from counts.
    """
    if len(data) == 0:
        raise MdpValidationError("empty dataset")
    transitions, rewards = _empirical_model(data, skeleton)
    model = build_mdp(
        skeleton.layers,
        skeleton.n_actions,
        transitions,
        (reward_table or rewards).values,
        skeleton.initial_state,
        validate_total_reward=False,
    )
    return optimal_policy(model)


def fqi(data: ProcessDataset, skeleton: MdpSkeleton) -> TabularPolicy:
    """Tabular fitted Q-iteration: per-pair regression targets, backward.

    Q_h(s, a) is the empirical mean of r_h + max_a' Q_{h+1}(s', a') over
    the transitions observed at (s, a). On tabular data this coincides
    with planning in the count-based model.
    """
    if len(data) == 0:
        raise MdpValidationError("empty dataset")
    H = skeleton.horizon
    sizes = skeleton.layer_sizes()
    A = skeleton.n_actions
    si, ai = encode_trajectories(skeleton, data.records)
    rewards = np.array([traj.step_rewards for traj in data.records])
    choices: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    v_next: np.ndarray | None = None
    for h in range(H - 1, -1, -1):
        target_sums = np.zeros((sizes[h], A))
        counts = np.zeros((sizes[h], A))
        targets = rewards[:, h].copy()
        if h < H - 1:
            targets = targets + v_next[si[:, h + 1]]
        np.add.at(target_sums, (si[:, h], ai[:, h]), targets)
        np.add.at(counts, (si[:, h], ai[:, h]), 1.0)
        if h < H - 1:
            # unseen pairs: reward 0 plus the uniform-average of next values
            default = np.full((sizes[h], A), float(np.mean(v_next)))
        else:
            default = np.zeros((sizes[h], A))
        q = np.where(counts > 0, target_sums / np.maximum(counts, 1.0), default)
        choices[h] = np.argmax(q, axis=1)
        v_next = np.max(q, axis=1)
    return TabularPolicy.deterministic(skeleton, choices)


def score_models(data: OutcomeDataset, mc: ModelClass) -> tuple[float, ...]:
    """Log-likelihood of transitions minus squared total-reward residuals.

    A record with zero transition probability under a candidate sends
    that candidate's score to -inf.
    """
    skeleton = mc.candidates[0].skeleton
    si, ai = encode_trajectories(skeleton, data.records)
    totals = np.array([traj.total_reward for traj in data.records])
    scores = []
    for mdp in mc.candidates:
        loglik = np.zeros(len(data.records))
        for h in range(skeleton.horizon - 1):
            p = mdp.transitions[h][si[:, h], ai[:, h], si[:, h + 1]]
            with np.errstate(divide="ignore"):
                loglik += np.log(p)
        predicted = mdp.reward.gather(si, ai)
        total = float((loglik - (predicted - totals) ** 2).sum())
        scores.append(total if math.isfinite(total) else -math.inf)
    return tuple(scores)


def version_space(data: OutcomeDataset, mc: ModelClass, alpha: float) -> VersionSpace:
    """Candidates within alpha of the best score."""
    if alpha < 0:
        raise MdpValidationError("alpha must be nonnegative")
    scores = score_models(data, mc)
    best = max(scores)
    if best == -math.inf:
        raise MdpValidationError(
            "every candidate assigns probability 0 to some record"
        )
    indices = tuple(j for j, s in enumerate(scores) if best - s <= alpha)
    return VersionSpace(indices, alpha, scores)


def armor_total_reward(
    data: OutcomeDataset,
    mc: ModelClass,
    alpha: float,
    policy_class: PolicyClass | None = None,
    cap: int | None = None,
) -> TabularPolicy:
    """Max-min planning over the version space built from outcome data.

    Returns argmax over the policy class (all deterministic policies
    when none is given) of the worst-case value across surviving
    candidates; ties break to the lowest policy index.
    """
    space = version_space(data, mc, alpha)
    skeleton = mc.candidates[0].skeleton
    if policy_class is None:
        policies = list(all_deterministic_policies(skeleton, cap=cap))
    else:
        policies = list(policy_class.policies)
    if not policies:
        raise MdpValidationError("empty policy class")
    best_policy = None
    best_value = -math.inf
    for pi in policies:
        value = min(
            policy_return(mc.candidates[j], pi) for j in space.indices
        )
        if value > best_value:
            best_value = value
            best_policy = pi
    assert best_policy is not None
    return best_policy


def choose_alpha(mc_size: int, delta: float, c: float = 2.0) -> float:
    """Version-space threshold c * log(|M| / delta)."""
    if not 0.0 < delta < 1.0:
        raise MdpValidationError("delta must lie in (0, 1)")
    return c * math.log(mc_size / delta)


def calibrate_alpha_constant(
    mdp: LayeredMdp,
    pi_off: TabularPolicy,
    mc: ModelClass,
    truth_index: int,
    n: int,
    seeds: Sequence[int],
    delta: float = 0.05,
    c_grid: Sequence[float] = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0),
    target_rate: float = 0.99,
) -> float:
    """Smallest c in the grid keeping the true model in the version space
    in at least `target_rate` of the seeded replications."""
    from .outcome import collect_outcome_dataset

    hits = {c: 0 for c in c_grid}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        data = collect_outcome_dataset(mdp, pi_off, n, rng, seed=seed)
        scores = score_models(data, mc)
        gap = max(scores) - scores[truth_index]
        for c in c_grid:
            if gap <= choose_alpha(len(mc), delta, c):
                hits[c] += 1
    for c in c_grid:
        if hits[c] >= target_rate * len(seeds):
            return c
    raise MdpValidationError("no constant in the grid reaches the target rate")
