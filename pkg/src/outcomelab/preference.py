"""Preference generation and learning: pairwise labels from the logistic
comparison model, maximum-likelihood reward selection, the regularized
objective with its soft-backward closed form, contrastive policy fitting
over a finite class, and the two-copy construction that reduces pairwise
moments to single-trajectory moments.

The pairwise label model is P(tau beats tau') = sigmoid(r(tau) - r(tau')),
which depends only on reward differences; constant shifts are invisible
to every estimator here.
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
    PolicyClass,
    StateActionTable,
    TabularPolicy,
    Trajectory,
    build_mdp,
    encode_trajectories,
    path_sum_extrema,
    sample_trajectories,
    trajectories_from_arrays,
    trajectory_ensemble,
)
from .outcome import RewardClass, RewardFit


def sigmoid(x: float | np.ndarray):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    # stable log(sigmoid(x)); handles +-inf
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


@dataclass
class PreferenceDataset:
    """Ordered (winner, loser) trajectory pairs drawn from one policy."""

    pairs: tuple[tuple[Trajectory, Trajectory], ...]
    policy_id: str = "pi_ref"
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class KlConfig:
    """Regularization strength and the reward-range bound V_max.

    check_value_bound controls whether class members are screened
    against |log(pi(tau)/pi_ref(tau))| <= V_max / beta during fitting.
    """

    beta: float
    v_max: float
    check_value_bound: bool = True

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise MdpValidationError("beta must be positive")
        if self.v_max <= 0:
            raise MdpValidationError("v_max must be positive")


RewardLike = StateActionTable | Callable[[Trajectory], float]


def _score(reward: RewardLike, traj: Trajectory) -> float:
    if isinstance(reward, StateActionTable):
        return reward.trajectory_total(traj)
    return float(reward(traj))


def sample_preference(
    mdp: LayeredMdp,
    pi_ref: TabularPolicy,
    reward: RewardLike,
    rng: np.random.Generator,
) -> tuple[Trajectory, Trajectory]:
    """Draw two i.i.d. trajectories and order them by a logistic coin.

    The first trajectory wins with probability sigmoid(r(tau) - r(tau')).
    """
    si, ai, rew = sample_trajectories(mdp, pi_ref, 2, rng)
    tau, tau2 = trajectories_from_arrays(mdp, si, ai, rew, keep="none")
    p = float(sigmoid(_score(reward, tau) - _score(reward, tau2)))
    if rng.random() < p:
        return tau, tau2
    return tau2, tau


def collect_preference_dataset(
    mdp: LayeredMdp,
    pi_ref: TabularPolicy,
    reward: RewardLike,
    n: int,
    rng: np.random.Generator,
    policy_id: str = "pi_ref",
    seed: int | None = None,
) -> PreferenceDataset:
    """n labeled pairs; table rewards take a vectorized path.

    Both paths draw 2n trajectories from pi_ref and order each pair with
    one logistic coin; only the generator call order differs.
    """
    if isinstance(reward, StateActionTable):
        si, ai, _ = sample_trajectories(mdp, pi_ref, 2 * n, rng)
        scores = reward.gather(si, ai)
        win_first = rng.random(n) < sigmoid(scores[0::2] - scores[1::2])
        trajs = trajectories_from_arrays(
            mdp, si, ai, np.zeros((2 * n, mdp.horizon)), keep="none"
        )
        pairs = tuple(
            (trajs[2 * k], trajs[2 * k + 1])
            if win_first[k]
            else (trajs[2 * k + 1], trajs[2 * k])
            for k in range(n)
        )
    else:
        pairs = tuple(sample_preference(mdp, pi_ref, reward, rng) for _ in range(n))
    return PreferenceDataset(pairs, policy_id, seed)


def mle_reward(data: PreferenceDataset, rc: RewardClass) -> RewardFit:
    """Maximum-likelihood reward over a finite class.

    Maximizes sum log sigmoid(r(win) - r(lose)); ties break to the
    lowest class index. (Only reward differences enter, so members
    shifted by a constant per trajectory are indistinguishable.)
    """
    if len(data) == 0:
        raise MdpValidationError("cannot fit on an empty preference dataset")
    skeleton = rc.tables[0].skeleton
    wins = [w for w, _ in data.pairs]
    loses = [l for _, l in data.pairs]
    si_w, ai_w = encode_trajectories(skeleton, wins)
    si_l, ai_l = encode_trajectories(skeleton, loses)
    scores = []
    for table in rc.tables:
        margin = table.gather(si_w, ai_w) - table.gather(si_l, ai_l)
        scores.append(float(log_sigmoid(margin).sum()))
    best = 0
    for j in range(1, len(scores)):
        if scores[j] > scores[best]:
            best = j
    return RewardFit(best, rc.names[best], rc.tables[best], tuple(scores), -scores[best])


def log_policy_ratio_table(pi: TabularPolicy, pi_ref: TabularPolicy) -> StateActionTable:
    """Per-pair log(pi(a|s) / pi_ref(a|s)); 0/0 pairs map to -inf - -inf = nan-free -inf."""
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = []
        for p, q in zip(pi.probs, pi_ref.probs):
            v = np.where(
                p == 0.0, -np.inf, np.log(np.maximum(p, 1e-300)) - np.log(np.maximum(q, 1e-300))
            )
            v = np.where((p > 0.0) & (q == 0.0), np.inf, v)
            vals.append(v)
    return StateActionTable(pi.skeleton, tuple(vals))


def implicit_value_range(
    mdp: LayeredMdp, pi: TabularPolicy, pi_ref: TabularPolicy
) -> float:
    """max over support trajectories of |log(pi(tau) / pi_ref(tau))|, exactly."""
    table = log_policy_ratio_table(pi, pi_ref)
    lo, hi = path_sum_extrema(mdp, table)
    if math.isnan(lo) or math.isnan(hi):
        return math.inf
    return max(abs(lo), abs(hi))


def kl_objective(
    mdp: LayeredMdp,
    pi: TabularPolicy,
    pi_ref: TabularPolicy,
    cfg: KlConfig,
    reward: StateActionTable | None = None,
    cap: int | None = None,
) -> float:
    """Exact E_pi[r(tau) - beta * log(pi(tau)/pi_ref(tau))] by enumeration.

    Returns -inf when pi puts mass on a trajectory that pi_ref cannot
    produce (infinite divergence).
    """
    r = reward or mdp.reward
    paths, probs, sums = trajectory_ensemble(mdp, [pi, pi_ref], [r], cap=cap)
    total = 0.0
    for k, (si, ai) in enumerate(paths):
        d_pi = float(probs[k, 0])
        if d_pi == 0.0:
            continue
        pi_prob = 1.0
        ref_prob = 1.0
        for h, (s, a) in enumerate(zip(si, ai)):
            pi_prob *= float(pi.probs[h][s, a])
            ref_prob *= float(pi_ref.probs[h][s, a])
        if ref_prob == 0.0:
            return -math.inf
        total += d_pi * (float(sums[k, 0]) - cfg.beta * math.log(pi_prob / ref_prob))
    return total


def kl_optimal_policy(
    mdp: LayeredMdp,
    reward: StateActionTable,
    pi_ref: TabularPolicy,
    beta: float,
) -> TabularPolicy:
    """The Markov policy whose trajectory law is ∝ pi_ref(tau) e^{r(tau)/beta}.

    Requires deterministic transitions (each row one-hot); the soft
    backward recursion then assembles the tilted policy layer by layer.
    Computed in log space for stability at small beta.
    """
    if beta <= 0:
        raise MdpValidationError("beta must be positive")
    successors = _deterministic_successors(mdp)
    H = mdp.horizon
    log_z_next = np.zeros(len(mdp.layers[H - 1]))
    rows: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    with np.errstate(divide="ignore"):
        for h in range(H - 1, -1, -1):
            logits = np.log(pi_ref.probs[h]) + reward.values[h] / beta
            if h == H - 1:
                log_z_next_here = np.zeros((len(mdp.layers[h]), mdp.n_actions))
            else:
                log_z_next_here = log_z_next[successors[h]]
            logits = logits + log_z_next_here
            log_z = np.logaddexp.reduce(logits, axis=1)
            rows[h] = np.exp(logits - log_z[:, None])
            rows[h] = rows[h] / rows[h].sum(axis=1, keepdims=True)
            log_z_next = log_z
    return TabularPolicy(mdp.skeleton, tuple(rows))


def _deterministic_successors(mdp: LayeredMdp) -> list[np.ndarray]:
    """succ[h][s, a] = the unique next-state index; error if stochastic."""
    succ = []
    for h in range(mdp.horizon - 1):
        t = mdp.transitions[h]
        top = t.max(axis=2)
        if np.any(top < 1.0 - 1e-12):
            s, a = np.unravel_index(int(np.argmin(top)), top.shape)
            raise MdpValidationError(
                f"stochastic transition at layer {h + 1}, state "
                f"{mdp.layers[h][s]!r}, action {a}; deterministic dynamics required"
            )
        succ.append(np.argmax(t, axis=2))
    return succ


@dataclass
class DpoFit:
    """Contrastive fit over a finite policy class."""

    index: int
    name: str
    policy: TabularPolicy
    scores: tuple[float, ...]
    bound_violations: tuple[bool, ...] | None = None


def dpo_fit(
    data: PreferenceDataset,
    policy_class: PolicyClass,
    pi_ref: TabularPolicy,
    beta: float,
    cfg: KlConfig | None = None,
    mdp: LayeredMdp | None = None,
) -> DpoFit:
    """argmax over the class of the contrastive implicit-reward likelihood.

    Score of pi: sum over pairs of
    log sigmoid(beta [log(pi/pi_ref)(win) - log(pi/pi_ref)(lose)]).
    A candidate assigning probability 0 to any observed trajectory
    scores -inf. With cfg and mdp supplied, each member's implicit value
    range is checked against V_max / beta and flagged (not an error).
    """
    if len(data) == 0:
        raise MdpValidationError("cannot fit on an empty preference dataset")
    skeleton = policy_class.policies[0].skeleton
    wins = [w for w, _ in data.pairs]
    loses = [l for _, l in data.pairs]
    si_w, ai_w = encode_trajectories(skeleton, wins)
    si_l, ai_l = encode_trajectories(skeleton, loses)
    scores = []
    for pi in policy_class.policies:
        ratio = log_policy_ratio_table(pi, pi_ref)
        # -inf log ratios on observed trajectories surface as nan margins
        with np.errstate(invalid="ignore"):
            margins = beta * (ratio.gather(si_w, ai_w) - ratio.gather(si_l, ai_l))
        if np.any(np.isnan(margins)):
            scores.append(-math.inf)
            continue
        total = float(log_sigmoid(margins).sum())
        scores.append(total if math.isfinite(total) else -math.inf)
    best = 0
    for j in range(1, len(scores)):
        if scores[j] > scores[best]:
            best = j
    violations = None
    if cfg is not None and cfg.check_value_bound and mdp is not None:
        violations = tuple(
            implicit_value_range(mdp, pi, pi_ref) > cfg.v_max / beta + 1e-9
            for pi in policy_class.policies
        )
    return DpoFit(
        best, policy_class.names[best], policy_class.policies[best],
        tuple(scores), violations,
    )


@dataclass
class PairedMdp:
    """Two copies of an MDP in sequence with a restart in the middle.

    The doubled MDP has horizon 2H; the second half replays the original
    from its initial state. A caller-supplied per-pair function f
    becomes +f on the first half and -f on the second, so the doubled
    path sum equals f(tau) - f(tau~) for the two independent halves.
    """

    mdp: LayeredMdp
    source: LayeredMdp
    functional: StateActionTable | None

    def lift_policy(
        self, first: TabularPolicy, second: TabularPolicy
    ) -> TabularPolicy:
        rows = tuple(p.copy() for p in first.probs) + tuple(
            p.copy() for p in second.probs
        )
        return TabularPolicy(self.mdp.skeleton, rows)


def paired_mdp(
    mdp: LayeredMdp, functional: StateActionTable | None = None
) -> PairedMdp:
    """Build the horizon-2H doubled MDP (second-half states get a ' suffix)."""
    H = mdp.horizon
    layers: list[list[str]] = [list(names) for names in mdp.layers]
    layers += [[f"{name}'" for name in names] for names in mdp.layers]
    sizes = mdp.skeleton.layer_sizes()
    transitions = [t.copy() for t in mdp.transitions]
    restart = np.zeros((sizes[H - 1], mdp.n_actions, sizes[0]))
    _, i0 = mdp.skeleton.locate(mdp.initial_state)
    restart[:, :, i0] = 1.0
    transitions.append(restart)
    transitions += [t.copy() for t in mdp.transitions]
    rewards = [r.copy() for r in mdp.reward.values]
    rewards += [np.zeros_like(r) for r in mdp.reward.values]
    doubled = build_mdp(
        layers, mdp.n_actions, transitions, rewards,
        mdp.initial_state, validate_total_reward=False,
    )
    g = None
    if functional is not None:
        vals = tuple(v.copy() for v in functional.values) + tuple(
            -v for v in functional.values
        )
        g = StateActionTable(doubled.skeleton, vals)
    return PairedMdp(doubled, mdp, g)


def pairwise_abs_difference(
    mdp: LayeredMdp,
    pi: TabularPolicy,
    pi2: TabularPolicy,
    table: StateActionTable,
    cap: int | None = None,
) -> float:
    """Exact E_{tau~pi, tau~pi2} |f(tau) - f(tau~)| by double enumeration."""
    _, probs, sums = trajectory_ensemble(mdp, [pi, pi2], [table], cap=cap)
    p, q, v = probs[:, 0], probs[:, 1], sums[:, 0]
    return float(np.einsum("i,j,ij->", p, q, np.abs(v[:, None] - v[None, :])))


def pairwise_square_difference(
    mdp: LayeredMdp,
    pi: TabularPolicy,
    pi2: TabularPolicy,
    table: StateActionTable,
    cap: int | None = None,
) -> float:
    """Exact E_{tau~pi, tau~pi2} (f(tau) - f(tau~))^2."""
    _, probs, sums = trajectory_ensemble(mdp, [pi, pi2], [table], cap=cap)
    p, q, v = probs[:, 0], probs[:, 1], sums[:, 0]
    return float(np.einsum("i,j,ij->", p, q, (v[:, None] - v[None, :]) ** 2))
