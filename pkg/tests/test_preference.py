"""Pairwise labels, MLE rewards, the regularized objective, contrastive fits."""

import math

import numpy as np
import pytest

from outcomelab.generators import random_mdp, random_policy, random_tree_mdp
from outcomelab.mdp import (
    MdpValidationError,
    PolicyClass,
    StateActionTable,
    TabularPolicy,
    build_mdp,
    policy_return,
    trajectory_ensemble,
)
from outcomelab.measure import TrajectoryFunctional, lemma_certificate
from outcomelab.outcome import RewardClass
from outcomelab.preference import (
    KlConfig,
    collect_preference_dataset,
    dpo_fit,
    implicit_value_range,
    kl_objective,
    kl_optimal_policy,
    log_policy_ratio_table,
    mle_reward,
    paired_mdp,
    pairwise_abs_difference,
    pairwise_square_difference,
    sample_preference,
    sigmoid,
)


def bandit(delta):
    return build_mdp([["z"]], 2, [], [np.array([[delta, 0.0]])], "z")


def test_equal_rewards_give_even_odds():
    mdp = bandit(0.0)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    rng = np.random.default_rng(0)
    wins = relevant = 0
    for _ in range(20_000):
        win, lose = sample_preference(mdp, pi_ref, mdp.reward, rng)
        if win.actions != lose.actions:
            relevant += 1
            wins += win.actions[0] == 0
    se = math.sqrt(0.25 / relevant)
    assert abs(wins / relevant - 0.5) <= 3 * se


def test_unit_margin_matches_sigmoid():
    mdp = bandit(1.0)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    rng = np.random.default_rng(1)
    wins = relevant = 0
    for _ in range(100_000):
        win, lose = sample_preference(mdp, pi_ref, mdp.reward, rng)
        if win.actions != lose.actions:
            relevant += 1
            wins += win.actions[0] == 0
    p = float(sigmoid(1.0))
    se = math.sqrt(p * (1 - p) / relevant)
    assert abs(wins / relevant - p) <= 3 * se


def test_deterministic_reference_compares_a_pair_with_itself():
    rng = np.random.default_rng(2)
    mdp = random_mdp(rng, deterministic=True)
    pi_ref = random_policy(rng, mdp.skeleton, deterministic=True)
    win, lose = sample_preference(mdp, pi_ref, mdp.reward, rng)
    assert win.states == lose.states and win.actions == lose.actions


def test_mle_singleton_class():
    rng = np.random.default_rng(3)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    data = collect_preference_dataset(mdp, pi_ref, mdp.reward, 40, rng)
    fit = mle_reward(data, RewardClass.build(mdp, [mdp.reward]))
    assert fit.index == 0


def test_mle_is_blind_to_constant_shifts():
    rng = np.random.default_rng(4)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    # add the same constant to every layer-1 reward: all totals shift equally
    shift = 0.05
    shifted = StateActionTable(
        mdp.skeleton,
        (mdp.reward.values[0] + shift, mdp.reward.values[1].copy()),
    )
    rc = RewardClass.build(
        mdp, [mdp.reward, shifted], ["truth", "shifted"], total_range=(0.0, 1.0 + shift)
    )
    data = collect_preference_dataset(mdp, pi_ref, mdp.reward, 200, rng)
    fit = mle_reward(data, rc)
    assert fit.scores[0] == pytest.approx(fit.scores[1], abs=1e-9)
    assert fit.index == 0


def test_mle_selection_consistency_over_seeds():
    rng = np.random.default_rng(5)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    state = mdp.layers[1][0]
    wrong = mdp.reward.with_entry(state, 0, mdp.reward.lookup(state, 0) * 0.3)
    rc = RewardClass.build(mdp, [mdp.reward, wrong], ["truth", "wrong"])
    wins = 0
    for seed in range(100):
        data = collect_preference_dataset(
            mdp, pi_ref, mdp.reward, 10_000, np.random.default_rng([seed, 6])
        )
        wins += mle_reward(data, rc).index == 0
    assert wins >= 95


def test_kl_objective_at_the_reference_policy():
    rng = np.random.default_rng(7)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = random_policy(rng, mdp.skeleton)
    cfg = KlConfig(beta=1.0, v_max=1.0)
    assert kl_objective(mdp, pi_ref, pi_ref, cfg) == pytest.approx(
        policy_return(mdp, pi_ref), abs=1e-12
    )


def test_kl_penalty_grows_with_beta():
    rng = np.random.default_rng(8)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    pi = random_policy(rng, mdp.skeleton)
    small = kl_objective(mdp, pi, pi_ref, KlConfig(0.5, 1.0))
    large = kl_objective(mdp, pi, pi_ref, KlConfig(5.0, 1.0))
    assert large < small


def test_kl_objective_unsupported_policy_is_minus_inf():
    mdp = random_tree_mdp(np.random.default_rng(9), depth=2, branching=2)
    root = mdp.layers[0][0]
    pi_ref = TabularPolicy(
        mdp.skeleton,
        (np.array([[1.0, 0.0]]), np.full((2, 2), 0.5)),
    )
    pi = TabularPolicy.deterministic(
        mdp.skeleton, {root: 1, mdp.layers[1][0]: 0, mdp.layers[1][1]: 0}
    )
    assert kl_objective(mdp, pi, pi_ref, KlConfig(1.0, 1.0)) == -math.inf


def test_soft_policy_reduces_to_reference_for_zero_reward():
    rng = np.random.default_rng(10)
    mdp = random_tree_mdp(rng, depth=3, branching=2)
    pi_ref = random_policy(rng, mdp.skeleton)
    out = kl_optimal_policy(mdp, StateActionTable.zeros(mdp.skeleton), pi_ref, 1.0)
    for h in range(mdp.horizon):
        assert np.allclose(out.probs[h], pi_ref.probs[h], atol=1e-12)


def test_soft_policy_approaches_reference_for_huge_beta():
    rng = np.random.default_rng(11)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = random_policy(rng, mdp.skeleton)
    out = kl_optimal_policy(mdp, mdp.reward, pi_ref, 1e6)
    dist = max(
        float(np.abs(out.probs[h] - pi_ref.probs[h]).max()) for h in range(mdp.horizon)
    )
    assert dist < 1e-6


@pytest.mark.parametrize("beta", [0.5, 1.0, 3.0])
def test_soft_policy_matches_trajectory_level_normalization(beta):
    rng = np.random.default_rng(12)
    mdp = random_tree_mdp(rng, depth=3, branching=2)
    pi_ref = random_policy(rng, mdp.skeleton)
    pi_beta = kl_optimal_policy(mdp, mdp.reward, pi_ref, beta)
    _, probs, sums = trajectory_ensemble(mdp, [pi_beta, pi_ref], [mdp.reward])
    tilted = probs[:, 1] * np.exp(sums[:, 0] / beta)
    tilted /= tilted.sum()
    assert np.abs(probs[:, 0] - tilted).max() <= 1e-10


def test_soft_policy_rejects_stochastic_transitions():
    rng = np.random.default_rng(13)
    mdp = random_mdp(rng, horizon=3, max_states=3, deterministic=False)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    with pytest.raises(MdpValidationError, match="deterministic"):
        kl_optimal_policy(mdp, mdp.reward, pi_ref, 1.0)


def test_soft_policy_beats_perturbations_and_class_members():
    rng = np.random.default_rng(14)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    cfg = KlConfig(1.0, 1.0)
    pi_beta = kl_optimal_policy(mdp, mdp.reward, pi_ref, 1.0)
    best = kl_objective(mdp, pi_beta, pi_ref, cfg)
    for _ in range(25):
        other = random_policy(rng, mdp.skeleton)
        assert best >= kl_objective(mdp, other, pi_ref, cfg) - 1e-12


def test_dpo_singleton_and_reference_pair():
    rng = np.random.default_rng(15)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    pi_beta = kl_optimal_policy(mdp, mdp.reward, pi_ref, 1.0)
    data = collect_preference_dataset(mdp, pi_ref, mdp.reward, 60, rng)
    fit = dpo_fit(data, PolicyClass((pi_beta,)), pi_ref, 1.0)
    assert fit.index == 0
    wins = 0
    for seed in range(100):
        d = collect_preference_dataset(
            mdp, pi_ref, mdp.reward, 2000, np.random.default_rng([seed, 16])
        )
        wins += dpo_fit(d, PolicyClass((pi_beta, pi_ref)), pi_ref, 1.0).index == 0
    assert wins >= 95


def test_dpo_zero_probability_candidate_scores_minus_inf():
    rng = np.random.default_rng(17)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    stubborn = TabularPolicy.deterministic(
        mdp.skeleton, {name: 0 for layer in mdp.layers for name in layer}
    )
    data = collect_preference_dataset(mdp, pi_ref, mdp.reward, 50, rng)
    fit = dpo_fit(data, PolicyClass((stubborn, pi_ref)), pi_ref, 1.0)
    assert fit.scores[0] == -math.inf
    assert fit.index == 1


def test_implicit_value_range_is_exact_and_flagged():
    rng = np.random.default_rng(18)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    pi = random_policy(rng, mdp.skeleton)
    # oracle: enumerate all trajectories and take the worst log ratio
    table = log_policy_ratio_table(pi, pi_ref)
    _, _, sums = trajectory_ensemble(mdp, [], [table])
    oracle = float(np.abs(sums[:, 0]).max())
    assert implicit_value_range(mdp, pi, pi_ref) == pytest.approx(oracle, abs=1e-12)
    data = collect_preference_dataset(mdp, pi_ref, mdp.reward, 20, rng)
    tight = KlConfig(beta=1.0, v_max=oracle / 2.0)
    fit = dpo_fit(data, PolicyClass((pi, pi_ref)), pi_ref, 1.0, cfg=tight, mdp=mdp)
    assert fit.bound_violations == (True, False)


def test_implicit_reward_relabeling_reproduces_the_candidate():
    rng = np.random.default_rng(19)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi_ref = TabularPolicy.uniform(mdp.skeleton)
    pi_hat = kl_optimal_policy(mdp, mdp.reward, pi_ref, 1.0)
    ratio = log_policy_ratio_table(pi_hat, pi_ref)
    implicit = lambda traj: ratio.trajectory_total(traj)
    data = collect_preference_dataset(mdp, pi_ref, implicit, 4000, rng)
    fit = dpo_fit(data, PolicyClass((random_policy(rng, mdp.skeleton), pi_hat)), pi_ref, 1.0)
    assert fit.index == 1


def test_paired_mdp_moment_identity():
    rng = np.random.default_rng(20)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    f = mdp.reward
    pair = paired_mdp(mdp, f)
    pi = random_policy(rng, mdp.skeleton)
    pi2 = random_policy(rng, mdp.skeleton)
    lifted = pair.lift_policy(pi, pi2)
    _, probs, sums = trajectory_ensemble(pair.mdp, [lifted], [pair.functional])
    doubled = float((probs[:, 0] * sums[:, 0] ** 2).sum())
    direct = pairwise_square_difference(mdp, pi, pi2, f)
    assert doubled == pytest.approx(direct, abs=1e-10)
    zero_pair = paired_mdp(mdp, StateActionTable.zeros(mdp.skeleton))
    _, probs0, sums0 = trajectory_ensemble(zero_pair.mdp, [lifted], [zero_pair.functional])
    assert float((probs0[:, 0] * sums0[:, 0] ** 2).sum()) == 0.0


def test_paired_mdp_certifies_the_pairwise_bound():
    rng = np.random.default_rng(21)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi = random_policy(rng, mdp.skeleton)
    pi2 = random_policy(rng, mdp.skeleton)
    pi_off = random_policy(rng, mdp.skeleton, concentration=2.0)
    f = mdp.reward
    pair = paired_mdp(mdp, f)
    lifted = pair.lift_policy(pi, pi2)
    lifted_off = pair.lift_policy(pi_off, pi_off)
    # halve the doubled functional so per-pair values stay within [-1, 1];
    # both bounds are scale-covariant so the certificate is equivalent
    g = TrajectoryFunctional(pair.functional.scaled(0.5))
    cert = lemma_certificate(pair.mdp, lifted, lifted_off, g)
    assert cert.horizon == 2 * mdp.horizon
    assert cert.passed
    lhs = pairwise_abs_difference(mdp, pi, pi2, f)
    ref_sq = pairwise_square_difference(mdp, pi_off, pi_off, f)
    bound = math.sqrt(7425 * (2 * mdp.horizon) ** 3 * cert.c_sa * ref_sq)
    assert lhs <= bound + 1e-9


def test_paired_coverage_is_the_max_of_the_halves():
    from outcomelab.coverage import state_action_concentrability

    rng = np.random.default_rng(22)
    mdp = random_tree_mdp(rng, depth=2, branching=2)
    pi = random_policy(rng, mdp.skeleton)
    pi2 = random_policy(rng, mdp.skeleton)
    pi_off = random_policy(rng, mdp.skeleton)
    pair = paired_mdp(mdp)
    doubled = state_action_concentrability(
        pair.mdp, pair.lift_policy(pi, pi2), pair.lift_policy(pi_off, pi_off)
    ).value
    halves = max(
        state_action_concentrability(mdp, pi, pi_off).value,
        state_action_concentrability(mdp, pi2, pi_off).value,
    )
    assert doubled == pytest.approx(halves, rel=1e-12)
