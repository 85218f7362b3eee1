"""Tabular offline solvers and version-space pessimism."""

import math

import numpy as np
import pytest

from outcomelab.advantage import counterexample_mdp
from outcomelab.generators import random_mdp, random_policy
from outcomelab.mdp import (
    MdpValidationError,
    PolicyClass,
    TabularPolicy,
    Trajectory,
    all_deterministic_policies,
    build_mdp,
    enumerate_trajectories,
    optimal_policy,
    optimal_value,
    policy_return,
)
from outcomelab.outcome import (
    OutcomeDataset,
    collect_outcome_dataset,
    impute_process,
)
from outcomelab.solvers import (
    ModelClass,
    armor_total_reward,
    calibrate_alpha_constant,
    choose_alpha,
    fqi,
    model_based_greedy,
    score_models,
    version_space,
)


def full_coverage_process_data(mdp):
    """One record per support trajectory; exact counts on a deterministic MDP."""
    records = []
    for si, ai, _ in enumerate_trajectories(mdp):
        states = tuple(mdp.layers[h][s] for h, s in enumerate(si))
        steps = tuple(
            float(mdp.reward.values[h][s, a]) for h, (s, a) in enumerate(zip(si, ai))
        )
        records.append(Trajectory(states, ai, steps, sum(steps)))
    from outcomelab.outcome import ProcessDataset

    return ProcessDataset(tuple(records))


@pytest.mark.parametrize("solver", [fqi, model_based_greedy])
def test_full_coverage_recovers_the_optimal_policy(solver):
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, horizon=3, max_states=3, n_actions=2, deterministic=True)
    data = full_coverage_process_data(mdp)
    pi_hat = solver(data, mdp.skeleton)
    assert policy_return(mdp, pi_hat) == pytest.approx(optimal_value(mdp), abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_fqi_and_greedy_coincide_on_tabular_data(seed):
    rng = np.random.default_rng([seed, 1])
    mdp = random_mdp(rng, horizon=3, max_states=3, n_actions=2)
    pi = random_policy(rng, mdp.skeleton)
    data = impute_process(collect_outcome_dataset(mdp, pi, 60, rng), mdp.reward)
    assert fqi(data, mdp.skeleton).action_map() == model_based_greedy(
        data, mdp.skeleton
    ).action_map()


def test_unvisited_state_defaults_to_action_zero():
    mdp, mu = counterexample_mdp()  # mu never reaches c
    data = impute_process(
        collect_outcome_dataset(mdp, mu, 25, np.random.default_rng(2)), mdp.reward
    )
    for solver in (fqi, model_based_greedy):
        assert solver(data, mdp.skeleton).action_map()["c"] == 0


def test_armor_singleton_class_plans_in_truth():
    mdp, mu = counterexample_mdp()
    mc = ModelClass.build([mdp], truth=mdp)
    assert mc.contains_truth
    data = collect_outcome_dataset(mdp, mu, 16, np.random.default_rng(3))
    for alpha in (0.0, 5.0):
        pi_hat = armor_total_reward(data, mc, alpha)
        assert policy_return(mdp, pi_hat) == pytest.approx(optimal_value(mdp), abs=1e-12)


def coverage_gap_instance():
    """Data policy never takes the bad branch; a candidate paints it optimistic."""
    t1 = np.zeros((1, 2, 2))
    t1[0, 0, 0] = 1.0
    t1[0, 1, 1] = 1.0
    layers = [["root"], ["good", "bad"]]
    truth = build_mdp(layers, 2, [t1], [np.zeros((1, 2)), np.array([[0.9, 0.0], [0.0, 0.0]])])
    shiny = build_mdp(layers, 2, [t1], [np.zeros((1, 2)), np.array([[0.9, 0.0], [1.0, 0.0]])])
    pi_off = TabularPolicy(
        truth.skeleton, (np.array([[1.0, 0.0]]), np.full((2, 2), 0.5))
    )
    return truth, shiny, pi_off


def test_armor_stays_pessimistic_under_partial_coverage():
    truth, shiny, pi_off = coverage_gap_instance()
    mc = ModelClass.build([truth, shiny], truth=truth)
    data = collect_outcome_dataset(truth, pi_off, 256, np.random.default_rng(4))
    pi_hat = armor_total_reward(data, mc, choose_alpha(2, 0.05))
    assert policy_return(truth, pi_hat) == pytest.approx(0.9, abs=1e-12)


def test_tied_scores_keep_both_models_at_alpha_zero():
    truth, shiny, pi_off = coverage_gap_instance()
    mc = ModelClass.build([truth, shiny], truth=truth)
    data = collect_outcome_dataset(truth, pi_off, 64, np.random.default_rng(5))
    space = version_space(data, mc, 0.0)
    assert space.indices == (0, 1)
    assert space.scores[0] == space.scores[1]


def test_zero_probability_record_sends_score_to_minus_inf():
    truth, _, pi_off = coverage_gap_instance()
    # candidate that cannot produce the observed transition root -> good
    t_bad = np.zeros((1, 2, 2))
    t_bad[0, 0, 1] = 1.0
    t_bad[0, 1, 0] = 1.0
    impossible = build_mdp(
        [["root"], ["good", "bad"]], 2, [t_bad],
        [np.zeros((1, 2)), np.array([[0.9, 0.0], [0.0, 0.0]])],
    )
    mc = ModelClass.build([truth, impossible])
    data = collect_outcome_dataset(truth, pi_off, 10, np.random.default_rng(6))
    scores = score_models(data, mc)
    assert scores[1] == -math.inf
    assert version_space(data, mc, 100.0).indices == (0,)
    lonely = ModelClass.build([impossible])
    with pytest.raises(MdpValidationError, match="probability 0"):
        version_space(data, lonely, 1.0)


def test_choose_alpha_arithmetic():
    assert choose_alpha(1, 1.0 / math.e, c=1.0) == pytest.approx(1.0, abs=1e-12)
    assert choose_alpha(8, 0.05, c=2.0) == pytest.approx(2 * math.log(160), abs=1e-12)
    with pytest.raises(MdpValidationError):
        choose_alpha(4, 1.5)


def test_alpha_calibration_finds_a_small_constant():
    rng = np.random.default_rng(7)
    mdp = random_mdp(rng, horizon=2, max_states=2, n_actions=2)
    pi_off = TabularPolicy.uniform(mdp.skeleton)
    other = build_mdp(
        mdp.layers, mdp.n_actions, mdp.transitions,
        [np.clip(r * 0.5, 0, 1) for r in mdp.reward.values], mdp.initial_state,
    )
    mc = ModelClass.build([mdp, other], truth=mdp)
    c = calibrate_alpha_constant(
        mdp, pi_off, mc, truth_index=0, n=200, seeds=range(40), target_rate=0.95
    )
    assert c in (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    # the chosen threshold really keeps the truth in the space
    hits = 0
    for seed in range(40):
        data = collect_outcome_dataset(mdp, pi_off, 200, np.random.default_rng(seed))
        scores = score_models(data, mc)
        hits += max(scores) - scores[0] <= choose_alpha(2, 0.05, c)
    assert hits >= 38


def test_returned_policy_maxmin_dominates_the_class():
    truth, shiny, pi_off = coverage_gap_instance()
    mc = ModelClass.build([truth, shiny], truth=truth)
    data = collect_outcome_dataset(truth, pi_off, 128, np.random.default_rng(8))
    alpha = choose_alpha(2, 0.05)
    space = version_space(data, mc, alpha)
    pi_hat = armor_total_reward(data, mc, alpha)
    worst_hat = min(policy_return(mc.candidates[j], pi_hat) for j in space.indices)
    for pi in all_deterministic_policies(truth.skeleton):
        worst = min(policy_return(mc.candidates[j], pi) for j in space.indices)
        assert worst_hat >= worst - 1e-12
    # one-sided guarantee: value of the output in truth beats the
    # pessimistic value of the optimal policy whenever truth survives
    assert 0 in space.indices
    pi_star = optimal_policy(truth)
    worst_star = min(policy_return(mc.candidates[j], pi_star) for j in space.indices)
    assert policy_return(truth, pi_hat) >= worst_star - 1e-12


def test_armor_respects_explicit_policy_class():
    truth, shiny, pi_off = coverage_gap_instance()
    mc = ModelClass.build([truth, shiny], truth=truth)
    data = collect_outcome_dataset(truth, pi_off, 32, np.random.default_rng(9))
    bad_only = PolicyClass(
        (TabularPolicy.deterministic(truth.skeleton, {"root": 1, "good": 0, "bad": 0}),)
    )
    pi_hat = armor_total_reward(data, mc, 1.0, policy_class=bad_only)
    assert pi_hat.action_map()["root"] == 1
