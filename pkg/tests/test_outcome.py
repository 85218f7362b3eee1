"""Outcome datasets, least-squares reward fitting, imputation, pipeline."""

import numpy as np
import pytest

from outcomelab.advantage import counterexample_mdp
from outcomelab.generators import random_mdp, random_policy, random_reward_table
from outcomelab.mdp import (
    MdpSkeleton,
    MdpValidationError,
    StateActionTable,
    TabularPolicy,
    all_deterministic_policies,
    optimal_value,
    policy_return,
    trajectory_ensemble,
    value_tables,
)
from outcomelab.outcome import (
    OutcomeDataset,
    RewardClass,
    collect_outcome_dataset,
    impute_process,
    least_squares_reward,
    max_reward_evaluation_gap,
    reward_evaluation_gap,
    solve_from_outcomes,
    split_records,
)
from outcomelab.solvers import model_based_greedy


def test_collect_under_mu_gives_constant_totals():
    mdp, mu = counterexample_mdp()
    data = collect_outcome_dataset(mdp, mu, 4, np.random.default_rng(0))
    assert len(data) == 4
    for traj in data.records:
        assert traj.total_reward in (0.0, 0.5)
        assert traj.step_rewards is None


def test_collect_deterministic_gives_identical_records():
    rng = np.random.default_rng(1)
    mdp = random_mdp(rng, deterministic=True)
    pi = random_policy(rng, mdp.skeleton, deterministic=True)
    data = collect_outcome_dataset(mdp, pi, 10, rng)
    assert len({(t.states, t.actions, t.total_reward) for t in data.records}) == 1


def test_mean_total_reward_matches_dp_return():
    rng = np.random.default_rng(2)
    mdp = random_mdp(rng, horizon=2, max_states=3, n_actions=2)
    pi_off = random_policy(rng, mdp.skeleton)
    j = policy_return(mdp, pi_off)
    # exact variance by enumeration for the standard-error budget
    _, probs, sums = trajectory_ensemble(mdp, [pi_off], [mdp.reward])
    var = float(probs[:, 0] @ sums[:, 0] ** 2) - j**2
    n = 100_000
    data = collect_outcome_dataset(mdp, pi_off, n, np.random.default_rng(3))
    mean = np.mean([t.total_reward for t in data.records])
    se = max(np.sqrt(var / n), 1e-9)
    assert abs(mean - j) <= 3 * se


def test_singleton_class_fits_exactly():
    mdp, mu = counterexample_mdp()
    data = collect_outcome_dataset(mdp, mu, 50, np.random.default_rng(4))
    rc = RewardClass.build(mdp, [mdp.reward])
    assert rc.realizable
    fit = least_squares_reward(data, rc, mdp, mu)
    assert fit.index == 0
    assert fit.train_loss == 0.0
    assert fit.excess_risk == 0.0


def test_on_support_perturbation_loses_for_large_n():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng, horizon=2, max_states=2, n_actions=2)
    pi_off = TabularPolicy.uniform(mdp.skeleton)
    state = mdp.layers[1][0]
    perturbed = mdp.reward.with_entry(state, 0, mdp.reward.lookup(state, 0) * 0.5)
    rc = RewardClass.build(mdp, [mdp.reward, perturbed], ["truth", "shifted"])
    wins = 0
    for seed in range(100):
        data = collect_outcome_dataset(mdp, pi_off, 400, np.random.default_rng([seed, 6]))
        wins += least_squares_reward(data, rc).index == 0
    assert wins >= 95


def test_off_support_member_ties_and_lower_index_wins():
    mdp, mu = counterexample_mdp()  # mu never reaches c
    ghost = mdp.reward.with_entry("c", 0, 0.1)
    rc = RewardClass.build(mdp, [ghost, mdp.reward], ["ghost", "truth"])
    data = collect_outcome_dataset(mdp, mu, 30, np.random.default_rng(7))
    fit = least_squares_reward(data, rc)
    assert fit.scores[0] == fit.scores[1] == 0.0
    assert fit.index == 0


def test_impute_with_truth_reproduces_totals():
    rng = np.random.default_rng(8)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp.skeleton)
    data = collect_outcome_dataset(mdp, pi, 20, rng)
    proc = impute_process(data, mdp.reward)
    for before, after in zip(data.records, proc.records):
        assert sum(after.step_rewards) == pytest.approx(before.total_reward, abs=1e-12)


def test_impute_zero_and_random_tables():
    rng = np.random.default_rng(9)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp.skeleton)
    data = collect_outcome_dataset(mdp, pi, 10, rng)
    zeros = impute_process(data, StateActionTable.zeros(mdp.skeleton))
    assert all(all(r == 0.0 for r in t.step_rewards) for t in zeros.records)
    table = random_reward_table(rng, mdp)
    proc = impute_process(data, table)
    for traj in proc.records:
        expected = [table.lookup(s, a) for s, a in zip(traj.states, traj.actions)]
        assert list(traj.step_rewards) == expected


def test_impute_undefined_pair_is_an_error():
    mdp, mu = counterexample_mdp()
    data = collect_outcome_dataset(mdp, mu, 3, np.random.default_rng(10))
    other = MdpSkeleton(2, (("a",), ("y", "x")), 2, "a")
    alien = StateActionTable.zeros(other)
    with pytest.raises(MdpValidationError):
        impute_process(data, alien)


def test_pipeline_recovers_optimal_policy_with_realizable_class():
    rng = np.random.default_rng(11)
    mdp = random_mdp(rng, horizon=3, max_states=3, n_actions=2)
    pi_off = TabularPolicy.uniform(mdp.skeleton)
    data = collect_outcome_dataset(mdp, pi_off, 3000, np.random.default_rng(12))
    rc = RewardClass.build(mdp, [mdp.reward])
    pi_hat = solve_from_outcomes(data, rc, model_based_greedy, np.random.default_rng(13))
    assert policy_return(mdp, pi_hat) == pytest.approx(optimal_value(mdp), abs=1e-3)


def test_pipeline_minimal_two_records_smoke():
    mdp, mu = counterexample_mdp()
    data = collect_outcome_dataset(mdp, mu, 2, np.random.default_rng(14))
    rc = RewardClass.build(mdp, [mdp.reward])
    pi_hat = solve_from_outcomes(data, rc, model_based_greedy, np.random.default_rng(15))
    assert pi_hat.is_deterministic()


def test_pipeline_rejects_single_record():
    mdp, mu = counterexample_mdp()
    data = collect_outcome_dataset(mdp, mu, 1, np.random.default_rng(16))
    rc = RewardClass.build(mdp, [mdp.reward])
    with pytest.raises(MdpValidationError):
        solve_from_outcomes(data, rc, model_based_greedy, np.random.default_rng(17))


def test_split_is_deterministic_and_balanced():
    mdp, mu = counterexample_mdp()
    data = collect_outcome_dataset(mdp, mu, 11, np.random.default_rng(18))
    a1, b1 = split_records(data.records, np.random.default_rng(99))
    a2, b2 = split_records(data.records, np.random.default_rng(99))
    assert a1 == a2 and b1 == b2
    assert len(a1) == 6 and len(b1) == 5


def test_pipeline_determinism_end_to_end():
    rng = np.random.default_rng(19)
    mdp = random_mdp(rng, horizon=2, max_states=2, n_actions=2)
    pi_off = TabularPolicy.uniform(mdp.skeleton)
    data = collect_outcome_dataset(mdp, pi_off, 40, np.random.default_rng(20))
    rc = RewardClass.build(mdp, [mdp.reward])
    p1 = solve_from_outcomes(data, rc, model_based_greedy, np.random.default_rng(21))
    p2 = solve_from_outcomes(data, rc, model_based_greedy, np.random.default_rng(21))
    assert p1.action_map() == p2.action_map()


def test_empty_dataset_fit_is_an_error():
    mdp, _ = counterexample_mdp()
    rc = RewardClass.build(mdp, [mdp.reward])
    with pytest.raises(MdpValidationError):
        least_squares_reward(OutcomeDataset(()), rc)


def test_argmin_beats_every_other_member():
    rng = np.random.default_rng(22)
    mdp = random_mdp(rng, horizon=2)
    pi_off = random_policy(rng, mdp.skeleton)
    tables = [mdp.reward] + [random_reward_table(rng, mdp) for _ in range(4)]
    rc = RewardClass.build(mdp, tables)
    data = collect_outcome_dataset(mdp, pi_off, 200, rng)
    fit = least_squares_reward(data, rc)
    assert all(fit.train_loss <= s for s in fit.scores)


def test_reward_gap_zero_for_truth():
    rng = np.random.default_rng(23)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp.skeleton)
    assert reward_evaluation_gap(mdp, mdp.reward, pi) == 0.0
    assert max_reward_evaluation_gap(mdp, mdp.reward) == 0.0


def test_reward_gap_for_q_table_at_optimum():
    mdp, mu = counterexample_mdp()
    q_table = value_tables(mdp, mu).q_table()
    pi_star = TabularPolicy.deterministic(mdp.skeleton, {"a": 0, "b": 0, "c": 0})
    # J_{Q^mu}(pi*) = Q(a,0) + Q(b,0) = 0 + 1 = 1 = J(pi*), so the gap vanishes
    assert policy_return(mdp, pi_star, q_table) == pytest.approx(1.0, abs=1e-12)
    assert reward_evaluation_gap(mdp, q_table, pi_star) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_max_gap_matches_policy_enumeration(seed):
    rng = np.random.default_rng([seed, 24])
    mdp = random_mdp(rng, max_states=2, max_actions=2, max_horizon=3)
    r_hat = random_reward_table(rng, mdp)
    via_dp = max_reward_evaluation_gap(mdp, r_hat)
    via_enum = max(
        reward_evaluation_gap(mdp, r_hat, pi)
        for pi in all_deterministic_policies(mdp.skeleton)
    )
    assert via_dp == pytest.approx(via_enum, abs=1e-12)


def test_reward_class_total_range_enforced():
    mdp, _ = counterexample_mdp()
    too_big = StateActionTable.from_entries(
        mdp.skeleton, {("a", 0): 1.0, ("b", 0): 1.0}, default=0.0
    )
    with pytest.raises(MdpValidationError, match="trajectory totals"):
        RewardClass.build(mdp, [too_big])
