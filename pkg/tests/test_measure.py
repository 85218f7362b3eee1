"""Change-of-measure certificates: exact moments, both bounds, the probe."""

import math

import numpy as np
import pytest

from outcomelab.generators import random_mdp, random_policy
from outcomelab.mdp import (
    MdpValidationError,
    StateActionTable,
    TabularPolicy,
    build_mdp,
    sample_trajectories,
)
from outcomelab.measure import (
    MOMENT_RATIO_CONSTANT,
    TrajectoryFunctional,
    cancellation_functional,
    lemma_certificate,
    random_instance,
    replay_witness,
    tightness_probe,
    trajectory_moment,
    uniform_functional,
)


def left_right_tree():
    t = np.zeros((1, 2, 2))
    t[0, 0, 0] = 1.0
    t[0, 1, 1] = 1.0
    return build_mdp(
        [["root"], ["L", "R"]], 2, [t],
        [np.zeros((1, 2)), np.zeros((2, 2))],
    )


def test_explicit_constant_value():
    assert MOMENT_RATIO_CONSTANT == 7425.0


def test_zero_functional_has_zero_moments():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp.skeleton)
    f = TrajectoryFunctional(StateActionTable.zeros(mdp.skeleton))
    assert trajectory_moment(mdp, pi, f, "second") == 0.0
    assert trajectory_moment(mdp, pi, f, "abs") == 0.0


def test_point_mass_second_moment():
    # single deterministic trajectory with f(tau) = 0.5
    t = np.ones((1, 1, 1))
    mdp = build_mdp([["a"], ["b"]], 1, [t], [np.zeros((1, 1)), np.zeros((1, 1))])
    pi = TabularPolicy.uniform(mdp.skeleton)
    f = TrajectoryFunctional(
        StateActionTable.from_entries(mdp.skeleton, {("a", 0): 0.25, ("b", 0): 0.25})
    )
    assert trajectory_moment(mdp, pi, f, "second") == pytest.approx(0.25**2 * 4, abs=1e-15)
    assert trajectory_moment(mdp, pi, f, "abs") == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_moment_matches_monte_carlo(seed):
    rng = np.random.default_rng([seed, 2])
    mdp = random_mdp(rng, horizon=3)
    pi = random_policy(rng, mdp.skeleton)
    f = uniform_functional(rng, mdp)
    exact = trajectory_moment(mdp, pi, f, "second")
    n = 40_000
    si, ai, _ = sample_trajectories(mdp, pi, n, np.random.default_rng(seed))
    vals = f.table.gather(si, ai) ** 2
    se = max(float(vals.std() / math.sqrt(n)), 1e-9)
    assert abs(float(vals.mean()) - exact) <= 3 * se


def test_identical_policies_certificate_ratio_is_one():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp.skeleton)
    f = uniform_functional(rng, mdp)
    cert = lemma_certificate(mdp, pi, pi, f)
    assert cert.ratio == pytest.approx(1.0, abs=1e-12)
    assert cert.ratio_bound >= MOMENT_RATIO_CONSTANT * mdp.horizon**3
    assert cert.passed


def test_hand_enumerated_cancellation_instance():
    """Four-trajectory tree where sums vanish on the data policy's main branch."""
    mdp = left_right_tree()
    f = TrajectoryFunctional(
        StateActionTable.from_entries(
            mdp.skeleton,
            {
                ("root", 0): 0.5, ("root", 1): 0.0,
                ("L", 0): -0.5, ("L", 1): -0.5,
                ("R", 0): 0.5, ("R", 1): -0.5,
            },
        )
    )
    assert f.verify_trajectory_bound(mdp)
    pi_off = TabularPolicy(
        mdp.skeleton, (np.array([[0.9, 0.1]]), np.full((2, 2), 0.5))
    )
    pi = TabularPolicy.deterministic(mdp.skeleton, {"root": 1, "L": 0, "R": 0})
    cert = lemma_certificate(mdp, pi, pi_off, f)
    # frozen hand enumeration: left sums cancel, right sums are +-0.5
    assert cert.second_moment_ref == pytest.approx(0.025, abs=1e-15)
    assert cert.second_moment_target == pytest.approx(0.25, abs=1e-15)
    assert cert.abs_moment_target == pytest.approx(0.5, abs=1e-15)
    assert cert.ratio == pytest.approx(10.0, abs=1e-12)
    assert cert.c_sa == pytest.approx(20.0, abs=1e-12)
    assert cert.passed


@pytest.mark.parametrize("seed", range(60))
def test_random_instances_certify(seed):
    rng = np.random.default_rng([seed, 9])
    mdp, pi, pi_off, f = random_instance(rng, adversarial=(seed % 3 == 0))
    cert = lemma_certificate(mdp, pi, pi_off, f)
    assert not cert.vacuous
    assert cert.passed


def test_cauchy_schwarz_between_moments():
    rng = np.random.default_rng(17)
    mdp, pi, _, f = random_instance(rng)
    second = trajectory_moment(mdp, pi, f, "second")
    first = trajectory_moment(mdp, pi, f, "abs")
    assert first <= math.sqrt(second) + 1e-12


def test_scaling_covariance_of_the_ratio():
    rng = np.random.default_rng(23)
    mdp, pi, pi_off, f = random_instance(rng)
    cert = lemma_certificate(mdp, pi, pi_off, f)
    scaled = TrajectoryFunctional(f.table.scaled(0.5))
    cert2 = lemma_certificate(mdp, pi, pi_off, scaled)
    assert cert2.second_moment_target == pytest.approx(0.25 * cert.second_moment_target, rel=1e-12)
    assert cert2.second_moment_ref == pytest.approx(0.25 * cert.second_moment_ref, rel=1e-12)
    assert cert2.ratio == pytest.approx(cert.ratio, rel=1e-9)


def test_uncovered_instance_is_vacuous():
    mdp = left_right_tree()
    pi_off = TabularPolicy(
        mdp.skeleton, (np.array([[1.0, 0.0]]), np.full((2, 2), 0.5))
    )
    pi = TabularPolicy.deterministic(mdp.skeleton, {"root": 1, "L": 0, "R": 0})
    f = TrajectoryFunctional(
        StateActionTable.from_entries(mdp.skeleton, {("R", 0): 1.0})
    )
    cert = lemma_certificate(mdp, pi, pi_off, f)
    assert cert.vacuous
    assert math.isinf(cert.c_sa)


def test_zero_reference_moment_forces_zero_target_abs():
    # f vanishes everywhere pi_off can go, both policies fully covered
    mdp = left_right_tree()
    pi_off = TabularPolicy.uniform(mdp.skeleton)
    pi = TabularPolicy.uniform(mdp.skeleton)
    f = TrajectoryFunctional(StateActionTable.zeros(mdp.skeleton))
    cert = lemma_certificate(mdp, pi, pi_off, f)
    assert cert.ratio is None
    assert cert.abs_moment_target == 0.0
    assert cert.passed


def test_per_pair_range_is_enforced():
    mdp = left_right_tree()
    with pytest.raises(MdpValidationError, match="outside"):
        TrajectoryFunctional(
            StateActionTable.from_entries(mdp.skeleton, {("root", 0): 1.5})
        )


def test_trajectory_bound_flag():
    mdp = left_right_tree()
    f = TrajectoryFunctional(
        StateActionTable.from_entries(
            mdp.skeleton, {("root", 0): 0.9, ("L", 0): 0.9}
        )
    )
    assert f.verify_trajectory_bound(mdp) is False
    assert f.trajectory_bounded is False
    g = uniform_functional(np.random.default_rng(2), mdp)
    assert g.verify_trajectory_bound(mdp)


def test_cancellation_functional_is_normalized():
    rng = np.random.default_rng(31)
    mdp = random_mdp(rng, deterministic=True)
    f = cancellation_functional(rng, mdp)
    assert f.verify_trajectory_bound(mdp)


def test_probe_with_zero_trials_is_empty():
    report = tightness_probe(lambda rng: random_instance(rng), 0, seed=1)
    assert report.trials == 0
    assert report.rows == []
    assert report.witness is None


def test_probe_records_growth_and_replays():
    report = tightness_probe(
        lambda rng: random_instance(rng, adversarial=True), 40, seed=3
    )
    assert report.finite_trials == 40
    assert report.max_normalized_ratio > 0.0
    assert report.witness is not None
    assert replay_witness(report.witness) == pytest.approx(
        report.witness.ratio, abs=1e-12
    )


def test_probe_is_reproducible_from_seed():
    factory = lambda rng: random_instance(rng)
    a = tightness_probe(factory, 15, seed=8)
    b = tightness_probe(factory, 15, seed=8)
    assert a.max_normalized_ratio == b.max_normalized_ratio
    assert [r["ratio"] for r in a.rows] == [r["ratio"] for r in b.rows]
