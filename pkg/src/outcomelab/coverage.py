"""Exact concentrability coefficients.

Four variants: per-pair occupancy ratios between two policies, the
trajectory-level ratio, the ratio of the best-reaching policy against a
fixed distribution over pairs, and the max over a finite policy class.
+inf is a first-class value (uncovered instances are deliberately
constructed in the pessimism experiments), never an exception.

Convention for degenerate ratios: pairs unreachable under both policies
(0/0) are excluded from the supremum; reachable-under-pi but
unreachable-under-pi_off yields +inf with a witness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import (
    LayeredMdp,
    PolicyClass,
    StateActionTable,
    TabularPolicy,
    all_deterministic_policies,
    occupancy_measures,
    trajectory_ensemble,
)


@dataclass
class CoverageReport:
    """A coefficient value plus the witness attaining it.

    `definition` records which coefficient was computed
    ("state_action", "trajectory", "distribution", "class"). For pair
    witnesses the (layer, state, action) triple is set; trajectory
    witnesses carry the (states, actions) pair; class witnesses also
    name the achieving policy index.
    """

    value: float
    definition: str
    witness_layer: int | None = None
    witness_state: str | None = None
    witness_action: int | None = None
    witness_trajectory: tuple[tuple[str, ...], tuple[int, ...]] | None = None
    witness_policy: int | None = None

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


def _ratio_report(
    mdp: LayeredMdp,
    num: Sequence[np.ndarray],
    den: Sequence[np.ndarray],
    definition: str,
) -> CoverageReport:
    best = -math.inf
    witness = (None, None, None)
    for h in range(mdp.horizon):
        n_layer, d_layer = num[h], den[h]
        for i, name in enumerate(mdp.layers[h]):
            for a in range(mdp.n_actions):
                n, d = float(n_layer[i, a]), float(d_layer[i, a])
                if n == 0.0 and d == 0.0:
                    continue
                if d == 0.0:
                    return CoverageReport(
                        math.inf, definition, h + 1, name, a
                    )
                ratio = n / d
                if ratio > best:
                    best = ratio
                    witness = (h + 1, name, a)
    if best == -math.inf:
        # no jointly reachable pair; vacuous coverage
        return CoverageReport(math.nan, definition)
    return CoverageReport(best, definition, *witness)


def state_action_concentrability(
    mdp: LayeredMdp, pi: TabularPolicy, pi_off: TabularPolicy
) -> CoverageReport:
    """max over layers and pairs of d^pi(s,a) / d^pi_off(s,a)."""
    occ_pi = occupancy_measures(mdp, pi)
    occ_off = occupancy_measures(mdp, pi_off)
    return _ratio_report(
        mdp, occ_pi.state_action, occ_off.state_action, "state_action"
    )


def trajectory_concentrability(
    mdp: LayeredMdp,
    pi: TabularPolicy,
    pi_off: TabularPolicy,
    cap: int | None = None,
) -> CoverageReport:
    """sup over trajectories of d^pi(tau) / d^pi_off(tau), by enumeration."""
    paths, probs, _ = trajectory_ensemble(mdp, [pi, pi_off], cap=cap)
    best = -math.inf
    witness = None
    for k, (si, ai) in enumerate(paths):
        n, d = float(probs[k, 0]), float(probs[k, 1])
        if n == 0.0:
            continue
        names = tuple(mdp.layers[h][s] for h, s in enumerate(si))
        if d == 0.0:
            return CoverageReport(
                math.inf, "trajectory", witness_trajectory=(names, ai)
            )
        if n / d > best:
            best = n / d
            witness = (names, ai)
    if best == -math.inf:
        return CoverageReport(math.nan, "trajectory")
    return CoverageReport(best, "trajectory", witness_trajectory=witness)


def max_reach_occupancies(mdp: LayeredMdp) -> StateActionTable:
    """sup over all Markov policies of d^pi(s,a), via max-probability DP.

    The supremum factorizes: the best policy routes to the target state
    with maximal probability and then picks the target action surely,
    so every action column of a state shares the value max_pi P(s in tau).
    The attaining policy is deterministic, which is why enumerating
    deterministic policies gives the same answer (cross-checked in tests).
    """
    H = mdp.horizon
    reach_vals = []
    for h in range(H):
        n_targets = len(mdp.layers[h])
        # m[s, t] = max prob of reaching target t (layer h) from state s (layer g)
        m = np.eye(n_targets)
        for g in range(h - 1, -1, -1):
            m = np.einsum("sat,tj->saj", mdp.transitions[g], m).max(axis=1)
        _, i0 = mdp.skeleton.locate(mdp.initial_state)
        reach = m[i0] if h > 0 else np.eye(n_targets)[i0]
        reach_vals.append(np.repeat(reach[:, None], mdp.n_actions, axis=1))
    return StateActionTable(mdp.skeleton, tuple(reach_vals))


def distribution_concentrability(
    mdp: LayeredMdp,
    nu: StateActionTable,
    policy_set: PolicyClass | str = "all",
    cap: int | None = None,
) -> CoverageReport:
    """sup over a policy set and pairs of d^pi(s,a) / nu(s,a).

    policy_set is "all" (max-reach DP over all Markov policies),
    "all-deterministic" (explicit cap-guarded enumeration), or a finite
    PolicyClass.
    """
    if policy_set == "all":
        sup_occ = max_reach_occupancies(mdp)
        return _ratio_report(mdp, sup_occ.values, nu.values, "distribution")
    if policy_set == "all-deterministic":
        policies = list(all_deterministic_policies(mdp.skeleton, cap=cap))
    else:
        policies = list(policy_set.policies)
    best: CoverageReport | None = None
    for idx, pi in enumerate(policies):
        occ = occupancy_measures(mdp, pi)
        report = _ratio_report(mdp, occ.state_action, nu.values, "distribution")
        report.witness_policy = idx
        if best is None or report.value > best.value:
            best = report
        if best.value == math.inf:
            break
    assert best is not None
    return best


def class_concentrability(
    mdp: LayeredMdp, policy_class: PolicyClass, pi_off: TabularPolicy
) -> CoverageReport:
    """max over the class of the per-policy state-action concentrability."""
    best: CoverageReport | None = None
    for idx, pi in enumerate(policy_class.policies):
        report = state_action_concentrability(mdp, pi, pi_off)
        report.definition = "class"
        report.witness_policy = idx
        if best is None or report.value > best.value:
            best = report
        if best.value == math.inf:
            break
    assert best is not None
    return best
