"""Brute-force certification of the trajectory change-of-measure bound.

For a per-pair function f with trajectory sums in [-1, 1], the second
moment of f(tau) under any policy pi is at most 7425 * H^3 * C_sa times
the second moment under the data policy, where C_sa is the state-action
concentrability between the two; the first absolute moment obeys the
square-root form of the same bound. Certificates compute every moment
by exact enumeration and check both inequalities with the explicit
constant, so the invariant is assertable verbatim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coverage import state_action_concentrability
from .generators import random_mdp, random_policy
from .mdp import (
    LayeredMdp,
    MdpValidationError,
    StateActionTable,
    TabularPolicy,
    path_sum_extrema,
    trajectory_ensemble,
)
from . import serialize

MOMENT_RATIO_CONSTANT = 7425.0


@dataclass
class TrajectoryFunctional:
    """A per-pair table f: S x A -> [-1, 1] evaluated on trajectories as a sum.

    `trajectory_bounded` records whether max_tau |f(tau)| <= 1 has been
    verified (the normalization the moment bound is stated under); it is
    None until checked.
    """

    table: StateActionTable
    trajectory_bounded: bool | None = None

    def __post_init__(self) -> None:
        for h, vals in enumerate(self.table.values):
            if np.any(np.abs(vals) > 1.0 + 1e-12):
                i, a = np.unravel_index(int(np.argmax(np.abs(vals))), vals.shape)
                raise MdpValidationError(
                    f"functional value outside [-1, 1] at layer {h + 1}, "
                    f"state {self.table.skeleton.layers[h][i]!r}, action {a}"
                )

    def verify_trajectory_bound(self, mdp: LayeredMdp) -> bool:
        lo, hi = path_sum_extrema(mdp, self.table)
        self.trajectory_bounded = bool(lo >= -1.0 - 1e-9 and hi <= 1.0 + 1e-9)
        return self.trajectory_bounded


@dataclass
class LemmaCertificate:
    """Both moment bounds on one (mdp, pi, pi_off, f) instance.

    ratio_bound is 7425 * H^3 * C_sa; abs_bound is the square-root form
    sqrt(ratio_bound * E_off[f(tau)^2]). `vacuous` marks instances with
    infinite concentrability, which certify nothing.
    """

    horizon: int
    c_sa: float
    second_moment_target: float
    second_moment_ref: float
    abs_moment_target: float
    ratio: float | None
    ratio_bound: float
    abs_bound: float
    ratio_ok: bool
    abs_ok: bool
    vacuous: bool

    @property
    def passed(self) -> bool:
        return self.vacuous or (self.ratio_ok and self.abs_ok)


def trajectory_moment(
    mdp: LayeredMdp,
    pi: TabularPolicy,
    f: TrajectoryFunctional,
    kind: str = "second",
    cap: int | None = None,
) -> float:
    """Exact E_pi[f(tau)^2] (kind="second") or E_pi[|f(tau)|] (kind="abs")."""
    _, probs, sums = trajectory_ensemble(mdp, [pi], [f.table], cap=cap)
    values = sums[:, 0]
    if kind == "second":
        g = values**2
    elif kind == "abs":
        g = np.abs(values)
    else:
        raise ValueError(f"unknown moment kind {kind!r}")
    return float((probs[:, 0] * g).sum())


def lemma_certificate(
    mdp: LayeredMdp,
    pi: TabularPolicy,
    pi_off: TabularPolicy,
    f: TrajectoryFunctional,
    cap: int | None = None,
) -> LemmaCertificate:
    """Certify both change-of-measure bounds on one instance.

    All three moments come from a single exact enumeration of the
    support. When E_off[f^2] = 0 the ratio is undefined and only the
    square-root bound is checked (it then demands E_pi[|f|] = 0).
    """
    coverage = state_action_concentrability(mdp, pi, pi_off)
    c_sa = coverage.value
    _, probs, sums = trajectory_ensemble(mdp, [pi, pi_off], [f.table], cap=cap)
    values = sums[:, 0]
    second_target = float((probs[:, 0] * values**2).sum())
    second_ref = float((probs[:, 1] * values**2).sum())
    abs_target = float((probs[:, 0] * np.abs(values)).sum())

    vacuous = not math.isfinite(c_sa)
    bound = MOMENT_RATIO_CONSTANT * mdp.horizon**3 * c_sa
    if vacuous:
        return LemmaCertificate(
            mdp.horizon, c_sa, second_target, second_ref, abs_target,
            None, math.inf, math.inf, True, True, True,
        )
    slack = 1.0 + 1e-9
    if second_ref > 0.0:
        ratio = second_target / second_ref
        ratio_ok = ratio <= bound * slack
    else:
        ratio = None
        ratio_ok = True
    abs_bound = math.sqrt(bound * second_ref)
    abs_ok = abs_target <= abs_bound * slack + 1e-12
    return LemmaCertificate(
        mdp.horizon, c_sa, second_target, second_ref, abs_target,
        ratio, bound, abs_bound, ratio_ok, abs_ok, False,
    )


def uniform_functional(
    rng: np.random.Generator, mdp: LayeredMdp
) -> TrajectoryFunctional:
    """i.i.d. uniform[-1, 1] entries, rescaled so max_tau |f(tau)| <= 1."""
    vals = tuple(
        rng.uniform(-1.0, 1.0, size=(len(names), mdp.n_actions))
        for names in mdp.layers
    )
    table = StateActionTable(mdp.skeleton, vals)
    lo, hi = path_sum_extrema(mdp, table)
    scale = max(abs(lo), abs(hi), 1.0)
    f = TrajectoryFunctional(table.scaled(1.0 / scale))
    f.trajectory_bounded = True
    return f


def cancellation_functional(
    rng: np.random.Generator, mdp: LayeredMdp, noise: float = 0.05
) -> TrajectoryFunctional:
    """Adversarial sign-cancelling family: potential differences plus noise.

    A potential phi on states makes the exact telescoped sums vanish on
    every trajectory of a deterministic MDP; small noise keeps the
    reference moment positive while per-step terms stay large. This is
    the regime where per-step magnitudes carry no information about the
    trajectory sum.
    """
    phi = [rng.uniform(-0.4, 0.4, size=len(names)) for names in mdp.layers]
    phi[0] = np.zeros(len(mdp.layers[0]))
    vals = []
    for h in range(mdp.horizon):
        layer = np.zeros((len(mdp.layers[h]), mdp.n_actions))
        for s in range(len(mdp.layers[h])):
            for a in range(mdp.n_actions):
                if h < mdp.horizon - 1:
                    succ = float(mdp.transitions[h][s, a] @ phi[h + 1])
                else:
                    succ = 0.0
                layer[s, a] = succ - phi[h][s] + rng.uniform(-noise, noise)
        vals.append(layer)
    table = StateActionTable(mdp.skeleton, vals)
    per_pair = max(float(np.abs(v).max()) for v in table.values)
    if per_pair > 1.0:
        table = table.scaled(1.0 / per_pair)
    lo, hi = path_sum_extrema(mdp, table)
    scale = max(abs(lo), abs(hi), 1.0)
    f = TrajectoryFunctional(table.scaled(1.0 / scale))
    f.trajectory_bounded = True
    return f


def random_instance(
    rng: np.random.Generator,
    max_horizon: int = 4,
    max_states: int = 3,
    max_actions: int = 3,
    adversarial: bool = False,
) -> tuple[LayeredMdp, TabularPolicy, TabularPolicy, TrajectoryFunctional]:
    """One random (mdp, pi, pi_off, f) instance with finite concentrability.

    pi_off gets full support (Dirichlet rows) so every ratio is finite;
    pi is deterministic half the time to stress large ratios.
    """
    mdp = random_mdp(
        rng,
        max_horizon=max_horizon,
        max_states=max_states,
        max_actions=max_actions,
        deterministic=adversarial,
    )
    pi_off = random_policy(rng, mdp.skeleton, concentration=0.7)
    pi = random_policy(
        rng, mdp.skeleton, deterministic=bool(rng.integers(0, 2))
    )
    if adversarial:
        f = cancellation_functional(rng, mdp)
    else:
        f = uniform_functional(rng, mdp)
    return mdp, pi, pi_off, f


@dataclass
class TightnessWitness:
    """A replayable worst case: serialized instance plus its observed ratio."""

    trial: int
    mdp_text: str
    pi_text: str
    pi_off_text: str
    f_text: str
    c_sa: float
    ratio: float
    normalized_ratio: float


@dataclass
class TightnessReport:
    """Observed slack of the moment-ratio bound over a randomized family."""

    trials: int
    finite_trials: int
    infinite_trials: int
    max_normalized_ratio: float
    rows: list[dict] = field(default_factory=list)
    witness: TightnessWitness | None = None


InstanceFactory = Callable[
    [np.random.Generator],
    tuple[LayeredMdp, TabularPolicy, TabularPolicy, TrajectoryFunctional],
]


def tightness_probe(
    factory: InstanceFactory,
    trials: int,
    seed: int = 0,
    cap: int | None = None,
) -> TightnessReport:
    """Randomized search for the largest observed ratio / (H^3 * C_sa).

    Each trial draws an instance from `factory` with an independent
    sub-seeded generator, certifies it, and records the normalized
    ratio. Instances with infinite concentrability are counted
    separately and excluded from the maximum. The worst witness is kept
    in serialized form so it can be replayed without the generator.
    """
    report = TightnessReport(trials, 0, 0, 0.0)
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        mdp, pi, pi_off, f = factory(rng)
        cert = lemma_certificate(mdp, pi, pi_off, f, cap=cap)
        if cert.vacuous or cert.ratio is None:
            report.infinite_trials += cert.vacuous
            report.finite_trials += not cert.vacuous
            continue
        report.finite_trials += 1
        normalized = cert.ratio / (mdp.horizon**3 * cert.c_sa)
        report.rows.append(
            {
                "trial": t,
                "horizon": mdp.horizon,
                "c_sa": cert.c_sa,
                "second_moment_target": cert.second_moment_target,
                "second_moment_ref": cert.second_moment_ref,
                "abs_moment_target": cert.abs_moment_target,
                "ratio": cert.ratio,
                "ratio_bound": cert.ratio_bound,
                "abs_bound": cert.abs_bound,
                "normalized_ratio": normalized,
                "passed": cert.passed,
            }
        )
        if normalized > report.max_normalized_ratio:
            report.max_normalized_ratio = normalized
            report.witness = TightnessWitness(
                trial=t,
                mdp_text=serialize.format_mdp(mdp),
                pi_text=serialize.format_policy(pi),
                pi_off_text=serialize.format_policy(pi_off),
                f_text=serialize.format_table(f.table),
                c_sa=cert.c_sa,
                ratio=cert.ratio,
                normalized_ratio=normalized,
            )
    return report


def replay_witness(witness: TightnessWitness, cap: int | None = None) -> float:
    """Recompute the witness ratio from its serialized instance."""
    mdp = serialize.parse_mdp(witness.mdp_text)
    pi = serialize.parse_policy(witness.pi_text, mdp.skeleton)
    pi_off = serialize.parse_policy(witness.pi_off_text, mdp.skeleton)
    f = TrajectoryFunctional(serialize.parse_table(witness.f_text, mdp.skeleton))
    cert = lemma_certificate(mdp, pi, pi_off, f, cap=cap)
    if cert.ratio is None:
        raise ValueError("witness instance has zero reference moment")
    return cert.ratio
