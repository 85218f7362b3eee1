"""Finite layered MDPs with exact dynamic programming.

Everything downstream (coverage coefficients, moment bounds, offline
solvers, preference learning) is built on the primitives here: layered
MDPs with a fixed start state, tabular policies, exact occupancy /
value / advantage computation, trajectory sampling, and brute-force
trajectory enumeration with a hard cap.

All probabilities are float64; "exact" means exact dynamic programming
at float64 resolution. Objects are treated as immutable after
construction and are safe to share across workers.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

ROW_TOL = 1e-12
TOTAL_REWARD_TOL = 1e-9

_ENUM_CAP_ENV = "OUTCOMELAB_ENUM_CAP"


class MdpValidationError(ValueError):
    """A construction-time invariant failed; the message names the offender."""


class EnumerationCapError(RuntimeError):
    """Trajectory or policy enumeration would exceed the configured cap."""


def default_enumeration_cap() -> int:
    """Trajectory-enumeration cap, overridable via OUTCOMELAB_ENUM_CAP."""
    raw = os.environ.get(_ENUM_CAP_ENV)
    if raw is None:
        return 1_000_000
    return int(raw)


@dataclass(frozen=True)
class MdpSkeleton:
    """State/action/layer structure shared by an MDP and everything indexed on it."""

    horizon: int
    layers: tuple[tuple[str, ...], ...]
    n_actions: int
    initial_state: str
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.horizon != len(self.layers):
            raise MdpValidationError(
                f"horizon {self.horizon} != number of layers {len(self.layers)}"
            )
        if self.horizon < 1:
            raise MdpValidationError("horizon must be >= 1")
        if self.n_actions < 1:
            raise MdpValidationError("at least one action required")
        index: dict[str, tuple[int, int]] = {}
        for h, names in enumerate(self.layers):
            if not names:
                raise MdpValidationError(f"layer {h + 1} is empty")
            for i, name in enumerate(names):
                if name in index:
                    raise MdpValidationError(
                        f"state name {name!r} appears in layers "
                        f"{index[name][0] + 1} and {h + 1}; layers must be disjoint"
                    )
                index[name] = (h, i)
        if self.initial_state not in index or index[self.initial_state][0] != 0:
            raise MdpValidationError(
                f"initial state {self.initial_state!r} is not in layer 1"
            )
        self._index.update(index)

    def locate(self, state: str) -> tuple[int, int]:
        """Return (layer, within-layer index) for a state name."""
        try:
            return self._index[state]
        except KeyError:
            raise MdpValidationError(f"unknown state {state!r}") from None

    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(len(names) for names in self.layers)

    @property
    def n_states(self) -> int:
        return sum(self.layer_sizes())


def _as_layer_arrays(
    skeleton: MdpSkeleton, values: Sequence[np.ndarray], what: str
) -> tuple[np.ndarray, ...]:
    if len(values) != skeleton.horizon:
        raise MdpValidationError(
            f"{what}: expected {skeleton.horizon} per-layer arrays, got {len(values)}"
        )
    out = []
    for h, arr in enumerate(values):
        a = np.asarray(arr, dtype=float)
        want = (len(skeleton.layers[h]), skeleton.n_actions)
        if a.shape != want:
            raise MdpValidationError(
                f"{what}: layer {h + 1} has shape {a.shape}, expected {want}"
            )
        out.append(a)
    return tuple(out)


@dataclass
class StateActionTable:
    """A real-valued table over all (state, action) pairs of a skeleton.

    Used for reward models, learned rewards, trajectory functionals,
    advantage tables, and sampling distributions over pairs.
    """

    skeleton: MdpSkeleton
    values: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        self.values = _as_layer_arrays(self.skeleton, self.values, "state-action table")

    @classmethod
    def zeros(cls, skeleton: MdpSkeleton) -> "StateActionTable":
        return cls(
            skeleton,
            tuple(
                np.zeros((len(names), skeleton.n_actions))
                for names in skeleton.layers
            ),
        )

    @classmethod
    def from_function(
        cls, skeleton: MdpSkeleton, fn: Callable[[str, int], float]
    ) -> "StateActionTable":
        vals = []
        for names in skeleton.layers:
            vals.append(
                np.array(
                    [[float(fn(s, a)) for a in range(skeleton.n_actions)] for s in names]
                )
            )
        return cls(skeleton, tuple(vals))

    @classmethod
    def from_entries(
        cls,
        skeleton: MdpSkeleton,
        entries: Mapping[tuple[str, int], float],
        default: float = 0.0,
    ) -> "StateActionTable":
        table = cls(
            skeleton,
            tuple(
                np.full((len(names), skeleton.n_actions), default, dtype=float)
                for names in skeleton.layers
            ),
        )
        for (state, action), value in entries.items():
            h, i = skeleton.locate(state)
            table.values[h][i, action] = float(value)
        return table

    def lookup(self, state: str, action: int) -> float:
        h, i = self.skeleton.locate(state)
        return float(self.values[h][i, action])

    def with_entry(self, state: str, action: int, value: float) -> "StateActionTable":
        vals = tuple(v.copy() for v in self.values)
        h, i = self.skeleton.locate(state)
        vals[h][i, action] = float(value)
        return StateActionTable(self.skeleton, vals)

    def scaled(self, factor: float) -> "StateActionTable":
        return StateActionTable(self.skeleton, tuple(v * factor for v in self.values))

    def minus(self, other: "StateActionTable") -> "StateActionTable":
        if other.skeleton.layers != self.skeleton.layers:
            raise MdpValidationError("tables live on different skeletons")
        return StateActionTable(
            self.skeleton,
            tuple(a - b for a, b in zip(self.values, other.values)),
        )

    def trajectory_total(self, traj: "Trajectory") -> float:
        total = 0.0
        for state, action in zip(traj.states, traj.actions):
            total += self.lookup(state, action)
        return total

    def gather(self, state_idx: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Per-record sums over a batch encoded as (n, H) index arrays."""
        n = state_idx.shape[0]
        out = np.zeros(n)
        for h, vals in enumerate(self.values):
            out += vals[state_idx[:, h], actions[:, h]]
        return out

    def equals(self, other: "StateActionTable", atol: float = 0.0) -> bool:
        if other.skeleton.layers != self.skeleton.layers:
            return False
        if atol == 0.0:
            return all(np.array_equal(a, b) for a, b in zip(self.values, other.values))
        return all(
            np.allclose(a, b, rtol=0.0, atol=atol)
            for a, b in zip(self.values, other.values)
        )


@dataclass
class LayeredMdp:
    """Finite layered MDP (S, A, P, r, H) with a fixed initial state.

    transitions[h] has shape (|S_h|, A, |S_{h+1}|) for h = 0..H-2; layer
    H transitions into a notional terminal. Rewards live in [0, 1] per
    pair and every trajectory's total reward lies in [0, 1].
    """

    skeleton: MdpSkeleton
    transitions: tuple[np.ndarray, ...]
    reward: StateActionTable

    @property
    def horizon(self) -> int:
        return self.skeleton.horizon

    @property
    def layers(self) -> tuple[tuple[str, ...], ...]:
        return self.skeleton.layers

    @property
    def n_actions(self) -> int:
        return self.skeleton.n_actions

    @property
    def initial_state(self) -> str:
        return self.skeleton.initial_state


def build_mdp(
    layers: Sequence[Sequence[str]] | Sequence[int],
    n_actions: int,
    transitions: Sequence[np.ndarray],
    rewards: Sequence[np.ndarray] | StateActionTable,
    initial_state: str | None = None,
    validate_total_reward: bool = True,
) -> LayeredMdp:
    """Validate a declarative MDP description and assemble a LayeredMdp.

    `layers` is either explicit per-layer state-name lists or per-layer
    state counts (names are then generated as ``s<h>_<i>``). Raises
    MdpValidationError naming the offending index on any violation.
    """
    named: list[tuple[str, ...]] = []
    for h, layer in enumerate(layers):
        if isinstance(layer, int):
            named.append(tuple(f"s{h + 1}_{i}" for i in range(layer)))
        else:
            named.append(tuple(str(s) for s in layer))
    if initial_state is None:
        initial_state = named[0][0]
    skeleton = MdpSkeleton(len(named), tuple(named), n_actions, initial_state)

    if len(transitions) != skeleton.horizon - 1:
        raise MdpValidationError(
            f"expected {skeleton.horizon - 1} transition tables, got {len(transitions)}"
        )
    trans = []
    for h, arr in enumerate(transitions):
        a = np.asarray(arr, dtype=float)
        want = (len(named[h]), n_actions, len(named[h + 1]))
        if a.shape != want:
            raise MdpValidationError(
                f"transition table for layer {h + 1} has shape {a.shape}, expected {want}"
            )
        if np.any(a < -ROW_TOL):
            s, act, _ = np.unravel_index(int(np.argmin(a)), a.shape)
            raise MdpValidationError(
                f"negative transition probability at layer {h + 1}, "
                f"state {named[h][s]!r}, action {act}"
            )
        sums = a.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
        if bad.size:
            s, act = bad[0]
            raise MdpValidationError(
                f"transition row (layer {h + 1}, state {named[h][s]!r}, action {act}) "
                f"sums to {sums[s, act]!r}, not 1"
            )
        trans.append(a)

    if isinstance(rewards, StateActionTable):
        if rewards.skeleton.layers != skeleton.layers:
            raise MdpValidationError("reward table skeleton does not match layers")
        reward = StateActionTable(skeleton, rewards.values)
    else:
        reward = StateActionTable(
            skeleton, tuple(np.asarray(r, dtype=float) for r in rewards)
        )
    for h, vals in enumerate(reward.values):
        bad = np.argwhere((vals < -ROW_TOL) | (vals > 1.0 + ROW_TOL))
        if bad.size:
            s, act = bad[0]
            raise MdpValidationError(
                f"reward out of [0, 1] at layer {h + 1}, "
                f"state {skeleton.layers[h][s]!r}, action {act}: {vals[s, act]!r}"
            )

    mdp = LayeredMdp(skeleton, tuple(trans), reward)
    if validate_total_reward:
        low, high = path_sum_extrema(mdp, reward)
        if high > 1.0 + TOTAL_REWARD_TOL or low < -TOTAL_REWARD_TOL:
            raise MdpValidationError(
                f"total trajectory reward range [{low!r}, {high!r}] leaves [0, 1]; "
                "rescale rewards before construction"
            )
    return mdp


@dataclass
class TabularPolicy:
    """Per-state action distribution over a skeleton's states."""

    skeleton: MdpSkeleton
    probs: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        self.probs = _as_layer_arrays(self.skeleton, self.probs, "policy")
        for h, rows in enumerate(self.probs):
            if np.any(rows < -ROW_TOL):
                s = int(np.argwhere(rows < -ROW_TOL)[0][0])
                raise MdpValidationError(
                    f"negative action probability at layer {h + 1}, "
                    f"state {self.skeleton.layers[h][s]!r}"
                )
            sums = rows.sum(axis=1)
            bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
            if bad.size:
                s = int(bad[0][0])
                raise MdpValidationError(
                    f"policy row for state {self.skeleton.layers[h][s]!r} sums to "
                    f"{sums[s]!r}, not 1"
                )

    @classmethod
    def uniform(cls, skeleton: MdpSkeleton) -> "TabularPolicy":
        return cls(
            skeleton,
            tuple(
                np.full((len(names), skeleton.n_actions), 1.0 / skeleton.n_actions)
                for names in skeleton.layers
            ),
        )

    @classmethod
    def deterministic(
        cls, skeleton: MdpSkeleton, actions: Mapping[str, int] | Sequence[np.ndarray]
    ) -> "TabularPolicy":
        """One-hot policy from either a state->action map or per-layer index arrays."""
        rows = []
        for h, names in enumerate(skeleton.layers):
            layer = np.zeros((len(names), skeleton.n_actions))
            for i, name in enumerate(names):
                if isinstance(actions, Mapping):
                    a = int(actions[name])
                else:
                    a = int(np.asarray(actions[h])[i])
                layer[i, a] = 1.0
            rows.append(layer)
        return cls(skeleton, tuple(rows))

    def probabilities(self, state: str) -> np.ndarray:
        h, i = self.skeleton.locate(state)
        return self.probs[h][i]

    def action_map(self) -> dict[str, int]:
        """Greedy map for deterministic policies (argmax row otherwise)."""
        out = {}
        for h, names in enumerate(self.skeleton.layers):
            for i, name in enumerate(names):
                out[name] = int(np.argmax(self.probs[h][i]))
        return out

    def is_deterministic(self) -> bool:
        return all(np.all(np.max(rows, axis=1) == 1.0) for rows in self.probs)

    def log_table(self) -> StateActionTable:
        """log pi(a|s) as a table; zeros map to -inf."""
        with np.errstate(divide="ignore"):
            vals = tuple(np.log(rows) for rows in self.probs)
        return StateActionTable(self.skeleton, vals)


@dataclass(frozen=True)
class Trajectory:
    """One full episode (s_1, a_1, ..., s_H, a_H) with optional reward info."""

    states: tuple[str, ...]
    actions: tuple[int, ...]
    step_rewards: tuple[float, ...] | None = None
    total_reward: float | None = None

    def __post_init__(self) -> None:
        if len(self.states) != len(self.actions):
            raise MdpValidationError("trajectory states/actions length mismatch")
        if self.step_rewards is not None and len(self.step_rewards) != len(self.states):
            raise MdpValidationError("trajectory step-reward length mismatch")
        if self.step_rewards is not None and self.total_reward is not None:
            if abs(sum(self.step_rewards) - self.total_reward) > 1e-12:
                raise MdpValidationError(
                    "total reward inconsistent with per-step rewards"
                )

    @property
    def horizon(self) -> int:
        return len(self.states)


@dataclass
class PolicyClass:
    """A finite, ordered set of policies; ties in search break to lowest index."""

    policies: tuple[TabularPolicy, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.names:
            self.names = tuple(f"pi_{i}" for i in range(len(self.policies)))
        if len(self.names) != len(self.policies):
            raise MdpValidationError("policy class names/policies length mismatch")

    def __len__(self) -> int:
        return len(self.policies)


@dataclass
class ValueTables:
    """V, Q and advantage tables of a policy under a given reward."""

    skeleton: MdpSkeleton
    v: tuple[np.ndarray, ...]
    q: tuple[np.ndarray, ...]
    adv: tuple[np.ndarray, ...]

    def v_of(self, state: str) -> float:
        h, i = self.skeleton.locate(state)
        return float(self.v[h][i])

    def q_of(self, state: str, action: int) -> float:
        h, i = self.skeleton.locate(state)
        return float(self.q[h][i, action])

    def advantage_of(self, state: str, action: int) -> float:
        h, i = self.skeleton.locate(state)
        return float(self.adv[h][i, action])

    def q_table(self) -> StateActionTable:
        return StateActionTable(self.skeleton, tuple(q.copy() for q in self.q))

    def advantage_table(self) -> StateActionTable:
        return StateActionTable(self.skeleton, tuple(a.copy() for a in self.adv))


@dataclass
class OccupancyTables:
    """State and state-action occupancies, optionally the full trajectory law."""

    skeleton: MdpSkeleton
    state: tuple[np.ndarray, ...]
    state_action: tuple[np.ndarray, ...]
    trajectories: dict[Trajectory, float] | None = None

    def state_of(self, name: str) -> float:
        h, i = self.skeleton.locate(name)
        return float(self.state[h][i])

    def state_action_of(self, name: str, action: int) -> float:
        h, i = self.skeleton.locate(name)
        return float(self.state_action[h][i, action])


def _check_same_skeleton(mdp: LayeredMdp, pi: TabularPolicy) -> None:
    if pi.skeleton.layers != mdp.skeleton.layers or pi.skeleton.n_actions != mdp.n_actions:
        raise MdpValidationError("policy does not match the MDP's skeleton")


def occupancy_measures(
    mdp: LayeredMdp,
    pi: TabularPolicy,
    with_trajectories: bool = False,
    cap: int | None = None,
) -> OccupancyTables:
    """Exact forward DP for d(s) and d(s,a); optional full trajectory law.

    The trajectory law is computed by enumeration and guarded by `cap`
    (default from the environment); exceeding the cap raises rather than
    silently truncating.
    """
    _check_same_skeleton(mdp, pi)
    d_state = [np.zeros(len(names)) for names in mdp.layers]
    d_sa = []
    h0, i0 = mdp.skeleton.locate(mdp.initial_state)
    d_state[0][i0] = 1.0
    for h in range(mdp.horizon):
        sa = d_state[h][:, None] * pi.probs[h]
        d_sa.append(sa)
        if h < mdp.horizon - 1:
            d_state[h + 1] = np.einsum("sa,sat->t", sa, mdp.transitions[h])
    tables = OccupancyTables(mdp.skeleton, tuple(d_state), tuple(d_sa))
    if with_trajectories:
        law: dict[Trajectory, float] = {}
        for si, ai, prob in enumerate_trajectories(mdp, pi, cap=cap):
            if prob <= 0.0:
                continue
            states = tuple(mdp.layers[h][s] for h, s in enumerate(si))
            steps = tuple(
                float(mdp.reward.values[h][s, a]) for h, (s, a) in enumerate(zip(si, ai))
            )
            law[Trajectory(states, ai, steps, sum(steps))] = prob
        tables.trajectories = law
    return tables


def value_tables(
    mdp: LayeredMdp, mu: TabularPolicy, reward: StateActionTable | None = None
) -> ValueTables:
    """Backward recursion for V^mu, Q^mu and the centered advantage."""
    _check_same_skeleton(mdp, mu)
    r = (reward or mdp.reward).values
    H = mdp.horizon
    q: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    v: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    for h in range(H - 1, -1, -1):
        if h == H - 1:
            q[h] = np.array(r[h], dtype=float, copy=True)
        else:
            q[h] = r[h] + np.einsum("sat,t->sa", mdp.transitions[h], v[h + 1])
        v[h] = np.einsum("sa,sa->s", mu.probs[h], q[h])
    adv = tuple(q[h] - v[h][:, None] for h in range(H))
    return ValueTables(mdp.skeleton, tuple(v), tuple(q), adv)


def policy_return(
    mdp: LayeredMdp, pi: TabularPolicy, reward: StateActionTable | None = None
) -> float:
    """Exact expected total reward of pi under the given reward table."""
    occ = occupancy_measures(mdp, pi)
    r = (reward or mdp.reward).values
    return float(sum((occ.state_action[h] * r[h]).sum() for h in range(mdp.horizon)))


def optimal_policy(
    mdp: LayeredMdp, reward: StateActionTable | None = None
) -> TabularPolicy:
    """Backward-induction argmax policy; ties break to the lowest action index."""
    r = (reward or mdp.reward).values
    H = mdp.horizon
    v_next = np.zeros(len(mdp.layers[H - 1]))
    choices: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    for h in range(H - 1, -1, -1):
        if h == H - 1:
            q = np.array(r[h], dtype=float, copy=True)
        else:
            q = r[h] + np.einsum("sat,t->sa", mdp.transitions[h], v_next)
        choices[h] = np.argmax(q, axis=1)
        v_next = np.max(q, axis=1)
    return TabularPolicy.deterministic(mdp.skeleton, choices)


def optimal_value(mdp: LayeredMdp, reward: StateActionTable | None = None) -> float:
    """max_pi J_r(pi), by backward induction."""
    r = (reward or mdp.reward).values
    H = mdp.horizon
    v_next = np.zeros(len(mdp.layers[H - 1]))
    for h in range(H - 1, -1, -1):
        if h == H - 1:
            q = np.array(r[h], dtype=float, copy=True)
        else:
            q = r[h] + np.einsum("sat,t->sa", mdp.transitions[h], v_next)
        v_next = np.max(q, axis=1)
    _, i0 = mdp.skeleton.locate(mdp.initial_state)
    return float(v_next[i0])


def path_sum_extrema(
    mdp: LayeredMdp, table: StateActionTable
) -> tuple[float, float]:
    """(min, max) of sum_h f(s_h, a_h) over the MDP's structural support.

    Structural support means every transition along the path has
    positive probability; all actions are allowed. Entries may be
    +-inf (propagated through the recursion).
    """
    H = mdp.horizon
    vals = table.values
    hi_next = None
    lo_next = None
    for h in range(H - 1, -1, -1):
        if h == H - 1:
            hi = np.max(vals[h], axis=1)
            lo = np.min(vals[h], axis=1)
        else:
            support = mdp.transitions[h] > 0.0
            reach_hi = np.where(support, hi_next[None, None, :], -np.inf).max(axis=2)
            reach_lo = np.where(support, lo_next[None, None, :], np.inf).min(axis=2)
            hi = np.max(vals[h] + reach_hi, axis=1)
            lo = np.min(vals[h] + reach_lo, axis=1)
        hi_next, lo_next = hi, lo
    _, i0 = mdp.skeleton.locate(mdp.initial_state)
    return float(lo_next[i0]), float(hi_next[i0])


def count_trajectories(mdp: LayeredMdp, pi: TabularPolicy | None = None) -> float:
    """Number of support trajectories (a float: may overflow int range)."""
    counts = np.zeros(len(mdp.layers[0]))
    _, i0 = mdp.skeleton.locate(mdp.initial_state)
    counts[i0] = 1.0
    for h in range(mdp.horizon - 1):
        branch = mdp.transitions[h] > 0.0
        if pi is not None:
            branch = branch & (pi.probs[h][:, :, None] > 0.0)
        counts = np.einsum("s,sat->t", counts, branch.astype(float))
    if pi is None:
        last_actions = np.full(len(mdp.layers[-1]), float(mdp.n_actions))
    else:
        last_actions = (pi.probs[-1] > 0.0).sum(axis=1).astype(float)
    return float((counts * last_actions).sum())


def enumerate_trajectories(
    mdp: LayeredMdp,
    pi: TabularPolicy | None = None,
    cap: int | None = None,
) -> Iterator[tuple[tuple[int, ...], tuple[int, ...], float]]:
    """Yield (state indices, actions, probability) over the support.

    With a policy, branches of zero policy probability are skipped and
    the probability is d^pi(tau); without one, all actions are walked
    and the probability is the pure transition product.
    """
    limit = default_enumeration_cap() if cap is None else cap
    total = count_trajectories(mdp, pi)
    if total > limit:
        raise EnumerationCapError(
            f"{total:.0f} trajectories exceed the enumeration cap {limit}"
        )
    H = mdp.horizon
    _, i0 = mdp.skeleton.locate(mdp.initial_state)

    def walk(h: int, s: int, prefix_s: tuple[int, ...], prefix_a: tuple[int, ...], prob: float):
        for a in range(mdp.n_actions):
            p_a = prob if pi is None else prob * float(pi.probs[h][s, a])
            if pi is not None and pi.probs[h][s, a] == 0.0:
                continue
            if h == H - 1:
                yield prefix_s + (s,), prefix_a + (a,), p_a
                continue
            row = mdp.transitions[h][s, a]
            for t in np.nonzero(row > 0.0)[0]:
                yield from walk(
                    h + 1, int(t), prefix_s + (s,), prefix_a + (a,), p_a * float(row[t])
                )

    yield from walk(0, i0, (), (), 1.0)


def trajectory_ensemble(
    mdp: LayeredMdp,
    policies: Sequence[TabularPolicy],
    tables: Sequence[StateActionTable] = (),
    cap: int | None = None,
) -> tuple[list[tuple[tuple[int, ...], tuple[int, ...]]], np.ndarray, np.ndarray]:
    """Enumerate the structural support once, scoring several policies/tables.

    Returns (paths, probs, sums) where probs has one column per policy
    (the trajectory law d^pi) and sums one column per table (the path
    sum of that table). The shared enumeration keeps cross-policy
    comparisons (coverage ratios, moment ratios) consistent.
    """
    paths = []
    prob_rows = []
    sum_rows = []
    for si, ai, _ in enumerate_trajectories(mdp, None, cap=cap):
        paths.append((si, ai))
        row = []
        for pi in policies:
            p = 1.0
            for h, (s, a) in enumerate(zip(si, ai)):
                p *= float(pi.probs[h][s, a])
                if h < mdp.horizon - 1:
                    p *= float(mdp.transitions[h][s, a, si[h + 1]])
            row.append(p)
        prob_rows.append(row)
        sum_rows.append(
            [
                sum(float(t.values[h][s, a]) for h, (s, a) in enumerate(zip(si, ai)))
                for t in tables
            ]
        )
    probs = np.array(prob_rows) if prob_rows else np.zeros((0, len(policies)))
    sums = np.array(sum_rows) if sum_rows else np.zeros((0, len(tables)))
    return paths, probs, sums


def sample_trajectory(
    mdp: LayeredMdp, pi: TabularPolicy, rng: np.random.Generator
) -> Trajectory:
    """Draw one trajectory; per-step rewards are filled from the MDP's reward."""
    si, ai, rew = sample_trajectories(mdp, pi, 1, rng)
    states = tuple(mdp.layers[h][si[0, h]] for h in range(mdp.horizon))
    steps = tuple(float(x) for x in rew[0])
    return Trajectory(states, tuple(int(a) for a in ai[0]), steps, float(rew[0].sum()))


def sample_trajectories(
    mdp: LayeredMdp, pi: TabularPolicy, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized sampler: (state indices, actions, step rewards), each (n, H)."""
    _check_same_skeleton(mdp, pi)
    H = mdp.horizon
    si = np.zeros((n, H), dtype=np.int64)
    ai = np.zeros((n, H), dtype=np.int64)
    rew = np.zeros((n, H))
    _, i0 = mdp.skeleton.locate(mdp.initial_state)
    cur = np.full(n, i0, dtype=np.int64)
    for h in range(H):
        si[:, h] = cur
        cum = np.cumsum(pi.probs[h], axis=1)
        u = rng.random(n)
        act = np.minimum(
            (u[:, None] > cum[cur]).sum(axis=1), mdp.n_actions - 1
        ).astype(np.int64)
        ai[:, h] = act
        rew[:, h] = mdp.reward.values[h][cur, act]
        if h < H - 1:
            flat = mdp.transitions[h][cur, act]
            cum_t = np.cumsum(flat, axis=1)
            u2 = rng.random(n)
            cur = np.minimum(
                (u2[:, None] > cum_t).sum(axis=1), len(mdp.layers[h + 1]) - 1
            ).astype(np.int64)
    return si, ai, rew


def trajectories_from_arrays(
    mdp: LayeredMdp,
    si: np.ndarray,
    ai: np.ndarray,
    rew: np.ndarray,
    keep: str = "total",
) -> list[Trajectory]:
    """Wrap sampled index arrays as Trajectory records.

    keep: "total" attaches only the summed reward (outcome supervision),
    "steps" attaches per-step rewards, "none" attaches neither.
    """
    out = []
    totals = rew.sum(axis=1)
    for k in range(si.shape[0]):
        states = tuple(mdp.layers[h][si[k, h]] for h in range(mdp.horizon))
        actions = tuple(int(a) for a in ai[k])
        if keep == "total":
            out.append(Trajectory(states, actions, None, float(totals[k])))
        elif keep == "steps":
            steps = tuple(float(x) for x in rew[k])
            out.append(Trajectory(states, actions, steps, float(totals[k])))
        else:
            out.append(Trajectory(states, actions))
    return out


def encode_trajectories(
    skeleton: MdpSkeleton, trajectories: Sequence[Trajectory]
) -> tuple[np.ndarray, np.ndarray]:
    """Map trajectories to (n, H) layer-local state / action index arrays."""
    n = len(trajectories)
    H = skeleton.horizon
    si = np.zeros((n, H), dtype=np.int64)
    ai = np.zeros((n, H), dtype=np.int64)
    for k, traj in enumerate(trajectories):
        if traj.horizon != H:
            raise MdpValidationError(
                f"trajectory horizon {traj.horizon} != skeleton horizon {H}"
            )
        for h, (state, action) in enumerate(zip(traj.states, traj.actions)):
            layer, idx = skeleton.locate(state)
            if layer != h:
                raise MdpValidationError(
                    f"state {state!r} belongs to layer {layer + 1}, found at step {h + 1}"
                )
            si[k, h] = idx
            ai[k, h] = action
    return si, ai


def all_deterministic_policies(
    skeleton: MdpSkeleton, cap: int | None = None
) -> Iterator[TabularPolicy]:
    """Enumerate every deterministic Markov policy (cap-guarded)."""
    limit = default_enumeration_cap() if cap is None else cap
    n_states = skeleton.n_states
    total = float(skeleton.n_actions) ** n_states
    if total > limit:
        raise EnumerationCapError(
            f"{total:.3g} deterministic policies exceed the cap {limit}"
        )
    flat_names = [name for names in skeleton.layers for name in names]
    for combo in np.ndindex(*(skeleton.n_actions,) * n_states):
        mapping = dict(zip(flat_names, combo))
        yield TabularPolicy.deterministic(skeleton, mapping)


def validate_trajectory(mdp: LayeredMdp, traj: Trajectory) -> None:
    """Check a trajectory respects the layer structure and has P > 0 throughout."""
    si, ai = encode_trajectories(mdp.skeleton, [traj])
    for h in range(mdp.horizon - 1):
        p = mdp.transitions[h][si[0, h], ai[0, h], si[0, h + 1]]
        if p <= 0.0:
            raise MdpValidationError(
                f"transition {traj.states[h]!r} -> {traj.states[h + 1]!r} "
                f"under action {int(ai[0, h])} has probability 0"
            )
