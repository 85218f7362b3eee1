"""Seeded random generators for small MDP instances, policies and tables.

Used throughout the test suite and the randomized sweeps. Everything is
deterministic given the numpy Generator passed in; callers own seeding.
"""

from __future__ import annotations

import numpy as np

from .mdp import (
    LayeredMdp,
    MdpSkeleton,
    StateActionTable,
    TabularPolicy,
    build_mdp,
    path_sum_extrema,
)


def random_mdp(
    rng: np.random.Generator,
    horizon: int | None = None,
    max_horizon: int = 4,
    max_states: int = 3,
    n_actions: int | None = None,
    max_actions: int = 3,
    deterministic: bool = False,
) -> LayeredMdp:
    """A random layered MDP with totals rescaled into [0, 1].

    Transition rows are Dirichlet(1) (full support) unless
    `deterministic`, in which case each row is a one-hot. Rewards are
    uniform on [0, 1] per pair, then scaled down so the maximum path sum
    is at most 1.
    """
    H = int(horizon) if horizon is not None else int(rng.integers(2, max_horizon + 1))
    A = int(n_actions) if n_actions is not None else int(rng.integers(2, max_actions + 1))
    sizes = [int(rng.integers(1, max_states + 1)) for _ in range(H)]
    layers = [[f"s{h + 1}_{i}" for i in range(sizes[h])] for h in range(H)]

    transitions = []
    for h in range(H - 1):
        if deterministic:
            t = np.zeros((sizes[h], A, sizes[h + 1]))
            targets = rng.integers(0, sizes[h + 1], size=(sizes[h], A))
            for s in range(sizes[h]):
                for a in range(A):
                    t[s, a, targets[s, a]] = 1.0
        else:
            t = rng.dirichlet(np.ones(sizes[h + 1]), size=(sizes[h], A))
        transitions.append(t)

    rewards = [rng.uniform(0.0, 1.0, size=(sizes[h], A)) for h in range(H)]
    draft = build_mdp(layers, A, transitions, rewards, validate_total_reward=False)
    _, high = path_sum_extrema(draft, draft.reward)
    if high > 1.0:
        rewards = [r / high for r in rewards]
    return build_mdp(layers, A, transitions, rewards)


def random_tree_mdp(
    rng: np.random.Generator, depth: int = 2, branching: int = 2
) -> LayeredMdp:
    """Deterministic complete tree: action a at depth d moves to child a."""
    A = branching
    sizes = [branching**h for h in range(depth)]
    layers = [[f"n{h + 1}_{i}" for i in range(sizes[h])] for h in range(depth)]
    transitions = []
    for h in range(depth - 1):
        t = np.zeros((sizes[h], A, sizes[h + 1]))
        for s in range(sizes[h]):
            for a in range(A):
                t[s, a, s * branching + a] = 1.0
        transitions.append(t)
    rewards = [rng.uniform(0.0, 1.0, size=(sizes[h], A)) for h in range(depth)]
    draft = build_mdp(layers, A, transitions, rewards, validate_total_reward=False)
    _, high = path_sum_extrema(draft, draft.reward)
    if high > 1.0:
        rewards = [r / high for r in rewards]
    return build_mdp(layers, A, transitions, rewards)


def random_policy(
    rng: np.random.Generator,
    skeleton: MdpSkeleton,
    concentration: float = 1.0,
    deterministic: bool = False,
) -> TabularPolicy:
    """Dirichlet rows (full support) or a uniformly random deterministic policy."""
    if deterministic:
        mapping = {
            name: int(rng.integers(0, skeleton.n_actions))
            for names in skeleton.layers
            for name in names
        }
        return TabularPolicy.deterministic(skeleton, mapping)
    rows = tuple(
        rng.dirichlet(np.full(skeleton.n_actions, concentration), size=len(names))
        for names in skeleton.layers
    )
    return TabularPolicy(skeleton, rows)


def random_reward_table(
    rng: np.random.Generator, mdp: LayeredMdp, low: float = 0.0, high: float = 1.0
) -> StateActionTable:
    """Uniform per-pair table rescaled so every path sum stays in [low, high]."""
    vals = tuple(
        rng.uniform(low, high, size=(len(names), mdp.n_actions))
        for names in mdp.layers
    )
    table = StateActionTable(mdp.skeleton, vals)
    lo, hi = path_sum_extrema(mdp, table)
    scale = max(abs(lo), abs(hi))
    bound = max(abs(low), abs(high))
    if scale > bound > 0:
        table = table.scaled(bound / scale)
    return table
