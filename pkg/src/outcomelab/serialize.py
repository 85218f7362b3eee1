"""Human-editable text formats for MDPs, policies, tables and datasets.

All floats are written with 17 significant digits, which round-trips
float64 exactly; integer-valued and dyadic entries therefore also
round-trip in their short decimal form. One record per line throughout.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mdp import (
    LayeredMdp,
    MdpSkeleton,
    MdpValidationError,
    StateActionTable,
    TabularPolicy,
    Trajectory,
    build_mdp,
)


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _split_kv(line: str, lineno: int) -> tuple[str, str]:
    if "=" not in line:
        raise MdpValidationError(f"line {lineno}: expected 'key = value'")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


def format_mdp(mdp: LayeredMdp) -> str:
    """Serialize an MDP to the key-value spec format (lossless round-trip)."""
    lines = [
        f"horizon = {mdp.horizon}",
        f"actions = {mdp.n_actions}",
        "layers = " + " ".join(str(len(names)) for names in mdp.layers),
    ]
    for h, names in enumerate(mdp.layers):
        lines.append(f"states {h + 1} = " + " ".join(names))
    lines.append(f"initial_state = {mdp.initial_state}")
    for h in range(mdp.horizon - 1):
        for i, name in enumerate(mdp.layers[h]):
            for a in range(mdp.n_actions):
                row = " ".join(fmt(p) for p in mdp.transitions[h][i, a])
                lines.append(f"transition {h + 1} {name} {a} = {row}")
    for h, names in enumerate(mdp.layers):
        for i, name in enumerate(names):
            for a in range(mdp.n_actions):
                lines.append(
                    f"reward {h + 1} {name} {a} = {fmt(mdp.reward.values[h][i, a])}"
                )
    return "\n".join(lines) + "\n"


def parse_mdp(text: str) -> LayeredMdp:
    """Parse the key-value MDP spec format produced by format_mdp.

    State-name lines are optional; when absent, names are generated from
    the layer sizes, matching what build_mdp does for count-only input.
    """
    horizon = None
    actions = None
    sizes: list[int] | None = None
    names: dict[int, list[str]] = {}
    initial_state = None
    transition_lines: list[tuple[int, str, int, list[float]]] = []
    reward_lines: list[tuple[int, str, int, float]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split_kv(line, lineno)
        parts = key.split()
        if key == "horizon":
            horizon = int(value)
        elif key == "actions":
            actions = int(value)
        elif key == "layers":
            sizes = [int(tok) for tok in value.split()]
        elif parts[0] == "states":
            names[int(parts[1]) - 1] = value.split()
        elif key == "initial_state":
            initial_state = value
        elif parts[0] == "transition":
            h, state, a = int(parts[1]) - 1, parts[2], int(parts[3])
            transition_lines.append((h, state, a, [float(tok) for tok in value.split()]))
        elif parts[0] == "reward":
            h, state, a = int(parts[1]) - 1, parts[2], int(parts[3])
            reward_lines.append((h, state, a, float(value)))
        else:
            raise MdpValidationError(f"line {lineno}: unknown key {key!r}")

    if horizon is None or actions is None or sizes is None or initial_state is None:
        raise MdpValidationError(
            "MDP spec must define horizon, actions, layers and initial_state"
        )
    if len(sizes) != horizon:
        raise MdpValidationError("layers line does not match horizon")
    layers = []
    for h in range(horizon):
        layer = names.get(h, [f"s{h + 1}_{i}" for i in range(sizes[h])])
        if len(layer) != sizes[h]:
            raise MdpValidationError(f"states {h + 1} does not match layer size")
        layers.append(layer)

    index = {name: (h, i) for h, layer in enumerate(layers) for i, name in enumerate(layer)}
    transitions = [
        np.zeros((sizes[h], actions, sizes[h + 1])) for h in range(horizon - 1)
    ]
    for h, state, a, row in transition_lines:
        if state not in index or index[state][0] != h:
            raise MdpValidationError(f"transition references unknown state {state!r}")
        if len(row) != sizes[h + 1]:
            raise MdpValidationError(
                f"transition row for {state!r} action {a} has wrong length"
            )
        transitions[h][index[state][1], a] = row
    rewards = [np.zeros((sizes[h], actions)) for h in range(horizon)]
    for h, state, a, value in reward_lines:
        if state not in index or index[state][0] != h:
            raise MdpValidationError(f"reward references unknown state {state!r}")
        rewards[h][index[state][1], a] = value
    return build_mdp(layers, actions, transitions, rewards, initial_state)


def save_mdp(mdp: LayeredMdp, path: str | Path) -> None:
    Path(path).write_text(format_mdp(mdp), encoding="utf-8")


def load_mdp(path: str | Path) -> LayeredMdp:
    return parse_mdp(Path(path).read_text(encoding="utf-8"))


def format_table(table: StateActionTable) -> str:
    lines = []
    for h, names in enumerate(table.skeleton.layers):
        for i, name in enumerate(names):
            row = " ".join(fmt(v) for v in table.values[h][i])
            lines.append(f"{name} = {row}")
    return "\n".join(lines) + "\n"


def parse_table(text: str, skeleton: MdpSkeleton) -> StateActionTable:
    table = StateActionTable.zeros(skeleton)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        name, value = _split_kv(line, lineno)
        h, i = skeleton.locate(name)
        row = [float(tok) for tok in value.split()]
        if len(row) != skeleton.n_actions:
            raise MdpValidationError(f"line {lineno}: wrong action count")
        table.values[h][i] = row
    return table


def format_policy(pi: TabularPolicy) -> str:
    return format_table(StateActionTable(pi.skeleton, pi.probs))


def parse_policy(text: str, skeleton: MdpSkeleton) -> TabularPolicy:
    table = parse_table(text, skeleton)
    return TabularPolicy(skeleton, table.values)


def _format_steps(traj: Trajectory) -> str:
    return "(" + ";".join(f"{s},{a}" for s, a in zip(traj.states, traj.actions)) + ")"


def _parse_steps(token: str) -> tuple[tuple[str, ...], tuple[int, ...]]:
    inner = token.strip()
    if not (inner.startswith("(") and inner.endswith(")")):
        raise MdpValidationError(f"malformed trajectory token {token!r}")
    states = []
    actions = []
    for step in inner[1:-1].split(";"):
        state, action = step.split(",")
        states.append(state)
        actions.append(int(action))
    return tuple(states), tuple(actions)


def format_outcome_records(records: Iterable[Trajectory]) -> str:
    """One `traj=... R=...` line per outcome record."""
    lines = []
    for traj in records:
        if traj.total_reward is None:
            raise MdpValidationError("outcome record lacks a total reward")
        lines.append(f"traj={_format_steps(traj)} R={fmt(traj.total_reward)}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_outcome_records(text: str) -> list[Trajectory]:
    records = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        traj_tok, r_tok = line.split()
        states, actions = _parse_steps(traj_tok.split("=", 1)[1])
        total = float(r_tok.split("=", 1)[1])
        records.append(Trajectory(states, actions, None, total))
    return records


def format_process_records(records: Iterable[Trajectory]) -> str:
    """One `traj=... r=(r_1,...,r_H)` line per process record."""
    lines = []
    for traj in records:
        if traj.step_rewards is None:
            raise MdpValidationError("process record lacks per-step rewards")
        rs = ",".join(fmt(r) for r in traj.step_rewards)
        lines.append(f"traj={_format_steps(traj)} r=({rs})")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_process_records(text: str) -> list[Trajectory]:
    records = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        traj_tok, r_tok = line.split()
        states, actions = _parse_steps(traj_tok.split("=", 1)[1])
        body = r_tok.split("=", 1)[1].strip()
        steps = tuple(float(tok) for tok in body[1:-1].split(","))
        records.append(Trajectory(states, actions, steps, float(sum(steps))))
    return records


def format_preference_pairs(
    pairs: Iterable[tuple[Trajectory, Trajectory]]
) -> str:
    """One `win=... lose=...` line per preference pair."""
    lines = [
        f"win={_format_steps(win)} lose={_format_steps(lose)}" for win, lose in pairs
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_preference_pairs(text: str) -> list[tuple[Trajectory, Trajectory]]:
    pairs = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        win_tok, lose_tok = line.split()
        win = Trajectory(*_parse_steps(win_tok.split("=", 1)[1]))
        lose = Trajectory(*_parse_steps(lose_tok.split("=", 1)[1]))
        pairs.append((win, lose))
    return pairs


def format_advantage_samples(
    entries: Sequence[tuple[int, str, int, float]], rollouts: int
) -> str:
    """CSV with header h,s,a,k,estimate."""
    lines = ["h,s,a,k,estimate"]
    for layer, state, action, estimate in entries:
        lines.append(f"{layer},{state},{action},{rollouts},{fmt(estimate)}")
    return "\n".join(lines) + "\n"


def parse_advantage_samples(
    text: str,
) -> tuple[list[tuple[int, str, int, float]], int]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "h,s,a,k,estimate":
        raise MdpValidationError("advantage sample CSV missing header")
    entries = []
    rollouts = 1
    for line in lines[1:]:
        h, state, a, k, est = line.split(",")
        entries.append((int(h), state, int(a), float(est)))
        rollouts = int(k)
    return entries, rollouts


def format_model_class(
    candidates: Sequence[LayeredMdp], names: Sequence[str]
) -> str:
    """Shared structure once, then per-candidate transition/reward blocks."""
    first = candidates[0]
    lines = [
        f"horizon = {first.horizon}",
        f"actions = {first.n_actions}",
        "layers = " + " ".join(str(len(layer)) for layer in first.layers),
    ]
    for h, layer in enumerate(first.layers):
        lines.append(f"states {h + 1} = " + " ".join(layer))
    lines.append(f"initial_state = {first.initial_state}")
    for name, mdp in zip(names, candidates):
        if mdp.skeleton.layers != first.skeleton.layers:
            raise MdpValidationError("model class candidates must share the skeleton")
        lines.append(f"candidate = {name}")
        for h in range(mdp.horizon - 1):
            for i, state in enumerate(mdp.layers[h]):
                for a in range(mdp.n_actions):
                    row = " ".join(fmt(p) for p in mdp.transitions[h][i, a])
                    lines.append(f"transition {h + 1} {state} {a} = {row}")
        for h, layer in enumerate(mdp.layers):
            for i, state in enumerate(layer):
                for a in range(mdp.n_actions):
                    lines.append(
                        f"reward {h + 1} {state} {a} = {fmt(mdp.reward.values[h][i, a])}"
                    )
    return "\n".join(lines) + "\n"


def parse_model_class(text: str) -> tuple[list[LayeredMdp], list[str]]:
    header_lines: list[str] = []
    blocks: list[tuple[str, list[str]]] = []
    current: list[str] | None = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split_kv(line, 0)
        if key == "candidate":
            current = []
            blocks.append((value, current))
        elif current is None:
            header_lines.append(line)
        else:
            current.append(line)
    if not blocks:
        raise MdpValidationError("model class spec has no candidates")
    candidates = []
    names = []
    for name, body in blocks:
        candidates.append(parse_mdp("\n".join(header_lines + body) + "\n"))
        names.append(name)
    return candidates, names
