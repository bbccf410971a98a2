"""Small builders shared by the test modules."""

from __future__ import annotations

from impulse_qvi.problem import ProblemSpec, parse_config


def spec_1d(drift="0", sigma="0.5", f="0", g="0", cost="0.1", impulses=(-0.5, 0.5), floor=None,
            horizon=1.0) -> ProblemSpec:
    lines = [
        "dim = 1",
        f"horizon = {horizon!r}",
        f"drift.0 = {drift}",
        f"sigma.0.0 = {sigma}",
        f"running_reward = {f}",
        f"terminal_reward = {g}",
        f"cost = {cost}",
        *(f"impulse.{i} = {v!r}" for i, v in enumerate(impulses)),
        f"cost_floor = {floor if floor is not None else cost}",
    ]
    return parse_config("\n".join(lines))


def spec_2d(sigma=((0.4, 0.1), (0.1, 0.4)), drift=("0", "0"), g="0", cost="0.1") -> ProblemSpec:
    lines = ["dim = 2", "horizon = 1", f"drift.0 = {drift[0]}", f"drift.1 = {drift[1]}"]
    lines += [f"sigma.{i}.{j} = {sigma[i][j]!r}" for i in range(2) for j in range(2)]
    lines += ["running_reward = 0", f"terminal_reward = {g}", f"cost = {cost}",
              "impulse.0 = 0.5, 0", "impulse.1 = 0, -0.5", f"cost_floor = {cost}"]
    return parse_config("\n".join(lines))
