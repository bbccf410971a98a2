"""Shipped example problems with a recommended lattice for each."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from .errors import ConfigError
from .grid import GridSpec
from .problem import ProblemSpec, parse_config

__all__ = ["Instance", "INSTANCES", "instance_text", "load_instance"]


@dataclass(frozen=True)
class Instance:
    name: str
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    nodes: tuple[int, ...]
    time_steps: int
    x0: tuple[float, ...]


INSTANCES: dict[str, Instance] = {
    i.name: i
    for i in (
        Instance("hat", (-2.0,), (2.0,), (201,), 100, (0.0,)),
        Instance("gaussian", (-6.0,), (6.0,), (241,), 100, (0.0,)),
        Instance("zero", (-2.0,), (2.0,), (81,), 50, (0.0,)),
        Instance("expensive", (-2.0,), (2.0,), (201,), 100, (0.0,)),
        Instance("deterministic", (0.0,), (4.0,), (9,), 8, (2.0,)),
        Instance("hat2d", (-2.0, -2.0), (2.0, 2.0), (41, 41), 40, (0.0, 0.0)),
    )
}


def instance_text(name: str) -> str:
    if name not in INSTANCES:
        raise ConfigError(f"unknown instance {name!r}; choose from {', '.join(sorted(INSTANCES))}")
    return resources.files(__package__).joinpath("data", f"{name}.cfg").read_text(encoding="utf-8")


def load_instance(name: str) -> tuple[ProblemSpec, GridSpec]:
    """Problem and recommended grid for a shipped instance."""
    spec = parse_config(instance_text(name))
    i = INSTANCES[name]
    return spec, GridSpec(i.lower, i.upper, i.nodes, i.time_steps, spec.horizon)
