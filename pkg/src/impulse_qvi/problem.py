"""Problem data, config-file ingestion and sampled checks of the standing assumptions."""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ExprSyntaxError, ImpulseQVIError
from .expr import Const, Expr, eval_expr, parse_expr, to_source, variables
from .grid import GridSpec

__all__ = [
    "ProblemSpec",
    "CheckResult",
    "ValidationReport",
    "parse_config",
    "load_config",
    "validate_problem",
]

_SUM_MATCH_TOL = 1e-12


@dataclass(frozen=True)
class ProblemSpec:
    """Finite-horizon impulse-control problem.

    ``sigma`` is an ``dim x d`` nested tuple; ``impulses`` is the finite
    action set, one ``dim``-vector per entry.
    """

    dim: int
    horizon: float
    drift: tuple[Expr, ...]
    sigma: tuple[tuple[Expr, ...], ...]
    running_reward: Expr
    terminal_reward: Expr
    cost: Expr
    impulses: tuple[tuple[float, ...], ...]
    cost_floor: float

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("dim must be a positive integer")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ConfigError("horizon must be a finite positive number")
        if len(self.drift) != self.dim:
            raise ConfigError(f"drift needs {self.dim} components, got {len(self.drift)}")
        if len(self.sigma) != self.dim or len({len(r) for r in self.sigma}) != 1 or not self.sigma[0]:
            raise ConfigError("sigma must be a non-empty dim x d matrix")
        if not self.impulses:
            raise ConfigError("impulse set must be nonempty")
        for xi in self.impulses:
            if len(xi) != self.dim or not all(math.isfinite(v) for v in xi):
                raise ConfigError(f"impulse {xi} is not a finite {self.dim}-vector")
        if not math.isfinite(self.cost_floor):
            raise ConfigError("cost_floor must be finite")
        for name, e in self._state_exprs():
            bad = {v for v in variables(e) if v.startswith("xi")}
            if bad:
                raise ConfigError(f"{name} may not reference impulse variables {sorted(bad)}")
        if "t" in variables(self.terminal_reward) or any(
            v.startswith("xi") for v in variables(self.terminal_reward)
        ):
            raise ConfigError("terminal_reward may only depend on x")

    def _state_exprs(self):
        for i, e in enumerate(self.drift):
            yield f"drift.{i}", e
        for i, row in enumerate(self.sigma):
            for j, e in enumerate(row):
                yield f"sigma.{i}.{j}", e
        yield "running_reward", self.running_reward

    @property
    def noise_dim(self) -> int:
        return len(self.sigma[0])

    @property
    def impulse_array(self) -> np.ndarray:
        return np.asarray(self.impulses, dtype=float)

    # Vectorised evaluation on point clouds ``pts`` of shape (K, dim).

    def eval_drift(self, t: float, pts: np.ndarray) -> np.ndarray:
        x = pts.T
        return np.stack([_as_array(eval_expr(e, t, x), len(pts)) for e in self.drift])

    def eval_sigma(self, t: float, pts: np.ndarray) -> np.ndarray:
        """Shape (dim, d, K)."""
        x = pts.T
        return np.stack(
            [np.stack([_as_array(eval_expr(e, t, x), len(pts)) for e in row]) for row in self.sigma]
        )

    def eval_running(self, t: float, pts: np.ndarray) -> np.ndarray:
        return _as_array(eval_expr(self.running_reward, t, pts.T), len(pts))

    def eval_terminal(self, pts: np.ndarray) -> np.ndarray:
        return _as_array(eval_expr(self.terminal_reward, None, pts.T), len(pts))

    def eval_cost(self, t: float, pts: np.ndarray, xi: Sequence[float]) -> np.ndarray:
        return _as_array(eval_expr(self.cost, t, pts.T, xi), len(pts))

    def to_config(self) -> str:
        """Render back into the key/value config format."""
        lines = [f"dim = {self.dim}", f"horizon = {self.horizon!r}"]
        lines += [f"drift.{i} = {to_source(e)}" for i, e in enumerate(self.drift)]
        for i, row in enumerate(self.sigma):
            lines += [f"sigma.{i}.{j} = {to_source(e)}" for j, e in enumerate(row)]
        lines += [
            f"running_reward = {to_source(self.running_reward)}",
            f"terminal_reward = {to_source(self.terminal_reward)}",
            f"cost = {to_source(self.cost)}",
        ]
        lines += [
            f"impulse.{m} = " + ", ".join(repr(float(v)) for v in xi)
            for m, xi in enumerate(self.impulses)
        ]
        lines.append(f"cost_floor = {self.cost_floor!r}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_config().encode()).hexdigest()


def _as_array(value, size: int) -> np.ndarray:
    return np.array(np.broadcast_to(value, (size,)), dtype=float)


# --- config file ------------------------------------------------------------

_SCALAR_KEYS = ("dim", "horizon", "running_reward", "terminal_reward", "cost", "cost_floor")


def parse_config(text: str) -> ProblemSpec:
    """Parse the flat ``key = value`` problem format.

    Blank lines and lines starting with ``#`` are ignored. Missing
    ``sigma.i.j`` entries inside the inferred ``dim x d`` shape default to 0.
    """
    entries: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not _known_key(key):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        entries[key] = (value, lineno)

    for key in _SCALAR_KEYS:
        if key not in entries:
            raise ConfigError(f"missing required key {key!r}")

    try:
        dim = int(entries["dim"][0])
    except ValueError:
        raise ConfigError(f"line {entries['dim'][1]}: dim must be an integer") from None
    if dim < 1:
        raise ConfigError("dim must be a positive integer")
    horizon = _float(entries, "horizon")
    cost_floor = _float(entries, "cost_floor")

    def expr(key: str) -> Expr:
        value, lineno = entries[key]
        try:
            return parse_expr(value, dim)
        except ExprSyntaxError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from exc

    drift = []
    for i in range(dim):
        if f"drift.{i}" not in entries:
            raise ConfigError(f"missing required key 'drift.{i}'")
        drift.append(expr(f"drift.{i}"))

    sig_idx = [tuple(int(p) for p in k.split(".")[1:]) for k in entries if k.startswith("sigma.")]
    for i, j in sig_idx:
        if i >= dim:
            raise ConfigError(f"sigma.{i}.{j}: row index exceeds dim {dim}")
    d = 1 + max((j for _, j in sig_idx), default=0)
    sigma = tuple(
        tuple(expr(f"sigma.{i}.{j}") if f"sigma.{i}.{j}" in entries else Const(0.0) for j in range(d))
        for i in range(dim)
    )

    imp_keys = sorted((int(k.split(".")[1]), k) for k in entries if k.startswith("impulse."))
    if not imp_keys:
        raise ConfigError("missing required key 'impulse.0' (impulse set must be nonempty)")
    if [m for m, _ in imp_keys] != list(range(len(imp_keys))):
        raise ConfigError("impulse keys must be numbered 0, 1, 2, ... without gaps")
    impulses = []
    for _, key in imp_keys:
        value, lineno = entries[key]
        try:
            vec = tuple(float(v) for v in value.split(","))
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} must be a comma-separated vector") from None
        if len(vec) != dim:
            raise ConfigError(f"line {lineno}: {key} has {len(vec)} components, expected {dim}")
        impulses.append(vec)

    return ProblemSpec(
        dim=dim,
        horizon=horizon,
        drift=tuple(drift),
        sigma=sigma,
        running_reward=expr("running_reward"),
        terminal_reward=expr("terminal_reward"),
        cost=expr("cost"),
        impulses=tuple(impulses),
        cost_floor=cost_floor,
    )


def _known_key(key: str) -> bool:
    if key in _SCALAR_KEYS:
        return True
    parts = key.split(".")
    if parts[0] in ("drift", "impulse") and len(parts) == 2:
        return parts[1].isdigit()
    if parts[0] == "sigma" and len(parts) == 3:
        return parts[1].isdigit() and parts[2].isdigit()
    return False


def _float(entries, key: str) -> float:
    value, lineno = entries[key]
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} must be a number") from None


def load_config(path: str | Path) -> ProblemSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# --- validation -------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float  # largest violation (positive = violated), or -inf if nothing sampled
    location: dict | None = None
    message: str = ""


@dataclass
class ValidationReport:
    checks: list[CheckResult]
    lipschitz: float
    sup_drift: float
    sup_sigma: float
    sup_running: float
    sup_terminal: float
    horizon: float
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> CheckResult:
        return next(c for c in self.checks if c.name == name)

    @property
    def value_bound(self) -> float:
        """Sampled bound ``T*|f|_inf + |g|_inf`` on every value field."""
        return self.horizon * self.sup_running + self.sup_terminal

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            line = f"{c.name:<18} {status}  worst={c.worst!r}"
            if c.location is not None:
                line += f"  at {c.location}"
            if c.message:
                line += f"  ({c.message})"
            lines.append(line)
        lines.append(f"lipschitz(b,sigma) ~ {self.lipschitz!r}")
        lines.append(f"sup|b| = {self.sup_drift!r}  sup|sigma| = {self.sup_sigma!r}")
        lines.append(f"sup|f| = {self.sup_running!r}  sup|g| = {self.sup_terminal!r}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def _loc(t, x, xi=None) -> dict:
    out = {"t": float(t), "x": tuple(float(v) for v in x)}
    if xi is not None:
        out["xi"] = tuple(float(v) for v in xi)
    return out


class _Worst:
    """Running maximum of a violation field with its location."""

    def __init__(self, name: str):
        self.name = name
        self.worst = -math.inf
        self.location = None
        self.error: str | None = None

    def update(self, values: np.ndarray, t, pts, xi=None):
        i = int(np.argmax(values))
        if values[i] > self.worst:
            self.worst = float(values[i])
            self.location = _loc(t, pts[i], xi)

    def fail_eval(self, exc: ImpulseQVIError, t, pts, xi=None):
        if self.error is None:
            idx = getattr(exc, "index", None)
            self.error = f"evaluation error: {exc}"
            self.location = _loc(t, pts[idx if idx is not None else 0], xi)

    def result(self, tol: float) -> CheckResult:
        if self.error is not None:
            return CheckResult(self.name, False, math.inf, self.location, self.error)
        passed = self.worst <= tol
        return CheckResult(self.name, passed, self.worst, self.location)


def validate_problem(spec: ProblemSpec, lattice: GridSpec, tol: float = 0.0) -> ValidationReport:
    """Sample the standing assumptions on every node and time level of ``lattice``.

    Failures are reported, never raised.  Checks: coefficient evaluation and a
    divided-difference Lipschitz estimate for drift/diffusion, boundedness of
    rewards, the cost floor ``c >= k > 0``, subadditivity of ``c`` over pairs
    whose sum is again an admissible impulse, and the no-impulse-at-maturity
    inequality ``max_xi g(x + xi) - c(T, x, xi) <= g(x)``.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    pts = lattice.points
    times = lattice.times
    U = spec.impulse_array

    coeff = _Worst("H1-coefficients")
    rewards = _Worst("H2-rewards")
    floor = _Worst("H3-cost-floor")
    subadd = _Worst("H3-subadditivity")
    terminal = _Worst("H4-terminal")

    lip = 0.0
    sup_b = sup_s = sup_f = sup_g = 0.0
    coeff.worst = rewards.worst = 0.0

    pairs = []
    for a, b in itertools.product(range(len(U)), repeat=2):
        s = U[a] + U[b]
        hit = np.flatnonzero(np.all(np.abs(U - s) <= _SUM_MATCH_TOL, axis=1))
        if hit.size:
            pairs.append((a, b, int(hit[0])))

    for t in times:
        try:
            b = spec.eval_drift(t, pts)
            s = spec.eval_sigma(t, pts)
            sup_b = max(sup_b, float(np.max(np.abs(b))))
            sup_s = max(sup_s, float(np.max(np.abs(s))))
            lip = max(lip, _lipschitz(lattice, b, s))
        except ImpulseQVIError as exc:
            coeff.fail_eval(exc, t, pts)
        try:
            sup_f = max(sup_f, float(np.max(np.abs(spec.eval_running(t, pts)))))
        except ImpulseQVIError as exc:
            rewards.fail_eval(exc, t, pts)

        costs = []
        for xi in U:
            try:
                costs.append(spec.eval_cost(t, pts, xi))
            except ImpulseQVIError as exc:
                floor.fail_eval(exc, t, pts, xi)
                costs.append(None)
        for xi, c in zip(U, costs):
            if c is not None:
                floor.update(spec.cost_floor - c, t, pts, xi)
        for a, b_, s_ in pairs:
            if costs[a] is None or costs[b_] is None or costs[s_] is None:
                continue
            subadd.update(costs[s_] - costs[a] - costs[b_], t, pts, U[s_])

    T = spec.horizon
    try:
        g = spec.eval_terminal(pts)
        sup_g = float(np.max(np.abs(g)))
        for xi in U:
            try:
                gain = spec.eval_terminal(pts + xi) - spec.eval_cost(T, pts, xi)
            except ImpulseQVIError as exc:
                terminal.fail_eval(exc, T, pts, xi)
                continue
            terminal.update(gain - g, T, pts, xi)
    except ImpulseQVIError as exc:
        rewards.fail_eval(exc, T, pts)
        terminal.fail_eval(exc, T, pts)

    checks = [coeff.result(math.inf), rewards.result(math.inf), floor.result(tol)]
    if spec.cost_floor <= 0:
        checks[2] = CheckResult("H3-cost-floor", False, -spec.cost_floor,
                                _loc(times[0], pts[0]), "cost_floor k must be positive")
    if pairs:
        checks.append(subadd.result(tol))
    else:
        checks.append(CheckResult("H3-subadditivity", True, -math.inf, None, "no pair sums inside U"))
    checks.append(terminal.result(tol))
    return ValidationReport(
        checks=checks,
        lipschitz=lip,
        sup_drift=sup_b,
        sup_sigma=sup_s,
        sup_running=sup_f,
        sup_terminal=sup_g,
        horizon=T,
        notes=[
            "checks are sampled on the lattice only; uniform continuity of c is not certified",
            "domain truncated to a box with reflecting walls; trust region shrinks by the max impulse radius",
        ],
    )


def _lipschitz(grid: GridSpec, b: np.ndarray, s: np.ndarray) -> float:
    """Max over axes of (|db| + |dsigma|) / h between neighbouring nodes."""
    shape = grid.shape
    b = b.reshape((b.shape[0],) + shape)
    s = s.reshape((s.shape[0] * s.shape[1],) + shape)
    best = 0.0
    for axis, h in enumerate(grid.spacing):
        db = np.linalg.norm(np.diff(b, axis=axis + 1), axis=0)
        ds = np.linalg.norm(np.diff(s, axis=axis + 1), axis=0)
        best = max(best, float(np.max(db + ds)) / h)
    return best
