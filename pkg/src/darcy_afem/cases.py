"""The two ready-made experiment setups.

``manufactured`` wraps the closed-form reference solution on the unit square
(forcing terms derived so the exact fields solve the system), so errors and
effectivity are measurable.  ``cavity`` is the concentration-driven problem
with no body force and no exact solution: flow is excited purely through the
concentration coupling ``f1(C) = (10 C, 10 C)``, with a Dirichlet profile on
the top edge and zero on the rest of the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .assembly import PhysicalParams, ProblemData
from .errors import ConfigurationError
from .verification import ExactSolution, manufactured_data

# The top-edge concentration profile.  The quoted form carries an extra
# y (y - 1) factor that annihilates the whole datum on the top edge y = 1
# (and with zero forcing everywhere the entire solution collapses to zero),
# so the default keeps only the in-edge profile; --cavity-top-expr restores
# any alternative, including the degenerate one.
CAVITY_TOP_DEFAULT = "20*x*(x - 1)"

_EXPR_NAMES = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "sqrt": np.sqrt, "log": np.log, "abs": np.abs, "pi": np.pi,
}


@dataclass(frozen=True)
class Case:
    """A named experiment: coefficients, data, and (optionally) the truth."""

    name: str
    params: PhysicalParams
    data: ProblemData
    exact: Optional[ExactSolution] = None


def manufactured_case(gamma: float = 10.0, beta: float = 10.0,
                      delta: float = 50.0) -> Case:
    params = PhysicalParams(mu=1.0, rho=1.0, beta=beta, alpha=1.0,
                            gamma=gamma, r0=1.0)
    exact = ExactSolution(delta=delta)
    return Case(name="manufactured", params=params,
                data=manufactured_data(params, exact), exact=exact)


def _compile_profile(expression: str):
    """Turn an ``x``/``y`` expression string into a vectorized evaluator."""
    try:
        code = compile(expression, "<top-profile>", "eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse top profile {expression!r}: {exc}") from exc

    def profile(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        scope = dict(_EXPR_NAMES, x=x, y=y)
        values = eval(code, {"__builtins__": {}}, scope)
        return np.broadcast_to(np.asarray(values, dtype=float), x.shape).copy()

    # Fail fast on names the expression scope does not provide.
    try:
        profile(np.array([0.0, 0.5]), np.array([1.0, 1.0]))
    except Exception as exc:
        raise ConfigurationError(
            f"cannot evaluate top profile {expression!r}: {exc}") from exc
    return profile


def cavity_case(gamma: float = 10.0, beta: float = 20.0,
                top_expr: str = CAVITY_TOP_DEFAULT) -> Case:
    params = PhysicalParams(mu=1.0, rho=1.0, beta=beta, alpha=1.0,
                            gamma=gamma, r0=1.0)
    top = _compile_profile(top_expr)

    def f0(points: np.ndarray) -> np.ndarray:
        return np.zeros((points.shape[0], 2))

    def f1(c: np.ndarray) -> np.ndarray:
        return np.stack([10.0 * c, 10.0 * c], axis=1)

    def g(points: np.ndarray) -> np.ndarray:
        return np.zeros(points.shape[0])

    def concentration_boundary(points: np.ndarray) -> np.ndarray:
        x = points[:, 0]
        y = points[:, 1]
        on_top = np.abs(y - 1.0) <= 1e-12
        values = np.zeros(points.shape[0])
        if on_top.any():
            values[on_top] = top(x[on_top], y[on_top])
        return values

    data = ProblemData(f0=f0, f1=f1, g=g,
                       concentration_boundary=concentration_boundary,
                       f1_lipschitz=10.0 * np.sqrt(2.0))
    return Case(name="cavity", params=params, data=data, exact=None)
