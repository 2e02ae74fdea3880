"""Exact solution, manufactured data, error norms and convergence rates.

The reference fields live on the unit square: a divergence-free velocity is
built as the curl of the Gaussian stream function

    psi(x, y) = exp(-delta ((x - 1/2)^2 + (y - 1/2)^2)),
    u = curl psi = (d psi / dy, -d psi / dx),

the pressure ``x (x - 2/3) y (y - 2/3)`` integrates to zero, and the
concentration ``x^2 (x-1)^2 y^2 (y-1)^2 psi`` vanishes on the boundary.  The
forcing terms ``f0`` and ``g`` are recovered pointwise by substituting these
fields into the two equations; every derivative is closed form and unit
tests check them against finite differences rather than trusting the hand
algebra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import (DiscreteState, PhysicalParams, ProblemData,
                       element_batches, scalar_at, velocity_at)
from .fem_core import DofMap

NORM_DEGREE = 10


def _bump(t: np.ndarray) -> np.ndarray:
    return t**2 * (t - 1.0) ** 2


def _bump_d(t: np.ndarray) -> np.ndarray:
    return 2.0 * t * (t - 1.0) * (2.0 * t - 1.0)


def _bump_dd(t: np.ndarray) -> np.ndarray:
    return 12.0 * t**2 - 12.0 * t + 2.0


@dataclass(frozen=True)
class ExactSolution:
    """Closed-form reference fields and their derivatives."""

    delta: float = 50.0

    def _psi_parts(self, points: np.ndarray):
        x = np.asarray(points, dtype=float)
        dx = x[:, 0] - 0.5
        dy = x[:, 1] - 0.5
        return dx, dy, np.exp(-self.delta * (dx**2 + dy**2))

    def psi(self, points: np.ndarray) -> np.ndarray:
        return self._psi_parts(points)[2]

    def u(self, points: np.ndarray) -> np.ndarray:
        dx, dy, psi = self._psi_parts(points)
        return np.stack([-2.0 * self.delta * dy * psi,
                         2.0 * self.delta * dx * psi], axis=1)

    def grad_u(self, points: np.ndarray) -> np.ndarray:
        """Entries ``[n, i, j] = d u_i / d x_j``; trace is zero by construction."""
        dx, dy, psi = self._psi_parts(points)
        d = self.delta
        psi_xx = (4.0 * d**2 * dx**2 - 2.0 * d) * psi
        psi_yy = (4.0 * d**2 * dy**2 - 2.0 * d) * psi
        psi_xy = 4.0 * d**2 * dx * dy * psi
        out = np.empty((points.shape[0], 2, 2))
        out[:, 0, 0] = psi_xy
        out[:, 0, 1] = psi_yy
        out[:, 1, 0] = -psi_xx
        out[:, 1, 1] = -psi_xy
        return out

    def p(self, points: np.ndarray) -> np.ndarray:
        x = points[:, 0]
        y = points[:, 1]
        return x * (x - 2.0 / 3.0) * y * (y - 2.0 / 3.0)

    def grad_p(self, points: np.ndarray) -> np.ndarray:
        x = points[:, 0]
        y = points[:, 1]
        return np.stack([(2.0 * x - 2.0 / 3.0) * y * (y - 2.0 / 3.0),
                         x * (x - 2.0 / 3.0) * (2.0 * y - 2.0 / 3.0)], axis=1)

    def c(self, points: np.ndarray) -> np.ndarray:
        dx, dy, psi = self._psi_parts(points)
        return _bump(points[:, 0]) * _bump(points[:, 1]) * psi

    def grad_c(self, points: np.ndarray) -> np.ndarray:
        x = points[:, 0]
        y = points[:, 1]
        dx, dy, psi = self._psi_parts(points)
        psi_x = -2.0 * self.delta * dx * psi
        psi_y = -2.0 * self.delta * dy * psi
        bx, by = _bump(x), _bump(y)
        return np.stack([(_bump_d(x) * psi + bx * psi_x) * by,
                         bx * (_bump_d(y) * psi + by * psi_y)], axis=1)

    def laplace_c(self, points: np.ndarray) -> np.ndarray:
        x = points[:, 0]
        y = points[:, 1]
        dx, dy, psi = self._psi_parts(points)
        d = self.delta
        psi_x = -2.0 * d * dx * psi
        psi_y = -2.0 * d * dy * psi
        psi_xx = (4.0 * d**2 * dx**2 - 2.0 * d) * psi
        psi_yy = (4.0 * d**2 * dy**2 - 2.0 * d) * psi
        bx, by = _bump(x), _bump(y)
        c_xx = (_bump_dd(x) * psi + 2.0 * _bump_d(x) * psi_x + bx * psi_xx) * by
        c_yy = bx * (_bump_dd(y) * psi + 2.0 * _bump_d(y) * psi_y + by * psi_yy)
        return c_xx + c_yy


def default_f1(c: np.ndarray) -> np.ndarray:
    return np.stack([2.0 + c, 2.0 + 2.0 * np.sin(c)], axis=1)


def manufactured_data(params: PhysicalParams, exact: ExactSolution,
                      f1=default_f1, f1_lipschitz: float = np.sqrt(5.0)) -> ProblemData:
    """Forcing terms that make ``exact`` solve the system under ``params``."""

    def f0(points: np.ndarray) -> np.ndarray:
        u = exact.u(points)
        k_inv = params.k_inv_at(points)
        speed = np.sqrt((u**2).sum(axis=1))
        darcy = (params.mu / params.rho) * np.einsum("nij,nj->ni", k_inv, u)
        drag = (params.beta / params.rho) * speed[:, None] * u
        return darcy + drag + exact.grad_p(points) - f1(exact.c(points))

    def g(points: np.ndarray) -> np.ndarray:
        conv = (exact.u(points) * exact.grad_c(points)).sum(axis=1)
        return -params.alpha * exact.laplace_c(points) + conv + params.r0 * exact.c(points)

    return ProblemData(f0=f0, f1=f1, g=g, concentration_boundary=exact.c,
                       f1_lipschitz=f1_lipschitz)


@dataclass(frozen=True)
class ErrorReport:
    """Error norms of one discrete state against the exact solution."""

    err_u_L3: float
    err_p_W13_2: float
    err_c_H1: float
    err_rel: float          # (sum of error norms) / (sum of exact norms)
    n_dof: int


def _norm_triple(mesh, u_fn, grad_p_fn, c_fn, grad_c_fn) -> tuple[float, float, float]:
    """(``L^3`` of a vector field, ``L^{3/2}`` of a gradient, full ``H^1``)."""
    acc_u = acc_p = acc_c = 0.0
    for batch in element_batches(mesh, NORM_DEGREE):
        pts = batch.points.reshape(-1, 2)
        t, nq = batch.wdet.shape
        u = u_fn(batch, pts).reshape(t, nq, 2)
        gp = grad_p_fn(batch, pts).reshape(t, nq, 2)
        c = c_fn(batch, pts).reshape(t, nq)
        gc = grad_c_fn(batch, pts).reshape(t, nq, 2)
        acc_u += float((batch.wdet * np.sqrt((u**2).sum(axis=2)) ** 3).sum())
        acc_p += float((batch.wdet * np.sqrt((gp**2).sum(axis=2)) ** 1.5).sum())
        acc_c += float((batch.wdet * (c**2 + (gc**2).sum(axis=2))).sum())
    return acc_u ** (1.0 / 3.0), acc_p ** (2.0 / 3.0), float(np.sqrt(acc_c))


def _discrete_evaluators(dofmap: DofMap, state: DiscreteState, mesh):
    state.check_on(dofmap)
    u_coef = dofmap.velocity_element_coeffs(state.u)
    p_coef = dofmap.scalar_element_coeffs(state.p)
    c_coef = dofmap.scalar_element_coeffs(state.c)

    def u_h(batch, pts):
        return velocity_at(batch, u_coef[batch.elements])

    def grad_p_h(batch, pts):
        grads = np.einsum("tk,tkd->td", p_coef[batch.elements], batch.p1_grads)
        return np.broadcast_to(grads[:, None, :], (len(batch.elements),
                                                   batch.wdet.shape[1], 2))

    def c_h(batch, pts):
        return scalar_at(batch, c_coef[batch.elements])

    def grad_c_h(batch, pts):
        grads = np.einsum("tk,tkd->td", c_coef[batch.elements], batch.p1_grads)
        return np.broadcast_to(grads[:, None, :], (len(batch.elements),
                                                   batch.wdet.shape[1], 2))

    return u_h, grad_p_h, c_h, grad_c_h


def exact_norm_total(mesh, exact: ExactSolution) -> tuple[float, float, float]:
    """Norm triple of the exact fields; compute once per run and reuse so the
    relative-error denominator stays fixed across levels."""
    return _norm_triple(mesh,
                        lambda b, pts: exact.u(pts),
                        lambda b, pts: exact.grad_p(pts),
                        lambda b, pts: exact.c(pts),
                        lambda b, pts: exact.grad_c(pts))


def discrete_norm_total(mesh, dofmap: DofMap, state: DiscreteState) -> float:
    """Denominator of the indicator-relative error: sum of the discrete norms."""
    u_h, grad_p_h, c_h, grad_c_h = _discrete_evaluators(dofmap, state, mesh)
    return float(sum(_norm_triple(mesh, u_h, grad_p_h, c_h, grad_c_h)))


def error_norms(mesh, dofmap: DofMap, state: DiscreteState, exact: ExactSolution,
                exact_totals: tuple[float, float, float] | None = None) -> ErrorReport:
    """Degree-10 quadrature norms of (exact - discrete) per field."""
    u_h, grad_p_h, c_h, grad_c_h = _discrete_evaluators(dofmap, state, mesh)
    e_u, e_p, e_c = _norm_triple(
        mesh,
        lambda b, pts: exact.u(pts) - u_h(b, pts).reshape(-1, 2),
        lambda b, pts: exact.grad_p(pts) - grad_p_h(b, pts).reshape(-1, 2),
        lambda b, pts: exact.c(pts) - c_h(b, pts).reshape(-1),
        lambda b, pts: exact.grad_c(pts) - grad_c_h(b, pts).reshape(-1, 2),
    )
    if exact_totals is None:
        exact_totals = exact_norm_total(mesh, exact)
    n_dof = dofmap.n_velocity + dofmap.n_pressure + dofmap.n_concentration
    return ErrorReport(err_u_L3=e_u, err_p_W13_2=e_p, err_c_H1=e_c,
                       err_rel=(e_u + e_p + e_c) / sum(exact_totals), n_dof=n_dof)


def effectivity_index(eta_l: float, eta_d: float, report: ErrorReport) -> float:
    """(eta_L + eta_D) over the summed true error norms."""
    return (eta_l + eta_d) / (report.err_u_L3 + report.err_p_W13_2 + report.err_c_H1)


def rate_table(dofs, errors) -> list[float]:
    """Consecutive log-log slopes of an error quantity against total DOF."""
    dofs = np.asarray(dofs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if dofs.shape != errors.shape or dofs.ndim != 1:
        raise ValueError("dofs and errors must be 1-d arrays of equal length")
    return [float((np.log10(errors[i + 1]) - np.log10(errors[i]))
                  / (np.log10(dofs[i + 1]) - np.log10(dofs[i])))
            for i in range(len(dofs) - 1)]
