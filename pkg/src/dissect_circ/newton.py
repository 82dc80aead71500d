"""Damped Newton kernel shared by the integrators and recovery solvers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoConvergence, SingularJacobian


@dataclass(frozen=True)
class NewtonConfig:
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_iter: int = 50
    damping: str = "line-search-halving"  # or "none"
    jacobian: str = "analytic"  # or "finite-difference"

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


DEFAULT_NEWTON = NewtonConfig()


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual_norm: float


def fd_jacobian(fun, x, base=None, rel_step=1e-7):
    """Central-difference Jacobian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x)) if base is None else np.asarray(base)
    jac = np.zeros((f0.size, x.size))
    for k in range(x.size):
        h = rel_step * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h)
    return jac


def newton_solve(residual, jacobian, guess, cfg: NewtonConfig | None = None) -> NewtonResult:
    """Solve residual(y) = 0 by damped Newton iteration.

    ``jacobian`` may be None, in which case central finite differences are
    used. Raises :class:`NoConvergence` or :class:`SingularJacobian`.
    """
    cfg = cfg or DEFAULT_NEWTON
    y = np.atleast_1d(np.asarray(guess, dtype=float)).copy()
    r = np.atleast_1d(np.asarray(residual(y), dtype=float))
    norm0 = float(np.linalg.norm(r))
    target = cfg.abs_tol + cfg.rel_tol * norm0
    norm = norm0
    if y.size == 0 or norm <= target:
        return NewtonResult(x=y, iterations=0, converged=True, residual_norm=norm)

    use_fd = jacobian is None or cfg.jacobian == "finite-difference"
    for it in range(1, cfg.max_iter + 1):
        jac = fd_jacobian(residual, y, base=r) if use_fd else np.atleast_2d(jacobian(y))
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            raise SingularJacobian(
                f"Newton Jacobian singular at iteration {it} (residual norm {norm:.3e})"
            ) from None
        if not np.all(np.isfinite(step)):
            raise SingularJacobian(f"Newton step non-finite at iteration {it}")

        if cfg.damping == "none":
            y = y + step
            r = np.atleast_1d(np.asarray(residual(y), dtype=float))
            norm = float(np.linalg.norm(r))
        else:
            alpha = 1.0
            accepted = False
            while alpha >= 2.0 ** -30:
                cand = y + alpha * step
                r_cand = np.atleast_1d(np.asarray(residual(cand), dtype=float))
                n_cand = float(np.linalg.norm(r_cand))
                if n_cand < norm or n_cand <= target:
                    y, r, norm = cand, r_cand, n_cand
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                raise NoConvergence(
                    f"line search stalled at iteration {it} (residual norm {norm:.3e})"
                )
        if norm <= target:
            return NewtonResult(x=y, iterations=it, converged=True, residual_norm=norm)

    raise NoConvergence(
        f"no convergence after {cfg.max_iter} iterations (residual norm {norm:.3e})"
    )
