"""Implicit time integration of the full DAE and of the reduced ODE.

Fixed-step implicit Euler is the default (trapezoidal optional); both share
the damped Newton kernel. Reduced-ODE integration closes the algebraic
equations at every step, estimating the hidden-variable derivative with the
backward difference over one step so the discrete systems match the full-DAE
Euler equations exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dissect import DecouplingL1, DecouplingL2
from .errors import NoConvergence
from .newton import DEFAULT_NEWTON, NewtonConfig, NewtonResult, fd_jacobian, newton_solve

__all__ = [
    "NewtonConfig",
    "NewtonResult",
    "newton_solve",
    "Trajectory",
    "consistent_initial",
    "integrate_dae",
    "integrate_reduced_ode",
    "trajectory_to_csv",
    "trajectory_from_csv",
]


@dataclass(frozen=True)
class Trajectory:
    """Time grid plus state samples; immutable once returned."""

    times: np.ndarray
    states: np.ndarray  # rows = time points
    names: tuple[str, ...]
    parameters: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.states[:, self.names.index(name)]

    def at_time(self, t: float) -> np.ndarray:
        """State at a grid time (linear interpolation between grid points)."""
        times = self.times
        if t <= times[0]:
            return self.states[0]
        if t >= times[-1]:
            return self.states[-1]
        k = int(np.searchsorted(times, t))
        if times[k] == t:
            return self.states[k]
        w = (t - times[k - 1]) / (times[k] - times[k - 1])
        return (1.0 - w) * self.states[k - 1] + w * self.states[k]


def consistent_initial(obj, guess, t0: float, p=None, cfg: NewtonConfig | None = None,
                       dt_back: float | None = None):
    """Project a guess onto the constraint manifold at time t0.

    The differential coordinates of the guess are kept; the algebraic ones
    are solved from the decoupled constraint systems (including the hidden
    constraints in the index-2 case). Accepts a DaeSystem or a decoupling.
    """
    cfg = cfg or DEFAULT_NEWTON
    guess = np.asarray(guess, dtype=float)
    if isinstance(obj, DecouplingL2):
        return _consistent_l2(obj, guess, t0, p, cfg, dt_back)
    if isinstance(obj, DecouplingL1):
        xt, xb_guess = obj.split(guess)
        xb = obj.solve_algebraic(xt, t0, p=p, cfg=cfg, guess=xb_guess)
        return obj.recombine(xt, xb)
    # plain system: build the decoupling matching its index
    from .dissect import decouple_level1, decouple_level2
    from .errors import DecouplingError

    l1 = decouple_level1(obj, p=p)
    try:
        l2 = decouple_level2(l1, p=p)
    except DecouplingError:
        return consistent_initial(l1, guess, t0, p=p, cfg=cfg)
    return _consistent_l2(l2, guess, t0, p, cfg, dt_back)


def _consistent_l2(dec: DecouplingL2, guess, t0, p, cfg, dt_back):
    bound = dec.l1._bound(p)
    dt = 1e-8 if dt_back is None else dt_back
    xt_q, xt_p_guess, xb_p_guess, xb_q_guess = dec.split(guess)
    xt_p = dec.solve_xtp(xt_q, t0, cfg=cfg, guess=xt_p_guess, bound=bound)
    xt_p_next = dec.solve_xtp(xt_q, t0 + dt, cfg=cfg, guess=xt_p, bound=bound)
    dxt_p = (xt_p_next - xt_p) / dt
    xb_p, xb_q = dec.solve_joint(
        xt_q, xt_p, dxt_p, t0, cfg=cfg,
        guess=np.concatenate([xb_p_guess, xb_q_guess]), bound=bound,
    )
    return dec.recombine(xt_q, xt_p, xb_p, xb_q)


def integrate_dae(system, x0, grid, p=None, cfg: NewtonConfig | None = None,
                  method: str = "implicit-euler") -> Trajectory:
    """Integrate M(x) x' + K(x) x + f(t) = 0 on a fixed grid.

    The initial state must be consistent at grid[0] (see
    :func:`consistent_initial`). On a Newton failure the partial trajectory
    is attached to the raised :class:`NoConvergence`.
    """
    cfg = cfg or DEFAULT_NEWTON
    if method not in ("implicit-euler", "trapezoidal"):
        raise ValueError(f"unknown method '{method}'")
    bound = system.bind(p)
    grid = np.asarray(grid, dtype=float)
    n = system.layout.n
    states = np.empty((grid.size, n))
    states[0] = np.asarray(x0, dtype=float)
    total_newton = 0
    max_newton = 0
    use_fd = cfg.jacobian == "finite-difference"

    for k in range(1, grid.size):
        t_old, t_new = grid[k - 1], grid[k]
        h = t_new - t_old
        x_old = states[k - 1]
        if method == "implicit-euler":
            def residual(x, t_new=t_new, x_old=x_old, h=h):
                return bound.mass(x) @ ((x - x_old) / h) + bound.stiffness(x) @ x + bound.source(t_new)

            def jacobian(x, t_new=t_new, x_old=x_old, h=h):
                v = (x - x_old) / h
                return (
                    bound.mass(x) / h
                    + bound.mass_jacobian_term(x, v)
                    + bound.stiffness_jacobian_term(x)
                )
        else:
            g_old = 0.5 * (bound.stiffness(x_old) @ x_old + bound.source(t_old))

            def residual(x, t_new=t_new, x_old=x_old, h=h, g_old=g_old):
                return (
                    bound.mass(x) @ ((x - x_old) / h)
                    + 0.5 * (bound.stiffness(x) @ x + bound.source(t_new))
                    + g_old
                )

            def jacobian(x, t_new=t_new, x_old=x_old, h=h):
                v = (x - x_old) / h
                return (
                    bound.mass(x) / h
                    + bound.mass_jacobian_term(x, v)
                    + 0.5 * bound.stiffness_jacobian_term(x)
                )

        try:
            result = newton_solve(residual, None if use_fd else jacobian, x_old, cfg)
        except NoConvergence as exc:
            partial = Trajectory(
                times=grid[:k],
                states=states[:k].copy(),
                names=system.layout.names,
                parameters=_param_vector(system, p),
                metadata={"method": method, "failed_at_step": k},
            )
            raise NoConvergence(f"step {k} (t={t_new:.6g}): {exc}", partial=partial) from exc
        states[k] = result.x
        total_newton += result.iterations
        max_newton = max(max_newton, result.iterations)

    return Trajectory(
        times=grid.copy(),
        states=states,
        names=system.layout.names,
        parameters=_param_vector(system, p),
        metadata={
            "method": method,
            "step": float(grid[1] - grid[0]) if grid.size > 1 else 0.0,
            "newton_total": total_newton,
            "newton_max": max_newton,
        },
    )


def _param_vector(system, p):
    graph = getattr(system, "graph", None)
    if graph is None:
        return None
    return graph.parameter_vector(p)


def integrate_reduced_ode(dec, y0, grid, p=None, cfg: NewtonConfig | None = None) -> Trajectory:
    """Implicit-Euler integration of the reduced ODE of a decoupling.

    For level 1 the state is xt with the constraint block solved per step;
    for level 2 it is xt_q, with xt_p solved from the hidden constraint, its
    derivative taken as a backward difference over the step, and (xb_p, xb_q)
    solved jointly. Outer Newton uses finite-difference Jacobians since each
    residual evaluation contains inner solves.
    """
    cfg = cfg or DEFAULT_NEWTON
    bound = dec.l1._bound(p) if isinstance(dec, DecouplingL2) else dec._bound(p)
    grid = np.asarray(grid, dtype=float)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    states = np.empty((grid.size, y0.size))
    states[0] = y0
    total_newton = 0

    if isinstance(dec, DecouplingL2):
        names = dec.names_xt_q
        xt_p_prev = dec.solve_xtp(y0, grid[0], cfg=cfg, bound=bound)
        joint_guess = None
        for k in range(1, grid.size):
            t_new = grid[k]
            h = t_new - grid[k - 1]
            y_old = states[k - 1]
            xt_p_new = dec.solve_xtp(y_old, t_new, cfg=cfg, guess=xt_p_prev, bound=bound)
            dxt_p = (xt_p_new - xt_p_prev) / h
            carry = {"joint": joint_guess}

            def residual(y, t_new=t_new, y_old=y_old, h=h, xt_p_new=xt_p_new, dxt_p=dxt_p,
                         carry=carry):
                xb_p, xb_q = dec.solve_joint(
                    y, xt_p_new, dxt_p, t_new, cfg=cfg, guess=carry["joint"], bound=bound
                )
                carry["joint"] = np.concatenate([xb_p, xb_q])
                return dec.residual_ode(
                    (y - y_old) / h, y, xt_p_new, dxt_p, xb_p, xb_q, t_new, bound=bound
                )

            result = newton_solve(residual, None, y_old, cfg)
            states[k] = result.x
            total_newton += result.iterations
            xt_p_prev = xt_p_new
            joint_guess = carry["joint"]
    else:
        names = dec.differential_names
        xb_guess = None
        for k in range(1, grid.size):
            t_new = grid[k]
            h = t_new - grid[k - 1]
            y_old = states[k - 1]
            carry = {"xb": xb_guess}

            def residual(y, t_new=t_new, y_old=y_old, h=h, carry=carry):
                xb = dec.solve_algebraic(y, t_new, cfg=cfg, guess=carry["xb"], bound=bound)
                carry["xb"] = xb
                return dec.residual_differential((y - y_old) / h, y, xb, t_new, bound=bound)

            result = newton_solve(residual, None, y_old, cfg)
            states[k] = result.x
            total_newton += result.iterations
            xb_guess = carry["xb"]

    system = dec.l1.system if isinstance(dec, DecouplingL2) else dec.system
    return Trajectory(
        times=grid.copy(),
        states=states,
        names=tuple(names),
        parameters=_param_vector(system, p),
        metadata={"method": "implicit-euler-reduced", "newton_total": total_newton},
    )


# ---------------------------------------------------------------------------
# CSV round-trip (17 significant digits, RFC-4180-style)


def trajectory_to_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", *traj.names])
    for t, row in zip(traj.times, traj.states):
        writer.writerow([f"{t:.17g}", *(f"{v:.17g}" for v in row)])
    return buf.getvalue()


def trajectory_from_csv(text: str) -> Trajectory:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    rows = [list(map(float, row)) for row in reader if row]
    data = np.asarray(rows)
    return Trajectory(times=data[:, 0], states=data[:, 1:], names=tuple(header[1:]))
