"""Reconstruction of algebraic variables from known differential variables.

Index 1 solves the constraint block directly; index 2 first solves the
hidden constraint for the remaining differential coordinate, estimates its
time derivative with a backward difference over a small increment, then
jointly solves the two leftover algebraic systems. Consistency errors are
the 2-norm of these stacked residuals evaluated at candidate values: at
reconstructed values they sit at the nonlinear-solver floor no matter how
inaccurate the supplied differential variables are.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dissect import DecouplingL1, DecouplingL2
from .newton import DEFAULT_NEWTON, NewtonConfig


@dataclass
class RecoveredState:
    """Recovered algebraic parts plus the assembled full state."""

    differential: np.ndarray
    parts: dict[str, np.ndarray]
    state: np.ndarray
    dt_back: float | None = None
    newton_stats: dict = field(default_factory=dict)


@dataclass
class ConsistencyReport:
    """Consistency errors of learned (e_hat) vs reconstructed (e_bar) values."""

    times: np.ndarray
    e_hat: np.ndarray
    e_bar: np.ndarray

    def max_hat(self) -> float:
        return float(np.max(self.e_hat)) if self.e_hat.size else 0.0

    def max_bar(self) -> float:
        return float(np.max(self.e_bar)) if self.e_bar.size else 0.0


def recover_index1(dec: DecouplingL1, xt, t, p=None, cfg: NewtonConfig | None = None,
                   guess=None):
    """Solve the index-1 constraint block for the algebraic coordinates."""
    return dec.solve_algebraic(xt, t, p=p, cfg=cfg or DEFAULT_NEWTON, guess=guess)


def recover_index2(dec: DecouplingL2, xt_q_now, xt_q_next, t, dt, p=None,
                   cfg: NewtonConfig | None = None, guess=None, dxt_p=None):
    """Recover (xt_p, xb_p, xb_q) from the level-2 differential variables.

    The derivative of xt_p is approximated by the backward difference over
    ``dt`` using the supplied samples of xt_q at t and t + dt; pass ``dxt_p``
    to override it (analytic-derivative oracle).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or DEFAULT_NEWTON
    bound = dec.l1._bound(p)
    xt_p_now = dec.solve_xtp(xt_q_now, t, cfg=cfg, bound=bound)
    if dxt_p is None:
        xt_p_next = dec.solve_xtp(xt_q_next, t + dt, cfg=cfg, guess=xt_p_now, bound=bound)
        dxt_p = (xt_p_next - xt_p_now) / dt
    xb_p, xb_q = dec.solve_joint(xt_q_now, xt_p_now, dxt_p, t, cfg=cfg, guess=guess, bound=bound)
    return xt_p_now, xb_p, xb_q


def recover_full_state(dec, differential, t, p=None, cfg=None, dt=1e-8,
                       differential_next=None, dxt_p=None) -> RecoveredState:
    """Convenience wrapper assembling the complete state in original coordinates."""
    cfg = cfg or DEFAULT_NEWTON
    xt = np.atleast_1d(np.asarray(differential, dtype=float))
    if isinstance(dec, DecouplingL2):
        xt_next = xt if differential_next is None else np.atleast_1d(
            np.asarray(differential_next, dtype=float)
        )
        xt_p, xb_p, xb_q = recover_index2(dec, xt, xt_next, t, dt, p=p, cfg=cfg, dxt_p=dxt_p)
        state = dec.recombine(xt, xt_p, xb_p, xb_q)
        return RecoveredState(
            differential=xt,
            parts={"xt_p": xt_p, "xb_p": xb_p, "xb_q": xb_q},
            state=state,
            dt_back=dt,
        )
    xb = recover_index1(dec, xt, t, p=p, cfg=cfg)
    return RecoveredState(differential=xt, parts={"xb": xb}, state=dec.recombine(xt, xb))


def recombine(dec, parts):
    """Exact linear recombination of coordinate parts to the original state."""
    if isinstance(dec, DecouplingL2):
        xt_q, xt_p, xb_p, xb_q = parts
        return dec.recombine(xt_q, xt_p, xb_p, xb_q)
    xt, xb = parts
    return dec.recombine(xt, xb)


def stacked_algebraic_residual(dec, parts, t, p=None, dxt_p=None):
    """All pointwise algebraic residuals stacked into one vector.

    For index 1 this is the constraint block; for index 2 the hidden
    constraint, the first split constraint and the level-2 algebraic block
    (the function g of the learned/reconstructed variables).
    """
    if isinstance(dec, DecouplingL2):
        xt_q, xt_p, xb_p, xb_q = parts
        if dxt_p is None:
            raise ValueError("index-2 consistency needs the xt_p derivative (dxt_p)")
        bound = dec.l1._bound(p)
        r1 = dec.residual_xtp(xt_p, xt_q, t, bound=bound)
        r23 = dec.residual_joint(xb_p, xb_q, xt_q, xt_p, dxt_p, t, bound=bound)
        return np.concatenate([np.atleast_1d(r1), np.atleast_1d(r23)])
    xt, xb = parts
    return np.atleast_1d(dec.residual_algebraic(xt, xb, t, p=p))


def consistency_error(dec, candidate, t, p=None, candidate_next=None, dt=1e-8,
                      dxt_p=None) -> float:
    """2-norm of the stacked algebraic residuals at a candidate solution.

    ``candidate`` is a full state vector or a tuple of coordinate parts. In
    the index-2 case the xt_p derivative is backward-differenced from
    ``candidate_next`` (the candidate at t + dt) unless ``dxt_p`` is given.
    """
    parts = _as_parts(dec, candidate)
    if isinstance(dec, DecouplingL2) and dxt_p is None:
        if candidate_next is None:
            raise ValueError("supply candidate_next or dxt_p for index-2 consistency")
        parts_next = _as_parts(dec, candidate_next)
        dxt_p = (parts_next[1] - parts[1]) / dt
    return float(np.linalg.norm(stacked_algebraic_residual(dec, parts, t, p=p, dxt_p=dxt_p)))


def _as_parts(dec, candidate):
    if isinstance(candidate, (tuple, list)):
        return tuple(np.atleast_1d(np.asarray(c, dtype=float)) for c in candidate)
    x = np.asarray(candidate, dtype=float)
    return dec.split(x)


def ae_only_parameters(dec, space=None, probes=None, seed: int = 0, n_probes: int = 5,
                       rtol: float = 1e-12) -> list[str]:
    """Design parameters that never enter the reduced ODE.

    A parameter is AE-only when sweeping it across its range leaves the
    reduced-ODE residual unchanged (relative to the residual scale) at every
    probe; such parameters need algebraic reconstruction only, never a new
    transient simulation.
    """
    system = dec.l1.system if isinstance(dec, DecouplingL2) else dec.system
    space = space if space is not None else system.graph.parameter_space
    if not space:
        return []
    rng = np.random.default_rng(seed)
    n_diff = dec.dims[0] if isinstance(dec, DecouplingL2) else dec.n_differential

    if probes is None:
        probes = [
            (0.3 * rng.standard_normal(n_diff), rng.standard_normal(n_diff),
             float(rng.uniform(0.0, 1e-2)))
            for _ in range(n_probes)
        ]

    mid = np.array([(q.lower + q.upper) / 2.0 for q in space])

    def residual_at(pvec, probe):
        y, dy, t = probe
        if isinstance(dec, DecouplingL2):
            return dec.reduced_ode_residual(dy, y, t, p=pvec)
        return dec.reduced_ode_residual(dy, y, t, p=pvec)

    names = []
    for j, q in enumerate(space):
        settings = []
        for val in (q.lower, mid[j], q.upper):
            pvec = mid.copy()
            pvec[j] = val
            settings.append(pvec)
        max_dev = 0.0
        scale = 0.0
        for probe in probes:
            base = residual_at(settings[1], probe)
            scale = max(scale, float(np.linalg.norm(base)))
            for pvec in (settings[0], settings[2]):
                dev = float(np.linalg.norm(residual_at(pvec, probe) - base))
                max_dev = max(max_dev, dev)
        if max_dev <= rtol * max(scale, 1e-300):
            names.append(q.name)
    return names
