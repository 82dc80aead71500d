"""Gaussian-process regression on (t, p) inputs with an RBF kernel.

Exact posterior mean/variance from a Cholesky factorization of the Gram
matrix, negative-log-likelihood hyperparameter fitting by seeded multistart
Nelder-Mead in log space. Inputs and outputs are standardized per dimension;
hyperparameters live in standardized units (lengthscales are per input
dimension). Everything is dense: datasets stay small by design.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize

NOISE_FLOOR = 1e-8  # standardized output units
BASE_JITTER = 1e-10
LOG_BOX = (-6.0, 3.0)  # natural-log search box for all hyperparameters


class AllStartsFailed(RuntimeError):
    """Every optimizer start produced a non-finite likelihood."""


@dataclass(frozen=True)
class Observation:
    """One training point: input (t, then parameter coordinates) and value."""

    input: np.ndarray
    value: float


@dataclass(frozen=True)
class Hyperparameters:
    """Noise level, signal scale and per-dimension length scales."""

    noise: float
    signal: float
    lengthscales: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", np.atleast_1d(np.asarray(self.lengthscales, dtype=float)))
        if self.noise < 0 or self.signal <= 0 or np.any(self.lengthscales <= 0):
            raise ValueError("need noise >= 0, signal > 0, lengthscales > 0")


@dataclass(frozen=True)
class Standardization:
    in_shift: np.ndarray
    in_scale: np.ndarray
    out_shift: float
    out_scale: float

    def apply_in(self, x: np.ndarray) -> np.ndarray:
        return (x - self.in_shift) / self.in_scale

    @staticmethod
    def identity(dim: int) -> "Standardization":
        return Standardization(np.zeros(dim), np.ones(dim), 0.0, 1.0)

    @staticmethod
    def from_data(x: np.ndarray, y: np.ndarray) -> "Standardization":
        in_shift = x.mean(axis=0)
        in_scale = x.std(axis=0)
        in_scale = np.where(in_scale > 0, in_scale, 1.0)
        out_scale = float(y.std())
        return Standardization(in_shift, in_scale, float(y.mean()), out_scale if out_scale > 0 else 1.0)


def kernel_eval(u, v, hyper: Hyperparameters) -> float:
    """RBF covariance sigma_k^2 * exp(-sum_d ((u_d - v_d) / l_d)^2)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if u.shape != v.shape:
        raise ValueError("kernel inputs must have equal dimension")
    z = (u - v) / hyper.lengthscales
    return hyper.signal ** 2 * math.exp(-float(z @ z))


def kernel_matrix(xa: np.ndarray, xb: np.ndarray, hyper: Hyperparameters) -> np.ndarray:
    da = xa / hyper.lengthscales
    db = xb / hyper.lengthscales
    sq = (
        np.sum(da * da, axis=1)[:, None]
        + np.sum(db * db, axis=1)[None, :]
        - 2.0 * da @ db.T
    )
    return hyper.signal ** 2 * np.exp(-np.maximum(sq, 0.0))


class GpModel:
    """Fitted GP: standardized observations plus a factorized Gram matrix."""

    def __init__(self, x: np.ndarray, y: np.ndarray, hyper: Hyperparameters,
                 standardization: Standardization, fallback: bool = False):
        self.x_raw = np.atleast_2d(np.asarray(x, dtype=float))
        self.y_raw = np.asarray(y, dtype=float).ravel()
        self.hyper = hyper
        self.standardization = standardization
        self.fallback = fallback
        self.x = standardization.apply_in(self.x_raw)
        self.y = (self.y_raw - standardization.out_shift) / standardization.out_scale
        self._factorize()

    @classmethod
    def build(cls, observations, hyper: Hyperparameters, standardize: bool = True) -> "GpModel":
        x, y = _as_arrays(observations)
        if standardize and y.size:
            std = Standardization.from_data(x, y)
        else:
            std = Standardization.identity(x.shape[1])
        return cls(x, y, hyper, std)

    def _factorize(self):
        n = self.x.shape[0]
        if n == 0:
            self._chol = None
            self._alpha = np.zeros(0)
            self.jitter = 0.0
            return
        gram = kernel_matrix(self.x, self.x, self.hyper)
        noise2 = max(self.hyper.noise, 0.0) ** 2
        jitter = BASE_JITTER * self.hyper.signal ** 2
        last_error = None
        for _ in range(7):
            try:
                self._chol = cho_factor(gram + (noise2 + jitter) * np.eye(n), lower=True)
                self.jitter = jitter
                break
            except LinAlgError as exc:  # pragma: no cover - needs degenerate data
                last_error = exc
                jitter *= 2.0
        else:  # pragma: no cover
            raise LinAlgError(f"Gram matrix not factorizable: {last_error}")
        self._alpha = cho_solve(self._chol, self.y)

    # -- prediction -------------------------------------------------------

    def posterior(self, query) -> tuple[float, float]:
        """Posterior mean and (clamped) variance at one input point."""
        mean, var, _ = self.posterior_detail(query)
        return mean, var

    def posterior_detail(self, query) -> tuple[float, float, float]:
        """(mean, clamped variance, negative excess removed by clamping)."""
        q = self.standardization.apply_in(np.atleast_1d(np.asarray(query, dtype=float)))
        s = self.standardization
        if self._chol is None:  # no observations: the prior
            return s.out_shift, self.hyper.signal ** 2 * s.out_scale ** 2, 0.0
        kvec = kernel_matrix(q[None, :], self.x, self.hyper).ravel()
        mean_std = float(kvec @ self._alpha)
        w = cho_solve(self._chol, kvec)
        var_std = float(self.hyper.signal ** 2 - kvec @ w)
        excess = min(var_std, 0.0)
        var_std = max(var_std, 0.0)
        return (
            mean_std * s.out_scale + s.out_shift,
            var_std * s.out_scale ** 2,
            -excess * s.out_scale ** 2,
        )

    def posterior_batch(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized posterior over rows of ``queries``."""
        q = self.standardization.apply_in(np.atleast_2d(np.asarray(queries, dtype=float)))
        kmat = kernel_matrix(q, self.x, self.hyper)  # m x n
        means = kmat @ self._alpha
        w = cho_solve(self._chol, kmat.T)  # n x m
        variances = self.hyper.signal ** 2 - np.sum(kmat.T * w, axis=0)
        variances = np.maximum(variances, 0.0)
        s = self.standardization
        return means * s.out_scale + s.out_shift, variances * s.out_scale ** 2

    # -- persistence ------------------------------------------------------

    def to_json(self) -> str:
        s = self.standardization
        scales = s.in_scale
        return json.dumps(
            {
                "inputs": self.x_raw.tolist(),
                "values": self.y_raw.tolist(),
                "standardization": {
                    "in_shift": s.in_shift.tolist(),
                    "in_scale": s.in_scale.tolist(),
                    "out_shift": s.out_shift,
                    "out_scale": s.out_scale,
                },
                # hyperparameters expressed in native input/output units
                "hyperparameters": {
                    "noise": self.hyper.noise * s.out_scale,
                    "signal": self.hyper.signal * s.out_scale,
                    "lengthscales": (self.hyper.lengthscales * scales).tolist(),
                },
                "fallback": self.fallback,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "GpModel":
        data = json.loads(text)
        s = data["standardization"]
        std = Standardization(
            np.asarray(s["in_shift"], dtype=float),
            np.asarray(s["in_scale"], dtype=float),
            float(s["out_shift"]),
            float(s["out_scale"]),
        )
        h = data["hyperparameters"]
        hyper = Hyperparameters(
            noise=float(h["noise"]) / std.out_scale,
            signal=float(h["signal"]) / std.out_scale,
            lengthscales=np.asarray(h["lengthscales"], dtype=float) / std.in_scale,
        )
        model = cls(
            np.asarray(data["inputs"], dtype=float),
            np.asarray(data["values"], dtype=float),
            hyper,
            std,
            fallback=bool(data.get("fallback", False)),
        )
        return model


def _as_arrays(observations):
    if isinstance(observations, tuple) and len(observations) == 2:
        x, y = observations
        return np.atleast_2d(np.asarray(x, dtype=float)), np.asarray(y, dtype=float).ravel()
    xs = [np.atleast_1d(np.asarray(o.input, dtype=float)) for o in observations]
    ys = [o.value for o in observations]
    return np.vstack(xs), np.asarray(ys, dtype=float)


def negative_log_likelihood(model: GpModel, hyper: Hyperparameters | None = None) -> float:
    """0.5 * (y^T K^-1 y + log det K + N log 2pi) for the model's data."""
    hyper = hyper or model.hyper
    y = model.y
    n = y.size
    gram = kernel_matrix(model.x, model.x, hyper)
    noise2 = max(hyper.noise, NOISE_FLOOR) ** 2
    try:
        chol = cho_factor(gram + (noise2 + BASE_JITTER * hyper.signal ** 2) * np.eye(n), lower=True)
    except LinAlgError:
        return float("inf")
    alpha = cho_solve(chol, y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    return 0.5 * (float(y @ alpha) + logdet + n * math.log(2.0 * math.pi))


def fit_hyperparameters(observations, seed: int = 0, n_starts: int = 8,
                        warm_start: Hyperparameters | None = None,
                        maxiter: int | None = None) -> GpModel:
    """Fit a GP by multistart Nelder-Mead on the negative log likelihood.

    Deterministic for a fixed seed. Degenerate data (constant outputs) yields
    a fallback model with ``fallback=True`` instead of an error.
    """
    x, y = _as_arrays(observations)
    n, dim = x.shape
    if n < 2:
        raise ValueError("need at least 2 observations to fit hyperparameters")

    if float(y.std()) == 0.0:
        hyper = Hyperparameters(noise=NOISE_FLOOR, signal=1.0, lengthscales=np.ones(dim))
        std = Standardization.from_data(x, y)
        return GpModel(x, y, hyper, std, fallback=True)

    std = Standardization.from_data(x, y)
    probe = GpModel(x, y, Hyperparameters(NOISE_FLOOR, 1.0, np.ones(dim)), std)

    def objective(theta):
        hyper = _theta_to_hyper(theta, dim)
        return negative_log_likelihood(probe, hyper)

    rng = np.random.default_rng(seed)
    starts = [rng.uniform(LOG_BOX[0], LOG_BOX[1], size=2 + dim) for _ in range(n_starts)]
    if warm_start is not None:
        starts.append(_hyper_to_theta(warm_start))
    best_theta, best_val = None, float("inf")
    options = {"xatol": 1e-6, "fatol": 1e-8}
    if maxiter is not None:
        options["maxiter"] = maxiter
    for theta0 in starts:
        res = minimize(objective, theta0, method="Nelder-Mead", options=options)
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val, best_theta = float(res.fun), res.x
    if best_theta is None:
        raise AllStartsFailed("no optimizer start produced a finite likelihood")
    return GpModel(x, y, _theta_to_hyper(best_theta, dim), std)


def _theta_to_hyper(theta, dim) -> Hyperparameters:
    return Hyperparameters(
        noise=max(math.exp(theta[0]), NOISE_FLOOR),
        signal=math.exp(theta[1]),
        lengthscales=np.exp(np.asarray(theta[2 : 2 + dim], dtype=float)),
    )


def _hyper_to_theta(hyper: Hyperparameters) -> np.ndarray:
    return np.concatenate(
        [
            [math.log(max(hyper.noise, NOISE_FLOOR)), math.log(hyper.signal)],
            np.log(hyper.lengthscales),
        ]
    )
