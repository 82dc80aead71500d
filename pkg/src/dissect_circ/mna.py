"""Assembly of the circuit DAE in standard form M(x,p) x' + K(x,p) x + f(t,p) = 0.

State layout is [node potentials, inductor-branch currents, voltage-source
currents]. The mass matrix is blkdiag(A_C C A_C^T, L(i_L), 0); the stiffness
matrix stamps branch conductance factors so that K(x) x reproduces the device
currents exactly (for a diode the factor is its voltage-dependent conductance
g_D, for a linear resistor 1/R). Newton-ready analytic Jacobians of the full
residual are provided separately, since d(K(x)x)/dx differs from K(x) for
nonlinear devices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AssembleError
from .netlist import (
    BOLTZMANN,
    CELSIUS_OFFSET,
    ELEMENTARY_CHARGE,
    CircuitGraph,
    DeviceModel,
    IncidenceSet,
    build_incidence,
)

EXP_CLAMP = 80.0  # diode exponent guard; linear continuation beyond


@dataclass(frozen=True)
class StateLayout:
    """Names and index ranges of the state vector [phi, i_L, i_V]."""

    names: tuple[str, ...]
    phi: slice
    i_l: slice
    i_v: slice

    @property
    def n(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class DeviceEval:
    """Device function value and its exact Jacobian, with the overflow flag."""

    value: np.ndarray
    jacobian: np.ndarray
    clamped: bool = False


# ---------------------------------------------------------------------------
# device primitives


def _diode_conductance(v: float, i_s: float, inv_vt: float) -> tuple[float, float, bool]:
    """Conductance g_D(v) = Is*(exp(v/Vt) - 1) and dg/dv, exponent clamped."""
    z = v * inv_vt
    if z <= EXP_CLAMP:
        e = math.exp(z)
        return i_s * (e - 1.0), i_s * inv_vt * e, False
    e = math.exp(EXP_CLAMP)
    return i_s * (e * (1.0 + (z - EXP_CLAMP)) - 1.0), i_s * inv_vt * e, True


def _thermal_diode_conductance(v: float, i_s: float, a: float) -> tuple[float, float, bool]:
    """Conductance Is(T) * a * exp(a*v) with a = q/(kT), clamped like above."""
    z = a * v
    if z <= EXP_CLAMP:
        e = math.exp(z)
        return i_s * a * e, i_s * a * a * e, False
    e = math.exp(EXP_CLAMP)
    return i_s * a * e * (1.0 + (z - EXP_CLAMP)), i_s * a * a * e, True


def saturation_current(t_kelvin: float, i_s0: float, t0: float, eg: float) -> float:
    """Temperature-dependent reverse saturation current of the rectifier diodes."""
    vt0 = BOLTZMANN * t0 / ELEMENTARY_CHARGE
    return i_s0 * (t_kelvin / t0) ** 3 * math.exp((eg / vt0) * (1.0 - t0 / t_kelvin))


def diode_stamp(device: DeviceModel, v: float, parameters=None) -> tuple[float, float, bool]:
    """(g, dg/dv, clamped) for either diode flavour at branch voltage ``v``."""
    params = device.resolved(parameters)
    if "temp_c" in params:
        t_kelvin = params["temp_c"] + CELSIUS_OFFSET
        a = ELEMENTARY_CHARGE / (BOLTZMANN * t_kelvin)
        i_s = saturation_current(t_kelvin, params["is"], params["t0"], params["eg"])
        return _thermal_diode_conductance(v, i_s, a)
    return _diode_conductance(v, params["is"], 1.0 / params["vt"])


def multiport_inductance(device: DeviceModel, currents: np.ndarray, parameters=None) -> np.ndarray:
    """2x2 inductance matrix of a coupled 2-port at the given port currents."""
    p = device.resolved(parameters)
    la = _poly_inductance(p, currents[0])
    lb = _poly_inductance(p, currents[1])
    l12 = math.sqrt(p["coup2"] * la * lb)
    return np.array([[la, l12], [l12, p["ratio2"] * lb]])


def _poly_inductance(p, i: float) -> float:
    val = p["l0"] * (1.0 + p["a2"] * i * i + p["a4"] * i ** 4)
    return max(val, 0.1 * p["l0"])


def _poly_inductance_derivative(p, i: float) -> float:
    val = p["l0"] * (1.0 + p["a2"] * i * i + p["a4"] * i ** 4)
    if val <= 0.1 * p["l0"]:
        return 0.0
    return p["l0"] * (2.0 * p["a2"] * i + 4.0 * p["a4"] * i ** 3)


def multiport_inductance_gradient(device: DeviceModel, currents: np.ndarray, parameters=None):
    """dL/di1 and dL/di2 of the 2-port inductance matrix."""
    p = device.resolved(parameters)
    la = _poly_inductance(p, currents[0])
    lb = _poly_inductance(p, currents[1])
    dla = _poly_inductance_derivative(p, currents[0])
    dlb = _poly_inductance_derivative(p, currents[1])
    l12 = math.sqrt(p["coup2"] * la * lb)
    dl12_d1 = 0.5 * l12 * dla / la
    dl12_d2 = 0.5 * l12 * dlb / lb
    d1 = np.array([[dla, dl12_d1], [dl12_d1, 0.0]])
    d2 = np.array([[0.0, dl12_d2], [dl12_d2, p["ratio2"] * dlb]])
    return d1, d2


def eval_device(device: DeviceModel, arg, parameters=None) -> DeviceEval:
    """Evaluate a device's defining function and its exact Jacobian.

    Resistors return (current, di/dv); diodes return their conductance factor
    and its derivative; capacitors (charge, C); inductors (flux, L); the
    2-port returns (L(i) @ i, L(i)). ``parameters`` is a name->value mapping
    for bound design parameters.
    """
    kind = device.kind
    if kind == "inductive-multiport":
        i = np.asarray(arg, dtype=float).ravel()
        if i.size != 2:
            raise ValueError(f"device {device.name}: expected 2 port currents, got {i.size}")
        lmat = multiport_inductance(device, i, parameters)
        return DeviceEval(value=lmat @ i, jacobian=lmat)
    u = float(np.asarray(arg).ravel()[0]) if np.ndim(arg) else float(arg)
    params = device.resolved(parameters)
    if kind == "resistor":
        g = 1.0 / params["value"]
        return DeviceEval(value=np.array([g * u]), jacobian=np.array([[g]]))
    if kind == "diode":
        g, dg, clamped = diode_stamp(device, u, parameters)
        return DeviceEval(value=np.array([g]), jacobian=np.array([[dg]]), clamped=clamped)
    if kind == "capacitor":
        c = params["value"]
        return DeviceEval(value=np.array([c * u]), jacobian=np.array([[c]]))
    if kind == "inductor":
        ell = params["value"]
        return DeviceEval(value=np.array([ell * u]), jacobian=np.array([[ell]]))
    raise ValueError(f"device {device.name}: kind '{kind}' has no port function")


# ---------------------------------------------------------------------------
# system assembly


class DaeSystem:
    """Callable triple M(x,p), K(x,p), f(t,p) for a circuit graph.

    All evaluation methods are pure; a system may be shared across threads.
    ``p`` may be None (parameter-range midpoints), a mapping, or a vector in
    declaration order.
    """

    def __init__(self, graph: CircuitGraph, incidence: IncidenceSet | None = None):
        self.graph = graph
        self.incidence = incidence if incidence is not None else build_incidence(graph)
        self.layout = _make_layout(graph, self.incidence)

    # -- evaluation ---------------------------------------------------------

    def bind(self, p=None) -> "BoundSystem":
        return BoundSystem(self, self.graph.parameter_dict(p))

    def mass(self, x, p=None) -> np.ndarray:
        return self.bind(p).mass(np.asarray(x, dtype=float))

    def stiffness(self, x, p=None) -> np.ndarray:
        return self.bind(p).stiffness(np.asarray(x, dtype=float))

    def source(self, t, p=None) -> np.ndarray:
        return self.bind(p).source(float(t))

    def source_derivative(self, t, p=None) -> np.ndarray:
        return self.bind(p).source_derivative(float(t))

    def residual(self, xp, x, t, p=None) -> np.ndarray:
        return self.bind(p).residual(np.asarray(xp, dtype=float), np.asarray(x, dtype=float), float(t))

    def residual_jacobian_x(self, xp, x, t, p=None) -> np.ndarray:
        return self.bind(p).residual_jacobian_x(
            np.asarray(xp, dtype=float), np.asarray(x, dtype=float), float(t)
        )


def _make_layout(graph: CircuitGraph, inc: IncidenceSet) -> StateLayout:
    names = [f"v({n})" for n in inc.nodes]
    n_phi = len(names)
    names += [f"i({b})" for b in inc.branches_l]
    n_l = len(inc.branches_l)
    names += [f"i({b})" for b in inc.branches_v]
    n_v = len(inc.branches_v)
    return StateLayout(
        names=tuple(names),
        phi=slice(0, n_phi),
        i_l=slice(n_phi, n_phi + n_l),
        i_v=slice(n_phi + n_l, n_phi + n_l + n_v),
    )


class BoundSystem:
    """DaeSystem with the design parameters resolved, for fast evaluation."""

    def __init__(self, system: DaeSystem, parameters: dict[str, float]):
        self.system = system
        self.parameters = parameters
        graph, inc, layout = system.graph, system.incidence, system.layout
        self.layout = layout
        n, nphi = layout.n, layout.phi.stop
        branch_by_name = {b.name: b for b in graph.branches}

        # resistive class: constant part from linear resistors, per-diode columns
        k_rr = np.zeros((nphi, nphi))
        self._diodes = []
        for j, bname in enumerate(inc.branches_r):
            dev = branch_by_name[bname].device
            col = inc.a_r[:, j]
            if dev.kind == "resistor":
                g = 1.0 / dev.resolved(parameters)["value"]
                k_rr += g * np.outer(col, col)
            else:
                self._diodes.append((bname, col, dev))

        # capacitive block (linear capacitors only)
        c_vals = np.array(
            [branch_by_name[b].device.resolved(parameters)["value"] for b in inc.branches_c]
        )
        self._m_cc = inc.a_c @ np.diag(c_vals) @ inc.a_c.T if c_vals.size else np.zeros((nphi, nphi))

        # inductive block: constant diagonal for linear inductors, 2x2 blocks per multiport
        n_l = layout.i_l.stop - layout.i_l.start
        self._l_const = np.zeros((n_l, n_l))
        self._multiports = []
        port_index = {b: j for j, b in enumerate(inc.branches_l)}
        seen = set()
        for j, bname in enumerate(inc.branches_l):
            dev = branch_by_name[bname].device
            if dev.kind == "inductor":
                self._l_const[j, j] = dev.resolved(parameters)["value"]
            elif dev.name not in seen:
                seen.add(dev.name)
                idx = [port_index[f"{dev.name}.a"], port_index[f"{dev.name}.b"]]
                self._multiports.append((dev, np.array(idx)))

        # constant stiffness: linear-resistor block plus incidence couplings
        k = np.zeros((n, n))
        k[layout.phi, layout.phi] = k_rr
        k[layout.phi, layout.i_l] = inc.a_l
        k[layout.phi, layout.i_v] = inc.a_v
        k[layout.i_l, layout.phi] = -inc.a_l.T
        k[layout.i_v, layout.phi] = -inc.a_v.T
        self._k_const = k

        self._sources_i = [branch_by_name[b].device.waveform for b in inc.branches_i]
        self._sources_v = [branch_by_name[b].device.waveform for b in inc.branches_v]
        self._a_i = inc.a_i
        self.clamp_events = 0

    # -- operators ----------------------------------------------------------

    def mass(self, x) -> np.ndarray:
        layout = self.layout
        m = np.zeros((layout.n, layout.n))
        m[layout.phi, layout.phi] = self._m_cc
        lblock = self._l_const.copy()
        if self._multiports:
            i_l = x[layout.i_l]
            for dev, idx in self._multiports:
                lblock[np.ix_(idx, idx)] = multiport_inductance(dev, i_l[idx], self.parameters)
        m[layout.i_l, layout.i_l] = lblock
        return m

    def stiffness(self, x) -> np.ndarray:
        k = self._k_const.copy()
        phi = x[self.layout.phi]
        for _, col, dev in self._diodes:
            g, _, clamped = diode_stamp(dev, col @ phi, self.parameters)
            if clamped:
                self.clamp_events += 1
            k[self.layout.phi, self.layout.phi] += g * np.outer(col, col)
        return k

    def source(self, t: float) -> np.ndarray:
        layout = self.layout
        f = np.zeros(layout.n)
        for wave, col in zip(self._sources_i, self._a_i.T):
            f[layout.phi] += col * wave.value(t)
        for j, wave in enumerate(self._sources_v):
            f[layout.i_v.start + j] = wave.value(t)
        return f

    def source_derivative(self, t: float) -> np.ndarray:
        layout = self.layout
        df = np.zeros(layout.n)
        for wave, col in zip(self._sources_i, self._a_i.T):
            df[layout.phi] += col * wave.derivative(t)
        for j, wave in enumerate(self._sources_v):
            df[layout.i_v.start + j] = wave.derivative(t)
        return df

    def residual(self, xp, x, t) -> np.ndarray:
        return self.mass(x) @ xp + self.stiffness(x) @ x + self.source(t)

    def stiffness_jacobian_term(self, x) -> np.ndarray:
        """d(K(x) x)/dx: the constant blocks plus g + g'*u for each diode."""
        layout = self.layout
        j = self._k_const.copy()
        phi = x[layout.phi]
        for _, col, dev in self._diodes:
            u = col @ phi
            g, dg, _ = diode_stamp(dev, u, self.parameters)
            j[layout.phi, layout.phi] += (g + dg * u) * np.outer(col, col)
        return j

    def mass_jacobian_term(self, x, w) -> np.ndarray:
        """d(M(x) w)/dx at fixed w; nonzero only for current-dependent inductance."""
        layout = self.layout
        j = np.zeros((layout.n, layout.n))
        if self._multiports:
            i_l = x[layout.i_l]
            wl = w[layout.i_l]
            for dev, idx in self._multiports:
                d1, d2 = multiport_inductance_gradient(dev, i_l[idx], self.parameters)
                block = np.column_stack([d1 @ wl[idx], d2 @ wl[idx]])
                rows = layout.i_l.start + idx
                j[np.ix_(rows, rows)] += block
        return j

    def residual_jacobian_x(self, xp, x, t) -> np.ndarray:
        """Exact d/dx of the residual, including nonlinear stamp derivatives."""
        return self.stiffness_jacobian_term(x) + self.mass_jacobian_term(x, xp)

    def residual_jacobian_xp(self, x) -> np.ndarray:
        return self.mass(x)


def build_dae(graph: CircuitGraph) -> DaeSystem:
    """Assemble the standard-form DAE for a validated circuit graph."""
    return DaeSystem(graph)


def assemble(system: DaeSystem, x, t, p=None):
    """Evaluate (M, K, f) at one point, checking for non-finite entries.

    Non-finite entries are reported with the name of the offending device.
    """
    bound = system.bind(p)
    x = np.asarray(x, dtype=float)
    m, k, f = bound.mass(x), bound.stiffness(x), bound.source(float(t))
    for mat, label in ((m, "mass"), (k, "stiffness"), (f, "source")):
        if not np.all(np.isfinite(mat)):
            offender = _find_offender(system, bound, x, float(t))
            raise AssembleError(
                f"non-finite entries in the {label} operator (device {offender})"
            )
    return m, k, f


def _find_offender(system: DaeSystem, bound: BoundSystem, x, t) -> str:
    phi = x[system.layout.phi]
    for bname, col, dev in bound._diodes:
        g, dg, _ = diode_stamp(dev, col @ phi, bound.parameters)
        if not (math.isfinite(g) and math.isfinite(dg)):
            return dev.name
    for dev, idx in bound._multiports:
        lmat = multiport_inductance(dev, x[system.layout.i_l][idx], bound.parameters)
        if not np.all(np.isfinite(lmat)):
            return dev.name
    for wave, name in zip(
        bound._sources_i + bound._sources_v,
        system.incidence.branches_i + system.incidence.branches_v,
    ):
        if not math.isfinite(wave.value(t)):
            return name
    return "<unknown>"
