"""SPICE-like netlist parsing into a validated circuit graph.

One element per line, ``#`` comments, case-insensitive keywords::

    R<name> <n+> <n-> <value | param=NAME>
    C<name> <n+> <n-> <value | param=NAME>
    L<name> <n+> <n-> <value | param=NAME>
    D<name> <n+> <n-> IS=<A> VT=<V> [TEMP=<NAME or degC>] [T0=<K>] [EG=<eV>]
    V<name> <n+> <n-> SIN(<offset> <amplitude> <freq>) | COS(...) | DC <value>
    I<name> <n+> <n-> SIN(...) | COS(...) | DC <value>
    K<name> <na+> <na-> <nb+> <nb-> [L0=] [A2=] [A4=] [RATIO2=] [COUP2=]
    PARAM <NAME> <lower> <upper>

Node names are nonnegative integers; ``0`` is ground. Controlled sources and
subcircuits are rejected. Diodes are nonlinear resistors: without TEMP the
branch current is ``g_D(v)*v`` with ``g_D(v) = IS*(exp(v/VT)-1)``; with TEMP
the conductance is the temperature-dependent model used by the rectifier
fixture. A K element is a 2-port coupled inductor stamped as two branches.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import NetlistError

ELEMENTARY_CHARGE = 1.602176634e-19  # C
BOLTZMANN = 1.380649e-23  # J/K
CELSIUS_OFFSET = 273.15  # K

RESISTIVE_KINDS = ("resistor", "diode")
CAPACITIVE_KINDS = ("capacitor",)
INDUCTIVE_KINDS = ("inductor", "inductive-multiport")

FIXTURE_NAMES = ("oscillator-v", "oscillator-i", "rectifier")


@dataclass(frozen=True)
class Waveform:
    """Time signal of an independent source, with an analytic derivative."""

    kind: str = "constant"  # sine | cosine | constant
    amplitude: float = 0.0
    frequency: float = 0.0  # Hz
    offset: float = 0.0
    phase: float = 0.0  # rad

    def value(self, t: float) -> float:
        w = 2.0 * math.pi * self.frequency
        if self.kind == "sine":
            return self.offset + self.amplitude * math.sin(w * t + self.phase)
        if self.kind == "cosine":
            return self.offset + self.amplitude * math.cos(w * t + self.phase)
        return self.offset

    def derivative(self, t: float) -> float:
        w = 2.0 * math.pi * self.frequency
        if self.kind == "sine":
            return self.amplitude * w * math.cos(w * t + self.phase)
        if self.kind == "cosine":
            return -self.amplitude * w * math.sin(w * t + self.phase)
        return 0.0


@dataclass(frozen=True)
class DeviceModel:
    """Typed circuit element with fixed params and optional parameter bindings.

    ``param_bindings`` maps a params key (e.g. ``"value"`` or ``"temp_c"``) to
    the name of an entry of the design-parameter vector that overrides it.
    """

    name: str
    kind: str
    params: dict[str, float] = field(default_factory=dict)
    waveform: Waveform | None = None
    param_bindings: dict[str, str] = field(default_factory=dict)

    def resolved(self, parameters: dict[str, float] | None = None) -> dict[str, float]:
        """Effective params after applying bindings from ``parameters``."""
        out = dict(self.params)
        for key, pname in self.param_bindings.items():
            if parameters is None or pname not in parameters:
                raise KeyError(f"device {self.name}: no value supplied for parameter '{pname}'")
            out[key] = float(parameters[pname])
        return out


@dataclass(frozen=True)
class Branch:
    name: str
    plus: str
    minus: str
    device: DeviceModel
    port: int = 0


@dataclass(frozen=True)
class Parameter:
    name: str
    lower: float
    upper: float


@dataclass
class CircuitGraph:
    """Validated directed graph of nodes and device branches.

    Nodes are the canonical integer strings appearing in the netlist; ground
    is the node named "0". Immutable by convention after construction.
    """

    nodes: list[str]
    branches: list[Branch]
    parameter_space: list[Parameter]

    GROUND = "0"

    def __eq__(self, other):
        if not isinstance(other, CircuitGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.branches == other.branches
            and self.parameter_space == other.parameter_space
        )

    @property
    def non_ground_nodes(self) -> list[str]:
        return [n for n in self.nodes if n != self.GROUND]

    def parameter_names(self) -> list[str]:
        return [p.name for p in self.parameter_space]

    def parameter_vector(self, p=None) -> np.ndarray:
        """Design-parameter vector in declaration order.

        ``p`` may be None (midpoints of the declared ranges), a mapping by
        name, or a sequence in declaration order.
        """
        if p is None:
            return np.array([(q.lower + q.upper) / 2.0 for q in self.parameter_space])
        if isinstance(p, dict):
            return np.array([float(p[q.name]) for q in self.parameter_space])
        vec = np.asarray(p, dtype=float).ravel()
        if vec.size != len(self.parameter_space):
            raise ValueError(
                f"parameter vector has {vec.size} entries, expected {len(self.parameter_space)}"
            )
        return vec

    def parameter_dict(self, p=None) -> dict[str, float]:
        vec = self.parameter_vector(p)
        return {q.name: float(v) for q, v in zip(self.parameter_space, vec)}

    def branches_of_class(self, kinds) -> list[Branch]:
        return [b for b in self.branches if b.device.kind in kinds]


@dataclass(frozen=True)
class IncidenceSet:
    """Reduced incidence matrices per device class (ground row deleted).

    Entry +1 at the from-node and -1 at the to-node of each branch. Diodes
    are filed under the resistive class, multiport inductor branches under
    the inductive class.
    """

    nodes: tuple[str, ...]
    a_c: np.ndarray
    a_r: np.ndarray
    a_l: np.ndarray
    a_v: np.ndarray
    a_i: np.ndarray
    branches_c: tuple[str, ...]
    branches_r: tuple[str, ...]
    branches_l: tuple[str, ...]
    branches_v: tuple[str, ...]
    branches_i: tuple[str, ...]


# ---------------------------------------------------------------------------
# parsing

_SOURCE_RE = re.compile(r"^(SIN|COS)\s*\((.*)\)$", re.IGNORECASE | re.DOTALL)

_DIODE_KEYS = {"IS": "is", "VT": "vt", "T0": "t0", "EG": "eg"}
_MULTIPORT_KEYS = {"L0": "l0", "A2": "a2", "A4": "a4", "RATIO2": "ratio2", "COUP2": "coup2"}
_MULTIPORT_DEFAULTS = {"l0": 1e-3, "a2": -10.0, "a4": 50.0, "ratio2": 0.1, "coup2": 0.09}
_DIODE_DEFAULTS = {"is": 1e-14, "t0": 300.0, "eg": 1.12}


def _column_of(line: str, token: str) -> int:
    pos = line.find(token)
    return pos + 1 if pos >= 0 else 1


def _parse_node(token: str, line_no: int, line: str) -> str:
    try:
        value = int(token)
    except ValueError:
        raise NetlistError(
            f"dangling branch endpoint: unknown node '{token}' (node names are nonnegative integers)",
            line_no,
            _column_of(line, token),
        ) from None
    if value < 0:
        raise NetlistError(f"negative node number '{token}'", line_no, _column_of(line, token))
    return str(value)


def _parse_float(token: str, line_no: int, line: str, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise NetlistError(
            f"syntax error: expected {what}, got '{token}'", line_no, _column_of(line, token)
        ) from None


def _parse_value_or_binding(token: str, line_no: int, line: str):
    """Returns (value, binding_name); exactly one of the two is set."""
    if token.upper().startswith("PARAM="):
        name = token.split("=", 1)[1]
        if not name:
            raise NetlistError("empty parameter name in 'param='", line_no, _column_of(line, token))
        return None, name.upper()
    return _parse_float(token, line_no, line, "a numeric value or param=NAME"), None


def _parse_keyvals(tokens, keymap, line_no, line, extra_keys=()):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise NetlistError(f"syntax error: expected KEY=VALUE, got '{tok}'", line_no, _column_of(line, tok))
        key, val = tok.split("=", 1)
        key = key.upper()
        if key in keymap:
            out[keymap[key]] = _parse_float(val, line_no, line, f"a number for {key}")
        elif key in extra_keys:
            out[key.lower()] = val
        else:
            raise NetlistError(f"unknown option '{key}'", line_no, _column_of(line, tok))
    return out


def _parse_source_spec(tokens, line_no, line) -> Waveform:
    spec = " ".join(tokens)
    if tokens and tokens[0].upper() == "DC":
        if len(tokens) != 2:
            raise NetlistError("syntax error: DC takes exactly one value", line_no)
        return Waveform(kind="constant", offset=_parse_float(tokens[1], line_no, line, "a DC value"))
    m = _SOURCE_RE.match(spec)
    if not m:
        raise NetlistError(
            f"syntax error: expected SIN(...), COS(...) or DC <value>, got '{spec}'", line_no
        )
    kind = "sine" if m.group(1).upper() == "SIN" else "cosine"
    args = m.group(2).split()
    if len(args) != 3:
        raise NetlistError(
            f"syntax error: {m.group(1).upper()}() takes offset, amplitude, frequency", line_no
        )
    offset, amplitude, freq = (_parse_float(a, line_no, line, "a source argument") for a in args)
    if freq < 0:
        raise NetlistError(f"negative frequency {freq}", line_no)
    return Waveform(kind=kind, amplitude=amplitude, frequency=freq, offset=offset)


def parse_netlist(text: str) -> CircuitGraph:
    """Parse netlist source into a validated :class:`CircuitGraph`."""
    branches: list[Branch] = []
    parameters: list[Parameter] = []
    seen_names: set[str] = set()
    seen_params: set[str] = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0].upper()

        if head == "PARAM":
            if len(tokens) != 4:
                raise NetlistError("syntax error: PARAM <NAME> <lower> <upper>", line_no)
            name = tokens[1].upper()
            lo = _parse_float(tokens[2], line_no, line, "a lower bound")
            hi = _parse_float(tokens[3], line_no, line, "an upper bound")
            if name in seen_params:
                raise NetlistError(f"duplicate parameter '{name}'", line_no)
            if not lo <= hi:
                raise NetlistError(f"parameter '{name}' has empty range [{lo}, {hi}]", line_no)
            seen_params.add(name)
            parameters.append(Parameter(name, lo, hi))
            continue

        if head.startswith(".") or head.startswith("X"):
            raise NetlistError("subcircuits are not supported", line_no)
        letter = head[0]
        if letter in "EFGH":
            raise NetlistError("controlled sources are not supported", line_no)
        if letter not in "RCLDVIK":
            raise NetlistError(f"unknown device kind '{tokens[0]}'", line_no)
        name = head
        if name in seen_names:
            raise NetlistError(f"duplicate branch name '{name}'", line_no)
        seen_names.add(name)

        if letter in "RCL":
            if len(tokens) != 4:
                raise NetlistError(f"syntax error: {letter}<name> <n+> <n-> <value|param=NAME>", line_no)
            plus = _parse_node(tokens[1], line_no, line)
            minus = _parse_node(tokens[2], line_no, line)
            value, binding = _parse_value_or_binding(tokens[3], line_no, line)
            kind = {"R": "resistor", "C": "capacitor", "L": "inductor"}[letter]
            params = {} if value is None else {"value": value}
            bindings = {} if binding is None else {"value": binding}
            if value is not None and value <= 0:
                raise NetlistError(f"nonpositive element value {value} for {name}", line_no)
            device = DeviceModel(name=name, kind=kind, params=params, param_bindings=bindings)
        elif letter == "D":
            if len(tokens) < 3:
                raise NetlistError("syntax error: D<name> <n+> <n-> IS=... [VT=|TEMP=]", line_no)
            plus = _parse_node(tokens[1], line_no, line)
            minus = _parse_node(tokens[2], line_no, line)
            opts = _parse_keyvals(tokens[3:], _DIODE_KEYS, line_no, line, extra_keys=("TEMP",))
            params = dict(_DIODE_DEFAULTS)
            bindings = {}
            for key in ("is", "vt", "t0", "eg"):
                if key in opts:
                    params[key] = opts[key]
            if params["is"] <= 0:
                raise NetlistError(f"nonpositive element value {params['is']} for {name} IS", line_no)
            if "temp" in opts:
                try:
                    params["temp_c"] = float(opts["temp"])
                except ValueError:
                    bindings["temp_c"] = opts["temp"].upper()
                params.pop("vt", None)
            else:
                params.setdefault("vt", 0.026)
                if params["vt"] <= 0:
                    raise NetlistError(f"nonpositive element value {params['vt']} for {name} VT", line_no)
                params.pop("t0")
                params.pop("eg")
            device = DeviceModel(name=name, kind="diode", params=params, param_bindings=bindings)
        elif letter in "VI":
            if len(tokens) < 4:
                raise NetlistError(f"syntax error: {letter}<name> <n+> <n-> <source spec>", line_no)
            plus = _parse_node(tokens[1], line_no, line)
            minus = _parse_node(tokens[2], line_no, line)
            wave = _parse_source_spec(tokens[3:], line_no, line)
            kind = "vsource" if letter == "V" else "isource"
            device = DeviceModel(name=name, kind=kind, waveform=wave)
        else:  # K: 2-port coupled inductor
            if len(tokens) < 5:
                raise NetlistError("syntax error: K<name> <na+> <na-> <nb+> <nb-> [options]", line_no)
            na_p = _parse_node(tokens[1], line_no, line)
            na_m = _parse_node(tokens[2], line_no, line)
            nb_p = _parse_node(tokens[3], line_no, line)
            nb_m = _parse_node(tokens[4], line_no, line)
            opts = _parse_keyvals(tokens[5:], _MULTIPORT_KEYS, line_no, line)
            params = dict(_MULTIPORT_DEFAULTS)
            params.update(opts)
            if params["l0"] <= 0:
                raise NetlistError(f"nonpositive element value {params['l0']} for {name} L0", line_no)
            if not params["ratio2"] > params["coup2"] > 0:
                raise NetlistError(
                    f"{name}: need RATIO2 > COUP2 > 0 for a positive-definite inductance matrix",
                    line_no,
                )
            device = DeviceModel(name=name, kind="inductive-multiport", params=params)
            if na_p == na_m or nb_p == nb_m:
                raise NetlistError(f"branch {name} connects a node to itself", line_no)
            branches.append(Branch(f"{name}.a", na_p, na_m, device, port=0))
            branches.append(Branch(f"{name}.b", nb_p, nb_m, device, port=1))
            continue

        if plus == minus:
            raise NetlistError(f"branch {name} connects a node to itself", line_no)
        branches.append(Branch(name, plus, minus, device))

    graph = CircuitGraph(nodes=_collect_nodes(branches), branches=branches, parameter_space=parameters)
    validate(graph)
    return graph


def _collect_nodes(branches) -> list[str]:
    seen = set()
    for b in branches:
        seen.add(b.plus)
        seen.add(b.minus)
    return sorted(seen, key=int)


def validate(graph: CircuitGraph) -> None:
    """Check graph invariants; raises :class:`NetlistError` on the first failure."""
    if CircuitGraph.GROUND not in graph.nodes:
        raise NetlistError("missing ground node '0'")
    # connectivity of the underlying undirected graph
    adjacency: dict[str, set[str]] = {n: set() for n in graph.nodes}
    for b in graph.branches:
        adjacency[b.plus].add(b.minus)
        adjacency[b.minus].add(b.plus)
    reached = {CircuitGraph.GROUND}
    stack = [CircuitGraph.GROUND]
    while stack:
        for nb in adjacency[stack.pop()]:
            if nb not in reached:
                reached.add(nb)
                stack.append(nb)
    unreached = [n for n in graph.nodes if n not in reached]
    if unreached:
        raise NetlistError(f"circuit graph is not connected; unreachable nodes: {unreached}")
    names = set()
    for b in graph.branches:
        if b.name in names:
            raise NetlistError(f"duplicate branch name '{b.name}'")
        names.add(b.name)
    known_params = {p.name for p in graph.parameter_space}
    positive_kinds = {"resistor", "capacitor", "inductor"}
    for b in graph.branches:
        dev = b.device
        for key, pname in dev.param_bindings.items():
            if pname not in known_params:
                raise NetlistError(f"device {dev.name} binds unknown parameter '{pname}'")
            if dev.kind in positive_kinds and key == "value":
                bound = next(p for p in graph.parameter_space if p.name == pname)
                if bound.lower <= 0:
                    raise NetlistError(
                        f"device {dev.name}: parameter '{pname}' range allows nonpositive values"
                    )
        if dev.kind in positive_kinds and "value" in dev.params and dev.params["value"] <= 0:
            raise NetlistError(f"nonpositive element value for {dev.name}")


# ---------------------------------------------------------------------------
# serialization

def _fmt(x: float) -> str:
    return repr(float(x))


def to_netlist(graph: CircuitGraph) -> str:
    """Serialize back to netlist text; parsing the result reproduces the graph."""
    lines = []
    emitted = set()
    for b in graph.branches:
        dev = b.device
        if dev.name in emitted:
            continue
        emitted.add(dev.name)
        if dev.kind in ("resistor", "capacitor", "inductor"):
            value = (
                f"param={dev.param_bindings['value']}"
                if "value" in dev.param_bindings
                else _fmt(dev.params["value"])
            )
            lines.append(f"{dev.name} {b.plus} {b.minus} {value}")
        elif dev.kind == "diode":
            parts = [f"{dev.name} {b.plus} {b.minus}", f"IS={_fmt(dev.params['is'])}"]
            if "vt" in dev.params:
                parts.append(f"VT={_fmt(dev.params['vt'])}")
            if "temp_c" in dev.param_bindings:
                parts.append(f"TEMP={dev.param_bindings['temp_c']}")
            elif "temp_c" in dev.params:
                parts.append(f"TEMP={_fmt(dev.params['temp_c'])}")
            if "t0" in dev.params:
                parts.append(f"T0={_fmt(dev.params['t0'])}")
            if "eg" in dev.params:
                parts.append(f"EG={_fmt(dev.params['eg'])}")
            lines.append(" ".join(parts))
        elif dev.kind in ("vsource", "isource"):
            w = dev.waveform
            if w.kind == "constant":
                spec = f"DC {_fmt(w.offset)}"
            else:
                fn = "SIN" if w.kind == "sine" else "COS"
                spec = f"{fn}({_fmt(w.offset)} {_fmt(w.amplitude)} {_fmt(w.frequency)})"
            lines.append(f"{dev.name} {b.plus} {b.minus} {spec}")
        else:  # inductive-multiport: gather both ports
            ports = [br for br in graph.branches if br.device is dev or br.device == dev]
            ports = sorted(ports, key=lambda br: br.port)
            a, bb = ports[0], ports[1]
            p = dev.params
            lines.append(
                f"{dev.name} {a.plus} {a.minus} {bb.plus} {bb.minus} "
                f"L0={_fmt(p['l0'])} A2={_fmt(p['a2'])} A4={_fmt(p['a4'])} "
                f"RATIO2={_fmt(p['ratio2'])} COUP2={_fmt(p['coup2'])}"
            )
    for q in graph.parameter_space:
        lines.append(f"PARAM {q.name} {_fmt(q.lower)} {_fmt(q.upper)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# incidence matrices

_CLASS_OF_KIND = {
    "capacitor": "c",
    "resistor": "r",
    "diode": "r",
    "inductor": "l",
    "inductive-multiport": "l",
    "vsource": "v",
    "isource": "i",
}


def branch_class(branch: Branch) -> str:
    return _CLASS_OF_KIND[branch.device.kind]


def build_incidence(graph: CircuitGraph) -> IncidenceSet:
    """Reduced incidence matrices A_C, A_R, A_L, A_V, A_I of a valid graph."""
    nodes = graph.non_ground_nodes
    row = {n: i for i, n in enumerate(nodes)}
    columns: dict[str, list[np.ndarray]] = {c: [] for c in "crlvi"}
    names: dict[str, list[str]] = {c: [] for c in "crlvi"}
    for b in graph.branches:
        col = np.zeros(len(nodes))
        if b.plus != CircuitGraph.GROUND:
            col[row[b.plus]] = 1.0
        if b.minus != CircuitGraph.GROUND:
            col[row[b.minus]] = -1.0
        cls = branch_class(b)
        columns[cls].append(col)
        names[cls].append(b.name)

    def mat(cls: str) -> np.ndarray:
        if not columns[cls]:
            return np.zeros((len(nodes), 0))
        return np.column_stack(columns[cls])

    return IncidenceSet(
        nodes=tuple(nodes),
        a_c=mat("c"),
        a_r=mat("r"),
        a_l=mat("l"),
        a_v=mat("v"),
        a_i=mat("i"),
        branches_c=tuple(names["c"]),
        branches_r=tuple(names["r"]),
        branches_l=tuple(names["l"]),
        branches_v=tuple(names["v"]),
        branches_i=tuple(names["i"]),
    )


# ---------------------------------------------------------------------------
# built-in fixtures

_OSCILLATOR_V = """\
# diode oscillator driven by a voltage source
V1 1 0 SIN(0 1 300)
R1 1 2 500
L1 2 3 param=L
C1 3 0 param=C
D1 3 0 IS=1e-14 VT=0.026
PARAM L 1e-3 3e-3
PARAM C 100e-9 300e-9
"""

_OSCILLATOR_I = """\
# diode oscillator driven by a current source
I1 0 1 SIN(0 1e-4 200)
R1 1 2 500
L1 2 3 param=L
C1 3 0 param=C
D1 3 0 IS=1e-14 VT=0.026
PARAM L 1e-3 3e-3
PARAM C 100e-9 300e-9
"""

_RECTIFIER = """\
# full-wave rectifier: current-fed transformer, diode bridge, RC load
I1 0 1 COS(0 0.1 50)
K1 1 0 2 0 L0=1e-3 A2=-10 A4=50 RATIO2=0.1 COUP2=0.09
D1 2 3 IS=1e-14 TEMP=T1
D2 0 3 IS=1e-14 TEMP=T2
D3 4 2 IS=1e-14 TEMP=T2
D4 4 0 IS=1e-14 TEMP=T1
R1 3 4 50
C1 3 4 1e-3
PARAM T1 20 90
PARAM T2 20 90
"""

FIXTURES = {
    "oscillator-v": _OSCILLATOR_V,
    "oscillator-i": _OSCILLATOR_I,
    "rectifier": _RECTIFIER,
}

# sensible transient horizons/steps for the built-in circuits
FIXTURE_DEFAULTS = {
    "oscillator-v": {"t_end": 10e-3, "step": 1e-6},
    "oscillator-i": {"t_end": 10e-3, "step": 1e-6},
    "rectifier": {"t_end": 50e-3, "step": 5e-6},
}


def load_fixture(name: str) -> CircuitGraph:
    """Parse one of the built-in example circuits by name."""
    try:
        text = FIXTURES[name]
    except KeyError:
        raise NetlistError(f"unknown fixture '{name}'; choose from {sorted(FIXTURES)}") from None
    return parse_netlist(text)
