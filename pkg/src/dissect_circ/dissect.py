"""Dissection of a standard-form DAE into differential and algebraic parts.

Level 1 splits x = P xt + Q xb along ker M and projects the equations with
V, W; level 2 splits the algebraic variables along ker(W^T K Q) and the
differential ones along ker(Wbar^T Kbar_P), yielding a reduced ODE in the
level-2 differential variables plus three pointwise-solvable algebraic
systems. For circuit DAEs the kernels follow from the incidence structure,
so selection-style 0/+-1 bases are built exactly; a rank-revealing SVD path
covers everything else. Index detection is provided both topologically
(loops of capacitors/voltage sources, cutsets of inductors/current sources)
and numerically (regularity of the decoupling blocks at sample states).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import AssumptionViolation, DecouplingError, IndexTooHigh
from .mna import DaeSystem
from .netlist import CircuitGraph, IncidenceSet, branch_class
from .newton import DEFAULT_NEWTON, NewtonConfig, newton_solve

KERNEL_TOL = 1e-10
REGULARITY_TOL = 1e-8


# ---------------------------------------------------------------------------
# nullspace machinery


def nullspace_basis(a, tol: float = KERNEL_TOL):
    """Kernel basis Q and complement P of a matrix, by rank-revealing SVD.

    Q has orthonormal columns with ||A Q|| <= tol * ||A||; [P Q] is square and
    orthogonal. Rank 0 and full rank are valid outcomes.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[1]
    if a.shape[0] == 0 or n == 0 or not np.any(a):
        return np.eye(n), np.zeros((n, 0))
    _, s, vt = np.linalg.svd(a)
    rank = int(np.sum(s > tol * s[0]))
    return vt[rank:].T.copy(), vt[:rank].T.copy()


def coordinate_aligned(q, tol: float = 1e-9):
    """Selection-style 0/1 basis spanning the same space as ``q``, or None."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    n, k = q.shape
    if k == 0:
        return q.copy()
    qq, _ = np.linalg.qr(q)
    diag = np.sum(qq * qq, axis=1)
    aligned = [i for i in range(n) if 1.0 - diag[i] < tol * tol]
    if len(aligned) != k:
        return None
    out = np.zeros((n, k))
    for j, i in enumerate(aligned):
        out[i, j] = 1.0
    return out


def _rational_kernel(a, atol: float = 1e-9):
    """Exact kernel basis of a near-integer matrix, as small-integer columns.

    Returns None when entries are not integral; each basis column is scaled
    to coprime integers with positive entry at its free coordinate.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    m, n = a.shape
    if m == 0 or n == 0 or not np.any(a):
        return np.eye(n)
    rounded = np.rint(a)
    if not np.allclose(a, rounded, atol=atol):
        return None
    rows = [[Fraction(int(v)) for v in row] for row in rounded.tolist()]
    pivots: list[int] = []
    prow = 0
    for col in range(n):
        pr = next((i for i in range(prow, len(rows)) if rows[i][col] != 0), None)
        if pr is None:
            continue
        rows[prow], rows[pr] = rows[pr], rows[prow]
        pv = rows[prow][col]
        rows[prow] = [v / pv for v in rows[prow]]
        for i in range(len(rows)):
            if i != prow and rows[i][col] != 0:
                f = rows[i][col]
                rows[i] = [vi - f * vp for vi, vp in zip(rows[i], rows[prow])]
        pivots.append(col)
        prow += 1
        if prow == len(rows):
            break
    free = [c for c in range(n) if c not in pivots]
    cols = []
    for fc in free:
        vec = [Fraction(0)] * n
        vec[fc] = Fraction(1)
        for i, pc in enumerate(pivots):
            vec[pc] = -rows[i][fc]
        den = math.lcm(*[v.denominator for v in vec])
        ints = [int(v * den) for v in vec]
        g = math.gcd(*[abs(v) for v in ints if v] or [1])
        cols.append([v // g for v in ints])
    if not cols:
        return np.zeros((n, 0))
    return np.array(cols, dtype=float).T


def _selection_complement(q):
    """Identity-column complement of an integer basis, pivoting bottom-up.

    Chooses for every column of ``q`` the largest-index usable pivot row, so
    the complement keeps the smallest-index coordinates (this reproduces the
    textbook choice of retained node potentials, e.g. v(3)-v(4) rather than
    v(4)-v(3) for a floating capacitor between nodes 3 and 4).
    """
    qa = np.rint(np.atleast_2d(np.asarray(q, dtype=float)))
    n, k = qa.shape
    cols = [[Fraction(int(qa[i, j])) for i in range(n)] for j in range(k)]
    used: list[int] = []
    for j in range(k):
        cand = [i for i in range(n) if i not in used and cols[j][i] != 0]
        if not cand:
            raise ValueError("basis columns are linearly dependent")
        r = max(cand)
        used.append(r)
        for jj in range(k):
            if jj != j and cols[jj][r] != 0:
                f = cols[jj][r] / cols[j][r]
                cols[jj] = [a - f * b for a, b in zip(cols[jj], cols[j])]
    rest = [i for i in range(n) if i not in used]
    p = np.zeros((n, len(rest)))
    for jj, i in enumerate(rest):
        p[i, jj] = 1.0
    return p


def _kernel_and_complement(a, tol: float = KERNEL_TOL):
    """Kernel/complement pair, exact and selection-style whenever possible."""
    q = _rational_kernel(a)
    if q is not None:
        try:
            return q, _selection_complement(q), "topological-selection"
        except ValueError:
            pass
    q, p = nullspace_basis(a, tol)
    sel = coordinate_aligned(q)
    if sel is not None:
        try:
            return sel, _selection_complement(sel), "topological-selection"
        except ValueError:
            pass
    return q, p, "numeric-nullspace"


# ---------------------------------------------------------------------------
# generic standard-form systems (for DAEs that do not come from a netlist)


class CallableDae:
    """Standard-form DAE M(x) x' + K(x) x + f(t) = 0 given by plain callables."""

    class _Layout:
        def __init__(self, names):
            self.names = tuple(names)

        @property
        def n(self):
            return len(self.names)

    def __init__(self, n, mass, stiffness, source, names=None):
        self._mass = mass
        self._stiffness = stiffness
        self._source = source
        self.layout = self._Layout(names or [f"x[{i}]" for i in range(n)])

    def bind(self, p=None):
        return _CallableBound(self)

    def mass(self, x, p=None):
        return np.atleast_2d(np.asarray(self._mass(np.asarray(x, dtype=float)), dtype=float))

    def stiffness(self, x, p=None):
        return np.atleast_2d(np.asarray(self._stiffness(np.asarray(x, dtype=float)), dtype=float))

    def source(self, t, p=None):
        return np.atleast_1d(np.asarray(self._source(float(t)), dtype=float))

    def residual(self, xp, x, t, p=None):
        return self.mass(x) @ np.asarray(xp, dtype=float) + self.stiffness(x) @ np.asarray(
            x, dtype=float
        ) + self.source(t)


class _CallableBound:
    def __init__(self, system: CallableDae):
        self._s = system
        self.layout = system.layout

    def mass(self, x):
        return self._s.mass(x)

    def stiffness(self, x):
        return self._s.stiffness(x)

    def source(self, t):
        return self._s.source(t)

    def source_derivative(self, t, h=1e-7):
        return (self._s.source(t + h) - self._s.source(t - h)) / (2.0 * h)

    def residual(self, xp, x, t):
        return self._s.residual(xp, x, t)

    def residual_jacobian_x(self, xp, x, t):
        from .newton import fd_jacobian

        xp = np.asarray(xp, dtype=float)
        return fd_jacobian(lambda z: self._s.residual(xp, z, t), np.asarray(x, dtype=float))

    def stiffness_jacobian_term(self, x):
        from .newton import fd_jacobian

        x = np.asarray(x, dtype=float)
        return fd_jacobian(lambda z: self._s.stiffness(z) @ z, x)

    def mass_jacobian_term(self, x, w):
        from .newton import fd_jacobian

        w = np.asarray(w, dtype=float)
        return fd_jacobian(lambda z: self._s.mass(z) @ w, np.asarray(x, dtype=float))

    def residual_jacobian_xp(self, x):
        return self._s.mass(x)


# ---------------------------------------------------------------------------
# topological bases (circuit structure)


@dataclass(frozen=True)
class TopologicalBases:
    """Constant selection-style bases derived from the incidence structure."""

    q: np.ndarray
    p: np.ndarray
    q_c: np.ndarray
    p_c: np.ndarray
    q_v: np.ndarray
    q_r: np.ndarray
    w_v: np.ndarray


def topological_bases(inc: IncidenceSet) -> TopologicalBases:
    """Level-1 bases from the capacitive subgraph, plus the level-2 kernels.

    The kernel of the capacitive mass block is spanned by indicators of the
    connected components of the capacitor subgraph that do not touch ground;
    the complement keeps one potential per grounded node and all but the
    highest-numbered node of each floating component.
    """
    n_phi = len(inc.nodes)
    parent = list(range(n_phi + 1))  # last entry is ground

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        parent[find(i)] = find(j)

    ground = n_phi
    for col in inc.a_c.T:
        ends = np.flatnonzero(col)
        if len(ends) == 2:
            union(int(ends[0]), int(ends[1]))
        elif len(ends) == 1:
            union(int(ends[0]), ground)

    groups: dict[int, list[int]] = {}
    for i in range(n_phi):
        groups.setdefault(find(i), []).append(i)
    ground_root = find(ground)

    q_cols, p_rows = [], []
    for root in sorted(groups, key=lambda r: min(groups[r])):
        members = sorted(groups[root])
        if root == ground_root:
            p_rows.extend(members)
        else:
            col = np.zeros(n_phi)
            col[members] = 1.0
            q_cols.append(col)
            p_rows.extend(members[:-1])  # all but the reference (largest) node

    q_c = np.column_stack(q_cols) if q_cols else np.zeros((n_phi, 0))
    p_rows = sorted(p_rows)
    p_c = np.zeros((n_phi, len(p_rows)))
    for j, i in enumerate(p_rows):
        p_c[i, j] = 1.0

    n_l = inc.a_l.shape[1]
    n_v = inc.a_v.shape[1]
    q = np.zeros((n_phi + n_l + n_v, q_c.shape[1] + n_v))
    q[:n_phi, : q_c.shape[1]] = q_c
    q[n_phi + n_l :, q_c.shape[1] :] = np.eye(n_v)
    p = np.zeros((n_phi + n_l + n_v, p_c.shape[1] + n_l))
    p[:n_phi, : p_c.shape[1]] = p_c
    p[n_phi : n_phi + n_l, p_c.shape[1] :] = np.eye(n_l)

    q_v = _rational_kernel(inc.a_v.T @ q_c)
    q_r = _rational_kernel(inc.a_r.T @ q_c @ q_v)
    w_v = _rational_kernel(q_c.T @ inc.a_v)
    return TopologicalBases(q=q, p=p, q_c=q_c, p_c=p_c, q_v=q_v, q_r=q_r, w_v=w_v)


# ---------------------------------------------------------------------------
# topological index detection


def _cv_loops(graph: CircuitGraph) -> list[list[str]]:
    """Loops of capacitors and voltage sources containing >= 1 source."""
    cv = [b for b in graph.branches if branch_class(b) in ("c", "v")]
    loops = []
    seen = set()
    for vb in (b for b in cv if branch_class(b) == "v"):
        others = [b for b in cv if b is not vb]
        path = _bfs_path(others, vb.plus, vb.minus)
        if path is not None:
            key = frozenset(path + [vb.name])
            if key not in seen:
                seen.add(key)
                loops.append(sorted(key))
    return loops


def _bfs_path(branches, start: str, goal: str):
    adj: dict[str, list[tuple[str, str]]] = {}
    for b in branches:
        adj.setdefault(b.plus, []).append((b.minus, b.name))
        adj.setdefault(b.minus, []).append((b.plus, b.name))
    if start == goal:
        return []
    frontier = [start]
    came: dict[str, tuple[str, str]] = {start: ("", "")}
    while frontier:
        node = frontier.pop(0)
        for nxt, bname in adj.get(node, ()):
            if nxt in came:
                continue
            came[nxt] = (node, bname)
            if nxt == goal:
                path = []
                cur = nxt
                while cur != start:
                    prev, name = came[cur]
                    path.append(name)
                    cur = prev
                return path
            frontier.append(nxt)
    return None


def _li_cutsets(graph: CircuitGraph) -> list[list[str]]:
    """Cutsets whose branches are all inductors or current sources."""
    keep = [b for b in graph.branches if branch_class(b) not in ("l", "i")]
    nodes = graph.nodes
    parent = {n: n for n in nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for b in keep:
        parent[find(b.plus)] = find(b.minus)

    comps: dict[str, set[str]] = {}
    for n in nodes:
        comps.setdefault(find(n), set()).add(n)
    ground_root = find(CircuitGraph.GROUND)
    cutsets = []
    seen = set()
    for root, members in comps.items():
        if root == ground_root:
            continue
        crossing = [
            b.name
            for b in graph.branches
            if (b.plus in members) != (b.minus in members)
        ]
        key = frozenset(crossing)
        if key and key not in seen:
            seen.add(key)
            cutsets.append(sorted(key))
    return cutsets


@dataclass
class IndexReport:
    """Topological and numeric index evidence for one circuit."""

    topological_index: int
    cv_loops: list[list[str]]
    li_cutsets: list[list[str]]
    numeric_index: int | None = None
    regularity: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "topological_index": self.topological_index,
            "cv_loops": self.cv_loops,
            "li_cutsets": self.li_cutsets,
            "numeric_index": self.numeric_index,
            "regularity": self.regularity,
        }


def detect_index_topological(graph: CircuitGraph) -> IndexReport:
    """Index by Kirchhoff structure: 1 unless a CV-loop or LI-cutset exists."""
    loops = _cv_loops(graph)
    cuts = _li_cutsets(graph)
    index = 2 if loops or cuts else 1
    return IndexReport(topological_index=index, cv_loops=loops, li_cutsets=cuts)


def detect_index(graph: CircuitGraph, p=None, n_samples: int = 4, amplitude: float = 0.1,
                 seed: int = 0) -> IndexReport:
    """Full index report: topological result plus numeric regularity checks."""
    report = detect_index_topological(graph)
    system = DaeSystem(graph)
    rng = np.random.default_rng(seed)
    n = system.layout.n
    samples = [np.zeros(n)] + [amplitude * rng.standard_normal(n) for _ in range(n_samples)]
    l1 = decouple_level1(system, method="numeric", p=p)
    bound = system.bind(p)
    sigmas = [_sigma_range(l1.k_bq(s, bound=bound)) for s in samples]
    report.regularity["algebraic_block"] = _sigma_summary(sigmas)
    if all(_is_regular(s) for s in sigmas):
        report.numeric_index = 1
        return report
    l2 = decouple_level2(l1, p=p)
    sigmas2 = []
    for s in samples:
        _, w_t = l2.vt_wt(s, bound=bound)
        block = w_t.T @ l1.k_tq(s, bound=bound) @ l2.q_bar
        sigmas2.append(_sigma_range(block))
    report.regularity["level2_block"] = _sigma_summary(sigmas2)
    if not all(_is_regular(s) for s in sigmas2):
        raise IndexTooHigh("level-2 block singular at sample states: index exceeds 2")
    report.numeric_index = 2
    return report


def _sigma_range(a) -> tuple[float, float]:
    a = np.atleast_2d(a)
    if a.size == 0 or a.shape[0] != a.shape[1]:
        return (0.0, 0.0)
    s = np.linalg.svd(a, compute_uv=False)
    return (float(s[-1]), float(s[0]))


def _is_regular(sig: tuple[float, float], tol: float = REGULARITY_TOL) -> bool:
    lo, hi = sig
    return hi > 0 and lo > tol * hi


def _sigma_summary(sigmas) -> dict:
    los = [s[0] for s in sigmas]
    his = [s[1] for s in sigmas]
    regular = all(_is_regular(s) for s in sigmas)
    return {
        "min_sigma": min(los),
        "max_sigma": max(his),
        "condition": (max(his) / min(los)) if min(los) > 0 else None,
        "regular": regular,
    }


# ---------------------------------------------------------------------------
# level-1 decoupling


@dataclass(frozen=True)
class Basis:
    """Kernel/complement pair with the left-side analogues."""

    q: np.ndarray
    p: np.ndarray
    w: np.ndarray
    v: np.ndarray
    construction: str
    cond: float


class DecouplingL1:
    """Constant level-1 bases plus the operator blocks of the split system.

    Immutable after construction; all evaluations are pure functions of
    (x, t, p) and may run concurrently.
    """

    def __init__(self, system, basis: Basis, x_ref, p_ref=None, topology=None):
        self.system = system
        self.basis = basis
        self.x_ref = np.asarray(x_ref, dtype=float)
        self.p_ref = p_ref
        self._topology = topology
        self.pmat, self.qmat = basis.p, basis.q
        self.vmat, self.wmat = basis.v, basis.w
        self.t1 = np.hstack([self.pmat, self.qmat])
        if self.t1.shape[0] != self.t1.shape[1]:
            raise DecouplingError("[P Q] is not square; kernel dimension is inconsistent")
        self.t1inv = np.linalg.inv(self.t1)
        names = list(system.layout.names)
        labels = _combination_names(self.t1inv, names)
        nt = self.pmat.shape[1]
        self.differential_names = tuple(
            labels[i] or f"xt[{i}]" for i in range(nt)
        )
        self.algebraic_names = tuple(
            labels[nt + j] or f"xb[{j}]" for j in range(self.qmat.shape[1])
        )

    # -- dimensions -----------------------------------------------------

    @property
    def n(self) -> int:
        return self.t1.shape[0]

    @property
    def n_differential(self) -> int:
        return self.pmat.shape[1]

    @property
    def n_algebraic(self) -> int:
        return self.qmat.shape[1]

    # -- coordinates ------------------------------------------------------

    def split(self, x):
        """Coordinates (xt, xb) with x = P xt + Q xb, exactly."""
        c = self.t1inv @ np.asarray(x, dtype=float)
        return c[: self.n_differential], c[self.n_differential :]

    def recombine(self, xt, xb):
        return self.pmat @ np.asarray(xt, dtype=float) + self.qmat @ np.asarray(xb, dtype=float)

    # -- operator blocks ----------------------------------------------------

    def _bound(self, p=None, bound=None):
        return bound if bound is not None else self.system.bind(p)

    def m_tilde(self, x, p=None, bound=None):
        return self.vmat.T @ self._bound(p, bound).mass(np.asarray(x, dtype=float)) @ self.pmat

    def k_tp(self, x, p=None, bound=None):
        return self.vmat.T @ self._bound(p, bound).stiffness(np.asarray(x, dtype=float)) @ self.pmat

    def k_tq(self, x, p=None, bound=None):
        return self.vmat.T @ self._bound(p, bound).stiffness(np.asarray(x, dtype=float)) @ self.qmat

    def k_bp(self, x, p=None, bound=None):
        return self.wmat.T @ self._bound(p, bound).stiffness(np.asarray(x, dtype=float)) @ self.pmat

    def k_bq(self, x, p=None, bound=None):
        return self.wmat.T @ self._bound(p, bound).stiffness(np.asarray(x, dtype=float)) @ self.qmat

    def f_tilde(self, t, p=None, bound=None):
        return self.vmat.T @ self._bound(p, bound).source(float(t))

    def f_bar(self, t, p=None, bound=None):
        return self.wmat.T @ self._bound(p, bound).source(float(t))

    # -- residuals ------------------------------------------------------

    def residual_differential(self, dxt, xt, xb, t, p=None, bound=None):
        """Projected dynamic equations: Mt dxt + Ktp xt + Ktq xb + ft = 0."""
        b = self._bound(p, bound)
        x = self.recombine(xt, xb)
        return (
            self.vmat.T @ (b.mass(x) @ (self.pmat @ np.asarray(dxt, dtype=float)))
            + self.vmat.T @ (b.stiffness(x) @ x)
            + self.f_tilde(t, bound=b)
        )

    def residual_algebraic(self, xt, xb, t, p=None, bound=None):
        """Projected constraint equations: Kbp xt + Kbq xb + fb = 0."""
        b = self._bound(p, bound)
        x = self.recombine(xt, xb)
        return self.wmat.T @ (b.stiffness(x) @ x) + self.f_bar(t, bound=b)

    def solve_algebraic(self, xt, t, p=None, cfg: NewtonConfig | None = None, guess=None,
                        bound=None):
        """Solve the constraint block for xb at fixed xt and t."""
        b = self._bound(p, bound)
        xt = np.asarray(xt, dtype=float)
        if self.n_algebraic == 0:
            return np.zeros(0)
        x0 = np.zeros(self.n_algebraic) if guess is None else np.asarray(guess, dtype=float)
        res = newton_solve(
            lambda xb: self.residual_algebraic(xt, xb, t, bound=b),
            None,
            x0,
            cfg or DEFAULT_NEWTON,
        )
        return res.x

    def reduced_ode_residual(self, dxt, xt, t, p=None, cfg=None, guess=None, bound=None):
        """Residual of the ODE in xt after eliminating xb via the constraints."""
        b = self._bound(p, bound)
        xb = self.solve_algebraic(xt, t, cfg=cfg, guess=guess, bound=b)
        return self.residual_differential(dxt, xt, xb, t, bound=b)


def _combination_names(tinv, state_names, tol=1e-9):
    """Human-readable labels for coordinates that are signed sums of states."""
    labels = []
    for row in np.atleast_2d(tinv):
        r = np.where(np.abs(row) < tol, 0.0, row)
        ints = np.rint(r)
        if np.allclose(r, ints, atol=tol) and np.any(ints) and set(np.abs(ints).astype(int)) <= {0, 1}:
            terms = []
            for coef, nm in zip(ints.astype(int), state_names):
                if coef == 1:
                    terms.append(("+", nm))
                elif coef == -1:
                    terms.append(("-", nm))
            text = ""
            for k, (sgn, nm) in enumerate(terms):
                text += (sgn if (sgn == "-" or k > 0) else "") + nm
            labels.append(text)
        else:
            labels.append(None)
    return labels


def decouple_level1(system, method: str = "auto", x_ref=None, p=None,
                    tol: float = KERNEL_TOL, check_states=None) -> DecouplingL1:
    """Constant-basis level-1 decoupling of a standard-form DAE.

    ``method`` is "topological" (incidence-based, circuits only), "numeric"
    (rank-revealing nullspace of M at the reference state), or "auto".
    ``check_states`` optionally verifies kernel constancy of M there.
    """
    n = system.layout.n
    x_ref = np.zeros(n) if x_ref is None else np.asarray(x_ref, dtype=float)
    bound = system.bind(p)
    m0 = bound.mass(x_ref)
    m_norm = np.linalg.norm(m0)

    topology = None
    construction = "numeric-nullspace"
    qmat = pmat = None
    if method == "auto":
        method = "topological" if hasattr(system, "incidence") else "numeric"
    if method == "topological":
        if not hasattr(system, "incidence"):
            raise DecouplingError("topological bases need a circuit-derived system")
        topology = topological_bases(system.incidence)
        qmat, pmat = topology.q, topology.p
        if np.linalg.norm(m0 @ qmat) > tol * (m_norm + 1e-300) or qmat.shape[1] != n - np.linalg.matrix_rank(m0, tol=tol * max(m_norm, 1e-300)):
            qmat = pmat = None  # fall back below, flagged via construction
        else:
            construction = "topological-selection"
    if qmat is None:
        qnum, pnum = nullspace_basis(m0, tol)
        sel = coordinate_aligned(qnum)
        if sel is not None:
            try:
                qmat, pmat = sel, _selection_complement(sel)
                construction = "numeric-selection"
            except ValueError:
                qmat, pmat = qnum, pnum
        else:
            qmat, pmat = qnum, pnum

    if np.linalg.norm(m0 - m0.T) <= 1e-13 * (m_norm + 1e-300):
        wmat, vmat = qmat, pmat
    else:
        wmat, vmat = nullspace_basis(m0.T, tol)
        sel = coordinate_aligned(wmat)
        if sel is not None:
            try:
                wmat, vmat = sel, _selection_complement(sel)
            except ValueError:
                pass
    if wmat.shape[1] != qmat.shape[1]:
        raise DecouplingError("left and right kernel dimensions of M differ")

    cond = float(np.linalg.cond(np.hstack([pmat, qmat])))
    basis = Basis(q=qmat, p=pmat, w=wmat, v=vmat, construction=construction, cond=cond)
    dec = DecouplingL1(system, basis, x_ref, p_ref=p, topology=topology)

    if check_states is not None:
        for xs in check_states:
            ms = bound.mass(np.asarray(xs, dtype=float))
            if np.linalg.norm(ms @ qmat) > tol * (np.linalg.norm(ms) + 1e-300):
                raise AssumptionViolation(
                    "kernel of M varies across the supplied sample states"
                )
    return dec


# ---------------------------------------------------------------------------
# level-2 decoupling


class DecouplingL2:
    """Second dissection step: bases and residuals of the four-way split.

    The level-2 left bases of Mt Qt are state-dependent in general (the
    rectifier's coupled inductor moves them with the port currents), so they
    are exposed as the function :meth:`vt_wt`; for circuits with constant
    mass blocks it returns the same matrices everywhere.
    """

    def __init__(self, l1: DecouplingL1, q_bar, p_bar, w_bar, v_bar, q_tilde, p_tilde,
                 a2, construction: str):
        self.l1 = l1
        self.system = l1.system
        self.q_bar, self.p_bar = q_bar, p_bar
        self.w_bar, self.v_bar = w_bar, v_bar
        self.q_tilde, self.p_tilde = q_tilde, p_tilde
        self.a2 = a2  # constant Wbar^T Kbar_P, frozen at the reference state
        self.construction = construction
        self._a2_ptilde = a2 @ p_tilde
        self._mt_constant = _has_constant_mass(l1.system)
        self._vtwt_cache = None

        self.t2 = np.hstack(
            [
                l1.pmat @ q_tilde,
                l1.pmat @ p_tilde,
                l1.qmat @ p_bar,
                l1.qmat @ q_bar,
            ]
        )
        if self.t2.shape[0] != self.t2.shape[1]:
            raise DecouplingError("level-2 splitting does not cover the state space")
        self.t2inv = np.linalg.inv(self.t2)
        labels = _combination_names(self.t2inv, list(l1.system.layout.names))
        sizes = self.dims
        offsets = np.cumsum((0,) + sizes)
        fallback = ("xtQ", "xtP", "xbP", "xbQ")
        grouped = []
        for g in range(4):
            grouped.append(
                tuple(
                    labels[offsets[g] + i] or f"{fallback[g]}[{i}]"
                    for i in range(sizes[g])
                )
            )
        self.names_xt_q, self.names_xt_p, self.names_xb_p, self.names_xb_q = grouped

    # -- dimensions -----------------------------------------------------

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (
            self.q_tilde.shape[1],
            self.p_tilde.shape[1],
            self.p_bar.shape[1],
            self.q_bar.shape[1],
        )

    # -- coordinates ------------------------------------------------------

    def split(self, x):
        c = self.t2inv @ np.asarray(x, dtype=float)
        nq, npnt, nbp, _ = self.dims
        return (
            c[:nq],
            c[nq : nq + npnt],
            c[nq + npnt : nq + npnt + nbp],
            c[nq + npnt + nbp :],
        )

    def recombine(self, xt_q, xt_p, xb_p, xb_q):
        return self.t2 @ np.concatenate(
            [
                np.atleast_1d(np.asarray(xt_q, dtype=float)),
                np.atleast_1d(np.asarray(xt_p, dtype=float)),
                np.atleast_1d(np.asarray(xb_p, dtype=float)),
                np.atleast_1d(np.asarray(xb_q, dtype=float)),
            ]
        )

    # -- state-dependent left bases of Mt Qt ---------------------------------

    def vt_wt(self, x, p=None, bound=None):
        """Complement/kernel pair (Vt, Wt) of Mt(x) Qt at the given state."""
        if self._mt_constant and self._vtwt_cache is not None:
            return self._vtwt_cache
        mtq = self.l1.m_tilde(x, p=p, bound=bound) @ self.q_tilde
        w_t, v_t = nullspace_basis(mtq.T)
        sel = coordinate_aligned(w_t)
        if sel is not None:
            try:
                v_t = _selection_complement(sel)
                w_t = sel
            except ValueError:
                pass
        pair = (v_t, w_t)
        if self._mt_constant:
            self._vtwt_cache = pair
        return pair

    # -- residuals ------------------------------------------------------

    def residual_xtp(self, xt_p, xt_q, t, p=None, bound=None):
        """Hidden-constraint block determining xt_p (constant for circuits)."""
        b = self.l1._bound(p, bound)
        xt = self.p_tilde @ np.atleast_1d(np.asarray(xt_p, dtype=float)) + self.q_tilde @ np.atleast_1d(
            np.asarray(xt_q, dtype=float)
        )
        return self.a2 @ xt + self.w_bar.T @ self.l1.f_bar(t, bound=b)

    def solve_xtp(self, xt_q, t, p=None, cfg=None, guess=None, bound=None):
        b = self.l1._bound(p, bound)
        n = self.p_tilde.shape[1]
        if n == 0:
            return np.zeros(0)
        x0 = np.zeros(n) if guess is None else np.asarray(guess, dtype=float)
        res = newton_solve(
            lambda y: self.residual_xtp(y, xt_q, t, bound=b),
            lambda y: self._a2_ptilde,
            x0,
            cfg or DEFAULT_NEWTON,
        )
        return res.x

    def solve_xtp_derivative(self, t, p=None, bound=None):
        """Analytic d/dt of xt_p for source-driven circuits (constant blocks)."""
        b = self.l1._bound(p, bound)
        df = b.source_derivative(float(t))
        rhs = self.w_bar.T @ (self.l1.wmat.T @ df)
        return np.linalg.solve(self._a2_ptilde, -rhs)

    def residual_joint(self, xb_p, xb_q, xt_q, xt_p, dxt_p, t, p=None, bound=None):
        """Stacked algebraic systems for (xb_p, xb_q) at known xt and dxt_p."""
        b = self.l1._bound(p, bound)
        xb_p = np.atleast_1d(np.asarray(xb_p, dtype=float))
        xb_q = np.atleast_1d(np.asarray(xb_q, dtype=float))
        xt_q = np.atleast_1d(np.asarray(xt_q, dtype=float))
        xt_p = np.atleast_1d(np.asarray(xt_p, dtype=float))
        dxt_p = np.atleast_1d(np.asarray(dxt_p, dtype=float))
        x = self.recombine(xt_q, xt_p, xb_p, xb_q)
        m = b.mass(x)
        k = b.stiffness(x)
        f = b.source(float(t))
        w1, v1, p1, q1 = self.l1.wmat, self.l1.vmat, self.l1.pmat, self.l1.qmat
        xt = self.p_tilde @ xt_p + self.q_tilde @ xt_q
        f_bar = w1.T @ f
        f_tilde = v1.T @ f
        k_bp = w1.T @ k @ p1
        k_bq = w1.T @ k @ q1
        r_first = self.v_bar.T @ (k_bp @ xt + k_bq @ (self.p_bar @ xb_p) + f_bar)
        m_t = v1.T @ m @ p1
        k_tp = v1.T @ k @ p1
        k_tq = v1.T @ k @ q1
        _, w_t = self.vt_wt(x, bound=b)
        r_second = w_t.T @ (
            m_t @ (self.p_tilde @ dxt_p)
            + k_tp @ xt
            + k_tq @ (self.p_bar @ xb_p + self.q_bar @ xb_q)
            + f_tilde
        )
        return np.concatenate([r_first, r_second])

    def solve_joint(self, xt_q, xt_p, dxt_p, t, p=None, cfg=None, guess=None, bound=None):
        """Jointly solve for (xb_p, xb_q); returns the pair of coordinate vectors."""
        b = self.l1._bound(p, bound)
        nbp, nbq = self.p_bar.shape[1], self.q_bar.shape[1]
        x0 = np.zeros(nbp + nbq) if guess is None else np.asarray(guess, dtype=float)
        res = newton_solve(
            lambda y: self.residual_joint(y[:nbp], y[nbp:], xt_q, xt_p, dxt_p, t, bound=b),
            None,
            x0,
            cfg or DEFAULT_NEWTON,
        )
        return res.x[:nbp], res.x[nbp:]

    def residual_ode(self, dxt_q, xt_q, xt_p, dxt_p, xb_p, xb_q, t, p=None, bound=None):
        """Reduced ODE block in the level-2 differential variables."""
        b = self.l1._bound(p, bound)
        xt_q = np.atleast_1d(np.asarray(xt_q, dtype=float))
        xt_p = np.atleast_1d(np.asarray(xt_p, dtype=float))
        dxt_q = np.atleast_1d(np.asarray(dxt_q, dtype=float))
        dxt_p = np.atleast_1d(np.asarray(dxt_p, dtype=float))
        xb_p = np.atleast_1d(np.asarray(xb_p, dtype=float))
        xb_q = np.atleast_1d(np.asarray(xb_q, dtype=float))
        x = self.recombine(xt_q, xt_p, xb_p, xb_q)
        m = b.mass(x)
        k = b.stiffness(x)
        f = b.source(float(t))
        v1, p1, q1 = self.l1.vmat, self.l1.pmat, self.l1.qmat
        m_t = v1.T @ m @ p1
        k_tp = v1.T @ k @ p1
        k_tq = v1.T @ k @ q1
        v_t, _ = self.vt_wt(x, bound=b)
        xt = self.p_tilde @ xt_p + self.q_tilde @ xt_q
        xb = self.p_bar @ xb_p + self.q_bar @ xb_q
        return v_t.T @ (
            m_t @ (self.q_tilde @ dxt_q + self.p_tilde @ dxt_p)
            + k_tp @ xt
            + k_tq @ xb
            + v1.T @ f
        )

    def reduced_ode_residual(self, dxt_q, xt_q, t, p=None, cfg=None, dt_back: float = 1e-8,
                             dxt_p=None, bound=None):
        """Reduced ODE residual with all algebraic closures solved inline.

        ``dxt_p`` overrides the backward-difference derivative estimate (used
        by the analytic-derivative oracle).
        """
        b = self.l1._bound(p, bound)
        xt_p = self.solve_xtp(xt_q, t, cfg=cfg, bound=b)
        if dxt_p is None:
            xt_p_next = self.solve_xtp(xt_q, t + dt_back, cfg=cfg, bound=b)
            dxt_p = (xt_p_next - xt_p) / dt_back
        xb_p, xb_q = self.solve_joint(xt_q, xt_p, dxt_p, t, cfg=cfg, bound=b)
        return self.residual_ode(dxt_q, xt_q, xt_p, dxt_p, xb_p, xb_q, t, bound=b)

    def k_tq_block(self, x, p=None, bound=None):
        return self.l1.k_tq(x, p=p, bound=bound)


def _has_constant_mass(system) -> bool:
    graph = getattr(system, "graph", None)
    if graph is None:
        return False
    return not any(b.device.kind == "inductive-multiport" for b in graph.branches)


def decouple_level2(l1: DecouplingL1, p=None, tol: float = KERNEL_TOL,
                    tol_reg: float = REGULARITY_TOL) -> DecouplingL2:
    """Second dissection step for an index-2 system.

    Raises :class:`DecouplingError` when the system is index 1 (regular
    constraint block), :class:`AssumptionViolation` for an underdetermined
    DAE, and :class:`IndexTooHigh` when the level-2 block is singular.
    """
    bound = l1.system.bind(p if p is not None else l1.p_ref)
    x_ref = l1.x_ref
    kbq0 = l1.k_bq(x_ref, bound=bound)
    if l1.n_algebraic == 0:
        raise DecouplingError("system is index 1: no algebraic variables to split")
    lo, hi = _sigma_range(kbq0)
    if hi > 0 and lo > tol_reg * hi:
        raise DecouplingError("system is index 1: the algebraic block is regular")

    construction = "numeric-nullspace"
    q_bar = p_bar = w_bar = v_bar = None
    topo = l1._topology
    if topo is not None and topo.q_v is not None and topo.q_r is not None and topo.w_v is not None:
        qvqr = topo.q_v @ topo.q_r
        n_v = topo.w_v.shape[0]
        q_bar = np.zeros((qvqr.shape[0] + n_v, qvqr.shape[1] + topo.w_v.shape[1]))
        q_bar[: qvqr.shape[0], : qvqr.shape[1]] = qvqr
        q_bar[qvqr.shape[0] :, qvqr.shape[1] :] = topo.w_v
        scale = np.linalg.norm(kbq0) + 1e-300
        if (
            q_bar.shape[0] == l1.n_algebraic
            and np.linalg.norm(kbq0 @ q_bar) <= tol * scale
            and np.linalg.norm(q_bar.T @ kbq0) <= tol * scale
        ):
            w_bar = q_bar
            try:
                p_bar = _selection_complement(q_bar)
                v_bar = _selection_complement(w_bar)
                construction = "topological-selection"
            except ValueError:
                q_bar = None
        else:
            q_bar = None
    if q_bar is None:
        q_bar, p_bar, construction = _kernel_and_complement(kbq0, tol)
        w_bar, v_bar, _ = _kernel_and_complement(kbq0.T, tol)
    if w_bar.shape[1] != q_bar.shape[1]:
        raise DecouplingError("left/right kernels of the algebraic block differ in size")

    a2 = w_bar.T @ l1.k_bp(x_ref, bound=bound)
    a2r = np.rint(a2)
    if np.allclose(a2, a2r, atol=1e-9 * (1.0 + np.abs(a2).max(initial=0.0))):
        a2 = a2r
    q_tilde, p_tilde, _ = _kernel_and_complement(a2, tol)

    a2p = a2 @ p_tilde
    if a2p.shape[0] != a2p.shape[1]:
        raise AssumptionViolation(
            f"hidden-constraint block is {a2p.shape[0]}x{a2p.shape[1]}: DAE is underdetermined"
        )
    if a2p.size:
        lo2, hi2 = _sigma_range(a2p)
        if not (hi2 > 0 and lo2 > tol_reg * hi2):
            raise AssumptionViolation("hidden-constraint block singular: DAE is underdetermined")

    dec = DecouplingL2(
        l1,
        q_bar=q_bar,
        p_bar=p_bar,
        w_bar=w_bar,
        v_bar=v_bar,
        q_tilde=q_tilde,
        p_tilde=p_tilde,
        a2=a2,
        construction=construction,
    )
    _, w_t = dec.vt_wt(x_ref, bound=bound)
    block = w_t.T @ l1.k_tq(x_ref, bound=bound) @ q_bar
    if block.size:
        lo3, hi3 = _sigma_range(block)
        if not (hi3 > 0 and lo3 > tol_reg * hi3):
            raise IndexTooHigh("level-2 algebraic block singular: index exceeds 2")
    return dec


# ---------------------------------------------------------------------------
# verification


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    note: str = ""


@dataclass
class VerificationReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            note = f"  ({c.note})" if c.note else ""
            lines.append(f"[{status}] {c.name}: {c.value:.3e} vs {c.tolerance:.1e}{note}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {
                    "name": c.name,
                    "value": c.value,
                    "tolerance": c.tolerance,
                    "passed": c.passed,
                    "note": c.note,
                }
                for c in self.checks
            ],
        }


def verify_decoupling(dec, samples, p=None, tol_kernel: float = KERNEL_TOL,
                      tol_reg: float = REGULARITY_TOL) -> VerificationReport:
    """Certify the regularity and kernel-constancy claims at sample states.

    The paper-level constructions guarantee these properties only at the
    reference state; this makes the verification at user-chosen states an
    explicit, reportable step.
    """
    if isinstance(dec, DecouplingL2):
        return _verify_l2(dec, samples, p, tol_kernel, tol_reg)
    return _verify_l1(dec, samples, p, tol_kernel, tol_reg)


def _verify_l1(dec: DecouplingL1, samples, p, tol_kernel, tol_reg) -> VerificationReport:
    bound = dec.system.bind(p if p is not None else dec.p_ref)
    checks = []
    kern = left = 0.0
    mt_lo, mt_hi = np.inf, 0.0
    for xs in samples:
        xs = np.asarray(xs, dtype=float)
        m = bound.mass(xs)
        scale = np.linalg.norm(m) + 1e-300
        kern = max(kern, np.linalg.norm(m @ dec.qmat) / scale)
        left = max(left, np.linalg.norm(dec.wmat.T @ m) / scale)
        if dec.n_differential:
            lo, hi = _sigma_range(dec.m_tilde(xs, bound=bound))
            mt_lo, mt_hi = min(mt_lo, lo), max(mt_hi, hi)
    checks.append(CheckResult("kernel constancy of M (right)", kern, tol_kernel, kern <= tol_kernel))
    checks.append(CheckResult("kernel constancy of M (left)", left, tol_kernel, left <= tol_kernel))
    if dec.n_differential:
        ratio = mt_lo / mt_hi if mt_hi > 0 else 0.0
        checks.append(
            CheckResult("regularity of the dynamic block", ratio, tol_reg, ratio > tol_reg)
        )
    sig = float(np.linalg.svd(dec.t1, compute_uv=False)[-1])
    checks.append(CheckResult("basis completeness sigma_min([P Q])", sig, 1e-8, sig > 1e-8))
    if dec.n_algebraic:
        lo_all, hi_all = np.inf, 0.0
        for xs in samples:
            lo, hi = _sigma_range(dec.k_bq(np.asarray(xs, dtype=float), bound=bound))
            lo_all, hi_all = min(lo_all, lo), max(hi_all, hi)
        ratio = lo_all / hi_all if hi_all > 0 else 0.0
        checks.append(
            CheckResult(
                "algebraic solvability (index-1 block)",
                ratio,
                tol_reg,
                ratio > tol_reg,
                note="" if ratio > tol_reg else "system is underdetermined or of index >= 2",
            )
        )
    return VerificationReport(checks)


def _verify_l2(dec: DecouplingL2, samples, p, tol_kernel, tol_reg) -> VerificationReport:
    l1 = dec.l1
    bound = l1.system.bind(p if p is not None else l1.p_ref)
    report = _verify_l1(l1, samples, p, tol_kernel, tol_reg)
    checks = [c for c in report.checks if not c.name.startswith("algebraic solvability")]
    kq_kern = wk_kern = a2_drift = wt_kern = 0.0
    blk_lo, blk_hi = np.inf, 0.0
    a2p_lo, a2p_hi = np.inf, 0.0
    vmq_lo, vmq_hi = np.inf, 0.0
    for xs in samples:
        xs = np.asarray(xs, dtype=float)
        kbq = l1.k_bq(xs, bound=bound)
        scale = np.linalg.norm(kbq) + 1e-300
        kq_kern = max(kq_kern, np.linalg.norm(kbq @ dec.q_bar) / scale)
        wk_kern = max(wk_kern, np.linalg.norm(dec.w_bar.T @ kbq) / scale)
        kbp = l1.k_bp(xs, bound=bound)
        a2_drift = max(
            a2_drift,
            np.linalg.norm(dec.w_bar.T @ kbp - dec.a2) / (np.linalg.norm(dec.a2) + 1e-300),
        )
        v_t, w_t = dec.vt_wt(xs, bound=bound)
        mtq = l1.m_tilde(xs, bound=bound) @ dec.q_tilde
        mscale = np.linalg.norm(mtq) + 1e-300
        wt_kern = max(wt_kern, np.linalg.norm(w_t.T @ mtq) / mscale)
        lo, hi = _sigma_range(v_t.T @ mtq)
        vmq_lo, vmq_hi = min(vmq_lo, lo), max(vmq_hi, hi)
        lo, hi = _sigma_range(w_t.T @ l1.k_tq(xs, bound=bound) @ dec.q_bar)
        blk_lo, blk_hi = min(blk_lo, lo), max(blk_hi, hi)
        if dec.p_tilde.shape[1]:
            lo, hi = _sigma_range((dec.w_bar.T @ kbp) @ dec.p_tilde)
            a2p_lo, a2p_hi = min(a2p_lo, lo), max(a2p_hi, hi)
    checks.append(
        CheckResult("kernel of the constraint block (right)", kq_kern, tol_kernel, kq_kern <= tol_kernel)
    )
    checks.append(
        CheckResult("kernel of the constraint block (left)", wk_kern, tol_kernel, wk_kern <= tol_kernel)
    )
    checks.append(
        CheckResult("constancy of the hidden-constraint matrix", a2_drift, tol_kernel, a2_drift <= tol_kernel)
    )
    checks.append(
        CheckResult("left kernel of the reduced mass block", wt_kern, tol_kernel, wt_kern <= tol_kernel,
                    note="state-dependent left bases re-evaluated per state")
    )
    for label, lo_all, hi_all in (
        ("regularity of the reduced mass block", vmq_lo, vmq_hi),
        ("regularity of the level-2 algebraic block", blk_lo, blk_hi),
        ("regularity of the hidden-constraint block", a2p_lo, a2p_hi),
    ):
        if hi_all > 0 and np.isfinite(lo_all):
            ratio = lo_all / hi_all
            checks.append(CheckResult(label, ratio, tol_reg, ratio > tol_reg))
    return VerificationReport(checks)
