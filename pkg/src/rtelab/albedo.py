"""Matrix of the albedo perturbation in the boundary harmonic basis.

Entries ``a[(m,j),(n,k)] = <Gamma Y_mj, Y_nk>`` of
``Gamma(sigma_a) = Lambda_{sigma_a} - Lambda_0`` are evaluated from volume
integrals: an absorption-weighted flux term and a current term built from
the difference of two transport solves.  The direct form solves with data
``Y_mj`` and tests against the harmonic extension of ``Y_nk``; the adjoint
form solves the velocity-reversed problem with data ``Y_nk`` and tests
against the extension of ``Y_mj``.
"""

from __future__ import annotations

import hashlib
import io
import json
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .geometry import HarmonicBasis, HarmonicMode, harmonic_mode
from .transport import Medium, TransportDiscretization, TransportSolver

__all__ = [
    "GammaMatrix",
    "NormReport",
    "DecayReport",
    "EntryMoments",
    "compute_moments",
    "gamma_entry",
    "assemble_gamma",
    "xs_seminorm",
    "hs_operator_norm",
    "norm_chain_holds",
    "weight_vector",
    "entry_decay_report",
    "reciprocity_error",
    "crossover_order",
    "read_gamma_csv",
]

FloatArray = NDArray[np.float64]
DIM = 2
NOISE_FLOOR = 1e-8


# --------------------------------------------------------------------------
# moments of forward solves


@dataclass(frozen=True)
class EntryMoments:
    """Flux and current of ``u`` and of the background ``u0`` for several sources.

    Arrays have shape ``(n_src, n_r, n_theta)``; currents are polar
    components ``(radial, tangential)``.
    """

    modes: tuple[HarmonicMode, ...]
    flux: FloatArray
    current: tuple[FloatArray, FloatArray]
    current0: tuple[FloatArray, FloatArray]
    solver: TransportSolver

    @property
    def delta_current(self) -> tuple[FloatArray, FloatArray]:
        return self.current[0] - self.current0[0], self.current[1] - self.current0[1]


def compute_moments(medium: Medium, modes: Sequence[HarmonicMode],
                    disc: TransportDiscretization | None = None,
                    solver: TransportSolver | None = None,
                    background: TransportSolver | None = None) -> EntryMoments:
    """Solve with and without absorption for every source and keep the moments."""
    modes = tuple(modes)
    solver = solver or TransportSolver(medium, disc)
    background = background or TransportSolver(medium.background(), solver.disc)
    u = solver.solve(list(modes))
    u0 = background.solve(list(modes))
    return EntryMoments(modes, u, solver.current(u, list(modes)), background.current(u0, list(modes)), solver)


def _test_data(grid, modes: Sequence[HarmonicMode]):
    R, T = grid.mesh()
    ext = np.array([m.extension_polar(R, T) for m in modes])
    grads = [m.gradient_polar(R, T) for m in modes]
    return ext, np.array([g[0] for g in grads]), np.array([g[1] for g in grads])


def _direct_addends(mom: EntryMoments, tests: Sequence[HarmonicMode]) -> tuple[FloatArray, FloatArray]:
    """Addends for (source index, test index): flux term and current term."""
    grid = mom.solver.grid
    med = mom.solver.medium
    X, Y = grid.points()
    sw = med.sigma_a(X, Y) * grid.weights
    ext, gR, gT = _test_data(grid, tests)
    dJr, dJt = mom.delta_current
    a1 = -np.einsum("sij,tij,ij->st", mom.flux, ext, sw)
    a2 = (np.einsum("sij,tij,ij->st", dJr, gR, grid.weights)
          + np.einsum("sij,tij,ij->st", dJt, gT, grid.weights)) / med.epsilon
    return a1, a2


def _adjoint_addends(mom: EntryMoments, tests: Sequence[HarmonicMode]) -> tuple[FloatArray, FloatArray]:
    """Adjoint-form addends for (test index, source index) of the matrix.

    The adjoint solution with outgoing data ``g`` is ``w(x, v) = u_g(x, -v)``
    for the forward solution ``u_g`` with incoming data ``g``.  Hence
    ``<w> = <u_g>`` and the adjoint current is ``-J[u_g]``; the entry reads
    ``-int sigma_a f_ext <w> - (1/eps) int grad f_ext . (J_w - J_w0)``.
    Returned arrays are indexed ``[adjoint data g, test f]``.
    """
    grid = mom.solver.grid
    med = mom.solver.medium
    X, Y = grid.points()
    sw = med.sigma_a(X, Y) * grid.weights
    ext, gR, gT = _test_data(grid, tests)
    w_flux = mom.flux
    dJr, dJt = mom.delta_current
    w_Jr, w_Jt = -dJr, -dJt
    a1 = -np.einsum("sij,tij,ij->st", w_flux, ext, sw)
    a2 = -(np.einsum("sij,tij,ij->st", w_Jr, gR, grid.weights)
           + np.einsum("sij,tij,ij->st", w_Jt, gT, grid.weights)) / med.epsilon
    return a1, a2


def gamma_entry(medium: Medium, source: tuple[int, int], test: tuple[int, int],
                disc: TransportDiscretization | None = None,
                representation: str = "auto") -> tuple[float, float, float]:
    """Entry ``<Gamma Y_mj, Y_nk>`` as ``(value, addend_1, addend_2)``.

    ``representation="auto"`` uses the adjoint form when ``m >= n`` and the
    direct form when ``n > m``.  Basis functions are real, so complex
    conjugation is the identity.
    """
    mj, nk = harmonic_mode(*source), harmonic_mode(*test)
    rep = representation
    if rep == "auto":
        rep = "adjoint" if mj.m >= nk.m else "direct"
    if rep == "direct":
        mom = compute_moments(medium, [mj], disc)
        a1, a2 = _direct_addends(mom, [nk])
    elif rep == "adjoint":
        mom = compute_moments(medium, [nk], disc)
        a1, a2 = _adjoint_addends(mom, [mj])
    else:
        raise ValueError(f"unknown representation {representation!r}")
    v1, v2 = float(a1[0, 0]), float(a2[0, 0])
    return v1 + v2, v1, v2


# --------------------------------------------------------------------------
# the matrix


@dataclass(frozen=True)
class GammaMatrix:
    """Truncated matrix of ``Gamma`` with both addends and the provenance of every entry.

    ``values[a, b]`` is the entry with source index ``a = (m, j)`` and test
    index ``b = (n, k)`` in the order of ``HarmonicBasis.indices``.
    """

    max_order: int
    values: FloatArray
    addend1: FloatArray
    addend2: FloatArray
    representation: NDArray[np.str_]
    epsilon: float
    sigma_s: float
    medium_label: str
    metadata: dict = field(default_factory=dict)
    direct: tuple[FloatArray, FloatArray] | None = None
    adjoint: tuple[FloatArray, FloatArray] | None = None

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite entries in GammaMatrix")

    @property
    def basis(self) -> HarmonicBasis:
        return HarmonicBasis(self.max_order)

    @property
    def orders(self) -> NDArray[np.int64]:
        return self.basis.orders

    def entry(self, source: tuple[int, int], test: tuple[int, int]) -> float:
        b = self.basis
        return float(self.values[b.index_of(*source), b.index_of(*test)])

    def __sub__(self, other: GammaMatrix) -> GammaMatrix:
        if self.max_order != other.max_order:
            raise ValueError("truncation orders differ")
        return GammaMatrix(
            self.max_order, self.values - other.values, self.addend1 - other.addend1,
            self.addend2 - other.addend2, self.representation, self.epsilon, self.sigma_s,
            f"{self.medium_label} - {other.medium_label}", dict(self.metadata),
        )

    def rows(self):
        for a, (m, j) in enumerate(self.basis.indices):
            for b, (n, k) in enumerate(self.basis.indices):
                yield m, j, n, k, self.addend1[a, b], self.addend2[a, b], self.values[a, b], self.representation[a, b]

    def csv_body(self) -> str:
        buf = io.StringIO()
        buf.write("m,j,n,k,addend1,addend2,value,representation\n")
        for m, j, n, k, a1, a2, v, rep in self.rows():
            buf.write(f"{m},{j},{n},{k},{a1:.17g},{a2:.17g},{v:.17g},{rep}\n")
        return buf.getvalue()

    def header(self, s: float = 4.0, extra: dict | None = None) -> dict:
        body = self.csv_body()
        head = {
            "epsilon": self.epsilon,
            "sigma_s": self.sigma_s,
            "L": self.max_order,
            "s": s,
            "medium": self.medium_label,
            "grid": self.metadata.get("grid", {}),
            "content_sha256": hashlib.sha256(body.encode()).hexdigest(),
        }
        if extra:
            head.update(extra)
        return head

    def to_csv(self, path, s: float = 4.0, extra: dict | None = None) -> dict:
        """Write ``# {json header}`` followed by the entry table; returns the header."""
        head = self.header(s, extra)
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(head, sort_keys=True) + "\n")
            fh.write(self.csv_body())
        return head


def read_gamma_csv(path) -> tuple[dict, GammaMatrix]:
    with open(path) as fh:
        first = fh.readline()
        head = json.loads(first[2:]) if first.startswith("# ") else {}
        body = fh.read() if head else first + fh.read()
    lines = body.strip().splitlines()[1:]
    L = int(head.get("L", max(int(x.split(",")[0]) for x in lines)))
    basis = HarmonicBasis(L)
    n = basis.size
    vals, a1, a2 = np.zeros((n, n)), np.zeros((n, n)), np.zeros((n, n))
    rep = np.empty((n, n), dtype="<U7")
    for line in lines:
        m, j, nn, k, x1, x2, v, r = line.split(",")
        a, b = basis.index_of(int(m), int(j)), basis.index_of(int(nn), int(k))
        a1[a, b], a2[a, b], vals[a, b], rep[a, b] = float(x1), float(x2), float(v), r
    return head, GammaMatrix(L, vals, a1, a2, rep, head.get("epsilon", np.nan), head.get("sigma_s", np.nan),
                             head.get("medium", ""), {"grid": head.get("grid", {})})


def assemble_gamma(medium: Medium, max_order: int, disc: TransportDiscretization | None = None,
                   moments: EntryMoments | None = None) -> GammaMatrix:
    """Full table for ``max(m, n) <= L`` with the entrywise representation rule.

    Two solves per basis function (with and without absorption) are shared
    by all entries.  Any failure aborts the whole matrix.
    """
    basis = HarmonicBasis(max_order)
    modes = basis.modes()
    disc = disc or TransportDiscretization()
    mom = moments or compute_moments(medium, modes, disc)
    d1, d2 = _direct_addends(mom, modes)  # [source, test]
    w1, w2 = _adjoint_addends(mom, modes)  # [data g, test f] -> entry (f, g)
    adj1, adj2 = w1.T, w2.T  # [source f, test g]
    orders = basis.orders
    use_adj = orders[:, None] >= orders[None, :]
    a1 = np.where(use_adj, adj1, d1)
    a2 = np.where(use_adj, adj2, d2)
    rep = np.where(use_adj, "adjoint", "direct")
    return GammaMatrix(max_order, a1 + a2, a1, a2, rep, medium.epsilon, medium.sigma_s,
                       medium.sigma_a.label, {"grid": _grid_meta(disc)}, (d1, d2), (adj1, adj2))


def _grid_meta(disc: TransportDiscretization) -> dict:
    return {"n_r": disc.n_r, "n_theta": disc.n_theta, "n_dir": disc.n_dir,
            "panel_length": disc.panel_length, "nodes_per_panel": disc.nodes_per_panel}


def reciprocity_error(matrix: GammaMatrix, max_order: int | None = None, rtol: float = 1e-3,
                      atol: float = NOISE_FLOOR) -> tuple[float, bool]:
    """Largest direct-vs-adjoint mismatch relative to ``max(rtol |a|, atol)``.

    Returns the worst ratio and whether every entry is within tolerance.
    """
    if matrix.direct is None or matrix.adjoint is None:
        raise ValueError("matrix carries no direct/adjoint tables")
    D = matrix.direct[0] + matrix.direct[1]
    A = matrix.adjoint[0] + matrix.adjoint[1]
    if max_order is not None:
        keep = matrix.orders <= max_order
        D, A = D[np.ix_(keep, keep)], A[np.ix_(keep, keep)]
    tol = np.maximum(rtol * np.maximum(np.abs(D), np.abs(A)), atol)
    ratio = np.abs(D - A) / tol
    worst = float(ratio.max()) if ratio.size else 0.0
    return worst, worst <= 1.0


# --------------------------------------------------------------------------
# norms


@dataclass(frozen=True)
class NormReport:
    """Weighted operator-norm data of a truncated matrix."""

    xs_seminorm: float
    spectral_norm: float
    singular_values: FloatArray
    s: float
    tau: float

    @property
    def chain_bound(self) -> float:
        return 4.0 * np.sqrt(2.0) * self.xs_seminorm


def weight_vector(max_order: int, s: float) -> FloatArray:
    return (1.0 + HarmonicBasis(max_order).orders) ** (-float(s))


def _check_s(s: float) -> None:
    if s <= DIM / 2:
        raise ValueError(f"s must exceed d/2 = {DIM / 2}, got {s}")


def _values(matrix) -> tuple[FloatArray, int]:
    if isinstance(matrix, GammaMatrix):
        return matrix.values, matrix.max_order
    A = np.asarray(matrix, dtype=float)
    return A, (A.shape[0] - 1) // 2


def xs_seminorm(matrix: GammaMatrix | FloatArray, s: float = 4.0) -> float:
    """``sup (1 + max(m, n))^{d/2 - s} |a_mjnk|`` over the truncated table."""
    _check_s(s)
    A, L = _values(matrix)
    o = HarmonicBasis(L).orders
    w = (1.0 + np.maximum.outer(o, o)) ** (DIM / 2 - s)
    return float(np.max(w * np.abs(A))) if A.size else 0.0


def hs_operator_norm(matrix: GammaMatrix | FloatArray, s: float = 4.0) -> NormReport:
    """Singular values of ``W A W`` with ``W = diag((1 + m)^{-s})``."""
    _check_s(s)
    A, L = _values(matrix)
    w = weight_vector(L, s)
    try:
        sv = np.linalg.svd(w[:, None] * A * w[None, :], compute_uv=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise RuntimeError(f"SVD failed: {exc}") from exc
    return NormReport(xs_seminorm(A, s), float(sv[0]) if sv.size else 0.0, sv, float(s), (DIM + 4) / 2 - s)


def norm_chain_holds(matrix: GammaMatrix | FloatArray, s: float = 4.0) -> bool:
    rep = hs_operator_norm(matrix, s)
    return rep.spectral_norm <= rep.chain_bound


# --------------------------------------------------------------------------
# decay analysis


@dataclass(frozen=True)
class DecayReport:
    """Fits of the entry bound ``C0 |sigma_a| (1+l)(r0^l + eps (1+l))``."""

    m1_slope: float
    log_r0: float
    usable_orders: tuple[int, ...]
    m2_exponent: float | None
    m2_ratio: float | None
    m2_entry: tuple[int, int, int, int] | None
    crossover: float
    c0_fit: float


def crossover_order(r0: float, eps: float) -> float:
    """Real ``l*`` where ``r0^l = eps (1 + l)``."""
    from scipy.optimize import brentq

    g = lambda l: l * np.log(r0) - np.log(eps) - np.log1p(l)
    if g(0.0) <= 0:
        return 0.0
    hi = 1.0
    while g(hi) > 0:
        hi *= 2.0
    return float(brentq(g, 0.0, hi))


def entry_decay_report(matrix: GammaMatrix, r0: float, epsilon: float | None = None,
                       family: Sequence[GammaMatrix] = (), orders: tuple[int, int] = (2, 10),
                       m2_order: int | None = None, sup_sigma: float = 1.0) -> DecayReport:
    """Fit the flux-term decay and the current-term scaling.

    Parameters
    ----------
    matrix : GammaMatrix
        Supplies the diagonal flux-term entries for the slope of
        ``log(|addend_1| / (1 + l))`` against ``l``.
    family : sequence of GammaMatrix
        Matrices at several ``epsilon`` (same medium) for the current-term
        exponent; the entry at order ``m2_order`` with the largest current
        term is tracked.
    """
    eps = matrix.epsilon if epsilon is None else epsilon
    basis = matrix.basis
    lo, hi = orders
    ls, ys = [], []
    for l in range(lo, min(hi, matrix.max_order) + 1):
        for j in (1, 2):
            i = basis.index_of(l, j)
            v = abs(matrix.addend1[i, i])
            if v > NOISE_FLOOR:
                ls.append(l)
                ys.append(np.log(v / (1 + l)))
    usable = tuple(sorted(set(ls)))
    if len(usable) < 3:
        raise ValueError(f"flux-term entries above the noise floor only at orders {usable}")
    slope = float(np.polyfit(ls, ys, 1)[0])

    m2_exp = m2_ratio = None
    m2_entry = None
    if family:
        fam = sorted(family, key=lambda g: g.epsilon)
        l2 = m2_order if m2_order is not None else fam[0].max_order
        o = basis.orders
        sel = np.maximum.outer(o, o) == l2
        ref = np.abs(fam[-1].addend2) * sel
        a, b = np.unravel_index(np.argmax(ref), ref.shape)
        m2_entry = basis.indices[a] + basis.indices[b]
        e = np.array([g.epsilon for g in fam])
        v = np.array([abs(g.addend2[a, b]) for g in fam])
        m2_exp = float(np.polyfit(np.log(e), np.log(v), 1)[0])
        m2_ratio = float(v[-1] / v[0]) if len(fam) >= 2 else None

    o = basis.orders
    l = np.maximum.outer(o, o)
    env = sup_sigma * (1 + l) * (r0**l + eps * (1 + l))
    c0 = float(np.max(np.abs(matrix.values) / env))
    return DecayReport(slope, float(np.log(r0)), usable, m2_exp, m2_ratio, m2_entry, crossover_order(r0, eps), c0)
