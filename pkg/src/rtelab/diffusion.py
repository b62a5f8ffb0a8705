"""Diffusion-limit solver on the unit disk and the entry predictor built on it.

The elliptic problem ``-(1/(d sigma_s)) Lap(Phi) + sigma_a Phi = S`` with
Dirichlet data is discretized by second-order flux differences in ``r`` on
a cell-midpoint grid (the axis is a zero-flux face) and spectral
differentiation in ``theta``.  The resulting block-tridiagonal system is
solved by a banded LU, or mode by mode when ``sigma_a`` is radial.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from numpy.typing import ArrayLike, NDArray

from .geometry import HarmonicBasis, HarmonicMode, PolarGrid, harmonic_mode, radial_interpolation
from .transport import AbsorptionField, Medium, TransportDiscretization, TransportSolver

__all__ = [
    "DiffusionField",
    "DiffusionOperator",
    "solve_diffusion",
    "diffusion_entry_prediction",
    "diffusion_prediction_table",
    "diffusion_limit_report",
    "DiffusionLimitRecord",
]

FloatArray = NDArray[np.float64]
DIM = 2


@dataclass(frozen=True)
class DiffusionField:
    """Nodal values on a midpoint polar grid plus the data that produced them."""

    values: FloatArray
    grid: PolarGrid
    dirichlet: FloatArray
    source_label: str = ""
    residual: float = 0.0

    def to_csv(self, path) -> None:
        R, T = self.grid.mesh()
        with open(path, "w") as fh:
            fh.write("r,theta,value\n")
            for r, t, v in zip(R.ravel(), T.ravel(), self.values.ravel()):
                fh.write(f"{r:.17g},{t:.17g},{v:.17g}\n")


def _spectral_d2(n: int) -> FloatArray:
    """Second-derivative matrix of trigonometric interpolation on ``n`` nodes."""
    k = np.fft.fftfreq(n, 1.0 / n)
    sym = -(k**2)
    sym[n // 2] = -((n // 2) ** 2)
    col = np.fft.ifft(sym).real
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return col[idx]


class DiffusionOperator:
    """Discrete ``-(1/(d sigma_s)) Lap + sigma_a`` with Dirichlet data at ``r = 1``."""

    def __init__(self, sigma_a: AbsorptionField, sigma_s: float = 1.0, n_r: int = 200, n_theta: int = 96):
        self.grid = PolarGrid(n_r, n_theta, "midpoint")
        self.sigma_s = sigma_s
        self.sigma_a = sigma_a
        X, Y = self.grid.points()
        self.absorption = sigma_a(X, Y)
        self.coef = 1.0 / (DIM * sigma_s)
        h = 1.0 / n_r
        r = self.grid.r
        self.h = h
        self.lower = np.zeros(n_r)  # coupling to i-1
        self.upper = np.zeros(n_r)  # coupling to i+1
        faces = np.arange(n_r + 1) * h
        self.lower[1:] = -self.coef * faces[1:-1] / (r[1:] * h * h)
        self.upper[:-1] = -self.coef * faces[1:-1] / (r[:-1] * h * h)
        diag = self.coef * (faces[:-1] + faces[1:]) / (r * h * h)
        # ghost node Phi_{n+1} = 2 g - Phi_n
        self.ghost = self.coef * faces[-1] / (r[-1] * h * h)
        diag[-1] += self.ghost
        self.radial_diag = diag
        self.d2 = _spectral_d2(n_theta)
        self._banded = None

    def row_norm(self) -> FloatArray:
        """Row-wise absolute sums of the discrete operator."""
        ang = self.coef * np.abs(self.d2).sum(axis=1)[None, :] / self.grid.r[:, None] ** 2
        rad = (self.radial_diag + np.abs(self.lower) + np.abs(self.upper))[:, None]
        return rad + ang + np.abs(self.absorption)

    @property
    def radial_only(self) -> bool:
        return self.sigma_a.is_zero or self.sigma_a.radial

    def apply(self, phi: FloatArray, dirichlet: FloatArray | None = None) -> FloatArray:
        """Operator applied to interior values with the given boundary data."""
        out = self.radial_diag[:, None] * phi
        out[1:] += self.lower[1:, None] * phi[:-1]
        out[:-1] += self.upper[:-1, None] * phi[1:]
        out -= self.coef * (phi @ self.d2.T) / self.grid.r[:, None] ** 2
        out += self.absorption * phi
        if dirichlet is not None:
            out[-1] -= 2.0 * self.ghost * dirichlet
        return out

    def _band(self):
        if self._banded is None:
            n_r, n_t = self.grid.shape
            N = n_r * n_t
            bw = n_t
            ab = np.zeros((2 * bw + 1, N))
            r = self.grid.r
            for i in range(n_r):
                blk = -self.coef * self.d2 / r[i] ** 2
                blk[np.diag_indices(n_t)] += self.radial_diag[i] + self.absorption[i]
                rows = i * n_t + np.arange(n_t)
                a = np.arange(n_t)
                ab[bw + a[:, None] - a[None, :], rows[None, :]] = blk
                if i > 0:
                    ab[bw - n_t, rows] = self.upper[i - 1]  # entry (row i-1, col i)
                if i < n_r - 1:
                    ab[bw + n_t, rows] = self.lower[i + 1]  # entry (row i+1, col i)
            self._banded = ab
        return self._banded

    def solve(self, source: FloatArray, dirichlet: FloatArray) -> FloatArray:
        n_r, n_t = self.grid.shape
        rhs = np.array(source, dtype=float, copy=True)
        rhs[-1] += 2.0 * self.ghost * dirichlet
        if self.radial_only:
            return self._solve_modes(rhs)
        ab = self._band()
        sol = sla.solve_banded((n_t, n_t), ab, rhs.ravel())
        return sol.reshape(n_r, n_t)

    def _solve_modes(self, rhs: FloatArray) -> FloatArray:
        n_r, n_t = self.grid.shape
        F = np.fft.fft(rhs, axis=1)
        k = np.fft.fftfreq(n_t, 1.0 / n_t)
        k2 = k**2
        k2[n_t // 2] = (n_t // 2) ** 2
        sig = self.absorption[:, 0]
        out = np.empty_like(F)
        for n in range(n_t):
            ab = np.zeros((3, n_r))
            ab[0, 1:] = self.upper[:-1]
            ab[1] = self.radial_diag + self.coef * k2[n] / self.grid.r**2 + sig
            ab[2, :-1] = self.lower[1:]
            out[:, n] = sla.solve_banded((1, 1), ab, F[:, n])
        return np.fft.ifft(out, axis=1).real


def solve_diffusion(
    sigma_a: AbsorptionField,
    sigma_s: float,
    source: Callable[[FloatArray, FloatArray], FloatArray] | ArrayLike | float,
    dirichlet: Callable[[FloatArray], FloatArray] | HarmonicMode | float,
    n_r: int = 200,
    n_theta: int = 96,
    operator: DiffusionOperator | None = None,
) -> DiffusionField:
    """Solve ``-(1/(2 sigma_s)) Lap(Phi) + sigma_a Phi = source`` with Dirichlet data.

    Parameters
    ----------
    source : callable ``(r, theta) -> values``, array on the grid, or scalar
    dirichlet : callable ``theta -> values``, HarmonicMode, or scalar
    """
    op = operator or DiffusionOperator(sigma_a, sigma_s, n_r, n_theta)
    R, T = op.grid.mesh()
    if callable(source):
        S = np.asarray(source(R, T), dtype=float)
    else:
        S = np.broadcast_to(np.asarray(source, dtype=float), R.shape).astype(float)
    th = op.grid.theta
    if isinstance(dirichlet, HarmonicMode):
        g = dirichlet.boundary(th)
    elif callable(dirichlet):
        g = np.asarray(dirichlet(th), dtype=float)
    else:
        g = np.full(th.shape, float(dirichlet))
    phi = op.solve(S, g)
    res = op.apply(phi, g) - S
    # normwise backward error: |A phi - S| / (|A| |phi| + |S|)
    scale = op.row_norm().max() * float(np.abs(phi).max()) + float(np.abs(S).max()) + 2 * op.ghost * float(np.abs(g).max())
    rel = float(np.abs(res).max()) / max(scale, 1e-300)
    if not np.isfinite(rel) or rel > 1e-8:
        raise RuntimeError(f"diffusion solve residual {rel:.3e} exceeds 1e-8")
    return DiffusionField(phi, op.grid, g, getattr(source, "__name__", "array"), rel)


# --------------------------------------------------------------------------
# entry predictor


def _corrector(op: DiffusionOperator, mode: HarmonicMode) -> tuple[FloatArray, FloatArray]:
    R, T = op.grid.mesh()
    U0 = mode.extension_polar(R, T)
    field = solve_diffusion(op.sigma_a, op.sigma_s, -op.absorption * U0, 0.0, operator=op)
    return U0, field.values


def _gradient_pairing(op: DiffusionOperator, test: HarmonicMode, phi: FloatArray) -> float:
    """``int grad(test) . grad(phi)`` with phi extended by zero Dirichlet data."""
    grid = op.grid
    h = op.h
    r = grid.r
    dth = 2.0 * np.pi / grid.n_theta
    # radial part on faces r_{i+1/2}, including the boundary face (ghost value -phi)
    faces = (np.arange(grid.n_r) + 1) * h
    ext = np.vstack([phi, -phi[-1:]])
    dphi = (ext[1:] - ext[:-1]) / h
    gr, _ = test.gradient_polar(faces[:, None], grid.theta[None, :])
    # interior faces cover a full cell spacing, the boundary face only the last half cell
    fw = np.full(grid.n_r, h)
    fw[-1] = 0.5 * h
    radial = np.sum(gr * dphi * (faces * fw)[:, None]) * dth
    # angular part at cell centres with spectral derivative
    k = np.fft.fftfreq(grid.n_theta, 1.0 / grid.n_theta)
    k[grid.n_theta // 2] = 0.0
    dphi_t = np.fft.ifft(1j * k * np.fft.fft(phi, axis=1), axis=1).real / r[:, None]
    _, gt = test.gradient_polar(r[:, None], grid.theta[None, :])
    angular = np.sum(gt * dphi_t * r[:, None]) * h * dth
    return float(radial + angular)


def _prediction_table_single(op: DiffusionOperator, basis: HarmonicBasis) -> FloatArray:
    modes = basis.modes()
    R, T = op.grid.mesh()
    W = op.grid.weights
    n = basis.size
    out = np.zeros((n, n))
    ext = np.array([m.extension_polar(R, T) for m in modes])
    for a, src in enumerate(modes):
        U0, phi = _corrector(op, src)
        first = -np.einsum("bij,ij->b", ext, op.absorption * (U0 + phi) * W)
        second = np.array([_gradient_pairing(op, t, phi) for t in modes]) * op.coef
        out[a] = first - second
    return out


def diffusion_prediction_table(sigma_a: AbsorptionField, max_order: int, sigma_s: float = 1.0,
                               n_r: int = 200, n_theta: int = 96, richardson: bool = True) -> FloatArray:
    """Diffusion-limit predictions ``a[(m,j), (n,k)]`` for source ``(m,j)`` and test ``(n,k)``.

    With ``richardson`` the table is extrapolated from grids ``h`` and ``h/2``.
    """
    basis = HarmonicBasis(max_order)
    coarse = _prediction_table_single(DiffusionOperator(sigma_a, sigma_s, n_r, n_theta), basis)
    if not richardson:
        return coarse
    fine = _prediction_table_single(DiffusionOperator(sigma_a, sigma_s, 2 * n_r, n_theta), basis)
    return (4.0 * fine - coarse) / 3.0


def diffusion_entry_prediction(sigma_a: AbsorptionField, source: tuple[int, int], test: tuple[int, int],
                               sigma_s: float = 1.0, n_r: int = 200, n_theta: int = 96,
                               richardson: bool = True) -> float:
    """Diffusion-limit value of the entry with source ``(m, j)`` and test ``(n, k)``.

    ``-int sigma_a Y_nk (U0 + Phi) - (1/(d sigma_s)) int grad Y_nk . grad Phi``
    with ``U0 = r^m Y_mj`` and ``Phi`` the zero-Dirichlet corrector.
    """
    src, tst = harmonic_mode(*source), harmonic_mode(*test)

    def single(nr):
        op = DiffusionOperator(sigma_a, sigma_s, nr, n_theta)
        R, T = op.grid.mesh()
        U0, phi = _corrector(op, src)
        first = -op.grid.integrate(op.absorption * tst.extension_polar(R, T) * (U0 + phi))
        return float(first - op.coef * _gradient_pairing(op, tst, phi))

    if sigma_a.is_zero:
        return 0.0
    coarse = single(n_r)
    if not richardson:
        return coarse
    return (4.0 * single(2 * n_r) - coarse) / 3.0


# --------------------------------------------------------------------------
# flux comparison


@dataclass(frozen=True)
class DiffusionLimitRecord:
    """Interior L2 distance between transport flux and the diffusion limit."""

    m: int
    epsilons: tuple[float, ...]
    errors: tuple[float, ...]
    interior_radius: float

    @property
    def ratios(self) -> tuple[float, ...]:
        e = self.errors
        return tuple(e[k + 1] / e[k] if e[k] > 0 else np.nan for k in range(len(e) - 1))


def diffusion_limit_report(
    sigma_a: AbsorptionField,
    epsilons: float | list[float],
    m: int,
    j: int = 1,
    sigma_s: float = 1.0,
    disc: TransportDiscretization | None = None,
    interior_radius: float = 0.8,
    n_r: int = 200,
) -> DiffusionLimitRecord:
    """Compare ``<u_m>`` with ``U0 + Phi`` on ``|x| <= interior_radius``.

    Transport values are interpolated radially to the diffusion grid radii
    (the angular nodes coincide).
    """
    eps_list = [epsilons] if np.isscalar(epsilons) else list(epsilons)
    disc = disc or TransportDiscretization()
    mode = harmonic_mode(m, j)
    op = DiffusionOperator(sigma_a, sigma_s, n_r, disc.n_theta)
    U0, phi = _corrector(op, mode)
    limit = U0 + phi
    inside = op.grid.r <= interior_radius
    rr = op.grid.r[inside]
    lp, lm = radial_interpolation(disc.n_r, rr)
    half = disc.n_theta // 2
    errors = []
    for eps in eps_list:
        solver = TransportSolver(Medium(eps, sigma_s, sigma_a), disc, need_current=False)
        u = solver.solve(mode)[0]
        u_int = lp @ u + lm @ np.roll(u, -half, axis=1)
        diff = u_int - limit[inside]
        errors.append(float(np.sqrt(np.sum(diff**2 * op.grid.weights[inside]))))
    return DiffusionLimitRecord(m, tuple(eps_list), tuple(errors), interior_radius)
