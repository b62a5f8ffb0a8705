"""Disk geometry, boundary harmonics, quadrature grids and ray fans.

Everything here is two-dimensional: the domain is the unit disk and the
boundary basis is the real Fourier basis on the unit circle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "DiskDomain",
    "HarmonicBasis",
    "HarmonicMode",
    "PolarGrid",
    "RayFan",
    "boundary_exit_distance",
    "harmonic_mode",
    "chebyshev_radial_weights",
    "radial_interpolation",
    "trig_interpolation",
    "exp_gauss_rules",
    "ray_fan",
    "direction_set",
]

FloatArray = NDArray[np.float64]


@dataclass(frozen=True)
class DiskDomain:
    """Unit disk with an interior support ball ``K = B(0, r0)``."""

    r0: float = 0.5
    radius: float = 1.0

    def __post_init__(self) -> None:
        if self.radius != 1.0:
            raise ValueError("the domain radius is fixed to 1")
        if not 0.0 < self.r0 < 1.0:
            raise ValueError(f"r0 must lie in (0, 1), got {self.r0}")

    def in_support(self, x: ArrayLike, y: ArrayLike) -> NDArray[np.bool_]:
        return np.hypot(x, y) < self.r0


def boundary_exit_distance(x: ArrayLike, omega: ArrayLike) -> FloatArray:
    """Distance travelled from ``x`` along ``omega`` until leaving the disk.

    Parameters
    ----------
    x : array_like, shape (..., 2)
        Points in the closed unit disk.
    omega : array_like, shape (..., 2)
        Unit directions.

    Returns
    -------
    ndarray
        ``tau >= 0`` such that ``|x + tau * omega| = 1``.
    """
    x = np.asarray(x, dtype=float)
    omega = np.asarray(omega, dtype=float)
    b = np.sum(x * omega, axis=-1)
    c = 1.0 - np.sum(x * x, axis=-1)
    c = np.maximum(c, 0.0)
    disc = np.sqrt(b * b + c)
    # stable root of t^2 + 2bt - c = 0
    return np.where(b <= 0.0, disc - b, c / (disc + b + 1e-300 * (disc + b == 0)))


# --------------------------------------------------------------------------
# boundary harmonics


def _mode_constant(m: int) -> float:
    return 1.0 / np.sqrt(2.0 * np.pi) if m == 0 else 1.0 / np.sqrt(np.pi)


@dataclass(frozen=True)
class HarmonicMode:
    """Real boundary harmonic ``Y_mj`` and its harmonic extension ``r^m Y_mj``.

    ``j = 1`` is the cosine member and ``j = 2`` the sine member.
    """

    m: int
    j: int

    def __post_init__(self) -> None:
        if self.m < 0 or self.j not in ((1,) if self.m == 0 else (1, 2)):
            raise ValueError(f"invalid harmonic index (m={self.m}, j={self.j})")

    @property
    def norm(self) -> float:
        return _mode_constant(self.m)

    def boundary(self, theta: ArrayLike) -> FloatArray:
        theta = np.asarray(theta, dtype=float)
        if self.j == 1:
            return self.norm * np.cos(self.m * theta)
        return self.norm * np.sin(self.m * theta)

    def extension_polar(self, r: ArrayLike, theta: ArrayLike) -> FloatArray:
        r = np.asarray(r, dtype=float)
        return r**self.m * self.boundary(theta)

    def gradient_polar(self, r: ArrayLike, theta: ArrayLike) -> tuple[FloatArray, FloatArray]:
        """Radial and tangential components ``(d/dr, (1/r) d/dtheta)``."""
        r = np.asarray(r, dtype=float)
        theta = np.asarray(theta, dtype=float)
        m = self.m
        if m == 0:
            z = np.zeros(np.broadcast(r, theta).shape)
            return z, z.copy()
        rad = m * r ** (m - 1) * self.norm
        if self.j == 1:
            return rad * np.cos(m * theta), -rad * np.sin(m * theta)
        return rad * np.sin(m * theta), rad * np.cos(m * theta)

    def extension(self, x: ArrayLike, y: ArrayLike) -> FloatArray:
        z = np.asarray(x, dtype=float) + 1j * np.asarray(y, dtype=float)
        w = z**self.m
        return self.norm * (w.real if self.j == 1 else w.imag)

    def gradient(self, x: ArrayLike, y: ArrayLike) -> tuple[FloatArray, FloatArray]:
        """Cartesian gradient from the holomorphic derivative of ``z^m``."""
        z = np.asarray(x, dtype=float) + 1j * np.asarray(y, dtype=float)
        if self.m == 0:
            zero = np.zeros(z.shape)
            return zero, zero.copy()
        dw = self.m * z ** (self.m - 1) * self.norm
        if self.j == 1:
            return dw.real, -dw.imag
        return dw.imag, dw.real


def harmonic_mode(m: int, j: int) -> HarmonicMode:
    return HarmonicMode(int(m), int(j))


@dataclass(frozen=True)
class HarmonicBasis:
    """Index set ``{(m, j): 0 <= m <= L}`` of the real circle harmonics."""

    max_order: int
    dim: int = 2

    def __post_init__(self) -> None:
        if self.max_order < 0:
            raise ValueError("max_order must be nonnegative")
        if self.dim != 2:
            raise ValueError("only d = 2 is supported")

    @staticmethod
    def multiplicity(m: int, d: int = 2) -> int:
        """Dimension of degree-m spherical harmonics on S^{d-1}."""
        from math import comb

        if m == 0:
            return 1
        return comb(m + d - 1, d - 1) - comb(m + d - 3, d - 1)

    @property
    def indices(self) -> list[tuple[int, int]]:
        out = [(0, 1)]
        for m in range(1, self.max_order + 1):
            out += [(m, 1), (m, 2)]
        return out

    @property
    def size(self) -> int:
        return 2 * self.max_order + 1

    @property
    def orders(self) -> NDArray[np.int64]:
        return np.array([m for m, _ in self.indices])

    def index_of(self, m: int, j: int) -> int:
        harmonic_mode(m, j)
        if m > self.max_order:
            raise ValueError(f"order {m} exceeds max_order {self.max_order}")
        return 0 if m == 0 else 2 * m - 2 + j

    def modes(self) -> list[HarmonicMode]:
        return [HarmonicMode(m, j) for m, j in self.indices]

    def boundary_matrix(self, theta: ArrayLike) -> FloatArray:
        """Rows are basis functions sampled at ``theta``."""
        return np.array([mode.boundary(theta) for mode in self.modes()])

    def project(self, theta: FloatArray, values: FloatArray) -> FloatArray:
        """Coefficients of periodic samples on a uniform angular grid."""
        dtheta = 2.0 * np.pi / theta.size
        return self.boundary_matrix(theta) @ values * dtheta

    def gram(self, n_theta: int) -> FloatArray:
        theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
        Y = self.boundary_matrix(theta)
        return Y @ Y.T * (2.0 * np.pi / n_theta)


# --------------------------------------------------------------------------
# interpolation helpers


@lru_cache(maxsize=32)
def _chebyshev_full(n_r: int) -> tuple[FloatArray, FloatArray]:
    k = np.arange(2 * n_r)
    ang = np.pi * (k + 0.5) / (2 * n_r)
    return np.cos(ang), (-1.0) ** k * np.sin(ang)


def radial_interpolation(n_r: int, rho: ArrayLike) -> tuple[FloatArray, FloatArray]:
    """Interpolation weights at radii ``rho`` for the parity-extended grid.

    The radial grid consists of the positive half of ``2 n_r`` Chebyshev
    points of the first kind on ``[-1, 1]``.  A field along the diameter at
    angle ``phi`` is interpolated from the values at ``(r_i, phi)`` and, for
    the mirrored nodes, at ``(r_i, phi + pi)``.

    Returns
    -------
    plus, minus : ndarray, shape (len(rho), n_r)
        Weights multiplying the values at angle ``phi`` and ``phi + pi``.
        Columns follow ascending radius.
    """
    x, w = _chebyshev_full(n_r)
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    diff = rho[:, None] - x[None, :]
    hit = diff == 0.0
    diff[hit] = 1.0
    c = w[None, :] / diff
    rows = np.any(hit, axis=1)
    if np.any(rows):
        c[rows] = hit[rows].astype(float)
    c /= c.sum(axis=1, keepdims=True)
    # positive nodes are k = 0..n_r-1 (descending radius), the mirror of
    # positive node k is 2 n_r - 1 - k
    plus = c[:, n_r - 1 :: -1]
    minus = c[:, n_r:]
    return plus, minus


def chebyshev_radial_weights(n_r: int) -> FloatArray:
    """Weights ``W_i`` with ``sum_i W_i g(r_i) ~ int_0^1 g(r) r dr``."""
    x, _ = _chebyshev_full(n_r)
    gx, gw = np.polynomial.legendre.leggauss(2 * n_r + 2)
    s = 0.5 * (gx + 1.0)
    plus, minus = radial_interpolation(n_r, s)
    ws = 0.5 * gw * s
    return ws @ plus + ws @ minus


def trig_interpolation(n_theta: int, phi: ArrayLike) -> FloatArray:
    """Cardinal weights of trigonometric interpolation on ``n_theta`` nodes."""
    if n_theta % 2:
        raise ValueError("n_theta must be even")
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    nodes = 2.0 * np.pi * np.arange(n_theta) / n_theta
    d = 0.5 * (phi[:, None] - nodes[None, :])
    t = np.tan(d)
    s = np.sin(n_theta * d)
    small = np.abs(t) < 1e-300
    t[small] = 1.0
    out = s / (n_theta * t)
    out[small] = 1.0
    return out


# --------------------------------------------------------------------------
# polar grid


@dataclass(frozen=True)
class PolarGrid:
    """Tensor polar grid on the unit disk.

    ``kind="chebyshev"`` places radial nodes at the positive Chebyshev
    points of a parity-extended diameter; they cluster toward ``r = 1``
    and support spectral interpolation.  ``kind="midpoint"`` uses the
    uniform cell midpoints ``(i - 1/2) h`` for finite differences.
    """

    n_r: int = 48
    n_theta: int = 96
    kind: str = "chebyshev"
    r: FloatArray = field(init=False, repr=False)
    theta: FloatArray = field(init=False, repr=False)
    radial_weights: FloatArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n_theta % 2 or self.n_theta < 4:
            raise ValueError("n_theta must be even and at least 4")
        if self.n_r < 2:
            raise ValueError("n_r must be at least 2")
        if self.kind == "chebyshev":
            x, _ = _chebyshev_full(self.n_r)
            r = x[self.n_r - 1 :: -1].copy()
            wr = chebyshev_radial_weights(self.n_r)
        elif self.kind == "midpoint":
            h = 1.0 / self.n_r
            r = (np.arange(self.n_r) + 0.5) * h
            wr = r * h
        else:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "theta", 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta)
        object.__setattr__(self, "radial_weights", wr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_r, self.n_theta)

    @property
    def size(self) -> int:
        return self.n_r * self.n_theta

    @property
    def weights(self) -> FloatArray:
        return np.outer(self.radial_weights, np.full(self.n_theta, 2.0 * np.pi / self.n_theta))

    def mesh(self) -> tuple[FloatArray, FloatArray]:
        return np.meshgrid(self.r, self.theta, indexing="ij")

    def points(self) -> tuple[FloatArray, FloatArray]:
        R, T = self.mesh()
        return R * np.cos(T), R * np.sin(T)

    def integrate(self, values: ArrayLike) -> FloatArray:
        """Integrate fields of shape ``(..., n_r, n_theta)`` over the disk."""
        v = np.asarray(values)
        return np.einsum("...ij,ij->...", v, self.weights)

    def interpolate(self, values: ArrayLike, rho: ArrayLike, phi: ArrayLike) -> FloatArray:
        """Spectral interpolation of grid fields at polar points."""
        if self.kind != "chebyshev":
            raise ValueError("interpolation requires the chebyshev grid")
        v = np.asarray(values).reshape(-1, self.n_r, self.n_theta)
        rho = np.atleast_1d(np.asarray(rho, dtype=float)).ravel()
        phi = np.atleast_1d(np.asarray(phi, dtype=float)).ravel()
        lp, lm = radial_interpolation(self.n_r, rho)
        tp = trig_interpolation(self.n_theta, phi)
        tm = trig_interpolation(self.n_theta, phi + np.pi)
        out = np.einsum("pi,fij,pj->fp", lp, v, tp) + np.einsum("pi,fij,pj->fp", lm, v, tm)
        return out.reshape(np.asarray(values).shape[:-2] + rho.shape)


# --------------------------------------------------------------------------
# exponential-weight Gauss rules


@lru_cache(maxsize=4)
def _unit_discretization(n_panels: int = 40, n_gauss: int = 10) -> tuple[FloatArray, FloatArray]:
    g, w = np.polynomial.legendre.leggauss(n_gauss)
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    a, b = edges[:-1, None], edges[1:, None]
    y = (0.5 * (b - a) * g[None, :] + 0.5 * (a + b)).ravel()
    wy = (0.5 * (b - a) * w[None, :]).ravel()
    return y, wy


def exp_gauss_rules(X: ArrayLike, n: int) -> tuple[FloatArray, FloatArray]:
    """Gauss rules for the weight ``exp(-x)`` on ``[0, X]``.

    Recurrence coefficients come from the Stieltjes procedure on a fine
    discretization of the measure; nodes and weights from the Jacobi
    matrix eigensystem.  Weights sum to ``1 - exp(-X)``.

    Parameters
    ----------
    X : array_like, shape (R,)
        Interval lengths, intended for ``X <= 40``.
    n : int
        Number of nodes.

    Returns
    -------
    nodes, weights : ndarray, shape (R, n)
    """
    X = np.atleast_1d(np.asarray(X, dtype=float))
    y, wy = _unit_discretization()
    x = X[:, None] * y[None, :]
    w = X[:, None] * wy[None, :] * np.exp(-x)
    mass = -np.expm1(-X)
    alpha = np.zeros((X.size, n))
    beta = np.zeros((X.size, n))
    p_prev = np.zeros_like(x)
    p = np.ones_like(x) / np.sqrt(np.sum(w, axis=1, keepdims=True))
    for k in range(n):
        alpha[:, k] = np.sum(w * x * p * p, axis=1)
        q = (x - alpha[:, k : k + 1]) * p
        if k > 0:
            q -= np.sqrt(beta[:, k : k + 1]) * p_prev
        nq = np.sum(w * q * q, axis=1)
        if k + 1 < n:
            beta[:, k + 1] = nq
        p_prev, p = p, q / np.sqrt(nq)[:, None]
    J = np.zeros((X.size, n, n))
    idx = np.arange(n)
    J[:, idx, idx] = alpha
    off = np.sqrt(beta[:, 1:])
    J[:, idx[:-1], idx[1:]] = off
    J[:, idx[1:], idx[:-1]] = off
    nodes, vecs = np.linalg.eigh(J)
    weights = mass[:, None] * vecs[:, 0, :] ** 2
    return nodes, weights


# --------------------------------------------------------------------------
# ray fans


def direction_set(n_dir: int, cluster: float = 0.0) -> tuple[FloatArray, FloatArray]:
    """Direction angles and probability weights on the circle.

    Angles follow ``alpha = beta + (a/2) sin(2 beta)`` with ``beta``
    uniform, which clusters directions around ``alpha = +-pi/2``, the
    tangent directions for a target on the positive x-axis.  The set is
    symmetric under ``alpha -> -alpha`` and ``alpha -> alpha + pi``.
    """
    if n_dir % 4:
        raise ValueError("n_dir must be a multiple of 4")
    if not 0.0 <= cluster < 1.0:
        raise ValueError("cluster must lie in [0, 1)")
    beta = 2.0 * np.pi * (np.arange(n_dir) + 0.5) / n_dir
    alpha = beta + 0.5 * cluster * np.sin(2.0 * beta)
    weights = (1.0 + cluster * np.cos(2.0 * beta)) / n_dir
    return alpha, weights


@dataclass(frozen=True)
class RayFan:
    """Quadrature for ``int_S1 int_0^tau exp(-t/lam)/lam g(x + t omega) dt dmu``.

    Attributes
    ----------
    target : ndarray, shape (2,)
    angles, dir_weights : ndarray, shape (n_dir,)
        Direction angles and probability weights (sum to one).
    exit : ndarray, shape (n_dir,)
        Exit distances ``tau`` per direction.
    t, weights, direction : ndarray, shape (P,)
        Ray-node distances, combined weights (direction weight times the
        exponential-rule weight) and the direction index of every node.
    ballistic : ndarray, shape (n_dir,)
        ``dir_weight * exp(-tau/lam)``; zero for rays cut at ``t_cut``.
    """

    target: FloatArray
    angles: FloatArray
    dir_weights: FloatArray
    exit: FloatArray
    t: FloatArray
    weights: FloatArray
    direction: NDArray[np.int64]
    ballistic: FloatArray
    cut: NDArray[np.bool_]

    @property
    def points(self) -> FloatArray:
        om = np.stack([np.cos(self.angles), np.sin(self.angles)], axis=-1)
        return self.target[None, :] + self.t[:, None] * om[self.direction]


def ray_fan(
    target: ArrayLike,
    lam: float,
    n_dir: int = 64,
    *,
    cluster: float = 0.0,
    panel_length: float = 0.25,
    nodes_per_panel: int = 6,
    cut_depth: float = 40.0,
) -> RayFan:
    """Build the ray quadrature for one target point.

    Rays are truncated at ``cut_depth * lam``; beyond it the exponential
    weight is below double precision.  Each ray is split into equal
    panels no longer than ``panel_length`` and every panel carries the
    Gauss rule for the shifted weight ``exp(-x)``.
    """
    target = np.asarray(target, dtype=float)
    alpha, dw = direction_set(n_dir, cluster)
    om = np.stack([np.cos(alpha), np.sin(alpha)], axis=-1)
    tau = boundary_exit_distance(np.broadcast_to(target, om.shape), om)
    t_cut = cut_depth * lam
    length = np.minimum(tau, t_cut)
    cut = tau > t_cut
    n_pan = np.maximum(1, np.ceil(length / panel_length - 1e-12)).astype(int)
    h = length / n_pan
    nodes, w = exp_gauss_rules(h / lam, nodes_per_panel)
    ts, ws, ds = [], [], []
    for d in range(n_dir):
        if length[d] <= 0.0:
            continue
        a = h[d] * np.arange(n_pan[d])
        shift = np.exp(-a / lam)
        ts.append((a[:, None] + lam * nodes[d][None, :]).ravel())
        ws.append((dw[d] * shift[:, None] * w[d][None, :]).ravel())
        ds.append(np.full(n_pan[d] * nodes_per_panel, d))
    ballistic = np.where(cut, 0.0, dw * np.exp(-tau / lam))
    return RayFan(
        target=target,
        angles=alpha,
        dir_weights=dw,
        exit=tau,
        t=np.concatenate(ts) if ts else np.zeros(0),
        weights=np.concatenate(ws) if ws else np.zeros(0),
        direction=np.concatenate(ds) if ds else np.zeros(0, dtype=int),
        ballistic=ballistic,
        cut=cut,
    )
