"""Forward solver for the scaled stationary transport problem on the unit disk.

The scalar flux solves the integral equation ``<u> = K1 <u> + K2 f`` whose
kernel is the attenuated free-flight density along straight rays.  The
operator is discretized by target-centred ray quadrature: for every grid
node a fan of rays carries an exponential-weight Gauss rule, and the flux
at ray nodes is obtained by spectral interpolation from the polar grid.
Angular moments (the current) and the boundary measurement are evaluated
from the same characteristic representation.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.typing import ArrayLike, NDArray

from .geometry import (
    HarmonicBasis,
    HarmonicMode,
    PolarGrid,
    boundary_exit_distance,
    radial_interpolation,
    ray_fan,
    trig_interpolation,
)

__all__ = [
    "AbsorptionField",
    "Bump",
    "Medium",
    "TransportDiscretization",
    "TransportSolver",
    "ScalarFlux",
    "CurrentField",
    "SolveError",
    "bump_profile",
    "optical_depth",
    "solve_scalar_flux",
    "first_moment",
    "boundary_current",
    "kernel_hat",
    "kernel_hat_integral",
    "k1_spectral_norm",
    "cq_seminorm_fd",
    "boundary_source",
]

log = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
EPS_MAX = 0.5


class SolveError(RuntimeError):
    """Failure of the discrete transport solve."""


# --------------------------------------------------------------------------
# absorption fields


def bump_profile(t: ArrayLike) -> FloatArray:
    """Smooth compactly supported profile ``exp(1 - 1/(1 - t^2))`` on ``|t| < 1``."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    inside = np.abs(t) < 1.0
    s = 1.0 - t[inside] ** 2
    out[inside] = np.exp(1.0 - 1.0 / s)
    return out


@dataclass(frozen=True)
class Bump:
    """Radial bump ``amplitude * chi(|x - center| / width)``."""

    center: tuple[float, float]
    width: float
    amplitude: float

    def __post_init__(self) -> None:
        if self.width <= 0:
            raise ValueError("bump width must be positive")
        if self.amplitude < 0:
            raise ValueError("bump amplitude must be nonnegative")


class _BumpSum:
    def __init__(self, bumps: Sequence[Bump]):
        self.bumps = tuple(bumps)

    def __call__(self, x: ArrayLike, y: ArrayLike) -> FloatArray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape)
        x, y = np.broadcast_to(x, out.shape), np.broadcast_to(y, out.shape)
        for b in self.bumps:
            dx = x - b.center[0]
            dy = y - b.center[1]
            r2 = dx * dx + dy * dy
            m = r2 < b.width * b.width
            if np.any(m):
                out[m] += b.amplitude * np.exp(1.0 - 1.0 / (1.0 - r2[m] / b.width**2))
        return out


@dataclass(frozen=True)
class AbsorptionField:
    """Nonnegative absorption coefficient with declared support and smoothness.

    Attributes
    ----------
    evaluator : callable
        ``(x, y) -> sigma_a`` on broadcastable arrays.
    support_radius : float
        The field vanishes for ``|x| >= support_radius``.
    smoothness : float
        Declared Hölder/C^q order ``q``.
    sup_bound : float
        Upper bound of ``sup |sigma_a|``.
    length_scale : float
        Smallest feature size; sets the line-integral panel length.
    radial : bool
        Whether the field depends on ``|x|`` only.
    bumps : tuple of Bump
        Present when the field is a finite bump sum.
    """

    evaluator: Callable[[FloatArray, FloatArray], FloatArray] | None
    support_radius: float
    smoothness: float = np.inf
    sup_bound: float = 0.0
    length_scale: float = 1.0
    radial: bool = False
    bumps: tuple[Bump, ...] = ()
    label: str = "custom"

    def __post_init__(self) -> None:
        if not 0.0 < self.support_radius <= 1.0:
            raise ValueError("support_radius must lie in (0, 1]")
        if self.sup_bound < 0:
            raise ValueError("sup_bound must be nonnegative")

    @property
    def is_zero(self) -> bool:
        return self.evaluator is None or self.sup_bound == 0.0

    def __call__(self, x: ArrayLike, y: ArrayLike) -> FloatArray:
        if self.is_zero:
            return np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
        return self.evaluator(x, y)

    @classmethod
    def zero(cls) -> AbsorptionField:
        return cls(None, 1.0, np.inf, 0.0, 1.0, True, (), "zero")

    @classmethod
    def constant(cls, value: float) -> AbsorptionField:
        """Constant absorption on the whole disk (not supported in K)."""

        def ev(x, y):
            return np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, float(value))

        return cls(ev, 1.0, np.inf, float(value), 1.0, True, (), f"constant({value})")

    @classmethod
    def from_bumps(cls, bumps: Sequence[Bump], smoothness: float = np.inf, label: str = "bumps") -> AbsorptionField:
        bumps = tuple(bumps)
        support = max(np.hypot(*b.center) + b.width for b in bumps)
        radial = all(b.center == (0.0, 0.0) for b in bumps)
        # overlapping bumps can only add up
        bound = sum(b.amplitude for b in bumps)
        scale = min(b.width for b in bumps)
        return cls(_BumpSum(bumps), min(support, 1.0), smoothness, bound, scale, radial, bumps, label)

    @classmethod
    def radial_bump(cls, amplitude: float, width: float) -> AbsorptionField:
        return cls.from_bumps([Bump((0.0, 0.0), width, amplitude)], label=f"radial_bump({amplitude},{width})")

    @classmethod
    def off_center_bump(cls, amplitude: float, width: float, center: tuple[float, float]) -> AbsorptionField:
        return cls.from_bumps([Bump(tuple(map(float, center)), width, amplitude)], label=f"bump({amplitude},{width},{center})")

    def scaled(self, factor: float) -> AbsorptionField:
        if factor < 0:
            raise ValueError("scale factor must be nonnegative")
        if self.bumps:
            bumps = [replace(b, amplitude=b.amplitude * factor) for b in self.bumps]
            return replace(self.from_bumps(bumps, self.smoothness, self.label), label=f"{factor}*{self.label}")
        if self.is_zero:
            return self
        ev = self.evaluator
        return replace(self, evaluator=lambda x, y: factor * ev(x, y), sup_bound=self.sup_bound * factor)

    def line_integral(self, start: ArrayLike, end: ArrayLike, panels_per_scale: int = 4, nodes: int = 16) -> FloatArray:
        """``int_segment sigma_a ds`` by composite Gauss-Legendre quadrature."""
        start = np.atleast_2d(np.asarray(start, dtype=float))
        end = np.atleast_2d(np.asarray(end, dtype=float))
        if self.is_zero:
            return np.zeros(np.broadcast_shapes(start.shape, end.shape)[:-1])
        start, end = np.broadcast_arrays(start, end)
        d = end - start
        length = np.hypot(d[:, 0], d[:, 1])
        n_pan = max(1, int(np.ceil(length.max() * panels_per_scale / self.length_scale)))
        g, w = np.polynomial.legendre.leggauss(nodes)
        s = ((np.arange(n_pan)[:, None] + 0.5 * (g[None, :] + 1.0)) / n_pan).ravel()
        ws = np.tile(0.5 * w / n_pan, n_pan)
        px = start[:, 0:1] + s[None, :] * d[:, 0:1]
        py = start[:, 1:2] + s[None, :] * d[:, 1:2]
        return (self(px, py) @ ws) * length


def cq_seminorm_fd(func: Callable, q: float, h: float, extent: float = 1.0) -> float:
    """Sampled C^q seminorm ``max_{|alpha|=q} sup |d^alpha f|`` by finite differences.

    Fractional ``q`` is checked at order ``ceil(q)``.  Undivided
    differences of unit step are composed along each axis on a square grid
    of spacing ``h`` covering ``[-extent, extent]^2``; each one samples the
    derivative at a shifted grid point, so the result is first order in ``h``.
    """
    k = int(np.ceil(q))
    n = int(np.ceil(extent / h))
    ax = h * np.arange(-n - k, n + k + 1)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    F = func(X, Y)
    if k == 0:
        return float(np.abs(F).max())
    best = 0.0
    for a in range(k + 1):
        G = np.diff(np.diff(F, n=a, axis=0), n=k - a, axis=1) / h**k
        best = max(best, float(np.abs(G).max()))
    return best


# --------------------------------------------------------------------------
# media and data


@dataclass(frozen=True)
class Medium:
    """Optical state: Knudsen number, constant scattering, absorption field."""

    epsilon: float
    sigma_s: float = 1.0
    sigma_a: AbsorptionField = field(default_factory=AbsorptionField.zero)

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.sigma_s > 0:
            raise ValueError("sigma_s must be positive")

    @property
    def mean_free_path(self) -> float:
        return self.epsilon / self.sigma_s

    def background(self) -> Medium:
        return Medium(self.epsilon, self.sigma_s, AbsorptionField.zero())


def optical_depth(x: ArrayLike, y: ArrayLike, medium: Medium) -> float:
    """Exponent of the attenuation factor between points ``x`` and ``y``.

    ``|x - y| / eps * (sigma_s + eps^2 * mean of sigma_a on the segment)``.
    The segment is always traversed from the lexicographically smaller
    endpoint so the result is exactly symmetric.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.array_equal(x, y):
        raise ValueError("optical depth needs two distinct points")
    a, b = (x, y) if tuple(x) <= tuple(y) else (y, x)
    length = float(np.hypot(*(b - a)))
    eps = medium.epsilon
    absorbed = float(medium.sigma_a.line_integral(a, b)[0])
    return (medium.sigma_s * length + eps**2 * absorbed) / eps


BoundaryLike = HarmonicMode | Sequence[HarmonicMode] | ArrayLike | Callable


def boundary_source(f: BoundaryLike) -> tuple[Callable[[FloatArray], FloatArray], int]:
    """Normalize a boundary datum to ``psi -> values`` of shape ``(n_src, ...)``.

    Accepted: a HarmonicMode, a sequence of modes, a coefficient vector or
    matrix in the order of ``HarmonicBasis.indices``, a scalar constant,
    or a callable of the boundary angle.
    """
    if isinstance(f, HarmonicMode):
        return (lambda psi: f.boundary(psi)[None]), 1
    if isinstance(f, (list, tuple)) and f and all(isinstance(m, HarmonicMode) for m in f):
        modes = list(f)
        return (lambda psi: np.stack([m.boundary(psi) for m in modes])), len(modes)
    if callable(f):
        def ev_callable(psi):
            v = np.asarray(f(psi), dtype=float)
            return v[None] if v.ndim == np.ndim(psi) else v

        return ev_callable, 1
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        c = float(arr)
        return (lambda psi: np.full((1,) + np.shape(psi), c)), 1
    coeffs = np.atleast_2d(arr)
    n_b = coeffs.shape[1]
    if n_b % 2 == 0:
        raise ValueError("coefficient vectors have odd length 2L + 1")
    basis = HarmonicBasis((n_b - 1) // 2)
    modes = basis.modes()

    def ev(psi):
        psi = np.asarray(psi, dtype=float)
        Y = np.stack([m.boundary(psi) for m in modes])
        return np.tensordot(coeffs, Y, axes=(1, 0))

    return ev, coeffs.shape[0]


# --------------------------------------------------------------------------
# discretization


@dataclass(frozen=True)
class TransportDiscretization:
    """Resolution parameters of the ray-quadrature Nyström scheme.

    ``boundary_dirs`` is the Gauss-Legendre order in the outgoing half
    circle used for the boundary measurement.  ``cluster`` concentrates
    directions toward the tangent for targets with ``r > cluster_radius``.
    """

    n_r: int = 48
    n_theta: int = 96
    n_dir: int = 64
    panel_length: float = 0.25
    nodes_per_panel: int = 6
    cut_depth: float = 40.0
    cluster: float = 0.0
    cluster_radius: float = 0.9
    absorption_nodes: int = 8
    absorption_panels_per_scale: float = 2.0
    boundary_dirs: int = 96

    def grid(self) -> PolarGrid:
        return PolarGrid(self.n_r, self.n_theta, "chebyshev")


@dataclass(frozen=True)
class _Fan:
    """Canonical fan at ``(r, 0)`` with interpolation data."""

    t: FloatArray
    weights: FloatArray
    direction: NDArray[np.int64]
    angles: FloatArray
    exit: FloatArray
    ballistic: FloatArray
    exit_angle: FloatArray
    rho: FloatArray
    phi: FloatArray
    target: FloatArray


def _build_fan(r: float, lam: float, disc: TransportDiscretization, angles=None, dir_weights=None) -> _Fan:
    cluster = disc.cluster if r > disc.cluster_radius else 0.0
    if angles is None:
        fan = ray_fan(
            (r, 0.0), lam, disc.n_dir, cluster=cluster, panel_length=disc.panel_length,
            nodes_per_panel=disc.nodes_per_panel, cut_depth=disc.cut_depth,
        )
        t, w, d, ang, tau, bal = fan.t, fan.weights, fan.direction, fan.angles, fan.exit, fan.ballistic
    else:
        t, w, d, tau, bal = _explicit_rays((r, 0.0), np.asarray(angles), np.asarray(dir_weights), lam, disc)
        ang = np.asarray(angles)
    om = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    pts = np.array([r, 0.0])[None, :] + t[:, None] * om[d]
    ex = np.array([r, 0.0])[None, :] + tau[:, None] * om
    return _Fan(
        t=t, weights=w, direction=d, angles=ang, exit=tau, ballistic=bal,
        exit_angle=np.arctan2(ex[:, 1], ex[:, 0]),
        rho=np.minimum(np.hypot(pts[:, 0], pts[:, 1]), 1.0), phi=np.arctan2(pts[:, 1], pts[:, 0]),
        target=np.array([r, 0.0]),
    )


def _explicit_rays(target, angles, dir_weights, lam, disc):
    from .geometry import exp_gauss_rules

    target = np.asarray(target, dtype=float)
    om = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    tau = boundary_exit_distance(np.broadcast_to(target, om.shape), om)
    t_cut = disc.cut_depth * lam
    length = np.minimum(tau, t_cut)
    cut = tau > t_cut
    n_pan = np.maximum(1, np.ceil(length / disc.panel_length - 1e-12)).astype(int)
    h = length / n_pan
    nodes, w = exp_gauss_rules(np.maximum(h, 1e-300) / lam, disc.nodes_per_panel)
    ts, ws, ds = [], [], []
    for k in range(angles.size):
        if length[k] <= 0.0:
            continue
        a = h[k] * np.arange(n_pan[k])
        shift = np.exp(-a / lam)
        ts.append((a[:, None] + lam * nodes[k][None, :]).ravel())
        ws.append((dir_weights[k] * shift[:, None] * w[k][None, :]).ravel())
        ds.append(np.full(n_pan[k] * disc.nodes_per_panel, k))
    bal = np.where(cut, 0.0, dir_weights * np.exp(-tau / lam))
    return np.concatenate(ts), np.concatenate(ws), np.concatenate(ds), tau, bal


def _interpolation_matrix(fan: _Fan, n_r: int, n_theta: int) -> FloatArray:
    lp, lm = radial_interpolation(n_r, fan.rho)
    tp = trig_interpolation(n_theta, fan.phi)
    tm = trig_interpolation(n_theta, fan.phi + np.pi)
    B = lp[:, :, None] * tp[:, None, :]
    B += lm[:, :, None] * tm[:, None, :]
    return B.reshape(fan.t.size, n_r * n_theta)


def _legendre_partial(n: int) -> tuple[FloatArray, FloatArray, FloatArray]:
    g, w = np.polynomial.legendre.leggauss(n)
    # Lagrange basis in Legendre coefficients: c[k, l] = w_k P_l(g_k) (2l+1)/2
    P = np.polynomial.legendre.legvander(g, n - 1)
    coef = w[:, None] * P * (2 * np.arange(n) + 1)[None, :] / 2.0
    return g, w, coef


def _partial_weights(z: FloatArray, n: int) -> FloatArray:
    """Weights of ``int_{-1}^{z} p(s) ds`` for ``p`` sampled at Gauss nodes."""
    _, _, coef = _legendre_partial(n)
    V = np.polynomial.legendre.legvander(z, n)
    ip = np.empty((z.size, n))
    ip[:, 0] = z + 1.0
    for l in range(1, n):
        ip[:, l] = (V[:, l + 1] - V[:, l - 1]) / (2 * l + 1)
    return ip @ coef.T


def _absorption_operator(fan: _Fan, sigma_a: AbsorptionField, disc: TransportDiscretization):
    """Fine points and the map from their sigma_a samples to path integrals.

    Each ray's chord through the support disk is split into Gauss-Legendre
    panels.  Rows of the returned sparse matrix give ``int_0^t sigma_a`` at
    every ray node followed by the full integral to every exit point.
    """
    n_dir = fan.angles.size
    n_nodes = fan.t.size
    om = np.stack([np.cos(fan.angles), np.sin(fan.angles)], axis=-1)
    x0 = fan.target
    R = sigma_a.support_radius
    b = om @ x0
    disc_ = b * b - (x0 @ x0 - R * R)
    sq = np.sqrt(np.maximum(disc_, 0.0))
    lo = np.maximum(-b - sq, 0.0)
    hi = np.minimum(-b + sq, fan.exit)
    valid = (disc_ > 0) & (hi > lo)
    n_g = disc.absorption_nodes
    g, w, _ = _legendre_partial(n_g)
    h_max = sigma_a.length_scale / disc.absorption_panels_per_scale
    n_pan = np.where(valid, np.maximum(1, np.ceil((hi - lo) / h_max)).astype(int), 0)
    half = np.where(valid, 0.5 * (hi - lo) / np.maximum(n_pan, 1), 0.0)
    n_fine = n_pan * n_g
    fine_off = np.concatenate([[0], np.cumsum(n_fine)])
    if fine_off[-1] == 0:
        return np.zeros((0, 2)), sp.csr_matrix((n_nodes + n_dir, 0))
    # fine points
    fd = np.repeat(np.arange(n_dir), n_fine)
    local = np.arange(fine_off[-1]) - fine_off[fd]
    panel, node = np.divmod(local, n_g)
    s = lo[fd] + half[fd] * (2 * panel + 1 + g[node])
    pts = x0[None, :] + s[:, None] * om[fd]
    # queries: ray nodes, then exits
    qd = np.concatenate([fan.direction, np.arange(n_dir)])
    tq = np.concatenate([fan.t, fan.exit])
    ok = valid[qd] & (tq > lo[qd])
    qid = np.nonzero(ok)[0]
    qd, tq = qd[qid], tq[qid]
    hq = half[qd]
    k = np.clip(np.floor((tq - lo[qd]) / (2 * hq)).astype(int), 0, n_pan[qd] - 1)
    z = np.minimum((tq - lo[qd] - 2 * k * hq) / hq - 1.0, 1.0)
    pw = hq[:, None] * _partial_weights(z, n_g)
    counts = (k + 1) * n_g
    rows = np.repeat(qid, counts)
    row_off = np.concatenate([[0], np.cumsum(counts)])
    pos = np.arange(row_off[-1]) - np.repeat(row_off[:-1], counts)
    rq = np.repeat(np.arange(qid.size), counts)
    cols = fine_off[qd][rq] + pos
    in_full = pos < k[rq] * n_g
    vals = np.where(in_full, hq[rq] * w[pos % n_g], 0.0)
    part = ~in_full
    vals[part] = pw[rq[part], pos[part] - k[rq[part]] * n_g]
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(n_nodes + n_dir, fine_off[-1]))
    return pts, Q


def _path_integrals(fan: _Fan, sigma_a: AbsorptionField, disc: TransportDiscretization,
                    rotations: FloatArray) -> FloatArray:
    """``int sigma_a`` along every ray node and exit for rotated copies of the fan."""
    n_out = fan.t.size + fan.angles.size
    if sigma_a.is_zero:
        return np.zeros((rotations.size, n_out))
    pts, Q = _absorption_operator(fan, sigma_a, disc)
    if pts.shape[0] == 0:
        return np.zeros((rotations.size, n_out))
    c, s = np.cos(rotations)[:, None], np.sin(rotations)[:, None]
    X = c * pts[None, :, 0] - s * pts[None, :, 1]
    Y = s * pts[None, :, 0] + c * pts[None, :, 1]
    vals = sigma_a(X, Y)
    return np.asarray((Q @ vals.T).T)


class _CirculantOperator:
    """Block-circulant operator ``(K u)[i, j] = sum c[i, k, d] u[k, j + d]``."""

    def __init__(self, c: FloatArray):
        self.c = c
        self.n_r, _, self.n_theta = c.shape
        self.hat = np.fft.ifft(c, axis=2) * self.n_theta

    def apply(self, u: FloatArray) -> FloatArray:
        U = np.fft.fft(u, axis=-1)
        out = np.einsum("ikn,...kn->...in", self.hat, U)
        return np.fft.ifft(out, axis=-1).real

    def solve_identity_minus(self, rhs: FloatArray) -> FloatArray:
        F = np.fft.fft(rhs, axis=-1)
        out = np.empty_like(F)
        eye = np.eye(self.n_r)
        for n in range(self.n_theta):
            out[..., n] = np.linalg.solve(eye - self.hat[:, :, n], F[..., n].T).T
        return np.fft.ifft(out, axis=-1).real

    def dense(self) -> FloatArray:
        n_r, n_t = self.n_r, self.n_theta
        idx = (np.arange(n_t)[None, :] - np.arange(n_t)[:, None]) % n_t
        K = self.c[np.arange(n_r)[:, None, None, None], np.arange(n_r)[None, None, :, None],
                   idx[None, :, None, :]]
        return K.reshape(n_r * n_t, n_r * n_t)

    def mode_blocks(self) -> FloatArray:
        return self.hat


@dataclass
class _Assembly:
    circulant: bool
    K1: object
    J: tuple[object, object] | None
    ballistic: FloatArray  # (n_r, n_theta, n_dir) or (n_r, 1, n_dir)
    exit_angle: FloatArray  # (n_r, n_dir) canonical exit angles
    dir_angles: list[FloatArray]


def _roll_rows(G: FloatArray, n_theta: int) -> FloatArray:
    """Rows for targets ``(i, j)`` from canonical rows: ``out[j, k, jj] = G[j, k, jj - j]``."""
    idx = (np.arange(n_theta)[None, :] - np.arange(n_theta)[:, None]) % n_theta
    j = np.arange(n_theta)[:, None, None]
    k = np.arange(G.shape[1])[None, :, None]
    return G[j, k, idx[:, None, :]]


# --------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class ScalarFlux:
    """Scalar flux ``<u>`` on the polar grid for one boundary source."""

    values: FloatArray
    grid: PolarGrid
    medium: Medium
    source: object = None
    residual: float = 0.0

    def to_csv(self, path) -> None:
        R, T = self.grid.mesh()
        _write_table(path, ["r", "theta", "value"], [R.ravel(), T.ravel(), self.values.ravel()])


@dataclass(frozen=True)
class CurrentField:
    """Current ``J = int v u dmu`` in polar components on the grid."""

    radial: FloatArray
    tangential: FloatArray
    grid: PolarGrid

    def cartesian(self) -> tuple[FloatArray, FloatArray]:
        T = self.grid.mesh()[1]
        c, s = np.cos(T), np.sin(T)
        return c * self.radial - s * self.tangential, s * self.radial + c * self.tangential

    def to_csv(self, path) -> None:
        R, T = self.grid.mesh()
        jx, jy = self.cartesian()
        _write_table(path, ["r", "theta", "jx", "jy"], [R.ravel(), T.ravel(), jx.ravel(), jy.ravel()])


def _write_table(path, header, columns) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


class TransportSolver:
    """Discrete Peierls operator for one medium and its derived observables.

    Parameters
    ----------
    medium : Medium
    disc : TransportDiscretization, optional
    need_current : bool
        Assemble the current operators (three times the work of ``K1``).
    """

    def __init__(self, medium: Medium, disc: TransportDiscretization | None = None, need_current: bool = True):
        if not 0.0 < medium.epsilon <= EPS_MAX:
            raise ValueError(f"epsilon must lie in (0, {EPS_MAX}], got {medium.epsilon}")
        self.medium = medium
        self.disc = disc or TransportDiscretization()
        self.grid = self.disc.grid()
        self.lam = medium.mean_free_path
        self._lu = None
        self._boundary = None
        self._asm = self._assemble(need_current)

    # ---- assembly -----------------------------------------------------
    def _fans(self) -> list[_Fan]:
        return [_cached_fan(float(r), self.lam, self.disc) for r in self.grid.r]

    def _assemble(self, need_current: bool) -> _Assembly:
        disc = self.disc
        n_r, n_t = disc.n_r, disc.n_theta
        eps = self.medium.epsilon
        sig = self.medium.sigma_a
        circulant = sig.is_zero or sig.radial
        theta = self.grid.theta
        if circulant:
            c = np.zeros((1 + 2 * need_current, n_r, n_r, n_t))
        else:
            K = np.zeros((n_r, n_t, n_r * n_t))
            Jr = np.zeros((n_r, n_t, n_r * n_t)) if need_current else None
            Jt = np.zeros((n_r, n_t, n_r * n_t)) if need_current else None
        n_dir_max = max(disc.n_dir, 1)
        bal = np.zeros((n_r, 1 if circulant else n_t, n_dir_max))
        exit_angle = np.zeros((n_r, n_dir_max))
        angles = []
        for i, fan in enumerate(self._fans()):
            B = _interpolation_matrix(fan, n_r, n_t)
            rot = theta[:1] if circulant else theta
            I = _path_integrals(fan, sig, disc, rot)
            att = np.exp(-eps * I)
            n_p = fan.t.size
            C = fan.weights[None, :] * att[:, :n_p]
            bal[i] = fan.ballistic[None, :] * att[:, n_p:]
            exit_angle[i] = fan.exit_angle
            angles.append(fan.angles)
            if need_current:
                cw = -np.cos(fan.angles[fan.direction])
                sw = -np.sin(fan.angles[fan.direction])
                G = np.concatenate([C, C * cw, C * sw], axis=0)
            else:
                G = C
            rows = (G @ B).reshape(G.shape[0], n_r, n_t)
            if circulant:
                c[:, i] = rows
            else:
                m = C.shape[0]
                K[i] = _roll_rows(rows[:m], n_t).reshape(n_t, -1)
                if need_current:
                    Jr[i] = _roll_rows(rows[m : 2 * m], n_t).reshape(n_t, -1)
                    Jt[i] = _roll_rows(rows[2 * m :], n_t).reshape(n_t, -1)
        if circulant:
            K1 = _CirculantOperator(c[0])
            J = (_CirculantOperator(c[1]), _CirculantOperator(c[2])) if need_current else None
        else:
            N = n_r * n_t
            K1 = K.reshape(N, N)
            J = (Jr.reshape(N, N), Jt.reshape(N, N)) if need_current else None
        return _Assembly(circulant, K1, J, bal, exit_angle, angles)

    # ---- operators ----------------------------------------------------
    def k1_dense(self) -> FloatArray:
        K1 = self._asm.K1
        return K1.dense() if self._asm.circulant else K1

    def apply_k1(self, u: FloatArray) -> FloatArray:
        K1 = self._asm.K1
        if self._asm.circulant:
            return K1.apply(u)
        shp = u.shape
        return (K1 @ u.reshape(-1, self.grid.size).T).T.reshape(shp)

    def _exit_values(self, fsrc, n_src) -> FloatArray:
        """Boundary data at exit points, shape ``(n_src, n_r, n_theta, n_dir)``."""
        psi = self._asm.exit_angle[:, None, :] + self.grid.theta[None, :, None]
        return fsrc(psi).reshape(n_src, *psi.shape)

    def k2(self, f: BoundaryLike) -> FloatArray:
        fsrc, n_src = boundary_source(f)
        fv = self._exit_values(fsrc, n_src)
        return np.einsum("sijd,ijd->sij", fv, np.broadcast_to(self._asm.ballistic, fv.shape[1:]))

    # ---- solves -------------------------------------------------------
    def _factor(self):
        if self._lu is None and not self._asm.circulant:
            A = np.eye(self.grid.size) - self._asm.K1
            try:
                self._lu = sla.lu_factor(A, overwrite_a=True, check_finite=True)
            except (sla.LinAlgError, ValueError) as exc:  # pragma: no cover - defensive
                smin = np.linalg.svd(np.eye(self.grid.size) - self._asm.K1, compute_uv=False)[-1]
                raise SolveError(f"factorization failed, smallest singular value {smin:.3e}") from exc
        return self._lu

    def solve(self, f: BoundaryLike, check: bool = True) -> FloatArray:
        """Scalar fluxes for every source, shape ``(n_src, n_r, n_theta)``."""
        rhs = self.k2(f)
        if self._asm.circulant:
            u = self._asm.K1.solve_identity_minus(rhs)
        else:
            lu = self._factor()
            u = sla.lu_solve(lu, rhs.reshape(rhs.shape[0], -1).T).T.reshape(rhs.shape)
        if check:
            res = u - self.apply_k1(u) - rhs
            scale = np.maximum(np.sqrt(self.grid.integrate(rhs**2)), 1e-300)
            rel = np.sqrt(self.grid.integrate(res**2)) / scale
            self.last_residual = float(np.max(rel))
            if not np.all(np.isfinite(u)) or self.last_residual > 1e-10:
                A = np.eye(self.grid.size) - self.k1_dense()
                smin = np.linalg.svd(A, compute_uv=False)[-1]
                raise SolveError(
                    f"solve residual {self.last_residual:.3e} exceeds 1e-10, smallest singular value {smin:.3e}"
                )
        return u

    def current(self, u: FloatArray, f: BoundaryLike) -> tuple[FloatArray, FloatArray]:
        """Radial and tangential current for fluxes ``u`` and their sources."""
        if self._asm.J is None:
            raise ValueError("solver was built without current operators")
        fsrc, n_src = boundary_source(f)
        fv = self._exit_values(fsrc, n_src)
        bal = np.broadcast_to(self._asm.ballistic, fv.shape[1:])
        cw = np.stack([-np.cos(a) for a in self._asm.dir_angles])[:, None, :]
        sw = np.stack([-np.sin(a) for a in self._asm.dir_angles])[:, None, :]
        jr_b = np.einsum("sijd,ijd->sij", fv, bal * cw)
        jt_b = np.einsum("sijd,ijd->sij", fv, bal * sw)
        Jr, Jt = self._asm.J
        if self._asm.circulant:
            jr, jt = Jr.apply(u), Jt.apply(u)
        else:
            flat = u.reshape(u.shape[0], -1).T
            jr = (Jr @ flat).T.reshape(u.shape)
            jt = (Jt @ flat).T.reshape(u.shape)
        return jr + jr_b, jt + jt_b

    # ---- boundary measurement ----------------------------------------
    def _boundary_fan(self):
        if self._boundary is None:
            disc = self.disc
            n = disc.boundary_dirs
            g, w = np.polynomial.legendre.leggauss(n)
            beta = 0.5 * np.pi * g
            wb = 0.5 * np.pi * w * np.cos(beta) / (2.0 * np.pi)
            fan = _build_fan(1.0, self.lam, disc, angles=np.pi + beta, dir_weights=wb)
            B = _interpolation_matrix(fan, disc.n_r, disc.n_theta)
            sig = self.medium.sigma_a
            circ = sig.is_zero or sig.radial
            rot = self.grid.theta[:1] if circ else self.grid.theta
            I = _path_integrals(fan, sig, disc, rot)
            att = np.exp(-self.medium.epsilon * I)
            n_p = fan.t.size
            C = fan.weights[None, :] * att[:, :n_p]
            bal = fan.ballistic[None, :] * att[:, n_p:]
            self._boundary = (fan, B, C, bal, circ)
        return self._boundary

    def outgoing_average(self, u: FloatArray, f: BoundaryLike) -> FloatArray:
        """``int_{v.n > 0} v.n u dmu`` at the boundary grid angles."""
        fan, B, C, bal, circ = self._boundary_fan()
        n_t = self.grid.n_theta
        fsrc, n_src = boundary_source(f)
        psi = fan.exit_angle[None, :] + self.grid.theta[:, None]
        fv = fsrc(psi).reshape(n_src, n_t, -1)
        out_b = np.einsum("sjd,jd->sj", fv, np.broadcast_to(bal, fv.shape[1:]))
        if circ:
            row = (C[0] @ B).reshape(self.grid.n_r, n_t)
            # target j sees the field rotated by theta_j
            U = np.fft.fft(u, axis=-1)
            R = np.fft.ifft(row, axis=-1) * n_t
            out_s = np.einsum("kn,skn->sn", R, U)
            out_s = np.fft.ifft(out_s, axis=-1).real
        else:
            rows = (C @ B).reshape(n_t, self.grid.n_r, n_t)
            full = _roll_rows(rows, n_t).reshape(n_t, -1)
            out_s = (full @ u.reshape(u.shape[0], -1).T).T
        return out_s + out_b

    def boundary_current(self, u: FloatArray, f: BoundaryLike) -> FloatArray:
        """Samples of ``(1/eps) int v.n u dmu`` at the boundary grid angles."""
        fsrc, n_src = boundary_source(f)
        incoming = -fsrc(self.grid.theta).reshape(n_src, -1) / np.pi
        return (self.outgoing_average(u, f) + incoming) / self.medium.epsilon


@lru_cache(maxsize=512)
def _cached_fan(r: float, lam: float, disc: TransportDiscretization) -> _Fan:
    return _build_fan(r, lam, disc)


# --------------------------------------------------------------------------
# functional interface


def solve_scalar_flux(medium: Medium, f: BoundaryLike, disc: TransportDiscretization | None = None) -> ScalarFlux:
    """Scalar flux for a single boundary source."""
    solver = TransportSolver(medium, disc, need_current=False)
    u = solver.solve(f)
    if u.shape[0] != 1:
        raise ValueError("solve_scalar_flux takes a single source; use TransportSolver.solve")
    return ScalarFlux(u[0], solver.grid, medium, f, solver.last_residual)


def first_moment(medium: Medium, f: BoundaryLike, flux: ScalarFlux | None = None,
                 disc: TransportDiscretization | None = None,
                 solver: TransportSolver | None = None) -> CurrentField:
    """Current field from the ray representation of the angular density."""
    solver = solver or TransportSolver(medium, disc)
    u = solver.solve(f) if flux is None else flux.values[None]
    jr, jt = solver.current(u, f)
    return CurrentField(jr[0], jt[0], solver.grid)


def boundary_current(medium: Medium, f: BoundaryLike, max_order: int,
                     disc: TransportDiscretization | None = None,
                     solver: TransportSolver | None = None) -> FloatArray:
    """Harmonic coefficients (up to ``max_order``) of the boundary measurement."""
    solver = solver or TransportSolver(medium, disc, need_current=False)
    u = solver.solve(f)
    jb = solver.boundary_current(u, f)
    basis = HarmonicBasis(max_order)
    coeffs = np.stack([basis.project(solver.grid.theta, row) for row in jb])
    return coeffs[0] if coeffs.shape[0] == 1 else coeffs


def kernel_hat(xi_norm: ArrayLike, epsilon: float, sigma_s: float = 1.0) -> FloatArray:
    """Fourier symbol of the free-space scattering kernel in two dimensions."""
    a = epsilon * np.asarray(xi_norm, dtype=float) / sigma_s
    return 1.0 / np.sqrt(1.0 + a * a)


def kernel_hat_integral(xi_norm: ArrayLike, epsilon: float, sigma_s: float = 1.0, d: int = 2,
                        n_nodes: int = 400) -> FloatArray:
    """Angular-integral form of the kernel symbol, for any dimension ``d >= 2``.

    ``(|S^{d-2}| / |S^{d-1}|) int_0^pi sin^{d-2} t / (1 + a^2 cos^2 t) dt``
    evaluated by Gauss-Legendre quadrature on each half of ``[0, pi]``.
    """
    from scipy.special import gamma

    def sphere(n):  # surface measure of S^{n-1}
        return 2.0 * np.pi ** (n / 2) / gamma(n / 2)

    a = np.atleast_1d(epsilon * np.asarray(xi_norm, dtype=float) / sigma_s)
    g, w = np.polynomial.legendre.leggauss(n_nodes)
    t = np.concatenate([0.25 * np.pi * (g + 1.0), 0.25 * np.pi * (g + 3.0)])
    wt = np.concatenate([w, w]) * 0.25 * np.pi
    integrand = np.sin(t) ** (d - 2) / (1.0 + (a[:, None] * np.cos(t)[None, :]) ** 2)
    val = integrand @ wt * sphere(d - 1) / sphere(d)
    return val if np.ndim(xi_norm) else val[0]


def k1_spectral_norm(medium: Medium, disc: TransportDiscretization | None = None) -> float:
    """Largest singular value of the quadrature-symmetrized discrete ``K1``.

    The background operator is block circulant, so the norm is the maximum
    over angular Fourier modes of the radial block norms.
    """
    if not medium.sigma_a.is_zero:
        raise ValueError("k1_spectral_norm expects a medium without absorption")
    solver = TransportSolver(medium, disc, need_current=False)
    w = np.sqrt(solver.grid.radial_weights)
    blocks = solver._asm.K1.mode_blocks()
    best = 0.0
    for n in range(blocks.shape[2]):
        M = w[:, None] * blocks[:, :, n] / w[None, :]
        best = max(best, float(np.linalg.norm(M, 2)))
    return best
