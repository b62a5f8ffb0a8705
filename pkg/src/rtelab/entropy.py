"""Counting and threshold formulas for the instability estimates.

Covers the modulus equation ``t = log(1/w) + eps/w + (eps/w)^(-1/tau)``,
the diffusive/transport regime split, the truncation order of the
delta-net construction and its log-cardinality, Kolmogorov packing counts
and an explicit C^q bump family realizing them, and the end-to-end probe
that measures ``||Gamma_1 - Gamma_2||`` for a bump pair across ``eps``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray

from .albedo import assemble_gamma, hs_operator_norm, xs_seminorm
from .transport import AbsorptionField, Bump, Medium, TransportDiscretization, cq_seminorm_fd

__all__ = [
    "OmegaSolution",
    "omega_solve",
    "RegimeDecision",
    "regime_classify",
    "TruncationResult",
    "truncation_order",
    "NetCardinality",
    "net_log_cardinality",
    "sup_weighted_decay",
    "kolmogorov_log_count",
    "BumpFamily",
    "build_bump_family",
    "profile_seminorm",
    "calibration_mu",
    "EntropyReport",
    "entropy_report",
    "ProbeRow",
    "instability_probe",
    "AMPLITUDE_CAP",
]

log = logging.getLogger(__name__)
FloatArray = NDArray[np.float64]
AMPLITUDE_CAP = 0.5


# --------------------------------------------------------------------------
# modulus equation


@dataclass(frozen=True)
class OmegaSolution:
    t: float
    epsilon: float
    tau: float
    omega: float
    residual: float


def _omega_rhs(y: float, eps: float, p: float) -> float:
    # right side at omega = exp(-y)
    if eps == 0.0:
        return y
    return y + eps * math.exp(y) + eps**p * math.exp(p * y)


def omega_solve(t: float, epsilon: float, tau: float = -1.0) -> OmegaSolution:
    """Root ``omega`` of ``t = log(1/omega) + eps/omega + (eps/omega)^(-1/tau)``.

    Solved for ``y = log(1/omega)`` on ``[0, min(t, 690)]`` by bisection
    followed by Newton polishing; the right side is increasing in ``y``.

    Raises
    ------
    ValueError
        For ``t <= 0``, ``eps < 0``, ``tau >= 0``, or when ``t`` does not
        exceed the value at ``omega = 1`` (out of regime).
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if not tau < 0:
        raise ValueError("tau must be negative")
    p = -1.0 / tau
    if epsilon == 0.0:
        return OmegaSolution(t, 0.0, tau, math.exp(-t), 0.0)
    at_one = epsilon + epsilon**p
    if t <= at_one:
        raise ValueError(f"out of regime: t = {t} <= eps + eps^(-1/tau) = {at_one}; omega would be >= 1")
    lo, hi = 0.0, min(t, 690.0)
    if _omega_rhs(hi, epsilon, p) < t:
        raise ValueError("root below omega = 1e-300")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _omega_rhs(mid, epsilon, p) < t:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10 * max(1.0, hi):
            break
    y = 0.5 * (lo + hi)
    for _ in range(50):
        g = _omega_rhs(y, epsilon, p) - t
        dg = 1.0 + epsilon * math.exp(y) + p * epsilon**p * math.exp(p * y)
        step = g / dg
        y_new = min(max(y - step, lo), hi)
        if abs(y_new - y) <= 1e-16 * max(1.0, abs(y)):
            y = y_new
            break
        y = y_new
    omega = math.exp(-y)
    resid = math.log(1.0 / omega) + epsilon / omega + (epsilon / omega) ** p - t
    return OmegaSolution(t, epsilon, tau, omega, resid)


# --------------------------------------------------------------------------
# regimes


@dataclass(frozen=True)
class RegimeDecision:
    theta: float
    epsilon: float
    d: int
    q: float
    threshold: float
    label: str
    bound: float

    @property
    def diffusive(self) -> bool:
        return self.label == "diffusive-exponential"


def regime_classify(theta: float, epsilon: float, d: int = 2, q: float = 1.0) -> RegimeDecision:
    """Diffusive-exponential iff ``eps <= (x/3) exp(-x/3)`` with ``x = theta^(-d/((2d+1)q))``."""
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if not q > 0:
        raise ValueError("q must be positive")
    if d < 2:
        raise ValueError("d must be at least 2")
    kappa = d / ((2 * d + 1) * q)
    x = theta ** (-kappa)
    T = (x / 3.0) * math.exp(-x / 3.0)
    if epsilon <= T:
        return RegimeDecision(theta, epsilon, d, q, T, "diffusive-exponential", 8 * math.sqrt(2) * math.exp(-x / 3.0))
    return RegimeDecision(theta, epsilon, d, q, T, "transport-Hölder", 24 * math.sqrt(2) * epsilon / x)


# --------------------------------------------------------------------------
# truncation order and the delta-net


def _decay(l: int | FloatArray, r0: float, eps: float, tau: float):
    return (1.0 + l) ** tau * (r0**l + eps)


@dataclass(frozen=True)
class TruncationResult:
    """Smallest ``l`` with ``(1+l)^tau (r0^l + eps) <= delta/(4 C0 R)``."""

    l: int
    threshold: float
    value_at_l: float
    value_before: float
    envelope_term: float
    c_hat: float

    @property
    def upper_bound(self) -> float:
        return self.c_hat * self.envelope_term


def _envelope_term(delta: float, eps: float, tau: float) -> float:
    return math.log(1.0 / delta) + (eps / delta) ** (-1.0 / tau)


def _smallest_order(thr: float, r0: float, eps: float, tau: float) -> int:
    if _decay(0, r0, eps, tau) <= thr:
        return 0
    hi = 1
    while _decay(hi, r0, eps, tau) > thr:
        hi *= 2
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _decay(mid, r0, eps, tau) <= thr:
            hi = mid
        else:
            lo = mid
    return hi


def truncation_order(delta: float, epsilon: float, r0: float, tau: float = -1.0, c0r: float = 1.0,
                     c_hat: float | None = None) -> TruncationResult:
    """Truncation order of the delta-net construction, with a minimality check.

    ``c_hat`` defaults to the smallest constant for which
    ``l <= c_hat (log(1/delta) + (eps/delta)^(-1/tau))`` holds on a
    logarithmic grid of ``delta' in [delta, 1/e)``.
    """
    if not 0 < delta < math.exp(-1):
        raise ValueError("delta must lie in (0, 1/e)")
    if not tau < 0:
        raise ValueError("tau must be negative")
    if not 0 < r0 < 1:
        raise ValueError("r0 must lie in (0, 1)")
    if epsilon < 0 or c0r <= 0:
        raise ValueError("epsilon must be nonnegative and c0r positive")
    thr = delta / (4.0 * c0r)
    l = _smallest_order(thr, r0, epsilon, tau)
    at = _decay(l, r0, epsilon, tau)
    before = _decay(l - 1, r0, epsilon, tau) if l > 0 else math.inf
    if not (at <= thr < before):
        raise RuntimeError("truncation order failed its minimality check")
    env = _envelope_term(delta, epsilon, tau)
    if c_hat is None:
        grid = np.geomspace(delta, math.exp(-1) * (1 - 1e-9), 24)
        c_hat = max(_smallest_order(d / (4.0 * c0r), r0, epsilon, tau) / _envelope_term(d, epsilon, tau) for d in grid)
    return TruncationResult(l, thr, at, before, env, float(c_hat))


def sup_weighted_decay(r0: float, l_max: int = 50) -> float:
    """``sup_l (1 + l) r0^l`` over integers ``0 <= l <= l_max``."""
    l = np.arange(l_max + 1)
    return float(np.max((1.0 + l) * r0**l))


@dataclass(frozen=True)
class NetCardinality:
    """Explicit log-cardinality bound of the delta-net and its fitted envelope."""

    l: int
    explicit: float
    envelope: float
    eta: float


def _explicit_log_card(delta, eps, r0, tau, d, c0r, l) -> float:
    c0p = sup_weighted_decay(r0)
    a = 16.0 * math.sqrt(2.0)
    return 8.0 * (1.0 + l) ** (2 * d - 2) * (
        math.log1p(a * c0r * c0p / delta) + math.log1p(a * c0r * eps * (1.0 + l) ** 2 / delta)
    )


def net_log_cardinality(delta: float, epsilon: float, r0: float, tau: float = -1.0, d: int = 2,
                        c0r: float = 1.0, l_override: int | None = None) -> NetCardinality:
    """Natural-log cardinality bound of a delta-net for the truncated matrices.

    ``8 (1+l)^(2d-2) [log(1 + 16 sqrt2 C0 C0' R / delta) + log(1 + 16 sqrt2 C0 R eps (1+l)^2 / delta)]``
    with ``C0' = sup_l (1+l) r0^l``.  The envelope
    ``eta (log(1/delta) + eps/delta + (eps/delta)^(-1/tau))^(2d+1)`` uses the
    smallest ``eta`` dominating the explicit bound on ``[delta, 1/e)``.
    """
    l = truncation_order(delta, epsilon, r0, tau, c0r).l if l_override is None else int(l_override)
    explicit = _explicit_log_card(delta, epsilon, r0, tau, d, c0r, l)

    def base(dl):
        return (math.log(1.0 / dl) + epsilon / dl + (epsilon / dl) ** (-1.0 / tau)) ** (2 * d + 1)

    if l_override is None:
        grid = np.geomspace(delta, math.exp(-1) * (1 - 1e-9), 24)
        eta = max(_explicit_log_card(g, epsilon, r0, tau, d, c0r, truncation_order(g, epsilon, r0, tau, c0r).l) / base(g)
                  for g in grid)
    else:
        eta = explicit / base(delta)
    return NetCardinality(l, explicit, eta * base(delta), eta)


def kolmogorov_log_count(theta: float, beta: float, q: float, d: int = 2, mu: float = 1.0) -> float:
    """Lower bound ``2^(-d-1) (mu beta / theta)^(d/q)`` on the log of the packing count."""
    if not 0 < theta < mu * beta:
        raise ValueError("theta must lie in (0, mu * beta)")
    return 2.0 ** (-d - 1) * (mu * beta / theta) ** (d / q)


# --------------------------------------------------------------------------
# bump family


@lru_cache(maxsize=16)
def profile_seminorm(q: int, samples: int = 801) -> float:
    """``max_{|alpha| = q} sup |d^alpha chi(|x|)|`` of the unit bump profile.

    Derivatives are exact (symbolic); the supremum is taken over a fine
    grid of the unit disk and refined by local maximization.
    """
    import sympy
    from scipy.optimize import minimize

    q = int(math.ceil(q))
    x, y = sympy.symbols("x y", real=True)
    chi = sympy.exp(1 - 1 / (1 - x**2 - y**2))
    best = 0.0
    ax = np.linspace(-1, 1, samples)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    inside = X**2 + Y**2 < 1 - 1e-9
    for a in range(q + 1):
        expr = sympy.diff(chi, x, a, y, q - a) if q else chi
        f = sympy.lambdify((x, y), expr, "numpy")
        with np.errstate(all="ignore"):
            V = np.where(inside, np.abs(f(np.where(inside, X, 0), np.where(inside, Y, 0))), 0.0)
        k = np.unravel_index(np.argmax(V), V.shape)

        def neg(p, f=f):
            if p[0] ** 2 + p[1] ** 2 >= 1:
                return 0.0
            return -abs(float(f(p[0], p[1])))

        res = minimize(neg, [X[k], Y[k]], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14})
        best = max(best, float(V[k]), -float(res.fun))
    return best


def calibration_mu(r0: float, q: float) -> float:
    """``mu`` with ``theta < mu beta`` exactly when the budget-limited width fits ``r0/4``."""
    return (r0 / 4.0) ** q / profile_seminorm(int(math.ceil(q)))


@dataclass(frozen=True)
class BumpFamily:
    """Members ``base + sum_c pattern_c * theta * chi(|x - x_c| / h)``.

    Attributes
    ----------
    patterns : ndarray of bool, shape (count, n_cells)
    centers : ndarray, shape (n_cells, 2)
    """

    theta: float
    beta: float
    q: float
    r0: float
    h: float
    centers: FloatArray
    patterns: NDArray[np.bool_]
    mu: float
    chi_seminorm: float
    base: tuple[Bump, ...] = ()
    seed: int | None = None
    profile: str = "exp(1 - 1/(1 - t^2))"

    @property
    def n_cells(self) -> int:
        return self.centers.shape[0]

    @property
    def count(self) -> int:
        return self.patterns.shape[0]

    def bumps(self, k: int) -> list[Bump]:
        cells = [Bump((float(c[0]), float(c[1])), self.h, self.theta)
                 for c, on in zip(self.centers, self.patterns[k]) if on]
        return list(self.base) + cells

    def member(self, k: int) -> AbsorptionField:
        bumps = self.bumps(k)
        if not bumps:
            return AbsorptionField.zero()
        field_ = AbsorptionField.from_bumps(bumps, smoothness=self.q, label=f"member{k}")
        # support is inside K by construction; report K itself
        return field_

    def cell_center_distance(self, k1: int, k2: int) -> float:
        """Sup distance from exact evaluation at the cell centres."""
        a, b = self.member(k1), self.member(k2)
        c = self.centers
        return float(np.max(np.abs(a(c[:, 0], c[:, 1]) - b(c[:, 0], c[:, 1])))) if c.size else 0.0

    def sampled_distance(self, k1: int, k2: int, spacing: float | None = None) -> float:
        """Sup distance sampled on a square grid that contains the cell centres."""
        sp = spacing or self.h / 16.0
        n = int(math.ceil(self.r0 / sp))
        ax = sp * np.arange(-n, n + 1)
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        return float(np.max(np.abs(self.member(k1)(X, Y) - self.member(k2)(X, Y))))

    def log_count(self) -> float:
        return self.n_cells * math.log(2.0)


def build_bump_family(theta: float, beta: float, q: float, r0: float, count: int,
                      seed: int | None = 0, base: AbsorptionField | None = None,
                      min_width: float = 0.02) -> BumpFamily:
    """Lattice family of C^q bumps with seeded on/off patterns.

    The cell half-width is ``h = min(r0/4, (theta [chi]_q / beta)^(1/q))``;
    cells sit on a square lattice of spacing ``2h`` with ``|x_c| + h <= r0``.

    Raises
    ------
    ValueError
        If ``theta >= mu beta`` (the budget cannot be met with ``h <= r0/4``),
        if ``h < min_width`` (below resolution), or if ``count`` exceeds
        the number of patterns.
    """
    if not 0 < theta:
        raise ValueError("theta must be positive")
    if not 0 < r0 < 1:
        raise ValueError("r0 must lie in (0, 1)")
    chi_q = profile_seminorm(int(math.ceil(q)))
    mu = (r0 / 4.0) ** q / chi_q
    if theta >= mu * beta:
        raise ValueError(f"infeasible: C^q budget (theta = {theta} >= mu beta = {mu * beta:.6g})")
    h = min(r0 / 4.0, (theta * chi_q / beta) ** (1.0 / q))
    if h < min_width:
        raise ValueError(f"infeasible: resolution (cell width {h:.4g} < {min_width})")
    base_bumps: tuple[Bump, ...] = tuple(base.bumps) if base is not None and not base.is_zero else ()
    if base is not None and not base.is_zero and not base.bumps:
        raise ValueError("base absorption must be a bump sum")
    if base_bumps and base.sup_bound + theta > AMPLITUDE_CAP + 1e-12:
        raise ValueError("base amplitude plus theta exceeds the amplitude cap")
    n = int(math.floor(r0 / (2 * h))) + 1
    idx = np.arange(-n, n + 1)
    cx, cy = np.meshgrid(2 * h * idx, 2 * h * idx, indexing="ij")
    c = np.stack([cx.ravel(), cy.ravel()], axis=-1)
    keep = np.hypot(c[:, 0], c[:, 1]) + h <= r0 * (1 + 1e-12)
    centers = c[keep]
    if count < 1 or (centers.shape[0] < 63 and count > 2 ** centers.shape[0]):
        raise ValueError(f"count {count} exceeds the {2 ** centers.shape[0]} available patterns")
    rng = np.random.default_rng(seed)
    seen: set[bytes] = set()
    pats = []
    while len(pats) < count:
        p = rng.integers(0, 2, centers.shape[0]).astype(bool)
        key = np.packbits(p).tobytes()
        if key not in seen:
            seen.add(key)
            pats.append(p)
    return BumpFamily(theta, beta, q, r0, h, centers, np.array(pats), mu, chi_q, base_bumps, seed)


def member_checks(family: BumpFamily, k: int, spacing_factor: float = 32.0) -> dict:
    """Nonnegativity, support and sampled C^q seminorm of one member."""
    f = family.member(k)
    sp = family.h / spacing_factor
    extent = 1.0
    n = int(math.ceil(extent / (4 * sp)))
    ax = 4 * sp * np.arange(-n, n + 1)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    vals = f(X, Y)
    outside = np.hypot(X, Y) >= family.r0
    semi = cq_seminorm_fd(lambda x, y: f(x, y), family.q, sp, extent=family.r0 + sp) if family.patterns[k].any() else 0.0
    return {
        "nonnegative": bool(np.all(vals >= 0)),
        "support_ok": bool(np.all(vals[outside] == 0)),
        "seminorm": semi,
        "budget_ok": bool(semi <= family.beta * 1.05),
    }


__all__.append("member_checks")


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EntropyReport:
    delta: float
    epsilon: float
    r0: float
    tau: float
    c0r: float
    l: int
    net_log_card: float
    kolmogorov_log: float
    verdict: bool


def entropy_report(delta: float, epsilon: float, r0: float, theta: float, beta: float, q: float,
                   tau: float = -1.0, d: int = 2, c0r: float = 1.0, mu: float | None = None) -> EntropyReport:
    """Compare the packing lower bound with the covering upper bound.

    ``verdict`` is true when ``log|X| > log|Y|`` so two members must share a
    net cell (the pigeonhole step).
    """
    mu = calibration_mu(r0, q) if mu is None else mu
    net = net_log_cardinality(delta, epsilon, r0, tau, d, c0r)
    kol = kolmogorov_log_count(theta, beta, q, d, mu)
    return EntropyReport(delta, epsilon, r0, tau, c0r, net.l, net.explicit, kol, kol > net.explicit)


# --------------------------------------------------------------------------
# instability probe


@dataclass
class ProbeRow:
    epsilon: float
    sup_distance: float
    op_norm: float
    xs_seminorm: float
    singular_values: FloatArray
    regime: str
    threshold: float
    error: str | None = None
    extra: dict = field(default_factory=dict)


def instability_probe(sigma_a0: AbsorptionField | None, theta: float, epsilons, max_order: int = 12,
                      s: float = 4.0, q: float = 2.0, beta: float | None = None, r0: float = 0.5,
                      disc: TransportDiscretization | None = None, seed: int = 0,
                      sigma_s: float = 1.0, family: BumpFamily | None = None,
                      workers: int = 1) -> tuple[list[ProbeRow], BumpFamily]:
    """Weighted norm of ``Gamma_1 - Gamma_2`` for one bump pair across ``eps``.

    The pair is members 0 and 1 of a seeded two-member family; rows are
    returned sorted by ``eps`` descending.  Per-``eps`` failures are
    recorded in the row and the sweep continues.  ``workers > 1`` runs the
    ``eps`` cases in a thread pool (each case owns its transport state).
    """
    if family is None:
        if beta is None:
            raise ValueError("beta is required when no family is given")
        family = build_bump_family(theta, beta, q, r0, 2, seed=seed, base=sigma_a0)
    s1, s2 = family.member(0), family.member(1)
    dist = family.cell_center_distance(0, 1)

    def case(eps: float) -> ProbeRow:
        reg = regime_classify(theta, eps, 2, q)
        try:
            g1 = assemble_gamma(Medium(eps, sigma_s, s1), max_order, disc)
            g2 = assemble_gamma(Medium(eps, sigma_s, s2), max_order, disc)
            diff = g1 - g2
            rep = hs_operator_norm(diff, s)
            return ProbeRow(eps, dist, rep.spectral_norm, xs_seminorm(diff, s), rep.singular_values,
                            reg.label, reg.threshold, extra={"diff": diff.values})
        except Exception as exc:  # recorded per case, sweep continues
            log.warning("probe failed at eps=%g: %s", eps, exc)
            return ProbeRow(eps, dist, np.nan, np.nan, np.array([]), reg.label, reg.threshold, str(exc))

    eps_sorted = sorted(epsilons, reverse=True)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(case, eps_sorted))
    else:
        rows = [case(e) for e in eps_sorted]
    return rows, family
