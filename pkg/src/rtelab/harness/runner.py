"""Command execution: each command writes CSV tables plus one JSON summary."""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from .. import __version__
from ..albedo import assemble_gamma, entry_decay_report, hs_operator_norm, norm_chain_holds, reciprocity_error
from ..diffusion import diffusion_limit_report
from ..entropy import (build_bump_family, calibration_mu, instability_probe, kolmogorov_log_count,
                       net_log_cardinality, omega_solve, regime_classify, truncation_order)
from ..geometry import harmonic_mode
from ..transport import Medium, TransportSolver, kernel_hat, kernel_hat_integral
from .config import COMMANDS, ExperimentConfig

__all__ = ["run", "write_csv", "SUMMARY_KEYS"]

log = logging.getLogger(__name__)

SUMMARY_KEYS = ("command", "config_hash", "status", "versions", "headline", "failures", "files", "runtime_seconds")
ZERO_TOL = 1e-10


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, header: list[str], rows, config_hash: str) -> Path:
    """Comment line with the config hash, header row, then ``.17g`` floats."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _versions() -> dict:
    return {"rtelab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


class _Context:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.hash = cfg.config_hash()
        self.files: list[str] = []
        self.failures: list[dict] = []
        self.headline: dict = {}

    def csv(self, name: str, header, rows) -> None:
        path = write_csv(self.out / name, header, rows, self.hash)
        self.files.append(path.name)

    def fail(self, case: str, exc: BaseException) -> None:
        log.warning("%s failed: %s", case, exc)
        self.failures.append({"case": case, "error": f"{type(exc).__name__}: {exc}"})

    def medium(self, eps: float) -> Medium:
        return Medium(eps, self.cfg.sigma_s, self.cfg.absorption.field())


def _tag(eps: float) -> str:
    return f"{eps:.6g}".replace(".", "p").replace("-", "m")


# --------------------------------------------------------------------------
# commands


def _kernelcheck(ctx: _Context) -> None:
    cfg = ctx.cfg
    eps = cfg.epsilon[0]
    a = np.linspace(0.0, 10.0, cfg.kernel_points)
    xi = a * cfg.sigma_s / eps
    closed = kernel_hat(xi, eps, cfg.sigma_s)
    quad = kernel_hat_integral(xi, eps, cfg.sigma_s, d=cfg.d)
    diff = np.abs(closed - quad)
    ctx.csv("kernelcheck.csv", ["a", "closed_form", "quadrature", "abs_diff"], zip(a, closed, quad, diff))
    ctx.headline.update(max_abs_diff=float(diff.max()), passed=bool(diff.max() <= 1e-6))


def _omega(ctx: _Context) -> None:
    cfg = ctx.cfg
    rows = []
    worst = 0.0
    for e in cfg.omega_epsilon:
        for t in cfg.omega_t:
            try:
                sol = omega_solve(t, e, cfg.tau)
                rows.append((t, e, cfg.tau, sol.omega, sol.residual, "ok"))
                worst = max(worst, abs(sol.residual))
            except ValueError as exc:
                rows.append((t, e, cfg.tau, math.nan, math.nan, "out-of-regime" if "regime" in str(exc) else "invalid"))
    ctx.csv("omega.csv", ["t", "epsilon", "tau", "omega", "residual", "status"], rows)
    ctx.headline.update(max_abs_residual=worst, solved=sum(r[-1] == "ok" for r in rows), total=len(rows))


def _entropy(ctx: _Context) -> None:
    cfg = ctx.cfg
    mu = calibration_mu(cfg.r0, cfg.q)
    rows = []
    for eps in cfg.epsilon:
        reg = regime_classify(cfg.theta, eps, cfg.d, cfg.q)
        try:
            kol = kolmogorov_log_count(cfg.theta, cfg.beta, cfg.q, cfg.d, mu)
        except ValueError:
            kol = math.nan
        for dl in cfg.delta:
            tr = truncation_order(dl, eps, cfg.r0, cfg.tau, cfg.c0r)
            net = net_log_cardinality(dl, eps, cfg.r0, cfg.tau, cfg.d, cfg.c0r)
            rows.append((eps, dl, tr.l, tr.threshold, tr.c_hat, tr.upper_bound, net.explicit, net.eta,
                         net.envelope, kol, bool(kol > net.explicit), reg.label, reg.threshold, reg.bound))
    ctx.csv("entropy.csv", ["epsilon", "delta", "l", "threshold", "c_hat", "l_upper_bound", "net_log_card",
                            "eta", "net_envelope", "kolmogorov_log_count", "pigeonhole", "regime",
                            "regime_threshold", "regime_bound"], rows)
    ctx.headline.update(mu=mu, max_l=max(r[2] for r in rows), rows=len(rows))


def _solve(ctx: _Context) -> None:
    cfg = ctx.cfg
    disc = cfg.grid.discretization()
    stats = {}
    for eps in cfg.epsilon:
        try:
            med = ctx.medium(eps)
            solver = TransportSolver(med, disc)
            for m in cfg.modes:
                mode = harmonic_mode(m, 1)
                u = solver.solve(mode)[0]
                jr, jt = solver.current(u[None], mode)
                R, T = solver.grid.mesh()
                ctx.csv(f"flux_eps{_tag(eps)}_m{m}.csv", ["r", "theta", "flux", "j_r", "j_theta"],
                        zip(R.ravel(), T.ravel(), u.ravel(), jr[0].ravel(), jt[0].ravel()))
                stats[f"eps={eps:g},m={m}"] = {"min": float(u.min()), "max": float(u.max())}
        except Exception as exc:
            ctx.fail(f"solve eps={eps:g}", exc)
    ctx.headline["flux_range"] = stats


def _matrix(ctx: _Context) -> None:
    cfg = ctx.cfg
    disc = cfg.grid.discretization()
    zero = True
    norms = {}
    for eps in cfg.epsilon:
        try:
            G = assemble_gamma(ctx.medium(eps), cfg.L, disc)
        except Exception as exc:
            ctx.fail(f"matrix eps={eps:g}", exc)
            continue
        name = f"gamma_eps{_tag(eps)}.csv"
        G.to_csv(ctx.out / name, cfg.s, {"config_hash": ctx.hash})
        ctx.files.append(name)
        rep = hs_operator_norm(G, cfg.s)
        ratio, ok = reciprocity_error(G, min(cfg.L, 6))
        zero &= bool(np.max(np.abs(G.values)) <= ZERO_TOL)
        norms[f"{eps:g}"] = {"hs_norm": rep.spectral_norm, "xs_seminorm": rep.xs_seminorm,
                             "norm_chain": norm_chain_holds(G, cfg.s), "reciprocity_ratio": ratio,
                             "reciprocity_ok": ok}
        ctx.csv(f"singular_values_eps{_tag(eps)}.csv", ["index", "singular_value"], enumerate(rep.singular_values))
    ctx.headline.update(zero_map=zero and not ctx.failures, norms=norms)


def _decay(ctx: _Context) -> None:
    cfg = ctx.cfg
    disc = cfg.grid.discretization()
    mats = []
    for eps in cfg.epsilon:
        try:
            mats.append(assemble_gamma(ctx.medium(eps), cfg.L, disc))
        except Exception as exc:
            ctx.fail(f"decay eps={eps:g}", exc)
    if not mats:
        return
    mats.sort(key=lambda g: g.epsilon)
    basis = mats[0].basis
    rows = []
    for G in mats:
        for l, j in basis.indices:
            i = basis.index_of(l, j)
            a1, a2 = G.addend1[i, i], G.addend2[i, i]
            rows.append((G.epsilon, l, j, a1, a2, math.log(abs(a1) / (1 + l)) if a1 else math.nan))
    ctx.csv("decay.csv", ["epsilon", "l", "j", "addend1", "addend2", "log_addend1_over_1pl"], rows)
    try:
        rep = entry_decay_report(mats[0], cfg.r0, family=mats if len(mats) > 1 else (),
                                 sup_sigma=max(ctx.medium(mats[0].epsilon).sigma_a.sup_bound, 1e-300))
        ctx.headline.update(m1_slope=rep.m1_slope, log_r0=rep.log_r0, usable_orders=list(rep.usable_orders),
                            m2_exponent=rep.m2_exponent, m2_ratio=rep.m2_ratio,
                            m2_entry=list(rep.m2_entry) if rep.m2_entry else None,
                            crossover=rep.crossover, c0_fit=rep.c0_fit)
    except ValueError as exc:
        ctx.fail("decay fit", exc)


def _diffuse(ctx: _Context) -> None:
    cfg = ctx.cfg
    disc = cfg.grid.discretization()
    sig = cfg.absorption.field()
    rows = []
    ratios = {}
    for m in cfg.modes:
        try:
            rec = diffusion_limit_report(sig, sorted(cfg.epsilon, reverse=True), m, 1, cfg.sigma_s, disc,
                                         cfg.interior_radius, cfg.grid.diffusion_n_r)
        except Exception as exc:
            ctx.fail(f"diffuse m={m}", exc)
            continue
        r = (math.nan,) + rec.ratios
        rows.extend((m, e, err, rr) for e, err, rr in zip(rec.epsilons, rec.errors, r))
        ratios[str(m)] = list(rec.ratios)
    ctx.csv("diffusion_limit.csv", ["m", "epsilon", "interior_l2_error", "ratio_to_previous"], rows)
    ctx.headline["ratios"] = ratios


def _probe(ctx: _Context) -> None:
    cfg = ctx.cfg
    base = cfg.absorption.field()
    fam = build_bump_family(cfg.theta, cfg.beta, cfg.q, cfg.r0, 2, seed=cfg.seed,
                            base=None if base.is_zero else base)
    rows, fam = instability_probe(None, cfg.theta, cfg.epsilon, cfg.L, cfg.s, cfg.q, r0=cfg.r0,
                                  disc=cfg.grid.discretization(), sigma_s=cfg.sigma_s, family=fam,
                                  workers=cfg.workers)
    ctx.csv("probe.csv", ["epsilon", "sup_distance", "op_norm", "xs_seminorm", "regime", "regime_threshold", "error"],
            [(r.epsilon, r.sup_distance, r.op_norm, r.xs_seminorm, r.regime, r.threshold, r.error or "")
             for r in rows])
    ctx.csv("probe_singular_values.csv", ["epsilon", "index", "singular_value"],
            [(r.epsilon, k, v) for r in rows for k, v in enumerate(r.singular_values)])
    for r in rows:
        if r.error:
            ctx.failures.append({"case": f"probe eps={r.epsilon:g}", "error": r.error})
    norms = [r.op_norm for r in rows if not r.error]
    ctx.headline.update(cell_width=fam.h, cells=fam.n_cells,
                        monotone=bool(all(b <= a * 1.05 for a, b in zip(norms, norms[1:]))),
                        op_norms=norms)


_COMMANDS: dict[str, Callable[[_Context], None]] = {
    "kernelcheck": _kernelcheck, "omega": _omega, "entropy": _entropy, "solve": _solve,
    "matrix": _matrix, "decay": _decay, "diffuse": _diffuse, "probe": _probe,
}


def _jsonable(v):
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _summary(ctx: _Context, command: str, t0: float, extra: dict | None = None) -> dict:
    summary = {
        "command": command,
        "config_hash": ctx.hash,
        "status": "failed" if ctx.failures else "ok",
        "versions": _versions(),
        "headline": ctx.headline,
        "failures": ctx.failures,
        "files": sorted(ctx.files),
        "runtime_seconds": round(time.perf_counter() - t0, 3),
    }
    if extra:
        summary.update(extra)
    with open(ctx.out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return summary


def _run_one(command: str, cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, out)
    t0 = time.perf_counter()
    try:
        _COMMANDS[command](ctx)
    except Exception as exc:
        ctx.fail(command, exc)
    return _summary(ctx, command, t0)


def run(command: str, cfg: ExperimentConfig, out: str | Path | None = None) -> tuple[int, dict]:
    """Execute ``command``; returns ``(exit_status, summary)``.

    ``sweep`` runs every command listed in ``cfg.sweep`` in its own
    subdirectory, concurrently up to ``cfg.workers``.
    """
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    out = Path(out if out is not None else cfg.out)
    if command != "sweep":
        s = _run_one(command, cfg, out)
        return (1 if s["failures"] else 0), s
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with ThreadPoolExecutor(cfg.workers) as pool:
        subs = list(pool.map(lambda c: _run_one(c, cfg, out / c), cfg.sweep))
    ctx = _Context(cfg, out)
    for c, s in zip(cfg.sweep, subs):
        ctx.failures.extend({"case": f"{c}: {f['case']}", "error": f["error"]} for f in s["failures"])
        ctx.files.extend(f"{c}/{f}" for f in s["files"])
        ctx.headline[c] = s["headline"]
    s = _summary(ctx, "sweep", t0, {"cases": list(cfg.sweep)})
    return (1 if s["failures"] else 0), s
