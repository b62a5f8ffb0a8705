import numpy as np
import pytest
import sympy
from numpy.testing import assert_allclose

from rtelab.diffusion import (DiffusionOperator, diffusion_entry_prediction, diffusion_prediction_table,
                              solve_diffusion)
from rtelab.geometry import harmonic_mode
from rtelab.transport import AbsorptionField

OFFSET = AbsorptionField.off_center_bump(0.5, 0.2, (0.25, 0.1))


def _manufactured(sigma_a, sigma_s=1.0):
    """Exact solution, its source (symbolic Laplacian) and zero boundary data."""
    x, y = sympy.symbols("x y", real=True)
    phi = (1 - x**2 - y**2) * sympy.cos(x + 2 * y)
    lap = sympy.diff(phi, x, 2) + sympy.diff(phi, y, 2)
    f_phi = sympy.lambdify((x, y), phi, "numpy")
    f_lap = sympy.lambdify((x, y), lap, "numpy")

    def source(R, T):
        X, Y = R * np.cos(T), R * np.sin(T)
        return -f_lap(X, Y) / (2 * sigma_s) + sigma_a(X, Y) * f_phi(X, Y)

    def exact(R, T):
        return f_phi(R * np.cos(T), R * np.sin(T))

    return source, exact


@pytest.mark.parametrize("sigma_a", [AbsorptionField.radial_bump(0.5, 0.45), OFFSET])
def test_manufactured_solution_second_order(sigma_a):
    source, exact = _manufactured(sigma_a)
    errs = []
    for n_r in (40, 80):
        sol = solve_diffusion(sigma_a, 1.0, source, 0.0, n_r=n_r, n_theta=48)
        R, T = sol.grid.mesh()
        errs.append(np.abs(sol.values - exact(R, T)).max())
        assert sol.residual <= 1e-8
    assert errs[1] < 1e-3
    assert 3.0 < errs[0] / errs[1] < 5.0


@pytest.mark.parametrize("m", [0, 3, 8])
def test_harmonic_dirichlet_data(m):
    mode = harmonic_mode(m, 2 if m else 1)
    sol = solve_diffusion(AbsorptionField.zero(), 1.0, 0.0, mode, n_r=200, n_theta=48)
    R, T = sol.grid.mesh()
    assert_allclose(sol.values, mode.extension_polar(R, T), atol=5e-4 * max(1, m) ** 2 / 100 + 1e-12)


def test_operator_matches_symbolic_laplacian():
    sig = AbsorptionField.radial_bump(0.3, 0.6)
    source, exact = _manufactured(sig, sigma_s=2.0)
    op = DiffusionOperator(sig, 2.0, 120, 48)
    R, T = op.grid.mesh()
    applied = op.apply(exact(R, T), np.zeros(48))
    inner = R < 0.95
    assert_allclose(applied[inner], source(R, T)[inner], atol=2e-3)


def test_mode_and_banded_paths_agree():
    radial = AbsorptionField.radial_bump(0.5, 0.45)
    generic = AbsorptionField(radial.evaluator, radial.support_radius, np.inf, radial.sup_bound,
                              radial.length_scale, False, (), "generic")
    src = lambda R, T: np.cos(2 * T) * (1 - R**2)
    a = solve_diffusion(radial, 1.0, src, harmonic_mode(1, 1), n_r=60, n_theta=32)
    b = solve_diffusion(generic, 1.0, src, harmonic_mode(1, 1), n_r=60, n_theta=32)
    assert DiffusionOperator(radial, 1.0, 60, 32).radial_only and not DiffusionOperator(generic, 1.0, 60, 32).radial_only
    assert_allclose(a.values, b.values, atol=1e-11)


def test_prediction_table_consistent_and_symmetric():
    T = diffusion_prediction_table(OFFSET, 3, n_r=100)
    assert_allclose(T[3, 5], diffusion_entry_prediction(OFFSET, (2, 1), (3, 1), n_r=100), rtol=1e-12)
    # the diffusion-limit perturbation is self-adjoint
    assert_allclose(T, T.T, atol=1e-9 * np.abs(T).max())
    assert diffusion_entry_prediction(AbsorptionField.zero(), (1, 1), (1, 1)) == 0.0


def test_diffusion_field_csv(tmp_path):
    sol = solve_diffusion(AbsorptionField.zero(), 1.0, 1.0, 0.0, n_r=10, n_theta=8)
    sol.to_csv(tmp_path / "phi.csv")
    lines = (tmp_path / "phi.csv").read_text().splitlines()
    assert len(lines) == 81
    # -(1/2) Lap Phi = 1 with zero data: Phi = (1 - r^2) / 2
    R, _ = sol.grid.mesh()
    # exact up to the O(h^2) ghost-node boundary closure
    assert_allclose(sol.values, (1 - R**2) / 2, atol=0.2 / 10**2)
