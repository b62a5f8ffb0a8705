import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate

from rtelab.geometry import harmonic_mode
from rtelab.transport import (AbsorptionField, Bump, Medium, SolveError, TransportDiscretization, TransportSolver,
                              boundary_current, boundary_source, cq_seminorm_fd, first_moment, k1_spectral_norm,
                              kernel_hat, kernel_hat_integral, optical_depth, solve_scalar_flux)

SMALL = TransportDiscretization(n_r=12, n_theta=16, n_dir=16)
BUMP = AbsorptionField.off_center_bump(0.4, 0.3, (0.2, -0.1))


def test_optical_depth_against_adaptive_quadrature():
    med = Medium(0.1, 1.3, BUMP)
    x, y = np.array([-0.6, 0.3]), np.array([0.5, -0.4])
    L = np.hypot(*(y - x))
    seg = lambda t: BUMP(*(x + t * (y - x)))
    ref = integrate.quad(seg, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)[0] * L
    assert_allclose(optical_depth(x, y, med), (1.3 * L + 0.01 * ref) / 0.1, rtol=1e-10)
    assert optical_depth(x, y, med) == optical_depth(y, x, med)
    with pytest.raises(ValueError):
        optical_depth(x, x, med)


def test_bump_profile_and_seminorm_oracle():
    f = BUMP
    assert_allclose(f(0.2, -0.1), 0.4)
    assert f(0.5, -0.1) == 0.0 and f(0.9, 0.0) == 0.0
    # f = x^2 y has second derivatives 2y, 2x, 0; sup over the square is 2
    assert_allclose(cq_seminorm_fd(lambda x, y: x**2 * y, 2, 1e-3, 1.0), 2.0, rtol=1e-2)
    with pytest.raises(ValueError):
        Bump((0.0, 0.0), -0.1, 1.0)


def test_medium_validation():
    with pytest.raises(ValueError):
        Medium(0.0)
    with pytest.raises(ValueError):
        Medium(0.1, -1.0)
    with pytest.raises(ValueError):
        TransportSolver(Medium(0.8), SMALL)


def test_kernel_symbol_forms_agree():
    xi = np.linspace(0, 200, 41)
    assert_allclose(kernel_hat_integral(xi, 0.05, 1.5), kernel_hat(xi, 0.05, 1.5), atol=1e-12)
    assert kernel_hat(0.0, 0.1) == 1.0


def test_k1_norm_matches_power_iteration():
    med = Medium(0.2)
    solver = TransportSolver(med, SMALL, need_current=False)
    K = solver.k1_dense()
    w = np.sqrt(solver.grid.weights.ravel())
    M = w[:, None] * K / w[None, :]
    v = np.ones(M.shape[0])
    for _ in range(3000):
        v = M.T @ (M @ v)
        v /= np.linalg.norm(v)
    sigma = math.sqrt(v @ (M.T @ (M @ v)))
    assert_allclose(k1_spectral_norm(med, SMALL), sigma, rtol=1e-9)
    assert sigma < 1.0


@pytest.mark.parametrize("eps", [0.5, 0.05, 0.005])
def test_constants_are_preserved_without_absorption(eps):
    flux = solve_scalar_flux(Medium(eps), 2.5)
    assert_allclose(flux.values, 2.5, atol=1e-8)
    cur = first_moment(Medium(eps), 2.5, flux)
    assert np.abs(cur.radial).max() < 1e-9 and np.abs(cur.tangential).max() < 1e-9


def test_absorption_lowers_flux():
    u0 = solve_scalar_flux(Medium(0.1), 1.0).values
    u1 = solve_scalar_flux(Medium(0.1, 1.0, BUMP), 1.0).values
    assert np.all(u1 <= u0 + 1e-12) and u1.min() < 0.999


def test_dense_and_circulant_routes_agree():
    radial = AbsorptionField.radial_bump(0.5, 0.45)
    generic = AbsorptionField(radial.evaluator, radial.support_radius, np.inf, radial.sup_bound,
                              radial.length_scale, False, (), "radial-as-generic")
    mode = harmonic_mode(2, 1)
    u_c = TransportSolver(Medium(0.1, 1.0, radial), SMALL).solve(mode)
    u_d = TransportSolver(Medium(0.1, 1.0, generic), SMALL).solve(mode)
    assert_allclose(u_d, u_c, atol=1e-11)


def test_rotation_equivariance():
    disc = TransportDiscretization(n_r=12, n_theta=16, n_dir=16)
    shift = 3
    phi = 2 * np.pi * shift / disc.n_theta
    c = np.array([0.3, 0.1])
    rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    a = AbsorptionField.off_center_bump(0.5, 0.2, tuple(c))
    b = AbsorptionField.off_center_bump(0.5, 0.2, tuple(rot @ c))
    u_a = solve_scalar_flux(Medium(0.1, 1.0, a), 1.0, disc).values
    u_b = solve_scalar_flux(Medium(0.1, 1.0, b), 1.0, disc).values
    assert_allclose(np.roll(u_a, shift, axis=1), u_b, atol=1e-10)


def test_boundary_measurement_tends_to_diffusion_dtn():
    # without absorption the measurement approaches -(1/2) d_r of the harmonic extension
    m = 2
    c = boundary_current(Medium(0.02), harmonic_mode(m, 1), 3)
    k = 2 * m - 1
    assert_allclose(c[k], -m / 2, rtol=0.05)
    assert np.abs(np.delete(c, k)).max() < 1e-8


def test_boundary_source_forms():
    psi = np.linspace(0, 2 * np.pi, 5)
    ev, n = boundary_source(harmonic_mode(1, 1))
    assert n == 1 and ev(psi).shape == (1, 5)
    ev, n = boundary_source([harmonic_mode(0, 1), harmonic_mode(2, 2)])
    assert n == 2
    ev, n = boundary_source(np.cos)
    assert_allclose(ev(psi)[0], np.cos(psi))
    ev, n = boundary_source([0.0, 1.0, 0.0])
    assert_allclose(ev(psi)[0], harmonic_mode(1, 1).boundary(psi))
    with pytest.raises(ValueError):
        boundary_source([1.0, 2.0])


@pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
def test_singular_system_raises_solve_error(monkeypatch):
    solver = TransportSolver(Medium(0.1, 1.0, BUMP), SMALL, need_current=False)
    n = solver.grid.size
    monkeypatch.setattr(solver._asm, "K1", np.eye(n))
    solver._lu = None
    with pytest.raises(SolveError):
        solver.solve(1.0)


def test_flux_csv(tmp_path):
    flux = solve_scalar_flux(Medium(0.2), 1.0, SMALL)
    flux.to_csv(tmp_path / "u.csv")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "r,theta,value" and len(lines) == 1 + SMALL.n_r * SMALL.n_theta
    assert_allclose(float(lines[1].split(",")[2]), flux.values[0, 0], rtol=0, atol=0)
