from __future__ import annotations

import math

import numpy as np
import pytest

from core.errors import InvalidArgumentError
from core.models.data import RngSpec
from core.models.network import DiagonalField, OSDNetParams
from core.schemas.osdnet import EmbeddingConfig
from core.services import network_service, osdnet_service as osd
from core.services.path_service import OT, conditional_velocity, optimal_velocity

UNIT = EmbeddingConfig(scale=1.0, wavelength=10000.0, dim=2)


def zero_subspace(z, t):
    return np.zeros_like(z)


@pytest.fixture
def unit_quadratic():
    return osd.compute_quadratic_data(UNIT, panels=256)


def test_optimal_instance_reproduces_optimal_field(cube):
    data, basis = cube
    field = osd.optimal_field(basis)
    generator = np.random.default_rng(0)
    for _ in range(100):
        x = generator.standard_normal(data.d)
        t = float(generator.uniform(0.0, 0.95))
        assert np.abs(field(x, t) - optimal_velocity(x, t, data)).max() < 1e-9


def test_perturbed_instance_differs(cube):
    data, basis = cube
    x = np.ones(data.d)
    gap = osd.optimal_field(basis, 0.1)(x, 0.3) - optimal_velocity(x, 0.3, data)
    assert np.abs(gap).max() > 0.05


def test_batched_evaluation_matches_points(cube):
    data, basis = cube
    field = osd.optimal_field(basis)
    X = np.random.default_rng(1).standard_normal((data.d, 4))
    t = np.array([0.1, 0.2, 0.5, 0.9])
    batch = field(X, t)
    for b in range(4):
        assert np.allclose(batch[:, b], field(X[:, b], t[b]))


def test_off_subspace_term_vanishes_on_the_data_subspace(cube):
    _, basis = cube
    field = osd.OSDNetField(basis, lambda t: 3.0, zero_subspace)
    x = basis.V @ np.array([0.5, -1.0, 2.0])
    assert np.allclose(field(x, 0.4), 0.0, atol=1e-12)


def test_constant_diagonal_scales_the_projector(cube):
    _, basis = cube
    field = osd.OSDNetField(basis, lambda t: -2.5, zero_subspace)
    x = np.random.default_rng(2).standard_normal(basis.d)
    assert np.allclose(field(x, 0.7), -2.5 * basis.Vperp @ basis.Vperp.T @ x)


def test_optimal_parameters_are_projection_invariant(cube):
    data, basis = cube
    x = np.random.default_rng(3).standard_normal(data.d)
    o_full, s_full = osd.optimal_params(0.6, x, basis, data)
    o_proj, s_proj = osd.optimal_params(0.6, basis.V @ basis.project(x), basis, data)
    assert o_full == o_proj == pytest.approx(-2.5)
    assert np.allclose(s_full, s_proj, atol=1e-9)


def test_osdnet_eval_with_learned_parts(cube, small_net, small_embedding):
    _, basis = cube
    net = network_service.init_net(basis.D, small_net, RngSpec(0))
    diagonal = DiagonalField(np.linspace(-1, 1, small_embedding.dim), small_embedding)
    x = np.random.default_rng(4).standard_normal(basis.d)
    direct = osd.osdnet_eval(x, 0.2, basis, diagonal, net)
    field = osd.osdnet_field(basis, OSDNetParams(diagonal, net))
    assert np.allclose(direct, field(x, 0.2))


def test_endpoint_decomposition(cube):
    _, basis = cube
    x = np.random.default_rng(5).standard_normal(basis.d)
    sub, off, norm = osd.endpoint_decompose(x, basis)
    assert np.allclose(sub + off, x)
    assert norm == pytest.approx(np.linalg.norm(basis.project_perp(x)))


def test_gauss_legendre_integrates_polynomials():
    nodes, weights = osd.gauss_legendre(4, 0.0, 2.0)
    assert weights.sum() == pytest.approx(2.0)
    assert (nodes**7 * weights).sum() == pytest.approx(2.0**8 / 8)
    with pytest.raises(InvalidArgumentError):
        osd.gauss_legendre(0)


def test_quadratic_data_closed_forms(unit_quadratic):
    assert np.allclose(unit_quadratic.e, [1 - math.cos(1.0), math.sin(1.0)], atol=1e-12)
    assert unit_quadratic.min_eigenvalue > 0.0
    assert np.allclose(unit_quadratic.A, unit_quadratic.A.T)


def test_reduced_loss_matches_quadrature(unit_quadratic):
    kappa = np.array([0.7, -1.3])
    exact = osd.loss_O_exact(DiagonalField(kappa, UNIT), 1, panels=256)
    assert osd.reduced_loss(kappa, unit_quadratic) == pytest.approx(exact, abs=1e-10)


def test_kappa_limit_is_stationary(unit_quadratic):
    kappa = osd.kappa_limit(unit_quadratic)
    gradient = osd.reduced_loss_grad(kappa, unit_quadratic)
    assert np.abs(gradient).max() < 1e-8 * max(1.0, np.abs(kappa).max())
    best = osd.reduced_loss(kappa, unit_quadratic)
    for offset in np.eye(2) * 1e-3:
        assert osd.reduced_loss(kappa + offset, unit_quadratic) > best
        assert osd.reduced_loss(kappa - offset, unit_quadratic) > best


def test_gradient_flow_endpoints(unit_quadratic):
    kappa0 = np.array([0.5, 0.5])
    assert np.allclose(osd.kappa_flow_from(0.0, kappa0, unit_quadratic), kappa0)
    limit = osd.kappa_limit(unit_quadratic)
    late = osd.kappa_flow_from(1e6, kappa0, unit_quadratic)
    assert np.allclose(late, limit, rtol=1e-6, atol=1e-6)
    with pytest.raises(InvalidArgumentError):
        osd.kappa_flow_from(-1.0, kappa0, unit_quadratic)


def test_gradient_flow_solves_its_ode(unit_quadratic):
    kappa0 = np.array([0.5, -0.2])
    tau, h = 0.3, 1e-5
    ahead = osd.kappa_flow_from(tau + h, kappa0, unit_quadratic)
    behind = osd.kappa_flow_from(tau - h, kappa0, unit_quadratic)
    derivative = (ahead - behind) / (2 * h)
    expected = -osd.reduced_loss_grad(osd.kappa_flow_from(tau, kappa0, unit_quadratic), unit_quadratic)
    assert np.allclose(derivative, expected, atol=1e-6)


def test_kappa_flow_starts_at_the_offset_limit(unit_quadratic):
    limit = osd.kappa_limit(unit_quadratic)
    c = np.array([0.4, -0.3])
    assert np.allclose(osd.kappa_flow(0.0, c, unit_quadratic), c + limit, atol=1e-12)
    distances = [np.linalg.norm(osd.kappa_flow(tau, c, unit_quadratic) - limit) for tau in (0.0, 1.0, 10.0, 100.0)]
    assert all(later < earlier for earlier, later in zip(distances, distances[1:]))
    assert np.allclose(osd.kappa_flow(1e6, c, unit_quadratic), limit, rtol=1e-6, atol=1e-6)
    with pytest.raises(InvalidArgumentError):
        osd.kappa_flow(-1.0, c, unit_quadratic)


def test_kappa_flow_matches_gradient_descent(unit_quadratic):
    limit = osd.kappa_limit(unit_quadratic)
    c = np.array([1.0, 0.0])
    eta, steps = 2e-5, 25_000
    iterate = limit + c
    for _ in range(steps):
        iterate = iterate - eta * osd.reduced_loss_grad(iterate, unit_quadratic)
    flow = osd.kappa_flow(eta * steps, c, unit_quadratic)
    assert np.abs(flow - iterate).max() < 1e-5
    assert np.allclose(flow, osd.kappa_flow_from(eta * steps, limit + c, unit_quadratic), atol=1e-10)


def test_diagonal_exponential():
    assert osd.diagonal_exponential(DiagonalField.zeros(UNIT)) == pytest.approx(1.0)
    constant = EmbeddingConfig(scale=1e-12, wavelength=10000.0, dim=2)
    # emb ≈ (0, 1) for a vanishing scale, so ô ≡ κ₁
    assert osd.diagonal_exponential(DiagonalField(np.array([0.0, 0.4]), constant)) == pytest.approx(
        math.exp(0.4)
    )


def test_limit_factor_routes_agree(unit_quadratic):
    kappa = osd.kappa_limit(unit_quadratic)
    via_field = osd.diagonal_exponential(DiagonalField(kappa, UNIT), panels=256)
    assert via_field == pytest.approx(osd.offsubspace_limit_factor(unit_quadratic), rel=1e-8)


def test_chi_mean():
    assert osd.chi_mean(0) == 0.0
    assert osd.chi_mean(1) == pytest.approx(math.sqrt(2 / math.pi))
    assert osd.chi_mean(80) == pytest.approx(math.sqrt(80), rel=0.01)


def test_sign_changes():
    assert osd.sign_changes(np.array([1.0, -1.0, 0.0, 2.0, 3.0])) == 2
    assert osd.sign_changes(np.zeros(4)) == 0


def test_exact_loss_closed_forms():
    assert osd.loss_O_exact(lambda t: 0.0, 5) == pytest.approx(5.0)
    c = 0.7
    assert osd.loss_O_exact(lambda t: c, 5) == pytest.approx((c**2 / 3 + c + 1) * 5, rel=1e-12)
    assert osd.loss_O_exact(osd.OptimalDiagonal(), 5, upper=0.99) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(InvalidArgumentError):
        osd.loss_O_exact(lambda t: 0.0, 5, upper=0.0)


def test_optimal_instance_has_zero_losses(cube):
    data, basis = cube
    batch = osd.draw_batch(data, RngSpec(0), 500, 1e-3, 0)
    assert osd.loss_O_mc(osd.OptimalDiagonal(), basis, batch)[0] == 0.0
    assert osd.tst_loss_s(osd.OptimalSubspace.from_basis(basis), basis, batch)[0] == 0.0


def test_zero_subspace_loss_is_target_norm(cube):
    data, basis = cube
    batch = osd.draw_batch(data, RngSpec(0), 500, 1e-3, 1)
    target = osd.subspace_target(basis, batch)
    value, stderr = osd.tst_loss_s(zero_subspace, basis, batch)
    assert value == pytest.approx(float((target**2).sum(axis=0).mean()))
    assert stderr > 0.0


def test_monte_carlo_loss_matches_exact(cube):
    data, basis = cube
    k = basis.d - basis.D
    batch = osd.draw_batch(data, RngSpec(1), 50_000, 1e-3, 0)
    value, stderr = osd.loss_O_mc(lambda t: 0.7, basis, batch)
    # E‖g‖² = k for the Gaussian part of Vperpᵀx; the cube data have no off-subspace part
    exact = osd.loss_O_exact(lambda t: 0.7, k, upper=1 - 1e-3)
    assert abs(value - exact) < 4 * stderr


def test_loss_gradient_matches_finite_differences(cube, small_embedding):
    data, basis = cube
    batch = osd.draw_batch(data, RngSpec(2), 200, 1e-3, 0)
    kappa = np.random.default_rng(6).standard_normal(small_embedding.dim) * 0.1
    _, grads = osd.loss_O_grad(DiagonalField(kappa, small_embedding), basis, batch)
    h = 1e-6
    for i in range(small_embedding.dim):
        e = np.zeros_like(kappa)
        e[i] = h
        plus = osd.loss_O_mc(DiagonalField(kappa + e, small_embedding), basis, batch)[0]
        minus = osd.loss_O_mc(DiagonalField(kappa - e, small_embedding), basis, batch)[0]
        assert (plus - minus) / (2 * h) == pytest.approx(grads["kappa"][i], rel=1e-4, abs=1e-6)


def test_cfm_gradients_decouple(cube, small_net, small_embedding):
    data, basis = cube
    net = network_service.init_net(basis.D, small_net, RngSpec(0))
    diagonal = DiagonalField(np.linspace(-0.5, 0.5, small_embedding.dim), small_embedding)
    batch = osd.draw_batch(data, RngSpec(3), 300, 1e-3, 0)
    _, diag_grads, net_grads = osd.cfm_loss_grads(basis, OSDNetParams(diagonal, net), batch)
    _, off_grads = osd.loss_O_grad(diagonal, basis, batch)
    conditional = basis.project(conditional_velocity(batch.x, batch.x1, OT, batch.t))
    _, sub_grads = osd.tst_loss_s_grad(net, basis, batch, target=conditional)

    def gap(a: np.ndarray, b: np.ndarray) -> float:
        return float(np.abs(a - b).max() / (1.0 + np.abs(b).max()))

    assert gap(diag_grads["kappa"], off_grads["kappa"]) < 1e-10
    for name, value in sub_grads.items():
        assert gap(net_grads[name], value) < 1e-10


def test_cfm_loss_of_optimal_field_is_irreducible_variance(cube):
    data, basis = cube
    batch = osd.draw_batch(data, RngSpec(4), 100, 1e-3, 0)
    value, _ = osd.cfm_loss(osd.optimal_field(basis), batch)
    assert value > 0.0


def test_embedding_scale_improves_the_limit():
    errors = {}
    for scale in (1.0, 1000.0):
        cfg = EmbeddingConfig(scale=scale, wavelength=10000.0, dim=32)
        q = osd.compute_quadratic_data(cfg, panels=2048)
        errors[scale] = osd.weighted_limit_error(q, cfg, upper=0.9, panels=2048)
    assert errors[1000.0] < errors[1.0]
