import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rieszlab.oracles import fourier_sum_oracle, sphere_average
from rieszlab.riesz_kernel import (
    KernelError,
    RieszParams,
    SingularityError,
    eval_g,
    eval_g_and_grad,
    eval_g_delta,
    eval_g_smeared,
    eval_grad_g,
    eval_lap_g,
    eval_minus_lap_g,
    fourier_multiplier,
    kernel_fourier_coefficients,
    load_table,
    make_kernel,
    riesz_constant,
    save_table,
)

from conftest import kernel

coords = st.floats(-0.5, 0.5, allow_nan=False)
point = st.tuples(coords, coords, coords).map(np.array).filter(lambda x: np.linalg.norm(x) > 0.05)


def test_constant_coulomb():
    assert riesz_constant(3, 1.0) == pytest.approx(4 * math.pi, rel=1e-14)


def test_constant_log():
    assert riesz_constant(3, 0.0) == pytest.approx(2 * math.pi**2, rel=1e-14)


def test_params_validation():
    with pytest.raises(KernelError):
        RieszParams(3, 3.0)
    with pytest.raises(KernelError):
        RieszParams(3, -0.1)
    assert RieszParams(3, 0.5).dynamics_valid
    assert not RieszParams(3, 1.0).dynamics_valid
    with pytest.raises(KernelError):
        RieszParams(3, 1.5).require_dynamics()


def test_multiplier_zero_mode():
    m = fourier_multiplier(RieszParams(3, 0.5), np.array([0.0, 1.0, 4.0]))
    c = riesz_constant(3, 0.5)
    assert m[0] == 0.0
    assert m[1] == pytest.approx(c * (2 * math.pi) ** -2.5)
    assert m[2] == pytest.approx(c * (4 * math.pi) ** -2.5)


@pytest.mark.parametrize("s", [0.0, 0.5])
def test_matches_fourier_oracle(s):
    tab = kernel(s)
    rng = np.random.default_rng(7)
    x = rng.uniform(-0.5, 0.5, (40, 3))
    x = x[np.linalg.norm(x, axis=1) > 0.1]
    x = np.vstack([x, [0.25, 0.0, 0.0]])
    val, grad = fourier_sum_oracle(tab.params, x)
    v, g = eval_g_and_grad(tab, x)
    assert np.max(np.abs(v - val)) < 1e-8
    assert np.max(np.abs(g - grad)) < 1e-7


def test_singular_at_origin(table):
    with pytest.raises(SingularityError):
        eval_g(table, np.zeros(3))
    with pytest.raises(SingularityError):
        eval_grad_g(table, np.array([1.0, 0.0, 0.0]))


def test_near_origin_asymptotics(table):
    r = np.array([1e-2, 1e-4, 1e-6])
    x = np.outer(r, [0.6, 0.0, 0.8])
    err = np.abs(eval_g(table, x) * r**0.5 - 1)
    assert np.all(np.diff(err) < 0)
    assert err[-1] < 1e-2


@given(point)
def test_even_and_periodic(table, x):
    assert eval_g(table, -x) == pytest.approx(eval_g(table, x), abs=1e-12)
    assert eval_g(table, x + np.array([1.0, -1.0, 0.0])) == pytest.approx(eval_g(table, x), abs=1e-10)
    np.testing.assert_allclose(eval_grad_g(table, -x), -eval_grad_g(table, x), atol=1e-11)


@given(point)
def test_gradient_central_difference(table, x):
    h = 1e-5
    fd = np.array([(eval_g(table, x + h * e) - eval_g(table, x - h * e)) / (2 * h) for e in np.eye(3)])
    g = eval_grad_g(table, x)
    assert np.linalg.norm(fd - g) <= 1e-5 * max(np.linalg.norm(g), 1.0)


def test_zero_mean(table, table_log):
    for tab in (table, table_log):
        c = kernel_fourier_coefficients(tab, 32)
        assert abs(c[0, 0, 0]) < 1e-8


def test_coulomb_vs_classical_ewald():
    from rieszlab.oracles import coulomb_ewald_classical

    tab = kernel(1.0)
    rng = np.random.default_rng(3)
    x = rng.uniform(-0.5, 0.5, (50, 3))
    assert np.max(np.abs(eval_g(tab, x) / coulomb_ewald_classical(x) - 1)) < 1e-6


def test_coulomb_has_no_laplacian_table():
    tab = kernel(1.0)
    with pytest.raises(KernelError):
        eval_minus_lap_g(tab, np.array([0.1, 0.0, 0.0]))


@pytest.mark.parametrize("s", [0.0, 0.5])
def test_subharmonic_near_origin(s):
    tab = kernel(s)
    rng = np.random.default_rng(11)
    u = rng.normal(size=(200, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    x = u * rng.uniform(0.01, tab.r0 * 0.999, 200)[:, None]
    assert np.all(eval_lap_g(tab, x) < 0)
    assert tab.r0 == pytest.approx(0.25)


def test_laplacian_finite_difference(table):
    x = np.array([0.12, -0.07, 0.2])
    h = 1e-3
    lap = sum(eval_g(table, x + h * e) - 2 * eval_g(table, x) + eval_g(table, x - h * e) for e in np.eye(3)) / h**2
    assert eval_lap_g(table, x) == pytest.approx(lap, rel=1e-4)


def test_truncation_support(table):
    delta = 0.1
    x = np.array([[0.15, 0.0, 0.0], [0.0, 0.3, 0.1], [0.0, 0.0, 0.0]])
    v = eval_g_delta(table, x, delta)
    np.testing.assert_array_equal(v[:2], eval_g(table, x[:2]))
    assert v[2] == 0.0


def test_truncation_below_kernel(table):
    r = np.linspace(0.03, 0.099, 30)
    x = np.outer(r, [0.0, 1.0, 0.0])
    small = eval_g_delta(table, x, 0.03)
    big = eval_g_delta(table, x, 0.1)
    np.testing.assert_array_equal(small, eval_g(table, x))
    assert np.all(big <= small)


def test_truncation_gradient(table):
    x = np.array([0.05, 0.02, -0.03])
    h = 1e-6
    _, g = eval_g_delta(table, x, 0.08, grad=True)
    fd = np.array([(eval_g_delta(table, x + h * e, 0.08) - eval_g_delta(table, x - h * e, 0.08)) / (2 * h)
                   for e in np.eye(3)])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-6)
    with pytest.raises(KernelError):
        eval_g_delta(table, x, 0.3)


def test_smeared_matches_sphere_quadrature(table):
    rng = np.random.default_rng(2)
    u = rng.normal(size=(8, 3))
    x = u / np.linalg.norm(u, axis=1)[:, None] * rng.uniform(0.02, 0.2, 8)[:, None]
    eta = 0.05
    a = eval_g_smeared(table, x, eta)
    b = sphere_average(lambda p: eval_g(table, p), x, eta)
    assert np.max(np.abs(a - b)) < 1e-6
    a2 = eval_g_smeared(table, x, eta, times=2)
    b2 = sphere_average(lambda p: eval_g_smeared(table, p, eta), x, eta)
    assert np.max(np.abs(a2 - b2)) < 1e-6


def test_smeared_below_kernel(table):
    eta = 0.05
    r = np.linspace(0.01, table.r0 - eta - 1e-3, 40)
    x = np.outer(r, [0.48, 0.6, 0.64])
    assert np.all(eval_g_smeared(table, x, eta) <= eval_g(table, x))


def test_smeared_limit(table):
    x = np.array([0.1, 0.05, 0.0])
    errs = [abs(eval_g_smeared(table, x, eta) - eval_g(table, x)) for eta in (0.05, 0.01, 0.002)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-3


def test_smear_radius_checked(table):
    with pytest.raises(KernelError):
        eval_g_smeared(table, np.array([0.1, 0, 0]), 0.2)


def test_save_load_roundtrip(table6, tmp_path):
    p = tmp_path / "k.blob"
    save_table(table6, p)
    back = load_table(p)
    assert back.digest() == table6.digest()
    x = np.array([[0.1, 0.2, 0.3], [0.4, -0.1, 0.05]])
    np.testing.assert_array_equal(eval_g(back, x), eval_g(table6, x))


def test_accuracy_bounds():
    with pytest.raises(KernelError):
        make_kernel(RieszParams(3, 0.5), 1e-14)
    with pytest.raises(KernelError):
        make_kernel(RieszParams(3, 0.5), 0.0)


def test_looser_table_within_tolerance(table, table6):
    rng = np.random.default_rng(5)
    x = rng.uniform(-0.5, 0.5, (200, 3))
    assert np.max(np.abs(eval_g(table6, x) - eval_g(table, x))) < 1e-6
