import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rieszlab import modulated_energy as me
from rieszlab.riesz_kernel import RieszParams, eval_g, eval_g_smeared, eval_grad_g, riesz_constant
from rieszlab.spectral_fields import SpectralField, energy, paint_particles, riesz_convolve

P = RieszParams(3, 0.5)
C = riesz_constant(3, 0.5)
TWO_PI = 2 * math.pi


def mu_func(X):
    return 1 + 0.3 * np.cos(TWO_PI * (X[0] + X[1])) + 0.2 * np.sin(TWO_PI * X[2])


def psi_func(X):
    return np.stack([np.sin(TWO_PI * X[1]), np.cos(TWO_PI * (X[0] - X[2])), 0.5 * np.sin(TWO_PI * X[0])])


def fields(n=16):
    mu = SpectralField.from_function((n,) * 3, mu_func, kind="density")
    psi = SpectralField.from_function((n,) * 3, psi_func, kind="vector")
    return mu, psi


class ModeSum:
    """Full complex DFT of grid samples, evaluated at arbitrary points by explicit summation."""

    def __init__(self, values):
        n = values.shape[-1]
        c = np.fft.fftn(values, axes=(-3, -2, -1)) / n**3
        k1 = np.fft.fftfreq(n, 1 / n)
        K = np.stack(np.meshgrid(k1, k1, k1, indexing="ij"), -1)
        lead = c.reshape((-1,) + c.shape[-3:]) if c.ndim > 3 else c[None]
        keep = np.max(np.abs(lead), axis=0) > 1e-14
        # the sample grid starts at -1/2
        self.K = K[keep]
        self.c = lead[:, keep]

    def __call__(self, x):
        return (self.c @ np.exp(TWO_PI * 1j * self.K @ (x + 0.5).T)).real


def oracle_commutator(x, table, n=32):
    """Off-diagonal commutator against (mu_N - mu)^2, assembled from explicit sums."""
    N = len(x)
    X = SpectralField((n,) * 3, values=np.zeros((n,) * 3)).grid.points()
    mu_v, psi_v = mu_func(X), psi_func(X)
    psi_at = ModeSum(psi_v)(x).T
    pp = 0.0
    for i in range(N):
        for j in range(N):
            if i != j:
                pp += (psi_at[i] - psi_at[j]) @ eval_grad_g(table, x[i] - x[j])
    pp /= N**2
    k1 = np.fft.fftfreq(n, 1 / n)
    K = np.stack(np.meshgrid(k1, k1, k1, indexing="ij"), 0)
    ksq = np.sum(K**2, axis=0)
    ghat = np.where(ksq > 0, C * (4 * math.pi**2 * np.where(ksq > 0, ksq, 1)) ** -1.25, 0.0)
    muh = np.fft.fftn(mu_v) / n**3
    grad_pot = [np.fft.ifftn(TWO_PI * 1j * K[j] * ghat * muh).real * n**3 for j in range(3)]
    pm = [np.fft.fftn(psi_v[j] * mu_v) / n**3 for j in range(3)]
    conv = sum(np.fft.ifftn(TWO_PI * 1j * K[j] * ghat * pm[j]).real * n**3 for j in range(3))
    t1 = np.mean(np.sum(psi_at * ModeSum(np.stack(grad_pot))(x).T, axis=1))
    t2 = np.mean(ModeSum(conv)(x)[0])
    pf = t1 - t2
    # int int (psi(x) - psi(y)).grad g(x - y) dmu dmu, both halves by Parseval on the full grid
    A = sum(np.sum(np.conj(pm[j]) * TWO_PI * 1j * K[j] * ghat * muh) for j in range(3)).real
    B = -sum(np.sum(np.conj(muh) * TWO_PI * 1j * K[j] * ghat * pm[j]) for j in range(3)).real
    ff = A + B
    return pp - 2 * pf + ff, pp - ff


def test_single_particle_uniform_zero(table):
    one = SpectralField((8,) * 3, values=np.ones((8,) * 3), kind="density")
    rep = me.modulated_energy(np.array([[0.1, 0.2, 0.3]]), one, table)
    assert abs(rep.F_N) < 1e-14 and abs(rep.cross) < 1e-14 and rep.self_energy == 0.0


def test_parts_add_up(table):
    mu, _ = fields()
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (20, 3))
    rep = me.modulated_energy(x, mu, table)
    assert rep.F_N == pytest.approx(rep.H_N + rep.cross + rep.self_energy, abs=1e-15)
    painted = paint_particles(x, mu.shape)
    cross = -2 * float(np.mean(painted.values * riesz_convolve(mu, P).values))
    assert rep.cross == pytest.approx(cross, abs=1e-12)
    assert rep.self_energy == pytest.approx(energy(mu, P), abs=1e-15)
    assert rep.as_dict()["grid_shape"] == [16, 16, 16]


def test_smeared_pair_energy_double_loop(table):
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (10, 3))
    x[3] = x[2] + np.array([0.01, 0.02, 0.0])
    eta = 0.04
    total = sum(eval_g_smeared(table, x[i] - x[j], eta, 2) for i in range(10) for j in range(10)) / 100
    assert me.smeared_pair_energy(table, x, eta) == pytest.approx(total, abs=1e-8)


def test_smeared_cross_term_by_painting(table):
    mu, _ = fields()
    x = np.random.default_rng(2).uniform(-0.5, 0.5, (12, 3))
    eta = 0.05
    rep = me.smeared_modulated_energy(x, mu, table, eta)
    painted = paint_particles(x, mu.shape, eta)
    cross = -2 * float(np.mean(painted.values * riesz_convolve(mu, P).values))
    assert rep.cross == pytest.approx(cross, abs=1e-12)
    assert rep.eta == eta


@given(st.integers(0, 10_000), st.integers(2, 40))
def test_smeared_energy_nonnegative(table6, seed, N):
    rng = np.random.default_rng(seed)
    mu = me.random_density(rng)
    x = rng.uniform(-0.5, 0.5, (N, 3))
    assert me.smeared_modulated_energy(x, mu, table6, 0.05).F_N >= -1e-10


def test_default_eta():
    assert me.default_eta(64, 3) == pytest.approx(0.25 / 4)
    assert me.default_eta(512, 3, scale=1.0) == pytest.approx(1 / 8)


def test_close_pair_sums(table, table_log):
    x = np.array([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [0.3, 0.3, 0.3]])
    d = np.array([0.01, 0.0, 0.0])
    assert me.close_pair_mass(table, x, 0.02) == pytest.approx(eval_g(table, d) / 9)
    assert me.close_pair_mass(table_log, x, 0.02) == pytest.approx(1 / 9)
    assert me.close_pair_mass(table, x, 0.005) == 0.0
    gap = eval_g(table, d) - eval_g_smeared(table, d, 0.05)
    assert gap > 0
    assert me.close_pair_excess(table, x, 0.05, 0.1) == pytest.approx(2 * gap / 9)


def test_refine_and_sup_norm():
    f = SpectralField.from_function((8,) * 3, lambda X: np.cos(TWO_PI * X[0]) * np.sin(TWO_PI * 2 * X[1]))
    fine = me.refine(f)
    np.testing.assert_allclose(fine.values[::2, ::2, ::2], f.values, atol=1e-14)
    assert me.sup_norm(SpectralField.from_function((8,) * 3, lambda X: np.cos(TWO_PI * X[0]))) == pytest.approx(1.0)
    _, psi = fields(8)
    np.testing.assert_allclose(me.refine(psi).values[:, ::2, ::2, ::2], psi.values, atol=1e-14)


def test_homogeneous_norm_mode():
    f = SpectralField.from_function((8,) * 3, lambda X: np.cos(TWO_PI * X[0]))
    assert me.homogeneous_norm(f, P) ** 2 == pytest.approx(TWO_PI**-2.5 / 2)


def test_commutator_constant_psi_vanishes(table):
    mu, _ = fields()
    x = np.random.default_rng(3).uniform(-0.5, 0.5, (16, 3))
    for c in ([1.0, 0.0, 0.0], [0.36, 0.48, 0.8]):
        psi = SpectralField(mu.shape, values=np.stack([np.full(mu.shape, v) for v in c]), kind="vector")
        for form in ("modulated", "difference"):
            assert abs(me.commutator_lhs(x, mu, psi, table, form)) < 1e-12


def test_commutator_matches_oracle(table):
    mu, psi = fields()
    x = np.random.default_rng(4).uniform(-0.5, 0.5, (16, 3))
    mod, diff = oracle_commutator(x, table)
    assert me.commutator_lhs(x, mu, psi, table, "modulated") == pytest.approx(mod, abs=1e-8)
    assert me.commutator_lhs(x, mu, psi, table, "difference") == pytest.approx(diff, abs=1e-8)
    with pytest.raises(ValueError):
        me.commutator_lhs(x, mu, psi, table, "other")


def test_trilinear_trivial_and_closed_form():
    n = 16
    one = SpectralField((n,) * 3, values=np.ones((n,) * 3))
    assert me.trilinear_form(one, one, one, P) == 0.0
    c = SpectralField.from_function((n,) * 3, lambda X: np.cos(TWO_PI * X[0]))
    expected = C**2 * TWO_PI ** (2 * (0.5 - 3)) * TWO_PI**2 / 2
    assert me.trilinear_form(c, c, one, P) == pytest.approx(expected, rel=1e-12)


def test_trilinear_symmetry_and_refinement():
    rng = np.random.default_rng(5)
    f, g, h = (me.random_trig_field(rng, (16,) * 3, 3) for _ in range(3))
    a = me.trilinear_form(f, g, h, P)
    assert me.trilinear_form(g, f, h, P) == pytest.approx(a, rel=1e-12)
    fine = me.trilinear_form(me.refine(f), me.refine(g), me.refine(h), P)
    assert fine == pytest.approx(a, abs=1e-10)


def test_random_trig_field_normalized():
    rng = np.random.default_rng(6)
    f = me.random_trig_field(rng, (16,) * 3, 2)
    assert np.sqrt(np.mean(f.values**2)) == pytest.approx(1.0)
    assert abs(f.mean) < 1e-14
    v = me.random_trig_field(rng, (16,) * 3, 2, components=3)
    assert v.kind == "vector" and v.values.shape == (3, 16, 16, 16)


def test_random_density_depth():
    mu = me.random_density(np.random.default_rng(7), depth=0.7)
    assert mu.mean == pytest.approx(1.0)
    assert float(np.min(me.refine(mu).values)) == pytest.approx(0.3, abs=1e-12)


def test_instances_paired_across_N():
    a = me.make_instance("test", 4, 64)
    b = me.make_instance("test", 4, 128)
    again = me.make_instance("test", 4, 64)
    np.testing.assert_array_equal(a.mu.values, b.mu.values)
    np.testing.assert_array_equal(a.tri[2].values, b.tri[2].values)
    assert a.eps == b.eps
    np.testing.assert_array_equal(a.x, again.x)
    assert a.x.shape == (64, 3) and b.x.shape == (128, 3)
    c = me.make_instance("calib", 4, 64)
    assert not np.array_equal(c.mu.values, a.mu.values)
    assert [me.make_instance("test", i, 8).descriptor["kind"] for i in range(3)] == ["iid_mu", "iid_other",
                                                                                    "clustered"]


def test_instance_records_cover_suite(table6):
    inst = me.make_instance("test", 2, 32)
    recs = me.instance_records(inst, table6, me.SlackConstants(1.0, 0.9))
    assert tuple(r.name for r in recs) == me.INEQUALITIES
    for r in recs:
        assert np.isfinite(r.lhs) and r.scaled >= 0


def test_record_algebra():
    r = me.InequalityRecord("x", 3.0, 1.0, 4.0, {}, {"N": 8})
    assert r.needed_constant() == 0.5
    assert r.with_constant(0.5).ratio == pytest.approx(1.0)
    assert r.with_constant(1.0).ratio == pytest.approx(0.6)
    assert me.InequalityRecord("x", 0.5, 1.0, 4.0, {}, {}).needed_constant() == 0.0
    assert me.InequalityRecord("x", 2.0, 1.0, 0.0, {}, {}).needed_constant() == math.inf
    assert r.row()["inst_N"] == 8


@given(st.floats(0, 100), st.floats(0, 10), st.floats(1e-6, 10))
def test_needed_constant_is_tight(lhs, fixed, scaled):
    r = me.InequalityRecord("x", lhs, fixed, scaled, {}, {})
    C = r.needed_constant()
    assert lhs <= r.rhs(C) * (1 + 1e-12) + 1e-12
    if lhs > fixed:
        assert r.rhs(C * (1 - 1e-6)) < lhs


def test_fit_positivity_power_law():
    samples = {N: np.array([0.1, -2.0 / N, 0.3]) for N in (32, 64, 128, 256)}
    fit = me.fit_positivity(samples, safety=1.5)
    assert fit.beta == pytest.approx(1.0)
    assert fit.C == pytest.approx(3.0)
    assert fit.as_constants().slack(64, 2.0) == pytest.approx(3.0 * 2.0 / 64)
    with pytest.raises(ValueError):
        me.fit_positivity({8: np.array([1.0]), 16: np.array([1.0])})


def test_fit_and_evaluate():
    recs = [me.InequalityRecord("trilinear", lhs, 0.0, 1.0, {}, {"N": N})
            for lhs, N in ((1.0, 64), (2.0, 64), (1.5, 128))]
    consts = me.fit_constants(recs, safety=1.5)
    assert consts == {"trilinear": 3.0}
    summ = me.evaluate(recs, consts)
    assert summ.violations == {"trilinear": 0}
    assert summ.max_ratio["trilinear"] == {64: pytest.approx(2 / 3), 128: pytest.approx(0.5)}
    assert summ.stability()["trilinear"] == pytest.approx(4 / 3)
    tight = me.evaluate(recs, {"trilinear": 1.8})
    assert tight.violations == {"trilinear": 1}


def test_constants_roundtrip(tmp_path):
    fit = me.PositivityFit(0.8, 0.93, {64: 0.01}, 1.5)
    me.save_constants(tmp_path / "c.json", fit, {"trilinear": 2.5}, P)
    consts, frozen = me.load_constants(tmp_path / "c.json")
    assert consts == me.SlackConstants(0.8, 0.93)
    assert frozen == {"trilinear": 2.5}
    assert json.loads((tmp_path / "c.json").read_text())["params"] == {"d": 3, "s": 0.5}


def test_records_csv(tmp_path):
    recs = [me.InequalityRecord("a", 0.1, 0.0, 1.0, {"t": 1.0}, {"N": 4}).with_constant(1.0),
            me.InequalityRecord("b", 0.2, 0.0, 1.0, {"u": 2.0}, {"N": 4}).with_constant(1.0)]
    me.write_records_csv(tmp_path / "r.csv", recs)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "name,lhs,fixed,scaled,ratio,term_t,inst_N,term_u"
    assert lines[1].startswith("a,0.1,0.0,1.0,0.1,1.0,4,")
