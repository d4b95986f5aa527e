import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from rieszlab.oracles import fourier_sum_oracle
from rieszlab.particle_dynamics import (
    CoincidentPointsError,
    ConfigError,
    DriftField,
    NoiseStreams,
    ParticleState,
    SdeConfig,
    discrete_enstrophy,
    interaction_energy,
    min_pair_distance,
    pair_sums,
    pairwise_force,
    sample_iid,
    sample_uniform,
    simulate,
    step_em,
)
from rieszlab.riesz_kernel import KernelError, RieszParams, eval_g, eval_g_delta, eval_grad_g, eval_minus_lap_g
from rieszlab.spectral_fields import SpectralField

P = RieszParams(3, 0.5)


def loop_force(table, x, delta):
    N = len(x)
    F = np.zeros_like(x)
    for i in range(N):
        for j in range(N):
            if i != j:
                if delta is None:
                    F[i] -= eval_grad_g(table, x[i] - x[j]) / N
                else:
                    F[i] -= eval_g_delta(table, x[i] - x[j], delta, grad=True)[1] / N
    return F


def test_antipodal_pair(table):
    x = np.array([[0.25, 0.25, 0.25], [-0.25, -0.25, -0.25]])
    F = pairwise_force(x, table, None)
    np.testing.assert_allclose(F[0], -F[1], atol=1e-14)


@pytest.mark.parametrize("delta", [None, 0.2])
def test_force_matches_double_loop(table, delta):
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.5, 0.5, (8, 3))
    x[1] = x[0] + 0.05
    F = pairwise_force(x, table, delta)
    np.testing.assert_allclose(F, loop_force(table, x, delta), rtol=0, atol=1e-12)


def test_momentum(table):
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (64, 3))
    assert np.max(np.abs(pairwise_force(x, table, 0.05).sum(axis=0))) < 1e-12


def test_two_particle_energy(table):
    x = np.array([[0.1, 0.0, -0.2], [-0.05, 0.3, 0.1]])
    assert interaction_energy(x, table) == pytest.approx(eval_g(table, x[0] - x[1]) / 2, abs=1e-14)


def test_two_particle_energy_oracle(table):
    x = np.array([[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]])
    val, _ = fourier_sum_oracle(P, np.array([[0.5, 0.5, 0.5]]))
    assert interaction_energy(x, table) == pytest.approx(val[0] / 2, abs=1e-8)


def test_energy_and_enstrophy_double_loop(table):
    x = np.random.default_rng(2).uniform(-0.5, 0.5, (8, 3))
    H = sum(eval_g(table, x[i] - x[j]) for i in range(8) for j in range(8) if i != j) / 64
    D = sum(eval_minus_lap_g(table, x[i] - x[j]) for i in range(8) for j in range(8) if i != j) / 64
    assert interaction_energy(x, table) == pytest.approx(H, abs=1e-12)
    assert discrete_enstrophy(x, table) == pytest.approx(D, abs=1e-11)


def test_uniform_energy_zero_mean(table6):
    rng = np.random.default_rng(3)
    H = np.array([interaction_energy(rng.uniform(-0.5, 0.5, (32, 3)), table6) for _ in range(200)])
    assert abs(H.mean()) <= 3 * H.std(ddof=1) / math.sqrt(len(H))


def test_coincident_points(table):
    x = np.array([[0.1, 0.1, 0.1], [0.2, 0.0, 0.0], [0.1, 0.1, 0.1]])
    with pytest.raises(CoincidentPointsError) as err:
        pair_sums(table, x, None)
    assert err.value.pairs == [(0, 2)]


def test_min_distance_periodic():
    x = np.array([[0.49, 0.0, 0.0], [-0.49, 0.0, 0.0], [0.0, 0.2, 0.0]])
    assert min_pair_distance(x) == pytest.approx(0.02)
    assert min_pair_distance(x[:1]) == math.inf


def test_state_wraps_and_roundtrip(tmp_path):
    s = ParticleState(np.array([[0.7, -0.6, 0.2]]))
    np.testing.assert_allclose(s.positions, [[-0.3, 0.4, 0.2]])
    s.save(tmp_path / "s.blob")
    back = ParticleState.load(tmp_path / "s.blob")
    np.testing.assert_array_equal(back.positions, s.positions)
    p = ParticleState(np.arange(6.0).reshape(3, 2) / 10).permuted([2, 0, 1])
    assert p.labels.tolist() == [2, 0, 1]


def test_noise_block_consistency():
    a = NoiseStreams(5, 3, [0, 1, 2], 3, block=1)
    b = NoiseStreams(5, 3, [0, 1, 2], 3, block=256)
    for _ in range(300):
        np.testing.assert_array_equal(a.next(), b.next())
    c = NoiseStreams(5, 3, [2], 3)
    d = NoiseStreams(5, 3, [0, 1, 2], 3)
    np.testing.assert_array_equal(c.next()[0], d.next()[2])


def test_single_particle_fixed_without_noise(table):
    cfg = SdeConfig(P, 1, 0.5, 0.01, 0.1)
    s = ParticleState(np.array([[0.1, 0.2, 0.3]]))
    new, b = step_em(s, cfg, table, np.zeros((1, 3)))
    np.testing.assert_array_equal(new.positions, s.positions)
    assert b is None and new.time == pytest.approx(0.01)


class _Mirrored:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def next(self):
        z = self.rng.standard_normal(3)
        return np.stack([z, -z])


def test_mirrored_pair_stays_symmetric(table):
    cfg = SdeConfig(P, 2, 0.5, 1 / 64, 0.25, delta=0.05)
    init = ParticleState(np.array([[0.1, -0.05, 0.2], [-0.1, 0.05, -0.2]]))
    traj, _, final = simulate(cfg, init, table, diagnostics=False, noise_streams=_Mirrored(0))
    np.testing.assert_allclose(final.unwrapped[0], -final.unwrapped[1], atol=1e-12)
    np.testing.assert_allclose(traj.positions[:, 0], -traj.positions[:, 1], atol=1e-12)


def test_simulate_reproducible(table6):
    cfg = SdeConfig(P, 16, 0.5, 1 / 64, 0.125, delta=0.02, seed=4, replica=2)
    init = sample_uniform(16, 3, np.random.default_rng(0))
    a = simulate(cfg, init, table6)
    b = simulate(cfg, init, table6)
    np.testing.assert_array_equal(a[2].positions, b[2].positions)
    np.testing.assert_array_equal(a[1].H, b[1].H)
    other = SdeConfig(P, 16, 0.5, 1 / 64, 0.125, delta=0.02, seed=4, replica=3)
    assert not np.array_equal(simulate(other, init, table6)[2].positions, a[2].positions)


def test_diagnostics_consistent(table6, tmp_path):
    cfg = SdeConfig(P, 16, 0.5, 1 / 64, 0.125, delta=0.02)
    init = sample_uniform(16, 3, np.random.default_rng(1))
    _, diag, _ = simulate(cfg, init, table6)
    assert diag.H[0] == pytest.approx(interaction_energy(init, table6), abs=1e-14)
    assert np.all(np.diff(diag.Q_sup) >= 0)
    np.testing.assert_allclose(diag.Q, np.array(diag.H) + 2 * 0.5 * np.array(diag.intD))
    diag.write_csv(tmp_path / "d.csv")
    head = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert head == "t,H_N,D_N,intD,Q_N,minDist,F_N"


def test_constant_drift_shift(table6):
    # a constant drift translates every particle by b T relative to the undrifted run
    shape = (4, 4, 4)
    b = SpectralField(shape, values=np.stack([np.full(shape, 0.3), np.zeros(shape), np.zeros(shape)]), kind="vector")
    init = sample_uniform(8, 3, np.random.default_rng(2))
    plain = simulate(SdeConfig(P, 8, 0.5, 1 / 32, 0.25, delta=0.02), init, table6, diagnostics=False)[2]
    tilted = simulate(SdeConfig(P, 8, 0.5, 1 / 32, 0.25, delta=0.02, drift=DriftField.constant(b)), init, table6,
                      diagnostics=False)[2]
    np.testing.assert_allclose(tilted.unwrapped - plain.unwrapped, [[0.075, 0, 0]] * 8, atol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        SdeConfig(P, 4, 0.0, 0.01, 1.0)
    with pytest.raises(ConfigError):
        SdeConfig(P, 0, 0.5, 0.01, 1.0)
    with pytest.raises(ConfigError):
        SdeConfig(P, 4, 0.5, 0.01, 1.0, delta=0.3)
    with pytest.raises(KernelError):
        SdeConfig(RieszParams(3, 1.0), 4, 0.5, 0.01, 1.0)


def test_sample_iid_uniform_ks():
    mu = SpectralField((8,) * 3, values=np.ones((8,) * 3), kind="density")
    x = sample_iid(mu, 10_000, np.random.default_rng(5)).positions
    for j in range(3):
        assert stats.kstest(x[:, j], stats.uniform(loc=-0.5, scale=1).cdf).pvalue > 0.01
    again = sample_iid(mu, 100, np.random.default_rng(5)).positions
    np.testing.assert_array_equal(again, sample_iid(mu, 100, np.random.default_rng(5)).positions)


def test_sample_iid_moment_and_spike():
    mu = SpectralField.from_function((16,) * 3, lambda X: 1 + 0.8 * np.cos(2 * np.pi * X[0]), kind="density")
    x = sample_iid(mu, 20_000, np.random.default_rng(6)).positions
    m = np.mean(np.cos(2 * np.pi * x[:, 0]))
    assert abs(m - 0.4) < 4 * math.sqrt(0.5 / 20_000)
    spike = SpectralField.from_function((16,) * 3, lambda X: np.exp(-((X[0] ** 2 + X[1] ** 2 + X[2] ** 2) / 0.02)),
                                        kind="density")
    spike = SpectralField(spike.shape, values=np.clip(spike.values / spike.values.mean(), 0, None), kind="density")
    _, info = sample_iid(spike, 50, np.random.default_rng(7), return_stats=True)
    assert 0 < info["acceptance"] < 0.2


@given(st.integers(0, 10_000), st.integers(2, 12))
def test_force_antisymmetric_sum(table6, seed, N):
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, (N, 3))
    s = pair_sums(table6, x, 0.1)
    assert np.max(np.abs(s.force.sum(axis=0))) < 1e-12
    perm = np.random.default_rng(seed + 1).permutation(N)
    s2 = pair_sums(table6, x[perm], 0.1)
    np.testing.assert_allclose(s2.force, s.force[perm], atol=1e-12)
    assert s2.H == pytest.approx(s.H, abs=1e-12)
