import numpy as np
import pytest
from scipy import stats

from conftest import random_model_state
from ptvmc.ansatz import LogStateVector, VariationalState
from ptvmc.exact import evaluate_ansatz_dense
from ptvmc.lattice import LatticeSpec, born_distribution, configs_to_indices, enumerate_configurations
from ptvmc.operators import build_tfim, magnetization_x
from ptvmc.sampling import (
    SampleSet,
    SamplingError,
    SamplerConfig,
    batch_means_stderr,
    estimate_observable,
    full_summation,
    local_estimator,
    sample,
)

LAT = LatticeSpec(2, 2)


def _lsv(logpsi):
    logpsi = np.asarray(logpsi, dtype=complex)
    n = int(np.log2(logpsi.size))
    return VariationalState(LogStateVector(n), np.concatenate([logpsi.real, logpsi.imag]))


def test_chi_square_against_born_distribution():
    rng = np.random.default_rng(0)
    state = _lsv(0.6 * rng.normal(size=16) + 1j * rng.normal(size=16))
    p = born_distribution(evaluate_ansatz_dense(state))
    cfg = SamplerConfig(n_chains=32, n_samples_per_chain=400, burn_in=50, thinning=2, seed=11)
    s = sample(state, cfg)
    counts = np.bincount(configs_to_indices(s.configs), minlength=16)
    assert counts.sum() == cfg.n_samples
    # chains are correlated, so scale counts down to a conservative effective size
    eff = counts / 4
    res = stats.chisquare(eff, p * eff.sum())
    assert res.pvalue > 1e-3


def test_delta_distribution():
    logpsi = np.full(16, -50.0)
    logpsi[9] = 0.0
    s = sample(_lsv(logpsi), SamplerConfig(4, 20, 20, 1, seed=3))
    assert np.all(configs_to_indices(s.configs) == 9)


def test_same_seed_same_samples_and_different_seed_differs():
    state = random_model_state("jastrow_conv", LAT, seed=1, scale=0.3)
    cfg = SamplerConfig(4, 16, 10, 1, seed=5)
    a, b = sample(state, cfg), sample(state, cfg)
    assert np.array_equal(a.configs, b.configs)
    c = sample(state, SamplerConfig(4, 16, 10, 1, seed=6))
    assert not np.array_equal(a.configs, c.configs)


def test_chain_streams_are_independent_of_chain_count():
    state = random_model_state("jastrow", LAT, seed=2)
    a = sample(state, SamplerConfig(2, 8, 5, 1, seed=7))
    b = sample(state, SamplerConfig(4, 8, 5, 1, seed=7))
    assert np.array_equal(a.configs[:16], b.configs[:16])


def test_sample_layout():
    s = sample(random_model_state("lsv", LAT), SamplerConfig(3, 5, 0, 2, seed=0))
    assert s.configs.shape == (15, 4)
    assert np.array_equal(s.chain, np.repeat(np.arange(3), 5))
    assert np.allclose(s.weights, 1 / 15)
    assert not s.is_exact


def test_exchange_proposal_conserves_magnetization():
    state = random_model_state("jastrow", LatticeSpec(2, 3), seed=4, scale=0.5)
    start = np.array([[1, 1, 1, -1, -1, -1]] * 3, dtype=np.int8)
    s = sample(state, SamplerConfig(3, 30, 5, 1, "exchange", seed=2), start=start)
    assert np.all(s.configs.sum(axis=1) == 0)
    assert len({tuple(x) for x in s.configs}) > 1


def test_detailed_balance_of_two_state_system():
    # one spin: acceptance ratio min(1, p'/p) gives occupation p
    state = _lsv([0.0, np.log(0.5)])
    s = sample(state, SamplerConfig(64, 200, 20, 1, seed=9))
    frac = np.mean(configs_to_indices(s.configs) == 1)
    assert frac == pytest.approx(0.2, abs=0.03)


def test_invalid_config():
    with pytest.raises(ValueError):
        SamplerConfig(n_chains=0)
    with pytest.raises(ValueError, match="proposal"):
        SamplerConfig(proposal="cluster")
    with pytest.raises(ValueError):
        SamplerConfig(burn_in=-1)


def test_full_summation_of_zero_state():
    zero = VariationalState(LogStateVector(2), np.concatenate([np.full(4, -np.inf), np.zeros(4)]))
    with pytest.raises(SamplingError, match="zero"):
        full_summation(zero)


def test_full_summation_weights_are_born():
    state = random_model_state("jastrow_conv", LAT, seed=3, scale=0.3)
    s = full_summation(state)
    assert s.is_exact
    assert np.array_equal(s.configs, enumerate_configurations(LAT))
    assert np.allclose(s.weights, born_distribution(evaluate_ansatz_dense(state)), atol=1e-15)


def test_sample_set_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        SampleSet(np.ones((2, 2)), np.array([0.5, 0.6]), "mcmc")
    with pytest.raises(ValueError, match="sum to 1"):
        SampleSet(np.ones((2, 2)), np.array([np.nan, 1.0]), "mcmc")
    with pytest.raises(ValueError, match="one weight"):
        SampleSet(np.ones((2, 2)), np.array([1.0]), "mcmc")


@pytest.mark.parametrize("kind", ["lsv", "jastrow", "conv", "jastrow_conv"])
def test_local_estimator_matches_dense(kind):
    state = random_model_state(kind, LAT, seed=5)
    H = build_tfim(LAT, 1.0, 1.3)
    psi = evaluate_ansatz_dense(state)
    xs = enumerate_configurations(LAT)
    loc = local_estimator(state, H, xs)
    assert np.allclose(loc, (H.to_dense() @ psi) / psi)


def test_full_summation_observable_is_exact():
    state = random_model_state("jastrow_conv", LAT, seed=6, scale=0.3)
    psi = evaluate_ansatz_dense(state)
    mx = magnetization_x(4)
    mean, err = estimate_observable(state, mx, full_summation(state))
    ref = np.vdot(psi, mx.to_dense() @ psi).real / np.vdot(psi, psi).real
    assert mean == pytest.approx(ref, abs=1e-14)
    assert err == 0.0


def test_mc_observable_within_error_bars():
    state = random_model_state("jastrow_conv", LAT, seed=6, scale=0.3)
    exact, _ = estimate_observable(state, magnetization_x(4), full_summation(state))
    mean, err = estimate_observable(state, magnetization_x(4), sample(state, SamplerConfig(16, 200, 50, 2, seed=1)))
    assert err > 0
    assert abs(mean - exact) < 5 * err


def test_batch_means_stderr():
    rng = np.random.default_rng(0)
    values = rng.normal(size=4000)
    w = np.full(4000, 1 / 4000)
    chain = np.repeat(np.arange(40), 100)
    se = batch_means_stderr(values, w, chain)
    assert se == pytest.approx(1 / np.sqrt(4000), rel=0.3)
    assert np.isfinite(batch_means_stderr(values, w, np.zeros(4000)))
    assert np.isnan(batch_means_stderr(values[:1], w[:1] * 4000, np.zeros(1)))
