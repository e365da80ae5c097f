import math

import mpmath
import numpy as np
import pytest
from scipy import stats

from selfsim_trees.discrete_tree import DiscreteTree
from selfsim_trees.errors import ParameterError, TruncationError
from selfsim_trees.generators import UNIT_SEGMENT, DecorationKernel, LambdaSpec
from selfsim_trees.qsd import (MixtureQSD, corollary_sampler, death_kernel, geometric_constant, mixture_eta,
                               qsd_residual, sample_copy, thinned_mixture)


def test_death_kernel_small_entries():
    kernel = death_kernel(0.3, 5)
    assert kernel.matrix[0, 0] == pytest.approx(0.3)
    assert kernel.matrix[1, 0] == pytest.approx(2 * 0.3 * 0.7)
    assert kernel.matrix[1, 2] == 0.0
    assert np.all(np.triu(kernel.matrix, 1) == 0)


def test_death_kernel_row_sums():
    kernel = death_kernel(0.4, 400)
    k = np.arange(1, 401)
    assert np.allclose(kernel.row_sums(), 1 - 0.6 ** k, rtol=0, atol=1e-12)


def test_death_kernel_entries_against_exact_binomials():
    kernel = death_kernel(0.4, 120)
    mpmath.mp.dps = 40
    for k, j in [(120, 48), (120, 1), (77, 30), (10, 10)]:
        exact = mpmath.binomial(k, j) * mpmath.mpf('0.4') ** j * mpmath.mpf('0.6') ** (k - j)
        assert kernel.matrix[k - 1, j - 1] == pytest.approx(float(exact), rel=1e-10)


def test_death_kernel_validation():
    with pytest.raises(ParameterError):
        death_kernel(1.0, 5)
    with pytest.raises(ParameterError):
        death_kernel(0.5, 0)


def test_single_atom_eta_is_zero_truncated_poisson():
    mixture = mixture_eta(LambdaSpec.atoms([(2.0, 1.0)]), 60, q=0.7)
    k = np.arange(1, 61)
    expected = stats.poisson.pmf(k, 2.0) / -math.expm1(-2.0)
    assert np.allclose(mixture.eta, expected, rtol=1e-10, atol=0)
    assert mixture.d == pytest.approx(-math.expm1(-2.0))


def test_two_atom_eta_is_linear():
    mixture = mixture_eta(LambdaSpec.atoms([(1.0, 1.0), (2.0, 1.0)]), 40, q=0.5)
    k = np.arange(1, 41)
    raw = stats.poisson.pmf(k, 1.0) + stats.poisson.pmf(k, 2.0)
    assert np.allclose(mixture.eta, raw / raw.sum(), rtol=1e-10, atol=0)


def test_comb_eta_normalization_and_d():
    spec = LambdaSpec.comb(1.0, 0.4, 0.7, -40, 40)
    mixture = mixture_eta(spec, 1500)
    oracle = mpmath.fsum(mpmath.mpf('0.7') ** n * -mpmath.expm1(-mpmath.mpf('0.4') ** -n) for n in range(-40, 41))
    assert mixture.d == pytest.approx(float(oracle), rel=1e-12)
    assert np.all(mixture.eta >= 0)
    assert mixture.eta.sum() + mixture.tail_mass == pytest.approx(1.0, abs=1e-12)
    assert (mixture.q, mixture.p) == (0.7, 0.4)


def test_comb_reindexing_leaves_eta_invariant():
    a = mixture_eta(LambdaSpec.comb(1.0, 0.4, 0.7, -30, 30), 300)
    b = mixture_eta(LambdaSpec.comb(1.0 / 0.4, 0.4, 0.7, -31, 29), 300)
    assert np.allclose(a.eta, b.eta, rtol=0, atol=1e-12)


def test_max_tail_is_enforced():
    spec = LambdaSpec.atoms([(50.0, 1.0)])
    with pytest.raises(TruncationError):
        mixture_eta(spec, 20, q=0.5, max_tail=1e-10)
    assert mixture_eta(spec, 200, q=0.5, max_tail=1e-10).tail_mass < 1e-10


def test_comb_is_a_quasi_stationary_vector():
    mixture = mixture_eta(LambdaSpec.comb(1.0, 0.4, 0.7, -40, 40), 1500)
    result = qsd_residual(mixture, death_kernel(0.4, 1500), window=400)
    assert result.residual < 1e-8
    assert result.leak < 1e-10


def test_single_atom_is_not_quasi_stationary():
    mixture = mixture_eta(LambdaSpec.atoms([(1.0, 1.0)]), 400, q=0.7)
    assert qsd_residual(mixture, death_kernel(0.4, 400)).residual > 1e-2


def test_point_mass_residual():
    eta = MixtureQSD.from_vector(np.eye(10)[0], q=0.7)
    assert qsd_residual(eta, death_kernel(0.4, 10)).residual == pytest.approx(0.3)


def test_residual_preconditions():
    mixture = mixture_eta(LambdaSpec.comb(1.0, 0.4, 0.7, -5, 5), 50)
    with pytest.raises(ParameterError):
        qsd_residual(mixture, death_kernel(0.4, 40))
    with pytest.raises(ParameterError):
        qsd_residual(mixture, death_kernel(0.5, 50))
    with pytest.raises(ParameterError):
        qsd_residual(mixture, death_kernel(0.4, 50), window=51)
    with pytest.raises(ParameterError):
        qsd_residual(MixtureQSD.from_vector([1.0]), death_kernel(0.4, 1))


def test_thinned_mixture_matches_matrix_product():
    spec = LambdaSpec.atoms([(1.0, 1.0), (3.0, 0.5)])
    mixture = mixture_eta(spec, 80, q=0.5)
    product = mixture.eta @ death_kernel(0.4, 80).matrix
    assert np.allclose(product, thinned_mixture(mixture, 0.4), rtol=0, atol=1e-12)


def test_copy_is_zero_truncated_poisson_path(rng):
    spec = LambdaSpec.atoms([(1.5, 1.0)])
    kernel = DecorationKernel.constant(UNIT_SEGMENT)
    sizes = np.array([sample_copy(spec, kernel, rng).size - 1 for _ in range(4000)])
    assert sizes.min() >= 1
    expected_mean = 1.5 / -math.expm1(-1.5)
    assert abs(sizes.mean() - expected_mean) < 0.08


def test_corollary_single_root_probability(rng):
    spec = LambdaSpec.comb(1.0, 0.4, 0.7, -6, 6)
    kernel = DecorationKernel.constant(UNIT_SEGMENT)
    c = geometric_constant(spec)
    singles = sum(corollary_sampler(spec, kernel, rng) == DiscreteTree.single() for _ in range(3000))
    assert abs(singles / 3000 - c) < 0.03
    with pytest.raises(ParameterError):
        corollary_sampler(spec, kernel, rng, p=0.5)
