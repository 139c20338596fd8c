import math

import numpy as np
import pytest
from scipy.linalg import eigvalsh

from core.entropy import (
    matrix_mutual_information,
    matrix_renyi_entropy,
    matrix_renyi_entropy_alpha2,
    renyi_entropy_discrete,
)
from core.errors import ContractError
from core.linalg import gram_matrix, trace_normalize
from core.rng import SeededRng
from core.tensor import Tensor
from schemas.config_schema import KernelSpec


def _normalized_gram(rng, b, d=3, kind="rbf"):
    return trace_normalize(gram_matrix(Tensor(rng.normal(size=(b, d))), KernelSpec(kind=kind))).numpy()


def test_discrete_entropy_of_uniform_and_point_mass():
    assert renyi_entropy_discrete(np.full(4, 0.25), 2.0) == pytest.approx(2.0)
    assert renyi_entropy_discrete(np.full(4, 0.25), 1.0) == pytest.approx(2.0)
    assert renyi_entropy_discrete([1.0, 0.0, 0.0], 0.5) == pytest.approx(0.0)


def test_discrete_entropy_rejects_bad_inputs():
    with pytest.raises(ContractError):
        renyi_entropy_discrete([0.5, 0.6], 2.0)
    with pytest.raises(ContractError):
        renyi_entropy_discrete([0.5, 0.5], 0.0)


def test_matrix_entropy_of_identity_and_rank_one(float64):
    b = 8
    assert matrix_renyi_entropy(np.eye(b) / b, 2.0) == pytest.approx(3.0)
    assert matrix_renyi_entropy(np.full((b, b), 1.0 / b), 2.0) == pytest.approx(0.0, abs=1e-10)


def test_alpha2_closed_form_matches_eigenvalues(float64):
    for i in range(30):
        rng = SeededRng(99).child(i)
        k = _normalized_gram(rng, int(rng.integers(2, 17)), kind=("rbf", "polynomial")[i % 2])
        eig = np.clip(eigvalsh(k), 0.0, None)
        assert matrix_renyi_entropy_alpha2(Tensor(k)).item() == pytest.approx(-math.log2(np.sum(eig ** 2)), abs=1e-8)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 4.0])
def test_matrix_entropy_bounds(float64, rng, alpha):
    k = _normalized_gram(rng, 10)
    assert -1e-8 <= matrix_renyi_entropy(k, alpha) <= math.log2(10) + 1e-8


def test_unnormalized_matrix_is_rejected(float64):
    with pytest.raises(ContractError, match="trace"):
        matrix_renyi_entropy(np.eye(3), 2.0)


def test_mutual_information_with_itself_and_with_a_constant(float64, rng):
    k = _normalized_gram(rng, 6)
    constant = np.full((6, 6), 1.0 / 6)
    assert matrix_mutual_information(k, k, 2.0) > 0.0
    assert matrix_mutual_information(constant, k, 2.0) == pytest.approx(0.0, abs=1e-9)


def _random_distribution(rng, n):
    weights = rng.uniform(size=n) + 1e-3
    return weights / weights.sum()


@pytest.mark.parametrize("n", [2, 5, 20])
def test_discrete_entropy_is_non_increasing_in_alpha(n):
    for i in range(10):
        p = _random_distribution(SeededRng(n).child(i), n)
        values = [renyi_entropy_discrete(p, alpha) for alpha in (0.5, 1.0, 2.0, 5.0)]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(values, values[1:]))


def test_discrete_entropy_is_continuous_at_shannon(rng):
    p = _random_distribution(rng, 7)
    shannon = renyi_entropy_discrete(p, 1.0)
    assert renyi_entropy_discrete(p, 1.0001) == pytest.approx(shannon, abs=1e-3)
    assert renyi_entropy_discrete(p, 0.9999) == pytest.approx(shannon, abs=1e-3)


def test_matrix_entropy_is_continuous_at_shannon(float64, rng):
    k = _normalized_gram(rng, 6)
    assert matrix_renyi_entropy(k, 1.0001) == pytest.approx(matrix_renyi_entropy(k, 1.0), abs=1e-3)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_matrix_entropy_ignores_sample_order(float64, rng, alpha):
    k = _normalized_gram(rng, 8)
    order = rng.permutation(8)
    permuted = k[np.ix_(order, order)]
    assert matrix_renyi_entropy(permuted, alpha) == pytest.approx(matrix_renyi_entropy(k, alpha), abs=1e-10)
    assert matrix_renyi_entropy_alpha2(Tensor(permuted)).item() == pytest.approx(
        matrix_renyi_entropy_alpha2(Tensor(k)).item(), abs=1e-12)


def _entropy_from_spectrum(k, alpha):
    eig = eigvalsh(k)
    eig = eig[eig > 1e-12]
    if alpha == 1.0:
        return float(-np.sum(eig * np.log2(eig)))
    return float(np.log2(np.sum(eig ** alpha)) / (1.0 - alpha))


@pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0])
def test_mutual_information_matches_an_independent_computation(float64, alpha):
    rng = SeededRng(41)
    k1 = _normalized_gram(rng.child(0), 5)
    k2 = _normalized_gram(rng.child(1), 5, kind="polynomial")
    joint = k1 * k2 / np.trace(k1 * k2)
    expected = _entropy_from_spectrum(k1, alpha) + _entropy_from_spectrum(k2, alpha) - _entropy_from_spectrum(joint,
                                                                                                              alpha)
    assert matrix_mutual_information(k1, k2, alpha) == pytest.approx(expected, abs=1e-8)
