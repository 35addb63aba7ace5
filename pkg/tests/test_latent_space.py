import math

import numpy as np
from numpy.testing import assert_allclose
import pytest

from inemo.errors import AllocationError, AlreadyAllocatedError, CheckpointMismatchError, InvalidArgumentError
from inemo.services.latent_space import (
    LatentPartition,
    allocate_class,
    allocate_random,
    build_etf,
    default_population_size,
    partition,
    sample_population,
)


@pytest.mark.parametrize("n", [2, 4, 10, 100])
def test_etf_is_equiangular(n):
    e = build_etf(n, 128, seed=0)
    gram = e @ e.T
    assert_allclose(np.diag(gram), 1.0, atol=1e-9)
    off = gram[~np.eye(n, dtype=bool)]
    assert_allclose(off, -1.0 / (n - 1), atol=1e-6)


def test_etf_with_identity_basis():
    e = build_etf(2, 2, seed=0, basis=np.eye(2))
    s = 1 / math.sqrt(2)
    assert_allclose(e, [[s, -s], [-s, s]])
    assert e[0] @ e[1] == pytest.approx(-1.0)


def test_etf_rejects_bad_sizes():
    with pytest.raises(InvalidArgumentError):
        build_etf(1, 8, 0)
    with pytest.raises(InvalidArgumentError):
        build_etf(10, 8, 0)
    with pytest.raises(InvalidArgumentError):
        build_etf(4, 8, 0, basis=np.eye(8))


def test_population_is_unit_and_seeded():
    pop = sample_population(10000, 2, seed=4)
    assert_allclose(np.linalg.norm(pop, axis=1), 1.0, atol=1e-9)
    assert np.linalg.norm(pop.mean(axis=0)) < 0.05
    assert not np.allclose(sample_population(3, 8, 1)[0], sample_population(3, 8, 2)[0])
    np.testing.assert_array_equal(sample_population(3, 8, 1), sample_population(3, 8, 1))


def test_partition_assigns_to_nearest_centroid_and_breaks_ties_low():
    e = build_etf(4, 8, seed=2)
    np.testing.assert_array_equal(partition(e, e), [0, 1, 2, 3])
    mid = e[1] + e[2]
    mid /= np.linalg.norm(mid)
    assert partition(mid[None], e)[0] == 1

    pop = sample_population(4000, 8, seed=3)
    assign = partition(pop, e)
    np.testing.assert_array_equal(assign, np.argmax(pop @ e.T, axis=1))
    assert np.all(np.bincount(assign, minlength=4) >= 1)
    with pytest.raises(InvalidArgumentError):
        partition(pop[:, :4], e)


def test_default_population_size_is_capped():
    assert default_population_size(400, 32) == 16 * 400 * 32
    assert default_population_size(1100, 100) == 2 ** 20


def test_unused_pool_shrinks_as_classes_are_allocated():
    latent = LatentPartition.create(dim=8, max_classes=4, population_size=2000, seed=0)
    assert len(latent.unused_pool()) == 2000
    theta = allocate_class(latent, 2, 30)
    assert theta.shape == (30, 8)
    assert_allclose(np.linalg.norm(theta, axis=1), 1.0, atol=1e-9)
    members = latent.members(2)
    assert all(np.any(np.all(members == row, axis=1)) for row in theta)
    pool = latent.unused_pool()
    assert len(pool) == 2000 - len(members)
    assert not np.any(partition(pool, latent.centroids) == 2)


def test_allocation_samples_with_replacement_from_small_partition():
    latent = LatentPartition.create(dim=8, max_classes=4, population_size=2000, seed=1)
    size = len(latent.members(0))
    assert size < 1100
    theta = allocate_class(latent, 0, 1100)
    assert len(theta) == 1100
    assert len(np.unique(theta, axis=0)) <= size


def test_allocation_contracts():
    latent = LatentPartition.create(dim=8, max_classes=4, population_size=500, seed=0)
    assert allocate_class(latent, 1, 0).shape == (0, 8)
    assert 1 in latent.used_classes
    with pytest.raises(AlreadyAllocatedError):
        allocate_class(latent, 1, 10)
    with pytest.raises(InvalidArgumentError):
        allocate_class(latent, 4, 10)

    latent.assignment = np.zeros_like(latent.assignment)
    with pytest.raises(AllocationError):
        allocate_class(latent, 3, 10)


def test_allocation_is_deterministic():
    a = LatentPartition.create(8, 4, 1000, seed=5)
    b = LatentPartition.create(8, 4, 1000, seed=5)
    np.testing.assert_array_equal(allocate_class(a, 0, 20), allocate_class(b, 0, 20))


def test_unused_pool_sample_is_bounded():
    latent = LatentPartition.create(8, 4, 1000, seed=0)
    rng = np.random.default_rng(0)
    assert latent.sample_unused_pool(64, rng).shape == (64, 8)
    assert latent.sample_unused_pool(0, rng).shape == (0, 8)
    for c in range(4):
        allocate_class(latent, c, 5)
    assert latent.sample_unused_pool(64, rng).shape == (0, 8)


def test_partition_metadata_regenerates_the_same_partition():
    latent = LatentPartition.create(8, 4, 1000, seed=9)
    allocate_class(latent, 3, 5)
    back = LatentPartition.from_meta(latent.to_meta())
    np.testing.assert_array_equal(back.population, latent.population)
    np.testing.assert_array_equal(back.assignment, latent.assignment)
    assert back.used_classes == {3}

    meta = latent.to_meta()
    meta["class_sizes"] = [1, 2, 3, 994]
    with pytest.raises(CheckpointMismatchError):
        LatentPartition.from_meta(meta)


@pytest.mark.parametrize("n", [4, 10])
def test_etf_gram_does_not_depend_on_the_basis(n):
    rng = np.random.default_rng(n)
    expected = np.full((n, n), -1.0 / (n - 1))
    np.fill_diagonal(expected, 1.0)
    for _ in range(3):
        basis, _ = np.linalg.qr(rng.standard_normal((32, n)))
        e = build_etf(n, 32, seed=0, basis=basis)
        assert_allclose(e @ e.T, expected, atol=1e-6)


def test_allocated_features_belong_to_the_class_partition():
    latent = LatentPartition.create(dim=8, max_classes=4, population_size=500, seed=2)
    members = {tuple(row) for row in latent.members(3)}
    theta = allocate_class(latent, 3, 1100)
    assert len(theta) == 1100
    assert all(tuple(row) in members for row in theta)
    assert np.all(partition(theta, latent.centroids) == 3)


def test_random_allocation_ignores_the_partition():
    latent = LatentPartition.create(dim=8, max_classes=4, population_size=2000, seed=2)
    theta = allocate_random(latent, 1, 400, seed=5)
    assert theta.shape == (400, 8)
    assert_allclose(np.linalg.norm(theta, axis=1), 1.0, atol=1e-9)
    assert len(set(partition(theta, latent.centroids).tolist())) == 4
    assert 1 in latent.used_classes
    np.testing.assert_array_equal(theta, allocate_random(LatentPartition.create(8, 4, 2000, seed=2), 1, 400, seed=5))
    with pytest.raises(AlreadyAllocatedError):
        allocate_random(latent, 1, 10)
    with pytest.raises(InvalidArgumentError):
        allocate_random(latent, 4, 10)
