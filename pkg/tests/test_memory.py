import math

import numpy as np
import pytest

from inemo.errors import AlreadyAllocatedError, InvalidArgumentError, NotFoundError
from inemo.models import Exemplar, Pose
from inemo.services.memory import (
    MeshStore,
    ReplayBuffer,
    azimuth_bin,
    bin_counts,
    mesh_store_add,
    mesh_store_get,
    rebalance,
    reduce_class,
    select_exemplars,
)

from conftest import make_mesh


def _samples(class_id, per_bin, bins=4, seed=0):
    """Samples with `per_bin[b]` azimuths drawn inside each bin."""
    rng = np.random.default_rng(seed)
    width = 2 * math.pi / bins
    out = []
    for b, n in enumerate(per_bin):
        for _ in range(n):
            az = (b + rng.uniform(0.05, 0.95)) * width
            out.append(Exemplar(f"c{class_id:03d}-{len(out):04d}", class_id, Pose(az), 0))
    return out


def _buffer_with(class_id, per_bin, capacity=100, bins=4):
    buf = ReplayBuffer(capacity, bins)
    buf.add_class(class_id, [Exemplar(e.sample_id, e.class_id, e.pose, azimuth_bin(e.pose.azimuth, bins))
                             for e in _samples(class_id, per_bin, bins)])
    return buf


def test_azimuth_bins():
    assert azimuth_bin(0.0, 8) == 0
    assert azimuth_bin(2 * math.pi - 1e-12, 8) == 7
    assert azimuth_bin(2 * math.pi, 8) == 0
    assert azimuth_bin(-0.1, 4) == 3


def test_selection_spreads_evenly_over_bins():
    chosen, short = select_exemplars(_samples(0, [10, 10, 10, 10]), 12, bins=4)
    assert not short
    assert bin_counts(chosen, 4).tolist() == [3, 3, 3, 3]


def test_selection_merges_empty_bin_with_neighbour():
    chosen, _ = select_exemplars(_samples(0, [10, 0, 10, 10]), 12, bins=4)
    assert len(chosen) == 12
    assert len({e.sample_id for e in chosen}) == 12


def test_selection_fills_the_remainder():
    chosen, _ = select_exemplars(_samples(0, [10, 10, 10, 10]), 10, bins=4)
    counts = bin_counts(chosen, 4)
    assert counts.sum() == 10
    assert counts.max() - counts.min() <= 1
    assert all(c >= 2 for c in counts)


def test_selection_with_too_few_samples_keeps_everything():
    samples = _samples(0, [1, 2, 0, 1])
    chosen, short = select_exemplars(samples, 12, bins=4)
    assert short
    assert [e.sample_id for e in chosen] == [s.sample_id for s in samples]
    with pytest.raises(InvalidArgumentError):
        select_exemplars(samples, 0)


def test_selection_is_seeded():
    samples = _samples(0, [7, 5, 9, 6], seed=2)
    assert select_exemplars(samples, 9, 4, seed=1) == select_exemplars(samples, 9, 4, seed=1)


@pytest.mark.parametrize("per_bin,target,expected", [
    ([3, 3, 3, 3], 8, [2, 2, 2, 2]),
    ([4, 3, 3, 2], 8, [2, 2, 2, 2]),
    ([4, 3, 3, 2], 11, [3, 3, 3, 2]),
])
def test_reduce_removes_from_the_fullest_bin(per_bin, target, expected):
    buf = _buffer_with(0, per_bin)
    reduce_class(buf, 0, target)
    assert bin_counts(buf.class_exemplars(0), 4).tolist() == expected


def test_reduce_to_zero_and_growth():
    buf = _buffer_with(0, [2, 2, 2, 2])
    with pytest.raises(InvalidArgumentError):
        reduce_class(buf, 0, 9)
    reduce_class(buf, 0, 0)
    assert buf.class_exemplars(0) == []


def test_quotas_and_rebalance():
    assert ReplayBuffer(240).quotas(range(12)) == {c: 20 for c in range(12)}
    buf = ReplayBuffer(10, bins=4)
    for c in range(3):
        buf.add_class(c, select_exemplars(_samples(c, [3, 3, 3, 3], seed=c), 10, 4)[0])
    assert buf.quotas(buf.classes()) == {0: 4, 1: 3, 2: 3}
    rebalance(buf)
    assert [len(buf.class_exemplars(c)) for c in range(3)] == [4, 3, 3]
    snapshot = buf.to_manifest()
    rebalance(buf)
    assert buf.to_manifest() == snapshot
    with pytest.raises(AlreadyAllocatedError):
        buf.add_class(1, [])
    with pytest.raises(InvalidArgumentError):
        rebalance(buf, 0)


def test_quotas_reserve_room_for_the_declared_class_count():
    buf = ReplayBuffer(12)
    assert buf.quotas([0, 1], num_classes=4) == {0: 3, 1: 3}


def test_manifest_round_trip():
    buf = _buffer_with(2, [2, 1, 0, 3])
    back = ReplayBuffer.from_manifest(buf.to_manifest())
    assert back.all() == buf.all()
    assert back.capacity == buf.capacity


def test_replay_buffer_random_operation_sequences():
    rng = np.random.default_rng(0)
    bins = 4
    for case in range(1000):
        capacity = int(rng.integers(6, 41))
        buf = ReplayBuffer(capacity, bins, seed=case)
        classes = list(range(int(rng.integers(1, 7))))
        for class_id in classes:
            # abundant, uniform azimuths: 11 per bin covers any quota up to 40
            quotas = buf.quotas(buf.classes() + [class_id])
            chosen, short = select_exemplars(_samples(class_id, [11] * bins, bins, seed=case), quotas[class_id],
                                             bins, seed=case * 10 + class_id)
            assert not short and len(chosen) == quotas[class_id]
            counts = bin_counts(chosen, bins)
            assert counts.max() - counts.min() <= 1
            buf.add_class(class_id, chosen)
            rebalance(buf)

            sizes = [len(buf.class_exemplars(c)) for c in buf.classes()]
            assert sum(sizes) <= capacity
            assert max(sizes) - min(sizes) <= 1
            for c in buf.classes():
                per_bin = bin_counts(buf.class_exemplars(c), bins)
                assert per_bin.max() - per_bin.min() <= 1


def test_mesh_store():
    store = MeshStore()
    a, b = make_mesh(class_id=3, target=26, dim=4), make_mesh(class_id=1, target=26, dim=4)
    mesh_store_add(store, a)
    mesh_store_add(store, b)
    assert mesh_store_get(store, 3) is a
    assert store.classes() == [1, 3]
    assert len(store) == 2 and 1 in store and 2 not in store
    with pytest.raises(NotFoundError):
        mesh_store_get(store, 2)
    with pytest.raises(AlreadyAllocatedError):
        store.add(make_mesh(class_id=3, target=26, dim=4))
    np.testing.assert_array_equal(store.stacked_thetas(exclude=1), a.theta)
    assert store.stacked_thetas().shape == (a.geometry.vertex_count + b.geometry.vertex_count, 4)
    assert MeshStore().stacked_thetas().shape == (0, 0)
