import math
from collections import Counter

import numpy as np
import pytest

from exceptions import TauOutOfRange, TooLargeToEnumerate
from sampling import (
    DistributedSampler, NodeSampler, draw, enumerate_all, inclusion_probability, support_size,
)
from sparse_matrix import partition_uniform


def test_tau_equal_s_takes_every_coordinate():
    p = partition_uniform(12, 3)
    sampler = DistributedSampler(p, tau=4, master_seed=1)
    for k in range(5):
        assert sampler.draw(k).as_set() == frozenset(range(12))


def test_each_node_contributes_tau_coordinates_of_its_block():
    p = partition_uniform(30, 3)
    sampler = DistributedSampler(p, tau=4, master_seed=2)
    for k in range(50):
        sample = sampler.draw(k)
        assert len(sample) == 12
        for l, coords in enumerate(sample.per_node):
            assert len(set(coords.tolist())) == 4
            assert np.all(p.assignment[coords] == l)
            assert np.all(np.diff(coords) > 0)


def test_single_coordinate_frequencies():
    p = partition_uniform(2, 1)
    sampler = DistributedSampler(p, tau=1, master_seed=3)
    counts = Counter(int(sampler.draw(k).indices[0]) for k in range(20000))
    assert counts[0] / 20000 == pytest.approx(0.5, abs=0.02)


def test_two_nodes_of_two_give_four_equiprobable_samples():
    p = partition_uniform(4, 2)
    sampler = DistributedSampler(p, tau=1, master_seed=4)
    counts = Counter(sampler.draw(k).as_set() for k in range(40000))
    assert set(counts) == {frozenset(s) for s in ({0, 2}, {0, 3}, {1, 2}, {1, 3})}
    for n in counts.values():
        assert n / 40000 == pytest.approx(0.25, abs=0.02)


@pytest.mark.parametrize("d, c, tau, expected", [(3, 1, 2, 3), (4, 2, 1, 4), (6, 2, 2, 9)])
def test_enumeration_counts(d, c, tau, expected):
    p = partition_uniform(d, c)
    samples = enumerate_all(p, tau)
    assert len(samples) == expected == support_size(p, tau)
    assert math.fsum(prob for _, prob in samples) == pytest.approx(1.0)
    assert len({sample.as_set() for sample, _ in samples}) == expected


def test_inclusion_probabilities_match_enumeration():
    p = partition_uniform(8, 2)
    tau = 3
    samples = enumerate_all(p, tau)
    for i in range(8):
        for j in range(8):
            empirical = sum(prob for sample, prob in samples if {i, j} <= sample.as_set())
            assert empirical == pytest.approx(inclusion_probability(p, tau, i, j))


def test_pair_probability_identity():
    # P(i, j in S) summed over j equals tau/s times E|S| for every i
    p = partition_uniform(12, 3)
    tau = 2
    for i in range(12):
        total = sum(inclusion_probability(p, tau, i, j) for j in range(12))
        assert total == pytest.approx(tau / p.s * (1 + (tau - 1) + (p.c - 1) * tau))


def test_samples_do_not_depend_on_node_grouping():
    p = partition_uniform(40, 4)
    whole = DistributedSampler(p, tau=3, master_seed=99)
    halves = [DistributedSampler(p, tau=3, master_seed=99, nodes=[0, 1]),
              DistributedSampler(p, tau=3, master_seed=99, nodes=[2, 3])]
    singles = [NodeSampler(p, l, 3, 99) for l in range(4)]
    for k in range(100):
        expected = whole.draw(k).per_node
        grouped = halves[0].draw(k).per_node + halves[1].draw(k).per_node
        alone = [sampler.draw(k) for sampler in singles]
        for a, b, c in zip(expected, grouped, alone):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(a, c)


def test_different_seeds_give_different_streams():
    p = partition_uniform(100, 1)
    a = DistributedSampler(p, tau=5, master_seed=1)
    b = DistributedSampler(p, tau=5, master_seed=2)
    assert any(a.draw(k).as_set() != b.draw(k).as_set() for k in range(10))


def test_module_draw_checks_sampler():
    p = partition_uniform(6, 2)
    sampler = DistributedSampler(p, tau=2, master_seed=0)
    assert len(draw(p, 2, sampler, 0)) == 4
    with pytest.raises(ValueError):
        draw(partition_uniform(6, 2), 2, sampler, 1)


def test_errors():
    p = partition_uniform(6, 2)
    with pytest.raises(TauOutOfRange):
        DistributedSampler(p, tau=4, master_seed=0)
    with pytest.raises(TauOutOfRange):
        NodeSampler(p, 0, 0, 0)
    with pytest.raises(TooLargeToEnumerate):
        enumerate_all(partition_uniform(400, 4), 50)
