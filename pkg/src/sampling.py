"""Distributed tau-nice sampling: every node picks tau of its s coordinates uniformly.

Randomness is counter based. Node l at iteration k draws from a Philox stream
keyed by SeedSequence([master_seed, l]) with the counter set to k, so the
sample of (l, k) does not depend on which process hosts node l or on how many
other nodes share that process.
"""
import itertools
import math
from dataclasses import dataclass

import numpy as np

from config import Config
from exceptions import TauOutOfRange, TooLargeToEnumerate
from utils import setup_logging

logger = setup_logging(__name__)


@dataclass(eq=False)
class DistributedSample:
    """Per-node coordinate sets (global indices, ascending) for one iteration"""
    iteration: int
    per_node: list

    @property
    def c(self):
        return len(self.per_node)

    @property
    def indices(self):
        return np.concatenate(self.per_node) if self.per_node else np.empty(0, dtype=np.int64)

    def __len__(self):
        return sum(len(s) for s in self.per_node)

    def as_set(self):
        return frozenset(int(i) for i in self.indices)


def check_tau(tau, s):
    if not 1 <= tau <= s:
        raise TauOutOfRange(tau, s)


def node_key(master_seed, node):
    """Philox key of node l: two words derived from (master_seed, l)"""
    return np.random.SeedSequence([int(master_seed), int(node)]).generate_state(2, np.uint64)


def node_rng(master_seed, node, iteration):
    bit_generator = np.random.Philox(key=node_key(master_seed, node),
                                     counter=[0, 0, int(iteration), 0])
    return np.random.Generator(bit_generator)


def draw_master_seed():
    """Fresh master seed from OS entropy"""
    return int(np.random.SeedSequence().entropy % (2**63))


class NodeSampler:
    """tau-subsets of one node's block by partial Fisher-Yates.

    The index buffer persists between draws, so draws must be requested in
    iteration order; two samplers with the same (seed, node) that see the same
    sequence of iterations return the same subsets.
    """

    def __init__(self, partition, node, tau, master_seed):
        check_tau(tau, partition.s)
        self.node = node
        self.tau = tau
        self.master_seed = master_seed
        self.block = partition.block(node)
        self.buffer = np.arange(partition.s, dtype=np.int64)
        self._bounds = partition.s - np.arange(tau)

    def draw(self, iteration):
        """Global coordinates of S_l at the given iteration, ascending"""
        s = len(self.buffer)
        if self.tau == s:
            return self.block.copy()
        offsets = node_rng(self.master_seed, self.node, iteration).integers(0, self._bounds)
        buf = self.buffer
        for j, off in enumerate(offsets):
            other = j + off
            buf[j], buf[other] = buf[other], buf[j]
        return self.block[np.sort(buf[:self.tau])]


class DistributedSampler:
    """One NodeSampler per hosted node; by default all c nodes"""

    def __init__(self, partition, tau, master_seed, nodes=None):
        check_tau(tau, partition.s)
        self.partition = partition
        self.tau = tau
        self.master_seed = master_seed
        self.nodes = list(range(partition.c)) if nodes is None else list(nodes)
        self.samplers = [NodeSampler(partition, l, tau, master_seed) for l in self.nodes]

    def draw(self, iteration):
        return DistributedSample(iteration=iteration,
                                 per_node=[sampler.draw(iteration) for sampler in self.samplers])


def draw(partition, tau, sampler, iteration):
    """One distributed sample from a DistributedSampler built for (partition, tau)"""
    check_tau(tau, partition.s)
    if sampler.partition is not partition or sampler.tau != tau:
        raise ValueError("sampler was built for a different partition or tau")
    return sampler.draw(iteration)


def support_size(partition, tau):
    return math.comb(partition.s, tau) ** partition.c


def enumerate_all(partition, tau, limit=None):
    """Every possible DistributedSample with its probability"""
    check_tau(tau, partition.s)
    limit = limit if limit is not None else Config.ENUMERATION_LIMIT
    size = support_size(partition, tau)
    if size > limit:
        raise TooLargeToEnumerate(size, limit)
    prob = 1.0 / size
    per_node = [list(itertools.combinations(partition.block(l).tolist(), tau))
                for l in range(partition.c)]
    return [
        (DistributedSample(iteration=0, per_node=[np.array(choice, dtype=np.int64) for choice in combo]), prob)
        for combo in itertools.product(*per_node)
    ]


def inclusion_probability(partition, tau, i, j=None):
    """P(i in S) or P(i, j in S) in closed form"""
    s = partition.s
    if j is None or i == j:
        return tau / s
    if partition.assignment[i] == partition.assignment[j]:
        return tau * (tau - 1) / (s * (s - 1))
    return (tau / s) ** 2


if __name__ == "__main__":
    from sparse_matrix import partition_uniform

    print("Testing distributed sampling...")
    sampler = DistributedSampler(partition_uniform(8, 2), tau=2, master_seed=7)
    for k in range(3):
        print(f"  k={k}: {sampler.draw(k).per_node}")
    print(f"  support of c=2, s=3, tau=2: {len(enumerate_all(partition_uniform(6, 2), 2))} samples")
