import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from .io import SampleRecord


@dataclass(frozen=True)
class Triplet:
    anchor: SampleRecord
    positive: SampleRecord
    negative: SampleRecord
    negative_source: str  # "pool" | "background" | "adjacent"


class HardNegativePool:
    """Records flagged as hard negatives (noisy backgrounds, look-alike objects)."""

    def __init__(self, records=()):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class TripletSampler:
    """Draws positives/negatives for a given anchor.

    The positive is a uniformly chosen *other* record of the anchor's identity,
    or the anchor itself when it is the only one (the caller augments the two
    views independently). The negative comes from the pool with probability
    ``hard_negative_prob``, otherwise uniformly from records of other
    identities; when one side has no eligible candidates the other is used.
    """

    def __init__(self, records, pool=None, hard_negative_prob=0.0):
        if not 0.0 <= hard_negative_prob <= 1.0:
            raise ConfigurationError("hard_negative_prob must lie in [0, 1]")
        self.records = list(records)
        self.pool = list(pool or [])
        self.hard_negative_prob = hard_negative_prob
        self.by_identity = {}
        for r in self.records:
            self.by_identity.setdefault(r.identity_id, []).append(r)
        if not self.records:
            raise ConfigurationError("no records to build triplets from")
        if len(self.by_identity) < 2 and not self.pool:
            raise ConfigurationError(
                "triplets need at least two identities or a non-empty hard-negative pool")
        self._others = {
            ident: [r for r in self.records if r.identity_id != ident] for ident in self.by_identity}
        self._pool_for = {
            ident: [r for r in self.pool if r.identity_id != ident] for ident in self.by_identity}
        for ident in self.by_identity:
            if not self._others[ident] and not self._pool_for[ident]:
                raise ConfigurationError(f"identity {ident!r} has no eligible negatives")

    def sample(self, anchor, rng):
        same = [r for r in self.by_identity[anchor.identity_id] if r is not anchor]
        positive = same[rng.integers(len(same))] if same else anchor
        others = self._others[anchor.identity_id]
        pool = self._pool_for[anchor.identity_id]
        use_pool = rng.random() < self.hard_negative_prob
        if (use_pool and pool) or not others:
            return Triplet(anchor, positive, pool[rng.integers(len(pool))], "pool")
        negative = others[rng.integers(len(others))]
        source = "background" if "background" in negative.split_tags else "adjacent"
        return Triplet(anchor, positive, negative, source)


def build_triplets(records, pool=None, hard_negative_prob=0.0, rng_seed=0, shard=0):
    """Endless deterministic stream: cycles over ``records`` as anchors.

    Concurrent consumers take distinct shards; shard ``k`` is seeded ``rng_seed + k``.
    """
    sampler = TripletSampler(records, pool, hard_negative_prob)
    rng = np.random.default_rng(rng_seed + shard)
    for anchor in itertools.cycle(sampler.records):
        yield sampler.sample(anchor, rng)
