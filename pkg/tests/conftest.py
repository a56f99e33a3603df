"""Shared fixtures and independent oracles.

The oracles tally raw pair lists with plain dict/set bookkeeping and know
nothing about the matrix representation; tests compare pipeline output
against them field by field.
"""

from collections import Counter, defaultdict

import numpy as np
import pytest


def tally_pairs(pairs) -> dict:
    """Counting-map oracle: multiplicity of each (src, dst) pair."""
    return dict(Counter((int(s), int(d)) for s, d in pairs))


def quantities_from_pairs(pairs) -> dict:
    """Brute-force oracle for all nine network quantities."""
    pairs = [(int(s), int(d)) for s, d in pairs]
    links = Counter(pairs)
    src_requests = Counter()
    dst_requests = Counter()
    src_fanout = defaultdict(set)
    dst_fanin = defaultdict(set)
    for s, d in pairs:
        src_requests[s] += 1
        dst_requests[d] += 1
        src_fanout[s].add(d)
        dst_fanin[d].add(s)
    return {
        "valid_requests": len(pairs),
        "unique_links": len(links),
        "max_link_requests": max(links.values(), default=0),
        "unique_sources": len(src_requests),
        "max_source_requests": max(src_requests.values(), default=0),
        "max_source_fanout": max((len(v) for v in src_fanout.values()), default=0),
        "unique_destinations": len(dst_requests),
        "max_destination_requests": max(dst_requests.values(), default=0),
        "max_destination_fanin": max((len(v) for v in dst_fanin.values()), default=0),
    }


def random_pair_arrays(rng: np.random.Generator, n: int, universe: int):
    """n pairs with both endpoints uniform over [0, universe)."""
    src = rng.integers(0, universe, size=n, dtype=np.uint64).astype(np.uint32)
    dst = rng.integers(0, universe, size=n, dtype=np.uint64).astype(np.uint32)
    return src, dst


def as_pair_list(src, dst):
    return list(zip((int(x) for x in src), (int(x) for x in dst)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
