import numpy as np
import pytest

from specache import CacheConfig, TreeCache, Vocabulary, make_kgram_model
from specache.backend import active_backend_name, compiled_available, set_backend
from specache.lm import ModelSpec


@pytest.fixture
def vocab8():
    return Vocabulary(8)


@pytest.fixture(params=["pure", "compiled"])
def backend(request):
    """Run the decorated test under each kernel backend."""
    if request.param == "compiled" and not compiled_available():
        pytest.skip("compiled kernels not built")
    previous = active_backend_name()
    set_backend(request.param)
    yield request.param
    set_backend(previous)


def make_model(seed, vocab_size, order=2, sharpness=8.0, latency=1.0, params=1.0,
               eos_token=None, mix_seed=0, mix_weight=0.0):
    return make_kgram_model(
        seed,
        Vocabulary(vocab_size),
        order=order,
        sharpness=sharpness,
        spec=ModelSpec(params_billions=params, forward_latency=latency),
        eos_token=eos_token,
        mix_seed=mix_seed,
        mix_weight=mix_weight,
    )


def check_tree_invariants(cache: TreeCache) -> None:
    """Structural invariants every alive tree must satisfy."""
    arena = cache.arena
    root = cache.root
    assert arena[root].alive, "root must be alive"
    # alive children imply alive parents
    for h, node in enumerate(arena):
        if node.alive and node.parent is not None:
            assert arena[node.parent].alive, f"alive node {h} has a dead parent"
        for c in node.children:
            assert arena[c].parent == h
    # frontier nodes are alive, unique, on one layer, descend from nothing dead
    seen = set()
    layers = {arena[h].layer for h in cache.frontier}
    assert len(layers) <= 1, "frontier spans multiple layers"
    for h in cache.frontier:
        assert arena[h].alive
        assert h not in seen
        seen.add(h)
    # every alive node below the root is a frontier node or an ancestor of one
    covered = set()
    for h in cache.frontier:
        cur = h
        while cur is not None and cur != root:
            covered.add(cur)
            cur = arena[cur].parent
    stack = [c for c in arena[root].children if arena[c].alive]
    while stack:
        h = stack.pop()
        if not arena[h].alive:
            continue
        assert h in covered, f"alive node {h} unreachable from the frontier"
        stack.extend(arena[h].children)
    # scores are rebasable: children below parents, log_score <= parent's
    for h, node in enumerate(arena):
        if node.alive and node.parent is not None and arena[node.parent].alive:
            if node.layer > 0:
                assert node.layer == arena[node.parent].layer + 1


def grow_random_tree(rng: np.random.Generator, vocab_size=8, K=6, k=2, depth=4,
                     seed=0) -> TreeCache:
    """Random expansions driven by a throwaway model; returns the cache."""
    model = make_model(seed, vocab_size)
    cfg = CacheConfig(K=K, k=k, max_depth=depth)
    cache = TreeCache(int(rng.integers(vocab_size)), cfg)
    base = [int(rng.integers(vocab_size)), cache.arena[cache.root].token]
    for _ in range(depth):
        dists = [model.next_distribution(base + p) for p in cache.parent_paths()]
        cache.expand_layer(np.vstack(dists))
    return cache
