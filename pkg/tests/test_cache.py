import math

import numpy as np
import pytest

from specache import (
    CacheConfig,
    FrontierFull,
    InputError,
    ModelSpec,
    ProtocolError,
    ScriptedModel,
    TreeCache,
    Vocabulary,
)

from conftest import check_tree_invariants, make_model

SPEC = ModelSpec(params_billions=1.0, forward_latency=1.0)


def expand_with(cache, model, base):
    dists = [model.next_distribution(base + p) for p in cache.parent_paths()]
    return cache.expand_layer(np.vstack(dists))


def frontier_paths(cache):
    return [
        tuple(cache.arena[n].token for n in cache.path_from_root(h)) for h in cache.frontier
    ]


def frontier_scores(cache):
    return [cache.arena[h].log_score for h in cache.frontier]


# expansion


def test_worked_example_two_parents():
    """Two frontier nodes, k=2: winners must equal the top-2 of all four
    candidate tuples by brute-force enumeration."""
    cache = TreeCache(0, CacheConfig(K=2, k=2, max_depth=4))
    cache.expand_layer(np.array([[0.55, 0.369, 0.081]]))
    assert frontier_paths(cache) == [(0,), (1,)]
    a, b = cache.frontier
    sa, sb = cache.arena[a].log_score, cache.arena[b].log_score

    d_a = np.array([0.7, 0.2, 0.1])
    d_b = np.array([0.6, 0.3, 0.1])
    pool = cache.extension_pool(np.vstack([d_a, d_b]))
    expected = []
    for pi, (s, d) in enumerate([(sa, d_a), (sb, d_b)]):
        ranked = sorted(((float(p), t) for t, p in enumerate(d)), key=lambda x: (-x[0], x[1]))
        for p, t in ranked[:2]:
            expected.append((s + math.log(p), t, pi))
    expected.sort(key=lambda e: (-e[0], e[1], e[2]))
    got = [(c.weight, c.token, c.parent_index) for c in pool]
    assert sorted(got, key=lambda e: (-e[0], e[1], e[2])) == expected

    cache.expand_layer(np.vstack([d_a, d_b]))
    winners = [
        (cache.arena[h].log_score, cache.arena[h].token, 0 if cache.arena[h].parent == a else 1)
        for h in cache.frontier
    ]
    assert winners == expected[:2]


def test_beam_width_one_is_greedy_draft():
    model = make_model(3, 8, sharpness=4.0)
    base = [2, 5]
    cache = TreeCache(5, CacheConfig(K=1, k=1, max_depth=6))
    for _ in range(5):
        expand_with(cache, model, base)
    want = []
    ctx = list(base)
    for _ in range(5):
        t = int(np.argmax(model.next_distribution(ctx)))
        want.append(t)
        ctx.append(t)
    assert list(frontier_paths(cache)[0]) == want


def _layerwise_oracle(model, base, K, k, layers):
    """Functional beam replay: plain path tuples, no arena, no pruning."""
    frontier = [((), 0.0)]
    for _ in range(layers):
        pool = []
        for pi, (path, score) in enumerate(frontier):
            dist = model.next_distribution(base + list(path))
            ranked = sorted(
                ((float(p), t) for t, p in enumerate(dist) if p > 0.0),
                key=lambda x: (-x[0], x[1]),
            )
            for p, t in ranked[:k]:
                pool.append((score + math.log(p), t, pi, path + (t,)))
        pool.sort(key=lambda e: (-e[0], e[1], e[2]))
        frontier = [(e[3], e[0]) for e in pool[:K]]
    return frontier


@pytest.mark.parametrize("seed", range(12))
def test_expansion_matches_layerwise_oracle(seed):
    rng = np.random.default_rng(seed)
    V = int(rng.integers(4, 12))
    K = int(rng.integers(1, 6))
    k = int(rng.integers(1, 4))
    layers = int(rng.integers(1, 5))
    model = make_model(seed * 31 + 7, V, order=2, sharpness=float(rng.uniform(0.5, 8.0)))
    root = int(rng.integers(V))
    base = [int(rng.integers(V)), root]
    cache = TreeCache(root, CacheConfig(K=K, k=k, max_depth=layers))
    for _ in range(layers):
        expand_with(cache, model, base)
    oracle = _layerwise_oracle(model, base, K, k, layers)
    assert frontier_paths(cache) == [p for p, _ in oracle]
    assert frontier_scores(cache) == [s for _, s in oracle]
    check_tree_invariants(cache)


def test_expansion_rejects_bad_distributions():
    cache = TreeCache(0, CacheConfig(K=2, k=2, max_depth=3))
    with pytest.raises(InputError):
        cache.expand_layer(np.array([[0.5, 0.6]]))  # does not sum to 1
    with pytest.raises(InputError):
        cache.expand_layer(np.array([[1.1, -0.1]]))
    with pytest.raises(InputError):
        cache.expand_layer(np.ones((3, 2)) / 2.0)  # wrong parent count


def test_frontier_full_at_max_depth():
    model = make_model(1, 6)
    cache = TreeCache(2, CacheConfig(K=2, k=2, max_depth=2))
    expand_with(cache, model, [2])
    expand_with(cache, model, [2])
    with pytest.raises(FrontierFull):
        expand_with(cache, model, [2])


def test_eos_parents_not_extended():
    v = Vocabulary(4)
    table = {(1,): [0.1, 0.1, 0.7, 0.1]}
    model = ScriptedModel(table, [0.25] * 4, v, SPEC)
    cache = TreeCache(1, CacheConfig(K=3, k=3, max_depth=4), eos_token=2)
    expand_with(cache, model, [1])
    eos_idx = [i for i, h in enumerate(cache.frontier) if cache.arena[h].token == 2]
    assert eos_idx, "expected an eos node on the frontier"
    pool = cache.extension_pool(
        np.vstack([model.next_distribution([1] + p) for p in cache.parent_paths()])
    )
    assert pool, "non-eos parents must still extend"
    assert all(c.parent_index not in eos_idx for c in pool)


# query


def test_empty_cache_misses():
    cache = TreeCache(3, CacheConfig(K=2, k=2, max_depth=3))
    res = cache.query(2)
    assert not res.hit and res.tokens == []


def test_chain_query_prefix():
    model = make_model(9, 8, sharpness=6.0)
    cache = TreeCache(1, CacheConfig(K=1, k=1, max_depth=5))
    for _ in range(4):
        expand_with(cache, model, [1])
    full = [cache.arena[n].token for n in cache.path_from_root(cache.frontier[0])]
    for d in (1, 2, 4, 9):
        res = cache.query(d)
        assert res.hit
        assert res.tokens == full[: min(d, 4)]


def test_query_returns_highest_scoring_path():
    # word-tree analog: "we" -> {"saw" -> {"tall", "old"}, "distant" -> ...}
    v = Vocabulary(6)  # 0 we, 1 saw, 2 tall, 3 distant, 4 old, 5 ships
    table = {
        (0,): [0.0, 0.6, 0.0, 0.3, 0.1, 0.0],
        (0, 1): [0.05, 0.0, 0.7, 0.0, 0.25, 0.0],
        (0, 3): [0.1, 0.3, 0.1, 0.0, 0.2, 0.3],
        (0, 4): [0.2, 0.2, 0.2, 0.2, 0.0, 0.2],
    }
    model = ScriptedModel(table, [1 / 6.0] * 6, v, SPEC)
    cache = TreeCache(0, CacheConfig(K=3, k=2, max_depth=3))
    expand_with(cache, model, [0])
    expand_with(cache, model, [0])
    res = cache.query(2)
    assert res.hit
    # oracle: exhaustively score every alive depth-2 node
    best = None
    for h, node in enumerate(cache.arena):
        if node.alive and node.layer == 2:
            key = (-node.log_score, node.token, node.node_id)
            if best is None or key < best[0]:
                best = (key, h)
    want = [cache.arena[n].token for n in cache.path_from_root(best[1])]
    assert res.tokens == want == [1, 2]  # "saw tall"
    assert res.conditionals == pytest.approx([0.6, 0.7])


def test_query_depth_validation():
    cache = TreeCache(0, CacheConfig(K=1, k=1, max_depth=2))
    with pytest.raises(InputError):
        cache.query(0)


# correction


def _word_tree(layers=3):
    """we -> saw/distant/old; 'old' leads to 'ships' then 'we'."""
    v = Vocabulary(6)
    table = {
        (0,): [0.0, 0.35, 0.0, 0.4, 0.25, 0.0],
        (0, 1): [0.3, 0.0, 0.4, 0.0, 0.3, 0.0],
        (0, 3): [0.2, 0.3, 0.2, 0.0, 0.0, 0.3],
        (0, 4): [0.1, 0.1, 0.1, 0.1, 0.0, 0.6],
        (0, 4, 5): [0.8, 0.05, 0.05, 0.05, 0.05, 0.0],
    }
    model = ScriptedModel(table, [1 / 6.0] * 6, v, SPEC)
    cache = TreeCache(0, CacheConfig(K=4, k=3, max_depth=4))
    for _ in range(layers):
        expand_with(cache, model, [0])
    return cache


def test_correction_keeps_alternative_path():
    cache = _word_tree()
    assert (4, 5, 0) in frontier_paths(cache)  # "old ships we" cached
    new_root = cache.correct([], 4)  # reject the draft's path, correct to 'old'
    assert cache.arena[new_root].token == 4
    assert cache.root == new_root
    res = cache.query(2)
    assert res.hit and res.tokens == [5, 0]  # "ships we" still reachable
    check_tree_invariants(cache)


def test_correction_prunes_off_path_subtrees():
    cache = _word_tree()
    root_layer = cache.arena[cache.root].layer
    cache.correct([], 4)
    for h, node in enumerate(cache.arena):
        if node.alive and node.layer > root_layer + 1:
            cache.path_from_root(h)  # raises unless under the new root


def test_correction_full_accept_reroots_at_existing_child():
    model = make_model(17, 8, sharpness=6.0)
    cache = TreeCache(3, CacheConfig(K=2, k=2, max_depth=5))
    for _ in range(4):
        expand_with(cache, model, [3])
    res = cache.query(2)
    assert res.hit
    accepted = res.tokens
    end = cache._walk_accepted(accepted)[-1]
    child_tokens = [
        cache.arena[c].token for c in cache.arena[end].children if cache.arena[c].alive
    ]
    assert child_tokens, "fixture needs a cached continuation"
    new_root = cache.correct(accepted, child_tokens[0])
    assert cache.arena[new_root].token == child_tokens[0]
    assert cache.arena[new_root].log_score == 0.0  # rebased
    check_tree_invariants(cache)


def test_total_miss_resets_to_fresh_root():
    cache = _word_tree()
    cache.correct([], 2)  # token 2 is not a child of the root
    assert cache.arena[cache.root].token == 2
    assert cache.frontier == []
    assert cache.alive_below_root() == 0
    assert not cache.query(1).hit
    check_tree_invariants(cache)


def test_correct_requires_chain_or_token():
    cache = _word_tree()
    with pytest.raises(InputError):
        cache.correct([], None)
    with pytest.raises(ProtocolError):
        cache.correct([2], 1)  # 2 is not a root child


def test_rebase_zeroes_root_score():
    cache = _word_tree()
    cache.correct([], 4)
    assert cache.arena[cache.root].log_score == 0.0
    root_layer = cache.arena[cache.root].layer
    for node in cache.arena:
        if node.alive and node.layer > root_layer:
            assert node.log_score <= 0.0


# ablation root movement


def test_advance_root_moves_without_pruning():
    cache = _word_tree(layers=2)
    before = cache.alive_below_root()
    assert cache.advance_root([], 4)
    assert cache.arena[cache.root].token == 4
    # nothing was pruned; all depth-1 branches stay alive
    alive_tokens = {
        cache.arena[h].token
        for h, n in enumerate(cache.arena)
        if n.alive and n.layer == 1
    }
    assert alive_tokens == {1, 3, 4}
    assert cache.alive_below_root() < before  # root moved below them


def test_advance_root_reports_uncached_correction():
    cache = _word_tree()
    assert cache.advance_root([], 2) is False


# arena hygiene


def test_repeated_correction_churn_keeps_invariants():
    model = make_model(23, 8, sharpness=3.0)
    cache = TreeCache(4, CacheConfig(K=6, k=3, max_depth=64))
    for _ in range(40):
        expand_with(cache, model, [2])
        res = cache.query(1)
        assert res.hit
        cache.correct(res.tokens[:1], None)
        check_tree_invariants(cache)
    # tombstone compaction has to have kept the arena bounded
    assert len(cache.arena) < 600


def test_dump_stable_under_compaction():
    model = make_model(29, 8, sharpness=3.0)
    cache = TreeCache(1, CacheConfig(K=4, k=2, max_depth=64))
    for i in range(30):
        expand_with(cache, model, [5])
        if i % 3 == 2:
            res = cache.query(1)
            cache.correct(res.tokens[:1], None)
    before = cache.dump()
    cache._maybe_compact()
    assert cache.dump() == before


def test_dump_golden():
    v = Vocabulary(4)
    table = {
        (2,): [0.1, 0.6, 0.0, 0.3],
        (2, 1): [0.25, 0.25, 0.25, 0.25],
        (2, 3): [0.7, 0.1, 0.1, 0.1],
    }
    model = ScriptedModel(table, [0.25] * 4, v, SPEC)
    cache = TreeCache(2, CacheConfig(K=2, k=2, max_depth=3))
    expand_with(cache, model, [2])
    expand_with(cache, model, [2])
    want = (
        "2:0.000000\n"
        "  1:-0.510826\n"
        "    0:-1.897120\n"
        "  3:-1.203973\n"
        "    0:-1.560648\n"
    )
    assert cache.dump() == want
