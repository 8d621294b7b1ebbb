import math

import numpy as np
import pytest

from specache import (
    CacheConfig,
    ConfigError,
    InputError,
    KGramModel,
    MaskError,
    ModelSpec,
    ScriptedModel,
    TreeCache,
    Vocabulary,
    make_kgram_model,
    make_uniform_model,
)
from specache.lm import check_prob_vector, load_models_file, load_scripted_table, scale_probs
from specache.mask import MaskBuilder

from conftest import make_model

SPEC = ModelSpec(params_billions=1.0, forward_latency=1.0)


def test_scripted_model_echoes_table():
    v = Vocabulary(4)
    table = {(3,): [0.0, 1.0, 0.0, 0.0]}
    m = ScriptedModel(table, [0.25] * 4, v, SPEC)
    out = m.next_distribution([3])
    assert out.tolist() == [0.0, 1.0, 0.0, 0.0]


def test_kgram_deterministic(vocab8):
    m = make_kgram_model(7, vocab8, order=2, sharpness=3.0, spec=SPEC)
    a = m.next_distribution([1, 2, 3])
    b = m.next_distribution([1, 2, 3])
    assert (a == b).all()


def test_uniform_model_exact():
    m = make_uniform_model(Vocabulary(4), spec=SPEC)
    out = m.next_distribution([0, 2, 1])
    assert out.tolist() == [0.25, 0.25, 0.25, 0.25]


def test_same_params_same_model():
    a = make_model(13, 16, order=2, sharpness=5.0)
    b = make_model(13, 16, order=2, sharpness=5.0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        ctx = [int(t) for t in rng.integers(16, size=rng.integers(1, 6))]
        assert (a.next_distribution(ctx) == b.next_distribution(ctx)).all()


def test_huge_sharpness_is_near_onehot():
    m = make_model(3, 8, sharpness=1e6)
    rng = np.random.default_rng(1)
    for _ in range(20):
        ctx = [int(t) for t in rng.integers(8, size=3)]
        assert m.next_distribution(ctx).max() >= 0.999


def test_order_one_ignores_deeper_history():
    m = make_model(5, 4, order=1, sharpness=2.0)
    assert (m.next_distribution([2]) == m.next_distribution([1, 2])).all()
    assert (m.next_distribution([3, 2]) == m.next_distribution([0, 1, 2])).all()


def test_distributions_are_valid():
    rng = np.random.default_rng(2)
    for sharpness in (0.0, 1.0, 7.5, 40.0):
        m = make_model(9, 12, sharpness=sharpness)
        for _ in range(25):
            ctx = [int(t) for t in rng.integers(12, size=rng.integers(1, 5))]
            t = float(rng.choice([0.3, 1.0, 2.0]))
            check_prob_vector(m.next_distribution(ctx, t), 12)


def test_temperature_zero_is_argmax_onehot():
    m = make_model(4, 8, sharpness=3.0)
    d1 = m.next_distribution([1, 2], 1.0)
    d0 = m.next_distribution([1, 2], 0.0)
    assert d0.sum() == 1.0
    assert d0[int(np.argmax(d1))] == 1.0


def test_temperature_reorders_mass_not_support():
    m = make_model(4, 8, sharpness=3.0)
    hot = m.next_distribution([5], 2.0)
    cold = m.next_distribution([5], 0.5)
    base = m.next_distribution([5], 1.0)
    top = int(np.argmax(base))
    assert cold[top] > base[top] > hot[top]
    assert np.argmax(hot) == np.argmax(cold) == top


def test_scale_probs_limits():
    p = np.array([0.7, 0.2, 0.1])
    one = scale_probs(p, 1.0)
    assert (one == p).all()
    zero = scale_probs(p, 0.0)
    assert zero.tolist() == [1.0, 0.0, 0.0]


def test_eos_is_absorbing():
    m = make_model(6, 8, eos_token=2)
    out = m.next_distribution([1, 2])
    assert out[2] == 1.0 and out.sum() == 1.0


def test_empty_context_rejected(vocab8):
    m = make_model(0, 8)
    with pytest.raises(InputError):
        m.next_distribution([])


def test_out_of_vocab_context_rejected():
    m = make_model(0, 8)
    with pytest.raises(InputError):
        m.next_distribution([3, 99])


def test_negative_temperature_rejected():
    m = make_model(0, 8)
    with pytest.raises(ConfigError):
        m.next_distribution([1], -0.5)


def test_bad_model_params_rejected():
    with pytest.raises(ConfigError):
        KGramModel(seed=0, vocab=Vocabulary(8), order=0, sharpness=1.0, spec=SPEC)
    with pytest.raises(ConfigError):
        KGramModel(seed=0, vocab=Vocabulary(8), order=1, sharpness=-1.0, spec=SPEC)
    with pytest.raises(ConfigError):
        ModelSpec(params_billions=-1.0, forward_latency=1.0)
    with pytest.raises(ConfigError):
        Vocabulary(1)


# tree forwards


def _grown_cache_and_builder(model, base, K=4, k=2, layers=2):
    cache = TreeCache(base[-1], CacheConfig(K=K, k=k, max_depth=layers + 2))
    builder = MaskBuilder(cache)
    for _ in range(layers):
        dists = [model.next_distribution(base + p) for p in cache.parent_paths()]
        new = cache.expand_layer(np.vstack(dists))
        builder.note_layer(new)
    return cache, builder


def test_tree_forward_chain_equals_sequential():
    m = make_model(11, 8)
    base = [1, 2]
    cache, builder = _grown_cache_and_builder(m, base, K=1, k=1, layers=3)
    mask = builder.frontier_mask()
    out = m.batch_tree_forward(base, mask.tokens, mask)
    assert len(out) == 1
    chain = [cache.arena[h].token for h in cache.path_from_root(cache.frontier[0])]
    expected = m.next_distribution(base + chain)
    assert (out[0] == expected).all()


def test_tree_forward_siblings_match_per_path_oracle():
    m = make_model(12, 8)
    base = [3]
    cache, builder = _grown_cache_and_builder(m, base, K=2, k=2, layers=1)
    mask = builder.frontier_mask()
    out = m.batch_tree_forward(base, mask.tokens, mask)
    assert len(out) == len(cache.frontier)
    for row, h in zip(out, cache.frontier):
        path = [cache.arena[n].token for n in cache.path_from_root(h)]
        oracle = m.next_distribution(base + path)
        assert (row == oracle).all()


def test_tree_forward_arity_matches_frontier():
    m = make_model(13, 8)
    cache, builder = _grown_cache_and_builder(m, [5], K=2, k=2, layers=2)
    mask = builder.frontier_mask()
    assert len(m.batch_tree_forward([5], mask.tokens, mask)) == len(cache.frontier)


def test_tree_forward_rejects_broken_trailing_block():
    m = make_model(14, 8)
    cache, builder = _grown_cache_and_builder(m, [2], K=3, k=2, layers=2)
    mask = builder.frontier_mask()
    bits = mask.bits.copy()
    bits[0, bits.shape[1] - 1] = True  # row 0 peeks at a sibling
    broken = type(mask)(bits=bits, n_new=mask.n_new, columns=mask.columns, tokens=mask.tokens)
    with pytest.raises(MaskError):
        m.batch_tree_forward([2], broken.tokens, broken)


def test_tree_forward_rejects_inconsistent_ancestry():
    from specache.mask import AttentionMask

    m = make_model(14, 8)
    # rows disagree on column 1's history: (1,) for row 0, (0, 1) for row 1
    bits = np.array(
        [
            [False, True, True, False],
            [True, True, False, True],
        ]
    )
    mask = AttentionMask(bits=bits, n_new=2, columns=[10, 11, -1, -1], tokens=[4, 5, 6, 7])
    with pytest.raises(MaskError):
        m.batch_tree_forward([2], mask.tokens, mask)


# file loading


def test_scripted_table_roundtrip(tmp_path):
    p = tmp_path / "table.txt"
    p.write_text("# comment\n3 -> 0.0 1.0 0.0 0.0\n* -> 0.25 0.25 0.25 0.25\n")
    table, default, size = load_scripted_table(str(p))
    assert size == 4
    assert table[(3,)] == [0.0, 1.0, 0.0, 0.0]
    assert default == [0.25] * 4


def test_scripted_table_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("3 -> 0.5 0.5\n3 -> 0.5 0.5\n* -> 0.5 0.5\n")
    with pytest.raises(Exception) as e:
        load_scripted_table(str(p))
    assert ":2:" in str(e.value)


def test_load_models_file(tmp_path):
    p = tmp_path / "models.json"
    p.write_text(
        '{"vocab_size": 8, "eos_token": null,'
        ' "draft": {"type": "kgram", "seed": 1, "order": 1, "sharpness": 2.0,'
        '   "params_billions": 1.0, "forward_latency": 1.0},'
        ' "target": {"type": "uniform", "params_billions": 7.0, "forward_latency": 7.0}}'
    )
    draft, target = load_models_file(str(p))
    assert draft.vocab.size == target.vocab.size == 8
    assert target.spec.forward_latency == 7.0
    assert target.next_distribution([3])[0] == 0.125


def test_load_models_file_rejects_missing_target(tmp_path):
    p = tmp_path / "models.json"
    p.write_text('{"vocab_size": 8, "draft": {"type": "uniform"}}')
    with pytest.raises(ConfigError, match="target"):
        load_models_file(str(p))
