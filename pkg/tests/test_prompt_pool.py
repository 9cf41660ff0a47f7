import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from utils.errors import DegenerateInputError, DimensionError, ParameterError, UsageError
from utils.numerics import Tensor, parameter
from utils.prompt_pool import (
    FusionProjector,
    PromptPool,
    fuse_patterns,
    gated_features,
    init_pool,
    init_projector,
    mean_pairwise_abs_cos,
    project_fusion,
    record_selection,
    retrieve_topk,
    selection_entropy,
)


def _pool(queries, values=None):
    queries = np.asarray(queries, dtype=np.float32)
    values = queries.copy() if values is None else np.asarray(values, dtype=np.float32)
    return PromptPool(parameter(queries), parameter(values))


def test_init_pool_shapes_and_determinism():
    a, b = init_pool(16, 8, seed=3), init_pool(16, 8, seed=3)
    assert a.size == 16 and a.width == 8
    assert_array_equal(a.queries.values, b.queries.values)
    assert np.all(np.linalg.norm(a.queries.values, axis=1) > 0)
    assert np.all(np.linalg.norm(a.values.values, axis=1) > 0)
    assert set(a.parameters()) == {"pool.queries", "pool.values"}
    with pytest.raises(ParameterError):
        init_pool(0, 8, seed=0)


def test_retrieval_matches_sort_oracle():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(1000):
        p, d = int(rng.integers(2, 17)), int(rng.integers(2, 9))
        k = int(rng.integers(1, p + 1))
        pool = _pool(rng.normal(size=(p, d)))
        f = rng.normal(size=d).astype(np.float32)

        q = pool.queries.values.astype(np.float64)
        cos = q @ f / np.linalg.norm(q, axis=1) / np.linalg.norm(f)
        ranked = sorted(range(p), key=lambda i: (-cos[i], i))
        gaps = np.abs(np.diff(cos[ranked][: min(k + 1, p)]))
        if gaps.size and gaps.min() < 1e-5:
            continue
        r = retrieve_topk(f, pool, k=k, tau_pool=0.07)
        assert r.indices.tolist() == ranked[:k]
        checked += 1
    assert checked > 900


def test_retrieval_ties_go_to_lower_index():
    pool = _pool([[0.0, 1.0], [1.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
    r = retrieve_topk(np.array([1.0, 0.0]), pool, k=2, tau_pool=0.07)
    assert r.indices.tolist() == [1, 2]


def test_retrieval_k_equals_pool_with_equal_cosines():
    pool = _pool(np.tile([1.0, 0.0], (4, 1)))
    r = retrieve_topk(np.array([3.0, 0.0]), pool, k=4, tau_pool=0.07)
    assert_allclose(r.weights.values, np.full(4, 0.25), atol=1e-7)


def test_retrieval_k1_is_argmax_with_unit_weight():
    rng = np.random.default_rng(2)
    pool = _pool(rng.normal(size=(8, 4)))
    f = rng.normal(size=4)
    r = retrieve_topk(f, pool, k=1, tau_pool=0.07)
    q = pool.queries.values
    assert r.indices.tolist() == [int(np.argmax(q @ f / np.linalg.norm(q, axis=1)))]
    assert r.weights.values.tolist() == [1.0]


def test_retrieval_is_scale_invariant():
    rng = np.random.default_rng(4)
    pool = init_pool(16, 8, seed=0)
    f = rng.normal(size=8)
    a = retrieve_topk(f, pool, k=4, tau_pool=0.07)
    b = retrieve_topk(f * 37.5, pool, k=4, tau_pool=0.07)
    assert_array_equal(a.indices, b.indices)
    assert_allclose(a.weights.values, b.weights.values, atol=1e-6)


def test_retrieval_batch_matches_single():
    rng = np.random.default_rng(5)
    pool = init_pool(16, 8, seed=1)
    feats = rng.normal(size=(3, 8))
    batch = retrieve_topk(feats, pool, k=3)
    for i in range(3):
        single = retrieve_topk(feats[i], pool, k=3)
        assert_array_equal(batch.indices[i], single.indices)
        assert_allclose(batch.weights.values[i], single.weights.values, atol=1e-6)


def test_retrieval_errors():
    pool = init_pool(4, 8, seed=0)
    with pytest.raises(ParameterError):
        retrieve_topk(np.ones(8), pool, k=5)
    with pytest.raises(ParameterError):
        retrieve_topk(np.ones(8), pool, k=2, tau_pool=0.0)
    with pytest.raises(DimensionError):
        retrieve_topk(np.ones(6), pool, k=2)


def test_fuse_single_selection_returns_value_exactly():
    pool = init_pool(8, 4, seed=2)
    f = pool.queries.values[5] * 2.0
    r = retrieve_topk(f, pool, k=1)
    assert r.indices.tolist() == [5]
    assert_array_equal(fuse_patterns(r, pool).values, pool.values.values[5])


def test_fuse_opposite_values_cancel():
    pool = _pool([[1.0, 0.0], [1.0, 0.0]], [[0.3, -0.4], [-0.3, 0.4]])
    r = retrieve_topk(np.array([1.0, 0.0]), pool, k=2)
    assert_allclose(r.weights.values, [0.5, 0.5])
    assert_allclose(fuse_patterns(r, pool).values, [0.0, 0.0], atol=1e-7)


def test_fuse_matches_accumulation_loop():
    rng = np.random.default_rng(6)
    pool = init_pool(16, 8, seed=4)
    r = retrieve_topk(rng.normal(size=8), pool, k=4)
    expected = np.zeros(8)
    for i, w in zip(r.indices, r.weights.values):
        expected += float(w) * pool.values.values[i].astype(np.float64)
    assert_allclose(fuse_patterns(r, pool).values, expected, atol=1e-6)


def test_project_fusion_degenerate_and_bias_only():
    d = 4
    proj = init_projector(d, seed=0)
    with pytest.raises(DegenerateInputError):
        project_fusion(np.zeros(d), np.zeros(d), proj)

    b = np.array([3.0, 0.0, 4.0, 0.0])
    bias_only = FusionProjector(Tensor(np.zeros((2 * d, d))), Tensor(b))
    out = project_fusion(np.ones(d), np.arange(d), bias_only)
    assert_allclose(out.values, b / 5.0, atol=1e-7)

    with pytest.raises(DimensionError):
        project_fusion(np.ones(d), np.ones(d + 1), proj)


def test_project_fusion_is_unit_norm():
    rng = np.random.default_rng(7)
    proj = init_projector(8, seed=1)
    out = project_fusion(rng.normal(size=(5, 8)), rng.normal(size=(5, 8)), proj)
    assert_allclose(np.linalg.norm(out.values, axis=1), 1.0, atol=1e-6)


def test_gated_features():
    rng = np.random.default_rng(9)
    proj = init_projector(8, seed=2)
    assert_array_equal(proj.gate.values, np.zeros(2))
    feats = {"verb": rng.normal(size=(3, 8)), "noun": rng.normal(size=(3, 8))}
    fused = project_fusion(feats["verb"], feats["noun"], proj)

    out = gated_features(feats, fused, proj)
    for c, f in feats.items():
        assert_allclose(out[c].values, f / np.linalg.norm(f, axis=1, keepdims=True), atol=1e-6)

    proj.gate.values = np.array([0.5, -2.0], dtype=np.float32)
    out = gated_features(feats, fused, proj)
    expected = feats["noun"] - 2.0 * fused.values
    assert_allclose(out["noun"].values, expected / np.linalg.norm(expected, axis=1, keepdims=True), atol=1e-5)

    ungated = FusionProjector(proj.weight, proj.bias)
    assert set(ungated.parameters()) == {"projector.weight", "projector.bias"}
    assert all(t is fused for t in gated_features(feats, fused, ungated).values())

    with pytest.raises(DimensionError):
        gated_features({"verb": np.ones((2, 8)), "noun": np.ones((2, 8))}, fused, proj)


def test_record_selection_updates_counters():
    rng = np.random.default_rng(8)
    pool = init_pool(16, 8, seed=5)
    r = retrieve_topk(rng.normal(size=8), pool, k=4, component="noun")
    record_selection(r, pool)
    assert pool.counters["noun"].sum() == 4
    assert set(np.unique(pool.counters["noun"])) <= {0, 1}
    assert pool.soft_freq["noun"].sum() == pytest.approx(1.0, abs=1e-6)
    assert pool.counters["verb"].sum() == 0

    # setup: N further calls, some batched
    # -------------------------------------------------------------------------
    calls = 1
    for _ in range(6):
        record_selection(retrieve_topk(rng.normal(size=(3, 8)), pool, k=4, component="noun"), pool)
        calls += 3
    assert pool.counters["noun"].sum() == calls * 4
    assert pool.retrievals["noun"] == calls
    assert pool.windows["noun"].retrievals == calls
    assert pool.soft_freq["noun"].sum() == pytest.approx(calls, abs=1e-5)

    pool.reset_counters()
    pool.reset_window()
    assert pool.counters["noun"].sum() == 0
    assert pool.windows["noun"].retrievals == 0


def test_selection_entropy():
    pool = init_pool(2, 4, seed=0)
    with pytest.raises(UsageError):
        selection_entropy(pool, "verb")
    pool.counters["verb"] = np.array([3, 1])
    assert selection_entropy(pool, "verb") == pytest.approx(0.5623, abs=1e-4)
    pool.counters["verb"] = np.array([0, 7])
    assert selection_entropy(pool, "verb") == 0.0

    wide = init_pool(16, 4, seed=0)
    wide.counters["noun"] = np.full(16, 5)
    assert selection_entropy(wide, "noun") == pytest.approx(np.log(16), abs=1e-9)


def test_mean_pairwise_abs_cos():
    assert mean_pairwise_abs_cos(_pool([[1.0, 0.0], [2.0, 0.0]])) == pytest.approx(1.0)
    assert mean_pairwise_abs_cos(_pool([[1.0, 0.0], [0.0, -3.0]])) == pytest.approx(0.0)
    assert mean_pairwise_abs_cos(_pool([[1.0, 0.0]])) == 0.0
