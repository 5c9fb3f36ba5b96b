import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import nnls

from rad import nncore as nn
from rad.data import SynthConfig, generate_synthetic_shift, split_temporal
from rad.metrics import roc_auc
from rad.models import (
    DistillFramework,
    OriginalModel,
    RetrievalFramework,
    SearchDistillModule,
    TeacherDistill,
    TeacherRetrieval,
    extract_relevance,
    framework_forward,
    load_model,
    original_forward,
    predict_proba,
    relevance_forward,
    save_model,
    teacher_forward,
)
from rad.pipeline import TrainConfig, fit_binary, pretrain_teacher
from rad.retrieval import NeighborCache, build_index
from conftest import make_dataset

CARD = (6, 5, 3)


@pytest.fixture(scope="module")
def small():
    d = generate_synthetic_shift(SynthConfig(n_users=60, n_items=40, n_categories=4, n_clusters=4, days=12,
                                             rows_per_day=150, seed=3))
    split = split_temporal(d, 3, 2)
    return d, split, NeighborCache(build_index(split.shifting), k=5)


def cache_over(features, labels, k):
    return NeighborCache(build_index(make_dataset(features, labels=np.asarray(labels))), k=k)


# ---------------------------------------------------------------- original model


def test_original_zero_parameters_gives_half():
    m = OriginalModel(CARD, dim=4, hidden=8)
    m.zero_()
    assert original_forward(m, [1, 2, 0]) == 0.5


def test_original_is_deterministic():
    a = OriginalModel(CARD, dim=4, hidden=8, seed=7)
    b = OriginalModel(CARD, dim=4, hidden=8, seed=7)
    X = np.array([[1, 2, 0], [5, 4, 2]])
    assert predict_proba(a, X).tobytes() == predict_proba(b, X).tobytes()


def test_original_vocab_range_error():
    with pytest.raises(nn.LookupRangeError):
        original_forward(OriginalModel(CARD, dim=4, hidden=8), [6, 0, 0])


def test_original_learns_separable_toy():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 2, size=(400, 2))
    y = X[:, 0].astype(np.int8)  # label equals the first feature
    m = OriginalModel((2, 2), dim=4, hidden=8, seed=1)
    opt = nn.Adam(m.parameters(), lr=1e-2)
    for step in range(200):
        b = rng.integers(0, 400, size=32)
        with nn.Tape() as tape:
            tape.backward(nn.bce_loss(nn.sigmoid(m.logits(X[b])), y[b].astype(float)))
        opt.step()
    assert roc_auc(y, predict_proba(m, X)) > 0.95


# ---------------------------------------------------------------- relevance network


def test_relevance_empty_search_space_is_zero():
    cache = NeighborCache(build_index(make_dataset(np.zeros((0, 3), dtype=np.int64))), k=3)
    t = TeacherRetrieval(CARD, cache, dim=4)
    np.testing.assert_array_equal(relevance_forward(t.relevance, [1, 1, 1]), np.zeros(4))


def test_relevance_query_without_matches_is_zero():
    cache = cache_over([[0, 0, 0], [1, 1, 1]], [1, 0], k=2)
    t = TeacherRetrieval(CARD, cache, dim=4)
    np.testing.assert_array_equal(relevance_forward(t.relevance, [5, 4, 2]), np.zeros(4))


def test_relevance_k1_is_the_row_encoding():
    cache = cache_over([[0, 1, 2], [3, 4, 0]], [1, 0], k=1)
    r = TeacherRetrieval(CARD, cache, dim=4, seed=2).relevance
    enc = r.encode_rows(np.array([[3, 4, 0]]), np.array([0])).data[0]
    np.testing.assert_allclose(relevance_forward(r, [3, 4, 1]), enc, atol=1e-15)


def test_relevance_identical_rows_return_their_encoding():
    cache = cache_over([[2, 2, 2], [2, 2, 2]], [1, 1], k=2)
    r = TeacherRetrieval(CARD, cache, dim=4, seed=2).relevance
    enc = r.encode_rows(np.array([[2, 2, 2]]), np.array([1])).data[0]
    np.testing.assert_allclose(relevance_forward(r, [2, 2, 0]), enc, atol=1e-15)


def test_relevance_respects_exclusion():
    cache = cache_over([[0, 1, 2], [0, 1, 1]], [1, 0], k=1)
    r = TeacherRetrieval(CARD, cache, dim=4, seed=2).relevance
    enc1 = r.encode_rows(np.array([[0, 1, 1]]), np.array([0])).data[0]
    np.testing.assert_allclose(relevance_forward(r, [0, 1, 2], exclude=0), enc1, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 5))
def test_w_r_in_convex_hull_of_retrieved_encodings(seed, k):
    rng = np.random.default_rng(seed)
    feats = rng.integers(0, 3, size=(12, 3))
    labels = rng.integers(0, 2, size=12)
    cache = cache_over(feats, labels, k)
    r = TeacherRetrieval((3, 3, 3), cache, dim=4, seed=seed).relevance
    r.attention.data[...] = rng.normal(size=(4, 4)) * 3
    q = rng.integers(0, 3, size=3)
    w = relevance_forward(r, q)
    res = cache.index.retrieve_topk(q, k)
    if len(res) == 0:
        assert not w.any()
        return
    keys = r.encode_rows(feats[res.row_ids], labels[res.row_ids]).data
    # alpha >= 0 with sum 1 and keys.T @ alpha = w; the sum row is weighted to act as a hard constraint
    A = np.vstack([keys.T, 1e3 * np.ones(len(keys))])
    b = np.concatenate([w, [1e3]])
    alpha, resid = nnls(A, b)
    assert resid < 1e-8


# ---------------------------------------------------------------- teachers


def test_teacher_all_zero_is_half():
    cache = cache_over([[0, 1, 2]], [1], k=2)
    t = TeacherRetrieval(CARD, cache, dim=4)
    t.zero_()
    assert teacher_forward(t, [0, 1, 2]) == 0.5
    td = TeacherDistill(CARD, cache, dim=4)
    for p in td.head.parameters():
        p.data[...] = 0.0
    assert teacher_forward(td, [0, 1, 2]) == 0.5


def test_distill_teacher_zero_post_layers_gives_zero_logits():
    cache = cache_over([[0, 1, 2], [1, 1, 1]], [1, 0], k=2)
    td = TeacherDistill(CARD, cache, dim=4, seed=5)
    td.post.zero_()
    out = extract_relevance(td)(np.array([[0, 1, 2], [1, 0, 0], [5, 4, 2]])).data
    np.testing.assert_array_equal(out, np.zeros((3, 4)))


def test_extracted_relevance_aliases_teacher(small):
    _, split, cache = small
    td = TeacherDistill(split.shifting.schema.cardinalities, cache, dim=4, seed=1)
    head = extract_relevance(td)
    X = split.train.features[:50]
    td.logits(X)
    assert head(X).data.tobytes() == td.last_hidden.tobytes()
    teacher_ids = {id(p) for p in td.parameters()}
    assert {id(p) for p in head.parameters()} <= teacher_ids


def test_pretrained_teacher_beats_chance_on_shifting_holdout(small):
    d, split, cache = small
    cfg = TrainConfig(pretrain_epochs=4, lr=5e-3, batch_size=128)
    sh = split.shifting
    days = sh.days()
    fit_part, hold = sh.subset(days < days.max()), sh.subset(days == days.max())
    cache2 = NeighborCache(build_index(fit_part), k=10)
    t = TeacherRetrieval(sh.schema.cardinalities, cache2, dim=8, seed=0)
    pretrain_teacher(t, split, cfg, data=fit_part)
    assert roc_auc(hold.labels, predict_proba(t, hold.features)) > 0.6


# ---------------------------------------------------------------- frameworks


def frameworks(card, cache, dim=4, hidden=8):
    rel = TeacherRetrieval(card, cache, dim=dim, seed=1).extract_relevance()
    rf = RetrievalFramework(OriginalModel(card, dim, hidden, seed=2), rel, hidden, seed=3)
    df = DistillFramework(OriginalModel(card, dim, hidden, seed=2), SearchDistillModule(card, dim, hidden, 4),
                          hidden, seed=5)
    return rf, df


def test_zero_aggregation_gives_half(small):
    _, split, cache = small
    for fw in frameworks(split.train.schema.cardinalities, cache):
        fw.aggregate.zero_()
        np.testing.assert_array_equal(framework_forward(fw, split.test.features[:20]), 0.5)


def test_retrieval_counters(small):
    _, split, cache = small
    rf, df = frameworks(split.train.schema.cardinalities, cache)
    q0, r0 = cache.index.query_count, cache.requests
    X = np.tile(split.test.features, (4, 1))[:1000]
    framework_forward(df, X)
    assert cache.index.query_count == q0 and cache.requests == r0 and df.retrieval_calls == 0
    framework_forward(rf, X)
    assert cache.requests - r0 == 1000


def test_relevance_path_is_live(small):
    _, split, cache = small
    rf, _ = frameworks(split.train.schema.cardinalities, cache)
    fit_binary(rf, split.train.features, split.train.labels, 2, TrainConfig(lr=5e-3), "t")
    X = split.test.features
    full = framework_forward(rf, X)
    rf.relevance.attention.data[...] = 0.0
    rf.relevance.label_emb.data[...] = 0.0
    zero_labels = framework_forward(rf, X)
    assert np.max(np.abs(full - zero_labels)) > 1e-3


def test_dims_agree(small):
    _, split, cache = small
    card = split.train.schema.cardinalities
    td = TeacherDistill(card, cache, dim=6)
    st_ = SearchDistillModule(card, 6, 8)
    X = split.test.features[:5]
    assert extract_relevance(td)(X).shape == st_(X).shape == (5, 6)
    assert TeacherRetrieval(card, cache, dim=6).relevance(X).shape == (5, 6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0))
def test_predictions_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    m = OriginalModel(CARD, dim=4, hidden=8, seed=seed)
    for p in m.parameters():
        p.data *= scale
    X = np.column_stack([rng.integers(0, c, size=30) for c in CARD])
    p = predict_proba(m, X)
    assert np.all((p > 0) & (p < 1))


def test_freeze_keeps_extracted_outputs(small):
    _, split, cache = small
    card = split.train.schema.cardinalities
    td = TeacherDistill(card, cache, dim=4, seed=1)
    head = extract_relevance(td)
    X = split.test.features[:40]
    before = head(X).data.copy()
    head.freeze()
    fw = RetrievalFramework(OriginalModel(card, 4, 8, seed=2), head, 8, seed=3)
    fit_binary(fw, split.train.features, split.train.labels, 1, TrainConfig(lr=1e-2), "t")
    assert head(X).data.tobytes() == before.tobytes()


def test_extracted_checkpoint_roundtrip(small, tmp_path):
    _, split, cache = small
    card = split.train.schema.cardinalities
    head = extract_relevance(TeacherDistill(card, cache, dim=4, seed=1))
    X = split.test.features[:40]
    save_model(head, tmp_path / "h.radw", {"dim": 4})
    other = extract_relevance(TeacherDistill(card, cache, dim=4, seed=99))
    load_model(other, tmp_path / "h.radw", {"dim": 4})
    assert other(X).data.tobytes() == head(X).data.tobytes()
    with pytest.raises(ValueError, match="manifest"):
        load_model(other, tmp_path / "h.radw", {"dim": 8})
