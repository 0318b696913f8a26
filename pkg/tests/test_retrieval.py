import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cots.data import CorpusConfig, VideoSample, generate_corpus, make_videos
from cots.encoders import EncoderConfig, init_model
from cots.errors import EvaluationError, PreconditionError
from cots.retrieval import (
    BenchRow,
    BenchTable,
    FusionStub,
    MetricsReport,
    RetrievalIndex,
    benchmark_efficiency,
    build_index,
    evaluate_model,
    evaluate_retrieval,
    evaluate_video,
    fit_slopes,
    rank_of_match,
    video_embedding,
)

ENC = EncoderConfig(d_model=16, d_out=16, depth=1, n_heads=2)


@pytest.fixture(scope="module")
def model():
    return init_model(ENC, 11)[0]


@pytest.fixture(scope="module")
def pairs():
    return generate_corpus(CorpusConfig(n_pairs=80, seed=4))


def brute_force_report(scores, ks):
    """Double-loop ranks: 1 + number of candidates scoring strictly above the match on the diagonal."""
    n = scores.shape[0]
    ranks = []
    for i in range(n):
        r = 1
        for j in range(scores.shape[1]):
            if scores[i, j] > scores[i, i]:
                r += 1
        ranks.append(r)
    ranks.sort()
    r_at = {k: sum(1 for r in ranks if r <= k) / n for k in ks}
    return r_at, float(ranks[(n - 1) // 2])


def _index_from_scores(scores):
    """Queries = identity rows, index rows = score columns, so query @ index.T == scores."""
    n = scores.shape[0]
    return np.eye(n), RetrievalIndex(np.ascontiguousarray(scores.T), list(range(n)), "text")


# ----------------------------------------------------------------- rank / report


def test_rank_of_match_examples():
    idx = RetrievalIndex(np.array([[0.9], [0.5], [0.7]]), ["a", "b", "c"], "text")
    assert rank_of_match(np.array([1.0]), idx, "b") == 3
    flat = RetrievalIndex(np.ones((4, 2)), list(range(4)), "text")
    assert rank_of_match(np.array([1.0, 0.0]), flat, 2) == 1
    orth = RetrievalIndex(np.eye(5), list(range(5)), "text")
    assert rank_of_match(np.eye(5)[3], orth, 3) == 1
    with pytest.raises(EvaluationError):
        rank_of_match(np.array([1.0]), idx, "zzz")


def test_identity_and_adversarial_structures():
    q, idx = _index_from_scores(np.eye(10))
    rep = evaluate_retrieval(q, list(range(10)), idx)
    assert rep.r_at == {1: 1.0, 5: 1.0, 10: 1.0} and rep.median_rank == 1

    adv = np.ones((10, 10)) - 2 * np.eye(10)  # every match scores below all nine others
    q, idx = _index_from_scores(adv)
    rep = evaluate_retrieval(q, list(range(10)), idx)
    assert rep.r_at == {1: 0.0, 5: 0.0, 10: 1.0} and rep.median_rank == 10


@settings(max_examples=200)
@given(n=st.integers(1, 16), seed=st.integers(0, 2**31 - 1), ties=st.booleans())
def test_matches_double_loop_oracle(n, seed, ties):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 3, (n, n)).astype(float) if ties else rng.standard_normal((n, n))
    q, idx = _index_from_scores(scores)
    ks = [1, 2, 5, n]
    rep = evaluate_retrieval(q, list(range(n)), idx, ks)
    r_at, med = brute_force_report(scores, ks)
    assert rep.r_at == r_at and rep.median_rank == med
    assert rep.r_at[n] == 1.0 and rep.median_rank >= 1
    vals = [rep.r_at[k] for k in sorted(ks)]
    assert vals == sorted(vals)


def test_random_8x8_against_brute_force():
    scores = np.random.default_rng(8).standard_normal((8, 8))
    q, idx = _index_from_scores(scores)
    rep = evaluate_retrieval(q, list(range(8)), idx, [1, 5, 10])
    assert (rep.r_at, rep.median_rank) == brute_force_report(scores, [1, 5, 10])


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31 - 1))
def test_permuting_index_rows_changes_nothing(seed):
    rng = np.random.default_rng(seed)
    n = 12
    emb = rng.standard_normal((n, 4))
    queries = rng.standard_normal((n, 4))
    ids = [f"c{i}" for i in range(n)]
    base = evaluate_retrieval(queries, ids, RetrievalIndex(emb, ids, "text"))
    perm = rng.permutation(n)
    shuffled = evaluate_retrieval(queries, ids, RetrievalIndex(emb[perm], [ids[p] for p in perm], "text"))
    assert base.r_at == shuffled.r_at and base.median_rank == shuffled.median_rank
    assert base.ranks == shuffled.ranks


def test_evaluation_errors():
    with pytest.raises(EvaluationError):
        evaluate_retrieval(np.zeros((1, 2)), [0], RetrievalIndex(np.zeros((0, 2)), [], "text"))
    with pytest.raises(EvaluationError):
        RetrievalIndex(np.zeros((2, 2)), [0], "text")
    with pytest.raises(EvaluationError):
        evaluate_retrieval(np.zeros((2, 2)), [0], RetrievalIndex(np.eye(2), [0, 1], "text"))


def test_report_json_roundtrip():
    rep = MetricsReport("I2T", {1: 0.25, 5: 0.5, 10: 1.0}, 3.0, 8, {"embed": 0.1})
    back = MetricsReport.from_json(rep.to_json())
    assert back.r_at == rep.r_at and back.median_rank == 3.0 and back.wall_times == {"embed": 0.1}


# ----------------------------------------------------------------- index from a model


def test_index_rows_are_unit_and_deterministic(model, pairs):
    a = build_index(model, pairs, "text")
    b = build_index(model, pairs, "text")
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    assert np.max(np.abs(np.linalg.norm(a.embeddings, axis=1) - 1)) < 1e-9
    assert len(build_index(model, [], "image")) == 0


def test_untrained_model_is_near_chance(model, pairs):
    reps = evaluate_model(model, pairs)
    for rep in reps.values():
        assert rep.n_queries == 80
        assert rep.r_at[1] <= 1 / 80 + 3 * np.sqrt((1 / 80) * (1 - 1 / 80) / 80) + 0.05


# ----------------------------------------------------------------- video


def test_video_embedding_pooling(model, pairs):
    one = VideoSample([pairs[0].image_tokens], pairs[0].text_tokens, 0)
    rep = VideoSample([pairs[0].image_tokens] * 4, pairs[0].text_tokens, 0)
    np.testing.assert_allclose(video_embedding(model, one), video_embedding(model, rep), atol=1e-12)
    frames = [p.image_tokens for p in pairs[:5]]
    a = video_embedding(model, VideoSample(frames, [1], 0))
    b = video_embedding(model, VideoSample(frames[::-1], [1], 0))
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    assert np.linalg.norm(video_embedding(model, VideoSample(frames, [1], 0), renormalize=False)) < 1
    with pytest.raises(PreconditionError):
        video_embedding(model, VideoSample([], [1], 0))


@pytest.mark.parametrize("renorm", [True, False])
def test_single_frame_video_retrieval_equals_text_to_image(model, pairs, renorm):
    videos = make_videos(pairs, 1, seed=3)
    t2v = evaluate_video(model, videos, renormalize=renorm)
    same_pairs = [pairs[v.source_indices[0]] for v in videos]
    t2i = evaluate_model(model, same_pairs)["T2I"]
    assert t2v.direction == "T2V"
    assert t2v.r_at == t2i.r_at and t2v.median_rank == t2i.median_rank and t2v.ranks == t2i.ranks


# ----------------------------------------------------------------- benchmark


def test_fusion_stub_matches_naive_loop(rng):
    stub = FusionStub.create(4, hidden=5, seed=1)
    q, c = rng.standard_normal((3, 4)), rng.standard_normal((6, 4))
    out = stub.score(q, c)
    for i in range(3):
        for j in range(6):
            hidden = [np.tanh(sum(q[i, k] * c[j, k] * stub.w1[k, h] for k in range(4)) + stub.b1[h]) for h in range(5)]
            assert out[i, j] == pytest.approx(sum(a * b for a, b in zip(hidden, stub.w2)), abs=1e-12)


def test_bench_table_csv_roundtrip_and_slopes():
    rows = [BenchRow(n, 0.01 * n, 1e-5 * n, 1e-8 * n * n) for n in (500, 1000, 2000)]
    q, f = fit_slopes(rows)
    assert q == pytest.approx(1.0, abs=1e-12) and f == pytest.approx(2.0, abs=1e-12)
    table = BenchTable(rows, q, f)
    back = BenchTable.from_csv(table.to_csv())
    assert back.rows == rows and back.query_slope == q and back.fusion_slope == f
    assert "slope" in table.format()


def test_benchmark_structure_small():
    table = benchmark_efficiency([50, 100], d_out=8, repeats=1, seq_len=4)
    assert [r.n for r in table.rows] == [50, 100]
    assert all(r.precompute_s > 0 and r.query_s > 0 and r.fusion_s > 0 for r in table.rows)
    with pytest.raises(ValueError):
        benchmark_efficiency([100])
