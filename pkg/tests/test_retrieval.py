"""Ranking metric oracles, exact-search checks, and TREC file formats."""

import math

import numpy as np
import pytest

from convssp.data import Conversation, Document, build_vocabulary
from convssp.encoder import EncoderConfig, clone_params, freeze, init_encoder_params
from convssp.retrieval import (
    DenseIndex,
    EvalError,
    encode_text_vector,
    index_corpus,
    mrr,
    ndcg_at_3,
    perturb_for_robustness,
    read_qrels,
    read_run,
    robustness_eval,
    run_retrieval,
    search,
    write_curve_csv,
    write_qrels,
    write_run,
)


def make_index(vectors, ids=None):
    vectors = np.asarray(vectors, dtype=np.float64)
    ids = ids or [f"d{i}" for i in range(len(vectors))]
    return DenseIndex(doc_ids=ids, vectors=vectors)


class TestSearch:
    def test_self_similarity_ranks_first(self):
        rng = np.random.default_rng(0)
        vectors = rng.standard_normal((10, 4))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        index = make_index(vectors)
        hits = search(index, vectors[3], top_k=3)
        assert hits[0][0] == "d3"

    def test_orthogonal_query_ties_break_by_doc_id(self):
        vectors = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        index = make_index(vectors, ids=["dc", "da", "db"])
        hits = search(index, np.array([0.0, 1.0]), top_k=3)
        assert [h[0] for h in hits] == ["da", "db", "dc"]
        assert all(score == 0.0 for _, score in hits)

    def test_hand_computed_2d_ranking(self):
        vectors = np.array(
            [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-1.0, 0.0], [0.8, 0.2]]
        )
        index = make_index(vectors)
        query = np.array([2.0, 1.0])
        # dot products: 2.0, 1.0, 1.5, -2.0, 1.8
        hits = search(index, query, top_k=5)
        assert [h[0] for h in hits] == ["d0", "d4", "d2", "d1", "d3"]
        np.testing.assert_allclose([h[1] for h in hits], [2.0, 1.8, 1.5, 1.0, -2.0])

    def test_top_k_larger_than_corpus_returns_full_ranking(self):
        index = make_index(np.eye(3))
        hits = search(index, np.array([1.0, 2.0, 3.0]), top_k=50)
        assert len(hits) == 3

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(1)
        vectors = rng.standard_normal((2000, 8))
        # plant exact ties
        vectors[100] = vectors[200]
        ids = [f"d{i:05d}" for i in range(len(vectors))]
        index = make_index(vectors, ids=ids)
        for _ in range(5):
            q = rng.standard_normal(8)
            scores = vectors @ q
            oracle = sorted(zip(ids, scores), key=lambda t: (-t[1], t[0]))[:10]
            got = search(index, q, top_k=10)
            assert [g[0] for g in got] == [o[0] for o in oracle]

    def test_scale_invariance_of_ranking(self):
        rng = np.random.default_rng(2)
        index = make_index(rng.standard_normal((50, 6)))
        q = rng.standard_normal(6)
        base = [d for d, _ in search(index, q, top_k=50)]
        scaled = [d for d, _ in search(index, 7.3 * q, top_k=50)]
        assert base == scaled

    def test_rejects_bad_top_k(self):
        index = make_index(np.eye(2))
        with pytest.raises(EvalError):
            search(index, np.ones(2), top_k=0)


class TestMrr:
    def test_all_rank_one(self):
        run = {"q1": [("d1", 1.0)], "q2": [("d2", 1.0)]}
        qrels = {("q1", "d1"): 2, ("q2", "d2"): 3}
        assert mrr(run, qrels) == 1.0

    def test_first_relevant_at_rank_four(self):
        run = {"q1": [(f"d{i}", 1.0 - 0.1 * i) for i in range(6)]}
        qrels = {("q1", "d3"): 2}
        assert mrr(run, qrels) == 0.25

    def test_two_query_average(self):
        run = {
            "q1": [("a", 5.0), ("b", 4.0), ("c", 3.0)],
            "q2": [("a", 5.0), ("b", 4.0), ("c", 3.0), ("d", 2.0), ("e", 1.0)],
        }
        qrels = {("q1", "b"): 2, ("q2", "e"): 2}
        np.testing.assert_allclose(mrr(run, qrels), 0.35)

    def test_threshold_respected(self):
        run = {"q1": [("a", 2.0), ("b", 1.0)]}
        qrels = {("q1", "a"): 1, ("q1", "b"): 2}
        assert mrr(run, qrels, positive_threshold=2) == 0.5
        assert mrr(run, qrels, positive_threshold=1) == 1.0

    def test_no_positive_scores_zero(self):
        run = {"q1": [("a", 1.0)]}
        qrels = {("q1", "zzz"): 2}
        assert mrr(run, qrels) == 0.0

    def test_unjudged_query_skipped_by_default(self):
        run = {"q1": [("a", 1.0)], "q-unjudged": [("a", 1.0)]}
        qrels = {("q1", "a"): 2}
        assert mrr(run, qrels) == 1.0
        assert mrr(run, qrels, skip_unjudged=False) == 0.5

    def test_appending_nonrelevant_below_first_hit_is_noop(self):
        run = {"q1": [("a", 3.0), ("b", 2.0)]}
        qrels = {("q1", "a"): 2}
        base = mrr(run, qrels)
        run["q1"] = run["q1"] + [("x", 1.0), ("y", 0.5)]
        assert mrr(run, qrels) == base

    def test_empty_run_rejected(self):
        with pytest.raises(EvalError):
            mrr({}, {("q", "d"): 1})


class TestNdcg:
    def test_ideal_ranking_is_one(self):
        run = {"q1": [("a", 3.0), ("b", 2.0), ("c", 1.0)]}
        qrels = {("q1", "a"): 3, ("q1", "b"): 2, ("q1", "c"): 1}
        np.testing.assert_allclose(ndcg_at_3(run, qrels), 1.0)

    def test_hand_value_exponential_gain(self):
        # grades at ranks 1..3 are (3, 0, 1); the query's grade multiset is {3, 1}
        run = {"q1": [("a", 3.0), ("b", 2.0), ("c", 1.0)]}
        qrels = {("q1", "a"): 3, ("q1", "c"): 1}
        dcg = 7.0 + 0.0 + 1.0 / math.log2(4)
        idcg = 7.0 + 1.0 / math.log2(3)
        np.testing.assert_allclose(ndcg_at_3(run, qrels), dcg / idcg, atol=1e-12)
        assert abs(ndcg_at_3(run, qrels) - 0.98285) < 5e-5

    def test_no_relevant_contributes_zero(self):
        run = {
            "q1": [("a", 2.0)],
            "q2": [("b", 2.0)],
        }
        qrels = {("q1", "a"): 2, ("q2", "x"): 0}
        np.testing.assert_allclose(ndcg_at_3(run, qrels), 0.5)

    def test_linear_gain_option(self):
        run = {"q1": [("a", 3.0), ("b", 2.0), ("c", 1.0)]}
        qrels = {("q1", "a"): 3, ("q1", "c"): 1}
        dcg = 3.0 + 0.0 + 1.0 / math.log2(4)
        idcg = 3.0 + 1.0 / math.log2(3)
        np.testing.assert_allclose(
            ndcg_at_3(run, qrels, exponential_gain=False), dcg / idcg
        )

    def test_bounded_and_appending_below_three_is_noop(self):
        rng = np.random.default_rng(3)
        run = {"q1": [(f"d{i}", float(10 - i)) for i in range(3)]}
        qrels = {("q1", "d1"): 2, ("q1", "d9"): 3}
        value = ndcg_at_3(run, qrels)
        assert 0.0 <= value <= 1.0
        run["q1"] = run["q1"] + [("zz", 0.5)]
        assert ndcg_at_3(run, qrels) == value


class TestTrecFiles:
    def test_run_round_trip(self, tmp_path):
        run = {
            "q1": [("d1", 1.5), ("d2", 0.25)],
            "q2": [("d9", -3.75)],
        }
        path = tmp_path / "run.trec"
        write_run(run, path, tag="toy")
        lines = path.read_text().splitlines()
        assert lines[0] == "q1 Q0 d1 1 1.5 toy"
        again = read_run(path)
        assert again == run

    def test_rank_column_matches_position(self, tmp_path):
        run = {"q1": [("a", 9.0), ("b", 8.0), ("c", 7.0)]}
        path = tmp_path / "run.trec"
        write_run(run, path)
        for i, line in enumerate(path.read_text().splitlines(), start=1):
            assert int(line.split()[3]) == i

    def test_qrels_parse(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d7 2\nq1  0   d8  0\n\nq2 0 d1 1\n")
        qrels = read_qrels(path)
        assert qrels[("q1", "d7")] == 2
        assert qrels[("q1", "d8")] == 0
        assert qrels[("q2", "d1")] == 1

    def test_qrels_round_trip(self, tmp_path):
        qrels = {("q1", "d1"): 2, ("q2", "d4"): 0}
        path = tmp_path / "qrels.txt"
        write_qrels(qrels, path)
        assert read_qrels(path) == qrels

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d7 2\nq2 0 d8\n")
        with pytest.raises(EvalError, match=":2:"):
            read_qrels(path)

    def test_bad_grade_rejected(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d7 two\n")
        with pytest.raises(EvalError, match=":1:"):
            read_qrels(path)

    def test_out_of_order_run_rejected(self, tmp_path):
        path = tmp_path / "run.trec"
        path.write_text("q1 Q0 d1 2 1.0 tag\n")
        with pytest.raises(EvalError, match="rank"):
            read_run(path)


def tiny_retrieval_world():
    vocab = build_vocabulary(
        ["alpha beta gamma delta epsilon zeta about doc what is tell me"]
    )
    config = EncoderConfig(
        hidden_size=16, layers=1, heads=2, ff_size=32,
        max_positions=128, vocab_size=len(vocab), dropout=0.0,
    )
    teacher = freeze(clone_params(init_encoder_params(config, np.random.default_rng(0)), trainable=False))
    docs = [
        Document("d-alpha", "alpha doc about alpha"),
        Document("d-beta", "beta doc about beta"),
        Document("d-gamma", "gamma doc about gamma"),
    ]
    convs = [
        Conversation("e00_t02", ("what is alpha", "tell me about alpha")),
        Conversation("e01_t02", ("what is beta", "tell me about beta")),
    ]
    noise = [
        Conversation("n00_t02", ("what is delta", "tell me delta")),
        Conversation("n01_t02", ("what is epsilon", "what is zeta")),
        Conversation("n02_t01", ("epsilon zeta delta",)),
    ]
    qrels = {
        ("e00_t02", "d-alpha"): 2,
        ("e01_t02", "d-beta"): 2,
    }
    return vocab, config, teacher, docs, convs, noise, qrels


class TestIndexAndRobustness:
    def test_index_matches_per_document_encodes(self):
        vocab, config, teacher, docs, *_ = tiny_retrieval_world()
        index = index_corpus(docs, teacher, config, vocab)
        assert index.vectors.shape == (3, config.hidden_size)
        for row, doc in enumerate(docs):
            np.testing.assert_array_equal(
                index.vectors[row],
                encode_text_vector(doc.text, teacher, config, vocab),
            )

    def test_reindex_identical(self):
        vocab, config, teacher, docs, *_ = tiny_retrieval_world()
        a = index_corpus(docs, teacher, config, vocab)
        b = index_corpus(docs, teacher, config, vocab)
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_empty_corpus_rejected(self):
        vocab, config, teacher, *_ = tiny_retrieval_world()
        with pytest.raises(EvalError):
            index_corpus([], teacher, config, vocab)

    def test_single_document_index(self):
        vocab, config, teacher, docs, *_ = tiny_retrieval_world()
        index = index_corpus(docs[:1], teacher, config, vocab)
        assert index.vectors.shape == (1, config.hidden_size)

    def test_zero_added_equals_plain_eval(self):
        vocab, config, teacher, docs, convs, noise, qrels = tiny_retrieval_world()
        index = index_corpus(docs, teacher, config, vocab)
        curve = robustness_eval(
            teacher, convs, noise, 0, index, qrels, config, vocab, seed=3
        )
        run = run_retrieval(convs, teacher, index, config, vocab)
        assert curve[0].added == 0
        np.testing.assert_allclose(curve[0].mrr, mrr(run, qrels))
        np.testing.assert_allclose(curve[0].ndcg3, ndcg_at_3(run, qrels))

    def test_curve_deterministic_and_matches_manual_runs(self):
        vocab, config, teacher, docs, convs, noise, qrels = tiny_retrieval_world()
        index = index_corpus(docs, teacher, config, vocab)
        curve_a = robustness_eval(
            teacher, convs, noise, 2, index, qrels, config, vocab, seed=9
        )
        curve_b = robustness_eval(
            teacher, convs, noise, 2, index, qrels, config, vocab, seed=9
        )
        assert [(p.added, p.mrr, p.ndcg3) for p in curve_a] == [
            (p.added, p.mrr, p.ndcg3) for p in curve_b
        ]
        # manual per-j evaluation reproduces each curve point
        for j in range(3):
            perturbed = [
                perturb_for_robustness(conv, noise, j, 9, pos)
                for pos, conv in enumerate(convs)
            ]
            run = run_retrieval(perturbed, teacher, index, config, vocab)
            np.testing.assert_allclose(curve_a[j].mrr, mrr(run, qrels))
            np.testing.assert_allclose(curve_a[j].ndcg3, ndcg_at_3(run, qrels))

    def test_perturbation_prepends_and_preserves_tail(self):
        vocab, config, teacher, docs, convs, noise, qrels = tiny_retrieval_world()
        perturbed = perturb_for_robustness(convs[0], noise, 3, seed=1, position=0)
        assert perturbed.queries[-len(convs[0].queries) :] == convs[0].queries
        assert len(perturbed.queries) == len(convs[0].queries) + 3

    def test_noise_pool_too_small_errors(self):
        vocab, config, teacher, docs, convs, noise, qrels = tiny_retrieval_world()
        with pytest.raises(EvalError, match="noise pool"):
            perturb_for_robustness(convs[0], noise[:1], 50, seed=1, position=0)

    def test_curve_csv(self, tmp_path):
        from convssp.retrieval import RobustnessPoint

        path = tmp_path / "curve.csv"
        write_curve_csv(
            [RobustnessPoint(0, 0.5, 0.25), RobustnessPoint(1, 0.4, 0.2)], path
        )
        lines = path.read_text().splitlines()
        assert lines[0] == "j,mrr,ndcg3"
        assert lines[1] == "0,0.5,0.25"
