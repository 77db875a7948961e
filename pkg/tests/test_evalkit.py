import numpy as np
import pytest

from model.errors import BadLambda, ConfigError, EmptyMatrix, NonFinite, ShapeMismatch
from model.evalkit import (I2T, T2I, RetrievalReport, SimilarityMatrix, attention_ranking, ensemble,
                           ensemble_all, evaluate, fold_eval, recall_at_k, rerank_i2t, rsum)


def _recall_oracle(scores, cpi, direction, K):
    n_images, n_texts = scores.shape
    hits = 0
    if direction == I2T:
        for i in range(n_images):
            ranked = sorted(range(n_texts), key=lambda j: (-scores[i, j], j))
            hits += any(j // cpi == i for j in ranked[:K])
        return 100.0 * hits / n_images
    for j in range(n_texts):
        ranked = sorted(range(n_images), key=lambda i: (-scores[i, j], i))
        hits += (j // cpi) in ranked[:K]
    return 100.0 * hits / n_texts


@pytest.fixture
def promotion_matrix():
    # Image 0's best text belongs to image 1, but text 0 ranks image 0 first.
    return SimilarityMatrix(np.array([
        [0.8, 0.9, 0.1, 0.0],
        [0.3, 0.95, 0.2, 0.1],
        [0.2, 0.92, 0.5, 0.3],
        [0.1, 0.1, 0.3, 0.6],
    ]), captions_per_image=1)


class TestSimilarityMatrix:
    def test_text_count_must_match_captions(self):
        with pytest.raises(ShapeMismatch):
            SimilarityMatrix(np.zeros((2, 5)), captions_per_image=2)

    def test_non_finite_rejected(self):
        with pytest.raises(NonFinite):
            SimilarityMatrix(np.array([[np.nan]]), captions_per_image=1)

    def test_image_of_text(self):
        S = SimilarityMatrix(np.zeros((2, 10)))
        assert [S.image_of_text(j) for j in (0, 4, 5, 9)] == [0, 0, 1, 1]


class TestRecall:
    def test_identity_is_perfect(self):
        report = evaluate(SimilarityMatrix(np.eye(4), captions_per_image=1))
        assert report.recalls() == [100.0] * 6

    def test_reversed_diagonal(self):
        S = SimilarityMatrix(np.fliplr(np.eye(3)), captions_per_image=1)
        assert recall_at_k(S, I2T, 1) == pytest.approx(100.0 / 3)
        assert recall_at_k(S, T2I, 1) == pytest.approx(100.0 / 3)

    def test_k_at_least_candidates_is_perfect(self, rng):
        S = SimilarityMatrix(rng.standard_normal((3, 6)), captions_per_image=2)
        assert recall_at_k(S, I2T, 6) == 100.0
        assert recall_at_k(S, T2I, 10) == 100.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            n = int(rng.integers(1, 51))
            cpi = int(rng.integers(1, 6))
            scores = rng.standard_normal((n, n * cpi))
            if rng.random() < 0.3:
                scores = np.round(scores, 1)
            S = SimilarityMatrix(scores, captions_per_image=cpi)
            for direction in (I2T, T2I):
                for K in (1, 5, 10):
                    assert recall_at_k(S, direction, K) == pytest.approx(
                        _recall_oracle(scores, cpi, direction, K), abs=1e-9)

    def test_empty_matrix(self):
        with pytest.raises(EmptyMatrix):
            recall_at_k(SimilarityMatrix(np.zeros((0, 0)), captions_per_image=1), I2T, 1)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            recall_at_k(SimilarityMatrix(np.eye(2), captions_per_image=1), I2T, 0)


class TestRsum:
    def test_sums_six_recalls(self):
        assert rsum([75.3, 94.4, 97.6, 57.3, 84.8, 90.9]) == 500.3

    def test_bounds(self):
        assert rsum([0.0] * 6) == 0.0
        assert rsum([100.0] * 6) == 600.0

    def test_needs_six_values(self):
        with pytest.raises(ShapeMismatch):
            rsum([1.0, 2.0])

    def test_report_includes_rsum(self):
        report = RetrievalReport(10.0, 20.0, 30.0, 5.0, 15.0, 25.0)
        assert report.to_dict()["rsum"] == 105.0


class TestRerank:
    def test_mutual_rank_promotes_true_match(self, promotion_matrix):
        assert promotion_matrix.i2t_rankings()[0, 0] == 1
        reranked = rerank_i2t(promotion_matrix, top_n=2, lam=0.5)
        np.testing.assert_array_equal(reranked.i2t_rankings()[0], [0, 1, 2, 3])
        assert recall_at_k(reranked, I2T, 1) > recall_at_k(promotion_matrix, I2T, 1)

    def test_scores_are_untouched(self, promotion_matrix):
        reranked = rerank_i2t(promotion_matrix, top_n=3)
        np.testing.assert_array_equal(reranked.scores, promotion_matrix.scores)

    def test_lambda_one_keeps_order(self, rng):
        S = SimilarityMatrix(rng.standard_normal((5, 10)), captions_per_image=2)
        np.testing.assert_array_equal(rerank_i2t(S, top_n=4, lam=1.0).i2t_rankings(), S.i2t_rankings())

    def test_identity_stays_perfect(self):
        S = SimilarityMatrix(np.eye(6), captions_per_image=1)
        assert evaluate(rerank_i2t(S, top_n=3)).recalls() == [100.0] * 6

    def test_rows_stay_permutations_and_tail_is_fixed(self):
        rng = np.random.default_rng(29)
        for _ in range(50):
            n, cpi = int(rng.integers(2, 12)), int(rng.integers(1, 4))
            S = SimilarityMatrix(rng.standard_normal((n, n * cpi)), captions_per_image=cpi)
            top_n = int(rng.integers(1, n * cpi + 3))
            order = rerank_i2t(S, top_n=top_n, lam=float(rng.uniform())).i2t_rankings()
            before = S.i2t_rankings()
            cut = min(top_n, n * cpi)
            for i in range(n):
                assert sorted(order[i]) == list(range(n * cpi))
                assert set(order[i, :cut]) == set(before[i, :cut])
                np.testing.assert_array_equal(order[i, cut:], before[i, cut:])

    def test_text_to_image_results_unchanged(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            n, cpi = int(rng.integers(1, 10)), int(rng.integers(1, 4))
            S = SimilarityMatrix(rng.standard_normal((n, n * cpi)), captions_per_image=cpi)
            reranked = rerank_i2t(S, top_n=int(rng.integers(1, 20)), lam=float(rng.uniform()))
            np.testing.assert_array_equal(reranked.t2i_rankings(), S.t2i_rankings())
            a, b = evaluate(S), evaluate(reranked)
            assert (a.t2i_r1, a.t2i_r5, a.t2i_r10) == (b.t2i_r1, b.t2i_r5, b.t2i_r10)

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_lambda_out_of_range(self, promotion_matrix, lam):
        with pytest.raises(BadLambda):
            rerank_i2t(promotion_matrix, lam=lam)

    def test_top_n_must_be_positive(self, promotion_matrix):
        with pytest.raises(ConfigError):
            rerank_i2t(promotion_matrix, top_n=0)


class TestEnsemble:
    def test_self_ensemble_is_identity(self, rng):
        S = SimilarityMatrix(rng.standard_normal((3, 6)), captions_per_image=2)
        np.testing.assert_array_equal(ensemble(S, S).scores, S.scores)

    def test_opposite_scores_cancel(self, rng):
        S = SimilarityMatrix(rng.standard_normal((3, 6)), captions_per_image=2)
        assert not np.any(ensemble(S, -S).scores)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ensemble(SimilarityMatrix(np.eye(2), 1), SimilarityMatrix(np.eye(3), 1))

    def test_many_models_average(self, rng):
        mats = [SimilarityMatrix(rng.standard_normal((2, 4)), captions_per_image=2) for _ in range(3)]
        expected = (mats[0].scores + mats[1].scores + mats[2].scores) / 3
        np.testing.assert_allclose(ensemble_all(mats).scores, expected, atol=1e-15)
        assert ensemble_all(mats[:1]) is mats[0]

    def test_nothing_to_ensemble(self):
        with pytest.raises(EmptyMatrix):
            ensemble_all([])


class TestAttentionRanking:
    def test_orders_by_dot_product(self):
        nodes = np.array([[0.0, 1.0], [2.0, 0.0], [1.0, 0.0]])
        assert attention_ranking(np.array([1.0, 0.0]), nodes) == [1, 2, 0]
        assert attention_ranking(np.array([1.0, 0.0]), nodes, top=2) == [1, 2]

    def test_ties_keep_node_order(self):
        assert attention_ranking(np.ones(2), np.ones((3, 2))) == [0, 1, 2]

    @pytest.mark.parametrize("top", [0, 4])
    def test_top_out_of_range(self, top):
        with pytest.raises(ShapeMismatch):
            attention_ranking(np.ones(2), np.ones((3, 2)), top=top)

    def test_width_mismatch(self):
        with pytest.raises(ShapeMismatch):
            attention_ranking(np.ones(3), np.ones((3, 2)))


class TestFoldEval:
    def test_mean_of_fold_reports(self, rng):
        scores = rng.standard_normal((6, 12))
        S = SimilarityMatrix(scores, captions_per_image=2)
        first = evaluate(SimilarityMatrix(scores[:3, :6], captions_per_image=2)).recalls()
        second = evaluate(SimilarityMatrix(scores[3:, 6:], captions_per_image=2)).recalls()
        expected = [(a + b) / 2 for a, b in zip(first, second)]
        assert fold_eval(S, 2).recalls() == pytest.approx(expected)

    def test_single_fold_is_plain_evaluation(self, rng):
        S = SimilarityMatrix(rng.standard_normal((4, 8)), captions_per_image=2)
        assert fold_eval(S, 1).recalls() == pytest.approx(evaluate(S).recalls())

    def test_unequal_folds_rejected(self, rng):
        with pytest.raises(ShapeMismatch):
            fold_eval(SimilarityMatrix(rng.standard_normal((6, 6)), captions_per_image=1), 4)
