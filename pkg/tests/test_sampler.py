import numpy as np
import pytest

from src.errors import ArgumentError
from src.numcore import RngStream, softmax
from src.sampler import (
    MemoryBank, ScoreMaps, build_sampling_distribution, debias_score, expected_class_distribution, joint_embedding,
    plan_negatives, sample_negatives, score_distribution, select_anchors,
)


def random_maps(rng: RngStream, b=2, k=3, n=5, c=3) -> ScoreMaps:
    return ScoreMaps.from_logits(rng.normal(size=(b, k, n)), rng.normal(size=(b, k, c)))


@pytest.mark.unit
class TestJointEmbedding:

    def test_matches_naive_loops(self):
        """Vectorised class distribution and joint rows agree with explicit loops"""
        root = RngStream(11)
        for case in range(50):
            rng = root.child(case)
            b, k, n, c = (int(v) for v in rng.integers(1, 6, size=4))
            sm = random_maps(rng, b, k, n, c)
            fc = expected_class_distribution(sm)
            je = joint_embedding(sm)
            for bi in range(b):
                for p in range(n):
                    expected = np.zeros(c)
                    for slot in range(k):
                        for cls in range(c):
                            expected[cls] += sm.mask_probs[bi, slot, p] * sm.class_probs[bi, slot, cls]
                    np.testing.assert_allclose(fc[bi, p], expected, atol=1e-12)
                    row = np.concatenate([sm.mask_probs[bi, :, p], expected])
                    np.testing.assert_allclose(je.y[bi, p], row, atol=1e-12)
                    np.testing.assert_allclose(je.y_normalized[bi, p], row / np.sqrt(np.sum(row ** 2)), atol=1e-12)

    def test_class_distribution_sums_to_one(self):
        """Each pixel's expected class distribution is a distribution"""
        fc = expected_class_distribution(random_maps(RngStream(3), b=3, k=4, n=7, c=5))
        np.testing.assert_allclose(fc.sum(axis=-1), 1.0)

    def test_variant_rows_are_unit(self):
        """Mask and class blocks are renormalised separately"""
        je = joint_embedding(random_maps(RngStream(4)))
        for variant in ('fusion', 'mask', 'class', 'mask_only', 'class_only'):
            np.testing.assert_allclose(np.linalg.norm(je.rows(variant), axis=-1), 1.0)
        assert je.rows('mask').shape[-1] == 3
        with pytest.raises(ArgumentError):
            je.rows('nearest')


@pytest.mark.unit
class TestScoreDistribution:

    def test_score_range(self):
        """Debias scores of unit rows lie in [0, 2] and vanish on identical rows"""
        rng = RngStream(5)
        rows = rng.normal(size=(20, 4))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        scores = debias_score(rows[0][None, :], rows)
        assert scores[0] == pytest.approx(0.0, abs=1e-12)
        assert np.all((scores >= 0.0) & (scores <= 2.0))

    def test_identical_rows_never_drawn(self):
        """A pool row equal to the anchor gets probability zero"""
        anchor = np.array([1.0, 0.0])
        pool = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        dist = score_distribution(anchor, pool, 'fusion', 'linear')
        np.testing.assert_allclose(dist, [0.0, 1 / 3, 2 / 3])

    @pytest.mark.parametrize('exponent,expected', [
        ('squared', [0.0, 0.2, 0.8]),
        ('sqrt', [0.0, 1 / (1 + np.sqrt(2)), np.sqrt(2) / (1 + np.sqrt(2))]),
    ])
    def test_exponents(self, exponent, expected):
        """Exponent reshapes the weights before normalising"""
        dist = score_distribution(np.array([1.0, 0.0]), np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]),
                                  'fusion', exponent)
        np.testing.assert_allclose(dist, expected)

    def test_uniform_and_degenerate(self):
        """Uniform ignores scores and an all-zero weight vector falls back to uniform"""
        anchor = np.array([0.6, 0.8])
        pool = np.tile(anchor, (4, 1))
        np.testing.assert_allclose(score_distribution(anchor, pool, 'uniform', 'linear'), 0.25)
        np.testing.assert_allclose(score_distribution(anchor, pool, 'fusion', 'linear'), 0.25)

    def test_empty_pool(self):
        """An empty pool is an argument error"""
        with pytest.raises(ArgumentError):
            score_distribution(np.ones(2), np.zeros((0, 2)), 'fusion', 'linear')

    def test_batch_distribution_excludes_anchor(self):
        """The anchor and invalid locations never enter the pool"""
        je = joint_embedding(random_maps(RngStream(6), b=2, n=4))
        valid = np.ones((2, 4), dtype=bool)
        valid[1, 3] = False
        dist, pool = build_sampling_distribution((0, 1), je, 'fusion', 'linear', valid)
        assert 1 not in pool and 7 not in pool
        assert pool.size == 6
        assert dist.sum() == pytest.approx(1.0)


@pytest.mark.unit
class TestSampleNegatives:

    def test_frequencies(self):
        """Empirical frequencies follow the distribution"""
        dist = np.array([0.1, 0.0, 0.6, 0.3])
        picks = sample_negatives(dist, 20000, RngStream(7))
        freq = np.bincount(picks, minlength=4) / picks.size
        assert freq[1] == 0.0
        np.testing.assert_allclose(freq, dist, atol=0.02)

    def test_deterministic(self):
        """Same stream, same draws"""
        dist = np.full(5, 0.2)
        np.testing.assert_array_equal(sample_negatives(dist, 10, RngStream(8)), sample_negatives(dist, 10, RngStream(8)))

    def test_needs_positive_count(self):
        """R must be positive"""
        with pytest.raises(ArgumentError):
            sample_negatives(np.ones(3) / 3, 0, RngStream(0))


@pytest.mark.unit
class TestMemoryBank:

    def test_fifo(self):
        """Oldest entries are overwritten first"""
        bank = MemoryBank(capacity=3)
        for i in range(5):
            bank.push(np.full((1, 2), float(i)), np.full((1, 2), float(i)), np.array([i]))
        z, y, ids = bank.entries()
        assert len(bank) == 3
        np.testing.assert_array_equal(ids, [2, 3, 4])
        np.testing.assert_array_equal(z[:, 0], [2.0, 3.0, 4.0])

    def test_one_past_capacity_evicts_oldest(self):
        """A batch one larger than the bank drops exactly its first row"""
        bank = MemoryBank(capacity=4)
        rows = np.arange(5.0)[:, None] * np.ones((1, 2))
        bank.push(rows, rows, np.arange(5))
        z, y, ids = bank.entries()
        assert len(bank) == 4
        np.testing.assert_array_equal(ids, [1, 2, 3, 4])
        np.testing.assert_array_equal(y[:, 1], [1.0, 2.0, 3.0, 4.0])

    def test_entries_are_frozen(self):
        """Pushed rows are copies"""
        bank = MemoryBank(capacity=4)
        rows = np.ones((2, 3))
        bank.push(rows, rows)
        rows[:] = 5.0
        z, _, ids = bank.entries()
        np.testing.assert_array_equal(z, np.ones((2, 3)))
        np.testing.assert_array_equal(ids, [-1, -1])

    def test_bad_capacity(self):
        """Capacity must be positive"""
        with pytest.raises(ArgumentError):
            MemoryBank(capacity=0)


@pytest.mark.unit
class TestPlanNegatives:

    def test_batch_plan(self):
        """Negatives are valid batch locations other than the anchor"""
        je = joint_embedding(random_maps(RngStream(9), b=2, n=6))
        valid = np.ones((2, 6), dtype=bool)
        valid[0, 0] = False
        anchors = select_anchors(valid, None, RngStream(0))
        plan = plan_negatives(je, anchors, valid, 5, RngStream(1))
        assert plan.scope == 'batch'
        assert plan.negatives.shape == (11, 5, 2)
        for (ab, ap), negs in zip(plan.anchors, plan.negatives):
            for nb, nq in negs:
                assert (nb, nq) != (ab, ap)
                assert valid[nb, nq]
        assert np.all(plan.probabilities >= 0.0)

    def test_bank_plan(self):
        """Bank scope draws bank positions and carries their instance ids"""
        je = joint_embedding(random_maps(RngStream(10), b=1, n=4))
        bank = MemoryBank(capacity=8)
        bank.push(np.eye(4)[:3], je.y_normalized[0, :3], np.array([7, 8, 9]), num_slots=je.num_slots)
        plan = plan_negatives(je, np.array([[0, 3]]), np.ones((1, 4), dtype=bool), 6, RngStream(2), bank=bank)
        assert plan.scope == 'bank'
        assert np.all(plan.negatives[..., 0] == -1)
        assert set(plan.negative_ids.reshape(-1)) <= {7, 8, 9}
        assert plan.bank_z.shape == (3, 4)

    def test_empty_bank_falls_back(self):
        """An empty bank behaves like batch scope"""
        je = joint_embedding(random_maps(RngStream(12), b=1, n=4))
        plan = plan_negatives(je, np.array([[0, 0]]), np.ones((1, 4), dtype=bool), 3, RngStream(2),
                              bank=MemoryBank(capacity=2))
        assert plan.scope == 'batch'

    def test_errors(self):
        """No anchors or a pool holding only the anchor are errors"""
        je = joint_embedding(random_maps(RngStream(13), b=1, n=3))
        valid = np.zeros((1, 3), dtype=bool)
        valid[0, 1] = True
        with pytest.raises(ArgumentError):
            plan_negatives(je, np.zeros((0, 2)), valid, 2, RngStream(0))
        with pytest.raises(ArgumentError):
            plan_negatives(je, np.array([[0, 1]]), valid, 2, RngStream(0))

    def test_select_anchors_subsamples(self):
        """Subsampling keeps sorted distinct valid anchors"""
        valid = np.ones((2, 10), dtype=bool)
        anchors = select_anchors(valid, 7, RngStream(3))
        assert anchors.shape == (7, 2)
        assert len({tuple(a) for a in anchors}) == 7
        assert select_anchors(valid, None, RngStream(3)).shape == (20, 2)

    def test_softmax_helper_consistency(self):
        """from_logits normalises slots per pixel"""
        logits = RngStream(14).normal(size=(1, 3, 4))
        sm = ScoreMaps.from_logits(logits, np.zeros((1, 3, 2)))
        np.testing.assert_allclose(sm.mask_probs, softmax(logits, axis=1))
