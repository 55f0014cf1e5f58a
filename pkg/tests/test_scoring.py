"""Relevance scoring: max-over-heads-and-query reduction of cross attention."""

import math

import numpy as np
import pytest

from conftest import rel_err, tape_vs_fd
from tokengate import autodiff as ad
from tokengate.autodiff import Tape
from tokengate.errors import InputError
from tokengate.layers import AttentionWeights
from tokengate.scoring import ScoringWeights, normalize_relevance, score


def _single_head_relevance(x, q, wq, wk):
    """Direct oracle: softmax over keys, then max over query rows."""
    d_h = wq.shape[1]
    logits = (q @ wq) @ (x @ wk).T / math.sqrt(d_h)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    return attn.max(axis=0)


class TestScore:
    def test_single_token_gets_full_relevance(self):
        rng = np.random.default_rng(0)
        w = ScoringWeights.seeded(8, 2, 1, rng)
        amap, r = score(rng.standard_normal((1, 8)), rng.standard_normal((3, 8)), w)
        np.testing.assert_array_equal(r.value, [[1.0]])

    def test_planted_token_wins_argmax(self):
        """Identity projections and one strongly aligned token: argmax of r
        must sit on the planted index, matching a direct softmax oracle."""
        d, m = 8, 12
        rng = np.random.default_rng(1)
        x = 0.1 * rng.standard_normal((m, d))
        q = np.zeros((1, d))
        q[0, 3] = 4.0
        planted = 7
        x[planted] = 0.0
        x[planted, 3] = 4.0
        w = ScoringWeights.identity(d)
        _, r = score(x, q, w)
        oracle = _single_head_relevance(x, q, np.eye(d), np.eye(d))
        assert int(np.argmax(r.value)) == planted
        np.testing.assert_allclose(r.value.ravel(), oracle, atol=1e-12)

    def test_two_heads_reduce_by_elementwise_max(self):
        """h=2 relevance equals the elementwise max of the per-head runs."""
        d, m, l = 8, 10, 3
        rng = np.random.default_rng(2)
        x = rng.standard_normal((m, d))
        q = rng.standard_normal((l, d))
        w = ScoringWeights.seeded(d, 2, 1, rng)
        _, r = score(x, q, w)

        layer = w.layers[0]
        per_head = []
        for h in range(2):
            per_head.append(_single_head_relevance(x, q, layer.wq[h], layer.wk[h]))
        expected = np.maximum(per_head[0], per_head[1])
        np.testing.assert_allclose(r.value.ravel(), expected, atol=1e-12)

    def test_attention_map_normalized(self):
        rng = np.random.default_rng(3)
        w = ScoringWeights.seeded(8, 4, 1, rng)
        amap, _ = score(rng.standard_normal((20, 8)), rng.standard_normal((5, 8)), w)
        amap.validate()
        assert amap.weights.shape == (4, 5, 20)

    def test_empty_inputs_rejected(self):
        rng = np.random.default_rng(4)
        w = ScoringWeights.seeded(8, 2, 1, rng)
        with pytest.raises(InputError):
            score(np.zeros((0, 8)), np.zeros((2, 8)), w)
        with pytest.raises(InputError):
            score(np.zeros((2, 8)), np.zeros((0, 8)), w)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        d, m = 8, 15
        x = rng.standard_normal((m, d))
        q = rng.standard_normal((3, d))
        w = ScoringWeights.seeded(d, 2, 1, rng)
        _, r = score(x, q, w)
        for _ in range(5):
            perm = rng.permutation(m)
            _, r_perm = score(x[perm], q, w)
            np.testing.assert_allclose(r_perm.value.ravel(), r.value.ravel()[perm], atol=1e-12)

    def test_key_scale_preserves_argmax(self):
        """Scaling key projections by a positive constant moves r values but
        never the argmax (L=1, h=1 monotone logit scaling)."""
        rng = np.random.default_rng(6)
        d, m = 6, 30
        x = rng.standard_normal((m, d))
        q = rng.standard_normal((1, d))
        base = ScoringWeights.seeded(d, 1, 1, rng)
        _, r = score(x, q, base)
        for c in (0.5, 2.0, 7.3):
            scaled = ScoringWeights(
                [AttentionWeights(
                    wq=[base.layers[0].wq[0]],
                    wk=[base.layers[0].wk[0] * c],
                    wv=[base.layers[0].wv[0]],
                    wo=base.layers[0].wo,
                )]
            )
            _, r_scaled = score(x, q, scaled)
            assert int(np.argmax(r_scaled.value)) == int(np.argmax(r.value))
            assert not np.allclose(r_scaled.value, r.value)

    def test_relevance_stays_in_unit_interval(self):
        rng = np.random.default_rng(7)
        w = ScoringWeights.seeded(8, 2, 1, rng)
        for _ in range(1000):
            m = int(rng.integers(1, 40))
            l = int(rng.integers(1, 6))
            x = 3.0 * rng.standard_normal((m, 8))
            q = 3.0 * rng.standard_normal((l, 8))
            _, r = score(x, q, w)
            values = r.value.ravel()
            assert np.all(values >= 0.0) and np.all(values <= 1.0)

    def test_gradient_of_relevance_sum_matches_fd(self):
        rng = np.random.default_rng(8)
        d, m, l = 6, 9, 3
        w = ScoringWeights.seeded(d, 2, 1, rng)
        q = rng.standard_normal((l, d))
        x0 = rng.standard_normal((m, d))

        def build(v):
            _, r = score(v, ad.const(q), w)
            return ad.sum_all(r)

        analytic, numeric = tape_vs_fd(build, x0)
        assert rel_err(analytic, numeric) <= 1e-5

    def test_tie_gradient_goes_to_first_maximal_slot(self):
        """Two query rows with identical attention: only the first (head-major,
        query-position) slot receives the max-reduction gradient."""
        d, m = 4, 3
        x = np.array([[2.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]])
        q_row = np.array([[3.0, 0, 0, 0]])
        q = np.vstack([q_row, q_row])  # deliberate tie between query rows
        w = ScoringWeights.identity(d)

        tape = Tape()
        qv = tape.var(q)
        _, r = score(ad.const(x), qv, w)
        (g,) = tape.gradients(ad.sum_all(r), [qv])
        assert np.any(g[0] != 0.0)
        np.testing.assert_array_equal(g[1], np.zeros(d))

    def test_depth_two_still_normalized(self):
        rng = np.random.default_rng(9)
        w = ScoringWeights.seeded(8, 2, 2, rng)
        amap, r = score(rng.standard_normal((12, 8)), rng.standard_normal((3, 8)), w)
        amap.validate()
        assert np.all(r.value >= 0) and np.all(r.value <= 1)


class TestNormalizeRelevance:
    def test_uniform(self):
        p, entropy = normalize_relevance([1.0, 1.0, 1.0, 1.0])
        np.testing.assert_allclose(p, 0.25, atol=1e-8)
        assert abs(entropy - math.log(4)) <= 1e-6

    def test_point_mass(self):
        _, entropy = normalize_relevance([1.0, 0.0, 0.0, 0.0])
        assert abs(entropy) <= 1e-6

    def test_all_zero_fallback(self):
        p, entropy = normalize_relevance(np.zeros(5))
        np.testing.assert_array_equal(p, np.zeros(5))
        assert entropy == 0.0

    def test_negative_rejected(self):
        with pytest.raises(InputError):
            normalize_relevance([-0.1, 0.5])
