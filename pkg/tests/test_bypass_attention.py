import math

import numpy as np
import pytest

from tempomamba import bypass_attention as ba
from tempomamba import numerics as nm
from tempomamba.bypass_attention import AttnParams, BypassAttnParams


def naive_attention(xq, xk, xv, WQ, WK, WV):
    Q, K, V = xq @ WQ, xk @ WK, xv @ WV
    d = WQ.shape[0]
    out = np.zeros((xq.shape[0], WV.shape[1]))
    for i in range(Q.shape[0]):
        s = [float(Q[i] @ K[j]) / math.sqrt(d) for j in range(K.shape[0])]
        m = max(s)
        e = [math.exp(v - m) for v in s]
        z = sum(e)
        for j in range(K.shape[0]):
            out[i] += e[j] / z * V[j]
    return out


def low_rank_base(rng, d, r):
    """Base projections whose score matrix W_Q W_K^T has rank r."""
    WQ = rng.normal(size=(d, r)) @ rng.normal(size=(r, d))
    return AttnParams(nm.Tensor(WQ), nm.Tensor(rng.normal(size=(d, d))), nm.Tensor(rng.normal(size=(d, d))))


class TestAttention:
    def test_single_token(self, rng):
        p = AttnParams.random(4, rng)
        x = rng.normal(size=(1, 4))
        np.testing.assert_allclose(ba.attention(x, x, x, p).data, x @ p.W_V.data, atol=1e-14)

    def test_identical_keys_uniform(self, rng):
        p = AttnParams.random(4, rng)
        q = rng.normal(size=(3, 4))
        k = np.tile(rng.normal(size=(1, 4)), (5, 1))
        v = rng.normal(size=(5, 4))
        out = ba.attention(q, k, v, p).data
        np.testing.assert_allclose(out, np.tile((v @ p.W_V.data).mean(axis=0), (3, 1)), atol=1e-14)

    def test_double_loop_oracle(self, rng):
        p = AttnParams.random(6, rng)
        x = rng.normal(size=(4, 6))
        want = naive_attention(x, x, x, p.W_Q.data, p.W_K.data, p.W_V.data)
        np.testing.assert_allclose(ba.attention(x, x, x, p).data, want, atol=1e-12, rtol=0)

    def test_softmax_rows_sum_to_one(self, rng):
        x = nm.Tensor(rng.normal(size=(2, 7, 5)) * 3)
        probs = nm.softmax(x @ x.transpose(0, 2, 1), axis=-1).data
        assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) < 1e-12

    def test_non_square_projection_rejected(self, rng):
        with pytest.raises(ValueError):
            AttnParams(np.ones((3, 2)), np.ones((3, 3)), np.ones((3, 3)))


class TestSparseCausal:
    def test_single_frame_is_self_attention(self, rng):
        p = AttnParams.random(4, rng)
        f = rng.normal(size=(1, 5, 4))
        np.testing.assert_allclose(ba.sparse_causal_attention(f, p).data[0], ba.attention(f[0], f[0], f[0], p).data,
                                   atol=1e-15)

    def test_second_frame_sees_first_twice(self, rng):
        p = AttnParams.random(4, rng)
        f = rng.normal(size=(2, 3, 4))
        kv = np.concatenate([f[0], f[0]])
        np.testing.assert_allclose(ba.sparse_causal_attention(f, p).data[1], ba.attention(f[1], kv, kv, p).data,
                                   atol=1e-14)

    def test_per_frame_oracle(self, rng):
        p = AttnParams.random(5, rng)
        f = rng.normal(size=(4, 3, 5))
        got = ba.sparse_causal_attention(f, p).data
        for i in range(4):
            kv = f[0] if i == 0 else np.concatenate([f[0], f[i - 1]])
            want = naive_attention(f[i], kv, kv, p.W_Q.data, p.W_K.data, p.W_V.data)
            np.testing.assert_allclose(got[i], want, atol=1e-12, rtol=0)

    def test_temporal_attention_per_site(self, rng):
        p = AttnParams.random(3, rng)
        x = rng.normal(size=(4, 5, 3))
        got = ba.temporal_attention(x, p).data
        for site in range(5):
            seq = x[:, site]
            np.testing.assert_allclose(got[:, site], naive_attention(seq, seq, seq, p.W_Q.data, p.W_K.data, p.W_V.data),
                                       atol=1e-12)


class TestBypassMap:
    def test_zero_query_factor(self, rng):
        bp = ba.random_init(8, 3, rng)
        bp.Wq_low.data[...] = 0.0
        x = rng.normal(size=(5, 8))
        np.testing.assert_array_equal(ba.bypass_map(x, x, bp).data, 0.0)

    def test_explicit_product_oracle(self, rng):
        bp = ba.random_init(16, 4, rng)
        xq, xk = rng.normal(size=(6, 16)), rng.normal(size=(7, 16))
        want = xq @ (bp.Wq_low.data @ bp.Wk_low.data.T) @ xk.T
        np.testing.assert_allclose(ba.bypass_map(xq, xk, bp).data, want, atol=1e-10, rtol=0)

    def test_full_rank_factorization(self, rng):
        # the k = d limit: factor the base matrix exactly
        d = 6
        p = AttnParams.random(d, rng)
        u, s, v = nm.svd(p.score_matrix())
        x = rng.normal(size=(4, d))
        low = x @ (u * s) @ (x @ v).T
        np.testing.assert_allclose(low, ba.base_map(x, x, p).data, atol=1e-9)

    def test_cost_below_fifteen_percent(self, rng):
        low, full = ba.map_costs(256, 256, 12, rng)
        assert low == 2 * 256 * 256 * 12 + 256 * 256 * 12
        assert low < 0.15 * full

    def test_rank_must_be_below_width(self, rng):
        with pytest.raises(ValueError):
            BypassAttnParams(nm.parameter(np.ones((4, 4))), nm.parameter(np.ones((4, 4))))


class TestSvdInit:
    def test_exact_below_rank(self, rng):
        base = low_rank_base(rng, 8, 3)
        for k in (3, 5):
            assert ba.factor_error(base, ba.svd_init(base, k)) <= 1e-9

    def test_error_equals_tail(self, rng):
        base = AttnParams.random(8, rng)
        bp = ba.svd_init(base, 4)
        s = np.linalg.svd(base.score_matrix(), compute_uv=False)
        assert abs(ba.factor_error(base, bp) - np.sqrt(np.sum(s[4:] ** 2))) < 1e-9

    def test_factor_structure(self, rng):
        base = AttnParams.random(6, rng)
        bp = ba.svd_init(base, 2)
        # key factor has orthonormal columns, singular values sit on the query side
        np.testing.assert_allclose(bp.Wk_low.data.T @ bp.Wk_low.data, np.eye(2), atol=1e-12)
        s = np.linalg.svd(base.score_matrix(), compute_uv=False)
        np.testing.assert_allclose(np.linalg.norm(bp.Wq_low.data, axis=0), s[:2], rtol=1e-12)

    def test_beats_random_competitors(self, rng):
        base = AttnParams.random(8, rng)
        k = 4
        err = ba.factor_error(base, ba.svd_init(base, k))
        target = base.score_matrix()
        for _ in range(100):
            a, b = rng.normal(size=(8, k)), rng.normal(size=(8, k))
            # least-squares optimal scale for the random rank-k direction
            m = a @ b.T
            m *= np.sum(m * target) / np.sum(m * m)
            assert err <= np.linalg.norm(m - target)

    def test_relative_error_monotone_in_rank(self, rng):
        base = AttnParams.random(12, rng)
        errs = [ba.factor_error(base, ba.svd_init(base, k), relative=True) for k in range(1, 12)]
        assert all(b < a for a, b in zip(errs, errs[1:]))

    def test_rank_bounds(self, rng):
        base = AttnParams.random(4, rng)
        for k in (0, 4):
            with pytest.raises(ValueError):
                ba.svd_init(base, k)


class TestMixedAttention:
    def test_phi_one_is_base(self, rng):
        base = AttnParams.random(8, rng)
        bp = ba.random_init(8, 3, rng, phi=1.0)
        x = rng.normal(size=(5, 8))
        np.testing.assert_array_equal(ba.mixed_attention(x, x, x, base, bp).data, ba.attention(x, x, x, base).data)

    def test_phi_zero_is_bypass(self, rng):
        base = AttnParams.random(8, rng)
        bp = ba.random_init(8, 3, rng, phi=0.0)
        x = rng.normal(size=(5, 8))
        scores = ba.bypass_map(x, x, bp).data / math.sqrt(8)
        p = np.exp(scores - scores.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(ba.mixed_attention(x, x, x, base, bp).data, p @ (x @ base.W_V.data), atol=1e-13)

    @pytest.mark.parametrize("phi", [0.0, 0.5, 0.9])
    def test_exact_rank_init_matches_base(self, rng, phi):
        base = low_rank_base(rng, 8, 3)
        bp = ba.svd_init(base, 3, phi=phi)
        x = rng.normal(size=(6, 8))
        np.testing.assert_allclose(ba.mixed_attention(x, x, x, base, bp).data, ba.attention(x, x, x, base).data,
                                   atol=1e-9, rtol=0)

    def test_phi_out_of_range(self, rng):
        with pytest.raises(ValueError):
            ba.random_init(8, 3, rng, phi=1.5)
        bp = ba.random_init(8, 3, rng)
        bp.phi = -0.1
        x = rng.normal(size=(2, 8))
        with pytest.raises(ValueError):
            ba.mixed_attention(x, x, x, AttnParams.random(8, rng), bp)

    @pytest.mark.parametrize("learn_phi", [False, True])
    def test_gradients(self, rng, learn_phi):
        base = AttnParams.random(6, rng)
        bp = ba.svd_init(base, 2, phi=0.3, learn_phi=learn_phi)
        bp.Wq_low.data += rng.normal(scale=0.3, size=bp.Wq_low.shape)
        x = rng.normal(size=(5, 6))
        w = rng.normal(size=(5, 6))
        f = lambda _: (ba.mixed_attention(x, x, x, base, bp) * w).sum()
        for name, p in bp.named().items():
            assert nm.grad_check(f, p) < 1e-4, name

    def test_base_projection_gradients(self, rng):
        base = AttnParams.random(5, rng, trainable=True)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(4, 5))
        f = lambda _: (ba.attention(x, x, x, base) * w).sum()
        for name, p in base.named().items():
            assert nm.grad_check(f, p) < 1e-4, name

    def test_gradient_isolation(self, rng):
        base = AttnParams.random(6, rng)
        before = {k: v.data.copy() for k, v in base.named().items()}
        bp = ba.svd_init(base, 2, learn_phi=True)
        factors = {k: v.data.copy() for k, v in bp.named().items()}
        x = rng.normal(size=(5, 6))
        target = rng.normal(size=(5, 6))
        loss = nm.mse(ba.mixed_attention(x, x, x, base, bp), target)
        loss.backward()
        for p in bp.named().values():
            p.data = p.data - 0.1 * p.grad
        for k, v in base.named().items():
            assert v.grad is None
            assert np.array_equal(v.data, before[k])
            assert v.data.tobytes() == before[k].tobytes()
        assert all(not np.array_equal(v.data, factors[k]) for k, v in bp.named().items())


class TestJohnsonLindenstrauss:
    def test_bound_values(self):
        assert ba.jl_bound(0.5, 32) == pytest.approx(2 * math.exp(-1.0))
        assert ba.jl_bound(0.9, 256) == pytest.approx(2 * math.exp(-0.081 * 64))

    def test_orthonormal_full_rank_never_fails(self, rng):
        res = ba.jl_verify(16, 16, 0.1, 200, rng, orthonormal=True)
        assert res.failures == 0

    def test_small_case(self, rng):
        res = ba.jl_verify(64, 32, 0.5, 2000, rng)
        assert res.passed
        assert res.failure_rate <= res.bound

    def test_argument_checks(self, rng):
        with pytest.raises(ValueError):
            ba.jl_verify(8, 9, 0.5, 1, rng)
        with pytest.raises(ValueError):
            ba.jl_verify(8, 4, 1.0, 1, rng)


class TestParamAudit:
    def test_reference_width(self):
        a = ba.param_audit(320, 12)
        assert (a.trainable, a.full_tune) == (7680, 204800)
        assert a.ratio == pytest.approx(0.0375, abs=0)

    def test_full_rank(self):
        assert ba.param_audit(64, 64).ratio == 1.0

    def test_monotone(self):
        ratios = [ba.param_audit(320, k).ratio for k in range(1, 321)]
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_ratio_is_k_over_d(self):
        for d, k, layers in [(320, 12, 16), (64, 5, 3), (7, 3, 1)]:
            a = ba.param_audit(d, k, layers)
            assert a.trainable * d == a.full_tune * k
