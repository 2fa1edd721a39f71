import math

import numpy as np
import pytest

from tempomamba import numerics as nm
from tempomamba import temporal_mamba as tm
from tempomamba import video_scan as vs
from tempomamba.temporal_mamba import BlockConfig, BlockStack, MambaBlock


def make_block(rng, C=3, padding="learnable", zero=False, **kw):
    cfg = BlockConfig(channels=C, expand=2, state_size=3, padding=padding, dt_min=0.1, dt_max=1.0, **kw)
    return MambaBlock(cfg, rng, zero_init_out=zero)


def copy_block(block, **changes):
    """Same weights, different config."""
    import copy
    from dataclasses import replace
    other = copy.copy(block)
    other.config = replace(block.config, **changes)
    return other


def silu(x):
    return x / (1.0 + np.exp(-x))


def oracle_branch(xp, i, block):
    """Straight-line version of one branch: flip, flatten, conv, SiLU, scan, gate, project."""
    T, C, H, W = xp.shape
    E = block.config.inner
    f = xp.copy()
    if i & 1:
        f = f[::-1]
    if i & 2:
        f = f[:, :, ::-1, ::-1]
    tokens = [f[t, :, y, x] for t in range(T) for y in range(H) for x in range(W)]
    M = len(tokens)
    proj = np.array([tok @ block.in_proj.data for tok in tokens])
    u, gate = proj[:, :E], proj[:, E:]
    K = block.conv_w.shape[1]
    conv = np.zeros((M, E))
    for t in range(M):
        for e in range(E):
            acc = block.conv_b.data[e]
            for j in range(K):
                src = t - (K - 1) + j
                if src >= 0:
                    acc += block.conv_w.data[e, j] * u[src, e]
            conv[t, e] = acc
    s = silu(conv)
    sel = block.sel
    A = -np.exp(sel.A_log.data)
    y = np.zeros((M, E))
    h = np.zeros(A.shape)
    for t in range(M):
        dt = np.log1p(np.exp(s[t] @ sel.W_dt.data + sel.b_dt.data))
        Bt, Ct = s[t] @ sel.W_B.data, s[t] @ sel.W_C.data
        for e in range(E):
            for n in range(A.shape[1]):
                a = math.exp(dt[e] * A[e, n])
                h[e, n] = a * h[e, n] + (a - 1.0) / A[e, n] * Bt[n] * s[t, e]
            y[t, e] = Ct @ h[e]
    out = (y * silu(gate)) @ block.out_proj.data
    video = np.zeros((T, C, H, W))
    k = 0
    for t in range(T):
        for yy in range(H):
            for xx in range(W):
                video[t, :, yy, xx] = out[k]
                k += 1
    return video


class TestBranch:
    def test_zero_input_zero_weights(self, rng):
        block = make_block(rng)
        for p in block.parameters().values():
            p.data[...] = 0.0
        block.out_proj.data[...] = np.eye(6, 3)
        out = tm.branch_forward(np.zeros((2, 3, 4, 4)), 0, block)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_single_frame_temporal_flip_is_identity(self, rng):
        block = make_block(rng)
        x = rng.normal(size=(1, 3, 4, 3))
        np.testing.assert_array_equal(tm.branch_forward(x, 0, block).data, tm.branch_forward(x, 1, block).data)

    @pytest.mark.parametrize("i", range(4))
    def test_stage_oracle(self, rng, i):
        block = make_block(rng, C=2)
        xp = rng.normal(size=(2, 2, 2, 2))
        got = tm.branch_forward(xp, i, block).data
        np.testing.assert_allclose(got, oracle_branch(xp, i, block), atol=1e-10, rtol=0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            tm.branch_forward(np.zeros((1, 4, 2, 2)), 0, make_block(rng, C=3))


class TestFuse:
    def test_zero(self):
        z = np.zeros((2, 1, 3, 3))
        np.testing.assert_array_equal(tm.fuse([z] * 4).data, 0.0)

    def test_aligned_branches_sum_to_four_x(self, rng):
        x = rng.normal(size=(3, 2, 3, 4))
        out = tm.fuse([vs.flip(x, i) for i in range(4)]).data
        np.testing.assert_allclose(out, 4 * x, atol=1e-14)

    def test_permutation_oracle(self, rng):
        T, C, H, W = 3, 2, 2, 3
        branches = [rng.normal(size=(T, C, H, W)) for _ in range(4)]
        want = np.zeros((T, C, H, W))
        for i, b in enumerate(branches):
            for t in range(T):
                for y in range(H):
                    for x in range(W):
                        st = T - 1 - t if i & 1 else t
                        sy, sx = (H - 1 - y, W - 1 - x) if i & 2 else (y, x)
                        want[t, :, y, x] += b[st, :, sy, sx]
        np.testing.assert_allclose(tm.fuse(branches).data, want, atol=1e-14)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            tm.fuse([np.zeros((1, 1, 2, 2))] * 3)
        with pytest.raises(ValueError):
            tm.fuse([np.zeros((1, 1, 2, 2))] * 3 + [np.zeros((1, 1, 2, 3))])

    def test_fault_hook(self, rng):
        x = rng.normal(size=(2, 1, 2, 2))
        tm.FAULTS.add("fuse")
        try:
            out = tm.fuse([vs.flip(x, i) for i in range(4)]).data
        finally:
            tm.FAULTS.discard("fuse")
        assert not np.allclose(out, 4 * x)


class TestBlock:
    @pytest.mark.parametrize("padding", ["learnable", "fixed", "none"])
    def test_identity_at_init(self, rng, padding):
        block = make_block(rng, padding=padding, zero=True)
        x = rng.normal(size=(2, 3, 3, 4))
        np.testing.assert_array_equal(tm.block_forward(x, block).data, x)

    @pytest.mark.parametrize("padding", ["learnable", "fixed", "none"])
    def test_shape_preserved(self, rng, padding):
        x = rng.normal(size=(3, 3, 2, 5))
        assert tm.block_forward(x, make_block(rng, padding=padding)).shape == x.shape

    @pytest.mark.parametrize("j", [1, 2, 3])
    @pytest.mark.parametrize("padding", ["learnable", "none"])
    def test_flip_equivariance(self, rng, j, padding):
        block = make_block(rng, padding=padding)
        x = rng.normal(size=(3, 3, 3, 4))
        lhs = vs.flip(tm.block_forward(x, block).data, j)
        rhs = tm.block_forward(vs.flip(x, j), block).data
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_padding_changes_output(self, rng):
        x = rng.normal(size=(2, 3, 3, 3))
        a = make_block(nm.make_rng(5), padding="learnable")
        b = make_block(nm.make_rng(5), padding="none")
        assert not np.allclose(tm.block_forward(x, a).data, tm.block_forward(x, b).data)

    @pytest.mark.parametrize("padding", ["learnable", "fixed"])
    def test_gradients(self, rng, padding):
        block = make_block(rng, C=2, padding=padding)
        x = nm.parameter(rng.normal(size=(2, 2, 2, 2)))
        w = rng.normal(size=(2, 2, 2, 2))
        f = lambda _: (tm.block_forward(x, block) * w).sum()
        for name, p in list(block.parameters().items()) + [("x", x)]:
            assert nm.grad_check(f, p) < 1e-4, name

    def test_parallel_scan_method(self, rng):
        x = rng.normal(size=(2, 3, 3, 3))
        a = make_block(nm.make_rng(2), scan_method="sequential")
        b = make_block(nm.make_rng(2), scan_method="parallel")
        np.testing.assert_allclose(tm.block_forward(x, a).data, tm.block_forward(x, b).data, atol=1e-12)

    def test_prenorm_identity_at_init(self, rng):
        block = make_block(rng, zero=True, prenorm=True)
        x = rng.normal(size=(2, 3, 3, 4))
        np.testing.assert_array_equal(tm.block_forward(x, block).data, x)

    def test_prenorm_update_is_scale_invariant(self, rng):
        block = make_block(rng, prenorm=True)
        x = rng.normal(size=(2, 3, 3, 4))
        # large scales so the eps inside the norm is negligible
        dz = tm.block_forward(100.0 * x, block).data - 100.0 * x
        dz_big = tm.block_forward(1e4 * x, block).data - 1e4 * x
        np.testing.assert_allclose(dz_big, dz, rtol=1e-7, atol=1e-9)

    def test_prenorm_oracle(self, rng):
        block = make_block(rng, prenorm=True)
        x = rng.normal(size=(2, 3, 3, 4))
        plain = copy_block(block, prenorm=False)
        xn = x / np.sqrt(np.mean(x ** 2, axis=1, keepdims=True) + 1e-6)
        want = x + (tm.block_forward(xn, plain).data - xn)
        np.testing.assert_allclose(tm.block_forward(x, block).data, want, atol=1e-13)

    @pytest.mark.parametrize("j", [1, 2, 3])
    def test_prenorm_flip_equivariance(self, rng, j):
        block = make_block(rng, padding="none", prenorm=True)
        x = rng.normal(size=(3, 3, 3, 4))
        lhs = vs.flip(tm.block_forward(x, block).data, j)
        rhs = tm.block_forward(vs.flip(x, j), block).data
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_prenorm_gradients(self, rng):
        block = make_block(rng, C=2, prenorm=True)
        x = nm.parameter(rng.normal(size=(2, 2, 2, 2)))
        w = rng.normal(size=x.shape)
        f = lambda _: (tm.block_forward(x, block) * w).sum()
        for name, p in list(block.parameters().items()) + [("x", x)]:
            assert nm.grad_check(f, p) < 1e-4, name

    def test_bad_padding_mode(self):
        with pytest.raises(ValueError):
            BlockConfig(channels=2, padding="zeros")


class TestStack:
    def test_depth_one_is_block(self, rng):
        cfg = BlockConfig(channels=3, state_size=3)
        stack = BlockStack(cfg, 1, nm.make_rng(3), zero_init_out=False)
        x = rng.normal(size=(2, 3, 3, 3))
        np.testing.assert_array_equal(tm.stack_forward(x, stack).data, tm.block_forward(x, stack.blocks[0]).data)

    def test_zero_second_block(self, rng):
        cfg = BlockConfig(channels=3, state_size=3)
        stack = BlockStack(cfg, 2, nm.make_rng(3), zero_init_out=False)
        stack.blocks[1].out_proj.data[...] = 0.0
        x = rng.normal(size=(2, 3, 3, 3))
        np.testing.assert_array_equal(stack(x).data, stack.blocks[0](x).data)

    def test_parameter_count_linear(self, rng):
        cfg = BlockConfig(channels=4, state_size=5)
        counts = [BlockStack(cfg, d, rng).num_parameters() for d in (1, 2, 3, 4)]
        assert counts == [counts[0] * d for d in (1, 2, 3, 4)]
        C, E, N = 4, 8, 5
        per_block = C * 2 * E + E * 4 + E + E * C + 2 * E * N + E * E + E + E * N + C
        assert counts[0] == per_block

    def test_depth_validation(self, rng):
        with pytest.raises(ValueError):
            BlockStack(BlockConfig(channels=2), 0, rng)

    def test_stack_gradients(self, rng):
        cfg = BlockConfig(channels=2, expand=1, state_size=2, dt_min=0.1, dt_max=1.0)
        stack = BlockStack(cfg, 2, rng, zero_init_out=False)
        x = rng.normal(size=(2, 2, 2, 2))
        w = rng.normal(size=x.shape)
        f = lambda _: (stack(x) * w).sum()
        for name, p in stack.parameters().items():
            assert nm.grad_check(f, p) < 1e-4, name
