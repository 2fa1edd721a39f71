"""Oracle checks run by ``tempomamba verify``.

Each check returns a :class:`Check` row. Everything is driven by one seed so
the same seed always produces the same rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bypass_attention as ba
from . import numerics as nm
from . import ssm
from . import temporal_mamba as tm
from . import toy_diffusion as td
from . import video_scan as vs


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""


def _below(name: str, value: float, tol: float, detail: str = "") -> Check:
    return Check(name, float(value), tol, bool(value < tol), detail)


def stable_ssm(rng: np.random.Generator, n: int) -> ssm.SsmParams:
    """Random continuous SSM whose eigenvalues have negative real part."""
    A = rng.normal(size=(n, n)) / math.sqrt(n)
    A -= (np.max(np.linalg.eigvals(A).real) + 0.5) * np.eye(n)
    return ssm.SsmParams(A, rng.normal(size=n), rng.normal(size=n), float(rng.uniform(0.05, 0.5)))


def recurrence_conv(rng, seeds: int = 50) -> Check:
    worst = 0.0
    for _ in range(seeds):
        p = ssm.discretize_zoh(stable_ssm(rng, int(rng.integers(1, 9))))
        x = rng.normal(size=int(rng.integers(1, 65)))
        worst = max(worst, float(np.max(np.abs(ssm.scan_sequential(p, x) - ssm.conv_kernel_apply(p, x)))))
    return _below("recurrence_conv", worst, 1e-10, f"{seeds} seeds, M <= 64")


def parallel_scan(rng, lengths=(1, 2, 3, 17, 256, 1000, 4096)) -> Check:
    worst = 0.0
    for M in lengths:
        a = rng.uniform(0.5, 1.0, size=(M, 4))
        b = rng.normal(size=(M, 4))
        ref = ssm.scan_affine_sequential(a, b)
        got = ssm.scan_parallel(a, b)
        worst = max(worst, float(np.max(np.abs(got - ref)) / np.max(np.abs(ref))))
    return _below("parallel_scan", worst, 1e-8, f"lengths up to {max(lengths)}")


def flip_group(rng) -> Check:
    video = rng.normal(size=(3, 2, 4, 5))
    bad = 0
    for i in range(4):
        for j in range(4):
            if not np.array_equal(vs.flip(vs.flip(video, i), j), vs.flip(video, vs.compose_flips(i, j))):
                bad += 1
    return Check("flip_group", float(bad), 0.0, bad == 0, "composition table mismatches")


def fuse(rng) -> Check:
    branches = [rng.normal(size=(2, 3, 4, 4)) for _ in range(4)]
    want = sum(np.flip(b, axis=vs._FLIP_AXES[i]) if i else b for i, b in enumerate(branches))
    err = float(np.max(np.abs(tm.fuse(branches).data - want)))
    return Check("fuse", err, 0.0, err == 0.0, "permutation oracle")


def flip_equivariance(rng) -> Check:
    cfg = tm.BlockConfig(channels=3, state_size=4)
    block = tm.MambaBlock(cfg, rng, zero_init_out=False)
    block.theta_frame.data[:] = block.theta_frame.data[0]
    x = rng.normal(size=(3, 3, 4, 4))
    worst = 0.0
    for j in range(4):
        lhs = tm.block_forward(vs.flip(x, j), block).data
        rhs = vs.flip(tm.block_forward(x, block).data, j)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return Check("flip_equivariance", worst, 1e-9, worst <= 1e-9, "uniform theta_frame")


def svd_fidelity(rng, k: int = 4, d: int = 8, competitors: int = 100) -> list[Check]:
    base = ba.AttnParams.random(d, rng)
    bp = ba.svd_init(base, k)
    err = ba.factor_error(base, bp)
    tail = ba.svd_tail(base.score_matrix(), k)
    target = base.score_matrix()
    losses = 0
    for _ in range(competitors):
        m = rng.normal(size=(d, k)) @ rng.normal(size=(k, d))
        m *= np.sum(m * target) / np.sum(m * m)
        if np.linalg.norm(m - target) < err:
            losses += 1
    low = rng.normal(size=(d, k - 1)) @ rng.normal(size=(k - 1, d))
    base_low = ba.AttnParams(nm.Tensor(low), nm.Tensor(np.eye(d)), nm.Tensor(np.eye(d)))
    exact = ba.factor_error(base_low, ba.svd_init(base_low, k))
    return [
        Check("svd_tail", abs(err - tail), 1e-9, abs(err - tail) <= 1e-9),
        Check("svd_competitors", float(losses), 0.0, losses == 0, f"{competitors} random rank-{k} factors"),
        Check("svd_exact_rank", exact, 1e-9, exact <= 1e-9),
    ]


def jl(rng, d: int = 512, k: int = 256, eps: float = 0.9, trials: int = 10_000) -> Check:
    res = ba.jl_verify(d, k, eps, trials, rng)
    return Check("jl_bound", res.failure_rate, res.bound + res.slack, res.passed,
                 f"literal-reading failure rate {res.literal_failure_rate:.4f}")


def bypass_identity(rng) -> list[Check]:
    base = ba.AttnParams.random(8, rng)
    x = rng.normal(size=(6, 8))
    bp = ba.random_init(8, 3, rng, phi=1.0)
    same = np.array_equal(ba.mixed_attention(x, x, x, base, bp).data, ba.attention(x, x, x, base).data)
    low = rng.normal(size=(8, 3)) @ rng.normal(size=(3, 8))
    base_low = ba.AttnParams(nm.Tensor(low), nm.Tensor(rng.normal(size=(8, 8))), nm.Tensor(rng.normal(size=(8, 8))))
    worst = 0.0
    for phi in (0.0, 0.3, 0.5, 1.0):
        out = ba.mixed_attention(x, x, x, base_low, ba.svd_init(base_low, 3, phi=phi)).data
        worst = max(worst, float(np.max(np.abs(out - ba.attention(x, x, x, base_low).data))))
    return [Check("bypass_phi_one", 0.0 if same else 1.0, 0.0, same, "bit-identical"),
            Check("bypass_exact_rank", worst, 1e-9, worst <= 1e-9)]


def param_ratio() -> Check:
    a = ba.param_audit(320, 12)
    return Check("param_ratio", a.ratio, 0.0375, a.trainable * 320 == a.full_tune * 12, "d=320 k=12")


def _grad_rows(name: str, f: Callable, params: dict, tol: float, rng, max_coords=None) -> Check:
    worst, where = 0.0, ""
    for key, p in params.items():
        e = nm.grad_check(f, p, max_coords=max_coords, rng=rng)
        if e >= worst:
            worst, where = e, key
    return _below(name, worst, tol, f"worst tensor {where}")


def gradients(rng) -> list[Check]:
    rows = []
    sel = ssm.init_selective(3, 4, rng, dt_min=0.1, dt_max=1.0)
    x = rng.normal(size=(7, 3))
    w = rng.normal(size=(7, 3))
    rows.append(_grad_rows("grad_ssm", lambda _: (ssm.selective_scan(sel, nm.Tensor(x)) * w).sum(),
                           sel.named(), 1e-4, rng))

    theta = nm.parameter(rng.normal(size=2), "theta")
    video = nm.parameter(rng.normal(size=(2, 2, 3, 3)), "video")
    wv = rng.normal(size=(2, 2, 5, 5))
    rows.append(_grad_rows("grad_video_scan", lambda _: (vs.pad_frames(video, theta) * wv).sum(),
                           {"theta": theta, "video": video}, 1e-4, rng))

    block = tm.MambaBlock(tm.BlockConfig(channels=2, state_size=3, dt_min=0.1, dt_max=1.0), rng, zero_init_out=False)
    xb = rng.normal(size=(2, 2, 3, 3))
    wb = rng.normal(size=xb.shape)
    rows.append(_grad_rows("grad_temporal_mamba", lambda _: (tm.block_forward(xb, block) * wb).sum(),
                           block.parameters(), 1e-4, rng))

    base = ba.AttnParams.random(6, rng, trainable=True)
    bp = ba.random_init(6, 2, rng, learn_phi=True)
    xa = rng.normal(size=(5, 6))
    wa = rng.normal(size=(5, 6))
    params = {**base.named("base."), **bp.named("bypass.")}
    rows.append(_grad_rows("grad_bypass_attention", lambda _: (ba.mixed_attention(xa, xa, xa, base, bp) * wa).sum(),
                           params, 1e-4, rng))

    model = td.ToyDenoiser(td.DenoiserConfig(width=8, cond_dim=4, depth=2, rank=4, state_size=4, learn_phi=True), rng)
    model.mamba = tm.BlockStack(tm.BlockConfig(channels=8, expand=1, state_size=4, dt_min=0.1, dt_max=1.0),
                                2, rng, zero_init_out=False)
    z = rng.normal(size=(4, 3, 8, 8))
    wz = rng.normal(size=z.shape)
    c = td.condition_table(3, 4)[0]
    rows.append(_grad_rows("grad_denoiser", lambda _: (model(z, 300, c) * wz).sum(),
                           model.trainable(), 1e-3, rng, max_coords=4))
    return rows


def run_all(seed: int, jl_trials: int = 10_000) -> list[Check]:
    """Every oracle check in a fixed order; each family gets its own stream."""
    streams = [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(9)]
    rows = [recurrence_conv(streams[0]), parallel_scan(streams[1]), flip_group(streams[2]), fuse(streams[3]),
            flip_equivariance(streams[4])]
    rows += svd_fidelity(streams[5])
    rows.append(jl(streams[6], trials=jl_trials))
    rows += bypass_identity(streams[7])
    rows.append(param_ratio())
    rows += gradients(streams[8])
    return rows
