"""Attention layers and the low-rank bypass score map.

Token matrices are row-major: a (L, d) array holds L tokens of width d, and
projections act on the right (``Q = X @ W_Q``). Score maps are pre-softmax.
The bypass map replaces ``W_Q @ W_K.T`` by the rank-k product
``Wq_low @ Wk_low.T`` and is blended with the frozen base map before the
softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (Tensor, as_tensor, concat, count_multiplies, matmul,
                       parameter, sigmoid, softmax, svd, take)


def _swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return x.transpose(*axes)


@dataclass
class AttnParams:
    """Frozen base projections, each (d, d)."""

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor

    def __post_init__(self):
        for name in ("W_Q", "W_K", "W_V"):
            w = as_tensor(getattr(self, name))
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise ValueError(f"{name} must be square, got {w.shape}")
            if not np.all(np.isfinite(w.data)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, w)
        if not self.W_Q.shape == self.W_K.shape == self.W_V.shape:
            raise ValueError("projection widths differ")

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, trainable: bool = False) -> "AttnParams":
        make = (lambda a: parameter(a)) if trainable else Tensor
        return cls(*(make(rng.normal(0.0, d ** -0.5, (d, d))) for _ in range(3)))

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "W_Q": self.W_Q, prefix + "W_K": self.W_K, prefix + "W_V": self.W_V}

    def score_matrix(self) -> np.ndarray:
        return self.W_Q.data @ self.W_K.data.T


@dataclass
class BypassAttnParams:
    """Low-rank factors (d, k) and the mixing weight.

    With ``learn_phi`` the weight is ``sigmoid(phi_logit)`` and trains;
    otherwise ``phi`` is a fixed number in [0, 1].
    """

    Wq_low: Tensor
    Wk_low: Tensor
    phi: float = 0.5
    learn_phi: bool = False
    phi_logit: Tensor | None = None

    def __post_init__(self):
        if self.Wq_low.shape != self.Wk_low.shape:
            raise ValueError("low-rank factors must have the same shape")
        d, k = self.Wq_low.shape
        if not k < d:
            raise ValueError(f"rank k={k} must be below width d={d}")
        _check_phi(self.phi)
        if self.learn_phi and self.phi_logit is None:
            p = min(max(self.phi, 1e-6), 1.0 - 1e-6)
            self.phi_logit = parameter(np.array(math.log(p / (1.0 - p))), "phi_logit")

    @property
    def k(self) -> int:
        return self.Wq_low.shape[1]

    def mixing_weight(self):
        return sigmoid(self.phi_logit) if self.learn_phi else self.phi

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + "Wq_low": self.Wq_low, prefix + "Wk_low": self.Wk_low}
        if self.learn_phi:
            out[prefix + "phi_logit"] = self.phi_logit
        return out

    def score_matrix(self) -> np.ndarray:
        return self.Wq_low.data @ self.Wk_low.data.T


def _check_phi(phi) -> None:
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"mixing weight must lie in [0, 1], got {phi}")


def scaled_dot_product(Q, K, V) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    scores = matmul(Q, _swap_last(K))
    return _softmax_apply(scores, V, Q.shape[-1])


def _softmax_apply(scores: Tensor, values: Tensor, d: int) -> Tensor:
    return matmul(softmax(scores * (1.0 / math.sqrt(d)), axis=-1), values)


def base_map(q_tokens, k_tokens, params: AttnParams) -> Tensor:
    return matmul(matmul(q_tokens, params.W_Q), _swap_last(matmul(k_tokens, params.W_K)))


def attention(q_tokens, k_tokens, v_tokens, params: AttnParams) -> Tensor:
    """Single-head attention with the base projections."""
    scores = base_map(q_tokens, k_tokens, params)
    return _softmax_apply(scores, matmul(v_tokens, params.W_V), params.d)


def bypass_map(q_tokens, k_tokens, bp: BypassAttnParams) -> Tensor:
    """Rank-k scores ``(Xq Wq_low)(Xk Wk_low)^T``; costs O(L d k), no d x d product."""
    return matmul(matmul(q_tokens, bp.Wq_low), _swap_last(matmul(k_tokens, bp.Wk_low)))


def mixed_scores(q_tokens, k_tokens, base: AttnParams, bp: BypassAttnParams) -> Tensor:
    phi = bp.mixing_weight()
    if not isinstance(phi, Tensor):
        _check_phi(phi)
    low = bypass_map(q_tokens, k_tokens, bp)
    full = base_map(q_tokens, k_tokens, base)
    return (1.0 - phi) * low + phi * full


def mixed_attention(q_tokens, k_tokens, v_tokens, base: AttnParams, bp: BypassAttnParams) -> Tensor:
    """``softmax(((1 - phi) A_low + phi A_base) / sqrt(d)) V``."""
    scores = mixed_scores(q_tokens, k_tokens, base, bp)
    return _softmax_apply(scores, matmul(v_tokens, base.W_V), base.d)


def sparse_causal_attention(frames, params: AttnParams, bypass: BypassAttnParams | None = None) -> Tensor:
    """Frame-wise attention with keys and values from frames 1 and i-1.

    ``frames`` is (T, L, d): L tokens per frame. Frame i >= 1 attends over the
    concatenation [frame 0, frame i-1] (frame 0 twice when i = 1); frame 0
    attends to itself only.
    """
    frames = as_tensor(frames)
    T = frames.shape[0]

    def attend(q, kv):
        if bypass is None:
            return attention(q, kv, kv, params)
        return mixed_attention(q, kv, kv, params, bypass)

    first = attend(frames[0:1], frames[0:1])
    if T == 1:
        return first
    anchor = take(frames, np.zeros(T - 1, dtype=int), axis=0)
    prev = take(frames, np.arange(T - 1), axis=0)
    rest = attend(frames[1:], concat([anchor, prev], axis=1))
    return concat([first, rest], axis=0)


def temporal_attention(video_tokens, params: AttnParams) -> Tensor:
    """Attention across time at every spatial site; tokens are (T, L, d)."""
    x = as_tensor(video_tokens).transpose(1, 0, 2)
    return attention(x, x, x, params).transpose(1, 0, 2)


# ---------------------------------------------------------------------------
# initialization and guarantees

def svd_init(base: AttnParams, k: int, phi: float = 0.5, learn_phi: bool = False) -> BypassAttnParams:
    """Truncated-SVD factors of ``W_Q W_K^T = U diag(s) V^T``.

    Column j of ``Wq_low`` is ``s_j u_j`` and column j of ``Wk_low`` is ``v_j``,
    so ``Wq_low Wk_low^T`` is the best rank-k approximation in Frobenius norm.
    """
    d = base.d
    if not 1 <= k < d:
        raise ValueError(f"rank must satisfy 1 <= k < d={d}, got {k}")
    u, s, v = svd(base.score_matrix())
    return BypassAttnParams(parameter(u[:, :k] * s[:k], "Wq_low"), parameter(v[:, :k].copy(), "Wk_low"),
                            phi=phi, learn_phi=learn_phi)


def random_init(d: int, k: int, rng: np.random.Generator, phi: float = 0.5, learn_phi: bool = False) -> BypassAttnParams:
    return BypassAttnParams(parameter(rng.normal(0.0, d ** -0.5, (d, k)), "Wq_low"),
                            parameter(rng.normal(0.0, d ** -0.5, (d, k)), "Wk_low"),
                            phi=phi, learn_phi=learn_phi)


def factor_error(base: AttnParams, bp: BypassAttnParams, relative: bool = False) -> float:
    target = base.score_matrix()
    err = float(np.linalg.norm(bp.score_matrix() - target))
    return err / float(np.linalg.norm(target)) if relative else err


def svd_tail(matrix: np.ndarray, k: int) -> float:
    """``sqrt(sum_{i>k} s_i^2)`` of ``matrix``."""
    _, s, _ = svd(matrix)
    return float(np.sqrt(np.sum(s[k:] ** 2)))


def jl_bound(eps: float, k: int) -> float:
    return 2.0 * math.exp(-(eps ** 2 - eps ** 3) * k / 4.0)


@dataclass
class JLResult:
    d: int
    k: int
    eps: float
    trials: int
    failures: int
    literal_failures: int
    bound: float

    @property
    def failure_rate(self) -> float:
        return self.failures / self.trials

    @property
    def literal_failure_rate(self) -> float:
        return self.literal_failures / self.trials

    @property
    def slack(self) -> float:
        """Three binomial standard deviations at the bound's rate."""
        p = min(self.bound, 1.0)
        return 3.0 * math.sqrt(p * (1.0 - p) / self.trials)

    @property
    def passed(self) -> bool:
        return self.failure_rate <= self.bound + self.slack


def jl_verify(d: int, k: int, eps: float, trials: int, rng: np.random.Generator,
              orthonormal: bool = False, batch: int = 32) -> JLResult:
    """Monte-Carlo check of the random-projection bilinear-form bound.

    Each trial draws unit vectors y, z and ``R`` with iid N(0, 1/k) entries
    (or, with ``orthonormal``, a random matrix with orthonormal columns), and
    counts a failure when ``|z R R^T y - z y| > eps |z| |y|``. Failures of the
    stricter reading with ``|z y|`` on the right are counted separately.
    """
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    failures = literal = 0
    done = 0
    while done < trials:
        n = min(batch, trials - done)
        z = rng.standard_normal((n, d))
        y = rng.standard_normal((n, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        if orthonormal:
            R = np.linalg.qr(rng.standard_normal((n, d, k)))[0]
        else:
            R = rng.standard_normal((n, d, k)) * (1.0 / math.sqrt(k))
        projected = np.einsum("nk,nk->n", np.einsum("nd,ndk->nk", z, R), np.einsum("nd,ndk->nk", y, R))
        exact = np.einsum("nd,nd->n", z, y)
        gap = np.abs(projected - exact)
        failures += int(np.count_nonzero(gap > eps))
        literal += int(np.count_nonzero(gap > eps * np.abs(exact)))
        done += n
    return JLResult(d, k, eps, trials, failures, literal, jl_bound(eps, k))


@dataclass
class ParamAudit:
    d: int
    k: int
    layers: int

    @property
    def trainable(self) -> int:
        return self.layers * 2 * self.d * self.k

    @property
    def full_tune(self) -> int:
        return self.layers * 2 * self.d * self.d

    @property
    def frozen(self) -> int:
        """Base query, key and value projections kept fixed."""
        return self.layers * 3 * self.d * self.d

    @property
    def ratio(self) -> float:
        return self.trainable / self.full_tune


def param_audit(d: int, k: int, layers: int = 1) -> ParamAudit:
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    return ParamAudit(d, k, layers)


def map_costs(L: int, d: int, k: int, rng: np.random.Generator) -> tuple[int, int]:
    """Measured multiplies for (bypass map, base map) on random L x d tokens."""
    x = rng.standard_normal((L, d))
    base = AttnParams.random(d, rng)
    bp = random_init(d, k, rng)
    with count_multiplies() as low:
        bypass_map(x, x, bp)
    with count_multiplies() as full:
        base_map(x, x, base)
    return low[0], full[0]
