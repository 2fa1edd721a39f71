"""State-space layers: ZOH discretization, recurrent and convolutional
evaluation, the input-selective scan, and a work-efficient affine prefix scan.

Shapes follow the usual conventions: N is the state size, M the sequence
length, E the number of independent channels of the selective scan.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .numerics import NumericError, Tensor, exp, matmul, parameter, softplus


@dataclass(frozen=True)
class SsmParams:
    """Continuous SSM ``h' = A h + B x, y = C h`` with step ``delta``.

    ``A_d`` and ``B_d`` are filled in by :func:`discretize_zoh`.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float
    A_d: np.ndarray | None = None
    B_d: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", np.asarray(self.B, dtype=np.float64).reshape(n, 1))
        object.__setattr__(self, "C", np.asarray(self.C, dtype=np.float64).reshape(1, n))
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @property
    def state_size(self) -> int:
        return self.A.shape[0]

    @property
    def discretized(self) -> bool:
        return self.A_d is not None


def discretize_zoh(params: SsmParams) -> SsmParams:
    """Zero-order-hold discretization.

    ``A_d = exp(dA)`` and ``B_d = (dA)^-1 (exp(dA) - I) dB``. Near ``dA = 0``
    the series ``(I + dA/2 + dA^2/6 + ...) dB`` is used, and a singular ``dA``
    falls back to the block-exponential form, which is the same integral.
    """
    if not np.all(np.isfinite(params.A)):
        raise NumericError("A has non-finite entries")
    n = params.state_size
    dA = params.delta * params.A
    dB = params.delta * params.B
    with np.errstate(over="ignore", invalid="ignore"):
        A_d = scipy.linalg.expm(dA)
    if not np.all(np.isfinite(A_d)):
        raise NumericError("exp(delta*A) overflowed")

    if np.linalg.norm(dA) < 1e-6:
        term = np.eye(n)
        acc = np.eye(n)
        for k in range(2, 6):
            term = term @ dA / k
            acc = acc + term
        B_d = acc @ dB
    elif np.linalg.cond(dA) < 1e12:
        B_d = np.linalg.solve(dA, (A_d - np.eye(n)) @ dB)
    else:
        block = np.zeros((n + 1, n + 1))
        block[:n, :n] = dA
        block[:n, n:] = dB
        B_d = scipy.linalg.expm(block)[:n, n:]
    return replace(params, A_d=A_d, B_d=B_d)


def _require_discrete(params: SsmParams) -> None:
    if not params.discretized:
        raise ValueError("params must be discretized first (discretize_zoh)")


def scan_sequential(params: SsmParams, x) -> np.ndarray:
    """Run ``h_t = A_d h_{t-1} + B_d x_t, y_t = C h_t`` from ``h_0 = 0``."""
    _require_discrete(params)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    h = np.zeros(params.state_size)
    b = params.B_d[:, 0]
    c = params.C[0]
    y = np.empty_like(x)
    for t, xt in enumerate(x):
        h = params.A_d @ h + b * xt
        y[t] = c @ h
    return y


def conv_kernel(params: SsmParams, M: int) -> np.ndarray:
    """``K[j] = C A_d^j B_d`` for ``j < M``; uses the discrete matrices so the
    causal convolution with ``K`` reproduces :func:`scan_sequential`."""
    _require_discrete(params)
    if M <= 0:
        raise ValueError(f"kernel length must be positive, got {M}")
    K = np.empty(M)
    v = params.B_d[:, 0].copy()
    for j in range(M):
        K[j] = params.C[0] @ v
        v = params.A_d @ v
    return K


def causal_conv(kernel, x) -> np.ndarray:
    """``y_t = sum_{j<=t} K[j] x_{t-j}``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return np.convolve(x, np.asarray(kernel)[: x.size])[: x.size]


def conv_kernel_apply(params: SsmParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return causal_conv(conv_kernel(params, max(x.size, 1)), x)


# ---------------------------------------------------------------------------
# affine scans: h_t = a_t * h_{t-1} + b_t, elementwise over trailing axes

def scan_affine_sequential(a, b, h0=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h = np.zeros(b.shape[1:]) if h0 is None else np.asarray(h0, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    for t in range(out.shape[0]):
        h = a[t] * h + b[t]
        out[t] = h
    return out


def scan_parallel(a, b, h0=None) -> np.ndarray:
    """All states of ``h_t = a_t * h_{t-1} + b_t`` by a Blelloch scan.

    Each step is the affine map ``(a, b)``; maps compose associatively as
    ``(a, b) o (a', b') = (a a', a b' + b)`` (right map applied first). The
    up-sweep builds subtree compositions in place, the down-sweep turns them
    into exclusive prefixes, and a final elementwise step applies each token.
    Work is O(M); depth O(log M). The leading axis is time; trailing axes are
    independent lanes.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    shape = np.broadcast_shapes(a.shape, b.shape)
    a = np.broadcast_to(a, shape)
    b = np.broadcast_to(b, shape)
    M = shape[0]
    if M == 0:
        return np.zeros(shape)
    n = 1 << (M - 1).bit_length()
    A = np.ones((n,) + shape[1:])
    B = np.zeros((n,) + shape[1:])
    A[:M] = a
    B[:M] = b

    d = 1
    while d < n:
        left, right = slice(d - 1, n, 2 * d), slice(2 * d - 1, n, 2 * d)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[right] * A[left]
        d *= 2

    A[n - 1] = 1.0
    B[n - 1] = 0.0
    d = n // 2
    while d >= 1:
        left, right = slice(d - 1, n, 2 * d), slice(2 * d - 1, n, 2 * d)
        la, lb = A[left].copy(), B[left].copy()
        pa, pb = A[right].copy(), B[right].copy()
        A[left], B[left] = pa, pb
        A[right] = la * pa
        B[right] = la * pb + lb
        d //= 2

    prev = B[:M] if h0 is None else A[:M] * np.asarray(h0, dtype=np.float64) + B[:M]
    return a * prev + b


def _reverse_scan(a: np.ndarray, d: np.ndarray, scan) -> np.ndarray:
    """``g_t = d_t + a_{t+1} g_{t+1}`` with ``g_{M-1} = d_{M-1}``."""
    ar = np.empty_like(a)
    ar[0] = 1.0
    ar[1:] = a[::-1][:-1]
    return scan(ar, d[::-1])[::-1]


def diagonal_pairs(params: SsmParams, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token affine pairs for a discretized SSM with diagonal ``A_d``.

    Returns ``(a, b, c)`` with ``a, b`` of shape (M, N) and output weights ``c``.
    """
    _require_discrete(params)
    if not np.allclose(params.A_d, np.diag(np.diag(params.A_d)), atol=0.0):
        raise ValueError("parallel scan of a fixed SSM needs diagonal A")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    a = np.broadcast_to(np.diag(params.A_d), (x.size, params.state_size))
    b = x[:, None] * params.B_d[:, 0][None, :]
    return a, b, params.C[0]


# ---------------------------------------------------------------------------
# selective scan

@dataclass
class SelectiveParams:
    """Projections producing per-token ``B_t, C_t, delta_t`` for E channels.

    ``A = -exp(A_log)`` is diagonal per channel and state index.
    ``delta_t = softplus(x_t @ W_dt + b_dt)``.
    """

    W_B: Tensor
    W_C: Tensor
    W_dt: Tensor
    b_dt: Tensor
    A_log: Tensor

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: getattr(self, k) for k in ("W_B", "W_C", "W_dt", "b_dt", "A_log")}


def init_selective(channels: int, state_size: int, rng: np.random.Generator,
                   dt_min: float = 1e-3, dt_max: float = 1e-1) -> SelectiveParams:
    E, N = channels, state_size
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=E))
    return SelectiveParams(
        W_B=parameter(rng.normal(0.0, E ** -0.5, (E, N)), "W_B"),
        W_C=parameter(rng.normal(0.0, E ** -0.5, (E, N)), "W_C"),
        W_dt=parameter(rng.normal(0.0, 0.1 * E ** -0.5, (E, E)), "W_dt"),
        b_dt=parameter(np.log(np.expm1(dt)), "b_dt"),
        A_log=parameter(np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (E, 1)), "A_log"),
    )


_SCANS = {"parallel": scan_parallel, "sequential": scan_affine_sequential}


def selective_scan_core(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                        method: str = "sequential") -> Tensor:
    """Selective scan with per-token ZOH.

    x, delta: (M, E); A: (E, N); B, C: (M, N). Per channel e and state n,
    ``h_t = exp(delta_t A) h_{t-1} + expm1(delta_t A)/A * B_t x_t`` and
    ``y_t = sum_n C_t h_t``.
    """
    scan = _SCANS[method]
    dl, Av, Bv, Cv, xv = delta.data, A.data, B.data, C.data, x.data
    # softplus can underflow to exactly 0; a zero step just skips the token
    if not np.all(np.isfinite(dl) & (dl >= 0)):
        raise NumericError("selective scan step sizes must be finite and non-negative")
    if np.any(Av == 0):
        raise NumericError("selective scan needs nonzero diagonal A")
    dA = dl[:, :, None] * Av[None]
    a = np.exp(dA)
    phi = np.expm1(dA) / Av[None]
    coef = phi * Bv[:, None, :]
    h = scan(a, coef * xv[:, :, None])
    y = np.einsum("men,mn->me", h, Cv)

    def vjp(gy):
        g = _reverse_scan(a, gy[:, :, None] * Cv[:, None, :], scan)
        gC = np.einsum("me,men->mn", gy, h)
        gx = np.einsum("men,men->me", g, coef)
        gcoef = g * xv[:, :, None]
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]])
        gdA = g * h_prev * a
        gB = np.einsum("men,men->mn", gcoef, phi)
        gphi = gcoef * Bv[:, None, :]
        gdelta = np.einsum("men,en->me", gdA, Av) + np.einsum("men,men->me", gphi, a)
        dphi_dA = (dA * a - np.expm1(dA)) / (Av[None] ** 2)
        gA = np.einsum("men,me->en", gdA, dl) + np.einsum("men,men->en", gphi, dphi_dA)
        return gx, gdelta, gA, gB, gC

    return Tensor.from_op(y, (x, delta, A, B, C), vjp)


def selective_scan(sel: SelectiveParams, x: Tensor, method: str = "sequential") -> Tensor:
    """Input-selective SSM over tokens ``x`` of shape (M, E)."""
    delta = softplus(matmul(x, sel.W_dt) + sel.b_dt)
    A = -exp(sel.A_log)
    return selective_scan_core(x, delta, A, matmul(x, sel.W_B), matmul(x, sel.W_C), method)
