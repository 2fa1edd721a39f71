"""Video Mamba block scanning four flip directions.

Each block pads every frame with a learnable border, runs four flipped copies
of the padded video through one shared in-proj -> causal conv -> SiLU ->
selective scan -> gate -> out-proj pipeline, flips the results back, sums
them, crops the border and adds the input back. The out-projection starts at
zero, so a new block is an exact identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import video_scan
from .numerics import Tensor, as_tensor, concat, matmul, parameter, rms_norm, silu
from .ssm import SelectiveParams, init_selective, selective_scan

PADDING_MODES = ("learnable", "fixed", "none")

# test hook: names listed here switch on deliberate faults (see cli verify)
FAULTS: set[str] = set()


def causal_depthwise_conv(u, weight, bias) -> Tensor:
    """Per-channel causal convolution along the token axis.

    u: (M, E); weight: (E, K); bias: (E,).
    ``y[t, e] = bias[e] + sum_j weight[e, j] * u[t - K + 1 + j, e]``.
    """
    u, weight, bias = as_tensor(u), as_tensor(weight), as_tensor(bias)
    M, E = u.shape
    K = weight.shape[1]
    up = np.concatenate([np.zeros((K - 1, E)), u.data])
    y = np.broadcast_to(bias.data, (M, E)).copy()
    for j in range(K):
        y += weight.data[:, j] * up[j:j + M]

    def vjp(g):
        gup = np.zeros_like(up)
        gw = np.empty_like(weight.data)
        for j in range(K):
            gup[j:j + M] += g * weight.data[:, j]
            gw[:, j] = (g * up[j:j + M]).sum(axis=0)
        return gup[K - 1:], gw, g.sum(axis=0)

    return Tensor.from_op(y, (u, weight, bias), vjp)


@dataclass
class BlockConfig:
    channels: int
    expand: int = 2
    state_size: int = 8
    conv_width: int = 4
    padding: str = "learnable"
    scan_method: str = "sequential"
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    # normalize each token over channels before the branches (residual stays raw)
    prenorm: bool = False

    def __post_init__(self):
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")

    @property
    def inner(self) -> int:
        return self.expand * self.channels


class MambaBlock:
    """One weight set shared by all four flip branches."""

    def __init__(self, config: BlockConfig, rng: np.random.Generator, zero_init_out: bool = True):
        self.config = config
        C, E = config.channels, config.inner
        self.in_proj = parameter(rng.normal(0.0, C ** -0.5, (C, 2 * E)), "in_proj")
        self.conv_w = parameter(rng.normal(0.0, config.conv_width ** -0.5, (E, config.conv_width)), "conv_w")
        self.conv_b = parameter(np.zeros(E), "conv_b")
        self.sel: SelectiveParams = init_selective(E, config.state_size, rng, config.dt_min, config.dt_max)
        out = np.zeros((E, C)) if zero_init_out else rng.normal(0.0, E ** -0.5, (E, C))
        self.out_proj = parameter(out, "out_proj")
        self.theta_frame = parameter(rng.normal(0.0, 0.02, C), "theta_frame")
        # separator token for the fixed-token padding baseline; never trained
        self.separator = np.ones(C)

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "in_proj": self.in_proj,
            "conv_w": self.conv_w,
            "conv_b": self.conv_b,
            "out_proj": self.out_proj,
        }
        params.update(self.sel.named("ssm."))
        if self.config.padding == "learnable":
            params["theta_frame"] = self.theta_frame
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def __call__(self, x) -> Tensor:
        return block_forward(x, self)


def _pipeline(tokens: Tensor, block: MambaBlock) -> Tensor:
    E = block.config.inner
    both = matmul(tokens, block.in_proj)
    u, gate = both[:, :E], both[:, E:]
    s = silu(causal_depthwise_conv(u, block.conv_w, block.conv_b))
    y = selective_scan(block.sel, s, block.config.scan_method)
    return matmul(y * silu(gate), block.out_proj)


def branch_forward(x_padded, i: int, block: MambaBlock) -> Tensor:
    """Branch ``i``: flip, base-order flatten, shared pipeline, unflatten.

    The result stays in the flipped frame; :func:`fuse` undoes the flip.
    """
    x_padded = as_tensor(x_padded)
    T, C, H, W = x_padded.shape
    if C != block.config.channels:
        raise ValueError(f"block expects {block.config.channels} channels, got {C}")
    tokens, layout = video_scan.flatten(video_scan.flip(x_padded, i))
    if block.config.padding == "fixed":
        seq = tokens.reshape(T, H * W, C)
        sep = Tensor(np.broadcast_to(block.separator, (T, 1, C)))
        out = _pipeline(concat([sep, seq], axis=1).reshape(T * (H * W + 1), C), block)
        out = out.reshape(T, H * W + 1, C)[:, 1:, :].reshape(T * H * W, C)
    else:
        out = _pipeline(tokens, block)
    return video_scan.unflatten(out, layout)


def fuse(branches) -> Tensor:
    """Sum of the branches after undoing each branch's flip (fixed order 0..3)."""
    branches = [as_tensor(b) for b in branches]
    if len(branches) != 4:
        raise ValueError(f"fuse needs four branches, got {len(branches)}")
    shape = branches[0].shape
    if any(b.shape != shape for b in branches):
        raise ValueError("branch shapes differ")
    total = branches[0]
    for i in (1, 2, 3):
        restored = video_scan.unflip(branches[i], i)
        if i == 3 and "fuse" in FAULTS:
            total = total - restored
        else:
            total = total + restored
    return total


def block_forward(x, block: MambaBlock) -> Tensor:
    """pad -> four branches -> fuse -> crop -> residual."""
    x = as_tensor(x)
    inner = rms_norm(x, axis=1) if block.config.prenorm else x
    padded = block.config.padding == "learnable"
    xp = video_scan.pad_frames(inner, block.theta_frame) if padded else inner
    z = fuse([branch_forward(xp, i, block) for i in range(4)])
    if padded:
        z = video_scan.crop_frames(z)
    return x + z


class BlockStack:
    """Residual chain of video Mamba blocks."""

    def __init__(self, config: BlockConfig, depth: int, rng: np.random.Generator, zero_init_out: bool = True):
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        self.config = config
        self.blocks = [MambaBlock(config, rng, zero_init_out) for _ in range(depth)]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{i}.{name}": p for i, b in enumerate(self.blocks) for name, p in b.parameters().items()}

    def num_parameters(self) -> int:
        return sum(b.num_parameters() for b in self.blocks)

    def __call__(self, x) -> Tensor:
        return stack_forward(x, self)


def stack_forward(x, stack: BlockStack) -> Tensor:
    x = as_tensor(x)
    for block in stack.blocks:
        x = block_forward(x, block)
    return x
