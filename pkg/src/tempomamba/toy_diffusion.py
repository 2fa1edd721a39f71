"""A small pixel-space video diffusion model to run the blocks end to end.

The denoiser is an inflated image network: 1x3x3 (per-frame) convolutions, a
sparse causal attention layer with a bypass path, and a stack of four-direction
video Mamba blocks in place of temporal attention. Training uses the
epsilon-prediction objective; sampling uses deterministic DDIM with
classifier-free guidance.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import bypass_attention as ba
from .numerics import (NumericError, Tensor, as_tensor, load_archive, make_rng,
                       matmul, mse, parameter, save_archive, silu)
from .temporal_mamba import PADDING_MODES, BlockConfig, BlockStack, MambaBlock


# ---------------------------------------------------------------------------
# schedule and forward process

@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta ramp; ``alpha_bar(0) == 1`` by convention."""

    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError("betas must satisfy 0 < start <= end < 1")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.steps)

    @property
    def alpha_bars(self) -> np.ndarray:
        """``alpha_bar`` for t = 0..steps."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])


def forward_diffuse(z0, t: int, schedule: DiffusionSchedule, rng: np.random.Generator | None = None,
                    noise=None) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; returns (z_t, eps)."""
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"t must lie in 1..{schedule.steps}, got {t}")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = rng.standard_normal(z0.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps, eps


# ---------------------------------------------------------------------------
# conditioning

def condition_table(num_classes: int, dim: int) -> np.ndarray:
    """Fixed unit-norm embedding per class (rows); independent of run seed."""
    if num_classes > dim:
        raise ValueError("need dim >= num_classes for orthonormal embeddings")
    q, _ = np.linalg.qr(make_rng(20240601).standard_normal((dim, num_classes)))
    return q.T.copy()


def null_embedding(dim: int) -> np.ndarray:
    return np.zeros(dim)


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    arg = t * freqs
    emb = np.concatenate([np.sin(arg), np.cos(arg)])
    return np.pad(emb, (0, dim - emb.size))


# ---------------------------------------------------------------------------
# pseudo-3D convolution

def unfold3x3(video) -> Tensor:
    """(T, C, H, W) -> (T, H, W, C*9) zero-padded 3x3 patches per frame."""
    video = as_tensor(video)
    T, C, H, W = video.shape
    padded = np.pad(video.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((T, H, W, C, 9))
    for dy in range(3):
        for dx in range(3):
            cols[..., dy * 3 + dx] = padded[:, :, dy:dy + H, dx:dx + W].transpose(0, 2, 3, 1)

    def vjp(g):
        g = g.reshape(T, H, W, C, 9)
        gp = np.zeros_like(padded)
        for dy in range(3):
            for dx in range(3):
                gp[:, :, dy:dy + H, dx:dx + W] += g[..., dy * 3 + dx].transpose(0, 3, 1, 2)
        return (gp[:, :, 1:-1, 1:-1],)

    return Tensor.from_op(cols.reshape(T, H, W, C * 9), (video,), vjp)


class PseudoConv3d:
    """A 3x3 image convolution applied to every frame independently (1x3x3 kernel)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, zero: bool = False):
        fan_in = 9 * c_in
        w = np.zeros((c_in * 9, c_out)) if zero else rng.normal(0.0, fan_in ** -0.5, (c_in * 9, c_out))
        self.weight = parameter(w, "weight")
        self.bias = parameter(np.zeros(c_out), "bias")

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, video) -> Tensor:
        out = matmul(unfold3x3(video), self.weight) + self.bias
        return out.transpose(0, 3, 1, 2)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, n_in ** -0.5, (n_in, n_out))
        self.weight = parameter(w, "weight")
        self.bias = parameter(np.zeros(n_out), "bias")

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x) -> Tensor:
        return matmul(as_tensor(x).reshape(1, -1), self.weight).reshape(-1) + self.bias


# ---------------------------------------------------------------------------
# denoiser

@dataclass
class DenoiserConfig:
    channels: int = 3
    width: int = 16
    cond_dim: int = 8
    depth: int = 2
    rank: int = 12
    phi: float = 0.5
    learn_phi: bool = False
    bypass: bool = True
    bypass_init: str = "svd"
    padding: str = "learnable"
    mamba_mode: str = "replace"
    state_size: int = 8
    expand: int = 1
    prenorm: bool = True

    def __post_init__(self):
        if self.mamba_mode not in ("replace", "insert"):
            raise ValueError(f"mamba_mode must be 'replace' or 'insert', got {self.mamba_mode!r}")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")
        if self.bypass_init not in ("svd", "random"):
            raise ValueError(f"bypass_init must be 'svd' or 'random', got {self.bypass_init!r}")


BACKBONE_PREFIXES = ("conv_in.", "conv_mid.", "conv_out.", "time_proj.", "cond_proj.", "attn.", "temporal_attn.")
ADAPTER_PREFIXES = ("bypass.", "mamba.")


class ToyDenoiser:
    """Predicts the noise in ``z_t`` given the step and a condition vector."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        self.config = config
        w = config.width
        self.conv_in = PseudoConv3d(config.channels, w, rng)
        self.conv_mid = PseudoConv3d(w, w, rng)
        self.conv_out = PseudoConv3d(w, config.channels, rng)
        self.time_proj = Linear(w, w, rng)
        self.cond_proj = Linear(config.cond_dim, w, rng)
        # base attention stays frozen whenever a bypass path adapts it
        self.attn = ba.AttnParams.random(w, rng, trainable=not config.bypass)
        self.bypass: ba.BypassAttnParams | None = None
        if config.bypass:
            if config.bypass_init == "svd":
                self.bypass = ba.svd_init(self.attn, config.rank, config.phi, config.learn_phi)
            else:
                self.bypass = ba.random_init(w, config.rank, rng, config.phi, config.learn_phi)
        self.temporal_attn = ba.AttnParams.random(w, rng, trainable=True) if config.mamba_mode == "insert" else None
        self.block_config = BlockConfig(channels=w, expand=config.expand, state_size=config.state_size,
                                        padding=config.padding, prenorm=config.prenorm)
        self.mamba = BlockStack(self.block_config, config.depth, rng)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("conv_in", "conv_mid", "conv_out", "time_proj", "cond_proj"):
            out.update({f"{name}.{k}": v for k, v in getattr(self, name).parameters().items()})
        out.update(self.attn.named("attn."))
        if self.bypass is not None:
            out.update(self.bypass.named("bypass."))
        if self.temporal_attn is not None:
            out.update(self.temporal_attn.named("temporal_attn."))
        out.update({f"mamba.{k}": v for k, v in self.mamba.parameters().items()})
        return out

    def trainable(self, freeze_backbone: bool = False) -> dict[str, Tensor]:
        params = {k: v for k, v in self.parameters().items() if v.requires_grad}
        if freeze_backbone:
            params = {k: v for k, v in params.items() if k.startswith(ADAPTER_PREFIXES)}
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unknown = set(state) - set(params)
        if missing or unknown:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)}, unknown {sorted(unknown)}")
        for k, v in params.items():
            if v.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {state[k].shape}")
            v.data = np.array(state[k], dtype=np.float64)

    def insert_mamba_block(self, rng: np.random.Generator) -> MambaBlock:
        """Append a freshly initialized (identity) block to the stack."""
        block = MambaBlock(self.block_config, rng)
        self.mamba.blocks.append(block)
        return block

    def __call__(self, z_t, t: float, c) -> Tensor:
        z_t = as_tensor(z_t)
        T, _, H, W = z_t.shape
        width = self.config.width
        h = self.conv_in(z_t)
        emb = silu(self.time_proj(timestep_embedding(t, width))) + self.cond_proj(c)
        h = h + emb.reshape(1, width, 1, 1)
        h = h + self.conv_mid(silu(h))

        tokens = h.transpose(0, 2, 3, 1).reshape(T, H * W, width)
        tokens = tokens + ba.sparse_causal_attention(tokens, self.attn, self.bypass)
        if self.temporal_attn is not None:
            tokens = tokens + ba.temporal_attention(tokens, self.temporal_attn)
        h = tokens.reshape(T, H, W, width).transpose(0, 3, 1, 2)

        h = self.mamba(h)
        return self.conv_out(silu(h))


def training_loss(denoiser, z0, c, schedule: DiffusionSchedule, rng: np.random.Generator,
                  t: int | None = None, noise=None) -> Tensor:
    """``mean((eps - eps_theta(z_t, t, c))^2)`` at a uniformly drawn step."""
    if t is None:
        t = int(rng.integers(1, schedule.steps + 1))
    z_t, eps = forward_diffuse(z0, t, schedule, rng, noise)
    return mse(as_tensor(denoiser(z_t, t, c)), eps)


# ---------------------------------------------------------------------------
# sampling

def _predict(denoiser, z, t, c) -> np.ndarray:
    out = denoiser(z, t, c)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def cfg_predict(denoiser, z_t, t: float, c, guidance_scale: float, null=None) -> np.ndarray:
    """``eps_u + s (eps_c - eps_u)``, evaluated as ``(1 - s) eps_u + s eps_c``."""
    c = np.asarray(c, dtype=np.float64)
    null = np.zeros_like(c) if null is None else np.asarray(null, dtype=np.float64)
    eps_u = _predict(denoiser, z_t, t, null)
    if np.array_equal(c, null):
        return eps_u
    eps_c = _predict(denoiser, z_t, t, c)
    return (1.0 - guidance_scale) * eps_u + guidance_scale * eps_c


def ddim_step(denoiser, z_t, t: int, t_prev: int, c, schedule: DiffusionSchedule,
              guidance_scale: float | None = None, eps=None, clip_denoised: float | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM move from step ``t`` to ``t_prev``.

    Without ``guidance_scale`` the conditional prediction is used directly.
    Passing ``eps`` skips the network. ``clip_denoised`` clamps the predicted
    clean sample to ``[-clip, clip]``, which keeps strongly guided sampling
    inside the data range; leave it off when the step must stay invertible.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    if t_prev == t:
        return z_t.copy()
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if eps is None:
        eps = (_predict(denoiser, z_t, t, c) if guidance_scale is None
               else cfg_predict(denoiser, z_t, t, c, guidance_scale))
    ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    if clip_denoised is not None:
        z0_hat = np.clip(z0_hat, -clip_denoised, clip_denoised)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps


def ddim_timesteps(schedule: DiffusionSchedule, num_steps: int) -> list[int]:
    """Ascending grid ``0 = t_0 < t_1 < ... < t_n = T``."""
    return [int(round(i * schedule.steps / num_steps)) for i in range(num_steps + 1)]


def ddim_invert(denoiser, z0, c, schedule: DiffusionSchedule, num_steps: int = 50,
                guidance_scale: float | None = None, fixed_point_iters: int = 3) -> np.ndarray:
    """Run the DDIM update backwards, from data to ``z_T``.

    Each step looks for the ``z_t`` whose forward DDIM step lands on the
    current latent. The plain inversion uses the noise predicted at the
    earlier latent; ``fixed_point_iters`` extra passes re-predict it at the
    current estimate of ``z_t``, which shrinks the round-trip gap geometrically.
    """
    if fixed_point_iters < 0:
        raise ValueError("fixed_point_iters must be >= 0")

    def predict(z, t):
        return (_predict(denoiser, z, t, c) if guidance_scale is None
                else cfg_predict(denoiser, z, t, c, guidance_scale))

    grid = ddim_timesteps(schedule, num_steps)
    z = np.asarray(z0, dtype=np.float64).copy()
    for t_prev, t in zip(grid[:-1], grid[1:]):
        ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
        eps = predict(z, t)
        for k in range(fixed_point_iters + 1):
            z0_hat = (z - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
            z_next = math.sqrt(ab) * z0_hat + math.sqrt(1.0 - ab) * eps
            if k < fixed_point_iters:
                eps = predict(z_next, t)
        z = z_next
    return z


def ddim_sample(denoiser, z_T, c, schedule: DiffusionSchedule, num_steps: int = 50,
                guidance_scale: float | None = None, clip_denoised: float | None = None) -> np.ndarray:
    grid = ddim_timesteps(schedule, num_steps)
    z = np.asarray(z_T, dtype=np.float64).copy()
    for t, t_prev in zip(grid[:0:-1], grid[-2::-1]):
        z = ddim_step(denoiser, z, t, t_prev, c, schedule, guidance_scale, clip_denoised=clip_denoised)
    return z


# ---------------------------------------------------------------------------
# synthetic data

MOTIONS = ("translate", "rotate", "color-shift")


@dataclass(frozen=True)
class DatasetSpec:
    frames: int = 4
    size: int = 16
    count: int = 24
    classes: tuple = MOTIONS

    def __post_init__(self):
        if not 4 <= self.frames <= 16:
            raise ValueError("frames must lie in [4, 16]")
        if not 8 <= self.size <= 32:
            raise ValueError("size must lie in [8, 32]")
        unknown = set(self.classes) - set(MOTIONS)
        if unknown:
            raise ValueError(f"unknown motion types {sorted(unknown)}")


def _translate(spec: DatasetSpec, rng) -> tuple[np.ndarray, dict]:
    S = spec.size
    side = max(S // 4, 2)
    v = int(rng.integers(1, 3))
    y0, x0 = rng.integers(0, S - side, size=2)
    frame = np.full((3, S, S), -0.6)
    frame[:, y0:y0 + side, x0:x0 + side] = np.array([0.9, -0.2, -0.2])[:, None, None]
    video = np.stack([np.roll(frame, t * v, axis=2) for t in range(spec.frames)])
    return video, {"velocity": v}


def _rotate(spec: DatasetSpec, rng) -> tuple[np.ndarray, dict]:
    S = spec.size
    yy, xx = np.mgrid[0:S, 0:S] + 0.5 - S / 2
    theta0 = rng.uniform(0, np.pi)
    omega = rng.choice([-1.0, 1.0]) * np.pi / (2 * spec.frames)
    video = np.full((spec.frames, 3, S, S), -0.6)
    for t in range(spec.frames):
        th = theta0 + omega * t
        dist = np.abs(-np.sin(th) * xx + np.cos(th) * yy)
        bar = (dist <= 1.0) & (np.hypot(xx, yy) <= S * 0.4)
        video[t, 1][bar] = 0.9
    return video, {"omega": omega}


def _color_shift(spec: DatasetSpec, rng) -> tuple[np.ndarray, dict]:
    S = spec.size
    r = S / 5
    cy, cx = rng.uniform(r, S - r, size=2)
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    disk = np.hypot(yy - cy, xx - cx) <= r
    phase = rng.uniform(0, 2 * np.pi)
    video = np.full((spec.frames, 3, S, S), -0.6)
    for t in range(spec.frames):
        ang = phase + 2 * np.pi * t / spec.frames
        video[t, 2][disk] = 0.9
        video[t, 0][disk] = 0.3 * np.cos(ang)
        video[t, 1][disk] = 0.3 * np.sin(ang)
    return video, {"phase": phase}


_RENDER = {"translate": _translate, "rotate": _rotate, "color-shift": _color_shift}


def make_synthetic_dataset(spec: DatasetSpec, rng: np.random.Generator) -> list[tuple[np.ndarray, int]]:
    """Videos (T, 3, S, S) in [-1, 1] with class labels, cycling over classes."""
    out = []
    for i in range(spec.count):
        label = i % len(spec.classes)
        video, _ = _RENDER[spec.classes[label]](spec, rng)
        out.append((video, label))
    return out


# ---------------------------------------------------------------------------
# training

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = 1.0):
        self.params = params
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        scale = 1.0
        if self.clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip:
                scale = self.clip / norm
        b1, b2 = self.betas
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    """Everything needed to replay a training run."""

    seed: int = 0
    frames: int = 4
    size: int = 16
    dataset_size: int = 24
    width: int = 16
    cond_dim: int = 8
    depth: int = 2
    rank: int = 12
    phi: str = "0.5"
    bypass: bool = True
    bypass_init: str = "svd"
    padding: str = "learnable"
    mamba_mode: str = "replace"
    state_size: int = 8
    expand: int = 1
    diffusion_steps: int = 1000
    steps: int = 500
    lr: float = 3e-3
    batch_size: int = 1
    freeze_backbone: bool = False
    cond_drop: float = 0.1
    guidance: float = 12.5
    sample_steps: int = 50
    val_size: int = 12

    def denoiser_config(self) -> DenoiserConfig:
        learn = str(self.phi).strip().lower() == "learnable"
        return DenoiserConfig(channels=3, width=self.width, cond_dim=self.cond_dim, depth=self.depth,
                              rank=self.rank, phi=0.5 if learn else float(self.phi), learn_phi=learn,
                              bypass=self.bypass, bypass_init=self.bypass_init, padding=self.padding,
                              mamba_mode=self.mamba_mode, state_size=self.state_size, expand=self.expand)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(frames=self.frames, size=self.size, count=self.dataset_size)

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(steps=self.diffusion_steps)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string values (as read from a config file); unknown keys raise KeyError."""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise KeyError(", ".join(unknown))
        kwargs = {}
        for key, raw in values.items():
            kind = type(getattr(cls(), key))
            if kind is bool and isinstance(raw, str):
                lowered = raw.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{key}: expected a boolean, got {raw!r}")
                kwargs[key] = lowered in ("true", "1", "yes")
            else:
                kwargs[key] = kind(raw)
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    config: TrainConfig
    model: ToyDenoiser
    losses: list[float] = field(default_factory=list)
    initial_state: dict = field(default_factory=dict)

    def smoothed(self, window: int = 50) -> np.ndarray:
        return smooth(self.losses, window)


def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def build_model(config: TrainConfig) -> ToyDenoiser:
    return ToyDenoiser(config.denoiser_config(), make_rng(config.seed))


def validation_set(config: TrainConfig) -> list[tuple[np.ndarray, int, np.ndarray, np.ndarray]]:
    """Fixed (video, t, noise, condition) tuples; identical across model variants
    that share frames/size/seed, so their losses are directly comparable."""
    rng = make_rng(10_000 + config.seed)
    spec = DatasetSpec(frames=config.frames, size=config.size, count=config.val_size)
    table = condition_table(len(spec.classes), config.cond_dim)
    schedule = config.schedule()
    out = []
    for video, label in make_synthetic_dataset(spec, rng):
        t = int(rng.integers(1, schedule.steps + 1))
        out.append((video, t, rng.standard_normal(video.shape), table[label]))
    return out


def validation_loss(model: ToyDenoiser, config: TrainConfig, items=None) -> float:
    schedule = config.schedule()
    items = validation_set(config) if items is None else items
    losses = []
    for video, t, noise, c in items:
        z_t, eps = forward_diffuse(video, t, schedule, noise=noise)
        pred = _predict(model, z_t, t, c)
        losses.append(float(np.mean((pred - eps) ** 2)))
    return float(np.mean(losses))


def train(config: TrainConfig, model: ToyDenoiser | None = None, out_dir=None, log_every: int = 0) -> TrainResult:
    """Adam on the epsilon objective; deterministic given ``config.seed``.

    With ``out_dir`` writes ``loss.csv`` (step, loss) and ``checkpoint.tarc``.
    """
    model = build_model(config) if model is None else model
    rng = make_rng(config.seed + 1)
    data = make_synthetic_dataset(config.dataset_spec(), rng)
    table = condition_table(len(config.dataset_spec().classes), config.cond_dim)
    null = null_embedding(config.cond_dim)
    schedule = config.schedule()
    params = model.trainable(config.freeze_backbone)
    opt = Adam(params, config.lr)
    result = TrainResult(config, model, initial_state=model.state_dict())

    for step in range(config.steps):
        opt.zero_grad()
        total = 0.0
        for _ in range(config.batch_size):
            video, label = data[int(rng.integers(len(data)))]
            c = null if rng.random() < config.cond_drop else table[label]
            loss = training_loss(model, video, c, schedule, rng) * (1.0 / config.batch_size)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at step {step}")
            loss.backward()
            total += float(loss.data)
        opt.step()
        result.losses.append(total)
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1:5d}  loss {total:.4f}  smoothed {smooth(result.losses)[-1]:.4f}", flush=True)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_loss_csv(os.path.join(out_dir, "loss.csv"), result.losses)
        save_archive(os.path.join(out_dir, "checkpoint.tarc"), model.state_dict())
    return result


def write_loss_csv(path, losses) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, repr(float(v))])
    os.replace(tmp, path)


def load_model(config: TrainConfig, checkpoint_path) -> ToyDenoiser:
    model = build_model(config)
    model.load_state_dict(load_archive(checkpoint_path))
    return model


def roundtrip_error(model: ToyDenoiser, video: np.ndarray, c, schedule: DiffusionSchedule,
                    num_steps: int = 50, fixed_point_iters: int = 3) -> float:
    """Relative error of DDIM inversion followed by DDIM sampling (no guidance)."""
    zT = ddim_invert(model, video, c, schedule, num_steps, fixed_point_iters=fixed_point_iters)
    recon = ddim_sample(model, zT, c, schedule, num_steps)
    return float(np.linalg.norm(recon - video) / np.linalg.norm(video))
