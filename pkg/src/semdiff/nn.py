"""Network building blocks and the Adam optimizer.

Layers hold their parameters as autodiff Tensors and expose them through
named_parameters(); construction is deterministic given the rng passed in.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import ConfigError


def pick_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding, shape (batch, dim); [sin | cos] halves."""
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Linear:
    def __init__(self, din: int, dout: int, rng, dtype=np.float32, init_scale: float = 1.0):
        std = init_scale / np.sqrt(din)
        self.w = Tensor(rng.normal(0.0, std, (din, dout)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)

    def named_parameters(self, prefix=""):
        yield prefix + "w", self.w
        yield prefix + "b", self.b


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 1,
                 dtype=np.float32, init_scale: float = 1.0):
        fan_in = cin * k * k
        std = init_scale * np.sqrt(2.0 / fan_in)
        self.w = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def named_parameters(self, prefix=""):
        yield prefix + "w", self.w
        yield prefix + "b", self.b


class GroupNorm:
    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5):
        self.groups = pick_groups(channels)
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.group_norm(x, self.gamma, self.beta, self.groups, self.eps)

    def named_parameters(self, prefix=""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta


class ResBlock:
    """Two 3x3 convolutions with group norms and SiLU; the step embedding
    enters as a scale/shift applied after the second norm, so it survives
    normalization. Identity (or 1x1-projected) residual."""

    def __init__(self, cin: int, cout: int, temb_dim: int | None, rng, dtype=np.float32):
        self.norm1 = GroupNorm(cin, dtype)
        self.conv1 = Conv2d(cin, cout, 3, rng, dtype=dtype)
        self.temb_proj = Linear(temb_dim, 2 * cout, rng, dtype) if temb_dim else None
        self.norm2 = GroupNorm(cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, dtype=dtype, init_scale=0.1)
        self.skip = Conv2d(cin, cout, 1, rng, dtype=dtype) if cin != cout else None
        self.cout = cout

    def __call__(self, x, temb=None):
        h = self.conv1(ad.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.temb_proj is not None and temb is not None:
            ss = self.temb_proj(ad.silu(temb))
            scale, shift = ad.split(ad.reshape(ss, (ss.shape[0], 2 * self.cout, 1, 1)),
                                    [self.cout, self.cout], axis=1)
            h = h * (scale + 1.0) + shift
        h = self.conv2(ad.silu(h))
        res = x if self.skip is None else self.skip(x)
        return h + res

    def named_parameters(self, prefix=""):
        yield from self.norm1.named_parameters(prefix + "norm1.")
        yield from self.conv1.named_parameters(prefix + "conv1.")
        if self.temb_proj is not None:
            yield from self.temb_proj.named_parameters(prefix + "temb.")
        yield from self.norm2.named_parameters(prefix + "norm2.")
        yield from self.conv2.named_parameters(prefix + "conv2.")
        if self.skip is not None:
            yield from self.skip.named_parameters(prefix + "skip.")


class SelfAttention:
    """Single-head self-attention over the spatial grid."""

    def __init__(self, channels: int, rng, dtype=np.float32):
        self.norm = GroupNorm(channels, dtype)
        self.qkv = Conv2d(channels, 3 * channels, 1, rng, dtype=dtype)
        self.proj = Conv2d(channels, channels, 1, rng, dtype=dtype, init_scale=0.1)
        self.channels = channels

    def __call__(self, x, temb=None):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        q, k, v = ad.split(qkv, [c, c, c], axis=1)
        q = ad.reshape(q, (b, c, h * w))
        k = ad.reshape(k, (b, c, h * w))
        v = ad.reshape(v, (b, c, h * w))
        scores = ad.matmul(ad.transpose(q, (0, 2, 1)), k) * float(1.0 / np.sqrt(c))
        attn = ad.softmax(scores, axis=-1)  # [b, query, key]
        out = ad.matmul(v, ad.transpose(attn, (0, 2, 1)))
        out = self.proj(ad.reshape(out, (b, c, h, w)))
        return x + out

    def named_parameters(self, prefix=""):
        yield from self.norm.named_parameters(prefix + "norm.")
        yield from self.qkv.named_parameters(prefix + "qkv.")
        yield from self.proj.named_parameters(prefix + "proj.")


class Downsample:
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, rng, stride=2, dtype=dtype)

    def __call__(self, x):
        return self.conv(x)

    def named_parameters(self, prefix=""):
        yield from self.conv.named_parameters(prefix + "conv.")


class Upsample:
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, rng, dtype=dtype)

    def __call__(self, x):
        return self.conv(ad.upsample_nearest2x(x))

    def named_parameters(self, prefix=""):
        yield from self.conv.named_parameters(prefix + "conv.")


class Adam:
    """Adam over named parameter Tensors; moment buffers match each
    parameter's dtype. Parameters must own contiguous arrays (updates are
    in place)."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, grad_clip: float | None = None):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def _global_grad_norm(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        scale = 1.0
        if self.grad_clip is not None:
            norm = self._global_grad_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / (norm + 1e-12)
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            if scale != 1.0:
                g = g * scale
            kernels.adam_step(p.data, g, self.m[name], self.v[name],
                              self.lr, self.beta1, self.beta2, self.eps, bc1, bc2)

    def state_dict(self) -> dict:
        out = {"step_count": np.int64(self.step_count)}
        for name in self.m:
            out["m." + name] = self.m[name]
            out["v." + name] = self.v[name]
        return out

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        for name in self.m:
            self.m[name][...] = state["m." + name]
            self.v[name][...] = state["v." + name]
