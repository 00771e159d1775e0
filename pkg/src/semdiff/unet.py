"""The denoising U-Net and its three mask-conditioning variants.

CONCAT feeds the one-hot mask as extra input channels. MASK_GUIDED encodes
the mask in a separate encoder ladder whose per-resolution feature maps
(taken before each downsampling layer) are channel-concatenated onto the
matching-resolution feature maps of the main encoder and decoder.
EDGE_GUIDED concatenates the mask on the input and routes a binary edge map
through the auxiliary encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .nn import time_embedding  # noqa: F401  (part of this module's interface)


class Variant(str, Enum):
    CONCAT = "concat"
    MASK_GUIDED = "mask_guided"
    EDGE_GUIDED = "edge_guided"


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 256
    base_width: int = 128
    channel_multipliers: tuple = (1, 1, 2, 2, 4, 4)
    num_res_blocks_per_level: int = 2
    attention_resolutions: tuple = (16,)
    num_mask_classes: int = 17
    variant: Variant = Variant.CONCAT
    time_embed_multiplier: int = 4  # embedding width = multiplier * base_width

    def __post_init__(self):
        levels = len(self.channel_multipliers)
        if levels < 1:
            raise ConfigError("channel_multipliers must not be empty")
        if self.image_size % (2 ** (levels - 1)) != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{levels - 1} "
                f"(required by {levels} resolution levels)"
            )
        if self.image_size >> (levels - 1) < 4:
            raise ConfigError("too many levels for this image size (bottom map < 4px)")
        if self.num_mask_classes < 1:
            raise ConfigError("num_mask_classes must be >= 1")
        if self.num_res_blocks_per_level < 1:
            raise ConfigError("need at least one residual block per level")
        if self.time_embed_multiplier < 1:
            raise ConfigError("time_embed_multiplier must be >= 1")
        if Variant(self.variant) != Variant.CONCAT and levels < 2:
            raise ConfigError("auxiliary-encoder variants need at least 2 resolution levels")
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "attention_resolutions", tuple(self.attention_resolutions))

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def widths(self) -> tuple:
        return tuple(self.base_width * m for m in self.channel_multipliers)

    @property
    def main_in_channels(self) -> int:
        if self.variant in (Variant.CONCAT, Variant.EDGE_GUIDED):
            return 1 + self.num_mask_classes
        return 1

    @property
    def aux_in_channels(self) -> int | None:
        if self.variant == Variant.MASK_GUIDED:
            return self.num_mask_classes
        if self.variant == Variant.EDGE_GUIDED:
            return 1
        return None

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "base_width": self.base_width,
            "channel_multipliers": list(self.channel_multipliers),
            "num_res_blocks_per_level": self.num_res_blocks_per_level,
            "attention_resolutions": list(self.attention_resolutions),
            "num_mask_classes": self.num_mask_classes,
            "variant": self.variant.value,
            "time_embed_multiplier": self.time_embed_multiplier,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(
            image_size=int(d["image_size"]),
            base_width=int(d["base_width"]),
            channel_multipliers=tuple(d["channel_multipliers"]),
            num_res_blocks_per_level=int(d["num_res_blocks_per_level"]),
            attention_resolutions=tuple(d["attention_resolutions"]),
            num_mask_classes=int(d["num_mask_classes"]),
            variant=Variant(d["variant"]),
            time_embed_multiplier=int(d.get("time_embed_multiplier", 4)),
        )


def toy_config(variant=Variant.MASK_GUIDED, num_mask_classes: int = 17) -> DenoiserConfig:
    """Desk-scale configuration: 32px, narrow widths, attention at 8px."""
    return DenoiserConfig(
        image_size=32,
        base_width=32,
        channel_multipliers=(1, 2, 2),
        num_res_blocks_per_level=1,
        attention_resolutions=(8,),
        num_mask_classes=num_mask_classes,
        variant=variant,
    )


@dataclass
class ConditioningBundle:
    """Batched conditioning channels: one-hot mask [B,C,H,W], optional edge
    map [B,1,H,W] (present iff the variant is edge-guided)."""

    mask_onehot: np.ndarray
    variant: Variant
    edge_map: np.ndarray | None = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        m = np.asarray(self.mask_onehot)
        if m.ndim != 4:
            raise ShapeError(f"mask_onehot must be [B,C,H,W], got {m.shape}")
        sums = m.sum(axis=1)
        if not np.allclose(sums, 1.0):
            raise ShapeError("mask_onehot channels must sum to 1 at every pixel")
        if self.variant == Variant.EDGE_GUIDED:
            if self.edge_map is None:
                raise ShapeError("edge-guided conditioning requires an edge map")
            e = np.asarray(self.edge_map)
            if e.shape != (m.shape[0], 1, m.shape[2], m.shape[3]):
                raise ShapeError(f"edge_map shape {e.shape} does not match mask {m.shape}")
        elif self.edge_map is not None:
            raise ShapeError(f"edge_map is only valid for edge-guided variant, not {self.variant}")

    @property
    def batch_size(self) -> int:
        return self.mask_onehot.shape[0]


@dataclass
class DenoiserOutput:
    eps_hat: Tensor  # predicted noise, [B,1,H,W]
    v: Tensor  # variance-interpolation logits, [B,1,H,W]


class _AuxEncoder:
    """Mask/edge encoder mirroring the main ladder; yields one feature map
    per resolution that has a downsampling layer after it (levels 0..L-2)."""

    def __init__(self, in_channels: int, cfg: DenoiserConfig, rng, dtype):
        w = cfg.widths
        n = cfg.num_res_blocks_per_level
        self.stem = nn.Conv2d(in_channels, w[0], 3, rng, dtype=dtype)
        self.blocks = []
        self.downs = []
        for lvl in range(cfg.levels - 1):
            cin = w[lvl] if lvl == 0 else w[lvl - 1]
            blocks = [nn.ResBlock(cin if i == 0 else w[lvl], w[lvl], None, rng, dtype)
                      for i in range(n)]
            self.blocks.append(blocks)
            if lvl < cfg.levels - 2:
                self.downs.append(nn.Downsample(w[lvl], w[lvl], rng, dtype))

    def __call__(self, x) -> list:
        feats = []
        h = self.stem(x)
        for lvl, blocks in enumerate(self.blocks):
            for blk in blocks:
                h = blk(h)
            feats.append(h)
            if lvl < len(self.downs):
                h = self.downs[lvl](h)
        return feats

    def named_parameters(self, prefix=""):
        yield from self.stem.named_parameters(prefix + "stem.")
        for lvl, blocks in enumerate(self.blocks):
            for i, blk in enumerate(blocks):
                yield from blk.named_parameters(f"{prefix}level{lvl}.block{i}.")
        for lvl, down in enumerate(self.downs):
            yield from down.named_parameters(f"{prefix}level{lvl}.down.")


class Denoiser:
    def __init__(self, config: DenoiserConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        w = config.widths
        n = config.num_res_blocks_per_level
        L = config.levels
        res = [config.image_size >> i for i in range(L)]
        self.temb_dim = config.time_embed_multiplier * config.base_width
        aux = config.aux_in_channels is not None

        self.time_mlp = [
            nn.Linear(config.base_width, self.temb_dim, rng, dtype),
            nn.Linear(self.temb_dim, self.temb_dim, rng, dtype),
        ]
        self.stem = nn.Conv2d(config.main_in_channels, w[0], 3, rng, dtype=dtype)

        self.enc_blocks = []
        self.enc_attn = []
        self.downs = []
        for lvl in range(L - 1):
            cin = w[lvl] if lvl == 0 else w[lvl - 1]
            self.enc_blocks.append(
                [nn.ResBlock(cin if i == 0 else w[lvl], w[lvl], self.temb_dim, rng, dtype)
                 for i in range(n)]
            )
            self.enc_attn.append(
                nn.SelfAttention(w[lvl], rng, dtype) if res[lvl] in config.attention_resolutions else None
            )
            down_in = 2 * w[lvl] if aux else w[lvl]
            self.downs.append(nn.Downsample(down_in, w[lvl], rng, dtype))

        mid_in = w[L - 2] if L > 1 else w[0]
        self.mid_block1 = nn.ResBlock(mid_in, w[L - 1], self.temb_dim, rng, dtype)
        self.mid_attn = (
            nn.SelfAttention(w[L - 1], rng, dtype) if res[L - 1] in config.attention_resolutions else None
        )
        self.mid_block2 = nn.ResBlock(w[L - 1], w[L - 1], self.temb_dim, rng, dtype)

        self.ups = []
        self.dec_blocks = []
        self.dec_attn = []
        for lvl in range(L - 2, -1, -1):
            below = w[lvl + 1]
            # project down to the level width while upsampling: keeps the
            # concatenated decoder input narrow at high resolutions
            self.ups.append(nn.Upsample(below, w[lvl], rng, dtype))
            cat_in = w[lvl] + w[lvl] + (w[lvl] if aux else 0)
            self.dec_blocks.append(
                [nn.ResBlock(cat_in if i == 0 else w[lvl], w[lvl], self.temb_dim, rng, dtype)
                 for i in range(n)]
            )
            self.dec_attn.append(
                nn.SelfAttention(w[lvl], rng, dtype) if res[lvl] in config.attention_resolutions else None
            )

        self.out_norm = nn.GroupNorm(w[0], dtype)
        self.out_conv = nn.Conv2d(w[0], 2, 3, rng, dtype=dtype, init_scale=0.1)
        self.aux_encoder = (
            _AuxEncoder(config.aux_in_channels, config, rng, dtype) if aux else None
        )

    # ------------------------------------------------------------------
    def named_parameters(self, prefix=""):
        yield from self.time_mlp[0].named_parameters(prefix + "time_mlp.0.")
        yield from self.time_mlp[1].named_parameters(prefix + "time_mlp.1.")
        yield from self.stem.named_parameters(prefix + "stem.")
        for lvl, blocks in enumerate(self.enc_blocks):
            for i, blk in enumerate(blocks):
                yield from blk.named_parameters(f"{prefix}enc{lvl}.block{i}.")
            if self.enc_attn[lvl] is not None:
                yield from self.enc_attn[lvl].named_parameters(f"{prefix}enc{lvl}.attn.")
            yield from self.downs[lvl].named_parameters(f"{prefix}enc{lvl}.down.")
        yield from self.mid_block1.named_parameters(prefix + "mid.block1.")
        if self.mid_attn is not None:
            yield from self.mid_attn.named_parameters(prefix + "mid.attn.")
        yield from self.mid_block2.named_parameters(prefix + "mid.block2.")
        for k, lvl in enumerate(range(self.config.levels - 2, -1, -1)):
            yield from self.ups[k].named_parameters(f"{prefix}dec{lvl}.up.")
            for i, blk in enumerate(self.dec_blocks[k]):
                yield from blk.named_parameters(f"{prefix}dec{lvl}.block{i}.")
            if self.dec_attn[k] is not None:
                yield from self.dec_attn[k].named_parameters(f"{prefix}dec{lvl}.attn.")
        yield from self.out_norm.named_parameters(prefix + "out.norm.")
        yield from self.out_conv.named_parameters(prefix + "out.conv.")
        if self.aux_encoder is not None:
            yield from self.aux_encoder.named_parameters(prefix + "aux.")

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(arr.astype(self.dtype, copy=False))

    # ------------------------------------------------------------------
    def _check_inputs(self, x_t: np.ndarray, cond: ConditioningBundle):
        if cond.variant != self.config.variant:
            raise ConfigError(
                f"conditioning variant {cond.variant.value} does not match "
                f"network variant {self.config.variant.value}"
            )
        if x_t.ndim != 4 or x_t.shape[1] != 1:
            raise ShapeError(f"x_t must be [B,1,H,W], got {x_t.shape}")
        if cond.mask_onehot.shape != (x_t.shape[0], self.config.num_mask_classes,
                                      x_t.shape[2], x_t.shape[3]):
            raise ShapeError(
                f"mask_onehot shape {cond.mask_onehot.shape} inconsistent with input {x_t.shape}"
            )

    def precompute_conditioning(self, cond: ConditioningBundle):
        """Auxiliary-encoder features for a fixed bundle; a sampling loop can
        compute these once and reuse them across all reverse steps."""
        if self.aux_encoder is None:
            return None
        aux_in = (cond.mask_onehot if self.config.variant == Variant.MASK_GUIDED
                  else cond.edge_map).astype(self.dtype, copy=False)
        return self.aux_encoder(Tensor(aux_in))

    def __call__(self, x_t, t, cond: ConditioningBundle, aux_cache=None) -> DenoiserOutput:
        x_arr = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=self.dtype)
        self._check_inputs(x_arr, cond)
        b = x_arr.shape[0]
        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (b,))

        emb = nn.time_embedding(t_arr, self.config.base_width).astype(self.dtype)
        temb = Tensor(emb)
        temb = self.time_mlp[1](ad.silu(self.time_mlp[0](temb)))

        onehot = cond.mask_onehot.astype(self.dtype, copy=False)
        xt_tensor = x_t if isinstance(x_t, Tensor) else Tensor(np.ascontiguousarray(x_arr))
        if self.config.variant in (Variant.CONCAT, Variant.EDGE_GUIDED):
            x_in = ad.concat([xt_tensor, Tensor(onehot)], axis=1)
        else:
            x_in = xt_tensor
        h = self.stem(x_in)

        aux_feats = aux_cache
        if aux_feats is None and self.aux_encoder is not None:
            aux_feats = self.precompute_conditioning(cond)

        skips = []
        for lvl, blocks in enumerate(self.enc_blocks):
            for blk in blocks:
                h = blk(h, temb)
            if self.enc_attn[lvl] is not None:
                h = self.enc_attn[lvl](h)
            skips.append(h)
            if aux_feats is not None:
                h = ad.concat([h, aux_feats[lvl]], axis=1)
            h = self.downs[lvl](h)

        h = self.mid_block1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid_block2(h, temb)

        for k, lvl in enumerate(range(self.config.levels - 2, -1, -1)):
            h = self.ups[k](h)
            parts = [h, skips[lvl]]
            if aux_feats is not None:
                parts.append(aux_feats[lvl])
            h = ad.concat(parts, axis=1)
            for blk in self.dec_blocks[k]:
                h = blk(h, temb)
            if self.dec_attn[k] is not None:
                h = self.dec_attn[k](h)

        out = self.out_conv(ad.silu(self.out_norm(h)))
        eps_hat, v = ad.split(out, [1, 1], axis=1)
        return DenoiserOutput(eps_hat=eps_hat, v=v)


def build_denoiser(config: DenoiserConfig, seed: int = 0, dtype=np.float32) -> Denoiser:
    """Construct a denoiser with deterministic initialization."""
    return Denoiser(config, seed=seed, dtype=dtype)


def denoise(net: Denoiser, x_t, t, cond: ConditioningBundle) -> DenoiserOutput:
    """Run the network for one (batched) timestep."""
    return net(x_t, t, cond)
