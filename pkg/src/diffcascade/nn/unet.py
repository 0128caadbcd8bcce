"""The two denoiser architectures.

``BaseUNet`` is the text-to-image denoiser: 4 down/up stages, 3 residual
blocks per stage, cross-attention over the text token sequence in the 3
lowest-resolution stages of both paths, and the pooled text embedding
added to the timestep embedding.

``SRUNet`` is the super-resolution denoiser: the low-resolution image is
bilinearly upsampled and concatenated with the noisy input along channels,
the augmentation level enters next to the timestep embedding, and
self-attention appears only in the last (lowest-resolution) stage, where
the text cross-attention is also kept.

Both predict the clean image x-hat directly.
"""

import dataclasses
import logging

import numpy as np

from . import autograd as ag
from .layers import (Attention, Conv2d, GroupNorm, LayerNorm, Linear, Module,
                     ModuleList, sinusoidal_embedding)

logger = logging.getLogger(__name__)


def _normalize_blocks(res_blocks, num_stages):
    if isinstance(res_blocks, int):
        return (res_blocks,) * num_stages
    blocks = tuple(int(b) for b in res_blocks)
    if len(blocks) != num_stages:
        raise ValueError(f"res_blocks_per_stage has {len(blocks)} entries for {num_stages} stages")
    return blocks


@dataclasses.dataclass(frozen=True)
class BaseUNetConfig:
    in_channels: int = 3
    base_width: int = 12
    num_stages: int = 4
    res_blocks_per_stage: object = 3          # int or per-stage tuple
    cross_attn_stages: tuple = (1, 2, 3)      # stage 0 = highest resolution
    embed_dim: int = 64                       # text/timestep embedding width
    channel_mults: tuple = (1, 2, 3, 4)
    head_dim: int = 16
    dtype: str = "float32"

    def validate(self):
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        if len(self.channel_mults) != self.num_stages:
            raise ValueError("channel_mults length must equal num_stages")
        if any(s < 0 or s >= self.num_stages for s in self.cross_attn_stages):
            raise ValueError("cross_attn_stages out of range")
        _normalize_blocks(self.res_blocks_per_stage, self.num_stages)

    def blocks(self, stage):
        return _normalize_blocks(self.res_blocks_per_stage, self.num_stages)[stage]

    def widths(self):
        return tuple(self.base_width * m for m in self.channel_mults)


@dataclasses.dataclass(frozen=True)
class SRUNetConfig:
    in_channels: int = 6                      # image channels x 2 (LR concatenation)
    base_width: int = 12
    num_stages: int = 4
    res_blocks_per_stage: object = 3
    self_attn_stages: tuple = (3,)            # last stage only
    keep_text_cross_attn: bool = True
    embed_dim: int = 64
    channel_mults: tuple = (1, 2, 3, 4)
    head_dim: int = 16
    scale_factor: int = 2
    dtype: str = "float32"

    def validate(self):
        if self.in_channels % 2 != 0:
            raise ValueError("SR in_channels must be image channels x 2")
        if len(self.channel_mults) != self.num_stages:
            raise ValueError("channel_mults length must equal num_stages")
        if any(s < 0 or s >= self.num_stages for s in self.self_attn_stages):
            raise ValueError("self_attn_stages out of range")
        _normalize_blocks(self.res_blocks_per_stage, self.num_stages)

    def blocks(self, stage):
        return _normalize_blocks(self.res_blocks_per_stage, self.num_stages)[stage]

    def widths(self):
        return tuple(self.base_width * m for m in self.channel_mults)

    @property
    def cross_attn_stages(self):
        # "the last text cross-attention layers" are kept: lowest-resolution stage
        return (self.num_stages - 1,) if self.keep_text_cross_attn else ()


def paper_base_config():
    """Topology-faithful preset at the published scale (not exercised by tests)."""
    return BaseUNetConfig(base_width=128, embed_dim=512, channel_mults=(1, 2, 3, 4))


def paper_sr_config():
    return SRUNetConfig(base_width=96, embed_dim=512, channel_mults=(1, 2, 3, 4))


def desk_base_config(embed_dim=64):
    return BaseUNetConfig(base_width=12, embed_dim=embed_dim)


def desk_sr_config(embed_dim=64):
    # Efficient preset: residual blocks shifted toward the low-resolution stages.
    return SRUNetConfig(base_width=10, embed_dim=embed_dim, res_blocks_per_stage=(1, 2, 2, 2))


class ResBlock(Module):
    def __init__(self, in_ch, out_ch, cond_dim, rng, dtype):
        super().__init__()
        self.out_ch = out_ch
        self.norm1 = GroupNorm(in_ch, dtype=dtype)
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, dtype=dtype)
        self.cond_proj = Linear(cond_dim, out_ch, rng, dtype=dtype)
        self.norm2 = GroupNorm(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, dtype=dtype, zero_init=True)
        self.skip = Conv2d(in_ch, out_ch, 1, rng, dtype=dtype) if in_ch != out_ch else None

    def __call__(self, x, cond_vec):
        h = self.conv1(ag.silu(self.norm1(x)))
        shift = self.cond_proj(cond_vec).reshape(x.shape[0], self.out_ch, 1, 1)
        h = h + shift
        h = self.conv2(ag.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class SpatialSelfAttention(Module):
    def __init__(self, channels, head_dim, rng, dtype):
        super().__init__()
        self.norm = GroupNorm(channels, dtype=dtype)
        self.attn = Attention(channels, head_dim=head_dim, rng=rng, dtype=dtype)

    def __call__(self, x):
        bsz, c, h, w = x.shape
        tokens = self.norm(x).reshape(bsz, c, h * w).transpose(0, 2, 1)
        out = self.attn(tokens)
        return x + out.transpose(0, 2, 1).reshape(bsz, c, h, w)


class SpatialCrossAttention(Module):
    """Image tokens attend to the text token sequence (layer-normalized)."""

    def __init__(self, channels, text_dim, head_dim, rng, dtype):
        super().__init__()
        self.norm = GroupNorm(channels, dtype=dtype)
        self.text_norm = LayerNorm(text_dim, dtype=dtype)
        self.attn = Attention(channels, kv_dim=text_dim, head_dim=head_dim, rng=rng, dtype=dtype)

    def __call__(self, x, tokens, mask):
        bsz, c, h, w = x.shape
        q = self.norm(x).reshape(bsz, c, h * w).transpose(0, 2, 1)
        ctx = self.text_norm(tokens)
        out = self.attn(q, context=ctx, key_mask=mask)
        return x + out.transpose(0, 2, 1).reshape(bsz, c, h, w)


class _CondEmbed(Module):
    """Timestep sinusoid -> MLP, plus layer-normalized pooled text projection."""

    def __init__(self, embed_dim, cond_dim, rng, dtype):
        super().__init__()
        self.embed_dim = embed_dim
        self.lin1 = Linear(embed_dim, cond_dim, rng, dtype=dtype)
        self.lin2 = Linear(cond_dim, cond_dim, rng, dtype=dtype)
        self.pool_norm = LayerNorm(embed_dim, dtype=dtype)
        self.pool_proj = Linear(embed_dim, cond_dim, rng, dtype=dtype)

    def __call__(self, t, pooled, dtype):
        temb = sinusoidal_embedding(t, self.embed_dim, dtype=dtype)
        tvec = self.lin2(ag.silu(self.lin1(temb)))
        pvec = self.pool_proj(self.pool_norm(ag.as_tensor(pooled, dtype=dtype)))
        return tvec + pvec


class _UNetCore(Module):
    """Shared down/middle/up skeleton; attention placement differs per model."""

    def __init__(self, stem_in, out_channels, widths, blocks_per_stage, cond_dim,
                 cross_stages, self_stages, text_dim, head_dim, rng, dtype):
        super().__init__()
        self.widths = widths
        self.blocks_per_stage = blocks_per_stage
        self.cross_stages = set(cross_stages)
        self.self_stages = set(self_stages)
        nstages = len(widths)

        self.stem = Conv2d(stem_in, widths[0], 3, rng, dtype=dtype)

        def attn_pair(stage, ch):
            cross = (SpatialCrossAttention(ch, text_dim, head_dim, rng, dtype)
                     if stage in self.cross_stages else None)
            self_ = (SpatialSelfAttention(ch, head_dim, rng, dtype)
                     if stage in self.self_stages else None)
            return cross, self_

        self.down_blocks = ModuleList()
        self.down_cross = ModuleList()
        self.down_self = ModuleList()
        self.downsamples = ModuleList()
        prev = widths[0]
        for s in range(nstages):
            w = widths[s]
            stage_blocks, stage_cross, stage_self = ModuleList(), ModuleList(), ModuleList()
            for b in range(blocks_per_stage[s]):
                stage_blocks.append(ResBlock(prev if b == 0 else w, w, cond_dim, rng, dtype))
                cross, self_ = attn_pair(s, w)
                stage_cross.append(cross if cross is not None else Module())
                stage_self.append(self_ if self_ is not None else Module())
            self.down_blocks.append(stage_blocks)
            self.down_cross.append(stage_cross)
            self.down_self.append(stage_self)
            if s < nstages - 1:
                self.downsamples.append(Conv2d(w, w, 3, rng, stride=2, padding=1, dtype=dtype))
            prev = w

        wmid = widths[-1]
        self.mid1 = ResBlock(wmid, wmid, cond_dim, rng, dtype)
        self.mid2 = ResBlock(wmid, wmid, cond_dim, rng, dtype)

        self.up_blocks = ModuleList()
        self.up_cross = ModuleList()
        self.up_self = ModuleList()
        self.upsamples = ModuleList()
        prev = wmid
        for s in reversed(range(nstages)):
            w = widths[s]
            stage_blocks, stage_cross, stage_self = ModuleList(), ModuleList(), ModuleList()
            for b in range(blocks_per_stage[s]):
                stage_blocks.append(ResBlock(prev + w if b == 0 else 2 * w, w, cond_dim, rng, dtype))
                cross, self_ = attn_pair(s, w)
                stage_cross.append(cross if cross is not None else Module())
                stage_self.append(self_ if self_ is not None else Module())
            self.up_blocks.append(stage_blocks)
            self.up_cross.append(stage_cross)
            self.up_self.append(stage_self)
            if s > 0:
                self.upsamples.append(Conv2d(w, widths[s - 1], 3, rng, dtype=dtype))
                prev = widths[s - 1]
            else:
                prev = w

        self.out_norm = GroupNorm(widths[0], dtype=dtype)
        self.out_conv = Conv2d(widths[0], out_channels, 3, rng, dtype=dtype, zero_init=True)

    def __call__(self, x, cond_vec, tokens, mask):
        nstages = len(self.widths)
        h = self.stem(x)
        skips = []
        for s in range(nstages):
            for b in range(self.blocks_per_stage[s]):
                h = self.down_blocks[s][b](h, cond_vec)
                if s in self.cross_stages:
                    h = self.down_cross[s][b](h, tokens, mask)
                if s in self.self_stages:
                    h = self.down_self[s][b](h)
                skips.append(h)
            if s < nstages - 1:
                h = self.downsamples[s](h)

        h = self.mid1(h, cond_vec)
        h = self.mid2(h, cond_vec)

        for i, s in enumerate(reversed(range(nstages))):
            for b in range(self.blocks_per_stage[s]):
                h = self.up_blocks[i][b](ag.concat([h, skips.pop()], axis=1), cond_vec)
                if s in self.cross_stages:
                    h = self.up_cross[i][b](h, tokens, mask)
                if s in self.self_stages:
                    h = self.up_self[i][b](h)
            if s > 0:
                h = self.upsamples[i](ag.upsample_nearest2(h))

        return self.out_conv(ag.silu(self.out_norm(h)))


def _cond_arrays(cond, batch, dtype):
    """Accept a single TextConditioning or a batch-shaped one; return (B,T,E), (B,T), (B,E)."""
    tokens = np.asarray(cond.token_embeddings, dtype=dtype)
    mask = np.asarray(cond.mask, dtype=bool)
    pooled = np.asarray(cond.pooled, dtype=dtype)
    if tokens.ndim == 2:
        tokens = np.broadcast_to(tokens, (batch,) + tokens.shape)
        mask = np.broadcast_to(mask, (batch,) + mask.shape)
        pooled = np.broadcast_to(pooled, (batch,) + pooled.shape)
    if tokens.shape[0] != batch or mask.shape[0] != batch or pooled.shape[0] != batch:
        raise ValueError("conditioning batch size does not match input batch")
    return tokens, mask, pooled


def _as_batch(z_t):
    z = np.asarray(z_t)
    if z.ndim == 3:
        return z[None], True
    if z.ndim == 4:
        return z, False
    raise ValueError(f"expected (C,H,W) or (B,C,H,W) input, got shape {z.shape}")


def _per_batch(vals, bsz, name):
    arr = np.asarray(vals, dtype=np.float64).reshape(-1)
    if arr.size == 1:
        return np.full(bsz, arr[0])
    if arr.size == bsz:
        return arr
    raise ValueError(f"{name} must be a scalar or one value per batch element")


class BaseUNet(Module):
    def __init__(self, config: BaseUNetConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.Generator(np.random.PCG64(seed))
        cond_dim = 2 * config.embed_dim
        self.cond_embed = _CondEmbed(config.embed_dim, cond_dim, rng, self.dtype)
        self.core = _UNetCore(
            stem_in=config.in_channels,
            out_channels=config.in_channels,
            widths=config.widths(),
            blocks_per_stage=_normalize_blocks(config.res_blocks_per_stage, config.num_stages),
            cond_dim=cond_dim,
            cross_stages=config.cross_attn_stages,
            self_stages=(),
            text_dim=config.embed_dim,
            head_dim=config.head_dim,
            rng=rng,
            dtype=self.dtype,
        )
        logger.info("BaseUNet constructed: %d parameters", self.parameter_count())

    def __call__(self, z_t, t, cond):
        z, squeeze = _as_batch(z_t)
        bsz, _, height, width = z.shape
        div = 2 ** (self.config.num_stages - 1)
        if height % div or width % div:
            raise ValueError(f"spatial size {height}x{width} not divisible by {div}")
        t = _per_batch(t, bsz, "t")
        tokens, mask, pooled = _cond_arrays(cond, bsz, self.dtype)
        cond_vec = self.cond_embed(t, pooled, self.dtype)
        out = self.core(ag.as_tensor(z, dtype=self.dtype), cond_vec, ag.as_tensor(tokens), mask)
        return _maybe_squeeze(out, squeeze)


class SRUNet(Module):
    def __init__(self, config: SRUNetConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.image_channels = config.in_channels // 2
        rng = np.random.Generator(np.random.PCG64(seed))
        cond_dim = 2 * config.embed_dim
        self.cond_embed = _CondEmbed(config.embed_dim, cond_dim, rng, self.dtype)
        self.aug_lin1 = Linear(config.embed_dim, cond_dim, rng, dtype=self.dtype)
        self.aug_lin2 = Linear(cond_dim, cond_dim, rng, dtype=self.dtype, zero_init=True)
        self.core = _UNetCore(
            stem_in=config.in_channels,
            out_channels=self.image_channels,
            widths=config.widths(),
            blocks_per_stage=_normalize_blocks(config.res_blocks_per_stage, config.num_stages),
            cond_dim=cond_dim,
            cross_stages=config.cross_attn_stages,
            self_stages=config.self_attn_stages,
            text_dim=config.embed_dim,
            head_dim=config.head_dim,
            rng=rng,
            dtype=self.dtype,
        )
        logger.info("SRUNet constructed: %d parameters", self.parameter_count())

    def __call__(self, z_t, t, cond, lr_image, aug_level):
        z, squeeze = _as_batch(z_t)
        bsz, _, height, width = z.shape
        div = 2 ** (self.config.num_stages - 1)
        if height % div or width % div:
            raise ValueError(f"spatial size {height}x{width} not divisible by {div}")
        lr = np.asarray(lr_image, dtype=self.dtype)
        if lr.ndim == 3:
            lr = np.broadcast_to(lr, (bsz,) + lr.shape)
        sf = self.config.scale_factor
        if lr.shape[2] * sf != height or lr.shape[3] * sf != width:
            raise ValueError(
                f"LR size {lr.shape[2]}x{lr.shape[3]} does not match HR {height}x{width} at scale {sf}")
        t = _per_batch(t, bsz, "t")
        aug = _per_batch(aug_level, bsz, "aug_level")
        tokens, mask, pooled = _cond_arrays(cond, bsz, self.dtype)

        cond_vec = self.cond_embed(t, pooled, self.dtype)
        aemb = sinusoidal_embedding(aug, self.config.embed_dim, dtype=self.dtype)
        cond_vec = cond_vec + self.aug_lin2(ag.silu(self.aug_lin1(aemb)))

        lr_up = bilinear_upsample(lr, sf)
        x = np.concatenate([z.astype(self.dtype), lr_up], axis=1)
        out = self.core(ag.as_tensor(x), cond_vec, ag.as_tensor(tokens), mask)
        return _maybe_squeeze(out, squeeze)


def _maybe_squeeze(out, squeeze):
    if not squeeze:
        return out
    return ag.reshape(out, out.shape[1:])


def bilinear_upsample(img, factor):
    """Bilinear upsampling by an integer factor, NCHW ndarray (not differentiated)."""
    b, c, h, w = img.shape
    oh, ow = h * factor, w * factor
    ys = (np.arange(oh) + 0.5) / factor - 0.5
    xs = (np.arange(ow) + 0.5) / factor - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(img.dtype)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(img.dtype)
    top = img[:, :, y0][:, :, :, x0] * (1 - wx) + img[:, :, y0][:, :, :, x1] * wx
    bot = img[:, :, y1][:, :, :, x0] * (1 - wx) + img[:, :, y1][:, :, :, x1] * wx
    wy = wy[None, None, :, None]
    return top * (1 - wy) + bot * wy


def parameter_count(config) -> int:
    """Exact trainable-scalar count for a network config."""
    if isinstance(config, BaseUNetConfig):
        return BaseUNet(config, seed=0).parameter_count()
    if isinstance(config, SRUNetConfig):
        return SRUNet(config, seed=0).parameter_count()
    raise ValueError(f"unsupported config type {type(config).__name__}")
