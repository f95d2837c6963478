"""Toy latent-diffusion UNet with a query branch and shared-weight support branches.

Every UNet block is SelfAttn -> CrossAttn -> FFN with residual connections. Under FSA the query
branch's self-attention also reads the support branches' keys and values at the same block; under
TCA the supports are tokenised and enter through the cross-attention next to the null prompt token.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .attention import (
    Attention,
    attend_with_supports,
    cross_attn,
    project_kv,
    qkv_fusion_attn,
    sample_support_kv,
    self_attn,
)
from .codec import encode, mask_to_rgb, resize_mask
from .errors import ConfigurationError, ShapeMismatchError
from .models import FusionStrategy, Injection, Interaction, MultiplicationDomain, SupervisionForm, UNetConfig


@dataclass(frozen=True)
class PreparedSupport:
    """One support image after mask injection.

    ``latent`` feeds the support branch (FSA), ``gate_mask`` gates its keys per block,
    ``patches``/``patch_gate`` are the TCA token-encoder inputs.
    """

    latent: torch.Tensor | None = None
    gate_mask: torch.Tensor | None = None
    patches: torch.Tensor | None = None
    patch_gate: torch.Tensor | None = None

    def to(self, dtype: torch.dtype) -> "PreparedSupport":
        return replace(
            self,
            latent=None if self.latent is None else self.latent.to(dtype),
            patches=None if self.patches is None else self.patches.to(dtype),
        )


def adapt_input_layer(original_kernel: torch.Tensor, duplication_factor: int = 2) -> torch.Tensor:
    """Stacks copies of a kernel along its input-channel axis, each scaled by 1/factor."""
    repeats = [1] * original_kernel.dim()
    repeats[1] = duplication_factor
    return original_kernel.repeat(*repeats) / duplication_factor


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(3, H, W)`` -> ``(num_patches, 3·p²)`` row-major patch vectors."""
    return F.unfold(image[None], kernel_size=patch_size, stride=patch_size)[0].transpose(0, 1)


def prepare_support(image: torch.Tensor, mask: torch.Tensor, cfg: UNetConfig) -> PreparedSupport:
    if tuple(mask.shape) != tuple(image.shape[-2:]):
        raise ShapeMismatchError(
            f"support mask {tuple(mask.shape)} does not match image {tuple(image.shape[-2:])}"
        )
    mask_rgb = mask_to_rgb(mask, image, SupervisionForm.WHITE_ON_BLACK)
    factor = cfg.codec_factor

    if cfg.interaction is Interaction.TCA:
        return _prepare_tokens(image, mask, mask_rgb, cfg)

    if cfg.injection is Injection.CONCATENATION:
        return PreparedSupport(latent=torch.cat([encode(image, factor), encode(mask_rgb, factor)]))
    if cfg.injection is Injection.MULTIPLICATION:
        if cfg.multiplication_domain is MultiplicationDomain.RGB:
            masked = encode(image * mask_rgb, factor)
        else:
            latent_mask = resize_mask(mask, cfg.latent_size).to(image.dtype)
            masked = encode(image, factor) * latent_mask
        return PreparedSupport(latent=torch.cat([masked, masked]))
    if cfg.injection is Injection.ATTENTION_MASK:
        latent = encode(image, factor)
        return PreparedSupport(latent=torch.cat([latent, latent]), gate_mask=mask.bool())
    blended = encode(0.5 * image + 0.5 * mask_rgb, factor)
    return PreparedSupport(latent=torch.cat([blended, blended]))


def _prepare_tokens(
    image: torch.Tensor, mask: torch.Tensor, mask_rgb: torch.Tensor, cfg: UNetConfig
) -> PreparedSupport:
    size = cfg.patch_size
    grid = (image.shape[-2] // size, image.shape[-1] // size)
    if cfg.injection is Injection.CONCATENATION:
        return PreparedSupport(patches=torch.cat([patchify(image, size), patchify(mask_rgb, size)]))
    if cfg.injection is Injection.MULTIPLICATION:
        if cfg.multiplication_domain is MultiplicationDomain.RGB:
            return PreparedSupport(patches=patchify(image * mask_rgb, size))
        patch_mask = resize_mask(mask, grid).flatten().to(image.dtype)
        return PreparedSupport(patches=patchify(image, size) * patch_mask[:, None])
    if cfg.injection is Injection.ATTENTION_MASK:
        return PreparedSupport(patches=patchify(image, size), patch_gate=resize_mask(mask, grid).flatten())
    return PreparedSupport(patches=patchify(0.5 * image + 0.5 * mask_rgb, size))


def timestep_embedding(timestep: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = timestep * freqs
    return torch.cat([torch.cos(args), torch.sin(args)]).to(dtype)


class TimeEmbedding(nn.Module):
    def __init__(self, width: int) -> None:
        super().__init__()
        self.width = width
        self.linear_1 = nn.Linear(width, 4 * width)
        self.linear_2 = nn.Linear(4 * width, 4 * width)

    def forward(self, timestep: int) -> torch.Tensor:
        emb = timestep_embedding(timestep, self.width, self.linear_1.weight.dtype)
        return self.linear_2(F.silu(self.linear_1(emb)))


class ResBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int | None, linear_only: bool = False) -> None:
        super().__init__()
        self.norm_1 = nn.Identity() if linear_only else nn.GroupNorm(8, channels)
        self.conv_1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.time_proj = nn.Linear(temb_dim, channels) if temb_dim else None
        self.norm_2 = nn.Identity() if linear_only else nn.GroupNorm(8, channels)
        self.conv_2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.act = nn.Identity() if linear_only else nn.SiLU()

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None) -> torch.Tensor:
        h = self.conv_1(self.act(self.norm_1(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(self.act(temb))[:, None, None]
        h = self.conv_2(self.act(self.norm_2(h)))
        return x + h


class TransformerBlock(nn.Module):
    """SelfAttn -> CrossAttn -> FFN, each pre-normed and wrapped in a residual connection."""

    def __init__(self, width: int, context_dim: int, heads: int, dim_head: int) -> None:
        super().__init__()
        self.norm_1 = nn.LayerNorm(width)
        self.attn_1 = Attention(width, heads=heads, dim_head=dim_head)
        self.norm_2 = nn.LayerNorm(width)
        self.attn_2 = Attention(width, context_dim=context_dim, heads=heads, dim_head=dim_head)
        self.norm_3 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(
        self,
        x: torch.Tensor,
        prompt_tokens: torch.Tensor,
        prompt_gate: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Single-branch block without any support interaction."""
        x = x + self_attn(self.norm_1(x), self.attn_1)
        return self._cross_and_ff(x, prompt_tokens, prompt_gate)

    def forward_dual(
        self,
        query: torch.Tensor,
        supports: torch.Tensor,
        query_tokens: torch.Tensor,
        support_tokens: torch.Tensor,
        *,
        query_token_gate: torch.Tensor | None = None,
        support_gates: torch.Tensor | None = None,
        fuse: bool = True,
        strategy: FusionStrategy = FusionStrategy.KV,
        kv_sample_seed: int | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Query ``(L, C)`` plus stacked supports ``(n, L, C)`` through one block."""
        if supports.shape[0] == 0:
            return self.forward(query, query_tokens, query_token_gate), supports

        h_q = self.norm_1(query)
        h_s = self.norm_1(supports)
        if not fuse:
            q_attn = self_attn(h_q, self.attn_1)
            s_attn = self_attn(h_s, self.attn_1)
        else:
            gates = [None] * h_s.shape[0] if support_gates is None else list(support_gates)
            kvs = [project_kv(h_s[i], self.attn_1, i, gates[i]) for i in range(h_s.shape[0])]
            if kv_sample_seed is not None:
                kvs = [sample_support_kv(kvs, h_q.shape[0], kv_sample_seed)]
            q_attn = attend_with_supports(h_q, kvs, self.attn_1)
            if strategy is FusionStrategy.QKV:
                _, s_attn = qkv_fusion_attn(
                    h_q, list(h_s), self.attn_1, None if support_gates is None else gates
                )
            else:
                s_attn = self_attn(h_s, self.attn_1)

        query = self._cross_and_ff(query + q_attn, query_tokens, query_token_gate)
        supports = self._cross_and_ff(supports + s_attn, support_tokens, None)
        return query, supports

    def _cross_and_ff(
        self, x: torch.Tensor, tokens: torch.Tensor, gate: torch.Tensor | None
    ) -> torch.Tensor:
        x = x + cross_attn(self.norm_2(x), tokens, self.attn_2, gate)
        return x + self.ff(self.norm_3(x))


def block_forward(x: torch.Tensor, prompt_tokens: torch.Tensor, params: TransformerBlock) -> torch.Tensor:
    width = params.attn_1.query_dim
    if x.shape[-1] != width:
        raise ShapeMismatchError(f"feature width {x.shape[-1]} does not match block width {width}")
    return params(x, prompt_tokens)


class TokenEncoder(nn.Module):
    """Patchify -> linear projection -> learned position embedding."""

    def __init__(self, patch_dim: int, width: int, num_patches: int) -> None:
        super().__init__()
        self.num_patches = num_patches
        self.proj = nn.Linear(patch_dim, width)
        self.pos_embedding = nn.Parameter(torch.randn(num_patches, width) * 0.02)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        tokens = self.proj(patches).unflatten(0, (-1, self.num_patches)) + self.pos_embedding
        return tokens.flatten(0, 1)


class FewShotUNet(nn.Module):
    """Shared-weight UNet. Support and query branches run through the same parameters."""

    def __init__(self, cfg: UNetConfig) -> None:
        super().__init__()
        self.cfg = cfg
        width = cfg.widths[0]
        channels = cfg.latent_channels
        temb_dim = 4 * width if cfg.time_embedding else None
        levels = len(cfg.widths)

        self.time_embedding = TimeEmbedding(width) if cfg.time_embedding else None
        self.null_token = nn.Parameter(torch.randn(1, width) * 0.02)
        self.token_encoder = (
            TokenEncoder(3 * cfg.patch_size**2, width, cfg.num_patches)
            if cfg.interaction is Interaction.TCA
            else None
        )

        base_conv = nn.Conv2d(channels, width, kernel_size=3, padding=1)
        self.conv_in = nn.Conv2d(2 * channels, width, kernel_size=3, padding=1)
        with torch.no_grad():
            self.conv_in.weight.copy_(adapt_input_layer(base_conv.weight))
            self.conv_in.bias.copy_(base_conv.bias)

        def make_level() -> nn.ModuleList:
            return nn.ModuleList(
                nn.ModuleList(
                    [
                        ResBlock(width, temb_dim, cfg.linear_only),
                        TransformerBlock(width, width, cfg.heads, cfg.dim_head),
                    ]
                )
                for _ in range(cfg.blocks_per_level)
            )

        self.down = nn.ModuleList(make_level() for _ in range(levels))
        self.downsample = nn.ModuleList(
            nn.Conv2d(width, width, kernel_size=3, stride=2, padding=1) for _ in range(levels - 1)
        )
        self.mid = ResBlock(width, temb_dim, cfg.linear_only)
        self.upsample = nn.ModuleList(
            nn.Conv2d(width, width, kernel_size=3, padding=1) for _ in range(levels - 1)
        )
        self.up = nn.ModuleList(make_level() for _ in range(levels))
        self.norm_out = nn.Identity() if cfg.linear_only else nn.GroupNorm(8, width)
        self.act_out = nn.Identity() if cfg.linear_only else nn.SiLU()
        self.conv_out = nn.Conv2d(width, channels, kernel_size=3, padding=1)

    @property
    def num_transformer_blocks(self) -> int:
        return 2 * len(self.cfg.widths) * self.cfg.blocks_per_level

    def forward(
        self,
        query_input: torch.Tensor,
        supports: Sequence[PreparedSupport] = (),
        timestep: int | None = None,
        kv_sample_seed: int | None = None,
    ) -> torch.Tensor:
        """Dual-branch forward; returns the query branch's predicted mask latent ``(c, h, w)``."""
        cfg = self.cfg
        channels = cfg.latent_channels
        if query_input.shape != (2 * channels, *cfg.latent_size):
            raise ShapeMismatchError(
                f"query input {tuple(query_input.shape)} != {(2 * channels, *cfg.latent_size)}"
            )
        if cfg.time_embedding and timestep is None:
            raise ConfigurationError("this model was built with a time embedding; pass a timestep")

        temb = self.time_embedding(timestep) if self.time_embedding is not None else None
        null = self.null_token
        query_tokens, query_token_gate = null, None

        if cfg.interaction is Interaction.TCA:
            branch_latents = [query_input]
            if supports:
                query_tokens, query_token_gate = self._support_tokens(supports)
        else:
            branch_latents = [query_input, *(self._support_latent(s) for s in supports)]
        support_masks = [s.gate_mask for s in supports] if cfg.interaction is Interaction.FSA else []

        h = self.conv_in(torch.stack(branch_latents))
        block_index = 0
        skips: list[torch.Tensor] = []
        for level, blocks in enumerate(self.down):
            for res, attn in blocks:
                h = res(h, temb)
                h = self._run_block(
                    attn, h, block_index, query_tokens, query_token_gate, support_masks, kv_sample_seed
                )
                block_index += 1
            skips.append(h)
            if level < len(self.downsample):
                h = self.downsample[level](h)

        h = self.mid(h, temb)

        for offset, blocks in enumerate(self.up):
            level = len(self.up) - 1 - offset
            if offset > 0:
                h = self.upsample[offset - 1](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = h + skips[level]
            for res, attn in blocks:
                h = res(h, temb)
                h = self._run_block(
                    attn, h, block_index, query_tokens, query_token_gate, support_masks, kv_sample_seed
                )
                block_index += 1

        out = self.conv_out(self.act_out(self.norm_out(h)))
        return out[0]

    def _support_latent(self, support: PreparedSupport) -> torch.Tensor:
        expected = (2 * self.cfg.latent_channels, *self.cfg.latent_size)
        if support.latent is None or tuple(support.latent.shape) != expected:
            raise ShapeMismatchError(f"support latent must have shape {expected}")
        return support.latent

    def _support_tokens(
        self, supports: Sequence[PreparedSupport]
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        assert self.token_encoder is not None
        pieces = [self.null_token]
        gates = [torch.ones(1, dtype=torch.bool)]
        for support in supports:
            if support.patches is None:
                raise ShapeMismatchError("TCA supports must carry patch vectors")
            tokens = self.token_encoder(support.patches)
            pieces.append(tokens)
            gates.append(
                support.patch_gate.bool()
                if support.patch_gate is not None
                else torch.ones(tokens.shape[0], dtype=torch.bool)
            )
        gate = torch.cat(gates)
        return torch.cat(pieces), None if bool(gate.all()) else gate

    def _run_block(
        self,
        block: TransformerBlock,
        h: torch.Tensor,
        block_index: int,
        query_tokens: torch.Tensor,
        query_token_gate: torch.Tensor | None,
        support_masks: Sequence[torch.Tensor | None],
        kv_sample_seed: int | None,
    ) -> torch.Tensor:
        if self.cfg.linear_only:
            return h
        batch, width, height, grid_width = h.shape
        tokens = h.flatten(2).transpose(1, 2)

        support_gates = None
        if any(mask is not None for mask in support_masks):
            support_gates = torch.stack(
                [
                    resize_mask(mask, (height, grid_width)).flatten()
                    if mask is not None
                    else torch.ones(height * grid_width, dtype=torch.bool)
                    for mask in support_masks
                ]
            )
        fuse = self.cfg.fusion_layers is None or block_index in self.cfg.fusion_layers
        seed = None if kv_sample_seed is None else kv_sample_seed * 7919 + block_index
        query, supports = block.forward_dual(
            tokens[0],
            tokens[1:],
            query_tokens,
            self.null_token,
            query_token_gate=query_token_gate,
            support_gates=support_gates,
            fuse=fuse,
            strategy=self.cfg.fusion,
            kv_sample_seed=seed,
        )
        tokens = torch.cat([query[None], supports])
        return tokens.transpose(1, 2).reshape(batch, width, height, grid_width)
