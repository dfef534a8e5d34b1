"""Dual-decoder segmentation network.

A shared residual encoder feeds two U-Net-style decoders.  Encoder features
are split along channels and projected into two streams: ``f_r`` (lesion
related) for the segmentation decoder and ``f_o`` (everything else) for the
background decoder.  The background decoder's prediction is reversed into an
uncertainty map that spatially gates ``f_r`` before segmentation decoding, so
the segmentation decoder concentrates on regions the background decoder could
not claim.  Both the feature split (``ablate_fd``) and the gating
(``ablate_spm``) can be switched off to reproduce the ablation variants; a
plain encoder-decoder (`SingleDecoderNet`) serves the baselines.

Feature stages are passed around as plain lists ordered shallow to deep;
stage ``l`` has spatial size H/2^(l+1) and ``stage_widths[l]`` channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

EncoderFeatures = List[torch.Tensor]


@dataclass(frozen=True)
class NetConfig:
    """Architecture switches.  Defaults give the desk-scale model (~0.9M params)."""

    stage_widths: Tuple[int, ...] = (16, 32, 64, 128)
    ablate_fd: bool = False        # skip the channel split; both decoders see raw features
    ablate_spm: bool = False       # skip uncertainty gating of f_r
    split_all_stages: bool = True  # False: disentangle/gate only the bottleneck stage
    detach_uncertainty: bool = False
    init_seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.stage_widths)
        object.__setattr__(self, "stage_widths", widths)
        if len(widths) < 3:
            raise ValueError("need at least 3 encoder stages")
        if any(w % 2 for w in widths):
            raise ValueError(f"stage widths must be even, got {widths}")
        if any(b >= a for b, a in zip(widths, widths[1:])):
            raise ValueError(f"stage widths must strictly increase, got {widths}")

    @property
    def depth(self) -> int:
        return len(self.stage_widths)


@dataclass
class ModelOutput:
    """Per-batch maps, all (B, H, W).  uncertainty = 1 - sigmoid(bg_logits)."""

    seg_logits: torch.Tensor
    bg_logits: Optional[torch.Tensor] = None
    uncertainty: Optional[torch.Tensor] = None


def uncertainty_from_background(bg_logits: torch.Tensor) -> torch.Tensor:
    """Reverse the background prediction: u = 1 - sigmoid(bg_logits), in (0,1)."""
    return 1.0 - torch.sigmoid(bg_logits)


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(4, channels), channels)


class ResBlock(nn.Module):
    """Two 3x3 convs with a projected residual; stride applies to the first conv."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm1 = _gn(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = _gn(c_out)
        self.proj = (nn.Conv2d(c_in, c_out, 1, stride=stride)
                     if stride != 1 or c_in != c_out else nn.Identity())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.proj(x))


class Encoder(nn.Module):
    """Residual stages, each halving the resolution."""

    def __init__(self, widths: Tuple[int, ...], in_channels: int = 1):
        super().__init__()
        chans = (in_channels,) + widths
        self.stages = nn.ModuleList(
            ResBlock(chans[i], chans[i + 1], stride=2) for i in range(len(widths)))

    def forward(self, x: torch.Tensor) -> EncoderFeatures:
        depth = len(self.stages)
        h, w = x.shape[-2:]
        if h % (1 << depth) or w % (1 << depth):
            raise ValueError(f"input {h}x{w} not divisible by 2^{depth}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class _DoubleConv(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = _gn(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = _gn(c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class Decoder(nn.Module):
    """U-Net decoder: upsample x2 (nearest), concatenate skip, double conv; 1-channel head."""

    def __init__(self, widths: Tuple[int, ...]):
        super().__init__()
        self.blocks = nn.ModuleList(
            _DoubleConv(widths[i + 1] + widths[i], widths[i])
            for i in reversed(range(len(widths) - 1)))
        self.final = _DoubleConv(widths[0], widths[0])
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, feats: EncoderFeatures) -> torch.Tensor:
        x = feats[-1]
        for block, skip in zip(self.blocks, reversed(feats[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.head(self.final(x))


def _init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic fan-in-scaled init from a private generator (matches torch defaults)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                bound = 1.0 / math.sqrt(m.weight[0].numel())
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


class DualDecoderNet(nn.Module):
    """Full model: encode -> disentangle -> background decode -> gate -> segment."""

    def __init__(self, cfg: NetConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        self.encoder = Encoder(widths, in_channels)
        if not cfg.ablate_fd:
            split = range(len(widths)) if cfg.split_all_stages else [len(widths) - 1]
            self.split_stages = sorted(split)
            self.proj_r = nn.ModuleDict(
                {str(i): nn.Conv2d(widths[i] // 2, widths[i], 1) for i in self.split_stages})
            self.proj_o = nn.ModuleDict(
                {str(i): nn.Conv2d(widths[i] // 2, widths[i], 1) for i in self.split_stages})
        else:
            self.split_stages = []
        self.dec_bg = Decoder(widths)
        self.dec_seg = Decoder(widths)
        _init_parameters(self, cfg.init_seed)

    def encode(self, image: torch.Tensor) -> EncoderFeatures:
        return self.encoder(image)

    def disentangle(self, feats: EncoderFeatures) -> Tuple[EncoderFeatures, EncoderFeatures]:
        """Split each stage by channel and project the halves back to full width.

        Stages outside the configured split (all of them under ``ablate_fd``)
        are passed through unchanged to both streams.
        """
        if self.cfg.ablate_fd:
            return list(feats), list(feats)
        f_r, f_o = list(feats), list(feats)
        for i in self.split_stages:
            c = feats[i].shape[1]
            if c % 2:
                raise ValueError(f"stage {i} has odd channel count {c}")
            half = c // 2
            f_r[i] = self.proj_r[str(i)](feats[i][:, :half])
            f_o[i] = self.proj_o[str(i)](feats[i][:, half:])
        return f_r, f_o

    def decode_background(self, f_o: EncoderFeatures) -> torch.Tensor:
        return self.dec_bg(f_o).squeeze(1)

    def prompt(self, f_r: EncoderFeatures, uncertainty: torch.Tensor) -> EncoderFeatures:
        """Gate f_r stages by the uncertainty map (resized bilinearly per stage)."""
        if self.cfg.ablate_spm:
            return list(f_r)
        u = uncertainty.unsqueeze(1)
        stages = range(len(f_r)) if self.cfg.split_all_stages else [len(f_r) - 1]
        out = list(f_r)
        for i in stages:
            u_i = F.interpolate(u, size=f_r[i].shape[-2:], mode="bilinear",
                                align_corners=False)
            out[i] = f_r[i] * u_i
        return out

    def forward(self, image: torch.Tensor) -> ModelOutput:
        if image.ndim == 3:
            image = image.unsqueeze(1)
        feats = self.encode(image)
        f_r, f_o = self.disentangle(feats)
        bg_logits = self.decode_background(f_o)
        uncertainty = uncertainty_from_background(bg_logits)
        gate = uncertainty.detach() if self.cfg.detach_uncertainty else uncertainty
        seg_logits = self.dec_seg(self.prompt(f_r, gate)).squeeze(1)
        return ModelOutput(seg_logits=seg_logits, bg_logits=bg_logits,
                           uncertainty=uncertainty)


class SingleDecoderNet(nn.Module):
    """Baseline encoder-decoder without background branch, split, or gating."""

    def __init__(self, cfg: NetConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.stage_widths, in_channels)
        self.dec_seg = Decoder(cfg.stage_widths)
        _init_parameters(self, cfg.init_seed)

    def forward(self, image: torch.Tensor) -> ModelOutput:
        if image.ndim == 3:
            image = image.unsqueeze(1)
        seg_logits = self.dec_seg(self.encoder(image)).squeeze(1)
        return ModelOutput(seg_logits=seg_logits)
