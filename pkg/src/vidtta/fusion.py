"""Cross-frame attention add-on and reliability-aware logit fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

FUSION_EPS = 1e-12


class AddOn(nn.Module):
    """Query/key projections for attention from the current frame to the previous one.

    Projections start at identity plus N(0, init_std^2) noise drawn from ``seed``.
    """

    def __init__(self, feat_dim: int, proj_dim: int | None = None, seed: int = 0, init_std: float = 0.01, scale: bool = False):
        super().__init__()
        proj_dim = proj_dim or feat_dim
        g = torch.Generator().manual_seed(seed)
        eye = torch.eye(feat_dim, proj_dim)
        self.proj_q = nn.Parameter(eye + init_std * torch.randn(feat_dim, proj_dim, generator=g))
        self.proj_k = nn.Parameter(eye + init_std * torch.randn(feat_dim, proj_dim, generator=g))
        self.scale = scale

    def forward(self, feats_t: torch.Tensor, feats_prev: torch.Tensor, logits_prev: torch.Tensor) -> torch.Tensor:
        return temporal_attention(self, feats_t, feats_prev, logits_prev)


def attention_weights(addon: AddOn, feats_t: torch.Tensor, feats_prev: torch.Tensor) -> torch.Tensor:
    """Row-stochastic (hw, hw) matrix: queries from ``feats_t``, keys from ``feats_prev``."""
    if feats_t.shape != feats_prev.shape:
        raise ValueError(f"feature maps differ in shape: {tuple(feats_t.shape)} vs {tuple(feats_prev.shape)}")
    if not (torch.isfinite(addon.proj_q).all() and torch.isfinite(addon.proj_k).all()):
        raise ValueError("non-finite add-on parameters")
    D = feats_t.shape[0]
    q = feats_t.reshape(D, -1).T @ addon.proj_q
    k = feats_prev.reshape(D, -1).T @ addon.proj_k
    scores = q @ k.T
    if addon.scale:
        scores = scores / math.sqrt(q.shape[1])
    return torch.softmax(scores, dim=1)


def temporal_attention(addon: AddOn, feats_t: torch.Tensor, feats_prev: torch.Tensor, logits_prev: torch.Tensor) -> torch.Tensor:
    """Previous-frame logits re-sampled onto the current frame via attention.

    feats: (D, h, w); logits_prev: (K, H, W). Values are the area-averaged
    logits at feature resolution; the result is upsampled back to (K, H, W).
    """
    D, h, w = feats_t.shape
    K, H, W = logits_prev.shape
    if H % h or W % w or H // h != W // w:
        raise ValueError(f"logit size {H}x{W} is not an integer multiple of feature size {h}x{w}")
    attn = attention_weights(addon, feats_t, feats_prev)
    values = F.avg_pool2d(logits_prev.unsqueeze(0), kernel_size=H // h).reshape(K, h * w).T
    out = (attn @ values).T.reshape(1, K, h, w)
    if (h, w) != (H, W):
        out = F.interpolate(out, size=(H, W), mode="bilinear", align_corners=False)
    return out[0]


@dataclass
class FusedLogits:
    logits: torch.Tensor  # (K, H, W)
    weight_current: torch.Tensor  # (H, W) weight on the current-frame logits
    fused: torch.Tensor  # (H, W) bool, True where the add-on contributed

    @property
    def fused_fraction(self) -> float:
        return float(self.fused.float().mean())


def fuse_logits(
    logits_t: torch.Tensor,
    logits_addon: torch.Tensor,
    rel_t: torch.Tensor,
    rel_addon: torch.Tensor,
    tau: float,
) -> FusedLogits:
    """Keep ``logits_t`` where ``rel_t >= tau``; elsewhere blend by relative reliability."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if logits_t.shape != logits_addon.shape:
        raise ValueError(f"logit maps differ: {tuple(logits_t.shape)} vs {tuple(logits_addon.shape)}")
    if rel_t.shape != logits_t.shape[1:] or rel_addon.shape != rel_t.shape:
        raise ValueError("reliability maps must match the logit spatial size")
    denom = rel_t + rel_addon
    degenerate = denom < FUSION_EPS
    keep = (rel_t >= tau) | degenerate
    safe = torch.where(degenerate, torch.ones_like(denom), denom)
    w_t = torch.where(keep, torch.ones_like(rel_t), rel_t / safe)
    w_a = torch.where(keep, torch.zeros_like(rel_t), rel_addon / safe)
    fused = torch.where(keep, logits_t, w_t * logits_t + w_a * logits_addon)
    return FusedLogits(logits=fused, weight_current=w_t, fused=~keep)
