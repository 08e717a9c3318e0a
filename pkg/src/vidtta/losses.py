"""Adaptation objective: masked distillation CE, prototype contrastive loss, EMA."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


def downsample_nearest(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Sample the centre-ish pixel of every ``factor`` x ``factor`` block (last two dims)."""
    if factor == 1:
        return x
    off = factor // 2
    return x[..., off::factor, off::factor]


def distill_loss(
    logits_t: torch.Tensor,
    logits_addon: torch.Tensor | None,
    masks: torch.Tensor,
    labels,
) -> torch.Tensor:
    """Summed pixel cross-entropy inside each labelled mask.

    logits_*: (K, H, W); masks: (N, H, W) bool; labels: N class indices.
    ``logits_addon`` is None for a frame without a predecessor.
    """
    labels = list(labels)
    if len(labels) != masks.shape[0]:
        raise ValueError("masks and labels are not aligned")
    if any(c is None or c < 0 for c in labels):
        raise ValueError("unlabelled mask in distillation targets")
    total = logits_t.new_zeros(())
    if not labels:
        return total
    logp_t = F.log_softmax(logits_t, dim=0)
    logp_a = F.log_softmax(logits_addon, dim=0) if logits_addon is not None else None
    for m, c in zip(masks, labels):
        if not m.any():
            continue
        total = total - logp_t[c][m].sum()
        if logp_a is not None:
            total = total - logp_a[c][m].sum()
    return total


@dataclass
class Prototypes:
    """Running reliability-weighted feature sums per object (momentum branch).

    ``vectors`` divides by the pixel count, not by the reliability mass.
    """

    running_sum: torch.Tensor  # (N, D)
    count: torch.Tensor  # (N,) int64
    object_ids: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, num_objects: int, feat_dim: int, dtype=torch.float64, object_ids=None) -> "Prototypes":
        return cls(
            running_sum=torch.zeros(num_objects, feat_dim, dtype=dtype),
            count=torch.zeros(num_objects, dtype=torch.int64),
            object_ids=list(object_ids) if object_ids is not None else list(range(num_objects)),
        )

    @property
    def defined(self) -> torch.Tensor:
        return self.count > 0

    def vectors(self) -> torch.Tensor:
        denom = self.count.clamp(min=1).to(self.running_sum.dtype).unsqueeze(1)
        return self.running_sum / denom


@torch.no_grad()
def update_prototypes(protos: Prototypes, feats_mo: torch.Tensor, rel_mo: torch.Tensor, masks: torch.Tensor) -> Prototypes:
    """Accumulate one frame. feats_mo: (D, h, w); rel_mo: (h, w); masks: (N, h, w) bool."""
    D = feats_mo.shape[0]
    P = rel_mo.numel()
    f = feats_mo.reshape(D, P).to(protos.running_sum.dtype)
    r = rel_mo.reshape(P).to(protos.running_sum.dtype)
    m = masks.reshape(masks.shape[0], P).to(protos.running_sum.dtype)
    protos.running_sum += (m * r) @ f.T
    protos.count += masks.reshape(masks.shape[0], P).sum(dim=1).to(torch.int64)
    return protos


def contrastive_loss(
    feats_t: torch.Tensor,
    protos: Prototypes,
    masks: torch.Tensor,
    normalize: bool = False,
) -> torch.Tensor:
    """Pixel-to-prototype InfoNCE over all defined prototypes.

    feats_t: (D, h, w) main-branch features; masks: (N, h, w) aligned with
    ``protos`` rows. Dot products are used as-is (no temperature).
    """
    total = feats_t.new_zeros(())
    defined = protos.defined
    if not bool(defined.any()):
        return total
    idx = torch.nonzero(defined).flatten()
    P = protos.vectors()[idx].to(feats_t.dtype)
    D = feats_t.shape[0]
    f = feats_t.reshape(D, -1)
    if normalize:
        f = F.normalize(f, dim=0)
        P = F.normalize(P, dim=1)
    pos = {int(i): j for j, i in enumerate(idx)}
    for i in range(masks.shape[0]):
        if i not in pos:
            continue
        m = masks[i].reshape(-1)
        if not m.any():
            continue
        logits = f[:, m].T @ P.T
        total = total - F.log_softmax(logits, dim=1)[:, pos[i]].sum()
    return total


def total_loss(distill: torch.Tensor, contra: torch.Tensor) -> torch.Tensor:
    return distill + contra


@torch.no_grad()
def ema_update(main: nn.Module, momentum: nn.Module, m: float) -> nn.Module:
    """theta_mo <- m * theta_mo + (1 - m) * theta, for every parameter."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {m}")
    src = dict(main.named_parameters())
    dst = dict(momentum.named_parameters())
    if src.keys() != dst.keys():
        raise ValueError("parameter names differ between main and momentum modules")
    for name, p_mo in dst.items():
        p = src[name]
        if p.shape != p_mo.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(p_mo.shape)}")
        p_mo.mul_(m).add_(p.detach(), alpha=1.0 - m)
    return momentum
