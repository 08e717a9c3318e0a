"""Analytic gradients versus central finite differences, float64, 8x8 frames.

Derivatives use the fourth-order five-point central stencil so truncation
error stays far below the tolerance even on near-zero gradient components.

For each seeded case a tiny segmenter and add-on are drawn at random and four
scalars are differentiated with respect to every adapted parameter (decoder
and add-on): the distillation loss, the contrastive loss, their sum, and a
random linear functional of the fused logits. Each scalar is checked along
random directions and on random single coordinates.
"""

from __future__ import annotations

import torch

from vidtta.fusion import AddOn, fuse_logits
from vidtta.losses import Prototypes, contrastive_loss, distill_loss, downsample_nearest, total_loss, update_prototypes
from vidtta.segmenter import Segmenter, reliability_map

H = W = 8
K = 3
D = 4
STEP = 1e-4
N_DIRECTIONS = 2
N_COORDS = 4


def rel_err(a: float, b: float, floor: float = 1e-9) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _gap_tau(rel: torch.Tensor) -> float:
    """A threshold in the widest gap between reliability values near the middle."""
    v = torch.sort(rel.flatten()).values
    mids = (v[1:] + v[:-1]) / 2
    gaps = v[1:] - v[:-1]
    score = gaps - 0.5 * (mids - 0.5).abs()
    i = int(torch.argmax(score))
    return float(mids[i])


def build_case(seed: int):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    model = Segmenter(H, W, K, feat_dim=D, width_mult=2).double()
    addon = AddOn(D, seed=seed, init_std=0.3).double()
    momentum = Segmenter(H, W, K, feat_dim=D, width_mult=2).double()
    momentum.load_state_dict(model.state_dict())
    with torch.no_grad():
        for p in momentum.decoder.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    frames = torch.rand(2, 3, H, W, generator=g, dtype=torch.float64)
    masks = torch.zeros(2, H, W, dtype=torch.bool)
    masks[0, :4, :] = True
    masks[1, 4:, 2:7] = True
    labels = [int(torch.randint(0, K, (1,), generator=g)), int(torch.randint(0, K, (1,), generator=g))]
    weights = torch.randn(K, H, W, generator=g, dtype=torch.float64)
    stride = model.stride
    masks_feat = downsample_nearest(masks, stride)
    protos = Prototypes.empty(2, D)
    with torch.no_grad():
        f_mo, s_mo = momentum(frames)
        for t in range(2):
            update_prototypes(protos, f_mo[t], downsample_nearest(reliability_map(s_mo[t]), stride), masks_feat)
    with torch.no_grad():
        _, s = model(frames)
    tau = _gap_tau(reliability_map(s[1]))
    params = list(model.decoder.parameters()) + list(addon.parameters())

    def scalars():
        feats, logits = model(frames)
        s_add = addon(feats[1], feats[0], logits[0])
        d = distill_loss(logits[1], s_add, masks, labels)
        c = contrastive_loss(feats[1], protos, masks_feat)
        fused = fuse_logits(logits[1], s_add, reliability_map(logits[1]), reliability_map(s_add), tau)
        return {"distill": d, "contrastive": c, "total": total_loss(d, c), "fused": (weights * fused.logits).sum()}

    return params, scalars, g


def check_case(seed: int) -> dict[str, float]:
    """Max relative error per scalar for one seeded case."""
    params, scalars, g = build_case(seed)
    for p in params:
        p.requires_grad_(True)
    vals = scalars()
    grads = {}
    for name, v in vals.items():
        gs = torch.autograd.grad(v, params, allow_unused=True, retain_graph=True)
        grads[name] = torch.cat([(gg if gg is not None else torch.zeros_like(p)).flatten() for gg, p in zip(gs, params)])
    flat = torch.cat([p.detach().flatten() for p in params])
    n = flat.numel()

    def evaluate_at(vec):
        with torch.no_grad():
            off = 0
            for p in params:
                k = p.numel()
                p.copy_(vec[off : off + k].view_as(p))
                off += k
            out = {k: float(v) for k, v in scalars().items()}
        return out

    directions = [torch.randn(n, generator=g, dtype=torch.float64) for _ in range(N_DIRECTIONS)]
    directions = [d / d.norm() for d in directions]
    for i in torch.randperm(n, generator=g)[:N_COORDS].tolist():
        e = torch.zeros(n, dtype=torch.float64)
        e[i] = 1.0
        directions.append(e)
    worst = {name: 0.0 for name in vals}
    for d in directions:
        p1, m1 = evaluate_at(flat + STEP * d), evaluate_at(flat - STEP * d)
        p2, m2 = evaluate_at(flat + 2 * STEP * d), evaluate_at(flat - 2 * STEP * d)
        for name in vals:
            fd = (8 * (p1[name] - m1[name]) - (p2[name] - m2[name])) / (12 * STEP)
            an = float(grads[name] @ d)
            worst[name] = max(worst[name], rel_err(fd, an))
    evaluate_at(flat)
    return worst


def run_gradient_suite(num_cases: int = 50) -> dict[str, float]:
    worst: dict[str, float] = {}
    for seed in range(num_cases):
        for name, e in check_case(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    return worst
