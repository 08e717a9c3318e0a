"""Hypothesis property tests for the stated invariants of every module."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vidtta.dataio import ClipSpec, ShapeSpec, generate_clip
from vidtta.fusion import AddOn, attention_weights, fuse_logits, temporal_attention
from vidtta.losses import Prototypes, contrastive_loss, distill_loss, update_prototypes
from vidtta.metrics import miou, mvc, wiou
from vidtta.propagation import GreedyIoUBackend, OracleBackend, Prompt, propagate
from vidtta.segmenter import reliability_map
from vidtta.targets import PromptConfig, assign_labels, class_scores, sample_prompts
from vidtta.propagation import SpatioTemporalMask

seeds = st.integers(0, 2**31 - 1)


def _rng(seed):
    return np.random.default_rng(seed)


def _label_maps(seed, T, H, W, K):
    r = _rng(seed)
    return r.integers(0, K, size=(T, H, W)), r.integers(0, K, size=(T, H, W))


# --- metrics --------------------------------------------------------------------


@given(seeds, st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(2, 5))
def test_metrics_permutation_invariant(seed, T, H, W, K):
    p, g = _label_maps(seed, T, H, W, K)
    perm = _rng(seed + 1).permutation(K)
    assert miou(perm[p], perm[g], K) == pytest.approx(miou(p, g, K), rel=1e-12)
    assert wiou(perm[p], perm[g], K) == pytest.approx(wiou(p, g, K), rel=1e-12)
    for n in range(1, T + 1):
        a, b = mvc(perm[p], perm[g], n), mvc(p, g, n)
        assert a == b or (np.isnan(a) and np.isnan(b))


@given(seeds, st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(2, 5))
def test_miou_symmetric(seed, T, H, W, K):
    p, g = _label_maps(seed, T, H, W, K)
    assert miou(p, g, K) == pytest.approx(miou(g, p, K), rel=1e-12)


@given(seeds, st.integers(1, 4), st.integers(2, 5), st.integers(2, 5), st.integers(2, 5))
def test_wiou_symmetric_when_class_histograms_match(seed, T, H, W, K):
    # wIoU weights classes by GT area, so a swap is only neutral when the
    # predicted and GT class histograms coincide (here: a spatial shuffle)
    r = _rng(seed)
    g = r.integers(0, K, size=(T, H, W))
    p = r.permutation(g.ravel()).reshape(g.shape)
    assert wiou(p, g, K) == pytest.approx(wiou(g, p, K), rel=1e-12)


@given(seeds, st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(2, 5))
def test_mvc_constant_maps(seed, T, H, W, K):
    r = _rng(seed)
    p = np.broadcast_to(r.integers(0, K, size=(H, W)), (T, H, W))
    g = np.broadcast_to(r.integers(0, K, size=(H, W)), (T, H, W))
    for n in range(1, T + 1):
        assert mvc(p, g, n) == 100.0


@given(seeds, st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(2, 5))
def test_metric_ranges(seed, T, H, W, K):
    p, g = _label_maps(seed, T, H, W, K)
    for v in (miou(p, g, K), wiou(p, g, K), mvc(p, g, 1)):
        assert 0.0 <= v <= 100.0


# --- reliability ----------------------------------------------------------------


@given(seeds, st.integers(2, 6), st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 20.0))
def test_reliability_range_shift_argmax(seed, K, H, W, scale):
    g = torch.Generator().manual_seed(seed % 2**31)
    logits = scale * torch.randn(K, H, W, generator=g, dtype=torch.float64)
    r = reliability_map(logits)
    assert float(r.min()) >= 0.0 and float(r.max()) <= 1.0
    shift = 50.0 * torch.randn(1, H, W, generator=g, dtype=torch.float64)
    assert torch.allclose(reliability_map(logits + shift), r, atol=1e-9)
    before = logits.argmax(0).clone()
    reliability_map(logits)
    assert torch.equal(logits.argmax(0), before)


# --- fusion ---------------------------------------------------------------------


def _fusion_inputs(seed, K, H, W):
    g = torch.Generator().manual_seed(seed % 2**31)
    s_t = 3 * torch.randn(K, H, W, generator=g, dtype=torch.float64)
    s_a = 3 * torch.randn(K, H, W, generator=g, dtype=torch.float64)
    return s_t, s_a, reliability_map(s_t), reliability_map(s_a)


@given(seeds, st.integers(2, 5), st.integers(1, 6), st.integers(1, 6), st.floats(0.0, 1.0))
def test_fusion_convex_and_exact_when_reliable(seed, K, H, W, tau):
    s_t, s_a, r_t, r_a = _fusion_inputs(seed, K, H, W)
    out = fuse_logits(s_t, s_a, r_t, r_a, tau)
    assert out.logits.shape == (K, H, W)
    lo, hi = torch.minimum(s_t, s_a), torch.maximum(s_t, s_a)
    assert bool(((out.logits >= lo - 1e-12) & (out.logits <= hi + 1e-12)).all())
    keep = r_t >= tau
    assert torch.equal(out.logits[:, keep], s_t[:, keep])
    assert bool((out.weight_current[keep] == 1).all())


@given(seeds, st.integers(2, 5), st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.001, 0.5))
def test_fusion_monotone_in_addon_reliability(seed, K, r_t, r_a, bump):
    g = torch.Generator().manual_seed(seed % 2**31)
    s_t = torch.randn(K, 1, 1, generator=g, dtype=torch.float64)
    s_a = torch.randn(K, 1, 1, generator=g, dtype=torch.float64)
    assume(bool(((s_t - s_a).abs() > 1e-6).all()))
    tau = 1.0  # every pixel below threshold, so every pixel is fused
    rt = torch.full((1, 1), r_t, dtype=torch.float64)
    a = fuse_logits(s_t, s_a, rt, torch.full((1, 1), r_a, dtype=torch.float64), tau).logits
    b = fuse_logits(s_t, s_a, rt, torch.full((1, 1), r_a + bump, dtype=torch.float64), tau).logits
    assert bool(((b - s_a).abs() < (a - s_a).abs()).all())


@given(seeds, st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(2, 5))
def test_attention_rows_and_channels(seed, D, h, f, K):
    g = torch.Generator().manual_seed(seed % 2**31)
    addon = AddOn(D, seed=seed % 1000, init_std=0.5).double()
    ft = torch.randn(D, h, h, generator=g, dtype=torch.float64)
    fp = torch.randn(D, h, h, generator=g, dtype=torch.float64)
    with torch.no_grad():
        A = attention_weights(addon, ft, fp)
        assert torch.allclose(A.sum(1), torch.ones(h * h, dtype=torch.float64), atol=1e-12)
        out = temporal_attention(addon, ft, fp, torch.randn(K, h * f, h * f, generator=g, dtype=torch.float64))
    assert out.shape == (K, h * f, h * f)


# --- targets --------------------------------------------------------------------


@given(seeds, st.integers(2, 5), st.floats(0.01, 100.0))
def test_labels_invariant_to_positive_rescaling(seed, K, c):
    r = _rng(seed)
    m = r.random((3, 4, 4)) < 0.6
    assume(m.any())
    s = class_scores(m, r.integers(0, K, (3, 4, 4)), r.random((3, 4, 4)), r.integers(1, 50, K).astype(float))
    track = SpatioTemporalMask(0, m, (0, 3))
    scaled = type(s)(rel=s.rel, area=s.area, freq=s.freq, alpha=s.alpha * c)
    a = assign_labels([track], [s], accept_floor=0.0)
    b = assign_labels([track], [scaled], accept_floor=0.0)
    assert [t.assigned_class for t in a] == [t.assigned_class for t in b]


@given(seeds, st.integers(2, 5), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_area_sums_to_one_and_alpha_monotone_in_rel(seed, K, la, lf):
    r = _rng(seed)
    m = r.random((3, 4, 4)) < 0.6
    assume(m.any())
    pred = r.integers(0, K, (3, 4, 4))
    rel = r.random((3, 4, 4)) * 0.8
    freq = r.integers(1, 50, K).astype(float)
    s = class_scores(m, pred, rel, freq, la, lf)
    assert s.area.sum() == pytest.approx(1.0, rel=1e-12)
    present = s.area > 0
    s2 = class_scores(m, pred, rel + 0.1, freq, la, lf)
    assert bool((s2.alpha[present] > s.alpha[present]).all())


@given(seeds, st.integers(2, 4), st.integers(1, 10), st.integers(0, 5), st.floats(0.0, 0.9))
def test_prompt_spacing(seed, K, k, spacing, floor):
    g = torch.Generator().manual_seed(seed % 2**31)
    logits = 3 * torch.randn(K, 12, 12, generator=g, dtype=torch.float64)
    ps = sample_prompts(logits, reliability_map(logits), PromptConfig(per_class_top_k=k, reliability_floor=floor, min_spacing=spacing))
    for i, a in enumerate(ps):
        for b in ps[i + 1 :]:
            if a.hint_class == b.hint_class:
                assert max(abs(a.x - b.x), abs(a.y - b.y)) >= spacing
    for c in range(K):
        assert sum(p.hint_class == c for p in ps) <= k


# --- losses ---------------------------------------------------------------------


@given(seeds, st.integers(2, 4), st.integers(0, 3))
def test_losses_nonnegative(seed, K, N):
    g = torch.Generator().manual_seed(seed % 2**31)
    s_t = 5 * torch.randn(K, 6, 6, generator=g, dtype=torch.float64)
    s_a = 5 * torch.randn(K, 6, 6, generator=g, dtype=torch.float64)
    masks = torch.rand(N, 6, 6, generator=g) < 0.4
    labels = torch.randint(0, K, (N,), generator=g).tolist()
    assert float(distill_loss(s_t, s_a, masks, labels)) >= 0.0
    feats = 3 * torch.randn(3, 6, 6, generator=g, dtype=torch.float64)
    protos = update_prototypes(Prototypes.empty(N, 3), feats, torch.rand(6, 6, generator=g, dtype=torch.float64), masks)
    assert float(contrastive_loss(feats, protos, masks)) >= 0.0


@given(st.integers(2, 5), st.floats(10.0, 40.0))
def test_contrastive_vanishes_with_separated_prototypes(N, margin):
    # each region carries its own prototype, scaled so self-similarity exceeds
    # every cross-similarity by at least ``margin``
    D = N
    H = W = 4
    masks = torch.zeros(N, H, W, dtype=torch.bool)
    feats = torch.zeros(D, H, W, dtype=torch.float64)
    for i in range(N):
        masks[i].view(-1)[i::N] = True
        feats[i][masks[i]] = margin ** 0.5
    protos = update_prototypes(Prototypes.empty(N, D), feats, torch.ones(H, W, dtype=torch.float64), masks)
    # the loss is a sum over pixels; the bound applies to each pixel's term
    assert float(contrastive_loss(feats, protos, masks)) / int(masks.sum()) < 1e-3


# --- dataio ---------------------------------------------------------------------

kinds = st.sampled_from(["rect", "disk", "triangle"])


@st.composite
def clip_specs(draw):
    K = draw(st.integers(2, 5))
    shapes = tuple(
        ShapeSpec(cls=draw(st.integers(1, K - 1)), kind=draw(kinds), size=(4, 8), jitter=draw(st.floats(0.0, 0.5)))
        for _ in range(draw(st.integers(0, 4)))
    )
    return ClipSpec(height=24, width=24, num_frames=draw(st.integers(2, 8)), num_classes=K, shapes=shapes, occlusion=draw(st.booleans()) or len(shapes) > 2)


@given(clip_specs(), seeds)
def test_generate_clip_properties(spec, seed):
    a, b = generate_clip(spec, seed), generate_clip(spec, seed)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.gt_semantic.tobytes() == b.gt_semantic.tobytes() and a.gt_instance.tobytes() == b.gt_instance.tobytes()
    assert a.frames.shape[:3] == a.gt_semantic.shape == a.gt_instance.shape
    assert a.gt_semantic.min() >= 0 and a.gt_semantic.max() < spec.num_classes
    for obj in np.unique(a.gt_instance):
        if obj == 0:
            continue
        sel = a.gt_instance == obj
        assert len(np.unique(a.gt_semantic[sel])) == 1 and a.gt_semantic[sel][0] > 0
        frames = np.nonzero(sel.any(axis=(1, 2)))[0]
        assert frames[-1] - frames[0] + 1 == len(frames)


# --- propagation ----------------------------------------------------------------


@given(clip_specs(), seeds, st.data())
def test_oracle_exact_and_bidirectional(spec, seed, data):
    clip = generate_clip(spec, seed)
    T, (H, W) = clip.num_frames, clip.shape
    f = data.draw(st.integers(0, T - 1))
    y, x = data.draw(st.integers(0, H - 1)), data.draw(st.integers(0, W - 1))
    backend = OracleBackend(clip.gt_instance)
    (track,) = propagate(backend, [Prompt(f, x, y)], (0, T))
    assert track.masks.shape == (T, H, W)
    assert np.array_equal(track.masks, clip.gt_instance == clip.gt_instance[f, y, x])
    assert backend.calls == 1


@given(seeds, st.integers(2, 6), st.integers(2, 4), st.data())
def test_greedy_deterministic_and_bidirectional(seed, T, K, data):
    r = _rng(seed)
    base = r.integers(0, K, (10, 10))
    maps = np.stack([np.roll(base, t, axis=1) if r.random() < 0.7 else r.integers(0, K, (10, 10)) for t in range(T)])
    f = data.draw(st.integers(0, T - 1))
    p = Prompt(f, data.draw(st.integers(0, 9)), data.draw(st.integers(0, 9)))
    a = propagate(GreedyIoUBackend(maps), [p], (0, T))[0].masks
    b = propagate(GreedyIoUBackend(maps.copy()), [p], (0, T))[0].masks
    assert a.shape == (T, 10, 10) and np.array_equal(a, b)
    assert a[f, p.y, p.x]
