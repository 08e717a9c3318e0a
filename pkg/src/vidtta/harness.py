"""Adaptation and evaluation runs.

Every run takes a pre-trained segmenter and one clip, never mutates the
caller's model, and returns a :class:`RunResult` holding predictions for the
evaluation segment only.

Warm-up then freeze: the first ``max(2, round(ratio * T))`` frames are used
for adaptation; the frozen model is then evaluated on the remaining frames.
A ratio of 1.0 selects full-video mode (adapt on every frame, evaluate on
every frame).
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dataio import VideoClip, write_predictions
from .fusion import AddOn, fuse_logits
from .losses import Prototypes, contrastive_loss, distill_loss, downsample_nearest, ema_update, total_loss, update_prototypes
from .metrics import MVC_WINDOWS, MetricsReport, evaluate_clip
from .propagation import Prompt, PropagationBackend, dump_masks, label_components, make_backend, propagate
from .segmenter import Segmenter, entropy_map, frames_to_tensor, model_dtype, param_digest, reliability_map
from .targets import PromptConfig, assign_labels, class_frequencies, class_scores, sample_prompts

logger = logging.getLogger(__name__)

METHODS = ("iss", "entropy_min", "zero_shot", "ditta")
ZERO_SHOT_MIN_AREA = 0.0005  # fraction of the frame


class NumericalError(RuntimeError):
    """A loss became non-finite during adaptation."""


@dataclass
class AdaptationConfig:
    tau: float = 0.8
    lambda_area: float = 0.3
    lambda_freq: float = 0.8
    learning_rate: float = 0.001
    iters_per_frame: int = 5
    warmup_ratio: float = 0.1
    ema_momentum: float = 0.99
    prompt: PromptConfig = field(default_factory=PromptConfig)
    backend: str = "oracle"
    theta_track: float = 0.4
    accept_floor: float = 0.1
    freq_floor: float = 0.05
    optimizer: str = "adam"
    prompt_frame: str = "first"  # "first" or "middle" of the warm-up window
    attention_scale: bool = False
    normalize_features: bool = False
    use_contrastive: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")
        if not 0.0 < self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must be in (0, 1]")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError("ema_momentum must be in [0, 1)")
        if self.iters_per_frame < 0:
            raise ValueError("iters_per_frame must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.prompt_frame not in ("first", "middle"):
            raise ValueError(f"unknown prompt_frame {self.prompt_frame!r}")
        if self.backend not in ("oracle", "greedy_iou"):
            raise ValueError(f"unknown backend {self.backend!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        d = dict(d)
        prompt = PromptConfig(**d.pop("prompt", {}))
        return cls(prompt=prompt, **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def warmup_count(num_frames: int, ratio: float) -> int:
    """Warm-up length: max(2, round(ratio * T)), rounding halves up, capped at T."""
    return min(num_frames, max(2, int(math.floor(ratio * num_frames + 0.5))))


@dataclass
class RunResult:
    method: str
    clip_id: str
    warmup_ratio: float
    eval_start: int
    predictions: np.ndarray  # (T_eval, H, W) uint8
    metrics: MetricsReport
    timings: dict
    param_digest: str
    config_digest: str
    diagnostics: dict = field(default_factory=dict)
    adapted: tuple | None = field(default=None, repr=False)  # (segmenter, add-on) after adaptation; not serialised

    @property
    def fps(self) -> float:
        return self.timings.get("eval_fps", float("nan"))

    def to_dict(self, prediction_dir: str | None = None) -> dict:
        return {
            "method": self.method,
            "clip_id": self.clip_id,
            "warmup_ratio": self.warmup_ratio,
            "eval_start": self.eval_start,
            "num_eval_frames": int(self.predictions.shape[0]),
            "metrics": self.metrics.to_dict(),
            "timings": self.timings,
            "param_digest": self.param_digest,
            "config_digest": self.config_digest,
            "prediction_dir": prediction_dir,
            "diagnostics": self.diagnostics,
        }

    def save(self, run_dir: str | Path, timings: bool = True) -> Path:
        """Write ``result.json``, ``masks.json`` (if tracks exist) and ``pred/``."""
        d = Path(run_dir)
        d.mkdir(parents=True, exist_ok=True)
        H, W = self.predictions.shape[1:]
        write_predictions(self.predictions, d / "pred", shape=(H, W), frame_offset=self.eval_start)
        payload = self.to_dict(prediction_dir="pred")
        if not timings:
            payload["timings"] = {}
        (d / "result.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return d


BackendFactory = Callable[[VideoClip, np.ndarray, AdaptationConfig], PropagationBackend]


def default_backend(clip: VideoClip, segmaps: np.ndarray, cfg: AdaptationConfig) -> PropagationBackend:
    return make_backend(cfg.backend, gt_instance=clip.gt_instance, segmaps=segmaps, theta=cfg.theta_track)


def _prepare(model: Segmenter) -> Segmenter:
    main = copy.deepcopy(model)
    main.eval()
    for p in main.parameters():
        p.requires_grad_(False)
    return main


@torch.no_grad()
def _forward_all(model: Segmenter, frames: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    return model(frames_to_tensor(frames, model_dtype(model)))


def _segment(clip: VideoClip, ratio: float) -> tuple[int, int]:
    """(warm-up length, first evaluation frame)."""
    T = clip.num_frames
    if ratio >= 1.0:
        return T, 0
    W = warmup_count(T, ratio)
    if W >= T:
        raise ValueError(f"warm-up of {W} frames leaves nothing to evaluate in a {T}-frame clip")
    return W, W


def _metrics(clip: VideoClip, preds: np.ndarray, start: int) -> MetricsReport:
    gts = clip.gt_semantic[start:]
    windows = [n for n in MVC_WINDOWS if gts.shape[0] >= n]
    return evaluate_clip(preds, gts, clip.num_classes, windows)


@torch.no_grad()
def _framewise_eval(model: Segmenter, clip: VideoClip, start: int) -> tuple[np.ndarray, float]:
    dtype = model_dtype(model)
    preds = []
    t0 = time.perf_counter()
    for t in range(start, clip.num_frames):
        _, logits = model(frames_to_tensor(clip.frames[t], dtype))
        preds.append(logits[0].argmax(dim=0).numpy().astype(np.uint8))
    return np.stack(preds), time.perf_counter() - t0


@torch.no_grad()
def fused_inference(model: Segmenter, addon: AddOn, clip: VideoClip, start: int, tau: float) -> tuple[np.ndarray, float, list[float]]:
    """Sequential frozen inference with temporal fusion from ``start`` to the end.

    The frame before ``start`` (if any) seeds the attention. Returns
    predictions, wall-clock seconds and the fused-pixel fraction per frame.
    """
    dtype = model_dtype(model)
    prev = None
    if start > 0:
        prev = model(frames_to_tensor(clip.frames[start - 1], dtype))
    preds, fused_frac = [], []
    t0 = time.perf_counter()
    for t in range(start, clip.num_frames):
        feats, logits = model(frames_to_tensor(clip.frames[t], dtype))
        if prev is None:
            out = logits[0]
            fused_frac.append(0.0)
        else:
            s_add = addon(feats[0], prev[0][0], prev[1][0])
            fused = fuse_logits(logits[0], s_add, reliability_map(logits[0]), reliability_map(s_add), tau)
            out = fused.logits
            fused_frac.append(fused.fused_fraction)
        preds.append(out.argmax(dim=0).numpy().astype(np.uint8))
        prev = (feats, logits)
    return np.stack(preds), time.perf_counter() - t0, fused_frac


def _optimizer(params, cfg: AdaptationConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate)


def build_targets(
    clip: VideoClip,
    logits: torch.Tensor,
    rel: torch.Tensor,
    cfg: AdaptationConfig,
    window: tuple[int, int],
    backend_factory: BackendFactory,
) -> tuple[list, list, list, PropagationBackend | None]:
    """Prompts -> single propagation pass -> scored, labelled tracks.

    ``logits``/``rel`` cover the window frames.
    """
    a, b = window
    preds = logits.argmax(dim=1).numpy()
    pf = 0 if cfg.prompt_frame == "first" else (b - a) // 2
    prompts = sample_prompts(logits[pf], rel[pf], cfg.prompt, frame_index=a + pf)
    if not prompts:
        return prompts, [], [], None
    segmaps = np.zeros((clip.num_frames,) + clip.shape, dtype=np.uint8)
    segmaps[a:b] = preds
    backend = backend_factory(clip, segmaps, cfg)
    tracks = propagate(backend, prompts, window)
    freq = class_frequencies(preds, clip.num_classes)
    scores = [
        class_scores(t.masks, preds, rel.numpy(), freq, cfg.lambda_area, cfg.lambda_freq, cfg.freq_floor)
        for t in tracks
    ]
    labeled = assign_labels(tracks, scores, cfg.accept_floor)
    return prompts, tracks, labeled, backend


def run_w2f(
    clip: VideoClip,
    model: Segmenter,
    cfg: AdaptationConfig,
    backend_factory: BackendFactory | None = None,
    *,
    full_video: bool = False,
    mask_dump: str | Path | None = None,
) -> RunResult:
    """Adapt on the warm-up frames with distillation + contrastive losses, then freeze."""
    cfg.validate()
    backend_factory = backend_factory or default_backend
    ratio = 1.0 if full_video else cfg.warmup_ratio
    W, start = _segment(clip, ratio)
    if W < 2:
        raise ValueError("warm-up needs at least 2 frames")

    main = _prepare(model)
    dtype = model_dtype(main)
    addon = AddOn(main.feat_dim, seed=cfg.seed, scale=cfg.attention_scale).to(dtype)
    enc_digest = param_digest(main.encoder)
    stride = main.stride

    t0 = time.perf_counter()
    _, logits_w = _forward_all(main, clip.frames[:W])
    rel_w = torch.stack([reliability_map(s) for s in logits_w])
    prompts, tracks, labeled, backend = build_targets(clip, logits_w, rel_w, cfg, (0, W), backend_factory)
    if mask_dump is not None and tracks:
        dump_masks(labeled, mask_dump)

    diag: dict = {
        "warmup_frames": W,
        "num_prompts": len(prompts),
        "num_tracks": len(tracks),
        "num_labeled": len(labeled),
        "labels": [t.assigned_class for t in labeled],
        "fusion_only": not labeled,
    }
    if not labeled:
        logger.warning("%s: no labelled masks; adaptation degenerates to fusion-only", clip.clip_id)

    losses: list[float] = []
    N = len(labeled)
    if N and cfg.iters_per_frame > 0:
        masks_full = torch.from_numpy(np.stack([t.masks for t in labeled], axis=1))  # (W, N, H, W)
        masks_feat = downsample_nearest(masks_full, stride)
        labels = [t.assigned_class for t in labeled]

        momentum, momentum_addon = copy.deepcopy(main), copy.deepcopy(addon)
        for p in momentum_addon.parameters():
            p.requires_grad_(False)
        params = list(main.decoder.parameters()) + list(addon.parameters())
        for p in main.decoder.parameters():
            p.requires_grad_(True)
        opt = _optimizer(params, cfg)
        protos = Prototypes.empty(N, main.feat_dim)

        def accumulate(t: int) -> None:
            with torch.no_grad():
                f_mo, s_mo = momentum(frames_to_tensor(clip.frames[t], dtype))
                r_mo = downsample_nearest(reliability_map(s_mo[0]), stride)
            update_prototypes(protos, f_mo[0], r_mo, masks_feat[t])

        accumulate(0)
        main.train()
        for t in range(1, W):
            accumulate(t)
            pair = frames_to_tensor(clip.frames[t - 1 : t + 1], dtype)
            for _ in range(cfg.iters_per_frame):
                feats, logits = main(pair)
                s_add = addon(feats[1], feats[0], logits[0])
                l_d = distill_loss(logits[1], s_add, masks_full[t], labels)
                l_c = (
                    contrastive_loss(feats[1], protos, masks_feat[t], cfg.normalize_features)
                    if cfg.use_contrastive
                    else torch.zeros((), dtype=dtype)
                )
                loss = total_loss(l_d, l_c)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise NumericalError(f"{clip.clip_id}: non-finite loss at frame {t}")
                losses.append(value)
                if loss.requires_grad:
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
            ema_update(main, momentum, cfg.ema_momentum)
            ema_update(addon, momentum_addon, cfg.ema_momentum)
        main.eval()
    adapt_time = time.perf_counter() - t0

    for p in list(main.parameters()) + list(addon.parameters()):
        p.requires_grad_(False)
    if param_digest(main.encoder) != enc_digest:
        raise AssertionError("encoder parameters changed during adaptation")
    digest = param_digest(main, addon)
    calls_before = backend.calls if backend is not None else 0
    preds, eval_time, fused_frac = fused_inference(main, addon, clip, start, cfg.tau)
    calls_after = backend.calls if backend is not None else 0
    if param_digest(main, addon) != digest:
        raise AssertionError("parameters changed during frozen evaluation")

    diag.update(
        {
            "losses": losses,
            "fused_fraction": fused_frac,
            "backend_calls": calls_after,
            "backend_calls_during_eval": calls_after - calls_before,
        }
    )
    n_eval = clip.num_frames - start
    return RunResult(
        method="ditta",
        clip_id=clip.clip_id,
        warmup_ratio=ratio,
        eval_start=start,
        predictions=preds,
        metrics=_metrics(clip, preds, start),
        timings={"adapt_s": adapt_time, "eval_s": eval_time, "eval_fps": n_eval / eval_time},
        param_digest=digest,
        config_digest=cfg.digest(),
        diagnostics=diag,
        adapted=(main, addon),
    )


def run_full_video(clip: VideoClip, model: Segmenter, cfg: AdaptationConfig, backend_factory: BackendFactory | None = None, **kw) -> RunResult:
    return run_w2f(clip, model, cfg, backend_factory, full_video=True, **kw)


def iss_baseline(clip: VideoClip, model: Segmenter, cfg: AdaptationConfig) -> RunResult:
    """Plain frame-wise inference on the evaluation segment."""
    _, start = _segment(clip, cfg.warmup_ratio)
    main = _prepare(model)
    preds, eval_time = _framewise_eval(main, clip, start)
    n_eval = clip.num_frames - start
    return RunResult(
        method="iss",
        clip_id=clip.clip_id,
        warmup_ratio=min(cfg.warmup_ratio, 1.0),
        eval_start=start,
        predictions=preds,
        metrics=_metrics(clip, preds, start),
        timings={"eval_s": eval_time, "eval_fps": n_eval / eval_time},
        param_digest=param_digest(main),
        config_digest=cfg.digest(),
    )


def entropy_min_adapt(clip: VideoClip, model: Segmenter, cfg: AdaptationConfig) -> RunResult:
    """Entropy-minimisation baseline: decoder-only gradient steps on mean prediction entropy."""
    cfg.validate()
    W, start = _segment(clip, cfg.warmup_ratio)
    main = _prepare(model)
    dtype = model_dtype(main)
    for p in main.decoder.parameters():
        p.requires_grad_(True)
    opt = _optimizer(list(main.decoder.parameters()), cfg)
    entropies: list[float] = []
    t0 = time.perf_counter()
    for t in range(W):
        x = frames_to_tensor(clip.frames[t], dtype)
        for _ in range(cfg.iters_per_frame):
            _, logits = main(x)
            loss = entropy_map(logits[0]).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"{clip.clip_id}: non-finite entropy at frame {t}")
            entropies.append(float(loss.detach()))
            opt.zero_grad()
            loss.backward()
            opt.step()
    adapt_time = time.perf_counter() - t0
    for p in main.parameters():
        p.requires_grad_(False)
    preds, eval_time = _framewise_eval(main, clip, start)
    n_eval = clip.num_frames - start
    return RunResult(
        method="entropy_min",
        clip_id=clip.clip_id,
        warmup_ratio=min(cfg.warmup_ratio, 1.0),
        eval_start=start,
        predictions=preds,
        metrics=_metrics(clip, preds, start),
        timings={"adapt_s": adapt_time, "eval_s": eval_time, "eval_fps": n_eval / eval_time},
        param_digest=param_digest(main),
        config_digest=cfg.digest(),
        diagnostics={"warmup_frames": W, "losses": entropies},
        adapted=(main, None),
    )


def component_prompts(logits: torch.Tensor, min_area: float) -> list[Prompt]:
    """One prompt per 8-connected same-class component of the argmax map.

    Components smaller than ``min_area`` pixels are dropped. Each prompt sits
    on the component's most confident pixel and carries that confidence;
    prompts are ordered by descending confidence.
    """
    probs = torch.softmax(logits, dim=0)
    conf, pred = probs.max(dim=0)
    conf, pred = conf.numpy(), pred.numpy()
    labels, classes = label_components(pred)
    prompts = []
    for lab in range(1, len(classes)):
        comp = labels == lab
        if comp.sum() < min_area:
            continue
        masked = np.where(comp, conf, -np.inf)
        flat = int(np.argmax(masked))
        y, x = divmod(flat, pred.shape[1])
        prompts.append(Prompt(0, x, y, int(classes[lab]), float(conf[y, x])))
    order = sorted(range(len(prompts)), key=lambda i: -prompts[i].score)
    return [prompts[i] for i in order]


def zero_shot_refine(
    clip: VideoClip,
    model: Segmenter,
    cfg: AdaptationConfig,
    backend_factory: BackendFactory | None = None,
    min_area: float = ZERO_SHOT_MIN_AREA,
) -> RunResult:
    """Propagate first-frame prediction components through the clip and overwrite ISS labels.

    Components smaller than ``min_area`` (fraction of the frame) are ignored.
    """
    backend_factory = backend_factory or default_backend
    _, start = _segment(clip, cfg.warmup_ratio)
    main = _prepare(model)
    H, W = clip.shape
    t0 = time.perf_counter()
    _, logits = _forward_all(main, clip.frames)
    preds = logits.argmax(dim=1).numpy().astype(np.uint8)
    prompts = component_prompts(logits[0], min_area * H * W)
    tracks = []
    if prompts:
        backend = backend_factory(clip, preds, cfg)
        tracks = propagate(backend, prompts, (0, clip.num_frames))
    refined = preds.copy()
    for t in range(clip.num_frames):
        best = np.full((H, W), -np.inf)
        for tr in tracks:
            m = tr.masks[t] & (tr.prompt.score > best)
            refined[t][m] = tr.prompt.hint_class
            best[m] = tr.prompt.score
    elapsed = time.perf_counter() - t0
    out = refined[start:]
    return RunResult(
        method="zero_shot",
        clip_id=clip.clip_id,
        warmup_ratio=min(cfg.warmup_ratio, 1.0),
        eval_start=start,
        predictions=out,
        metrics=_metrics(clip, out, start),
        timings={"eval_s": elapsed, "eval_fps": clip.num_frames / elapsed},
        param_digest=param_digest(main),
        config_digest=cfg.digest(),
        diagnostics={"num_prompts": len(prompts), "num_tracks": len(tracks)},
    )


def run_method(method: str, clip: VideoClip, model: Segmenter, cfg: AdaptationConfig, backend_factory: BackendFactory | None = None) -> RunResult:
    if method == "iss":
        return iss_baseline(clip, model, cfg)
    if method == "entropy_min":
        return entropy_min_adapt(clip, model, cfg)
    if method == "zero_shot":
        return zero_shot_refine(clip, model, cfg, backend_factory)
    if method == "ditta":
        return run_w2f(clip, model, cfg, backend_factory, full_video=cfg.warmup_ratio >= 1.0)
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
