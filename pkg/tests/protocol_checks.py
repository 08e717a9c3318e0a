"""Adaptation protocol invariants checked on small seeded runs.

Each check returns a list of violations (empty when the invariant holds).
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import torch

from equation_cases import small_clip, small_model
from vidtta.harness import AdaptationConfig, default_backend, run_full_video, run_method, run_w2f

CONFIGS = [
    AdaptationConfig(warmup_ratio=0.2, iters_per_frame=2, seed=0),
    AdaptationConfig(warmup_ratio=0.5, iters_per_frame=1, seed=3),
    AdaptationConfig(warmup_ratio=0.2, iters_per_frame=2, backend="greedy_iou", seed=1),
]


class CountingBackendFactory:
    """Wraps the default factory and counts constructions and propagate calls."""

    def __init__(self):
        self.backends = []

    def __call__(self, clip, segmaps, cfg):
        b = default_backend(clip, segmaps, cfg)
        self.backends.append(b)
        return b

    @property
    def calls(self) -> int:
        return sum(b.calls for b in self.backends)


def check_encoder_frozen() -> list[str]:
    model, clip = small_model(), small_clip(20)
    before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    bad = []
    for i, cfg in enumerate(CONFIGS):
        for res in (run_w2f(clip, model, cfg), run_full_video(clip, model, cfg)):
            main, _ = res.adapted
            for k, v in main.encoder.state_dict().items():
                if not torch.equal(v, before[k]):
                    bad.append(f"config {i} {res.warmup_ratio}: adapted encoder tensor {k} changed")
            if not any(not torch.equal(a, b) for a, b in zip(main.decoder.parameters(), model.decoder.parameters())):
                if res.diagnostics["num_labeled"]:
                    bad.append(f"config {i}: decoder did not move although masks were labelled")
    for k, v in model.encoder.state_dict().items():
        if not torch.equal(v, before[k]):
            bad.append(f"reference encoder tensor {k} changed")
    return bad


def check_backend_calls() -> list[str]:
    model, clip = small_model(), small_clip(20)
    bad = []
    for i, cfg in enumerate(CONFIGS):
        for full in (False, True):
            factory = CountingBackendFactory()
            res = run_w2f(clip, model, cfg, factory, full_video=full)
            d = res.diagnostics
            if len(factory.backends) != 1 or factory.calls != 1:
                bad.append(f"config {i} full={full}: backend built {len(factory.backends)}x, called {factory.calls}x")
            if d["backend_calls"] != 1 or d["backend_calls_during_eval"] != 0:
                bad.append(f"config {i} full={full}: diagnostics {d['backend_calls']} / {d['backend_calls_during_eval']}")
    return bad


def check_byte_identical() -> list[str]:
    model, clip = small_model(), small_clip(20)
    bad = []
    for i, cfg in enumerate(CONFIGS):
        for method in ("ditta", "entropy_min", "zero_shot", "iss"):
            with tempfile.TemporaryDirectory() as d:
                blobs = []
                for rep in ("a", "b"):
                    res = run_method(method, clip, model, cfg)
                    out = res.save(Path(d) / rep, timings=False)
                    blobs.append(
                        (
                            res.predictions.tobytes(),
                            res.param_digest,
                            {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()},
                        )
                    )
                if blobs[0] != blobs[1]:
                    bad.append(f"config {i} {method}: repeated runs differ")
    return bad


def run_protocol_checks() -> list[str]:
    return check_encoder_frozen() + check_backend_calls() + check_byte_identical()
