"""Prompted spatio-temporal mask propagation.

Two interchangeable backends stand in for a promptable video segmenter:

* :class:`OracleBackend` returns ground-truth instance masks (upper bound).
* :class:`GreedyIoUBackend` links 8-connected components of predicted class
  maps frame to frame by maximum IoU. It never sees ground truth.

Pixels with instance id 0 are background; the oracle treats them as one
segment like any other, so a prompt on background yields the background region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
DEDUP_IOU = 0.9


@dataclass(frozen=True)
class Prompt:
    frame_index: int
    x: int
    y: int
    hint_class: int = -1
    score: float = 0.0  # confidence carried for downstream merging; unused by propagation


@dataclass
class SpatioTemporalMask:
    """One object's binary masks over ``window`` (absolute frame range)."""

    object_id: int
    masks: np.ndarray  # (T_window, H, W) bool
    window: tuple[int, int]
    prompt: Prompt | None = None
    assigned_class: int | None = None
    meta: dict = field(default_factory=dict)

    def at(self, frame: int) -> np.ndarray:
        return self.masks[frame - self.window[0]]

    @property
    def num_pixels(self) -> int:
        return int(self.masks.sum())

    def labeled(self, cls: int) -> "SpatioTemporalMask":
        return replace(self, assigned_class=int(cls))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def label_components(segmap: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """8-connected components of equal class.

    Returns a label map (0 unused; components numbered 1.. by ascending class,
    then scipy's raster order) and the class of each component (index 0 is -1).
    """
    segmap = np.asarray(segmap)
    labels = np.zeros(segmap.shape, dtype=np.int64)
    classes = [-1]
    offset = 0
    for c in np.unique(segmap):
        lab, n = ndimage.label(segmap == c, structure=EIGHT_CONNECTED)
        labels[lab > 0] = lab[lab > 0] + offset
        classes.extend([int(c)] * n)
        offset += n
    return labels, np.asarray(classes, dtype=np.int64)


def _best_candidate(labels: np.ndarray, prev: np.ndarray) -> tuple[int, float]:
    """Component of ``labels`` with max IoU against ``prev``; ties -> larger area, lower label."""
    n = int(labels.max())
    if n == 0 or not prev.any():
        return 0, 0.0
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    inter = np.bincount(labels[prev], minlength=n + 1)
    union = areas + int(prev.sum()) - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    iou[0] = -1.0
    best_iou = iou.max()
    cands = np.flatnonzero(iou == best_iou)
    best = min(cands, key=lambda lab: (-areas[lab], lab))
    return int(best), float(best_iou)


def greedy_iou_track(
    segmaps: np.ndarray,
    seed_mask: np.ndarray,
    start: int = 0,
    direction: str = "forward",
    theta: float = 0.4,
) -> np.ndarray:
    """Follow ``seed_mask`` (placed at ``start``) through ``segmaps`` in one direction.

    Returns (T, H, W) bool masks. Frames on the other side of ``start`` stay
    empty, as do all frames after the track terminates.
    """
    segmaps = np.asarray(segmaps)
    seed_mask = np.asarray(seed_mask, dtype=bool)
    if not seed_mask.any():
        raise ValueError("seed mask is empty")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    T = segmaps.shape[0]
    out = np.zeros(segmaps.shape, dtype=bool)
    out[start] = seed_mask
    step = 1 if direction == "forward" else -1
    prev = seed_mask
    t = start + step
    while 0 <= t < T:
        labels, _ = label_components(segmaps[t])
        best, iou = _best_candidate(labels, prev)
        if best == 0 or iou < theta:
            break
        prev = labels == best
        out[t] = prev
        t += step
    return out


class PropagationBackend:
    """Counts invocations so callers can prove how often propagation ran."""

    name = "base"

    def __init__(self, num_frames: int, shape: tuple[int, int]):
        self.num_frames = num_frames
        self.shape = shape
        self.calls = 0

    def track(self, prompt: Prompt, window: tuple[int, int]) -> np.ndarray:
        raise NotImplementedError


class OracleBackend(PropagationBackend):
    name = "oracle"

    def __init__(self, gt_instance: np.ndarray):
        gt_instance = np.asarray(gt_instance)
        super().__init__(gt_instance.shape[0], gt_instance.shape[1:])
        self._inst = gt_instance

    def track(self, prompt: Prompt, window: tuple[int, int]) -> np.ndarray:
        obj = self._inst[prompt.frame_index, prompt.y, prompt.x]
        return self._inst[window[0] : window[1]] == obj


class GreedyIoUBackend(PropagationBackend):
    """Tracks over predicted class maps only."""

    name = "greedy_iou"

    def __init__(self, segmaps: np.ndarray, theta: float = 0.4):
        segmaps = np.asarray(segmaps)
        super().__init__(segmaps.shape[0], segmaps.shape[1:])
        self._segmaps = segmaps
        self.theta = theta

    def track(self, prompt: Prompt, window: tuple[int, int]) -> np.ndarray:
        a, b = window
        maps = self._segmaps[a:b]
        start = prompt.frame_index - a
        labels, _ = label_components(maps[start])
        seed = labels == labels[prompt.y, prompt.x]
        fwd = greedy_iou_track(maps, seed, start, "forward", self.theta)
        bwd = greedy_iou_track(maps, seed, start, "backward", self.theta)
        return fwd | bwd


def make_backend(name: str, *, gt_instance: np.ndarray | None = None, segmaps: np.ndarray | None = None, theta: float = 0.4) -> PropagationBackend:
    if name == "oracle":
        if gt_instance is None:
            raise ValueError("oracle backend needs instance maps")
        return OracleBackend(gt_instance)
    if name == "greedy_iou":
        if segmaps is None:
            raise ValueError("greedy_iou backend needs predicted class maps")
        return GreedyIoUBackend(segmaps, theta)
    raise ValueError(f"unknown propagation backend {name!r}")


def propagate(backend: PropagationBackend, prompts: Sequence[Prompt], window: tuple[int, int]) -> list[SpatioTemporalMask]:
    """One propagation pass: a track per prompt, in both temporal directions.

    Prompts whose masks on the prompt frame overlap an earlier track with
    IoU > 0.9 are dropped (first prompt wins).
    """
    a, b = int(window[0]), int(window[1])
    if b <= a:
        raise ValueError(f"empty window {window}")
    if a < 0 or b > backend.num_frames:
        raise ValueError(f"window {window} outside clip of {backend.num_frames} frames")
    if not prompts:
        raise ValueError("no prompts")
    H, W = backend.shape
    for p in prompts:
        if not (0 <= p.x < W and 0 <= p.y < H):
            raise ValueError(f"prompt ({p.x}, {p.y}) out of bounds for {W}x{H} frame")
        if not a <= p.frame_index < b:
            raise ValueError(f"prompt frame {p.frame_index} outside window {window}")
    backend.calls += 1
    tracks: list[SpatioTemporalMask] = []
    for p in prompts:
        masks = backend.track(p, (a, b))
        f = p.frame_index - a
        if any(mask_iou(masks[f], t.masks[f]) > DEDUP_IOU for t in tracks):
            continue
        tracks.append(SpatioTemporalMask(object_id=len(tracks), masks=masks, window=(a, b), prompt=p))
    return tracks


# --- debug dump ---------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of the row-major flattened mask, starting with a run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            flat[pos : pos + r] = True
        pos += r
        val = not val
    return flat.reshape(shape)


def dump_masks(tracks: Sequence[SpatioTemporalMask], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    items = []
    for t in tracks:
        items.append(
            {
                "object_id": t.object_id,
                "window": list(t.window),
                "assigned_class": t.assigned_class,
                "prompt": None if t.prompt is None else t.prompt.__dict__,
                "shape": list(t.masks.shape[1:]),
                "rle": [rle_encode(m) for m in t.masks],
            }
        )
    path.write_text(json.dumps({"tracks": items}, sort_keys=True) + "\n")
    return path


def load_masks(path: str | Path) -> list[SpatioTemporalMask]:
    data = json.loads(Path(path).read_text())
    out = []
    for it in data["tracks"]:
        shape = tuple(it["shape"])
        masks = np.stack([rle_decode(r, shape) for r in it["rle"]])
        prompt = Prompt(**it["prompt"]) if it["prompt"] else None
        out.append(
            SpatioTemporalMask(
                object_id=it["object_id"],
                masks=masks,
                window=tuple(it["window"]),
                prompt=prompt,
                assigned_class=it["assigned_class"],
            )
        )
    return out
