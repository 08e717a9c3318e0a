"""Synthetic moving-shape clips and their on-disk layout.

A clip directory looks like::

    <root>/clip/<clip_id>/frames/00000.png   RGB, 8-bit
    <root>/clip/<clip_id>/sem/00000.png      class index, 8-bit grayscale
    <root>/clip/<clip_id>/inst/00000.png     instance id, 16-bit grayscale
    <root>/clip/<clip_id>/meta.json

Frames are quantised to multiples of 1/255 at generation time so that PNG
storage round-trips bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

SHAPE_KINDS = ("rect", "disk", "triangle")

# RGB base colour per class; class 0 is background. Wraps for K > len.
CLASS_COLORS = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.25],
        [0.25, 0.35, 0.85],
        [0.85, 0.80, 0.20],
        [0.75, 0.30, 0.80],
        [0.20, 0.80, 0.80],
        [0.95, 0.55, 0.15],
    ],
    dtype=np.float64,
)


class ClipSpecError(ValueError):
    """Raised for an invalid :class:`ClipSpec`."""


class ClipFormatError(ValueError):
    """Raised when a clip or prediction directory does not match the layout."""


@dataclass(frozen=True)
class ShapeSpec:
    cls: int
    kind: str = "rect"
    size: tuple[int, int] = (8, 12)
    velocity: tuple[tuple[float, float], tuple[float, float]] = ((-2.0, 2.0), (-2.0, 2.0))
    jitter: float = 0.0  # std of per-frame positional noise, px


@dataclass(frozen=True)
class ClipSpec:
    height: int = 64
    width: int = 64
    num_frames: int = 40
    num_classes: int = 6
    shapes: tuple[ShapeSpec, ...] = ()
    background: int = 0  # texture seed
    occlusion: bool = True
    noise_level: float = 0.0
    tint: float = 0.0  # per-clip global colour shift magnitude
    appearance_jitter: float = 0.0  # per-object colour deviation from its class colour
    flicker: float = 0.0  # per-frame global colour offset magnitude
    fps_nominal: float = 15.0

    def validate(self) -> None:
        if self.num_frames < 2:
            raise ClipSpecError(f"num_frames must be >= 2, got {self.num_frames}")
        if self.num_classes < 2:
            raise ClipSpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.height < 1 or self.width < 1:
            raise ClipSpecError(f"frame size must be positive, got {self.height}x{self.width}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ClipSpecError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if self.tint < 0 or self.appearance_jitter < 0 or self.flicker < 0:
            raise ClipSpecError("tint, appearance_jitter and flicker must be >= 0")
        lane = self.lane_height()
        for i, s in enumerate(self.shapes):
            if s.kind not in SHAPE_KINDS:
                raise ClipSpecError(f"shape {i}: unknown kind {s.kind!r}")
            if not 1 <= s.cls < self.num_classes:
                raise ClipSpecError(f"shape {i}: class {s.cls} outside [1, {self.num_classes})")
            lo, hi = s.size
            if lo < 1 or lo > hi:
                raise ClipSpecError(f"shape {i}: bad size range {s.size}")
            if hi > self.width or hi > lane:
                raise ClipSpecError(
                    f"shape {i}: size {hi} does not fit inside the frame "
                    f"({self.width} wide, {lane} px lane height)"
                )
            if s.jitter < 0:
                raise ClipSpecError(f"shape {i}: jitter must be >= 0")

    def lane_height(self) -> int:
        # without occlusion every shape bounces inside its own horizontal lane
        if self.occlusion or not self.shapes:
            return self.height
        return self.height // len(self.shapes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClipSpec":
        d = dict(d)
        shapes = []
        for s in d.pop("shapes", ()):
            s = dict(s)
            s["size"] = tuple(s.get("size", (8, 12)))
            if "velocity" in s:
                s["velocity"] = tuple(tuple(v) for v in s["velocity"])
            shapes.append(ShapeSpec(**s))
        return cls(shapes=tuple(shapes), **d)


@dataclass
class VideoClip:
    """Frames (T, H, W, 3) float32 in [0, 1]; label maps (T, H, W)."""

    clip_id: str
    frames: np.ndarray
    gt_semantic: np.ndarray
    gt_instance: np.ndarray
    num_classes: int
    fps_nominal: float = 15.0
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.frames.shape[1]), int(self.frames.shape[2])

    def subclip(self, start: int, stop: int) -> "VideoClip":
        return VideoClip(
            clip_id=self.clip_id,
            frames=self.frames[start:stop],
            gt_semantic=self.gt_semantic[start:stop],
            gt_instance=self.gt_instance[start:stop],
            num_classes=self.num_classes,
            fps_nominal=self.fps_nominal,
            meta=dict(self.meta),
        )


def _smooth_texture(rng: np.random.Generator, h: int, w: int, octaves: int = 4) -> np.ndarray:
    """Value-noise texture in [0, 1]: sum of bilinearly upsampled random grids."""
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 1)
        grid = rng.random((cells + 1, cells + 1))
        ys = np.linspace(0, cells, h, endpoint=False)
        xs = np.linspace(0, cells, w, endpoint=False)
        y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
        fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
        # smoothstep weights give the Perlin-like look
        fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
        g00 = grid[y0][:, x0]
        g01 = grid[y0][:, x0 + 1]
        g10 = grid[y0 + 1][:, x0]
        g11 = grid[y0 + 1][:, x0 + 1]
        top = g00 * (1 - fx) + g01 * fx
        bot = g10 * (1 - fx) + g11 * fx
        out += amp * (top * (1 - fy) + bot * fy)
        total += amp
        amp *= 0.5
    return out / total


def rasterize_shape(kind: str, size: int) -> np.ndarray:
    """Boolean (size, size) footprint of a shape anchored at its top-left corner."""
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "rect":
        return np.ones((size, size), dtype=bool)
    c = (size - 1) / 2.0
    if kind == "disk":
        r = size / 2.0
        return (ii - c) ** 2 + (jj - c) ** 2 <= r * r
    if kind == "triangle":
        # apex at the top row, base spanning the bottom row
        half = (ii + 1) / size * (size / 2.0)
        return np.abs(jj - c) <= half
    raise ClipSpecError(f"unknown shape kind {kind!r}")


def place_mask(footprint: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    """Paste a footprint into an (h, w) canvas, clipping at the borders."""
    canvas = np.zeros((h, w), dtype=bool)
    fh, fw = footprint.shape
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + fh, h), min(left + fw, w)
    if y0 < y1 and x0 < x1:
        canvas[y0:y1, x0:x1] = footprint[y0 - top : y1 - top, x0 - left : x1 - left]
    return canvas


def _bounce(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        return lo, 0.0
    while pos < lo or pos > hi:
        if pos < lo:
            pos, vel = 2 * lo - pos, -vel
        if pos > hi:
            pos, vel = 2 * hi - pos, -vel
    return pos, vel


def shape_trajectories(spec: ClipSpec, seed: int) -> list[dict]:
    """Sample per-shape size, velocity and integer top-left positions per frame.

    Exposed separately so tests can check placement analytically.
    """
    spec.validate()
    rng = np.random.default_rng([seed, 0])
    lane_h = spec.lane_height()
    out = []
    for k, s in enumerate(spec.shapes):
        size = int(rng.integers(s.size[0], s.size[1] + 1))
        (vx_lo, vx_hi), (vy_lo, vy_hi) = s.velocity
        vx = float(rng.uniform(vx_lo, vx_hi)) if vx_hi > vx_lo else float(vx_lo)
        vy = float(rng.uniform(vy_lo, vy_hi)) if vy_hi > vy_lo else float(vy_lo)
        lane_top = 0 if spec.occlusion else k * lane_h
        y_lo, y_hi = float(lane_top), float(lane_top + lane_h - size)
        x_lo, x_hi = 0.0, float(spec.width - size)
        x = float(rng.integers(0, int(x_hi) + 1))
        y = float(rng.integers(int(y_lo), int(y_hi) + 1))
        tops, lefts = [], []
        for t in range(spec.num_frames):
            if t > 0:
                x += vx
                y += vy
                if s.jitter > 0:
                    x += s.jitter * rng.standard_normal()
                    y += s.jitter * rng.standard_normal()
                x, vx = _bounce(x, vx, x_lo, x_hi)
                y, vy = _bounce(y, vy, y_lo, y_hi)
            tops.append(int(np.floor(y + 0.5)))
            lefts.append(int(np.floor(x + 0.5)))
        out.append({"cls": s.cls, "kind": s.kind, "size": size, "top": tops, "left": lefts})
    return out


def generate_clip(spec: ClipSpec, seed: int, clip_id: str | None = None) -> VideoClip:
    """Render a deterministic clip of moving labelled shapes.

    Shapes later in ``spec.shapes`` are drawn on top. An object that becomes
    fully hidden is treated as having exited; if it reappears it receives a
    fresh instance id, so every id occupies a contiguous frame range.
    """
    spec.validate()
    H, W, T, K = spec.height, spec.width, spec.num_frames, spec.num_classes
    trajectories = shape_trajectories(spec, seed)

    tex_rng = np.random.default_rng([spec.background, 1])
    bg_tex = _smooth_texture(tex_rng, H, W)
    rng = np.random.default_rng([seed, 2])
    tint = spec.tint * rng.uniform(-1.0, 1.0, size=3)
    palette = CLASS_COLORS[np.arange(K) % len(CLASS_COLORS)]
    obj_colors = [
        palette[tr["cls"]] + spec.appearance_jitter * rng.uniform(-1.0, 1.0, size=3)
        for tr in trajectories
    ]
    obj_tex = [_smooth_texture(rng, tr["size"], tr["size"], octaves=2) for tr in trajectories]

    frames = np.empty((T, H, W, 3), dtype=np.float32)
    sem = np.zeros((T, H, W), dtype=np.uint8)
    inst = np.zeros((T, H, W), dtype=np.uint16)
    footprints = [rasterize_shape(tr["kind"], tr["size"]) for tr in trajectories]

    next_id = 1
    current_id = [0] * len(trajectories)  # 0 = not currently visible
    for t in range(T):
        img = palette[0][None, None, :] * (0.6 + 0.8 * bg_tex[..., None])
        owner = np.full((H, W), -1, dtype=np.int64)
        for k, tr in enumerate(trajectories):
            m = place_mask(footprints[k], tr["top"][t], tr["left"][t], H, W)
            owner[m] = k
            shade = _paste_values(0.8 + 0.4 * obj_tex[k], tr["top"][t], tr["left"][t], H, W)
            img[m] = obj_colors[k][None, :] * shade[m][:, None]
        for k, tr in enumerate(trajectories):
            visible = owner == k
            if not visible.any():
                current_id[k] = 0
                continue
            if current_id[k] == 0:
                current_id[k] = next_id
                next_id += 1
            sem[t][visible] = tr["cls"]
            inst[t][visible] = current_id[k]
        img = img + tint[None, None, :]
        if spec.flicker > 0:
            img = img + spec.flicker * rng.uniform(-1.0, 1.0, size=3)[None, None, :]
        if spec.noise_level > 0:
            img = img + spec.noise_level * rng.standard_normal(img.shape)
        frames[t] = (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)

    meta = {"spec": spec.to_dict(), "seed": int(seed)}
    return VideoClip(
        clip_id=clip_id if clip_id is not None else f"clip{seed:05d}",
        frames=frames,
        gt_semantic=sem,
        gt_instance=inst,
        num_classes=K,
        fps_nominal=spec.fps_nominal,
        meta=meta,
    )


def _paste_values(values: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    canvas = np.zeros((h, w))
    fh, fw = values.shape
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + fh, h), min(left + fw, w)
    if y0 < y1 and x0 < x1:
        canvas[y0:y1, x0:x1] = values[y0 - top : y1 - top, x0 - left : x1 - left]
    return canvas


# --- disk layout -----------------------------------------------------------


def _frame_name(i: int) -> str:
    return f"{i:05d}.png"


def clip_dir(root: str | Path, clip_id: str) -> Path:
    return Path(root) / "clip" / clip_id


def write_clip(clip: VideoClip, root: str | Path) -> Path:
    """Write ``clip`` under ``root/clip/<clip_id>`` and return that directory."""
    d = clip_dir(root, clip.clip_id)
    for sub in ("frames", "sem", "inst"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    T, H, W = clip.gt_semantic.shape
    for t in range(T):
        rgb = np.round(clip.frames[t] * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(d / "frames" / _frame_name(t))
        Image.fromarray(clip.gt_semantic[t].astype(np.uint8), mode="L").save(d / "sem" / _frame_name(t))
        Image.fromarray(clip.gt_instance[t].astype(np.uint16)).save(d / "inst" / _frame_name(t))
    meta = {
        "clip_id": clip.clip_id,
        "height": H,
        "width": W,
        "num_classes": clip.num_classes,
        "num_frames": T,
        "fps_nominal": clip.fps_nominal,
        "generator": clip.meta,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def _read_png(path: Path, frame: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise ClipFormatError(f"missing {what} file for frame {frame}: {path}")
    with Image.open(path) as im:
        return np.asarray(im)


def read_clip(path: str | Path) -> VideoClip:
    """Read a clip directory written by :func:`write_clip`."""
    d = Path(path)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise ClipFormatError(f"{d}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    try:
        T, H, W, K = (int(meta[k]) for k in ("num_frames", "height", "width", "num_classes"))
    except KeyError as exc:
        raise ClipFormatError(f"{meta_path}: missing key {exc}") from None
    for sub in ("frames", "sem", "inst"):
        if not (d / sub).is_dir():
            raise ClipFormatError(f"{d}: missing {sub}/ directory")
        n = len(list((d / sub).glob("*.png")))
        if n != T:
            # name the first missing index when possible
            for t in range(T):
                if not (d / sub / _frame_name(t)).is_file():
                    raise ClipFormatError(f"missing {sub} file for frame {t}")
            raise ClipFormatError(f"{d / sub}: expected {T} files, found {n}")

    frames = np.empty((T, H, W, 3), dtype=np.float32)
    sem = np.empty((T, H, W), dtype=np.uint8)
    inst = np.empty((T, H, W), dtype=np.uint16)
    for t in range(T):
        rgb = _read_png(d / "frames" / _frame_name(t), t, "frame")
        s = _read_png(d / "sem" / _frame_name(t), t, "sem")
        i = _read_png(d / "inst" / _frame_name(t), t, "inst")
        if rgb.shape != (H, W, 3) or s.shape != (H, W) or i.shape != (H, W):
            raise ClipFormatError(f"frame {t}: array shape disagrees with meta ({H}x{W})")
        if s.max(initial=0) >= K:
            raise ClipFormatError(f"frame {t}: class index {int(s.max())} out of range [0, {K})")
        frames[t] = rgb.astype(np.float32) / np.float32(255.0)
        sem[t] = s
        inst[t] = i
    return VideoClip(
        clip_id=str(meta.get("clip_id", d.name)),
        frames=frames,
        gt_semantic=sem,
        gt_instance=inst,
        num_classes=K,
        fps_nominal=float(meta.get("fps_nominal", 15.0)),
        meta=meta.get("generator", {}),
    )


def write_predictions(
    preds: Sequence[np.ndarray] | np.ndarray,
    path: str | Path,
    *,
    shape: tuple[int, int] | None = None,
    num_classes: int | None = None,
    frame_offset: int = 0,
) -> Path:
    """Dump per-frame class maps as 8-bit PNGs plus a small meta.json."""
    if len(preds) == 0:
        raise ClipFormatError("no frames")
    arrs = [np.asarray(p) for p in preds]
    first = arrs[0].shape
    for t, a in enumerate(arrs):
        if a.ndim != 2 or a.shape != first:
            raise ClipFormatError(f"prediction {t}: shape {a.shape} differs from {first}")
        if shape is not None and a.shape != tuple(shape):
            raise ClipFormatError(f"prediction {t}: shape {a.shape} does not match clip {tuple(shape)}")
        if num_classes is not None and (a.min(initial=0) < 0 or a.max(initial=0) >= num_classes):
            raise ClipFormatError(f"prediction {t}: class index out of range [0, {num_classes})")
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for t, a in enumerate(arrs):
        Image.fromarray(a.astype(np.uint8), mode="L").save(d / _frame_name(t))
    meta = {
        "num_frames": len(arrs),
        "height": first[0],
        "width": first[1],
        "num_classes": num_classes,
        "frame_offset": frame_offset,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def read_predictions(path: str | Path) -> np.ndarray:
    d = Path(path)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise ClipFormatError(f"{d}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    T, H, W = int(meta["num_frames"]), int(meta["height"]), int(meta["width"])
    K = meta.get("num_classes")
    out = np.empty((T, H, W), dtype=np.uint8)
    for t in range(T):
        a = _read_png(d / _frame_name(t), t, "prediction")
        if a.shape != (H, W):
            raise ClipFormatError(f"prediction {t}: shape {a.shape} disagrees with meta")
        if K is not None and a.max(initial=0) >= K:
            raise ClipFormatError(f"prediction {t}: class index out of range [0, {K})")
        out[t] = a
    return out


# --- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a set of clips; each clip draws its shapes from ``seed``.

    Training and test clips come from disjoint seed streams.
    """

    num_clips: int = 20
    num_train_clips: int = 10
    seed: int = 0
    height: int = 64
    width: int = 64
    num_frames: int = 40
    num_classes: int = 6
    shapes_per_clip: tuple[int, int] = (2, 4)
    kinds: tuple[str, ...] = SHAPE_KINDS
    size: tuple[int, int] = (10, 20)
    speed: float = 2.0
    jitter: float = 0.3
    noise_level: float = 0.08
    tint: float = 0.1
    appearance_jitter: float = 0.1
    flicker: float = 0.0
    occlusion: bool = True
    fps_nominal: float = 15.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        for k in ("shapes_per_clip", "kinds", "size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def clip_specs(self, split: str = "test") -> list[tuple[str, ClipSpec, int]]:
        """(clip_id, spec, seed) for every clip of ``split`` ('train' or 'test')."""
        if split not in ("train", "test"):
            raise ValueError(f"unknown split {split!r}")
        n = self.num_clips if split == "test" else self.num_train_clips
        stream = 1 if split == "test" else 2
        out = []
        for i in range(n):
            rng = np.random.default_rng([self.seed, stream, i])
            k = int(rng.integers(self.shapes_per_clip[0], self.shapes_per_clip[1] + 1))
            v = self.speed
            shapes = tuple(
                ShapeSpec(
                    cls=int(rng.integers(1, self.num_classes)),
                    kind=str(self.kinds[int(rng.integers(0, len(self.kinds)))]),
                    size=self.size,
                    velocity=((-v, v), (-v, v)),
                    jitter=self.jitter,
                )
                for _ in range(k)
            )
            spec = ClipSpec(
                height=self.height,
                width=self.width,
                num_frames=self.num_frames,
                num_classes=self.num_classes,
                shapes=shapes,
                background=int(rng.integers(0, 2**31 - 1)),
                occlusion=self.occlusion,
                noise_level=self.noise_level,
                tint=self.tint,
                appearance_jitter=self.appearance_jitter,
                flicker=self.flicker,
                fps_nominal=self.fps_nominal,
            )
            seed = int(rng.integers(0, 2**31 - 1))
            out.append((f"{split}{i:03d}", spec, seed))
        return out

    def generate(self, split: str = "test") -> list[VideoClip]:
        return [generate_clip(spec, seed, clip_id=cid) for cid, spec, seed in self.clip_specs(split)]
