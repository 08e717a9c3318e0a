"""Frame-wise reference segmenter, reliability maps and checkpoints.

Tensors are channels-first: a frame's logits are ``(K, H, W)`` and its
decoder features ``(D, h, w)`` with ``H / h == W / w == stride``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

ENTROPY_EPS = 1e-12


@dataclass
class SegmenterOutput:
    features: torch.Tensor  # (D, h, w), last decoder features before the classifier
    logits: torch.Tensor  # (K, H, W)


class Decoder(nn.Module):
    """Conv head whose output features have a fixed L2 norm ``feat_norm`` per pixel.

    Bounded features keep raw dot products (attention scores, pixel-prototype
    similarities) in a range where softmax is informative rather than one-hot.
    ``feat_norm=None`` leaves features unnormalised.
    """

    def __init__(self, in_ch: int, feat_dim: int, num_classes: int, feat_norm: float | None = 2.0):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, feat_dim, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(feat_dim, feat_dim, 3, padding=1),
        )
        self.feat_norm = feat_norm
        self.classifier = nn.Conv2d(feat_dim, num_classes, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.body(x)
        if self.feat_norm is not None:
            feats = self.feat_norm * F.normalize(feats, dim=1, eps=1e-6)
        return feats, self.classifier(feats)


class Segmenter(nn.Module):
    """Small conv encoder (stride 4) plus a decoder producing features and logits.

    Logits are computed at feature resolution and bilinearly upsampled to the
    input size.
    """

    stride = 4

    def __init__(
        self,
        height: int,
        width: int,
        num_classes: int,
        feat_dim: int = 32,
        width_mult: int = 16,
        feat_norm: float | None = 2.0,
    ):
        super().__init__()
        if height % self.stride or width % self.stride:
            raise ValueError(f"frame size {height}x{width} must be divisible by {self.stride}")
        self.height, self.width = height, width
        self.num_classes = num_classes
        self.feat_dim = feat_dim
        c = width_mult
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.decoder = Decoder(2 * c, feat_dim, num_classes, feat_norm)

    def arch(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "feat_dim": self.feat_dim,
            "width_mult": self.encoder[0].out_channels,
            "feat_norm": self.decoder.feat_norm,
        }

    def encoder_params(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if n.startswith("encoder.")}

    def decoder_params(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if n.startswith("decoder.")}

    def forward(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """frames: (N, 3, H, W) in [0, 1] -> features (N, D, h, w), logits (N, K, H, W)."""
        if frames.shape[-2:] != (self.height, self.width):
            raise ValueError(
                f"frame shape {tuple(frames.shape[-2:])} does not match configured "
                f"{(self.height, self.width)}"
            )
        feats, low = self.decoder(self.encoder(frames - 0.5))
        logits = F.interpolate(low, size=(self.height, self.width), mode="bilinear", align_corners=False)
        return feats, logits


def frames_to_tensor(frames: np.ndarray | torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) or (N, H, W, 3) array -> (N, 3, H, W) tensor."""
    t = torch.as_tensor(np.asarray(frames), dtype=dtype)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) or (N, H, W, 3) frames, got {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).contiguous()


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def predict(model: Segmenter, frame: np.ndarray | torch.Tensor) -> SegmenterOutput:
    """Run the segmenter on a single (H, W, 3) frame."""
    x = frames_to_tensor(frame, model_dtype(model))
    if x.shape[0] != 1:
        raise ValueError("predict takes a single frame")
    feats, logits = model(x)
    return SegmenterOutput(features=feats[0], logits=logits[0])


def entropy_map(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel Shannon entropy (nats) of softmax over the class axis of (K, H, W) logits."""
    logp = F.log_softmax(logits, dim=0)
    return -(logp.exp() * logp).sum(dim=0)


def reliability_map(logits: torch.Tensor) -> torch.Tensor:
    """1 - entropy / max entropy, per pixel; all ones when the max entropy is ~0."""
    if not torch.isfinite(logits).all():
        raise ValueError("reliability_map: non-finite logits")
    ent = entropy_map(logits)
    peak = ent.max()
    if peak < ENTROPY_EPS:
        return torch.ones_like(ent)
    return (1.0 - ent / peak).clamp(0.0, 1.0)


# --- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 0.01
    seed: int = 0
    feat_dim: int = 32
    width_mult: int = 16
    feat_norm: float | None = 2.0

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: Segmenter
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def init_segmenter(height: int, width: int, num_classes: int, cfg: TrainConfig) -> Segmenter:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return Segmenter(
            height, width, num_classes, feat_dim=cfg.feat_dim, width_mult=cfg.width_mult, feat_norm=cfg.feat_norm
        )


def train_reference(clips, cfg: TrainConfig) -> TrainResult:
    """Train a segmenter on individual frames sampled from ``clips``.

    Frames are drawn independently; no pair of frames is ever seen together.
    """
    clips = list(clips)
    if not clips:
        raise ValueError("empty dataset")
    H, W = clips[0].shape
    K = clips[0].num_classes
    frames = np.concatenate([c.frames for c in clips])
    labels = np.concatenate([c.gt_semantic for c in clips]).astype(np.int64)

    model = init_segmenter(H, W, K, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 17])
    losses: list[float] = []
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(frames), size=cfg.batch_size)
        x = frames_to_tensor(frames[idx])
        y = torch.from_numpy(labels[idx])
        _, logits = model(x)
        loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    if losses:
        logger.info("trained %d steps, final loss %.4f", cfg.steps, losses[-1])
    return TrainResult(model=model, losses=losses)


@torch.no_grad()
def dataset_loss(model: Segmenter, clips) -> float:
    """Mean pixel cross-entropy over every frame of ``clips``."""
    total, n = 0.0, 0
    for c in clips:
        _, logits = model(frames_to_tensor(c.frames, model_dtype(model)))
        y = torch.from_numpy(c.gt_semantic.astype(np.int64))
        total += float(F.cross_entropy(logits, y, reduction="sum"))
        n += y.numel()
    return total / n


@torch.no_grad()
def pixel_accuracy(model: Segmenter, clips) -> float:
    hit, n = 0, 0
    for c in clips:
        _, logits = model(frames_to_tensor(c.frames, model_dtype(model)))
        pred = logits.argmax(dim=1).numpy()
        hit += int((pred == c.gt_semantic).sum())
        n += pred.size
    return hit / n


# --- checkpoints ------------------------------------------------------------


def param_digest(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in sorted(m.state_dict().items()):
            arr = p.detach().cpu().numpy()
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Segmenter, path: str | Path, train_cfg: TrainConfig, extra: dict | None = None) -> Path:
    """Write named flat arrays plus a JSON header to an ``.npz`` container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{n}": p.detach().cpu().numpy() for n, p in model.state_dict().items()}
    header = {
        "arch": model.arch(),
        "shapes": {n: list(a.shape) for n, a in arrays.items()},
        "seed": train_cfg.seed,
        "train_config": asdict(train_cfg),
        "train_config_digest": train_cfg.digest(),
        "param_digest": param_digest(model),
        "extra": extra or {},
    }
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[Segmenter, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint {path}")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        state = {k[len("param/") :]: torch.from_numpy(np.array(z[k])) for k in z.files if k.startswith("param/")}
    cfg = TrainConfig(**header["train_config"])
    if cfg.digest() != header["train_config_digest"]:
        raise CheckpointError(f"{path}: training-config digest mismatch")
    a = header["arch"]
    model = Segmenter(
        a["height"],
        a["width"],
        a["num_classes"],
        feat_dim=a["feat_dim"],
        width_mult=a["width_mult"],
        feat_norm=a.get("feat_norm"),
    )
    model.load_state_dict(state)
    if param_digest(model) != header["param_digest"]:
        raise CheckpointError(f"{path}: parameter digest mismatch")
    return model, header
