"""Experiment driver: ``vidtta generate | train | run | inspect``.

All subcommands read one experiment config (YAML or JSON) whose fields can be
overridden with ``--set section.field=value``. Outputs go under
``--out``, else ``$VIDTTA_OUTPUT_ROOT``, else ``./runs``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .dataio import CLASS_COLORS, ClipFormatError, DatasetSpec, clip_dir, read_clip, read_predictions, write_clip
from .harness import METHODS, AdaptationConfig, NumericalError, run_method
from .metrics import MVC_WINDOWS, ClassCounts, miou_from_counts, wiou_from_counts
from .segmenter import CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train_reference

logger = logging.getLogger("vidtta")

OUTPUT_ROOT_ENV = "VIDTTA_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Seed-pinned synthetic suite used by the acceptance checks. Shapes are large
# and numerous enough that every class shows up, with per-frame colour
# flicker; the reference segmenter is stopped well short of convergence.
SUITE = {
    "dataset": {
        "num_clips": 20,
        "num_train_clips": 10,
        "seed": 0,
        "height": 64,
        "width": 64,
        "num_frames": 40,
        "num_classes": 6,
        "shapes_per_clip": [4, 7],
        "size": [12, 24],
        "flicker": 0.1,
    },
    "train": {"steps": 400, "seed": 0},
    "adapt": {"learning_rate": 0.0003, "optimizer": "adam", "backend": "oracle"},
    "methods": ["iss", "entropy_min", "zero_shot", "ditta"],
    "warmup_ratios": [0.1, 0.5, 1.0],
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    methods: list[str] = field(default_factory=lambda: ["iss", "ditta"])
    warmup_ratios: list[float] = field(default_factory=lambda: [0.1])

    def validate(self) -> None:
        if not self.methods:
            raise UsageError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise UsageError(f"unknown method {bad[0]!r}; expected one of {', '.join(METHODS)}")
        if not self.warmup_ratios:
            raise UsageError("at least one warm-up ratio is required")
        for r in self.warmup_ratios:
            if not 0.0 < r <= 1.0:
                raise UsageError(f"warm-up ratio {r} outside (0, 1]")
        try:
            self.adapt.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "train": asdict(self.train),
            "adapt": self.adapt.to_dict(),
            "methods": list(self.methods),
            "warmup_ratios": [float(r) for r in self.warmup_ratios],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"dataset", "train", "adapt", "methods", "warmup_ratios"}
        extra = set(d) - known
        if extra:
            raise UsageError(f"unknown config section(s): {', '.join(sorted(extra))}")
        try:
            cfg = cls(
                dataset=DatasetSpec.from_dict(d.get("dataset", {})),
                train=TrainConfig(**d.get("train", {})),
                adapt=AdaptationConfig.from_dict(d.get("adapt", {})),
                methods=list(d.get("methods", ["iss", "ditta"])),
                warmup_ratios=[float(r) for r in d.get("warmup_ratios", [0.1])],
            )
        except TypeError as exc:
            raise UsageError(f"bad config field: {exc}") from None
        return cfg

    def digest(self) -> str:
        return _digest(self.to_dict())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def apply_override(d: dict, assignment: str) -> dict:
    """Set ``a.b.c=value`` in nested dict ``d``; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise UsageError(f"override {assignment!r} is not of the form key=value")
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"override {assignment!r}: {p} is not a section")
    node[parts[-1]] = yaml.safe_load(raw)
    return d


def load_config(path: str | None, overrides=(), preset: str | None = None) -> ExperimentConfig:
    d: dict = json.loads(json.dumps(SUITE)) if preset == "suite" else {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {p} not found")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{p}: config must be a mapping")
        for k, v in loaded.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
    for o in overrides:
        apply_override(d, o)
    cfg = ExperimentConfig.from_dict(d)
    cfg.validate()
    return cfg


def output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


# --- generate ---------------------------------------------------------------


def dataset_digest(spec: DatasetSpec) -> str:
    return _digest(spec.to_dict())


def cmd_generate(cfg: ExperimentConfig, out: Path) -> Path:
    """Write train and test clips under ``out/data`` plus ``manifest.json``."""
    spec = cfg.dataset
    if spec.num_clips <= 0:
        raise DataError("empty dataset")
    data = out / "data"
    manifest_path = data / "manifest.json"
    digest = dataset_digest(spec)
    if manifest_path.is_file():
        old = json.loads(manifest_path.read_text()).get("digest")
        if old != digest:
            logger.warning("manifest digest mismatch in %s (%s on disk, %s requested); regenerating", data, old, digest)
    try:
        data.mkdir(parents=True, exist_ok=True)
        clips = {}
        for split in ("test", "train"):
            ids = []
            for c in spec.generate(split):
                write_clip(c, data / split)
                ids.append(c.clip_id)
            clips[split] = ids
        manifest = {"digest": digest, "dataset": spec.to_dict(), "clips": clips}
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {data}: {exc}") from None
    return data


def read_manifest(out: Path, expected: DatasetSpec | None = None) -> dict:
    path = out / "data" / "manifest.json"
    if not path.is_file():
        raise DataError(f"no dataset at {out / 'data'}; run 'generate' first")
    manifest = json.loads(path.read_text())
    if expected is not None and manifest.get("digest") != dataset_digest(expected):
        logger.warning("manifest digest mismatch: dataset on disk was generated from a different config")
    return manifest


def load_split(out: Path, manifest: dict, split: str):
    try:
        return [read_clip(clip_dir(out / "data" / split, cid)) for cid in manifest["clips"][split]]
    except ClipFormatError as exc:
        raise DataError(str(exc)) from None


# --- train ------------------------------------------------------------------


def checkpoint_path(out: Path) -> Path:
    return out / "segmenter.npz"


def cmd_train(cfg: ExperimentConfig, out: Path) -> Path:
    manifest = read_manifest(out, cfg.dataset)
    clips = load_split(out, manifest, "train")
    if not clips:
        raise DataError("empty dataset")
    res = train_reference(clips, cfg.train)
    path = save_checkpoint(res.model, checkpoint_path(out), cfg.train, extra={"dataset_digest": manifest["digest"]})
    print(f"trained {cfg.train.steps} steps, final loss {res.final_loss:.4f} -> {path}")
    return path


# --- run --------------------------------------------------------------------

MVC_COLS = [f"mvc{n}" for n in MVC_WINDOWS]
METRIC_COLS = ["miou", "wiou"] + MVC_COLS
TABLE_COLS = METRIC_COLS + ["fps"]


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def _ratio_tag(r: float) -> str:
    return f"r{r:g}"


def _run_one(args):
    method, ratio, clip_path, ckpt, adapt_dict, run_dir, digest = args
    torch.set_num_threads(1)
    model, _ = load_checkpoint(ckpt)
    clip = read_clip(clip_path)
    cfg = AdaptationConfig.from_dict({**adapt_dict, "warmup_ratio": ratio})
    res = run_method(method, clip, model, cfg)
    saved = res.save(Path(run_dir) / clip.clip_id)
    payload = json.loads((saved / "result.json").read_text())
    payload["experiment_digest"] = digest
    (saved / "result.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    K = clip.num_classes
    counts = res.metrics.counts
    row = {
        "clip_id": clip.clip_id,
        "method": method,
        "warmup_ratio": f"{ratio:g}",
        "eval_frames": res.predictions.shape[0],
        **{k: _fmt(v) for k, v in (("miou", res.metrics.miou), ("wiou", res.metrics.wiou))},
        **{f"mvc{n}": _fmt(res.metrics.mvc.get(n, float("nan"))) for n in MVC_WINDOWS},
        "param_digest": res.param_digest[:16],
    }
    for name in ("inter", "pred", "gt"):
        arr = getattr(counts, name)
        for k in range(K):
            row[f"{name}{k}"] = int(arr[k])
    timing = {"clip_id": clip.clip_id, "method": method, "warmup_ratio": f"{ratio:g}", "fps": _fmt(res.fps)}
    return row, timing


def write_csv(path: Path, rows: list[dict], digest: str) -> None:
    buf = io.StringIO()
    fields = ["config_digest"] + list(rows[0].keys())
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"config_digest": digest, **r})
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def aggregate_rows(rows: list[dict], timings: list[dict] | None = None) -> list[dict]:
    """Recompute one summary row per (method, ratio) from per-clip CSV rows.

    IoU is pooled from the count columns; mVC and FPS are means over clips.
    Deltas are relative to the ISS row with the same ratio (blank if absent).
    """
    digests = {r["config_digest"] for r in rows}
    if len(digests) > 1:
        raise DataError(f"refusing to aggregate rows from different configs: {sorted(digests)}")
    K = sum(1 for k in rows[0] if k.startswith("inter"))
    fps: dict[tuple, list[float]] = {}
    for t in timings or []:
        fps.setdefault((t["method"], t["warmup_ratio"]), []).append(float(t["fps"]))
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["warmup_ratio"]), []).append(r)
    out = []
    for (method, ratio), rs in groups.items():
        counts = ClassCounts(
            *(np.array([sum(int(r[f"{n}{k}"]) for r in rs) for k in range(K)]) for n in ("inter", "pred", "gt"))
        )
        s = {"method": method, "warmup_ratio": ratio, "clips": len(rs)}
        s["miou"] = miou_from_counts(counts)
        s["wiou"] = wiou_from_counts(counts)
        for c in MVC_COLS:
            vals = [float(r[c]) for r in rs if not math.isnan(float(r[c]))]
            s[c] = float(np.mean(vals)) if vals else float("nan")
        f = fps.get((method, ratio))
        s["fps"] = float(np.mean(f)) if f else float("nan")
        out.append(s)
    base = {s["warmup_ratio"]: s for s in out if s["method"] == "iss"}
    for s in out:
        b = base.get(s["warmup_ratio"])
        for c in TABLE_COLS:
            s[f"d_{c}"] = s[c] - b[c] if b is not None else float("nan")
    return out


def format_table(summary: list[dict], digest: str) -> str:
    head = ["method", "ratio"] + [c for c in TABLE_COLS]
    lines = [
        f"# config_digest {digest}",
        "# IoU pooled over all clips; mVC and FPS averaged per clip; deltas vs the ISS row at the same ratio",
    ]
    cells = [head]
    for s in summary:
        row = [s["method"], s["warmup_ratio"]]
        for c in TABLE_COLS:
            d = s[f"d_{c}"]
            delta = "" if math.isnan(d) else f" ({d:+.1f})"
            row.append(("nan" if math.isnan(s[c]) else f"{s[c]:.1f}") + delta)
        cells.append(row)
    widths = [max(len(r[i]) for r in cells) for i in range(len(head))]
    for r in cells:
        lines.append("  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))).rstrip())
    return "\n".join(lines) + "\n"


def cmd_run(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> str:
    ckpt = checkpoint_path(out)
    if not ckpt.is_file():
        raise DataError(f"missing checkpoint {ckpt}; run 'train' first")
    try:
        load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    manifest = read_manifest(out, cfg.dataset)
    clip_ids = manifest["clips"]["test"]
    if not clip_ids:
        raise DataError("empty dataset")
    digest = cfg.digest()
    adapt = cfg.adapt.to_dict()
    tasks = []
    for ratio in cfg.warmup_ratios:
        for method in cfg.methods:
            run_dir = out / "runs" / f"{method}_{_ratio_tag(ratio)}"
            for cid in clip_ids:
                tasks.append((method, ratio, str(clip_dir(out / "data" / "test", cid)), str(ckpt), adapt, str(run_dir), digest))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    rows = [r for r, _ in results]
    timings = [t for _, t in results]
    write_csv(out / "results.csv", rows, digest)
    write_csv(out / "timings.csv", timings, digest)
    summary = aggregate_rows(read_csv(out / "results.csv"), read_csv(out / "timings.csv"))
    table = format_table(summary, digest)
    (out / "table.txt").write_text(table)
    (out / "experiment.json").write_text(json.dumps({"digest": digest, "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    return table


# --- inspect ----------------------------------------------------------------


def colorize(pred: np.ndarray) -> np.ndarray:
    colors = np.round(CLASS_COLORS * 255).astype(np.uint8)
    return colors[pred.astype(np.int64) % len(colors)]


def cmd_inspect(run_dir: Path, images: Path | None = None) -> list[dict]:
    results = sorted(run_dir.rglob("result.json")) if run_dir.is_dir() else []
    if not results:
        raise DataError(f"no run artifacts (result.json) under {run_dir}")
    report = []
    for path in results:
        r = json.loads(path.read_text())
        diag = r.get("diagnostics", {})
        losses = diag.get("losses", [])
        fused = diag.get("fused_fraction", [])
        info = {
            "clip_id": r["clip_id"],
            "method": r["method"],
            "warmup_ratio": r["warmup_ratio"],
            "num_prompts": diag.get("num_prompts"),
            "num_tracks": diag.get("num_tracks"),
            "num_labeled": diag.get("num_labeled"),
            "num_losses": len(losses),
            "first_loss": losses[0] if losses else None,
            "last_loss": losses[-1] if losses else None,
            "fused_fraction": float(np.mean(fused)) if fused else None,
            "flags": ["fusion-only adaptation"] if diag.get("num_labeled") == 0 else [],
        }
        report.append(info)
        parts = [f"{info['method']}@{info['warmup_ratio']:g} {info['clip_id']}"]
        for k in ("num_prompts", "num_tracks", "num_labeled", "num_losses"):
            if info[k] is not None:
                parts.append(f"{k.removeprefix('num_')}={info[k]}")
        if losses:
            parts.append(f"loss {losses[0]:.2f}->{losses[-1]:.2f}")
        if info["fused_fraction"] is not None:
            parts.append(f"fused={info['fused_fraction']:.3f}")
        parts += [f"[{f}]" for f in info["flags"]]
        print("  ".join(parts))
        if images is not None:
            preds = read_predictions(path.parent / r.get("prediction_dir", "pred"))
            d = images / f"{r['method']}_{_ratio_tag(r['warmup_ratio'])}" / r["clip_id"]
            d.mkdir(parents=True, exist_ok=True)
            for t, p in enumerate(preds):
                Image.fromarray(colorize(p), mode="RGB").save(d / f"{r['eval_start'] + t:05d}.png")
    return report


# --- entry point --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vidtta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON experiment config")
        sp.add_argument("--preset", choices=["suite"], help="start from the seed-pinned synthetic suite")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. adapt.tau=0.7")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV} or ./runs)")

    common(sub.add_parser("generate", help="write synthetic train/test clips"))
    sp = sub.add_parser("train", help="train the reference segmenter")
    common(sp)
    sp.add_argument("--steps", type=int)
    sp = sub.add_parser("run", help="run methods over warm-up ratios and tabulate")
    common(sp)
    sp.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    sp.add_argument("--ratios", help="comma-separated warm-up ratios")
    sp.add_argument("--jobs", type=int, default=1, help="clip-level worker processes (1 = serial)")
    sp = sub.add_parser("inspect", help="print per-clip diagnostics of a run")
    sp.add_argument("run_dir")
    sp.add_argument("--images", help="write colour-mapped predictions here")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        if args.command == "inspect":
            cmd_inspect(Path(args.run_dir), Path(args.images) if args.images else None)
            return EXIT_OK
        overrides = list(args.set)
        if getattr(args, "steps", None) is not None:
            overrides.append(f"train.steps={args.steps}")
        if getattr(args, "methods", None):
            overrides.append(f"methods=[{args.methods}]")
        if getattr(args, "ratios", None):
            overrides.append(f"warmup_ratios=[{args.ratios}]")
        cfg = load_config(args.config, overrides, args.preset)
        out = output_root(args.out)
        torch.set_num_threads(1)
        if args.command == "generate":
            print(f"wrote dataset to {cmd_generate(cfg, out)}")
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "run":
            if args.jobs < 1:
                raise UsageError("--jobs must be >= 1")
            print(cmd_run(cfg, out, args.jobs), end="")
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ClipFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
