"""Dataset ingestion, confusion/mIoU evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from llmseg._io import atomic_write_bytes, atomic_write_json
from llmseg.config import RunConfig, read_class_list
from llmseg.ensemble import METHODS
from llmseg.masks import IGNORE_INDEX, LabelMap, load_labelmap, save_labelmap

log = logging.getLogger(__name__)

IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".bmp")
SWEEP_AXES = {
    "lambda": "lambda_super",
    "n_subclasses": "n_subclasses",
    "template": "templates",
    "ensemble_method": "ensemble_method",
    "prompt_mode": "prompt_mode",
}


class BenchmarkError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    images_dir: Path
    masks_dir: Path
    class_list: list
    split_file: Path | None = None
    ignore_index: int = IGNORE_INDEX

    @classmethod
    def from_config(cls, config: RunConfig) -> "DatasetSpec":
        if not (config.images_dir and config.masks_dir and config.class_list):
            raise BenchmarkError("dataset needs images_dir, masks_dir and class_list")
        return cls(Path(config.images_dir), Path(config.masks_dir), read_class_list(config.class_list),
                   Path(config.split_file) if config.split_file else None)

    @property
    def foreground(self) -> list:
        return list(self.class_list[1:])

    def sample_ids(self) -> list[str]:
        if self.split_file is not None:
            return [ln.strip() for ln in Path(self.split_file).read_text().splitlines() if ln.strip()]
        return sorted(p.stem for p in Path(self.masks_dir).glob("*.png"))

    def image_path(self, sample_id: str) -> Path | None:
        for ext in IMAGE_EXTS:
            p = Path(self.images_dir) / f"{sample_id}{ext}"
            if p.exists():
                return p
        return None

    def mask_path(self, sample_id: str) -> Path:
        return Path(self.masks_dir) / f"{sample_id}.png"

    def missing(self) -> list[str]:
        problems = []
        for sid in self.sample_ids():
            if self.image_path(sid) is None:
                problems.append(f"{sid}: image missing")
            if not self.mask_path(sid).exists():
                problems.append(f"{sid}: mask missing")
        return problems


@dataclass
class ConfusionCounts:
    num_classes: int
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.num_classes, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def accumulate_confusion(pred, gt, num_classes: int, counts: ConfusionCounts | None = None,
                         ignore_index: int = IGNORE_INDEX) -> ConfusionCounts:
    """Add one prediction/ground-truth pair to per-class tp/fp/fn counts.

    Ground-truth ``ignore_index`` pixels are skipped. A predicted index outside
    ``0..num_classes-1`` counts only as a miss for the true class.
    """
    p, g = _labels(pred).astype(np.int64), _labels(gt).astype(np.int64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    counts = counts or ConfusionCounts(num_classes)
    keep = g != ignore_index
    p, g = p[keep], g[keep]
    if (g >= num_classes).any() or (g < 0).any():
        raise ValueError("ground truth contains class indices outside the class list")
    valid_p = (p >= 0) & (p < num_classes)
    conf = np.bincount(g[valid_p] * num_classes + p[valid_p], minlength=num_classes * num_classes)
    conf = conf.reshape(num_classes, num_classes)
    tp = np.diag(conf)
    gt_total = np.bincount(g, minlength=num_classes)
    return ConfusionCounts(
        num_classes,
        counts.tp + tp,
        counts.fp + conf.sum(axis=0) - tp,
        counts.fn + gt_total - tp,
    )


@dataclass
class SegReport:
    class_names: list
    counts: ConfusionCounts
    config_hash: str = ""
    n_images: int = 0
    extra: dict = field(default_factory=dict)

    def evaluated(self) -> list[int]:
        c = self.counts
        return [i for i in range(c.num_classes) if c.tp[i] + c.fp[i] + c.fn[i] > 0]

    def iou_fraction(self, i: int) -> Fraction | None:
        c = self.counts
        denom = int(c.tp[i] + c.fp[i] + c.fn[i])
        return Fraction(int(c.tp[i]), denom) if denom else None

    @property
    def per_class_iou(self) -> dict:
        return {self.class_names[i]: float(self.iou_fraction(i)) for i in self.evaluated()}

    def miou_fraction(self, foreground_only: bool = False) -> Fraction | None:
        """Exact mean IoU over evaluated classes; ``None`` for an empty evaluation."""
        idx = [i for i in self.evaluated() if not (foreground_only and i == 0)]
        if not idx:
            return None
        return sum((self.iou_fraction(i) for i in idx), Fraction(0)) / len(idx)

    @property
    def miou(self) -> float:
        m = self.miou_fraction()
        return float("nan") if m is None else float(m)

    @property
    def miou_fg(self) -> float:
        m = self.miou_fraction(foreground_only=True)
        return float("nan") if m is None else float(m)

    @property
    def empty(self) -> bool:
        return not self.evaluated()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "tp", "fp", "fn", "iou"])
        c = self.counts
        for i, name in enumerate(self.class_names):
            iou = self.iou_fraction(i)
            w.writerow([name, int(c.tp[i]), int(c.fp[i]), int(c.fn[i]), "" if iou is None else repr(float(iou))])
        w.writerow(["miou_fg", "", "", "", repr(self.miou_fg)])
        w.writerow(["miou", "", "", "", repr(self.miou)])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'class':<20} {'IoU':>8}"]
        for name, v in self.per_class_iou.items():
            lines.append(f"{name:<20} {100 * v:8.2f}")
        lines.append(f"{'mIoU (fg only)':<20} {100 * self.miou_fg:8.2f}")
        lines.append(f"{'mIoU':<20} {100 * self.miou:8.2f}")
        if self.empty:
            lines.append("WARNING: empty evaluation (every pixel ignored)")
        if self.config_hash:
            lines.append(f"config {self.config_hash}, {self.n_images} image(s)")
        return "\n".join(lines) + "\n"


def evaluate_dirs(pred_dir, gt_dir, class_names, ids=None) -> SegReport:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    ids = ids if ids is not None else sorted(p.stem for p in gt_dir.glob("*.png"))
    missing = [i for i in ids if not (pred_dir / f"{i}.png").exists()]
    if missing:
        raise BenchmarkError(f"missing predictions for {len(missing)} sample(s): {', '.join(missing[:20])}")
    counts = ConfusionCounts(len(class_names))
    for i in ids:
        counts = accumulate_confusion(load_labelmap(pred_dir / f"{i}.png"), load_labelmap(gt_dir / f"{i}.png"),
                                      len(class_names), counts)
    return SegReport(list(class_names), counts, n_images=len(ids))


def run_benchmark(dataset: DatasetSpec, config: RunConfig, out_dir=None, segmenter=None) -> SegReport:
    """Segment every sample, score it, and (optionally) persist a run directory.

    The run directory holds ``config.json``, ``subclasses.json``,
    ``report.csv``, ``report.txt`` and ``pred/{id}.png``.
    """
    from llmseg.pipeline import Segmenter

    problems = dataset.missing()
    if problems:
        raise BenchmarkError("dataset incomplete:\n  " + "\n  ".join(problems))
    seg = segmenter or Segmenter(config, class_names=dataset.foreground)
    seg.prepare()
    ids = dataset.sample_ids()
    paths = [dataset.image_path(i) for i in ids]
    counts = ConfusionCounts(len(dataset.class_list))
    failures = []
    preds = {}
    for sid, (path, res) in zip(ids, seg.segment_many(paths)):
        if isinstance(res, Exception):
            failures.append(f"{sid}: {res}")
            continue
        preds[sid] = res.labels
        counts = accumulate_confusion(res.labels, load_labelmap(dataset.mask_path(sid)), len(dataset.class_list),
                                      counts, dataset.ignore_index)
    if failures:
        raise BenchmarkError("segmentation failed:\n  " + "\n  ".join(failures))
    report = SegReport(list(dataset.class_list), counts, config.config_hash(), len(ids))
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_json(out / "config.json", {"config": config.canonical(), "config_hash": config.config_hash()})
        atomic_write_json(out / "subclasses.json", {
            c: (ct.subclass_set.to_dict() if ct.subclass_set else None) for c, ct in sorted(seg._text.items())
        })
        atomic_write_bytes(out / "report.csv", report.to_csv().encode())
        atomic_write_bytes(out / "report.txt", report.table().encode())
        for sid, lab in preds.items():
            save_labelmap(out / "pred" / f"{sid}.png", lab)
    return report


def parse_sweep(spec: str):
    """``axis=v1,v2,...`` or, for numeric axes, ``axis=start:stop:step`` (inclusive)."""
    if "=" not in spec:
        raise ValueError(f"sweep must look like axis=values, got {spec!r}")
    axis, raw = spec.split("=", 1)
    axis = axis.strip()
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    raw = raw.strip()
    if axis in ("lambda", "n_subclasses") and raw.count(":") == 2:
        start, stop, step = (Fraction(x) for x in raw.split(":"))
        if step <= 0:
            raise ValueError("sweep step must be positive")
        vals, v = [], start
        while v <= stop:
            vals.append(v)
            v += step
    else:
        vals = [x.strip() for x in raw.split(",") if x.strip()]
    if axis == "lambda":
        return axis, [float(Fraction(v)) for v in vals]
    if axis == "n_subclasses":
        return axis, [int(Fraction(v)) for v in vals]
    if axis == "prompt_mode":
        return axis, [v.upper() for v in vals]
    if axis == "ensemble_method":
        bad = [v for v in vals if v not in METHODS]
        if bad:
            raise ValueError(f"unknown ensemble methods {bad}")
    return axis, vals


def ablate(axis: str, values, dataset: DatasetSpec, config: RunConfig, out_csv=None, features=None) -> list[dict]:
    """One benchmark row per swept value, same dataset and features."""
    from llmseg.pipeline import Segmenter

    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    key = SWEEP_AXES[axis]
    rows = []
    for v in values:
        cfg = config.model_copy(update={key: [v] if axis == "template" else v})
        cfg = RunConfig.model_validate(cfg.model_dump())
        seg = Segmenter(cfg, features=features, class_names=dataset.foreground)
        rep = run_benchmark(dataset, cfg, segmenter=seg)
        row = {"axis": axis, "value": v, "miou": rep.miou, "miou_fg": rep.miou_fg, "config_hash": rep.config_hash,
               "note": "stand-in definition" if v == "cross_attention" else ""}
        for name in dataset.class_list:
            row[f"iou_{name}"] = rep.per_class_iou.get(name, "")
        rows.append(row)
        log.info("%s=%s mIoU=%.4f", axis, v, rep.miou)
    if out_csv is not None:
        atomic_write_bytes(out_csv, rows_to_csv(rows).encode())
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def report_json(report: SegReport) -> str:
    return json.dumps({"per_class_iou": report.per_class_iou, "miou": report.miou, "miou_fg": report.miou_fg,
                       "config_hash": report.config_hash}, sort_keys=True)
