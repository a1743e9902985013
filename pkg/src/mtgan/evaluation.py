"""Palette alignment, segmentation metrics and depth metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PaletteEntry:
    label_id: int
    color: tuple
    name: str
    ignored: bool = False


class Palette:
    """Ordered label space; ids contiguous from 0, colors distinct, exactly one ignored."""

    def __init__(self, entries: Sequence[PaletteEntry]):
        entries = list(entries)
        if not entries:
            raise ValueError("palette is empty")
        ids = [e.label_id for e in entries]
        if sorted(ids) != list(range(len(entries))):
            raise ValueError(f"palette label ids must be unique and contiguous from 0, got {ids}")
        colors = [tuple(int(c) for c in e.color) for e in entries]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be pairwise distinct")
        if any(not 0 <= c <= 255 for col in colors for c in col):
            raise ValueError("palette colors must lie in [0, 255]")
        if sum(e.ignored for e in entries) != 1:
            raise ValueError("palette needs exactly one entry marked ignored")
        self.entries = sorted(entries, key=lambda e: e.label_id)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def colors(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.uint8)

    @property
    def ignored_id(self) -> int:
        return next(e.label_id for e in self.entries if e.ignored)

    @property
    def class_ids(self) -> list:
        return [e.label_id for e in self.entries if not e.ignored]

    def id_of(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.label_id
        raise KeyError(name)

    def colorize(self, labels: np.ndarray) -> np.ndarray:
        return self.colors[labels]

    # -- text format: "id r g b name [ignored]" -------------------------------------

    def dumps(self) -> str:
        lines = ["# id r g b name"]
        for e in self.entries:
            r, g, b = e.color
            lines.append(f"{e.label_id} {r} {g} {b} {e.name}" + (" ignored" if e.ignored else ""))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Palette":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            ignored = parts[-1] == "ignored"
            if ignored:
                parts = parts[:-1]
            if len(parts) != 5:
                raise ValueError(f"palette line {lineno}: expected 'id r g b name', got {raw!r}")
            try:
                lid, r, g, b = (int(p) for p in parts[:4])
            except ValueError as exc:
                raise ValueError(f"palette line {lineno}: {exc}") from None
            entries.append(PaletteEntry(lid, (r, g, b), parts[4], ignored))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "Palette":
        return cls.loads(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


_CITYSCAPES = [
    ("road", (128, 64, 128)), ("sidewalk", (244, 35, 232)), ("building", (70, 70, 70)),
    ("wall", (102, 102, 156)), ("fence", (190, 153, 153)), ("pole", (153, 153, 153)),
    ("traffic_light", (250, 170, 30)), ("traffic_sign", (220, 220, 0)),
    ("vegetation", (107, 142, 35)), ("terrain", (152, 251, 152)), ("sky", (70, 130, 180)),
    ("person", (220, 20, 60)), ("rider", (255, 0, 0)), ("car", (0, 0, 142)),
    ("truck", (0, 0, 70)), ("bus", (0, 60, 100)), ("train", (0, 80, 100)),
    ("motorcycle", (0, 0, 230)), ("bicycle", (119, 11, 32)),
]


def cityscapes_palette() -> Palette:
    """The 19 Cityscapes training classes plus one ignored label (black)."""
    entries = [PaletteEntry(i, c, n) for i, (n, c) in enumerate(_CITYSCAPES)]
    entries.append(PaletteEntry(len(entries), (0, 0, 0), "void", ignored=True))
    return Palette(entries)


def align_palette(semantic_rgb: np.ndarray, palette: Palette) -> np.ndarray:
    """Nearest palette color per pixel (Euclidean RGB); ties go to the lowest id."""
    img = np.asarray(semantic_rgb, dtype=np.float64)
    colors = palette.colors.astype(np.float64)
    d2 = ((img[..., None, :] - colors) ** 2).sum(axis=-1)
    # argmin returns the first minimum, i.e. the lowest label id
    return np.argmin(d2, axis=-1).astype(np.int64)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray,
                     palette: Palette) -> tuple[np.ndarray, int]:
    """K x K counts (rows gt, cols pred) over non-ignored gt pixels, plus that pixel count.

    A prediction of the ignored label is wrong for its gt row but has no column.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvaluationError(f"label maps differ in shape: {pred.shape} vs {gt.shape}")
    classes = palette.class_ids
    k = len(classes)
    index = np.full(len(palette), -1, dtype=np.int64)
    index[classes] = np.arange(k)
    keep = gt != palette.ignored_id
    g = index[gt[keep]]
    p = index[pred[keep]]
    valid_p = p >= 0
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (g[valid_p], p[valid_p]), 1)
    return cm, int(keep.sum())


@dataclass
class SegMetrics:
    per_pixel_acc: float
    per_class_acc: float
    mean_iou: float


def seg_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray, palette: Palette) -> SegMetrics:
    cm, total = confusion_matrix(pred_labels, gt_labels, palette)
    if total == 0:
        raise EvaluationError("no valid pixels")
    gt = np.asarray(gt_labels)
    diag = np.diag(cm).astype(np.float64)
    rows = np.array([(gt == c).sum() for c in palette.class_ids], dtype=np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    per_pixel = diag.sum() / total
    present = rows > 0
    per_class = float(np.mean(diag[present] / rows[present]))
    union = rows + cols - diag
    seen = union > 0
    mean_iou = float(np.mean(diag[seen] / union[seen]))
    return SegMetrics(float(per_pixel), per_class, mean_iou)


@dataclass
class DepthMetrics:
    rmse_mm: float
    mae_mm: float
    irmse_km: float
    imae_km: float


MIN_DEPTH_MM = 1.0


def depth_metrics(pred_mm: np.ndarray, gt_mm: np.ndarray) -> DepthMetrics:
    """RMSE/MAE in mm and iRMSE/iMAE in 1/km over pixels with gt > 0."""
    pred_mm = np.asarray(pred_mm, dtype=np.float64)
    gt_mm = np.asarray(gt_mm, dtype=np.float64)
    if pred_mm.shape != gt_mm.shape:
        raise EvaluationError(f"depth maps differ in shape: {pred_mm.shape} vs {gt_mm.shape}")
    valid = gt_mm > 0
    if not valid.any():
        raise EvaluationError("no valid pixels")
    d = np.maximum(pred_mm[valid], MIN_DEPTH_MM)
    g = gt_mm[valid]
    err = d - g
    # 1/m -> 1/km is a factor of 1000; d is in mm so 1/d_m = 1000 / d_mm
    inv_err = (1000.0 / d - 1000.0 / g) * 1000.0
    m = DepthMetrics(
        rmse_mm=float(np.sqrt(np.mean(err ** 2))),
        mae_mm=float(np.mean(np.abs(err))),
        irmse_km=float(np.sqrt(np.mean(inv_err ** 2))),
        imae_km=float(np.mean(np.abs(inv_err))),
    )
    assert m.rmse_mm >= m.mae_mm * (1 - 1e-12), "RMSE < MAE"
    return m


def lower_median(values: np.ndarray) -> float:
    """Median taking the lower middle element for even counts."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise EvaluationError("median of an empty set")
    return float(v[(v.size - 1) // 2])


def median_scale_align(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, float]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = (gt > 0) & (pred > 0)
    if not valid.any():
        raise EvaluationError("median_scale_align: no pixel with gt > 0 and pred > 0")
    med_pred = lower_median(pred[valid])
    if med_pred == 0:
        raise EvaluationError("median_scale_align: zero median prediction")
    factor = lower_median(gt[valid]) / med_pred
    return pred * factor, factor


# -- reports --------------------------------------------------------------------------

REPORT_HEADER = ("split", "n", "per_pixel_acc", "per_class_acc", "mean_iou",
                 "rmse_mm", "mae_mm", "irmse_km", "imae_km")


@dataclass
class MetricsReport:
    split: str
    n: int
    per_pixel_acc: float = float("nan")
    per_class_acc: float = float("nan")
    mean_iou: float = float("nan")
    rmse_mm: float = float("nan")
    mae_mm: float = float("nan")
    irmse_km: float = float("nan")
    imae_km: float = float("nan")

    def validate(self) -> None:
        for name in ("per_pixel_acc", "per_class_acc", "mean_iou"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0.0 <= v <= 1.0:
                raise EvaluationError(f"{name}={v} outside [0, 1]")
        for name in ("rmse_mm", "mae_mm", "irmse_km", "imae_km"):
            v = getattr(self, name)
            if not np.isnan(v) and v < 0:
                raise EvaluationError(f"{name}={v} negative")
        if not np.isnan(self.rmse_mm) and self.rmse_mm < self.mae_mm * (1 - 1e-12):
            raise EvaluationError("RMSE < MAE")

    def row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


def write_reports(path, reports: Iterable[MetricsReport]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in reports:
        r.validate()
        writer.writerow(r.row())
    Path(path).write_text(buf.getvalue())


def evaluate_segmentation(pred_rgbs: Iterable[np.ndarray], gt_ids: Iterable[np.ndarray],
                          palette: Palette) -> SegMetrics:
    """Palette-align every prediction and score all pixels of the split together."""
    preds, gts = [], []
    for rgb, gt in zip(pred_rgbs, gt_ids):
        preds.append(align_palette(rgb, palette).ravel())
        gts.append(np.asarray(gt).ravel())
    return seg_metrics(np.concatenate(preds), np.concatenate(gts), palette)


def evaluate_depth(preds_mm: Iterable[np.ndarray], gts_mm: Iterable[np.ndarray]) -> DepthMetrics:
    """Median-align each prediction to its ground truth, then pool all valid pixels."""
    aligned, gts = [], []
    for pred, gt in zip(preds_mm, gts_mm):
        scaled, _ = median_scale_align(pred, gt)
        aligned.append(scaled.ravel())
        gts.append(np.asarray(gt, dtype=np.float64).ravel())
    return depth_metrics(np.concatenate(aligned), np.concatenate(gts))
