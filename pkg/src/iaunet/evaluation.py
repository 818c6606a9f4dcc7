"""Thresholded inference, Dice/IoU, comparison tables and error overlays."""

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data.io import image_to_chw, read_image, read_mask
from .errors import DimensionError
from .nn import functional as F
from .nn.tensor import Tensor, no_grad

OVERLAY_COLORS = {"tp": (0, 255, 0), "fp": (255, 0, 0), "fn": (0, 0, 255)}


def worker_count():
    """Worker threads for embarrassingly parallel loops, capped by ``IAUNET_THREADS``."""
    try:
        return max(1, int(os.environ.get("IAUNET_THREADS", "1")))
    except ValueError:
        return 1


def predict_logits(model, image):
    x = np.asarray(image, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    model.eval()
    with no_grad():
        return model.forward_segment(Tensor(x)).data


def predict_mask(model, image, threshold=0.5):
    """``image[C,H,W]`` or ``[N,C,H,W]`` -> bool mask (binary) or int64 class map.

    Binary models mark pixels with ``sigmoid(logit) >= threshold``; multiclass
    models take the argmax over classes.
    """
    single = np.ndim(image) == 3
    logits = predict_logits(model, image)
    if logits.shape[1] == 1:
        out = F.sigmoid(Tensor(logits)).data[:, 0] >= threshold
    else:
        out = logits.argmax(axis=1)
    return out[0] if single else out


def _pair(pred, gt):
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p.astype(bool), g.astype(bool)


def dice_score(pred, gt):
    """``2|P&G| / (|P|+|G|)``; 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    return 1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom


def iou_score(pred, gt):
    """``|P&G| / |P|G|``; 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    union = int((p | g).sum())
    return 1.0 if union == 0 else int((p & g).sum()) / union


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)  # {"id", "dice", "iou"}
    aggregate: dict = field(default_factory=dict)
    fold_id: int | None = None

    @classmethod
    def from_rows(cls, rows, fold_id=None):
        rows = sorted(rows, key=lambda r: r["id"])
        dice = np.array([r["dice"] for r in rows], dtype=np.float64)
        iou = np.array([r["iou"] for r in rows], dtype=np.float64)
        agg = {"dice_mean": float(dice.mean()), "dice_std": float(dice.std()),
               "iou_mean": float(iou.mean()), "iou_std": float(iou.std()), "count": len(rows)}
        return cls(rows, agg, fold_id)

    def to_dict(self):
        return {"per_image": self.per_image, "aggregate": self.aggregate, "fold_id": self.fold_id}

    def write_json(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _record_id(rec):
    return rec.record_id or str(rec.image_path)


def evaluate(model, records, threshold=0.5, fold_id=None, on_prediction=None):
    """Predict every record, score it against its mask and aggregate.

    Rows are ordered by record id; ``on_prediction(record, image, pred, gt)``
    is called in that order (e.g. to write overlays).
    """
    records = sorted(records, key=_record_id)

    def one(rec):
        image = read_image(rec.image_path)
        gt = read_mask(rec.mask_path) > 0
        pred = predict_mask(model, image_to_chw(image), threshold)
        pred = pred if pred.dtype == bool else pred > 0
        return image, pred, gt

    threads = min(worker_count(), max(1, len(records)))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, records))
    else:
        results = [one(r) for r in records]
    rows = []
    for rec, (image, pred, gt) in zip(records, results):
        rows.append({"id": _record_id(rec), "dice": dice_score(pred, gt), "iou": iou_score(pred, gt)})
        if on_prediction is not None:
            on_prediction(rec, image, pred, gt)
    return MetricReport.from_rows(rows, fold_id)


# comparison tables


def _scores(entry):
    if isinstance(entry, MetricReport):
        return {"Dice": entry.aggregate["dice_mean"], "IoU": entry.aggregate["iou_mean"]}
    return {"Dice": entry["dice"], "IoU": entry["iou"]}


def comparison_table(reports):
    """``reports``: sequence of ``(method, MetricReport | {"dice", "iou"})``.

    Returns ``(text, csv_text)``. Values print with 4 decimals; in the text
    table every method tied for the best printed value is wrapped in ``**``,
    and the CSV carries the winners in a ``best`` column.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("comparison table needs at least one report")
    names = [name for name, _ in reports]
    scores = [_scores(entry) for _, entry in reports]
    rows = []
    for metric in ("Dice", "IoU"):
        vals = [f"{s[metric]:.4f}" for s in scores]
        top = max(float(v) for v in vals)
        best = [float(v) == top for v in vals]
        rows.append((metric, vals, best))

    cells = [["Metric"] + names]
    for metric, vals, best in rows:
        cells.append([metric] + [f"**{v}**" if b else v for v, b in zip(vals, best)])
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric"] + names + ["best"])
    for metric, vals, best in rows:
        writer.writerow([metric] + vals + [";".join(n for n, b in zip(names, best) if b)])
    return text, buf.getvalue()


def write_comparison_table(reports, out_prefix=None):
    """Render the table; with ``out_prefix`` also write ``<prefix>.txt`` and ``<prefix>.csv``."""
    text, csv_text = comparison_table(reports)
    if out_prefix is not None:
        prefix = Path(out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".txt").write_text(text)
        prefix.with_suffix(".csv").write_text(csv_text)
    return text


# overlays


def overlay_array(image, pred, gt, alpha=0.4):
    """Blend TP green, FP red and FN blue into ``image[H,W,3]`` uint8; TN pixels untouched."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[2] != 3:
        img = np.round(np.clip(img.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    p, g = _pair(pred, gt)
    if img.shape[:2] != p.shape:
        raise DimensionError(f"image {img.shape[:2]} and masks {p.shape} differ in size")
    out = img.astype(np.float64)
    for key, sel in (("tp", p & g), ("fp", p & ~g), ("fn", ~p & g)):
        out[sel] = (1.0 - alpha) * out[sel] + alpha * np.array(OVERLAY_COLORS[key], dtype=np.float64)
    return np.round(out).astype(np.uint8)


def write_overlay(image, pred_mask, gt_mask, path, alpha=0.4):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay_array(image, pred_mask, gt_mask, alpha), mode="RGB").save(path, format="PNG")
    return path


# embedding separation


def embedding_distances(model, anchors, masks, positives, negatives, batch_size=8):
    """Eval-mode anchor-positive and anchor-negative distances, one per triplet."""
    model.eval()
    d_ap, d_an = [], []
    with no_grad():
        for s in range(0, len(anchors), batch_size):
            sl = slice(s, s + batch_size)
            e_a = model.forward_embed_anchor(anchors[sl], masks[sl]).data
            e_p = model.forward_embed_reference(positives[sl]).data
            e_n = model.forward_embed_reference(negatives[sl]).data
            d_ap.append(np.linalg.norm(e_a - e_p, axis=1))
            d_an.append(np.linalg.norm(e_a - e_n, axis=1))
    return np.concatenate(d_ap), np.concatenate(d_an)


def margin_stats(d_ap, d_an, margin):
    """Mean distances and the share of triplets with ``d_an - d_ap >= margin``."""
    d_ap, d_an = np.asarray(d_ap), np.asarray(d_an)
    return {"d_ap_mean": float(d_ap.mean()), "d_an_mean": float(d_an.mean()),
            "margin_satisfaction": float(np.mean(d_an - d_ap >= margin)),
            "ordered_rate": float(np.mean(d_an > d_ap))}
