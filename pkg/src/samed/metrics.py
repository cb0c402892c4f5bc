"""Per-class Dice and Hausdorff evaluation of label maps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import ShapeError

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class MetricsReport:
    case_id: str
    per_class_dsc: dict[int, float]
    per_class_hd: dict[int, float]
    mean_dsc: float = field(init=False)
    mean_hd: float = field(init=False)

    def __post_init__(self):
        fg = [c for c in self.per_class_dsc if c != 0]
        self.mean_dsc = float(np.mean([self.per_class_dsc[c] for c in fg])) if fg else 0.0
        self.mean_hd = float(np.mean([self.per_class_hd[c] for c in fg])) if fg else 0.0


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"maps have different shapes {a.shape} and {b.shape}")


def dsc(pred, truth, class_id: int) -> float:
    """Dice percentage for one class; 100 when both maps lack it, 0 when one does."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check(pred, truth)
    p = pred == class_id
    g = truth == class_id
    ps, gs = int(p.sum()), int(g.sum())
    if ps == 0 and gs == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(p, g).sum()) / (ps + gs)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` removed by one 4-connected erosion (outside counts as empty)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from each src boundary pixel to the nearest dst boundary pixel
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def hausdorff(pred_mask, truth_mask, percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in pixels.

    Both empty gives 0; exactly one empty gives the image diagonal. With
    ``percentile < 100`` the given percentile of all boundary-to-boundary
    distances is returned instead of the maximum (95 gives HD95).
    """
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(truth_mask, dtype=bool)
    _check(p, g)
    has_p, has_g = p.any(), g.any()
    if not has_p and not has_g:
        return 0.0
    if not (has_p and has_g):
        return math.hypot(*p.shape)
    bp, bg = boundary(p), boundary(g)
    d_pg, d_gp = _directed(bp, bg), _directed(bg, bp)
    if percentile >= 100.0:
        return float(max(d_pg.max(), d_gp.max()))
    return float(np.percentile(np.concatenate([d_pg, d_gp]), percentile))


def case_report(pred, truth, num_classes: int, case_id: str = "", hd_percentile: float = 100.0
                ) -> MetricsReport:
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check(pred, truth)
    d = {c: dsc(pred, truth, c) for c in range(num_classes)}
    h = {c: hausdorff(pred == c, truth == c, hd_percentile) for c in range(num_classes)}
    return MetricsReport(case_id, d, h)


def aggregate(reports: list[MetricsReport], case_id: str = "mean") -> MetricsReport:
    """Per-class means over cases, reduced in the given (case-id) order."""
    classes = list(reports[0].per_class_dsc)
    d = {c: float(np.mean([r.per_class_dsc[c] for r in reports])) for c in classes}
    h = {c: float(np.mean([r.per_class_hd[c] for r in reports])) for c in classes}
    return MetricsReport(case_id, d, h)


def evaluate(model, samples, class_names=None, batch_size: int = 16, hd_percentile: float = 100.0
             ) -> tuple[list[MetricsReport], MetricsReport]:
    """Run ``model.predict`` on every sample and score it against its label."""
    samples = sorted(samples, key=lambda s: s.sample_id)
    k = model.cfg.num_classes
    reports = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        preds = model.predict(np.stack([s.image for s in chunk]))
        reports += [case_report(p, s.label, k, s.sample_id, hd_percentile)
                    for p, s in zip(preds, chunk)]
    return reports, aggregate(reports)


def evaluate_predictions(preds, truths, num_classes: int, ids=None) -> tuple[list[MetricsReport], MetricsReport]:
    ids = ids or [f"case{i:04d}" for i in range(len(preds))]
    reports = [case_report(p, t, num_classes, i) for p, t, i in zip(preds, truths, ids)]
    return reports, aggregate(reports)


def _columns(class_names, num_classes):
    names = list(class_names) if class_names else [f"class{c}" for c in range(num_classes)]
    return names[1:]


def report_rows(reports: list[MetricsReport], mean: MetricsReport, class_names=None):
    k = len(mean.per_class_dsc)
    header = ["case", "DSC", "HD"] + _columns(class_names, k)
    rows = []
    for r in list(reports) + [mean]:
        rows.append([r.case_id, r.mean_dsc, r.mean_hd] + [r.per_class_dsc[c] for c in range(1, k)])
    return header, rows


def to_csv(reports, mean, class_names=None) -> str:
    header, rows = report_rows(reports, mean, class_names)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header + [f"HD_{n}" for n in header[3:]])
    k = len(mean.per_class_dsc)
    for r, row in zip(list(reports) + [mean], rows):
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]]
                   + [repr(float(r.per_class_hd[c])) for c in range(1, k)])
    return buf.getvalue()


def format_table(header: list[str], rows: list[list], digits: int = 2) -> str:
    """Aligned plain-text table; floats rendered with ``digits`` decimals."""
    cells = [[str(h) for h in header]]
    for row in rows:
        cells.append([f"{v:.{digits}f}" if isinstance(v, float) else str(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for j, r in enumerate(cells):
        lines.append(" | ".join(c.rjust(w) if j and i else c.ljust(w)
                                for i, (c, w) in enumerate(zip(r, widths))))
        if j == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def to_table(reports, mean, class_names=None) -> str:
    header, rows = report_rows(reports, mean, class_names)
    return format_table(header, rows)
