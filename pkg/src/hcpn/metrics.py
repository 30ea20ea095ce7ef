"""Region similarity J, boundary accuracy F, temporal stability T, and reports.

Conventions: recall counts frames with J above 0.5; decay is the mean of the
first quarter of frames minus the mean of the last quarter; T warps each mask
forward by the ground-truth flow and reports the mean ``1 - J`` against the
next mask (lower is better, not comparable to published DAVIS T numbers).
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background or to the image edge."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, _CROSS, border_value=0)


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= radius * radius


def default_tolerance(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape[:2])))


def boundary_measure(pred, gt, tol: int | None = None) -> float:
    """F-measure of boundary pixels matched within ``tol`` pixels (Euclidean disc)."""
    pred, gt = _pair(pred, gt)
    if tol is None:
        tol = default_tolerance(pred.shape)
    if tol < 0:
        raise ContractError(f"tolerance must be >= 0, got {tol}")
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    se = disc(tol)
    near_g = ndimage.binary_dilation(bg, se) if tol > 0 else bg
    near_p = ndimage.binary_dilation(bp, se) if tol > 0 else bp
    precision = np.count_nonzero(bp & near_g) / n_p
    recall = np.count_nonzero(bg & near_p) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def warp_mask(mask: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Forward-splat foreground pixels by their rounded flow; pixels leaving the frame are dropped."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    ty = ys + np.rint(flow[ys, xs, 1]).astype(int)
    tx = xs + np.rint(flow[ys, xs, 0]).astype(int)
    ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    out = np.zeros_like(mask)
    out[ty[ok], tx[ok]] = True
    return out


def temporal_stability(masks: list, flows: list) -> float:
    if len(flows) != len(masks) - 1:
        raise ContractError(f"{len(masks)} masks need {len(masks) - 1} flow fields, got {len(flows)}")
    if len(masks) < 2:
        return 0.0
    return float(np.mean([1.0 - region_similarity(warp_mask(m, f), m_next)
                          for m, f, m_next in zip(masks, flows, masks[1:])]))


def _quarter(n: int) -> int:
    return max(1, n // 4)


@dataclass
class SequenceEval:
    name: str
    j: list
    f: list
    t: float
    attributes: tuple = ()

    @staticmethod
    def _stats(values: list) -> dict:
        v = np.asarray(values, dtype=float)
        q = _quarter(len(v))
        return {"mean": float(v.mean()), "recall": float(np.mean(v > 0.5)),
                "decay": float(v[:q].mean() - v[-q:].mean())}

    @property
    def j_stats(self) -> dict:
        return self._stats(self.j)

    @property
    def f_stats(self) -> dict:
        return self._stats(self.f)

    def summary(self) -> dict:
        js, fs = self.j_stats, self.f_stats
        return {"sequence": self.name, "J_mean": js["mean"], "J_recall": js["recall"], "J_decay": js["decay"],
                "F_mean": fs["mean"], "F_recall": fs["recall"], "F_decay": fs["decay"], "T_mean": self.t,
                "frames": len(self.j)}


@dataclass
class EvalReport:
    sequences: list = field(default_factory=list)

    def aggregate(self) -> dict:
        """Mean over sequences of each per-sequence statistic."""
        rows = [s.summary() for s in self.sequences]
        keys = [k for k in rows[0] if k not in ("sequence", "frames")]
        agg = {k: float(np.mean([r[k] for r in rows])) for k in keys}
        agg["frames"] = int(sum(r["frames"] for r in rows))
        return agg

    def by_attribute(self) -> dict:
        groups = defaultdict(list)
        for s in self.sequences:
            for tag in s.attributes:
                groups[tag].append(s)
        return {tag: {"J_mean": float(np.mean([s.j_stats["mean"] for s in seqs])),
                      "F_mean": float(np.mean([s.f_stats["mean"] for s in seqs])),
                      "sequences": len(seqs)}
                for tag, seqs in sorted(groups.items())}


def evaluate_sequence(preds: list, gts: list, flows: list, attributes=(), name: str = "",
                      tol: int | None = None) -> SequenceEval:
    """Per-frame J and F plus sequence T for one sequence of binary masks."""
    if len(preds) == 0:
        raise ContractError("cannot evaluate an empty sequence")
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions for {len(gts)} ground-truth masks")
    if len(flows) != len(preds) - 1:
        raise ContractError(f"{len(preds)} frames need {len(preds) - 1} flow fields, got {len(flows)}")
    j = [region_similarity(p, g) for p, g in zip(preds, gts)]
    f = [boundary_measure(p, g, tol) for p, g in zip(preds, gts)]
    return SequenceEval(name, j, f, temporal_stability(preds, flows), tuple(attributes))


def evaluate_sequences(items) -> EvalReport:
    """``items``: iterable of ``(name, preds, gts, flows, attributes)``."""
    report = EvalReport()
    for name, preds, gts, flows, attrs in items:
        report.sequences.append(evaluate_sequence(preds, gts, flows, attrs, name))
    return report


# ---------------------------------------------------------------- report files


def write_frame_csv(report: EvalReport, path) -> int:
    """One row per evaluated frame: ``seq, frame, J, F``. Returns the row count."""
    rows = 0
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["seq", "frame", "J", "F"])
        for s in report.sequences:
            for t, (jv, fv) in enumerate(zip(s.j, s.f)):
                out.writerow([s.name, t, f"{jv:.6f}", f"{fv:.6f}"])
                rows += 1
    return rows


def markdown_summary(report: EvalReport) -> str:
    cols = ["J_mean", "J_recall", "J_decay", "F_mean", "F_recall", "F_decay", "T_mean"]
    head = "| Sequence | " + " | ".join(cols) + " |"
    sep = "|" + "---|" * (len(cols) + 1)
    lines = [head, sep]
    for s in report.sequences:
        row = s.summary()
        lines.append(f"| {s.name} | " + " | ".join(f"{row[c]:.3f}" for c in cols) + " |")
    agg = report.aggregate()
    lines.append("| **mean** | " + " | ".join(f"{agg[c]:.3f}" for c in cols) + " |")
    attrs = report.by_attribute()
    if attrs:
        lines += ["", "| Attribute | J_mean | F_mean | Sequences |", "|---|---|---|---|"]
        lines += [f"| {k} | {v['J_mean']:.3f} | {v['F_mean']:.3f} | {v['sequences']} |" for k, v in attrs.items()]
    return "\n".join(lines) + "\n"


def svg_plot(report: EvalReport, width: int = 480, height: int = 240) -> str:
    """Per-frame J as one polyline per sequence."""
    pad = 30
    longest = max(len(s.j) for s in report.sequences)
    sx = (width - 2 * pad) / max(1, longest - 1)
    sy = height - 2 * pad
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{sy}" fill="none" stroke="#999"/>',
             f'<text x="4" y="{pad + 4}" font-size="10">1</text>',
             f'<text x="4" y="{height - pad}" font-size="10">0</text>']
    for i, s in enumerate(report.sequences):
        pts = " ".join(f"{pad + t * sx:.1f},{pad + (1 - v) * sy:.1f}" for t, v in enumerate(s.j))
        parts.append(f'<polyline fill="none" stroke="{palette[i % len(palette)]}" points="{pts}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_reports(report: EvalReport, report_dir, svg: bool = True) -> dict:
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": report_dir / "frames.csv", "markdown": report_dir / "summary.md"}
    write_frame_csv(report, paths["csv"])
    paths["markdown"].write_text(markdown_summary(report))
    if svg:
        paths["svg"] = report_dir / "j_per_frame.svg"
        paths["svg"].write_text(svg_plot(report))
    return paths
