"""Rank correlation, Fisher-z averaging, MSE and the seven-condition protocol."""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import denormalize
from .numerics.tensor import no_grad
from .pcmi import CONDITIONS, INCOMPLETE_CONDITIONS, mask_from_condition

FISHER_CLAMP = 1.0 - 1e-7
# Table column order: the six incomplete conditions, their average, then full.
REPORT_COLUMNS = INCOMPLETE_CONDITIONS + ("average", "vfa")


class DegenerateRankingError(ValueError):
    """Correlation is undefined because one side is constant."""


def spearman(pred, gt):
    """Pearson correlation of average ranks (ties share the mean rank)."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"spearman: lengths differ ({pred.size} vs {gt.size})")
    if pred.size < 2:
        raise ValueError("spearman: need at least 2 values")
    rp = rankdata(pred) - (pred.size + 1) / 2.0
    rg = rankdata(gt) - (gt.size + 1) / 2.0
    den = math.sqrt(float(rp @ rp) * float(rg @ rg))
    if den == 0.0:
        side = "prediction" if float(rp @ rp) == 0.0 else "ground truth"
        raise DegenerateRankingError(f"degenerate ranking: {side} is constant")
    return float(rp @ rg) / den


def fisher_average(rhos):
    rhos = np.asarray(rhos, dtype=np.float64).ravel()
    if rhos.size == 0:
        raise ValueError("fisher_average: empty list")
    if np.any(np.abs(rhos) > 1.0) or not np.all(np.isfinite(rhos)):
        raise ValueError(f"fisher_average: correlations must lie in [-1, 1], got {rhos.tolist()}")
    z = np.arctanh(np.clip(rhos, -FISHER_CLAMP, FISHER_CLAMP))
    return float(np.tanh(z.mean()))


def mse(pred_raw, gt_raw):
    pred_raw = np.asarray(pred_raw, dtype=np.float64).ravel()
    gt_raw = np.asarray(gt_raw, dtype=np.float64).ravel()
    if pred_raw.shape != gt_raw.shape:
        raise ValueError(f"mse: lengths differ ({pred_raw.size} vs {gt_raw.size})")
    if pred_raw.size == 0:
        raise ValueError("mse: empty input")
    d = pred_raw - gt_raw
    return float(d @ d) / d.size


# ---------------------------------------------------------------------------
# condition protocol
# ---------------------------------------------------------------------------


@dataclass
class ConditionReport:
    rows: dict  # condition -> {"rho": float, "mse": float}
    incomplete_average: dict
    diagnostics: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict)  # condition -> raw predictions
    targets: list = field(default_factory=list)

    @property
    def full(self):
        return self.rows["vfa"]

    def column(self, name):
        return self.incomplete_average if name == "average" else self.rows[name]

    def to_dict(self, with_predictions=False):
        d = {
            "conditions": {c: dict(self.rows[c]) for c in CONDITIONS},
            "incomplete_average": dict(self.incomplete_average),
            "full": dict(self.full),
            "diagnostics": self.diagnostics,
        }
        if with_predictions:
            d["predictions"] = {c: list(v) for c, v in self.predictions.items()}
            d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            rows={c: dict(d["conditions"][c]) for c in CONDITIONS},
            incomplete_average=dict(d["incomplete_average"]),
            diagnostics=d.get("diagnostics", {}),
            predictions=d.get("predictions", {}),
            targets=d.get("targets", []),
        )


def predict(model, ds, batch_size=64):
    """Eval-mode normalised predictions for every sample of ``ds``."""
    out = np.empty(len(ds))
    with no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            out[idx] = model(ds, idx, train=False)["y_hat"].data
    return out


def evaluate_condition(model, ds, condition, batch_size=64):
    """(rho, mse, raw predictions) with every sample forced to ``condition``."""
    masked = ds.with_mask(mask_from_condition(condition))
    pred = denormalize(predict(model, masked, batch_size), ds.xi)
    return spearman(pred, ds.scores), mse(pred, ds.scores), pred


def evaluate_conditions(model, ds, batch_size=64):
    rows, preds = {}, {}
    for c in CONDITIONS:
        rho, err, pred = evaluate_condition(model, ds, c, batch_size)
        rows[c] = {"rho": rho, "mse": err}
        preds[c] = pred.tolist()
    avg = {
        "rho": fisher_average([rows[c]["rho"] for c in INCOMPLETE_CONDITIONS]),
        "mse": float(np.mean([rows[c]["mse"] for c in INCOMPLETE_CONDITIONS])),
    }
    diag = model.scalar_state() if hasattr(model, "scalar_state") else {}
    return ConditionReport(rows, avg, diag, preds, ds.scores.tolist())


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def write_report_json(report, path, with_predictions=True):
    with open(path, "w") as fh:
        json.dump(report.to_dict(with_predictions), fh, indent=2)


def read_report_json(path):
    with open(path) as fh:
        return ConditionReport.from_dict(json.load(fh))


def write_report_csv(reports, path):
    """One row per method; conditions as columns holding rho and mse."""
    header = ["method"]
    for col in REPORT_COLUMNS:
        header += [f"{col}_rho", f"{col}_mse"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for name, rep in reports.items():
            row = [name]
            for col in REPORT_COLUMNS:
                cell = rep.column(col)
                row += [f"{cell['rho']:.6f}", f"{cell['mse']:.6f}"]
            w.writerow(row)


def format_table(reports):
    """Plain-text table, ``rho / mse`` per cell."""
    names = list(reports)
    width = max([len("method")] + [len(n) for n in names])
    head = "method".ljust(width) + "".join(f" | {c:>15}" for c in REPORT_COLUMNS)
    lines = [head, "-" * len(head)]
    for n in names:
        cells = "".join(
            f" | {reports[n].column(c)['rho']:6.3f} / {reports[n].column(c)['mse']:6.2f}" for c in REPORT_COLUMNS
        )
        lines.append(n.ljust(width) + cells)
    return "\n".join(lines)


def scatter_svg(pred, gt, title="", size=320, pad=40):
    """Predicted (y) against ground truth (x) with the identity line."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    lo = float(min(pred.min(), gt.min()))
    hi = float(max(pred.max(), gt.max()))
    if hi == lo:
        hi = lo + 1.0
    span = size - 2 * pad

    def sx(v):
        return pad + (v - lo) / (hi - lo) * span

    def sy(v):
        return size - pad - (v - lo) / (hi - lo) * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
        'stroke="gray" stroke-dasharray="4,3"/>',
    ]
    for p, g in zip(pred, gt):
        parts.append(f'<circle cx="{sx(g):.2f}" cy="{sy(p):.2f}" r="2.5" fill="steelblue" fill-opacity="0.7"/>')
    parts += [
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="11">ground truth</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 12 {size / 2})">predicted</text>',
        f'<text x="{pad}" y="{size - pad + 14}" font-size="9">{lo:.1f}</text>',
        f'<text x="{size - pad}" y="{size - pad + 14}" font-size="9" text-anchor="end">{hi:.1f}</text>',
        f'<text x="{size / 2}" y="20" text-anchor="middle" font-size="12">{title}</text>',
        "</svg>",
    ]
    return "\n".join(parts)


def write_scatter_plots(report, directory, prefix="scatter"):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for c in CONDITIONS:
        path = os.path.join(directory, f"{prefix}_{c}.svg")
        rho = report.rows[c]["rho"]
        with open(path, "w") as fh:
            fh.write(scatter_svg(report.predictions[c], report.targets, f"{{{','.join(c)}}}  rho={rho:.3f}"))
        paths.append(path)
    return paths
