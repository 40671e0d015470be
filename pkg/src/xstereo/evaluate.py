"""Disparity sweep, two-head disparity estimate, recall@n and fold reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import DisparityPoint, crop_batch

THRESHOLDS = (1, 3, 5)
SWEEP_MODES = ("windowed", "wide")


@dataclass
class SweepResult:
    """Head scores for the ``d_max + 1`` candidate windows of one query point.

    ``scores_*`` are raw ``(K, 2)`` head outputs (None for an ablated head).
    """
    d_max: int
    scores_corr: np.ndarray | None
    scores_concat: np.ndarray | None

    @property
    def disparities(self):
        return np.arange(self.d_max + 1) - self.d_max // 2

    @staticmethod
    def _same_prob(scores):
        if scores is None:
            return None
        return torch.softmax(torch.as_tensor(scores, dtype=torch.float64), -1)[:, 1].numpy()

    @property
    def y_corr(self):
        return self._same_prob(self.scores_corr)

    @property
    def y_concat(self):
        return self._same_prob(self.scores_concat)


@dataclass
class DisparityEstimate:
    d_hat: float
    d_corr: int | None
    d_concat: int | None
    point: DisparityPoint | None = None


def _best(scores, disparities):
    # softmax "same" probability is monotone in the score margin, so argmax on
    # the margin avoids saturation ties; np.argmax keeps the smallest index.
    margin = scores[:, 1] - scores[:, 0]
    return int(disparities[int(np.argmax(margin))])


def estimate(sweep: SweepResult, point=None) -> DisparityEstimate:
    disp = sweep.disparities
    d_corr = _best(sweep.scores_corr, disp) if sweep.scores_corr is not None else None
    d_concat = _best(sweep.scores_concat, disp) if sweep.scores_concat is not None else None
    if d_corr is None and d_concat is None:
        raise ValueError("sweep holds no head scores")
    if d_corr is None:
        d_hat = float(d_concat)
    elif d_concat is None:
        d_hat = float(d_corr)
    else:
        d_hat = (d_corr + d_concat) / 2
    return DisparityEstimate(d_hat, d_corr, d_concat, point)


def _value(v, attr):
    return float(getattr(v, attr)) if hasattr(v, attr) else float(v)


def recall(estimates, gts, n) -> float:
    """Fraction of points with ``|d_hat - gt| <= n``.

    Accepts DisparityEstimate/DisparityPoint objects or plain numbers.
    """
    if len(estimates) != len(gts):
        raise ValueError(f"{len(estimates)} estimates but {len(gts)} ground-truth points")
    if not estimates:
        raise ValueError("recall of an empty point set")
    pred = np.array([_value(e, "d_hat") for e in estimates])
    gt = np.array([_value(g, "d") for g in gts])
    return float(np.mean(np.abs(pred - gt) <= n))


@torch.no_grad()
def sweep_batch(model, rgb, wide, d_max, mode="windowed"):
    """Sweeps a batch of query points.

    ``rgb`` is ``(N, 3, P, P)`` and ``wide`` is ``(N, 1, P, P + d_max)``; window
    ``i`` of the wide patch starts at column ``i`` and stands for disparity
    ``i - d_max/2``.  Returns a list of SweepResult.
    """
    if mode not in SWEEP_MODES:
        raise ValueError(f"unknown sweep mode {mode!r}")
    n, _, p, _ = rgb.shape
    k = d_max + 1
    if wide.shape[0] != n or wide.shape[-2] != p or wide.shape[-1] != p + d_max:
        raise ValueError(f"wide patch must be (N, 1, {p}, {p + d_max}), got {tuple(wide.shape)}")
    model.eval()
    f_rgb = model.rgb(rgb)
    if mode == "windowed":
        windows = wide.unfold(-1, p, 1)                     # (N, 1, P, K, P)
        windows = windows.permute(0, 3, 1, 2, 4).reshape(n * k, 1, p, p)
        f_lwir = model.lwir(windows)
    else:
        f_wide = model.lwir(wide)                           # (N, C, P, P + d_max)
        c = f_wide.shape[1]
        f_lwir = f_wide.unfold(-1, p, 1).permute(0, 3, 1, 2, 4).reshape(n * k, c, p, p)
    f_rgb = f_rgb.repeat_interleave(k, dim=0)
    corr, concat = model.heads_scores(f_rgb, f_lwir)
    for t in (corr, concat):
        if t is not None and not torch.isfinite(t).all():
            raise FloatingPointError("non-finite head scores during sweep")
    corr = corr.double().view(n, k, 2).numpy() if corr is not None else None
    concat = concat.double().view(n, k, 2).numpy() if concat is not None else None
    return [SweepResult(d_max, None if corr is None else corr[i], None if concat is None else concat[i])
            for i in range(n)]


def sweep(model, rgb_patch, wide_lwir_patch, d_max, mode="windowed") -> SweepResult:
    """Single-point sweep over ``(3, P, P)`` and ``(1, P, P + d_max)`` patches."""
    rgb = torch.as_tensor(rgb_patch).unsqueeze(0)
    wide = torch.as_tensor(wide_lwir_patch).unsqueeze(0)
    return sweep_batch(model, rgb, wide, d_max, mode)[0]


def query_patches(manifest, points, patch_size, d_max):
    """Standardized RGB patches and wide LWIR strips for ``points``."""
    rgb = np.empty((len(points), 3, patch_size, patch_size), np.float32)
    wide = np.empty((len(points), 1, patch_size, patch_size + d_max), np.float32)
    for i, p in enumerate(points):
        rgb[i] = crop_batch(manifest.standardized(p.frame_id, "rgb", p.mirrored),
                            p.x, p.y, patch_size, patch_size)[0]
        wide[i] = crop_batch(manifest.standardized(p.frame_id, "lwir", p.mirrored),
                             p.x, p.y, patch_size, patch_size + d_max)[0]
    return torch.from_numpy(rgb), torch.from_numpy(wide)


def predict_points(model, manifest, points, d_max, mode="windowed", chunk=64):
    out = []
    for start in range(0, len(points), chunk):
        pts = points[start:start + chunk]
        rgb, wide = query_patches(manifest, pts, model.patch_size, d_max)
        for p, res in zip(pts, sweep_batch(model, rgb, wide, d_max, mode)):
            out.append(estimate(res, p))
    return out


def recalls(estimates, gts=None):
    gts = gts if gts is not None else [e.point for e in estimates]
    return {n: recall(estimates, gts, n) for n in THRESHOLDS}


@dataclass
class FoldReport:
    fold_id: str
    recall: dict[int, float]
    n_points: int

    def to_dict(self):
        return {"fold_id": self.fold_id, "n_points": self.n_points,
                "recall": {str(k): v for k, v in self.recall.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["fold_id"]), {int(k): float(v) for k, v in d["recall"].items()}, int(d["n_points"]))


@dataclass
class AggregateReport:
    folds: list[FoldReport]
    mean: dict[int, float]
    std: dict[int, float]
    single_fold: bool = False
    label: str = "xstereo"

    def to_dict(self):
        return {"label": self.label, "single_fold": self.single_fold,
                "folds": [f.to_dict() for f in self.folds],
                "mean": {str(k): v for k, v in self.mean.items()},
                "std": {str(k): v for k, v in self.std.items()}}

    def table(self):
        """Text table: one row per fold plus the mean +- std row, recall in percent."""
        head = "| Method | " + " | ".join(f"<= {n} pixel{'s' if n > 1 else ''} error" for n in THRESHOLDS) + " |"
        rule = "|" + "---|" * (len(THRESHOLDS) + 1)
        rows = [head, rule]
        for f in self.folds:
            rows.append(f"| {self.label} fold {f.fold_id} | "
                        + " | ".join(f"{100 * f.recall[n]:.1f}" for n in THRESHOLDS) + " |")
        rows.append(f"| {self.label} (mean) | "
                    + " | ".join(f"{100 * self.mean[n]:.1f} ± {100 * self.std[n]:.1f}" for n in THRESHOLDS)
                    + " |")
        if self.single_fold:
            rows.append("")
            rows.append("single fold: standard deviation reported as 0")
        return "\n".join(rows)


def evaluate_fold(model, test_manifest, d_max, fold_id="0", mode="windowed"):
    """Returns ``(FoldReport, estimates)`` for every point of ``test_manifest``."""
    points = test_manifest.points
    if not points:
        raise ValueError(f"fold {fold_id}: no test points")
    estimates = predict_points(model, test_manifest, points, d_max, mode)
    return FoldReport(str(fold_id), recalls(estimates, points), len(points)), estimates


def cross_validate(reports, label="xstereo") -> AggregateReport:
    if not reports:
        raise ValueError("no fold reports")
    mean, std = {}, {}
    for n in THRESHOLDS:
        vals = np.array([r.recall[n] for r in reports])
        mean[n] = float(vals.mean())
        std[n] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return AggregateReport(list(reports), mean, std, single_fold=len(reports) == 1, label=label)


def write_predictions(path, estimates):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "x", "y", "gt_d", "d_corr", "d_concat", "d_hat"])
        for e in estimates:
            p = e.point
            fid = p.frame_id + ("@mirror" if p.mirrored else "")
            w.writerow([fid, p.x, p.y, p.d,
                        "" if e.d_corr is None else e.d_corr,
                        "" if e.d_concat is None else e.d_concat,
                        f"{e.d_hat:g}"])


def write_report(path, report):
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def read_report(path):
    """Reads a fold report or an aggregate report written by write_report."""
    data = json.loads(Path(path).read_text())
    if "folds" in data:
        return [FoldReport.from_dict(f) for f in data["folds"]]
    return [FoldReport.from_dict(data)]


def plot_recall(path, report: AggregateReport, max_n=8, curves=None):
    """Recall-vs-threshold plot; ``curves`` optionally maps labels to {n: recall}."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ns = list(THRESHOLDS)
    for f in report.folds:
        ax.plot(ns, [f.recall[n] for n in ns], "o--", alpha=0.5, label=f"fold {f.fold_id}")
    ax.errorbar(ns, [report.mean[n] for n in ns], yerr=[report.std[n] for n in ns],
                fmt="o-", color="k", capsize=3, label="mean")
    for label, vals in (curves or {}).items():
        xs = sorted(vals)
        ax.plot(xs, [vals[x] for x in xs], "-", label=label)
    ax.set_xlabel("allowed error (pixels)")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def error_curve(estimates, max_n=8):
    gts = [e.point for e in estimates]
    return {n: recall(estimates, gts, n) for n in range(max_n + 1)}


def draw_overlay(path, manifest, estimates, frame_id):
    """RGB frame with ground-truth (green) and predicted (red) match columns marked."""
    from PIL import Image, ImageDraw

    rgb = manifest.image(frame_id, "rgb")
    im = Image.fromarray(np.round(rgb * 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(im)
    for e in estimates:
        p = e.point
        if p.frame_id != frame_id or p.mirrored:
            continue
        gx, px = p.x + p.d, p.x + e.d_hat
        draw.point((p.x, p.y), fill=(255, 255, 0))
        draw.line([(gx, p.y - 3), (gx, p.y + 3)], fill=(0, 255, 0))
        draw.line([(px, p.y - 3), (px, p.y + 3)], fill=(255, 0, 0))
    im.save(path)
