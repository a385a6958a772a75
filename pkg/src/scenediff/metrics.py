"""Realism and downstream metrics.

MMD compares pooled feature sets of real and generated scenes under a chosen
kernel; (m)IoU comes from persisted confusion matrices with the moving
classes excluded; class distributions and per-class gap tables quantify where
generated data diverges from real data.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .labels import CLASS_NAMES, MOVING_CLASS_IDS


# --------------------------------- MMD ---------------------------------

def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled set; 1.0 if degenerate."""
    pooled = np.concatenate([a, b], axis=0)
    d2 = _pairwise_sq_dists(pooled, pooled)
    upper = d2[np.triu_indices(d2.shape[0], k=1)]
    med = float(np.sqrt(np.median(upper))) if upper.size else 0.0
    return med if med > 0 else 1.0


def _kernel_matrix(a, b, kernel: str, bandwidth: float | None):
    if kernel == "linear":
        return a @ b.T
    if kernel == "rbf":
        if bandwidth is None:
            raise ValueError("rbf kernel needs a bandwidth")
        return np.exp(-_pairwise_sq_dists(a, b) / (2.0 * bandwidth * bandwidth))
    raise ValueError(f"unknown kernel {kernel!r}")


def mmd(
    a,
    b,
    kernel: str = "rbf",
    estimator: str = "unbiased",
    bandwidth: float | None = None,
    clamp: bool = True,
) -> float:
    """Squared maximum mean discrepancy between two feature sets (n, d).

    The default kernel is a Gaussian RBF with the median-distance bandwidth
    of the pooled sets. The unbiased estimator excludes the diagonal terms;
    the biased one keeps them (and is exactly zero when a == b). Negative
    unbiased estimates clamp to zero for reporting unless clamp=False.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("feature sets must be 2-D (count, dim)")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("feature sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite feature values")
    if kernel == "rbf" and bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    kaa = _kernel_matrix(a, a, kernel, bandwidth)
    kbb = _kernel_matrix(b, b, kernel, bandwidth)
    kab = _kernel_matrix(a, b, kernel, bandwidth)
    m, n = a.shape[0], b.shape[0]
    if estimator == "biased":
        value = kaa.mean() + kbb.mean() - 2.0 * kab.mean()
    elif estimator == "unbiased":
        if m < 2 or n < 2:
            raise ValueError("unbiased estimator needs at least two samples per set")
        term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
        value = term_a + term_b - 2.0 * kab.mean()
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    value = float(value)
    return max(value, 0.0) if clamp else value


# ----------------------------- confusion / IoU -----------------------------

@dataclass
class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns prediction. Class ids are
    1-based, stored at index id - 1."""

    counts: np.ndarray
    ignored: frozenset = field(default_factory=lambda: frozenset(MOVING_CLASS_IDS))

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if counts.size and counts.min() < 0:
            raise ValueError("counts must be non-negative")
        self.counts = counts
        self.ignored = frozenset(int(c) for c in self.ignored)

    @classmethod
    def empty(cls, class_count: int, ignored=None) -> "ConfusionMatrix":
        ignored = MOVING_CLASS_IDS if ignored is None else ignored
        return cls(np.zeros((class_count, class_count), dtype=np.int64), frozenset(ignored))

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    def add(self, truth, pred) -> None:
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if truth.shape != pred.shape:
            raise ValueError("truth/prediction length mismatch")
        if truth.size == 0:
            return
        c = self.class_count
        if truth.min() < 1 or truth.max() > c or pred.min() < 1 or pred.max() > c:
            raise ValueError(f"labels must lie in [1, {c}]")
        np.add.at(self.counts, (truth - 1, pred - 1), 1)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_count != self.class_count:
            raise ValueError("class count mismatch")
        return ConfusionMatrix(self.counts + other.counts, self.ignored)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["truth\\pred"] + [str(c) for c in range(1, self.class_count + 1)])
        for cid in range(1, self.class_count + 1):
            writer.writerow([cid] + self.counts[cid - 1].tolist())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, ignored=None) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
        ignored = MOVING_CLASS_IDS if ignored is None else ignored
        return cls(counts, frozenset(ignored))


def iou(conf: ConfusionMatrix):
    """Per-class IoU (None for classes with no support and no predictions)
    and the mean over evaluated, non-ignored classes, as percentages."""
    counts = conf.counts
    per_class: dict[int, float | None] = {}
    included = []
    for cid in range(1, conf.class_count + 1):
        i = cid - 1
        tp = counts[i, i]
        fp = counts[:, i].sum() - tp
        fn = counts[i, :].sum() - tp
        if tp + fp + fn == 0:
            per_class[cid] = None
            continue
        value = 100.0 * tp / (tp + fp + fn)
        per_class[cid] = value
        if cid not in conf.ignored:
            included.append(value)
    mean = float(np.mean(included)) if included else float("nan")
    return per_class, mean


def class_distribution(scenes, class_count: int | None = None) -> np.ndarray:
    """Voxel fraction per class over a scene collection; index 0 unused,
    entries 1..C sum to one."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty scene collection")
    if class_count is None:
        class_count = max(s.class_count for s in scenes)
    counts = np.zeros(class_count + 1, dtype=np.int64)
    for scene in scenes:
        counts += np.bincount(scene.labels, minlength=class_count + 1)
    total = counts.sum()
    if total == 0:
        raise ValueError("no occupied voxels in the collection")
    frac = counts.astype(np.float64) / total
    frac[0] = 0.0
    return frac


def gap_table(real_iou: dict, synth_iou: dict) -> dict:
    """Signed per-class difference synthetic - real; class sets must match."""
    if set(real_iou) != set(synth_iou):
        raise ValueError("class sets differ between the two IoU tables")
    gaps = {}
    for cid in sorted(real_iou):
        r, s = real_iou[cid], synth_iou[cid]
        gaps[cid] = None if (r is None or s is None) else s - r
    return gaps


# ------------------------------- reports -------------------------------

def _class_name(cid: int) -> str:
    return CLASS_NAMES.get(cid, f"class-{cid}")


def format_iou_report(per_class: dict, mean: float, ignored=MOVING_CLASS_IDS):
    """(plain text, csv text) pair mirroring the per-class table layout."""
    lines = ["class            IoU[%]"]
    rows = [["class", "iou_percent", "ignored"]]
    for cid in sorted(per_class):
        value = per_class[cid]
        shown = "n/a" if value is None else f"{value:.2f}"
        note = "  (ignored)" if cid in ignored else ""
        lines.append(f"{_class_name(cid):<15} {shown:>7}{note}")
        rows.append([_class_name(cid), "" if value is None else f"{value:.4f}", int(cid in ignored)])
    lines.append(f"{'mIoU':<15} {mean:>7.2f}")
    rows.append(["mIoU", f"{mean:.4f}", ""])
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    return "\n".join(lines) + "\n", buf.getvalue()


def format_gap_report(real_iou: dict, synth_iou: dict):
    gaps = gap_table(real_iou, synth_iou)
    lines = ["class            real    synth     gap"]
    rows = [["class", "real", "synth", "gap"]]
    for cid in sorted(gaps):
        r, s, g = real_iou[cid], synth_iou[cid], gaps[cid]
        fmt = lambda v: "n/a" if v is None else f"{v:.2f}"
        sign = "" if g is None or g < 0 else "+"
        lines.append(f"{_class_name(cid):<15} {fmt(r):>7} {fmt(s):>7}  {sign}{fmt(g)}")
        rows.append([_class_name(cid), fmt(r), fmt(s), fmt(g)])
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    return "\n".join(lines) + "\n", buf.getvalue()


def format_distribution_report(fractions: np.ndarray):
    lines = ["class            fraction"]
    rows = [["class", "fraction"]]
    for cid in range(1, fractions.shape[0]):
        lines.append(f"{_class_name(cid):<15} {fractions[cid]:.6f}")
        rows.append([_class_name(cid), f"{fractions[cid]:.8f}"])
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    return "\n".join(lines) + "\n", buf.getvalue()
