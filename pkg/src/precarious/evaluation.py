"""Caltech-style detection scoring: greedy matching, miss rate vs FPPI."""

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .boxes import iou, iou_matrix, to_array  # noqa: F401  (iou is part of this module's surface)
from .scene import PERSON_TYPES


@dataclass
class MatchResult:
    det_matched: np.ndarray  # bool per detection, in input order
    gt_matched: np.ndarray   # bool per ground truth
    det_order: np.ndarray    # detection indices by descending score

    @property
    def true_positives(self):
        return int(self.det_matched.sum())

    @property
    def false_positives(self):
        return int((~self.det_matched).sum())

    @property
    def missed(self):
        return int((~self.gt_matched).sum())


def _det_arrays(dets):
    boxes = to_array([d.box for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return boxes, scores


def match_detections(dets, gts, overlap=0.5):
    """Greedy matching: best-scored detection first, to the unmatched GT it overlaps most."""
    boxes, scores = _det_arrays(dets)
    gt_arr = to_array(gts)
    order = np.argsort(-scores, kind="stable")
    det_matched = np.zeros(len(dets), dtype=bool)
    gt_matched = np.zeros(len(gt_arr), dtype=bool)
    if len(dets) and len(gt_arr):
        ious = iou_matrix(boxes, gt_arr)
        for d in order:
            cand = np.where(gt_matched, -1.0, ious[d])
            g = int(np.argmax(cand))
            if cand[g] >= overlap:
                gt_matched[g] = True
                det_matched[d] = True
    return MatchResult(det_matched, gt_matched, order)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fppi: np.ndarray
    miss_rate: np.ndarray
    overlap: float

    @property
    def points(self):
        return list(zip(self.thresholds.tolist(), self.fppi.tolist(), self.miss_rate.tolist()))

    def __len__(self):
        return len(self.thresholds)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("threshold,fppi,miss_rate\n")
            for t, f, m in self.points:
                fh.write(f"{t:.10g},{f:.10g},{m:.10g}\n")


def compute_roc(per_image, overlap=0.5):
    """ROC over every distinct detection score.

    Greedy matching processes detections by descending score, so the match
    at threshold t is the prefix of the full match; one pass per image is
    enough to get every point.
    """
    total_gt = sum(len(gts) for _, gts in per_image)
    if total_gt == 0:
        raise ValueError("ROC needs at least one ground truth")
    n_images = len(per_image)
    all_scores, all_tp = [], []
    for dets, gts in per_image:
        if not dets:
            continue
        m = match_detections(dets, gts, overlap)
        all_scores.append(np.array([d.score for d in dets]))
        all_tp.append(m.det_matched)
    if not all_scores:
        return RocCurve(np.zeros(0), np.zeros(0), np.zeros(0), overlap)
    scores = np.concatenate(all_scores)
    tp = np.concatenate(all_tp)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    # last position of each distinct score group
    last = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0]
    thr = scores[last][::-1]
    fppi = (cum_fp[last] / n_images)[::-1]
    mr = ((total_gt - cum_tp[last]) / total_gt)[::-1]
    return RocCurve(thr, fppi, mr, overlap)


def roc_by_rematching(per_image, overlap=0.5):
    """Slow reference: re-run the matcher at every threshold."""
    total_gt = sum(len(gts) for _, gts in per_image)
    if total_gt == 0:
        raise ValueError("ROC needs at least one ground truth")
    thresholds = sorted({d.score for dets, _ in per_image for d in dets})
    rows = []
    for t in thresholds:
        tp = fp = 0
        for dets, gts in per_image:
            kept = [d for d in dets if d.score >= t]
            m = match_detections(kept, gts, overlap)
            tp += m.true_positives
            fp += m.false_positives
        rows.append((t, fp / len(per_image), (total_gt - tp) / total_gt))
    return rows


def interpolate_miss_rate(curve, fppi_target=0.1):
    """Miss rate at ``fppi_target`` and whether the value had to be clamped.

    Interpolation is linear in log(fppi) between the bracketing points. When
    the lower neighbour sits at fppi 0 the curve is read as a step (its miss
    rate is kept). Targets outside the curve's fppi range clamp to the
    nearest endpoint.
    """
    if len(curve) == 0:
        return 1.0, True
    f = np.asarray(curve.fppi, dtype=np.float64)
    m = np.asarray(curve.miss_rate, dtype=np.float64)
    exact = f == fppi_target
    if exact.any():
        return float(m[exact].min()), False
    if fppi_target < f.min():
        return float(m[f == f.min()].min()), True
    if fppi_target > f.max():
        return float(m[f == f.max()].min()), True
    lo_f = f[f < fppi_target].max()
    hi_f = f[f > fppi_target].min()
    lo_m = m[f == lo_f].min()
    hi_m = m[f == hi_f].min()
    if lo_f <= 0:
        return float(lo_m), False
    t = (math.log(fppi_target) - math.log(lo_f)) / (math.log(hi_f) - math.log(lo_f))
    return float(lo_m + t * (hi_m - lo_m)), False


def miss_rate_at(curve, fppi_target=0.1):
    return interpolate_miss_rate(curve, fppi_target)[0]


def plot_roc_svg(curves, path, labels=None, fppi_target=0.1):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "precarious"
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, c in enumerate(curves):
        name = labels[i] if labels else f"overlap {c.overlap:g}"
        mr = miss_rate_at(c, fppi_target)
        f = np.maximum(c.fppi, 1e-4)
        ax.step(f, c.miss_rate, where="post", label=f"{100 * mr:.2f}% {name}")
    ax.set_xscale("log")
    ax.set_xlim(1e-3, 1e1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("miss rate")
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


@dataclass
class DatasetStats:
    n_images: int
    people_per_image: dict   # count -> percentage of images
    person_types: dict       # type -> percentage of people

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("kind,key,percent\n")
            for k, v in self.people_per_image.items():
                fh.write(f"people_per_image,{k},{v:.10g}\n")
            for k, v in self.person_types.items():
                fh.write(f"person_type,{k},{v:.10g}\n")

    def plot_svg(self, path):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        matplotlib.rcParams["svg.hashsalt"] = "precarious"
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
        a.bar([str(k) for k in self.people_per_image], list(self.people_per_image.values()))
        a.set_xlabel("people per image")
        a.set_ylabel("% of images")
        b.bar(list(self.person_types), list(self.person_types.values()))
        b.set_ylabel("% of people")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def dataset_stats(labels):
    """People-per-image histogram and person-type distribution, in percent."""
    n = len(labels)
    if n == 0:
        return DatasetStats(0, {}, {})
    counts = Counter(len(l.boxes) for l in labels)
    people = {k: 100.0 * counts[k] / n for k in sorted(counts)}
    types = Counter(t for l in labels for t in l.person_types)
    total = sum(types.values())
    dist = {t: 100.0 * types[t] / total for t in PERSON_TYPES if total} if total else {}
    return DatasetStats(n, people, dist)
