"""Segment-based detection metrics and posterior binarization.

Posteriors are thresholded per class (strictly greater), then cleaned with a
per-class binary median filter. Metrics follow the segment-based convention:
a class counts as active in a 1 s segment iff any frame inside is active;
per segment, substitutions S = min(FN, FP), deletions D = FN - S and
insertions I = FP - S; the error rate is (sum S + D + I) / (sum Nref).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError

DEFAULT_SEGMENT_S = 1.0
DEFAULT_SMOOTH_WINDOW = 27
F1_UNDEFINED_FLAG = "f1_undefined_no_activity"
ER_UNDEFINED_FLAG = "er_undefined_empty_reference"


@dataclass
class ThresholdPolicy:
    """Fixed global threshold or per-class calibrated thresholds."""

    kind: str = "fixed"  # "fixed" | "calibrated"
    value: float = 0.5
    per_class: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "calibrated"):
            raise ArgumentError(f"unknown threshold policy kind {self.kind!r}")
        if self.kind == "fixed":
            if not 0.0 < self.value < 1.0:
                raise ArgumentError(f"threshold must be in (0,1), got {self.value}")
        else:
            if self.per_class is None:
                raise ArgumentError("calibrated policy needs per-class thresholds")
            self.per_class = np.asarray(self.per_class, dtype=np.float64)
            if np.any(self.per_class <= 0.0) or np.any(self.per_class >= 1.0):
                raise ArgumentError("per-class thresholds must be in (0,1)")

    def thresholds(self, n_classes: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(n_classes, self.value)
        if self.per_class.size != n_classes:
            raise DimensionError(
                f"{self.per_class.size} thresholds for {n_classes} classes"
            )
        return self.per_class


def threshold_posteriors(posteriors: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Per-class strict-greater thresholding of (M, N) posteriors."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if np.any(posteriors < 0.0) or np.any(posteriors > 1.0):
        raise ArgumentError("posteriors must lie in [0, 1]")
    return (posteriors > np.asarray(thresholds)[:, None]).astype(np.float64)


def median_smooth(binary: np.ndarray, window: int = DEFAULT_SMOOTH_WINDOW) -> np.ndarray:
    """Per-class binary median filter (zero-padded, centered, odd window)."""
    if window < 1 or window % 2 == 0:
        raise ArgumentError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return binary.astype(np.float64)
    pad = window // 2
    padded = np.pad(np.asarray(binary, dtype=np.float64), ((0, 0), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, window, axis=1)
    return (windows.sum(axis=2) > window // 2).astype(np.float64)


def binarize(
    posteriors: np.ndarray,
    policy: ThresholdPolicy,
    smooth_window: int = DEFAULT_SMOOTH_WINDOW,
) -> np.ndarray:
    """Threshold then median-smooth; returns a binary (M, N) matrix."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    raw = threshold_posteriors(posteriors, policy.thresholds(posteriors.shape[0]))
    return median_smooth(raw, smooth_window)


@dataclass
class SegmentCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_ref: int = 0
    per_segment: list = field(default_factory=list)  # (S, D, I, Nref) rows

    def merge(self, other: "SegmentCounts") -> "SegmentCounts":
        return SegmentCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            substitutions=self.substitutions + other.substitutions,
            deletions=self.deletions + other.deletions,
            insertions=self.insertions + other.insertions,
            n_ref=self.n_ref + other.n_ref,
            per_segment=self.per_segment + other.per_segment,
        )


def _segment_activity(binary: np.ndarray, frames_per_segment: int) -> np.ndarray:
    m, n = binary.shape
    n_segments = -(-n // frames_per_segment)
    active = np.zeros((m, n_segments), dtype=bool)
    for s in range(n_segments):
        seg = binary[:, s * frames_per_segment : (s + 1) * frames_per_segment]
        active[:, s] = seg.any(axis=1)
    return active


def segment_counts(
    reference: np.ndarray,
    prediction: np.ndarray,
    hop_s: float,
    segment_s: float = DEFAULT_SEGMENT_S,
) -> SegmentCounts:
    """Count TP/FP/FN and per-segment S/D/I/Nref on (M, N) binary matrices.

    The trailing partial segment is included.
    """
    reference = np.asarray(reference)
    prediction = np.asarray(prediction)
    if reference.shape != prediction.shape:
        raise DimensionError(
            f"reference {reference.shape} and prediction {prediction.shape} differ"
        )
    frames_per_segment = max(1, int(round(segment_s / hop_s)))
    ref_seg = _segment_activity(reference, frames_per_segment)
    pred_seg = _segment_activity(prediction, frames_per_segment)

    counts = SegmentCounts()
    counts.tp = int((ref_seg & pred_seg).sum())
    counts.fp = int((~ref_seg & pred_seg).sum())
    counts.fn = int((ref_seg & ~pred_seg).sum())
    for s in range(ref_seg.shape[1]):
        seg_fn = int((ref_seg[:, s] & ~pred_seg[:, s]).sum())
        seg_fp = int((~ref_seg[:, s] & pred_seg[:, s]).sum())
        subs = min(seg_fn, seg_fp)
        dels = seg_fn - subs
        ins = seg_fp - subs
        n_ref = int(ref_seg[:, s].sum())
        counts.substitutions += subs
        counts.deletions += dels
        counts.insertions += ins
        counts.n_ref += n_ref
        counts.per_segment.append((subs, dels, ins, n_ref))
    return counts


def f1_score(counts: SegmentCounts) -> float:
    """Segment-based F1 in percent; 0 when there is no activity at all."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 0.0
    return 100.0 * 2.0 * counts.tp / denom


def f1_defined(counts: SegmentCounts) -> bool:
    return 2 * counts.tp + counts.fp + counts.fn > 0


def error_rate(counts: SegmentCounts) -> float:
    """Segment-based error rate; with an empty reference this degenerates to
    the raw insertion count (flagged via er_defined).
    """
    errors = counts.substitutions + counts.deletions + counts.insertions
    if counts.n_ref == 0:
        return float(counts.insertions)
    return errors / counts.n_ref


def er_defined(counts: SegmentCounts) -> bool:
    return counts.n_ref > 0


def per_event_report(
    reference: np.ndarray,
    prediction: np.ndarray,
    event_names,
    hop_s: float,
    segment_s: float = DEFAULT_SEGMENT_S,
) -> list:
    """One row per event class with class-restricted F1 and ER.

    Within a single class there are no substitutions, so the class ER is
    (deletions + insertions) / class Nref.
    """
    rows = []
    for m, name in enumerate(event_names):
        counts = segment_counts(
            reference[m : m + 1], prediction[m : m + 1], hop_s, segment_s
        )
        rows.append(
            {
                "event": name,
                "f1": f1_score(counts),
                "f1_defined": f1_defined(counts),
                "er": error_rate(counts),
                "er_defined": er_defined(counts),
            }
        )
    return rows


def calibrate_thresholds(
    pairs,
    grid,
    smooth_window: int = DEFAULT_SMOOTH_WINDOW,
    hop_s: float = 0.02,
    segment_s: float = DEFAULT_SEGMENT_S,
) -> np.ndarray:
    """Per-class thresholds maximizing class F1 over (posteriors, reference)
    validation pairs; ties resolve to the lower threshold.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ArgumentError("threshold grid is empty")
    pairs = list(pairs)
    if not pairs:
        raise ArgumentError("no validation pairs to calibrate on")
    n_classes = pairs[0][0].shape[0]
    best = np.full(n_classes, grid[0])
    best_f1 = np.full(n_classes, -1.0)
    for threshold in grid:
        for m in range(n_classes):
            counts = SegmentCounts()
            for posteriors, reference in pairs:
                ref = reference.data if hasattr(reference, "hop_seconds") else reference
                pred = median_smooth(
                    threshold_posteriors(
                        posteriors[m : m + 1], np.array([threshold])
                    ),
                    smooth_window,
                )
                counts = counts.merge(
                    segment_counts(ref[m : m + 1], pred, hop_s, segment_s)
                )
            score = f1_score(counts)
            if score > best_f1[m]:  # strict: ties keep the lower threshold
                best_f1[m] = score
                best[m] = threshold
    return best


def report_dict(counts: SegmentCounts, per_event_rows: list) -> dict:
    flags = []
    if not f1_defined(counts):
        flags.append(F1_UNDEFINED_FLAG)
    if not er_defined(counts):
        flags.append(ER_UNDEFINED_FLAG)
    return {
        "overall": {"f1": f1_score(counts), "er": error_rate(counts), "flags": flags},
        "per_event": per_event_rows,
    }


def format_report_table(report: dict) -> str:
    """Aligned plain-text table mirroring the per-event report layout."""
    lines = [
        f"overall  F-score {report['overall']['f1']:6.2f}%   ER {report['overall']['er']:.3f}"
    ]
    if report["overall"]["flags"]:
        lines[0] += "   [" + ", ".join(report["overall"]["flags"]) + "]"
    width = max((len(r["event"]) for r in report["per_event"]), default=0)
    for row in report["per_event"]:
        f1 = f"{row['f1']:6.2f}%" if row["f1_defined"] else "   n/a "
        er = f"{row['er']:.4f}" if row["er_defined"] else "n/a"
        lines.append(f"{row['event']:<{width}}  F-score {f1}   ER {er}")
    return "\n".join(lines) + "\n"
