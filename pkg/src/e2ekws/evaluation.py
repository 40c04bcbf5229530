"""Detection matching, DET curves, localization and state-confusion metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dnn
from .features import FRAME_HOP_SEC, stack_context
from .hmm import Detection, HmmParams, scaled_loglik, viterbi_stream
from .sampling import Window, iou


class EvaluationError(ValueError):
    pass


@dataclass
class EvalConfig:
    delta: int = 9
    nms_frames: int = 100
    operating_fa_per_hour: float = 15.0
    min_iou: float | None = None
    decoder_init: str = "entry"
    frame_hop: float = FRAME_HOP_SEC


@dataclass
class DetPoint:
    threshold: float
    fa_per_hour: float
    frr: float


@dataclass
class EvalReport:
    det_points: list
    frr_at_operating_fa: float
    operating_fa_per_hour: float
    operating_threshold: float
    mean_tp_iou: float
    mean_abs_start_end_error_sec: float
    confusion: np.ndarray
    state_accuracy: float
    total_hours: float
    num_keywords: int
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("det_points", "confusion", "extras")}
        out.update(self.extras)
        return out


def det_window(det: Detection) -> Window:
    return Window(det.start_frame, det.end_frame + 1)


def nms(detections, min_separation: int = 100) -> list[Detection]:
    """Greedy suppression: keep the best-scoring detection, drop any other whose
    end frame lies within ``min_separation`` frames of a kept one.

    Greedy NMS commutes with thresholding, so it can run once before a sweep.
    """
    kept = []
    for det in sorted(detections, key=lambda d: -d.score):
        if all(abs(det.end_frame - k.end_frame) >= min_separation for k in kept):
            kept.append(det)
    return kept


def _overlaps(a: Window, b: Window, min_iou):
    if min_iou is None:
        return min(a.end, b.end) > max(a.start, b.start)
    return iou(a, b) >= min_iou


def label_detections(detections, ground_truths, min_iou=None):
    """Match in descending score order (stable for ties).

    Returns ``(dets_sorted, matched)`` where ``matched[k]`` is the index of the
    ground truth consumed by detection ``k`` or ``-1`` for a false accept.
    Because lower-scoring detections never affect higher ones, the outcome of
    each detection is the same at every threshold that admits it.
    """
    dets = sorted(detections, key=lambda d: -d.score)
    used = [False] * len(ground_truths)
    matched = []
    for det in dets:
        w = det_window(det)
        best, best_iou = -1, -1.0
        for g, gt in enumerate(ground_truths):
            if not used[g] and _overlaps(w, gt, min_iou):
                o = iou(w, gt)
                if o > best_iou:
                    best, best_iou = g, o
        if best >= 0:
            used[best] = True
        matched.append(best)
    return dets, matched


def match_detections(detections, ground_truths, threshold=-math.inf, min_iou=None):
    """``(tp, fa, fr)`` counts for detections scoring at least ``threshold``."""
    above = [d for d in detections if d.score >= threshold]
    _, matched = label_detections(above, ground_truths, min_iou)
    tp = sum(m >= 0 for m in matched)
    return tp, len(matched) - tp, len(ground_truths) - tp


def det_curve(all_scored_detections, ground_truths, total_hours, min_iou=None):
    """Sweep every observed score as a threshold.

    ``all_scored_detections`` and ``ground_truths`` are per-utterance lists.
    Points are ordered by decreasing threshold, starting at ``+inf``
    (FA/hr 0, FRR 1).
    """
    if total_hours <= 0:
        raise EvaluationError("total_hours must be positive")
    n_gt = sum(len(g) for g in ground_truths)
    if n_gt == 0:
        raise EvaluationError("no ground-truth keywords: FRR undefined")
    scores, is_tp = [], []
    for dets, gts in zip(all_scored_detections, ground_truths):
        dets, matched = label_detections(dets, gts, min_iou)
        scores += [d.score for d in dets]
        is_tp += [m >= 0 for m in matched]
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, is_tp = scores[order], is_tp[order]
    tp = np.cumsum(is_tp)
    fa = np.cumsum(~is_tp)
    points = [DetPoint(math.inf, 0.0, 1.0)]
    # one point per distinct threshold, taken after all ties are admitted
    last_of_run = np.r_[scores[1:] != scores[:-1], True] if len(scores) else np.array([], bool)
    for k in np.flatnonzero(last_of_run):
        points.append(DetPoint(float(scores[k]), float(fa[k] / total_hours), float(1.0 - tp[k] / n_gt)))
    return points


def frr_at_fa(points, target_fa_per_hour):
    """FRR at a FA/hr operating point, linearly interpolated on the DET curve.

    Returns ``(frr, threshold)``; the threshold is the lowest one whose FA/hr
    does not exceed the target.
    """
    lo = points[0]
    hi = None
    for p in points:
        if p.fa_per_hour <= target_fa_per_hour:
            lo = p
        else:
            hi = p
            break
    if hi is None or hi.fa_per_hour == lo.fa_per_hour:
        return lo.frr, lo.threshold
    frac = (target_fa_per_hour - lo.fa_per_hour) / (hi.fa_per_hour - lo.fa_per_hour)
    return float(lo.frr + frac * (hi.frr - lo.frr)), lo.threshold


def localization_metrics(tp_pairs, frame_hop=FRAME_HOP_SEC):
    """Mean IOU and mean of (|start error| + |end error|) / 2 in seconds over
    matched (detection, truth) window pairs."""
    if not tp_pairs:
        raise EvaluationError("no true positives: localization metrics undefined")
    ious = [iou(g, w) for w, g in tp_pairs]
    errs = [(abs(w.start - g.start) + abs(w.end - g.end)) / 2 for w, g in tp_pairs]
    return float(np.mean(ious)), float(np.mean(errs)) * frame_hop


def confusion_matrix(params, labeled_corpus, delta: int = 9, num_states=None):
    """Counts of (true state, argmax predicted state) over all labeled frames."""
    C = num_states or params.layer_sizes[-1]
    M = np.zeros((C, C), dtype=np.int64)
    for utt in labeled_corpus:
        x = stack_context(utt.features, delta)
        pred = np.argmax(dnn.forward(params, x).log_posteriors, axis=1)
        np.add.at(M, (np.asarray(utt.state_labels), pred), 1)
    total = M.sum()
    return M, (float(np.trace(M) / total) if total else float("nan"))


def utterance_scores(params, hmm: HmmParams, utt, delta: int = 9) -> np.ndarray:
    x = stack_context(utt.features, delta)
    return scaled_loglik(dnn.forward(params, x), hmm)


def decode_utterance(params, hmm: HmmParams, utt, delta: int = 9, nms_frames: int = 100,
                     init: str = "entry"):
    """Streaming decode then NMS; returns candidate detections."""
    if init == "entry" and not np.isfinite(hmm.log_entry):
        init = "priors"
    return nms(viterbi_stream(utterance_scores(params, hmm, utt, delta), hmm, init), nms_frames)


def evaluate(params, hmm: HmmParams, corpus, config: EvalConfig | None = None) -> EvalReport:
    config = config or EvalConfig()
    gts = [[u.keyword_window] if u.keyword_window is not None else [] for u in corpus]
    if not any(gts):
        raise EvaluationError("no keyword windows in corpus")
    dets = [decode_utterance(params, hmm, u, config.delta, config.nms_frames, config.decoder_init)
            for u in corpus]
    total_frames = sum(len(u.features) for u in corpus)
    hours = total_frames * config.frame_hop / 3600.0
    points = det_curve(dets, gts, hours, config.min_iou)
    frr, thr = frr_at_fa(points, config.operating_fa_per_hour)

    pairs = []
    for d, g in zip(dets, gts):
        above = [x for x in d if x.score >= thr]
        ordered, matched = label_detections(above, g, config.min_iou)
        pairs += [(det_window(x), g[m]) for x, m in zip(ordered, matched) if m >= 0]
    if pairs:
        mean_iou, loc_err = localization_metrics(pairs, config.frame_hop)
    else:
        mean_iou, loc_err = float("nan"), float("nan")

    labeled = [u for u in corpus if u.state_labels is not None]
    if labeled:
        M, acc = confusion_matrix(params, labeled, config.delta, hmm.num_states)
    else:
        M, acc = np.zeros((hmm.num_states, hmm.num_states), dtype=np.int64), float("nan")
    return EvalReport(
        det_points=points,
        frr_at_operating_fa=float(frr),
        operating_fa_per_hour=config.operating_fa_per_hour,
        operating_threshold=float(thr),
        mean_tp_iou=mean_iou,
        mean_abs_start_end_error_sec=loc_err,
        confusion=M,
        state_accuracy=acc,
        total_hours=hours,
        num_keywords=sum(len(g) for g in gts),
        extras={"num_true_positives": len(pairs)},
    )


def write_report(report: EvalReport, out_dir, prefix: str = "") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{prefix}det.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "fa_per_hour", "frr"])
        for p in report.det_points:
            w.writerow([repr(float(v)) for v in (p.threshold, p.fa_per_hour, p.frr)])
    with open(out_dir / f"{prefix}summary.json", "w") as f:
        json.dump(report.summary(), f, indent=1)
    np.savetxt(out_dir / f"{prefix}confusion.csv", report.confusion, fmt="%d", delimiter=",")


def read_det_csv(path) -> list[DetPoint]:
    with open(path) as f:
        return [DetPoint(float(r["threshold"]), float(r["fa_per_hour"]), float(r["frr"]))
                for r in csv.DictReader(f)]
