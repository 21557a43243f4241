"""Evaluation stack: per-class AP, triplet mAP, component mAP, top-K accuracy.

Tie rules are pinned for determinism: ranking sorts by descending score with
ties broken by ascending original index (stable sort), and top-K membership
resolves ties at the K-th score by ascending class id. Classes with no
positive ground truth are undefined (NaN) and excluded from means unless
``strict_undefined`` counts them as zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import CoverageError, DatasetManifest
from .vocab import COMPONENT_KINDS


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of one ranked list; NaN when there are no positives.

    AP = (1/P) * sum over positive ranks k of precision@k, with the ranking
    sorted by descending score, ties by ascending original index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if labels.size and not np.isin(np.unique(labels), (0, 1)).all():
        raise ValueError("labels must be binary")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(bool)
    ranks = np.arange(1, scores.size + 1)
    return float((np.cumsum(hits)[hits] / ranks[hits]).sum() / n_pos)


def _prob_map(pred) -> dict:
    probs = getattr(pred, "probs", pred)
    if not isinstance(probs, dict):
        raise TypeError("expected a PredictionSet or a {(video_id, frame_idx): vector} dict")
    return probs


def _matrices(pred, manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Aligned (N, C) score and eval-label matrices over the manifest's frames."""
    probs = _prob_map(pred)
    keys = manifest.frame_keys()
    missing = [k for k in keys if k not in probs]
    if missing:
        raise CoverageError("predictions do not cover the manifest", missing)
    scores = np.stack([np.asarray(probs[k], dtype=np.float64) for k in keys])
    labels = manifest.label_matrix("eval")
    if scores.shape != labels.shape:
        raise ValueError(f"prediction width {scores.shape[1]} != {labels.shape[1]} classes")
    return scores, labels


@dataclass
class MapResult:
    """mAP plus the per-class AP vector (NaN marks undefined classes)."""

    map: float
    per_class_ap: np.ndarray
    n_excluded: int


def _mean_ap(per_class: np.ndarray, strict: bool) -> tuple[float, int]:
    undefined = np.isnan(per_class)
    n_excluded = int(undefined.sum())
    if strict:
        filled = np.where(undefined, 0.0, per_class)
        return float(filled.mean()), n_excluded
    if n_excluded == per_class.size:
        return math.nan, n_excluded
    return float(per_class[~undefined].mean()), n_excluded


def _map_from_matrices(scores: np.ndarray, labels: np.ndarray, video_ids, mode: str, strict: bool) -> MapResult:
    n_classes = scores.shape[1]
    if mode == "global":
        per_class = np.array([average_precision(scores[:, c], labels[:, c]) for c in range(n_classes)])
    elif mode == "per_video":
        videos = sorted(set(video_ids))
        vid_arr = np.asarray(video_ids)
        per_cell = np.full((len(videos), n_classes), np.nan)
        for vi, vid in enumerate(videos):
            rows = vid_arr == vid
            for c in range(n_classes):
                per_cell[vi, c] = average_precision(scores[rows, c], labels[rows, c])
        with np.errstate(invalid="ignore"):
            per_class = np.nanmean(per_cell, axis=0)
    else:
        raise ValueError(f"mode must be 'global' or 'per_video', got {mode!r}")
    map_value, n_excluded = _mean_ap(per_class, strict)
    return MapResult(map=map_value, per_class_ap=per_class, n_excluded=n_excluded)


def triplet_map(pred, manifest: DatasetManifest, mode: str = "global", strict_undefined: bool = False) -> MapResult:
    """Triplet-class mAP.

    global: pool all frames, one AP per class, mean over defined classes.
    per_video: AP per (video, class) cell, mean over defined cells per class,
    then mean over classes with at least one defined cell.
    """
    scores, labels = _matrices(pred, manifest)
    video_ids = [rec.video_id for rec in manifest.frames]
    return _map_from_matrices(scores, labels, video_ids, mode, strict_undefined)


def disentangled_component_map(
    pred, manifest: DatasetManifest, component: str, mode: str = "global", strict_undefined: bool = False
) -> MapResult:
    """Component-level mAP by max-projection of triplet scores.

    A component's frame score is the max over the scores of triplet classes
    containing it (0 when no valid triplet does); component labels come from
    the label-space projection of the ground truth.
    """
    if component not in COMPONENT_KINDS:
        raise ValueError(f"component must be one of {COMPONENT_KINDS}, got {component!r}")
    vocab = manifest.vocab
    scores, labels = _matrices(pred, manifest)
    axis = COMPONENT_KINDS.index(component)
    dim = vocab.components.dims[axis]
    comp_of_class = np.array([vocab.decompose(c)[axis] for c in range(vocab.n_classes)])
    comp_scores = np.zeros((scores.shape[0], dim))
    for d in range(dim):
        cols = np.nonzero(comp_of_class == d)[0]
        if cols.size:
            comp_scores[:, d] = scores[:, cols].max(axis=1)
    comp_labels = vocab.component_multihot(labels)[axis]
    video_ids = [rec.video_id for rec in manifest.frames]
    return _map_from_matrices(comp_scores, comp_labels, video_ids, mode, strict_undefined)


def topk_accuracy(pred, manifest: DatasetManifest, k: int = 5) -> float:
    """Fraction of labeled frames whose ground truth intersects the top-K classes.

    Frames without any positive label are excluded from the denominator. Ties
    at the K-th score resolve by ascending class id.
    """
    scores, labels = _matrices(pred, manifest)
    n_classes = scores.shape[1]
    if not 1 <= k <= n_classes:
        raise ValueError(f"k must be in [1, {n_classes}], got {k}")
    scored = labels.sum(axis=1) > 0
    if not scored.any():
        return math.nan
    topk = np.argsort(-scores[scored], axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(labels[scored], topk, axis=1).any(axis=1)
    return float(hits.mean())


def per_video_report(pred, manifest: DatasetManifest, strict_undefined: bool = False) -> dict[str, float]:
    """Global-mode mAP restricted to each video's frames; NaN when undefined."""
    out: dict[str, float] = {}
    for vid in manifest.video_ids:
        sub = manifest.subset([vid])
        out[vid] = triplet_map(pred, sub, mode="global", strict_undefined=strict_undefined).map
    return out


@dataclass
class EvalReport:
    """Full evaluation of one prediction set."""

    triplet_map: float
    per_class_ap: list[float]
    n_excluded_classes: int
    component_map: dict[str, float]
    topk_accuracy: float
    topk: int
    per_video_map: dict[str, float]
    mode: str = "global"
    strict_undefined: bool = False
    n_frames: int = 0
    n_classes: int = 0

    def to_json(self) -> str:
        def scrub(x):
            if isinstance(x, float) and math.isnan(x):
                return None
            if isinstance(x, dict):
                return {k: scrub(v) for k, v in x.items()}
            if isinstance(x, list):
                return [scrub(v) for v in x]
            return x

        return json.dumps(scrub(asdict(self)), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        def restore(x):
            if x is None:
                return math.nan
            if isinstance(x, dict):
                return {k: restore(v) for k, v in x.items()}
            if isinstance(x, list):
                return [restore(v) for v in x]
            return x

        raw = json.loads(text)
        return cls(**{k: restore(v) for k, v in raw.items()})

    def to_text(self) -> str:
        lines = [
            f"frames: {self.n_frames}   classes: {self.n_classes}   mode: {self.mode}",
            f"triplet mAP: {self.triplet_map:.4f}   (excluded classes: {self.n_excluded_classes})",
            f"top-{self.topk} accuracy: {self.topk_accuracy:.4f}",
        ]
        for kind in COMPONENT_KINDS:
            if kind in self.component_map:
                lines.append(f"{kind} mAP: {self.component_map[kind]:.4f}")
        lines.append("per-video mAP (descending):")
        ordered = sorted(self.per_video_map.items(), key=lambda kv: (-(kv[1] if not math.isnan(kv[1]) else -1), kv[0]))
        for vid, value in ordered:
            lines.append(f"  {vid}: {value:.4f}" if not math.isnan(value) else f"  {vid}: undefined")
        return "\n".join(lines)


def evaluate(
    pred,
    manifest: DatasetManifest,
    k: int = 5,
    mode: str = "global",
    strict_undefined: bool = False,
) -> EvalReport:
    """All metrics for one prediction set over one manifest."""
    tm = triplet_map(pred, manifest, mode=mode, strict_undefined=strict_undefined)
    comp = {
        kind: disentangled_component_map(pred, manifest, kind, mode=mode, strict_undefined=strict_undefined).map
        for kind in COMPONENT_KINDS
    }
    return EvalReport(
        triplet_map=tm.map,
        per_class_ap=[float(x) for x in tm.per_class_ap],
        n_excluded_classes=tm.n_excluded,
        component_map=comp,
        topk_accuracy=topk_accuracy(pred, manifest, k=k),
        topk=k,
        per_video_map=per_video_report(pred, manifest, strict_undefined=strict_undefined),
        mode=mode,
        strict_undefined=strict_undefined,
        n_frames=manifest.n_frames,
        n_classes=manifest.vocab.n_classes,
    )
