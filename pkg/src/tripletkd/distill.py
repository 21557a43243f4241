"""Self-distillation protocol.

Teachers train on hard labels; their sigmoid probabilities over their own
training splits become soft labels; students train on those soft labels and
are checkpointed at the epoch with the best validation mAP, validated against
hard labels on the held-out split. Folds are independent and can run in
parallel processes.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .augment import AugmentationConfig, augment_frame, prepare_image
from .data import CoverageError, DatasetManifest, FoldSplit, FrameRecord
from .model import (
    BackboneSpec,
    Checkpoint,
    HeadConfig,
    MultiTaskModel,
    OptimizerConfig,
    cosine_lr,
    save_checkpoint,
)
from .util import derive_rng
from .vocab import COMPONENT_KINDS

SOFT_LABEL_FORMAT = "tripletkd-softlabels"
SOFT_TARGET_SCOPES = ("triplet_only", "all_heads")


@dataclass
class SoftLabelSet:
    """Per-frame teacher probabilities keyed by (video_id, frame_idx).

    Each entry maps head name to a probability vector; "triplet" is always
    present. Covers exactly the producing teacher's training split.
    """

    entries: dict[tuple[str, int], dict[str, np.ndarray]]
    teacher_digest: str
    fold_id: int
    smoothing: float = 0.0

    def __post_init__(self) -> None:
        for key, heads in self.entries.items():
            if "triplet" not in heads:
                raise ValueError(f"soft-label entry {key} lacks the triplet head")
            for head, vec in heads.items():
                if vec.size and (vec.min() < 0.0 or vec.max() > 1.0):
                    raise ValueError(f"soft-label entry {key}/{head} outside [0, 1]")

    def coverage(self) -> set[tuple[str, int]]:
        return set(self.entries)

    def get(self, key: tuple[str, int], head: str = "triplet") -> np.ndarray:
        return self.entries[key][head]

    @property
    def heads(self) -> tuple[str, ...]:
        first = next(iter(self.entries.values()))
        return tuple(first)


@dataclass(frozen=True)
class DistillConfig:
    """Everything one fold's teacher -> soft labels -> student run needs."""

    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    heads: HeadConfig = None  # required
    teacher_opt: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(epochs=20))
    student_opt: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(epochs=40))
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    smoothing: float = 0.0
    soft_target_scope: str = "triplet_only"
    hard_mix: float = 1.0
    teacher_select_best: bool = False
    student_select_best: bool = True
    teacher_init_seed: int = 1
    student_init_seed: int = 2
    data_seed: int = 3
    dtype: str = "float32"
    eval_batch_size: int = 256

    def __post_init__(self) -> None:
        if self.heads is None:
            raise ValueError("heads config is required")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must be in [0, 1), got {self.smoothing}")
        if not 0.0 <= self.hard_mix <= 1.0:
            raise ValueError(f"hard_mix must be in [0, 1], got {self.hard_mix}")
        if self.soft_target_scope not in SOFT_TARGET_SCOPES:
            raise ValueError(f"soft_target_scope must be one of {SOFT_TARGET_SCOPES}")

    def build_model(self) -> MultiTaskModel:
        return MultiTaskModel(self.backbone, self.heads, dtype=np.dtype(self.dtype))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_map: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochLog]
    selected_epoch: int
    role: str
    fold_id: int

    @property
    def val_map(self) -> float:
        return self.history[self.selected_epoch].val_map

    @property
    def final_val_map(self) -> float:
        return self.history[-1].val_map


def hard_targets(records: list[FrameRecord], head_config: HeadConfig, vocab) -> dict[str, np.ndarray]:
    """Hard training targets for every enabled head, derived from the labels."""
    labels = np.stack([rec.triplet_labels for rec in records]).astype(np.float64)
    targets: dict[str, np.ndarray] = {"triplet": labels}
    if any(head_config.size(k) is not None for k in COMPONENT_KINDS):
        multihots = vocab.component_multihot(np.stack([rec.triplet_labels for rec in records]))
        for kind, mh in zip(COMPONENT_KINDS, multihots):
            if head_config.size(kind) is not None:
                targets[kind] = mh.astype(np.float64)
    if head_config.n_phases is not None:
        targets["phase"] = np.array([rec.phase_id for rec in records], dtype=np.int64)
    return {h: targets[h] for h in head_config.enabled_heads()}


def _predict_triplet_probs(model, params, manifest, resize_hw, batch_size):
    probs: dict[tuple[str, int], np.ndarray] = {}
    frames = manifest.frames
    for start in range(0, len(frames), batch_size):
        batch = frames[start : start + batch_size]
        x = np.stack([prepare_image(manifest.load_image(rec), resize_hw) for rec in batch])
        out = model.predict_probs(params, x)
        for rec, vec in zip(batch, out["triplet"]):
            probs[rec.key] = vec.astype(np.float64)
    return probs


def _validation_map(model, params, val_manifest, resize_hw, batch_size) -> float:
    from .metrics import triplet_map  # local import to keep module load light

    probs = _predict_triplet_probs(model, params, val_manifest, resize_hw, batch_size)
    return triplet_map(probs, val_manifest, mode="global").map


def _fit(
    manifest: DatasetManifest,
    fold: FoldSplit,
    config: DistillConfig,
    *,
    role: str,
    optimizer: OptimizerConfig,
    init_seed: int,
    select_best: bool,
    target_builder,
) -> TrainResult:
    train_videos = set(fold.train_videos)
    train_frames = [rec for rec in manifest.frames if rec.video_id in train_videos]
    if not train_frames:
        raise ValueError(f"fold {fold.fold_id}: empty training split")
    val_manifest = manifest.subset(fold.val_videos)

    model = config.build_model()
    params = model.init_params(init_seed)
    adam = nn.Adam()
    n = len(train_frames)
    bs = optimizer.batch_size
    n_batches = math.ceil(n / bs)
    total_steps = optimizer.epochs * n_batches

    history: list[EpochLog] = []
    best_map, best_epoch, best_params = -np.inf, -1, None
    step = 0
    for epoch in range(optimizer.epochs):
        order = derive_rng(config.data_seed, "shuffle", fold.fold_id, role, epoch).permutation(n)
        epoch_loss = 0.0
        for b in range(n_batches):
            sel = order[b * bs : (b + 1) * bs]
            recs = [train_frames[i] for i in sel]
            x = np.stack(
                [
                    augment_frame(
                        manifest.load_image(rec),
                        config.augment,
                        derive_rng(config.augment.rng_seed, "augment", fold.fold_id, role, epoch, int(i)),
                    )
                    for i, rec in zip(sel, recs)
                ]
            )
            loss, _, grads = model.loss_and_grads(params, x, target_builder(recs))
            adam.step(params, grads, cosine_lr(step, total_steps, optimizer.lr_max, optimizer.lr_min))
            step += 1
            epoch_loss += loss * len(recs)
        val_map = _validation_map(model, params, val_manifest, config.augment.resize_hw, config.eval_batch_size)
        history.append(EpochLog(epoch=epoch, train_loss=epoch_loss / n, val_map=val_map))
        if val_map > best_map:  # strict: ties keep the earliest epoch
            best_map, best_epoch = val_map, epoch
            if select_best:
                best_params = {k: v.copy() for k, v in params.items()}

    selected_epoch = best_epoch if select_best else optimizer.epochs - 1
    selected_params = best_params if select_best else params
    meta = {
        "role": role,
        "fold_id": fold.fold_id,
        "epochs": optimizer.epochs,
        "selected_epoch": selected_epoch,
        "val_map": history[selected_epoch].val_map,
        "val_map_curve": [log.val_map for log in history],
        "init_seed": init_seed,
        "data_seed": config.data_seed,
        "resize_hw": list(config.augment.resize_hw),
        "dtype": config.dtype,
    }
    ckpt = Checkpoint(params=selected_params, backbone_spec=config.backbone, head_config=config.heads, meta=meta)
    return TrainResult(checkpoint=ckpt, history=history, selected_epoch=selected_epoch, role=role, fold_id=fold.fold_id)


def train_teacher(manifest: DatasetManifest, fold: FoldSplit, config: DistillConfig) -> TrainResult:
    """Train the fold's teacher on hard labels over the four training splits."""
    vocab = manifest.vocab

    def builder(recs):
        return hard_targets(recs, config.heads, vocab)

    return _fit(
        manifest,
        fold,
        config,
        role="teacher",
        optimizer=config.teacher_opt,
        init_seed=config.teacher_init_seed,
        select_best=config.teacher_select_best,
        target_builder=builder,
    )


def generate_soft_labels(
    checkpoint: Checkpoint, manifest: DatasetManifest, fold: FoldSplit, batch_size: int = 256
) -> SoftLabelSet:
    """Teacher probabilities over the fold's training split.

    Inference is eval-mode with deterministic resize only; no stochastic
    augmentation touches the frames.
    """
    if checkpoint.meta.get("fold_id") != fold.fold_id:
        raise ValueError(
            f"checkpoint was trained for fold {checkpoint.meta.get('fold_id')}, not fold {fold.fold_id}"
        )
    model = checkpoint.build_model()
    resize_hw = tuple(checkpoint.meta.get("resize_hw", (224, 224)))
    train_manifest = manifest.subset(fold.train_videos)
    entries: dict[tuple[str, int], dict[str, np.ndarray]] = {}
    frames = train_manifest.frames
    for start in range(0, len(frames), batch_size):
        batch = frames[start : start + batch_size]
        x = np.stack([prepare_image(train_manifest.load_image(rec), resize_hw) for rec in batch])
        probs = model.predict_probs(checkpoint.params, x)
        for i, rec in enumerate(batch):
            entries[rec.key] = {head: vec[i].astype(np.float32) for head, vec in probs.items()}
    return SoftLabelSet(entries=entries, teacher_digest=checkpoint.digest, fold_id=fold.fold_id)


def smooth_soft_labels(soft: SoftLabelSet, epsilon: float) -> SoftLabelSet:
    """Blend probabilities toward indifference: s' = (1 - eps) * s + eps / 2.

    Phase distributions, when present, are blended toward uniform instead so
    they stay normalized.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    if epsilon == 0.0:
        return soft
    entries = {}
    for key, heads in soft.entries.items():
        smoothed = {}
        for head, vec in heads.items():
            if head == "phase":
                smoothed[head] = ((1.0 - epsilon) * vec + epsilon / vec.shape[-1]).astype(np.float32)
            else:
                smoothed[head] = ((1.0 - epsilon) * vec + epsilon * 0.5).astype(np.float32)
        entries[key] = smoothed
    return SoftLabelSet(
        entries=entries, teacher_digest=soft.teacher_digest, fold_id=soft.fold_id, smoothing=epsilon
    )


def train_student(
    manifest: DatasetManifest, fold: FoldSplit, soft: SoftLabelSet, config: DistillConfig
) -> TrainResult:
    """Train the fold's student against the teacher's soft labels.

    The triplet target is hard_mix * soft + (1 - hard_mix) * hard; auxiliary
    heads take hard targets unless soft_target_scope="all_heads". Validation
    uses hard labels on the held-out split; the checkpoint is the best
    validation-mAP epoch.
    """
    train_videos = set(fold.train_videos)
    needed = [rec.key for rec in manifest.frames if rec.video_id in train_videos]
    missing = [key for key in needed if key not in soft.entries]
    if missing:
        raise CoverageError(f"soft labels do not cover fold {fold.fold_id}'s training split", missing)

    vocab = manifest.vocab
    alpha = config.hard_mix
    all_heads = config.soft_target_scope == "all_heads"

    def builder(recs):
        targets = hard_targets(recs, config.heads, vocab)
        soft_triplet = np.stack([soft.get(rec.key) for rec in recs]).astype(np.float64)
        targets["triplet"] = alpha * soft_triplet + (1.0 - alpha) * targets["triplet"]
        if all_heads:
            for head in config.heads.enabled_heads():
                if head == "triplet" or head not in soft.heads:
                    continue
                targets[head] = np.stack([soft.get(rec.key, head) for rec in recs]).astype(np.float64)
        return targets

    return _fit(
        manifest,
        fold,
        config,
        role="student",
        optimizer=config.student_opt,
        init_seed=config.student_init_seed,
        select_best=config.student_select_best,
        target_builder=builder,
    )


# ---------------------------------------------------------------------------
# Full five-fold protocol
# ---------------------------------------------------------------------------


@dataclass
class FoldArtifacts:
    fold_id: int
    teacher: TrainResult
    student: TrainResult
    soft: SoftLabelSet


@dataclass
class ProtocolResult:
    folds: list[FoldArtifacts]

    def teacher_checkpoints(self) -> list[Checkpoint]:
        return [f.teacher.checkpoint for f in self.folds]

    def student_checkpoints(self) -> list[Checkpoint]:
        return [f.student.checkpoint for f in self.folds]


def _run_single_fold(manifest: DatasetManifest, fold: FoldSplit, config: DistillConfig) -> FoldArtifacts:
    teacher = train_teacher(manifest, fold, config)
    soft = generate_soft_labels(teacher.checkpoint, manifest, fold)
    if config.smoothing > 0.0:
        soft = smooth_soft_labels(soft, config.smoothing)
    student = train_student(manifest, fold, soft, config)
    return FoldArtifacts(fold_id=fold.fold_id, teacher=teacher, student=student, soft=soft)


def run_fold_protocol(
    manifest: DatasetManifest,
    folds: list[FoldSplit],
    config: DistillConfig,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> ProtocolResult:
    """Teacher + student for every fold; teachers share one init seed, students another.

    With ``out_dir`` set, per-fold checkpoints and soft labels are persisted
    along with a protocol.json index; a failing fold writes a partial index
    before the error propagates.
    """
    results: list[FoldArtifacts] = []
    failure: tuple[int, Exception] | None = None
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_single_fold, manifest, fold, config) for fold in folds]
                for future in futures:
                    results.append(future.result())
        else:
            for fold in folds:
                results.append(_run_single_fold(manifest, fold, config))
    except Exception as exc:
        failure = (len(results), exc)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        index = {"folds": [], "complete": failure is None}
        if failure is not None:
            index["failed_fold"] = folds[failure[0]].fold_id
            index["error"] = repr(failure[1])
        for art in results:
            fold_dir = out / f"fold{art.fold_id}"
            fold_dir.mkdir(exist_ok=True)
            t_digest = save_checkpoint(art.teacher.checkpoint, fold_dir / "teacher.npz")
            s_digest = save_checkpoint(art.student.checkpoint, fold_dir / "student.npz")
            save_soft_labels(art.soft, fold_dir / "soft_labels.jsonl")
            index["folds"].append(
                {
                    "fold_id": art.fold_id,
                    "teacher": {"path": f"fold{art.fold_id}/teacher.npz", "digest": t_digest,
                                "val_map": art.teacher.val_map, "selected_epoch": art.teacher.selected_epoch},
                    "student": {"path": f"fold{art.fold_id}/student.npz", "digest": s_digest,
                                "val_map": art.student.val_map, "selected_epoch": art.student.selected_epoch},
                    "soft_labels": f"fold{art.fold_id}/soft_labels.jsonl",
                }
            )
        (out / "protocol.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if failure is not None:
        raise RuntimeError(f"fold {folds[failure[0]].fold_id} failed: {failure[1]}") from failure[1]
    return ProtocolResult(folds=results)


# ---------------------------------------------------------------------------
# Soft-label persistence
# ---------------------------------------------------------------------------


def save_soft_labels(soft: SoftLabelSet, path: str | Path) -> None:
    path = Path(path)
    header = {
        "format": SOFT_LABEL_FORMAT,
        "teacher_digest": soft.teacher_digest,
        "fold_id": soft.fold_id,
        "smoothing": soft.smoothing,
        "heads": list(soft.heads),
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for (video_id, frame_idx) in sorted(soft.entries):
            row = {"video_id": video_id, "frame_idx": frame_idx}
            for head, vec in soft.entries[(video_id, frame_idx)].items():
                row[head] = [float(x) for x in vec]
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_soft_labels(path: str | Path) -> SoftLabelSet:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty soft-label file")
    header = json.loads(lines[0])
    if header.get("format") != SOFT_LABEL_FORMAT:
        raise ValueError(f"{path}: not a {SOFT_LABEL_FORMAT} file")
    entries: dict[tuple[str, int], dict[str, np.ndarray]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
            key = (row["video_id"], int(row["frame_idx"]))
            entries[key] = {
                head: np.asarray(row[head], dtype=np.float32) for head in header["heads"]
            }
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad soft-label record: {exc!r}") from None
    return SoftLabelSet(
        entries=entries,
        teacher_digest=header["teacher_digest"],
        fold_id=header["fold_id"],
        smoothing=header.get("smoothing", 0.0),
    )
