"""Dataset model: frame records, manifests, fold splits, and label noise.

A manifest is an ordered list of annotated frames plus the vocabulary they
are labeled against. Manifests are immutable after load; images may live
in memory, in a packed ``.npz`` store, or as individual image files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .util import derive_rng
from .vocab import TripletVocabulary, load_vocabulary, save_vocabulary

MANIFEST_FORMAT = "tripletkd-manifest"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Malformed manifest file or violated manifest invariant."""


class CoverageError(ValueError):
    """A prediction or soft-label set does not cover the required frames."""

    def __init__(self, message: str, missing: list | None = None):
        if missing:
            shown = ", ".join(map(str, missing[:10]))
            more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
            message = f"{message}: missing {shown}{more}"
        super().__init__(message)
        self.missing = missing or []


@dataclass
class FrameRecord:
    """One annotated frame.

    ``triplet_labels`` are the training labels (possibly noise-injected);
    ``clean_labels`` preserves the pre-noise annotation when noise was
    applied, else None. Component labels are always derived through the
    vocabulary, never stored.
    """

    video_id: str
    frame_idx: int
    triplet_labels: np.ndarray
    phase_id: int
    image: np.ndarray | None = None
    image_ref: str | None = None
    clean_labels: np.ndarray | None = None

    def active_triplets(self) -> list[int]:
        return np.nonzero(self.triplet_labels)[0].tolist()

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.frame_idx)


class _NpzImageStore:
    """Lazy reader over a packed images.npz (one uint8 array per frame)."""

    def __init__(self, path: Path):
        self.path = path
        self._npz = None

    def get(self, key: str) -> np.ndarray:
        if self._npz is None:
            self._npz = np.load(self.path)
        return self._npz[key]


@dataclass
class DatasetManifest:
    vocab: TripletVocabulary
    frames: list[FrameRecord]
    _store: _NpzImageStore | None = field(default=None, repr=False)
    _base_dir: Path | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.frames:
            raise ManifestError("manifest has no frames")
        seen: set[tuple[str, int]] = set()
        per_video: dict[str, list[int]] = {}
        c = self.vocab.n_classes
        for rec in self.frames:
            if rec.key in seen:
                raise ManifestError(f"duplicate frame {rec.key}")
            seen.add(rec.key)
            per_video.setdefault(rec.video_id, []).append(rec.frame_idx)
            if rec.triplet_labels.shape != (c,):
                raise ManifestError(f"frame {rec.key}: label vector has shape {rec.triplet_labels.shape}, expected ({c},)")
        for vid, idxs in per_video.items():
            idxs.sort()
            if idxs != list(range(idxs[0], idxs[0] + len(idxs))):
                raise ManifestError(f"video {vid}: frame indices are not contiguous")
        self._per_video_counts = {vid: len(idxs) for vid, idxs in per_video.items()}

    # -- basic views --------------------------------------------------------

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def video_ids(self) -> list[str]:
        """Video ids in first-appearance order."""
        out, seen = [], set()
        for rec in self.frames:
            if rec.video_id not in seen:
                seen.add(rec.video_id)
                out.append(rec.video_id)
        return out

    @property
    def per_video_counts(self) -> dict[str, int]:
        return dict(self._per_video_counts)

    def frame_keys(self) -> list[tuple[str, int]]:
        return [rec.key for rec in self.frames]

    def subset(self, video_ids) -> "DatasetManifest":
        wanted = set(video_ids)
        frames = [rec for rec in self.frames if rec.video_id in wanted]
        if not frames:
            raise ManifestError(f"no frames for videos {sorted(wanted)}")
        return DatasetManifest(vocab=self.vocab, frames=frames, _store=self._store, _base_dir=self._base_dir)

    def label_matrix(self, kind: str = "train") -> np.ndarray:
        """(N, C) binary label matrix.

        kind="train": the working labels (noisy if noise was injected);
        kind="eval": clean labels where available, falling back to train.
        """
        if kind not in ("train", "eval"):
            raise ValueError(f"kind must be 'train' or 'eval', got {kind!r}")
        rows = []
        for rec in self.frames:
            if kind == "eval" and rec.clean_labels is not None:
                rows.append(rec.clean_labels)
            else:
                rows.append(rec.triplet_labels)
        return np.stack(rows).astype(np.int8)

    def phase_ids(self) -> np.ndarray:
        return np.array([rec.phase_id for rec in self.frames], dtype=np.int64)

    def load_image(self, rec: FrameRecord) -> np.ndarray:
        """Materialize the H x W x 3 uint8 image of a frame."""
        if rec.image is not None:
            return rec.image
        if rec.image_ref is None:
            raise ManifestError(f"frame {rec.key} has no image")
        if "::" in rec.image_ref:
            store_name, key = rec.image_ref.split("::", 1)
            if self._store is None or self._store.path.name != store_name:
                base = self._base_dir or Path(".")
                self._store = _NpzImageStore(base / store_name)
            return self._store.get(key)
        from PIL import Image  # only needed for file-per-frame datasets

        path = Path(rec.image_ref)
        if self._base_dir is not None and not path.is_absolute():
            path = self._base_dir / path
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))


# ---------------------------------------------------------------------------
# Fold splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    """One cross-validation fold: video-level train / validation partition."""

    fold_id: int
    train_videos: tuple[str, ...]
    val_videos: tuple[str, ...]

    def __post_init__(self) -> None:
        if set(self.train_videos) & set(self.val_videos):
            raise ValueError(f"fold {self.fold_id}: train and val videos overlap")
        if not self.train_videos or not self.val_videos:
            raise ValueError(f"fold {self.fold_id}: empty train or val set")


def make_fold_splits(manifest: DatasetManifest, n_folds: int = 5, rng_seed: int = 0) -> list[FoldSplit]:
    """Video-level cross-validation partition.

    Every video lands in exactly one validation fold; each fold trains on the
    remaining folds' videos.
    """
    videos = manifest.video_ids
    if len(videos) < n_folds:
        raise ValueError(f"need at least {n_folds} videos for {n_folds} folds, have {len(videos)}")
    order = derive_rng(rng_seed, "fold-split").permutation(len(videos))
    shuffled = [videos[i] for i in order]
    val_groups = np.array_split(np.arange(len(videos)), n_folds)
    splits = []
    for fold_id, group in enumerate(val_groups):
        val = tuple(sorted(shuffled[i] for i in group))
        train = tuple(sorted(v for v in videos if v not in set(val)))
        splits.append(FoldSplit(fold_id=fold_id, train_videos=train, val_videos=val))
    return splits


# ---------------------------------------------------------------------------
# Label noise
# ---------------------------------------------------------------------------

NOISE_MODES = ("swap_one_component", "drop_triplet", "add_triplet")


@dataclass(frozen=True)
class NoiseConfig:
    """Synthetic annotation-noise model applied to training labels."""

    noise_rate: float
    mode: str = "swap_one_component"
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        if self.mode not in NOISE_MODES:
            raise ValueError(f"mode must be one of {NOISE_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class NoiseStats:
    total_labels: int
    changed: int
    skipped: int

    @property
    def changed_fraction(self) -> float:
        return self.changed / self.total_labels if self.total_labels else 0.0


def inject_label_noise(
    manifest: DatasetManifest, config: NoiseConfig, vocab: TripletVocabulary
) -> tuple[DatasetManifest, NoiseStats]:
    """Corrupt training labels; originals are kept in ``clean_labels``.

    swap_one_component: each active triplet is independently, with probability
    ``noise_rate``, replaced by a uniformly chosen valid triplet that differs
    in exactly one component. Labels without such a neighbor are left alone
    and counted as skipped.
    """
    rng = derive_rng(config.rng_seed, "label-noise")
    rate = config.noise_rate
    total = changed = skipped = 0
    frames: list[FrameRecord] = []
    for rec in manifest.frames:
        active = rec.active_triplets()
        total += len(active)
        new_active = set(active)
        for class_id in active:
            if rng.random() >= rate:
                continue
            if config.mode == "swap_one_component":
                neighbors = vocab.one_component_neighbors(class_id)
                if not neighbors:
                    skipped += 1
                    continue
                new_active.discard(class_id)
                new_active.add(int(neighbors[rng.integers(len(neighbors))]))
                changed += 1
            elif config.mode == "drop_triplet":
                new_active.discard(class_id)
                changed += 1
            else:  # add_triplet
                inactive = [c for c in range(vocab.n_classes) if c not in new_active]
                if not inactive:
                    skipped += 1
                    continue
                new_active.add(int(inactive[rng.integers(len(inactive))]))
                changed += 1
        labels = np.zeros(vocab.n_classes, dtype=np.int8)
        labels[sorted(new_active)] = 1
        clean = rec.clean_labels if rec.clean_labels is not None else rec.triplet_labels
        frames.append(replace(rec, triplet_labels=labels, clean_labels=clean.copy()))
    noisy = DatasetManifest(vocab=manifest.vocab, frames=frames, _store=manifest._store, _base_dir=manifest._base_dir)
    return noisy, NoiseStats(total_labels=total, changed=changed, skipped=skipped)


# ---------------------------------------------------------------------------
# Manifest persistence
#
# A manifest directory contains:
#   vocab.txt     the vocabulary file
#   frames.jsonl  header line + one JSON record per frame
#   images.npz    packed uint8 images (when images are stored inline)
#
# Frame record fields: video_id, frame_idx, image (path or "store::key"),
# triplets (active class ids), phase, clean_triplets (optional).
# ---------------------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    """Write a manifest directory; returns the frames.jsonl path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_vocabulary(manifest.vocab, out / "vocab.txt")

    images: dict[str, np.ndarray] = {}
    rows = []
    for rec in manifest.frames:
        if rec.image is not None:
            key = f"{rec.video_id}/{rec.frame_idx:06d}"
            images[key] = rec.image
            image_field = f"images.npz::{key}"
        elif rec.image_ref is not None:
            image_field = rec.image_ref
        else:
            image_field = None
        row = {
            "video_id": rec.video_id,
            "frame_idx": rec.frame_idx,
            "image": image_field,
            "triplets": rec.active_triplets(),
            "phase": rec.phase_id,
        }
        if rec.clean_labels is not None:
            row["clean_triplets"] = np.nonzero(rec.clean_labels)[0].tolist()
        rows.append(row)
    if images:
        np.savez(out / "images.npz", **images)

    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "vocab": "vocab.txt",
        "n_frames": manifest.n_frames,
        "videos": manifest.per_video_counts,
    }
    path = out / "frames.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load a manifest from its directory or its frames.jsonl path."""
    path = Path(path)
    if path.is_dir():
        path = path / "frames.jsonl"
    base = path.parent

    def fail(lineno: int, msg: str):
        raise ManifestError(f"{path}:{lineno}: {msg}")

    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        fail(1, f"bad header: {exc}")
    if header.get("format") != MANIFEST_FORMAT:
        fail(1, f"not a {MANIFEST_FORMAT} file")
    vocab = load_vocabulary(base / header["vocab"])

    frames = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as exc:
            fail(lineno, f"bad frame record: {exc}")
        try:
            labels = np.zeros(vocab.n_classes, dtype=np.int8)
            labels[row["triplets"]] = 1
            clean = None
            if row.get("clean_triplets") is not None:
                clean = np.zeros(vocab.n_classes, dtype=np.int8)
                clean[row["clean_triplets"]] = 1
            frames.append(
                FrameRecord(
                    video_id=row["video_id"],
                    frame_idx=int(row["frame_idx"]),
                    triplet_labels=labels,
                    phase_id=int(row["phase"]),
                    image_ref=row.get("image"),
                    clean_labels=clean,
                )
            )
        except (KeyError, IndexError, TypeError) as exc:
            fail(lineno, f"bad frame record: {exc!r}")
    try:
        return DatasetManifest(vocab=vocab, frames=frames, _base_dir=base)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None
