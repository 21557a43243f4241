"""Synthetic long-tailed multi-label dataset generator.

Frames are procedurally rendered so every label is recoverable from pixels:
each component index paints a colored glyph at an index-specific slot inside
its band (instruments / verbs / targets), and each triplet class paints an
identity dot in the bottom band. Class frequencies follow a power law, which
reproduces a heavy-tailed prevalence profile at desk scale.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest, FrameRecord
from .util import derive_rng
from .vocab import ComponentVocabulary, TripletVocabulary


@dataclass(frozen=True)
class SyntheticSpec:
    n_videos: int = 25
    frames_per_video: int = 200
    component_dims: tuple[int, int, int] = (3, 4, 5)
    n_valid_triplets: int = 20
    imbalance_exponent: float = 2.2
    max_triplets_per_frame: int = 3
    rng_seed: int = 0
    image_hw: tuple[int, int] = (32, 32)
    n_phases: int = 7
    background_noise: float = 0.05

    def __post_init__(self) -> None:
        n_i, n_v, n_t = self.component_dims
        if min(n_i, n_v, n_t) < 1:
            raise ValueError("component dims must be >= 1")
        if not 1 <= self.n_valid_triplets <= n_i * n_v * n_t:
            raise ValueError(f"n_valid_triplets must be in [1, {n_i * n_v * n_t}]")
        if self.n_videos < 1 or self.frames_per_video < 1:
            raise ValueError("need at least one video and one frame per video")
        if self.max_triplets_per_frame < 1:
            raise ValueError("max_triplets_per_frame must be >= 1")
        if self.imbalance_exponent < 0:
            raise ValueError("imbalance_exponent must be >= 0")
        if min(self.image_hw) < 16 or self.image_hw[0] % 8 or self.image_hw[1] % 8:
            raise ValueError("image_hw must be >= 16 and divisible by 8")
        if self.n_phases < 1:
            raise ValueError("n_phases must be >= 1")

    @property
    def n_frames(self) -> int:
        return self.n_videos * self.frames_per_video


def _palette(n: int, saturation: float, value: float) -> np.ndarray:
    """(n, 3) distinct colors, hue-spaced."""
    return np.array([colorsys.hsv_to_rgb(k / n, saturation, value) for k in range(n)])


def make_synthetic_vocabulary(spec: SyntheticSpec) -> TripletVocabulary:
    n_i, n_v, n_t = spec.component_dims
    components = ComponentVocabulary(
        instruments=tuple(f"inst{i:02d}" for i in range(n_i)),
        verbs=tuple(f"verb{v:02d}" for v in range(n_v)),
        targets=tuple(f"targ{t:02d}" for t in range(n_t)),
    )
    rng = derive_rng(spec.rng_seed, "synthetic-vocab")
    flat = rng.choice(n_i * n_v * n_t, size=spec.n_valid_triplets, replace=False)
    triplets = tuple((int(f) // (n_v * n_t), (int(f) // n_t) % n_v, int(f) % n_t) for f in sorted(flat))
    return TripletVocabulary(components=components, valid_triplets=triplets)


def class_weights(n_classes: int, imbalance_exponent: float) -> np.ndarray:
    """Normalized power-law sampling weights; class 0 is the head class."""
    w = (np.arange(1, n_classes + 1, dtype=np.float64)) ** (-imbalance_exponent)
    return w / w.sum()


def _paint(canvas: np.ndarray, y: int, x: int, half: int, color: np.ndarray) -> None:
    h, w, _ = canvas.shape
    y0, y1 = max(0, y - half), min(h, y + half + 1)
    x0, x1 = max(0, x - half), min(w, x + half + 1)
    canvas[y0:y1, x0:x1] = color


def render_frame(
    active_triplets: list[int],
    phase_id: int,
    vocab: TripletVocabulary,
    spec: SyntheticSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """H x W x 3 uint8 image encoding the active triplets and the phase."""
    h, w = spec.image_hw
    n_i, n_v, n_t = vocab.components.dims
    c = vocab.n_classes

    base = np.array(colorsys.hsv_to_rgb(phase_id / spec.n_phases, 0.3, 0.35))
    canvas = np.tile(base, (h, w, 1))
    canvas += np.linspace(-0.05, 0.05, h)[:, None, None]
    canvas += rng.normal(0.0, spec.background_noise, size=(h, w, 3))

    band = h // 4
    comp_palettes = (_palette(n_i, 0.95, 1.0), _palette(n_v, 0.8, 0.95), _palette(n_t, 0.65, 0.9))
    comp_dims = (n_i, n_v, n_t)
    glyph_half = max(1, min(h, w) // 20)

    id_cols = (c + 1) // 2
    id_palette = _palette(c, 1.0, 1.0)

    for class_id in active_triplets:
        parts = vocab.decompose(class_id)
        bright = rng.uniform(0.75, 1.0)
        for axis, comp_idx in enumerate(parts):
            dim = comp_dims[axis]
            cx = int((comp_idx + 0.5) * w / dim) + int(rng.integers(-1, 2))
            cy = axis * band + band // 2 + int(rng.integers(-1, 2))
            _paint(canvas, cy, cx, glyph_half, comp_palettes[axis][comp_idx] * bright)
        # identity dot in the bottom band, slot grid 2 x ceil(C/2)
        row, col = class_id // id_cols, class_id % id_cols
        cy = 3 * band + (band // 4 if row == 0 else 3 * band // 4)
        cx = int((col + 0.5) * w / id_cols)
        _paint(canvas, cy, cx, max(1, glyph_half - 1), id_palette[class_id] * bright)

    return (np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)


def generate_synthetic_dataset(spec: SyntheticSpec) -> DatasetManifest:
    """Seeded synthetic dataset; the vocabulary is attached to the manifest.

    Labels are drawn per frame with power-law class weights; every class is
    guaranteed at least one frame so prevalence is defined everywhere. Phase
    ids are contiguous segments within each video.
    """
    vocab = make_synthetic_vocabulary(spec)
    c = vocab.n_classes
    rng = derive_rng(spec.rng_seed, "synthetic-data")
    weights = class_weights(c, spec.imbalance_exponent)

    n = spec.n_frames
    labels: list[list[int]] = []
    for _ in range(n):
        k = 1 + int(rng.binomial(spec.max_triplets_per_frame - 1, 0.3)) if spec.max_triplets_per_frame > 1 else 1
        k = min(k, c)
        labels.append(sorted(int(x) for x in rng.choice(c, size=k, replace=False, p=weights)))

    # guarantee every class appears at least once
    present = {cls for frame in labels for cls in frame}
    for cls in range(c):
        if cls in present:
            continue
        while True:
            idx = int(rng.integers(n))
            if cls not in labels[idx] and len(labels[idx]) < spec.max_triplets_per_frame:
                labels[idx] = sorted(labels[idx] + [cls])
                break

    frames: list[FrameRecord] = []
    pos = 0
    for v in range(spec.n_videos):
        video_id = f"video{v:03d}"
        for f in range(spec.frames_per_video):
            phase_id = min(spec.n_phases - 1, f * spec.n_phases // spec.frames_per_video)
            active = labels[pos]
            image = render_frame(active, phase_id, vocab, spec, rng)
            vec = np.zeros(c, dtype=np.int8)
            vec[active] = 1
            frames.append(
                FrameRecord(video_id=video_id, frame_idx=f, triplet_labels=vec, phase_id=phase_id, image=image)
            )
            pos += 1
    return DatasetManifest(vocab=vocab, frames=frames)
