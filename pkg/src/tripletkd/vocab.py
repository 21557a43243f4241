"""Compositional triplet label space.

A triplet class is an (instrument, verb, target) combination. The vocabulary
maps triplet class ids 0..C-1 to their component indices and back, and derives
component-level labels from triplet-level labels. Vocabularies are immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COMPONENT_KINDS = ("instrument", "verb", "target")


class VocabularyError(ValueError):
    """Malformed vocabulary definition or vocabulary file."""


def _check_names(names: tuple[str, ...], kind: str) -> None:
    if not names:
        raise VocabularyError(f"{kind} list is empty")
    for n in names:
        if not n or n != n.strip():
            raise VocabularyError(f"bad {kind} name {n!r}")
    if len(set(names)) != len(names):
        raise VocabularyError(f"duplicate {kind} names")


@dataclass(frozen=True)
class ComponentVocabulary:
    """Ordered instrument / verb / target name lists."""

    instruments: tuple[str, ...]
    verbs: tuple[str, ...]
    targets: tuple[str, ...]

    def __post_init__(self) -> None:
        _check_names(self.instruments, "instrument")
        _check_names(self.verbs, "verb")
        _check_names(self.targets, "target")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (len(self.instruments), len(self.verbs), len(self.targets))


@dataclass
class TripletVocabulary:
    """Valid triplet classes over a component vocabulary.

    ``valid_triplets[c]`` is the (instrument_idx, verb_idx, target_idx) tuple
    of class id ``c``; class order is definition order. Treat instances as
    immutable: internal lookup tables are built once in ``__post_init__``.
    """

    components: ComponentVocabulary
    valid_triplets: tuple[tuple[int, int, int], ...]

    _tuple_to_id: dict[tuple[int, int, int], int] = field(init=False, repr=False)
    _component_idx: np.ndarray = field(init=False, repr=False)  # (C, 3) int

    def __post_init__(self) -> None:
        n_i, n_v, n_t = self.components.dims
        self.valid_triplets = tuple(tuple(int(x) for x in t) for t in self.valid_triplets)
        if not self.valid_triplets:
            raise VocabularyError("vocabulary has no valid triplets")
        if len(self.valid_triplets) > n_i * n_v * n_t:
            raise VocabularyError("more triplets than component combinations")
        seen: dict[tuple[int, int, int], int] = {}
        for c, (i, v, t) in enumerate(self.valid_triplets):
            if not (0 <= i < n_i and 0 <= v < n_v and 0 <= t < n_t):
                raise VocabularyError(f"triplet {c} has out-of-range component {(i, v, t)}")
            if (i, v, t) in seen:
                raise VocabularyError(f"duplicate triplet tuple {(i, v, t)} (classes {seen[(i, v, t)]} and {c})")
            seen[(i, v, t)] = c
        self._tuple_to_id = seen
        self._component_idx = np.array(self.valid_triplets, dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return len(self.valid_triplets)

    def __len__(self) -> int:
        return self.n_classes

    def decompose(self, class_id: int) -> tuple[int, int, int]:
        """Component indices (instrument, verb, target) of a triplet class."""
        if not 0 <= class_id < self.n_classes:
            raise IndexError(f"triplet class id {class_id} out of range [0, {self.n_classes})")
        return self.valid_triplets[class_id]

    def compose(self, instrument: int, verb: int, target: int) -> int | None:
        """Class id of an (i, v, t) tuple, or None if the tuple is not a valid triplet."""
        n_i, n_v, n_t = self.components.dims
        if not (0 <= instrument < n_i and 0 <= verb < n_v and 0 <= target < n_t):
            raise IndexError(f"component index out of range: {(instrument, verb, target)}")
        return self._tuple_to_id.get((instrument, verb, target))

    def triplet_name(self, class_id: int) -> tuple[str, str, str]:
        i, v, t = self.decompose(class_id)
        c = self.components
        return (c.instruments[i], c.verbs[v], c.targets[t])

    def class_id_of_names(self, instrument: str, verb: str, target: str) -> int | None:
        c = self.components
        try:
            idx = (c.instruments.index(instrument), c.verbs.index(verb), c.targets.index(target))
        except ValueError as exc:
            raise VocabularyError(f"unknown component name in {(instrument, verb, target)}") from exc
        return self.compose(*idx)

    def component_match(self, a: int, b: int) -> int:
        """Number of identical components between two triplet classes (0..3).

        Equals 3 iff a == b; at most 2 for distinct valid triplets.
        """
        ia, va, ta = self.decompose(a)
        ib, vb, tb = self.decompose(b)
        return int(ia == ib) + int(va == vb) + int(ta == tb)

    def component_projection(self, kind: str) -> np.ndarray:
        """Binary (C, dim) matrix mapping triplet classes to one component axis."""
        if kind not in COMPONENT_KINDS:
            raise ValueError(f"kind must be one of {COMPONENT_KINDS}, got {kind!r}")
        axis = COMPONENT_KINDS.index(kind)
        dim = self.components.dims[axis]
        proj = np.zeros((self.n_classes, dim), dtype=np.float64)
        proj[np.arange(self.n_classes), self._component_idx[:, axis]] = 1.0
        return proj

    def component_multihot(self, triplet_multihot: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project triplet labels onto component labels (elementwise OR).

        Accepts a (C,) vector or an (N, C) batch of {0,1} entries; component k
        is active iff some active triplet contains component k.
        """
        x = np.asarray(triplet_multihot)
        if x.shape[-1] != self.n_classes:
            raise ValueError(f"expected label vectors of length {self.n_classes}, got shape {x.shape}")
        if x.size and not np.isin(np.unique(x), (0, 1)).all():
            raise ValueError("triplet label entries must be 0 or 1")
        out = []
        for kind in COMPONENT_KINDS:
            proj = self.component_projection(kind)
            out.append((x @ proj > 0).astype(np.int8))
        return tuple(out)

    def one_component_neighbors(self, class_id: int) -> tuple[int, ...]:
        """Valid triplet classes differing from ``class_id`` in exactly one component."""
        self.decompose(class_id)  # range check
        return self._neighbor_table()[class_id]

    def _neighbor_table(self) -> tuple[tuple[int, ...], ...]:
        cached = getattr(self, "_neighbors", None)
        if cached is None:
            comp = self._component_idx
            match = sum((comp[:, k, None] == comp[None, :, k]).astype(np.int8) for k in range(3))
            cached = tuple(tuple(np.nonzero(match[c] == 2)[0].tolist()) for c in range(self.n_classes))
            self._neighbors = cached
        return cached


def full_vocabulary(components: ComponentVocabulary) -> TripletVocabulary:
    """Vocabulary containing every (i, v, t) combination, in lexicographic order."""
    n_i, n_v, n_t = components.dims
    triplets = tuple((i, v, t) for i in range(n_i) for v in range(n_v) for t in range(n_t))
    return TripletVocabulary(components=components, valid_triplets=triplets)


# Module-level aliases matching the operation-style API used elsewhere.

def decompose_triplet(class_id: int, vocab: TripletVocabulary) -> tuple[int, int, int]:
    return vocab.decompose(class_id)


def compose_triplet_id(instrument: int, verb: int, target: int, vocab: TripletVocabulary) -> int | None:
    return vocab.compose(instrument, verb, target)


def component_multihot(triplet_multihot: np.ndarray, vocab: TripletVocabulary):
    return vocab.component_multihot(triplet_multihot)


def component_match_count(a: int, b: int, vocab: TripletVocabulary) -> int:
    return vocab.component_match(a, b)


@dataclass(frozen=True)
class PrevalenceTable:
    """Per-triplet-class positive-frame fraction over a dataset.

    Entries are counts / n_frames; frames are multi-label, so the entries do
    not generally sum to 1.
    """

    fractions: np.ndarray
    n_frames: int

    def __post_init__(self) -> None:
        f = np.asarray(self.fractions, dtype=np.float64)
        if f.ndim != 1 or (f < 0).any() or (f > 1).any():
            raise ValueError("prevalence fractions must be a 1-D vector in [0, 1]")
        object.__setattr__(self, "fractions", f)

    def positive_classes(self) -> np.ndarray:
        return np.nonzero(self.fractions > 0)[0]

    def max_min_ratio(self) -> float:
        """Ratio of the largest to the smallest positive prevalence."""
        pos = self.fractions[self.fractions > 0]
        if pos.size == 0:
            raise ValueError("no class has positive prevalence")
        return float(pos.max() / pos.min())


def prevalence_from_labels(labels: np.ndarray) -> PrevalenceTable:
    """Prevalence table from an (N, C) binary label matrix."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError("labels must be a non-empty (n_frames, n_classes) matrix")
    return PrevalenceTable(fractions=labels.astype(np.float64).mean(axis=0), n_frames=labels.shape[0])


def prevalence(manifest, vocab: TripletVocabulary) -> PrevalenceTable:
    """Per-class positive-frame fraction of a dataset manifest."""
    labels = manifest.label_matrix("train")
    if labels.shape[1] != vocab.n_classes:
        raise ValueError("manifest label width does not match vocabulary size")
    return prevalence_from_labels(labels)


# ---------------------------------------------------------------------------
# Vocabulary file format
#
# Plain text, one section per component list followed by the triplet records:
#
#   [instruments]          one name per line, order defines the index
#   [verbs]
#   [targets]
#   [triplets]             class_id,instrument_name,verb_name,target_name
#
# Class ids must be consecutive from 0 in file order; duplicate names, ids or
# tuples are rejected.
# ---------------------------------------------------------------------------

_SECTIONS = ("instruments", "verbs", "targets", "triplets")


def save_vocabulary(vocab: TripletVocabulary, path: str | Path) -> None:
    lines = []
    for section, names in zip(_SECTIONS[:3], (vocab.components.instruments, vocab.components.verbs, vocab.components.targets)):
        lines.append(f"[{section}]")
        lines.extend(names)
    lines.append("[triplets]")
    for c in range(vocab.n_classes):
        i, v, t = vocab.triplet_name(c)
        lines.append(f"{c},{i},{v},{t}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocabulary(path: str | Path) -> TripletVocabulary:
    sections: dict[str, list[tuple[int, str]]] = {s: [] for s in _SECTIONS}
    current: str | None = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            if name not in _SECTIONS:
                raise VocabularyError(f"{path}:{lineno}: unknown section {name!r}")
            current = name
            continue
        if current is None:
            raise VocabularyError(f"{path}:{lineno}: content before first section header")
        sections[current].append((lineno, line))

    def names_of(section: str) -> tuple[str, ...]:
        return tuple(text for _, text in sections[section])

    components = ComponentVocabulary(names_of("instruments"), names_of("verbs"), names_of("targets"))
    name_idx = {
        "instrument": {n: k for k, n in enumerate(components.instruments)},
        "verb": {n: k for k, n in enumerate(components.verbs)},
        "target": {n: k for k, n in enumerate(components.targets)},
    }
    triplets: list[tuple[int, int, int]] = []
    for expected_id, (lineno, line) in enumerate(sections["triplets"]):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise VocabularyError(f"{path}:{lineno}: expected 'class_id,instrument,verb,target'")
        try:
            class_id = int(parts[0])
        except ValueError:
            raise VocabularyError(f"{path}:{lineno}: class id {parts[0]!r} is not an integer") from None
        if class_id != expected_id:
            raise VocabularyError(f"{path}:{lineno}: class id {class_id} out of order (expected {expected_id})")
        idx = []
        for kind, name in zip(("instrument", "verb", "target"), parts[1:]):
            if name not in name_idx[kind]:
                raise VocabularyError(f"{path}:{lineno}: unknown {kind} name {name!r}")
            idx.append(name_idx[kind][name])
        triplets.append(tuple(idx))
    try:
        return TripletVocabulary(components=components, valid_triplets=tuple(triplets))
    except VocabularyError as exc:
        raise VocabularyError(f"{path}: {exc}") from None
