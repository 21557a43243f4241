"""Backbone contract, multi-task heads, losses, LR schedule, checkpoints.

The reference desk-scale backbone is a three-block convnet; larger
transformer backbones are registry entries that an external plugin can
provide. All loss functions operate on logits and come with analytic
gradients that are validated against finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .util import derive_rng, params_digest, stable_json
from .vocab import TripletVocabulary

HEAD_NAMES = ("triplet", "instrument", "verb", "target", "phase")


class BackboneUnavailableError(RuntimeError):
    """A registered backbone has no implementation in this environment."""


@dataclass(frozen=True)
class BackboneSpec:
    """Named backbone plus its embedding width.

    ``embedding_dim=None`` takes the registry default for the name.
    """

    name: str = "tiny-conv"
    embedding_dim: int | None = None
    pretrained: bool = False

    def __post_init__(self) -> None:
        if self.name not in BACKBONE_REGISTRY:
            raise ValueError(f"unknown backbone {self.name!r}; registered: {sorted(BACKBONE_REGISTRY)}")
        if self.embedding_dim is not None and self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")

    def resolved_dim(self) -> int:
        return self.embedding_dim or BACKBONE_REGISTRY[self.name]["embedding_dim"]


class TinyConvBackbone:
    """Three conv/relu/maxpool blocks, global average pooling, dense embedding.

    Input height and width must be divisible by 8 (three 2x pools).
    """

    def __init__(self, embedding_dim: int = 128, channels: tuple[int, int, int] = (8, 16, 32), dtype=np.float32):
        self.embedding_dim = embedding_dim
        self.channels = channels
        self.dtype = np.dtype(dtype)

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        cin = 3
        for k, cout in enumerate(self.channels):
            params[f"conv{k}/w"] = nn.he_normal(rng, (3, 3, cin, cout), fan_in=9 * cin, dtype=self.dtype)
            params[f"conv{k}/b"] = np.zeros(cout, dtype=self.dtype)
            cin = cout
        params["embed/w"] = nn.he_normal(rng, (cin, self.embedding_dim), fan_in=cin, dtype=self.dtype)
        params["embed/b"] = np.zeros(self.embedding_dim, dtype=self.dtype)
        return params

    def forward(self, params: dict[str, np.ndarray], x: np.ndarray):
        if x.ndim != 4 or x.shape[3] != 3:
            raise ValueError(f"expected images of shape (N, H, W, 3), got {x.shape}")
        if x.shape[1] % 8 or x.shape[2] % 8:
            raise ValueError(f"input spatial dims must be divisible by 8, got {x.shape[1]}x{x.shape[2]}")
        x = x.astype(self.dtype, copy=False)
        caches = []
        for k in range(len(self.channels)):
            x, c_conv = nn.conv2d_forward(x, params[f"conv{k}/w"], params[f"conv{k}/b"])
            x, c_relu = nn.relu_forward(x)
            x, c_pool = nn.maxpool2_forward(x)
            caches.append((c_conv, c_relu, c_pool))
        pooled, gap_shape = nn.global_avg_pool_forward(x)
        emb_pre, c_dense = nn.dense_forward(pooled, params["embed/w"], params["embed/b"])
        emb, c_emb_relu = nn.relu_forward(emb_pre)
        return emb, (caches, gap_shape, c_dense, c_emb_relu)

    def backward(self, params, cache, d_emb: np.ndarray) -> dict[str, np.ndarray]:
        caches, gap_shape, c_dense, c_emb_relu = cache
        grads: dict[str, np.ndarray] = {}
        d = nn.relu_backward(d_emb, c_emb_relu)
        d, grads["embed/w"], grads["embed/b"] = nn.dense_backward(d, params["embed/w"], c_dense)
        d = nn.global_avg_pool_backward(d, gap_shape)
        for k in reversed(range(len(self.channels))):
            c_conv, c_relu, c_pool = caches[k]
            d = nn.maxpool2_backward(d, c_pool)
            d = nn.relu_backward(d, c_relu)
            d, grads[f"conv{k}/w"], grads[f"conv{k}/b"] = nn.conv2d_backward(d, params[f"conv{k}/w"], c_conv)
        return grads


def _unavailable(name: str):
    def factory(embedding_dim: int, dtype):
        raise BackboneUnavailableError(
            f"backbone {name!r} is a registry placeholder; register an implementation "
            f"with register_backbone() to use it"
        )

    return factory


BACKBONE_REGISTRY: dict[str, dict] = {
    "tiny-conv": {
        "embedding_dim": 128,
        "factory": lambda embedding_dim, dtype: TinyConvBackbone(embedding_dim=embedding_dim, dtype=dtype),
    },
    # Transformer entries exist so configs referencing them validate; an
    # external plugin supplies the implementation.
    "swin-base": {"embedding_dim": 1024, "factory": _unavailable("swin-base")},
    "swin-large": {"embedding_dim": 1536, "factory": _unavailable("swin-large")},
}


def register_backbone(name: str, embedding_dim: int, factory) -> None:
    BACKBONE_REGISTRY[name] = {"embedding_dim": embedding_dim, "factory": factory}


def build_backbone(spec: BackboneSpec, dtype=np.float32):
    entry = BACKBONE_REGISTRY[spec.name]
    return entry["factory"](embedding_dim=spec.resolved_dim(), dtype=dtype)


@dataclass(frozen=True)
class HeadConfig:
    """Output head sizes and loss weights.

    The triplet head is always enabled; auxiliary heads are enabled by giving
    them a size. Weights must be non-negative with w_triplet > 0.
    """

    n_triplets: int
    n_instruments: int | None = None
    n_verbs: int | None = None
    n_targets: int | None = None
    n_phases: int | None = None
    w_triplet: float = 1.0
    w_instrument: float = 1.0
    w_verb: float = 1.0
    w_target: float = 1.0
    w_phase: float = 1.0

    def __post_init__(self) -> None:
        if self.n_triplets < 1:
            raise ValueError("n_triplets must be >= 1")
        if self.w_triplet <= 0:
            raise ValueError("w_triplet must be > 0")
        for h in HEAD_NAMES:
            if self.weight(h) < 0:
                raise ValueError(f"weight for head {h!r} must be >= 0")

    @classmethod
    def from_vocab(
        cls,
        vocab: TripletVocabulary,
        instruments: bool = False,
        verbs: bool = False,
        targets: bool = False,
        phases: int | None = None,
        **weights,
    ) -> "HeadConfig":
        n_i, n_v, n_t = vocab.components.dims
        return cls(
            n_triplets=vocab.n_classes,
            n_instruments=n_i if instruments else None,
            n_verbs=n_v if verbs else None,
            n_targets=n_t if targets else None,
            n_phases=phases,
            **weights,
        )

    def size(self, head: str) -> int | None:
        return {
            "triplet": self.n_triplets,
            "instrument": self.n_instruments,
            "verb": self.n_verbs,
            "target": self.n_targets,
            "phase": self.n_phases,
        }[head]

    def weight(self, head: str) -> float:
        return getattr(self, f"w_{head}")

    def enabled_heads(self) -> tuple[str, ...]:
        return tuple(h for h in HEAD_NAMES if self.size(h) is not None)


@dataclass
class ForwardOutput:
    """Per-head logits for one batch."""

    triplet: np.ndarray
    instrument: np.ndarray | None = None
    verb: np.ndarray | None = None
    target: np.ndarray | None = None
    phase: np.ndarray | None = None

    def heads(self) -> dict[str, np.ndarray]:
        return {h: getattr(self, h) for h in HEAD_NAMES if getattr(self, h) is not None}


# ---------------------------------------------------------------------------
# Losses (operate on logits; gradients are with respect to the logits)
# ---------------------------------------------------------------------------


def _check_bce_inputs(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape != targets.shape:
        raise ValueError(f"logits shape {logits.shape} != targets shape {targets.shape}")
    if not np.isfinite(logits).all() or not np.isfinite(targets).all():
        raise ValueError("non-finite values in BCE inputs")
    if targets.size and (targets.min() < 0 or targets.max() > 1):
        raise ValueError("targets must lie in [0, 1]")
    return logits, targets


def multilabel_bce_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean binary cross-entropy between sigmoid(logits) and targets in [0, 1].

    Computed from logits (log-sum-exp form), never from clipped probabilities.
    """
    z, t = _check_bce_inputs(logits, targets)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean())


def multilabel_bce_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of multilabel_bce_loss with respect to the logits."""
    z, t = _check_bce_inputs(logits, targets)
    return (sigmoid_probs(z) - t) / z.size


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _phase_target_matrix(logits: np.ndarray, phase_target: np.ndarray) -> np.ndarray:
    """One-hot ids or an already-soft (N, P) distribution -> (N, P) matrix."""
    n, p = logits.shape
    phase_target = np.asarray(phase_target)
    if phase_target.ndim == 1:
        ids = phase_target.astype(np.int64)
        if ids.shape != (n,):
            raise ValueError(f"expected {n} phase ids, got shape {phase_target.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= p):
            raise IndexError(f"phase id out of range [0, {p})")
        onehot = np.zeros((n, p), dtype=logits.dtype)
        onehot[np.arange(n), ids] = 1.0
        return onehot
    if phase_target.shape != (n, p):
        raise ValueError(f"phase target shape {phase_target.shape} incompatible with logits {logits.shape}")
    return phase_target


def phase_ce_loss(logits: np.ndarray, phase_target: np.ndarray) -> float:
    """Mean softmax cross-entropy; accepts integer ids or soft distributions."""
    logits = np.asarray(logits)
    t = _phase_target_matrix(logits, phase_target)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-(t * log_probs).sum(axis=-1).mean())


def phase_ce_grad(logits: np.ndarray, phase_target: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    t = _phase_target_matrix(logits, phase_target)
    return (_softmax(logits) - t) / logits.shape[0]


def multitask_loss(
    outputs: ForwardOutput, targets: dict[str, np.ndarray], config: HeadConfig
) -> tuple[float, dict[str, float]]:
    """Weighted sum of per-head losses; returns (total, per-head breakdown)."""
    total = 0.0
    breakdown: dict[str, float] = {}
    for head, logits in outputs.heads().items():
        if head not in targets:
            raise ValueError(f"missing target for enabled head {head!r}")
        if head == "phase":
            loss = phase_ce_loss(logits, targets[head])
        else:
            loss = multilabel_bce_loss(logits, targets[head])
        breakdown[head] = loss
        total += config.weight(head) * loss
    return total, breakdown


def multitask_grads(
    outputs: ForwardOutput, targets: dict[str, np.ndarray], config: HeadConfig
) -> dict[str, np.ndarray]:
    """Per-head gradients of the weighted total with respect to each head's logits."""
    grads: dict[str, np.ndarray] = {}
    for head, logits in outputs.heads().items():
        if head not in targets:
            raise ValueError(f"missing target for enabled head {head!r}")
        if head == "phase":
            g = phase_ce_grad(logits, targets[head])
        else:
            g = multilabel_bce_grad(logits, targets[head])
        grads[head] = config.weight(head) * g
    return grads


def sigmoid_probs(logits: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, numerically stable for large |z|."""
    z = np.asarray(logits)
    return np.exp(-np.logaddexp(0.0, -z))


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from lr_max (step 0) to lr_min (step total_steps)."""
    if total_steps <= 0:
        raise ValueError("total_steps must be > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr_max
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam + cosine annealing, the only supported optimizer."""

    epochs: int
    lr_max: float = 2e-4
    lr_min: float = 2e-6
    batch_size: int = 64
    weight_init_seed: int = 0
    algorithm: str = "adam"
    schedule: str = "cosine"

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must be <= lr_max")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.algorithm != "adam" or self.schedule != "cosine":
            raise ValueError("only adam + cosine annealing is supported")


# ---------------------------------------------------------------------------
# Multi-task model
# ---------------------------------------------------------------------------


class MultiTaskModel:
    """Backbone plus one linear head per enabled task."""

    def __init__(self, backbone_spec: BackboneSpec, head_config: HeadConfig, dtype=np.float32):
        self.backbone_spec = backbone_spec
        self.head_config = head_config
        self.dtype = np.dtype(dtype)
        self.backbone = build_backbone(backbone_spec, dtype=self.dtype)
        self.embedding_dim = backbone_spec.resolved_dim()

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        """All parameters from one integer seed."""
        rng = derive_rng(seed, "weight-init")
        params = self.backbone.init_params(rng)
        e = self.embedding_dim
        for head in self.head_config.enabled_heads():
            dim = self.head_config.size(head)
            params[f"head_{head}/w"] = nn.glorot_normal(rng, (e, dim), fan_in=e, fan_out=dim, dtype=self.dtype)
            params[f"head_{head}/b"] = np.zeros(dim, dtype=self.dtype)
        return params

    def forward(self, params: dict[str, np.ndarray], images: np.ndarray, want_cache: bool = False):
        emb, backbone_cache = self.backbone.forward(params, images)
        logits: dict[str, np.ndarray] = {}
        head_caches: dict[str, np.ndarray] = {}
        for head in self.head_config.enabled_heads():
            z, c = nn.dense_forward(emb, params[f"head_{head}/w"], params[f"head_{head}/b"])
            logits[head] = z
            head_caches[head] = c
        output = ForwardOutput(**logits)
        if want_cache:
            return output, (backbone_cache, head_caches)
        return output

    def loss_and_grads(self, params, images, targets: dict[str, np.ndarray]):
        """Total multi-task loss, per-head breakdown, and parameter gradients."""
        output, (backbone_cache, head_caches) = self.forward(params, images, want_cache=True)
        total, breakdown = multitask_loss(output, targets, self.head_config)
        head_grads = multitask_grads(output, targets, self.head_config)
        grads: dict[str, np.ndarray] = {}
        d_emb = None
        for head, dz in head_grads.items():
            dz = dz.astype(self.dtype, copy=False)
            dx, dw, db = nn.dense_backward(dz, params[f"head_{head}/w"], head_caches[head])
            grads[f"head_{head}/w"] = dw
            grads[f"head_{head}/b"] = db
            d_emb = dx if d_emb is None else d_emb + dx
        grads.update(self.backbone.backward(params, backbone_cache, d_emb))
        return total, breakdown, grads

    def predict_probs(self, params, images) -> dict[str, np.ndarray]:
        """Eval-mode probabilities: sigmoid for multi-label heads, softmax for phase."""
        output = self.forward(params, images)
        probs = {}
        for head, z in output.heads().items():
            probs[head] = _softmax(z) if head == "phase" else sigmoid_probs(z)
        return probs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class CheckpointIntegrityError(RuntimeError):
    """Stored digest does not match the checkpoint contents."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    backbone_spec: BackboneSpec
    head_config: HeadConfig
    meta: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return params_digest(self.params, self._meta_blob())

    def _meta_blob(self) -> dict:
        return {
            "backbone": asdict(self.backbone_spec),
            "heads": asdict(self.head_config),
            "meta": self.meta,
        }

    def build_model(self) -> MultiTaskModel:
        dtype = self.meta.get("dtype", "float32")
        return MultiTaskModel(self.backbone_spec, self.head_config, dtype=np.dtype(dtype))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write a checkpoint .npz; returns its content digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = ckpt.digest
    arrays = {f"param:{k}": v for k, v in ckpt.params.items()}
    arrays["__meta__"] = np.frombuffer(stable_json(ckpt._meta_blob()).encode("utf-8"), dtype=np.uint8)
    arrays["__digest__"] = np.frombuffer(digest.encode("ascii"), dtype=np.uint8)
    np.savez(path, **arrays)
    return digest


def load_checkpoint(path: str | Path, expected_digest: str | None = None) -> Checkpoint:
    with np.load(Path(path)) as npz:
        meta_blob = json.loads(bytes(npz["__meta__"]).decode("utf-8"))
        stored_digest = bytes(npz["__digest__"]).decode("ascii")
        params = {k[len("param:") :]: npz[k] for k in npz.files if k.startswith("param:")}
    ckpt = Checkpoint(
        params=params,
        backbone_spec=BackboneSpec(**meta_blob["backbone"]),
        head_config=HeadConfig(**meta_blob["heads"]),
        meta=meta_blob["meta"],
    )
    actual = ckpt.digest
    if actual != stored_digest:
        raise CheckpointIntegrityError(f"{path}: stored digest {stored_digest[:12]}... != contents {actual[:12]}...")
    if expected_digest is not None and actual != expected_digest:
        raise CheckpointIntegrityError(f"{path}: digest {actual[:12]}... != expected {expected_digest[:12]}...")
    return ckpt
