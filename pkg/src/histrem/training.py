"""Training loop: cross-entropy objective, per-epoch validation metrics,
best-epoch checkpoint selection, and a self-describing checkpoint container.

Determinism contract: batch order and augmentation draws are pure functions
of (seed, epoch), so identical (config, seed) give identical TrainLogs under
single-process execution. Checkpoints store raw little-endian float32
tensors; a reload reproduces eval-mode logits bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evaluate, models
from .domain import BinaryLabel
from .preprocess import apply_dihedral
from .seeding import rng_for

CHECKPOINT_MAGIC = b"HISTREM.CKPT\x00\x00\x00\x00"
CHECKPOINT_VERSION = 1


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


class EmptySplit(ValueError):
    pass


class VersionMismatch(RuntimeError):
    pass


class VersionMismatchWarning(UserWarning):
    """Checkpoint was produced under a different pipeline config digest."""


class CorruptCheckpoint(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 50
    optimizer: str = "adam"  # adam | sgd_momentum
    seed: int = 0
    selection_metric: str = "auc"  # auc | accuracy
    grad_clip: float = 10.0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.selection_metric not in ("auc", "accuracy"):
            raise ValueError(f"unknown selection_metric {self.selection_metric!r}")


@dataclass
class TrainSet:
    """Flat image-level training data (labels inherited from segments)."""

    images: np.ndarray  # [N, S, S, 3] float32, preprocessed but unaugmented
    labels: np.ndarray  # [N] int64
    image_ids: list[str]
    augment: bool = False


#: (segment_id, image stack [k, S, S, 3], truth label)
SegmentBatch = tuple[str, np.ndarray, BinaryLabel]


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_sensitivity: float | None
    val_specificity: float | None
    val_auc: float | None

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "train_loss": self.train_loss,
                "val_accuracy": self.val_accuracy,
                "val_sensitivity": self.val_sensitivity,
                "val_specificity": self.val_specificity,
                "val_auc": self.val_auc,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass
class TrainLog:
    entries: list[TrainLogEntry] = field(default_factory=list)

    def to_lines(self, config_digest: str = "") -> list[str]:
        if not config_digest:
            return [e.to_json() for e in self.entries]
        lines = []
        for e in self.entries:
            rec = json.loads(e.to_json())
            rec["config_digest"] = config_digest
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        return lines

    def best_epoch(self, metric: str) -> int:
        return max(self.entries, key=lambda e: _selection_key(e, metric)).epoch


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logp = torch.log_softmax(logits, dim=1)
    return -logp.gather(1, labels.view(-1, 1)).mean()


def _selection_key(entry: TrainLogEntry, metric: str):
    value = entry.val_auc if metric == "auc" else entry.val_accuracy
    if value is None:
        value = float("-inf")
    # ties break toward higher accuracy, then the earlier epoch
    return (value, entry.val_accuracy, -entry.epoch)


@dataclass
class Checkpoint:
    model_config: models.ModelConfig
    state: dict[str, np.ndarray]  # float32 tensors, insertion-ordered
    epoch: int
    metrics: dict[str, float | None]
    pipeline_digest: str = ""
    version: int = CHECKPOINT_VERSION

    def build_network(self) -> models.ClassifierNet:
        net = models.build(self.model_config, seed=0)
        tensors = {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}
        net.load_state_dict(tensors)
        net.eval()
        return net


def _make_optimizer(net: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    return torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=0.9)


def train(
    net: models.ClassifierNet,
    train_set: TrainSet,
    val_set: list[SegmentBatch],
    cfg: TrainConfig,
    pipeline_digest: str = "",
) -> tuple[Checkpoint, TrainLog]:
    """Train and return the best-validation checkpoint plus the full log."""
    cfg.validate()
    n = len(train_set.labels)
    if n == 0 or not val_set:
        raise EmptySplit("training and validation splits must be nonempty")
    classes = set(int(v) for v in train_set.labels)
    if classes != {0, 1}:
        raise ValueError(f"training split must contain both classes, got labels {sorted(classes)}")

    optimizer = _make_optimizer(net, cfg)
    log = TrainLog()
    best_key = None
    best_state: dict[str, np.ndarray] | None = None
    best_epoch = -1
    best_metrics: dict[str, float | None] = {}

    labels_t = torch.from_numpy(train_set.labels.astype(np.int64))
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        perm = rng_for(cfg.seed, "order", epoch).permutation(n)
        aug_rng = rng_for(cfg.seed, "augment", epoch)
        elements = aug_rng.integers(8, size=n) if train_set.augment else None

        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if train_set.augment:
                batch_np = np.stack(
                    [
                        apply_dihedral(train_set.images[i], k=int(e) % 4, flip=int(e) >= 4)
                        for i, e in zip(idx, elements[start : start + cfg.batch_size])
                    ]
                )
            else:
                batch_np = train_set.images[idx]
            batch = torch.from_numpy(np.ascontiguousarray(batch_np))
            loss = cross_entropy(net(batch), labels_t[idx])
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            optimizer.step()
            total_loss += value * len(idx)

        net.eval()
        report = evaluate.evaluate_segments(
            lambda imgs: models.predict_probs(net, imgs).numpy(), val_set
        )
        entry = TrainLogEntry(
            epoch=epoch,
            train_loss=total_loss / n,
            val_accuracy=report.accuracy,
            val_sensitivity=report.sensitivity,
            val_specificity=report.specificity,
            val_auc=report.auc,
        )
        log.entries.append(entry)

        key = _selection_key(entry, cfg.selection_metric)
        if best_key is None or key > best_key:
            best_key = key
            best_epoch = epoch
            best_state = {
                k: v.detach().cpu().numpy().astype("<f4", copy=True)
                for k, v in net.state_dict().items()
            }
            best_metrics = {
                "accuracy": entry.val_accuracy,
                "sensitivity": entry.val_sensitivity,
                "specificity": entry.val_specificity,
                "auc": entry.val_auc,
            }

    checkpoint = Checkpoint(
        model_config=net.config,
        state=best_state,
        epoch=best_epoch,
        metrics=best_metrics,
        pipeline_digest=pipeline_digest,
    )
    return checkpoint, log


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Single-file container: magic, version, JSON header, raw tensors, sha256."""
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "pipeline_digest": ckpt.pipeline_digest,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in ckpt.state.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", ckpt.version)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for value in ckpt.state.values():
        blob += np.ascontiguousarray(value, dtype="<f4").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path, expected_digest: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 8 + 32:
        raise CorruptCheckpoint(f"file too short: {path}")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"bad magic header: {path}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"content digest mismatch (truncated or modified): {path}")

    offset = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", body, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", body, offset)
    offset += 8
    header = json.loads(body[offset : offset + header_len].decode("utf-8"))
    offset += header_len

    state: dict[str, np.ndarray] = {}
    for meta in header["tensors"]:
        count = int(np.prod(meta["shape"], dtype=np.int64)) if meta["shape"] else 1
        nbytes = count * 4
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(meta["shape"])
        state[meta["name"]] = arr.copy()
        offset += nbytes
    if offset != len(body):
        raise CorruptCheckpoint(f"trailing bytes in checkpoint: {path}")

    ckpt = Checkpoint(
        model_config=models.ModelConfig.from_dict(header["model_config"]),
        state=state,
        epoch=header["epoch"],
        metrics=header["metrics"],
        pipeline_digest=header["pipeline_digest"],
        version=version,
    )
    if expected_digest is not None and expected_digest != ckpt.pipeline_digest:
        warnings.warn(
            f"checkpoint pipeline digest {ckpt.pipeline_digest!r} does not match "
            f"expected {expected_digest!r}",
            VersionMismatchWarning,
        )
    return ckpt
