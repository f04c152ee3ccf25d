"""Class-imbalance correction for the training split.

Two strategies:

  ruao  - random under-and-over sampling: both classes are brought to the
          midpoint T = floor((n_major + n_minor) / 2), the majority without
          replacement, the minority by keeping all originals and drawing the
          remainder with replacement. Never fabricates ids.
  smote - feature-space synthesis: a convolutional autoencoder embeds the
          minority images, new features are drawn on the chord between a
          minority feature and one of its k nearest minority neighbors, and
          the decoder restores each new feature to an image. Class counts
          end exactly equal.

Resampling applies to the training split only; validation and test data are
never resampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .models import _init_parameters
from .seeding import derive_seed, rng_for

STRATEGIES = ("none", "ruao", "smote")


class EmptyClass(ValueError):
    pass


class MinorityTooSmall(ValueError):
    pass


class UntrainedAutoencoder(RuntimeError):
    pass


class NonConvergence(RuntimeError):
    pass


@dataclass
class ClassIndex:
    """Per-label image id lists for the training split."""

    negatives: list[str]
    positives: list[str]

    @classmethod
    def from_labels(cls, ids: list[str], labels) -> "ClassIndex":
        neg = [i for i, lab in zip(ids, labels) if int(lab) == 0]
        pos = [i for i, lab in zip(ids, labels) if int(lab) == 1]
        return cls(negatives=neg, positives=pos)

    @property
    def n_neg(self) -> int:
        return len(self.negatives)

    @property
    def n_pos(self) -> int:
        return len(self.positives)


def _resample_class(ids: list[str], target: int, rng: np.random.Generator) -> list[str]:
    if len(ids) > target:
        picked = rng.choice(len(ids), size=target, replace=False)
        return [ids[i] for i in picked]
    if len(ids) < target:
        extra = rng.choice(len(ids), size=target - len(ids), replace=True)
        return list(ids) + [ids[i] for i in extra]
    return list(ids)


def ruao(index: ClassIndex, seed: int) -> list[str]:
    """Resampled id multiset with exactly T ids per class."""
    if index.n_neg == 0 or index.n_pos == 0:
        raise EmptyClass(f"both classes must be nonempty, got neg={index.n_neg} pos={index.n_pos}")
    target = (index.n_neg + index.n_pos) // 2
    rng = rng_for(seed, "ruao")
    return _resample_class(index.negatives, target, rng) + _resample_class(
        index.positives, target, rng
    )


def to_float01(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images)
    if x.dtype == np.uint8:
        return x.astype(np.float32) / 255.0
    return x.astype(np.float32)


class ConvAutoencoder(nn.Module):
    """Strided-conv encoder to a d-dim feature, mirrored transpose decoder.

    Operates on [B, S, S, 3] images in [0, 1]; S must be divisible by 8.
    """

    def __init__(self, image_size: int, feature_dim: int = 32):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError(f"image size must be divisible by 8, got {image_size}")
        self.image_size = image_size
        self.feature_dim = feature_dim
        self.trained = False
        self.mse_history: list[float] = []
        grid = image_size // 8
        self._bottleneck = (64, grid, grid)
        flat = 64 * grid * grid
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.to_feature = nn.Linear(flat, feature_dim)
        self.from_feature = nn.Linear(feature_dim, flat)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(16, 3, 4, stride=2, padding=1),
            nn.Sigmoid(),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h = self.encoder(x.permute(0, 3, 1, 2))
        return self.to_feature(h.flatten(1))

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        c, gh, gw = self._bottleneck
        h = torch.relu(self.from_feature(f)).reshape(-1, c, gh, gw)
        return self.decoder(h).permute(0, 2, 3, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def train_autoencoder(
    images: np.ndarray,
    feature_dim: int = 32,
    epochs: int = 30,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 32,
    mse_threshold: float = 0.1,
) -> ConvAutoencoder:
    """Fit the autoencoder by MSE; raises NonConvergence when the final
    reconstruction error stays above mse_threshold."""
    x = to_float01(images)
    if x.ndim != 4 or x.shape[0] < 2:
        raise ValueError("need at least 2 images of shape [S, S, 3]")
    ae = ConvAutoencoder(image_size=x.shape[1], feature_dim=feature_dim)
    ae_seed = derive_seed(seed, "autoencoder")
    _init_parameters(ae, ae_seed)
    optimizer = torch.optim.Adam(ae.parameters(), lr=lr)
    data = torch.from_numpy(x)
    n = data.shape[0]

    def full_mse() -> float:
        ae.eval()
        with torch.no_grad():
            return float(torch.mean((ae(data) - data) ** 2))

    ae.mse_history.append(full_mse())
    for epoch in range(1, epochs + 1):
        ae.train()
        perm = rng_for(ae_seed, "ae-order", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(perm[start : start + batch_size].copy())
            batch = data[idx]
            loss = torch.mean((ae(batch) - batch) ** 2)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        ae.mse_history.append(full_mse())

    if ae.mse_history[-1] > mse_threshold:
        raise NonConvergence(
            f"autoencoder MSE {ae.mse_history[-1]:.5f} above threshold {mse_threshold} "
            f"after {epochs} epochs"
        )
    ae.trained = True
    ae.eval()
    return ae


@dataclass
class SyntheticSample:
    """One decoded minority-class sample plus its synthesis provenance."""

    image: np.ndarray  # [S, S, 3] float32 in [0, 1]
    source_i: str
    source_j: str
    u: float
    feature: np.ndarray  # f_new, float64


@dataclass
class SmoteResult:
    original_ids: list[str]
    minority_label: int
    synthetic: list[SyntheticSample] = field(default_factory=list)

    def class_counts(self, index: ClassIndex) -> tuple[int, int]:
        n_neg, n_pos = index.n_neg, index.n_pos
        if self.minority_label == 0:
            n_neg += len(self.synthetic)
        else:
            n_pos += len(self.synthetic)
        return n_neg, n_pos


def _nearest_neighbors(features: np.ndarray, k: int) -> np.ndarray:
    diffs = features[:, None, :] - features[None, :, :]
    dists = np.sqrt((diffs**2).sum(axis=2))
    np.fill_diagonal(dists, np.inf)
    return np.argsort(dists, axis=1, kind="mergesort")[:, :k]


def smote(
    index: ClassIndex,
    images_by_id: dict[str, np.ndarray],
    ae: ConvAutoencoder,
    k: int = 5,
    seed: int = 0,
) -> SmoteResult:
    """Equalize class counts by decoding interpolated minority features.

    Each synthetic feature is f_i + u * (f_j - f_i) with u ~ U(0,1) and f_j
    one of f_i's k nearest minority neighbors, so it lies on the segment
    between two real minority features.
    """
    if index.n_neg == 0 or index.n_pos == 0:
        raise EmptyClass(f"both classes must be nonempty, got neg={index.n_neg} pos={index.n_pos}")
    if not getattr(ae, "trained", False):
        raise UntrainedAutoencoder("autoencoder must be trained before smote")

    if index.n_pos <= index.n_neg:
        minority_ids, minority_label = list(index.positives), 1
        n_new = index.n_neg - index.n_pos
    else:
        minority_ids, minority_label = list(index.negatives), 0
        n_new = index.n_pos - index.n_neg

    if len(minority_ids) < 2:
        raise MinorityTooSmall(f"minority class has {len(minority_ids)} samples, need >= 2")
    if not 1 <= k <= len(minority_ids) - 1:
        raise MinorityTooSmall(f"k={k} must satisfy 1 <= k <= n_minority - 1 = {len(minority_ids) - 1}")

    stack = np.stack([to_float01(images_by_id[i]) for i in minority_ids])
    ae.eval()
    with torch.no_grad():
        feats = ae.encode(torch.from_numpy(stack)).numpy().astype(np.float64)
    neighbors = _nearest_neighbors(feats, k)

    rng = rng_for(seed, "smote")
    result = SmoteResult(
        original_ids=sorted(index.negatives) + sorted(index.positives),
        minority_label=minority_label,
    )
    for _ in range(n_new):
        i = int(rng.integers(len(minority_ids)))
        j = int(neighbors[i][int(rng.integers(k))])
        u = float(rng.uniform())
        f_new = feats[i] + u * (feats[j] - feats[i])
        with torch.no_grad():
            image = ae.decode(torch.from_numpy(f_new.astype(np.float32)[None, :]))[0].numpy()
        result.synthetic.append(
            SyntheticSample(
                image=image,
                source_i=minority_ids[i],
                source_j=minority_ids[j],
                u=u,
                feature=f_new,
            )
        )
    return result
