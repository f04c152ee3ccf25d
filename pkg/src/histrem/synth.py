"""Deterministic synthetic "gland texture" dataset generator.

Remission segments render regular circular crypt lattices with uniform
spacing; activity segments render distorted lattices plus high-frequency dark
speckle standing in for inflammatory infiltration. Per-image hue jitter and
rotation simulate staining and orientation variance. Content is procedural,
not photorealistic: the point is a labeled image hierarchy the full pipeline
can be exercised and tested on.

Every random draw comes from a generator seeded by (seed, image_id) or
(seed, purpose), so output is byte-identical across runs regardless of
generation order.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import domain
from .seeding import rng_for

# Stain-like palette: background, crypt ring, crypt lumen gray levels.
BACKGROUND_LEVEL = 0.72
RING_LEVEL = 0.35
LUMEN_LEVEL = 0.88
CHANNEL_GAINS = np.array([0.95, 0.62, 0.80])

# Activity rendering knobs at full signal strength (difficulty 0).
MAX_CENTER_JITTER = 0.35  # of lattice spacing
MAX_RADIUS_JITTER = 0.55  # relative radius spread
SPECKLE_AREA_FRACTION = 0.05

METADATA_MEDICATIONS = ("mesalazine", "steroids", "vedolizumab", "ustekinumab", "infliximab")

REMISSION_GRADES = ("0", "0.1", "1", "1.2", "2A", "2A.1", "2B", "2B.2", "3", "3.1")
ACTIVITY_GRADES = ("3.2", "3.3", "4", "4.1", "4.3", "5", "5.2")


class UnwritableOutputDir(OSError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 10
    segments_per_patient: tuple[int, int] = (1, 3)
    images_per_segment: int = 5
    image_size: int = 64
    activity_fraction: float = 0.25
    difficulty: float = 0.0
    seed: int = 0
    total_segments: int | None = None

    def validate(self) -> None:
        lo, hi = self.segments_per_patient
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if not 1 <= lo <= hi:
            raise ValueError(f"bad segments_per_patient range {self.segments_per_patient}")
        if self.images_per_segment < 5:
            raise ValueError("images_per_segment must be >= 5 (acquisition protocol)")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not 0.0 <= self.activity_fraction <= 1.0:
            raise ValueError("activity_fraction must lie in [0, 1]")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError("difficulty must lie in [0, 1]")
        if self.total_segments is not None:
            need = self.total_segments - self.n_patients * lo
            if need < 0 or need > self.n_patients * (hi - lo):
                raise ValueError(
                    f"total_segments={self.total_segments} unreachable with "
                    f"{self.n_patients} patients x range {self.segments_per_patient}"
                )


def render_base_image(size: int, active: bool, difficulty: float, rng: np.random.Generator) -> np.ndarray:
    """Render the colored crypt canvas (float RGB in 0..255), before jitter."""
    strength = 1.0 - difficulty
    spacing = size / 8.0
    radius = 0.30 * spacing
    phase = rng.uniform(0.0, spacing, size=2)

    lo = -1
    hi = int(math.ceil(size / spacing)) + 1
    centers = []
    radii = []
    for i in range(lo, hi):
        for j in range(lo, hi):
            cy = i * spacing + phase[0]
            cx = j * spacing + phase[1]
            r = radius
            if active:
                cy += rng.normal(0.0, MAX_CENTER_JITTER * spacing * strength)
                cx += rng.normal(0.0, MAX_CENTER_JITTER * spacing * strength)
                r *= 1.0 + rng.uniform(-MAX_RADIUS_JITTER, MAX_RADIUS_JITTER) * strength
            centers.append((cy, cx))
            radii.append(max(r, 0.5))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rel = np.full((size, size), np.inf)
    for (cy, cx), r in zip(centers, radii):
        d = np.hypot(yy - cy, xx - cx) / r
        np.minimum(rel, d, out=rel)

    gray = np.full((size, size), BACKGROUND_LEVEL)
    gray[np.abs(rel - 1.0) < 0.25] = RING_LEVEL
    gray[rel < 0.75] = LUMEN_LEVEL

    if active:
        n_speckle = int(round(strength * SPECKLE_AREA_FRACTION * size * size))
        if n_speckle:
            ys = rng.integers(0, size - 1, size=n_speckle)
            xs = rng.integers(0, size - 1, size=n_speckle)
            for y, x in zip(ys, xs):
                gray[y : y + 2, x : x + 2] = 0.18

    img = gray[:, :, None] * CHANNEL_GAINS[None, None, :] * 255.0
    img += rng.normal(0.0, 3.0, size=img.shape)
    return img


def apply_hue_jitter(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-channel gain and offset, simulating staining inconsistency."""
    gains = rng.uniform(0.95, 1.05, size=3)
    offsets = rng.uniform(-10.0, 10.0, size=3)
    return img * gains[None, None, :] + offsets[None, None, :]


def render_image(size: int, active: bool, difficulty: float, rng: np.random.Generator) -> np.ndarray:
    """Full per-image render: canvas -> hue jitter -> rotation -> uint8."""
    img = render_base_image(size, active, difficulty, rng)
    img = apply_hue_jitter(img, rng)
    img = np.rot90(img, k=int(rng.integers(4)), axes=(0, 1))
    return np.ascontiguousarray(np.clip(np.round(img), 0, 255).astype(np.uint8))


def _segment_counts(cfg: SynthConfig) -> list[int]:
    lo, hi = cfg.segments_per_patient
    if cfg.total_segments is None:
        return [
            int(rng_for(cfg.seed, "segcount", i).integers(lo, hi + 1))
            for i in range(cfg.n_patients)
        ]
    counts = [lo] * cfg.n_patients
    extras = cfg.total_segments - cfg.n_patients * lo
    order = list(range(cfg.n_patients))
    rng_for(cfg.seed, "segcount-extras").shuffle(order)
    idx = 0
    while extras > 0:
        pat = order[idx % cfg.n_patients]
        if counts[pat] < hi:
            counts[pat] += 1
            extras -= 1
        idx += 1
    return counts


def activity_count(n_segments: int, fraction: float) -> int:
    """floor(fraction * n) clamped so both classes appear when n >= 2."""
    n_act = int(math.floor(fraction * n_segments))
    if n_segments >= 2:
        n_act = min(max(n_act, 1), n_segments - 1)
    return n_act


@dataclass
class GenerateResult:
    manifest_path: Path
    n_patients: int
    n_segments: int
    n_images: int
    n_activity: int
    n_remission: int

    def summary(self) -> str:
        return (
            f"patients={self.n_patients} segments={self.n_segments} "
            f"images={self.n_images} activity={self.n_activity} "
            f"remission={self.n_remission}"
        )


def generate(cfg: SynthConfig, out_dir: str | Path) -> GenerateResult:
    """Generate images plus a manifest under out_dir. Deterministic per seed."""
    cfg.validate()
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(out_dir, os.W_OK):
            raise PermissionError(f"not writable: {out_dir}")
    except OSError as exc:
        raise UnwritableOutputDir(f"cannot create output dir {out_dir}: {exc}") from exc

    counts = _segment_counts(cfg)
    n_segments = sum(counts)
    if n_segments < 2:
        raise ValueError("config yields fewer than 2 segments")
    n_act = activity_count(n_segments, cfg.activity_fraction)
    perm = rng_for(cfg.seed, "labels").permutation(n_segments)
    is_active = np.zeros(n_segments, dtype=bool)
    is_active[perm[:n_act]] = True

    patients: list[domain.PatientRecord] = []
    segments: list[domain.SegmentRecord] = []
    images: list[domain.ImageRecord] = []

    seg_index = 0
    img_index = 0
    for p_i in range(cfg.n_patients):
        pid = f"p{p_i + 1:03d}"
        prng = rng_for(cfg.seed, "patient", pid)
        metadata = {
            "sex": "F" if prng.integers(2) else "M",
            "age": str(int(prng.integers(17, 79))),
            "mayo": str(int(prng.integers(0, 4))),
            "medication": METADATA_MEDICATIONS[int(prng.integers(len(METADATA_MEDICATIONS)))],
        }
        patients.append(domain.PatientRecord(pid, metadata=metadata))
        for _ in range(counts[p_i]):
            sid = f"s{seg_index + 1:04d}"
            active = bool(is_active[seg_index])
            pool = ACTIVITY_GRADES if active else REMISSION_GRADES
            grade = domain.parse_grade(
                pool[int(rng_for(cfg.seed, "grade", sid).integers(len(pool)))]
            )
            segments.append(
                domain.SegmentRecord(sid, pid, grade, domain.binarize(grade))
            )
            for _ in range(cfg.images_per_segment):
                iid = f"i{img_index + 1:05d}"
                pixels = render_image(
                    cfg.image_size, active, cfg.difficulty, rng_for(cfg.seed, "image", iid)
                )
                rel_path = f"images/{iid}.png"
                try:
                    Image.fromarray(pixels).save(out_dir / rel_path)
                except OSError as exc:
                    raise UnwritableOutputDir(f"cannot write {rel_path}: {exc}") from exc
                images.append(domain.ImageRecord(iid, sid, rel_path))
                img_index += 1
            seg_index += 1

    manifest_path = out_dir / "manifest.jsonl"
    try:
        manifest_path.write_text(
            "\n".join(domain.manifest_lines(patients, segments, images)) + "\n",
            encoding="utf-8",
        )
    except OSError as exc:
        raise UnwritableOutputDir(f"cannot write manifest: {exc}") from exc

    return GenerateResult(
        manifest_path=manifest_path,
        n_patients=cfg.n_patients,
        n_segments=n_segments,
        n_images=img_index,
        n_activity=n_act,
        n_remission=n_segments - n_act,
    )
