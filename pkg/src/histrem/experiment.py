"""Experiment orchestration: a single config drives generate/load -> split ->
preprocess -> resample (train only) -> train -> segment-level evaluation.

Every artifact is stamped with the config digest (sha256 of the canonical
config serialization) and the dataset digest (sha256 of the manifest bytes),
so reports and checkpoints can be cross-validated. Identical (config, seed)
runs produce byte-identical artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import domain, evaluate, models, preprocess, resample, synth, training
from .seeding import derive_seed


class PipelineError(RuntimeError):
    """A stage failure; the original exception is chained as __cause__."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


class IncompatibleReports(UserWarning):
    """Merged reports were produced from different datasets."""


TABLE_COLUMNS = ("ID", "Backbone", "Image size", "Resampling",
                 "Accuracy", "Sensitivity", "Specificity", "AUC")


@dataclass(frozen=True)
class SplitSpec:
    sizes: tuple[int, int, int] = (103, 16, 35)
    seed: int = 7
    unit: str = "segment"


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    synth: synth.SynthConfig | None = field(default_factory=synth.SynthConfig)
    manifest: str | None = None
    backbone: str = "resnet-desk"
    image_size: int = 64
    model_overrides: dict = field(default_factory=dict)
    preprocess: preprocess.PreprocessConfig = field(default_factory=preprocess.PreprocessConfig)
    resampling: str = "none"
    smote_k: int = 5
    ae_feature_dim: int = 32
    ae_epochs: int = 30
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    eval_mode: str = "pooled"  # pooled | test_only

    def resolved_model(self) -> models.ModelConfig:
        cfg = models.preset(self.backbone, input_size=self.image_size)
        if self.model_overrides:
            overrides = dict(self.model_overrides)
            for key in ("widths", "stem_strides", "head_hidden"):
                if key in overrides:
                    overrides[key] = tuple(overrides[key])
            cfg = dataclasses.replace(cfg, **overrides)
        return cfg

    def resolved_preprocess(self) -> preprocess.PreprocessConfig:
        return dataclasses.replace(self.preprocess, target_size=self.image_size)

    def validate(self) -> None:
        if (self.synth is None) == (self.manifest is None):
            raise ValueError("config needs exactly one of a synth block or a manifest path")
        if self.synth is not None:
            self.synth.validate()
        if self.resampling not in resample.STRATEGIES:
            raise models.InvalidConfig(
                f"unknown resampling {self.resampling!r}; choose from {resample.STRATEGIES}"
            )
        if self.eval_mode not in ("pooled", "test_only"):
            raise ValueError(f"unknown eval_mode {self.eval_mode!r}")
        if self.split.unit not in ("segment", "patient"):
            raise ValueError(f"unknown split unit {self.split.unit!r}")
        self.resolved_model().validate()
        self.train.validate()

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "source": (
                {"synth": dataclasses.asdict(self.synth)}
                if self.synth is not None
                else {"manifest": self.manifest}
            ),
            "backbone": self.backbone,
            "image_size": self.image_size,
            "model_overrides": dict(self.model_overrides),
            "model": self.resolved_model().to_dict(),
            "preprocess": {
                "color_normalize": self.preprocess.color_normalize,
                "augment": self.preprocess.augment,
                "denoise": self.preprocess.denoise,
                "seed": self.preprocess.seed,
            },
            "resampling": self.resampling,
            "smote_k": self.smote_k,
            "ae_feature_dim": self.ae_feature_dim,
            "ae_epochs": self.ae_epochs,
            "train": dataclasses.asdict(self.train),
            "split": {
                "sizes": list(self.split.sizes),
                "seed": self.split.seed,
                "unit": self.split.unit,
            },
            "eval_mode": self.eval_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        source = d.pop("source", {})
        synth_cfg = None
        manifest = None
        if "synth" in source and source["synth"] is not None:
            s = dict(source["synth"])
            if "segments_per_patient" in s:
                s["segments_per_patient"] = tuple(s["segments_per_patient"])
            synth_cfg = synth.SynthConfig(**s)
        elif "manifest" in source:
            manifest = source["manifest"]
        pre = d.pop("preprocess", {})
        pre.pop("target_size", None)
        split_d = d.pop("split", {})
        if "sizes" in split_d:
            split_d["sizes"] = tuple(split_d["sizes"])
        d.pop("model", None)  # resolved view, not an input
        d.pop("digest", None)  # stamp added on write, recomputed on demand
        return cls(
            run_id=d.pop("run_id", "run"),
            synth=synth_cfg,
            manifest=manifest,
            preprocess=preprocess.PreprocessConfig(**pre),
            train=training.TrainConfig(**d.pop("train", {})),
            split=SplitSpec(**split_d),
            **d,
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]


def _stage(name: str, fn):
    try:
        return fn()
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def _load_raw(dataset: domain.Dataset, image_ids: list[str]) -> dict[str, np.ndarray]:
    return {iid: dataset.images[iid].load_pixels(dataset.root) for iid in image_ids}


def _segment_batches(
    dataset: domain.Dataset,
    segment_ids: list[str],
    pre_cfg: preprocess.PreprocessConfig,
) -> list[training.SegmentBatch]:
    batches = []
    for sid in sorted(segment_ids):
        seg = dataset.segments[sid]
        stack = np.stack(
            [
                preprocess.preprocess_image(dataset.images[iid].load_pixels(dataset.root), pre_cfg)
                for iid in seg.image_ids
            ]
        )
        batches.append((sid, stack, seg.label))
    return batches


@dataclass
class ResampledTrainData:
    """Training items after the resampling stage, still in raw image space."""

    ids: list[str]
    images: list[np.ndarray]
    labels: list[int]
    synthetic_flags: list[bool]
    smote_result: resample.SmoteResult | None = None


def build_train_data(
    dataset: domain.Dataset,
    train_segment_ids: frozenset[str],
    strategy: str,
    seed: int,
    smote_k: int = 5,
    ae_feature_dim: int = 32,
    ae_epochs: int = 30,
) -> ResampledTrainData:
    """Collect train-split images (labels inherited from segments) and apply
    the configured resampling strategy."""
    image_ids = sorted(
        iid
        for sid in train_segment_ids
        for iid in dataset.segments[sid].image_ids
    )
    labels_by_id = {
        iid: int(dataset.segments[dataset.images[iid].segment_id].label) for iid in image_ids
    }
    raw = _load_raw(dataset, image_ids)

    if strategy == "none":
        return ResampledTrainData(
            ids=image_ids,
            images=[raw[i] for i in image_ids],
            labels=[labels_by_id[i] for i in image_ids],
            synthetic_flags=[False] * len(image_ids),
        )

    index = resample.ClassIndex.from_labels(image_ids, [labels_by_id[i] for i in image_ids])
    if strategy == "ruao":
        picked = resample.ruao(index, seed=seed)
        return ResampledTrainData(
            ids=list(picked),
            images=[raw[i] for i in picked],
            labels=[labels_by_id[i] for i in picked],
            synthetic_flags=[False] * len(picked),
        )

    if strategy == "smote":
        minority_label = 1 if index.n_pos <= index.n_neg else 0
        minority_ids = index.positives if minority_label == 1 else index.negatives
        ae = resample.train_autoencoder(
            np.stack([raw[i] for i in sorted(minority_ids)]),
            feature_dim=ae_feature_dim,
            epochs=ae_epochs,
            seed=derive_seed(seed, "smote-ae"),
        )
        result = resample.smote(index, raw, ae, k=smote_k, seed=seed)
        ids = list(image_ids)
        images: list[np.ndarray] = [raw[i] for i in image_ids]
        labels = [labels_by_id[i] for i in image_ids]
        flags = [False] * len(image_ids)
        for n, sample in enumerate(result.synthetic, start=1):
            ids.append(f"syn{n:05d}")
            images.append(sample.image)
            labels.append(result.minority_label)
            flags.append(True)
        return ResampledTrainData(
            ids=ids, images=images, labels=labels, synthetic_flags=flags, smote_result=result
        )

    raise models.InvalidConfig(f"unknown resampling strategy {strategy!r}")


def preprocess_train_set(
    data: ResampledTrainData, pre_cfg: preprocess.PreprocessConfig
) -> training.TrainSet:
    stack = np.stack([preprocess.preprocess_image(img, pre_cfg) for img in data.images])
    return training.TrainSet(
        images=stack,
        labels=np.asarray(data.labels, dtype=np.int64),
        image_ids=list(data.ids),
        augment=pre_cfg.augment,
    )


def write_synthetic_images(
    data: ResampledTrainData, dataset: domain.Dataset, out_dir: Path
) -> Path | None:
    """Persist decoded smote images beside the originals, flagged synthetic."""
    if data.smote_result is None:
        return None
    syn_dir = out_dir / "synthetic"
    syn_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for sid, sample, flag in zip(data.ids, data.images, data.synthetic_flags):
        if not flag:
            continue
        pixels = np.clip(np.round(np.asarray(sample) * 255.0), 0, 255).astype(np.uint8)
        rel = f"synthetic/{sid}.png"
        Image.fromarray(pixels).save(out_dir / rel)
        source = data.smote_result.synthetic[len(records)].source_i
        records.append(
            domain.ImageRecord(
                image_id=sid,
                segment_id=dataset.images[source].segment_id,
                path=rel,
                synthetic=True,
            )
        )
    manifest = out_dir / "resampled_manifest.jsonl"
    lines = domain.manifest_lines(
        list(dataset.patients.values()),
        list(dataset.segments.values()),
        list(dataset.images.values()) + records,
    )
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def dataset_digest(manifest_path: Path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()[:16]


@dataclass
class RunResult:
    out_dir: Path
    config_digest: str
    dataset_digest: str
    report: evaluate.EvalReport
    checkpoint_path: Path
    trainlog_path: Path
    report_path: Path

    def table_row(self, cfg: ExperimentConfig) -> dict:
        return {
            "id": cfg.run_id,
            "backbone": cfg.backbone,
            "image_size": cfg.image_size,
            "resampling": cfg.resampling,
            "accuracy": self.report.accuracy,
            "sensitivity": self.report.sensitivity,
            "specificity": self.report.specificity,
            "auc": self.report.auc,
            "config_digest": self.config_digest,
            "dataset_digest": self.dataset_digest,
            "status": "ok",
        }


def run(cfg: ExperimentConfig, out_root: str | Path) -> RunResult:
    """Execute the full pipeline and write all artifacts under out_root/run_id."""
    cfg.validate()
    out_dir = Path(out_root) / cfg.run_id
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    stamped = dict(cfg.to_dict(), digest=digest)
    (out_dir / "config.json").write_text(
        json.dumps(stamped, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )

    if cfg.synth is not None:
        gen = _stage("generate", lambda: synth.generate(cfg.synth, out_dir / "dataset"))
        manifest_path = gen.manifest_path
    else:
        manifest_path = Path(cfg.manifest)
    ds_digest = dataset_digest(manifest_path)
    dataset = _stage("load", lambda: domain.load_manifest(manifest_path))

    split = _stage(
        "split",
        lambda: domain.make_split(dataset.segments, cfg.split.sizes, cfg.split.seed, cfg.split.unit),
    )
    (out_dir / "split.txt").write_text("\n".join(domain.split_lines(split)) + "\n", encoding="utf-8")

    pre_cfg = cfg.resolved_preprocess()
    train_data = _stage(
        "resample",
        lambda: build_train_data(
            dataset,
            split.train,
            cfg.resampling,
            seed=cfg.train.seed,
            smote_k=cfg.smote_k,
            ae_feature_dim=cfg.ae_feature_dim,
            ae_epochs=cfg.ae_epochs,
        ),
    )
    _stage("resample", lambda: write_synthetic_images(train_data, dataset, out_dir))
    train_set = _stage("preprocess", lambda: preprocess_train_set(train_data, pre_cfg))
    val_batches = _stage(
        "preprocess", lambda: _segment_batches(dataset, sorted(split.validation), pre_cfg)
    )

    net = _stage("build", lambda: models.build(cfg.resolved_model(), seed=cfg.train.seed))
    ckpt, log = _stage(
        "train", lambda: training.train(net, train_set, val_batches, cfg.train, pipeline_digest=digest)
    )
    trainlog_path = out_dir / "trainlog.jsonl"
    trainlog_path.write_text("\n".join(log.to_lines(config_digest=digest)) + "\n", encoding="utf-8")
    checkpoint_path = out_dir / "checkpoint.ckpt"
    _stage("checkpoint", lambda: training.save_checkpoint(ckpt, checkpoint_path))

    eval_ids = sorted(split.test if cfg.eval_mode == "test_only" else split.validation | split.test)
    eval_batches = _stage("preprocess", lambda: _segment_batches(dataset, eval_ids, pre_cfg))
    best_net = ckpt.build_network()
    report = _stage(
        "evaluate",
        lambda: evaluate.evaluate_segments(
            lambda imgs: models.predict_probs(best_net, imgs).numpy(),
            eval_batches,
            config_digest=digest,
            dataset_digest=ds_digest,
        ),
    )
    report_path = out_dir / "report.jsonl"
    report_path.write_text("\n".join(report.to_lines()) + "\n", encoding="utf-8")

    result = RunResult(
        out_dir=out_dir,
        config_digest=digest,
        dataset_digest=ds_digest,
        report=report,
        checkpoint_path=checkpoint_path,
        trainlog_path=trainlog_path,
        report_path=report_path,
    )
    (out_dir / "report_table.txt").write_text(
        render_table([result.table_row(cfg)]) + "\n", encoding="utf-8"
    )
    roc = evaluate.roc_points(report.scored()) if report.auc is not None else []
    (out_dir / "roc.jsonl").write_text(
        "\n".join(
            json.dumps({"fpr": f, "tpr": t}, sort_keys=True, separators=(",", ":")) for f, t in roc
        )
        + "\n",
        encoding="utf-8",
    )
    return result


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def render_table(rows: list[dict]) -> str:
    """Fixed-width table in the standard ablation column order."""
    keys = ("id", "backbone", "image_size", "resampling",
            "accuracy", "sensitivity", "specificity", "auc")
    cells = [[_fmt(row.get(k)) for k in keys] for row in rows]
    widths = [
        max(len(TABLE_COLUMNS[i]), *(len(r[i]) for r in cells)) if cells else len(TABLE_COLUMNS[i])
        for i in range(len(keys))
    ]
    lines = [
        " | ".join(TABLE_COLUMNS[i].ljust(widths[i]) for i in range(len(keys))),
        "-+-".join("-" * w for w in widths),
    ]
    for r in cells:
        lines.append(" | ".join(r[i].ljust(widths[i]) for i in range(len(keys))))
    return "\n".join(lines)


def _id_sort_key(run_id: str):
    parts = run_id.split(".")
    try:
        return (0, tuple(int(p) for p in parts))
    except ValueError:
        return (1, tuple(parts))


#: The standard 13-row ablation: conv backbones across input sizes and
#: resampling strategies (group 1), pure transformer backbones (group 2),
#: attention-augmented designs (group 3). Sizes are the standard trio; the
#: desk mapping below shrinks them proportionally for laptop-scale runs.
ABLATION_ROWS: tuple[tuple[str, str, int, str], ...] = (
    ("1.1", "resnet-desk", 224, "ruao"),
    ("1.2", "resnet-desk", 299, "ruao"),
    ("1.3", "resnet-desk", 512, "ruao"),
    ("1.4", "resnet-desk", 224, "none"),
    ("1.5", "resnet-efficient-desk", 224, "none"),
    ("1.6", "resnet-desk", 224, "ruao"),
    ("1.7", "resnet-efficient-desk", 224, "ruao"),
    ("1.8", "resnet-desk", 224, "smote"),
    ("1.9", "resnet-efficient-desk", 224, "smote"),
    ("2.1", "vit-desk", 224, "ruao"),
    ("2.2", "vit-wide-desk", 224, "ruao"),
    ("3.1", "resnet-a-desk", 224, "ruao"),
    ("3.2", "ours-desk", 224, "ruao"),
)

DESK_SIZE_MAP = {224: 64, 299: 96, 512: 128}


def ablation_cells(desk: bool = True) -> list[tuple[str, str, int, str]]:
    if not desk:
        return list(ABLATION_ROWS)
    return [(rid, bk, DESK_SIZE_MAP[size], rs) for rid, bk, size, rs in ABLATION_ROWS]


def grid(
    base: ExperimentConfig,
    cells: list[tuple[str, str, int, str]],
    out_root: str | Path,
) -> list[dict]:
    """Run each (id, backbone, image_size, resampling) cell with the shared
    base config. Completed cells (report.jsonl present) are reused, so grid
    rows regenerate independently. Per-cell failures are recorded and the
    grid continues."""
    if not cells:
        raise ValueError("grid needs at least one cell")
    out_root = Path(out_root)
    rows = []
    for run_id, backbone, image_size, resampling in cells:
        cfg = dataclasses.replace(
            base, run_id=run_id, backbone=backbone, image_size=image_size, resampling=resampling
        )
        report_path = out_root / run_id / "report.jsonl"
        try:
            if report_path.exists():
                report = evaluate.report_from_lines(
                    report_path.read_text(encoding="utf-8").strip().splitlines()
                )
                rows.append(
                    {
                        "id": run_id,
                        "backbone": backbone,
                        "image_size": image_size,
                        "resampling": resampling,
                        "accuracy": report.accuracy,
                        "sensitivity": report.sensitivity,
                        "specificity": report.specificity,
                        "auc": report.auc,
                        "config_digest": report.config_digest,
                        "dataset_digest": report.dataset_digest,
                        "status": "cached",
                    }
                )
            else:
                result = run(cfg, out_root)
                rows.append(result.table_row(cfg))
        except Exception as exc:  # record the failure, keep the grid going
            (out_root / run_id).mkdir(parents=True, exist_ok=True)
            (out_root / run_id / "error.txt").write_text(f"{exc}\n", encoding="utf-8")
            rows.append(
                {
                    "id": run_id,
                    "backbone": backbone,
                    "image_size": image_size,
                    "resampling": resampling,
                    "accuracy": None,
                    "sensitivity": None,
                    "specificity": None,
                    "auc": None,
                    "config_digest": "",
                    "dataset_digest": "",
                    "status": f"failed: {type(exc).__name__}",
                }
            )
    rows.sort(key=lambda r: _id_sort_key(r["id"]))
    (out_root / "grid.jsonl").write_text(
        "\n".join(json.dumps(r, sort_keys=True, separators=(",", ":")) for r in rows) + "\n",
        encoding="utf-8",
    )
    table = render_table(rows)
    note = resampling_winner_note(rows)
    if note:
        table += "\n" + note
    (out_root / "grid_table.txt").write_text(table + "\n", encoding="utf-8")
    return rows


def resampling_winner_note(rows: list[dict]) -> str:
    """Descriptive footer naming the strategy with the best AUC in the grid.

    Which strategy wins is an empirical observation, never an assertion."""
    by_strategy: dict[str, float] = {}
    for r in rows:
        if r.get("auc") is None:
            continue
        s = r["resampling"]
        by_strategy[s] = max(by_strategy.get(s, float("-inf")), r["auc"])
    if len(by_strategy) < 2:
        return ""
    top = max(by_strategy.values())
    winners = sorted(s for s, v in by_strategy.items() if v == top)
    ranking = ", ".join(
        f"{s}={by_strategy[s]:.3f}" for s in sorted(by_strategy, key=by_strategy.get, reverse=True)
    )
    label = " (tied)" if len(winners) > 1 else ""
    return f"best AUC by resampling strategy: {'/'.join(winners)}{label} ({ranking})"


def cartesian_cells(
    backbones: list[str], image_sizes: list[int], resamplings: list[str]
) -> list[tuple[str, str, int, str]]:
    if not backbones or not image_sizes or not resamplings:
        raise ValueError("every grid axis needs at least one value")
    combos = itertools.product(backbones, image_sizes, resamplings)
    return [
        (str(i + 1), bk, size, rs) for i, (bk, size, rs) in enumerate(combos)
    ]


def merge_reports(run_dirs: list[str | Path], out_dir: str | Path | None = None) -> tuple[str, list[dict]]:
    """Merge completed run directories into one table plus ROC point files.

    Emits an IncompatibleReports warning when dataset digests differ; the
    table is still rendered.
    """
    if not run_dirs:
        raise ValueError("need at least one run directory")
    rows = []
    roc_by_id = {}
    for d in run_dirs:
        d = Path(d)
        report = evaluate.report_from_lines(
            (d / "report.jsonl").read_text(encoding="utf-8").strip().splitlines()
        )
        cfg_d = json.loads((d / "config.json").read_text(encoding="utf-8"))
        rows.append(
            {
                "id": cfg_d["run_id"],
                "backbone": cfg_d["backbone"],
                "image_size": cfg_d["image_size"],
                "resampling": cfg_d["resampling"],
                "accuracy": report.accuracy,
                "sensitivity": report.sensitivity,
                "specificity": report.specificity,
                "auc": report.auc,
                "config_digest": report.config_digest,
                "dataset_digest": report.dataset_digest,
            }
        )
        if report.auc is not None:
            roc_by_id[cfg_d["run_id"]] = evaluate.roc_points(report.scored())
    digests = {r["dataset_digest"] for r in rows}
    if len(digests) > 1:
        warnings.warn(
            f"merged runs cover {len(digests)} distinct datasets: {sorted(digests)}",
            IncompatibleReports,
        )
    rows.sort(key=lambda r: _id_sort_key(r["id"]))
    table = render_table(rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "merged_table.txt").write_text(table + "\n", encoding="utf-8")
        for rid, points in roc_by_id.items():
            (out_dir / f"roc_{rid}.jsonl").write_text(
                "\n".join(
                    json.dumps({"fpr": f, "tpr": t}, sort_keys=True, separators=(",", ":"))
                    for f, t in points
                )
                + "\n",
                encoding="utf-8",
            )
    return table, rows
