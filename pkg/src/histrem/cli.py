"""Command-line entry point.

Usage:
    histrem synth --out DIR [--set synth.n_patients=20 ...] [--summary]
    histrem split --manifest PATH --sizes 103,16,35 --seed 7 [--unit patient] [--out FILE]
    histrem train --config FILE [--preset desk] [--set train.epochs=5 ...] [--out DIR]
    histrem eval --checkpoint PATH --manifest PATH --split-file PATH [--test-only] [--out DIR]
    histrem grid --config FILE [--full | --backbones A,B --sizes 64 --resamplings none,ruao] [--out DIR]
    histrem report RUN_DIR [RUN_DIR ...] [--out DIR]

The experiment config is one JSON file; any key can be overridden from the
command line with dotted --set key=value pairs. The output root defaults to
$HISTREM_OUT or ./runs. Exit codes: 0 success, 2 config error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import domain, evaluate, experiment, models, preprocess, training

CONFIG_ERRORS = (
    models.InvalidConfig,
    domain.SizeMismatch,
    domain.MalformedGrade,
    ValueError,
    KeyError,
    TypeError,
    json.JSONDecodeError,
)


def _out_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("HISTREM_OUT", "runs"))


def _apply_set(data: dict, assignments: list[str]) -> dict:
    for item in assignments or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = value
    return data


def _load_config(args) -> experiment.ExperimentConfig:
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    else:
        data = experiment.ExperimentConfig().to_dict()
    _apply_set(data, getattr(args, "set", None))
    cfg = experiment.ExperimentConfig.from_dict(data)
    if getattr(args, "preset", None) == "desk":
        cfg = dataclasses.replace(
            cfg,
            image_size=64,
            train=dataclasses.replace(cfg.train, batch_size=32, epochs=20),
        )
    return cfg


def cmd_synth(args) -> int:
    data = {"synth": dataclasses.asdict(experiment.ExperimentConfig().synth)}
    _apply_set(data, args.set)
    s = dict(data["synth"])
    if "segments_per_patient" in s:
        s["segments_per_patient"] = tuple(s["segments_per_patient"])
    from .synth import SynthConfig, generate

    result = generate(SynthConfig(**s), _out_root(args))
    print(f"wrote {result.manifest_path}")
    if args.summary:
        print(result.summary())
    return 0


def cmd_split(args) -> int:
    sizes = tuple(int(v) for v in args.sizes.split(","))
    if len(sizes) != 3:
        raise ValueError(f"--sizes expects three comma-separated counts, got {args.sizes!r}")
    dataset = domain.load_manifest(args.manifest)
    split = domain.make_split(dataset.segments, sizes, args.seed, args.unit)
    text = "\n".join(domain.split_lines(split)) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = experiment.run(cfg, _out_root(args))
    print(f"run dir: {result.out_dir}")
    print((result.out_dir / "report_table.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_eval(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    dataset = domain.load_manifest(args.manifest)
    split = domain.parse_split(Path(args.split_file).read_text(encoding="utf-8"))
    ids = sorted(split.test if args.test_only else split.validation | split.test)
    pre_cfg = preprocess.PreprocessConfig(target_size=ckpt.model_config.input_size)
    batches = experiment._segment_batches(dataset, ids, pre_cfg)
    net = ckpt.build_network()
    report = evaluate.evaluate_segments(
        lambda imgs: models.predict_probs(net, imgs).numpy(),
        batches,
        config_digest=ckpt.pipeline_digest,
        dataset_digest=experiment.dataset_digest(Path(args.manifest)),
    )
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.jsonl").write_text("\n".join(report.to_lines()) + "\n", encoding="utf-8")
    print(
        f"segments={report.n_segments} accuracy={report.accuracy:.3f} "
        f"sensitivity={experiment._fmt(report.sensitivity)} "
        f"specificity={experiment._fmt(report.specificity)} auc={experiment._fmt(report.auc)}"
    )
    return 0


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    if args.full:
        cells = experiment.ablation_cells(desk=True)
    else:
        if not (args.backbones and args.sizes and args.resamplings):
            raise ValueError("grid needs --full or all of --backbones/--sizes/--resamplings")
        cells = experiment.cartesian_cells(
            args.backbones.split(","),
            [int(s) for s in args.sizes.split(",")],
            args.resamplings.split(","),
        )
    out = _out_root(args)
    rows = experiment.grid(cfg, cells, out)
    print((out / "grid_table.txt").read_text(encoding="utf-8"), end="")
    failed = [r for r in rows if r["status"].startswith("failed")]
    if failed:
        print(f"{len(failed)} cell(s) failed; see error.txt in their run dirs", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    table, _ = experiment.merge_reports(args.run_dirs, out_dir=args.out)
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histrem", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", help="output directory (default $HISTREM_OUT or ./runs)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--summary", action="store_true", help="print class counts")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("split", help="write a train/val/test split manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sizes", required=True, help="n_train,n_val,n_test")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--unit", choices=("segment", "patient"), default="segment")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="run one experiment end to end")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--preset", choices=("desk",))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split-file", required=True)
    p.add_argument("--test-only", action="store_true", help="evaluate the test split only")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grid", help="run an ablation grid")
    p.add_argument("--config", help="base experiment config JSON")
    p.add_argument("--preset", choices=("desk",))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--full", action="store_true", help="the standard 13-row ablation")
    p.add_argument("--backbones", help="comma-separated preset names")
    p.add_argument("--sizes", help="comma-separated input sizes")
    p.add_argument("--resamplings", help="comma-separated strategies")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("report", help="merge run reports into one table + ROC data")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except experiment.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.__cause__, CONFIG_ERRORS):
            return 2
        return 3
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
