"""Command-line entry point: ``sldd <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from pydantic import TypeAdapter, ValidationError

from . import artifact_io, detector, experiments
from .distill import DistillConfig, accuracy, distill
from .nets import ModelSpec
from .patches import (
    UNLABELED,
    SliceConfig,
    build_dataset,
    load_dataset,
    normalize,
    read_manifest,
    read_raster,
    save_dataset,
)
from .replay import predict, rebuild, write_predictions
from .synthetic import make_patch_benchmark, write_scene_fixture
from .tensor import NonFiniteError

log = logging.getLogger("sldd")

OUTPUT_ROOT_ENV = "SLDD_OUTPUT_ROOT"
RASTER_SUFFIXES = (".pgm", ".png", ".tif", ".tiff", ".bmp")


class ConfigError(Exception):
    """Bad configuration, arguments or inputs: exit code 1."""


@dataclass
class DataPaths:
    __pydantic_config__ = {"extra": "forbid"}

    images: str | None = None
    masks: str | None = None
    manifest: str | None = None
    dataset: str | None = None
    test_dataset: str | None = None


@dataclass
class BaselineConfig:
    __pydantic_config__ = {"extra": "forbid"}

    subset_sizes: list[int] = field(default_factory=lambda: [1, 3, 10])
    distilled_sizes: list[int] = field(default_factory=lambda: [1, 2, 3])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class SweepConfig:
    __pydantic_config__ = {"extra": "forbid"}

    models: list[ModelSpec] = field(default_factory=lambda: [ModelSpec(kind="convnet"), ModelSpec(kind="convnet", conv_channels=(16, 32))])
    sizes: list[int] = field(default_factory=lambda: [1, 2, 3])
    floor: float = 0.9
    jobs: int = 1


@dataclass
class RunConfig:
    """Everything a run needs; every section has defaults."""

    __pydantic_config__ = {"extra": "forbid"}

    model: ModelSpec = field(default_factory=ModelSpec)
    slice: SliceConfig = field(default_factory=SliceConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    detect: detector.DetectConfig = field(default_factory=detector.DetectConfig)
    train: experiments.TrainConfig = field(default_factory=experiments.TrainConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    data: DataPaths = field(default_factory=DataPaths)
    eval_seed: int | None = None
    output_dir: str | None = None


_RUN_ADAPTER = TypeAdapter(RunConfig)


def parse_run_config(raw: dict | None) -> RunConfig:
    try:
        return _RUN_ADAPTER.validate_python(raw or {})
    except ValidationError as exc:
        lines = [f"  {'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid run config:\n" + "\n".join(lines)) from None


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return parse_run_config(raw)


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(asdict(cfg))), sort_keys=True)


def _override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Re-validate ``cfg`` with non-None ``values`` set in ``section``."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    raw = json.loads(json.dumps(asdict(cfg)))
    raw[section].update(values)
    return parse_run_config(raw)


def _output_dir(args, cfg: RunConfig, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def _prepare(out: Path, cfg: RunConfig) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.yaml").write_text(dump_run_config(cfg))
    return out


def _need(path: str | None, what: str) -> str:
    if not path:
        raise ConfigError(f"no {what} given (set it in the config or on the command line)")
    if not Path(path).exists():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _load_patches(path: str | None, what: str):
    path = _need(path, what)
    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "patches":
        train, test = make_patch_benchmark(args.n_train, args.n_test, args.size, args.noise, seed=args.seed)
        save_dataset(train, out / "train")
        save_dataset(test, out / "test")
        print(f"wrote {len(train)} train and {len(test)} test patches under {out}")
    else:
        write_scene_fixture(out, args.n_images, args.image_size, seed=args.seed, fmt=args.format)
        print(f"wrote {args.n_images} scenes under {out}")
    return 0


def _raster_files(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in RASTER_SUFFIXES}


def cmd_slice(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _override(cfg, "data", images=args.images, masks=args.masks, manifest=args.manifest)
    cfg = _override(cfg, "slice", image_size=args.image_size, patch_size=args.patch_size, stride=args.stride)
    images_dir = Path(_need(cfg.data.images, "image directory"))
    labels = read_manifest(_need(cfg.data.manifest, "manifest"))
    if not labels:
        raise ConfigError(f"manifest {cfg.data.manifest} lists no images")
    files = _raster_files(images_dir)
    missing = sorted(set(labels) - set(files))
    if missing:
        raise ConfigError(f"manifest images not found in {images_dir}: {', '.join(missing[:5])}")
    masks_dir = None
    if not args.unlabeled:
        masks_dir = Path(_need(cfg.data.masks, "mask directory"))
        mask_files = _raster_files(masks_dir)
        missing = sorted(set(labels) - set(mask_files))
        if missing:
            raise ConfigError(f"missing masks for: {', '.join(missing[:5])}")

    images, masks = {}, {}
    for image_id in labels:
        img = read_raster(files[image_id])
        if img.shape != (cfg.slice.image_size, cfg.slice.image_size):
            raise ConfigError(f"{image_id}: image is {img.shape}, config expects {cfg.slice.image_size} square")
        images[image_id] = img
        if masks_dir is not None:
            masks[image_id] = read_raster(mask_files[image_id])
    ds, discarded = build_dataset(images, cfg.slice, masks or None, None if args.unlabeled else labels)
    ds.meta["image_labels"] = dict(sorted(labels.items()))
    ds.meta["discarded"] = discarded
    out = _prepare(_output_dir(args, cfg, "slice"), cfg)
    save_dataset(ds, out)
    counts = ds.counts()
    summary = ", ".join(f"{k}={v}" for k, v in counts.items())
    print(f"{len(images)} images, {len(ds)} patches ({summary}), {sum(discarded.values())} discarded -> {out}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _override(cfg, "data", dataset=args.dataset)
    cfg = _override(cfg, "distill", steps=args.steps, num_images=args.num_images, seed=args.seed)
    data = _load_patches(cfg.data.dataset, "training dataset")
    data = data.subset(np.flatnonzero(data.labels != UNLABELED))
    if len(data) == 0:
        raise ConfigError("training dataset has no labeled patches")
    if data.norm is None:
        data = normalize(data)
    out = _prepare(_output_dir(args, cfg, "distill"), cfg)

    detection = "image_labels" in data.meta or len(set(data.image_ids.tolist())) > 1
    metric = detector.hm_metric(cfg.detect) if detection else accuracy
    with open(out / "training_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "val_metric"])

        def record(step, loss, value):
            w.writerow([step, repr(loss), "" if value is None else repr(value)])
            if value is not None:
                log.info("step %d loss %.5f val %.4f", step, loss, value)

        art = distill(cfg.distill, data, cfg.model, metric=metric, callback=record)
    artifact_io.save(art, out / "artifact.sldd")
    print(f"artifact -> {out / 'artifact.sldd'} (best {'HM' if detection else 'accuracy'} {art.best_metric:.4f} at step {art.best_step})")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _override(cfg, "data", test_dataset=args.dataset)
    cfg = _override(cfg, "detect", delta=args.delta)
    art = _load_artifact(args.artifact)
    data = _load_patches(cfg.data.test_dataset, "test dataset")
    if data.norm is None and art.normalization is not None:
        data = normalize(data, art.normalization)
    seed = args.seed if args.seed is not None else cfg.eval_seed
    seed = art.validation_seed if seed is None else seed
    out = _prepare(_output_dir(args, cfg, "eval"), cfg)
    result = predict(rebuild(art, seed, use_bn=not args.ignore_bn), data.images)
    write_predictions(out / "predictions.csv", data.patch_ids(), result)

    if args.accuracy_only:
        labeled = data.labels != UNLABELED
        acc = float(np.mean(result.predictions[labeled] == data.labels[labeled])) if labeled.any() else float("nan")
        with open(out / "accuracy.csv", "w", newline="") as fh:
            csv.writer(fh).writerows([["patches", "accuracy"], [int(labeled.sum()), repr(acc)]])
        print(f"patches={int(labeled.sum())} accuracy={acc:.4f}")
        return 0

    truth = data.meta.get("image_labels") or detector.image_truth(data)
    grouped = detector.group_by_image(data, result.predictions)
    truth = {k: int(v) for k, v in truth.items() if k in grouped}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = detector.detect(grouped, truth, cfg.detect)
    report.write_csv(out / "detection.csv")
    if args.delta_sweep:
        deltas = np.round(np.linspace(0, 1, 21), 2)
        rows = [(d, m.tp, m.tn, m.fp, m.fn, m.sen, m.spe, m.hm) for d, m in detector.delta_sweep(grouped, truth, deltas)]
        experiments.write_rows(out / "delta_sweep.csv", ("delta", "tp", "tn", "fp", "fn", "sen", "spe", "hm"), rows)
    print(report.summary())
    return 0


def _load_artifact(path) -> "artifact_io.DistilledArtifact":
    _need(path, "artifact")
    try:
        return artifact_io.load(path)
    except artifact_io.ArtifactError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _train_test(cfg: RunConfig):
    train = _load_patches(cfg.data.dataset, "training dataset")
    test = _load_patches(cfg.data.test_dataset, "test dataset")
    train = train.subset(np.flatnonzero(train.labels != UNLABELED))
    test = test.subset(np.flatnonzero(test.labels != UNLABELED))
    if train.norm is None:
        train = normalize(train)
    if test.norm is None:
        test = normalize(test, train.norm)
    return train, test


def cmd_baseline(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _override(cfg, "data", dataset=args.dataset, test_dataset=args.test_dataset)
    cfg = _override(cfg, "baseline", subset_sizes=args.sizes, distilled_sizes=args.distilled, seeds=args.seeds)
    train, test = _train_test(cfg)
    smallest = min(int(np.sum(train.labels == c)) for c in np.unique(train.labels))
    for n in cfg.baseline.subset_sizes:
        if n < 1:
            raise ConfigError("subset size per class must be >= 1")
        if n > smallest:
            raise ConfigError(f"subset size {n} per class exceeds the {smallest} patches of the smallest class")
    out = _prepare(_output_dir(args, cfg, "baseline"), cfg)
    rows = experiments.baseline_rows(
        train, test, cfg.model, cfg.distill,
        cfg.baseline.subset_sizes, cfg.baseline.distilled_sizes, cfg.baseline.seeds, cfg.train,
    )
    experiments.write_rows(out / "baseline.csv", experiments.BASELINE_COLUMNS, rows)
    for method in dict.fromkeys(r[0] for r in rows):
        vals = [r[3] for r in rows if r[0] == method]
        print(f"{method:24s} mean accuracy {np.mean(vals):.4f} over {len(vals)} seeds")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _override(cfg, "data", dataset=args.dataset, test_dataset=args.test_dataset)
    cfg = _override(cfg, "sweep", sizes=args.sizes, floor=args.floor, jobs=args.jobs)
    if not cfg.sweep.models or not cfg.sweep.sizes:
        raise ConfigError("sweep needs at least one model and one M")
    train, test = _train_test(cfg)
    out = _prepare(_output_dir(args, cfg, "sweep"), cfg)
    rows = experiments.sweep(cfg.sweep.models, cfg.sweep.sizes, cfg.distill, train, test, jobs=cfg.sweep.jobs)
    experiments.write_rows(out / "sweep.csv", experiments.SWEEP_COLUMNS, rows)
    mins = experiments.minimum_m(rows, cfg.sweep.floor)
    counts = {r[0]: r[1] for r in rows}
    experiments.write_rows(
        out / "minimum_m.csv",
        ("model", "parameter_count", "floor", "minimum_M"),
        [(m, counts[m], cfg.sweep.floor, "not reached" if v is None else v) for m, v in mins.items()],
    )
    experiments.plot_sweep(rows, out / "sweep.png", cfg.sweep.floor)
    for m, v in mins.items():
        print(f"{m:24s} params={counts[m]:8d} minimum M={'not reached' if v is None else v}")
    return 0


def cmd_report(args) -> int:
    cfg = load_run_config(args.config)
    if not (args.artifact or args.log or args.sweep):
        raise ConfigError("report needs --artifact, --log or --sweep")
    reports = [artifact_io.size_report(a.model_spec, a) for a in map(_load_artifact, args.artifact or [])]
    out = _prepare(_output_dir(args, cfg, "report"), cfg)
    if reports:
        artifact_io.write_size_csv(out / "size_report.csv", reports)
        for r in reports:
            print(f"{r.model}: memory {r.full_model_bytes} B, memory* {r.artifact_bytes} B, rate {r.compression_rate:.5f}")
    if args.log:
        _plot_log(Path(_need(args.log, "training log")), out / "training_log.png")
    if args.sweep:
        with open(_need(args.sweep, "sweep CSV"), newline="") as fh:
            rows = [(r["model"], int(r["parameter_count"]), int(r["M"]), float(r["metric"])) for r in csv.DictReader(fh)]
        experiments.plot_sweep(rows, out / "sweep.png")
    print(f"report -> {out}")
    return 0


def _plot_log(path: Path, target: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, losses, vs, vals = [], [], [], []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            steps.append(int(r["step"]))
            losses.append(float(r["loss"]))
            if r["val_metric"]:
                vs.append(int(r["step"]))
                vals.append(float(r["val_metric"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, losses, linewidth=1)
    ax.set_xlabel("outer step")
    ax.set_ylabel("outer loss")
    if vals:
        ax2 = ax.twinx()
        ax2.plot(vs, vals, color="tab:orange", marker=".")
        ax2.set_ylabel("validation metric")
    fig.tight_layout()
    fig.savefig(target)
    plt.close(fig)


# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sldd", description="Soft-label dataset distillation for patch-based gastritis detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML run config")
        if out:
            sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")

    s = sub.add_parser("synth", help="write a synthetic patch benchmark or scene fixture")
    s.add_argument("kind", choices=("patches", "scenes"))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=int, default=3000)
    s.add_argument("--n-test", type=int, default=1000)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--noise", type=float, default=2.0)
    s.add_argument("--n-images", type=int, default=4)
    s.add_argument("--image-size", type=int, default=128)
    s.add_argument("--format", choices=("pgm", "png"), default="pgm")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("slice", help="cut images into labeled patches")
    common(s)
    s.add_argument("--images")
    s.add_argument("--masks")
    s.add_argument("--manifest")
    s.add_argument("--image-size", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--unlabeled", action="store_true", help="keep every window without masks (test images)")
    s.set_defaults(func=cmd_slice)

    s = sub.add_parser("distill", help="learn distilled images, soft labels and inner rate")
    common(s)
    s.add_argument("--dataset")
    s.add_argument("--steps", type=int)
    s.add_argument("--num-images", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("eval", help="replay an artifact and score a test set")
    common(s)
    s.add_argument("--artifact", required=True)
    s.add_argument("--dataset")
    s.add_argument("--seed", type=int, help="initialization seed (default: the artifact's validation seed)")
    s.add_argument("--delta", type=float)
    s.add_argument("--accuracy-only", action="store_true", help="patch accuracy instead of image-level voting")
    s.add_argument("--ignore-bn", action="store_true", help="replay without the stored batch-norm statistics")
    s.add_argument("--delta-sweep", action="store_true", help="also write Sen/Spe/HM for delta in 0..1")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", help="random real subsets versus distilled sets")
    common(s)
    s.add_argument("--dataset")
    s.add_argument("--test-dataset")
    s.add_argument("--sizes", type=_ints, help="random subset sizes per class, e.g. 1,3,10")
    s.add_argument("--distilled", type=_ints, help="distilled set sizes, e.g. 1,2,3")
    s.add_argument("--seeds", type=_ints)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("sweep", help="minimum distilled images per model size")
    common(s)
    s.add_argument("--dataset")
    s.add_argument("--test-dataset")
    s.add_argument("--sizes", type=_ints)
    s.add_argument("--floor", type=float)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="size report CSV and plots from earlier runs")
    common(s)
    s.add_argument("--artifact", action="append", help="artifact file; repeatable")
    s.add_argument("--log", help="training_log.csv to plot")
    s.add_argument("--sweep", help="sweep.csv to plot")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, ValueError, ArithmeticError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
