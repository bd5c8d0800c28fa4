"""Command-line entry point: ``drought-xai {prepare,train,evaluate,explain,compare,synth}``.

Every subcommand reads a run config (``--config``), applies ``--seed`` and
``--set key=value`` overrides, writes ``effective_config.txt`` next to its
outputs and composes the library calls. Failures print one JSON object on
stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import augment, evaluate, explain, ingest, model, synth, train
from .config import RunConfig, set_key
from .errors import ConfigError, PipelineError

logger = logging.getLogger("drought_xai")

EFFECTIVE_CONFIG = "effective_config.txt"
MANIFEST = "manifest.tsv"


# --------------------------------------------------------------------------
# configuration plumbing


def load_config(args: argparse.Namespace) -> tuple[RunConfig, Path]:
    """Parse ``--config`` plus overrides; returns the config and the directory paths resolve against."""
    if args.config:
        config = RunConfig.from_file(args.config)
        base = Path(args.config).resolve().parent
    else:
        config = RunConfig()
        base = Path.cwd()
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        set_key(config, key.strip(), value.strip())
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.out_dir = str(Path(args.out).resolve())
    return config.validate(), base


def _path(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def _out_dir(config: RunConfig, base: Path) -> Path:
    out = _path(base, config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / EFFECTIVE_CONFIG).write_text(config.to_text())
    return out


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_prepare(config: RunConfig, base: Path) -> Path:
    """Annotations -> patch folders -> stratified split -> ``manifest.tsv``."""
    out = _out_dir(config, base)
    data = config.data
    if not data.train_annotations:
        raise ConfigError("data.train_annotations is required")
    image_dir = _path(base, data.image_dir) if data.image_dir else None
    patch_root = _path(out, data.patch_dir)

    scenes = ingest.load_annotations(_path(base, data.train_annotations), image_dir)
    patches = ingest.extract_corpus(scenes, patch_root / "train")
    test = []
    if data.test_annotations:
        test_scenes = ingest.load_annotations(_path(base, data.test_annotations), image_dir)
        test = ingest.extract_corpus(test_scenes, patch_root / "test")
    manifest = ingest.split_manifest(patches, data.split_fraction, config.seed, data.stratify, test)
    path = ingest.write_manifest(manifest, out / MANIFEST)
    for (part, label), n in ingest.class_counts(manifest).items():
        logger.info("%s/%s: %d patches", part, label, n)
    return path


def _manifest(config: RunConfig, base: Path) -> ingest.DatasetManifest:
    path = _path(base, config.out_dir) / MANIFEST
    if not path.exists():
        cmd_prepare(config, base)
    return ingest.read_manifest(path)


def cmd_train(config: RunConfig, base: Path) -> Path:
    """Fit the classifier; writes ``history.tsv``, ``curves/`` and ``checkpoints/``."""
    out = _out_dir(config, base)
    manifest = _manifest(config, base)
    _seed_everything(config.seed)
    net = model.build_classifier(config.backbone_spec(), config.head_config(), seed=config.seed)
    history, store = train.run_training(net, manifest, config.policy(), config.training_config(),
                                        out / "checkpoints", batch_spec=config.batch_spec())
    train.write_history(history, out / "history.tsv")
    train.learning_curves(history, out / "curves")
    logger.info("best epoch %d (val_loss %.6f) -> %s", history.best_epoch, history.best_val_loss, store.best_path)
    return store.best_path


def _checkpoint(args: argparse.Namespace, config: RunConfig, base: Path) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    return _path(base, config.out_dir) / "checkpoints" / train.CheckpointStore.BEST_NAME


def cmd_evaluate(config: RunConfig, base: Path, checkpoint: Path | None = None,
                 predictions: Path | None = None) -> evaluate.EvalReport:
    """Score the test partition (or a stored predictions log) and write the report and comparison."""
    out = _out_dir(config, base)
    threshold = config.evaluate.threshold
    if predictions is not None:
        preds = evaluate.read_predictions(predictions, threshold)
    else:
        manifest = _manifest(config, base)
        records = manifest.test or manifest.val
        if not manifest.test:
            logger.warning("manifest has no test partition; evaluating on validation patches")
        net = model.load_model(checkpoint)
        spec = augment.BatchSpec(net.backbone_spec.input_size, config.batch.batch_size, shuffle=False)
        stream = augment.BatchStream(records, None, spec, rescale=config.augment.rescale)
        preds = evaluate.predict_labels(net, stream, threshold)
        evaluate.write_predictions(preds, out / "predictions.tsv")
    report = evaluate.metrics(evaluate.confusion(preds))
    (out / "report.txt").write_text(report.to_text())
    (out / "confusion.tsv").write_text(report.confusion_table())
    evaluate.compare_against_baselines(report, out)
    logger.info("accuracy %.4f on %d patches", report.accuracy, report.n)
    return report


def cmd_explain(config: RunConfig, base: Path, checkpoint: Path, image: Path) -> explain.SaliencyMap:
    out = _out_dir(config, base)
    net = model.load_model(checkpoint)
    return explain.explain_image(net, image, out, rescale=config.augment.rescale)


def cmd_compare(config: RunConfig, base: Path) -> evaluate.BaselineTable:
    out = _out_dir(config, base)
    report_path = out / "report.txt"
    if not report_path.exists():
        raise evaluate.EmptyReport(f"{report_path} not found; run evaluate first")
    return evaluate.compare_against_baselines(evaluate.parse_report(report_path.read_text()), out)


DESK_CONFIG = """\
# Small synthetic run that finishes in minutes on one CPU core.
data.train_annotations = train/annotations.csv
data.test_annotations = test/annotations.csv
backbone.name = toy_cnn
backbone.weights = random
backbone.input_size = 64,64
backbone.feature_dim = 8
batch.batch_size = 8
train.epochs = 5
train.initial_lr = 0.003
out_dir = run
"""


def cmd_synth(out: Path, n_per_class: int, seed: int) -> Path:
    """Generate a separable train/test corpus plus a matching desk-scale config."""
    out.mkdir(parents=True, exist_ok=True)
    synth.generate_dataset(synth.SynthSpec(n_per_class=n_per_class, seed=seed), out / "train")
    synth.generate_dataset(synth.SynthSpec(n_per_class=max(n_per_class // 4, 1), seed=seed + 1), out / "test")
    path = out / "desk.cfg"
    path.write_text(DESK_CONFIG)
    return path


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drought-xai", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config file (section.key = value lines)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="overrides seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    common(sub.add_parser("prepare", help="extract patches and write the split manifest"))
    common(sub.add_parser("train", help="train and checkpoint the classifier"))
    p = common(sub.add_parser("evaluate", help="score the test set and compare with baselines"))
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="stored predictions.tsv; skips the model")
    p = common(sub.add_parser("explain", help="gradient saliency for one image"))
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    common(sub.add_parser("compare", help="rebuild the baseline comparison from report.txt"))
    p = sub.add_parser("synth", help="write a synthetic corpus and a desk-scale config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    return parser


def run(args: argparse.Namespace) -> None:
    if args.command == "synth":
        print(cmd_synth(Path(args.out), args.n_per_class, args.seed))
        return
    config, base = load_config(args)
    if args.command == "prepare":
        print(cmd_prepare(config, base))
    elif args.command == "train":
        print(cmd_train(config, base))
    elif args.command == "evaluate":
        predictions = Path(args.predictions) if args.predictions else None
        checkpoint = None if predictions else _checkpoint(args, config, base)
        print(cmd_evaluate(config, base, checkpoint, predictions).to_text(), end="")
    elif args.command == "explain":
        saliency = cmd_explain(config, base, _checkpoint(args, config, base), Path(args.image))
        print(f"output\t{saliency.model_output:.6f}")
    elif args.command == "compare":
        print(cmd_compare(config, base).to_text(), end="")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (PipelineError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
