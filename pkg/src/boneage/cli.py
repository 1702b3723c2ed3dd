"""Command line: synthetic data, per-stage training, prediction, evaluation and serving.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .artifact import ModelArtifact
from .config import RunConfig, load_config
from .core import AgeRangeMonths, Radiograph, Sex, Split, load_manifest, read_grayscale
from .errors import BoneAgeError
from .evaluate import Record, build_report, compute_mae, emit_report

log = logging.getLogger("boneage")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
TRAIN_STAGES = ("seg", "angle", "flip", "detect", "regress", "baseline", "stacked")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _age_range(text: str) -> AgeRangeMonths:
    try:
        return AgeRangeMonths.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"range must look like LO:HI ({exc})") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="boneage", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", help="synthetic data")
    synth_sub = synth.add_subparsers(dest="synth_command", required=True, parser_class=_Parser)
    gen = synth_sub.add_parser("generate", help="render a labeled synthetic dataset")
    gen.add_argument("--config", type=Path)
    gen.add_argument("--count", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", type=Path)
    gen.add_argument("--distribution", choices=["uniform", "rsna_like"])
    gen.add_argument("--workers", type=int)

    train = sub.add_parser("train", help="train one stage and store it in the registry")
    train.add_argument("stage", choices=TRAIN_STAGES)
    train.add_argument("--config", type=Path)
    train.add_argument("--registry", type=Path, help="registry root (else config, then $BONEAGE_REGISTRY)")
    train.add_argument("--members", type=int, default=3, help="stack size for 'train stacked'")

    pred = sub.add_parser("predict", help="run the full pipeline on one image")
    pred.add_argument("--image", type=Path, required=True)
    pred.add_argument("--sex", choices=["male", "female"], required=True)
    pred.add_argument("--bundle", type=Path, required=True)
    pred.add_argument("--explain", action="store_true", help="also write saliency PNGs next to --out")
    pred.add_argument("--out", type=Path, help="directory for saliency maps and crops")

    ev = sub.add_parser("evaluate", help="score a bundle against a labeled manifest")
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--bundle", type=Path, required=True)
    ev.add_argument("--range", type=_age_range, default=AgeRangeMonths(12.0, 216.0))
    ev.add_argument("--out", type=Path, required=True)
    ev.add_argument("--batch-size", type=int, default=16)

    srv = sub.add_parser("serve", help="HTTP inference service")
    srv.add_argument("--bundle", type=Path, required=True)
    srv.add_argument("--port", type=int, default=8000)
    srv.add_argument("--host", default="127.0.0.1")
    return p


# --- commands ---------------------------------------------------------------------------------


def _cmd_synth(args, out) -> int:
    from .synth import MaturityDistribution, generate_dataset

    cfg = load_config(args.config).synth
    count = args.count if args.count is not None else cfg.count
    manifest, _ = generate_dataset(
        count,
        args.seed if args.seed is not None else cfg.seed,
        MaturityDistribution(args.distribution) if args.distribution else cfg.distribution,
        args.out or cfg.out,
        tuple(cfg.canvas_range),
        args.workers or cfg.workers,
    )
    print(json.dumps({"written": len(manifest), "out": str(args.out or cfg.out)}), file=out)
    return EXIT_OK


def _labeled(root: Path):
    from .datasets import LabeledSet

    return list(LabeledSet(root))


def _val_mae(model: ModelArtifact, config: RunConfig) -> float | None:
    """Regression MAE on the validation set with label boxes and inference-time crops."""
    if config.data.val is None:
        return None
    from .pipeline import INFERENCE_MARGIN
    from .regress import predict_batch
    from .training import regress_samples

    side = config.regress.input_side
    samples = regress_samples(_labeled(config.data.val), side, INFERENCE_MARGIN)
    preds = predict_batch(model, [(c, s) for c, s, _ in samples])
    return compute_mae([p.mean_months for p in preds], [a for _, _, a in samples])


def train_stage(stage: str, config: RunConfig, members: int = 3) -> list[ModelArtifact]:
    """Train one stage from the labeled training directory in ``config.data.train``."""
    from . import training

    samples = _labeled(config.data.train)
    if stage == "seg":
        from .segment import train_segmenter

        return [train_segmenter(training.segment_pairs(samples), config.segment)]
    if stage == "angle":
        from .orient import train_angle_model

        return [train_angle_model(training.angle_pairs(samples), config.orient.angle)]
    if stage == "flip":
        from .orient import train_flip_model

        return [train_flip_model(training.flip_pairs(samples), config.orient.flip)]
    if stage == "detect":
        from .detect import train_detector

        return [train_detector(training.detect_pairs(samples), config.detect)]
    if stage == "baseline":
        from .regress import train_baseline

        data = training.regress_samples(samples, config.baseline.input_side, config.augment.train_margin)
        return [train_baseline(data, config.baseline)]
    from .regress import train_ensemble, train_stacked

    ens = config.ensemble_config()
    data = training.regress_samples(samples, ens.input_side, config.augment.train_margin)
    models = [train_ensemble(data, ens)] if stage == "regress" else train_stacked(data, ens, members)
    out = []
    for m in models:
        mae = _val_mae(m, config)
        out.append(m if mae is None else replace(m, metrics=dict(m.metrics, val_mae=mae)))
    return out


def _cmd_train(args, out) -> int:
    from .pipeline import stack_members
    from .registry import registry_root, registry_save

    if args.stage == "stacked" and args.members < 2:
        raise UsageError("--members must be at least 2")
    config = load_config(args.config)
    root = registry_root(args.registry or config.registry)
    models = train_stage(args.stage, config, args.members)
    if len(models) > 1:
        models = stack_members(models)
    for m in models:
        path = registry_save(m, root)
        print(json.dumps({"stage": m.stage.value, "path": str(path), "content_hash": m.content_hash}), file=out)
    return EXIT_OK


def _cmd_predict(args, out) -> int:
    from .crop import dump_crops
    from .explain import explain_all
    from .pipeline import load_bundle, predict_pipeline

    bundle = load_bundle(args.bundle)
    image = Radiograph(args.image.stem, read_grayscale(args.image), Sex.parse(args.sex))
    prediction, inter = predict_pipeline(bundle, image, image.sex)
    body = prediction.to_json()
    body["orientation"] = {"angle_deg": inter.orientation.angle_deg, "flipped": inter.orientation.flipped}
    body["boxes"] = inter.boxes.to_json()
    if args.explain:
        maps = explain_all(bundle.regress[0], inter.crops, image.sex)
        if args.out is not None:
            target = args.out / image.id
            target.mkdir(parents=True, exist_ok=True)
            for region, m in maps.items():
                (target / f"saliency_{region.value}.png").write_bytes(m.to_png())
        body["saliency_peak"] = {r.value: [int(v) for v in divmod(int(m.values.argmax()), m.values.shape[1])]
                                 for r, m in maps.items()}
    if args.out is not None:
        dump_crops(inter.crops, args.out, image.id)
    print(json.dumps(body, indent=2), file=out)
    return EXIT_OK


def _cmd_evaluate(args, out) -> int:
    from .core import load_radiograph
    from .pipeline import load_bundle, predict_many

    bundle = load_bundle(args.bundle)
    manifest = load_manifest(args.manifest, Split.TEST)
    entries = [e for e in manifest if e.bone_age_months is not None and args.range.contains(e.bone_age_months)]
    items = [(load_radiograph(e), e.sex) for e in entries]
    records, failures = [], []
    for entry, (prediction, info) in zip(entries, predict_many(bundle, items, args.batch_size)):
        if prediction is None:
            failures.append({"id": entry.id, "stage": info.stage, "error": str(info.cause)})
            continue
        records.append(Record.from_prediction(entry.id, entry.bone_age_months, prediction))
    report = build_report(records, args.range)
    emit_report(report, args.out)
    if failures:
        (args.out / "failures.json").write_text(json.dumps(failures, indent=2))
        print(f"{len(failures)} image(s) failed; see {args.out / 'failures.json'}", file=sys.stderr)
    print(json.dumps({"n": report.n, "mae_months": report.mae_months, "failed": len(failures)}), file=out)
    return EXIT_OK


def _cmd_serve(args, out) -> int:
    from .pipeline import load_bundle
    from .service import serve

    serve(load_bundle(args.bundle), args.port, args.host)
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "serve": _cmd_serve,
}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (BoneAgeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_exit() -> None:
    sys.exit(main())
