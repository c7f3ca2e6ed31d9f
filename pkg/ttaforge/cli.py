"""
``ttaforge`` command line: generate synthetic datasets, pre-train the toy detector, run direct testing or online
adaptation over a dataset stream, and re-evaluate saved predictions.
"""
import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import ttaforge
from ttaforge import data, evalkit, execution, msg
from ttaforge.adapt import AdaptationConfig, AdaptationState, build_backends, run_stream
from ttaforge.core import Prediction
from ttaforge.errors import DatasetError, TTAForgeError
from ttaforge.idm.halluc import dump_hallucination
from ttaforge.paths import ensure_dir

SEED_ENV = "TTAFORGE_SEED"
MANIFEST = "manifest.json"

OUTPUTS = {
    "steps": "steps.jsonl",
    "predictions": "predictions.jsonl",
    "results": "results.csv",
    "pr_curve": "pr_curve.csv",
}


@dataclass
class RunManifest:
    command: str
    mode: Optional[str]
    config: Dict
    seed: int
    data: Optional[str]
    out: str
    weights: Optional[str] = None
    version: str = ttaforge.__version__
    status: str = "running"
    started: Optional[float] = None
    finished: Optional[float] = None
    elapsed: Optional[float] = None
    outputs: Dict[str, str] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)

    def write(self, path: Path):
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            document = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as ex:
            raise DatasetError(path, f"cannot read manifest ({ex})")
        return cls(**{k: v for k, v in document.items() if k in cls.__dataclass_fields__})


def resolve_seed(flag: Optional[int], config_seed: Optional[int] = None, default: int = 0) -> int:
    """--seed flag, then $TTAFORGE_SEED, then the config file, then ``default``."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{SEED_ENV}={env!r} is not an integer")
    if config_seed is not None:
        return config_seed
    return default


def shift_type(text: str):
    try:
        return data.parse_shift(text)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(str(ex))


def load_config(path: Optional[str]) -> AdaptationConfig:
    return AdaptationConfig.from_file(path) if path else AdaptationConfig()


def cmd_gen(args) -> int:
    palette, corruptions = args.target_shift
    seed = resolve_seed(args.seed)
    try:
        spec = data.SyntheticSpec(
            num_images=args.num_images, size=args.size, palette_shift=palette, corruptions=corruptions, seed=seed
        )
    except ValueError as ex:
        raise argparse.ArgumentTypeError(str(ex))
    msg.subscribeProgress(spec.num_images, "gen")
    try:
        data.generate(spec, args.out)
    finally:
        msg.unsubscribeProgress()
    manifest = {
        "command": "gen",
        "version": ttaforge.__version__,
        "spec": {**asdict(spec), "shift": spec.shift_name},
    }
    (Path(args.out) / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"Wrote {spec.num_images} images to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    config = load_config(args.config)
    config = config.replace(backend_seed=resolve_seed(args.seed, config.backend_seed))
    backends = build_backends(config)
    backends.detector.save(args.out)
    print(f"Wrote detector weights (seed {config.backend_seed}) to {args.out}")
    return 0


def _manifest_from_args(args) -> RunManifest:
    if args.from_manifest:
        manifest = RunManifest.read(args.from_manifest)
        config = AdaptationConfig.from_dict(manifest.config)
        out = args.out or manifest.out
        return RunManifest("run", manifest.mode, config.to_dict(), config.seed, manifest.data, out, manifest.weights)

    if not args.data or not args.out:
        raise argparse.ArgumentTypeError("run needs --data and --out (or --from-manifest)")
    config = load_config(args.config)
    config = config.replace(seed=resolve_seed(args.seed, config.seed))
    return RunManifest("run", args.mode, config.to_dict(), config.seed, args.data, args.out, args.weights)


def cmd_run(args) -> int:
    manifest = _manifest_from_args(args)
    config = AdaptationConfig.from_dict(manifest.config)
    out = ensure_dir(manifest.out)
    manifest.outputs = {key: str(out / name) for key, name in OUTPUTS.items()}
    manifest.started = time.time()
    manifest.write(out / MANIFEST)

    execution.executor = execution.make_executor(config.executor)
    dataset = data.load(manifest.data)
    backends = build_backends(config, manifest.weights)
    if dataset.categories != backends.detector.categories:
        raise DatasetError(manifest.data, f"categories {dataset.categories.names} do not match the detector's")
    state = AdaptationState.initial(backends, config) if manifest.mode == "adapt" else None

    hallucination_dir = ensure_dir(out / "hallucinations") if args.dump_hallucinations else None

    def on_hallucination(step, index, result):
        if hallucination_dir is not None:
            dump_hallucination(result, hallucination_dir / f"step{step:05d}_{index}.png", dataset.categories.names)

    predictions: List[Prediction] = []
    done = [0]

    with open(out / OUTPUTS["steps"], "w") as steps:

        def on_batch(result):
            for image_id, detections in zip(result.image_ids, result.predictions):
                predictions.extend(Prediction.from_detection(image_id, d) for d in detections)
            if result.report is not None:
                steps.write(json.dumps(result.report.to_record(), sort_keys=True) + "\n")
            done[0] += len(result.image_ids)
            msg.showProgress(done[0], 0, len(dataset))

        msg.subscribeProgress(len(dataset), manifest.mode)
        try:
            run_stream(dataset.stream(), state, backends, config, manifest.mode, on_batch=on_batch,
                       on_hallucination=on_hallucination if hallucination_dir else None)
        finally:
            msg.unsubscribeProgress()
            execution.executor.close()

    data.save_predictions(out / OUTPUTS["predictions"], predictions)
    ground_truth = dataset.ground_truth()
    record = evalkit.evaluate(predictions, ground_truth, dataset.categories, 0.5)
    coco_map, _ = evalkit.evaluate_coco(predictions, ground_truth, dataset.categories)
    evalkit.write_results(record, out / OUTPUTS["results"], coco_map)
    evalkit.write_pr_curve(record, out / OUTPUTS["pr_curve"])

    if args.dump_memory and state is not None:
        state.memory.dump(out / "memory", dataset.categories.names)

    manifest.metrics = {"ap50": record.mean_ap, "map_50_95": coco_map}
    manifest.finished = time.time()
    manifest.elapsed = manifest.finished - manifest.started
    manifest.status = "complete"
    manifest.write(out / MANIFEST)
    print(f"AP50 {100 * record.mean_ap:.2f}  mAP {100 * coco_map:.2f}")
    return 0


def cmd_eval(args) -> int:
    dataset = data.load(args.data)
    predictions = data.load_predictions(args.predictions, len(dataset.categories))
    out = ensure_dir(args.out or Path(args.predictions).parent)
    ground_truth = dataset.ground_truth()
    record = evalkit.evaluate(predictions, ground_truth, dataset.categories, args.iou)
    coco_map, _ = evalkit.evaluate_coco(predictions, ground_truth, dataset.categories)
    evalkit.write_results(record, out / "eval_results.csv", coco_map)
    evalkit.write_pr_curve(record, out / "eval_pr_curve.csv")
    if args.tp_fp_hist:
        evalkit.write_histogram(record, out / "tp_fp_hist.csv", args.bins)
    print(f"{record.metric_name.upper()} {100 * record.mean_ap:.2f}  mAP {100 * coco_map:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttaforge", description="Test-time adaptive object detection on toy streams.")
    parser.add_argument("--version", action="version", version=ttaforge.__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="Generate a synthetic shape dataset.")
    gen.add_argument("--out", required=True)
    gen.add_argument("--num-images", type=int, default=200)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument(
        "--target-shift", type=shift_type, default=(False, ()),
        help="Comma-separated: none, palette, gauss1..5, shot1..5, bright1..5, contrast1..5.",
    )
    gen.set_defaults(func=cmd_gen)

    pretrain = commands.add_parser("pretrain", help="Build and save the toy detector weights.")
    pretrain.add_argument("--out", required=True)
    pretrain.add_argument("--seed", type=int, default=None, help="Backend seed.")
    pretrain.add_argument("--config", default=None)
    pretrain.set_defaults(func=cmd_pretrain)

    run = commands.add_parser("run", help="Direct test or online adaptation over a dataset.")
    run.add_argument("--mode", choices=("direct", "adapt"), default="adapt")
    run.add_argument("--config", default=None)
    run.add_argument("--data", default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--weights", default=None)
    run.add_argument("--from-manifest", default=None)
    run.add_argument("--dump-memory", action="store_true")
    run.add_argument("--dump-hallucinations", action="store_true")
    run.set_defaults(func=cmd_run)

    evaluate = commands.add_parser("eval", help="Recompute metrics from saved predictions.")
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--predictions", required=True)
    evaluate.add_argument("--out", default=None)
    evaluate.add_argument("--iou", type=float, default=0.5)
    evaluate.add_argument("--tp-fp-hist", action="store_true")
    evaluate.add_argument("--bins", type=int, default=10)
    evaluate.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as ex:
        parser.error(str(ex))
    except (TTAForgeError, OSError) as ex:
        msg.logError(ex)
        print(f"ttaforge {args.command}: {ex}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
