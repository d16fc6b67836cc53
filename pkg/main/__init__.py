"""
Command-line entry point for the AD-YOLO SELD toolkit.
Simulates scenes, encodes labels, evaluates the loss and its gradients,
decodes predictions, scores detections and runs the desk-scale demo.
"""

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

from src.config import Config, ConfigurationError
from src.decoder import decode
from src.experiment import evaluate_head, run_demo, scene_spec_from_config, train_on_scene
from src.gradcheck import DEFAULT_TOLERANCE, GradientChecker
from src.labels import PredictionTensor, RowValidationError, assign_responsibility
from src.loss import total_loss
from src.metrics import SELDEvaluator
from src.simulator import TRAJECTORY_KINDS, SceneSimulator
from src import storage
from src.storage import TensorFormatError
from src.toy_trainer import TrainingDivergedError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)

# Failures reported as a one-line diagnostic with exit status 1
HANDLED_ERRORS = (
    ConfigurationError,
    RowValidationError,
    TensorFormatError,
    TrainingDivergedError,
    OSError,
    ValueError,
)


def load_config(args: argparse.Namespace) -> Config:
    """
    Build the configuration: flags over the config file over the environment.

    Raises:
        ConfigurationError: If the result is invalid
    """
    cfg = Config.from_file(args.config) if args.config else Config()
    cfg = cfg.override(
        seed=args.seed,
        upsilon=getattr(args, "upsilon", None),
        score_threshold=getattr(args, "score_threshold", None),
        epochs=getattr(args, "epochs", None),
        learning_rate=getattr(args, "lr", None),
        num_frames=getattr(args, "frames", None),
        num_classes=getattr(args, "classes", None),
    )
    if getattr(args, "no_existence_loss", False):
        cfg = cfg.override(existence_loss=False)
    return cfg.require_valid()


def _scene_spec(cfg: Config, args: argparse.Namespace):
    return scene_spec_from_config(
        cfg,
        max_polyphony=args.polyphony,
        same_class_overlap_prob=args.overlap_prob,
        trajectory=args.trajectory,
        noise_amplitude=args.noise,
    )


def _load_inputs(cfg: Config, refs_path: str, preds_path: str):
    raw = storage.read_tensor(preds_path, cfg.grid_spec(), cfg.NUM_CLASSES)
    preds = PredictionTensor(raw, cfg.grid_spec(), cfg.NUM_CLASSES)
    refs = storage.read_references(
        refs_path, cfg.NUM_CLASSES, cfg.grid_spec(), num_frames=preds.num_frames
    )
    return refs, preds


def handle_simulate(args: argparse.Namespace, cfg: Config) -> int:
    scene = SceneSimulator(_scene_spec(cfg, args)).simulate()
    storage.write_references(args.out, scene.references)
    if args.features:
        storage.write_features(args.features, scene.features)
    print(f"events={len(scene.references)} frames={scene.references.num_frames}")
    return 0


def handle_encode(args: argparse.Namespace, cfg: Config) -> int:
    refs, preds = _load_inputs(cfg, args.refs, args.preds)
    masks = assign_responsibility(refs, preds, cfg.thresholds())
    summary = {"references": len(refs), "thresholds": masks.summary()}
    storage.write_json(args.out, summary)
    for tau, counts in summary["thresholds"].items():
        stats = " ".join(f"{key}={value}" for key, value in counts.items())
        print(f"tau={tau} {stats}")
    return 0


def handle_loss(args: argparse.Namespace, cfg: Config) -> int:
    refs, preds = _load_inputs(cfg, args.refs, args.preds)
    result = total_loss(
        refs,
        preds,
        cfg.loss_weights(),
        cfg.thresholds(),
        existence_loss=cfg.EXISTENCE_LOSS,
    )
    print(result.breakdown.to_text())
    return 0


def handle_gradcheck(args: argparse.Namespace, cfg: Config) -> int:
    checker = GradientChecker(
        seed=cfg.SEED,
        instances=args.instances,
        entries=args.entries,
        weights=cfg.loss_weights(),
        thresholds=cfg.thresholds(),
        grid=cfg.grid_spec(),
    )
    report = checker.run(include_head=not args.skip_head)
    print(report.to_text())
    return 0 if report.passed(DEFAULT_TOLERANCE) else 1


def handle_decode(args: argparse.Namespace, cfg: Config) -> int:
    raw = storage.read_tensor(args.preds, cfg.grid_spec(), cfg.NUM_CLASSES)
    preds = PredictionTensor(raw, cfg.grid_spec(), cfg.NUM_CLASSES)
    detections = decode(preds, cfg.UPSILON, cfg.SCORE_THRESHOLD, cfg.EXISTENCE_LOSS)
    storage.write_detections(args.out, detections)
    print(f"detections={len(detections)}")
    return 0


def handle_eval(args: argparse.Namespace, cfg: Config) -> int:
    refs = storage.read_references(args.refs, cfg.NUM_CLASSES, cfg.grid_spec())
    detections = storage.read_detections(args.dets)
    evaluator = SELDEvaluator(cfg.LABELS_PER_SECOND, cfg.DOA_THRESHOLD)
    if args.overlap_only:
        report = evaluator.evaluate_overlap(detections, refs)
    else:
        report = evaluator.evaluate(detections, refs)
    if args.json:
        storage.write_json(args.json, report.as_document())
    print(report.to_text())
    return 0


def handle_train_toy(args: argparse.Namespace, cfg: Config) -> int:
    scene = SceneSimulator(_scene_spec(cfg, args)).simulate()
    result = train_on_scene(cfg, scene)
    storage.write_loss_curve(args.curve, result.curve)
    if args.refs_out:
        storage.write_references(args.refs_out, scene.references)
    if args.preds_out:
        storage.write_tensor(args.preds_out, result.head.forward(scene.features)[0])
    print(result.curve[-1].to_text())
    print(evaluate_head(cfg, result, scene).to_text())
    return 0


def handle_demo(args: argparse.Namespace, cfg: Config) -> int:
    outcome = run_demo(cfg, _scene_spec(cfg, args), overlap_only=args.overlap_only)
    if args.json:
        storage.write_json(args.json, outcome.report.as_document())
    print(outcome.report.to_text())
    return 0


def _add_scene_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--frames", type=int, help="Number of frames T")
    parser.add_argument("--classes", type=int, help="Number of classes C")
    parser.add_argument("--polyphony", type=int, help="Maximum simultaneous events")
    parser.add_argument("--overlap-prob", type=float, help="Same-class overlap probability")
    parser.add_argument("--trajectory", choices=TRAJECTORY_KINDS, help="Trajectory kind")
    parser.add_argument("--noise", type=float, help="Feature noise amplitude")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat key=value configuration file")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="adyolo", description="AD-YOLO SELD toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(name, help=help_text, parents=[common])

    simulate = command("simulate", "Simulate a synthetic scene")
    simulate.add_argument("--out", required=True, help="Reference CSV to write")
    simulate.add_argument("--features", help="Binary feature file to write")
    _add_scene_arguments(simulate)

    encode = command("encode", "Summarize responsibility per threshold")
    encode.add_argument("--refs", required=True)
    encode.add_argument("--preds", required=True)
    encode.add_argument("--out", required=True, help="JSON summary to write")

    loss = command("loss", "Print the loss breakdown")
    loss.add_argument("--refs", required=True)
    loss.add_argument("--preds", required=True)
    loss.add_argument("--no-existence-loss", action="store_true")

    gradcheck = command("gradcheck", "Finite-difference gradient checks")
    gradcheck.add_argument("--instances", type=int, default=100)
    gradcheck.add_argument("--entries", type=int, default=20)
    gradcheck.add_argument("--skip-head", action="store_true")

    decode_cmd = command("decode", "Decode predictions into detections")
    decode_cmd.add_argument("--preds", required=True)
    decode_cmd.add_argument("--out", required=True)
    decode_cmd.add_argument("--upsilon", type=float)
    decode_cmd.add_argument("--score-threshold", type=float)
    decode_cmd.add_argument("--no-existence-loss", action="store_true")

    evaluate = command("eval", "Score detections against references")
    evaluate.add_argument("--refs", required=True)
    evaluate.add_argument("--dets", required=True)
    evaluate.add_argument("--overlap-only", action="store_true")
    evaluate.add_argument("--json", help="Metrics document to write")

    train = command("train-toy", "Train the toy head on a simulated scene")
    train.add_argument("--curve", required=True, help="Loss-curve CSV to write")
    train.add_argument("--refs-out", help="Reference CSV of the training scene")
    train.add_argument("--preds-out", help="Prediction tensor of the trained head")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--upsilon", type=float)
    train.add_argument("--no-existence-loss", action="store_true")
    _add_scene_arguments(train)

    demo = command("demo", "simulate -> train-toy -> decode -> eval")
    demo.add_argument("--epochs", type=int)
    demo.add_argument("--lr", type=float)
    demo.add_argument("--upsilon", type=float)
    demo.add_argument("--overlap-only", action="store_true")
    demo.add_argument("--no-existence-loss", action="store_true")
    demo.add_argument("--json", help="Metrics document to write")
    _add_scene_arguments(demo)
    return parser


HANDLERS: Dict[str, Callable[[argparse.Namespace, Config], int]] = {
    "simulate": handle_simulate,
    "encode": handle_encode,
    "loss": handle_loss,
    "gradcheck": handle_gradcheck,
    "decode": handle_decode,
    "eval": handle_eval,
    "train-toy": handle_train_toy,
    "demo": handle_demo,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and dispatch to the subcommand handler.

    Returns:
        int: Exit status (0 success, 1 handled failure)
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
    )
    try:
        cfg = load_config(args)
        return HANDLERS[args.command](args, cfg)
    except HANDLED_ERRORS as e:
        logger.debug("Command failed", exc_info=True)
        print(f"adyolo {args.command}: error: {e}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())
