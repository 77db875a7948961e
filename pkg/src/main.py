import sys
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import RunConfig, apply_overrides, load_config
from controller.app_controller import ExperimentController
from model.errors import ConfigError, DsranError
from model.featurestore import SyntheticSpec
from view.report_view import ReportView
from view.status_bar import TrainingStatusBar
from utils.logger import setup_logger

# Initialize logger
logger = setup_logger("root")

EXIT_USAGE = 2


def global_exception_hook(exctype, value, traceback):
    logger.critical("Unhandled exception occurred", exc_info=(exctype, value, traceback))
    sys.stderr.write(f"{exctype.__name__}: {value}\n")
    sys.stderr.write("Check the log file for details.\n")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--json", action="store_true", help="Print the report as JSON")
    p.add_argument("--out", default=None, help="Output directory (reports, checkpoints)")
    p.add_argument("--seed", type=int, default=None, help="Seed for all randomness")


def _add_run_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--dataset", default=None, help="Dataset directory or manifest")
    p.add_argument("--val-dataset", default=None, help="Validation dataset (defaults to the training set)")
    p.add_argument("--epochs", type=_positive, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="Initial learning rate")
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--K", type=int, default=None, help="Joint relation head count (1, 2 or 4)")
    p.add_argument("--no-bn", action="store_true", help="Disable batch normalization in the GAT layers")


def _add_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rerank", action="store_true", help="Re-rank image-to-text results")
    p.add_argument("--top-n", type=_positive, default=None, help="Re-ranking candidate count")
    p.add_argument("--lam", type=float, default=None, help="Re-ranking weight in [0, 1]")


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="dsran", description="Dual-path image-text retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="Write a synthetic dataset")
    _add_common(p)
    p.add_argument("--items", type=_positive, default=16)
    p.add_argument("--grid", type=_positive, default=16, help="Global nodes per image")
    p.add_argument("--regions", type=_positive, default=12, help="Regional nodes per image")
    p.add_argument("--dim", type=_positive, default=64, help="Feature width")
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--words", type=_positive, default=12, help="Maximum caption length")
    p.add_argument("--captions", type=_positive, default=5, help="Captions per image")
    p.add_argument("--clusters", type=int, default=0, help="Latent concepts (0: one per item)")

    p = sub.add_parser("train", help="Train a model")
    _add_common(p)
    _add_run_config(p)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True)
    _add_eval(p)
    p.add_argument("--ensemble", action="append", default=[], help="Further checkpoint to average scores with")
    p.add_argument("--folds", type=_positive, default=1)

    p = sub.add_parser("retrieve", help="Top-K results for one query")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--image", type=int, help="Image query index")
    group.add_argument("--text", type=int, help="Caption query index (item * captions + caption)")
    p.add_argument("-k", type=_positive, default=10)
    _add_eval(p)

    p = sub.add_parser("gradcheck", help="Finite-difference check of all gradients")
    _add_common(p)
    _add_run_config(p)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=6, help="Entries checked per parameter (0: all)")
    p.add_argument("--inject-fault", action="store_true", help="Build with a deliberately wrong gradient")

    p = sub.add_parser("sweep-k", help="Rsum per joint relation head count")
    _add_common(p)
    _add_run_config(p)
    p.add_argument("--ks", type=_int_list, default=[1, 2, 4])

    p = sub.add_parser("ablate", help="Path / SSR / JSR ablation grid")
    _add_common(p)
    _add_run_config(p)

    p = sub.add_parser("bn-compare", help="Convergence with and without batch normalization")
    _add_common(p)
    _add_run_config(p)
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    p.add_argument("--threshold", type=float, default=0.1)

    p = sub.add_parser("sweep-epochs", help="Rsum per training epoch budget")
    _add_common(p)
    _add_run_config(p)
    p.add_argument("--budgets", type=_int_list, default=[50, 100, 200])

    p = sub.add_parser("attend", help="Rank an image's nodes against its representation")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--image", type=int, required=True)
    p.add_argument("--top", type=_positive, default=None)

    return parser.parse_args(argv)


def build_config(args: argparse.Namespace) -> RunConfig:
    """File values first, then any flag the user set."""
    cfg = load_config(Path(args.config) if getattr(args, "config", None) else None)
    overrides: Dict[str, Any] = {
        "dataset": getattr(args, "dataset", None),
        "val_dataset": getattr(args, "val_dataset", None),
        "out_dir": args.out,
        "train.seed": args.seed,
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.learning_rate": getattr(args, "lr", None),
        "loss.margin": getattr(args, "margin", None),
        "model.K": getattr(args, "K", None),
        "eval.top_n": getattr(args, "top_n", None),
        "eval.rerank_lambda": getattr(args, "lam", None),
    }
    if getattr(args, "no_bn", False):
        overrides["model.use_batchnorm"] = False
    if getattr(args, "rerank", False):
        overrides["eval.rerank"] = True
    if getattr(args, "inject_fault", False):
        overrides["model.inject_gradient_fault"] = True
    if getattr(args, "ensemble", None):
        overrides["eval.ensemble"] = list(args.ensemble)
    if getattr(args, "folds", None) is not None:
        overrides["eval.folds"] = args.folds
    return apply_overrides(cfg, overrides)


def _report_path(args: argparse.Namespace) -> Optional[Path]:
    return Path(args.out) / f"{args.command}_report.json" if args.out else None


def dispatch(args: argparse.Namespace, controller: ExperimentController) -> int:
    command = args.command
    if command == "gen":
        if args.out is None:
            raise ConfigError("gen needs --out")
        spec = SyntheticSpec(seed=7 if args.seed is None else args.seed, n_items=args.items, n=args.grid,
                             k=args.regions, D_o=args.dim, vocab_size=args.vocab, m=args.words,
                             captions_per_image=args.captions, cluster_count=args.clusters)
        return controller.run(lambda: controller.cmd_gen(spec, Path(args.out)))

    cfg = build_config(args)
    out = _report_path(args)
    if command == "train":
        return controller.run(lambda: controller.cmd_train(cfg), out)
    if command == "eval":
        return controller.run(lambda: controller.cmd_eval(Path(args.checkpoint), args.dataset, cfg.eval), out)
    if command == "retrieve":
        return controller.run(lambda: controller.cmd_retrieve(Path(args.checkpoint), args.dataset, cfg.eval,
                                                              image=args.image, text=args.text, k=args.k), out)
    if command == "gradcheck":
        max_entries = args.max_entries if args.max_entries > 0 else None
        return controller.run(
            lambda: controller.cmd_gradcheck(cfg, args.batch, args.step, args.tol, max_entries), out,
            exit_code=lambda report: 0 if report["passed"] else 1)
    if command == "sweep-k":
        return controller.run(lambda: controller.cmd_sweep_k(cfg, args.ks), out)
    if command == "ablate":
        return controller.run(lambda: controller.cmd_ablate(cfg), out)
    if command == "bn-compare":
        return controller.run(lambda: controller.cmd_bn_compare(cfg, args.seeds, args.threshold), out)
    if command == "sweep-epochs":
        return controller.run(lambda: controller.cmd_sweep_epochs(cfg, args.budgets), out)
    if command == "attend":
        return controller.run(lambda: controller.cmd_attend(Path(args.checkpoint), args.dataset,
                                                            args.image, args.top), out)
    raise ConfigError(f"unknown command '{command}'")


def main(argv: Optional[List[str]] = None) -> int:
    sys.excepthook = global_exception_hook
    args = parse_arguments(argv)

    # 1. Views: reports on stdout, epoch status on stderr
    view = ReportView(as_json=args.json)
    status = TrainingStatusBar(enabled=not args.json)

    # 2. Controller
    controller = ExperimentController(view=view, status=status)

    # 3. Run; configuration errors surface before any command starts
    try:
        return dispatch(args, controller)
    except DsranError as e:
        view.show_error(type(e).__name__, str(e))
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
