import hashlib
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from config import RunConfig, save_config, with_model, with_train
from model import diffcore as dc
from model.checkpoint import load_checkpoint
from model.dsran import DsranModel
from model.errors import ConfigError, DsranError, EmptyInput, ShapeMismatch
from model.evalkit import (SimilarityMatrix, attention_ranking, ensemble_all, evaluate,
                           fold_eval, rerank_i2t)
from model.featurestore import (CAPTIONS_BLOB, GLOBAL_BLOB, MANIFEST_FILENAME, REGIONAL_BLOB,
                                DatasetManifest, FeatureSet, SyntheticSpec, generate_synthetic,
                                load_dataset, read_manifest, stack_features, synthetic_dataset)
from model.visual_pipeline import project_features
from model.trainer import TrainLog, batch_loss, evaluate_model, similarity_for, train
from utils.logger import setup_logger

# Type hinting for the views
from typing import TYPE_CHECKING
if TYPE_CHECKING:
    from view.report_view import ReportView
    from view.status_bar import TrainingStatusBar

logger = setup_logger(__name__)

Report = Dict[str, Any]

# (name, use_global_path, use_regional_path, use_ssr, use_jsr)
ABLATION_GRID = [
    ("global", True, False, False, False),
    ("global+ssr", True, False, True, False),
    ("regional", False, True, False, False),
    ("regional+ssr", False, True, True, False),
    ("dual", True, True, False, False),
    ("dual+ssr", True, True, True, False),
    ("dual+jsr", True, True, False, True),
    ("dual+ssr+jsr", True, True, True, True),
]


class ExperimentController:
    """
    Orchestrates the commands: loads data, builds and trains models, evaluates
    them and hands reports to the view.
    """

    def __init__(self, view: 'ReportView', status: Optional['TrainingStatusBar'] = None):
        self.view = view
        self.status = status

    # -- Data and model plumbing --

    def _load(self, dataset: Optional[str]) -> Tuple[DatasetManifest, List[FeatureSet]]:
        if dataset is None:
            raise ConfigError("no dataset given (set 'dataset' in the config or pass --dataset)")
        manifest = read_manifest(Path(dataset))
        return manifest, load_dataset(Path(dataset))

    def _resolve(self, cfg: RunConfig, manifest: DatasetManifest) -> RunConfig:
        """Adopts the dataset's feature width and vocabulary size where the config leaves them open."""
        m = cfg.model
        for key, value in (("feature_dim", manifest.feature_dim), ("vocab_size", manifest.vocab_size)):
            configured = getattr(m, key)
            if configured is not None and configured != value:
                raise ConfigError(f"model.{key}={configured} but the dataset has {value}")
        return with_model(cfg, feature_dim=manifest.feature_dim, vocab_size=manifest.vocab_size).validate()

    def _on_epoch(self, record, total: int) -> None:
        logger.info(f"epoch {record.epoch}/{total}: loss {record.loss:.6f}"
                    + (f", val Rsum {record.val_rsum:.2f}" if record.val_rsum is not None else ""))
        if self.status is not None:
            self.status.update_metrics(record, total)

    def _fit(self, cfg: RunConfig, data: Sequence[FeatureSet], val: Optional[Sequence[FeatureSet]],
             out_dir: Optional[Path] = None) -> Tuple[DsranModel, TrainLog]:
        model = DsranModel.create(cfg.model, seed=cfg.train.seed)
        log = train(data, model, cfg, val_data=val, out_dir=out_dir, on_epoch=self._on_epoch)
        return model, log

    def _fit_and_score(self, cfg: RunConfig, data, val) -> Report:
        model, log = self._fit(cfg, data, None)
        _, report = evaluate_model(model, val, cfg.eval)
        return {"final_loss": log.final_loss, "report": report.to_dict()}

    def _training_data(self, cfg: RunConfig):
        manifest, data = self._load(cfg.dataset)
        cfg = self._resolve(cfg, manifest)
        val = data
        if cfg.val_dataset is not None:
            val_manifest, val = self._load(cfg.val_dataset)
            self._resolve(cfg, val_manifest)
        return cfg, data, val

    # -- Commands --

    def cmd_gen(self, spec: SyntheticSpec, out_dir: Path) -> Report:
        """Writes a synthetic dataset and reports its manifest and file hashes."""
        manifest = generate_synthetic(spec, out_dir)
        hashes = {}
        for name in (MANIFEST_FILENAME, GLOBAL_BLOB, REGIONAL_BLOB, CAPTIONS_BLOB):
            hashes[name] = hashlib.sha256((Path(out_dir) / name).read_bytes()).hexdigest()
        return {"command": "gen", "manifest": manifest.to_dict(), "sha256": hashes}

    def cmd_train(self, cfg: RunConfig) -> Report:
        """Trains on cfg.dataset, writes checkpoint, log and config under cfg.out_dir."""
        cfg, data, val = self._training_data(cfg)
        out_dir = Path(cfg.out_dir)
        model, log = self._fit(cfg, data, val, out_dir=out_dir)
        save_config(cfg, out_dir / "config.json")
        _, report = evaluate_model(model, val, cfg.eval)
        return {
            "command": "train",
            "epochs": cfg.train.epochs,
            "final_loss": log.final_loss,
            "loss_curve": log.losses,
            "checkpoint": log.checkpoint,
            "report": report.to_dict(),
        }

    def _similarity(self, checkpoint: Path, data: Sequence[FeatureSet],
                    manifest: DatasetManifest) -> Tuple[DsranModel, SimilarityMatrix]:
        model, cfg, _ = load_checkpoint(checkpoint)
        self._resolve(cfg, manifest)
        return model, similarity_for(model, data)

    def cmd_eval(self, checkpoint: Path, dataset: str, eval_cfg) -> Report:
        """Evaluates a checkpoint, optionally ensembled, re-ranked and fold-averaged."""
        manifest, data = self._load(dataset)
        _, S = self._similarity(checkpoint, data, manifest)
        if eval_cfg.ensemble:
            others = [self._similarity(Path(p), data, manifest)[1] for p in eval_cfg.ensemble]
            S = ensemble_all([S] + others)
        if eval_cfg.folds > 1:
            report = fold_eval(S, eval_cfg.folds, eval_cfg.rerank, eval_cfg.top_n, eval_cfg.rerank_lambda)
        else:
            if eval_cfg.rerank:
                S = rerank_i2t(S, eval_cfg.top_n, eval_cfg.rerank_lambda)
            report = evaluate(S)
        return {
            "command": "eval",
            "checkpoint": str(checkpoint),
            "ensemble": list(eval_cfg.ensemble),
            "rerank": eval_cfg.rerank,
            "folds": eval_cfg.folds,
            "report": report.to_dict(),
        }

    def cmd_retrieve(self, checkpoint: Path, dataset: str, eval_cfg, image: Optional[int] = None,
                     text: Optional[int] = None, k: int = 10) -> Report:
        """Top-k texts for an image query, or top-k images for a caption query."""
        if (image is None) == (text is None):
            raise ConfigError("give exactly one of --image or --text")
        manifest, data = self._load(dataset)
        _, S = self._similarity(checkpoint, data, manifest)
        cpi = S.captions_per_image
        if image is not None:
            if not 0 <= image < S.n_images:
                raise ShapeMismatch(f"image index {image} outside [0, {S.n_images})")
            if eval_cfg.rerank:
                S = rerank_i2t(S, eval_cfg.top_n, eval_cfg.rerank_lambda)
            hits = [{"text": int(j), "item": int(j) // cpi, "caption": int(j) % cpi,
                     "score": float(S.scores[image, j]), "correct": int(j) // cpi == image}
                    for j in S.i2t_rankings()[image, :k]]
            return {"command": "retrieve", "query": {"image": image}, "results": hits}
        if not 0 <= text < S.n_texts:
            raise ShapeMismatch(f"text index {text} outside [0, {S.n_texts})")
        truth = S.image_of_text(text)
        hits = [{"image": int(i), "score": float(S.scores[i, text]), "correct": int(i) == truth}
                for i in S.t2i_rankings()[text, :k]]
        return {"command": "retrieve", "query": {"text": text, "item": truth, "caption": text % cpi},
                "results": hits}

    def cmd_gradcheck(self, cfg: RunConfig, batch_size: int = 3, step: float = 1e-6,
                      tol: float = 1e-4, max_entries: Optional[int] = 6) -> Report:
        """
        Finite-difference check of every parameter group through both encoders
        and the loss, on the first batch_size images paired with their first captions.
        """
        if cfg.dataset is not None:
            manifest, data = self._load(cfg.dataset)
        else:
            manifest, data = synthetic_dataset(SyntheticSpec(seed=cfg.train.seed, n_items=max(batch_size, 2)))
        cfg = self._resolve(cfg, manifest)
        if len(data) < batch_size:
            raise EmptyInput(f"gradcheck needs {batch_size} images, dataset has {len(data)}")

        model = DsranModel.create(cfg.model, seed=cfg.train.seed)
        batch = [(fs, fs.captions[0]) for fs in data[:batch_size]]
        params = list(model.named_parameters().values())
        saved = model.state_dict()
        try:
            result = dc.gradcheck(lambda: batch_loss(model, batch, cfg.loss), params,
                                  step=step, tol=tol, max_entries=max_entries, seed=cfg.train.seed)
        finally:
            model.load_state_dict(saved)

        logger.info(f"gradcheck {'passed' if result.passed else 'FAILED'}: "
                    f"max rel error {result.max_rel_error:.3e} over {result.checked} entries")
        return {"command": "gradcheck", "batch_size": batch_size, "step": step,
                "fault_injected": cfg.model.inject_gradient_fault, **result.to_dict()}

    def cmd_sweep_k(self, cfg: RunConfig, ks: Sequence[int]) -> Report:
        """Trains and evaluates one model per JSR head count K."""
        cfg, data, val = self._training_data(cfg)
        variants = [(K, with_model(cfg, K=K).validate()) for K in ks]
        rows = []
        for K, variant in variants:
            logger.info(f"K sweep: training K={K}")
            rows.append({"K": K, **self._fit_and_score(variant, data, val)})
        return {"command": "sweep-k", "rows": rows}

    def cmd_ablate(self, cfg: RunConfig) -> Report:
        """Trains the path / SSR / JSR ablation grid."""
        cfg, data, val = self._training_data(cfg)
        rows = []
        for name, use_global, use_regional, use_ssr, use_jsr in ABLATION_GRID:
            variant = with_model(cfg, use_global_path=use_global, use_regional_path=use_regional,
                                 use_ssr=use_ssr, use_jsr=use_jsr).validate()
            logger.info(f"Ablation: training '{name}'")
            rows.append({"variant": name, "global": use_global, "regional": use_regional,
                         "ssr": use_ssr, "jsr": use_jsr, **self._fit_and_score(variant, data, val)})
        return {"command": "ablate", "rows": rows}

    def cmd_bn_compare(self, cfg: RunConfig, seeds: Sequence[int], threshold: float = 0.1) -> Report:
        """
        Epochs needed to bring the training loss below threshold, with and
        without batch normalization in the graph attention layers.
        """
        cfg, data, _ = self._training_data(cfg)
        rows = []
        for seed in seeds:
            reached = {}
            for use_bn in (True, False):
                variant = with_train(with_model(cfg, use_batchnorm=use_bn), seed=seed).validate()
                _, log = self._fit(variant, data, None)
                reached[use_bn] = log.epochs_to_reach(threshold)
            with_bn, without_bn = reached[True], reached[False]
            no_later = with_bn is not None and (without_bn is None or with_bn <= without_bn)
            rows.append({"seed": seed, "epochs_with_bn": with_bn, "epochs_without_bn": without_bn,
                         "bn_no_later": no_later})

        wins = sum(r["bn_no_later"] for r in rows)
        trend_met = wins * 2 > len(rows)
        if not trend_met:
            logger.warning(f"BN reached loss < {threshold} no later in only {wins} of {len(rows)} seeds")
        return {"command": "bn-compare", "threshold": threshold, "rows": rows, "trend_met": trend_met}

    def cmd_sweep_epochs(self, cfg: RunConfig, budgets: Sequence[int]) -> Report:
        """Trains one model per epoch budget, decaying the learning rate at half of each budget."""
        cfg, data, val = self._training_data(cfg)
        rows = []
        for epochs in budgets:
            variant = with_train(cfg, epochs=epochs, decay_epoch=None).validate()
            logger.info(f"Epoch sweep: training for {epochs} epochs")
            rows.append({"epochs": epochs, **self._fit_and_score(variant, data, val)})
        return {"command": "sweep-epochs", "rows": rows}

    def cmd_attend(self, checkpoint: Path, dataset: str, image: int, top: Optional[int] = None) -> Report:
        """Ranks the image's projected grid and region nodes by dot product with its representation."""
        manifest, data = self._load(dataset)
        model, cfg, _ = load_checkpoint(checkpoint)
        self._resolve(cfg, manifest)
        if not 0 <= image < len(data):
            raise ShapeMismatch(f"image index {image} outside [0, {len(data)})")

        batch = stack_features([data[image]])
        rep = model.encode_images(batch, dc.EVAL).data[0]
        V_F, V_R = project_features(batch, model.visual.projection)
        rankings = {}
        for name, nodes in (("global", V_F), ("regional", V_R)):
            if nodes is None:
                continue
            feats = nodes.data[0]
            rankings[name] = attention_ranking(rep, feats, min(top, feats.shape[0]) if top else None)
        return {"command": "attend", "image": image, "rankings": rankings}

    # -- Execution --

    def run(self, command: Callable[[], Report], out_path: Optional[Path] = None,
            exit_code: Optional[Callable[[Report], int]] = None) -> int:
        """Runs a command, shows its report and returns the process exit code."""
        return self._safe_execute(command, out_path, exit_code)

    def _safe_execute(self, func: Callable[[], Report], out_path: Optional[Path],
                      exit_code: Optional[Callable[[Report], int]]) -> int:
        try:
            report = func()
            self.view.show(report, out_path)
            return exit_code(report) if exit_code is not None else 0
        except DsranError as e:
            name = type(e).__name__
            logger.error(f"{name}: {e}")
            logger.debug("Command failed", exc_info=True)
            self.view.show_error(name, str(e))
            return e.exit_code
