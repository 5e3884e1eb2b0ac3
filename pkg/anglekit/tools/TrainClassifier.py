import logging
from pathlib import Path
from typing import Any, Dict, Optional

from anglekit.classifier import build_classifier
from anglekit.training import seed_everything, train_classifier

logger = logging.getLogger('anglekit_tools')


class TrainClassifier:
    def train_cls(self, resume: Optional[Path] = None) -> Dict[str, Any]:
        """Train the revised ResNet on the training fold; validates on the test fold each epoch."""
        run_dir = self.verify_run_dir()
        cfg = self.config
        seed_everything(cfg.train.seed)
        model = build_classifier(cfg.cls)
        manifest = self.load_manifest()
        train, test = self.folds(manifest)
        result = train_classifier(
            model, self.half_store(manifest), train, test, cfg.optim, cfg.train, cfg.loss, cfg.cls.input_size,
            run_dir=run_dir, config_echo=cfg.model_dump(mode="json"), device=self.device(), resume=resume,
        )
        return {
            "run_dir": run_dir,
            "epochs": len(result.history),
            "best_epoch": result.best_epoch,
            "best_val_auc": result.best_metric,
            "checkpoint": run_dir / "best.pt",
        }
