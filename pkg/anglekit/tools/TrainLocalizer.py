import logging
from pathlib import Path
from typing import Any, Dict, Optional

from anglekit.localizer import build_localizer
from anglekit.training import seed_everything, train_localizer

logger = logging.getLogger('anglekit_tools')


class TrainLocalizer:
    def train_loc(self, stage: int, coarse_checkpoint: Optional[Path] = None,
                  resume: Optional[Path] = None) -> Dict[str, Any]:
        """Train one localization stage; stage 2 may use a stage-1 checkpoint to place its crops."""
        run_dir = self.verify_run_dir()
        cfg = self.config
        coarse_model = None
        if coarse_checkpoint is not None:
            coarse_model, _ = self.restore_model(coarse_checkpoint, "localizer")
        seed_everything(cfg.train.seed)
        model = build_localizer(cfg.loc)
        manifest = self.load_manifest()
        train, test = self.folds(manifest)
        result = train_localizer(
            model, self.half_store(manifest), train, test, stage, cfg.optim, cfg.train, cfg.loss, cfg.loc,
            coarse_model=coarse_model, run_dir=run_dir, config_echo=cfg.model_dump(mode="json"),
            device=self.device(), resume=resume,
        )
        return {
            "run_dir": run_dir,
            "stage": stage,
            "epochs": len(result.history),
            "best_epoch": result.best_epoch,
            "best_val_ed": result.best_metric,
            "validation_crops": result.validation_crops,
            "checkpoint": run_dir / "best.pt",
        }
