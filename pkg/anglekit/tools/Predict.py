import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from anglekit.data_pipeline import SIDES
from anglekit.datasets import ClassificationHalves
from anglekit.evaluation import write_predictions
from anglekit.geometry import Heatmap, save_heatmap_png, save_overlay_png
from anglekit.localizer import localize_two_stage
from anglekit.training import classification_scores

logger = logging.getLogger('anglekit_tools')


class Predict:
    def predict(self, cls_checkpoint: Optional[Path] = None, coarse_checkpoint: Optional[Path] = None,
                fine_checkpoint: Optional[Path] = None, fold: str = "test", overlays: bool = False) -> Dict[str, Any]:
        """
        Score and/or localize every half of a fold and write predictions.csv.
        Columns without a model are left empty.
        """
        if cls_checkpoint is None and coarse_checkpoint is None:
            raise ValueError("predict needs a classifier checkpoint, a stage-1 checkpoint, or both")
        if fine_checkpoint is not None and coarse_checkpoint is None:
            raise ValueError("A stage-2 checkpoint needs its stage-1 checkpoint")
        run_dir = self.verify_run_dir()
        manifest = self.load_manifest()
        train, test = self.folds(manifest)
        subset = {"train": train, "test": test, "all": manifest}[fold]
        store = self.half_store(manifest)

        rows: Dict[tuple, Dict[str, Any]] = {
            (rec.image_id, side): {"image_id": rec.image_id, "side": side, "score": None,
                                   "pred_x": None, "pred_y": None}
            for rec in subset for side in SIDES
        }
        flags: Dict[str, Any] = {"method_name": self.config.eval.method_name}

        if cls_checkpoint is not None:
            model, cfg = self.restore_model(cls_checkpoint, "classifier")
            dataset = ClassificationHalves(store, subset, cfg.cls.input_size)
            for s in classification_scores(model.to(self.device()), dataset, device=self.device()):
                rows[(s.image_id, s.side)]["score"] = s.score
            flags.update(tweak_b=cfg.cls.tweak_b, tweak_d=cfg.cls.tweak_d)

        if coarse_checkpoint is not None:
            coarse, coarse_cfg = self.restore_model(coarse_checkpoint, "localizer")
            fine, run_cfg = None, coarse_cfg
            if fine_checkpoint is not None:
                fine, run_cfg = self.restore_model(fine_checkpoint, "localizer")
                if run_cfg.loc.stage1_size != coarse_cfg.loc.stage1_size:
                    logger.warning("Stage-1 and stage-2 checkpoints disagree on stage1_size; using stage 2's")
                fine.to(self.device())
            coarse.to(self.device())
            loc_cfg = run_cfg.loc
            flags.update(encoder_variant=loc_cfg.encoder.variant, ppm_enabled=loc_cfg.ppm_enabled,
                         loc_loss=run_cfg.loss.loc_loss)
            for rec in subset:
                for half in store.halves(rec.image_id):
                    result = localize_two_stage(coarse, fine, half, loc_cfg)
                    row = rows[(half.image_id, half.side)]
                    row["pred_x"], row["pred_y"] = result.point.x, result.point.y
                    if overlays:
                        self._write_overlay(run_dir, half, result, rec.ss(half.side), loc_cfg.heatmap_stride)

        out = write_predictions(rows.values(), run_dir / "predictions.csv")
        (run_dir / "predictions.json").write_text(json.dumps({
            "flags": flags,
            "checkpoints": {"classifier": cls_checkpoint, "stage1": coarse_checkpoint, "stage2": fine_checkpoint},
            "fold": fold,
        }, indent=2, default=str), encoding="utf-8")
        return {"predictions": out, "halves": len(rows), "fold": fold, "overlays": overlays}

    def _write_overlay(self, run_dir: Path, half, result, gt_raw, stride: int) -> List[Path]:
        name = f"{half.image_id}_{half.side}"
        heat = Heatmap(np.clip(result.stage1_heatmap, 0.0, 1.0), stride)
        size = result.stage1_image.shape[0]
        upsampled = np.kron(heat.values, np.ones((stride, stride)))[:size, :size]
        to_stage1 = result.stage1_to_raw.inverse()
        points = (to_stage1.apply(result.point), to_stage1.apply(gt_raw))
        return [
            save_heatmap_png(heat, run_dir / "heatmaps" / f"{name}.png"),
            save_overlay_png(result.stage1_image, upsampled, run_dir / "overlays" / f"{name}.png", points),
        ]
