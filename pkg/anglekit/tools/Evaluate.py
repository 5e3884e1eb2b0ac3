import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from anglekit.data_pipeline import load_manifest
from anglekit.errors import EvaluationError
from anglekit.evaluation import (AblationRow, ed_error, image_level, localization_from_predictions,
                                 read_predictions, scored_from_predictions, summarize_classification,
                                 summary_dict, write_report)

logger = logging.getLogger('anglekit_tools')


class Evaluate:
    def evaluate(self, pred_path: Path, gt_path: Optional[Path] = None, task: str = "both",
                 threshold: Optional[float] = None) -> Dict[str, Any]:
        """
        Compare predictions.csv against a ground-truth manifest and write the
        report tables, plots and a machine-readable eval.json.
        """
        run_dir = self.verify_run_dir()
        pred_path = Path(pred_path)
        frame = read_predictions(pred_path)
        gt = load_manifest(gt_path) if gt_path is not None else self.load_manifest()
        gt = gt.subset(frame["image_id"].unique())
        threshold = self.config.eval.threshold if threshold is None else threshold

        sidecar = pred_path.with_suffix(".json")
        flags = json.loads(sidecar.read_text(encoding="utf-8")).get("flags", {}) if sidecar.exists() else {}
        method = flags.get("method_name", self.config.eval.method_name)

        half_summary = image_summary = ed = None
        samples, results = [], []
        if task in ("classification", "both"):
            samples = scored_from_predictions(frame, gt)
            if samples:
                half_summary = summarize_classification(samples, threshold)
                image_summary = summarize_classification(image_level(samples), threshold)
            elif task == "classification":
                raise EvaluationError(f"{pred_path} has no classification scores")
        if task in ("localization", "both"):
            results = localization_from_predictions(frame, gt)
            if results:
                ed = ed_error(results)
            elif task == "localization":
                raise EvaluationError(f"{pred_path} has no landmark predictions")
        if half_summary is None and ed is None:
            raise EvaluationError(f"{pred_path} holds nothing to evaluate")

        ablation = [AblationRow.from_flags(flags, ed)] if ed is not None and "encoder_variant" in flags else []
        written = write_report(
            run_dir,
            classification={method: half_summary, f"{method} (image level)": image_summary}
            if half_summary else None,
            localization={method: ed} if ed else None,
            ablation=ablation, samples=samples, results=results,
        )
        summary = summary_dict(half_summary, image_summary, ed, flags)
        eval_path = run_dir / "eval.json"
        eval_path.write_text(json.dumps(summary, indent=2, default=str), encoding="utf-8")
        return {"eval": eval_path, "files": written, **summary}
