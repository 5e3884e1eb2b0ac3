import json
import logging
from pathlib import Path
from typing import Any, Dict, Sequence

from anglekit.errors import EvaluationError
from anglekit.evaluation import AblationRow, ClassificationSummary, EDSummary, write_report

logger = logging.getLogger('anglekit_tools')


class Report:
    def report(self, eval_paths: Sequence[Path]) -> Dict[str, Any]:
        """Merge eval.json files from several runs into one set of tables."""
        if not eval_paths:
            raise EvaluationError("report needs at least one eval.json")
        run_dir = self.verify_run_dir()
        classification: Dict[str, ClassificationSummary] = {}
        localization: Dict[str, EDSummary] = {}
        ablation = []
        for path in map(Path, eval_paths):
            if not path.exists():
                raise EvaluationError(f"Eval result not found: {path}")
            data = json.loads(path.read_text(encoding="utf-8"))
            flags = data.get("flags") or {}
            name = flags.get("method_name") or path.parent.name
            if name in classification or name in localization:
                name = f"{name} ({path.parent.name})"
            if data.get("classification"):
                classification[name] = ClassificationSummary(**data["classification"])
            if data.get("localization"):
                ed = EDSummary(**data["localization"])
                localization[name] = ed
                if "encoder_variant" in flags:
                    ablation.append(AblationRow.from_flags(flags, ed))
        written = write_report(run_dir, classification or None, localization or None, ablation)
        return {"files": written, "markdown": written["report.md"].read_text(encoding="utf-8")}
