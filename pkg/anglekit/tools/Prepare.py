import json
import logging
from typing import Any, Dict

logger = logging.getLogger('anglekit_tools')


class Prepare:
    def prepare(self) -> Dict[str, Any]:
        """
        Validate the manifest, record the train/test split and fill the half
        cache for every network input size the run config uses.
        """
        run_dir = self.verify_run_dir()
        manifest = self.load_manifest()
        train, test = self.folds(manifest)
        split_path = run_dir / "split.json"
        split_path.write_text(json.dumps({"train": train.ids, "test": test.ids}, indent=2), encoding="utf-8")

        loc = self.config.loc
        sizes = [self.config.cls.input_size, loc.stage1_size]
        if loc.crop_frame == "half":
            sizes.append(None)
        cached = self.half_store(manifest).prepare_all(sizes, self.workers)

        counts = {"train": train.class_counts(), "test": test.class_counts()}
        for fold, c in counts.items():
            ratio = c[1] / max(c[0] + c[1], 1)
            logger.info(f"{fold} fold: {c[0]} open / {c[1]} closure (closure ratio {ratio:.3f})")
        return {"split": split_path, "halves_prepared": cached, "class_counts": counts,
                "cache": self.settings.cache}
