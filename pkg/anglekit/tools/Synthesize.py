import logging
from typing import Any, Dict

from anglekit.data_pipeline import synth_generate

logger = logging.getLogger('anglekit_tools')


class Synthesize:
    def synthesize(self) -> Dict[str, Any]:
        """Render the seeded synthetic set into the run directory."""
        run_dir = self.verify_run_dir()
        manifest = synth_generate(self.config.synth, run_dir, self.workers)
        return {
            "out": run_dir,
            "images": len(manifest),
            "class_counts": manifest.class_counts(),
            "manifest": run_dir / "manifest.csv",
        }
