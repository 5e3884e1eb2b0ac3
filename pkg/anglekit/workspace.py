import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from anglekit.classifier import build_classifier
from anglekit.data_pipeline import DatasetManifest, HalfStore, load_manifest, make_split
from anglekit.errors import CheckpointError, ConfigError
from anglekit.localizer import build_localizer
from anglekit.settings import AngleKitSettings, RunConfig, config_from_echo, write_config_echo
from anglekit.tools import Evaluate, Predict, Prepare, Report, Synthesize, TrainClassifier, TrainLocalizer
from anglekit.training import load_checkpoint

logger = logging.getLogger('anglekit_workspace')


class AngleKitWorkspace(Synthesize, Prepare, TrainClassifier, TrainLocalizer, Predict, Evaluate, Report):
    """Run directory, run config and per-machine settings shared by every operation."""

    def __init__(self, config: RunConfig, out: Path, settings: Optional[AngleKitSettings] = None,
                 workers: int = 0) -> None:
        self.config = config
        self.out = Path(out)
        self.settings = settings or AngleKitSettings()
        self.workers = workers
        self.run_dir: Optional[Path] = None
        self._stores: Dict[Tuple[str, bool], HalfStore] = {}
        safe_config = {"out": str(self.out), "cache": str(self.settings.cache), "device": self.settings.device,
                       "workers": workers, "seed": config.train.seed}
        logger.info(f"Initialized with config: {json.dumps(safe_config)}")

    def verify_run_dir(self) -> Path:
        """Create the run directory on first use and echo the effective config into it."""
        if self.run_dir is None:
            self.out.mkdir(parents=True, exist_ok=True)
            write_config_echo(self.config, self.out)
            self.run_dir = self.out
            logger.info(f"Run directory ready: {self.run_dir}")
        return self.run_dir

    def device(self) -> str:
        wanted = self.settings.device
        if wanted.startswith("cuda") and not torch.cuda.is_available():
            logger.warning(f"Device {wanted} unavailable, falling back to cpu")
            return "cpu"
        return wanted

    def load_manifest(self) -> DatasetManifest:
        data = self.config.data
        if data.manifest is None:
            raise ConfigError("No manifest configured; pass --manifest or set data.manifest")
        return load_manifest(data.manifest, data.image_root)

    def folds(self, manifest: DatasetManifest) -> Tuple[DatasetManifest, DatasetManifest]:
        return make_split(manifest, self.config.data.split_ratio, self.config.data.split_seed)

    def half_store(self, manifest: DatasetManifest) -> HalfStore:
        key = (str(manifest.image_root), self.config.data.mirror_right)
        if key not in self._stores:
            digest = hashlib.sha1(
                f"{Path(manifest.image_root).resolve()}|{manifest.records!r}".encode("utf-8")).hexdigest()[:12]
            cache_dir = Path(self.settings.cache) / "halves" / digest
            self._stores[key] = HalfStore(manifest, cache_dir, self.config.data.mirror_right)
        return self._stores[key]

    def restore_model(self, path: Path, kind: str) -> Tuple[nn.Module, RunConfig]:
        """Rebuild a classifier or localizer from the config echo stored in its checkpoint."""
        blob = load_checkpoint(path, map_location=self.device())
        cfg = config_from_echo(blob.get("config") or {})
        model = build_classifier(cfg.cls) if kind == "classifier" else build_localizer(cfg.loc)
        try:
            model.load_state_dict(blob["model"])
        except RuntimeError as e:
            raise CheckpointError(f"{path} does not hold {kind} weights: {e}") from e
        logger.info(f"Restored {kind} from {path} (epoch {blob.get('epoch')})")
        return model.to(self.device()), cfg

    def cleanup(self) -> None:
        """Drop cached halves held in memory."""
        try:
            self._stores.clear()
            logger.info("Workspace released")
        except Exception as e:
            logger.error(f"Error releasing workspace: {str(e)}")
