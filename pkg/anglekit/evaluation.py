"""
Metrics and reports: AUC, sensitivity/specificity/accuracy, landmark ED, and the
classification, localization and ablation tables.
"""
import logging
import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from scipy.stats import rankdata  # noqa: E402
from sklearn.metrics import roc_curve  # noqa: E402

from anglekit.data_pipeline import DatasetManifest  # noqa: E402
from anglekit.errors import EvaluationError  # noqa: E402
from anglekit.geometry import Point2D  # noqa: E402

logger = logging.getLogger('anglekit_evaluation')

PREDICTION_COLUMNS = ["image_id", "side", "score", "pred_x", "pred_y"]
ROUNDING_NOTE = "Values are rounded half-to-even to two decimals."
CHECK = "✓"


@dataclass(frozen=True)
class ScoredSample:
    image_id: str
    side: str
    score: float
    label: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise EvaluationError(f"Score for {self.image_id}/{self.side} outside [0, 1]: {self.score}")
        if self.label not in (0, 1):
            raise EvaluationError(f"Label for {self.image_id}/{self.side} must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class LocalizationResult:
    image_id: str
    side: str
    pred: Point2D
    gt: Point2D

    @property
    def error(self) -> float:
        return self.pred.distance(self.gt)


def roc_auc(samples: Sequence[ScoredSample]) -> float:
    """Mann-Whitney AUC with midranks for tied scores."""
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(f"AUC needs both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def threshold_metrics(samples: Sequence[ScoredSample], threshold: float = 0.5) -> Dict[str, float]:
    """
    Sensitivity, specificity and accuracy with `score >= threshold` as closure.
    A class absent from `samples` yields NaN for its rate.
    """
    if not samples:
        raise EvaluationError("No samples to score")
    tp = sum(1 for s in samples if s.label == 1 and s.score >= threshold)
    fn = sum(1 for s in samples if s.label == 1 and s.score < threshold)
    tn = sum(1 for s in samples if s.label == 0 and s.score < threshold)
    fp = sum(1 for s in samples if s.label == 0 and s.score >= threshold)
    if tp + fn == 0 or tn + fp == 0:
        logger.warning(f"Only one class among {len(samples)} samples; its counterpart rate is NaN")
    return {
        "sensitivity": tp / (tp + fn) if tp + fn else math.nan,
        "specificity": tn / (tn + fp) if tn + fp else math.nan,
        "accuracy": (tp + tn) / len(samples),
    }


def image_level(samples: Sequence[ScoredSample]) -> List[ScoredSample]:
    """One sample per image: score is the max over its halves."""
    grouped: Dict[str, List[ScoredSample]] = {}
    for s in samples:
        grouped.setdefault(s.image_id, []).append(s)
    return [ScoredSample(image_id, "image", max(s.score for s in group), max(s.label for s in group))
            for image_id, group in grouped.items()]


@dataclass(frozen=True)
class ClassificationSummary:
    auc: float
    sensitivity: float
    specificity: float
    accuracy: float
    count: int


def summarize_classification(samples: Sequence[ScoredSample], threshold: float = 0.5) -> ClassificationSummary:
    rates = threshold_metrics(samples, threshold)
    try:
        auc = roc_auc(samples)
    except EvaluationError as e:
        logger.warning(f"AUC undefined: {e}")
        auc = math.nan
    return ClassificationSummary(auc, rates["sensitivity"], rates["specificity"], rates["accuracy"], len(samples))


@dataclass(frozen=True)
class EDSummary:
    left: float
    right: float
    avg: float
    count_left: int
    count_right: int


def ed_error(results: Sequence[LocalizationResult]) -> EDSummary:
    """Per-side mean Euclidean distance in raw pixels; avg is the mean of the two side means."""
    by_side = {"left": [], "right": []}
    for r in results:
        by_side[r.side].append(r.error)
    for side, errors in by_side.items():
        if not errors:
            raise EvaluationError(f"No {side}-side localization results")
    left, right = float(np.mean(by_side["left"])), float(np.mean(by_side["right"]))
    return EDSummary(left, right, (left + right) / 2.0, len(by_side["left"]), len(by_side["right"]))


def round_half_even(value: float, places: int = 2) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(f"{value:.10f}").quantize(quantum, rounding=ROUND_HALF_EVEN))


@dataclass(frozen=True)
class AblationRow:
    """One localization ablation configuration and its result."""
    scaled_encoder: bool
    ppm: bool
    kr_loss: bool
    ed: EDSummary

    @classmethod
    def from_flags(cls, flags: Dict[str, object], ed: EDSummary) -> "AblationRow":
        return cls(flags.get("encoder_variant") == "scaled_mbconv", bool(flags.get("ppm_enabled")),
                   flags.get("loc_loss") == "kr", ed)


def classification_table(rows: Dict[str, ClassificationSummary]) -> pd.DataFrame:
    return pd.DataFrame([
        {"Method": name, "AUC": round_half_even(s.auc), "Sensitivity": round_half_even(s.sensitivity),
         "Specificity": round_half_even(s.specificity), "Accuracy": round_half_even(s.accuracy)}
        for name, s in rows.items()
    ])


def localization_table(rows: Dict[str, EDSummary]) -> pd.DataFrame:
    return pd.DataFrame([
        {"Method": name, "Left ED": round_half_even(s.left), "Right ED": round_half_even(s.right),
         "Avg ED": round_half_even(s.avg)}
        for name, s in rows.items()
    ])


def ablation_table(rows: Sequence[AblationRow]) -> pd.DataFrame:
    def mark(flag: bool) -> str:
        return CHECK if flag else ""
    return pd.DataFrame([
        {"Encoder": mark(r.scaled_encoder), "PPM": mark(r.ppm), "KR loss": mark(r.kr_loss),
         "Left ED": round_half_even(r.ed.left), "Right ED": round_half_even(r.ed.right),
         "Avg ED": round_half_even(r.ed.avg)}
        for r in rows
    ])


def frame_to_markdown(frame: pd.DataFrame) -> str:
    cols = [str(c) for c in frame.columns]
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join(["---"] * len(cols)) + "|"]
    for row in frame.itertuples(index=False):
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    return "\n".join(lines)


def plot_roc(samples: Sequence[ScoredSample], path: Path, title: str = "ROC") -> Path:
    labels = [s.label for s in samples]
    scores = [s.score for s in samples]
    fpr, tpr, _ = roc_curve(labels, scores)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, label=f"AUC = {round_half_even(roc_auc(samples))}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey")
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("Sensitivity")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ed_hist(results: Sequence[LocalizationResult], path: Path, bins: int = 30) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for side in ("left", "right"):
        errors = [r.error for r in results if r.side == side]
        ax.hist(errors, bins=bins, alpha=0.6, label=side)
    ax.set_xlabel("ED (raw pixels)")
    ax.set_ylabel("Halves")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_predictions(rows: Iterable[Dict[str, object]], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=PREDICTION_COLUMNS).to_csv(path, index=False)
    return path


def read_predictions(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"Predictions file not found: {path}")
    frame = pd.read_csv(path, dtype={"image_id": str, "side": str})
    missing = [c for c in PREDICTION_COLUMNS if c not in frame.columns]
    if missing:
        raise EvaluationError(f"{path} is missing columns {missing}")
    return frame


def scored_from_predictions(frame: pd.DataFrame, manifest: DatasetManifest) -> List[ScoredSample]:
    out = []
    for row in frame.dropna(subset=["score"]).itertuples(index=False):
        try:
            rec = manifest.by_id(row.image_id)
        except KeyError:
            raise EvaluationError(f"Prediction for unknown image {row.image_id}")
        out.append(ScoredSample(row.image_id, row.side, float(row.score), rec.label))
    return out


def localization_from_predictions(frame: pd.DataFrame, manifest: DatasetManifest) -> List[LocalizationResult]:
    out = []
    for row in frame.dropna(subset=["pred_x", "pred_y"]).itertuples(index=False):
        try:
            rec = manifest.by_id(row.image_id)
        except KeyError:
            raise EvaluationError(f"Prediction for unknown image {row.image_id}")
        out.append(LocalizationResult(row.image_id, row.side, Point2D(float(row.pred_x), float(row.pred_y)),
                                      rec.ss(row.side)))
    return out


def write_report(out_dir: Path, classification: Optional[Dict[str, ClassificationSummary]] = None,
                 localization: Optional[Dict[str, EDSummary]] = None, ablation: Sequence[AblationRow] = (),
                 samples: Sequence[ScoredSample] = (), results: Sequence[LocalizationResult] = ()) -> Dict[str, Path]:
    """
    Write report.md and report.csv with whichever tables have rows, plus roc.png
    when half-level scores are given and ed_hist.png when landmark results are.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sections, frames = [], []
    if classification:
        frame = classification_table(classification)
        sections.append("## Classification\n\n" + frame_to_markdown(frame))
        frames.append(frame.assign(Table="classification"))
    if localization:
        frame = localization_table(localization)
        sections.append("## Localization\n\n" + frame_to_markdown(frame))
        frames.append(frame.assign(Table="localization"))
    if ablation:
        frame = ablation_table(ablation)
        sections.append("## Localization ablation\n\n" + frame_to_markdown(frame))
        frames.append(frame.assign(Table="ablation"))
    if not sections:
        raise EvaluationError("Nothing to report")

    written = {}
    md = "# anglekit report\n\n" + "\n\n".join(sections) + f"\n\n{ROUNDING_NOTE}\n"
    written["report.md"] = out_dir / "report.md"
    written["report.md"].write_text(md, encoding="utf-8")
    written["report.csv"] = out_dir / "report.csv"
    pd.concat(frames, ignore_index=True).to_csv(written["report.csv"], index=False)
    if samples and len({s.label for s in samples}) == 2:
        written["roc.png"] = plot_roc(samples, out_dir / "roc.png")
    if results:
        written["ed_hist.png"] = plot_ed_hist(results, out_dir / "ed_hist.png")
    logger.info(f"Wrote report to {out_dir}: {', '.join(sorted(written))}")
    return written


def summary_dict(classification: Optional[ClassificationSummary] = None,
                 image_classification: Optional[ClassificationSummary] = None,
                 ed: Optional[EDSummary] = None, flags: Optional[Dict[str, object]] = None) -> Dict[str, object]:
    """Machine-readable eval result that `report` aggregates across runs."""
    return {
        "classification": asdict(classification) if classification else None,
        "image_classification": asdict(image_classification) if image_classification else None,
        "localization": asdict(ed) if ed else None,
        "flags": flags or {},
    }
