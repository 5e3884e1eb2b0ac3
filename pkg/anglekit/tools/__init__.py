from anglekit.tools.Evaluate import Evaluate
from anglekit.tools.Predict import Predict
from anglekit.tools.Prepare import Prepare
from anglekit.tools.Report import Report
from anglekit.tools.Synthesize import Synthesize
from anglekit.tools.TrainClassifier import TrainClassifier
from anglekit.tools.TrainLocalizer import TrainLocalizer

__all__ = ["Evaluate", "Predict", "Prepare", "Report", "Synthesize", "TrainClassifier", "TrainLocalizer"]
