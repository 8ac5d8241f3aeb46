"""Feature-extraction companion: frozen classifiers to FCFT feature files."""

from .extract import ExtractJob, extract_features
from .fcft import UNLABELED, write_fcft
from .models import PENULTIMATE_WIDTH, build_model, load_weights

__version__ = "0.1.0"

__all__ = ["ExtractJob", "PENULTIMATE_WIDTH", "UNLABELED", "build_model",
           "extract_features", "load_weights", "write_fcft"]
