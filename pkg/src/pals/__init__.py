"""KNN pseudo-labelling with label smoothing for noisy partial-label learning."""

from .data import Dataset, GenSpec, load_dataset, make_benchmark, save_dataset
from .pseudo import pseudo_label_step
from .trainer import RunConfig, run_method, run_training

__all__ = ["Dataset", "GenSpec", "RunConfig", "load_dataset", "make_benchmark",
           "pseudo_label_step", "run_method", "run_training", "save_dataset"]
__version__ = "0.1.0"
