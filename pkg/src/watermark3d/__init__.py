"""Machine-readable bump-grid watermarks for 3D printed objects.

Encode a binary matrix as a printable plate, render synthetic photographs of
it, train a small fully convolutional network that maps photos to bump
confidence maps, and decode the matrix back from a photo.
"""

from .codec import (InformationMatrix, LandmarkLayout, PlateSpec, export_stl, generate_matrix,
                    rasterize_plate)
from .errors import PipelineStageError, Watermark3DError
from .evaluation import (ConfusionCounts, ExperimentConfig, ExperimentReport,
                         bit_position_correlation, run_active_learning, run_cross_validation,
                         run_holdout, score)
from .model import Cnn3dwModel, TrainConfig, desk_config, forward, load_checkpoint, full_config, \
    save_checkpoint, train
from .render import RenderCondition, generate_dataset, gaussian_ground_truth
from .retrieval import RetrievalConfig, majority_vote, retrieve

__version__ = "0.1.0"
