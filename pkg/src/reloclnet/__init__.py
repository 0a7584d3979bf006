"""Video corpus moment retrieval with late-fusion encoders and contrastive objectives."""

from .data import Corpus, QueryAnnotation, SyntheticSpec, VideoRecord, generate_synthetic_corpus, load_corpus, save_corpus
from .encoders import ModelConfig
from .estimator import ReLoCLNet, relonet
from .exceptions import (ConfigError, DataError, DimensionError, DomainError, NonFiniteError, ReLoCLNetError,
                         TrainingAborted, UsageError)
from .metrics import EvalReport, recall_moment, recall_vr, temporal_iou
from .model import ReLoCLNetModel
from .retrieval import CorpusIndex, localize_moments, retrieve_videos, vcmr_rank
from .training import ABLATIONS, RunConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "ConfigError", "Corpus", "CorpusIndex", "DataError", "DimensionError", "DomainError", "EvalReport",
    "ModelConfig", "NonFiniteError", "QueryAnnotation", "ReLoCLNet", "ReLoCLNetError", "ReLoCLNetModel", "RunConfig",
    "SyntheticSpec", "TrainingAborted", "UsageError", "VideoRecord", "evaluate", "generate_synthetic_corpus",
    "load_corpus", "localize_moments", "recall_moment", "recall_vr", "relonet", "retrieve_videos", "save_corpus",
    "temporal_iou", "train", "vcmr_rank",
]
