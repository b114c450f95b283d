"""News recommendation that matches clicked and candidate news through their titles and knowledge graph entities."""
from .config import Config, ConfigError, ModelConfig, TrainConfig, load_config
from .evaluation import MetricsReport, evaluate
from .ingest import DataError, NewsTable, load_mind_dataset
from .matcher import KIM, match, score_grid, score_impression
from .training import nce_loss, train

__all__ = [
    "Config", "ConfigError", "ModelConfig", "TrainConfig", "load_config",
    "MetricsReport", "evaluate", "DataError", "NewsTable", "load_mind_dataset",
    "KIM", "match", "score_grid", "score_impression", "nce_loss", "train",
]
__version__ = "0.1.0"
