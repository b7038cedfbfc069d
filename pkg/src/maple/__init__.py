"""Episodic meta-learning engine for cross-prompt essay trait scoring.

Precomputed essay/prompt/rubric embeddings and engineered feature vectors go
in; a gated fusion head is meta-trained with prototypical episodes and
evaluated on fully unseen prompts with quadratic weighted kappa under
leave-one-prompt-out cross-validation.
"""

from .corpus import (
    Corpus,
    CorpusError,
    FeatureNormalizer,
    OffScaleError,
    ScoreScale,
    Split,
    SplitSpec,
    level_of,
    load_corpus,
    load_fold_specs,
    normalize_features,
    read_embeddings,
    resolve_split,
    write_embeddings,
)
from .episodes import Episode, EpisodeSampler, EpisodeUnavailable, MetaTestTask, Regime, build_meta_test
from .evaluation import EvalReport, qwk, run_cv, score_task
from .fusion import HeadConfig, HeadParams, backward, forward, init_params, load_checkpoint, save_checkpoint
from .proto import PrototypeSet, compute_prototypes, episode_loss, predict, similarity
from .trainer import AdamState, Checkpoint, TrainConfig, TrainingDiverged, adam_step, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Checkpoint",
    "Corpus",
    "CorpusError",
    "Episode",
    "EpisodeSampler",
    "EpisodeUnavailable",
    "EvalReport",
    "FeatureNormalizer",
    "HeadConfig",
    "HeadParams",
    "MetaTestTask",
    "OffScaleError",
    "PrototypeSet",
    "Regime",
    "ScoreScale",
    "Split",
    "SplitSpec",
    "TrainConfig",
    "TrainingDiverged",
    "adam_step",
    "backward",
    "build_meta_test",
    "compute_prototypes",
    "episode_loss",
    "forward",
    "init_params",
    "level_of",
    "load_checkpoint",
    "load_corpus",
    "load_fold_specs",
    "normalize_features",
    "predict",
    "qwk",
    "read_embeddings",
    "resolve_split",
    "run_cv",
    "save_checkpoint",
    "score_task",
    "similarity",
    "train",
    "write_embeddings",
]
