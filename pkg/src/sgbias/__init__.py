"""Label-prior biasing for scene-graph predicate prediction.

Three bias paradigms — experience estimation over label pairs, language-map
edge biasing, and scene-context node encoding — layered on a minimal
reverse-mode tensor core, plus a synthetic long-tailed corpus generator and
a recall-based evaluation kit.
"""

__version__ = "0.1.0"

from . import autodiff, corpus, experience, language_map, metrics, params
from . import pipeline, scene_encoder
from .errors import (ConfigError, DataError, DivergenceError, EmptySceneError,
                     GenerationError, SgbiasError)

__all__ = [
    "autodiff", "corpus", "experience", "language_map", "metrics", "params",
    "pipeline", "scene_encoder",
    "ConfigError", "DataError", "DivergenceError", "EmptySceneError",
    "GenerationError", "SgbiasError",
]
