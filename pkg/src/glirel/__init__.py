"""Zero-shot relation classification toolkit.

Classifies relations between given entity mentions against arbitrary
textual labels supplied at inference time: candidate labels and text are
encoded jointly in a single forward pass, entity pairs are scored against
every label with independent sigmoid probabilities, and nothing about the
label set is baked into the model.
"""

__version__ = "0.1.0"

from .data import EntitySpan, InputInstance, Relation, load_jsonl, save_jsonl
from .model import ModelConfig, RelationClassifier, load_checkpoint, save_checkpoint
from .prompt import SELF_LABEL, LabelPolicy, assemble, regularize_labels, truncate
from .scorer import NO_RELATION_LABEL, PredictionSet, RelationPrediction
from .training import TrainConfig, train
from .zeroshot import MacroMetrics, macro_prf1, make_split, run_experiment

__all__ = [
    "EntitySpan",
    "InputInstance",
    "Relation",
    "LabelPolicy",
    "ModelConfig",
    "TrainConfig",
    "RelationClassifier",
    "PredictionSet",
    "RelationPrediction",
    "MacroMetrics",
    "SELF_LABEL",
    "NO_RELATION_LABEL",
    "assemble",
    "regularize_labels",
    "truncate",
    "train",
    "make_split",
    "macro_prf1",
    "run_experiment",
    "load_jsonl",
    "save_jsonl",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
