"""Streaming transducer translation with CTC-guided frame merging.

A desk-scale system: a minimal autodiff tensor engine, CTC loss and
per-frame prediction, prediction-guided frame merging (average, attention,
discrete), transducer lattice loss and frame-synchronous beam search, a
dual-input speech/text model trained 1:1 on both corpora, synthetic data
generation, and evaluation metrics.
"""

from .config import ModelConfig, RunConfig
from .ctc import Vocab
from .compress import MergeMode
from .model import CtcGmmModel, SpeechBatch, TextBatch

__version__ = "0.1.0"

__all__ = ["ModelConfig", "RunConfig", "Vocab", "MergeMode", "CtcGmmModel",
           "SpeechBatch", "TextBatch", "__version__"]
