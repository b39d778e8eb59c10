"""Robust conversational emotion recognition under missing modalities.

Subpackages: a small float64 autodiff engine (`tensor`, `optim`), the
context-change encoder (`ecce`), routed token mixers (`mixers`), the
teacher/student conversation model (`model`), modality masking
(`masking`), synthetic conversation data (`data`), training frameworks
and schedules (`training`), the per-rate evaluation harness
(`evaluation`), and the command-line interface (`cli`).
"""

from .tensor import Tape, Tensor, gradcheck
from .optim import AdamW

__all__ = ["Tape", "Tensor", "gradcheck", "AdamW"]
