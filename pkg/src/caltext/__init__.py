"""Offline handwritten text-line recognition.

A DenseNet feature extractor feeds a coverage-aware attention decoder;
training, evaluation, and visualization run on plain numpy, small enough
for a single CPU.
"""

from .tensor import Parameter, Tensor, no_grad, set_default_dtype
from .encoder import AnnotationGrid, DenseNetEncoder, EncoderConfig, grid_extents
from .decoder import CALDecoder, DecoderConfig, DecoderState, Hypothesis
from .vocab import EOS_INDEX, Vocabulary, decode_indices, encode_text
from .model import ModelConfig, Recognizer
from .objective import (LossConfig, OptimizerState, adadelta_step,
                        sequence_loss, teacher_forced_decode, train)
from .metrics import EditCounts, cer, corpus_report, levenshtein, wer
from .data import (CorpusSplit, LineSample, bilinear_resize, load_corpus,
                   parse_manifest, preprocess, salt_pepper)
from .checkpoint import (Checkpoint, CheckpointError, checkpoint_from_model,
                         load_checkpoint, model_from_checkpoint,
                         save_checkpoint)
from .viz import attention_overlay, colorize_attention, overlay, step_color

__version__ = "0.1.0"

__all__ = [
    "AnnotationGrid", "CALDecoder", "Checkpoint", "CheckpointError",
    "CorpusSplit", "DecoderConfig", "DecoderState", "DenseNetEncoder",
    "EOS_INDEX", "EditCounts", "EncoderConfig", "Hypothesis", "LineSample",
    "LossConfig", "ModelConfig", "OptimizerState", "Parameter", "Recognizer",
    "Tensor", "Vocabulary", "adadelta_step", "attention_overlay",
    "bilinear_resize", "cer", "checkpoint_from_model", "colorize_attention",
    "corpus_report", "decode_indices", "encode_text", "grid_extents",
    "levenshtein", "load_checkpoint", "load_corpus", "model_from_checkpoint",
    "no_grad", "overlay", "parse_manifest", "preprocess", "salt_pepper",
    "save_checkpoint", "sequence_loss", "set_default_dtype", "step_color",
    "teacher_forced_decode", "train", "wer",
]
