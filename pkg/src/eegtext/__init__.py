"""EEG trial classification and class-conditioned text generation.

Modules
-------
tensor      reverse-mode autodiff over numpy arrays
ingest      trial files, filename metadata, labels, synthetic trials, splits
dsp         fixed length, zero-phase FIR band-pass, STFT masking, epoch tensors
encoder     conv blocks, depthwise conv, LSTM, pooling, separable conv
classifier  dense ELU head, softmax, cross-entropy, L2 and max-norm
model       encoder + classifier parameters and the training objective
trainer     Adam, early stopping, checkpoints, evaluation, data-efficiency sweep
textgen     prompts, completion backends, perplexity and BPC
config      flat key = value configuration
cli         the ``eegtext`` command
"""

from .classifier import ClassifierConfig, ClassPrediction
from .dsp import EpochTensor, FilterSpec, PipelineConfig, StftSpec, assemble_epochs
from .encoder import EncoderConfig
from .ingest import LabelMap, RawTrial, SynthSpec, synth_generate
from .model import Model
from .tensor import Tensor, backward
from .trainer import TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ClassPrediction", "ClassifierConfig", "EncoderConfig", "EpochTensor", "FilterSpec",
    "LabelMap", "Model", "PipelineConfig", "RawTrial", "StftSpec", "SynthSpec", "Tensor",
    "TrainConfig", "assemble_epochs", "backward", "evaluate", "fit", "load_checkpoint",
    "save_checkpoint", "synth_generate",
]
