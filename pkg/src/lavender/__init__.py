"""Attention alignment of a toy vision-language model to teacher saliency maps."""

from .aggregation import AggMode, ParallelAttnParams, aggregate
from .aligner import AlignerConfig, AlignerParams, aligner_forward, attention_alignment_loss
from .lora import LoraAdapter, lora_apply
from .teacher import SaliencyMap, TeacherMapSet, make_split, synth_teacher
from .tensor import Tensor, grad_check
from .trainer import TrainConfig, TrainLog, Trainer, match_words, train
from .vlm import AttentionRecord, SamplePair, ToyVLM, VlmConfig, Vocab

__all__ = [
    "AggMode", "ParallelAttnParams", "aggregate",
    "AlignerConfig", "AlignerParams", "aligner_forward", "attention_alignment_loss",
    "LoraAdapter", "lora_apply",
    "SaliencyMap", "TeacherMapSet", "make_split", "synth_teacher",
    "Tensor", "grad_check",
    "TrainConfig", "TrainLog", "Trainer", "match_words", "train",
    "AttentionRecord", "SamplePair", "ToyVLM", "VlmConfig", "Vocab",
]

__version__ = "0.1.0"
