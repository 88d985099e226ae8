"""Aligner network: maps aggregated student attention onto teacher-comparable maps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (NonFiniteError, ShapeError, Tensor, add, batch_norm, conv2d, instance_norm, matmul,
                     parameter, reshape, scale, silu, softmax, squared_error)

__all__ = [
    "DEPTHS",
    "AlignerConfig",
    "AlignerParams",
    "aligner_forward",
    "attention_alignment_loss",
]

DEPTHS = {"light": 1, "sim": 2, "deep": 4}
MAP_SIZE = (32, 32)
_BN_MOMENTUM = 0.1


@dataclass
class AlignerConfig:
    depth: int = 2
    kind: str = "conv"
    norm: str = "instance"
    expansion: int = 4
    mlp_width: int = 64

    def __post_init__(self):
        if isinstance(self.depth, str):
            self.depth = DEPTHS[self.depth]
        if self.depth not in (1, 2, 4):
            raise ValueError(f"aligner depth must be 1, 2 or 4, got {self.depth}")
        if self.kind not in ("conv", "mlp"):
            raise ValueError(f"aligner kind must be conv or mlp, got {self.kind!r}")
        if self.norm not in ("instance", "batch", "none"):
            raise ValueError(f"aligner norm must be instance, batch or none, got {self.norm!r}")
        if self.expansion < 1:
            raise ValueError("aligner expansion must be >= 1")

    @classmethod
    def parse(cls, text: str, **kw) -> "AlignerConfig":
        """``"sim-conv"`` style names: depth name then kind."""
        depth, _, kind = text.strip().lower().partition("-")
        if depth not in DEPTHS or kind not in ("conv", "mlp"):
            raise ValueError(f"bad aligner name {text!r}; expected light|sim|deep - conv|mlp")
        return cls(depth=DEPTHS[depth], kind=kind, **kw)

    @property
    def name(self) -> str:
        inv = {v: k for k, v in DEPTHS.items()}
        return f"{inv[self.depth]}-{self.kind}"

    @property
    def width(self) -> int:
        """Hidden channels (conv) or hidden units (mlp)."""
        return self.expansion if self.kind == "conv" else self.expansion * self.mlp_width

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AlignerParams:
    config: AlignerConfig
    weights: dict[str, Tensor]
    running: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: AlignerConfig, seed: int | np.random.Generator = 0, dtype=np.float32,
             identity_path: bool = True, path_gain: float = 1.0) -> "AlignerParams":
        """Random weights; conv aligners also get a pass-through in channel 0.

        The pass-through (centre tap 1 from channel 0 of the previous block,
        projection weight 1) makes the untrained aligner a sharpening of its
        input instead of a random map, so the alignment loss has a useful
        gradient from the first step. ``path_gain`` sets that channel's norm gain.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        w: dict[str, np.ndarray] = {}
        running: dict[str, np.ndarray] = {}
        c = config.width
        if config.kind == "conv":
            cin = 1
            for i in range(config.depth):
                std = math.sqrt(2.0 / (cin * 9))
                w[f"block{i}.w"] = rng.normal(0.0, std, size=(c, cin, 3, 3))
                w[f"block{i}.b"] = np.zeros(c)
                cin = c
            w["proj.w"] = rng.normal(0.0, math.sqrt(1.0 / c), size=(1, c, 1, 1))
            w["proj.b"] = np.zeros(1)
            if identity_path:
                for i in range(config.depth):
                    blk = w[f"block{i}.w"]
                    blk[0] = 0.0
                    blk[1:, 0] *= 0.1
                    blk[0, 0, 1, 1] = 1.0
                w["proj.w"] *= 0.1
                w["proj.w"][0, 0] = 1.0
        else:
            n_in = MAP_SIZE[0] * MAP_SIZE[1]
            for i in range(config.depth):
                w[f"block{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, c))
                w[f"block{i}.b"] = np.zeros(c)
                n_in = c
            w["proj.w"] = rng.normal(0.0, math.sqrt(1.0 / c), size=(c, MAP_SIZE[0] * MAP_SIZE[1]))
            w["proj.b"] = np.zeros(MAP_SIZE[0] * MAP_SIZE[1])
        if config.norm != "none":
            for i in range(config.depth):
                w[f"block{i}.gain"] = np.ones(c)
                if identity_path and config.kind == "conv":
                    w[f"block{i}.gain"][0] = path_gain
                w[f"block{i}.shift"] = np.zeros(c)
                if config.norm == "batch":
                    running[f"block{i}.mean"] = np.zeros(c)
                    running[f"block{i}.var"] = np.ones(c)
        weights = {k: parameter(v.astype(dtype), name=f"aligner.{k}") for k, v in w.items()}
        return cls(config, weights, {k: v.astype(dtype) for k, v in running.items()})

    @classmethod
    def identity(cls, config: AlignerConfig, gain: float = 1.0, dtype=np.float64) -> "AlignerParams":
        """Single-channel pass-through: centre tap ``gain``, all else zero, no norm."""
        if config.kind != "conv" or config.norm != "none":
            raise ValueError("identity init needs a conv aligner without normalization")
        params = cls.init(config, 0, dtype, identity_path=False)
        for name, t in params.weights.items():
            t.data[...] = 0.0
        for i in range(config.depth):
            params.weights[f"block{i}.w"].data[0, 0, 1, 1] = gain
        params.weights["proj.w"].data[0, 0, 0, 0] = 1.0
        return params

    def zero(self) -> None:
        for t in self.weights.values():
            t.data[...] = 0.0

    def parameters(self) -> dict[str, Tensor]:
        return {f"aligner.{k}": v for k, v in self.weights.items()}


def _norm(x: Tensor, params: AlignerParams, i: int, training: bool) -> Tensor:
    cfg = params.config
    if cfg.norm == "none":
        return x
    conv = x.ndim == 4
    if cfg.norm == "instance":
        if conv:
            y = instance_norm(x)
        else:
            y = instance_norm(reshape(x, (x.shape[0], 1, 1, x.shape[1])))
    else:
        x4 = x if conv else reshape(x, (x.shape[0], x.shape[1], 1, 1))
        if training:
            y = batch_norm(x4)
            axes = (0, 2, 3)
            params.running[f"block{i}.mean"] *= 1 - _BN_MOMENTUM
            params.running[f"block{i}.mean"] += _BN_MOMENTUM * x4.data.mean(axis=axes)
            params.running[f"block{i}.var"] *= 1 - _BN_MOMENTUM
            params.running[f"block{i}.var"] += _BN_MOMENTUM * x4.data.var(axis=axes)
        else:
            y = batch_norm(x4, running=(params.running[f"block{i}.mean"], params.running[f"block{i}.var"]))
    y = reshape(y, x.shape)
    shape = (1, -1, 1, 1) if conv else (1, -1)
    g = reshape(params.weights[f"block{i}.gain"], shape)
    b = reshape(params.weights[f"block{i}.shift"], shape)
    return add(y * g, b)


def aligner_forward(A_in, params: AlignerParams, training: bool = True) -> Tensor:
    """``[n_words, 32, 32]`` unit-mass maps -> refined unit-mass maps.

    Inputs are scaled by the cell count so a uniform map has value 1 per cell.
    Each hidden block is (conv3x3 | linear) -> norm -> SiLU; a final
    projection gives one logit per cell and a softmax over the 1024 cells
    turns it back into a distribution.
    """
    A_in = A_in if isinstance(A_in, Tensor) else Tensor(np.asarray(A_in))
    if A_in.ndim != 3 or A_in.shape[1:] != MAP_SIZE:
        raise ShapeError(f"aligner_forward: expected [n, 32, 32], got {A_in.shape}")
    cfg = params.config
    w = params.weights
    n = A_in.shape[0]
    cells = MAP_SIZE[0] * MAP_SIZE[1]
    x = scale(A_in, float(cells))
    if cfg.kind == "conv":
        x = reshape(x, (n, 1, *MAP_SIZE))
        for i in range(cfg.depth):
            x = silu(_norm(conv2d(x, w[f"block{i}.w"], w[f"block{i}.b"]), params, i, training))
        logits = conv2d(x, w["proj.w"], w["proj.b"])
    else:
        x = reshape(x, (n, cells))
        for i in range(cfg.depth):
            x = silu(_norm(add(matmul(x, w[f"block{i}.w"]), w[f"block{i}.b"]), params, i, training))
        logits = add(matmul(x, w["proj.w"]), w["proj.b"])
    probs = softmax(reshape(logits, (n, cells)))
    return reshape(probs, (n, *MAP_SIZE))


def attention_alignment_loss(student_maps, teacher_maps, matched_words=None) -> Tensor | None:
    """Mean over matched words of the summed squared map difference.

    Returns ``None`` when nothing matched so the caller can skip the term.
    ``matched_words`` (optional) must have one entry per map pair.
    """
    student = student_maps if isinstance(student_maps, Tensor) else Tensor(np.asarray(student_maps))
    teacher = teacher_maps if isinstance(teacher_maps, Tensor) else Tensor(np.asarray(teacher_maps))
    if student.size == 0 or (matched_words is not None and len(matched_words) == 0):
        return None
    if matched_words is not None and len(matched_words) != (student.shape[0] if student.ndim == 3 else 1):
        raise ShapeError("attention_alignment_loss: matched_words count differs from map count")
    if np.isnan(student.data).any() or np.isnan(teacher.data).any():
        raise NonFiniteError("attention_alignment_loss: NaN in maps")
    teacher = Tensor(teacher.data.astype(student.dtype, copy=False), requires_grad=False) \
        if not teacher.requires_grad else teacher
    if student.shape != teacher.shape:
        raise ShapeError(f"attention_alignment_loss: shapes differ {student.shape} vs {teacher.shape}")
    n_words = student.shape[0] if student.ndim == 3 else 1
    return scale(squared_error(student, teacher), 1.0 / n_words)
