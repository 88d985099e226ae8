"""The colour-grid reference experiment: alignment training versus next-token-only baselines."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .teacher import make_split, task_vocab
from .trainer import TrainConfig, TrainResult, Trainer
from .vlm import ToyVLM, VlmConfig, accuracy

__all__ = ["model_seed", "init_model", "RunSummary", "run_once", "reference_runs"]


def model_seed(seed: int) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def init_model(vocab_size: int, seed: int, **vlm) -> ToyVLM:
    return ToyVLM.init(VlmConfig(vocab_size=vocab_size, **vlm), model_seed(seed))


@dataclass
class RunSummary:
    name: str
    seed: int
    heldout_acc: float
    epoch_l_att: list[float | None]
    epoch_acc: list[float | None]
    aligned_entropy_start: float | None = None
    aligned_entropy_end: float | None = None
    student_entropy_start: float | None = None
    teacher_entropy: float | None = None
    l_att_start: float | None = None
    l_att_end: float | None = None
    seconds: float = 0.0
    result: TrainResult | None = field(default=None, repr=False)


def _l_att_on(model, data, cfg, aligner, parallel) -> float:
    maps = analysis.student_maps(model, data, cfg, aligner, parallel)
    return float(np.mean([((a - t) ** 2).sum() for _, _, _, a, t in maps]))


def run_once(name: str, cfg: TrainConfig, train_set, test_set, vocab_size: int, measure: bool = False,
             **vlm) -> RunSummary:
    """Train a fresh model under ``cfg``; ``measure`` adds entropy and L_att at start and end."""
    t0 = time.perf_counter()
    model = init_model(vocab_size, cfg.seed, **vlm)
    trainer = Trainer(model, cfg, steps_per_epoch=math.ceil(len(train_set) / cfg.batch))
    extra = {}
    if measure and cfg.objective == "lavender":
        maps = analysis.student_maps(model, train_set, cfg, trainer.aligner, trainer.parallel)
        extra["aligned_entropy_start"] = float(np.mean([analysis.map_entropy(m[3]) for m in maps]))
        extra["student_entropy_start"] = float(np.mean([analysis.map_entropy(m[2]) for m in maps]))
        extra["teacher_entropy"] = float(np.mean([analysis.map_entropy(m[4]) for m in maps]))
        extra["l_att_start"] = float(np.mean([((a - t) ** 2).sum() for _, _, _, a, t in maps]))
    result = trainer.train(train_set, test_set)
    if measure and cfg.objective == "lavender":
        maps = analysis.student_maps(model, train_set, cfg, result.aligner, result.parallel)
        extra["aligned_entropy_end"] = float(np.mean([analysis.map_entropy(m[3]) for m in maps]))
        extra["l_att_end"] = float(np.mean([((a - t) ** 2).sum() for _, _, _, a, t in maps]))
    return RunSummary(
        name=name, seed=cfg.seed,
        heldout_acc=accuracy(model, [s for s, _ in test_set]),
        epoch_l_att=[e.l_att for e in result.log.epochs],
        epoch_acc=[e.eval_acc for e in result.log.epochs],
        seconds=time.perf_counter() - t0, result=result, **extra)


def reference_runs(seeds=(0, 1, 2), epochs: int = 30, n_train: int = 500, n_test: int = 200,
                   data_seed: int = 0, variants=("lavender", "lambda0", "ar", "no-pretrain"),
                   **overrides) -> dict[str, list[RunSummary]]:
    """Default-config alignment training plus baselines, per seed.

    ``lavender``: lambda 0.5 with ceil(epochs/3) aligner-pretraining epochs.
    ``lambda0``: the same schedule with lambda 0. ``ar``: next-token loss
    only, every epoch updating the host. ``no-pretrain``: lambda 0.5 without
    the pretraining phase.
    """
    vocab = task_vocab()
    train_set, test_set = make_split(n_train, n_test, seed=data_seed)
    pre = math.ceil(epochs / 3)
    base = dict(epochs=epochs, pretrain_epochs=pre, **overrides)
    specs = {
        "lavender": dict(base),
        "lambda0": {**base, "lam": 0.0},
        "ar": {**base, "objective": "ar", "pretrain_epochs": 0},
        "no-pretrain": {**base, "pretrain_epochs": 0},
    }
    out: dict[str, list[RunSummary]] = {v: [] for v in variants}
    for seed in seeds:
        for v in variants:
            cfg = TrainConfig(seed=seed, **specs[v])
            out[v].append(run_once(v, cfg, train_set, test_set, len(vocab), measure=v == "lavender"))
    return out
