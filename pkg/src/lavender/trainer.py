"""Joint next-token + attention-alignment fine-tuning.

One step computes ``L_total = L_VLM + lambda * L_att``. ``L_att`` compares
Aligner-refined student maps with stored teacher maps for every answer word
that matches a teacher key. Training optionally starts with a phase in which
only the Aligner (and parallel attention) learn while the host stays frozen.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregation import AggMode, ParallelAttnParams, aggregate
from .aligner import AlignerConfig, AlignerParams, aligner_forward, attention_alignment_loss
from .lora import LoraAdapter
from .spatial import resize_to_standard, row_to_grid
from .teacher import TeacherMapSet
from .tensor import NonFiniteError, Tensor, add, getitem, scale
from .vlm import SamplePair, ToyVLM, accuracy, vlm_nll

__all__ = [
    "TrainConfig",
    "StepRecord",
    "EpochRecord",
    "TrainLog",
    "AdamW",
    "Trainer",
    "TrainResult",
    "match_words",
    "stem",
    "compute_losses",
    "train_step",
    "train",
    "read_config_file",
    "write_config_file",
]

SUFFIXES = ("ing", "es", "ed", "s")
MIN_STEM = 3


@dataclass
class TrainConfig:
    lam: float = 0.5
    lr: float = 3e-4
    epochs: int = 30
    batch: int = 8
    pretrain_epochs: int = 10
    ft_mode: str = "full"
    lora_rank: int = 4
    lora_alpha: float = 8.0
    match_mode: str = "exact"
    match_source: str = "label"
    agg_mode: AggMode = field(default_factory=AggMode)
    layer_subset: tuple[int, ...] | None = None
    aligner: str = "sim-conv"
    aligner_norm: str = "instance"
    aligner_expansion: int = 4
    aligner_gain: float = 1.5
    parallel_init: str = "copy"
    objective: str = "lavender"
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.agg_mode, str):
            self.agg_mode = AggMode.parse(self.agg_mode)
        if self.layer_subset is not None:
            self.layer_subset = tuple(sorted(int(i) for i in self.layer_subset))
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lr <= 0 or self.epochs < 1 or self.batch < 1:
            raise ValueError("lr, epochs and batch must be positive")
        if not 0 <= self.pretrain_epochs <= self.epochs:
            raise ValueError(f"pretrain_epochs={self.pretrain_epochs} must lie in [0, epochs={self.epochs}]")
        if self.ft_mode not in ("full", "lora"):
            raise ValueError(f"ft_mode must be full or lora, got {self.ft_mode!r}")
        if self.match_mode not in ("exact", "root"):
            raise ValueError(f"match_mode must be exact or root, got {self.match_mode!r}")
        if self.match_source not in ("label", "predicted"):
            raise ValueError(f"match_source must be label or predicted, got {self.match_source!r}")
        if self.objective not in ("lavender", "ar"):
            raise ValueError(f"objective must be lavender or ar, got {self.objective!r}")
        if self.parallel_init not in ("copy", "random"):
            raise ValueError(f"parallel_init must be copy or random, got {self.parallel_init!r}")
        if self.lora_rank < 1 or self.lora_alpha <= 0:
            raise ValueError("lora_rank and lora_alpha must be positive")
        self.aligner_config()

    def aligner_config(self) -> AlignerConfig:
        return AlignerConfig.parse(self.aligner, norm=self.aligner_norm, expansion=self.aligner_expansion)

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            key = "lambda" if f.name == "lam" else f.name
            if f.name == "agg_mode":
                val = val.label()
            elif f.name == "layer_subset":
                val = "all" if val is None else ",".join(str(i) for i in val)
            out[key] = str(val)
        return out


# -- word matching ------------------------------------------------------------------

def stem(word: str) -> str:
    """Strip the longest of -ing/-es/-ed/-s leaving at least three letters.

    A doubled final consonant left by -ing/-ed is undoubled
    (running -> runn -> run).
    """
    w = word.lower()
    for suf in sorted(SUFFIXES, key=len, reverse=True):
        if w.endswith(suf) and len(w) - len(suf) >= MIN_STEM:
            base = w[: -len(suf)]
            if suf in ("ing", "ed") and len(base) > MIN_STEM and base[-1] == base[-2] \
                    and base[-1] not in "aeioulsz":
                base = base[:-1]
            return base
    return w


def match_words(label_tokens: Sequence[str], teacher_keys, mode: str = "exact") -> list[tuple[int, str]]:
    """Pair token positions with teacher words; each teacher word used once, first wins."""
    if mode not in ("exact", "root"):
        raise ValueError(f"unknown match mode {mode!r}")
    key_of = (lambda w: w.lower()) if mode == "exact" else stem
    lookup: dict[str, str] = {}
    for k in teacher_keys:
        lookup.setdefault(key_of(k), k)
    used: set[str] = set()
    out = []
    for pos, tok in enumerate(label_tokens):
        hit = lookup.get(key_of(tok))
        if hit is not None and hit not in used:
            used.add(hit)
            out.append((pos, hit))
    return out


# -- optimizer --------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay on matrices."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, params: dict[str, Tensor], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v, t = self.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
            t += 1
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.state[name] = (m, v, t)
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            if self.wd and p.ndim >= 2:
                p.data -= (lr * self.wd) * p.data
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


# -- logs -------------------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    phase: str
    l_vlm: float
    l_att: float | None
    l_total: float
    n_matched: int


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    l_vlm: float
    l_att: float | None
    eval_acc: float | None
    train_acc: float | None = None
    aligned_entropy: float | None = None


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.steps and rec.step <= self.steps[-1].step:
            raise ValueError("step index must increase")
        self.steps.append(rec)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "l_vlm", "l_att", "l_total", "n_matched"])
            for r in self.steps:
                w.writerow([r.step, repr(r.l_vlm), "" if r.l_att is None else repr(r.l_att),
                            repr(r.l_total), r.n_matched])

    def write_epochs_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "phase", "l_vlm", "l_att", "eval_acc", "train_acc", "aligned_entropy"])
            for r in self.epochs:
                w.writerow([r.epoch, r.phase, repr(r.l_vlm), *("" if v is None else repr(v) for v in
                                                                (r.l_att, r.eval_acc, r.train_acc,
                                                                 r.aligned_entropy))])

    @staticmethod
    def read_csv(path: str) -> "TrainLog":
        log = TrainLog()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.steps.append(StepRecord(int(row["step"]), 0, "", float(row["l_vlm"]),
                                            float(row["l_att"]) if row["l_att"] else None,
                                            float(row["l_total"]), int(row["n_matched"])))
        return log

    @staticmethod
    def read_epochs_csv(path: str) -> list[EpochRecord]:
        def opt(v):
            return float(v) if v not in ("", None) else None

        with open(path, newline="") as fh:
            return [EpochRecord(int(r["epoch"]), r["phase"], float(r["l_vlm"]), opt(r["l_att"]),
                                opt(r["eval_acc"]), opt(r["train_acc"]), opt(r.get("aligned_entropy")))
                    for r in csv.DictReader(fh)]


# -- losses -------------------------------------------------------------------------------------

@dataclass
class LossParts:
    l_vlm: Tensor
    l_att: Tensor | None
    total: Tensor
    matches: list[tuple[int, int, str]]
    student: Tensor | None = None
    aligned: Tensor | None = None
    teacher: np.ndarray | None = None


def compute_losses(model: ToyVLM, batch: Sequence[tuple[SamplePair, TeacherMapSet]], cfg: TrainConfig,
                   aligner: AlignerParams | None = None, parallel: ParallelAttnParams | None = None,
                   training: bool = True, vocab=None) -> LossParts:
    samples = [s for s, _ in batch]
    logits, record = model.forward(samples)
    labels = np.array([s.label for s in samples], dtype=np.intp)
    l_vlm = vlm_nll(logits, labels)
    if cfg.objective == "ar":
        return LossParts(l_vlm, None, l_vlm, [])
    matches: list[tuple[int, int, str]] = []  # (batch index, label position, teacher word)
    for b, (sample, tset) in enumerate(batch):
        if cfg.match_source == "label":
            words = sample.label_words
        else:
            pred = [int(i) for i in logits.data[b].argmax(axis=-1)]
            if vocab is not None:
                words = [vocab.words[i] if i < len(vocab) else f"<{i}>" for i in pred]
            else:
                id_to_word = dict(zip(sample.question + sample.label, sample.text))
                words = [id_to_word.get(i, f"<{i}>") for i in pred]
        for pos, word in match_words(words, tset.keys(), cfg.match_mode):
            matches.append((b, pos, word))
    if not matches:
        return LossParts(l_vlm, None, l_vlm, [])
    agg = aggregate(record, cfg.agg_mode, parallel, cfg.layer_subset)  # [B, T, P]
    b_idx = np.array([m[0] for m in matches], dtype=np.intp)
    t_idx = np.array([samples[m[0]].label_positions()[m[1]] for m in matches], dtype=np.intp)
    rows = getitem(agg, (b_idx, t_idx))  # [M, P]
    student = resize_to_standard(row_to_grid(rows, model.config.patch_grid))
    aligned = aligner_forward(student, aligner, training=training)
    teacher = np.stack([batch[b][1][w].grid for b, _, w in matches]).astype(aligned.dtype)
    l_att = attention_alignment_loss(aligned, teacher, [w for _, _, w in matches])
    total = add(l_vlm, scale(l_att, cfg.lam))
    return LossParts(l_vlm, l_att, total, matches, student, aligned, teacher)


# -- training ---------------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ToyVLM
    aligner: AlignerParams | None
    parallel: ParallelAttnParams | None
    log: TrainLog


class Trainer:
    """Owns the mutable training state: model, Aligner, parallel attention, optimizer."""

    def __init__(self, model: ToyVLM, cfg: TrainConfig, aligner: AlignerParams | None = None,
                 parallel: ParallelAttnParams | None = None, steps_per_epoch: int = 1, vocab=None):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        s_align, s_par, s_lora, s_shuffle = ss.spawn(4)
        self.shuffle_rng = np.random.default_rng(s_shuffle)
        dtype = model.config.np_dtype
        recorded = model.config.recorded_layers
        if cfg.layer_subset is None and cfg.agg_mode.kind == "learned":
            self.layers = list(model.config.parallel_layers)
        else:
            self.layers = [l for l in recorded if cfg.layer_subset is None or l in cfg.layer_subset]
        if cfg.layer_subset is not None and not self.layers:
            raise ValueError(f"layer_subset {cfg.layer_subset} selects no recorded layer of {recorded}")
        self.aligner = aligner
        self.parallel = parallel
        if cfg.objective == "lavender":
            if self.aligner is None:
                self.aligner = AlignerParams.init(cfg.aligner_config(), np.random.default_rng(s_align), dtype,
                                                  path_gain=cfg.aligner_gain)
            if cfg.agg_mode.kind == "learned" and self.parallel is None:
                self.parallel = ParallelAttnParams.init(model, self.layers, np.random.default_rng(s_par),
                                                        copy_host=cfg.parallel_init == "copy")
        if cfg.ft_mode == "lora":
            lrng = np.random.default_rng(s_lora)
            lora_layers = self.layers if cfg.layer_subset is not None else range(model.config.n_layers)
            for name in model.attention_weight_names(lora_layers):
                if name not in model.adapters:
                    model.adapters[name] = LoraAdapter.init(model.params[name].shape, cfg.lora_rank,
                                                            cfg.lora_alpha, lrng, dtype, name)
        self.opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = max(1, cfg.epochs * steps_per_epoch)
        self.step_index = 0
        self.epoch = 0
        self.log = TrainLog()

    # parameter groups
    def alignment_parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.aligner is not None:
            out.update(self.aligner.parameters())
        if self.parallel is not None:
            out.update({k: v for k, v in self.parallel.parameters().items()
                        if int(k.split(".")[1]) in self.layers})
        return out

    def host_parameters(self) -> dict[str, Tensor]:
        if self.cfg.ft_mode == "lora":
            return {k: v for k, v in self.model.all_parameters().items() if k.startswith("lora.")}
        return dict(self.model.params)

    def active_parameters(self, phase: str) -> dict[str, Tensor]:
        out = {} if phase == "pretrain" else self.host_parameters()
        if self.cfg.objective == "lavender":
            out.update(self.alignment_parameters())
        return out

    def phase_for(self, epoch: int) -> str:
        return "pretrain" if epoch < self.cfg.pretrain_epochs and self.cfg.objective == "lavender" else "joint"

    def _set_trainable(self, active: dict[str, Tensor]) -> None:
        every = dict(self.model.all_parameters())
        every.update(self.alignment_parameters())
        if self.parallel is not None:
            every.update(self.parallel.parameters())
        active_ids = {id(t) for t in active.values()}
        for t in every.values():
            t.requires_grad = id(t) in active_ids
            t.grad = None

    def lr_at(self, step: int) -> float:
        warm = max(1, int(math.ceil(self.cfg.warmup_frac * self.total_steps)))
        return self.cfg.lr * min(1.0, (step + 1) / warm)

    def train_step(self, batch: Sequence[tuple[SamplePair, TeacherMapSet]], phase: str | None = None) -> StepRecord:
        phase = self.phase_for(self.epoch) if phase is None else phase
        active = self.active_parameters(phase)
        self._set_trainable(active)
        try:
            parts = compute_losses(self.model, batch, self.cfg, self.aligner, self.parallel, training=True,
                                   vocab=self.vocab)
        except NonFiniteError as exc:
            raise NonFiniteError(f"step {self.step_index} (epoch {self.epoch}, {phase}): {exc}") from exc
        l_vlm = parts.l_vlm.item()
        l_att = None if parts.l_att is None else parts.l_att.item()
        l_total = parts.total.item()
        if not all(np.isfinite(v) for v in (l_vlm, l_total) + (() if l_att is None else (l_att,))):
            raise NonFiniteError(f"non-finite loss at step {self.step_index} (epoch {self.epoch}, {phase})")
        if parts.total.requires_grad:
            parts.total.backward()
        if phase == "pretrain":
            for name, p in self.model.all_parameters().items():
                assert p.grad is None, f"frozen parameter {name} received a gradient"
        self.opt.step(active, self.lr_at(self.step_index))
        rec = StepRecord(self.step_index, self.epoch, phase, l_vlm, l_att, l_total, len(parts.matches))
        self.log.append(rec)
        self.step_index += 1
        return rec

    def run_epoch(self, data: Sequence[tuple[SamplePair, TeacherMapSet]]) -> list[StepRecord]:
        order = self.shuffle_rng.permutation(len(data))
        phase = self.phase_for(self.epoch)
        recs = [self.train_step([data[i] for i in order[s:s + self.cfg.batch]], phase)
                for s in range(0, len(data), self.cfg.batch)]
        self.epoch += 1
        return recs

    def evaluate(self, data) -> float:
        return accuracy(self.model, [s for s, _ in data])

    def train(self, data, eval_data=None, track_train_acc: bool = False,
              track_entropy: bool = False) -> TrainResult:
        if not data:
            raise ValueError("empty dataset")
        while self.epoch < self.cfg.epochs:
            phase = self.phase_for(self.epoch)
            recs = self.run_epoch(data)
            atts = [r.l_att for r in recs if r.l_att is not None]
            ent = None
            if track_entropy and self.cfg.objective == "lavender":
                from .analysis import mean_aligned_entropy

                ent = mean_aligned_entropy(self.model, data, self.cfg, self.aligner, self.parallel)
            self.log.epochs.append(EpochRecord(
                epoch=self.epoch, phase=phase,
                l_vlm=float(np.mean([r.l_vlm for r in recs])),
                l_att=float(np.mean(atts)) if atts else None,
                eval_acc=self.evaluate(eval_data) if eval_data else None,
                train_acc=self.evaluate(data) if track_train_acc else None,
                aligned_entropy=ent,
            ))
        self._set_trainable({})
        return TrainResult(self.model, self.aligner, self.parallel, self.log)


def train_step(trainer: Trainer, batch) -> StepRecord:
    return trainer.train_step(batch)


def train(model: ToyVLM, dataset, cfg: TrainConfig, eval_data=None, aligner: AlignerParams | None = None,
          parallel: ParallelAttnParams | None = None, vocab=None, **kw) -> TrainResult:
    """Run both phases over ``dataset`` (pairs of sample and teacher maps)."""
    if not dataset:
        raise ValueError("empty dataset")
    steps = math.ceil(len(dataset) / cfg.batch)
    trainer = Trainer(model, cfg, aligner, parallel, steps_per_epoch=steps, vocab=vocab)
    return trainer.train(dataset, eval_data, **kw)


# -- flat key=value configs -----------------------------------------------------------------

_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")


def read_config_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0]
            if not line.strip():
                continue
            m = _LINE.match(line)
            if not m:
                raise ValueError(f"{path}:{n}: expected key=value, got {line.strip()!r}")
            out[m.group(1)] = m.group(2)
    return out


def write_config_file(path: str, values: dict[str, str]) -> None:
    with open(path, "w") as fh:
        for k in sorted(values):
            fh.write(f"{k}={values[k]}\n")


def train_config_from(values: dict[str, str]) -> TrainConfig:
    """Build a TrainConfig from string values; unknown keys raise."""
    kwargs = {}
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for key, raw in values.items():
        name = "lam" if key == "lambda" else key
        if name not in types:
            raise KeyError(f"unknown TrainConfig key {key!r}")
        if name == "agg_mode":
            kwargs[name] = AggMode.parse(raw)
        elif name == "layer_subset":
            kwargs[name] = None if raw.strip().lower() in ("", "all", "none") else \
                tuple(int(x) for x in raw.split(","))
        elif name in ("lam", "lr", "lora_alpha", "weight_decay", "warmup_frac", "aligner_gain"):
            kwargs[name] = float(raw)
        elif name in ("epochs", "batch", "pretrain_epochs", "lora_rank", "aligner_expansion", "seed"):
            kwargs[name] = int(raw)
        else:
            kwargs[name] = raw.strip()
    return TrainConfig(**kwargs)
