"""Collapse layer x head attention into one patch distribution per text token."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .spatial import extract_text_to_patch, renormalize_rows
from .tensor import Tensor, add, amax, mean, mul, parameter, stack
from .vlm import AttentionRecord, attention_weights

__all__ = [
    "AggMode",
    "ParallelAttnParams",
    "aggregate_simple",
    "attention_flow",
    "parallel_attention_maps",
    "parallel_attention",
    "normalized_layers",
    "aggregate",
]

_REDUCERS = {"mean", "max"}


@dataclass(frozen=True)
class AggMode:
    """Which aggregation family to use.

    ``simple`` reduces heads with ``head_op`` then layers with ``layer_op``;
    ``flow`` folds head-mean layer maps by ``combine``; ``learned`` uses
    parallel attention projections.
    """

    kind: str = "learned"
    layer_op: str = "mean"
    head_op: str = "mean"
    combine: str = "multiply"
    regularize: bool = True

    def __post_init__(self):
        if self.kind not in ("simple", "flow", "learned"):
            raise ValueError(f"unknown aggregation kind {self.kind!r}")
        if self.layer_op not in _REDUCERS or self.head_op not in _REDUCERS:
            raise ValueError(f"reducers must be mean/max, got {self.layer_op}/{self.head_op}")
        if self.combine not in ("multiply", "add"):
            raise ValueError(f"flow combine must be multiply/add, got {self.combine!r}")

    @classmethod
    def parse(cls, text: str) -> "AggMode":
        """Accepts ``mean-mean|mean-max|max-mean|max-max|flow-mul|flow-add|learn``.

        For the pooling names the first word is the layer reducer and the
        second the head reducer. ``flow-*`` may carry a ``-noreg`` suffix.
        """
        text = text.strip().lower()
        if text in ("learn", "learned"):
            return cls("learned")
        if text.startswith("flow-"):
            parts = text.split("-")
            combine = {"mul": "multiply", "multiply": "multiply", "add": "add"}.get(parts[1])
            if combine is None or len(parts) > 3 or (len(parts) == 3 and parts[2] != "noreg"):
                raise ValueError(f"bad flow aggregation {text!r}")
            return cls("flow", combine=combine, regularize=len(parts) == 2)
        parts = text.split("-")
        if len(parts) == 2 and set(parts) <= _REDUCERS:
            return cls("simple", layer_op=parts[0], head_op=parts[1])
        raise ValueError(f"unknown aggregation {text!r}")

    def label(self) -> str:
        if self.kind == "learned":
            return "learn"
        if self.kind == "flow":
            return f"flow-{'mul' if self.combine == 'multiply' else 'add'}" + ("" if self.regularize else "-noreg")
        return f"{self.layer_op}-{self.head_op}"


def _reduce(x: Tensor, op: str, axis: int) -> Tensor:
    return mean(x, axis=axis) if op == "mean" else amax(x, axis=axis)


def _layers(record) -> list[Tensor]:
    layers = record.layers if isinstance(record, AttentionRecord) else list(record)
    if not layers:
        raise ValueError("empty attention record")
    return [t if isinstance(t, Tensor) else Tensor(np.asarray(t)) for t in layers]


def normalized_layers(record: AttentionRecord) -> AttentionRecord:
    """Per-layer text-to-patch maps whose rows sum to one.

    Cross-variant records already satisfy this; self-variant rows are
    extracted from the full matrices with the causal mask applied.
    """
    if record.variant == "cross" or record.full is None:
        return record
    layers = [extract_text_to_patch(w, record.index_map, mask_aware=True) for w in record.full]
    return AttentionRecord(layers=layers, layer_ids=list(record.layer_ids), variant=record.variant,
                           hidden=record.hidden, full=record.full, index_map=record.index_map)


def aggregate_simple(record, mode: AggMode | str = "mean-mean") -> Tensor:
    """Pool ``[..., H, T, P]`` layer maps: heads first, then layers; rows renormalized."""
    mode = AggMode.parse(mode) if isinstance(mode, str) else mode
    stacked = stack(_layers(record), axis=-4)  # [..., L, H, T, P]
    per_layer = _reduce(stacked, mode.head_op, axis=-3)
    pooled = _reduce(per_layer, mode.layer_op, axis=-3)
    return renormalize_rows(pooled)[0]


def attention_flow(record, combine: str = "multiply", regularize: bool = True,
                   renormalize: bool = True) -> Tensor:
    """Layer-recursive fold of head-mean maps, ``A <- A * A_l`` or ``A <- A + A_l``.

    With ``regularize`` row ``t`` (1-indexed) is scaled by ``t / N_text``.
    Rows are renormalized only after the last fold; pass
    ``renormalize=False`` to get the raw folded map. Row renormalization
    cancels any per-row scale, so the regularization only shows in the raw map.
    """
    if combine not in ("multiply", "add"):
        raise ValueError(f"combine must be multiply or add, got {combine!r}")
    maps = [mean(layer, axis=-3) for layer in _layers(record)]
    acc = maps[0]
    for nxt in maps[1:]:
        acc = mul(acc, nxt) if combine == "multiply" else add(acc, nxt)
    if regularize:
        n_text = acc.shape[-2]
        r = (np.arange(1, n_text + 1, dtype=acc.dtype) / n_text)[:, None]
        acc = mul(acc, Tensor(r))
    if not renormalize:
        return acc
    return renormalize_rows(acc)[0]


@dataclass
class ParallelAttnParams:
    """Extra query/key projections per selected layer, trained only by alignment."""

    wq: dict[int, Tensor]
    wk: dict[int, Tensor]
    n_heads: int

    @property
    def selected_layers(self) -> list[int]:
        return sorted(self.wq)

    @classmethod
    def init(cls, model, layers: Sequence[int], seed: int | np.random.Generator = 0,
             copy_host: bool = False) -> "ParallelAttnParams":
        """Fresh projections for ``layers`` with the host's shapes.

        ``copy_host`` starts them as copies of the host's effective query/key
        weights so the parallel attention initially reproduces the host's.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        cfg = model.config
        recorded = set(cfg.recorded_layers)
        kind = "cross" if cfg.variant == "cross" else "self"
        wq, wk = {}, {}
        for layer in layers:
            if layer not in recorded:
                raise ValueError(f"layer {layer} does not record text-to-patch attention")
            for store, proj in ((wq, "q"), (wk, "k")):
                host = model.weight(f"layers.{layer}.{kind}.{proj}")
                if copy_host:
                    init = host.data.copy()
                else:
                    init = rng.normal(0.0, 1.0 / math.sqrt(host.shape[0]), size=host.shape).astype(host.dtype)
                store[layer] = parameter(init, name=f"parallel.{layer}.{proj}")
        return cls(wq, wk, cfg.n_heads)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.selected_layers:
            out[f"parallel.{layer}.q"] = self.wq[layer]
            out[f"parallel.{layer}.k"] = self.wk[layer]
        return out


def parallel_attention_maps(hidden: dict[int, tuple[Tensor, Tensor]], params: ParallelAttnParams,
                            layers: Sequence[int] | None = None) -> dict[int, Tensor]:
    """``A_d = softmax(Q_d K_d^T / sqrt(d_k))`` per layer, ``[B, H, T, P]``.

    ``hidden[layer]`` is the (text, patch) pair fed to the host's query/key
    projections. The host projections are never touched here.
    """
    layers = params.selected_layers if layers is None else list(layers)
    out = {}
    for layer in layers:
        if layer not in params.wq:
            raise ValueError(f"layer {layer} is not in the parallel-attention set {params.selected_layers}")
        if layer not in hidden:
            raise ValueError(f"no hidden states captured for layer {layer}")
        h_text, h_patch = hidden[layer]
        out[layer] = attention_weights(h_text, h_patch, params.wq[layer], params.wk[layer], params.n_heads)
    return out


def parallel_attention(hidden: dict[int, tuple[Tensor, Tensor]], params: ParallelAttnParams,
                       layers: Sequence[int] | None = None) -> Tensor:
    """Mean over heads and selected layers of the parallel maps, ``[B, T, P]``."""
    maps = parallel_attention_maps(hidden, params, layers)
    per_layer = [mean(m, axis=-3) for m in maps.values()]
    acc = per_layer[0] if len(per_layer) == 1 else mean(stack(per_layer, axis=0), axis=0)
    return renormalize_rows(acc)[0]


def aggregate(record: AttentionRecord, mode: AggMode, parallel: ParallelAttnParams | None = None,
              layers: Sequence[int] | None = None) -> Tensor:
    """Dispatch on ``mode.kind``; ``layers`` restricts which recorded layers count."""
    if mode.kind == "learned":
        if parallel is None:
            raise ValueError("learned aggregation needs ParallelAttnParams")
        use = parallel.selected_layers if layers is None else [l for l in layers if l in parallel.wq]
        if not use:
            raise ValueError(f"no parallel-attention layer among {layers}")
        return parallel_attention(record.hidden, parallel, use)
    rec = normalized_layers(record.subset(layers))
    if mode.kind == "simple":
        return aggregate_simple(rec, mode)
    return attention_flow(rec, mode.combine, mode.regularize)
