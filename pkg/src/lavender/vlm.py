"""A small vision-language transformer that exposes its text-to-patch attention.

Two variants share the same parameter naming scheme:

* ``cross``: text tokens run through causal self-attention blocks and attend
  to patch tokens in dedicated cross-attention layers.
* ``self``: patch and text tokens form one sequence ``[patches || text]``;
  patches see each other, text sees every patch and earlier text.

The image encoder is a linear projection of raw patch colours plus learned
positional embeddings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .lora import LoraAdapter, lora_apply
from .spatial import TokenIndexMap, causal_mask
from .tensor import (MASK_VALUE, ShapeError, Tensor, add, concat, gelu, getitem, layer_norm, matmul,
                     nll_loss, parameter, reshape, scale, softmax, take_rows, transpose)

__all__ = [
    "VlmConfig",
    "Vocab",
    "SamplePair",
    "AttentionRecord",
    "ToyVLM",
    "scaled_dot_attention",
    "vlm_nll",
    "greedy_decode",
    "accuracy",
]

ATTN_PROJ = ("q", "k", "v", "o")


@dataclass
class VlmConfig:
    variant: str = "cross"
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    cross_layer_indices: tuple[int, ...] = (1, 3)
    vocab_size: int = 32
    patch_grid: tuple[int, int] = (4, 4)
    max_text_len: int = 16
    patch_dim: int = 3
    mlp_ratio: int = 4
    zero_head: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.cross_layer_indices = tuple(int(i) for i in self.cross_layer_indices)
        self.patch_grid = tuple(int(i) for i in self.patch_grid)
        if self.variant not in ("cross", "self"):
            raise ValueError(f"variant must be 'cross' or 'self', got {self.variant!r}")
        for name in ("d_model", "n_heads", "n_layers", "vocab_size", "max_text_len", "patch_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.variant == "cross" and any(not 0 <= i < self.n_layers for i in self.cross_layer_indices):
            raise ValueError(f"cross_layer_indices {self.cross_layer_indices} outside [0, {self.n_layers})")
        if len(self.patch_grid) != 2 or min(self.patch_grid) < 1:
            raise ValueError(f"patch_grid must be two positive ints, got {self.patch_grid}")

    @property
    def n_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def recorded_layers(self) -> tuple[int, ...]:
        """Layers whose text-to-patch attention is captured."""
        if self.variant == "cross":
            return tuple(sorted(self.cross_layer_indices))
        return tuple(range(self.n_layers))

    @property
    def parallel_layers(self) -> tuple[int, ...]:
        """Default layers for learned aggregation: cross layers, or every ceil(L/5)-th layer."""
        if self.variant == "cross":
            return self.recorded_layers
        step = -(-self.n_layers // 5)
        return tuple(range(step - 1, self.n_layers, step))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


class Vocab:
    """Whitespace word <-> id map. Lookup keys are lower-cased."""

    def __init__(self, words: Sequence[str]):
        self.words = [w.lower() for w in words]
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be unique")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.index

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w.lower()] for w in words]
        except KeyError as exc:
            raise KeyError(f"word {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]


@dataclass
class SamplePair:
    """One image/question/answer example.

    ``patches`` holds raw per-patch colour features ``[n_patch, patch_dim]``.
    ``text`` is the combined question+answer word list used for teacher lookup.
    """

    sample_id: str
    patches: np.ndarray
    question: list[int]
    label: list[int]
    text: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.label:
            raise ValueError(f"sample {self.sample_id}: label must be non-empty")

    @property
    def label_words(self) -> list[str]:
        n = len(self.label)
        return self.text[-n:]

    def text_ids(self) -> list[int]:
        """Teacher-forced input: question followed by all but the last label token."""
        return list(self.question) + list(self.label[:-1])

    def label_positions(self) -> list[int]:
        """Input positions whose next-token prediction is each label token."""
        n_q = len(self.question)
        return [n_q - 1 + i for i in range(len(self.label))]


@dataclass
class AttentionRecord:
    """Captured attention from one forward pass.

    ``layers[i]`` holds raw text-to-patch weights ``[B, H, T, P]`` for layer
    ``layer_ids[i]``. Cross-variant rows sum to one over patches. Self-variant
    rows are sub-rows of a softmax over the whole sequence and are not
    normalized; ``full`` keeps the complete ``[B, H, S, S]`` matrices and
    ``index_map`` says where text and patches sit. ``hidden[layer]`` keeps the
    (text, patch) inputs of the query/key projections for parallel attention.
    """

    layers: list[Tensor]
    layer_ids: list[int]
    variant: str
    hidden: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)
    full: list[Tensor] | None = None
    index_map: TokenIndexMap | None = None

    @property
    def weights(self) -> np.ndarray:
        """``[B, L, H, T, P]`` (or ``[L, H, T, P]`` for unbatched layers) as numpy."""
        return np.stack([t.data for t in self.layers], axis=-4)

    @classmethod
    def from_array(cls, weights: np.ndarray, layer_ids: Sequence[int] | None = None,
                   variant: str = "cross", requires_grad: bool = False) -> "AttentionRecord":
        """Wrap an ``[..., L, H, T, P]`` array (one Tensor per layer)."""
        weights = np.asarray(weights)
        n_layers = weights.shape[-4]
        layers = [Tensor(np.take(weights, i, axis=-4).copy(), requires_grad=requires_grad)
                  for i in range(n_layers)]
        ids = list(range(n_layers)) if layer_ids is None else list(layer_ids)
        return cls(layers=layers, layer_ids=ids, variant=variant)

    def subset(self, layer_ids: Sequence[int] | None) -> "AttentionRecord":
        if layer_ids is None:
            return self
        keep = [i for i, lid in enumerate(self.layer_ids) if lid in set(layer_ids)]
        if not keep:
            raise ValueError(f"no recorded layer among {list(layer_ids)}; recorded {self.layer_ids}")
        return AttentionRecord(
            layers=[self.layers[i] for i in keep],
            layer_ids=[self.layer_ids[i] for i in keep],
            variant=self.variant,
            hidden={lid: h for lid, h in self.hidden.items() if lid in set(layer_ids)},
            full=None if self.full is None else [self.full[i] for i in keep],
            index_map=self.index_map,
        )


def scaled_dot_attention(Q, K, V, mask: np.ndarray | None = None,
                         record: list | None = None) -> tuple[Tensor, Tensor]:
    """``softmax(Q K^T / sqrt(d_k) + mask) V`` over the last two axes.

    Returns ``(out, weights)``; ``weights`` is appended to ``record`` if given.
    """
    Q = Q if isinstance(Q, Tensor) else Tensor(Q)
    K = K if isinstance(K, Tensor) else Tensor(K)
    V = V if isinstance(V, Tensor) else Tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"scaled_dot_attention: key dim mismatch Q{Q.shape} vs K{K.shape}")
    d_k = Q.shape[-1]
    scores = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(d_k))
    weights = softmax(scores, mask)
    out = matmul(weights, V)
    if record is not None:
        record.append(weights)
    return out, weights


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, s, d = x.shape
    return transpose(reshape(x, (b, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def attention_weights(q_in: Tensor, k_in: Tensor, wq: Tensor, wk: Tensor, n_heads: int,
                      mask: np.ndarray | None = None) -> Tensor:
    """Multi-head ``softmax(Q K^T / sqrt(d_head))`` with ``Q = q_in wq``, ``K = k_in wk``."""
    q = split_heads(matmul(q_in, wq), n_heads)
    k = split_heads(matmul(k_in, wk), n_heads)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return softmax(scores, mask)


class ToyVLM:
    """Parameters plus forward pass; parameters live in ``self.params`` by name."""

    def __init__(self, config: VlmConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.adapters: dict[str, LoraAdapter] = {}

    # -- construction ----------------------------------------------------------
    @classmethod
    def init(cls, config: VlmConfig, seed: int | np.random.Generator = 0) -> "ToyVLM":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dt = config.np_dtype
        d, v = config.d_model, config.vocab_size
        hid = d * config.mlp_ratio

        def mat(fan_in, fan_out, std=None):
            std = 1.0 / math.sqrt(fan_in) if std is None else std
            return rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dt)

        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0.0, 1.0, size=(v, d)).astype(dt),
            "text_pos": rng.normal(0.0, 1.0, size=(config.max_text_len, d)).astype(dt),
            "patch_proj": mat(config.patch_dim, d),
            "patch_proj_b": np.zeros(d, dt),
            "patch_pos": rng.normal(0.0, 1.0, size=(config.n_patches, d)).astype(dt),
        }
        for layer in range(config.n_layers):
            for kind in cls._attn_kinds(config, layer):
                for proj in ATTN_PROJ:
                    p[f"layers.{layer}.{kind}.{proj}"] = mat(d, d)
            p[f"layers.{layer}.mlp.w1"] = mat(d, hid)
            p[f"layers.{layer}.mlp.b1"] = np.zeros(hid, dt)
            p[f"layers.{layer}.mlp.w2"] = mat(hid, d)
            p[f"layers.{layer}.mlp.b2"] = np.zeros(d, dt)
        p["head"] = np.zeros((d, v), dt) if config.zero_head else mat(d, v)
        p["head_b"] = np.zeros(v, dt)
        return cls(config, {k: parameter(a, name=k) for k, a in p.items()})

    @staticmethod
    def _attn_kinds(config: VlmConfig, layer: int) -> tuple[str, ...]:
        if config.variant == "cross" and layer in config.cross_layer_indices:
            return ("self", "cross")
        return ("self",)

    def attention_weight_names(self, layers: Sequence[int] | None = None) -> list[str]:
        layers = range(self.config.n_layers) if layers is None else layers
        return [f"layers.{l}.{kind}.{proj}" for l in layers for kind in self._attn_kinds(self.config, l)
                for proj in ATTN_PROJ]

    def weight(self, name: str) -> Tensor:
        return lora_apply(self.params[name], self.adapters.get(name))

    def all_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for name, ad in self.adapters.items():
            out[f"lora.{name}.A"] = ad.A
            out[f"lora.{name}.B"] = ad.B
        return out

    # -- forward ---------------------------------------------------------------
    def _mha(self, q_in: Tensor, kv_in: Tensor, prefix: str, mask) -> tuple[Tensor, Tensor]:
        h = self.config.n_heads
        weights = attention_weights(q_in, kv_in, self.weight(prefix + ".q"), self.weight(prefix + ".k"), h, mask)
        v = split_heads(matmul(kv_in, self.weight(prefix + ".v")), h)
        out = matmul(merge_heads(matmul(weights, v)), self.weight(prefix + ".o"))
        return weights, out

    def _mlp(self, x: Tensor, layer: int) -> Tensor:
        pre = f"layers.{layer}.mlp."
        hdn = gelu(add(matmul(x, self.params[pre + "w1"]), self.params[pre + "b1"]))
        return add(matmul(hdn, self.params[pre + "w2"]), self.params[pre + "b2"])

    def embed_patches(self, patches: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(patches, dtype=self.config.np_dtype))
        return add(add(matmul(x, self.params["patch_proj"]), self.params["patch_proj_b"]),
                   self.params["patch_pos"])

    def forward_ids(self, patches: np.ndarray, text_ids: np.ndarray) -> tuple[Tensor, AttentionRecord]:
        """Logits for every text position ``[B, T, V]`` plus the attention record."""
        cfg = self.config
        patches = np.asarray(patches)
        text_ids = np.asarray(text_ids, dtype=np.intp)
        if patches.ndim == 2:
            patches = patches[None]
        if text_ids.ndim == 1:
            text_ids = text_ids[None]
        b, t = text_ids.shape
        if t > cfg.max_text_len:
            raise ValueError(f"text length {t} exceeds max_text_len={cfg.max_text_len}")
        if patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
            raise ShapeError(f"patches shape {patches.shape[1:]} != ({cfg.n_patches}, {cfg.patch_dim})")
        if text_ids.size and text_ids.max() >= cfg.vocab_size:
            raise ValueError(f"token id {text_ids.max()} >= vocab_size={cfg.vocab_size}")
        txt = add(take_rows(self.params["tok_emb"], text_ids), self.params["text_pos"][:t])
        img = self.embed_patches(patches)
        if cfg.variant == "cross":
            return self._forward_cross(txt, img)
        return self._forward_self(txt, img)

    def _forward_cross(self, x: Tensor, img: Tensor) -> tuple[Tensor, AttentionRecord]:
        cfg = self.config
        t = x.shape[1]
        mask = causal_mask(t, cfg.np_dtype)
        record = AttentionRecord(layers=[], layer_ids=[], variant="cross")
        for layer in range(cfg.n_layers):
            a = layer_norm(x)
            _, out = self._mha(a, a, f"layers.{layer}.self", mask)
            x = add(x, out)
            if layer in cfg.cross_layer_indices:
                a = layer_norm(x)
                w, out = self._mha(a, img, f"layers.{layer}.cross", None)
                record.layers.append(w)
                record.layer_ids.append(layer)
                record.hidden[layer] = (a, img)
                x = add(x, out)
            x = add(x, self._mlp(layer_norm(x), layer))
        logits = add(matmul(layer_norm(x), self.params["head"]), self.params["head_b"])
        return logits, record

    def _forward_self(self, txt: Tensor, img: Tensor) -> tuple[Tensor, AttentionRecord]:
        cfg = self.config
        n_p, t = img.shape[1], txt.shape[1]
        s = n_p + t
        mask = np.zeros((s, s), dtype=cfg.np_dtype)
        mask[:n_p, n_p:] = MASK_VALUE
        mask[n_p:, n_p:] = causal_mask(t, cfg.np_dtype)
        idx = TokenIndexMap(tuple(range(n_p, s)), tuple(range(n_p)))
        record = AttentionRecord(layers=[], layer_ids=[], variant="self", full=[], index_map=idx)
        x = concat([img, txt], axis=1)
        for layer in range(cfg.n_layers):
            a = layer_norm(x)
            w, out = self._mha(a, a, f"layers.{layer}.self", mask)
            record.full.append(w)
            record.layers.append(getitem(w, (Ellipsis, slice(n_p, s), slice(0, n_p))))
            record.layer_ids.append(layer)
            record.hidden[layer] = (getitem(a, (slice(None), slice(n_p, s))),
                                    getitem(a, (slice(None), slice(0, n_p))))
            x = add(x, out)
            x = add(x, self._mlp(layer_norm(x), layer))
        x = getitem(x, (slice(None), slice(n_p, s)))
        logits = add(matmul(layer_norm(x), self.params["head"]), self.params["head_b"])
        return logits, record

    def forward(self, samples: SamplePair | Sequence[SamplePair]) -> tuple[Tensor, AttentionRecord]:
        """Teacher-forced logits at label positions ``[B, n_label, V]`` and the record.

        All samples in a batch must share question and label lengths.
        """
        if isinstance(samples, SamplePair):
            samples = [samples]
        lengths = {(len(s.question), len(s.label)) for s in samples}
        if len(lengths) != 1:
            raise ValueError(f"batch mixes question/label lengths {sorted(lengths)}")
        patches = np.stack([s.patches for s in samples])
        ids = np.array([s.text_ids() for s in samples], dtype=np.intp)
        logits, record = self.forward_ids(patches, ids)
        pos = samples[0].label_positions()
        return getitem(logits, (slice(None), np.asarray(pos, dtype=np.intp))), record


def vlm_nll(logits: Tensor, labels) -> Tensor:
    """Negative log-likelihood summed over label positions, averaged over the batch."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim == 2:
        return nll_loss(logits, labels)
    return scale(nll_loss(logits, labels), 1.0 / logits.shape[0])


def greedy_decode(model: ToyVLM, samples: Sequence[SamplePair], n_tokens: int | None = None) -> np.ndarray:
    """Greedy continuation of each question; returns ``[B, n_tokens]`` ids."""
    samples = list(samples)
    n_tokens = len(samples[0].label) if n_tokens is None else n_tokens
    patches = np.stack([s.patches for s in samples])
    ids = np.array([s.question for s in samples], dtype=np.intp)
    out = []
    for _ in range(n_tokens):
        logits, _ = model.forward_ids(patches, ids)
        nxt = logits.data[:, -1].argmax(axis=-1)
        out.append(nxt)
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return np.stack(out, axis=1)


def accuracy(model: ToyVLM, samples: Sequence[SamplePair], batch: int = 256) -> float:
    """Exact-match rate of greedy answers against labels."""
    samples = list(samples)
    if not samples:
        raise ValueError("accuracy: no samples")
    hits = 0
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        pred = greedy_decode(model, chunk)
        gold = np.array([s.label for s in chunk])
        hits += int(np.all(pred == gold, axis=1).sum())
    return hits / len(samples)
