"""``LAVM`` checkpoint files: model, LoRA adapters, Aligner and parallel attention.

Layout: magic ``LAVM``, version u32, config JSON (length-prefixed UTF-8),
block count u32, then named array blocks (name, rank, dims, float32 LE).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .aggregation import ParallelAttnParams
from .aligner import AlignerConfig, AlignerParams
from .io import (FormatError, UnsupportedVersionError, check_magic, read_array_block, read_str, read_u32,
                 write_array_block, write_str, write_u32)
from .lora import LoraAdapter
from .tensor import parameter
from .vlm import ToyVLM, VlmConfig, Vocab

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

LAVM_MAGIC = b"LAVM"
LAVM_VERSION = 1


@dataclass
class Checkpoint:
    model: ToyVLM
    aligner: AlignerParams | None = None
    parallel: ParallelAttnParams | None = None
    train_config: dict[str, str] = field(default_factory=dict)
    vocab: Vocab | None = None
    extra: dict = field(default_factory=dict)


def _blocks(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"model.{k}", t.data) for k, t in ck.model.params.items()]
    for name, ad in ck.model.adapters.items():
        out += [(f"lora.{name}.A", ad.A.data), (f"lora.{name}.B", ad.B.data)]
    if ck.aligner is not None:
        out += list((k, t.data) for k, t in ck.aligner.parameters().items())
        out += [(f"aligner_running.{k}", v) for k, v in ck.aligner.running.items()]
    if ck.parallel is not None:
        out += [(k, t.data) for k, t in ck.parallel.parameters().items()]
    return sorted(out, key=lambda b: b[0])  # canonical order so re-saving is byte-stable


def save_checkpoint(path: str, ck: Checkpoint) -> None:
    if ck.model.config.np_dtype != np.float32:
        raise ValueError("checkpoints store float32; convert the model first")
    config = {
        "vlm": ck.model.config.to_dict(),
        "aligner": None if ck.aligner is None else ck.aligner.config.to_dict(),
        "parallel_layers": None if ck.parallel is None else ck.parallel.selected_layers,
        "lora_alpha": {k: ad.alpha for k, ad in ck.model.adapters.items()},
        "train": ck.train_config,
        "vocab": None if ck.vocab is None else ck.vocab.words,
        "extra": ck.extra,
    }
    blocks = _blocks(ck)
    with open(path, "wb") as fh:
        fh.write(LAVM_MAGIC)
        write_u32(fh, LAVM_VERSION)
        write_str(fh, json.dumps(config, sort_keys=True))
        write_u32(fh, len(blocks))
        for name, arr in blocks:
            write_array_block(fh, name, arr)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        check_magic(fh, LAVM_MAGIC)
        version = read_u32(fh, "version")
        if version != LAVM_VERSION:
            raise UnsupportedVersionError(f"LAVM version {version} unsupported")
        try:
            config = json.loads(read_str(fh, "config"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt checkpoint config: {exc}") from None
        blocks = dict(read_array_block(fh) for _ in range(read_u32(fh, "block count")))
        if fh.read(1):
            raise FormatError("trailing bytes after last block")
    vc = config["vlm"]
    vc["cross_layer_indices"] = tuple(vc["cross_layer_indices"])
    vc["patch_grid"] = tuple(vc["patch_grid"])
    vcfg = VlmConfig(**vc)
    expected = ToyVLM.init(vcfg, 0).params
    params = {}
    for name, ref in expected.items():
        arr = blocks.get(f"model.{name}")
        if arr is None:
            raise FormatError(f"checkpoint missing parameter block {name!r}")
        if arr.shape != ref.shape:
            raise FormatError(f"block {name!r} has shape {arr.shape}, expected {ref.shape}")
        params[name] = parameter(arr, name=name)
    model = ToyVLM(vcfg, params)
    for name, alpha in config["lora_alpha"].items():
        model.adapters[name] = LoraAdapter(parameter(blocks[f"lora.{name}.A"], name=f"{name}.lora_A"),
                                           parameter(blocks[f"lora.{name}.B"], name=f"{name}.lora_B"), alpha)
    aligner = None
    if config["aligner"] is not None:
        acfg = AlignerConfig(**config["aligner"])
        weights = {k[len("aligner."):]: parameter(v, name=k) for k, v in blocks.items() if k.startswith("aligner.")}
        running = {k[len("aligner_running."):]: v for k, v in blocks.items() if k.startswith("aligner_running.")}
        aligner = AlignerParams(acfg, weights, running)
    parallel = None
    if config["parallel_layers"] is not None:
        wq = {l: parameter(blocks[f"parallel.{l}.q"], name=f"parallel.{l}.q") for l in config["parallel_layers"]}
        wk = {l: parameter(blocks[f"parallel.{l}.k"], name=f"parallel.{l}.k") for l in config["parallel_layers"]}
        parallel = ParallelAttnParams(wq, wk, vcfg.n_heads)
    vocab = None if config["vocab"] is None else Vocab(config["vocab"])
    return Checkpoint(model, aligner, parallel, config["train"], vocab, config.get("extra", {}))
