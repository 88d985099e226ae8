"""Low-rank additive adapters for weight matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, parameter, scale


@dataclass
class LoraAdapter:
    """``W_eff = W + (alpha / r) * A @ B`` with ``A: [d, r]``, ``B: [r, d']``.

    ``B`` starts at zero, so the adapted weight initially equals the base
    weight exactly.
    """

    A: Tensor
    B: Tensor
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @classmethod
    def init(cls, base_shape: tuple[int, int], rank: int, alpha: float, rng: np.random.Generator,
             dtype=np.float32, name: str = "") -> "LoraAdapter":
        d_in, d_out = base_shape
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"lora rank {rank} must lie in [1, {min(d_in, d_out)}] for weight {base_shape}")
        a = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank)).astype(dtype)
        b = np.zeros((rank, d_out), dtype=dtype)
        return cls(parameter(a, name=f"{name}.lora_A"), parameter(b, name=f"{name}.lora_B"), float(alpha))


def lora_apply(base_W: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """Effective weight of ``base_W`` under ``adapter``."""
    if adapter is None:
        return base_W
    d_in, d_out = base_W.shape
    if adapter.A.shape[0] != d_in or adapter.B.shape[1] != d_out or adapter.A.shape[1] != adapter.B.shape[0]:
        raise ValueError(f"lora shapes A{adapter.A.shape} B{adapter.B.shape} do not fit weight {base_W.shape}")
    if adapter.rank > min(d_in, d_out):
        raise ValueError(f"lora rank {adapter.rank} exceeds min dims of {base_W.shape}")
    if adapter.alpha == 0.0:
        return base_W
    return base_W + scale(matmul(adapter.A, adapter.B), adapter.alpha / adapter.rank)
