"""Turning flat per-word patch-attention rows into 32x32 saliency rasters."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
import numpy as np

from .tensor import (MASK_VALUE, ShapeError, Tensor, as_tensor, bilinear_resize, concat, getitem, mul,
                     reshape, sum)

STANDARD_SIZE = (32, 32)

__all__ = [
    "STANDARD_SIZE",
    "TileLayout",
    "TokenIndexMap",
    "row_to_grid",
    "grid_to_row",
    "naive_grid",
    "resize_to_standard",
    "renormalize_rows",
    "extract_text_to_patch",
    "write_pgm",
    "write_csv_raster",
    "export_map",
]


@dataclass(frozen=True)
class TileLayout:
    """Rectangular tiles of patches, tokens ordered tile-major then row-major."""

    tiles: tuple[int, int]
    patches: tuple[int, int]

    def __post_init__(self):
        if min(self.tiles) < 1 or min(self.patches) < 1:
            raise ValueError(f"tile layout dims must be positive: {self.tiles} x {self.patches}")

    @classmethod
    def simple(cls, rows: int, cols: int) -> "TileLayout":
        return cls((1, 1), (rows, cols))

    @property
    def n_patches(self) -> int:
        return self.tiles[0] * self.tiles[1] * self.patches[0] * self.patches[1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.tiles[0] * self.patches[0], self.tiles[1] * self.patches[1]

    @property
    def token_ranges(self) -> list[range]:
        per = self.patches[0] * self.patches[1]
        return [range(k * per, (k + 1) * per) for k in range(self.tiles[0] * self.tiles[1])]

    def permutation(self) -> np.ndarray:
        """``perm`` with ``grid.ravel()[k] == row[perm[k]]``."""
        tr, tc = self.tiles
        pr, pc = self.patches
        per = pr * pc
        gy, gx = np.indices(self.grid_shape)
        tile = (gy // pr) * tc + (gx // pc)
        within = (gy % pr) * pc + (gx % pc)
        return (tile * per + within).ravel()


@dataclass(frozen=True)
class TokenIndexMap:
    """Positions of text and patch tokens inside an interleaved sequence."""

    text_indices: tuple[int, ...]
    patch_indices: tuple[int, ...]

    def __post_init__(self):
        if set(self.text_indices) & set(self.patch_indices):
            raise ValueError("text and patch index sets overlap")

    def validate(self, seq_len: int) -> None:
        for i in (*self.text_indices, *self.patch_indices):
            if not 0 <= i < seq_len:
                raise ValueError(f"token index {i} outside sequence of length {seq_len}")


def _as_layout(layout, n: int) -> TileLayout | None:
    if layout is None:
        return None
    if isinstance(layout, TileLayout):
        return layout
    rows, cols = layout
    return TileLayout.simple(rows, cols)


def row_to_grid(row, layout: TileLayout | tuple[int, int] | None = None) -> Tensor:
    """Reshape ``[..., n_patch]`` rows into ``[..., H, W]`` spatial maps.

    Tiles are placed at their (tile_row, tile_col) position so neighbouring
    tiles stay neighbours. Without a layout the row is treated as a square
    grid; a non-square count is zero-padded to the next square and the
    trailing all-padding rows are cropped.
    """
    row = as_tensor(row)
    n = row.shape[-1]
    lead = row.shape[:-1]
    layout = _as_layout(layout, n)
    if layout is None:
        side = math.isqrt(n)
        if side * side == n:
            return reshape(row, (*lead, side, side))
        side += 1
        used_rows = -(-n // side)
        pad = np.zeros((*lead, used_rows * side - n), dtype=row.dtype)
        return reshape(concat([row, Tensor(pad)], axis=-1), (*lead, used_rows, side))
    if layout.n_patches != n:
        raise ShapeError(f"row_to_grid: row has {n} patches but layout expects {layout.n_patches}")
    h, w = layout.grid_shape
    if layout.tiles == (1, 1):
        return reshape(row, (*lead, h, w))
    return reshape(getitem(row, (Ellipsis, layout.permutation())), (*lead, h, w))


def grid_to_row(grid: np.ndarray, layout: TileLayout | tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`row_to_grid`: flatten back into token order."""
    layout = _as_layout(layout, 0)
    grid = np.asarray(grid)
    flat = grid.reshape(*grid.shape[:-2], -1)
    out = np.empty_like(flat)
    out[..., layout.permutation()] = flat
    return out


def naive_grid(row: np.ndarray) -> np.ndarray:
    """Plain square reshape ignoring tiles; the failure mode tiled assembly avoids."""
    row = np.asarray(row)
    n = row.shape[-1]
    side = math.isqrt(n)
    if side * side != n:
        side += 1
        row = np.concatenate([row, np.zeros((*row.shape[:-1], side * side - n), row.dtype)], axis=-1)
    return row.reshape(*row.shape[:-1], side, side)


def renormalize_rows(x: Tensor, axes=(-1,)) -> tuple[Tensor, np.ndarray]:
    """Scale so each slice over ``axes`` sums to 1.

    All-zero slices become uniform instead of dividing by zero; the returned
    boolean array flags them.
    """
    x = as_tensor(x)
    s = sum(x, axis=axes, keepdims=True)
    zero = s.data <= 0.0
    if not zero.any():
        return x / s, zero.squeeze(tuple(axes))
    count = int(np.prod([x.shape[a] for a in axes]))
    safe = s + Tensor(zero.astype(x.dtype))
    fallback = np.broadcast_to(zero.astype(x.dtype) / count, x.shape)
    return x / safe + Tensor(fallback), zero.squeeze(tuple(axes))


def resize_to_standard(grid, size: tuple[int, int] = STANDARD_SIZE, return_flags: bool = False):
    """Bilinearly resize ``[..., H, W]`` maps to ``size`` and renormalize to unit mass."""
    grid = as_tensor(grid)
    if grid.ndim < 2 or min(grid.shape[-2:]) < 1:
        raise ShapeError(f"resize_to_standard: bad map shape {grid.shape}")
    if not np.all(np.isfinite(grid.data)):
        raise ValueError("resize_to_standard: non-finite input map")
    out = bilinear_resize(grid, size)
    out, flags = renormalize_rows(out, axes=(-2, -1))
    return (out, flags) if return_flags else out


def resize_mass(grid: np.ndarray, size: tuple[int, int] = STANDARD_SIZE) -> np.ndarray:
    """Area-scaled bilinear resize without renormalization (mass-preserving)."""
    grid = np.asarray(grid, dtype=np.float64)
    out = bilinear_resize(Tensor(grid), size).data
    return out * (grid.shape[-2] * grid.shape[-1]) / (size[0] * size[1])


def extract_text_to_patch(weights, idx: TokenIndexMap, mask_aware: bool = True,
                          return_flags: bool = False):
    """Select text rows and patch columns of a ``[..., S, S]`` self-attention matrix.

    With ``mask_aware`` the entries a causal mask excludes (patch position
    after the text position) are zeroed. Rows are renormalized over patches
    because sub-rows of a full-sequence softmax do not sum to one.
    """
    weights = as_tensor(weights)
    seq = weights.shape[-1]
    idx.validate(seq)
    t_idx = np.asarray(idx.text_indices, dtype=np.intp)
    p_idx = np.asarray(idx.patch_indices, dtype=np.intp)
    sub = getitem(weights, (Ellipsis, t_idx[:, None], p_idx[None, :]))
    if mask_aware:
        allowed = (p_idx[None, :] <= t_idx[:, None]).astype(weights.dtype)
        if not allowed.all():
            sub = mul(sub, Tensor(allowed))
    out, flags = renormalize_rows(sub)
    return (out, flags) if return_flags else out


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE, dtype=dtype), k=1)


# -- export -----------------------------------------------------------------------

def write_pgm(path: str, grid: np.ndarray) -> None:
    """Binary 8-bit PGM (P5), scaled so the maximum maps to 255."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max()
    scaled = np.zeros_like(grid) if peak <= 0 else grid / peak
    pix = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_csv_raster(path: str, grid: np.ndarray) -> None:
    np.savetxt(path, np.asarray(grid, dtype=np.float64), delimiter=",", fmt="%.9g")


def export_map(out_dir: str, sample_id: str, word: str, grid: np.ndarray, suffix: str = "") -> list[str]:
    """Write ``out_dir/sample_id/word{suffix}.pgm`` and ``.csv``; returns the paths."""
    folder = os.path.join(out_dir, sample_id)
    os.makedirs(folder, exist_ok=True)
    stem = os.path.join(folder, f"{word}{suffix}")
    write_pgm(stem + ".pgm", grid)
    write_csv_raster(stem + ".csv", grid)
    return [stem + ".pgm", stem + ".csv"]
