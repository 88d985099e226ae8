"""Per-word teacher saliency maps and the synthetic colour-grid task.

The teacher stands in for diffusion-model cross-attention: each word gets an
isotropic Gaussian blob on a 32x32 raster centred on the grid cell the word
refers to. Maps persist in the ``LAVT`` binary format so externally
extracted maps can be dropped in instead.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .io import (FormatError, UnsupportedVersionError, check_magic, read_f32, read_str, read_u32, write_f32,
                 write_str, write_u32)
from .spatial import STANDARD_SIZE
from .vlm import SamplePair, Vocab

__all__ = [
    "COLORS",
    "SaliencyMap",
    "TeacherMapSet",
    "SceneSpec",
    "NormalizationError",
    "synth_teacher",
    "save_teacher_maps",
    "load_teacher_maps",
    "task_vocab",
    "question_words",
    "split_combinations",
    "make_dataset",
    "make_split",
    "dataset_to_json",
    "dataset_from_json",
    "scene_of",
]

LAVT_MAGIC = b"LAVT"
LAVT_VERSION = 1
MAP_CELLS = STANDARD_SIZE[0] * STANDARD_SIZE[1]
_LOAD_SUM_TOL = 1e-4  # float32 storage

# name -> RGB corner of the unit cube
COLORS: dict[str, tuple[float, float, float]] = {
    "black": (0.0, 0.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "green": (0.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}


class NormalizationError(FormatError):
    """A stored map does not sum to one."""


@dataclass
class SaliencyMap:
    word: str
    grid: np.ndarray

    def __post_init__(self):
        self.word = self.word.lower()
        if self.grid.shape != STANDARD_SIZE:
            raise ValueError(f"saliency map for {self.word!r} must be 32x32, got {self.grid.shape}")

    def check(self, tol: float = 1e-6) -> None:
        if np.any(self.grid < 0):
            raise NormalizationError(f"map for word {self.word!r} has negative entries")
        total = float(np.sum(self.grid, dtype=np.float64))
        if abs(total - 1.0) > tol:
            raise NormalizationError(f"map for word {self.word!r} sums to {total:.6g}, expected 1")


@dataclass
class TeacherMapSet:
    sample_id: str
    maps: dict[str, SaliencyMap] = field(default_factory=dict)

    def __getitem__(self, word: str) -> SaliencyMap:
        return self.maps[word.lower()]

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.maps

    def keys(self) -> list[str]:
        return list(self.maps)

    def add(self, smap: SaliencyMap) -> None:
        if smap.word in self.maps:
            raise ValueError(f"duplicate word {smap.word!r} in sample {self.sample_id}")
        self.maps[smap.word] = smap


@dataclass
class SceneSpec:
    """Grid dimensions plus (cell index, word) entries to render."""

    grid: tuple[int, int]
    cells: list[tuple[int, str]]

    def __post_init__(self):
        n = self.grid[0] * self.grid[1]
        idx = [c for c, _ in self.cells]
        if len(set(idx)) != len(idx):
            raise ValueError("scene cell indices must be unique")
        if any(not 0 <= c < n for c in idx):
            raise ValueError(f"scene cell index outside grid of {n} cells")


def cell_center(cell: int, grid: tuple[int, int], size: tuple[int, int] = STANDARD_SIZE) -> tuple[float, float]:
    """Raster coordinates (pixel-centre convention) of a cell's centre."""
    r, c = divmod(cell, grid[1])
    return (r + 0.5) * size[0] / grid[0] - 0.5, (c + 0.5) * size[1] / grid[1] - 0.5


def gaussian_map(center: tuple[float, float], sigma: float, size=STANDARD_SIZE) -> np.ndarray:
    yy, xx = np.indices(size, dtype=np.float64)
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    return g / g.sum()


def synth_teacher(scene: SceneSpec, sigma: float = 1.0, sample_id: str = "", dtype=np.float32) -> TeacherMapSet:
    """Gaussian blob of std ``sigma`` (raster pixels) per scene word, unit mass."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not scene.cells:
        raise ValueError("empty scene")
    out = TeacherMapSet(sample_id)
    for cell, word in scene.cells:
        g = gaussian_map(cell_center(cell, scene.grid), sigma).astype(dtype)
        if dtype != np.float64:
            # renormalize after rounding so the stored map still has unit mass
            g = (g / g.sum(dtype=np.float64)).astype(dtype)
        out.add(SaliencyMap(word, g))
    return out


# -- LAVT files ------------------------------------------------------------------------

def save_teacher_maps(tset: TeacherMapSet, path: str) -> None:
    """Write ``magic, version, sample id, count, (word, 1024 f32)*``."""
    with open(path, "wb") as fh:
        fh.write(LAVT_MAGIC)
        write_u32(fh, LAVT_VERSION)
        write_str(fh, tset.sample_id)
        write_u32(fh, len(tset.maps))
        for word, smap in tset.maps.items():
            write_str(fh, word)
            write_f32(fh, smap.grid.reshape(-1))


def load_teacher_maps(path: str) -> TeacherMapSet:
    with open(path, "rb") as fh:
        check_magic(fh, LAVT_MAGIC)
        version = read_u32(fh, "version")
        if version != LAVT_VERSION:
            raise UnsupportedVersionError(f"LAVT version {version} unsupported")
        out = TeacherMapSet(read_str(fh, "sample id"))
        count = read_u32(fh, "map count")
        for _ in range(count):
            word = read_str(fh, "word")
            grid = read_f32(fh, MAP_CELLS, f"map {word!r}").reshape(STANDARD_SIZE)
            smap = SaliencyMap(word, grid)
            smap.check(_LOAD_SUM_TOL)
            out.add(smap)
        if fh.read(1):
            raise FormatError("trailing bytes after last map")
        return out


# -- colour-grid task ---------------------------------------------------------------------

def question_words(cell: int, grid: tuple[int, int]) -> list[str]:
    r, c = divmod(cell, grid[1])
    return ["what", "color", "at", f"row{r}", f"col{c}"]


def task_vocab(grid: tuple[int, int] = (4, 4), colors: Sequence[str] | None = None) -> Vocab:
    colors = list(COLORS) if colors is None else list(colors)
    words = ["<pad>", "what", "color", "at"]
    words += [f"row{r}" for r in range(grid[0])] + [f"col{c}" for c in range(grid[1])]
    return Vocab(words + colors)


def split_combinations(grid: tuple[int, int], n_colors: int, held_out_per_cell: int = 2,
                       seed: int = 0) -> tuple[set, set]:
    """Partition (cell, colour index) keys into train and held-out sets.

    Each cell holds out ``held_out_per_cell`` consecutive colours starting at
    a shuffled offset, so every cell and every colour still appears in
    training.
    """
    n_cells = grid[0] * grid[1]
    if not 0 <= held_out_per_cell < n_colors:
        raise ValueError("held_out_per_cell must be in [0, n_colors)")
    offsets = np.random.default_rng(seed).permutation(max(n_cells, n_colors))[:n_cells] % n_colors
    test = {(c, int((offsets[c] + j) % n_colors)) for c in range(n_cells) for j in range(held_out_per_cell)}
    train = {(c, k) for c in range(n_cells) for k in range(n_colors)} - test
    return train, test


def make_dataset(n_samples: int, grid: tuple[int, int], vocab: Vocab, seed: int,
                 colors: Sequence[str] | None = None, sigma: float = 1.0,
                 combos: Iterable[tuple[int, int]] | None = None,
                 prefix: str = "s") -> list[tuple[SamplePair, TeacherMapSet]]:
    """Random colour grids with one "what color at rowR colC" question each.

    Every cell gets a uniformly random colour; the queried cell's colour is
    drawn from the colours allowed for it by ``combos`` (all by default). The
    teacher map for the answer word peaks at the queried cell; the other
    colours present get maps at their first occurrence.
    """
    colors = list(COLORS) if colors is None else list(colors)
    needed = {"what", "color", "at"} | {f"row{r}" for r in range(grid[0])} \
        | {f"col{c}" for c in range(grid[1])} | set(colors)
    missing = sorted(w for w in needed if w not in vocab)
    if missing:
        raise ValueError(f"vocabulary too small: missing {missing}")
    unknown = [c for c in colors if c not in COLORS]
    if unknown:
        raise ValueError(f"no RGB value for colours {unknown}")
    n_cells = grid[0] * grid[1]
    allowed: dict[int, list[int]] = {c: list(range(len(colors))) for c in range(n_cells)}
    if combos is not None:
        allowed = {c: [] for c in range(n_cells)}
        for cell, k in sorted(combos):
            allowed[cell].append(k)
    cells_with_options = [c for c in range(n_cells) if allowed[c]]
    if not cells_with_options:
        raise ValueError("no allowed (cell, colour) combinations")
    rgb = np.array([COLORS[c] for c in colors], dtype=np.float32)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_samples):
        layout = rng.integers(0, len(colors), size=n_cells)
        cell = int(cells_with_options[rng.integers(0, len(cells_with_options))])
        layout[cell] = allowed[cell][rng.integers(0, len(allowed[cell]))]
        answer = colors[layout[cell]]
        q = question_words(cell, grid)
        sid = f"{prefix}{i:05d}"
        sample = SamplePair(
            sample_id=sid,
            patches=rgb[layout],
            question=vocab.encode(q),
            label=vocab.encode([answer]),
            text=q + [answer],
            meta={"cell": cell, "color": int(layout[cell]), "layout": layout.tolist()},
        )
        out.append((sample, synth_teacher(scene_of(sample, grid, colors), sigma, sample_id=sid)))
    return out


def make_split(n_train: int, n_test: int, grid: tuple[int, int] = (4, 4), vocab: Vocab | None = None,
               seed: int = 0, colors: Sequence[str] | None = None, sigma: float = 1.0,
               held_out_per_cell: int = 2):
    """Train/held-out datasets whose queried (cell, colour) keys are disjoint."""
    colors = list(COLORS) if colors is None else list(colors)
    vocab = task_vocab(grid, colors) if vocab is None else vocab
    train_keys, test_keys = split_combinations(grid, len(colors), held_out_per_cell, seed)
    ss = np.random.SeedSequence(seed)
    s_train, s_test = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    train = make_dataset(n_train, grid, vocab, s_train, colors, sigma, train_keys, prefix="train")
    test = make_dataset(n_test, grid, vocab, s_test, colors, sigma, test_keys, prefix="test")
    return train, test


def teacher_dir_save(data: Sequence[tuple[SamplePair, TeacherMapSet]], folder: str) -> list[str]:
    os.makedirs(folder, exist_ok=True)
    paths = []
    for sample, tset in data:
        path = os.path.join(folder, f"{sample.sample_id}.lavt")
        save_teacher_maps(tset, path)
        paths.append(path)
    return paths


# -- dataset files ------------------------------------------------------------------

def dataset_to_json(splits: dict[str, Sequence[tuple[SamplePair, TeacherMapSet]]], grid: tuple[int, int],
                    colors: Sequence[str], sigma: float, seed: int) -> dict:
    """Scenes only; teacher maps live in LAVT files and are rebuilt on demand."""
    return {
        "grid": list(grid),
        "colors": list(colors),
        "sigma": sigma,
        "seed": seed,
        "splits": {name: [{"id": s.sample_id, "cell": s.meta["cell"], "layout": s.meta["layout"],
                           "question": s.text[:len(s.question)], "label": s.label_words}
                          for s, _ in data] for name, data in splits.items()},
    }


def dataset_from_json(doc: dict, teacher_dir: str | None = None):
    """Rebuild ``{split: [(SamplePair, TeacherMapSet)]}`` plus the vocabulary.

    Teacher maps load from ``teacher_dir/<id>.lavt`` when given, else they
    are synthesized from the stored scene.
    """
    grid = tuple(doc["grid"])
    colors = list(doc["colors"])
    vocab = task_vocab(grid, colors)
    rgb = np.array([COLORS[c] for c in colors], dtype=np.float32)
    out = {}
    for name, rows in doc["splits"].items():
        data = []
        for row in rows:
            layout = np.asarray(row["layout"], dtype=np.intp)
            sample = SamplePair(
                sample_id=row["id"], patches=rgb[layout], question=vocab.encode(row["question"]),
                label=vocab.encode(row["label"]), text=list(row["question"]) + list(row["label"]),
                meta={"cell": row["cell"], "color": int(layout[row["cell"]]), "layout": layout.tolist()})
            if teacher_dir is not None:
                tset = load_teacher_maps(os.path.join(teacher_dir, f"{row['id']}.lavt"))
            else:
                tset = synth_teacher(scene_of(sample, grid, colors), doc["sigma"], sample_id=row["id"])
            data.append((sample, tset))
        out[name] = data
    return out, vocab


def scene_of(sample: SamplePair, grid: tuple[int, int], colors: Sequence[str]) -> SceneSpec:
    """The teacher scene for a sample: answer at the queried cell, other colours at first occurrence."""
    cell = sample.meta["cell"]
    answer = colors[sample.meta["layout"][cell]]
    entries = [(cell, answer)]
    seen = {answer}
    for c, k in enumerate(sample.meta["layout"]):
        if colors[k] not in seen:
            seen.add(colors[k])
            entries.append((c, colors[k]))
    return SceneSpec(grid, entries)
