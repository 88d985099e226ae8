import numpy as np
import pytest

from lavender.spatial import (TileLayout, TokenIndexMap, export_map, extract_text_to_patch, grid_to_row, naive_grid,
                              read_pgm, resize_mass, resize_to_standard, row_to_grid)
from lavender.tensor import ShapeError, Tensor, grad_check, sum as tsum


class TestRowToGrid:
    def test_simple(self):
        assert np.array_equal(row_to_grid(np.array([1.0, 2, 3, 4]), (2, 2)).data, [[1, 2], [3, 4]])

    def test_tiled_hand_layout(self):
        row = np.arange(8.0)  # tile 0: a..d, tile 1: e..h
        out = row_to_grid(row, TileLayout((2, 1), (2, 2))).data
        assert np.array_equal(out, [[0, 1], [2, 3], [4, 5], [6, 7]])

    def test_side_by_side_tiles(self):
        row = np.arange(8.0)
        out = row_to_grid(row, TileLayout((1, 2), (2, 2))).data
        assert np.array_equal(out, [[0, 1, 4, 5], [2, 3, 6, 7]])

    def test_naive_reshape_differs(self):
        row = np.arange(16.0)
        tiled = row_to_grid(row, TileLayout((2, 2), (2, 2))).data
        assert not np.array_equal(tiled, naive_grid(row))

    def test_roundtrip_random_layouts(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            layout = TileLayout(tuple(rng.integers(1, 4, 2)), tuple(rng.integers(1, 5, 2)))
            row = rng.random((2, layout.n_patches))
            grid = row_to_grid(row, layout).data
            assert grid.shape == (2, *layout.grid_shape)
            assert np.array_equal(grid_to_row(grid, layout), row)

    def test_count_mismatch(self):
        with pytest.raises(ShapeError, match="layout expects"):
            row_to_grid(np.ones(6), TileLayout((2, 1), (2, 2)))

    def test_non_square_padding(self):
        out = row_to_grid(np.arange(1.0, 6.0)).data  # 5 patches -> next square side 3
        assert np.array_equal(out, [[1, 2, 3], [4, 5, 0]])

    def test_layout_validation(self):
        with pytest.raises(ValueError):
            TileLayout((0, 1), (2, 2))


class TestResize:
    def test_constant(self):
        out = resize_to_standard(np.full((3, 5), 7.0)).data
        assert out.shape == (32, 32)
        assert np.allclose(out, 1 / 1024, atol=1e-15)

    def test_32_is_identity_up_to_renorm(self, rng):
        g = rng.random((32, 32))
        out = resize_to_standard(g).data
        assert np.max(np.abs(out - g / g.sum())) < 1e-9

    def test_top_left_concentration(self):
        out = resize_to_standard(np.array([[1.0, 0.0], [0.0, 0.0]])).data
        assert out[:16, :16].sum() > 0.5

    def test_mass_within_two_percent(self, rng):
        for _ in range(50):
            h, w = rng.integers(4, 20, 2)
            g = rng.random((h, w))
            assert abs(resize_mass(g).sum() / g.sum() - 1) < 0.02

    def test_unit_mass_and_nonnegative(self, rng):
        for _ in range(50):
            g = rng.random(tuple(rng.integers(1, 12, 2)))
            out = resize_to_standard(g).data
            assert out.min() >= 0 and abs(out.sum() - 1) < 1e-6

    def test_all_zero_map_is_uniform_and_flagged(self):
        out, flags = resize_to_standard(np.zeros((2, 4, 4)), return_flags=True)
        assert np.allclose(out.data, 1 / 1024) and flags.all()

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            resize_to_standard(np.array([[1.0, np.inf], [0, 0]]))

    def test_gradient(self, rng):
        g = rng.random((3, 4))
        w = rng.random((32, 32))
        assert grad_check(lambda x: tsum(resize_to_standard(x) * Tensor(w)), g, eps=1e-6) < 1e-4


def _brute_extract(w, text, patch, mask_aware=True):
    out = np.zeros((len(text), len(patch)))
    for i, t in enumerate(text):
        for j, p in enumerate(patch):
            if not mask_aware or p <= t:
                out[i, j] = w[t, p]
    return out / out.sum(1, keepdims=True)


class TestExtract:
    def test_patches_before_text_unmasked(self, rng):
        w = rng.random((6, 6)) * np.tril(np.ones((6, 6)))
        w /= w.sum(1, keepdims=True)
        idx = TokenIndexMap((4, 5), (0, 1, 2, 3))
        sub = w[np.ix_([4, 5], [0, 1, 2, 3])]
        assert np.all(sub > 0)
        assert np.all(sub.sum(1) < 1)
        assert np.allclose(extract_text_to_patch(w, idx).data, sub / sub.sum(1, keepdims=True))

    def test_uniform_single_token(self):
        w = np.zeros((5, 5))
        w[4] = 0.2
        out = extract_text_to_patch(w, TokenIndexMap((4,), (0, 1, 2, 3))).data
        assert np.allclose(out, [[0.25] * 4], atol=1e-15)

    @pytest.mark.parametrize("text,patch", [((4, 5), (0, 1, 2, 3)), ((1, 4), (0, 2, 3, 5))])
    def test_brute_force(self, rng, text, patch):
        logits = rng.normal(size=(6, 6)) + np.triu(np.full((6, 6), -1e9), 1)
        w = np.exp(logits - logits.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        out = extract_text_to_patch(w, TokenIndexMap(text, patch)).data
        assert np.max(np.abs(out - _brute_extract(w, text, patch))) < 1e-12
        assert np.allclose(out.sum(1), 1, atol=1e-6)

    def test_fully_masked_row_is_uniform(self):
        w = np.tril(np.ones((4, 4))) / np.arange(1, 5)[:, None]
        out, flags = extract_text_to_patch(w, TokenIndexMap((0,), (1, 2, 3)), return_flags=True)
        assert np.allclose(out.data, 1 / 3) and flags.all()

    def test_overlap_and_bounds(self):
        with pytest.raises(ValueError, match="overlap"):
            TokenIndexMap((1, 2), (2, 3))
        with pytest.raises(ValueError, match="outside"):
            extract_text_to_patch(np.ones((3, 3)) / 3, TokenIndexMap((5,), (0,)))


def test_export_map_writes_pgm_and_csv(tmp_path, rng):
    g = rng.random((32, 32))
    pgm, csv = export_map(str(tmp_path), "s1", "red", g, suffix="_teacher")
    assert pgm.endswith("s1/red_teacher.pgm")
    pix = read_pgm(pgm)
    assert pix.shape == (32, 32) and pix.max() == 255
    assert np.unravel_index(pix.argmax(), pix.shape) == np.unravel_index(g.argmax(), g.shape)
    assert np.allclose(np.loadtxt(csv, delimiter=","), g, rtol=1e-8)
