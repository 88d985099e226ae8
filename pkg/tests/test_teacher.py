import math
import struct

import numpy as np
import pytest

from lavender.analysis import map_entropy
from lavender.io import BadMagicError, FormatError, NonFiniteValueError, TruncatedFileError
from lavender.teacher import (COLORS, NormalizationError, SaliencyMap, SceneSpec, TeacherMapSet, dataset_from_json,
                              dataset_to_json, gaussian_map, load_teacher_maps, make_dataset, make_split,
                              save_teacher_maps, split_combinations, synth_teacher, task_vocab)


def _write_raw_lavt(path, words_and_grids, magic=b"LAVT", sample_id="x"):
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", 1))
        sid = sample_id.encode()
        fh.write(struct.pack("<I", len(sid)) + sid)
        fh.write(struct.pack("<I", len(words_and_grids)))
        for word, grid in words_and_grids:
            w = word.encode()
            fh.write(struct.pack("<I", len(w)) + w)
            fh.write(np.asarray(grid, dtype="<f4").tobytes())


class TestSynth:
    def test_concentration_limit(self):
        tset = synth_teacher(SceneSpec((4, 4), [(5, "red")]), sigma=0.25, dtype=np.float64)
        g = tset["red"].grid
        assert g[8:16, 8:16].sum() >= 0.99

    def test_two_cells_are_translates(self):
        tset = synth_teacher(SceneSpec((4, 4), [(5, "red"), (10, "blue")]), sigma=1.0, dtype=np.float64)
        a, b = tset["red"].grid, tset["blue"].grid
        # cell 5 -> (1,1), cell 10 -> (2,2): shift by 8 pixels both ways
        assert np.max(np.abs(a[4:20, 4:20] - b[12:28, 12:28])) < 1e-9

    def test_entropy_direct_sum(self):
        g = synth_teacher(SceneSpec((4, 4), [(0, "red")]), sigma=2.0, dtype=np.float64)["red"].grid
        yy, xx = np.mgrid[0:32, 0:32]
        ref = np.exp(-((yy - 3.5) ** 2 + (xx - 3.5) ** 2) / 8.0)
        ref /= ref.sum()
        expected = -np.sum(ref * np.log(ref))
        assert map_entropy(g) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_normalized(self, dtype):
        tset = synth_teacher(SceneSpec((4, 4), [(i, w) for i, w in enumerate(COLORS)]), 1.0, dtype=dtype)
        for m in tset.maps.values():
            assert m.grid.min() >= 0
            assert abs(m.grid.sum(dtype=np.float64) - 1) < 1e-6

    def test_entropy_monotone_in_sigma(self):
        ents = [map_entropy(synth_teacher(SceneSpec((4, 4), [(6, "red")]), s, dtype=np.float64)["red"])
                for s in (0.5, 1.0, 2.0, 4.0)]
        assert all(a < b for a, b in zip(ents, ents[1:]))

    @pytest.mark.parametrize("sigma", [0.5, 1.0])
    def test_low_entropy_premise(self, sigma):
        for cell in range(16):
            m = synth_teacher(SceneSpec((4, 4), [(cell, "red")]), sigma, dtype=np.float64)["red"]
            assert map_entropy(m) < math.log(1024) - 2.0

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            synth_teacher(SceneSpec((4, 4), []), 1.0)
        with pytest.raises(ValueError, match="sigma"):
            synth_teacher(SceneSpec((4, 4), [(0, "red")]), 0.0)
        with pytest.raises(ValueError, match="unique"):
            SceneSpec((4, 4), [(0, "red"), (0, "blue")])
        with pytest.raises(ValueError, match="outside"):
            SceneSpec((2, 2), [(4, "red")])

    def test_duplicate_word_rejected(self):
        tset = TeacherMapSet("a")
        tset.add(SaliencyMap("Red", gaussian_map((3, 3), 1.0)))
        assert "RED" in tset
        with pytest.raises(ValueError, match="duplicate"):
            tset.add(SaliencyMap("red", gaussian_map((5, 5), 1.0)))


class TestLavt:
    def test_roundtrip_bit_exact(self, tmp_path):
        tset = synth_teacher(SceneSpec((4, 4), [(3, "red"), (7, "blue"), (12, "white")]), 1.3, sample_id="s9")
        path = tmp_path / "m.lavt"
        save_teacher_maps(tset, str(path))
        back = load_teacher_maps(str(path))
        assert back.sample_id == "s9"
        assert back.keys() == tset.keys()
        for w in tset.keys():
            assert back[w].grid.dtype == np.float32
            assert back[w].grid.tobytes() == tset[w].grid.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lavt"
        _write_raw_lavt(str(path), [("red", gaussian_map((3, 3), 1.0))], magic=b"XXXX")
        with pytest.raises(BadMagicError):
            load_teacher_maps(str(path))

    def test_unnormalized_map_names_word(self, tmp_path):
        path = tmp_path / "half.lavt"
        _write_raw_lavt(str(path), [("red", gaussian_map((3, 3), 1.0)), ("teal", 0.5 * gaussian_map((9, 9), 1.0))])
        with pytest.raises(NormalizationError, match="teal"):
            load_teacher_maps(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.lavt"
        _write_raw_lavt(str(path), [("red", gaussian_map((3, 3), 1.0))])
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(TruncatedFileError):
            load_teacher_maps(str(path))

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "t.lavt"
        _write_raw_lavt(str(path), [("red", gaussian_map((3, 3), 1.0))])
        path.write_bytes(path.read_bytes() + b"\0\0")
        with pytest.raises(FormatError, match="trailing"):
            load_teacher_maps(str(path))

    def test_non_finite(self, tmp_path):
        g = gaussian_map((3, 3), 1.0)
        g[0, 0] = np.nan
        path = tmp_path / "n.lavt"
        _write_raw_lavt(str(path), [("red", g)])
        with pytest.raises(NonFiniteValueError):
            load_teacher_maps(str(path))

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, TruncatedFileError, NonFiniteValueError, NormalizationError}
        assert len(kinds) == 4
        for a in kinds:
            for b in kinds - {a}:
                assert not issubclass(a, b)


class TestDataset:
    def test_deterministic(self):
        v = task_vocab()
        a = make_dataset(1, (4, 4), v, seed=7)
        b = make_dataset(1, (4, 4), v, seed=7)
        (sa, ta), (sb, tb) = a[0], b[0]
        assert np.array_equal(sa.patches, sb.patches)
        assert sa.question == sb.question and sa.label == sb.label
        for w in ta.keys():
            assert ta[w].grid.tobytes() == tb[w].grid.tobytes()

    def test_labels_are_colours(self):
        v = task_vocab()
        data = make_dataset(500, (4, 4), v, seed=1)
        for s, t in data:
            assert len(s.label) == 1
            word = v.decode(s.label)[0]
            assert word in COLORS
            assert word in t

    def test_teacher_peaks_at_queried_cell(self):
        v = task_vocab()
        for s, t in make_dataset(50, (4, 4), v, seed=2):
            word = s.label_words[0]
            r, c = np.unravel_index(np.argmax(t[word].grid), (32, 32))
            assert (r // 8) * 4 + (c // 8) == s.meta["cell"]

    def test_vocab_too_small(self):
        with pytest.raises(ValueError, match="vocabulary too small"):
            make_dataset(3, (4, 4), task_vocab((2, 2)), seed=0)

    def test_split_disjoint_by_exhaustive_keys(self):
        train, test = make_split(500, 200, seed=0)
        key = lambda s: (s.meta["cell"], s.meta["color"])
        train_keys = {key(s) for s, _ in train}
        test_keys = {key(s) for s, _ in test}
        assert train_keys and test_keys
        assert train_keys.isdisjoint(test_keys)
        tr, te = split_combinations((4, 4), 8)
        assert train_keys <= tr and test_keys <= te
        assert len(tr) + len(te) == 128 and not tr & te

    def test_json_roundtrip(self, tmp_path):
        train, test = make_split(6, 4, seed=5)
        doc = dataset_to_json({"train": train, "test": test}, (4, 4), list(COLORS), 1.0, 5)
        splits, vocab = dataset_from_json(doc)
        for name, orig in (("train", train), ("test", test)):
            for (s0, t0), (s1, t1) in zip(orig, splits[name]):
                assert s0.sample_id == s1.sample_id
                assert np.array_equal(s0.patches, s1.patches)
                assert s0.question == s1.question and s0.label == s1.label
                assert t0.keys() == t1.keys()
                for w in t0.keys():
                    assert t0[w].grid.tobytes() == t1[w].grid.tobytes()
