import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vilhub.data import (DATASET_MAGIC, Dataset, GeneratorConfig, InvalidPixelError,
                         LabeledShape, LabelRangeError, LabelVocabulary, MagicMismatchError,
                         PointCloud, TruncatedFileError, datasets_equal, export_vocabularies,
                         generate_synthetic_dataset, load_dataset, normalize_cloud,
                         pack_mask_pixel, save_dataset, split_dataset, unpack_mask_pixel,
                         zipf_class_counts)

from oracles import oracle_pack


# ---- point clouds ---------------------------------------------------------

def test_normalize_single_point():
    c = normalize_cloud(PointCloud([[5.0, 5.0, 5.0]], [[0.1, 0.2, 0.3]]))
    assert np.array_equal(c.coords, [[0.0, 0.0, 0.0]])
    assert np.array_equal(c.colors, [[0.1, 0.2, 0.3]])


def test_normalize_two_points():
    c = normalize_cloud(PointCloud([[0, 0, 0], [0, 0, 2.0]], np.zeros((2, 3))))
    assert np.allclose(c.coords, [[0, 0, -1], [0, 0, 1]], atol=0)


def test_normalize_random(rng):
    c = normalize_cloud(PointCloud(rng.normal(size=(10, 3)) * 7 + 3, rng.uniform(size=(10, 3))))
    assert np.abs(c.coords.mean(axis=0)).max() < 1e-9
    assert abs(np.linalg.norm(c.coords, axis=1).max() - 1) < 1e-9


@pytest.mark.parametrize("coords,colors", [
    (np.zeros((0, 3)), np.zeros((0, 3))),
    (np.zeros((2, 2)), np.zeros((2, 2))),
    ([[np.nan, 0, 0]], [[0, 0, 0]]),
    ([[0, 0, 0]], [[1.5, 0, 0]]),
])
def test_point_cloud_rejects_bad_input(coords, colors):
    with pytest.raises(ValueError):
        PointCloud(coords, colors)


def test_vocabulary_rejects_duplicates_and_empty():
    with pytest.raises(ValueError):
        LabelVocabulary(("a", "a"))
    with pytest.raises(ValueError):
        LabelVocabulary(())


# ---- generator ------------------------------------------------------------

def test_generator_is_deterministic(small_cfg):
    assert datasets_equal(generate_synthetic_dataset(small_cfg),
                          generate_synthetic_dataset(small_cfg))


def test_generator_zipf_zero_is_uniform():
    counts = zipf_class_counts(103, 10, 0.0)
    assert counts.sum() == 103
    assert np.all(np.abs(counts - 103 / 10) <= 1)


def test_generator_long_tail_counts():
    counts = zipf_class_counts(1000, 20, 1.5)
    assert counts.sum() == 1000
    assert np.all(np.diff(counts) <= 0)
    assert counts[0] / counts[-1] >= 20


def test_generated_shapes_structure(small_ds, small_cfg):
    assert len(small_ds) == small_cfg.shapes_total
    counts = small_ds.class_counts()
    assert np.all(np.diff(counts) <= 0)
    for s in small_ds.shapes:
        assert len(s) == small_cfg.points_per_shape
        parts, sizes = np.unique(s.part_labels, return_counts=True)
        assert 2 <= len(parts) <= 6
        assert sizes.min() >= 8
        for p in parts:
            # one material per part instance
            assert len(np.unique(s.material_labels[s.part_labels == p])) == 1
        assert abs(np.linalg.norm(s.cloud.coords, axis=1).max() - 1) < 1e-6
        assert s.cloud.colors.min() >= 0 and s.cloud.colors.max() <= 1


def test_class_templates_are_fixed(small_ds):
    by_class = {}
    for s in small_ds.shapes:
        parts = frozenset(np.unique(s.part_labels).tolist())
        by_class.setdefault(s.shape_class, set()).add(parts)
    assert all(len(v) == 1 for v in by_class.values())


def test_generator_rejects_bad_configs():
    for bad in (dict(shapes_total=3, n_shape_classes=5), dict(zipf_exponent=-1.0),
                dict(n_part_classes=1), dict(points_per_shape=10), dict(seed=-1)):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(GeneratorConfig(**bad))


# ---- splits ---------------------------------------------------------------

def test_split_all_train(small_ds):
    ds = split_dataset(small_ds, (1, 0, 0), 0)
    assert np.all(ds.split_of == 0)


def test_split_standard_sizes():
    ds = generate_synthetic_dataset(GeneratorConfig(shapes_total=1000, points_per_shape=48, seed=7))
    sp = split_dataset(ds, (0.75, 0.10, 0.15), 7)
    sizes = np.bincount(sp.split_of, minlength=3)
    assert 730 <= sizes[0] <= 770
    assert np.all(np.abs(sizes - np.array([750, 100, 150])) <= 20)
    # each class keeps at least one training shape
    classes = np.array([s.shape_class for s in sp.shapes])
    assert set(classes[sp.split_of == 0]) == set(classes)
    again = split_dataset(ds, (0.75, 0.10, 0.15), 7)
    assert np.array_equal(sp.split_of, again.split_of)


def test_split_rejects_bad_fractions(small_ds):
    with pytest.raises(ValueError):
        split_dataset(small_ds, (0.5, 0.2, 0.2), 0)


# ---- mask codec -----------------------------------------------------------

def test_pack_worked_examples():
    assert pack_mask_pixel(0, 0, 0) == (0, 0, 0)
    assert 5 + 2 * 2048 + 3 * 65536 == 200709 == 0x031005
    assert pack_mask_pixel(5, 2, 3) == (3, 16, 5)
    assert unpack_mask_pixel(3, 16, 5) == (5, 2, 3)
    assert pack_mask_pixel(2047, 31, 127) == (127, 255, 255)
    assert unpack_mask_pixel(0, 0, 0) == (0, 0, 0)


def test_pack_boundaries_exhaustive():
    for part, coarse, fine in itertools.product((0, 1, 2046, 2047), range(32), range(128)):
        rgb = pack_mask_pixel(part, coarse, fine)
        assert rgb == oracle_pack(part, coarse, fine)
        assert unpack_mask_pixel(*rgb) == (part, coarse, fine)


def test_pack_random_roundtrip(rng):
    triples = np.stack([rng.integers(0, 2048, 100_000), rng.integers(0, 32, 100_000),
                        rng.integers(0, 128, 100_000)], axis=1)
    for part, coarse, fine in triples.tolist():
        assert unpack_mask_pixel(*pack_mask_pixel(part, coarse, fine)) == (part, coarse, fine)


@pytest.mark.parametrize("triple", [(2048, 0, 0), (0, 32, 0), (0, 0, 128), (-1, 0, 0)])
def test_pack_rejects_out_of_range(triple):
    with pytest.raises(ValueError):
        pack_mask_pixel(*triple)


def test_unpack_rejects_reserved_bit():
    with pytest.raises(InvalidPixelError):
        unpack_mask_pixel(128, 0, 0)
    with pytest.raises(ValueError):
        unpack_mask_pixel(0, 256, 0)


@given(st.integers(0, 127), st.integers(0, 255), st.integers(0, 255))
def test_unpack_then_pack_is_identity(r, g, b):
    assert pack_mask_pixel(*unpack_mask_pixel(r, g, b)) == (r, g, b)


# ---- file format ----------------------------------------------------------

def test_roundtrip_generated(tmp_path, small_ds):
    path = tmp_path / "ds.c3ds"
    save_dataset(small_ds, path)
    back = load_dataset(path)
    assert datasets_equal(small_ds, back)
    save_dataset(back, tmp_path / "again.c3ds")
    assert path.read_bytes() == (tmp_path / "again.c3ds").read_bytes()


def test_roundtrip_empty(tmp_path):
    ds = Dataset([], LabelVocabulary(("a",)), LabelVocabulary(("m", "n")), LabelVocabulary(("s",)))
    save_dataset(ds, tmp_path / "e.c3ds")
    back = load_dataset(tmp_path / "e.c3ds")
    assert datasets_equal(ds, back) and len(back) == 0


def test_header_layout(tmp_path, small_ds):
    save_dataset(small_ds, tmp_path / "ds.c3ds")
    raw = (tmp_path / "ds.c3ds").read_bytes()
    assert raw[:4] == DATASET_MAGIC
    version, n, cp, cm, cs = struct.unpack_from("<HIIII", raw, 4)
    assert (version, n, cp, cm, cs) == (1, len(small_ds), 8, 5, 4)


def test_load_errors_are_distinct(tmp_path, small_ds):
    save_dataset(small_ds, tmp_path / "ds.c3ds")
    raw = bytearray((tmp_path / "ds.c3ds").read_bytes())
    bad = tmp_path / "bad.c3ds"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MagicMismatchError):
        load_dataset(bad)
    bad.write_bytes(raw[:-7])
    with pytest.raises(TruncatedFileError):
        load_dataset(bad)
    # last material label of the last shape -> out of vocabulary
    raw[-2:] = struct.pack("<H", 999)
    bad.write_bytes(raw)
    with pytest.raises(LabelRangeError):
        load_dataset(bad)


def test_label_range_checked_on_construction():
    cloud = PointCloud(np.zeros((2, 3)), np.zeros((2, 3)))
    shape = LabeledShape(cloud, [0, 3], [0, 0], 0)
    with pytest.raises(LabelRangeError):
        Dataset([shape], LabelVocabulary(("a", "b")), LabelVocabulary(("m",)), LabelVocabulary(("s",)))


def test_export_vocabularies(tmp_path, small_ds):
    import json
    export_vocabularies(small_ds, tmp_path)
    assert json.loads((tmp_path / "parts.json").read_text()) == list(small_ds.part_vocab.names)
    assert json.loads((tmp_path / "classes.json").read_text()) == list(small_ds.shape_vocab.names)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_split_partitions(seed):
    ds = generate_synthetic_dataset(GeneratorConfig(n_shape_classes=3, n_part_classes=4,
                                                    n_material_classes=3, shapes_total=12,
                                                    points_per_shape=48, seed=1))
    sp = split_dataset(ds, (0.5, 0.25, 0.25), seed)
    assert sorted(np.concatenate([sp.indices(k) for k in range(3)]).tolist()) == list(range(12))
