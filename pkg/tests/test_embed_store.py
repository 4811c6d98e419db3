import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pathforge.embed_store import (
    PROFILES,
    EmbeddingMatrix,
    EmbeddingSet,
    EncoderProfile,
    decode_embeddings,
    encode_embeddings,
    get_profile,
    read_embedding_set,
    read_embeddings,
    read_labels,
    shuffle_labels,
    synth_embedding_dataset,
    write_embedding_set,
    write_embeddings,
    write_labels,
)
from pathforge.errors import (
    BadMagicError,
    BadVersionError,
    DimensionMismatchError,
    InvalidInputError,
    LengthMismatchError,
    NonFiniteError,
)


def random_matrix(n, d, seed=0, slide_id="s"):
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, 2**32, (n, 2), dtype=np.uint64)
    return EmbeddingMatrix(slide_id, coords, rng.standard_normal((n, d)).astype(np.float32))


def test_registry():
    assert {(p.name, p.dim) for p in PROFILES.values()} == {
        ("truncated-ResNet50-IN", 1024),
        ("ResNet50-IN", 2048),
        ("DINO-ViT-S", 384),
        ("MAE-ViT-L", 1024),
    }
    assert get_profile("DINO-ViT-S").dim == 384
    assert get_profile("mine", 17) == EncoderProfile("mine", 17)
    with pytest.raises(DimensionMismatchError):
        get_profile("DINO-ViT-S", 383)
    with pytest.raises(InvalidInputError):
        get_profile("unknown")


class TestSingleMatrix:
    def test_tiny_round_trip(self, tmp_path):
        m = EmbeddingMatrix("one", [[3, 4]], [[1.5, -2.0, 0.0, 7.25]])
        back = read_embeddings(write_embeddings(m, tmp_path))
        assert back.values.tobytes() == m.values.tobytes()
        assert back.coords.tolist() == [[3, 4]]
        assert back.slide_id == "one"

    def test_file_size(self, tmp_path):
        path = write_embeddings(random_matrix(1000, 384), tmp_path)
        assert path.stat().st_size == 24 + 1000 * 8 + 1000 * 384 * 4

    def test_layout(self):
        m = EmbeddingMatrix("s", [[1, 2], [3, 4]], [[1.0, 2.0], [3.0, 4.0]])
        data = encode_embeddings(m)
        assert data[:24] == b"PEMB" + struct.pack("<IIIQ", 1, 2, 2, 0)
        assert data[24:40] == struct.pack("<4I", 1, 2, 3, 4)
        assert data[40:] == struct.pack("<4f", 1.0, 2.0, 3.0, 4.0)

    def test_truncated(self, tmp_path):
        path = write_embeddings(random_matrix(10, 8), tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(LengthMismatchError):
            read_embeddings(path)

    def test_trailing_bytes(self):
        with pytest.raises(LengthMismatchError):
            decode_embeddings(encode_embeddings(random_matrix(3, 4)) + b"\0")

    def test_short_header(self):
        with pytest.raises(LengthMismatchError):
            decode_embeddings(b"PEMB")

    def test_bad_magic(self):
        data = bytearray(encode_embeddings(random_matrix(3, 4)))
        data[0:4] = b"XEMB"
        with pytest.raises(BadMagicError):
            decode_embeddings(bytes(data))

    def test_bad_version(self):
        data = bytearray(encode_embeddings(random_matrix(3, 4)))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(BadVersionError):
            decode_embeddings(bytes(data))

    def test_nan_payload(self):
        data = bytearray(encode_embeddings(random_matrix(3, 4)))
        data[-4:] = struct.pack("<f", float("nan"))
        with pytest.raises(NonFiniteError):
            decode_embeddings(bytes(data))

    def test_nan_rejected_before_write(self, tmp_path):
        m = random_matrix(3, 4)
        m.values[1, 2] = np.inf
        with pytest.raises(NonFiniteError):
            write_embeddings(m, tmp_path)
        assert not list(tmp_path.iterdir())

    def test_dim_mismatch(self, tmp_path):
        path = write_embeddings(random_matrix(5, 383), tmp_path)
        with pytest.raises(DimensionMismatchError):
            read_embeddings(path, expected_dim=get_profile("DINO-ViT-S").dim)

    def test_empty_matrix(self):
        with pytest.raises(InvalidInputError):
            EmbeddingMatrix("s", np.zeros((0, 2)), np.zeros((0, 4)))


@settings(max_examples=100, deadline=None)
@given(
    values=arrays(
        np.float32,
        st.tuples(st.integers(1, 20), st.integers(1, 16)),
        elements=st.floats(allow_nan=False, allow_infinity=False, width=32),
    ),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_is_bit_exact(values, seed):
    coords = np.random.default_rng(seed).integers(0, 2**32, (values.shape[0], 2), dtype=np.uint64)
    m = EmbeddingMatrix("s", coords, values)
    back = decode_embeddings(encode_embeddings(m), "s")
    assert back.values.tobytes() == m.values.tobytes()
    assert back.coords.tobytes() == m.coords.tobytes()


class TestSets:
    def test_set_round_trip(self, tmp_path):
        es = synth_embedding_dataset(6, (2, 5), 8, 0.5, 1.0, seed=3, checkpoint_tag="ep10")
        write_embedding_set(es, tmp_path)
        lines = (tmp_path / "set.tsv").read_text().splitlines()
        assert lines[:3] == ["#profile=synthetic-8", "#dim=8", "#checkpoint=ep10"]
        assert lines[3] == "slide_0\tslides/slide_0.pemb"
        back = read_embedding_set(tmp_path)
        assert back.checkpoint_tag == "ep10" and back.labels == es.labels
        for sid, m in es.slides.items():
            assert back.slides[sid].values.tobytes() == m.values.tobytes()

    def test_set_rejects_wrong_dim(self, tmp_path):
        es = synth_embedding_dataset(4, (2, 3), 8, 0.5, 1.0, seed=0)
        write_embedding_set(es, tmp_path)
        write_embeddings(random_matrix(2, 7, slide_id="slide_1"), tmp_path / "slides")
        with pytest.raises(DimensionMismatchError):
            read_embedding_set(tmp_path)

    def test_in_memory_dim_check(self):
        with pytest.raises(DimensionMismatchError):
            EmbeddingSet(EncoderProfile("p", 4), "t", {"s": random_matrix(2, 5)})

    def test_label_for_missing_slide(self):
        with pytest.raises(InvalidInputError):
            EmbeddingSet(EncoderProfile("p", 4), "t", {"s": random_matrix(2, 4)}, {"s": 1, "t": 0})

    def test_labels_file(self, tmp_path):
        write_labels({"b": 1, "a": 0}, tmp_path / "l.tsv")
        assert (tmp_path / "l.tsv").read_text() == "a\t0\nb\t1\n"
        assert read_labels(tmp_path / "l.tsv") == {"a": 0, "b": 1}
        (tmp_path / "bad.tsv").write_text("a\t2\n")
        with pytest.raises(InvalidInputError):
            read_labels(tmp_path / "bad.tsv")


class TestSynthetic:
    def test_balanced_and_sized(self):
        es = synth_embedding_dataset(21, (5, 9), 4, 0.3, 1.0, seed=1)
        assert len(es.slides) == 21
        assert sum(es.labels.values()) == 10
        assert all(5 <= m.n_tiles <= 9 for m in es.slides.values())

    def test_same_seed_same_bytes(self, tmp_path):
        for run in ("a", "b"):
            es = synth_embedding_dataset(8, (3, 6), 16, 0.3, 2.0, seed=11)
            write_embedding_set(es, tmp_path / run)
        for path in sorted((tmp_path / "a" / "slides").iterdir()):
            assert path.read_bytes() == (tmp_path / "b" / "slides" / path.name).read_bytes()

    def test_shift_is_only_difference(self):
        # varying effect_size moves exactly the planted tiles of positive slides
        base = synth_embedding_dataset(20, (10, 20), 8, 0.3, 0.0, seed=5)
        shifted = synth_embedding_dataset(20, (10, 20), 8, 0.3, 2.0, seed=5)
        assert base.labels == shifted.labels
        moved_dirs = []
        for sid, m in base.slides.items():
            delta = shifted.slides[sid].values.astype(np.float64) - m.values
            rows = np.flatnonzero(np.abs(delta).max(axis=1) > 1e-3)
            if base.labels[sid] == 0:
                assert rows.size == 0
            else:
                assert rows.size == round(0.3 * m.n_tiles)
                moved_dirs.append(delta[rows])
        moved = np.concatenate(moved_dirs)
        np.testing.assert_allclose(np.linalg.norm(moved, axis=1), 2.0, atol=1e-5)
        np.testing.assert_allclose(moved, np.broadcast_to(moved[0], moved.shape), atol=1e-5)

    def test_zero_effect_classes_match(self):
        es = synth_embedding_dataset(200, (50, 100), 8, 0.5, 0.0, seed=2)
        pooled = {y: np.concatenate([es.slides[s].values for s in es.sample_ids if es.labels[s] == y])
                  for y in (0, 1)}
        for y in (0, 1):
            assert np.abs(pooled[y].mean(axis=0)).max() < 0.03
            assert np.abs(pooled[y].std(axis=0) - 1).max() < 0.03

    def test_strong_signal_separable_by_mean_pool(self):
        es = synth_embedding_dataset(100, (20, 60), 8, 1.0, 10.0, seed=4)
        ids = es.sample_ids
        pooled = np.stack([es.slides[s].values.mean(axis=0) for s in ids])
        y = np.array([es.labels[s] for s in ids])
        # project on the difference of class means and threshold at the midpoint
        axis = pooled[y == 1].mean(0) - pooled[y == 0].mean(0)
        score = pooled @ axis
        assert score[y == 1].min() > score[y == 0].max()

    def test_invalid_arguments(self):
        with pytest.raises(InvalidInputError):
            synth_embedding_dataset(4, (2, 3), 4, 1.5, 1.0, 0)
        with pytest.raises(InvalidInputError):
            synth_embedding_dataset(4, (2, 3), 4, 0.5, -1.0, 0)
        with pytest.raises(InvalidInputError):
            synth_embedding_dataset(4, (3, 2), 4, 0.5, 1.0, 0)

    def test_shuffle_keeps_balance(self):
        es = synth_embedding_dataset(30, (2, 3), 4, 0.5, 1.0, seed=0)
        null = shuffle_labels(es, 1)
        assert sum(null.labels.values()) == sum(es.labels.values())
        assert null.labels != es.labels
        assert null.slides is es.slides
