import numpy as np
import pytest

from ganseg.archive import FORMAT_VERSION, load_archive, save_archive
from ganseg.errors import ArchiveError


@pytest.fixture
def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "layer0.weight": rng.standard_normal((4, 3, 2, 2)).astype(np.float32),
        "layer0.bias": rng.standard_normal(4).astype(np.float32),
        "labels": rng.integers(0, 10, size=(8, 8)).astype(np.uint8),
    }


def test_round_trip(tmp_path, sample_tensors):
    path = tmp_path / "a.gsar"
    save_archive(path, "generator_checkpoint", sample_tensors, {"latent_dim": 16})
    kind, meta, tensors = load_archive(path)
    assert kind == "generator_checkpoint"
    assert meta == {"latent_dim": 16}
    assert set(tensors) == set(sample_tensors)
    for name in sample_tensors:
        assert tensors[name].dtype == sample_tensors[name].dtype
        assert np.array_equal(tensors[name], sample_tensors[name])


def test_insertion_order_preserved(tmp_path):
    path = tmp_path / "a.gsar"
    tensors = {f"t{i}": np.full(3, i, np.float32) for i in (5, 1, 3)}
    save_archive(path, "x", tensors)
    _, _, loaded = load_archive(path)
    assert list(loaded) == ["t5", "t1", "t3"]


def test_truncated_file(tmp_path, sample_tensors):
    path = tmp_path / "a.gsar"
    save_archive(path, "x", sample_tensors)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ArchiveError):
        load_archive(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "a.gsar"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ArchiveError, match="magic"):
        load_archive(path)


def test_checksum_mismatch(tmp_path, sample_tensors):
    path = tmp_path / "a.gsar"
    save_archive(path, "x", sample_tensors)
    blob = bytearray(path.read_bytes())
    blob[-20] ^= 0xFF  # flip a payload byte
    path.write_bytes(bytes(blob))
    with pytest.raises(ArchiveError, match="checksum"):
        load_archive(path)


def test_kind_mismatch(tmp_path, sample_tensors):
    path = tmp_path / "a.gsar"
    save_archive(path, "segmenter", sample_tensors)
    with pytest.raises(ArchiveError, match="kind"):
        load_archive(path, expect_kind="generator_checkpoint")


def test_version_check(tmp_path, sample_tensors):
    import struct
    path = tmp_path / "a.gsar"
    save_archive(path, "x", sample_tensors)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    path.write_bytes(bytes(blob))
    with pytest.raises(ArchiveError, match="version"):
        load_archive(path)
