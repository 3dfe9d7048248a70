import numpy as np
import pytest

from ganseg.datasets import (SyntheticPartsConfig, append_manifest, file_crc32,
                             load_annotation, load_dataset_dir, load_image,
                             make_synthetic_parts_dataset, oracle_annotate,
                             read_manifest, reference_palette, save_annotation,
                             save_image, write_dataset_dir)
from ganseg.errors import AnnotationError, DatasetError
from ganseg.segmenters import IGNORE_LABEL, PartAnnotation


def test_renderer_deterministic():
    cfg = SyntheticPartsConfig(dataset_size=20, rng_seed=7)
    img1, ann1 = make_synthetic_parts_dataset(cfg)
    img2, ann2 = make_synthetic_parts_dataset(cfg)
    assert np.array_equal(img1, img2)
    for a, b in zip(ann1, ann2):
        assert np.array_equal(a.labels, b.labels)


def test_label_values_and_presence(tiny_dataset):
    images, annotations = tiny_dataset
    presence = np.zeros(4)
    for a in annotations:
        assert set(np.unique(a.labels)) <= {0, 1, 2, 3}
        for c in range(4):
            presence[c] += (a.labels == c).any()
    assert np.all(presence / len(annotations) >= 0.9)


def test_class_fraction_stats(tiny_dataset):
    # bounds derived from the renderer's geometry: ellipse area pi*rx*ry,
    # minus at most ~2/3 of the head disc (the part overlapping the body),
    # discretization margins for the 32x32 label grid
    images, annotations = tiny_dataset
    cfg = SyntheticPartsConfig()
    r = cfg.resolution
    s_lo, s_hi = cfg.scale_range
    ellipse_lo = np.pi * (cfg.body_rx[0] * r * s_lo) * (cfg.body_ry[0] * r * s_lo)
    ellipse_hi = np.pi * (cfg.body_rx[1] * r * s_hi) * (cfg.body_ry[1] * r * s_hi)
    head_lo = np.pi * (cfg.head_radius[0] * r * s_lo) ** 2
    head_hi = np.pi * (cfg.head_radius[1] * r * s_hi) ** 2
    for a in annotations[:200]:
        body_px = ((a.labels == 1) | (a.labels == 2)).sum()
        head_px = (a.labels == 3).sum()
        stripe_px = (a.labels == 2).sum()
        assert (ellipse_lo - 0.7 * head_hi) * 0.8 <= body_px <= ellipse_hi * 1.15
        # heads may lose a slice to frame clipping at extreme poses
        assert head_lo * 0.5 <= head_px <= head_hi * 1.3
        assert 0 < stripe_px <= (cfg.stripe_width[1] * r * s_hi) \
            * (2 * cfg.body_ry[1] * r * s_hi) * 1.3


def test_images_in_range(tiny_dataset):
    images, _ = tiny_dataset
    assert images.dtype == np.float32
    assert images.min() >= -1.0 and images.max() <= 1.0


def test_degenerate_config_rejected():
    with pytest.raises(DatasetError, match="degenerate"):
        SyntheticPartsConfig(head_radius=(0.0, 0.0))
    with pytest.raises(DatasetError, match=">= 1"):
        make_synthetic_parts_dataset(SyntheticPartsConfig(dataset_size=0))


def test_oracle_matches_ground_truth(tiny_dataset):
    images, annotations = tiny_dataset
    agreement = [(oracle_annotate(images[i]).labels == annotations[i].labels).mean()
                 for i in range(50)]
    assert np.mean(agreement) > 0.97


def test_same_color_parts_flag():
    cfg = SyntheticPartsConfig(dataset_size=4, rng_seed=1, same_color_parts=True)
    images, annotations = make_synthetic_parts_dataset(cfg)
    for img, a in zip(images, annotations):
        body_color = img[a.labels == 1].mean(axis=0)
        head_color = img[a.labels == 3].mean(axis=0)
        assert np.abs(body_color - head_color).max() < 0.15


# --- annotation file IO -----------------------------------------------------------

def test_annotation_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, (64, 64)).astype(np.uint8)
    labels[0, :7] = IGNORE_LABEL
    ann = PartAnnotation(labels=labels, n_classes=4, class_names=["a", "b", "c", "d"])
    path = tmp_path / "mask.png"
    save_annotation(ann, path)
    loaded = load_annotation(path)
    assert np.array_equal(loaded.labels, labels)
    assert loaded.n_classes == 4
    assert loaded.class_names == ["a", "b", "c", "d"]
    assert (loaded.labels == IGNORE_LABEL).sum() == 7


def test_annotation_bad_values(tmp_path):
    with pytest.raises(AnnotationError, match="n_classes"):
        PartAnnotation(labels=np.full((4, 4), 9, np.uint8), n_classes=4)
    ann = PartAnnotation(labels=np.zeros((4, 4), np.uint8), n_classes=4)
    ann.labels = np.full((4, 4), 5, np.uint8)  # bypass ctor check
    with pytest.raises(AnnotationError, match="outside palette"):
        save_annotation(ann, tmp_path / "y.png")


def test_annotation_corrupt_file(tmp_path):
    path = tmp_path / "bad.png"
    path.write_bytes(b"\x89PNG\r\n\x1a\nnot really a png")
    with pytest.raises(AnnotationError, match="cannot read"):
        load_annotation(path)


def test_annotation_size_overflow(tmp_path):
    ann = PartAnnotation(labels=np.zeros((2, 2), np.uint8), n_classes=2)
    ann.labels = np.zeros((70000, 1), np.uint8)
    with pytest.raises(AnnotationError, match="exceeds"):
        save_annotation(ann, tmp_path / "big.png")


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    image = rng.uniform(-1, 1, (32, 32, 3)).astype(np.float32)
    path = tmp_path / "img.png"
    save_image(image, path)
    loaded = load_image(path)
    assert loaded.shape == (32, 32, 3)
    assert np.abs(loaded - image).max() <= 1.0 / 127.5  # 8-bit quantization


# --- manifests ---------------------------------------------------------------------

def test_manifest_append_read(tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    files = []
    for i in range(3):
        f = tmp_path / f"t{i}.bin"
        f.write_bytes(bytes([i] * 10))
        files.append(f)
        append_manifest(manifest, {"id": i, "blob": f.name,
                                   "checksum": {"blob": file_crc32(f)}})
    records = read_manifest(manifest)
    assert [r["id"] for r in records] == [0, 1, 2]


def test_manifest_detects_bitflip(tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    f = tmp_path / "t.bin"
    f.write_bytes(b"payload")
    append_manifest(manifest, {"id": 7, "blob": "t.bin",
                               "checksum": {"blob": file_crc32(f)}})
    f.write_bytes(b"paXload")
    with pytest.raises(DatasetError, match="id=7"):
        read_manifest(manifest)


def test_manifest_empty_and_missing(tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("")
    assert read_manifest(manifest) == []
    with pytest.raises(DatasetError, match="not found"):
        read_manifest(tmp_path / "nope.jsonl")


def test_manifest_malformed_line(tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text('{"id": 0}\nnot json\n')
    with pytest.raises(DatasetError, match="malformed"):
        read_manifest(manifest)


def test_dataset_dir_round_trip(tmp_path):
    cfg = SyntheticPartsConfig(dataset_size=6, rng_seed=3)
    images, annotations = make_synthetic_parts_dataset(cfg)
    root = write_dataset_dir(images, annotations, tmp_path / "ds", rng_seed=0)
    loaded_images, loaded_anns, split = load_dataset_dir(root, verify_checksums=True)
    assert loaded_images.shape == images.shape
    assert np.abs(loaded_images - images).max() <= 1.0 / 127.5
    for a, b in zip(loaded_anns, annotations):
        assert np.array_equal(a.labels, b.labels)
    assert sorted(split["train"] + split["test"]) == list(range(6))
