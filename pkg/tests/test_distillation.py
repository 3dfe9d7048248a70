import numpy as np
import pytest
import torch

from ganseg import distillation
from ganseg.distillation import (AugmentationConfig, AutoShotTrainConfig,
                                 BACKGROUND_FILL_LOGIT, DistilledSample,
                                 PlateauLrScheduler, TransformParams, UNetSpec,
                                 apply_augmentation, augment, build_unet,
                                 draw_transform, generate_distilled_dataset,
                                 load_distilled_dataset, load_unet, predict_unet,
                                 save_unet, train_autoshot,
                                 train_supervised_baseline, validation_split)
from ganseg.errors import DatasetError, ShapeError, TrainingError
from ganseg.representation import LayerSelection, extract_representation
from ganseg.backbone import generate_with_taps, sample_latent
from ganseg.segmenters import (FewShotTrainConfig, LogitMap, PartAnnotation,
                               SegmenterSpec, build_segmenter, predict,
                               train_fewshot)

ALL = LayerSelection(mode="all")


@pytest.fixture(scope="module")
def teacher(tiny_gan):
    """A barely-trained few-shot segmenter; quality is irrelevant here."""
    from ganseg.datasets import oracle_annotate
    z = sample_latent(tiny_gan, 0)
    img, stack = generate_with_taps(tiny_gan, z, ALL)
    rep = extract_representation(stack, ALL)
    model = build_segmenter(SegmenterSpec("CNN_S", rep.n_channels, 4), rng_seed=0)
    model, _ = train_fewshot(model, [(rep, oracle_annotate(img))],
                             FewShotTrainConfig(epochs=3))
    return model


def random_sample(rng, h=32, w=32, n=4):
    img = rng.uniform(-1, 1, (h, w, 3)).astype(np.float32)
    tgt = LogitMap(rng.standard_normal((h, w, n)).astype(np.float32))
    return DistilledSample(image=img, target=tgt)


# --- dataset generation ---------------------------------------------------------

def test_generate_dataset_contract(tiny_gan, teacher, tmp_path):
    samples, manifest = generate_distilled_dataset(
        tiny_gan, teacher, ALL, n=3, rng_seed=5, out_dir=tmp_path / "d")
    assert len(samples) == 3
    assert manifest.exists()
    for s in samples:
        assert s.target.scores.shape == (32, 32, 4)
        assert s.image.shape == (32, 32, 3)
        assert s.checksum is not None
    loaded = load_distilled_dataset(tmp_path / "d")
    assert len(loaded) == 3
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.target.scores, b.target.scores)  # bit-exact round trip
        assert a.provenance["seed"] == b.provenance["seed"]


def test_generate_dataset_rep_resolution_debug(tiny_gan, teacher):
    samples, _ = generate_distilled_dataset(tiny_gan, teacher, ALL, n=1,
                                            rng_seed=1, keep_rep_resolution=True)
    z = sample_latent(tiny_gan, samples[0].provenance["seed"])
    _, stack = generate_with_taps(tiny_gan, z, ALL)
    rep = extract_representation(stack, ALL)
    direct = predict(teacher, rep)
    assert np.array_equal(samples[0].target.scores, direct.scores)


def test_generate_dataset_deterministic(tiny_gan, teacher, tmp_path):
    _, m1 = generate_distilled_dataset(tiny_gan, teacher, ALL, n=2, rng_seed=9,
                                       out_dir=tmp_path / "a")
    _, m2 = generate_distilled_dataset(tiny_gan, teacher, ALL, n=2, rng_seed=9,
                                       out_dir=tmp_path / "b")
    assert m1.read_text() == m2.read_text()
    with pytest.raises(DatasetError):
        generate_distilled_dataset(tiny_gan, teacher, ALL, n=0)


def test_dataset_corruption_detected(tiny_gan, teacher, tmp_path):
    generate_distilled_dataset(tiny_gan, teacher, ALL, n=2, rng_seed=2,
                               out_dir=tmp_path / "d")
    target = tmp_path / "d" / "targets" / "00001.gsar"
    blob = bytearray(target.read_bytes())
    blob[-10] ^= 0xFF
    target.write_bytes(bytes(blob))
    with pytest.raises(DatasetError, match="checksum"):
        load_distilled_dataset(tmp_path / "d")


# --- augmentation ----------------------------------------------------------------

def test_identity_config_is_noop():
    rng = np.random.default_rng(0)
    s = random_sample(rng)
    out = augment(s, AugmentationConfig.identity(), np.random.default_rng(1))
    assert np.array_equal(out.image, s.image)
    assert np.array_equal(out.target.scores, s.target.scores)


def test_hflip_involution_exact():
    rng = np.random.default_rng(1)
    s = random_sample(rng)
    flip = TransformParams(hflip=True)
    twice = apply_augmentation(apply_augmentation(s, flip), flip)
    assert np.array_equal(twice.image, s.image)
    assert np.array_equal(twice.target.scores, s.target.scores)


def test_draw_ranges_bulk():
    cfg = AugmentationConfig()
    rng = np.random.default_rng(2)
    for _ in range(1000):
        p = draw_transform(cfg, rng)
        assert 0.5 <= p.scale <= 2.0
        assert -10.0 <= p.rotation_deg <= 10.0
        assert all(0.0 <= abs(t) <= 0.5 for t in p.translate)


def test_translation_fills_exposed_regions():
    rng = np.random.default_rng(3)
    s = random_sample(rng)
    p = TransformParams(translate=(0.5, 0.0))  # shift by half the width
    out = apply_augmentation(s, p, fill_value=-1.0)
    # one vertical half is exposed: image filled with -1, target favors class 0
    cols = np.where(np.all(out.image == -1.0, axis=(0, 2)))[0]
    assert len(cols) >= 14
    fill_logits = out.target.scores[:, cols[0], :]
    assert np.allclose(fill_logits[:, 0], BACKGROUND_FILL_LOGIT, atol=1e-5)
    assert np.allclose(fill_logits[:, 1:], 0.0, atol=1e-5)


def test_scale_range_validation():
    with pytest.raises(ValueError, match="positive"):
        AugmentationConfig(scale_range=(0.0, 1.0))
    with pytest.raises(ValueError, match="ordered"):
        AugmentationConfig(rotation_range_deg=(5.0, -5.0))


def test_rotation_moves_content():
    rng = np.random.default_rng(4)
    s = random_sample(rng)
    out = apply_augmentation(s, TransformParams(rotation_deg=10.0))
    assert not np.array_equal(out.image, s.image)
    assert np.isfinite(out.image).all()


# --- UNet --------------------------------------------------------------------------

def test_unet_shapes():
    net = build_unet(UNetSpec(n_classes=10), rng_seed=0)
    out = predict_unet(net, np.zeros((64, 64, 3), np.float32))
    assert out.scores.shape == (64, 64, 10)
    out = predict_unet(net, np.zeros((50, 70, 3), np.float32))
    assert out.scores.shape == (50, 70, 10)
    assert net.bottleneck_resolution(64, 64) == (4, 4)
    with pytest.raises(ShapeError, match="smaller than 16"):
        predict_unet(net, np.zeros((15, 32, 3), np.float32))


def test_unet_architecture_table():
    net = build_unet(UNetSpec(n_classes=4))
    enc_out = [block[3].out_channels for block in net.enc_blocks]
    assert enc_out == [64, 128, 256, 512, 512]
    dec_in = [block[0].in_channels for block in net.dec_blocks]
    assert dec_in == [1024, 768, 384, 192]
    dec_out = [block[3].out_channels for block in net.dec_blocks]
    assert dec_out == [512, 256, 128, 64]
    assert net.head.kernel_size == (1, 1)
    # batch norm + ReLU in every double-conv block, none on the head
    assert all(isinstance(b[1], torch.nn.BatchNorm2d) for b in net.enc_blocks)


# --- schedulers and training ---------------------------------------------------------

def test_plateau_exactly_one_decay_on_flat_trace():
    sched = PlateauLrScheduler(base_lr=1e-3, factor=0.1, patience=20)
    events = [sched.step(1.0) for _ in range(21)]
    assert sum(events) == 1
    assert sched.lr == pytest.approx(1e-4)


def test_plateau_no_decay_on_improving_trace():
    sched = PlateauLrScheduler(base_lr=1e-3, factor=0.1, patience=3)
    events = [sched.step(v) for v in np.linspace(1.0, 0.5, 30)]
    assert sum(events) == 0
    assert sched.lr == 1e-3


def test_plateau_counter_resets_after_decay():
    sched = PlateauLrScheduler(base_lr=1.0, factor=0.1, patience=2)
    trace = [1.0, 1.0, 1.0, 1.0, 1.0]  # first sets best; decays at 3rd and 5th
    events = [sched.step(v) for v in trace]
    assert events == [False, False, True, False, True]


def test_validation_split_properties():
    train, val = validation_split(20, 0.25, seed=3)
    assert len(val) == 5 and len(train) == 15
    assert set(train).isdisjoint(val)
    assert sorted(train + val) == list(range(20))
    t2, v2 = validation_split(20, 0.25, seed=3)
    assert (train, val) == (t2, v2)
    t3, v3 = validation_split(20, 0.25, seed=4)
    assert (train, val) != (t3, v3)
    with pytest.raises(TrainingError, match="validation"):
        validation_split(2, 0.9, seed=0)


def test_one_hot_vs_logit_loss_relation():
    # with near-one-hot teacher logits (x10) the soft-target loss matches the
    # hard-label loss up to the tiny soft-target entropy
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 4, (2, 32, 32))
    one_hot = np.eye(4, dtype=np.float32)[labels] * 10.0
    images = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32))
    targets = torch.from_numpy(one_hot).permute(0, 3, 1, 2)
    net = build_unet(UNetSpec(n_classes=4), rng_seed=0)
    net.eval()
    with torch.no_grad():
        soft = distillation._batch_loss(net, images, targets, "logits").item()
        hard = distillation._batch_loss(net, images, targets, "one_hot").item()
    assert abs(soft - hard) < 1e-3


def test_logits_mode_never_hardens_targets(monkeypatch, tiny_gan, teacher):
    samples, _ = generate_distilled_dataset(tiny_gan, teacher, ALL, n=4, rng_seed=0)

    def forbidden(scores):
        raise AssertionError("argmax applied to logit targets")

    monkeypatch.setattr(distillation, "_hard_labels", forbidden)
    cfg = AutoShotTrainConfig(epochs=1, batch_size=2, target_mode="logits",
                              validation_fraction=0.25)
    net = build_unet(UNetSpec(n_classes=4), rng_seed=0)
    train_autoshot(net, samples, AugmentationConfig.identity(), cfg)  # must not raise

    cfg_hard = AutoShotTrainConfig(epochs=1, batch_size=2, target_mode="one_hot",
                                   validation_fraction=0.25)
    with pytest.raises(AssertionError, match="argmax"):
        train_autoshot(build_unet(UNetSpec(n_classes=4)), samples,
                       AugmentationConfig.identity(), cfg_hard)


def test_train_autoshot_runs_and_traces(tiny_gan, teacher):
    samples, _ = generate_distilled_dataset(tiny_gan, teacher, ALL, n=6, rng_seed=3)
    cfg = AutoShotTrainConfig(epochs=2, batch_size=3, validation_fraction=0.2)
    net = build_unet(UNetSpec(n_classes=4), rng_seed=1)
    net, trace = train_autoshot(net, samples, AugmentationConfig.identity(), cfg)
    assert len(trace) == 2
    assert {"epoch", "train_loss", "val_loss", "lr", "lr_decayed"} <= set(trace[0])
    assert np.isfinite([t["train_loss"] for t in trace]).all()


def test_train_autoshot_errors(tiny_gan, teacher):
    cfg = AutoShotTrainConfig(epochs=1)
    with pytest.raises(TrainingError, match="empty"):
        train_autoshot(build_unet(UNetSpec(n_classes=4)), [], None, cfg)
    samples, _ = generate_distilled_dataset(tiny_gan, teacher, ALL, n=2, rng_seed=0)
    wrong = build_unet(UNetSpec(n_classes=7))
    with pytest.raises(TrainingError, match="classes"):
        train_autoshot(wrong, samples, None, cfg)


def test_supervised_baseline_single_label():
    rng = np.random.default_rng(6)
    image = rng.uniform(-1, 1, (32, 32, 3)).astype(np.float32)
    ann = PartAnnotation(labels=rng.integers(0, 4, (32, 32)).astype(np.uint8),
                         n_classes=4)
    net = build_unet(UNetSpec(n_classes=4), rng_seed=0)
    net, trace = train_supervised_baseline(
        net, [(image, ann)], AutoShotTrainConfig(epochs=1, batch_size=1))
    assert len(trace) == 1 and np.isfinite(trace[0]["train_loss"])


def test_unet_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    net = build_unet(UNetSpec(n_classes=4), rng_seed=2)
    image = rng.uniform(-1, 1, (32, 32, 3)).astype(np.float32)
    before = predict_unet(net, image)
    path = tmp_path / "unet.gsar"
    save_unet(net, path)
    loaded = load_unet(path)
    after = predict_unet(loaded, image)
    assert np.array_equal(before.scores, after.scores)
