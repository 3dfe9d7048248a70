"""Auto-shot stage: distill a few-shot segmenter into a standalone UNet.

The trained generator synthesizes a large image set; the few-shot segmenter
predicts a logit map for each (kept raw — no softmax or argmax — so the
teacher's confidence survives into training); geometric augmentation covers
scale/orientation/position shifts; and a UNet learns to segment raw images
directly, with no latent optimization at inference time.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .backbone import GeneratorHandle, generate_with_taps, sample_latent
from .determinism import deterministic_mode, seed_all
from .errors import DatasetError, ShapeError, TrainingError
from .representation import extract_representation
from .segmenters import IGNORE_LABEL, LogitMap, PartAnnotation, predict, upsample_logits
from .datasets import append_manifest, file_crc32, load_image, read_manifest, save_image

# Logit vector written into regions exposed by a geometric transform: strongly
# favors the background class (class 0 by artifact convention), mirroring the
# black image fill.
BACKGROUND_FILL_LOGIT = 10.0


@dataclass
class DistilledSample:
    """One auto-shot training unit: generated image + teacher logit map."""
    image: np.ndarray            # (H, W, 3) float32 in [-1, 1]
    target: LogitMap
    provenance: dict = field(default_factory=dict)
    checksum: dict | None = None


@dataclass
class AugmentationConfig:
    hflip_prob: float = 0.5
    scale_range: tuple = (0.5, 2.0)
    rotation_range_deg: tuple = (-10.0, 10.0)
    translate_frac_range: tuple = (0.0, 0.5)   # |shift| per axis, fraction of size
    fill_value: float = -1.0                   # image fill for exposed regions

    def __post_init__(self):
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")
        for lo, hi in (self.scale_range, self.rotation_range_deg,
                       self.translate_frac_range):
            if hi < lo:
                raise ValueError("augmentation ranges must be ordered (lo, hi)")

    @classmethod
    def identity(cls):
        return cls(hflip_prob=0.0, scale_range=(1.0, 1.0),
                   rotation_range_deg=(0.0, 0.0), translate_frac_range=(0.0, 0.0))


@dataclass
class AutoShotTrainConfig:
    epochs: int = 300
    base_lr: float = 0.001
    plateau_decay_factor: float = 0.1
    plateau_patience: int = 20
    validation_fraction: float = 0.1
    target_mode: str = "logits"      # logits | one_hot
    rng_seed: int = 0
    batch_size: int = 16
    deterministic: bool = False

    def __post_init__(self):
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.target_mode not in ("logits", "one_hot"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")
        if min(self.epochs, self.plateau_patience, self.batch_size) < 1:
            raise ValueError("epochs, patience and batch_size must be positive")


@dataclass
class UNetSpec:
    n_classes: int
    # Fixed architecture: 5 encoder double-conv blocks, pooling between pairs,
    # 4 decoder blocks of 2x bilinear upsampling + skip concat + double conv,
    # batch norm + ReLU everywhere except the 1x1 head.
    encoder_channels: tuple = (64, 128, 256, 512, 512)
    decoder_channels: tuple = (512, 256, 128, 64)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


# --- dataset generation --------------------------------------------------------

def _sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((base_seed, index)).generate_state(1)[0])


def generate_distilled_dataset(gen: GeneratorHandle, model, sel, n: int,
                               rng_seed: int = 0, out_dir=None,
                               keep_rep_resolution: bool = False,
                               target_res=None):
    """Synthesize n images and pseudo-label them with the few-shot segmenter.

    Targets are the teacher's raw logits, resampled bilinearly to image
    resolution (`keep_rep_resolution` skips that, for debugging). `target_res`
    must match the extraction resolution the teacher was trained with. When
    `out_dir` is given the dataset is persisted as manifest.jsonl + image PNGs
    + logit archives. Returns (samples, manifest_path_or_None).
    """
    if n < 1:
        raise DatasetError("n must be >= 1")
    manifest_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "targets").mkdir(parents=True, exist_ok=True)
        manifest_path = out_dir / "manifest.jsonl"
        manifest_path.write_text("")

    samples = []
    h, w = gen.output_resolution
    for i in range(n):
        seed_i = _sample_seed(rng_seed, i)
        z = sample_latent(gen, seed_i)
        image, stack = generate_with_taps(gen, z, sel)
        rep = extract_representation(stack, sel, target_res=target_res)
        logits = predict(model, rep)
        if not keep_rep_resolution:
            logits = upsample_logits(logits, (h, w))
        sample = DistilledSample(
            image=image, target=logits,
            provenance={"seed": seed_i, "latent_ref": None},
        )
        if out_dir is not None:
            img_rel = f"images/{i:05d}.png"
            tgt_rel = f"targets/{i:05d}.gsar"
            save_image(image, out_dir / img_rel)
            save_archive(out_dir / tgt_rel, "logit_target",
                         {"logits": logits.scores, "latent": z.values},
                         meta={"n_classes": logits.n_classes, "seed": seed_i})
            checksum = {"image": file_crc32(out_dir / img_rel),
                        "target": file_crc32(out_dir / tgt_rel)}
            sample.provenance["latent_ref"] = tgt_rel
            sample.checksum = checksum
            append_manifest(manifest_path, {
                "id": i, "seed": seed_i, "image": img_rel, "target": tgt_rel,
                "checksum": checksum, "n_classes": logits.n_classes,
            })
        samples.append(sample)
    return samples, manifest_path


def load_distilled_dataset(root) -> list:
    """Read a persisted distilled dataset back, verifying per-file checksums."""
    root = Path(root)
    records = read_manifest(root / "manifest.jsonl", base_dir=root)
    samples = []
    for rec in records:
        image = load_image(root / rec["image"])
        _, meta, tensors = load_archive(root / rec["target"], expect_kind="logit_target")
        samples.append(DistilledSample(
            image=image,
            target=LogitMap(scores=tensors["logits"]),
            provenance={"seed": rec["seed"], "latent_ref": rec["target"]},
            checksum=rec.get("checksum"),
        ))
    return samples


# --- geometric augmentation ----------------------------------------------------

@dataclass
class TransformParams:
    scale: float = 1.0
    rotation_deg: float = 0.0
    translate: tuple = (0.0, 0.0)   # signed fractions of (width, height)
    hflip: bool = False

    @property
    def is_identity(self):
        return (self.scale == 1.0 and self.rotation_deg == 0.0
                and self.translate == (0.0, 0.0) and not self.hflip)


def draw_transform(cfg: AugmentationConfig, rng: np.random.Generator) -> TransformParams:
    """One random transform: scale, rotation, per-axis signed translation, flip."""
    scale = float(rng.uniform(*cfg.scale_range))
    rot = float(rng.uniform(*cfg.rotation_range_deg))
    mag = rng.uniform(*cfg.translate_frac_range, size=2)
    sign = rng.choice((-1.0, 1.0), size=2)
    tx, ty = (float(m * s) for m, s in zip(mag, sign))
    hflip = bool(rng.random() < cfg.hflip_prob)
    return TransformParams(scale=scale, rotation_deg=rot, translate=(tx, ty),
                           hflip=hflip)


def _affine_theta(params: TransformParams):
    """Output-to-input affine (2x3) in normalized coordinates for grid_sample.

    Forward order is scale, rotate, translate, then flip; the grid encodes the
    inverse composition.
    """
    th = math.radians(params.rotation_deg)
    cos_t, sin_t = math.cos(th), math.sin(th)
    inv_s = 1.0 / params.scale
    # R(-theta) rows
    r = [[cos_t, sin_t], [-sin_t, cos_t]]
    fx = -1.0 if params.hflip else 1.0
    a = [[inv_s * r[0][0] * fx, inv_s * r[0][1]],
         [inv_s * r[1][0] * fx, inv_s * r[1][1]]]
    # translation is a fraction of the image size: 2x in normalized units
    tx, ty = 2.0 * params.translate[0], 2.0 * params.translate[1]
    v = [-(inv_s * (r[0][0] * tx + r[0][1] * ty)),
         -(inv_s * (r[1][0] * tx + r[1][1] * ty))]
    return torch.tensor([[a[0][0], a[0][1], v[0]],
                         [a[1][0], a[1][1], v[1]]], dtype=torch.float32)


def warp_channels(values: np.ndarray, params: TransformParams,
                  fill: np.ndarray, mode: str = "bilinear") -> np.ndarray:
    """Apply the transform to an (H, W, C) array; exposed regions take `fill`.

    Pure flips (and the identity) are applied by indexing, which keeps them
    exact; everything else goes through one composed affine resampling.
    """
    if params.is_identity:
        return values.copy()
    if (params.scale == 1.0 and params.rotation_deg == 0.0
            and params.translate == (0.0, 0.0) and params.hflip):
        return values[:, ::-1].copy()

    fill = np.asarray(fill, dtype=np.float32).reshape(1, -1, 1, 1)
    t = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))
    t = t.permute(2, 0, 1).unsqueeze(0)
    t = t - torch.from_numpy(fill)
    theta = _affine_theta(params).unsqueeze(0)
    grid = F.affine_grid(theta, t.shape, align_corners=False)
    warped = F.grid_sample(t, grid, mode=mode, padding_mode="zeros",
                           align_corners=False)
    warped = warped + torch.from_numpy(fill)
    return warped[0].permute(1, 2, 0).numpy()


def augment(sample: DistilledSample, cfg: AugmentationConfig,
            rng: np.random.Generator) -> DistilledSample:
    """Draw one transform and apply it identically to image and logit target.

    The image is resampled bilinearly with `fill_value` in exposed regions;
    the target per logit channel, with a background-favoring fill vector.
    """
    params = draw_transform(cfg, rng)
    return apply_augmentation(sample, params, cfg.fill_value)


def apply_augmentation(sample: DistilledSample, params: TransformParams,
                       fill_value: float = -1.0) -> DistilledSample:
    image = warp_channels(sample.image, params, np.full(3, fill_value, np.float32))
    n = sample.target.n_classes
    logit_fill = np.zeros(n, dtype=np.float32)
    logit_fill[0] = BACKGROUND_FILL_LOGIT
    scores = warp_channels(sample.target.scores, params, logit_fill)
    return DistilledSample(image=image, target=LogitMap(scores=scores),
                           provenance=dict(sample.provenance))


# --- UNet ------------------------------------------------------------------------

def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections; accepts any H, W >= 16 via
    zero padding to the next multiple of 16 (output cropped back)."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.n_classes = spec.n_classes
        enc = spec.encoder_channels
        dec = spec.decoder_channels
        self.enc_blocks = nn.ModuleList()
        cin = 3
        for c in enc:
            self.enc_blocks.append(_double_conv(cin, c))
            cin = c
        self.dec_blocks = nn.ModuleList()
        skip_channels = enc[-2::-1]  # (512, 256, 128, 64)
        cin = enc[-1]
        for c, skip in zip(dec, skip_channels):
            self.dec_blocks.append(_double_conv(cin + skip, c))
            cin = c
        self.head = nn.Conv2d(dec[-1], spec.n_classes, 1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if h < 16 or w < 16:
            raise ShapeError(f"input {h}x{w} smaller than 16 in some dimension")
        pad_h = (-h) % 16
        pad_w = (-w) % 16
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h))
        skips = []
        for i, block in enumerate(self.enc_blocks):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for block in self.dec_blocks:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skips.pop()], dim=1))
        x = self.head(x)
        return x[:, :, :h, :w]

    def bottleneck_resolution(self, h, w):
        h16, w16 = h + (-h) % 16, w + (-w) % 16
        return h16 // 16, w16 // 16


def build_unet(spec: UNetSpec, rng_seed: int = 0) -> UNet:
    seed_all(rng_seed)
    return UNet(spec)


# --- training ---------------------------------------------------------------------

class PlateauLrScheduler:
    """Multiply the lr by `factor` after `patience` consecutive epochs without
    a strict improvement of the validation loss."""

    def __init__(self, base_lr: float, factor: float = 0.1, patience: int = 20):
        self.lr = base_lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> bool:
        """Feed one epoch's validation loss; returns True on a decay event."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False


def _hard_labels(scores: torch.Tensor) -> torch.Tensor:
    """Teacher logits -> hard labels (the one_hot target path)."""
    return scores.argmax(dim=1)


def _batch_loss(model, images, targets, target_mode):
    out = model(images)
    if target_mode == "logits":
        soft = F.softmax(targets, dim=1)
        return -(soft * F.log_softmax(out, dim=1)).sum(dim=1).mean()
    if target_mode == "one_hot":
        return F.cross_entropy(out, _hard_labels(targets))
    # target_mode == "labels": ground-truth integer maps with ignore support
    return F.cross_entropy(out, targets, ignore_index=IGNORE_LABEL)


def _to_tensors(items, target_mode):
    """items: list of (image (H,W,3) float, target array). Targets are label
    maps for target_mode='labels', logit stacks otherwise."""
    images, targets = [], []
    for image, target in items:
        images.append(torch.from_numpy(np.ascontiguousarray(image, np.float32))
                      .permute(2, 0, 1))
        if target_mode == "labels":
            targets.append(torch.from_numpy(target.astype(np.int64)))
        else:
            targets.append(torch.from_numpy(np.ascontiguousarray(target, np.float32))
                           .permute(2, 0, 1))
    return torch.stack(images), torch.stack(targets)


def validation_split(n: int, fraction: float, seed: int):
    """Disjoint (train_indices, val_indices), stable for a fixed seed."""
    if n < 1:
        raise TrainingError("empty dataset")
    if n == 1:
        # Degenerate but allowed: the single sample doubles as validation.
        return [0], [0]
    n_val = max(1, round(n * fraction))
    if n_val >= n:
        raise TrainingError("all samples would land in the validation split")
    order = np.random.default_rng(seed).permutation(n)
    return sorted(int(i) for i in order[n_val:]), sorted(int(i) for i in order[:n_val])


def _train_unet(model, items, aug, cfg, target_mode, warp_item, progress=None):
    if not items:
        raise TrainingError("empty dataset")
    rng = np.random.default_rng(cfg.rng_seed)
    train_idx, val_idx = validation_split(len(items), cfg.validation_fraction,
                                          cfg.rng_seed)
    val = [items[i] for i in val_idx]
    train = [items[i] for i in train_idx]

    aug = aug or AugmentationConfig.identity()
    val_images, val_targets = _to_tensors(val, target_mode)

    def run():
        seed_all(cfg.rng_seed)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
        sched = PlateauLrScheduler(cfg.base_lr, cfg.plateau_decay_factor,
                                   cfg.plateau_patience)
        trace = []
        for epoch in range(cfg.epochs):
            model.train()
            epoch_order = rng.permutation(len(train))
            losses = []
            for start in range(0, len(train), cfg.batch_size):
                batch_idx = epoch_order[start:start + cfg.batch_size]
                batch = []
                for j in batch_idx:
                    s_rng = np.random.default_rng(
                        np.random.SeedSequence((cfg.rng_seed, epoch, int(j))))
                    batch.append(warp_item(train[j], draw_transform(aug, s_rng)))
                images, targets = _to_tensors(batch, target_mode)
                for group in opt.param_groups:
                    group["lr"] = sched.lr
                opt.zero_grad()
                loss = _batch_loss(model, images, targets, target_mode)
                loss.backward()
                opt.step()
                losses.append(float(loss.item()))
            model.eval()
            with torch.no_grad():
                val_loss = float(_batch_loss(model, val_images, val_targets,
                                             target_mode).item())
            decayed = sched.step(val_loss)
            trace.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                          "val_loss": val_loss, "lr": sched.lr,
                          "lr_decayed": decayed})
            if progress is not None:
                progress(trace[-1])
        model.eval()
        return trace

    if cfg.deterministic:
        with deterministic_mode(cfg.rng_seed):
            trace = run()
    else:
        trace = run()
    return model, trace


def train_autoshot(model: UNet, dataset: list, aug: AugmentationConfig | None,
                   cfg: AutoShotTrainConfig, progress=None):
    """Train the UNet on a distilled dataset.

    target_mode="logits" uses soft-target cross-entropy against the softmax of
    the stored teacher logits; "one_hot" reduces targets to their argmax class
    first. The validation split is held out before any augmentation.
    """
    for s in dataset:
        if s.target.n_classes != model.n_classes:
            raise TrainingError(
                f"target has {s.target.n_classes} classes, model {model.n_classes}")
        if s.target.scores.shape[:2] != s.image.shape[:2]:
            raise TrainingError("target and image resolutions differ")

    fill = (aug or AugmentationConfig.identity()).fill_value
    n = model.n_classes
    logit_fill = np.zeros(n, dtype=np.float32)
    logit_fill[0] = BACKGROUND_FILL_LOGIT
    items = [(s.image, s.target.scores) for s in dataset]

    def warp(item, params):
        image, scores = item
        return (warp_channels(image, params, np.full(3, fill, np.float32)),
                warp_channels(scores, params, logit_fill))

    return _train_unet(model, items, aug, cfg, cfg.target_mode, warp,
                       progress=progress)


def train_supervised_baseline(model: UNet, pairs: list,
                              cfg: AutoShotTrainConfig,
                              aug: AugmentationConfig | None = None,
                              progress=None):
    """Same trainer over ground-truth masks instead of teacher logits.

    `pairs` holds (image, PartAnnotation). Labels are warped with
    nearest-neighbor sampling; exposed regions become background.
    """
    items = []
    for image, ann in pairs:
        if ann.labels.shape != image.shape[:2]:
            raise TrainingError("annotation and image resolutions differ")
        items.append((image, ann.labels))

    fill = (aug or AugmentationConfig.identity()).fill_value

    def warp(item, params):
        image, labels = item
        warped_img = warp_channels(image, params, np.full(3, fill, np.float32))
        warped_lab = warp_channels(labels[..., None].astype(np.float32), params,
                                   np.zeros(1, np.float32), mode="nearest")
        return warped_img, np.round(warped_lab[..., 0]).astype(np.int64)

    return _train_unet(model, items, aug, cfg, "labels", warp, progress=progress)


def predict_unet(model: UNet, image: np.ndarray) -> LogitMap:
    """Raw logits of the auto-shot segmenter for one [-1, 1] image."""
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(image, np.float32))
        out = model(x.permute(2, 0, 1).unsqueeze(0))
    return LogitMap(scores=out[0].permute(1, 2, 0).numpy())


def save_unet(model: UNet, path):
    tensors = {name: p.detach().numpy() for name, p in model.state_dict().items()}
    return save_archive(path, "unet", tensors, meta={"n_classes": model.n_classes})


def load_unet(path) -> UNet:
    _, meta, tensors = load_archive(path, expect_kind="unet")
    model = UNet(UNetSpec(n_classes=int(meta["n_classes"])))
    state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model
