"""Few-shot part segmenters over pixel-wise representations.

Small per-pixel MLPs (implemented as 1x1 convolutions, so they are exactly
spatially equivariant) and dilated fully-convolutional heads. Trained with
per-pixel cross-entropy on k annotated (representation, mask) pairs, one full
image per optimizer step, cycling over the pairs.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .determinism import deterministic_mode, seed_all
from .errors import AnnotationError, ShapeError, TrainingError

IGNORE_LABEL = 255
LR_FLOOR = 1e-8

# variant -> list of (kernel, dilation, out_channels-or-None for n_classes)
_CNN_TABLES = {
    "CNN_DEFAULT": [(1, 1, 128), (3, 2, 64), (3, 4, 64), (3, 8, 64), (3, 1, 64),
                    (3, 2, 64), (3, 4, 64), (3, 8, 32), (3, 1, None)],
    "CNN_S": [(3, 1, 128), (3, 2, 64), (3, 1, 64), (3, 2, 32), (3, 1, None)],
    "CNN_M": [(3, 1, 128), (3, 2, 64), (3, 4, 64), (3, 1, 64), (3, 2, 64),
              (3, 4, 32), (3, 1, None)],
    "CNN_L": [(3, 1, 128), (3, 2, 64), (3, 4, 64), (3, 8, 64), (3, 1, 64),
              (3, 2, 64), (3, 4, 64), (3, 8, 32), (3, 1, None)],
}
_MLP_HIDDEN = {"MLP0": [], "MLP1": [2000], "MLP2": [2000, 200]}

VARIANTS = tuple(_MLP_HIDDEN) + tuple(_CNN_TABLES)


@dataclass
class PartAnnotation:
    """Integer part mask; values in [0, n_classes) plus IGNORE_LABEL."""
    labels: np.ndarray
    n_classes: int
    class_names: list | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise AnnotationError(f"labels must be 2-D, got shape {self.labels.shape}")
        if self.n_classes < 2:
            raise AnnotationError(f"n_classes must be >= 2, got {self.n_classes}")
        bad = self.labels[(self.labels >= self.n_classes) & (self.labels != IGNORE_LABEL)]
        if bad.size:
            raise AnnotationError(
                f"label value {int(bad.flat[0])} >= n_classes ({self.n_classes})")

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class LogitMap:
    """Raw per-pixel class scores, shape (H, W, n_classes)."""
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 3:
            raise ShapeError(f"logit map must be (H, W, n), got {self.scores.shape}")
        if not np.isfinite(self.scores).all():
            raise ShapeError("logit map contains non-finite values")

    @property
    def n_classes(self):
        return self.scores.shape[2]


@dataclass
class SegmenterSpec:
    variant: str
    input_channels: int
    n_classes: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r} (choose from {VARIANTS})")
        if self.input_channels < 1 or self.n_classes < 2:
            raise ValueError("need input_channels >= 1 and n_classes >= 2")


@dataclass
class FewShotTrainConfig:
    epochs: int = 1000
    base_lr: float = 0.001
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 50
    weight_decay: float = 0.001
    rng_seed: int = 0
    deterministic: bool = False
    normalize_features: bool = False


class SegmenterModel(nn.Module):
    """A few-shot segmenter; forward maps (B, C, H, W) to (B, n, H, W)."""

    def __init__(self, spec: SegmenterSpec):
        super().__init__()
        self.variant = spec.variant
        self.in_channels = spec.input_channels
        self.n_classes = spec.n_classes
        self.is_mlp = spec.variant in _MLP_HIDDEN

        layers = []
        if self.is_mlp:
            widths = _MLP_HIDDEN[spec.variant] + [spec.n_classes]
            cin = spec.input_channels
            for w in widths:
                layers.append(nn.Conv2d(cin, w, kernel_size=1))
                cin = w
        else:
            cin = spec.input_channels
            for k, d, cout in _CNN_TABLES[spec.variant]:
                cout = spec.n_classes if cout is None else cout
                pad = d * (k - 1) // 2  # preserves resolution
                layers.append(nn.Conv2d(cin, cout, kernel_size=k, dilation=d, padding=pad))
                cin = cout
        self.layers = nn.ModuleList(layers)
        self.register_buffer("feat_mean", torch.zeros(0), persistent=False)
        self.register_buffer("feat_std", torch.zeros(0), persistent=False)

    def set_feature_norm(self, mean, std):
        self.feat_mean = torch.as_tensor(mean, dtype=torch.float32)
        self.feat_std = torch.as_tensor(std, dtype=torch.float32)

    def forward(self, x):
        if self.feat_mean.numel():
            x = (x - self.feat_mean.view(1, -1, 1, 1)) / self.feat_std.view(1, -1, 1, 1)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = F.relu(x) if self.is_mlp else F.leaky_relu(x, 0.2)
        return x

    def channel_plan(self):
        """Output channel count of each layer, embedding included."""
        return [layer.out_channels for layer in self.layers]

    def receptive_radius(self):
        """Chebyshev radius beyond which an input pixel cannot affect a logit."""
        if self.is_mlp:
            return 0
        return sum(d * (k - 1) // 2 for k, d, _ in _CNN_TABLES[self.variant])


def build_segmenter(spec: SegmenterSpec, rng_seed: int = 0) -> SegmenterModel:
    """Construct a segmenter with seeded fan-in-scaled random init."""
    seed_all(rng_seed)
    return SegmenterModel(spec)


def lr_at_epoch(cfg: FewShotTrainConfig, epoch: int) -> float:
    """base_lr scaled down by decay_factor every decay_every epochs, floored."""
    steps = epoch // cfg.lr_decay_every
    return max(cfg.base_lr * cfg.lr_decay_factor ** (-steps), LR_FLOOR)


def align_annotation(ann: PartAnnotation, resolution) -> PartAnnotation:
    """Nearest-neighbor resample of the labels to `resolution` (labels are
    categorical; interpolation would invent classes)."""
    h, w = resolution
    if ann.labels.shape == (h, w):
        return ann
    src_h, src_w = ann.labels.shape
    rows = (np.arange(h) + 0.5) * src_h / h
    cols = (np.arange(w) + 0.5) * src_w / w
    rows = np.clip(rows.astype(np.int64), 0, src_h - 1)
    cols = np.clip(cols.astype(np.int64), 0, src_w - 1)
    return PartAnnotation(labels=ann.labels[rows][:, cols], n_classes=ann.n_classes,
                          class_names=ann.class_names)


def train_fewshot(model: SegmenterModel, pairs: list, cfg: FewShotTrainConfig,
                  progress=None):
    """Minimize per-pixel cross-entropy over the non-ignore pixels of `pairs`.

    `pairs` is a list of (PixelRepresentation, PartAnnotation). Returns
    (model, per-epoch mean loss trace). `progress`, when given, is called with
    (epoch, mean_loss) after every epoch.
    """
    if not pairs:
        raise TrainingError("no training pairs")
    c = pairs[0][0].n_channels
    n = pairs[0][1].n_classes
    for rep, ann in pairs:
        if rep.n_channels != c:
            raise TrainingError(f"inconsistent channel counts: {rep.n_channels} != {c}")
        if ann.n_classes != n:
            raise TrainingError(f"inconsistent n_classes: {ann.n_classes} != {n}")
        if (ann.labels == IGNORE_LABEL).all():
            raise TrainingError("annotation is entirely ignore-labeled")
    if c != model.in_channels:
        raise TrainingError(f"model expects {model.in_channels} channels, pairs have {c}")
    if n != model.n_classes:
        raise TrainingError(f"model predicts {model.n_classes} classes, pairs have {n}")

    if cfg.normalize_features:
        from .representation import channel_stats
        mean, std = channel_stats([rep for rep, _ in pairs])
        model.set_feature_norm(mean, std)

    tensors = []
    for rep, ann in pairs:
        aligned = align_annotation(ann, rep.resolution)
        x = torch.from_numpy(rep.values).permute(2, 0, 1).unsqueeze(0).float()
        y = torch.from_numpy(aligned.labels.astype(np.int64)).unsqueeze(0)
        tensors.append((x, y))

    def run():
        seed_all(cfg.rng_seed)
        model.train()
        opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr,
                               weight_decay=cfg.weight_decay)
        trace = []
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            epoch_loss = 0.0
            for x, y in tensors:
                opt.zero_grad()
                loss = F.cross_entropy(model(x), y, ignore_index=IGNORE_LABEL)
                loss.backward()
                opt.step()
                epoch_loss += float(loss.item())
            trace.append(epoch_loss / len(tensors))
            if progress is not None:
                progress(epoch, trace[-1])
        model.eval()
        return trace

    if cfg.deterministic:
        with deterministic_mode(cfg.rng_seed):
            trace = run()
    else:
        trace = run()
    return model, trace


def predict(model: SegmenterModel, rep) -> LogitMap:
    """Raw logits for one representation; no softmax or argmax applied."""
    if rep.n_channels != model.in_channels:
        raise ShapeError(
            f"representation has {rep.n_channels} channels, model expects "
            f"{model.in_channels}")
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(rep.values).permute(2, 0, 1).unsqueeze(0).float()
        scores = model(x)[0].permute(1, 2, 0).numpy()
    return LogitMap(scores=scores)


def logits_to_mask(lm: LogitMap, class_names=None) -> PartAnnotation:
    """Per-pixel argmax; ties break toward the lowest class index."""
    labels = lm.scores.argmax(axis=2).astype(np.uint8)
    return PartAnnotation(labels=labels, n_classes=lm.n_classes,
                          class_names=class_names)


def upsample_logits(lm: LogitMap, resolution) -> LogitMap:
    """Bilinearly resample a logit map to `resolution` (per channel)."""
    h, w = resolution
    if lm.scores.shape[:2] == (h, w):
        return lm
    t = torch.from_numpy(lm.scores).permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return LogitMap(scores=t[0].permute(1, 2, 0).numpy())


def save_segmenter(model: SegmenterModel, path):
    tensors = {name: p.detach().numpy() for name, p in model.state_dict().items()}
    if model.feat_mean.numel():
        tensors["feature_norm.mean"] = model.feat_mean.numpy()
        tensors["feature_norm.std"] = model.feat_std.numpy()
    meta = {"variant": model.variant, "input_channels": model.in_channels,
            "n_classes": model.n_classes}
    return save_archive(path, "segmenter", tensors, meta)


def load_segmenter(path) -> SegmenterModel:
    _, meta, tensors = load_archive(path, expect_kind="segmenter")
    spec = SegmenterSpec(variant=meta["variant"],
                         input_channels=int(meta["input_channels"]),
                         n_classes=int(meta["n_classes"]))
    model = SegmenterModel(spec)
    norm_mean = tensors.pop("feature_norm.mean", None)
    norm_std = tensors.pop("feature_norm.std", None)
    state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
    model.load_state_dict(state)
    if norm_mean is not None:
        model.set_feature_norm(norm_mean, norm_std)
    model.eval()
    return model
