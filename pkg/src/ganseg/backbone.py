"""Generators with tappable per-layer activations.

Provides a small DCGAN-style generator/discriminator pair trainable at desk
scale (32 or 64 px), checkpoint IO, and `generate_with_taps`, which runs a
forward pass and returns the post-nonlinearity activation map of every tapped
convolution stage together with the output image.

Images are float32 (H, W, 3) in [-1, 1]. Activation maps are float32
(h, w, c), channel-last.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .determinism import deterministic_mode, seed_all
from .errors import ArchiveError, ShapeError, TrainingError

LATENT_SPACES = ("input", "style", "per_layer_style")

# Channel width at 4x4; halves at each doubling of resolution.
BASE_CHANNELS = 256


@dataclass
class LatentCode:
    """A point in a generator's latent space.

    `values` is 1-D for the plain input/style spaces and (n_layers, d) for
    per-layer style codes.
    """
    values: np.ndarray
    space_tag: str = "input"

    def __post_init__(self):
        if self.space_tag not in LATENT_SPACES:
            raise ValueError(f"unknown latent space {self.space_tag!r}")
        self.values = np.asarray(self.values, dtype=np.float32)
        expected_ndim = 2 if self.space_tag == "per_layer_style" else 1
        if self.values.ndim != expected_ndim:
            raise ShapeError(
                f"latent in space {self.space_tag!r} must be {expected_ndim}-D, "
                f"got shape {self.values.shape}")

    @property
    def dimension(self) -> int:
        return int(self.values.shape[-1])


@dataclass(frozen=True)
class LayerInfo:
    layer_id: int
    resolution: tuple  # (h, w)
    channels: int

    def __post_init__(self):
        if self.channels <= 0:
            raise ValueError(f"layer {self.layer_id}: channels must be > 0")


@dataclass
class ActivationStack:
    """Ordered per-layer activation maps from one generator forward pass."""
    entries: list  # [(LayerInfo, ndarray (h, w, c)), ...]
    source_latent: LatentCode

    def __post_init__(self):
        # Normalize to depth order so insertion order never matters downstream.
        self.entries = sorted(self.entries, key=lambda e: e[0].layer_id)
        prev_res = None
        for info, value in self.entries:
            h, w = info.resolution
            if value.shape != (h, w, info.channels):
                raise ShapeError(
                    f"layer {info.layer_id}: activation shape {value.shape} != "
                    f"declared {(h, w, info.channels)}")
            if prev_res is not None and (h < prev_res[0] or w < prev_res[1]):
                raise ShapeError(
                    f"layer {info.layer_id}: resolution decreases along depth")
            prev_res = (h, w)

    @property
    def layer_table(self):
        return [info for info, _ in self.entries]


class ToyGenerator(nn.Module):
    """DCGAN-style generator: z -> 4x4 -> ... -> RxR feature maps -> RGB.

    Feature stage i is a transposed conv followed by leaky ReLU; its
    post-activation output is the tapped map. A final 3x3 conv + tanh maps
    the last feature map to the image, so every feature stage is tappable.

    Batch norm (`norm=True`) is used during adversarial training only;
    `fold_generator_norms` bakes it into the conv weights afterwards, so the
    artifact generator has no normalization or stochastic state and
    (weights, z) -> output is a pure function.
    """

    def __init__(self, latent_dim: int, resolution: int,
                 base_channels: int = BASE_CHANNELS, norm: bool = False):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ValueError(f"resolution {resolution} is not a power of two >= 8")
        self.latent_dim = latent_dim
        self.resolution = resolution
        channels = []
        res, ch = 4, base_channels
        while res <= resolution:
            channels.append(ch)
            res, ch = res * 2, max(ch // 2, 8)
        self.channels = channels
        blocks = [nn.ConvTranspose2d(latent_dim, channels[0], 4, 1, 0)]
        for cin, cout in zip(channels, channels[1:]):
            blocks.append(nn.ConvTranspose2d(cin, cout, 4, 2, 1))
        self.blocks = nn.ModuleList(blocks)
        self.norms = nn.ModuleList([nn.BatchNorm2d(c) for c in channels]) if norm \
            else None
        self.torgb = nn.Conv2d(channels[-1], 3, 3, 1, 1)

    def forward(self, z, tap_ids=None):
        """Returns (image batch, {layer_id: activation batch})."""
        x = z.view(z.shape[0], self.latent_dim, 1, 1)
        taps = {}
        for i, block in enumerate(self.blocks):
            x = block(x)
            if self.norms is not None:
                x = self.norms[i](x)
            x = F.leaky_relu(x, 0.2)
            if tap_ids is None or i in tap_ids:
                taps[i] = x
        return torch.tanh(self.torgb(x)), taps

    def layer_table(self):
        res = 4
        table = []
        for i, ch in enumerate(self.channels):
            table.append(LayerInfo(layer_id=i, resolution=(res, res), channels=ch))
            res *= 2
        return table


def fold_generator_norms(gen: ToyGenerator) -> ToyGenerator:
    """Bake eval-mode batch-norm statistics into the conv weights.

    y = gamma * (conv(x) - mu) / sqrt(var + eps) + beta is an affine map per
    output channel, so it folds exactly into the transposed-conv weight and
    bias. The result is a norm-free generator reproducing eval-mode outputs.
    """
    if gen.norms is None:
        return gen
    folded = ToyGenerator(gen.latent_dim, gen.resolution,
                          base_channels=gen.channels[0], norm=False)
    with torch.no_grad():
        for block, bn, target in zip(gen.blocks, gen.norms, folded.blocks):
            scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
            # ConvTranspose2d weight layout: (cin, cout, kh, kw)
            target.weight.copy_(block.weight * scale.view(1, -1, 1, 1))
            target.bias.copy_((block.bias - bn.running_mean) * scale + bn.bias)
        folded.torgb.weight.copy_(gen.torgb.weight)
        folded.torgb.bias.copy_(gen.torgb.bias)
    return folded


class ToyDiscriminator(nn.Module):
    """Mirror of the generator; exposes intermediate features for perceptual loss."""

    def __init__(self, resolution: int, base_channels: int = 64, norm: bool = True):
        super().__init__()
        convs = []
        cin, res, ch = 3, resolution, base_channels
        while res > 4:
            convs.append(nn.Conv2d(cin, ch, 4, 2, 1))
            cin, res, ch = ch, res // 2, ch * 2
        self.convs = nn.ModuleList(convs)
        # no norm on the first conv, DCGAN-style
        self.norms = nn.ModuleList(
            [nn.Identity()] + [nn.BatchNorm2d(c.out_channels) for c in convs[1:]]
        ) if norm else nn.ModuleList([nn.Identity() for _ in convs])
        self.final = nn.Conv2d(cin, 1, 4, 1, 0)

    def forward(self, x, return_features=False):
        feats = []
        for conv, norm in zip(self.convs, self.norms):
            x = F.leaky_relu(norm(conv(x)), 0.2)
            feats.append(x)
        logit = self.final(x).reshape(x.shape[0])
        if return_features:
            return logit, feats
        return logit


@dataclass
class GeneratorHandle:
    """A trained generator plus its declared layer table.

    Read-only after construction; safe to share across parallel workers.
    `feature_net` (the paired discriminator, when available) provides the
    feature distance used by latent inversion.
    """
    latent_dim: int
    layer_table: list
    output_resolution: tuple
    module: ToyGenerator
    feature_net: ToyDiscriminator | None = None
    latent_space: str = "input"

    def __post_init__(self):
        if not self.layer_table:
            raise ValueError("layer_table must be non-empty")
        if tuple(self.layer_table[-1].resolution) != tuple(self.output_resolution):
            raise ShapeError(
                f"output resolution {self.output_resolution} != last layer "
                f"{self.layer_table[-1].resolution}")
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        if self.feature_net is not None:
            self.feature_net.eval()
            for p in self.feature_net.parameters():
                p.requires_grad_(False)


@dataclass
class GanTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    latent_dim: int = 128
    log_every: int = 50
    deterministic: bool = False


def sample_latent(gen: GeneratorHandle, rng_seed: int) -> LatentCode:
    """Standard-normal latent; a pure function of (latent_dim, seed)."""
    rng = np.random.default_rng(rng_seed)
    values = rng.standard_normal(gen.latent_dim).astype(np.float32)
    return LatentCode(values=values, space_tag=gen.latent_space)


def generate_with_taps(gen: GeneratorHandle, z: LatentCode, tap):
    """Synthesize one image and collect the tapped activation maps.

    `tap` is a representation.LayerSelection. Returns (image, ActivationStack)
    with the stack holding exactly the resolved layers in depth order.
    """
    from .representation import resolve_selection  # local import, avoids cycle

    if z.dimension != gen.latent_dim:
        raise ShapeError(
            f"latent dimension {z.dimension} != generator latent_dim {gen.latent_dim}")
    tap_ids = resolve_selection(tap, gen.layer_table)

    with torch.no_grad():
        zt = torch.from_numpy(z.values).reshape(1, -1)
        img, taps = gen.module(zt, tap_ids=set(tap_ids))
    image = img[0].permute(1, 2, 0).numpy().astype(np.float32)
    by_id = {info.layer_id: info for info in gen.layer_table}
    entries = [
        (by_id[i], taps[i][0].permute(1, 2, 0).numpy().astype(np.float32))
        for i in tap_ids
    ]
    return image, ActivationStack(entries=entries, source_latent=z)


def _check_images(images: np.ndarray):
    if images.ndim != 4 or images.shape[-1] != 3:
        raise TrainingError(f"expected (N, H, W, 3) image array, got {images.shape}")
    n, h, w, _ = images.shape
    if h != w:
        raise TrainingError(f"inconsistent image sizes: {h}x{w} not square")
    if h & (h - 1):
        raise TrainingError(f"resolution {h} is not a power of two")
    if h not in (32, 64):
        raise TrainingError(f"resolution {h} unsupported (use 32 or 64)")
    if n < 256:
        raise TrainingError(f"dataset too small: {n} < 256 images")


def train_toy_gan(images: np.ndarray, config: GanTrainConfig | None = None,
                  rng_seed: int = 0, progress=None):
    """Adversarial training on a small single-resolution image set.

    Non-saturating GAN loss, Adam on both nets. Returns (GeneratorHandle,
    metrics trace); the trace holds one record per `log_every` steps with
    discriminator/generator losses and discriminator accuracy.
    """
    config = config or GanTrainConfig()
    images = np.asarray(images, dtype=np.float32)
    _check_images(images)
    resolution = images.shape[1]

    def run():
        seed_all(rng_seed)
        gen = ToyGenerator(config.latent_dim, resolution, norm=True)
        disc = ToyDiscriminator(resolution)
        opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr,
                                 betas=(config.beta1, config.beta2))
        opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr,
                                 betas=(config.beta1, config.beta2))
        bce = nn.BCEWithLogitsLoss()
        data = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
        rng = np.random.default_rng(rng_seed)
        trace = []
        ones = torch.ones(config.batch_size)
        zeros = torch.zeros(config.batch_size)
        for step in range(config.steps):
            idx = rng.integers(0, len(data), size=config.batch_size)
            real = data[idx]
            z = torch.randn(config.batch_size, config.latent_dim)
            fake, _ = gen(z)

            opt_d.zero_grad()
            logit_real = disc(real)
            logit_fake = disc(fake.detach())
            loss_d = bce(logit_real, ones) + bce(logit_fake, zeros)
            loss_d.backward()
            opt_d.step()

            opt_g.zero_grad()
            loss_g = bce(disc(fake), ones)
            loss_g.backward()
            opt_g.step()

            if step % config.log_every == 0 or step == config.steps - 1:
                rec = {
                    "step": step,
                    "d_loss": float(loss_d.item()),
                    "g_loss": float(loss_g.item()),
                    "d_real_acc": float((logit_real > 0).float().mean().item()),
                    "d_fake_acc": float((logit_fake < 0).float().mean().item()),
                }
                trace.append(rec)
                if progress is not None:
                    progress(rec)
        return gen, disc, trace

    if config.deterministic:
        with deterministic_mode(rng_seed):
            gen, disc, trace = run()
    else:
        gen, disc, trace = run()

    gen.eval()
    folded = fold_generator_norms(gen)
    handle = GeneratorHandle(
        latent_dim=config.latent_dim,
        layer_table=folded.layer_table(),
        output_resolution=(resolution, resolution),
        module=folded,
        feature_net=disc,
    )
    return handle, trace


def realism_probe(gen: GeneratorHandle, real_images: np.ndarray,
                  n_per_class: int = 512, rng_seed: int = 0,
                  pool: int = 8) -> float:
    """Held-out accuracy of a capacity-limited probe separating real images
    from generated ones: logistic regression on `pool`x`pool` average-pooled
    pixels (global layout and color, not fine texture).

    A degenerate generator (noise, collapse, missing parts) is trivially
    separable (accuracy near 1.0); a generator matching the data distribution
    is not.
    """
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(len(real_images), size=min(n_per_class, len(real_images)),
                     replace=False)
    real = np.asarray(real_images, dtype=np.float32)[idx]
    with torch.no_grad():
        z = torch.from_numpy(
            rng.standard_normal((len(real), gen.latent_dim)).astype(np.float32))
        fake = gen.module(z)[0].permute(0, 2, 3, 1).numpy()

    def features(batch):
        t = torch.from_numpy(batch).permute(0, 3, 1, 2)
        pooled = F.adaptive_avg_pool2d(t, (pool, pool))
        return pooled.reshape(len(batch), -1).numpy()

    x = np.concatenate([features(real), features(fake)])
    y = np.concatenate([np.ones(len(real)), np.zeros(len(fake))])
    perm = rng.permutation(len(x))
    x, y = x[perm], y[perm]
    n_test = max(len(x) // 4, 2)
    clf = LogisticRegression(max_iter=500)
    clf.fit(x[n_test:], y[n_test:])
    return float(clf.score(x[:n_test], y[:n_test]))


def save_checkpoint(gen: GeneratorHandle, path):
    """Write a generator (and its paired discriminator if present) to disk.

    Feature-layer weights are stored as `layer{ID}.{weight|bias}` matching the
    layer manifest; the RGB head as `torgb.*`; discriminator tensors as
    `disc.*`.
    """
    tensors = {}
    for i, block in enumerate(gen.module.blocks):
        tensors[f"layer{i}.weight"] = block.weight.detach().numpy()
        tensors[f"layer{i}.bias"] = block.bias.detach().numpy()
    tensors["torgb.weight"] = gen.module.torgb.weight.detach().numpy()
    tensors["torgb.bias"] = gen.module.torgb.bias.detach().numpy()
    if gen.feature_net is not None:
        for name, p in gen.feature_net.state_dict().items():
            tensors[f"disc.{name}"] = p.numpy()
    meta = {
        "latent_dim": gen.latent_dim,
        "output_resolution": list(gen.output_resolution),
        "latent_space": gen.latent_space,
        "layers": [[info.layer_id, *info.resolution, info.channels]
                   for info in gen.layer_table],
    }
    return save_archive(path, "generator_checkpoint", tensors, meta)


def load_checkpoint(path) -> GeneratorHandle:
    """Rebuild a GeneratorHandle from an archive, validating the manifest."""
    _, meta, tensors = load_archive(path, expect_kind="generator_checkpoint")
    layers = meta["layers"]
    latent_dim = int(meta["latent_dim"])
    resolution = int(meta["output_resolution"][0])

    table = [LayerInfo(layer_id=int(i), resolution=(int(h), int(w)), channels=int(c))
             for i, h, w, c in layers]
    gen = ToyGenerator(latent_dim, resolution)
    declared = gen.layer_table()
    if len(declared) != len(table):
        raise ArchiveError(
            f"manifest declares {len(table)} layers, architecture has {len(declared)}")
    for info in table:
        i = info.layer_id
        key = f"layer{i}.weight"
        if key not in tensors:
            raise ArchiveError(f"missing weight tensor for layer {i}")
        out_ch = tensors[key].shape[1]  # ConvTranspose2d weight: (cin, cout, kh, kw)
        if out_ch != info.channels:
            raise ArchiveError(
                f"layer {i}: manifest declares {info.channels} channels, "
                f"weight tensor has {out_ch}")
        if tuple(info.resolution) != tuple(declared[i].resolution):
            raise ArchiveError(
                f"layer {i}: manifest resolution {info.resolution} != "
                f"architecture resolution {declared[i].resolution}")

    state = {}
    for i in range(len(table)):
        state[f"blocks.{i}.weight"] = torch.from_numpy(tensors[f"layer{i}.weight"].copy())
        state[f"blocks.{i}.bias"] = torch.from_numpy(tensors[f"layer{i}.bias"].copy())
    state["torgb.weight"] = torch.from_numpy(tensors["torgb.weight"].copy())
    state["torgb.bias"] = torch.from_numpy(tensors["torgb.bias"].copy())
    try:
        gen.load_state_dict(state)
    except RuntimeError as e:
        raise ArchiveError(f"weight shapes do not fit the declared architecture: {e}") from e

    disc = None
    disc_state = {name[len("disc."):]: torch.from_numpy(arr.copy())
                  for name, arr in tensors.items() if name.startswith("disc.")}
    if disc_state:
        disc = ToyDiscriminator(resolution)
        try:
            disc.load_state_dict(disc_state)
        except RuntimeError as e:
            raise ArchiveError(f"discriminator tensors malformed: {e}") from e

    return GeneratorHandle(
        latent_dim=latent_dim,
        layer_table=table,
        output_resolution=(resolution, resolution),
        module=gen,
        feature_net=disc,
        latent_space=meta.get("latent_space", "input"),
    )
