"""Latent-code optimization: embed a real image into the generator's latent
space so its pixel-wise representation can be extracted.

The loss combines mean-squared pixel error with a feature-space distance
computed from the paired discriminator's intermediate activations (the
self-contained stand-in for an external perceptual network at desk scale).
Returns the best code seen, not the last one.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import GeneratorHandle, LatentCode, generate_with_taps, sample_latent
from .errors import InversionError, ShapeError
from .representation import extract_representation

MEAN_LATENT_SAMPLES = 1000


@dataclass
class InversionConfig:
    steps: int = 1000
    step_size: float = 0.01
    loss_weights: dict = field(default_factory=lambda: {"pixel_l2": 1.0, "perceptual": 0.1})
    init: str = "mean_latent"          # mean_latent | random | provided
    init_code: LatentCode | None = None
    early_stop_delta: float = 0.0      # 0 disables early stopping

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if all(w <= 0 for w in self.loss_weights.values()):
            raise ValueError("at least one loss weight must be positive")
        if self.init not in ("mean_latent", "random", "provided"):
            raise ValueError(f"unknown init mode {self.init!r}")
        if self.init == "provided" and self.init_code is None:
            raise ValueError("init='provided' requires init_code")
        if self.early_stop_delta < 0:
            raise ValueError("early_stop_delta must be non-negative")


@dataclass
class InversionResult:
    code: LatentCode
    loss_trace: list
    best_loss: float
    reconstruction: np.ndarray

    def __post_init__(self):
        assert self.best_loss == min(self.loss_trace)


def mean_latent(gen: GeneratorHandle, n: int = MEAN_LATENT_SAMPLES) -> LatentCode:
    """Average of n seeded latent samples (seeds 0..n-1)."""
    acc = np.zeros(gen.latent_dim, dtype=np.float64)
    for s in range(n):
        acc += sample_latent(gen, s).values
    return LatentCode(values=(acc / n).astype(np.float32), space_tag=gen.latent_space)


def _initial_code(gen, cfg: InversionConfig, rng_seed: int) -> np.ndarray:
    if cfg.init == "provided":
        if cfg.init_code.dimension != gen.latent_dim:
            raise ShapeError(
                f"provided code has dim {cfg.init_code.dimension}, generator "
                f"expects {gen.latent_dim}")
        return cfg.init_code.values.copy()
    if cfg.init == "random":
        rng = np.random.default_rng(rng_seed)
        return rng.standard_normal(gen.latent_dim).astype(np.float32)
    return mean_latent(gen).values


def invert(gen: GeneratorHandle, image: np.ndarray, cfg: InversionConfig | None = None,
           rng_seed: int = 0) -> InversionResult:
    """Gradient-based search for the latent code reproducing `image`.

    Deterministic for fixed (gen, image, cfg, rng_seed). Aborts with a
    diagnostic if the loss turns non-finite.
    """
    cfg = cfg or InversionConfig()
    image = np.asarray(image, dtype=np.float32)
    if image.shape[:2] != tuple(gen.output_resolution) or image.shape[2] != 3:
        raise ShapeError(
            f"image shape {image.shape} != generator output "
            f"{(*gen.output_resolution, 3)}")
    if image.min() < -1.001 or image.max() > 1.001:
        raise InversionError(
            f"image values in [{image.min():.3f}, {image.max():.3f}] outside the "
            "generator's output range [-1, 1]")

    w_pix = float(cfg.loss_weights.get("pixel_l2", 0.0))
    w_feat = float(cfg.loss_weights.get("perceptual", 0.0))
    use_features = w_feat > 0 and gen.feature_net is not None

    target = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)
    if use_features:
        with torch.no_grad():
            _, target_feats = gen.feature_net(target, return_features=True)

    z = torch.from_numpy(_initial_code(gen, cfg, rng_seed)).clone().requires_grad_(True)
    opt = torch.optim.Adam([z], lr=cfg.step_size)

    def loss_at(zt):
        out, _ = gen.module(zt.reshape(1, -1))
        loss = torch.zeros(())
        if w_pix > 0:
            loss = loss + w_pix * torch.mean((out - target) ** 2)
        if use_features:
            _, feats = gen.feature_net(out, return_features=True)
            floss = sum(torch.mean((f - t) ** 2) for f, t in zip(feats, target_feats))
            loss = loss + w_feat * floss / len(feats)
        return loss, out

    trace = []
    best_loss = np.inf
    best_code = z.detach().numpy().copy()
    for step in range(cfg.steps):
        opt.zero_grad()
        loss, _ = loss_at(z)
        value = float(loss.item())
        if not np.isfinite(value):
            raise InversionError(f"non-finite loss {value} at step {step}")
        trace.append(value)
        if value < best_loss:
            # First evaluation counts as an infinite improvement.
            improvement = best_loss - value
            best_loss = value
            best_code = z.detach().numpy().copy()
        else:
            improvement = 0.0
        # Stop (before the gradient step) once the improvement no longer
        # exceeds the threshold; delta=0 disables, delta=inf stops at once.
        if cfg.early_stop_delta > 0 and improvement <= cfg.early_stop_delta:
            break
        loss.backward()
        opt.step()

    code = LatentCode(values=best_code.astype(np.float32), space_tag=gen.latent_space)
    with torch.no_grad():
        recon, _ = gen.module(torch.from_numpy(code.values).reshape(1, -1))
    return InversionResult(
        code=code,
        loss_trace=trace,
        best_loss=float(best_loss),
        reconstruction=recon[0].permute(1, 2, 0).numpy().astype(np.float32),
    )


def represent_image(gen: GeneratorHandle, image: np.ndarray, sel,
                    cfg: InversionConfig | None = None, rng_seed: int = 0,
                    target_res=None):
    """Invert the image, then extract its pixel-wise representation.

    Equivalent to extract_representation over generate_with_taps at the
    inverted code. Returns (PixelRepresentation, InversionResult).
    """
    result = invert(gen, image, cfg, rng_seed)
    _, stack = generate_with_taps(gen, result.code, sel)
    return extract_representation(stack, sel, target_res=target_res), result


def save_loss_trace(trace: list, path):
    """Write an inversion loss trace as CSV with columns step,loss."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            writer.writerow([i, v])
    return path
