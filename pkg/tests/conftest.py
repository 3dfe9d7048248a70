"""Shared fixtures. Expensive artifacts (trained generators) are cached under
tests/_artifacts keyed by their config so repeated runs skip retraining."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from ganseg.backbone import (GanTrainConfig, load_checkpoint, save_checkpoint,
                             train_toy_gan)
from ganseg.datasets import SyntheticPartsConfig, make_synthetic_parts_dataset

ARTIFACT_CACHE = Path(__file__).parent / "_artifacts"


def cached_gan(images, cfg: GanTrainConfig, rng_seed: int, tag: str):
    """Train-or-load a generator checkpoint keyed by (config, seed, data hash)."""
    key = json.dumps({"cfg": vars(cfg), "seed": rng_seed, "tag": tag,
                      "data": hashlib.sha1(images.tobytes()).hexdigest()[:16]},
                     sort_keys=True)
    digest = hashlib.sha1(key.encode()).hexdigest()[:16]
    path = ARTIFACT_CACHE / f"gan_{tag}_{digest}.gsar"
    if path.exists():
        return load_checkpoint(path)
    gen, _ = train_toy_gan(images, cfg, rng_seed=rng_seed)
    ARTIFACT_CACHE.mkdir(parents=True, exist_ok=True)
    save_checkpoint(gen, path)
    return gen


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = SyntheticPartsConfig(dataset_size=300, rng_seed=11)
    return make_synthetic_parts_dataset(cfg)


@pytest.fixture(scope="session")
def tiny_gan(tiny_dataset):
    """A quick low-quality generator: right shapes, wrong art. For contract
    tests only; acceptance trains its own properly."""
    images, _ = tiny_dataset
    cfg = GanTrainConfig(steps=60, batch_size=16, log_every=30)
    return cached_gan(images, cfg, rng_seed=0, tag="tiny")
