"""Seeding helpers for reproducible training and generation."""

import contextlib
import random

import numpy as np
import torch


def seed_all(seed: int):
    """Seed python, numpy and torch RNGs from one integer."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


@contextlib.contextmanager
def deterministic_mode(seed: int):
    """Single-threaded deterministic torch execution.

    Training under this context is bit-reproducible for a fixed seed on the
    same build of torch. Thread count is restored on exit.
    """
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    seed_all(seed)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(False)
        torch.set_num_threads(n_threads)
