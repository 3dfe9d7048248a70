"""Pixel-wise representations from activation stacks.

Every selected activation map is bilinearly resampled to a common resolution
(default: the largest selected map) and the maps are concatenated along the
channel dimension, giving each output pixel one feature vector of length
C = sum of selected channel counts.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .backbone import ActivationStack, LayerInfo
from .errors import SelectionError, ShapeError

SELECTION_MODES = ("all", "all_but_last", "group_A", "group_B", "group_C", "explicit")

# Coarse/middle/fine resolution bands. The fine band is open-ended upward and
# is clipped to each generator's own layer table.
GROUP_RANGES = {"group_A": (4, 8), "group_B": (16, 32), "group_C": (64, None)}


@dataclass
class LayerSelection:
    """Which generator layers feed the representation."""
    mode: str = "all"
    explicit_ids: list | None = None
    resolution_range: tuple | None = None  # (min_res, max_res) extra filter

    def __post_init__(self):
        if self.mode not in SELECTION_MODES:
            raise SelectionError(f"unknown selection mode {self.mode!r}")
        if self.mode == "explicit" and not self.explicit_ids:
            raise SelectionError("explicit selection requires non-empty explicit_ids")

    def to_dict(self):
        return {"mode": self.mode, "explicit_ids": self.explicit_ids,
                "resolution_range": list(self.resolution_range) if self.resolution_range else None}

    @classmethod
    def from_dict(cls, d):
        rr = d.get("resolution_range")
        return cls(mode=d.get("mode", "all"), explicit_ids=d.get("explicit_ids"),
                   resolution_range=tuple(rr) if rr else None)


@dataclass
class PixelRepresentation:
    """(H_r, W_r, C) feature tensor plus per-source-layer channel offsets."""
    values: np.ndarray
    channel_offsets: list  # [(start, length), ...] in depth order
    source_selection: LayerSelection

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"representation must be (H, W, C), got {self.values.shape}")
        total = sum(length for _, length in self.channel_offsets)
        if total != self.values.shape[2]:
            raise ShapeError(
                f"channel offsets cover {total} channels, tensor has {self.values.shape[2]}")

    @property
    def resolution(self):
        return self.values.shape[:2]

    @property
    def n_channels(self):
        return self.values.shape[2]


def resolve_selection(sel: LayerSelection, table: list) -> list:
    """Map a LayerSelection onto a layer table, returning layer ids in depth order."""
    if not table:
        raise SelectionError("empty layer table")
    by_id = {info.layer_id: info for info in table}

    if sel.mode == "explicit":
        unknown = [i for i in sel.explicit_ids if i not in by_id]
        if unknown:
            raise SelectionError(f"explicit layer ids not in table: {unknown}")
        ids = sorted(set(sel.explicit_ids))
    elif sel.mode == "all":
        ids = [info.layer_id for info in table]
    elif sel.mode == "all_but_last":
        ids = [info.layer_id for info in table[:-1]]
    else:
        lo, hi = GROUP_RANGES[sel.mode]
        if hi is None:
            hi = max(max(info.resolution) for info in table)
        ids = [info.layer_id for info in table
               if lo <= max(info.resolution) <= hi]

    if sel.resolution_range is not None:
        lo, hi = sel.resolution_range
        ids = [i for i in ids if lo <= max(by_id[i].resolution) <= hi]

    if not ids:
        raise SelectionError(f"selection {sel.mode!r} resolves to zero layers")
    return ids


def extract_representation(stack: ActivationStack, sel: LayerSelection,
                           target_res: tuple | None = None,
                           allow_downscale: bool = False) -> PixelRepresentation:
    """Upsample the selected maps to a common resolution and concatenate.

    Resampling is bilinear without corner alignment. The default output
    resolution is that of the largest selected map; an explicit smaller
    `target_res` requires `allow_downscale`.
    """
    table = stack.layer_table
    ids = resolve_selection(sel, table)
    chosen = [(info, val) for info, val in stack.entries if info.layer_id in ids]

    if target_res is None:
        h_r = max(info.resolution[0] for info, _ in chosen)
        w_r = max(info.resolution[1] for info, _ in chosen)
    else:
        h_r, w_r = int(target_res[0]), int(target_res[1])
        too_big = [info.layer_id for info, _ in chosen
                   if info.resolution[0] > h_r or info.resolution[1] > w_r]
        if too_big and not allow_downscale:
            raise ShapeError(
                f"target_res {(h_r, w_r)} is smaller than selected layers {too_big}; "
                "pass allow_downscale=True to permit this")

    parts = []
    offsets = []
    start = 0
    for info, value in chosen:
        if value.shape[:2] == (h_r, w_r):
            resized = value.astype(np.float32, copy=False)
        else:
            t = torch.from_numpy(value).permute(2, 0, 1).unsqueeze(0)
            t = F.interpolate(t.float(), size=(h_r, w_r), mode="bilinear",
                              align_corners=False)
            resized = t[0].permute(1, 2, 0).numpy()
        parts.append(resized)
        offsets.append((start, info.channels))
        start += info.channels

    values = np.concatenate(parts, axis=2).astype(np.float32, copy=False)
    return PixelRepresentation(values=values, channel_offsets=offsets,
                               source_selection=sel)


def pixel_feature(rep: PixelRepresentation, x: int, y: int) -> np.ndarray:
    """Feature vector of the pixel at column x, row y (pure read)."""
    h, w = rep.resolution
    if not (0 <= x < w and 0 <= y < h):
        raise IndexError(f"pixel ({x}, {y}) outside representation {w}x{h}")
    return rep.values[y, x, :]


def channel_stats(reps: list) -> tuple:
    """Per-channel mean/std pooled over the given representations.

    Intended for the optional feature-standardization flag; call it on the
    k training representations only.
    """
    flat = np.concatenate([r.values.reshape(-1, r.n_channels) for r in reps])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std < 1e-6] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def save_representation(rep: PixelRepresentation, path):
    meta = {
        "resolution": list(rep.resolution),
        "channel_offsets": [list(o) for o in rep.channel_offsets],
        "selection": rep.source_selection.to_dict(),
    }
    return save_archive(path, "representation", {"values": rep.values}, meta)


def load_representation(path) -> PixelRepresentation:
    _, meta, tensors = load_archive(path, expect_kind="representation")
    return PixelRepresentation(
        values=tensors["values"].astype(np.float32),
        channel_offsets=[tuple(o) for o in meta["channel_offsets"]],
        source_selection=LayerSelection.from_dict(meta["selection"]),
    )
