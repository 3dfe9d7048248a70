"""Desk-scale synthetic parts dataset and shared annotation/manifest file IO.

The renderer draws a three-part "bug" (body ellipse, head disc, stripe bar)
with per-sample pose and color jitter on a dark background. Ground-truth masks
are exact by construction: the label of a pixel is the topmost part covering
its center. Images get soft (supersampled) edges so they resemble photographs
rather than binary stencils.

Class layout: 0 background, 1 body, 2 stripe, 3 head.
"""

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin, UnidentifiedImageError

from .errors import AnnotationError, DatasetError
from .segmenters import IGNORE_LABEL, PartAnnotation

CLASS_NAMES = ("background", "body", "stripe", "head")

# Base colors in [0, 1], well separated so a nearest-color rule is robust
# under the configured jitter.
BASE_COLORS = np.array([
    [0.09, 0.09, 0.11],   # background
    [0.78, 0.22, 0.20],   # body
    [0.22, 0.32, 0.82],   # stripe
    [0.20, 0.72, 0.28],   # head
], dtype=np.float32)

MAX_ANNOTATION_DIM = 65535


@dataclass
class SyntheticPartsConfig:
    resolution: int = 32
    n_classes: int = 4
    dataset_size: int = 2000
    rng_seed: int = 0
    color_jitter: float = 0.08
    # pose/scale jitter is deliberately strong so that pixel position alone is
    # a weak predictor of the part layout
    center_jitter: float = 0.12      # fraction of resolution, per axis
    rotation_deg: float = 55.0
    scale_range: tuple = (0.75, 1.2)  # whole-object scale factor
    body_rx: tuple = (0.26, 0.35)    # fractions of resolution
    body_ry: tuple = (0.18, 0.26)
    head_radius: tuple = (0.11, 0.15)
    stripe_width: tuple = (0.10, 0.14)
    stripe_offset: float = 0.10      # stripe shift along the major axis
    same_color_parts: bool = False   # paint head with the body color (invisible boundary)
    supersample: int = 4

    def __post_init__(self):
        if self.n_classes != len(CLASS_NAMES):
            raise DatasetError(f"renderer draws {len(CLASS_NAMES)} classes")
        for lo, hi in (self.body_rx, self.body_ry, self.head_radius, self.stripe_width):
            if lo <= 0 or hi < lo:
                raise DatasetError("degenerate part size range")


def _sample_params(cfg: SyntheticPartsConfig, rng: np.random.Generator):
    r = cfg.resolution
    scale = rng.uniform(*cfg.scale_range)
    params = {
        "cx": r / 2 + rng.uniform(-1, 1) * cfg.center_jitter * r,
        "cy": r / 2 + rng.uniform(-1, 1) * cfg.center_jitter * r,
        "rx": rng.uniform(*cfg.body_rx) * r * scale,
        "ry": rng.uniform(*cfg.body_ry) * r * scale,
        "theta": np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)),
        "head_r": rng.uniform(*cfg.head_radius) * r * scale,
        "head_side": 1.0 if rng.random() < 0.5 else -1.0,
        "stripe_w": rng.uniform(*cfg.stripe_width) * r * scale,
        "stripe_off": rng.uniform(-cfg.stripe_offset, cfg.stripe_offset) * r * scale,
        "brightness": rng.uniform(0.92, 1.08),
    }
    jitter = rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=BASE_COLORS.shape)
    colors = np.clip(BASE_COLORS + jitter, 0.02, 0.98)
    if cfg.same_color_parts:
        colors[3] = colors[1]
    params["colors"] = colors.astype(np.float32)
    return params


def _memberships(params, xs, ys):
    """Boolean membership of each part at the given coordinate grids."""
    ct, st = np.cos(params["theta"]), np.sin(params["theta"])
    dx, dy = xs - params["cx"], ys - params["cy"]
    u = dx * ct + dy * st        # along the body's major axis
    v = -dx * st + dy * ct
    body = (u / params["rx"]) ** 2 + (v / params["ry"]) ** 2 <= 1.0

    hx = params["cx"] + params["head_side"] * (params["rx"] + 0.5 * params["head_r"]) * ct
    hy = params["cy"] + params["head_side"] * (params["rx"] + 0.5 * params["head_r"]) * st
    head = (xs - hx) ** 2 + (ys - hy) ** 2 <= params["head_r"] ** 2

    stripe = body & (np.abs(u - params["stripe_off"]) <= params["stripe_w"] / 2)
    return body, stripe, head


def _render_sample(cfg: SyntheticPartsConfig, rng: np.random.Generator):
    r, s = cfg.resolution, cfg.supersample
    params = _sample_params(cfg, rng)

    # Labels: part membership at pixel centers, topmost part wins.
    yy, xx = np.mgrid[0:r, 0:r]
    body, stripe, head = _memberships(params, xx + 0.5, yy + 0.5)
    labels = np.zeros((r, r), dtype=np.uint8)
    labels[body] = 1
    labels[stripe] = 2
    labels[head] = 3

    # Image: per-part coverage from an s*s subpixel grid, composited in z-order.
    fine = (np.arange(r * s) + 0.5) / s
    fy, fx = np.meshgrid(fine, fine, indexing="ij")
    cov = _memberships(params, fx, fy)
    colors = params["colors"]
    img = np.empty((r, r, 3), dtype=np.float32)
    img[:] = colors[0]
    for part_cov, color in zip(cov, colors[1:]):
        frac = part_cov.astype(np.float32).reshape(r, s, r, s).mean(axis=(1, 3))
        img = img * (1.0 - frac[..., None]) + color * frac[..., None]
    img = np.clip(img * params["brightness"], 0.0, 1.0)
    return img * 2.0 - 1.0, labels


def make_synthetic_parts_dataset(cfg: SyntheticPartsConfig):
    """Render the dataset; returns (images (N,H,W,3) in [-1,1], annotations)."""
    if cfg.dataset_size < 1:
        raise DatasetError("dataset_size must be >= 1")
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.dataset_size)
    images = np.empty((cfg.dataset_size, cfg.resolution, cfg.resolution, 3),
                      dtype=np.float32)
    annotations = []
    for i, ss in enumerate(seeds):
        img, labels = _render_sample(cfg, np.random.default_rng(ss))
        images[i] = img
        annotations.append(PartAnnotation(labels=labels, n_classes=cfg.n_classes,
                                          class_names=list(CLASS_NAMES)))
    return images, annotations


def reference_palette() -> np.ndarray:
    """Class reference colors in image units ([-1, 1])."""
    return (BASE_COLORS * 2.0 - 1.0).astype(np.float32)


def oracle_annotate(image: np.ndarray, n_classes: int = 4,
                    ignore_boundary: int = 0) -> PartAnnotation:
    """Label each pixel by the nearest class reference color.

    The stand-in for a human annotator at desk scale: works on any image of
    the synthetic domain, including generator output. Not meaningful when the
    dataset was rendered with same_color_parts.

    `ignore_boundary` marks pixels within that many steps of a class boundary
    as IGNORE — the annotator's "leave uncertain edge pixels unlabeled"
    policy; color mixing makes boundary pixels genuinely ambiguous.
    """
    palette = reference_palette()[:n_classes]
    dist = ((image[..., None, :] - palette) ** 2).sum(axis=-1)
    labels = dist.argmin(axis=-1).astype(np.uint8)
    for _ in range(ignore_boundary):
        labels = _ignore_class_boundaries(labels)
    return PartAnnotation(labels=labels, n_classes=n_classes,
                          class_names=list(CLASS_NAMES)[:n_classes])


def _ignore_class_boundaries(labels: np.ndarray) -> np.ndarray:
    """Set pixels with any 8-neighbor of a different class to IGNORE."""
    padded = np.pad(labels, 1, mode="edge")
    interior = np.ones(labels.shape, dtype=bool)
    h, w = labels.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            interior &= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] == labels
    out = labels.copy()
    out[~interior] = IGNORE_LABEL
    return out


# --- annotation file IO -----------------------------------------------------

def _annotation_palette(n_classes):
    colors = np.full((256, 3), 64, dtype=np.uint8)
    base = (BASE_COLORS * 255).astype(np.uint8)
    colors[:min(n_classes, len(base))] = base[:n_classes]
    colors[IGNORE_LABEL] = (255, 0, 255)
    return colors.flatten().tolist()


def save_annotation(ann: PartAnnotation, path):
    """Write labels as an indexed-palette PNG; pixel value == class id."""
    h, w = ann.labels.shape
    if h > MAX_ANNOTATION_DIM or w > MAX_ANNOTATION_DIM:
        raise AnnotationError(f"annotation {w}x{h} exceeds {MAX_ANNOTATION_DIM}")
    bad = ann.labels[(ann.labels >= ann.n_classes) & (ann.labels != IGNORE_LABEL)]
    if bad.size:
        raise AnnotationError(f"label value {int(bad[0])} outside palette "
                              f"(n_classes={ann.n_classes})")
    im = Image.fromarray(ann.labels.astype(np.uint8), mode="P")
    im.putpalette(_annotation_palette(ann.n_classes))
    info = PngImagePlugin.PngInfo()
    info.add_text("ganseg_n_classes", str(ann.n_classes))
    if ann.class_names:
        info.add_text("ganseg_class_names", json.dumps(ann.class_names))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG", pnginfo=info)
    return path


def load_annotation(path, n_classes: int | None = None) -> PartAnnotation:
    """Read an indexed or grayscale mask PNG back into a PartAnnotation."""
    try:
        im = Image.open(path)
        im.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise AnnotationError(f"cannot read annotation {path}: {e}") from e
    if im.mode not in ("P", "L"):
        raise AnnotationError(f"{path}: mode {im.mode} is not an indexed mask")
    labels = np.asarray(im, dtype=np.uint8)
    if n_classes is None:
        text = getattr(im, "text", {})
        if "ganseg_n_classes" in text:
            n_classes = int(text["ganseg_n_classes"])
        else:
            non_ignore = labels[labels != IGNORE_LABEL]
            n_classes = int(non_ignore.max()) + 1 if non_ignore.size else 2
            n_classes = max(n_classes, 2)
    names = None
    text = getattr(im, "text", {})
    if "ganseg_class_names" in text:
        names = json.loads(text["ganseg_class_names"])
    return PartAnnotation(labels=labels, n_classes=n_classes, class_names=names)


# --- manifest IO -------------------------------------------------------------

def file_crc32(path) -> str:
    return format(zlib.crc32(Path(path).read_bytes()) & 0xFFFFFFFF, "08x")


def append_manifest(path, record: dict):
    """Append one record as a JSON line. The record's referenced files must
    already exist on disk; nothing is written if serialization fails."""
    line = json.dumps(record, sort_keys=True) + "\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(line)
        f.flush()


def read_manifest(path, base_dir=None, verify_checksums: bool = True) -> list:
    """Read all records; verify per-file CRCs when present.

    A checksum failure or malformed line raises DatasetError naming the
    offending record. An empty manifest yields an empty list.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    base = Path(base_dir) if base_dir is not None else path.parent
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed manifest line: {e}") from e
            if verify_checksums and isinstance(rec.get("checksum"), dict):
                for key, expected in rec["checksum"].items():
                    target = base / rec[key]
                    if not target.exists():
                        raise DatasetError(
                            f"{path}:{lineno} (id={rec.get('id')}): missing file {rec[key]}")
                    actual = file_crc32(target)
                    if actual != expected:
                        raise DatasetError(
                            f"{path}:{lineno} (id={rec.get('id')}): checksum mismatch "
                            f"for {rec[key]} (expected {expected}, got {actual})")
            records.append(rec)
    return records


# --- image file helpers -------------------------------------------------------

def save_image(image: np.ndarray, path):
    """[-1, 1] float image -> 8-bit PNG."""
    arr = np.clip((image + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def load_image(path) -> np.ndarray:
    """8-bit image file -> float32 (H, W, 3) in [-1, 1]."""
    try:
        im = Image.open(path).convert("RGB")
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    return np.asarray(im, dtype=np.float32) / 127.5 - 1.0


def write_dataset_dir(images, annotations, root, test_fraction: float = 0.25,
                      rng_seed: int = 0):
    """Persist a rendered dataset as images/ + masks/ + manifest + split file."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    manifest.write_text("")
    for i, (img, ann) in enumerate(zip(images, annotations)):
        img_rel = f"images/{i:05d}.png"
        mask_rel = f"masks/{i:05d}.png"
        save_image(img, root / img_rel)
        save_annotation(ann, root / mask_rel)
        append_manifest(manifest, {
            "id": i, "image": img_rel, "mask": mask_rel,
            "checksum": {"image": file_crc32(root / img_rel),
                         "mask": file_crc32(root / mask_rel)},
        })
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(images))
    n_test = int(len(images) * test_fraction)
    split = {"test": sorted(int(i) for i in order[:n_test]),
             "train": sorted(int(i) for i in order[n_test:])}
    (root / "split.json").write_text(json.dumps(split))
    return root


def load_dataset_dir(root, verify_checksums: bool = False):
    """Load a dataset directory back into memory; returns (images, annotations, split)."""
    root = Path(root)
    records = read_manifest(root / "manifest.jsonl", base_dir=root,
                            verify_checksums=verify_checksums)
    images, annotations = [], []
    for rec in records:
        images.append(load_image(root / rec["image"]))
        annotations.append(load_annotation(root / rec["mask"]))
    split_path = root / "split.json"
    split = json.loads(split_path.read_text()) if split_path.exists() else None
    images = np.stack(images) if images else np.zeros((0, 0, 0, 3), np.float32)
    return images, annotations, split
