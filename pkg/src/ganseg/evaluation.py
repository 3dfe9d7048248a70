"""Segmentation metrics and evaluation-set preprocessing.

Weighted IOU weighs each class by its share of ground-truth pixels; classes
absent from the ground truth get zero weight. Ignore-labeled ground-truth
pixels are excluded from every count. `crop_filter` implements the bounding
box based evaluation-set rules: size filter, mutual-overlap filter, crop, and
background fill.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .segmenters import IGNORE_LABEL, PartAnnotation


@dataclass
class IouReport:
    per_class: dict          # class id -> IOU in [0, 1], or None when undefined
    weighted: float
    class_weights: dict      # class id -> ground-truth pixel fraction
    pixel_counts: dict       # class id -> ground-truth pixel count
    excluded: tuple = ()

    def to_dict(self):
        return {
            "weighted": self.weighted,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "class_weights": {str(k): v for k, v in self.class_weights.items()},
            "pixel_counts": {str(k): v for k, v in self.pixel_counts.items()},
            "excluded": list(self.excluded),
        }


@dataclass
class CropFilterRules:
    min_size: tuple = (50, 50)        # (h, w); strictly smaller boxes are dropped
    max_overlap_iou: float = 0.05     # pairwise box IOU above this drops both
    background_fill: float = -1.0     # image value outside the object mask
    exclude_background_in_score: bool = True

    def __post_init__(self):
        if self.min_size[0] < 0 or self.min_size[1] < 0 or self.max_overlap_iou < 0:
            raise ValueError("crop/filter thresholds must be non-negative")


def _check_pair(pred: PartAnnotation, gt: PartAnnotation):
    if pred.labels.shape != gt.labels.shape:
        raise ShapeError(
            f"prediction {pred.labels.shape} and ground truth {gt.labels.shape} differ")


def _class_counts(pred, gt, n_classes):
    """Per-class (intersection, union, gt count) as python ints."""
    valid = gt.labels != IGNORE_LABEL
    out = {}
    for c in range(n_classes):
        p = (pred.labels == c) & valid
        g = (gt.labels == c) & valid
        out[c] = (int((p & g).sum()), int((p | g).sum()), int(g.sum()))
    return out


def iou(pred: PartAnnotation, gt: PartAnnotation, class_id: int):
    """Intersection over union for one class; None when the union is empty."""
    _check_pair(pred, gt)
    valid = gt.labels != IGNORE_LABEL
    p = (pred.labels == class_id) & valid
    g = (gt.labels == class_id) & valid
    union = int((p | g).sum())
    if union == 0:
        return None
    return int((p & g).sum()) / union


def _report_from_counts(counts, excluded=()):
    total = sum(cnt for _, _, cnt in counts.values())
    if total == 0:
        raise ShapeError("ground truth is entirely ignore-labeled")
    per_class = {}
    weights = {}
    pixel_counts = {}
    for c in sorted(counts):
        inter, union, gt_count = counts[c]
        per_class[c] = inter / union if union > 0 else None
        weights[c] = gt_count / total
        pixel_counts[c] = gt_count

    # Accumulate gt_count * IOU and divide by the scored pixel total at the
    # end: weights stay exact, so weighted_iou(m, m) == 1.0 exactly, and
    # excluding classes renormalizes over the remaining ones.
    scored = [c for c in sorted(counts) if c not in excluded and pixel_counts[c] > 0]
    denom = sum(pixel_counts[c] for c in scored)
    if denom == 0:
        raise ShapeError("no scorable classes left after exclusion")
    acc = 0.0
    for c in scored:
        acc += pixel_counts[c] * per_class[c]
    return IouReport(per_class=per_class, weighted=acc / denom, class_weights=weights,
                     pixel_counts=pixel_counts, excluded=tuple(excluded))


def weighted_iou(pred: PartAnnotation, gt: PartAnnotation,
                 exclude: tuple = ()) -> IouReport:
    """Per-class IOUs combined with ground-truth pixel-fraction weights.

    With `exclude` (e.g. the background class), weights renormalize over the
    remaining present classes.
    """
    _check_pair(pred, gt)
    n = max(pred.n_classes, gt.n_classes)
    return _report_from_counts(_class_counts(pred, gt, n), exclude)


def evaluate_set(preds: list, gts: list, exclude: tuple = (),
                 per_image: bool = False):
    """Weighted IOU over a test set, pooling pixel counts across images.

    Returns one pooled IouReport, or a list of per-image reports when
    `per_image` is set.
    """
    if len(preds) != len(gts) or not preds:
        raise ShapeError("need equal, non-empty prediction/ground-truth lists")
    if per_image:
        return [weighted_iou(p, g, exclude) for p, g in zip(preds, gts)]
    n = max(max(p.n_classes for p in preds), max(g.n_classes for g in gts))
    pooled = {c: [0, 0, 0] for c in range(n)}
    for p, g in zip(preds, gts):
        _check_pair(p, g)
        for c, (inter, union, cnt) in _class_counts(p, g, n).items():
            pooled[c][0] += inter
            pooled[c][1] += union
            pooled[c][2] += cnt
    return _report_from_counts({c: tuple(v) for c, v in pooled.items()}, exclude)


def mean_iou_excluding(pred: PartAnnotation, gt: PartAnnotation,
                       excluded: tuple = ()) -> float:
    """Unweighted mean of the defined per-class IOUs outside `excluded`."""
    report = weighted_iou(pred, gt)
    values = [v for c, v in report.per_class.items()
              if c not in excluded and v is not None]
    if not values:
        raise ShapeError("all classes excluded or undefined")
    return sum(values) / len(values)


# --- evaluation-set construction ---------------------------------------------

@dataclass
class ObjectInstance:
    """One annotated object: a pixel box (x0, y0, x1, y1), end-exclusive, and a
    full-image part-label mask where 0 marks pixels outside the object."""
    box: tuple
    mask: np.ndarray


@dataclass
class SceneRecord:
    image: np.ndarray
    objects: list = field(default_factory=list)


def box_iou(a, b) -> float:
    """IOU of two axis-aligned boxes (x0, y0, x1, y1)."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix1 - ix0, 0) * max(iy1 - iy0, 0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def crop_filter(scenes: list, rules: CropFilterRules, n_classes: int = 2) -> list:
    """Build an evaluation set of (cropped image, cropped PartAnnotation).

    Per scene: objects in boxes strictly smaller than `min_size` are dropped;
    any pair of boxes overlapping with IOU above `max_overlap_iou` drops both
    members; surviving objects are cropped to their box with non-object pixels
    filled by `background_fill`.
    """
    items = []
    for scene in scenes:
        h_img, w_img = scene.image.shape[:2]
        for obj in scene.objects:
            x0, y0, x1, y1 = obj.box
            if not (0 <= x0 < x1 <= w_img and 0 <= y0 < y1 <= h_img):
                raise ValueError(f"malformed box {obj.box} for image {w_img}x{h_img}")

        keep = []
        for i, obj in enumerate(scene.objects):
            x0, y0, x1, y1 = obj.box
            if (y1 - y0) < rules.min_size[0] or (x1 - x0) < rules.min_size[1]:
                continue
            keep.append(i)
        overlapping = set()
        for ai in range(len(keep)):
            for bi in range(ai + 1, len(keep)):
                a, b = scene.objects[keep[ai]], scene.objects[keep[bi]]
                if box_iou(a.box, b.box) > rules.max_overlap_iou:
                    overlapping.update((keep[ai], keep[bi]))
        for i in keep:
            if i in overlapping:
                continue
            obj = scene.objects[i]
            x0, y0, x1, y1 = obj.box
            crop = np.array(scene.image[y0:y1, x0:x1], copy=True)
            mask_crop = np.asarray(obj.mask[y0:y1, x0:x1], dtype=np.uint8)
            crop[mask_crop == 0] = rules.background_fill
            items.append((crop, PartAnnotation(labels=mask_crop, n_classes=n_classes)))
    return items
