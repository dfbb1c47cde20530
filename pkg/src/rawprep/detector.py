"""Single-scale grid detector: one anchor per cell, three loss terms.

The backbone is four conv blocks with strides (2,2,2,1), so the prediction
grid is input_size/8 cells per side (8x8 on a 64x64 image) while keeping
four blocks of increasing width. A 1x1 head emits per cell one objectness
logit, C class logits, and four box values: the center offset within the
cell in [0,1) and log width/height relative to the image.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as ly

_BACKBONE_STRIDES = (2, 2, 2, 1)
GRID_STRIDE = 8  # product of backbone strides


@dataclass
class Box:
    x: float
    y: float
    w: float
    h: float
    label: int
    score: float = 1.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive extent, got w={self.w}, h={self.h}")

    @property
    def area(self):
        return self.w * self.h

    @property
    def center(self):
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h, self.label, self.score)


@dataclass
class DetectorConfig:
    image_size: tuple = (64, 64)
    classes: int = 3
    channels: tuple = (16, 32, 64, 64)

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.channels = tuple(self.channels)
        if any(s % 16 for s in self.image_size):
            raise ValueError(f"image size must be divisible by 16, got {self.image_size}")
        if self.classes < 1:
            raise ValueError("need at least one class")
        if len(self.channels) != len(_BACKBONE_STRIDES):
            raise ValueError(f"backbone needs {len(_BACKBONE_STRIDES)} stage widths")

    @property
    def grid(self):
        return (self.image_size[0] // GRID_STRIDE, self.image_size[1] // GRID_STRIDE)

    @property
    def head_channels(self):
        return 1 + self.classes + 4


class GridDetector(ly.Module):
    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        cin = 3
        self.blocks = []
        for i, (cout, stride) in enumerate(zip(config.channels, _BACKBONE_STRIDES), start=1):
            self.blocks.append(self.add_child(f"block{i}", ly.ConvBlock(cin, cout, 3, rng, stride=stride)))
            cin = cout
        self.head = self.add_child("head", ly.Conv2d(cin, config.head_channels, 1, rng))

    def forward(self, x):
        if x.data.shape[-2:] != self.config.image_size:
            raise ly.ShapeError(f"detector expects {self.config.image_size} input, got {x.data.shape[-2:]}")
        for block in self.blocks:
            x = block(x)
        return self.head(x)


# -- target assignment ------------------------------------------------------


@dataclass
class GridTargets:
    objectness: np.ndarray   # (N, S, S) floats in {0, 1}
    labels: np.ndarray       # (N, S, S) int, valid where positive
    boxes: np.ndarray        # (N, 4, S, S): dx, dy, log w, log h
    n_pos: np.ndarray        # (N,) positive-cell counts
    owner: np.ndarray = field(default=None)  # (N, S, S) truth index per positive cell, -1 elsewhere


def assign_targets(truth_per_image, config):
    """Rasterize ground truth onto the grid: center cell owns each box.

    Two centers in one cell: the larger-area box wins, ties to the lower
    list index (enforced by strict > during the scan).
    """
    gh, gw = config.grid
    ih, iw = config.image_size
    cell_h, cell_w = ih / gh, iw / gw
    n = len(truth_per_image)
    objectness = np.zeros((n, gh, gw), dtype=np.float32)
    labels = np.zeros((n, gh, gw), dtype=np.int64)
    boxes = np.zeros((n, 4, gh, gw), dtype=np.float32)
    owner = np.full((n, gh, gw), -1, dtype=np.int64)
    areas = np.zeros((n, gh, gw), dtype=np.float64)
    for ni, truths in enumerate(truth_per_image):
        for ti, box in enumerate(truths):
            if not 0 <= box.label < config.classes:
                raise ValueError(f"label {box.label} outside [0, {config.classes})")
            cx, cy = box.center
            col = min(int(cx / cell_w), gw - 1)
            row = min(int(cy / cell_h), gh - 1)
            if objectness[ni, row, col] and box.area <= areas[ni, row, col]:
                continue
            objectness[ni, row, col] = 1.0
            labels[ni, row, col] = box.label
            areas[ni, row, col] = box.area
            owner[ni, row, col] = ti
            boxes[ni, 0, row, col] = cx / cell_w - col
            boxes[ni, 1, row, col] = cy / cell_h - row
            boxes[ni, 2, row, col] = np.log(box.w / iw)
            boxes[ni, 3, row, col] = np.log(box.h / ih)
    n_pos = objectness.sum(axis=(1, 2)).astype(np.int64)
    return GridTargets(objectness, labels, boxes, n_pos, owner)


# -- loss --------------------------------------------------------------------


def detection_loss_parts(head_out, targets):
    """The three loss terms as separate graph nodes, for per-term logging.

    Every term is averaged per image over its own support (all cells for
    objectness, positive cells for the class and box terms), then over the
    batch, via constant weight maps baked into each fused loss.
    """
    n, ch, gh, gw = head_out.data.shape
    classes = ch - 5
    obj_logits = ad.narrow(head_out, 1, 0, 1)
    cls_logits = ad.narrow(head_out, 1, 1, classes)
    box_preds = ad.narrow(head_out, 1, 1 + classes, 4)

    cells = gh * gw
    obj_w = np.full((n, 1, gh, gw), 1.0 / (cells * n), dtype=np.float32)
    obj_loss = ly.bce_with_logits(obj_logits, targets.objectness[:, None], weights=obj_w)

    pos = targets.objectness > 0
    per_image = 1.0 / (np.maximum(targets.n_pos, 1)[:, None, None] * n)
    pos_w = (pos * per_image).astype(np.float32)
    onehot = np.zeros((n, classes, gh, gw), dtype=np.float32)
    safe_labels = np.clip(targets.labels, 0, classes - 1)
    np.put_along_axis(onehot, safe_labels[:, None], 1.0, axis=1)
    onehot *= pos[:, None]
    cls_loss = ly.softmax_cross_entropy(cls_logits, onehot, axis=1, weights=pos_w)

    box_w = np.broadcast_to(pos_w[:, None], (n, 4, gh, gw)).astype(np.float32)
    box_loss = ly.smooth_l1(box_preds, targets.boxes, weights=box_w)

    return {"objectness": obj_loss, "classification": cls_loss, "box": box_loss}


def detection_loss(head_out, targets):
    """BCE objectness + CE class + smooth-L1 box, equally weighted."""
    parts = detection_loss_parts(head_out, targets)
    return parts["objectness"] + parts["classification"] + parts["box"]


# -- decoding ----------------------------------------------------------------


def iou(a, b):
    """Intersection over union of two Boxes."""
    x1 = max(a.x, b.x)
    y1 = max(a.y, b.y)
    x2 = min(a.x + a.w, b.x + b.w)
    y2 = min(a.y + a.h, b.y + b.h)
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


def decode(head_out, config, score_threshold=0.3, nms_iou=0.5):
    """Head output -> per-image Box lists, deterministically ordered.

    Score = sigmoid(objectness) * max softmax(class). Greedy per-class NMS
    suppresses IoU >= nms_iou; candidates are visited by score descending
    with ties broken by lower cell index, and the final list keeps that
    order, so the result is independent of candidate permutation.
    """
    data = head_out.data if isinstance(head_out, ad.Tensor) else np.asarray(head_out)
    n, ch, gh, gw = data.shape
    classes = ch - 5
    ih, iw = config.image_size
    cell_h, cell_w = ih / gh, iw / gw
    results = []
    for ni in range(n):
        obj = _sigmoid(data[ni, 0])
        cls = data[ni, 1:1 + classes]
        ez = np.exp(cls - cls.max(axis=0, keepdims=True))
        probs = ez / ez.sum(axis=0, keepdims=True)
        best_cls = probs.argmax(axis=0)
        scores = obj * probs.max(axis=0)
        raw = data[ni, 1 + classes:]
        candidates = []
        for row in range(gh):
            for col in range(gw):
                score = float(scores[row, col])
                if score < score_threshold:
                    continue
                dx = float(np.clip(raw[0, row, col], 0.0, 1.0 - 1e-9))
                dy = float(np.clip(raw[1, row, col], 0.0, 1.0 - 1e-9))
                bw = float(np.exp(np.clip(raw[2, row, col], -8.0, 4.0))) * iw
                bh = float(np.exp(np.clip(raw[3, row, col], -8.0, 4.0))) * ih
                cx = (col + dx) * cell_w
                cy = (row + dy) * cell_h
                x1 = max(0.0, cx - 0.5 * bw)
                y1 = max(0.0, cy - 0.5 * bh)
                x2 = min(float(iw), cx + 0.5 * bw)
                y2 = min(float(ih), cy + 0.5 * bh)
                if x2 - x1 <= 1e-6 or y2 - y1 <= 1e-6:
                    continue
                cell_index = row * gw + col
                candidates.append((-score, cell_index,
                                   Box(x1, y1, x2 - x1, y2 - y1, int(best_cls[row, col]), score)))
        candidates.sort(key=lambda item: (item[0], item[1]))
        kept = []
        for _, _, box in candidates:
            if any(k.label == box.label and iou(k, box) >= nms_iou for k in kept):
                continue
            kept.append(box)
        results.append(kept)
    return results
