"""Minimal single-shot detection plumbing: anchor grid, IoU matching with
best-match forcing, SSD-style box offset encoding, and a synthetic
shapes-on-noise dataset so the distillation losses run end to end.

Boxes are (x1, y1, x2, y2) in normalized [0, 1] image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blobio


@dataclass
class AnchorGrid:
    height: int
    width: int
    sizes: list = field(default_factory=lambda: [(0.25, 0.25), (0.45, 0.45)])

    def __post_init__(self):
        for w, h in self.sizes:
            if w <= 0 or h <= 0:
                raise ValueError("anchor sizes must be positive")

    @property
    def num_anchors(self):
        return len(self.sizes)

    def centers_wh(self) -> np.ndarray:
        """(H*W*A, 4) anchors as (cx, cy, w, h)."""
        ys = (np.arange(self.height) + 0.5) / self.height
        xs = (np.arange(self.width) + 0.5) / self.width
        out = []
        for cy in ys:
            for cx in xs:
                for w, h in self.sizes:
                    out.append((cx, cy, w, h))
        return np.asarray(out)

    def corners(self) -> np.ndarray:
        a = self.centers_wh()
        return np.stack([a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2,
                         a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2], axis=1)


@dataclass
class SyntheticScene:
    image: np.ndarray          # (3, H, W) float32
    boxes: np.ndarray          # (n, 4) corner form
    labels: np.ndarray         # (n,) ints in 1..num_classes (0 = background)


def iou(box_a, box_b) -> float:
    a = np.asarray(box_a, dtype=float)
    b = np.asarray(box_b, dtype=float)
    for box in (a, b):
        if box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"degenerate box {box.tolist()}")
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=float)[:, None, :]
    b = np.asarray(boxes_b, dtype=float)[None, :, :]
    ix = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    iy = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = ix * iy
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def encode_box(box, anchor_cwh) -> np.ndarray:
    """Corner box -> (dcx/aw, dcy/ah, log(w/aw), log(h/ah)) offsets."""
    b = np.asarray(box, dtype=float)
    cx, cy = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
    w, h = b[2] - b[0], b[3] - b[1]
    acx, acy, aw, ah = anchor_cwh
    return np.asarray([(cx - acx) / aw, (cy - acy) / ah,
                       np.log(w / aw), np.log(h / ah)])


def decode_box(offsets, anchor_cwh) -> np.ndarray:
    t = np.asarray(offsets, dtype=float)
    acx, acy, aw, ah = anchor_cwh
    cx, cy = t[0] * aw + acx, t[1] * ah + acy
    w, h = aw * np.exp(t[2]), ah * np.exp(t[3])
    return np.asarray([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def match_anchors(grid: AnchorGrid, truths, threshold: float = 0.5):
    """truths: (boxes (n, 4), labels (n,)). Anchors with max IoU >= threshold
    become positives; each truth's best anchor is forced positive. Returns
    (y_cls, y_loc, positives, N)."""
    anchors = grid.corners()
    anchors_cwh = grid.centers_wh()
    m = anchors.shape[0]
    y_cls = np.zeros(m, dtype=int)
    y_loc = np.zeros((m, 4))
    positives = np.zeros(m, dtype=bool)
    boxes, labels = truths
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return y_cls, y_loc, positives, 0
    labels = np.asarray(labels, dtype=int)
    ious = iou_matrix(anchors, boxes)
    best_truth = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    positives = best_iou >= threshold
    # best-match forcing: every truth recalls at least one anchor
    for ti in range(boxes.shape[0]):
        ai = int(ious[:, ti].argmax())
        positives[ai] = True
        best_truth[ai] = ti
    for ai in np.flatnonzero(positives):
        ti = best_truth[ai]
        y_cls[ai] = labels[ti]
        y_loc[ai] = encode_box(boxes[ti], anchors_cwh[ai])
    return y_cls, y_loc, positives, int(positives.sum())


# ---------------------------------------------------------------------------
# synthetic scenes

NUM_SHAPE_CLASSES = 3  # 1 = square, 2 = disc, 3 = cross


def _draw_shape(img, cls, box, color, size):
    h, w = img.shape[1:]
    x1, y1, x2, y2 = (box * np.array([w, h, w, h])).astype(int)
    x2, y2 = max(x2, x1 + 2), max(y2, y1 + 2)
    yy, xx = np.mgrid[y1:y2, x1:x2]
    cy, cx = (y1 + y2) / 2, (x1 + x2) / 2
    ry, rx = (y2 - y1) / 2, (x2 - x1) / 2
    if cls == 1:
        mask = np.ones_like(yy, dtype=bool)
    elif cls == 2:
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        mask = (np.abs(yy - cy) < ry / 3) | (np.abs(xx - cx) < rx / 3)
    for c in range(3):
        img[c, y1:y2, x1:x2][mask] = color[c]


def generate_scenes(count: int, seed: int, image_size: int = 64,
                    max_objects: int = 2, noise: float = 0.15):
    """Deterministic list of SyntheticScenes for a seed."""
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(count):
        img = rng.normal(0.0, noise, (3, image_size, image_size)).astype(np.float32)
        n = int(rng.integers(1, max_objects + 1))
        boxes, labels = [], []
        for _ in range(n):
            cls = int(rng.integers(1, NUM_SHAPE_CLASSES + 1))
            size = rng.uniform(0.25, 0.5)
            x1 = rng.uniform(0.0, 1.0 - size)
            y1 = rng.uniform(0.0, 1.0 - size)
            box = np.asarray([x1, y1, x1 + size, y1 + size])
            color = rng.uniform(0.6, 1.0, 3) * rng.choice([-1.0, 1.0])
            _draw_shape(img, cls, box, color, size)
            boxes.append(box)
            labels.append(cls)
        scenes.append(SyntheticScene(img, np.asarray(boxes), np.asarray(labels)))
    return scenes


def dominant_label(scene: SyntheticScene) -> int:
    """Class of the largest object, as a 0-based classification label."""
    areas = (scene.boxes[:, 2] - scene.boxes[:, 0]) * \
        (scene.boxes[:, 3] - scene.boxes[:, 1])
    return int(scene.labels[int(np.argmax(areas))]) - 1


def scenes_to_class_batches(scenes, batch_size: int):
    xs = np.stack([s.image for s in scenes])
    ys = np.asarray([dominant_label(s) for s in scenes])
    return [(xs[i:i + batch_size], ys[i:i + batch_size])
            for i in range(0, len(scenes), batch_size)]


def save_scenes(scenes, blob_path, index_path):
    arrays = {}
    lines = []
    for i, s in enumerate(scenes):
        arrays[f"scene{i}/image"] = s.image
        arrays[f"scene{i}/boxes"] = s.boxes
        arrays[f"scene{i}/labels"] = s.labels.astype(np.float32)
        lines.append(f"scene{i} objects={len(s.labels)}")
    blobio.save_blob(arrays, blob_path)
    with open(index_path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_scenes(blob_path):
    flat = blobio.load_blob(blob_path)
    nested = blobio.unflatten_params(flat)
    scenes = []
    for i in range(len(nested)):
        g = nested[f"scene{i}"]
        scenes.append(SyntheticScene(g["image"], g["boxes"].astype(float),
                                     g["labels"].astype(int)))
    return scenes
