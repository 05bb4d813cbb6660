"""Detection-head geometry: anchors, IoU, NMS, box deltas, ROI pooling,
per-class region selection, and the desk-scale detector head.

Boxes use half-open pixel edges with a top-left origin, so
area = (x2-x1)*(y2-y1) is exact in tests. The backbone is a parameter-free
average-pool feature grid; the trainable part is a logistic objectness
scorer plus a linear 30-way class head over ROI-pooled features
(class 0 is background, classes 1..29 are the anatomical regions).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .errors import DimensionError, InputError
from .optim import AdamWConfig, AdamWState, PlateauScheduler, adamw_step, plateau_step

NUM_CLASSES = 30  # 29 anatomical regions + background (class 0)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InputError(f"degenerate box {(self.x1, self.y1, self.x2, self.y2)}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InputError(f"score {self.score} outside [0,1]")
        if self.class_id < 0 or self.class_id >= NUM_CLASSES:
            raise InputError(f"class_id {self.class_id} outside [0,{NUM_CLASSES - 1}]")


@dataclass
class FeatureGrid:
    channels: int
    height: int
    width: int
    values: np.ndarray  # (channels, height, width) float32

    def __post_init__(self):
        if self.values.shape != (self.channels, self.height, self.width):
            raise DimensionError("feature grid shape mismatch")


@dataclass(frozen=True)
class BoxDeltas:
    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.tx, self.ty, self.tw, self.th)):
            raise InputError("box deltas must be finite")


def generate_anchors(grid_h: int, grid_w: int, stride: float,
                     scales: list[float], ratios: list[float]) -> list[Box]:
    """One anchor per (cell, scale, ratio), row-major cells, scale-major within.

    width = scale*sqrt(ratio), height = scale/sqrt(ratio), centered on the
    cell center (j+0.5)*stride, (i+0.5)*stride.
    """
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise InputError("scales and ratios must be positive")
    anchors = []
    for i in range(grid_h):
        cy = (i + 0.5) * stride
        for j in range(grid_w):
            cx = (j + 0.5) * stride
            for s in scales:
                for r in ratios:
                    w = s * math.sqrt(r)
                    h = s / math.sqrt(r)
                    anchors.append(Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return anchors


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(detections: list[Detection], iou_threshold: float) -> list[int]:
    """Greedy per-class suppression; returns kept original indices, ascending.

    Within a class, candidates are visited by descending score (ties to the
    lower index) and dropped when IoU with an already-kept box exceeds the
    threshold.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise InputError("iou_threshold must lie in [0,1]")
    kept: list[int] = []
    by_class: dict[int, list[int]] = {}
    for idx, d in enumerate(detections):
        by_class.setdefault(d.class_id, []).append(idx)
    for cls_indices in by_class.values():
        order = sorted(cls_indices, key=lambda i: (-detections[i].score, i))
        cls_kept: list[int] = []
        for i in order:
            if all(iou(detections[i].box, detections[k].box) <= iou_threshold
                   for k in cls_kept):
                cls_kept.append(i)
        kept.extend(cls_kept)
    return sorted(kept)


def encode_deltas(anchor: Box, target: Box) -> BoxDeltas:
    """Center-size offsets of target relative to anchor."""
    acx, acy = anchor.center
    tcx, tcy = target.center
    return BoxDeltas(
        tx=(tcx - acx) / anchor.width,
        ty=(tcy - acy) / anchor.height,
        tw=math.log(target.width / anchor.width),
        th=math.log(target.height / anchor.height),
    )


def decode_deltas(anchor: Box, deltas: BoxDeltas) -> Box:
    """Exact inverse of encode_deltas; log-size clamped against overflow."""
    acx, acy = anchor.center
    cx = acx + deltas.tx * anchor.width
    cy = acy + deltas.ty * anchor.height
    w = anchor.width * math.exp(min(deltas.tw, 60.0))
    h = anchor.height * math.exp(min(deltas.th, 60.0))
    return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def roi_pool(grid: FeatureGrid, box: Box, out_h: int, out_w: int) -> FeatureGrid:
    """Max-pools the clipped box to (channels, out_h, out_w).

    The box lives in grid-cell coordinates. It is quantized to integer cell
    boundaries (floor start, ceil end) and split into out_h*out_w bins, each
    at least one cell.
    """
    if out_h < 1 or out_w < 1:
        raise InputError("output size must be at least 1x1")
    x1 = max(0.0, min(box.x1, float(grid.width)))
    x2 = max(0.0, min(box.x2, float(grid.width)))
    y1 = max(0.0, min(box.y1, float(grid.height)))
    y2 = max(0.0, min(box.y2, float(grid.height)))
    if x2 <= x1 or y2 <= y1:
        raise InputError("box lies entirely outside the grid")
    gx1, gx2 = int(math.floor(x1)), int(math.ceil(x2))
    gy1, gy2 = int(math.floor(y1)), int(math.ceil(y2))
    rw, rh = gx2 - gx1, gy2 - gy1
    out = np.empty((grid.channels, out_h, out_w), dtype=grid.values.dtype)
    for i in range(out_h):
        hs = gy1 + int(math.floor(i * rh / out_h))
        he = gy1 + int(math.ceil((i + 1) * rh / out_h))
        he = max(he, hs + 1)
        for j in range(out_w):
            ws = gx1 + int(math.floor(j * rw / out_w))
            we = gx1 + int(math.ceil((j + 1) * rw / out_w))
            we = max(we, ws + 1)
            out[:, i, j] = grid.values[:, hs:he, ws:we].max(axis=(1, 2))
    return FeatureGrid(grid.channels, out_h, out_w, out)


def select_top_region_per_class(detections: list[Detection]) -> list[Detection]:
    """Highest-scored detection per non-background class, sorted by class id."""
    best: dict[int, tuple[float, int]] = {}
    for idx, d in enumerate(detections):
        if d.class_id == 0:
            continue
        cur = best.get(d.class_id)
        if cur is None or d.score > cur[0]:
            best[d.class_id] = (d.score, idx)
    return [detections[best[c][1]] for c in sorted(best)]


# ---------------------------------------------------------------------------
# Desk-scale backbone and detector head
# ---------------------------------------------------------------------------

FEATURE_CHANNELS = 16
FEATURE_STRIDE = 32


def feature_grid_from_image(pixels: np.ndarray) -> FeatureGrid:
    """Parameter-free pooled features of a 512x512 intensity grid.

    Each 32x32 patch becomes one cell; its 16 channels are the means of the
    patch's 4x4 layout of 8x8 sub-blocks, so ROI features keep coarse
    spatial structure inside the cell.
    """
    if pixels.shape != (512, 512):
        raise DimensionError(f"expected a 512x512 grid, got {pixels.shape}")
    p = pixels.reshape(16, 32, 16, 32).transpose(0, 2, 1, 3)          # (gh, gw, 32, 32)
    sub = p.reshape(16, 16, 4, 8, 4, 8).mean(axis=(3, 5))             # (gh, gw, 4, 4)
    values = sub.reshape(16, 16, 16).transpose(2, 0, 1)               # (c, gh, gw)
    return FeatureGrid(FEATURE_CHANNELS, 16, 16, values.astype(np.float32))


def roi_feature(grid: FeatureGrid, box_px: Box, out_h: int = 8, out_w: int = 8,
                stride: float = FEATURE_STRIDE) -> np.ndarray:
    """Flattened ROI-pooled feature of an image-space box (1024 dims at 8x8x16)."""
    cell_box = Box(box_px.x1 / stride, box_px.y1 / stride,
                   box_px.x2 / stride, box_px.y2 / stride)
    return roi_pool(grid, cell_box, out_h, out_w).values.astype(np.float64).ravel()


@dataclass
class AnchorConfig:
    stride: float = float(FEATURE_STRIDE)
    scales: tuple[float, ...] = (32.0, 64.0, 128.0, 256.0, 512.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    nms_threshold: float = 0.7
    pre_select: int = 128  # anchors kept by objectness before classification


DETECTOR_LAYOUT = nnops.ParamLayout([
    ("det.obj.weight", (1024, 1)),
    ("det.obj.bias", (1,)),
    ("det.cls.weight", (1024, NUM_CLASSES)),
    ("det.cls.bias", (NUM_CLASSES,)),
])


@dataclass
class DetectorHead:
    params: np.ndarray = field(default_factory=lambda: np.zeros(DETECTOR_LAYOUT.size))

    def views(self):
        return DETECTOR_LAYOUT.views(self.params)

    def objectness(self, feats: np.ndarray) -> np.ndarray:
        v = self.views()
        return nnops.sigmoid(feats @ v["det.obj.weight"] + v["det.obj.bias"]).ravel()

    def class_probs(self, feats: np.ndarray) -> np.ndarray:
        v = self.views()
        return nnops.softmax(feats @ v["det.cls.weight"] + v["det.cls.bias"], axis=-1)


def _detector_loss(params, feats, obj_labels, cls_labels):
    v = DETECTOR_LAYOUT.views(params)
    z = (feats @ v["det.obj.weight"] + v["det.obj.bias"]).ravel()
    y = obj_labels
    obj_loss = float(np.mean(y * nnops.softplus(-z) + (1 - y) * nnops.softplus(z)))
    dz = (nnops.sigmoid(z) - y) / z.shape[0]
    logits = feats @ v["det.cls.weight"] + v["det.cls.bias"]
    cls_loss, dlogits = nnops.cross_entropy_logits(logits, cls_labels)
    grads = np.zeros_like(params)
    gv = DETECTOR_LAYOUT.views(grads)
    gv["det.obj.weight"][...] = feats.T @ dz[:, None]
    gv["det.obj.bias"][...] = dz.sum()
    _, dw, db = nnops.affine_backward(feats, v["det.cls.weight"], dlogits)
    gv["det.cls.weight"][...] = dw
    gv["det.cls.bias"][...] = db
    return obj_loss + cls_loss, grads


@dataclass
class DetectorTrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learn_rate: float = 0.001
    weight_decay: float = 0.0
    factor: float = 0.5
    cooldown: int = 5
    patience: int = 5
    val_fraction: float = 0.15
    seed: int = 0


def train_detector(features: np.ndarray, obj_labels: np.ndarray,
                   cls_labels: np.ndarray, cfg: DetectorTrainConfig):
    """Trains the objectness + class head; returns (head, history rows).

    features: (N, 1024); obj_labels: (N,) in {0,1}; cls_labels: (N,) class ids.
    Keeps the parameters with the best validation loss.
    """
    n = features.shape[0]
    if n == 0:
        raise InputError("empty detector training set")
    rng = np.random.default_rng(cfg.seed)
    head = DetectorHead(DETECTOR_LAYOUT.init_vector(rng))
    n_val = max(1, int(round(n * cfg.val_fraction))) if n > 1 else 0
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        train_idx = perm
    opt_cfg = AdamWConfig(cfg.learn_rate, cfg.weight_decay)
    state = AdamWState.zeros(head.params.size)
    sched = PlateauScheduler(cfg.factor, cfg.patience, cfg.cooldown, cfg.learn_rate)
    best = (math.inf, head.params.copy())
    history = []
    lr = cfg.learn_rate
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads = _detector_loss(head.params, features[b], obj_labels[b], cls_labels[b])
            head.params, state = adamw_step(head.params, grads, state, opt_cfg, lr=lr)
            total += loss * b.size
        train_loss = total / order.size
        if val_idx.size:
            val_loss, _ = _detector_loss(head.params, features[val_idx],
                                         obj_labels[val_idx], cls_labels[val_idx])
        else:
            val_loss = train_loss
        if val_loss < best[0]:
            best = (val_loss, head.params.copy())
        lr = plateau_step(sched, val_loss, mode="min")
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                        "val_loss": val_loss})
    head.params = best[1]
    return head, history


def detect(grid: FeatureGrid, head: DetectorHead, anchor_cfg: AnchorConfig) -> list[Detection]:
    """Anchor scoring -> top-k by objectness -> classify -> per-class NMS."""
    anchors = generate_anchors(grid.height, grid.width, anchor_cfg.stride,
                               list(anchor_cfg.scales), list(anchor_cfg.ratios))
    feats = []
    valid = []
    for a in anchors:
        try:
            feats.append(roi_feature(grid, a, stride=anchor_cfg.stride))
            valid.append(a)
        except InputError:
            continue
    if not feats:
        return []
    feats = np.stack(feats)
    obj = head.objectness(feats)
    top = np.argsort(-obj, kind="stable")[:anchor_cfg.pre_select]
    probs = head.class_probs(feats[top])
    dets = []
    for row, ai in enumerate(top):
        cls = int(np.argmax(probs[row]))
        if cls == 0:
            continue
        dets.append(Detection(valid[int(ai)], cls, float(probs[row, cls])))
    keep = nms(dets, anchor_cfg.nms_threshold)
    return [dets[i] for i in keep]
