"""Dense anchor-based pedestrian detector (RPN-style, boxes regressed directly).

The backbone downsamples by 8; stride-4 features are max-pooled and
concatenated with stride-8 features before two 1x1 heads predict, for each
of the 9 anchors per cell, a pedestrian logit and 4 box deltas.
"""

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import (Concat, Conv2d, MaxPool2d, Network, Node, ReLU,
                       checkpoint_bytes, load_checkpoint, logistic_loss, save_checkpoint,
                       sgd_step, sigmoid, smooth_l1)
from .boxes import BBox, iou_matrix, to_array
from .seeding import rng_for

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
POS_IOU, NEG_IOU = 0.5, 0.2


@dataclass(frozen=True)
class AnchorSpec:
    scales: tuple = (16.0, 32.0, 64.0)
    ratios: tuple = (0.33, 0.5, 0.75)
    stride: int = 8

    def __post_init__(self):
        if len(self.scales) != 3 or len(self.ratios) != 3:
            raise ValueError("exactly 3 scales and 3 aspect ratios are required")

    @property
    def per_cell(self):
        return len(self.scales) * len(self.ratios)

    def to_json(self):
        return {"scales": list(self.scales), "ratios": list(self.ratios), "stride": self.stride}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["scales"]), tuple(obj["ratios"]), int(obj["stride"]))


@lru_cache(maxsize=16)
def _anchor_grid(image_size, spec):
    grid = generate_anchors(image_size, spec)
    grid.setflags(write=False)
    return grid


def generate_anchors(image_size, spec):
    """All anchors for an image of ``(width, height)`` as an (N, 4) xywh array.

    Cells are enumerated row-major; within a cell, scales vary slowest.
    """
    width, height = image_size
    s = spec.stride
    if width % s or height % s:
        raise ValueError(f"image size {image_size} is not divisible by stride {s}")
    gw, gh = width // s, height // s
    shapes = np.array([(r * sc, sc) for sc in spec.scales for r in spec.ratios], dtype=np.float64)
    cy, cx = np.meshgrid((np.arange(gh) + 0.5) * s, (np.arange(gw) + 0.5) * s, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    c = np.repeat(centers, len(shapes), axis=0)
    wh = np.tile(shapes, (len(centers), 1))
    return np.concatenate([c - wh / 2, wh], axis=1)


@dataclass
class AnchorAssignment:
    labels: np.ndarray   # int8 per anchor: 1 positive, 0 negative, -1 ignore
    matched: np.ndarray  # ground-truth index per anchor, -1 where not positive

    @property
    def num_positive(self):
        return int((self.labels == POSITIVE).sum())

    @property
    def num_negative(self):
        return int((self.labels == NEGATIVE).sum())


def assign_anchors(anchors, gt_boxes):
    """Label anchors positive (IoU > 0.5), negative (IoU < 0.2) or ignore.

    The best anchor for every ground truth is forced positive and matched to
    that ground truth (ties go to the lower anchor index). An anchor that is
    best for several ground truths keeps the one it overlaps most.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    gts = to_array(gt_boxes) if not isinstance(gt_boxes, np.ndarray) else gt_boxes.reshape(-1, 4)
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gts) == 0:
        return AnchorAssignment(labels, matched)
    ious = iou_matrix(anchors, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= NEG_IOU] = IGNORE
    pos = best_iou > POS_IOU
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    forced = ious.argmax(axis=0)
    for a in np.unique(forced):
        owners = np.nonzero(forced == a)[0]
        labels[a] = POSITIVE
        matched[a] = int(owners[np.argmax(ious[a, owners])])
    return AnchorAssignment(labels, matched)


def _centers(b):
    return b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2


def encode_boxes(anchors, gts):
    """Anchor-relative deltas (dx, dy, log dw, log dh) for matching rows."""
    a = np.asarray(anchors, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if np.any(a[..., 2:] <= 0) or np.any(g[..., 2:] <= 0):
        raise ValueError("box sizes must be positive")
    ax, ay = _centers(a)
    gx, gy = _centers(g)
    return np.stack([(gx - ax) / a[..., 2], (gy - ay) / a[..., 3],
                     np.log(g[..., 2] / a[..., 2]), np.log(g[..., 3] / a[..., 3])], axis=-1)


def decode_boxes(anchors, deltas):
    a = np.asarray(anchors, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    if np.any(a[..., 2:] <= 0):
        raise ValueError("anchor sizes must be positive")
    ax, ay = _centers(a)
    w = a[..., 2] * np.exp(np.clip(d[..., 2], -10, 10))
    h = a[..., 3] * np.exp(np.clip(d[..., 3], -10, 10))
    cx = ax + d[..., 0] * a[..., 2]
    cy = ay + d[..., 1] * a[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=-1)


def encode_box(anchor, gt):
    return tuple(encode_boxes(to_array([anchor]), to_array([gt]))[0].tolist())


def decode_box(anchor, deltas):
    return BBox(*decode_boxes(to_array([anchor]), np.asarray([deltas], dtype=np.float64))[0].tolist())


# -- network ---------------------------------------------------------------------

CONV_ORDER = ("conv1", "conv2", "conv3", "conv4", "head", "cls", "reg")


def build_network(num_anchors=9):
    nodes = [
        Node("conv1", Conv2d("conv1", 3, 12, 3, stride=2, padding=1)),
        Node("relu1", ReLU("relu1"), ("conv1",)),
        Node("conv2", Conv2d("conv2", 12, 16), ("relu1",)),
        Node("relu2", ReLU("relu2"), ("conv2",)),
        Node("pool2", MaxPool2d("pool2"), ("relu2",)),  # stride 4
        Node("conv3", Conv2d("conv3", 16, 32), ("pool2",)),
        Node("relu3", ReLU("relu3"), ("conv3",)),
        Node("pool3", MaxPool2d("pool3"), ("relu3",)),  # stride 8
        Node("conv4", Conv2d("conv4", 32, 32), ("pool3",)),
        Node("relu4", ReLU("relu4"), ("conv4",)),
        Node("skip", MaxPool2d("skip"), ("pool2",)),    # stride-4 features brought to stride 8
        Node("concat", Concat("concat"), ("skip", "relu4")),
        Node("head", Conv2d("head", 48, 32), ("concat",)),
        Node("relu5", ReLU("relu5"), ("head",)),
        Node("cls", Conv2d("cls", 32, num_anchors, 1, padding=0), ("relu5",)),
        Node("reg", Conv2d("reg", 32, 4 * num_anchors, 1, padding=0), ("relu5",)),
    ]
    return Network(nodes, ["cls", "reg"])


def frozen_names(count):
    """Parameter names of the first ``count`` convolution layers."""
    out = []
    for name in CONV_ORDER[:count]:
        out += [f"{name}.w", f"{name}.b"]
    return out


@dataclass
class DetectorModel:
    params: object
    input_size: tuple = (128, 96)
    anchor_spec: AnchorSpec = field(default_factory=AnchorSpec)
    network: Network = None

    def __post_init__(self):
        if self.network is None:
            self.network = build_network(self.anchor_spec.per_cell)
        w, h = self.input_size
        s = self.anchor_spec.stride
        if w % s or h % s:
            raise ValueError(f"input size {self.input_size} not divisible by stride {s}")
        self.anchors = _anchor_grid(tuple(self.input_size), self.anchor_spec)

    @property
    def grid(self):
        s = self.anchor_spec.stride
        return (self.input_size[1] // s, self.input_size[0] // s)

    def with_params(self, params):
        return DetectorModel(params, self.input_size, self.anchor_spec, self.network)

    def header(self):
        return {"kind": "detector", "input_size": list(self.input_size),
                "anchor_spec": self.anchor_spec.to_json()}

    def save(self, path):
        save_checkpoint(path, self.params, self.header())

    def checkpoint_bytes(self):
        return checkpoint_bytes(self.params, self.header())

    @classmethod
    def load(cls, path):
        params, extra = load_checkpoint(path)
        if extra.get("kind") != "detector":
            raise ValueError(f"{path} is not a detector checkpoint")
        return cls(params, tuple(extra["input_size"]), AnchorSpec.from_json(extra["anchor_spec"]))


CLS_PRIOR = 0.01


def init_detector(seed, input_size=(128, 96), anchor_spec=None):
    spec = anchor_spec or AnchorSpec()
    net = build_network(spec.per_cell)
    params = net.init_params(seed)
    params.tensors["cls.b"] = np.full(spec.per_cell, -math.log((1 - CLS_PRIOR) / CLS_PRIOR))
    return DetectorModel(params, tuple(input_size), spec, net)


def to_tensor(images):
    """Stack uint8 (H, W, 3) images into a float64 NHWC batch in [-1, 1]."""
    arr = np.stack([im.pixels if hasattr(im, "pixels") else im for im in images]).astype(np.float64)
    return arr / 127.5 - 1.0


def split_outputs(outputs, per_cell):
    n = outputs["cls"].shape[0]
    logits = outputs["cls"].reshape(n, -1)
    deltas = outputs["reg"].reshape(n, -1, 4)
    return logits, deltas


# -- loss ------------------------------------------------------------------------


@dataclass
class TrainingTargets:
    labels: np.ndarray     # (N, A) int8
    deltas: np.ndarray     # (N, A, 4) encoded targets, zero outside reg_mask
    reg_mask: np.ndarray   # (N, A) bool, anchors that receive a regression target


def make_targets(anchors, gt_boxes_list, regress_iou=None):
    """Labels and regression targets for a list of images.

    By default only positives are regressed. With ``regress_iou`` set, every
    anchor whose best IoU reaches it is regressed towards that ground truth
    as well (classification labels are unchanged).
    """
    labels, deltas, masks = [], [], []
    for gts in gt_boxes_list:
        asg = assign_anchors(anchors, gts)
        d = np.zeros((len(anchors), 4))
        mask = asg.labels == POSITIVE
        match = asg.matched.copy()
        g = to_array(gts)
        if regress_iou is not None and len(g):
            ious = iou_matrix(anchors, g)
            extra = (~mask) & (ious.max(axis=1) >= regress_iou)
            match[extra] = ious[extra].argmax(axis=1)
            mask = mask | extra
        if mask.any():
            d[mask] = encode_boxes(anchors[mask], g[match[mask]])
        labels.append(asg.labels)
        deltas.append(d)
        masks.append(mask)
    return TrainingTargets(np.stack(labels), np.stack(deltas), np.stack(masks))


def detector_loss(logits, deltas, labels, target_deltas, reg_weight=1.0, positive_weight=1.0,
                  reg_mask=None):
    """Classification + smooth-L1 regression loss.

    Returns (total, classification, regression, dlogits, ddeltas). Logistic
    loss is a weighted mean over non-ignored anchors, positives counting
    ``positive_weight`` times (1 gives the plain count average); regression
    sums smooth-L1 over the 4 coordinates and averages over the regressed
    anchors (the positives unless ``reg_mask`` says otherwise).
    """
    labels = np.asarray(labels)
    valid = labels >= 0
    pos = labels == POSITIVE
    if not valid.any():
        raise ValueError("no positive or negative anchors to train on")
    w = valid.astype(np.float64) + (positive_weight - 1.0) * pos
    cls_loss, dlogits = logistic_loss(logits, pos.astype(np.float64), w)
    reg = pos if reg_mask is None else np.asarray(reg_mask, dtype=bool)
    n_reg = int(reg.sum())
    if n_reg:
        reg_loss, ddeltas = smooth_l1(deltas, target_deltas, reg[..., None].astype(np.float64), n_reg)
    else:
        reg_loss, ddeltas = 0.0, np.zeros_like(np.asarray(deltas, dtype=np.float64))
    return cls_loss + reg_weight * reg_loss, cls_loss, reg_loss, dlogits, reg_weight * ddeltas


def batch_loss_and_grads(model, x, labels, target_deltas, positive_weight=1.0, reg_mask=None):
    net = model.network
    outputs, tape = net.forward(model.params, x, record=True)
    logits, deltas = split_outputs(outputs, model.anchor_spec.per_cell)
    total, _, _, dl, dd = detector_loss(logits, deltas, labels, target_deltas,
                                        positive_weight=positive_weight, reg_mask=reg_mask)
    grad_out = {"cls": dl.reshape(outputs["cls"].shape), "reg": dd.reshape(outputs["reg"].shape)}
    return total, net.backward(model.params, tape, grad_out)


def train_detector(model, images, gt_boxes_list, config, frozen_layers=0, label=(), targets=None,
                   positive_weight=1.0):
    """Momentum SGD over the dataset for ``config.epochs`` epochs.

    Shuffling is seeded by ``config.seed`` and ``label`` so a training stage
    is reproducible on its own. Returns (model, per-epoch mean losses).
    """
    params = model.params.with_frozen(frozen_names(frozen_layers))
    model = model.with_params(params)
    if config.epochs == 0 or len(images) == 0:
        return model.with_params(model.params.with_frozen(())), []
    if targets is None:
        targets = make_targets(model.anchors, gt_boxes_list)
    x_all = images if isinstance(images, np.ndarray) else to_tensor(images)
    velocity = None
    history = []
    n = len(x_all)
    for epoch in range(config.epochs):
        order = rng_for(config.seed, "detector-epoch", *label, epoch).permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            lab = targets.labels[idx]
            if not (lab >= 0).any():
                continue
            loss, grads = batch_loss_and_grads(model, x_all[idx], lab, targets.deltas[idx], positive_weight,
                                               targets.reg_mask[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite detector loss at epoch {epoch}")
            params, velocity = sgd_step(model.params, grads, config, velocity)
            model = model.with_params(params)
            losses.append(loss)
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return model.with_params(model.params.with_frozen(())), history


# -- inference -------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float


def nms(boxes, scores, iou_threshold):
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        if len(rest) == 0:
            break
        ov = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        suppressed[rest[ov > iou_threshold]] = True
    return keep


def raw_predictions(model, images, batch_size=32):
    """Scores (N, A) and decoded, clipped boxes (N, A, 4) for a list of images."""
    x_all = images if isinstance(images, np.ndarray) else to_tensor(images)
    scores, boxes = [], []
    W, H = model.input_size
    for start in range(0, len(x_all), batch_size):
        out = model.network.forward(model.params, x_all[start:start + batch_size])
        logits, deltas = split_outputs(out, model.anchor_spec.per_cell)
        scores.append(sigmoid(np.clip(logits, -30.0, 30.0)))
        b = decode_boxes(model.anchors[None], deltas)
        x1 = np.clip(b[..., 0], 0, W)
        y1 = np.clip(b[..., 1], 0, H)
        x2 = np.clip(b[..., 0] + b[..., 2], 0, W)
        y2 = np.clip(b[..., 1] + b[..., 3], 0, H)
        boxes.append(np.stack([x1, y1, x2 - x1, y2 - y1], axis=-1))
    if not scores:
        return np.zeros((0, len(model.anchors))), np.zeros((0, len(model.anchors), 4))
    return np.concatenate(scores), np.concatenate(boxes)


def select_detections(scores, boxes, score_threshold=0.0, nms_iou=0.5, pre_nms_top_n=300,
                      max_detections=100):
    valid = (scores >= score_threshold) & (boxes[:, 2] > 1e-6) & (boxes[:, 3] > 1e-6)
    idx = np.nonzero(valid)[0]
    if len(idx) == 0:
        return []
    idx = idx[np.argsort(-scores[idx], kind="stable")][:pre_nms_top_n]
    keep = nms(boxes[idx], scores[idx], nms_iou)[:max_detections]
    return [Detection(BBox(*boxes[idx[k]].tolist()), float(scores[idx[k]])) for k in keep]


def detect(model, image, score_threshold=0.0, nms_iou=0.5, pre_nms_top_n=300, max_detections=100):
    scores, boxes = raw_predictions(model, [image])
    return select_detections(scores[0], boxes[0], score_threshold, nms_iou, pre_nms_top_n, max_detections)


def detect_many(model, images, score_threshold=0.0, nms_iou=0.5, pre_nms_top_n=300, max_detections=100):
    scores, boxes = raw_predictions(model, images)
    return [select_detections(s, b, score_threshold, nms_iou, pre_nms_top_n, max_detections)
            for s, b in zip(scores, boxes)]



def write_detections(path, detections, image_ids=None):
    """JSON lines, one image per line: {imageId, boxes: [{x, y, w, h, score}]}."""
    ids = image_ids if image_ids is not None else range(len(detections))
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, dets in zip(ids, detections):
            boxes = [{"x": d.box.x, "y": d.box.y, "w": d.box.w, "h": d.box.h, "score": d.score} for d in dets]
            fh.write(json.dumps({"imageId": image_id, "boxes": boxes}, sort_keys=True) + "\n")


def read_detections(path):
    """Returns (image ids, per-image Detection lists)."""
    ids, out = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            ids.append(obj["imageId"])
            out.append([Detection(BBox(b["x"], b["y"], b["w"], b["h"]), float(b["score"])) for b in obj["boxes"]])
    return ids, out
