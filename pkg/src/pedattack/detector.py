"""Tiny single-anchor grid detector: 96x96x3 image -> 12x12 cells x 7 channels.

Channel layout per cell: objectness logit, two class logits (pedestrian,
stop-sign), then box parameters (tx, ty, tw, th). A box decodes to a centre
``(col + sigmoid(tx), row + sigmoid(ty)) * CELL`` and a size
``CELL * exp(tw|th)`` capped at the image size.
"""
import hashlib
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .diffgrid import Graph, evaluate, grad

log = logging.getLogger(__name__)

IMAGE = 96
GRID = 12
CELL = IMAGE // GRID
CHANNELS = 7
PEDESTRIAN, STOP_SIGN = 0, 1
CLASS_NAMES = ("pedestrian", "stop_sign")
POSITIVE_WEIGHT = 5.0

# (name, shape) in declaration order; this order is also the file order
ARCHITECTURE = (
    ("conv1.w", (16, 3, 3, 3)), ("conv1.b", (16,)),
    ("conv2.w", (32, 16, 3, 3)), ("conv2.b", (32,)),
    ("conv3.w", (64, 32, 3, 3)), ("conv3.b", (64,)),
    ("head.w", (CHANNELS, 64, 1, 1)), ("head.b", (CHANNELS,)),
)
ARCH_HASH = hashlib.sha256(repr(ARCHITECTURE).encode()).digest()[:8]
MAGIC = b"PSTM"
FORMAT_VERSION = 1


@dataclass
class DetectorParams:
    weights: dict

    def copy(self):
        return DetectorParams({k: v.copy() for k, v in self.weights.items()})

    def flat(self):
        return np.concatenate([self.weights[name].ravel() for name, _ in ARCHITECTURE])


@dataclass(frozen=True)
class Detection:
    cls: int
    score: float
    box: tuple  # pixel-space (cx, cy, w, h)
    cell: int = -1

    @property
    def name(self):
        return CLASS_NAMES[self.cls]


def init_detector(seed):
    """He-scaled normal weights, zero biases; the objectness bias starts negative."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in ARCHITECTURE:
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            weights[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            weights[name] = np.zeros(shape)
    weights["head.w"] *= 0.1
    weights["head.b"][0] = -4.0
    return DetectorParams(weights)


# ---------------------------------------------------------------- graph

def add_params(g, trainable=False):
    return {name: g.input(name, shape, trainable=trainable) for name, shape in ARCHITECTURE}


def build_forward(g, image, pnodes):
    """Append the network to ``g``; ``image`` is (N, 96, 96, 3). Returns (N, 12, 12, 7)."""
    n = g.shape(image)[0]
    if g.shape(image)[1:] != (IMAGE, IMAGE, 3):
        raise ValueError(f"detector expects (N, {IMAGE}, {IMAGE}, 3), got {g.shape(image)}")
    h = image
    for layer in ("conv1", "conv2", "conv3"):
        h = g.conv2d(h, pnodes[f"{layer}.w"], pnodes[f"{layer}.b"], pad=1, channels_last=True)
        h = g.maxpool2(g.relu(h), channels_last=True)
    raw = g.conv2d(h, pnodes["head.w"], pnodes["head.b"], channels_last=True)
    assert g.shape(raw) == (n, GRID, GRID, CHANNELS)
    return raw


_forward_cache = {}


def _forward_graph(n):
    if n not in _forward_cache:
        g = Graph()
        img = g.input("image", (n, IMAGE, IMAGE, 3))
        raw = build_forward(g, img, add_params(g))
        _forward_cache[n] = (g, raw)
    return _forward_cache[n]


def forward(params, image):
    """Raw predictions for one (96,96,3) image or a batch (N,96,96,3)."""
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    batch = image[None] if single else image
    if batch.ndim != 4 or batch.shape[1:] != (IMAGE, IMAGE, 3):
        raise ValueError(f"detector expects ({IMAGE}, {IMAGE}, 3) images, got {image.shape}")
    g, raw = _forward_graph(len(batch))
    out = evaluate(g, {"image": batch, **params.weights}, [raw])[raw]
    return out[0] if single else out


# ---------------------------------------------------------------- decoding

def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_all(raw):
    """Per-cell (class, score, cx, cy, w, h) for every cell, row-major order."""
    raw = np.asarray(raw, dtype=np.float64).reshape(GRID * GRID, CHANNELS)
    obj = _sig(raw[:, 0])
    logits = raw[:, 1:3]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    soft = e / e.sum(axis=1, keepdims=True)
    cls = soft.argmax(axis=1)
    score = obj * soft[np.arange(len(raw)), cls]
    rows, cols = np.divmod(np.arange(GRID * GRID), GRID)
    cx = (cols + _sig(raw[:, 3])) * CELL
    cy = (rows + _sig(raw[:, 4])) * CELL
    w = np.minimum(CELL * np.exp(np.minimum(raw[:, 5], 10.0)), IMAGE)
    h = np.minimum(CELL * np.exp(np.minimum(raw[:, 6], 10.0)), IMAGE)
    return cls, score, np.column_stack([cx, cy, w, h])


def iou(a, b):
    """IoU of two (cx, cy, w, h) boxes."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def decode(raw, score_threshold=0.5, nms_iou=0.5):
    """Thresholded, per-class greedy-NMS detections sorted by (score desc, cell asc)."""
    cls, score, boxes = decode_all(raw)
    keep = np.flatnonzero(score >= score_threshold)
    order = sorted(keep, key=lambda i: (-score[i], i))
    out = []
    for i in order:
        if any(d.cls == cls[i] and iou(d.box, boxes[i]) >= nms_iou for d in out):
            continue
        out.append(Detection(int(cls[i]), float(score[i]), tuple(float(v) for v in boxes[i]), int(i)))
    return out


def detect(params, image, score_threshold=0.5, nms_iou=0.5):
    return decode(forward(params, image), score_threshold, nms_iou)


def match_report(params, images, labels_batch, iou_threshold=0.3, score_threshold=0.5, batch=64):
    """Per-class recall and precision on labelled images (greedy score-ordered matching)."""
    tp = np.zeros(2, dtype=int)
    n_true = np.zeros(2, dtype=int)
    n_pred = np.zeros(2, dtype=int)
    for start in range(0, len(images), batch):
        raws = forward(params, np.asarray(images[start:start + batch], dtype=np.float64))
        for raw, labels in zip(raws, labels_batch[start:start + batch]):
            dets = decode(raw, score_threshold)
            truth = [(int(l[0]), tuple(v * IMAGE for v in l[1:5])) for l in labels]
            used = [False] * len(truth)
            for cls, _ in truth:
                n_true[cls] += 1
            for d in dets:
                n_pred[d.cls] += 1
                best, best_j = iou_threshold, -1
                for j, (cls, box) in enumerate(truth):
                    if cls == d.cls and not used[j]:
                        v = iou(d.box, box)
                        if v >= best:
                            best, best_j = v, j
                if best_j >= 0:
                    used[best_j] = True
                    tp[d.cls] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = tp / n_true
        precision = tp / n_pred
    return {"recall": {CLASS_NAMES[c]: float(recall[c]) for c in range(2)},
            "precision": {CLASS_NAMES[c]: float(precision[c]) for c in range(2)},
            "overall_precision": float(tp.sum() / max(n_pred.sum(), 1)),
            "support": {CLASS_NAMES[c]: int(n_true[c]) for c in range(2)}}


# ---------------------------------------------------------------- loss

@dataclass(frozen=True)
class Targets:
    """Dense training targets for a batch, built from normalised labels."""
    objectness: np.ndarray   # (N*144,)
    weights: np.ndarray      # (N*144,)
    pos_index: np.ndarray    # flat cell ids of positive cells
    pos_class: np.ndarray
    pos_offset: np.ndarray   # (P, 2) in-cell centre offsets
    pos_logsize: np.ndarray  # (P, 2) log(size / CELL)
    collisions: int


def build_targets(labels_batch):
    """``labels_batch``: per image, a list of (cls, cx, cy, w, h[, depth]) normalised to [0, 1].

    Two objects whose centres share a cell: the nearer one (smaller depth,
    else the larger box) owns the cell and the collision is counted.
    """
    n = len(labels_batch)
    obj = np.zeros(n * GRID * GRID)
    owner = {}
    collisions = 0
    for b, labels in enumerate(labels_batch):
        for lab in labels:
            cls, cx, cy, w, h = lab[:5]
            depth = lab[5] if len(lab) > 5 else -w * h
            col = min(int(cx * GRID), GRID - 1)
            row = min(int(cy * GRID), GRID - 1)
            cell = b * GRID * GRID + row * GRID + col
            cand = (depth, int(cls), cx * GRID - col, cy * GRID - row, w, h)
            if cell in owner:
                collisions += 1
                if cand[0] >= owner[cell][0]:
                    continue
            owner[cell] = cand
    idx = np.array(sorted(owner), dtype=np.int64)
    obj[idx] = 1.0
    weights = np.ones_like(obj)
    weights[idx] = POSITIVE_WEIGHT
    vals = [owner[i] for i in idx]
    pos_class = np.array([v[1] for v in vals], dtype=np.int64)
    pos_offset = np.array([[v[2], v[3]] for v in vals]).reshape(-1, 2)
    sizes = np.array([[v[4], v[5]] for v in vals]).reshape(-1, 2) * IMAGE
    pos_logsize = np.log(np.maximum(sizes, 1e-3) / CELL)
    return Targets(obj, weights, idx, pos_class, pos_offset, pos_logsize, collisions)


def build_loss(g, raw, targets):
    """Summed-over-cells detection loss, averaged over the batch. Returns a scalar node."""
    n = g.shape(raw)[0]
    flat = g.reshape(raw, (n * GRID * GRID, CHANNELS))
    prob = g.sigmoid(g.reshape(g.columns(flat, 0, 1), (n * GRID * GRID,)))
    bce = g.binary_cross_entropy(prob, targets.objectness)
    total = g.sum(g.mul(bce, g.const(targets.weights)))
    if len(targets.pos_index):
        pos = g.rows(flat, targets.pos_index)
        ce = g.sum(g.softmax_cross_entropy(g.columns(pos, 1, 3), targets.pos_class))
        off = g.sigmoid(g.columns(pos, 3, 5))
        box = g.add(g.sum(g.squared_error(off, g.const(targets.pos_offset))),
                    g.sum(g.squared_error(g.columns(pos, 5, 7), g.const(targets.pos_logsize))))
        total = g.add(total, g.scale(g.add(ce, box), POSITIVE_WEIGHT))
    return g.scale(total, 1.0 / n)


def detection_loss(raw, labels_batch):
    """Loss value for raw predictions (N,12,12,7) or (12,12,7) and matching labels."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3:
        raw, labels_batch = raw[None], [labels_batch]
    g = Graph()
    r = g.input("raw", raw.shape)
    out = build_loss(g, r, build_targets(labels_batch))
    return float(evaluate(g, {"raw": raw}, [out])[out][0])


def loss_and_grad(params, images, labels_batch, wrt_image=False, dtype=np.float64):
    """(loss, {param name: grad}) for a batch; with ``wrt_image`` also the image gradient.

    ``dtype`` sets the working precision of the graph; gradients come back in it.
    """
    images = np.asarray(images, dtype=np.float64)
    g = Graph(dtype=dtype)
    img = g.input("image", images.shape, trainable=wrt_image)
    pnodes = add_params(g, trainable=True)
    raw = build_forward(g, img, pnodes)
    out = build_loss(g, raw, build_targets(labels_batch))
    wrt = [name for name, _ in ARCHITECTURE] + (["image"] if wrt_image else [])
    return grad(g, out, wrt, {"image": images, **params.weights})


# ---------------------------------------------------------------- training

class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, weights, grads):
        self.t += 1
        for k, gk in grads.items():
            m = self.m.setdefault(k, np.zeros_like(gk))
            v = self.v.setdefault(k, np.zeros_like(gk))
            m *= self.b1
            m += (1 - self.b1) * gk
            v *= self.b2
            v += (1 - self.b2) * gk * gk
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            weights[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, weights, grads):
        for k, gk in grads.items():
            weights[k] -= self.lr * gk


class TrainingDiverged(RuntimeError):
    def __init__(self, params, curve):
        super().__init__("detector loss became non-finite")
        self.params = params
        self.curve = curve


def train(params, images, labels, epochs, lr=1e-3, batch=32, seed=0, optimizer="adam",
          precision="float32", on_epoch=None, schedule="constant"):
    """Mini-batch training; returns (params, per-epoch mean loss).

    ``images`` is an (N, 96, 96, 3) array (any float dtype), ``labels`` a
    list of per-image label lists. Forward and backward passes run in
    ``precision``; weights and optimiser state stay float64. Deterministic
    for a fixed seed. ``schedule="cosine"`` anneals the learning rate from
    ``lr`` to zero over all steps. If the loss turns non-finite,
    :class:`TrainingDiverged` carries the last good parameters.
    """
    dtype = {"float32": np.float32, "float64": np.float64}[precision]
    if schedule not in ("constant", "cosine"):
        raise ValueError("schedule must be 'constant' or 'cosine'")
    if len(images) == 0:
        raise ValueError("empty dataset")
    params = params.copy()
    rng = np.random.default_rng(seed)
    opt = Adam(lr) if optimizer == "adam" else SGD(lr)
    curve = []
    names = [name for name, _ in ARCHITECTURE]
    steps_per_epoch = -(-len(images) // batch)
    total_steps = max(epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), batch):
            idx = np.sort(order[start:start + batch])
            good = params.copy()
            try:
                value, grads = loss_and_grad(params, images[idx], [labels[i] for i in idx],
                                             dtype=dtype)
            except ValueError as exc:
                raise TrainingDiverged(good, curve) from exc
            if not np.isfinite(value) or not all(np.all(np.isfinite(grads[k])) for k in names):
                raise TrainingDiverged(good, curve)
            if schedule == "cosine":
                opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            step += 1
            opt.step(params.weights, {k: grads[k].astype(np.float64) for k in names})
            losses.append(value * len(idx))
        curve.append(float(np.sum(losses) / len(images)))
        log.info("detector epoch %d/%d loss %.4f", epoch + 1, epochs, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return params, curve


# ---------------------------------------------------------------- persistence

def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(ARCH_HASH)
        fh.write(params.flat().astype("<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a detector file")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if blob[8:16] != ARCH_HASH:
        raise ValueError(f"{path}: architecture hash mismatch")
    flat = np.frombuffer(blob[16:], dtype="<f8").astype(np.float64)
    weights, pos = {}, 0
    for name, shape in ARCHITECTURE:
        size = int(np.prod(shape))
        if pos + size > len(flat):
            raise ValueError(f"{path}: truncated")
        weights[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    if pos != len(flat):
        raise ValueError(f"{path}: trailing data")
    return DetectorParams(weights)
