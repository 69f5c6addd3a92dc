"""Adversarial patch training with expectation over transformation.

The patch is pasted into detector inputs through a projective quad (random
scale, rotation, translation and corner jitter) and optimised so that grid
cells under the quad report a stop sign, while an L2 disguise term keeps it
close to a benign-looking rosette.
"""
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .detector import (CELL, CLASS_NAMES, GRID, IMAGE, STOP_SIGN, add_params, build_forward,
                       SGD, Adam, decode, forward, iou)
from .diffgrid import Graph, evaluate, grad

log = logging.getLogger(__name__)

PATCH_SIZE = 64


def rosette(size=PATCH_SIZE):
    """Red flower with notched petals and a yellow heart on an off-white ground."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    dx, dy = (xx - c) / c, (yy - c) / c
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    petals = 6
    edge = 0.78 + 0.12 * np.cos(petals * theta)
    img = np.empty((size, size, 3))
    img[:] = (0.93, 0.92, 0.88)
    flower = r <= edge
    img[flower] = (0.82, 0.08, 0.12)
    # notches between petals: thin darker creases
    crease = flower & (np.abs(np.cos(petals * theta / 2)) < 0.12) & (r > 0.25)
    img[crease] = (0.55, 0.03, 0.07)
    inner = flower & (r < 0.55) & (np.cos(petals * theta + np.pi) > 0.6)
    img[inner] = (0.7, 0.05, 0.1)
    img[r < 0.2] = (0.95, 0.8, 0.2)
    return img


@dataclass
class PatchTexture:
    pixels: np.ndarray
    disguise: np.ndarray
    k_disguise: float = 0.05

    def __post_init__(self):
        self.pixels = np.clip(np.array(self.pixels, dtype=np.float64), 0.0, 1.0)
        d = np.array(self.disguise, dtype=np.float64)
        if d.shape != self.pixels.shape:
            raise ValueError("disguise and pixels must have the same shape")
        d.setflags(write=False)
        self.disguise = d
        if self.k_disguise < 0:
            raise ValueError("k_disguise must be non-negative")

    @classmethod
    def initial(cls, k_disguise=0.05, init="disguise", size=PATCH_SIZE):
        base = rosette(size)
        pixels = base.copy() if init == "disguise" else np.full_like(base, 0.5)
        return cls(pixels, base, k_disguise)


@dataclass(frozen=True)
class TransformRanges:
    """Sampling ranges; ``translation`` of ``None`` means anywhere that keeps the quad inside."""
    scale: tuple = (0.15, 0.40)
    rotation: tuple = (-np.pi / 9, np.pi / 9)
    jitter: float = 0.05
    translation: tuple = None      # ((x_lo, x_hi), (y_lo, y_hi)) offsets of the quad centre, pixels

    def __post_init__(self):
        if not (0 < self.scale[0] <= self.scale[1]):
            raise ValueError("scale range must be positive and ordered")
        if self.rotation[0] > self.rotation[1] or self.jitter < 0:
            raise ValueError("invalid rotation or jitter range")


@dataclass(frozen=True)
class TransformSample:
    scale: float
    rotation: float
    translation: tuple
    corner_jitter: tuple     # four (dx, dy) in fractions of the patch side, TL TR BR BL

    def quad(self, width=IMAGE, height=IMAGE):
        side = self.scale * width
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        base = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]) * side
        rot = base @ np.array([[c, s], [-s, c]])
        centre = np.array([width / 2 + self.translation[0], height / 2 + self.translation[1]])
        return rot + centre + np.asarray(self.corner_jitter) * side


class TransformRejected(ValueError):
    pass


def _inside(quad, width, height):
    return bool(np.all(quad >= 0) and np.all(quad[:, 0] <= width) and np.all(quad[:, 1] <= height))


def sample_transform(rng, ranges=TransformRanges(), width=IMAGE, height=IMAGE, attempts=100):
    """Uniform draw within ``ranges``, resampled until the quad lies inside the image."""
    for _ in range(attempts):
        scale = rng.uniform(*ranges.scale)
        rot = rng.uniform(*ranges.rotation)
        jit = rng.uniform(-ranges.jitter, ranges.jitter, size=(4, 2))
        if ranges.translation is None:
            half = scale * width / 2 * (abs(np.cos(rot)) + abs(np.sin(rot)))
            lim_x, lim_y = max(width / 2 - half, 0.0), max(height / 2 - half, 0.0)
            tx, ty = rng.uniform(-lim_x, lim_x), rng.uniform(-lim_y, lim_y)
        else:
            (x0, x1), (y0, y1) = ranges.translation
            tx, ty = rng.uniform(x0, x1), rng.uniform(y0, y1)
        t = TransformSample(float(scale), float(rot), (float(tx), float(ty)),
                            tuple(map(tuple, jit.tolist())))
        if _inside(t.quad(width, height), width, height):
            return t
    raise TransformRejected(f"no transform inside the image after {attempts} attempts; ranges too large")


# ---------------------------------------------------------------- projective placement

def homography(src, dst):
    """3x3 H with dst ~ H @ [src, 1] for four point pairs."""
    a = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    _, _, vt = np.linalg.svd(np.asarray(a, dtype=np.float64))
    h = vt[-1].reshape(3, 3)
    return h / h[2, 2]


def _apply_h(h, pts):
    pts = np.asarray(pts, dtype=np.float64)
    p = pts @ h[:, :2].T + h[:, 2]
    return p[:, :2] / p[:, 2:3]


def patch_corners(patch_shape):
    h, w = patch_shape[:2]
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def image_to_patch(quad, patch_shape, points):
    """Patch texel coords (x, y) of image points under the inverse map of ``quad``."""
    h = homography(quad, patch_corners(patch_shape))
    return _apply_h(h, points)


@dataclass
class Placement:
    """Pixels covered by a quad and the texel coords each one samples."""
    pixel_index: np.ndarray      # flat over H*W
    coords: np.ndarray           # (P, 2)
    quad: np.ndarray


def placement(t, patch_shape=(PATCH_SIZE, PATCH_SIZE, 3), width=IMAGE, height=IMAGE):
    quad = t.quad(width, height) if isinstance(t, TransformSample) else np.asarray(t, dtype=np.float64)
    x0, y0 = np.floor(quad.min(axis=0)).astype(int)
    x1, y1 = np.ceil(quad.max(axis=0)).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, width), min(y1, height)
    jj, ii = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    centres = np.column_stack([jj.ravel() + 0.5, ii.ravel() + 0.5])
    coords = image_to_patch(quad, patch_shape, centres)
    ph, pw = patch_shape[:2]
    tol = 1e-9
    ok = ((coords[:, 0] >= -tol) & (coords[:, 0] <= pw - 1 + tol)
          & (coords[:, 1] >= -tol) & (coords[:, 1] <= ph - 1 + tol))
    idx = (ii.ravel() * width + jj.ravel())[ok]
    return Placement(idx, coords[ok], quad)


def apply_patch(image, patch, t):
    """(patched image, quad) with pixels inside the quad resampled from the patch."""
    pixels = patch.pixels if isinstance(patch, PatchTexture) else np.asarray(patch, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    pl = placement(t, pixels.shape, image.shape[1], image.shape[0])
    out = image.copy()
    flat = out.reshape(-1, out.shape[-1])
    if len(pl.pixel_index):
        flat[pl.pixel_index] = _kernels.bilinear(pixels, pl.coords)
    return out, pl.quad


def quad_box(quad):
    """Axis-aligned (cx, cy, w, h) bounding box of a quad."""
    lo, hi = np.min(quad, axis=0), np.max(quad, axis=0)
    return ((lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, hi[0] - lo[0], hi[1] - lo[1])


def covered_cells(quad):
    """Flat ids of grid cells whose centres lie inside the quad."""
    centres = (np.arange(GRID) + 0.5) * CELL
    cx, cy = np.meshgrid(centres, centres)
    pts = np.column_stack([cx.ravel(), cy.ravel()])
    q = np.asarray(quad, dtype=np.float64)
    nxt = np.roll(q, -1, axis=0)
    orient = np.sign(np.sum(q[:, 0] * nxt[:, 1] - nxt[:, 0] * q[:, 1]))
    inside = np.ones(len(pts), dtype=bool)
    for a, b in zip(q, nxt):
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross * orient >= 0
    return np.flatnonzero(inside)


# ---------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    conf: float = 1.0
    box: float = 1.0


class PatchTooSmall(ValueError):
    pass


def build_adversarial_loss(g, raw, quads, target=STOP_SIGN, weights=LossWeights()):
    """Graph node for the targeted loss over a batch of raw outputs (B, 12, 12, 7).

    Per image: mean over covered cells of conf BCE + class CE + box squared
    error (box in image-width units); images are averaged.
    """
    b = g.shape(raw)[0]
    if len(quads) != b:
        raise ValueError("one quad per image required")
    index, per_cell, box_target = [], [], []
    for i, q in enumerate(quads):
        cells = covered_cells(q)
        if not len(cells):
            raise PatchTooSmall(f"quad {i} covers no grid-cell centre")
        index.append(cells + i * GRID * GRID)
        per_cell.append(np.full(len(cells), 1.0 / (len(cells) * b)))
        bx = np.asarray(quad_box(q)) / IMAGE
        box_target.append(np.tile(bx, (len(cells), 1)))
    index = np.concatenate(index)
    wcell = np.concatenate(per_cell)
    box_target = np.concatenate(box_target)
    m = len(index)
    cells = g.rows(g.reshape(raw, (b * GRID * GRID, 7)), index)
    wnode = g.const(wcell)

    conf = g.binary_cross_entropy(g.sigmoid(g.reshape(g.columns(cells, 0, 1), (m,))), np.ones(m))
    ce = g.softmax_cross_entropy(g.columns(cells, 1, 3), np.full(m, target))
    local = index % (GRID * GRID)
    rows, cols = np.divmod(local, GRID)
    grid_pos = g.const(np.column_stack([cols, rows]).astype(np.float64))
    centre = g.scale(g.add(g.sigmoid(g.columns(cells, 3, 5)), grid_pos), CELL / IMAGE)
    size = g.minimum(g.scale(g.exp(g.minimum(g.columns(cells, 5, 7), 10.0)), CELL / IMAGE), 1.0)
    err_c = g.squared_error(centre, g.const(box_target[:, :2]))
    err_s = g.squared_error(size, g.const(box_target[:, 2:]))
    box = g.reshape(g.add(g.add(g.columns(err_c, 0, 1), g.columns(err_c, 1, 2)),
                          g.add(g.columns(err_s, 0, 1), g.columns(err_s, 1, 2))), (m,))
    per = g.add(g.add(g.scale(conf, weights.conf), g.scale(ce, weights.cls)), g.scale(box, weights.box))
    return g.sum(g.mul(per, wnode))


def adversarial_loss(raw, quad, target=STOP_SIGN, weights=LossWeights()):
    """Targeted loss of one raw prediction (12, 12, 7) against a patch quad."""
    raw = np.asarray(raw, dtype=np.float64)
    g = Graph()
    r = g.input("raw", (1,) + raw.shape[-3:])
    out = build_adversarial_loss(g, r, [quad], target, weights)
    return float(evaluate(g, {"raw": raw.reshape((1,) + raw.shape[-3:])}, [out])[out][0])


def disguise_loss(patch):
    """L2 distance between the patch pixels and its disguise image."""
    return float(np.sqrt(np.sum((patch.pixels - patch.disguise) ** 2)))


def total_loss(raw, quad, patch, target=STOP_SIGN, weights=LossWeights()):
    return adversarial_loss(raw, quad, target, weights) + patch.k_disguise * disguise_loss(patch)


def build_patched_batch(g, patch_node, images, placements):
    """Graph node of a batch of images with the patch pasted at each placement."""
    b, h, w, c = images.shape
    base = g.const(images)
    idx = np.concatenate([pl.pixel_index + i * h * w for i, pl in enumerate(placements)])
    coords = np.concatenate([pl.coords for pl in placements])
    values = g.bilinear_sample(patch_node, coords)
    return g.place(base, values, idx)


def patch_loss_and_grad(params, patch, images, transforms, target=STOP_SIGN, weights=LossWeights()):
    """(total loss, adversarial part, d total / d pixels) for a batch of (image, transform) pairs.

    The disguise term enters the value here; its (non-smooth) gradient is
    left to the caller's update rule.
    """
    images = np.asarray(images, dtype=np.float64)
    placements = [placement(t, patch.pixels.shape, images.shape[2], images.shape[1]) for t in transforms]
    g = Graph()
    p = g.input("patch", patch.pixels.shape, trainable=True)
    batch = build_patched_batch(g, p, images, placements)
    raw = build_forward(g, batch, add_params(g))
    adv = build_adversarial_loss(g, raw, [pl.quad for pl in placements], target, weights)
    value, grads = grad(g, adv, ["patch"], {"patch": patch.pixels, **params.weights})
    return value + patch.k_disguise * disguise_loss(patch), value, grads["patch"]


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class EotConfig:
    steps: int = 400
    lr: float = 0.01
    batch: int = 8
    optimizer: str = "adam"             # or "sgd"
    ranges: TransformRanges = TransformRanges()
    target: int = STOP_SIGN
    weights: LossWeights = LossWeights()
    k_disguise: float = 0.05
    seed: int = 0
    init: str = "disguise"
    disguise_step: str = "gradient"     # or "proximal"

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("steps must be >= 0, batch >= 1 and lr > 0")
        if self.init not in ("disguise", "gray"):
            raise ValueError("init must be 'disguise' or 'gray'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.disguise_step not in ("proximal", "gradient"):
            raise ValueError("disguise_step must be 'proximal' or 'gradient'")


class PatchDiverged(RuntimeError):
    def __init__(self, patch, curve):
        super().__init__("patch loss became non-finite")
        self.patch = patch
        self.curve = curve


def _disguise_update(pixels, disguise, step):
    """Proximal map of ``step * ||p - disguise||``: shrink the deviation towards zero."""
    dev = pixels - disguise
    norm = np.sqrt(np.sum(dev * dev))
    if norm <= step:
        return disguise.copy()
    return disguise + dev * (1.0 - step / norm)


def train_patch(params, images, cfg=EotConfig(), transforms=None, on_step=None):
    """Optimise a patch over random (image, transform) draws; returns (PatchTexture, loss curve).

    Each step descends the batch-mean adversarial loss on the pixels, then
    handles the disguise term either by its gradient or by its proximal map
    (``cfg.disguise_step``), and clamps to [0, 1]. ``transforms`` pins a
    fixed transform per image instead of sampling.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("no training images")
    patch = PatchTexture.initial(cfg.k_disguise, cfg.init)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(images), size=cfg.batch)
        if transforms is None:
            ts = [sample_transform(rng, cfg.ranges) for _ in idx]
        else:
            ts = [transforms[i] for i in idx]
        try:
            total, adv, gp = patch_loss_and_grad(params, patch, images[idx], ts, cfg.target, cfg.weights)
        except (ValueError, FloatingPointError) as exc:
            if isinstance(exc, PatchTooSmall):
                raise
            raise PatchDiverged(patch, curve) from exc
        if not np.isfinite(total) or not np.all(np.isfinite(gp)):
            raise PatchDiverged(patch, curve)
        curve.append(float(total))
        dev = patch.pixels - patch.disguise
        if cfg.disguise_step == "gradient":
            norm = np.sqrt(np.sum(dev * dev))
            if norm > 0:
                gp = gp + cfg.k_disguise * dev / norm
        state = {"pixels": patch.pixels.copy()}
        opt.step(state, {"pixels": gp})
        pixels = state["pixels"]
        if cfg.disguise_step == "proximal":
            pixels = _disguise_update(pixels, patch.disguise, cfg.lr * cfg.k_disguise)
        patch = replace(patch, pixels=np.clip(pixels, 0.0, 1.0))
        if on_step is not None:
            on_step(step, curve[-1])
        if step % 50 == 0:
            log.info("patch step %d loss %.4f (adversarial %.4f)", step, total, adv)
    return patch, curve


def split_patch(patch):
    """(left, right) column halves of a patch grid."""
    pixels = patch.pixels if isinstance(patch, PatchTexture) else np.asarray(patch)
    w = pixels.shape[1]
    if w % 2:
        raise ValueError("patch width must be even to split")
    return pixels[:, : w // 2].copy(), pixels[:, w // 2:].copy()


# ---------------------------------------------------------------- model-level evaluation

@dataclass
class TrialOutcome:
    image_id: int
    trial: int
    success: bool
    best_iou: float
    best_score: float
    quad: np.ndarray = field(repr=False, default=None)
    detections: list = field(repr=False, default_factory=list)


def eval_model_level(params, patch, images, trials_per_image=1, overlap_iou=0.3, seed=0,
                     ranges=TransformRanges(), target=STOP_SIGN, score_threshold=0.5, batch=64):
    """(ASR, per-trial outcomes). Only target detections overlapping the patch count."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("empty test set")
    pixels = patch.pixels if isinstance(patch, PatchTexture) else np.asarray(patch, dtype=np.float64)
    jobs = [(i, j) for i in range(len(images)) for j in range(trials_per_image)]
    outcomes = []
    for start in range(0, len(jobs), batch):
        chunk = jobs[start:start + batch]
        patched, quads = [], []
        for i, j in chunk:
            t = sample_transform(np.random.default_rng([seed, i, j]), ranges)
            im, q = apply_patch(images[i], pixels, t)
            patched.append(im)
            quads.append(q)
        raws = forward(params, np.stack(patched))
        for (i, j), raw, q in zip(chunk, raws, quads):
            dets = decode(raw, score_threshold)
            qb = quad_box(q)
            best_iou, best_score = 0.0, 0.0
            for d in dets:
                if d.cls != target:
                    continue
                v = iou(d.box, qb)
                if v > best_iou or (v == best_iou and d.score > best_score):
                    best_iou, best_score = v, d.score
            outcomes.append(TrialOutcome(i, j, best_iou >= overlap_iou, best_iou, best_score, q, dets))
    asr = sum(o.success for o in outcomes) / len(outcomes)
    return asr, outcomes


def write_outcomes_csv(path, outcomes):
    with open(path, "w") as fh:
        fh.write("image_id,trial,success,best_iou,best_score\n")
        for o in outcomes:
            fh.write(f"{o.image_id},{o.trial},{int(o.success)},{o.best_iou:.6f},{o.best_score:.6f}\n")


def save_patch(path, patch, seed, config_hash):
    """PPM image plus a JSON sidecar at ``path`` + ``.json``."""
    from .scene import save_ppm
    save_ppm(path, patch.pixels)
    meta = {"k_disguise": patch.k_disguise, "seed": int(seed), "config_hash": config_hash,
            "shape": list(patch.pixels.shape), "target": CLASS_NAMES[STOP_SIGN]}
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_patch(path):
    """(PatchTexture, sidecar dict)."""
    from .scene import load_ppm
    pixels = load_ppm(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    return PatchTexture(pixels, rosette(pixels.shape[0]), meta["k_disguise"]), meta
