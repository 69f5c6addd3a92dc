"""Procedural street scenes rendered with a pinhole camera and flat billboards.

World frame: x to the right of the ego lane, y along the road (the ego drives
towards +y), z up, metres. Billboards are upright rectangles with a facing
normal in the ground plane; their appearance is a procedural motif plus an
optional rectangular *insert* textured either by a fixed image or by a
region of the trainable patch. Inserts backed by the patch are sampled
bilinearly, so every rendered image is affine in the patch texels and the
per-pixel sampling coordinates form an exact Jacobian (``TexelMap``).
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .detector import PEDESTRIAN, STOP_SIGN

NEAR = 0.1
LABEL_MIN_PIXELS = 16

PED_WIDTH, PED_HEIGHT = 0.5, 1.8
TORSO = 0.45
# torso square in billboard-local coords (s right, t down)
TORSO_S = ((1 - TORSO / PED_WIDTH) / 2, (1 + TORSO / PED_WIDTH) / 2)
TORSO_T = (0.16, 0.16 + TORSO / PED_HEIGHT)
SIGN_SIZE = 0.6
SIGN_CENTER_Z = 2.0
CAMERA_HEIGHT = 1.5

BENIGN_SHIRTS = (
    (0.15, 0.25, 0.6), (0.1, 0.45, 0.2), (0.55, 0.55, 0.55), (0.9, 0.9, 0.85),
    (0.85, 0.75, 0.2), (0.3, 0.15, 0.45), (0.1, 0.5, 0.55), (0.2, 0.2, 0.22),
)


@dataclass(frozen=True)
class Camera:
    position: tuple
    yaw: float = 0.0
    focal: float = 200.0
    image_size: tuple = (96, 96)

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if min(self.image_size) < 32:
            raise ValueError("image dimensions must be >= 32")

    @property
    def width(self):
        return self.image_size[0]

    @property
    def height(self):
        return self.image_size[1]

    def axes(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        right = np.array([c, s, 0.0])
        forward = np.array([-s, c, 0.0])
        return right, np.array([0.0, 0.0, 1.0]), forward


def project_point(camera, point):
    """Pixel (u, v) of a world point, or ``None`` when it is within the near plane."""
    right, up, fwd = camera.axes()
    d = np.asarray(point, dtype=np.float64) - np.asarray(camera.position, dtype=np.float64)
    zc = float(d @ fwd)
    if zc <= NEAR:
        return None
    return (camera.focal * float(d @ right) / zc + camera.width / 2,
            camera.focal * -float(d @ up) / zc + camera.height / 2)


@dataclass(frozen=True)
class Insert:
    """Textured sub-rectangle of a billboard in local coords.

    ``source`` is ``"patch"`` (sampled from the patch texture passed to
    :func:`render`) or an (H, W, 3) array. ``region`` selects full / left /
    right columns of the source.
    """
    s_range: tuple
    t_range: tuple
    source: object = "patch"
    region: str = "full"


@dataclass(frozen=True)
class Billboard:
    center: tuple
    width: float
    height: float
    facing: tuple = (0.0, -1.0, 0.0)
    motif: str = "flat"
    color: tuple = (0.5, 0.5, 0.5)
    label: int = None
    insert: Insert = None
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("billboard size must be positive")
        n = np.asarray(self.facing, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1) > 1e-9 or abs(n[2]) > 1e-12:
            raise ValueError("facing must be a unit vector in the ground plane")

    def frame(self):
        n = np.asarray(self.facing, dtype=np.float64)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(-n, up)
        return np.asarray(self.center, dtype=np.float64), right, up, n

    def corners(self):
        c, right, up, _ = self.frame()
        hw, hh = self.width / 2, self.height / 2
        return np.array([c - right * hw + up * hh, c + right * hw + up * hh,
                         c + right * hw - up * hh, c - right * hw - up * hh])


@dataclass(frozen=True)
class Road:
    lane_width: float = 3.5
    pavement: float = 3.0
    start: float = -80.0
    end: float = 120.0
    intersection: float = 0.0
    cross_width: float = 7.0

    def __post_init__(self):
        if not self.start < self.intersection < self.end:
            raise ValueError("intersection must lie strictly inside the road segment")

    @property
    def right_edge(self):
        return self.lane_width / 2

    @property
    def left_edge(self):
        return -1.5 * self.lane_width


@dataclass(frozen=True)
class Palette:
    sky: tuple
    horizon: tuple
    ground: tuple
    road: tuple
    pavement: tuple
    buildings: tuple


PALETTES = {
    1: Palette((0.45, 0.65, 0.9), (0.75, 0.82, 0.9), (0.3, 0.45, 0.25), (0.32, 0.32, 0.34),
               (0.62, 0.6, 0.56), ((0.7, 0.62, 0.5), (0.55, 0.5, 0.45), (0.8, 0.78, 0.7))),
    2: Palette((0.5, 0.7, 0.95), (0.85, 0.88, 0.92), (0.38, 0.5, 0.3), (0.28, 0.28, 0.3),
               (0.7, 0.66, 0.6), ((0.62, 0.4, 0.32), (0.75, 0.7, 0.6), (0.5, 0.52, 0.55))),
    3: Palette((0.4, 0.6, 0.85), (0.7, 0.78, 0.88), (0.42, 0.4, 0.34), (0.36, 0.36, 0.37),
               (0.58, 0.58, 0.6), ((0.45, 0.5, 0.6), (0.65, 0.68, 0.72), (0.35, 0.38, 0.42))),
    4: Palette((0.55, 0.72, 0.92), (0.88, 0.9, 0.9), (0.48, 0.55, 0.32), (0.3, 0.3, 0.31),
               (0.66, 0.62, 0.52), ((0.85, 0.8, 0.65), (0.6, 0.55, 0.42), (0.72, 0.66, 0.58))),
    5: Palette((0.42, 0.62, 0.88), (0.78, 0.84, 0.9), (0.25, 0.4, 0.28), (0.34, 0.33, 0.33),
               (0.6, 0.57, 0.55), ((0.58, 0.6, 0.5), (0.42, 0.36, 0.3), (0.78, 0.74, 0.72))),
}
# (probability of a genuine stop sign, mean pedestrian count, red-distractor rate)
PRESET_STATS = {1: (0.5, 1.6, 0.15), 2: (0.4, 1.2, 0.2), 3: (0.6, 1.8, 0.1),
                4: (0.45, 1.4, 0.25), 5: (0.55, 1.5, 0.15)}


@dataclass(frozen=True)
class SceneWorld:
    town_preset: int
    road: Road
    billboards: tuple = ()
    ambient: float = 1.0

    def __post_init__(self):
        if self.town_preset not in PALETTES:
            raise ValueError("town_preset must be in 1..5")

    @property
    def palette(self):
        return PALETTES[self.town_preset]

    def with_billboards(self, extra):
        return replace(self, billboards=tuple(self.billboards) + tuple(extra))


@dataclass
class TexelMap:
    """Sparse linear map from patch texels to image pixels.

    Pixel ``pixel_index[i]`` (flat row-major over H*W) equals the bilinear
    sample of the patch at ``coords[i]`` (x = column, y = row).
    """
    pixel_index: np.ndarray
    coords: np.ndarray
    patch_shape: tuple

    def weights(self):
        """(pixel_index, texel_index (P,4), weights (P,4)) of the sampling stencil."""
        idx, wts = _kernels.bilinear_weights(self.coords, self.patch_shape[0], self.patch_shape[1])
        return self.pixel_index, idx, wts

    def apply(self, patch, image):
        out = np.array(image, dtype=np.float64)
        if len(self.pixel_index):
            flat = out.reshape(-1, out.shape[-1])
            flat[self.pixel_index] = _kernels.bilinear(np.asarray(patch, dtype=np.float64), self.coords)
        return out


@dataclass
class RenderOutput:
    image: np.ndarray
    labels: list                 # (class, (cx, cy, w, h) pixels, depth)
    texel_weights: TexelMap
    owner: np.ndarray = field(repr=False)
    patch_boxes: dict = field(default_factory=dict)   # billboard index -> pixel box of its patch insert

    def normalized_labels(self):
        w, h = self.image.shape[1], self.image.shape[0]
        return [(cls, cx / w, cy / h, bw / w, bh / h, depth)
                for cls, (cx, cy, bw, bh), depth in self.labels]


# ---------------------------------------------------------------- motifs

def _octagon(s, t):
    x, y = np.abs(s - 0.5), np.abs(t - 0.5)
    return (x <= 0.5) & (y <= 0.5) & (x + y <= 0.5 * np.sqrt(2.0))


def _motif(bb, s, t):
    """Colour (P, 3) and opacity mask (P,) of a motif at local coords."""
    col = np.empty((len(s), 3))
    col[:] = bb.color
    mask = np.ones(len(s), dtype=bool)
    m = bb.motif
    if m == "stop_sign":
        mask = _octagon(s, t)
        x, y = np.abs(s - 0.5), np.abs(t - 0.5)
        ring = (np.maximum(x, y) > 0.43) | (x + y > 0.43 * np.sqrt(2.0))
        col[:] = (0.78, 0.06, 0.07)
        col[ring] = (0.95, 0.95, 0.95)
        # four letter blocks
        letters = (np.abs(t - 0.5) < 0.11) & (np.abs(s - 0.5) < 0.33)
        letters &= ((s - 0.17) / 0.165) % 1 < 0.72
        col[letters] = (0.95, 0.95, 0.95)
    elif m == "pedestrian":
        skin = (0.85, 0.68, 0.55) if bb.seed % 3 else (0.5, 0.36, 0.26)
        pants = ((0.15, 0.15, 0.25), (0.3, 0.25, 0.2), (0.1, 0.1, 0.1))[bb.seed % 3]
        head = (np.abs(s - 0.5) <= 0.2) & (t < 0.12)
        neck = (np.abs(s - 0.5) <= 0.1) & (t >= 0.12) & (t < TORSO_T[0])
        torso = (s >= TORSO_S[0]) & (s <= TORSO_S[1]) & (t >= TORSO_T[0]) & (t <= TORSO_T[1])
        arms = ((s < TORSO_S[0]) | (s > TORSO_S[1])) & (t >= TORSO_T[0]) & (t < 0.5)
        legs = (t > TORSO_T[1]) & (((s >= 0.12) & (s <= 0.46)) | ((s >= 0.54) & (s <= 0.88)))
        mask = head | neck | torso | arms | legs
        col[head | neck | arms] = skin
        col[head & (t < 0.035)] = (0.12, 0.08, 0.05)
        col[torso] = bb.color
        col[legs] = pants
    elif m == "building":
        wx = ((s * 9) % 1 > 0.3) & ((s * 9) % 1 < 0.75)
        wy = ((t * 6) % 1 > 0.3) & ((t * 6) % 1 < 0.75) & (t < 0.9)
        col[wx & wy] = np.asarray(bb.color) * 0.45 + np.array([0.05, 0.1, 0.18])
    elif m == "car":
        body = t > 0.4
        cabin = (t <= 0.4) & (np.abs(s - 0.5) < 0.32)
        wheels = (t > 0.85) & ((np.abs(s - 0.2) < 0.1) | (np.abs(s - 0.8) < 0.1))
        mask = body | cabin
        col[cabin] = (0.25, 0.3, 0.38)
        col[wheels] = (0.05, 0.05, 0.05)
    elif m == "tree":
        crown = (s - 0.5) ** 2 / 0.25 + (t - 0.4) ** 2 / 0.16 <= 1.0
        trunk = (np.abs(s - 0.5) < 0.07) & (t > 0.6)
        mask = crown | trunk
        col[trunk] = (0.35, 0.25, 0.15)
    return col, mask


def _insert_coords(ins, su, tu, shape):
    """Texel coords (x, y) of insert-local coordinates for the requested region."""
    h, w = shape[:2]
    if ins.region == "full":
        x0, x1 = 0.0, w - 1.0
    elif ins.region == "left":
        x0, x1 = 0.0, w / 2 - 1.0
    elif ins.region == "right":
        x0, x1 = w / 2, w - 1.0
    else:
        raise ValueError(f"unknown region {ins.region!r}")
    x = x0 + np.clip(su, 0, 1) * (x1 - x0)
    y = np.clip(tu, 0, 1) * (h - 1.0)
    return np.column_stack([x, y])


# ---------------------------------------------------------------- rendering

def _pixel_rays(camera):
    w, h = camera.width, camera.height
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    right, up, fwd = camera.axes()
    dx = (jj - w / 2) / camera.focal
    dy = -(ii - h / 2) / camera.focal
    d = dx[..., None] * right + dy[..., None] * up + fwd
    return d.reshape(-1, 3)


def _background(world, camera, rays):
    pal = world.palette
    road = world.road
    o = np.asarray(camera.position, dtype=np.float64)
    n = len(rays)
    img = np.empty((n, 3))
    dz = rays[:, 2]
    sky = dz >= -1e-6
    elev = np.clip(dz[sky] / np.linalg.norm(rays[sky], axis=1), 0, 1)
    mix = np.clip(elev * 4.0, 0, 1)[:, None]
    img[sky] = (1 - mix) * np.asarray(pal.horizon) + mix * np.asarray(pal.sky)
    g = ~sky
    lam = -o[2] / dz[g]
    p = o + lam[:, None] * rays[g]
    x, y = p[:, 0], p[:, 1]
    col = np.empty((g.sum(), 3))
    col[:] = pal.ground
    on_road = (x >= road.left_edge) & (x <= road.right_edge) & (y >= road.start) & (y <= road.end)
    on_cross = (y >= road.intersection) & (y <= road.intersection + road.cross_width)
    pave = ((x > road.right_edge) & (x <= road.right_edge + road.pavement)) | \
           ((x < road.left_edge) & (x >= road.left_edge - road.pavement))
    col[pave & (y >= road.start) & (y <= road.end)] = pal.pavement
    col[on_road | on_cross] = pal.road
    center = (np.abs(x - (road.left_edge + road.right_edge) / 2) < 0.08) & ((y % 6.0) < 3.0) & on_road & ~on_cross
    col[center] = (0.85, 0.85, 0.8)
    stop_line = on_road & (x >= -0.2 * road.lane_width) & (np.abs(y - (road.intersection - 0.5)) < 0.15)
    col[stop_line] = (0.9, 0.9, 0.88)
    far = lam > 300.0
    col[far] = pal.horizon
    img[g] = col
    return img


def render(world, camera, patch=None, patch_shape=(64, 64, 3)):
    """Composite background, road and billboards (painter's order, far to near).

    ``patch`` is the texture for ``Insert(source="patch")`` regions; when it
    is ``None`` those pixels are left mid-grey but still appear in the
    returned :class:`TexelMap`, so ``texel_weights.apply(patch, image)``
    produces the patched render.
    """
    if patch is not None:
        patch = np.asarray(patch, dtype=np.float64)
        patch_shape = patch.shape
    w, h = camera.width, camera.height
    rays = _pixel_rays(camera)
    img = _background(world, camera, rays)
    owner = np.full(w * h, -1, dtype=np.int64)
    patch_coords = np.zeros((w * h, 2))
    is_patch = np.zeros(w * h, dtype=bool)
    o = np.asarray(camera.position, dtype=np.float64)
    _, _, fwd = camera.axes()

    order = sorted(range(len(world.billboards)),
                   key=lambda i: -float(np.linalg.norm(np.asarray(world.billboards[i].center) - o)))
    for bi in order:
        bb = world.billboards[bi]
        corners = bb.corners()
        depth = (corners - o) @ fwd
        if np.all(depth <= NEAR):
            continue
        if np.all(depth > NEAR):
            uv = np.array([project_point(camera, c) for c in corners])
            j0 = max(int(np.floor(uv[:, 0].min() - 0.5)), 0)
            j1 = min(int(np.ceil(uv[:, 0].max() + 0.5)), w)
            i0 = max(int(np.floor(uv[:, 1].min() - 0.5)), 0)
            i1 = min(int(np.ceil(uv[:, 1].max() + 0.5)), h)
            if j0 >= j1 or i0 >= i1:
                continue
            ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
            pix = (ii * w + jj).ravel()
        else:
            pix = np.arange(w * h)
        c, right, up, n = bb.frame()
        d = rays[pix]
        denom = d @ n
        ok = np.abs(denom) > 1e-12
        lam = np.full(len(pix), -1.0)
        lam[ok] = ((c - o) @ n) / denom[ok]
        hit = o + lam[:, None] * d
        s = ((hit - c) @ right) / bb.width + 0.5
        t = 0.5 - ((hit - c) @ up) / bb.height
        inside = ok & ((d @ fwd) * lam > NEAR) & (s >= 0) & (s <= 1) & (t >= 0) & (t <= 1)
        pix, s, t = pix[inside], s[inside], t[inside]
        if not len(pix):
            continue
        col, mask = _motif(bb, s, t)
        pix, s, t, col = pix[mask], s[mask], t[mask], col[mask]
        owner[pix] = bi
        is_patch[pix] = False
        ins = bb.insert
        if ins is not None:
            (s0, s1), (t0, t1) = ins.s_range, ins.t_range
            sel = (s >= s0) & (s <= s1) & (t >= t0) & (t <= t1)
            su = (s[sel] - s0) / (s1 - s0)
            tu = (t[sel] - t0) / (t1 - t0)
            if isinstance(ins.source, str) and ins.source == "patch":
                coords = _insert_coords(ins, su, tu, patch_shape)
                patch_coords[pix[sel]] = coords
                is_patch[pix[sel]] = True
                col[sel] = 0.5 if patch is None else _kernels.bilinear(patch, coords)
            else:
                tex = np.asarray(ins.source, dtype=np.float64)
                col[sel] = _kernels.bilinear(tex, _insert_coords(ins, su, tu, tex.shape))
        img[pix] = col

    labels = []
    patch_boxes = {}
    counts = np.bincount(owner[owner >= 0], minlength=len(world.billboards))
    for bi, bb in enumerate(world.billboards):
        if counts[bi] == 0:
            continue
        if bb.insert is not None and isinstance(bb.insert.source, str):
            sel = np.flatnonzero((owner == bi) & is_patch)
            if len(sel):
                patch_boxes[bi] = _pixel_box(sel, w)
        if bb.label is None or counts[bi] < LABEL_MIN_PIXELS:
            continue
        sel = np.flatnonzero(owner == bi)
        depth = float((np.asarray(bb.center) - o) @ fwd)
        labels.append((bb.label, _pixel_box(sel, w), depth))
    sel = np.flatnonzero(is_patch)
    texmap = TexelMap(sel, patch_coords[sel], tuple(patch_shape))
    return RenderOutput(img.reshape(h, w, 3) * world.ambient, labels, texmap,
                        owner.reshape(h, w), patch_boxes)


def _pixel_box(flat_pixels, width):
    rows, cols = np.divmod(flat_pixels, width)
    x0, x1 = cols.min(), cols.max() + 1
    y0, y1 = rows.min(), rows.max() + 1
    return (float(x0 + x1) / 2.0, float(y0 + y1) / 2.0, float(x1 - x0), float(y1 - y0))


# ---------------------------------------------------------------- actors

def pedestrian(x, y, shirt=None, insert=None, seed=0, facing=(0.0, -1.0, 0.0)):
    """Pedestrian billboard standing at ground point (x, y); torso shows ``insert`` if given."""
    color = BENIGN_SHIRTS[seed % len(BENIGN_SHIRTS)] if shirt is None else shirt
    return Billboard((x, y, PED_HEIGHT / 2), PED_WIDTH, PED_HEIGHT, facing, "pedestrian",
                     tuple(color), PEDESTRIAN, insert, seed)


def torso_insert(source="patch", region="full"):
    return Insert(TORSO_S, TORSO_T, source, region)


def torso_x_extent(x_center):
    """Lateral extent of the torso square of a front-facing pedestrian centred at x."""
    return (x_center - TORSO / 2, x_center + TORSO / 2)


def stop_sign(x, y, insert=None):
    """Genuine stop sign: plate plus pole; only the plate is labelled."""
    plate = Billboard((x, y, SIGN_CENTER_Z), SIGN_SIZE, SIGN_SIZE, (0.0, -1.0, 0.0), "stop_sign",
                      (0.78, 0.06, 0.07), STOP_SIGN, insert)
    pole = Billboard((x, y + 0.02, (SIGN_CENTER_Z - SIGN_SIZE / 2) / 2), 0.06,
                     SIGN_CENTER_Z - SIGN_SIZE / 2, (0.0, -1.0, 0.0), "flat", (0.45, 0.45, 0.47))
    return [plate, pole]


def _buildings(rng, road, palette):
    out = []
    for side in (-1, 1):
        edge = road.right_edge + road.pavement + 1.0 if side > 0 else road.left_edge - road.pavement - 1.0
        y = road.start
        while y < road.end:
            length = rng.uniform(8, 20)
            if road.intersection - 2 < y + length and y < road.intersection + road.cross_width + 2:
                y = road.intersection + road.cross_width + 2
                continue
            height = rng.uniform(5, 14)
            col = palette.buildings[rng.integers(len(palette.buildings))]
            col = tuple(np.clip(np.asarray(col) + rng.uniform(-0.05, 0.05, 3), 0, 1))
            out.append(Billboard((edge + side * rng.uniform(0, 3), y + length / 2, height / 2), length,
                                 height, (-float(side), 0.0, 0.0), "building", col, seed=int(rng.integers(1 << 30))))
            y += length + rng.uniform(0.5, 4)
        # far facade across the intersection
    out.append(Billboard((rng.uniform(-6, 6), road.intersection + road.cross_width + rng.uniform(25, 45),
                          rng.uniform(6, 12)), 30.0, 20.0, (0.0, -1.0, 0.0), "building",
                         palette.buildings[rng.integers(len(palette.buildings))]))
    return out


def sample_town(seed, town_preset):
    """Deterministic world for (seed, preset): buildings, parked cars, trees,
    0-3 pedestrians on the pavements, and possibly a stop sign at the
    intersection, with preset-specific frequencies."""
    if town_preset not in PALETTES:
        raise ValueError("town_preset must be in 1..5")
    rng = np.random.default_rng([int(seed), int(town_preset)])
    pal = PALETTES[town_preset]
    p_sign, ped_mean, red_rate = PRESET_STATS[town_preset]
    road = Road(intersection=float(rng.uniform(30, 60)))
    bbs = _buildings(rng, road, pal)
    iy = road.intersection
    for _ in range(int(rng.integers(2, 7))):
        y = rng.uniform(iy - 45, iy + 20)
        if road.intersection - 3 < y < road.intersection + road.cross_width + 1:
            continue
        # parked along the far kerb, or queued beyond the junction
        x = road.left_edge + 1.0 if y < iy else rng.uniform(road.left_edge + 1.0, road.right_edge - 1.0)
        col = (0.7, 0.08, 0.08) if rng.random() < red_rate else tuple(rng.uniform(0.1, 0.9, 3))
        bbs.append(Billboard((x, y, 0.75), 1.8, 1.5, (0.0, -1.0, 0.0), "car", col))
    for _ in range(int(rng.integers(1, 5))):
        side = 1 if rng.random() < 0.5 else -1
        x = road.right_edge + road.pavement - 0.4 if side > 0 else road.left_edge - road.pavement + 0.4
        bbs.append(Billboard((x, rng.uniform(iy - 40, iy + 30), 2.5), 2.6, 5.0, (0.0, -1.0, 0.0), "tree",
                             (0.2, 0.45 + rng.uniform(-0.1, 0.1), 0.2)))
    if rng.random() < p_sign:
        bbs.extend(stop_sign(road.right_edge + rng.uniform(0.3, 1.3), iy - rng.uniform(0.5, 3.0)))
    n_ped = min(int(rng.poisson(ped_mean + 0.6)), 3)
    for k in range(n_ped):
        side = 1 if rng.random() < 0.75 else -1
        off = rng.uniform(0.4, road.pavement - 0.4)
        x = road.right_edge + off if side > 0 else road.left_edge - off
        y = rng.uniform(iy - 22, iy + 4)
        pseed = int(rng.integers(1 << 30))
        shirt = (0.75, 0.1, 0.1) if rng.random() < red_rate else BENIGN_SHIRTS[pseed % len(BENIGN_SHIRTS)]
        bbs.append(pedestrian(x, y, shirt=shirt, seed=pseed))
    return SceneWorld(town_preset, road, tuple(bbs))


def sample_view(seed, town_preset, focal_range=(180.0, 300.0), image_size=(96, 96), close_fraction=0.25):
    """A world plus an ego camera 7-30 m before its intersection.

    The focal length is drawn per view so objects appear over a wider range
    of pixel sizes than a single lens would give. When the town has a stop
    sign, a ``close_fraction`` of views instead turn toward it from 3-10 m,
    since lane-centred views never show the plate larger than about 15 px.
    """
    world = sample_town(seed, town_preset)
    rng = np.random.default_rng([int(seed), int(town_preset), 7])
    x = rng.uniform(-0.4, 0.6)
    height = CAMERA_HEIGHT + rng.uniform(-0.1, 0.1)
    focal = float(rng.uniform(*focal_range))
    signs = [b for b in world.billboards if b.label == STOP_SIGN]
    if signs and rng.random() < close_fraction:
        sx, sy = signs[0].center[0], signs[0].center[1]
        d = rng.uniform(3, 10)
        yaw = -np.arctan2(sx - x, d) + rng.uniform(-0.1, 0.1)
        return world, Camera((x, sy - d, height), float(yaw), focal, image_size)
    y = world.road.intersection - rng.uniform(7, 30)
    return world, Camera((x, y, height), float(rng.uniform(-0.06, 0.06)), focal, image_size)


# ---------------------------------------------------------------- collusion geometry

def render_dataset(seed, count, presets=(1, 2, 3, 4, 5), focal_range=(180.0, 300.0)):
    """``count`` labelled views cycling through ``presets``.

    Returns (images (N, 96, 96, 3), labels per image as normalised
    ``(cls, cx, cy, w, h, depth)`` tuples, preset per image).
    """
    images, labels, towns = [], [], []
    for i in range(count):
        preset = presets[i % len(presets)]
        world, cam = sample_view(int(seed) * 1_000_003 + i, preset, focal_range)
        out = render(world, cam)
        images.append(out.image)
        labels.append(out.normalized_labels())
        towns.append(preset)
    return np.stack(images) if images else np.zeros((0, 96, 96, 3)), labels, towns


def split_counts(count, fraction):
    if not 0 < fraction < 1:
        raise ValueError("split fraction must be in (0, 1)")
    n_train = int(round(count * fraction))
    return n_train, count - n_train


class GeometryError(ValueError):
    pass


def collusion_offset(camera, left_x_extent, right_x_extent, right_depth):
    """Depth for the left half-patch so its right edge lines up with the right half's left edge.

    Solves (left_x1 - cx) / (left_depth - cy) = (right_x0 - cx) / (right_depth - cy)
    for front-facing billboards seen from a yaw-0 camera at lateral ``cx`` and depth ``cy``.
    A camera to the left of the seam puts the left billboard nearer; to the right, farther.
    """
    cx, cy = float(camera.position[0]), float(camera.position[1])
    lx1 = float(left_x_extent[1])
    rx0 = float(right_x_extent[0])
    if abs(rx0 - cx) < 1e-12:
        raise GeometryError("right patch edge is on the camera's optical line; depth is undetermined")
    if right_depth - cy <= NEAR:
        raise GeometryError("right billboard is not in front of the camera")
    left_depth = cy + (right_depth - cy) * (lx1 - cx) / (rx0 - cx)
    if left_depth - cy <= NEAR:
        raise GeometryError(f"solved left depth {left_depth:.3f} is inside the near plane")
    return left_depth


def save_ppm(path, image):
    """Binary P6, 8-bit."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def load_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = []
    pos = 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    pos += 1
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P6 file")
    w, h = int(parts[1]), int(parts[2])
    arr = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def save_labels(path, labels, width, height):
    """One object per line: ``class_id cx cy w h`` normalised to [0, 1]."""
    with open(path, "w") as fh:
        for cls, (cx, cy, bw, bh), *_ in labels:
            fh.write(f"{cls} {cx / width:.6f} {cy / height:.6f} {bw / width:.6f} {bh / height:.6f}\n")


def load_labels(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                cls, *vals = line.split()
                out.append((int(cls), *map(float, vals)))
    return out
