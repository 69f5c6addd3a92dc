import numpy as np
import pytest

from fdcheck import rel_error
from pedattack import detector, patchforge as pf, scene
from pedattack.detector import GRID, STOP_SIGN


def rng(seed=0):
    return np.random.default_rng(seed)


def test_rosette_asset():
    r = pf.rosette()
    assert r.shape == (64, 64, 3)
    assert 0 <= r.min() and r.max() <= 1
    red = (r[..., 0] > 0.6) & (r[..., 1] < 0.2)
    assert 0.3 < red.mean() < 0.8
    assert np.array_equal(r, pf.rosette())


def test_patch_texture_clamps_and_freezes_disguise():
    p = pf.PatchTexture(np.full((64, 64, 3), 1.5), pf.rosette())
    assert p.pixels.max() == 1.0
    with pytest.raises(ValueError):
        p.disguise[0, 0, 0] = 0.0
    with pytest.raises(ValueError):
        pf.PatchTexture(np.zeros((64, 64, 3)), pf.rosette(), k_disguise=-1)


# ---------------------------------------------------------------- transforms

def test_collapsed_ranges_give_fixed_transform():
    r = pf.TransformRanges((0.3, 0.3), (0.1, 0.1), 0.0, ((2.0, 2.0), (-3.0, -3.0)))
    a = pf.sample_transform(rng(1), r)
    b = pf.sample_transform(rng(2), r)
    assert a == b
    assert a.scale == 0.3 and a.translation == (2.0, -3.0)


def test_default_ranges_keep_quads_inside():
    g = rng(4)
    for _ in range(1000):
        q = pf.sample_transform(g).quad()
        assert q.min() >= 0 and q.max() <= 96


def test_axis_aligned_square():
    t = pf.TransformSample(0.25, 0.0, (0.0, 0.0), ((0, 0),) * 4)
    q = t.quad()
    assert np.allclose(q, [[36, 36], [60, 36], [60, 60], [36, 60]])


def test_unsatisfiable_ranges_rejected():
    with pytest.raises(pf.TransformRejected):
        pf.sample_transform(rng(), pf.TransformRanges((1.2, 1.3)))


# ---------------------------------------------------------------- placement

def test_full_cover_transform_is_resampled_patch():
    t = pf.TransformSample(1.0, 0.0, (0.0, 0.0), ((0, 0),) * 4)
    patch = rng(2).random((64, 64, 3))
    img, quad = pf.apply_patch(np.zeros((96, 96, 3)), patch, t)
    jj, ii = np.meshgrid(np.arange(96) + 0.5, np.arange(96) + 0.5)
    coords = np.column_stack([jj.ravel(), ii.ravel()]) * (63 / 96)
    from pedattack import _kernels
    expect = _kernels.bilinear(patch, coords).reshape(96, 96, 3)
    assert np.abs(img - expect).max() <= 1e-12


def test_inverse_map_round_trip_at_corners():
    g = rng(7)
    patch = g.random((64, 64, 3))
    for _ in range(20):
        quad = pf.sample_transform(g).quad()
        coords = pf.image_to_patch(quad, patch.shape, quad)
        assert np.abs(coords - pf.patch_corners(patch.shape)).max() <= 1e-6
        from pedattack import _kernels
        got = _kernels.bilinear(patch, coords)
        want = patch[[0, 0, 63, 63], [0, 63, 63, 0]]
        assert np.abs(got - want).max() <= 1e-6


def test_apply_patch_is_affine_in_texels():
    g = rng(8)
    img = g.random((96, 96, 3))
    for _ in range(10):
        t = pf.sample_transform(g)
        p1, p2 = g.random((64, 64, 3)), g.random((64, 64, 3))
        a = g.random()
        mixed, _ = pf.apply_patch(img, a * p1 + (1 - a) * p2, t)
        combo = a * pf.apply_patch(img, p1, t)[0] + (1 - a) * pf.apply_patch(img, p2, t)[0]
        assert np.abs(mixed - combo).max() <= 1e-9


def test_covered_cells_of_small_and_large_quads():
    tiny = np.array([[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]])
    assert len(pf.covered_cells(tiny)) == 0
    whole = np.array([[0.0, 0.0], [96.0, 0.0], [96.0, 96.0], [0.0, 96.0]])
    assert len(pf.covered_cells(whole)) == GRID * GRID
    # orientation does not matter
    assert len(pf.covered_cells(whole[::-1])) == GRID * GRID


# ---------------------------------------------------------------- losses

def _perfect_raw(quad, big=30.0):
    raw = np.zeros((GRID, GRID, 7))
    cx, cy, w, h = pf.quad_box(quad)
    raw[..., 0] = big
    raw[..., 1 + STOP_SIGN] = big
    rows, cols = np.divmod(np.arange(GRID * GRID), GRID)
    off_x = np.clip(cx / 8 - cols, 1e-6, 1 - 1e-6)
    off_y = np.clip(cy / 8 - rows, 1e-6, 1 - 1e-6)
    raw[..., 3] = np.log(off_x / (1 - off_x)).reshape(GRID, GRID)
    raw[..., 4] = np.log(off_y / (1 - off_y)).reshape(GRID, GRID)
    raw[..., 5] = np.log(w / 8)
    raw[..., 6] = np.log(h / 8)
    return raw


def test_adversarial_loss_optimum():
    # a quad over a single cell centre whose box centre lies in that cell
    t = pf.TransformSample(10 / 96, 0.0, (-4.0, -4.0), ((0, 0),) * 4)
    q = t.quad()
    assert list(pf.covered_cells(q)) == [5 * GRID + 5]
    assert pf.adversarial_loss(_perfect_raw(q), q) < 1e-6


def test_adversarial_loss_optimum_without_box_term():
    q = pf.TransformSample(0.3, 0.0, (-2.0, 3.0), ((0, 0),) * 4).quad()
    loss = pf.adversarial_loss(_perfect_raw(q), q, weights=pf.LossWeights(1.0, 1.0, 0.0))
    assert loss < 1e-6


def test_adversarial_loss_uniform_logits_cls_term():
    q = pf.TransformSample(0.3, 0.0, (0.0, 0.0), ((0, 0),) * 4).quad()
    loss = pf.adversarial_loss(np.zeros((GRID, GRID, 7)), q, weights=pf.LossWeights(1.0, 0.0, 0.0))
    assert loss == pytest.approx(np.log(2), abs=1e-12)


def test_adversarial_loss_rejects_tiny_quads():
    tiny = np.array([[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]])
    with pytest.raises(pf.PatchTooSmall):
        pf.adversarial_loss(np.zeros((GRID, GRID, 7)), tiny)


def test_disguise_loss_values():
    p = pf.PatchTexture.initial()
    assert pf.disguise_loss(p) == 0.0
    shifted = pf.PatchTexture(np.clip(p.disguise + 0.1, 0, 1), p.disguise)
    flat = pf.PatchTexture(np.full((64, 64, 3), 0.5), np.full((64, 64, 3), 0.4))
    assert pf.disguise_loss(flat) == pytest.approx(0.1 * np.sqrt(12288), abs=1e-9)
    assert pf.disguise_loss(flat) == pytest.approx(11.085, abs=1e-3)
    double = pf.PatchTexture(np.full((64, 64, 3), 0.6), np.full((64, 64, 3), 0.4))
    assert pf.disguise_loss(double) == pytest.approx(2 * pf.disguise_loss(flat), rel=1e-12)
    assert pf.disguise_loss(shifted) > 0


def test_total_loss_composition():
    g = rng(3)
    raw = g.normal(size=(GRID, GRID, 7))
    q = pf.sample_transform(g).quad()
    base = pf.PatchTexture.initial(k_disguise=0.0)
    moved = pf.PatchTexture(np.full((64, 64, 3), 0.5), base.disguise, 0.0)
    assert pf.total_loss(raw, q, moved) == pf.adversarial_loss(raw, q)
    assert pf.total_loss(raw, q, pf.PatchTexture.initial(k_disguise=3.0)) == pf.adversarial_loss(raw, q)
    values = [pf.total_loss(raw, q, pf.PatchTexture(moved.pixels, base.disguise, k)) for k in (0, 0.1, 1, 10)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_patch_gradient_matches_finite_differences():
    g = rng(12)
    params = detector.init_detector(3)
    images = g.random((2, 96, 96, 3))
    ts = [pf.sample_transform(g) for _ in range(2)]
    patch = pf.PatchTexture(g.random((64, 64, 3)) * 0.8 + 0.1, pf.rosette(), 0.0)
    _, adv, gp = pf.patch_loss_and_grad(params, patch, images, ts)

    def f(pixels):
        return pf.patch_loss_and_grad(params, pf.PatchTexture(pixels, patch.disguise, 0.0), images, ts)[1]

    for _ in range(3):
        d = g.normal(size=patch.pixels.shape)
        d /= np.linalg.norm(d)
        h = 1e-5                    # larger steps cross relu / max-pool kinks
        fd = (f(patch.pixels + h * d) - f(patch.pixels - h * d)) / (2 * h)
        assert rel_error(np.array([np.sum(gp * d)]), np.array([fd])) <= 1e-4


# ---------------------------------------------------------------- training

def test_zero_steps_returns_initialisation():
    params = detector.init_detector(0)
    imgs = rng().random((2, 96, 96, 3))
    for init in ("disguise", "gray"):
        patch, curve = pf.train_patch(params, imgs, pf.EotConfig(steps=0, init=init))
        assert curve == []
        expect = pf.rosette() if init == "disguise" else np.full((64, 64, 3), 0.5)
        assert np.array_equal(patch.pixels, expect)


def test_training_is_deterministic_and_clamped():
    params = detector.init_detector(0)
    imgs = rng(1).random((4, 96, 96, 3))
    cfg = pf.EotConfig(steps=3, batch=2, lr=50.0, seed=5)
    a, ca = pf.train_patch(params, imgs, cfg)
    b, cb = pf.train_patch(params, imgs, cfg)
    assert np.array_equal(a.pixels, b.pixels) and ca == cb
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1


def test_proximal_disguise_step_with_large_weight_stays_on_disguise():
    params = detector.init_detector(0)
    imgs = rng(1).random((4, 96, 96, 3))
    patch, _ = pf.train_patch(params, imgs, pf.EotConfig(steps=5, batch=2, k_disguise=1e3, seed=2,
                                                                  disguise_step="proximal"))
    assert np.abs(patch.pixels - patch.disguise).max() <= 0.05


def test_trained_detector_patch_loss_halves_in_100_steps(pipeline):
    """Fixed validation image and transform, 100 steps at lr 0.01."""
    _, out = pipeline
    params = detector.load_params(out / "detector.bin")
    image = scene.load_ppm(sorted((out / "dataset" / "validation").glob("*.ppm"))[0])
    t = pf.sample_transform(rng(21), pf.TransformRanges(scale=(0.3, 0.3)))
    _, curve = pf.train_patch(params, image[None], pf.EotConfig(steps=100, batch=1, lr=0.01, seed=0),
                              transforms=[t])
    assert curve[-1] <= 0.5 * curve[0]


def test_split_patch():
    p = rng().random((64, 64, 3))
    left, right = pf.split_patch(p)
    assert left.shape == right.shape == (64, 32, 3)
    assert np.array_equal(np.concatenate([left, right], axis=1), p)
    sym = np.concatenate([p[:, :32], p[:, :32][:, ::-1]], axis=1)
    l2, r2 = pf.split_patch(sym)
    assert np.array_equal(l2, r2[:, ::-1])
    with pytest.raises(ValueError):
        pf.split_patch(rng().random((64, 63, 3)))


# ---------------------------------------------------------------- model-level evaluation

class _Silent:
    """Detector parameters whose objectness never fires."""
    def __new__(cls):
        p = detector.init_detector(0)
        p.weights["head.b"][0] = -50.0
        return p


def test_eval_never_fires_gives_zero():
    a, outcomes = pf.eval_model_level(_Silent(), pf.rosette(), rng().random((3, 96, 96, 3)), 2, seed=1)
    assert a == 0 and len(outcomes) == 6
    assert all(not o.success for o in outcomes)


def test_eval_rejects_empty_test_set():
    with pytest.raises(ValueError):
        pf.eval_model_level(_Silent(), pf.rosette(), np.zeros((0, 96, 96, 3)))


def test_eval_deterministic_and_monotone_filter():
    params = detector.init_detector(1)
    params.weights["head.b"][0] = 3.0       # fires everywhere
    imgs = rng(2).random((4, 96, 96, 3))
    a1, o1 = pf.eval_model_level(params, pf.rosette(), imgs, 3, seed=9)
    a2, o2 = pf.eval_model_level(params, pf.rosette(), imgs, 3, seed=9)
    assert a1 == a2 and [o.best_iou for o in o1] == [o.best_iou for o in o2]
    any_stop = np.mean([any(d.cls == STOP_SIGN for d in o.detections) for o in o1])
    assert a1 <= any_stop


def test_outcome_csv_and_patch_files(tmp_path):
    a, outcomes = pf.eval_model_level(_Silent(), pf.rosette(), rng().random((2, 96, 96, 3)), 1)
    pf.write_outcomes_csv(tmp_path / "o.csv", outcomes)
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "image_id,trial,success,best_iou,best_score" and len(lines) == 3
    patch = pf.PatchTexture.initial()
    pf.save_patch(tmp_path / "p.ppm", patch, 4, "abc")
    back, meta = pf.load_patch(tmp_path / "p.ppm")
    assert meta["seed"] == 4 and meta["config_hash"] == "abc"
    assert np.abs(back.pixels - patch.pixels).max() <= 0.5 / 255 + 1e-12
