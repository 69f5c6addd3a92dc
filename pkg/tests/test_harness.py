import numpy as np
import pytest

from pedattack import detector, harness as hs, patchforge as pf
from pedattack.detector import PEDESTRIAN, STOP_SIGN, Detection


def stop_det(height=0.6 * 200 / 20, score=0.9):
    return Detection(STOP_SIGN, score, (50.0, 40.0, height, height), 0)


def ped_det(score=0.9):
    return Detection(PEDESTRIAN, score, (70.0, 50.0, 8.0, 30.0), 0)


# ---------------------------------------------------------------- configs

def test_enumerate_configs():
    cfgs = hs.enumerate_configs()
    assert len(cfgs) == 20
    assert len({c.name for c in cfgs}) == 20
    assert sum(c.attack == "SINGLE" for c in cfgs) == 6
    assert sum(c.dynamic for c in cfgs) == 10
    assert len({c.geometry for c in cfgs}) == 1


def test_config_consistency_rule():
    with pytest.raises(ValueError):
        hs.ScenarioConfig("SINGLE", "patch-both", False)
    with pytest.raises(ValueError):
        hs.ScenarioConfig("COLLUSION", "camellia", True)


def test_region_assignment():
    rng = np.random.default_rng(0)
    for c in hs.enumerate_configs():
        actors = hs._layout(c, rng)
        if c.attack == "SINGLE":
            assert len(actors) == 1 and actors[0].region == hs.FULL
        else:
            left, right = actors
            assert left.lateral < right.lateral
            assert (left.region, right.region) == (hs.LEFT, hs.RIGHT)
    both = hs._layout(hs.ScenarioConfig("COLLUSION", "patch-both", True), rng)
    assert [a.texture for a in both] == [hs.PATCH, hs.PATCH]
    only_left = hs._layout(hs.ScenarioConfig("COLLUSION", "patch-left", True), rng)
    assert [a.texture for a in only_left] == [hs.PATCH, hs.NONE]
    only_right = hs._layout(hs.ScenarioConfig("COLLUSION", "camellia-right", True), rng)
    assert [a.texture for a in only_right] == [hs.NONE, hs.CAMELLIA]


def test_collusion_pair_geometry():
    g = hs.Geometry()
    left, right = hs._layout(hs.ScenarioConfig("COLLUSION", "patch-both", False), np.random.default_rng(0))
    # camera to the left of the seam: the left walker stands nearer the camera
    assert left.position < right.position
    assert left.lateral - 0.25 >= 1.75 - 1e-9


# ---------------------------------------------------------------- kinematics

@pytest.mark.parametrize("v,speed", [((3, 4, 0), 5.0), ((0, 0, 0), 0.0), ((-2, 0, 0), 2.0)])
def test_ego_speed(v, speed):
    assert hs.ego_speed(v) == speed


def test_pedestrian_step():
    static = hs.PedestrianActor(10.0, 2.5, hs.STATIC, stop_line=20.0, active=True)
    assert hs.pedestrian_step(static, (0, 8.0, 0), 0.1) == static
    dyn = hs.PedestrianActor(10.0, 2.5, hs.DYNAMIC, stop_line=20.0, active=True)
    assert hs.pedestrian_step(dyn, (0, 5.0, 0), 0.1).position == pytest.approx(10.5)
    at_line = hs.PedestrianActor(20.0, 2.5, hs.DYNAMIC, stop_line=20.0, active=True)
    for _ in range(5):
        at_line = hs.pedestrian_step(at_line, (0, 5.0, 0), 0.1)
    assert at_line.position == 20.0
    near = hs.PedestrianActor(19.8, 2.5, hs.DYNAMIC, stop_line=20.0, active=True)
    assert hs.pedestrian_step(near, (0, 5.0, 0), 0.1).position == 20.0
    with pytest.raises(ValueError):
        hs.pedestrian_step(dyn, (0, 5.0, 0), 0.0)


def test_controller_cruise_fixed_point():
    ego = hs.EgoState((0.0, 0.0), (0.0, 0.0, 0.0))
    for _ in range(300):
        _, ego = hs.controller_step([[]], ego, 0.1)
    assert ego.speed == pytest.approx(5.0, abs=0.01)
    assert ego.controller_mode == hs.CRUISE


def test_controller_stops_for_persistent_sign():
    ego = hs.EgoState((0.0, 0.0), (0.0, 5.0, 0.0))
    recent, t = [], 0.0
    while ego.controller_mode != hs.STOPPED:
        recent = (recent + [[stop_det()]])[-5:]
        _, ego = hs.controller_step(recent, ego, 0.1)
        t += 0.1
        assert t < 5 / 3 + 0.5
    assert ego.trigger == STOP_SIGN and ego.speed == 0.0


def test_controller_needs_three_of_five():
    ego = hs.EgoState((0.0, 0.0), (0.0, 5.0, 0.0))
    recent = [[stop_det()], [], [], [stop_det()], []]
    _, nxt = hs.controller_step(recent, ego, 0.1)
    assert nxt.controller_mode == hs.CRUISE
    recent = [[stop_det()], [], [stop_det()], [], [stop_det()]]
    _, nxt = hs.controller_step(recent, ego, 0.1)
    assert nxt.controller_mode == hs.BRAKING


def test_controller_ignores_far_or_weak_signs():
    ego = hs.EgoState((0.0, 0.0), (0.0, 5.0, 0.0))
    far = [[stop_det(height=3.0)]] * 5                 # estimated 40 m
    weak = [[stop_det(score=0.4)]] * 5
    for recent in (far, weak):
        _, nxt = hs.controller_step(recent, ego, 0.1)
        assert nxt.controller_mode == hs.CRUISE


def test_controller_caution_and_mode_sequence():
    ego = hs.EgoState((0.0, 0.0), (0.0, 5.0, 0.0))
    for _ in range(100):
        _, ego = hs.controller_step([[ped_det()]], ego, 0.1)
    assert ego.speed == pytest.approx(3.0, abs=0.01)
    modes = [ego.controller_mode]
    recent = []
    for k in range(200):
        recent = (recent + [[stop_det()]])[-5:]
        prev = ego.speed
        _, ego = hs.controller_step(recent, ego, 0.1)
        assert abs(ego.speed - prev) <= 3.0 * 0.1 + 1e-9 or modes[-1] == hs.BRAKING
        if ego.controller_mode != modes[-1]:
            modes.append(ego.controller_mode)
    assert modes == [hs.CRUISE, hs.BRAKING, hs.STOPPED, hs.PROCEED]
    assert ego.speed == pytest.approx(5.0, abs=0.05)


# ---------------------------------------------------------------- success rule

def _record(events):
    return hs.RunRecord("x", 0, stop_events=events, intersection=60.0, exit_position=67.0)


def test_classify_success():
    assert hs.classify_success(_record([{"frame": 1, "trigger": STOP_SIGN, "position": 40.0}]))
    assert not hs.classify_success(_record([]))
    assert not hs.classify_success(_record([{"frame": 1, "trigger": PEDESTRIAN, "position": 40.0}]))
    assert not hs.classify_success(_record([{"frame": 1, "trigger": STOP_SIGN, "position": 70.0}]))


def test_record_json_round_trip():
    rec = _record([{"frame": 1, "trigger": STOP_SIGN, "position": 40.0}])
    rec.frames.append({"frame": 0, "t": 0.0, "speed": 5.0, "detections": []})
    back = hs.RunRecord.from_json(rec.to_json())
    assert back == rec


# ---------------------------------------------------------------- closed loop (cheap detector stand-ins)

def _silent():
    p = detector.init_detector(0)
    p.weights["head.b"][0] = -50.0
    return p


def _textures():
    return {"patch": np.full((64, 64, 3), 0.5), "camellia": pf.rosette()}


def _short_geometry():
    return hs.Geometry(start_distance=14.0, destination_past=4.0, activation_gap=10.0)


def test_benign_run_reaches_destination_without_stops():
    cfg = hs.ScenarioConfig("SINGLE", "single-benign", False, seed=3, geometry=_short_geometry())
    rec = hs.run_scenario(cfg, _silent(), _textures())
    assert rec.termination == "DESTINATION_REACHED"
    assert rec.stop_events == [] and not rec.success
    speeds = [f["speed"] for f in rec.frames]
    assert max(abs(b - a) for a, b in zip(speeds, speeds[1:])) <= 0.3 + 1e-9


def test_run_is_deterministic_per_seed():
    cfg = hs.ScenarioConfig("COLLUSION", "patch-both", True, seed=5, geometry=_short_geometry())
    a = hs.run_scenario(cfg, _silent(), _textures())
    b = hs.run_scenario(cfg, _silent(), _textures())
    assert a.to_json() == b.to_json()
    c = hs.run_scenario(hs.ScenarioConfig("COLLUSION", "patch-both", True, 6, _short_geometry()),
                        _silent(), _textures())
    assert c.to_json() != a.to_json()


def test_pedestrians_stay_on_pavement_and_before_stop_line():
    g = _short_geometry()
    for cfg in hs.enumerate_configs(g, seed=1):
        if cfg.configuration not in ("patch-both", "patch"):
            continue
        rec = hs.run_scenario(cfg, _silent(), _textures())
        for f in rec.frames:
            assert all(p <= g.stop_line + 1e-9 for p in f["pedestrians"])
        actors = hs._layout(cfg, np.random.default_rng(0))
        assert all(a.lateral - 0.25 >= 1.75 - 1e-9 for a in actors)


def test_dynamic_keeps_patch_in_view_longer():
    g = hs.Geometry(start_distance=40.0, destination_past=2.0)
    for seed in (0, 1):
        frames = {}
        for dynamic in (False, True):
            cfg = hs.ScenarioConfig("COLLUSION", "patch-both", dynamic, seed, g)
            rec = hs.run_scenario(cfg, _silent(), _textures())
            frames[dynamic] = sum(f["patch_pixels"] > 0 for f in rec.frames)
        assert frames[True] >= frames[False]


def test_timeout_is_not_success():
    cfg = hs.ScenarioConfig("SINGLE", "patch", False, seed=0, geometry=_short_geometry())
    rec = hs.run_scenario(cfg, _silent(), _textures(), timeout=0.5)
    assert rec.termination == "TIMEOUT" and not rec.success
