"""Closed-loop driving runs: an ego vehicle with a stop-on-sign controller
passes pedestrians whose shirts carry a benign print, the rosette disguise,
or the adversarial patch (whole, or split across two colluding walkers).
"""
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import scene
from .detector import PEDESTRIAN, STOP_SIGN, decode, forward

SCHEMA_VERSION = 1
DT = 0.1

CRUISE, BRAKING, STOPPED, PROCEED = "CRUISE", "BRAKING", "STOPPED", "PROCEED"
MODE_ORDER = (CRUISE, BRAKING, STOPPED, PROCEED)
STATIC, DYNAMIC = "STATIC", "DYNAMIC"
NONE, CAMELLIA, PATCH = "NONE", "CAMELLIA", "PATCH"
FULL, LEFT, RIGHT = "FULL", "LEFT", "RIGHT"

SINGLE_CONFIGS = ("single-benign", "camellia", "patch")
COLLUSION_CONFIGS = ("collusion-benign", "patch-both", "patch-left", "patch-right",
                     "camellia-both", "camellia-left", "camellia-right")
BENIGN_CONFIGS = ("single-benign", "collusion-benign")


@dataclass(frozen=True)
class Geometry:
    """Scenario layout along the road axis (metres); the ego starts at y = 0."""
    start_distance: float = 60.0
    staging_offset: float = 6.0          # pedestrians start this far before the sign location
    sign_setback: float = 1.0            # possible sign location, before the junction
    camera_lateral: float = 0.0
    pedestrian_lateral: float = 4.4      # centre of the (right) pedestrian, near the outer kerb
    pair_gap: float = 0.6                # physical gap between the two walkers' billboards
    activation_gap: float = 12.0         # dynamic walkers start pacing at this ego distance
    destination_past: float = 20.0
    focal: float = 120.0                 # wide lens: walkers leave the view at ~10 m
    town_preset: int = 1
    scenery_seed: int = 0
    ego_jitter: float = 1.0
    pedestrian_jitter: float = 0.3
    pixel_noise: float = 0.01

    @property
    def intersection(self):
        return self.start_distance

    @property
    def sign_y(self):
        return self.intersection - self.sign_setback

    @property
    def stop_line(self):
        return self.intersection - 0.5


@dataclass(frozen=True)
class ControllerParams:
    cruise: float = 5.0
    caution: float = 3.0
    gain: float = 1.0
    accel_limit: float = 3.0
    brake: float = 3.0
    score: float = 0.5
    persist: int = 3
    window: int = 5
    trigger_distance: float = 25.0
    hold: float = 2.0
    stop_speed: float = 0.05
    sign_height: float = 0.6
    focal: float = 200.0

    def __post_init__(self):
        if not 1 <= self.persist <= self.window:
            raise ValueError("controller needs 1 <= persist <= window")


@dataclass(frozen=True)
class ScenarioConfig:
    attack: str
    configuration: str
    dynamic: bool
    seed: int = 0
    geometry: Geometry = Geometry()

    def __post_init__(self):
        allowed = SINGLE_CONFIGS if self.attack == "SINGLE" else COLLUSION_CONFIGS
        if self.attack not in ("SINGLE", "COLLUSION") or self.configuration not in allowed:
            raise ValueError(f"configuration {self.configuration!r} does not fit attack {self.attack!r}")

    @property
    def name(self):
        return f"{self.configuration}-{'dynamic' if self.dynamic else 'static'}"


def enumerate_configs(geometry=Geometry(), seed=0):
    """The 10 configurations, each static then dynamic."""
    out = []
    for attack, names in (("SINGLE", SINGLE_CONFIGS), ("COLLUSION", COLLUSION_CONFIGS)):
        for name in names:
            for dynamic in (False, True):
                out.append(ScenarioConfig(attack, name, dynamic, seed, geometry))
    return out


# ---------------------------------------------------------------- actors and ego

@dataclass(frozen=True)
class PedestrianActor:
    position: float                  # metres along the road
    lateral: float                   # x of the billboard centre, on the pavement
    motion: str = STATIC
    texture: str = NONE
    region: str = FULL
    stop_line: float = 0.0
    shirt_seed: int = 0
    active: bool = False

    def __post_init__(self):
        if self.position > self.stop_line + 1e-9:
            raise ValueError("pedestrian starts beyond its stop line")


def ego_speed(velocity):
    v = np.asarray(velocity, dtype=np.float64)
    return float(np.sqrt(np.sum(v * v)))


def pedestrian_step(actor, ego_velocity, dt):
    """Dynamic actors advance at the ego's speed, never past their stop line."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if actor.motion == STATIC or not actor.active:
        return actor
    pos = min(actor.position + ego_speed(ego_velocity) * dt, actor.stop_line)
    return replace(actor, position=pos)


@dataclass(frozen=True)
class EgoState:
    position: tuple                  # (lateral, along)
    velocity: tuple = (0.0, 5.0, 0.0)
    controller_mode: str = CRUISE
    mode_timer: float = 0.0
    trigger: int = None

    @property
    def speed(self):
        return ego_speed(self.velocity)


def estimated_distance(det, ctl=ControllerParams()):
    return ctl.focal * ctl.sign_height / max(det.box[3], 1e-9)


def _qualifies(det, ctl):
    return det.cls == STOP_SIGN and det.score >= ctl.score and estimated_distance(det, ctl) < ctl.trigger_distance


def controller_step(recent, ego, dt, ctl=ControllerParams()):
    """(acceleration, next EgoState) from the detections of the last frames (oldest first)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    window = list(recent)[-ctl.window:]
    speed = ego.speed
    mode, timer, trigger = ego.controller_mode, ego.mode_timer + dt, ego.trigger
    if mode == CRUISE:
        hits = sum(any(_qualifies(d, ctl) for d in frame) for frame in window)
        if hits >= ctl.persist:
            mode, timer, trigger = BRAKING, 0.0, STOP_SIGN
    if mode in (CRUISE, PROCEED):
        latest = window[-1] if window else []
        target = ctl.cruise
        if any(d.cls == PEDESTRIAN and d.score >= ctl.score for d in latest):
            target = min(target, ctl.caution)
        accel = float(np.clip(ctl.gain * (target - speed), -ctl.accel_limit, ctl.accel_limit))
    elif mode == BRAKING:
        accel = -ctl.brake
    else:
        accel = 0.0
    new_speed = max(speed + accel * dt, 0.0)
    if mode == BRAKING and new_speed < ctl.stop_speed:
        new_speed, accel, mode, timer = 0.0, -speed / dt, STOPPED, 0.0
    elif mode == STOPPED and timer >= ctl.hold - 1e-9:
        mode, timer = PROCEED, 0.0
    x, y = ego.position
    pos = (x, y + new_speed * dt)
    return accel, EgoState(pos, (0.0, new_speed, 0.0), mode, timer, trigger)


# ---------------------------------------------------------------- world assembly

def _scenery(geom):
    """Static background world: buildings, parked cars and trees, no pedestrians or signs."""
    world = scene.sample_town(geom.scenery_seed, geom.town_preset)
    road = scene.Road(start=-30.0, end=geom.intersection + 80.0, intersection=geom.intersection)
    keep = [b for b in world.billboards if b.label is None and b.motif not in ("flat",)]
    shift = geom.intersection - world.road.intersection
    moved = [replace(b, center=(b.center[0], b.center[1] + shift, b.center[2])) for b in keep]
    return scene.SceneWorld(geom.town_preset, road, tuple(moved))


def _layout(cfg, rng):
    """Initial actors for a config; collusion depths solved for the activation viewpoint."""
    g = cfg.geometry
    motion = DYNAMIC if cfg.dynamic else STATIC
    start_y = g.sign_y - g.staging_offset
    kind = cfg.configuration
    tex = {"benign": NONE, "camellia": CAMELLIA, "patch": PATCH}
    if cfg.attack == "SINGLE":
        t = tex[kind.split("-")[0]] if kind != "single-benign" else NONE
        return [PedestrianActor(start_y, g.pedestrian_lateral, motion, t, FULL, g.stop_line, 11)]
    base, _, part = kind.partition("-")
    t = tex.get(base, NONE) if base != "collusion" else NONE
    left_tex = t if part in ("both", "left") else NONE
    right_tex = t if part in ("both", "right") else NONE
    xr = g.pedestrian_lateral
    xl = xr - scene.PED_WIDTH - g.pair_gap
    cam = scene.Camera((g.camera_lateral, start_y - g.activation_gap, scene.CAMERA_HEIGHT), focal=g.focal)
    left_y = scene.collusion_offset(cam, scene.torso_x_extent(xl), scene.torso_x_extent(xr), start_y)
    left_y = min(left_y, g.stop_line)
    return [PedestrianActor(left_y, xl, motion, left_tex, LEFT, g.stop_line, 21),
            PedestrianActor(start_y, xr, motion, right_tex, RIGHT, g.stop_line, 22)]


def _actor_billboard(actor, textures):
    insert = None
    if actor.texture == PATCH:
        insert = scene.torso_insert("patch", actor.region.lower())
    elif actor.texture == CAMELLIA:
        insert = scene.torso_insert(textures["camellia"], actor.region.lower())
    return scene.pedestrian(actor.lateral, actor.position, insert=insert, seed=actor.shirt_seed)


# ---------------------------------------------------------------- runs

@dataclass
class RunRecord:
    config: str
    seed: int
    frames: list = field(default_factory=list)
    stop_events: list = field(default_factory=list)
    success: bool = False
    termination: str = ""
    intersection: float = 0.0
    exit_position: float = 0.0
    config_hash: str = ""
    schema_version: int = SCHEMA_VERSION

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported RunRecord schema")
        return cls(**data)


def classify_success(record):
    """A stop-sign-attributed full stop before leaving the intersection."""
    return any(ev["trigger"] == STOP_SIGN and ev["position"] < record.exit_position
               for ev in record.stop_events)


def run_scenario(cfg, params, textures, ctl=ControllerParams(), timeout=120.0, frame_sink=None,
                 config_hash=""):
    """Simulate one run; ``textures`` maps "patch" and "camellia" to 64x64x3 grids."""
    g = cfg.geometry
    rng = np.random.default_rng([int(cfg.seed), 0x5EED])
    world0 = _scenery(g)
    actors = _layout(cfg, rng)
    actors = [replace(a, position=min(a.position + rng.uniform(-g.pedestrian_jitter, g.pedestrian_jitter),
                                      a.stop_line)) for a in actors]
    ego = EgoState((g.camera_lateral, rng.uniform(-g.ego_jitter, g.ego_jitter)), (0.0, ctl.cruise, 0.0))
    ctl = replace(ctl, focal=g.focal)
    patch = np.asarray(textures["patch"], dtype=np.float64)
    rec = RunRecord(cfg.name, int(cfg.seed), intersection=g.intersection,
                    exit_position=g.intersection + world0.road.cross_width, config_hash=config_hash)
    recent = []
    destination = g.intersection + g.destination_past
    n_frames = int(round(timeout / DT))
    for k in range(n_frames):
        if ego.position[1] >= destination:
            rec.termination = "DESTINATION_REACHED"
            break
        world = world0.with_billboards([_actor_billboard(a, textures) for a in actors])
        cam = scene.Camera((ego.position[0], ego.position[1], scene.CAMERA_HEIGHT), focal=g.focal)
        out = scene.render(world, cam, patch)
        image = np.clip(out.image + rng.normal(0.0, g.pixel_noise, out.image.shape), 0.0, 1.0)
        dets = decode(forward_one(params, image))
        if frame_sink is not None:
            frame_sink(k, image)
        recent = (recent + [dets])[-ctl.window:]
        rec.frames.append({
            "frame": k, "t": round(k * DT, 6), "position": ego.position[1], "speed": ego.speed,
            "mode": ego.controller_mode, "patch_pixels": int(len(out.texel_weights.pixel_index)),
            "pedestrians": [a.position for a in actors],
            "detections": [[d.cls, d.score, *d.box] for d in dets],
        })
        before = ego.controller_mode
        _, ego = controller_step(recent, ego, DT, ctl)
        if before == BRAKING and ego.controller_mode == STOPPED:
            rec.stop_events.append({"frame": k, "trigger": ego.trigger, "position": ego.position[1]})
        gap = max(a.position for a in actors) - ego.position[1]
        if cfg.dynamic and gap <= g.activation_gap:
            actors = [replace(a, active=True) for a in actors]
        actors = [pedestrian_step(a, ego.velocity, DT) for a in actors]
    else:
        rec.termination = "TIMEOUT"
    rec.success = rec.termination == "DESTINATION_REACHED" and classify_success(rec)
    return rec


def forward_one(params, image):
    return forward(params, image[None])[0]


def speed_trace(record):
    """(frame, t, speed, mode) rows of a run."""
    return [(f["frame"], f["t"], f["speed"], f["mode"]) for f in record.frames]


def mean_speed_before(record, window=20.0):
    """Mean per-frame ego speed while within ``window`` metres before the intersection."""
    speeds = [f["speed"] for f in record.frames
              if record.intersection - window <= f["position"] < record.intersection]
    return float(np.mean(speeds)) if speeds else float("nan")
