"""Scene parameter space, prior samplers with rejection, camera and labels.

A scene is a variable-length parameter vector: one background, one
directional light and 4-8 placed avatars.  Everything the rejection test
needs (ranges, field of view, pairwise overlap) is computed from the
parameters alone, without rendering.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import BBox, iou_matrix, to_array
from .seeding import splitmix64

PERSON_TYPES = ("pedestrian", "cyclist", "motorcyclist")


@dataclass(frozen=True)
class Avatar:
    person_type: str
    height_m: float
    aspect: float


def _build_avatars(count=20):
    table = []
    for i in range(count):
        if i < 14:
            frac = (splitmix64(i) % 1001) / 1000.0
            table.append(Avatar("pedestrian", 1.5 + 0.4 * frac, 0.4))
        elif i < 18:
            table.append(Avatar("cyclist", 1.75, 0.7))
        else:
            table.append(Avatar("motorcyclist", 1.6, 0.75))
    return tuple(table)


AVATARS = _build_avatars()


def avatar(avatar_id):
    return AVATARS[int(avatar_id) % len(AVATARS)]


def avatar_ids_of_type(person_type):
    return [i for i, a in enumerate(AVATARS) if a.person_type == person_type]


@dataclass(frozen=True)
class SceneConstraints:
    """Parameter ranges. Integer index ranges are half-open, all others closed."""

    model_count_range: tuple = (4, 8)
    background_count: int = 1726
    avatar_count: int = 20
    animations_per_avatar: int = 8
    angle_x_range: tuple = (-90.0, 90.0)
    angle_y_range: tuple = (-180.0, 180.0)
    angle_z_range: tuple = (-90.0, 90.0)
    light_intensity_range: tuple = (0.5, 2.0)
    light_angle_x_range: tuple = (-45.0, 45.0)
    light_angle_y_range: tuple = (-45.0, 45.0)
    depth_range: tuple = (4.0, 30.0)
    max_pairwise_overlap: float = 0.20

    def __post_init__(self):
        for name in ("model_count_range", "angle_x_range", "angle_y_range", "angle_z_range",
                     "light_intensity_range", "light_angle_x_range", "light_angle_y_range",
                     "depth_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if min(self.background_count, self.avatar_count, self.animations_per_avatar) < 1:
            raise ValueError("index ranges must be non-empty")
        if not 0.0 <= self.max_pairwise_overlap <= 1.0:
            raise ValueError("max_pairwise_overlap must lie in [0, 1]")
        if self.depth_range[0] <= 0:
            raise ValueError("depth range must be positive")


@dataclass(frozen=True)
class CameraModel:
    focal_px: float = 800.0
    cx: float = 480.0
    cy: float = 360.0
    height_m: float = 1.6
    width: int = 960
    height: int = 720

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal length must be positive")

    @property
    def image_size(self):
        return (self.width, self.height)

    def scaled(self, width, height):
        """Same viewpoint rendered at another (isotropically scaled) resolution."""
        s = width / self.width
        if abs(height / self.height - s) > 1e-12:
            raise ValueError("scaled camera must keep the aspect ratio")
        return replace(self, focal_px=self.focal_px * s, cx=self.cx * s, cy=self.cy * s,
                       width=int(width), height=int(height))


@dataclass(frozen=True)
class ModelInstance:
    avatar_id: int
    animation_id: int
    animation_time: float
    angle_x: float
    angle_y: float
    angle_z: float
    pos_x: float
    pos_z: float


@dataclass(frozen=True)
class SceneParams:
    background_id: int
    light_intensity: float
    light_angle_x: float
    light_angle_y: float
    instances: tuple
    seed: int = 0
    target: bool = False
    attempts: int = field(default=0, compare=False)

    def to_json(self):
        return {
            "backgroundId": self.background_id,
            "lightIntensity": self.light_intensity,
            "lightAngleX": self.light_angle_x,
            "lightAngleY": self.light_angle_y,
            "seed": self.seed,
            "instances": [
                {
                    "avatarId": m.avatar_id,
                    "animationId": m.animation_id,
                    "animationTime": m.animation_time,
                    "angleX": m.angle_x,
                    "angleY": m.angle_y,
                    "angleZ": m.angle_z,
                    "posX": m.pos_x,
                    "posZ": m.pos_z,
                }
                for m in self.instances
            ],
        }

    @classmethod
    def from_json(cls, obj, target=False):
        instances = tuple(
            ModelInstance(int(m["avatarId"]), int(m["animationId"]), float(m["animationTime"]),
                          float(m["angleX"]), float(m["angleY"]), float(m["angleZ"]),
                          float(m["posX"]), float(m["posZ"]))
            for m in obj["instances"]
        )
        return cls(int(obj["backgroundId"]), float(obj["lightIntensity"]), float(obj["lightAngleX"]),
                   float(obj["lightAngleY"]), instances, int(obj["seed"]), target)


def dump_jsonl(params_list, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in params_list:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def load_jsonl(path, target=False):
    with open(path, encoding="utf-8") as fh:
        return [SceneParams.from_json(json.loads(line), target) for line in fh if line.strip()]


@dataclass(frozen=True)
class GroundTruthLabel:
    boxes: tuple
    person_types: tuple

    def __post_init__(self):
        if len(self.boxes) != len(self.person_types):
            raise ValueError("one person type per box is required")

    def to_json(self):
        return {"boxes": [b.to_json() for b in self.boxes], "personTypes": list(self.person_types)}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(BBox.from_json(b) for b in obj["boxes"]), tuple(obj["personTypes"]))


class SamplingError(RuntimeError):
    """Raised when rejection sampling exhausts its attempt budget."""

    def __init__(self, message, violations=(), attempts=0):
        super().__init__(message)
        self.violations = list(violations)
        self.attempts = attempts


# -- projection and labels ---------------------------------------------------


def project_instance(camera, instance, avatar_height, aspect=None):
    """Pinhole projection of a standing model onto the image plane.

    The model's root sits on the ground plane at depth ``pos_z``; the camera
    looks horizontally from ``camera.height_m`` above the ground.
    """
    z = instance.pos_z
    if not z > 0:
        raise ValueError(f"instance depth must be positive, got {z}")
    if aspect is None:
        aspect = avatar(instance.avatar_id).aspect
    f = camera.focal_px
    h = f * avatar_height / z
    foot = camera.cy + f * camera.height_m / z
    center = camera.cx + f * instance.pos_x / z
    w = aspect * h
    return BBox(center - w / 2.0, foot - h, w, h)


def instance_box(camera, instance):
    return project_instance(camera, instance, avatar(instance.avatar_id).height_m)


def labels_of(params, camera):
    boxes = tuple(instance_box(camera, m) for m in params.instances)
    types = tuple(avatar(m.avatar_id).person_type for m in params.instances)
    return GroundTruthLabel(boxes, types)


# -- validation --------------------------------------------------------------


def _in_closed(v, rng):
    return rng[0] <= v <= rng[1]


def _in_index(v, n):
    return 0 <= v < n


def validate_scene(params, camera, constraints):
    """Return the list of constraint violations; empty means the scene is valid.

    Codes name the offending field, e.g. ``lightIntensity``,
    ``instance[2].angleY``, ``instance[1].fov`` or ``overlap[0,3]``.
    """
    c = constraints
    out = []
    n = len(params.instances)
    if not _in_closed(n, c.model_count_range):
        out.append("modelCount")
    if not _in_index(params.background_id, c.background_count):
        out.append("backgroundId")
    if not _in_closed(params.light_intensity, c.light_intensity_range):
        out.append("lightIntensity")
    if not _in_closed(params.light_angle_x, c.light_angle_x_range):
        out.append("lightAngleX")
    if not _in_closed(params.light_angle_y, c.light_angle_y_range):
        out.append("lightAngleY")

    boxes = []
    for i, m in enumerate(params.instances):
        tag = f"instance[{i}]"
        if not _in_index(m.avatar_id, c.avatar_count):
            out.append(f"{tag}.avatarId")
        if not _in_index(m.animation_id, c.animations_per_avatar):
            out.append(f"{tag}.animationId")
        if not 0.0 <= m.animation_time <= 1.0:
            out.append(f"{tag}.animationTime")
        if not _in_closed(m.angle_x, c.angle_x_range):
            out.append(f"{tag}.angleX")
        if not _in_closed(m.angle_y, c.angle_y_range):
            out.append(f"{tag}.angleY")
        if not _in_closed(m.angle_z, c.angle_z_range):
            out.append(f"{tag}.angleZ")
        if not _in_closed(m.pos_z, c.depth_range):
            out.append(f"{tag}.posZ")
        if m.pos_z <= 0:
            boxes.append(None)
            continue
        b = instance_box(camera, m)
        boxes.append(b)
        if b.x < 0 or b.y < 0 or b.x + b.w > camera.width or b.y + b.h > camera.height:
            out.append(f"{tag}.fov")

    valid = [i for i, b in enumerate(boxes) if b is not None]
    if len(valid) > 1:
        ious = iou_matrix(to_array([boxes[i] for i in valid]), to_array([boxes[i] for i in valid]))
        ii, jj = np.nonzero(np.triu(ious > c.max_pairwise_overlap, k=1))
        for a, b in zip(ii.tolist(), jj.tolist()):
            out.append(f"overlap[{valid[a]},{valid[b]}]")
    return out


# -- samplers ----------------------------------------------------------------


def _column_to_x(camera, u, z):
    """Ground X (meters) whose projection lands at image-column fraction ``u``."""
    return (u * camera.width - camera.cx) * z / camera.focal_px


def draw_scene(rng, camera, constraints):
    """One unconstrained proposal from the uniform prior (no rejection)."""
    c = constraints
    n = int(rng.integers(c.model_count_range[0], c.model_count_range[1] + 1))
    background = int(rng.integers(0, c.background_count))
    light = float(rng.uniform(*c.light_intensity_range))
    lax = float(rng.uniform(*c.light_angle_x_range))
    lay = float(rng.uniform(*c.light_angle_y_range))
    avatar_ids = rng.integers(0, c.avatar_count, size=n)
    anim_ids = rng.integers(0, c.animations_per_avatar, size=n)
    times = rng.uniform(0.0, 1.0, size=n)
    ax = rng.uniform(*c.angle_x_range, size=n)
    ay = rng.uniform(*c.angle_y_range, size=n)
    az = rng.uniform(*c.angle_z_range, size=n)
    z = rng.uniform(*c.depth_range, size=n)
    u = rng.uniform(0.0, 1.0, size=n)
    instances = tuple(
        ModelInstance(int(avatar_ids[i]), int(anim_ids[i]), float(times[i]), float(ax[i]),
                      float(ay[i]), float(az[i]), float(_column_to_x(camera, u[i], z[i])), float(z[i]))
        for i in range(n)
    )
    return SceneParams(background, light, lax, lay, instances)


def _rejection_loop(seed, camera, constraints, propose, max_attempts, target):
    rng = np.random.Generator(np.random.PCG64(seed))
    violations = []
    for attempt in range(1, max_attempts + 1):
        proposal = propose(rng)
        violations = validate_scene(proposal, camera, constraints)
        if not violations:
            return replace(proposal, seed=seed, target=target, attempts=attempt)
    raise SamplingError(
        f"no valid scene after {max_attempts} attempts (seed {seed})", violations, max_attempts
    )


def sample_scene(seed, camera, constraints, max_attempts=10_000):
    """Rejection-sample a valid scene from the uniform prior, deterministically in ``seed``."""
    return _rejection_loop(seed, camera, constraints,
                           lambda rng: draw_scene(rng, camera, constraints), max_attempts, False)


@dataclass(frozen=True)
class TargetPriorConfig:
    """Narrow mixture prior standing in for the unknown target-domain prior.

    Positions are drawn around ``clusters`` given as (image-column fraction,
    depth in meters) with Gaussian jitter; index ranges are half-open.
    """

    count_range: tuple = (4, 6)
    class_weights: tuple = (("pedestrian", 0.3), ("cyclist", 0.5), ("motorcyclist", 0.2))
    clusters: tuple = ((0.3, 7.0), (0.68, 9.0))
    cluster_jitter: tuple = (0.09, 1.2)
    background_range: tuple = (0, 432)
    animation_range: tuple = (0, 3)
    animation_time_range: tuple = (0.0, 1.0)
    angle_x_range: tuple = (-20.0, 20.0)
    angle_y_range: tuple = (-180.0, 180.0)
    angle_z_range: tuple = (-15.0, 15.0)
    light_intensity_range: tuple = (0.5, 0.9)
    light_angle_x_range: tuple = (-45.0, 45.0)
    light_angle_y_range: tuple = (-45.0, 45.0)

    def check_inside(self, constraints):
        c = constraints
        problems = []
        if not (c.model_count_range[0] <= self.count_range[0] <= self.count_range[1] <= c.model_count_range[1]):
            problems.append("count_range")
        if not (0 <= self.background_range[0] < self.background_range[1] <= c.background_count):
            problems.append("background_range")
        if not (0 <= self.animation_range[0] < self.animation_range[1] <= c.animations_per_avatar):
            problems.append("animation_range")
        for name, outer in (("angle_x_range", c.angle_x_range), ("angle_y_range", c.angle_y_range),
                            ("angle_z_range", c.angle_z_range),
                            ("light_intensity_range", c.light_intensity_range),
                            ("light_angle_x_range", c.light_angle_x_range),
                            ("light_angle_y_range", c.light_angle_y_range),
                            ("animation_time_range", (0.0, 1.0))):
            lo, hi = getattr(self, name)
            if not outer[0] <= lo <= hi <= outer[1]:
                problems.append(name)
        for u, z in self.clusters:
            if not (0.0 <= u <= 1.0 and c.depth_range[0] <= z <= c.depth_range[1]):
                problems.append("clusters")
        for name, w in self.class_weights:
            if name not in PERSON_TYPES or w < 0:
                problems.append("class_weights")
        if sum(w for _, w in self.class_weights) <= 0:
            problems.append("class_weights")
        if problems:
            raise ValueError(f"target prior outside constraints: {sorted(set(problems))}")


def _uniform(rng, bounds, size=None):
    lo, hi = bounds
    return rng.uniform(lo, hi, size=size)


def draw_target_scene(rng, camera, constraints, prior):
    """One proposal from the narrow target prior (no rejection)."""
    c = constraints
    n = int(rng.integers(prior.count_range[0], prior.count_range[1] + 1))
    background = int(rng.integers(*prior.background_range))
    light = float(_uniform(rng, prior.light_intensity_range))
    lax = float(_uniform(rng, prior.light_angle_x_range))
    lay = float(_uniform(rng, prior.light_angle_y_range))
    names = [name for name, _ in prior.class_weights]
    weights = np.array([w for _, w in prior.class_weights], dtype=np.float64)
    classes = rng.choice(len(names), size=n, p=weights / weights.sum())
    pools = [[i for i in avatar_ids_of_type(name) if i < c.avatar_count] for name in names]
    avatar_ids = [pools[k][int(rng.integers(0, len(pools[k])))] for k in classes]
    anim_ids = rng.integers(prior.animation_range[0], prior.animation_range[1], size=n)
    times = _uniform(rng, prior.animation_time_range, n)
    ax = _uniform(rng, prior.angle_x_range, n)
    ay = _uniform(rng, prior.angle_y_range, n)
    az = _uniform(rng, prior.angle_z_range, n)
    which = rng.integers(0, len(prior.clusters), size=n)
    centers = np.array(prior.clusters, dtype=np.float64)[which]
    jitter = rng.normal(size=(n, 2)) * np.array(prior.cluster_jitter, dtype=np.float64)
    u = np.clip(centers[:, 0] + jitter[:, 0], 0.0, 1.0)
    z = np.clip(centers[:, 1] + jitter[:, 1], *c.depth_range)
    instances = tuple(
        ModelInstance(int(avatar_ids[i]), int(anim_ids[i]), float(times[i]), float(ax[i]),
                      float(ay[i]), float(az[i]), float(_column_to_x(camera, u[i], z[i])), float(z[i]))
        for i in range(n)
    )
    return SceneParams(background, light, lax, lay, instances, target=True)


def sample_target_scene(seed, camera, constraints, prior=None, max_attempts=10_000):
    """Rejection-sample a target-domain scene; same constraints as :func:`sample_scene`."""
    prior = prior or TargetPriorConfig()
    prior.check_inside(constraints)
    return _rejection_loop(seed, camera, constraints,
                           lambda rng: draw_target_scene(rng, camera, constraints, prior),
                           max_attempts, True)


def mean_pairwise_iou(params, camera):
    boxes = to_array(labels_of(params, camera).boxes)
    n = len(boxes)
    if n < 2:
        return 0.0
    m = iou_matrix(boxes, boxes)
    return float(m[np.triu_indices(n, k=1)].mean())

