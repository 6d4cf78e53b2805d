"""Billboard renderer: procedural backgrounds plus composited avatar sprites.

Sprites are articulated 2D figures drawn from capsules, discs and rings.
Shape coverage is decided in floating point on quantized pose values; all
colour arithmetic (shading, compositing, noise) is integer, so a scene
renders to the same bytes on every run.
"""

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .boxes import BBox
from .scene import avatar, instance_box
from .seeding import derive, splitmix64

BACKGROUND_STYLES = ("poles", "buildings", "foliage", "open")
_Q = 4096  # fixed-point resolution for trig and pose values


@dataclass(frozen=True)
class ImageBuffer:
    pixels: np.ndarray  # (height, width, 3) uint8, row-major RGB

    def __post_init__(self):
        p = self.pixels
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] != 3:
            raise ValueError("pixels must be an (H, W, 3) uint8 array")

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @classmethod
    def blank(cls, width, height, value=0):
        return cls(np.full((height, width, 3), value, dtype=np.uint8))

    def to_ppm(self):
        header = f"P6\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + np.ascontiguousarray(self.pixels).tobytes()

    @classmethod
    def from_ppm(cls, data):
        tokens = []
        pos = 0
        while len(tokens) < 4:
            while data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos) + 1
                continue
            start = pos
            while not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
        if tokens[0] != b"P6" or int(tokens[3]) != 255:
            raise ValueError("only binary P6 PPM with maxval 255 is supported")
        w, h = int(tokens[1]), int(tokens[2])
        pos += 1
        raw = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
        if raw.size != w * h * 3:
            raise ValueError("truncated PPM payload")
        return cls(raw.reshape(h, w, 3).copy())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_ppm())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_ppm(fh.read())


@dataclass(frozen=True)
class RenderStyle:
    """Appearance knobs. The target domain uses striped clothing and sensor noise."""

    striped_clothing: bool = False
    noise_amplitude: int = 0
    background_count: int = 1726
    background_dir: str = None


SOURCE_STYLE = RenderStyle()
TARGET_STYLE = RenderStyle(striped_clothing=True, noise_amplitude=6)


def _q(v):
    return round(v * _Q) / _Q


# -- backgrounds -------------------------------------------------------------


def background_style(background_id, background_count=1726):
    return BACKGROUND_STYLES[(background_id * len(BACKGROUND_STYLES)) // background_count]


@lru_cache(maxsize=64)
def _procedural_background(background_id, width, height, background_count):
    rng = np.random.Generator(np.random.PCG64(derive(0xB4C6, background_id)))
    style = background_style(background_id, background_count)
    horizon = height // 2
    img = np.zeros((height, width, 3), dtype=np.int32)

    sky_top = rng.integers(90, 200, size=3)
    sky_bot = rng.integers(150, 235, size=3)
    ground_top = rng.integers(70, 140, size=3)
    ground_bot = rng.integers(40, 100, size=3)
    rows = np.arange(height, dtype=np.int32)[:, None]
    sky = sky_top[None, :] + ((sky_bot - sky_top)[None, :] * rows[:horizon]) // max(horizon, 1)
    below = rows[horizon:] - horizon
    span = max(height - horizon, 1)
    ground = ground_top[None, :] + ((ground_bot - ground_top)[None, :] * below) // span
    img[:horizon] = sky[:, None, :]
    img[horizon:] = ground[:, None, :]

    if style == "poles":
        for _ in range(int(rng.integers(6, 12))):
            pw = max(1, int(rng.integers(1, 4)) * width // 160)
            px = int(rng.integers(0, width - pw))
            top = int(rng.integers(height // 8, horizon))
            bottom = int(rng.integers(horizon, height - height // 10))
            img[top:bottom, px:px + pw] = rng.integers(20, 90, size=3)
            if rng.random() < 0.5:
                head = max(2, pw * 2)
                img[top:top + head, max(0, px - pw):px + 2 * pw] = rng.integers(150, 255, size=3)
    elif style == "buildings":
        x = 0
        while x < width:
            bw = int(rng.integers(width // 10, width // 4))
            top = int(rng.integers(height // 10, horizon - height // 10))
            img[top:horizon, x:x + bw] = rng.integers(60, 180, size=3)
            win = rng.integers(150, 240, size=3)
            step = max(2, bw // 5)
            for wy in range(top + step // 2, horizon - step, step):
                for wx in range(x + step // 2, min(x + bw, width) - step // 2, step):
                    img[wy:wy + max(1, step // 2), wx:wx + max(1, step // 2)] = win
            x += bw
    elif style == "foliage":
        cell = max(2, width // 120)
        coarse = rng.integers(-40, 41, size=(height // cell + 1, width // cell + 1, 3))
        tex = np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:height, :width]
        img[: horizon + height // 8] += tex[: horizon + height // 8] * np.array([1, 2, 1]) // 2
    # "open" keeps the plain gradient with a road stripe
    road = rng.integers(35, 80, size=3)
    y0 = horizon + (height - horizon) // 3
    img[y0:y0 + max(1, height // 40)] = road
    return np.clip(img, 0, 255).astype(np.uint8)


def _listed_backgrounds(directory):
    exts = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(exts))


def load_background(background_id, width, height, style=SOURCE_STYLE):
    if style.background_dir:
        files = _listed_backgrounds(style.background_dir)
        if not 0 <= background_id < len(files):
            raise IndexError(f"background {background_id} outside [0, {len(files)})")
        path = os.path.join(style.background_dir, files[background_id])
        if path.lower().endswith(".ppm"):
            img = ImageBuffer.load(path)
        else:
            from PIL import Image

            with Image.open(path) as im:
                img = ImageBuffer(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())
        return resample(img, width, height).pixels.copy()
    if not 0 <= background_id < style.background_count:
        raise IndexError(f"background {background_id} outside [0, {style.background_count})")
    return _procedural_background(int(background_id), int(width), int(height),
                                  int(style.background_count)).copy()


# -- sprites -----------------------------------------------------------------

# leg swing, knee bend, arm swing, left arm raise, right arm raise (degrees)
_ANIMATIONS = (
    (22, 20, 25, 0, 0),      # walk
    (30, 45, 45, 20, 20),    # run
    (10, 60, 10, 150, 150),  # jump
    (6, 5, 15, 160, 20),     # cheer
    (8, 5, 8, 140, 0),       # phone call
    (5, 5, 40, 70, 70),      # applaud
    (3, 3, 5, 5, 5),         # idle
    (15, 80, 20, 40, 40),    # crouch
)

_SKIN = ((224, 172, 105), (198, 134, 66), (141, 85, 36), (255, 219, 172))
_SHIRT = ((200, 30, 30), (30, 90, 200), (40, 150, 60), (230, 200, 40),
          (120, 40, 150), (240, 240, 240), (30, 30, 30), (230, 120, 30))
_PANTS = ((40, 40, 60), (20, 20, 20), (90, 70, 50), (60, 80, 120), (110, 110, 110), (150, 130, 90))
_STRIPE = (250, 250, 90)


def _palette(avatar_id):
    h = splitmix64(avatar_id + 101)
    return (_SKIN[h % len(_SKIN)], _SHIRT[(h >> 8) % len(_SHIRT)],
            _PANTS[(h >> 16) % len(_PANTS)], _SHIRT[(h >> 24) % len(_SHIRT)])


def _limb(start, angle_deg, length):
    a = math.radians(angle_deg)
    return (start[0] + length * math.sin(a), start[1] + length * math.cos(a))


def _knee_between(hip, foot, seg, forward=1.0):
    dx, dy = foot[0] - hip[0], foot[1] - hip[1]
    d = math.hypot(dx, dy)
    mx, my = (hip[0] + foot[0]) / 2, (hip[1] + foot[1]) / 2
    if d >= 2 * seg or d == 0:
        return (mx, my)
    off = math.sqrt(seg * seg - d * d / 4)
    nx, ny = -dy / d, dx / d
    if nx * forward < 0:
        nx, ny = -nx, -ny
    return (mx + off * nx, my + off * ny)


def _figure(instance):
    """Primitive list in body units (height 1, x about the box centre, y down).

    Each primitive is (kind, colour_slot, geometry); kinds are ``cap``
    (segment with radius), ``disc`` and ``ring``.
    """
    kind = avatar(instance.avatar_id).person_type
    anim = _ANIMATIONS[instance.animation_id % len(_ANIMATIONS)]
    leg_amp, knee_amp, arm_amp, raise_l, raise_r = anim
    phase = 2 * math.pi * _q(instance.animation_time)
    s = _q(math.sin(phase))
    prims = []
    if kind == "pedestrian":
        hip, shoulder = (0.0, 0.5), (0.0, 0.2)
        legs = []
        for side in (1, -1):
            thigh = side * leg_amp * s
            knee = _limb(hip, thigh, 0.25)
            bend = knee_amp * max(0.0, side * s)
            legs.append((knee, _limb(knee, thigh - bend, 0.25)))
        lowest = max(legs[0][1][1], legs[1][1][1])
        dy = 0.985 - lowest
        shift = lambda p: (p[0], p[1] + dy)  # noqa: E731
        for knee, foot in legs:
            prims.append(("cap", "pants", (shift(hip), shift(knee), 0.045)))
            prims.append(("cap", "pants", (shift(knee), shift(foot), 0.04)))
        prims.append(("cap", "shirt", (shift(shoulder), shift((0.0, 0.47)), 0.08)))
        prims.append(("disc", "skin", (shift((0.0, 0.085)), 0.07)))
        for side, lift in ((1, raise_l), (-1, raise_r)):
            upper = side * (lift + arm_amp * -s * side)
            elbow = _limb(shoulder, upper, 0.16)
            hand = _limb(elbow, upper + side * 20, 0.15)
            prims.append(("cap", "shirt", (shift(shoulder), shift(elbow), 0.035)))
            prims.append(("cap", "skin", (shift(elbow), shift(hand), 0.03)))
        return prims

    motor = kind == "motorcyclist"
    r_wheel = 0.17 if motor else 0.16
    wx = 0.22 if motor else 0.2
    rear, front = (-wx, 1.0 - r_wheel - 0.01), (wx, 1.0 - r_wheel - 0.01)
    thick = 0.045 if motor else 0.025
    prims.append(("ring", "frame", (rear, r_wheel, thick)))
    prims.append(("ring", "frame", (front, r_wheel, thick)))
    seat = (-0.06, 0.56)
    bar = (0.15, 0.5)
    if motor:
        prims.append(("disc", "accent", ((0.0, 0.66), 0.11)))
        prims.append(("cap", "accent", ((-0.12, 0.64), (0.12, 0.64), 0.08)))
    else:
        crank = (0.0, rear[1])
        prims.append(("cap", "frame", (rear, seat, 0.018)))
        prims.append(("cap", "frame", (seat, crank, 0.018)))
        prims.append(("cap", "frame", (crank, front, 0.018)))
        prims.append(("cap", "frame", (front, bar, 0.018)))
    hip = (seat[0], seat[1] - 0.03)
    shoulder = (0.04, 0.28)
    pedal_c = (0.0, rear[1])
    for side in (1, -1):
        if motor:
            foot = (0.05, 0.8)
        else:
            ang = phase + (0 if side > 0 else math.pi)
            foot = (pedal_c[0] + 0.07 * _q(math.cos(ang)), pedal_c[1] + 0.07 * _q(math.sin(ang)))
        knee = _knee_between(hip, foot, 0.21, forward=1.0)
        prims.append(("cap", "pants", (hip, knee, 0.045)))
        prims.append(("cap", "pants", (knee, foot, 0.04)))
    prims.append(("cap", "shirt", (hip, shoulder, 0.08)))
    prims.append(("disc", "skin" if not motor else "accent", ((0.07, 0.16), 0.075 if motor else 0.065)))
    elbow = ((shoulder[0] + bar[0]) / 2 + 0.02, (shoulder[1] + bar[1]) / 2 - 0.04)
    prims.append(("cap", "shirt", (shoulder, elbow, 0.035)))
    prims.append(("cap", "skin", (elbow, bar, 0.03)))
    return prims


def _seg_dist2(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0:
        t = 0.0
    else:
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0)
    qx = px - (ax + t * dx)
    qy = py - (ay + t * dy)
    return qx * qx + qy * qy


def sprite(instance, box, striped=False):
    """Rasterize an instance into its box.

    Returns (x0, y0, rgba) where rgba is an (h, w, 4) uint8 array placed at
    integer pixel offset (x0, y0). Alpha is 0 or 255; only pixels whose
    centres fall inside ``box`` can be opaque.
    """
    x0, y0 = math.floor(box.x), math.floor(box.y)
    x1, y1 = math.ceil(box.x + box.w), math.ceil(box.y + box.h)
    cols = np.arange(x0, x1, dtype=np.float64) + 0.5
    rows = np.arange(y0, y1, dtype=np.float64) + 0.5
    u = (cols - box.x) / box.h - box.w / box.h / 2
    v = (rows - box.y) / box.h
    px, py = np.meshgrid(u, v)
    inside = (px >= -box.w / box.h / 2) & (px <= box.w / box.h / 2) & (py >= 0) & (py <= 1)

    cy = _q(math.cos(math.radians(instance.angle_y)))
    face = math.copysign(0.6 + 0.4 * abs(cy), cy if cy != 0 else 1.0)
    lean = 0.12 * _q(math.sin(math.radians(instance.angle_x))) + 0.06 * _q(math.sin(math.radians(instance.angle_z)))
    fx = (px - lean * (1.0 - py)) / face
    fy = py

    skin, shirt, pants, accent = _palette(instance.avatar_id)
    colours = {"skin": skin, "shirt": shirt, "pants": pants, "accent": accent, "frame": (70, 70, 80)}
    h, w = px.shape
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    for kind, slot, geom in _figure(instance):
        if kind == "cap":
            a, b, r = geom
            mask = _seg_dist2(fx, fy, a, b) <= r * r
        elif kind == "disc":
            (cx_, cy_), r = geom
            mask = (fx - cx_) ** 2 + (fy - cy_) ** 2 <= r * r
        else:
            (cx_, cy_), r, t = geom
            d2 = (fx - cx_) ** 2 + (fy - cy_) ** 2
            mask = (d2 <= (r + t / 2) ** 2) & (d2 >= (r - t / 2) ** 2)
        mask &= inside
        colour = np.array(colours[slot], dtype=np.uint8)
        if striped and slot == "shirt":
            band = (np.floor(fy / 0.05).astype(np.int64) % 2) == 1
            rgba[mask & band, :3] = _STRIPE
            rgba[mask & ~band, :3] = colour
        else:
            rgba[mask, :3] = colour
        rgba[mask, 3] = 255
    return x0, y0, rgba


# -- scene rendering ---------------------------------------------------------


def _shade_sprite(rgba, lax, lay):
    h, w = rgba.shape[:2]
    gx = _q(0.35 * math.sin(math.radians(lay)))
    gy = _q(0.35 * math.sin(math.radians(lax)))
    cu = (np.arange(w, dtype=np.float64) + 0.5) / max(w, 1) - 0.5
    cv = (np.arange(h, dtype=np.float64) + 0.5) / max(h, 1) - 0.5
    factor = np.rint(256 * (1.0 + gx * cu[None, :] + gy * cv[:, None])).astype(np.int32)
    rgb = rgba[:, :, :3].astype(np.int32)
    return np.clip((rgb * factor[:, :, None] + 128) >> 8, 0, 255)


def render(params, camera, style=None):
    """Render a scene to an :class:`ImageBuffer` (pure function of its inputs)."""
    style = style or (TARGET_STYLE if params.target else SOURCE_STYLE)
    W, H = camera.width, camera.height
    img = load_background(params.background_id, W, H, style).astype(np.int32)

    order = sorted(range(len(params.instances)), key=lambda i: (-params.instances[i].pos_z, i))
    for i in order:
        m = params.instances[i]
        box = instance_box(camera, m)
        x0, y0, rgba = sprite(m, box, striped=style.striped_clothing)
        shaded = _shade_sprite(rgba, params.light_angle_x, params.light_angle_y)
        h, w = rgba.shape[:2]
        ys, xs = max(0, -y0), max(0, -x0)
        ye, xe = min(h, H - y0), min(w, W - x0)
        if ye <= ys or xe <= xs:
            continue
        region = img[y0 + ys:y0 + ye, x0 + xs:x0 + xe]
        alpha = rgba[ys:ye, xs:xe, 3:4].astype(np.int32)
        fg = shaded[ys:ye, xs:xe]
        region[...] = (alpha * fg + (255 - alpha) * region + 127) // 255

    gain = int(round(256 * params.light_intensity))
    img = np.clip((img * gain + 128) >> 8, 0, 255)
    if style.noise_amplitude > 0:
        rng = np.random.Generator(np.random.PCG64(derive(params.seed, "sensor-noise")))
        a = int(style.noise_amplitude)
        img = np.clip(img + rng.integers(-a, a + 1, size=img.shape), 0, 255)
    return ImageBuffer(img.astype(np.uint8))


# -- resampling --------------------------------------------------------------


def resample(image, width, height):
    """Bilinear resample to exactly (width, height), pixel-centre aligned."""
    src = image.pixels
    if src.shape[1] == width and src.shape[0] == height:
        return ImageBuffer(src.copy())
    sh, sw = src.shape[:2]
    ys = np.clip((np.arange(height) + 0.5) * (sh / height) - 0.5, 0, sh - 1)
    xs = np.clip((np.arange(width) + 0.5) * (sw / width) - 0.5, 0, sw - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    f = src.astype(np.float64)
    top = f[y0][:, x0] * (1 - wx) + f[y0][:, x1] * wx
    bot = f[y1][:, x0] * (1 - wx) + f[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def preprocess(image, boxes, target_w=960, target_h=720):
    """Isotropically scale into (target_w, target_h), zero-padding right/bottom.

    Returns the new image and the boxes mapped by the same scale factor.
    """
    if target_w <= 0 or target_h <= 0:
        raise ValueError("target dimensions must be positive")
    if image.width == 0 or image.height == 0:
        raise ValueError("image is empty")
    if image.width == target_w and image.height == target_h:
        return image, list(boxes)
    s = min(target_w / image.width, target_h / image.height)
    new_w = min(target_w, int(round(image.width * s)))
    new_h = min(target_h, int(round(image.height * s)))
    scaled = resample(image, new_w, new_h)
    out = np.zeros((target_h, target_w, 3), dtype=np.uint8)
    out[:new_h, :new_w] = scaled.pixels
    return ImageBuffer(out), [scale_box(b, s) for b in boxes]


def preprocess_scale(width, height, target_w=960, target_h=720):
    return min(target_w / width, target_h / height)


def scale_box(box, s):
    return BBox(box.x * s, box.y * s, box.w * s, box.h * s)


def downsample_for_discriminator(image, size=(96, 72)):
    """Bilinear downsample a 4:3 image to the discriminator resolution."""
    if image.width * 3 != image.height * 4:
        raise ValueError(f"expected a 4:3 image, got {image.width}x{image.height}")
    return resample(image, size[0], size[1])
