"""Synthetic datasets with controlled temporal structure.

Video taxonomy: 16 classes.  Classes 0..7 are temporal, organized as four
reversal pairs (slide-right/slide-left, slide-down/slide-up,
approach/recede, grow/shrink): time-reversing a sample of one class
yields, byte for byte, a sample of its partner generated from the same
seed.  A sample's frame multiset therefore never identifies which member
of a pair it came from.  Classes 8..15 are static: four shapes times two
warm colors, recoverable from any single frame, with motion drawn
independently of the label.

Temporal-class objects use a cool color pool and static-class objects a
warm one, so color never leaks temporal identity and static labels stay
single-frame decodable.

Backgrounds are value-noise textures rather than flat fills: dense flow
estimation needs gradient structure to lock the static regions to zero.

The image suite is a background-bias analog: 9 foreground classes, each
paired at train time with one of 9 hue-coded background families, with
eval modes that keep, remove, or swap the background.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

TAXONOMY_VERSION = 2

TEMPORAL_CLASSES = (
    "slide-right", "slide-left", "slide-down", "slide-up",
    "approach", "recede", "grow", "shrink",
)
STATIC_SHAPES = ("disk", "square", "triangle", "diamond")
STATIC_COLORS = ("red", "yellow")
STATIC_CLASSES = tuple(f"{s}-{c}" for s in STATIC_SHAPES for c in STATIC_COLORS)
CLASS_NAMES = TEMPORAL_CLASSES + STATIC_CLASSES

TEMPORAL_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7))

# cool pool for temporal objects, warm fills for static ones
COOL_COLORS = np.array([
    [0.20, 0.45, 0.95],
    [0.10, 0.75, 0.70],
    [0.25, 0.85, 0.35],
    [0.05, 0.55, 0.85],
    [0.45, 0.90, 0.80],
])
WARM_FILLS = {"red": (0.95, 0.20, 0.15), "yellow": (0.95, 0.85, 0.12)}

MIX_MODES = ("Original", "OnlyFG", "MixedSame", "MixedRand")


def partner_class(class_id):
    """Reversal partner for temporal classes; static classes map to themselves."""
    if class_id < 8:
        return class_id ^ 1
    return class_id


@dataclass(frozen=True)
class DataConfig:
    frames: int = 8
    size: int = 32
    channels: int = 3
    train_per_class: int = 250
    test_per_class: int = 60

    def __post_init__(self):
        if self.frames < 2 or self.size < 16 or self.channels != 3:
            raise ConfigError("DataConfig: frames >= 2, size >= 16, channels == 3")

    def digest(self):
        text = f"{TAXONOMY_VERSION}|{self.frames}|{self.size}|{self.channels}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, H, W, 3) f32 in [0, 1]
    class_id: int
    annotation: dict


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W, 3) f32 in [0, 1]
    fg_class: int
    background_id: int
    mix_mode: str


# ---------------------------------------------------------------------------
# rendering primitives
# ---------------------------------------------------------------------------


def value_noise(rng, size, cells=(4, 8)):
    """Multi-scale bilinear value noise in [0, 1]."""
    out = np.zeros((size, size))
    for cell in cells:
        n = size // cell + 2
        coarse = rng.random((n, n))
        coords = np.linspace(0.0, n - 2.0, size)
        i0 = np.floor(coords).astype(int)
        frac = coords - i0
        fr, fc = frac[:, None], frac[None, :]
        r0, c0 = i0[:, None], i0[None, :]
        out += ((1 - fr) * (1 - fc) * coarse[r0, c0]
                + (1 - fr) * fc * coarse[r0, c0 + 1]
                + fr * (1 - fc) * coarse[r0 + 1, c0]
                + fr * fc * coarse[r0 + 1, c0 + 1])
    out /= len(cells)
    lo, hi = out.min(), out.max()
    return (out - lo) / max(hi - lo, 1e-9)


def textured_background(rng, size):
    """Dim, nearly gray noise texture (H, W, 3); foregrounds stay separable
    because its per-pixel channel spread is kept small."""
    base = 0.10 + 0.35 * value_noise(rng, size)
    tint = 1.0 + 0.08 * (rng.random(3) - 0.5)
    return np.clip(base[..., None] * tint[None, None, :], 0.0, 1.0)


def _shape_sdf(shape, px, py, cx, cy, r):
    dx, dy = px - cx, py - cy
    if shape == "disk":
        return np.hypot(dx, dy) - r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - r * 0.9
    if shape == "diamond":
        return (np.abs(dx) + np.abs(dy)) / np.sqrt(2.0) - r * 0.9
    if shape == "triangle":
        # upward equilateral triangle via three half-planes, inradius r/1.6
        ri = r / 1.6
        d = None
        for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            nx, ny = np.cos(ang), np.sin(ang)
            plane = nx * dx + ny * dy - ri
            d = plane if d is None else np.maximum(d, plane)
        return d
    raise InputError(f"unknown shape {shape!r}")


def draw_shape(canvas, shape, cx, cy, r, color):
    """Alpha-composite an anti-aliased shape onto canvas in place."""
    size = canvas.shape[0]
    py, px = np.mgrid[0:size, 0:size].astype(np.float64)
    sdf = _shape_sdf(shape, px, py, cx, cy, r)
    cover = np.clip(0.5 - sdf, 0.0, 1.0)
    canvas *= (1.0 - cover)[..., None]
    canvas += cover[..., None] * np.asarray(color)[None, None, :]


# ---------------------------------------------------------------------------
# temporal video classes
# ---------------------------------------------------------------------------


def _slide_trajectory(rng, cfg, axis):
    t, size = cfg.frames, cfg.size
    r = rng.uniform(3.5, 4.5)
    v_main = rng.uniform(1.5, 2.6)
    v_cross = rng.uniform(-0.4, 0.4)
    span = v_main * (t - 1)
    lo = r + 1.5
    hi = size - r - 1.5 - span
    main0 = rng.uniform(lo, hi)
    cross0 = rng.uniform(r + 2.5, size - r - 2.5 - abs(v_cross) * (t - 1))
    if v_cross < 0:
        cross0 -= v_cross * (t - 1)
    color = COOL_COLORS[rng.integers(len(COOL_COLORS))]
    centers = []
    for j in range(t):
        main = main0 + v_main * j
        cross = cross0 + v_cross * j
        centers.append((main, cross) if axis == "x" else (cross, main))
    velocity = (v_main, v_cross) if axis == "x" else (v_cross, v_main)
    return {
        "objects": [{"shape": "disk", "color": color, "radius": [r] * t,
                     "centers": centers}],
        "velocity": velocity,
    }


def _approach_trajectory(rng, cfg):
    t, size = cfg.frames, cfg.size
    r = rng.uniform(2.6, 3.2)
    v = rng.uniform(0.6, 0.85)
    closure = 2 * v * (t - 1)
    # clearance 2 px at closest pass, margin 2 px from canvas edges
    sep_min = closure + 2 * r + 2.0
    sep_max = size - 2 * r - 4.0
    sep0 = rng.uniform(sep_min, sep_max)
    mid = size / 2.0
    y = rng.uniform(r + 2.5, size - r - 2.5)
    ca = COOL_COLORS[rng.integers(len(COOL_COLORS))]
    cb = COOL_COLORS[rng.integers(len(COOL_COLORS))]
    left, right = [], []
    for j in range(t):
        sep = sep0 - 2 * v * j
        left.append((mid - sep / 2, y))
        right.append((mid + sep / 2, y))
    return {
        "objects": [
            {"shape": "disk", "color": ca, "radius": [r] * t, "centers": left},
            {"shape": "disk", "color": cb, "radius": [r] * t, "centers": right},
        ],
        "velocity": (v, 0.0),
    }


def _grow_trajectory(rng, cfg):
    t, size = cfg.frames, cfg.size
    r0 = rng.uniform(2.2, 3.0)
    dr = rng.uniform(0.5, 0.75)
    rmax = r0 + dr * (t - 1)
    cx = rng.uniform(rmax + 1.5, size - rmax - 1.5)
    cy = rng.uniform(rmax + 1.5, size - rmax - 1.5)
    color = COOL_COLORS[rng.integers(len(COOL_COLORS))]
    return {
        "objects": [{"shape": "disk", "color": color,
                     "radius": [r0 + dr * j for j in range(t)],
                     "centers": [(cx, cy)] * t}],
        "velocity": (dr, dr),
    }


def _temporal_base_trajectory(base_class, rng, cfg):
    if base_class == 0:
        return _slide_trajectory(rng, cfg, "x")
    if base_class == 2:
        return _slide_trajectory(rng, cfg, "y")
    if base_class == 4:
        return _approach_trajectory(rng, cfg)
    if base_class == 6:
        return _grow_trajectory(rng, cfg)
    raise InputError(f"not a base temporal class: {base_class}")


def _render_trajectory(traj, background, cfg):
    frames = np.empty((cfg.frames, cfg.size, cfg.size, 3), dtype=np.float32)
    for j in range(cfg.frames):
        canvas = background.copy()
        for obj in traj["objects"]:
            cx, cy = obj["centers"][j]
            draw_shape(canvas, obj["shape"], cx, cy, obj["radius"][j], obj["color"])
        frames[j] = canvas
    return frames


def gen_temporal_video(class_id, seed, cfg: DataConfig = DataConfig()):
    """Render one temporal-class sample.  Odd classes reverse their even
    partner's trajectory frame for frame, from the same random draws."""
    if not 0 <= class_id < 8:
        raise InputError(f"gen_temporal_video: class {class_id} is not temporal")
    base = class_id & ~1
    rng = np.random.default_rng((TAXONOMY_VERSION, base, int(seed)))
    background = textured_background(rng, cfg.size)
    traj = _temporal_base_trajectory(base, rng, cfg)
    if class_id & 1:
        traj = {
            "objects": [
                {**obj, "radius": obj["radius"][::-1], "centers": obj["centers"][::-1]}
                for obj in traj["objects"]
            ],
            "velocity": tuple(-v for v in traj["velocity"]),
        }
    frames = _render_trajectory(traj, background, cfg)
    annotation = {
        "kind": CLASS_NAMES[class_id],
        "centers": [obj["centers"] for obj in traj["objects"]],
        "radius": [obj["radius"] for obj in traj["objects"]],
        "velocity": traj["velocity"],
    }
    return VideoSample(frames=frames, class_id=class_id, annotation=annotation)


# ---------------------------------------------------------------------------
# static video classes
# ---------------------------------------------------------------------------


def gen_static_video(class_id, seed, cfg: DataConfig = DataConfig()):
    """Shape-and-color class; motion direction independent of the label."""
    if not 8 <= class_id < 16:
        raise InputError(f"gen_static_video: class {class_id} is not static")
    shape = STATIC_SHAPES[(class_id - 8) // 2]
    color_name = STATIC_COLORS[(class_id - 8) % 2]
    rng = np.random.default_rng((TAXONOMY_VERSION, class_id, int(seed)))
    background = textured_background(rng, cfg.size)

    t, size = cfg.frames, cfg.size
    # Large and slow relative to the temporal-class objects: size, speed,
    # and warm fill give three independent cues that the label is static.
    r = rng.uniform(6.2, 7.6)
    vx = rng.uniform(-1.0, 1.0)
    vy = rng.uniform(-1.0, 1.0)
    margin = r + 2.0
    spanx, spany = vx * (t - 1), vy * (t - 1)
    cx0 = rng.uniform(margin + max(0.0, -spanx), size - margin - max(0.0, spanx))
    cy0 = rng.uniform(margin + max(0.0, -spany), size - margin - max(0.0, spany))

    centers = [(cx0 + vx * j, cy0 + vy * j) for j in range(t)]
    frames = np.empty((t, size, size, 3), dtype=np.float32)
    fill = WARM_FILLS[color_name]
    for j in range(t):
        canvas = background.copy()
        draw_shape(canvas, shape, centers[j][0], centers[j][1], r, fill)
        frames[j] = canvas
    annotation = {
        "kind": CLASS_NAMES[class_id],
        "centers": [centers],
        "radius": [[r] * t],
        "velocity": (vx, vy),
    }
    return VideoSample(frames=frames, class_id=class_id, annotation=annotation)


def gen_video(class_id, seed, cfg: DataConfig = DataConfig()):
    if 0 <= class_id < 8:
        return gen_temporal_video(class_id, seed, cfg)
    if 8 <= class_id < 16:
        return gen_static_video(class_id, seed, cfg)
    raise InputError(f"unknown class id {class_id}")


def decode_static_frame(frame):
    """Rule-based single-frame label for static classes.

    Foreground pixels are the bright saturated ones; shape comes from
    bounding-box fill ratio, corner occupancy, and vertical symmetry;
    color from the green channel of the fill.
    """
    frame = np.asarray(frame)
    bright = frame.max(axis=-1)
    spread = frame.max(axis=-1) - frame.min(axis=-1)
    mask = (bright > 0.62) & (spread > 0.30)
    if mask.sum() < 8:
        raise InputError("decode_static_frame: no foreground found")
    rows, cols = np.nonzero(mask)
    y0, y1 = rows.min(), rows.max()
    x0, x1 = cols.min(), cols.max()
    fill = mask.sum() / ((y1 - y0 + 1) * (x1 - x0 + 1))

    if fill > 0.66:
        # disk or square: a square occupies its bounding-box corners, a
        # disk leaves them empty
        corner = 0.0
        for yy, xx in [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]:
            ys = slice(max(yy - 1, y0), min(yy + 2, y1 + 1))
            xs = slice(max(xx - 1, x0), min(xx + 2, x1 + 1))
            corner += mask[ys, xs].mean()
        shape = "square" if corner / 4.0 > 0.5 else "disk"
    else:
        center_row = (y0 + y1) / 2.0
        # an upward triangle has most of its area below the box center
        below = (rows > center_row).sum() / rows.size
        shape = "triangle" if below > 0.58 else "diamond"

    fg = frame[mask]
    color = "yellow" if fg[:, 1].mean() > 0.5 else "red"
    return 8 + STATIC_SHAPES.index(shape) * 2 + STATIC_COLORS.index(color)


# ---------------------------------------------------------------------------
# splits and containers
# ---------------------------------------------------------------------------

_SEED_STRIDE = 1_000_000


@dataclass(frozen=True)
class SampleRecord:
    class_id: int
    seed: int
    split: str


@dataclass
class VideoDataset:
    cfg: DataConfig
    records: list

    def __len__(self):
        return len(self.records)

    @property
    def labels(self):
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    def sample(self, i) -> VideoSample:
        rec = self.records[i]
        return gen_video(rec.class_id, rec.seed, self.cfg)

    def materialize(self):
        """(N, T, H, W, C) f32 frames plus (N,) labels."""
        n = len(self.records)
        out = np.empty((n, self.cfg.frames, self.cfg.size, self.cfg.size, 3), dtype=np.float32)
        for i in range(n):
            out[i] = self.sample(i).frames
        return out, self.labels


def make_splits(cfg: DataConfig, seed, classes=None, train_per_class=None, test_per_class=None):
    """Deterministic, disjoint, class-balanced train/test datasets."""
    classes = list(range(16)) if classes is None else list(classes)
    n_train = cfg.train_per_class if train_per_class is None else train_per_class
    n_test = cfg.test_per_class if test_per_class is None else test_per_class
    if n_train < 1 or n_test < 1:
        raise ConfigError("split sizes must be positive")
    if n_train + n_test >= _SEED_STRIDE:
        raise ConfigError("split too large for the per-class seed stride")
    train, test = [], []
    for c in classes:
        base = int(seed) * 100_000_000 + c * _SEED_STRIDE
        for i in range(n_train):
            train.append(SampleRecord(c, base + i, "train"))
        for i in range(n_test):
            test.append(SampleRecord(c, base + n_train + i, "test"))
    return VideoDataset(cfg, train), VideoDataset(cfg, test)


MANIFEST_MAGIC = b"TLABDSET"
FRAMES_MAGIC = b"TLABVIDS"


def save_manifest(path, dataset: VideoDataset, seed):
    with open(path, "wb") as fh:
        fh.write(MANIFEST_MAGIC)
        fh.write(struct.pack("<II", TAXONOMY_VERSION, len(dataset.records)))
        fh.write(struct.pack("<q", int(seed)))
        fh.write(dataset.cfg.digest().encode("ascii"))
        fh.write(struct.pack("<III", dataset.cfg.frames, dataset.cfg.size, dataset.cfg.channels))
        for rec in dataset.records:
            split_code = 0 if rec.split == "train" else 1
            fh.write(struct.pack("<HqB", rec.class_id, rec.seed, split_code))


def load_manifest(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MANIFEST_MAGIC:
        raise InputError(f"manifest: bad magic in {path}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != TAXONOMY_VERSION:
        raise InputError(f"manifest: taxonomy version {version} unsupported")
    (seed,) = struct.unpack_from("<q", blob, 16)
    digest = blob[24:40].decode("ascii")
    frames, size, channels = struct.unpack_from("<III", blob, 40)
    cfg = DataConfig(frames=frames, size=size, channels=channels)
    if cfg.digest() != digest:
        raise InputError("manifest: config digest mismatch")
    records = []
    cursor = 52
    for _ in range(count):
        class_id, rec_seed, split_code = struct.unpack_from("<HqB", blob, cursor)
        cursor += struct.calcsize("<HqB")
        records.append(SampleRecord(class_id, rec_seed, "train" if split_code == 0 else "test"))
    return VideoDataset(cfg, records), seed


def save_frames(path, videos):
    """Raw u8 container: per-sample dims then RGB bytes."""
    videos = np.asarray(videos)
    u8 = np.clip(videos * 255.0 + 0.5, 0, 255).astype(np.uint8)
    n, t, h, w, c = u8.shape
    with open(path, "wb") as fh:
        fh.write(FRAMES_MAGIC)
        fh.write(struct.pack("<IIIIII", 1, n, t, h, w, c))
        fh.write(u8.tobytes())


def load_frames(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FRAMES_MAGIC:
        raise InputError(f"frames container: bad magic in {path}")
    version, n, t, h, w, c = struct.unpack_from("<IIIIII", blob, 8)
    if version != 1:
        raise InputError(f"frames container: unsupported version {version}")
    payload = blob[32:]
    expect = n * t * h * w * c
    if len(payload) != expect:
        raise InputError(f"frames container: payload {len(payload)} != expected {expect}")
    u8 = np.frombuffer(payload, dtype=np.uint8).reshape(n, t, h, w, c)
    return u8.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# background-bias image suite
# ---------------------------------------------------------------------------

IMAGE_SHAPES = ("disk", "square", "triangle")
IMAGE_FILLS = (
    ("white", (0.95, 0.95, 0.95)),
    ("red", (0.95, 0.20, 0.15)),
    ("yellow", (0.95, 0.85, 0.12)),
)
IMAGE_CLASSES = tuple(f"{s}-{c}" for s in IMAGE_SHAPES for c, _ in IMAGE_FILLS)
N_IMAGE_CLASSES = 9
N_BACKGROUNDS = 9


@dataclass(frozen=True)
class ImageConfig:
    size: int = 64
    channels: int = 3
    train_per_class: int = 100
    test_per_class: int = 40


def background_texture(bg_id, instance_seed, size):
    """One instance of background family bg_id: hue-tinted value noise."""
    if not 0 <= bg_id < N_BACKGROUNDS:
        raise InputError(f"background id {bg_id} out of range")
    rng = np.random.default_rng((TAXONOMY_VERSION, 77, bg_id, int(instance_seed)))
    noise = 0.15 + 0.40 * value_noise(rng, size)
    hue = 2.0 * np.pi * bg_id / N_BACKGROUNDS
    tint = np.array([
        0.65 + 0.35 * np.cos(hue),
        0.65 + 0.35 * np.cos(hue - 2.0 * np.pi / 3),
        0.65 + 0.35 * np.cos(hue + 2.0 * np.pi / 3),
    ])
    return np.clip(noise[..., None] * tint[None, None, :], 0.0, 1.0)


def gen_background_image(fg_class, mix_mode, seed, cfg: ImageConfig = ImageConfig()):
    """Foreground shape over a background chosen by the mix mode."""
    if not 0 <= fg_class < N_IMAGE_CLASSES:
        raise InputError(f"unknown foreground class {fg_class}")
    if mix_mode not in MIX_MODES:
        raise InputError(f"unknown mix mode {mix_mode!r}; expected one of {MIX_MODES}")
    rng = np.random.default_rng((TAXONOMY_VERSION, 88, fg_class, int(seed)))
    size = cfg.size
    shape = IMAGE_SHAPES[fg_class // 3]
    fill = IMAGE_FILLS[fg_class % 3][1]
    r = rng.uniform(10.0, 14.0)
    cx = rng.uniform(r + 3.0, size - r - 3.0)
    cy = rng.uniform(r + 3.0, size - r - 3.0)
    instance = rng.integers(1 << 30)
    alt = int(rng.integers(1, N_BACKGROUNDS))

    if mix_mode == "OnlyFG":
        bg_id = -1
        canvas = np.zeros((size, size, 3))
    elif mix_mode == "MixedRand":
        bg_id = (fg_class + alt) % N_BACKGROUNDS
        canvas = background_texture(bg_id, instance, size)
    else:  # Original and MixedSame share the paired family
        bg_id = fg_class
        canvas = background_texture(bg_id, instance, size)

    draw_shape(canvas, shape, cx, cy, r, fill)
    return ImageSample(image=canvas.astype(np.float32), fg_class=fg_class,
                       background_id=bg_id, mix_mode=mix_mode)


@dataclass(frozen=True)
class ImageRecord:
    fg_class: int
    seed: int
    mix_mode: str


@dataclass
class ImageDataset:
    cfg: ImageConfig
    records: list

    def __len__(self):
        return len(self.records)

    @property
    def labels(self):
        return np.array([r.fg_class for r in self.records], dtype=np.int64)

    def sample(self, i) -> ImageSample:
        rec = self.records[i]
        return gen_background_image(rec.fg_class, rec.mix_mode, rec.seed, self.cfg)

    def materialize(self):
        n = len(self.records)
        out = np.empty((n, self.cfg.size, self.cfg.size, 3), dtype=np.float32)
        for i in range(n):
            out[i] = self.sample(i).image
        return out, self.labels


def make_image_splits(cfg: ImageConfig, seed, test_mode="Original",
                      train_per_class=None, test_per_class=None):
    """Train split is always Original (the bias-inducing pairing); the
    test split's mix mode is the caller's choice."""
    if test_mode not in MIX_MODES:
        raise InputError(f"unknown mix mode {test_mode!r}")
    n_train = cfg.train_per_class if train_per_class is None else train_per_class
    n_test = cfg.test_per_class if test_per_class is None else test_per_class
    train, test = [], []
    for c in range(N_IMAGE_CLASSES):
        base = int(seed) * 100_000_000 + c * _SEED_STRIDE
        for i in range(n_train):
            train.append(ImageRecord(c, base + i, "Original"))
        for i in range(n_test):
            test.append(ImageRecord(c, base + n_train + i, test_mode))
    return ImageDataset(cfg, train), ImageDataset(cfg, test)
