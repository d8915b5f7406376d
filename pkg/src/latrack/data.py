"""Synthetic aligned multi-modal tracking sequences and the cropping pipeline.

Each sequence renders one target shape plus optional distractors moving over a
textured background, with four pixel-aligned modality streams:

* rgb      - colored shapes, scaled by illumination, plus sensor noise
* depth    - inverse-depth grayscale of per-object depth planes (light-proof)
* thermal  - object heat on a cool background (light-proof)
* event    - polarity of the clean frame difference, false-colored

Sequences are byte-deterministic functions of their spec. On-disk layout:

    <root>/<split>/<seq>/{meta.json, groundtruth.txt,
                          rgb/%06d.png, depth/%06d.png,
                          thermal/%06d.png, event/%06d.png}

groundtruth.txt line k: "x,y,w,h,visible" in integer pixels, top-left corner.
"""

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .codec import CropParams, ImageCrop
from .errors import ConfigError, DataError
from .head import BBox

CANVAS = 256
TEMPLATE_SIZE = 64
SEARCH_SIZE = 128
TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.72, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.85, 0.80, 0.10),
    "magenta": (0.80, 0.10, 0.80),
    "cyan": (0.10, 0.80, 0.80),
    "orange": (0.90, 0.55, 0.10),
    "purple": (0.50, 0.15, 0.80),
}

EVENT_THRESHOLD = 0.04
EVENT_COLORS = {1: (1.0, 0.0, 0.0), 0: (0.5, 0.5, 0.5), -1: (0.0, 0.0, 1.0)}
DEPTH_NEAR, DEPTH_FAR = 0.25, 1.0
TARGET_HEAT, DISTRACTOR_HEAT, BACKGROUND_HEAT = 0.90, 0.60, 0.12
OCCLUDER_DEPTH, OCCLUDER_HEAT = 0.25, 0.20
RGB_NOISE_STD = 0.015


@dataclass
class ObjectSpec:
    shape: str
    color: str
    size: float = 32.0
    depth: float = 0.5
    spawn: tuple | None = None  # fixed (x, y) center; None -> seeded placement

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ConfigError(f"unknown color {self.color!r}")
        if not DEPTH_NEAR <= self.depth <= DEPTH_FAR:
            raise ConfigError(f"depth {self.depth} outside [{DEPTH_NEAR}, {DEPTH_FAR}]")


@dataclass
class SequenceSpec:
    seed: int
    length: int = 40
    canvas: int = CANVAS
    target: ObjectSpec = field(default_factory=lambda: ObjectSpec("circle", "red"))
    distractors: list = field(default_factory=list)
    darkness_episodes: list = field(default_factory=list)  # [start, end, illumination]
    occlusion_episodes: list = field(default_factory=list)  # [start, end]
    velocity_clip: float = 2.5
    accel_noise: float = 0.7

    def __post_init__(self):
        for start, end, illum in self.darkness_episodes:
            if not 0.0 < illum <= 1.0:
                raise ConfigError(f"illumination {illum} outside (0, 1]")
            if not 0 <= start < end <= self.length:
                raise ConfigError(f"darkness episode [{start}, {end}) invalid")

    @property
    def caption(self):
        return f"track the {self.target.color} {self.target.shape}"

    def objects(self):
        return [self.target] + list(self.distractors)

    def illumination(self, k):
        for start, end, illum in self.darkness_episodes:
            if start <= k < end:
                return float(illum)
        return 1.0

    def occluded(self, k):
        return any(start <= k < end for start, end in self.occlusion_episodes)


# ---------------------------------------------------------------------------
# simulation and rendering


def _spawn_positions(spec, rng):
    lo, hi = spec.canvas * 0.2, spec.canvas * 0.8
    placed = []
    for obj in spec.objects():
        if obj.spawn is not None:
            placed.append(np.array(obj.spawn, dtype=np.float64))
            continue
        for attempt in range(60):
            p = rng.uniform(lo, hi, size=2)
            if all(np.linalg.norm(p - q) > 0.9 * (obj.size + o.size) for q, o in zip(placed, spec.objects())):
                placed.append(p)
                break
        else:
            raise DataError(f"cannot place {len(spec.objects())} objects on a {spec.canvas} canvas")
    return placed


def simulate_centers(spec):
    """Per-frame object centers [K, n_obj, 2] from a smoothed random walk."""
    rng = np.random.default_rng([spec.seed, 0])
    centers = _spawn_positions(spec, rng)
    velocities = [rng.uniform(-spec.velocity_clip, spec.velocity_clip, size=2) for _ in centers]
    out = np.empty((spec.length, len(centers), 2))
    for k in range(spec.length):
        for i, obj in enumerate(spec.objects()):
            out[k, i] = centers[i]
            a = rng.normal(0.0, spec.accel_noise, size=2)
            velocities[i] = np.clip(velocities[i] + a, -spec.velocity_clip, spec.velocity_clip)
            centers[i] = centers[i] + velocities[i]
            margin = obj.size / 2 + 2
            for ax in range(2):
                if centers[i][ax] < margin:
                    centers[i][ax] = 2 * margin - centers[i][ax]
                    velocities[i][ax] = abs(velocities[i][ax])
                elif centers[i][ax] > spec.canvas - margin:
                    centers[i][ax] = 2 * (spec.canvas - margin) - centers[i][ax]
                    velocities[i][ax] = -abs(velocities[i][ax])
    return out


def shape_bbox(obj, center):
    """Analytic (x, y, w, h) pixel bbox of a shape at a float center."""
    cx, cy = center
    s = obj.size
    if obj.shape == "triangle":
        h = s * math.sqrt(3.0) / 2.0
        return (cx - s / 2, cy - h / 2, s, h)
    return (cx - s / 2, cy - s / 2, s, s)


def clip_box(box, canvas):
    x, y, w, h = box
    x1, y1 = max(x, 0.0), max(y, 0.0)
    x2, y2 = min(x + w, float(canvas)), min(y + h, float(canvas))
    return (x1, y1, max(x2 - x1, 0.0), max(y2 - y1, 0.0))


def compute_trajectories(spec):
    """Clipped analytic pixel boxes for every object, target first: [n_obj, K, 4]."""
    centers = simulate_centers(spec)
    boxes = np.empty((len(spec.objects()), spec.length, 4))
    for i, obj in enumerate(spec.objects()):
        for k in range(spec.length):
            boxes[i, k] = clip_box(shape_bbox(obj, centers[k, i]), spec.canvas)
    return boxes


def _shape_mask(obj, center, canvas):
    cx, cy = center
    s = obj.size
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    xx = xx + 0.5 - cx
    yy = yy + 0.5 - cy
    if obj.shape == "circle":
        return xx ** 2 + yy ** 2 <= (s / 2) ** 2
    if obj.shape == "square":
        return (np.abs(xx) <= s / 2) & (np.abs(yy) <= s / 2)
    h = s * math.sqrt(3.0) / 2.0
    inside = (yy >= -h / 2) & (yy <= h / 2)
    half_width = (yy + h / 2) / h * (s / 2)
    return inside & (np.abs(xx) <= half_width)


def _background(spec):
    rng = np.random.default_rng([spec.seed, 2])
    coarse = rng.uniform(0.25, 0.55, size=(4, 4, 3)).astype(np.float32)
    return cv2.resize(coarse, (spec.canvas, spec.canvas), interpolation=cv2.INTER_LINEAR)


def modality_to_rgb_like(raw, modality):
    """Raw modality frame -> 3-channel [H, W, 3] image in [0, 1]."""
    if modality == "rgb":
        return np.asarray(raw, dtype=np.float32)
    if modality in ("depth", "thermal"):
        return np.repeat(np.asarray(raw, dtype=np.float32)[..., None], 3, axis=-1)
    if modality == "event":
        raw = np.asarray(raw)
        out = np.empty(raw.shape + (3,), dtype=np.float32)
        for polarity, color in EVENT_COLORS.items():
            out[raw == polarity] = color
        return out
    raise ConfigError(f"unknown modality {modality!r}")


def render_sequence(spec):
    """All modality frames plus ground truth, entirely in memory.

    Returns a dict with keys rgb/depth/thermal/event (lists of [H, W, 3]
    float32 frames), boxes (target, [K, 4]), all_boxes ([n_obj, K, 4]),
    visible ([K] uint8) and caption.
    """
    canvas = spec.canvas
    centers = simulate_centers(spec)
    all_boxes = compute_trajectories(spec)
    bg = _background(spec)
    noise_rng = np.random.default_rng([spec.seed, 1])

    frames = {m: [] for m in ("rgb", "depth", "thermal", "event")}
    visible = np.ones(spec.length, dtype=np.uint8)
    prev_gray = None
    for k in range(spec.length):
        clean = bg.copy()
        depth_map = np.full((canvas, canvas), DEPTH_FAR, dtype=np.float32)
        heat = np.full((canvas, canvas), BACKGROUND_HEAT, dtype=np.float32)
        target_mask = None

        order = sorted(range(len(spec.objects())), key=lambda i: -spec.objects()[i].depth)
        for i in order:
            obj = spec.objects()[i]
            mask = _shape_mask(obj, centers[k, i], canvas)
            clean[mask] = COLORS[obj.color]
            depth_map[mask] = obj.depth
            heat[mask] = TARGET_HEAT if i == 0 else DISTRACTOR_HEAT
            if i == 0:
                target_mask = mask
            elif target_mask is not None and obj.depth < spec.objects()[0].depth:
                target_mask = target_mask & ~mask

        if spec.occluded(k):
            x, y, w, h = shape_bbox(spec.target, centers[k, 0])
            pad = 0.25 * spec.target.size
            y0, y1 = int(max(y - pad, 0)), int(min(y + h + pad, canvas))
            x0, x1 = int(max(x - pad, 0)), int(min(x + w + pad, canvas))
            clean[y0:y1, x0:x1] = (0.40, 0.40, 0.45)
            depth_map[y0:y1, x0:x1] = OCCLUDER_DEPTH
            heat[y0:y1, x0:x1] = OCCLUDER_HEAT
            occ = np.zeros((canvas, canvas), dtype=bool)
            occ[y0:y1, x0:x1] = True
            target_mask = target_mask & ~occ

        visible[k] = 1 if target_mask is not None and target_mask.any() else 0

        gray = clean.mean(axis=-1)
        if prev_gray is None:
            polarity = np.zeros((canvas, canvas), dtype=np.int8)
        else:
            diff = gray - prev_gray
            polarity = np.zeros((canvas, canvas), dtype=np.int8)
            polarity[diff > EVENT_THRESHOLD] = 1
            polarity[diff < -EVENT_THRESHOLD] = -1
        prev_gray = gray

        rgb = clean * spec.illumination(k)
        rgb = rgb + noise_rng.normal(0.0, RGB_NOISE_STD, size=rgb.shape).astype(np.float32)
        frames["rgb"].append(np.clip(rgb, 0.0, 1.0).astype(np.float32))
        inv = (1.0 / depth_map - 1.0 / DEPTH_FAR) / (1.0 / DEPTH_NEAR - 1.0 / DEPTH_FAR)
        frames["depth"].append(modality_to_rgb_like(inv.astype(np.float32), "depth"))
        frames["thermal"].append(modality_to_rgb_like(heat, "thermal"))
        frames["event"].append(modality_to_rgb_like(polarity, "event"))

    return {
        "rgb": frames["rgb"], "depth": frames["depth"],
        "thermal": frames["thermal"], "event": frames["event"],
        "boxes": all_boxes[0], "all_boxes": all_boxes,
        "visible": visible, "caption": spec.caption,
    }


# ---------------------------------------------------------------------------
# on-disk records


def _save_png(path, frame):
    data = np.floor(np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def _load_png(path):
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def spec_to_meta(spec):
    def obj_dict(o):
        d = asdict(o)
        if d["spawn"] is not None:
            d["spawn"] = list(d["spawn"])
        return d

    return {
        "seed": spec.seed,
        "length": spec.length,
        "caption": spec.caption,
        "target": obj_dict(spec.target),
        "distractors": [obj_dict(o) for o in spec.distractors],
        "darkness_episodes": [list(e) for e in spec.darkness_episodes],
        "occlusion_episodes": [list(e) for e in spec.occlusion_episodes],
    }


def spec_from_meta(meta):
    def obj(d):
        spawn = tuple(d["spawn"]) if d.get("spawn") else None
        return ObjectSpec(d["shape"], d["color"], d["size"], d["depth"], spawn)

    return SequenceSpec(
        seed=meta["seed"],
        length=meta["length"],
        target=obj(meta["target"]),
        distractors=[obj(d) for d in meta["distractors"]],
        darkness_episodes=[tuple(e) for e in meta["darkness_episodes"]],
        occlusion_episodes=[tuple(e) for e in meta["occlusion_episodes"]],
    )


def generate_sequence(spec, out_dir):
    """Render and write one sequence; byte-identical for identical specs."""
    out_dir = Path(out_dir)
    rendered = render_sequence(spec)
    for modality in ("rgb", "depth", "thermal", "event"):
        mdir = out_dir / modality
        mdir.mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(rendered[modality]):
            _save_png(mdir / f"{k:06d}.png", frame)

    lines = []
    for k in range(spec.length):
        x, y, w, h = rendered["boxes"][k]
        lines.append(f"{round(x)},{round(y)},{round(w)},{round(h)},{int(rendered['visible'][k])}")
    (out_dir / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    (out_dir / "meta.json").write_text(json.dumps(spec_to_meta(spec), sort_keys=True, indent=2) + "\n")
    return SequenceRecord.load(out_dir)


@dataclass
class SequenceRecord:
    root: Path
    name: str
    meta: dict
    boxes: np.ndarray  # [K, 4] float, pixel top-left
    visible: np.ndarray  # [K] uint8

    @classmethod
    def load(cls, seq_dir):
        seq_dir = Path(seq_dir)
        meta = json.loads((seq_dir / "meta.json").read_text())
        rows = []
        for line in (seq_dir / "groundtruth.txt").read_text().splitlines():
            rows.append([float(v) for v in line.split(",")])
        gt = np.asarray(rows)
        return cls(root=seq_dir, name=seq_dir.name, meta=meta,
                   boxes=gt[:, :4], visible=gt[:, 4].astype(np.uint8))

    @property
    def length(self):
        return len(self.boxes)

    @property
    def caption(self):
        return self.meta["caption"]

    def frame(self, k, modality="rgb"):
        return _load_png(self.root / modality / f"{k:06d}.png")


class SynthDataset:
    """All sequences of one split, ordered by directory name."""

    def __init__(self, root, split):
        self.root = Path(root) / split
        if not self.root.is_dir():
            raise DataError(f"split directory {self.root} does not exist")
        self.records = [SequenceRecord.load(d) for d in sorted(self.root.iterdir()) if d.is_dir()]
        if not self.records:
            raise DataError(f"split {split!r} at {self.root} is empty")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


# ---------------------------------------------------------------------------
# cropping


def _mean_pad_crop(frame, center, side, out_size):
    h, w = frame.shape[:2]
    side_i = max(int(round(side)), 4)
    x0 = int(round(center[0] - side_i / 2.0))
    y0 = int(round(center[1] - side_i / 2.0))
    pad = frame.reshape(-1, frame.shape[-1]).mean(axis=0, dtype=np.float64).astype(np.float32)
    patch = np.empty((side_i, side_i, frame.shape[-1]), dtype=np.float32)
    patch[:] = pad
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + side_i, w), min(y0 + side_i, h)
    if sx1 > sx0 and sy1 > sy0:
        patch[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    resized = cv2.resize(patch, (out_size, out_size), interpolation=cv2.INTER_LINEAR)
    params = CropParams(x0=float(x0), y0=float(y0), side=float(side_i), out_size=out_size)
    return resized, params


def _crop(frame, box, factor, out_size, modality):
    x, y, w, h = box
    if w <= 0 or h <= 0:
        raise DataError(f"degenerate reference box {box}")
    side = factor * math.sqrt(w * h)
    center = (x + w / 2.0, y + h / 2.0)
    patch, params = _mean_pad_crop(np.asarray(frame, dtype=np.float32), center, side, out_size)
    return ImageCrop(pixels=np.transpose(np.clip(patch, 0.0, 1.0), (2, 0, 1)),
                     modality_tag=modality, crop_params=params)


def crop_template(frame, gt_box, template_factor=TEMPLATE_FACTOR, out_size=TEMPLATE_SIZE,
                  modality="rgb"):
    """Square crop at template_factor * sqrt(w*h), mean-padded, resized to 64."""
    return _crop(frame, gt_box, template_factor, out_size, modality)


def crop_search(frame, ref_box, search_factor=SEARCH_FACTOR, out_size=SEARCH_SIZE,
                modality="rgb"):
    """Square crop at search_factor * sqrt(w*h), mean-padded, resized to 128."""
    return _crop(frame, ref_box, search_factor, out_size, modality)


def box_to_crop_coords(box_px, params: CropParams):
    """Pixel (x, y, w, h) -> normalized center-size BBox in crop coordinates."""
    x, y, w, h = box_px
    return BBox(
        cx=(x + w / 2.0 - params.x0) / params.side,
        cy=(y + h / 2.0 - params.y0) / params.side,
        w=w / params.side,
        h=h / params.side,
    )


def map_box_to_image(box: BBox, params: CropParams, canvas):
    """Normalized crop BBox -> pixel (x, y, w, h), clipped to the canvas."""
    cx = params.x0 + box.cx * params.side
    cy = params.y0 + box.cy * params.side
    w = box.w * params.side
    h = box.h * params.side
    return clip_box((cx - w / 2.0, cy - h / 2.0, w, h), canvas)


# ---------------------------------------------------------------------------
# split recipes

SPLIT_SEEDS = {"train": 10000, "val": 20000, "test_bright": 30000,
               "test_dark": 40000, "test_rgbn": 50000}


def _pick_object(rng, exclude_color=None, shape=None):
    colors = [c for c in COLORS if c != exclude_color]
    return ObjectSpec(
        shape=shape or SHAPES[rng.integers(len(SHAPES))],
        color=colors[rng.integers(len(colors))],
        size=float(rng.uniform(26, 38)),
        depth=float(rng.uniform(0.35, 0.8)),
    )


def _distractors_for(rng, target, n):
    out = []
    for _ in range(n):
        same_shape = rng.random() < 0.5
        out.append(_pick_object(rng, exclude_color=target.color,
                                shape=target.shape if same_shape else None))
    return out


def _rgbn_spec(seed, length, rng):
    target = _pick_object(rng)
    confuser = _pick_object(rng, exclude_color=target.color, shape=target.shape)
    # Dark first frame: the template carries no color, only the caption does.
    # Both objects spawn inside one search window so the caption is the only
    # cue that separates them.
    angle = rng.uniform(0, 2 * math.pi)
    cx, cy = CANVAS / 2 + rng.uniform(-25, 25, size=2)
    offset = rng.uniform(22, 33)
    target.spawn = (float(cx + offset * math.cos(angle)), float(cy + offset * math.sin(angle)))
    confuser.spawn = (float(cx - offset * math.cos(angle)), float(cy - offset * math.sin(angle)))
    return SequenceSpec(
        seed=seed, length=length, target=target, distractors=[confuser],
        darkness_episodes=[(0, 1, float(rng.uniform(0.02, 0.04)))],
    )


def build_spec(split, index, length=40):
    """Deterministic spec for sequence `index` of a named split."""
    if split not in SPLIT_SEEDS:
        raise ConfigError(f"unknown split {split!r}")
    seed = SPLIT_SEEDS[split] + index
    rng = np.random.default_rng([seed, 3])

    if split == "test_rgbn":
        return _rgbn_spec(seed, length, rng)

    target = _pick_object(rng)
    darkness, occlusion = [], []
    if split in ("train", "val"):
        if rng.random() < 0.25:
            return _rgbn_spec(seed, length, rng)
        n_dis = int(rng.integers(0, 3))
        if length >= 8 and rng.random() < 0.4:
            start = int(rng.integers(3, max(4, length // 2)))
            end = int(min(length, start + rng.integers(max(1, length // 4), length)))
            darkness.append((start, end, float(rng.uniform(0.02, 0.15))))
        if length >= 12 and rng.random() < 0.2:
            start = int(rng.integers(2, length - 8))
            occlusion.append((start, start + int(rng.integers(3, 7))))
    elif split == "test_bright":
        n_dis = int(rng.integers(0, 3))
    elif split == "test_dark":
        n_dis = int(rng.integers(0, 2))
        darkness.append((5, length, float(rng.uniform(0.02, 0.08))))
    return SequenceSpec(
        seed=seed, length=length, target=target,
        distractors=_distractors_for(rng, target, n_dis),
        darkness_episodes=darkness, occlusion_episodes=occlusion,
    )


def make_dataset(root, counts, length=40, log=None):
    """Generate every split listed in `counts` (name -> sequence count)."""
    root = Path(root)
    for split, count in counts.items():
        for i in range(count):
            spec = build_spec(split, i, length=length)
            generate_sequence(spec, root / split / f"{split}-{i:03d}")
            if log and (i + 1) % 20 == 0:
                log(f"{split}: {i + 1}/{count} sequences")
    return root
