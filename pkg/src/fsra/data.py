"""Dataset layout, synthetic paired-view generator, sampler, augmentations.

On-disk layout mirrors the drone/satellite convention:
``root/{drone|satellite|street}/<class_id>/<image>.png``. The synthetic
generator renders one procedural "satellite" scene per class and
derives drone views from it by bounded random rotation, scale,
translation and color jitter, so matching is learnable but not trivial.
All randomness is a pure function of the seeds recorded in the
manifest.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

VIEWS = ("drone", "satellite", "street")
DEFAULT_VIEWS = ("drone", "satellite")

ROTATION_DEG = 15.0
SCALE_RANGE = (0.7, 1.3)
TRANSLATE_FRAC = 0.12
CANVAS_FACTOR = 2


class DatasetLayoutError(ValueError):
    """Raised when a dataset root does not follow the expected layout."""


# ---------------------------------------------------------------------------
# image files


def load_image(path, size: int | None = None) -> np.ndarray:
    """Read a PNG (or raw fallback) into float32 [H,W,3] in [0,1]."""
    path = Path(path)
    if path.suffix == ".raw":
        arr = read_raw(path)
    else:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
    out = arr.astype(np.float32) / 255.0
    if size is not None and out.shape[:2] != (size, size):
        out = resize_image(out, size)
    return out


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    resized = PILImage.fromarray(u8).resize((size, size), PILImage.BILINEAR)
    return np.asarray(resized).astype(np.float32) / 255.0


def save_png(path, image: np.ndarray) -> None:
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(u8).save(Path(path), format="PNG")


def write_raw(path, image: np.ndarray) -> None:
    """Uncompressed fallback: width u32, height u32, then RGB bytes."""
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(np.array([w, h], dtype="<u4").tobytes())
        fh.write(u8.tobytes())


def read_raw(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h = np.frombuffer(blob, dtype="<u4", count=2)
    return np.frombuffer(blob, dtype=np.uint8, offset=8).reshape(int(h), int(w), 3)


# ---------------------------------------------------------------------------
# dataset index


@dataclass
class DatasetIndex:
    root: Path
    classes: list[str]                              # paired (drone+satellite) classes, sorted
    by_view: dict[str, dict[str, list[Path]]]       # view -> class -> sorted paths
    skipped: list[str] = field(default_factory=list)

    def label_of(self, class_id: str) -> int:
        return self.classes.index(class_id)

    def paths(self, view: str, class_id: str) -> list[Path]:
        return self.by_view[view][class_id]


def scan_dataset(root) -> DatasetIndex:
    """Deterministically index a dataset root.

    Classes present in only one of drone/satellite are indexed (they can
    still serve as gallery distractors) but skipped for paired sampling,
    with a warning entry.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetLayoutError(f"dataset root {root} does not exist")
    by_view: dict[str, dict[str, list[Path]]] = {}
    for view in VIEWS:
        vdir = root / view
        if not vdir.is_dir():
            if view in DEFAULT_VIEWS:
                raise DatasetLayoutError(f"missing view directory {vdir}")
            continue
        classes = {}
        for cdir in sorted(p for p in vdir.iterdir() if p.is_dir()):
            images = sorted(p for p in cdir.iterdir()
                            if p.suffix.lower() in (".png", ".raw"))
            if images:
                classes[cdir.name] = images
        by_view[view] = classes

    drone_classes = set(by_view.get("drone", {}))
    sat_classes = set(by_view.get("satellite", {}))
    paired = sorted(drone_classes & sat_classes)
    skipped = sorted(drone_classes ^ sat_classes)
    if not paired:
        raise DatasetLayoutError(f"no class has both drone and satellite images under {root}")
    return DatasetIndex(root=root, classes=paired, by_view=by_view, skipped=skipped)


# ---------------------------------------------------------------------------
# synthetic paired-view generator


@dataclass
class SynthSpec:
    classes: int = 32
    drone_per_class: int = 8
    image_size: int = 64
    seed: int = 7
    distractor_classes: int = 0     # satellite-only classes, test gallery noise
    test_drone_per_class: int = 0   # held-out drone views per class
    # odd classes are jittered mirror images of their even neighbor, so
    # retrieval has to be chirality-aware and mirrored edge content is
    # genuinely misleading
    mirror_twins: bool = True

    def class_id(self, idx: int) -> str:
        return f"{idx:04d}"


def synth_generate(spec: SynthSpec, out_root) -> dict:
    """Render the dataset to ``out_root/{train,test}/...`` plus a manifest.

    The train split holds exactly one satellite image and
    ``drone_per_class`` drone views per class. The test split holds
    held-out drone views for the same classes and a satellite gallery of
    all true matches plus the distractor classes.
    """
    out_root = Path(out_root)
    manifest: dict = {
        "spec": {
            "classes": spec.classes,
            "drone_per_class": spec.drone_per_class,
            "image_size": spec.image_size,
            "seed": spec.seed,
            "distractor_classes": spec.distractor_classes,
            "test_drone_per_class": spec.test_drone_per_class,
            "mirror_twins": spec.mirror_twins,
        },
        "bounds": {
            "rotation_deg": ROTATION_DEG,
            "scale": list(SCALE_RANGE),
            "translate_frac": TRANSLATE_FRAC,
        },
        "images": [],
    }

    for cidx in range(spec.classes + spec.distractor_classes):
        class_id = spec.class_id(cidx)
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, cidx]))
        twin_base = cidx - cidx % 2 if spec.mirror_twins else cidx
        scene_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5C, twin_base]))
        shapes = _sample_scene_params(scene_rng)
        if spec.mirror_twins and cidx % 2 == 1:
            shapes = _mirror_scene_params(shapes, rng)
        canvas = _render_scene(rng, spec.image_size * CANVAS_FACTOR, shapes)
        sat = _camera_view(canvas, spec.image_size, rot=0.0, scale=1.0, tx=0.0, ty=0.0)
        is_distractor = cidx >= spec.classes

        sat_dir = out_root / ("test" if is_distractor else "train") / "satellite" / class_id
        sat_dir.mkdir(parents=True, exist_ok=True)
        sat_path = sat_dir / f"sat_{class_id}.png"
        save_png(sat_path, sat)
        manifest["images"].append({
            "path": str(sat_path.relative_to(out_root)), "class": class_id,
            "view": "satellite", "split": "test" if is_distractor else "train",
        })
        if is_distractor:
            continue

        # the test gallery carries the identical true-match satellite image
        if spec.test_drone_per_class > 0:
            test_sat_dir = out_root / "test" / "satellite" / class_id
            test_sat_dir.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(sat_path, test_sat_dir / sat_path.name)
            manifest["images"].append({
                "path": str((test_sat_dir / sat_path.name).relative_to(out_root)),
                "class": class_id, "view": "satellite", "split": "test",
            })

        for split, count, tag in (("train", spec.drone_per_class, "d"),
                                  ("test", spec.test_drone_per_class, "t")):
            if count == 0:
                continue
            drone_dir = out_root / split / "drone" / class_id
            drone_dir.mkdir(parents=True, exist_ok=True)
            for j in range(count):
                params = _draw_view_params(rng)
                view = _camera_view(canvas, spec.image_size, **params)
                view = _color_jitter(view, rng, params)
                path = drone_dir / f"drone_{class_id}_{tag}{j:02d}.png"
                save_png(path, view)
                manifest["images"].append({
                    "path": str(path.relative_to(out_root)), "class": class_id,
                    "view": "drone", "split": split, "transform": params,
                })

    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


# one bright palette shared by every class, on dark non-discriminative
# ground: color statistics alone carry little class identity, the spatial
# arrangement of bright shapes does (mirrors aerial imagery, where bright
# built structures are the salient content and dark ground is backdrop)
SCENE_PALETTE = np.array([
    [0.92, 0.90, 0.84],   # pale roof
    [0.85, 0.52, 0.35],   # brick
    [0.65, 0.68, 0.72],   # concrete
    [0.55, 0.85, 0.55],   # lawn
    [0.90, 0.82, 0.45],   # sand
    [0.50, 0.70, 0.95],   # pool
], dtype=np.float64)
SCENE_GROUND = np.array([0.07, 0.09, 0.06], dtype=np.float64)


def _sample_scene_params(rng: np.random.Generator) -> list[dict]:
    """Class signature: 7 shapes with fractional positions/sizes/colors."""
    shapes = []
    for _ in range(7):
        color = SCENE_PALETTE[rng.integers(len(SCENE_PALETTE))]
        shapes.append({
            "kind": "disc" if rng.random() < 0.5 else "rect",
            "cy": float(rng.uniform(0.12, 0.88)),
            "cx": float(rng.uniform(0.12, 0.88)),
            "a": float(rng.uniform(0.05, 0.14)),
            "b": float(rng.uniform(0.05, 0.14)),
            "color": np.clip(color + rng.uniform(-0.05, 0.05, size=3), 0, 1),
        })
    return shapes


def _mirror_scene_params(shapes: list[dict], rng: np.random.Generator) -> list[dict]:
    """Horizontally mirrored arrangement with small independent jitter."""
    out = []
    for s in shapes:
        out.append({
            "kind": s["kind"],
            "cy": float(np.clip(s["cy"] + rng.uniform(-0.03, 0.03), 0.1, 0.9)),
            "cx": float(np.clip(1.0 - s["cx"] + rng.uniform(-0.03, 0.03), 0.1, 0.9)),
            "a": float(s["a"] * rng.uniform(0.9, 1.1)),
            "b": float(s["b"] * rng.uniform(0.9, 1.1)),
            "color": np.clip(s["color"] + rng.uniform(-0.03, 0.03, size=3), 0, 1),
        })
    return out


def _render_scene(rng: np.random.Generator, size: int, shapes: list[dict]) -> np.ndarray:
    """Bright rectangles/discs on dark textured ground."""
    noise = rng.uniform(-1, 1, (size // 8, size // 8, 3))
    texture = np.repeat(np.repeat(noise, 8, axis=0), 8, axis=1)[:size, :size]
    img = np.clip(SCENE_GROUND + 0.03 * texture, 0, 1)

    yy, xx = np.mgrid[0:size, 0:size]
    for s in shapes:
        cy, cx = s["cy"] * size, s["cx"] * size
        if s["kind"] == "disc":
            r = s["a"] * size
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy - cy) < s["a"] * size) & (np.abs(xx - cx) < s["b"] * size)
        img[mask] = s["color"]
    return img.astype(np.float32)


def _draw_view_params(rng: np.random.Generator) -> dict:
    return {
        "rot": float(rng.uniform(-ROTATION_DEG, ROTATION_DEG)),
        "scale": float(rng.uniform(*SCALE_RANGE)),
        "tx": float(rng.uniform(-TRANSLATE_FRAC, TRANSLATE_FRAC)),
        "ty": float(rng.uniform(-TRANSLATE_FRAC, TRANSLATE_FRAC)),
    }


def _camera_view(canvas: np.ndarray, size: int, rot: float, scale: float,
                 tx: float, ty: float) -> np.ndarray:
    """Sample an output view from the double-resolution canvas.

    ``scale`` > 1 zooms in (content appears larger), ``tx``/``ty`` are
    fractions of the output width.
    """
    theta = np.deg2rad(rot)
    zoom = CANVAS_FACTOR / scale
    rotm = np.array([[np.cos(theta), -np.sin(theta)],
                     [np.sin(theta), np.cos(theta)]]) * zoom
    c_out = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    c_in = np.array([(canvas.shape[0] - 1) / 2.0, (canvas.shape[1] - 1) / 2.0])
    shift = np.array([ty, tx]) * size * CANVAS_FACTOR
    offset = c_in + shift - rotm @ c_out
    out = np.empty((size, size, 3), dtype=np.float32)
    for ch in range(3):
        out[:, :, ch] = ndimage.affine_transform(
            canvas[:, :, ch], rotm, offset=offset, output_shape=(size, size),
            order=1, mode="nearest")
    return np.clip(out, 0, 1)


def _color_jitter(image: np.ndarray, rng: np.random.Generator, params: dict) -> np.ndarray:
    brightness = float(rng.uniform(0.9, 1.1))
    hue_shift = float(rng.uniform(-0.05, 0.05))
    params["brightness"] = brightness
    params["hue_shift"] = hue_shift
    hsv = _rgb_to_hsv(image)
    hsv[:, :, 0] = (hsv[:, :, 0] + hue_shift) % 1.0
    hsv[:, :, 2] = np.clip(hsv[:, :, 2] * brightness, 0, 1)
    return _hsv_to_rgb(hsv)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    maxc = rgb.max(axis=2)
    minc = rgb.min(axis=2)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    h = np.zeros_like(maxc)
    nz = delta > 0
    rmax = nz & (maxc == r)
    gmax = nz & (maxc == g) & ~rmax
    bmax = nz & ~rmax & ~gmax
    safe = np.maximum(delta, 1e-12)
    h[rmax] = ((g - b)[rmax] / safe[rmax]) % 6
    h[gmax] = (b - r)[gmax] / safe[gmax] + 2
    h[bmax] = (r - g)[bmax] / safe[bmax] + 4
    return np.stack([h / 6.0, s, v], axis=2)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[:, :, 0] * 6.0, hsv[:, :, 1], hsv[:, :, 2]
    i = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros_like(hsv)
    for idx, (rc, gc, bc) in enumerate(choices):
        mask = i == idx
        rgb[:, :, 0][mask] = rc[mask]
        rgb[:, :, 1][mask] = gc[mask]
        rgb[:, :, 2][mask] = bc[mask]
    return rgb.astype(np.float32)


# ---------------------------------------------------------------------------
# multiple sampling


@dataclass
class SamplerConfig:
    k: int = 1
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("sampling multiplier k must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class SampleRef:
    class_id: str
    label: int
    path: Path
    view: str
    aug_seed: int


@dataclass
class Batch:
    satellite: list[SampleRef]
    drone: list[SampleRef]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.satellite], dtype=np.int64)


@dataclass
class SamplerStats:
    classes_with_replacement: int = 0


def multiple_sample(index: DatasetIndex, cfg: SamplerConfig, epoch: int = 0,
                    stats: SamplerStats | None = None) -> list[Batch]:
    """One epoch of class-aligned two-view batches.

    Each class contributes exactly k satellite samples (the single
    satellite image under k independent augmentation seeds) and k drone
    images, distinct where the class has at least k of them. The whole
    schedule is a pure function of (seed, epoch).
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x5A]))
    entries: list[tuple[SampleRef, SampleRef]] = []
    for label, class_id in enumerate(index.classes):
        sat_paths = index.paths("satellite", class_id)
        drone_paths = index.paths("drone", class_id)
        sat_path = sat_paths[0]
        replace = len(drone_paths) < cfg.k
        if replace and stats is not None:
            stats.classes_with_replacement += 1
        picks = rng.choice(len(drone_paths), size=cfg.k, replace=replace)
        for j in range(cfg.k):
            sat_ref = SampleRef(class_id, label, sat_path, "satellite",
                                aug_seed=int(rng.integers(2**31)))
            drone_ref = SampleRef(class_id, label, drone_paths[int(picks[j])], "drone",
                                  aug_seed=int(rng.integers(2**31)))
            entries.append((sat_ref, drone_ref))
    order = rng.permutation(len(entries))
    batches = []
    for start in range(0, len(entries), cfg.batch_size):
        chunk = [entries[i] for i in order[start:start + cfg.batch_size]]
        batches.append(Batch(satellite=[c[0] for c in chunk], drone=[c[1] for c in chunk]))
    return batches


# ---------------------------------------------------------------------------
# augmentation and test-time pads


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    pad_p: float = 0.5
    shift_p: float = 0.5
    jitter_p: float = 0.5
    max_pad: int = 10
    max_shift: int = 10
    jitter: float = 0.1


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Training augmentation; output size always equals input size."""
    h, w = image.shape[:2]
    out = image
    if rng.random() < cfg.flip_p:
        out = out[:, ::-1, :]
    if cfg.max_pad > 0 and rng.random() < cfg.pad_p:
        pad = int(rng.integers(1, cfg.max_pad + 1))
        padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
        oy = int(rng.integers(0, 2 * pad + 1))
        ox = int(rng.integers(0, 2 * pad + 1))
        out = padded[oy:oy + h, ox:ox + w]
    if cfg.max_shift > 0 and rng.random() < cfg.shift_p:
        dy = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
        dx = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
        out = _shift_edge_fill(out, dy, dx)
    if cfg.jitter > 0 and rng.random() < cfg.jitter_p:
        brightness = 1.0 + float(rng.uniform(-cfg.jitter, cfg.jitter))
        contrast = 1.0 + float(rng.uniform(-cfg.jitter, cfg.jitter))
        mean = out.mean()
        out = np.clip((out * brightness - mean) * contrast + mean, 0, 1)
    return np.ascontiguousarray(out, dtype=np.float32)


def _shift_edge_fill(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = image.shape[:2]
    pad_y, pad_x = abs(dy), abs(dx)
    padded = np.pad(image, ((pad_y, pad_y), (pad_x, pad_x), (0, 0)), mode="edge")
    return padded[pad_y - dy:pad_y - dy + h, pad_x - dx:pad_x - dx + w]


def black_pad(image: np.ndarray, pad_px: int) -> np.ndarray:
    """Prepend a black band of the given width, crop the right edge."""
    h, w = image.shape[:2]
    if not 0 <= pad_px < w:
        raise ValueError(f"pad width {pad_px} outside [0, {w})")
    if pad_px == 0:
        return image.copy()
    out = np.zeros_like(image)
    out[:, pad_px:, :] = image[:, :w - pad_px, :]
    return out


def flip_pad(image: np.ndarray, pad_px: int) -> np.ndarray:
    """Prepend the mirrored leftmost band, crop the right edge."""
    h, w = image.shape[:2]
    if not 0 <= pad_px < w:
        raise ValueError(f"pad width {pad_px} outside [0, {w})")
    if pad_px == 0:
        return image.copy()
    out = np.empty_like(image)
    out[:, :pad_px, :] = image[:, pad_px - 1::-1, :]
    out[:, pad_px:, :] = image[:, :w - pad_px, :]
    return out
