"""Synthetic scene generation and dataset ingestion.

Scenes hold striped, hue-coded rectangles grouped into a few spatial
clusters on a noisy low-frequency background, so instance layouts are
globally sparse and locally dense.  Generation is pure given the config
(seed included); loading is pure given the manifest contents.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .errors import DatasetLoadError, SceneGenerationError
from .geometry import Box, iou

_PLACE_RETRIES = 300
_CLUSTER_RETRIES = 300
# pairwise placement limits: near-disjoint instances, no nesting
_MAX_PAIR_IOU = 0.1
_MAX_CONTAINMENT = 0.25


@dataclass(frozen=True)
class InstanceAnnotation:
    box: Box
    label: int


@dataclass
class Scene:
    """An image in [0,1]^(HxWx3) with its ground-truth instances."""

    image: np.ndarray
    annotations: list[InstanceAnnotation]
    id: str

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"scene image must be HxWx3, got {img.shape}")
        if img.min() < 0 or img.max() > 1:
            raise ValueError("scene pixel values must lie in [0, 1]")
        self.image = img


@dataclass(frozen=True)
class SceneGenConfig:
    image_size: int = 224
    num_clusters: int = 3
    instances_per_cluster: tuple[int, int] = (2, 3)
    cluster_radius: float = 30.0
    shape_classes: int = 3
    size_range: tuple[float, float] = (16.0, 96.0)
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")
        if self.shape_classes < 2:
            raise ValueError("shape_classes must be >= 2")
        lo, hi = self.instances_per_cluster
        if not (1 <= lo <= hi):
            raise ValueError("instances_per_cluster must satisfy 1 <= lo <= hi")
        slo, shi = self.size_range
        if not (4 <= slo <= shi <= self.image_size):
            raise ValueError("size_range must satisfy 4 <= lo <= hi <= image_size")
        if self.num_clusters < 0 or self.cluster_radius <= 0 or self.noise_std < 0:
            raise ValueError("bad cluster/noise parameters")


def _upsample_bilinear(coarse: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsample of a [g,g,3] grid to [size,size,3]."""
    g = coarse.shape[0]
    pos = np.linspace(0, g - 1, size)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    f = pos - i0
    rows = coarse[i0] * (1 - f)[:, None, None] + coarse[i1] * f[:, None, None]
    cols = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i1] * f[None, :, None]
    return cols


def _class_palette(label: int, classes: int) -> tuple[np.ndarray, np.ndarray, float]:
    """(bright stripe color, dark stripe color, stripe angle) for a class."""
    hue = label / classes
    bright = np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.95))
    dark = np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.45))
    angle = math.pi * label / classes
    return bright, dark, angle


def _draw_instance(img: np.ndarray, left: int, top: int, pw: int, ph: int,
                   label: int, classes: int, jitter: float) -> None:
    bright, dark, angle = _class_palette(label, classes)
    period = max(4.0, min(pw, ph) / 4.0)
    ys, xs = np.mgrid[top:top + ph, left:left + pw]
    phase = (xs * math.cos(angle) + ys * math.sin(angle)) / period
    stripe = (np.floor(phase).astype(int) % 2).astype(bool)
    patch = np.where(stripe[..., None], bright, dark) + jitter
    img[top:top + ph, left:left + pw] = np.clip(patch, 0.0, 1.0)


def _placement_ok(cand: Box, placed: list[Box]) -> bool:
    for other in placed:
        v = iou(cand, other)
        if v > _MAX_PAIR_IOU:
            return False
        x1, y1, x2, y2 = cand.corners()
        ox1, oy1, ox2, oy2 = other.corners()
        iw = min(x2, ox2) - max(x1, ox1)
        ih = min(y2, oy2) - max(y1, oy1)
        if iw > 0 and ih > 0:
            inter = iw * ih
            if inter / min(cand.area, other.area) > _MAX_CONTAINMENT:
                return False
    return True


def generate_scene(cfg: SceneGenConfig) -> Scene:
    """Deterministic scene for (cfg, cfg.seed); raises SceneGenerationError
    when the instances cannot be packed within the retry budget."""
    rng = np.random.default_rng(cfg.seed)
    S = cfg.image_size

    coarse = rng.uniform(0.25, 0.55, size=(max(2, S // 16), max(2, S // 16), 3))
    img = _upsample_bilinear(coarse, S)
    img = np.clip(img + rng.normal(0.0, cfg.noise_std, size=img.shape), 0.0, 1.0)

    # keep cluster centers far enough from edges that typical instances fit
    margin = min(S / 3, 16 + cfg.cluster_radius / 2 + cfg.size_range[1] / 4)
    min_sep = min(2.5 * cfg.cluster_radius, (S - 2 * margin) / 1.5)
    centers: list[np.ndarray] = []
    for _ in range(_CLUSTER_RETRIES):
        centers = []
        for _ in range(cfg.num_clusters):
            for _ in range(60):
                c = rng.uniform(margin, S - margin, size=2)
                if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                    centers.append(c)
                    break
            else:
                break  # restart the whole arrangement
        if len(centers) == cfg.num_clusters:
            break
    else:
        raise SceneGenerationError(
            f"could not place {cfg.num_clusters} cluster centers at "
            f"separation {min_sep:.1f} in a {S}x{S} image"
        )

    annotations: list[InstanceAnnotation] = []
    placed: list[Box] = []
    draw_queue: list[tuple[int, int, int, int, int, float]] = []
    size_lo, size_hi = cfg.size_range
    for center in centers:
        count = int(rng.integers(cfg.instances_per_cluster[0],
                                 cfg.instances_per_cluster[1] + 1))
        for _ in range(count):
            for attempt in range(_PLACE_RETRIES):
                # anneal: late retries try smaller instances slightly further out
                late = max(0, attempt - 40)
                shrink = 0.98 ** late
                grow = 1.0 + late / 120.0
                pw = int(round(max(size_lo, rng.uniform(size_lo, size_hi) * shrink)))
                ph = int(round(max(size_lo, rng.uniform(size_lo, size_hi) * shrink)))
                r = cfg.cluster_radius * grow * math.sqrt(rng.uniform())
                theta = rng.uniform(0, 2 * math.pi)
                cx = center[0] + r * math.cos(theta)
                cy = center[1] + r * math.sin(theta)
                left = int(round(cx - pw / 2))
                top = int(round(cy - ph / 2))
                if left < 0 or top < 0 or left + pw > S or top + ph > S:
                    continue
                cand = Box(left + pw / 2, top + ph / 2, float(pw), float(ph))
                if not _placement_ok(cand, placed):
                    continue
                label = int(rng.integers(0, cfg.shape_classes))
                jitter = rng.uniform(-0.06, 0.06)
                placed.append(cand)
                annotations.append(InstanceAnnotation(cand, label))
                draw_queue.append((left, top, pw, ph, label, jitter))
                break
            else:
                raise SceneGenerationError(
                    f"could not pack instance after {_PLACE_RETRIES} retries "
                    f"(cluster at {center.round(1)}, {len(placed)} placed)"
                )

    for left, top, pw, ph, label, jitter in draw_queue:
        _draw_instance(img, left, top, pw, ph, label, cfg.shape_classes, jitter)

    return Scene(img, annotations, f"scene_{cfg.seed:08d}")


def generate_suite(cfg: SceneGenConfig, count: int) -> list[Scene]:
    """count scenes with consecutive seeds cfg.seed .. cfg.seed+count-1."""
    return [generate_scene(replace(cfg, seed=cfg.seed + i)) for i in range(count)]


class LazySuite:
    """Sequence view over generate_suite that renders scenes on access.

    Keeps memory flat when training streams thousands of scenes.
    """

    def __init__(self, cfg: SceneGenConfig, count: int):
        self.cfg = cfg
        self.count = count

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Scene:
        if not -self.count <= i < self.count:
            raise IndexError(i)
        return generate_scene(replace(self.cfg, seed=self.cfg.seed + i % self.count))


# ---------------------------------------------------------------------------
# dataset round-trip: PNG images + JSON manifest
# ---------------------------------------------------------------------------


def save_image(path: str, image: np.ndarray) -> None:
    """8-bit RGB PNG; values are scaled by 255 and rounded."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_dataset(scenes: list[Scene], out_dir: str, classes: int) -> str:
    """Write images/ and manifest.json under out_dir; returns manifest path."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for scene in scenes:
        rel = f"images/{scene.id}.png"
        save_image(os.path.join(out_dir, rel), scene.image)
        records.append({
            "id": scene.id,
            "image": rel,
            "instances": [
                {"cx": a.box.cx, "cy": a.box.cy, "w": a.box.w, "h": a.box.h,
                 "label": a.label}
                for a in scene.annotations
            ],
        })
    h, w = (scenes[0].image.shape[:2] if scenes else (0, 0))
    manifest = {"classes": classes, "image_size": [h, w], "records": records}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return path


def _require_keys(obj: dict, keys: set[str], where: str) -> None:
    got = set(obj.keys())
    if got != keys:
        missing, extra = keys - got, got - keys
        raise DatasetLoadError(
            f"{where}: bad keys (missing={sorted(missing)}, unknown={sorted(extra)})"
        )


def load_dataset(manifest_path: str) -> list[Scene]:
    """Load scenes per the manifest schema; errors name the failing record."""
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetLoadError(f"cannot read manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict):
        raise DatasetLoadError("manifest must be a JSON object")
    _require_keys(manifest, {"classes", "image_size", "records"}, "manifest header")
    classes = manifest["classes"]
    if not isinstance(classes, int) or classes < 1:
        raise DatasetLoadError(f"classes must be a positive int, got {classes!r}")
    size = manifest["image_size"]
    if (not isinstance(size, list) or len(size) != 2
            or not all(isinstance(v, int) and v > 0 for v in size)):
        raise DatasetLoadError(f"image_size must be [H, W], got {size!r}")
    H, W = size

    base = os.path.dirname(os.path.abspath(manifest_path))
    scenes = []
    for i, rec in enumerate(manifest["records"]):
        where = f"record {i}"
        if not isinstance(rec, dict):
            raise DatasetLoadError(f"{where}: not an object")
        _require_keys(rec, {"id", "image", "instances"}, where)
        where = f"record {i} ({rec['id']!r})"
        img_path = os.path.join(base, rec["image"])
        if not os.path.isfile(img_path):
            raise DatasetLoadError(f"{where}: missing image file {rec['image']}")
        image = load_image(img_path)
        if image.shape != (H, W, 3):
            raise DatasetLoadError(
                f"{where}: image is {image.shape[:2]}, manifest says {(H, W)}"
            )
        annotations = []
        for j, inst in enumerate(rec["instances"]):
            iwhere = f"{where} instance {j}"
            if not isinstance(inst, dict):
                raise DatasetLoadError(f"{iwhere}: not an object")
            _require_keys(inst, {"cx", "cy", "w", "h", "label"}, iwhere)
            label = inst["label"]
            if not isinstance(label, int) or not 0 <= label < classes:
                raise DatasetLoadError(
                    f"{iwhere}: label {label!r} outside declared {classes} classes"
                )
            try:
                box = Box(float(inst["cx"]), float(inst["cy"]),
                          float(inst["w"]), float(inst["h"]))
            except Exception as e:
                raise DatasetLoadError(f"{iwhere}: bad box ({e})") from e
            x1, y1, x2, y2 = box.corners()
            if x1 < -1e-9 or y1 < -1e-9 or x2 > W + 1e-9 or y2 > H + 1e-9:
                raise DatasetLoadError(f"{iwhere}: box extends past image bounds")
            annotations.append(InstanceAnnotation(box, label))
        scenes.append(Scene(image, annotations, str(rec["id"])))
    return scenes
