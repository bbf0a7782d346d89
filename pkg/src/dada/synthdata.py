"""Procedural generation of paired (image, labels, inverse-depth) scenes.

Scenes contain a ground plane with a perspective depth gradient, a sky
region at the far plane, and a handful of class-labeled object blobs at
sampled depths. Two rendering styles ("source" and "target") share the
geometry distribution but differ in palette, gamma, tint and texture
noise, which is the controllable domain gap.

Depth is stored as inverse depth z = near_plane / depth, so z = 1 at the
near plane and z shrinks toward near/far for the farthest surfaces.
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

DATASET_FORMAT_VERSION = 1
DEPTH_MAGIC = b"IDEP"

DEFAULT_CLASS_NAMES = ["flat", "construction", "object", "nature", "sky", "human", "vehicle"]


class PrivilegedDataError(RuntimeError):
    """Raised when training-time code asks for target-domain labels or depth."""


@dataclass(frozen=True)
class SceneSpec:
    """Geometry contract for generated scenes."""

    height: int = 64
    width: int = 64
    num_classes: int = 7
    class_names: tuple = tuple(DEFAULT_CLASS_NAMES)
    near_plane: float = 1.0
    far_plane: float = 10.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.height < 16 or self.width < 16:
            raise ValueError("height and width must be >= 16")
        if not (0 < self.near_plane < self.far_plane):
            raise ValueError("need 0 < near_plane < far_plane")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")

    @property
    def far_inv_depth(self) -> float:
        return self.near_plane / self.far_plane


@dataclass(frozen=True)
class DomainStyle:
    """Rendering style; source and target presets differ in palette and gamma."""

    domain_tag: str
    palette: tuple  # per-class (r, g, b) base colors in [0, 1]
    texture_noise_sigma: float = 0.0
    gamma: float = 1.0
    global_tint: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.domain_tag not in ("source", "target"):
            raise ValueError("domain_tag must be 'source' or 'target'")
        if self.texture_noise_sigma < 0:
            raise ValueError("texture_noise_sigma must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


@dataclass
class Scene:
    """One sample: RGB image in [0,1], per-pixel class indices, inverse depth."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (H, W) int64 in [0, C)
    inv_depth: np.ndarray  # (H, W) float32 in (0, 1]


# Base palette for the 7 default classes, roughly urban-scene-like hues.
_BASE_PALETTE_7 = (
    (0.42, 0.40, 0.42),  # flat: gray road
    (0.55, 0.28, 0.23),  # construction: brick red
    (0.78, 0.72, 0.25),  # object: yellow pole/sign
    (0.22, 0.52, 0.25),  # nature: green
    (0.55, 0.70, 0.88),  # sky: light blue
    (0.75, 0.45, 0.55),  # human: pink-ish
    (0.25, 0.32, 0.62),  # vehicle: blue
)


def _rotate_hue(rgb, degrees):
    h, l, s = colorsys.rgb_to_hls(*rgb)
    h = (h + degrees / 360.0) % 1.0
    return colorsys.hls_to_rgb(h, l, s)


def _palette_for(num_classes, hue_shift_deg=0.0):
    base = list(_BASE_PALETTE_7)
    while len(base) < num_classes:
        # extra classes get evenly spaced hues
        k = len(base)
        base.append(colorsys.hls_to_rgb((k * 0.13) % 1.0, 0.5, 0.6))
    pal = [_rotate_hue(c, hue_shift_deg) for c in base[:num_classes]]
    return tuple(tuple(round(v, 6) for v in c) for c in pal)


def default_style(domain: str, num_classes: int = 7) -> DomainStyle:
    """Built-in source/target style presets.

    The target preset rotates class hues, raises gamma, tints the image and
    adds texture noise; tuned so that source-only training measurably
    degrades on target while adaptation can recover.
    """
    if domain == "source":
        return DomainStyle(
            domain_tag="source",
            palette=_palette_for(num_classes, 0.0),
            texture_noise_sigma=0.02,
            gamma=1.0,
            global_tint=(1.0, 1.0, 1.0),
        )
    if domain == "target":
        return DomainStyle(
            domain_tag="target",
            palette=_palette_for(num_classes, 40.0),
            texture_noise_sigma=0.08,
            gamma=1.6,
            global_tint=(0.92, 0.97, 1.06),
        )
    raise ValueError(f"unknown domain {domain!r}")


# ---------------------------------------------------------------------------
# layout sampling and rendering
# ---------------------------------------------------------------------------

@dataclass
class Surface:
    """One renderable surface: footprint plus inverse depth.

    kind is one of 'ground', 'sky', 'rect', 'ellipse'. Ground/sky cover the
    region below/above the horizon row; blobs carry a constant inverse depth
    while the ground ramps linearly in inverse depth from the horizon
    (far plane) to the bottom row (near plane).
    """

    kind: str
    class_id: int
    inv_depth: float = 0.0  # constant z for sky/rect/ellipse
    horizon: int = 0  # ground/sky only
    bbox: tuple = (0, 0, 0, 0)  # rect/ellipse: (y0, x0, y1, x1), half-open

    def covers(self, y: int, x: int, spec: SceneSpec) -> bool:
        if self.kind == "ground":
            return y >= self.horizon
        if self.kind == "sky":
            return y < self.horizon
        y0, x0, y1, x1 = self.bbox
        if self.kind == "rect":
            return y0 <= y < y1 and x0 <= x < x1
        if self.kind == "ellipse":
            cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
            ry, rx = max((y1 - y0) / 2.0, 0.5), max((x1 - x0) / 2.0, 0.5)
            return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
        raise ValueError(self.kind)

    def inv_depth_at(self, y: int, x: int, spec: SceneSpec) -> float:
        if self.kind == "ground":
            return ground_inv_depth(y, self.horizon, spec)
        return self.inv_depth


def ground_inv_depth(y, horizon, spec: SceneSpec):
    """Inverse depth of the ground plane at row y.

    Linear ramp in inverse depth (physically exact for a flat plane under
    perspective): far-plane value at the horizon row, 1.0 at the bottom row.
    """
    z_far = spec.far_inv_depth
    bottom = spec.height - 1
    if bottom == horizon:
        return 1.0
    t = (np.asarray(y, dtype=np.float64) - horizon) / (bottom - horizon)
    return z_far + (1.0 - z_far) * t


def _ground_row_for(z, horizon, spec: SceneSpec):
    """Row at which the ground plane has inverse depth z (inverse of the ramp)."""
    z_far = spec.far_inv_depth
    t = (z - z_far) / (1.0 - z_far)
    return int(round(horizon + t * (spec.height - 1 - horizon)))


# per-class blob proportions: (relative height, relative width, shape)
_BLOB_GEOMETRY = {
    "construction": (1.10, 0.75, "rect"),
    "object": (0.70, 0.07, "rect"),
    "nature": (0.65, 0.55, "ellipse"),
    "human": (0.42, 0.13, "ellipse"),
    "vehicle": (0.28, 0.55, "rect"),
}
_FALLBACK_GEOMETRY = (0.5, 0.4, "rect")


def _object_classes(spec: SceneSpec):
    """Class ids usable for blobs: everything except ground and sky."""
    ground, sky = 0, _sky_class(spec)
    return [c for c in range(spec.num_classes) if c not in (ground, sky)]


def _sky_class(spec: SceneSpec) -> int:
    return 4 if spec.num_classes >= 5 else 1


def sample_layout(spec: SceneSpec, seed: int) -> list:
    """Sample the surface list for one scene, deterministically from seed."""
    if spec.num_classes < 4:
        raise ValueError("scene generator needs >= 4 classes (ground, sky, 2+ objects)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    H, W = spec.height, spec.width
    horizon = int(rng.integers(int(0.30 * H), int(0.50 * H) + 1))
    sky_z = spec.far_inv_depth
    surfaces = [
        Surface(kind="sky", class_id=_sky_class(spec), inv_depth=sky_z, horizon=horizon),
        Surface(kind="ground", class_id=0, horizon=horizon),
    ]

    obj_classes = _object_classes(spec)
    n_blobs = int(rng.integers(2, 9))
    # first blobs draw distinct classes, extras repeat
    order = list(rng.permutation(obj_classes))
    classes = [order[i % len(order)] for i in range(n_blobs)]

    names = spec.class_names
    for cls in classes:
        name = names[cls] if cls < len(names) else ""
        rel_h, rel_w, shape = _BLOB_GEOMETRY.get(name, _FALLBACK_GEOMETRY)
        # construction tends far, vehicles/humans nearer; others anywhere
        if name == "construction":
            z = rng.uniform(0.14, 0.40)
        elif name in ("human", "vehicle"):
            z = rng.uniform(0.30, 0.85)
        else:
            z = rng.uniform(0.18, 0.75)
        z = float(np.clip(z, sky_z + 1e-6, 0.98))
        base_row = _ground_row_for(z, horizon, spec)
        h_px = max(4, int(round(rel_h * H * z * rng.uniform(0.85, 1.15))))
        w_px = max(3, int(round(rel_w * W * z * rng.uniform(0.85, 1.15))))
        y1 = min(base_row + 1, H)
        y0 = max(0, y1 - h_px)
        cx = int(rng.integers(0, W))
        x0 = max(0, cx - w_px // 2)
        x1 = min(W, x0 + w_px)
        if x1 <= x0 or y1 <= y0:
            continue
        surfaces.append(Surface(kind=shape, class_id=int(cls), inv_depth=z, bbox=(y0, x0, y1, x1)))
    return surfaces


def render_layout(spec: SceneSpec, surfaces) -> tuple:
    """Z-buffer render: at each pixel the surface with maximal inverse depth wins."""
    H, W = spec.height, spec.width
    labels = np.zeros((H, W), dtype=np.int64)
    zbuf = np.full((H, W), -1.0, dtype=np.float64)
    ys = np.arange(H)[:, None]
    xs = np.arange(W)[None, :]
    for s in surfaces:
        if s.kind == "ground":
            mask = np.broadcast_to(ys >= s.horizon, (H, W))
            z = np.broadcast_to(ground_inv_depth(ys, s.horizon, spec), (H, W))
        elif s.kind == "sky":
            mask = np.broadcast_to(ys < s.horizon, (H, W))
            z = np.full((H, W), s.inv_depth)
        elif s.kind == "rect":
            y0, x0, y1, x1 = s.bbox
            mask = (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
            z = np.full((H, W), s.inv_depth)
        elif s.kind == "ellipse":
            y0, x0, y1, x1 = s.bbox
            cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
            ry, rx = max((y1 - y0) / 2.0, 0.5), max((x1 - x0) / 2.0, 0.5)
            mask = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
            z = np.full((H, W), s.inv_depth)
        else:
            raise ValueError(s.kind)
        win = mask & (z > zbuf)
        labels[win] = s.class_id
        zbuf[win] = z[win]
    inv_depth = np.clip(zbuf, spec.far_inv_depth, 1.0).astype(np.float32)
    return labels, inv_depth


def shade(labels, inv_depth, style: DomainStyle, rng) -> np.ndarray:
    """Turn labels + depth into an RGB image in the given style."""
    palette = np.asarray(style.palette, dtype=np.float64)
    img = palette[labels]
    # nearer surfaces rendered brighter; gives appearance a depth cue
    brightness = 0.55 + 0.45 * inv_depth.astype(np.float64)
    img = img * brightness[:, :, None]
    img = img * (1.0 + rng.uniform(-0.08, 0.08))  # per-scene exposure jitter
    img = img * np.asarray(style.global_tint, dtype=np.float64)[None, None, :]
    img = np.clip(img, 0.0, 1.0) ** style.gamma
    if style.texture_noise_sigma > 0:
        img = img + rng.normal(0.0, style.texture_noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(spec: SceneSpec, style: DomainStyle, seed: int) -> Scene:
    """Deterministic scene generation; retries layouts until >= 3 classes show."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    if len(style.palette) < spec.num_classes:
        raise ValueError("style palette smaller than num_classes")
    for attempt in range(16):
        layout_seed = int(np.random.SeedSequence([int(seed), 1, attempt]).generate_state(1)[0])
        surfaces = sample_layout(spec, layout_seed)
        labels, inv_depth = render_layout(spec, surfaces)
        if len(np.unique(labels)) >= 3:
            break
    shade_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    image = shade(labels, inv_depth, style, shade_rng)
    return Scene(image=image, labels=labels, inv_depth=inv_depth)


def sample_seed(dataset_seed: int, index: int) -> int:
    """Per-sample seed; any subset of a dataset regenerates identically."""
    return int(np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def write_depth_bin(path: Path, inv_depth: np.ndarray) -> None:
    h, w = inv_depth.shape
    header = struct.pack("<4sIII", DEPTH_MAGIC, h, w, 0)
    payload = np.ascontiguousarray(inv_depth.astype("<f4")).tobytes()
    Path(path).write_bytes(header + payload)


def read_depth_bin(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"truncated depth file: {path}")
    magic, h, w, _ = struct.unpack("<4sIII", raw[:16])
    if magic != DEPTH_MAGIC:
        raise ValueError(f"bad depth magic in {path}: {magic!r}")
    values = np.frombuffer(raw[16:], dtype="<f4")
    if values.size != h * w:
        raise ValueError(f"depth payload size mismatch in {path}")
    return values.reshape(h, w).copy()


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def generate_dataset(spec: SceneSpec, style: DomainStyle, seed: int, n: int, out_dir) -> dict:
    """Write n scenes plus a manifest; per-index seeding makes subsets reproducible."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    for sub in ("images", "labels", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(n):
        scene = generate_scene(spec, style, sample_seed(seed, i))
        rel = {
            "index": i,
            "image": f"images/{i:06d}.png",
            "labels": f"labels/{i:06d}.png",
            "depth": f"depth/{i:06d}.bin",
        }
        img8 = np.round(scene.image * 255.0).astype(np.uint8)
        _write_png(out / rel["image"], img8)
        _write_png(out / rel["labels"], scene.labels.astype(np.uint8))
        write_depth_bin(out / rel["depth"], scene.inv_depth)
        files.append(rel)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": asdict(spec) | {"class_names": list(spec.class_names)},
        "style": asdict(style) | {
            "palette": [list(c) for c in style.palette],
            "global_tint": list(style.global_tint),
        },
        "seed": int(seed),
        "count": n,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


# ---------------------------------------------------------------------------
# dataset access with the unsupervised-target guard
# ---------------------------------------------------------------------------

@dataclass
class GuardStats:
    label_reads: int = 0
    depth_reads: int = 0
    refused: int = 0


class SceneDataset:
    """Read access to a dataset directory (or in-memory arrays).

    role 'target-train' refuses label/depth reads: target annotations exist
    on disk for evaluation but must never feed training. Reads are counted
    so training runs can prove they never touched privileged data.
    """

    def __init__(self, spec: SceneSpec, images, labels, inv_depths, role="source",
                 root=None, style_tag=None):
        self.spec = spec
        self.role = role
        self.root = root
        self.style_tag = style_tag
        self.guard = GuardStats()
        self._images = images
        self._labels = labels
        self._depths = inv_depths

    # -- construction ------------------------------------------------------
    @classmethod
    def from_dir(cls, path, role="source", fraction=1.0):
        root = Path(path)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json under {root}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format in {manifest_path}")
        sd = manifest["spec"]
        spec = SceneSpec(
            height=sd["height"], width=sd["width"], num_classes=sd["num_classes"],
            class_names=tuple(sd["class_names"]),
            near_plane=sd["near_plane"], far_plane=sd["far_plane"],
        )
        files = sorted(manifest["files"], key=lambda f: f["index"])
        if not (0 < fraction <= 1.0):
            raise ValueError("fraction must be in (0, 1]")
        n_used = max(1, int(round(len(files) * fraction)))
        files = files[:n_used]
        return cls(
            spec,
            images=[root / f["image"] for f in files],
            labels=[root / f["labels"] for f in files],
            inv_depths=[root / f["depth"] for f in files],
            role=role,
            root=root,
            style_tag=manifest["style"]["domain_tag"],
        )

    @classmethod
    def from_arrays(cls, images, labels=None, inv_depths=None, spec=None, role="source"):
        images = np.asarray(images)
        n, h, w = images.shape[0], images.shape[1], images.shape[2]
        if spec is None:
            c = int(labels.max()) + 1 if labels is not None else 7
            spec = SceneSpec(height=h, width=w, num_classes=max(c, 4),
                             class_names=tuple(f"class{i}" for i in range(max(c, 4))))
        return cls(spec,
                   images=[images[i] for i in range(n)],
                   labels=None if labels is None else [np.asarray(labels[i]) for i in range(n)],
                   inv_depths=None if inv_depths is None else [np.asarray(inv_depths[i]) for i in range(n)],
                   role=role)

    # -- access ------------------------------------------------------------
    def __len__(self):
        return len(self._images)

    def image(self, i) -> np.ndarray:
        item = self._images[i]
        if isinstance(item, (str, Path)):
            arr = np.asarray(Image.open(item).convert("RGB"), dtype=np.float32) / 255.0
            return arr
        return np.asarray(item, dtype=np.float32)

    def _privileged(self, what):
        if self.role == "target-train":
            self.guard.refused += 1
            raise PrivilegedDataError(
                f"{what} of an unlabeled target training set was requested; "
                "the adaptation contract forbids reading it")

    def labels(self, i) -> np.ndarray:
        self._privileged("labels")
        if self._labels is None:
            raise ValueError("dataset carries no labels")
        self.guard.label_reads += 1
        item = self._labels[i]
        if isinstance(item, (str, Path)):
            return np.asarray(Image.open(item), dtype=np.int64)
        return np.asarray(item, dtype=np.int64)

    def inv_depth(self, i) -> np.ndarray:
        self._privileged("inverse depth")
        if self._depths is None:
            raise ValueError("dataset carries no depth")
        self.guard.depth_reads += 1
        item = self._depths[i]
        if isinstance(item, (str, Path)):
            return read_depth_bin(item)
        return np.asarray(item, dtype=np.float32)
