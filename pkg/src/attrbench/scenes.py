"""Procedural labeled-scene substrate and a color-prototype segmenter.

Scenes are flat-colored shapes on a fixed backdrop, rendered together with a
pixel-exact class-index map. The prototype segmenter classifies pixels by
squared color distance to per-class mean colors; it stands in for both the
surrogate model used during filtering and the models under evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

IGNORE_INDEX = 255

# Named palette shared with the caption/attribute vocabulary. Fills are flat,
# so per-class mean colors are exact mixtures of these anchors.
NAMED_COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.00, 0.05, 0.05),
    "blue": (0.05, 0.10, 1.00),
    "green": (0.05, 0.80, 0.10),
    "yellow": (1.00, 0.90, 0.05),
    "white": (1.00, 1.00, 1.00),
    "black": (0.02, 0.02, 0.02),
    "brown": (0.55, 0.33, 0.10),
    "purple": (0.60, 0.10, 0.75),
    "gray": (0.45, 0.45, 0.45),
}

DEFAULT_CLASS_NAMES = ("backdrop", "circle", "square", "triangle")

# Preferred fills per shape class. Every class can appear in any color, but
# preferred colors dominate, so per-class mean colors separate while color
# itself stays an unreliable cue (which is what the color edits stress).
CLASS_PREFERRED_COLORS = {
    "circle": ("red", "yellow"),
    "square": ("blue", "green"),
    "triangle": ("purple", "brown"),
}


class SceneError(ValueError):
    """Raised for invalid scene specifications or datasets."""


@dataclass(frozen=True)
class Image:
    """H×W×3 image with channel values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise SceneError(f"image must be H×W×3, got shape {p.shape}")
        if p.shape[0] < 8 or p.shape[1] < 8:
            raise SceneError("image sides must be at least 8 pixels")
        if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
            raise SceneError("image values must be finite and in [0, 1]")
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SegLabel:
    """H×W class-index map; ignore_index marks pixels excluded from scoring."""

    classes: np.ndarray
    num_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        c = np.asarray(self.classes)
        if not np.issubdtype(c.dtype, np.integer):
            c = c.astype(np.int64)
        if c.ndim != 2:
            raise SceneError(f"label must be H×W, got shape {c.shape}")
        if self.num_classes < 1:
            raise SceneError("num_classes must be positive")
        valid = c != self.ignore_index
        if valid.any() and (c[valid].min() < 0 or c[valid].max() >= self.num_classes):
            raise SceneError("label contains class ids outside [0, num_classes)")
        object.__setattr__(self, "classes", c.astype(np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape


@dataclass(frozen=True)
class BinaryMask:
    """H×W boolean mask."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise SceneError(f"mask must be H×W, got shape {b.shape}")
        object.__setattr__(self, "bits", b.astype(bool))

    @property
    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class ShapePlacement:
    """One shape instance: kind, class id, fill, center (y, x) and extent.

    ``extent`` is the half-size in pixels: radius for circles, half-side for
    squares, half-base for triangles.
    """

    kind: str
    class_id: int
    color_name: str
    center: tuple[float, float]
    extent: tuple[float, float]

    def color(self) -> tuple[float, float, float]:
        return NAMED_COLORS[self.color_name]


@dataclass(frozen=True)
class SceneSpec:
    height: int = 96
    width: int = 96
    num_classes: int = 4
    background_class: int = 0
    background_color: str = "gray"
    shapes: tuple[ShapePlacement, ...] = ()
    seed: int = 0
    soft_edges: bool = False
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def validate(self):
        if self.height < 8 or self.width < 8:
            raise SceneError("canvas must be at least 8×8")
        if len(self.class_names) != self.num_classes:
            raise SceneError("class_names length must equal num_classes")
        if not (0 <= self.background_class < self.num_classes):
            raise SceneError("background class out of range")
        for s in self.shapes:
            if not (0 <= s.class_id < self.num_classes):
                raise SceneError(f"shape class id {s.class_id} out of range")
            if s.kind not in ("circle", "square", "triangle"):
                raise SceneError(f"unknown shape kind {s.kind!r}")
            if s.color_name not in NAMED_COLORS:
                raise SceneError(f"unknown color {s.color_name!r}")
            cy, cx = s.center
            ey, ex = s.extent
            if ey <= 0 or ex <= 0:
                raise SceneError("shape extent must be positive")
            if cy - ey < 0 or cy + ey > self.height - 1 or cx - ex < 0 or cx + ex > self.width - 1:
                raise SceneError("shape does not fit inside the canvas")


@dataclass(frozen=True)
class ObjectInfo:
    """Metadata for one rendered object."""

    class_id: int
    class_name: str
    color_name: str
    kind: str
    bbox: tuple[int, int, int, int]  # (y0, x0, y1, x1) inclusive
    area_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


def _shape_coverage(spec: SceneSpec, shape: ShapePlacement) -> np.ndarray:
    """Boolean coverage of one shape on the canvas (hard geometric boundary)."""
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    cy, cx = shape.center
    ey, ex = shape.extent
    if shape.kind == "circle":
        return ((yy - cy) / ey) ** 2 + ((xx - cx) / ex) ** 2 <= 1.0
    if shape.kind == "square":
        return (np.abs(yy - cy) <= ey) & (np.abs(xx - cx) <= ex)
    # upward triangle: apex at (cy - ey, cx), base at cy + ey spanning ±ex
    t = (yy - (cy - ey)) / (2.0 * ey)
    t = np.clip(t, 0.0, 1.0)
    inside_y = (yy >= cy - ey) & (yy <= cy + ey)
    return inside_y & (np.abs(xx - cx) <= t * ex)


def generate_scene(spec: SceneSpec) -> tuple[Image, SegLabel, list[ObjectInfo]]:
    """Render a spec into (image, label, object metadata).

    Shapes are painted in order, later shapes over earlier ones. Labels always
    follow the hard geometric boundary; ``soft_edges`` only blurs image colors
    in a one-pixel rim.
    """
    spec.validate()
    pixels = np.empty((spec.height, spec.width, 3), dtype=np.float64)
    pixels[:] = NAMED_COLORS[spec.background_color]
    classes = np.full((spec.height, spec.width), spec.background_class, dtype=np.int64)

    objects: list[ObjectInfo] = []
    total = spec.height * spec.width
    for shape in spec.shapes:
        cover = _shape_coverage(spec, shape)
        pixels[cover] = shape.color()
        classes[cover] = shape.class_id
        ys, xs = np.nonzero(cover)
        if ys.size == 0:
            continue
        objects.append(
            ObjectInfo(
                class_id=shape.class_id,
                class_name=spec.class_names[shape.class_id],
                color_name=shape.color_name,
                kind=shape.kind,
                bbox=(int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())),
                area_fraction=float(ys.size) / total,
            )
        )

    if spec.soft_edges:
        from scipy.ndimage import uniform_filter

        blurred = uniform_filter(pixels, size=(3, 3, 1), mode="nearest")
        edge = np.zeros((spec.height, spec.width), dtype=bool)
        for shape in spec.shapes:
            cover = _shape_coverage(spec, shape)
            interior = np.zeros_like(cover)
            interior[1:-1, 1:-1] = (
                cover[1:-1, 1:-1]
                & cover[:-2, 1:-1]
                & cover[2:, 1:-1]
                & cover[1:-1, :-2]
                & cover[1:-1, 2:]
            )
            edge |= cover & ~interior
        pixels[edge] = blurred[edge]

    return Image(pixels), SegLabel(classes, spec.num_classes), objects


def random_scene_spec(
    seed: int,
    height: int = 96,
    width: int = 96,
    num_classes: int = 4,
    salient_min_fraction: float = 0.22,
    salient_max_fraction: float = 0.40,
    n_distractors: tuple[int, int] = (0, 2),
    square_bias: float = 0.6,
    colors: tuple[str, ...] | None = None,
    palette_bias: float = 0.8,
    grid: int = 4,
) -> SceneSpec:
    """Draw a random spec with one salient object plus small distractors.

    The salient shape's class follows its kind (circle→1, square→2,
    triangle→3). Square centers and extents snap to ``grid`` pixels so their
    block-averaged latents stay exact. Fills come from each class's preferred
    colors with probability ``palette_bias``, else from the rest of the
    palette.
    """
    rng = np.random.default_rng(seed)
    colors = colors or tuple(c for c in NAMED_COLORS if c != "gray")
    kinds = ("circle", "square", "triangle")

    def draw_color(kind: str) -> str:
        preferred = [c for c in CLASS_PREFERRED_COLORS.get(kind, ()) if c in colors]
        others = [c for c in colors if c not in preferred]
        if preferred and (not others or rng.random() < palette_bias):
            return preferred[int(rng.integers(0, len(preferred)))]
        return others[int(rng.integers(0, len(others)))]

    def snap(v: float) -> float:
        return float(int(round(v / grid)) * grid)

    def draw_shape(frac_lo: float, frac_hi: float, exclude_kind: str | None = None) -> ShapePlacement:
        if rng.random() < square_bias and exclude_kind != "square":
            kind = "square"
        else:
            pool = [k for k in ("circle", "triangle") if k != exclude_kind]
            kind = pool[int(rng.integers(0, len(pool)))]
        frac = rng.uniform(frac_lo, frac_hi)
        area = frac * height * width
        if kind == "circle":
            ext = float(np.sqrt(area / np.pi))
        elif kind == "square":
            ext = snap(np.sqrt(area) / 2.0)
            ext = max(ext, float(grid))
        else:
            ext = float(np.sqrt(area / 2.0))  # triangle area = 2·ey·ex with ey=ex
        margin = ext + 2
        if 2 * margin > min(height, width) - 1:
            ext = (min(height, width) - 1) / 2.0 - 2.5
            margin = ext + 2
        cy = rng.uniform(margin, height - 1 - margin)
        cx = rng.uniform(margin, width - 1 - margin)
        if kind == "square":
            cy, cx = snap(cy), snap(cx)
        class_id = 1 + kinds.index(kind)
        color = colors[int(rng.integers(0, len(colors)))]
        return ShapePlacement(kind, class_id, color, (cy, cx), (ext, ext))

    salient = draw_shape(salient_min_fraction, salient_max_fraction)
    shapes = [
        draw_shape(0.01, 0.03, exclude_kind=salient.kind)
        for _ in range(int(rng.integers(n_distractors[0], n_distractors[1] + 1)))
    ]
    shapes.append(salient)  # salient drawn last, on top of any distractor
    return SceneSpec(
        height=height,
        width=width,
        num_classes=num_classes,
        shapes=tuple(shapes),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Prototype segmenter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrototypeSegmenter:
    """Per-class mean-color prototypes with a softmax temperature."""

    prototypes: np.ndarray  # num_classes × 3
    temperature: float = 0.5

    def __post_init__(self):
        p = np.asarray(self.prototypes, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise SceneError("prototypes must be num_classes × 3")
        if not np.isfinite(p).all():
            raise SceneError("prototypes must be finite")
        if self.temperature <= 0:
            raise SceneError("temperature must be positive")
        object.__setattr__(self, "prototypes", p)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def __call__(self, image: "Image") -> np.ndarray:
        """Score-map contract shared by every segmenter backend."""
        return predict_scores(self, image)


def fit_prototype_segmenter(
    dataset: list[tuple[Image, SegLabel]], temperature: float = 0.5
) -> PrototypeSegmenter:
    """Fit prototypes as the mean color over all pixels of each class."""
    if not dataset:
        raise SceneError("dataset is empty")
    num_classes = dataset[0][1].num_classes
    sums = np.zeros((num_classes, 3), dtype=np.float64)
    counts = np.zeros(num_classes, dtype=np.int64)
    for image, label in dataset:
        if label.classes.shape != image.pixels.shape[:2]:
            raise SceneError("image/label shape mismatch")
        for g in range(num_classes):
            sel = label.classes == g
            counts[g] += sel.sum()
            if sel.any():
                sums[g] += image.pixels[sel].sum(axis=0)
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise SceneError(f"class {int(missing[0])} never appears in the dataset")
    return PrototypeSegmenter(sums / counts[:, None], temperature=temperature)


def predict_scores(segmenter: PrototypeSegmenter, image: Image) -> np.ndarray:
    """H×W×num_classes scores: −‖pixel − prototype_g‖² / temperature."""
    diff = image.pixels[:, :, None, :] - segmenter.prototypes[None, None, :, :]
    return -(diff**2).sum(axis=-1) / segmenter.temperature


def predict_probs(segmenter: PrototypeSegmenter, image: Image) -> np.ndarray:
    """Per-pixel class probabilities: softmax of the score map."""
    scores = predict_scores(segmenter, image)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def predict_label(segmenter: PrototypeSegmenter, image: Image) -> SegLabel:
    scores = predict_scores(segmenter, image)
    return SegLabel(scores.argmax(axis=-1), segmenter.num_classes)


LOSS_IGNORED = np.nan


def loss_map(segmenter: PrototypeSegmenter, image: Image, label: SegLabel) -> np.ndarray:
    """Per-pixel cross entropy −log p(labeled class); NaN at ignored pixels."""
    if label.classes.shape != image.pixels.shape[:2]:
        raise SceneError("image/label shape mismatch")
    valid = label.classes != label.ignore_index
    if valid.any():
        mx = label.classes[valid].max()
        if mx >= segmenter.num_classes:
            raise SceneError(f"label class {int(mx)} out of range for segmenter")
    probs = predict_probs(segmenter, image)
    out = np.full(label.classes.shape, LOSS_IGNORED, dtype=np.float64)
    safe = np.where(valid, label.classes, 0)
    picked = np.take_along_axis(probs, safe[:, :, None], axis=-1)[:, :, 0]
    out[valid] = -np.log(np.maximum(picked[valid], 1e-300))
    return out


# ---------------------------------------------------------------------------
# Serialization: 8-bit PNGs plus a JSON sidecar
# ---------------------------------------------------------------------------


def save_scene(
    out_dir: str | Path,
    scene_id: str,
    image: Image,
    label: SegLabel,
    objects: list[ObjectInfo],
    class_names: tuple[str, ...],
    seed: int | None = None,
) -> dict:
    """Write ``{id}.png``, ``{id}_label.png`` and ``{id}.json``; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_path = out_dir / f"{scene_id}.png"
    label_path = out_dir / f"{scene_id}_label.png"
    meta_path = out_dir / f"{scene_id}.json"

    save_image_png(image, img_path)
    save_label_png(label, label_path)
    meta = {
        "id": scene_id,
        "class_names": list(class_names),
        "objects": [o.to_dict() for o in objects],
        "seed": seed,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return {"image": str(img_path), "label": str(label_path), "meta": str(meta_path)}


def save_image_png(image: Image, path: str | Path):
    arr = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path)


def load_image_png(path: str | Path) -> Image:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr)


def save_label_png(label: SegLabel, path: str | Path):
    if label.num_classes > IGNORE_INDEX:
        raise SceneError("cannot serialize labels with more than 255 classes")
    arr = label.classes.astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_label_png(path: str | Path, num_classes: int) -> SegLabel:
    arr = np.asarray(PILImage.open(path), dtype=np.int64)
    return SegLabel(arr, num_classes)


def load_scene(meta_path: str | Path) -> tuple[Image, SegLabel, dict]:
    meta_path = Path(meta_path)
    meta = json.loads(meta_path.read_text())
    scene_id = meta["id"]
    image = load_image_png(meta_path.parent / f"{scene_id}.png")
    label = load_label_png(meta_path.parent / f"{scene_id}_label.png", len(meta["class_names"]))
    return image, label, meta
