"""Object size/position editing: rigid transforms, vacated-area masks,
soft-mask construction, and inpainting orchestration.

The transform moves object pixels (copy semantics: the object is stamped at
its destination, the vacated source pixels keep their stale values until the
inpainter repaints them). Mask and label are transformed with the same
nearest-neighbor map, which keeps them pixel-consistent by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, uniform_filter

from . import scenes
from .prompt import PromptBackendError

log = logging.getLogger(__name__)

REPAINT_TEMPLATE = (
    "If the size or position of the {object_name} is changed, "
    "what is the remaining area that should be filled?"
)

_MAX_DIRECTION_TRIES = 32


class GeometryError(RuntimeError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    """Diagonal scaling about an anchor plus a translation, in pixels."""

    e_x: float = 1.0
    e_y: float = 1.0
    b_x: float = 0.0
    b_y: float = 0.0
    anchor: tuple[float, float] = (0.0, 0.0)  # (y, x)

    def __post_init__(self):
        if self.e_x <= 0 or self.e_y <= 0:
            raise GeometryError("scale factors must be positive")

    def map_points(self, ys: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ay, ax = self.anchor
        dy = np.rint(ay + self.e_y * (ys - ay) + self.b_y).astype(np.int64)
        dx = np.rint(ax + self.e_x * (xs - ax) + self.b_x).astype(np.int64)
        return dy, dx

    def to_dict(self) -> dict:
        return {
            "e_x": self.e_x, "e_y": self.e_y,
            "b_x": self.b_x, "b_y": self.b_y,
            "anchor": [float(self.anchor[0]), float(self.anchor[1])],
        }


@dataclass(frozen=True)
class GeometryEditSpec:
    kind: str  # "size" | "position"
    level: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("size", "position"):
            raise GeometryError(f"unknown geometry edit kind {self.kind!r}")
        if not (0.0 < self.level < 1.0):
            raise GeometryError("level must lie in (0, 1)")


def apply_rigid(array: np.ndarray, transform: RigidTransform, object_mask: np.ndarray, vacate_fill=None) -> np.ndarray:
    """Move the masked pixels of ``array`` through the transform.

    ``vacate_fill`` (when given) is written over the source region before the
    destination pixels are stamped; pass it for masks/labels, leave None for
    images so the stale pixels remain for the inpainter. Destination pixels
    never hit by a source pixel keep the underlying value. Out-of-bounds
    destinations raise.
    """
    mask = np.asarray(object_mask, dtype=bool)
    if mask.shape != array.shape[:2]:
        raise GeometryError("object mask shape must match the array")
    if not mask.any():
        raise GeometryError("object mask is empty")
    ys, xs = np.nonzero(mask)
    dy, dx = transform.map_points(ys, xs)
    h, w = mask.shape
    if dy.min() < 0 or dy.max() >= h or dx.min() < 0 or dx.max() >= w:
        raise GeometryError("transform pushes object pixels out of bounds")
    out = array.copy()
    if vacate_fill is not None:
        out[mask] = vacate_fill
    out[dy, dx] = array[ys, xs]
    return out


def remaining_mask(mask: scenes.BinaryMask, mask_star: scenes.BinaryMask) -> scenes.BinaryMask:
    """Vacated region: original mask minus its overlap with the moved mask."""
    if mask.bits.shape != mask_star.bits.shape:
        raise GeometryError("mask shapes differ")
    return scenes.BinaryMask(mask.bits & ~mask_star.bits)


def soften_mask(mask_prime: scenes.BinaryMask) -> np.ndarray:
    """5×5 dilation then 3×3 box smoothing; interior 1, far exterior 0."""
    bits = mask_prime.bits
    if not bits.any():
        return np.zeros(bits.shape, dtype=np.float64)
    dilated = binary_dilation(bits, structure=np.ones((5, 5), dtype=bool))
    return uniform_filter(dilated.astype(np.float64), size=3, mode="nearest")


def repaint_prompt(client, object_name: str, fallback: str = "background") -> str:
    """Ask the vision-language backend what fills the vacated area.

    ``client`` follows the language-client contract (template, caption) →
    candidates; None or a failing backend falls back to the scene's
    background class name.
    """
    if not object_name:
        raise GeometryError("object name must be non-empty")
    if client is None:
        return fallback
    template = REPAINT_TEMPLATE.format(object_name=object_name)
    try:
        candidates = client.candidates(template, object_name)
    except PromptBackendError as err:
        log.warning("repaint prompt backend failed (%s); using %r", err, fallback)
        return fallback
    return candidates[0] if candidates else fallback


class InpainterInterface:
    """Contract: (image, soft mask, structure label, text prompt) → image.

    Pixels where the soft mask is exactly 0 must come back bit-identical.
    """

    def __call__(self, image: scenes.Image, soft_mask: np.ndarray, structure: scenes.SegLabel, prompt: str) -> scenes.Image:
        raise NotImplementedError


class PrototypeInpainter(InpainterInterface):
    """Fills the masked region with per-class prototype colors."""

    def __init__(self, prototypes: np.ndarray):
        self.prototypes = np.clip(np.asarray(prototypes, dtype=np.float64), 0.0, 1.0)

    def __call__(self, image, soft_mask, structure, prompt):
        classes = np.clip(structure.classes, 0, self.prototypes.shape[0] - 1)
        fill = self.prototypes[classes]
        soft = soft_mask[:, :, None]
        blended = (1.0 - soft) * image.pixels + soft * fill
        out = np.where(soft > 0, blended, image.pixels)
        return scenes.Image(out)


class DiffusionInpainter(InpainterInterface):
    """Regenerates the image with the diffusion backend and composites the
    masked region; the structure condition and the repaint prompt steer it."""

    def __init__(self, denoiser, steps: int = 50, schedule_kind: str = "linear"):
        from .diffusion import make_schedule

        self.denoiser = denoiser
        self.schedule = make_schedule(steps, schedule_kind)

    def __call__(self, image, soft_mask, structure, prompt):
        import torch

        from .diffusion import ddim_invert, ddim_step
        from .diffusion.toy_unet import decode_latent, encode_latent

        ids = self.denoiser.tokenizer.encode(prompt) or [0]
        struct = None
        if hasattr(self.denoiser, "prepare_structure"):
            struct = self.denoiser.prepare_structure(structure)
        z = ddim_invert(encode_latent(image), self.denoiser, ids, self.schedule, structure=struct)[-1]
        for tau in range(self.schedule.T, 0, -1):
            eps = self.denoiser(z, tau, ids, structure=struct).eps
            z = ddim_step(z, eps, tau, self.schedule)
        repainted = decode_latent(z, image.pixels.shape[:2]).pixels
        soft = soft_mask[:, :, None]
        blended = (1.0 - soft) * image.pixels + soft * repainted
        out = np.where(soft > 0, blended, image.pixels)
        return scenes.Image(out)


@dataclass
class GeometryResult:
    image: scenes.Image
    label: scenes.SegLabel
    mask: scenes.BinaryMask
    remaining: scenes.BinaryMask
    soft_mask: np.ndarray
    transform: RigidTransform
    log: dict


def _dominant_adjacent_background(label: scenes.SegLabel, region: np.ndarray, object_class: int) -> int:
    """Most common non-object class in the ring around the vacated region."""
    if region.any():
        ring = binary_dilation(region, structure=np.ones((3, 3), dtype=bool)) & ~region
    else:
        ring = np.zeros_like(region)
    candidates = label.classes[ring]
    candidates = candidates[(candidates != object_class) & (candidates != label.ignore_index)]
    if candidates.size == 0:
        candidates = label.classes[
            (label.classes != object_class) & (label.classes != label.ignore_index)
        ]
    if candidates.size == 0:
        return 0
    return int(np.bincount(candidates).argmax())


def build_transform(spec: GeometryEditSpec, object_mask: np.ndarray, shape: tuple[int, int]) -> RigidTransform:
    """Level → concrete transform; position directions are resampled until the
    whole object stays inside the image (bounded tries, then error)."""
    ys, xs = np.nonzero(object_mask)
    if ys.size == 0:
        raise GeometryError("object mask is empty")
    anchor = (float(ys.mean()), float(xs.mean()))
    h, w = shape
    if spec.kind == "size":
        e = 1.0 - spec.level
        return RigidTransform(e_x=e, e_y=e, anchor=anchor)
    dist = spec.level * min(h, w)
    rng = np.random.default_rng(spec.seed)
    for _ in range(_MAX_DIRECTION_TRIES):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        tf = RigidTransform(
            b_y=dist * np.sin(angle), b_x=dist * np.cos(angle), anchor=anchor
        )
        dy, dx = tf.map_points(ys, xs)
        if dy.min() >= 0 and dy.max() < h and dx.min() >= 0 and dx.max() < w:
            return tf
    raise GeometryError(
        f"no direction keeps the object inside bounds at level {spec.level}"
    )


def edit_geometry(
    image: scenes.Image,
    label: scenes.SegLabel,
    object_mask: scenes.BinaryMask,
    spec: GeometryEditSpec,
    inpainter: InpainterInterface,
    prompt_client=None,
    class_names: tuple[str, ...] | None = None,
) -> GeometryResult:
    """Transform the object, relabel the vacated area, and repaint it."""
    bits = object_mask.bits
    if bits.shape != label.classes.shape:
        raise GeometryError("mask/label shape mismatch")
    under = label.classes[bits]
    object_class = int(np.bincount(under[under != label.ignore_index]).argmax())
    tf = build_transform(spec, bits, bits.shape)

    mask_star = scenes.BinaryMask(apply_rigid(bits, tf, bits, vacate_fill=False))
    image_moved = scenes.Image(
        np.clip(apply_rigid(image.pixels, tf, bits), 0.0, 1.0)
    )
    placeholder = -1
    moved_label = apply_rigid(label.classes, tf, bits, vacate_fill=placeholder)
    m_prime = remaining_mask(object_mask, mask_star)
    bg_class = _dominant_adjacent_background(label, m_prime.bits, object_class)
    moved_label[moved_label == placeholder] = bg_class
    label_star = scenes.SegLabel(moved_label, label.num_classes, label.ignore_index)

    soft = soften_mask(m_prime)
    # the moved object must not be repainted over
    soft = np.where(mask_star.bits, 0.0, soft)
    object_name = class_names[object_class] if class_names else f"class {object_class}"
    background_name = class_names[bg_class] if class_names else f"class {bg_class}"
    prompt = repaint_prompt(prompt_client, object_name, fallback=background_name)

    repainted = inpainter(image_moved, soft, label_star, prompt)
    log_payload = {
        "kind": spec.kind,
        "level": spec.level,
        **tf.to_dict(),
        "direction": float(np.arctan2(tf.b_y, tf.b_x)) if spec.kind == "position" else None,
        "inpaint_area_fraction": float((soft > 0).mean()),
        "prompt": prompt,
        "object_class": object_class,
        "background_class": bg_class,
    }
    return GeometryResult(
        image=repainted,
        label=label_star,
        mask=mask_star,
        remaining=m_prime,
        soft_mask=soft,
        transform=tf,
        log=log_payload,
    )
