"""Two-stage noise filtering: embedding-space sample gates and per-pixel
loss-deviation masking against a surrogate segmenter.

Sample stage: directional similarity between the image-edit and text-edit
embedding directions, image-image similarity, and image-text similarity, each
gated by a threshold (inclusive). Pixel stage: per-class mean losses profiled
on clean data; generated pixels whose loss deviates from the class mean by
more than a factor alpha (either way) are dropped from evaluation, and
samples whose dropped area is too large are discarded outright.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import scenes
from .prompt import tokenize

EMBED_DIM = 32


class FilterError(ValueError):
    pass


class ZeroEditError(FilterError):
    """An edit direction is the zero vector: nothing measurable changed."""


@dataclass(frozen=True)
class FilterThresholds:
    min_directional: float = 0.2
    min_image_image: float = 0.7
    min_image_text: float = 0.2
    max_noisy_area_fraction: float = 0.10

    def __post_init__(self):
        for v in (self.min_directional, self.min_image_image, self.min_image_text):
            if not -1.0 <= v <= 1.0:
                raise FilterError("similarity thresholds must lie in [-1, 1]")
        if not 0.0 <= self.max_noisy_area_fraction <= 1.0:
            raise FilterError("area fraction must lie in [0, 1]")


class EmbedderInterface:
    """Image and text encoders into one shared, L2-normalized space."""

    def embed_image(self, image: scenes.Image) -> np.ndarray:
        raise NotImplementedError

    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError


class ConceptEmbedder(EmbedderInterface):
    """Test double: color-anchor histograms and bag-of-words share one basis.

    Pixels soft-assign to the named color anchors; color words hit the same
    anchor dimensions; other words hash into the remaining dimensions. A
    seeded orthogonal rotation mixes the basis, so embeddings look generic
    while cosines are preserved exactly.
    """

    def __init__(self, seed: int = 0, word_weight: float = 0.5):
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((EMBED_DIM, EMBED_DIM)))
        self.rotation = q
        self.word_weight = word_weight
        self.anchor_names = tuple(scenes.NAMED_COLORS)
        self.anchors = np.array([scenes.NAMED_COLORS[c] for c in self.anchor_names])
        self._anchor_index = {c: i for i, c in enumerate(self.anchor_names)}

    def _finish(self, raw: np.ndarray) -> np.ndarray:
        vec = self.rotation @ raw
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec = self.rotation @ np.eye(EMBED_DIM)[0]
            norm = 1.0
        return vec / norm

    def embed_image(self, image: scenes.Image) -> np.ndarray:
        px = image.pixels.reshape(-1, 3)
        d2 = ((px[:, None, :] - self.anchors[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        hist = np.bincount(nearest, minlength=len(self.anchor_names)) / px.shape[0]
        raw = np.zeros(EMBED_DIM)
        raw[: len(hist)] = hist
        raw[len(hist) : len(hist) + 3] = px.mean(axis=0)
        return self._finish(raw)

    def embed_text(self, text: str) -> np.ndarray:
        raw = np.zeros(EMBED_DIM)
        base = len(self.anchor_names) + 3
        for word in tokenize(text):
            if word in self._anchor_index:
                raw[self._anchor_index[word]] += 1.0
            else:
                slot = base + (hash_word(word) % (EMBED_DIM - base))
                raw[slot] += self.word_weight
        return self._finish(raw)


def hash_word(word: str) -> int:
    h = 0
    for ch in word:
        h = (h * 131 + ord(ch)) % 1_000_003
    return h


def _check_unit(name: str, v: np.ndarray):
    if abs(float(np.linalg.norm(v)) - 1.0) > 1e-5:
        raise FilterError(f"{name} is not a unit vector")


def directional_similarity(v_i: np.ndarray, v_i_star: np.ndarray, v_t: np.ndarray, v_t_star: np.ndarray) -> float:
    """Cosine between the image edit direction and the text edit direction."""
    for name, v in (("vI", v_i), ("vI*", v_i_star), ("vT", v_t), ("vT*", v_t_star)):
        _check_unit(name, v)
    d_img = v_i - v_i_star
    d_txt = v_t - v_t_star
    n_img = float(np.linalg.norm(d_img))
    n_txt = float(np.linalg.norm(d_txt))
    if n_img == 0.0:
        raise ZeroEditError("image edit direction is zero")
    if n_txt == 0.0:
        raise ZeroEditError("text edit direction is zero")
    return float(d_img @ d_txt) / (n_img * n_txt)


@dataclass
class SampleDecision:
    accepted: bool
    directional: float | None
    image_image: float
    image_text: float
    reason: str = ""


def sample_filter(
    image: scenes.Image,
    image_star: scenes.Image,
    prompt: str,
    prompt_star: str,
    embedder: EmbedderInterface,
    thresholds: FilterThresholds = FilterThresholds(),
    text_edit: bool = True,
) -> SampleDecision:
    """Accept a generated sample iff all similarity gates pass (inclusive ≥).

    ``text_edit=False`` (geometry edits: the caption is unchanged) skips the
    directional gate, which is undefined without a text direction.
    """
    v_i = embedder.embed_image(image)
    v_i_star = embedder.embed_image(image_star)
    image_image = float(v_i @ v_i_star)
    v_t_star = embedder.embed_text(prompt_star)
    image_text = float(v_i_star @ v_t_star)

    directional = None
    if text_edit:
        v_t = embedder.embed_text(prompt)
        try:
            directional = directional_similarity(v_i, v_i_star, v_t, v_t_star)
        except ZeroEditError as err:
            return SampleDecision(False, None, image_image, image_text, reason=str(err))

    checks = [
        ("image_image", image_image, thresholds.min_image_image),
        ("image_text", image_text, thresholds.min_image_text),
    ]
    if directional is not None:
        checks.append(("directional", directional, thresholds.min_directional))
    for name, value, bound in checks:
        if value < bound:
            return SampleDecision(
                False, directional, image_image, image_text,
                reason=f"{name} {value:.4f} < {bound}",
            )
    return SampleDecision(True, directional, image_image, image_text)


# ---------------------------------------------------------------------------
# Pixel-level filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassLossProfile:
    """Per-class mean cross entropy on clean data; the deviation yardstick."""

    losses: np.ndarray  # (num_classes,)
    counts: np.ndarray  # (num_classes,)
    alpha: float = 2.0

    def __post_init__(self):
        l = np.asarray(self.losses, dtype=np.float64)
        c = np.asarray(self.counts, dtype=np.int64)
        if l.ndim != 1 or c.shape != l.shape:
            raise FilterError("profile arrays must be 1-D and congruent")
        if (l < 0).any():
            raise FilterError("class losses must be nonnegative")
        if self.alpha <= 1.0:
            raise FilterError("alpha must exceed 1")
        object.__setattr__(self, "losses", l)
        object.__setattr__(self, "counts", c)


def loss_map_from_scores(scores: np.ndarray, label: scenes.SegLabel) -> np.ndarray:
    """Per-pixel cross entropy from a raw score map; NaN at ignored pixels."""
    classes = label.classes
    valid = classes != label.ignore_index
    shifted = scores - scores.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    safe = np.where(valid, classes, 0)
    picked = np.take_along_axis(shifted, safe[:, :, None], axis=-1)[:, :, 0]
    out = np.full(classes.shape, np.nan)
    out[valid] = (logz - picked)[valid]
    return out


def class_loss_profile(dataset, segmenter, alpha: float = 2.0) -> ClassLossProfile:
    """Mean per-class loss over a dataset; order-independent accumulation.

    ``segmenter`` follows the score-map contract (image → H×W×K scores).
    Ignored pixels are excluded; a class absent from the dataset is an error.
    """
    if not dataset:
        raise FilterError("dataset is empty")
    num_classes = dataset[0][1].num_classes
    sums: list[list[float]] = [[] for _ in range(num_classes)]
    counts = np.zeros(num_classes, dtype=np.int64)
    for image, label in dataset:
        lm = loss_map_from_scores(segmenter(image), label)
        for g in range(num_classes):
            sel = (label.classes == g) & (label.classes != label.ignore_index)
            n = int(sel.sum())
            if n:
                sums[g].append(float(lm[sel].sum()))
                counts[g] += n
    missing = [g for g in range(num_classes) if counts[g] == 0]
    if missing:
        raise FilterError(f"class {missing[0]} absent from the profiling dataset")
    losses = np.array(
        [math.fsum(sorted(sums[g])) / counts[g] for g in range(num_classes)]
    )
    return ClassLossProfile(losses=losses, counts=counts, alpha=alpha)


def pixel_filter(
    loss_map: np.ndarray, label_star: scenes.SegLabel, profile: ClassLossProfile
) -> tuple[scenes.SegLabel, float]:
    """Mask pixels whose loss deviates from the class mean by > alpha either way.

    Returns the label with flagged pixels set to ignore_index and the flagged
    fraction of previously-valid pixels. Boundaries are strict: a loss exactly
    at alpha·l or l/alpha is kept.
    """
    classes = label_star.classes
    if loss_map.shape != classes.shape:
        raise FilterError("loss map/label shape mismatch")
    valid = classes != label_star.ignore_index
    present = np.unique(classes[valid])
    uncovered = [int(g) for g in present if g >= len(profile.losses) or profile.counts[g] == 0]
    if uncovered:
        raise FilterError(f"profile does not cover class {uncovered[0]}")

    l_ref = np.zeros(classes.shape)
    l_ref[valid] = profile.losses[classes[valid]]
    with np.errstate(invalid="ignore"):
        noisy = valid & (
            (loss_map > profile.alpha * l_ref) | (loss_map < l_ref / profile.alpha)
        )
    total = int(valid.sum())
    fraction = float(noisy.sum()) / total if total else 0.0
    out = classes.copy()
    out[noisy] = label_star.ignore_index
    return scenes.SegLabel(out, label_star.num_classes, label_star.ignore_index), fraction


def region_discard(noisy_fraction: float, thresholds: FilterThresholds = FilterThresholds()) -> bool:
    """Discard the sample iff the flagged fraction strictly exceeds the cap."""
    if not 0.0 <= noisy_fraction <= 1.0:
        raise FilterError("noisy fraction must lie in [0, 1]")
    return noisy_fraction > thresholds.max_noisy_area_fraction


@dataclass
class FilterRecord:
    """One sample's filtering outcome, serialized as a JSON line."""

    sample_id: str
    directional: float | None
    image_image: float | None
    image_text: float | None
    accepted: bool
    noisy_pixel_fraction: float
    discarded: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_filter_report(records, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_filter_report(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
