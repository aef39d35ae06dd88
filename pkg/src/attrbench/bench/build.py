"""Benchmark construction: salient-object selection, variation synthesis,
filtering, persistence, and evaluation against a segmenter backend.

Layout under ``<out>/<name>/``: ``manifest.json``, one directory per subset
(``original``, ``recon``, ``color``, ``size_0.2``, ...) holding PNGs plus one
JSON record per sample, and ``logs/`` with per-edit logs and the filter
report. The manifest carries a hash over every written file, so identical
seeds and configs must produce identical manifest hashes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import scenes
from ..appearance import AppearanceError, EditConfig, edit_appearance, reconstruct
from ..config import PipelineConfig
from ..filtering import (
    FilterRecord,
    FilterError,
    class_loss_profile,
    loss_map_from_scores,
    pixel_filter,
    region_discard,
    sample_filter,
    write_filter_report,
)
from ..geometry import (
    GeometryEditSpec,
    GeometryError,
    edit_geometry,
)
from ..prompt import (
    DEFAULT_ATTRIBUTE_VOCAB,
    AttributeKind,
    PromptError,
    caption_for_object,
    decompose_caption,
    edit_attribute,
)
from .metrics import RobustnessReport, miou_from_confusion, confusion_matrix, split_plan_families

log = logging.getLogger(__name__)

SALIENT_FRACTION = 0.20


class BackendError(RuntimeError):
    """A required backend is missing or unusable; aborts the whole batch."""


@dataclass
class Backends:
    denoiser: object = None
    inpainter: object = None
    embedder: object = None
    surrogate: object = None  # segmenter contract: image -> H×W×K scores
    language_client: object = None


@dataclass
class SceneSample:
    id: str
    image: scenes.Image
    label: scenes.SegLabel
    meta: dict


@dataclass
class SalientSample:
    base: SceneSample
    mask: scenes.BinaryMask
    object_class: int
    caption: str

    @property
    def id(self) -> str:
        return self.base.id


@dataclass
class SampleRecord:
    id: str
    subset: str
    image: str
    label: str  # filtered label used for evaluation
    raw_label: str  # unfiltered counterpart (re-filtering input)
    original_image: str
    original_label: str
    eval_mask: str | None
    variation: dict
    filter_metrics: dict
    provenance: dict

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class BenchmarkSet:
    name: str
    root: Path
    class_names: tuple[str, ...]
    subsets: dict[str, list[SampleRecord]]
    manifest: dict

    def subset_names(self):
        return list(self.subsets)


# ---------------------------------------------------------------------------
# Dataset generation and salient-object selection
# ---------------------------------------------------------------------------


def generate_dataset(config: PipelineConfig, seed: int) -> list[SceneSample]:
    """Procedural scene dataset; sample i is a pure function of (seed, i)."""
    out = []
    sc = config.scenes
    for i in range(sc.count):
        spec_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        spec = scenes.random_scene_spec(
            seed=spec_seed,
            height=sc.height,
            width=sc.width,
            num_classes=sc.num_classes,
            salient_min_fraction=sc.salient_min_fraction,
            salient_max_fraction=sc.salient_max_fraction,
            square_bias=sc.square_bias,
        )
        image, label, objects = scenes.generate_scene(spec)
        out.append(
            SceneSample(
                id=f"s{i:04d}",
                image=image,
                label=label,
                meta={
                    "class_names": list(spec.class_names),
                    "objects": [o.to_dict() for o in objects],
                    "seed": spec_seed,
                },
            )
        )
    return out


def _nearest_color_name(mean_rgb: np.ndarray) -> str:
    best, best_d = "gray", np.inf
    for name, rgb in scenes.NAMED_COLORS.items():
        d = float(((mean_rgb - np.asarray(rgb)) ** 2).sum())
        if d < best_d:
            best, best_d = name, d
    return best


def training_triples(dataset: list[SceneSample]):
    """(image, caption, label) triples for denoiser training.

    Uses each scene's largest object for the caption regardless of the
    salient-area rule, so small-object scenes still contribute.
    """
    out = []
    for sample in dataset:
        objects = sample.meta.get("objects", [])
        if not objects:
            continue
        top = max(objects, key=lambda o: o["area_fraction"])
        caption = caption_for_object(top["color_name"], top["class_name"])
        out.append((sample.image, caption, sample.label))
    return out


def select_salient(dataset: list[SceneSample], threshold: float = SALIENT_FRACTION) -> list[SalientSample]:
    """Keep images whose largest foreground object covers > threshold of the
    image, and emit that object's mask and caption.

    Objects are connected components of a single non-background class
    (class 0 is the background by convention).
    """
    from scipy.ndimage import label as cc_label

    out = []
    for sample in dataset:
        classes = sample.label.classes
        total = classes.size
        best_mask, best_size, best_class = None, 0, None
        for g in range(1, sample.label.num_classes):
            comp, n = cc_label(classes == g)
            for c in range(1, n + 1):
                m = comp == c
                size = int(m.sum())
                if size > best_size:
                    best_mask, best_size, best_class = m, size, g
        if best_mask is None or best_size / total <= threshold:
            continue
        class_names = sample.meta.get("class_names") or [
            f"class {i}" for i in range(sample.label.num_classes)
        ]
        color_name = None
        for obj in sample.meta.get("objects", []):
            if obj.get("class_id") == best_class:
                color_name = obj.get("color_name")
        if color_name is None:
            color_name = _nearest_color_name(sample.image.pixels[best_mask].mean(axis=0))
        caption = caption_for_object(color_name, class_names[best_class])
        out.append(
            SalientSample(
                base=sample,
                mask=scenes.BinaryMask(best_mask),
                object_class=int(best_class),
                caption=caption,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Variation plan parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Variation:
    family: str  # "appearance" | "geometry"
    subset: str
    kind: str
    level: float | None = None

    @property
    def attribute(self) -> AttributeKind:
        return AttributeKind(self.kind)


def parse_plan(plan) -> list[Variation]:
    out = []
    for item in plan:
        if ":" in item:
            kind, level = item.split(":", 1)
            if kind not in ("size", "position"):
                raise BackendError(f"unknown geometry variation {item!r}")
            out.append(Variation("geometry", f"{kind}_{level}", kind, float(level)))
        else:
            if item not in [k.value for k in AttributeKind]:
                raise BackendError(f"unknown appearance variation {item!r}")
            out.append(Variation("appearance", item, item))
    return out


# ---------------------------------------------------------------------------
# Build
# ---------------------------------------------------------------------------


def _sample_rng(seed: int, sample_id: str, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{sample_id}:{tag}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _save_pair(dirpath: Path, sid: str, image: scenes.Image, label: scenes.SegLabel):
    scenes.save_image_png(image, dirpath / f"{sid}.png")
    scenes.save_label_png(label, dirpath / f"{sid}_label.png")


def _save_mask(dirpath: Path, sid: str, mask: scenes.BinaryMask) -> str:
    from PIL import Image as PILImage

    path = dirpath / f"{sid}_mask.png"
    PILImage.fromarray((mask.bits * 255).astype(np.uint8), mode="L").save(path)
    return str(path.name)


def _load_mask(path: Path) -> scenes.BinaryMask:
    from PIL import Image as PILImage

    return scenes.BinaryMask(np.asarray(PILImage.open(path)) > 127)


def _edit_value(rng, kind: AttributeKind, parts) -> str:
    vocab = DEFAULT_ATTRIBUTE_VOCAB[kind]
    current = set(parts.adjective_texts)
    choices = [v for v in vocab if v not in current] or list(vocab)
    return choices[int(rng.integers(0, len(choices)))]


def build_benchmark(
    dataset: list[SceneSample],
    plan,
    backends: Backends,
    config: PipelineConfig,
    seed: int,
    out_dir: str | Path,
) -> BenchmarkSet:
    """Run every planned variation over the salient samples, filter, persist.

    Per-sample failures are logged and skipped; only missing backends abort.
    Deterministic for a fixed (config, seed): the manifest hash is stable.
    """
    variations = parse_plan(plan)
    if backends.denoiser is None and any(v.family == "appearance" for v in variations):
        raise BackendError("appearance variations require a denoiser backend")
    if backends.inpainter is None and any(v.family == "geometry" for v in variations):
        raise BackendError("geometry variations require an inpainter backend")
    if backends.embedder is None:
        raise BackendError("sample filtering requires an embedder backend")

    root = Path(out_dir) / config.benchmark_name
    root.mkdir(parents=True, exist_ok=True)
    logs_dir = root / "logs"
    logs_dir.mkdir(exist_ok=True)

    salient = select_salient(dataset)
    if not salient:
        raise BackendError("no salient samples survive the area rule")
    class_names = tuple(salient[0].base.meta["class_names"])

    surrogate = backends.surrogate
    if surrogate is None:
        surrogate = scenes.fit_prototype_segmenter(
            [(s.image, s.label) for s in dataset], temperature=config.segmenter_temperature
        )
    profile = class_loss_profile(
        [(s.image, s.label) for s in dataset], surrogate, alpha=config.filter_alpha
    )

    subsets: dict[str, list[SampleRecord]] = {"original": [], "recon": []}
    for v in variations:
        subsets[v.subset] = []
    filter_records: list[FilterRecord] = []
    edit_logs: dict[str, dict] = {}
    config_hash = config.config_hash()

    def provenance(sample):
        return {"seed": seed, "scene_seed": sample.base.meta.get("seed"), "config_hash": config_hash}

    def work(sample: SalientSample):
        """All variations for one sample; returns (records, filter rows, logs)."""
        records: list[tuple[str, SampleRecord]] = []
        rows: list[FilterRecord] = []
        logs: dict[str, dict] = {}
        sid = sample.id
        image, label = sample.base.image, sample.base.label

        orig_dir = root / "original"
        orig_dir.mkdir(exist_ok=True)
        _save_pair(orig_dir, sid, image, label)
        mask_name = _save_mask(orig_dir, sid, sample.mask)
        records.append(
            (
                "original",
                SampleRecord(
                    id=sid, subset="original",
                    image=f"original/{sid}.png", label=f"original/{sid}_label.png",
                    raw_label=f"original/{sid}_label.png",
                    original_image=f"original/{sid}.png", original_label=f"original/{sid}_label.png",
                    eval_mask=f"original/{mask_name}",
                    variation={"kind": "original"},
                    filter_metrics={},
                    provenance=provenance(sample),
                ),
            )
        )

        # Recon subset: invert + denoise with the unedited caption.
        if backends.denoiser is not None:
            recon_img = reconstruct(image, label, sample.caption, backends.denoiser, config.edit)
            lm = loss_map_from_scores(surrogate(recon_img), label)
            recon_label, frac = pixel_filter(lm, label, profile)
            recon_dir = root / "recon"
            recon_dir.mkdir(exist_ok=True)
            _save_pair(recon_dir, sid, recon_img, recon_label)
            rows.append(FilterRecord(f"{sid}/recon", None, None, None, True, frac, False))
            records.append(
                (
                    "recon",
                    SampleRecord(
                        id=sid, subset="recon",
                        image=f"recon/{sid}.png", label=f"recon/{sid}_label.png",
                        raw_label=f"original/{sid}_label.png",
                        original_image=f"original/{sid}.png", original_label=f"original/{sid}_label.png",
                        eval_mask=f"original/{mask_name}",
                        variation={"kind": "recon", "caption": sample.caption},
                        filter_metrics={"noisy_pixel_fraction": frac},
                        provenance=provenance(sample),
                    ),
                )
            )

        for vi, variation in enumerate(variations):
            rng = _sample_rng(seed, sid, variation.subset)
            try:
                if variation.family == "appearance":
                    rec, row, payload = _appearance_variation(
                        sample, variation, rng, backends, config, surrogate, profile, root,
                        provenance(sample), mask_name,
                    )
                else:
                    rec, row, payload = _geometry_variation(
                        sample, variation, rng, backends, config, surrogate, profile, root,
                        provenance(sample),
                    )
            except (AppearanceError, GeometryError, PromptError, FilterError, scenes.SceneError) as err:
                log.warning("skipping %s/%s: %s", sid, variation.subset, err)
                continue
            rows.append(row)
            logs[f"{variation.subset}_{sid}"] = payload
            if rec is not None:
                records.append((variation.subset, rec))
        return records, rows, logs

    ordered = sorted(salient, key=lambda s: s.id)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(work, ordered))
    else:
        results = [work(s) for s in ordered]

    for records, rows, logs in results:
        for subset, rec in records:
            subsets[subset].append(rec)
        filter_records.extend(rows)
        edit_logs.update(logs)

    write_filter_report(filter_records, logs_dir / "filter_report.jsonl")
    for name, payload in sorted(edit_logs.items()):
        (logs_dir / f"{name}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    manifest = {
        "name": config.benchmark_name,
        "class_names": list(class_names),
        "config": config.to_dict(),
        "config_hash": config_hash,
        "seed": seed,
        "plan": list(plan),
        "subsets": {
            name: [rec.to_dict() for rec in sorted(recs, key=lambda r: r.id)]
            for name, recs in subsets.items()
        },
    }
    manifest["files"] = _hash_files(root)
    manifest["benchmark_hash"] = _manifest_hash(manifest)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return BenchmarkSet(
        name=config.benchmark_name,
        root=root,
        class_names=class_names,
        subsets={k: sorted(v, key=lambda r: r.id) for k, v in subsets.items()},
        manifest=manifest,
    )


def _appearance_variation(
    sample, variation, rng, backends, config, surrogate, profile, root, provenance, mask_name
):
    kind = variation.attribute
    parts = decompose_caption(sample.caption)
    value = _edit_value(rng, kind, parts)
    request = edit_attribute(parts, kind, value)
    result = edit_appearance(
        sample.base.image, sample.base.label, sample.mask, request,
        backends.denoiser, config.edit,
    )
    decision = sample_filter(
        sample.base.image, result.edited, sample.caption, request.target_text,
        backends.embedder, config.thresholds,
    )
    lm = loss_map_from_scores(surrogate(result.edited), sample.base.label)
    filtered_label, frac = pixel_filter(lm, sample.base.label, profile)
    discarded = region_discard(frac, config.thresholds)
    accepted = decision.accepted and not discarded

    row = FilterRecord(
        f"{sample.id}/{variation.subset}",
        decision.directional, decision.image_image, decision.image_text,
        decision.accepted, frac, discarded,
    )
    payload = {
        "sample_id": sample.id,
        "attribute": kind.value,
        "P": sample.caption,
        "P*": request.target_text,
        "S'": list(request.edit_indices),
        **result.state.to_dict(),
    }
    if not accepted:
        return None, row, payload

    subset_dir = root / variation.subset
    subset_dir.mkdir(exist_ok=True)
    _save_pair(subset_dir, sample.id, result.edited, filtered_label)
    rec = SampleRecord(
        id=sample.id, subset=variation.subset,
        image=f"{variation.subset}/{sample.id}.png",
        label=f"{variation.subset}/{sample.id}_label.png",
        raw_label=f"original/{sample.id}_label.png",
        original_image=f"original/{sample.id}.png",
        original_label=f"original/{sample.id}_label.png",
        eval_mask=f"original/{mask_name}",
        variation={"kind": kind.value, "value": value, "caption_star": request.target_text},
        filter_metrics={
            "directional": decision.directional,
            "image_image": decision.image_image,
            "image_text": decision.image_text,
            "noisy_pixel_fraction": frac,
        },
        provenance=provenance,
    )
    return rec, row, payload


def _geometry_variation(
    sample, variation, rng, backends, config, surrogate, profile, root, provenance
):
    spec = GeometryEditSpec(
        kind=variation.kind, level=variation.level,
        seed=int(rng.integers(0, 2**31 - 1)),
    )
    class_names = tuple(sample.base.meta["class_names"])
    result = edit_geometry(
        sample.base.image, sample.base.label, sample.mask, spec,
        backends.inpainter, prompt_client=backends.language_client,
        class_names=class_names,
    )
    decision = sample_filter(
        sample.base.image, result.image, sample.caption, sample.caption,
        backends.embedder, config.thresholds, text_edit=False,
    )
    lm = loss_map_from_scores(surrogate(result.image), result.label)
    filtered_label, frac = pixel_filter(lm, result.label, profile)
    discarded = region_discard(frac, config.thresholds)
    accepted = decision.accepted and not discarded

    row = FilterRecord(
        f"{sample.id}/{variation.subset}",
        None, decision.image_image, decision.image_text,
        decision.accepted, frac, discarded,
    )
    payload = {"sample_id": sample.id, **result.log}
    if not accepted:
        return None, row, payload

    subset_dir = root / variation.subset
    subset_dir.mkdir(exist_ok=True)
    _save_pair(subset_dir, sample.id, result.image, filtered_label)
    scenes.save_label_png(result.label, subset_dir / f"{sample.id}_label_raw.png")
    mask_name = _save_mask(subset_dir, sample.id, result.mask)
    rec = SampleRecord(
        id=sample.id, subset=variation.subset,
        image=f"{variation.subset}/{sample.id}.png",
        label=f"{variation.subset}/{sample.id}_label.png",
        raw_label=f"{variation.subset}/{sample.id}_label_raw.png",
        original_image=f"original/{sample.id}.png",
        original_label=f"original/{sample.id}_label.png",
        eval_mask=f"{variation.subset}/{mask_name}",
        variation={"kind": variation.kind, "level": variation.level, **result.log},
        filter_metrics={
            "image_image": decision.image_image,
            "image_text": decision.image_text,
            "noisy_pixel_fraction": frac,
        },
        provenance=provenance,
    )
    return rec, row, payload


def combined_variation(
    sample: SalientSample,
    appearance_kind: str,
    geometry_item: str,
    backends: Backends,
    config: PipelineConfig,
    seed: int = 0,
):
    """Geometry edit first, then an appearance edit on the result.

    Returns (edited image, filtered label, record-style dict tagged with both
    variations).
    """
    geo = parse_plan([geometry_item])[0]
    rng = _sample_rng(seed, sample.id, f"combined:{appearance_kind}:{geometry_item}")
    spec = GeometryEditSpec(kind=geo.kind, level=geo.level, seed=int(rng.integers(0, 2**31 - 1)))
    class_names = tuple(sample.base.meta["class_names"])
    geo_result = edit_geometry(
        sample.base.image, sample.base.label, sample.mask, spec,
        backends.inpainter, prompt_client=backends.language_client,
        class_names=class_names,
    )
    parts = decompose_caption(sample.caption)
    kind = AttributeKind(appearance_kind)
    value = _edit_value(rng, kind, parts)
    request = edit_attribute(parts, kind, value)
    app_result = edit_appearance(
        geo_result.image, geo_result.label, geo_result.mask, request,
        backends.denoiser, config.edit,
    )
    record = {
        "id": sample.id,
        "variations": [
            {"kind": geo.kind, "level": geo.level, **{k: geo_result.log[k] for k in ("e_x", "e_y", "b_x", "b_y")}},
            {"kind": appearance_kind, "value": value, "caption_star": request.target_text},
        ],
    }
    return app_result.edited, geo_result.label, geo_result.mask, record


# ---------------------------------------------------------------------------
# Persistence helpers, loading, evaluation
# ---------------------------------------------------------------------------


def _hash_files(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


def _manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "benchmark_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def load_benchmark(root: str | Path) -> BenchmarkSet:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    subsets = {
        name: [SampleRecord(**rec) for rec in recs]
        for name, recs in manifest["subsets"].items()
    }
    return BenchmarkSet(
        name=manifest["name"],
        root=root,
        class_names=tuple(manifest["class_names"]),
        subsets=subsets,
        manifest=manifest,
    )


def subset_miou(
    segmenter, benchmark: BenchmarkSet, subset: str, eval_region: str
) -> tuple[dict[int, float], float]:
    """One confusion matrix over every record of a subset, then IoU."""
    records = benchmark.subsets.get(subset, [])
    if not records:
        raise BackendError(f"subset {subset!r} is empty")
    first = scenes.load_image_png(benchmark.root / records[0].image)
    num_classes = len(benchmark.class_names)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for rec in records:
        image = scenes.load_image_png(benchmark.root / rec.image)
        gt = scenes.load_label_png(benchmark.root / rec.label, num_classes)
        scores = segmenter(image)
        pred = scores.argmax(axis=-1)
        mask_bits = None
        if eval_region == "object-only":
            if rec.eval_mask is None:
                raise BackendError(f"record {rec.id} lacks an eval mask")
            mask_bits = _load_mask(benchmark.root / rec.eval_mask).bits
        conf += confusion_matrix(
            pred, gt.classes, num_classes, eval_mask=mask_bits, ignore_index=gt.ignore_index
        )
    return miou_from_confusion(conf)


def robustness_report(
    segmenter,
    benchmark: BenchmarkSet,
    eval_region: str = "auto",
    model: str = "prototype",
) -> list[RobustnessReport]:
    """Evaluate every edited subset and aggregate per family.

    Appearance subsets divide by the reconstruction baseline and score full
    images; geometry subsets divide by the originals and score inside the
    object region. ``eval_region`` overrides the per-family default.
    """
    families = split_plan_families(benchmark.subset_names())
    if not families:
        raise BackendError("benchmark has no edited subsets")
    reports = []
    for family, names in families.items():
        region = eval_region
        if region == "auto":
            region = "full" if family == "appearance" else "object-only"
        baseline_name = "recon" if family == "appearance" else "original"
        if baseline_name not in benchmark.subsets or not benchmark.subsets[baseline_name]:
            raise BackendError(f"missing baseline subset {baseline_name!r}")
        per_class_base, base_miou = subset_miou(segmenter, benchmark, baseline_name, region)
        table = {}
        for name in names:
            per_class, mean = subset_miou(segmenter, benchmark, name, region)
            table[name] = {"miou": mean, "per_class": {str(k): v for k, v in per_class.items()}}
        reports.append(
            RobustnessReport.from_subset_mious(
                model=model,
                benchmark=benchmark.name,
                family=family,
                baseline_name=baseline_name,
                baseline_miou=base_miou,
                subsets=table,
                eval_region=region,
                config_hash=benchmark.manifest.get("config_hash", ""),
            )
        )
    return reports
