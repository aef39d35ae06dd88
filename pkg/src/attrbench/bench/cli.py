"""Command-line interface.

Subcommands: ``scenes gen``, ``denoiser train``, ``bench build``,
``bench filter``, ``bench eval``, ``bench report``. Exit codes: 0 success,
1 usage error, 2 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import scenes
from ..config import PipelineConfig, load_config
from ..filtering import ConceptEmbedder, class_loss_profile, loss_map_from_scores, pixel_filter
from ..prompt import PromptBackendError
from . import build as build_mod
from .build import (
    Backends,
    BackendError,
    build_benchmark,
    generate_dataset,
    load_benchmark,
    robustness_report,
    select_salient,
)
from .report import load_reports, render_figure, render_markdown, write_csv, write_reports

log = logging.getLogger(__name__)

USAGE_ERROR, BACKEND_ERROR = 1, 2


def _common_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument(
        "--backend", default=None, help="inpainter backend: prototype or diffusion"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attrbench", description=__doc__)
    top = parser.add_subparsers(dest="command", required=True)

    scenes_p = top.add_parser("scenes", help="synthetic scene utilities")
    scenes_sub = scenes_p.add_subparsers(dest="subcommand", required=True)
    _common_flags(scenes_sub.add_parser("gen", help="generate labeled scenes"))

    den_p = top.add_parser("denoiser", help="denoiser utilities")
    den_sub = den_p.add_subparsers(dest="subcommand", required=True)
    _common_flags(den_sub.add_parser("train", help="train the toy denoiser"))

    bench_p = top.add_parser("bench", help="benchmark pipeline")
    bench_sub = bench_p.add_subparsers(dest="subcommand", required=True)
    for name, help_text in (
        ("build", "build a benchmark from generated scenes"),
        ("filter", "re-run pixel filtering over a built benchmark"),
        ("eval", "evaluate a segmenter and write reports"),
        ("report", "re-render report files from report.json"),
    ):
        _common_flags(bench_sub.add_parser(name, help=help_text))
    return parser


def _config_from(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "backend", None):
        overrides["inpainter"] = args.backend
    return load_config(args.config, overrides)


def _denoiser_path(args, config) -> Path:
    if config.denoiser.checkpoint:
        return Path(config.denoiser.checkpoint)
    return Path(args.out) / "denoiser.npz"


def _train_denoiser(config: PipelineConfig, path: Path):
    from ..diffusion import ToyDenoiserConfig, save_denoiser, train_toy_denoiser
    from ..prompt import DEFAULT_VOCAB

    train_cfg = PipelineConfig(
        scenes=type(config.scenes)(
            count=config.denoiser.train_scenes,
            height=config.scenes.height,
            width=config.scenes.width,
            num_classes=config.scenes.num_classes,
        )
    )
    dataset = generate_dataset(train_cfg, config.seed + 1)
    triples = build_mod.training_triples(dataset)
    model_cfg = ToyDenoiserConfig(
        image_size=config.scenes.height,
        base_channels=config.denoiser.base_channels,
        num_classes=config.scenes.num_classes,
        emb_dim=config.denoiser.emb_dim,
        T=config.edit.T,
        vocab=DEFAULT_VOCAB,
    )
    model = train_toy_denoiser(
        model_cfg, triples, steps=config.denoiser.train_steps, seed=config.seed,
        lr=config.denoiser.lr, batch_size=config.denoiser.batch_size,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    save_denoiser(model, path)
    return model


def _load_or_train_denoiser(args, config: PipelineConfig):
    from ..diffusion import load_denoiser

    path = _denoiser_path(args, config)
    if path.exists():
        return load_denoiser(path)
    log.info("no denoiser checkpoint at %s; training one", path)
    return _train_denoiser(config, path)


def _make_backends(args, config: PipelineConfig, dataset) -> Backends:
    denoiser = _load_or_train_denoiser(args, config)
    surrogate = scenes.fit_prototype_segmenter(
        [(s.image, s.label) for s in dataset], temperature=config.segmenter_temperature
    )
    if config.inpainter == "prototype":
        from ..geometry import PrototypeInpainter

        inpainter = PrototypeInpainter(surrogate.prototypes)
    elif config.inpainter == "diffusion":
        from ..geometry import DiffusionInpainter

        inpainter = DiffusionInpainter(denoiser, steps=config.edit.T)
    else:
        raise BackendError(f"unknown inpainter backend {config.inpainter!r}")
    return Backends(
        denoiser=denoiser,
        inpainter=inpainter,
        embedder=ConceptEmbedder(seed=config.seed),
        surrogate=surrogate,
    )


def cmd_scenes_gen(args) -> int:
    config = _config_from(args)
    dataset = generate_dataset(config, config.seed)
    out = Path(args.out) / "scenes"
    for sample in dataset:
        objects = [scenes.ObjectInfo(**o) for o in sample.meta["objects"]]
        scenes.save_scene(
            out, sample.id, sample.image, sample.label, objects,
            tuple(sample.meta["class_names"]), sample.meta.get("seed"),
        )
    print(f"wrote {len(dataset)} scenes to {out}")
    return 0


def cmd_denoiser_train(args) -> int:
    config = _config_from(args)
    path = _denoiser_path(args, config)
    model = _train_denoiser(config, path)
    final = model.train_history[-1] if model.train_history else float("nan")
    print(f"trained denoiser ({config.denoiser.train_steps} steps, final loss {final:.4f}) -> {path}")
    return 0


def cmd_bench_build(args) -> int:
    config = _config_from(args)
    dataset = generate_dataset(config, config.seed)
    backends = _make_backends(args, config, dataset)
    bench = build_benchmark(dataset, config.plan, backends, config, config.seed, args.out)
    print(f"built benchmark {bench.name} at {bench.root}")
    print(f"manifest hash: {bench.manifest['benchmark_hash']}")
    for name, recs in bench.subsets.items():
        print(f"  {name}: {len(recs)} records")
    return 0


def cmd_bench_filter(args) -> int:
    config = _config_from(args)
    bench = load_benchmark(Path(args.out) / config.benchmark_name)
    originals = [
        (
            scenes.load_image_png(bench.root / rec.image),
            scenes.load_label_png(bench.root / rec.label, len(bench.class_names)),
        )
        for rec in bench.subsets.get("original", [])
    ]
    if not originals:
        raise BackendError("benchmark has no original subset to profile on")
    surrogate = scenes.fit_prototype_segmenter(originals, temperature=config.segmenter_temperature)
    profile = class_loss_profile(originals, surrogate, alpha=config.filter_alpha)
    refreshed = 0
    for name, recs in bench.subsets.items():
        if name == "original":
            continue
        for rec in recs:
            image = scenes.load_image_png(bench.root / rec.image)
            base = scenes.load_label_png(bench.root / rec.raw_label, len(bench.class_names))
            lm = loss_map_from_scores(surrogate(image), base)
            filtered, frac = pixel_filter(lm, base, profile)
            scenes.save_label_png(filtered, bench.root / rec.label)
            rec.filter_metrics["noisy_pixel_fraction"] = frac
            bench.manifest["subsets"][name] = [r.to_dict() for r in recs]
            refreshed += 1
    bench.manifest["files"] = build_mod._hash_files(bench.root)
    bench.manifest["benchmark_hash"] = build_mod._manifest_hash(bench.manifest)
    (bench.root / "manifest.json").write_text(
        json.dumps(bench.manifest, indent=2, sort_keys=True)
    )
    print(f"re-filtered {refreshed} records under {bench.root}")
    return 0


def cmd_bench_eval(args) -> int:
    config = _config_from(args)
    bench = load_benchmark(Path(args.out) / config.benchmark_name)
    originals = [
        (
            scenes.load_image_png(bench.root / rec.image),
            scenes.load_label_png(bench.root / rec.label, len(bench.class_names)),
        )
        for rec in bench.subsets.get("original", [])
    ]
    if not originals:
        raise BackendError("benchmark has no original subset to fit the segmenter on")
    segmenter = scenes.fit_prototype_segmenter(originals, temperature=config.segmenter_temperature)
    reports = robustness_report(segmenter, bench, model="prototype")
    paths = write_reports(reports, args.out)
    for rep in reports:
        print(f"{rep.family}: baseline {rep.baseline_miou:.2f}, RmIoU {rep.rmiou:.2f}, mR {rep.mr:.2f}")
    print(f"wrote {paths['json']}, {paths['md']}, {paths['csv']}, {paths['png']}")
    return 0


def cmd_bench_report(args) -> int:
    out = Path(args.out)
    path = out / "report.json"
    if not path.exists():
        print(f"no report.json under {out}", file=sys.stderr)
        return USAGE_ERROR
    reports = load_reports(path)
    (out / "report.md").write_text(render_markdown(reports))
    write_csv(reports, out / "report.csv")
    render_figure(reports, out / "report.png")
    print(f"re-rendered report.md, report.csv, report.png under {out}")
    return 0


_HANDLERS = {
    ("scenes", "gen"): cmd_scenes_gen,
    ("denoiser", "train"): cmd_denoiser_train,
    ("bench", "build"): cmd_bench_build,
    ("bench", "filter"): cmd_bench_filter,
    ("bench", "eval"): cmd_bench_eval,
    ("bench", "report"): cmd_bench_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else USAGE_ERROR
    handler = _HANDLERS.get((args.command, args.subcommand))
    if handler is None:
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    try:
        return handler(args)
    except (BackendError, PromptBackendError) as err:
        print(f"backend failure: {err}", file=sys.stderr)
        return BACKEND_ERROR
    except FileNotFoundError as err:
        print(f"missing input: {err}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
