"""Command-line entry point: ``pathforge <subcommand> [options]``.

Every subcommand writes into a run directory (``--out``, else
``$PATHFORGE_OUT``, else ``pathforge_runs/<subcommand>``) together with a
``manifest.txt`` recording the package version, seed, input hashes and the
fully resolved configuration. On failure the process exits nonzero and prints
``error: category=<kind> message=<text>`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from . import __version__
from .bench import (
    checkpoint_sweep,
    default_jobs,
    make_mccv_plan,
    read_plan,
    replica_seed,
    run_benchmark,
    write_plan,
    write_report,
    write_sweep,
)
from .config import PipelineConfig, build, load_config
from .embed_store import read_embedding_set, read_labels, shuffle_labels, synth_embedding_dataset, write_embedding_set
from .errors import (
    InvalidConfigError,
    MissingInputError,
    PathforgeError,
    ProtocolError,
)
from .mil import TrainConfig, records_to_csv, save_params, train_gma
from .schedule import (
    ScheduleConfig,
    SlideEntry,
    compile_epoch,
    partition_slides,
    read_corpus,
    schedule_stats,
    write_corpus,
    write_manifest,
)
from .tiling import SynthSlideSpec, TilingParams, detect_tissue, extract_tiles, plan_tiles, read_slide, read_slide_meta, synth_slide, write_slide

log = logging.getLogger("pathforge")

EXIT_CODES = {
    "config": 2,
    "invalid-config": 2,
    "missing-input": 3,
    "invalid-input": 4,
    "shape": 4,
    "undefined-auc": 5,
    "protocol": 5,
}


# --- helpers ------------------------------------------------------------------


def _hash_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode() + b"\0")
            h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _require(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"input not found: {p}")
    return p


def _record(cfg: PipelineConfig, section: str, obj, skip: Sequence[str] = ()) -> None:
    for f in dataclasses.fields(obj):
        if f.name not in skip and f.name in _schema_keys(section):
            cfg.sections[section][f.name] = getattr(obj, f.name)


def _schema_keys(section: str):
    from .config import SCHEMA

    return SCHEMA[section]


def _write_manifest(out: Path, args, cfg: PipelineConfig, inputs: dict[str, Path]) -> None:
    lines = [
        f"pathforge_version={__version__}",
        f"command={args.command}",
        f"seed={args.seed}",
    ]
    lines += [f"input.{name}={p.as_posix()} sha256={_hash_path(p)}" for name, p in sorted(inputs.items())]
    lines += ["", cfg.render()]
    (out / "manifest.txt").write_text("\n".join(lines).rstrip("\n") + "\n")


def _train_config(cfg: PipelineConfig, args) -> TrainConfig:
    values = dict(cfg.section("train"))
    if "betas" in values:
        if len(values["betas"]) != 2:
            raise InvalidConfigError("train.betas needs exactly two values")
        values["betas"] = tuple(values["betas"])
    tc = build(TrainConfig, values, seed=args.seed, epochs=getattr(args, "epochs", None))
    _record(cfg, "train", tc, skip=("seed",))
    return tc


def _plan_for(args, cfg: PipelineConfig, labels: dict[str, int], inputs: dict[str, Path]):
    if args.plan:
        inputs["plan"] = _require(args.plan)
        return read_plan(args.plan)
    p = cfg.section("plan")
    n_splits = args.n_splits if getattr(args, "n_splits", None) else p.get("n_splits", 20)
    train_frac = p.get("train_frac", 0.8)
    replicas = args.replicas if getattr(args, "replicas", None) else p.get("replicas", 2)
    stratified = p.get("stratified", False)
    cfg.sections["plan"].update(n_splits=n_splits, train_frac=train_frac, replicas=replicas, stratified=stratified)
    return make_mccv_plan(sorted(labels), n_splits, train_frac, args.seed, replicas,
                          labels=labels if stratified else None)


# --- subcommands --------------------------------------------------------------


def cmd_synth_slide(args, cfg: PipelineConfig, out: Path, inputs):
    s = dict(cfg.section("synth_slide"))
    for key in ("slide_id", "organ", "width", "height", "mpp", "coverage", "n_blobs"):
        if getattr(args, key) is not None:
            s[key] = getattr(args, key)
    organ = s.pop("organ", "unknown")
    spec = build(SynthSlideSpec, s, seed=args.seed)
    raster = synth_slide(spec)
    write_slide(raster, out / f"{spec.slide_id}.png", organ=organ)
    _record(cfg, "synth_slide", spec)
    cfg.sections["synth_slide"]["organ"] = organ
    print(f"slide={out / (spec.slide_id + '.png')}")


def _tile_one(job):
    path, params, root = job
    raster = read_slide(path)
    meta = read_slide_meta(path)
    coords = plan_tiles(detect_tissue(raster, params), raster.meta, params)
    result = extract_tiles(raster, coords, params, root)
    return SlideEntry(raster.slide_id, meta.get("organ", "unknown"), len(result.written)), len(result.errors)


def cmd_tile(args, cfg: PipelineConfig, out: Path, inputs):
    overrides = {k: getattr(args, k) for k in ("tile_px", "target_mpp", "min_tissue_frac", "threshold_mode")}
    params = build(TilingParams, cfg.section("tiling"), **overrides)
    _record(cfg, "tiling", params)
    slides = [_require(p) for p in args.slides]
    for i, p in enumerate(slides):
        inputs[f"slide{i}"] = p
    jobs = [(p, params, out / "tiles") for p in slides]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_tile_one, jobs))
    else:
        results = [_tile_one(j) for j in jobs]
    write_corpus([entry for entry, _ in results], out / "corpus.tsv")
    for entry, n_err in results:
        print(f"slide={entry.slide_id} tiles={entry.n_tiles} errors={n_err}")


def _schedule_config(args, cfg: PipelineConfig) -> ScheduleConfig:
    s = dict(cfg.section("schedule"))
    s.pop("effective_batch", None)
    overrides = {k: getattr(args, k, None) for k in ("tiles_per_epoch", "n_pseudo_epochs", "n_folds", "imagenet_size")}
    if "tiles_per_epoch" not in s and overrides["tiles_per_epoch"] is None:
        raise InvalidConfigError("tiles_per_epoch is required (flag --tiles-per-epoch or [schedule] tiles_per_epoch)")
    sc = build(ScheduleConfig, s, master_seed=args.seed, **overrides)
    _record(cfg, "schedule", sc)
    return sc


def _compile_job(job):
    corpus, config, epoch, folds = job
    return compile_epoch(corpus, config, epoch, folds)


def cmd_schedule(args, cfg: PipelineConfig, out: Path, inputs):
    inputs["corpus"] = _require(args.corpus)
    corpus = read_corpus(args.corpus)
    sc = _schedule_config(args, cfg)
    n_organs = len({s.organ for s in corpus})
    if sc.tiles_per_epoch < n_organs:
        raise InvalidConfigError(f"tiles_per_epoch={sc.tiles_per_epoch} is below the number of organs ({n_organs})")
    folds = partition_slides(corpus, sc.n_folds, sc.master_seed)
    rows = ["slide_id\tfold"] + [f"{sid}\t{k}" for k, fold in enumerate(folds) for sid in fold]
    (out / "folds.tsv").write_text("\n".join(rows) + "\n")
    jobs = [(corpus, sc, e, folds) for e in range(sc.n_pseudo_epochs)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            manifests = list(pool.map(_compile_job, jobs))
    else:
        manifests = [_compile_job(j) for j in jobs]
    for m in manifests:
        write_manifest(m, out / "manifests")
    print(f"manifests={len(manifests)} dir={out / 'manifests'}")


def cmd_schedule_stats(args, cfg: PipelineConfig, out: Path, inputs):
    sc = _schedule_config(args, cfg)
    batch = args.effective_batch or cfg.get("schedule", "effective_batch")
    if batch is None:
        raise InvalidConfigError("effective_batch is required (flag --effective-batch)")
    cfg.sections["schedule"]["effective_batch"] = batch
    st = schedule_stats(sc, batch)
    text = "\n".join([
        f"imagenet_epochs={st.imagenet_epochs_per_pseudo_epoch:.2f}",
        f"imagenet_epochs_exact={st.imagenet_epochs_per_pseudo_epoch!r}",
        f"total_passes={st.total_passes_through_corpus:g}",
        f"steps_per_epoch={st.steps_per_pseudo_epoch}",
        f"optimization_steps={st.optimization_steps}",
        f"total_tiles={st.total_tiles}",
    ]) + "\n"
    sys.stdout.write(text)
    (out / "stats.txt").write_text(text)


def cmd_synth_embed(args, cfg: PipelineConfig, out: Path, inputs):
    s = dict(cfg.section("synth_embed"))
    for key in ("n_slides", "min_tiles", "max_tiles", "dim", "signal_frac", "effect_size", "checkpoint_tag"):
        if getattr(args, key) is not None:
            s[key] = getattr(args, key)
    if args.shuffle_labels:
        s["shuffle_labels"] = True
    s.setdefault("n_slides", 200)
    s.setdefault("min_tiles", 50)
    s.setdefault("max_tiles", 200)
    s.setdefault("dim", 64)
    s.setdefault("signal_frac", 0.3)
    s.setdefault("effect_size", 1.0)
    s.setdefault("checkpoint_tag", "synthetic")
    s.setdefault("shuffle_labels", False)
    cfg.sections["synth_embed"].update(s)
    es = synth_embedding_dataset(s["n_slides"], (s["min_tiles"], s["max_tiles"]), s["dim"],
                                 s["signal_frac"], s["effect_size"], args.seed, s["checkpoint_tag"])
    if s["shuffle_labels"]:
        es = shuffle_labels(es, args.seed)
    write_embedding_set(es, out / "embeddings")
    print(f"embeddings={out / 'embeddings'} slides={len(es.slides)} dim={es.profile.dim}")


def _labels_for(args, inputs) -> dict[str, int]:
    if args.labels:
        inputs["labels"] = _require(args.labels)
        return read_labels(args.labels)
    if args.embeddings:
        inputs["embeddings"] = _require(args.embeddings)
        return read_labels(Path(args.embeddings) / "labels.tsv")
    raise InvalidConfigError("plan needs --labels or --embeddings")


def cmd_plan(args, cfg: PipelineConfig, out: Path, inputs):
    labels = _labels_for(args, inputs)
    args.plan = None
    plan = _plan_for(args, cfg, labels, inputs)
    write_plan(plan, out / "plan.tsv")
    print(f"plan={out / 'plan.tsv'} hash={plan.hash}")


def cmd_train(args, cfg: PipelineConfig, out: Path, inputs):
    inputs["embeddings"] = _require(args.embeddings)
    es = read_embedding_set(args.embeddings)
    plan = _plan_for(args, cfg, es.labels, inputs)
    if not 0 <= args.split < plan.n_splits:
        raise InvalidConfigError(f"--split {args.split} outside 0..{plan.n_splits - 1}")
    tc = _train_config(cfg, args)
    train, val = plan.splits[args.split]
    run_cfg = tc.with_seed(replica_seed(tc.seed, args.split, args.replica))
    result = train_gma(es, train, val, run_cfg)
    save_params(result.params, out / "model.pgma")
    (out / "epochs.csv").write_text(records_to_csv(result.records))
    print(f"final_val_auc={result.final_val_auc!r}")


def cmd_bench(args, cfg: PipelineConfig, out: Path, inputs):
    inputs["embeddings"] = _require(args.embeddings)
    es = read_embedding_set(args.embeddings)
    plan = _plan_for(args, cfg, es.labels, inputs)
    tc = _train_config(cfg, args)
    iters = cfg.get("plan", "bootstrap_iters", 1000)
    level = cfg.get("plan", "ci_level", 0.95)
    report = run_benchmark(es, plan, tc, jobs=args.jobs, boot_iters=iters, level=level)
    write_report(report, plan, out)
    print(f"final_auc={report.final_mean:.4f} ci=[{report.final_lo:.4f}, {report.final_hi:.4f}] runs={len(report.runs)}")


def cmd_sweep(args, cfg: PipelineConfig, out: Path, inputs):
    sets = []
    for i, path in enumerate(args.embeddings):
        inputs[f"embeddings{i}"] = _require(path)
        sets.append(read_embedding_set(path))
    plan = _plan_for(args, cfg, sets[0].labels, inputs)
    tc = _train_config(cfg, args)
    iters = cfg.get("plan", "bootstrap_iters", 1000)
    level = cfg.get("plan", "ci_level", 0.95)
    result = checkpoint_sweep(sets, plan, tc, jobs=args.jobs, boot_iters=iters, level=level)
    write_sweep(result, plan, out)
    for tag, mean in result.mean_finals().items():
        print(f"checkpoint={tag} final_auc={mean:.4f}")


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="plain-text pipeline config")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides [run] seed)")
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default: $PATHFORGE_JOBS or all cores)")
    common.add_argument("--out", default=None, help="run directory (default: $PATHFORGE_OUT or pathforge_runs/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pathforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pathforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-slide", parents=[common], help="render a synthetic slide with tissue blobs")
    p.add_argument("--slide-id")
    p.add_argument("--organ")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--mpp", type=float)
    p.add_argument("--coverage", type=float)
    p.add_argument("--n-blobs", type=int)
    p.set_defaults(func=cmd_synth_slide)

    p = sub.add_parser("tile", parents=[common], help="detect tissue and extract tiles")
    p.add_argument("slides", nargs="+", help="slide images with .meta sidecars")
    p.add_argument("--tile-px", type=int)
    p.add_argument("--target-mpp", type=float)
    p.add_argument("--min-tissue-frac", type=float)
    p.add_argument("--threshold-mode", choices=["fixed-saturation", "otsu-saturation"])
    p.set_defaults(func=cmd_tile)

    for name, func, helptext in (
        ("schedule", cmd_schedule, "compile pseudo-epoch manifests"),
        ("schedule-stats", cmd_schedule_stats, "report schedule arithmetic"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--tiles-per-epoch", type=int)
        p.add_argument("--n-pseudo-epochs", type=int)
        p.add_argument("--n-folds", type=int)
        p.add_argument("--imagenet-size", type=int)
        if name == "schedule":
            p.add_argument("--corpus", required=True, help="TSV with slide_id, organ, n_tiles")
        else:
            p.add_argument("--effective-batch", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("synth-embed", parents=[common], help="generate a synthetic embedding set")
    p.add_argument("--n-slides", type=int)
    p.add_argument("--min-tiles", type=int)
    p.add_argument("--max-tiles", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--signal-frac", type=float)
    p.add_argument("--effect-size", type=float)
    p.add_argument("--checkpoint-tag")
    p.add_argument("--shuffle-labels", action="store_true")
    p.set_defaults(func=cmd_synth_embed)

    def plan_flags(p):
        p.add_argument("--plan", help="existing plan.tsv to reuse")
        p.add_argument("--n-splits", type=int)
        p.add_argument("--replicas", type=int)

    p = sub.add_parser("plan", parents=[common], help="draw MCCV splits")
    p.add_argument("--embeddings")
    p.add_argument("--labels")
    p.add_argument("--n-splits", type=int)
    p.add_argument("--replicas", type=int)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", parents=[common], help="train one GMA model on one split")
    p.add_argument("--embeddings", required=True)
    plan_flags(p)
    p.add_argument("--split", type=int, default=0)
    p.add_argument("--replica", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", parents=[common], help="run the MCCV benchmark")
    p.add_argument("--embeddings", required=True)
    plan_flags(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", parents=[common], help="benchmark several checkpoints on one plan")
    p.add_argument("--embeddings", required=True, nargs="+")
    plan_flags(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        run = cfg.section("run")
        if args.seed is None:
            args.seed = run.get("seed", 0)
        run["seed"] = args.seed
        if args.jobs is None:
            args.jobs = run.get("jobs") or default_jobs()
        out = Path(args.out or run.get("out") or os.environ.get("PATHFORGE_OUT") or Path("pathforge_runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        inputs: dict[str, Path] = {}
        if args.config:
            inputs["config"] = Path(args.config)
        args.func(args, cfg, out, inputs)
        _write_manifest(out, args, cfg, inputs)
    except PathforgeError as exc:
        category = exc.category
        print(f"error: category={category} message={exc}", file=sys.stderr)
        if isinstance(exc, ProtocolError) and exc.split is not None:
            print(f"error: split={exc.split} replica={exc.replica}", file=sys.stderr)
        return EXIT_CODES.get(category, 4 if category.startswith("format") else 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
