"""Command-line front end: gen, ingest, extract, train, localize, eval.

Exit codes: 0 ok, 1 run failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path


from .config import ConfigError, ConfigFile, RunManifest, snapshot
from .core import read_map, write_map
from .evaluation import (
    SCENARIOS, IngestConfig, ScenarioConfig, format_table, ingest_pointcloud, read_pointcloud, run_benchmark,
    write_per_query_csv, write_report_csv,
)
from .extractors import EXTRACTOR_NAMES, DescriptorDB, make_extractor
from .graph import GraphConfig
from .handcrafted import HandcraftedConfig
from .localizer import MatchConfig, localize
from .synth import NoiseConfig, WorldGenConfig, generate_world, load_dataset, make_triplet_dataset, save_dataset

log = logging.getLogger("constellation_loc")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> ConfigFile:
    return ConfigFile.read(args.config) if args.config else ConfigFile()


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _graph_cfg(cfg: ConfigFile, reference_map) -> GraphConfig:
    """Graph settings; an ``auto`` edge threshold is resolved on ``reference_map``."""
    g = cfg.build(GraphConfig, "graph")
    if g.edge_threshold == "auto" and len(reference_map) < 2:
        # a lone object only has its self-loop, whatever the threshold
        return replace(g, edge_threshold=1.0)
    return g.resolved(reference_map)


def _extractor(name: str, cfg: ConfigFile, graph_cfg: GraphConfig, seed: int, checkpoint=None):
    if name not in EXTRACTOR_NAMES:
        raise UsageError(f"unknown extractor {name!r}; valid names: {', '.join(EXTRACTOR_NAMES)}")
    model = None
    if name == "gnn":
        if checkpoint is None:
            raise UsageError("the gnn extractor needs --checkpoint")
        from .gnn.model import load_checkpoint

        model, _, _ = load_checkpoint(checkpoint)
    return make_extractor(name, graph_cfg, cfg.build(HandcraftedConfig, "handcrafted"), seed, model)


# --- commands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    cfg.check_sections(["world", "noise", "dataset"])
    world_cfg = cfg.build(WorldGenConfig, "world")
    seed = args.seed if args.seed is not None else world_cfg.seed
    world_cfg = replace(world_cfg, seed=seed)
    noise = cfg.build(NoiseConfig, "noise")
    ds_opts = {"n_anchors": "100", "n_positives": "9", "visual_range": "30.0", "val_fraction": "0.2",
               "min_members": "1"}
    for key, raw in cfg.section("dataset").items():
        if key not in ds_opts:
            raise ConfigError(f"{cfg.where('dataset', key)}: unknown key {key!r} in [dataset]; "
                              f"valid keys: {', '.join(ds_opts)}")
        ds_opts[key] = raw
    try:
        n_anchors = None if ds_opts["n_anchors"].lower() == "all" else int(ds_opts["n_anchors"])
        opts = dict(n_positives=int(ds_opts["n_positives"]), visual_range=float(ds_opts["visual_range"]),
                    val_fraction=float(ds_opts["val_fraction"]), min_members=int(ds_opts["min_members"]))
    except ValueError as exc:
        raise ConfigError(f"{cfg.path}: bad value in [dataset]: {exc}") from None
    out = _out(args, "gen_out")
    manifest = RunManifest("gen", snapshot(world=world_cfg, noise=noise, dataset=ds_opts), {"world": seed, "dataset": seed},
                           [args.config] if args.config else [])
    world = generate_world(world_cfg)
    ds = make_triplet_dataset(world, noise, seed=seed, n_anchors=n_anchors, **opts)
    save_dataset(out, world, ds, noise, {"seed": seed, "n_anchors": ds_opts["n_anchors"], **opts})
    for name in ("map.txt", "index.csv", "dataset.cfg"):
        manifest.add_output(out / name)
    manifest.write(out)
    print(f"world: {len(world)} objects, {world.n_classes} classes; dataset: {len(ds)} anchors -> {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config(args)
    cfg.check_sections(["ingest"])
    raw = cfg.section("ingest")
    allowed = {"voxel_size", "removed_classes", "label_remap", "n_classes"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{cfg.where('ingest', key)}: unknown key {key!r} in [ingest]")
    ingest = IngestConfig(
        voxel_size=float(raw.get("voxel_size", 0.1)),
        removed_classes=frozenset(int(x) for x in raw.get("removed_classes", "").replace(",", " ").split()),
        label_remap=raw.get("label_remap", "dense"),
        n_classes=int(raw["n_classes"]) if "n_classes" in raw else None,
    )
    out = _out(args, "ingest_out")
    manifest = RunManifest("ingest", snapshot(ingest=ingest), {}, [args.input])
    m = ingest_pointcloud(read_pointcloud(args.input), ingest)
    path = out / "map.txt"
    write_map(path, m, extra_header=["manifest=manifest.json"])
    manifest.add_output(path)
    manifest.write(out)
    print(f"{len(m)} objects, {m.n_classes} classes -> {path}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _config(args)
    cfg.check_sections(["graph", "handcrafted"])
    m = read_map(args.map)
    reference = read_map(args.reference_map) if args.reference_map else m
    graph_cfg = _graph_cfg(cfg, reference)
    seed = args.seed if args.seed is not None else 0
    ex = _extractor(args.extractor, cfg, graph_cfg, seed, args.checkpoint)
    out = _out(args, "extract_out")
    manifest = RunManifest("extract", snapshot(graph=graph_cfg, handcrafted=ex.cfg, extractor=args.extractor),
                           {"extractor": seed}, [args.map] + ([args.checkpoint] if args.checkpoint else []))
    db = ex.describe(m)
    path = out / f"{args.extractor}.{'npz' if args.binary else 'db'}"
    db.save(path, binary=args.binary)
    manifest.add_output(path)
    manifest.write(out)
    print(f"{len(db.ids)} descriptors of shape {db.dims} -> {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .gnn.model import GnnConfig, load_checkpoint, save_checkpoint
    from .gnn.train import TrainConfig, make_optimizer, read_metrics, train, write_metrics
    from .plotting import plot_training

    cfg = _config(args)
    cfg.check_sections(["gnn", "train", "graph"])
    world, ds = load_dataset(args.dataset)
    graph_cfg = _graph_cfg(cfg, world)
    overrides = {"seed": args.seed} if args.seed is not None else None
    train_cfg = cfg.build(TrainConfig, "train", overrides)
    out = _out(args, "train_out")
    metrics_path = out / "metrics.csv"
    model = optimizer = None
    start = 0
    if args.resume:
        model, extra, optimizer = load_checkpoint(args.resume, lambda mdl: make_optimizer(mdl, train_cfg))
        gnn_cfg = model.cfg
        start = int(extra.get("epoch", 0))
        if args.epochs is not None:
            train_cfg = replace(train_cfg, epochs=start + args.epochs)
    else:
        gnn_cfg = cfg.build(GnnConfig, "gnn", {"n_classes": world.n_classes})
        if args.epochs is not None:
            train_cfg = replace(train_cfg, epochs=args.epochs)
    manifest = RunManifest("train", snapshot(gnn=gnn_cfg, train=train_cfg, graph=graph_cfg),
                           {"train": train_cfg.seed}, [args.dataset] + ([args.resume] if args.resume else []))
    result = train(ds, gnn_cfg, train_cfg, graph_cfg, model=model, optimizer=optimizer, start_epoch=start)
    last_epoch = result.metrics[-1].epoch if result.metrics else start
    save_checkpoint(out / "best.npz", result.model,
                    {"epoch": result.best_epoch, "edge_threshold": graph_cfg.edge_threshold,
                     "manifest": "manifest.json"})
    save_checkpoint(out / "last.npz", result.last_model, {"epoch": last_epoch, "manifest": "manifest.json"},
                    optimizer=result.optimizer)
    resumed_log = args.resume and metrics_path.exists()
    write_metrics(metrics_path, result.metrics, append=bool(resumed_log))
    for name in ("best.npz", "last.npz", "metrics.csv"):
        manifest.add_output(out / name)
    all_metrics = read_metrics(metrics_path)
    if all_metrics:
        plot_training(all_metrics, out / "training.png")
        manifest.add_output(out / "training.png")
        best = max(all_metrics, key=lambda m: m.val_topK)
        print(f"epochs {start + 1}..{last_epoch}; best val top{train_cfg.top_k} {best.val_topK:.3f} "
              f"(epoch {best.epoch}) -> {out}")
    else:
        print(f"no epochs run; initial checkpoint -> {out}")
    manifest.write(out)
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = _config(args)
    cfg.check_sections(["graph", "handcrafted", "match"])
    query = read_map(args.query)
    global_map = read_map(args.map)
    graph_cfg = _graph_cfg(cfg, global_map)
    seed = args.seed if args.seed is not None else 0
    match = cfg.build(MatchConfig, "match", {"seed": seed})
    ex = _extractor(args.extractor, cfg, graph_cfg, seed, args.checkpoint)
    global_db = DescriptorDB.load(args.db) if args.db else None
    out = _out(args, "localize_out")
    manifest = RunManifest("localize", snapshot(graph=graph_cfg, match=match, extractor=args.extractor),
                           {"ransac": seed}, [args.query, args.map])
    res = localize(query, global_map, ex, match, global_db=global_db)
    path = out / "pose.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["success", "x", "y", "yaw_deg", "n_inliers", "n_correspondences", "t_compute_s", "t_match_s"])
        w.writerow([int(res.success), repr(res.pose.x), repr(res.pose.y), repr(math.degrees(res.pose.yaw)),
                    res.n_inliers, res.n_correspondences, f"{res.t_compute:.6f}", f"{res.t_match:.6f}"])
    manifest.add_output(path)
    manifest.status = "ok" if res.success else "not-localized"
    manifest.write(out)
    state = "localized" if res.success else "NOT localized"
    print(f"{state}: x={res.pose.x:.3f} y={res.pose.y:.3f} yaw={math.degrees(res.pose.yaw):.2f} deg "
          f"({res.n_inliers} inliers)")
    return EXIT_OK if res.success else EXIT_FAIL


def _scenarios(cfg: ConfigFile, seed: int | None) -> list[ScenarioConfig]:
    """``[scenario.NAME]`` sections; without any, all three scenarios with defaults."""
    names = [s for s in cfg.sections() if s.startswith("scenario.")]
    keys = {"scenario", "visual_range", "n_queries", "n_runs", "seed", "occlusion_deg", "waypoints"}
    out = []
    for sec in names or [f"scenario.{s}" for s in SCENARIOS]:
        raw = cfg.section(sec)
        for key in raw:
            if key not in keys:
                raise ConfigError(f"{cfg.where(sec, key)}: unknown key {key!r} in [{sec}]; "
                                  f"valid keys: {', '.join(sorted(keys))}")
        kw = {"scenario": raw.get("scenario", sec.split(".", 1)[1])}
        try:
            for key, conv in (("visual_range", float), ("n_queries", int), ("n_runs", int), ("seed", int),
                              ("occlusion_deg", float)):
                if key in raw:
                    kw[key] = conv(raw[key])
            if "waypoints" in raw:
                kw["waypoints"] = tuple(tuple(float(v) for v in p.split()) for p in raw["waypoints"].split(";"))
            if seed is not None:
                kw["seed"] = seed
            out.append(ScenarioConfig(**kw))
        except ValueError as exc:
            raise ConfigError(f"{cfg.path}: [{sec}]: {exc}") from None
    return out


def cmd_eval(args) -> int:
    from .plotting import plot_success_rates

    cfg = _config(args)
    cfg.check_sections(["graph", "handcrafted", "match", "scenario."])
    global_map = read_map(args.map)
    graph_cfg = _graph_cfg(cfg, global_map)
    seed = args.seed if args.seed is not None else None
    match = cfg.build(MatchConfig, "match", {"seed": seed} if seed is not None else None)
    names = [n.strip() for n in args.extractors.split(",") if n.strip()]
    extractors = [_extractor(n, cfg, graph_cfg, seed or 0, args.checkpoint) for n in names]
    scenarios = _scenarios(cfg, seed)
    if args.queries is not None:
        scenarios = [replace(s, n_queries=args.queries) for s in scenarios]
    if args.runs is not None:
        scenarios = [replace(s, n_runs=args.runs) for s in scenarios]
    out = _out(args, "eval_out")
    manifest = RunManifest("eval", snapshot(graph=graph_cfg, match=match, extractors=names,
                                            scenarios=[snapshot(s=s)["s"] for s in scenarios]),
                           {"scenarios": [s.seed for s in scenarios], "ransac": match.seed},
                           [args.map] + ([args.checkpoint] if args.checkpoint else []))

    def progress(name, sc, run, eta):
        log.info("%s / %s / run %d: eta %.2f%%", name, sc, run, eta)

    report = run_benchmark(global_map, extractors, scenarios, match, progress)
    write_report_csv(out / "report.csv", report)
    write_per_query_csv(out / "per_query.csv", report)
    table = format_table(report)
    (out / "table.txt").write_text(table)
    outputs = ["report.csv", "per_query.csv", "table.txt"]
    if report.rows:
        plot_success_rates(report, out / "success_rate.png")
        outputs.append("success_rate.png")
    for name in outputs:
        manifest.add_output(out / name)
    print(table, end="")
    if report.failures:
        for name, sc, run, err in report.failures:
            print(f"FAILED {name} / {sc} / run {run}: {err}", file=sys.stderr)
        manifest.status = f"{len(report.failures)} failed sub-runs"
    manifest.write(out)
    return EXIT_FAIL if report.failures else EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--config", default=None, help="key = value config file with [sections]")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="constellation-loc", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic world and a training dataset")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("ingest", parents=[common], help="turn a labeled point cloud into an object map")
    s.add_argument("input", help="text point cloud: x y z instance_id class_id per line")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("extract", parents=[common], help="compute a descriptor database for a map")
    s.add_argument("map")
    s.add_argument("--extractor", required=True, help=f"one of: {', '.join(EXTRACTOR_NAMES)}")
    s.add_argument("--checkpoint", help="model checkpoint (gnn only)")
    s.add_argument("--reference-map", help="map used to resolve an 'auto' edge threshold (default: the map itself)")
    s.add_argument("--binary", action="store_true", help="write .npz instead of text")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", parents=[common], help="train the learned descriptor")
    s.add_argument("dataset", help="directory written by 'gen'")
    s.add_argument("--resume", help="checkpoint to continue from (epoch numbering continues)")
    s.add_argument("--epochs", type=int, help="epochs to run (added to the resumed epoch when resuming)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("localize", parents=[common], help="localize one local map in a global map")
    s.add_argument("query")
    s.add_argument("map")
    s.add_argument("--extractor", required=True, help=f"one of: {', '.join(EXTRACTOR_NAMES)}")
    s.add_argument("--checkpoint")
    s.add_argument("--db", help="precomputed global descriptor database")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("eval", parents=[common], help="run the localization benchmark")
    s.add_argument("map")
    s.add_argument("--extractors", required=True, help=f"comma list of: {', '.join(EXTRACTOR_NAMES)}")
    s.add_argument("--checkpoint")
    s.add_argument("--queries", type=int, help="override n_queries for every scenario")
    s.add_argument("--runs", type=int, help="override n_runs for every scenario")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, OSError, ValueError, KeyError) as exc:
        # ContractViolation / DegenerateInput are ValueErrors; NotFound is a KeyError
        print(f"{parser.prog} {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
