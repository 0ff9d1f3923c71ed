"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 integrity error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, load_config, parse_config
from .geometry import EmptyCloudError, PointCloud, Pose, synth_submap, two_ring_scene
from .hotformer import (
    ConfigError,
    ModelConfig,
    Params,
    attention_macs_closed_form,
    embed,
    forward_prepared,
    init_params,
    param_shapes,
    prepare,
)
from .io import (
    FormatError,
    IntegrityError,
    load_any_cloud,
    read_descriptors,
    read_weights,
    sidecar_path,
    write_cloud,
    write_descriptors,
    write_weights,
)
from .octree import OctreeConfigError, build_pyramid, dump_octree
from .retrieval import DescriptorDatabase, evaluate
from .serialization import serialize, window_dump, window_radial_spread
from .training import build_synthetic_set, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTEGRITY = 0, 2, 3, 4


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    relay = False if getattr(args, "disable_relay_tokens", False) else None
    return cfg.with_overrides(seed=args.seed, coord=args.coord, relay_tokens=relay, pooling=args.pooling)


def load_params(path, model: ModelConfig) -> Params:
    """Weights from ``path`` checked against ``model``'s parameter shapes."""
    _, _, tensors = read_weights(path)
    shapes = param_shapes(model)
    missing = sorted(set(shapes) - set(tensors))
    extra = sorted(set(tensors) - set(shapes))
    if missing or extra:
        raise IntegrityError(f"{path}: tensors missing {missing[:5]} / unexpected {extra[:5]} for this config")
    for name, (shape, _) in shapes.items():
        if tensors[name].shape != tuple(shape):
            raise IntegrityError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, config expects {tuple(shape)}")
    return {name: T.parameter(tensors[name]) for name in shapes}


def model_and_params(args) -> tuple[RunConfig, Params]:
    """Config from ``--config``, or from the weight file when only ``--weights`` is given."""
    if args.config is None and args.weights is not None:
        doc, _, _ = read_weights(args.weights)
        cfg = parse_config(doc).with_overrides(
            seed=args.seed, coord=args.coord,
            relay_tokens=False if getattr(args, "disable_relay_tokens", False) else None, pooling=args.pooling)
    else:
        cfg = run_config(args)
    if args.weights is None:
        return cfg, init_params(cfg.model, cfg.seed)
    return cfg, load_params(args.weights, cfg.model)


def read_clouds(paths) -> list[PointCloud]:
    clouds = []
    for p in paths:
        try:
            clouds.append(load_any_cloud(p))
        except (OSError, FormatError, ValueError) as exc:
            if isinstance(exc, IntegrityError):
                raise
            raise DataError(f"cannot read cloud {p}: {exc}") from exc
    return clouds


def expand_inputs(inputs) -> list[Path]:
    out: list[Path] = []
    for item in inputs or []:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix in (".hopc", ".csv")))
        else:
            out.append(p)
    if not out:
        raise DataError("no input clouds given")
    return out


def write_csv(path: Path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(matrix), delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = run_config(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.scene == "two-ring":
        scene = two_ring_scene(cfg.seed)
        write_cloud(out / "two_ring.hopc", synth_submap(scene, Pose(), "ground", "two_ring"))
        print(f"wrote {out / 'two_ring.hopc'}")
        return EXIT_OK
    data = build_synthetic_set(cfg.train)
    for sub, clouds in (("database", data.db_clouds), ("queries", data.query_clouds)):
        (out / sub).mkdir(exist_ok=True)
        for i, pc in enumerate(clouds):
            write_cloud(out / sub / f"{i:04d}.hopc", pc)
    print(f"wrote {len(data.db_clouds)} database and {len(data.query_clouds)} query clouds to {out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    cfg, params = model_and_params(args)
    paths = expand_inputs(args.input)
    clouds = read_clouds(paths)
    desc = []
    for p, pc in zip(paths, clouds):
        try:
            desc.append(embed(pc, params, cfg.model))
        except EmptyCloudError as exc:
            raise DataError(f"{p}: {exc}") from exc
    out = Path(args.output)
    write_descriptors(out, range(len(desc)), np.stack(desc))
    meta = {
        "ids": list(range(len(desc))),
        "source_ids": [pc.source_id for pc in clouds],
        "positions": [list(pc.pose.translation[:2]) for pc in clouds],
    }
    sidecar_path(out).write_text(json.dumps(meta, indent=2) + "\n")
    print(f"embedded {len(desc)} clouds into {out} (dim {len(desc[0])})")
    return EXIT_OK


def read_descriptor_set(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids, desc = read_descriptors(path)
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"{path}: missing pose sidecar {side}")
    meta = json.loads(side.read_text())
    pos_by_id = {int(i): p for i, p in zip(meta["ids"], meta["positions"])}
    try:
        positions = np.array([pos_by_id[int(i)] for i in ids], dtype=np.float64)
    except KeyError as exc:
        raise DataError(f"{side}: no position for descriptor id {exc}") from exc
    return ids, positions, desc


def cmd_eval(args) -> int:
    if args.database is None or not args.input:
        raise ConfigError("eval needs --database and --input (query descriptor file)")
    db_ids, db_pos, db_desc = read_descriptor_set(args.database)
    _, q_pos, q_desc = read_descriptor_set(args.input[0])
    try:
        db = DescriptorDatabase(db_ids, db_pos, db_desc)
        report = evaluate(db, q_desc, q_pos, max_n=args.max_n, radius=args.radius)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    text = json.dumps(report, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    print(f"AR@1 {report['ar@1']:.4f}  AR@1% {report['ar@1%']:.4f}  MRR {report['mrr']:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = run_config(args)
    out = Path(args.output)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    with open(log_path, "w") as log:
        def on_record(rec: dict) -> None:
            log.write(json.dumps(rec) + "\n")
            log.flush()
            if "ar@1" in rec:
                print(f"step {rec['step']}: AR@1 {rec['ar@1']:.4f} MRR {rec['mrr']:.4f}")

        result = train(cfg.model, cfg.train, on_record=on_record)
    write_weights(out, cfg.to_dict(), result.params)
    print(f"wrote {out}; final AR@1 {result.final['ar@1']:.4f}")
    return EXIT_OK


def _dump_cloud(args) -> PointCloud:
    return read_clouds(expand_inputs(args.input))[0]


def cmd_dump(args) -> int:
    if args.what == "attention":
        return _dump_attention(args)
    cfg = run_config(args)
    model = cfg.model
    pc = _dump_cloud(args)
    try:
        pyramid = build_pyramid(pc, model.region, model.depth, model.levels)
    except EmptyCloudError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.output)
    if args.what == "octree":
        out.write_text(dump_octree(pyramid))
        print(f"wrote {out}")
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    for l, level in enumerate(pyramid.levels):
        part = serialize(level, model.window)
        (out / f"windows_l{l}.txt").write_text(window_dump(part, level))
        spread = window_radial_spread(part, level, model.region)
        print(f"level {l} (depth {level.depth}): {len(level)} octants, {part.w} windows, radial spread {spread:.4f} m")
    return EXIT_OK


def _dump_attention(args) -> int:
    cfg, params = model_and_params(args)
    pc = _dump_cloud(args)
    try:
        prep = prepare(pc, cfg.model)
    except EmptyCloudError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    with T.no_grad(), T.AttentionRecorder() as rec:
        res = forward_prepared(prep, params, cfg.model, record_pooling=True)
    written = 0
    for path, attn in rec.records:
        if not path.startswith("block"):
            continue
        stem = path.replace("/", "_")
        mean = attn.mean(axis=1)  # over heads
        for b in range(min(len(mean), args.windows)):
            write_csv(out / f"{stem}_w{b}.csv", mean[b])
            written += 1
    for l, a in enumerate(res.pool_attention, start=1):
        write_csv(out / f"pooling_l{l}.csv", a)
        written += 1
    print(f"wrote {written} attention matrices to {out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg, params = model_and_params(args)
    if args.input:
        pc = _dump_cloud(args)
    else:
        pc = build_synthetic_set(dataclasses.replace(cfg.train, locations=1, views=0)).db_clouds[0]
    try:
        prep = prepare(pc, cfg.model)
    except EmptyCloudError as exc:
        raise DataError(str(exc)) from exc
    with T.no_grad(), T.FlopCounter() as counter:
        res = forward_prepared(prep, params, cfg.model)
    predicted = attention_macs_closed_form(res.partitions, cfg.model)
    worst = 0
    print(f"windows per level: {[p.w for p in res.partitions]}  k={cfg.model.window}  C={cfg.model.channels}")
    for m in range(cfg.model.blocks):
        measured = counter.matching(f"block{m}", "attn")
        diff = measured - predicted
        worst = max(worst, abs(diff))
        print(f"block{m}: measured {measured}  closed-form {predicted}  difference {diff}")
    for scope in ("stem", "pyramid", "relay_init", "pooling"):
        print(f"{scope}: {counter.counts.get(scope, 0)} MACs")
    print(f"total: {counter.counts['total']} MACs")
    return EXIT_OK if worst == 0 else 1


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (seed, model, train sections)")
    common.add_argument("--weights", help="weight file (HOWT)")
    common.add_argument("--input", nargs="+", help="input files or directories")
    common.add_argument("--output", help="output file or directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--coord", choices=["cartesian", "cylindrical"])
    common.add_argument("--disable-relay-tokens", action="store_true")
    common.add_argument("--pooling", choices=["pyramid-attn", "gem", "pyramid-gem"])

    parser = argparse.ArgumentParser(prog="hotloc", description="Octree-transformer place recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic submaps")
    p.add_argument("--scene", choices=["forest", "two-ring"], default="forest")
    p.set_defaults(func=cmd_synth, need_output=True)

    p = sub.add_parser("embed", parents=[common], help="embed clouds into a descriptor file")
    p.set_defaults(func=cmd_embed, need_output=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate query descriptors against a database")
    p.add_argument("--database", help="database descriptor file")
    p.add_argument("--max-n", type=int, default=25)
    p.add_argument("--radius", type=float, default=30.0)
    p.set_defaults(func=cmd_eval, need_output=False)

    p = sub.add_parser("train", parents=[common], help="train on a synthetic forest")
    p.add_argument("--log", help="JSON-lines metrics log (default: <output>.log.jsonl)")
    p.set_defaults(func=cmd_train, need_output=True)

    p = sub.add_parser("dump", parents=[common], help="write windows, octree or attention dumps")
    p.add_argument("what", choices=["windows", "octree", "attention"])
    p.add_argument("--windows", type=int, default=4, help="windows per attention layer to export")
    p.set_defaults(func=cmd_dump, need_output=True)

    p = sub.add_parser("flops", parents=[common], help="measured vs closed-form attention MACs")
    p.set_defaults(func=cmd_flops, need_output=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.need_output and not args.output:
            raise ConfigError(f"{args.command} needs --output")
        return args.func(args)
    except (ConfigError, OctreeConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (DataError, FormatError, EmptyCloudError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
