"""Command-line entry point: ``streetlight-fl {synth,run,eval,compare}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, describe, parse_config
from .imaging import ImageFormatError, save_ppm
from .metrics import ConfusionCounts
from .model import CheckpointError, ModelParams, load_params
from .synth import FleetError, NodeType, generate_sample, node_timestamps, write_node_types_csv

log = logging.getLogger("streetlight_fl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'section.key = value' file")
    common.add_argument("--method", choices=ex.METHODS)
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--rounds", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--threads", type=int, metavar="N")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="streetlight-fl", description=__doc__.splitlines()[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter,
                     epilog="config keys:\n" + describe())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write the fleet table, datasets and preview images")
    sub.add_parser("run", parents=[common], help="train one method; write report, checkpoints, history")
    ev = sub.add_parser("eval", parents=[common], help="score saved checkpoints on a split")
    ev.add_argument("--checkpoint", required=True, metavar="PATH",
                    help="a .flsl file, or a directory written by `run`")
    ev.add_argument("--split", choices=("test", "train"), default="test")
    sub.add_parser("compare", parents=[common], help="personalised vs centralised vs FL, all groups")
    return parser


def config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(None, f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for flag, key in (("method", "run.method"), ("seed", "run.seed"), ("rounds", "fl.rounds"),
                      ("out", "run.out"), ("threads", "run.threads")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    return parse_config(args.config, overrides)


def _fleet(cfg: ExperimentConfig) -> ex.SplitFleet:
    log.info("generating fleet (seed %d)", cfg.seed)
    return ex.build_fleet(cfg.profiles(), cfg.split(), cfg.crop_side, cfg["image.green"], cfg["run.threads"])


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def print_report(report: ex.RunReport, stream=None) -> None:
    stream = stream or sys.stdout
    for g in ex.GROUPS:
        r = report.groups[g]
        c = r.counts
        print(f"{report.method:<13} {g:<7} acc={c.accuracy:.4f} err={c.error_rate:.4f} f1={r.as_dict()['f1']:.4f} "
              f"n={c.total} faults={r.faults} models={report.model_count}", file=stream)
    cm = report.comm
    if cm.fl_bytes:
        print(f"{report.method:<13} comm    fl_bytes={cm.fl_bytes} centralised_bytes={cm.centralised_bytes} "
              f"ratio={cm.ratio:.6f} ({100 * cm.ratio:.3f}%)", file=stream)


# -- subcommands -------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    profiles = cfg.profiles()
    write_node_types_csv(profiles, out / "node_types.csv")
    fleet = ex.build_fleet(profiles, cfg.split(), cfg.crop_side, cfg["image.green"], cfg["run.threads"])
    for part, idx in (("train", 0), ("test", 1)):
        samples = [s for _, pair in sorted(fleet.splits.items()) for s in pair[idx]]
        np.savez(out / f"{part}.npz",
                 node_id=np.array([s.node_id for s in samples], dtype=np.int64),
                 timestamp_minute=np.array([s.timestamp_minute for s in samples], dtype=np.int64),
                 label=np.array([int(s.label) for s in samples], dtype=np.int8),
                 features=np.stack([s.features for s in samples]))
    preview = out / "preview"
    preview.mkdir(exist_ok=True)
    for t in NodeType:
        p = next((p for p in profiles if p.node_type == t), None)
        if p is None:
            continue
        ts = node_timestamps(p)
        for i in (0, len(ts) // 2):
            s = generate_sample(p, ts[i], i)
            save_ppm(s.image, preview / f"type{int(t)}_node{p.node_id:04d}_t{ts[i]:04d}_{s.label.name.lower()}.ppm")
    print(f"{len(profiles)} nodes, {fleet.training_images} training samples -> {out}")
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    method = cfg["run.method"]
    fleet = _fleet(cfg)
    history = str(out / f"history_{method}.csv") if method in ("fl", "clustered", "partial") else None
    log.info("training %s", method)
    models, report = ex.run_method(method, fleet, cfg.settings(), cfg.echo(), history)
    ex.save_models(models, out / f"checkpoints_{method}")
    ex.write_report(report, out / f"report_{method}.json")
    print_report(report)
    return EXIT_OK


def _load_checkpoints(path: Path) -> ModelParams | dict[int, ModelParams]:
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if path.is_file():
        return load_params(path)
    nodes = sorted(path.glob("node_*.flsl"))
    if nodes:
        return {int(p.stem.split("_")[1]): load_params(p) for p in nodes}
    if (path / "model.flsl").exists():
        return load_params(path / "model.flsl")
    clusters = sorted(path.glob("cluster_*.flsl"))
    if clusters:
        return [load_params(p) for p in clusters]
    raise FileNotFoundError(f"no checkpoints (*.flsl) in {path}")


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, split: str) -> int:
    loaded = _load_checkpoints(Path(checkpoint))
    fleet = _fleet(cfg)
    if split == "train":
        fleet = ex.SplitFleet(fleet.profiles, {n: (tr, tr) for n, (tr, _) in fleet.splits.items()})
    ids = sorted(fleet.splits)
    if isinstance(loaded, ModelParams):
        models = {n: loaded for n in ids}
    elif isinstance(loaded, dict):
        missing = [n for n in ids if n not in loaded]
        if missing:
            raise ValueError(f"checkpoint directory has no model for node(s) {missing[:5]}")
        models = loaded
    else:
        from .fl import best_cluster

        models = {c.node_id: loaded[best_cluster(c, loaded)] for c in fleet.clients()}
    for m in {id(m): m for m in models.values()}.values():
        if m.layers[0][0].shape[1] != fleet.n_features:
            raise ValueError(f"checkpoint expects {m.layers[0][0].shape[1]} inputs, "
                             f"the configured features have {fleet.n_features}")
    per_node = ex.score_nodes(fleet, models)
    s = cfg.settings()
    groups = ex.group_results(fleet, per_node, s.positive_on)
    report = {"checkpoint": Path(checkpoint).name, "split": split,
              "groups": {k: v.as_dict() for k, v in groups.items()}, "config": cfg.echo()}
    out = _out_dir(cfg)
    ex.write_report(report, out / f"eval_{split}.json")
    for g in ex.GROUPS:
        c: ConfusionCounts = groups[g].counts
        print(f"eval {g:<7} acc={c.accuracy:.4f} err={c.error_rate:.4f} n={c.total} faults={groups[g].faults}")
    return EXIT_OK


def compare_rows(reports: dict[str, ex.RunReport]) -> list[dict]:
    rows = []
    for m in ex.COMPARE_METHODS:
        for g in ex.GROUPS:
            r = reports[m].groups[g].as_dict()
            rows.append({"method": m, "group": g, "accuracy": r["accuracy"], "error_rate": r["error_rate"],
                         "f1": r["f1"], "node_mean_accuracy": r["node_mean_accuracy"], "total": r["total"],
                         "faults": r["faults"], "models": reports[m].model_count})
    return rows


def ordering_holds(reports: dict[str, ex.RunReport], group: str = "all") -> bool:
    acc = [reports[m].groups[group].counts.accuracy for m in ex.COMPARE_METHODS]
    return acc[0] >= acc[1] >= acc[2]


def cmd_compare(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    fleet = _fleet(cfg)
    s = cfg.settings()
    reports = {}
    for m in ex.COMPARE_METHODS:
        log.info("training %s", m)
        history = str(out / "history_fl.csv") if m == "fl" else None
        models, reports[m] = ex.run_method(m, fleet, s, cfg.echo(), history)
        ex.save_models(models, out / f"checkpoints_{m}")
        ex.write_report(reports[m], out / f"report_{m}.json")
    rows = compare_rows(reports)
    header = list(rows[0])
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(f"{r[k]:.17g}" if isinstance(r[k], float) else str(r[k]) for k in header))
    (out / "compare.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    summary = {"rows": rows, "ordering_all": ordering_holds(reports),
               "edge_below_normal": {m: reports[m].groups["edge"].counts.accuracy
                                     < reports[m].groups["normal"].counts.accuracy for m in ex.COMPARE_METHODS},
               "comm": reports["fl"].comm.as_dict()}
    ex.write_report(summary, out / "compare.json")
    print(f"{'method':<13} {'group':<7} {'accuracy':>9} {'error':>8} {'f1':>8} {'models':>6}")
    for r in rows:
        print(f"{r['method']:<13} {r['group']:<7} {r['accuracy']:>9.4f} {r['error_rate']:>8.4f} "
              f"{r['f1']:>8.4f} {r['models']:>6}")
    print("ordering personalised >= centralised >= fl (all):", "yes" if summary["ordering_all"] else "no")
    cm = reports["fl"].comm
    print(f"fl bytes {cm.fl_bytes} vs centralised upload {cm.centralised_bytes}: ratio {cm.ratio:.6f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        return cmd_compare(cfg)
    except (ConfigError, FleetError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, ImageFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001 - diagnostics instead of a traceback
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
