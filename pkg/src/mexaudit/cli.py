"""Command-line front end.

Each subcommand reads the experiment config, consumes the artifacts of the
previous stage from the output directory and records what it wrote, with
content hashes, in ``manifest.json``.

    mexaudit gen-data --config exp.yaml --out runs/a
    mexaudit train    --config exp.yaml --out runs/a
    mexaudit audit    --config exp.yaml --out runs/a
    mexaudit report   --config exp.yaml --out runs/a
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, pipeline
from .datasets import DatasetError, FourWaySplit, TabularDataset, load_csv, split_four, write_csv
from .defense import SecretMissingError, TimeGuardConfig, secret_from_seed, timeguard_delays
from .nn import TrainingDivergedError, load_model, save_model
from .timing import ClusteringFailedError, TimingTrace, mean_noise, steal_from_times

logger = logging.getLogger("mexaudit")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class MissingArtifactError(RuntimeError):
    def __init__(self, path: Path, command: str):
        super().__init__(f"missing {path}; run `mexaudit {command}` first")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output directory plus the manifest bookkeeping for one command."""

    def __init__(self, cfg: pipeline.ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.root = Path(cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def need(self, rel: str, producer: str) -> Path:
        path = self.root / rel
        if not path.exists():
            raise MissingArtifactError(path, producer)
        self.inputs.append(path)
        return path

    def out(self, rel: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(path)
        return path

    def write_json(self, rel: str, obj) -> Path:
        path = self.out(rel)
        path.write_text(json.dumps(analysis._plain(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def finish(self) -> None:
        mpath = self.root / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"commands": {}}
        rel = lambda p: str(p.relative_to(self.root))
        manifest["commands"][self.command] = {
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict(),
            "inputs": {rel(p): sha256(p) for p in self.inputs},
            "outputs": {rel(p): sha256(p) for p in self.outputs},
        }
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# stage helpers -------------------------------------------------------------------


def _load_data(run: Run):
    meta = json.loads(run.need("data/meta.json", "gen-data").read_text())
    raw = load_csv(run.need("data/dataset.csv", "gen-data"), "label")
    ds = TabularDataset(raw.features, raw.labels, meta["n_classes"], meta["name"])
    split = FourWaySplit.from_dict(json.loads(run.need("data/split.json", "gen-data").read_text()))
    return ds, pipeline.make_splits(ds, split)


def _load_models(run: Run):
    return (load_model(run.need("models/target.npz", "train")),
            load_model(run.need("models/shadow.npz", "train")))


def _secret(cfg: pipeline.ExperimentConfig) -> bytes:
    env = cfg.defense.secret_env
    if os.environ.get(env):
        return TimeGuardConfig.from_env(0.0, env_var=env).secret
    logger.warning("%s is unset; using a secret derived from the master seed (experiments only)", env)
    return secret_from_seed(pipeline.derive_seed(cfg.seed, "timeguard-secret"))


# commands ------------------------------------------------------------------------


def cmd_gen_data(run: Run) -> None:
    cfg = run.cfg
    ds = pipeline.load_dataset(cfg)
    split = split_four(len(ds), pipeline.derive_seed(cfg.seed, "split"))
    write_csv(ds, run.out("data/dataset.csv"))
    run.write_json("data/split.json", split.to_dict())
    run.write_json("data/meta.json", {"name": ds.name, "n_classes": ds.n_classes,
                                      "n_features": ds.n_features, "n_samples": len(ds)})


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    ds, splits = _load_data(run)
    target = pipeline.train_model(cfg, splits.members, ds.n_classes, "target")
    if cfg.model.tau == "auto":
        pipeline.auto_tau(cfg, target, splits, ds.n_classes)
    shadow = pipeline.train_model(cfg, splits.shadow_members, ds.n_classes, "shadow")
    shadow.tau = target.tau
    save_model(target, run.out("models/target.npz"))
    save_model(shadow, run.out("models/shadow.npz"))


def cmd_audit(run: Run) -> None:
    ds, splits = _load_data(run)
    target, shadow = _load_models(run)
    record = pipeline.audit(run.cfg, ds, splits, target, shadow, run_id=f"{ds.name}-seed{run.cfg.seed}")
    run.write_json("audit/run.json", record)


def cmd_steal(run: Run) -> None:
    cfg = run.cfg
    _, splits = _load_data(run)
    target, _ = _load_models(run)
    probe, evaluated, _ = pipeline.steal(cfg, target, splits)
    probe.trace.to_csv(run.out("steal/probe_trace.csv"))
    evaluated.trace.to_csv(run.out("steal/eval_trace.csv"))
    run.write_json("steal/summary.json", {
        "true_n_exits": target.n_exits,
        "predicted_n_exits": probe.n_exits,
        "probe_accuracy": probe.accuracy,
        "eval_accuracy": evaluated.accuracy,
        "all_exits_observed": probe.all_exits_observed,
        "n_queries": cfg.adversary.n_queries,
    })


def cmd_defend(run: Run) -> None:
    cfg = run.cfg
    if cfg.defense is None:
        raise pipeline.ConfigError("defense: section required for defend")
    _, splits = _load_data(run)
    target, _ = _load_models(run)
    tm = pipeline.timing_model(cfg, target)
    guard = TimeGuardConfig(cfg.defense.sigma, _secret(cfg), cfg.defense.mode)
    x = np.vstack([splits.members[0], splits.nonmembers[0]])
    _, exits, delayed = timeguard_delays(x, target, tm, guard)
    rng = np.random.default_rng(pipeline.derive_seed(cfg.seed, "defend-channel"))
    observed = delayed + mean_noise(tm, len(x), cfg.adversary.n_queries, rng)
    result = steal_from_times(observed, exits, cfg.adversary.n_queries, max_clusters=10**6)
    TimingTrace(np.arange(len(x)), observed, cfg.adversary.n_queries, exits,
                result.predicted_exit).to_csv(run.out("defend/trace.csv"))
    run.write_json("defend/summary.json", {
        "defense": guard.to_dict(),
        "mean_response_time": float(delayed.mean()),
        "final_exit_time": float(tm.clean_times[-1]),
        "predicted_n_exits": result.n_exits,
        "steal_accuracy": result.accuracy,
    })


def cmd_sweep(run: Run) -> None:
    cfg = run.cfg
    if cfg.defense is None:
        raise pipeline.ConfigError("defense: section required for sweep")
    _, splits = _load_data(run)
    target, shadow = _load_models(run)
    if target.n_exits < 2:
        raise pipeline.ConfigError("model.n_exits: the sweep needs a multi-exit target")
    sweep = pipeline.defense_sweep(cfg, target, shadow, splits, _secret(cfg))
    run.write_json("sweep/tradeoff.json", {
        "rows": [vars(r) for r in sweep.rows],
        "crossing_sigma": sweep.crossing_sigma,
        "max_delay_time": sweep.max_delay_time,
    })


def cmd_report(run: Run) -> None:
    record = json.loads(run.need("audit/run.json", "audit").read_text())
    sweep_path = run.root / "sweep/tradeoff.json"
    if sweep_path.exists():
        run.inputs.append(sweep_path)
        record["sweep"] = json.loads(sweep_path.read_text())["rows"]
    report = analysis.build_report([record])
    report.write(run.out("report/audit_report.json"))
    for p in analysis.write_figure_csvs(report, run.root / "report"):
        run.outputs.append(p)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the dataset and the target/shadow split"),
    "train": (cmd_train, "train the target and shadow models"),
    "audit": (cmd_audit, "run every attack and diagnostic against the target"),
    "steal": (cmd_steal, "recover exit depths from simulated response times"),
    "defend": (cmd_defend, "apply TimeGuard and re-run timing-based stealing"),
    "sweep": (cmd_sweep, "privacy/latency trade-off over TimeGuard sigmas"),
    "report": (cmd_report, "assemble the audit report and figure CSVs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mexaudit", description="Membership-leakage audit of multi-exit networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a dotted config key, e.g. model.n_exits=3")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"mexaudit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise pipeline.ConfigError("seed: must be an unsigned 64-bit integer")
        cfg = pipeline.load_config(args.config, args.override, args.seed, args.out)
        run = Run(cfg, args.command)
        COMMANDS[args.command][0](run)
        run.finish()
    except (pipeline.ConfigError, DatasetError, MissingArtifactError, SecretMissingError) as exc:
        print(f"mexaudit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, ClusteringFailedError, RuntimeError, ValueError, OSError) as exc:
        print(f"mexaudit: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
