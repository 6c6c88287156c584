"""Command-line front end: ingest, train, eval, diagnose, sweep.

Configuration comes from a line-oriented ``key=value`` file; command-line
flags override file values. Every run writes into a fresh timestamped directory
under the configured output root, never appending to an old one.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import time

import numpy as np

from .attention import NeighborIndex
from .checkpoint import load_arrays, load_model, save_arrays, save_model
from .events import EventStream, chronological_split, load_jodie_csv
from .exceptions import BadgnnError, ConfigError
from .lipschitz import report_for_model
from .memory import NodeMemory
from .training import TrainConfig, evaluate, run_training

SWEEP_COLUMNS = [
    "batch_size", "lambda_tlr", "lambda_a3", "ap", "auc", "epoch_time_s", "status",
]


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    """Everything a run needs: training config plus data/IO/ablation fields."""

    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    dataset: str = ""
    out: str = "runs"
    train_frac: float = 0.70
    val_frac: float = 0.15
    tlr_on: bool = True
    a3_on: bool = True
    max_events: int = 0  # 0 = no cap
    batch_grid: list = dataclasses.field(default_factory=list)
    lambda_tlr_grid: list = dataclasses.field(default_factory=list)
    lambda_a3_grid: list = dataclasses.field(default_factory=list)

    def effective_train(self) -> TrainConfig:
        """Training config with ablation switches folded into the lambdas."""
        cfg = dataclasses.replace(
            self.train,
            lambda_tlr=self.train.lambda_tlr if self.tlr_on else 0.0,
            lambda_a3=self.train.lambda_a3 if self.a3_on else 0.0,
        )
        cfg.validate()
        return cfg

    def label(self) -> str:
        cfg = self.effective_train()
        has_tlr = cfg.lambda_tlr > 0
        has_a3 = cfg.lambda_a3 > 0 or cfg.a3_form == "pure"
        if has_tlr and has_a3:
            return "badgnn"
        if has_tlr:
            return "tgn-tlr"
        if has_a3:
            return "tgn-a3"
        return "tgn"


_BOOL_KEYS = {"tlr_on", "a3_on"}
_INT_KEYS = {"batch_size", "epochs", "seed", "d_mem", "d_time", "h", "d_k", "m",
             "max_events"}
_FLOAT_KEYS = {"lambda_tlr", "lambda_a3", "lr", "dropout_rate", "sigma",
               "train_frac", "val_frac"}
_STR_KEYS = {"dataset", "out", "a3_form", "aggregator"}
_GRID_KEYS = {"batch_sizes": "batch_grid", "lambda_tlrs": "lambda_tlr_grid",
              "lambda_a3s": "lambda_a3_grid"}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def parse_config_file(path: str) -> dict:
    """Read ``key=value`` lines; ``#`` starts a comment; blanks ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = raw
    return values


def apply_values(run: RunConfig, values: dict) -> RunConfig:
    for key, raw in values.items():
        if key in _GRID_KEYS:
            parts = [p for p in str(raw).split(",") if p.strip()]
            target = _GRID_KEYS[key]
            cast = int if key == "batch_sizes" else float
            setattr(run, target, [cast(p) for p in parts])
        elif key in _BOOL_KEYS:
            setattr(run, key, _parse_bool(str(raw)) if isinstance(raw, str) else bool(raw))
        elif key in _INT_KEYS:
            if hasattr(run.train, key):
                setattr(run.train, key, int(raw))
            else:
                setattr(run, key, int(raw))
        elif key in _FLOAT_KEYS:
            if hasattr(run.train, key):
                setattr(run.train, key, float(raw))
            else:
                setattr(run, key, float(raw))
        elif key in _STR_KEYS:
            if hasattr(run.train, key):
                setattr(run.train, key, str(raw))
            else:
                setattr(run, key, str(raw))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return run


def config_echo(run: RunConfig) -> str:
    lines = [f"dataset={run.dataset}", f"out={run.out}",
             f"train_frac={run.train_frac}", f"val_frac={run.val_frac}",
             f"tlr_on={run.tlr_on}", f"a3_on={run.a3_on}",
             f"max_events={run.max_events}", f"label={run.label()}"]
    for key, value in run.train.to_dict().items():
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def fresh_run_dir(root: str, mode: str) -> str:
    os.makedirs(root, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(root, f"{stamp}-{mode}")
    path = base
    counter = 1
    while os.path.exists(path):
        path = f"{base}-{counter:02d}"
        counter += 1
    os.makedirs(path)
    return path


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------

def save_stream(path: str, stream: EventStream) -> None:
    save_arrays(
        path,
        {
            "src": stream.src, "dst": stream.dst, "t": stream.t,
            "label": stream.label, "feat": stream.feat, "seq": stream.seq,
        },
        meta={"kind": "event_stream", "n_nodes": stream.n_nodes, "d_e": stream.d_e},
    )


def load_stream(path: str) -> EventStream:
    arrays, meta = load_arrays(path)
    return EventStream(
        arrays["src"], arrays["dst"], arrays["t"], arrays["label"],
        arrays["feat"], arrays["seq"], meta["n_nodes"], meta["d_e"],
    )


def read_dataset(path: str, max_events: int = 0) -> EventStream:
    """CSV or ingested binary, optionally truncated to the first N events."""
    if not path:
        raise ConfigError("no dataset configured (set dataset= or --dataset)")
    if path.endswith(".bin"):
        stream = load_stream(path)
    else:
        stream = load_jodie_csv(path)
    if max_events and max_events < len(stream):
        stream = stream.slice(0, max_events)
    return stream


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    stream = load_jodie_csv(args.csv)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "stream.bin")
    save_stream(out_path, stream)
    print(
        f"ingested {len(stream)} events, {stream.n_nodes} nodes, "
        f"d_e={stream.d_e} -> {out_path}"
    )
    return 0


def _train_once(run: RunConfig, run_dir: str) -> int:
    cfg = run.effective_train()
    stream = read_dataset(run.dataset, run.max_events)
    train, val, test = chronological_split(stream, run.train_frac, run.val_frac)
    universe = stream.destinations()

    files = {
        name: open(os.path.join(run_dir, f"{name}_metrics.jsonl"), "w")
        for name in ("train", "val", "test")
    }

    def on_epoch(record):
        files["train"].write(record.train.json_line(record.epoch, cfg) + "\n")
        if record.val is not None:
            files["val"].write(record.val.json_line(record.epoch, cfg) + "\n")
        if record.test is not None:
            files["test"].write(record.test.json_line(record.epoch, cfg) + "\n")
        for fh in files.values():
            fh.flush()
        val_ap = f"{record.val.ap:.4f}" if record.val else "n/a"
        test_ap = f"{record.test.ap:.4f}" if record.test else "n/a"
        print(
            f"epoch {record.epoch}: train_loss={record.train.loss:.4f} "
            f"val_ap={val_ap} test_ap={test_ap} "
            f"({record.train.epoch_time_s:.1f}s)"
        )

    try:
        result = run_training(train, val, test, cfg, dst_universe=universe,
                              on_epoch=on_epoch)
    finally:
        for fh in files.values():
            fh.close()
    ckpt = os.path.join(run_dir, "checkpoint.bin")
    save_model(
        ckpt, result.params, result.memory, cfg,
        extra_meta={
            "dataset": run.dataset, "train_frac": run.train_frac,
            "val_frac": run.val_frac, "max_events": run.max_events,
            "label": run.label(),
        },
    )
    print(f"checkpoint -> {ckpt}")
    return 0


def cmd_train(run: RunConfig) -> int:
    run_dir = fresh_run_dir(run.out, f"train-{run.label()}")
    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(config_echo(run))
    print(f"run dir: {run_dir}")
    return _train_once(run, run_dir)


def cmd_eval(args) -> int:
    params, mem, cfg, meta = load_model(args.checkpoint)
    dataset = args.dataset or meta.get("dataset", "")
    stream = read_dataset(dataset, int(meta.get("max_events", 0)))
    train, val, test = chronological_split(
        stream, float(meta.get("train_frac", 0.70)), float(meta.get("val_frac", 0.15))
    )
    universe = stream.destinations()
    index = NeighborIndex(stream.n_nodes)
    index.insert_events(train)
    vm = evaluate(val, mem, params, cfg, index, universe, split_tag=1)
    em = evaluate(test, mem, params, cfg, index, universe, split_tag=2)
    print(f"val:  ap={vm.ap:.6f} auc={vm.auc:.6f}")
    print(f"test: ap={em.ap:.6f} auc={em.auc:.6f}")
    return 0


def cmd_diagnose(args) -> int:
    params, mem, cfg, _meta = load_model(args.checkpoint)
    report = report_for_model(params, cfg, mem=mem, seed=cfg.seed)
    out_path = args.out or (os.path.splitext(args.checkpoint)[0] + "_diagnostics.json")
    with open(out_path, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())
    print(f"report -> {out_path}")
    return 0


def cmd_sweep(run: RunConfig) -> int:
    """Train/evaluate over the config grids, one CSV row per point.

    Rows stream out as each point finishes; a failed point is recorded with
    ``status=failed`` and the sweep continues. Exit status is 0 only if all
    points succeeded.
    """
    batch_grid = run.batch_grid or [run.train.batch_size]
    tlr_grid = run.lambda_tlr_grid or [run.train.lambda_tlr]
    a3_grid = run.lambda_a3_grid or [run.train.lambda_a3]
    if not (batch_grid and tlr_grid and a3_grid):
        raise ConfigError("sweep grids must be non-empty")

    run_dir = fresh_run_dir(run.out, "sweep")
    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(config_echo(run))
    print(f"run dir: {run_dir}")

    stream = read_dataset(run.dataset, run.max_events)
    train, val, test = chronological_split(stream, run.train_frac, run.val_frac)
    universe = stream.destinations()

    all_ok = True
    csv_path = os.path.join(run_dir, "sweep.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        fh.flush()
        for batch_size in batch_grid:
            for lam_tlr in tlr_grid:
                for lam_a3 in a3_grid:
                    point = dataclasses.replace(
                        run.effective_train(),
                        batch_size=int(batch_size),
                        lambda_tlr=float(lam_tlr) if run.tlr_on else 0.0,
                        lambda_a3=float(lam_a3) if run.a3_on else 0.0,
                    )
                    try:
                        result = run_training(train, val, test, point,
                                              dst_universe=universe)
                        final = result.final
                        target = final.test or final.val or final.train
                        mean_epoch_s = float(
                            np.mean([r.train.epoch_time_s for r in result.history])
                        )
                        row = [point.batch_size, point.lambda_tlr, point.lambda_a3,
                               f"{target.ap:.6f}", f"{target.auc:.6f}",
                               f"{mean_epoch_s:.3f}", "ok"]
                    except Exception as exc:  # keep sweeping past bad points
                        all_ok = False
                        row = [point.batch_size, point.lambda_tlr, point.lambda_a3,
                               "", "", "", "failed"]
                        print(f"grid point failed: {exc}", file=sys.stderr)
                    writer.writerow(row)
                    fh.flush()
                    print("sweep row: " + ",".join(str(x) for x in row))
    print(f"sweep table -> {csv_path}")
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--dataset")
    parser.add_argument("--out")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--lambda-tlr", type=float, dest="lambda_tlr")
    parser.add_argument("--lambda-a3", type=float, dest="lambda_a3")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--max-events", type=int, dest="max_events")
    parser.add_argument("--tlr-on", dest="tlr_on", choices=["true", "false"])
    parser.add_argument("--a3-on", dest="a3_on", choices=["true", "false"])


def _run_config_from_args(args) -> RunConfig:
    run = RunConfig()
    if args.config:
        apply_values(run, parse_config_file(args.config))
    overrides = {}
    for key in ("dataset", "out", "batch_size", "lambda_tlr", "lambda_a3",
                "lr", "epochs", "seed", "max_events", "tlr_on", "a3_on"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    apply_values(run, overrides)
    return run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="badgnn",
        description="Temporal graph stream learner with batch-robustness "
                    "regularization and sensitivity diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="parse a CSV into a binary stream")
    p_ingest.add_argument("csv")
    p_ingest.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="train and checkpoint a model")
    _add_override_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on val/test")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset")

    p_diag = sub.add_parser("diagnose", help="sensitivity report for a checkpoint")
    p_diag.add_argument("--checkpoint", required=True)
    p_diag.add_argument("--out")

    p_sweep = sub.add_parser("sweep", help="train/evaluate over config grids")
    _add_override_flags(p_sweep)
    p_sweep.add_argument("--grid", help="key=value file with *_grid lists")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "diagnose":
            return cmd_diagnose(args)
        run = _run_config_from_args(args)
        if args.command == "sweep":
            if args.grid:
                apply_values(run, parse_config_file(args.grid))
            return cmd_sweep(run)
        return cmd_train(run)
    except (BadgnnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
