"""Command-line entry point: ``layerpos <command> [--config FILE] [--field VALUE ...]``.

Every command resolves its configuration from the embedded defaults, an
optional JSON config file and flag overrides, in that order, and writes the
resolved config next to its outputs.  Failures print one JSON line on
stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

from .adapters import Backbone
from .bilevel import objective_value, run, write_metrics
from .config import ExperimentConfig
from .harness import (
    SyntheticTask,
    baselines,
    brute_force_oracle,
    layer_count_sweep,
    task_from_config,
)

COMMANDS = ("pretrain", "adapt", "oracle", "baselines", "sweep", "eval")
_SKIP = {"extra"}


class CommandError(RuntimeError):
    pass


def _planted(text: str) -> tuple:
    return tuple(int(s) for s in text.split(",") if s.strip())


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    for f in fields(ExperimentConfig):
        if f.name in _SKIP:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "planted":
            p.add_argument(flag, type=_planted, default=None, help="comma-separated layer indices")
        elif f.type in ("bool",):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        elif f.type in ("int",):
            p.add_argument(flag, type=int, default=None)
        elif f.type in ("float",):
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerpos", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name == "sweep":
            p.add_argument("--k-values", type=_planted, default=None, help="comma-separated k values")
        if name == "eval":
            p.add_argument("--data", choices=("target_val", "target_train", "source"), default="target_val")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    doc = ExperimentConfig().to_dict()
    if args.config:
        doc.update(json.loads(Path(args.config).read_text()))
    for f in fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if f.name not in _SKIP and value is not None:
            doc[f.name] = value
    return ExperimentConfig.from_dict(doc)


def _out(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    return out


def _task_dir(config: ExperimentConfig) -> Path:
    return Path(config.task) if config.task else Path(config.out_dir) / "task"


def _checkpoint(config: ExperimentConfig) -> Path:
    return Path(config.checkpoint) if config.checkpoint else Path(config.out_dir) / "pretrained.json"


def load_task(config: ExperimentConfig) -> SyntheticTask:
    """Task from disk with the backbone taken from the configured checkpoint."""
    tdir, ckpt = _task_dir(config), _checkpoint(config)
    if not (tdir / "task.json").exists():
        raise CommandError(f"task not found at {tdir}; run pretrain first")
    if not ckpt.exists():
        raise CommandError(f"checkpoint not found at {ckpt}; run pretrain first")
    task = SyntheticTask.load(tdir)
    net = Backbone.load(ckpt)
    if [l.W0.shape for l in net.layers] != [l.W0.shape for l in task.backbone.layers]:
        raise CommandError("checkpoint dimensions do not match the task")
    task.backbone = net
    return task


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, list) else repr(v) if isinstance(v, float) else v)
                        for k, v in r.items()})


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands

def cmd_pretrain(config: ExperimentConfig) -> dict:
    out = _out(config)
    task = task_from_config(config)
    task.save(_task_dir(config))
    task.backbone.save(_checkpoint(config))
    return {"checkpoint": str(_checkpoint(config)), "task": str(_task_dir(config)),
            "source_loss": task.source_loss, "threshold": config.source_threshold, "out_dir": str(out)}


def cmd_adapt(config: ExperimentConfig) -> dict:
    task = load_task(config)
    out = _out(config)
    net = task.backbone
    net.reset_adapters(task.meta["init_seed"])
    t0 = time.perf_counter()
    result = run(config, net, task.objective, task.target_train, task.target_val)
    elapsed = time.perf_counter() - t0
    net.save(out / "adapted.json")
    write_metrics(result, out)
    _dump(out / "selection.json", {"selection": list(result.selection), "k": config.k})
    return {"selection": list(result.selection), "final_phi_val": result.history[-1].phi_val,
            "wallclock_s": elapsed, "out_dir": str(out)}


def cmd_oracle(config: ExperimentConfig) -> dict:
    task = load_task(config)
    out = _out(config)
    res = brute_force_oracle(task, config.k, config.oracle_budget, config.eta_w)
    rows = res.rows()
    _write_rows(out / "oracle.csv", rows)
    _dump(out / "oracle.json", {"best_subset": list(res.best_subset), "ranking": rows,
                                "planted": list(task.planted)})
    return {"best_subset": list(res.best_subset), "subsets": len(rows), "out_dir": str(out)}


def cmd_baselines(config: ExperimentConfig) -> dict:
    task = load_task(config)
    out = _out(config)
    rows = baselines(task, config)
    _write_rows(out / "baselines.csv", rows)
    _dump(out / "baselines.json", {"rows": rows, "planted": list(task.planted)})
    return {"rows": rows, "out_dir": str(out)}


def cmd_sweep(config: ExperimentConfig, k_values=None) -> dict:
    task = load_task(config)
    out = _out(config)
    recs = layer_count_sweep(task, config, k_values or range(1, task.depth + 1))
    _write_rows(out / "sweep.csv", recs)
    _dump(out / "sweep.json", {"records": recs})
    return {"records": recs, "out_dir": str(out)}


def cmd_eval(config: ExperimentConfig, data: str = "target_val") -> dict:
    task = load_task(config)
    net = task.backbone
    X = {"target_val": task.target_val, "target_train": task.target_train, "source": task.source_X}[data]
    if X.shape[1] != net.d_in:
        raise CommandError("data dimension does not match the checkpoint")
    Y = net.predict(X)
    report = {"data": data, "checkpoint": str(_checkpoint(config)),
              "h2c": objective_value(task.objective, net, X),
              "target_mse": float(((Y - task.target_map(X)) ** 2).mean())}
    if data == "source":
        report["source_mse"] = float(((Y - task.source_Y) ** 2).mean())
    return report


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        if args.command == "sweep":
            result = cmd_sweep(config, args.k_values)
        elif args.command == "eval":
            result = cmd_eval(config, args.data)
        else:
            result = globals()[f"cmd_{args.command}"](config)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"status": "error", "command": args.command, "error": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
