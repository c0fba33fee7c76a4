"""Command-line pipeline: experts, condensation, coresets, evaluation, reports.

Every subcommand resolves one RunConfig (defaults, then ``--config`` JSON,
then flags), echoes it as JSON on stdout, and writes its artifacts under
``--out``. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from collections import defaultdict
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import baselines, condense as cond, data, evaluation, trajectory
from .model import TsfeConfig
from .numerics import ContractError

log = logging.getLogger("tscondense")

COMMANDS = ("train-experts", "condense", "select-coreset", "train-eval", "stream-eval", "report")

DEFAULTS = {
    "data": {
        "path": None,
        "has_header": True,
        "drop_first_column": False,
        "ratios": [0.7, 0.1, 0.2],
        "window_stride": 1,
    },
    "model": {k: v for k, v in TsfeConfig().to_dict().items()},
    "experts": {"k": trajectory.DEFAULT_K, "epochs": 10, "lr": 0.01, "batch_size": 64, "workers": 1},
    "condense": cond.CondenseConfig().to_dict(),
    "coreset": {"method": "random", "n": 500},
    "train": {"source": "csv", "source_path": None, "method": None, "epochs": 100, "lr": 0.01, "batch_size": 32},
    "stream": {"replay": True},
    "seed": None,
    "out": None,
}
# the model's channel count always comes from the data
DEFAULTS["model"].pop("channels")

# flag -> (section, key, type); "" section means top level
FLAGS = {
    "data": ("data", "path", str),
    "lookback": ("model", "lookback", int),
    "pl": ("model", "horizon", int),
    "patch-len": ("model", "patch_len", int),
    "patch-stride": ("model", "patch_stride", int),
    "operators": ("model", "num_operators", int),
    "heads": ("model", "num_heads", int),
    "d-model": ("model", "model_dim", int),
    "norm": ("model", "norm", str),
    "window-stride": ("data", "window_stride", int),
    "k": ("experts", "k", int),
    "epochs": (None, "epochs", int),  # section depends on the subcommand
    "lr": (None, "lr", float),
    "batch-size": (None, "batch_size", int),
    "workers": ("experts", "workers", int),
    "n": (None, "n", int),
    "outer": ("condense", "outer_steps", int),
    "inner": ("condense", "inner_steps", int),
    "expert-steps": ("condense", "expert_steps", int),
    "alpha": ("condense", "inner_lr", float),
    "lr-syn": ("condense", "condensed_lr", float),
    "init": ("condense", "init", str),
    "kernel": ("condense", "kernel", int),
    "lambda-task": ("condense", "lambda_task", float),
    "lambda-fre": ("condense", "lambda_fre", float),
    "lambda-tmm": ("condense", "lambda_tmm", float),
    "method": (None, "method", str),
    "train-source": ("train", "source", str),
    "source": ("train", "source_path", str),
    "seed": ("", "seed", int),
    "out": ("", "out", str),
}

SECTION_FOR = {
    "train-experts": {"epochs": "experts", "lr": "experts", "batch-size": "experts"},
    "condense": {"n": "condense"},
    "select-coreset": {"n": "coreset", "method": "coreset"},
    "train-eval": {"epochs": "train", "lr": "train", "batch-size": "train", "method": "train"},
    "stream-eval": {"n": "condense", "epochs": "train", "lr": "train", "batch-size": "train"},
}

COMMAND_FLAGS = {
    "train-experts": ["data", "k", "epochs", "lr", "batch-size", "workers"],
    "condense": ["data", "buffer", "n", "outer", "inner", "expert-steps", "alpha", "lr-syn", "init", "kernel",
                 "lambda-task", "lambda-fre", "lambda-tmm"],
    "select-coreset": ["data", "method", "n"],
    "train-eval": ["data", "train-source", "source", "method", "epochs", "lr", "batch-size"],
    "stream-eval": ["data", "n", "outer", "inner", "expert-steps", "alpha", "lr-syn", "init", "kernel",
                    "lambda-task", "lambda-fre", "lambda-tmm", "k", "epochs", "lr", "batch-size"],
}
MODEL_FLAGS = ["lookback", "pl", "patch-len", "patch-stride", "operators", "heads", "d-model", "norm", "window-stride"]


class ConfigError(ValueError):
    """Invalid RunConfig; reported with exit code 2."""


class UsageError(Exception):
    def __init__(self, code: int):
        self.code = code


class _Parser(argparse.ArgumentParser):
    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise UsageError(status)


def toy_csv_path() -> Path:
    """Path of the small CSV bundled with the package."""
    return Path(str(resources.files("tscondense") / "resources" / "toy.csv"))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tscondense", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "report":
            sp.add_argument("--run-dir", required=True)
            continue
        sp.add_argument("--config", help="JSON RunConfig; flags override it")
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--no-header", action="store_true", default=None)
        sp.add_argument("--drop-first-column", action="store_true", default=None)
        for flag in COMMAND_FLAGS[name] + MODEL_FLAGS:
            if flag == "buffer":
                sp.add_argument("--buffer", required=True)
                continue
            typ = FLAGS[flag][2]
            kw = {}
            if flag == "method" and name == "select-coreset":
                kw["choices"] = baselines.METHODS
            if flag == "train-source":
                kw["choices"] = ("csv", "tdcs", "coreset-json")
            sp.add_argument(f"--{flag}", type=typ, default=None, **kw)
        if name == "stream-eval":
            sp.add_argument("--no-replay", action="store_true", default=None)
    return p


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        name = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config field {name!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config field {name!r} must be an object")
            out[k] = _merge(base[k], v, name + ".")
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < --config file < flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read --config {args.config}: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("--config must hold a JSON object")
        cfg = _merge(cfg, file_cfg)
    for flag, (section, key, _) in FLAGS.items():
        value = getattr(args, flag.replace("-", "_"), None)
        if value is None:
            continue
        if section is None:
            section = SECTION_FOR.get(args.command, {}).get(flag)
        if section == "":
            cfg[key] = value
        else:
            cfg[section][key] = value
    if args.no_header:
        cfg["data"]["has_header"] = False
    if args.drop_first_column:
        cfg["data"]["drop_first_column"] = True
    if getattr(args, "no_replay", None):
        cfg["stream"]["replay"] = False
    if args.command == "condense":
        cfg["condense"]["seed"] = cfg["seed"]
    validate(cfg, args.command)
    return cfg


def validate(cfg: dict, command: str) -> None:
    if cfg["data"]["path"] is None:
        raise ConfigError("data.path is required (--data)")
    for key in ("window_stride",):
        if int(cfg["data"][key]) < 1:
            raise ConfigError(f"data.{key} must be >= 1")
    try:
        data.split_lengths(100, cfg["data"]["ratios"])
    except (ContractError, TypeError, ValueError) as e:
        raise ConfigError(f"data.ratios: {e}") from None
    _model_config(cfg, channels=1)
    try:
        cond.CondenseConfig(**cfg["condense"])
    except (ContractError, TypeError) as e:
        raise ConfigError(f"condense: {e}") from None
    for section, keys in (("experts", ("k", "epochs", "batch_size", "workers")), ("train", ("epochs", "batch_size"))):
        for k in keys:
            if int(cfg[section][k]) < 1:
                raise ConfigError(f"{section}.{k} must be >= 1")
    for section in ("experts", "train"):
        if float(cfg[section]["lr"]) <= 0:
            raise ConfigError(f"{section}.lr must be positive")
    if cfg["experts"]["epochs"] < 2:
        raise ConfigError("experts.epochs must be >= 2")
    if cfg["coreset"]["method"] not in baselines.METHODS:
        raise ConfigError(f"coreset.method must be one of {baselines.METHODS}")
    if int(cfg["coreset"]["n"]) < 1:
        raise ConfigError("coreset.n must be >= 1")
    if command == "train-eval":
        src = cfg["train"]["source"]
        if src not in ("csv", "tdcs", "coreset-json"):
            raise ConfigError(f"train.source must be csv, tdcs or coreset-json, got {src!r}")
        if src != "csv" and not cfg["train"]["source_path"]:
            raise ConfigError(f"train.source_path is required for train.source={src} (--source)")


def _model_config(cfg: dict, channels: int) -> TsfeConfig:
    known = {f.name for f in fields(TsfeConfig)}
    for k in cfg["model"]:
        if k not in known:
            raise ConfigError(f"unknown config field 'model.{k}'")
    try:
        return TsfeConfig(channels=channels, **cfg["model"])
    except (ContractError, TypeError) as e:
        raise ConfigError(f"model: {e}") from None


class Pipeline:
    """Data loading shared by the subcommands."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        d = cfg["data"]
        self.raw = data.load_csv(d["path"], has_header=d["has_header"], drop_first_column=d["drop_first_column"])
        self.train, self.val, self.test = data.split_chronological(self.raw, tuple(d["ratios"]))
        self.model = _model_config(cfg, self.raw.channels)
        lb, pl = self.model.lookback, self.model.horizon
        z = lambda s: data.standardize(s, self.train)  # noqa: E731
        self.train_w = data.make_windows(z(self.train), lb, pl, int(d["window_stride"]))
        self.test_w = data.make_windows(z(self.test), lb, pl, 1)

    @property
    def name(self) -> str:
        return Path(self.cfg["data"]["path"]).stem


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train_experts(cfg: dict, out: Path) -> None:
    pipe = Pipeline(cfg)
    e = cfg["experts"]
    buf = trajectory.train_experts(
        pipe.train_w, pipe.model, e["k"], e["epochs"], e["lr"], cfg["seed"], e["batch_size"], e["workers"]
    )
    trajectory.buffer_save(buf, out / "buffer.tdcb")
    _write_json(
        out / "buffer.json",
        {
            "experts": e,
            "model": pipe.model.to_dict(),
            "data_length": len(pipe.train_w),
            "channels": pipe.train_w.channels,
            "seeds": [t.seed for t in buf.trajectories],
            "epoch_losses": [t.epoch_losses for t in buf.trajectories],
        },
    )


def _load_buffer(path: Path, pipe: Pipeline) -> trajectory.ExpertBuffer:
    side = path.with_suffix(".json")
    expected = None
    if side.exists():
        meta = json.loads(side.read_text())
        ex = meta["experts"]
        expected = trajectory.expert_fingerprint(
            pipe.model, ex["epochs"], ex["lr"], len(pipe.train_w), pipe.train_w.channels
        )
    buf = trajectory.buffer_load(path, expected)
    trajectory.check_buffer_config(buf, pipe.model)
    return buf


def cmd_condense(cfg: dict, out: Path, buffer_path: str) -> None:
    pipe = Pipeline(cfg)
    buf = _load_buffer(Path(buffer_path), pipe)
    ccfg = cond.CondenseConfig(**cfg["condense"])
    with (out / "diag.jsonl").open("w") as fh:
        S, _ = cond.condense(pipe.train_w, buf, ccfg, pipe.model, on_step=lambda d: fh.write(d.to_json() + "\n"))
    cond.save_condensed(S, out / "condensed.tdcs")


def cmd_select_coreset(cfg: dict, out: Path) -> None:
    pipe = Pipeline(cfg)
    c = cfg["coreset"]
    sel = baselines.select(c["method"], pipe.train_w, int(c["n"]), cfg["seed"])
    sel.save(out / "coreset.json")


def cmd_train_eval(cfg: dict, out: Path) -> None:
    from . import plotting

    pipe = Pipeline(cfg)
    t = cfg["train"]
    src, path = t["source"], t["source_path"]
    if src == "csv":
        train_data, method = pipe.train_w, "full"
    elif src == "tdcs":
        train_data, method = cond.load_condensed(path), "condensed"
        rows = evaluation.pca_projection(pipe.train_w, train_data, out / "pca.csv", seed=cfg["seed"])
        plotting.pca_figure(rows, out / "pca.png")
    else:
        sel = baselines.CoresetSelection.load(path)
        if max(sel.indices) >= len(pipe.train_w):
            raise ContractError(f"coreset index {max(sel.indices)} out of range for {len(pipe.train_w)} windows")
        train_data, method = pipe.train_w.subset(list(sel.indices)), sel.method
    method = t["method"] or method
    params = evaluation.train_downstream(train_data, pipe.model, t["epochs"], t["lr"], cfg["seed"], t["batch_size"])
    metrics = evaluation.evaluate(params, pipe.test_w)
    rec = metrics.record(
        method=method,
        dataset=pipe.name,
        pl=pipe.model.horizon,
        n_condensed=len(train_data),
        seed=cfg["seed"],
    )
    _write_json(out / f"metrics-{method}-pl{pipe.model.horizon}-seed{cfg['seed']}.json", rec)


def cmd_stream_eval(cfg: dict, out: Path) -> None:
    pipe = Pipeline(cfg)
    e, t = cfg["experts"], cfg["train"]
    setup = evaluation.StreamSetup(
        model=pipe.model,
        condense=cond.CondenseConfig(**cfg["condense"]),
        train=evaluation.TrainSettings(t["epochs"], t["lr"], t["batch_size"]),
        experts=e["k"],
        expert_epochs=e["epochs"],
        expert_lr=e["lr"],
        stride=cfg["data"]["window_stride"],
        replay=cfg["stream"]["replay"],
    )
    res = evaluation.stream_eval(pipe.raw, setup, cfg["seed"])
    method = "stream-replay" if setup.replay else "stream-finetune"
    _write_json(
        out / f"stream-{method}-seed{cfg['seed']}.json",
        {stage: m.record(method=method, stage=stage, seed=cfg["seed"], pl=pipe.model.horizon) for stage, m in res.items()},
    )


REPORT_FIELDS = ("method", "pl", "seeds", "mae", "mse", "accuracy", "precision", "train_seconds", "num_params")


def report(run_dir) -> list[dict]:
    """Mean over seeds per (method, pl) of every ``metrics-*.json`` under ``run_dir``."""
    from . import plotting

    run_dir = Path(run_dir)
    files = sorted(run_dir.rglob("metrics-*.json")) if run_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no metrics-*.json files under {run_dir}")
    groups = defaultdict(list)
    for f in files:
        try:
            rec = json.loads(f.read_text())
            key = (str(rec["method"]), int(rec["pl"]))
            float(rec["mse"]), float(rec["mae"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ValueError(f"malformed metrics file {f}: {e}") from None
        groups[key].append(rec)
    rows = []
    for (method, pl), recs in sorted(groups.items()):
        row = {"method": method, "pl": pl, "seeds": len(recs)}
        for k in ("mae", "mse", "accuracy", "precision", "train_seconds", "num_params"):
            vals = [r[k] for r in recs if r.get(k) is not None]
            if vals:
                row[k] = int(round(np.mean(vals))) if k == "num_params" else float(np.mean(vals))
        rows.append(row)
    with (run_dir / "report.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)
    _write_json(run_dir / "report.json", rows)
    plotting.report_figure(rows, run_dir / "report.png")
    return rows


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return e.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "report":
        try:
            rows = report(args.run_dir)
        except (FileNotFoundError, ValueError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
        print(json.dumps(rows, indent=2, sort_keys=True))
        return 0

    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **cfg}, indent=2, sort_keys=True))

    torch.manual_seed(cfg["seed"])
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"runconfig-{args.command}.json", {"command": args.command, **cfg})
        if args.command == "train-experts":
            cmd_train_experts(cfg, out)
        elif args.command == "condense":
            cmd_condense(cfg, out, args.buffer)
        elif args.command == "select-coreset":
            cmd_select_coreset(cfg, out)
        elif args.command == "train-eval":
            cmd_train_eval(cfg, out)
        elif args.command == "stream-eval":
            cmd_stream_eval(cfg, out)
    except Exception as e:  # runtime failures are reported, not raised
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
