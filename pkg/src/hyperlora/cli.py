"""Command-line entry point: ``hyperlora <command> [options]``.

Commands: train-pinn, adapt, hyper, sweep, export.  Options may come from a
TOML file (``--config``); flags given on the command line take precedence.
Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import autodiff as ad
from . import bench, nn, train
from .pde import SolverError, base_task, make_system

log = logging.getLogger("hyperlora")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    system: str = "kovasznay"
    re: float | None = None            # task parameters; None -> the family's base task
    nu: float | None = None
    grf_seed: int | None = None
    seed: int = 0
    scale: str = "desk"
    epochs: int | None = None
    rank: int | str = 4                # int or "full"
    regime: str = "b4"
    kind: str = "rank"                 # sweep kind: rank | hyper | timing
    base: str | None = None            # base checkpoint path
    checkpoint: str | None = None      # checkpoint to export
    out: str | None = None
    split_seed: int = 0
    n_train: int | None = None
    n_valid: int | None = None
    n_test: int | None = None
    point_fraction: float = 1.0
    ranks: list = field(default_factory=lambda: list(bench.DEFAULT_RANKS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    regimes: list = field(default_factory=lambda: list(train.REGIMES))
    output_scale: float = 1.0
    val_every: int = 10
    reps: int = 5
    jobs: int = 1

    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get("HYPERLORA_OUT", "hyperlora_out"))

    def task(self):
        """The single task selected by re/nu/grf_seed (base task when unset)."""
        if self.system == "kovasznay" and self.re is not None:
            return make_system("kovasznay", re=float(self.re))
        if self.system == "burgers2d" and self.nu is not None:
            return make_system("burgers2d", nu=float(self.nu))
        if self.system == "burgers1d" and self.grf_seed is not None:
            from .pde import Burgers1D, sample_grf_u0
            return Burgers1D(sample_grf_u0(int(self.grf_seed)))
        return base_task(self.system)

    def rank_value(self) -> int | None:
        if str(self.rank).lower() in ("full", "*"):
            return None
        return int(self.rank)

    def bench_config(self) -> bench.BenchConfig:
        sizes = bench.default_split_sizes(self.system)
        sizes = tuple(n if n is not None else d for n, d in zip((self.n_train, self.n_valid, self.n_test), sizes))
        ep = self.epochs
        return bench.BenchConfig(self.system, self.scale, pinn_epochs=ep, adapt_epochs=ep, hyper_epochs=ep,
                                 point_fraction=self.point_fraction, seeds=tuple(self.seeds),
                                 ranks=tuple(self.ranks), split_sizes=sizes, split_seed=self.split_seed,
                                 output_scale=self.output_scale, val_every=self.val_every, jobs=self.jobs)

    def to_dict(self) -> dict:
        return asdict(self)


REQUIRED = {
    "train-pinn": ("system",),
    "adapt": ("base",),
    "hyper": ("base", "regime"),
    "sweep": ("kind",),
    "export": ("checkpoint",),
}


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    # allow an optional [run] table
    return data.get("run", data) if isinstance(data.get("run"), dict) else data


def resolve_config(command: str, file_values: dict, flag_values: dict) -> RunConfig:
    """Defaults < config file < command-line flags; unknown keys rejected."""
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    missing = [k for k in REQUIRED[command] if k not in merged]
    if missing:
        raise ConfigError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-")
                                                                            for m in missing))
    cfg = RunConfig(**merged)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.system not in ("kovasznay", "burgers2d", "burgers1d"):
        raise ConfigError(f"unknown system {cfg.system!r}")
    if cfg.scale not in ("desk", "paper"):
        raise ConfigError(f"scale must be desk|paper, got {cfg.scale!r}")
    if cfg.regime.lower() not in train.REGIMES:
        raise ConfigError(f"regime must be one of {', '.join(train.REGIMES)}")
    if cfg.kind not in ("rank", "hyper", "timing"):
        raise ConfigError(f"sweep kind must be rank|hyper|timing, got {cfg.kind!r}")
    if cfg.epochs is not None and cfg.epochs < 1:
        raise ConfigError("epochs must be positive")
    if not 0 < cfg.point_fraction <= 1:
        raise ConfigError("point_fraction must lie in (0, 1]")
    try:
        cfg.rank_value()
    except ValueError:
        raise ConfigError(f"rank must be an integer or 'full', got {cfg.rank!r}") from None
    ranks = []
    for r in cfg.ranks:
        if str(r).lower() in ("full", "*") and cfg.kind == "hyper":
            ranks.append("full")
            continue
        try:
            ranks.append(int(r))
        except ValueError:
            raise ConfigError(f"ranks must be integers (or 'full' for hyper sweeps), got {r!r}") from None
    cfg.ranks = ranks


# --------------------------------------------------------------------------
# model files

def _budget(cfg: RunConfig, task):
    return cfg.bench_config().budget(task)


def _read_checkpoint(path):
    try:
        return nn.load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise OSError(f"unreadable checkpoint {path}: {exc}") from exc


def _load_base(path) -> nn.Mlp:
    params, header, _ = _read_checkpoint(path)
    c = header["config"]
    if c.get("kind") not in ("pinn", "finetune"):
        raise ConfigError(f"{path} is not a base PINN checkpoint (kind={c.get('kind')!r})")
    return nn.Mlp(_mlp_config(c["mlp"]), params)


def _mlp_config(d: dict) -> nn.MlpConfig:
    return nn.MlpConfig(**{**d, "hidden_widths": tuple(d["hidden_widths"])})


def load_model(path, base_path=None):
    """Evaluable network from any checkpoint written by this tool.

    Hypernetwork checkpoints return ``(HyperNetwork, base)``; others return
    the network itself.
    """
    params, header, _ = _read_checkpoint(path)
    c = header["config"]
    kind = c.get("kind")
    if kind in ("pinn", "finetune"):
        return nn.Mlp(_mlp_config(c["mlp"]), params)
    base = _load_base(base_path or c["base"])
    if kind == "lora":
        return nn.LoraNetwork(base, c["rank"], params)
    if kind == "hyper":
        rank = c["rank"]
        layout = base.params.layout if rank is None else nn.lora_layout(base.config.sizes, rank)
        hnet = nn.Mlp(_mlp_config(c["hyper_mlp"]), params)
        return nn.HyperNetwork(hnet, layout, c["mode"], c["output_scale"]), base
    raise ConfigError(f"{path}: unknown checkpoint kind {kind!r}")


def _save_artifact(art: train.TrainedArtifact, cfg: RunConfig, out: Path, stem: str, extra_config: dict) -> Path:
    ckpt = nn.save_checkpoint(out / f"{stem}.ckpt", art.params, {"kind": art.kind, **extra_config}, cfg.seed,
                              {"run_config": cfg.to_dict(), "train_config": art.config,
                               "epochs_run": art.epochs_run, "best_epoch": art.best_epoch})
    art.write_history(out / f"{stem}_history.csv")
    return ckpt


def _manifest(cfg: RunConfig, out: Path, command: str, **extra) -> Path:
    return bench.write_manifest(out / f"{command}.manifest.json", cfg.to_dict(), {"command": command, **extra})


# --------------------------------------------------------------------------
# commands

def cmd_train_pinn(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    task = cfg.task()
    _manifest(cfg, out, "train-pinn", task=task.params_dict())
    art = train.train_pinn(task, schedule=train.schedule_for("pinn", cfg.scale, cfg.epochs), seed=cfg.seed,
                           budget=_budget(cfg, task), val_every=cfg.val_every)
    ckpt = _save_artifact(art, cfg, out, "pinn", {"mlp": art.config["mlp"], "system": task.system_id})
    mse = bench.mse_vs_reference(art.network(), task)
    _manifest(cfg, out, "train-pinn", task=task.params_dict(), checkpoint=str(ckpt), test_mse=mse)
    return {"checkpoint": str(ckpt), "test_mse": mse}


def cmd_adapt(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    base = _load_base(cfg.base)
    task = cfg.task()
    rank = cfg.rank_value()
    if rank is None:
        raise ConfigError("adapt needs an integer rank")
    _manifest(cfg, out, "adapt", task=task.params_dict())
    art = train.adapt_lora(base, task, rank, train.schedule_for("adapt", cfg.scale, cfg.epochs), cfg.seed,
                           _budget(cfg, task), val_every=cfg.val_every, allow_full_rank=True)
    ckpt = _save_artifact(art, cfg, out, f"lora_r{rank}",
                          {"rank": rank, "mlp": base.config.to_dict(), "base": str(Path(cfg.base).resolve())})
    mse = bench.mse_vs_reference(art.network(), task)
    _manifest(cfg, out, "adapt", task=task.params_dict(), checkpoint=str(ckpt), test_mse=mse)
    return {"checkpoint": str(ckpt), "test_mse": mse}


def cmd_hyper(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    base = _load_base(cfg.base)
    bcfg = cfg.bench_config()
    split = bench.make_split(cfg.system, bcfg.split_sizes, cfg.split_seed)
    _manifest(cfg, out, "hyper", split=split.hashes())
    regime, rank = cfg.regime.lower(), cfg.rank_value()
    labels = None
    if regime in ("b2", "b3"):
        labels = bench.adapter_bank(base, split.train, 4 if regime == "b3" or rank is None else rank, cfg.seed, bcfg)
    art = train.train_hyper(regime, split.train, split.valid, base, rank,
                            train.schedule_for("hyper", cfg.scale, cfg.epochs), cfg.seed,
                            bcfg.budget(split.train[0]), labels, cfg.output_scale, cfg.val_every)
    h = art.extra["hypernetwork"]
    ckpt = _save_artifact(art, cfg, out, f"hyper_{regime}_{bench.rank_label(rank)}",
                          {"rank": rank, "mode": h.mode, "output_scale": h.output_scale,
                           "hyper_mlp": h.net.config.to_dict(), "base": str(Path(cfg.base).resolve())})
    mse = float(np.mean([bench.mse_vs_reference(m, t) for m, t in
                         zip(train.hyper_models(h, base, split.test), split.test)]))
    _manifest(cfg, out, "hyper", split=split.hashes(), checkpoint=str(ckpt), test_mse=mse)
    return {"checkpoint": str(ckpt), "test_mse": mse}


def cmd_sweep(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    bcfg = cfg.bench_config()
    split = bench.make_split(cfg.system, bcfg.split_sizes, cfg.split_seed)
    _manifest(cfg, out, "sweep", split=split.hashes())
    base = _load_base(cfg.base) if cfg.base else bench.train_base(bcfg, cfg.seed).network()
    if cfg.kind == "rank":
        records = bench.run_rank_sweep(bcfg, base, split)
    elif cfg.kind == "hyper":
        ranks = [None if r == "full" else r for r in cfg.ranks]
        records = bench.run_hyper_matrix(bcfg, base, split, [r.lower() for r in cfg.regimes], ranks)
    else:
        hyper = train.train_hyper("b4", split.train, split.valid, base, cfg.rank_value(),
                                  bcfg.schedule("hyper"), cfg.seed, bcfg.budget(split.train[0]),
                                  output_scale=cfg.output_scale, val_every=cfg.val_every).extra["hypernetwork"]
        timings = bench.measure_inference(bcfg, base, split.test[0], hyper, rank=cfg.rank_value() or 4,
                                          reps=cfg.reps)
        path = out / "timing.json"
        path.write_text(json.dumps(timings, indent=2))
        _manifest(cfg, out, "sweep", split=split.hashes(), results=str(path))
        return {"results": str(path)}
    path = bench.write_records(out / f"sweep_{cfg.kind}.csv", records)
    _manifest(cfg, out, "sweep", split=split.hashes(), results=str(path))
    return {"results": str(path)}


def cmd_export(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    task = cfg.task()
    _manifest(cfg, out, "export", task=task.params_dict())
    model = load_model(cfg.checkpoint, cfg.base)
    if isinstance(model, tuple):
        h, base = model
        model = train.hyper_models(h, base, [task])[0]
    path = bench.export_error_map(model, task, path=out / f"error_map_{Path(cfg.checkpoint).stem}.csv")
    return {"error_map": str(path)}


COMMANDS = {"train-pinn": cmd_train_pinn, "adapt": cmd_adapt, "hyper": cmd_hyper,
            "sweep": cmd_sweep, "export": cmd_export}


# --------------------------------------------------------------------------
# argument parsing

def _csv_list(conv):
    def parse(s):
        return [conv(x) for x in s.split(",") if x.strip()]
    return parse


def _rank(s):
    return s if s.lower() in ("full", "*") else int(s)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperlora", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML file with run options")
        s.add_argument("--system", choices=("kovasznay", "burgers2d", "burgers1d"))
        s.add_argument("--re", type=float)
        s.add_argument("--nu", type=float)
        s.add_argument("--grf-seed", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--scale", choices=("desk", "paper"))
        s.add_argument("--epochs", type=int)
        s.add_argument("--out", help="output directory (default: $HYPERLORA_OUT)")
        s.add_argument("--point-fraction", type=float)
        s.add_argument("--val-every", type=int)
        if name in ("adapt", "hyper", "sweep", "export"):
            s.add_argument("--base", help="base PINN checkpoint")
        if name in ("adapt", "hyper", "sweep"):
            s.add_argument("--rank", type=_rank)
        if name in ("hyper", "sweep"):
            s.add_argument("--split-seed", type=int)
            s.add_argument("--n-train", type=int)
            s.add_argument("--n-valid", type=int)
            s.add_argument("--n-test", type=int)
            s.add_argument("--output-scale", type=float)
        if name == "hyper":
            s.add_argument("--regime", choices=train.REGIMES)
        if name == "sweep":
            s.add_argument("--kind", choices=("rank", "hyper", "timing"))
            s.add_argument("--ranks", type=_csv_list(str))
            s.add_argument("--seeds", type=_csv_list(int))
            s.add_argument("--regimes", type=_csv_list(str))
            s.add_argument("--reps", type=int)
            s.add_argument("--jobs", type=int)
        if name == "export":
            s.add_argument("--checkpoint")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        file_values = load_toml(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, flags)
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"hyperlora: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (train.TrainingDiverged, train.NonFiniteLoss, ad.NonFiniteError, ad.DomainError, SolverError,
            FloatingPointError) as exc:
        print(f"hyperlora: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"hyperlora: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
