"""Desk-scale experiment harness: rank sweeps, hypernetwork regimes, timing, error maps."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn, train
from .pde import PdeSystem, PointBudget, base_task, coord_names, sample_tasks, subsample_budget
from .train import TrainedArtifact, derive_seed

log = logging.getLogger(__name__)

METHODS = ("pinn", "finetune_pinn", "lora_pinn", "hyper_b1", "hyper_b2", "hyper_b3", "hyper_b4")
DEFAULT_RANKS = (1, 2, 4, 8, 16, 32, 64)


@dataclass
class RunRecord:
    system: str
    method: str
    rank: str                      # "1", "4", ... or "full"
    n_params_trained: int
    train_mse: float = float("nan")
    valid_mse: float = float("nan")
    test_mse: float = float("nan")
    epochs_run: int = 0
    time_per_epoch: float = float("nan")
    inference_time: float = float("nan")
    seed: int = 0
    task: str = ""                 # task hash for per-task rows; "" for aggregates
    row: str = "task"              # task | aggregate
    train_hash: str = ""
    test_hash: str = ""

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TaskSplit:
    train: list
    valid: list
    test: list

    def hashes(self) -> dict:
        return {k: [task_hash(t) for t in getattr(self, k)] for k in ("train", "valid", "test")}

    def check_disjoint(self):
        h = self.hashes()
        for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
            common = set(h[a]) & set(h[b])
            if common:
                raise ValueError(f"{a}/{b} task lists overlap: {sorted(common)[:3]}")

    def list_hash(self, name: str) -> str:
        return hashlib.sha256("".join(sorted(self.hashes()[name])).encode()).hexdigest()[:16]


def task_hash(system: PdeSystem) -> str:
    blob = json.dumps({"system": system.system_id, "params": system.params_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_split_sizes(system_id: str) -> tuple[int, int, int]:
    return (100, 20, 20) if system_id == "burgers1d" else (20, 20, 20)


def make_split(system_id: str, sizes: tuple | None = None, seed: int = 0) -> TaskSplit:
    """Disjoint train/valid/test task lists from independent seed streams."""
    sizes = sizes or default_split_sizes(system_id)
    parts = [sample_tasks(system_id, n, derive_seed(seed, "split", name))
             for n, name in zip(sizes, ("train", "valid", "test"))]
    split = TaskSplit(*parts)
    split.check_disjoint()
    return split


# --------------------------------------------------------------------------
# metrics

def mse_vs_reference(net, system: PdeSystem, grid=None) -> float:
    """Mean over grid points and output components of the squared error."""
    grid = system.eval_grid() if grid is None else np.asarray(grid)
    pred = np.asarray(net.forward(grid) if hasattr(net, "forward") else net(grid))
    return float(np.mean((pred - system.reference(grid)) ** 2))


def coarse_grid(system: PdeSystem, n: int = 441) -> np.ndarray:
    g = system.eval_grid()
    return g[np.linspace(0, len(g) - 1, min(n, len(g))).astype(int)]


# --------------------------------------------------------------------------
# configuration

@dataclass
class BenchConfig:
    """Budgets for one desk- or paper-scale experiment."""
    system: str = "kovasznay"
    scale: str = "desk"
    pinn_epochs: int | None = None
    adapt_epochs: int | None = None
    hyper_epochs: int | None = None
    point_fraction: float = 1.0        # of the paper point budget, for per-task work
    seeds: tuple = (0, 1, 2)
    ranks: tuple = DEFAULT_RANKS
    split_sizes: tuple | None = None
    split_seed: int = 0
    n_test_tasks: int | None = None    # evaluate only the first n test tasks
    output_scale: float = 1.0
    val_every: int = 10
    jobs: int = 1

    def budget(self, system: PdeSystem) -> PointBudget | None:
        return None if self.point_fraction >= 1.0 else subsample_budget(system, self.point_fraction)

    def schedule(self, kind: str) -> train.Schedule:
        n = {"pinn": self.pinn_epochs, "adapt": self.adapt_epochs, "hyper": self.hyper_epochs}[kind]
        return train.schedule_for(kind, self.scale, n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"], d["ranks"] = list(self.seeds), list(self.ranks)
        return d


def rank_label(rank) -> str:
    return "full" if rank is None else str(rank)


def _test_tasks(split: TaskSplit, cfg: BenchConfig):
    return split.test if cfg.n_test_tasks is None else split.test[:cfg.n_test_tasks]


def train_base(cfg: BenchConfig, seed: int = 0) -> TrainedArtifact:
    """Base PINN on the family's reference task T0 (full paper point budget)."""
    return train.train_pinn(base_task(cfg.system), schedule=cfg.schedule("pinn"), seed=seed,
                            val_every=cfg.val_every)


# --------------------------------------------------------------------------
# rank sweep

def _map(fn: Callable, jobs: Sequence, n_workers: int):
    if n_workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as ex:
        return list(ex.map(fn, jobs))   # map preserves submission order


@dataclass
class _AdaptJob:
    base: nn.Mlp
    task: PdeSystem
    rank: int | None          # None: full finetuning
    seed: int
    cfg: BenchConfig


def _run_adapt(job: _AdaptJob) -> TrainedArtifact:
    budget = job.cfg.budget(job.task)
    if job.rank is None:
        return train.train_pinn(job.task, schedule=job.cfg.schedule("adapt"), seed=job.seed, budget=budget,
                                init=job.base, val_every=job.cfg.val_every)
    return train.adapt_lora(job.base, job.task, job.rank, job.cfg.schedule("adapt"), job.seed, budget,
                            val_every=job.cfg.val_every, allow_full_rank=True)


def _run_scratch(job: _AdaptJob) -> TrainedArtifact:
    return train.train_pinn(job.task, job.base.config, job.cfg.schedule("adapt"), seed=job.seed,
                            budget=job.cfg.budget(job.task), val_every=job.cfg.val_every)


def adapter_bank(base: nn.Mlp, tasks: Sequence[PdeSystem], rank: int | None, seed: int,
                 cfg: BenchConfig) -> list[TrainedArtifact]:
    """Per-task adapted networks (LoRA at ``rank`` or full finetune if None)."""
    jobs = [_AdaptJob(base, t, rank, derive_seed(seed, "task", task_hash(t)), cfg) for t in tasks]
    return _map(_run_adapt, jobs, cfg.jobs)


def aggregate(records: Sequence[RunRecord]) -> list[RunRecord]:
    """One row per (system, method, rank, seed): exact means of the task rows."""
    groups: dict = {}
    for r in records:
        if r.row == "task":
            groups.setdefault((r.system, r.method, r.rank, r.seed), []).append(r)
    out = []
    for (system, method, rank, seed), rows in groups.items():
        mean = lambda k: float(np.mean([getattr(x, k) for x in rows]))
        out.append(RunRecord(system, method, rank, rows[0].n_params_trained,
                             mean("train_mse"), mean("valid_mse"), mean("test_mse"),
                             int(round(mean("epochs_run"))), mean("time_per_epoch"), mean("inference_time"),
                             seed, "", "aggregate", rows[0].train_hash, rows[0].test_hash))
    return out


def summarize(records: Sequence[RunRecord], key: str = "test_mse") -> dict:
    """(method, rank) -> mean of ``key`` over aggregate rows (i.e. over seeds)."""
    groups: dict = {}
    for r in records:
        if r.row == "aggregate":
            groups.setdefault((r.method, r.rank), []).append(getattr(r, key))
    return {k: float(np.mean(v)) for k, v in groups.items()}


def run_rank_sweep(cfg: BenchConfig, base: nn.Mlp, split: TaskSplit,
                   ranks: Sequence[int] | None = None, seeds: Sequence[int] | None = None,
                   baselines: bool = True, keep: dict | None = None) -> list[RunRecord]:
    """Per-task LoRA adaptation across ranks, plus scratch and finetune baselines.

    ``keep``, if given, receives the trained artifacts keyed by
    (method, rank, seed) -> list over test tasks.
    """
    ranks = list(ranks or cfg.ranks)
    seeds = list(seeds or cfg.seeds)
    tests = _test_tasks(split, cfg)
    th, trh = split.list_hash("test"), split.list_hash("train")
    full_n = base.n_params
    records = []
    plans = [("lora_pinn", r) for r in ranks]
    if baselines:
        plans = [("pinn", None), ("finetune_pinn", None)] + plans
    for seed in seeds:
        for method, rank in plans:
            jobs = [_AdaptJob(base, t, rank, derive_seed(seed, "task", task_hash(t)), cfg) for t in tests]
            arts = _map(_run_scratch if method == "pinn" else _run_adapt, jobs, cfg.jobs)
            if keep is not None:
                keep[(method, rank_label(rank), seed)] = arts
            n_tr = nn.lora_param_count(base.config.sizes, rank) if method == "lora_pinn" else full_n
            for t, art in zip(tests, arts):
                net = art.network()
                records.append(RunRecord(
                    t.system_id, method, rank_label(rank), n_tr,
                    train_mse=float(art.history[min(art.best_epoch, len(art.history) - 1)].total),
                    valid_mse=float(min((v for _, v in art.val_history), default=np.nan)),
                    test_mse=mse_vs_reference(net, t), epochs_run=art.epochs_run,
                    time_per_epoch=art.time_per_epoch, inference_time=art.wall_time,
                    seed=seed, task=task_hash(t), train_hash=trh, test_hash=th))
    return records + aggregate(records)


# --------------------------------------------------------------------------
# hypernetwork matrix

def run_hyper_matrix(cfg: BenchConfig, base: nn.Mlp, split: TaskSplit,
                     regimes: Sequence[str] = train.REGIMES, ranks: Sequence | None = None,
                     seeds: Sequence[int] | None = None, bank: dict | None = None,
                     keep: dict | None = None) -> list[RunRecord]:
    """Train every (regime, rank-or-full, seed) cell and score it on all splits.

    ``bank`` maps ``seed`` -> per-training-task LoRA artifacts (rank 4 by
    default) used as labels by b2/b3; missing entries are trained here.
    Full-regime b2 targets are the merged weights of the same artifacts.
    """
    ranks = list(ranks) if ranks is not None else [1, 2, 4, 8, None]
    seeds = list(seeds or cfg.seeds)
    bank = {} if bank is None else bank
    th, trh = split.list_hash("test"), split.list_hash("train")
    records = []
    tests = _test_tasks(split, cfg)
    train_grid = coarse_grid(split.train[0])
    for seed in seeds:
        for regime in regimes:
            labels = None
            if regime in ("b2", "b3"):
                if seed not in bank:
                    bank[seed] = adapter_bank(base, split.train, 4, seed, cfg)
                labels = bank[seed]
            for rank in ranks:
                lab = labels
                if regime == "b2" and rank is not None and rank != labels[0].config["rank"]:
                    key = (seed, rank)
                    if key not in bank:
                        bank[key] = adapter_bank(base, split.train, rank, seed, cfg)
                    lab = bank[key]
                art = train.train_hyper(regime, split.train, split.valid, base, rank, cfg.schedule("hyper"),
                                        derive_seed(seed, "hyper", regime), cfg.budget(split.train[0]), lab,
                                        cfg.output_scale, cfg.val_every)
                if keep is not None:
                    keep[(regime, rank_label(rank), seed)] = art
                h = art.extra["hypernetwork"]
                t_inf = time_hyper_inference(h, base, tests[0], tests[0].eval_grid())[0]
                records.append(RunRecord(
                    split.train[0].system_id, f"hyper_{regime}", rank_label(rank), h.n_outputs,
                    train_mse=train.hyper_mse(h, base, split.train, train_grid),
                    valid_mse=train.hyper_mse(h, base, split.valid, coarse_grid(split.valid[0])),
                    test_mse=float(np.mean([mse_vs_reference(m, t) for m, t in
                                            zip(train.hyper_models(h, base, tests), tests)])),
                    epochs_run=art.epochs_run, time_per_epoch=art.time_per_epoch, inference_time=t_inf,
                    seed=seed, task="", row="aggregate", train_hash=trh, test_hash=th))
    return records


# --------------------------------------------------------------------------
# timing

def time_hyper_inference(h: nn.HyperNetwork, base: nn.Mlp, task: PdeSystem, grid, reps: int = 5):
    """Median and MAD wall time of predict + assemble + one grid evaluation."""
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        theta = nn.hypernet_forward(h, task.embedding())
        net = nn.apply_predicted(base, theta, h.mode)
        net.forward(grid)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    med = float(np.median(times))
    return med, float(np.median(np.abs(times - med)))


def time_adaptation(base: nn.Mlp, task: PdeSystem, rank: int | None, cfg: BenchConfig, reps: int = 5,
                    seed: int = 0):
    """Median and MAD wall time to adapt (LoRA) or train from scratch (rank=None)."""
    times = []
    for i in range(reps):
        job = _AdaptJob(base, task, rank, derive_seed(seed, "timing", i), cfg)
        t0 = time.perf_counter()
        (_run_adapt if rank is not None else _run_scratch)(job)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    med = float(np.median(times))
    return med, float(np.median(np.abs(times - med)))


def measure_inference(cfg: BenchConfig, base: nn.Mlp, task: PdeSystem, hyper: nn.HyperNetwork | None = None,
                      methods: Sequence[str] = ("pinn", "lora_pinn", "hyper_b4"), rank: int = 4,
                      reps: int = 5) -> list[dict]:
    """Timing records ``{method, median_s, mad_s, reps}``."""
    out = []
    for m in methods:
        if m == "pinn":
            med, mad = time_adaptation(base, task, None, cfg, reps)
        elif m == "lora_pinn":
            med, mad = time_adaptation(base, task, rank, cfg, reps)
        elif m.startswith("hyper"):
            if hyper is None:
                raise ValueError("hypernetwork timing needs a trained hypernetwork")
            med, mad = time_hyper_inference(hyper, base, task, task.eval_grid(), reps)
        else:
            raise ValueError(f"unknown method {m!r}")
        out.append({"method": m, "median_s": med, "mad_s": mad, "reps": reps})
    return out


# --------------------------------------------------------------------------
# files

def export_error_map(net, system: PdeSystem, grid=None, path="error_map.csv") -> Path:
    """CSV rows ``coords..., component, predicted, reference, abs_error``."""
    grid = system.eval_grid() if grid is None else np.asarray(grid)
    pred = np.asarray(net.forward(grid) if hasattr(net, "forward") else net(grid))
    ref = system.reference(grid)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*coord_names(system), "component", "predicted", "reference", "abs_error"])
            for ci, name in enumerate(system.components):
                for p, a, b in zip(grid, pred[:, ci], ref[:, ci]):
                    w.writerow([*(repr(float(c)) for c in p), name, repr(float(a)), repr(float(b)),
                                repr(float(abs(a - b)))])
    except OSError as exc:
        raise OSError(f"cannot write error map to {path}: {exc}") from exc
    return path


def write_records(path, records: Sequence[RunRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RunRecord.columns())
        for r in records:
            w.writerow([getattr(r, c) for c in RunRecord.columns()])
    return path


def read_records(path) -> list[RunRecord]:
    out = []
    types = {f.name: f.type for f in fields(RunRecord)}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                kw[k] = int(v) if t == "int" else float(v) if t == "float" else v
            out.append(RunRecord(**kw))
    return out


def code_hash() -> str:
    """Git-style (blob sha1) digest over the package sources."""
    h = hashlib.sha1()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        data = f.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        h.update(f"{blob} {f.name}\n".encode())
    return h.hexdigest()


def write_manifest(path, config: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config": config, "code_hash": code_hash(), **(extra or {})}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=nn._json_default))
    return path
