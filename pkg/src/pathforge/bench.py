"""Monte Carlo cross-validation benchmark for GMA aggregators.

A plan fixes ``n_splits`` random train/validation splits once; every
experiment on the same dataset reuses that plan file. Each split is trained
``replicas`` times with different seeds. Reports give the mean validation-AUC
curve over all runs with a bootstrap band, and the final AUC per split with
replicas averaged.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embed_store import EmbeddingSet
from .errors import InvalidConfigError, InvalidInputError, PathforgeError, ProtocolError, UndefinedAUCError
from .metrics import bootstrap_mean_ci
from .mil import EpochRecord, TrainConfig, records_to_csv, train_gma

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MCCVPlan:
    splits: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]
    n_splits: int = 20
    train_frac: float = 0.8
    replicas: int = 2
    seed: int = 0
    stratified: bool = False

    @property
    def sample_ids(self) -> list[str]:
        train, val = self.splits[0]
        return sorted(train + val)

    def to_tsv(self) -> str:
        lines = [
            f"#n_splits={self.n_splits} train_frac={self.train_frac!r} replicas={self.replicas} "
            f"seed={self.seed} stratified={int(self.stratified)}",
            "split\trole\tsample_id",
        ]
        for k, (train, val) in enumerate(self.splits):
            lines += [f"{k}\ttrain\t{s}" for s in train]
            lines += [f"{k}\tval\t{s}" for s in val]
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_tsv().encode()).hexdigest()


def train_size(n: int, train_frac: float) -> int:
    # tolerance absorbs binary representation error, e.g. 0.8 * 10
    return int(math.floor(train_frac * n + 1e-9))


def make_mccv_plan(sample_ids: Sequence[str], n_splits: int = 20, train_frac: float = 0.8,
                   seed: int = 0, replicas: int = 2,
                   labels: Mapping[str, int] | None = None) -> MCCVPlan:
    """Draw ``n_splits`` independent train/validation splits.

    Each training set is a uniform sample without replacement of
    ``floor(train_frac * n)`` ids. Passing ``labels`` switches to class
    stratified sampling, which keeps class proportions in every split.
    """
    ids = sorted(set(sample_ids))
    if len(ids) != len(sample_ids):
        raise InvalidInputError("sample ids are not unique")
    n = len(ids)
    if n < 5:
        raise InvalidConfigError(f"need at least 5 samples, got {n}")
    if not 0 < train_frac < 1:
        raise InvalidConfigError(f"train_frac must lie in (0, 1), got {train_frac}")
    if n_splits < 1 or replicas < 1:
        raise InvalidConfigError("n_splits and replicas must be positive")
    k = train_size(n, train_frac)
    if k == 0 or k == n:
        raise InvalidConfigError(f"train_frac {train_frac} leaves an empty train or validation set for n={n}")

    splits = []
    for split in range(n_splits):
        rng = np.random.default_rng(np.random.SeedSequence([seed, split]))
        if labels is None:
            chosen = rng.permutation(n)[:k]
        else:
            chosen = _stratified_choice(ids, labels, k, train_frac, rng)
        in_train = np.zeros(n, dtype=bool)
        in_train[chosen] = True
        train = tuple(s for s, t in zip(ids, in_train) if t)
        val = tuple(s for s, t in zip(ids, in_train) if not t)
        splits.append((train, val))
    return MCCVPlan(tuple(splits), n_splits, train_frac, replicas, seed, labels is not None)


def _stratified_choice(ids, labels, k, train_frac, rng) -> np.ndarray:
    y = np.array([labels[s] for s in ids])
    chosen = []
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        chosen.append(rng.permutation(members)[: train_size(len(members), train_frac)])
    chosen = np.concatenate(chosen)
    rest = np.setdiff1d(np.arange(len(ids)), chosen)
    extra = rng.permutation(rest)[: k - len(chosen)]
    return np.concatenate([chosen, extra])


def write_plan(plan: MCCVPlan, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(plan.to_tsv().encode())
    return path


def read_plan(path: str | Path) -> MCCVPlan:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2 or not lines[0].startswith("#") or lines[1] != "split\trole\tsample_id":
        raise InvalidInputError(f"{path}: not a plan file")
    meta = dict(item.split("=", 1) for item in lines[0][1:].split())
    n_splits = int(meta["n_splits"])
    train: list[list[str]] = [[] for _ in range(n_splits)]
    val: list[list[str]] = [[] for _ in range(n_splits)]
    for n, line in enumerate(lines[2:], 3):
        split, role, sid = line.split("\t")
        if role not in ("train", "val"):
            raise InvalidInputError(f"{path}:{n}: unknown role {role!r}")
        (train if role == "train" else val)[int(split)].append(sid)
    splits = tuple((tuple(t), tuple(v)) for t, v in zip(train, val))
    return MCCVPlan(splits, n_splits, float(meta["train_frac"]), int(meta["replicas"]),
                    int(meta["seed"]), bool(int(meta["stratified"])))


# --- running ----------------------------------------------------------------


@dataclass
class RunRecord:
    split_index: int
    replica_index: int
    seed: int
    records: list[EpochRecord]

    @property
    def final_val_auc(self) -> float:
        return self.records[-1].val_auc


@dataclass
class BenchReport:
    runs: list[RunRecord]
    curve_mean: np.ndarray
    curve_lo: np.ndarray
    curve_hi: np.ndarray
    split_finals: np.ndarray
    final_mean: float
    final_lo: float
    final_hi: float
    plan_hash: str
    config: TrainConfig
    checkpoint_tag: str = ""
    level: float = 0.95
    boot_iters: int = 1000
    stratified: bool = False

    @property
    def epochs(self) -> int:
        return len(self.curve_mean)


def replica_seed(base_seed: int, split: int, replica: int) -> int:
    return int(np.random.SeedSequence([base_seed, split, replica]).generate_state(1)[0])


_WORKER_DATASET: EmbeddingSet | None = None


def _init_worker(dataset: EmbeddingSet) -> None:
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_one(task) -> RunRecord:
    split, replica, train_ids, val_ids, config = task
    try:
        result = train_gma(_WORKER_DATASET, train_ids, val_ids, config)
    except UndefinedAUCError as exc:
        raise ProtocolError(
            f"split {split} replica {replica}: validation split lacks a class ({exc})", split, replica
        ) from None
    except PathforgeError as exc:
        raise ProtocolError(f"split {split} replica {replica}: {exc}", split, replica) from None
    return RunRecord(split, replica, config.seed, result.records)


def default_jobs() -> int:
    env = os.environ.get("PATHFORGE_JOBS")
    return int(env) if env else (os.cpu_count() or 1)


def run_benchmark(dataset: EmbeddingSet, plan: MCCVPlan, config: TrainConfig = TrainConfig(),
                  jobs: int = 1, boot_iters: int = 1000, level: float = 0.95) -> BenchReport:
    """Train every (split, replica) of ``plan`` and aggregate the results.

    Runs are independent and may execute on ``jobs`` worker processes; the
    report does not depend on ``jobs``.
    """
    missing = set(plan.sample_ids) - set(dataset.labels)
    if missing:
        raise InvalidInputError(f"plan references {len(missing)} ids without labels, e.g. {sorted(missing)[:3]}")
    if config.epochs < 1:
        raise InvalidConfigError("benchmark needs at least one epoch")
    tasks = [
        (k, r, train, val, config.with_seed(replica_seed(config.seed, k, r)))
        for k, (train, val) in enumerate(plan.splits)
        for r in range(plan.replicas)
    ]
    if jobs <= 1:
        _init_worker(dataset)
        runs = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(dataset,)) as pool:
            runs = list(pool.map(_run_one, tasks))
    return summarize(runs, plan, config, dataset.checkpoint_tag, boot_iters, level)


def summarize(runs: Sequence[RunRecord], plan: MCCVPlan, config: TrainConfig, checkpoint_tag: str = "",
              boot_iters: int = 1000, level: float = 0.95) -> BenchReport:
    lengths = {len(r.records) for r in runs}
    if len(lengths) != 1:
        raise ProtocolError(f"runs have differing epoch counts {sorted(lengths)}")
    curves = np.array([[e.val_auc for e in r.records] for r in runs])
    boot_seed = replica_seed(config.seed, 0xB0, 0x07)
    mean, lo, hi = bootstrap_mean_ci(curves, boot_iters, level, boot_seed)

    finals = np.zeros(plan.n_splits)
    counts = np.zeros(plan.n_splits)
    for r in runs:
        finals[r.split_index] += r.final_val_auc
        counts[r.split_index] += 1
    split_finals = finals / counts
    if plan.n_splits >= 2:
        f_mean, f_lo, f_hi = (float(v[0]) for v in bootstrap_mean_ci(split_finals[:, None], boot_iters, level, boot_seed))
    else:
        f_mean = f_lo = f_hi = float(split_finals[0])
    return BenchReport(list(runs), mean, lo, hi, split_finals, f_mean, f_lo, f_hi, plan.hash, config,
                       checkpoint_tag, level, boot_iters, plan.stratified)


# --- sweeps -----------------------------------------------------------------


@dataclass
class SweepResult:
    reports: dict[str, BenchReport] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, int, float]]:
        return [
            (tag, k, float(auc))
            for tag, rep in self.reports.items()
            for k, auc in enumerate(rep.split_finals)
        ]

    def mean_finals(self) -> dict[str, float]:
        return {tag: rep.final_mean for tag, rep in self.reports.items()}


def checkpoint_sweep(sets: Sequence[EmbeddingSet], plan: MCCVPlan, config: TrainConfig = TrainConfig(),
                     jobs: int = 1, boot_iters: int = 1000, level: float = 0.95) -> SweepResult:
    """Benchmark several embedding sets (encoder checkpoints) under one shared plan."""
    if not sets:
        raise InvalidInputError("no embedding sets given")
    tags = [s.checkpoint_tag for s in sets]
    if len(set(tags)) != len(tags):
        raise InvalidInputError(f"checkpoint tags must be distinct, got {tags}")
    ref = sets[0].labels
    for s in sets[1:]:
        if s.labels != ref:
            raise InvalidInputError(
                f"checkpoint {s.checkpoint_tag!r} does not share sample ids and labels with {tags[0]!r}"
            )
    result = SweepResult()
    for s in sets:
        log.info("sweep: benchmarking checkpoint %s", s.checkpoint_tag)
        result.reports[s.checkpoint_tag] = run_benchmark(s, plan, config, jobs, boot_iters, level)
    return result


# --- report files -------------------------------------------------------------


def _config_lines(config: TrainConfig) -> list[str]:
    return [f"config.{k}={v!r}" for k, v in asdict(config).items()]


def write_report(report: BenchReport, plan: MCCVPlan, out_dir: str | Path,
                 extra: Mapping[str, str] | None = None) -> Path:
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    write_plan(plan, out / "plan.tsv")
    for run in report.runs:
        (out / "runs" / f"{run.split_index}_{run.replica_index}.csv").write_text(records_to_csv(run.records))
    rows = ["epoch,mean,lo,hi"] + [
        f"{e + 1},{m!r},{l!r},{h!r}"
        for e, (m, l, h) in enumerate(zip(report.curve_mean.tolist(), report.curve_lo.tolist(), report.curve_hi.tolist()))
    ]
    (out / "curve.csv").write_text("\n".join(rows) + "\n")
    rows = ["split,auc"] + [f"{k},{a!r}" for k, a in enumerate(report.split_finals.tolist())]
    (out / "finals.csv").write_text("\n".join(rows) + "\n")
    summary = [
        f"final_auc={report.final_mean:.4f} [{report.final_lo:.4f}, {report.final_hi:.4f}]",
        f"final_auc_mean={report.final_mean!r}",
        f"final_auc_ci_lo={report.final_lo!r}",
        f"final_auc_ci_hi={report.final_hi!r}",
        f"ci_level={report.level!r}",
        f"bootstrap_iters={report.boot_iters}",
        f"n_splits={plan.n_splits}",
        f"replicas={plan.replicas}",
        f"n_runs={len(report.runs)}",
        f"epochs={report.epochs}",
        f"checkpoint_tag={report.checkpoint_tag}",
        f"plan_hash={report.plan_hash}",
        "final_auc_definition=last-epoch",
        f"split_stratification={'class' if report.stratified else 'none'}",
        *_config_lines(report.config),
        *(f"{k}={v}" for k, v in (extra or {}).items()),
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    return out


def write_sweep(result: SweepResult, plan: MCCVPlan, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tag, rep in result.reports.items():
        write_report(rep, plan, out / tag)
    rows = ["checkpoint_tag,split,final_auc"] + [f"{t},{k},{a!r}" for t, k, a in result.rows()]
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    return out
