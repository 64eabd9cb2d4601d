"""Benchmark layer: sweeps over held-out modalities, model selection, aggregation and the ablation.

Selection protocols
-------------------
``tm``      best (config, checkpoint) by mean validation AUC of the training modalities.
``loo``     config scored by leave-one-training-modality-out fold validation; the
            selected config's run on all training modalities supplies the test AUC.
``oracle``  config with the best held-out validation AUC at the final checkpoint.
"""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .algorithms import hparams as hp
from .algorithms.training import (
    DEFAULT_STEPS, SETTINGS, AlgorithmSpec, RunRecord, algorithm_id, train_protocols, train_run,
)
from .audit import AccessAudit, AuditViolation, check_read
from .metrics import UndefinedMetricError, auc
from .synthworld import SyntheticWorld, world_from_json, world_to_json

__all__ = [
    "auc", "UndefinedMetricError", "AccessAudit", "AuditViolation", "PROTOCOLS", "SweepConfig",
    "Job", "plan_jobs", "run_benchmark", "select_model", "Selection", "aggregate_report", "BenchmarkReport",
    "ReportRow", "run_ablation", "AblationResult", "audit_summary", "REPORT_HEADER",
]

log = logging.getLogger(__name__)

PROTOCOLS = ("tm", "loo", "oracle")
PERCEPTOR_FOR_SETTING = {v: k for k, v in SETTINGS.items()}
REPORT_HEADER = "setting,algorithm,protocol,test_modality,mean_auc,std_auc,n_runs"
ABLATION_MODES = ("full", "random_init", "single_modality")


@dataclass(frozen=True)
class SweepConfig:
    algorithms: tuple[str, ...]
    trials: int = 9
    seeds: int = 3
    protocols: tuple[str, ...] = ("oracle",)
    perceptor_mode: str = "semantic"
    steps: int = DEFAULT_STEPS
    global_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "protocols", tuple(self.protocols))
        if self.trials < 1 or self.seeds < 1:
            raise hp.ConfigError("trials and seeds must both be >= 1")
        if self.steps < 1:
            raise hp.ConfigError("steps must be >= 1")
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise hp.ConfigError(f"unknown protocol {p!r}; valid protocols: {', '.join(PROTOCOLS)}")
        for a in self.algorithms:
            if a not in hp.IMPLEMENTED:
                raise hp.ConfigError(f"unknown algorithm {a!r}; implemented: {', '.join(hp.IMPLEMENTED)}")
        if self.perceptor_mode not in SETTINGS:
            raise hp.ConfigError(f"unknown perceptor mode {self.perceptor_mode!r}")

    @property
    def setting(self) -> str:
        return SETTINGS[self.perceptor_mode]


@dataclass(frozen=True)
class Job:
    algorithm: str
    trial: int
    seed: int
    test_modality: int
    train_modalities: tuple[int, ...]
    protocols: tuple[str, ...]
    fold: int | None = None

    def seed_key(self, global_seed: int) -> list[int]:
        """Run stream derived from (global seed, algorithm, trial, seed index, test modality, fold + 1).

        The last entry is 0 for main runs; seed sequences only take non-negative words.
        """
        return [int(global_seed), algorithm_id(self.algorithm), self.trial, self.seed, self.test_modality,
                0 if self.fold is None else self.fold + 1]


def plan_jobs(num_modalities: int, sweep: SweepConfig) -> list[Job]:
    """Every fit the sweep needs: one main fit per cell, plus LOO folds when LOO is requested."""
    if num_modalities < 2:
        raise hp.ConfigError("a benchmark needs at least two modalities")
    jobs = []
    for m, algo, trial, seed in itertools.product(range(num_modalities), sweep.algorithms, range(sweep.trials),
                                                  range(sweep.seeds)):
        train = tuple(k for k in range(num_modalities) if k != m)
        jobs.append(Job(algo, trial, seed, m, train, sweep.protocols))
        if "loo" in sweep.protocols and len(train) >= 2:
            for j in train:
                jobs.append(Job(algo, trial, seed, m, tuple(k for k in train if k != j), ("loo",), fold=j))
    return jobs


_WORKER_WORLD: dict[str, SyntheticWorld] = {}


def _world_for(world_json: str) -> SyntheticWorld:
    if world_json not in _WORKER_WORLD:
        _WORKER_WORLD.clear()
        _WORKER_WORLD[world_json] = world_from_json(world_json)
    return _WORKER_WORLD[world_json]


def _execute(job: Job, world: SyntheticWorld, sweep: SweepConfig) -> list[RunRecord]:
    spec = AlgorithmSpec.create(job.algorithm, hp.trial_hparams(job.algorithm, job.trial, sweep.global_seed))
    recs = train_protocols(world, job.train_modalities, job.test_modality, spec, sweep.perceptor_mode, job.seed,
                           sweep.steps, job.protocols, trial=job.trial, seed_key=job.seed_key(sweep.global_seed),
                           pseudo_held_out=job.fold)
    return [recs[p] for p in job.protocols]


def _execute_remote(args) -> list[RunRecord]:
    job, world_json, sweep = args
    return _execute(job, _world_for(world_json), sweep)


def run_benchmark(world: SyntheticWorld, sweep: SweepConfig) -> list[RunRecord]:
    """All runs of a sweep, sorted by run id.  Results do not depend on ``sweep.threads``."""
    jobs = plan_jobs(world.config.num_modalities, sweep)
    records: list[RunRecord] = []
    if sweep.threads > 1 and len(jobs) > 1:
        payload = world_to_json(world)
        with ProcessPoolExecutor(max_workers=sweep.threads) as pool:
            for recs in pool.map(_execute_remote, [(j, payload, sweep) for j in jobs], chunksize=4):
                records.extend(recs)
    else:
        for job in jobs:
            records.extend(_execute(job, world, sweep))
    for rec in records:
        if rec.audit is not None and rec.audit.violations():
            raise AuditViolation(f"{rec.run_id}: {rec.audit.violations()}")
    return sorted(records, key=lambda r: r.run_id)


def audit_summary(records: Iterable[RunRecord]) -> dict:
    """Counts of audited reads and of rule violations across a set of runs."""
    reads = 0
    violations: list[str] = []
    heldout_test_before_final = 0
    heldout_reads_tm_loo = 0
    for rec in records:
        if rec.audit is None:
            continue
        for r in rec.audit.reads:
            reads += 1
            msg = check_read(r, rec.audit.held_out)
            if msg:
                violations.append(f"{rec.run_id}: {msg}")
            if r.modality == rec.audit.held_out and r.split == "test" and r.phase != "final":
                heldout_test_before_final += 1
            if (r.modality == rec.audit.held_out and rec.protocol in ("tm", "loo")
                    and r.purpose not in ("final_test", "perceptor_fit")):
                heldout_reads_tm_loo += 1
    return {"reads": reads, "violations": violations, "heldout_test_reads_before_final": heldout_test_before_final,
            "heldout_reads_during_tm_loo_selection": heldout_reads_tm_loo}


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class Selection:
    algorithm: str
    protocol: str
    test_modality: int
    seed: int
    trial: int
    step: int
    score: float
    test_auc: float
    run_id: str
    setting: str
    hparams: dict = field(default_factory=dict, compare=False)


def _check_group(runs: Sequence[RunRecord]) -> None:
    if not runs:
        raise ValueError("select_model needs at least one run")
    if len({(r.algorithm, r.test_modality, r.setting) for r in runs}) != 1:
        raise ValueError("runs must share algorithm, setting and test modality")


def select_model(runs: Sequence[RunRecord], protocol: str) -> list[Selection]:
    """Per seed, the selected (config, checkpoint) under ``protocol``; marks chosen records ``selected``.

    Ties go to the lowest trial index.  Failed runs are never selected.
    """
    if protocol not in PROTOCOLS:
        raise hp.ConfigError(f"unknown protocol {protocol!r}; valid protocols: {', '.join(PROTOCOLS)}")
    runs = [r for r in runs if r.protocol == protocol]
    _check_group(runs)
    main = [r for r in runs if r.fold is None and r.status == "ok"]
    for r in runs:
        r.selected = False
    out = []
    for seed in sorted({r.seed for r in main}):
        cands = sorted((r for r in main if r.seed == seed), key=lambda r: r.trial)
        scored = []
        for r in cands:
            if protocol == "tm":
                score = r.checkpoint_at(r.eval_step).tm_val_auc
            elif protocol == "oracle":
                score = r.final_checkpoint.oracle_val_auc
            else:
                folds = [f for f in runs if f.fold is not None and f.seed == seed and f.trial == r.trial
                         and f.status == "ok"]
                # with a single training modality there are no folds; fall back to its TM score
                score = (float(np.mean([f.final_checkpoint.loo_val_auc for f in folds])) if folds
                         else r.final_checkpoint.tm_val_auc)
            scored.append((score, r))
        best_score = max(s for s, _ in scored)
        score, chosen = next((s, r) for s, r in scored if s == best_score)
        chosen.selected = True
        out.append(Selection(chosen.algorithm, protocol, chosen.test_modality, seed, chosen.trial,
                             chosen.eval_step, float(score), float(chosen.final_test_auc), chosen.run_id,
                             chosen.setting, dict(chosen.hparams)))
    return out


def select_all(records: Sequence[RunRecord]) -> list[Selection]:
    """Selections for every (setting, algorithm, protocol, test modality) group present."""
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.setting, r.algorithm, r.protocol, r.test_modality), []).append(r)
    out = []
    for key in sorted(groups):
        if any(r.fold is None and r.status == "ok" for r in groups[key]):
            out.extend(select_model(groups[key], key[2]))
    return out


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class ReportRow:
    setting: str
    algorithm: str
    protocol: str
    test_modality: str
    mean_auc: float
    std_auc: float
    n_runs: int

    def csv(self) -> str:
        return (f"{self.setting},{self.algorithm},{self.protocol},{self.test_modality},"
                f"{self.mean_auc:.6f},{self.std_auc:.6f},{self.n_runs}")


@dataclass
class BenchmarkReport:
    rows: list[ReportRow]
    family_means: dict[tuple[str, str, str], dict[str, float]]
    std_convention: str = "population"

    def to_csv(self) -> str:
        return "\n".join([REPORT_HEADER, *(r.csv() for r in self.rows)]) + "\n"

    def cell(self, algorithm: str, protocol: str | None = None, test_modality: str = "mean") -> ReportRow:
        for r in self.rows:
            if r.algorithm == algorithm and r.test_modality == test_modality and protocol in (None, r.protocol):
                return r
        raise KeyError((algorithm, protocol, test_modality))


def _stats(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def aggregate_report(selected: Sequence[Selection]) -> BenchmarkReport:
    """Mean and population std over seeds per cell, plus a ``mean`` cell over held-out modalities.

    The ``mean`` cell averages each seed's AUC across held-out modalities first,
    then takes mean and std over seeds.  Family rows (``MML_mean``, ``DG_mean``)
    are the unweighted mean of the member algorithms' means; their std column is
    the population std of those algorithm means.
    """
    cells: dict[tuple, list[Selection]] = {}
    for s in selected:
        cells.setdefault((s.setting, s.algorithm, s.protocol), []).append(s)
    rows: list[ReportRow] = []
    alg_means: dict[tuple, dict[str, float]] = {}
    for (setting, algo, proto), sels in cells.items():
        by_mod: dict[int, list[float]] = {}
        by_seed: dict[int, list[float]] = {}
        for s in sels:
            by_mod.setdefault(s.test_modality, []).append(s.test_auc)
            by_seed.setdefault(s.seed, []).append(s.test_auc)
        for m in sorted(by_mod):
            mean, std = _stats(by_mod[m])
            rows.append(ReportRow(setting, algo, proto, str(m), mean, std, len(by_mod[m])))
        mean, std = _stats([float(np.mean(v)) for _, v in sorted(by_seed.items())])
        rows.append(ReportRow(setting, algo, proto, "mean", mean, std, len(sels)))
        alg_means.setdefault((setting, proto, "mean"), {})[algo] = mean
        for m in by_mod:
            alg_means.setdefault((setting, proto, str(m)), {})[algo] = float(np.mean(by_mod[m]))
    family_means: dict[tuple[str, str, str], dict[str, float]] = {}
    for (setting, proto, mod), per_algo in alg_means.items():
        fam: dict[str, list[float]] = {}
        for algo, v in per_algo.items():
            fam.setdefault(hp.family(algo), []).append(v)
        family_means[(setting, proto, mod)] = {}
        for name, vals in fam.items():
            mean, std = _stats(vals)
            family_means[(setting, proto, mod)][name] = mean
            rows.append(ReportRow(setting, f"{name}_mean", proto, mod, mean, std, len(vals)))
    rows.sort(key=lambda r: (r.setting, r.algorithm, r.protocol, r.test_modality))
    return BenchmarkReport(rows, family_means)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationResult:
    mode: str
    aucs: list[float]
    per_run: list[tuple[int, int, float]]

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def std(self) -> float:
        return float(np.std(self.aucs))

    def row(self) -> dict:
        return {"mode": self.mode, "mean_auc": self.mean, "std_auc": self.std, "n_runs": len(self.per_run)}


def run_ablation(world: SyntheticWorld, mode: str, seeds: int = 5, algorithm: str = "erm",
                 steps: int = DEFAULT_STEPS, global_seed: int = 0) -> AblationResult:
    """Where cross-modal forensic knowledge comes from.

    ``full``             isolated perceptors, full detector, all training modalities
    ``random_init``      random-projection perceptors, full detector, all training modalities
    ``single_modality``  isolated perceptors, linear head only, one training modality

    Each held-out modality is evaluated at the final checkpoint; the AUC
    per seed averages over held-out modalities.
    """
    if mode not in ABLATION_MODES:
        raise hp.ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    k_total = world.config.num_modalities
    perceptor = "random_init" if mode == "random_init" else "isolated"
    architecture = "linear" if mode == "single_modality" else "mlp"
    spec = AlgorithmSpec.create(algorithm)
    per_run = []
    for seed in range(seeds):
        for m in range(k_total):
            others = [k for k in range(k_total) if k != m]
            train = others[:1] if mode == "single_modality" else others
            key = [int(global_seed), algorithm_id(f"ablation-{mode}"), seed, m]
            rec = train_run(world, train, m, spec, perceptor, seed, steps, "oracle", seed_key=key,
                            architecture=architecture)
            if rec.status != "ok":
                raise RuntimeError(f"ablation run failed: {rec.notes}")
            per_run.append((seed, m, float(rec.final_test_auc)))
    aucs = [float(np.mean([a for s, _, a in per_run if s == seed])) for seed in range(seeds)]
    return AblationResult(mode, aucs, per_run)


def default_threads() -> int:
    return max(1, min(os.cpu_count() or 1, 8))
