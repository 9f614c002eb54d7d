#!/usr/bin/env python3
"""
Experiment machinery: step-size tuning, absolute-error evaluation and
multi-replication simulation studies with MAE trajectory tables.
"""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from somala_models import (
    DataValidationError,
    Dataset,
    EstimationError,
    LatentVariableModel,
    ParamVector,
    SimSetting,
    SomalaError,
    build_model,
    initial_values,
    simulate_dataset,
)
from somala_optimizer import FitResult, OptimizerConfig, StopRule, run

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATES = {
    "mala": (0.01, 0.05, 0.1, 0.2),
    "rwmh": (0.1, 0.2, 0.3, 0.4),
}
AE_BLOCKS = {
    "multilevel": ("mu", "sigma"),
    "m2pl": ("d", "a", "sigma"),
}
AVERAGE_BLOCK = "average"


# ---------------------------------------------------------------------------
# Tuning
# ---------------------------------------------------------------------------

class TuneSpec(BaseModel):
    candidates: Optional[List[float]] = None
    tune_epochs: int = Field(200, ge=1)
    tail_epochs: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.candidates is not None:
            if not self.candidates:
                raise ValueError("Need at least one candidate step value")
            if min(self.candidates) <= 0:
                raise ValueError("Candidate step values must be positive")
        if self.tail_epochs > self.tune_epochs:
            raise ValueError("tail_epochs cannot exceed tune_epochs")
        return self

    def resolved_candidates(self, sampler_kind: str) -> List[float]:
        values = self.candidates if self.candidates is not None else DEFAULT_CANDIDATES[sampler_kind]
        return sorted(set(float(v) for v in values))


@dataclass
class CandidateRun:
    value: float
    score: Optional[float]
    error: Optional[str] = None
    beta: Optional[ParamVector] = None
    xi: Optional[np.ndarray] = None

    @property
    def diverged(self) -> bool:
        return self.score is None


@dataclass
class TuneResult:
    chosen: float
    runs: List[CandidateRun]

    @property
    def best(self) -> CandidateRun:
        return next(r for r in self.runs if r.value == self.chosen)

    @property
    def scores(self) -> Dict[float, Optional[float]]:
        return {r.value: r.score for r in self.runs}

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({
            "candidate": [r.value for r in self.runs],
            "mean_neg_complete_loglik": [np.nan if r.score is None else r.score for r in self.runs],
            "status": ["diverged" if r.diverged else "ok" for r in self.runs],
            "chosen": [r.value == self.chosen for r in self.runs],
        })


def _run_candidate(dataset: Dataset, init: Tuple[ParamVector, np.ndarray], config: OptimizerConfig,
                   value: float, tail_epochs: int) -> CandidateRun:
    candidate_config = config.model_copy(update={"sampler": config.sampler.with_step(value)})
    try:
        result = run(dataset, init, candidate_config)
    except SomalaError as e:
        logger.warning(f"Tuning candidate {value} failed: {e}")
        return CandidateRun(value, None, str(e))
    tail = [c.neg_complete_loglik for c in result.checkpoints if c.epoch > 0][-tail_epochs:]
    score = float(np.mean(tail))
    if not np.isfinite(score):
        return CandidateRun(value, None, "non-finite tuning score")
    return CandidateRun(value, score, beta=result.beta_final, xi=result.xi_final)


def tune(dataset: Dataset, init: Tuple[ParamVector, np.ndarray], base_config: OptimizerConfig,
         spec: TuneSpec, workers: int = 1) -> TuneResult:
    """Pick the step value with the smallest tail-averaged negative complete-data log-likelihood"""
    candidates = spec.resolved_candidates(base_config.sampler.kind)
    config = base_config.model_copy(update={
        "max_epochs": spec.tune_epochs,
        "stop": StopRule(enabled=False),
        "collect_information": False,
        "collect_latent_moments": False,
        "average_last_epochs": None,
        "workers": 1,
    })
    logger.info(f"Tuning {config.sampler.kind} over {candidates} for {spec.tune_epochs} epochs")
    args = [(dataset, init, config, value, spec.tail_epochs) for value in candidates]
    if workers > 1 and len(candidates) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(candidates))) as pool:
            runs = list(pool.map(_run_candidate, *zip(*args)))
    else:
        runs = [_run_candidate(*a) for a in args]

    finished = [r for r in runs if not r.diverged]
    for r in runs:
        logger.info(f"  candidate {r.value}: " + ("diverged" if r.diverged else f"{r.score:.4f}"))
    if not finished:
        raise EstimationError(f"Every tuning candidate diverged ({candidates})")
    # ties go to the smaller step value
    chosen = min(finished, key=lambda r: (r.score, r.value)).value
    logger.info(f"Chose step value {chosen}")
    return TuneResult(chosen, runs)


# ---------------------------------------------------------------------------
# Absolute errors
# ---------------------------------------------------------------------------

def ae(beta_hat: ParamVector, beta_true: ParamVector, block: str, model: LatentVariableModel) -> float:
    """Mean absolute error of one block; ``sigma`` compares covariance matrices"""
    if beta_hat.layout != beta_true.layout or beta_hat.layout != model.layout:
        raise DataValidationError("Estimate and truth do not share the model's parameter layout")
    if block != "sigma":
        return float(np.mean(np.abs(beta_hat.block(block) - beta_true.block(block))))
    diff = np.abs(model.sigma(beta_hat) - model.sigma(beta_true))
    if model.kind == "multilevel":
        return float(diff.mean())
    K = model.n_factors
    if K == 1:
        return 0.0
    return float((diff.sum() - np.trace(diff)) / (K * (K - 1)))


def block_average(values: Dict[str, float]) -> float:
    blocks = [v for k, v in values.items() if k != AVERAGE_BLOCK]
    return float(np.mean(blocks))


def ae_all(beta_hat: ParamVector, beta_true: ParamVector, model: LatentVariableModel) -> Dict[str, float]:
    values = {block: ae(beta_hat, beta_true, block, model) for block in AE_BLOCKS[model.kind]}
    values[AVERAGE_BLOCK] = block_average(values)
    return values


def trajectory_records(result: FitResult, beta_true: ParamVector, model: LatentVariableModel,
                       algorithm: str, replication: int) -> List[dict]:
    records = []
    for cp in result.checkpoints:
        for block, value in ae_all(cp.reported_beta, beta_true, model).items():
            records.append({"algorithm": algorithm, "replication": replication, "epoch": cp.epoch,
                            "seconds": cp.seconds, "block": block, "ae": value})
    return records


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------

RECORD_COLUMNS = ["algorithm", "replication", "epoch", "seconds", "block", "ae"]
RUN_COLUMNS = ["algorithm", "replication", "seed", "epochs", "updates", "seconds", "stop_reason"]


@dataclass
class TrajectoryReport:
    setting: str
    algorithms: List[str]
    records: pd.DataFrame
    replications: int
    failures: List[dict] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    runs: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=RUN_COLUMNS))
    wall_seconds: float = 0.0

    def _filled(self) -> pd.DataFrame:
        """AE on the common epoch grid; runs that stopped early keep their last value"""
        if self.records.empty:
            return self.records
        epochs = np.sort(self.records["epoch"].unique())
        parts = []
        for (algo, rep, block), group in self.records.groupby(["algorithm", "replication", "block"], sort=False):
            series = group.set_index("epoch")["ae"].reindex(epochs).ffill()
            parts.append(pd.DataFrame({"algorithm": algo, "replication": rep, "block": block,
                                       "epoch": epochs, "ae": series.to_numpy()}))
        return pd.concat(parts, ignore_index=True)

    def mae(self) -> pd.DataFrame:
        filled = self._filled()
        if filled.empty:
            return pd.DataFrame(columns=["algorithm", "block", "epoch", "mae", "n"])
        grouped = filled.groupby(["algorithm", "block", "epoch"])["ae"]
        out = grouped.mean().rename("mae").to_frame()
        out["n"] = grouped.count()
        return out.reset_index()

    def blocks(self) -> List[str]:
        present = list(dict.fromkeys(self.records["block"])) if not self.records.empty else []
        return [b for b in present if b != AVERAGE_BLOCK] + ([AVERAGE_BLOCK] if AVERAGE_BLOCK in present else [])

    def to_frames(self) -> Dict[str, pd.DataFrame]:
        """One table per block: rows are algorithms, columns are checkpoint epochs"""
        mae = self.mae()
        frames = {}
        for block in self.blocks():
            table = mae[mae["block"] == block].pivot(index="algorithm", columns="epoch", values="mae")
            frames[block] = table.reindex([a for a in self.algorithms if a in table.index])
        return frames

    def mae_by_time(self, grid: Sequence[float]) -> Dict[str, pd.DataFrame]:
        """MAE against elapsed seconds, interpolating each run's checkpoint stamps"""
        grid = np.asarray(grid, dtype=float)
        rows = []
        for (algo, rep, block), group in self.records.groupby(["algorithm", "replication", "block"], sort=False):
            group = group.sort_values("epoch")
            values = np.interp(grid, group["seconds"].to_numpy(), group["ae"].to_numpy())
            rows.extend({"algorithm": algo, "replication": rep, "block": block, "seconds": s, "ae": v}
                        for s, v in zip(grid, values))
        frame = pd.DataFrame(rows)
        frames = {}
        for block in self.blocks():
            part = frame[frame["block"] == block].groupby(["algorithm", "seconds"])["ae"].mean().unstack("seconds")
            frames[block] = part.reindex([a for a in self.algorithms if a in part.index])
        return frames

    def time_grid(self, points: int) -> np.ndarray:
        """``points`` evenly spaced seconds up to the end of the shortest run"""
        if points < 2:
            raise DataValidationError("A time grid needs at least two points")
        if self.runs.empty:
            raise EstimationError("No successful runs to build a time grid from")
        return np.linspace(0.0, float(self.runs["seconds"].min()), points)

    def timing_summary(self) -> pd.DataFrame:
        """Wall-clock seconds per algorithm across replications"""
        if self.runs.empty:
            return pd.DataFrame(columns=["algorithm", "runs", "mean_seconds", "min_seconds", "max_seconds",
                                         "mean_epochs"])
        grouped = self.runs.groupby("algorithm", sort=False)
        out = pd.DataFrame({
            "runs": grouped["seconds"].count(),
            "mean_seconds": grouped["seconds"].mean(),
            "min_seconds": grouped["seconds"].min(),
            "max_seconds": grouped["seconds"].max(),
            "mean_epochs": grouped["epochs"].mean(),
        })
        out = out.reindex([a for a in self.algorithms if a in out.index])
        return out.rename_axis("algorithm").reset_index()

    def epochs_to_reach(self, threshold: float, block: str = AVERAGE_BLOCK) -> pd.DataFrame:
        """First epoch each run's AE for ``block`` drops to ``threshold`` (NaN if never)"""
        part = self.records[self.records["block"] == block]
        rows = []
        for (algo, rep), group in part.groupby(["algorithm", "replication"], sort=False):
            hit = group.loc[group["ae"] <= threshold, "epoch"]
            rows.append({"algorithm": algo, "replication": rep,
                         "epoch": float(hit.min()) if not hit.empty else np.nan})
        return pd.DataFrame(rows, columns=["algorithm", "replication", "epoch"])


def _replication(setting: SimSetting, algorithms: Sequence[Tuple[str, OptimizerConfig]], replication: int,
                 data_seed: int) -> Tuple[List[dict], List[dict], List[dict]]:
    dataset, beta_true, xi_true = simulate_dataset(setting, data_seed)
    model = build_model(dataset)
    init = initial_values(model, dataset, data_seed, "simulation", true_xi=xi_true)
    records, failures, runs = [], [], []
    for name, config in algorithms:
        try:
            result = run(dataset, init, config.model_copy(update={"seed": data_seed}), model=model)
        except SomalaError as e:
            logger.error(f"Replication {replication}, {name} failed: {e}")
            failures.append({"algorithm": name, "replication": replication, "seed": data_seed, "error": str(e)})
            continue
        records.extend(trajectory_records(result, beta_true, model, name, replication))
        runs.append({"algorithm": name, "replication": replication, "seed": data_seed, "epochs": result.epochs,
                     "updates": result.updates, "seconds": result.seconds, "stop_reason": result.stop_reason})
    return records, failures, runs


def replicate(setting: SimSetting, algorithms: Sequence[Tuple[str, OptimizerConfig]], replications: int,
              seed: int = 0, seeds: Optional[Sequence[int]] = None, workers: int = 1) -> TrajectoryReport:
    """Run every algorithm on ``replications`` simulated datasets from shared initial values"""
    if replications < 1:
        raise DataValidationError("Need at least one replication")
    if not algorithms:
        raise DataValidationError("Need at least one algorithm")
    names = [name for name, _ in algorithms]
    if len(set(names)) != len(names):
        raise DataValidationError(f"Algorithm names must be unique: {names}")
    seeds = list(seeds) if seeds is not None else [seed + r for r in range(replications)]
    if len(seeds) != replications:
        raise DataValidationError(f"{len(seeds)} seeds for {replications} replications")

    logger.info(f"Replicating {setting.name}: {replications} datasets x {len(algorithms)} algorithms")
    started = time.perf_counter()
    jobs = [(setting, list(algorithms), r, s) for r, s in enumerate(seeds)]
    if workers > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=min(workers, replications)) as pool:
            outcomes = list(pool.map(_replication, *zip(*jobs)))
    else:
        outcomes = [_replication(*job) for job in jobs]

    records = [rec for recs, _, _ in outcomes for rec in recs]
    failures = [f for _, fails, _ in outcomes for f in fails]
    runs = pd.DataFrame([r for _, _, rs in outcomes for r in rs], columns=RUN_COLUMNS)
    if failures:
        logger.warning(f"{len(failures)} of {replications * len(algorithms)} runs failed and were excluded")
    frame = pd.DataFrame(records, columns=RECORD_COLUMNS)
    if not frame.empty:
        order = {
            "algorithm": {name: k for k, name in enumerate(names)},
            "block": {b: k for k, b in enumerate(AE_BLOCKS[setting.model] + (AVERAGE_BLOCK,))},
        }
        frame = frame.sort_values(["algorithm", "replication", "epoch", "block"],
                                  key=lambda col: col.map(order[col.name]) if col.name in order else col,
                                  kind="mergesort").reset_index(drop=True)
    return TrajectoryReport(setting.name, names, frame, replications, failures, seeds=seeds, runs=runs,
                            wall_seconds=time.perf_counter() - started)
