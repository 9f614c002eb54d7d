#!/usr/bin/env python3
"""
Reading and writing datasets, parameters, latent states and fit artifacts.

All writers use fixed float formatting and sorted JSON keys, so identical
inputs give byte-identical files.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from somala_estimators import InfoMatrix, LogMarginalReport
from somala_models import (
    DataValidationError,
    Dataset,
    LatentVariableModel,
    M2PLModel,
    MultilevelLogisticModel,
    ParamVector,
    chol_from_entries,
    sigma_from_chol,
)
from somala_optimizer import FitResult

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
PathLike = Union[str, Path]


def write_csv(frame: pd.DataFrame, path: PathLike, index: bool = False):
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_json(payload: dict, path: PathLike):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def file_digest(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class DatasetLoader:
    """Loads response data from CSV files into validated ``Dataset`` objects"""

    def __init__(self, data_dir: Optional[PathLike] = None):
        self.data_dir = Path(data_dir) if data_dir else Path(".")

    def resolve(self, name: PathLike) -> Path:
        """Absolute or existing paths as given, anything else under ``data_dir``"""
        path = Path(name)
        return path if path.is_absolute() or path.exists() else self.data_dir / path

    def read_csv(self, name: PathLike) -> pd.DataFrame:
        path = self.resolve(name)
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            logger.error(f"Failed to parse {path}: {e}")
            raise DataValidationError(f"Cannot parse {path}: {e}")
        logger.info(f"Loaded {len(frame)} rows x {frame.shape[1]} columns from {path}")
        return frame

    def load_m2pl(self, responses_csv: PathLike, q_csv: PathLike) -> Dataset:
        responses = self.read_csv(responses_csv)
        q = self.read_csv(q_csv)
        complete = responses.dropna()
        dropped = len(responses) - len(complete)
        if dropped:
            logger.warning(f"Dropped {dropped} respondents with missing responses (complete cases only)")
        if complete.empty:
            raise DataValidationError("No complete response rows")
        if len(q) != complete.shape[1]:
            raise DataValidationError(f"Q-matrix has {len(q)} rows for {complete.shape[1]} items")
        try:
            y = complete.to_numpy(dtype=float)
            q_values = q.to_numpy(dtype=float)
        except ValueError as e:
            raise DataValidationError(f"Non-numeric cells in response data: {e}")
        if not np.isin(q_values, (0.0, 1.0)).all():
            raise DataValidationError("Q-matrix entries must be 0 or 1")
        return Dataset("m2pl", y, q_matrix=q_values.astype(int))

    def load_multilevel(self, long_csv: PathLike) -> Dataset:
        frame = self.read_csv(long_csv)
        x_cols = [c for c in frame.columns if str(c).startswith("x_")]
        x_cols.sort(key=lambda c: int(str(c)[2:]))
        missing = {"level2_id", "y"} - set(frame.columns)
        if missing or not x_cols:
            raise DataValidationError(f"Long-format file needs level2_id, y and x_1..x_K (missing {sorted(missing)})")
        complete = frame.dropna(subset=["y"] + x_cols)
        if len(complete) < len(frame):
            logger.warning(f"Dropped {len(frame) - len(complete)} level-1 rows with missing values")
        responses, covariates = [], []
        for _, group in complete.groupby("level2_id", sort=False):
            responses.append(group["y"].to_numpy(dtype=float))
            covariates.append(group[x_cols].to_numpy(dtype=float))
        return Dataset.from_groups(responses, covariates)


def load_m2pl(responses_csv: PathLike, q_csv: PathLike) -> Dataset:
    return DatasetLoader().load_m2pl(responses_csv, q_csv)


def load_multilevel(long_csv: PathLike) -> Dataset:
    return DatasetLoader().load_multilevel(long_csv)


def save_dataset(dataset: Dataset, out_dir: PathLike) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset.kind == "m2pl":
        paths = {"responses": out / "responses.csv", "q_matrix": out / "q_matrix.csv"}
        y = pd.DataFrame(dataset.responses.astype(int),
                         columns=[f"item_{j + 1}" for j in range(dataset.n_items)])
        q = pd.DataFrame(dataset.q_matrix, columns=[f"factor_{k + 1}" for k in range(dataset.n_factors)])
        write_csv(y, paths["responses"])
        write_csv(q, paths["q_matrix"])
        return paths
    path = out / "multilevel.csv"
    unit, cell = np.nonzero(dataset.mask)
    frame = pd.DataFrame({"level2_id": unit + 1, "y": dataset.responses[unit, cell].astype(int)})
    for k in range(dataset.n_factors):
        frame[f"x_{k + 1}"] = dataset.covariates[unit, cell, k]
    write_csv(frame, path)
    return {"multilevel": path}


def params_payload(model: LatentVariableModel, beta: ParamVector) -> dict:
    L = chol_from_entries(beta.block("chol"), model.n_factors)
    payload = {
        "model": model.kind,
        "n_factors": model.n_factors,
        "blocks": beta.to_blocks(),
        "sigma": sigma_from_chol(L).tolist(),
    }
    if model.kind == "m2pl":
        payload["q_matrix"] = model.q_matrix.tolist()
    return payload


def save_params(model: LatentVariableModel, beta: ParamVector, path: PathLike):
    write_json(params_payload(model, beta), path)


def load_params(path: PathLike) -> Tuple[LatentVariableModel, ParamVector]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataValidationError(f"Invalid parameter file {path}: {e}")
    kind = payload.get("model")
    if kind == "m2pl":
        if "q_matrix" not in payload:
            raise DataValidationError(f"{path}: M2PL parameters need a q_matrix")
        model: LatentVariableModel = M2PLModel(np.asarray(payload["q_matrix"], dtype=int))
    elif kind == "multilevel":
        model = MultilevelLogisticModel(int(payload["n_factors"]))
    else:
        raise DataValidationError(f"{path}: unknown model kind {kind!r}")
    return model, model.make_params(payload.get("blocks", {}))


def save_latent(xi: np.ndarray, path: PathLike):
    frame = pd.DataFrame(np.asarray(xi), columns=[f"xi_{k + 1}" for k in range(np.asarray(xi).shape[1])])
    write_csv(frame, path)


def load_latent(path: PathLike, dataset: Optional[Dataset] = None) -> np.ndarray:
    xi = DatasetLoader().read_csv(path).to_numpy(dtype=float)
    if dataset is not None and xi.shape != (dataset.n_obs, dataset.n_factors):
        raise DataValidationError(f"Latent file {xi.shape} does not match ({dataset.n_obs}, {dataset.n_factors})")
    return xi


def checkpoint_frame(result: FitResult) -> pd.DataFrame:
    labels = list(result.beta_final.layout.labels)
    rows = [[c.epoch, c.acceptance, c.neg_complete_loglik, *c.reported_beta.values] for c in result.checkpoints]
    return pd.DataFrame(rows, columns=["epoch", "acceptance", "neg_complete_loglik", *labels])


def save_fit_result(result: FitResult, model: LatentVariableModel, out_dir: PathLike) -> Dict[str, Path]:
    """fit.json, checkpoints.csv (reported estimate per epoch) and timings.csv"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"fit": out / "fit.json", "checkpoints": out / "checkpoints.csv", "timings": out / "timings.csv"}
    payload = {
        "config": result.config.model_dump(mode="json"),
        "stop_reason": result.stop_reason,
        "epochs": result.epochs,
        "updates": result.updates,
        "seconds": result.seconds,
        "acceptance_rate": result.acceptance_rate,
        "diff_max_trace": result.diff_max_trace,
        "flags": result.flags,
        "beta_final": params_payload(model, result.beta_final),
        "beta_pr": params_payload(model, result.beta_pr),
    }
    if result.beta_last_avg is not None:
        payload["beta_last_avg"] = params_payload(model, result.beta_last_avg)
    if result.qn_state is not None:
        payload["qn_diagonal"] = result.qn_state.d_diag.tolist()
    write_json(payload, paths["fit"])
    write_csv(checkpoint_frame(result), paths["checkpoints"])
    write_csv(pd.DataFrame({"epoch": [c.epoch for c in result.checkpoints],
                             "seconds": [c.seconds for c in result.checkpoints]}), paths["timings"])
    return paths


def save_information(info: InfoMatrix, path: PathLike):
    labels = list(info.labels) or [f"beta_{q}" for q in range(info.matrix.shape[0])]
    frame = pd.DataFrame(info.matrix, index=pd.Index(labels, name="parameter"), columns=labels)
    write_csv(frame, path, index=True)


def save_standard_errors(info: InfoMatrix, beta: ParamVector, n_obs: int, path: PathLike,
                         free: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Estimate and standard error per parameter; constrained entries get an empty SE"""
    labels = list(info.labels) or list(beta.layout.labels)
    frame = pd.DataFrame({"parameter": labels, "estimate": beta.values,
                          "se": info.standard_errors(n_obs, free)})
    write_csv(frame, path)
    return frame


def save_log_marginal(report: LogMarginalReport, path: PathLike, per_obs: bool = False):
    payload = report.summary()
    if per_obs:
        payload["per_obs"] = report.per_obs.tolist()
    write_json(payload, path)


def dichotomize_median(likert_csv: PathLike, out_csv: PathLike) -> pd.DataFrame:
    """Code each Likert item 1 when the response is at or above the item median"""
    frame = DatasetLoader().read_csv(likert_csv)
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    if numeric.isna().all().any():
        bad = numeric.columns[numeric.isna().all()].tolist()
        raise DataValidationError(f"Columns without numeric responses: {bad}")
    medians = numeric.median(skipna=True)
    coded = (numeric >= medians).astype("Int64").mask(numeric.isna())
    write_csv(coded, out_csv)
    logger.info(f"Dichotomised {coded.shape[1]} items for {len(coded)} respondents at the item medians")
    return coded
