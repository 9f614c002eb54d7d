#!/usr/bin/env python3
"""
somala command line: simulate, tune, fit, replicate, evaluate, dichotomize.

Every command writes ``manifest.json`` into its output directory, also when
it fails. Exit codes: 0 success, 2 usage or data error, 3 numerical
divergence or estimation failure, 4 I/O error.
"""
import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

import somala_io
from somala_config import (
    DEFAULT_OUT_DIR,
    DEFAULT_SEED,
    DEFAULT_WORKERS,
    STUDY_ALGORITHMS,
    __version__,
    setup_logging,
)
from somala_estimators import (
    DEFAULT_INFLATION,
    ImportanceDensity,
    fit_importance_density,
    free_parameter_mask,
    is_log_marginal,
)
from somala_harness import TuneSpec, ae_all, replicate, tune
from somala_models import (
    BUILTIN_SETTINGS,
    DataValidationError,
    Dataset,
    EstimationError,
    LatentVariableModel,
    NumericalDivergenceError,
    ParamVector,
    SimSetting,
    build_model,
    get_setting,
    initial_values,
    simulate_dataset,
)
from somala_optimizer import OptimizerConfig, config_for_algorithm, run

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class RunManifest(BaseModel):
    command: str
    argv: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    input_digests: Dict[str, str] = Field(default_factory=dict)
    seed: int
    version: str = __version__
    started_at: str
    finished_at: Optional[str] = None
    status: str = "running"
    exit_code: Optional[int] = None
    error: Optional[str] = None
    outputs: List[str] = Field(default_factory=list)
    stats: Dict[str, Any] = Field(default_factory=dict)

    def record_input(self, path: Optional[str]):
        if path:
            self.input_digests[str(path)] = somala_io.file_digest(path)

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(self.model_dump_json(indent=2) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Shared argument handling
# ---------------------------------------------------------------------------

def _add_data_args(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("data")
    group.add_argument("--responses", help="M2PL responses CSV (N rows x J items)")
    group.add_argument("--q-matrix", help="M2PL Q-matrix CSV (J rows x K factors)")
    group.add_argument("--multilevel", help="Multilevel long-format CSV (level2_id, y, x_1..x_K)")
    group.add_argument("--data-dir", help="Directory searched for relative data file paths")


def _add_algorithm_args(parser: argparse.ArgumentParser):
    parser.add_argument("--algo", default="d-somala", help="somala, somh, qn-somala, qn-somh, d-somala, d-somh, "
                                                          "qn-d-somala or qn-d-somh")
    parser.add_argument("--n", dest="batch_size", type=int, help="Minibatch size for d-* algorithms")
    parser.add_argument("--h", type=float, help="MALA step size")
    parser.add_argument("--sigma2", type=float, help="RWMH proposal variance")
    parser.add_argument("--max-epochs", type=int)
    parser.add_argument("--averaging-start", type=int, help="Epoch after which Polyak-Ruppert averaging starts")
    parser.add_argument("--average-last", type=int, help="Also report the average of the last W epochs")
    parser.add_argument("--rescale", action="append", default=[], metavar="BLOCK=FACTOR",
                        help="Step rescaling for a parameter block (repeatable)")
    parser.add_argument("--hessian", choices=["fd", "analytic"])
    parser.add_argument("--no-stop", action="store_true", help="Disable the DIFF_MAX stopping rule")


def _add_init_args(parser: argparse.ArgumentParser):
    parser.add_argument("--init", choices=["sumscore", "simulation", "file"], default="sumscore")
    parser.add_argument("--true-latent", help="True latent CSV for simulation-mode initial values")
    parser.add_argument("--init-params", help="Initial parameter JSON for --init file")
    parser.add_argument("--init-latent", help="Initial latent CSV for --init file")


def _load_dataset(args, manifest: RunManifest) -> Dataset:
    loader = somala_io.DatasetLoader(args.data_dir)
    if args.multilevel:
        manifest.record_input(loader.resolve(args.multilevel))
        return loader.load_multilevel(args.multilevel)
    if args.responses and args.q_matrix:
        manifest.record_input(loader.resolve(args.responses))
        manifest.record_input(loader.resolve(args.q_matrix))
        return loader.load_m2pl(args.responses, args.q_matrix)
    raise DataValidationError("Give --multilevel, or --responses together with --q-matrix")


def _initial_state(args, model: LatentVariableModel, dataset: Dataset,
                   manifest: RunManifest) -> Tuple[ParamVector, np.ndarray]:
    if args.init == "file":
        if not (args.init_params and args.init_latent):
            raise DataValidationError("--init file needs --init-params and --init-latent")
        manifest.record_input(args.init_params)
        manifest.record_input(args.init_latent)
        init_model, beta = somala_io.load_params(args.init_params)
        if init_model.layout != model.layout:
            raise DataValidationError("Initial parameters do not match the dataset's model")
        return beta, somala_io.load_latent(args.init_latent, dataset)
    true_xi = None
    if args.init == "simulation":
        if not args.true_latent:
            raise DataValidationError("--init simulation needs --true-latent")
        manifest.record_input(args.true_latent)
        true_xi = somala_io.load_latent(args.true_latent, dataset)
    return initial_values(model, dataset, args.seed, args.init, true_xi=true_xi)


def _parse_rescale(items: Sequence[str]) -> Dict[str, float]:
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise DataValidationError(f"--rescale expects BLOCK=FACTOR, got {item!r}")
        out[name.strip()] = float(value)
    return out


def _optimizer_config(args, model_kind: str, n_obs: int) -> OptimizerConfig:
    """Algorithm preset, then the --config file, then explicit flags"""
    preset = config_for_algorithm(args.algo, model_kind, n_obs)
    values = preset.model_dump()
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    config = OptimizerConfig.model_validate(values)
    updates: Dict[str, Any] = {"seed": args.seed, "workers": args.workers}
    step = args.h if args.h is not None else args.sigma2
    if step is not None:
        updates["sampler"] = config.sampler.with_step(step)
    if args.batch_size is not None:
        if preset.batch_size is None:
            logger.warning(f"--n ignored: {args.algo} is a fullbatch algorithm")
        else:
            updates["batch_size"] = min(args.batch_size, n_obs)
    if args.max_epochs is not None:
        updates["max_epochs"] = args.max_epochs
    if args.averaging_start is not None:
        updates["averaging_start_epoch"] = args.averaging_start
    if args.average_last is not None:
        updates["average_last_epochs"] = args.average_last
    if args.rescale:
        updates["block_rescale"] = {**config.block_rescale, **_parse_rescale(args.rescale)}
    if args.hessian:
        updates["hessian"] = args.hessian
    if args.no_stop:
        updates["stop"] = config.stop.model_copy(update={"enabled": False})
    return OptimizerConfig.model_validate({**config.model_dump(), **updates})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _resolve_setting(args, manifest: RunManifest) -> SimSetting:
    if args.setting_file:
        manifest.record_input(args.setting_file)
        setting = SimSetting.model_validate_json(Path(args.setting_file).read_text())
    elif args.setting:
        setting = get_setting(args.setting)
    else:
        raise DataValidationError(f"Give --setting ({', '.join(BUILTIN_SETTINGS)}) or --setting-file")
    if getattr(args, "n_obs", None):
        setting = SimSetting.model_validate({**setting.model_dump(), "n_obs": args.n_obs})
    return setting


def cmd_simulate(args, manifest: RunManifest, out: Path) -> int:
    setting = _resolve_setting(args, manifest)
    manifest.config = {"setting": setting.model_dump(mode="json")}
    dataset, beta, xi = simulate_dataset(setting, args.seed)
    model = build_model(dataset)
    paths = list(somala_io.save_dataset(dataset, out).values())
    somala_io.save_params(model, beta, out / "true_params.json")
    somala_io.save_latent(xi, out / "true_latent.csv")
    paths += [out / "true_params.json", out / "true_latent.csv"]
    manifest.outputs = [str(p) for p in paths]
    print(f"✅ Simulated {setting.name}: N={dataset.n_obs}, J={dataset.n_items}, K={dataset.n_factors} -> {out}")
    return EXIT_OK


def cmd_tune(args, manifest: RunManifest, out: Path) -> int:
    dataset = _load_dataset(args, manifest)
    model = build_model(dataset)
    config = _optimizer_config(args, dataset.kind, dataset.n_obs)
    spec = TuneSpec(candidates=args.candidates, tune_epochs=args.tune_epochs, tail_epochs=args.tail_epochs)
    manifest.config = {"optimizer": config.model_dump(mode="json"), "tune": spec.model_dump(mode="json")}
    init = _initial_state(args, model, dataset, manifest)
    result = tune(dataset, init, config, spec, workers=args.workers)
    table = result.table()
    somala_io.write_csv(table, out / "tune.csv")
    manifest.outputs = [str(out / "tune.csv")]
    print(table.to_string(index=False))
    print(f"🎯 Chosen step value: {result.chosen}")
    return EXIT_OK


def cmd_fit(args, manifest: RunManifest, out: Path) -> int:
    dataset = _load_dataset(args, manifest)
    model = build_model(dataset)
    config = _optimizer_config(args, dataset.kind, dataset.n_obs)
    if args.info:
        config = config.model_copy(update={"collect_information": True,
                                           "information_burn_in": args.info_burn_in,
                                           "information_method": args.info_method})
    if args.logml and args.logml_proposal == "moments":
        config = config.model_copy(update={"collect_latent_moments": True})
    manifest.config = {"optimizer": config.model_dump(mode="json")}
    init = _initial_state(args, model, dataset, manifest)

    if args.warm_start == "tune":
        spec = TuneSpec(candidates=args.candidates, tune_epochs=args.tune_epochs, tail_epochs=args.tail_epochs)
        tuned = tune(dataset, init, config, spec, workers=args.workers)
        somala_io.write_csv(tuned.table(), out / "tune.csv")
        config = config.model_copy(update={"sampler": config.sampler.with_step(tuned.chosen)})
        init = (tuned.best.beta, tuned.best.xi)
        manifest.config["tune"] = spec.model_dump(mode="json")
        manifest.config["optimizer"] = config.model_dump(mode="json")
        print(f"🎯 Warm start from tuned step value {tuned.chosen}")

    try:
        result = run(dataset, init, config, model=model)
    except NumericalDivergenceError as e:
        if e.last_checkpoint is not None:
            somala_io.save_params(model, e.last_checkpoint.beta, out / "last_checkpoint.json")
            manifest.outputs.append(str(out / "last_checkpoint.json"))
        raise

    paths = list(somala_io.save_fit_result(result, model, out).values())
    somala_io.save_params(model, result.beta_pr, out / "params.json")
    somala_io.save_latent(result.xi_final, out / "latent_final.csv")
    paths += [out / "params.json", out / "latent_final.csv"]
    if result.observed_information is not None:
        somala_io.save_information(result.observed_information, out / "information.csv")
        paths.append(out / "information.csv")
        somala_io.save_standard_errors(result.observed_information, result.beta_pr, dataset.n_obs,
                                        out / "standard_errors.csv", free=free_parameter_mask(model))
        paths.append(out / "standard_errors.csv")
    if args.logml:
        if args.logml_proposal == "prior":
            density = ImportanceDensity.from_prior(model, result.beta_pr, dataset.n_obs)
        else:
            density = fit_importance_density(result.latent_moments, inflation=args.inflation)
        report = is_log_marginal(dataset, result.beta_pr, density, args.logml, seed=args.seed, model=model)
        somala_io.save_log_marginal(report, out / "logml.json", per_obs=args.logml_per_obs)
        paths.append(out / "logml.json")
        print(f"📈 log marginal likelihood: {report.total:.4f} (min ESS {report.ess.min():.1f})")
    manifest.outputs = [str(p) for p in paths]
    print(f"✅ {args.algo}: {result.stop_reason} after {result.epochs} epochs, "
          f"acceptance {result.acceptance_rate:.3f} -> {out}")
    return EXIT_OK


def _algorithm_list(path: Optional[str], setting: SimSetting, args, manifest: RunManifest):
    if path:
        manifest.record_input(path)
        entries = json.loads(Path(path).read_text())
    else:
        entries = [{"algorithm": name} for name in STUDY_ALGORITHMS]
    algorithms = []
    for entry in entries:
        name = entry.get("name", entry["algorithm"])
        step = entry.get("steps", {}).get(setting.name, entry.get("step"))
        overrides = dict(entry.get("overrides", {}))
        if args.max_epochs is not None:
            overrides["max_epochs"] = args.max_epochs
        config = config_for_algorithm(entry["algorithm"], setting.model, setting.n_obs,
                                      batch_size=entry.get("batch_size"), step=step, **overrides)
        algorithms.append((name, config))
    return algorithms


def cmd_replicate(args, manifest: RunManifest, out: Path) -> int:
    setting = _resolve_setting(args, manifest)
    algorithms = _algorithm_list(args.algos, setting, args, manifest)
    seeds = args.seeds if args.seeds else [args.seed + r for r in range(args.replications)]
    replications = len(seeds)
    manifest.config = {"setting": setting.model_dump(mode="json"), "replications": replications, "seeds": seeds,
                       "algorithms": {name: c.model_dump(mode="json") for name, c in algorithms}}
    report = replicate(setting, algorithms, replications, seeds=seeds, workers=args.workers)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for block, frame in report.to_frames().items():
        path = out / f"mae_{setting.name}_{block}.csv"
        somala_io.write_csv(frame, path, index=True)
        paths.append(path)
    somala_io.write_csv(report.records.drop(columns=["seconds"]), out / "ae_records.csv")
    somala_io.write_csv(report.runs, out / "run_timings.csv")
    paths += [out / "ae_records.csv", out / "run_timings.csv"]
    if args.time_grid or args.time_points:
        grid = args.time_grid if args.time_grid else report.time_grid(args.time_points)
        for block, frame in report.mae_by_time(grid).items():
            path = out / f"mae_time_{setting.name}_{block}.csv"
            somala_io.write_csv(frame, path, index=True)
            paths.append(path)
    if args.threshold is not None:
        reached = report.epochs_to_reach(args.threshold)
        somala_io.write_csv(reached, out / "epochs_to_reach.csv")
        paths.append(out / "epochs_to_reach.csv")
    if report.failures:
        somala_io.write_json({"failures": report.failures}, out / "failures.json")
        paths.append(out / "failures.json")
    manifest.outputs = [str(p) for p in paths]
    manifest.stats = {
        "wall_seconds": report.wall_seconds,
        "failed_runs": len(report.failures),
        "timing": json.loads(report.timing_summary().to_json(orient="records")),
    }
    runs = replications * len(algorithms)
    print(f"📊 {setting.name}: {runs - len(report.failures)}/{runs} runs succeeded "
          f"in {report.wall_seconds:.1f}s -> {out}")
    if report.records.empty:
        raise EstimationError("Every replication failed")
    return EXIT_OK


def cmd_evaluate(args, manifest: RunManifest, out: Path) -> int:
    manifest.record_input(args.truth)
    model, truth = somala_io.load_params(args.truth)
    rows = []
    for path in args.fits:
        manifest.record_input(path)
        fit_model, beta = somala_io.load_params(path)
        if fit_model.layout != model.layout:
            raise DataValidationError(f"{path} does not match the layout of {args.truth}")
        rows.append({"fit": str(path), **ae_all(beta, truth, model)})
    frame = pd.DataFrame(rows)
    somala_io.write_csv(frame, out / "evaluation.csv")
    manifest.outputs = [str(out / "evaluation.csv")]
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_dichotomize(args, manifest: RunManifest, out: Path) -> int:
    manifest.record_input(args.input)
    target = Path(args.output) if args.output else out / "responses.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    coded = somala_io.dichotomize_median(args.input, target)
    manifest.outputs = [str(target)]
    print(f"✅ Dichotomised {coded.shape[1]} items -> {target}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "tune": cmd_tune,
    "fit": cmd_fit,
    "replicate": cmd_replicate,
    "evaluate": cmd_evaluate,
    "dichotomize": cmd_dichotomize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="somala", description="Stochastic optimisation for latent variable MMLE")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    common.add_argument("--out", default=DEFAULT_OUT_DIR, help="Output directory")
    common.add_argument("--log-level", default=None)
    common.add_argument("--config", help="OptimizerConfig JSON; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Generate a simulated dataset")
    p.add_argument("--setting", choices=sorted(BUILTIN_SETTINGS))
    p.add_argument("--setting-file", help="Custom SimSetting JSON")
    p.add_argument("--n-obs", type=int, help="Override N")

    for name, helptext in (("tune", "Choose the sampler step size"), ("fit", "Fit a model")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        _add_data_args(p)
        _add_algorithm_args(p)
        _add_init_args(p)
        p.add_argument("--candidates", type=float, nargs="+")
        p.add_argument("--tune-epochs", type=int, default=200)
        p.add_argument("--tail-epochs", type=int, default=50)
        if name == "fit":
            p.add_argument("--warm-start", choices=["none", "tune"], default="none")
            p.add_argument("--info", action="store_true", help="Estimate the observed information matrix")
            p.add_argument("--info-burn-in", type=int, default=0, help="Epochs excluded from the information average")
            p.add_argument("--info-method", choices=["posterior_mean", "outer"], default="posterior_mean",
                           help="Outer product of posterior-mean scores, or of the sampled scores")
            p.add_argument("--logml", type=int, metavar="T", help="Importance-sampling marginal likelihood with T draws")
            p.add_argument("--logml-per-obs", action="store_true")
            p.add_argument("--inflation", type=float, default=DEFAULT_INFLATION)
            p.add_argument("--logml-proposal", choices=["moments", "prior"], default="moments",
                           help="Proposal fitted to the retained latent draws, or the latent prior")

    p = sub.add_parser("replicate", parents=[common], help="Multi-replication simulation study")
    p.add_argument("--setting", choices=sorted(BUILTIN_SETTINGS))
    p.add_argument("--setting-file")
    p.add_argument("--n-obs", type=int)
    p.add_argument("--algos", help="JSON list of algorithms (default: the six study algorithms)")
    p.add_argument("-R", "--replications", type=int, default=1)
    p.add_argument("--seeds", type=int, nargs="+", help="Explicit dataset seeds, one per replication (overrides -R)")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--time-grid", type=float, nargs="+", metavar="SECONDS", help="Also tabulate MAE at these times")
    p.add_argument("--time-points", type=int, help="Evenly spaced time grid up to the shortest run")
    p.add_argument("--threshold", type=float, help="Write the first epoch each run reaches this average AE")

    p = sub.add_parser("evaluate", parents=[common], help="AE of saved parameter files against the truth")
    p.add_argument("--truth", required=True)
    p.add_argument("fits", nargs="+")

    p = sub.add_parser("dichotomize", parents=[common], help="Code Likert responses at the item median")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    out = Path(args.out)
    manifest = RunManifest(command=args.command, argv=argv, seed=args.seed, started_at=_now())
    code = EXIT_OK
    try:
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, manifest, out)
    except (DataValidationError, ValidationError, ValueError, KeyError) as e:
        logger.error(f"{args.command}: invalid input: {e}")
        manifest.error, code = str(e), EXIT_USAGE
    except (NumericalDivergenceError, EstimationError) as e:
        logger.error(f"{args.command}: {e}")
        manifest.error, code = str(e), EXIT_DIVERGED
    except OSError as e:
        logger.error(f"{args.command}: I/O error: {e}")
        manifest.error, code = str(e), EXIT_IO
    except Exception as e:
        logger.error(f"{args.command}: unexpected failure: {e}")
        manifest.error, code = repr(e), 1
        raise
    finally:
        manifest.finished_at = _now()
        manifest.exit_code = code
        manifest.status = "ok" if code == EXIT_OK else "failed"
        try:
            manifest.write(out)
        except OSError as e:
            logger.error(f"Could not write manifest to {out}: {e}")
            code = code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
