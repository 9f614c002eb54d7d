#!/usr/bin/env python3
"""
Process-wide settings for somala: environment defaults, logging setup and
the algorithm presets that name the stochastic optimisation variants.
"""
import logging
import os
from typing import Dict, NamedTuple

__version__ = "0.3.0"

# Environment-driven defaults (override per run with CLI flags)
LOG_LEVEL = os.getenv("SOMALA_LOG_LEVEL", "INFO")
DEFAULT_WORKERS = int(os.getenv("SOMALA_WORKERS", str(os.cpu_count() or 1)))
DEFAULT_OUT_DIR = os.getenv("SOMALA_OUT_DIR", "runs")
DEFAULT_SEED = int(os.getenv("SOMALA_SEED", "0"))

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

logger = logging.getLogger(__name__)


def setup_logging(level: str = None) -> None:
    """Configure root logging once for the process"""
    resolved = (level or LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, resolved, logging.INFO), format=LOG_FORMAT)
    logging.getLogger().setLevel(getattr(logging, resolved, logging.INFO))
    logger.debug(f"Logging configured at {resolved}")


class AlgorithmPreset(NamedTuple):
    sampler: str        # "mala" or "rwmh"
    minibatch: bool
    qn: bool


# SOMALA / SOMH are the fullbatch special cases of the minibatch variants.
ALGORITHM_PRESETS: Dict[str, AlgorithmPreset] = {
    "somala": AlgorithmPreset("mala", False, False),
    "somh": AlgorithmPreset("rwmh", False, False),
    "qn-somala": AlgorithmPreset("mala", False, True),
    "qn-somh": AlgorithmPreset("rwmh", False, True),
    "d-somala": AlgorithmPreset("mala", True, False),
    "d-somh": AlgorithmPreset("rwmh", True, False),
    "qn-d-somala": AlgorithmPreset("mala", True, True),
    "qn-d-somh": AlgorithmPreset("rwmh", True, True),
}

# The six variants compared in the simulation study
STUDY_ALGORITHMS = ("qn-somh", "d-somala", "d-somh", "qn-d-somala", "qn-d-somh", "qn-somala")


def resolve_algorithm(name: str) -> AlgorithmPreset:
    key = name.strip().lower()
    if key not in ALGORITHM_PRESETS:
        known = ", ".join(sorted(ALGORITHM_PRESETS))
        raise ValueError(f"Unknown algorithm '{name}' (known: {known})")
    return ALGORITHM_PRESETS[key]
