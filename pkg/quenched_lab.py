"""Quenched limit-theorem lab for random piecewise expanding interval maps.

Samples a stationary driving process, discretizes the fiber transfer
operators with the Ulam method, builds the martingale-coboundary
decomposition of fiberwise centered observables, estimates the limiting
covariance and drift-correction matrices, and checks the central limit
theorem, the iterated invariance principle and fast-slow homogenization
against Monte Carlo ensembles.
"""
import json
import hashlib
import logging
from logging.handlers import RotatingFileHandler
import math
import sys
import os
import time
import threading
import argparse
import atexit
from datetime import datetime
from pathlib import Path
from dataclasses import dataclass, field, replace
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Dict, List, Tuple, Optional, Callable, Any, Union, Sequence, Iterator

import numpy as np
import pandas as pd
from scipy import sparse, stats
from tqdm import tqdm

# Attempt to load python-dotenv if available (optional dependency)
_DOTENV_AVAILABLE = False
_DOTENV_LOADED = False
try:
    from dotenv import load_dotenv
    _DOTENV_LOADED = load_dotenv()
    _DOTENV_AVAILABLE = True
except ImportError:
    pass  # python-dotenv not installed

# Attempt to load argcomplete for shell tab-completion (optional dependency)
_ARGCOMPLETE_AVAILABLE = False
try:
    import argcomplete
    _ARGCOMPLETE_AVAILABLE = True
except ImportError:
    pass  # argcomplete not installed

# ==================== VERSION ====================

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

# ==================== CUSTOM EXCEPTIONS ====================


class QuenchedLabError(Exception):
    """Base exception for all quenched-lab errors."""

    def __init__(self, message: str, details: Optional[str] = None):
        self.message = message
        self.details = details
        super().__init__(self.message)

    def __str__(self) -> str:
        if self.details:
            return f"{self.message}: {self.details}"
        return self.message


class ConfigurationError(QuenchedLabError):
    """Exception raised for configuration-related errors.

    Examples:
        - Missing config file
        - Invalid JSON in config file
        - Unknown preset or scenario name
    """

    def __init__(self, message: str, config_file: Optional[str] = None,
                 field: Optional[str] = None, details: Optional[str] = None):
        self.config_file = config_file
        self.field = field
        super().__init__(message, details)


class ValidationError(QuenchedLabError):
    """Exception raised when an experiment config has violations.

    Carries the full list so callers can report every problem at once.
    """

    def __init__(self, message: str, violations: Optional[List[str]] = None,
                 details: Optional[str] = None):
        self.violations = list(violations or [])
        if details is None and self.violations:
            details = "; ".join(self.violations)
        super().__init__(message, details)


class BaseProcessError(QuenchedLabError):
    """Invalid base process or undefined mixing quantity."""


class MapDefinitionError(QuenchedLabError):
    """Invalid fiber map specification.

    Examples:
        - Branch that does not cover [0,1)
        - Zero slope
        - Infeasible mixed-family constants
    """


class DomainError(QuenchedLabError):
    """State outside the unit interval."""


class PathWindowError(QuenchedLabError):
    """Requested index range is not covered by the sampled base path."""

    def __init__(self, message: str, required_k_past: Optional[int] = None,
                 details: Optional[str] = None):
        self.required_k_past = required_k_past
        super().__init__(message, details)


class DecompositionError(QuenchedLabError):
    """Martingale-coboundary decomposition misuse (e.g. uncentered input)."""


class EstimationError(QuenchedLabError):
    """Invalid or degenerate estimator input (dimension mismatch, bad sizes)."""


class IntegrationError(QuenchedLabError):
    """Failure while integrating the slow variable or the limit SDE."""

    def __init__(self, message: str, step: Optional[int] = None,
                 details: Optional[str] = None):
        self.step = step
        super().__init__(message, details)


class HomogenizationRefused(QuenchedLabError):
    """The fast dynamics are outside the uniform-decay regime."""


class OutputError(QuenchedLabError):
    """Exception raised for file writing failures.

    Examples:
        - Permission denied
        - Disk full
        - Invalid path
    """

    def __init__(self, message: str, output_path: Optional[str] = None,
                 output_format: Optional[str] = None, details: Optional[str] = None,
                 original_error: Optional[Exception] = None):
        self.output_path = output_path
        self.output_format = output_format
        self.original_error = original_error
        super().__init__(message, details)


# ==================== DEFAULT CONSTANTS ====================

# Discretization
DEFAULT_N_BINS: int = 1024
DEFAULT_K_PULLBACK: int = 40
DENSITY_FLOOR: float = 1e-14            # bins below this density are masked
STOCHASTIC_TOL: float = 1e-12           # row sums / probability vectors
STATIONARY_TOL: float = 1e-10

# Estimation
DEFAULT_N_LAGS: int = 60
DEFAULT_POSITIONS: int = 256
DEFAULT_TRUNCATION_TOL: float = 1e-6
DEFAULT_DECAY_FIT_FLOOR: float = 1e-12
DEFAULT_K_MAX: int = 50
KS_COEFFICIENT: float = 1.63
KS_MODEL_ALLOWANCE: float = 0.01

# Ensembles
DEFAULT_BATCH_SIZE: int = 256
MAX_WORKERS: int = 256

# Cache defaults
DEFAULT_CACHE_SIZE: int = 128

# Logging defaults
LOG_FILE_MAX_BYTES: int = 10 * 1024 * 1024  # 10MB max per log file
LOG_FILE_BACKUP_COUNT: int = 5


def auto_detect_workers(num_tasks: int = 1) -> int:
    """
    Pick a worker count from the CPU count and the number of batches.

    Args:
        num_tasks: Number of independent batches to run

    Returns:
        Recommended number of workers (1 to MAX_WORKERS)
    """
    try:
        cpu_count = os.cpu_count() or 4
    except Exception:
        cpu_count = 4

    base_workers = max(1, cpu_count - 1)
    workers = min(base_workers, max(1, num_tasks))
    return max(1, min(workers, MAX_WORKERS))


# ==================== LOGGING SETUP ====================


class JSONFormatter(logging.Formatter):
    """
    JSON formatter for structured logging output.

    Each log record is a single JSON object on one line.
    """

    def format(self, record: logging.LogRecord) -> str:
        """Format log record as JSON."""
        log_entry = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        if hasattr(record, 'extra_fields'):
            log_entry.update(record.extra_fields)

        return json.dumps(log_entry, default=str)


_atexit_registered = False
_current_log_file = None


def setup_logging(
    scenario: Optional[str] = None,
    log_level: Optional[str] = None,
    log_format: str = "text",
    log_dir: Optional[Union[str, Path]] = "logs"
) -> logging.Logger:
    """Setup logging to both file and console.

    Args:
        scenario: Scenario name used in the log file name
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_format: "text" (default) or "json" for structured logging
        log_dir: Directory for rotating log files; None logs to console only

    Returns:
        Configured logger instance

    Priority: 1) Passed parameter, 2) Environment variable LOG_LEVEL, 3) Default INFO
    """
    global _atexit_registered, _current_log_file

    if not _atexit_registered:
        atexit.register(logging.shutdown)
        _atexit_registered = True

    log_path = Path(log_dir) if log_dir is not None else None
    if log_path is not None:
        try:
            log_path.mkdir(parents=True, exist_ok=True)
        except PermissionError:
            print("Warning: Cannot create logs directory (permission denied). Logging to console only.",
                  file=sys.stderr)
            log_path = None
        except OSError as e:
            print(f"Warning: Cannot create logs directory: {e}. Logging to console only.", file=sys.stderr)
            log_path = None

    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    log_file = None
    if log_path is not None:
        log_file = log_path / f"QLab_{scenario or 'session'}_{timestamp}.log"

    if log_level is None:
        log_level = os.environ.get('LOG_LEVEL', 'INFO')

    valid_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
    if log_level.upper() not in valid_levels:
        print(f"Warning: Invalid log level '{log_level}', using INFO", file=sys.stderr)
        log_level = 'INFO'

    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    for handler in logging.root.handlers[:]:
        handler.close()
        logging.root.removeHandler(handler)

    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file is not None:
        handlers.append(RotatingFileHandler(
            log_file,
            maxBytes=LOG_FILE_MAX_BYTES,
            backupCount=LOG_FILE_BACKUP_COUNT
        ))

    if log_format.lower() == "json":
        formatter: logging.Formatter = JSONFormatter()
    else:
        formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

    for handler in handlers:
        handler.setFormatter(formatter)
        handler.setLevel(numeric_level)
        logging.root.addHandler(handler)

    logging.root.setLevel(numeric_level)

    module_logger = logging.getLogger(__name__)
    module_logger.propagate = True
    module_logger.setLevel(logging.NOTSET)

    _current_log_file = log_file
    if log_file is not None:
        module_logger.info(f"Logging initialized. Log file: {log_file}")
    else:
        module_logger.info("Logging initialized. Console output only.")

    for handler in logging.root.handlers:
        handler.flush()

    return module_logger


# ==================== PERFORMANCE TRACKING ====================

class PerformanceTracker:
    """Track wall-clock time per pipeline stage"""
    def __init__(self, logger: logging.Logger):
        self.metrics: Dict[str, float] = {}
        self.logger = logger
        self.start_times: Dict[str, float] = {}

    def start(self, operation_name: str):
        """Start timing an operation"""
        self.start_times[operation_name] = time.perf_counter()

    def end(self, operation_name: str):
        """End timing an operation"""
        if operation_name in self.start_times:
            duration = time.perf_counter() - self.start_times[operation_name]
            self.metrics[operation_name] = self.metrics.get(operation_name, 0.0) + duration

            if self.logger.isEnabledFor(logging.DEBUG):
                self.logger.debug(f"⏱️  {operation_name} completed in {duration:.2f}s")

            del self.start_times[operation_name]

    def get_summary(self) -> str:
        """Generate performance summary"""
        if not self.metrics:
            return "No performance metrics collected"

        total = sum(self.metrics.values())
        lines = ["", "=" * 60, "PERFORMANCE SUMMARY", "=" * 60]

        for operation, duration in sorted(self.metrics.items(), key=lambda x: x[1], reverse=True):
            percentage = (duration / total) * 100 if total > 0 else 0
            lines.append(f"{operation:35s}: {duration:6.2f}s ({percentage:5.1f}%)")

        lines.extend(["=" * 60, f"{'Total Execution Time':35s}: {total:6.2f}s", "=" * 60])
        return "\n".join(lines)


# ==================== SEEDS ====================

def derive_seed(master_seed: int, stage: str, index: int = 0) -> int:
    """Split a master seed into a stage seed by hashing (master, stage, index).

    The result is a 64-bit integer suitable for ``np.random.default_rng``.
    """
    digest = hashlib.sha256(f"{int(master_seed)}:{stage}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ==================== ACCUMULATORS ====================

class RunningMoments:
    """Mergeable running mean, variance and fourth moment.

    Works elementwise on arrays of any fixed shape. Batches are folded in
    with the pairwise update, and two accumulators combine with ``+`` so
    ensemble reductions do not depend on how paths were split across
    workers.
    """

    def __init__(self, shape: Tuple[int, ...] = ()):
        self.shape = tuple(shape)
        self.n = 0
        self.M1 = np.zeros(self.shape)
        self.M2 = np.zeros(self.shape)
        self.M3 = np.zeros(self.shape)
        self.M4 = np.zeros(self.shape)

    @classmethod
    def from_samples(cls, values: np.ndarray) -> 'RunningMoments':
        """Build an accumulator from samples stacked on axis 0."""
        values = np.asarray(values, dtype=float)
        acc = cls(values.shape[1:])
        if values.shape[0] == 0:
            return acc
        acc.n = values.shape[0]
        acc.M1 = values.mean(axis=0)
        centered = values - acc.M1
        sq = centered * centered
        acc.M2 = sq.sum(axis=0)
        acc.M3 = (sq * centered).sum(axis=0)
        acc.M4 = (sq * sq).sum(axis=0)
        return acc

    def update(self, values: np.ndarray) -> 'RunningMoments':
        """Fold a batch of samples (stacked on axis 0) into this accumulator."""
        merged = self + RunningMoments.from_samples(values)
        self.n, self.M1, self.M2, self.M3, self.M4 = merged.n, merged.M1, merged.M2, merged.M3, merged.M4
        return self

    def __add__(a, b: 'RunningMoments') -> 'RunningMoments':
        if a.n == 0:
            return b.copy()
        if b.n == 0:
            return a.copy()
        new = RunningMoments(a.shape)
        na, nb = float(a.n), float(b.n)
        n = na + nb
        delta = b.M1 - a.M1
        delta2 = delta * delta
        delta3 = delta2 * delta
        delta4 = delta2 * delta2

        new.n = a.n + b.n
        new.M1 = a.M1 + delta * nb / n
        new.M2 = a.M2 + b.M2 + delta2 * na * nb / n
        new.M3 = (a.M3 + b.M3 + delta3 * na * nb * (na - nb) / (n * n)
                  + 3.0 * delta * (na * b.M2 - nb * a.M2) / n)
        new.M4 = (a.M4 + b.M4 + delta4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
                  + 6.0 * delta2 * (na * na * b.M2 + nb * nb * a.M2) / (n * n)
                  + 4.0 * delta * (na * b.M3 - nb * a.M3) / n)
        return new

    def copy(self) -> 'RunningMoments':
        new = RunningMoments(self.shape)
        new.n = self.n
        new.M1, new.M2, new.M3, new.M4 = (np.array(self.M1), np.array(self.M2),
                                          np.array(self.M3), np.array(self.M4))
        return new

    @property
    def mean(self) -> np.ndarray:
        return self.M1

    @property
    def variance(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros(self.shape)
        return self.M2 / (self.n - 1)

    @property
    def stderr(self) -> np.ndarray:
        """Standard error of the mean."""
        if self.n < 2:
            return np.zeros(self.shape)
        return np.sqrt(self.variance / self.n)

    @property
    def variance_stderr(self) -> np.ndarray:
        """Asymptotic standard error of the sample variance."""
        if self.n < 2:
            return np.zeros(self.shape)
        mu2 = self.M2 / self.n
        mu4 = self.M4 / self.n
        return np.sqrt(np.maximum(mu4 - mu2 * mu2, 0.0) / self.n)


class KahanSum:
    """Elementwise compensated summation of arrays."""

    def __init__(self, shape: Tuple[int, ...] = ()):
        self.total = np.zeros(shape)
        self._compensation = np.zeros(shape)

    def add(self, value: np.ndarray) -> None:
        y = np.asarray(value, dtype=float) - self._compensation
        t = self.total + y
        self._compensation = (t - self.total) - y
        self.total = t


# ==================== ENSEMBLE RUNNER ====================

class EnsembleRunner:
    """Fork-join execution of path batches.

    Paths are split into fixed-size batches. Batch ``i`` always receives
    ``derive_seed(master_seed, stage, i)``, and results come back in batch
    order, so reductions are identical for any worker count.

    Args:
        workers: Number of worker threads (0 = auto-detect)
        batch_size: Paths per batch
        quiet: Suppress progress bars
        logger: Logger instance
    """

    def __init__(self, workers: int = 1, batch_size: int = DEFAULT_BATCH_SIZE,
                 quiet: bool = True, logger: Optional[logging.Logger] = None):
        if batch_size < 1:
            raise EstimationError("batch_size must be positive", details=f"got {batch_size}")
        self.workers = workers
        self.batch_size = batch_size
        self.quiet = quiet
        self.logger = logger or logging.getLogger(__name__)

    def batch_sizes(self, n_paths: int) -> List[int]:
        full, rest = divmod(n_paths, self.batch_size)
        return [self.batch_size] * full + ([rest] if rest else [])

    def map_batches(self, task: Callable[[int, int, int], Any], n_paths: int,
                    master_seed: int, stage: str) -> List[Any]:
        """Run ``task(batch_index, batch_size, seed)`` over all batches.

        Returns:
            Task results ordered by batch index.
        """
        if n_paths < 1:
            raise EstimationError(f"{stage}: n_paths must be positive", details=f"got {n_paths}")
        sizes = self.batch_sizes(n_paths)
        seeds = [derive_seed(master_seed, stage, i) for i in range(len(sizes))]
        workers = self.workers if self.workers > 0 else auto_detect_workers(len(sizes))
        workers = max(1, min(workers, len(sizes)))
        results: List[Any] = [None] * len(sizes)

        if self.logger.isEnabledFor(logging.DEBUG):
            self.logger.debug(f"{stage}: {n_paths} paths in {len(sizes)} batch(es), {workers} worker(s)")

        if workers == 1:
            for i in tqdm(range(len(sizes)), desc=stage, unit="batch", leave=False, disable=self.quiet):
                results[i] = task(i, sizes[i], seeds[i])
            return results

        with ThreadPoolExecutor(max_workers=workers) as executor:
            future_to_index = {
                executor.submit(task, i, sizes[i], seeds[i]): i
                for i in range(len(sizes))
            }
            with tqdm(
                total=len(sizes),
                desc=stage,
                unit="batch",
                bar_format="{l_bar}{bar}| {n_fmt}/{total_fmt} [{elapsed}]",
                leave=False,
                disable=self.quiet
            ) as pbar:
                for future in as_completed(future_to_index):
                    results[future_to_index[future]] = future.result()
                    pbar.update(1)
        return results

# ==================== BASE PROCESS ====================

BASE_KINDS = ("iid", "markov")


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Stationary row vector of a row-stochastic kernel (left eigenvector for eigenvalue 1)."""
    transition = np.asarray(transition, dtype=float)
    eigenvalues, eigenvectors = np.linalg.eig(transition.T)
    idx = int(np.argmin(np.abs(eigenvalues - 1.0)))
    vec = np.real(eigenvectors[:, idx])
    vec = vec / vec.sum()
    vec[np.abs(vec) < 1e-15] = 0.0
    return vec


def is_primitive(transition: np.ndarray) -> bool:
    """Primitivity via Wielandt's bound: some power <= (n-1)^2 + 1 is strictly positive."""
    adjacency = (np.asarray(transition) > 0).astype(np.int64)
    n = adjacency.shape[0]
    reach = adjacency.copy()
    for _ in range((n - 1) ** 2):
        if reach.all():
            return True
        reach = ((reach @ adjacency) > 0).astype(np.int64)
    return bool(reach.all())


@dataclass(frozen=True, eq=False)
class BaseProcess:
    """Stationary driving process over a finite alphabet of map symbols.

    Attributes:
        kind: "iid" or "markov"
        alphabet: Symbol names, each naming a fiber map
        weights: Symbol probabilities (iid)
        transition: Row-stochastic kernel (markov)
        stationary: Stationary distribution of the kernel (markov)
    """
    kind: str
    alphabet: Tuple[str, ...]
    weights: Optional[np.ndarray] = None
    transition: Optional[np.ndarray] = None
    stationary: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in BASE_KINDS:
            raise BaseProcessError(f"Unknown base process kind '{self.kind}'",
                                   details=f"expected one of {', '.join(BASE_KINDS)}")
        if len(self.alphabet) == 0:
            raise BaseProcessError("Base alphabet must not be empty")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise BaseProcessError("Base alphabet has duplicate symbols", details=str(list(self.alphabet)))
        size = len(self.alphabet)

        if self.kind == "iid":
            weights = np.asarray(self.weights, dtype=float)
            _check_probability_vector(weights, size, "weights")
            object.__setattr__(self, "weights", weights)
            return

        transition = np.asarray(self.transition, dtype=float)
        if transition.shape != (size, size):
            raise BaseProcessError("Transition kernel has wrong shape",
                                   details=f"expected {(size, size)}, got {transition.shape}")
        if (transition < 0).any():
            raise BaseProcessError("Transition kernel has negative entries")
        row_sums = transition.sum(axis=1)
        bad = np.flatnonzero(np.abs(row_sums - 1.0) > STOCHASTIC_TOL)
        if bad.size:
            raise BaseProcessError(f"Transition row {int(bad[0])} sums to {row_sums[bad[0]]:.12g}, expected 1")
        if not is_primitive(transition):
            raise BaseProcessError("Transition kernel is not primitive (reducible or periodic)")

        stationary = (stationary_distribution(transition) if self.stationary is None
                      else np.asarray(self.stationary, dtype=float))
        _check_probability_vector(stationary, size, "stationary")
        if np.abs(stationary @ transition - stationary).max() > STATIONARY_TOL:
            raise BaseProcessError("Stationary vector is not a fixed point of the kernel")
        if (stationary <= 0).any():
            raise BaseProcessError("Stationary distribution has a zero-probability state",
                                   details="time reversal is undefined")
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "stationary", stationary)

    @classmethod
    def iid(cls, alphabet: Sequence[str], weights: Optional[Sequence[float]] = None) -> 'BaseProcess':
        alphabet = tuple(alphabet)
        if weights is None and alphabet:
            weights = np.full(len(alphabet), 1.0 / len(alphabet))
        return cls(kind="iid", alphabet=alphabet, weights=weights)

    @classmethod
    def markov(cls, alphabet: Sequence[str], transition: Sequence[Sequence[float]]) -> 'BaseProcess':
        return cls(kind="markov", alphabet=tuple(alphabet), transition=np.asarray(transition, dtype=float))

    @property
    def marginal(self) -> np.ndarray:
        """One-time law of the symbol process."""
        return self.weights if self.kind == "iid" else self.stationary

    @property
    def reversed_transition(self) -> np.ndarray:
        """rev[i][j] = stationary[j] * transition[j][i] / stationary[i]."""
        if self.kind == "iid":
            return np.tile(self.weights, (len(self.alphabet), 1))
        pi = self.stationary
        return (self.transition.T * pi[None, :]) / pi[:, None]

    def index_of(self, symbol: str) -> int:
        try:
            return self.alphabet.index(symbol)
        except ValueError:
            raise BaseProcessError(f"Symbol '{symbol}' is not in the base alphabet") from None


def _check_probability_vector(vec: np.ndarray, size: int, name: str):
    if vec.shape != (size,):
        raise BaseProcessError(f"{name} has wrong length", details=f"expected {size}, got {vec.shape}")
    if (vec < 0).any():
        raise BaseProcessError(f"{name} has negative entries")
    if abs(vec.sum() - 1.0) > STOCHASTIC_TOL:
        raise BaseProcessError(f"{name} sums to {vec.sum():.12g}, expected 1")


@dataclass(frozen=True, eq=False)
class BasePath:
    """Two-sided finite realization of the driving noise.

    Attributes:
        symbols: Alphabet indices for path indices -k_past..n_future (position 0 holds -k_past)
        alphabet: Symbol names
        k_past: Number of indices before the origin
        n_future: Number of indices after the origin
        seed: Seed used to sample the path (None for hand-built paths)
    """
    symbols: np.ndarray
    alphabet: Tuple[str, ...]
    k_past: int
    n_future: int
    seed: Optional[int] = None

    def __post_init__(self):
        if self.k_past < 0 or self.n_future < 0:
            raise PathWindowError("k_past and n_future must be nonnegative")
        symbols = np.asarray(self.symbols, dtype=np.int64)
        if symbols.shape != (self.k_past + self.n_future + 1,):
            raise PathWindowError("Path length does not match its window",
                                  details=f"{symbols.shape[0]} symbols for [-{self.k_past}, {self.n_future}]")
        if symbols.size and (symbols.min() < 0 or symbols.max() >= len(self.alphabet)):
            raise BaseProcessError("Path holds a symbol outside its alphabet")
        symbols.flags.writeable = False
        object.__setattr__(self, "symbols", symbols)

    @classmethod
    def constant(cls, alphabet: Sequence[str], symbol: str, k_past: int, n_future: int) -> 'BasePath':
        """Path that repeats one symbol (a single deterministic map)."""
        alphabet = tuple(alphabet)
        if symbol not in alphabet:
            raise BaseProcessError(f"Symbol '{symbol}' is not in the base alphabet")
        index = alphabet.index(symbol)
        return cls(np.full(k_past + n_future + 1, index), alphabet, k_past, n_future)

    def __len__(self) -> int:
        return int(self.symbols.shape[0])

    def covers(self, start: int, stop: int) -> bool:
        """True when every index in [start, stop] lies inside the window."""
        return start >= -self.k_past and stop <= self.n_future

    def require(self, start: int, stop: int, what: str = "window"):
        if start < -self.k_past:
            required = -start
            raise PathWindowError(f"{what}: insufficient past, need k_past >= {required}",
                                  required_k_past=required, details=f"path has k_past={self.k_past}")
        if stop > self.n_future:
            raise PathWindowError(f"{what}: window overflow, need n_future >= {stop}",
                                  details=f"path has n_future={self.n_future}")

    def symbol_index(self, j: int) -> int:
        self.require(j, j, "symbol lookup")
        return int(self.symbols[j + self.k_past])

    def symbol(self, j: int) -> str:
        return self.alphabet[self.symbol_index(j)]

    def indices(self, start: int, stop: int) -> np.ndarray:
        """Alphabet indices for path indices start..stop-1."""
        if stop <= start:
            return np.empty(0, dtype=np.int64)
        self.require(start, stop - 1)
        return self.symbols[start + self.k_past: stop + self.k_past]


def sample_path(process: BaseProcess, k_past: int, n_future: int, seed: Optional[int] = None) -> BasePath:
    """Sample a stationary two-sided window of the base process.

    Markov paths draw the origin from the stationary law, run forward with
    the kernel and backward with the exact time-reversed kernel.
    """
    if k_past < 0 or n_future < 0:
        raise PathWindowError("k_past and n_future must be nonnegative")
    rng = np.random.default_rng(seed)
    total = k_past + n_future + 1
    size = len(process.alphabet)

    if size == 1:
        return BasePath(np.zeros(total, dtype=np.int64), process.alphabet, k_past, n_future, seed)

    if process.kind == "iid":
        symbols = rng.choice(size, size=total, p=process.weights)
        return BasePath(symbols, process.alphabet, k_past, n_future, seed)

    symbols = np.empty(total, dtype=np.int64)
    origin = k_past
    symbols[origin] = rng.choice(size, p=process.stationary)
    forward_cdf = np.cumsum(process.transition, axis=1)
    backward_cdf = np.cumsum(process.reversed_transition, axis=1)
    forward_u = rng.random(n_future)
    backward_u = rng.random(k_past)

    current = symbols[origin]
    for step in range(n_future):
        current = min(int(np.searchsorted(forward_cdf[current], forward_u[step], side='right')), size - 1)
        symbols[origin + step + 1] = current
    current = symbols[origin]
    for step in range(k_past):
        current = min(int(np.searchsorted(backward_cdf[current], backward_u[step], side='right')), size - 1)
        symbols[origin - step - 1] = current
    return BasePath(symbols, process.alphabet, k_past, n_future, seed)


@dataclass
class MixingReport:
    """Upper psi-mixing coefficients and the mean-contraction criterion.

    Attributes:
        psi_upper: psi_U(k) for k = 1..k_max
        e_rho: Mean contraction factor under the base marginal (nan if not evaluated)
        threshold: 1/e_rho - 1
        criterion_ok: psi_U(k_max) < threshold and e_rho < 1
        reason: Why the criterion failed (empty when it holds)
        envelope_rate: Geometric rate fitted to log psi_U (None when psi_U vanishes)
    """
    psi_upper: np.ndarray
    e_rho: float = float("nan")
    threshold: float = float("nan")
    criterion_ok: bool = False
    reason: str = ""
    envelope_rate: Optional[float] = None

    @property
    def k_max(self) -> int:
        return int(self.psi_upper.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'k_max': self.k_max,
            'psi_upper_k_max': float(self.psi_upper[-1]) if self.k_max else 0.0,
            'e_rho': self.e_rho,
            'threshold': self.threshold,
            'criterion_ok': self.criterion_ok,
            'reason': self.reason,
            'envelope_rate': self.envelope_rate,
        }


def psi_upper(process: BaseProcess, k_max: int = DEFAULT_K_MAX) -> np.ndarray:
    """psi_U(k) = max_ij (P^k[i][j] / pi[j] - 1)^+ for k = 1..k_max."""
    if k_max < 1:
        raise BaseProcessError("k_max must be positive", details=f"got {k_max}")
    if process.kind == "iid":
        return np.zeros(k_max)
    if not is_primitive(process.transition):
        raise BaseProcessError("psi-mixing undefined: periodic or reducible chain")
    psi = np.empty(k_max)
    power = process.transition.copy()
    for k in range(k_max):
        ratio = power / process.stationary[None, :] - 1.0
        psi[k] = max(float(ratio.max()), 0.0)
        power = power @ process.transition
    return psi


def fit_geometric_envelope(values: np.ndarray, floor: float = 1e-14) -> Optional[float]:
    """Least-squares rate c in values[k] ~ C c^k over entries above floor."""
    values = np.asarray(values, dtype=float)
    k = np.arange(1, values.shape[0] + 1)
    keep = values > floor
    if keep.sum() < 2:
        return None
    slope, _ = np.polyfit(k[keep], np.log(values[keep]), 1)
    return float(np.exp(slope))


def check_upper_mixing_criterion(process: BaseProcess, rho_values: Dict[str, float],
                                 k_max: int = DEFAULT_K_MAX) -> MixingReport:
    """Evaluate limsup psi_U(k) < 1/E[rho] - 1 using psi_U(k_max) as the limsup proxy."""
    rho = np.empty(len(process.alphabet))
    for i, symbol in enumerate(process.alphabet):
        if symbol not in rho_values:
            raise BaseProcessError(f"No contraction factor given for symbol '{symbol}'")
        value = float(rho_values[symbol])
        if not (0.0 < value <= 1.0):
            raise BaseProcessError(f"Contraction factor for '{symbol}' must be in (0,1]", details=f"got {value}")
        rho[i] = value

    psi = psi_upper(process, k_max)
    e_rho = float(process.marginal @ rho)
    threshold = 1.0 / e_rho - 1.0
    report = MixingReport(psi_upper=psi, e_rho=e_rho, threshold=threshold,
                          envelope_rate=fit_geometric_envelope(psi))
    if e_rho >= 1.0:
        report.reason = "mean contraction not < 1"
        return report
    report.criterion_ok = bool(psi[-1] < threshold)
    if not report.criterion_ok:
        report.reason = f"psi_U({k_max}) = {psi[-1]:.6g} is not below {threshold:.6g}"
    return report


# ==================== FIBER MAPS ====================

MAP_FAMILIES = ("beta", "lasota_yorke", "mixed")
COVER_TOL: float = 1e-9


@dataclass(frozen=True)
class Branch:
    """One full branch of an interval map, onto [0,1).

    Affine branches use ``scale`` (the slope magnitude). Curved branches
    have inverse y(s) = left + length * (s + curvature * s * (1 - s)),
    which keeps an exact closed form for both directions.
    """
    left: float
    right: float
    scale: float
    increasing: bool = True
    curvature: float = 0.0
    slack: bool = False

    @property
    def length(self) -> float:
        return self.right - self.left

    @property
    def affine(self) -> bool:
        return self.curvature == 0.0

    def image(self, x: np.ndarray) -> np.ndarray:
        if self.affine:
            s = (x - self.left) * self.scale
        else:
            u = (x - self.left) / self.length
            k = self.curvature
            s = 2.0 * u / ((1.0 + k) + np.sqrt((1.0 + k) ** 2 - 4.0 * k * u))
        return s if self.increasing else 1.0 - s

    def inverse(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if not self.increasing:
            s = 1.0 - s
        if self.affine:
            return self.left + s / self.scale
        return self.left + self.length * (s + self.curvature * s * (1.0 - s))

    def inverse_derivative(self, s: np.ndarray) -> np.ndarray:
        """|dy/ds| of the inverse branch."""
        s = np.asarray(s, dtype=float)
        if self.affine:
            return np.full(s.shape, 1.0 / self.scale)
        if not self.increasing:
            s = 1.0 - s
        return self.length * (1.0 + self.curvature * (1.0 - 2.0 * s))

    @property
    def min_expansion(self) -> float:
        if self.affine:
            return self.scale
        return 1.0 / (self.length * (1.0 + abs(self.curvature)))

    @property
    def max_inverse_lipschitz(self) -> float:
        return 1.0 / self.min_expansion


@dataclass(frozen=True, eq=False)
class FiberMap:
    """Full-branch piecewise monotone map of [0,1).

    Attributes:
        symbol: Base symbol this map belongs to
        family: Generating family name
        params: Family parameters as given in the config
        branches: Branches in left-to-right order
    """
    symbol: str
    family: str
    params: Dict[str, Any]
    branches: Tuple[Branch, ...]

    def __post_init__(self):
        lefts = np.array([b.left for b in self.branches])
        lefts.flags.writeable = False
        object.__setattr__(self, "_lefts", lefts)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def preserves_lebesgue(self) -> bool:
        """Affine full branches push Lebesgue measure to itself."""
        return all(b.affine for b in self.branches)

    @property
    def cache_key(self) -> str:
        canonical = json.dumps({'family': self.family, 'params': self.params}, sort_keys=True, default=float)
        return hashlib.md5(canonical.encode()).hexdigest()

    def branch_of(self, x: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self._lefts, x, side='right') - 1
        return np.clip(idx, 0, self.n_branches - 1)

    def apply(self, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """Evaluate the map; 1.0 is folded to 0.0 and results stay in [0,1)."""
        scalar = np.isscalar(x)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not np.all((x >= 0.0) & (x <= 1.0)):
            bad = x[~((x >= 0.0) & (x <= 1.0))][0]
            raise DomainError("State outside [0,1)", details=f"got {bad!r} for map '{self.symbol}'")
        x = np.where(x == 1.0, 0.0, x)

        idx = self.branch_of(x)
        out = np.empty_like(x)
        for i, branch in enumerate(self.branches):
            mask = idx == i
            if mask.any():
                out[mask] = branch.image(x[mask])
        out = np.where(out >= 1.0, out - 1.0, out)
        out = np.clip(out, 0.0, None)
        return float(out[0]) if scalar else out

    def inverse(self, branch: int, s: np.ndarray) -> np.ndarray:
        return self.branches[branch].inverse(s)

    def inverse_derivative(self, branch: int, s: np.ndarray) -> np.ndarray:
        return self.branches[branch].inverse_derivative(s)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        """|T'(x)|."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = self.branch_of(x)
        out = np.empty_like(x)
        for i, branch in enumerate(self.branches):
            mask = idx == i
            if mask.any():
                s = branch.image(x[mask])
                out[mask] = 1.0 / branch.inverse_derivative(s if branch.increasing else 1.0 - s)
        return out


def build_map(symbol: str, record: Dict[str, Any]) -> FiberMap:
    """Build a fiber map from a symbol record ``{"family": ..., **params}``.

    Families:
        beta: x -> beta*x mod 1 with integer beta >= 2
        lasota_yorke: affine full branches from breakpoints and signed slopes
        mixed: q curved slack branches (inverse Lipschitz l) followed by
            d-q affine branches of slope eta
    """
    family = record.get("family")
    params = {k: v for k, v in record.items() if k != "family"}

    if family == "beta":
        beta = params.get("beta")
        if beta is None or float(beta) != int(float(beta)) or int(float(beta)) < 2:
            raise MapDefinitionError(f"Map '{symbol}': beta must be an integer >= 2", details=f"got {beta!r}")
        beta = int(float(beta))
        branches = tuple(
            Branch(left=k / beta, right=(k + 1) / beta if k < beta - 1 else 1.0, scale=float(beta))
            for k in range(beta)
        )
        return FiberMap(symbol, family, {'beta': beta}, branches)

    if family == "lasota_yorke":
        breakpoints = np.asarray(params.get("breakpoints", []), dtype=float)
        slopes = np.asarray(params.get("slopes", []), dtype=float)
        if breakpoints.ndim != 1 or breakpoints.size < 2 or slopes.size != breakpoints.size - 1:
            raise MapDefinitionError(f"Map '{symbol}': need len(breakpoints) == len(slopes) + 1")
        if breakpoints[0] != 0.0 or breakpoints[-1] != 1.0 or (np.diff(breakpoints) <= 0).any():
            raise MapDefinitionError(f"Map '{symbol}': breakpoints must increase from 0 to 1",
                                     details=str(breakpoints.tolist()))
        branches = []
        for i, slope in enumerate(slopes):
            if slope == 0.0 or not np.isfinite(slope):
                raise MapDefinitionError(f"Map '{symbol}': slope must be finite and nonzero",
                                         details=f"branch {i} has slope {slope}")
            left, right = float(breakpoints[i]), float(breakpoints[i + 1])
            if abs(abs(slope) * (right - left) - 1.0) > COVER_TOL:
                raise MapDefinitionError(f"Map '{symbol}': branch does not cover [0,1)",
                                         details=f"branch {i} on [{left}, {right}) with slope {slope}")
            branches.append(Branch(left=left, right=right, scale=abs(float(slope)), increasing=slope > 0))
        return FiberMap(symbol, family, {'breakpoints': breakpoints.tolist(), 'slopes': slopes.tolist()},
                        tuple(branches))

    if family == "mixed":
        try:
            q, d = int(params["q"]), int(params["d"])
            l_const, eta = float(params["l"]), float(params["eta"])
        except KeyError as e:
            raise MapDefinitionError(f"Map '{symbol}': mixed family needs q, d, l, eta",
                                     details=f"missing {e}") from None
        if q < 0 or d < 1:
            raise MapDefinitionError(f"Map '{symbol}': need 0 <= q and d >= 1")
        if q >= d:
            raise MapDefinitionError(f"Map '{symbol}': no expanding branches", details=f"q={q}, d={d}")
        if eta <= 1.0:
            raise MapDefinitionError(f"Map '{symbol}': claimed expanding branch not expanding",
                                     details=f"eta={eta}")
        expanding_room = (d - q) / eta
        if q == 0:
            if abs(expanding_room - 1.0) > COVER_TOL:
                raise MapDefinitionError(f"Map '{symbol}': branch does not cover [0,1)",
                                         details=f"d/eta = {expanding_room}")
            slack_length, curvature = 0.0, 0.0
        else:
            slack_length = (1.0 - expanding_room) / q
            if slack_length <= 0.0:
                raise MapDefinitionError(f"Map '{symbol}': expanding branches leave no room for slack branches",
                                         details=f"(d-q)/eta = {expanding_room}")
            curvature = l_const / slack_length - 1.0
            if not (0.0 <= curvature < 1.0):
                raise MapDefinitionError(
                    f"Map '{symbol}': l must lie in [{slack_length:.6g}, {2 * slack_length:.6g})",
                    details=f"got l={l_const}")
        branches = []
        left = 0.0
        for _ in range(q):
            right = left + slack_length
            branches.append(Branch(left=left, right=right, scale=1.0 / slack_length,
                                   curvature=curvature, slack=True))
            left = right
        for i in range(d - q):
            right = 1.0 if i == d - q - 1 else left + 1.0 / eta
            branches.append(Branch(left=left, right=right, scale=eta))
            left = right
        return FiberMap(symbol, family, {'q': q, 'd': d, 'l': l_const, 'eta': eta}, tuple(branches))

    raise MapDefinitionError(f"Map '{symbol}': unknown family '{family}'",
                             details=f"expected one of {', '.join(MAP_FAMILIES)}")


def branch_constants(fmap: FiberMap) -> Tuple[int, int, float, float]:
    """(q, d, l, eta): slack count, branch count, max slack inverse Lipschitz, min expansion."""
    slack = [b for b in fmap.branches if b.slack or b.min_expansion <= 1.0]
    expanding = [b for b in fmap.branches if not (b.slack or b.min_expansion <= 1.0)]
    l_const = max((b.max_inverse_lipschitz for b in slack), default=0.0)
    eta = min((b.min_expansion for b in expanding), default=float("nan"))
    return len(slack), fmap.n_branches, l_const, eta


def a_omega(q: int, l_const: float, d: int, eta: float, alpha: float = 1.0) -> float:
    """(q l^alpha + (d-q) eta^-alpha) / d."""
    if not (0.0 < alpha <= 1.0):
        raise MapDefinitionError("Hoelder exponent must be in (0,1]", details=f"got {alpha}")
    if q >= d:
        raise MapDefinitionError("no expanding branches", details=f"q={q}, d={d}")
    if not eta > 1.0:
        raise MapDefinitionError("claimed expanding branch not expanding", details=f"eta={eta}")
    return (q * l_const ** alpha + (d - q) * eta ** (-alpha)) / d


def b_constant(s_omega: float) -> float:
    """12 (1 + 2/s)^4."""
    if s_omega <= 0:
        raise MapDefinitionError("s_omega must be positive", details=f"got {s_omega}")
    return 12.0 * (1.0 + 2.0 / s_omega) ** 4


@dataclass
class ExpansionReport:
    """Dominating-expansion constants of one symbol's map."""
    symbol: str
    q: int
    d: int
    l: float
    eta: float
    alpha: float
    a_omega: float
    epsilon: float
    s_omega: float
    H_omega: float
    B_omega: float
    contraction_ok: bool
    weight: float = float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def expansion_report(maps: Dict[str, FiberMap], probabilities: Dict[str, float], alpha: float,
                     osc: Dict[str, float], holder_H: Dict[str, float]) -> Dict[str, ExpansionReport]:
    """Per-symbol a_omega, s_omega = e^eps a_omega and B_omega."""
    reports = {}
    for symbol, fmap in maps.items():
        epsilon = float(osc.get(symbol, 0.0))
        h_const = float(holder_H.get(symbol, 0.0))
        if epsilon < 0 or h_const < 0:
            raise MapDefinitionError(f"Symbol '{symbol}': oscillation and Hoelder constant must be >= 0")
        q, d, l_const, eta = branch_constants(fmap)
        a_value = a_omega(q, l_const, d, eta, alpha)
        s_value = math.exp(epsilon) * a_value
        reports[symbol] = ExpansionReport(
            symbol=symbol, q=q, d=d, l=l_const, eta=eta, alpha=alpha, a_omega=a_value,
            epsilon=epsilon, s_omega=s_value, H_omega=h_const, B_omega=b_constant(s_value),
            contraction_ok=s_value < 1.0, weight=float(probabilities.get(symbol, float("nan"))))
    return reports


def mean_expansion_factor(reports: Dict[str, ExpansionReport]) -> float:
    """Probability-weighted mean of a_omega."""
    return float(sum(r.weight * r.a_omega for r in reports.values()))


def holder_clause_pairs(reports: Dict[str, ExpansionReport], path: BasePath) -> pd.DataFrame:
    """Check e^eps_w H_w <= (1/s_{next} - 1) / (1 + 1/s_w) over consecutive path symbols."""
    indices = path.symbols
    pairs: Dict[Tuple[str, str], int] = {}
    for a, b in zip(indices[:-1], indices[1:]):
        key = (path.alphabet[a], path.alphabet[b])
        pairs[key] = pairs.get(key, 0) + 1
    rows = []
    for (current, following), count in sorted(pairs.items()):
        r, r_next = reports[current], reports[following]
        lhs = math.exp(r.epsilon) * r.H_omega
        rhs = (1.0 / r_next.s_omega - 1.0) / (1.0 + 1.0 / r.s_omega)
        rows.append({'symbol': current, 'next_symbol': following, 'count': count,
                     'lhs': lhs, 'rhs': rhs, 'ok': bool(lhs <= rhs)})
    return pd.DataFrame(rows, columns=['symbol', 'next_symbol', 'count', 'lhs', 'rhs', 'ok'])


@dataclass
class TameBoundEstimate:
    """R(omega) = sup_n a_n B(sigma^n omega) on a finite sample."""
    R_hat: float
    argmax_n: int
    moment_bound: float
    q: float


def tame_B(b_values: Sequence[float], a_n: Sequence[float], q: float,
           n_values: Optional[Sequence[int]] = None) -> TameBoundEstimate:
    """Max of a_n B_n (n = 1, 2, ... unless n_values given) and the bound mean(B^q) * sum a_n^q."""
    b_values = np.asarray(b_values, dtype=float)
    a_n = np.asarray(a_n, dtype=float)
    if b_values.size == 0:
        raise EstimationError("tame_B needs at least one sample")
    if a_n.shape != b_values.shape:
        raise EstimationError("b_values and a_n must have the same length",
                              details=f"{b_values.shape} vs {a_n.shape}")
    if (a_n <= 0).any() or q <= 0:
        raise EstimationError("a_n must be positive and q > 0")
    n_values = np.arange(1, b_values.size + 1) if n_values is None else np.asarray(n_values)
    products = a_n * b_values
    best = int(np.argmax(products))
    bound = float(np.mean(b_values ** q) * np.sum(a_n ** q))
    return TameBoundEstimate(R_hat=float(products[best]), argmax_n=int(n_values[best]),
                             moment_bound=bound, q=float(q))


# ==================== OBSERVABLES ====================

OBSERVABLE_FORMULAS = ("zero", "constant", "x", "x_minus_half", "cos2pi", "sin2pi",
                       "poly", "symbol_scaled", "coboundary", "combination")


@dataclass(frozen=True)
class ComponentFormula:
    """One scalar component from the named formula library."""
    formula: str
    params: Dict[str, Any] = field(default_factory=dict, hash=False)
    scale: float = 1.0

    def __post_init__(self):
        if self.formula not in OBSERVABLE_FORMULAS:
            raise ConfigurationError(f"Unknown observable formula '{self.formula}'",
                                     details=f"expected one of {', '.join(OBSERVABLE_FORMULAS)}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ComponentFormula':
        data = dict(data)
        formula = data.pop("formula", None)
        scale = float(data.pop("scale", 1.0))
        if formula == "combination":
            data["terms"] = [[float(c), cls.from_dict(t) if isinstance(t, dict) else t]
                             for c, t in data.get("terms", [])]
        elif formula == "symbol_scaled" and isinstance(data.get("inner"), dict):
            data["inner"] = cls.from_dict(data["inner"])
        return cls(formula=formula, params=data, scale=scale)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {'formula': self.formula}
        for key, value in self.params.items():
            if isinstance(value, ComponentFormula):
                value = value.to_dict()
            elif key == "terms":
                value = [[c, t.to_dict()] for c, t in value]
            out[key] = value
        if self.scale != 1.0:
            out['scale'] = self.scale
        return out

    def evaluate(self, fmap: FiberMap, x: np.ndarray) -> np.ndarray:
        return self.scale * self._raw(fmap, x)

    def _raw(self, fmap: FiberMap, x: np.ndarray) -> np.ndarray:
        p = self.params
        name = self.formula
        if name == "zero":
            return np.zeros_like(x)
        if name == "constant":
            return np.full_like(x, float(p.get("value", 0.0)))
        if name == "x":
            return np.array(x, dtype=float)
        if name == "x_minus_half":
            return x - 0.5
        if name == "cos2pi":
            return np.cos(2.0 * np.pi * float(p.get("frequency", 1)) * x)
        if name == "sin2pi":
            return np.sin(2.0 * np.pi * float(p.get("frequency", 1)) * x)
        if name == "poly":
            return np.polynomial.polynomial.polyval(x, np.asarray(p.get("coefficients", [0.0]), dtype=float))
        if name == "symbol_scaled":
            coefficient = float(p.get("coefficients", {}).get(fmap.symbol, 1.0))
            return coefficient * p["inner"].evaluate(fmap, x)
        if name == "coboundary":
            coefficients = np.asarray(p.get("coefficients", [0.0, 1.0, -1.0]), dtype=float)
            polyval = np.polynomial.polynomial.polyval
            return polyval(x, coefficients) - polyval(fmap.apply(x), coefficients)
        # combination
        total = np.zeros_like(x, dtype=float)
        for coefficient, term in p.get("terms", []):
            total = total + coefficient * term.evaluate(fmap, x)
        return total


@dataclass(frozen=True, eq=False)
class Observable:
    """Vector observable v(symbol, x) built from library formulas."""
    name: str
    components: Tuple[ComponentFormula, ...]

    centered = False

    @classmethod
    def from_formulas(cls, *formulas: str, name: Optional[str] = None) -> 'Observable':
        comps = tuple(ComponentFormula(f) for f in formulas)
        return cls(name or "+".join(formulas), comps)

    @classmethod
    def from_config(cls, data: Dict[str, Any]) -> 'Observable':
        comps = data.get("components", [])
        if not comps:
            raise ConfigurationError("Observable needs at least one component", field="observable.components")
        return cls(data.get("name", "v"), tuple(ComponentFormula.from_dict(c) for c in comps))

    @classmethod
    def linear_combination(cls, terms: Sequence[Tuple[float, 'Observable']], name: str = "combination") -> 'Observable':
        dims = {obs.dim for _, obs in terms}
        if len(dims) != 1:
            raise EstimationError("Cannot combine observables of different dimensions", details=str(sorted(dims)))
        dim = dims.pop()
        comps = tuple(
            ComponentFormula("combination", {'terms': [[float(c), obs.components[i]] for c, obs in terms]})
            for i in range(dim)
        )
        return cls(name, comps)

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'components': [c.to_dict() for c in self.components]}

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def base_observable(self) -> 'Observable':
        return self

    def evaluate(self, fmap: FiberMap, x: np.ndarray) -> np.ndarray:
        """Values at states x, shape (len(x), dim)."""
        x = np.asarray(x, dtype=float)
        return np.stack([c.evaluate(fmap, x) for c in self.components], axis=-1)

    def at(self, j: int, fmap: FiberMap, x: np.ndarray) -> np.ndarray:
        return self.evaluate(fmap, x)

    def offsets_for(self, indices: np.ndarray) -> np.ndarray:
        return np.zeros((len(indices), self.dim))

    def scaled(self, c: float) -> 'Observable':
        comps = tuple(ComponentFormula(comp.formula, comp.params, comp.scale * c) for comp in self.components)
        return Observable(f"{c}*{self.name}", comps)

    def stack(self, other: 'Observable') -> 'Observable':
        return Observable(f"({self.name},{other.name})", self.components + other.components)


@dataclass(frozen=True, eq=False)
class CenteredObservable:
    """Observable minus its fiber means over a path index range.

    Attributes:
        base: The raw observable
        first_index: Path index of offsets[0]
        offsets: Fiber means, shape (n_indices, dim)
    """
    base: Observable
    first_index: int
    offsets: np.ndarray

    centered = True

    @property
    def name(self) -> str:
        return self.base.name

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def base_observable(self) -> Observable:
        return self.base

    @property
    def last_index(self) -> int:
        return self.first_index + self.offsets.shape[0] - 1

    def _check(self, start: int, stop: int):
        if start < self.first_index or stop > self.last_index:
            raise PathWindowError(
                f"Observable centered on [{self.first_index}, {self.last_index}] but [{start}, {stop}] requested")

    def offsets_for(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        if indices.size:
            self._check(int(indices.min()), int(indices.max()))
        return self.offsets[indices - self.first_index]

    def at(self, j: int, fmap: FiberMap, x: np.ndarray) -> np.ndarray:
        self._check(j, j)
        return self.base.evaluate(fmap, x) - self.offsets[j - self.first_index]

    def scaled(self, c: float) -> 'CenteredObservable':
        return CenteredObservable(self.base.scaled(c), self.first_index, self.offsets * c)


AnyObservable = Union[Observable, CenteredObservable]

# ==================== TRANSFER ENGINE ====================

OVERLAP_EPS: float = 1e-12              # relative to bin width
MASKED_FRACTION_WARNING: float = 0.10


def bin_midpoints(n_bins: int) -> np.ndarray:
    return (np.arange(n_bins) + 0.5) / n_bins


def bin_of(x: np.ndarray, n_bins: int) -> np.ndarray:
    return np.minimum((np.asarray(x) * n_bins).astype(np.int64), n_bins - 1)


@dataclass(frozen=True, eq=False)
class UlamOperator:
    """Row-stochastic Ulam matrix, row-indexed by source bin."""
    n_bins: int
    entries: sparse.csr_matrix
    symbol: str = ""

    def __post_init__(self):
        pushforward = self.entries.T.tocsr()
        pushforward.data.flags.writeable = False
        self.entries.data.flags.writeable = False
        object.__setattr__(self, "_pushforward", pushforward)

    def push(self, mass: np.ndarray) -> np.ndarray:
        """out[j] = sum_i mass[i] entries[i][j]; trailing axes are pushed columnwise."""
        if mass.shape[0] != self.n_bins:
            raise EstimationError("Dimension mismatch in push",
                                  details=f"operator has {self.n_bins} bins, input has {mass.shape[0]}")
        return self._pushforward @ mass

    def pull(self, values: np.ndarray) -> np.ndarray:
        """Bin averages of f o T for bin-constant f: out[i] = sum_j entries[i][j] values[j]."""
        if values.shape[0] != self.n_bins:
            raise EstimationError("Dimension mismatch in pull",
                                  details=f"operator has {self.n_bins} bins, input has {values.shape[0]}")
        return self.entries @ values

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.entries.sum(axis=1)).ravel()

    def to_dense(self) -> np.ndarray:
        return self.entries.toarray()


@dataclass(frozen=True, eq=False)
class Density:
    """Probability mass per bin."""
    n_bins: int
    mass: np.ndarray

    @classmethod
    def uniform(cls, n_bins: int) -> 'Density':
        return cls(n_bins, np.full(n_bins, 1.0 / n_bins))

    @property
    def values(self) -> np.ndarray:
        """Density values (mass times N)."""
        return self.mass * self.n_bins

    def total(self) -> float:
        return float(self.mass.sum())


def ulam_matrix(fmap: FiberMap, n_bins: int) -> UlamOperator:
    """Ulam discretization entries[i][j] = Leb(B_i ∩ T^-1 B_j) / Leb(B_i).

    Every built-in branch has a closed-form inverse, so preimages of the
    target bin edges are exact and no quadrature is needed.
    """
    if n_bins < 2:
        raise EstimationError("n_bins must be >= 2", details=f"got {n_bins}")
    n = n_bins
    grid = np.arange(n + 1) / n
    targets = np.arange(n)
    rows, cols, vals = [], [], []

    for branch in fmap.branches:
        pre = branch.inverse(grid)
        lo_edge, hi_edge = (pre[:-1], pre[1:]) if branch.increasing else (pre[1:], pre[:-1])
        first = np.clip(np.floor(lo_edge * n).astype(np.int64), 0, n - 1)
        last = np.clip(np.ceil(hi_edge * n).astype(np.int64) - 1, first, n - 1)
        for offset in range(int((last - first).max()) + 1):
            source = first + offset
            overlap = np.minimum(hi_edge, (source + 1) / n) - np.maximum(lo_edge, source / n)
            keep = (source <= last) & (overlap > OVERLAP_EPS / n)
            rows.append(source[keep])
            cols.append(targets[keep])
            vals.append(overlap[keep] * n)

    entries = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    entries.sum_duplicates()
    sums = np.asarray(entries.sum(axis=1)).ravel()
    if (sums <= 0).any():
        raise MapDefinitionError(f"Map '{fmap.symbol}' leaves bins without image mass")
    drift = float(np.abs(sums - 1.0).max())
    if drift > STOCHASTIC_TOL and logger.isEnabledFor(logging.DEBUG):
        logger.debug(f"Ulam rows for '{fmap.symbol}' (N={n}) renormalized, max drift {drift:.3e}")
    entries = (sparse.diags(1.0 / sums) @ entries).tocsr()
    return UlamOperator(n, entries, fmap.symbol)


def push_density(op: UlamOperator, d: Density) -> Density:
    if d.n_bins != op.n_bins:
        raise EstimationError("Dimension mismatch in push_density",
                              details=f"operator has {op.n_bins} bins, density has {d.n_bins}")
    return Density(op.n_bins, op.push(d.mass))


class UlamCache:
    """
    Thread-safe LRU cache of Ulam operators.

    Keys are the md5 of (canonical map parameters, n_bins). With a cache
    directory, matrices are also written as ``ulam_<key>.npz`` and reloaded
    on later runs. Cached matrices are read-only and shared across workers.
    """

    def __init__(self, max_size: int = DEFAULT_CACHE_SIZE, cache_dir: Optional[Union[str, Path]] = None,
                 logger: Optional[logging.Logger] = None):
        """
        Initialize Ulam cache

        Args:
            max_size: Maximum number of in-memory operators, >= 1
            cache_dir: Optional directory for the on-disk layer
            logger: Logger instance for cache statistics (default: module logger)
        """
        if max_size < 1:
            raise ConfigurationError("UlamCache max_size must be >= 1", details=f"got {max_size}")
        self.max_size = max_size
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.logger = logger or logging.getLogger(__name__)

        self._cache: Dict[str, UlamOperator] = {}
        self._access: Dict[str, int] = {}
        self._tick = 0
        self._lock = threading.Lock()

        self._hits = 0
        self._disk_hits = 0
        self._misses = 0
        self._evictions = 0

        self.logger.debug(f"UlamCache initialized: max_size={max_size}, cache_dir={self.cache_dir}")

    @staticmethod
    def make_key(fmap: FiberMap, n_bins: int) -> str:
        return hashlib.md5(f"{fmap.cache_key}:{int(n_bins)}".encode()).hexdigest()

    def get(self, fmap: FiberMap, n_bins: int) -> Tuple[Optional[UlamOperator], str]:
        """Return (operator or None, key)."""
        key = self.make_key(fmap, n_bins)
        with self._lock:
            op = self._cache.get(key)
            if op is not None:
                self._tick += 1
                self._access[key] = self._tick
                self._hits += 1
                return UlamOperator(op.n_bins, op.entries, fmap.symbol), key

        if self.cache_dir is not None:
            path = self.cache_dir / f"ulam_{key}.npz"
            if path.exists():
                try:
                    op = UlamOperator(n_bins, sparse.load_npz(path).tocsr(), fmap.symbol)
                except (OSError, ValueError) as e:
                    self.logger.warning(f"Ignoring unreadable cached operator {path}: {e}")
                else:
                    with self._lock:
                        self._disk_hits += 1
                    self.put(key, op)
                    return op, key

        with self._lock:
            self._misses += 1
        return None, key

    def put(self, key: str, op: UlamOperator, persist: bool = False):
        """Store an operator; evicts the least recently used entry when full."""
        with self._lock:
            if len(self._cache) >= self.max_size and key not in self._cache:
                self._evict_lru()
            self._cache[key] = op
            self._tick += 1
            self._access[key] = self._tick

        if persist and self.cache_dir is not None:
            try:
                self.cache_dir.mkdir(parents=True, exist_ok=True)
                sparse.save_npz(self.cache_dir / f"ulam_{key}.npz", op.entries)
            except OSError as e:
                self.logger.warning(f"Could not persist Ulam operator to {self.cache_dir}: {e}")

    def get_or_build(self, fmap: FiberMap, n_bins: int) -> UlamOperator:
        op, key = self.get(fmap, n_bins)
        if op is None:
            op = ulam_matrix(fmap, n_bins)
            self.put(key, op, persist=True)
        return op

    def _evict_lru(self):
        if not self._access:
            return
        lru_key = min(self._access.items(), key=lambda x: x[1])[0]
        del self._cache[lru_key]
        del self._access[lru_key]
        self._evictions += 1
        if self.logger.isEnabledFor(logging.DEBUG):
            self.logger.debug(f"UlamCache EVICT (total evictions: {self._evictions})")

    def get_statistics(self) -> Dict[str, Any]:
        with self._lock:
            total_requests = self._hits + self._disk_hits + self._misses
            hit_rate = ((self._hits + self._disk_hits) / total_requests * 100) if total_requests > 0 else 0
            return {
                'hits': self._hits,
                'disk_hits': self._disk_hits,
                'misses': self._misses,
                'hit_rate': hit_rate,
                'size': len(self._cache),
                'max_size': self.max_size,
                'evictions': self._evictions,
                'total_requests': total_requests
            }

    def clear(self):
        """Clear in-memory entries (the disk layer is kept)."""
        with self._lock:
            self._cache.clear()
            self._access.clear()
        self.logger.debug("UlamCache cleared")

    def log_statistics(self):
        stats_dict = self.get_statistics()
        if stats_dict['total_requests'] == 0:
            return
        self.logger.debug(
            f"UlamCache: {stats_dict['hits']} hits, {stats_dict['disk_hits']} disk hits, "
            f"{stats_dict['misses']} misses ({stats_dict['hit_rate']:.1f}% hit rate), "
            f"{stats_dict['size']}/{stats_dict['max_size']} entries")


class FiberSystem:
    """Fiber maps plus their Ulam operators at one resolution.

    Operators are built once at construction and shared read-only.
    """

    def __init__(self, maps: Dict[str, FiberMap], n_bins: int = DEFAULT_N_BINS,
                 cache: Optional[UlamCache] = None):
        if not maps:
            raise MapDefinitionError("FiberSystem needs at least one map")
        self.maps = dict(maps)
        self.n_bins = n_bins
        self.cache = cache or UlamCache()
        self._operators = {symbol: self.cache.get_or_build(fmap, n_bins) for symbol, fmap in self.maps.items()}

    def check_alphabet(self, alphabet: Sequence[str]):
        missing = [s for s in alphabet if s not in self.maps]
        if missing:
            raise MapDefinitionError("No fiber map for base symbol(s)", details=", ".join(missing))

    def operator(self, symbol: str) -> UlamOperator:
        return self._operators[symbol]

    def map_at(self, path: BasePath, j: int) -> FiberMap:
        return self.maps[path.symbol(j)]

    def operator_at(self, path: BasePath, j: int) -> UlamOperator:
        return self._operators[path.symbol(j)]

    def with_n_bins(self, n_bins: int) -> 'FiberSystem':
        return FiberSystem(self.maps, n_bins, self.cache)

    def preserves_lebesgue(self, symbols: Optional[Sequence[str]] = None) -> bool:
        symbols = self.maps.keys() if symbols is None else symbols
        return all(self.maps[s].preserves_lebesgue for s in symbols)


class DensityTrack:
    """Equivariant densities h_j for path indices start..stop.

    h_start is the uniform density pushed through the ``k_pullback``
    operators before ``start``; later densities follow by pushing forward.
    Only every ``stride``-th density is stored, and one chunk between
    checkpoints is recomputed on demand. Paths of Lebesgue-preserving maps
    short-circuit to the uniform density.
    """

    def __init__(self, system: FiberSystem, path: BasePath, start: int, stop: int,
                 k_pullback: int = DEFAULT_K_PULLBACK, stride: Optional[int] = None):
        if stop < start:
            raise PathWindowError("Density track needs stop >= start", details=f"[{start}, {stop}]")
        if k_pullback < 0:
            raise PathWindowError("k_pullback must be nonnegative")
        path.require(start - k_pullback, stop, "density track")
        self.system = system
        self.path = path
        self.start = start
        self.stop = stop
        self.k_pullback = k_pullback
        self.n_bins = system.n_bins
        self.stride = stride or max(1, int(math.ceil(math.sqrt(stop - start + 1))))
        self._lock = threading.Lock()
        self._chunk_index: Optional[int] = None
        self._chunk: List[np.ndarray] = []

        used = {path.alphabet[i] for i in np.unique(path.indices(start - k_pullback, stop + 1))}
        self.lebesgue = system.preserves_lebesgue(sorted(used))
        uniform = np.full(self.n_bins, 1.0 / self.n_bins)
        uniform.flags.writeable = False
        self._uniform = uniform
        self._checkpoints: List[np.ndarray] = []
        if self.lebesgue:
            return

        h = uniform.copy()
        for i in range(start - k_pullback, start):
            h = self._step(i, h)
        for j in range(start, stop + 1):
            if (j - start) % self.stride == 0:
                self._checkpoints.append(h)
            if j < stop:
                h = self._step(j, h)

    def _step(self, j: int, h: np.ndarray) -> np.ndarray:
        out = self.system.operator_at(self.path, j).push(h)
        return out / out.sum()

    def covers(self, start: int, stop: int) -> bool:
        return self.start <= start and stop <= self.stop

    def require(self, start: int, stop: int, what: str = "densities"):
        if not self.covers(start, stop):
            raise PathWindowError(f"{what}: densities cover [{self.start}, {self.stop}], need [{start}, {stop}]")

    def mass(self, j: int) -> np.ndarray:
        """Read-only probability mass per bin at path index j."""
        self.require(j, j)
        if self.lebesgue:
            return self._uniform
        chunk, offset = divmod(j - self.start, self.stride)
        with self._lock:
            if self._chunk_index != chunk:
                h = self._checkpoints[chunk]
                first = self.start + chunk * self.stride
                masses = [h]
                for i in range(first, min(first + self.stride - 1, self.stop)):
                    h = self._step(i, h)
                    masses.append(h)
                for m in masses:
                    m.flags.writeable = False
                self._chunk, self._chunk_index = masses, chunk
            return self._chunk[offset]

    def density(self, j: int) -> Density:
        return Density(self.n_bins, self.mass(j))

    def valid_bins(self, j: int) -> np.ndarray:
        return self.mass(j) * self.n_bins >= DENSITY_FLOOR

    def __iter__(self) -> Iterator[Tuple[int, np.ndarray]]:
        for j in range(self.start, self.stop + 1):
            yield j, self.mass(j)


def equivariant_density(system: FiberSystem, path: BasePath, k_pullback: int = DEFAULT_K_PULLBACK) -> Density:
    """Density at index 0: uniform pushed through the operators at -k_pullback..-1."""
    return DensityTrack(system, path, 0, 0, k_pullback).density(0)


def pullback_refinement(system: FiberSystem, path: BasePath, k_max: int) -> np.ndarray:
    """||h^(k+1) - h^(k)||_1 at index 0 for k = 0..k_max-1."""
    path.require(-k_max, 0, "pullback refinement")
    masses = [equivariant_density(system, path, k).mass for k in range(k_max + 1)]
    return np.array([np.abs(masses[k + 1] - masses[k]).sum() for k in range(k_max)])


def operator_cocycle(system: FiberSystem, path: BasePath, start: int, n: int) -> UlamOperator:
    """Product of the n Ulam matrices at indices start..start+n-1, in path order."""
    if n < 0:
        raise EstimationError("Cocycle length must be nonnegative")
    if n == 0:
        return UlamOperator(system.n_bins, sparse.identity(system.n_bins, format='csr'), "identity")
    path.require(start, start + n - 1, "operator cocycle")
    product = system.operator_at(path, start).entries
    for j in range(start + 1, start + n):
        product = product @ system.operator_at(path, j).entries
    product = product.tocsr()
    drift = float(np.abs(np.asarray(product.sum(axis=1)).ravel() - 1.0).max())
    if drift > 1e-10:
        raise EstimationError("Cocycle lost row-stochasticity", details=f"max row-sum drift {drift:.3e}")
    return UlamOperator(system.n_bins, product, "cocycle")


def fiber_values(v: 'AnyObservable', system: FiberSystem, path: BasePath, j: int) -> np.ndarray:
    """Observable at bin midpoints of fiber j, shape (N, dim)."""
    return v.at(j, system.map_at(path, j), bin_midpoints(system.n_bins))


@dataclass
class DecayProfile:
    """Sup-norm decay of transferred observables along a path.

    Attributes:
        n_values: 1..n_max
        sup_deviation: max over bins of |L^(n) phi / h_n - mean|
        fitted_rate: Geometric rate from the log-linear fit (0.0 when every deviation is below the floor)
        fitted_K: Fit intercept
        mean: Integral of phi against the starting density
        excluded_bins: Masked bins per n
        masked_warning: More than 10% of bins masked at some n
        converged: Fit produced a rate below 1
        phi_scale: max |phi| over bins at the start index
    """
    n_values: np.ndarray
    sup_deviation: np.ndarray
    fitted_rate: float
    fitted_K: float
    mean: float
    excluded_bins: np.ndarray
    masked_warning: bool
    converged: bool
    phi_scale: float = 1.0

    @property
    def relative_K(self) -> float:
        """Intercept per unit sup norm of phi."""
        return self.fitted_K / self.phi_scale if self.phi_scale > 0 else 0.0

    def tail_sum(self, k: int) -> float:
        """relative_K * sum_{n>k} rate^n (inf when the fit did not converge)."""
        if self.fitted_rate == 0.0:
            return 0.0
        if not self.converged:
            return float("inf")
        return self.relative_K * self.fitted_rate ** (k + 1) / (1.0 - self.fitted_rate)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'n': self.n_values, 'sup_deviation': self.sup_deviation,
                             'excluded_bins': self.excluded_bins})


def fit_decay(n_values: np.ndarray, deviations: np.ndarray,
              floor: float = DEFAULT_DECAY_FIT_FLOOR) -> Tuple[float, float, bool]:
    """Least squares on log deviation; returns (rate, K, converged)."""
    keep = deviations > floor
    if keep.sum() < 2:
        return 0.0, float(deviations[keep][0]) if keep.any() else 0.0, True
    slope, intercept = np.polyfit(n_values[keep], np.log(deviations[keep]), 1)
    rate, k_const = float(np.exp(slope)), float(np.exp(intercept))
    return rate, k_const, bool(np.isfinite(rate) and rate < 1.0)


def decay_profile(system: FiberSystem, path: BasePath, phi: 'AnyObservable', n_max: int,
                  k_pullback: int = DEFAULT_K_PULLBACK, component: int = 0, start: int = 0,
                  fit_floor: float = DEFAULT_DECAY_FIT_FLOOR,
                  track: Optional[DensityTrack] = None) -> DecayProfile:
    """Decay of |L^(n)(phi h_start) / h_{start+n} - mean| in sup norm over bins."""
    if n_max < 1:
        raise EstimationError("n_max must be positive", details=f"got {n_max}")
    if track is None or not track.covers(start, start + n_max):
        track = DensityTrack(system, path, start, start + n_max, k_pullback)
    n_bins = system.n_bins
    h0 = track.mass(start)
    values = fiber_values(phi, system, path, start)[:, component]
    mean = float(values @ h0)
    signed = values * h0

    deviations = np.empty(n_max)
    excluded = np.zeros(n_max, dtype=np.int64)
    for n in range(1, n_max + 1):
        signed = system.operator_at(path, start + n - 1).push(signed)
        h = track.mass(start + n)
        valid = h * n_bins >= DENSITY_FLOOR
        excluded[n - 1] = int((~valid).sum())
        deviations[n - 1] = float(np.abs(signed[valid] / h[valid] - mean).max()) if valid.any() else 0.0

    masked_warning = bool((excluded > MASKED_FRACTION_WARNING * n_bins).any())
    if masked_warning:
        logger.warning(f"Decay profile masked more than {MASKED_FRACTION_WARNING:.0%} of bins")
    n_values = np.arange(1, n_max + 1)
    rate, k_const, converged = fit_decay(n_values, deviations, fit_floor)
    phi_scale = float(np.abs(values).max())
    return DecayProfile(n_values, deviations, rate, k_const, mean, excluded, masked_warning, converged,
                        phi_scale=phi_scale if phi_scale > 0 else 1.0)


@dataclass
class AnnealedDecay:
    """Decay profiles averaged over independently sampled paths."""
    mean_deviation: np.ndarray
    fitted_rate: float
    fitted_K: float
    per_path: pd.DataFrame


def annealed_decay(process: BaseProcess, system: FiberSystem, phi: 'AnyObservable', n_max: int,
                   n_paths: int, seed: int, k_pullback: int = DEFAULT_K_PULLBACK) -> AnnealedDecay:
    rows = []
    acc = KahanSum((n_max,))
    for i in range(n_paths):
        path = sample_path(process, k_pullback, n_max, derive_seed(seed, "annealed-decay", i))
        profile = decay_profile(system, path, phi, n_max, k_pullback)
        acc.add(profile.sup_deviation)
        rows.append({'path': i, 'fitted_rate': profile.fitted_rate, 'fitted_K': profile.fitted_K,
                     'converged': profile.converged})
    mean_deviation = acc.total / n_paths
    rate, k_const, _ = fit_decay(np.arange(1, n_max + 1), mean_deviation)
    return AnnealedDecay(mean_deviation, rate, k_const, pd.DataFrame(rows))


@dataclass
class DualityResult:
    left: float
    right: float
    residual: float
    stderr: float


def duality_check(system: FiberSystem, path: BasePath, f: 'AnyObservable', g: 'AnyObservable', n: int = 1,
                  n_samples: int = 10000, seed: Optional[int] = None,
                  k_pullback: int = DEFAULT_K_PULLBACK) -> DualityResult:
    """Compare E[f(x_0) g(x_n)] by Monte Carlo with the Ulam pairing of L^(n)(f h_0) against g."""
    if n < 1:
        raise EstimationError("duality_check needs n >= 1")
    track = DensityTrack(system, path, 0, n, k_pullback)
    signed = fiber_values(f, system, path, 0)[:, 0] * track.mass(0)
    for j in range(n):
        signed = system.operator_at(path, j).push(signed)
    right = float(signed @ fiber_values(g, system, path, n)[:, 0])

    traj = sample_trajectory(system, path, track, n, n_samples, seed)
    products = (f.at(0, system.map_at(path, 0), traj[:, 0])[:, 0]
                * g.at(n, system.map_at(path, n), traj[:, n])[:, 0])
    moments = RunningMoments.from_samples(products)
    left = float(moments.mean)
    return DualityResult(left, right, abs(left - right), float(moments.stderr))


def rho_surrogate(fmap: FiberMap, n_bins: int = 256, m_max: int = 4) -> float:
    """L1 contraction on zero-mean densities, flagged as a surrogate.

    Pushes centered smooth test densities (x - 1/2, cos 2 pi x, sin 2 pi x)
    m_max times through the Ulam matrix and returns the worst per-step rate
    (||P^m f||_1 / ||f||_1)^(1/m), clipped to (0, 1].
    """
    op = ulam_matrix(fmap, n_bins)
    x = bin_midpoints(n_bins)
    tests = np.stack([x - 0.5, np.cos(2.0 * np.pi * x), np.sin(2.0 * np.pi * x)], axis=1)
    signed = (tests - tests.mean(axis=0)) / n_bins
    initial = np.abs(signed).sum(axis=0)
    for _ in range(m_max):
        signed = op.push(signed)
    rate = float((np.abs(signed).sum(axis=0) / initial).max()) ** (1.0 / m_max)
    return min(1.0, max(rate, STOCHASTIC_TOL))


def rho_surrogates(system: FiberSystem, n_bins: int = 256, m_max: int = 4) -> Dict[str, float]:
    return {symbol: rho_surrogate(fmap, n_bins, m_max) for symbol, fmap in system.maps.items()}


def _write_csv(frame: pd.DataFrame, path: Union[str, Path], header_lines: Sequence[str] = ()) -> Path:
    """Write a frame as CSV after optional '# key=value' header lines."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            frame.to_csv(fh, index=False, float_format='%.12g')
    except PermissionError as e:
        raise OutputError("Permission denied writing CSV", output_path=str(path),
                          output_format="csv", original_error=e) from e
    except OSError as e:
        raise OutputError("Cannot write CSV", output_path=str(path), output_format="csv",
                          details=str(e), original_error=e) from e
    return path


def dump_operator_csv(op: UlamOperator, path: Union[str, Path]) -> Path:
    """Nonzero entries as row,col,value in row-major order."""
    coo = op.entries.tocoo()
    order = np.lexsort((coo.col, coo.row))
    frame = pd.DataFrame({'row': coo.row[order], 'col': coo.col[order], 'value': coo.data[order]})
    return _write_csv(frame, path, [f"n_bins={op.n_bins}", f"symbol={op.symbol}"])


def dump_density_csv(density: Density, path: Union[str, Path], symbol: str = "", index: int = 0) -> Path:
    frame = pd.DataFrame({'bin': np.arange(density.n_bins), 'mass': density.mass})
    return _write_csv(frame, path, [f"n_bins={density.n_bins}", f"symbol={symbol}", f"index={index}"])

# ==================== MARTINGALE DECOMPOSITION ====================

DEFAULT_PROFILE_LAGS: int = 20
TRUNCATION_SAFETY: float = 2.0
DEFAULT_TRUNCATION_K_MAX: int = 200


def center_observable(v: AnyObservable, system: FiberSystem, path: BasePath, track: DensityTrack,
                      start: Optional[int] = None, stop: Optional[int] = None) -> CenteredObservable:
    """Subtract the fiber means sum_bins v h_j for every index in [start, stop]."""
    base = v.base_observable
    start = track.start if start is None else start
    stop = track.stop if stop is None else stop
    track.require(start, stop, "center_observable")
    offsets = np.array([fiber_values(base, system, path, j).T @ track.mass(j) for j in range(start, stop + 1)])
    return CenteredObservable(base, start, offsets.reshape(stop - start + 1, base.dim))


@dataclass
class BinField:
    """Per-index bin-midpoint values, shape (n_indices, N, dim)."""
    first_index: int
    values: np.ndarray

    @property
    def last_index(self) -> int:
        return self.first_index + self.values.shape[0] - 1

    @property
    def count(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_bins(self) -> int:
        return int(self.values.shape[1])

    @property
    def dim(self) -> int:
        return int(self.values.shape[2])

    def at(self, j: int) -> np.ndarray:
        if not (self.first_index <= j <= self.last_index):
            raise DecompositionError(f"missing index {j}",
                                     details=f"field covers [{self.first_index}, {self.last_index}]")
        return self.values[j - self.first_index]

    def lookup(self, j: int, x: np.ndarray) -> np.ndarray:
        """Piecewise-constant evaluation at states x."""
        return self.at(j)[bin_of(x, self.n_bins)]


@dataclass
class ChiField(BinField):
    truncation_k: int = 0
    est_error: float = 0.0


@dataclass
class MField(BinField):
    """m values plus, per index, the bin averages of chi_{j+1} o T_j and chi_{j+1} itself."""
    composed: Optional[np.ndarray] = None
    successor: Optional[np.ndarray] = None


def _signed_to_function(signed: np.ndarray, mass: np.ndarray) -> np.ndarray:
    n_bins = mass.shape[0]
    valid = mass * n_bins >= DENSITY_FLOOR
    out = np.zeros_like(signed)
    out[valid] = signed[valid] / mass[valid, None]
    return out


def _require_centered(v: AnyObservable):
    if not getattr(v, "centered", False):
        raise DecompositionError("center first", details=f"observable '{v.name}' is not centered")


def choose_truncation(profile: DecayProfile, vmax: float, tol: float = DEFAULT_TRUNCATION_TOL,
                      k_max: int = DEFAULT_TRUNCATION_K_MAX) -> int:
    """Smallest k with relative_K * rate^k * vmax < tol."""
    if profile.fitted_rate == 0.0 or vmax == 0.0:
        return 1
    if not profile.converged:
        logger.warning(f"Decay fit did not converge (rate {profile.fitted_rate:.4g}); using k = {k_max}")
        return k_max
    scale = profile.relative_K * vmax
    if scale < tol:
        return 1
    k = int(math.ceil(math.log(tol / scale) / math.log(profile.fitted_rate)))
    k = max(1, min(k, k_max))
    logger.debug(f"Truncation chosen: k = {k} (rate {profile.fitted_rate:.4g}, K {profile.relative_K:.4g})")
    return k


def compute_chi(system: FiberSystem, path: BasePath, v: AnyObservable, k: int, track: DensityTrack,
                first: int = 0, last: int = 0, profile: Optional[DecayProfile] = None) -> ChiField:
    """Truncated series chi_j = sum_n L^(n)(v_{j-n} h_{j-n}) / h_j for j in [first, last].

    Runs the recursion A_{i+1} = L_i(A_i + v_i h_i) from index first - k, so
    chi at ``first`` holds exactly k terms and later indices hold more.
    """
    _require_centered(v)
    if k < 0:
        raise DecompositionError("Truncation k must be nonnegative", details=f"got {k}")
    if last < first:
        raise DecompositionError("compute_chi needs last >= first")
    start = first - k
    path.require(start, last, "compute_chi")
    track.require(start, last, "compute_chi")

    values = np.zeros((last - first + 1, system.n_bins, v.dim))
    acc = np.zeros((system.n_bins, v.dim))
    vmax = 0.0
    for i in range(start, last):
        vi = fiber_values(v, system, path, i)
        vmax = max(vmax, float(np.abs(vi).max()))
        acc = system.operator_at(path, i).push(acc + vi * track.mass(i)[:, None])
        if i + 1 >= first:
            values[i + 1 - first] = _signed_to_function(acc, track.mass(i + 1))

    if profile is None:
        n_prof = min(DEFAULT_PROFILE_LAGS, last - start)
        profiles = [decay_profile(system, path, v, n_prof, component=c, start=start, track=track)
                    for c in range(v.dim)] if n_prof >= 2 else []
    else:
        profiles = [profile]
    est_error = (max(p.tail_sum(k) for p in profiles) * vmax * TRUNCATION_SAFETY
                 if profiles else float("inf"))
    return ChiField(first, values, truncation_k=k, est_error=est_error)


def compute_m(system: FiberSystem, path: BasePath, v: AnyObservable, chi: ChiField,
              first: Optional[int] = None, last: Optional[int] = None) -> MField:
    """m_j = v_j + chi_j - chi_{j+1} o T_j on bins.

    The composition is the exact bin average of chi_{j+1} o T_j, so bins
    straddling a branch edge of T_j see both sides of the jump.
    """
    first = chi.first_index if first is None else first
    last = chi.last_index - 1 if last is None else last
    if first < chi.first_index or last + 1 > chi.last_index:
        raise DecompositionError(f"missing index {last + 1}",
                                 details=f"chi covers [{chi.first_index}, {chi.last_index}]")
    count = last - first + 1
    values = np.empty((count, system.n_bins, chi.dim))
    composed = np.empty_like(values)
    successor = np.empty_like(values)
    for j in range(first, last + 1):
        i = j - first
        successor[i] = chi.at(j + 1)
        composed[i] = system.operator_at(path, j).pull(successor[i])
        values[i] = fiber_values(v, system, path, j) + chi.at(j) - composed[i]
    return MField(first, values, composed=composed, successor=successor)


def reconstruction_error(system: FiberSystem, path: BasePath, v: AnyObservable,
                         chi: ChiField, m: MField) -> float:
    """max |m_j - chi_j + chi_{j+1} o T_j - v_j| over indices and bins."""
    worst = 0.0
    for j in range(m.first_index, m.last_index + 1):
        composed = system.operator_at(path, j).pull(chi.at(j + 1))
        rebuilt = m.at(j) - chi.at(j) + composed
        worst = max(worst, float(np.abs(rebuilt - fiber_values(v, system, path, j)).max()))
    return worst


def verify_vanishing(system: FiberSystem, path: BasePath, m: MField, track: DensityTrack) -> np.ndarray:
    """residual[j] = max over unmasked bins of |L_j(m_j h_j) / h_{j+1}|.

    The chi_{j+1} o T_j part of m_j is pushed with L_j((f o T_j) h) = f L_j h,
    which is exact for bin-constant f.
    """
    last = min(m.last_index, track.stop - 1)
    track.require(m.first_index, last + 1, "verify_vanishing")
    residual = np.empty(last - m.first_index + 1)
    for j in range(m.first_index, last + 1):
        op = system.operator_at(path, j)
        h = track.mass(j)[:, None]
        i = j - m.first_index
        if m.composed is None:
            pushed = op.push(m.at(j) * h)
        else:
            pushed = op.push((m.at(j) + m.composed[i]) * h) - m.successor[i] * op.push(h)
        residual[i] = float(np.abs(_signed_to_function(pushed, track.mass(j + 1))).max())
    return residual


REVERSE_TEST_FUNCTIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "1": np.ones_like,
    "x": lambda x: x,
    "x^2": lambda x: x * x,
}


def reverse_martingale_check(system: FiberSystem, path: BasePath, m: MField, n: int, n_paths: int,
                             seed: int, track: DensityTrack,
                             runner: Optional['EnsembleRunner'] = None) -> pd.DataFrame:
    """Orthogonality of m_a(x_a) to g(x_b) for 1 <= a < b <= n and g in {1, x, x^2}."""
    if n < 2:
        raise EstimationError("reverse_martingale_check needs n >= 2")
    if m.first_index > 1 or m.last_index < n - 1:
        raise DecompositionError(f"m must cover indices 1..{n - 1}",
                                 details=f"m covers [{m.first_index}, {m.last_index}]")
    runner = runner or EnsembleRunner()
    pairs = [(a, b) for a in range(1, n) for b in range(a + 1, n + 1)]
    names = list(REVERSE_TEST_FUNCTIONS)

    def task(index: int, size: int, batch_seed: int) -> RunningMoments:
        traj = sample_trajectory(system, path, track, n, size, batch_seed)
        columns = []
        for a, b in pairs:
            ma = m.lookup(a, traj[:, a])
            for g in names:
                columns.append(ma * REVERSE_TEST_FUNCTIONS[g](traj[:, b])[:, None])
        return RunningMoments.from_samples(np.stack(columns, axis=1))

    total = RunningMoments((len(pairs) * len(names), m.dim))
    for part in runner.map_batches(task, n_paths, seed, "reverse-martingale"):
        total = total + part

    rows = []
    col = 0
    for a, b in pairs:
        for g in names:
            for c in range(m.dim):
                estimate, se = float(total.mean[col, c]), float(total.stderr[col, c])
                z = estimate / se if se > 0 else (0.0 if abs(estimate) <= 1e-12 else float("inf"))
                rows.append({'a': a, 'b': b, 'g': g, 'component': c, 'estimate': estimate,
                             'stderr': se, 'z': z, 'pass': bool(abs(z) < 3.0 or abs(estimate) <= 1e-12)})
            col += 1
    return pd.DataFrame(rows)


def dump_decomposition_csv(chi: ChiField, m: MField, residual: np.ndarray,
                           out_dir: Union[str, Path]) -> List[Path]:
    """Write chi.csv, m.csv (index, bin, component, value) and residual.csv."""
    out_dir = Path(out_dir)
    written = []
    for name, fld in (("chi", chi), ("m", m)):
        idx, bins, comp = np.meshgrid(np.arange(fld.first_index, fld.last_index + 1),
                                      np.arange(fld.n_bins), np.arange(fld.dim), indexing='ij')
        frame = pd.DataFrame({'index': idx.ravel(), 'bin': bins.ravel(), 'component': comp.ravel(),
                              'value': fld.values.ravel()})
        written.append(_write_csv(frame, out_dir / f"{name}.csv", [f"n_bins={fld.n_bins}"]))
    frame = pd.DataFrame({'index': np.arange(m.first_index, m.first_index + len(residual)), 'residual': residual})
    written.append(_write_csv(frame, out_dir / "residual.csv", [f"n_bins={m.n_bins}"]))
    return written


# ==================== LIMIT STATISTICS ====================

PATH_ELEMENT_BUDGET: int = 4_000_000
LIL_MIN_N: int = 100
LIL_BAND: Tuple[float, float] = (0.4, 1.5)
MOMENT_ORDERS = (4, 6, 8)
FORWARD_SAFE_STEPS: int = 50


def _sample_from_mass(mass: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse CDF over bins, then uniform within the bin."""
    n_bins = mass.shape[0]
    cdf = np.cumsum(mass)
    cdf = cdf / cdf[-1]
    bins = np.minimum(np.searchsorted(cdf, rng.random(size), side='right'), n_bins - 1)
    x = (bins + rng.random(size)) / n_bins
    return np.minimum(x, np.nextafter(1.0, 0.0))


def sample_trajectory(system: FiberSystem, path: BasePath, track: DensityTrack, n: int, n_paths: int = 1,
                      seed: Union[None, int, np.random.Generator] = None, method: str = "backward") -> np.ndarray:
    """Sample states x_0..x_n, shape (n_paths, n + 1).

    ``backward`` draws x_n from h_n and walks back through inverse branches,
    picking branch y with probability proportional to |y'| h_j(y). This
    keeps every x_j distributed by h_j without the precision loss of
    iterating expanding maps forward. ``forward`` draws x_0 from h_0 and
    applies the maps; each doubling step discards one mantissa bit, so
    forward orbits of the doubling map reach 0 after about 53 steps. Use
    it for n <= FORWARD_SAFE_STEPS only.
    """
    if n < 0 or n_paths < 1:
        raise EstimationError("sample_trajectory needs n >= 0 and n_paths >= 1")
    if method not in ("backward", "forward"):
        raise EstimationError(f"Unknown sampling method '{method}'")
    if n > 0:
        path.require(0, n - 1, "sample_trajectory")
    rng = np.random.default_rng(seed)
    traj = np.empty((n_paths, n + 1))

    if method == "forward":
        if n > FORWARD_SAFE_STEPS:
            logger.warning(f"Forward sampling over {n} steps loses float precision after about "
                           f"{FORWARD_SAFE_STEPS} expanding steps; use method='backward'")
        track.require(0, 0, "sample_trajectory")
        traj[:, 0] = _sample_from_mass(track.mass(0), n_paths, rng)
        for j in range(n):
            traj[:, j + 1] = system.map_at(path, j).apply(traj[:, j])
        return traj

    track.require(0, n, "sample_trajectory")
    n_bins = system.n_bins
    columns = np.arange(n_paths)
    traj[:, n] = _sample_from_mass(track.mass(n), n_paths, rng)
    for j in range(n - 1, -1, -1):
        branches = system.map_at(path, j).branches
        x_next = traj[:, j + 1]
        pre = np.stack([b.inverse(x_next) for b in branches])
        weights = np.stack([b.inverse_derivative(x_next) for b in branches])
        if not track.lebesgue:
            weights = weights * track.mass(j)[bin_of(pre, n_bins)]
        cum = np.cumsum(weights, axis=0)
        u = rng.random(n_paths) * cum[-1]
        choice = np.minimum((cum < u).sum(axis=0), len(branches) - 1)
        traj[:, j] = np.clip(pre[choice, columns], 0.0, np.nextafter(1.0, 0.0))
    return traj


def observable_values(system: FiberSystem, path: BasePath, v: AnyObservable, traj: np.ndarray,
                      start: int = 0, n: Optional[int] = None) -> np.ndarray:
    """v_j(x_j) for j = start..start+n-1, shape (n_paths, n, dim)."""
    traj = np.atleast_2d(traj)
    n = traj.shape[1] - 1 if n is None else n
    n_paths = traj.shape[0]
    out = np.empty((n_paths, n, v.dim))
    if n == 0:
        return out
    symbols = path.indices(start, start + n)
    base = v.base_observable
    for s in np.unique(symbols):
        cols = np.flatnonzero(symbols == s)
        fmap = system.maps[path.alphabet[s]]
        vals = base.evaluate(fmap, traj[:, cols].ravel())
        out[:, cols, :] = vals.reshape(n_paths, cols.size, v.dim)
    out -= v.offsets_for(np.arange(start, start + n))[None, :, :]
    return out


def birkhoff_sum(system: FiberSystem, path: BasePath, u: AnyObservable, traj: np.ndarray,
                 n: Optional[int] = None) -> np.ndarray:
    """sum_{j<n} u_j(x_j); shape (dim,) for one trajectory, (n_paths, dim) for several."""
    _require_centered(u)
    values = observable_values(system, path, u, traj, 0, n)
    sums = values.sum(axis=1)
    return sums[0] if np.ndim(traj) == 1 else sums


@dataclass
class PathStats:
    """W and WW on the grid t = k/n, k = 0..n, with the quadratic term Q."""
    n: int
    e: int
    W: np.ndarray
    WW: np.ndarray
    Q: np.ndarray
    x0: float
    path_id: int = 0

    def pairing_defect(self) -> float:
        """max over the grid of |W^b W^g - WW^bg - WW^gb - Q^bg|."""
        outer = self.W[:, :, None] * self.W[:, None, :]
        return float(np.abs(outer - self.WW - np.swapaxes(self.WW, 1, 2) - self.Q).max())


def iterated_path(system: FiberSystem, path: BasePath, v: AnyObservable, traj: np.ndarray,
                  n: Optional[int] = None, path_id: int = 0) -> PathStats:
    """Birkhoff process W(t) and iterated sums WW(t) for one trajectory."""
    _require_centered(v)
    traj = np.asarray(traj, dtype=float).ravel()
    n = traj.shape[0] - 1 if n is None else n
    if n < 1:
        raise EstimationError("iterated_path needs n >= 1")
    values = observable_values(system, path, v, traj[None, :], 0, n)[0]
    e = v.dim
    zero_vec = np.zeros((1, e))
    zero_mat = np.zeros((1, e, e))
    sums = np.vstack([zero_vec, np.cumsum(values, axis=0)])
    increments = sums[:-1, :, None] * values[:, None, :]
    squares = values[:, :, None] * values[:, None, :]
    return PathStats(
        n=n, e=e,
        W=sums / math.sqrt(n),
        WW=np.concatenate([zero_mat, np.cumsum(increments, axis=0)]) / n,
        Q=np.concatenate([zero_mat, np.cumsum(squares, axis=0)]) / n,
        x0=float(traj[0]), path_id=path_id)


def iterated_terminal(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """W(1) (n_paths, e) and WW(1) (n_paths, e, e) from values (n_paths, n, e)."""
    n = values.shape[1]
    sums = np.cumsum(values, axis=1)
    previous = np.concatenate([np.zeros_like(values[:, :1]), sums[:, :-1]], axis=1)
    ww = np.einsum('pkb,pkg->pbg', previous, values) / n
    return sums[:, -1] / math.sqrt(n), ww


def _chunks(size: int, n: int, width: int = 1, budget: int = PATH_ELEMENT_BUDGET) -> List[int]:
    per_chunk = max(1, budget // max(1, (n + 1) * width))
    full, rest = divmod(size, per_chunk)
    return [per_chunk] * full + ([rest] if rest else [])


def _ensemble(runner: 'EnsembleRunner', system: FiberSystem, path: BasePath, v: AnyObservable,
              track: DensityTrack, n: int, n_paths: int, seed: int, stage: str,
              reducer: Callable[[np.ndarray], Any], width: int = 1) -> List[Any]:
    """Apply ``reducer`` to observable values of every path chunk, in batch order."""
    def task(index: int, size: int, batch_seed: int) -> List[Any]:
        rng = np.random.default_rng(batch_seed)
        out = []
        for chunk in _chunks(size, n, v.dim * width):
            traj = sample_trajectory(system, path, track, n, chunk, rng)
            out.append(reducer(observable_values(system, path, v, traj, 0, n)))
        return out

    return [part for batch in runner.map_batches(task, n_paths, seed, stage) for part in batch]


def pairing_identity_check(system: FiberSystem, path: BasePath, v: AnyObservable, track: DensityTrack,
                           n: int, n_paths: int, seed: int,
                           runner: Optional['EnsembleRunner'] = None) -> np.ndarray:
    """Per-path max pairing defect over the full grid."""
    _require_centered(v)
    runner = runner or EnsembleRunner()

    def reducer(values: np.ndarray) -> np.ndarray:
        sums = np.cumsum(values, axis=1)
        previous = np.concatenate([np.zeros_like(values[:, :1]), sums[:, :-1]], axis=1)
        ww = np.cumsum(previous[:, :, :, None] * values[:, :, None, :], axis=1)
        q = np.cumsum(values[:, :, :, None] * values[:, :, None, :], axis=1)
        outer = sums[:, :, :, None] * sums[:, :, None, :]
        defect = np.abs(outer - ww - np.swapaxes(ww, 2, 3) - q) / values.shape[1]
        return defect.reshape(values.shape[0], -1).max(axis=1)

    return np.concatenate(_ensemble(runner, system, path, v, track, n, n_paths, seed,
                                    "pairing-identity", reducer, width=4 * v.dim))


@dataclass
class Estimate:
    """Matrix estimate with per-entry standard errors."""
    value: np.ndarray
    stderr: np.ndarray
    method: str
    tail_bound: float = 0.0
    n_terms: int = 0


@dataclass
class LimitEstimates:
    """Sigma, E and the lag-0 term from one set of correlation sums."""
    sigma: Estimate
    E: Estimate
    lag0: Estimate
    positions: int
    n_lags: int

    def consistency_defect(self) -> np.ndarray:
        return self.sigma.value - self.E.value - self.E.value.T - self.lag0.value

    def consistency_tolerance(self) -> np.ndarray:
        combined = np.sqrt(self.sigma.stderr ** 2 + self.E.stderr ** 2 + self.E.stderr.T ** 2
                           + self.lag0.stderr ** 2)
        return np.maximum(3.0 * combined, 1e-10)

    def psd_min_eigenvalue(self) -> float:
        sym = 0.5 * (self.sigma.value + self.sigma.value.T)
        return float(np.linalg.eigvalsh(sym).min())


def lag_correlations(system: FiberSystem, path: BasePath, values_at: Callable[[int], np.ndarray],
                     track: DensityTrack, start: int, positions: int,
                     n_lags: int) -> Tuple[np.ndarray, np.ndarray]:
    """Fiber correlations at each position j in [start, start+positions).

    Returns lag0[p] = sum_bins f_j f_j^T h_j and lags[p, n-1] = sum_bins
    L^(n)(f_j h_j) f_{j+n}^T for n = 1..n_lags. All positions advance
    together, so each operator application is one sparse product.
    """
    if positions < 1 or n_lags < 0:
        raise EstimationError("positions must be positive and n_lags nonnegative")
    track.require(start, start + positions - 1, "lag correlations")
    path.require(start, start + positions + n_lags - 1, "lag correlations")
    current = values_at(start)
    n_bins, e = current.shape
    lag0 = np.zeros((positions, e, e))
    lags = np.zeros((positions, n_lags, e, e))
    if n_lags == 0:
        for p in range(positions):
            f = values_at(start + p)
            lag0[p] = (f * track.mass(start + p)[:, None]).T @ f
        return lag0, lags

    signals = np.zeros((0, n_bins, e))
    owners = np.zeros(0, dtype=np.int64)
    for t in range(start, start + positions + n_lags - 1):
        if t < start + positions:
            signal = current * track.mass(t)[:, None]
            lag0[t - start] = signal.T @ current
            signals = np.concatenate([signals, signal[None]], axis=0)
            owners = np.append(owners, t - start)
        m = signals.shape[0]
        flat = signals.transpose(1, 0, 2).reshape(n_bins, m * e)
        signals = system.operator_at(path, t).push(flat).reshape(n_bins, m, e).transpose(1, 0, 2)
        current = values_at(t + 1)
        lag = t + 1 - start - owners
        lags[owners, lag - 1] = np.einsum('mnb,ng->mbg', signals, current)
        keep = lag < n_lags
        signals, owners = signals[keep], owners[keep]
    return lag0, lags


def _position_estimate(samples: np.ndarray, method: str, tail: float = 0.0, n_terms: int = 0) -> Estimate:
    acc = RunningMoments.from_samples(samples)
    return Estimate(np.array(acc.mean), np.array(acc.stderr), method, tail, n_terms)


def _geometric_tail(lag_terms: np.ndarray, floor: float = DEFAULT_DECAY_FIT_FLOOR) -> float:
    """Bound on sum_{n > n_lags} of the lag terms from a geometric fit of their sizes."""
    if lag_terms.shape[0] == 0:
        return float("inf")
    norms = np.abs(lag_terms).reshape(lag_terms.shape[0], -1).max(axis=1)
    rate, k_const, converged = fit_decay(np.arange(1, norms.shape[0] + 1), norms, floor)
    if rate == 0.0:
        return 0.0
    if not converged:
        return float("inf")
    return k_const * rate ** (norms.shape[0] + 1) / (1.0 - rate)


def estimate_limits(system: FiberSystem, path: BasePath, v: AnyObservable, track: DensityTrack,
                    n_lags: int = DEFAULT_N_LAGS, positions: int = DEFAULT_POSITIONS,
                    start: int = 0) -> LimitEstimates:
    """Correlation-sum estimates of Sigma, E and the lag-0 term, averaged over path positions."""
    _require_centered(v)
    lag0, lags = lag_correlations(system, path, lambda j: fiber_values(v, system, path, j),
                                  track, start, positions, n_lags)
    e_samples = lags.sum(axis=1)
    sigma_samples = lag0 + e_samples + np.swapaxes(e_samples, 1, 2)
    tail = _geometric_tail(lags.mean(axis=0))
    return LimitEstimates(
        sigma=_position_estimate(sigma_samples, "correlation-sum", 2.0 * tail, n_lags),
        E=_position_estimate(e_samples, "correlation-sum", tail, n_lags),
        lag0=_position_estimate(lag0, "correlation-sum"),
        positions=positions, n_lags=n_lags)


def estimate_sigma_correlation(system: FiberSystem, path: BasePath, v: AnyObservable, track: DensityTrack,
                               n_lags: int = DEFAULT_N_LAGS, positions: int = DEFAULT_POSITIONS,
                               start: int = 0) -> Estimate:
    return estimate_limits(system, path, v, track, n_lags, positions, start).sigma


def estimate_E(system: FiberSystem, path: BasePath, v: AnyObservable, track: DensityTrack,
               n_lags: int = DEFAULT_N_LAGS, positions: int = DEFAULT_POSITIONS, start: int = 0) -> Estimate:
    return estimate_limits(system, path, v, track, n_lags, positions, start).E


def estimate_sigma_martingale(system: FiberSystem, path: BasePath, m: MField, track: DensityTrack,
                              first: Optional[int] = None, last: Optional[int] = None) -> Estimate:
    """Average over indices of sum_bins m_j m_j^T h_j."""
    first = m.first_index if first is None else first
    last = m.last_index if last is None else last
    track.require(first, last, "estimate_sigma_martingale")
    samples = np.array([np.einsum('nb,n,ng->bg', m.at(j), track.mass(j), m.at(j))
                        for j in range(first, last + 1)])
    return _position_estimate(samples, "martingale-route", n_terms=last - first + 1)


@dataclass
class DriftCorrection:
    """E(v) plus the lagged-m check that should vanish."""
    correction: Estimate
    lagged_m: np.ndarray
    lagged_m_stderr: np.ndarray
    lagged_tolerance: np.ndarray
    lagged_ok: bool
    residual_max: float


def drift_correction_limit(system: FiberSystem, path: BasePath, v: AnyObservable, m: MField,
                           track: DensityTrack, n_lags: int = DEFAULT_N_LAGS,
                           positions: int = DEFAULT_POSITIONS, start: int = 0,
                           E: Optional[Estimate] = None) -> DriftCorrection:
    if E is None:
        E = estimate_E(system, path, v, track, n_lags, positions, start)
    if m.count < 2:
        raise EstimationError("Lagged-m check needs m on at least two indices")
    m_lags = max(1, min(n_lags, m.count // 2))
    m_positions = m.count - m_lags
    _, lags = lag_correlations(system, path, m.at, track, m.first_index, m_positions, m_lags)
    samples = lags.sum(axis=1)
    acc = RunningMoments.from_samples(samples)
    residual = verify_vanishing(system, path, m, track)
    residual_max = float(residual.max()) if residual.size else 0.0
    tolerance = 3.0 * acc.stderr + m_lags * residual_max * float(np.abs(m.values).max()) + 1e-12
    lagged = np.array(acc.mean)
    return DriftCorrection(E, lagged, np.array(acc.stderr), tolerance,
                           bool((np.abs(lagged) <= tolerance).all()), residual_max)


def _as_matrix(value: Union[float, Sequence, np.ndarray], e: int, name: str) -> np.ndarray:
    mat = np.asarray(value, dtype=float)
    if mat.ndim == 0:
        mat = np.eye(e) * float(mat)
    if mat.shape != (e, e):
        raise EstimationError(f"{name} has wrong shape", details=f"expected {(e, e)}, got {mat.shape}")
    return mat


@dataclass
class CLTReport:
    table: pd.DataFrame
    samples: np.ndarray
    passed: bool


def ks_threshold(n_paths: int) -> float:
    return KS_COEFFICIENT / math.sqrt(n_paths) + KS_MODEL_ALLOWANCE


def clt_test(system: FiberSystem, path: BasePath, v: AnyObservable, track: DensityTrack, n: int,
             n_paths: int, sigma: Union[float, np.ndarray], seed: int,
             runner: Optional['EnsembleRunner'] = None, threshold: Optional[float] = None) -> CLTReport:
    """KS distance of n^-1/2 S_n against Normal(0, Sigma) per component and along (1,..,1)/sqrt(e)."""
    _require_centered(v)
    if n < 1:
        raise EstimationError("clt_test needs n >= 1")
    runner = runner or EnsembleRunner()
    sigma = _as_matrix(sigma, v.dim, "Sigma")
    threshold = ks_threshold(n_paths) if threshold is None else threshold
    samples = np.concatenate(_ensemble(runner, system, path, v, track, n, n_paths, seed, "clt",
                                       lambda values: values.sum(axis=1) / math.sqrt(n)))

    targets = [(f"component[{c}]", samples[:, c], sigma[c, c]) for c in range(v.dim)]
    if v.dim > 1:
        u = np.ones(v.dim) / math.sqrt(v.dim)
        targets.append(("projection", samples @ u, float(u @ sigma @ u)))

    rows = []
    for name, data, variance in targets:
        moments = RunningMoments.from_samples(data)
        row = {'name': name, 'variance': variance, 'sample_mean': float(moments.mean),
               'sample_variance': float(moments.variance), 'threshold': threshold}
        if variance <= 1e-12:
            row.update(ks_distance=float("nan"), p_value=float("nan"), passed=True,
                       note="degenerate covariance; skipped")
        else:
            result = stats.kstest(data, 'norm', args=(0.0, math.sqrt(variance)))
            row.update(ks_distance=float(result.statistic), p_value=float(result.pvalue),
                       passed=bool(result.statistic < threshold), note="")
        rows.append(row)
    table = pd.DataFrame(rows)
    return CLTReport(table, samples, bool(table['passed'].all()))


@dataclass
class LILReport:
    ratios: np.ndarray
    fraction_above: float
    fraction_in_band: float
    quantiles: pd.DataFrame


def lil_envelope(system: FiberSystem, path: BasePath, v: AnyObservable, track: DensityTrack, n_max: int,
                 n_paths: int, sigma: Union[float, np.ndarray], seed: int,
                 runner: Optional['EnsembleRunner'] = None) -> LILReport:
    """Per path, max over n in [100, n_max] of |S_n| / sqrt(2 Sigma n ln ln n)."""
    _require_centered(v)
    if n_max < LIL_MIN_N:
        raise EstimationError(f"lil_envelope needs n_max >= {LIL_MIN_N}", details=f"got {n_max}")
    runner = runner or EnsembleRunner()
    variances = np.diag(_as_matrix(sigma, v.dim, "Sigma"))
    k = np.arange(LIL_MIN_N, n_max + 1)
    loglog = 2.0 * k * np.log(np.log(k))

    def reducer(values: np.ndarray) -> np.ndarray:
        sums = np.abs(np.cumsum(values, axis=1)[:, LIL_MIN_N - 1:, :])
        out = np.zeros((values.shape[0], v.dim))
        for c in range(v.dim):
            if variances[c] > 1e-12:
                out[:, c] = (sums[:, :, c] / np.sqrt(variances[c] * loglog)).max(axis=1)
            else:
                out[:, c] = np.where(sums[:, :, c].max(axis=1) > 0, np.inf, 0.0)
        return out

    ratios = np.concatenate(_ensemble(runner, system, path, v, track, n_max, n_paths, seed, "lil", reducer))
    active = ratios[:, variances > 1e-12]
    lo, hi = LIL_BAND
    fraction_above = float((active > hi).mean()) if active.size else 0.0
    fraction_in_band = float(((active >= lo) & (active <= hi)).mean()) if active.size else 0.0
    quantiles = pd.DataFrame(
        {f"component[{c}]": np.quantile(ratios[:, c], [0.05, 0.25, 0.5, 0.75, 0.95]) for c in range(v.dim)},
        index=pd.Index([0.05, 0.25, 0.5, 0.75, 0.95], name='quantile'))
    return LILReport(ratios, fraction_above, fraction_in_band, quantiles)


@dataclass
class WIPReport:
    table: pd.DataFrame
    mean: np.ndarray
    stderr: np.ndarray
    passed: bool


def wip_mean_check(system: FiberSystem, path: BasePath, v: AnyObservable, track: DensityTrack, n: int,
                   n_paths: int, E: Union[float, np.ndarray], seed: int,
                   runner: Optional['EnsembleRunner'] = None) -> WIPReport:
    """z-scores of mean WW(1) against E, entry by entry."""
    _require_centered(v)
    runner = runner or EnsembleRunner()
    E = _as_matrix(E, v.dim, "E")
    total = RunningMoments((v.dim, v.dim))
    for part in _ensemble(runner, system, path, v, track, n, n_paths, seed, "iterated-wip",
                          lambda values: RunningMoments.from_samples(iterated_terminal(values)[1]),
                          width=v.dim):
        total = total + part
    rows = []
    for b in range(v.dim):
        for g in range(v.dim):
            mean, se = float(total.mean[b, g]), float(total.stderr[b, g])
            gap = mean - E[b, g]
            z = gap / se if se > 0 else (0.0 if abs(gap) <= 1e-12 else float("inf"))
            rows.append({'beta': b, 'gamma': g, 'mean': mean, 'stderr': se, 'expected': E[b, g],
                         'z': z, 'passed': bool(abs(z) < 3.0)})
    table = pd.DataFrame(rows)
    return WIPReport(table, np.array(total.mean), np.array(total.stderr), bool(table['passed'].all()))


@dataclass
class MomentReport:
    table: pd.DataFrame
    slope_first: float
    slope_second: float

    def passed(self, first_tol: float = 0.05, second_tol: float = 0.1) -> bool:
        return bool(abs(self.slope_first - 0.5) <= first_tol and abs(self.slope_second - 1.0) <= second_tol)


def _norm_table(first: RunningMoments, second: RunningMoments, grid: Sequence[int], p: int,
                label: str) -> Tuple[pd.DataFrame, float, float]:
    """p-norms from moment accumulators plus log-log slopes against ``grid``."""
    norm1 = first.mean ** (1.0 / p)
    norm2 = second.mean ** (2.0 / p)
    with np.errstate(divide='ignore', invalid='ignore'):
        se1 = np.where(first.mean > 0, norm1 * first.stderr / (p * first.mean), 0.0)
        se2 = np.where(second.mean > 0, norm2 * 2.0 * second.stderr / (p * second.mean), 0.0)
    table = pd.DataFrame({label: np.asarray(grid), 'first_norm': norm1, 'first_stderr': se1,
                          'second_norm': norm2, 'second_stderr': se2})
    log_grid = np.log(np.asarray(grid, dtype=float))
    slope1 = float(np.polyfit(log_grid, np.log(norm1), 1)[0]) if (norm1 > 0).all() else float("nan")
    slope2 = float(np.polyfit(log_grid, np.log(norm2), 1)[0]) if (norm2 > 0).all() else float("nan")
    return table, slope1, slope2


def moment_diagnostics(system: FiberSystem, path: BasePath, v: AnyObservable, track: DensityTrack,
                       n_grid: Sequence[int], n_paths: int, p: int, seed: int,
                       runner: Optional['EnsembleRunner'] = None) -> MomentReport:
    """||max_k |S_k| ||_p and ||max_k |S2_k| ||_{p/2} over a grid of n, with log-log slopes."""
    _require_centered(v)
    if p not in MOMENT_ORDERS:
        raise EstimationError(f"p must be one of {MOMENT_ORDERS}", details=f"got {p}")
    grid = sorted(int(n) for n in n_grid)
    if len(grid) < 2 or grid[0] < 1:
        raise EstimationError("n_grid needs at least two positive sizes")
    runner = runner or EnsembleRunner()
    n_max = grid[-1]
    cut = np.asarray(grid) - 1

    def reducer(values: np.ndarray) -> Tuple[RunningMoments, RunningMoments]:
        sums = np.cumsum(values, axis=1)
        previous = np.concatenate([np.zeros_like(values[:, :1]), sums[:, :-1]], axis=1)
        iterated = np.cumsum(previous[:, :, :, None] * values[:, :, None, :], axis=1)
        first = np.maximum.accumulate(np.linalg.norm(sums, axis=2), axis=1)[:, cut]
        second = np.maximum.accumulate(
            np.abs(iterated).reshape(values.shape[0], values.shape[1], -1).max(axis=2), axis=1)[:, cut]
        return RunningMoments.from_samples(first ** p), RunningMoments.from_samples(second ** (p / 2.0))

    first_total = RunningMoments((len(grid),))
    second_total = RunningMoments((len(grid),))
    for first, second in _ensemble(runner, system, path, v, track, n_max, n_paths, seed, "moments",
                                   reducer, width=2 * v.dim):
        first_total = first_total + first
        second_total = second_total + second
    table, slope1, slope2 = _norm_table(first_total, second_total, grid, p, 'n')
    return MomentReport(table, slope1, slope2)


def increment_moments(system: FiberSystem, path: BasePath, v: AnyObservable, track: DensityTrack, n: int,
                      gaps: Sequence[int], n_paths: int, p: int, seed: int, offset: Optional[int] = None,
                      runner: Optional['EnsembleRunner'] = None) -> MomentReport:
    """||W(j/n, (j+g)/n)||_p and ||WW(j/n, (j+g)/n)||_{p/2} for windows of length g starting at j."""
    _require_centered(v)
    if p not in MOMENT_ORDERS:
        raise EstimationError(f"p must be one of {MOMENT_ORDERS}", details=f"got {p}")
    gaps = sorted(int(g) for g in gaps)
    offset = n // 2 if offset is None else offset
    if len(gaps) < 2 or gaps[0] < 1 or offset < 0 or offset + gaps[-1] > n:
        raise EstimationError("increment windows must fit inside [0, n]",
                              details=f"offset {offset}, gaps {gaps}, n {n}")
    runner = runner or EnsembleRunner()
    cut = np.asarray(gaps) - 1

    def reducer(values: np.ndarray) -> Tuple[RunningMoments, RunningMoments]:
        window = values[:, offset:offset + gaps[-1]]
        sums = np.cumsum(window, axis=1)
        previous = np.concatenate([np.zeros_like(window[:, :1]), sums[:, :-1]], axis=1)
        iterated = np.cumsum(previous[:, :, :, None] * window[:, :, None, :], axis=1)
        first = np.linalg.norm(sums[:, cut], axis=2) / math.sqrt(n)
        second = np.abs(iterated[:, cut]).reshape(values.shape[0], len(gaps), -1).max(axis=2) / n
        return RunningMoments.from_samples(first ** p), RunningMoments.from_samples(second ** (p / 2.0))

    first_total = RunningMoments((len(gaps),))
    second_total = RunningMoments((len(gaps),))
    for first, second in _ensemble(runner, system, path, v, track, n, n_paths, seed, "increment-moments",
                                   reducer, width=2 * v.dim):
        first_total = first_total + first
        second_total = second_total + second
    table, slope1, slope2 = _norm_table(first_total, second_total, gaps, p, 'gap')
    return MomentReport(table, slope1, slope2)

# ==================== FAST-SLOW HOMOGENIZATION ====================

FIELD_FAMILIES = ("constant", "affine", "polynomial", "sinusoidal")
DERIVATIVE_CHECK_TOL: float = 1e-6
FD_STEP: float = 1e-5
MAX_EM_DT: float = 1e-3
DECAY_DISPERSION_TOL: float = 0.35
KS_HOMOGENIZATION_BASE: float = 0.05
KS_REFERENCE_EPSILON: float = 0.05


class VectorField(ABC):
    """Map R^d -> R^shape with an analytic Jacobian.

    ``value(x)`` takes x of shape (P, d) and returns (P,) + shape;
    ``jacobian(x)`` returns (P,) + shape + (d,).
    """

    family: str = ""

    def __init__(self, shape: Tuple[int, ...], d: int):
        self.shape = tuple(shape)
        self.d = d

    @abstractmethod
    def value(self, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def jacobian(self, x: np.ndarray) -> np.ndarray:
        ...

    def _as_states(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.d:
            raise IntegrationError("State dimension mismatch", details=f"expected d={self.d}, got {x.shape[1]}")
        return x

    def _param(self, data: Dict[str, Any], key: str, shape: Tuple[int, ...], default: float = 0.0) -> np.ndarray:
        raw = data.get(key, default)
        arr = np.asarray(raw, dtype=float)
        try:
            return np.broadcast_to(arr, shape).copy()
        except ValueError:
            raise ConfigurationError(f"{self.family} field parameter '{key}' has wrong shape",
                                     details=f"expected {shape}, got {arr.shape}") from None


class ConstantField(VectorField):
    family = "constant"

    def __init__(self, shape: Tuple[int, ...], d: int, value: Any = 0.0):
        super().__init__(shape, d)
        self.offset = self._param({'value': value}, 'value', self.shape)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = self._as_states(x)
        return np.broadcast_to(self.offset, (x.shape[0],) + self.shape).copy()

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        x = self._as_states(x)
        return np.zeros((x.shape[0],) + self.shape + (self.d,))


class AffineField(VectorField):
    """offset + linear @ x."""
    family = "affine"

    def __init__(self, shape: Tuple[int, ...], d: int, offset: Any = 0.0, linear: Any = 0.0):
        super().__init__(shape, d)
        self.offset = self._param({'offset': offset}, 'offset', self.shape)
        self.linear = self._param({'linear': linear}, 'linear', self.shape + (d,))

    def value(self, x: np.ndarray) -> np.ndarray:
        x = self._as_states(x)
        return self.offset + np.einsum('...a,pa->p...', self.linear, x)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        x = self._as_states(x)
        return np.broadcast_to(self.linear, (x.shape[0],) + self.linear.shape).copy()


class PolynomialField(VectorField):
    """sum_a sum_k c[..., a, k] x_a^k with degree <= 3."""
    family = "polynomial"

    def __init__(self, shape: Tuple[int, ...], d: int, coefficients: Any):
        super().__init__(shape, d)
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.ndim == 0 or coefficients.shape[-1] > 4:
            raise ConfigurationError("Polynomial field degree must be <= 3")
        self.degree = coefficients.shape[-1] - 1
        self.coefficients = self._param({'coefficients': coefficients}, 'coefficients',
                                        self.shape + (d, self.degree + 1))

    def value(self, x: np.ndarray) -> np.ndarray:
        x = self._as_states(x)
        powers = x[:, :, None] ** np.arange(self.degree + 1)
        return np.einsum('...ak,pak->p...', self.coefficients, powers)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        x = self._as_states(x)
        k = np.arange(self.degree + 1)
        d_powers = k * x[:, :, None] ** np.maximum(k - 1, 0)
        return np.einsum('...ak,pak->p...a', self.coefficients, d_powers)


class SinusoidalField(VectorField):
    """offset + sum_a amplitude sin(frequency x_a + phase)."""
    family = "sinusoidal"

    def __init__(self, shape: Tuple[int, ...], d: int, amplitude: Any = 1.0, frequency: Any = 1.0,
                 phase: Any = 0.0, offset: Any = 0.0):
        super().__init__(shape, d)
        full = self.shape + (d,)
        self.amplitude = self._param({'amplitude': amplitude}, 'amplitude', full)
        self.frequency = self._param({'frequency': frequency}, 'frequency', full)
        self.phase = self._param({'phase': phase}, 'phase', full)
        self.offset = self._param({'offset': offset}, 'offset', self.shape)

    def _states(self, x: np.ndarray) -> np.ndarray:
        x = self._as_states(x)
        return x.reshape((x.shape[0],) + (1,) * len(self.shape) + (self.d,))

    def value(self, x: np.ndarray) -> np.ndarray:
        xr = self._states(x)
        return self.offset + (self.amplitude * np.sin(self.frequency * xr + self.phase)).sum(axis=-1)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        xr = self._states(x)
        return self.amplitude * self.frequency * np.cos(self.frequency * xr + self.phase)


def build_field(spec: Dict[str, Any], shape: Tuple[int, ...], d: int) -> VectorField:
    """Build a field from ``{"family": ..., **params}``."""
    params = {k: v for k, v in spec.items() if k != "family"}
    family = spec.get("family")
    builders = {'constant': ConstantField, 'affine': AffineField,
                'polynomial': PolynomialField, 'sinusoidal': SinusoidalField}
    if family not in builders:
        raise ConfigurationError(f"Unknown field family '{family}'",
                                 details=f"expected one of {', '.join(FIELD_FAMILIES)}")
    try:
        return builders[family](shape, d, **params)
    except TypeError as e:
        raise ConfigurationError(f"Bad parameters for {family} field", details=str(e)) from None


def finite_difference_jacobian(fld: VectorField, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences, shape (P,) + shape + (d,)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    columns = []
    for a in range(fld.d):
        step = np.zeros(fld.d)
        step[a] = h
        columns.append((fld.value(x + step) - fld.value(x - step)) / (2.0 * h))
    return np.stack(columns, axis=-1)


def check_field_derivatives(fld: VectorField, n_points: int = 20, seed: int = 0,
                            tol: float = DERIVATIVE_CHECK_TOL) -> float:
    """Max relative gap between analytic and finite-difference Jacobians at random states."""
    points = np.random.default_rng(seed).uniform(-2.0, 2.0, size=(n_points, fld.d))
    analytic = fld.jacobian(points)
    numeric = finite_difference_jacobian(fld, points)
    gap = float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))).max())
    if gap > tol:
        raise ConfigurationError(f"{fld.family} field derivative does not match finite differences",
                                 details=f"relative gap {gap:.3e} > {tol:g}")
    return gap


@dataclass
class FastSlowSpec:
    """Slow recursion x_{n+1} = x_n + eps^2 a(x_n) + eps b(x_n) v_n."""
    d: int
    e: int
    a: VectorField
    b: VectorField
    epsilon: float
    xi: np.ndarray

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ConfigurationError("epsilon must be in (0,1)", field="fast_slow.epsilon",
                                     details=f"got {self.epsilon}")
        self.xi = np.asarray(self.xi, dtype=float).reshape(self.d)
        if self.a.shape != (self.d,) or self.a.d != self.d:
            raise ConfigurationError("Drift a must map R^d to R^d", details=f"shape {self.a.shape}")
        if self.b.shape != (self.d, self.e) or self.b.d != self.d:
            raise ConfigurationError("Diffusion b must map R^d to R^(d x e)", details=f"shape {self.b.shape}")
        check_field_derivatives(self.a)
        check_field_derivatives(self.b)

    @property
    def n_steps(self) -> int:
        return int(math.floor(1.0 / self.epsilon ** 2 + 1e-9))


def corrected_drift(spec: FastSlowSpec, E: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """a~(x) = a(x) + sum_{a,b,g} E^{bg} d b^{kb}/dx_a b^{ag}(x)."""
    E = np.asarray(E, dtype=float)
    if E.shape != (spec.e, spec.e):
        raise EstimationError("E has wrong shape", details=f"expected {(spec.e, spec.e)}, got {E.shape}")

    def a_tilde(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return spec.a.value(x) + np.einsum('pkba,pag,bg->pk', spec.b.jacobian(x), spec.b.value(x), E)

    return a_tilde


@dataclass
class HomogenizedSDE:
    """dZ = a~(Z) dt + b(Z) dW with Cov(W(1)) = Sigma."""
    spec: FastSlowSpec
    Sigma: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        e = self.spec.e
        self.Sigma = _as_matrix(self.Sigma, e, "Sigma")
        self.E = _as_matrix(self.E, e, "E")
        sym = 0.5 * (self.Sigma + self.Sigma.T)
        eigenvalues, vectors = np.linalg.eigh(sym)
        if eigenvalues.min() < -1e-8 * max(1.0, float(np.abs(sym).max())):
            raise IntegrationError("Sigma not PSD", details=f"smallest eigenvalue {eigenvalues.min():.3e}")
        self.Sigma = sym
        self.root = (vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.T
        self.a_tilde = corrected_drift(self.spec, self.E)

    def check_correction(self, n_points: int = 100, seed: int = 0) -> float:
        """Relative gap of a~ - a against the same formula with a finite-difference Jacobian."""
        x = np.random.default_rng(seed).uniform(-2.0, 2.0, size=(n_points, self.spec.d))
        analytic = self.a_tilde(x) - self.spec.a.value(x)
        numeric = np.einsum('pkba,pag,bg->pk', finite_difference_jacobian(self.spec.b, x),
                            self.spec.b.value(x), self.E)
        return float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))).max())


def slow_recursion(spec: FastSlowSpec, fast_values: np.ndarray, keep_path: bool = False) -> np.ndarray:
    """Run the slow recursion over fast values (n_paths, n_steps, e).

    Returns x(1) of shape (n_paths, d), or the whole path (n_paths, n_steps + 1, d).
    """
    n_paths, n_steps, _ = fast_values.shape
    eps = spec.epsilon
    eps2 = eps * eps
    x = np.broadcast_to(spec.xi, (n_paths, spec.d)).copy()
    states = [x] if keep_path else None
    for k in range(n_steps):
        x = x + eps2 * spec.a.value(x) + eps * np.einsum('pde,pe->pd', spec.b.value(x), fast_values[:, k])
        if not np.isfinite(x).all():
            raise IntegrationError(f"Slow state not finite at step {k + 1}", step=k + 1)
        if keep_path:
            states.append(x)
    return np.stack(states, axis=1) if keep_path else x


def integrate_fast_slow(spec: FastSlowSpec, system: FiberSystem, path: BasePath, v: AnyObservable,
                        track: DensityTrack, n_paths: int, seed: int, keep_path: bool = False,
                        runner: Optional['EnsembleRunner'] = None) -> np.ndarray:
    """Slow states on the grid t_k = k eps^2 driven by sampled fast trajectories."""
    _require_centered(v)
    if v.dim != spec.e:
        raise EstimationError("Observable dimension does not match e", details=f"{v.dim} vs {spec.e}")
    runner = runner or EnsembleRunner()
    parts = _ensemble(runner, system, path, v, track, spec.n_steps, n_paths, seed, "fast-slow",
                      lambda values: slow_recursion(spec, values, keep_path), width=spec.d)
    return np.concatenate(parts)


def euler_maruyama(sde: HomogenizedSDE, xi: np.ndarray, dt: float, horizon: float = 1.0,
                   n_paths: int = 1000, seed: int = 0, runner: Optional['EnsembleRunner'] = None) -> np.ndarray:
    """Z(horizon) samples, shape (n_paths, d)."""
    if not (0.0 < dt <= MAX_EM_DT):
        raise IntegrationError(f"dt must be in (0, {MAX_EM_DT:g}]", details=f"got {dt}")
    spec = sde.spec
    xi = np.asarray(xi, dtype=float).reshape(spec.d)
    n_steps = int(round(horizon / dt))
    sqrt_dt = math.sqrt(dt)
    runner = runner or EnsembleRunner()

    def task(index: int, size: int, batch_seed: int) -> np.ndarray:
        rng = np.random.default_rng(batch_seed)
        z = np.broadcast_to(xi, (size, spec.d)).copy()
        for step in range(n_steps):
            dw = rng.standard_normal((size, spec.e)) @ sde.root * sqrt_dt
            z = z + sde.a_tilde(z) * dt + np.einsum('pde,pe->pd', spec.b.value(z), dw)
            if not np.isfinite(z).all():
                raise IntegrationError(f"SDE state not finite at step {step + 1}", step=step + 1)
        return z

    return np.concatenate(runner.map_batches(task, n_paths, seed, "euler-maruyama"))


@dataclass
class UniformDecayReport:
    rates: Dict[str, float]
    dispersion: float
    ok: bool
    reason: str = ""


def check_uniform_decay(system: FiberSystem, symbols: Optional[Sequence[str]] = None,
                        phi: Optional[Observable] = None, n_max: int = 20,
                        k_pullback: int = DEFAULT_K_PULLBACK,
                        dispersion_tol: float = DECAY_DISPERSION_TOL) -> UniformDecayReport:
    """Per-symbol decay rates on constant paths; all must be < 1 with small spread."""
    phi = phi or Observable.from_formulas("x_minus_half")
    symbols = list(symbols or system.maps)
    alphabet = tuple(system.maps)
    rates = {}
    for symbol in symbols:
        path = BasePath.constant(alphabet, symbol, k_pullback, n_max)
        profile = decay_profile(system, path, phi, n_max, k_pullback)
        rates[symbol] = profile.fitted_rate if profile.converged else float("inf")
    values = np.array(list(rates.values()))
    dispersion = float(values.max() - values.min()) if np.isfinite(values).all() else float("inf")
    if not (values < 1.0).all():
        return UniformDecayReport(rates, dispersion, False, "fitted decay rate not below 1")
    if dispersion > dispersion_tol:
        return UniformDecayReport(rates, dispersion, False,
                                  f"decay rates spread {dispersion:.3g} > {dispersion_tol:g}")
    return UniformDecayReport(rates, dispersion, True)


def homogenization_ks_threshold(epsilon: float, n1: int, n2: int) -> float:
    """max(0.05 sqrt(eps / 0.05), two-sample critical value + 0.005)."""
    critical = 1.36 * math.sqrt((n1 + n2) / (n1 * n2))
    return max(KS_HOMOGENIZATION_BASE * math.sqrt(epsilon / KS_REFERENCE_EPSILON), critical + 0.005)


@dataclass
class HomogenizationReport:
    table: pd.DataFrame
    mode: str
    epsilon: float
    slow: np.ndarray
    sde: np.ndarray
    passed: bool


def homogenization_compare(spec: FastSlowSpec, system: FiberSystem, v: AnyObservable, sde: HomogenizedSDE,
                           n_paths: int, seed: int, path: Optional[BasePath] = None,
                           track: Optional[DensityTrack] = None, process: Optional[BaseProcess] = None,
                           mode: str = "frozen", dt: Optional[float] = None,
                           k_pullback: int = DEFAULT_K_PULLBACK,
                           runner: Optional['EnsembleRunner'] = None,
                           require_uniform_decay: bool = True) -> HomogenizationReport:
    """Compare x^eps(1) with Z(1): mean, variance and two-sample KS per slow component.

    Mean and variance tolerances are three combined standard errors plus
    eps^2 (1 + |SDE moment|); the second part is reported in the
    ``*_bias_allowance`` columns.

    ``frozen`` drives every slow path with one base path; ``annealed``
    samples a fresh base path per batch from ``process``.
    """
    runner = runner or EnsembleRunner()
    if require_uniform_decay:
        symbols = sorted({path.alphabet[i] for i in np.unique(path.symbols)}) if path is not None else None
        decay = check_uniform_decay(system, symbols)
        if not decay.ok:
            raise HomogenizationRefused(
                "Fast dynamics outside the uniform-decay regime; tightness of the slow process may fail",
                details=decay.reason)

    if mode == "frozen":
        if path is None or track is None:
            raise EstimationError("frozen mode needs a path and its density track")
        slow = integrate_fast_slow(spec, system, path, v, track, n_paths, seed, runner=runner)
    elif mode == "annealed":
        if process is None:
            raise EstimationError("annealed mode needs the base process")
        base = v.base_observable

        def task(index: int, size: int, batch_seed: int) -> np.ndarray:
            sampled = sample_path(process, k_pullback, spec.n_steps, derive_seed(batch_seed, "path"))
            sampled_track = DensityTrack(system, sampled, 0, spec.n_steps, k_pullback)
            centered = center_observable(base, system, sampled, sampled_track)
            return integrate_fast_slow(spec, system, sampled, centered, sampled_track, size,
                                       derive_seed(batch_seed, "fast"))

        slow = np.concatenate(runner.map_batches(task, n_paths, seed, "annealed-fast-slow"))
    else:
        raise EstimationError(f"Unknown homogenization mode '{mode}'", details="expected frozen or annealed")

    dt = min(spec.epsilon ** 2 / 4.0, MAX_EM_DT) if dt is None else dt
    limit = euler_maruyama(sde, spec.xi, dt, 1.0, n_paths, derive_seed(seed, "sde"), runner)
    eps2 = spec.epsilon ** 2
    threshold = homogenization_ks_threshold(spec.epsilon, slow.shape[0], limit.shape[0])

    rows = []
    for c in range(spec.d):
        a_mom = RunningMoments.from_samples(slow[:, c])
        b_mom = RunningMoments.from_samples(limit[:, c])
        mean_gap = abs(float(a_mom.mean - b_mom.mean))
        var_gap = abs(float(a_mom.variance - b_mom.variance))
        mean_bias = eps2 * (1.0 + abs(float(b_mom.mean)))
        var_bias = eps2 * (1.0 + float(b_mom.variance))
        mean_tol = 3.0 * math.sqrt(float(a_mom.stderr) ** 2 + float(b_mom.stderr) ** 2) + mean_bias
        var_tol = 3.0 * math.sqrt(float(a_mom.variance_stderr) ** 2 + float(b_mom.variance_stderr) ** 2) + var_bias
        degenerate = float(a_mom.variance) <= 1e-24 and float(b_mom.variance) <= 1e-24
        ks = float("nan") if degenerate else float(stats.ks_2samp(slow[:, c], limit[:, c]).statistic)
        passed = mean_gap <= mean_tol and var_gap <= var_tol and (degenerate or ks < threshold)
        rows.append({'component': c, 'mean_slow': float(a_mom.mean), 'mean_sde': float(b_mom.mean),
                     'mean_gap': mean_gap, 'mean_tolerance': mean_tol, 'mean_bias_allowance': mean_bias,
                     'var_slow': float(a_mom.variance), 'var_sde': float(b_mom.variance),
                     'var_gap': var_gap, 'var_tolerance': var_tol, 'var_bias_allowance': var_bias,
                     'ks': ks, 'ks_threshold': threshold, 'passed': bool(passed), 'mode': mode})
    table = pd.DataFrame(rows)
    return HomogenizationReport(table, mode, spec.epsilon, slow, limit, bool(table['passed'].all()))


def epsilon_refinement(spec: FastSlowSpec, system: FiberSystem, v: Observable,
                       sde_factory: Callable[[FastSlowSpec], HomogenizedSDE],
                       path: BasePath, n_paths: int, seed: int,
                       epsilons: Sequence[float] = (0.2, 0.1, 0.05),
                       k_pullback: int = DEFAULT_K_PULLBACK,
                       runner: Optional['EnsembleRunner'] = None) -> pd.DataFrame:
    """KS distance to the SDE law for decreasing epsilon, with a monotone-trend flag.

    Each epsilon gets a fresh ensemble; ``path`` must cover the longest horizon.
    """
    rows = []
    noise = 1.36 * math.sqrt(2.0 / n_paths)
    for i, eps in enumerate(sorted(epsilons, reverse=True)):
        scaled = FastSlowSpec(spec.d, spec.e, spec.a, spec.b, eps, spec.xi)
        track = DensityTrack(system, path, 0, scaled.n_steps, k_pullback)
        centered = center_observable(v, system, path, track)
        report = homogenization_compare(scaled, system, centered, sde_factory(scaled), n_paths,
                                        derive_seed(seed, "epsilon", i), path=path, track=track,
                                        runner=runner, require_uniform_decay=(i == 0))
        rows.append({'epsilon': eps, 'ks': float(report.table['ks'].max()),
                     'passed': report.passed})
    table = pd.DataFrame(rows)
    ks = table['ks'].to_numpy()
    table['non_increasing'] = np.concatenate([[True], ks[1:] <= ks[:-1] + noise])
    return table


def empirical_cdf_table(a: np.ndarray, b: np.ndarray, n_points: int = 512) -> pd.DataFrame:
    """Both empirical CDFs on a common grid spanning the pooled samples."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    pooled = np.concatenate([a, b])
    grid = np.linspace(pooled.min(), pooled.max(), n_points)
    return pd.DataFrame({'x': grid,
                         'cdf_slow': np.searchsorted(a, grid, side='right') / a.size,
                         'cdf_sde': np.searchsorted(b, grid, side='right') / b.size})

# ==================== CONSOLE OUTPUT ====================


class ConsoleColors:
    """ANSI color codes for terminal output; disabled when stdout is not a TTY."""
    GREEN = '\033[92m'
    RED = '\033[91m'
    YELLOW = '\033[93m'
    CYAN = '\033[96m'
    BOLD = '\033[1m'
    RESET = '\033[0m'

    _enabled = sys.stdout.isatty() and (os.name != 'nt' or os.environ.get('TERM'))

    @classmethod
    def _wrap(cls, color: str, text: str) -> str:
        return f"{color}{text}{cls.RESET}" if cls._enabled else text

    @classmethod
    def success(cls, text: str) -> str:
        return cls._wrap(cls.GREEN, text)

    @classmethod
    def error(cls, text: str) -> str:
        return cls._wrap(cls.RED, text)

    @classmethod
    def warning(cls, text: str) -> str:
        return cls._wrap(cls.YELLOW, text)

    @classmethod
    def info(cls, text: str) -> str:
        return cls._wrap(cls.CYAN, text)

    @classmethod
    def bold(cls, text: str) -> str:
        return cls._wrap(cls.BOLD, text)

    @classmethod
    def status(cls, success: bool, text: str) -> str:
        return cls.success(text) if success else cls.error(text)


# ==================== CONFIGURATION ====================

SCENARIOS = ("decay", "decomposition", "clt", "lil", "iterated_wip", "moments", "homogenization", "conditions")
HOMOGENIZATION_MODES = ("frozen", "annealed")
EXECUTION_KEYS = ("output_dir", "workers", "cache_dir", "dump")
DEFAULT_OUTPUT_DIR = "results"


@dataclass
class NumericsConfig:
    """Discretization and ensemble sizes."""
    n_bins: int = DEFAULT_N_BINS
    truncation_k: Optional[int] = None
    n_lags: int = DEFAULT_N_LAGS
    n: int = 10000
    n_paths: int = 2000
    epsilon: float = 0.05
    dt: Optional[float] = None
    k_pullback: int = DEFAULT_K_PULLBACK
    positions: int = DEFAULT_POSITIONS
    batch_size: int = DEFAULT_BATCH_SIZE
    decay_n_max: int = 20
    decay_rate_bound: Optional[float] = None
    n_grid: List[int] = field(default_factory=lambda: [1000, 3162, 10000])
    p: int = 4
    truncation_tol: float = DEFAULT_TRUNCATION_TOL
    vanishing_tol: float = 1e-3
    reverse_n: int = 4
    reverse_paths: int = 0


@dataclass
class ConditionsConfig:
    """Inputs of the expansion, Hoelder-clause, mixing and tameness checks."""
    alpha: float = 1.0
    rho: Dict[str, float] = field(default_factory=dict)
    osc: Dict[str, float] = field(default_factory=dict)
    holder_H: Dict[str, float] = field(default_factory=dict)
    k_max: int = DEFAULT_K_MAX
    tame_rate: float = 0.1
    tame_q: float = 4.0
    surrogate_bins: int = 256
    path_length: int = 1000


@dataclass
class FastSlowConfig:
    d: int = 1
    e: int = 1
    a: Dict[str, Any] = field(default_factory=lambda: {"family": "constant", "value": 0.0})
    b: Dict[str, Any] = field(default_factory=lambda: {"family": "constant", "value": 1.0})
    xi: List[float] = field(default_factory=lambda: [0.0])
    mode: str = "frozen"
    refinement: bool = False


def _section(cls, data: Optional[Dict[str, Any]], name: str, unknown: List[str]):
    data = dict(data or {})
    known = set(cls.__dataclass_fields__)
    unknown.extend(f"{name}.{key}" for key in sorted(set(data) - known))
    return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class ExperimentConfig:
    """One experiment: scenario, base process, maps, observable and numerics."""
    scenario: str
    base: Dict[str, Any]
    maps: Dict[str, Dict[str, Any]]
    observable: Dict[str, Any]
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    conditions: ConditionsConfig = field(default_factory=ConditionsConfig)
    fast_slow: Optional[FastSlowConfig] = None
    oracles: Dict[str, Any] = field(default_factory=dict)
    master_seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_DIR
    workers: int = 1
    cache_dir: Optional[str] = None
    dump: bool = False
    name: str = ""
    unknown_fields: List[str] = field(default_factory=list, compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        if not isinstance(data, dict):
            raise ConfigurationError("Config must be a JSON object")
        unknown: List[str] = []
        top_level = {'scenario', 'base', 'maps', 'observable', 'numerics', 'conditions', 'fast_slow',
                     'oracles', 'master_seed', 'output_dir', 'workers', 'cache_dir', 'dump', 'name'}
        unknown.extend(sorted(set(data) - top_level))
        fast_slow = data.get('fast_slow')
        return cls(
            scenario=data.get('scenario', ''),
            base=dict(data.get('base') or {}),
            maps={k: dict(v) for k, v in (data.get('maps') or {}).items()},
            observable=dict(data.get('observable') or {}),
            numerics=_section(NumericsConfig, data.get('numerics'), 'numerics', unknown),
            conditions=_section(ConditionsConfig, data.get('conditions'), 'conditions', unknown),
            fast_slow=_section(FastSlowConfig, fast_slow, 'fast_slow', unknown) if fast_slow is not None else None,
            oracles=dict(data.get('oracles') or {}),
            master_seed=data.get('master_seed', 0),
            output_dir=data.get('output_dir') or os.environ.get('QLAB_OUTPUT_DIR', DEFAULT_OUTPUT_DIR),
            workers=data.get('workers', 1),
            cache_dir=data.get('cache_dir'),
            dump=bool(data.get('dump', False)),
            name=data.get('name', ''),
            unknown_fields=unknown,
        )

    def to_dict(self) -> Dict[str, Any]:
        out = {
            'name': self.name,
            'scenario': self.scenario,
            'base': self.base,
            'maps': self.maps,
            'observable': self.observable,
            'numerics': dict(self.numerics.__dict__),
            'conditions': dict(self.conditions.__dict__),
            'oracles': self.oracles,
            'master_seed': self.master_seed,
            'output_dir': self.output_dir,
            'workers': self.workers,
            'cache_dir': self.cache_dir,
            'dump': self.dump,
        }
        if self.fast_slow is not None:
            out['fast_slow'] = dict(self.fast_slow.__dict__)
        return out

    @property
    def config_hash(self) -> str:
        """sha256 of the canonical experiment content (execution settings excluded), 12 hex chars."""
        content = {k: v for k, v in self.to_dict().items() if k not in EXECUTION_KEYS}
        canonical = json.dumps(content, sort_keys=True, separators=(",", ":"), default=float)
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]


class ConfigValidator:
    """Field-level checks returning (is_valid, message)."""

    @staticmethod
    def validate_count(name: str, value: Any, minimum: int = 1) -> Tuple[bool, Optional[str]]:
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            return False, f"{name} must be an integer >= {minimum}"
        return True, None

    @staticmethod
    def validate_epsilon(value: Any) -> Tuple[bool, Optional[str]]:
        if not isinstance(value, (int, float)) or not (0.0 < float(value) < 1.0):
            return False, "epsilon must be in (0,1)"
        return True, None

    @staticmethod
    def validate_probability_vector(name: str, values: Any, size: int) -> Tuple[bool, Optional[str]]:
        try:
            vec = np.asarray(values, dtype=float)
        except (TypeError, ValueError):
            return False, f"{name} must be a list of numbers"
        if vec.shape != (size,):
            return False, f"{name} must have {size} entries"
        if (vec < 0).any():
            return False, f"{name} has negative entries"
        if abs(vec.sum() - 1.0) > STOCHASTIC_TOL:
            return False, f"{name} sums to {vec.sum():.12g}, expected 1"
        return True, None

    @staticmethod
    def validate_transition(values: Any, size: int) -> Tuple[bool, Optional[str]]:
        try:
            mat = np.asarray(values, dtype=float)
        except (TypeError, ValueError):
            return False, "base.transition must be a square list of rows"
        if mat.shape != (size, size):
            return False, f"base.transition must be {size}x{size}"
        if (mat < 0).any():
            return False, "base.transition has negative entries"
        sums = mat.sum(axis=1)
        for i, s in enumerate(sums):
            if abs(s - 1.0) > STOCHASTIC_TOL:
                return False, f"base.transition row {i} sums to {s:.12g}, expected 1"
        if not is_primitive(mat):
            return False, "base.transition is not primitive (reducible or periodic)"
        return True, None


def build_process(base: Dict[str, Any]) -> BaseProcess:
    kind = base.get("kind", "iid")
    if kind == "iid":
        return BaseProcess.iid(base.get("alphabet", []), base.get("weights"))
    if kind == "markov":
        return BaseProcess.markov(base.get("alphabet", []), base.get("transition"))
    raise BaseProcessError(f"Unknown base process kind '{kind}'")


def build_maps(maps: Dict[str, Dict[str, Any]]) -> Dict[str, FiberMap]:
    return {symbol: build_map(symbol, record) for symbol, record in maps.items()}


def validate(config: ExperimentConfig) -> List[str]:
    """Every violation in the config, each naming its field; empty iff runnable."""
    violations = [f"unknown field {name}" for name in config.unknown_fields]

    if config.scenario not in SCENARIOS:
        violations.append(f"scenario must be one of {', '.join(SCENARIOS)}")

    alphabet = list(config.base.get("alphabet") or [])
    kind = config.base.get("kind", "iid")
    if not alphabet:
        violations.append("base.alphabet must not be empty")
    elif len(set(alphabet)) != len(alphabet):
        violations.append("base.alphabet has duplicate symbols")
    elif kind == "iid":
        if config.base.get("weights") is not None:
            ok, msg = ConfigValidator.validate_probability_vector("base.weights", config.base["weights"],
                                                                  len(alphabet))
            if not ok:
                violations.append(msg)
    elif kind == "markov":
        ok, msg = ConfigValidator.validate_transition(config.base.get("transition"), len(alphabet))
        if not ok:
            violations.append(msg)
    else:
        violations.append(f"base.kind must be one of {', '.join(BASE_KINDS)}")

    for symbol in alphabet:
        if symbol not in config.maps:
            violations.append(f"maps.{symbol} missing")
    for symbol, record in config.maps.items():
        try:
            build_map(symbol, record)
        except MapDefinitionError as e:
            violations.append(f"maps.{symbol}: {e}")

    try:
        observable = Observable.from_config(config.observable)
    except ConfigurationError as e:
        observable = None
        violations.append(f"observable: {e}")

    num = config.numerics
    for name in ("n_bins", "n_lags", "n", "n_paths", "k_pullback", "positions", "batch_size", "decay_n_max",
                 "reverse_n"):
        minimum = 2 if name in ("n_bins", "reverse_n") else (0 if name in ("k_pullback", "n_lags") else 1)
        ok, msg = ConfigValidator.validate_count(f"numerics.{name}", getattr(num, name), minimum)
        if not ok:
            violations.append(msg)
    if num.truncation_k is not None:
        ok, msg = ConfigValidator.validate_count("numerics.truncation_k", num.truncation_k, 0)
        if not ok:
            violations.append(msg)
    ok, msg = ConfigValidator.validate_count("numerics.reverse_paths", num.reverse_paths, 0)
    if not ok:
        violations.append(msg)
    ok, msg = ConfigValidator.validate_epsilon(num.epsilon)
    if not ok:
        violations.append(msg)
    if num.dt is not None and not (0.0 < float(num.dt) <= MAX_EM_DT):
        violations.append(f"numerics.dt must be in (0, {MAX_EM_DT:g}]")
    if num.p not in MOMENT_ORDERS:
        violations.append(f"numerics.p must be one of {MOMENT_ORDERS}")
    if config.scenario == "moments" and (len(num.n_grid) < 2 or min(num.n_grid) < 1):
        violations.append("numerics.n_grid needs at least two positive sizes")
    if config.scenario == "lil" and num.n < LIL_MIN_N:
        violations.append(f"numerics.n must be >= {LIL_MIN_N} for the lil scenario")

    ok, msg = ConfigValidator.validate_count("workers", config.workers, 0)
    if not ok:
        violations.append(msg)
    ok, msg = ConfigValidator.validate_count("master_seed", config.master_seed, 0)
    if not ok:
        violations.append(msg)

    cond = config.conditions
    if not (0.0 < cond.alpha <= 1.0):
        violations.append("conditions.alpha must be in (0,1]")
    for symbol, value in cond.rho.items():
        if not (0.0 < float(value) <= 1.0):
            violations.append(f"conditions.rho.{symbol} must be in (0,1]")

    if config.scenario == "homogenization":
        fs = config.fast_slow
        if fs is None:
            violations.append("fast_slow section required for the homogenization scenario")
        else:
            if fs.mode not in HOMOGENIZATION_MODES:
                violations.append(f"fast_slow.mode must be one of {', '.join(HOMOGENIZATION_MODES)}")
            if not isinstance(fs.refinement, bool):
                violations.append("fast_slow.refinement must be true or false")
            elif fs.refinement and fs.mode != "frozen":
                violations.append("fast_slow.refinement needs mode frozen")
            if observable is not None and observable.dim != fs.e:
                violations.append(f"fast_slow.e ({fs.e}) must equal the observable dimension ({observable.dim})")
            try:
                FastSlowSpec(fs.d, fs.e, build_field(fs.a, (fs.d,), fs.d), build_field(fs.b, (fs.d, fs.e), fs.d),
                             num.epsilon if 0.0 < num.epsilon < 1.0 else 0.5, np.asarray(fs.xi, dtype=float))
            except (ConfigurationError, ValueError) as e:
                violations.append(f"fast_slow: {e}")
    return violations


def load_config(config_file: Union[str, Path]) -> ExperimentConfig:
    path = Path(config_file)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError("Config file not found", config_file=str(path)) from None
    except json.JSONDecodeError as e:
        raise ConfigurationError("Invalid JSON in config file", config_file=str(path),
                                 details=f"line {e.lineno}, column {e.colno}: {e.msg}") from None
    except OSError as e:
        raise ConfigurationError("Cannot read config file", config_file=str(path), details=str(e)) from None
    return ExperimentConfig.from_dict(data)


def apply_overrides(config: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None,
                    threads: Optional[int] = None, n_bins: Optional[int] = None,
                    cache_dir: Optional[str] = None, dump: Optional[bool] = None) -> ExperimentConfig:
    """Return a copy with CLI overrides applied."""
    numerics = replace(config.numerics, n_bins=n_bins) if n_bins is not None else config.numerics
    return replace(
        config,
        numerics=numerics,
        master_seed=config.master_seed if seed is None else seed,
        output_dir=config.output_dir if out is None else out,
        workers=config.workers if threads is None else threads,
        cache_dir=config.cache_dir if cache_dir is None else cache_dir,
        dump=config.dump if dump is None else dump,
    )


# ==================== PRESETS ====================

_DOUBLING_BASE = {"kind": "iid", "alphabet": ["T2"], "weights": [1.0]}
_DOUBLING_MAPS = {"T2": {"family": "beta", "beta": 2}}
_RANDOM_BETA_BASE = {"kind": "iid", "alphabet": ["b2", "b3"], "weights": [0.5, 0.5]}
_RANDOM_BETA_MAPS = {"b2": {"family": "beta", "beta": 2}, "b3": {"family": "beta", "beta": 3}}
_LINEAR = {"name": "x-1/2", "components": [{"formula": "x_minus_half"}]}
_COSINE = {"name": "cos2pi", "components": [{"formula": "cos2pi"}]}
_SINE_PLUS_TWO = {"family": "sinusoidal", "amplitude": 1.0, "frequency": 1.0, "phase": 0.0, "offset": 2.0}


def _preset(scenario: str, observable: Dict[str, Any], numerics: Dict[str, Any],
            base: Optional[Dict[str, Any]] = None, maps: Optional[Dict[str, Any]] = None,
            **extra: Any) -> Dict[str, Any]:
    return {'scenario': scenario, 'base': base or _DOUBLING_BASE, 'maps': maps or _DOUBLING_MAPS,
            'observable': observable, 'numerics': numerics, **extra}


PRESETS: Dict[str, Tuple[str, Dict[str, Any]]] = {
    "doubling-clt": (
        "CLT for cos(2 pi x) under the doubling map against Normal(0, 1/2)",
        _preset("clt", _COSINE, {"n_bins": 4096, "n": 10000, "n_paths": 5000},
                oracles={"sigma": {"value": 0.5, "tolerance": 0.01}})),
    "doubling-linear-clt": (
        "CLT for x - 1/2 under the doubling map against Normal(0, 1/4)",
        _preset("clt", _LINEAR, {"n_bins": 4096, "n": 10000, "n_paths": 5000},
                oracles={"sigma": {"value": 0.25, "tolerance": 0.01}})),
    "doubling-decomposition": (
        "Martingale-coboundary decomposition of x - 1/2 under the doubling map; Sigma = 1/4, E = 1/12",
        _preset("decomposition", _LINEAR, {"n_bins": 4096, "truncation_k": 30, "positions": 64},
                oracles={"sigma": {"value": 0.25, "tolerance": 0.01},
                         "E": {"value": 1.0 / 12.0, "tolerance": 0.005}})),
    "doubling-cos-decomposition": (
        "Decomposition of cos(2 pi x) under the doubling map; Sigma = 1/2, E = 0",
        _preset("decomposition", _COSINE, {"n_bins": 4096, "truncation_k": 30, "positions": 64},
                oracles={"sigma": {"value": 0.5, "tolerance": 0.01}, "E": {"value": 0.0, "tolerance": 0.005}})),
    "random-beta-decay": (
        "Decay of correlations for x - 1/2 under i.i.d. beta in {2, 3}",
        _preset("decay", _LINEAR, {"n_bins": 4096, "decay_n_max": 20, "decay_rate_bound": 0.5},
                base=_RANDOM_BETA_BASE, maps=_RANDOM_BETA_MAPS)),
    "random-beta-decomposition": (
        "Decomposition vanishing and reconstruction for x - 1/2 under i.i.d. beta in {2, 3}",
        _preset("decomposition", _LINEAR, {"n_bins": 4096, "truncation_k": 40, "positions": 64},
                base=_RANDOM_BETA_BASE, maps=_RANDOM_BETA_MAPS)),
    "markov-lasota-yorke-decomposition": (
        "Decomposition of x - 1/2 for a Markov-driven pair of non-Lebesgue-preserving maps",
        _preset("decomposition", _LINEAR, {"n_bins": 1024, "positions": 64, "n_lags": 40},
                base={"kind": "markov", "alphabet": ["LY", "MX"], "transition": [[0.7, 0.3], [0.4, 0.6]]},
                maps={"LY": {"family": "lasota_yorke", "breakpoints": [0.0, 0.4, 1.0],
                             "slopes": [2.5, -1.0 / 0.6]},
                      "MX": {"family": "mixed", "q": 1, "d": 2, "l": 0.6, "eta": 2.0}})),
    "coboundary-degeneracy": (
        "Degenerate covariance for the coboundary x(1-x) - Tx(1-Tx) under the doubling map",
        _preset("decomposition", {"name": "coboundary", "components": [{"formula": "coboundary"}]},
                {"n_bins": 4096, "truncation_k": 30, "positions": 64},
                oracles={"sigma": {"value": 0.0, "degenerate": True}})),
    "doubling-wip": (
        "Iterated invariance principle: mean of WW(1) for x - 1/2 against E = 1/12",
        _preset("iterated_wip", _LINEAR, {"n_bins": 4096, "n": 10000, "n_paths": 10000},
                oracles={"E": {"value": 1.0 / 12.0, "tolerance": 0.005}})),
    "doubling-cos-wip": (
        "Iterated invariance principle: mean of WW(1) for cos(2 pi x) against E = 0",
        _preset("iterated_wip", _COSINE, {"n_bins": 4096, "n": 10000, "n_paths": 10000},
                oracles={"E": {"value": 0.0, "tolerance": 0.005}})),
    "doubling-moments": (
        "Moment scaling of max |S_k| and max |S2_k| for x - 1/2 under the doubling map",
        _preset("moments", _LINEAR, {"n_bins": 4096, "n_grid": [1000, 3162, 10000], "n_paths": 2000, "p": 4})),
    "doubling-lil": (
        "Law of the iterated logarithm envelope for x - 1/2 (diagnostic)",
        _preset("lil", _LINEAR, {"n_bins": 4096, "n": 100000, "n_paths": 200},
                oracles={"sigma": {"value": 0.25, "tolerance": 0.01}})),
    "doubling-homogenization": (
        "Fast-slow homogenization with b(x) = sin x + 2 driven by x - 1/2 (corrected drift)",
        _preset("homogenization", _LINEAR, {"n_bins": 4096, "epsilon": 0.05, "n_paths": 2000},
                fast_slow={"d": 1, "e": 1, "a": {"family": "constant", "value": 0.0}, "b": _SINE_PLUS_TWO,
                           "xi": [0.0], "mode": "frozen", "refinement": True},
                oracles={"sigma": {"value": 0.25, "tolerance": 0.01},
                         "E": {"value": 1.0 / 12.0, "tolerance": 0.005}})),
    "doubling-cos-homogenization": (
        "Fast-slow homogenization with b(x) = sin x + 2 driven by cos(2 pi x) (E = 0)",
        _preset("homogenization", _COSINE, {"n_bins": 4096, "epsilon": 0.05, "n_paths": 2000},
                fast_slow={"d": 1, "e": 1, "a": {"family": "constant", "value": 0.0}, "b": _SINE_PLUS_TWO,
                           "xi": [0.0], "mode": "frozen"},
                oracles={"sigma": {"value": 0.5, "tolerance": 0.01}, "E": {"value": 0.0, "tolerance": 0.005}})),
    "conditions-iid": (
        "Expansion, mixing and Hoelder-clause checks for i.i.d. beta in {2, 3} with rho = 1/2",
        _preset("conditions", _LINEAR, {}, base=_RANDOM_BETA_BASE, maps=_RANDOM_BETA_MAPS,
                conditions={"rho": {"b2": 0.5, "b3": 0.5}})),
    "conditions-markov": (
        "Mixing criterion for a sticky Markov base with surrogate contraction factors",
        _preset("conditions", _LINEAR, {},
                base={"kind": "markov", "alphabet": ["b2", "b3"], "transition": [[0.9, 0.1], [0.1, 0.9]]},
                maps=_RANDOM_BETA_MAPS)),
}


def list_presets() -> List[Tuple[str, str]]:
    return [(name, description) for name, (description, _) in PRESETS.items()]


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"Unknown preset '{name}'", details=f"available: {', '.join(PRESETS)}")
    data = json.loads(json.dumps(PRESETS[name][1]))
    data['name'] = name
    return ExperimentConfig.from_dict(data)


def generate_sample_config(output_path: str = "quenched_lab_config.json", preset: str = "doubling-clt") -> bool:
    """Write a preset as an editable JSON config file."""
    config = load_preset(preset)
    print()
    print("=" * 60)
    print("GENERATING SAMPLE CONFIGURATION FILE")
    print("=" * 60)
    print()
    try:
        with open(output_path, 'w') as f:
            json.dump(config.to_dict(), f, indent=2)
        print(f"✓ Sample configuration file created: {output_path}")
        print()
        print("Next steps:")
        print(f"  1. Edit {output_path} (see docs/CONFIG_FORMAT.md)")
        print(f"  2. quenched_lab validate {output_path}")
        print(f"  3. quenched_lab run {output_path}")
        print()
        print("=" * 60)
        return True
    except (PermissionError, OSError) as e:
        print(ConsoleColors.error(f"ERROR: Failed to create sample config: {str(e)}"))
        return False


# ==================== SCENARIOS ====================


@dataclass
class Criterion:
    """One result row; gating rows decide the exit status."""
    name: str
    value: float
    stderr: float = 0.0
    tolerance: float = float("nan")
    passed: bool = True
    method: str = ""
    gating: bool = True

    def to_row(self, config_hash: str) -> Dict[str, Any]:
        return {'name': self.name, 'value': self.value, 'stderr': self.stderr, 'tolerance': self.tolerance,
                'pass': self.passed, 'method': self.method, 'config_hash': config_hash}


def diagnostic(name: str, value: float, stderr: float = 0.0, method: str = "diagnostic",
               tolerance: float = float("nan")) -> Criterion:
    return Criterion(name, float(value), float(stderr), tolerance, True, method, gating=False)


@dataclass
class RunSummary:
    """Outcome of one run."""
    config_hash: str
    scenario: str
    criteria: List[Criterion]
    timings: Dict[str, float] = field(default_factory=dict)
    output_files: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria if c.gating)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 2

    def to_dict(self) -> Dict[str, Any]:
        return {
            'config_hash': self.config_hash,
            'scenario': self.scenario,
            'passed': self.passed,
            'criteria': [{**c.to_row(self.config_hash), 'gating': c.gating} for c in self.criteria],
            'timings': {k: round(v, 3) for k, v in self.timings.items()},
            'output_files': self.output_files,
        }


@dataclass
class LabContext:
    config: ExperimentConfig
    process: BaseProcess
    system: FiberSystem
    observable: Observable
    runner: EnsembleRunner
    perf: PerformanceTracker
    logger: logging.Logger
    dump_dir: Optional[Path] = None

    def sample_path(self, k_past: int, n_future: int) -> BasePath:
        seed = derive_seed(self.config.master_seed, "base-path")
        return sample_path(self.process, k_past, n_future, seed)

    def seed(self, stage: str) -> int:
        return derive_seed(self.config.master_seed, stage)

    def dump(self, name: str, frame: pd.DataFrame, header: Sequence[str] = ()):
        if self.dump_dir is not None:
            _write_csv(frame, self.dump_dir / name, header)


def _entries(prefix: str, matrix: np.ndarray) -> Iterator[Tuple[str, int, int]]:
    for b in range(matrix.shape[0]):
        for g in range(matrix.shape[1]):
            yield f"{prefix}[{b},{g}]", b, g


def _oracle(ctx: LabContext, key: str) -> Optional[Tuple[np.ndarray, float, bool]]:
    """(matrix, tolerance, degenerate flag) for an oracle entry."""
    record = ctx.config.oracles.get(key)
    if record is None:
        return None
    if not isinstance(record, dict):
        record = {'value': record}
    return (_as_matrix(record.get('value', 0.0), ctx.observable.dim, key), float(record.get('tolerance', 0.0)),
            bool(record.get('degenerate', False)))


def _estimate_criteria(ctx: LabContext, prefix: str, estimate: Estimate, oracle_key: str) -> List[Criterion]:
    oracle = _oracle(ctx, oracle_key)
    rows = []
    for name, b, g in _entries(prefix, estimate.value):
        value, se = float(estimate.value[b, g]), float(estimate.stderr[b, g])
        if oracle is None or oracle[2]:
            rows.append(diagnostic(name, value, se, estimate.method))
        else:
            gap = abs(value - oracle[0][b, g])
            rows.append(Criterion(name, value, se, oracle[1], bool(gap <= oracle[1]), estimate.method))
    return rows


def _limit_matrices(ctx: LabContext, path: BasePath, track: DensityTrack,
                    v: CenteredObservable) -> Tuple[np.ndarray, np.ndarray, str]:
    """Sigma and E from oracles when both are given, otherwise correlation sums."""
    sigma_oracle, e_oracle = _oracle(ctx, "sigma"), _oracle(ctx, "E")
    if sigma_oracle is not None and e_oracle is not None:
        return sigma_oracle[0], e_oracle[0], "oracle"
    num = ctx.config.numerics
    ctx.perf.start("Limit Estimates")
    limits = estimate_limits(ctx.system, path, v, track, num.n_lags, num.positions)
    ctx.perf.end("Limit Estimates")
    sigma = sigma_oracle[0] if sigma_oracle is not None else limits.sigma.value
    E = e_oracle[0] if e_oracle is not None else limits.E.value
    return sigma, E, "correlation-sum"


def _needs_estimates(ctx: LabContext) -> bool:
    return _oracle(ctx, "sigma") is None or _oracle(ctx, "E") is None


def _centered_window(ctx: LabContext, horizon: int) -> Tuple[BasePath, DensityTrack, CenteredObservable]:
    """Path, densities and centered observable covering [0, horizon] plus any estimation window."""
    num = ctx.config.numerics
    extent = max(horizon, num.positions + num.n_lags if _needs_estimates(ctx) else 0)
    path = ctx.sample_path(num.k_pullback, extent)
    ctx.perf.start("Equivariant Densities")
    track = DensityTrack(ctx.system, path, 0, extent, num.k_pullback)
    v = center_observable(ctx.observable, ctx.system, path, track)
    ctx.perf.end("Equivariant Densities")
    return path, track, v


def scenario_conditions(ctx: LabContext) -> List[Criterion]:
    cfg = ctx.config.conditions
    process = ctx.process
    marginal = dict(zip(process.alphabet, process.marginal))
    rows: List[Criterion] = []

    reports = expansion_report(ctx.system.maps, marginal, cfg.alpha, cfg.osc, cfg.holder_H)
    for symbol, r in reports.items():
        rows.append(diagnostic(f"a_omega[{symbol}]", r.a_omega, method="branch-constants"))
        rows.append(diagnostic(f"B_omega[{symbol}]", r.B_omega, method="branch-constants"))
        rows.append(Criterion(f"contraction[{symbol}]", r.s_omega, tolerance=1.0, passed=r.contraction_ok,
                              method="s_omega < 1"))
    rows.append(diagnostic("mean_a_omega", mean_expansion_factor(reports), method="branch-constants"))

    path = ctx.sample_path(0, cfg.path_length)
    pairs = holder_clause_pairs(reports, path)
    ctx.dump("holder_pairs.csv", pairs)
    slack = float((pairs['lhs'] - pairs['rhs']).max()) if len(pairs) else 0.0
    rows.append(Criterion("holder_clause", slack, tolerance=0.0, passed=bool(pairs['ok'].all()),
                          method="consecutive-pairs"))

    if cfg.rho:
        rho, method = cfg.rho, "configured-rho"
    else:
        rho, method = rho_surrogates(ctx.system, cfg.surrogate_bins), "surrogate"
        for symbol, value in rho.items():
            rows.append(diagnostic(f"rho_surrogate[{symbol}]", value, method="surrogate"))
    mixing = check_upper_mixing_criterion(process, rho, cfg.k_max)
    rows.append(Criterion("upper_mixing", float(mixing.psi_upper[-1]), tolerance=mixing.threshold,
                          passed=mixing.criterion_ok, method=method))
    rows.append(diagnostic("mean_contraction", mixing.e_rho, method=method))
    if mixing.envelope_rate is not None:
        rows.append(diagnostic("psi_envelope_rate", mixing.envelope_rate, method="log-linear-fit"))
    if mixing.reason:
        ctx.logger.warning(f"Mixing criterion: {mixing.reason}")

    n = np.arange(1, path.n_future + 1)
    b_values = [reports[path.symbol(int(j))].B_omega for j in n]
    tame = tame_B(b_values, np.exp(-cfg.tame_rate * n), cfg.tame_q)
    rows.append(diagnostic("tame_R_hat", tame.R_hat, method="finite-sample-sup",
                           tolerance=tame.moment_bound ** (1.0 / cfg.tame_q)))
    return rows


def scenario_decay(ctx: LabContext) -> List[Criterion]:
    num = ctx.config.numerics
    path = ctx.sample_path(num.k_pullback, num.decay_n_max)
    ctx.perf.start("Decay Profile")
    profile = decay_profile(ctx.system, path, ctx.observable, num.decay_n_max, num.k_pullback)
    ctx.perf.end("Decay Profile")
    ctx.dump("decay_profile.csv", profile.to_frame())

    bound = num.decay_rate_bound
    if bound is None:
        try:
            marginal = dict(zip(ctx.process.alphabet, ctx.process.marginal))
            bound = mean_expansion_factor(expansion_report(ctx.system.maps, marginal,
                                                           ctx.config.conditions.alpha, {}, {}))
        except MapDefinitionError as e:
            ctx.logger.warning(f"No expansion bound for the decay check: {e}")
    rows = []
    if bound is None:
        rows.append(diagnostic("decay_rate", profile.fitted_rate, method="ulam-sup-fit"))
    else:
        tolerance = bound + 0.05
        rows.append(Criterion("decay_rate", profile.fitted_rate, tolerance=tolerance,
                              passed=bool(profile.converged and profile.fitted_rate <= tolerance),
                              method="ulam-sup-fit"))
    rows.append(diagnostic("decay_K", profile.fitted_K, method="ulam-sup-fit"))
    rows.append(diagnostic("masked_bins", float(profile.excluded_bins.max()), method="density-floor"))

    means = []
    for n_bins in (256, 512, 1024):
        coarse = ctx.system.with_n_bins(n_bins)
        h = equivariant_density(coarse, path, num.k_pullback).mass
        means.append(float(fiber_values(ctx.observable, coarse, path, 0)[:, 0] @ h))
    rows.append(diagnostic("grid_refinement", max(abs(means[0] - means[1]) * 256, abs(means[1] - means[2]) * 512),
                           method="N*|mean_N - mean_2N|"))
    refinement = pullback_refinement(ctx.system, path, min(num.k_pullback, 20))
    rows.append(diagnostic("pullback_refinement", float(refinement[-1]) if refinement.size else 0.0,
                           method="l1"))

    if len(ctx.process.alphabet) > 1:
        ctx.perf.start("Annealed Decay")
        annealed = annealed_decay(ctx.process, ctx.system, ctx.observable, num.decay_n_max,
                                  min(num.n_paths, 16), ctx.seed("annealed-decay"), num.k_pullback)
        ctx.perf.end("Annealed Decay")
        ctx.dump("annealed_decay.csv", annealed.per_path)
        rows.append(diagnostic("annealed_decay_rate", annealed.fitted_rate, method="annealed-fit"))
    return rows


def scenario_decomposition(ctx: LabContext) -> List[Criterion]:
    num = ctx.config.numerics
    system = ctx.system
    n_bins = system.n_bins
    positions, n_lags = num.positions, num.n_lags
    k_past = num.k_pullback + 10 + (num.truncation_k if num.truncation_k is not None else DEFAULT_TRUNCATION_K_MAX)
    path = ctx.sample_path(k_past, max(positions + n_lags + 1, num.decay_n_max))

    if num.truncation_k is not None:
        k = num.truncation_k
    else:
        profile = decay_profile(system, path, ctx.observable, num.decay_n_max, num.k_pullback)
        k = choose_truncation(profile, profile.phi_scale, num.truncation_tol)
    ctx.logger.info(f"Truncation k = {k}")

    ctx.perf.start("Equivariant Densities")
    track = DensityTrack(system, path, -(k + 10), positions + n_lags, num.k_pullback)
    v = center_observable(ctx.observable, system, path, track)
    ctx.perf.end("Equivariant Densities")

    ctx.perf.start("Decomposition")
    chi = compute_chi(system, path, v, k, track, 0, positions + 1)
    m = compute_m(system, path, v, chi)
    residual = verify_vanishing(system, path, m, track)
    recon = reconstruction_error(system, path, v, chi, m)
    chi_more = compute_chi(system, path, v, k + 10, track, 0, 1)
    truncation_gap = float(np.abs(chi_more.values - chi.values[:2]).max())
    ctx.perf.end("Decomposition")
    if ctx.dump_dir is not None:
        dump_decomposition_csv(chi, m, residual, ctx.dump_dir)

    ctx.perf.start("Limit Estimates")
    limits = estimate_limits(system, path, v, track, n_lags, positions)
    sigma_m = estimate_sigma_martingale(system, path, m, track)
    drift = drift_correction_limit(system, path, v, m, track, n_lags, positions, E=limits.E)
    ctx.perf.end("Limit Estimates")

    rows = [
        Criterion("vanishing_residual", float(residual.max()), tolerance=num.vanishing_tol,
                  passed=bool(residual.max() <= num.vanishing_tol), method="transfer identity"),
        Criterion("reconstruction_error", recon, tolerance=2.0 / n_bins, passed=bool(recon <= 2.0 / n_bins),
                  method="bin-average identity"),
        Criterion("truncation_consistency", truncation_gap, tolerance=chi.est_error + 1e-12,
                  passed=bool(truncation_gap <= chi.est_error + 1e-12), method=f"k={k} vs k={k + 10}"),
    ]
    rows += _estimate_criteria(ctx, "sigma_correlation", limits.sigma, "sigma")
    rows += _estimate_criteria(ctx, "sigma_martingale", sigma_m, "sigma")
    rows += _estimate_criteria(ctx, "E", limits.E, "E")
    for name, b, g in _entries("lag0", limits.lag0.value):
        rows.append(diagnostic(name, limits.lag0.value[b, g], limits.lag0.stderr[b, g], limits.lag0.method))
    rows.append(diagnostic("sigma_tail_bound", limits.sigma.tail_bound, method="geometric-tail"))

    agreement = float(np.abs(limits.sigma.value - sigma_m.value).max())
    agreement_tol = float((3.0 * np.sqrt(limits.sigma.stderr ** 2 + sigma_m.stderr ** 2)).max()) + 2.0 / n_bins
    rows.append(Criterion("sigma_agreement", agreement, tolerance=agreement_tol,
                          passed=agreement <= agreement_tol, method="correlation vs martingale"))
    defect = float(np.abs(limits.consistency_defect()).max())
    defect_tol = float(limits.consistency_tolerance().max())
    rows.append(Criterion("sigma_E_consistency", defect, tolerance=defect_tol, passed=defect <= defect_tol,
                          method="Sigma - E - E^T - lag0"))
    min_eig = limits.psd_min_eigenvalue()
    psd_tol = -(2.0 / n_bins + 3.0 * float(limits.sigma.stderr.max()))
    rows.append(Criterion("sigma_psd", min_eig, tolerance=psd_tol, passed=min_eig >= psd_tol, method="eigvalsh"))
    rows.append(Criterion("lagged_martingale", float(np.abs(drift.lagged_m).max()),
                          float(drift.lagged_m_stderr.max()), float(drift.lagged_tolerance.max()),
                          drift.lagged_ok, "lagged m sums"))

    sigma_oracle = _oracle(ctx, "sigma")
    if sigma_oracle is not None and sigma_oracle[2]:
        size = float(np.abs(limits.sigma.value).max())
        tolerance = 2.0 * max(float(limits.sigma.stderr.max()), 1.0 / n_bins)
        rows.append(Criterion("sigma_degenerate", size, float(limits.sigma.stderr.max()), tolerance,
                              size <= tolerance, "2 x max(SE, 1/N)"))

    if num.reverse_paths > 0:
        ctx.perf.start("Reverse Martingale")
        table = reverse_martingale_check(system, path, m, num.reverse_n, num.reverse_paths,
                                         ctx.seed("reverse-martingale"), track, ctx.runner)
        ctx.perf.end("Reverse Martingale")
        ctx.dump("reverse_martingale.csv", table)
        rows.append(Criterion("reverse_martingale", float(table['z'].abs().max()), tolerance=3.0,
                              passed=bool(table['pass'].all()), method="orthogonality z-scores"))
    return rows


def scenario_clt(ctx: LabContext) -> List[Criterion]:
    num = ctx.config.numerics
    path, track, v = _centered_window(ctx, num.n)
    sigma, _, method = _limit_matrices(ctx, path, track, v)
    ctx.perf.start("CLT Ensemble")
    report = clt_test(ctx.system, path, v, track, num.n, num.n_paths, sigma, ctx.config.master_seed, ctx.runner)
    ctx.perf.end("CLT Ensemble")
    ctx.dump("clt.csv", report.table)
    rows = []
    for _, row in report.table.iterrows():
        if row['note']:
            rows.append(diagnostic(f"ks[{row['name']}]", float("nan"), method=row['note']))
        else:
            rows.append(Criterion(f"ks[{row['name']}]", row['ks_distance'], tolerance=row['threshold'],
                                  passed=bool(row['passed']), method=f"kolmogorov-smirnov vs {method} Sigma"))
    sums = RunningMoments.from_samples(report.samples)
    for c in range(v.dim):
        rows.append(diagnostic(f"clt_mean[{c}]", float(sums.mean[c]), float(sums.stderr[c]), "monte-carlo"))
    return rows


def scenario_lil(ctx: LabContext) -> List[Criterion]:
    num = ctx.config.numerics
    path, track, v = _centered_window(ctx, num.n)
    sigma, _, _ = _limit_matrices(ctx, path, track, v)
    ctx.perf.start("LIL Ensemble")
    report = lil_envelope(ctx.system, path, v, track, num.n, num.n_paths, sigma, ctx.config.master_seed,
                          ctx.runner)
    ctx.perf.end("LIL Ensemble")
    ctx.dump("lil_quantiles.csv", report.quantiles.reset_index())
    return [
        diagnostic("lil_fraction_in_band", report.fraction_in_band, method="envelope [0.4, 1.5]", tolerance=0.9),
        diagnostic("lil_fraction_above", report.fraction_above, method="envelope > 1.5"),
        diagnostic("lil_median_ratio", float(np.median(report.ratios)), method="envelope"),
    ]


def scenario_iterated_wip(ctx: LabContext) -> List[Criterion]:
    num = ctx.config.numerics
    path, track, v = _centered_window(ctx, num.n)
    _, E, method = _limit_matrices(ctx, path, track, v)
    ctx.perf.start("Iterated WIP Ensemble")
    report = wip_mean_check(ctx.system, path, v, track, num.n, num.n_paths, E, ctx.config.master_seed, ctx.runner)
    defects = pairing_identity_check(ctx.system, path, v, track, num.n, min(num.n_paths, 1000),
                                     ctx.seed("pairing"), ctx.runner)
    ctx.perf.end("Iterated WIP Ensemble")
    ctx.dump("wip.csv", report.table)
    rows = [Criterion(f"wip_mean[{int(r['beta'])},{int(r['gamma'])}]", r['mean'], r['stderr'],
                      3.0 * r['stderr'], bool(r['passed']), f"z-score vs {method} E")
            for _, r in report.table.iterrows()]
    rows.append(Criterion("pairing_identity", float(defects.max()), tolerance=1e-10,
                          passed=bool(defects.max() <= 1e-10), method="per-path grid maximum"))
    return rows


def scenario_moments(ctx: LabContext) -> List[Criterion]:
    num = ctx.config.numerics
    grid = sorted(num.n_grid)
    path, track, v = _centered_window(ctx, grid[-1])
    ctx.perf.start("Moment Ensemble")
    report = moment_diagnostics(ctx.system, path, v, track, grid, num.n_paths, num.p, ctx.config.master_seed,
                                ctx.runner)
    gaps = [max(1, n // 2) for n in grid]
    increments = increment_moments(ctx.system, path, v, track, grid[-1], gaps, min(num.n_paths, 500), num.p,
                                   ctx.seed("increment-moments"), runner=ctx.runner)
    ctx.perf.end("Moment Ensemble")
    ctx.dump("moments.csv", report.table)
    ctx.dump("increment_moments.csv", increments.table)
    return [
        Criterion("moment_slope_first", report.slope_first, tolerance=0.05,
                  passed=bool(abs(report.slope_first - 0.5) <= 0.05), method=f"log-log fit, p={num.p}"),
        Criterion("moment_slope_second", report.slope_second, tolerance=0.1,
                  passed=bool(abs(report.slope_second - 1.0) <= 0.1), method=f"log-log fit, p/2={num.p // 2}"),
        diagnostic("increment_slope_first", increments.slope_first, method="window increments"),
        diagnostic("increment_slope_second", increments.slope_second, method="window increments"),
    ]


def scenario_homogenization(ctx: LabContext) -> List[Criterion]:
    num = ctx.config.numerics
    fs = ctx.config.fast_slow
    spec = FastSlowSpec(fs.d, fs.e, build_field(fs.a, (fs.d,), fs.d), build_field(fs.b, (fs.d, fs.e), fs.d),
                        num.epsilon, np.asarray(fs.xi, dtype=float))
    path, track, v = _centered_window(ctx, spec.n_steps)
    sigma, E, method = _limit_matrices(ctx, path, track, v)
    sde = HomogenizedSDE(spec, sigma, E)
    correction_gap = sde.check_correction()

    ctx.perf.start("Homogenization Ensembles")
    report = homogenization_compare(spec, ctx.system, v, sde, num.n_paths, ctx.config.master_seed, path=path,
                                    track=track, process=ctx.process, mode=fs.mode, dt=num.dt,
                                    k_pullback=num.k_pullback, runner=ctx.runner)
    ctx.perf.end("Homogenization Ensembles")
    ctx.dump("homogenization.csv", report.table)
    for c in range(spec.d):
        ctx.dump(f"cdf_component{c}.csv", empirical_cdf_table(report.slow[:, c], report.sde[:, c]),
                 [f"mode={report.mode}", f"epsilon={report.epsilon}"])

    rows = [Criterion("drift_correction_check", correction_gap, tolerance=1e-5, passed=correction_gap <= 1e-5,
                      method="finite-difference Jacobian")]
    label = f"{report.mode}, {method} Sigma/E"
    for _, r in report.table.iterrows():
        c = int(r['component'])
        rows.append(Criterion(f"homogenization_mean[{c}]", r['mean_gap'], 0.0, r['mean_tolerance'],
                              bool(r['mean_gap'] <= r['mean_tolerance']), label))
        rows.append(Criterion(f"homogenization_variance[{c}]", r['var_gap'], 0.0, r['var_tolerance'],
                              bool(r['var_gap'] <= r['var_tolerance']), label))
        if np.isnan(r['ks']):
            rows.append(diagnostic(f"homogenization_ks[{c}]", float("nan"), method="degenerate ensembles"))
        else:
            rows.append(Criterion(f"homogenization_ks[{c}]", r['ks'], tolerance=r['ks_threshold'],
                                  passed=bool(r['ks'] < r['ks_threshold']), method=label))

    if fs.refinement:
        epsilons = [e for e in (4.0 * spec.epsilon, 2.0 * spec.epsilon, spec.epsilon) if e < 1.0]
        ctx.perf.start("Epsilon Refinement")
        table = epsilon_refinement(spec, ctx.system, ctx.observable, lambda s: HomogenizedSDE(s, sigma, E), path,
                                   num.n_paths, derive_seed(ctx.config.master_seed, "refinement"),
                                   epsilons=epsilons, k_pullback=num.k_pullback, runner=ctx.runner)
        ctx.perf.end("Epsilon Refinement")
        ctx.dump("epsilon_refinement.csv", table)
        for _, r in table.iterrows():
            rows.append(diagnostic(f"refinement_ks[eps={r['epsilon']:g}]", r['ks'],
                                   method="frozen, max over components"))
        rows.append(diagnostic("refinement_non_increasing", float(table['non_increasing'].all()),
                               method="KS trend within sampling noise"))
    return rows


SCENARIO_RUNNERS: Dict[str, Callable[[LabContext], List[Criterion]]] = {
    "conditions": scenario_conditions,
    "decay": scenario_decay,
    "decomposition": scenario_decomposition,
    "clt": scenario_clt,
    "lil": scenario_lil,
    "iterated_wip": scenario_iterated_wip,
    "moments": scenario_moments,
    "homogenization": scenario_homogenization,
}


# ==================== OUTPUT ====================


def write_results_csv(criteria: List[Criterion], path: Union[str, Path], config_hash: str) -> Path:
    frame = pd.DataFrame([c.to_row(config_hash) for c in criteria],
                         columns=['name', 'value', 'stderr', 'tolerance', 'pass', 'method', 'config_hash'])
    return _write_csv(frame, path)


def write_summary(summary: RunSummary, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as fh:
            json.dump(summary.to_dict(), fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")
    except PermissionError as e:
        raise OutputError("Permission denied writing summary", output_path=str(path),
                          output_format="json", original_error=e) from e
    except OSError as e:
        raise OutputError("Cannot write summary", output_path=str(path), output_format="json",
                          details=str(e), original_error=e) from e
    return path


# ==================== RUN ====================


def run(config: ExperimentConfig, quiet: bool = True, logger: Optional[logging.Logger] = None) -> RunSummary:
    """Validate, execute the scenario pipeline and write results.csv and summary.txt."""
    logger = logger or logging.getLogger(__name__)
    violations = validate(config)
    if violations:
        raise ValidationError(f"Config has {len(violations)} violation(s)", violations)

    config_hash = config.config_hash
    out_dir = Path(config.output_dir)
    perf = PerformanceTracker(logger)
    logger.info("=" * 60)
    logger.info(f"Scenario: {config.scenario}  (config {config_hash}, seed {config.master_seed})")
    logger.info("=" * 60)

    perf.start("Build Maps")
    process = build_process(config.base)
    cache = UlamCache(cache_dir=config.cache_dir, logger=logger)
    system = FiberSystem(build_maps(config.maps), config.numerics.n_bins, cache)
    system.check_alphabet(process.alphabet)
    perf.end("Build Maps")

    ctx = LabContext(
        config=config, process=process, system=system, observable=Observable.from_config(config.observable),
        runner=EnsembleRunner(config.workers, config.numerics.batch_size, quiet=quiet, logger=logger),
        perf=perf, logger=logger, dump_dir=out_dir / "dump" if config.dump else None)
    if ctx.dump_dir is not None:
        for symbol in process.alphabet:
            dump_operator_csv(system.operator(symbol), ctx.dump_dir / f"ulam_{symbol}.csv")

    criteria = SCENARIO_RUNNERS[config.scenario](ctx)
    names = [c.name for c in criteria]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise EstimationError("Scenario produced duplicate criteria", details=", ".join(duplicates))
    cache.log_statistics()

    summary = RunSummary(config_hash, config.scenario, criteria, dict(perf.metrics))
    summary.output_files.append(str(write_results_csv(criteria, out_dir / "results.csv", config_hash)))
    summary.output_files.append(str(out_dir / "summary.txt"))
    write_summary(summary, out_dir / "summary.txt")

    logger.info(perf.get_summary())
    failed = [c.name for c in criteria if c.gating and not c.passed]
    if failed:
        logger.warning(f"{len(failed)} gating criterion/criteria failed: {', '.join(failed)}")
    else:
        logger.info("All gating criteria passed")
    return summary


def print_summary(summary: RunSummary):
    print()
    print("=" * 60)
    print(ConsoleColors.bold(f"RESULTS: {summary.scenario} (config {summary.config_hash})"))
    print("=" * 60)
    for c in summary.criteria:
        tag = ("PASS" if c.passed else "FAIL") if c.gating else "INFO"
        colored = ConsoleColors.status(c.passed, f"{tag:4s}") if c.gating else ConsoleColors.info(tag)
        print(f"  {colored}  {c.name:35s} {c.value:.6g}  (tol {c.tolerance:.3g})")
    print("=" * 60)
    print(ConsoleColors.status(summary.passed, "ALL GATING CRITERIA PASSED" if summary.passed
                               else "SOME GATING CRITERIA FAILED"))
    for f in summary.output_files:
        print(f"  → {f}")


# ==================== COMMAND LINE ====================


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command-line arguments"""
    parser = argparse.ArgumentParser(
        prog='quenched_lab',
        description='Quenched limit-theorem lab for random expanding interval maps',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog='''
Examples:
  # List built-in presets
  quenched_lab presets

  # Run a preset by name
  quenched_lab run doubling-clt

  # Run a config file with overrides
  quenched_lab run my_config.json --seed 7 --threads 4 --n-bins 2048 --out results/run7

  # Validate a config without running it
  quenched_lab validate my_config.json

  # Write a preset as an editable config file
  quenched_lab sample-config --preset doubling-homogenization --output homog.json

  # JSON structured logging
  quenched_lab run doubling-decomposition --log-format json

Exit codes: 0 all gating criteria pass, 1 error, 2 a gating criterion failed.
'''
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    run_parser = sub.add_parser('run', help='Run an experiment config or preset')
    run_parser.add_argument('config', help='Config file path or preset name')
    run_parser.add_argument('--seed', type=int, default=None, help='Override the master seed')
    run_parser.add_argument('--out', default=None, help='Override the output directory')
    run_parser.add_argument('--threads', type=int, default=None, help='Worker threads (0 = auto)')
    run_parser.add_argument('--n-bins', type=int, default=None, dest='n_bins', help='Override Ulam resolution')
    run_parser.add_argument('--cache-dir', default=None, dest='cache_dir',
                            help='Directory for persisted Ulam matrices')
    run_parser.add_argument('--dump', action='store_true', default=None,
                            help='Write operators, densities and decompositions under <out>/dump')
    run_parser.add_argument('--quiet', '-q', action='store_true', help='Hide progress bars and the result table')
    run_parser.add_argument('--log-level', default=None, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                            help='Logging level (default: LOG_LEVEL env var or INFO)')
    run_parser.add_argument('--log-format', default='text', choices=['text', 'json'], help='Log output format')

    validate_parser = sub.add_parser('validate', help='Report every violation in a config')
    validate_parser.add_argument('config', help='Config file path or preset name')

    presets_parser = sub.add_parser('presets', help='List built-in presets')
    presets_parser.add_argument('--format', choices=['table', 'json'], default='table', dest='output_format')

    sample_parser = sub.add_parser('sample-config', help='Write a preset as a JSON config file')
    sample_parser.add_argument('--preset', default='doubling-clt', help='Preset to export')
    sample_parser.add_argument('--output', default='quenched_lab_config.json', help='Destination file')

    if _ARGCOMPLETE_AVAILABLE:
        argcomplete.autocomplete(parser)
    return parser.parse_args(argv)


def resolve_config(name_or_path: str) -> ExperimentConfig:
    """Load a config file, or a preset when no such file exists."""
    if not Path(name_or_path).exists() and name_or_path in PRESETS:
        return load_preset(name_or_path)
    return load_config(name_or_path)


def main(argv: Optional[List[str]] = None):
    """Main entry point for the script"""
    args = parse_arguments(argv)

    if args.command == 'presets':
        presets = list_presets()
        if args.output_format == 'json':
            print(json.dumps([{'name': n, 'description': d} for n, d in presets], indent=2))
        else:
            width = max(len(n) for n, _ in presets)
            for name, description in presets:
                print(f"  {ConsoleColors.bold(name.ljust(width))}  {description}")
        sys.exit(0)

    if args.command == 'sample-config':
        try:
            ok = generate_sample_config(args.output, args.preset)
        except ConfigurationError as e:
            print(ConsoleColors.error(f"ERROR: {e}"), file=sys.stderr)
            sys.exit(1)
        sys.exit(0 if ok else 1)

    if args.command == 'validate':
        try:
            config = resolve_config(args.config)
        except ConfigurationError as e:
            print(ConsoleColors.error(f"ERROR: {e}"), file=sys.stderr)
            sys.exit(1)
        violations = validate(config)
        if violations:
            print(ConsoleColors.error(f"{len(violations)} violation(s):"))
            for violation in violations:
                print(f"  - {violation}")
            sys.exit(1)
        print(ConsoleColors.success(f"✓ Config is valid (hash {config.config_hash})"))
        sys.exit(0)

    try:
        config = resolve_config(args.config)
        config = apply_overrides(config, seed=args.seed, out=args.out, threads=args.threads,
                                 n_bins=args.n_bins, cache_dir=args.cache_dir, dump=args.dump)
    except ConfigurationError as e:
        print(ConsoleColors.error(f"ERROR: {e}"), file=sys.stderr)
        sys.exit(1)

    run_logger = setup_logging(config.scenario or None, args.log_level, args.log_format)
    if args.quiet:
        run_logger.setLevel(logging.WARNING)
    try:
        summary = run(config, quiet=args.quiet, logger=run_logger)
    except ValidationError as e:
        print(ConsoleColors.error(f"ERROR: {e.message}"), file=sys.stderr)
        for violation in e.violations:
            print(f"  - {violation}", file=sys.stderr)
        sys.exit(1)
    except QuenchedLabError as e:
        run_logger.error(f"{type(e).__name__}: {e}")
        print(ConsoleColors.error(f"ERROR: {e}"), file=sys.stderr)
        sys.exit(1)
    except KeyboardInterrupt:
        print(ConsoleColors.warning("\nInterrupted"), file=sys.stderr)
        sys.exit(1)

    if not args.quiet:
        print_summary(summary)
    sys.exit(summary.exit_code)


if __name__ == "__main__":
    main()
