"""One-dimensional Bayesian optimisation of the merge weight.

A Gaussian process with a squared-exponential kernel models WER as a
function of lambda.  After an evenly spaced initial design, each further
evaluation goes to the candidate that maximises expected improvement.
Candidates are a fixed 512-point grid over the bounds plus the midpoints
between adjacent trials.  Everything is deterministic; ties go to the
smaller lambda.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

log = logging.getLogger(__name__)

N_SCAN = 512


class GPError(RuntimeError):
    pass


class ObjectiveError(RuntimeError):
    """The objective raised, or returned a non-finite or negative value.

    ``log`` holds every trial completed before the failure.
    """

    def __init__(self, message: str, log: TrialLog):
        super().__init__(message)
        self.log = log


@dataclass
class OptimizerConfig:
    bounds: tuple[float, float] = (0.0, 1.0)
    budget: int = 10
    init_points: int = 3
    seed: int = 0
    noise_floor: float = 1e-6
    kernel_lengthscale: float = 0.2
    kernel_variance: float = 1.0

    def __post_init__(self):
        self.bounds = (float(self.bounds[0]), float(self.bounds[1]))
        lo, hi = self.bounds
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError(f"degenerate bounds {self.bounds}")
        if self.budget < 1 or self.init_points < 1:
            raise ValueError("budget and init_points must be positive")
        if self.init_points >= self.budget and self.budget > 1:
            raise ValueError(f"init_points ({self.init_points}) must be < budget ({self.budget})")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if not (self.noise_floor > 0 and self.kernel_lengthscale > 0 and self.kernel_variance > 0):
            raise ValueError("noise_floor, kernel_lengthscale and kernel_variance must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        return d


@dataclass
class TrialLog:
    trials: list[tuple[float, float]] = field(default_factory=list)

    def add(self, lam: float, score: float) -> None:
        self.trials.append((float(lam), float(score)))

    def _best(self) -> tuple[float, float]:
        if not self.trials:
            raise ValueError("empty trial log")
        return min(self.trials, key=lambda t: (t[1], t[0]))

    @property
    def best_lambda(self) -> float:
        return self._best()[0]

    @property
    def best_score(self) -> float:
        return self._best()[1]

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([t[0] for t in self.trials], dtype=np.float64)

    @property
    def scores(self) -> np.ndarray:
        return np.array([t[1] for t in self.trials], dtype=np.float64)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"lambda": lam, "wer": s, "index": i}) for i, (lam, s) in enumerate(self.trials)]
        if self.trials:
            lines.append(json.dumps({"best_lambda": self.best_lambda, "best_wer": self.best_score}))
        return "".join(line + "\n" for line in lines)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> TrialLog:
        out = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if "lambda" in row:
                out.add(row["lambda"], row["wer"])
        return out


def _kernel(a: np.ndarray, b: np.ndarray, lengthscale: float, variance: float) -> np.ndarray:
    d = a[:, None] - b[None, :]
    return variance * np.exp(-(d * d) / (2.0 * lengthscale * lengthscale))


def gp_posterior(
    xs: np.ndarray,
    ys: np.ndarray,
    query,
    lengthscale: float = 0.2,
    variance: float = 1.0,
    noise_floor: float = 1e-6,
    mean_offset: float = 0.0,
):
    """Posterior mean and standard deviation at ``query``.

    ``mean_offset`` is a constant prior mean; the data are centred on it
    before the solve and the offset is added back to the posterior mean.
    Works on a scalar or a 1-D array of queries.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64) - mean_offset
    if xs.size == 0:
        raise GPError("posterior needs at least one observation")
    q = np.atleast_1d(np.asarray(query, dtype=np.float64))
    K = _kernel(xs, xs, lengthscale, variance) + noise_floor * np.eye(xs.size)
    try:
        factor = cho_factor(K, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise GPError(f"kernel matrix is singular: {exc}") from exc
    ks = _kernel(xs, q, lengthscale, variance)
    mean = ks.T @ cho_solve(factor, ys) + mean_offset
    v = cho_solve(factor, ks)
    var = variance - np.einsum("ij,ij->j", ks, v)
    std = np.sqrt(np.clip(var, 0.0, None))
    if np.ndim(query) == 0:
        return float(mean[0]), float(std[0])
    return mean, std


def trial_posterior(log: TrialLog, query, config: OptimizerConfig | None = None):
    """GP posterior fitted to a trial log with the optimiser's settings."""
    config = config or OptimizerConfig()
    ys = log.scores
    return gp_posterior(
        log.lambdas,
        ys,
        query,
        config.kernel_lengthscale,
        config.kernel_variance,
        config.noise_floor,
        mean_offset=float(ys.mean()),
    )


def expected_improvement(mean, stddev, best_so_far: float):
    """Expected improvement below ``best_so_far`` (minimisation)."""
    mean = np.asarray(mean, dtype=np.float64)
    stddev = np.asarray(stddev, dtype=np.float64)
    gain = best_so_far - mean
    safe = np.where(stddev > 0, stddev, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        z = gain / safe
        ei = np.where(stddev > 0, gain * norm.cdf(z) + stddev * norm.pdf(z), np.maximum(gain, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def initial_design(config: OptimizerConfig) -> np.ndarray:
    lo, hi = config.bounds
    if config.init_points >= 2:
        return np.linspace(lo, hi, config.init_points)
    rng = np.random.default_rng(config.seed)
    return np.array([rng.uniform(lo, hi)])


def candidates(log: TrialLog, config: OptimizerConfig) -> np.ndarray:
    lo, hi = config.bounds
    seen = np.sort(log.lambdas)
    grid = np.concatenate([np.linspace(lo, hi, N_SCAN), 0.5 * (seen[1:] + seen[:-1])])
    grid = np.unique(grid)
    # already-evaluated points carry no information; skip exact and near-exact repeats
    gap = np.min(np.abs(grid[:, None] - seen[None, :]), axis=1)
    return grid[gap > 1e-9 * (hi - lo)]


def propose(log: TrialLog, config: OptimizerConfig) -> float:
    cand = candidates(log, config)
    mean, std = trial_posterior(log, cand, config)
    ei = expected_improvement(mean, std, log.best_score)
    return float(cand[int(np.argmax(ei))])


def optimize(objective: Callable[[float], float], config: OptimizerConfig | None = None) -> TrialLog:
    """Minimise ``objective`` over ``config.bounds`` in exactly ``budget`` calls."""
    config = config or OptimizerConfig()
    log_ = TrialLog()
    design = list(initial_design(config))[: config.budget]
    for i in range(config.budget):
        lam = float(design[i]) if i < len(design) else propose(log_, config)
        try:
            score = objective(lam)
        except Exception as exc:
            raise ObjectiveError(f"objective failed at lambda={lam}: {exc}", log_) from exc
        try:
            score = float(score)
        except (TypeError, ValueError):
            raise ObjectiveError(f"objective returned non-numeric value {score!r} at lambda={lam}", log_)
        if not math.isfinite(score) or score < 0:
            raise ObjectiveError(f"objective returned {score!r} at lambda={lam}", log_)
        log_.add(lam, score)
        log.debug("trial %d: lambda=%.6f wer=%.6f", i, lam, score)
    return log_
