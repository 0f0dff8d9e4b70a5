"""Boundary to external ASR inference, plus a deterministic mock backend.

An external evaluator is any command that reads a checkpoint and a manifest
and writes a UTF-8 TSV of ``id<TAB>hypothesis`` lines.  The command is given
as a template with the placeholders ``{checkpoint}``, ``{manifest}``,
``{lang}`` and ``{out}``; the template is split into arguments first and the
placeholders are then replaced literally inside each argument, so paths with
spaces survive without quoting.
"""

from __future__ import annotations

import logging
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

from asrmerge.checkpoint_io import TensorMap, read_checkpoint, write_checkpoint
from asrmerge.dataprep import DEFAULT_RULES, DatasetKind, clean_transcript, read_manifest
from asrmerge.lambda_opt import OptimizerConfig, TrialLog, optimize
from asrmerge.metrics import ComparisonReport, WerReport, wer
from asrmerge.taskvec import (
    LoraAdapter,
    MergeMode,
    MergeSpec,
    NamePolicy,
    TaskVector,
    apply_task_vector,
    materialize_lora,
    materialize_lora_merge,
)

log = logging.getLogger(__name__)

PLACEHOLDERS = ("{checkpoint}", "{manifest}", "{lang}", "{out}")
LAMBDA_KEY = "merge_lambda"


class EvaluatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalRequest:
    checkpoint_path: str
    manifest_path: str
    proxy_language: str
    output_path: str

    def validate(self) -> None:
        for label, p in (("checkpoint", self.checkpoint_path), ("manifest", self.manifest_path)):
            if not Path(p).is_file():
                raise FileNotFoundError(f"{label} not found: {p}")


def render_command(cmd_template: str, req: EvalRequest) -> list[str]:
    missing = [p for p in PLACEHOLDERS if p not in cmd_template]
    if missing:
        raise EvaluatorError(f"command template lacks placeholders {missing}")
    subs = {
        "{checkpoint}": str(req.checkpoint_path),
        "{manifest}": str(req.manifest_path),
        "{lang}": req.proxy_language,
        "{out}": str(req.output_path),
    }
    argv = []
    for arg in shlex.split(cmd_template):
        for key, value in subs.items():
            arg = arg.replace(key, value)
        argv.append(arg)
    return argv


def read_hypotheses(path: str | Path) -> dict[str, str]:
    hyps = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise EvaluatorError(f"{path}:{lineno}: malformed hypothesis line (no tab)")
        uid, text = line.split("\t", 1)
        if uid in hyps:
            raise EvaluatorError(f"{path}:{lineno}: duplicate hypothesis id {uid!r}")
        hyps[uid] = text
    return hyps


def read_tsv_pairs(path: str | Path) -> list[tuple[str, str]]:
    """``id<TAB>text`` rows, the exchange format for references and hypotheses."""
    return list(read_hypotheses(path).items())


def run_external_eval(
    cmd_template: str,
    req: EvalRequest,
    timeout_s: float = 3600.0,
    env_allowlist: Sequence[str] = ("PATH",),
    rules: Sequence[tuple[str, str]] = DEFAULT_RULES,
) -> WerReport:
    """Run one external evaluation and score its hypotheses against the manifest.

    References and hypotheses both pass through ``clean_transcript`` with
    ``rules`` before scoring.  The child gets an empty environment apart from
    the allowlisted variables.
    """
    req.validate()
    argv = render_command(cmd_template, req)
    env = {k: os.environ[k] for k in env_allowlist if k in os.environ}
    log.info("running evaluator: %s", shlex.join(argv))
    try:
        proc = subprocess.run(argv, env=env, capture_output=True, text=True, timeout=timeout_s)
    except subprocess.TimeoutExpired as exc:
        raise EvaluatorError(f"evaluator timed out after {timeout_s}s") from exc
    except OSError as exc:
        raise EvaluatorError(f"could not launch evaluator: {exc}") from exc
    if proc.returncode != 0:
        raise EvaluatorError(f"evaluator exited with status {proc.returncode}: {proc.stderr.strip()}")
    if not Path(req.output_path).is_file():
        raise EvaluatorError(f"evaluator did not write {req.output_path}")
    hyps = read_hypotheses(req.output_path)
    manifest = read_manifest(req.manifest_path, kind=DatasetKind.SPONTANEOUS, require_duration=False)
    refs = []
    seen = set()
    for r in manifest.records:
        if r.id in seen:
            continue
        seen.add(r.id)
        if r.id not in hyps:
            raise EvaluatorError(f"hypothesis file is missing id {r.id!r}")
        refs.append((r.id, clean_transcript(r.transcript, rules)))
    cleaned = [(k, clean_transcript(v, rules)) for k, v in hyps.items()]
    return wer(refs, cleaned)


# ------------------------------------------------------------------ backends


class EvalBackend(Protocol):
    def __call__(self, checkpoint_path: str) -> float: ...


@dataclass(frozen=True)
class MockObjective:
    optimum: float = 0.25
    floor: float = 0.1
    curvature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.optimum <= 1.0 or self.floor < 0 or self.curvature < 0:
            raise ValueError(f"invalid mock objective {self}")

    @classmethod
    def parse(cls, text: str) -> MockObjective:
        """Build from ``"optimum=0.25,floor=0.1,curvature=1"``."""
        kwargs = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, value = part.partition("=")
            if key not in ("optimum", "floor", "curvature", "seed"):
                raise ValueError(f"unknown mock parameter {key!r}")
            kwargs[key] = int(value) if key == "seed" else float(value)
        return cls(**kwargs)


def mock_eval(obj: MockObjective, lam: float) -> float:
    return obj.floor + obj.curvature * (lam - obj.optimum) ** 2


@dataclass(frozen=True)
class MockBackend:
    """Scores a checkpoint by the merge weight recorded in its metadata.

    Checkpoints without a recorded weight (e.g. the target-only model) score
    as lambda = 0.
    """

    objective: MockObjective

    def __call__(self, checkpoint_path: str) -> float:
        tmap = read_checkpoint(checkpoint_path)
        return mock_eval(self.objective, float(tmap.metadata.get(LAMBDA_KEY, "0.0")))


@dataclass(frozen=True)
class ExternalBackend:
    cmd_template: str
    manifest_path: str
    proxy_language: str
    timeout_s: float = 3600.0
    env_allowlist: tuple[str, ...] = ("PATH",)
    rules: tuple[tuple[str, str], ...] = DEFAULT_RULES

    def report(self, checkpoint_path: str) -> WerReport:
        with tempfile.TemporaryDirectory(prefix="asrmerge-hyp-") as tmp:
            req = EvalRequest(checkpoint_path, self.manifest_path, self.proxy_language, str(Path(tmp) / "hyp.tsv"))
            return run_external_eval(self.cmd_template, req, self.timeout_s, self.env_allowlist, self.rules)

    def __call__(self, checkpoint_path: str) -> float:
        return self.report(checkpoint_path).wer


# ---------------------------------------------------------------- merging


@dataclass(frozen=True, eq=False)
class MergeInputs:
    """What gets merged: a full checkpoint plus a task vector, or an adapter pair on a base."""

    target: TensorMap | LoraAdapter
    support: TaskVector | LoraAdapter
    theta_base: TensorMap | None = None
    mode: MergeMode = MergeMode.PER_MATRIX
    name_policy: NamePolicy = NamePolicy.STRICT

    def __post_init__(self):
        if isinstance(self.support, TaskVector):
            if not isinstance(self.target, TensorMap):
                raise TypeError("a task vector must be applied to a full checkpoint")
        elif isinstance(self.support, LoraAdapter):
            if not isinstance(self.target, LoraAdapter) or self.theta_base is None:
                raise TypeError("an adapter merge needs a target adapter and a base checkpoint")
        else:
            raise TypeError(f"unsupported support artifact {type(self.support).__name__}")

    def merged(self, lam: float, bounds: tuple[float, float] = (0.0, 1.0)) -> TensorMap:
        spec = MergeSpec(lam, self.mode, self.name_policy, bounds)
        if isinstance(self.support, TaskVector):
            out = apply_task_vector(self.target, self.support, spec.lam, spec.name_policy)
        else:
            out = materialize_lora_merge(self.target, self.support, spec, self.theta_base)
        return out.with_metadata(**{LAMBDA_KEY: repr(float(lam)), "merge_mode": spec.mode.value})

    def target_only(self) -> TensorMap:
        if isinstance(self.support, TaskVector):
            return self.target
        return materialize_lora(self.target, self.theta_base)


def _score(tmap: TensorMap, backend: Callable[[str], float], tmp_dir: str | None) -> float:
    with tempfile.TemporaryDirectory(prefix="asrmerge-", dir=tmp_dir) as tmp:
        path = str(Path(tmp) / "model.safetensors")
        write_checkpoint(tmap, path)
        return float(backend(path))


def evaluate_merge(
    inputs: MergeInputs,
    lam: float,
    backend: Callable[[str], float],
    tmp_dir: str | None = None,
    baseline: float | None = None,
) -> ComparisonReport:
    """Score the merged and the target-only model through the same backend."""
    if baseline is None:
        baseline = _score(inputs.target_only(), backend, tmp_dir)
    merged = _score(inputs.merged(lam), backend, tmp_dir)
    return ComparisonReport(baseline, merged, float(lam))


@dataclass
class TuneResult:
    log: TrialLog
    baseline_wer: float
    best: ComparisonReport


def tune_merge(
    inputs: MergeInputs,
    backend: Callable[[str], float],
    config: OptimizerConfig | None = None,
    tmp_dir: str | None = None,
) -> TuneResult:
    """Optimise lambda on the backend's WER; the baseline is scored once up front."""
    config = config or OptimizerConfig()
    baseline = _score(inputs.target_only(), backend, tmp_dir)
    cache: dict[float, float] = {}

    def objective(lam: float) -> float:
        if lam not in cache:
            cache[lam] = _score(inputs.merged(lam, config.bounds), backend, tmp_dir)
        return cache[lam]

    trials = optimize(objective, config)
    best = ComparisonReport(baseline, trials.best_score, trials.best_lambda)
    if not math.isfinite(best.delta_wer):
        raise EvaluatorError("non-finite delta WER")
    return TuneResult(trials, baseline, best)
