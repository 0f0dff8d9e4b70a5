"""Command-line entry point: ``asrmerge <subcommand> ...``.

Subcommands: diff, merge, tune, wer, sim, corr, prep, langs.  Data goes to
files or stdout as JSON; diagnostics go to stderr.  Exit status is 0 on
success and 1 on any handled error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from asrmerge.checkpoint_io import CheckpointFormatError, read_checkpoint, write_checkpoint
from asrmerge.dataprep import (
    DEFAULT_CAP,
    DEFAULT_RULES,
    DataPrepError,
    language_table,
    load_rules,
    lookup_language,
    prepare,
    read_tsv_manifest,
    write_jsonl_manifest,
)
from asrmerge.evaluator import (
    EvaluatorError,
    ExternalBackend,
    MergeInputs,
    MockBackend,
    MockObjective,
    read_tsv_pairs,
    tune_merge,
)
from asrmerge.lambda_opt import GPError, ObjectiveError, OptimizerConfig
from asrmerge.metrics import (
    MetricError,
    TokenCountVector,
    cosine_similarity,
    normalize_and_tokenize,
    pearson,
    spearman,
    wer,
)
from asrmerge.taskvec import (
    LoraAdapter,
    MergeError,
    MergeMode,
    MergeSpec,
    NamePolicy,
    TaskVector,
    apply_task_vector,
    compute_task_vector,
    fingerprint,
    materialize_lora_merge,
    merge_lora,
)

log = logging.getLogger("asrmerge")

HANDLED = (
    CheckpointFormatError,
    MergeError,
    MetricError,
    DataPrepError,
    EvaluatorError,
    GPError,
    ObjectiveError,
    FileNotFoundError,
    KeyError,
    ValueError,
    OSError,
)


@dataclass
class EvaluatorSettings:
    template: str | None = None
    mock: str | None = None
    timeout_s: float = 3600.0
    env_allowlist: list[str] = field(default_factory=lambda: ["PATH"])
    proxy_language: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    language: str = ""
    lam: float = 0.0
    mode: str = MergeMode.PER_MATRIX.value
    name_policy: str = NamePolicy.STRICT.value
    cap: int = DEFAULT_CAP
    rules_path: str | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    evaluator: EvaluatorSettings = field(default_factory=EvaluatorSettings)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        opt = data.pop("optimizer", {}) or {}
        ev = data.pop("evaluator", {}) or {}
        return cls(optimizer=OptimizerConfig(**opt), evaluator=EvaluatorSettings(**ev), **data)

    def merge_spec(self, lam: float | None = None) -> MergeSpec:
        return MergeSpec(self.lam if lam is None else lam, self.mode, self.name_policy, self.optimizer.bounds)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the JSON config file, then command-line flags."""
    cfg = RunConfig()
    if args.config:
        cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.optimizer.seed = args.seed
    for name in ("language", "lam", "mode", "name_policy", "cap", "rules_path"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    opt = cfg.optimizer
    for name in ("budget", "init_points"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(opt, name, value)
    if getattr(args, "budget", None) is not None and getattr(args, "init_points", None) is None and opt.budget > 1:
        opt.init_points = min(opt.init_points, opt.budget - 1)
    cfg.optimizer = OptimizerConfig(**asdict(opt))
    ev = cfg.evaluator
    for flag, attr in (("eval_template", "template"), ("mock", "mock"), ("timeout", "timeout_s"), ("proxy", "proxy_language")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(ev, attr, value)
    return cfg


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False) + "\n")


def _rules(cfg: RunConfig):
    return load_rules(cfg.rules_path) if cfg.rules_path else DEFAULT_RULES


# ------------------------------------------------------------------ commands


def cmd_diff(args, cfg: RunConfig) -> int:
    base = read_checkpoint(args.base)
    ft = read_checkpoint(args.finetuned)
    tv = compute_task_vector(ft, base, NamePolicy(cfg.name_policy))
    tv.save(args.out)
    _emit({"tensors": len(tv.deltas), "l2_norm": tv.l2_norm(), "base_fingerprint": tv.base_fingerprint, "out": args.out})
    return 0


def _merge_inputs(args, cfg: RunConfig) -> MergeInputs:
    if args.task_vector:
        target = read_checkpoint(args.target)
        return MergeInputs(target, TaskVector.load(args.task_vector), name_policy=NamePolicy(cfg.name_policy))
    if not args.base:
        raise MergeError("--support-adapter needs --base")
    return MergeInputs(
        LoraAdapter.load(args.target),
        LoraAdapter.load(args.support_adapter),
        theta_base=read_checkpoint(args.base),
        mode=MergeMode(cfg.mode),
    )


def cmd_merge(args, cfg: RunConfig) -> int:
    spec = cfg.merge_spec()
    if args.task_vector:
        target = read_checkpoint(args.target)
        tv = TaskVector.load(args.task_vector)
        out = apply_task_vector(target, tv, spec.lam, spec.name_policy)
        write_checkpoint(out.with_metadata(merge_lambda=repr(spec.lam)), args.out)
        info = {"target_fingerprint": fingerprint(target), "base_fingerprint": tv.base_fingerprint}
    else:
        adapter_t = LoraAdapter.load(args.target)
        adapter_s = LoraAdapter.load(args.support_adapter)
        if args.base:
            base = read_checkpoint(args.base)
            out = materialize_lora_merge(adapter_t, adapter_s, spec, base)
            write_checkpoint(out.with_metadata(merge_lambda=repr(spec.lam), merge_mode=spec.mode.value), args.out)
            info = {"base_fingerprint": fingerprint(base), "materialized": True}
        else:
            merge_lora(adapter_t, adapter_s, spec).save(args.out)
            info = {"materialized": False}
    log.info("merged lambda=%r mode=%s -> %s", spec.lam, spec.mode.value, args.out)
    _emit({"lambda": spec.lam, "mode": spec.mode.value, "out": args.out, **info})
    return 0


def _backend(cfg: RunConfig, manifest: str | None):
    ev = cfg.evaluator
    if ev.mock:
        return MockBackend(MockObjective.parse(ev.mock))
    if not ev.template:
        raise EvaluatorError("tune needs --eval-template or --mock")
    if not manifest:
        raise EvaluatorError("an external evaluator needs --manifest")
    proxy = ev.proxy_language or (lookup_language(cfg.language).proxy if cfg.language else None)
    if not proxy:
        raise EvaluatorError("no proxy language: pass --proxy or --language")
    return ExternalBackend(ev.template, manifest, proxy, ev.timeout_s, tuple(ev.env_allowlist), tuple(_rules(cfg)))


def cmd_tune(args, cfg: RunConfig) -> int:
    inputs = _merge_inputs(args, cfg)
    backend = _backend(cfg, args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = tune_merge(inputs, backend, cfg.optimizer)
    except ObjectiveError as exc:
        exc.log.write(out_dir / "trials.jsonl")
        raise
    result.log.write(out_dir / "trials.jsonl")
    write_checkpoint(inputs.merged(result.best.lam, cfg.optimizer.bounds), out_dir / "best.safetensors")
    report = {
        "best_lambda": result.log.best_lambda,
        "best_wer": result.log.best_score,
        "target_only_wer": result.baseline_wer,
        "delta_wer": result.best.delta_wer,
        "trials": len(result.log.trials),
    }
    (out_dir / "comparison.json").write_text(json.dumps(report) + "\n", encoding="utf-8")
    _emit(report)
    return 0


def cmd_wer(args, cfg: RunConfig) -> int:
    report = wer(read_tsv_pairs(args.refs), read_tsv_pairs(args.hyps))
    _emit(report.to_dict())
    return 0


def _corpus_vector(path: str, normalize: bool) -> TokenCountVector:
    text = Path(path).read_text(encoding="utf-8")
    tokens = normalize_and_tokenize(text) if normalize else text.split()
    return TokenCountVector.from_tokens(tokens)


def cmd_sim(args, cfg: RunConfig) -> int:
    u = _corpus_vector(args.corpus_a, args.normalize)
    v = _corpus_vector(args.corpus_b, args.normalize)
    _emit({"cosine": cosine_similarity(u, v), "types_a": len(u.counts), "types_b": len(v.counts)})
    return 0


def read_pair_table(path: str) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise MetricError(f"{path}:{lineno}: expected two columns")
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise MetricError(f"{path}:{lineno}: non-numeric value") from None
            xs.append(x)
            ys.append(y)
    return xs, ys


def cmd_corr(args, cfg: RunConfig) -> int:
    xs, ys = read_pair_table(args.table)
    r, p = pearson(xs, ys)
    rho, p_s = spearman(xs, ys)
    _emit({"n": len(xs), "pearson": {"r": r, "p": p}, "spearman": {"rho": rho, "p": p_s}})
    return 0


def cmd_prep(args, cfg: RunConfig) -> int:
    manifest = read_tsv_manifest(args.raw_manifest, language=cfg.language, kind=args.kind)
    out, counts = prepare(manifest, _rules(cfg), cfg.cap, cfg.seed)
    write_jsonl_manifest(out, args.out)
    _emit({"language": cfg.language, "kind": manifest.kind.value, "counts": counts, "out": args.out})
    return 0


def cmd_langs(args, cfg: RunConfig) -> int:
    rows = language_table()
    if args.format == "tsv":
        w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
        w.writerow(["target", "name", "family", "supports", "proxy", "script", "test_only"])
        for r in rows:
            w.writerow([r.target, r.name, r.family, ",".join(r.supports), r.proxy, r.script, int(r.test_only)])
    else:
        for r in rows:
            _emit(r.to_dict())
    return 0


# -------------------------------------------------------------------- parser


def _add_merge_sources(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--task-vector", help="task vector file produced by `diff`")
    src.add_argument("--support-adapter", help="support-language LoRA adapter file")
    p.add_argument("--base", help="base checkpoint (adapter merges)")
    p.add_argument("--mode", choices=[m.value for m in MergeMode])
    p.add_argument("--name-policy", choices=[n.value for n in NamePolicy])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asrmerge", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diff", help="task vector = finetuned - base")
    p.add_argument("base")
    p.add_argument("finetuned")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--name-policy", choices=[n.value for n in NamePolicy])
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("merge", help="apply a scaled task vector or merge LoRA adapters")
    p.add_argument("target")
    _add_merge_sources(p)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("tune", help="Bayesian optimisation of lambda against an evaluator")
    p.add_argument("target")
    _add_merge_sources(p)
    p.add_argument("--manifest", help="dev manifest (TSV or JSONL) with reference transcripts")
    p.add_argument("--eval-template", help="external evaluator command with {checkpoint} {manifest} {lang} {out}")
    p.add_argument("--mock", help="mock evaluator, e.g. 'optimum=0.25,floor=0.1,curvature=1'")
    p.add_argument("--proxy", help="decoding proxy language (default: from --language)")
    p.add_argument("--language")
    p.add_argument("--budget", type=int)
    p.add_argument("--init-points", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--rules", dest="rules_path")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("wer", help="corpus WER of hypothesis TSV against reference TSV")
    p.add_argument("refs")
    p.add_argument("hyps")
    p.set_defaults(func=cmd_wer)

    p = sub.add_parser("sim", help="cosine similarity of two token-count corpora")
    p.add_argument("corpus_a")
    p.add_argument("corpus_b")
    p.add_argument("--normalize", action="store_true", help="NFC+lowercase before splitting")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("corr", help="Pearson and Spearman over a two-column TSV")
    p.add_argument("table")
    p.set_defaults(func=cmd_corr)

    p = sub.add_parser("prep", help="filter, clean, flag, upsample and cap a raw manifest")
    p.add_argument("raw_manifest")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--rules", dest="rules_path")
    p.add_argument("--cap", type=int)
    p.add_argument("--language")
    p.add_argument("--kind", choices=["SCRIPTED", "SPONTANEOUS"])
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("langs", help="print the target/support/proxy language table")
    p.add_argument("--format", choices=["jsonl", "tsv"], default="jsonl")
    p.set_defaults(func=cmd_langs)
    return parser


def _configure_logging(level: str) -> None:
    # own handler on the package logger so the run log does not depend on root config
    pkg = logging.getLogger("asrmerge")
    for h in [h for h in pkg.handlers if getattr(h, "_asrmerge_cli", False)]:
        pkg.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._asrmerge_cli = True
    pkg.addHandler(handler)
    pkg.setLevel(level.upper())
    pkg.propagate = False


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging(args.log_level)
        cfg = resolve_config(args)
        log.info("resolved config: %s", cfg.to_json())
        return args.func(args, cfg)
    except HANDLED as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"asrmerge {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
