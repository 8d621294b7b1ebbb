"""Command line front end: run, sweep, ablate.

All outputs are deterministic for fixed inputs: records are JSONL with
sorted keys, tables use fixed-width float formatting, and corpus order
is preserved.  Bad input is reported with file and line and a nonzero
exit code instead of a traceback.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from .engine import EngineConfig, RunResult, communication_ratio, run_speculative, run_vanilla
from .errors import ConfigError, CorpusFormatError, SpecacheError
from .lm import ToyModel, load_models_file
from .metrics import RunMetrics, aggregate

SWEEP_PARAMS = {"K": int, "ratio": int, "k": int, "query_depth": int, "temperature": float}
ABLATE_VARIANTS = ("vanilla", "cache_only", "cache_plus_correct")

_TABLE_FIELDS = (
    ("tokens", "tokens_emitted", "{:d}"),
    ("time", "sim_time", "{:.2f}"),
    ("fwd_t", "target_forwards", "{:d}"),
    ("fwd_d", "draft_forwards", "{:d}"),
    ("hit%", "cache_hit_rate", "{:.3f}"),
    ("lnew", "mean_acceptance_length", "{:.3f}"),
    ("tok/t", "tokens_per_time", "{:.4f}"),
    ("speedup", "speedup_vs_vanilla", "{:.3f}"),
)


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from e


def load_corpus(path: str, vocab_size: int) -> list[tuple[str, list[int]]]:
    """Read prompts from JSONL: {"id": ..., "tokens": [...]} or
    {"id": ..., "text": "..."} (utf-8 bytes as tokens, needs a byte
    vocabulary)."""
    entries = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise CorpusFormatError(path, 0, str(e.strerror or e)) from e
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(path, line_no, e.msg) from e
            if not isinstance(rec, dict) or "id" not in rec:
                raise CorpusFormatError(path, line_no, "record must be an object with an 'id'")
            has_tokens = "tokens" in rec
            has_text = "text" in rec
            if has_tokens == has_text:
                raise CorpusFormatError(
                    path, line_no, "record needs exactly one of 'tokens' or 'text'"
                )
            if has_tokens:
                toks = rec["tokens"]
                if not isinstance(toks, list) or not toks:
                    raise CorpusFormatError(path, line_no, "'tokens' must be a nonempty list")
                for t in toks:
                    if not isinstance(t, int) or isinstance(t, bool) or t < 0 or t >= vocab_size:
                        raise CorpusFormatError(
                            path, line_no,
                            f"token {t!r} outside vocabulary of size {vocab_size}",
                        )
                prompt = [int(t) for t in toks]
            else:
                if not isinstance(rec["text"], str) or not rec["text"]:
                    raise CorpusFormatError(path, line_no, "'text' must be a nonempty string")
                if vocab_size < 256:
                    raise CorpusFormatError(
                        path, line_no,
                        f"byte text needs a vocabulary of at least 256, model has {vocab_size}",
                    )
                prompt = list(rec["text"].encode("utf-8"))
            entries.append((str(rec["id"]), prompt))
    if not entries:
        raise CorpusFormatError(path, 0, "corpus is empty")
    return entries


def make_config(
    raw: dict,
    draft: ToyModel,
    target: ToyModel,
    overrides: dict | None = None,
) -> EngineConfig:
    """Build an EngineConfig from a raw JSON dict plus CLI overrides.

    ratio may be the string "auto", resolved from the model latencies.
    Derived defaults (query_depth, max_depth) are recomputed from the
    final ratio unless the raw dict pins them.
    """
    d = dict(raw)
    if overrides:
        d.update(overrides)
    if d.get("ratio") == "auto":
        d["ratio"] = communication_ratio(
            target.spec.forward_latency, draft.spec.forward_latency
        )
    return EngineConfig.from_dict(d)


def _metrics_record(m: RunMetrics) -> dict:
    return m.to_dict()


def _table(title: str, headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [title]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines)


def _metrics_cells(m: RunMetrics) -> list[str]:
    return [fmt.format(getattr(m, field)) for _, field, fmt in _TABLE_FIELDS]


def _write_jsonl(path: str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_trace(path: str, traces: list[tuple[str, RunResult]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for run_id, result in traces:
            for ev in result.trace:
                rec = {"id": run_id}
                rec.update(ev.to_dict())
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _common_setup(args) -> tuple[ToyModel, ToyModel, dict, list[tuple[str, list[int]]]]:
    draft, target = load_models_file(args.models)
    raw = _load_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.config}: config must be a JSON object")
    corpus = load_corpus(args.corpus, target.vocab.size)
    return draft, target, raw, corpus


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "mode", None):
        out["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    return out


def cmd_run(args) -> int:
    draft, target, raw, corpus = _common_setup(args)
    config = make_config(raw, draft, target, _overrides(args))
    records = []
    traces = []
    per_run = []
    rows = []
    for run_id, prompt in corpus:
        result = run_speculative(draft, target, prompt, config)
        per_run.append(result.metrics)
        traces.append((run_id, result))
        records.append(
            {
                "id": run_id,
                "config": config.to_dict(),
                "output": result.output,
                "metrics": _metrics_record(result.metrics),
            }
        )
        rows.append([run_id] + _metrics_cells(result.metrics))
    total = aggregate(per_run)
    records.append({"id": "__aggregate__", "metrics": _metrics_record(total)})
    rows.append(["all"] + _metrics_cells(total))
    if args.out:
        _write_jsonl(args.out, records)
    if args.trace:
        _write_trace(args.trace, traces)
    headers = ["id"] + [h for h, _, _ in _TABLE_FIELDS]
    print(_table(f"run  mode={config.mode}  prompts={len(corpus)}", headers, rows))
    return 0


def cmd_sweep(args) -> int:
    draft, target, raw, corpus = _common_setup(args)
    name, values = _parse_sweep(args.sweep)
    records = []
    rows = []
    for value in values:
        config = make_config(raw, draft, target, {**_overrides(args), name: value})
        per_run = []
        for run_id, prompt in corpus:
            result = run_speculative(draft, target, prompt, config)
            per_run.append(result.metrics)
            records.append(
                {
                    "id": run_id,
                    name: value,
                    "config": config.to_dict(),
                    "metrics": _metrics_record(result.metrics),
                }
            )
        total = aggregate(per_run)
        records.append({"id": "__aggregate__", name: value, "metrics": _metrics_record(total)})
        rows.append([f"{name}={value}"] + _metrics_cells(total))
    if args.out:
        _write_jsonl(args.out, records)
    headers = [name] + [h for h, _, _ in _TABLE_FIELDS]
    print(_table(f"sweep {name}  prompts={len(corpus)}", headers, rows))
    return 0


def _parse_sweep(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise ConfigError(f"--sweep must look like param=v1,v2,... got {spec!r}")
    name, _, tail = spec.partition("=")
    name = name.strip()
    if name not in SWEEP_PARAMS:
        raise ConfigError(
            f"cannot sweep {name!r}; choose one of {sorted(SWEEP_PARAMS)}"
        )
    cast = SWEEP_PARAMS[name]
    values = []
    for part in tail.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            values.append(cast(part))
        except ValueError as e:
            raise ConfigError(f"bad sweep value {part!r} for {name}: {e}") from e
    if not values:
        raise ConfigError(f"--sweep {name} needs at least one value")
    return name, values


def cmd_ablate(args) -> int:
    draft, target, raw, corpus = _common_setup(args)
    records = []
    rows = []
    for variant in ABLATE_VARIANTS:
        per_run = []
        for run_id, prompt in corpus:
            if variant == "vanilla":
                config = make_config(raw, draft, target, _overrides(args))
                result = run_vanilla(target, prompt, config)
            else:
                config = make_config(
                    raw,
                    draft,
                    target,
                    {**_overrides(args), "correction_enabled": variant == "cache_plus_correct"},
                )
                result = run_speculative(draft, target, prompt, config)
            per_run.append(result.metrics)
            records.append(
                {
                    "id": run_id,
                    "variant": variant,
                    "metrics": _metrics_record(result.metrics),
                }
            )
        total = aggregate(per_run)
        records.append(
            {"id": "__aggregate__", "variant": variant, "metrics": _metrics_record(total)}
        )
        rows.append([variant] + _metrics_cells(total))
    if args.out:
        _write_jsonl(args.out, records)
    headers = ["variant"] + [h for h, _, _ in _TABLE_FIELDS]
    print(_table(f"ablate  prompts={len(corpus)}", headers, rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specache",
        description="Cache-assisted speculative decoding on toy models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--models", required=True, help="models JSON file")
        p.add_argument("--corpus", required=True, help="prompts JSONL file")
        p.add_argument("--config", help="engine config JSON file")
        p.add_argument("--out", help="write per-run records to this JSONL file")
        p.add_argument("--mode", choices=["serial_sim", "concurrent"], help="override run mode")
        p.add_argument("--seed", type=int, help="override the run seed")

    p_run = sub.add_parser("run", help="decode every prompt once")
    common(p_run)
    p_run.add_argument("--trace", help="write per-step trace records to this JSONL file")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="rerun the corpus across parameter values")
    common(p_sweep)
    p_sweep.add_argument(
        "--sweep", required=True, metavar="param=v1,v2,...",
        help=f"parameter to vary, one of {sorted(SWEEP_PARAMS)}",
    )
    p_sweep.set_defaults(func=cmd_sweep)

    p_ablate = sub.add_parser(
        "ablate", help="compare vanilla, cache-only, and cache-plus-correction"
    )
    common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpecacheError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
