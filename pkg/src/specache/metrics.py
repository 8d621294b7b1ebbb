"""Run accounting derived from the step trace.

Every quantity is recomputed from the trace rather than accumulated in
the engine, so a persisted trace is enough to reproduce the numbers and
the engine cannot drift from the definitions.  Target-side events are
"verify" and "miss_step"; each commits lnew tokens in one target
forward.  "draft_expand" events carry the layer width in candidate_len.
"correct" events are bookkeeping only and never enter the sums.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import InputError
from .lm import ModelSpec

if TYPE_CHECKING:
    from .engine import StepTrace

TARGET_EVENTS = ("verify", "miss_step")


@dataclass(frozen=True)
class RunMetrics:
    tokens_emitted: int
    sim_time: float
    target_forwards: int
    draft_forwards: int
    hits: int
    misses: int
    mean_acceptance_length: float
    cache_hit_rate: float
    tokens_per_time: float
    speedup_vs_vanilla: float
    params_x_lnew: float
    draft_params_x_width: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetrics":
        return cls(**{f: d[f] for f in cls.__dataclass_fields__})


def finalize(
    trace: Sequence["StepTrace"],
    target_spec: ModelSpec,
    draft_spec: ModelSpec | None = None,
) -> RunMetrics:
    """Reduce a trace to run metrics.

    The vanilla baseline for the speedup is the same token count at one
    target forward per token, so an all-miss trace comes out at exactly
    1.0 and never below.
    """
    if not trace:
        raise InputError("cannot finalize an empty trace")
    tokens = 0
    target_forwards = 0
    draft_forwards = 0
    hits = 0
    misses = 0
    width_sum = 0
    sim_time = 0.0
    for ev in trace:
        sim_time = max(sim_time, ev.sim_time)
        if ev.event == "verify":
            target_forwards += 1
            tokens += ev.lnew
            hits += 1
        elif ev.event == "miss_step":
            target_forwards += 1
            tokens += ev.lnew
            misses += 1
        elif ev.event == "draft_expand":
            draft_forwards += 1
            width_sum += ev.candidate_len
        elif ev.event != "correct":
            raise InputError(f"unknown trace event {ev.event!r}")
    if target_forwards == 0:
        raise InputError("trace has no target-side events")
    mean_lnew = tokens / target_forwards
    queries = hits + misses
    hit_rate = hits / queries if queries else 0.0
    vanilla_time = tokens * target_spec.forward_latency
    speedup = vanilla_time / sim_time if sim_time > 0.0 else 0.0
    mean_width = width_sum / draft_forwards if draft_forwards else 0.0
    draft_params = draft_spec.params_billions if draft_spec is not None else 0.0
    return RunMetrics(
        tokens_emitted=tokens,
        sim_time=sim_time,
        target_forwards=target_forwards,
        draft_forwards=draft_forwards,
        hits=hits,
        misses=misses,
        mean_acceptance_length=mean_lnew,
        cache_hit_rate=hit_rate,
        tokens_per_time=tokens / sim_time if sim_time > 0.0 else 0.0,
        speedup_vs_vanilla=speedup,
        params_x_lnew=target_spec.params_billions * mean_lnew,
        draft_params_x_width=draft_params * mean_width,
    )


def aggregate(runs: Iterable[RunMetrics]) -> RunMetrics:
    """Pool several runs by summing raw counts, then re-deriving rates.

    Ratio fields are recomputed from the pooled sums (not averaged), so
    the result is what a single concatenated run would have reported.
    params_x_lnew and draft_params_x_width are token- and
    forward-weighted means of the per-run values.
    """
    runs = list(runs)
    if not runs:
        raise InputError("cannot aggregate zero runs")
    tokens = sum(r.tokens_emitted for r in runs)
    sim_time = sum(r.sim_time for r in runs)
    target_forwards = sum(r.target_forwards for r in runs)
    draft_forwards = sum(r.draft_forwards for r in runs)
    hits = sum(r.hits for r in runs)
    misses = sum(r.misses for r in runs)
    vanilla = sum(r.speedup_vs_vanilla * r.sim_time for r in runs)
    mean_lnew = tokens / target_forwards if target_forwards else 0.0
    # Per-run params_x_lnew = params * per-run mean lnew; weight by
    # target forwards to recover params * pooled mean.
    pxl = sum(r.params_x_lnew * r.target_forwards for r in runs)
    dxw = sum(r.draft_params_x_width * r.draft_forwards for r in runs)
    queries = hits + misses
    return RunMetrics(
        tokens_emitted=tokens,
        sim_time=sim_time,
        target_forwards=target_forwards,
        draft_forwards=draft_forwards,
        hits=hits,
        misses=misses,
        mean_acceptance_length=mean_lnew,
        cache_hit_rate=hits / queries if queries else 0.0,
        tokens_per_time=tokens / sim_time if sim_time > 0.0 else 0.0,
        speedup_vs_vanilla=vanilla / sim_time if sim_time > 0.0 else 0.0,
        params_x_lnew=pxl / target_forwards if target_forwards else 0.0,
        draft_params_x_width=dxw / draft_forwards if draft_forwards else 0.0,
    )
