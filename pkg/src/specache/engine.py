"""Decode loop coordinating the draft-fed cache and the target verifier.

Two execution modes share all protocol logic.  serial_sim interleaves
draft and target work deterministically and advances a virtual clock in
model-latency units: a cycle runs up to `ratio` draft expansions, then
one target verification, and costs max(draft work, target latency)
because the two sides would overlap in a real deployment.  concurrent
runs the draft on its own thread against the shared cache, paces both
sides with real sleeps via time_scale, and discards in-flight draft
work whenever a correction bumps the cache epoch.  Greedy output is
identical across modes because every committed token is the target's
own choice regardless of what the cache held.

Each target step commits accepted + 1 tokens in one (batched) target
forward.  The draft proposes with certainty, so lossless verification
receives a proposal probability of 1.0 per position.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .cache import CacheConfig, TreeCache
from .errors import ConfigError, FrontierFull, InputError
from .lm import ToyModel
from .mask import MaskBuilder
from .metrics import RunMetrics, finalize
from .verify import VerifyOutcome, argmax_token, sample_index, verify_greedy, verify_sampling

TokenId = int

MODES = ("serial_sim", "concurrent")


def communication_ratio(target_latency: float, draft_latency: float) -> int:
    """Draft forwards that fit in one target forward, rounded up.

    The epsilon keeps exact multiples from rounding up on float noise.
    """
    if target_latency <= 0.0 or draft_latency <= 0.0:
        raise ConfigError("latencies must be positive")
    return max(1, math.ceil(target_latency / draft_latency - 1e-9))


@dataclass
class EngineConfig:
    K: int = 50
    k: int = 3
    ratio: int = 5
    temperature: float = 0.0
    max_new_tokens: int = 64
    mode: str = "serial_sim"
    correction_enabled: bool = True
    seed: int = 0
    query_depth: int | None = None
    max_depth: int | None = None
    time_scale: float = 1e-3

    def __post_init__(self) -> None:
        for name in ("K", "k", "ratio", "max_new_tokens"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.query_depth is None:
            self.query_depth = self.ratio
        if self.max_depth is None:
            self.max_depth = 2 * self.ratio
        for name in ("query_depth", "max_depth"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.temperature, (int, float)) or not math.isfinite(self.temperature):
            raise ConfigError(f"temperature must be finite, got {self.temperature!r}")
        if self.temperature < 0.0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not isinstance(self.time_scale, (int, float)) or self.time_scale <= 0.0:
            raise ConfigError(f"time_scale must be positive, got {self.time_scale!r}")
        if not isinstance(self.correction_enabled, bool):
            raise ConfigError("correction_enabled must be a bool")

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(
                f"unknown config keys {unknown}; allowed keys are {sorted(allowed)}"
            )
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StepTrace:
    step_index: int
    sim_time: float
    hit: bool
    candidate_len: int
    accepted_len: int
    lnew: int
    cache_alive_nodes: int
    event: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    output: list[TokenId]
    metrics: RunMetrics
    trace: list[StepTrace] = field(repr=False)


def _check_pair(draft: ToyModel, target: ToyModel) -> None:
    if draft.vocab.size != target.vocab.size:
        raise ConfigError(
            f"draft and target vocabularies differ: {draft.vocab.size} vs {target.vocab.size}"
        )
    if draft.eos_token != target.eos_token:
        raise ConfigError(
            f"draft and target disagree on the eos token: "
            f"{draft.eos_token!r} vs {target.eos_token!r}"
        )


def _check_prompt(prompt: Sequence[TokenId], vocab_size: int) -> list[TokenId]:
    toks = list(prompt)
    if not toks:
        raise InputError("prompt must contain at least one token")
    for i, t in enumerate(toks):
        if not isinstance(t, (int, np.integer)) or t < 0 or t >= vocab_size:
            raise InputError(f"prompt token {t!r} at position {i} is out of vocabulary")
    return [int(t) for t in toks]


class _Run:
    """State shared by both execution modes for a single decode."""

    def __init__(
        self, draft: ToyModel, target: ToyModel, prompt: Sequence[TokenId], config: EngineConfig
    ):
        _check_pair(draft, target)
        self.draft = draft
        self.target = target
        self.config = config
        self.prompt = _check_prompt(prompt, target.vocab.size)
        self.t_score = config.temperature if config.temperature > 0.0 else 1.0
        self.sampling = config.temperature > 0.0
        self.rng = np.random.default_rng(config.seed)
        self.eos = target.eos_token
        self.output: list[TokenId] = []
        self.trace: list[StepTrace] = []
        self.cache = TreeCache(
            self.prompt[-1],
            CacheConfig(K=config.K, k=config.k, max_depth=config.max_depth),
            eos_token=self.eos,
        )
        # The un-steered ablation keeps growing the tree it started from
        # the original base context, so its masks anchor at the arena
        # origin instead of following the query root.
        self.builder = MaskBuilder(self.cache, anchor=None if config.correction_enabled else 0)
        self.draft_base = list(self.prompt)
        self.done = False

    def committed(self) -> list[TokenId]:
        return self.prompt + self.output

    def _emit(self, sim_time: float, hit: bool, candidate_len: int, accepted_len: int,
              lnew: int, event: str) -> None:
        self.trace.append(
            StepTrace(
                step_index=len(self.trace),
                sim_time=sim_time,
                hit=hit,
                candidate_len=candidate_len,
                accepted_len=accepted_len,
                lnew=lnew,
                cache_alive_nodes=self.cache.alive_below_root(),
                event=event,
            )
        )

    # draft side

    def draft_step(self) -> int:
        """One draft forward: extend the frontier by one layer.

        Returns the new layer width, 0 when the draft has nothing useful
        to do (tree at max depth, or the tree is exhausted).
        """
        cache = self.cache
        if cache.frontier:
            mask = self.builder.frontier_mask()
            dists = self.draft.batch_tree_forward(
                self.draft_base, mask.tokens, mask, self.t_score
            )
        else:
            # Fresh tree: the root is the last committed token, so this
            # is a plain forward of the committed context.
            dists = self.target_context_dist(self.draft)[None, :]
        try:
            new = cache.expand_layer(dists)
        except FrontierFull:
            return 0
        if not new:
            return 0
        self.builder.note_layer(new)
        return len(new)

    def target_context_dist(self, model: ToyModel) -> np.ndarray:
        return model.next_distribution(self.committed(), temperature=self.t_score)

    # target side

    def target_step(self) -> tuple[bool, int, VerifyOutcome]:
        """Query the cache and verify; one target forward either way."""
        res = self.cache.query(self.config.query_depth)
        if not res.hit:
            dist = self.target_context_dist(self.target)
            tok = sample_index(self.rng, dist) if self.sampling else argmax_token(dist)
            return False, 0, VerifyOutcome(accepted=(), correction=tok, accepted_len=0, lnew=1)
        tokens = list(res.tokens)
        ctx = self.committed()
        dists = [
            self.target.next_distribution(ctx + tokens[:i], temperature=self.t_score)
            for i in range(len(tokens) + 1)
        ]
        if self.sampling:
            outcome = verify_sampling(dists, [1.0] * len(tokens), tokens, self.rng)
        else:
            outcome = verify_greedy(dists, tokens)
        return True, len(tokens), outcome

    def commit(self, outcome: VerifyOutcome) -> tuple[int, int]:
        """Append the step's tokens, honoring max_new_tokens and eos.

        Returns (accepted_len, lnew) as recorded, i.e. clipped to what
        was actually emitted so trace sums match the output length.
        """
        room = self.config.max_new_tokens - len(self.output)
        toks = list(outcome.committed[:room])
        if self.eos is not None and self.eos in toks:
            toks = toks[: toks.index(self.eos) + 1]
        self.output.extend(toks)
        if len(toks) < outcome.lnew or len(self.output) >= self.config.max_new_tokens:
            self.done = True
        if toks and self.eos is not None and toks[-1] == self.eos:
            self.done = True
        return max(0, len(toks) - 1), len(toks)

    def update_cache(self, outcome: VerifyOutcome) -> None:
        if self.config.correction_enabled:
            self.cache.correct(list(outcome.accepted), outcome.correction)
            self.draft_base = self.committed()
        else:
            moved = self.cache.advance_root(list(outcome.accepted), outcome.correction)
            if not moved:
                self.cache.reset(self.output[-1])
                self.draft_base = self.committed()


def run_speculative(
    draft: ToyModel, target: ToyModel, prompt: Sequence[TokenId], config: EngineConfig
) -> RunResult:
    run = _Run(draft, target, prompt, config)
    if config.mode == "serial_sim":
        _run_serial(run)
    else:
        _run_concurrent(run)
    return RunResult(
        output=run.output,
        metrics=finalize(run.trace, target.spec, draft.spec),
        trace=run.trace,
    )


def _run_serial(run: _Run) -> None:
    cfg = run.config
    d_lat = run.draft.spec.forward_latency
    t_lat = run.target.spec.forward_latency
    clock = 0.0
    # Warmup: fill the pipeline to query depth before the target looks.
    for _ in range(cfg.query_depth):
        width = run.draft_step()
        if width == 0:
            break
        clock += d_lat
        run._emit(clock, False, width, 0, 0, "draft_expand")
    while not run.done:
        cycle_start = clock
        expansions = 0
        for _ in range(cfg.ratio):
            width = run.draft_step()
            if width == 0:
                break
            expansions += 1
            run._emit(cycle_start + expansions * d_lat, False, width, 0, 0, "draft_expand")
        hit, cand_len, outcome = run.target_step()
        clock = cycle_start + max(expansions * d_lat, t_lat)
        acc, lnew = run.commit(outcome)
        run._emit(clock, hit, cand_len, acc, lnew, "verify" if hit else "miss_step")
        if not run.done:
            run.update_cache(outcome)
            run._emit(clock, hit, 0, 0, 0, "correct")


def _run_concurrent(run: _Run) -> None:
    cfg = run.config
    d_lat = run.draft.spec.forward_latency
    t_lat = run.target.spec.forward_latency
    scale = cfg.time_scale
    lock = threading.Lock()
    stop = threading.Event()
    warm = threading.Event()
    start = time.perf_counter()

    def now() -> float:
        return (time.perf_counter() - start) / scale

    warm_target = min(cfg.query_depth, cfg.max_depth)

    def draft_loop() -> None:
        applied = 0
        while not stop.is_set():
            with lock:
                epoch = run.cache.epoch
                if run.cache.depth_below_root() >= cfg.max_depth:
                    payload = None
                elif run.cache.frontier:
                    mask = run.builder.frontier_mask()
                    payload = ("tree", list(run.draft_base), mask)
                else:
                    payload = ("flat", run.committed(), None)
            if payload is None:
                # Tree is full; nothing to do until the target moves.
                warm.set()
                time.sleep(d_lat * scale * 0.25)
                continue
            kind, base, mask = payload
            if kind == "tree":
                dists = run.draft.batch_tree_forward(base, mask.tokens, mask, run.t_score)
            else:
                dists = run.draft.next_distribution(base, temperature=run.t_score)[None, :]
            time.sleep(d_lat * scale)
            with lock:
                if run.cache.epoch != epoch:
                    continue  # a correction landed while we worked; discard
                try:
                    new = run.cache.expand_layer(dists)
                except FrontierFull:
                    continue
                if not new:
                    warm.set()
                    continue
                run.builder.note_layer(new)
                run._emit(now(), False, len(new), 0, 0, "draft_expand")
                applied += 1
                if applied >= warm_target:
                    warm.set()

    worker = threading.Thread(target=draft_loop, name="draft", daemon=True)
    worker.start()
    try:
        warm.wait(timeout=warm_target * d_lat * scale * 20 + 1.0)
        while not run.done:
            time.sleep(t_lat * scale)
            with lock:
                hit, cand_len, outcome = run.target_step()
                acc, lnew = run.commit(outcome)
                run._emit(now(), hit, cand_len, acc, lnew, "verify" if hit else "miss_step")
                if not run.done:
                    run.update_cache(outcome)
                    run._emit(now(), hit, 0, 0, 0, "correct")
    finally:
        stop.set()
        worker.join(timeout=10.0)


def run_vanilla(
    target: ToyModel, prompt: Sequence[TokenId], config: EngineConfig
) -> RunResult:
    """Plain autoregressive decode: one target forward per token."""
    toks = _check_prompt(prompt, target.vocab.size)
    t_score = config.temperature if config.temperature > 0.0 else 1.0
    sampling = config.temperature > 0.0
    rng = np.random.default_rng(config.seed)
    t_lat = target.spec.forward_latency
    output: list[TokenId] = []
    trace: list[StepTrace] = []
    clock = 0.0
    while len(output) < config.max_new_tokens:
        dist = target.next_distribution(toks + output, temperature=t_score)
        tok = sample_index(rng, dist) if sampling else argmax_token(dist)
        output.append(tok)
        clock += t_lat
        trace.append(
            StepTrace(
                step_index=len(trace),
                sim_time=clock,
                hit=False,
                candidate_len=0,
                accepted_len=0,
                lnew=1,
                cache_alive_nodes=0,
                event="miss_step",
            )
        )
        if target.eos_token is not None and tok == target.eos_token:
            break
    return RunResult(output=output, metrics=finalize(trace, target.spec), trace=trace)
