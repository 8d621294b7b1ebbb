"""Deterministic toy language models and tree-batched forwards.

Models here are pure functions of their construction parameters: the
same context always yields the same distribution, bit for bit, so runs
are reproducible across processes and kernel backends.  They recompute
from the full context on every call (no incremental decode state), which
keeps the draft and target workers free to share them concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .backend import get_kernels
from .errors import ConfigError, CorpusFormatError, InputError, MaskError

TokenId = int

# one shared guard so model value caches cannot grow without bound on
# adversarial workloads; real workloads stay far below it
_MEMO_CAP = 1 << 20


@dataclass(frozen=True)
class Vocabulary:
    """Token id space [0, size)."""

    size: int

    def __post_init__(self):
        if not isinstance(self.size, int) or self.size < 2:
            raise ConfigError(f"vocabulary size must be an int >= 2, got {self.size!r}")

    def contains(self, token: TokenId) -> bool:
        return isinstance(token, int) and 0 <= token < self.size


@dataclass(frozen=True)
class ModelSpec:
    """Abstract cost description used by the simulator, not by math.

    params_billions feeds the computation-load metrics; forward_latency
    is the simulated wall time of one forward pass in arbitrary units.
    """

    params_billions: float
    forward_latency: float

    def __post_init__(self):
        for name in ("params_billions", "forward_latency"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"ModelSpec.{name} must be a finite positive number, got {v!r}")


def check_prob_vector(vec: np.ndarray, size: int) -> np.ndarray:
    """Validate a probability vector: shape (size,), entries in [0, 1],
    no NaN, sum within 1e-9 of 1. Returns the array unchanged."""
    arr = np.asarray(vec, dtype=np.float64)
    if arr.shape != (size,):
        raise InputError(f"probability vector has shape {arr.shape}, expected ({size},)")
    if np.isnan(arr).any():
        raise InputError("probability vector contains NaN")
    if (arr < 0.0).any():
        raise InputError("probability vector contains negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > 1e-9:
        raise InputError(f"probability vector sums to {total!r}, expected 1 within 1e-9")
    return arr


def scale_probs(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Apply temperature to an explicit probability vector.

    temperature 1 returns the vector unchanged; 0 collapses onto the
    argmax (first maximum wins); otherwise entries are raised to 1/T and
    renormalized, which equals standard logit scaling.
    """
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    n = probs.shape[0]
    if temperature == 1.0:
        return probs.copy()
    out = np.zeros(n, dtype=np.float64)
    if temperature == 0.0:
        best = 0
        best_v = probs[0]
        for i in range(1, n):
            if probs[i] > best_v:
                best_v = probs[i]
                best = i
        out[best] = 1.0
        return out
    inv = 1.0 / temperature
    z = 0.0
    for i in range(n):
        w = math.pow(probs[i], inv)
        out[i] = w
        z = z + w
    for i in range(n):
        out[i] = out[i] / z
    return out


class ToyModel:
    """Base class: context validation, EOS self-loop, tree forwards.

    Subclasses implement `_dist(context, temperature)` for a validated
    non-EOS-terminated context.  Instances are immutable apart from an
    internal value cache and are safe for concurrent readers.
    """

    def __init__(self, vocab: Vocabulary, spec: ModelSpec, eos_token: TokenId | None = None):
        if eos_token is not None and not vocab.contains(eos_token):
            raise ConfigError(f"eos_token {eos_token!r} outside vocabulary of size {vocab.size}")
        self.vocab = vocab
        self.spec = spec
        self.eos_token = eos_token
        self._eos_onehot: np.ndarray | None = None
        if eos_token is not None:
            one = np.zeros(vocab.size, dtype=np.float64)
            one[eos_token] = 1.0
            one.setflags(write=False)
            self._eos_onehot = one

    # subclasses override
    def _dist(self, context: tuple[TokenId, ...], temperature: float) -> np.ndarray:
        raise NotImplementedError

    def _check_context(self, context) -> tuple[TokenId, ...]:
        ctx = tuple(context)
        if not ctx:
            raise InputError("empty context: models need at least one token")
        return ctx

    def next_distribution(self, context, temperature: float = 1.0) -> np.ndarray:
        """Distribution over the next token given the full context.

        The returned array is read-only and must not be mutated.
        """
        if temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {temperature}")
        ctx = self._check_context(context)
        if self.eos_token is not None and ctx[-1] == self.eos_token:
            # EOS is absorbing: probability 1 of repeating itself
            return self._eos_onehot
        out = self._dist(ctx, float(temperature))
        out.setflags(write=False)
        return out

    def batch_tree_forward(self, base_context, tree_tokens, mask, temperature: float = 1.0):
        """One tree-attention forward over the newest layer of candidates.

        Observationally equivalent to running `next_distribution` per
        root-to-node path; a real backend would batch this into a single
        masked pass.  Row i of the result conditions on base_context
        followed by the tokens of row i's visible mask columns.
        """
        base = tuple(base_context)
        if not base:
            raise InputError("empty base context")
        toks = list(tree_tokens)
        for t in toks:
            if not self.vocab.contains(t):
                raise InputError(f"tree token {t!r} outside vocabulary of size {self.vocab.size}")
        bits = mask.bits
        n_new = mask.n_new
        if bits.ndim != 2 or bits.shape != (n_new, len(toks)):
            raise MaskError(
                f"mask shape {bits.shape} inconsistent with {n_new} new tokens over {len(toks)} columns"
            )
        n_cols = len(toks)
        tail = bits[:, n_cols - n_new:]
        if not np.array_equal(tail, np.eye(n_new, dtype=bool)):
            raise MaskError("trailing new-token block of the mask is not the identity")
        # rows that share a column must agree on everything before it,
        # otherwise some row skips an ancestor
        seen: dict[int, tuple[int, ...]] = {}
        paths: list[list[int]] = []
        for i in range(n_new):
            vis = np.flatnonzero(bits[i])
            prefix: tuple[int, ...] = ()
            for c in vis:
                c = int(c)
                prefix = prefix + (c,)
                known = seen.get(c)
                if known is None:
                    seen[c] = prefix
                elif known != prefix:
                    raise MaskError(f"mask row {i} is not ancestor-closed at column {c}")
            paths.append([toks[c] for c in vis])
        return [self.next_distribution(base + tuple(p), temperature) for p in paths]


class KGramModel(ToyModel):
    """Hash-seeded Markov model of fixed order.

    The next-token distribution depends only on the last `order` context
    tokens.  Logits come from a keyed splitmix64 stream, optionally
    blended with a second stream (`mix_weight`) to make related model
    pairs whose agreement degrades as the weight grows.  `sharpness`
    controls concentration: 0 is uniform, large values approach one-hot.
    """

    def __init__(
        self,
        seed: int,
        vocab: Vocabulary,
        order: int,
        sharpness: float,
        spec: ModelSpec,
        eos_token: TokenId | None = None,
        mix_seed: int = 0,
        mix_weight: float = 0.0,
    ):
        super().__init__(vocab, spec, eos_token)
        if not isinstance(order, int) or order < 1:
            raise ConfigError(f"order must be an int >= 1, got {order!r}")
        if not (math.isfinite(sharpness) and sharpness >= 0):
            raise ConfigError(f"sharpness must be finite and >= 0, got {sharpness!r}")
        if not (math.isfinite(mix_weight) and mix_weight >= 0):
            raise ConfigError(f"mix_weight must be finite and >= 0, got {mix_weight!r}")
        self.seed = int(seed)
        self.order = order
        self.sharpness = float(sharpness)
        self.mix_seed = int(mix_seed)
        self.mix_weight = float(mix_weight)
        self._memo: dict[tuple, np.ndarray] = {}

    def _dist(self, context: tuple[TokenId, ...], temperature: float) -> np.ndarray:
        tail = context[-self.order:]
        for t in tail:
            if not self.vocab.contains(t):
                raise InputError(f"token {t!r} outside vocabulary of size {self.vocab.size}")
        key = (tail, temperature)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        out = get_kernels().kgram_dist(
            self.seed,
            self.mix_seed,
            self.mix_weight,
            tail,
            self.vocab.size,
            self.sharpness,
            temperature,
        )
        out.setflags(write=False)
        if len(self._memo) >= _MEMO_CAP:
            self._memo.clear()
        self._memo[key] = out
        return out


class ScriptedModel(ToyModel):
    """Explicit context -> distribution table with a default fallback."""

    def __init__(
        self,
        table: dict[tuple[TokenId, ...], np.ndarray],
        default: np.ndarray,
        vocab: Vocabulary,
        spec: ModelSpec,
        eos_token: TokenId | None = None,
    ):
        super().__init__(vocab, spec, eos_token)
        self.default = check_prob_vector(np.array(default, dtype=np.float64), vocab.size)
        self.default.setflags(write=False)
        self.table: dict[tuple[TokenId, ...], np.ndarray] = {}
        for ctx, vec in table.items():
            key = tuple(ctx)
            for t in key:
                if not self.vocab.contains(t):
                    raise InputError(f"table context token {t!r} outside vocabulary")
            arr = check_prob_vector(np.array(vec, dtype=np.float64), vocab.size)
            arr.setflags(write=False)
            self.table[key] = arr

    def _dist(self, context: tuple[TokenId, ...], temperature: float) -> np.ndarray:
        for t in context:
            if not self.vocab.contains(t):
                raise InputError(f"token {t!r} outside vocabulary of size {self.vocab.size}")
        base = self.table.get(context)
        if base is None:
            base = self.default
        if temperature == 1.0:
            return base
        return scale_probs(base, temperature)


def make_kgram_model(
    seed: int,
    vocab: Vocabulary,
    order: int,
    sharpness: float,
    spec: ModelSpec | None = None,
    eos_token: TokenId | None = None,
    mix_seed: int = 0,
    mix_weight: float = 0.0,
) -> KGramModel:
    """Factory mirroring the KGramModel constructor with a default spec."""
    return KGramModel(
        seed=seed,
        vocab=vocab,
        order=order,
        sharpness=sharpness,
        spec=spec or ModelSpec(params_billions=1.0, forward_latency=1.0),
        eos_token=eos_token,
        mix_seed=mix_seed,
        mix_weight=mix_weight,
    )


def make_uniform_model(
    vocab: Vocabulary, spec: ModelSpec | None = None, eos_token: TokenId | None = None
) -> KGramModel:
    """Every context maps to the exact uniform distribution 1/V."""
    return make_kgram_model(0, vocab, order=1, sharpness=0.0, spec=spec, eos_token=eos_token)


# module-level op aliases; methods carry the implementation
def next_distribution(model: ToyModel, context, temperature: float = 1.0) -> np.ndarray:
    return model.next_distribution(context, temperature)


def batch_tree_forward(model: ToyModel, base_context, tree_tokens, mask, temperature: float = 1.0):
    return model.batch_tree_forward(base_context, tree_tokens, mask, temperature)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def load_scripted_table(path: str):
    """Parse a plain-text distribution table.

    One entry per line: context tokens, an arrow, the distribution, e.g.
    ``3 1 -> 0.0 1.0 0.0 0.0``.  A line whose context is ``*`` sets the
    default fallback (required).  ``#`` starts a comment.  Returns
    (table, default, vocab_size).
    """
    table: dict[tuple[int, ...], list[float]] = {}
    default: list[float] | None = None
    size: int | None = None
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    with fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "->" not in line:
                raise CorpusFormatError(path, line_no, "expected 'context -> distribution'")
            lhs, rhs = line.split("->", 1)
            try:
                dist = [float(x) for x in rhs.split()]
            except ValueError as exc:
                raise CorpusFormatError(path, line_no, f"bad distribution value: {exc}") from None
            if not dist:
                raise CorpusFormatError(path, line_no, "empty distribution")
            if size is None:
                size = len(dist)
            elif len(dist) != size:
                raise CorpusFormatError(
                    path, line_no, f"distribution has {len(dist)} entries, expected {size}"
                )
            lhs = lhs.strip()
            if lhs == "*":
                if default is not None:
                    raise CorpusFormatError(path, line_no, "duplicate default ('*') entry")
                default = dist
                continue
            try:
                ctx = tuple(int(x) for x in lhs.split())
            except ValueError as exc:
                raise CorpusFormatError(path, line_no, f"bad context token: {exc}") from None
            if not ctx:
                raise CorpusFormatError(path, line_no, "empty context (use '*' for the default)")
            if ctx in table:
                raise CorpusFormatError(path, line_no, f"duplicate context {list(ctx)}")
            table[ctx] = dist
    if size is None:
        raise CorpusFormatError(path, 1, "table file has no entries")
    if default is None:
        raise CorpusFormatError(path, 1, "table file has no default ('*') entry")
    return table, default, size


def _build_model(cfg: dict, vocab: Vocabulary, eos_token, base_dir: str, where: str) -> ToyModel:
    import os

    if not isinstance(cfg, dict):
        raise ConfigError(f"{where}: expected an object, got {type(cfg).__name__}")
    kind = cfg.get("type", "kgram")
    try:
        spec = ModelSpec(
            params_billions=cfg.get("params_billions", 1.0),
            forward_latency=cfg.get("forward_latency", 1.0),
        )
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if kind == "kgram":
        try:
            return KGramModel(
                seed=cfg.get("seed", 0),
                vocab=vocab,
                order=cfg.get("order", 2),
                sharpness=cfg.get("sharpness", 1.0),
                spec=spec,
                eos_token=eos_token,
                mix_seed=cfg.get("mix_seed", 0),
                mix_weight=cfg.get("mix_weight", 0.0),
            )
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if kind == "uniform":
        return make_uniform_model(vocab, spec=spec, eos_token=eos_token)
    if kind == "scripted":
        table_path = cfg.get("table")
        if not table_path:
            raise ConfigError(f"{where}: scripted model needs a 'table' file path")
        table_path = os.path.join(base_dir, table_path)
        table, default, size = load_scripted_table(table_path)
        if size != vocab.size:
            raise ConfigError(
                f"{where}: table rows have {size} entries but vocab_size is {vocab.size}"
            )
        return ScriptedModel(table, default, vocab, spec, eos_token)
    raise ConfigError(f"{where}: unknown model type {kind!r}")


def load_models_file(path: str) -> tuple[ToyModel, ToyModel]:
    """Load a (draft, target) model pair from a JSON definition file."""
    import os

    try:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "vocab_size" not in doc:
        raise ConfigError(f"{path}: missing 'vocab_size'")
    vocab = Vocabulary(doc["vocab_size"])
    eos_token = doc.get("eos_token")
    if eos_token is not None and not vocab.contains(eos_token):
        raise ConfigError(f"{path}: eos_token {eos_token!r} outside vocabulary")
    base_dir = os.path.dirname(os.path.abspath(path))
    missing = [k for k in ("draft", "target") if k not in doc]
    if missing:
        raise ConfigError(f"{path}: missing model definition(s): {', '.join(missing)}")
    draft = _build_model(doc["draft"], vocab, eos_token, base_dir, f"{path}: draft")
    target = _build_model(doc["target"], vocab, eos_token, base_dir, f"{path}: target")
    return draft, target
