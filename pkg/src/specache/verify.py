"""Chain verification of a cached candidate path against target output.

The target scores the committed context extended by the candidate
tokens, producing one next-token distribution per position: dists[0]
conditions on the context alone, dists[i] on context + candidate[:i].
Greedy verification keeps the longest prefix the target would itself
have produced; lossless verification runs the accept/reject coin per
position.  Both return the accepted prefix plus exactly one token taken
from the target's own distribution at the first divergence (or at the
end), so every call commits accepted_len + 1 tokens and lnew counts
them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, ProtocolError

TokenId = int


@dataclass(frozen=True)
class VerifyOutcome:
    accepted: tuple[TokenId, ...]
    correction: TokenId
    accepted_len: int
    lnew: int

    @property
    def committed(self) -> tuple[TokenId, ...]:
        return self.accepted + (self.correction,)


def argmax_token(probs: np.ndarray) -> TokenId:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties.
    return int(np.argmax(probs))


def sample_index(rng: np.random.Generator, probs: np.ndarray) -> TokenId:
    """Draw an index from a probability vector with one uniform."""
    cdf = np.cumsum(probs)
    total = cdf[-1]
    if not np.isfinite(total) or total <= 0.0:
        raise InputError("cannot sample from an all-zero distribution")
    u = rng.random() * total
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, len(probs) - 1)


def _check_inputs(target_dists: Sequence[np.ndarray], candidate: Sequence[TokenId]) -> None:
    if len(target_dists) != len(candidate) + 1:
        raise InputError(
            f"need len(candidate)+1 target distributions, got {len(target_dists)} "
            f"for {len(candidate)} candidate tokens"
        )
    for i, tok in enumerate(candidate):
        if not isinstance(tok, (int, np.integer)) or tok < 0 or tok >= len(target_dists[i]):
            raise InputError(f"candidate token {tok!r} at position {i} is out of vocabulary")


def verify_greedy(
    target_dists: Sequence[np.ndarray], candidate: Sequence[TokenId]
) -> VerifyOutcome:
    """Longest prefix matching the target's argmax chain.

    The correction is the target argmax at the divergence point, or the
    continuation argmax when the whole candidate survives.  Ties go to
    the lowest token id, matching argmax_token.
    """
    _check_inputs(target_dists, candidate)
    n = 0
    while n < len(candidate) and argmax_token(target_dists[n]) == candidate[n]:
        n += 1
    accepted = tuple(int(t) for t in candidate[:n])
    correction = argmax_token(target_dists[n])
    return VerifyOutcome(accepted=accepted, correction=correction, accepted_len=n, lnew=n + 1)


def verify_sampling(
    target_dists: Sequence[np.ndarray],
    draft_conditionals: Sequence[float],
    candidate: Sequence[TokenId],
    rng: np.random.Generator,
) -> VerifyOutcome:
    """Lossless accept/reject verification.

    Position i accepts candidate token x with probability
    min(1, p_i(x) / q_i(x)) where p is the target distribution and q_i
    the probability the draft proposed x with.  A deterministic proposal
    (the cache hands over its single best path) is the point mass q = 1,
    which callers encode by passing 1.0.  On rejection the correction is
    drawn from the residual max(p - q * onehot(x), 0) renormalized; if
    the residual vanishes it falls back to p itself.  Full acceptance
    samples the continuation from the final distribution.  The output
    token stream is distributed exactly as ancestral sampling from the
    target.
    """
    _check_inputs(target_dists, candidate)
    if len(draft_conditionals) != len(candidate):
        raise InputError(
            f"need one draft conditional per candidate token, got "
            f"{len(draft_conditionals)} for {len(candidate)}"
        )
    n = 0
    correction: TokenId | None = None
    for i, tok in enumerate(candidate):
        p = target_dists[i]
        q = float(draft_conditionals[i])
        if not np.isfinite(q) or q <= 0.0:
            raise ProtocolError(
                f"draft conditional {q!r} at position {i}: the cache proposed a "
                f"token it assigned no probability"
            )
        p_tok = float(p[tok])
        accept = min(1.0, p_tok / q)
        if rng.random() < accept:
            n += 1
            continue
        residual = np.maximum(p - q * _onehot(tok, len(p)), 0.0)
        mass = float(residual.sum())
        if mass <= 0.0:
            residual = p
        correction = sample_index(rng, residual)
        break
    if correction is None:
        correction = sample_index(rng, target_dists[len(candidate)])
    accepted = tuple(int(t) for t in candidate[:n])
    return VerifyOutcome(accepted=accepted, correction=correction, accepted_len=n, lnew=n + 1)


def _onehot(tok: TokenId, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[tok] = 1.0
    return v
