"""Pure-Python kernel fallback.

Mirrors ``specache._kernels`` (the compiled Cython module) operation for
operation.  The two implementations must stay bit-identical: every
floating-point op here is performed in the same order, with the same
libm functions (CPython's ``math.exp``/``math.log`` call the process
libm, as does the C code), and the compiled build disables FMA
contraction.  Any change to numeric op order must be made in both files.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND_NAME = "pure"

_M64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX_C1 = 0xBF58476D1CE4E5B9
_MIX_C2 = 0x94D049BB133111EB
_SEED_SALT = 0xD1B54A32D192ED03
_INV_2_53 = 1.0 / 9007199254740992.0


def _mix64(z: int) -> int:
    """splitmix64 finalizer over uint64."""
    z &= _M64
    z = ((z ^ (z >> 30)) * _MIX_C1) & _M64
    z = ((z ^ (z >> 27)) * _MIX_C2) & _M64
    return z ^ (z >> 31)


def _stream_state(seed: int, tail: tuple[int, ...]) -> int:
    """Fold a seed and a context tail into one uint64 stream state."""
    s = _mix64(((seed & _M64) + _SEED_SALT) & _M64)
    for t in tail:
        s = _mix64(s ^ _mix64((t + 1) & _M64))
    return s


def _uniform(state: int, i: int) -> float:
    v = _mix64((state + (i + 1) * _GAMMA) & _M64)
    return (v >> 11) * _INV_2_53


def kgram_dist(
    seed: int,
    seed2: int,
    mix_weight: float,
    tail: tuple[int, ...],
    vocab_size: int,
    sharpness: float,
    temperature: float,
) -> np.ndarray:
    """Next-token distribution of a hashed k-gram model.

    Logits are uniforms in [0, 1) drawn from a splitmix64 stream keyed by
    (seed, tail), optionally perturbed by a second stream weighted by
    ``mix_weight``, scaled by ``sharpness``, and pushed through a
    temperature softmax.  temperature == 0 yields a one-hot argmax
    (first maximum wins).
    """
    n = vocab_size
    s1 = _stream_state(seed, tail)
    u = [0.0] * n
    for i in range(n):
        u[i] = _uniform(s1, i)
    if mix_weight != 0.0:
        s2 = _stream_state(seed2, tail)
        for i in range(n):
            u[i] = u[i] + mix_weight * _uniform(s2, i)

    out = np.empty(n, dtype=np.float64)
    if temperature == 0.0:
        best = 0
        best_v = sharpness * u[0]
        for i in range(1, n):
            a = sharpness * u[i]
            if a > best_v:
                best_v = a
                best = i
        out.fill(0.0)
        out[best] = 1.0
        return out

    b = [0.0] * n
    m = -math.inf
    for i in range(n):
        v = (sharpness * u[i]) / temperature
        b[i] = v
        if v > m:
            m = v
    z = 0.0
    for i in range(n):
        e = math.exp(b[i] - m)
        b[i] = e
        z = z + e
    for i in range(n):
        out[i] = b[i] / z
    return out


def rows_topk(dists: np.ndarray, k: int) -> list[list[tuple[int, float]]]:
    """Per-row top-k tokens ordered by (probability desc, token asc).

    Zero-probability tokens are excluded even when k exceeds the support
    size.  ``dists`` is an (N, V) float64 array.
    """
    out: list[list[tuple[int, float]]] = []
    for row in dists:
        nz = np.flatnonzero(row > 0.0)
        order = np.argsort(-row[nz], kind="stable")
        if k < order.shape[0]:
            order = order[:k]
        picked = nz[order]
        out.append([(int(t), float(row[t])) for t in picked])
    return out
