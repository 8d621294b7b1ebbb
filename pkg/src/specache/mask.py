"""Attention masks that linearize the candidate tree for batched forwards.

A mask row describes what one newly-added candidate token may attend to:
its ancestor chain inside the tree plus itself.  Tokens added in the
same step never see each other, so the trailing new-token block is the
identity.  Base-context columns (everything up to and including the
anchor) are implicitly visible to every row and are not materialized.

The anchor is normally the cache root (the last committed token).  The
un-steered ablation instead keeps expanding the tree it grew from the
original base context, so every helper accepts an explicit anchor
handle; None means "follow the cache root".

Two construction paths exist on purpose: an incremental builder that
extends parent rows (what a real KV-cached system would do) and a
stateless full rebuild used as the reference in differential tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import TreeCache
from .errors import InputError

TokenId = int


@dataclass
class AttentionMask:
    """Boolean visibility matrix for the newest tree layer.

    bits has one row per new token and one column per visible tree
    token; the last n_new columns correspond to the new tokens
    themselves.  columns/tokens describe what each column refers to
    (arena handles; a handle of -1 marks a not-yet-allocated token).
    """

    bits: np.ndarray
    n_new: int
    columns: list[int]
    tokens: list[TokenId]

    def to_text(self) -> str:
        lines = ["".join("1" if b else "0" for b in row) for row in self.bits]
        return "\n".join(lines) + "\n"


def _resolve_anchor(cache: TreeCache, anchor: int | None) -> int:
    if anchor is None:
        return cache.root
    if not isinstance(anchor, int) or anchor < 0 or anchor >= len(cache.arena):
        raise InputError(f"unknown anchor handle {anchor!r}")
    if not cache.arena[anchor].alive:
        raise InputError(f"anchor handle {anchor} is dead")
    return anchor


def _alive_below(cache: TreeCache, anchor: int) -> list[int]:
    out = []
    stack = list(cache.arena[anchor].children)
    while stack:
        h = stack.pop()
        n = cache.arena[h]
        if not n.alive:
            continue
        out.append(h)
        stack.extend(n.children)
    out.sort(key=lambda h: (cache.arena[h].layer, h))
    return out


def _ancestor_chain(cache: TreeCache, handle: int, anchor: int) -> list[int]:
    """Handles strictly below the anchor, shallowest first, ending at
    `handle` itself."""
    rev = []
    cur = handle
    while cur != anchor:
        rev.append(cur)
        parent = cache.arena[cur].parent
        if parent is None:
            raise InputError(f"node {handle} does not descend from anchor {anchor}")
        cur = parent
    rev.reverse()
    return rev


def build_mask(
    cache: TreeCache, new_tokens: list[tuple[int, TokenId]], anchor: int | None = None
) -> AttentionMask:
    """Stateless mask for hypothetical tokens attached at given parents.

    Columns are every alive tree token below the anchor followed by the
    new tokens; row i sees the ancestor chain of its parent, the parent
    itself, and its own trailing column.
    """
    if not new_tokens:
        raise InputError("build_mask needs at least one (parent, token) pair")
    root = _resolve_anchor(cache, anchor)
    prior = _alive_below(cache, root)
    col_of = {h: i for i, h in enumerate(prior)}
    n_prior = len(prior)
    n_new = len(new_tokens)
    bits = np.zeros((n_new, n_prior + n_new), dtype=bool)
    tokens = [cache.arena[h].token for h in prior]
    for i, (parent, token) in enumerate(new_tokens):
        if not isinstance(parent, int) or parent < 0 or parent >= len(cache.arena):
            raise InputError(f"unknown parent handle {parent!r}")
        pnode = cache.arena[parent]
        if not pnode.alive:
            raise InputError(f"parent handle {parent} is dead")
        if parent != root:
            for a in _ancestor_chain(cache, parent, root):
                bits[i, col_of[a]] = True
        bits[i, n_prior + i] = True
        tokens.append(token)
    return AttentionMask(bits=bits, n_new=n_new, columns=prior + [-1] * n_new, tokens=tokens)


def full_visibility(cache: TreeCache, anchor: int | None = None) -> tuple[list[int], np.ndarray]:
    """Reference visibility of the whole alive tree below the anchor.

    Returns ((layer, id)-ordered handles, square boolean matrix) where
    row i marks the ancestors-plus-self of handle i, each row computed
    by an independent parent-link walk.
    """
    root = _resolve_anchor(cache, anchor)
    handles = _alive_below(cache, root)
    col_of = {h: i for i, h in enumerate(handles)}
    bits = np.zeros((len(handles), len(handles)), dtype=bool)
    for i, h in enumerate(handles):
        for a in _ancestor_chain(cache, h, root)[:-1]:
            bits[i, col_of[a]] = True
        bits[i, i] = True
    return handles, bits


class MaskBuilder:
    """Incremental mask maintenance across expansions.

    Visible sets are inherited: a new node sees exactly what its parent
    saw plus itself, so each layer costs O(new nodes) set unions instead
    of fresh ancestry walks.  Any cache epoch change (correction, reset,
    compaction) invalidates handles and triggers a full resync; columns
    for pruned nodes drop out at the next emission, which compacts the
    mask after corrections.
    """

    def __init__(self, cache: TreeCache, anchor: int | None = None):
        self.cache = cache
        self._anchor_spec = anchor
        self._visible: dict[int, frozenset[int]] = {}
        self._epoch = cache.epoch
        self._resync()

    def _anchor(self) -> int:
        return _resolve_anchor(self.cache, self._anchor_spec)

    def _resync(self) -> None:
        self._visible = {}
        root = self._anchor()
        for h in _alive_below(self.cache, root):
            chain = _ancestor_chain(self.cache, h, root)
            self._visible[h] = frozenset(chain)
        self._epoch = self.cache.epoch

    def _sync(self) -> None:
        if self.cache.epoch != self._epoch:
            self._resync()

    def note_layer(self, new_handles: list[int]) -> None:
        """Record visibility for nodes just created by an expansion."""
        self._sync()
        root = self._anchor()
        for h in new_handles:
            parent = self.cache.arena[h].parent
            if parent == root or parent is None:
                self._visible[h] = frozenset((h,))
            else:
                base = self._visible.get(parent)
                if base is None:
                    base = frozenset(_ancestor_chain(self.cache, parent, root))
                    self._visible[parent] = base
                self._visible[h] = base | {h}

    def frontier_mask(self) -> AttentionMask:
        """Mask for forwarding the current frontier.

        Columns: alive non-frontier tree tokens in (layer, id) order,
        then the frontier in frontier order (the identity block).
        """
        self._sync()
        cache = self.cache
        root = self._anchor()
        frontier = list(cache.frontier)
        if not frontier:
            raise InputError("cannot build a frontier mask for an empty frontier")
        in_frontier = set(frontier)
        prior = [h for h in _alive_below(cache, root) if h not in in_frontier]
        order = prior + frontier
        col_of = {h: i for i, h in enumerate(order)}
        bits = np.zeros((len(frontier), len(order)), dtype=bool)
        for i, h in enumerate(frontier):
            vis = self._visible.get(h)
            if vis is None:
                vis = frozenset(_ancestor_chain(cache, h, root))
                self._visible[h] = vis
            for a in vis:
                bits[i, col_of[a]] = True
        return AttentionMask(
            bits=bits,
            n_new=len(frontier),
            columns=order,
            tokens=[cache.arena[h].token for h in order],
        )
