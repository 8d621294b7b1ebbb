"""Tree-structured candidate cache shared by the draft and target workers.

The cache holds a beam tree rooted at the most recently committed token.
The draft deepens it one layer at a time (keeping the K best partial
continuations under cumulative log probability); the target queries the
best path for verification and then reroots the tree at the token it
actually committed, pruning everything that can no longer be reached.

Arena storage is append-only with tombstones: pruning flips an `alive`
flag, and physical compaction runs only when dead nodes dominate, so a
correction costs time proportional to the pruned region rather than the
whole arena.  Node ids are arena indices; compaction renumbers them but
preserves relative order, which keeps every tie-break stable.

Concurrency model: one writer at a time.  The engine's concurrent mode
wraps every mutating call and every query in one lock; queries take a
consistent snapshot by copying the path they return.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FrontierFull, InputError, ProtocolError

TokenId = int
_COMPACT_MIN_ARENA = 64
_COMPACT_DEAD_FRACTION = 0.75


@dataclass
class CacheConfig:
    """Beam geometry: K frontier slots, k extensions per node, depth cap."""

    K: int
    k: int
    max_depth: int

    def __post_init__(self):
        for name in ("K", "k", "max_depth"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"CacheConfig.{name} must be an int >= 1, got {v!r}")


@dataclass
class CacheNode:
    """One candidate token in the tree.

    log_score is the cumulative log probability of the path from the
    current root (the root itself sits at 0); edge_logp is the single
    conditional that created this node.
    """

    node_id: int
    token: TokenId
    parent: int | None
    layer: int
    log_score: float
    edge_logp: float
    alive: bool = True
    children: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class CandidateTuple:
    """One entry of the extension pool built during a layer expansion."""

    token: TokenId
    weight: float  # log-space: parent cumulative + edge conditional
    parent_index: int  # position of the parent in the expansion order
    edge_logp: float = 0.0  # the conditional itself, kept exact for storage


@dataclass
class QueryResult:
    """Best cached continuation of the root, plus its draft conditionals."""

    hit: bool
    path: list[int]  # node handles, root-exclusive
    tokens: list[TokenId]
    edge_logps: list[float]

    @property
    def conditionals(self) -> list[float]:
        return [math.exp(e) for e in self.edge_logps]


class TreeCache:
    """See module docstring."""

    def __init__(self, root_token: TokenId, config: CacheConfig, eos_token: TokenId | None = None):
        if not isinstance(root_token, int) or root_token < 0:
            raise InputError(f"root token must be a non-negative int, got {root_token!r}")
        self.config = config
        self.eos_token = eos_token
        self.arena: list[CacheNode] = []
        self.frontier: list[int] = []
        self.root: int = 0
        self.epoch: int = 0
        self._dead: int = 0
        self._init_root(root_token)

    # ------------------------------------------------------------------
    # construction helpers
    # ------------------------------------------------------------------

    def _init_root(self, token: TokenId) -> None:
        self.arena = [
            CacheNode(node_id=0, token=token, parent=None, layer=0, log_score=0.0, edge_logp=0.0)
        ]
        self.root = 0
        self.frontier = []
        self._dead = 0

    def _new_node(self, token: TokenId, parent: int, log_score: float, edge_logp: float) -> int:
        handle = len(self.arena)
        node = CacheNode(
            node_id=handle,
            token=token,
            parent=parent,
            layer=self.arena[parent].layer + 1,
            log_score=log_score,
            edge_logp=edge_logp,
        )
        self.arena.append(node)
        self.arena[parent].children.append(handle)
        return handle

    # ------------------------------------------------------------------
    # read side
    # ------------------------------------------------------------------

    def node(self, handle: int) -> CacheNode:
        return self.arena[handle]

    def depth_below_root(self) -> int:
        """Relative depth of the frontier; 0 when the tree is bare."""
        if not self.frontier:
            return 0
        return self.arena[self.frontier[0]].layer - self.arena[self.root].layer

    def expansion_parents(self) -> list[int]:
        """Nodes the next layer will extend: the frontier, or the root
        itself when the tree is bare (a fresh or just-reset cache)."""
        return list(self.frontier) if self.frontier else [self.root]

    def path_from_root(self, handle: int) -> list[int]:
        """Handles from the first node below the root down to `handle`."""
        rev = []
        cur = handle
        while cur != self.root:
            rev.append(cur)
            parent = self.arena[cur].parent
            if parent is None:
                raise ProtocolError(f"node {handle} does not descend from the current root")
            cur = parent
        rev.reverse()
        return rev

    def parent_paths(self) -> list[list[TokenId]]:
        """Token paths (root-exclusive) for each expansion parent."""
        out = []
        for h in self.expansion_parents():
            if h == self.root:
                out.append([])
            else:
                out.append([self.arena[n].token for n in self.path_from_root(h)])
        return out

    def alive_below_root(self) -> int:
        count = 0
        stack = list(self.arena[self.root].children)
        while stack:
            h = stack.pop()
            n = self.arena[h]
            if not n.alive:
                continue
            count += 1
            stack.extend(n.children)
        return count

    # ------------------------------------------------------------------
    # expansion
    # ------------------------------------------------------------------

    def extension_pool(self, distributions) -> list[CandidateTuple]:
        """Score the top-k extensions of every expansion parent.

        Zero-probability tokens never enter the pool, and parents whose
        token is EOS are not extended at all.
        """
        from .backend import get_kernels

        parents = self.expansion_parents()
        dists = np.asarray(distributions, dtype=np.float64)
        if dists.ndim != 2 or dists.shape[0] != len(parents):
            raise InputError(
                f"expected {len(parents)} distributions, got array of shape {dists.shape}"
            )
        if np.isnan(dists).any() or (dists < 0.0).any():
            raise InputError("distributions contain NaN or negative entries")
        sums = dists.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise InputError("distributions must each sum to 1 within 1e-9")

        rows = get_kernels().rows_topk(dists, self.config.k)
        pool: list[CandidateTuple] = []
        for idx, h in enumerate(parents):
            node = self.arena[h]
            if self.eos_token is not None and node.token == self.eos_token:
                continue
            score = node.log_score
            for tok, p in rows[idx]:
                edge = math.log(p)
                pool.append(
                    CandidateTuple(token=tok, weight=score + edge, parent_index=idx, edge_logp=edge)
                )
        return pool

    def expand_layer(self, distributions) -> list[int]:
        """Grow the tree by one layer and return the new frontier.

        `distributions` aligns with `expansion_parents()`.  The K global
        winners of the extension pool (weight desc, token asc, parent id
        asc) become the new frontier; losing tuples never allocate arena
        nodes, and branches left without a frontier descendant are
        tombstoned so every alive node stays reachable.
        """
        if self.depth_below_root() >= self.config.max_depth:
            raise FrontierFull(f"candidate tree already {self.config.max_depth} layers deep")
        parents = self.expansion_parents()
        pool = self.extension_pool(distributions)
        pool.sort(
            key=lambda c: (-c.weight, c.token, self.arena[parents[c.parent_index]].node_id)
        )
        winners = pool[: self.config.K]

        old_frontier = self.frontier
        new_frontier = []
        for cand in winners:
            parent_handle = parents[cand.parent_index]
            new_frontier.append(
                self._new_node(cand.token, parent_handle, cand.weight, cand.edge_logp)
            )
        self.frontier = new_frontier
        self._prune_dead_ends(old_frontier)
        return list(new_frontier)

    def _prune_dead_ends(self, old_frontier: list[int]) -> None:
        """Tombstone previous-frontier branches that won no extension."""
        keep: set[int] = set()
        for h in self.frontier:
            cur = self.arena[h].parent
            while cur is not None and cur not in keep:
                keep.add(cur)
                cur = self.arena[cur].parent
        for h in old_frontier:
            cur = h
            while cur != self.root and cur not in keep:
                node = self.arena[cur]
                if not node.alive:
                    break
                if any(self.arena[c].alive for c in node.children):
                    break
                node.alive = False
                self._dead += 1
                cur = node.parent

    # ------------------------------------------------------------------
    # query
    # ------------------------------------------------------------------

    def query(self, depth: int) -> QueryResult:
        """Best cached path of length min(depth, available depth).

        A miss is reported iff the root has no alive children.  The
        winning endpoint maximizes log_score; ties break toward the
        lower token, then the lower node id.
        """
        if not isinstance(depth, int) or depth < 1:
            raise InputError(f"query depth must be an int >= 1, got {depth!r}")
        root_node = self.arena[self.root]
        if not any(self.arena[c].alive for c in root_node.children):
            return QueryResult(hit=False, path=[], tokens=[], edge_logps=[])
        d = min(depth, self.depth_below_root())
        target_layer = root_node.layer + d
        seen: set[int] = set()
        best: CacheNode | None = None
        for h in self.frontier:
            cur = h
            while self.arena[cur].layer > target_layer:
                cur = self.arena[cur].parent
            if cur in seen:
                continue
            seen.add(cur)
            # the un-steered ablation leaves frontier branches that no
            # longer hang under the root; they are not queryable
            if not self._descends_from(cur, self.root) or cur == self.root:
                continue
            n = self.arena[cur]
            if best is None or (-n.log_score, n.token, n.node_id) < (
                -best.log_score,
                best.token,
                best.node_id,
            ):
                best = n
        assert best is not None
        path = self.path_from_root(best.node_id)
        return QueryResult(
            hit=True,
            path=path,
            tokens=[self.arena[h].token for h in path],
            edge_logps=[self.arena[h].edge_logp for h in path],
        )

    # ------------------------------------------------------------------
    # correction
    # ------------------------------------------------------------------

    def _walk_accepted(self, accepted) -> list[int]:
        chain = []
        cur = self.root
        for t in accepted:
            nxt = self._alive_child(cur, t)
            if nxt is None:
                raise ProtocolError(
                    f"accepted token {t!r} is not an alive cached child at depth {len(chain)}"
                )
            chain.append(nxt)
            cur = nxt
        return chain

    def _alive_child(self, handle: int, token: TokenId) -> int | None:
        for c in self.arena[handle].children:
            n = self.arena[c]
            if n.alive and n.token == token:
                return c
        return None

    def _kill_subtree(self, handle: int) -> None:
        stack = [handle]
        while stack:
            h = stack.pop()
            n = self.arena[h]
            if not n.alive:
                continue
            n.alive = False
            self._dead += 1
            stack.extend(n.children)

    def correct(self, accepted, correction_token: TokenId | None) -> int:
        """Reroot at the committed continuation and prune off-path work.

        `accepted` must be an alive root-descendant chain (the verified
        prefix).  If the correction token exists as an alive child of the
        chain end, its subtree survives; otherwise a fresh node is
        created and the next expansion starts from scratch.  Surviving
        previous-frontier nodes are re-sorted and truncated to K, and
        scores are re-based so the new root sits at 0.
        """
        chain = self._walk_accepted(accepted)
        anchor = chain[-1] if chain else self.root
        fresh = False
        if correction_token is None:
            if not chain:
                raise InputError("correct() needs a non-empty chain or a correction token")
            new_root = anchor
        else:
            found = self._alive_child(anchor, correction_token)
            if found is None:
                parent_node = self.arena[anchor]
                new_root = self._new_node(
                    correction_token, anchor, parent_node.log_score, 0.0
                )
                fresh = True
            else:
                new_root = found

        # prune every alive sibling subtree off the root -> new_root path
        path = [self.root] + chain + ([new_root] if new_root != anchor else [])
        for parent, nxt in zip(path, path[1:]):
            for c in self.arena[parent].children:
                if c != nxt and self.arena[c].alive:
                    self._kill_subtree(c)

        old_frontier = self.frontier
        self.root = new_root
        if fresh:
            survivors = []
        else:
            survivors = [
                h
                for h in old_frontier
                if self.arena[h].alive and h != new_root and self._descends_from(h, new_root)
            ]
            survivors.sort(
                key=lambda h: (
                    -self.arena[h].log_score,
                    self.arena[h].token,
                    self.arena[h].node_id,
                )
            )
            survivors = survivors[: self.config.K]
        self.frontier = survivors

        self._rebase()
        self.epoch += 1
        self._maybe_compact()
        return self.root

    def advance_root(self, accepted, correction_token: TokenId | None) -> bool:
        """Move the root along committed tokens without pruning.

        The no-correction ablation: the draft keeps expanding whatever
        tree it already has.  Returns False when the correction token is
        not a cached child, in which case the caller should `reset`.
        Scores keep their original base (ordering is unaffected).
        """
        chain = self._walk_accepted(accepted)
        anchor = chain[-1] if chain else self.root
        if correction_token is None:
            if not chain:
                raise InputError("advance_root() needs a non-empty chain or a correction token")
            new_root = anchor
        else:
            found = self._alive_child(anchor, correction_token)
            if found is None:
                return False
            new_root = found
        self.root = new_root
        self.frontier = [h for h in self.frontier if self.arena[h].alive]
        self.epoch += 1
        return True

    def reset(self, root_token: TokenId) -> None:
        """Drop the whole tree and start over from a bare root."""
        if not isinstance(root_token, int) or root_token < 0:
            raise InputError(f"root token must be a non-negative int, got {root_token!r}")
        self._init_root(root_token)
        self.epoch += 1

    def _descends_from(self, handle: int, ancestor: int) -> bool:
        cur = handle
        while cur is not None:
            if cur == ancestor:
                return True
            cur = self.arena[cur].parent
        return False

    def _rebase(self) -> None:
        """Shift the alive subtree so the current root scores 0.

        O(alive subtree), which the beam bounds by K * max_depth; keeps
        log scores from drifting toward -inf over long runs.
        """
        base = self.arena[self.root].log_score
        if base == 0.0:
            return
        stack = [self.root]
        while stack:
            h = stack.pop()
            n = self.arena[h]
            n.log_score = n.log_score - base
            stack.extend(c for c in n.children if self.arena[c].alive)
        self.arena[self.root].log_score = 0.0

    def _maybe_compact(self) -> None:
        arena_len = len(self.arena)
        if arena_len < _COMPACT_MIN_ARENA or self._dead <= _COMPACT_DEAD_FRACTION * arena_len:
            return
        # keep the root and its alive subtree; committed history above the
        # root lives in the engine's context, not here
        keep: list[int] = []
        stack = [self.root]
        while stack:
            h = stack.pop()
            n = self.arena[h]
            keep.append(h)
            stack.extend(c for c in n.children if self.arena[c].alive)
        keep.sort()  # preserve relative id order so tie-breaks are stable
        remap = {old: new for new, old in enumerate(keep)}
        new_arena = []
        for old in keep:
            n = self.arena[old]
            new_arena.append(
                CacheNode(
                    node_id=remap[old],
                    token=n.token,
                    parent=remap[n.parent] if (old != self.root and n.parent in remap) else None,
                    layer=n.layer,
                    log_score=n.log_score,
                    edge_logp=n.edge_logp,
                    alive=True,
                    children=[remap[c] for c in n.children if self.arena[c].alive],
                )
            )
        self.arena = new_arena
        self.root = remap[self.root]
        self.frontier = [remap[h] for h in self.frontier]
        self._dead = 0

    # ------------------------------------------------------------------
    # debug
    # ------------------------------------------------------------------

    def dump(self) -> str:
        """Deterministic pre-order text rendering of the alive tree."""
        lines: list[str] = []

        def emit(handle: int, depth: int) -> None:
            n = self.arena[handle]
            lines.append("  " * depth + f"{n.token}:{n.log_score:.6f}")
            kids = [c for c in n.children if self.arena[c].alive]
            kids.sort(key=lambda c: (self.arena[c].token, self.arena[c].node_id))
            for c in kids:
                emit(c, depth + 1)

        emit(self.root, 0)
        return "\n".join(lines) + "\n"
