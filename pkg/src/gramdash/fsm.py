"""Per-rule finite state machines, determinization, and structural hashing.

Each rule body compiles (Thompson-style) into an FSM whose edges are byte
ranges, symbolic references to other rules, or epsilons. Determinization
removes epsilons and makes byte ranges disjoint per state while leaving
rule-reference edges symbolic, so most machines end up deterministic over
the mixed alphabet of byte ranges and rule names.

Hashing numbers the states of an FSM by a BFS over canonically sorted
edges and folds finality and edge labels into a 64-bit value with a
non-commutative mix. Reference edges contribute the referenced rule's
hash rather than its name, so structurally identical subgrammars collide
on purpose within and across grammars: the hash is the cache address for
token mask reuse. Rules are hashed hierarchically (leaves, then DAG nodes,
then simple reference cycles via rotated folds); anything gnarlier gets a
unique never-shared hash, which is conservative but safe.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field, replace

from . import grammar as G

# Edge tuples: (EDGE_TERM, lo, hi, target) | (EDGE_REF, rule_id, 0, target)
# | (EDGE_EPS, 0, 0, target)
EDGE_TERM = 0
EDGE_REF = 1
EDGE_EPS = 2

MASK64 = (1 << 64) - 1
_PRIME = 0x100000001B3
# Sentinel for non-terminal edge slots: odd and far outside the byte range.
SENTINEL_K = 0x9E3779B97F4A7C15
# Placeholder hash assigned to not-yet-hashed members of a reference cycle.
CYCLE_SENTINEL = 0xD6E8FEB86659FD93
_UNIQUE_SALT = 0xA24BAED4963EE407
_unique_counter = itertools.count(1)


def hash_combine(h: int, x: int) -> int:
    """Non-commutative 64-bit mix: rotate, xor, multiply."""
    h = ((h << 13) | (h >> 51)) & MASK64
    return ((h ^ (x & MASK64)) * _PRIME) & MASK64


def hash_fold(h: int, *xs: int) -> int:
    for x in xs:
        h = hash_combine(h, x)
    return h


class UnhashedReferenceError(Exception):
    def __init__(self, rule: int | str):
        super().__init__(f"rule {rule!r} referenced before it was hashed")
        self.rule = rule


@dataclass
class Fsm:
    n_states: int
    initial: int
    finals: frozenset[int]
    edges: list[list[tuple[int, int, int, int]]]
    hash: int | None = None
    det_overflow: bool = False

    def ref_targets(self) -> set[int]:
        return {e[1] for row in self.edges for e in row if e[0] == EDGE_REF}

    def has_kind(self, kind: int) -> bool:
        return any(e[0] == kind for row in self.edges for e in row)


# ---------------------------------------------------------------------------
# Thompson construction
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, rule_ids: dict[str, int]):
        self.rule_ids = rule_ids
        self.edges: list[list[tuple[int, int, int, int]]] = []

    def state(self) -> int:
        self.edges.append([])
        return len(self.edges) - 1

    def term(self, s: int, lo: int, hi: int, t: int):
        self.edges[s].append((EDGE_TERM, lo, hi, t))

    def ref(self, s: int, rule: int, t: int):
        self.edges[s].append((EDGE_REF, rule, 0, t))

    def eps(self, s: int, t: int):
        self.edges[s].append((EDGE_EPS, 0, 0, t))

    def frag(self, e: G.RuleExpr) -> tuple[int, int]:
        if isinstance(e, G.Empty):
            s = self.state()
            return s, s
        if isinstance(e, G.ByteLiteral):
            s = self.state()
            cur = s
            for b in e.data:
                nxt = self.state()
                self.term(cur, b, b, nxt)
                cur = nxt
            return s, cur
        if isinstance(e, G.CharClass):
            s, t = self.state(), self.state()
            for lo, hi in e.byte_ranges():
                self.term(s, lo, hi, t)
            return s, t
        if isinstance(e, G.RuleRef):
            s, t = self.state(), self.state()
            self.ref(s, self.rule_ids[e.name], t)
            return s, t
        if isinstance(e, G.Sequence):
            start, end = self.frag(e.items[0])
            for item in e.items[1:]:
                s2, e2 = self.frag(item)
                self.eps(end, s2)
                end = e2
            return start, end
        if isinstance(e, G.Choice):
            s, t = self.state(), self.state()
            for item in e.items:
                fs, fe = self.frag(item)
                self.eps(s, fs)
                self.eps(fe, t)
            return s, t
        if isinstance(e, G.Repetition):
            if e.tail:
                raise ValueError("counted repetition tails compile as whole rules")
            start = end = self.state()
            for _ in range(e.min):
                fs, fe = self.frag(e.body)
                self.eps(end, fs)
                end = fe
            if e.max is None:
                loop = self.state()
                out = self.state()
                self.eps(end, loop)
                fs, fe = self.frag(e.body)
                self.eps(loop, fs)
                self.eps(fe, loop)
                self.eps(loop, out)
                return start, out
            for _ in range(e.max - e.min):
                fs, fe = self.frag(e.body)
                nxt = self.state()
                self.eps(end, fs)
                self.eps(fe, nxt)
                self.eps(end, nxt)  # skip this optional copy
                end = nxt
            return start, end
        if isinstance(e, G.TagDispatchExpr):
            raise ValueError("TagDispatch does not compile to an FSM")
        raise TypeError(f"cannot build FSM from {e!r}")


def build_fsm(body: G.RuleExpr, rule_ids: dict[str, int]) -> Fsm:
    """Thompson construction; rule references stay symbolic edges.

    A counted tail (``Repetition(tail=True)``) builds the FSM of its body;
    the repeat loop is driven by the parser's per-item counter.
    """
    if isinstance(body, G.Repetition) and body.tail:
        body = body.body
    b = _Builder(rule_ids)
    start, end = b.frag(body)
    return Fsm(len(b.edges), start, frozenset({end}), b.edges)


# ---------------------------------------------------------------------------
# Determinization
# ---------------------------------------------------------------------------

DEFAULT_DET_CAP = 4096


def _eps_closures(f: Fsm) -> list[frozenset[int]]:
    closures = []
    for s in range(f.n_states):
        seen = {s}
        stack = [s]
        while stack:
            cur = stack.pop()
            for kind, _, _, t in f.edges[cur]:
                if kind == EDGE_EPS and t not in seen:
                    seen.add(t)
                    stack.append(t)
        closures.append(frozenset(seen))
    return closures


def determinize(f: Fsm, cap: int = DEFAULT_DET_CAP) -> Fsm:
    """Remove epsilons and overlap among byte-range edges.

    Subset construction over the mixed alphabet of byte ranges and rule
    names: reference edges are treated as opaque symbols, so states that
    keep reference edges may stay nondeterministic in the byte view. If
    the construction exceeds ``cap`` states the input is returned
    unchanged with ``det_overflow`` set.
    """
    closures = _eps_closures(f)
    start = frozenset().union(*(closures[s] for s in [f.initial]))
    ids: dict[frozenset[int], int] = {start: 0}
    order = [start]
    out_edges: list[list[tuple[int, int, int, int]]] = []
    finals = set()
    queue = deque([start])
    while queue:
        sset = queue.popleft()
        sid = ids[sset]
        while len(out_edges) <= sid:
            out_edges.append([])
        if sset & f.finals:
            finals.add(sid)
        terms: list[tuple[int, int, int]] = []
        refs: dict[int, set[int]] = {}
        for s in sset:
            for kind, a, _b, t in f.edges[s]:
                if kind == EDGE_TERM:
                    terms.append((a, _b, t))
                elif kind == EDGE_REF:
                    refs.setdefault(a, set()).add(t)

        def intern(tset: frozenset[int]) -> int | None:
            if tset not in ids:
                if len(ids) >= cap:
                    return None
                ids[tset] = len(ids)
                order.append(tset)
                queue.append(tset)
            return ids[tset]

        row = out_edges[sid]
        if terms:
            points = sorted({p for lo, hi, _ in terms for p in (lo, hi + 1)})
            spans: list[tuple[int, int, frozenset[int]]] = []
            for a, b in zip(points, points[1:]):
                tgt = frozenset().union(
                    *(closures[t] for lo, hi, t in terms if lo <= a and b - 1 <= hi)
                )
                if not tgt:
                    continue
                if spans and spans[-1][1] == a - 1 and spans[-1][2] == tgt:
                    spans[-1] = (spans[-1][0], b - 1, tgt)
                else:
                    spans.append((a, b - 1, tgt))
            for lo, hi, tset in spans:
                tid = intern(tset)
                if tid is None:
                    return replace(f, det_overflow=True)
                row.append((EDGE_TERM, lo, hi, tid))
        for rule in sorted(refs):
            tset = frozenset().union(*(closures[t] for t in refs[rule]))
            tid = intern(tset)
            if tid is None:
                return replace(f, det_overflow=True)
            row.append((EDGE_REF, rule, 0, tid))
    return Fsm(len(order), 0, frozenset(finals), out_edges)


def nfa_accepts(f: Fsm, data: bytes, expand_ref=None) -> bool:
    """Direct multi-state simulation, used as a determinization oracle.

    ``expand_ref`` maps a rule id to a set of byte strings accepted by the
    referenced rule (tests supply small closed languages).
    """
    closures = _eps_closures(f)

    def close(states):
        out = set()
        for s in states:
            out |= closures[s]
        return out

    states = close({f.initial})
    frontier = {(0, s) for s in states}
    seen = set(frontier)
    acc = False
    work = list(frontier)
    while work:
        pos, s = work.pop()
        if pos == len(data) and s in f.finals:
            acc = True
            continue
        for kind, a, b, t in f.edges[s]:
            nxts = []
            if kind == EDGE_TERM and pos < len(data) and a <= data[pos] <= b:
                nxts = [(pos + 1, c) for c in closures[t]]
            elif kind == EDGE_EPS:
                nxts = [(pos, c) for c in closures[t]]
            elif kind == EDGE_REF and expand_ref is not None:
                for sub in expand_ref(a):
                    if data[pos : pos + len(sub)] == sub:
                        nxts.extend((pos + len(sub), c) for c in closures[t])
            for item in nxts:
                if item not in seen:
                    seen.add(item)
                    work.append(item)
    return acc


# ---------------------------------------------------------------------------
# Structural hashing
# ---------------------------------------------------------------------------


def _sorted_edges(
    row: list[tuple[int, int, int, int]], env: dict[int, int]
) -> list[tuple[int, int, int, int]]:
    terms = sorted((e for e in row if e[0] == EDGE_TERM), key=lambda e: (e[1], e[2], e[3]))
    refs = sorted((e for e in row if e[0] == EDGE_REF), key=lambda e: (env[e[1]], e[3]))
    eps = sorted((e for e in row if e[0] == EDGE_EPS), key=lambda e: e[3])
    return terms + refs + eps


def hash_fsm(f: Fsm, env: dict[int, int], record: bool = False):
    """BFS hash with canonically sorted edges.

    Every visited state folds in its finality padded with the sentinel;
    terminal edges fold their byte range, reference edges the sentinel
    plus the referenced rule's hash, epsilons the sentinel twice; every
    edge then folds the BFS id of its target. Returns the hash, plus the
    BFS numbering and sorted edge rows when ``record`` is set.
    """
    for rid in f.ref_targets():
        if rid not in env:
            raise UnhashedReferenceError(rid)
    order: dict[int, int] = {f.initial: 0}
    queue = deque([f.initial])
    h = 0
    rows: dict[int, list[tuple[int, int, int, int]]] = {}
    while queue:
        s = queue.popleft()
        h = hash_fold(h, 1 if s in f.finals else 0, SENTINEL_K, SENTINEL_K)
        row = _sorted_edges(f.edges[s], env)
        rows[s] = row
        for kind, a, b, t in row:
            if t not in order:
                order[t] = len(order)
                queue.append(t)
            if kind == EDGE_TERM:
                h = hash_fold(h, a, b)
            elif kind == EDGE_REF:
                h = hash_fold(h, SENTINEL_K, env[a])
            else:
                h = hash_fold(h, SENTINEL_K, SENTINEL_K)
            h = hash_combine(h, order[t])
    if record:
        return h, order, rows
    return h


def hash_cycle(local: list[int]) -> list[int]:
    """Rotated folds giving each member of a simple cycle a distinct hash."""
    n = len(local)
    out = []
    for i in range(n):
        h = 0
        for j in range(n):
            h = hash_combine(h, local[(i + j) % n])
        out.append(h)
    return out


def fresh_unique_hash() -> int:
    return hash_fold(0, _UNIQUE_SALT, next(_unique_counter))


def _tarjan_sccs(nodes: list[int], succ: dict[int, set[int]]) -> list[list[int]]:
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    sccs: list[list[int]] = []
    counter = itertools.count()

    def strongconnect(v: int):
        work = [(v, iter(sorted(succ.get(v, ()))))]
        index[v] = low[v] = next(counter)
        stack.append(v)
        on_stack.add(v)
        while work:
            node, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = next(counter)
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(succ.get(w, ())))))
                    advanced = True
                    break
                if w in on_stack:
                    low[node] = min(low[node], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                sccs.append(comp)

    for v in nodes:
        if v not in index:
            strongconnect(v)
    return sccs


def hash_grammar(
    fsms: dict[int, Fsm],
    dispatch_rules: dict[int, G.TagDispatchExpr] | None = None,
    rule_ids: dict[str, int] | None = None,
) -> tuple[dict[int, int], dict[int, tuple[dict[int, int], dict]]]:
    """Assign 64-bit structural hashes to every rule FSM.

    Leaves first, then acyclic reference structure in topological order,
    then simple cycles (exactly one in-cycle reference per member) via the
    sentinel-then-rotated-fold procedure. Members of any other strongly
    connected component get fresh unique hashes. Returns the hash map plus
    per-rule BFS numbering and sorted edge rows for canonicalization.
    """
    dispatch_rules = dispatch_rules or {}
    rule_ids = rule_ids or {}
    succ: dict[int, set[int]] = {}
    for rid, f in fsms.items():
        succ[rid] = set(f.ref_targets())
    for rid, expr in dispatch_rules.items():
        succ[rid] = {rule_ids[name] for _, name in expr.pairs}

    env: dict[int, int] = {}
    orders: dict[int, tuple[dict[int, int], dict]] = {}
    sccs = _tarjan_sccs(sorted(succ), succ)  # dependencies come out first

    for comp in sccs:
        if len(comp) == 1 and comp[0] not in succ[comp[0]]:
            rid = comp[0]
            if rid in dispatch_rules:
                env[rid] = _hash_dispatch(dispatch_rules[rid], rule_ids, env)
                continue
            h, order, rows = hash_fsm(fsms[rid], env, record=True)
            env[rid] = h
            orders[rid] = (order, rows)
            continue
        # cyclic component
        members = set(comp)
        simple = True
        ring: dict[int, int] = {}
        for rid in comp:
            if rid in dispatch_rules:
                simple = False
                break
            intra = [e[1] for row in fsms[rid].edges for e in row if e[0] == EDGE_REF and e[1] in members]
            if len(intra) != 1:
                simple = False
                break
            ring[rid] = intra[0]
        if simple:
            # walk the ring from its smallest member for a stable traversal
            startm = min(comp)
            ordered = [startm]
            while ring[ordered[-1]] != startm:
                nxt = ring[ordered[-1]]
                if nxt in ordered:  # lasso, not a clean ring
                    simple = False
                    break
                ordered.append(nxt)
            if simple and len(ordered) != len(comp):
                simple = False
        if simple:
            env2 = dict(env)
            for rid in comp:
                env2[rid] = CYCLE_SENTINEL
            locals_, recs = [], []
            for rid in ordered:
                h, order, rows = hash_fsm(fsms[rid], env2, record=True)
                locals_.append(h)
                recs.append((rid, order, rows))
            for (rid, order, rows), h in zip(recs, hash_cycle(locals_)):
                env[rid] = h
                orders[rid] = (order, rows)
        else:
            for rid in sorted(comp):
                env[rid] = fresh_unique_hash()
            env2 = dict(env)
            for rid in sorted(comp):
                if rid in dispatch_rules:
                    continue
                _, order, rows = hash_fsm(fsms[rid], env2, record=True)
                orders[rid] = (order, rows)
    return env, orders


def _hash_dispatch(expr: G.TagDispatchExpr, rule_ids: dict[str, int], env: dict[int, int]) -> int:
    h = hash_fold(0, SENTINEL_K, len(expr.pairs))
    for tag, name in expr.pairs:
        h = hash_fold(h, len(tag), *tag)
        h = hash_combine(h, env[rule_ids[name]])
    h = hash_fold(h, SENTINEL_K, len(expr.stop_strs))
    for stop in expr.stop_strs:
        h = hash_fold(h, len(stop), *stop)
    return hash_combine(h, 1 if expr.loop_after_dispatch else 0)


def canonicalize(f: Fsm, order: dict[int, int], rows: dict) -> Fsm:
    """Renumber states by the hash BFS order, dropping unreachable ones."""
    n = len(order)
    edges: list[list[tuple[int, int, int, int]]] = [[] for _ in range(n)]
    for old, new in order.items():
        edges[new] = [(k, a, b, order[t]) for (k, a, b, t) in rows[old]]
    finals = frozenset(order[s] for s in f.finals if s in order)
    return Fsm(n, 0, finals, edges, hash=f.hash, det_overflow=f.det_overflow)


# ---------------------------------------------------------------------------
# Whole-grammar compilation
# ---------------------------------------------------------------------------


@dataclass
class CompiledGrammar:
    """A grammar lowered to canonical per-rule FSMs plus runtime tables.

    ``source`` keeps the pre-compression grammar (the oracle parses that
    one); ``grammar`` is the compiled view the engine runs on. Rules
    holding a counted repetition tail carry their (min, max) bounds in
    ``rep_bounds`` and their FSM is the FSM of the repeated body.
    """

    source: G.Grammar
    grammar: G.Grammar
    fsms: list[Fsm | None]
    hashes: list[int]
    rep_bounds: list[tuple[int, int | None] | None]
    root_id: int
    dispatch: G.TagDispatchExpr | None
    rep_threshold: int
    compressed: bool

    def __post_init__(self):
        n = len(self.fsms)
        self.term_edges: list[list[tuple[tuple[int, int, int], ...]]] = [None] * n
        self.ref_edges: list[list[tuple[tuple[int, int], ...]]] = [None] * n
        self.eps_edges: list[list[tuple[int, ...]]] = [None] * n
        self.finals: list[frozenset[int]] = [frozenset()] * n
        for rid, f in enumerate(self.fsms):
            if f is None:
                self.term_edges[rid] = []
                self.ref_edges[rid] = []
                self.eps_edges[rid] = []
                continue
            self.term_edges[rid] = [
                tuple((a, b, t) for k, a, b, t in row if k == EDGE_TERM) for row in f.edges
            ]
            self.ref_edges[rid] = [
                tuple((a, t) for k, a, b, t in row if k == EDGE_REF) for row in f.edges
            ]
            self.eps_edges[rid] = [
                tuple(t for k, a, b, t in row if k == EDGE_EPS) for row in f.edges
            ]
            self.finals[rid] = f.finals
        self._extras: dict = {}

    @property
    def names(self) -> list[str]:
        return self.grammar.names

    @property
    def n_rules(self) -> int:
        return len(self.fsms)

    @property
    def grammar_hash(self) -> int:
        return self.hashes[self.root_id]

    def fsm_state_count(self) -> int:
        return sum(f.n_states for f in self.fsms if f is not None)

    def rules_by_hash(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for rid, h in enumerate(self.hashes):
            out.setdefault(h, rid)
        return out

    def dump(self) -> dict:
        """JSON-friendly description of states, edges, and hashes."""
        kinds = {EDGE_TERM: "byte", EDGE_REF: "rule", EDGE_EPS: "eps"}
        rules = []
        for rid, f in enumerate(self.fsms):
            entry = {
                "name": self.names[rid],
                "hash": f"{self.hashes[rid]:016x}",
                "repeat_bounds": list(self.rep_bounds[rid]) if self.rep_bounds[rid] else None,
            }
            if f is None:
                entry["dispatch"] = True
            else:
                entry["states"] = f.n_states
                entry["finals"] = sorted(f.finals)
                entry["edges"] = [
                    [
                        {
                            "kind": kinds[k],
                            "lo": a,
                            "hi": b,
                            "rule": self.names[a] if k == EDGE_REF else None,
                            "target": t,
                        }
                        for k, a, b, t in row
                    ]
                    for row in f.edges
                ]
            rules.append(entry)
        return {"root": self.names[self.root_id], "rules": rules}


def compile_grammar(
    g: G.Grammar,
    rep_threshold: int = G.DEFAULT_REP_THRESHOLD,
    compress: bool = True,
    det_cap: int = DEFAULT_DET_CAP,
) -> CompiledGrammar:
    """Full pipeline: compress, build FSMs, determinize, hash, canonicalize."""
    g2 = G.compress_repetitions(g, rep_threshold) if compress else g
    rule_ids = {name: i for i, (name, _) in enumerate(g2.rules)}
    fsms: list[Fsm | None] = []
    rep_bounds: list[tuple[int, int | None] | None] = []
    dispatch_rules: dict[int, G.TagDispatchExpr] = {}
    dispatch_expr = None
    for rid, (name, body) in enumerate(g2.rules):
        if isinstance(body, G.TagDispatchExpr):
            dispatch_rules[rid] = body
            if rid == g2.rule_id(g2.root):
                dispatch_expr = body
            fsms.append(None)
            rep_bounds.append(None)
            continue
        if isinstance(body, G.Repetition) and body.tail:
            rep_bounds.append((body.min, body.max))
        else:
            rep_bounds.append(None)
        fsms.append(determinize(build_fsm(body, rule_ids), det_cap))
    fsm_map = {rid: f for rid, f in enumerate(fsms) if f is not None}
    env, orders = hash_grammar(fsm_map, dispatch_rules, rule_ids)
    canon: list[Fsm | None] = []
    for rid, f in enumerate(fsms):
        if f is None:
            canon.append(None)
            continue
        order, rows = orders[rid]
        cf = canonicalize(f, order, rows)
        cf.hash = env[rid]
        canon.append(cf)
    hashes = [env[rid] for rid in range(len(fsms))]
    return CompiledGrammar(
        source=g,
        grammar=g2,
        fsms=canon,
        hashes=hashes,
        rep_bounds=rep_bounds,
        root_id=g2.rule_id(g2.root),
        dispatch=dispatch_expr,
        rep_threshold=rep_threshold,
        compressed=compress,
    )
