"""Cache-free reference implementation used as ground truth in tests.

This module deliberately shares nothing with the production engine except
the grammar IR: rules are normalized to plain BNF productions, parsed with
a textbook Earley recognizer over dotted productions, and tag dispatch is
simulated with naive substring matching. No finite-state machines, hashes,
mask caches, or JIT state are consulted anywhere. It is slow by design.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .grammar import (
    ByteLiteral,
    CharClass,
    Choice,
    Empty,
    Grammar,
    Repetition,
    RuleRef,
    Sequence,
    TagDispatchExpr,
)
from .vocab import TokenMask, Vocabulary


class InvalidPrefixError(Exception):
    pass


# ---------------------------------------------------------------------------
# BNF normalization
#
# Symbols are ints: id >= 0 is a nonterminal (production table index),
# id < 0 is a terminal; terminal ranges live in a side table at -(id+1).
# ---------------------------------------------------------------------------


class _Bnf:
    def __init__(self, g: Grammar):
        self.grammar = g
        self.names: list[str] = [name for name, _ in g.rules]
        self.prods: list[list[tuple[int, ...]]] = [[] for _ in g.rules]
        self.terms: list[tuple[tuple[int, int], ...]] = []
        self._term_ids: dict[tuple, int] = {}
        self._rule_ids = {name: i for i, name in enumerate(self.names)}
        for name, body in g.rules:
            if isinstance(body, TagDispatchExpr):
                continue
            self.prods[self._rule_ids[name]] = self._alts(body)

    def rule_id(self, name: str) -> int:
        return self._rule_ids[name]

    def _terminal(self, ranges) -> int:
        key = tuple(ranges)
        if key not in self._term_ids:
            self._term_ids[key] = len(self.terms)
            self.terms.append(key)
        return -(self._term_ids[key] + 1)

    def _fresh(self, alts: list[tuple[int, ...]]) -> int:
        rid = len(self.prods)
        self.names.append(f"%{rid}")
        self.prods.append(alts)
        return rid

    def _symbols(self, e) -> tuple[int, ...]:
        """Flatten one sequence element into a symbol string."""
        if isinstance(e, Empty):
            return ()
        if isinstance(e, ByteLiteral):
            return tuple(self._terminal(((b, b),)) for b in e.data)
        if isinstance(e, CharClass):
            return (self._terminal(e.byte_ranges()),)
        if isinstance(e, RuleRef):
            return (self._rule_ids[e.name],)
        if isinstance(e, Sequence):
            out: list[int] = []
            for item in e.items:
                out.extend(self._symbols(item))
            return tuple(out)
        if isinstance(e, Choice):
            return (self._fresh(self._alts(e)),)
        if isinstance(e, Repetition):
            return (self._fresh(self._rep_alts(e)),)
        raise TypeError(f"cannot normalize {e!r}")

    def _alts(self, e) -> list[tuple[int, ...]]:
        if isinstance(e, Choice):
            out = []
            for item in e.items:
                out.extend(self._alts(item))
            return out
        if isinstance(e, Repetition):
            return self._rep_alts(e)
        return [self._symbols(e)]

    def _rep_alts(self, e: Repetition) -> list[tuple[int, ...]]:
        body = self._symbols(e.body)
        prefix = body * e.min
        if e.max is None:
            star = len(self.prods)
            self.names.append(f"%{star}")
            self.prods.append([])
            self.prods[star] = [body + (star,), ()]
            return [prefix + (star,)]
        extra = e.max - e.min
        if extra == 0:
            return [prefix]
        # opt_k ::= body opt_{k-1} | eps, chained to bound the count
        prev: int | None = None
        for _ in range(extra):
            alts = [body + ((prev,) if prev is not None else ()), ()]
            prev = self._fresh(alts)
        return [prefix + (prev,)]


# ---------------------------------------------------------------------------
# Textbook Earley recognizer (incremental over a chart stack)
# ---------------------------------------------------------------------------


class _Chart:
    __slots__ = ("items", "index", "waiting", "goal")

    def __init__(self):
        self.items: list[tuple[int, int, int, int]] = []
        self.index: set[tuple[int, int, int, int]] = set()
        self.waiting: dict[int, list[tuple[int, int, int, int]]] = {}
        self.goal = False


class ReferenceRecognizer:
    """Plain Earley recognizer over normalized productions.

    ``advance`` consumes one byte and reports whether any parse survives;
    ``can_terminate`` reports whether the consumed prefix is a complete
    sentence. Rolling back truncates the chart stack, which is equivalent
    to rerunning from scratch on the shorter prefix.
    """

    def __init__(self, g: Grammar, start: str | None = None, _bnf: _Bnf | None = None):
        self.bnf = _bnf if _bnf is not None else _Bnf(g)
        self.start = self.bnf.rule_id(start if start is not None else g.root)
        chart = _Chart()
        self.charts = [chart]
        self._close(chart, [(self.start, a, 0, 0) for a in range(len(self.bnf.prods[self.start]))], 0)

    def _close(self, chart: _Chart, seed_items, pos: int):
        prods = self.bnf.prods
        add = chart.items.append
        inset = chart.index
        completed_empty: set[int] = set()
        for it in seed_items:
            if it not in inset:
                inset.add(it)
                add(it)
        i = 0
        items = chart.items
        while i < len(items):
            rule, alt, dot, origin = items[i]
            i += 1
            prod = prods[rule][alt]
            if dot < len(prod):
                sym = prod[dot]
                if sym >= 0:
                    chart.waiting.setdefault(sym, []).append((rule, alt, dot, origin))
                    for a in range(len(prods[sym])):
                        it = (sym, a, 0, pos)
                        if it not in inset:
                            inset.add(it)
                            add(it)
                    if sym in completed_empty:
                        it = (rule, alt, dot + 1, origin)
                        if it not in inset:
                            inset.add(it)
                            add(it)
            else:
                if rule == self.start and origin == 0:
                    chart.goal = True
                if origin == pos:
                    if rule not in completed_empty:
                        completed_empty.add(rule)
                        for parent in chart.waiting.get(rule, []):
                            it = (parent[0], parent[1], parent[2] + 1, parent[3])
                            if it not in inset:
                                inset.add(it)
                                add(it)
                else:
                    for parent in self.charts[origin].waiting.get(rule, []):
                        it = (parent[0], parent[1], parent[2] + 1, parent[3])
                        if it not in inset:
                            inset.add(it)
                            add(it)

    def advance(self, byte: int) -> bool:
        prods, terms = self.bnf.prods, self.bnf.terms
        scanned = []
        for rule, alt, dot, origin in self.charts[-1].items:
            prod = prods[rule][alt]
            if dot < len(prod) and prod[dot] < 0:
                for lo, hi in terms[-(prod[dot] + 1)]:
                    if lo <= byte <= hi:
                        scanned.append((rule, alt, dot + 1, origin))
                        break
        if not scanned:
            return False
        chart = _Chart()
        self.charts.append(chart)
        self._close(chart, scanned, len(self.charts) - 1)
        return True

    def can_terminate(self) -> bool:
        return self.charts[-1].goal

    @property
    def position(self) -> int:
        return len(self.charts) - 1

    def checkpoint(self) -> int:
        return len(self.charts) - 1

    def rollback(self, marker: int):
        if not 0 <= marker < len(self.charts):
            raise ValueError(f"bad rollback marker {marker}")
        del self.charts[marker + 1 :]

    def accepts(self, data: bytes) -> bool:
        """One-shot full-string membership (restores prior state)."""
        mark = self.checkpoint()
        ok = all(self.advance(b) for b in data) and self.can_terminate()
        self.rollback(mark)
        return ok


# ---------------------------------------------------------------------------
# Tag dispatch simulation (naive substring matching, no automaton)
# ---------------------------------------------------------------------------


@dataclass
class _DispSnap:
    mode: str  # "disp" | "sub" | "done"
    buffer: bytes = b""
    sub: ReferenceRecognizer | None = None
    sub_mark: int = 0


class ReferenceDispatch:
    """Byte-level simulation of tag-dispatched decoding.

    In dispatching mode every byte is free text; tags and stop strings are
    found by checking each pattern against the tail of a rolling buffer
    (longest match wins at a shared end position). A matched tag hands the
    following bytes to a fresh recognizer for the tagged rule; the
    sub-parse ends greedily at the first byte it cannot consume once
    complete, and that byte is re-fed to the dispatching mode.
    """

    def __init__(self, g: Grammar, expr: TagDispatchExpr):
        self.grammar = g
        self.expr = expr
        self.bnf = _Bnf(g)
        self.patterns = sorted(
            [(tag, rule) for tag, rule in expr.pairs] + [(s, None) for s in expr.stop_strs],
            key=lambda p: len(p[0]),
            reverse=True,
        )
        self.window = max(len(p) for p, _ in self.patterns)
        self.snaps: list[_DispSnap] = [_DispSnap("disp")]

    @property
    def position(self) -> int:
        return len(self.snaps) - 1

    def _feed_disp(self, buffer: bytes, byte: int) -> _DispSnap | None:
        buf = (buffer + bytes([byte]))[-self.window :]
        for pat, rule in self.patterns:
            if buf.endswith(pat):
                if rule is None:
                    return _DispSnap("done")
                sub = ReferenceRecognizer(self.grammar, rule, _bnf=self.bnf)
                return _DispSnap("sub", b"", sub, sub.checkpoint())
        return _DispSnap("disp", buf)

    def advance(self, byte: int) -> bool:
        cur = self.snaps[-1]
        if cur.mode == "done":
            return False
        if cur.mode == "sub":
            sub = cur.sub
            sub.rollback(cur.sub_mark)
            if sub.advance(byte):
                self.snaps.append(_DispSnap("sub", b"", sub, sub.checkpoint()))
                return True
            if sub.can_terminate():
                nxt = self._feed_disp(b"", byte)
                self.snaps.append(nxt)
                return True
            return False
        nxt = self._feed_disp(cur.buffer, byte)
        self.snaps.append(nxt)
        return True

    def can_terminate(self) -> bool:
        cur = self.snaps[-1]
        if cur.mode == "done":
            return True
        if self.expr.stop_strs:
            return False
        if cur.mode == "disp":
            return True
        cur.sub.rollback(cur.sub_mark)
        return cur.sub.can_terminate()

    def checkpoint(self) -> int:
        return len(self.snaps) - 1

    def rollback(self, marker: int):
        if not 0 <= marker < len(self.snaps):
            raise ValueError(f"bad rollback marker {marker}")
        del self.snaps[marker + 1 :]


def reference_matcher(g: Grammar):
    body = g.body(g.root)
    if isinstance(body, TagDispatchExpr):
        return ReferenceDispatch(g, body)
    return ReferenceRecognizer(g)


# ---------------------------------------------------------------------------
# Mask oracle and engine diffing
# ---------------------------------------------------------------------------


def _trial(matcher, data: bytes) -> bool:
    mark = matcher.checkpoint()
    ok = True
    for b in data:
        if not matcher.advance(b):
            ok = False
            break
    matcher.rollback(mark)
    return ok


def mask_from_matcher(matcher, vocab: Vocabulary) -> TokenMask:
    """Token mask by brute-force trial of every token (shared prefixes
    walked once via a checkpoint stack)."""
    order = sorted(
        (t for t in range(vocab.size) if t != vocab.eos_id), key=lambda t: vocab.tokens[t]
    )
    mask = TokenMask(vocab.size)
    stack: list[tuple[bytes, int]] = []  # (consumed prefix, marker before it)
    dead: bytes | None = None
    for tid in order:
        tok = vocab.tokens[tid]
        if not tok:
            continue
        if dead is not None and tok[: len(dead)] == dead:
            continue
        dead = None
        while stack and tok[: len(stack[-1][0])] != stack[-1][0]:
            matcher.rollback(stack.pop()[1])
        done = len(stack[-1][0]) if stack else 0
        ok = True
        for i in range(done, len(tok)):
            mark = matcher.checkpoint()
            if not matcher.advance(tok[i]):
                ok = False
                dead = tok[: i + 1]
                break
            stack.append((tok[: i + 1], mark))
        if ok:
            mask.set(tid)
    while stack:
        matcher.rollback(stack.pop()[1])
    if matcher.can_terminate():
        mask.set(vocab.eos_id)
    return mask


def oracle_mask(g: Grammar, prefix: bytes, vocab: Vocabulary) -> TokenMask:
    """Ground-truth mask after ``prefix``: a token is allowed iff every one
    of its bytes extends a viable parse; EOS iff the prefix is a sentence."""
    matcher = reference_matcher(g)
    for i, b in enumerate(prefix):
        if not matcher.advance(b):
            raise InvalidPrefixError(f"prefix dies at byte {i}")
    return mask_from_matcher(matcher, vocab)


@dataclass
class StepRecord:
    position: int
    token_id: int | None
    mismatches: list[int] = field(default_factory=list)


@dataclass
class OracleReport:
    steps: list[StepRecord]
    agreed: bool

    def first_disagreement(self) -> StepRecord | None:
        for s in self.steps:
            if s.mismatches:
                return s
        return None


def diff_trace(
    g: Grammar,
    vocab: Vocabulary,
    steps: int,
    seed: int = 0,
    engine_mask_fn=None,
    engine_advance_fn=None,
) -> OracleReport:
    """Random valid decode comparing an engine's mask to the oracle's.

    The engine is supplied as two callables so the caller controls its
    configuration and can inject faults: ``engine_mask_fn()`` returns the
    engine mask for the current state, ``engine_advance_fn(token_bytes)``
    feeds the sampled token. Defaults build the production engine.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if engine_mask_fn is None or engine_advance_fn is None:
        from . import maskcache
        from .dispatch import make_matcher
        from .fsm import compile_grammar

        cg = compile_grammar(g)
        pool = maskcache.CachePool()
        engine = make_matcher(cg)
        engine_mask_fn = lambda: maskcache.generate_mask(engine, vocab, pool)  # noqa: E731
        engine_advance_fn = lambda tok: all(engine.advance(b) for b in tok)  # noqa: E731

    rng = random.Random(seed)
    matcher = reference_matcher(g)
    records: list[StepRecord] = []
    agreed = True
    for step in range(steps):
        want = mask_from_matcher(matcher, vocab)
        got = engine_mask_fn()
        mism = sorted(set(want.ids()) ^ set(got.ids()))
        rec = StepRecord(step, None, mism)
        records.append(rec)
        if mism:
            agreed = False
            break
        allowed = want.ids()
        if not allowed:
            break
        tid = rng.choice(allowed)
        rec.token_id = tid
        if tid == vocab.eos_id:
            break
        for b in vocab.tokens[tid]:
            matcher.advance(b)
        engine_advance_fn(vocab.tokens[tid])
    return OracleReport(records, agreed)
