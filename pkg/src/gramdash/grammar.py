"""EBNF grammar front end: parsing, validation, repetition compression.

The surface syntax is GBNF-flavored: one ``name ::= expr`` rule per line,
``#`` comments, double-quoted byte literals with ``\\xNN`` escapes, ``[...]``
byte classes, grouping, ``|`` alternation, and postfix ``*`` ``+`` ``?``
``{l,r}`` repetition. A ``TagDispatch(("<tag>", rule), ...; stop="...")``
form may appear as the entire body of the root rule. The format is
documented in docs/grammar-format.md.

Grammars are immutable after construction. Repetition compression rewrites
every bounded repetition over a threshold into a fixed-size prefix chain
plus a counted tail rule, so downstream automata stay small no matter how
large the repetition bounds are.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field


class GrammarError(Exception):
    """Base class for grammar construction errors."""


class GrammarSyntaxError(GrammarError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


class UnknownRuleError(GrammarError):
    def __init__(self, name: str):
        super().__init__(f"reference to undefined rule '{name}'")
        self.name = name


class NullableRepetitionBodyError(GrammarError):
    def __init__(self, rule: str):
        super().__init__(f"repetition body in rule '{rule}' can match the empty string")
        self.rule = rule


# ---------------------------------------------------------------------------
# Expression IR
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ByteLiteral:
    data: bytes


@dataclass(frozen=True)
class CharClass:
    """Inclusive byte ranges; ``negated`` complements them over 0..255."""

    ranges: tuple[tuple[int, int], ...]
    negated: bool = False

    def byte_ranges(self) -> tuple[tuple[int, int], ...]:
        """Resolved, sorted, disjoint positive ranges."""
        merged = merge_ranges(self.ranges)
        if not self.negated:
            return merged
        out = []
        prev = 0
        for lo, hi in merged:
            if lo > prev:
                out.append((prev, lo - 1))
            prev = hi + 1
        if prev <= 0xFF:
            out.append((prev, 0xFF))
        return tuple(out)


@dataclass(frozen=True)
class Sequence:
    items: tuple["RuleExpr", ...]


@dataclass(frozen=True)
class Choice:
    items: tuple["RuleExpr", ...]


@dataclass(frozen=True)
class RuleRef:
    name: str


@dataclass(frozen=True)
class Repetition:
    """``body`` repeated between ``min`` and ``max`` times (None = unbounded).

    ``tail=True`` marks a counted tail produced by compression; such a node
    is only valid as the entire body of a rule and is matched with a runtime
    repeat counter instead of expanded states.
    """

    body: "RuleExpr"
    min: int
    max: int | None
    tail: bool = False


@dataclass(frozen=True)
class TagDispatchExpr:
    """Tag-triggered dispatch between free text and sub-grammars.

    Only valid as the entire body of the root rule.
    """

    pairs: tuple[tuple[bytes, str], ...]
    stop_strs: tuple[bytes, ...] = ()
    loop_after_dispatch: bool = True


@dataclass(frozen=True)
class Empty:
    pass


EMPTY = Empty()

RuleExpr = (
    ByteLiteral | CharClass | Sequence | Choice | RuleRef | Repetition | TagDispatchExpr | Empty
)


def merge_ranges(ranges) -> tuple[tuple[int, int], ...]:
    """Sort and coalesce inclusive byte ranges."""
    rs = sorted((lo, hi) for lo, hi in ranges if lo <= hi)
    out: list[tuple[int, int]] = []
    for lo, hi in rs:
        if out and lo <= out[-1][1] + 1:
            out[-1] = (out[-1][0], max(out[-1][1], hi))
        else:
            out.append((lo, hi))
    return tuple(out)


def seq(items) -> RuleExpr:
    items = tuple(items)
    flat: list[RuleExpr] = []
    for it in items:
        if isinstance(it, Sequence):
            flat.extend(it.items)
        elif not isinstance(it, Empty):
            flat.append(it)
    if not flat:
        return EMPTY
    if len(flat) == 1:
        return flat[0]
    return Sequence(tuple(flat))


def choice(items) -> RuleExpr:
    items = tuple(items)
    if len(items) == 1:
        return items[0]
    return Choice(items)


# ---------------------------------------------------------------------------
# Grammar container
# ---------------------------------------------------------------------------


@dataclass
class Grammar:
    rules: list[tuple[str, RuleExpr]]
    root: str
    digest: str = ""

    def __post_init__(self):
        self._index = {name: i for i, (name, _) in enumerate(self.rules)}
        if len(self._index) != len(self.rules):
            seen = set()
            for name, _ in self.rules:
                if name in seen:
                    raise GrammarError(f"duplicate rule name '{name}'")
                seen.add(name)
        if self.root not in self._index:
            raise UnknownRuleError(self.root)
        if not self.digest:
            self.digest = hashlib.sha256(to_text(self).encode()).hexdigest()

    def rule_id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownRuleError(name) from None

    def body(self, name: str) -> RuleExpr:
        return self.rules[self.rule_id(name)][1]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.rules]

    def __eq__(self, other):
        return (
            isinstance(other, Grammar)
            and self.rules == other.rules
            and self.root == other.root
        )


@dataclass(frozen=True)
class Diagnostic:
    rule: str
    code: str
    reason: str


# ---------------------------------------------------------------------------
# Concrete syntax
# ---------------------------------------------------------------------------

_ESCAPES = {"n": 0x0A, "t": 0x09, "r": 0x0D, "\\": 0x5C, '"': 0x22, "'": 0x27, "0": 0x00}
_UNESCAPES = {0x0A: "\\n", 0x09: "\\t", 0x0D: "\\r", 0x5C: "\\\\", 0x22: '\\"'}


class _Scanner:
    def __init__(self, text: str, line: int):
        self.text = text
        self.pos = 0
        self.line = line

    def error(self, msg: str):
        raise GrammarSyntaxError(msg, self.line, self.pos + 1)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def eof(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def expect(self, tok: str):
        self.skip_ws()
        if not self.text.startswith(tok, self.pos):
            self.error(f"expected '{tok}'")
        self.pos += len(tok)

    def try_take(self, tok: str) -> bool:
        self.skip_ws()
        if self.text.startswith(tok, self.pos):
            self.pos += len(tok)
            return True
        return False

    def name(self) -> str:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and (
            self.text[self.pos].isalnum() or self.text[self.pos] in "_-"
        ):
            self.pos += 1
        if self.pos == start:
            self.error("expected rule name")
        return self.text[start : self.pos]

    def number(self) -> int:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if self.pos == start:
            self.error("expected number")
        return int(self.text[start : self.pos])

    def quoted_bytes(self) -> bytes:
        self.skip_ws()
        if self.peek() != '"':
            self.error("expected string literal")
        self.pos += 1
        out = bytearray()
        while True:
            if self.pos >= len(self.text):
                self.error("unterminated string literal")
            ch = self.text[self.pos]
            if ch == '"':
                self.pos += 1
                return bytes(out)
            if ch == "\\":
                self.pos += 1
                esc = self.peek()
                if esc == "x":
                    hexpart = self.text[self.pos + 1 : self.pos + 3]
                    if len(hexpart) != 2:
                        self.error("bad \\x escape")
                    try:
                        out.append(int(hexpart, 16))
                    except ValueError:
                        self.error("bad \\x escape")
                    self.pos += 3
                elif esc in _ESCAPES:
                    out.append(_ESCAPES[esc])
                    self.pos += 1
                else:
                    self.error(f"unknown escape '\\{esc}'")
            else:
                out.extend(ch.encode("utf-8"))
                self.pos += 1

    def char_class(self) -> CharClass:
        self.expect("[")
        negated = False
        if self.peek() == "^":
            negated = True
            self.pos += 1
        ranges: list[tuple[int, int]] = []

        def one_byte() -> int:
            if self.pos >= len(self.text):
                self.error("unterminated character class")
            ch = self.text[self.pos]
            if ch == "\\":
                self.pos += 1
                esc = self.peek()
                if esc == "x":
                    hexpart = self.text[self.pos + 1 : self.pos + 3]
                    if len(hexpart) != 2:
                        self.error("bad \\x escape")
                    self.pos += 3
                    return int(hexpart, 16)
                if esc in _ESCAPES:
                    self.pos += 1
                    return _ESCAPES[esc]
                if esc in "]-[^":
                    self.pos += 1
                    return ord(esc)
                self.error(f"unknown escape '\\{esc}'")
            b = ch.encode("utf-8")
            if len(b) != 1:
                self.error("multi-byte character in class; use \\xNN")
            self.pos += 1
            return b[0]

        while True:
            if self.pos >= len(self.text):
                self.error("unterminated character class")
            if self.peek() == "]":
                self.pos += 1
                break
            lo = one_byte()
            hi = lo
            if self.peek() == "-" and not self.text.startswith("-]", self.pos):
                self.pos += 1
                hi = one_byte()
            if hi < lo:
                self.error("inverted range in character class")
            ranges.append((lo, hi))
        if not ranges:
            self.error("empty character class")
        return CharClass(tuple(ranges), negated)


def _parse_expr(sc: _Scanner) -> RuleExpr:
    alts = [_parse_seq(sc)]
    while sc.try_take("|"):
        alts.append(_parse_seq(sc))
    return choice(alts)


def _parse_seq(sc: _Scanner) -> RuleExpr:
    items = []
    while True:
        sc.skip_ws()
        ch = sc.peek()
        if ch == "" or ch in "|);,":
            break
        items.append(_parse_postfix(sc))
    return seq(items) if items else EMPTY


def _parse_postfix(sc: _Scanner) -> RuleExpr:
    atom = _parse_atom(sc)
    while True:
        sc.skip_ws()
        ch = sc.peek()
        if ch == "*":
            sc.pos += 1
            atom = Repetition(atom, 0, None)
        elif ch == "+":
            sc.pos += 1
            atom = Repetition(atom, 1, None)
        elif ch == "?":
            sc.pos += 1
            atom = choice((atom, EMPTY))
        elif ch == "{":
            sc.pos += 1
            lo = sc.number()
            hi: int | None = lo
            if sc.try_take(","):
                sc.skip_ws()
                hi = sc.number() if sc.peek().isdigit() else None
            sc.expect("}")
            if hi is not None and hi < lo:
                sc.error("repetition min exceeds max")
            atom = Repetition(atom, lo, hi)
        else:
            return atom


def _parse_atom(sc: _Scanner) -> RuleExpr:
    sc.skip_ws()
    ch = sc.peek()
    if ch == '"':
        data = sc.quoted_bytes()
        return ByteLiteral(data) if data else EMPTY
    if ch == "[":
        return sc.char_class()
    if ch == "(":
        sc.pos += 1
        inner = _parse_expr(sc)
        sc.expect(")")
        return inner
    if ch.isalpha() or ch == "_":
        return RuleRef(sc.name())
    sc.error("expected expression")


def _parse_tag_dispatch(sc: _Scanner) -> TagDispatchExpr:
    sc.expect("(")
    pairs: list[tuple[bytes, str]] = []
    stops: list[bytes] = []
    while True:
        sc.skip_ws()
        if sc.try_take("("):
            tag = sc.quoted_bytes()
            sc.expect(",")
            rule = sc.name()
            sc.expect(")")
            pairs.append((tag, rule))
            sc.try_take(",")
        elif sc.try_take(";"):
            sc.skip_ws()
            if sc.try_take("stop"):
                sc.expect("=")
                stops.append(sc.quoted_bytes())
                while sc.try_take(","):
                    stops.append(sc.quoted_bytes())
        elif sc.try_take(")"):
            break
        else:
            sc.error("malformed TagDispatch")
    if not pairs:
        sc.error("TagDispatch needs at least one (tag, rule) pair")
    return TagDispatchExpr(tuple(pairs), tuple(stops))


def parse_ebnf(text: str, root: str | None = None) -> Grammar:
    """Parse grammar source text into a validated :class:`Grammar`.

    The root is the rule named ``root`` (or the first rule if absent),
    unless overridden.
    """
    rules: list[tuple[str, RuleExpr]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        sc = _Scanner(line, lineno)
        name = sc.name()
        sc.expect("::=")
        sc.skip_ws()
        if sc.text.startswith("TagDispatch", sc.pos):
            sc.pos += len("TagDispatch")
            body: RuleExpr = _parse_tag_dispatch(sc)
        else:
            body = _parse_expr(sc)
        if not sc.eof():
            sc.error("trailing input after rule body")
        rules.append((name, body))
    if not rules:
        raise GrammarSyntaxError("no rules", 1, 1)
    if root is None:
        root = "root" if any(n == "root" for n, _ in rules) else rules[0][0]
    g = Grammar(rules, root, digest=hashlib.sha256(text.encode()).hexdigest())
    _check_strict(g)
    return g


def _escape_bytes(data: bytes) -> str:
    out = []
    for b in data:
        if b in _UNESCAPES:
            out.append(_UNESCAPES[b])
        elif 0x20 <= b < 0x7F:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def _fmt_class_byte(b: int) -> str:
    if b in _UNESCAPES:
        return _UNESCAPES[b]
    if chr(b) in "]-^[":
        return "\\" + chr(b)
    if 0x20 <= b < 0x7F:
        return chr(b)
    return f"\\x{b:02x}"


def expr_to_text(e: RuleExpr, parent_prec: int = 0) -> str:
    """Render an expression in the concrete syntax (inverse of the parser)."""
    if isinstance(e, Empty):
        return '""'
    if isinstance(e, ByteLiteral):
        return f'"{_escape_bytes(e.data)}"'
    if isinstance(e, CharClass):
        parts = [
            _fmt_class_byte(lo) if lo == hi else f"{_fmt_class_byte(lo)}-{_fmt_class_byte(hi)}"
            for lo, hi in e.ranges
        ]
        return "[" + ("^" if e.negated else "") + "".join(parts) + "]"
    if isinstance(e, RuleRef):
        return e.name
    if isinstance(e, Repetition):
        body = expr_to_text(e.body, 3)
        if e.tail:
            hi = "" if e.max is None else e.max
            return f"{body}{{{e.min},{hi}}}"
        if e.min == 0 and e.max is None:
            return body + "*"
        if e.min == 1 and e.max is None:
            return body + "+"
        if e.max is None:
            return f"{body}{{{e.min},}}"
        if e.min == e.max:
            return f"{body}{{{e.min}}}"
        return f"{body}{{{e.min},{e.max}}}"
    if isinstance(e, Sequence):
        text = " ".join(expr_to_text(i, 2) for i in e.items)
        return f"({text})" if parent_prec >= 3 else text
    if isinstance(e, Choice):
        text = " | ".join(expr_to_text(i, 1) for i in e.items)
        return f"({text})" if parent_prec >= 2 else text
    if isinstance(e, TagDispatchExpr):
        pairs = ", ".join(f'("{_escape_bytes(t)}", {r})' for t, r in e.pairs)
        stops = ", ".join(f'"{_escape_bytes(s)}"' for s in e.stop_strs)
        return f"TagDispatch({pairs}; stop={stops})" if stops else f"TagDispatch({pairs})"
    raise TypeError(f"unknown expression {e!r}")


def to_text(g: Grammar) -> str:
    return "\n".join(f"{name} ::= {expr_to_text(body)}" for name, body in g.rules) + "\n"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _walk(e: RuleExpr):
    yield e
    if isinstance(e, (Sequence, Choice)):
        for it in e.items:
            yield from _walk(it)
    elif isinstance(e, Repetition):
        yield from _walk(e.body)


def expr_nullable(e: RuleExpr, nullable: dict[str, bool]) -> bool:
    if isinstance(e, Empty):
        return True
    if isinstance(e, ByteLiteral):
        return not e.data
    if isinstance(e, CharClass):
        return False
    if isinstance(e, Sequence):
        return all(expr_nullable(i, nullable) for i in e.items)
    if isinstance(e, Choice):
        return any(expr_nullable(i, nullable) for i in e.items)
    if isinstance(e, RuleRef):
        return nullable[e.name]
    if isinstance(e, Repetition):
        return e.min == 0 or expr_nullable(e.body, nullable)
    if isinstance(e, TagDispatchExpr):
        return not e.stop_strs
    raise TypeError(e)


def nullable_map(g: Grammar) -> dict[str, bool]:
    """Least fixpoint of 'this rule can derive the empty string'."""
    nullable = {name: False for name, _ in g.rules}
    changed = True
    while changed:
        changed = False
        for name, body in g.rules:
            if not nullable[name] and expr_nullable(body, nullable):
                nullable[name] = True
                changed = True
    return nullable


def _productive_map(g: Grammar) -> dict[str, bool]:
    productive = {name: False for name, _ in g.rules}

    def expr_prod(e: RuleExpr) -> bool:
        if isinstance(e, (Empty, ByteLiteral, CharClass, TagDispatchExpr)):
            return True
        if isinstance(e, Sequence):
            return all(expr_prod(i) for i in e.items)
        if isinstance(e, Choice):
            return any(expr_prod(i) for i in e.items)
        if isinstance(e, RuleRef):
            return productive[e.name]
        if isinstance(e, Repetition):
            return e.min == 0 or expr_prod(e.body)
        raise TypeError(e)

    changed = True
    while changed:
        changed = False
        for name, body in g.rules:
            if not productive[name] and expr_prod(body):
                productive[name] = True
                changed = True
    return productive


def _check_strict(g: Grammar):
    """Raise on reference/nullability errors (used by parse_ebnf)."""
    defined = set(g._index)
    for name, body in g.rules:
        for e in _walk(body):
            if isinstance(e, RuleRef) and e.name not in defined:
                raise UnknownRuleError(e.name)
            if isinstance(e, TagDispatchExpr):
                for _, sub in e.pairs:
                    if sub not in defined:
                        raise UnknownRuleError(sub)
    nullable = nullable_map(g)
    for name, body in g.rules:
        for e in _walk(body):
            if isinstance(e, Repetition) and expr_nullable(e.body, nullable):
                raise NullableRepetitionBodyError(name)


def validate(g: Grammar) -> list[Diagnostic]:
    """Collect diagnostics; an empty list means all invariants hold."""
    out: list[Diagnostic] = []
    defined = set(g._index)
    for name, body in g.rules:
        for e in _walk(body):
            if isinstance(e, RuleRef) and e.name not in defined:
                out.append(Diagnostic(name, "unknown-rule", f"undefined rule '{e.name}'"))
            if isinstance(e, Repetition) and e.max is not None and e.min > e.max:
                out.append(Diagnostic(name, "bad-bounds", "repetition min exceeds max"))
            if isinstance(e, TagDispatchExpr) and (name != g.root or e is not body):
                out.append(
                    Diagnostic(name, "misplaced-dispatch", "TagDispatch must be the root body")
                )
    if out:
        return out

    nullable = nullable_map(g)
    for name, body in g.rules:
        for e in _walk(body):
            if isinstance(e, Repetition) and expr_nullable(e.body, nullable):
                out.append(
                    Diagnostic(name, "nullable-repetition", "repetition body matches empty string")
                )
    productive = _productive_map(g)
    for name, _ in g.rules:
        if not productive[name]:
            out.append(Diagnostic(name, "unproductive", "rule derives no finite string"))
    return out


# ---------------------------------------------------------------------------
# Repetition state compression
# ---------------------------------------------------------------------------

DEFAULT_REP_THRESHOLD = 8

_INLINE_BODY_LIMIT = 4


def _expand(body: RuleExpr, lo: int, hi: int) -> RuleExpr:
    """Explicit expansion of body{lo,hi}: lo copies then nested optionals.

    Shares the copy chain across counts, so it contributes exactly ``hi``
    body copies rather than one chain per count.
    """
    if hi == 0:
        return EMPTY
    opt: RuleExpr | None = None
    for _ in range(hi - lo):
        opt = choice((seq((body, opt)) if opt is not None else body, EMPTY))
    parts: list[RuleExpr] = [body] * lo
    if opt is not None:
        parts.append(opt)
    return seq(parts)


class _Compressor:
    def __init__(self, g: Grammar, t: int):
        self.g = g
        self.t = t
        self.nullable = nullable_map(g)
        self.new_rules: list[tuple[str, RuleExpr]] = []
        self.taken = set(g._index)
        self.counter = 0

    def fresh(self, stem: str) -> str:
        while True:
            name = f"{stem}{self.counter}"
            self.counter += 1
            if name not in self.taken:
                self.taken.add(name)
                return name

    def hoist(self, body: RuleExpr) -> RuleExpr:
        """A referenceable copy of the body for the explicit prefix chain."""
        if isinstance(body, RuleRef):
            return body
        if isinstance(body, CharClass):
            return body
        if isinstance(body, ByteLiteral) and len(body.data) <= _INLINE_BODY_LIMIT:
            return body
        name = self.fresh("__body")
        self.new_rules.append((name, body))
        return RuleRef(name)

    def rewrite(self, e: RuleExpr, owner: str) -> RuleExpr:
        if isinstance(e, Sequence):
            return seq(tuple(self.rewrite(i, owner) for i in e.items))
        if isinstance(e, Choice):
            return choice(tuple(self.rewrite(i, owner) for i in e.items))
        if not isinstance(e, Repetition) or e.tail:
            return e
        if expr_nullable(e.body, self.nullable):
            raise NullableRepetitionBodyError(owner)
        body = self.rewrite(e.body, owner)
        lo, hi, t = e.min, e.max, self.t
        if hi is not None and hi <= t:
            return _expand(body, lo, hi)
        ref = self.hoist(body)
        tail_name = self.fresh("__rep")
        if lo >= t:
            tail_hi = None if hi is None else hi - t
            self.new_rules.append((tail_name, Repetition(body, lo - t, tail_hi, tail=True)))
            return seq([ref] * t + [RuleRef(tail_name)])
        tail_hi = None if hi is None else hi - t
        self.new_rules.append((tail_name, Repetition(body, 0, tail_hi, tail=True)))
        # Counts lo..t-1 exit early through the nested optionals; counts
        # >= t flow through the full chain into the counted tail.
        expr: RuleExpr = RuleRef(tail_name)
        for _ in range(t - lo):
            expr = choice((seq((ref, expr)), EMPTY))
        return seq([ref] * lo + [expr])


def compress_repetitions(g: Grammar, t: int = DEFAULT_REP_THRESHOLD) -> Grammar:
    """Rewrite repetitions so at most ``2t`` explicit body copies remain each.

    Bounded repetitions with max <= t are fully expanded. Larger ones become
    t explicit leading copies followed by a counted tail rule whose repeat
    count is tracked by the parser at runtime. The recognized language is
    unchanged; the pass is idempotent.
    """
    if t < 1:
        raise ValueError("threshold must be >= 1")
    comp = _Compressor(g, t)
    rules = [(name, comp.rewrite(body, name)) for name, body in g.rules]
    rules.extend(comp.new_rules)
    if rules == g.rules:
        return g
    return Grammar(rules, g.root, digest=g.digest)


def rep_bounds(g: Grammar) -> dict[str, tuple[int, int | None]]:
    """Map of tail-rule name -> (min, max) repeat bounds."""
    out = {}
    for name, body in g.rules:
        if isinstance(body, Repetition) and body.tail:
            out[name] = (body.min, body.max)
    return out
