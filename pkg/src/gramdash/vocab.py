"""Token vocabulary tables and allow-bitmaps.

Tokens are raw byte strings (byte-level BPE pieces need not be valid
UTF-8) indexed densely from 0, with one distinguished EOS id whose byte
string is empty. Masks serialize as hex with little-endian bit order:
token id i lives at bit ``i % 8`` of byte ``i // 8``.
"""

from __future__ import annotations

import base64
import json
import random
from dataclasses import dataclass, field


class VocabError(Exception):
    pass


class DuplicateIdError(VocabError):
    pass


class MissingEosError(VocabError):
    pass


class MalformedLineError(VocabError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class IndexOutOfRangeError(VocabError):
    pass


@dataclass
class Vocabulary:
    tokens: list[bytes]
    eos_id: int
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (0 <= self.eos_id < len(self.tokens)):
            raise MissingEosError("eos id out of range")
        if self.tokens[self.eos_id] != b"":
            raise VocabError("EOS token must have an empty byte string")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def packed(self):
        """Flat (bytes, offsets) view shared by the classification kernels."""
        if self._packed is None:
            offsets = [0]
            buf = bytearray()
            for t in self.tokens:
                buf.extend(t)
                offsets.append(len(buf))
            import array

            self._packed = (bytes(buf), array.array("i", offsets))
        return self._packed


_ESCAPES = {0x09: "\\t", 0x0A: "\\n", 0x0D: "\\r", 0x5C: "\\\\"}


def _escape(data: bytes) -> str:
    out = []
    for b in data:
        if b in _ESCAPES:
            out.append(_ESCAPES[b])
        elif 0x20 <= b < 0x7F:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def _unescape(text: str, lineno: int) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            esc = text[i + 1 : i + 2]
            if esc == "x":
                try:
                    out.append(int(text[i + 2 : i + 4], 16))
                except ValueError:
                    raise MalformedLineError(lineno, "bad \\x escape") from None
                i += 4
            elif esc == "t":
                out.append(0x09)
                i += 2
            elif esc == "n":
                out.append(0x0A)
                i += 2
            elif esc == "r":
                out.append(0x0D)
                i += 2
            elif esc == "\\":
                out.append(0x5C)
                i += 2
            else:
                raise MalformedLineError(lineno, f"bad escape '\\{esc}'")
        else:
            out.extend(ch.encode("utf-8"))
            i += 1
    return bytes(out)


def load_vocab(path, fmt: str = "jsonl") -> Vocabulary:
    """Load a vocabulary file.

    jsonl lines look like ``{"id": 3, "bytes_b64": "YWJj", "eos": false}``;
    tsv lines are ``id<TAB>escaped-bytes<TAB>flags`` with flags ``eos`` or
    ``-``.
    """
    if fmt not in ("jsonl", "tsv"):
        raise VocabError(f"unknown vocab format '{fmt}'")
    entries: dict[int, bytes] = {}
    eos_ids = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            if fmt == "jsonl":
                try:
                    obj = json.loads(line)
                    tid = int(obj["id"])
                    data = base64.b64decode(obj["bytes_b64"])
                    is_eos = bool(obj.get("eos", False))
                except (KeyError, ValueError, TypeError) as exc:
                    raise MalformedLineError(lineno, str(exc)) from None
            else:
                parts = line.split("\t")
                if len(parts) != 3:
                    raise MalformedLineError(lineno, "expected 3 tab-separated fields")
                try:
                    tid = int(parts[0])
                except ValueError:
                    raise MalformedLineError(lineno, "bad token id") from None
                data = _unescape(parts[1], lineno)
                is_eos = "eos" in parts[2].split(",")
            if tid in entries:
                raise DuplicateIdError(f"token id {tid} appears twice")
            entries[tid] = data
            if is_eos:
                eos_ids.append(tid)
    if len(eos_ids) != 1:
        raise MissingEosError(f"expected exactly one EOS token, found {len(eos_ids)}")
    if sorted(entries) != list(range(len(entries))):
        raise VocabError("token ids must be dense from 0")
    tokens = [entries[i] for i in range(len(entries))]
    if tokens[eos_ids[0]] != b"":
        raise VocabError("EOS token must have an empty byte string")
    return Vocabulary(tokens, eos_ids[0])


def save_vocab(vocab: Vocabulary, path, fmt: str = "jsonl"):
    with open(path, "w", encoding="utf-8") as fh:
        for tid, data in enumerate(vocab.tokens):
            if fmt == "jsonl":
                fh.write(
                    json.dumps(
                        {
                            "id": tid,
                            "bytes_b64": base64.b64encode(data).decode(),
                            "eos": tid == vocab.eos_id,
                        }
                    )
                    + "\n"
                )
            else:
                flags = "eos" if tid == vocab.eos_id else "-"
                fh.write(f"{tid}\t{_escape(data)}\t{flags}\n")


_WORDS = (
    "the of and to in is you that it he was for on are as with his they at be this "
    "have from or one had by word but not what all were we when your can said there "
    "use an each which she do how their if will up other about out many then them "
    "these so some her would make like him into time has look two more write go see "
    "number no way could people my than first water been call who oil its now find"
).split()

_JSON_BITS = [
    "{",
    "}",
    "[",
    "]",
    ":",
    ",",
    '"',
    '{"',
    '"}',
    '":',
    '":"',
    '",',
    '","',
    "\":",
    "true",
    "false",
    "null",
    "0",
    "1",
    "2",
    "12",
    "42",
    "3.14",
    "-1",
    "10",
    "100",
    '"}',
    "},",
    "]}",
    '"]',
]


def synthetic_vocab(size: int = 500, seed: int = 0) -> Vocabulary:
    """Deterministic mixed vocabulary: all printable ASCII single bytes,
    common words and JSON fragments, plus some raw multi-byte chunks.

    Real tokenizer tables are out of scope; this generator covers the same
    byte-level shapes (including invalid UTF-8) for testing and benchmarks.
    """
    if size < 100:
        raise VocabError("synthetic vocabulary needs size >= 100")
    rng = random.Random(seed)
    tokens: list[bytes] = [b""]  # id 0 is EOS
    seen = {b""}

    def add(tok: bytes) -> bool:
        if tok and tok not in seen and len(tokens) < size:
            seen.add(tok)
            tokens.append(tok)
            return True
        return False

    for b in range(0x20, 0x7F):
        add(bytes([b]))
    for frag in _JSON_BITS:
        add(frag.encode())
    for w in _WORDS:
        if len(tokens) >= size:
            break
        add(w.encode())
        add((" " + w).encode())
    while len(tokens) < size:
        kind = rng.randrange(6)
        if kind == 0:
            add(str(rng.randrange(10000)).encode())
        elif kind == 1:
            w = rng.choice(_WORDS)
            add((w + rng.choice([",", ".", '"', ":", " "])).encode())
        elif kind == 2:
            add(bytes(rng.randrange(0x80, 0x100) for _ in range(rng.randrange(1, 4))))
        elif kind == 3:
            add(rng.choice(_WORDS).capitalize().encode())
        elif kind == 4:
            add(('"' + rng.choice(_WORDS)).encode())
        else:
            add((rng.choice(_WORDS) + rng.choice(_WORDS)).encode())
    return Vocabulary(tokens, 0)


class TokenMask:
    """Fixed-size allow-bitmap over token ids (1 = allowed)."""

    __slots__ = ("size", "_bits", "_count")

    def __init__(self, size: int, default: bool = False):
        self.size = size
        self._bits = (1 << size) - 1 if default else 0
        self._count = size if default else 0

    @classmethod
    def from_ids(cls, size: int, ids) -> "TokenMask":
        m = cls(size)
        bits = 0
        for i in ids:
            if not 0 <= i < size:
                raise IndexOutOfRangeError(f"token id {i} out of range")
            bits |= 1 << i
        m._bits = bits
        m._count = bin(bits).count("1")
        return m

    def set(self, i: int):
        if not 0 <= i < self.size:
            raise IndexOutOfRangeError(f"token id {i} out of range")
        if not (self._bits >> i) & 1:
            self._bits |= 1 << i
            self._count += 1

    def clear(self, i: int):
        if not 0 <= i < self.size:
            raise IndexOutOfRangeError(f"token id {i} out of range")
        if (self._bits >> i) & 1:
            self._bits &= ~(1 << i)
            self._count -= 1

    def test(self, i: int) -> bool:
        if not 0 <= i < self.size:
            raise IndexOutOfRangeError(f"token id {i} out of range")
        return bool((self._bits >> i) & 1)

    def count(self) -> int:
        return self._count

    def ids(self) -> list[int]:
        return [i for i in range(self.size) if (self._bits >> i) & 1]

    def serialize(self) -> str:
        nbytes = (self.size + 7) // 8
        return self._bits.to_bytes(nbytes, "little").hex()

    @classmethod
    def deserialize(cls, hexstr: str, size: int) -> "TokenMask":
        m = cls(size)
        bits = int.from_bytes(bytes.fromhex(hexstr), "little")
        if bits >> size:
            raise VocabError("serialized mask wider than vocabulary")
        m._bits = bits
        m._count = bin(bits).count("1")
        return m

    def __eq__(self, other):
        return (
            isinstance(other, TokenMask) and self.size == other.size and self._bits == other._bits
        )

    def __hash__(self):
        return hash((self.size, self._bits))

    def __repr__(self):
        return f"TokenMask(size={self.size}, allowed={self._count})"
