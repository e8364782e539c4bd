"""Line-oriented ``key = value`` format with ``[dotted.section]`` headers.

Values are double-quoted strings, numbers, ``true``/``false`` or one-line
lists of those. ``#`` starts a comment outside strings. Every value keeps
the line and column it came from so that later validation can point at it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import ScenarioError

_KEY = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")


@dataclass
class Value:
    value: object
    line: int
    column: int


@dataclass
class Section:
    """A table of values and sub-sections; ``line`` is where its header was."""

    name: str
    line: int = 0
    values: dict[str, Value] = field(default_factory=dict)
    children: dict[str, "Section"] = field(default_factory=dict)

    def child(self, key: str) -> "Section | None":
        return self.children.get(key)


class _Line:
    def __init__(self, text: str, lineno: int):
        self.text = text
        self.lineno = lineno
        self.pos = 0

    def error(self, msg: str, pos: int | None = None) -> ScenarioError:
        return ScenarioError(msg, self.lineno, (self.pos if pos is None else pos) + 1)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text) or self.text[self.pos] == "#"

    def scalar(self) -> Value:
        self.skip_ws()
        start = self.pos
        t = self.text
        if start >= len(t):
            raise self.error("missing value")
        if t[start] == '"':
            out = []
            i = start + 1
            while i < len(t):
                ch = t[i]
                if ch == "\\":
                    if i + 1 >= len(t) or t[i + 1] not in '"\\':
                        raise self.error("invalid escape in string", i)
                    out.append(t[i + 1])
                    i += 2
                    continue
                if ch == '"':
                    self.pos = i + 1
                    return Value("".join(out), self.lineno, start + 1)
                out.append(ch)
                i += 1
            raise self.error("unterminated string", start)
        m = _NUMBER.match(t, start)
        if m:
            self.pos = m.end()
            text = m.group(0)
            is_int = re.fullmatch(r"[-+]?\d+", text) is not None
            return Value(int(text) if is_int else float(text), self.lineno, start + 1)
        for word, val in (("true", True), ("false", False)):
            if t.startswith(word, start) and not t[start + len(word):start + len(word) + 1].isalnum():
                self.pos = start + len(word)
                return Value(val, self.lineno, start + 1)
        raise self.error("expected a string, number, boolean or list")

    def value(self) -> Value:
        self.skip_ws()
        if self.pos < len(self.text) and self.text[self.pos] == "[":
            start = self.pos
            self.pos += 1
            items = []
            self.skip_ws()
            if self.pos < len(self.text) and self.text[self.pos] == "]":
                self.pos += 1
                return Value([], self.lineno, start + 1)
            while True:
                items.append(self.scalar().value)
                self.skip_ws()
                if self.pos >= len(self.text):
                    raise self.error("unterminated list", start)
                ch = self.text[self.pos]
                self.pos += 1
                if ch == "]":
                    return Value(items, self.lineno, start + 1)
                if ch != ",":
                    raise self.error("expected ',' or ']' in list", self.pos - 1)
        return self.scalar()


def parse_config(text: str) -> Section:
    """Parse the whole document into a tree of :class:`Section`."""
    root = Section("", 1)
    current = root
    declared = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _Line(raw, lineno)
        if line.at_end():
            continue
        if raw[line.pos] == "[":
            close = raw.find("]", line.pos)
            if close < 0:
                raise line.error("unterminated section header")
            name = raw[line.pos + 1:close].strip()
            parts = name.split(".")
            if not name or not all(_KEY.fullmatch(p) for p in parts):
                raise line.error(f"invalid section name {name!r}", line.pos + 1)
            line.pos = close + 1
            if not line.at_end():
                raise line.error("unexpected text after section header")
            node = root
            for depth, part in enumerate(parts):
                if part in node.values:
                    raise line.error(f"section {'.'.join(parts[:depth + 1])!r} clashes with a key")
                nxt = node.children.get(part)
                if nxt is None:
                    nxt = Section(".".join(parts[:depth + 1]), lineno)
                    node.children[part] = nxt
                node = nxt
            if name in declared:
                raise line.error(f"duplicate section [{name}]")
            declared.add(name)
            current = node
            continue
        m = _KEY.match(raw, line.pos)
        if m is None:
            raise line.error("expected a key or [section]")
        key = m.group(0)
        key_col = line.pos
        line.pos = m.end()
        line.skip_ws()
        if line.pos >= len(raw) or raw[line.pos] != "=":
            raise line.error(f"expected '=' after key {key!r}")
        line.pos += 1
        val = line.value()
        if not line.at_end():
            raise line.error("unexpected text after value")
        if key in current.values or key in current.children:
            raise ScenarioError(f"duplicate key {key!r}", lineno, key_col + 1)
        current.values[key] = val
    return root


def format_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise TypeError(f"cannot format {v!r}")


def format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(format_scalar(x) for x in v) + "]"
    return format_scalar(v)
