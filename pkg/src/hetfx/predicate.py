"""Row predicates for subsample definitions.

Grammar (lowest to highest precedence)::

    expr  := and ('||' and)*
    and   := unary ('&&' unary)*
    unary := '!' unary | cmp
    cmp   := atom (('=='|'!='|'<'|'<='|'>'|'>=') atom)?
    atom  := NUMBER | NAME | 'true' | 'false' | '(' expr ')'

Names resolve to columns through a lookup callable, so the same predicate
works on an AnalysisFrame or a plain mapping of arrays.
"""

from __future__ import annotations

import operator
import re
from typing import Callable

import numpy as np

from .errors import ConfigError

_TOKEN = re.compile(
    r"\s*(?:(?P<num>-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)"
    r"|(?P<op>&&|\|\||==|!=|<=|>=|<|>|!|\(|\))"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_.]*))"
)
_CMP = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


def tokenize(text: str) -> list[tuple[str, str]]:
    pos = 0
    out = []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ConfigError(f"cannot parse predicate {text!r} at offset {pos}")
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, tokens, lookup, n):
        self.tokens = tokens
        self.i = 0
        self.lookup = lookup
        self.n = n

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self, value=None):
        tok = self.peek()
        if tok[0] is None or (value is not None and tok[1] != value):
            raise ConfigError(f"expected {value or 'token'}, found {tok[1]!r}")
        self.i += 1
        return tok

    def parse(self):
        val = self.expr()
        if self.i != len(self.tokens):
            raise ConfigError(f"unexpected token {self.peek()[1]!r}")
        return self.boolean(val)

    def boolean(self, val):
        arr = np.asarray(val)
        if arr.dtype != bool:
            raise ConfigError("predicate must evaluate to a boolean")
        return np.broadcast_to(arr, (self.n,)).copy()

    def expr(self):
        val = self.conj()
        while self.peek()[1] == "||":
            self.take()
            val = self.boolean(val) | self.boolean(self.conj())
        return val

    def conj(self):
        val = self.unary()
        while self.peek()[1] == "&&":
            self.take()
            val = self.boolean(val) & self.boolean(self.unary())
        return val

    def unary(self):
        if self.peek()[1] == "!":
            self.take()
            return ~self.boolean(self.unary())
        return self.cmp()

    def cmp(self):
        lhs = self.atom()
        op = self.peek()[1]
        if op in _CMP:
            self.take()
            rhs = self.atom()
            return _CMP[op](np.asarray(lhs), np.asarray(rhs))
        return lhs

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return float(val)
        if kind == "name":
            if val == "true":
                return np.bool_(True)
            if val == "false":
                return np.bool_(False)
            return self.lookup(val)
        if val == "(":
            inner = self.expr()
            self.take(")")
            return inner
        raise ConfigError(f"unexpected token {val!r}")


def evaluate(text: str, lookup: Callable[[str], np.ndarray], n: int) -> np.ndarray:
    """Evaluate ``text`` to a boolean mask of length ``n``."""
    return _Parser(tokenize(text), lookup, n).parse()


def column_names(text: str) -> set[str]:
    return {v for k, v in tokenize(text) if k == "name" and v not in ("true", "false")}
