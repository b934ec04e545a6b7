"""Tiny arithmetic expression grammar for frame files and CLI data.

Supports +, -, *, integer powers via ^, sin, cos, abs, parentheses,
float literals and coordinate names (x1..xn, t, theta as an alias for
the angular coordinate). Parsed expressions evaluate vectorized over
numpy arrays of points. Deliberately not a general evaluator: no
division, no attribute access, no names beyond the whitelist.
"""

import re

import numpy as np

from .errors import ConfigError

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\^|\*\*|[-+*()]))"
)

_FUNCS = {"sin": np.sin, "cos": np.cos, "abs": np.abs}


def _tokenize(text):
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ConfigError(f"bad token at column {pos} in expression {text!r}")
        if m.lastgroup == "num":
            out.append(("num", float(m.group("num"))))
        elif m.lastgroup == "name":
            out.append(("name", m.group("name")))
        else:
            op = m.group("op")
            out.append(("op", "^" if op == "**" else op))
        pos = m.end()
    out.append(("end", None))
    return out


class Expr:
    """Compiled expression; call with a (N, n) point array and optional t."""

    def __init__(self, text, ambient_dim, with_time=False):
        self.text = text
        self.ambient_dim = ambient_dim
        self.with_time = with_time
        self._tokens = _tokenize(text)
        self._pos = 0
        self._ast = self._sum()
        if self._peek() != ("end", None):
            raise ConfigError(f"trailing input in expression {text!r}")

    def _peek(self):
        return self._tokens[self._pos]

    def _next(self):
        tok = self._tokens[self._pos]
        self._pos += 1
        return tok

    def _sum(self):
        node = self._term()
        while self._peek() == ("op", "+") or self._peek() == ("op", "-"):
            op = self._next()[1]
            rhs = self._term()
            node = ("add" if op == "+" else "sub", node, rhs)
        return node

    def _term(self):
        node = self._factor()
        while self._peek() == ("op", "*"):
            self._next()
            node = ("mul", node, self._factor())
        return node

    def _factor(self):
        kind, val = self._peek()
        if (kind, val) == ("op", "-"):
            self._next()
            return ("neg", self._factor())
        if (kind, val) == ("op", "+"):
            self._next()
            return self._factor()
        return self._power()

    def _power(self):
        base = self._atom()
        if self._peek() == ("op", "^"):
            self._next()
            kind, val = self._next()
            neg = False
            if (kind, val) == ("op", "-"):
                neg = True
                kind, val = self._next()
            if kind != "num" or float(val) != int(val):
                raise ConfigError(f"only integer powers allowed in {self.text!r}")
            return ("pow", base, -int(val) if neg else int(val))
        return base

    def _atom(self):
        kind, val = self._next()
        if kind == "num":
            return ("const", val)
        if kind == "name":
            if val in _FUNCS:
                if self._next() != ("op", "("):
                    raise ConfigError(f"{val} needs parentheses in {self.text!r}")
                arg = self._sum()
                if self._next() != ("op", ")"):
                    raise ConfigError(f"unbalanced parentheses in {self.text!r}")
                return ("call", val, arg)
            return ("var", self._var_index(val))
        if (kind, val) == ("op", "("):
            node = self._sum()
            if self._next() != ("op", ")"):
                raise ConfigError(f"unbalanced parentheses in {self.text!r}")
            return node
        raise ConfigError(f"unexpected token in expression {self.text!r}")

    def _var_index(self, name):
        if name == "t":
            if not self.with_time:
                raise ConfigError(f"t not allowed in expression {self.text!r}")
            return -1
        if name == "theta":
            return self.ambient_dim - 1
        m = re.fullmatch(r"x(\d+)", name)
        if not m:
            raise ConfigError(f"unknown name {name!r} in expression {self.text!r}")
        idx = int(m.group(1)) - 1
        if not 0 <= idx < self.ambient_dim:
            raise ConfigError(f"coordinate {name} out of range in {self.text!r}")
        return idx

    def __call__(self, points, t=0.0):
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        out = self._eval(self._ast, pts, t)
        out = np.broadcast_to(np.asarray(out, dtype=float), (pts.shape[0],)).copy()
        return out[0] if single else out

    def _eval(self, node, pts, t):
        op = node[0]
        if op == "const":
            return node[1]
        if op == "var":
            return t if node[1] == -1 else pts[:, node[1]]
        if op == "neg":
            return -self._eval(node[1], pts, t)
        if op == "add":
            return self._eval(node[1], pts, t) + self._eval(node[2], pts, t)
        if op == "sub":
            return self._eval(node[1], pts, t) - self._eval(node[2], pts, t)
        if op == "mul":
            return self._eval(node[1], pts, t) * self._eval(node[2], pts, t)
        if op == "pow":
            return self._eval(node[1], pts, t) ** node[2]
        if op == "call":
            return _FUNCS[node[1]](self._eval(node[2], pts, t))
        raise AssertionError(op)


def parse_expr(text, ambient_dim, with_time=False):
    return Expr(text, ambient_dim, with_time=with_time)
