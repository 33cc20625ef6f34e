"""Tiny arithmetic expression language for metric and potential fields.

Grammar (recursive descent, one token lookahead):

    expr   := term (("+" | "-") term)*
    term   := signed (("*" | "/") signed)*
    signed := ("+" | "-") signed | power
    power  := atom ("^" signed)?
    atom   := NUMBER | "pi" | "x1" | "x2" | "x3"
            | ("sin" | "cos" | "exp") "(" expr ")" | "(" expr ")"

"^" is right associative and binds tighter than unary minus, so
-x1^2 is -(x1^2) while x1^-2 parses as a signed exponent.  Parsed
expressions evaluate on numpy arrays with ordinary broadcasting;
errors carry the zero-based character position of the offending token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VARIABLES = ("x1", "x2", "x3")
FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
CONSTANTS = {"pi": np.pi}


class ExpressionError(ValueError):
    """Parse failure with the character position of the offense."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


def _tokenize(text: str):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "+-*/^()":
            tokens.append((c, c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            try:
                value = float(text[i:j])
            except ValueError:
                raise ExpressionError(f"bad number {text[i:j]!r}", i) \
                    from None
            tokens.append(("number", value, i))
            i = j
            continue
        if c.isalpha():
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
            continue
        raise ExpressionError(f"unexpected character {c!r}", i)
    tokens.append(("end", None, n))
    return tokens


@dataclass(frozen=True)
class Expression:
    """A parsed expression; call with arrays (or scalars) per variable."""

    text: str
    variables: frozenset
    _root: object

    def __call__(self, x1=None, x2=None, x3=None):
        env = {"x1": x1, "x2": x2, "x3": x3}
        for name in sorted(self.variables):
            if env[name] is None:
                raise ValueError(f"expression {self.text!r} needs {name}")
        return _eval(self._root, env)


def _eval(node, env):
    kind = node[0]
    if kind == "const":
        return node[1]
    if kind == "var":
        return np.asarray(env[node[1]], dtype=float)
    if kind == "call":
        return FUNCTIONS[node[1]](_eval(node[2], env))
    if kind == "neg":
        return -_eval(node[1], env)
    a, b = _eval(node[1], env), _eval(node[2], env)
    if kind == "+":
        return a + b
    if kind == "-":
        return a - b
    if kind == "*":
        return a * b
    if kind == "/":
        return a / b
    return np.power(a, b)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.used = set()

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str):
        tok = self.take()
        if tok[0] != kind:
            raise ExpressionError(
                f"expected {kind!r}, found {tok[1]!r}" if tok[0] != "end"
                else f"expected {kind!r}, found end of input", tok[2])
        return tok

    def expr(self):
        node = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.take()[0]
            node = (op, node, self.term())
        return node

    def term(self):
        node = self.signed()
        while self.peek()[0] in ("*", "/"):
            op = self.take()[0]
            node = (op, node, self.signed())
        return node

    def signed(self):
        if self.peek()[0] in ("+", "-"):
            op = self.take()[0]
            inner = self.signed()
            return inner if op == "+" else ("neg", inner)
        return self.power()

    def power(self):
        node = self.atom()
        if self.peek()[0] == "^":
            self.take()
            node = ("^", node, self.signed())
        return node

    def atom(self):
        tok = self.take()
        kind, value, pos = tok
        if kind == "number":
            return ("const", value)
        if kind == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if value in CONSTANTS:
                return ("const", CONSTANTS[value])
            if value in VARIABLES:
                self.used.add(value)
                return ("var", value)
            if value in FUNCTIONS:
                self.expect("(")
                node = self.expr()
                self.expect(")")
                return ("call", value, node)
            raise ExpressionError(f"unknown name {value!r}", pos)
        if kind == "end":
            raise ExpressionError("unexpected end of input", pos)
        raise ExpressionError(f"unexpected {value!r}", pos)


def parse_expression(text: str) -> Expression:
    parser = _Parser(text)
    root = parser.expr()
    trailing = parser.peek()
    if trailing[0] != "end":
        raise ExpressionError(f"trailing input {trailing[1]!r}", trailing[2])
    return Expression(text, frozenset(parser.used), root)
