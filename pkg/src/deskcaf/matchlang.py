"""Requirements expression language for slot matchmaking.

A small, integer-exact expression language evaluated against slot ads:
literals (integers, double-quoted strings, ``true``/``false``), attribute
references, unary ``!``, and binary operators with precedence (tightest
first) ``!``; ``* /``; ``+ -``; ``== != < <= > >=``; ``&&``; ``||``.
Division truncates toward zero. ``&&``/``||`` short-circuit. Comparing
mismatched value kinds or referencing a missing attribute is an error,
never ``false``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from .model import DeskcafError


class ParseError(DeskcafError):
    def __init__(self, line: int, column: int, expected: str):
        self.line = line
        self.column = column
        self.expected = expected
        super().__init__(f"parse error at line {line}, column {column}: expected {expected}")


class EvalError(DeskcafError):
    pass


class UndefinedAttribute(EvalError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"undefined attribute {name!r}")


class TypeMismatch(EvalError):
    def __init__(self, op: str, lhs_kind: str, rhs_kind: str):
        self.op = op
        self.lhs_kind = lhs_kind
        self.rhs_kind = rhs_kind
        super().__init__(f"operator {op!r} cannot combine {lhs_kind} and {rhs_kind}")


class DivisionByZero(EvalError):
    def __init__(self, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"division by zero at line {line}, column {column}")


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class IntLit:
    value: int


@dataclass(frozen=True)
class StrLit:
    value: str


@dataclass(frozen=True)
class BoolLit:
    value: bool


@dataclass(frozen=True)
class Attr:
    name: str


@dataclass(frozen=True)
class Not:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: "Expr"
    rhs: "Expr"
    # Source position of the operator; only consulted for "/" diagnostics.
    line: int = 0
    column: int = 0

    def __eq__(self, other):
        if not isinstance(other, BinOp):
            return NotImplemented
        return (self.op, self.lhs, self.rhs) == (other.op, other.lhs, other.rhs)

    def __hash__(self):
        return hash((self.op, self.lhs, self.rhs))


Expr = Union[IntLit, StrLit, BoolLit, Attr, Not, BinOp]

_COMPARISONS = {"==", "!=", "<", "<=", ">", ">="}
_ARITHMETIC = {"+", "-", "*", "/"}


# ---------------------------------------------------------------------------
# Tokenizer

_PUNCT = ("&&", "||", "==", "!=", "<=", ">=", "<", ">", "!", "+", "-", "*", "/", "(", ")")


@dataclass(frozen=True)
class _Token:
    kind: str  # int | str | ident | punct | eof
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        start_line, start_col = line, col
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            tokens.append(_Token("int", text[i:j], start_line, start_col))
            col += j - i
            i = j
            continue
        if ch == '"':
            j = i + 1
            while j < n and text[j] != '"':
                if text[j] == "\n":
                    raise ParseError(start_line, start_col, "closing quote")
                j += 1
            if j >= n:
                raise ParseError(start_line, start_col, "closing quote")
            tokens.append(_Token("str", text[i + 1 : j], start_line, start_col))
            col += j + 1 - i
            i = j + 1
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("ident", text[i:j], start_line, start_col))
            col += j - i
            i = j
            continue
        for punct in _PUNCT:
            if text.startswith(punct, i):
                tokens.append(_Token("punct", punct, start_line, start_col))
                col += len(punct)
                i += len(punct)
                break
        else:
            raise ParseError(start_line, start_col, "a token")
    tokens.append(_Token("eof", "", line, col))
    return tokens


# ---------------------------------------------------------------------------
# Parser (recursive descent, one level per precedence tier)


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def take(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_punct(self, text: str) -> _Token:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == text:
            return self.take()
        raise ParseError(tok.line, tok.column, f"'{text}'")

    def parse(self) -> Expr:
        expr = self.or_expr()
        tok = self.peek()
        if tok.kind != "eof":
            raise ParseError(tok.line, tok.column, "end of input")
        return expr

    def _binary_tier(self, ops: tuple, next_tier) -> Expr:
        lhs = next_tier()
        while True:
            tok = self.peek()
            if tok.kind == "punct" and tok.text in ops:
                self.take()
                rhs = next_tier()
                lhs = BinOp(tok.text, lhs, rhs, tok.line, tok.column)
            else:
                return lhs

    def or_expr(self) -> Expr:
        return self._binary_tier(("||",), self.and_expr)

    def and_expr(self) -> Expr:
        return self._binary_tier(("&&",), self.cmp_expr)

    def cmp_expr(self) -> Expr:
        return self._binary_tier(("==", "!=", "<", "<=", ">", ">="), self.add_expr)

    def add_expr(self) -> Expr:
        return self._binary_tier(("+", "-"), self.mul_expr)

    def mul_expr(self) -> Expr:
        return self._binary_tier(("*", "/"), self.unary_expr)

    def unary_expr(self) -> Expr:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == "!":
            self.take()
            return Not(self.unary_expr())
        return self.atom()

    def atom(self) -> Expr:
        tok = self.take()
        if tok.kind == "int":
            return IntLit(int(tok.text))
        if tok.kind == "str":
            return StrLit(tok.text)
        if tok.kind == "ident":
            if tok.text == "true":
                return BoolLit(True)
            if tok.text == "false":
                return BoolLit(False)
            return Attr(tok.text)
        if tok.kind == "punct" and tok.text == "(":
            expr = self.or_expr()
            self.expect_punct(")")
            return expr
        raise ParseError(tok.line, tok.column, "a literal, attribute, '!' or '('")


def parse_requirements(text: str) -> Expr:
    """Parse requirements source text into an AST, or raise ParseError."""
    return _Parser(_tokenize(text)).parse()


# ---------------------------------------------------------------------------
# Evaluator


def _kind(value) -> str:
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    return "string"


def eval_requirements(expr: Expr, ad: dict) -> AttrValueResult:
    """Evaluate an expression against an attribute map.

    Short-circuits && and ||; everything else is strict. Raises
    UndefinedAttribute, TypeMismatch, or DivisionByZero.
    """
    if isinstance(expr, (IntLit, StrLit, BoolLit)):
        return expr.value
    if isinstance(expr, Attr):
        if expr.name not in ad:
            raise UndefinedAttribute(expr.name)
        return ad[expr.name]
    if isinstance(expr, Not):
        val = eval_requirements(expr.operand, ad)
        if _kind(val) != "boolean":
            raise TypeMismatch("!", _kind(val), _kind(val))
        return not val
    if isinstance(expr, BinOp):
        return _eval_binop(expr, ad)
    raise TypeError(f"not an expression node: {expr!r}")


AttrValueResult = Union[int, str, bool]


def _eval_binop(node: BinOp, ad: dict):
    op = node.op
    if op in ("&&", "||"):
        lhs = eval_requirements(node.lhs, ad)
        if _kind(lhs) != "boolean":
            raise TypeMismatch(op, _kind(lhs), "?")
        if op == "&&" and not lhs:
            return False
        if op == "||" and lhs:
            return True
        rhs = eval_requirements(node.rhs, ad)
        if _kind(rhs) != "boolean":
            raise TypeMismatch(op, _kind(lhs), _kind(rhs))
        return rhs

    lhs = eval_requirements(node.lhs, ad)
    rhs = eval_requirements(node.rhs, ad)
    lk, rk = _kind(lhs), _kind(rhs)

    if op in ("==", "!="):
        if lk != rk:
            raise TypeMismatch(op, lk, rk)
        return (lhs == rhs) if op == "==" else (lhs != rhs)

    if op in _COMPARISONS:  # relational: integers only
        if lk != "integer" or rk != "integer":
            raise TypeMismatch(op, lk, rk)
        return {"<": lhs < rhs, "<=": lhs <= rhs, ">": lhs > rhs, ">=": lhs >= rhs}[op]

    if op in _ARITHMETIC:
        if lk != "integer" or rk != "integer":
            raise TypeMismatch(op, lk, rk)
        if op == "+":
            return lhs + rhs
        if op == "-":
            return lhs - rhs
        if op == "*":
            return lhs * rhs
        if rhs == 0:
            raise DivisionByZero(node.line, node.column)
        # truncate toward zero, unlike Python floor division
        q = abs(lhs) // abs(rhs)
        return q if (lhs >= 0) == (rhs >= 0) else -q

    raise TypeError(f"unknown operator {op!r}")


def pretty_print(expr: Expr) -> str:
    """Render an AST as fully parenthesized source that reparses identically."""
    if isinstance(expr, IntLit):
        return str(expr.value)
    if isinstance(expr, StrLit):
        return f'"{expr.value}"'
    if isinstance(expr, BoolLit):
        return "true" if expr.value else "false"
    if isinstance(expr, Attr):
        return expr.name
    if isinstance(expr, Not):
        return f"!({pretty_print(expr.operand)})"
    if isinstance(expr, BinOp):
        return f"({pretty_print(expr.lhs)} {expr.op} {pretty_print(expr.rhs)})"
    raise TypeError(f"not an expression node: {expr!r}")
