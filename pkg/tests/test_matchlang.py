import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskcaf.matchlang import (
    Attr,
    BinOp,
    BoolLit,
    DivisionByZero,
    IntLit,
    Not,
    ParseError,
    StrLit,
    TypeMismatch,
    UndefinedAttribute,
    eval_requirements,
    parse_requirements,
    pretty_print,
)

AD = {"Memory": 4096, "Site": "CNAF", "Arch": "x86_64", "GridFlavor": "EGEE", "Disk": 100}


class TestParse:
    def test_conjunction_shape(self):
        expr = parse_requirements('Memory >= 2048 && Site == "CNAF"')
        assert expr == BinOp("&&", BinOp(">=", Attr("Memory"), IntLit(2048)), BinOp("==", Attr("Site"), StrLit("CNAF")))

    def test_bare_boolean(self):
        assert parse_requirements("true") == BoolLit(True)
        assert parse_requirements("false") == BoolLit(False)

    def test_incomplete_expression_position(self):
        with pytest.raises(ParseError) as err:
            parse_requirements("Memory >")
        assert err.value.line == 1
        assert err.value.column == 9

    def test_trailing_garbage(self):
        with pytest.raises(ParseError):
            parse_requirements("1 + 2 3")

    def test_unbalanced_paren(self):
        with pytest.raises(ParseError):
            parse_requirements("(1 + 2")

    def test_unterminated_string(self):
        with pytest.raises(ParseError):
            parse_requirements('Site == "CNA')

    def test_precedence_shape(self):
        # ! binds tighter than * / than + - than comparisons than && than ||
        expr = parse_requirements("1 + 2 * 3 == 7 && true || false")
        assert expr.op == "||"
        assert expr.lhs.op == "&&"
        assert expr.lhs.lhs.op == "=="
        assert expr.lhs.lhs.lhs == BinOp("+", IntLit(1), BinOp("*", IntLit(2), IntLit(3)))

    def test_parentheses_override(self):
        assert parse_requirements("(1 + 2) * 3") == BinOp("*", BinOp("+", IntLit(1), IntLit(2)), IntLit(3))


class TestEval:
    def test_satisfied(self):
        expr = parse_requirements('Memory >= 2048 && Site == "CNAF"')
        assert eval_requirements(expr, AD) is True

    def test_unsatisfied(self):
        expr = parse_requirements('Memory >= 2048 && Site == "CNAF"')
        assert eval_requirements(expr, {**AD, "Memory": 1024}) is False

    def test_undefined_attribute(self):
        with pytest.raises(UndefinedAttribute) as err:
            eval_requirements(parse_requirements('Rack == "x"'), AD)
        assert err.value.name == "Rack"

    def test_arithmetic_precedence_example(self):
        assert eval_requirements(parse_requirements("1 + 2 * 3 == 7"), {}) is True

    def test_short_circuit_and(self):
        assert eval_requirements(parse_requirements("false && (1/0 == 1)"), {}) is False

    def test_short_circuit_or(self):
        assert eval_requirements(parse_requirements("true || (1/0 == 1)"), {}) is True

    def test_division_by_zero_position(self):
        with pytest.raises(DivisionByZero):
            eval_requirements(parse_requirements("1 / (2 - 2)"), {})

    def test_truncating_division(self):
        assert eval_requirements(parse_requirements("7 / 2"), {}) == 3
        assert eval_requirements(parse_requirements("(0 - 7) / 2"), {}) == -3

    def test_type_mismatch_not_false(self):
        with pytest.raises(TypeMismatch):
            eval_requirements(parse_requirements('Memory == "4096"'), AD)
        with pytest.raises(TypeMismatch):
            eval_requirements(parse_requirements('Site < "Z"'), AD)
        with pytest.raises(TypeMismatch):
            eval_requirements(parse_requirements("1 && true"), {})

    def test_not_operator(self):
        assert eval_requirements(parse_requirements("!false"), {}) is True
        assert eval_requirements(parse_requirements("!!true"), {}) is True


# -- round-trip property -------------------------------------------------------

_names = st.sampled_from(["Memory", "Site", "Arch", "Disk", "GridFlavor"])
_leaf = st.one_of(
    st.integers(min_value=0, max_value=9999).map(IntLit),
    st.booleans().map(BoolLit),
    st.sampled_from(["CNAF", "FNAL", "x86_64"]).map(StrLit),
    _names.map(Attr),
)
_ops = st.sampled_from(["&&", "||", "==", "!=", "<", "<=", ">", ">=", "+", "-", "*", "/"])


def _tree(children):
    return st.one_of(
        children.map(Not),
        st.tuples(_ops, children, children).map(lambda t: BinOp(t[0], t[1], t[2])),
    )


_exprs = st.recursive(_leaf, _tree, max_leaves=24)


@given(_exprs)
@settings(max_examples=300)
def test_pretty_print_reparses_identically(expr):
    assert parse_requirements(pretty_print(expr)) == expr


# -- precedence oracle ------------------------------------------------------------
#
# An independent precedence-climbing pass turns a flat token list into a
# fully parenthesized string; evaluating that must agree with evaluating
# the original text, errors included.

_PREC = {"||": 1, "&&": 2, "==": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3, "+": 4, "-": 4, "*": 5, "/": 5}


def reference_parenthesize(operands, operators):
    def climb(pos, min_prec):
        lhs = operands[pos]
        pos += 1
        while pos - 1 < len(operators) and _PREC[operators[pos - 1]] >= min_prec:
            op = operators[pos - 1]
            rhs, pos = climb(pos, _PREC[op] + 1)
            lhs = f"({lhs} {op} {rhs})"
        return lhs, pos

    text, _ = climb(0, 0)
    return text


def _outcome(text, ad):
    try:
        return ("ok", eval_requirements(parse_requirements(text), ad))
    except (UndefinedAttribute, TypeMismatch, DivisionByZero) as exc:
        return ("err", type(exc).__name__)


def random_flat_expression(rng):
    n_ops = rng.randint(1, 6)
    operands = []
    for _ in range(n_ops + 1):
        kind = rng.random()
        if kind < 0.55:
            operands.append(str(rng.randint(0, 9)))
        elif kind < 0.7:
            operands.append(rng.choice(["true", "false"]))
        elif kind < 0.85:
            operands.append(rng.choice(["Memory", "Disk"]))
        else:
            operands.append(rng.choice(['"CNAF"', '"FNAL"']))
        if rng.random() < 0.15:
            operands[-1] = "!" + operands[-1]
    operators = [rng.choice(list(_PREC)) for _ in range(n_ops)]
    return operands, operators


def test_precedence_oracle_1000_random_expressions():
    rng = random.Random(20080714)
    agreements = 0
    for _ in range(1000):
        operands, operators = random_flat_expression(rng)
        flat = " ".join(
            token for pair in zip(operands, operators + [""]) for token in pair if token
        )
        parenthesized = reference_parenthesize(operands, operators)
        assert _outcome(flat, AD) == _outcome(parenthesized, AD), (flat, parenthesized)
        agreements += 1
    assert agreements == 1000
