"""Expression DSL for user-supplied Finsler norms F(x, y).

Grammar (precedence climbing): ``+ -`` < ``* /`` < unary ``-`` < ``^``
(right-associative).  Atoms are numbers, coordinates ``x0..x{dim-1}`` /
``y0..y{dim-1}``, named parameters (bound at parse time), and the calls
``sqrt(e)`` and ``abs(e)``.  Every error carries a byte offset.

Parsed trees are immutable and evaluation is pure, so they are safe to share
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EvalDomainError, ParseError

# node kinds
CONST = "const"
COORD_X = "x"
COORD_Y = "y"
ADD = "add"
SUB = "sub"
MUL = "mul"
DIV = "div"
POW = "pow"    # children=(base,), value=rational exponent
SQRT = "sqrt"
ABS = "abs"
NEG = "neg"

_BINARY = {ADD: "+", SUB: "-", MUL: "*", DIV: "/"}


@dataclass(frozen=True)
class ExprNode:
    """One node of the evaluation tree.

    ``value`` holds the numeric payload: the constant for ``const``, the
    coordinate index for ``x``/``y``, the exponent for ``pow``.  ``span`` is
    the (start, end) byte range in the source; it is excluded from equality
    so pretty-print/re-parse round trips compare structurally identical.
    """

    kind: str
    children: tuple = ()
    value: float | int | None = None
    span: tuple | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ParsedMetricExpr:
    """A parsed norm expression together with its dimension and bound parameters."""

    root: ExprNode
    dim: int
    params: dict = field(default_factory=dict, compare=False)
    source: str = field(default="", compare=False)

    def uses_x(self):
        """True iff any base-point coordinate appears in the tree."""
        return _uses_kind(self.root, COORD_X)


def _uses_kind(node, kind):
    if node.kind == kind:
        return True
    return any(_uses_kind(c, kind) for c in node.children)


# ---------------------------------------------------------------------------
# tokenizer

_OPS = "+-*/^"


def _tokenize(source):
    tokens = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            try:
                val = float(text)
            except ValueError:
                raise ParseError("malformed number", i, text)
            tokens.append(("num", val, i, j))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(("ident", source[i:j], i, j))
            i = j
            continue
        if c in _OPS:
            tokens.append(("op", c, i, i + 1))
            i += 1
            continue
        if c == "(":
            tokens.append(("lparen", c, i, i + 1))
            i += 1
            continue
        if c == ")":
            tokens.append(("rparen", c, i, i + 1))
            i += 1
            continue
        if c == ",":
            tokens.append(("comma", c, i, i + 1))
            i += 1
            continue
        raise ParseError("unexpected character", i, c)
    tokens.append(("end", "", n, n))
    return tokens


# binding powers; ^ binds tighter than unary minus
_BP_ADD = 10
_BP_MUL = 20
_BP_NEG = 25
_BP_POW = 30


class _Parser:
    def __init__(self, tokens, dim, params):
        self.tokens = tokens
        self.pos = 0
        self.dim = dim
        self.params = params

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind, what):
        tok = self.advance()
        if tok[0] != kind:
            raise ParseError(f"expected {what}", tok[2], str(tok[1]))
        return tok

    def parse(self, min_bp):
        lhs = self.atom()
        while True:
            tok = self.peek()
            if tok[0] != "op" or tok[1] not in "+-*/^":
                break
            op = tok[1]
            bp = {"+": _BP_ADD, "-": _BP_ADD, "*": _BP_MUL,
                  "/": _BP_MUL, "^": _BP_POW}[op]
            if bp < min_bp:
                break
            self.advance()
            # right-associative ^ recurses at its own level, others one above
            rhs = self.parse(bp if op == "^" else bp + 1)
            span = (lhs.span[0], rhs.span[1])
            if op == "^":
                lhs = ExprNode(POW, (lhs,), _fold_exponent(rhs), span)
            else:
                kind = {"+": ADD, "-": SUB, "*": MUL, "/": DIV}[op]
                lhs = ExprNode(kind, (lhs, rhs), None, span)
        return lhs

    def atom(self):
        tok = self.advance()
        kind, text, start, end = tok
        if kind == "num":
            return ExprNode(CONST, (), text, (start, end))
        if kind == "op" and text == "-":
            operand = self.parse(_BP_NEG)
            return ExprNode(NEG, (operand,), None, (start, operand.span[1]))
        if kind == "lparen":
            inner = self.parse(0)
            close = self.expect("rparen", "closing parenthesis")
            return ExprNode(inner.kind, inner.children, inner.value,
                            (start, close[3]))
        if kind == "ident":
            if text in ("sqrt", "abs"):
                self.expect("lparen", "'(' after function name")
                arg = self.parse(0)
                nxt = self.advance()
                if nxt[0] == "comma":
                    raise ParseError(f"{text} takes exactly one argument",
                                     nxt[2], ",")
                if nxt[0] != "rparen":
                    raise ParseError("expected closing parenthesis",
                                     nxt[2], str(nxt[1]))
                node_kind = SQRT if text == "sqrt" else ABS
                return ExprNode(node_kind, (arg,), None, (start, nxt[3]))
            coord = _coordinate(text)
            if coord is not None:
                axis, idx = coord
                if idx >= self.dim:
                    raise ParseError(
                        f"coordinate index {idx} out of range for dim {self.dim}",
                        start, text)
                return ExprNode(axis, (), idx, (start, end))
            if text in self.params:
                val = float(self.params[text])
                # keep const payloads nonnegative so print/re-parse round-trips
                if val < 0:
                    inner = ExprNode(CONST, (), -val, (start, end))
                    return ExprNode(NEG, (inner,), None, (start, end))
                return ExprNode(CONST, (), val, (start, end))
            raise ParseError("unknown identifier", start, text)
        if kind == "end":
            raise ParseError("unexpected end of input", start)
        raise ParseError("unexpected token", start, str(text))


def _coordinate(name):
    if len(name) >= 2 and name[0] in "xy" and name[1:].isdigit():
        return (COORD_X if name[0] == "x" else COORD_Y, int(name[1:]))
    return None


def _fold_exponent(node):
    """Collapse a constant exponent subtree to a finite rational payload."""
    val = _try_fold(node)
    if val is None:
        raise ParseError("pow exponent must be a constant expression",
                         node.span[0])
    if not math.isfinite(val):
        raise ParseError("pow exponent must be finite", node.span[0])
    return val


def _try_fold(node):
    if node.kind == CONST:
        return float(node.value)
    vals = [_try_fold(c) for c in node.children]
    if any(v is None for v in vals):
        return None
    try:
        if node.kind == ADD:
            return vals[0] + vals[1]
        if node.kind == SUB:
            return vals[0] - vals[1]
        if node.kind == MUL:
            return vals[0] * vals[1]
        if node.kind == DIV:
            return vals[0] / vals[1]
        if node.kind == NEG:
            return -vals[0]
        if node.kind == POW:
            return vals[0] ** float(node.value)
    except (ZeroDivisionError, OverflowError):
        return None
    return None


def parse_expr(source, dim, params=None):
    """Parse ``source`` into a :class:`ParsedMetricExpr` over ``dim`` coordinates.

    Named parameters are bound to their values at parse time.  Raises
    :class:`ParseError` with the byte offset on any malformed input.
    """
    if dim < 1:
        raise ParseError("dimension must be >= 1", 0)
    params = dict(params or {})
    tokens = _tokenize(source)
    parser = _Parser(tokens, dim, params)
    root = parser.parse(0)
    trailing = parser.peek()
    if trailing[0] != "end":
        raise ParseError("unexpected trailing input", trailing[2],
                         str(trailing[1]))
    return ParsedMetricExpr(root, dim, params, source)


# ---------------------------------------------------------------------------
# evaluation

def _is_integer(e):
    return abs(e - round(e)) < 1e-12


def eval_node(node, x, y):
    """Evaluate one tree node at coordinate arrays (x, y); pure, no rounding tricks."""
    k = node.kind
    if k == CONST:
        return float(node.value)
    if k == COORD_X:
        return float(x[node.value])
    if k == COORD_Y:
        return float(y[node.value])
    if k == NEG:
        return -eval_node(node.children[0], x, y)
    if k == SQRT:
        v = eval_node(node.children[0], x, y)
        if v < 0.0:
            raise EvalDomainError("sqrt of negative value", node.span)
        return math.sqrt(v)
    if k == ABS:
        return abs(eval_node(node.children[0], x, y))
    if k == POW:
        base = eval_node(node.children[0], x, y)
        e = float(node.value)
        if _is_integer(e):
            return base ** int(round(e))
        if base < 0.0:
            raise EvalDomainError("negative base with non-integer exponent",
                                  node.span)
        if base == 0.0 and e < 0.0:
            raise EvalDomainError("zero base with negative exponent", node.span)
        return base ** e
    a = eval_node(node.children[0], x, y)
    b = eval_node(node.children[1], x, y)
    if k == ADD:
        return a + b
    if k == SUB:
        return a - b
    if k == MUL:
        return a * b
    if k == DIV:
        if b == 0.0:
            raise EvalDomainError("division by zero", node.span)
        return a / b
    raise EvalDomainError(f"unknown node kind {k!r}", node.span)


def eval_expr(expr, x, y):
    """Evaluate a parsed expression at point ``x``, vector ``y``."""
    if len(x) != expr.dim or len(y) != expr.dim:
        raise EvalDomainError(
            f"expected {expr.dim} coordinates, got x:{len(x)} y:{len(y)}")
    val = eval_node(expr.root, x, y)
    if not math.isfinite(val):
        raise EvalDomainError("evaluation produced a non-finite value",
                              expr.root.span)
    return val


def check_homogeneity(expr, samples, tol, seed=0):
    """Sample-test 1-homogeneity of the expression in y.

    Draws ``samples`` random (x, y, lam) with lam in (0, 10] (and the mirrored
    negative lam for the absolute check) and reports the worst relative
    residual |F(x, lam*y) - |lam|*F(x, y)| / F(x, y).
    """
    if samples < 1:
        raise EvalDomainError("samples must be >= 1")
    rng = np.random.default_rng(np.random.Philox(key=seed))
    worst_pos = 0.0
    worst_abs = 0.0
    for _ in range(samples):
        x = rng.uniform(-0.5, 0.5, expr.dim)
        y = rng.standard_normal(expr.dim)
        y /= np.linalg.norm(y)
        lam = rng.uniform(0.0, 10.0) + 1e-3
        base = eval_expr(expr, x, y)
        if base <= 0.0:
            continue
        scaled = eval_expr(expr, x, lam * y)
        worst_pos = max(worst_pos, abs(scaled - lam * base) / base)
        scaled_neg = eval_expr(expr, x, -lam * y)
        worst_abs = max(worst_abs, abs(scaled_neg - lam * base) / base)
    return {
        "positively_homogeneous": worst_pos < tol,
        "absolutely_homogeneous": worst_pos < tol and worst_abs < tol,
        "worst_residual": max(worst_pos, worst_abs),
        "worst_positive_residual": worst_pos,
    }


# ---------------------------------------------------------------------------
# pretty printing

def _prec(node):
    return {ADD: 1, SUB: 1, MUL: 2, DIV: 2, NEG: 3, POW: 4}.get(node.kind, 5)


def _fmt_number(v):
    if float(v) == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_source(node):
    """Render a tree back to parseable source with minimal parentheses."""
    k = node.kind
    if k == CONST:
        v = float(node.value)
        if v < 0:
            return f"({_fmt_number(v)})"
        return _fmt_number(v)
    if k == COORD_X:
        return f"x{node.value}"
    if k == COORD_Y:
        return f"y{node.value}"
    if k in (SQRT, ABS):
        return f"{k}({to_source(node.children[0])})"
    if k == NEG:
        inner = node.children[0]
        body = to_source(inner)
        if _prec(inner) < _prec(node):
            body = f"({body})"
        return f"-{body}"
    if k == POW:
        base = node.children[0]
        body = to_source(base)
        if _prec(base) <= _prec(node):
            body = f"({body})"
        return f"{body}^{_fmt_number(node.value)}"
    a, b = node.children
    sa, sb = to_source(a), to_source(b)
    prec = _prec(node)
    if _prec(a) < prec:
        sa = f"({sa})"
    # - and / are left-associative: parenthesize equal-precedence right children
    if _prec(b) < prec or (_prec(b) == prec and k in (SUB, DIV)):
        sb = f"({sb})"
    op = _BINARY[k]
    return f"{sa} {op} {sb}" if k in (ADD, SUB) else f"{sa}{op}{sb}"
