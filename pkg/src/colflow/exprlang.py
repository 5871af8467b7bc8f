"""A small typed expression language over per-event columns.

Pipelines describe derived quantities, selections, and variations as
strings in a C-flavored syntax::

    sum(where(Jet_pt, Jet_eta < 2.4 && Jet_pt > 30)) / MET_pt

Values are F64/I64/BOOL scalars or vectors of them; VEC_BOOL arises only
transiently (vector comparisons feeding `where` or boolean algebra) and is
never a stored column type. Precedence, tightest first: unary, `* / %`,
`+ -`, comparisons (non-associative), `&&`, `||`, `?:`.

The public surface is parse / typecheck / compile_expr / eval_expr plus
`to_text` for canonical printing. Compiled expressions are immutable and
reentrant; evaluation is a pure function of the expression and the row
context. Reductions run left to right so results are bit-reproducible.

Semantics chosen once and kept fixed:
  - mixed I64/F64 arithmetic promotes to F64; I64/I64 division is floor
    division and I64 division or modulo by zero is an eval error
  - F64 division by zero follows IEEE-754 (inf/nan), F64 `x % 0` is nan
  - `sum` always yields F64 (empty vector sums to 0.0); `min`/`max` on an
    empty vector are an eval error; `len` yields I64
  - elementwise ops require equal vector lengths; `v[i]` requires
    0 <= i < len(v) (negative indices are out of range)
  - scalar `&&`/`||` short-circuit; on VEC_BOOL they are elementwise
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

Span = tuple[int, int]  # 1-based (line, col)


class ExprError(Exception):
    def __init__(self, span: Span, message: str):
        super().__init__(f"{span[0]}:{span[1]}: {message}")
        self.span = span
        self.message = message


class ExprSyntaxError(ExprError):
    pass


class ExprTypeError(ExprError):
    pass


class EvalError(ExprError):
    pass


class ValueType(Enum):
    F64 = "F64"
    I64 = "I64"
    BOOL = "BOOL"
    VEC_F64 = "VEC_F64"
    VEC_I64 = "VEC_I64"
    VEC_BOOL = "VEC_BOOL"

    @property
    def is_vector(self) -> bool:
        return self.name.startswith("VEC_")

    @property
    def element(self) -> "ValueType":
        return ValueType[self.name.removeprefix("VEC_")] if self.is_vector else self

    @property
    def vector(self) -> "ValueType":
        return self if self.is_vector else ValueType["VEC_" + self.name]

    @property
    def is_numeric(self) -> bool:
        return self.element in (ValueType.F64, ValueType.I64)


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Literal:
    value: float | int | bool
    type: ValueType
    span: Span = field(compare=False, default=(0, 0))


@dataclass(frozen=True)
class ColumnRef:
    name: str
    span: Span = field(compare=False, default=(0, 0))


@dataclass(frozen=True)
class Unary:
    op: str  # "!" or "-"
    operand: "Expr"
    span: Span = field(compare=False, default=(0, 0))


@dataclass(frozen=True)
class Binary:
    op: str  # * / % + - < <= > >= == != && ||
    left: "Expr"
    right: "Expr"
    span: Span = field(compare=False, default=(0, 0))


@dataclass(frozen=True)
class Ternary:
    cond: "Expr"
    then: "Expr"
    other: "Expr"
    span: Span = field(compare=False, default=(0, 0))


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]
    span: Span = field(compare=False, default=(0, 0))


@dataclass(frozen=True)
class Index:
    base: "Expr"
    index: "Expr"
    span: Span = field(compare=False, default=(0, 0))


Expr = Literal | ColumnRef | Unary | Binary | Ternary | Call | Index

FUNCTIONS = ("len", "sum", "min", "max", "abs", "sqrt", "log", "exp", "where")


# ---------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\|\||&&|==|!=|<=|>=|[-+*/%!<>?:,()\[\]])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "num" | "ident" | "op" | "eof"
    text: str
    span: Span


def _lex(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, col, pos = 1, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError((line, col), f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        chunk = m.group()
        if kind != "ws":
            tokens.append(_Token(kind, chunk, (line, col)))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            col = len(chunk) - chunk.rfind("\n")
        else:
            col += len(chunk)
        pos = m.end()
    tokens.append(_Token("eof", "", (line, col)))
    return tokens


# ---------------------------------------------------------------------------
# Parser (recursive descent, one level per precedence tier)

_CMP_OPS = ("<", "<=", ">", ">=", "==", "!=")


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self._tokens = tokens
        self._pos = 0

    def _peek(self) -> _Token:
        return self._tokens[self._pos]

    def _next(self) -> _Token:
        tok = self._tokens[self._pos]
        self._pos += 1
        return tok

    def _expect(self, text: str) -> _Token:
        tok = self._peek()
        if tok.kind != "op" or tok.text != text:
            shown = tok.text if tok.kind != "eof" else "end of input"
            raise ExprSyntaxError(tok.span, f"expected {text!r}, found {shown!r}")
        return self._next()

    def _at_op(self, *texts: str) -> bool:
        tok = self._peek()
        return tok.kind == "op" and tok.text in texts

    def parse(self) -> Expr:
        expr = self.expr()
        tok = self._peek()
        if tok.kind != "eof":
            raise ExprSyntaxError(tok.span, f"unexpected {tok.text!r} after expression")
        return expr

    def expr(self) -> Expr:
        cond = self.or_level()
        if self._at_op("?"):
            span = self._next().span
            then = self.expr()
            self._expect(":")
            other = self.expr()
            return Ternary(cond, then, other, span)
        return cond

    def or_level(self) -> Expr:
        node = self.and_level()
        while self._at_op("||"):
            span = self._next().span
            node = Binary("||", node, self.and_level(), span)
        return node

    def and_level(self) -> Expr:
        node = self.cmp_level()
        while self._at_op("&&"):
            span = self._next().span
            node = Binary("&&", node, self.cmp_level(), span)
        return node

    def cmp_level(self) -> Expr:
        node = self.add_level()
        if self._at_op(*_CMP_OPS):  # single optional comparison: a < b < c rejected
            tok = self._next()
            node = Binary(tok.text, node, self.add_level(), tok.span)
        return node

    def add_level(self) -> Expr:
        node = self.mul_level()
        while self._at_op("+", "-"):
            tok = self._next()
            node = Binary(tok.text, node, self.mul_level(), tok.span)
        return node

    def mul_level(self) -> Expr:
        node = self.unary_level()
        while self._at_op("*", "/", "%"):
            tok = self._next()
            node = Binary(tok.text, node, self.unary_level(), tok.span)
        return node

    def unary_level(self) -> Expr:
        if self._at_op("!", "-"):
            tok = self._next()
            return Unary(tok.text, self.postfix_level(), tok.span)
        return self.postfix_level()

    def postfix_level(self) -> Expr:
        node = self.atom()
        while self._at_op("["):
            span = self._next().span
            index = self.expr()
            self._expect("]")
            node = Index(node, index, span)
        return node

    def atom(self) -> Expr:
        tok = self._next()
        if tok.kind == "num":
            if any(c in tok.text for c in ".eE"):
                return Literal(float(tok.text), ValueType.F64, tok.span)
            return Literal(int(tok.text), ValueType.I64, tok.span)
        if tok.kind == "ident":
            if tok.text == "true":
                return Literal(True, ValueType.BOOL, tok.span)
            if tok.text == "false":
                return Literal(False, ValueType.BOOL, tok.span)
            if self._at_op("("):
                self._next()
                args: list[Expr] = []
                if not self._at_op(")"):
                    args.append(self.expr())
                    while self._at_op(","):
                        self._next()
                        args.append(self.expr())
                self._expect(")")
                return Call(tok.text, tuple(args), tok.span)
            return ColumnRef(tok.text, tok.span)
        if tok.kind == "op" and tok.text == "(":
            node = self.expr()
            self._expect(")")
            return node
        shown = tok.text if tok.kind != "eof" else "end of input"
        raise ExprSyntaxError(tok.span, f"expected an expression, found {shown!r}")


def parse(text: str) -> Expr:
    """Parse source text into an AST; raises ExprSyntaxError with line:col."""
    return _Parser(_lex(text)).parse()


# ---------------------------------------------------------------------------
# Printer


def to_text(expr: Expr) -> str:
    """Canonical text form; reparsing yields a structurally identical AST."""
    if isinstance(expr, Literal):
        if expr.type is ValueType.BOOL:
            return "true" if expr.value else "false"
        return repr(expr.value)
    if isinstance(expr, ColumnRef):
        return expr.name
    if isinstance(expr, Unary):
        return f"({expr.op}{to_text(expr.operand)})"
    if isinstance(expr, Binary):
        return f"({to_text(expr.left)} {expr.op} {to_text(expr.right)})"
    if isinstance(expr, Ternary):
        return f"({to_text(expr.cond)} ? {to_text(expr.then)} : {to_text(expr.other)})"
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(to_text(a) for a in expr.args)})"
    if isinstance(expr, Index):
        return f"{to_text(expr.base)}[{to_text(expr.index)}]"
    raise TypeError(f"not an Expr node: {expr!r}")


def columns_used(expr: Expr) -> set[str]:
    """Names of all columns the expression reads."""
    out: set[str] = set()

    def walk(node: Expr) -> None:
        if isinstance(node, ColumnRef):
            out.add(node.name)
        elif isinstance(node, Unary):
            walk(node.operand)
        elif isinstance(node, Binary):
            walk(node.left), walk(node.right)
        elif isinstance(node, Ternary):
            walk(node.cond), walk(node.then), walk(node.other)
        elif isinstance(node, Call):
            for a in node.args:
                walk(a)
        elif isinstance(node, Index):
            walk(node.base), walk(node.index)

    walk(expr)
    return out


# ---------------------------------------------------------------------------
# Compiler: typecheck and closure construction in one pass


def _num_promote(a: ValueType, b: ValueType) -> ValueType:
    return ValueType.I64 if a.element is ValueType.I64 and b.element is ValueType.I64 else ValueType.F64


def _fdiv(n: float, d: float) -> float:
    if d != 0.0:
        return n / d
    if n == 0.0 or math.isnan(n):
        return math.nan
    return math.copysign(math.inf, n) * math.copysign(1.0, d)


def _fmod(n: float, d: float) -> float:
    if d == 0.0 or math.isnan(n) or math.isnan(d) or math.isinf(n):
        return math.nan
    return math.fmod(n, d)


def _sqrt(x: float) -> float:
    return math.sqrt(x) if x >= 0.0 else math.nan


def _log(x: float) -> float:
    if x > 0.0:
        return math.log(x)
    return -math.inf if x == 0.0 else math.nan


def _exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


_Fn = Callable[[dict], object]


class CompiledExpr:
    """A typechecked expression compiled to a closure over row contexts."""

    __slots__ = ("type", "_fn", "source")

    def __init__(self, type_: ValueType, fn: _Fn, source: str):
        self.type = type_
        self._fn = fn
        self.source = source

    def __call__(self, ctx: dict) -> object:
        return self._fn(ctx)

    def __repr__(self) -> str:
        return f"CompiledExpr({self.source!r}: {self.type.name})"


def _zip_pairs(lv: list, rv: list, span: Span) -> zip:
    if len(lv) != len(rv):
        raise EvalError(span, f"vector length mismatch: {len(lv)} vs {len(rv)}")
    return zip(lv, rv)


def _compile_arith(node: Binary, lt: ValueType, lf: _Fn, rt: ValueType, rf: _Fn):
    span = node.span
    out = _num_promote(lt, rt)
    int_op = out is ValueType.I64
    if node.op == "/":
        if int_op:
            def op(a, b):
                if b == 0:
                    raise EvalError(span, "integer division by zero")
                return a // b
        else:
            op = _fdiv
    elif node.op == "%":
        if int_op:
            def op(a, b):
                if b == 0:
                    raise EvalError(span, "integer modulo by zero")
                return a % b
        else:
            op = _fmod
    elif node.op == "+":
        op = lambda a, b: a + b
    elif node.op == "-":
        op = lambda a, b: a - b
    else:
        op = lambda a, b: a * b

    if lt.is_vector and rt.is_vector:
        fn = lambda ctx: [op(a, b) for a, b in _zip_pairs(lf(ctx), rf(ctx), span)]
        return out.vector, fn
    if lt.is_vector:
        return out.vector, lambda ctx: (lambda v, s: [op(a, s) for a in v])(lf(ctx), rf(ctx))
    if rt.is_vector:
        return out.vector, lambda ctx: (lambda s, v: [op(s, b) for b in v])(lf(ctx), rf(ctx))
    if not int_op and out is ValueType.F64:
        return out, lambda ctx: float(op(lf(ctx), rf(ctx)))
    return out, lambda ctx: op(lf(ctx), rf(ctx))


_CMP_FUNCS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


def _compile(node: Expr, schema: dict[str, ValueType]) -> tuple[ValueType, _Fn]:
    if isinstance(node, Literal):
        v = node.value
        return node.type, lambda ctx: v

    if isinstance(node, ColumnRef):
        t = schema.get(node.name)
        if t is None:
            raise ExprTypeError(node.span, f"unknown column {node.name!r}")
        name = node.name
        return t, lambda ctx: ctx[name]

    if isinstance(node, Unary):
        t, f = _compile(node.operand, schema)
        if node.op == "!":
            if t is ValueType.BOOL:
                return t, lambda ctx: not f(ctx)
            if t is ValueType.VEC_BOOL:
                return t, lambda ctx: [not b for b in f(ctx)]
            raise ExprTypeError(node.span, f"'!' needs BOOL, got {t.name}")
        if not t.is_numeric:
            raise ExprTypeError(node.span, f"unary '-' needs a numeric value, got {t.name}")
        if t.is_vector:
            return t, lambda ctx: [-x for x in f(ctx)]
        return t, lambda ctx: -f(ctx)

    if isinstance(node, Binary):
        lt, lf = _compile(node.left, schema)
        rt, rf = _compile(node.right, schema)
        op = node.op
        span = node.span

        if op in ("&&", "||"):
            if lt is ValueType.BOOL and rt is ValueType.BOOL:
                if op == "&&":
                    return ValueType.BOOL, lambda ctx: rf(ctx) if lf(ctx) else False
                return ValueType.BOOL, lambda ctx: True if lf(ctx) else rf(ctx)
            if lt is ValueType.VEC_BOOL and rt is ValueType.VEC_BOOL:
                combine = (lambda a, b: a and b) if op == "&&" else (lambda a, b: a or b)
                return ValueType.VEC_BOOL, lambda ctx: [
                    combine(a, b) for a, b in _zip_pairs(lf(ctx), rf(ctx), span)
                ]
            raise ExprTypeError(span, f"'{op}' needs BOOL or VEC_BOOL on both sides, got {lt.name} and {rt.name}")

        if op in _CMP_FUNCS:
            if not (lt.is_numeric and rt.is_numeric):
                raise ExprTypeError(span, f"'{op}' needs numeric operands, got {lt.name} and {rt.name}")
            cmp = _CMP_FUNCS[op]
            if lt.is_vector and rt.is_vector:
                return ValueType.VEC_BOOL, lambda ctx: [
                    cmp(a, b) for a, b in _zip_pairs(lf(ctx), rf(ctx), span)
                ]
            if lt.is_vector:
                return ValueType.VEC_BOOL, lambda ctx: (lambda v, s: [cmp(a, s) for a in v])(lf(ctx), rf(ctx))
            if rt.is_vector:
                return ValueType.VEC_BOOL, lambda ctx: (lambda s, v: [cmp(s, b) for b in v])(lf(ctx), rf(ctx))
            return ValueType.BOOL, lambda ctx: cmp(lf(ctx), rf(ctx))

        # arithmetic
        if not (lt.is_numeric and rt.is_numeric):
            raise ExprTypeError(span, f"'{op}' needs numeric operands, got {lt.name} and {rt.name}")
        return _compile_arith(node, lt, lf, rt, rf)

    if isinstance(node, Ternary):
        ct, cf = _compile(node.cond, schema)
        if ct is not ValueType.BOOL:
            raise ExprTypeError(node.span, f"ternary condition must be scalar BOOL, got {ct.name}")
        tt, tf = _compile(node.then, schema)
        et, ef = _compile(node.other, schema)
        if tt is et:
            out = tt
        elif tt.is_numeric and et.is_numeric and tt.is_vector == et.is_vector:
            out = _num_promote(tt, et).vector if tt.is_vector else _num_promote(tt, et)
            if out.element is ValueType.F64:
                if tt.element is ValueType.I64:
                    inner_t = tf
                    tf = (lambda ctx: [float(x) for x in inner_t(ctx)]) if tt.is_vector else (lambda ctx: float(inner_t(ctx)))
                if et.element is ValueType.I64:
                    inner_e = ef
                    ef = (lambda ctx: [float(x) for x in inner_e(ctx)]) if et.is_vector else (lambda ctx: float(inner_e(ctx)))
        else:
            raise ExprTypeError(node.span, f"ternary branches disagree: {tt.name} vs {et.name}")
        return out, lambda ctx: tf(ctx) if cf(ctx) else ef(ctx)

    if isinstance(node, Index):
        bt, bf = _compile(node.base, schema)
        it, if_ = _compile(node.index, schema)
        if not bt.is_vector:
            raise ExprTypeError(node.span, f"indexing needs a vector, got {bt.name}")
        if it is not ValueType.I64:
            raise ExprTypeError(node.span, f"index must be I64, got {it.name}")
        span = node.span

        def index_fn(ctx):
            v = bf(ctx)
            i = if_(ctx)
            if not 0 <= i < len(v):
                raise EvalError(span, f"index {i} out of range for length {len(v)}")
            return v[i]

        return bt.element, index_fn

    if isinstance(node, Call):
        return _compile_call(node, schema)

    raise TypeError(f"not an Expr node: {node!r}")


def _compile_call(node: Call, schema: dict[str, ValueType]) -> tuple[ValueType, _Fn]:
    span = node.span
    name = node.func
    if name not in FUNCTIONS:
        raise ExprTypeError(span, f"unknown function {name!r}")
    want = 2 if name == "where" else 1
    if len(node.args) != want:
        raise ExprTypeError(span, f"{name}() takes {want} argument{'s' if want > 1 else ''}, got {len(node.args)}")
    compiled = [_compile(a, schema) for a in node.args]
    (at, af) = compiled[0]

    if name == "len":
        if not at.is_vector:
            raise ExprTypeError(span, f"len() needs a vector, got {at.name}")
        return ValueType.I64, lambda ctx: len(af(ctx))

    if name == "sum":
        if not (at.is_vector and at.is_numeric):
            raise ExprTypeError(span, f"sum() needs a numeric vector, got {at.name}")
        return ValueType.F64, lambda ctx: float(sum(af(ctx)))  # left-to-right

    if name in ("min", "max"):
        if not (at.is_vector and at.is_numeric):
            raise ExprTypeError(span, f"{name}() needs a numeric vector, got {at.name}")
        reduce = min if name == "min" else max

        def extremum(ctx):
            v = af(ctx)
            if not v:
                raise EvalError(span, f"{name}() of an empty vector")
            return reduce(v)

        return at.element, extremum

    if name == "abs":
        if not at.is_numeric:
            raise ExprTypeError(span, f"abs() needs a numeric value, got {at.name}")
        if at.is_vector:
            return at, lambda ctx: [abs(x) for x in af(ctx)]
        return at, lambda ctx: abs(af(ctx))

    if name in ("sqrt", "log", "exp"):
        if not at.is_numeric:
            raise ExprTypeError(span, f"{name}() needs a numeric value, got {at.name}")
        f = {"sqrt": _sqrt, "log": _log, "exp": _exp}[name]
        if at.is_vector:
            return ValueType.VEC_F64, lambda ctx: [f(x) for x in af(ctx)]
        return ValueType.F64, lambda ctx: f(af(ctx))

    # where(v, mask)
    (mt, mf) = compiled[1]
    if not at.is_vector:
        raise ExprTypeError(span, f"where() needs a vector first argument, got {at.name}")
    if mt is not ValueType.VEC_BOOL:
        raise ExprTypeError(span, f"where() mask must be VEC_BOOL, got {mt.name}")
    return at, lambda ctx: [x for x, keep in _zip_pairs(af(ctx), mf(ctx), span) if keep]


def typecheck(expr: Expr, schema: dict[str, ValueType]) -> ValueType:
    """Result type of expr under schema; raises ExprTypeError."""
    return _compile(expr, schema)[0]


def compile_expr(expr: Expr | str, schema: dict[str, ValueType]) -> CompiledExpr:
    """Typecheck and compile to a reusable closure over row contexts."""
    if isinstance(expr, str):
        source = expr
        expr = parse(expr)
    else:
        source = to_text(expr)
    t, fn = _compile(expr, schema)
    return CompiledExpr(t, fn, source)


def infer_schema(ctx: dict) -> dict[str, ValueType]:
    """Guess a schema from concrete row values (empty vectors read as VEC_F64)."""
    out: dict[str, ValueType] = {}
    for name, v in ctx.items():
        if isinstance(v, bool):
            out[name] = ValueType.BOOL
        elif isinstance(v, int):
            out[name] = ValueType.I64
        elif isinstance(v, float):
            out[name] = ValueType.F64
        elif isinstance(v, list):
            if not v:
                out[name] = ValueType.VEC_F64
            elif isinstance(v[0], bool):
                out[name] = ValueType.VEC_BOOL
            elif isinstance(v[0], int):
                out[name] = ValueType.VEC_I64
            else:
                out[name] = ValueType.VEC_F64
        else:
            raise TypeError(f"cannot infer a value type for {name}={v!r}")
    return out


def eval_expr(expr: Expr | str, ctx: dict, schema: dict[str, ValueType] | None = None):
    """One-shot evaluation; prefer compile_expr when reusing an expression."""
    if isinstance(expr, str):
        expr = parse(expr)
    return compile_expr(expr, schema if schema is not None else infer_schema(ctx))(ctx)
