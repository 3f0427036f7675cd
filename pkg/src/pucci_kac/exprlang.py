"""Arithmetic expressions for the data functions ``f`` and ``g``.

Grammar, lowest precedence first::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' exponent)?
    exponent := INT ('^' exponent)?          right associative, folded
    atom   := NUMBER | x1..xN | r | CALL '(' expr (',' expr)* ')' | '(' expr ')'

Divisors must be nonzero numeric literals and exponents nonnegative integer
literals, so every field is continuous on the closure of a bounded domain.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from numba import njit

FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "abs": 1, "min": -2, "max": -2}
_NUMBER = re.compile(r"(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")
_IDENT = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


class ExprError(ValueError):
    """Parse error carrying the byte offset into the source text."""

    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at offset {offset}")


# --- AST -------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # zero-based


@dataclass(frozen=True)
class Radius:
    pass


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Pow:
    base: object
    exponent: int


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


# --- tokenizer / parser ----------------------------------------------------


def _tokenize(text: str):
    toks = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        m = _NUMBER.match(text, i)
        if m:
            toks.append(("num", m.group(0), i))
            i = m.end()
            continue
        m = _IDENT.match(text, i)
        if m:
            toks.append(("id", m.group(0), i))
            i = m.end()
            continue
        if ch in "+-*/^(),":
            toks.append((ch, ch, i))
            i += 1
            continue
        raise ExprError(f"unexpected character {ch!r}", i, text)
    toks.append(("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, dim: int):
        self.text = text
        self.dim = dim
        self.toks = _tokenize(text)
        self.pos = 0

    @property
    def tok(self):
        return self.toks[self.pos]

    def error(self, msg, offset=None):
        return ExprError(msg, self.tok[2] if offset is None else offset, self.text)

    def take(self, kind):
        if self.tok[0] != kind:
            found = self.tok[1] or "end of input"
            raise self.error(f"expected {kind!r}, found {found!r}")
        t = self.tok
        self.pos += 1
        return t

    def parse(self):
        node = self.expr()
        if self.tok[0] != "end":
            raise self.error(f"unexpected {self.tok[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.tok[0] in ("+", "-"):
            op = self.take(self.tok[0])[0]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.tok[0] in ("*", "/"):
            op, _, at = self.take(self.tok[0])
            rhs_at = self.tok[2]
            rhs = self.unary()
            if op == "/":
                value = _literal_value(rhs)
                if value is None:
                    raise self.error("division only by a numeric literal", rhs_at)
                if value == 0.0:
                    raise self.error("division by zero", rhs_at)
            node = BinOp(op, node, rhs)
        return node

    def unary(self):
        if self.tok[0] == "-":
            self.take("-")
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok[0] == "^":
            self.take("^")
            return Pow(base, self.exponent())
        return base

    def exponent(self):
        if self.tok[0] != "num":
            raise self.error("exponent must be a nonnegative integer literal")
        _, text, at = self.take("num")
        value = float(text)
        if value != int(value) or value > 1024:
            raise self.error(f"non-integer exponent {text!r}", at)
        k = int(value)
        if self.tok[0] == "^":
            self.take("^")
            k = k ** self.exponent()
            if k > 1024:
                raise self.error("exponent too large", at)
        return k

    def atom(self):
        kind, text, at = self.tok
        if kind == "num":
            self.pos += 1
            if not math.isfinite(float(text)):
                raise ExprError(f"literal {text!r} overflows", at, self.text)
            return Num(float(text))
        if kind == "(":
            self.take("(")
            node = self.expr()
            self.take(")")
            return node
        if kind == "id":
            self.pos += 1
            if text in FUNCTIONS:
                return self.call(text, at)
            if text == "r":
                return Radius()
            m = re.fullmatch(r"x([1-9]\d*)", text)
            if m and int(m.group(1)) <= self.dim:
                return Var(int(m.group(1)) - 1)
            raise ExprError(f"unknown identifier {text!r}", at, self.text)
        raise self.error(f"unexpected {text or 'end of input'!r}")

    def call(self, name, at):
        self.take("(")
        args = [self.expr()]
        while self.tok[0] == ",":
            self.take(",")
            args.append(self.expr())
        self.take(")")
        arity = FUNCTIONS[name]
        if (arity > 0 and len(args) != arity) or (arity < 0 and len(args) < -arity):
            want = arity if arity > 0 else f"at least {-arity}"
            raise ExprError(f"{name} takes {want} argument(s), got {len(args)}", at, self.text)
        return Call(name, tuple(args))


def _literal_value(node):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Neg) and isinstance(node.arg, Num):
        return -node.arg.value
    return None


def _is_constant(node) -> bool:
    if isinstance(node, (Var, Radius)):
        return False
    if isinstance(node, Neg):
        return _is_constant(node.arg)
    if isinstance(node, BinOp):
        return _is_constant(node.left) and _is_constant(node.right)
    if isinstance(node, Pow):
        return _is_constant(node.base)
    if isinstance(node, Call):
        return all(_is_constant(a) for a in node.args)
    return True


# --- printing --------------------------------------------------------------


def _fmt(node) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return f"x{node.index + 1}"
    if isinstance(node, Radius):
        return "r"
    if isinstance(node, Neg):
        return f"(-{_fmt(node.arg)})"
    if isinstance(node, BinOp):
        return f"({_fmt(node.left)} {node.op} {_fmt(node.right)})"
    if isinstance(node, Pow):
        return f"({_fmt(node.base)} ^ {node.exponent})"
    return f"{node.name}({', '.join(_fmt(a) for a in node.args)})"


# --- evaluation ------------------------------------------------------------

_UNARY = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}


def _eval(node, x):
    if isinstance(node, Num):
        return np.full(x.shape[0], node.value)
    if isinstance(node, Var):
        return x[:, node.index]
    if isinstance(node, Radius):
        return np.sqrt(np.sum(x * x, axis=1))
    if isinstance(node, Neg):
        return -_eval(node.arg, x)
    if isinstance(node, BinOp):
        a, b = _eval(node.left, x), _eval(node.right, x)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        return a / b
    if isinstance(node, Pow):
        return _ipow(_eval(node.base, x), node.exponent)
    args = [_eval(a, x) for a in node.args]
    if node.name in _UNARY:
        return _UNARY[node.name](args[0])
    reduce = np.minimum if node.name == "min" else np.maximum
    out = args[0]
    for a in args[1:]:
        out = reduce(out, a)
    return out


def _ipow(base, k):
    out = np.ones_like(base)
    b = base.copy()
    while k:
        if k & 1:
            out = out * b
        b = b * b
        k >>= 1
    return out


# RPN program for the compiled evaluator: rows of (opcode, argument)
OP_CONST, OP_VAR, OP_R, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_NEG, OP_POW = range(9)
OP_SIN, OP_COS, OP_EXP, OP_ABS, OP_MIN, OP_MAX = range(9, 15)
_CALL_OPS = {"sin": OP_SIN, "cos": OP_COS, "exp": OP_EXP, "abs": OP_ABS, "min": OP_MIN, "max": OP_MAX}
_BIN_OPS = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV}


def _compile(node, ops, consts):
    if isinstance(node, Num):
        consts.append(node.value)
        ops.append((OP_CONST, len(consts) - 1))
    elif isinstance(node, Var):
        ops.append((OP_VAR, node.index))
    elif isinstance(node, Radius):
        ops.append((OP_R, 0))
    elif isinstance(node, Neg):
        _compile(node.arg, ops, consts)
        ops.append((OP_NEG, 0))
    elif isinstance(node, BinOp):
        _compile(node.left, ops, consts)
        _compile(node.right, ops, consts)
        ops.append((_BIN_OPS[node.op], 0))
    elif isinstance(node, Pow):
        _compile(node.base, ops, consts)
        ops.append((OP_POW, node.exponent))
    else:
        for a in node.args:
            _compile(a, ops, consts)
        ops.append((_CALL_OPS[node.name], len(node.args)))


def _stack_depth(ops) -> int:
    depth = best = 0
    for op, arg in ops:
        if op in (OP_CONST, OP_VAR, OP_R):
            depth += 1
        elif op in (OP_ADD, OP_SUB, OP_MUL, OP_DIV):
            depth -= 1
        elif op in (OP_MIN, OP_MAX):
            depth -= arg - 1
        best = max(best, depth)
    return best


@njit(cache=True)
def rpn_eval(ops, consts, x, stack):
    """Evaluate a compiled program at one point using a caller-owned stack."""
    sp = 0
    for k in range(ops.shape[0]):
        op = ops[k, 0]
        arg = ops[k, 1]
        if op == OP_CONST:
            stack[sp] = consts[arg]
            sp += 1
        elif op == OP_VAR:
            stack[sp] = x[arg]
            sp += 1
        elif op == OP_R:
            s = 0.0
            for i in range(x.shape[0]):
                s += x[i] * x[i]
            stack[sp] = math.sqrt(s)
            sp += 1
        elif op == OP_ADD:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] + stack[sp]
        elif op == OP_SUB:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] - stack[sp]
        elif op == OP_MUL:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] * stack[sp]
        elif op == OP_DIV:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] / stack[sp]
        elif op == OP_NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op == OP_POW:
            b = stack[sp - 1]
            out = 1.0
            e = arg
            while e:
                if e & 1:
                    out = out * b
                b = b * b
                e >>= 1
            stack[sp - 1] = out
        elif op == OP_SIN:
            stack[sp - 1] = math.sin(stack[sp - 1])
        elif op == OP_COS:
            stack[sp - 1] = math.cos(stack[sp - 1])
        elif op == OP_EXP:
            stack[sp - 1] = math.exp(stack[sp - 1])
        elif op == OP_ABS:
            stack[sp - 1] = abs(stack[sp - 1])
        else:
            base = sp - arg
            v = stack[base]
            for j in range(base + 1, sp):
                if op == OP_MIN:
                    v = min(v, stack[j])
                else:
                    v = max(v, stack[j])
            sp = base + 1
            stack[base] = v
    return stack[0]


class ScalarField:
    """A parsed expression in ``x1..xN`` and ``r = |x|``."""

    def __init__(self, source: str, ast, dim: int):
        self.source = source
        self.ast = ast
        self.dim = dim
        ops, consts = [], []
        _compile(ast, ops, consts)
        self.ops = np.array(ops, dtype=np.int64).reshape(-1, 2)
        self.consts = np.array(consts + [0.0], dtype=float)
        self.stack_size = max(1, _stack_depth(ops))

    @property
    def is_constant(self) -> bool:
        """True when the expression mentions neither ``x1..xN`` nor ``r``."""
        return _is_constant(self.ast)

    def canonical(self) -> str:
        return _fmt(self.ast)

    def __str__(self) -> str:
        return self.canonical()

    def __repr__(self) -> str:
        return f"ScalarField({self.source!r}, dim={self.dim})"

    def __call__(self, x):
        return self.eval(x)

    def eval(self, x):
        """Value at ``x``; ``x`` may be one point or an array of points."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"point dimension {x.shape[-1:]} does not match field dimension {self.dim}")
        pts = x.reshape(-1, self.dim)
        out = _eval(self.ast, pts)
        if x.ndim == 1:
            return float(out[0])
        return out.reshape(x.shape[:-1])

    def eval_compiled(self, x) -> float:
        x = np.ascontiguousarray(x, dtype=float)
        return rpn_eval(self.ops, self.consts, x, np.empty(self.stack_size))

    def shifted(self, c: float) -> "ScalarField":
        """The field ``self + c``."""
        return ScalarField(f"({self.source}) + {float(c)!r}", BinOp("+", self.ast, Num(float(c))), self.dim)


def parse(text: str, dim: int) -> ScalarField:
    if dim < 1:
        raise ValueError(f"dimension must be positive, got {dim}")
    return ScalarField(text, _Parser(text, dim).parse(), dim)
