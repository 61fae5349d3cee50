# scripts/obsctrl/expr.py
"""
EXPRESIONES ESCALARES
=====================

Parser, evaluador y derivación simbólica para las expresiones con las
que los escenarios declaran f0, f_i y h.

Gramática (fija, sin funciones de usuario):

    expr     := term (('+' | '-') term)*
    term     := unary (('*' | '/') unary)*
    unary    := '-' unary | '+' unary | power
    power    := atom ('^' exponent)*          (asociativo por la izquierda)
    exponent := '-' exponent | '+' exponent | atom
    atom     := NUMBER | x1..xn | u1..up | t | FUNC '(' expr ')' | '(' expr ')'

    FUNC = sin cos tan exp log sqrt abs sign

Todos los operadores binarios asocian por la izquierda, también '^'
(2^3^2 = 64). `sign` existe para que la derivada de `abs` se pueda
imprimir y volver a leer; sign(0) = 0 fija la convención d|f|/df = 0 en 0.

La evaluación acepta arrays: x con forma (..., n) y u con forma (..., p)
se evalúan elemento a elemento, así un sistema declarado por expresiones
se evalúa sobre lotes de estados.
"""

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from obsctrl.errors import ExpressionDomainError, ExpressionSyntaxError, ValidationError

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "sign")

_NUMPY_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sign": np.sign,
}

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()])"
    r")"
)
_VAR_RE = re.compile(r"^([xu])([0-9]+)$")


# ---------------------------------------------------------------------------
# Nodos del AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str   # 'x', 'u' o 't'
    index: int  # base 0; 0 para 't'

    @property
    def name(self):
        return "t" if self.kind == "t" else f"{self.kind}{self.index + 1}"


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Const, Var, Neg, Bin, Call]

ZERO = Const(0.0)
ONE = Const(1.0)


@dataclass(frozen=True)
class Expression:
    """Expresión ya validada contra las dimensiones declaradas (n, p)."""

    root: Node
    n: int
    p: int

    def eval(self, x, u=None, t=0.0):
        return evaluate(self, x, u, t)

    def differentiate(self, var):
        return differentiate(self, var)

    def depends_on(self, var):
        target = _resolve_var(var, self.n, self.p)
        return _contains(self.root, target)

    def __str__(self):
        return to_text(self)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _byte_offset(text, pos):
    return len(text[:pos].encode("utf-8"))


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        match = _TOKEN_RE.match(text, pos)
        if match is None or match.end() == pos:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExpressionSyntaxError(
                f"unexpected character {text[start]!r} at offset {_byte_offset(text, start)}",
                offset=_byte_offset(text, start), text=text,
            )
        kind = match.lastgroup
        start = match.start(kind)
        tokens.append((kind, match.group(kind), start))
        pos = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, n, p):
        self.text = text
        self.n = n
        self.p = p
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message, pos):
        offset = _byte_offset(self.text, pos)
        raise ExpressionSyntaxError(f"{message} at offset {offset}", offset=offset, text=self.text)

    def expect(self, value):
        kind, tok, pos = self.advance()
        if kind != "op" or tok != value:
            shown = "end of input" if kind == "end" else repr(tok)
            self.fail(f"expected {value!r}, found {shown}", pos)

    def parse(self):
        node = self.expr()
        kind, tok, pos = self.peek()
        if kind != "end":
            self.fail(f"unexpected {tok!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, tok, _ = self.peek()
            if kind == "op" and tok in "+-":
                self.advance()
                node = Bin(tok, node, self.term())
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, tok, _ = self.peek()
            if kind == "op" and tok in "*/":
                self.advance()
                node = Bin(tok, node, self.unary())
            else:
                return node

    def unary(self):
        kind, tok, _ = self.peek()
        if kind == "op" and tok == "-":
            self.advance()
            return Neg(self.unary())
        if kind == "op" and tok == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self):
        node = self.atom()
        while True:
            kind, tok, _ = self.peek()
            if kind == "op" and tok == "^":
                self.advance()
                node = Bin("^", node, self.exponent())
            else:
                return node

    def exponent(self):
        kind, tok, _ = self.peek()
        if kind == "op" and tok == "-":
            self.advance()
            return Neg(self.exponent())
        if kind == "op" and tok == "+":
            self.advance()
            return self.exponent()
        return self.atom()

    def atom(self):
        kind, tok, pos = self.advance()
        if kind == "number":
            return Const(float(tok))
        if kind == "name":
            if tok in FUNCTIONS:
                nxt_kind, nxt, nxt_pos = self.peek()
                if nxt_kind != "op" or nxt != "(":
                    self.fail(f"function {tok!r} requires '('", nxt_pos)
                self.advance()
                arg = self.expr()
                self.expect(")")
                return Call(tok, arg)
            return self.variable(tok, pos)
        if kind == "op" and tok == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            self.fail("unexpected end of input", pos)
        self.fail(f"unexpected {tok!r}", pos)

    def variable(self, name, pos):
        if name == "t":
            return Var("t", 0)
        match = _VAR_RE.match(name)
        if match is None:
            self.fail(f"unknown identifier {name!r}", pos)
        kind, number = match.group(1), int(match.group(2))
        limit = self.n if kind == "x" else self.p
        if number < 1 or number > limit:
            self.fail(f"variable {name!r} out of range ({kind}1..{kind}{limit})", pos)
        return Var(kind, number - 1)


def parse(text, dims):
    """Parsea `text` para un sistema con dims = (n, p)."""
    n, p = dims
    if text is None or str(text).strip() == "":
        raise ExpressionSyntaxError("empty expression at offset 0", offset=0, text=text)
    root = _Parser(str(text), int(n), int(p)).parse()
    return Expression(root, int(n), int(p))


# ---------------------------------------------------------------------------
# Evaluación
# ---------------------------------------------------------------------------

def evaluate(e, x, u=None, t=0.0):
    """Evaluación IEEE-754; los errores de dominio no se convierten en inf/nan."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (e.n,):
        raise ValueError(f"x must end with dimension {e.n}, got shape {x.shape}")
    if u is None:
        u = np.zeros(x.shape[:-1] + (e.p,))
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (e.p,):
        raise ValueError(f"u must end with dimension {e.p}, got shape {u.shape}")
    with np.errstate(all="ignore"):
        value = _eval(e.root, x, u, t)
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], np.shape(t))
    value = np.broadcast_to(value, shape)
    return float(value) if shape == () else np.array(value)


def _domain_error(node, reason):
    text = _node_text(node)
    return ExpressionDomainError(f"{reason} in {text}", detail=text)


def _eval(node, x, u, t):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        if node.kind == "x":
            return x[..., node.index]
        if node.kind == "u":
            return u[..., node.index]
        return t
    if isinstance(node, Neg):
        return -_eval(node.arg, x, u, t)
    if isinstance(node, Call):
        arg = _eval(node.arg, x, u, t)
        if node.func == "log" and np.any(np.asarray(arg) <= 0):
            raise _domain_error(node, "log of non-positive value")
        if node.func == "sqrt" and np.any(np.asarray(arg) < 0):
            raise _domain_error(node, "sqrt of negative value")
        return _NUMPY_FUNCS[node.func](arg)
    left = _eval(node.left, x, u, t)
    right = _eval(node.right, x, u, t)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    if node.op == "/":
        if np.any(np.asarray(right) == 0):
            raise _domain_error(node, "division by zero")
        return left / right
    result = np.power(left, right)
    if np.any(~np.isfinite(result)) and np.all(np.isfinite(left)) and np.all(np.isfinite(right)):
        raise _domain_error(node, "power outside its domain")
    return result


# ---------------------------------------------------------------------------
# Constructores con plegado de constantes y eliminación de 0/1
# ---------------------------------------------------------------------------

def _is(node, value):
    return isinstance(node, Const) and node.value == value


def _add(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Bin("+", a, b)


def _sub(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return _neg(b)
    return Bin("-", a, b)


def _mul(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    return Bin("*", a, b)


def _div(a, b):
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0:
        return Const(a.value / b.value)
    if _is(a, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    return Bin("/", a, b)


def _pow(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        with np.errstate(all="ignore"):
            folded = float(np.power(a.value, b.value))
        if np.isfinite(folded):
            return Const(folded)
    if _is(b, 0.0):
        return ONE
    if _is(b, 1.0):
        return a
    return Bin("^", a, b)


def _neg(a):
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _call(func, a):
    if isinstance(a, Const):
        with np.errstate(all="ignore"):
            folded = float(_NUMPY_FUNCS[func](a.value))
        if np.isfinite(folded) and not (func == "log" and a.value <= 0):
            return Const(folded)
    return Call(func, a)


# ---------------------------------------------------------------------------
# Derivación
# ---------------------------------------------------------------------------

def _resolve_var(var, n, p):
    if isinstance(var, Var):
        return var
    name = str(var).strip()
    if name == "t":
        return Var("t", 0)
    match = _VAR_RE.match(name)
    if match is None:
        raise ValueError(f"unknown variable {var!r}")
    kind, number = match.group(1), int(match.group(2))
    limit = n if kind == "x" else p
    if number < 1 or number > limit:
        raise ValueError(f"variable {name!r} is not declared (n={n}, p={p})")
    return Var(kind, number - 1)


def _contains(node, target):
    if isinstance(node, Var):
        return node == target
    if isinstance(node, Const):
        return False
    if isinstance(node, (Neg, Call)):
        return _contains(node.arg, target)
    return _contains(node.left, target) or _contains(node.right, target)


def _d(node, v):
    if isinstance(node, Const):
        return ZERO
    if isinstance(node, Var):
        return ONE if node == v else ZERO
    if isinstance(node, Neg):
        return _neg(_d(node.arg, v))
    if isinstance(node, Call):
        a = node.arg
        da = _d(a, v)
        if _is(da, 0.0):
            return ZERO
        f = node.func
        if f == "sin":
            return _mul(_call("cos", a), da)
        if f == "cos":
            return _neg(_mul(_call("sin", a), da))
        if f == "tan":
            return _div(da, _pow(_call("cos", a), Const(2.0)))
        if f == "exp":
            return _mul(_call("exp", a), da)
        if f == "log":
            return _div(da, a)
        if f == "sqrt":
            return _div(da, _mul(Const(2.0), _call("sqrt", a)))
        if f == "abs":
            return _mul(_call("sign", a), da)
        return ZERO  # sign
    a, b = node.left, node.right
    da, db = _d(a, v), _d(b, v)
    if node.op == "+":
        return _add(da, db)
    if node.op == "-":
        return _sub(da, db)
    if node.op == "*":
        return _add(_mul(da, b), _mul(a, db))
    if node.op == "/":
        return _div(_sub(_mul(da, b), _mul(a, db)), _pow(b, Const(2.0)))
    # potencia
    if _is(db, 0.0):
        return _mul(_mul(b, _pow(a, _sub(b, ONE))), da)
    return _mul(
        _pow(a, b),
        _add(_mul(db, _call("log", a)), _div(_mul(b, da), a)),
    )


def differentiate(e, var):
    """Derivada simbólica de `e` respecto a 'x1'..'xn', 'u1'..'up' o 't'."""
    target = _resolve_var(var, e.n, e.p)
    return Expression(_d(e.root, target), e.n, e.p)


# ---------------------------------------------------------------------------
# Impresión (re-parseable)
# ---------------------------------------------------------------------------

def _format_number(value):
    if float(value).is_integer() and abs(value) < 1e15:
        text = str(int(value))
    else:
        text = repr(float(value))
    return f"({text})" if value < 0 else text


def _node_text(node):
    if isinstance(node, Const):
        return _format_number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{_node_text(node.arg)})"
    if isinstance(node, Call):
        return f"{node.func}({_node_text(node.arg)})"
    return f"({_node_text(node.left)} {node.op} {_node_text(node.right)})"


def to_text(e):
    root = e.root if isinstance(e, Expression) else e
    return _node_text(root)


# ---------------------------------------------------------------------------
# Sistemas declarados por expresiones
# ---------------------------------------------------------------------------

def _stack_exprs(exprs):
    def fn(X):
        return np.stack([np.broadcast_to(evaluate(e, X), np.shape(X)[:-1]) for e in exprs], axis=-1)

    return fn


def _jacobian_of(exprs, n):
    """Callable (..., n) -> (..., len(exprs), n) con las derivadas simbólicas."""
    rows = [[differentiate(e, f"x{j + 1}") for j in range(n)] for e in exprs]

    def fn(X):
        lead = np.shape(X)[:-1]
        return np.stack(
            [np.stack([np.broadcast_to(evaluate(d, X), lead) for d in row], axis=-1) for row in rows],
            axis=-2,
        )

    return fn


def _parse_block(texts, n, where):
    exprs = []
    for k, text in enumerate(texts):
        try:
            e = parse(text, (n, 0))
        except ExpressionSyntaxError as exc:
            exc.context["field"] = f"{where}[{k}]"
            raise
        if _contains(e.root, Var("t", 0)):
            raise ValidationError(f"{where}[{k}] must not depend on t", field=f"{where}[{k}]")
        exprs.append(e)
    return exprs


def expression_system(n, p, drift, control_fields, output, name="expression"):
    """ControlAffineSystem a partir de textos; Jacobianos por derivación simbólica.

    drift: n textos; control_fields: p listas de n textos; output: m textos.
    Los campos sólo pueden depender de x1..xn.
    """
    from obsctrl.model import ControlAffineSystem

    if len(drift) != n:
        raise ValidationError(f"system.drift needs {n} components, got {len(drift)}", field="system.drift")
    if len(control_fields) != p:
        raise ValidationError(
            f"system.control_fields needs {p} fields, got {len(control_fields)}", field="system.control_fields"
        )
    f0 = _parse_block(drift, n, "system.drift")
    fields = []
    for a, texts in enumerate(control_fields):
        if len(texts) != n:
            raise ValidationError(
                f"system.control_fields[{a}] needs {n} components, got {len(texts)}",
                field=f"system.control_fields[{a}]",
            )
        fields.append(_parse_block(texts, n, f"system.control_fields[{a}]"))
    h = _parse_block(output, n, "system.output")
    if not h:
        raise ValidationError("system.output needs at least one component", field="system.output")

    return ControlAffineSystem(
        n=n, p=p, m=len(h),
        drift=_stack_exprs(f0),
        control_fields=tuple(_stack_exprs(fa) for fa in fields),
        output=_stack_exprs(h),
        name=name,
        vectorized=True,
        drift_jacobian=_jacobian_of(f0, n),
        control_jacobians=tuple(_jacobian_of(fa, n) for fa in fields),
        output_jacobian=_jacobian_of(h, n),
    )
