"""A small, total expression language for generated reward and valid-state programs.

Grammar::

    program  := ( "let" IDENT "=" expr ";" )* "return" expr ";"
    expr     := or
    or       := and ( ("or" | "||") and )*
    and      := eq ( ("and" | "&&") eq )*
    eq       := rel ( "==" rel )*
    rel      := add ( ("<" | "<=" | ">" | ">=") add )*
    add      := mul ( ("+" | "-") mul )*
    mul      := unary ( ("*" | "/") unary )*
    unary    := ("-" | "not" | "!") unary | primary
    primary  := NUMBER | IDENT | IDENT "(" args ")" | "if" "(" expr "," expr "," expr ")" | "(" expr ")"

Everything is a real number. Comparisons and logical operators yield 1.0 or
0.0 and treat any nonzero operand as true; ``and``/``or``/``if`` evaluate
lazily. There are no loops, recursion or user functions, so every validated
program terminates.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

REWARD = "reward"
EVAL = "eval"
KINDS = (REWARD, EVAL)
RESERVED = frozenset({"let", "return", "and", "or", "not", "if"})
COMPARISONS = frozenset({"<", "<=", ">", ">=", "=="})
LOGICAL = frozenset({"and", "or"})

# name -> (min arity, max arity)
FUNCTIONS: dict[str, tuple[int, int]] = {
    "abs": (1, 1), "min": (2, 8), "max": (2, 8), "exp": (1, 1), "log": (1, 1), "sqrt": (1, 1),
    "tanh": (1, 1), "sin": (1, 1), "cos": (1, 1), "clip": (3, 3), "sq": (1, 1),
}


class DslError(Exception):
    pass


class DslSyntaxError(DslError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line, self.col, self.reason = line, col, message


class DslValidationError(DslError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class DslEvalError(DslError):
    def __init__(self, message: str, expr: "Expr"):
        super().__init__(f"{message} in `{to_source(expr)}` (line {expr.line}, column {expr.col})")
        self.expr = expr


# ----------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Expr:
    line: int = field(default=0, compare=False, kw_only=True)
    col: int = field(default=0, compare=False, kw_only=True)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Unary(Expr):
    op: str  # "-" or "not"
    operand: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class If(Expr):
    cond: Expr
    then: Expr
    other: Expr


@dataclass(frozen=True)
class Call(Expr):
    func: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class Program:
    kind: str
    bindings: tuple[tuple[str, Expr], ...]
    result: Expr

    def source(self) -> str:
        return to_source(self)

    def digest(self) -> str:
        return hashlib.sha256(to_source(self).encode()).hexdigest()


# ----------------------------------------------------------------------------
# Lexer

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+|\#[^\n]*)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|&&|\|\||[-+*/<>()=,;!])
""", re.VERBOSE)

_ALIASES = {"&&": "and", "||": "or", "!": "not"}


@dataclass(frozen=True)
class Token:
    kind: str  # num, ident, kw, op, eof
    text: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        col = pos - line_start + 1
        if m is None:
            raise DslSyntaxError(f"unexpected character {source[pos]!r}", line, col)
        text = m.group()
        kind = m.lastgroup
        if kind == "ident" and text in RESERVED:
            kind = "kw"
        if kind == "op" and text in _ALIASES:
            kind, text = "kw", _ALIASES[text]
        if kind != "ws":
            tokens.append(Token(kind, text, line, col))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            line_start = pos + text.rindex("\n") + 1
        pos = m.end()
    col = pos - line_start + 1
    tokens.append(Token("eof", "", line, col))
    return tokens


# ----------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, source: str):
        self.toks = tokenize(source)
        self.i = 0
        self.open_parens: list[Token] = []

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def fail(self, message: str, tok: Token | None = None):
        tok = tok or self.tok
        if tok.kind == "eof" and self.open_parens:
            p = self.open_parens[-1]
            raise DslSyntaxError("unclosed '(' before end of input", p.line, p.col)
        raise DslSyntaxError(message, tok.line, tok.col)

    def describe(self, tok: Token) -> str:
        return "end of input" if tok.kind == "eof" else repr(tok.text)

    def accept(self, kind: str, text: str | None = None) -> Token | None:
        t = self.tok
        if t.kind == kind and (text is None or t.text == text):
            self.i += 1
            return t
        return None

    def expect(self, kind: str, text: str | None = None, what: str | None = None) -> Token:
        t = self.accept(kind, text)
        if t is None:
            self.fail(f"expected {what or repr(text)}, found {self.describe(self.tok)}")
        return t

    def program(self, kind: str) -> Program:
        bindings = []
        while self.accept("kw", "let"):
            name_tok = self.tok
            if name_tok.kind == "kw":
                self.fail(f"reserved word {name_tok.text!r} cannot be used as a name")
            self.expect("ident", what="a binding name")
            self.expect("op", "=")
            value = self.expr()
            self.expect("op", ";")
            bindings.append((name_tok.text, value))
        if self.tok.kind == "ident" and self.toks[self.i + 1].text == "=":
            self.fail("assignment must start with 'let'")
        self.expect("kw", "return", what="'let' or 'return'")
        result = self.expr()
        self.expect("op", ";")
        if self.tok.kind != "eof":
            self.fail(f"unexpected {self.describe(self.tok)} after the return statement")
        return Program(kind, tuple(bindings), result)

    def expr(self) -> Expr:
        return self.binary_level(0)

    _LEVELS = (
        ("kw", ("or",)),
        ("kw", ("and",)),
        ("op", ("==",)),
        ("op", ("<", "<=", ">", ">=")),
        ("op", ("+", "-")),
        ("op", ("*", "/")),
    )

    def binary_level(self, level: int) -> Expr:
        if level == len(self._LEVELS):
            return self.unary()
        kind, ops = self._LEVELS[level]
        left = self.binary_level(level + 1)
        while self.tok.kind == kind and self.tok.text in ops:
            op_tok = self.tok
            self.i += 1
            right = self.binary_level(level + 1)
            left = Binary(op_tok.text, left, right, line=op_tok.line, col=op_tok.col)
        return left

    def unary(self) -> Expr:
        t = self.tok
        if self.accept("op", "-"):
            return Unary("-", self.unary(), line=t.line, col=t.col)
        if self.accept("kw", "not"):
            return Unary("not", self.unary(), line=t.line, col=t.col)
        return self.primary()

    def primary(self) -> Expr:
        t = self.tok
        if self.accept("num"):
            value = float(t.text)
            if not math.isfinite(value):
                self.fail(f"numeric literal {t.text} is not finite", t)
            return Num(value, line=t.line, col=t.col)
        if self.accept("kw", "if"):
            args = self.call_args()
            if len(args) != 3:
                self.fail(f"if takes exactly 3 arguments (condition, then, else), got {len(args)}", t)
            return If(*args, line=t.line, col=t.col)
        if self.accept("ident"):
            if self.tok.kind == "op" and self.tok.text == "(":
                return Call(t.text, tuple(self.call_args()), line=t.line, col=t.col)
            return Var(t.text, line=t.line, col=t.col)
        if self.tok.kind == "op" and self.tok.text == "(":
            self.open_parens.append(self.tok)
            self.i += 1
            inner = self.expr()
            self.close_paren("')'")
            return inner
        if t.kind == "kw":
            self.fail(f"reserved word {t.text!r} cannot be used in an expression")
        self.fail(f"expected an expression, found {self.describe(t)}")

    def call_args(self) -> list[Expr]:
        self.open_parens.append(self.expect("op", "("))
        args = [self.expr()]
        while self.accept("op", ","):
            args.append(self.expr())
        self.close_paren("',' or ')'")
        return args

    def close_paren(self, what: str) -> None:
        """Consume ')' or report the unmatched '(' together with what was found instead."""
        if self.accept("op", ")") is None:
            p, t = self.open_parens[-1], self.tok
            where = "end of input" if t.kind == "eof" else f"{t.text!r} at line {t.line}, column {t.col}"
            raise DslSyntaxError(f"unclosed '(': expected {what}, found {where}", p.line, p.col)
        self.open_parens.pop()


def parse(source: str, kind: str) -> Program:
    if kind not in KINDS:
        raise ValueError(f"program kind must be one of {KINDS}, got {kind!r}")
    return _Parser(source).program(kind)


# ----------------------------------------------------------------------------
# Printer


def _fmt(e: Expr) -> str:
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        return f"(-{_fmt(e.operand)})" if e.op == "-" else f"(not {_fmt(e.operand)})"
    if isinstance(e, Binary):
        return f"({_fmt(e.left)} {e.op} {_fmt(e.right)})"
    if isinstance(e, If):
        return f"if({_fmt(e.cond)}, {_fmt(e.then)}, {_fmt(e.other)})"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(_fmt(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


def to_source(node: Program | Expr) -> str:
    """Canonical, fully parenthesized text; parses back to an equal tree."""
    if isinstance(node, Program):
        lines = [f"let {name} = {_fmt(value)};" for name, value in node.bindings]
        lines.append(f"return {_fmt(node.result)};")
        return "\n".join(lines) + "\n"
    return _fmt(node)


# ----------------------------------------------------------------------------
# Program files: "# kind: reward|eval" header line, then the program


_HEADER = re.compile(r"^#\s*kind:\s*(\w+)\s*$")


def dump_program_file(p: Program) -> str:
    return f"# kind: {p.kind}\n{to_source(p)}"


def parse_program_file(text: str, expected_kind: str | None = None) -> Program:
    first = text.split("\n", 1)[0]
    m = _HEADER.match(first.strip())
    if m is None or m.group(1) not in KINDS:
        raise DslSyntaxError("program file must start with '# kind: reward' or '# kind: eval'", 1, 1)
    kind = m.group(1)
    if expected_kind is not None and kind != expected_kind:
        raise DslValidationError([f"expected a {expected_kind} program, file declares kind {kind}"])
    return parse(text, kind)


# ----------------------------------------------------------------------------
# Validation


def _walk(e: Expr) -> Iterable[Expr]:
    yield e
    if isinstance(e, Unary):
        yield from _walk(e.operand)
    elif isinstance(e, Binary):
        yield from _walk(e.left)
        yield from _walk(e.right)
    elif isinstance(e, If):
        yield from _walk(e.cond)
        yield from _walk(e.then)
        yield from _walk(e.other)
    elif isinstance(e, Call):
        for a in e.args:
            yield from _walk(a)


def is_flag_shaped(e: Expr, flag_bindings: frozenset[str] = frozenset()) -> bool:
    """True when the expression can only evaluate to 0.0 or 1.0."""
    if isinstance(e, Num):
        return e.value in (0.0, 1.0)
    if isinstance(e, Var):
        return e.name in flag_bindings
    if isinstance(e, Binary):
        return e.op in COMPARISONS or e.op in LOGICAL
    if isinstance(e, Unary):
        return e.op == "not"
    if isinstance(e, If):
        return is_flag_shaped(e.then, flag_bindings) and is_flag_shaped(e.other, flag_bindings)
    return False


def _names(schema) -> tuple[str, ...]:
    if schema is None:
        return ()
    if hasattr(schema, "names"):
        return tuple(schema.names)
    return tuple(schema)


def check(p: Program, view_schema, action_schema=None) -> list[str]:
    """All validation problems (empty when the program is valid)."""
    problems = []
    view = _names(view_schema)
    actions = _names(action_schema)
    if p.kind == REWARD:
        inputs = set(view) | set(actions)
    else:
        inputs = set(view)
    bound: list[str] = []
    flags: set[str] = set()

    def scan(e: Expr, where: str):
        for node in _walk(e):
            if isinstance(node, Var) and node.name not in inputs and node.name not in bound:
                if p.kind == EVAL and node.name in actions:
                    problems.append(f"{where}: eval programs see only the state; action {node.name!r} "
                                    f"is not available (line {node.line}, column {node.col})")
                else:
                    problems.append(f"{where}: unknown identifier {node.name!r} (line {node.line}, column {node.col})")
            elif isinstance(node, Call):
                if node.func not in FUNCTIONS:
                    problems.append(f"{where}: unknown function {node.func!r}; allowed: {', '.join(sorted(FUNCTIONS))}")
                else:
                    lo, hi = FUNCTIONS[node.func]
                    n = len(node.args)
                    if not lo <= n <= hi:
                        want = str(lo) if lo == hi else f"{lo} to {hi}"
                        problems.append(f"{where}: {node.func} takes {want} arguments, got {n} "
                                        f"(line {node.line}, column {node.col})")

    for name, value in p.bindings:
        scan(value, f"binding {name!r}")
        if name in inputs:
            problems.append(f"binding {name!r} shadows an input identifier")
        if name in bound:
            problems.append(f"binding {name!r} is defined twice")
        if name in FUNCTIONS:
            problems.append(f"binding {name!r} shadows a builtin function")
        bound.append(name)
        if is_flag_shaped(value, frozenset(flags)):
            flags.add(name)
    scan(p.result, "return")
    if p.kind == EVAL and not is_flag_shaped(p.result, frozenset(flags)):
        problems.append(
            "eval program must return a 0/1 value: a comparison, a logical combination (and/or/not), "
            f"or if(cond, 1, 0); got `{to_source(p.result)}`")
    return problems


def validate(p: Program, view_schema, action_schema=None) -> Program:
    problems = check(p, view_schema, action_schema)
    if problems:
        raise DslValidationError(problems)
    return p


# ----------------------------------------------------------------------------
# Evaluation: each node compiles to a closure over the input mapping

Env = Mapping[str, float]
Fn = Callable[[dict], float]


def _finite(value: float, e: Expr) -> float:
    if not math.isfinite(value):
        raise DslEvalError("non-finite intermediate value", e)
    return value


def _compile(e: Expr) -> Fn:
    if isinstance(e, Num):
        v = e.value
        return lambda env: v
    if isinstance(e, Var):
        name = e.name
        return lambda env: env[name]
    if isinstance(e, Unary):
        f = _compile(e.operand)
        if e.op == "-":
            return lambda env: -f(env)
        return lambda env: 1.0 if f(env) == 0.0 else 0.0
    if isinstance(e, If):
        c, a, b = _compile(e.cond), _compile(e.then), _compile(e.other)
        return lambda env: a(env) if c(env) != 0.0 else b(env)
    if isinstance(e, Binary):
        return _compile_binary(e)
    if isinstance(e, Call):
        return _compile_call(e)
    raise TypeError(f"not an expression: {e!r}")


def _compile_binary(e: Binary) -> Fn:
    f, g = _compile(e.left), _compile(e.right)
    op = e.op
    if op == "and":
        return lambda env: 1.0 if f(env) != 0.0 and g(env) != 0.0 else 0.0
    if op == "or":
        return lambda env: 1.0 if f(env) != 0.0 or g(env) != 0.0 else 0.0
    if op == "<":
        return lambda env: 1.0 if f(env) < g(env) else 0.0
    if op == "<=":
        return lambda env: 1.0 if f(env) <= g(env) else 0.0
    if op == ">":
        return lambda env: 1.0 if f(env) > g(env) else 0.0
    if op == ">=":
        return lambda env: 1.0 if f(env) >= g(env) else 0.0
    if op == "==":
        return lambda env: 1.0 if f(env) == g(env) else 0.0
    if op == "+":
        return lambda env: _finite(f(env) + g(env), e)
    if op == "-":
        return lambda env: _finite(f(env) - g(env), e)
    if op == "*":
        return lambda env: _finite(f(env) * g(env), e)
    if op == "/":
        def div(env):
            num, den = f(env), g(env)
            if den == 0.0:
                raise DslEvalError("division by zero", e)
            return _finite(num / den, e)
        return div
    raise TypeError(f"unknown operator {op!r}")


def _compile_call(e: Call) -> Fn:
    args = [_compile(a) for a in e.args]
    name = e.func
    if name in ("min", "max"):
        pick = min if name == "min" else max
        return lambda env: pick(a(env) for a in args)
    if name == "clip":
        x, lo, hi = args
        return lambda env: min(max(x(env), lo(env)), hi(env))
    (x,) = args
    if name == "abs":
        return lambda env: abs(x(env))
    if name == "sq":
        def sq(env):
            v = x(env)
            return _finite(v * v, e)
        return sq
    if name == "exp":
        def exp(env):
            try:
                return _finite(math.exp(x(env)), e)
            except OverflowError:
                raise DslEvalError("exp overflow", e) from None
        return exp
    if name == "log":
        def log(env):
            v = x(env)
            if v <= 0.0:
                raise DslEvalError(f"log of non-positive value {v!r}", e)
            return math.log(v)
        return log
    if name == "sqrt":
        def sqrt(env):
            v = x(env)
            if v < 0.0:
                raise DslEvalError(f"sqrt of negative value {v!r}", e)
            return math.sqrt(v)
        return sqrt
    fn = {"tanh": math.tanh, "sin": math.sin, "cos": math.cos}[name]
    return lambda env: fn(x(env))


class CompiledProgram:
    """A validated program compiled for repeated evaluation. Pure and reentrant."""

    def __init__(self, program: Program, view_schema=None, action_schema=None):
        if view_schema is not None:
            validate(program, view_schema, action_schema)
        self.program = program
        self.kind = program.kind
        self._steps = [(name, _compile(value)) for name, value in program.bindings]
        self._result = _compile(program.result)

    def __call__(self, inputs: Env) -> float:
        env = dict(inputs)
        for name, fn in self._steps:
            env[name] = fn(env)
        return float(self._result(env))

    def reward(self, view: Env, action: Env | None = None) -> float:
        inputs = dict(view)
        if action:
            inputs.update(action)
        return self(inputs)

    def flag(self, view: Env) -> int:
        value = self(view)
        if value not in (0.0, 1.0):
            raise DslEvalError(f"eval program produced {value!r}, expected 0 or 1", self.program.result)
        return int(value)


def compile_program(p: Program, view_schema=None, action_schema=None) -> CompiledProgram:
    return CompiledProgram(p, view_schema, action_schema)


def eval_reward(p: Program | CompiledProgram, view: Env, action: Env | None = None) -> float:
    cp = p if isinstance(p, CompiledProgram) else CompiledProgram(p)
    return cp.reward(view, action)


def eval_flag(p: Program | CompiledProgram, view: Env) -> int:
    cp = p if isinstance(p, CompiledProgram) else CompiledProgram(p)
    if cp.kind != EVAL:
        raise DslError("eval_flag requires an eval-kind program")
    return cp.flag(view)
