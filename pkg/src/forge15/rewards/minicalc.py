"""MiniCalc: a tiny, total-by-budget integer language for code rewards.

Grammar::

    program := fndef+
    fndef   := "fn" IDENT "(" params? ")" "=" expr
    expr    := INT | IDENT | expr op expr | "if" expr "then" expr "else" expr
             | IDENT "(" args? ")" | "(" expr ")"

Operators, loosest first: comparisons (``< <= > >= == !=``, yielding 0/1),
then ``+ -``, then ``* / %``; all left-associative. Arithmetic is signed
64-bit with truncating division; overflow is a runtime error. A leading
``-`` before an integer literal is part of the literal. Evaluation is
capped at ``STEP_BUDGET`` node evaluations and ``MAX_DEPTH`` nested calls,
so every run halts.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass
from typing import Sequence

STEP_BUDGET = 10_000
MAX_DEPTH = 256
INT_MIN, INT_MAX = -(2**63), 2**63 - 1

KEYWORDS = {"fn", "if", "then", "else"}
_TOKEN = re.compile(
    r"\s*(?:(?P<int>\d+)|(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<op><=|>=|==|!=|[-+*/%<>()=,]))"
)
_COMPARE = {"<", "<=", ">", ">=", "==", "!="}
_ADD = {"+", "-"}
_MUL = {"*", "/", "%"}


class MiniCalcError(Exception):
    pass


class ParseError(MiniCalcError):
    pass


class EvalError(MiniCalcError):
    pass


class BudgetExhausted(MiniCalcError):
    pass


# AST: tuples keep the interpreter small and fast
#   ("int", v) | ("var", name) | ("bin", op, l, r) | ("if", c, t, e) | ("call", name, [args])


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[str, ...]
    body: tuple


def tokenize(src: str) -> list[tuple[str, str]]:
    out, pos = [], 0
    src = src.rstrip()
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {src[pos:].lstrip()[:1]!r} at offset {pos}")
        kind = m.lastgroup
        text = m.group(kind)
        if kind == "id" and text in KEYWORDS:
            kind = "kw"
        out.append((kind, text))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, tokens):
        self.toks = tokens
        self.i = 0

    def peek(self, k: int = 0):
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else ("eof", "")

    def take(self, text: str | None = None, kind: str | None = None):
        t = self.peek()
        if (text is not None and t[1] != text) or (kind is not None and t[0] != kind) or t[0] == "eof":
            want = text or kind
            raise ParseError(f"expected {want!r}, got {t[1] or 'end of input'!r}")
        self.i += 1
        return t

    def program(self) -> dict[str, Function]:
        fns: dict[str, Function] = {}
        while self.peek()[0] != "eof":
            fn = self.fndef()
            if fn.name in fns:
                raise ParseError(f"duplicate function {fn.name!r}")
            fns[fn.name] = fn
        if not fns:
            raise ParseError("empty program")
        return fns

    def fndef(self) -> Function:
        self.take("fn", "kw")
        name = self.take(kind="id")[1]
        self.take("(")
        params = []
        if self.peek()[1] != ")":
            params.append(self.take(kind="id")[1])
            while self.peek()[1] == ",":
                self.take(",")
                params.append(self.take(kind="id")[1])
        self.take(")")
        if len(set(params)) != len(params):
            raise ParseError(f"duplicate parameter in {name!r}")
        self.take("=")
        return Function(name, tuple(params), self.expr())

    def expr(self):
        return self._binary(0)

    _LEVELS = (_COMPARE, _ADD, _MUL)

    def _binary(self, level: int):
        if level == len(self._LEVELS):
            return self.primary()
        left = self._binary(level + 1)
        while self.peek()[0] == "op" and self.peek()[1] in self._LEVELS[level]:
            op = self.take()[1]
            left = ("bin", op, left, self._binary(level + 1))
        return left

    def primary(self):
        kind, text = self.peek()
        if kind == "int":
            self.take()
            return ("int", _literal(int(text)))
        if text == "-" and self.peek(1)[0] == "int":
            self.take()
            return ("int", _literal(-int(self.take()[1])))
        if text == "if":
            self.take()
            cond = self.expr()
            self.take("then")
            then = self.expr()
            self.take("else")
            return ("if", cond, then, self.expr())
        if kind == "id":
            self.take()
            if self.peek()[1] != "(":
                return ("var", text)
            self.take("(")
            args = []
            if self.peek()[1] != ")":
                args.append(self.expr())
                while self.peek()[1] == ",":
                    self.take(",")
                    args.append(self.expr())
            self.take(")")
            return ("call", text, args)
        if text == "(":
            self.take()
            e = self.expr()
            self.take(")")
            return e
        raise ParseError(f"unexpected token {text or 'end of input'!r}")


def _literal(v: int) -> int:
    if not INT_MIN <= v <= INT_MAX:
        raise ParseError(f"integer literal {v} out of 64-bit range")
    return v


def parse(src: str) -> dict[str, Function]:
    try:
        return _Parser(tokenize(src)).program()
    except RecursionError:
        raise ParseError("expression nested too deeply") from None


def _check(v: int) -> int:
    if not INT_MIN <= v <= INT_MAX:
        raise EvalError("integer overflow")
    return v


def _apply(op: str, a: int, b: int) -> int:
    if op == "+":
        return _check(a + b)
    if op == "-":
        return _check(a - b)
    if op == "*":
        return _check(a * b)
    if op in ("/", "%"):
        if b == 0:
            raise EvalError("division by zero")
        q = abs(a) // abs(b)
        if (a < 0) != (b < 0):
            q = -q
        return _check(q) if op == "/" else a - b * q
    if op == "<":
        return int(a < b)
    if op == "<=":
        return int(a <= b)
    if op == ">":
        return int(a > b)
    if op == ">=":
        return int(a >= b)
    if op == "==":
        return int(a == b)
    return int(a != b)


class Interpreter:
    def __init__(self, fns: dict[str, Function], step_budget: int = STEP_BUDGET, max_depth: int = MAX_DEPTH):
        self.fns = fns
        self.steps_left = step_budget
        self.max_depth = max_depth

    def call(self, name: str, args: Sequence[int]) -> int:
        return self.eval(("call", name, [("int", int(a)) for a in args]), {}, 0)

    def eval(self, node, env: dict[str, int], depth: int) -> int:
        """Evaluate ``node``; ``depth`` counts enclosing non-tail call frames.

        Calls in tail position (a function body or an if-branch) reuse the
        current frame, so unbounded tail recursion runs into the step budget
        rather than the depth limit.
        """
        in_frame = False
        while True:
            self.steps_left -= 1
            if self.steps_left < 0:
                raise BudgetExhausted("step budget exhausted")
            tag = node[0]
            if tag == "int":
                return node[1]
            if tag == "var":
                if node[1] not in env:
                    raise EvalError(f"unknown variable {node[1]!r}")
                return env[node[1]]
            if tag == "bin":
                a = self.eval(node[2], env, depth)
                b = self.eval(node[3], env, depth)
                return _apply(node[1], a, b)
            if tag == "if":
                node = node[2] if self.eval(node[1], env, depth) != 0 else node[3]
                continue
            name, arg_nodes = node[1], node[2]
            args = [self.eval(a, env, depth) for a in arg_nodes]
            fn = self.fns.get(name)
            if fn is None:
                raise EvalError(f"unknown function {name!r}")
            if len(args) != len(fn.params):
                raise EvalError(f"arity mismatch: {name} takes {len(fn.params)} arguments, got {len(args)}")
            if not in_frame:
                in_frame = True
                depth += 1
                if depth > self.max_depth:
                    raise EvalError("call depth exceeded")
            env = dict(zip(fn.params, args))
            node = fn.body


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class

    call: str
    args: tuple[int, ...]
    expect: int

    @classmethod
    def from_json(cls, d) -> "TestCase":
        return cls(d["call"], tuple(int(a) for a in d["args"]), int(d["expect"]))

    def to_json(self) -> dict:
        return {"call": self.call, "args": list(self.args), "expect": self.expect}


@dataclass(frozen=True)
class RunResult:
    passed: bool
    detail: str
    value: int | None = None


def run_minicalc(program: str, test: TestCase, step_budget: int = STEP_BUDGET) -> RunResult:
    if isinstance(test, dict):
        test = TestCase.from_json(test)
    try:
        fns = parse(program)
    except ParseError as exc:
        return RunResult(False, f"parse error: {exc}")
    interp = Interpreter(fns, step_budget)
    old = sys.getrecursionlimit()
    # each MiniCalc call level costs a handful of Python frames
    sys.setrecursionlimit(max(old, 20 * MAX_DEPTH + 2000))
    try:
        value = interp.call(test.call, [int(a) for a in test.args])
    except BudgetExhausted as exc:
        return RunResult(False, str(exc))
    except EvalError as exc:
        return RunResult(False, f"runtime error: {exc}")
    except RecursionError:
        return RunResult(False, "runtime error: expression nested too deeply")
    finally:
        sys.setrecursionlimit(old)
    if value != test.expect:
        return RunResult(False, f"value mismatch: got {value}, expected {test.expect}", value)
    return RunResult(True, "ok", value)


_FENCE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


def extract_program(response: str) -> str:
    m = _FENCE.search(response)
    return m.group(1) if m else response


def score_code(program: str, tests: Sequence[TestCase]) -> float:
    """Fraction of tests that pass; a fenced block is used if present."""
    if not tests:
        raise ValueError("at least one test is required")
    src = extract_program(program)
    return sum(run_minicalc(src, t).passed for t in tests) / len(tests)
