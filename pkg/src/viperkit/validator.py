"""Static gate for generated programs.

A program is accepted only if it is a single ``execute_command`` function
written in a small imperative subset of Python and touching nothing but the
preset's API, a few patch/segment attributes, and a short list of builtins.
See ``docs/program_language.md`` for the normative grammar.

Rules, checked in order:

R1  parses
R2  module holds exactly one top-level function, ``execute_command``
R3  parameter count fits the task kind
R4  only whitelisted statement and expression nodes
R5  only known names: the preset's API, bound locals, allowed builtins
R6  no imports, dynamic evaluation or I/O primitives, global/nonlocal,
    nested defs, private or unknown attributes
"""

from __future__ import annotations

import ast
import string
from dataclasses import dataclass, field

from .api_spec import ENTRIES, RUNTIME_ATTRIBUTES, VIDEO_SEGMENT

ALLOWED_BUILTINS = frozenset({
    "len", "sorted", "min", "max", "abs", "range", "enumerate", "int", "float", "str", "bool",
    "list", "sum", "round",
})

# Methods of str/list/dict values that programs routinely use.
SAFE_METHODS = frozenset({
    "append", "extend", "insert", "pop", "sort", "reverse", "index", "count", "copy",
    "format", "lower", "upper", "strip", "lstrip", "rstrip", "split", "join", "replace",
    "startswith", "endswith", "title", "capitalize", "items", "keys", "values", "get",
})

BANNED_NAMES = frozenset({
    "eval", "exec", "compile", "open", "__import__", "getattr", "setattr", "delattr", "hasattr",
    "globals", "locals", "vars", "input", "breakpoint", "help", "dir", "type", "object", "super",
    "memoryview", "exit", "quit", "classmethod", "staticmethod", "property", "__builtins__",
})

# Only usable as the type of an except clause.
EXCEPTION_NAMES = frozenset({
    "Exception", "ValueError", "IndexError", "KeyError", "TypeError", "ZeroDivisionError",
    "AttributeError", "RuntimeError",
})

METHOD_OPS = frozenset(e.name for e in ENTRIES if e.owner is not None)
FUNCTION_OPS = frozenset(e.name for e in ENTRIES if e.owner is None)
ALL_OPS = METHOD_OPS | FUNCTION_OPS

ENTRY_POINT = "execute_command"
VIDEO_ARITY = 3
IMAGE_ARITY = 1

_STATEMENTS = (ast.Assign, ast.AugAssign, ast.AnnAssign, ast.For, ast.While, ast.If, ast.Return,
               ast.Try, ast.Expr, ast.Pass, ast.Break, ast.Continue)
_EXPRESSIONS = (ast.Call, ast.keyword, ast.Name, ast.Constant, ast.Attribute, ast.Subscript, ast.Slice,
                ast.BinOp, ast.UnaryOp, ast.BoolOp, ast.Compare, ast.IfExp, ast.List, ast.Tuple,
                ast.Dict, ast.Lambda, ast.arguments, ast.arg, ast.JoinedStr, ast.FormattedValue,
                ast.ExceptHandler, ast.expr_context, ast.operator, ast.unaryop, ast.cmpop, ast.boolop)
_BANNED_NODES = (ast.Import, ast.ImportFrom, ast.Global, ast.Nonlocal, ast.FunctionDef,
                 ast.AsyncFunctionDef)


@dataclass(frozen=True)
class Violation:
    rule: str
    line: int
    col: int
    message: str

    def __str__(self) -> str:
        return f"{self.rule} at {self.line}:{self.col}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    api_calls_used: frozenset[str] = frozenset()

    @property
    def verdict(self) -> str:
        return "invalid" if self.violations else "valid"

    @property
    def valid(self) -> bool:
        return not self.violations

    @property
    def first_rule(self) -> str | None:
        return self.violations[0].rule if self.violations else None

    def reason(self) -> str:
        return "; ".join(str(v) for v in self.violations)


def _v(rule: str, node: ast.AST | None, message: str) -> Violation:
    return Violation(rule, getattr(node, "lineno", 0), getattr(node, "col_offset", 0), message)


def allowed_names(config) -> frozenset[str]:
    subset = set(config.api_subset)
    names = {n for n in subset if n in FUNCTION_OPS}
    names.add("ImagePatch")
    if config.task_kind == "video_mcq" or any(e.owner == VIDEO_SEGMENT and e.name in subset for e in ENTRIES):
        names.add("VideoSegment")
    return frozenset(names | ALLOWED_BUILTINS)


def _bound_names(fn: ast.FunctionDef) -> set[str]:
    bound = {a.arg for a in fn.args.args}
    for node in ast.walk(fn):
        if isinstance(node, ast.Name) and isinstance(node.ctx, ast.Store):
            bound.add(node.id)
        elif isinstance(node, ast.ExceptHandler) and node.name:
            bound.add(node.name)
        elif isinstance(node, ast.Lambda):
            bound.update(a.arg for a in node.args.args)
    return bound


def _annotation_nodes(fn: ast.FunctionDef) -> set[int]:
    """ids of nodes inside annotations; annotations are never evaluated."""
    skip = set()
    roots = [fn.returns] + [a.annotation for a in fn.args.args]
    for node in ast.walk(fn):
        if isinstance(node, ast.AnnAssign):
            roots.append(node.annotation)
    for root in roots:
        if root is not None:
            skip.update(id(n) for n in ast.walk(root))
    return skip


def _check_annotation(root: ast.AST | None, out: list[Violation]) -> None:
    if root is None:
        return
    for n in ast.walk(root):
        if not isinstance(n, (ast.Name, ast.Subscript, ast.List, ast.Tuple, ast.Constant, ast.Load,
                              ast.Attribute, ast.BinOp, ast.BitOr)):
            out.append(_v("R4", n, f"{type(n).__name__} not allowed in an annotation"))
        elif isinstance(n, ast.Attribute) and n.attr.startswith("_"):
            out.append(_v("R6", n, f"private attribute {n.attr!r} in an annotation"))


def _plain_format_string(node: ast.AST) -> bool:
    # "{0.__class__}".format(x) would read attributes behind the validator's back
    if not (isinstance(node, ast.Constant) and isinstance(node.value, str)):
        return False
    try:
        fields = [f for _, f, _, _ in string.Formatter().parse(node.value) if f is not None]
    except ValueError:
        return False
    return not any("." in f or "[" in f for f in fields)


def validate(source: str, config) -> ValidationReport:
    """Check ``source`` against the rules for ``config`` (a PromptConfig)."""
    report = ValidationReport()
    out = report.violations
    try:
        tree = ast.parse(source)
    except SyntaxError as exc:
        out.append(Violation("R1", exc.lineno or 0, exc.offset or 0, f"syntax error: {exc.msg}"))
        return report
    except ValueError as exc:  # null bytes
        out.append(Violation("R1", 0, 0, f"syntax error: {exc}"))
        return report

    body = list(tree.body)
    if body and isinstance(body[0], ast.Expr) and isinstance(getattr(body[0], "value", None), ast.Constant) \
            and isinstance(body[0].value.value, str):
        body = body[1:]  # module docstring
    for node in body:
        if isinstance(node, (ast.Import, ast.ImportFrom)):
            out.append(_v("R6", node, "import statements are not allowed"))
    if out:
        return report
    fns = [n for n in body if isinstance(n, ast.FunctionDef)]
    if len(body) != 1 or len(fns) != 1 or fns[0].name != ENTRY_POINT:
        names = [getattr(n, "name", type(n).__name__) for n in body]
        out.append(_v("R2", body[0] if body else tree,
                      f"expected exactly one top-level function {ENTRY_POINT!r}, found {names}"))
        return report
    fn = fns[0]

    args = fn.args
    expected = VIDEO_ARITY if config.task_kind == "video_mcq" else IMAGE_ARITY
    if args.vararg or args.kwarg or args.kwonlyargs or args.posonlyargs or args.defaults \
            or len(args.args) != expected:
        out.append(_v("R3", fn, f"{ENTRY_POINT} must take exactly {expected} positional parameter(s) "
                                f"without defaults for {config.task_kind}"))
    if fn.decorator_list:
        out.append(_v("R4", fn.decorator_list[0], "decorators are not allowed"))

    _check_annotation(fn.returns, out)
    for a in args.args:
        _check_annotation(a.annotation, out)
    skip = _annotation_nodes(fn)
    for node in ast.walk(fn):
        if isinstance(node, ast.ExceptHandler) and node.type is not None:
            for n in ast.walk(node.type):
                if isinstance(n, ast.Name) and n.id in EXCEPTION_NAMES:
                    skip.add(id(n))
    names_ok = allowed_names(config) | _bound_names(fn)
    subset = set(config.api_subset)

    for stmt in fn.body:
        for node in ast.walk(stmt):
            if id(node) in skip:
                continue
            if isinstance(node, _BANNED_NODES):
                what = {ast.Import: "import", ast.ImportFrom: "import", ast.Global: "global",
                        ast.Nonlocal: "nonlocal"}.get(type(node), "nested function definition")
                out.append(_v("R6", node, f"{what} is not allowed"))
                continue
            if not isinstance(node, _STATEMENTS + _EXPRESSIONS):
                out.append(_v("R4", node, f"{type(node).__name__} is not in the allowed subset"))
                continue
            if isinstance(node, ast.Name):
                if node.id in BANNED_NAMES or node.id.startswith("__"):
                    out.append(_v("R6", node, f"use of {node.id!r} is not allowed"))
                elif isinstance(node.ctx, ast.Load) and node.id not in names_ok:
                    out.append(_v("R5", node, f"unknown name {node.id!r}"))
            elif isinstance(node, ast.Attribute):
                attr = node.attr
                if attr == "format" and not _plain_format_string(node.value):
                    out.append(_v("R6", node, "format() needs a literal template without field access"))
                    continue
                if attr.startswith("_"):
                    out.append(_v("R6", node, f"private attribute {attr!r}"))
                elif attr in ALL_OPS and attr not in RUNTIME_ATTRIBUTES and attr not in SAFE_METHODS:
                    if attr not in subset:
                        out.append(_v("R5", node, f"{attr!r} is not part of this API"))
                elif attr not in RUNTIME_ATTRIBUTES and attr not in SAFE_METHODS:
                    out.append(_v("R6", node, f"attribute {attr!r} is not allowed"))

    if not out:
        report.api_calls_used = frozenset(extract_api_usage(source))
    return report


def extract_api_usage(source: str) -> set[str]:
    """Names of API operations called anywhere in ``source`` (dead code included)."""
    tree = ast.parse(source)
    used = set()
    for node in ast.walk(tree):
        if not isinstance(node, ast.Call):
            continue
        f = node.func
        if isinstance(f, ast.Name) and f.id in FUNCTION_OPS:
            used.add(f.id)
        elif isinstance(f, ast.Attribute) and f.attr in METHOD_OPS:
            used.add(f.attr)
    return used
