"""Parser for the bracketed tool-call notation used in model responses.

A response looks like::

    The route is [PATH(string: Berlin, string: Munich) → %s1]. Trains:
    [FILTER(list: %s1, string: train) → %s2]. ### The answer is %s2.

Grammar (whitespace is free between tokens)::

    Call   := '[' NAME '(' [Arg (',' Arg)*] ')' [Arrow Result] ']'
    Arg    := KEY ':' Value
    Value  := Call | '%s' DIGITS | literal running to the next top-level ',' or ')'
    Arrow  := '→' | '->'
    Result := '%s' DIGITS | bare literal up to ']'

Everything after the last ``###`` is the final answer.  Bracketed spans that
start like a call but do not complete the grammar are kept as errors on the
graph; ``parse_response`` never raises.
"""

from __future__ import annotations

import heapq
import re
from dataclasses import dataclass, field
from typing import Union

from .registry import ToolStore

FINAL_DELIMITER = "###"
MAX_NESTING = 32

_CALL_START = re.compile(r"\[\s*([A-Z][A-Z0-9_]*)\s*\(")
_KEY = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*:")
_ARG_PLACEHOLDER = re.compile(r"%s(\d+)(?=\s*[,)])")
_RESULT_PLACEHOLDER = re.compile(r"%s(\d+)\s*\]")
_ARROW = re.compile(r"\s*(?:→|->)\s*")
_PLACEHOLDER_REF = re.compile(r"%s(\d+)")

_OPEN = "([{"
_CLOSE = ")]}"


@dataclass(frozen=True)
class Literal:
    text: str

    @property
    def refs(self) -> tuple[int, ...]:
        """Placeholder ids mentioned inside the literal (e.g. ``appointment with%s2``)."""
        return tuple(int(m) for m in _PLACEHOLDER_REF.findall(self.text) if int(m) > 0)


@dataclass(frozen=True)
class Placeholder:
    id: int


@dataclass(frozen=True)
class Nested:
    call: "ToolCall"


ArgValue = Union[Literal, Placeholder, Nested]


@dataclass(frozen=True)
class Arg:
    key: str
    value: ArgValue


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    args: tuple[Arg, ...]
    result_placeholder: int | None
    span: tuple[int, int]
    index: int
    parent: int | None = None
    result_literal: str | None = None

    def consumed(self) -> list[int]:
        """Placeholder ids read by this call's own arguments (not by nested calls)."""
        ids: list[int] = []
        for arg in self.args:
            if isinstance(arg.value, Placeholder):
                ids.append(arg.value.id)
            elif isinstance(arg.value, Literal):
                ids.extend(arg.value.refs)
        return ids


@dataclass(frozen=True)
class ParseIssue:
    start: int
    end: int
    message: str
    kind: str = "syntax"


@dataclass
class CallGraph:
    """Calls in appearance (pre-)order plus placeholder and nesting edges."""

    text: str = ""
    calls: list[ToolCall] = field(default_factory=list)
    edges: list[tuple[int, int]] = field(default_factory=list)
    final_answer: str = ""
    has_final_answer: bool = False
    errors: list[ParseIssue] = field(default_factory=list)
    # (consumer index, arg position) -> producer index, None when unbound
    bindings: dict[tuple[int, int], int | None] = field(default_factory=dict)
    unbound: set[int] = field(default_factory=set)
    # ordered pieces of the body: free-text strings and indices of top-level calls
    pieces: list[Union[str, int]] = field(default_factory=list)
    final_region_start: int = 0

    @property
    def free_text(self) -> str:
        return "".join(p for p in self.pieces if isinstance(p, str))

    @property
    def top_level(self) -> list[ToolCall]:
        return [c for c in self.calls if c.parent is None]

    @property
    def produced(self) -> set[int]:
        return {c.result_placeholder for c in self.calls if c.result_placeholder is not None}

    @property
    def consumed(self) -> set[int]:
        return {pid for c in self.calls for pid in c.consumed()}

    @property
    def cyclic(self) -> bool:
        return _kahn(len(self.calls), self.edges) is None

    @property
    def unresolved(self) -> bool:
        duplicated = any(e.kind == "duplicate_placeholder" for e in self.errors)
        return bool(self.unbound) or duplicated or self.cyclic

    def tool_names(self) -> list[str]:
        return [c.tool_name for c in self.calls]


class _Fail(Exception):
    def __init__(self, pos: int, message: str):
        super().__init__(message)
        self.pos = pos
        self.message = message


class _Parser:
    def __init__(self, text: str, limit: int):
        self.text = text
        self.limit = limit
        self.calls: list[ToolCall | None] = []

    def skip_ws(self, i: int) -> int:
        while i < self.limit and self.text[i].isspace():
            i += 1
        return i

    def call(self, pos: int, depth: int, parent: int | None) -> tuple[ToolCall, int]:
        if depth > MAX_NESTING:
            raise _Fail(pos, "calls nested too deeply")
        m = _CALL_START.match(self.text, pos, self.limit)
        if m is None:
            raise _Fail(pos, "expected a tool call")
        name = m.group(1)
        index = len(self.calls)
        self.calls.append(None)
        args: list[Arg] = []
        i = self.skip_ws(m.end())
        if i < self.limit and self.text[i] == ")":
            i += 1
        else:
            while True:
                km = _KEY.match(self.text, i, self.limit)
                if km is None:
                    raise _Fail(i, "expected 'key: value' argument")
                i = self.skip_ws(km.end())
                value, i = self.value(i, depth, index)
                args.append(Arg(km.group(1), value))
                i = self.skip_ws(i)
                if i >= self.limit:
                    raise _Fail(i, f"unterminated call to {name}")
                ch = self.text[i]
                if ch == ",":
                    i += 1
                elif ch == ")":
                    i += 1
                    break
                else:
                    raise _Fail(i, f"expected ',' or ')' in call to {name}")
        result_id = None
        result_literal = None
        am = _ARROW.match(self.text, i, self.limit)
        if am is not None:
            i = am.end()
            pm = _RESULT_PLACEHOLDER.match(self.text, i, self.limit)
            if pm is not None:
                result_id = int(pm.group(1))
                if result_id <= 0:
                    raise _Fail(i, "placeholder ids must be positive")
                i = pm.end()
            else:
                j = i
                while j < self.limit and self.text[j] not in "[]":
                    j += 1
                if j >= self.limit or self.text[j] != "]":
                    raise _Fail(j, f"unterminated result of {name}")
                result_literal = self.text[i:j].strip()
                if not result_literal:
                    raise _Fail(i, f"empty result after arrow in {name}")
                i = j + 1
        else:
            i = self.skip_ws(i)
            if i >= self.limit or self.text[i] != "]":
                raise _Fail(i, f"expected ']' closing call to {name}")
            i += 1
        call = ToolCall(
            tool_name=name,
            args=tuple(args),
            result_placeholder=result_id,
            span=(pos, i),
            index=index,
            parent=parent,
            result_literal=result_literal,
        )
        self.calls[index] = call
        return call, i

    def value(self, i: int, depth: int, owner: int) -> tuple[ArgValue, int]:
        if _CALL_START.match(self.text, i, self.limit):
            nested, j = self.call(i, depth + 1, owner)
            return Nested(nested), j
        pm = _ARG_PLACEHOLDER.match(self.text, i, self.limit)
        if pm is not None:
            pid = int(pm.group(1))
            if pid <= 0:
                raise _Fail(i, "placeholder ids must be positive")
            return Placeholder(pid), pm.end()
        j = i
        stack: list[str] = []
        while j < self.limit:
            ch = self.text[j]
            if ch in _OPEN:
                stack.append(ch)
            elif ch in _CLOSE:
                if not stack:
                    break
                stack.pop()
            elif ch == "," and not stack:
                break
            j += 1
        if j >= self.limit:
            raise _Fail(j, "unterminated argument value")
        text = self.text[i:j].strip()
        if not text:
            raise _Fail(i, "empty argument value")
        return Literal(text), j


def _final_split(text: str) -> int:
    idx = text.rfind(FINAL_DELIMITER)
    return len(text) if idx < 0 else idx


def parse_response(text: str) -> CallGraph:
    """Extract every tool call from ``text`` into a :class:`CallGraph`."""
    if not isinstance(text, str):
        text = bytes(text).decode("utf-8", errors="replace")
    limit = _final_split(text)
    graph = CallGraph(text=text, final_region_start=limit)
    if limit < len(text):
        graph.has_final_answer = True
        graph.final_answer = text[limit + len(FINAL_DELIMITER):].strip()

    parser = _Parser(text, limit)
    pos = 0
    free_start = 0
    while pos < limit:
        nxt = text.find("[", pos, limit)
        if nxt < 0:
            break
        if not _CALL_START.match(text, nxt, limit):
            pos = nxt + 1
            continue
        checkpoint = len(parser.calls)
        try:
            call, end = parser.call(nxt, 0, None)
        except _Fail as fail:
            del parser.calls[checkpoint:]
            end = max(fail.pos, nxt + 1)
            graph.errors.append(ParseIssue(nxt, end, fail.message))
            pos = end
            continue
        if nxt > free_start:
            graph.pieces.append(text[free_start:nxt])
        graph.pieces.append(call.index)
        free_start = pos = end
    if free_start < limit:
        graph.pieces.append(text[free_start:limit])

    graph.calls = [c for c in parser.calls if c is not None]
    _link(graph)
    return graph


def _link(graph: CallGraph) -> None:
    producers: dict[int, list[int]] = {}
    for call in graph.calls:
        if call.result_placeholder is None:
            continue
        seen = producers.setdefault(call.result_placeholder, [])
        if seen:
            graph.errors.append(
                ParseIssue(
                    call.span[0],
                    call.span[1],
                    f"placeholder %s{call.result_placeholder} produced more than once",
                    kind="duplicate_placeholder",
                )
            )
        seen.append(call.index)

    edges: set[tuple[int, int]] = set()
    for call in graph.calls:
        if call.parent is not None:
            edges.add((call.index, call.parent))
        for pos, arg in enumerate(call.args):
            if isinstance(arg.value, Placeholder):
                ids = [arg.value.id]
            elif isinstance(arg.value, Literal):
                ids = list(arg.value.refs)
            else:
                continue
            bound: int | None = None
            for pid in ids:
                producer = _bind(producers.get(pid, []), call.index)
                if producer is None:
                    graph.unbound.add(pid)
                else:
                    edges.add((producer, call.index))
                    bound = producer
            if isinstance(arg.value, Placeholder):
                graph.bindings[(call.index, pos)] = bound
    graph.edges = sorted(edges)


def _bind(candidates: list[int], consumer: int) -> int | None:
    if not candidates:
        return None
    earlier = [p for p in candidates if p < consumer]
    if earlier:
        return earlier[-1]
    later = [p for p in candidates if p > consumer]
    if later:
        return later[0]
    return consumer  # self-reference, surfaces as a cycle


def _kahn(n: int, edges: list[tuple[int, int]]) -> list[int] | None:
    indegree = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for src, dst in edges:
        succ[src].append(dst)
        indegree[dst] += 1
    ready = [i for i in range(n) if indegree[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for nxt in succ[node]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                heapq.heappush(ready, nxt)
    return order if len(order) == n else None


def topological_sort(graph: CallGraph) -> tuple[list[int], bool]:
    """Call indices in dependency order, ties broken by appearance.

    Returns ``(order, degraded)``.  A cyclic graph falls back to appearance
    order; a graph with unbound or duplicated placeholders is sorted over the
    edges that did resolve.  Either way ``degraded`` is True.
    """
    n = len(graph.calls)
    order = _kahn(n, graph.edges)
    if order is None:
        return list(range(n)), True
    degraded = bool(graph.unbound) or any(e.kind == "duplicate_placeholder" for e in graph.errors)
    return order, degraded


def topological_order(graph: CallGraph) -> list[str]:
    order, _ = topological_sort(graph)
    return [graph.calls[i].tool_name for i in order]


# -- rendering ---------------------------------------------------------------

def render_value(value: ArgValue) -> str:
    if isinstance(value, Placeholder):
        return f"%s{value.id}"
    if isinstance(value, Nested):
        return render_call(value.call)
    return value.text


def render_call(call: ToolCall) -> str:
    args = ", ".join(f"{a.key}: {render_value(a.value)}" for a in call.args)
    out = f"[{call.tool_name}({args})"
    if call.result_placeholder is not None:
        out += f" → %s{call.result_placeholder}"
    elif call.result_literal is not None:
        out += f" → {call.result_literal}"
    return out + "]"


def render_graph(graph: CallGraph) -> str:
    """Canonical text: free text kept, every call re-rendered with '→' and '%sN'."""
    parts = []
    for piece in graph.pieces:
        parts.append(piece if isinstance(piece, str) else render_call(graph.calls[piece]))
    body = "".join(parts)
    if graph.has_final_answer:
        body += f"{FINAL_DELIMITER} {graph.final_answer}"
    return body


def call_signature(call: ToolCall) -> tuple:
    def sig(v: ArgValue):
        if isinstance(v, Nested):
            return ("call", call_signature(v.call))
        if isinstance(v, Placeholder):
            return ("ph", v.id)
        return ("lit", v.text)

    return (
        call.tool_name,
        tuple((a.key, sig(a.value)) for a in call.args),
        call.result_placeholder,
        call.result_literal,
        call.parent,
    )


def graph_signature(graph: CallGraph) -> tuple:
    """Structure used to decide whether two graphs are isomorphic."""
    return (
        tuple(call_signature(c) for c in graph.calls),
        tuple(graph.edges),
        graph.final_answer,
        graph.has_final_answer,
    )


# -- schema validation -------------------------------------------------------

_DATE = r"(?:\d{4}-\d{1,2}-\d{1,2}|\d{4}/\d{1,2}/\d{1,2}|\d{8})"
_TIME = r"(?:\d{1,2}:\d{2}(?::\d{2})?(?:\s*[AaPp][Mm])?)"
_LITERAL_PATTERNS = {
    "int": re.compile(r"[+-]?\d+"),
    "float": re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?"),
    "bool": re.compile(r"(?i:true|false|yes|no)"),
    "date": re.compile(_DATE),
    "time": re.compile(rf"(?:{_DATE}[ T])?{_TIME}"),
    "datetime": re.compile(rf"{_DATE}(?:[ T]{_TIME})?"),
    "list": re.compile(r"\[.*\]", re.S),
}

# expected kind -> kinds a produced value may have
_ACCEPTS = {
    "string": {"string", "int", "float", "bool", "date", "time", "datetime", "entity", "expression"},
    "expression": {"expression", "int", "float", "string"},
    "float": {"float", "int"},
    "int": {"int"},
    "bool": {"bool"},
    "date": {"date", "datetime"},
    "time": {"time", "datetime"},
    "datetime": {"datetime", "date"},
    "list": {"list"},
    "entity": {"entity"},
}


def literal_matches(kind: str, text: str) -> bool:
    pattern = _LITERAL_PATTERNS.get(kind)
    if pattern is None:
        return bool(text.strip())
    return pattern.fullmatch(text.strip()) is not None


def kinds_compatible(expected: str, actual: str) -> bool:
    return actual in _ACCEPTS.get(expected, {expected})


@dataclass(frozen=True)
class Defect:
    kind: str  # unknown_tool | arity_mismatch | type_mismatch | unbound_placeholder
    message: str
    arg: int | None = None


@dataclass
class CallVerdict:
    index: int
    tool_name: str
    defects: list[Defect] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.defects


@dataclass
class ValidationReport:
    verdicts: list[CallVerdict]
    parse_error_count: int

    @property
    def total(self) -> int:
        return len(self.verdicts)

    @property
    def valid_count(self) -> int:
        return sum(v.valid for v in self.verdicts)

    @property
    def defect_count(self) -> int:
        return sum(len(v.defects) for v in self.verdicts)

    @property
    def ok(self) -> bool:
        return self.parse_error_count == 0 and self.defect_count == 0

    def defect_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for v in self.verdicts:
            for d in v.defects:
                counts[d.kind] = counts.get(d.kind, 0) + 1
        return counts


def validate_calls(graph: CallGraph, store: ToolStore) -> ValidationReport:
    """Check every call against its schema.

    Arguments are matched to parameters by position; keys are ignored.
    """
    verdicts = []
    for call in graph.calls:
        verdict = CallVerdict(call.index, call.tool_name)
        schema = store.get(call.tool_name)
        if schema is None:
            verdict.defects.append(Defect("unknown_tool", f"{call.tool_name} is not in the tool store"))
            verdicts.append(verdict)
            continue
        if len(call.args) != schema.arity:
            verdict.defects.append(
                Defect(
                    "arity_mismatch",
                    f"{call.tool_name} takes {schema.arity} argument(s), got {len(call.args)}",
                )
            )
        for pos, (arg, param) in enumerate(zip(call.args, schema.params)):
            expected = param.kind
            value = arg.value
            if isinstance(value, Literal):
                if not literal_matches(expected, value.text):
                    verdict.defects.append(
                        Defect("type_mismatch", f"{value.text!r} is not a {param.type}", pos)
                    )
                continue
            if isinstance(value, Nested):
                actual = _return_kind(store, value.call.tool_name)
            else:
                producer = graph.bindings.get((call.index, pos))
                if producer is None:
                    verdict.defects.append(
                        Defect("unbound_placeholder", f"%s{value.id} is never produced", pos)
                    )
                    continue
                actual = _return_kind(store, graph.calls[producer].tool_name)
            if actual is not None and not kinds_compatible(expected, actual):
                verdict.defects.append(
                    Defect("type_mismatch", f"{param.name} expects {param.type}, got {actual}", pos)
                )
        verdicts.append(verdict)
    syntax_errors = len(graph.errors)
    return ValidationReport(verdicts, syntax_errors)


def _return_kind(store: ToolStore, name: str) -> str | None:
    schema = store.get(name)
    return None if schema is None else schema.return_kind
