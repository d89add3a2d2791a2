"""Query plans, physical operators, and workload schema.

Plans are immutable (at most binary) operator trees. Node ids are pre-order
positions starting at 1; id 0 is reserved as the absent-child sentinel used
by the structural encoding. Two ingestion paths exist: a compact native text
format (``HJ(SS[a],IS[b]){agg}``) and the array-wrapped JSON documents
emitted by Postgres ``EXPLAIN (FORMAT JSON)``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field


class PlanError(ValueError):
    """Base class for plan construction/ingestion failures."""


class PlanSyntaxError(PlanError):
    """Native-format syntax error, carrying 1-based line/column."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class ExplainFormatError(PlanError):
    """Malformed or unsupported EXPLAIN JSON document."""


@dataclass(frozen=True)
class OperatorKind:
    """A physical operator tag; ``name`` is set only for Other operators."""

    tag: str
    name: str | None = None

    @property
    def is_join(self) -> bool:
        return self.tag in _JOIN_TAGS

    @property
    def is_scan(self) -> bool:
        return self.tag in _SCAN_TAGS

    @property
    def label(self) -> str:
        return self.name if self.tag == "Other" else self.tag

    def __str__(self) -> str:  # pragma: no cover - debug convenience
        return self.label


_JOIN_TAGS = ("HashJoin", "MergeJoin", "NestedLoop")
_SCAN_TAGS = ("SeqScan", "IndexScan")
_UNARY_TAGS = ("Aggregate", "Sort", "GroupBy")

HASH_JOIN = OperatorKind("HashJoin")
MERGE_JOIN = OperatorKind("MergeJoin")
NESTED_LOOP = OperatorKind("NestedLoop")
SEQ_SCAN = OperatorKind("SeqScan")
INDEX_SCAN = OperatorKind("IndexScan")
AGGREGATE = OperatorKind("Aggregate")
SORT = OperatorKind("Sort")
GROUP_BY = OperatorKind("GroupBy")
CUT = OperatorKind("Other", "CUT")

JOIN_KINDS = (HASH_JOIN, MERGE_JOIN, NESTED_LOOP)
SCAN_KINDS = (SEQ_SCAN, INDEX_SCAN)


def other(name: str) -> OperatorKind:
    return OperatorKind("Other", name)


# Native spellings.  CUT marks decomposition boundaries in remainder trees
# and must survive a serialize/parse round trip.
NATIVE_SPELLINGS = {
    "HJ": HASH_JOIN,
    "MJ": MERGE_JOIN,
    "NL": NESTED_LOOP,
    "SS": SEQ_SCAN,
    "IS": INDEX_SCAN,
    "AGG": AGGREGATE,
    "SORT": SORT,
    "GB": GROUP_BY,
    "CUT": CUT,
}
_SPELLING_OF = {v: k for k, v in NATIVE_SPELLINGS.items()}

_FLAG_NAMES = ("subq", "agg", "groupby", "orderby")


@dataclass(frozen=True)
class QueryProps:
    """Query-level boolean properties (sub-query, aggregation, group/order by)."""

    has_subquery: bool = False
    has_aggregation: bool = False
    has_group_by: bool = False
    has_order_by: bool = False

    def as_tuple(self) -> tuple[bool, bool, bool, bool]:
        return (self.has_subquery, self.has_aggregation,
                self.has_group_by, self.has_order_by)


@dataclass(frozen=True)
class PlanNode:
    id: int
    op: OperatorKind
    children: tuple[int, ...] = ()
    table: str | None = None
    est_rows: float = 0.0


@dataclass(frozen=True)
class PlanTree:
    """Rooted operator tree indexed by node id.

    Instances are immutable after construction and safe to share across
    threads. ``nodes`` maps id -> PlanNode; full plans use canonical ids
    1..N in pre-order, task subtrees retain the ids of their origin plan.
    """

    nodes: dict[int, PlanNode]
    root: int
    query_props: QueryProps = field(default_factory=QueryProps)

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> PlanNode:
        return self.nodes[node_id]

    def preorder_ids(self) -> list[int]:
        """Node ids in deterministic root-left-right order."""
        out: list[int] = []
        stack = [self.root]
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(reversed(self.nodes[nid].children))
        return out

    def table_names(self) -> list[str]:
        """Tables referenced by scan nodes, in pre-order, deduplicated."""
        seen: list[str] = []
        for nid in self.preorder_ids():
            t = self.nodes[nid].table
            if t is not None and t not in seen:
                seen.append(t)
        return seen

    def subtree_ids(self, node_id: int) -> list[int]:
        out: list[int] = []
        stack = [node_id]
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(reversed(self.nodes[nid].children))
        return out

    def depth(self) -> int:
        def walk(nid: int) -> int:
            ch = self.nodes[nid].children
            return 1 + (max(walk(c) for c in ch) if ch else 0)

        return walk(self.root)

    def validate(self, schema: WorkloadSchema | None = None,
                 canonical_ids: bool = True) -> None:
        """Check structural invariants; raise PlanError on violation.

        With ``canonical_ids`` the ids must be exactly 1..N in pre-order;
        otherwise (task subtrees) they only need to be positive and strictly
        increasing along the pre-order walk.
        """
        if self.root not in self.nodes:
            raise PlanError(f"root id {self.root} not among nodes")
        parents: dict[int, int] = {}
        for nid, node in self.nodes.items():
            if nid != node.id:
                raise PlanError(f"node table key {nid} != node id {node.id}")
            if nid <= 0:
                raise PlanError(f"node id {nid} must be positive (0 is reserved)")
            if node.est_rows < 0:
                raise PlanError(f"node {nid}: negative est_rows")
            for c in node.children:
                if c not in self.nodes:
                    raise PlanError(f"node {nid}: child id {c} does not resolve")
                if c in parents:
                    raise PlanError(f"node {c} has multiple parents")
                parents[c] = nid
            self._check_arity(node)
        if self.root in parents:
            raise PlanError("root has a parent")
        order = self.preorder_ids()
        if len(order) != len(self.nodes):
            raise PlanError("tree is not connected (unreachable nodes)")
        if canonical_ids:
            if order != list(range(1, len(order) + 1)):
                raise PlanError(f"node ids are not pre-order positions: {order}")
        else:
            if any(a >= b for a, b in zip(order, order[1:])):
                raise PlanError(f"node ids not increasing in pre-order: {order}")
        if schema is not None:
            for node in self.nodes.values():
                if node.table is not None and node.table not in schema.index_of:
                    raise PlanError(f"node {node.id}: unknown table {node.table!r}")

    @staticmethod
    def _check_arity(node: PlanNode) -> None:
        n = len(node.children)
        if node.op.is_join and n != 2:
            raise PlanError(f"node {node.id}: join {node.op.label} has {n} children, expected 2")
        if node.op.is_scan:
            if n != 0:
                raise PlanError(f"node {node.id}: scan {node.op.label} must be a leaf")
            if node.table is None:
                raise PlanError(f"node {node.id}: scan without a table")
        elif node.table is not None:
            raise PlanError(f"node {node.id}: non-scan carries table {node.table!r}")
        if node.op.tag in _UNARY_TAGS and n != 1:
            raise PlanError(f"node {node.id}: {node.op.label} has {n} children, expected 1")
        if n > 2:
            raise PlanError(f"node {node.id}: {n}-ary nodes are not supported")


@dataclass(frozen=True)
class WorkloadSchema:
    """Ordered table list; line/slot order is fixed for an experiment."""

    tables: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [t[0] for t in self.tables]
        if len(set(names)) != len(names):
            raise PlanError("duplicate table names in schema")
        for name, rows in self.tables:
            if rows <= 0:
                raise PlanError(f"table {name!r}: row_count must be positive")

    @property
    def n(self) -> int:
        return len(self.tables)

    @property
    def index_of(self) -> dict[str, int]:
        return {name: i for i, (name, _) in enumerate(self.tables)}

    def row_count(self, name: str) -> int:
        return dict(self.tables)[name]

    @classmethod
    def parse(cls, text: str) -> WorkloadSchema:
        """Parse ``tableName,rowCount`` lines (order defines encoding slots)."""
        tables = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise PlanError(f"schema line {lineno}: expected 'name,rows', got {raw!r}")
            try:
                rows = int(parts[1])
            except ValueError:
                raise PlanError(f"schema line {lineno}: row count {parts[1]!r} is not an integer") from None
            tables.append((parts[0], rows))
        if not tables:
            raise PlanError("schema file defines no tables")
        return cls(tuple(tables))

    def dump(self) -> str:
        return "".join(f"{name},{rows}\n" for name, rows in self.tables)


# ---------------------------------------------------------------------------
# Native format parsing
# ---------------------------------------------------------------------------

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class _NativeParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _line_col(self, pos: int) -> tuple[int, int]:
        line = self.text.count("\n", 0, pos) + 1
        last_nl = self.text.rfind("\n", 0, pos)
        return line, pos - last_nl

    def error(self, message: str, pos: int | None = None) -> PlanSyntaxError:
        line, col = self._line_col(self.pos if pos is None else pos)
        return PlanSyntaxError(message, line, col)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str) -> None:
        self.skip_ws()
        if self.peek() != ch:
            raise self.error(f"expected {ch!r}, found {self.peek()!r}")
        self.pos += 1

    def ident(self, what: str) -> str:
        self.skip_ws()
        m = _IDENT_RE.match(self.text, self.pos)
        if not m:
            raise self.error(f"expected {what}")
        self.pos = m.end()
        return m.group()

    def parse_node(self) -> tuple:
        start = self.pos
        name = self.ident("an operator name")
        op = NATIVE_SPELLINGS.get(name)
        if op is None:
            self.pos = start
            raise self.error(f"unknown operator name {name!r}")
        table = None
        children: list[tuple] = []
        self.skip_ws()
        if self.peek() == "[":
            if not op.is_scan:
                raise self.error(f"operator {name} does not take a [table]")
            self.pos += 1
            table = self.ident("a table name")
            self.expect("]")
        elif op.is_scan:
            raise self.error(f"scan {name} requires a [table]")
        self.skip_ws()
        if self.peek() == "(":
            self.pos += 1
            children.append(self.parse_node())
            self.skip_ws()
            while self.peek() == ",":
                self.pos += 1
                children.append(self.parse_node())
                self.skip_ws()
            self.expect(")")
        n = len(children)
        if op.is_join and n != 2:
            raise self.error(f"join {name} takes exactly 2 children, found {n}", start)
        if op.is_scan and n != 0:
            raise self.error(f"scan {name} takes no children", start)
        if op.tag in _UNARY_TAGS and n != 1:
            raise self.error(f"{name} takes exactly 1 child, found {n}", start)
        if op == CUT and n != 0:
            raise self.error("CUT is a leaf marker and takes no children", start)
        return (op, table, children)

    def parse_flags(self) -> QueryProps:
        self.skip_ws()
        if self.peek() != "{":
            return QueryProps()
        self.pos += 1
        flags: set[str] = set()
        self.skip_ws()
        if self.peek() != "}":
            while True:
                name = self.ident("a flag name")
                if name not in _FLAG_NAMES:
                    raise self.error(f"unknown flag {name!r} (expected one of {', '.join(_FLAG_NAMES)})")
                flags.add(name)
                self.skip_ws()
                if self.peek() == ",":
                    self.pos += 1
                    continue
                break
        self.expect("}")
        return QueryProps(
            has_subquery="subq" in flags,
            has_aggregation="agg" in flags,
            has_group_by="groupby" in flags,
            has_order_by="orderby" in flags,
        )


def parse_native_plan(text: str) -> PlanTree:
    """Parse one plan in the native ``OP[table](child,child){flags}`` format."""
    parser = _NativeParser(text)
    parser.skip_ws()
    shape = parser.parse_node()
    props = parser.parse_flags()
    parser.skip_ws()
    if parser.pos != len(text):
        raise parser.error("unexpected trailing input after plan")
    nodes: dict[int, PlanNode] = {}

    def number(node: tuple, next_id: int) -> int:
        op, table, children = node
        my_id = next_id
        next_id += 1
        child_ids = []
        for child in children:
            child_ids.append(next_id)
            next_id = number(child, next_id)
        nodes[my_id] = PlanNode(my_id, op, tuple(child_ids), table)
        return next_id

    number(shape, 1)
    tree = PlanTree(nodes, 1, props)
    tree.validate()
    return tree


def parse_native_file(text: str) -> list[PlanTree]:
    """Parse one plan per non-empty, non-comment line."""
    plans = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        plans.append(parse_native_plan(line))
    return plans


def serialize_native(tree: PlanTree) -> str:
    """Canonical native form: no whitespace, flags only when set."""

    def render(nid: int) -> str:
        node = tree.nodes[nid]
        spelling = _SPELLING_OF.get(node.op)
        if spelling is None:
            raise PlanError(f"operator {node.op.label!r} has no native spelling")
        s = spelling
        if node.table is not None:
            s += f"[{node.table}]"
        if node.children:
            s += "(" + ",".join(render(c) for c in node.children) + ")"
        return s

    out = render(tree.root)
    props = tree.query_props
    flags = [name for name, on in zip(_FLAG_NAMES, props.as_tuple()) if on]
    if flags:
        out += "{" + ",".join(flags) + "}"
    return out


# ---------------------------------------------------------------------------
# EXPLAIN (FORMAT JSON) ingestion
# ---------------------------------------------------------------------------

EXPLAIN_NODE_TYPES = {
    "Nested Loop": NESTED_LOOP,
    "Hash Join": HASH_JOIN,
    "Merge Join": MERGE_JOIN,
    "Seq Scan": SEQ_SCAN,
    "Index Scan": INDEX_SCAN,
    "Index Only Scan": INDEX_SCAN,
    "Aggregate": AGGREGATE,
    "GroupAggregate": AGGREGATE,
    "HashAggregate": AGGREGATE,
    "Sort": SORT,
}


def parse_explain_json(doc) -> PlanTree:
    """Build a PlanTree from the documented ``EXPLAIN (FORMAT JSON)`` subset.

    ``doc`` may be the JSON text or the already-decoded object. Recognized
    node types map onto operator kinds; anything else becomes Other(name)
    and never lands in a join/scan slot. "Hash" helper nodes are collapsed
    into their Hash Join parent.
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ExplainFormatError(f"invalid JSON: {exc}") from None
    if isinstance(doc, list):
        if not doc:
            raise ExplainFormatError("empty EXPLAIN document")
        doc = doc[0]
    if not isinstance(doc, dict) or "Plan" not in doc:
        raise ExplainFormatError("missing 'Plan' key")

    counter = [0]
    nodes: dict[int, PlanNode] = {}
    # EXPLAIN carries no SQL text; approximate the query-level flags from
    # the operator mix while walking the document.
    seen = {"subq": False, "agg": False, "groupby": False, "orderby": False}

    def build(obj: dict) -> int:
        if not isinstance(obj, dict) or "Node Type" not in obj:
            raise ExplainFormatError("plan node without 'Node Type'")
        node_type = obj["Node Type"]
        if node_type == "Hash":
            children = obj.get("Plans", [])
            if len(children) != 1:
                raise ExplainFormatError("'Hash' helper node without a single child")
            return build(children[0])
        counter[0] += 1
        my_id = counter[0]
        op = EXPLAIN_NODE_TYPES.get(node_type, other(node_type))
        rows = obj.get("Plan Rows", 0)
        if isinstance(rows, bool) or not isinstance(rows, (int, float)):
            raise ExplainFormatError(f"non-numeric 'Plan Rows': {rows!r}")
        table = obj.get("Relation Name") if op.is_scan else None
        if op.is_scan and table is None:
            raise ExplainFormatError(f"scan node {node_type!r} without 'Relation Name'")
        if node_type == "Subquery Scan":
            seen["subq"] = True
        if op.tag == "Aggregate":
            seen["agg"] = True
            if obj.get("Group Key"):
                seen["groupby"] = True
        if op.tag == "Sort":
            seen["orderby"] = True
        child_ids = tuple(build(c) for c in obj.get("Plans", []))
        if len(child_ids) > 2:
            raise ExplainFormatError(f"{node_type!r} has {len(child_ids)} children; "
                                     "plans must be at most binary")
        if op.is_join and len(child_ids) != 2:
            raise ExplainFormatError(f"join {node_type!r} has {len(child_ids)} children, expected 2")
        nodes[my_id] = PlanNode(my_id, op, child_ids, table, float(rows))
        return my_id

    root = build(doc["Plan"])
    props = QueryProps(seen["subq"], seen["agg"], seen["groupby"], seen["orderby"])
    tree = PlanTree(nodes, root, props)
    tree.validate()
    return tree
